//! Named parameter storage, seeded initialization and checkpoint directories.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{io_err, ModelError, Result};

pub const CHECKPOINT_FORMAT: &str = "spanedit-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;
const CONFIG_FILE: &str = "config.json";
const WEIGHTS_FILE: &str = "weights.safetensors";
const HASH_FILE: &str = "weights.sha256";

/// Seeded source of initial weights.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn normal(&mut self, shape: &[usize], std: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let data: Vec<f32> = if std == 0.0 {
            vec![0.0; n]
        } else {
            let d = Normal::new(0.0, std).map_err(|e| ModelError::Config(e.to_string()))?;
            (0..n).map(|_| d.sample(&mut self.rng) as f32).collect()
        };
        Ok(Tensor::from_vec(data, shape, &Device::Cpu)?)
    }

    pub fn constant(&mut self, shape: &[usize], value: f32) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        Ok(Tensor::from_vec(vec![value; n], shape, &Device::Cpu)?)
    }
}

/// Trainable tensors keyed by dotted names. Iteration order is the key order,
/// which keeps optimizer state and hashes deterministic.
#[derive(Default)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_tensors(tensors: impl IntoIterator<Item = (String, Tensor)>) -> Result<Self> {
        let mut vars = BTreeMap::new();
        for (k, t) in tensors {
            vars.insert(k, Var::from_tensor(&t.to_dtype(DType::F32)?)?);
        }
        Ok(Self { vars })
    }

    /// Returns the stored tensor, creating it with `make` when absent.
    pub fn get_or_init(
        &mut self,
        name: &str,
        shape: &[usize],
        make: impl FnOnce(&[usize]) -> Result<Tensor>,
    ) -> Result<Tensor> {
        if let Some(v) = self.vars.get(name) {
            if v.dims() != shape {
                return Err(ModelError::Shape(format!(
                    "parameter {name} has shape {:?}, expected {shape:?}",
                    v.dims()
                )));
            }
            return Ok(v.as_tensor().clone());
        }
        let t = make(shape)?;
        let v = Var::from_tensor(&t)?;
        let out = v.as_tensor().clone();
        self.vars.insert(name.to_string(), v);
        Ok(out)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }

    pub fn vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    pub fn vars_with_prefix(&self, prefixes: &[&str]) -> Vec<Var> {
        self.vars
            .iter()
            .filter(|(k, _)| prefixes.iter().any(|p| k.starts_with(p)))
            .map(|(_, v)| v.clone())
            .collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    pub fn tensors(&self) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .map(|(k, v)| (k.clone(), v.as_tensor().detach()))
            .collect()
    }

    /// Copies every parameter under `from` to the same suffix under `to`.
    pub fn copy_prefix(&mut self, source: &ParamStore, from: &str, to: &str) -> Result<()> {
        for (k, v) in &source.vars {
            if let Some(rest) = k.strip_prefix(from) {
                let t = v.as_tensor().detach().copy()?;
                self.vars.insert(format!("{to}{rest}"), Var::from_tensor(&t)?);
            }
        }
        Ok(())
    }

    /// SHA-256 over names, shapes and little-endian f32 bytes of every
    /// parameter whose name starts with one of `prefixes`.
    pub fn hash(&self, prefixes: &[&str]) -> Result<String> {
        let selected: BTreeMap<String, Tensor> = self
            .vars
            .iter()
            .filter(|(k, _)| prefixes.iter().any(|p| k.starts_with(p)))
            .map(|(k, v)| (k.clone(), v.as_tensor().clone()))
            .collect();
        hash_tensors(&selected)
    }
}

pub fn hash_tensors(tensors: &BTreeMap<String, Tensor>) -> Result<String> {
    let mut h = Sha256::new();
    for (k, t) in tensors {
        h.update(k.as_bytes());
        h.update([0u8]);
        for d in t.dims() {
            h.update((*d as u64).to_le_bytes());
        }
        for x in t.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()? {
            h.update(x.to_le_bytes());
        }
    }
    Ok(hex::encode(h.finalize()))
}

pub fn tensor_to_vec(t: &Tensor) -> Result<Vec<f32>> {
    Ok(t.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?)
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader<C> {
    format: String,
    version: u32,
    kind: String,
    config: C,
}

/// Writes `config.json`, `weights.safetensors` and `weights.sha256` into `dir`.
pub fn save_checkpoint<C: Serialize>(
    dir: &Path,
    kind: &str,
    config: &C,
    tensors: &BTreeMap<String, Tensor>,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let header = CheckpointHeader {
        format: CHECKPOINT_FORMAT.to_string(),
        version: CHECKPOINT_VERSION,
        kind: kind.to_string(),
        config,
    };
    let cfg_path = dir.join(CONFIG_FILE);
    std::fs::write(&cfg_path, serde_json::to_string_pretty(&header)? + "\n").map_err(io_err(&cfg_path))?;
    let weights = dir.join(WEIGHTS_FILE);
    let map: HashMap<String, Tensor> = tensors
        .iter()
        .map(|(k, t)| Ok((k.clone(), t.contiguous()?)))
        .collect::<Result<_>>()?;
    candle_core::safetensors::save(&map, &weights)?;
    let bytes = std::fs::read(&weights).map_err(io_err(&weights))?;
    let hash_path = dir.join(HASH_FILE);
    std::fs::write(&hash_path, hex::encode(Sha256::digest(&bytes)) + "\n").map_err(io_err(&hash_path))?;
    Ok(())
}

/// Loads a checkpoint of the given kind, refusing unknown versions and
/// weights whose hash does not match the recorded one.
pub fn load_checkpoint<C: DeserializeOwned>(dir: &Path, kind: &str) -> Result<(C, BTreeMap<String, Tensor>)> {
    let refuse = |reason: String| ModelError::Checkpoint {
        path: dir.to_path_buf(),
        reason,
    };
    let cfg_path = dir.join(CONFIG_FILE);
    let text = std::fs::read_to_string(&cfg_path).map_err(io_err(&cfg_path))?;
    let raw: serde_json::Value = serde_json::from_str(&text)?;
    if raw.get("format").and_then(|v| v.as_str()) != Some(CHECKPOINT_FORMAT) {
        return Err(refuse("not a checkpoint directory".into()));
    }
    let version = raw.get("version").and_then(|v| v.as_u64());
    if version != Some(CHECKPOINT_VERSION as u64) {
        return Err(refuse(format!(
            "version {version:?} is not supported (expected {CHECKPOINT_VERSION})"
        )));
    }
    let found_kind = raw.get("kind").and_then(|v| v.as_str()).unwrap_or_default();
    if found_kind != kind {
        return Err(refuse(format!("holds a {found_kind:?} model, expected {kind:?}")));
    }
    let header: CheckpointHeader<C> = serde_json::from_value(raw)?;
    let weights = dir.join(WEIGHTS_FILE);
    let bytes = std::fs::read(&weights).map_err(io_err(&weights))?;
    let hash_path = dir.join(HASH_FILE);
    let expected = std::fs::read_to_string(&hash_path).map_err(io_err(&hash_path))?;
    let actual = hex::encode(Sha256::digest(&bytes));
    if expected.trim() != actual {
        return Err(refuse(format!(
            "weights hash {actual} does not match recorded {}",
            expected.trim()
        )));
    }
    let tensors = candle_core::safetensors::load_buffer(&bytes, &Device::Cpu)?;
    Ok((header.config, tensors.into_iter().collect()))
}
