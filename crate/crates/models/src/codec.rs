//! Residual-vector-quantized waveform codec: encoder, quantizer, decoder.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};
use spanedit_core::{CodeGrid, TokenGrid, Waveform};

use crate::error::{ModelError, Result};
use crate::nn::{act, fold_time, unfold_time, Builder, Conv, Linear, WeightInit};
use crate::params::{hash_tensors, load_checkpoint, save_checkpoint, tensor_to_vec, Init, ParamStore};

pub const CODEC_KIND: &str = "codec";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CodecConfig {
    pub sample_rate: u32,
    /// Per-block downsampling factors; their product is the frame stride.
    pub strides: Vec<usize>,
    pub num_codebooks: usize,
    pub codebook_size: usize,
    pub base_dim: usize,
    /// Channel widths double per block up to this cap.
    pub max_channels: usize,
    pub latent_dim: usize,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16000,
            strides: vec![2, 4, 4, 5, 2],
            num_codebooks: 4,
            codebook_size: 256,
            base_dim: 32,
            max_channels: 128,
            latent_dim: 128,
        }
    }
}

impl CodecConfig {
    pub fn stride(&self) -> usize {
        self.strides.iter().product()
    }

    pub fn frame_rate(&self) -> usize {
        self.sample_rate as usize / self.stride()
    }

    pub fn num_blocks(&self) -> usize {
        self.strides.len()
    }

    /// Channel width at resolution level `i`: level 0 is the waveform itself,
    /// level `i ≥ 1` follows block `i − 1`.
    pub fn channels(&self, i: usize) -> usize {
        if i == 0 {
            1
        } else {
            (self.base_dim << (i - 1)).min(self.max_channels)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.strides.is_empty() || self.strides.contains(&0) {
            return bad("strides must be non-empty and positive".into());
        }
        if self.sample_rate as usize % self.stride() != 0 {
            return bad(format!(
                "sample rate {} is not a multiple of the stride {}",
                self.sample_rate,
                self.stride()
            ));
        }
        if self.num_codebooks == 0 || self.codebook_size < 2 {
            return bad("need at least one codebook of at least two entries".into());
        }
        if self.base_dim < 2 || self.latent_dim == 0 || self.max_channels < self.base_dim {
            return bad("channel widths must be positive with max_channels >= base_dim".into());
        }
        Ok(())
    }
}

/// Encoder output: `frames × dim`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentFrames {
    pub frames: usize,
    pub dim: usize,
    pub values: Vec<f32>,
}

impl LatentFrames {
    pub fn new(frames: usize, dim: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != frames * dim {
            return Err(ModelError::Shape(format!(
                "{} latent values for {frames} frames of width {dim}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(spanedit_core::Error::NonFinite("latent frames").into());
        }
        Ok(Self { frames, dim, values })
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        &self.values[t * self.dim..(t + 1) * self.dim]
    }

    /// `[1, frames, dim]`.
    pub fn to_tensor(&self) -> Result<Tensor> {
        Ok(Tensor::from_vec(self.values.clone(), (1, self.frames, self.dim), &Device::Cpu)?)
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (_, frames, dim) = t.dims3()?;
        Self::new(frames, dim, tensor_to_vec(t)?)
    }
}

/// K codebooks of `size × dim` entries, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Rvq {
    pub dim: usize,
    pub size: usize,
    pub books: Vec<Vec<f32>>,
}

/// Quantizer outputs used by training: codes, the summed codewords and the
/// residual entering each stage.
pub struct Quantized {
    pub codes: Vec<u32>,
    pub quantized: Vec<f32>,
    pub stage_inputs: Vec<Vec<f32>>,
}

impl Rvq {
    pub fn new(dim: usize, size: usize, books: Vec<Vec<f32>>) -> Result<Self> {
        if size == 0 || books.is_empty() {
            return Err(ModelError::Config("quantizer needs at least one codeword and one codebook".into()));
        }
        if let Some(b) = books.iter().find(|b| b.len() != size * dim) {
            return Err(ModelError::Shape(format!(
                "codebook has {} values, expected {size}×{dim}",
                b.len()
            )));
        }
        if books.iter().flatten().any(|v| !v.is_finite()) {
            return Err(spanedit_core::Error::NonFinite("codebook").into());
        }
        Ok(Self { dim, size, books })
    }

    pub fn num_codebooks(&self) -> usize {
        self.books.len()
    }

    pub fn codeword(&self, k: usize, v: usize) -> &[f32] {
        &self.books[k][v * self.dim..(v + 1) * self.dim]
    }

    /// Nearest codeword by squared distance; ties go to the lowest index.
    pub fn nearest(&self, k: usize, r: &[f32]) -> usize {
        let mut best = 0;
        let mut best_d = f32::INFINITY;
        for v in 0..self.size {
            let d: f32 = self.codeword(k, v).iter().zip(r).map(|(c, x)| (x - c) * (x - c)).sum();
            if d < best_d {
                best_d = d;
                best = v;
            }
        }
        best
    }

    pub fn quantize_detailed(&self, z: &LatentFrames) -> Result<Quantized> {
        if z.dim != self.dim {
            return Err(ModelError::Shape(format!(
                "latent width {} does not match codebook width {}",
                z.dim, self.dim
            )));
        }
        if z.values.iter().any(|v| !v.is_finite()) {
            return Err(spanedit_core::Error::NonFinite("latent frames").into());
        }
        let k_total = self.num_codebooks();
        let mut codes = Vec::with_capacity(z.frames * k_total);
        let mut quantized = vec![0f32; z.values.len()];
        let mut stage_inputs = vec![Vec::with_capacity(z.values.len()); k_total];
        for t in 0..z.frames {
            let mut r = z.frame(t).to_vec();
            for (k, inputs) in stage_inputs.iter_mut().enumerate() {
                inputs.extend_from_slice(&r);
                let v = self.nearest(k, &r);
                codes.push(v as u32);
                for (d, c) in self.codeword(k, v).iter().enumerate() {
                    r[d] -= c;
                    quantized[t * self.dim + d] += c;
                }
            }
        }
        Ok(Quantized {
            codes,
            quantized,
            stage_inputs,
        })
    }

    pub fn quantize(&self, z: &LatentFrames) -> Result<CodeGrid> {
        let q = self.quantize_detailed(z)?;
        Ok(CodeGrid::new(TokenGrid::new(self.num_codebooks(), q.codes)?, self.size as u32)?)
    }

    /// Sum over stages of the selected codewords.
    pub fn dequantize(&self, codes: &CodeGrid) -> Result<LatentFrames> {
        if codes.num_codebooks() != self.num_codebooks() {
            return Err(ModelError::Shape(format!(
                "{} code channels for {} codebooks",
                codes.num_codebooks(),
                self.num_codebooks()
            )));
        }
        let mut values = vec![0f32; codes.frames() * self.dim];
        for t in 0..codes.frames() {
            for (k, &v) in codes.frame(t).iter().enumerate() {
                if v as usize >= self.size {
                    return Err(spanedit_core::Error::TokenOutOfRange {
                        what: "codec code",
                        token: v,
                        limit: self.size as u32,
                    }
                    .into());
                }
                for (d, c) in self.codeword(k, v as usize).iter().enumerate() {
                    values[t * self.dim + d] += c;
                }
            }
        }
        LatentFrames::new(codes.frames(), self.dim, values)
    }
}

#[derive(Debug, Clone)]
struct ResUnit {
    conv: Conv,
    proj: Linear,
}

impl ResUnit {
    fn build(b: &mut Builder, name: &str, c: usize) -> Result<Self> {
        let hidden = (c / 2).max(1);
        Ok(Self {
            conv: b.conv(&format!("{name}.conv"), 3, c, hidden, WeightInit::Scaled(1.0))?,
            proj: b.linear(&format!("{name}.proj"), hidden, c, WeightInit::Scaled(0.5))?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.conv.forward(&act(x)?)?;
        Ok((x + self.proj.forward(&act(&h)?)?)?)
    }
}

#[derive(Debug, Clone)]
struct EncoderBlock {
    down: Linear,
    res: ResUnit,
    stride: usize,
}

/// Convolutional encoder; also returns each block's output for skip fusion.
#[derive(Debug, Clone)]
pub struct Encoder {
    blocks: Vec<EncoderBlock>,
    out: Linear,
}

/// Encoder latent `[batch, frames, dim]` plus features at every resolution,
/// from the input waveform down to the frame rate.
pub struct EncoderOutput {
    pub latent: Tensor,
    pub features: Vec<Tensor>,
}

impl Encoder {
    pub fn build(b: &mut Builder, prefix: &str, cfg: &CodecConfig) -> Result<Self> {
        let mut blocks = Vec::new();
        for (i, &s) in cfg.strides.iter().enumerate() {
            let (c_in, c_out) = (cfg.channels(i), cfg.channels(i + 1));
            blocks.push(EncoderBlock {
                down: b.linear(&format!("{prefix}.block{i}.down"), s * c_in, c_out, WeightInit::Scaled(1.0))?,
                res: ResUnit::build(b, &format!("{prefix}.block{i}.res"), c_out)?,
                stride: s,
            });
        }
        let top = cfg.channels(cfg.num_blocks());
        let out = b.linear(&format!("{prefix}.out"), top, cfg.latent_dim, WeightInit::Scaled(1.0))?;
        Ok(Self { blocks, out })
    }

    /// `x`: `[batch, samples]` with a sample count divisible by the stride.
    pub fn forward(&self, x: &Tensor) -> Result<EncoderOutput> {
        let (b, n) = x.dims2()?;
        let mut h = x.reshape((b, n, 1))?;
        let mut features = vec![h.clone()];
        for (i, blk) in self.blocks.iter().enumerate() {
            let pre = if i == 0 { h.clone() } else { act(&h)? };
            h = blk.down.forward(&fold_time(&pre, blk.stride)?)?;
            h = blk.res.forward(&h)?;
            features.push(h.clone());
        }
        let latent = self.out.forward(&act(&h)?)?;
        Ok(EncoderOutput { latent, features })
    }
}

#[derive(Debug, Clone)]
struct DecoderBlock {
    res: ResUnit,
    up: Linear,
    stride: usize,
}

/// Mirror of the encoder. Callers may add a tensor at every resolution
/// (level `i` has `channels(i)` channels; level 0 is the waveform).
#[derive(Debug, Clone)]
pub struct Decoder {
    input: Linear,
    blocks: Vec<DecoderBlock>,
}

impl Decoder {
    pub fn build(b: &mut Builder, prefix: &str, cfg: &CodecConfig) -> Result<Self> {
        let n = cfg.num_blocks();
        let input = b.linear(&format!("{prefix}.input"), cfg.latent_dim, cfg.channels(n), WeightInit::Scaled(1.0))?;
        let mut blocks = Vec::new();
        for i in 0..n {
            let (c_in, c_out) = (cfg.channels(i + 1), cfg.channels(i));
            blocks.push(DecoderBlock {
                res: ResUnit::build(b, &format!("{prefix}.block{i}.res"), c_in)?,
                up: b.linear(
                    &format!("{prefix}.block{i}.up"),
                    c_in,
                    cfg.strides[i] * c_out,
                    WeightInit::Scaled(1.0),
                )?,
                stride: cfg.strides[i],
            });
        }
        Ok(Self { input, blocks })
    }

    /// `z`: `[batch, frames, latent]` → `[batch, frames·stride]`.
    pub fn forward(&self, z: &Tensor, additions: Option<&[Tensor]>) -> Result<Tensor> {
        let n = self.blocks.len();
        let add = |i: usize, h: Tensor| -> Result<Tensor> {
            match additions {
                Some(a) => Ok((h + &a[i])?),
                None => Ok(h),
            }
        };
        let mut h = add(n, self.input.forward(z)?)?;
        for i in (0..n).rev() {
            let blk = &self.blocks[i];
            h = blk.res.forward(&h)?;
            h = unfold_time(&blk.up.forward(&act(&h)?)?, blk.stride)?;
            h = add(i, h)?;
        }
        let (b, len, _) = h.dims3()?;
        Ok(h.reshape((b, len))?)
    }
}

pub struct Codec {
    pub cfg: CodecConfig,
    pub(crate) store: ParamStore,
    pub(crate) encoder: Encoder,
    pub(crate) decoder: Decoder,
    pub rvq: Rvq,
}

impl Codec {
    /// Freshly initialized codec; codebook row 0 of every stage is zero.
    pub fn new(cfg: &CodecConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut init = Init::new(seed);
        let mut store = ParamStore::new();
        let (encoder, decoder) = build_nets(&mut store, &mut init, cfg)?;
        let mut books = Vec::new();
        for _ in 0..cfg.num_codebooks {
            let mut book = tensor_to_vec(&init.normal(&[cfg.codebook_size, cfg.latent_dim], 1.0)?)?;
            book[..cfg.latent_dim].fill(0.0);
            books.push(book);
        }
        let rvq = Rvq::new(cfg.latent_dim, cfg.codebook_size, books)?;
        Ok(Self {
            cfg: cfg.clone(),
            store,
            encoder,
            decoder,
            rvq,
        })
    }

    pub fn from_tensors(cfg: &CodecConfig, tensors: BTreeMap<String, Tensor>) -> Result<Self> {
        cfg.validate()?;
        let mut books = Vec::new();
        let mut params = Vec::new();
        for (k, t) in tensors {
            if k.starts_with("rvq.") {
                books.push((k, tensor_to_vec(&t)?));
            } else {
                params.push((k, t));
            }
        }
        books.sort_by_key(|(k, _)| k[4..].parse::<usize>().unwrap_or(usize::MAX));
        if books.len() != cfg.num_codebooks {
            return Err(ModelError::Shape(format!(
                "{} codebooks stored, config says {}",
                books.len(),
                cfg.num_codebooks
            )));
        }
        let rvq = Rvq::new(cfg.latent_dim, cfg.codebook_size, books.into_iter().map(|(_, b)| b).collect())?;
        let mut store = ParamStore::from_tensors(params)?;
        let before = store.len();
        let mut init = Init::new(0);
        let (encoder, decoder) = build_nets(&mut store, &mut init, cfg)?;
        if store.len() != before {
            return Err(ModelError::Shape("codec weights are missing parameters".into()));
        }
        Ok(Self {
            cfg: cfg.clone(),
            store,
            encoder,
            decoder,
            rvq,
        })
    }

    pub fn tensors(&self) -> Result<BTreeMap<String, Tensor>> {
        let mut out = self.store.tensors();
        for (k, book) in self.rvq.books.iter().enumerate() {
            out.insert(
                format!("rvq.{k}"),
                Tensor::from_vec(book.clone(), (self.rvq.size, self.rvq.dim), &Device::Cpu)?,
            );
        }
        Ok(out)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        save_checkpoint(dir, CODEC_KIND, &self.cfg, &self.tensors()?)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (cfg, tensors) = load_checkpoint::<CodecConfig>(dir, CODEC_KIND)?;
        Self::from_tensors(&cfg, tensors)
    }

    /// Hash of the encoder weights and codebooks (the parts a watermarking
    /// decoder keeps frozen).
    pub fn frozen_hash(&self) -> Result<String> {
        let t: BTreeMap<String, Tensor> = self
            .tensors()?
            .into_iter()
            .filter(|(k, _)| k.starts_with("enc.") || k.starts_with("rvq."))
            .collect();
        hash_tensors(&t)
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_parameters()
    }

    pub fn stride(&self) -> usize {
        self.cfg.stride()
    }

    /// Checks rate and length and returns the frame-aligned samples.
    pub fn frame_samples<'a>(&self, w: &'a Waveform) -> Result<&'a [f32]> {
        if w.sample_rate != self.cfg.sample_rate {
            return Err(spanedit_core::Error::SampleRateMismatch {
                expected: self.cfg.sample_rate,
                found: w.sample_rate,
            }
            .into());
        }
        let stride = self.stride();
        if w.len() < stride {
            return Err(ModelError::TooShort {
                samples: w.len(),
                stride,
            });
        }
        Ok(&w.samples[..w.frames(stride) * stride])
    }

    pub fn encode(&self, w: &Waveform) -> Result<LatentFrames> {
        let x = self.frame_samples(w)?;
        let t = Tensor::from_vec(x.to_vec(), (1, x.len()), &Device::Cpu)?;
        LatentFrames::from_tensor(&self.encoder.forward(&t)?.latent)
    }

    pub fn quantize(&self, z: &LatentFrames) -> Result<CodeGrid> {
        self.rvq.quantize(z)
    }

    pub fn dequantize(&self, codes: &CodeGrid) -> Result<LatentFrames> {
        self.rvq.dequantize(codes)
    }

    pub fn decode(&self, z: &LatentFrames) -> Result<Waveform> {
        if z.dim != self.cfg.latent_dim {
            return Err(ModelError::Shape(format!(
                "latent width {} does not match decoder input {}",
                z.dim, self.cfg.latent_dim
            )));
        }
        let y = self.decoder.forward(&z.to_tensor()?, None)?;
        Ok(Waveform::new(tensor_to_vec(&y)?, self.cfg.sample_rate)?)
    }

    pub fn codes(&self, w: &Waveform) -> Result<CodeGrid> {
        self.quantize(&self.encode(w)?)
    }

    /// encode → quantize → dequantize → decode; output length is
    /// `floor(len / stride) · stride`.
    pub fn reconstruct(&self, w: &Waveform) -> Result<Waveform> {
        self.decode(&self.dequantize(&self.codes(w)?)?)
    }
}

fn build_nets(store: &mut ParamStore, init: &mut Init, cfg: &CodecConfig) -> Result<(Encoder, Decoder)> {
    let mut b = Builder { store, init };
    let encoder = Encoder::build(&mut b, "enc", cfg)?;
    let decoder = Decoder::build(&mut b, "dec", cfg)?;
    Ok((encoder, decoder))
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny() -> CodecConfig {
        CodecConfig {
            base_dim: 4,
            max_channels: 8,
            latent_dim: 8,
            codebook_size: 16,
            ..CodecConfig::default()
        }
    }

    fn tone(n: usize) -> Waveform {
        Waveform::new((0..n).map(|i| (i as f32 * 0.07).sin() * 0.5).collect(), 16000).unwrap()
    }

    #[test]
    fn frame_count_law() {
        let c = Codec::new(&tiny(), 0).unwrap();
        assert_eq!(c.encode(&tone(16000)).unwrap().frames, 50);
        assert_eq!(c.encode(&tone(480)).unwrap().frames, 1);
        assert!(matches!(c.encode(&tone(319)), Err(ModelError::TooShort { .. })));
        let w = Waveform::new(vec![0.0; 640], 8000).unwrap();
        assert!(c.encode(&w).is_err());
    }

    #[test]
    fn reconstruct_truncates_to_whole_frames() {
        let c = Codec::new(&tiny(), 0).unwrap();
        assert_eq!(c.reconstruct(&tone(16000)).unwrap().len(), 16000);
        assert_eq!(c.reconstruct(&tone(16319)).unwrap().len(), 16000);
    }

    #[test]
    fn one_dimensional_nearest_neighbour() {
        let rvq = Rvq::new(2, 2, vec![vec![0.0, 0.0, 1.0, 0.0]]).unwrap();
        let z = LatentFrames::new(1, 2, vec![0.9, 0.1]).unwrap();
        assert_eq!(rvq.quantize(&z).unwrap().frame(0), &[1]);
        let single = Rvq::new(2, 1, vec![vec![0.3, 0.3]; 2]).unwrap();
        let z = LatentFrames::new(3, 2, vec![5.0, -1.0, 0.0, 0.0, 2.0, 2.0]).unwrap();
        assert!(single.quantize(&z).unwrap().grid().as_slice().iter().all(|&c| c == 0));
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let rvq = Rvq::new(1, 3, vec![vec![1.0, -1.0, 1.0]]).unwrap();
        let z = LatentFrames::new(1, 1, vec![0.0]).unwrap();
        assert_eq!(rvq.quantize(&z).unwrap().frame(0), &[0]);
    }

    #[test]
    fn zero_codes_dequantize_to_zero() {
        let c = Codec::new(&tiny(), 5).unwrap();
        let codes = CodeGrid::new(TokenGrid::filled(7, 4, 0), 16).unwrap();
        assert!(c.dequantize(&codes).unwrap().values.iter().all(|&v| v == 0.0));
        let bad = CodeGrid::new(TokenGrid::filled(2, 3, 0), 16).unwrap();
        assert!(c.dequantize(&bad).is_err());
    }

    #[test]
    fn centroid_is_a_fixed_point() {
        let c = Codec::new(&tiny(), 2).unwrap();
        let z = LatentFrames::new(1, 8, c.rvq.codeword(0, 5).to_vec()).unwrap();
        let codes = c.quantize(&z).unwrap();
        assert_eq!(codes.frame(0), &[5, 0, 0, 0]);
        assert_eq!(c.dequantize(&codes).unwrap(), z);
    }

    #[test]
    fn zero_output_layer_gives_silence() {
        let c = Codec::new(&tiny(), 1).unwrap();
        for name in ["dec.block0.up.w", "dec.block0.up.b"] {
            let v = c.store.get(name).unwrap();
            v.set(&v.as_tensor().zeros_like().unwrap()).unwrap();
        }
        let z = LatentFrames::new(50, 8, vec![0.0; 400]).unwrap();
        let w = c.decode(&z).unwrap();
        assert_eq!(w.len(), 16000);
        assert!(w.samples.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn checkpoint_round_trip_preserves_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let c = Codec::new(&tiny(), 9).unwrap();
        c.save(dir.path()).unwrap();
        let back = Codec::load(dir.path()).unwrap();
        let w = tone(3200);
        assert_eq!(c.codes(&w).unwrap(), back.codes(&w).unwrap());
        assert_eq!(c.reconstruct(&w).unwrap(), back.reconstruct(&w).unwrap());
        assert_eq!(c.frozen_hash().unwrap(), back.frozen_hash().unwrap());
    }
}
