//! Causal decoder-only transformer over `[phonemes | delayed audio rows]`.
//!
//! Audio position `t` is fed the delayed row `D[t-1]` (a learned start vector
//! for `t = 0`) and predicts `D[t]`, so logits at audio position `t` depend
//! only on the phonemes and rows before `t`. Each audio input is the sum of
//! the `K` per-channel token embeddings of its row.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};
use spanedit_core::{SpecialVocab, TokenGrid};

use crate::error::{ModelError, Result};
use crate::nn::{log_softmax_last, Builder, LayerNorm, Linear, WeightInit};
use crate::params::{load_checkpoint, save_checkpoint, Init, ParamStore};

pub const AR_KIND: &str = "ar";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArConfig {
    pub num_layers: usize,
    pub hidden_size: usize,
    pub num_heads: usize,
    pub num_codebooks: usize,
    pub codebook_size: u32,
    pub max_spans: u32,
    pub phoneme_vocab: usize,
    pub max_seq_len: usize,
    /// Linear layers per prediction head.
    pub head_layers: usize,
    pub ffn_mult: usize,
}

impl Default for ArConfig {
    fn default() -> Self {
        Self {
            num_layers: 2,
            hidden_size: 128,
            num_heads: 2,
            num_codebooks: 4,
            codebook_size: 256,
            max_spans: 3,
            phoneme_vocab: 64,
            max_seq_len: 2048,
            head_layers: 2,
            ffn_mult: 4,
        }
    }
}

impl ArConfig {
    pub fn special_vocab(&self) -> SpecialVocab {
        SpecialVocab::new(self.codebook_size, self.max_spans)
    }

    /// Per-channel output vocabulary: codes plus every special token.
    pub fn channel_vocab(&self) -> usize {
        self.special_vocab().vocab_size()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.num_layers == 0 || self.num_heads == 0 || self.hidden_size == 0 {
            return bad("layers, heads and hidden size must be positive");
        }
        if self.hidden_size % self.num_heads != 0 {
            return bad("hidden_size must be divisible by num_heads");
        }
        if self.num_codebooks == 0 || self.codebook_size == 0 || self.max_spans == 0 {
            return bad("codebook count, codebook size and max_spans must be positive");
        }
        if self.phoneme_vocab == 0 || self.max_seq_len == 0 || self.head_layers == 0 || self.ffn_mult == 0 {
            return bad("phoneme_vocab, max_seq_len, head_layers and ffn_mult must be positive");
        }
        Ok(())
    }
}

/// One input position.
#[derive(Debug, Clone, Copy)]
pub enum Slot<'a> {
    Phoneme(u32),
    Start,
    Row(&'a [u32]),
    Pad,
}

/// Positions `[phonemes, start, rows[0], ..., rows[n-1]]`.
pub fn sequence_slots<'a>(phonemes: &[u32], rows: &'a TokenGrid) -> Vec<Slot<'a>> {
    let mut out: Vec<Slot<'a>> = phonemes.iter().map(|&p| Slot::Phoneme(p)).collect();
    out.push(Slot::Start);
    out.extend(rows.iter_rows().map(Slot::Row));
    out
}

struct Block {
    ln1: LayerNorm,
    qkv: Linear,
    out: Linear,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

/// Keys and values of every layer and head, `[B, n, head_dim]` each.
#[derive(Clone)]
pub struct KvCache {
    layers: Vec<Vec<(Tensor, Tensor)>>,
    len: usize,
    batch: usize,
}

impl KvCache {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn batch(&self) -> usize {
        self.batch
    }
}

pub struct ArModel {
    pub cfg: ArConfig,
    store: ParamStore,
    phoneme_emb: Tensor,
    start_emb: Tensor,
    token_emb: Vec<Tensor>,
    pos_emb: Tensor,
    blocks: Vec<Block>,
    ln_f: LayerNorm,
    heads: Vec<Vec<Linear>>,
}

impl ArModel {
    pub fn new(cfg: ArConfig, seed: u64) -> Result<Self> {
        Self::assemble(cfg, ParamStore::new(), seed)
    }

    fn assemble(cfg: ArConfig, mut store: ParamStore, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let h = cfg.hidden_size;
        let v = cfg.channel_vocab();
        let mut init = Init::new(seed);
        let mut b = Builder {
            store: &mut store,
            init: &mut init,
        };
        let phoneme_emb = b.tensor("emb.phoneme", &[cfg.phoneme_vocab, h], 0.02)?;
        let start_emb = b.tensor("emb.start", &[1, h], 0.02)?;
        let token_emb = (0..cfg.num_codebooks)
            .map(|k| b.tensor(&format!("emb.token{k}"), &[v, h], 0.02))
            .collect::<Result<Vec<_>>>()?;
        let pos_emb = b.tensor("emb.pos", &[cfg.max_seq_len, h], 0.02)?;
        let residual_gain = 1.0 / (2.0 * cfg.num_layers as f64).sqrt();
        let mut blocks = Vec::with_capacity(cfg.num_layers);
        for i in 0..cfg.num_layers {
            let p = format!("layer{i}");
            blocks.push(Block {
                ln1: b.layer_norm(&format!("{p}.ln1"), h)?,
                qkv: b.linear(&format!("{p}.qkv"), h, 3 * h, WeightInit::Scaled(1.0))?,
                out: b.linear(&format!("{p}.out"), h, h, WeightInit::Scaled(residual_gain))?,
                ln2: b.layer_norm(&format!("{p}.ln2"), h)?,
                fc1: b.linear(&format!("{p}.fc1"), h, cfg.ffn_mult * h, WeightInit::Scaled(1.0))?,
                fc2: b.linear(&format!("{p}.fc2"), cfg.ffn_mult * h, h, WeightInit::Scaled(residual_gain))?,
            });
        }
        let ln_f = b.layer_norm("ln_f", h)?;
        let mut heads = Vec::with_capacity(cfg.num_codebooks);
        for k in 0..cfg.num_codebooks {
            let mut layers = Vec::with_capacity(cfg.head_layers);
            for j in 0..cfg.head_layers {
                let last = j + 1 == cfg.head_layers;
                let (out, gain) = if last { (v, 0.1) } else { (h, 1.0) };
                layers.push(b.linear(&format!("head{k}.fc{j}"), h, out, WeightInit::Scaled(gain))?);
            }
            heads.push(layers);
        }
        Ok(Self {
            cfg,
            store,
            phoneme_emb,
            start_emb,
            token_emb,
            pos_emb,
            blocks,
            ln_f,
            heads,
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        save_checkpoint(dir, AR_KIND, &self.cfg, &self.store.tensors())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (cfg, tensors) = load_checkpoint::<ArConfig>(dir, AR_KIND)?;
        let store = ParamStore::from_tensors(tensors)?;
        let before = store.len();
        let model = Self::assemble(cfg, store, 0)?;
        if model.store.len() != before {
            return Err(ModelError::Shape("token model checkpoint is missing parameters".into()));
        }
        Ok(model)
    }

    pub fn tensors(&self) -> BTreeMap<String, Tensor> {
        self.store.tensors()
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_parameters()
    }

    pub(crate) fn vars(&self) -> Vec<candle_core::Var> {
        self.store.vars()
    }

    /// Sets the output layer of every head to zero so every next-token
    /// distribution is uniform.
    pub fn zero_output_heads(&self) -> Result<()> {
        let last = self.cfg.head_layers - 1;
        for k in 0..self.cfg.num_codebooks {
            for part in ["w", "b"] {
                let var = self
                    .store
                    .get(&format!("head{k}.fc{last}.{part}"))
                    .expect("head parameters exist");
                var.set(&var.zeros_like()?)?;
            }
        }
        Ok(())
    }

    fn check_slot(&self, slot: &Slot) -> Result<()> {
        match *slot {
            Slot::Phoneme(p) if p as usize >= self.cfg.phoneme_vocab => Err(spanedit_core::Error::TokenOutOfRange {
                what: "phoneme",
                token: p,
                limit: self.cfg.phoneme_vocab as u32,
            }
            .into()),
            Slot::Row(r) => {
                if r.len() != self.cfg.num_codebooks {
                    return Err(ModelError::Shape(format!(
                        "row has {} channels, model expects {}",
                        r.len(),
                        self.cfg.num_codebooks
                    )));
                }
                let limit = self.cfg.channel_vocab() as u32;
                match r.iter().find(|&&t| t >= limit) {
                    Some(&t) => Err(spanedit_core::Error::TokenOutOfRange {
                        what: "audio token",
                        token: t,
                        limit,
                    }
                    .into()),
                    None => Ok(()),
                }
            }
            _ => Ok(()),
        }
    }

    /// `[B, S, H]` input embeddings for equally long slot lists starting at `offset`.
    fn embed(&self, slots: &[Vec<Slot>], offset: usize) -> Result<Tensor> {
        let b = slots.len();
        let s = slots.first().map_or(0, Vec::len);
        if s == 0 || slots.iter().any(|x| x.len() != s) {
            return Err(ModelError::Shape("batch rows must be non-empty and equally long".into()));
        }
        if offset + s > self.cfg.max_seq_len {
            return Err(ModelError::SequenceTooLong {
                len: offset + s,
                max: self.cfg.max_seq_len,
            });
        }
        let k_count = self.cfg.num_codebooks;
        let v = self.cfg.channel_vocab() as u32;
        let pv = self.cfg.phoneme_vocab as u32;
        let mut idx = Vec::with_capacity(b * s * k_count);
        let mut wts = Vec::with_capacity(b * s * k_count);
        for row in slots {
            for slot in row {
                self.check_slot(slot)?;
                for k in 0..k_count {
                    let (i, w) = match *slot {
                        Slot::Phoneme(p) if k == 0 => (p, 1f32),
                        Slot::Start if k == 0 => (pv, 1.0),
                        Slot::Row(r) => (pv + 1 + k as u32 * v + r[k], 1.0),
                        _ => (0, 0.0),
                    };
                    idx.push(i);
                    wts.push(w);
                }
            }
        }
        let mut parts = vec![&self.phoneme_emb, &self.start_emb];
        parts.extend(self.token_emb.iter());
        let table = Tensor::cat(&parts, 0)?;
        let h = self.cfg.hidden_size;
        let idx = Tensor::from_vec(idx, b * s * k_count, &Device::Cpu)?;
        let wts = Tensor::from_vec(wts, (b, s, k_count, 1), &Device::Cpu)?;
        let x = table
            .index_select(&idx, 0)?
            .reshape((b, s, k_count, h))?
            .broadcast_mul(&wts)?
            .sum(2)?;
        Ok(x.broadcast_add(&self.pos_emb.narrow(0, offset, s)?)?)
    }

    /// Runs the stack over `x` placed after `cache.len()` cached positions.
    fn run(&self, x: Tensor, mut cache: Option<&mut KvCache>) -> Result<Tensor> {
        let (b, s, h) = x.dims3()?;
        let past = cache.as_ref().map_or(0, |c| c.len);
        let mask = if s > 1 { Some(causal_mask(s, past)?) } else { None };
        let mut x = x;
        for (li, blk) in self.blocks.iter().enumerate() {
            let layer_cache = cache.as_deref_mut().map(|c| &mut c.layers[li]);
            let a = self.attention(blk, &blk.ln1.forward(&x)?, layer_cache, mask.as_ref())?;
            x = (x + a)?;
            let m = blk.fc2.forward(&blk.fc1.forward(&blk.ln2.forward(&x)?)?.gelu()?)?;
            x = (x + m)?;
        }
        if let Some(c) = cache {
            c.len += s;
        }
        debug_assert_eq!(x.dims(), &[b, s, h]);
        self.ln_f.forward(&x)
    }

    fn attention(
        &self,
        blk: &Block,
        x: &Tensor,
        mut cache: Option<&mut Vec<(Tensor, Tensor)>>,
        mask: Option<&Tensor>,
    ) -> Result<Tensor> {
        let (b, s, h) = x.dims3()?;
        let nh = self.cfg.num_heads;
        let hd = h / nh;
        let scale = 1.0 / (hd as f64).sqrt();
        let qkv = blk.qkv.forward(x)?;
        let mut acc: Option<Tensor> = None;
        for i in 0..nh {
            let q = qkv.narrow(2, i * hd, hd)?.contiguous()?;
            let mut k = qkv.narrow(2, h + i * hd, hd)?.contiguous()?;
            let mut v = qkv.narrow(2, 2 * h + i * hd, hd)?.contiguous()?;
            if let Some(c) = cache.as_deref_mut() {
                if let Some((pk, pv)) = c.get(i) {
                    k = Tensor::cat(&[pk, &k], 1)?;
                    v = Tensor::cat(&[pv, &v], 1)?;
                    c[i] = (k.clone(), v.clone());
                } else {
                    c.push((k.clone(), v.clone()));
                }
            }
            let mut att = (q.matmul(&k.t()?)? * scale)?;
            if let Some(m) = mask {
                att = att.broadcast_add(m)?;
            }
            let att = candle_nn::ops::softmax(&att, D::Minus1)?;
            let o = att.matmul(&v)?.reshape((b * s, hd))?;
            let proj = o.matmul(&blk.out.w.narrow(0, i * hd, hd)?)?;
            acc = Some(match acc {
                None => proj,
                Some(a) => (a + proj)?,
            });
        }
        let out = acc.expect("at least one head").broadcast_add(&blk.out.b)?;
        Ok(out.reshape((b, s, h))?)
    }

    /// Logits `[..., K, V]` for hidden states `[..., H]`.
    fn head_logits(&self, hidden: &Tensor) -> Result<Tensor> {
        let per_channel = (0..self.cfg.num_codebooks)
            .map(|k| Ok(self.channel_head(k, hidden)?.unsqueeze(hidden.rank() - 1)?))
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::cat(&per_channel, hidden.rank() - 1)?)
    }

    fn channel_head(&self, k: usize, hidden: &Tensor) -> Result<Tensor> {
        let layers = &self.heads[k];
        let mut x = hidden.clone();
        for (j, l) in layers.iter().enumerate() {
            x = l.forward(&x)?;
            if j + 1 < layers.len() {
                x = x.gelu()?;
            }
        }
        Ok(x)
    }

    /// Final hidden states `[B, S, H]` of a padded batch.
    pub fn hidden(&self, slots: &[Vec<Slot>]) -> Result<Tensor> {
        self.run(self.embed(slots, 0)?, None)
    }

    /// Logits `[N, K, V]` for the delayed grid `rows` (`N` rows): row `t`
    /// holds the distribution of `rows[t]` given the phonemes and `rows[..t]`.
    pub fn forward(&self, phonemes: &[u32], rows: &TokenGrid) -> Result<Tensor> {
        let slots = sequence_slots(phonemes, rows);
        let l = phonemes.len();
        let n = rows.rows();
        let h = self.hidden(&[slots])?;
        self.head_logits(&h.narrow(1, l, n)?.squeeze(0)?)
    }

    /// Weighted masked NLL for a padded batch, evaluating heads only on live cells.
    /// `cells[b]` lists `(sequence position, channel, target)` triples.
    pub fn batch_loss(&self, slots: &[Vec<Slot>], cells: &[Vec<(usize, usize, u32)>], weights: &[f64]) -> Result<Tensor> {
        check_weights(weights, self.cfg.num_codebooks)?;
        let hidden = self.hidden(slots)?;
        let (b, s, h) = hidden.dims3()?;
        let flat = hidden.reshape((b * s, h))?;
        let mut total: Option<Tensor> = None;
        let mut weight_sum = 0.0;
        for k in 0..self.cfg.num_codebooks {
            let mut rows = Vec::new();
            let mut targets = Vec::new();
            for (bi, list) in cells.iter().enumerate() {
                for &(pos, ch, tgt) in list {
                    if ch == k {
                        rows.push((bi * s + pos) as u32);
                        targets.push(tgt);
                    }
                }
            }
            if rows.is_empty() || weights[k] == 0.0 {
                continue;
            }
            let m = rows.len();
            let sel = flat.index_select(&Tensor::from_vec(rows, m, &Device::Cpu)?, 0)?;
            let logits = self.channel_head(k, &sel)?;
            let nll = picked_nll(&logits, &targets)?.sum_all()?;
            weight_sum += weights[k] * m as f64;
            let term = (nll * weights[k])?;
            total = Some(match total {
                None => term,
                Some(t) => (t + term)?,
            });
        }
        match total {
            Some(t) => Ok((t / weight_sum)?),
            None => Err(spanedit_core::Error::Empty("loss mask").into()),
        }
    }

    /// Encodes `slots` (equal length across the batch) into a fresh cache and
    /// returns the logits `[B, K, V]` at the last position.
    pub fn prefill(&self, slots: &[Vec<Slot>]) -> Result<(Tensor, KvCache)> {
        let mut cache = KvCache {
            layers: vec![Vec::new(); self.cfg.num_layers],
            len: 0,
            batch: slots.len(),
        };
        let h = self.run(self.embed(slots, 0)?, Some(&mut cache))?;
        let s = h.dim(1)?;
        let last = h.narrow(1, s - 1, 1)?.squeeze(1)?;
        Ok((self.head_logits(&last)?, cache))
    }

    /// Appends one row per batch element and returns the next logits `[B, K, V]`.
    pub fn step(&self, cache: &mut KvCache, rows: &[&[u32]]) -> Result<Tensor> {
        if rows.len() != cache.batch {
            return Err(ModelError::Shape(format!(
                "{} rows for a cache of batch {}",
                rows.len(),
                cache.batch
            )));
        }
        let slots: Vec<Vec<Slot>> = rows.iter().map(|r| vec![Slot::Row(r)]).collect();
        let x = self.embed(&slots, cache.len)?;
        let h = self.run(x, Some(cache))?;
        self.head_logits(&h.squeeze(1)?)
    }
}

/// `[S, past + S]` additive mask: query `i` sees keys `j ≤ past + i`.
fn causal_mask(s: usize, past: usize) -> Result<Tensor> {
    let width = past + s;
    let data: Vec<f32> = (0..s)
        .flat_map(|i| (0..width).map(move |j| if j <= past + i { 0.0 } else { f32::NEG_INFINITY }))
        .collect();
    Ok(Tensor::from_vec(data, (s, width), &Device::Cpu)?)
}

fn check_weights(weights: &[f64], k: usize) -> Result<()> {
    if weights.len() != k {
        return Err(spanedit_core::Error::LengthMismatch {
            what: "codebook weights vs channels",
            left: weights.len(),
            right: k,
        }
        .into());
    }
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) || weights.iter().all(|&w| w == 0.0) {
        return Err(ModelError::Config("codebook weights must be non-negative, finite and not all zero".into()));
    }
    Ok(())
}

/// `−log softmax(logits)[target]` per row.
fn picked_nll(logits: &Tensor, targets: &[u32]) -> Result<Tensor> {
    let m = targets.len();
    let idx = Tensor::from_vec(targets.to_vec(), (m, 1), &Device::Cpu)?;
    Ok(log_softmax_last(logits)?.gather(&idx, 1)?.squeeze(1)?.neg()?)
}

/// Weighted masked NLL over a `[N, K, V]` logits grid: the mean of
/// `−w_k · log p(target)` over live cells, normalized by the total weight.
pub fn weighted_nll_loss(logits: &Tensor, targets: &TokenGrid, mask: &[Vec<bool>], weights: &[f64]) -> Result<Tensor> {
    let (n, k_count, _) = logits.dims3()?;
    check_weights(weights, k_count)?;
    if targets.rows() != n || targets.channels() != k_count || mask.len() != n {
        return Err(ModelError::Shape(format!(
            "logits {n}x{k_count}, targets {}x{}, mask {} rows",
            targets.rows(),
            targets.channels(),
            mask.len()
        )));
    }
    let mut idx = Vec::new();
    let mut tgt = Vec::new();
    let mut w = Vec::new();
    for (t, row) in mask.iter().enumerate() {
        if row.len() != k_count {
            return Err(ModelError::Shape(format!("mask row {t} has {} channels", row.len())));
        }
        for (k, &live) in row.iter().enumerate() {
            if live && weights[k] > 0.0 {
                idx.push((t * k_count + k) as u32);
                tgt.push(targets.get(t, k));
                w.push(weights[k] as f32);
            }
        }
    }
    if idx.is_empty() {
        return Err(spanedit_core::Error::Empty("loss mask").into());
    }
    let m = idx.len();
    let total: f64 = w.iter().map(|&x| x as f64).sum();
    let flat = logits.reshape((n * k_count, logits.dim(2)?))?;
    let sel = flat.index_select(&Tensor::from_vec(idx, m, &Device::Cpu)?, 0)?;
    let nll = picked_nll(&sel, &tgt)?;
    let w = Tensor::from_vec(w, m, &Device::Cpu)?;
    Ok(((nll * w)?.sum_all()? / total)?)
}

/// Flattens logits into f64 values.
pub fn logits_to_vec(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
}
