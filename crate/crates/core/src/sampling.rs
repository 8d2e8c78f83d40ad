//! Next-token sampling primitives: guidance mixing, temperature, nucleus
//! filtering and the random unconditional phoneme stream.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::planner::{PhonemeInventory, PhonemeSeq};

/// Mass tolerance when testing a nucleus prefix against `top_p`.
pub const NUCLEUS_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CfgParams {
    /// Guidance scale; 1 disables guidance.
    pub gamma: f64,
}

impl Default for CfgParams {
    fn default() -> Self {
        Self { gamma: 1.5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerParams {
    pub top_p: f64,
    pub temperature: f64,
    /// Per-span frame cap; `None` lets the caller pick a task-specific default.
    pub max_span_frames: Option<usize>,
    pub seed: u64,
}

impl Default for SamplerParams {
    fn default() -> Self {
        Self {
            top_p: 0.8,
            temperature: 1.0,
            max_span_frames: None,
            seed: 0,
        }
    }
}

impl SamplerParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::InvalidParameter(format!("top_p must lie in (0, 1], got {}", self.top_p)));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if self.max_span_frames == Some(0) {
            return Err(Error::InvalidParameter("max_span_frames must be at least 1".into()));
        }
        Ok(())
    }
}

/// Why a generated span ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Eog,
    MaxLen,
}

fn check_distribution(p: &[f64], what: &str) -> Result<f64> {
    if p.is_empty() {
        return Err(Error::InvalidDistribution(format!("{what} is empty")));
    }
    if p.iter().any(|&x| !x.is_finite() || x < 0.0) {
        return Err(Error::InvalidDistribution(format!("{what} has negative or non-finite mass")));
    }
    let total: f64 = p.iter().sum();
    if total <= 0.0 {
        return Err(Error::InvalidDistribution(format!("{what} has no mass")));
    }
    Ok(total)
}

/// `max(0, γ·p_cond + (1−γ)·p_uncond)` renormalized. Falls back to `p_cond`
/// when clamping removes all mass. γ = 1 returns `p_cond` untouched.
pub fn cfg_mix(p_cond: &[f64], p_uncond: &[f64], gamma: f64) -> Result<Vec<f64>> {
    if p_cond.len() != p_uncond.len() {
        return Err(Error::LengthMismatch {
            what: "conditional vs unconditional support",
            left: p_cond.len(),
            right: p_uncond.len(),
        });
    }
    check_distribution(p_cond, "conditional distribution")?;
    check_distribution(p_uncond, "unconditional distribution")?;
    if gamma == 1.0 {
        return Ok(p_cond.to_vec());
    }
    let mixed: Vec<f64> = p_cond
        .iter()
        .zip(p_uncond)
        .map(|(&c, &u)| (gamma * c + (1.0 - gamma) * u).max(0.0))
        .collect();
    let total: f64 = mixed.iter().sum();
    if total <= 0.0 || !total.is_finite() {
        return Ok(p_cond.to_vec());
    }
    Ok(mixed.into_iter().map(|q| q / total).collect())
}

/// Numerically stable softmax of `logits / temperature`.
pub fn softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    let max = logits
        .iter()
        .copied()
        .filter(|x| x.is_finite())
        .fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits
        .iter()
        .map(|&l| if l.is_finite() { ((l - max) / temperature).exp() } else { 0.0 })
        .collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Applies temperature to a distribution: `p^(1/τ)` renormalized, the same as
/// dividing the underlying logits by `τ`.
pub fn apply_temperature(dist: &[f64], temperature: f64) -> Result<Vec<f64>> {
    check_distribution(dist, "distribution")?;
    if temperature == 1.0 {
        let total: f64 = dist.iter().sum();
        return Ok(dist.iter().map(|p| p / total).collect());
    }
    let logits: Vec<f64> = dist.iter().map(|&p| p.ln()).collect();
    Ok(softmax(&logits, temperature))
}

/// Smallest highest-probability prefix with mass ≥ `top_p`, renormalized.
/// Ties in probability keep the lower token id first.
pub fn nucleus_filter(dist: &[f64], top_p: f64) -> Result<Vec<(usize, f64)>> {
    let total = check_distribution(dist, "distribution")?;
    let mut order: Vec<usize> = (0..dist.len()).filter(|&i| dist[i] > 0.0).collect();
    order.sort_by(|&a, &b| dist[b].total_cmp(&dist[a]).then(a.cmp(&b)));
    let mut kept = Vec::new();
    let mut mass = 0.0;
    for i in order {
        let p = dist[i] / total;
        kept.push((i, p));
        mass += p;
        if mass >= top_p - NUCLEUS_EPS {
            break;
        }
    }
    Ok(kept.into_iter().map(|(i, p)| (i, p / mass)).collect())
}

/// Temperature, then nucleus filtering, then one categorical draw.
pub fn nucleus_sample<R: Rng + ?Sized>(dist: &[f64], sp: &SamplerParams, rng: &mut R) -> Result<usize> {
    sp.validate()?;
    let tempered = apply_temperature(dist, sp.temperature)?;
    let kept = nucleus_filter(&tempered, sp.top_p)?;
    Ok(draw(&kept, rng))
}

fn draw<R: Rng + ?Sized>(kept: &[(usize, f64)], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for &(i, p) in kept {
        acc += p;
        if u < acc {
            return i;
        }
    }
    kept.last().expect("nucleus is never empty").0
}

/// A random phoneme sequence of the same length, uniform over the lexicon's
/// phonemes, or over all regular ids when the lexicon is empty.
pub fn random_unconditional<R: Rng + ?Sized>(
    y: &PhonemeSeq,
    inventory: &PhonemeInventory,
    rng: &mut R,
) -> PhonemeSeq {
    let mut range = inventory.phoneme_ids();
    if range.is_empty() {
        range = inventory.regular_ids();
    }
    PhonemeSeq {
        ids: (0..y.len()).map(|_| rng.gen_range(range.clone())).collect(),
    }
}
