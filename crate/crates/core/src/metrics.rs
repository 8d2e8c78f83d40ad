//! Objective proxies: SI-SNR, watermark frame accuracy, unedited-region
//! fidelity, runaway rate and a one-sided sign test.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampling::StopReason;

/// Value reported when the estimate matches the reference exactly.
pub const SI_SNR_CAP_DB: f64 = 150.0;

/// Scale-invariant SNR in dB over zero-mean signals.
pub fn si_snr(reference: &[f32], estimate: &[f32]) -> Result<f64> {
    if reference.len() != estimate.len() {
        return Err(Error::LengthMismatch {
            what: "SI-SNR reference vs estimate",
            left: reference.len(),
            right: estimate.len(),
        });
    }
    if reference.is_empty() {
        return Err(Error::Empty("SI-SNR input"));
    }
    let n = reference.len() as f64;
    let mr = reference.iter().map(|&x| x as f64).sum::<f64>() / n;
    let me = estimate.iter().map(|&x| x as f64).sum::<f64>() / n;
    let r: Vec<f64> = reference.iter().map(|&x| x as f64 - mr).collect();
    let e: Vec<f64> = estimate.iter().map(|&x| x as f64 - me).collect();
    let rr: f64 = r.iter().map(|x| x * x).sum();
    if rr == 0.0 {
        return Err(Error::ZeroEnergy);
    }
    let scale = r.iter().zip(&e).map(|(a, b)| a * b).sum::<f64>() / rr;
    let target: f64 = rr * scale * scale;
    let noise: f64 = r.iter().zip(&e).map(|(a, b)| (b - scale * a).powi(2)).sum();
    if target == 0.0 {
        return Ok(-SI_SNR_CAP_DB);
    }
    if noise <= target * 10f64.powf(-SI_SNR_CAP_DB / 10.0) {
        return Ok(SI_SNR_CAP_DB);
    }
    Ok((10.0 * (target / noise).log10()).clamp(-SI_SNR_CAP_DB, SI_SNR_CAP_DB))
}

pub fn wm_frame_accuracy(true_bits: &[u8], probs: &[f32], threshold: f32) -> Result<f64> {
    if true_bits.len() != probs.len() {
        return Err(Error::LengthMismatch {
            what: "watermark bits vs predictions",
            left: true_bits.len(),
            right: probs.len(),
        });
    }
    if true_bits.is_empty() {
        return Err(Error::Empty("watermark bits"));
    }
    let hits = true_bits
        .iter()
        .zip(probs)
        .filter(|(&b, &p)| (p >= threshold) == (b == 1))
        .count();
    Ok(hits as f64 / true_bits.len() as f64)
}

/// Matching sample ranges of an unedited region in the original and edited signals.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UneditedRegion {
    pub original: Range<usize>,
    pub edited: Range<usize>,
}

/// SI-SNR restricted to the unedited regions.
pub fn context_fidelity(original: &[f32], edited: &[f32], regions: &[UneditedRegion]) -> Result<f64> {
    let mut a = Vec::new();
    let mut b = Vec::new();
    for r in regions {
        if r.original.len() != r.edited.len() {
            return Err(Error::LengthMismatch {
                what: "unedited region lengths",
                left: r.original.len(),
                right: r.edited.len(),
            });
        }
        if r.original.end > original.len() || r.edited.end > edited.len() {
            return Err(Error::InvalidSpans("unedited region outside the signal".into()));
        }
        a.extend_from_slice(&original[r.original.clone()]);
        b.extend_from_slice(&edited[r.edited.clone()]);
    }
    if a.is_empty() {
        return Err(Error::Empty("unedited region"));
    }
    si_snr(&a, &b)
}

/// Fraction of generations that hit the frame cap instead of emitting `[eog]`.
pub fn runaway_fraction(stops: &[StopReason]) -> Result<f64> {
    if stops.is_empty() {
        return Err(Error::Empty("generation outcomes"));
    }
    Ok(stops.iter().filter(|&&s| s == StopReason::MaxLen).count() as f64 / stops.len() as f64)
}

/// One-sided exact sign test: `P(X ≥ wins)` for `X ~ Binomial(n, 1/2)`.
pub fn sign_test_p(wins: usize, n: usize) -> f64 {
    let mut log_choose = 0.0f64;
    let mut total = 0.0;
    for k in 0..=n {
        if k > 0 {
            log_choose += ((n - k + 1) as f64).ln() - (k as f64).ln();
        }
        if k >= wins {
            total += (log_choose - n as f64 * std::f64::consts::LN_2).exp();
        }
    }
    total.min(1.0)
}

pub fn mean_and_stderr(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}
