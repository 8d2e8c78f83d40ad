//! Multi-resolution log-magnitude spectral loss with fixed DFT bases.

use candle_core::{Device, Tensor};

use crate::error::Result;
use crate::nn::mean_abs_diff;

/// Default power added before the logarithm.
pub const POWER_FLOOR: f64 = 1e-3;

struct Resolution {
    window: usize,
    hop: usize,
    /// `[window, 2·bins]`: Hann-windowed cosine then sine columns.
    basis: Tensor,
}

pub struct SpectralLoss {
    resolutions: Vec<Resolution>,
    floor: f64,
}

impl SpectralLoss {
    /// Windows must be divisible by 4; the hop is a quarter window. `floor`
    /// is added to every power bin before the logarithm.
    pub fn new(windows: &[usize], floor: f64) -> Result<Self> {
        let resolutions = windows
            .iter()
            .map(|&w| {
                let bins = w / 2 + 1;
                let mut data = vec![0f32; w * 2 * bins];
                for n in 0..w {
                    let hann = 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / w as f64).cos();
                    for k in 0..bins {
                        let ang = 2.0 * std::f64::consts::PI * (n * k) as f64 / w as f64;
                        data[n * 2 * bins + k] = (hann * ang.cos()) as f32;
                        data[n * 2 * bins + bins + k] = (hann * ang.sin()) as f32;
                    }
                }
                Ok(Resolution {
                    window: w,
                    hop: w / 4,
                    basis: Tensor::from_vec(data, (w, 2 * bins), &Device::Cpu)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { resolutions, floor })
    }

    /// Mean over resolutions of the L1 distance between log power spectra.
    /// Resolutions with windows longer than the signal are skipped.
    pub fn forward(&self, estimate: &Tensor, reference: &Tensor) -> Result<Tensor> {
        let n = reference.dim(1)?;
        let mut terms = Vec::new();
        for r in self.resolutions.iter().filter(|r| r.window <= n) {
            let a = log_power(&frames(estimate, r.window, r.hop)?, &r.basis, self.floor)?;
            let b = log_power(&frames(reference, r.window, r.hop)?, &r.basis, self.floor)?;
            terms.push(mean_abs_diff(&a, &b)?);
        }
        if terms.is_empty() {
            return Ok(Tensor::new(0f32, &Device::Cpu)?);
        }
        let count = terms.len() as f64;
        Ok((Tensor::stack(&terms, 0)?.sum_all()? / count)?)
    }
}

/// Overlapping frames `[batch, count, window]` at a quarter-window hop,
/// grouped by phase (frame order is irrelevant to the loss).
fn frames(x: &Tensor, window: usize, hop: usize) -> Result<Tensor> {
    let (b, n) = x.dims2()?;
    let mut parts = Vec::new();
    for j in 0..window / hop {
        let start = j * hop;
        let count = (n - start) / window;
        if count > 0 {
            parts.push(x.narrow(1, start, count * window)?.reshape((b, count, window))?);
        }
    }
    Ok(Tensor::cat(&parts, 1)?)
}

fn log_power(frames: &Tensor, basis: &Tensor, floor: f64) -> Result<Tensor> {
    let (b, f, w) = frames.dims3()?;
    let spec = frames.reshape((b * f, w))?.matmul(basis)?;
    let bins = basis.dim(1)? / 2;
    let re = spec.narrow(1, 0, bins)?;
    let im = spec.narrow(1, bins, bins)?;
    Ok(((re.sqr()? + im.sqr()?)? + floor)?.log()?)
}
