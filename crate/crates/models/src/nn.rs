//! Time-major building blocks. Activations are `[batch, time, channels]`;
//! convolutions are expressed as shifted concatenations followed by a matmul.

use candle_core::{Tensor, D};

use crate::error::Result;
use crate::params::{Init, ParamStore};

/// How a freshly created weight is drawn.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WeightInit {
    /// Normal with standard deviation `gain / sqrt(fan_in)`.
    Scaled(f64),
    Zeros,
}

/// Creates or fetches parameters under a name prefix.
pub struct Builder<'a> {
    pub store: &'a mut ParamStore,
    pub init: &'a mut Init,
}

impl Builder<'_> {
    pub fn tensor(&mut self, name: &str, shape: &[usize], std: f64) -> Result<Tensor> {
        let init = &mut *self.init;
        self.store.get_or_init(name, shape, |sh| init.normal(sh, std))
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f32) -> Result<Tensor> {
        let init = &mut *self.init;
        self.store.get_or_init(name, shape, |sh| init.constant(sh, value))
    }

    pub fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize, w: WeightInit) -> Result<Linear> {
        let std = match w {
            WeightInit::Scaled(g) => g / (fan_in as f64).sqrt(),
            WeightInit::Zeros => 0.0,
        };
        Ok(Linear {
            w: self.tensor(&format!("{name}.w"), &[fan_in, fan_out], std)?,
            b: self.constant(&format!("{name}.b"), &[fan_out], 0.0)?,
        })
    }

    pub fn conv(&mut self, name: &str, kernel: usize, c_in: usize, c_out: usize, w: WeightInit) -> Result<Conv> {
        Ok(Conv {
            kernel,
            proj: self.linear(name, kernel * c_in, c_out, w)?,
        })
    }

    pub fn layer_norm(&mut self, name: &str, dim: usize) -> Result<LayerNorm> {
        Ok(LayerNorm {
            gamma: self.constant(&format!("{name}.g"), &[dim], 1.0)?,
            beta: self.constant(&format!("{name}.b"), &[dim], 0.0)?,
        })
    }
}

/// `y = x · w + b` over the last axis; `w` is stored as `[in, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: Tensor,
    pub b: Tensor,
}

impl Linear {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let last = *dims.last().expect("non-scalar input");
        let rows: usize = dims[..dims.len() - 1].iter().product();
        let y = x.reshape((rows, last))?.matmul(&self.w)?.broadcast_add(&self.b)?;
        let mut out = dims;
        *out.last_mut().expect("non-scalar") = self.w.dim(1)?;
        Ok(y.reshape(out)?)
    }

    pub fn in_dim(&self) -> usize {
        self.w.dims()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.w.dims()[1]
    }

    pub fn detached(&self) -> Self {
        Self {
            w: self.w.detach(),
            b: self.b.detach(),
        }
    }
}

/// Same-length 1-D convolution with odd kernel and zero padding.
#[derive(Debug, Clone)]
pub struct Conv {
    pub kernel: usize,
    pub proj: Linear,
}

impl Conv {
    /// Sum over taps of time-shifted matmuls: `y_t = Σ_j x_{t+j−k/2} · W_j + b`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if self.kernel == 1 {
            return self.proj.forward(x);
        }
        let (b, len, c) = x.dims3()?;
        let half = self.kernel / 2;
        let padded = x.pad_with_zeros(1, half, half)?;
        let mut acc: Option<Tensor> = None;
        for j in 0..self.kernel {
            let tap = padded.narrow(1, j, len)?.contiguous()?.reshape((b * len, c))?;
            let y = tap.matmul(&self.proj.w.narrow(0, j * c, c)?)?;
            acc = Some(match acc {
                None => y,
                Some(a) => (a + y)?,
            });
        }
        let out = acc.expect("kernel >= 1").broadcast_add(&self.proj.b)?;
        Ok(out.reshape((b, len, self.proj.out_dim()))?)
    }

    pub fn detached(&self) -> Self {
        Self {
            kernel: self.kernel,
            proj: self.proj.detached(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl LayerNorm {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(candle_nn::ops::layer_norm_slow(x, &self.gamma, &self.beta, 1e-5)?)
    }
}

/// Strided downsampling with kernel equal to stride: folds `stride` steps
/// into the channel axis, then projects.
pub fn fold_time(x: &Tensor, stride: usize) -> Result<Tensor> {
    let (b, l, c) = x.dims3()?;
    Ok(x.contiguous()?.reshape((b, l / stride, stride * c))?)
}

/// Inverse of [`fold_time`]: spreads `stride · c` channels over `stride` steps.
pub fn unfold_time(x: &Tensor, stride: usize) -> Result<Tensor> {
    let (b, l, c) = x.dims3()?;
    Ok(x.contiguous()?.reshape((b, l * stride, c / stride))?)
}

pub fn act(x: &Tensor) -> Result<Tensor> {
    Ok(x.silu()?)
}

pub fn mean_abs_diff(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    Ok((a - b)?.abs()?.mean_all()?)
}

pub fn mean_sq_diff(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    Ok((a - b)?.sqr()?.mean_all()?)
}

/// Binary cross-entropy from logits, averaged: `softplus(x) − y·x`.
pub fn bce_with_logits(logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
    let relu = logits.relu()?;
    let softplus = (relu.clone() + (logits.abs()?.neg()?.exp()? + 1.0)?.log()?)?;
    Ok((softplus - (logits * targets)?)?.mean_all()?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::sigmoid(x)?)
}

pub fn log_softmax_last(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::log_softmax(x, D::Minus1)?)
}
