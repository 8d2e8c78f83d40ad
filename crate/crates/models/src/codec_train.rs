//! Codec training: L1 + multi-resolution spectral reconstruction, commitment
//! with straight-through gradients, EMA codebooks with dead-code re-seeding.

use std::time::Instant;

use candle_core::{Device, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use spanedit_core::Waveform;

use crate::codec::{Codec, CodecConfig, LatentFrames, Quantized, Rvq};
use crate::error::{ModelError, Result};
use crate::nn::{mean_abs_diff, mean_sq_diff};
use crate::optim::{OptimConfig, Trainer};
use crate::spectral::{SpectralLoss, POWER_FLOOR};

pub const PEAK_TARGET: f32 = 0.95;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CodecTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub crop_frames: usize,
    pub optim: OptimConfig,
    pub l1_weight: f64,
    pub spectral_weight: f64,
    pub commitment_weight: f64,
    pub spectral_windows: Vec<usize>,
    pub ema_decay: f32,
    /// Codewords whose EMA usage falls below this are re-seeded.
    pub dead_code_threshold: f32,
    pub log_every: usize,
}

impl Default for CodecTrainConfig {
    fn default() -> Self {
        Self {
            steps: 600,
            batch_size: 4,
            crop_frames: 32,
            optim: OptimConfig::default(),
            l1_weight: 10.0,
            spectral_weight: 1.0,
            commitment_weight: 0.25,
            spectral_windows: vec![64, 128, 256],
            ema_decay: 0.99,
            dead_code_threshold: 0.05,
            log_every: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodecStepMetrics {
    pub step: usize,
    pub loss: f64,
    pub reconstruction: f64,
    pub spectral: f64,
    pub commitment: f64,
    /// Fraction of non-null codewords selected at least once in the batch, averaged over stages.
    pub codebook_usage: f64,
    pub lr: f64,
    pub seconds: f64,
}

/// Peak-normalizes every clip; rejects empty corpora and wrong rates.
pub fn prepare_clips(clips: &[Waveform], sample_rate: u32) -> Result<Vec<Vec<f32>>> {
    if clips.is_empty() {
        return Err(ModelError::EmptyCorpus);
    }
    clips
        .iter()
        .map(|w| {
            if w.sample_rate != sample_rate {
                return Err(spanedit_core::Error::SampleRateMismatch {
                    expected: sample_rate,
                    found: w.sample_rate,
                }
                .into());
            }
            Ok(w.peak_normalized(PEAK_TARGET).samples)
        })
        .collect()
}

/// Random crops of `len` samples starting on multiples of `align`,
/// zero-padded when a clip is shorter.
pub fn random_crops(clips: &[Vec<f32>], batch: usize, len: usize, align: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f32>> {
    (0..batch)
        .map(|_| {
            let clip = clips.choose(rng).expect("non-empty corpus");
            let mut out = vec![0f32; len];
            if clip.len() <= len {
                out[..clip.len()].copy_from_slice(clip);
            } else {
                let start = rng.gen_range(0..=(clip.len() - len) / align) * align;
                out.copy_from_slice(&clip[start..start + len]);
            }
            out
        })
        .collect()
}

pub(crate) fn batch_tensor(rows: &[Vec<f32>]) -> Result<Tensor> {
    let len = rows[0].len();
    Ok(Tensor::from_vec(rows.concat(), (rows.len(), len), &Device::Cpu)?)
}

/// Exponential-moving-average codebook statistics; row 0 stays the null codeword.
pub struct CodebookEma {
    decay: f32,
    threshold: f32,
    usage: Vec<Vec<f32>>,
    sums: Vec<Vec<f32>>,
}

impl CodebookEma {
    pub fn new(rvq: &Rvq, decay: f32, threshold: f32) -> Self {
        Self {
            decay,
            threshold,
            usage: vec![vec![0.0; rvq.size]; rvq.num_codebooks()],
            sums: vec![vec![0.0; rvq.size * rvq.dim]; rvq.num_codebooks()],
        }
    }

    /// Folds one batch of assignments into the statistics and rewrites the
    /// codebooks. Returns the mean fraction of non-null codewords used.
    pub fn update(&mut self, rvq: &mut Rvq, q: &Quantized, rng: &mut ChaCha8Rng) -> f64 {
        let (dim, size, k_total) = (rvq.dim, rvq.size, rvq.num_codebooks());
        let frames = q.codes.len() / k_total;
        let mut usage_frac = 0.0;
        for k in 0..k_total {
            let mut counts = vec![0f32; size];
            let mut sums = vec![0f32; size * dim];
            for t in 0..frames {
                let v = q.codes[t * k_total + k] as usize;
                counts[v] += 1.0;
                for d in 0..dim {
                    sums[v * dim + d] += q.stage_inputs[k][t * dim + d];
                }
            }
            if size > 1 {
                usage_frac += counts[1..].iter().filter(|&&c| c > 0.0).count() as f64 / (size - 1) as f64;
            }
            let decay = self.decay;
            for v in 1..size {
                self.usage[k][v] = decay * self.usage[k][v] + (1.0 - decay) * counts[v];
                for d in 0..dim {
                    let s = &mut self.sums[k][v * dim + d];
                    *s = decay * *s + (1.0 - decay) * sums[v * dim + d];
                }
                if self.usage[k][v] < self.threshold {
                    // Re-seed from a random residual of this stage.
                    let t = rng.gen_range(0..frames);
                    let src = &q.stage_inputs[k][t * dim..(t + 1) * dim];
                    self.usage[k][v] = 1.0;
                    self.sums[k][v * dim..(v + 1) * dim].copy_from_slice(src);
                }
                let n = self.usage[k][v];
                for d in 0..dim {
                    rvq.books[k][v * dim + d] = self.sums[k][v * dim + d] / n;
                }
            }
        }
        usage_frac / k_total as f64
    }
}

/// Trains a codec from scratch. `on_step` sees every logged step.
pub fn train_codec(
    clips: &[Waveform],
    cfg: &CodecConfig,
    hyper: &CodecTrainConfig,
    seed: u64,
    mut on_step: impl FnMut(&CodecStepMetrics),
) -> Result<(Codec, Vec<CodecStepMetrics>)> {
    cfg.validate()?;
    let data = prepare_clips(clips, cfg.sample_rate)?;
    let mut codec = Codec::new(cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_c0de);
    let spectral = SpectralLoss::new(&hyper.spectral_windows, POWER_FLOOR)?;
    let vars = codec.store.vars();
    let mut trainer = Trainer::new(vars, &hyper.optim, hyper.steps)?;
    let mut ema = CodebookEma::new(&codec.rvq, hyper.ema_decay, hyper.dead_code_threshold);
    let crop = hyper.crop_frames * cfg.stride();
    let started = Instant::now();
    let mut metrics = Vec::new();
    for step in 0..hyper.steps {
        let x = batch_tensor(&random_crops(&data, hyper.batch_size, crop, cfg.stride(), &mut rng))?;
        let z = codec.encoder.forward(&x)?.latent;
        let (b, t, d) = z.dims3()?;
        let flat = LatentFrames::new(b * t, d, crate::params::tensor_to_vec(&z)?)?;
        let q = codec.rvq.quantize_detailed(&flat)?;
        let zq_const = Tensor::from_vec(q.quantized.clone(), (b, t, d), &Device::Cpu)?;
        // Straight-through: forward uses the quantized latent, gradients reach z.
        let zq = (&z + (&zq_const - z.detach())?)?;
        let y = codec.decoder.forward(&zq, None)?;
        let rec = mean_abs_diff(&y, &x)?;
        let spec = spectral.forward(&y, &x)?;
        let commit = mean_sq_diff(&z, &zq_const)?;
        let loss = ((rec.clone() * hyper.l1_weight)?
            + (spec.clone() * hyper.spectral_weight)?
            + (commit.clone() * hyper.commitment_weight)?)?;
        let loss_v = loss.to_scalar::<f32>()? as f64;
        if !loss_v.is_finite() {
            return Err(ModelError::NonFiniteLoss {
                what: "codec loss",
                step,
            });
        }
        let lr = trainer.learning_rate();
        trainer.step(&loss)?;
        let usage = ema.update(&mut codec.rvq, &q, &mut rng);
        let m = CodecStepMetrics {
            step,
            loss: loss_v,
            reconstruction: rec.to_scalar::<f32>()? as f64,
            spectral: spec.to_scalar::<f32>()? as f64,
            commitment: commit.to_scalar::<f32>()? as f64,
            codebook_usage: usage,
            lr,
            seconds: started.elapsed().as_secs_f64(),
        };
        if hyper.log_every > 0 && (step % hyper.log_every == 0 || step + 1 == hyper.steps) {
            on_step(&m);
        }
        metrics.push(m);
    }
    Ok((codec, metrics))
}

/// Mean of the weighted reconstruction objective over fixed evaluation crops.
pub fn reconstruction_loss(codec: &Codec, clips: &[Waveform], hyper: &CodecTrainConfig, seed: u64) -> Result<f64> {
    let data = prepare_clips(clips, codec.cfg.sample_rate)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let crop = hyper.crop_frames * codec.stride();
    let spectral = SpectralLoss::new(&hyper.spectral_windows, POWER_FLOOR)?;
    let x = batch_tensor(&random_crops(&data, hyper.batch_size.max(4), crop, codec.stride(), &mut rng))?;
    let z = codec.encoder.forward(&x)?.latent;
    let (b, t, d) = z.dims3()?;
    let q = codec.rvq.quantize_detailed(&LatentFrames::new(b * t, d, crate::params::tensor_to_vec(&z)?)?)?;
    let zq = Tensor::from_vec(q.quantized, (b, t, d), &Device::Cpu)?;
    let y = codec.decoder.forward(&zq, None)?;
    let rec = mean_abs_diff(&y, &x)?.to_scalar::<f32>()? as f64;
    let spec = spectral.forward(&y, &x)?.to_scalar::<f32>()? as f64;
    Ok(hyper.l1_weight * rec + hyper.spectral_weight * spec)
}
