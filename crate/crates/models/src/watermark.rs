//! Watermarking, context-aware decoder: frozen encoder and quantizer, a
//! trainable decoder fed by codes, per-frame watermark bits and a masked
//! encoder over the silence-masked original, plus a per-frame detector.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use candle_core::{Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use spanedit_core::layout::SpanSampler;
use spanedit_core::watermark::build_masked_waveform;
use spanedit_core::{CodeGrid, MaskedWaveform, SpanSet, WatermarkSeq, Waveform};

use crate::codec::{Codec, CodecConfig, Decoder, Encoder, LatentFrames};
use crate::codec_train::{batch_tensor, prepare_clips, random_crops};
use crate::error::{ModelError, Result};
use crate::nn::{bce_with_logits, mean_abs_diff, sigmoid, unfold_time, Builder, Linear, WeightInit};
use crate::optim::{OptimConfig, Trainer};
use crate::params::{load_checkpoint, save_checkpoint, tensor_to_vec, Init, ParamStore};
use crate::spectral::SpectralLoss;

pub const WM_KIND: &str = "wm-codec";

/// Initial scale of the waveform-level watermark pattern.
const WM_CARRIER_GAIN: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WmConfig {
    pub codec: CodecConfig,
    pub embed_dim: usize,
    /// Hash of the frozen encoder and codebooks at construction time.
    pub frozen_hash: String,
}

pub struct WmCodec {
    pub cfg: WmConfig,
    pub base: Codec,
    store: ParamStore,
    decoder: Decoder,
    skips: Vec<Linear>,
    wm_proj: Vec<Linear>,
    masked_encoder: Encoder,
    fuse: Linear,
    wm_embedding: Tensor,
    detector: Encoder,
    detector_head: Linear,
}

impl WmCodec {
    /// Initializes from a trained codec: the decoder and both encoders start
    /// from the codec's weights, skip projections start at zero and the
    /// fusion layer passes the code features through, so the initial output
    /// equals plain codec decoding.
    pub fn from_codec(base: Codec, embed_dim: usize, seed: u64) -> Result<Self> {
        let base_tensors = base.tensors()?;
        let mut store = ParamStore::new();
        for (name, t) in &base_tensors {
            let t = t.copy()?;
            if let Some(rest) = name.strip_prefix("dec.") {
                store.get_or_init(&format!("dec.{rest}"), t.dims(), |_| Ok(t.clone()))?;
            } else if let Some(rest) = name.strip_prefix("enc.") {
                store.get_or_init(&format!("menc.{rest}"), t.dims(), |_| Ok(t.copy()?))?;
                store.get_or_init(&format!("det.{rest}"), t.dims(), |_| Ok(t.copy()?))?;
            }
        }
        let cfg = WmConfig {
            codec: base.cfg.clone(),
            embed_dim,
            frozen_hash: base.frozen_hash()?,
        };
        Self::assemble(cfg, base, store, seed)
    }

    fn assemble(cfg: WmConfig, base: Codec, mut store: ParamStore, seed: u64) -> Result<Self> {
        let c = &cfg.codec;
        let (d, e) = (c.latent_dim, cfg.embed_dim);
        let mut init = Init::new(seed);
        let mut b = Builder {
            store: &mut store,
            init: &mut init,
        };
        let decoder = Decoder::build(&mut b, "dec", c)?;
        let n = c.num_blocks();
        let mut skips = Vec::with_capacity(n + 1);
        let mut wm_proj = Vec::with_capacity(n + 1);
        for i in 0..=n {
            let ch = c.channels(i);
            let steps: usize = c.strides[i..].iter().product();
            skips.push(b.linear(&format!("dec.skip{i}"), ch, ch, WeightInit::Zeros)?);
            let init = if i == 0 { WeightInit::Scaled(WM_CARRIER_GAIN) } else { WeightInit::Zeros };
            wm_proj.push(b.linear(&format!("wm_proj{i}"), e, steps * ch, init)?);
        }
        let masked_encoder = Encoder::build(&mut b, "menc", c)?;
        let detector = Encoder::build(&mut b, "det", c)?;
        let detector_head = b.linear("det_head", d, 1, WeightInit::Scaled(1.0))?;
        let wm_embedding = b.tensor("wm_embedding", &[2, e], 1.0)?;
        let fuse_w = b.store.get_or_init("fuse.w", &[2 * d + e, d], |_| {
            let mut w = vec![0f32; (2 * d + e) * d];
            for i in 0..d {
                w[i * d + i] = 1.0;
            }
            Ok(Tensor::from_vec(w, (2 * d + e, d), &Device::Cpu)?)
        })?;
        let fuse_b = b.constant("fuse.b", &[d], 0.0)?;
        Ok(Self {
            cfg,
            base,
            store,
            decoder,
            skips,
            wm_proj,
            masked_encoder,
            fuse: Linear { w: fuse_w, b: fuse_b },
            wm_embedding,
            detector,
            detector_head,
        })
    }

    pub fn stride(&self) -> usize {
        self.base.stride()
    }

    pub fn sample_rate(&self) -> u32 {
        self.base.cfg.sample_rate
    }

    pub fn tensors(&self) -> Result<BTreeMap<String, Tensor>> {
        let mut out = self.store.tensors();
        for (k, t) in self.base.tensors()? {
            out.insert(format!("base.{k}"), t);
        }
        Ok(out)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        save_checkpoint(dir, WM_KIND, &self.cfg, &self.tensors()?)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (cfg, tensors) = load_checkpoint::<WmConfig>(dir, WM_KIND)?;
        let mut base_t = BTreeMap::new();
        let mut own = Vec::new();
        for (k, t) in tensors {
            match k.strip_prefix("base.") {
                Some(rest) => {
                    base_t.insert(rest.to_string(), t);
                }
                None => own.push((k, t)),
            }
        }
        let base = Codec::from_tensors(&cfg.codec, base_t)?;
        if base.frozen_hash()? != cfg.frozen_hash {
            return Err(ModelError::Checkpoint {
                path: dir.to_path_buf(),
                reason: "frozen encoder weights differ from the recorded hash".into(),
            });
        }
        let store = ParamStore::from_tensors(own)?;
        let before = store.len();
        let wm = Self::assemble(cfg, base, store, 0)?;
        if wm.store.len() != before {
            return Err(ModelError::Shape("watermarking decoder weights are missing parameters".into()));
        }
        Ok(wm)
    }

    /// Hash of the frozen encoder and codebooks.
    pub fn frozen_hash(&self) -> Result<String> {
        self.base.frozen_hash()
    }

    pub fn codes(&self, w: &Waveform) -> Result<CodeGrid> {
        self.base.codes(w)
    }

    /// `zq`: `[B, T, D]`; `bits`: `[B, T]` as u32; `masked`: `[B, T·stride]`.
    fn decode_tensors(&self, zq: &Tensor, bits: &Tensor, masked: &Tensor) -> Result<Tensor> {
        let (b, t, _) = zq.dims3()?;
        let emb = self
            .wm_embedding
            .index_select(&bits.flatten_all()?, 0)?
            .reshape((b, t, self.cfg.embed_dim))?;
        let ctx = self.masked_encoder.forward(masked)?;
        let fused = self.fuse.forward(&Tensor::cat(&[zq, &emb, &ctx.latent], 2)?)?;
        let mut additions = Vec::with_capacity(self.skips.len());
        for (i, (skip, proj)) in self.skips.iter().zip(&self.wm_proj).enumerate() {
            let f = &ctx.features[i];
            let steps = f.dim(1)? / t;
            let mark = unfold_time(&proj.forward(&emb)?, steps)?;
            additions.push((skip.forward(f)? + mark)?);
        }
        self.decoder.forward(&fused, Some(&additions))
    }

    /// Per-frame detector logits `[B, T]` for `[B, T·stride]` audio.
    fn detector_logits(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.detector.forward(x)?.latent;
        let (b, t, _) = h.dims3()?;
        Ok(self.detector_head.forward(&h)?.reshape((b, t))?)
    }

    /// Decodes codes with watermark bits and the silence-masked context.
    pub fn wm_decode(&self, codes: &CodeGrid, wm: &WatermarkSeq, mw: &MaskedWaveform) -> Result<Waveform> {
        let t = codes.frames();
        let stride = self.stride();
        if wm.len() != t {
            return Err(spanedit_core::Error::LengthMismatch {
                what: "watermark bits vs code frames",
                left: wm.len(),
                right: t,
            }
            .into());
        }
        if mw.frames(stride) != t {
            return Err(spanedit_core::Error::LengthMismatch {
                what: "masked waveform frames vs code frames",
                left: mw.frames(stride),
                right: t,
            }
            .into());
        }
        if mw.sample_rate != self.sample_rate() {
            return Err(spanedit_core::Error::SampleRateMismatch {
                expected: self.sample_rate(),
                found: mw.sample_rate,
            }
            .into());
        }
        if t == 0 {
            return Err(ModelError::TooShort { samples: 0, stride });
        }
        let zq = self.base.dequantize(codes)?.to_tensor()?;
        let bits = Tensor::from_vec(wm.bits().iter().map(|&b| b as u32).collect::<Vec<_>>(), (1, t), &Device::Cpu)?;
        let masked = Tensor::from_vec(mw.samples[..t * stride].to_vec(), (1, t * stride), &Device::Cpu)?;
        let y = self.decode_tensors(&zq, &bits, &masked)?;
        Ok(Waveform::new(tensor_to_vec(&y)?, self.sample_rate())?)
    }

    /// Per-frame probability that the frame carries the watermark.
    pub fn predict_watermark(&self, w: &Waveform) -> Result<Vec<f32>> {
        let x = self.base.frame_samples(w)?;
        let t = Tensor::from_vec(x.to_vec(), (1, x.len()), &Device::Cpu)?;
        tensor_to_vec(&sigmoid(&self.detector_logits(&t)?)?)
    }

    /// Decodes `generated_codes` against `original` (already in the edited
    /// frame layout) with the spans silenced and marked.
    pub fn splice_and_mark(
        &self,
        original: &Waveform,
        generated_codes: &CodeGrid,
        spans: &SpanSet,
    ) -> Result<(Waveform, WatermarkSeq)> {
        let t = generated_codes.frames();
        if original.frames(self.stride()) != t {
            return Err(spanedit_core::Error::LengthMismatch {
                what: "original frames vs generated code frames",
                left: original.frames(self.stride()),
                right: t,
            }
            .into());
        }
        let wm = WatermarkSeq::from_spans(spans, t)?;
        let mw = build_masked_waveform(original, spans, self.stride())?;
        Ok((self.wm_decode(generated_codes, &wm, &mw)?, wm))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WmTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub crop_frames: usize,
    pub embed_dim: usize,
    pub optim: OptimConfig,
    pub l1_weight: f64,
    pub spectral_weight: f64,
    pub bce_weight: f64,
    pub spectral_windows: Vec<usize>,
    /// Power floor of the spectral loss; higher than the codec's so a faint
    /// mark in silent frames is not heavily penalized.
    pub spectral_floor: f64,
    /// Probability that a batch reaches the detector with a random gain.
    pub jitter_prob: f64,
    pub jitter_db: f64,
    /// Initial steps that train only the detector against the fixed initial mark.
    pub detector_warmup_steps: usize,
    pub spans: SpanSampler,
    pub log_every: usize,
}

impl Default for WmTrainConfig {
    fn default() -> Self {
        Self {
            steps: 250,
            batch_size: 4,
            crop_frames: 32,
            embed_dim: 8,
            optim: OptimConfig {
                lr: 1e-3,
                ..OptimConfig::default()
            },
            l1_weight: 10.0,
            spectral_weight: 1.0,
            bce_weight: 1.0,
            spectral_windows: vec![64, 128, 256],
            spectral_floor: 1e-2,
            jitter_prob: 0.5,
            jitter_db: 3.0,
            detector_warmup_steps: 150,
            spans: SpanSampler::default(),
            log_every: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WmStepMetrics {
    pub step: usize,
    pub loss: f64,
    pub reconstruction: f64,
    pub watermark_bce: f64,
    pub frame_accuracy: f64,
    pub lr: f64,
    pub seconds: f64,
}

/// One training batch: clean crops, codes, masks and bits.
struct WmBatch {
    x: Tensor,
    zq: Tensor,
    bits: Tensor,
    bits_f: Tensor,
    masked: Tensor,
}

fn make_batch(wm: &WmCodec, data: &[Vec<f32>], hyper: &WmTrainConfig, rng: &mut ChaCha8Rng) -> Result<WmBatch> {
    let stride = wm.stride();
    let frames = hyper.crop_frames;
    let crops = random_crops(data, hyper.batch_size, frames * stride, stride, rng);
    let x = batch_tensor(&crops)?;
    let z = wm.base.encoder.forward(&x)?.latent.detach();
    let (b, t, d) = z.dims3()?;
    let q = wm.base.rvq.quantize_detailed(&LatentFrames::new(b * t, d, tensor_to_vec(&z)?)?)?;
    let zq = Tensor::from_vec(q.quantized, (b, t, d), &Device::Cpu)?;
    let mut bits = Vec::with_capacity(b * t);
    let mut masked = Vec::with_capacity(b * t * stride);
    for crop in &crops {
        let spans = hyper.spans.sample(t, rng)?;
        let ind = spans.indicator(t);
        bits.extend(ind.iter().map(|&m| m as u32));
        for (f, &m) in ind.iter().enumerate() {
            if m {
                masked.extend(std::iter::repeat(0f32).take(stride));
            } else {
                masked.extend_from_slice(&crop[f * stride..(f + 1) * stride]);
            }
        }
    }
    let bits_t = Tensor::from_vec(bits, (b, t), &Device::Cpu)?;
    Ok(WmBatch {
        x,
        zq,
        bits_f: bits_t.to_dtype(candle_core::DType::F32)?,
        bits: bits_t,
        masked: Tensor::from_vec(masked, (b, t * stride), &Device::Cpu)?,
    })
}

/// Trains the detector alone for `detector_warmup_steps`, then decoder,
/// masked encoder and detector jointly on top of the frozen codec.
pub fn train_wm_codec(
    clips: &[Waveform],
    base: Codec,
    hyper: &WmTrainConfig,
    seed: u64,
    mut on_step: impl FnMut(&WmStepMetrics),
) -> Result<(WmCodec, Vec<WmStepMetrics>)> {
    if hyper.crop_frames < spanedit_core::layout::MIN_SAMPLING_FRAMES {
        return Err(ModelError::Config(format!(
            "crop_frames must be at least {}",
            spanedit_core::layout::MIN_SAMPLING_FRAMES
        )));
    }
    let data = prepare_clips(clips, base.cfg.sample_rate)?;
    let wm = WmCodec::from_codec(base, hyper.embed_dim, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x77a7_e12a);
    let spectral = SpectralLoss::new(&hyper.spectral_windows, hyper.spectral_floor)?;
    let warmup = hyper.detector_warmup_steps;
    let mut det_trainer = Trainer::new(wm.store.vars_with_prefix(&["det"]), &hyper.optim, warmup.max(1))?;
    let mut trainer = Trainer::new(wm.store.vars(), &hyper.optim, hyper.steps)?;
    let total = warmup + hyper.steps;
    let started = Instant::now();
    let mut metrics = Vec::new();
    for step in 0..total {
        let detector_only = step < warmup;
        let batch = make_batch(&wm, &data, hyper, &mut rng)?;
        let mut y = wm.decode_tensors(&batch.zq, &batch.bits, &batch.masked)?;
        if detector_only {
            y = y.detach();
        }
        let rec = ((mean_abs_diff(&y, &batch.x)? * hyper.l1_weight)?
            + (spectral.forward(&y, &batch.x)? * hyper.spectral_weight)?)?;
        let heard = if rng.gen_bool(hyper.jitter_prob) {
            let db = rng.gen_range(-hyper.jitter_db..=hyper.jitter_db);
            (&y * 10f64.powf(db / 20.0))?
        } else {
            y
        };
        let logits = wm.detector_logits(&heard)?;
        let bce = bce_with_logits(&logits, &batch.bits_f)?;
        let loss = (&rec + (&bce * hyper.bce_weight)?)?;
        let loss_v = loss.to_scalar::<f32>()? as f64;
        if !loss_v.is_finite() {
            return Err(ModelError::NonFiniteLoss {
                what: "watermark codec loss",
                step,
            });
        }
        let lr = if detector_only {
            let lr = det_trainer.learning_rate();
            det_trainer.step(&bce)?;
            lr
        } else {
            let lr = trainer.learning_rate();
            trainer.step(&loss)?;
            lr
        };
        let probs = tensor_to_vec(&sigmoid(&logits)?)?;
        let truth = tensor_to_vec(&batch.bits_f)?;
        let hits = probs.iter().zip(&truth).filter(|(p, t)| (**p >= 0.5) == (**t >= 0.5)).count();
        let m = WmStepMetrics {
            step,
            loss: loss_v,
            reconstruction: rec.to_scalar::<f32>()? as f64,
            watermark_bce: bce.to_scalar::<f32>()? as f64,
            frame_accuracy: hits as f64 / truth.len() as f64,
            lr,
            seconds: started.elapsed().as_secs_f64(),
        };
        if hyper.log_every > 0 && (step % hyper.log_every == 0 || step + 1 == total) {
            on_step(&m);
        }
        metrics.push(m);
    }
    Ok((wm, metrics))
}
