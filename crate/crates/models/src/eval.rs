//! Model-based evaluation: reconstruction and watermark quality, the
//! context-input ablation, teacher-forcing accuracy and runaway rate.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use spanedit_core::layout::SpanSampler;
use spanedit_core::metrics::{mean_and_stderr, runaway_fraction, si_snr, sign_test_p, wm_frame_accuracy};
use spanedit_core::watermark::build_masked_waveform;
use spanedit_core::{CfgParams, MaskedWaveform, PhonemeInventory, SamplerParams, SpanSet, StopReason, WatermarkSeq, Waveform};

use crate::ar::ArModel;
use crate::ar_train::{ArExample, TokenizedUtterance};
use crate::codec_train::PEAK_TARGET;
use crate::engine::{edit_span_cap, generate_spans};
use crate::error::{ModelError, Result};
use crate::watermark::WmCodec;

/// Metric name to value, per utterance and in aggregate.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalReport {
    pub metrics: BTreeMap<String, f64>,
    pub per_utterance: BTreeMap<String, BTreeMap<String, f64>>,
    pub config: serde_json::Value,
    pub seed: u64,
}

impl EvalReport {
    pub fn new(config: serde_json::Value, seed: u64) -> Self {
        Self {
            config,
            seed,
            ..Self::default()
        }
    }

    pub fn set(&mut self, name: &str, value: f64) {
        self.metrics.insert(name.to_string(), value);
    }

    pub fn set_utterance(&mut self, id: &str, name: &str, value: f64) {
        self.per_utterance
            .entry(id.to_string())
            .or_default()
            .insert(name.to_string(), value);
    }

    /// Fails on the first non-finite metric.
    pub fn validate(&self) -> Result<()> {
        let aggregate = self.metrics.iter().map(|(k, v)| (k.clone(), *v));
        let per = self
            .per_utterance
            .iter()
            .flat_map(|(id, m)| m.iter().map(move |(k, v)| (format!("{id}/{k}"), *v)));
        match aggregate.chain(per).find(|(_, v)| !v.is_finite()) {
            Some((k, v)) => Err(ModelError::Config(format!("metric {k} is not finite: {v}"))),
            None => Ok(()),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        self.validate()?;
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Aligned `name value` lines of the aggregate metrics.
    pub fn to_table(&self) -> String {
        let width = self.metrics.keys().map(String::len).max().unwrap_or(0);
        self.metrics
            .iter()
            .map(|(k, v)| format!("{k:<width$}  {v:.4}\n"))
            .collect()
    }
}

/// Peak-normalized and trimmed to whole frames, as the models see audio.
pub fn model_input(w: &Waveform, stride: usize) -> Result<Waveform> {
    let frames = w.frames(stride);
    if frames == 0 {
        return Err(ModelError::TooShort {
            samples: w.len(),
            stride,
        });
    }
    Ok(w.peak_normalized(PEAK_TARGET).truncated(frames * stride))
}

/// One utterance with edit-like spans for decoder evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeCase {
    pub id: String,
    pub waveform: Waveform,
    pub spans: SpanSet,
}

/// Draws spans for each utterance from a seeded sampler.
pub fn decode_cases(utterances: &[(String, Waveform)], stride: usize, sampler: &SpanSampler, seed: u64) -> Result<Vec<DecodeCase>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    utterances
        .iter()
        .map(|(id, w)| {
            let waveform = model_input(w, stride)?;
            let spans = sampler.sample(waveform.frames(stride), &mut rng)?;
            Ok(DecodeCase {
                id: id.clone(),
                waveform,
                spans,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeScores {
    pub id: String,
    /// Frame accuracy of the detector on the marked decode.
    pub wm_accuracy: f64,
    /// Unedited-region SI-SNR with the masked original as context.
    pub context_si_snr: f64,
    /// Same with an all-zero context input.
    pub zeroed_si_snr: f64,
}

/// Ground-truth codes are decoded with the spans marked, once with the
/// masked original and once with zeroed context.
pub fn score_decode(wm: &WmCodec, case: &DecodeCase) -> Result<DecodeScores> {
    let stride = wm.stride();
    let w = &case.waveform;
    let frames = w.frames(stride);
    let codes = wm.codes(w)?;
    let bits = WatermarkSeq::from_spans(&case.spans, frames)?;
    let mw = build_masked_waveform(w, &case.spans, stride)?;
    let with_ctx = wm.wm_decode(&codes, &bits, &mw)?;
    let zeroed = wm.wm_decode(&codes, &bits, &MaskedWaveform::zeroed(mw.len(), mw.sample_rate))?;
    let probs = wm.predict_watermark(&with_ctx)?;
    let keep: Vec<usize> = (0..frames * stride).filter(|i| !case.spans.contains(i / stride)).collect();
    let pick = |x: &Waveform| keep.iter().map(|&i| x.samples[i]).collect::<Vec<f32>>();
    let reference = pick(w);
    Ok(DecodeScores {
        id: case.id.clone(),
        wm_accuracy: wm_frame_accuracy(bits.bits(), &probs, 0.5)?,
        context_si_snr: si_snr(&reference, &pick(&with_ctx))?,
        zeroed_si_snr: si_snr(&reference, &pick(&zeroed))?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextBenefit {
    pub n: usize,
    pub wins: usize,
    pub p_value: f64,
    pub mean_context_db: f64,
    pub mean_zeroed_db: f64,
    pub mean_gain_db: f64,
    pub gain_stderr_db: f64,
}

/// Paired sign test of context against zeroed context.
pub fn context_benefit(scores: &[DecodeScores]) -> Result<ContextBenefit> {
    if scores.is_empty() {
        return Err(spanedit_core::Error::Empty("decode scores").into());
    }
    let gains: Vec<f64> = scores.iter().map(|s| s.context_si_snr - s.zeroed_si_snr).collect();
    let wins = gains.iter().filter(|&&g| g > 0.0).count();
    let (mean_gain_db, gain_stderr_db) = mean_and_stderr(&gains);
    let n = scores.len();
    Ok(ContextBenefit {
        n,
        wins,
        p_value: sign_test_p(wins, n),
        mean_context_db: scores.iter().map(|s| s.context_si_snr).sum::<f64>() / n as f64,
        mean_zeroed_db: scores.iter().map(|s| s.zeroed_si_snr).sum::<f64>() / n as f64,
        mean_gain_db,
        gain_stderr_db,
    })
}

/// Codec reconstruction SI-SNR of one waveform.
pub fn reconstruction_si_snr(wm: &WmCodec, w: &Waveform) -> Result<f64> {
    let x = model_input(w, wm.stride())?;
    let codes = wm.codes(&x)?;
    let y = wm.wm_decode(
        &codes,
        &WatermarkSeq::zeros(codes.frames()),
        &MaskedWaveform {
            samples: x.samples.clone(),
            spans: SpanSet::empty(),
            sample_rate: x.sample_rate,
        },
    )?;
    Ok(si_snr(&x.samples, &y.samples)?)
}

/// Teacher-forcing top-1 accuracy for every channel.
pub fn teacher_forcing_report(model: &ArModel, examples: &[ArExample]) -> Result<Vec<f64>> {
    if examples.is_empty() {
        return Err(ModelError::EmptyCorpus);
    }
    (0..model.cfg.num_codebooks)
        .map(|k| crate::ar_train::teacher_forcing_accuracy(model, examples, k))
        .collect()
}

/// A generation task: regenerate `spans` of a tokenized utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerationCase {
    pub utterance: TokenizedUtterance,
    pub spans: SpanSet,
}

/// One edit-sized span per utterance, drawn from a seeded sampler.
pub fn generation_cases(corpus: &[TokenizedUtterance], max_mask_ratio: f64, seed: u64) -> Result<Vec<GenerationCase>> {
    let sampler = SpanSampler {
        max_spans: 1,
        max_mask_ratio,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    corpus
        .iter()
        .map(|u| {
            Ok(GenerationCase {
                spans: sampler.sample(u.codes.frames(), &mut rng)?,
                utterance: u.clone(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunawayStats {
    pub rate: f64,
    /// Stop reason of every span, ordered by case then seed.
    pub stops: Vec<StopReason>,
    pub mean_span_frames: f64,
}

/// Fraction of `(case, seed)` generations whose spans end at the frame cap.
/// Seeds are `sampler.seed + 0 .. n_seeds`.
pub fn runaway_rate(
    model: &ArModel,
    inventory: &PhonemeInventory,
    cases: &[GenerationCase],
    n_seeds: usize,
    cfg: &CfgParams,
    sampler: &SamplerParams,
) -> Result<RunawayStats> {
    if n_seeds == 0 {
        return Err(spanedit_core::Error::InvalidParameter("runaway rate needs at least one seed".into()).into());
    }
    if cases.is_empty() {
        return Err(spanedit_core::Error::Empty("generation cases").into());
    }
    let mut stops = Vec::new();
    let mut lengths = Vec::new();
    for case in cases {
        let u = &case.utterance;
        let segments: Vec<_> = case
            .spans
            .context_segments(u.codes.frames())
            .into_iter()
            .map(|r| u.codes.grid().slice_rows(r))
            .collect();
        let caps: Vec<usize> = case
            .spans
            .iter()
            .map(|s| sampler.max_span_frames.unwrap_or_else(|| edit_span_cap(s.len())))
            .collect();
        for s in 0..n_seeds as u64 {
            let sp = SamplerParams {
                seed: sampler.seed.wrapping_add(s),
                ..*sampler
            };
            let g = generate_spans(model, &u.phonemes, &segments, inventory, cfg, &sp, &caps)?;
            stops.extend_from_slice(&g.stop_reasons);
            lengths.extend(g.span_lengths.iter().map(|&l| l as f64));
        }
    }
    Ok(RunawayStats {
        rate: runaway_fraction(&stops)?,
        stops,
        mean_span_frames: mean_and_stderr(&lengths).0,
    })
}
