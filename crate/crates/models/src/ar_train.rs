//! Training loop for the token model and teacher-forcing evaluation.

use std::time::Instant;

use candle_core::D;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use spanedit_core::layout::{delay_stack, delayed_loss_mask, loss_mask, rearrange, sample_continuation_span, SpanSampler};
use spanedit_core::planner::{build_target_phonemes, Lexicon};
use spanedit_core::{CodeGrid, PhonemeInventory, PhonemeSeq, SpanSet, SpecialVocab, TokenGrid, Waveform};

use crate::ar::{sequence_slots, ArConfig, ArModel, Slot};
use crate::codec::Codec;
use crate::error::{ModelError, Result};
use crate::eval::model_input;
use crate::optim::{OptimConfig, Trainer};

/// An utterance already converted to phonemes and codec codes.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenizedUtterance {
    pub id: String,
    pub phonemes: PhonemeSeq,
    pub codes: CodeGrid,
}

/// Phonemes of `transcript` and codes of the peak-normalized audio.
pub fn tokenize_utterance(
    id: &str,
    transcript: &str,
    w: &Waveform,
    codec: &Codec,
    lexicon: &Lexicon,
    inventory: &PhonemeInventory,
) -> Result<TokenizedUtterance> {
    Ok(TokenizedUtterance {
        id: id.to_string(),
        phonemes: build_target_phonemes(transcript, lexicon, inventory)?,
        codes: codec.codes(&model_input(w, codec.stride())?)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub optim: OptimConfig,
    pub codebook_weights: Vec<f64>,
    /// Chance that an example masks a tail span instead of sampled spans.
    pub continuation_prob: f64,
    pub spans: SpanSampler,
    pub log_every: usize,
}

impl Default for ArTrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 4,
            optim: OptimConfig {
                lr: 1e-3,
                warmup_steps: 100,
                ..OptimConfig::default()
            },
            codebook_weights: vec![5.0, 1.0, 0.5, 0.1],
            continuation_prob: 0.5,
            spans: SpanSampler::default(),
            log_every: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArStepMetrics {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub seconds: f64,
}

/// Model inputs and loss cells for one utterance under one span set.
#[derive(Debug, Clone, PartialEq)]
pub struct ArExample {
    pub phonemes: Vec<u32>,
    /// Delay-stacked rearranged tokens.
    pub rows: TokenGrid,
    /// Live loss cells per delayed row and channel.
    pub mask: Vec<Vec<bool>>,
}

impl ArExample {
    pub fn build(u: &TokenizedUtterance, spans: &SpanSet, sv: &SpecialVocab) -> Result<Self> {
        let r = rearrange(&u.codes, spans, sv)?;
        let mask = delayed_loss_mask(&loss_mask(&r), r.tokens.channels());
        Ok(Self {
            phonemes: u.phonemes.ids.clone(),
            rows: delay_stack(&r.tokens, sv),
            mask,
        })
    }

    fn slots(&self) -> Vec<Slot<'_>> {
        sequence_slots(&self.phonemes, &self.rows)
    }

    /// `(sequence position, channel, target)` for every live cell.
    fn cells(&self) -> Vec<(usize, usize, u32)> {
        let l = self.phonemes.len();
        let mut out = Vec::new();
        for (t, row) in self.mask.iter().enumerate() {
            for (k, &live) in row.iter().enumerate() {
                if live {
                    out.push((l + t, k, self.rows.get(t, k)));
                }
            }
        }
        out
    }
}

/// Spans for one training example: a tail span with `continuation_prob`,
/// otherwise sampled spans.
pub fn training_spans<R: Rng + ?Sized>(frames: usize, hyper: &ArTrainConfig, rng: &mut R) -> Result<SpanSet> {
    match sample_continuation_span(frames, rng, hyper.continuation_prob)? {
        Some(s) => Ok(s),
        None => Ok(hyper.spans.sample(frames, rng)?),
    }
}

fn check_corpus(corpus: &[TokenizedUtterance], cfg: &ArConfig) -> Result<()> {
    if corpus.is_empty() {
        return Err(ModelError::EmptyCorpus);
    }
    for u in corpus {
        if u.codes.num_codebooks() != cfg.num_codebooks || u.codes.codebook_size() != cfg.codebook_size {
            return Err(ModelError::Config(format!(
                "utterance {} has {} codebooks of size {}, model expects {} of size {}",
                u.id,
                u.codes.num_codebooks(),
                u.codes.codebook_size(),
                cfg.num_codebooks,
                cfg.codebook_size
            )));
        }
    }
    Ok(())
}

fn batch_loss(model: &ArModel, batch: &[ArExample], weights: &[f64]) -> Result<candle_core::Tensor> {
    let mut slots: Vec<Vec<Slot>> = batch.iter().map(ArExample::slots).collect();
    let longest = slots.iter().map(Vec::len).max().unwrap_or(0);
    for s in &mut slots {
        s.resize(longest, Slot::Pad);
    }
    let cells: Vec<_> = batch.iter().map(ArExample::cells).collect();
    model.batch_loss(&slots, &cells, weights)
}

pub fn train_ar(
    corpus: &[TokenizedUtterance],
    cfg: ArConfig,
    hyper: &ArTrainConfig,
    seed: u64,
    mut on_step: impl FnMut(&ArStepMetrics),
) -> Result<(ArModel, Vec<ArStepMetrics>)> {
    check_corpus(corpus, &cfg)?;
    if hyper.codebook_weights.len() != cfg.num_codebooks {
        return Err(ModelError::Config(format!(
            "{} codebook weights for {} codebooks",
            hyper.codebook_weights.len(),
            cfg.num_codebooks
        )));
    }
    let sv = cfg.special_vocab();
    let model = ArModel::new(cfg, seed)?;
    let mut trainer = Trainer::new(model.vars(), &hyper.optim, hyper.steps)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa5a5_0001);
    let started = Instant::now();
    let mut metrics = Vec::with_capacity(hyper.steps);
    for step in 0..hyper.steps {
        let mut batch = Vec::with_capacity(hyper.batch_size);
        for _ in 0..hyper.batch_size {
            let u = &corpus[rng.gen_range(0..corpus.len())];
            let spans = training_spans(u.codes.frames(), hyper, &mut rng)?;
            batch.push(ArExample::build(u, &spans, &sv)?);
        }
        let loss = batch_loss(&model, &batch, &hyper.codebook_weights)?;
        let loss_v = loss.to_scalar::<f32>()? as f64;
        if !loss_v.is_finite() {
            return Err(ModelError::NonFiniteLoss {
                what: "token model loss",
                step,
            });
        }
        let lr = trainer.learning_rate();
        trainer.step(&loss)?;
        let m = ArStepMetrics {
            step,
            loss: loss_v,
            lr,
            seconds: started.elapsed().as_secs_f64(),
        };
        if hyper.log_every > 0 && (step % hyper.log_every == 0 || step + 1 == hyper.steps) {
            on_step(&m);
        }
        metrics.push(m);
    }
    Ok((model, metrics))
}

/// Fraction of live cells on `channel` whose argmax prediction under teacher
/// forcing equals the target.
pub fn teacher_forcing_accuracy(model: &ArModel, examples: &[ArExample], channel: usize) -> Result<f64> {
    if channel >= model.cfg.num_codebooks {
        return Err(ModelError::Config(format!("channel {channel} out of range")));
    }
    let mut hits = 0usize;
    let mut total = 0usize;
    for ex in examples {
        let logits = model.forward(&ex.phonemes, &ex.rows)?;
        let pred = logits.argmax(D::Minus1)?.to_vec2::<u32>()?;
        for (t, row) in ex.mask.iter().enumerate() {
            if row[channel] {
                total += 1;
                hits += usize::from(pred[t][channel] == ex.rows.get(t, channel));
            }
        }
    }
    if total == 0 {
        return Err(spanedit_core::Error::Empty("teacher-forcing cells").into());
    }
    Ok(hits as f64 / total as f64)
}
