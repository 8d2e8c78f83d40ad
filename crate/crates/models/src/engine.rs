//! Span generation with guided nucleus sampling, speech editing and
//! continuation-style TTS.

use std::path::Path;

use candle_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use spanedit_core::corpus::load_lexicon;
use spanedit_core::layout::{context_prefix, invert_rearrange};
use spanedit_core::metrics::UneditedRegion;
use spanedit_core::planner::{build_target_phonemes, diff_transcripts, plan_spans, tokenize, EditParams, Lexicon};
use spanedit_core::sampling::{cfg_mix, nucleus_sample, random_unconditional, softmax};
use spanedit_core::watermark::MaskedWaveform;
use spanedit_core::{
    CfgParams, CodeGrid, PhonemeInventory, PhonemeSeq, RearrangedSeq, SamplerParams, SpanSet, SpecialVocab,
    StopReason, TokenGrid, WatermarkSeq, Waveform, WordAlignment,
};

use crate::ar::{sequence_slots, ArModel, KvCache, Slot};
use crate::codec_train::PEAK_TARGET;
use crate::error::{ModelError, Result};
use crate::watermark::WmCodec;

pub const LEXICON_FILE: &str = "lexicon.tsv";

/// Cap for an edited span: three times the masked length, at least 50 frames.
pub fn edit_span_cap(masked_frames: usize) -> usize {
    (3 * masked_frames).max(50)
}

/// Cap for TTS: twenty frames per target phoneme.
pub fn tts_span_cap(target_phonemes: usize) -> usize {
    20 * target_phonemes
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationResult {
    /// Codes of the whole output utterance.
    pub codes: CodeGrid,
    /// Generated spans in output frame indices.
    pub spans: SpanSet,
    pub span_lengths: Vec<usize>,
    pub stop_reasons: Vec<StopReason>,
}

impl GenerationResult {
    pub fn generated_frames(&self) -> usize {
        self.span_lengths.iter().sum()
    }
}

/// What fills one undelayed row while decoding.
#[derive(Clone)]
enum RowState {
    Known(Vec<u32>),
    /// Span content; cells are filled as they are sampled.
    Generated(Vec<Option<u32>>),
}

struct Decoder<'a> {
    model: &'a ArModel,
    k: usize,
    phonemes: Vec<Vec<u32>>,
    gamma: f64,
    sp: SamplerParams,
}

impl Decoder<'_> {
    /// Next-token distribution over `support` for batch element `b`, channel `k`.
    fn distribution(&self, logits: &[Vec<Vec<f64>>], b: usize, k: usize, support: &[u32]) -> Vec<f64> {
        let l: Vec<f64> = support.iter().map(|&id| logits[b][k][id as usize]).collect();
        softmax(&l, self.sp.temperature)
    }

    fn sample(
        &self,
        logits: &[Vec<Vec<f64>>],
        k: usize,
        support: &[u32],
        rng: &mut ChaCha8Rng,
    ) -> Result<u32> {
        let cond = self.distribution(logits, 0, k, support);
        let mixed = if logits.len() > 1 {
            cfg_mix(&cond, &self.distribution(logits, 1, k, support), self.gamma)?
        } else {
            cond
        };
        let flat = SamplerParams {
            temperature: 1.0,
            ..self.sp
        };
        Ok(support[nucleus_sample(&mixed, &flat, rng)?])
    }

    fn prefill(&self, rows: &TokenGrid) -> Result<(Tensor, KvCache)> {
        let slots: Vec<Vec<Slot>> = self.phonemes.iter().map(|p| sequence_slots(p, rows)).collect();
        self.model.prefill(&slots)
    }
}

fn logits_nested(t: &Tensor) -> Result<Vec<Vec<Vec<f64>>>> {
    Ok(t.to_dtype(candle_core::DType::F64)?.to_vec3::<f64>()?)
}

/// Generates one span after each of the first `segments.len() - 1` context
/// segments, conditioned on `y`. With `guided`, each step mixes the
/// conditional and a random-phoneme unconditional stream evaluated as one
/// batch; otherwise only the conditional stream runs.
#[allow(clippy::too_many_arguments)]
fn generate(
    model: &ArModel,
    y: &PhonemeSeq,
    segments: &[TokenGrid],
    inventory: &PhonemeInventory,
    cfg: &CfgParams,
    sp: &SamplerParams,
    caps: &[usize],
    guided: bool,
) -> Result<GenerationResult> {
    sp.validate()?;
    let mc = &model.cfg;
    let sv = mc.special_vocab();
    let k_count = mc.num_codebooks;
    let spans = segments.len().saturating_sub(1);
    if spans == 0 {
        return Err(ModelError::Config("nothing to generate: no span follows the context".into()));
    }
    if spans > sv.max_spans as usize {
        return Err(spanedit_core::Error::TooManySpans {
            found: spans,
            max: sv.max_spans as usize,
        }
        .into());
    }
    if caps.len() != spans || caps.contains(&0) {
        return Err(ModelError::Config(format!("{spans} spans need {spans} positive frame caps")));
    }
    if let Some(seg) = segments.iter().find(|s| s.channels() != k_count) {
        return Err(ModelError::Config(format!(
            "context has {} codebooks, model expects {k_count}",
            seg.channels()
        )));
    }
    if let Some(&bad) = segments
        .iter()
        .flat_map(|s| s.as_slice())
        .find(|&&t| !sv.is_code(t))
    {
        return Err(spanedit_core::Error::TokenOutOfRange {
            what: "context code",
            token: bad,
            limit: sv.codebook_size,
        }
        .into());
    }
    let prefix = context_prefix(segments, &sv)?;
    let longest = y.len() + 1 + prefix.rows() + caps.iter().map(|c| c + 2).sum::<usize>() + k_count - 1;
    if longest > mc.max_seq_len {
        return Err(ModelError::SequenceTooLong {
            len: longest,
            max: mc.max_seq_len,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(sp.seed);
    let mut phonemes = vec![y.ids.clone()];
    if guided {
        let mut uncond_rng = ChaCha8Rng::seed_from_u64(sp.seed);
        uncond_rng.set_stream(1);
        phonemes.push(random_unconditional(y, inventory, &mut uncond_rng).ids);
    }
    let dec = Decoder {
        model,
        k: k_count,
        phonemes,
        gamma: cfg.gamma,
        sp: *sp,
    };

    let mut rows: Vec<RowState> = prefix.iter_rows().map(|r| RowState::Known(r.to_vec())).collect();
    rows.push(RowState::Known(vec![sv.mask(1); k_count]));
    let first_generated = rows.len();
    let code_support: Vec<u32> = (0..sv.codebook_size).collect();
    let mut stop_support = code_support.clone();
    stop_support.push(sv.eog());

    // Delayed rows before the first generated row are fully known.
    let known = TokenGrid::from_rows(k_count, &delayed_rows(&rows, first_generated, k_count, &sv))?;
    let (first_logits, mut cache) = dec.prefill(&known)?;
    let mut logits = logits_nested(&first_logits)?;

    let mut span = 0usize;
    let mut span_frames = 0usize;
    let mut span_lengths = Vec::with_capacity(spans);
    let mut stop_reasons = Vec::with_capacity(spans);
    let mut finished_at: Option<usize> = None;
    let mut t = first_generated;
    loop {
        // Channel 0 decides the kind of undelayed row `t`.
        if finished_at.is_none() && t >= rows.len() {
            if span_frames >= caps[span] {
                rows.push(RowState::Known(vec![sv.eog(); k_count]));
                stop_reasons.push(StopReason::MaxLen);
            } else {
                let support = if span_frames == 0 { &code_support } else { &stop_support };
                let tok = dec.sample(&logits, 0, support, &mut rng)?;
                if tok == sv.eog() {
                    rows.push(RowState::Known(vec![sv.eog(); k_count]));
                    stop_reasons.push(StopReason::Eog);
                } else {
                    let mut cells = vec![None; k_count];
                    cells[0] = Some(tok);
                    rows.push(RowState::Generated(cells));
                    span_frames += 1;
                }
            }
            if matches!(rows.last(), Some(RowState::Known(_))) {
                span_lengths.push(span_frames);
                span_frames = 0;
                span += 1;
                if span < spans {
                    rows.push(RowState::Known(vec![sv.mask(span + 1); k_count]));
                } else {
                    finished_at = Some(rows.len());
                }
            }
        }
        // Remaining channels of delayed row `t`.
        for k in 1..dec.k {
            if t < k {
                continue;
            }
            if let Some(RowState::Generated(cells)) = rows.get(t - k) {
                if cells[k].is_none() {
                    let tok = dec.sample(&logits, k, &code_support, &mut rng)?;
                    if let Some(RowState::Generated(cells)) = rows.get_mut(t - k) {
                        cells[k] = Some(tok);
                    }
                }
            }
        }
        let total_rows = finished_at.map(|n| n + k_count - 1);
        if total_rows == Some(t + 1) {
            break;
        }
        let row = delayed_row(&rows, t, k_count, &sv);
        logits = logits_nested(&model.step(&mut cache, &vec![row.as_slice(); dec.phonemes.len()])?)?;
        t += 1;
    }

    let tokens: Vec<Vec<u32>> = rows
        .iter()
        .map(|r| match r {
            RowState::Known(v) => v.clone(),
            RowState::Generated(c) => c.iter().map(|x| x.expect("every generated cell is sampled")).collect(),
        })
        .collect();
    let seq = RearrangedSeq::from_tokens(TokenGrid::from_rows(k_count, &tokens)?, sv)?;
    let (codes, out_spans) = invert_rearrange(&seq)?;
    Ok(GenerationResult {
        codes,
        spans: out_spans,
        span_lengths,
        stop_reasons,
    })
}

/// Delayed row `t`: channel `k` holds undelayed row `t - k`, pad outside.
fn delayed_row(rows: &[RowState], t: usize, k_count: usize, sv: &SpecialVocab) -> Vec<u32> {
    (0..k_count)
        .map(|k| match t.checked_sub(k).and_then(|r| rows.get(r)) {
            Some(RowState::Known(v)) => v[k],
            Some(RowState::Generated(c)) => c[k].expect("cell sampled before it is fed back"),
            None => sv.pad(),
        })
        .collect()
}

fn delayed_rows(rows: &[RowState], count: usize, k_count: usize, sv: &SpecialVocab) -> Vec<Vec<u32>> {
    (0..count).map(|t| delayed_row(rows, t, k_count, sv)).collect()
}

/// Guided generation of one span after each context segment but the last.
/// `caps[p]` bounds the length of span `p`.
pub fn generate_spans(
    model: &ArModel,
    y: &PhonemeSeq,
    segments: &[TokenGrid],
    inventory: &PhonemeInventory,
    cfg: &CfgParams,
    sp: &SamplerParams,
    caps: &[usize],
) -> Result<GenerationResult> {
    generate(model, y, segments, inventory, cfg, sp, caps, true)
}

/// Conditional-only generation: no unconditional stream is evaluated.
pub fn generate_spans_conditional(
    model: &ArModel,
    y: &PhonemeSeq,
    segments: &[TokenGrid],
    inventory: &PhonemeInventory,
    sp: &SamplerParams,
    caps: &[usize],
) -> Result<GenerationResult> {
    generate(model, y, segments, inventory, &CfgParams { gamma: 1.0 }, sp, caps, false)
}

/// The trained models needed for editing and synthesis.
pub struct Models {
    pub wm: WmCodec,
    pub ar: ArModel,
    pub lexicon: Lexicon,
    pub inventory: PhonemeInventory,
}

impl Models {
    pub fn new(wm: WmCodec, ar: ArModel, lexicon: Lexicon) -> Result<Self> {
        let inventory = PhonemeInventory::from_lexicon(&lexicon);
        if inventory.len() != ar.cfg.phoneme_vocab {
            return Err(ModelError::Config(format!(
                "lexicon yields {} phoneme ids, token model was built for {}",
                inventory.len(),
                ar.cfg.phoneme_vocab
            )));
        }
        let c = &wm.cfg.codec;
        if c.num_codebooks != ar.cfg.num_codebooks || c.codebook_size as u32 != ar.cfg.codebook_size {
            return Err(ModelError::Config(format!(
                "codec has {} codebooks of size {}, token model expects {} of size {}",
                c.num_codebooks, c.codebook_size, ar.cfg.num_codebooks, ar.cfg.codebook_size
            )));
        }
        Ok(Self {
            wm,
            ar,
            lexicon,
            inventory,
        })
    }

    /// Loads `wm/` and `ar/` (with its lexicon) under `root`.
    pub fn load(root: &Path) -> Result<Self> {
        let wm = WmCodec::load(&root.join("wm"))?;
        let ar_dir = root.join("ar");
        let ar = ArModel::load(&ar_dir)?;
        let lexicon = load_lexicon(ar_dir.join(LEXICON_FILE))?;
        Self::new(wm, ar, lexicon)
    }

    pub fn stride(&self) -> usize {
        self.wm.stride()
    }

    pub fn frame_rate(&self) -> f64 {
        self.wm.cfg.codec.frame_rate() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerationParams {
    pub cfg: CfgParams,
    pub sampler: SamplerParams,
    pub edit: EditParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EditOutput {
    pub waveform: Waveform,
    pub watermark: WatermarkSeq,
    /// Spans replaced in the original frame layout.
    pub original_spans: SpanSet,
    pub generation: Option<GenerationResult>,
    /// Sample ranges kept from the original, for context-fidelity scoring.
    pub unedited: Vec<UneditedRegion>,
}

/// Peak-normalized copy trimmed to whole frames, plus the applied gain.
fn prepare_input(w: &Waveform, stride: usize) -> Result<(Waveform, f32)> {
    let frames = w.frames(stride);
    if frames == 0 {
        return Err(ModelError::TooShort {
            samples: w.len(),
            stride,
        });
    }
    let peak = w.peak();
    let gain = if peak > 0.0 { PEAK_TARGET / peak } else { 1.0 };
    let scaled = Waveform::new(w.samples[..frames * stride].iter().map(|s| s * gain).collect(), w.sample_rate)?;
    Ok((scaled, gain))
}

fn undo_gain(w: Waveform, gain: f32) -> Result<Waveform> {
    Ok(Waveform::new(w.samples.iter().map(|s| s / gain).collect(), w.sample_rate)?)
}

/// Rebuilds the silence-masked original in the output frame layout: context
/// frames keep their original samples in order, generated frames are silent.
fn remap_context(
    original: &Waveform,
    original_spans: &SpanSet,
    out_spans: &SpanSet,
    out_frames: usize,
    stride: usize,
) -> (MaskedWaveform, Vec<UneditedRegion>) {
    let src = original_spans.context_segments(original.frames(stride));
    let dst = out_spans.context_segments(out_frames);
    let mut samples = vec![0f32; out_frames * stride];
    let mut regions = Vec::new();
    for (s, d) in src.iter().zip(&dst) {
        debug_assert_eq!(s.len(), d.len());
        if s.is_empty() {
            continue;
        }
        let (a, b) = (s.start * stride, s.end * stride);
        let (c, e) = (d.start * stride, d.end * stride);
        samples[c..e].copy_from_slice(&original.samples[a..b]);
        regions.push(UneditedRegion {
            original: a..b,
            edited: c..e,
        });
    }
    (
        MaskedWaveform {
            samples,
            spans: out_spans.clone(),
            sample_rate: original.sample_rate,
        },
        regions,
    )
}

/// Replaces the words that differ between the transcripts with generated
/// audio and decodes the result with the edited frames watermarked.
pub fn edit_speech(
    w: &Waveform,
    orig_transcript: &str,
    target_transcript: &str,
    align: &WordAlignment,
    models: &Models,
    params: &GenerationParams,
) -> Result<EditOutput> {
    align.check_matches(orig_transcript)?;
    let stride = models.stride();
    let (input, gain) = prepare_input(w, stride)?;
    let codes = models.wm.codes(&input)?;
    let frames = codes.frames();
    let ops = diff_transcripts(&tokenize(orig_transcript), &tokenize(target_transcript));
    let edit = EditParams {
        frame_rate: models.frame_rate(),
        ..params.edit
    };
    let spans = plan_spans(align, &ops, &edit, frames)?;
    if spans.is_empty() {
        let mw = MaskedWaveform {
            samples: input.samples.clone(),
            spans: SpanSet::empty(),
            sample_rate: input.sample_rate,
        };
        let watermark = WatermarkSeq::zeros(frames);
        let out = models.wm.wm_decode(&codes, &watermark, &mw)?;
        return Ok(EditOutput {
            waveform: undo_gain(out, gain)?,
            watermark,
            original_spans: spans,
            generation: None,
            unedited: vec![UneditedRegion {
                original: 0..frames * stride,
                edited: 0..frames * stride,
            }],
        });
    }
    let y = build_target_phonemes(target_transcript, &models.lexicon, &models.inventory)?;
    let segments: Vec<TokenGrid> = spans
        .context_segments(frames)
        .into_iter()
        .map(|r| codes.grid().slice_rows(r))
        .collect();
    let caps: Vec<usize> = spans
        .iter()
        .map(|s| params.sampler.max_span_frames.unwrap_or_else(|| edit_span_cap(s.len())))
        .collect();
    let generation = generate_spans(&models.ar, &y, &segments, &models.inventory, &params.cfg, &params.sampler, &caps)?;
    let out_frames = generation.codes.frames();
    let (mw, unedited) = remap_context(&input, &spans, &generation.spans, out_frames, stride);
    let watermark = WatermarkSeq::from_spans(&generation.spans, out_frames)?;
    let out = models.wm.wm_decode(&generation.codes, &watermark, &mw)?;
    Ok(EditOutput {
        waveform: undo_gain(out, gain)?,
        watermark,
        original_spans: spans,
        generation: Some(generation),
        unedited,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TtsOutput {
    pub waveform: Waveform,
    pub watermark: WatermarkSeq,
    pub prompt_frames: usize,
    pub generation: GenerationResult,
}

/// Continues the prompt with speech for `target_transcript`.
pub fn synthesize_tts(
    prompt: &Waveform,
    prompt_transcript: &str,
    target_transcript: &str,
    models: &Models,
    params: &GenerationParams,
) -> Result<TtsOutput> {
    if tokenize(target_transcript).is_empty() {
        return Err(spanedit_core::Error::Empty("target transcript").into());
    }
    let stride = models.stride();
    let (input, gain) = prepare_input(prompt, stride)?;
    let codes = models.wm.codes(&input)?;
    let prompt_frames = codes.frames();
    let y = build_target_phonemes(
        &format!("{prompt_transcript} {target_transcript}"),
        &models.lexicon,
        &models.inventory,
    )?;
    let target_len = build_target_phonemes(target_transcript, &models.lexicon, &models.inventory)?.len();
    let cap = params.sampler.max_span_frames.unwrap_or_else(|| tts_span_cap(target_len));
    let segments = [codes.grid().clone(), TokenGrid::empty(codes.num_codebooks())];
    let generation = generate_spans(&models.ar, &y, &segments, &models.inventory, &params.cfg, &params.sampler, &[cap])?;
    let out_frames = generation.codes.frames();
    let mut samples = input.samples.clone();
    samples.resize(out_frames * stride, 0.0);
    let mw = MaskedWaveform {
        samples,
        spans: generation.spans.clone(),
        sample_rate: input.sample_rate,
    };
    let watermark = WatermarkSeq::from_spans(&generation.spans, out_frames)?;
    let out = models.wm.wm_decode(&generation.codes, &watermark, &mw)?;
    Ok(TtsOutput {
        waveform: undo_gain(out, gain)?,
        watermark,
        prompt_frames,
        generation,
    })
}
