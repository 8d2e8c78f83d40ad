use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use spanedit_core::audio::{read_wav, write_wav};
use spanedit_core::corpus::{load_alignment, load_lexicon, load_manifest, make_synthetic_corpus, save_lexicon, DurationLimits, SynthSpec};
use spanedit_core::layout::SpanSampler;
use spanedit_core::planner::Lexicon;
use spanedit_core::watermark::runs_of;
use spanedit_core::{CfgParams, PhonemeInventory, SamplerParams, SpanSet, StopReason, WatermarkSeq, Waveform, WordAlignment};
use spanedit_models::ar_train::{tokenize_utterance, train_ar, ArExample, ArTrainConfig, TokenizedUtterance};
use spanedit_models::codec_train::{train_codec, CodecTrainConfig};
use spanedit_models::engine::{edit_speech, synthesize_tts, GenerationParams, GenerationResult, Models, LEXICON_FILE};
use spanedit_models::eval::{
    context_benefit, decode_cases, generation_cases, model_input, reconstruction_si_snr, runaway_rate, score_decode,
    teacher_forcing_report, EvalReport,
};
use spanedit_models::watermark::{train_wm_codec, WmTrainConfig};
use spanedit_models::{ArConfig, Codec, CodecConfig, WmCodec};

use crate::config::resolve;
use crate::{Command, Common, DetectArgs, EditArgs, EvalArgs, SynthArgs, TrainArgs, TtsArgs};

pub const CODEC_DIR: &str = "codec";
pub const WM_DIR: &str = "wm";
pub const AR_DIR: &str = "ar";

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::MakeSynthetic(a) => make_synthetic(a),
        Command::TrainCodec(a) => train_codec_cmd(a),
        Command::TrainWm(a) => train_wm_cmd(a),
        Command::TrainAr(a) => train_ar_cmd(a),
        Command::Edit(a) => edit(a),
        Command::Tts(a) => tts(a),
        Command::DetectWm(a) => detect_wm(a),
        Command::Eval(a) => eval(a),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

/// Writes `<dir>/<command>.config.json` with the effective configuration.
fn write_snapshot(dir: &Path, command: &str, seed: u64, args: Value, config: &impl Serialize) -> Result<()> {
    create_dir(dir)?;
    write_json(
        &dir.join(format!("{command}.config.json")),
        &json!({ "command": command, "seed": seed, "args": args, "config": config }),
    )
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

/// Streams training metrics as JSON lines and echoes some to stderr.
struct MetricsLog {
    out: BufWriter<File>,
    error: Option<std::io::Error>,
    echo_every: usize,
}

impl MetricsLog {
    fn create(path: &Path, steps: usize) -> Result<Self> {
        let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
        Ok(Self {
            out: BufWriter::new(file),
            error: None,
            echo_every: (steps / 20).max(1),
        })
    }

    fn record<M: Serialize>(&mut self, step: usize, m: &M) {
        let line = serde_json::to_string(m).expect("metrics serialize");
        if step % self.echo_every == 0 {
            eprintln!("{line}");
        }
        if self.error.is_none() {
            if let Err(e) = writeln!(self.out, "{line}") {
                self.error = Some(e);
            }
        }
    }

    fn finish(mut self) -> Result<()> {
        if let Some(e) = self.error {
            return Err(e).context("writing training metrics");
        }
        self.out.flush().context("writing training metrics")
    }
}

struct CorpusItem {
    id: String,
    transcript: String,
    waveform: Waveform,
}

/// Reads every manifest entry whose duration passes `limits`.
fn load_corpus(data: &Path, limits: &DurationLimits) -> Result<Vec<CorpusItem>> {
    let manifest = load_manifest(data.join("manifest.jsonl"))?.filtered(limits);
    if manifest.entries.is_empty() {
        bail!("no utterances in {} pass the duration limits", data.display());
    }
    manifest
        .entries
        .iter()
        .map(|e| {
            Ok(CorpusItem {
                id: e.id.clone(),
                transcript: e.transcript.clone(),
                waveform: read_wav(manifest.audio_path(e), None)?,
            })
        })
        .collect()
}

fn tokenize_corpus(items: &[CorpusItem], codec: &Codec, lexicon: &Lexicon) -> Result<Vec<TokenizedUtterance>> {
    let inventory = PhonemeInventory::from_lexicon(lexicon);
    items
        .iter()
        .map(|u| Ok(tokenize_utterance(&u.id, &u.transcript, &u.waveform, codec, lexicon, &inventory)?))
        .collect()
}

fn make_synthetic(a: SynthArgs) -> Result<()> {
    let mut spec: SynthSpec = resolve(a.common.config.as_deref(), &a.common.set)?;
    if let Some(seed) = a.common.seed {
        spec.seed = seed;
    }
    let manifest = make_synthetic_corpus(&spec, &a.out)?;
    write_snapshot(&a.out, "make-synthetic", spec.seed, json!({ "out": path_str(&a.out) }), &spec)?;
    println!("wrote {} utterances to {}", manifest.entries.len(), a.out.display());
    Ok(())
}

fn train_args_json(a: &TrainArgs) -> Value {
    json!({ "data": path_str(&a.data), "ckpt": path_str(&a.ckpt) })
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct CodecRun {
    model: CodecConfig,
    train: CodecTrainConfig,
    limits: DurationLimits,
}

fn train_codec_cmd(a: TrainArgs) -> Result<()> {
    let cfg: CodecRun = resolve(a.common.config.as_deref(), &a.common.set)?;
    let seed = a.common.seed.unwrap_or(0);
    let dir = a.ckpt.join(CODEC_DIR);
    write_snapshot(&dir, "train-codec", seed, train_args_json(&a), &cfg)?;
    let clips: Vec<Waveform> = load_corpus(&a.data, &cfg.limits)?.into_iter().map(|u| u.waveform).collect();
    let mut log = MetricsLog::create(&dir.join("metrics.jsonl"), cfg.train.steps)?;
    let (codec, _) = train_codec(&clips, &cfg.model, &cfg.train, seed, |m| log.record(m.step, m))?;
    log.finish()?;
    codec.save(&dir)?;
    println!("codec saved to {}", dir.display());
    Ok(())
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct WmRun {
    train: WmTrainConfig,
    limits: DurationLimits,
}

fn train_wm_cmd(a: TrainArgs) -> Result<()> {
    let cfg: WmRun = resolve(a.common.config.as_deref(), &a.common.set)?;
    let seed = a.common.seed.unwrap_or(0);
    let dir = a.ckpt.join(WM_DIR);
    write_snapshot(&dir, "train-wm", seed, train_args_json(&a), &cfg)?;
    let base = Codec::load(&a.ckpt.join(CODEC_DIR))?;
    let clips: Vec<Waveform> = load_corpus(&a.data, &cfg.limits)?.into_iter().map(|u| u.waveform).collect();
    let total = cfg.train.detector_warmup_steps + cfg.train.steps;
    let mut log = MetricsLog::create(&dir.join("metrics.jsonl"), total)?;
    let (wm, _) = train_wm_codec(&clips, base, &cfg.train, seed, |m| log.record(m.step, m))?;
    log.finish()?;
    wm.save(&dir)?;
    println!("watermarking decoder saved to {}", dir.display());
    Ok(())
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct ArRun {
    /// Vocabulary and codebook shape are taken from the lexicon and codec.
    model: ArConfig,
    train: ArTrainConfig,
    limits: DurationLimits,
}

fn train_ar_cmd(a: TrainArgs) -> Result<()> {
    let mut cfg: ArRun = resolve(a.common.config.as_deref(), &a.common.set)?;
    let seed = a.common.seed.unwrap_or(0);
    let dir = a.ckpt.join(AR_DIR);
    let codec = Codec::load(&a.ckpt.join(CODEC_DIR))?;
    let lexicon = load_lexicon(a.data.join(LEXICON_FILE))?;
    cfg.model.phoneme_vocab = PhonemeInventory::from_lexicon(&lexicon).len();
    cfg.model.num_codebooks = codec.cfg.num_codebooks;
    cfg.model.codebook_size = codec.cfg.codebook_size as u32;
    write_snapshot(&dir, "train-ar", seed, train_args_json(&a), &cfg)?;
    let items = load_corpus(&a.data, &cfg.limits)?;
    let corpus = tokenize_corpus(&items, &codec, &lexicon)?;
    let mut log = MetricsLog::create(&dir.join("metrics.jsonl"), cfg.train.steps)?;
    let (model, _) = train_ar(&corpus, cfg.model.clone(), &cfg.train, seed, |m| log.record(m.step, m))?;
    log.finish()?;
    model.save(&dir)?;
    save_lexicon(dir.join(LEXICON_FILE), &lexicon)?;
    println!("token model saved to {}", dir.display());
    Ok(())
}

fn generation_params(common: &Common) -> Result<(GenerationParams, u64)> {
    let mut params: GenerationParams = resolve(common.config.as_deref(), &common.set)?;
    if let Some(seed) = common.seed {
        params.sampler.seed = seed;
    }
    let seed = params.sampler.seed;
    Ok((params, seed))
}

fn watermark_json(w: &WatermarkSeq) -> Value {
    json!({
        "frames": w.len(),
        "ones": w.ones(),
        "runs": w.runs(),
        "bits": w.bits(),
    })
}

fn generation_json(g: &GenerationResult) -> Value {
    json!({
        "spans": g.spans.spans(),
        "span_lengths": g.span_lengths,
        "generated_frames": g.generated_frames(),
        "stop_reasons": g.stop_reasons,
    })
}

/// Writes `out.wav`, the binary watermark sidecar `out.wm` and `out.json`.
fn write_outputs(out: &Path, waveform: &Waveform, watermark: &WatermarkSeq, sidecar: Value) -> Result<()> {
    create_dir(out)?;
    write_wav(out.join("out.wav"), waveform)?;
    watermark.save_sidecar(out.join("out.wm"))?;
    write_json(&out.join("out.json"), &sidecar)
}

fn edit(a: EditArgs) -> Result<()> {
    let (params, seed) = generation_params(&a.common)?;
    let args = json!({
        "audio": path_str(&a.audio),
        "orig": a.orig,
        "target": a.target,
        "align": path_str(&a.align),
        "ckpt": path_str(&a.ckpt),
        "out": path_str(&a.out),
    });
    write_snapshot(&a.out, "edit", seed, args, &params)?;
    let models = Models::load(&a.ckpt)?;
    let w = read_wav(&a.audio, Some(models.wm.sample_rate()))?;
    let align: WordAlignment = load_alignment(&a.align)?;
    let out = edit_speech(&w, &a.orig, &a.target, &align, &models, &params)?;
    let (spans, lengths, stops, generated) = match &out.generation {
        Some(g) => (g.spans.clone(), g.span_lengths.clone(), g.stop_reasons.clone(), g.generated_frames()),
        None => (SpanSet::empty(), Vec::new(), Vec::<StopReason>::new(), 0),
    };
    let sidecar = json!({
        "spans": spans.spans(),
        "original_spans": out.original_spans.spans(),
        "span_lengths": lengths,
        "generated_frames": generated,
        "stop_reasons": stops,
        "watermark": watermark_json(&out.watermark),
        "seed": seed,
        "params": params,
        "sample_rate": out.waveform.sample_rate,
        "stride": models.stride(),
    });
    write_outputs(&a.out, &out.waveform, &out.watermark, sidecar)?;
    println!(
        "edited {} span(s), {} generated frames, stops {:?}; wrote {}",
        spans.len(),
        generated,
        stops,
        a.out.join("out.wav").display()
    );
    Ok(())
}

fn tts(a: TtsArgs) -> Result<()> {
    let (params, seed) = generation_params(&a.common)?;
    let args = json!({
        "prompt": path_str(&a.prompt),
        "prompt_text": a.prompt_text,
        "target": a.target,
        "ckpt": path_str(&a.ckpt),
        "out": path_str(&a.out),
    });
    write_snapshot(&a.out, "tts", seed, args, &params)?;
    let models = Models::load(&a.ckpt)?;
    let w = read_wav(&a.prompt, Some(models.wm.sample_rate()))?;
    let out = synthesize_tts(&w, &a.prompt_text, &a.target, &models, &params)?;
    let mut sidecar = generation_json(&out.generation);
    let extra = json!({
        "prompt_frames": out.prompt_frames,
        "watermark": watermark_json(&out.watermark),
        "seed": seed,
        "params": params,
        "sample_rate": out.waveform.sample_rate,
        "stride": models.stride(),
    });
    sidecar.as_object_mut().expect("object").extend(extra.as_object().expect("object").clone());
    write_outputs(&a.out, &out.waveform, &out.watermark, sidecar)?;
    println!(
        "generated {} frames after a {}-frame prompt, stop {:?}; wrote {}",
        out.generation.generated_frames(),
        out.prompt_frames,
        out.generation.stop_reasons,
        a.out.join("out.wav").display()
    );
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct DetectRun {
    threshold: f32,
}

impl Default for DetectRun {
    fn default() -> Self {
        Self { threshold: 0.5 }
    }
}

fn detect_wm(a: DetectArgs) -> Result<()> {
    let cfg: DetectRun = resolve(a.common.config.as_deref(), &a.common.set)?;
    let seed = a.common.seed.unwrap_or(0);
    let out = match &a.out {
        Some(o) => o.clone(),
        None => a.audio.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from(".")),
    };
    let args = json!({ "audio": path_str(&a.audio), "ckpt": path_str(&a.ckpt), "out": path_str(&out) });
    write_snapshot(&out, "detect-wm", seed, args, &cfg)?;
    let wm = WmCodec::load(&a.ckpt.join(WM_DIR))?;
    let w = read_wav(&a.audio, Some(wm.sample_rate()))?;
    let probs = wm.predict_watermark(&model_input(&w, wm.stride())?)?;
    let spans = runs_of(probs.iter().map(|&p| p >= cfg.threshold));
    let marked: usize = spans.iter().map(|s| s.len()).sum();

    let mut stdout = std::io::stdout().lock();
    writeln!(stdout, "frame\tprob")?;
    for (t, p) in probs.iter().enumerate() {
        writeln!(stdout, "{t}\t{p:.4}")?;
    }
    let mut summaries = Vec::with_capacity(spans.len());
    for s in &spans {
        let mean = probs[s.start..=s.end].iter().map(|&p| p as f64).sum::<f64>() / s.len() as f64;
        writeln!(stdout, "span {}..{} frames {} mean_prob {mean:.4}", s.start, s.end, s.len())?;
        summaries.push(json!({ "start": s.start, "end": s.end, "frames": s.len(), "mean_prob": mean }));
    }
    writeln!(stdout, "marked_frames {marked} of {}", probs.len())?;
    write_json(
        &out.join("detect-wm.json"),
        &json!({
            "threshold": cfg.threshold,
            "frames": probs.len(),
            "marked_frames": marked,
            "spans": summaries,
            "probs": probs,
        }),
    )
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RunawayRun {
    n_seeds: usize,
    max_mask_ratio: f64,
    gammas: Vec<f64>,
    sampler: SamplerParams,
}

impl Default for RunawayRun {
    fn default() -> Self {
        Self {
            n_seeds: 5,
            max_mask_ratio: 0.3,
            gammas: vec![1.0, 1.5],
            sampler: SamplerParams::default(),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct EvalRun {
    limits: DurationLimits,
    max_utterances: Option<usize>,
    /// Edit-sized spans for the decoder and watermark checks.
    decode_spans: SpanSampler,
    /// Spans for teacher-forcing accuracy.
    teacher_spans: SpanSampler,
    runaway: RunawayRun,
}

impl Default for EvalRun {
    fn default() -> Self {
        Self {
            limits: DurationLimits::default(),
            max_utterances: None,
            decode_spans: SpanSampler {
                max_mask_ratio: 0.3,
                ..SpanSampler::default()
            },
            teacher_spans: SpanSampler::default(),
            runaway: RunawayRun::default(),
        }
    }
}

fn eval(a: EvalArgs) -> Result<()> {
    let cfg: EvalRun = resolve(a.common.config.as_deref(), &a.common.set)?;
    let seed = a.common.seed.unwrap_or(0);
    let args = json!({ "data": path_str(&a.data), "ckpt": path_str(&a.ckpt), "out": path_str(&a.out) });
    write_snapshot(&a.out, "eval", seed, args, &cfg)?;
    let models = Models::load(&a.ckpt)?;
    let mut items = load_corpus(&a.data, &cfg.limits)?;
    if let Some(n) = cfg.max_utterances {
        items.truncate(n);
    }
    let mut report = EvalReport::new(serde_json::to_value(&cfg)?, seed);
    let stride = models.stride();

    let mut recon = Vec::with_capacity(items.len());
    for u in &items {
        let v = reconstruction_si_snr(&models.wm, &u.waveform)?;
        report.set_utterance(&u.id, "reconstruction_si_snr_db", v);
        recon.push(v);
    }
    report.set("reconstruction_si_snr_db", recon.iter().sum::<f64>() / recon.len() as f64);

    let pairs: Vec<(String, Waveform)> = items.iter().map(|u| (u.id.clone(), u.waveform.clone())).collect();
    let cases = decode_cases(&pairs, stride, &cfg.decode_spans, seed)?;
    let mut scores = Vec::with_capacity(cases.len());
    for case in &cases {
        let s = score_decode(&models.wm, case)?;
        report.set_utterance(&s.id, "wm_accuracy", s.wm_accuracy);
        report.set_utterance(&s.id, "context_si_snr_db", s.context_si_snr);
        report.set_utterance(&s.id, "zeroed_si_snr_db", s.zeroed_si_snr);
        scores.push(s);
    }
    report.set("wm_accuracy", scores.iter().map(|s| s.wm_accuracy).sum::<f64>() / scores.len() as f64);
    let benefit = context_benefit(&scores)?;
    report.set("context_si_snr_db", benefit.mean_context_db);
    report.set("zeroed_si_snr_db", benefit.mean_zeroed_db);
    report.set("context_gain_db", benefit.mean_gain_db);
    report.set("context_gain_stderr_db", benefit.gain_stderr_db);
    report.set("context_wins", benefit.wins as f64);
    report.set("context_sign_test_p", benefit.p_value);

    let corpus = tokenize_corpus(&items, &models.wm.base, &models.lexicon)?;
    let sv = models.ar.cfg.special_vocab();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let examples: Vec<ArExample> = corpus
        .iter()
        .map(|u| Ok(ArExample::build(u, &cfg.teacher_spans.sample(u.codes.frames(), &mut rng)?, &sv)?))
        .collect::<Result<_>>()?;
    for (k, acc) in teacher_forcing_report(&models.ar, &examples)?.iter().enumerate() {
        report.set(&format!("teacher_forcing_accuracy_ch{k}"), *acc);
    }

    let gen_cases = generation_cases(&corpus, cfg.runaway.max_mask_ratio, seed)?;
    let sampler = SamplerParams {
        seed: cfg.runaway.sampler.seed.wrapping_add(seed),
        ..cfg.runaway.sampler
    };
    for &gamma in &cfg.runaway.gammas {
        let stats = runaway_rate(&models.ar, &models.inventory, &gen_cases, cfg.runaway.n_seeds, &CfgParams { gamma }, &sampler)?;
        report.set(&format!("runaway_rate_gamma_{gamma:.2}"), stats.rate);
        report.set(&format!("mean_span_frames_gamma_{gamma:.2}"), stats.mean_span_frames);
    }

    create_dir(&a.out)?;
    let path = a.out.join("report.json");
    std::fs::write(&path, report.to_json()? + "\n").with_context(|| format!("writing {}", path.display()))?;
    print!("{}", report.to_table());
    Ok(())
}
