//! Acceptance run: property oracles followed by one end-to-end training
//! pipeline through the `spanedit` binary. Prints one PASS/FAIL line per
//! criterion and exits nonzero if any fails.

use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use anyhow::{anyhow, bail, ensure, Context, Result};
use candle_core::{Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;
use spanedit_core::layout::{
    delay_stack, delay_unstack, delayed_loss_mask, invert_rearrange, loss_mask, rearrange, Span, SpanSampler,
    SpanSet, SpecialVocab,
};
use spanedit_core::planner::{diff_transcripts, plan_spans, AlignedWord, EditParams, WordAlignment};
use spanedit_core::sampling::{cfg_mix, nucleus_filter, NUCLEUS_EPS};
use spanedit_core::{CodeGrid, PhonemeSeq, TokenGrid, WatermarkSeq};
use spanedit_models::ar::{logits_to_vec, weighted_nll_loss, ArConfig, ArModel};
use spanedit_models::ar_train::{ArExample, TokenizedUtterance};
use spanedit_testkit::{all_span_sets, bfs_edit_distances, brute_edit_distance, brute_nucleus, random_distribution};

type Check = fn(&mut Pipeline) -> Result<String>;

fn main() {
    let mut pipeline = Pipeline::new();
    let checks: [(&str, Check); 11] = [
        ("1 layout bijection", layout_bijection),
        ("2 loss locality", loss_locality),
        ("3 causality", causality),
        ("4 guidance identities", guidance_identities),
        ("5 nucleus oracle", nucleus_oracle),
        ("6 edit planner oracle", planner_oracle),
        ("7 overfit run", overfit_run),
        ("8 watermark detection", watermark_detection),
        ("9 context-aware decoding", context_benefit),
        ("10 stability direction", stability_direction),
        ("11 end-to-end smoke", end_to_end),
    ];
    let mut failed = 0;
    for (name, check) in checks {
        let t = Instant::now();
        let outcome = check(&mut pipeline);
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS  {name}: {detail} [{secs:.1}s]"),
            Err(e) => {
                failed += 1;
                println!("FAIL  {name}: {e:#} [{secs:.1}s]");
            }
        }
    }
    if failed > 0 {
        println!("{failed} of 11 criteria failed");
        std::process::exit(1);
    }
    println!("all 11 criteria passed");
}

// Property oracles.

const V: u32 = 32;

fn random_codes(rng: &mut ChaCha8Rng, frames: usize, k: usize, vocab: u32) -> CodeGrid {
    let data = (0..frames * k).map(|_| rng.gen_range(0..vocab)).collect();
    CodeGrid::new(TokenGrid::new(k, data).unwrap(), vocab).unwrap()
}

fn round_trip(codes: &CodeGrid, spans: &SpanSet, sv: &SpecialVocab) -> Result<()> {
    let r = rearrange(codes, spans, sv)?;
    let stacked = delay_stack(&r.tokens, sv);
    ensure!(delay_unstack(&stacked, sv)? == r.tokens, "delay round trip differs");
    let (c, s) = invert_rearrange(&r)?;
    ensure!(&c == codes && &s == spans, "rearrange round trip differs");
    Ok(())
}

fn layout_bijection(_: &mut Pipeline) -> Result<String> {
    let t = Instant::now();
    let sv = SpecialVocab::new(V, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut exhaustive = 0;
    for frames in 1..=8 {
        for spans in all_span_sets(frames, 3) {
            let set = SpanSet::new(spans.iter().map(|&(s, e)| Span::new(s, e)).collect())?;
            round_trip(&random_codes(&mut rng, frames, 4, V), &set, &sv)
                .with_context(|| format!("T={frames} spans {spans:?}"))?;
            exhaustive += 1;
        }
    }
    for case in 0..10_000 {
        let frames = rng.gen_range(1..=512);
        // The sampler needs ten frames; shorter grids pick from the enumeration.
        let set = if frames < 10 {
            let all = all_span_sets(frames, 3);
            let spans = &all[rng.gen_range(0..all.len())];
            SpanSet::new(spans.iter().map(|&(s, e)| Span::new(s, e)).collect())?
        } else {
            SpanSampler::default().sample(frames, &mut rng)?
        };
        round_trip(&random_codes(&mut rng, frames, 4, V), &set, &sv).with_context(|| format!("random case {case}"))?;
    }
    let secs = t.elapsed().as_secs_f64();
    ensure!(secs < 60.0, "took {secs:.1}s");
    Ok(format!("{exhaustive} exhaustive span sets (T <= 8) and 10000 random cases (T <= 512) round-trip"))
}

fn toy_ar_config() -> ArConfig {
    ArConfig {
        num_layers: 2,
        hidden_size: 32,
        num_heads: 2,
        num_codebooks: 4,
        codebook_size: 16,
        max_spans: 3,
        phoneme_vocab: 10,
        max_seq_len: 256,
        head_layers: 2,
        ffn_mult: 2,
    }
}

fn random_example(rng: &mut ChaCha8Rng, cfg: &ArConfig) -> Result<ArExample> {
    let frames = rng.gen_range(10..40);
    let codes = random_codes(rng, frames, cfg.num_codebooks, cfg.codebook_size);
    let spans = SpanSampler::default().sample(frames, rng)?;
    let len = rng.gen_range(1..8);
    let ids = (0..len).map(|_| rng.gen_range(0..cfg.phoneme_vocab as u32)).collect();
    let u = TokenizedUtterance {
        id: "x".into(),
        phonemes: PhonemeSeq::new(ids, cfg.phoneme_vocab)?,
        codes,
    };
    Ok(ArExample::build(&u, &spans, &cfg.special_vocab())?)
}

fn loss_locality(_: &mut Pipeline) -> Result<String> {
    let cfg = toy_ar_config();
    let (v, kc) = (cfg.channel_vocab(), cfg.num_codebooks);
    let weights = [5.0, 1.0, 0.5, 0.1];
    let sv = cfg.special_vocab();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (mut dead_cells, mut probes) = (0usize, 0usize);
    for case in 0..100 {
        let frames = rng.gen_range(10..40);
        let codes = random_codes(&mut rng, frames, kc, cfg.codebook_size);
        let spans = SpanSampler::default().sample(frames, &mut rng)?;
        let r = rearrange(&codes, &spans, &sv)?;
        let rows = delay_stack(&r.tokens, &sv);
        let mask = delayed_loss_mask(&loss_mask(&r), kc);
        let n = rows.rows();
        let vals: Vec<f32> = (0..n * kc * v).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let var = Var::from_tensor(&Tensor::from_vec(vals.clone(), (n, kc, v), &Device::Cpu)?)?;
        let loss = weighted_nll_loss(var.as_tensor(), &rows, &mask, &weights)?;
        let grads = loss.backward()?;
        let g = grads
            .get(var.as_tensor())
            .ok_or_else(|| anyhow!("no gradient"))?
            .flatten_all()?
            .to_vec1::<f32>()?;
        let base = loss.to_scalar::<f32>()?;
        let mut dead = Vec::new();
        for (t, row) in mask.iter().enumerate() {
            for (k, &live) in row.iter().enumerate() {
                let cell = &g[(t * kc + k) * v..(t * kc + k + 1) * v];
                if live {
                    ensure!(cell.iter().any(|&x| x != 0.0), "case {case}: live cell ({t},{k}) has no gradient");
                } else {
                    ensure!(cell.iter().all(|&x| x == 0.0), "case {case}: masked cell ({t},{k}) has gradient");
                    dead.push((t, k));
                }
            }
        }
        dead_cells += dead.len();
        for _ in 0..3 {
            let (t, k) = dead[rng.gen_range(0..dead.len())];
            let mut bumped = vals.clone();
            bumped[(t * kc + k) * v + rng.gen_range(0..v)] += 1e-2;
            let l2 = weighted_nll_loss(&Tensor::from_vec(bumped, (n, kc, v), &Device::Cpu)?, &rows, &mask, &weights)?
                .to_scalar::<f32>()?;
            let fd = ((l2 - base) as f64 / 1e-2).abs();
            ensure!(fd <= 1e-6, "case {case}: finite difference {fd:e} at masked cell ({t},{k})");
            probes += 1;
        }
    }
    Ok(format!(
        "100 layouts, autodiff exactly zero on {dead_cells} masked cells, {probes} finite differences <= 1e-6"
    ))
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn causality(_: &mut Pipeline) -> Result<String> {
    let cfg = toy_ar_config();
    let model = ArModel::new(cfg.clone(), 3)?;
    let (v, kc) = (cfg.channel_vocab(), cfg.num_codebooks);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for case in 0..50 {
        let ex = random_example(&mut rng, &cfg)?;
        let n = ex.rows.rows();
        let base = logits_to_vec(&model.forward(&ex.phonemes, &ex.rows)?)?;
        let t = rng.gen_range(0..n);
        let k = rng.gen_range(0..kc);
        let mut rows = ex.rows.clone();
        let old = rows.get(t, k);
        rows.set(t, k, (old + 1 + rng.gen_range(0..v as u32 - 1)) % v as u32);
        let moved = logits_to_vec(&model.forward(&ex.phonemes, &rows)?)?;
        // Logits at row t predict row t, so rows up to and including t must not move.
        let cut = (t + 1) * kc * v;
        let d = max_abs_diff(&base[..cut], &moved[..cut]);
        ensure!(d <= 1e-6, "case {case}: perturbing row {t} moved earlier logits by {d:e}");
        worst = worst.max(d);
    }
    Ok(format!("50 perturbations, max change at or before the perturbed row {worst:e}"))
}

fn guidance_identities(_: &mut Pipeline) -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..1000 {
        let n = rng.gen_range(1..=64);
        let c = random_distribution(&mut rng, n);
        let u = random_distribution(&mut rng, n);
        ensure!(cfg_mix(&c, &u, 1.0)? == c, "gamma 1 changed the conditional distribution");
    }
    let q = cfg_mix(&[0.8, 0.2], &[0.5, 0.5], 1.5)?;
    ensure!((q[0] - 0.95).abs() <= 1e-12 && (q[1] - 0.05).abs() <= 1e-12, "got {q:?}, want [0.95, 0.05]");
    let q = cfg_mix(&[0.1, 0.9], &[0.9, 0.1], 1.5)?;
    ensure!(q[0].abs() <= 1e-12 && (q[1] - 1.0).abs() <= 1e-12, "got {q:?}, want [0, 1]");
    for i in 0..100_000 {
        let n = rng.gen_range(1..=64);
        let c = random_distribution(&mut rng, n);
        let u = random_distribution(&mut rng, n);
        let gamma = rng.gen_range(0.0..4.0);
        let q = cfg_mix(&c, &u, gamma)?;
        let sum: f64 = q.iter().sum();
        ensure!(
            q.iter().all(|&x| x.is_finite() && x >= 0.0) && (sum - 1.0).abs() <= 1e-9,
            "input {i}: not a distribution (sum {sum})"
        );
    }
    Ok("gamma 1 exact on 1000 inputs, both worked examples within 1e-12, 100000 outputs valid".into())
}

fn nucleus_oracle(_: &mut Pipeline) -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for i in 0..10_000 {
        let n = rng.gen_range(1..=64);
        let d = random_distribution(&mut rng, n);
        let p = if i % 10 == 0 { 0.8 } else { rng.gen_range(0.05..=1.0) };
        let fast = nucleus_filter(&d, p)?;
        let slow = brute_nucleus(&d, p, NUCLEUS_EPS);
        let support = |x: &[(usize, f64)]| x.iter().map(|e| e.0).collect::<HashSet<_>>();
        ensure!(support(&fast) == support(&slow), "case {i}: support differs");
        for (a, b) in fast.iter().zip(&slow) {
            ensure!(a.0 == b.0 && (a.1 - b.1).abs() <= 1e-12, "case {i}: probability differs at {}", a.0);
        }
    }
    Ok("10000 distributions of size <= 64 match the sort-and-prefix oracle".into())
}

fn word_lists(max_len: usize, alphabet: &[&'static str]) -> Vec<Vec<&'static str>> {
    let mut out = vec![vec![]];
    let mut frontier: Vec<Vec<&str>> = vec![vec![]];
    for _ in 0..max_len {
        frontier = frontier
            .iter()
            .flat_map(|l| {
                alphabet.iter().map(move |&w| {
                    let mut l2 = l.clone();
                    l2.push(w);
                    l2
                })
            })
            .collect();
        out.extend(frontier.iter().cloned());
    }
    out
}

fn planner_oracle(_: &mut Pipeline) -> Result<String> {
    let mut pairs = 0;
    for ((a, b), d) in bfs_edit_distances(&["a", "b"], 6) {
        let got = diff_transcripts(&a, &b).cost();
        ensure!(got == d, "{a:?} -> {b:?}: cost {got}, edit distance {d}");
        pairs += 1;
    }
    let small = word_lists(4, &["a", "b", "c"]);
    for a in &small {
        for b in &small {
            let got = diff_transcripts(a, b).cost();
            ensure!(got == brute_edit_distance(a, b), "{a:?} -> {b:?}: cost {got}");
            pairs += 1;
        }
    }
    let word = |w: &str, start, end| AlignedWord {
        word: w.into(),
        start,
        end,
    };
    let align = WordAlignment::new(vec![word("x", 0.10, 0.40), word("word", 0.50, 0.80), word("y", 0.90, 1.20)])?;
    let ops = diff_transcripts(&["x", "word", "y"], &["x", "other", "y"]);
    let params = EditParams {
        alpha: 0.12,
        frame_rate: 50.0,
        ..EditParams::default()
    };
    let spans = plan_spans(&align, &ops, &params, 100)?;
    ensure!(spans.spans() == [Span::new(19, 45)], "margin example gave {:?}", spans.spans());
    Ok(format!("{pairs} word-list pairs match edit distance, margin example gives frames 19..45"))
}

// End-to-end pipeline through the binary.

const TRAIN_SIZE: usize = 20;
const HELD_SIZE: usize = 20;
const HELD_SEED: u64 = 99;
const RUNAWAY_SEEDS: usize = 5;

#[derive(Default)]
struct Stage {
    done: bool,
    elapsed: Duration,
}

struct Pipeline {
    _root: tempfile::TempDir,
    root: PathBuf,
    data: Stage,
    codec: Stage,
    wm: Stage,
    ar: Stage,
    train_report: Option<Value>,
    held_report: Option<Value>,
    started: Option<Instant>,
}

impl Pipeline {
    fn new() -> Self {
        let root = tempfile::tempdir().expect("temporary directory");
        Self {
            root: root.path().to_path_buf(),
            _root: root,
            data: Stage::default(),
            codec: Stage::default(),
            wm: Stage::default(),
            ar: Stage::default(),
            train_report: None,
            held_report: None,
            started: None,
        }
    }

    fn path(&self, p: &str) -> String {
        self.root.join(p).to_string_lossy().into_owned()
    }

    fn elapsed(&self) -> Duration {
        self.started.map(|t| t.elapsed()).unwrap_or_default()
    }

    fn corpora(&mut self) -> Result<()> {
        if self.data.done {
            return Ok(());
        }
        self.started.get_or_insert_with(Instant::now);
        let t = Instant::now();
        let train_size = format!("corpus_size={TRAIN_SIZE}");
        let held_size = format!("corpus_size={HELD_SIZE}");
        let held_seed = HELD_SEED.to_string();
        run(&["make-synthetic", "--out", &self.path("data"), "--set", &train_size])?;
        run(&["make-synthetic", "--out", &self.path("held"), "--set", &held_size, "--seed", &held_seed])?;
        self.data = Stage {
            done: true,
            elapsed: t.elapsed(),
        };
        Ok(())
    }

    fn train(&mut self, command: &str) -> Result<Duration> {
        let t = Instant::now();
        run(&[command, "--data", &self.path("data"), "--ckpt", &self.path("ckpt")])?;
        Ok(t.elapsed())
    }

    fn codec(&mut self) -> Result<()> {
        self.corpora()?;
        if !self.codec.done {
            let elapsed = self.train("train-codec")?;
            self.codec = Stage { done: true, elapsed };
        }
        Ok(())
    }

    fn wm(&mut self) -> Result<()> {
        self.codec()?;
        if !self.wm.done {
            let elapsed = self.train("train-wm")?;
            self.wm = Stage { done: true, elapsed };
        }
        Ok(())
    }

    fn ar(&mut self) -> Result<()> {
        self.wm()?;
        if !self.ar.done {
            let elapsed = self.train("train-ar")?;
            self.ar = Stage { done: true, elapsed };
        }
        Ok(())
    }

    /// Teacher-forcing accuracy on the training corpus; generation is skipped.
    fn train_report(&mut self) -> Result<&Value> {
        self.ar()?;
        if self.train_report.is_none() {
            let out = self.path("eval_train");
            run(&["eval", "--data", &self.path("data"), "--ckpt", &self.path("ckpt"), "--out", &out, "--set", "runaway.gammas=[]"])?;
            self.train_report = Some(read_json(&Path::new(&out).join("report.json"))?);
        }
        Ok(self.train_report.as_ref().unwrap())
    }

    fn held_report(&mut self) -> Result<&Value> {
        self.ar()?;
        if self.held_report.is_none() {
            let out = self.path("eval_held");
            let seeds = format!("runaway.n_seeds={RUNAWAY_SEEDS}");
            run(&[
                "eval", "--data", &self.path("held"), "--ckpt", &self.path("ckpt"), "--out", &out, "--set", &seeds,
                "--set", "runaway.gammas=[1.0,1.5]",
            ])?;
            self.held_report = Some(read_json(&Path::new(&out).join("report.json"))?);
        }
        Ok(self.held_report.as_ref().unwrap())
    }
}

fn run(args: &[&str]) -> Result<String> {
    let out = Command::new(env!("CARGO_BIN_EXE_spanedit")).args(args).output().context("spawning spanedit")?;
    if !out.status.success() {
        bail!(
            "`spanedit {}` exited with {:?}: {}",
            args.join(" "),
            out.status.code(),
            String::from_utf8_lossy(&out.stderr).trim()
        );
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn read_json(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(serde_json::from_str(&text)?)
}

fn metric(report: &Value, key: &str) -> Result<f64> {
    report["metrics"][key].as_f64().ok_or_else(|| anyhow!("report lacks `{key}`"))
}

fn minutes(d: Duration) -> f64 {
    d.as_secs_f64() / 60.0
}

fn overfit_run(p: &mut Pipeline) -> Result<String> {
    let report = p.train_report()?;
    // Channel 1 is the first codebook, reported with a zero-based index.
    let acc = metric(report, "teacher_forcing_accuracy_ch0")?;
    let snapshot = read_json(&p.root.join("ckpt/ar/train-ar.config.json"))?;
    let trained = snapshot["config"]["train"]["steps"].as_u64().unwrap_or(0);
    let mins = minutes(p.ar.elapsed);
    ensure!(trained <= 2000, "trained for {trained} steps");
    ensure!(mins <= 30.0, "training took {mins:.1} min");
    ensure!(acc > 0.9, "channel-1 accuracy {acc:.4} <= 0.9");
    Ok(format!(
        "channel-1 teacher-forcing accuracy {acc:.4} > 0.9 on {TRAIN_SIZE} utterances after {trained} steps in {mins:.1} min"
    ))
}

fn watermark_detection(p: &mut Pipeline) -> Result<String> {
    let acc = metric(p.held_report()?, "wm_accuracy")?;
    let wm_mins = minutes(p.wm.elapsed);
    ensure!(wm_mins <= 30.0, "watermark training took {wm_mins:.1} min");
    ensure!(acc >= 0.95, "held-out frame accuracy {acc:.4} < 0.95");
    Ok(format!("held-out frame accuracy {acc:.4} >= 0.95 over {HELD_SIZE} utterances, training {wm_mins:.1} min"))
}

fn context_benefit(p: &mut Pipeline) -> Result<String> {
    let report = p.held_report()?;
    let n = report["per_utterance"].as_object().map_or(0, |m| m.len());
    let ctx = metric(report, "context_si_snr_db")?;
    let zero = metric(report, "zeroed_si_snr_db")?;
    let wins = metric(report, "context_wins")?;
    let pv = metric(report, "context_sign_test_p")?;
    ensure!(n >= 20, "only {n} held-out utterances");
    ensure!(ctx > zero, "context {ctx:.2} dB does not exceed zeroed {zero:.2} dB");
    ensure!(pv < 0.05, "sign test p = {pv:.4}");
    Ok(format!(
        "unedited-region SI-SNR {ctx:.2} dB with context vs {zero:.2} dB zeroed, {wins:.0}/{n} wins, sign test p = {pv:.2e}"
    ))
}

fn stability_direction(p: &mut Pipeline) -> Result<String> {
    let report = p.held_report()?;
    let r1 = metric(report, "runaway_rate_gamma_1.00")?;
    let r15 = metric(report, "runaway_rate_gamma_1.50")?;
    let generations = HELD_SIZE * RUNAWAY_SEEDS;
    ensure!(r15 <= r1, "runaway rate {r15:.3} at gamma 1.5 exceeds {r1:.3} at gamma 1.0");
    Ok(format!("runaway rate {r15:.3} at gamma 1.5 <= {r1:.3} at gamma 1.0 over {generations} paired generations"))
}

fn end_to_end(p: &mut Pipeline) -> Result<String> {
    p.ar()?;
    let manifest = std::fs::read_to_string(p.root.join("held/manifest.jsonl"))?;
    let first: Value = serde_json::from_str(manifest.lines().next().ok_or_else(|| anyhow!("empty manifest"))?)?;
    let orig = first["transcript"].as_str().ok_or_else(|| anyhow!("no transcript"))?;
    let mut words: Vec<&str> = orig.split(' ').collect();
    let i = words.len() / 2;
    words[i] = if words[i] == "ram" { "ome" } else { "ram" };
    let target = words.join(" ");
    let audio = p.path(&format!("held/{}", first["audio_path"].as_str().unwrap_or_default()));
    let align = p.path(&format!("held/{}", first["alignment_path"].as_str().unwrap_or_default()));
    let out = p.path("edit");
    run(&[
        "edit", "--audio", &audio, "--orig", orig, "--target", &target, "--align", &align, "--ckpt", &p.path("ckpt"),
        "--out", &out, "--seed", "7",
    ])?;
    let side = read_json(&Path::new(&out).join("out.json"))?;
    let generated = side["generated_frames"].as_u64().ok_or_else(|| anyhow!("no generated_frames"))? as usize;
    let bits = WatermarkSeq::load_sidecar(Path::new(&out).join("out.wm"))?;
    run(&["detect-wm", "--audio", &format!("{out}/out.wav"), "--ckpt", &p.path("ckpt")])?;
    let det = read_json(&Path::new(&out).join("detect-wm.json"))?;
    let marked = det["marked_frames"].as_u64().unwrap_or(0);
    let total = p.elapsed();
    ensure!(generated > 0, "nothing was generated");
    ensure!(bits.ones() == generated, "watermark ones {} != generated frames {generated}", bits.ones());
    ensure!(minutes(total) <= 90.0, "pipeline took {:.1} min", minutes(total));
    Ok(format!(
        "ones-count {} == generated frames {generated}; detector marks {marked} of {} frames; stages {:.1}/{:.1}/{:.1}/{:.1} min, total {:.1} min",
        bits.ones(),
        bits.len(),
        minutes(p.data.elapsed),
        minutes(p.codec.elapsed),
        minutes(p.wm.elapsed),
        minutes(p.ar.elapsed),
        minutes(total)
    ))
}
