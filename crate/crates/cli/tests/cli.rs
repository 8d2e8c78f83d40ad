use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use spanedit_core::WatermarkSeq;

fn spanedit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spanedit")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

fn ok(args: &[&str]) -> Output {
    let o = spanedit(args);
    assert_eq!(code(&o), 0, "{args:?}\n{}", stderr(&o));
    o
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(code(&spanedit(&[])), 1);
    assert_eq!(code(&spanedit(&["frobnicate"])), 1);
    let o = spanedit(&["edit", "--audio", "a.wav", "--orig", "a"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("--target"), "{}", stderr(&o));

    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("c");
    let out = out.to_str().unwrap();
    let o = spanedit(&["make-synthetic", "--out", out, "--set", "corpus_sise=2"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("corpus_sise"));
    assert_eq!(code(&spanedit(&["make-synthetic", "--out", out, "--set", "corpus_size"])), 1);
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{ not json").unwrap();
    assert_eq!(code(&spanedit(&["make-synthetic", "--out", out, "--config", bad.to_str().unwrap()])), 1);
}

#[test]
fn help_and_version_exit_with_zero() {
    let o = spanedit(&["--help"]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8_lossy(&o.stdout);
    for sub in ["make-synthetic", "train-codec", "train-wm", "train-ar", "edit", "tts", "detect-wm", "eval"] {
        assert!(text.contains(sub), "{sub} missing from help");
    }
    assert_eq!(code(&spanedit(&["--version"])), 0);
    assert_eq!(code(&spanedit(&["detect-wm", "--help"])), 0);
}

#[test]
fn runtime_failures_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let d = |p: &str| dir.path().join(p).to_str().unwrap().to_string();
    let o = spanedit(&["detect-wm", "--audio", &d("missing.wav"), "--ckpt", &d("ck")]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("missing.wav") || stderr(&o).contains("ck"));
    let o = spanedit(&["train-codec", "--data", &d("nodata"), "--ckpt", &d("ck")]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("manifest.jsonl"), "{}", stderr(&o));
}

/// Replaces the second word with another lexicon word.
fn substitute_second_word(transcript: &str) -> String {
    let mut words: Vec<&str> = transcript.split(' ').collect();
    words[1] = if words[1] == "ram" { "ome" } else { "ram" };
    words.join(" ")
}

#[test]
fn every_subcommand_runs_on_the_synthetic_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let d = |p: &str| dir.path().join(p).to_str().unwrap().to_string();
    let (data, ck) = (d("data"), d("ck"));

    // File then overrides: the file asks for 5 utterances, the override for 3.
    std::fs::write(dir.path().join("synth.json"), r#"{"corpus_size": 5, "seed": 9}"#).unwrap();
    ok(&["make-synthetic", "--out", &data, "--config", &d("synth.json"), "--set", "corpus_size=3"]);
    let snap = read_json(&dir.path().join("data/make-synthetic.config.json"));
    assert_eq!(snap["config"]["corpus_size"], 3);
    assert_eq!(snap["seed"], 9);
    let manifest = std::fs::read_to_string(dir.path().join("data/manifest.jsonl")).unwrap();
    assert_eq!(manifest.lines().count(), 3);

    let codec = [
        "--set", "model.base_dim=4", "--set", "model.max_channels=8", "--set", "model.latent_dim=8",
        "--set", "model.codebook_size=16", "--set", "train.steps=3", "--set", "train.batch_size=2",
        "--set", "train.crop_frames=12",
    ];
    ok(&[&["train-codec", "--data", &data, "--ckpt", &ck, "--seed", "1"][..], &codec[..]].concat());
    ok(&[
        "train-wm", "--data", &data, "--ckpt", &ck, "--set", "train.steps=2", "--set", "train.detector_warmup_steps=1",
        "--set", "train.batch_size=2", "--set", "train.crop_frames=12",
    ]);
    ok(&[
        "train-ar", "--data", &data, "--ckpt", &ck, "--set", "model.hidden_size=16", "--set", "model.ffn_mult=1",
        "--set", "train.steps=3", "--set", "train.batch_size=2", "--set", "train.log_every=1",
    ]);
    for (stage, steps) in [("codec", 3), ("wm", 3), ("ar", 3)] {
        let log = std::fs::read_to_string(dir.path().join(format!("ck/{stage}/metrics.jsonl"))).unwrap();
        assert_eq!(log.lines().count(), steps, "{stage}");
        for line in log.lines() {
            let m: Value = serde_json::from_str(line).unwrap();
            for key in ["step", "loss", "lr", "seconds"] {
                assert!(m[key].is_number(), "{stage} {key}");
            }
        }
    }
    let ar_snap = read_json(&dir.path().join("ck/ar/train-ar.config.json"));
    assert_eq!(ar_snap["config"]["model"]["codebook_size"], 16);
    assert!(dir.path().join("ck/ar/lexicon.tsv").exists());

    let first: Value = serde_json::from_str(manifest.lines().next().unwrap()).unwrap();
    let orig = first["transcript"].as_str().unwrap();
    let target = substitute_second_word(orig);
    let audio = format!("{data}/{}", first["audio_path"].as_str().unwrap());
    let align = format!("{data}/{}", first["alignment_path"].as_str().unwrap());
    let edit = |out: &str| {
        ok(&[
            "edit", "--audio", &audio, "--orig", orig, "--target", &target, "--align", &align, "--ckpt", &ck, "--out",
            out, "--seed", "4",
        ])
    };
    edit(&d("e1"));
    edit(&d("e2"));
    for f in ["out.wav", "out.json", "out.wm"] {
        let a = std::fs::read(dir.path().join("e1").join(f)).unwrap();
        let b = std::fs::read(dir.path().join("e2").join(f)).unwrap();
        assert!(a == b, "{f} differs between identical runs");
    }
    let side = read_json(&dir.path().join("e1/out.json"));
    let generated = side["generated_frames"].as_u64().unwrap();
    assert!(generated >= 1);
    assert_eq!(side["watermark"]["ones"].as_u64().unwrap(), generated);
    assert_eq!(side["seed"], 4);
    assert_eq!(side["params"]["sampler"]["seed"], 4);
    assert_eq!(side["stop_reasons"].as_array().unwrap().len(), side["spans"].as_array().unwrap().len());
    let bits = WatermarkSeq::load_sidecar(dir.path().join("e1/out.wm")).unwrap();
    assert_eq!(bits.ones() as u64, generated);
    let json_bits: Vec<u8> = serde_json::from_value(side["watermark"]["bits"].clone()).unwrap();
    assert_eq!(bits.bits(), &json_bits[..]);
    assert_eq!(read_json(&dir.path().join("e1/edit.config.json"))["seed"], 4);

    let o = ok(&["detect-wm", "--audio", &d("e1/out.wav"), "--ckpt", &ck]);
    let text = String::from_utf8_lossy(&o.stdout);
    let frames = bits.len();
    assert!(text.starts_with("frame\tprob\n"));
    assert_eq!(text.lines().filter(|l| l.split('\t').count() == 2).count(), frames + 1);
    assert!(text.lines().last().unwrap().starts_with("marked_frames "));
    let det = read_json(&dir.path().join("e1/detect-wm.json"));
    assert_eq!(det["probs"].as_array().unwrap().len(), frames);

    let second: Value = serde_json::from_str(manifest.lines().nth(1).unwrap()).unwrap();
    let prompt = format!("{data}/{}", second["audio_path"].as_str().unwrap());
    ok(&[
        "tts", "--prompt", &prompt, "--prompt-text", second["transcript"].as_str().unwrap(), "--target", "ma ne",
        "--ckpt", &ck, "--out", &d("t"), "--set", "sampler.max_span_frames=6",
    ]);
    let tts = read_json(&dir.path().join("t/out.json"));
    let n = tts["generated_frames"].as_u64().unwrap();
    assert!((1..=6).contains(&n));
    assert_eq!(tts["watermark"]["ones"].as_u64().unwrap(), n);

    let o = ok(&[
        "eval", "--data", &data, "--ckpt", &ck, "--out", &d("ev"), "--set", "runaway.n_seeds=1", "--set",
        "runaway.sampler.max_span_frames=4",
    ]);
    let report = read_json(&dir.path().join("ev/report.json"));
    for key in ["reconstruction_si_snr_db", "wm_accuracy", "context_gain_db", "teacher_forcing_accuracy_ch1", "runaway_rate_gamma_1.50"] {
        assert!(report["metrics"][key].is_number(), "{key}");
        assert!(String::from_utf8_lossy(&o.stdout).contains(key));
    }
    assert_eq!(report["per_utterance"].as_object().unwrap().len(), 3);
}
