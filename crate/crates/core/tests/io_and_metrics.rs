use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spanedit_core::corpus::{load_manifest, make_synthetic_corpus, save_manifest, synthesize_corpus, ManifestEntry, SynthSpec};
use spanedit_core::metrics::{si_snr, wm_frame_accuracy};
use spanedit_core::planner::{diff_transcripts, plan_spans, tokenize, EditParams};
use spanedit_core::WatermarkSeq;
use spanedit_testkit::orthogonal_noise;

fn spec() -> SynthSpec {
    SynthSpec {
        corpus_size: 3,
        seed: 42,
        ..SynthSpec::default()
    }
}

fn read_tree(dir: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for sub in ["wav", "align"] {
        let mut names: Vec<_> = std::fs::read_dir(dir.join(sub)).unwrap().map(|e| e.unwrap().path()).collect();
        names.sort();
        for p in names {
            out.push((p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()));
        }
    }
    for f in ["manifest.jsonl", "lexicon.tsv", "spec.json"] {
        out.push((f.into(), std::fs::read(dir.join(f)).unwrap()));
    }
    out
}

#[test]
fn synthetic_corpus_is_byte_identical_across_runs() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    make_synthetic_corpus(&spec(), a.path()).unwrap();
    make_synthetic_corpus(&spec(), b.path()).unwrap();
    assert_eq!(read_tree(a.path()), read_tree(b.path()));
}

#[test]
fn manifest_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let m = make_synthetic_corpus(&spec(), dir.path()).unwrap();
    let back = load_manifest(dir.path().join("manifest.jsonl")).unwrap();
    assert_eq!(back.entries, m.entries);
    let p = dir.path().join("copy.jsonl");
    let entries: Vec<ManifestEntry> = m.entries.clone();
    save_manifest(&p, &entries).unwrap();
    assert_eq!(load_manifest(&p).unwrap().entries, entries);
}

#[test]
fn planned_edit_recovers_word_frames() {
    let utts = synthesize_corpus(&SynthSpec { corpus_size: 6, ..spec() }).unwrap();
    let p = EditParams { alpha: 0.0, ..EditParams::default() };
    for u in &utts {
        let words = tokenize(&u.transcript);
        let frames = u.waveform.frames(320);
        for (i, e) in u.alignment.entries().iter().enumerate() {
            let mut target = words.clone();
            target[i] = "zzz".into();
            let spans = plan_spans(&u.alignment, &diff_transcripts(&words, &target), &p, frames).unwrap();
            let s = spans.spans()[0];
            let (fs, fe) = ((e.start * 50.0).round() as i64, (e.end * 50.0).round() as i64 - 1);
            assert!((s.start as i64 - fs).abs() <= 1 && (s.end as i64 - fe).abs() <= 1);
        }
    }
}

#[test]
fn orthogonal_equal_power_noise_is_zero_db() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let mut r: Vec<f64> = (0..4000).map(|i| (i as f64 * 0.013).sin() + 0.3 * rng.gen::<f64>()).collect();
        let m = r.iter().sum::<f64>() / r.len() as f64;
        r.iter_mut().for_each(|x| *x -= m);
        let noise = orthogonal_noise(&mut rng, &r);
        let est: Vec<f32> = r.iter().zip(&noise).map(|(a, b)| (a + b) as f32).collect();
        let rf: Vec<f32> = r.iter().map(|&x| x as f32).collect();
        assert!(si_snr(&rf, &est).unwrap().abs() < 1e-3);
    }
}

#[test]
fn coin_flip_predictions_score_half() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let bits: Vec<u8> = (0..100_000).map(|_| rng.gen_range(0..2)).collect();
    // 0.5 thresholds to "1", so accuracy is the fraction of ones.
    let acc = wm_frame_accuracy(&bits, &vec![0.5; bits.len()], 0.5).unwrap();
    assert!((acc - 0.5).abs() < 0.01);
}

proptest! {
    #[test]
    fn si_snr_is_scale_invariant(scale in 0.01f64..100.0, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r: Vec<f32> = (0..512).map(|_| rng.gen::<f32>() - 0.5).collect();
        let e: Vec<f32> = r.iter().map(|x| x + 0.3 * (rng.gen::<f32>() - 0.5)).collect();
        let es: Vec<f32> = e.iter().map(|&x| (x as f64 * scale) as f32).collect();
        let a = si_snr(&r, &e).unwrap();
        let b = si_snr(&r, &es).unwrap();
        // f32 storage of the scaled signal bounds the agreement.
        prop_assert!((a - b).abs() < 1e-4);
    }

    #[test]
    fn watermark_sidecars_round_trip(bits in proptest::collection::vec(0u8..2, 0..200)) {
        let wm = WatermarkSeq::new(bits).unwrap();
        prop_assert_eq!(WatermarkSeq::from_sidecar_bytes(&wm.to_sidecar_bytes()).unwrap(), wm.clone());
        prop_assert_eq!(WatermarkSeq::from_json(&wm.to_json()).unwrap(), wm);
    }
}
