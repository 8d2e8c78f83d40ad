use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spanedit_core::planner::{Lexicon, PhonemeInventory, PhonemeSeq};
use spanedit_core::sampling::{cfg_mix, nucleus_filter, nucleus_sample, random_unconditional, SamplerParams, NUCLEUS_EPS};
use spanedit_testkit::{brute_nucleus, random_distribution};

#[test]
fn nucleus_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..2000 {
        let n = rng.gen_range(1..=64);
        let d = random_distribution(&mut rng, n);
        let p = rng.gen_range(0.05..=1.0);
        let fast = nucleus_filter(&d, p).unwrap();
        let slow = brute_nucleus(&d, p, NUCLEUS_EPS);
        assert_eq!(fast.len(), slow.len());
        for (a, b) in fast.iter().zip(&slow) {
            assert_eq!(a.0, b.0);
            assert!((a.1 - b.1).abs() <= 1e-12);
        }
    }
}

#[test]
fn guidance_output_is_a_distribution() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..20_000 {
        let n = rng.gen_range(1..=16);
        let c = random_distribution(&mut rng, n);
        let u = random_distribution(&mut rng, n);
        let gamma = rng.gen_range(0.0..4.0);
        let q = cfg_mix(&c, &u, gamma).unwrap();
        assert!(q.iter().all(|&x| x >= 0.0));
        assert!((q.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
    }
}

#[test]
fn sampling_frequencies_follow_the_nucleus() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let d = [0.5, 0.3, 0.15, 0.05];
    let sp = SamplerParams::default();
    let mut hits = [0usize; 4];
    for _ in 0..20_000 {
        hits[nucleus_sample(&d, &sp, &mut rng).unwrap()] += 1;
    }
    assert_eq!(hits[2] + hits[3], 0);
    assert!((hits[0] as f64 / 20_000.0 - 0.625).abs() < 0.015);
}

#[test]
fn unconditional_stream_is_uniform() {
    let mut lex = Lexicon::new();
    for w in ["ab", "cde", "fgh", "ij"] {
        lex.insert(w, w.chars().map(String::from).collect());
    }
    let inv = PhonemeInventory::from_lexicon(&lex);
    let y = PhonemeSeq::new(vec![3; 100], inv.len()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let range = inv.phoneme_ids();
    let mut hist = vec![0usize; inv.len()];
    for _ in 0..1000 {
        let yp = random_unconditional(&y, &inv, &mut rng);
        assert_eq!(yp.len(), y.len());
        for id in yp.ids {
            hist[id as usize] += 1;
        }
    }
    // 10^5 draws over the ten lexicon phonemes; padding, boundary and unknown never appear.
    assert_eq!(range.len(), 10);
    assert_eq!(hist[..3], [0, 0, 0]);
    let expect = 1.0 / range.len() as f64;
    for &h in &hist[3..] {
        assert!((h as f64 / 100_000.0 - expect).abs() <= 0.02);
    }
    let mut a = ChaCha8Rng::seed_from_u64(8);
    let mut b = ChaCha8Rng::seed_from_u64(8);
    assert_eq!(random_unconditional(&y, &inv, &mut a), random_unconditional(&y, &inv, &mut b));
}
