use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use spanedit_core::layout::{
    delay_stack, delay_unstack, invert_rearrange, loss_mask, rearrange, sample_continuation_span, Span,
    SpanSampler, SpanSet, SpecialVocab,
};
use spanedit_core::{CodeGrid, TokenGrid};
use spanedit_testkit::all_span_sets;

const V: u32 = 32;

fn random_codes(rng: &mut ChaCha8Rng, frames: usize, k: usize) -> CodeGrid {
    use rand::Rng;
    let data = (0..frames * k).map(|_| rng.gen_range(0..V)).collect();
    CodeGrid::new(TokenGrid::new(k, data).unwrap(), V).unwrap()
}

#[test]
fn exhaustive_round_trip_and_length_law() {
    let sv = SpecialVocab::new(V, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for frames in 1..=8 {
        for spans in all_span_sets(frames, 3) {
            let set = SpanSet::new(spans.iter().map(|&(s, e)| Span::new(s, e)).collect()).unwrap();
            let codes = random_codes(&mut rng, frames, 4);
            let r = rearrange(&codes, &set, &sv).unwrap();
            let p = set.len();
            assert_eq!(r.len(), frames + 3 * p + 2);
            let mask = loss_mask(&r);
            assert_eq!(mask.iter().filter(|&&m| m).count(), set.total_frames() + p);
            assert_eq!(invert_rearrange(&r).unwrap(), (codes, set));
        }
    }
}

#[test]
fn sampled_spans_respect_cap_and_count_distribution() {
    let sampler = SpanSampler::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut counts = [0usize; 3];
    let (mut touched_first, mut touched_last) = (false, false);
    for _ in 0..10_000 {
        let s = sampler.sample(100, &mut rng).unwrap();
        assert!(s.total_frames() <= 90);
        s.check_within(100).unwrap();
        // SpanSet::new re-validates ordering and gaps.
        SpanSet::new(s.spans().to_vec()).unwrap();
        counts[s.len() - 1] += 1;
        touched_first |= s.spans()[0].start == 0;
        touched_last |= s.spans().last().unwrap().end == 99;
    }
    for c in counts {
        assert!((c as f64 / 10_000.0 - 1.0 / 3.0).abs() <= 0.03, "{counts:?}");
    }
    assert!(touched_first && touched_last);
}

#[test]
fn continuation_frequency_is_half() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut present = 0;
    for _ in 0..10_000 {
        if let Some(s) = sample_continuation_span(100, &mut rng, 0.5).unwrap() {
            assert_eq!(s.spans()[0].end, 99);
            assert!(s.spans()[0].start >= 10);
            present += 1;
        }
    }
    assert!((present as f64 / 10_000.0 - 0.5).abs() <= 0.02);
}

proptest! {
    #[test]
    fn delay_round_trip(k in 1usize..=4, rows in 0usize..=16, seed in any::<u64>()) {
        use rand::Rng;
        let sv = SpecialVocab::new(V, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<u32> = (0..rows * k).map(|_| rng.gen_range(0..sv.pad())).collect();
        let x = TokenGrid::new(k, data).unwrap();
        let y = delay_stack(&x, &sv);
        prop_assert_eq!(y.rows(), rows + k - 1);
        for ch in 0..k {
            let mut a: Vec<u32> = x.column(ch);
            let mut b: Vec<u32> = y.column(ch).into_iter().filter(|&t| t != sv.pad()).collect();
            a.sort_unstable();
            b.sort_unstable();
            prop_assert_eq!(a, b);
        }
        prop_assert_eq!(delay_unstack(&y, &sv).unwrap(), x);
    }

    #[test]
    fn random_round_trip_large(frames in 10usize..=512, seed in any::<u64>()) {
        let sv = SpecialVocab::new(V, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spans = SpanSampler::default().sample(frames, &mut rng).unwrap();
        let codes = random_codes(&mut rng, frames, 4);
        let r = rearrange(&codes, &spans, &sv).unwrap();
        prop_assert_eq!(r.len(), frames + 3 * spans.len() + 2);
        prop_assert_eq!(invert_rearrange(&r).unwrap(), (codes, spans));
    }
}
