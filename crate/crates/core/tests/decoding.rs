mod common;

use common::toy_decoder;
use convcap_core::decode::{beam_search, brute_force_decode, greedy_decode, DecodeOptions, ModelScorer};
use convcap_core::text::END;

#[test]
fn saturated_beam_equals_exhaustive_search() {
    for seed in 0..50 {
        let (model, feats) = toy_decoder(seed);
        let scorer = ModelScorer::new(&model, &feats);
        let v = model.config().vocab_size;
        for max_len in 1..=4 {
            let opts = DecodeOptions::with_max_len(max_len);
            let width = v.pow(max_len as u32);
            let beam = beam_search(&scorer, width, &opts).unwrap();
            let (exact, _) = brute_force_decode(&scorer, &opts).unwrap();
            assert_eq!(beam.best(), &exact, "seed {seed} max_len {max_len}");
        }
    }
}

#[test]
fn beam_three_never_below_greedy() {
    for seed in 0..100 {
        let (model, feats) = toy_decoder(seed);
        let scorer = ModelScorer::new(&model, &feats);
        let opts = DecodeOptions::with_max_len(4);
        let greedy = greedy_decode(&scorer, &opts).unwrap();
        let beam = beam_search(&scorer, 3, &opts).unwrap();
        assert!(beam.best().logprob >= greedy.logprob, "seed {seed}");
    }
}

#[test]
fn widening_never_hurts() {
    for seed in 0..100 {
        let (model, feats) = toy_decoder(seed);
        let scorer = ModelScorer::new(&model, &feats);
        let opts = DecodeOptions::with_max_len(4);
        let mut prev = f64::NEG_INFINITY;
        for width in 1..=5 {
            let best = beam_search(&scorer, width, &opts).unwrap().best().logprob;
            assert!(best >= prev, "seed {seed} width {width}: {best} < {prev}");
            prev = best;
        }
    }
}

#[test]
fn width_one_equals_greedy_on_models() {
    for seed in 0..30 {
        let (model, feats) = toy_decoder(seed);
        let scorer = ModelScorer::new(&model, &feats);
        let opts = DecodeOptions::with_max_len(4);
        assert_eq!(
            beam_search(&scorer, 1, &opts).unwrap().best(),
            &greedy_decode(&scorer, &opts).unwrap()
        );
    }
}

#[test]
fn decoding_is_deterministic_and_end_terminal() {
    for seed in 0..30 {
        let (model, feats) = toy_decoder(seed);
        let scorer = ModelScorer::new(&model, &feats);
        let opts = DecodeOptions::with_max_len(4);
        let a = beam_search(&scorer, 3, &opts).unwrap();
        let b = beam_search(&scorer, 3, &opts).unwrap();
        assert_eq!(a, b);
        for h in &a.nbest {
            assert!(!h.tokens.contains(&END));
            assert!(h.steps() <= 4);
        }
        let mut sorted = a.nbest.clone();
        sorted.sort_by(|x, y| y.logprob.total_cmp(&x.logprob));
        assert_eq!(sorted, a.nbest);
    }
}

#[test]
fn logprob_never_increases_along_a_hypothesis() {
    let (model, feats) = toy_decoder(7);
    let scorer = ModelScorer::new(&model, &feats);
    let mut prev = 0.0;
    for max_len in 1..=4 {
        let h = greedy_decode(&scorer, &DecodeOptions::with_max_len(max_len)).unwrap();
        assert!(h.logprob <= prev);
        prev = h.logprob;
        if h.finished {
            break;
        }
    }
}
