mod common;

use mamr::linearize::{linearize_with_features, prepend_language_token, FeatureBuckets};
use mamr::pretrain::{is_balanced, mask_spans, mask_tokens, noise, shuffle_segments, NoiseSpec};
use proptest::prelude::*;

use common::random_dag;

fn tokens(seed: u64, n: usize) -> Vec<String> {
    let (g, _) = random_dag(seed, n, 3, true);
    let lin = linearize_with_features(&g, FeatureBuckets::default()).unwrap();
    prepend_language_token(lin, "de").unwrap().tokens
}

fn spec() -> impl Strategy<Value = NoiseSpec> {
    (0.0..0.6f64, 1.0..5.0f64, 0.0..0.6f64, any::<bool>(), any::<u64>()).prop_map(
        |(mask_prob, span_lambda, span_mass, shuffle, seed)| NoiseSpec {
            mask_prob,
            span_lambda,
            span_mass,
            shuffle,
            seed,
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn noisers_keep_balance_and_language_token(graph in any::<u64>(), n in 1usize..12, spec in spec(), ex in any::<u64>()) {
        let toks = tokens(graph, n);
        let outputs = [
            mask_tokens(&toks, &spec, ex),
            mask_spans(&toks, &spec, ex),
            shuffle_segments(&toks, &spec, ex).unwrap(),
            noise(&toks, &spec, ex).unwrap(),
        ];
        for out in &outputs {
            prop_assert!(is_balanced(&out.tokens), "{:?}", out.tokens);
            prop_assert_eq!(&out.tokens[0], &toks[0]);
            prop_assert_eq!(out.origin[0], 0);
            prop_assert_eq!(out.tokens.len(), out.origin.len());
        }
    }

    #[test]
    fn masking_and_shuffling_keep_length_spans_only_shorten(graph in any::<u64>(), n in 1usize..12, spec in spec(), ex in any::<u64>()) {
        let toks = tokens(graph, n);
        prop_assert_eq!(mask_tokens(&toks, &spec, ex).tokens.len(), toks.len());
        prop_assert_eq!(shuffle_segments(&toks, &spec, ex).unwrap().tokens.len(), toks.len());
        prop_assert!(mask_spans(&toks, &spec, ex).tokens.len() <= toks.len());
    }

    #[test]
    fn same_seed_and_index_reproduce(graph in any::<u64>(), n in 1usize..12, spec in spec(), ex in any::<u64>()) {
        let toks = tokens(graph, n);
        prop_assert_eq!(noise(&toks, &spec, ex).unwrap(), noise(&toks, &spec, ex).unwrap());
        prop_assert_eq!(mask_spans(&toks, &spec, ex), mask_spans(&toks, &spec, ex));
    }
}

#[test]
fn three_segments_shuffle_uniformly() {
    let toks: Vec<String> = "( x :ARG0 ( a ) :ARG1 ( b ) :ARG2 ( c ) )".split(' ').map(str::to_string).collect();
    let spec = NoiseSpec { shuffle: true, ..NoiseSpec::none(21) };
    let mut counts = std::collections::BTreeMap::<String, usize>::new();
    let draws = 10_000;
    for ex in 0..draws {
        let out = shuffle_segments(&toks, &spec, ex).unwrap();
        let order: String = out.tokens.iter().filter(|t| ["a", "b", "c"].contains(&t.as_str())).map(String::as_str).collect();
        *counts.entry(order).or_default() += 1;
    }
    assert_eq!(counts.len(), 6);
    for (order, &k) in &counts {
        let freq = k as f64 / draws as f64;
        assert!((freq - 1.0 / 6.0).abs() <= 0.02, "{order}: {freq}");
    }
}
