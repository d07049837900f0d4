use mamr::corpus::{collate, EncoderInput, ParallelExample};
use mamr::generate::{beam_search, length_penalty, BeamConfig};
use mamr::lang::Language;
use mamr::model::{Model, ModelConfig, Preset};
use mamr::subword::{BOS, EOS};
use mamr::tensor::{softmax_in_place, Graph};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn toy(seed: u64) -> Model<f32> {
    let mut config = ModelConfig::preset(Preset::Toy, 30, 20);
    config.max_positions = 24;
    config.dropout = 0.0;
    Model::build(config, seed).unwrap()
}

fn random_input(rng: &mut ChaCha8Rng, config: &ModelConfig) -> EncoderInput {
    let n = rng.random_range(1..=config.max_positions);
    EncoderInput {
        piece_ids: (0..n).map(|_| rng.random_range(0..config.enc_vocab as u32)).collect(),
        depth_ids: (0..n).map(|_| rng.random_range(0..config.depth_buckets as u32)).collect(),
        subgraph_ids: (0..n).map(|_| rng.random_range(0..config.subgraph_buckets as u32)).collect(),
    }
}

#[test]
fn logits_stay_finite_on_fuzzed_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let models: Vec<Model<f32>> = (0..4).map(toy).collect();
    for case in 0..1000 {
        let model = &models[case % models.len()];
        let x = random_input(&mut rng, &model.config);
        let memory = model.encode(&x).unwrap();
        assert!(memory.all_finite(), "case {case}: encoder states");
        let len = rng.random_range(1..model.config.max_positions);
        let mut prefix = vec![BOS];
        prefix.extend((1..len).map(|_| rng.random_range(0..model.config.dec_vocab as u32)));
        let step = model.decode_step(&memory, &[prefix], Some(0)).unwrap();
        assert!(step.logits.all_finite(), "case {case}: logits");
    }
}

#[test]
fn fixed_seed_gives_bit_identical_losses() {
    let ex = ParallelExample {
        src_ids: vec![5, 6, 7, 8],
        src_depth_ids: vec![0, 1, 1, 2],
        src_subgraph_ids: vec![0, 1, 1, 2],
        tgt_ids: vec![BOS, 4, 9, 12, EOS],
        language: Language::new("de").unwrap(),
        line: 1,
    };
    let batch = collate([&ex, &ex]);
    let losses: Vec<u32> = (0..2)
        .map(|_| {
            let model = toy(11);
            let mut g = Graph::new();
            let l = model.loss(&mut g, &batch, 0.1).unwrap();
            g.value(l).data()[0].to_bits()
        })
        .collect();
    assert_eq!(losses[0], losses[1]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn softmax_rows_sum_to_one(row in prop::collection::vec(-60.0f32..60.0, 1..64)) {
        let mut p = row.clone();
        softmax_in_place(&mut p);
        let sum: f64 = p.iter().map(|&x| f64::from(x)).sum();
        prop_assert!((sum - 1.0).abs() < 1e-6, "sum {}", sum);
        prop_assert!(p.iter().all(|&x| (0.0..=1.0).contains(&x)));
    }

    /// For n2 > n1 the penalty ratio grows with alpha, so a larger alpha
    /// shifts preference toward the longer hypothesis.
    #[test]
    fn larger_alpha_favours_longer_hypotheses(n1 in 1usize..40, extra in 1usize..40, a in 0.0..2.0f64, da in 0.01..1.0f64) {
        let n2 = n1 + extra;
        let ratio = |alpha| length_penalty(n2, alpha) / length_penalty(n1, alpha);
        prop_assert!(ratio(a + da) > ratio(a));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn beam_best_dominates_its_nbest(seed in any::<u64>(), beam_size in 1usize..6, alpha in 0.0..1.5f64) {
        let model = toy(seed % 4);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_input(&mut rng, &model.config);
        let cfg = BeamConfig { beam_size, length_penalty_alpha: alpha, max_len: 8, min_len: 1 };
        let out = beam_search(&model, &x, &cfg).unwrap();
        prop_assert!(!out.nbest.is_empty() && out.nbest.len() <= beam_size);
        for h in &out.nbest {
            prop_assert!(out.best.score >= h.score);
        }
    }
}
