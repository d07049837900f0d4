use std::collections::BTreeMap;

use mamr::linearize::{linearize_with_features, prepend_language_token, FeatureBuckets};
use mamr::model::{ModelConfig, Preset};
use mamr::pretrain::{denoising_epoch, lm_example, perplexity, pretrain_decoder, pretrain_encoder, token_accuracy, NoiseSpec};
use mamr::subword::{train_bpe, TrainOptions};
use mamr::toy;
use mamr::train::{RunOptions, TrainConfig};

fn fast(seed: u64, max_updates: u64) -> TrainConfig {
    let warmup = 100;
    TrainConfig {
        base_lr: 2e-3 * (warmup as f64).sqrt(),
        warmup_steps: warmup,
        max_updates,
        checkpoint_every: 500,
        label_smoothing: 0.0,
        dropout: 0.0,
        layerdrop: 0.0,
        max_tokens: 2048,
        ..TrainConfig::fresh(seed)
    }
}

#[test]
fn denoising_reconstructs_training_graphs() {
    let lang = toy::languages()[0];
    let corpus: Vec<_> = toy::generate(50, 8)
        .iter()
        .map(|e| {
            let lin = linearize_with_features(&e.graph, FeatureBuckets::default()).unwrap();
            prepend_language_token(lin, lang.code()).unwrap().featured()
        })
        .collect();
    let lines: Vec<String> = corpus.iter().map(|f| f.tokens.join(" ")).collect();
    let bpe = train_bpe(&lines, TrainOptions { num_merges: 100, protect_roles: true }).unwrap();
    let config = ModelConfig::preset(Preset::Toy, bpe.vocab_size(), bpe.vocab_size());
    let spec = NoiseSpec { seed: 8, ..NoiseSpec::default() };
    let out = pretrain_encoder(&config, &corpus, &bpe, &spec, &fast(8, 2000), &RunOptions::default()).unwrap();
    let noised = denoising_epoch(&corpus, &bpe, &spec, 0).unwrap();
    let accuracy = token_accuracy(&out.outcome.last, &noised).unwrap();
    assert!(accuracy >= 0.95, "reconstruction accuracy {accuracy}");
}

#[test]
fn language_token_conditions_the_decoder() {
    let de = toy::languages()[0];
    let fr = toy::languages()[1];
    let a = ["ka", "ki", "ku", "ko"];
    let b = ["zo", "zu", "ze", "za"];
    let lines = |words: &[&str], k: usize| -> Vec<String> {
        (0..k)
            .map(|i| (0..4).map(|j| words[(i * 3 + j * (i % 3 + 1)) % words.len()]).collect::<Vec<_>>().join(" "))
            .collect()
    };
    let corpora = BTreeMap::from([(de, lines(&a, 24)), (fr, lines(&b, 24))]);
    let all: Vec<&String> = corpora.values().flatten().collect();
    let bpe = train_bpe(&all, TrainOptions { num_merges: 0, protect_roles: false }).unwrap();
    let config = ModelConfig::preset(Preset::Toy, bpe.vocab_size(), bpe.vocab_size());
    let out = pretrain_decoder(&config, &corpora, &[de, fr], &bpe, &fast(2, 300), &RunOptions::default()).unwrap();
    for (lang, other) in [(de, fr), (fr, de)] {
        let right: Vec<_> = corpora[&lang].iter().enumerate().map(|(i, l)| lm_example(l, lang, &bpe, i + 1)).collect();
        let swapped: Vec<_> = corpora[&lang].iter().enumerate().map(|(i, l)| lm_example(l, other, &bpe, i + 1)).collect();
        let p = perplexity(&out.outcome.best, &right).unwrap();
        let q = perplexity(&out.outcome.best, &swapped).unwrap();
        assert!(p < q, "{lang}: conditional {p} vs swapped {q}");
    }
}
