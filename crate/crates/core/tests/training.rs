use std::path::Path;

use mamr::corpus::{ingest_pair, Encoders};
use mamr::linearize::{linearize, FeatureBuckets};
use mamr::model::{Model, ModelConfig, Preset};
use mamr::subword::{train_bpe, TrainOptions};
use mamr::toy;
use mamr::train::{train, Objective, RunOptions, TrainConfig, TrainSet};

#[test]
fn toy_training_loss_falls_after_warmup() {
    let examples = toy::generate(32, 3);
    let lin: Vec<String> = examples.iter().map(|e| linearize(&e.graph).unwrap().token_line()).collect();
    let texts: Vec<String> = examples.iter().flat_map(|e| e.texts.iter().map(|(_, t)| t.clone())).collect();
    let src = train_bpe(&lin, TrainOptions { num_merges: 100, protect_roles: true }).unwrap();
    let tgt = train_bpe(&texts, TrainOptions { num_merges: 100, protect_roles: false }).unwrap();
    let enc = Encoders {
        source: &src,
        target: &tgt,
        buckets: FeatureBuckets::default(),
    };
    let mut data = Vec::new();
    for e in &examples {
        for (lang, text) in &e.texts {
            data.extend(ingest_pair(&e.penman(), text, *lang, enc, Path::new("toy")).0);
        }
    }
    assert_eq!(data.len(), 64);

    let model = Model::build(ModelConfig::preset(Preset::Toy, src.vocab_size(), tgt.vocab_size()), 1).unwrap();
    let warmup = 20;
    let mut cfg = TrainConfig::fresh(1);
    cfg.warmup_steps = warmup;
    cfg.base_lr = 1e-3 * (warmup as f64).sqrt();
    cfg.max_updates = warmup + 100;
    cfg.dropout = 0.0;
    cfg.layerdrop = 0.0;
    // One batch holds the whole corpus, so each logged loss is a full-batch loss.
    cfg.max_tokens = 1 << 16;
    cfg.checkpoint_every = 1000;
    let out = train(model, TrainSet::Fixed(&data), &data[..8], Objective::Seq2Seq, &cfg, &RunOptions::default()).unwrap();

    let losses: Vec<f64> = out.log.iter().filter(|r| r.step > warmup).map(|r| r.train_loss).collect();
    assert_eq!(losses.len(), 100);
    let rises = losses.windows(2).filter(|w| w[1] >= w[0]).count();
    assert!(rises <= 5, "{rises} non-decreasing steps: {losses:?}");
}
