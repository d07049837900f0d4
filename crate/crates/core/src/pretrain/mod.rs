//! Denoising pretraining of the encoder and language-model pretraining of
//! the decoder.  Both reuse the fine-tuning loop and export only their half
//! of the weights.

mod noise;

use std::collections::BTreeMap;

use thiserror::Error;

pub use noise::{
    is_balanced, is_maskable, mask_spans, mask_tokens, noise, replace_spans, shuffle_segments, NoiseError, NoiseSpec,
    Noised,
};

use crate::corpus::{encode_source, encode_target, ParallelExample};
use crate::lang::Language;
use crate::linearize::FeaturedTokens;
use crate::model::{Checkpoint, Model, ModelConfig, ModelError};
use crate::subword::{BpeModel, PAD};
use crate::tensor::Graph;
use crate::train::{export_part, train, Objective, RunOptions, TrainConfig, TrainError, TrainOutcome, TrainSet};

#[derive(Debug, Error)]
pub enum PretrainError {
    #[error("no monolingual data for {0}")]
    MissingMonolingualData(Language),
    #[error("empty pretraining corpus")]
    EmptyCorpus,
    #[error(transparent)]
    Noise(#[from] NoiseError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Reconstruction pair: noised, featured encoder input and the original
/// token line as target, both in encoder pieces.
pub fn denoising_example(
    graph: &FeaturedTokens,
    bpe: &BpeModel,
    spec: &NoiseSpec,
    example: u64,
    line: usize,
) -> Result<ParallelExample, PretrainError> {
    let noised = noise(&graph.tokens, spec, example)?;
    let input = encode_source(&noised.featured(graph), bpe);
    let target = encode_target(&graph.tokens.join(" "), bpe);
    Ok(ParallelExample {
        src_ids: input.piece_ids,
        src_depth_ids: input.depth_ids,
        src_subgraph_ids: input.subgraph_ids,
        tgt_ids: target,
        language: language_of(graph),
        line,
    })
}

fn language_of(graph: &FeaturedTokens) -> Language {
    graph
        .tokens
        .first()
        .and_then(|t| Language::from_token(t))
        .unwrap_or_else(|| Language::new("en").expect("en is supported"))
}

/// Noised copies of the corpus for one epoch; example `i` of epoch `e` uses
/// noise stream `e·n + i`.
pub fn denoising_epoch(
    corpus: &[FeaturedTokens],
    bpe: &BpeModel,
    spec: &NoiseSpec,
    epoch: u64,
) -> Result<Vec<ParallelExample>, PretrainError> {
    let n = corpus.len() as u64;
    corpus
        .iter()
        .enumerate()
        .map(|(i, g)| denoising_example(g, bpe, spec, epoch * n + i as u64, i + 1))
        .collect()
}

/// The reconstruction model shares the encoder configuration and decodes
/// over the encoder vocabulary.
pub fn reconstruction_config(config: &ModelConfig) -> ModelConfig {
    let mut c = config.clone();
    c.dec_vocab = c.enc_vocab;
    c
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    /// Only the pretrained half (`enc.*` or `dec.*`).
    pub export: Checkpoint,
    /// The whole model used during pretraining.
    pub outcome: TrainOutcome,
}

/// Sequence-to-sequence denoising: noised graph in, original graph out.
/// Fresh noise is drawn every epoch; validation uses a fixed noising of up
/// to 64 graphs.
pub fn pretrain_encoder(
    config: &ModelConfig,
    corpus: &[FeaturedTokens],
    bpe: &BpeModel,
    spec: &NoiseSpec,
    cfg: &TrainConfig,
    opts: &RunOptions,
) -> Result<PretrainOutcome, PretrainError> {
    if corpus.is_empty() {
        return Err(PretrainError::EmptyCorpus);
    }
    spec.validate()?;
    let config = reconstruction_config(config);
    let model = Model::build(config, cfg.seed)?;
    // The validation noise stream sits far from every training stream.
    let valid_spec = NoiseSpec {
        seed: spec.seed ^ 0xA5A5_A5A5_A5A5_A5A5,
        ..spec.clone()
    };
    let valid = denoising_epoch(&corpus[..corpus.len().min(64)], bpe, &valid_spec, 0)?;
    let first = denoising_epoch(corpus, bpe, spec, 0)?;
    let per_epoch = |e: u64| {
        if e == 0 {
            first.clone()
        } else {
            denoising_epoch(corpus, bpe, spec, e).expect("noise succeeded on epoch 0")
        }
    };
    let outcome = train(model, TrainSet::PerEpoch(&per_epoch), &valid, Objective::Seq2Seq, cfg, opts)?;
    Ok(PretrainOutcome {
        export: export_part(&outcome.best, "enc."),
        outcome,
    })
}

/// Language-model sequence `bos <lang:xx> pieces… eos`.
pub fn lm_example(text: &str, lang: Language, bpe: &BpeModel, line: usize) -> ParallelExample {
    let mut tgt = encode_target(text, bpe);
    tgt.insert(1, bpe.language_id(lang));
    ParallelExample {
        src_ids: Vec::new(),
        src_depth_ids: Vec::new(),
        src_subgraph_ids: Vec::new(),
        tgt_ids: tgt,
        language: lang,
        line,
    }
}

/// Per-token perplexity of language-model sequences, counting every
/// position after `bos`.
pub fn perplexity(model: &Model<f32>, examples: &[ParallelExample]) -> Result<f64, PretrainError> {
    let mut total = 0.0;
    let mut count = 0usize;
    for ex in examples {
        let batch = crate::corpus::collate([ex]);
        let n = batch.tgt_out.iter().filter(|&&y| y != PAD).count();
        let mut g = Graph::new();
        let loss = model.lm_loss(&mut g, &batch, 0.0)?;
        total += g.value(loss).data()[0] as f64 * n as f64;
        count += n;
    }
    Ok((total / count.max(1) as f64).exp())
}

#[derive(Debug, Clone)]
pub struct DecoderPretrainOutcome {
    pub export: Checkpoint,
    pub outcome: TrainOutcome,
    pub perplexity: BTreeMap<Language, f64>,
}

/// Causal language modelling over monolingual text, every line prefixed by
/// its language token.  Every declared language needs at least one line.
pub fn pretrain_decoder(
    config: &ModelConfig,
    corpora: &BTreeMap<Language, Vec<String>>,
    declared: &[Language],
    bpe: &BpeModel,
    cfg: &TrainConfig,
    opts: &RunOptions,
) -> Result<DecoderPretrainOutcome, PretrainError> {
    let mut examples = Vec::new();
    let mut by_lang: BTreeMap<Language, Vec<ParallelExample>> = BTreeMap::new();
    for &lang in declared {
        let lines = corpora.get(&lang).map(Vec::as_slice).unwrap_or_default();
        let lines: Vec<&String> = lines.iter().filter(|l| !l.trim().is_empty()).collect();
        if lines.is_empty() {
            return Err(PretrainError::MissingMonolingualData(lang));
        }
        let exs: Vec<ParallelExample> = lines
            .iter()
            .enumerate()
            .map(|(i, l)| lm_example(l, lang, bpe, i + 1))
            .collect();
        examples.extend(exs.iter().cloned());
        by_lang.insert(lang, exs);
    }
    let model = Model::build(config.clone(), cfg.seed)?;
    let outcome = train(model, TrainSet::Fixed(&examples), &examples, Objective::LanguageModel, cfg, opts)?;
    let mut ppl = BTreeMap::new();
    for (lang, exs) in &by_lang {
        let p = perplexity(&outcome.best, exs)?;
        log::info!("{lang} perplexity {p:.3}");
        ppl.insert(*lang, p);
    }
    Ok(DecoderPretrainOutcome {
        export: export_part(&outcome.best, "dec."),
        outcome,
        perplexity: ppl,
    })
}

/// Teacher-forced fraction of target tokens predicted exactly.
pub fn token_accuracy(model: &Model<f32>, examples: &[ParallelExample]) -> Result<f64, PretrainError> {
    let mut right = 0usize;
    let mut total = 0usize;
    for ex in examples {
        let batch = crate::corpus::collate([ex]);
        let mut g = Graph::new();
        let lens = [batch.src_len];
        let src = crate::model::SourceBatch::from_padded(&batch);
        let states = model.encode_graph(&mut g, src, &[])?;
        let memory = crate::model::Memory {
            states,
            len: batch.src_len,
            lens: &lens,
        };
        let out = model.decode_graph(&mut g, Some(memory), &batch.tgt_in, 1, batch.tgt_len, &[])?;
        let z = model.logits(&mut g, out.hidden)?;
        let z = g.value(z);
        for (r, &y) in batch.tgt_out.iter().enumerate() {
            let row = z.row(r);
            let best = (0..row.len()).fold(0, |b, i| if row[i] > row[b] { i } else { b });
            right += usize::from(best as u32 == y);
            total += 1;
        }
    }
    Ok(right as f64 / total.max(1) as f64)
}
