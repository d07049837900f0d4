//! Decoding: greedy, length-normalized beam search, and the cross-attention
//! grid of a decoded hypothesis.

use std::cmp::Ordering;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::corpus::EncoderInput;
use crate::model::{Model, ModelError};
use crate::subword::{BpeModel, BOS, EOS, PAD};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Error)]
pub enum GenerateError {
    #[error("no hypothesis reaches min_len {min_len} within max_len {max_len}")]
    NoHypothesis { min_len: usize, max_len: usize },
    #[error("{what}: expected {expected}, found {found}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("invalid beam config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct BeamConfig {
    pub beam_size: usize,
    pub length_penalty_alpha: f64,
    /// Most generated tokens, `</s>` included.
    pub max_len: usize,
    /// Fewest tokens before `</s>` may be produced; above `max_len` no
    /// hypothesis qualifies.
    pub min_len: usize,
}

impl Default for BeamConfig {
    fn default() -> Self {
        BeamConfig {
            beam_size: 5,
            length_penalty_alpha: 1.0,
            max_len: 200,
            min_len: 1,
        }
    }
}

impl BeamConfig {
    pub fn validate(&self) -> Result<(), GenerateError> {
        if self.beam_size < 1 {
            return Err(GenerateError::InvalidConfig("beam_size must be at least 1".into()));
        }
        if self.min_len < 1 || self.max_len < 1 {
            return Err(GenerateError::InvalidConfig("min_len and max_len must be at least 1".into()));
        }
        if !self.length_penalty_alpha.is_finite() {
            return Err(GenerateError::InvalidConfig("length penalty must be finite".into()));
        }
        Ok(())
    }
}

/// `((5 + n) / 6)^alpha`.
pub fn length_penalty(n: usize, alpha: f64) -> f64 {
    ((5.0 + n as f64) / 6.0).powf(alpha)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// Generated pieces (no `<s>`); complete hypotheses end with `</s>`.
    pub ids: Vec<u32>,
    pub logprob: f64,
    pub score: f64,
}

impl Hypothesis {
    fn new(ids: Vec<u32>, logprob: f64, alpha: f64) -> Self {
        let score = logprob / length_penalty(ids.len(), alpha);
        Hypothesis { ids, logprob, score }
    }

    pub fn is_complete(&self) -> bool {
        self.ids.last() == Some(&EOS)
    }

    /// Pieces without the final `</s>`.
    pub fn content(&self) -> &[u32] {
        match self.ids.split_last() {
            Some((&EOS, rest)) => rest,
            _ => &self.ids,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BeamOutput {
    pub best: Hypothesis,
    /// Up to `beam_size` distinct hypotheses, best first.
    pub nbest: Vec<Hypothesis>,
}

/// Log-probabilities of the next token with `<pad>` and `<s>` excluded and
/// `</s>` excluded while `generated < min_len`.
fn next_logprobs<F: Scalar>(logits: &Tensor<F>, row: usize, generated: usize, min_len: usize) -> Vec<f64> {
    let z: Vec<f64> = logits.row(row).iter().map(|x| x.to_f64().unwrap_or(f64::NAN)).collect();
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    let mut lp: Vec<f64> = z.iter().map(|x| x - lse).collect();
    for banned in [PAD, BOS] {
        if let Some(x) = lp.get_mut(banned as usize) {
            *x = f64::NEG_INFINITY;
        }
    }
    if generated < min_len {
        if let Some(x) = lp.get_mut(EOS as usize) {
            *x = f64::NEG_INFINITY;
        }
    }
    lp
}

fn argmax(v: &[f64]) -> usize {
    // First maximum wins, so ties go to the lowest id.
    (0..v.len()).fold(0, |b, i| if v[i] > v[b] { i } else { b })
}

/// Most likely token at each step until `</s>` or `max_len` tokens.
pub fn greedy<F: Scalar>(model: &Model<F>, input: &EncoderInput, max_len: usize) -> Result<Hypothesis, GenerateError> {
    greedy_with(model, &model.encode(input)?, max_len, 1, 1.0)
}

fn greedy_with<F: Scalar>(
    model: &Model<F>,
    memory: &Tensor<F>,
    max_len: usize,
    min_len: usize,
    alpha: f64,
) -> Result<Hypothesis, GenerateError> {
    let mut prefix = vec![BOS];
    let mut logprob = 0.0;
    while prefix.len() <= max_len {
        let step = model.decode_step(memory, std::slice::from_ref(&prefix), None)?;
        let lp = next_logprobs(&step.logits, 0, prefix.len() - 1, min_len);
        let t = argmax(&lp);
        if !lp[t].is_finite() {
            break;
        }
        logprob += lp[t];
        prefix.push(t as u32);
        if t as u32 == EOS {
            break;
        }
    }
    Ok(Hypothesis::new(prefix[1..].to_vec(), logprob, alpha))
}

fn by_score(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.score.total_cmp(&a.score).then_with(|| a.ids.cmp(&b.ids))
}

/// Beam search over cumulative log-probability.  Each step ranks every
/// extension of every live hypothesis and keeps the best `beam_size`;
/// kept extensions ending in `</s>` are finalized.  Hypotheses still live
/// at `max_len` compete unfinished.  The greedy hypothesis is always among
/// the candidates, so the result never scores below greedy decoding.
pub fn beam_search<F: Scalar>(
    model: &Model<F>,
    input: &EncoderInput,
    cfg: &BeamConfig,
) -> Result<BeamOutput, GenerateError> {
    cfg.validate()?;
    let unreachable = GenerateError::NoHypothesis {
        min_len: cfg.min_len,
        max_len: cfg.max_len,
    };
    if cfg.min_len > cfg.max_len {
        return Err(unreachable);
    }
    let alpha = cfg.length_penalty_alpha;
    let memory = model.encode(input)?;
    let mut live: Vec<(Vec<u32>, f64)> = vec![(vec![BOS], 0.0)];
    let mut candidates: Vec<Hypothesis> = Vec::new();
    for generated in 0..cfg.max_len {
        if live.is_empty() {
            break;
        }
        let prefixes: Vec<Vec<u32>> = live.iter().map(|(p, _)| p.clone()).collect();
        let step = model.decode_step(&memory, &prefixes, None)?;
        let mut expansions: Vec<(f64, usize, u32)> = Vec::new();
        for (r, (_, base)) in live.iter().enumerate() {
            let lp = next_logprobs(&step.logits, r, generated, cfg.min_len);
            expansions.extend(
                lp.iter()
                    .enumerate()
                    .filter(|(_, x)| x.is_finite())
                    .map(|(t, x)| (base + x, r, t as u32)),
            );
        }
        expansions.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        expansions.truncate(cfg.beam_size);
        let mut next = Vec::with_capacity(expansions.len());
        for (logprob, r, t) in expansions {
            let mut ids = live[r].0.clone();
            ids.push(t);
            if t == EOS {
                candidates.push(Hypothesis::new(ids[1..].to_vec(), logprob, alpha));
            } else {
                next.push((ids, logprob));
            }
        }
        live = next;
    }
    for (ids, logprob) in live {
        if ids.len() > cfg.min_len {
            candidates.push(Hypothesis::new(ids[1..].to_vec(), logprob, alpha));
        }
    }
    let greedy = greedy_with(model, &memory, cfg.max_len, cfg.min_len, alpha)?;
    if greedy.content().len() >= cfg.min_len {
        candidates.push(greedy);
    }
    candidates.sort_by(by_score);
    let mut nbest = Vec::new();
    for h in candidates {
        if !nbest.iter().any(|n: &Hypothesis| n.ids == h.ids) {
            nbest.push(h);
        }
    }
    nbest.truncate(cfg.beam_size);
    let best = nbest.first().cloned().ok_or(unreachable)?;
    Ok(BeamOutput { best, nbest })
}

/// Detokenized text of a hypothesis.
pub fn detokenize(bpe: &BpeModel, hyp: &Hypothesis) -> String {
    bpe.decode(hyp.content()).unwrap_or_else(|_| String::new())
}

/// Cross-attention of a hypothesis: one row per output piece (the
/// distribution used when that piece was predicted), one column per input
/// piece, averaged over heads of `layer` (default: last) unless `head` is set.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionGrid {
    pub column_labels: Vec<String>,
    pub row_labels: Vec<String>,
    pub weights: Vec<Vec<f64>>,
}

impl AttentionGrid {
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for label in &self.column_labels {
            out.push('\t');
            out.push_str(&escape(label));
        }
        out.push('\n');
        for (label, row) in self.row_labels.iter().zip(&self.weights) {
            out.push_str(&escape(label));
            for w in row {
                let _ = write!(out, "\t{w:.8}");
            }
            out.push('\n');
        }
        out
    }

    /// Column index of the largest weight in each row.
    pub fn row_argmax(&self) -> Vec<usize> {
        self.weights.iter().map(|r| argmax(r)).collect()
    }
}

fn escape(label: &str) -> String {
    label.replace('\t', "\\t").replace('\n', "\\n")
}

pub fn attention_grid<F: Scalar>(
    model: &Model<F>,
    input: &EncoderInput,
    input_labels: &[String],
    hypothesis: &Hypothesis,
    output_labels: &[String],
    layer: Option<usize>,
    head: Option<usize>,
) -> Result<AttentionGrid, GenerateError> {
    if input_labels.len() != input.len() {
        return Err(GenerateError::LengthMismatch {
            what: "input labels",
            expected: input.len(),
            found: input_labels.len(),
        });
    }
    if output_labels.len() != hypothesis.ids.len() {
        return Err(GenerateError::LengthMismatch {
            what: "output labels",
            expected: hypothesis.ids.len(),
            found: output_labels.len(),
        });
    }
    if hypothesis.ids.is_empty() || hypothesis.ids.len() > model.config.max_positions {
        return Err(GenerateError::LengthMismatch {
            what: "hypothesis length",
            expected: model.config.max_positions,
            found: hypothesis.ids.len(),
        });
    }
    let mut tgt_in = vec![BOS];
    tgt_in.extend_from_slice(&hypothesis.ids[..hypothesis.ids.len() - 1]);
    let layer = layer.unwrap_or(model.config.dec_layers - 1);
    let rows = model.cross_attention(input, &tgt_in, layer, head)?;
    Ok(AttentionGrid {
        column_labels: input_labels.to_vec(),
        row_labels: output_labels.to_vec(),
        weights: rows
            .into_iter()
            .map(|r| r.into_iter().map(|x| x.to_f64().unwrap_or(f64::NAN)).collect())
            .collect(),
    })
}

/// Writes the grid of `hypothesis` with piece names from the two vocabularies.
pub fn attention_dump<F: Scalar>(
    model: &Model<F>,
    input: &EncoderInput,
    hypothesis: &Hypothesis,
    source_vocab: &BpeModel,
    target_vocab: &BpeModel,
    path: impl AsRef<Path>,
) -> Result<AttentionGrid, GenerateError> {
    let name = |bpe: &BpeModel, id: u32| bpe.piece(id).map(|p| p.name()).unwrap_or_else(|| format!("#{id}"));
    let cols: Vec<String> = input.piece_ids.iter().map(|&i| name(source_vocab, i)).collect();
    let rows: Vec<String> = hypothesis.ids.iter().map(|&i| name(target_vocab, i)).collect();
    let grid = attention_grid(model, input, &cols, hypothesis, &rows, None, None)?;
    fs::write(path, grid.to_tsv())?;
    Ok(grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, Preset};
    use rand::{Rng, SeedableRng};

    fn model(seed: u64, vocab: usize) -> Model<f32> {
        let mut c = ModelConfig::preset(Preset::Toy, 20, vocab);
        c.dropout = 0.0;
        Model::build(c, seed).unwrap()
    }

    fn input(seed: u64) -> EncoderInput {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(2..7);
        EncoderInput {
            piece_ids: (0..n).map(|_| rng.random_range(5..20)).collect(),
            depth_ids: (0..n).map(|_| rng.random_range(0..4)).collect(),
            subgraph_ids: (0..n).map(|_| rng.random_range(0..4)).collect(),
        }
    }

    #[test]
    fn penalty_form() {
        assert_eq!(length_penalty(7, 0.0), 1.0);
        assert!((length_penalty(1, 1.0) - 1.0).abs() < 1e-15);
        assert!((length_penalty(7, 0.5) - 2f64.sqrt()).abs() < 1e-15);
        // Same logprob: a larger alpha prefers the longer hypothesis.
        let short = Hypothesis::new(vec![5, EOS], -3.0, 0.0);
        let long = Hypothesis::new(vec![5, 6, 7, 8, EOS], -3.0, 0.0);
        assert_eq!(short.score, long.score);
        let short = Hypothesis::new(vec![5, EOS], -3.0, 1.2);
        let long = Hypothesis::new(vec![5, 6, 7, 8, EOS], -3.0, 1.2);
        assert!(long.score > short.score);
    }

    #[test]
    fn beam_one_is_greedy() {
        for s in 0..20 {
            let m = model(s, 12);
            let x = input(s);
            let g = greedy(&m, &x, 6).unwrap();
            let cfg = BeamConfig {
                beam_size: 1,
                max_len: 6,
                ..BeamConfig::default()
            };
            let b = beam_search(&m, &x, &cfg).unwrap();
            assert_eq!(b.best.ids, g.ids, "seed {s}");
            assert_eq!(g, greedy(&m, &x, 6).unwrap());
        }
    }

    #[test]
    fn greedy_limits() {
        let m = model(3, 12);
        let h = greedy(&m, &input(1), 1).unwrap();
        assert_eq!(h.ids.len(), 1);
        let h = greedy(&m, &input(1), 30).unwrap();
        assert!(h.ids.len() <= 30);
        if h.ids.len() < 30 {
            assert!(h.is_complete());
            assert_eq!(h.ids.iter().filter(|&&t| t == EOS).count(), 1);
        }
    }

    #[test]
    fn nbest_is_distinct_and_sorted() {
        let m = model(5, 12);
        let out = beam_search(&m, &input(2), &BeamConfig { max_len: 5, ..BeamConfig::default() }).unwrap();
        assert!(out.nbest.len() <= 5);
        for w in out.nbest.windows(2) {
            assert!(w[0].score >= w[1].score);
            assert_ne!(w[0].ids, w[1].ids);
        }
        assert_eq!(out.best, out.nbest[0]);
        for h in &out.nbest {
            assert!(h.score.is_finite());
            assert!(h.content().len() >= 1);
        }
    }

    #[test]
    fn min_len_and_unreachable() {
        let m = model(6, 12);
        let cfg = BeamConfig {
            min_len: 3,
            max_len: 6,
            ..BeamConfig::default()
        };
        let out = beam_search(&m, &input(3), &cfg).unwrap();
        assert!(out.nbest.iter().all(|h| h.content().len() >= 3));
        let bad = BeamConfig {
            min_len: 4,
            max_len: 3,
            ..BeamConfig::default()
        };
        assert!(matches!(beam_search(&m, &input(3), &bad), Err(GenerateError::NoHypothesis { .. })));
    }

    #[test]
    fn attention_grid_shape_and_rows() {
        let m = model(7, 12);
        let x = input(4);
        let h = greedy(&m, &x, 5).unwrap();
        let cols: Vec<String> = (0..x.len()).map(|i| format!("c{i}")).collect();
        let rows: Vec<String> = (0..h.ids.len()).map(|i| format!("r{i}")).collect();
        let grid = attention_grid(&m, &x, &cols, &h, &rows, None, None).unwrap();
        assert_eq!(grid.weights.len(), h.ids.len());
        for r in &grid.weights {
            assert_eq!(r.len(), x.len());
            assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-5);
        }
        let tsv = grid.to_tsv();
        let lines: Vec<&str> = tsv.lines().collect();
        assert_eq!(lines.len(), h.ids.len() + 1);
        assert_eq!(lines[0].split('\t').count(), x.len() + 1);
        assert!(matches!(
            attention_grid(&m, &x, &cols[1..], &h, &rows, None, None),
            Err(GenerateError::LengthMismatch { .. })
        ));
    }
}
