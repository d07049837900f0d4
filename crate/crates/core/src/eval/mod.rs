//! Scoring: corpus and sentence BLEU, AMR/target vocabulary overlap with its
//! correlation to BLEU, and sampling of sentences for human judgement.

mod bleu;

use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub use bleu::{bleu, ngram_stats, sentence_bleu, tokenize_13a, BleuReport, Smoothing, MAX_ORDER};

use crate::lang::{is_language_token, Language};
use crate::subword::BpeModel;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("{hypotheses} hypotheses but {references} references")]
    LineCountMismatch { hypotheses: usize, references: usize },
    #[error("correlation needs at least 3 languages, got {0}")]
    TooFewLanguages(usize),
    #[error("no {what} for {language}")]
    MissingLanguage { what: &'static str, language: Language },
    #[error("need {needed} sentences after filtering, have {available}")]
    InsufficientSentences { needed: usize, available: usize },
}

/// Pearson correlation; `None` when either series is constant or the
/// lengths differ or are below 2.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

/// Concept words of a linearized graph: no parentheses, roles, or
/// language token, with sense suffixes (`-01`) dropped and case folded.
pub fn amr_concepts(line: &str) -> Vec<String> {
    line.split_whitespace()
        .filter(|t| !(*t == "(" || *t == ")" || t.starts_with(':') || is_language_token(t)))
        .map(|t| strip_sense(t).to_lowercase())
        .collect()
}

fn strip_sense(t: &str) -> &str {
    match t.rsplit_once('-') {
        Some((stem, sense)) if !stem.is_empty() && !sense.is_empty() && sense.chars().all(|c| c.is_ascii_digit()) => {
            stem
        }
        _ => t,
    }
}

/// Case-folded 13a words of a target sentence.
pub fn target_words(line: &str) -> Vec<String> {
    tokenize_13a(line).split(' ').filter(|w| !w.is_empty()).map(str::to_lowercase).collect()
}

/// Share of the target side found on the AMR side: distinct types by
/// default, running tokens when `token_level` is set.
pub fn overlap(amr_units: &[String], target_units: &[String], token_level: bool) -> f64 {
    let amr: HashSet<&str> = amr_units.iter().map(String::as_str).collect();
    if token_level {
        if target_units.is_empty() {
            return 0.0;
        }
        let hit = target_units.iter().filter(|w| amr.contains(w.as_str())).count();
        hit as f64 / target_units.len() as f64
    } else {
        let types: HashSet<&str> = target_units.iter().map(String::as_str).collect();
        if types.is_empty() {
            return 0.0;
        }
        types.iter().filter(|w| amr.contains(*w)).count() as f64 / types.len() as f64
    }
}

fn pieces(bpe: &BpeModel, words: &[String]) -> Vec<String> {
    let text = words.join(" ");
    bpe.encode(&text)
        .into_iter()
        .map(|id| bpe.piece(id).map(|p| p.name()).unwrap_or_default())
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct OverlapRow {
    pub language: Language,
    pub word_overlap: f64,
    pub subword_overlap: f64,
    pub bleu: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OverlapTable {
    pub rows: Vec<OverlapRow>,
    pub word_correlation: Option<f64>,
    pub subword_correlation: Option<f64>,
    pub token_level: bool,
}

impl OverlapTable {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("language\tword_overlap\tsubword_overlap\tbleu\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{}\t{:.6}\t{:.6}\t{:.2}\n",
                r.language, r.word_overlap, r.subword_overlap, r.bleu
            ));
        }
        let c = |v: Option<f64>| v.map_or("undefined".to_string(), |v| format!("{v:.6}"));
        out.push_str(&format!("# pearson(word_overlap, bleu) = {}\n", c(self.word_correlation)));
        out.push_str(&format!("# pearson(subword_overlap, bleu) = {}\n", c(self.subword_correlation)));
        out
    }
}

/// Word and subword overlap between the AMR corpus and each language's
/// target corpus, and their correlation with per-language BLEU.  Subword
/// overlap segments both sides with the language's BPE model.
pub fn overlap_stats(
    amr_corpus: &[String],
    targets: &BTreeMap<Language, Vec<String>>,
    bpe: &BTreeMap<Language, &BpeModel>,
    bleu: &BTreeMap<Language, f64>,
    token_level: bool,
) -> Result<OverlapTable, EvalError> {
    if targets.len() < 3 {
        return Err(EvalError::TooFewLanguages(targets.len()));
    }
    let concepts: Vec<String> = amr_corpus.iter().flat_map(|l| amr_concepts(l)).collect();
    let mut rows = Vec::new();
    for (&language, lines) in targets {
        let model = bpe.get(&language).ok_or(EvalError::MissingLanguage { what: "BPE model", language })?;
        let score = *bleu.get(&language).ok_or(EvalError::MissingLanguage { what: "BLEU score", language })?;
        let words: Vec<String> = lines.iter().flat_map(|l| target_words(l)).collect();
        rows.push(OverlapRow {
            language,
            word_overlap: overlap(&concepts, &words, token_level),
            subword_overlap: overlap(&pieces(model, &concepts), &pieces(model, &words), token_level),
            bleu: score,
        });
    }
    let b: Vec<f64> = rows.iter().map(|r| r.bleu).collect();
    let w: Vec<f64> = rows.iter().map(|r| r.word_overlap).collect();
    let s: Vec<f64> = rows.iter().map(|r| r.subword_overlap).collect();
    Ok(OverlapTable {
        word_correlation: pearson(&w, &b),
        subword_correlation: pearson(&s, &b),
        rows,
        token_level,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSentence {
    pub id: String,
    pub hypothesis: String,
    pub reference: String,
    /// Sentence BLEU (add-one smoothed).
    pub bleu: f64,
}

/// Attaches sentence BLEU to aligned outputs; ids are 1-based line numbers.
pub fn score_sentences<H: AsRef<str>, R: AsRef<str>>(
    hypotheses: &[H],
    references: &[R],
) -> Result<Vec<ScoredSentence>, EvalError> {
    if hypotheses.len() != references.len() {
        return Err(EvalError::LineCountMismatch {
            hypotheses: hypotheses.len(),
            references: references.len(),
        });
    }
    Ok(hypotheses
        .iter()
        .zip(references)
        .enumerate()
        .map(|(i, (h, r))| ScoredSentence {
            id: (i + 1).to_string(),
            hypothesis: h.as_ref().to_string(),
            reference: r.as_ref().to_string(),
            bleu: sentence_bleu(h.as_ref(), r.as_ref()).bleu,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct HumanEvalSheet {
    /// Shuffled rows as shown to annotators.
    pub rows: Vec<ScoredSentence>,
    /// Ids drawn from the top and the bottom of the ranking (kept apart from
    /// the sheet).
    pub high: Vec<String>,
    pub low: Vec<String>,
}

impl HumanEvalSheet {
    /// `id, hypothesis, reference` without scores.
    pub fn to_tsv(&self) -> String {
        let clean = |s: &str| s.replace(['\t', '\n', '\r'], " ");
        let mut out = String::from("id\thypothesis\treference\n");
        for r in &self.rows {
            out.push_str(&format!("{}\t{}\t{}\n", clean(&r.id), clean(&r.hypothesis), clean(&r.reference)));
        }
        out
    }
}

/// Drops hypotheses under `min_words` words, ranks the rest by sentence
/// BLEU (ties by input order), takes the `n_high` best and `n_low` worst,
/// and shuffles them with `seed`.
pub fn human_eval_sample(
    scored: &[ScoredSentence],
    n_high: usize,
    n_low: usize,
    min_words: usize,
    seed: u64,
) -> Result<HumanEvalSheet, EvalError> {
    let mut kept: Vec<&ScoredSentence> = scored
        .iter()
        .filter(|s| s.hypothesis.split_whitespace().count() >= min_words)
        .collect();
    let needed = n_high + n_low;
    if kept.len() < needed {
        return Err(EvalError::InsufficientSentences {
            needed,
            available: kept.len(),
        });
    }
    kept.sort_by(|a, b| b.bleu.total_cmp(&a.bleu));
    let high: Vec<ScoredSentence> = kept[..n_high].iter().map(|&s| s.clone()).collect();
    let low: Vec<ScoredSentence> = kept[kept.len() - n_low..].iter().map(|&s| s.clone()).collect();
    let mut rows: Vec<ScoredSentence> = high.iter().chain(&low).cloned().collect();
    rows.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(HumanEvalSheet {
        rows,
        high: high.into_iter().map(|s| s.id).collect(),
        low: low.into_iter().map(|s| s.id).collect(),
    })
}
