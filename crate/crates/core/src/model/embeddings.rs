//! Decoder word-table initialization from a text embedding file with one
//! `piece v1 v2 … vd` line per piece.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use super::{Model, ModelError};
use crate::subword::BpeModel;
use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EmbeddingReport {
    pub initialized: usize,
    pub total: usize,
}

impl fmt::Display for EmbeddingReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.initialized, self.total)
    }
}

/// Parses the embedding file; every vector must have the same width.
pub fn parse_embedding_file(text: &str) -> Result<(usize, HashMap<String, Vec<f64>>), ModelError> {
    let mut width = None;
    let mut out = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |reason: String| ModelError::MalformedEmbeddingFile { line: i + 1, reason };
        let mut fields = line.split(' ').filter(|f| !f.is_empty());
        let piece = fields.next().unwrap_or_default();
        let values = fields
            .map(|v| v.parse::<f64>().map_err(|_| bad(format!("`{v}` is not a number"))))
            .collect::<Result<Vec<_>, _>>()?;
        if values.is_empty() {
            return Err(bad("no vector".into()));
        }
        match width {
            None => width = Some(values.len()),
            Some(w) if w != values.len() => {
                return Err(bad(format!("width {} differs from {w}", values.len())));
            }
            _ => {}
        }
        if out.insert(piece.to_string(), values).is_some() {
            return Err(bad(format!("duplicate piece `{piece}`")));
        }
    }
    Ok((width.unwrap_or(0), out))
}

/// Overwrites the decoder word rows of pieces present in the file; other
/// rows keep their current values.
pub fn load_decoder_embeddings<F: Scalar>(
    model: &mut Model<F>,
    path: impl AsRef<Path>,
    vocab: &BpeModel,
) -> Result<EmbeddingReport, ModelError> {
    let text = fs::read_to_string(path)?;
    apply_embeddings(model, &text, vocab)
}

pub(crate) fn apply_embeddings<F: Scalar>(
    model: &mut Model<F>,
    text: &str,
    vocab: &BpeModel,
) -> Result<EmbeddingReport, ModelError> {
    let (width, vectors) = parse_embedding_file(text)?;
    let total = model.config.dec_vocab;
    if vectors.is_empty() {
        log::warn!("embedding file is empty; decoder embeddings keep their initialization");
        return Ok(EmbeddingReport { initialized: 0, total });
    }
    let d = model.config.d_word;
    if width != d {
        return Err(ModelError::WidthMismatch {
            expected: d,
            found: width,
        });
    }
    let table = model.params.tensors.get_mut("dec.word").expect("schema");
    let table = Arc::make_mut(table);
    let mut initialized = 0;
    for (id, piece) in vocab.pieces().iter().enumerate().take(total) {
        if let Some(v) = vectors.get(&piece.name()) {
            for (dst, &x) in table.data_mut()[id * d..(id + 1) * d].iter_mut().zip(v) {
                *dst = F::lit(x);
            }
            initialized += 1;
        }
    }
    let report = EmbeddingReport { initialized, total };
    log::info!("initialized {report} decoder embedding rows");
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, Preset};
    use crate::subword::external_vocab_from_text;

    fn setup() -> (Model<f32>, BpeModel) {
        let vocab = external_vocab_from_text("#vocab\n▁a\n▁b\n▁c\n").unwrap();
        let mut config = ModelConfig::preset(Preset::Toy, 10, vocab.vocab_size());
        config.d_word = 4;
        (Model::build(config, 1).unwrap(), vocab)
    }

    #[test]
    fn overwrites_matching_rows() {
        let (mut model, vocab) = setup();
        let before = model.params.get("dec.word").unwrap().clone();
        let text = "▁a 1 2 3 4\n▁c 5 6 7 8\n<mask> 0 0 0 0\nmissing 1 1 1 1\n";
        let report = apply_embeddings(&mut model, text, &vocab).unwrap();
        assert_eq!(report.initialized, 3);
        assert_eq!(report.to_string(), format!("3/{}", vocab.vocab_size()));
        let after = model.params.get("dec.word").unwrap();
        let a = vocab.text_id("▁a").unwrap() as usize;
        assert_eq!(after.row(a), &[1.0, 2.0, 3.0, 4.0]);
        let b = vocab.text_id("▁b").unwrap() as usize;
        assert_eq!(after.row(b), before.row(b));
    }

    #[test]
    fn width_and_format_errors() {
        let (mut model, vocab) = setup();
        assert!(matches!(
            apply_embeddings(&mut model, "▁a 1 2 3\n", &vocab),
            Err(ModelError::WidthMismatch { expected: 4, found: 3 })
        ));
        assert!(matches!(
            apply_embeddings(&mut model, "▁a 1 2 3 4\n▁b 1 x 3 4\n", &vocab),
            Err(ModelError::MalformedEmbeddingFile { line: 2, .. })
        ));
        let r = apply_embeddings(&mut model, "", &vocab).unwrap();
        assert_eq!(r.initialized, 0);
    }
}
