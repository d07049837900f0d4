//! Corruptions for denoising pretraining.  Every noiser keeps parentheses
//! and the language token in place, and reports for each output token the
//! input position it came from so graph features can follow the tokens.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use thiserror::Error;

use crate::lang::is_language_token;
use crate::linearize::FeaturedTokens;
use crate::subword::MASK_TOKEN;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NoiseError {
    #[error("unbalanced parentheses in noiser input")]
    UnbalancedInput,
    #[error("invalid noise setting: {0}")]
    InvalidSpec(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSpec {
    pub mask_prob: f64,
    /// Mean span length.
    pub span_lambda: f64,
    /// Fraction of maskable tokens covered by spans.
    pub span_mass: f64,
    pub shuffle: bool,
    pub seed: u64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        NoiseSpec {
            mask_prob: 0.15,
            span_lambda: 3.0,
            span_mass: 0.3,
            shuffle: true,
            seed: 0,
        }
    }
}

impl NoiseSpec {
    /// No corruption at all.
    pub fn none(seed: u64) -> Self {
        NoiseSpec {
            mask_prob: 0.0,
            span_lambda: 3.0,
            span_mass: 0.0,
            shuffle: false,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), NoiseError> {
        let bad = |m: String| Err(NoiseError::InvalidSpec(m));
        if !(0.0..=1.0).contains(&self.mask_prob) {
            return bad(format!("mask_prob {} outside [0, 1]", self.mask_prob));
        }
        if !(0.0..=1.0).contains(&self.span_mass) {
            return bad(format!("span_mass {} outside [0, 1]", self.span_mass));
        }
        if !(self.span_lambda > 0.0 && self.span_lambda.is_finite()) {
            return bad(format!("span_lambda {} must be positive", self.span_lambda));
        }
        Ok(())
    }

    fn rng(&self, op: u64, example: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ op.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        rng.set_stream(example);
        rng
    }
}

const OP_MASK: u64 = 1;
const OP_SPAN: u64 = 2;
const OP_SHUFFLE: u64 = 3;

/// A corrupted sequence.  `origin[i]` is the input position of token `i`
/// (for a span mask, the first position of the span).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Noised {
    pub tokens: Vec<String>,
    pub origin: Vec<usize>,
    /// Input positions hidden behind masks.
    pub masked: usize,
}

impl Noised {
    fn identity<S: AsRef<str>>(tokens: &[S]) -> Self {
        Noised {
            tokens: tokens.iter().map(|t| t.as_ref().to_string()).collect(),
            origin: (0..tokens.len()).collect(),
            masked: 0,
        }
    }

    /// Applies a later corruption, composing the origin maps.
    fn then(self, next: Noised) -> Noised {
        Noised {
            origin: next.origin.iter().map(|&i| self.origin[i]).collect(),
            tokens: next.tokens,
            masked: self.masked + next.masked,
        }
    }

    /// The noised tokens carrying the features of their origins.
    pub fn featured(&self, source: &FeaturedTokens) -> FeaturedTokens {
        FeaturedTokens {
            tokens: self.tokens.clone(),
            depth_ids: self.origin.iter().map(|&i| source.depth_ids[i]).collect(),
            subgraph_ids: self.origin.iter().map(|&i| source.subgraph_ids[i]).collect(),
        }
    }
}

fn is_paren(t: &str) -> bool {
    t == "(" || t == ")"
}

/// Tokens the noisers may hide.
pub fn is_maskable(t: &str) -> bool {
    !(is_paren(t) || is_language_token(t) || t == MASK_TOKEN)
}

pub fn is_balanced<S: AsRef<str>>(tokens: &[S]) -> bool {
    let mut depth = 0i64;
    for t in tokens {
        match t.as_ref() {
            "(" => depth += 1,
            ")" => {
                depth -= 1;
                if depth < 0 {
                    return false;
                }
            }
            _ => {}
        }
    }
    depth == 0
}

/// Replaces each maskable token by `<mask>` with probability `mask_prob`.
pub fn mask_tokens<S: AsRef<str>>(tokens: &[S], spec: &NoiseSpec, example: u64) -> Noised {
    let mut rng = spec.rng(OP_MASK, example);
    let mut out = Noised::identity(tokens);
    for t in &mut out.tokens {
        // One draw per maskable token keeps the stream aligned across rates.
        if is_maskable(t) && rng.random::<f64>() < spec.mask_prob {
            *t = MASK_TOKEN.to_string();
            out.masked += 1;
        }
    }
    out
}

/// Replaces each `(start, len)` span by a single `<mask>`.  Spans must be
/// disjoint and sorted.
pub fn replace_spans<S: AsRef<str>>(tokens: &[S], spans: &[(usize, usize)]) -> Noised {
    let mut out = Noised {
        tokens: Vec::with_capacity(tokens.len()),
        origin: Vec::with_capacity(tokens.len()),
        masked: 0,
    };
    let mut spans = spans.iter().copied().filter(|&(_, len)| len > 0).peekable();
    let mut i = 0;
    while i < tokens.len() {
        if let Some(&(start, len)) = spans.peek() {
            if start == i {
                out.tokens.push(MASK_TOKEN.to_string());
                out.origin.push(i);
                out.masked += len;
                i += len;
                spans.next();
                continue;
            }
        }
        out.tokens.push(tokens[i].as_ref().to_string());
        out.origin.push(i);
        i += 1;
    }
    out
}

/// Masks Poisson-length spans until `round(span_mass · maskable)` tokens
/// are covered.  A span grows rightwards from a random uncovered token and
/// stops at parentheses, the language token, an existing mask, or another
/// span.
pub fn mask_spans<S: AsRef<str>>(tokens: &[S], spec: &NoiseSpec, example: u64) -> Noised {
    let maskable: Vec<bool> = tokens.iter().map(|t| is_maskable(t.as_ref())).collect();
    let total = maskable.iter().filter(|&&m| m).count();
    let mut remaining = (spec.span_mass * total as f64).round() as usize;
    if remaining == 0 {
        return Noised::identity(tokens);
    }
    let Ok(poisson) = Poisson::new(spec.span_lambda) else {
        return Noised::identity(tokens);
    };
    let mut rng = spec.rng(OP_SPAN, example);
    let mut covered = vec![false; tokens.len()];
    let mut spans = Vec::new();
    while remaining > 0 {
        let free: Vec<usize> = (0..tokens.len()).filter(|&i| maskable[i] && !covered[i]).collect();
        if free.is_empty() {
            break;
        }
        let want = poisson.sample(&mut rng) as usize;
        if want == 0 {
            continue;
        }
        let start = free[rng.random_range(0..free.len())];
        let mut len = 0;
        while len < want.min(remaining) && start + len < tokens.len() && maskable[start + len] && !covered[start + len] {
            covered[start + len] = true;
            len += 1;
        }
        remaining -= len;
        spans.push((start, len));
    }
    spans.sort_unstable();
    replace_spans(tokens, &spans)
}

/// Segments of the root: the fixed head (language token, `(`, root
/// concept), one range per root child (role plus its value), and the fixed
/// tail.
fn root_segments<S: AsRef<str>>(tokens: &[S]) -> (usize, Vec<(usize, usize)>) {
    let start = usize::from(tokens.first().is_some_and(|t| is_language_token(t.as_ref())));
    if tokens.get(start).map(AsRef::as_ref) != Some("(") {
        return (tokens.len(), Vec::new());
    }
    let mut depth = 0;
    let mut segments: Vec<(usize, usize)> = Vec::new();
    let mut head_end = None;
    for (i, t) in tokens.iter().enumerate().skip(start) {
        let t = t.as_ref();
        if depth == 1 && t.starts_with(':') {
            head_end.get_or_insert(i);
            segments.push((i, i + 1));
        } else if depth >= 1 {
            if let Some(last) = segments.last_mut() {
                last.1 = i + 1;
            }
        }
        match t {
            "(" => depth += 1,
            ")" => {
                depth -= 1;
                if depth == 0 {
                    // The root's closing parenthesis belongs to the tail.
                    if let Some(last) = segments.last_mut() {
                        last.1 = i;
                    }
                    break;
                }
            }
            _ => {}
        }
    }
    (head_end.unwrap_or(tokens.len()), segments)
}

/// Permutes the root's child segments with a seeded uniform permutation.
pub fn shuffle_segments<S: AsRef<str>>(tokens: &[S], spec: &NoiseSpec, example: u64) -> Result<Noised, NoiseError> {
    if !is_balanced(tokens) {
        return Err(NoiseError::UnbalancedInput);
    }
    let (head_end, segments) = root_segments(tokens);
    if segments.len() < 2 {
        return Ok(Noised::identity(tokens));
    }
    let mut order: Vec<usize> = (0..segments.len()).collect();
    order.shuffle(&mut spec.rng(OP_SHUFFLE, example));
    let tail_start = segments.last().expect("non-empty").1;
    let mut origin: Vec<usize> = (0..head_end).collect();
    for &s in &order {
        origin.extend(segments[s].0..segments[s].1);
    }
    origin.extend(tail_start..tokens.len());
    Ok(Noised {
        tokens: origin.iter().map(|&i| tokens[i].as_ref().to_string()).collect(),
        origin,
        masked: 0,
    })
}

/// The full corruption: shuffle (if enabled), then span masking, then
/// token masking of what the spans left visible.
pub fn noise<S: AsRef<str>>(tokens: &[S], spec: &NoiseSpec, example: u64) -> Result<Noised, NoiseError> {
    spec.validate()?;
    let mut out = if spec.shuffle {
        shuffle_segments(tokens, spec, example)?
    } else {
        if !is_balanced(tokens) {
            return Err(NoiseError::UnbalancedInput);
        }
        Noised::identity(tokens)
    };
    if spec.span_mass > 0.0 {
        let next = mask_spans(&out.tokens, spec, example);
        out = out.then(next);
    }
    if spec.mask_prob > 0.0 {
        let next = mask_tokens(&out.tokens, spec, example);
        out = out.then(next);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    const AMR: &str = "<lang:de> ( want-01 :ARG0 ( boy ) :ARG1 ( go-02 :ARG0 boy ) :polarity - )";

    #[test]
    fn mask_extremes() {
        let t = toks(AMR);
        let none = NoiseSpec::none(1);
        assert_eq!(mask_tokens(&t, &none, 0).tokens, t);
        let all = NoiseSpec { mask_prob: 1.0, ..none };
        let out = mask_tokens(&t, &all, 0);
        for (a, b) in out.tokens.iter().zip(&t) {
            if is_maskable(b) {
                assert_eq!(a, MASK_TOKEN);
            } else {
                assert_eq!(a, b);
            }
        }
        assert_eq!(out.masked, t.iter().filter(|x| is_maskable(x)).count());
    }

    #[test]
    fn spans_collapse_and_respect_parens() {
        let t = toks("( a b c ) d");
        let out = replace_spans(&t, &[(1, 3)]);
        assert_eq!(out.tokens, toks("( <mask> ) d"));
        assert_eq!(out.origin, vec![0, 1, 4, 5]);
        assert_eq!(out.masked, 3);
        let spec = NoiseSpec { span_mass: 0.0, ..NoiseSpec::none(3) };
        assert_eq!(mask_spans(&t, &spec, 0).tokens, t);
        let spec = NoiseSpec { span_mass: 1.0, span_lambda: 10.0, ..NoiseSpec::none(3) };
        for ex in 0..50 {
            let out = mask_spans(&toks(AMR), &spec, ex);
            assert!(is_balanced(&out.tokens));
            assert_eq!(out.tokens[0], "<lang:de>");
            assert_eq!(out.masked, toks(AMR).iter().filter(|x| is_maskable(x)).count());
        }
    }

    #[test]
    fn shuffle_moves_whole_segments() {
        let t = toks(AMR);
        let (head, segs) = root_segments(&t);
        assert_eq!(head, 3);
        assert_eq!(segs, vec![(3, 7), (7, 13), (13, 15)]);
        let spec = NoiseSpec { shuffle: true, ..NoiseSpec::none(9) };
        let mut seen = std::collections::HashSet::new();
        for ex in 0..200 {
            let out = shuffle_segments(&t, &spec, ex).unwrap();
            let mut a = out.tokens.clone();
            let mut b = t.clone();
            a.sort();
            b.sort();
            assert_eq!(a, b);
            assert_eq!(&out.tokens[..3], &t[..3]);
            assert_eq!(out.tokens.last().unwrap(), ")");
            seen.insert(out.tokens.join(" "));
        }
        assert_eq!(seen.len(), 6);
        let single = toks("( a :x b )");
        assert_eq!(shuffle_segments(&single, &spec, 0).unwrap().tokens, single);
        assert_eq!(shuffle_segments(&toks("( a"), &spec, 0), Err(NoiseError::UnbalancedInput));
    }

    #[test]
    fn composite_is_reproducible_and_carries_features() {
        let t = toks(AMR);
        let spec = NoiseSpec { seed: 5, ..NoiseSpec::default() };
        let a = noise(&t, &spec, 17).unwrap();
        assert_eq!(a, noise(&t, &spec, 17).unwrap());
        assert!(a.tokens.len() <= t.len());
        let src = FeaturedTokens {
            tokens: t.clone(),
            depth_ids: (0..t.len() as u32).collect(),
            subgraph_ids: vec![0; t.len()],
        };
        let f = a.featured(&src);
        for (i, tok) in f.tokens.iter().enumerate() {
            if tok != MASK_TOKEN {
                assert_eq!(tok, &t[f.depth_ids[i] as usize]);
            }
        }
        assert!(NoiseSpec { mask_prob: 2.0, ..spec }.validate().is_err());
    }
}
