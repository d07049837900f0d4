//! Detokenized BLEU: the metric tokenizes both sides itself with the
//! 13a rules, so scores do not depend on upstream tokenization.

use std::collections::HashMap;
use std::fmt;
use std::sync::OnceLock;

use regex::Regex;

use super::EvalError;

pub const MAX_ORDER: usize = 4;

fn rules() -> &'static [(Regex, &'static str); 4] {
    static RULES: OnceLock<[(Regex, &'static str); 4]> = OnceLock::new();
    RULES.get_or_init(|| {
        let r = |p: &str| Regex::new(p).expect("static pattern");
        [
            // Symbols and punctuation other than `.`, `,` and `-`.
            (r(r"([\{-~\[-` -&\(-\+:-@/])"), " $1 "),
            // Period and comma unless preceded by a digit...
            (r(r"([^0-9])([\.,])"), "$1 $2 "),
            // ...or followed by one.
            (r(r"([\.,])([^0-9])"), " $1 $2"),
            // Dash after a digit.
            (r(r"([0-9])(-)"), "$1 $2 "),
        ]
    })
}

/// The 13a tokenization: unescape the common entities, pad punctuation
/// with spaces (keeping decimal points and thousands separators inside
/// numbers), collapse whitespace.  Case is preserved.
pub fn tokenize_13a(line: &str) -> String {
    let mut s = line.replace("<skipped>", "").replace("-\n", "").replace('\n', " ");
    if s.contains('&') {
        s = s
            .replace("&quot;", "\"")
            .replace("&amp;", "&")
            .replace("&lt;", "<")
            .replace("&gt;", ">");
    }
    let mut s = format!(" {s} ");
    for (re, rep) in rules() {
        s = re.replace_all(&s, *rep).into_owned();
    }
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Smoothing {
    /// Corpus BLEU: any zero precision makes the score zero.
    None,
    /// Sentence BLEU: orders 2–4 use `(matches + 1) / (total + 1)`.
    AddOne,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BleuReport {
    /// On the 0–100 scale.
    pub bleu: f64,
    /// Modified n-gram precisions for n = 1..4, as fractions.
    pub precisions: [f64; MAX_ORDER],
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
    pub matches: [usize; MAX_ORDER],
    pub totals: [usize; MAX_ORDER],
    pub smoothing: Smoothing,
}

impl fmt::Display for BleuReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let p: Vec<String> = self.precisions.iter().map(|p| format!("{:.1}", p * 100.0)).collect();
        let ratio = if self.ref_len == 0 {
            0.0
        } else {
            self.hyp_len as f64 / self.ref_len as f64
        };
        let smooth = match self.smoothing {
            Smoothing::None => "none",
            Smoothing::AddOne => "add-one",
        };
        write!(
            f,
            "BLEU = {:.2} {} (BP = {:.3} ratio = {:.3} hyp_len = {} ref_len = {}) tok:13a|case:mixed|smooth:{smooth}",
            self.bleu,
            p.join("/"),
            self.brevity_penalty,
            ratio,
            self.hyp_len,
            self.ref_len
        )
    }
}

/// Clipped n-gram matches and hypothesis n-gram totals per order.
pub fn ngram_stats(hyp: &[&str], reference: &[&str]) -> ([usize; MAX_ORDER], [usize; MAX_ORDER]) {
    let mut matches = [0; MAX_ORDER];
    let mut totals = [0; MAX_ORDER];
    for n in 1..=MAX_ORDER {
        let mut ref_counts: HashMap<&[&str], usize> = HashMap::new();
        for g in reference.windows(n) {
            *ref_counts.entry(g).or_default() += 1;
        }
        let mut hyp_counts: HashMap<&[&str], usize> = HashMap::new();
        for g in hyp.windows(n) {
            *hyp_counts.entry(g).or_default() += 1;
        }
        totals[n - 1] = hyp.len().saturating_sub(n - 1);
        matches[n - 1] = hyp_counts
            .iter()
            .map(|(g, &c)| c.min(ref_counts.get(g).copied().unwrap_or(0)))
            .sum();
    }
    (matches, totals)
}

fn score(
    matches: [usize; MAX_ORDER],
    totals: [usize; MAX_ORDER],
    hyp_len: usize,
    ref_len: usize,
    smoothing: Smoothing,
) -> BleuReport {
    let mut precisions = [0.0; MAX_ORDER];
    for n in 0..MAX_ORDER {
        precisions[n] = match smoothing {
            Smoothing::AddOne if n > 0 => (matches[n] + 1) as f64 / (totals[n] + 1) as f64,
            _ if totals[n] == 0 => 0.0,
            _ => matches[n] as f64 / totals[n] as f64,
        };
    }
    let brevity_penalty = if hyp_len == 0 {
        0.0
    } else if hyp_len < ref_len {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    } else {
        1.0
    };
    let bleu = if precisions.iter().any(|&p| p == 0.0) {
        0.0
    } else {
        let log_mean = precisions.iter().map(|p| p.ln()).sum::<f64>() / MAX_ORDER as f64;
        brevity_penalty * log_mean.exp() * 100.0
    };
    BleuReport {
        bleu,
        precisions,
        brevity_penalty,
        hyp_len,
        ref_len,
        matches,
        totals,
        smoothing,
    }
}

/// Corpus BLEU with one reference per hypothesis and no smoothing.
pub fn bleu<H: AsRef<str>, R: AsRef<str>>(hypotheses: &[H], references: &[R]) -> Result<BleuReport, EvalError> {
    if hypotheses.len() != references.len() {
        return Err(EvalError::LineCountMismatch {
            hypotheses: hypotheses.len(),
            references: references.len(),
        });
    }
    let mut matches = [0; MAX_ORDER];
    let mut totals = [0; MAX_ORDER];
    let (mut hyp_len, mut ref_len) = (0, 0);
    for (h, r) in hypotheses.iter().zip(references) {
        let h = tokenize_13a(h.as_ref());
        let r = tokenize_13a(r.as_ref());
        let h: Vec<&str> = h.split(' ').filter(|w| !w.is_empty()).collect();
        let r: Vec<&str> = r.split(' ').filter(|w| !w.is_empty()).collect();
        let (m, t) = ngram_stats(&h, &r);
        for n in 0..MAX_ORDER {
            matches[n] += m[n];
            totals[n] += t[n];
        }
        hyp_len += h.len();
        ref_len += r.len();
    }
    Ok(score(matches, totals, hyp_len, ref_len, Smoothing::None))
}

/// Single-sentence BLEU with add-one smoothing on orders 2–4.
pub fn sentence_bleu(hypothesis: &str, reference: &str) -> BleuReport {
    let h = tokenize_13a(hypothesis);
    let r = tokenize_13a(reference);
    let h: Vec<&str> = h.split(' ').filter(|w| !w.is_empty()).collect();
    let r: Vec<&str> = r.split(' ').filter(|w| !w.is_empty()).collect();
    let (m, t) = ngram_stats(&h, &r);
    score(m, t, h.len(), r.len(), Smoothing::AddOne)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenizer_rules() {
        assert_eq!(tokenize_13a("Hello, world!"), "Hello , world !");
        assert_eq!(tokenize_13a("It costs 1,000.50 dollars."), "It costs 1,000.50 dollars .");
        assert_eq!(tokenize_13a("state-of-the-art 1990-2000"), "state-of-the-art 1990 - 2000");
        assert_eq!(tokenize_13a("\"Quoted\" (x) a&amp;b"), "\" Quoted \" ( x ) a & b");
        assert_eq!(tokenize_13a("  Größe  ändert sich.  "), "Größe ändert sich .");
    }

    #[test]
    fn identity_scores_100() {
        let h = ["the cat sat on the mat", "a quick brown fox jumps"];
        let r = bleu(&h, &h).unwrap();
        assert_eq!(r.bleu, 100.0);
        assert_eq!(r.brevity_penalty, 1.0);
    }

    #[test]
    fn degenerate_corpora() {
        let empty: [&str; 0] = [];
        assert_eq!(bleu(&empty, &empty).unwrap().bleu, 0.0);
        assert_eq!(bleu(&[""], &["a b c d"]).unwrap().bleu, 0.0);
        assert!(matches!(bleu(&["a"], &empty), Err(EvalError::LineCountMismatch { .. })));
        // Too short for any 4-gram: no smoothing means zero.
        assert_eq!(bleu(&["the cat sat"], &["the cat sat down"]).unwrap().bleu, 0.0);
    }

    #[test]
    fn permutation_invariant() {
        let h = ["a b c d e", "x y z w", "p q r s t u"];
        let r = ["a b c d f", "x y z w v", "p q r t s u"];
        let a = bleu(&h, &r).unwrap();
        let b = bleu(&[h[2], h[0], h[1]], &[r[2], r[0], r[1]]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sentence_smoothing() {
        let s = sentence_bleu("the cat sat", "the cat sat down");
        assert_eq!(s.smoothing, Smoothing::AddOne);
        let bp = (1.0f64 - 4.0 / 3.0).exp();
        // p1 = 3/3, p2 = 3/3, p3 = 2/2, p4 = 1/1 after add-one.
        assert!((s.bleu - bp * 100.0).abs() < 1e-9);
        assert_eq!(sentence_bleu("dog", "the cat").bleu, 0.0);
    }
}
