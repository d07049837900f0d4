//! Byte-pair subword model with an explicit word-boundary marker.
//!
//! Every space-separated segment of a line is encoded as `▁segment`; merges
//! never cross segments.  Trained models carry 256 byte pieces so characters
//! outside the learned alphabet survive a round trip.  Language tokens and
//! `<mask>` are matched as whole segments and never split.

use std::cmp::{Ordering, Reverse};
use std::collections::{BinaryHeap, HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::lang::Language;

pub const BOUNDARY: char = '\u{2581}';
const BOUNDARY_STR: &str = "\u{2581}";

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
pub const MASK: u32 = 4;

pub const PAD_TOKEN: &str = "<pad>";
pub const BOS_TOKEN: &str = "<s>";
pub const EOS_TOKEN: &str = "</s>";
pub const UNK_TOKEN: &str = "<unk>";
pub const MASK_TOKEN: &str = "<mask>";

const CORE_SPECIALS: [&str; 5] = [PAD_TOKEN, BOS_TOKEN, EOS_TOKEN, UNK_TOKEN, MASK_TOKEN];

#[derive(Debug, Error)]
pub enum SubwordError {
    #[error("cannot train on an empty corpus")]
    EmptyCorpus,
    #[error("unknown piece id {0}")]
    UnknownId(u32),
    #[error("malformed vocabulary file at line {line}: {reason}")]
    MalformedVocabFile { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Piece {
    Special(String),
    Byte(u8),
    Text(String),
}

impl Piece {
    /// Name used in model files.
    pub fn name(&self) -> String {
        match self {
            Piece::Special(s) | Piece::Text(s) => s.clone(),
            Piece::Byte(b) => format!("<0x{b:02X}>"),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TrainOptions {
    pub num_merges: usize,
    /// Keep AMR role tokens (`:ARG0`) as single pieces.
    pub protect_roles: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BpeModel {
    merges: Vec<(String, String)>,
    pieces: Vec<Piece>,
    text_ids: HashMap<String, u32>,
    special_ids: HashMap<String, u32>,
    byte_ids: Option<Vec<u32>>,
    ranks: HashMap<(String, String), usize>,
    protect_roles: bool,
}

/// Special tokens in id order: the five core specials, then one language
/// token per registered language.
pub fn special_tokens() -> Vec<String> {
    CORE_SPECIALS
        .iter()
        .map(|s| s.to_string())
        .chain(Language::all().map(|l| l.token()))
        .collect()
}

/// Specials that are recognised as whole segments in input text.
fn is_text_special(segment: &str) -> bool {
    segment == MASK_TOKEN || crate::lang::is_language_token(segment)
}

fn is_role(segment: &str) -> bool {
    segment.len() > 1 && segment.starts_with(':')
}

fn parse_byte_piece(name: &str) -> Option<u8> {
    let hex = name.strip_prefix("<0x")?.strip_suffix('>')?;
    if hex.len() != 2 {
        return None;
    }
    u8::from_str_radix(hex, 16).ok()
}

/// Splits a line into segments; the empty line has none.
fn segments(line: &str) -> impl Iterator<Item = &str> {
    let empty = line.is_empty();
    line.split(' ').filter(move |_| !empty)
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Sym {
    Text(String),
    /// A literal boundary character from the input; never merged.
    Raw(char),
}

impl BpeModel {
    fn from_pieces(pieces: Vec<Piece>, merges: Vec<(String, String)>, protect_roles: bool) -> Self {
        let mut text_ids = HashMap::new();
        let mut special_ids = HashMap::new();
        let mut bytes = vec![u32::MAX; 256];
        let mut has_bytes = false;
        for (id, piece) in pieces.iter().enumerate() {
            let id = id as u32;
            match piece {
                Piece::Special(s) => {
                    special_ids.insert(s.clone(), id);
                }
                Piece::Text(s) => {
                    text_ids.insert(s.clone(), id);
                }
                Piece::Byte(b) => {
                    bytes[*b as usize] = id;
                    has_bytes = true;
                }
            }
        }
        let byte_ids = (has_bytes && bytes.iter().all(|&b| b != u32::MAX)).then_some(bytes);
        let ranks = merges
            .iter()
            .enumerate()
            .map(|(rank, pair)| (pair.clone(), rank))
            .collect();
        BpeModel {
            merges,
            pieces,
            text_ids,
            special_ids,
            byte_ids,
            ranks,
            protect_roles,
        }
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn vocab_size(&self) -> usize {
        self.pieces.len()
    }

    pub fn piece(&self, id: u32) -> Option<&Piece> {
        self.pieces.get(id as usize)
    }

    pub fn pieces(&self) -> &[Piece] {
        &self.pieces
    }

    pub fn text_id(&self, piece: &str) -> Option<u32> {
        self.text_ids.get(piece).copied()
    }

    pub fn special_id(&self, token: &str) -> Option<u32> {
        self.special_ids.get(token).copied()
    }

    pub fn language_id(&self, lang: Language) -> u32 {
        self.special_ids[&lang.token()]
    }

    pub fn protects_roles(&self) -> bool {
        self.protect_roles
    }

    pub fn has_byte_fallback(&self) -> bool {
        self.byte_ids.is_some()
    }

    /// Encodes a whole line.
    pub fn encode(&self, line: &str) -> Vec<u32> {
        let mut out = Vec::new();
        for segment in segments(line) {
            self.encode_segment_into(segment, &mut out);
        }
        out
    }

    /// Encodes one space-free segment (one linearized token).
    pub fn encode_segment(&self, segment: &str) -> Vec<u32> {
        let mut out = Vec::new();
        self.encode_segment_into(segment, &mut out);
        out
    }

    fn encode_segment_into(&self, segment: &str, out: &mut Vec<u32>) {
        if is_text_special(segment) {
            if let Some(&id) = self.special_ids.get(segment) {
                out.push(id);
                return;
            }
        }
        let whole = format!("{BOUNDARY}{segment}");
        if self.merges.is_empty() || (self.protect_roles && is_role(segment)) {
            if let Some(&id) = self.text_ids.get(&whole) {
                out.push(id);
                return;
            }
        }
        let mut symbols = self.initial_symbols(segment);
        self.apply_merges(&mut symbols);
        for sym in symbols {
            match sym {
                Sym::Text(s) => match self.text_ids.get(&s) {
                    Some(&id) => out.push(id),
                    None => {
                        for c in s.chars() {
                            match self.text_ids.get(c.encode_utf8(&mut [0; 4]) as &str) {
                                Some(&id) => out.push(id),
                                None => self.push_fallback(c, out),
                            }
                        }
                    }
                },
                Sym::Raw(c) => self.push_fallback(c, out),
            }
        }
    }

    fn push_fallback(&self, c: char, out: &mut Vec<u32>) {
        match &self.byte_ids {
            Some(bytes) => out.extend(c.encode_utf8(&mut [0; 4]).bytes().map(|b| bytes[b as usize])),
            None => out.push(UNK),
        }
    }

    fn initial_symbols(&self, segment: &str) -> Vec<Sym> {
        let mut symbols = Vec::with_capacity(segment.len() + 1);
        let mut chars = segment.chars();
        match chars.next() {
            None => symbols.push(Sym::Text(BOUNDARY_STR.to_string())),
            Some(BOUNDARY) => {
                symbols.push(Sym::Text(BOUNDARY_STR.to_string()));
                symbols.push(Sym::Raw(BOUNDARY));
            }
            Some(first) => {
                let joined = format!("{BOUNDARY}{first}");
                if self.text_ids.contains_key(&joined) {
                    symbols.push(Sym::Text(joined));
                } else {
                    symbols.push(Sym::Text(BOUNDARY_STR.to_string()));
                    symbols.push(Sym::Text(first.to_string()));
                }
            }
        }
        symbols.extend(chars.map(|c| {
            if c == BOUNDARY {
                Sym::Raw(c)
            } else {
                Sym::Text(c.to_string())
            }
        }));
        symbols
    }

    fn apply_merges(&self, symbols: &mut Vec<Sym>) {
        if self.ranks.is_empty() {
            return;
        }
        loop {
            let mut best: Option<(usize, usize)> = None;
            for i in 0..symbols.len().saturating_sub(1) {
                let (Sym::Text(a), Sym::Text(b)) = (&symbols[i], &symbols[i + 1]) else { continue };
                if let Some(&rank) = self.ranks.get(&(a.clone(), b.clone())) {
                    if best.is_none_or(|(r, _)| rank < r) {
                        best = Some((rank, i));
                    }
                }
            }
            let Some((rank, _)) = best else { return };
            let (left, right) = &self.merges[rank];
            let mut merged = Vec::with_capacity(symbols.len());
            let mut i = 0;
            while i < symbols.len() {
                if i + 1 < symbols.len() {
                    if let (Sym::Text(a), Sym::Text(b)) = (&symbols[i], &symbols[i + 1]) {
                        if a == left && b == right {
                            merged.push(Sym::Text(format!("{a}{b}")));
                            i += 2;
                            continue;
                        }
                    }
                }
                merged.push(symbols[i].clone());
                i += 1;
            }
            *symbols = merged;
        }
    }

    /// Inverse of [`BpeModel::encode`]: boundary markers become spaces,
    /// padding and sentence delimiters are dropped.
    pub fn decode(&self, ids: &[u32]) -> Result<String, SubwordError> {
        let mut bytes: Vec<u8> = Vec::new();
        for &id in ids {
            let piece = self.pieces.get(id as usize).ok_or(SubwordError::UnknownId(id))?;
            match piece {
                Piece::Special(s) => match s.as_str() {
                    PAD_TOKEN | BOS_TOKEN | EOS_TOKEN => {}
                    UNK_TOKEN => bytes.extend_from_slice(UNK_TOKEN.as_bytes()),
                    other => {
                        bytes.push(b' ');
                        bytes.extend_from_slice(other.as_bytes());
                    }
                },
                Piece::Byte(b) => bytes.push(*b),
                Piece::Text(s) => {
                    for c in s.chars() {
                        if c == BOUNDARY {
                            bytes.push(b' ');
                        } else {
                            bytes.extend_from_slice(c.encode_utf8(&mut [0; 4]).as_bytes());
                        }
                    }
                }
            }
        }
        let text = String::from_utf8_lossy(&bytes);
        Ok(text.strip_prefix(' ').unwrap_or(&text).to_string())
    }

    /// Writes the model file: `bpe v1 <n>` header, merges, then `#vocab`.
    pub fn to_text(&self) -> String {
        let mut out = format!("bpe v1 {}\n", self.merges.len());
        if self.protect_roles {
            out.push_str("#protect-roles\n");
        }
        for (left, right) in &self.merges {
            let _ = writeln!(out, "{left} {right}");
        }
        out.push_str("#vocab\n");
        for (id, piece) in self.pieces.iter().enumerate() {
            let _ = writeln!(out, "{} {id}", piece.name());
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, SubwordError> {
        let malformed = |line: usize, reason: &str| SubwordError::MalformedVocabFile {
            line,
            reason: reason.to_string(),
        };
        let lines: Vec<&str> = text.split('\n').collect();
        let header = lines.first().copied().unwrap_or_default();
        let count = header
            .strip_prefix("bpe v1 ")
            .and_then(|n| n.trim().parse::<usize>().ok())
            .ok_or_else(|| malformed(1, "expected `bpe v1 <num_merges>` header"))?;
        let mut at = 1;
        let protect_roles = lines.get(at) == Some(&"#protect-roles");
        if protect_roles {
            at += 1;
        }
        let mut merges = Vec::with_capacity(count);
        for _ in 0..count {
            let line = lines.get(at).ok_or_else(|| malformed(at + 1, "missing merge line"))?;
            let (l, r) = line
                .split_once(' ')
                .filter(|(l, r)| !l.is_empty() && !r.is_empty() && !r.contains(' '))
                .ok_or_else(|| malformed(at + 1, "expected `left right`"))?;
            merges.push((l.to_string(), r.to_string()));
            at += 1;
        }
        if lines.get(at) != Some(&"#vocab") {
            return Err(malformed(at + 1, "expected `#vocab`"));
        }
        at += 1;
        let mut pieces = Vec::new();
        let mut seen_bytes = [false; 256];
        let mut seen_specials = HashSet::new();
        let specials: HashSet<String> = special_tokens().into_iter().collect();
        for (offset, line) in lines[at..].iter().enumerate() {
            if line.is_empty() {
                continue;
            }
            let line_no = at + offset + 1;
            let (name, id) = line
                .rsplit_once(' ')
                .and_then(|(n, id)| Some((n, id.parse::<usize>().ok()?)))
                .ok_or_else(|| malformed(line_no, "expected `piece id`"))?;
            if id != pieces.len() {
                return Err(malformed(line_no, "ids must be dense and in order"));
            }
            let piece = match parse_byte_piece(name) {
                Some(b) if !seen_bytes[b as usize] => {
                    seen_bytes[b as usize] = true;
                    Piece::Byte(b)
                }
                _ if specials.contains(name) && seen_specials.insert(name.to_string()) => {
                    Piece::Special(name.to_string())
                }
                _ => Piece::Text(name.to_string()),
            };
            pieces.push(piece);
        }
        Ok(BpeModel::from_pieces(pieces, merges, protect_roles))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), SubwordError> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, SubwordError> {
        BpeModel::from_text(&fs::read_to_string(path)?)
    }
}

/// Loads an externally trained vocabulary: an optional `#merges` section of
/// `left right` lines, then `#vocab` followed by one piece per line (an
/// optional second column, such as a frequency, is ignored).  Special tokens
/// are prepended; specials listed in the file map onto them.
pub fn load_external_vocab(path: impl AsRef<Path>) -> Result<BpeModel, SubwordError> {
    external_vocab_from_text(&fs::read_to_string(path)?)
}

pub fn external_vocab_from_text(text: &str) -> Result<BpeModel, SubwordError> {
    let malformed = |line: usize, reason: &str| SubwordError::MalformedVocabFile {
        line,
        reason: reason.to_string(),
    };
    #[derive(PartialEq)]
    enum Section {
        Start,
        Merges,
        Vocab,
    }
    let specials = special_tokens();
    let mut pieces: Vec<Piece> = specials.iter().cloned().map(Piece::Special).collect();
    let mut seen: HashSet<String> = specials.iter().cloned().collect();
    let mut merges = Vec::new();
    let mut section = Section::Start;
    for (i, line) in text.split('\n').enumerate() {
        let line_no = i + 1;
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.trim().is_empty() {
            continue;
        }
        match line {
            "#merges" if section == Section::Start => {
                section = Section::Merges;
                continue;
            }
            "#vocab" if section != Section::Vocab => {
                section = Section::Vocab;
                continue;
            }
            _ => {}
        }
        match section {
            Section::Start => return Err(malformed(line_no, "expected `#merges` or `#vocab`")),
            Section::Merges => {
                let parts: Vec<&str> = line.split(' ').collect();
                if parts.len() != 2 || parts.iter().any(|p| p.is_empty()) {
                    return Err(malformed(line_no, "expected `left right`"));
                }
                merges.push((parts[0].to_string(), parts[1].to_string()));
            }
            Section::Vocab => {
                let mut parts = line.split(' ');
                let name = parts.next().unwrap_or_default();
                let rest: Vec<&str> = parts.collect();
                if name.is_empty() || rest.len() > 1 || rest.iter().any(|c| c.parse::<f64>().is_err()) {
                    return Err(malformed(line_no, "expected `piece [count]`"));
                }
                if specials.iter().any(|s| s == name) {
                    continue;
                }
                if !seen.insert(name.to_string()) {
                    return Err(malformed(line_no, &format!("duplicate piece `{name}`")));
                }
                pieces.push(Piece::Text(name.to_string()));
            }
        }
    }
    if section != Section::Vocab {
        return Err(malformed(text.split('\n').count(), "missing `#vocab` section"));
    }
    Ok(BpeModel::from_pieces(pieces, merges, false))
}

#[derive(PartialEq, Eq)]
struct Candidate {
    count: i64,
    merged: Reverse<String>,
    left: Reverse<String>,
    pair: (u32, u32),
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.count, &self.merged, &self.left, self.pair).cmp(&(other.count, &other.merged, &other.left, other.pair))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Greedy BPE training: repeatedly merge the most frequent adjacent pair,
/// breaking ties by the lexicographically smallest merged piece.
pub fn train_bpe<S: AsRef<str>>(corpus: &[S], options: TrainOptions) -> Result<BpeModel, SubwordError> {
    if corpus.is_empty() {
        return Err(SubwordError::EmptyCorpus);
    }
    const RAW: u32 = u32::MAX;
    let mut symbols: Vec<String> = Vec::new();
    let mut symbol_ids: HashMap<String, u32> = HashMap::new();
    let mut intern = |s: String, symbols: &mut Vec<String>| -> u32 {
        *symbol_ids.entry(s.clone()).or_insert_with(|| {
            symbols.push(s);
            symbols.len() as u32 - 1
        })
    };
    intern(BOUNDARY_STR.to_string(), &mut symbols);

    let mut word_counts: HashMap<&str, i64> = HashMap::new();
    let mut protected: Vec<String> = Vec::new();
    let mut protected_seen = HashSet::new();
    for line in corpus {
        for segment in segments(line.as_ref()) {
            if is_text_special(segment) {
                continue;
            }
            if options.protect_roles && is_role(segment) {
                if protected_seen.insert(segment) {
                    protected.push(format!("{BOUNDARY}{segment}"));
                }
                continue;
            }
            *word_counts.entry(segment).or_default() += 1;
        }
    }
    let mut word_list: Vec<(&str, i64)> = word_counts.into_iter().collect();
    word_list.sort();

    let mut words: Vec<Vec<u32>> = Vec::with_capacity(word_list.len());
    let freqs: Vec<i64> = word_list.iter().map(|(_, c)| *c).collect();
    for (word, _) in &word_list {
        let mut syms = Vec::new();
        let mut chars = word.chars();
        match chars.next() {
            None => syms.push(intern(BOUNDARY_STR.to_string(), &mut symbols)),
            Some(BOUNDARY) => {
                syms.push(intern(BOUNDARY_STR.to_string(), &mut symbols));
                syms.push(RAW);
            }
            Some(c) => syms.push(intern(format!("{BOUNDARY}{c}"), &mut symbols)),
        }
        for c in chars {
            syms.push(if c == BOUNDARY { RAW } else { intern(c.to_string(), &mut symbols) });
        }
        words.push(syms);
    }
    let mut alphabet: Vec<String> = symbols.clone();
    alphabet.sort();

    let mut pair_counts: HashMap<(u32, u32), i64> = HashMap::new();
    let mut pair_words: HashMap<(u32, u32), HashSet<usize>> = HashMap::new();
    for (w, syms) in words.iter().enumerate() {
        for pair in syms.windows(2) {
            if pair[0] == RAW || pair[1] == RAW {
                continue;
            }
            let key = (pair[0], pair[1]);
            *pair_counts.entry(key).or_default() += freqs[w];
            pair_words.entry(key).or_default().insert(w);
        }
    }
    let candidate = |pair: (u32, u32), count: i64, symbols: &[String]| Candidate {
        count,
        merged: Reverse(format!("{}{}", symbols[pair.0 as usize], symbols[pair.1 as usize])),
        left: Reverse(symbols[pair.0 as usize].clone()),
        pair,
    };
    let mut heap: BinaryHeap<Candidate> = pair_counts
        .iter()
        .map(|(&pair, &count)| candidate(pair, count, &symbols))
        .collect();

    let mut merges: Vec<(String, String)> = Vec::new();
    while merges.len() < options.num_merges {
        let Some(top) = heap.pop() else { break };
        let current = pair_counts.get(&top.pair).copied().unwrap_or(0);
        if current != top.count {
            continue;
        }
        if current <= 0 {
            break;
        }
        let (a, b) = top.pair;
        let merged = intern(top.merged.0.clone(), &mut symbols);
        merges.push((symbols[a as usize].clone(), symbols[b as usize].clone()));

        let affected: Vec<usize> = pair_words.remove(&top.pair).unwrap_or_default().into_iter().collect();
        let mut touched: HashSet<(u32, u32)> = HashSet::new();
        for w in affected {
            let freq = freqs[w];
            let old = std::mem::take(&mut words[w]);
            for pair in old.windows(2) {
                if pair[0] != RAW && pair[1] != RAW {
                    let key = (pair[0], pair[1]);
                    *pair_counts.entry(key).or_default() -= freq;
                    touched.insert(key);
                }
            }
            let mut new = Vec::with_capacity(old.len());
            let mut i = 0;
            while i < old.len() {
                if i + 1 < old.len() && old[i] == a && old[i + 1] == b {
                    new.push(merged);
                    i += 2;
                } else {
                    new.push(old[i]);
                    i += 1;
                }
            }
            for pair in new.windows(2) {
                if pair[0] != RAW && pair[1] != RAW {
                    let key = (pair[0], pair[1]);
                    *pair_counts.entry(key).or_default() += freq;
                    pair_words.entry(key).or_default().insert(w);
                    touched.insert(key);
                }
            }
            words[w] = new;
        }
        pair_counts.remove(&top.pair);
        let mut touched: Vec<_> = touched.into_iter().collect();
        touched.sort_unstable();
        for key in touched {
            match pair_counts.get(&key).copied() {
                Some(count) if count > 0 => heap.push(candidate(key, count, &symbols)),
                Some(_) => {
                    pair_counts.remove(&key);
                }
                None => {}
            }
        }
    }

    let mut pieces: Vec<Piece> = special_tokens().into_iter().map(Piece::Special).collect();
    pieces.extend((0..=255u8).map(Piece::Byte));
    let mut text_seen = HashSet::new();
    protected.sort();
    let merged_pieces = merges.iter().map(|(l, r)| format!("{l}{r}"));
    for piece in alphabet.into_iter().chain(protected).chain(merged_pieces) {
        if text_seen.insert(piece.clone()) {
            pieces.push(Piece::Text(piece));
        }
    }
    Ok(BpeModel::from_pieces(pieces, merges, options.protect_roles))
}
