//! Aligned AMR/text ingestion, the split protocol, multilingual
//! concatenation and token-count batching.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::amr::parse_penman;
use crate::lang::Language;
use crate::linearize::{linearize_with_features, prepend_language_token, FeatureBuckets, FeaturedTokens};
use crate::subword::{BpeModel, BOS, EOS, PAD};

pub const DEFAULT_DERIVE_N: usize = 1000;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("file not found: {0}")]
    FileNotFound(PathBuf),
    #[error("{amr} has {amr_lines} lines but {text} has {text_lines}")]
    LineCountMismatch {
        amr: PathBuf,
        text: PathBuf,
        amr_lines: usize,
        text_lines: usize,
    },
    #[error("store has {have} examples; derive mode with n={n} needs at least {}", 2 * n + 1)]
    StoreTooSmall { have: usize, n: usize },
    #[error("cannot split an empty store")]
    EmptyStore,
    #[error("language `{0}` was not ingested")]
    UnknownLanguage(String),
    #[error("no languages selected")]
    EmptySubset,
    #[error("example at {language} line {line} has length {len}, above max_tokens {max_tokens}")]
    ExampleTooLong {
        language: Language,
        line: usize,
        len: usize,
        max_tokens: usize,
    },
    #[error("manifest line {line}: {reason}")]
    MalformedManifest { line: usize, reason: String },
    #[error("dataset file line {line}: {reason}")]
    MalformedDataset { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Encoder-side ids: subword pieces with the features of their source token.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct EncoderInput {
    pub piece_ids: Vec<u32>,
    pub depth_ids: Vec<u32>,
    pub subgraph_ids: Vec<u32>,
}

impl EncoderInput {
    pub fn len(&self) -> usize {
        self.piece_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.piece_ids.is_empty()
    }
}

/// Splits every linearized token into subword pieces; each piece inherits
/// the depth and subgraph id of its token.
pub fn encode_source(tokens: &FeaturedTokens, bpe: &BpeModel) -> EncoderInput {
    let mut out = EncoderInput::default();
    for ((token, &d), &s) in tokens.tokens.iter().zip(&tokens.depth_ids).zip(&tokens.subgraph_ids) {
        let pieces = bpe.encode_segment(token);
        out.depth_ids.extend(std::iter::repeat_n(d, pieces.len()));
        out.subgraph_ids.extend(std::iter::repeat_n(s, pieces.len()));
        out.piece_ids.extend(pieces);
    }
    out
}

/// `bos text eos` on the decoder side.
pub fn encode_target(text: &str, bpe: &BpeModel) -> Vec<u32> {
    let mut ids = vec![BOS];
    ids.extend(bpe.encode(text));
    ids.push(EOS);
    ids
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParallelExample {
    pub src_ids: Vec<u32>,
    pub src_depth_ids: Vec<u32>,
    pub src_subgraph_ids: Vec<u32>,
    pub tgt_ids: Vec<u32>,
    pub language: Language,
    /// 1-based line in the originating file.
    pub line: usize,
}

impl ParallelExample {
    pub fn encoder_input(&self) -> EncoderInput {
        EncoderInput {
            piece_ids: self.src_ids.clone(),
            depth_ids: self.src_depth_ids.clone(),
            subgraph_ids: self.src_subgraph_ids.clone(),
        }
    }

    /// Batching length: the longer of the two sides.
    pub fn len(&self) -> usize {
        self.src_ids.len().max(self.tgt_ids.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SplitKind {
    Train,
    Valid,
    Test,
    Derive,
}

impl std::str::FromStr for SplitKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(SplitKind::Train),
            "valid" => Ok(SplitKind::Valid),
            "test" => Ok(SplitKind::Test),
            "derive" => Ok(SplitKind::Derive),
            other => Err(format!("unknown split `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub language: Language,
    pub amr_file: PathBuf,
    pub text_file: PathBuf,
    pub split: SplitKind,
}

/// Line-oriented manifest: `lang<TAB>amr_path<TAB>text_path<TAB>split`, plus
/// an optional `derive_n=N` line.  Relative paths resolve against the
/// manifest's directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub derive_n: usize,
}

impl DatasetManifest {
    pub fn parse(text: &str, base: &Path) -> Result<Self, CorpusError> {
        let mut entries = Vec::new();
        let mut derive_n = DEFAULT_DERIVE_N;
        for (i, line) in text.lines().enumerate() {
            let malformed = |reason: String| CorpusError::MalformedManifest { line: i + 1, reason };
            let line = line.trim_end();
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(n) = line.strip_prefix("derive_n=") {
                derive_n = n.trim().parse().map_err(|_| malformed(format!("bad derive_n `{n}`")))?;
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let [lang, amr, text, split] = fields[..] else {
                return Err(malformed(format!("expected 4 tab-separated fields, got {}", fields.len())));
            };
            entries.push(ManifestEntry {
                language: Language::new(lang).map_err(|e| malformed(e.to_string()))?,
                amr_file: base.join(amr),
                text_file: base.join(text),
                split: split.parse().map_err(malformed)?,
            });
        }
        Ok(DatasetManifest { entries, derive_n })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CorpusError> {
        let path = path.as_ref();
        let text = read_file(path)?;
        DatasetManifest::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }
}

fn read_file(path: &Path) -> Result<String, CorpusError> {
    fs::read_to_string(path).map_err(|e| match e.kind() {
        io::ErrorKind::NotFound => CorpusError::FileNotFound(path.to_path_buf()),
        _ => CorpusError::Io(e),
    })
}

fn data_lines(text: &str) -> Vec<&str> {
    let mut lines: Vec<&str> = text.split('\n').map(|l| l.strip_suffix('\r').unwrap_or(l)).collect();
    if lines.last() == Some(&"") {
        lines.pop();
    }
    lines
}

/// Vocabularies and feature limits used while ingesting.
#[derive(Debug, Clone, Copy)]
pub struct Encoders<'a> {
    pub source: &'a BpeModel,
    pub target: &'a BpeModel,
    pub buckets: FeatureBuckets,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DroppedLine {
    pub file: PathBuf,
    pub line: usize,
    pub reason: String,
}

/// Examples of one manifest entry.
#[derive(Debug, Clone)]
pub struct IngestedEntry {
    pub entry: ManifestEntry,
    pub examples: Vec<ParallelExample>,
}

#[derive(Debug, Clone, Default)]
pub struct Ingested {
    pub entries: Vec<IngestedEntry>,
    pub dropped: Vec<DroppedLine>,
}

/// Converts one aligned file pair; unparseable AMR lines are skipped and
/// reported rather than aborting.
pub fn ingest_pair(
    amr_text: &str,
    target_text: &str,
    language: Language,
    encoders: Encoders<'_>,
    file: &Path,
) -> (Vec<ParallelExample>, Vec<DroppedLine>) {
    let mut examples = Vec::new();
    let mut dropped = Vec::new();
    for (i, (amr, text)) in data_lines(amr_text).into_iter().zip(data_lines(target_text)).enumerate() {
        let lin = parse_penman(amr)
            .map_err(|e| e.to_string())
            .and_then(|g| linearize_with_features(&g, encoders.buckets).map_err(|e| e.to_string()))
            .and_then(|lin| prepend_language_token(lin, language.code()).map_err(|e| e.to_string()));
        match lin {
            Ok(lin) => {
                let src = encode_source(&lin.featured(), encoders.source);
                examples.push(ParallelExample {
                    src_ids: src.piece_ids,
                    src_depth_ids: src.depth_ids,
                    src_subgraph_ids: src.subgraph_ids,
                    tgt_ids: encode_target(text, encoders.target),
                    language,
                    line: i + 1,
                });
            }
            Err(reason) => {
                log::warn!("dropping {}:{}: {reason}", file.display(), i + 1);
                dropped.push(DroppedLine {
                    file: file.to_path_buf(),
                    line: i + 1,
                    reason,
                });
            }
        }
    }
    (examples, dropped)
}

pub fn ingest(manifest: &DatasetManifest, encoders: Encoders<'_>) -> Result<Ingested, CorpusError> {
    let mut out = Ingested::default();
    for entry in &manifest.entries {
        let amr_text = read_file(&entry.amr_file)?;
        let target_text = read_file(&entry.text_file)?;
        let (amr_lines, text_lines) = (data_lines(&amr_text).len(), data_lines(&target_text).len());
        if amr_lines != text_lines {
            return Err(CorpusError::LineCountMismatch {
                amr: entry.amr_file.clone(),
                text: entry.text_file.clone(),
                amr_lines,
                text_lines,
            });
        }
        let (examples, dropped) = ingest_pair(&amr_text, &target_text, entry.language, encoders, &entry.amr_file);
        log::info!(
            "{} {}: {} examples, {} dropped",
            entry.language,
            entry.amr_file.display(),
            examples.len(),
            dropped.len()
        );
        out.dropped.extend(dropped);
        out.entries.push(IngestedEntry {
            entry: entry.clone(),
            examples,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitMode {
    /// A provided test file halved: even indices to valid, odd to test.
    CommonTest,
    /// The last `2n` examples carved off: first `n` valid, last `n` test.
    Derive { n: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Splits<T> {
    pub train: Vec<T>,
    pub valid: Vec<T>,
    pub test: Vec<T>,
}

impl<T> Default for Splits<T> {
    fn default() -> Self {
        Splits {
            train: Vec::new(),
            valid: Vec::new(),
            test: Vec::new(),
        }
    }
}

pub fn split<T: Clone>(store: &[T], mode: SplitMode) -> Result<Splits<T>, CorpusError> {
    if store.is_empty() {
        return Err(CorpusError::EmptyStore);
    }
    match mode {
        SplitMode::CommonTest => Ok(Splits {
            train: Vec::new(),
            valid: store.iter().step_by(2).cloned().collect(),
            test: store.iter().skip(1).step_by(2).cloned().collect(),
        }),
        SplitMode::Derive { n } => {
            if store.len() < 2 * n + 1 {
                return Err(CorpusError::StoreTooSmall { have: store.len(), n });
            }
            let cut = store.len() - 2 * n;
            Ok(Splits {
                train: store[..cut].to_vec(),
                valid: store[cut..cut + n].to_vec(),
                test: store[cut + n..].to_vec(),
            })
        }
    }
}

/// Applies the split protocol to every manifest entry and groups the results
/// by language.
pub fn split_ingested(
    ingested: &Ingested,
    derive_n: usize,
) -> Result<BTreeMap<Language, Splits<ParallelExample>>, CorpusError> {
    let mut out: BTreeMap<Language, Splits<ParallelExample>> = BTreeMap::new();
    for IngestedEntry { entry, examples } in &ingested.entries {
        let splits = out.entry(entry.language).or_default();
        match entry.split {
            SplitKind::Train => splits.train.extend(examples.iter().cloned()),
            SplitKind::Valid => splits.valid.extend(examples.iter().cloned()),
            SplitKind::Test => {
                let s = split(examples, SplitMode::CommonTest)?;
                splits.valid.extend(s.valid);
                splits.test.extend(s.test);
            }
            SplitKind::Derive => {
                let s = split(examples, SplitMode::Derive { n: derive_n })?;
                splits.train.extend(s.train);
                splits.valid.extend(s.valid);
                splits.test.extend(s.test);
            }
        }
    }
    Ok(out)
}

/// Concatenates the selected languages, in the order given.
pub fn concat_multilingual<T: Clone>(
    stores: &BTreeMap<Language, Vec<T>>,
    languages: &[Language],
) -> Result<Vec<T>, CorpusError> {
    if languages.is_empty() {
        return Err(CorpusError::EmptySubset);
    }
    let mut out = Vec::new();
    for lang in languages {
        let store = stores
            .get(lang)
            .ok_or_else(|| CorpusError::UnknownLanguage(lang.code().to_string()))?;
        out.extend(store.iter().cloned());
    }
    Ok(out)
}

/// Stable digest of a list of examples, logged so reruns can be compared.
pub fn fingerprint(examples: &[ParallelExample]) -> String {
    let mut hasher = Sha256::new();
    for ex in examples {
        hasher.update(ex.language.code().as_bytes());
        for ids in [&ex.src_ids, &ex.src_depth_ids, &ex.src_subgraph_ids, &ex.tgt_ids] {
            hasher.update((ids.len() as u32).to_le_bytes());
            for id in ids {
                hasher.update(id.to_le_bytes());
            }
        }
    }
    hasher.finalize().iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Indices into a dataset forming one batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub indices: Vec<usize>,
}

/// Token-count batching: a seeded shuffle, a stable sort by length so similar
/// lengths share a batch, greedy filling under `max_tokens`, then a seeded
/// shuffle of batch order.
pub fn make_batches(dataset: &[ParallelExample], max_tokens: usize, seed: u64) -> Result<Vec<Batch>, CorpusError> {
    if let Some(ex) = dataset.iter().find(|ex| ex.len() > max_tokens) {
        return Err(CorpusError::ExampleTooLong {
            language: ex.language,
            line: ex.line,
            len: ex.len(),
            max_tokens,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut rng);
    order.sort_by_key(|&i| dataset[i].len());

    let mut batches = Vec::new();
    let mut current: Vec<usize> = Vec::new();
    let mut longest = 0;
    for i in order {
        let len = dataset[i].len().max(longest);
        if !current.is_empty() && len * (current.len() + 1) > max_tokens {
            batches.push(Batch {
                indices: std::mem::take(&mut current),
            });
            longest = 0;
        }
        longest = longest.max(dataset[i].len());
        current.push(i);
    }
    if !current.is_empty() {
        batches.push(Batch { indices: current });
    }
    batches.shuffle(&mut rng);
    Ok(batches)
}

pub fn language_histogram(dataset: &[ParallelExample], batch: &Batch) -> BTreeMap<Language, usize> {
    let mut hist = BTreeMap::new();
    for &i in &batch.indices {
        *hist.entry(dataset[i].language).or_default() += 1;
    }
    hist
}

/// A padded, row-major batch ready for the model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PaddedBatch {
    pub size: usize,
    pub src_len: usize,
    pub src_ids: Vec<u32>,
    pub src_depth_ids: Vec<u32>,
    pub src_subgraph_ids: Vec<u32>,
    pub src_lens: Vec<usize>,
    /// Decoder input: `tgt_ids` without the final token.
    pub tgt_len: usize,
    pub tgt_in: Vec<u32>,
    /// Decoder target: `tgt_ids` without the leading bos.
    pub tgt_out: Vec<u32>,
    pub tgt_lens: Vec<usize>,
}

pub fn collate<'a>(examples: impl IntoIterator<Item = &'a ParallelExample>) -> PaddedBatch {
    let examples: Vec<&ParallelExample> = examples.into_iter().collect();
    let size = examples.len();
    let src_len = examples.iter().map(|e| e.src_ids.len()).max().unwrap_or(0);
    let tgt_len = examples.iter().map(|e| e.tgt_ids.len().saturating_sub(1)).max().unwrap_or(0);
    let mut b = PaddedBatch {
        size,
        src_len,
        src_ids: vec![PAD; size * src_len],
        src_depth_ids: vec![0; size * src_len],
        src_subgraph_ids: vec![0; size * src_len],
        src_lens: Vec::with_capacity(size),
        tgt_len,
        tgt_in: vec![PAD; size * tgt_len],
        tgt_out: vec![PAD; size * tgt_len],
        tgt_lens: Vec::with_capacity(size),
    };
    for (r, ex) in examples.iter().enumerate() {
        let s = r * src_len;
        let n = ex.src_ids.len();
        b.src_ids[s..s + n].copy_from_slice(&ex.src_ids);
        b.src_depth_ids[s..s + n].copy_from_slice(&ex.src_depth_ids);
        b.src_subgraph_ids[s..s + n].copy_from_slice(&ex.src_subgraph_ids);
        b.src_lens.push(n);
        let t = r * tgt_len;
        let m = ex.tgt_ids.len().saturating_sub(1);
        b.tgt_in[t..t + m].copy_from_slice(&ex.tgt_ids[..m]);
        b.tgt_out[t..t + m].copy_from_slice(&ex.tgt_ids[1..]);
        b.tgt_lens.push(m);
    }
    b
}

fn join_ids(ids: &[u32]) -> String {
    ids.iter().map(u32::to_string).collect::<Vec<_>>().join(" ")
}

/// One example per line: `lang<TAB>line<TAB>src<TAB>depth<TAB>subgraph<TAB>tgt`.
pub fn write_examples(path: impl AsRef<Path>, examples: &[ParallelExample]) -> Result<(), CorpusError> {
    let mut out = String::new();
    for ex in examples {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}",
            ex.language,
            ex.line,
            join_ids(&ex.src_ids),
            join_ids(&ex.src_depth_ids),
            join_ids(&ex.src_subgraph_ids),
            join_ids(&ex.tgt_ids)
        );
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_examples(path: impl AsRef<Path>) -> Result<Vec<ParallelExample>, CorpusError> {
    let text = read_file(path.as_ref())?;
    let mut out = Vec::new();
    for (i, line) in data_lines(&text).into_iter().enumerate() {
        let malformed = |reason: &str| CorpusError::MalformedDataset {
            line: i + 1,
            reason: reason.to_string(),
        };
        let fields: Vec<&str> = line.split('\t').collect();
        let [lang, line_no, src, depth, sub, tgt] = fields[..] else {
            return Err(malformed("expected 6 tab-separated fields"));
        };
        let ids = |s: &str| -> Result<Vec<u32>, CorpusError> {
            s.split_whitespace()
                .map(|t| t.parse().map_err(|_| malformed("bad id")))
                .collect()
        };
        let ex = ParallelExample {
            language: Language::new(lang).map_err(|e| malformed(&e.to_string()))?,
            line: line_no.parse().map_err(|_| malformed("bad line number"))?,
            src_ids: ids(src)?,
            src_depth_ids: ids(depth)?,
            src_subgraph_ids: ids(sub)?,
            tgt_ids: ids(tgt)?,
        };
        if ex.src_ids.len() != ex.src_depth_ids.len() || ex.src_ids.len() != ex.src_subgraph_ids.len() {
            return Err(malformed("source id rows differ in length"));
        }
        if ex.tgt_ids.first() != Some(&BOS) || ex.tgt_ids.last() != Some(&EOS) || ex.tgt_ids.len() < 2 {
            return Err(malformed("target must start with bos and end with eos"));
        }
        out.push(ex);
    }
    Ok(out)
}

/// Checks that no two splits share an example (by identity of content).
pub fn splits_disjoint(splits: &Splits<ParallelExample>) -> bool {
    let key = |e: &ParallelExample| (e.language, e.line, e.src_ids.clone(), e.tgt_ids.clone());
    let mut seen = HashSet::new();
    splits
        .train
        .iter()
        .chain(&splits.valid)
        .chain(&splits.test)
        .all(|e| seen.insert(key(e)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::subword::{train_bpe, TrainOptions};

    fn example(lang: &str, line: usize, src: usize, tgt: usize) -> ParallelExample {
        ParallelExample {
            src_ids: vec![5; src],
            src_depth_ids: vec![0; src],
            src_subgraph_ids: vec![0; src],
            tgt_ids: {
                let mut t = vec![7; tgt];
                t[0] = BOS;
                t[tgt - 1] = EOS;
                t
            },
            language: Language::new(lang).unwrap(),
            line,
        }
    }

    fn bpe() -> BpeModel {
        train_bpe(&["( want-01 :ARG0 ( boy ) )", "the boy wants"], TrainOptions::default()).unwrap()
    }

    #[test]
    fn ingests_and_drops_bad_lines() {
        let m = bpe();
        let enc = Encoders {
            source: &m,
            target: &m,
            buckets: FeatureBuckets::default(),
        };
        let amr = "(w / want-01 :ARG0 (b / boy))\n(b / boy)\n(x / y :ARG0 q)\n";
        let text = "the boy wants\nboy\nbroken\n";
        let de = Language::new("de").unwrap();
        let (examples, dropped) = ingest_pair(amr, text, de, enc, Path::new("a.amr"));
        assert_eq!(examples.len(), 2);
        assert_eq!(dropped.len(), 1);
        assert_eq!(dropped[0].line, 3);
        let ex = &examples[0];
        assert_eq!(ex.src_ids[0], m.language_id(de));
        assert_eq!(ex.src_ids.len(), ex.src_depth_ids.len());
        assert_eq!(ex.tgt_ids.first(), Some(&BOS));
        assert_eq!(ex.tgt_ids.last(), Some(&EOS));
    }

    #[test]
    fn split_modes() {
        let store: Vec<usize> = (0..10).collect();
        let s = split(&store, SplitMode::CommonTest).unwrap();
        assert_eq!(s.valid, vec![0, 2, 4, 6, 8]);
        assert_eq!(s.test, vec![1, 3, 5, 7, 9]);

        let store: Vec<usize> = (0..100).collect();
        let s = split(&store, SplitMode::Derive { n: 10 }).unwrap();
        assert_eq!((s.train.len(), s.valid.len(), s.test.len()), (80, 10, 10));
        assert_eq!(s.valid[0], 80);
        assert_eq!(s.test[0], 90);

        let store: Vec<usize> = (0..15).collect();
        assert!(matches!(
            split(&store, SplitMode::Derive { n: 10 }),
            Err(CorpusError::StoreTooSmall { have: 15, n: 10 })
        ));
    }

    #[test]
    fn concatenates_subsets() {
        let de = Language::new("de").unwrap();
        let fr = Language::new("fr").unwrap();
        let mut stores = BTreeMap::new();
        stores.insert(de, vec![example("de", 1, 3, 3); 3]);
        stores.insert(fr, vec![example("fr", 1, 3, 3); 3]);
        let all = concat_multilingual(&stores, &[de, fr]).unwrap();
        assert_eq!(all.len(), 6);
        assert_eq!(concat_multilingual(&stores, &[de]).unwrap().len(), 3);
        assert!(matches!(concat_multilingual(&stores, &[]), Err(CorpusError::EmptySubset)));
        let it = Language::new("it").unwrap();
        assert!(matches!(
            concat_multilingual(&stores, &[it]),
            Err(CorpusError::UnknownLanguage(_))
        ));
    }

    #[test]
    fn batching_by_token_count() {
        let data: Vec<_> = (0..4).map(|i| example("de", i + 1, 10, 10)).collect();
        assert_eq!(make_batches(&data, 40, 1).unwrap().len(), 1);
        let b = make_batches(&data, 20, 1).unwrap();
        assert_eq!(b.len(), 2);
        assert!(b.iter().all(|b| b.indices.len() == 2));

        let long = vec![example("de", 7, 50, 4)];
        match make_batches(&long, 40, 1) {
            Err(CorpusError::ExampleTooLong { line: 7, len: 50, .. }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn collate_pads_and_shifts() {
        let a = example("de", 1, 3, 4);
        let b = example("de", 2, 2, 3);
        let p = collate([&a, &b]);
        assert_eq!((p.src_len, p.tgt_len), (3, 3));
        assert_eq!(p.src_ids[3..], [5, 5, PAD]);
        assert_eq!(p.tgt_in[..3], [BOS, 7, 7]);
        assert_eq!(p.tgt_out[..3], [7, 7, EOS]);
        assert_eq!(p.tgt_out[3..], [7, EOS, PAD]);
        assert_eq!(p.tgt_lens, vec![3, 2]);
    }

    #[test]
    fn manifest_parsing() {
        let m = DatasetManifest::parse(
            "# comment\nderive_n=5\nde\tde.amr\tde.txt\tderive\nfr\tfr.amr\tfr.txt\ttest\n",
            Path::new("/data"),
        )
        .unwrap();
        assert_eq!(m.derive_n, 5);
        assert_eq!(m.entries[0].amr_file, Path::new("/data/de.amr"));
        assert_eq!(m.entries[1].split, SplitKind::Test);
        assert!(DatasetManifest::parse("de\tx\ty", Path::new(".")).is_err());
        assert!(DatasetManifest::parse("zz\tx\ty\ttrain", Path::new(".")).is_err());
    }

    #[test]
    fn dataset_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.tsv");
        let data = vec![example("de", 1, 4, 5), example("fr", 9, 2, 2)];
        write_examples(&path, &data).unwrap();
        assert_eq!(read_examples(&path).unwrap(), data);
        assert_eq!(fingerprint(&data).len(), 64);
    }
}
