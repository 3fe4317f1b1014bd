//! Labeled text corpora with disjoint train/val/test class splits.
//!
//! Documents are tokenized once at load time with the hashing trick: every
//! whitespace-separated word is mapped to `fnv1a64(word) mod V`. A document
//! whose token sequence comes out empty is rejected, since it has no
//! mean-pooled representation.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use unicode_general_category::{get_general_category, GeneralCategory};

/// Token id: a hash bucket in `[0, V)`.
pub type TokenId = u32;

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: malformed record: {message}")]
    Malformed {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}: malformed splits file: {message}")]
    MalformedSplits { path: PathBuf, message: String },
    #[error("duplicate document id {0:?}")]
    DuplicateId(String),
    #[error("class {0} in two splits")]
    ClassInTwoSplits(String),
    #[error("class {0} appears in the corpus but in no split")]
    UnassignedClass(String),
    #[error("class {0} is listed in the splits but has no documents")]
    ClassWithoutDocuments(String),
    #[error("split {0} is empty")]
    EmptySplit(Split),
    #[error("documents with empty tokenization: {}", .0.join(", "))]
    EmptyDocuments(Vec<String>),
    #[error("tokenizer bucket_count must be at least 2, got {0}")]
    InvalidBucketCount(u32),
    #[error("unknown document id {0:?}")]
    UnknownId(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!(
                "unknown split {other:?} (expected train, val or test)"
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub text: String,
    pub label: String,
}

/// Class-name sets of the three splits.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: BTreeSet<String>,
    pub val: BTreeSet<String>,
    pub test: BTreeSet<String>,
}

impl SplitSpec {
    pub fn classes(&self, split: Split) -> &BTreeSet<String> {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    /// The split a class belongs to, if any.
    pub fn split_of(&self, class: &str) -> Option<Split> {
        Split::ALL
            .into_iter()
            .find(|&s| self.classes(s).contains(class))
    }

    /// Checks that the splits are non-empty and pairwise disjoint.
    pub fn validate(&self) -> Result<(), CorpusError> {
        for split in Split::ALL {
            if self.classes(split).is_empty() {
                return Err(CorpusError::EmptySplit(split));
            }
        }
        let mut seen = BTreeSet::new();
        for split in Split::ALL {
            for class in self.classes(split) {
                if !seen.insert(class.as_str()) {
                    return Err(CorpusError::ClassInTwoSplits(class.clone()));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenizerConfig {
    pub bucket_count: u32,
    pub lowercase: bool,
    pub strip_punct: bool,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self {
            bucket_count: 4096,
            lowercase: true,
            strip_punct: true,
        }
    }
}

impl TokenizerConfig {
    pub fn with_buckets(bucket_count: u32) -> Self {
        Self {
            bucket_count,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.bucket_count < 2 {
            return Err(CorpusError::InvalidBucketCount(self.bucket_count));
        }
        Ok(())
    }
}

const FNV_OFFSET_BASIS: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// 64-bit FNV-1a over raw bytes.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET_BASIS, |hash, &b| {
        (hash ^ u64::from(b)).wrapping_mul(FNV_PRIME)
    })
}

fn is_punctuation(c: char) -> bool {
    matches!(
        get_general_category(c),
        GeneralCategory::ConnectorPunctuation
            | GeneralCategory::DashPunctuation
            | GeneralCategory::OpenPunctuation
            | GeneralCategory::ClosePunctuation
            | GeneralCategory::InitialPunctuation
            | GeneralCategory::FinalPunctuation
            | GeneralCategory::OtherPunctuation
    )
}

/// Normalized word strings, before hashing. Empty words are dropped.
pub fn tokenize_words(text: &str, tok: &TokenizerConfig) -> Vec<String> {
    text.split_whitespace()
        .filter_map(|raw| {
            let word = if tok.lowercase {
                raw.to_lowercase()
            } else {
                raw.to_owned()
            };
            let word = if tok.strip_punct {
                word.trim_matches(is_punctuation).to_owned()
            } else {
                word
            };
            (!word.is_empty()).then_some(word)
        })
        .collect()
}

pub fn hash_word(word: &str, bucket_count: u32) -> TokenId {
    (fnv1a64(word.as_bytes()) % u64::from(bucket_count)) as TokenId
}

/// Maps text to hash-bucket ids in `[0, V)`, preserving word order.
pub fn tokenize(text: &str, tok: &TokenizerConfig) -> Vec<TokenId> {
    tokenize_words(text, tok)
        .iter()
        .map(|w| hash_word(w, tok.bucket_count))
        .collect()
}

/// A validated, immutable corpus.
#[derive(Clone, Debug)]
pub struct Corpus {
    documents: Vec<Document>,
    tokens: Vec<Vec<TokenId>>,
    splits: SplitSpec,
    tokenizer: TokenizerConfig,
    /// class name -> positions into `documents`, in load order
    index: BTreeMap<String, Vec<usize>>,
    positions: HashMap<String, usize>,
}

impl Corpus {
    pub fn new(
        documents: Vec<Document>,
        splits: SplitSpec,
        tokenizer: TokenizerConfig,
    ) -> Result<Self, CorpusError> {
        tokenizer.validate()?;
        splits.validate()?;

        let mut positions = HashMap::with_capacity(documents.len());
        let mut index: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        let mut tokens = Vec::with_capacity(documents.len());
        let mut empty = Vec::new();
        for (pos, doc) in documents.iter().enumerate() {
            if positions.insert(doc.id.clone(), pos).is_some() {
                return Err(CorpusError::DuplicateId(doc.id.clone()));
            }
            let ids = tokenize(&doc.text, &tokenizer);
            if ids.is_empty() {
                empty.push(doc.id.clone());
            }
            tokens.push(ids);
            index.entry(doc.label.clone()).or_default().push(pos);
        }
        if !empty.is_empty() {
            return Err(CorpusError::EmptyDocuments(empty));
        }
        for class in index.keys() {
            if splits.split_of(class).is_none() {
                return Err(CorpusError::UnassignedClass(class.clone()));
            }
        }
        for split in Split::ALL {
            for class in splits.classes(split) {
                if !index.contains_key(class) {
                    return Err(CorpusError::ClassWithoutDocuments(class.clone()));
                }
            }
        }

        Ok(Self {
            documents,
            tokens,
            splits,
            tokenizer,
            index,
            positions,
        })
    }

    pub fn documents(&self) -> &[Document] {
        &self.documents
    }

    pub fn splits(&self) -> &SplitSpec {
        &self.splits
    }

    pub fn tokenizer(&self) -> &TokenizerConfig {
        &self.tokenizer
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    /// Position of a document id in `documents()`.
    pub fn position(&self, id: &str) -> Option<usize> {
        self.positions.get(id).copied()
    }

    pub fn document(&self, id: &str) -> Option<&Document> {
        self.position(id).map(|p| &self.documents[p])
    }

    /// Cached tokenization of the document at `pos`.
    pub fn tokens_at(&self, pos: usize) -> &[TokenId] {
        &self.tokens[pos]
    }

    pub fn tokens_of(&self, id: &str) -> Result<&[TokenId], CorpusError> {
        self.position(id)
            .map(|p| self.tokens_at(p))
            .ok_or_else(|| CorpusError::UnknownId(id.to_owned()))
    }

    /// Document positions of a class, in load order.
    pub fn class_positions(&self, class: &str) -> &[usize] {
        self.index.get(class).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Document ids grouped by class.
    pub fn class_index(&self) -> BTreeMap<&str, Vec<&str>> {
        self.index
            .iter()
            .map(|(class, ps)| {
                let ids = ps.iter().map(|&p| self.documents[p].id.as_str()).collect();
                (class.as_str(), ids)
            })
            .collect()
    }

    /// Document positions belonging to a split, in load order.
    pub fn split_positions(&self, split: Split) -> Vec<usize> {
        let classes = self.splits.classes(split);
        (0..self.documents.len())
            .filter(|&p| classes.contains(&self.documents[p].label))
            .collect()
    }
}

#[derive(Deserialize)]
struct RawSplits {
    train: Vec<String>,
    val: Vec<String>,
    test: Vec<String>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.to_owned(),
        source,
    }
}

/// Reads line-delimited `{"id","text","label"}` records. Blank lines are skipped.
pub fn read_documents(path: &Path) -> Result<Vec<Document>, CorpusError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut documents = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let doc: Document = serde_json::from_str(&line).map_err(|e| CorpusError::Malformed {
            path: path.to_owned(),
            line: i + 1,
            message: e.to_string(),
        })?;
        documents.push(doc);
    }
    Ok(documents)
}

/// Reads a `{"train": [...], "val": [...], "test": [...]}` splits file.
///
/// A class listed twice, within one split or across splits, is rejected.
pub fn read_splits(path: &Path) -> Result<SplitSpec, CorpusError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let raw: RawSplits = serde_json::from_str(&text).map_err(|e| CorpusError::MalformedSplits {
        path: path.to_owned(),
        message: e.to_string(),
    })?;
    let mut seen = BTreeSet::new();
    for class in raw.train.iter().chain(&raw.val).chain(&raw.test) {
        if !seen.insert(class.as_str()) {
            return Err(CorpusError::ClassInTwoSplits(class.clone()));
        }
    }
    Ok(SplitSpec {
        train: raw.train.into_iter().collect(),
        val: raw.val.into_iter().collect(),
        test: raw.test.into_iter().collect(),
    })
}

pub fn load_corpus(
    data_path: &Path,
    splits_path: &Path,
    tok: TokenizerConfig,
) -> Result<Corpus, CorpusError> {
    let documents = read_documents(data_path)?;
    let splits = read_splits(splits_path)?;
    Corpus::new(documents, splits, tok)
}

/// Exact non-negative rational, kept alongside its rounded display value.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Ratio {
    pub numerator: u64,
    pub denominator: u64,
}

impl Ratio {
    /// Nearest integer, halves rounded up.
    pub fn rounded(&self) -> u64 {
        (2 * self.numerator + self.denominator) / (2 * self.denominator)
    }

    pub fn value(&self) -> f64 {
        self.numerator as f64 / self.denominator as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct CorpusStats {
    pub classes: SplitCounts,
    pub sentences: usize,
    pub avg_sent_class: u64,
    pub avg_tok_sent: u64,
    pub sent_per_class_exact: Ratio,
    pub tok_per_sent_exact: Ratio,
}

pub fn corpus_stats(corpus: &Corpus) -> CorpusStats {
    let splits = corpus.splits();
    let sentences = corpus.len();
    let class_count = corpus.index.len();
    let total_tokens: usize = corpus.tokens.iter().map(Vec::len).sum();
    let sent_per_class = Ratio {
        numerator: sentences as u64,
        denominator: class_count as u64,
    };
    let tok_per_sent = Ratio {
        numerator: total_tokens as u64,
        denominator: sentences as u64,
    };
    CorpusStats {
        classes: SplitCounts {
            train: splits.train.len(),
            val: splits.val.len(),
            test: splits.test.len(),
        },
        sentences,
        avg_sent_class: sent_per_class.rounded(),
        avg_tok_sent: tok_per_sent.rounded(),
        sent_per_class_exact: sent_per_class,
        tok_per_sent_exact: tok_per_sent,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn doc(id: &str, text: &str, label: &str) -> Document {
        Document {
            id: id.into(),
            text: text.into(),
            label: label.into(),
        }
    }

    fn splits(train: &[&str], val: &[&str], test: &[&str]) -> SplitSpec {
        let set = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect();
        SplitSpec {
            train: set(train),
            val: set(val),
            test: set(test),
        }
    }

    fn write_tmp(dir: &tempfile::TempDir, name: &str, body: &str) -> PathBuf {
        let path = dir.path().join(name);
        let mut f = fs::File::create(&path).unwrap();
        f.write_all(body.as_bytes()).unwrap();
        path
    }

    #[test]
    fn fnv_reference_vectors() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn fnv_matches_fnv_crate() {
        use std::hash::Hasher;
        for word in ["hello", "world", "naïve", "日本語", ""] {
            let mut h = fnv::FnvHasher::default();
            h.write(word.as_bytes());
            assert_eq!(fnv1a64(word.as_bytes()), h.finish(), "{word}");
        }
    }

    #[test]
    fn tokenize_hello_world() {
        let tok = TokenizerConfig::with_buckets(1024);
        // fnv1a64("hello") = 11831194018420276491, fnv1a64("world") = 5717881983045765875
        assert_eq!(tokenize("Hello, world", &tok), vec![267, 755]);
    }

    #[test]
    fn tokenize_empty_and_repeats() {
        let tok = TokenizerConfig::default();
        assert!(tokenize("", &tok).is_empty());
        assert!(tokenize("  ... !! ", &tok).is_empty());
        let ids = tokenize("aaa aaa", &tok);
        assert_eq!(ids.len(), 2);
        assert_eq!(ids[0], ids[1]);
    }

    #[test]
    fn strip_is_edge_only() {
        let tok = TokenizerConfig::default();
        assert_eq!(
            tokenize_words("«Don't» (stop)...", &tok),
            vec!["don't", "stop"]
        );
        let raw = TokenizerConfig {
            lowercase: false,
            strip_punct: false,
            ..tok
        };
        assert_eq!(tokenize_words("Hi, there", &raw), vec!["Hi,", "there"]);
    }

    #[test]
    fn minimal_corpus() {
        let docs = vec![
            doc("1", "a b", "A"),
            doc("2", "c", "B"),
            doc("3", "d e", "C"),
        ];
        let c = Corpus::new(
            docs,
            splits(&["A"], &["B"], &["C"]),
            TokenizerConfig::default(),
        )
        .unwrap();
        let stats = corpus_stats(&c);
        assert_eq!(
            stats.classes,
            SplitCounts {
                train: 1,
                val: 1,
                test: 1
            }
        );
        assert_eq!(stats.sentences, 3);
        assert_eq!(c.class_index()["B"], vec!["2"]);
        assert_eq!(c.split_positions(Split::Test), vec![2]);
    }

    #[test]
    fn rejects_invalid_corpora() {
        let tok = TokenizerConfig::default();
        let base = || vec![doc("1", "a", "A"), doc("2", "b", "B"), doc("3", "c", "C")];

        let err = Corpus::new(base(), splits(&["A", "B"], &["B"], &["C"]), tok).unwrap_err();
        assert_eq!(err.to_string(), "class B in two splits");

        let err = Corpus::new(base(), splits(&["A"], &[], &["B", "C"]), tok).unwrap_err();
        assert!(matches!(err, CorpusError::EmptySplit(Split::Val)));

        let err = Corpus::new(base(), splits(&["A"], &["B"], &["D"]), tok).unwrap_err();
        assert!(matches!(err, CorpusError::UnassignedClass(c) if c == "C"));

        let err = Corpus::new(base(), splits(&["A"], &["B"], &["C", "D"]), tok).unwrap_err();
        assert!(matches!(err, CorpusError::ClassWithoutDocuments(c) if c == "D"));

        let mut dup = base();
        dup.push(doc("1", "x", "A"));
        let err = Corpus::new(dup, splits(&["A"], &["B"], &["C"]), tok).unwrap_err();
        assert!(matches!(err, CorpusError::DuplicateId(id) if id == "1"));

        let mut empty = base();
        empty.push(doc("4", " -- ", "A"));
        empty.push(doc("5", "", "B"));
        let err = Corpus::new(empty, splits(&["A"], &["B"], &["C"]), tok).unwrap_err();
        assert!(matches!(err, CorpusError::EmptyDocuments(ref ids) if ids == &["4", "5"]));

        let err = Corpus::new(
            base(),
            splits(&["A"], &["B"], &["C"]),
            TokenizerConfig::with_buckets(1),
        )
        .unwrap_err();
        assert!(matches!(err, CorpusError::InvalidBucketCount(1)));
    }

    #[test]
    fn load_reports_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let data = write_tmp(
            &dir,
            "d.jsonl",
            "{\"id\":\"1\",\"text\":\"a\",\"label\":\"A\",\"extra\":3}\n\n{\"id\":\"2\",\"text\":\"b\"}\n",
        );
        let sp = write_tmp(
            &dir,
            "s.json",
            r#"{"train":["A"],"val":["B"],"test":["C"]}"#,
        );
        let err = load_corpus(&data, &sp, TokenizerConfig::default()).unwrap_err();
        assert!(
            matches!(err, CorpusError::Malformed { line: 3, .. }),
            "{err}"
        );
    }

    #[test]
    fn load_rejects_class_listed_twice_in_file() {
        let dir = tempfile::tempdir().unwrap();
        let sp = write_tmp(
            &dir,
            "s.json",
            r#"{"train":["A","B"],"val":["B"],"test":["C"]}"#,
        );
        let err = read_splits(&sp).unwrap_err();
        assert_eq!(err.to_string(), "class B in two splits");
        let bad = write_tmp(&dir, "bad.json", r#"{"train":["A"],"val":["B"]}"#);
        assert!(matches!(
            read_splits(&bad).unwrap_err(),
            CorpusError::MalformedSplits { .. }
        ));
    }

    #[test]
    fn stats_direct_count() {
        let docs = vec![
            doc("1", "a b", "A"),
            doc("2", "c d", "A"),
            doc("3", "e f g h", "B"),
            doc("4", "i j k l", "B"),
            doc("5", "x y z", "C"),
            doc("6", "u v w", "C"),
        ];
        // token lengths {2,2,4,4,3,3}; a third class is needed for three splits
        let c = Corpus::new(
            docs,
            splits(&["A"], &["B"], &["C"]),
            TokenizerConfig::default(),
        )
        .unwrap();
        let s = corpus_stats(&c);
        assert_eq!(s.sentences, 6);
        assert_eq!(s.avg_sent_class, 2);
        assert_eq!(
            s.tok_per_sent_exact,
            Ratio {
                numerator: 18,
                denominator: 6
            }
        );
        assert_eq!(s.avg_tok_sent, 3);
    }

    #[test]
    fn ratio_rounding() {
        let r = |n, d| {
            Ratio {
                numerator: n,
                denominator: d,
            }
            .rounded()
        };
        assert_eq!(r(12, 4), 3);
        assert_eq!(r(13083, 77), 170);
        assert_eq!(r(5, 2), 3);
        assert_eq!(r(7, 3), 2);
    }
}
