//! Augmented views for the unsupervised contrastive terms.
//!
//! Two sources: token-level EDA perturbations (random deletion, swap and
//! insertion; synonym replacement is not implemented), and an optional store
//! of externally generated paraphrases keyed by document id. A stored
//! paraphrase always takes priority over EDA.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{tokenize, Corpus, Document, TokenId, TokenizerConfig};

#[derive(Debug, thiserror::Error)]
pub enum AugmentError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: malformed augmentation record: {message}")]
    Malformed {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("empty augmentation list for id {0:?}")]
    EmptyList(String),
    #[error("augmentation store references unknown document id {0:?}")]
    UnknownId(String),
    #[error("augmentation of {0:?} tokenizes to an empty sequence")]
    EmptyView(String),
    #[error("cannot augment an empty token sequence")]
    EmptyInput,
    #[error("delete_prob must lie in [0, 1], got {0}")]
    InvalidDeleteProb(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EdaParams {
    pub swap_count: usize,
    pub delete_prob: f64,
    pub insert_count: usize,
}

impl Default for EdaParams {
    fn default() -> Self {
        Self {
            swap_count: 1,
            delete_prob: 0.1,
            insert_count: 1,
        }
    }
}

impl EdaParams {
    pub const IDENTITY: EdaParams = EdaParams {
        swap_count: 0,
        delete_prob: 0.0,
        insert_count: 0,
    };

    pub fn validate(&self) -> Result<(), AugmentError> {
        if !(0.0..=1.0).contains(&self.delete_prob) {
            return Err(AugmentError::InvalidDeleteProb(self.delete_prob));
        }
        Ok(())
    }
}

/// EDA over any token type: deletion, then swaps, then insertions.
///
/// Works on hashed ids during training and on word strings when views are
/// materialized to a file; both consume the rng identically.
pub fn eda_augment<T: Clone, R: Rng + ?Sized>(
    tokens: &[T],
    params: &EdaParams,
    rng: &mut R,
) -> Result<Vec<T>, AugmentError> {
    if tokens.is_empty() {
        return Err(AugmentError::EmptyInput);
    }
    params.validate()?;

    let mut out: Vec<T> = tokens
        .iter()
        .filter(|_| rng.gen::<f64>() >= params.delete_prob)
        .cloned()
        .collect();
    if out.is_empty() {
        out.push(tokens[rng.gen_range(0..tokens.len())].clone());
    }

    for _ in 0..params.swap_count {
        let i = rng.gen_range(0..out.len());
        let j = rng.gen_range(0..out.len());
        out.swap(i, j);
    }

    for _ in 0..params.insert_count {
        let tok = out[rng.gen_range(0..out.len())].clone();
        let at = rng.gen_range(0..=out.len());
        out.insert(at, tok);
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct AugmentationRecord {
    id: String,
    augmentations: Vec<String>,
}

/// Externally supplied paraphrases, keyed by document id.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AugmentationStore {
    entries: HashMap<String, Vec<String>>,
}

impl AugmentationStore {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&[String]> {
        self.entries.get(id).map(Vec::as_slice)
    }

    pub fn insert(&mut self, id: String, augmentations: Vec<String>) -> Result<(), AugmentError> {
        if augmentations.is_empty() {
            return Err(AugmentError::EmptyList(id));
        }
        self.entries.entry(id).or_default().extend(augmentations);
        Ok(())
    }

    /// Checks every id against `corpus` and that every paraphrase tokenizes
    /// to at least one token under the corpus tokenizer.
    pub fn bind(&self, corpus: &Corpus) -> Result<(), AugmentError> {
        let mut ids: Vec<&String> = self.entries.keys().collect();
        ids.sort();
        for id in ids {
            if corpus.position(id).is_none() {
                return Err(AugmentError::UnknownId(id.clone()));
            }
            if self.entries[id]
                .iter()
                .any(|text| tokenize(text, corpus.tokenizer()).is_empty())
            {
                return Err(AugmentError::EmptyView(id.clone()));
            }
        }
        Ok(())
    }

    /// Writes the store as line-delimited JSON sorted by id.
    pub fn write(&self, path: &Path) -> std::io::Result<()> {
        let mut ids: Vec<&String> = self.entries.keys().collect();
        ids.sort();
        let mut out = String::new();
        for id in ids {
            let rec = AugmentationRecord {
                id: id.clone(),
                augmentations: self.entries[id].clone(),
            };
            out.push_str(&serde_json::to_string(&rec).map_err(std::io::Error::other)?);
            out.push('\n');
        }
        fs::write(path, out)
    }
}

/// Reads `{"id": ..., "augmentations": [...]}` lines. Repeated ids accumulate.
pub fn load_augmentations(path: &Path) -> Result<AugmentationStore, AugmentError> {
    let io = |source| AugmentError::Io {
        path: path.to_owned(),
        source,
    };
    let file = fs::File::open(path).map_err(io)?;
    let mut store = AugmentationStore::default();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: AugmentationRecord =
            serde_json::from_str(&line).map_err(|e| AugmentError::Malformed {
                path: path.to_owned(),
                line: i + 1,
                message: e.to_string(),
            })?;
        store.insert(rec.id, rec.augmentations)?;
    }
    Ok(store)
}

/// An augmented view of a document, given its original tokens.
pub fn view_from_tokens<R: Rng + ?Sized>(
    id: &str,
    tokens: &[TokenId],
    store: Option<&AugmentationStore>,
    params: &EdaParams,
    tok: &TokenizerConfig,
    rng: &mut R,
) -> Result<Vec<TokenId>, AugmentError> {
    if let Some(paraphrases) = store.and_then(|s| s.get(id)) {
        let text = paraphrases
            .choose(rng)
            .expect("store lists are non-empty by construction");
        let view = tokenize(text, tok);
        if view.is_empty() {
            return Err(AugmentError::EmptyView(id.to_owned()));
        }
        return Ok(view);
    }
    eda_augment(tokens, params, rng)
}

pub fn get_view<R: Rng + ?Sized>(
    doc: &Document,
    store: Option<&AugmentationStore>,
    params: &EdaParams,
    tok: &TokenizerConfig,
    rng: &mut R,
) -> Result<Vec<TokenId>, AugmentError> {
    let tokens = tokenize(&doc.text, tok);
    view_from_tokens(&doc.id, &tokens, store, params, tok, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::io::Write;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn identity_params() {
        let toks: Vec<u32> = vec![4, 8, 15, 16, 23, 42];
        assert_eq!(
            eda_augment(&toks, &EdaParams::IDENTITY, &mut rng(0)).unwrap(),
            toks
        );
    }

    #[test]
    fn single_token_survives() {
        let params = EdaParams {
            swap_count: 3,
            delete_prob: 1.0,
            insert_count: 2,
        };
        for seed in 0..20 {
            let out = eda_augment(&[7u32], &params, &mut rng(seed)).unwrap();
            assert_eq!(out, vec![7; 3]);
        }
        let only_delete = EdaParams {
            delete_prob: 1.0,
            ..EdaParams::IDENTITY
        };
        let out = eda_augment(&[1u32, 2, 3], &only_delete, &mut rng(4)).unwrap();
        assert_eq!(out.len(), 1);
        assert!([1, 2, 3].contains(&out[0]));
    }

    #[test]
    fn deterministic_and_validated() {
        let toks: Vec<u32> = (0..30).collect();
        let p = EdaParams::default();
        let a = eda_augment(&toks, &p, &mut rng(7)).unwrap();
        let b = eda_augment(&toks, &p, &mut rng(7)).unwrap();
        assert_eq!(a, b);
        assert!(matches!(
            eda_augment::<u32, _>(&[], &p, &mut rng(7)),
            Err(AugmentError::EmptyInput)
        ));
        let bad = EdaParams {
            delete_prob: 1.5,
            ..p
        };
        assert!(matches!(
            eda_augment(&toks, &bad, &mut rng(7)),
            Err(AugmentError::InvalidDeleteProb(_))
        ));
    }

    #[test]
    fn ids_and_words_consume_rng_alike() {
        let tok = TokenizerConfig::default();
        let words: Vec<String> = "the quick brown fox jumps over the lazy dog"
            .split(' ')
            .map(str::to_owned)
            .collect();
        let ids: Vec<u32> = words
            .iter()
            .map(|w| crate::corpus::hash_word(w, tok.bucket_count))
            .collect();
        let p = EdaParams {
            swap_count: 2,
            delete_prob: 0.3,
            insert_count: 2,
        };
        let w = eda_augment(&words, &p, &mut rng(21)).unwrap();
        let i = eda_augment(&ids, &p, &mut rng(21)).unwrap();
        assert_eq!(tokenize(&w.join(" "), &tok), i);
    }

    fn write_tmp(body: &str) -> (tempfile::TempDir, PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("aug.jsonl");
        fs::File::create(&path)
            .unwrap()
            .write_all(body.as_bytes())
            .unwrap();
        (dir, path)
    }

    #[test]
    fn load_store() {
        let (_d, p) = write_tmp("{\"id\":\"d1\",\"augmentations\":[\"a b\"]}\n");
        assert_eq!(load_augmentations(&p).unwrap().len(), 1);

        let (_d, p) = write_tmp("");
        assert!(load_augmentations(&p).unwrap().is_empty());

        let (_d, p) = write_tmp("{\"id\":\"d1\",\"augmentations\":[]}\n");
        assert!(matches!(load_augmentations(&p), Err(AugmentError::EmptyList(id)) if id == "d1"));

        let (_d, p) = write_tmp("{\"id\":\"d1\",\"augmentations\":[\"x\"]}\nnot json\n");
        assert!(matches!(
            load_augmentations(&p),
            Err(AugmentError::Malformed { line: 2, .. })
        ));
    }

    #[test]
    fn store_priority_and_fallback() {
        let tok = TokenizerConfig::default();
        let doc = Document {
            id: "d1".into(),
            text: "one two three".into(),
            label: "A".into(),
        };
        let mut store = AugmentationStore::default();
        store.insert("d1".into(), vec!["Four five".into()]).unwrap();
        let heavy = EdaParams {
            swap_count: 5,
            delete_prob: 0.9,
            insert_count: 5,
        };
        for params in [EdaParams::IDENTITY, heavy] {
            let v = get_view(&doc, Some(&store), &params, &tok, &mut rng(1)).unwrap();
            assert_eq!(v, tokenize("four five", &tok));
        }

        let other = Document {
            id: "d2".into(),
            ..doc.clone()
        };
        let expected = eda_augment(&tokenize(&other.text, &tok), &heavy, &mut rng(2)).unwrap();
        assert_eq!(
            get_view(&other, Some(&store), &heavy, &tok, &mut rng(2)).unwrap(),
            expected
        );
        assert_eq!(
            get_view(&other, None, &heavy, &tok, &mut rng(2)).unwrap(),
            expected
        );
        assert_eq!(
            get_view(&doc, None, &EdaParams::IDENTITY, &tok, &mut rng(3)).unwrap(),
            tokenize(&doc.text, &tok)
        );
    }
}
