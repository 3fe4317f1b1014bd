//! Class-separable synthetic corpora.
//!
//! Class `c` owns the signature words `w<c*vocab_per_class + j>`; the shared
//! noise words follow after all signatures.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Document, SplitSpec};
use crate::seeded_rng;

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("invalid synth spec: {0}")]
    InvalidSpec(String),
    #[error("failed to write {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub class_count: usize,
    pub docs_per_class: usize,
    pub vocab_per_class: usize,
    pub shared_vocab: usize,
    pub tokens_per_doc: usize,
    pub signature_ratio: f64,
    pub seed: u64,
    /// Lower bound on the classes of every split, usually the largest `n`
    /// the corpus will be sampled at.
    pub min_split_classes: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            class_count: 20,
            docs_per_class: 100,
            vocab_per_class: 20,
            shared_vocab: 50,
            tokens_per_doc: 20,
            signature_ratio: 0.8,
            seed: 0,
            min_split_classes: 1,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidSpec(m));
        if self.class_count < 3 {
            return bad(format!(
                "class_count must be at least 3, got {}",
                self.class_count
            ));
        }
        for (name, v) in [
            ("docs_per_class", self.docs_per_class),
            ("vocab_per_class", self.vocab_per_class),
            ("tokens_per_doc", self.tokens_per_doc),
            ("min_split_classes", self.min_split_classes),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if !(self.signature_ratio > 0.0 && self.signature_ratio <= 1.0) {
            return bad(format!(
                "signature_ratio must lie in (0, 1], got {}",
                self.signature_ratio
            ));
        }
        if self.signature_ratio < 1.0 && self.shared_vocab == 0 {
            return bad("signature_ratio below 1 needs a shared vocabulary".into());
        }
        Ok(())
    }

    pub fn total_vocab(&self) -> usize {
        self.class_count * self.vocab_per_class + self.shared_vocab
    }
}

#[derive(Clone, Debug)]
pub struct SynthOutput {
    pub documents: Vec<Document>,
    pub splits: SplitSpec,
    pub warnings: Vec<String>,
}

/// Train/val/test class counts: 60/20/20 rounded half up, then each split
/// raised to `min` by taking classes from train.
pub fn split_sizes(class_count: usize, min: usize) -> (usize, usize, usize) {
    let mut train = (6 * class_count + 5) / 10;
    let mut val = (2 * class_count + 5) / 10;
    let mut test = class_count - train - val;
    let floor = min.min(class_count / 3).max(1);
    for part in [&mut val, &mut test] {
        while *part < floor && train > floor {
            *part += 1;
            train -= 1;
        }
    }
    // tiny class counts can still leave a split empty
    if test == 0 {
        test = 1;
        train -= 1;
    }
    (train, val, test)
}

fn class_name(c: usize, width: usize) -> String {
    format!("c{c:0width$}")
}

pub fn generate(spec: &SynthSpec) -> Result<SynthOutput, SynthError> {
    spec.validate()?;
    let class_width = (spec.class_count - 1).to_string().len();
    let doc_width = (spec.class_count * spec.docs_per_class - 1)
        .to_string()
        .len();
    let names: Vec<String> = (0..spec.class_count)
        .map(|c| class_name(c, class_width))
        .collect();

    let mut rng = seeded_rng(spec.seed, 0);
    let mut order: Vec<usize> = (0..spec.class_count).collect();
    order.shuffle(&mut rng);
    let (train, val, test) = split_sizes(spec.class_count, spec.min_split_classes);
    let mut warnings = Vec::new();
    for (split, size) in [("train", train), ("val", val), ("test", test)] {
        if size < spec.min_split_classes {
            warnings.push(format!(
                "{split} split has {size} classes, fewer than the requested {}",
                spec.min_split_classes
            ));
        }
    }
    let pick =
        |range: std::ops::Range<usize>| order[range].iter().map(|&c| names[c].clone()).collect();
    let splits = SplitSpec {
        train: pick(0..train),
        val: pick(train..train + val),
        test: pick(train + val..train + val + test),
    };

    let shared_base = spec.class_count * spec.vocab_per_class;
    let mut rng = seeded_rng(spec.seed, 1);
    let mut documents = Vec::with_capacity(spec.class_count * spec.docs_per_class);
    for (c, label) in names.iter().enumerate() {
        for _ in 0..spec.docs_per_class {
            let words: Vec<String> = (0..spec.tokens_per_doc)
                .map(|_| {
                    let signature =
                        spec.shared_vocab == 0 || rng.gen::<f64>() < spec.signature_ratio;
                    let index = if signature {
                        c * spec.vocab_per_class + rng.gen_range(0..spec.vocab_per_class)
                    } else {
                        shared_base + rng.gen_range(0..spec.shared_vocab)
                    };
                    format!("w{index}")
                })
                .collect();
            documents.push(Document {
                id: format!("d{:0doc_width$}", documents.len()),
                text: words.join(" "),
                label: label.clone(),
            });
        }
    }
    Ok(SynthOutput {
        documents,
        splits,
        warnings,
    })
}

fn write_file(path: &Path, contents: &str) -> Result<(), SynthError> {
    fs::write(path, contents).map_err(|source| SynthError::Io {
        path: path.to_owned(),
        source,
    })
}

/// Writes the corpus JSONL and the splits JSON.
pub fn write_output(out: &SynthOutput, data: &Path, splits: &Path) -> Result<(), SynthError> {
    let mut text = String::new();
    for doc in &out.documents {
        text.push_str(&serde_json::to_string(doc).expect("documents serialize"));
        text.push('\n');
    }
    write_file(data, &text)?;
    let mut json = serde_json::to_string_pretty(&out.splits).expect("splits serialize");
    json.push('\n');
    write_file(splits, &json)
}
