//! Episode sampling and contrastive batch assembly.
//!
//! All samplers draw from a caller-supplied rng and are deterministic given
//! its state. Classes of a split are enumerated in sorted order and documents
//! of a class in load order, so replay depends only on the corpus and the rng.

use rand::seq::index;
use rand::Rng;
use serde::Serialize;

use crate::corpus::{Corpus, Split};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum EpisodeError {
    #[error("split {split} has {available} classes, {needed} needed")]
    TooFewClasses {
        split: Split,
        needed: usize,
        available: usize,
    },
    #[error("class {class} has {available} documents, {needed} needed")]
    TooFewDocuments {
        class: String,
        needed: usize,
        available: usize,
    },
    #[error("episode shape must be positive, got n={n} k={k} m={m}")]
    InvalidShape { n: usize, k: usize, m: usize },
}

/// A sampled document reference.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize)]
pub struct Item {
    pub id: String,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Episode {
    pub split: Split,
    pub way: usize,
    pub shot: usize,
    pub query_size: usize,
    pub classes: Vec<String>,
    /// Class-major: the `shot` items of `classes[0]` first.
    pub support: Vec<Item>,
    pub query: Vec<Item>,
}

/// Support followed by query, as one ordered batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContrastBatch {
    pub items: Vec<String>,
    pub labels: Vec<String>,
    pub support_prefix: usize,
    positives_per_anchor: usize,
}

impl ContrastBatch {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// `c = k + m - 1`: same-label partners of every anchor.
    pub fn positives_per_anchor(&self) -> usize {
        self.positives_per_anchor
    }
}

/// Support-only task used by the task-level regularizer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AuxTask {
    pub classes: Vec<String>,
    pub support: Vec<String>,
}

fn split_classes(corpus: &Corpus, split: Split) -> Vec<&str> {
    corpus
        .splits()
        .classes(split)
        .iter()
        .map(String::as_str)
        .collect()
}

/// Checks that `split` has at least `n` classes with `per_class` documents each.
fn check_capacity(
    corpus: &Corpus,
    split: Split,
    n: usize,
    per_class: usize,
) -> Result<Vec<&str>, EpisodeError> {
    let classes = split_classes(corpus, split);
    if classes.len() < n {
        return Err(EpisodeError::TooFewClasses {
            split,
            needed: n,
            available: classes.len(),
        });
    }
    for class in &classes {
        let available = corpus.class_positions(class).len();
        if available < per_class {
            return Err(EpisodeError::TooFewDocuments {
                class: class.to_string(),
                needed: per_class,
                available,
            });
        }
    }
    Ok(classes)
}

fn sample_class_docs<R: Rng + ?Sized>(
    corpus: &Corpus,
    class: &str,
    count: usize,
    rng: &mut R,
) -> Vec<Item> {
    let positions = corpus.class_positions(class);
    index::sample(rng, positions.len(), count)
        .into_iter()
        .map(|i| Item {
            id: corpus.documents()[positions[i]].id.clone(),
            label: class.to_owned(),
        })
        .collect()
}

fn sample_classes<'c, R: Rng + ?Sized>(classes: &[&'c str], n: usize, rng: &mut R) -> Vec<&'c str> {
    index::sample(rng, classes.len(), n)
        .into_iter()
        .map(|i| classes[i])
        .collect()
}

/// Samples an n-way k-shot episode with m queries per class.
///
/// Every class of the split must hold at least `k + m` documents, not only
/// the sampled ones, so that failures do not depend on the rng.
pub fn sample_episode<R: Rng + ?Sized>(
    corpus: &Corpus,
    split: Split,
    n: usize,
    k: usize,
    m: usize,
    rng: &mut R,
) -> Result<Episode, EpisodeError> {
    if n == 0 || k == 0 || m == 0 {
        return Err(EpisodeError::InvalidShape { n, k, m });
    }
    let available = check_capacity(corpus, split, n, k + m)?;
    let chosen = sample_classes(&available, n, rng);

    let mut support = Vec::with_capacity(n * k);
    let mut query = Vec::with_capacity(n * m);
    for class in &chosen {
        let mut docs = sample_class_docs(corpus, class, k + m, rng);
        query.extend(docs.split_off(k));
        support.extend(docs);
    }
    Ok(Episode {
        split,
        way: n,
        shot: k,
        query_size: m,
        classes: chosen.into_iter().map(str::to_owned).collect(),
        support,
        query,
    })
}

pub fn build_batch(episode: &Episode) -> ContrastBatch {
    let (items, labels) = episode
        .support
        .iter()
        .chain(&episode.query)
        .map(|it| (it.id.clone(), it.label.clone()))
        .unzip();
    ContrastBatch {
        items,
        labels,
        support_prefix: episode.support.len(),
        positives_per_anchor: episode.shot + episode.query_size - 1,
    }
}

/// Samples `n_task` independent support-only tasks from the training split.
pub fn sample_aux_tasks<R: Rng + ?Sized>(
    corpus: &Corpus,
    n_task: usize,
    n: usize,
    k: usize,
    rng: &mut R,
) -> Result<Vec<AuxTask>, EpisodeError> {
    if n_task == 0 {
        return Ok(Vec::new());
    }
    if n == 0 || k == 0 {
        return Err(EpisodeError::InvalidShape { n, k, m: 0 });
    }
    let available = check_capacity(corpus, Split::Train, n, k)?;
    let mut tasks = Vec::with_capacity(n_task);
    for _ in 0..n_task {
        let chosen = sample_classes(&available, n, rng);
        let mut support = Vec::with_capacity(n * k);
        for class in &chosen {
            support.extend(
                sample_class_docs(corpus, class, k, rng)
                    .into_iter()
                    .map(|it| it.id),
            );
        }
        tasks.push(AuxTask {
            classes: chosen.into_iter().map(str::to_owned).collect(),
            support,
        });
    }
    Ok(tasks)
}

/// Draws `n_inst` distinct training documents; labels are not returned.
pub fn sample_unlabeled<R: Rng + ?Sized>(
    corpus: &Corpus,
    n_inst: usize,
    rng: &mut R,
) -> Result<Vec<String>, EpisodeError> {
    if n_inst == 0 {
        return Ok(Vec::new());
    }
    let pool = corpus.split_positions(Split::Train);
    if pool.len() < n_inst {
        return Err(EpisodeError::TooFewDocuments {
            class: format!("<{} split>", Split::Train),
            needed: n_inst,
            available: pool.len(),
        });
    }
    Ok(index::sample(rng, pool.len(), n_inst)
        .into_iter()
        .map(|i| corpus.documents()[pool[i]].id.clone())
        .collect())
}
