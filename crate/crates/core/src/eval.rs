//! Label prediction and many-episode evaluation.
//!
//! The main predictor is 1-nearest-neighbor over individual support
//! instances by inner product. A prototype predictor (class means, Euclidean
//! distance) is kept as a baseline. Ties in both go to the lowest index.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, CorpusError, Split};
use crate::encoder::{encode_pooled, EncoderError, EncoderParams, Pooling};
use crate::episodes::{sample_episode, Episode, EpisodeError};
use crate::seeded_rng;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("cannot predict from an empty support set")]
    EmptySupport,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("episodes must be positive")]
    NoEpisodes,
    #[error(transparent)]
    Episode(#[from] EpisodeError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("failed to write {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Predictor {
    #[default]
    Nn,
    Proto,
}

impl FromStr for Predictor {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "nn" => Ok(Predictor::Nn),
            "proto" => Ok(Predictor::Proto),
            other => Err(format!(
                "unknown predictor {other:?} (expected nn or proto)"
            )),
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_support(support: &[Vec<f64>], labels_len: usize, query: &[f64]) -> Result<(), EvalError> {
    if support.is_empty() {
        return Err(EvalError::EmptySupport);
    }
    if support.len() != labels_len {
        return Err(EvalError::DimensionMismatch(format!(
            "{} support representations, {labels_len} labels",
            support.len()
        )));
    }
    if support.iter().any(|s| s.len() != query.len()) {
        return Err(EvalError::DimensionMismatch(
            "support and query dimensions differ".into(),
        ));
    }
    Ok(())
}

/// Label of the support instance with the largest inner product.
pub fn nn_predict<'a, L>(
    support: &[Vec<f64>],
    labels: &'a [L],
    query: &[f64],
) -> Result<&'a L, EvalError> {
    check_support(support, labels.len(), query)?;
    let mut best = 0;
    let mut best_score = dot(query, &support[0]);
    for (i, s) in support.iter().enumerate().skip(1) {
        let score = dot(query, s);
        if score > best_score {
            best = i;
            best_score = score;
        }
    }
    Ok(&labels[best])
}

/// Label of the nearest class prototype (mean support vector).
///
/// Classes are indexed by first appearance in `labels`.
pub fn proto_predict<'a, L: PartialEq>(
    support: &[Vec<f64>],
    labels: &'a [L],
    query: &[f64],
) -> Result<&'a L, EvalError> {
    check_support(support, labels.len(), query)?;
    let mut classes: Vec<(&'a L, Vec<f64>, usize)> = Vec::new();
    for (s, l) in support.iter().zip(labels) {
        match classes.iter_mut().find(|(c, _, _)| *c == l) {
            Some((_, sum, count)) => {
                sum.iter_mut().zip(s).for_each(|(a, x)| *a += x);
                *count += 1;
            }
            None => classes.push((l, s.clone(), 1)),
        }
    }
    let mut best = 0;
    let mut best_dist = f64::INFINITY;
    for (i, (_, sum, count)) in classes.iter().enumerate() {
        let inv = 1.0 / *count as f64;
        let dist: f64 = sum
            .iter()
            .zip(query)
            .map(|(s, q)| {
                let d = s * inv - q;
                d * d
            })
            .sum();
        if dist < best_dist {
            best = i;
            best_dist = dist;
        }
    }
    Ok(classes[best].0)
}

pub fn predict<'a, L: PartialEq>(
    predictor: Predictor,
    support: &[Vec<f64>],
    labels: &'a [L],
    query: &[f64],
) -> Result<&'a L, EvalError> {
    match predictor {
        Predictor::Nn => nn_predict(support, labels, query),
        Predictor::Proto => proto_predict(support, labels, query),
    }
}

fn encode_ids<'a>(
    params: &EncoderParams,
    corpus: &Corpus,
    ids: impl Iterator<Item = &'a str>,
    pooling: Pooling,
) -> Result<Vec<Vec<f64>>, EvalError> {
    ids.map(|id| Ok(encode_pooled(params, corpus.tokens_of(id)?, pooling)?))
        .collect()
}

/// Predicted label for every query of `episode`. Query labels are not read.
pub fn predict_episode(
    params: &EncoderParams,
    corpus: &Corpus,
    episode: &Episode,
    predictor: Predictor,
    pooling: Pooling,
) -> Result<Vec<String>, EvalError> {
    let support = encode_ids(
        params,
        corpus,
        episode.support.iter().map(|i| i.id.as_str()),
        pooling,
    )?;
    let labels: Vec<&str> = episode.support.iter().map(|i| i.label.as_str()).collect();
    let queries = encode_ids(
        params,
        corpus,
        episode.query.iter().map(|i| i.id.as_str()),
        pooling,
    )?;
    queries
        .iter()
        .map(|q| predict(predictor, &support, &labels, q).map(|l| l.to_string()))
        .collect()
}

/// Fraction of the episode's queries predicted correctly.
pub fn episode_accuracy(
    params: &EncoderParams,
    corpus: &Corpus,
    episode: &Episode,
    predictor: Predictor,
    pooling: Pooling,
) -> Result<f64, EvalError> {
    let predicted = predict_episode(params, corpus, episode, predictor, pooling)?;
    let correct = predicted
        .iter()
        .zip(&episode.query)
        .filter(|(p, q)| **p == q.label)
        .count();
    Ok(correct as f64 / episode.query.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalSpec {
    pub split: Split,
    pub n: usize,
    pub k: usize,
    pub m: usize,
    pub episodes: usize,
    pub predictor: Predictor,
    pub seed: u64,
    pub pooling: Pooling,
    /// Worker threads; results do not depend on it.
    pub threads: usize,
}

impl EvalSpec {
    pub fn new(split: Split, n: usize, k: usize, m: usize, episodes: usize, seed: u64) -> Self {
        Self {
            split,
            n,
            k,
            m,
            episodes,
            predictor: Predictor::Nn,
            seed,
            pooling: Pooling::Mean,
            threads: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub episodes: usize,
    pub per_episode_accuracy: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub seed: u64,
    pub n: usize,
    pub k: usize,
    pub m: usize,
    pub split: Split,
    pub predictor: Predictor,
}

pub fn mean_and_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let len = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / len;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / len;
    (mean, var.sqrt())
}

/// The episode scored at position `index` of an evaluation run.
pub fn eval_episode(corpus: &Corpus, spec: &EvalSpec, index: usize) -> Result<Episode, EvalError> {
    let mut rng = seeded_rng(spec.seed, index as u64);
    Ok(sample_episode(
        corpus, spec.split, spec.n, spec.k, spec.m, &mut rng,
    )?)
}

/// Scores `spec.episodes` episodes; episode `i` draws from its own rng
/// stream `(seed, i)`, so thread count never changes the report.
pub fn evaluate(
    params: &EncoderParams,
    corpus: &Corpus,
    spec: &EvalSpec,
) -> Result<EvalReport, EvalError> {
    if spec.episodes == 0 {
        return Err(EvalError::NoEpisodes);
    }
    let score = |i: usize| -> Result<f64, EvalError> {
        let episode = eval_episode(corpus, spec, i)?;
        episode_accuracy(params, corpus, &episode, spec.predictor, spec.pooling)
    };

    let threads = spec.threads.clamp(1, spec.episodes);
    let per_episode_accuracy: Vec<f64> = if threads == 1 {
        (0..spec.episodes).map(score).collect::<Result<_, _>>()?
    } else {
        let chunk = spec.episodes.div_ceil(threads);
        let parts: Vec<Result<Vec<f64>, EvalError>> = std::thread::scope(|scope| {
            let handles: Vec<_> = (0..threads)
                .map(|w| {
                    let score = &score;
                    scope.spawn(move || {
                        let lo = w * chunk;
                        let hi = ((w + 1) * chunk).min(spec.episodes);
                        (lo..hi).map(score).collect()
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("evaluation worker panicked"))
                .collect()
        });
        let mut all = Vec::with_capacity(spec.episodes);
        for part in parts {
            all.extend(part?);
        }
        all
    };

    let (mean, std) = mean_and_std(&per_episode_accuracy);
    Ok(EvalReport {
        episodes: spec.episodes,
        per_episode_accuracy,
        mean,
        std,
        seed: spec.seed,
        n: spec.n,
        k: spec.k,
        m: spec.m,
        split: spec.split,
        predictor: spec.predictor,
    })
}

/// Writes `id \t label \t x_1 ... x_d` for every document of `split`.
///
/// Floats use Rust's shortest round-trip formatting.
pub fn dump_embeddings(
    params: &EncoderParams,
    corpus: &Corpus,
    split: Split,
    pooling: Pooling,
    out: &Path,
) -> Result<usize, EvalError> {
    let mut text = String::new();
    let positions = corpus.split_positions(split);
    for &p in &positions {
        let doc = &corpus.documents()[p];
        let z = encode_pooled(params, corpus.tokens_at(p), pooling)?;
        text.push_str(&doc.id);
        text.push('\t');
        text.push_str(&doc.label);
        for x in z {
            write!(text, "\t{x}").unwrap();
        }
        text.push('\n');
    }
    fs::write(out, text).map_err(|source| EvalError::Io {
        path: out.to_owned(),
        source,
    })?;
    Ok(positions.len())
}
