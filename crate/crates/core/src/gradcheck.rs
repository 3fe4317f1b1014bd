//! Central finite-difference checks of every analytic gradient.
//!
//! Relative errors are norm-wise over the whole gradient of a trial:
//! `|a - f| / max(|a|, |f|, 1e-8)`.

use std::collections::BTreeSet;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::Serialize;

use crate::corpus::{Corpus, TokenId, TokenizerConfig};
use crate::encoder::{encode, encode_backward, init_params, EncoderParams, GradBuffer, Pooling};
use crate::losses::{ntxent_loss, supcon_loss, LossConfig};
use crate::seeded_rng;
use crate::synth::{generate, SynthSpec};
use crate::trainer::{evaluate_plan, sample_plan, TrainConfig};

pub const FD_STEP: f64 = 1e-5;
pub const LOSS_TOLERANCE: f64 = 1e-4;
pub const ADJOINT_TOLERANCE: f64 = 1e-6;
pub const TEMPERATURES: [f64; 4] = [0.5, 1.0, 5.0, 7.0];
pub const END_TO_END_ROWS: usize = 20;

pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut analytic.iter().zip(numeric).map(|(a, f)| a - f));
    let scale = norm(&mut analytic.iter().copied())
        .max(norm(&mut numeric.iter().copied()))
        .max(1e-8);
    diff / scale
}

/// Central differences of `f` with respect to every entry of `reps`.
pub fn numeric_gradient(
    reps: &[Vec<f64>],
    h: f64,
    mut f: impl FnMut(&[Vec<f64>]) -> f64,
) -> Vec<Vec<f64>> {
    let mut work = reps.to_vec();
    let mut out = vec![vec![0.0; reps.first().map_or(0, Vec::len)]; reps.len()];
    for i in 0..reps.len() {
        for j in 0..reps[i].len() {
            let x = reps[i][j];
            work[i][j] = x + h;
            let plus = f(&work);
            work[i][j] = x - h;
            let minus = f(&work);
            work[i][j] = x;
            out[i][j] = (plus - minus) / (2.0 * h);
        }
    }
    out
}

fn random_matrix<R: Rng + ?Sized>(rows: usize, dim: usize, rng: &mut R) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect()
}

fn flatten(m: &[Vec<f64>]) -> Vec<f64> {
    m.iter().flatten().copied().collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SupconCase {
    pub reps: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub tau: f64,
}

/// Between 2 and 4 classes, each repeated at least twice, `N <= 8`, `d <= 8`.
pub fn random_supcon_case<R: Rng + ?Sized>(rng: &mut R) -> SupconCase {
    let classes = rng.gen_range(2..=4);
    let per_class = rng.gen_range(2..=8 / classes);
    let dim = rng.gen_range(1..=8);
    let mut labels: Vec<usize> = (0..classes * per_class).map(|i| i % classes).collect();
    labels.shuffle(rng);
    SupconCase {
        reps: random_matrix(labels.len(), dim, rng),
        labels,
        tau: TEMPERATURES[rng.gen_range(0..TEMPERATURES.len())],
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NtxentCase {
    pub originals: Vec<Vec<f64>>,
    pub views: Vec<Vec<f64>>,
    pub tau: f64,
}

/// Between 1 and 4 pairs, so the batch holds at most 8 elements.
pub fn random_ntxent_case<R: Rng + ?Sized>(rng: &mut R) -> NtxentCase {
    let pairs = rng.gen_range(1..=4);
    let dim = rng.gen_range(1..=8);
    NtxentCase {
        originals: random_matrix(pairs, dim, rng),
        views: random_matrix(pairs, dim, rng),
        tau: TEMPERATURES[rng.gen_range(0..TEMPERATURES.len())],
    }
}

pub fn supcon_trial_error(case: &SupconCase) -> f64 {
    let out = supcon_loss(&case.reps, &case.labels, case.tau).expect("valid supcon case");
    let numeric = numeric_gradient(&case.reps, FD_STEP, |r| {
        supcon_loss(r, &case.labels, case.tau).unwrap().value
    });
    relative_error(&flatten(&out.grads), &flatten(&numeric))
}

pub fn ntxent_trial_error(case: &NtxentCase) -> f64 {
    let n = case.originals.len();
    let out = ntxent_loss(&case.originals, &case.views, case.tau).expect("valid ntxent case");
    let joint: Vec<Vec<f64>> = case.originals.iter().chain(&case.views).cloned().collect();
    let numeric = numeric_gradient(&joint, FD_STEP, |r| {
        ntxent_loss(&r[..n], &r[n..], case.tau).unwrap().value
    });
    relative_error(&flatten(&out.grads), &flatten(&numeric))
}

/// Directional-derivative check of the encoder adjoint on one random case.
pub fn adjoint_trial_error<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let buckets = 16;
    let dim = rng.gen_range(2..=8);
    let params = init_params(buckets, dim, 1.0, rng).unwrap();
    let len = rng.gen_range(1..=10);
    let tokens: Vec<TokenId> = (0..len)
        .map(|_| rng.gen_range(0..buckets as TokenId))
        .collect();
    let upstream: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let direction: Vec<f64> = (0..buckets * dim)
        .map(|_| rng.gen_range(-1.0..1.0))
        .collect();

    let mut buf = GradBuffer::new();
    encode_backward(&params, &tokens, &upstream, &mut buf).unwrap();
    let analytic: f64 = buf
        .rows()
        .map(|(b, g)| {
            g.iter()
                .zip(&direction[b * dim..(b + 1) * dim])
                .map(|(x, y)| x * y)
                .sum::<f64>()
        })
        .sum();

    let probe = |sign: f64| {
        let table = params
            .table()
            .iter()
            .zip(&direction)
            .map(|(t, d)| t + sign * FD_STEP * d)
            .collect();
        let shifted = EncoderParams::from_table(table, buckets, dim).unwrap();
        let rep = encode(&shifted, &tokens).unwrap();
        rep.iter().zip(&upstream).map(|(a, b)| a * b).sum::<f64>()
    };
    let numeric = (probe(1.0) - probe(-1.0)) / (2.0 * FD_STEP);
    relative_error(&[analytic], &[numeric])
}

fn end_to_end_setup() -> (Corpus, TrainConfig) {
    let out = generate(&SynthSpec {
        class_count: 9,
        docs_per_class: 10,
        vocab_per_class: 6,
        shared_vocab: 12,
        tokens_per_doc: 7,
        signature_ratio: 0.7,
        seed: 11,
        min_split_classes: 3,
    })
    .expect("valid synth spec");
    let tokenizer = TokenizerConfig::with_buckets(256);
    let corpus = Corpus::new(out.documents, out.splits, tokenizer).expect("synthetic corpus loads");
    let cfg = TrainConfig {
        n: 3,
        k: 1,
        m: 2,
        total_episodes: 10,
        dim: 6,
        tokenizer,
        loss: LossConfig {
            n_task: 3,
            n_inst: 4,
            ..LossConfig::default()
        },
        ..TrainConfig::default()
    };
    (corpus, cfg)
}

/// Finite differences of the total training objective over `rows` sampled
/// embedding rows, compared with the accumulated table gradient.
pub fn end_to_end_trial_error(seed: u64, trial: u64, rows: usize, pooling: Pooling) -> f64 {
    let (corpus, cfg) = end_to_end_setup();
    let mut rng = seeded_rng(seed, trial);
    let step = rng.gen_range(0..cfg.total_episodes);
    let mut params = init_params(256, cfg.dim, 1.0, &mut rng).unwrap();
    let plan = sample_plan(&corpus, None, &cfg, step, &mut rng).expect("plan samples");
    let mut grads = GradBuffer::new();
    evaluate_plan(&params, &plan, &cfg.loss, pooling, Some(&mut grads)).unwrap();

    // prefer touched rows; untouched rows must have zero gradient too
    let touched: Vec<usize> = grads.rows().map(|(b, _)| b).collect();
    let mut chosen: BTreeSet<usize> = sample(&mut rng, touched.len(), rows.min(touched.len()))
        .into_iter()
        .map(|i| touched[i])
        .collect();
    while chosen.len() < rows.min(params.buckets()) {
        chosen.insert(rng.gen_range(0..params.buckets()));
    }

    let dim = params.dim();
    let mut analytic = Vec::with_capacity(chosen.len() * dim);
    let mut numeric = Vec::with_capacity(chosen.len() * dim);
    for &b in &chosen {
        for j in 0..dim {
            analytic.push(grads.row(b).map_or(0.0, |g| g[j]));
            let x = params.row(b)[j];
            let mut value_at = |v: f64| {
                params.row_mut(b)[j] = v;
                evaluate_plan(&params, &plan, &cfg.loss, pooling, None)
                    .unwrap()
                    .total
            };
            let plus = value_at(x + FD_STEP);
            let minus = value_at(x - FD_STEP);
            params.row_mut(b)[j] = x;
            numeric.push((plus - minus) / (2.0 * FD_STEP));
        }
    }
    relative_error(&analytic, &numeric)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub trials: usize,
    pub max_relative_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl CheckResult {
    fn from_errors(name: &str, errors: &[f64], tolerance: f64) -> Self {
        let max = errors.iter().copied().fold(0.0, f64::max);
        let finite = errors.iter().all(|e| e.is_finite());
        Self {
            name: name.into(),
            trials: errors.len(),
            max_relative_error: max,
            tolerance,
            passed: finite && max <= tolerance,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub seed: u64,
    pub step: f64,
    pub checks: Vec<CheckResult>,
    pub passed: bool,
}

pub fn check_supcon(seed: u64, trials: usize) -> CheckResult {
    let mut rng = seeded_rng(seed, 1);
    let errors: Vec<f64> = (0..trials)
        .map(|_| supcon_trial_error(&random_supcon_case(&mut rng)))
        .collect();
    CheckResult::from_errors("supcon", &errors, LOSS_TOLERANCE)
}

pub fn check_ntxent(seed: u64, trials: usize) -> CheckResult {
    let mut rng = seeded_rng(seed, 2);
    let errors: Vec<f64> = (0..trials)
        .map(|_| ntxent_trial_error(&random_ntxent_case(&mut rng)))
        .collect();
    CheckResult::from_errors("ntxent", &errors, LOSS_TOLERANCE)
}

pub fn check_encoder_adjoint(seed: u64, trials: usize) -> CheckResult {
    let mut rng = seeded_rng(seed, 3);
    let errors: Vec<f64> = (0..trials).map(|_| adjoint_trial_error(&mut rng)).collect();
    CheckResult::from_errors("encoder_adjoint", &errors, ADJOINT_TOLERANCE)
}

pub fn check_end_to_end(seed: u64, trials: usize) -> CheckResult {
    let errors: Vec<f64> = (0..trials as u64)
        .map(|t| end_to_end_trial_error(seed, 1000 + t, END_TO_END_ROWS, Pooling::Mean))
        .collect();
    CheckResult::from_errors("end_to_end", &errors, LOSS_TOLERANCE)
}

/// The full suite: `trials` random cases per loss and for the adjoint, and
/// a handful of end-to-end plans.
pub fn run_suite(seed: u64, trials: usize) -> GradcheckReport {
    let checks = vec![
        check_supcon(seed, trials),
        check_ntxent(seed, trials),
        check_encoder_adjoint(seed, trials),
        check_end_to_end(seed, trials.clamp(1, 5)),
    ];
    GradcheckReport {
        seed,
        step: FD_STEP,
        passed: checks.iter().all(|c| c.passed),
        checks,
    }
}
