//! Episode-driven optimization.
//!
//! Each episode draws an [`EpisodePlan`] (the batch, the unlabeled pairs and
//! the auxiliary tasks, all as token sequences), evaluates the combined
//! objective and its gradient with respect to the embedding table, and takes
//! one Adam step. Splitting sampling from evaluation lets the finite
//! difference checks re-evaluate the exact same objective.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{view_from_tokens, AugmentError, AugmentationStore, EdaParams};
use crate::corpus::{Corpus, CorpusError, Split, TokenId, TokenizerConfig};
use crate::encoder::{
    encode_pooled, encode_pooled_backward, init_params, save_checkpoint, EncoderError,
    EncoderParams, GradBuffer, Pooling,
};
use crate::episodes::{
    build_batch, sample_aux_tasks, sample_episode, sample_unlabeled, EpisodeError,
};
use crate::eval::{evaluate, EvalError, EvalSpec, Predictor};
use crate::losses::{
    anneal_alpha, ntxent_loss, supcon_loss, task_representation, total_loss, LossConfig, LossError,
};
use crate::seeded_rng;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("non-finite gradient in bucket {bucket}, component {component}: {value}")]
    NonFiniteGradient {
        bucket: usize,
        component: usize,
        value: f64,
    },
    #[error("non-finite parameter after update in bucket {bucket}")]
    NonFiniteParameter { bucket: usize },
    #[error("invalid train config: {0}")]
    InvalidConfig(String),
    #[error("optimizer state shape mismatch: {0}")]
    StateShape(String),
    #[error(transparent)]
    Episode(#[from] EpisodeError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("failed to write {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl TrainError {
    /// Whether the failure is a numerical one (non-finite loss or gradient).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            TrainError::NonFiniteGradient { .. }
                | TrainError::NonFiniteParameter { .. }
                | TrainError::Loss(LossError::NonFinite(_))
        )
    }
}

/// Adam first/second moments over the full table, plus the step count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    pub fn new(params: &EncoderParams) -> Self {
        let n = params.table().len();
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn from_parts(m: Vec<f64>, v: Vec<f64>, t: u64) -> Result<Self, TrainError> {
        if m.len() != v.len() {
            return Err(TrainError::StateShape(format!(
                "moment blocks of length {} and {}",
                m.len(),
                v.len()
            )));
        }
        if m.iter().chain(&v).any(|x| !x.is_finite()) {
            return Err(TrainError::StateShape("non-finite moment".into()));
        }
        Ok(Self { m, v, t })
    }

    pub fn first_moment(&self) -> &[f64] {
        &self.m
    }

    pub fn second_moment(&self) -> &[f64] {
        &self.v
    }

    pub fn step(&self) -> u64 {
        self.t
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub n: usize,
    pub k: usize,
    pub m: usize,
    pub total_episodes: u64,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub val_every: u64,
    pub val_episodes: usize,
    pub seed: u64,
    pub loss: LossConfig,
    pub eda: EdaParams,
    pub augment_path: Option<PathBuf>,
    pub disable_task: bool,
    pub disable_inst: bool,
    pub dim: usize,
    pub init_scale: f64,
    pub tokenizer: TokenizerConfig,
    /// Decay moments of untouched rows every step as well.
    pub dense_adam: bool,
    pub normalize: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            n: 5,
            k: 1,
            m: 5,
            total_episodes: 1000,
            lr: 0.05,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            val_every: 100,
            val_episodes: 100,
            seed: 0,
            loss: LossConfig::default(),
            eda: EdaParams::default(),
            augment_path: None,
            disable_task: false,
            disable_inst: false,
            dim: 64,
            init_scale: 0.1,
            tokenizer: TokenizerConfig::default(),
            dense_adam: false,
            normalize: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |msg: String| Err(TrainError::InvalidConfig(msg));
        if self.n == 0 || self.k == 0 || self.m == 0 {
            return bad(format!(
                "episode shape n={} k={} m={}",
                self.n, self.k, self.m
            ));
        }
        if self.n < 2 {
            return bad("n must be at least 2 for the supervised contrastive loss".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        for (name, b) in [
            ("adam_beta1", self.adam_beta1),
            ("adam_beta2", self.adam_beta2),
        ] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if self.adam_eps.is_nan() || self.adam_eps < 0.0 {
            return bad(format!(
                "adam_eps must be non-negative, got {}",
                self.adam_eps
            ));
        }
        if self.val_every == 0 || self.val_episodes == 0 {
            return bad("val_every and val_episodes must be positive".into());
        }
        if self.dim < 2 {
            return bad(format!("dim must be at least 2, got {}", self.dim));
        }
        self.loss.validate()?;
        self.eda.validate()?;
        self.tokenizer.validate()?;
        Ok(())
    }

    pub fn pooling(&self) -> Pooling {
        Pooling::from_normalize(self.normalize)
    }

    /// Weight of the supervised term at `step`; pinned to 1 when both
    /// regularizers are disabled.
    pub fn alpha_at(&self, step: u64) -> Result<f64, TrainError> {
        if self.disable_task && self.disable_inst {
            return Ok(1.0);
        }
        Ok(anneal_alpha(step, self.total_episodes.max(1), &self.loss)?)
    }

    pub fn effective_beta(&self) -> f64 {
        if self.disable_task {
            0.0
        } else {
            self.loss.beta
        }
    }

    fn inst_enabled(&self) -> bool {
        !self.disable_inst && self.loss.n_inst > 0
    }

    fn task_enabled(&self) -> bool {
        !self.disable_task && self.loss.n_task > 0
    }
}

/// Bias-corrected Adam on the rows present in `grads` (all rows when
/// `cfg.dense_adam`). Gradients are checked for finiteness before anything
/// is modified.
pub fn adam_step(
    params: &mut EncoderParams,
    grads: &GradBuffer,
    state: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<(), TrainError> {
    let dim = params.dim();
    if state.m.len() != params.table().len() {
        return Err(TrainError::StateShape(format!(
            "state has {} entries, table has {}",
            state.m.len(),
            params.table().len()
        )));
    }
    for (bucket, g) in grads.rows() {
        if bucket >= params.buckets() {
            return Err(TrainError::StateShape(format!(
                "gradient for bucket {bucket}"
            )));
        }
        if let Some((component, &value)) = g.iter().enumerate().find(|(_, x)| !x.is_finite()) {
            return Err(TrainError::NonFiniteGradient {
                bucket,
                component,
                value,
            });
        }
    }

    state.t += 1;
    let t = state.t as f64;
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let corr1 = 1.0 - b1.powf(t);
    let corr2 = 1.0 - b2.powf(t);

    let mut update_row = |bucket: usize, g: Option<&[f64]>, params: &mut EncoderParams| {
        let base = bucket * dim;
        let row = params.row_mut(bucket);
        for j in 0..dim {
            let gj = g.map_or(0.0, |g| g[j]);
            let m = &mut state.m[base + j];
            let v = &mut state.v[base + j];
            *m = b1 * *m + (1.0 - b1) * gj;
            *v = b2 * *v + (1.0 - b2) * gj * gj;
            let m_hat = *m / corr1;
            let v_hat = *v / corr2;
            row[j] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.adam_eps);
        }
    };

    if cfg.dense_adam {
        for bucket in 0..params.buckets() {
            update_row(bucket, grads.row(bucket), params);
        }
    } else {
        for (bucket, g) in grads.rows() {
            update_row(bucket, Some(g), params);
        }
    }
    for (bucket, _) in grads.rows() {
        if params.row(bucket).iter().any(|x| !x.is_finite()) {
            return Err(TrainError::NonFiniteParameter { bucket });
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairPlan {
    pub originals: Vec<Vec<TokenId>>,
    pub views: Vec<Vec<TokenId>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskPlan {
    pub members: Vec<Vec<TokenId>>,
    pub views: Vec<Vec<TokenId>>,
}

/// Everything one training episode contributes to the objective.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodePlan {
    pub step: u64,
    pub batch: Vec<Vec<TokenId>>,
    pub labels: Vec<String>,
    pub inst: Option<PairPlan>,
    pub tasks: Option<Vec<TaskPlan>>,
    pub alpha: f64,
    pub beta: f64,
}

fn view_of<R: Rng + ?Sized>(
    corpus: &Corpus,
    id: &str,
    store: Option<&AugmentationStore>,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<(Vec<TokenId>, Vec<TokenId>), TrainError> {
    let original = corpus.tokens_of(id)?.to_vec();
    let view = view_from_tokens(id, &original, store, &cfg.eda, corpus.tokenizer(), rng)?;
    Ok((original, view))
}

/// Samples the episode, unlabeled pairs and auxiliary tasks, in that order.
pub fn sample_plan<R: Rng + ?Sized>(
    corpus: &Corpus,
    store: Option<&AugmentationStore>,
    cfg: &TrainConfig,
    step: u64,
    rng: &mut R,
) -> Result<EpisodePlan, TrainError> {
    let episode = sample_episode(corpus, Split::Train, cfg.n, cfg.k, cfg.m, rng)?;
    let batch = build_batch(&episode);
    let batch_tokens = batch
        .items
        .iter()
        .map(|id| Ok(corpus.tokens_of(id)?.to_vec()))
        .collect::<Result<Vec<_>, TrainError>>()?;

    let inst = if cfg.inst_enabled() {
        let ids = sample_unlabeled(corpus, cfg.loss.n_inst, rng)?;
        let mut plan = PairPlan {
            originals: Vec::with_capacity(ids.len()),
            views: Vec::with_capacity(ids.len()),
        };
        for id in &ids {
            let (o, v) = view_of(corpus, id, store, cfg, rng)?;
            plan.originals.push(o);
            plan.views.push(v);
        }
        Some(plan)
    } else {
        None
    };

    let tasks = if cfg.task_enabled() {
        let tasks = sample_aux_tasks(corpus, cfg.loss.n_task, cfg.n, cfg.k, rng)?;
        let mut plans = Vec::with_capacity(tasks.len());
        for task in &tasks {
            let mut plan = TaskPlan {
                members: Vec::with_capacity(task.support.len()),
                views: Vec::with_capacity(task.support.len()),
            };
            for id in &task.support {
                let (o, v) = view_of(corpus, id, store, cfg, rng)?;
                plan.members.push(o);
                plan.views.push(v);
            }
            plans.push(plan);
        }
        Some(plans)
    } else {
        None
    };

    Ok(EpisodePlan {
        step,
        batch: batch_tokens,
        labels: batch.labels,
        inst,
        tasks,
        alpha: cfg.alpha_at(step)?,
        beta: cfg.effective_beta(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObjectiveValue {
    pub l_con: f64,
    pub l_inst: f64,
    pub l_task: f64,
    pub total: f64,
}

fn encode_all(
    params: &EncoderParams,
    seqs: &[Vec<TokenId>],
    pooling: Pooling,
) -> Result<Vec<Vec<f64>>, TrainError> {
    seqs.iter()
        .map(|s| Ok(encode_pooled(params, s, pooling)?))
        .collect()
}

fn mean_rep(
    params: &EncoderParams,
    seqs: &[Vec<TokenId>],
    pooling: Pooling,
) -> Result<Vec<f64>, TrainError> {
    Ok(task_representation(&encode_all(params, seqs, pooling)?)?)
}

/// Combined objective of a plan and, with `grads`, its table gradient.
pub fn evaluate_plan(
    params: &EncoderParams,
    plan: &EpisodePlan,
    loss: &LossConfig,
    pooling: Pooling,
    grads: Option<&mut GradBuffer>,
) -> Result<ObjectiveValue, TrainError> {
    let reps = encode_all(params, &plan.batch, pooling)?;
    let con = supcon_loss(&reps, &plan.labels, loss.tau_con)?;

    let inst = match &plan.inst {
        Some(p) => {
            let a = encode_all(params, &p.originals, pooling)?;
            let b = encode_all(params, &p.views, pooling)?;
            Some(ntxent_loss(&a, &b, loss.tau_inst)?)
        }
        None => None,
    };

    let task = match &plan.tasks {
        Some(tasks) if !tasks.is_empty() => {
            let a = tasks
                .iter()
                .map(|t| mean_rep(params, &t.members, pooling))
                .collect::<Result<Vec<_>, _>>()?;
            let b = tasks
                .iter()
                .map(|t| mean_rep(params, &t.views, pooling))
                .collect::<Result<Vec<_>, _>>()?;
            Some(ntxent_loss(&a, &b, loss.tau_task)?)
        }
        _ => None,
    };

    let total = total_loss(&con, inst.as_ref(), task.as_ref(), plan.alpha, plan.beta);
    if !total.value.is_finite() {
        return Err(LossError::NonFinite("total objective").into());
    }

    if let Some(buf) = grads {
        let mut g = total.grads.iter();
        for seq in &plan.batch {
            encode_pooled_backward(params, seq, pooling, g.next().unwrap(), buf)?;
        }
        if let Some(p) = &plan.inst {
            for seq in p.originals.iter().chain(&p.views) {
                encode_pooled_backward(params, seq, pooling, g.next().unwrap(), buf)?;
            }
        }
        if let (Some(tasks), Some(_)) = (&plan.tasks, &task) {
            for views in [false, true] {
                for t in tasks {
                    let upstream = g.next().unwrap();
                    let members = if views { &t.views } else { &t.members };
                    let share: Vec<f64> =
                        upstream.iter().map(|x| x / members.len() as f64).collect();
                    for seq in members {
                        encode_pooled_backward(params, seq, pooling, &share, buf)?;
                    }
                }
            }
        }
        debug_assert!(g.next().is_none());
    }

    Ok(ObjectiveValue {
        l_con: con.value,
        l_inst: inst.map_or(0.0, |l| l.value),
        l_task: task.map_or(0.0, |l| l.value),
        total: total.value,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub episode: u64,
    pub l_con: f64,
    pub l_inst: f64,
    pub l_task: f64,
    pub total: f64,
    pub alpha: f64,
    pub beta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum HistoryEvent {
    Episode(EpisodeRecord),
    Validation { episode: u64, val_accuracy: f64 },
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub events: Vec<HistoryEvent>,
}

impl TrainHistory {
    pub fn episodes(&self) -> impl Iterator<Item = &EpisodeRecord> {
        self.events.iter().filter_map(|e| match e {
            HistoryEvent::Episode(r) => Some(r),
            _ => None,
        })
    }

    pub fn validations(&self) -> impl Iterator<Item = (u64, f64)> + '_ {
        self.events.iter().filter_map(|e| match e {
            HistoryEvent::Validation {
                episode,
                val_accuracy,
            } => Some((*episode, *val_accuracy)),
            _ => None,
        })
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.events {
            out.push_str(&serde_json::to_string(e).expect("history events serialize"));
            out.push('\n');
        }
        out
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<(), TrainError> {
        fs::File::create(path)
            .and_then(|mut f| f.write_all(self.to_jsonl().as_bytes()))
            .map_err(|source| TrainError::Io {
                path: path.to_owned(),
                source,
            })
    }
}

/// One full training episode: sample, evaluate, backpropagate, update.
#[allow(clippy::too_many_arguments)]
pub fn train_episode<R: Rng + ?Sized>(
    params: &mut EncoderParams,
    state: &mut AdamState,
    corpus: &Corpus,
    store: Option<&AugmentationStore>,
    cfg: &TrainConfig,
    step: u64,
    rng: &mut R,
) -> Result<EpisodeRecord, TrainError> {
    let plan = sample_plan(corpus, store, cfg, step, rng)?;
    let mut grads = GradBuffer::new();
    let value = evaluate_plan(params, &plan, &cfg.loss, cfg.pooling(), Some(&mut grads))?;
    adam_step(params, &grads, state, cfg)?;
    Ok(EpisodeRecord {
        episode: step,
        l_con: value.l_con,
        l_inst: value.l_inst,
        l_task: value.l_task,
        total: value.total,
        alpha: plan.alpha,
        beta: plan.beta,
    })
}

/// Index of the first maximum; later ties never win.
pub fn best_index(scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &s) in scores.iter().enumerate() {
        if best.is_none_or(|b| s > scores[b]) {
            best = Some(i);
        }
    }
    best
}

const VALIDATION_SALT: u64 = 0x5eed_0f7a_11c0_ffee;

/// Seed of the validation rng; every validation scores the same episodes.
pub fn validation_seed(cfg: &TrainConfig) -> u64 {
    cfg.seed ^ VALIDATION_SALT
}

#[derive(Debug)]
pub struct TrainOutcome {
    /// Parameters after the last episode.
    pub params: EncoderParams,
    pub history: TrainHistory,
    /// Written with the highest validation accuracy (earliest on ties), or
    /// with the initial parameters when no validation ran.
    pub best_checkpoint: PathBuf,
    pub best_val_accuracy: Option<f64>,
}

pub struct TrainPaths<'a> {
    pub checkpoint: &'a Path,
    pub history: Option<&'a Path>,
}

/// Runs the full loop. `observer` sees every history event as it happens.
pub fn train(
    corpus: &Corpus,
    cfg: &TrainConfig,
    store: Option<&AugmentationStore>,
    paths: TrainPaths<'_>,
    threads: usize,
    mut observer: impl FnMut(&HistoryEvent),
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if corpus.tokenizer().bucket_count != cfg.tokenizer.bucket_count {
        return Err(TrainError::InvalidConfig(format!(
            "corpus tokenized into {} buckets, config expects {}",
            corpus.tokenizer().bucket_count,
            cfg.tokenizer.bucket_count
        )));
    }
    if let Some(s) = store {
        s.bind(corpus)?;
    }
    // fail on unusable shapes before any work
    let mut probe = seeded_rng(cfg.seed, u64::MAX);
    sample_episode(corpus, Split::Train, cfg.n, cfg.k, cfg.m, &mut probe)?;
    sample_episode(corpus, Split::Val, cfg.n, cfg.k, cfg.m, &mut probe)?;

    let buckets = corpus.tokenizer().bucket_count as usize;
    let mut params = init_params(
        buckets,
        cfg.dim,
        cfg.init_scale,
        &mut seeded_rng(cfg.seed, 0),
    )?;
    let mut state = AdamState::new(&params);
    let mut history = TrainHistory::default();
    let mut best: Option<f64> = None;

    let val_spec = EvalSpec {
        predictor: Predictor::Nn,
        pooling: cfg.pooling(),
        threads,
        ..EvalSpec::new(
            Split::Val,
            cfg.n,
            cfg.k,
            cfg.m,
            cfg.val_episodes,
            validation_seed(cfg),
        )
    };

    for step in 0..cfg.total_episodes {
        let mut rng = seeded_rng(cfg.seed, step + 1);
        let record = train_episode(&mut params, &mut state, corpus, store, cfg, step, &mut rng)?;
        let event = HistoryEvent::Episode(record);
        observer(&event);
        history.events.push(event);

        let done = step + 1;
        if done % cfg.val_every == 0 || done == cfg.total_episodes {
            let acc = evaluate(&params, corpus, &val_spec)?.mean;
            let event = HistoryEvent::Validation {
                episode: step,
                val_accuracy: acc,
            };
            observer(&event);
            history.events.push(event);
            if best.is_none_or(|b| acc > b) {
                best = Some(acc);
                save_checkpoint(paths.checkpoint, &params, Some(&state))?;
            }
        }
    }
    if best.is_none() {
        save_checkpoint(paths.checkpoint, &params, Some(&state))?;
    }
    if let Some(path) = paths.history {
        history.write_jsonl(path)?;
    }

    Ok(TrainOutcome {
        params,
        history,
        best_checkpoint: paths.checkpoint.to_owned(),
        best_val_accuracy: best,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::load_checkpoint;
    use crate::synth::{generate, SynthSpec};

    fn small_corpus() -> Corpus {
        let out = generate(&SynthSpec {
            class_count: 12,
            docs_per_class: 12,
            vocab_per_class: 6,
            shared_vocab: 10,
            tokens_per_doc: 6,
            signature_ratio: 0.8,
            seed: 3,
            min_split_classes: 3,
        })
        .unwrap();
        Corpus::new(
            out.documents,
            out.splits,
            TokenizerConfig::with_buckets(1024),
        )
        .unwrap()
    }

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            n: 3,
            k: 1,
            m: 2,
            total_episodes: 12,
            val_every: 5,
            val_episodes: 8,
            dim: 8,
            tokenizer: TokenizerConfig::with_buckets(1024),
            loss: LossConfig {
                n_task: 3,
                n_inst: 4,
                ..LossConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn adam_empty_buffer_is_noop() {
        let mut params = EncoderParams::from_table(vec![0.5; 8], 4, 2).unwrap();
        let before = params.clone();
        let mut state = AdamState::new(&params);
        adam_step(
            &mut params,
            &GradBuffer::new(),
            &mut state,
            &TrainConfig::default(),
        )
        .unwrap();
        assert_eq!(params, before);
        assert_eq!(state.step(), 1);
    }

    /// Plain scalar Adam, written out independently of `adam_step`.
    fn scalar_adam(theta: f64, grads: &[f64], lr: f64, b1: f64, b2: f64, eps: f64) -> f64 {
        let (mut th, mut m, mut v) = (theta, 0.0, 0.0);
        for (i, g) in grads.iter().enumerate() {
            let t = (i + 1) as i32;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            th -= lr * (m / (1.0 - b1.powi(t))) / ((v / (1.0 - b2.powi(t))).sqrt() + eps);
        }
        th
    }

    #[test]
    fn adam_matches_scalar_oracle() {
        let cfg = TrainConfig::default();
        let mut params = EncoderParams::from_table(vec![0.0; 6], 3, 2).unwrap();
        let mut state = AdamState::new(&params);
        let dummy = EncoderParams::zeros(3, 2).unwrap();
        let seq: [[f64; 2]; 3] = [[0.3, -2.0], [0.1, 0.5], [-0.7, 0.0]];
        for (i, g) in seq.iter().enumerate() {
            let mut buf = GradBuffer::new();
            encode_pooled_backward(&dummy, &[1], Pooling::Mean, g, &mut buf).unwrap();
            adam_step(&mut params, &buf, &mut state, &cfg).unwrap();
            if i == 0 {
                // bias correction cancels on the first step
                assert!((params.row(1)[0] - -0.04999999833333339).abs() < 1e-15);
                assert!((params.row(1)[0] - (-cfg.lr * 0.3 / (0.3 + 1e-8))).abs() < 1e-15);
            }
        }
        for j in 0..2 {
            let gs: Vec<f64> = seq.iter().map(|g| g[j]).collect();
            let want = scalar_adam(0.0, &gs, cfg.lr, 0.9, 0.999, 1e-8);
            assert!((params.row(1)[j] - want).abs() < 1e-14);
        }
        assert_eq!(params.row(0), &[0.0, 0.0]);
        assert_eq!(state.first_moment()[0], 0.0);
    }

    #[test]
    fn adam_rejects_non_finite() {
        let dummy = EncoderParams::zeros(2, 2).unwrap();
        let mut params = dummy.clone();
        let mut state = AdamState::new(&params);
        let mut buf = GradBuffer::new();
        encode_pooled_backward(&dummy, &[0], Pooling::Mean, &[f64::NAN, 1.0], &mut buf).unwrap();
        let err = adam_step(&mut params, &buf, &mut state, &TrainConfig::default()).unwrap_err();
        assert!(err.is_numerical());
        assert_eq!(state.step(), 0);
        assert_eq!(params, dummy);
    }

    #[test]
    fn dense_adam_decays_untouched_rows() {
        let cfg = TrainConfig {
            dense_adam: true,
            ..TrainConfig::default()
        };
        let dummy = EncoderParams::zeros(2, 2).unwrap();
        let mut params = dummy.clone();
        let mut state = AdamState::new(&params);
        let mut buf = GradBuffer::new();
        encode_pooled_backward(&dummy, &[0], Pooling::Mean, &[1.0, 1.0], &mut buf).unwrap();
        adam_step(&mut params, &buf, &mut state, &cfg).unwrap();
        let after_one = params.row(0)[0];
        adam_step(&mut params, &GradBuffer::new(), &mut state, &cfg).unwrap();
        assert!(
            params.row(0)[0] < after_one,
            "momentum keeps moving the row"
        );
        assert_eq!(params.row(1), &[0.0, 0.0]);
    }

    #[test]
    fn best_index_tie_rule() {
        assert_eq!(best_index(&[0.4, 0.7, 0.7]), Some(1));
        assert_eq!(best_index(&[]), None);
        assert_eq!(best_index(&[0.2]), Some(0));
    }

    #[test]
    fn episode_record_accounting() {
        let corpus = small_corpus();
        let cfg = small_cfg();
        let mut params = init_params(1024, 8, 0.1, &mut seeded_rng(1, 0)).unwrap();
        let mut state = AdamState::new(&params);
        let rec = train_episode(
            &mut params,
            &mut state,
            &corpus,
            None,
            &cfg,
            0,
            &mut seeded_rng(1, 1),
        )
        .unwrap();
        assert!(rec.l_con > 0.0 && rec.l_inst > 0.0 && rec.l_task > 0.0);
        assert_eq!(rec.alpha, 0.95);
        assert_eq!(
            rec.total,
            rec.alpha * rec.l_con + (1.0 - rec.alpha) * rec.l_inst + rec.beta * rec.l_task
        );
    }

    #[test]
    fn ablation_flags() {
        let corpus = small_corpus();
        let mut cfg = small_cfg();
        cfg.disable_task = true;
        cfg.disable_inst = true;
        let mut params = init_params(1024, 8, 0.1, &mut seeded_rng(1, 0)).unwrap();
        let mut state = AdamState::new(&params);
        for step in 0..4 {
            let rec = train_episode(
                &mut params,
                &mut state,
                &corpus,
                None,
                &cfg,
                step,
                &mut seeded_rng(1, step + 1),
            )
            .unwrap();
            assert_eq!((rec.l_task, rec.l_inst, rec.alpha), (0.0, 0.0, 1.0));
            assert_eq!(rec.total, rec.l_con);
        }
    }

    #[test]
    fn episode_determinism() {
        let corpus = small_corpus();
        let cfg = small_cfg();
        let run = || {
            let mut params = init_params(1024, 8, 0.1, &mut seeded_rng(9, 0)).unwrap();
            let mut state = AdamState::new(&params);
            let rec = train_episode(
                &mut params,
                &mut state,
                &corpus,
                None,
                &cfg,
                3,
                &mut seeded_rng(9, 4),
            )
            .unwrap();
            (rec, params)
        };
        let (a, pa) = run();
        let (b, pb) = run();
        assert_eq!(a.total.to_bits(), b.total.to_bits());
        assert_eq!(a, b);
        assert_eq!(pa, pb);
    }

    #[test]
    fn train_loop_and_checkpoint() {
        let corpus = small_corpus();
        let cfg = small_cfg();
        let dir = tempfile::tempdir().unwrap();
        let ckpt = dir.path().join("best.bin");
        let hist = dir.path().join("history.jsonl");
        let paths = || TrainPaths {
            checkpoint: &ckpt,
            history: Some(&hist),
        };
        let out = train(&corpus, &cfg, None, paths(), 1, |_| {}).unwrap();
        assert_eq!(out.history.episodes().count(), 12);
        // after episodes 5, 10 and the final 12
        let vals: Vec<_> = out.history.validations().map(|(e, _)| e).collect();
        assert_eq!(vals, vec![4, 9, 11]);
        let accs: Vec<f64> = out.history.validations().map(|(_, a)| a).collect();
        assert_eq!(
            out.best_val_accuracy,
            Some(accs[best_index(&accs).unwrap()])
        );
        let (_, state) = load_checkpoint(&ckpt).unwrap();
        let best_step = vals[best_index(&accs).unwrap()];
        assert_eq!(state.unwrap().step(), best_step + 1);

        let lines = fs::read_to_string(&hist).unwrap();
        assert_eq!(lines.lines().count(), 15);
        let first: HistoryEvent = serde_json::from_str(lines.lines().next().unwrap()).unwrap();
        assert!(matches!(first, HistoryEvent::Episode(ref r) if r.episode == 0));

        let again = train(&corpus, &cfg, None, paths(), 2, |_| {}).unwrap();
        assert_eq!(again.history, out.history);
        assert_eq!(again.params, out.params);
    }

    #[test]
    fn zero_episodes_returns_initial_params() {
        let corpus = small_corpus();
        let cfg = TrainConfig {
            total_episodes: 0,
            ..small_cfg()
        };
        let dir = tempfile::tempdir().unwrap();
        let ckpt = dir.path().join("m.bin");
        let out = train(
            &corpus,
            &cfg,
            None,
            TrainPaths {
                checkpoint: &ckpt,
                history: None,
            },
            1,
            |_| {},
        )
        .unwrap();
        assert!(out.history.events.is_empty());
        let init = init_params(1024, 8, 0.1, &mut seeded_rng(cfg.seed, 0)).unwrap();
        assert_eq!(out.params, init);
        assert_eq!(load_checkpoint(&ckpt).unwrap().0, init);
    }

    #[test]
    fn config_json_round_trip_and_validation() {
        let cfg = TrainConfig::default();
        let json = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<TrainConfig>(&json).unwrap(), cfg);
        let partial: TrainConfig =
            serde_json::from_str(r#"{"lr": 0.01, "loss": {"beta": 0.2}}"#).unwrap();
        assert_eq!(partial.lr, 0.01);
        assert_eq!(partial.loss.beta, 0.2);
        assert_eq!(partial.loss.tau_con, 5.0);
        assert!(serde_json::from_str::<TrainConfig>(r#"{"learning_rate": 1}"#).is_err());
        assert!(TrainConfig {
            lr: 0.0,
            ..cfg.clone()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            adam_beta2: 1.0,
            ..cfg
        }
        .validate()
        .is_err());
    }
}
