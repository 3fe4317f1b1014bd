//! Command-line entry point.
//!
//! Results go to stdout as JSON and progress to stderr. Exit codes: 0 on
//! success, 1 on usage errors, 2 on data or validation errors, 3 on
//! numerical failures.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use crate::augment::{eda_augment, load_augmentations, AugmentationStore, EdaParams};
use crate::corpus::{corpus_stats, load_corpus, tokenize_words, Corpus, Split, TokenizerConfig};
use crate::encoder::{load_checkpoint, Pooling};
use crate::episodes::sample_episode;
use crate::eval::{dump_embeddings, evaluate, EvalSpec, Predictor};
use crate::gradcheck::run_suite;
use crate::seeded_rng;
use crate::synth::{generate, write_output, SynthSpec};
use crate::trainer::{train, HistoryEvent, TrainConfig, TrainError, TrainPaths};

pub const THREADS_ENV: &str = "CONTRASTNET_THREADS";

#[derive(Debug, Parser)]
#[command(
    name = "contrastnet",
    version,
    about = "Contrastive few-shot text classification"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
#[allow(clippy::large_enum_variant)]
pub enum Command {
    /// Train an encoder and keep the best checkpoint by validation accuracy.
    Train(TrainArgs),
    /// Score a checkpoint over sampled episodes.
    Eval(EvalArgs),
    /// Run the finite-difference gradient suites.
    Gradcheck(GradcheckArgs),
    /// Dump sampled episodes as JSON.
    Episodes(EpisodesArgs),
    /// Materialize augmented views to a paraphrase file.
    Augment(AugmentArgs),
    /// Write document embeddings as TSV.
    Embed(EmbedArgs),
    /// Print corpus statistics.
    Stats(StatsArgs),
    /// Generate a synthetic corpus.
    Synth(SynthArgs),
}

#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub splits: PathBuf,
}

#[derive(Debug, Clone, Default, Args)]
pub struct TokenizerArgs {
    #[arg(long)]
    pub buckets: Option<u32>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub lowercase: Option<bool>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub strip_punct: Option<bool>,
}

impl TokenizerArgs {
    fn apply(&self, tok: &mut TokenizerConfig) {
        set(&mut tok.bucket_count, self.buckets);
        set(&mut tok.lowercase, self.lowercase);
        set(&mut tok.strip_punct, self.strip_punct);
    }

    fn resolve(&self) -> TokenizerConfig {
        let mut tok = TokenizerConfig::default();
        self.apply(&mut tok);
        tok
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct EdaArgs {
    #[arg(long)]
    pub swap_count: Option<usize>,
    #[arg(long)]
    pub delete_prob: Option<f64>,
    #[arg(long)]
    pub insert_count: Option<usize>,
}

impl EdaArgs {
    fn apply(&self, eda: &mut EdaParams) {
        set(&mut eda.swap_count, self.swap_count);
        set(&mut eda.delete_prob, self.delete_prob);
        set(&mut eda.insert_count, self.insert_count);
    }
}

/// One optional flag per config field; a present flag beats the file.
#[derive(Debug, Clone, Default, Args)]
pub struct TrainOverrides {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long)]
    pub total_episodes: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub adam_beta1: Option<f64>,
    #[arg(long)]
    pub adam_beta2: Option<f64>,
    #[arg(long)]
    pub adam_eps: Option<f64>,
    #[arg(long)]
    pub val_every: Option<u64>,
    #[arg(long)]
    pub val_episodes: Option<usize>,
    #[arg(long)]
    pub tau_con: Option<f64>,
    #[arg(long)]
    pub tau_task: Option<f64>,
    #[arg(long)]
    pub tau_inst: Option<f64>,
    #[arg(long)]
    pub alpha0: Option<f64>,
    #[arg(long)]
    pub alpha_floor: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub n_task: Option<usize>,
    #[arg(long)]
    pub n_inst: Option<usize>,
    #[command(flatten)]
    pub eda: EdaArgs,
    #[arg(long = "augment-file")]
    pub augment_path: Option<PathBuf>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub disable_task: Option<bool>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub disable_inst: Option<bool>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub init_scale: Option<f64>,
    #[command(flatten)]
    pub tokenizer: TokenizerArgs,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub dense_adam: Option<bool>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub normalize: Option<bool>,
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

/// Layers the command line over the config file over the defaults.
pub fn resolve_train_config(file: Option<TrainConfig>, o: &TrainOverrides) -> TrainConfig {
    let mut cfg = file.unwrap_or_default();
    set(&mut cfg.seed, o.seed);
    set(&mut cfg.n, o.n);
    set(&mut cfg.k, o.k);
    set(&mut cfg.m, o.m);
    set(&mut cfg.total_episodes, o.total_episodes);
    set(&mut cfg.lr, o.lr);
    set(&mut cfg.adam_beta1, o.adam_beta1);
    set(&mut cfg.adam_beta2, o.adam_beta2);
    set(&mut cfg.adam_eps, o.adam_eps);
    set(&mut cfg.val_every, o.val_every);
    set(&mut cfg.val_episodes, o.val_episodes);
    set(&mut cfg.loss.tau_con, o.tau_con);
    set(&mut cfg.loss.tau_task, o.tau_task);
    set(&mut cfg.loss.tau_inst, o.tau_inst);
    set(&mut cfg.loss.alpha0, o.alpha0);
    set(&mut cfg.loss.alpha_floor, o.alpha_floor);
    set(&mut cfg.loss.beta, o.beta);
    set(&mut cfg.loss.n_task, o.n_task);
    set(&mut cfg.loss.n_inst, o.n_inst);
    o.eda.apply(&mut cfg.eda);
    if o.augment_path.is_some() {
        cfg.augment_path.clone_from(&o.augment_path);
    }
    set(&mut cfg.disable_task, o.disable_task);
    set(&mut cfg.disable_inst, o.disable_inst);
    set(&mut cfg.dim, o.dim);
    set(&mut cfg.init_scale, o.init_scale);
    o.tokenizer.apply(&mut cfg.tokenizer);
    set(&mut cfg.dense_adam, o.dense_adam);
    set(&mut cfg.normalize, o.normalize);
    cfg
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// JSON object with TrainConfig fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Best checkpoint path.
    #[arg(long)]
    pub out: PathBuf,
    /// History JSONL path.
    #[arg(long)]
    pub history: Option<PathBuf>,
    #[arg(long)]
    pub threads: Option<usize>,
    #[command(flatten)]
    pub overrides: TrainOverrides,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: Split,
    #[arg(long, default_value_t = 5)]
    pub n: usize,
    #[arg(long, default_value_t = 1)]
    pub k: usize,
    #[arg(long, default_value_t = 5)]
    pub m: usize,
    #[arg(long, default_value_t = 600)]
    pub episodes: usize,
    #[arg(long, value_enum, default_value_t = PredictorArg::Nn)]
    pub predictor: PredictorArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub normalize: Option<bool>,
    #[command(flatten)]
    pub tokenizer: TokenizerArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PredictorArg {
    Nn,
    Proto,
}

impl From<PredictorArg> for Predictor {
    fn from(p: PredictorArg) -> Self {
        match p {
            PredictorArg::Nn => Predictor::Nn,
            PredictorArg::Proto => Predictor::Proto,
        }
    }
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 100)]
    pub trials: usize,
}

#[derive(Debug, Args)]
pub struct EpisodesArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value = "train")]
    pub split: Split,
    #[arg(long, default_value_t = 5)]
    pub n: usize,
    #[arg(long, default_value_t = 1)]
    pub k: usize,
    #[arg(long, default_value_t = 5)]
    pub m: usize,
    #[arg(long, default_value_t = 1)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub tokenizer: TokenizerArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AugmentMethod {
    Eda,
}

#[derive(Debug, Args)]
pub struct AugmentArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_enum, default_value_t = AugmentMethod::Eda)]
    pub method: AugmentMethod,
    #[arg(long)]
    pub out: PathBuf,
    /// Views generated per document.
    #[arg(long, default_value_t = 1)]
    pub views: usize,
    /// Restrict to one split; all documents otherwise.
    #[arg(long)]
    pub split: Option<Split>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub eda: EdaArgs,
    #[command(flatten)]
    pub tokenizer: TokenizerArgs,
}

#[derive(Debug, Args)]
pub struct EmbedArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: Split,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub normalize: Option<bool>,
    #[command(flatten)]
    pub tokenizer: TokenizerArgs,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub tokenizer: TokenizerArgs,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = SynthSpec::default().class_count)]
    pub class_count: usize,
    #[arg(long, default_value_t = SynthSpec::default().docs_per_class)]
    pub docs_per_class: usize,
    #[arg(long, default_value_t = SynthSpec::default().vocab_per_class)]
    pub vocab_per_class: usize,
    #[arg(long, default_value_t = SynthSpec::default().shared_vocab)]
    pub shared_vocab: usize,
    #[arg(long, default_value_t = SynthSpec::default().tokens_per_doc)]
    pub tokens_per_doc: usize,
    #[arg(long, default_value_t = SynthSpec::default().signature_ratio)]
    pub signature_ratio: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = SynthSpec::default().min_split_classes)]
    pub min_split_classes: usize,
    #[arg(long)]
    pub out_data: PathBuf,
    #[arg(long)]
    pub out_splits: PathBuf,
}

impl SynthArgs {
    pub fn spec(&self) -> SynthSpec {
        SynthSpec {
            class_count: self.class_count,
            docs_per_class: self.docs_per_class,
            vocab_per_class: self.vocab_per_class,
            shared_vocab: self.shared_vocab,
            tokens_per_doc: self.tokens_per_doc,
            signature_ratio: self.signature_ratio,
            seed: self.seed,
            min_split_classes: self.min_split_classes,
        }
    }
}

/// A failed command, classified by exit code.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Failure {
    Usage(String),
    Data(String),
    Numerical(String),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Numerical(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Data(m) | Failure::Numerical(m) => m,
        }
    }

    fn data(e: impl std::fmt::Display) -> Self {
        Failure::Data(e.to_string())
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        if e.is_numerical() {
            Failure::Numerical(e.to_string())
        } else {
            Failure::Data(e.to_string())
        }
    }
}

/// `--threads` if given, else the environment override, else 1.
pub fn resolve_threads(flag: Option<usize>, env: Option<&str>) -> Result<usize, Failure> {
    let threads = match (flag, env) {
        (Some(t), _) => t,
        (None, Some(raw)) => raw.trim().parse().map_err(|_| {
            Failure::Usage(format!(
                "{THREADS_ENV} must be a positive integer, got {raw:?}"
            ))
        })?,
        (None, None) => 1,
    };
    if threads == 0 {
        return Err(Failure::Usage("thread count must be positive".into()));
    }
    Ok(threads)
}

fn threads_from(flag: Option<usize>) -> Result<usize, Failure> {
    let env = std::env::var(THREADS_ENV).ok();
    resolve_threads(flag, env.as_deref())
}

fn emit<T: Serialize>(value: &T) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).map_err(Failure::data)?;
    println!("{text}");
    Ok(())
}

fn load(data: &DataArgs, tok: TokenizerConfig) -> Result<Corpus, Failure> {
    load_corpus(&data.data, &data.splits, tok).map_err(Failure::data)
}

fn read_config(path: &Path) -> Result<TrainConfig, Failure> {
    let text = fs::read_to_string(path)
        .map_err(|e| Failure::Data(format!("failed to read {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| Failure::Data(format!("invalid config {}: {e}", path.display())))
}

/// Tokenizer for a checkpoint: bucket count from the table, the rest from flags.
fn model_tokenizer(args: &TokenizerArgs, buckets: usize) -> Result<TokenizerConfig, Failure> {
    let mut tok = args.resolve();
    let buckets = u32::try_from(buckets).map_err(Failure::data)?;
    if matches!(args.buckets, Some(b) if b != buckets) {
        return Err(Failure::Data(format!(
            "--buckets {} disagrees with the checkpoint's {buckets} rows",
            tok.bucket_count
        )));
    }
    tok.bucket_count = buckets;
    Ok(tok)
}

fn cmd_train(args: &TrainArgs) -> Result<(), Failure> {
    let file = args.config.as_deref().map(read_config).transpose()?;
    let cfg = resolve_train_config(file, &args.overrides);
    cfg.validate()?;
    let threads = threads_from(args.threads)?;
    let corpus = load(&args.data, cfg.tokenizer)?;
    let store = cfg
        .augment_path
        .as_deref()
        .map(load_augmentations)
        .transpose()
        .map_err(Failure::data)?;

    let total = cfg.total_episodes;
    let observer = |event: &HistoryEvent| match event {
        HistoryEvent::Episode(r) if (r.episode + 1) % 100 == 0 => eprintln!(
            "episode {}/{total}: total {:.5} con {:.5} inst {:.5} task {:.5} alpha {:.4}",
            r.episode + 1,
            r.total,
            r.l_con,
            r.l_inst,
            r.l_task,
            r.alpha
        ),
        HistoryEvent::Validation {
            episode,
            val_accuracy,
        } => eprintln!("episode {}: val accuracy {val_accuracy:.4}", episode + 1),
        _ => {}
    };
    let paths = TrainPaths {
        checkpoint: &args.out,
        history: args.history.as_deref(),
    };
    let out = train(&corpus, &cfg, store.as_ref(), paths, threads, observer)?;
    let last = out.history.episodes().last().cloned();
    emit(&json!({
        "checkpoint": out.best_checkpoint,
        "best_val_accuracy": out.best_val_accuracy,
        "episodes": cfg.total_episodes,
        "last_episode": last,
    }))
}

fn cmd_eval(args: &EvalArgs) -> Result<(), Failure> {
    let threads = threads_from(args.threads)?;
    let (params, _) = load_checkpoint(&args.model).map_err(Failure::data)?;
    let tok = model_tokenizer(&args.tokenizer, params.buckets())?;
    let corpus = load(&args.data, tok)?;
    let spec = EvalSpec {
        predictor: args.predictor.into(),
        pooling: Pooling::from_normalize(args.normalize.unwrap_or(false)),
        threads,
        ..EvalSpec::new(args.split, args.n, args.k, args.m, args.episodes, args.seed)
    };
    eprintln!(
        "evaluating {} episodes of {}-way {}-shot on {}",
        spec.episodes, spec.n, spec.k, spec.split
    );
    let report = evaluate(&params, &corpus, &spec).map_err(Failure::data)?;
    if !report.mean.is_finite() {
        return Err(Failure::Numerical("non-finite accuracy".into()));
    }
    if let Some(path) = &args.report {
        let mut text = serde_json::to_string_pretty(&report).map_err(Failure::data)?;
        text.push('\n');
        fs::write(path, text)
            .map_err(|e| Failure::Data(format!("failed to write {}: {e}", path.display())))?;
    }
    eprintln!("mean accuracy {:.4} (std {:.4})", report.mean, report.std);
    emit(&report)
}

fn cmd_gradcheck(args: &GradcheckArgs) -> Result<(), Failure> {
    if args.trials == 0 {
        return Err(Failure::Usage("--trials must be positive".into()));
    }
    let report = run_suite(args.seed, args.trials);
    for c in &report.checks {
        eprintln!(
            "{}: {} trials, max relative error {:.3e} (tolerance {:.0e}) {}",
            c.name,
            c.trials,
            c.max_relative_error,
            c.tolerance,
            if c.passed { "ok" } else { "FAILED" }
        );
    }
    emit(&report)?;
    if report.passed {
        Ok(())
    } else {
        Err(Failure::Numerical("gradient check failed".into()))
    }
}

fn cmd_episodes(args: &EpisodesArgs) -> Result<(), Failure> {
    let corpus = load(&args.data, args.tokenizer.resolve())?;
    let episodes = (0..args.count as u64)
        .map(|i| {
            let mut rng = seeded_rng(args.seed, i);
            sample_episode(&corpus, args.split, args.n, args.k, args.m, &mut rng)
        })
        .collect::<Result<Vec<_>, _>>()
        .map_err(Failure::data)?;
    emit(&episodes)
}

fn cmd_augment(args: &AugmentArgs) -> Result<(), Failure> {
    if args.views == 0 {
        return Err(Failure::Usage("--views must be positive".into()));
    }
    let tok = args.tokenizer.resolve();
    let corpus = load(&args.data, tok)?;
    let mut eda = EdaParams::default();
    args.eda.apply(&mut eda);
    eda.validate().map_err(Failure::data)?;
    let AugmentMethod::Eda = args.method;

    let positions: Vec<usize> = match args.split {
        Some(split) => corpus.split_positions(split),
        None => (0..corpus.len()).collect(),
    };
    let mut rng = seeded_rng(args.seed, 0);
    let mut store = AugmentationStore::default();
    for &pos in &positions {
        let doc = &corpus.documents()[pos];
        let words = tokenize_words(&doc.text, &tok);
        let views = (0..args.views)
            .map(|_| Ok(eda_augment(&words, &eda, &mut rng)?.join(" ")))
            .collect::<Result<Vec<_>, crate::augment::AugmentError>>()
            .map_err(Failure::data)?;
        store.insert(doc.id.clone(), views).map_err(Failure::data)?;
    }
    store
        .write(&args.out)
        .map_err(|e| Failure::Data(format!("failed to write {}: {e}", args.out.display())))?;
    eprintln!("wrote {} documents to {}", store.len(), args.out.display());
    emit(&json!({
        "documents": store.len(),
        "views_per_document": args.views,
        "out": args.out,
    }))
}

fn cmd_embed(args: &EmbedArgs) -> Result<(), Failure> {
    let (params, _) = load_checkpoint(&args.model).map_err(Failure::data)?;
    let tok = model_tokenizer(&args.tokenizer, params.buckets())?;
    let corpus = load(&args.data, tok)?;
    let pooling = Pooling::from_normalize(args.normalize.unwrap_or(false));
    let rows =
        dump_embeddings(&params, &corpus, args.split, pooling, &args.out).map_err(Failure::data)?;
    emit(&json!({ "rows": rows, "dim": params.dim(), "out": args.out }))
}

fn cmd_stats(args: &StatsArgs) -> Result<(), Failure> {
    let corpus = load(&args.data, args.tokenizer.resolve())?;
    emit(&corpus_stats(&corpus))
}

fn cmd_synth(args: &SynthArgs) -> Result<(), Failure> {
    let spec = args.spec();
    let out = generate(&spec).map_err(Failure::data)?;
    for w in &out.warnings {
        eprintln!("warning: {w}");
    }
    write_output(&out, &args.out_data, &args.out_splits).map_err(Failure::data)?;
    emit(&json!({
        "documents": out.documents.len(),
        "total_vocab": spec.total_vocab(),
        "classes": {
            "train": out.splits.train.len(),
            "val": out.splits.val.len(),
            "test": out.splits.test.len(),
        },
        "warnings": out.warnings,
    }))
}

pub fn execute(command: &Command) -> Result<(), Failure> {
    match command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Episodes(a) => cmd_episodes(a),
        Command::Augment(a) => cmd_augment(a),
        Command::Embed(a) => cmd_embed(a),
        Command::Stats(a) => cmd_stats(a),
        Command::Synth(a) => cmd_synth(a),
    }
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.exit_code() == 0 { 0 } else { 1 };
        }
    };
    match execute(&cli.command) {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("error: {}", f.message());
            f.exit_code()
        }
    }
}
