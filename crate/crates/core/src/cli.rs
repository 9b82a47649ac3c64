//! Command-line front end. Every command reads and writes files in the
//! formats of [`crate::io`] and records a `manifest_<command>.json`.
//!
//! Settings resolve as: command-line flag, then config file, then default.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::adversarial::{
    attack_rows, build_mixed_set, flatten_traces, trace_metric_trends, unflatten_traces, AttackConfig, MixMode,
    TraceSidecar,
};
use crate::datasets::{make_blobs, BlobSpec};
use crate::error::{Error, Result};
use crate::io::{
    self, fmt_f64, read_json, read_labels, read_matrix, read_prob_tensor, write_json, write_labels, write_matrix,
    write_prob_tensor, write_report, write_text, Report, ReportFile, ReportFormat, RunManifest, ScoreFile,
};
use crate::metrics::{
    kl_score, lsa, max_p, score_inputs, var_score, var_weighted, KdeConfig, MetricId, ScoreRequest, SurpriseReference,
};
use crate::model::{train_with_history, Dataset, MlpModel, ModelConfig, Split, TrainConfig, DEFAULT_MC_PASSES};
use crate::selection::{retrain_loop, RetrainConfig, SelectionPolicy};
use crate::stats::{correlation_report, decile_curve, CorrectnessVector};
use crate::tensor::{child_rng, seeded_shuffle};

#[derive(Debug, Parser)]
#[command(
    name = "dropsel",
    version,
    about = "Rank test inputs by dropout uncertainty and surprise adequacy"
)]
pub struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct GlobalArgs {
    /// Master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Monte-Carlo dropout passes.
    #[arg(long, global = true)]
    k: Option<usize>,
    /// Dropout rate for training and Monte-Carlo inference.
    #[arg(long, global = true)]
    dropout_rate: Option<f32>,
    /// Directory for all outputs.
    #[arg(long, global = true, default_value = ".")]
    out_dir: PathBuf,
    /// JSON config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (results do not depend on this).
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic blob dataset.
    GenData(GenDataArgs),
    /// Train a model on `train_x.dst` / `train_y.dst`.
    Train(TrainArgs),
    /// Compute the probability tensor and all score vectors.
    McScore(McScoreArgs),
    /// Correlate scores with misclassification.
    Correlate(ScoresArgs),
    /// Cumulative accuracy over inputs sorted most-uncertain-first.
    Curve(CurveArgs),
    /// Run FGSM attacks and trace scores along each attack.
    Attack(AttackArgs),
    /// Correlations on real + adversarial inputs.
    MixCorrelate(MixArgs),
    /// Simulate budgeted retraining with a selection policy.
    RetrainSim(RetrainArgs),
    /// Re-render JSON reports as CSV.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
struct GenDataArgs {
    /// Fraction of points placed between modes of different classes.
    #[arg(long)]
    overlap: Option<f64>,
    #[arg(long)]
    points_per_class: Option<usize>,
}

#[derive(Debug, Args)]
struct DataDirArg {
    /// Directory holding `<split>_x.dst` / `<split>_y.dst` (default: --out-dir).
    #[arg(long)]
    data_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataDirArg,
    /// Hidden layer sizes, comma-separated.
    #[arg(long, value_delimiter = ',')]
    hidden: Option<Vec<usize>>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f32>,
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Debug, Args)]
struct McScoreArgs {
    #[command(flatten)]
    data: DataDirArg,
    /// Model checkpoint (default: <out-dir>/model.dsm).
    #[arg(long, conflicts_with = "from_files")]
    model: Option<PathBuf>,
    /// Inputs to score (default: <data-dir>/<split>_x.dst).
    #[arg(long, conflicts_with = "from_files")]
    inputs: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    /// Training inputs for LSA/DSA (default: <data-dir>/train_x.dst if present).
    #[arg(long, conflicts_with = "from_files")]
    train_x: Option<PathBuf>,
    /// Score precomputed probability files instead of running a model.
    #[arg(long, requires_all = ["prob_tensor", "det_probs"])]
    from_files: bool,
    /// `k × n × C` Monte-Carlo probability tensor.
    #[arg(long, requires = "from_files")]
    prob_tensor: Option<PathBuf>,
    /// `n × C` deterministic probabilities.
    #[arg(long, requires = "from_files")]
    det_probs: Option<PathBuf>,
    /// Activations of the inputs, for LSA with --from-files.
    #[arg(long, requires_all = ["from_files", "train_activations"])]
    activations: Option<PathBuf>,
    /// Activations of the training inputs, for LSA with --from-files.
    #[arg(long, requires_all = ["from_files", "activations"])]
    train_activations: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    Train,
    Test,
    Pool,
}

impl SplitArg {
    fn name(self) -> &'static str {
        match self {
            SplitArg::Train => "train",
            SplitArg::Test => "test",
            SplitArg::Pool => "pool",
        }
    }
}

#[derive(Debug, Args)]
struct ScoresArgs {
    /// Score file (default: <out-dir>/scores.json).
    #[arg(long)]
    scores: Option<PathBuf>,
    /// True labels of the scored inputs.
    #[arg(long)]
    labels: PathBuf,
}

#[derive(Debug, Args)]
struct CurveArgs {
    #[command(flatten)]
    scores: ScoresArgs,
    /// Metrics to plot (default: KL, Var, VarW, MaxP).
    #[arg(long, value_delimiter = ',')]
    metric: Vec<MetricId>,
}

#[derive(Debug, Args)]
struct AttackArgs {
    #[command(flatten)]
    data: DataDirArg,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    /// Number of correctly classified inputs to attack.
    #[arg(long, default_value_t = 100)]
    n_traces: usize,
    #[arg(long)]
    eps: Option<f32>,
    #[arg(long)]
    max_iters: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum MixModeArg {
    FinalOnly,
    FinalPlusPenultimate,
}

#[derive(Debug, Args)]
struct MixArgs {
    #[command(flatten)]
    data: DataDirArg,
    #[arg(long)]
    model: Option<PathBuf>,
    /// Trace sidecar written by `attack` (default: <out-dir>/traces.json).
    #[arg(long)]
    traces: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "final-only")]
    mode: MixModeArg,
    /// Correlate on the adversarial rows alone.
    #[arg(long)]
    adversarial_only: bool,
}

#[derive(Debug, Args)]
struct RetrainArgs {
    #[command(flatten)]
    data: DataDirArg,
    /// `random`, `<metric>` or `<metric>+<tie-breaker>`.
    #[arg(long)]
    policy: Option<String>,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    initial_size: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Continue training from the previous iteration's weights.
    #[arg(long)]
    warm_start: bool,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// Report JSON files written by other commands.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
}

/// Optional settings read from `--config`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConfigFile {
    pub seed: Option<u64>,
    pub k: Option<usize>,
    pub dropout_rate: Option<f32>,
    pub threads: Option<usize>,
    pub data: DataSection,
    pub model: Option<ModelConfig>,
    pub train: Option<TrainConfig>,
    pub kde: Option<KdeConfig>,
    pub attack: Option<AttackConfig>,
    pub retrain: RetrainSection,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub overlap_factor: Option<f64>,
    pub points_per_class: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetrainSection {
    pub policy: Option<String>,
    pub initial_size: Option<usize>,
    pub batch_size: Option<usize>,
    pub epochs_per_iteration: Option<usize>,
    pub repetitions: Option<usize>,
    pub warm_start: Option<bool>,
}

/// A failure, classified for the exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad invocation: unknown flag, missing file, conflicting settings.
    Usage {
        code: &'static str,
        message: String,
    },
    Runtime(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Runtime(e)
    }
}

impl CliError {
    fn usage(code: &'static str, message: impl Into<String>) -> Self {
        CliError::Usage {
            code,
            message: message.into(),
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage { .. } => 2,
            CliError::Runtime(_) => 1,
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        match self {
            CliError::Usage { code, message } => json!({"error": {"kind": "usage", "code": code, "message": message}}),
            CliError::Runtime(e) => json!({"error": {"kind": "runtime", "code": e.code(), "message": e.to_string()}}),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Settings after applying flags over config over defaults.
#[derive(Debug, Clone)]
struct Settings {
    seed: u64,
    k: usize,
    dropout_rate: Option<f32>,
    out_dir: PathBuf,
    config: ConfigFile,
}

impl Settings {
    fn resolve(g: &GlobalArgs) -> CliResult<Self> {
        let config = match &g.config {
            Some(p) => {
                require_file(p)?;
                let bytes = std::fs::read(p).map_err(|e| CliError::Runtime(Error::io(p, e)))?;
                serde_json::from_slice::<ConfigFile>(&bytes)
                    .map_err(|e| CliError::usage("config", format!("{}: {e}", p.display())))?
            }
            None => ConfigFile::default(),
        };
        if let (Some(top), Some(m)) = (config.dropout_rate, &config.model) {
            if top != m.dropout_rate {
                return Err(CliError::usage(
                    "config_conflict",
                    format!(
                        "dropout_rate {top} conflicts with model.dropout_rate {}",
                        m.dropout_rate
                    ),
                ));
            }
        }
        Ok(Settings {
            seed: g.seed.or(config.seed).unwrap_or(0),
            k: g.k.or(config.k).unwrap_or(DEFAULT_MC_PASSES),
            dropout_rate: g.dropout_rate.or(config.dropout_rate),
            out_dir: g.out_dir.clone(),
            config,
        })
    }

    fn out(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    fn data_dir(&self, d: &DataDirArg) -> PathBuf {
        d.data_dir.clone().unwrap_or_else(|| self.out_dir.clone())
    }

    fn model_config(&self) -> ModelConfig {
        let mut m = self.config.model.clone().unwrap_or_default();
        if let Some(r) = self.dropout_rate {
            m.dropout_rate = r;
        }
        m
    }

    fn train_config(&self) -> TrainConfig {
        let mut t = self.config.train.clone().unwrap_or_default();
        t.seed = self.seed;
        t
    }

    fn kde(&self) -> KdeConfig {
        self.config.kde.clone().unwrap_or_default()
    }

    fn manifest(&self, command: &str, config: serde_json::Value, inputs: &[&Path]) -> CliResult<RunManifest> {
        let m = RunManifest::new(command, self.seed, config, inputs)?;
        m.write(&self.out(&format!("manifest_{command}.json")))?;
        Ok(m)
    }
}

/// JSON value of `v` with f32 fields kept at their shortest decimal form.
fn jv<T: Serialize>(v: &T) -> serde_json::Value {
    let text = serde_json::to_string(v).expect("config serializes");
    serde_json::from_str(&text).expect("config round-trips")
}

fn require_file(p: &Path) -> CliResult<()> {
    if p.is_file() {
        Ok(())
    } else {
        Err(CliError::usage(
            "missing_file",
            format!("{} does not exist", p.display()),
        ))
    }
}

fn split_paths(dir: &Path, split: &str) -> (PathBuf, PathBuf) {
    (dir.join(format!("{split}_x.dst")), dir.join(format!("{split}_y.dst")))
}

fn load_split(dir: &Path, split: Split) -> CliResult<(Dataset, [PathBuf; 2])> {
    let (x, y) = split_paths(dir, split.name());
    require_file(&x)?;
    require_file(&y)?;
    let features = read_matrix(&x)?;
    let labels = read_labels(&y)?;
    let n_classes = labels.iter().max().map_or(0, |m| m + 1).max(2);
    let n_classes = match read_json::<serde_json::Value>(&dir.join("dataset.json")) {
        Ok(v) => v["n_classes"].as_u64().map_or(n_classes, |c| c as usize),
        Err(_) => n_classes,
    };
    Ok((Dataset::new(features, labels, n_classes, split)?, [x, y]))
}

fn load_model_checked(p: &Path) -> CliResult<MlpModel> {
    require_file(p)?;
    Ok(io::load_model(p)?)
}

fn with_dropout(model: MlpModel, r: Option<f32>) -> CliResult<MlpModel> {
    match r {
        Some(r) => model
            .with_dropout_rate(r)
            .map_err(|e| CliError::usage("invalid_argument", e.to_string())),
        None => Ok(model),
    }
}

/// Parses arguments, runs the command, and maps failures to exit codes with
/// a JSON error object on stderr.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let err = CliError::usage("usage", e.to_string().trim().to_string());
            eprintln!("{}", err.to_json());
            return ExitCode::from(err.exit_code());
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("{}", err.to_json());
            ExitCode::from(err.exit_code())
        }
    }
}

pub fn run(cli: Cli) -> CliResult<()> {
    let settings = Settings::resolve(&cli.global)?;
    std::fs::create_dir_all(&settings.out_dir).map_err(|e| CliError::Runtime(Error::io(&settings.out_dir, e)))?;
    let threads = cli.global.threads.or(settings.config.threads);
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        if n == 0 {
            return Err(CliError::usage("invalid_argument", "--threads must be >= 1"));
        }
        builder = builder.num_threads(n);
    }
    let pool = builder
        .build()
        .map_err(|e| CliError::Runtime(Error::InvalidArgument(e.to_string())))?;
    pool.install(|| dispatch(&cli.command, &settings))
}

fn dispatch(cmd: &Command, s: &Settings) -> CliResult<()> {
    match cmd {
        Command::GenData(a) => gen_data(a, s),
        Command::Train(a) => train_cmd(a, s),
        Command::McScore(a) => mc_score(a, s),
        Command::Correlate(a) => correlate(a, s),
        Command::Curve(a) => curve(a, s),
        Command::Attack(a) => attack(a, s),
        Command::MixCorrelate(a) => mix_correlate(a, s),
        Command::RetrainSim(a) => retrain_sim(a, s),
        Command::Report(a) => report(a, s),
    }
}

fn gen_data(a: &GenDataArgs, s: &Settings) -> CliResult<()> {
    let mut spec = BlobSpec::desk(s.seed);
    if let Some(o) = a.overlap.or(s.config.data.overlap_factor) {
        spec.overlap_factor = o;
    }
    if let Some(p) = a.points_per_class.or(s.config.data.points_per_class) {
        spec.points_per_class = p;
    }
    spec.validate()
        .map_err(|e| CliError::usage("invalid_argument", e.to_string()))?;
    let splits = make_blobs(&spec)?;
    for (name, d) in [("train", &splits.train), ("test", &splits.test), ("pool", &splits.pool)] {
        if let Some(d) = d {
            let (x, y) = split_paths(&s.out_dir, name);
            write_matrix(&x, &d.features)?;
            write_labels(&y, &d.labels)?;
        }
    }
    write_json(&s.out("dataset.json"), &spec)?;
    s.manifest("gen-data", json!({ "blobs": jv(&spec) }), &[])?;
    Ok(())
}

fn train_cmd(a: &TrainArgs, s: &Settings) -> CliResult<()> {
    let dir = s.data_dir(&a.data);
    let (data, inputs) = load_split(&dir, Split::Train)?;
    let mut mcfg = s.model_config();
    if let Some(h) = &a.hidden {
        mcfg.hidden = h.clone();
    }
    let mut tcfg = s.train_config();
    if let Some(e) = a.epochs {
        tcfg.epochs = e;
    }
    if let Some(lr) = a.learning_rate {
        tcfg.learning_rate = lr;
    }
    if let Some(b) = a.batch_size {
        tcfg.batch_size = b;
    }
    let arch = mcfg.architecture(data.dim(), data.n_classes);
    arch.validate()
        .map_err(|e| CliError::usage("invalid_argument", e.to_string()))?;
    tcfg.validate()
        .map_err(|e| CliError::usage("invalid_argument", e.to_string()))?;
    let (model, history) = train_with_history(&data, &arch, &tcfg, None)?;
    io::save_model(&s.out("model.dsm"), &model)?;
    let mut csv = String::from("epoch,train_loss,val_accuracy\n");
    for (e, (l, v)) in history.train_loss.iter().zip(&history.val_accuracy).enumerate() {
        csv.push_str(&format!("{},{},{}\n", e + 1, fmt_f64(*l), fmt_f64(*v)));
    }
    write_text(&s.out("train_history.csv"), &csv)?;
    let inputs: Vec<&Path> = inputs.iter().map(PathBuf::as_path).collect();
    s.manifest(
        "train",
        json!({ "model": jv(&mcfg), "train": jv(&tcfg), "best_epoch": history.best_epoch }),
        &inputs,
    )?;
    Ok(())
}

fn mc_score(a: &McScoreArgs, s: &Settings) -> CliResult<()> {
    if a.from_files {
        return mc_score_from_files(a, s);
    }
    let dir = s.data_dir(&a.data);
    let model_path = a.model.clone().unwrap_or_else(|| s.out("model.dsm"));
    let model = with_dropout(load_model_checked(&model_path)?, s.dropout_rate)?;
    let inputs_path = a.inputs.clone().unwrap_or_else(|| split_paths(&dir, a.split.name()).0);
    require_file(&inputs_path)?;
    let x = read_matrix(&inputs_path)?;
    let train_path = a.train_x.clone().or_else(|| {
        let p = split_paths(&dir, "train").0;
        p.is_file().then_some(p)
    });
    if let Some(p) = &a.train_x {
        require_file(p)?;
    }
    let kde = s.kde();
    let reference = match &train_path {
        Some(p) => Some(SurpriseReference::build(&model, &read_matrix(p)?, &kde)?),
        None => None,
    };
    let metrics: Vec<MetricId> = if reference.is_some() {
        MetricId::ALL.to_vec()
    } else {
        MetricId::UNCERTAINTY.to_vec()
    };
    let scored = score_inputs(
        &model,
        &x,
        &ScoreRequest {
            metrics: &metrics,
            k: s.k,
            seed: s.seed,
            reference: reference.as_ref(),
        },
    )?;
    write_prob_tensor(
        &s.out("probs_mc.dst"),
        scored.tensor.as_ref().expect("uncertainty metrics need the tensor"),
    )?;
    write_matrix(&s.out("probs.dst"), &scored.det_probs)?;

    let mut input_files: Vec<&Path> = vec![&model_path, &inputs_path];
    if let Some(p) = &train_path {
        input_files.push(p);
    }
    let manifest = s.manifest(
        "mc-score",
        json!({ "k": s.k, "dropout_rate": jv(&model.dropout_rate()), "kde": jv(&kde), "metrics": metrics }),
        &input_files,
    )?;
    let file = ScoreFile {
        manifest,
        k: Some(s.k),
        dropout_rate: Some(model.dropout_rate()),
        kde: reference.is_some().then_some(kde),
        predictions: scored.predictions.clone(),
        scores: metrics.iter().map(|m| scored.get(*m).cloned()).collect::<Result<_>>()?,
    };
    write_score_file(s, &file)
}

fn write_score_file(s: &Settings, file: &ScoreFile) -> CliResult<()> {
    write_json(&s.out("scores.json"), file)?;
    write_text(&s.out("scores.csv"), &file.to_csv())?;
    Ok(())
}

fn mc_score_from_files(a: &McScoreArgs, s: &Settings) -> CliResult<()> {
    let tp = a.prob_tensor.as_ref().expect("required by clap");
    let dp = a.det_probs.as_ref().expect("required by clap");
    require_file(tp)?;
    require_file(dp)?;
    let tensor = read_prob_tensor(tp)?;
    let det = read_matrix(dp)?;
    if det.rows() != tensor.n() || det.cols() != tensor.n_classes() {
        return Err(Error::shape(
            "deterministic probabilities",
            format!("{}x{}", tensor.n(), tensor.n_classes()),
            format!("{}x{}", det.rows(), det.cols()),
        )
        .into());
    }
    let mut scores = vec![
        kl_score(&tensor)?,
        var_score(&tensor)?,
        var_weighted(&tensor, &det)?,
        max_p(&det)?,
    ];
    let mut input_files: Vec<&Path> = vec![tp, dp];
    let kde = s.kde();
    let mut used_kde = None;
    if let (Some(ap), Some(tap)) = (&a.activations, &a.train_activations) {
        require_file(ap)?;
        require_file(tap)?;
        scores.push(lsa(&read_matrix(tap)?, &read_matrix(ap)?, &kde)?);
        input_files.push(ap);
        input_files.push(tap);
        used_kde = Some(kde.clone());
    }
    scores.sort_by_key(|sv| MetricId::ALL.iter().position(|m| *m == sv.metric));
    let metrics: Vec<MetricId> = scores.iter().map(|sv| sv.metric).collect();
    let manifest = s.manifest(
        "mc-score",
        json!({ "from_files": true, "k": tensor.k(), "kde": used_kde, "metrics": metrics }),
        &input_files,
    )?;
    let file = ScoreFile {
        manifest,
        k: None,
        dropout_rate: None,
        kde: used_kde,
        predictions: det.argmax_rows(),
        scores,
    };
    write_score_file(s, &file)
}

fn load_scores(a: &ScoresArgs, s: &Settings) -> CliResult<(ScoreFile, CorrectnessVector, [PathBuf; 2])> {
    let sp = a.scores.clone().unwrap_or_else(|| s.out("scores.json"));
    require_file(&sp)?;
    require_file(&a.labels)?;
    let file: ScoreFile = read_json(&sp)?;
    let labels = read_labels(&a.labels)?;
    let correct = CorrectnessVector::from_predictions(&file.predictions, &labels)?;
    Ok((file, correct, [sp, a.labels.clone()]))
}

fn correlate(a: &ScoresArgs, s: &Settings) -> CliResult<()> {
    let (file, correct, inputs) = load_scores(a, s)?;
    let refs: Vec<_> = file.scores.iter().collect();
    let report = Report::Correlation(correlation_report(&refs, &correct)?);
    let manifest = s.manifest("correlate", json!({}), &[&inputs[0], &inputs[1]])?;
    write_report(&s.out("correlation.json"), &report, ReportFormat::Json, &manifest)?;
    write_report(&s.out("correlation.csv"), &report, ReportFormat::Csv, &manifest)?;
    Ok(())
}

fn curve(a: &CurveArgs, s: &Settings) -> CliResult<()> {
    let (file, correct, inputs) = load_scores(&a.scores, s)?;
    let metrics = if a.metric.is_empty() {
        MetricId::UNCERTAINTY.to_vec()
    } else {
        a.metric.clone()
    };
    let manifest = s.manifest("curve", json!({ "metrics": metrics }), &[&inputs[0], &inputs[1]])?;
    for m in metrics {
        let sv = file
            .get(m)
            .map_err(|e| CliError::usage("invalid_argument", e.to_string()))?;
        let report = Report::Curve(decile_curve(sv, &correct)?);
        write_report(
            &s.out(&format!("curve_{m}.json")),
            &report,
            ReportFormat::Json,
            &manifest,
        )?;
        write_report(&s.out(&format!("curve_{m}.csv")), &report, ReportFormat::Csv, &manifest)?;
    }
    Ok(())
}

fn split_of(a: SplitArg) -> Split {
    match a {
        SplitArg::Train => Split::Train,
        SplitArg::Test => Split::Test,
        SplitArg::Pool => Split::Pool,
    }
}

fn attack_config(s: &Settings, eps: Option<f32>, max_iters: Option<usize>) -> CliResult<AttackConfig> {
    let mut cfg = s.config.attack.clone().unwrap_or_default();
    if let Some(e) = eps {
        cfg.eps = e;
    }
    if let Some(m) = max_iters {
        cfg.max_iters = m;
    }
    cfg.validate()
        .map_err(|e| CliError::usage("invalid_argument", e.to_string()))?;
    Ok(cfg)
}

/// Trace sidecar: where the iterates live plus the run manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct TraceFile {
    manifest: RunManifest,
    iterates_file: String,
    #[serde(flatten)]
    sidecar: TraceSidecar,
}

fn attack(a: &AttackArgs, s: &Settings) -> CliResult<()> {
    let dir = s.data_dir(&a.data);
    let model_path = a.model.clone().unwrap_or_else(|| s.out("model.dsm"));
    let model = with_dropout(load_model_checked(&model_path)?, s.dropout_rate)?;
    let (data, data_files) = load_split(&dir, split_of(a.split))?;
    let (train, train_files) = load_split(&dir, Split::Train)?;
    let cfg = attack_config(s, a.eps, a.max_iters)?;

    let pred = model.predict(&data.features)?;
    let order = seeded_shuffle(data.len(), &mut child_rng(s.seed, "attack-pick", 0));
    let picked: Vec<usize> = order
        .into_iter()
        .filter(|&i| pred[i] == data.labels[i])
        .take(a.n_traces)
        .collect();
    if picked.is_empty() {
        return Err(Error::Empty("attack: no correctly classified inputs").into());
    }
    let traces = attack_rows(&model, &data, &picked, &cfg)?;
    let kde = s.kde();
    let reference = SurpriseReference::build(&model, &train.features, &kde)?;
    let trends = trace_metric_trends(&model, &traces, &reference, s.k, s.seed)?;

    let (iterates, sidecar) = flatten_traces(&traces, &cfg, data.dim())?;
    write_matrix(&s.out("traces.dst"), &iterates)?;
    let manifest = s.manifest(
        "attack",
        json!({ "attack": jv(&cfg), "k": s.k, "dropout_rate": jv(&model.dropout_rate()), "kde": jv(&kde),
                "split": a.split.name(), "n_traces": a.n_traces }),
        &[&model_path, &data_files[0], &data_files[1], &train_files[0]],
    )?;
    write_json(
        &s.out("traces.json"),
        &TraceFile {
            manifest,
            iterates_file: "traces.dst".into(),
            sidecar,
        },
    )?;

    let mut csv = String::from("trace,original_index,iteration,predicted");
    for m in MetricId::ALL {
        csv.push(',');
        csv.push_str(m.name());
    }
    csv.push('\n');
    for r in &trends.rows {
        csv.push_str(&format!(
            "{},{},{},{}",
            r.trace, r.original_index, r.iteration, r.predicted
        ));
        for m in MetricId::ALL {
            csv.push(',');
            csv.push_str(&fmt_f64(r.scores[&m]));
        }
        csv.push('\n');
    }
    write_text(&s.out("trends.csv"), &csv)?;

    let mut summary = String::from("metric,median_tau,defined_traces,flagged_traces\n");
    let flagged = trends.traces.iter().filter(|t| t.flagged).count();
    for m in MetricId::ALL {
        let defined = trends.traces.iter().filter(|t| t.tau[&m].is_some()).count();
        summary.push_str(&format!(
            "{m},{},{defined},{flagged}\n",
            trends.median_tau[&m].map_or_else(|| "undefined".into(), fmt_f64)
        ));
    }
    write_text(&s.out("trend_summary.csv"), &summary)?;
    Ok(())
}

fn mix_correlate(a: &MixArgs, s: &Settings) -> CliResult<()> {
    let dir = s.data_dir(&a.data);
    let model_path = a.model.clone().unwrap_or_else(|| s.out("model.dsm"));
    let model = with_dropout(load_model_checked(&model_path)?, s.dropout_rate)?;
    let trace_path = a.traces.clone().unwrap_or_else(|| s.out("traces.json"));
    require_file(&trace_path)?;
    let tf: TraceFile = read_json(&trace_path)?;
    let iter_path = trace_path.with_file_name(&tf.iterates_file);
    require_file(&iter_path)?;
    let traces = unflatten_traces(&read_matrix(&iter_path)?, &tf.sidecar)?;
    let split = match tf.manifest.config["split"].as_str() {
        Some("train") => Split::Train,
        Some("pool") => Split::Pool,
        _ => Split::Test,
    };
    let (real, real_files) = load_split(&dir, split)?;
    let (train, train_files) = load_split(&dir, Split::Train)?;
    let mode = match a.mode {
        MixModeArg::FinalOnly => MixMode::FinalOnly,
        MixModeArg::FinalPlusPenultimate => MixMode::FinalPlusPenultimate,
    };
    let (mut mixed, warnings) = build_mixed_set(&real, &traces, mode)?;
    if a.adversarial_only {
        mixed = mixed.adversarial_only();
    }
    let kde = s.kde();
    let reference = SurpriseReference::build(&model, &train.features, &kde)?;
    let scored = score_inputs(
        &model,
        &mixed.inputs,
        &ScoreRequest {
            metrics: &MetricId::ALL,
            k: s.k,
            seed: s.seed,
            reference: Some(&reference),
        },
    )?;
    let correct = CorrectnessVector::from_predictions(&scored.predictions, &mixed.labels)?;
    let refs: Vec<_> = MetricId::ALL.iter().map(|m| scored.get(*m)).collect::<Result<_>>()?;
    let report = Report::Correlation(correlation_report(&refs, &correct)?);
    let manifest = s.manifest(
        "mix-correlate",
        json!({ "mode": mode, "adversarial_only": a.adversarial_only, "k": s.k,
                "dropout_rate": jv(&model.dropout_rate()), "kde": jv(&kde),
                "rows": mixed.len(), "adversarial_rows": mixed.n_adversarial(), "warnings": warnings }),
        &[
            &model_path,
            &trace_path,
            &iter_path,
            &real_files[0],
            &real_files[1],
            &train_files[0],
        ],
    )?;
    write_report(&s.out("mix_correlation.json"), &report, ReportFormat::Json, &manifest)?;
    write_report(&s.out("mix_correlation.csv"), &report, ReportFormat::Csv, &manifest)?;
    Ok(())
}

fn retrain_sim(a: &RetrainArgs, s: &Settings) -> CliResult<()> {
    let dir = s.data_dir(&a.data);
    let (pool, pool_files) = load_split(&dir, Split::Pool)?;
    let (test, test_files) = load_split(&dir, Split::Test)?;
    let r = &s.config.retrain;
    let policy_spec = a
        .policy
        .clone()
        .or_else(|| r.policy.clone())
        .unwrap_or_else(|| "random".into());
    let policy = SelectionPolicy::from_spec(&policy_spec, s.seed)
        .map_err(|e| CliError::usage("invalid_argument", e.to_string()))?;
    let defaults = RetrainConfig::default();
    let cfg = RetrainConfig {
        initial_size: a.initial_size.or(r.initial_size).unwrap_or(defaults.initial_size),
        batch_size: a.batch.or(r.batch_size).unwrap_or(defaults.batch_size),
        epochs_per_iteration: a
            .epochs
            .or(r.epochs_per_iteration)
            .unwrap_or(defaults.epochs_per_iteration),
        repetitions: a.reps.or(r.repetitions).unwrap_or(defaults.repetitions),
        policy,
        model: s.model_config(),
        train: s.train_config(),
        kde: s.kde(),
        k: s.k,
        warm_start: a.warm_start || r.warm_start.unwrap_or(false),
        seed: s.seed,
    };
    cfg.validate(pool.len())
        .map_err(|e| CliError::usage("invalid_argument", e.to_string()))?;
    let trace = retrain_loop(&pool, &test, &cfg)?;
    let manifest = s.manifest(
        "retrain-sim",
        json!({ "retrain": jv(&cfg) }),
        &[&pool_files[0], &pool_files[1], &test_files[0], &test_files[1]],
    )?;
    let report = Report::Retrain(trace);
    write_report(&s.out("retrain.json"), &report, ReportFormat::Json, &manifest)?;
    write_report(&s.out("retrain.csv"), &report, ReportFormat::Csv, &manifest)?;
    if let Report::Retrain(t) = &report {
        write_text(&s.out("retrain_epochs.csv"), &io::retrain_epochs_csv(t))?;
    }
    Ok(())
}

fn report(a: &ReportArgs, s: &Settings) -> CliResult<()> {
    let mut rendered = Vec::new();
    for p in &a.inputs {
        require_file(p)?;
        let file: ReportFile =
            read_json(p).map_err(|e| CliError::usage("not_a_report", format!("{}: {e}", p.display())))?;
        let stem = p
            .file_stem()
            .map_or_else(|| "report".into(), |s| s.to_string_lossy().into_owned());
        write_text(&s.out(&format!("{stem}.report.csv")), &file.report.to_csv())?;
        rendered.push(json!({ "input": stem, "command": file.manifest.command, "seed": file.manifest.seed }));
    }
    let inputs: Vec<&Path> = a.inputs.iter().map(PathBuf::as_path).collect();
    s.manifest("report", json!({ "rendered": rendered }), &inputs)?;
    Ok(())
}
