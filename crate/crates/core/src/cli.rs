//! Command-line front end.
//!
//! Exit codes: 0 success, 1 validation or configuration error, 2 I/O or
//! undecodable input, 3 non-finite loss or gradient, 4 gradient check failure.
//! Summaries go to stdout as `key: value` lines; errors go to stderr as a
//! single `error: ...` line.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::data::{
    build_dataset, load_image, normalize, read_dataset, resize_bilinear, DataError, Dataset, Example,
    LabelMap,
};
use crate::metrics::{confusion, emit_artifacts, predict_class, report, ArtifactError, CurveLog};
use crate::nn::gradcheck::{run_gradcheck, Target};
use crate::rng::{stream_rng, Stream};
use crate::train::{
    load_checkpoint, paper_model, predict_scores, save_checkpoint, split_indices, train,
    validate_fraction, CheckpointError, CheckpointMeta, HeadMode, Model, Split, TrainConfig,
    TrainError, PAPER_IMAGE_SIZE,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_IO: i32 = 2;
pub const EXIT_NON_FINITE: i32 = 3;
pub const EXIT_GRADIENT: i32 = 4;

/// Name of the effective configuration echoed into the metrics directory.
pub const EFFECTIVE_CONFIG_FILE: &str = "effective_config.txt";

#[derive(Debug, Parser)]
#[command(name = "cortex", version, about = "Train and evaluate the 4-class MRI convolutional network")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build a dataset file from a directory of class folders.
    Prepare(PrepareArgs),
    /// Split a dataset, train the network, write a checkpoint and metrics.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the held-out (or full) subset of a dataset.
    Evaluate(EvaluateArgs),
    /// Classify one image.
    Predict(PredictArgs),
    /// Verify every analytic gradient against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
struct PrepareArgs {
    /// Root containing one folder per class.
    #[arg(long)]
    input_dir: PathBuf,
    /// Dataset file to write.
    #[arg(long)]
    output: PathBuf,
    /// Comma-separated class folder names in label order.
    #[arg(long)]
    label_map: Option<String>,
    /// Side length images are resized to.
    #[arg(long, default_value_t = PAPER_IMAGE_SIZE)]
    image_size: usize,
}

#[derive(Debug, Args)]
struct SplitArgs {
    /// Fraction of examples used for training.
    #[arg(long, default_value_t = 0.8)]
    split: f64,
    /// Split each class separately.
    #[arg(long)]
    stratify: bool,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Dataset file written by `prepare`.
    #[arg(long)]
    dataset: PathBuf,
    /// `key = value` training configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for the split, initialisation and shuffling.
    #[arg(long)]
    seed: Option<u64>,
    /// Checkpoint output path.
    #[arg(long)]
    out: PathBuf,
    /// Directory for curves, confusion matrix, report and plots.
    #[arg(long)]
    metrics_dir: PathBuf,
    /// Output head; the loss follows it unless `--loss` is given.
    #[arg(long, value_parser = ["sigmoid", "softmax"])]
    head: Option<String>,
    #[command(flatten)]
    split: SplitArgs,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    /// sgd, sgd-momentum or adam.
    #[arg(long)]
    optimizer: Option<String>,
    /// categorical-cross-entropy, per-class-binary-cross-entropy or auto.
    #[arg(long)]
    loss: Option<String>,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Directory for the confusion matrix, report and heatmap.
    #[arg(long)]
    metrics_dir: PathBuf,
    /// Which side of the split to evaluate.
    #[arg(long, default_value = "test", value_parser = ["test", "train", "all"])]
    subset: String,
    /// Must equal the training run's seed to rebuild the same split.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    split: SplitArgs,
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// all, conv, pool, dense, activations or model.
    #[arg(long, default_value = "all")]
    layer: String,
    /// Scale the analytic convolution weight gradients to prove the harness
    /// detects a faulty backward pass.
    #[arg(long, hide = true)]
    corrupt: bool,
}

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn validation(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_VALIDATION,
            message: message.into(),
        }
    }

    fn io(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_IO,
            message: message.into(),
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        let code = if e.is_io() { EXIT_IO } else { EXIT_VALIDATION };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        let code = if e.is_non_finite() { EXIT_NON_FINITE } else { EXIT_VALIDATION };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        let code = if e.is_io() { EXIT_IO } else { EXIT_VALIDATION };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<ArtifactError> for CliError {
    fn from(e: ArtifactError) -> Self {
        Self::io(e.to_string())
    }
}

type CliResult = Result<(), CliError>;

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code. Summary lines are written to `out`, errors to `err`.
pub fn run<I, A>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = A>,
    A: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let rendered = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{rendered}");
                    EXIT_OK
                }
                _ => {
                    let first = rendered.lines().next().unwrap_or("invalid arguments");
                    let first = first.strip_prefix("error: ").unwrap_or(first);
                    let _ = writeln!(err, "error: {first}");
                    let _ = write!(err, "{}", rendered.lines().skip(1).map(|l| format!("{l}\n")).collect::<String>());
                    EXIT_VALIDATION
                }
            };
        }
    };
    if let Err(e) = configure_threads() {
        let _ = writeln!(err, "error: {}", e.message);
        return e.code;
    }
    let result = match cli.command {
        Command::Prepare(a) => prepare(a, out),
        Command::Train(a) => train_cmd(a, out),
        Command::Evaluate(a) => evaluate(a, out),
        Command::Predict(a) => predict(a, out),
        Command::Gradcheck(a) => gradcheck(a, out),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {}", e.message);
            e.code
        }
    }
}

/// Honours `CORTEX_THREADS` by sizing the global worker pool once.
fn configure_threads() -> CliResult {
    let Ok(raw) = std::env::var("CORTEX_THREADS") else {
        return Ok(());
    };
    let threads: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n >= 1)
        .ok_or_else(|| CliError::validation(format!("CORTEX_THREADS must be a positive integer, got `{raw}`")))?;
    // a pool that already exists keeps its size
    let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    Ok(())
}

fn line(out: &mut dyn Write, key: &str, value: impl std::fmt::Display) {
    let _ = writeln!(out, "{key}: {value}");
}

fn prepare(a: PrepareArgs, out: &mut dyn Write) -> CliResult {
    let label_map = match &a.label_map {
        Some(list) => LabelMap::parse(list)?,
        None => LabelMap::default(),
    };
    if a.image_size == 0 {
        return Err(CliError::validation("image size must be positive"));
    }
    let s = build_dataset(&a.input_dir, &label_map, (a.image_size, a.image_size), &a.output)?;
    line(out, "dataset", a.output.display());
    line(out, "image_size", format!("{0}x{0}", a.image_size));
    for (name, count) in s.label_map.names().iter().zip(&s.class_counts) {
        line(out, &format!("count[{name}]"), count);
    }
    line(out, "total", s.total);
    line(out, "skipped", s.skipped.len());
    for f in &s.skipped {
        line(out, "skipped_file", format!("{} ({})", f.path.display(), f.reason));
    }
    for class in &s.empty_classes {
        line(out, "warning", format!("class `{class}` is empty"));
    }
    line(out, "dataset_checksum", format!("{:016x}", s.checksum));
    Ok(())
}

fn load_split(
    dataset: &Path,
    split: &SplitArgs,
    seed: u64,
    out: &mut dyn Write,
) -> Result<(Dataset, Split), CliError> {
    validate_fraction(split.split)?;
    let (ds, checksum) = read_dataset(dataset)?;
    let labels: Vec<usize> = ds.examples.iter().map(|e| e.label).collect();
    let s = split_indices(&labels, split.split, seed, split.stratify)?;
    line(out, "dataset_checksum", format!("{checksum:016x}"));
    line(out, "examples", ds.len());
    line(out, "train_examples", s.train.len());
    line(out, "test_examples", s.test.len());
    line(out, "test_membership", format!("{:016x}", s.test_membership_hash()));
    Ok((ds, s))
}

fn effective_config(a: &TrainArgs) -> Result<TrainConfig, CliError> {
    let mut config = TrainConfig::default();
    if let Some(path) = &a.config {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(format!("{}: {e}", path.display())))?;
        config.apply_text(&text)?;
    }
    let overrides = [
        ("seed", a.seed.map(|v| v.to_string())),
        ("head", a.head.clone()),
        ("epochs", a.epochs.map(|v| v.to_string())),
        ("batch_size", a.batch_size.map(|v| v.to_string())),
        ("learning_rate", a.learning_rate.map(|v| format!("{v:?}"))),
        ("optimizer", a.optimizer.clone()),
        ("loss", a.loss.clone()),
    ];
    for (key, value) in overrides {
        if let Some(v) = value {
            config.set(key, &v)?;
        }
    }
    config.validate()?;
    Ok(config)
}

fn square_side(ds: &Dataset) -> Result<usize, CliError> {
    let (h, w) = ds.image_size;
    if h != w {
        return Err(CliError::validation(format!("images must be square, dataset holds {h}x{w}")));
    }
    Ok(h)
}

fn evaluate_subset(model: &Model, examples: &[&Example], classes: usize) -> Result<crate::metrics::EvalReport, CliError> {
    let scores = predict_scores(model, examples, 32)?;
    let truth: Vec<usize> = examples.iter().map(|e| e.label).collect();
    let m = confusion(&truth, &predict_class(&scores), classes).map_err(|e| CliError::validation(e.to_string()))?;
    report(&m).map_err(|e| CliError::validation(e.to_string()))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("undefined".into(), |v| format!("{v:.6}"))
}

fn train_cmd(a: TrainArgs, out: &mut dyn Write) -> CliResult {
    let config = effective_config(&a)?;
    let (ds, split) = load_split(&a.dataset, &a.split, config.seed, out)?;
    let side = square_side(&ds)?;
    let mut model = paper_model(side, config.head, &mut stream_rng(config.seed, Stream::Init))?;
    let train_set: Vec<&Example> = split.train.iter().map(|&i| &ds.examples[i]).collect();
    let test_set: Vec<&Example> = split.test.iter().map(|&i| &ds.examples[i]).collect();
    if train_set.is_empty() {
        return Err(CliError::validation("split leaves no training examples"));
    }

    fs::create_dir_all(&a.metrics_dir)
        .map_err(|e| CliError::io(format!("{}: {e}", a.metrics_dir.display())))?;
    let echo = a.metrics_dir.join(EFFECTIVE_CONFIG_FILE);
    fs::write(&echo, config.to_text()).map_err(|e| CliError::io(format!("{}: {e}", echo.display())))?;

    let mut log = CurveLog::new();
    let validation = (!test_set.is_empty()).then_some(test_set.as_slice());
    let outcome = train(&mut model, &train_set, validation, &config, &mut log)?;

    let meta = CheckpointMeta {
        epoch: outcome.epochs.len() as u64,
        seed: config.seed,
        config_hash: config.hash(),
        class_names: ds.label_map.names().to_vec(),
    };
    save_checkpoint(&model, &meta, &a.out)?;

    let classes = model.num_outputs();
    let train_report = evaluate_subset(&model, &train_set, classes)?;
    let test_report = if test_set.is_empty() {
        None
    } else {
        Some(evaluate_subset(&model, &test_set, classes)?)
    };
    let notes = vec![format!("evaluation subset: test ({} examples)", test_set.len())];
    emit_artifacts(Some(&log), test_report.as_ref(), ds.label_map.names(), &notes, &a.metrics_dir)?;

    line(out, "epochs", outcome.epochs.len());
    if let Some(last) = outcome.epochs.last() {
        line(out, "final_epoch_loss", format!("{:.6}", last.train_loss));
        line(out, "final_epoch_accuracy", format!("{:.6}", last.train_accuracy));
    }
    line(out, "final_train_accuracy", format!("{:.6}", train_report.accuracy));
    if let Some(r) = &test_report {
        line(out, "test_accuracy", format!("{:.6}", r.accuracy));
        line(out, "test_macro_precision", fmt_opt(r.macro_precision));
    }
    line(out, "config_hash", format!("{:016x}", config.hash()));
    line(out, "checkpoint", a.out.display());
    Ok(())
}

fn evaluate(a: EvaluateArgs, out: &mut dyn Write) -> CliResult {
    let (model, meta) = load_checkpoint::<f32>(&a.checkpoint)?;
    let (ds, split) = load_split(&a.dataset, &a.split, a.seed, out)?;
    let (h, w) = ds.image_size;
    if model.input_dims() != [3, h, w] {
        let [c, mh, mw] = model.input_dims();
        return Err(CliError::validation(format!(
            "topology mismatch: checkpoint expects {c}x{mh}x{mw} inputs, dataset holds 3x{h}x{w}"
        )));
    }
    if ds.label_map.len() != model.num_outputs() {
        return Err(CliError::validation(format!(
            "topology mismatch: checkpoint has {} outputs, dataset has {} classes",
            model.num_outputs(),
            ds.label_map.len()
        )));
    }
    if !meta.class_names.is_empty() && meta.class_names != ds.label_map.names() {
        log::warn!("checkpoint classes {:?} differ from dataset classes", meta.class_names);
    }
    let indices: Vec<usize> = match a.subset.as_str() {
        "test" => split.test.clone(),
        "train" => split.train.clone(),
        _ => (0..ds.len()).collect(),
    };
    if indices.is_empty() {
        return Err(CliError::validation(format!("the {} subset is empty", a.subset)));
    }
    let subset: Vec<&Example> = indices.iter().map(|&i| &ds.examples[i]).collect();
    let r = evaluate_subset(&model, &subset, model.num_outputs())?;
    let notes = vec![format!("evaluation subset: {} ({} examples)", a.subset, subset.len())];
    emit_artifacts(None, Some(&r), ds.label_map.names(), &notes, &a.metrics_dir)?;
    line(out, "subset", &a.subset);
    line(out, "evaluated", r.confusion.total());
    line(out, "accuracy", format!("{:.6}", r.accuracy));
    line(out, "macro_precision", fmt_opt(r.macro_precision));
    line(out, "micro_precision", format!("{:.6}", r.micro_precision));
    Ok(())
}

fn predict(a: PredictArgs, out: &mut dyn Write) -> CliResult {
    let (model, meta) = load_checkpoint::<f32>(&a.checkpoint)?;
    // an unreadable or undecodable image is an input failure
    let grid = load_image(&a.image).map_err(|e| CliError::io(e.to_string()))?;
    let [_, h, w] = model.input_dims();
    let image = normalize(&resize_bilinear(&grid, w, h)?);
    let x = image.into_reshaped(&[1, 3, h, w]).map_err(TrainError::from)?;
    let scores = model.scores(&x)?;
    let class = predict_class(&scores)[0];
    let names = if meta.class_names.len() == model.num_outputs() {
        meta.class_names
    } else {
        LabelMap::default().names().to_vec()
    };
    line(out, "class", &names[class]);
    line(out, "label", class);
    for (name, s) in names.iter().zip(scores.data()) {
        line(out, &format!("score[{name}]"), format!("{s:.9}"));
    }
    line(out, "head", match model.head() {
        HeadMode::Sigmoid => "sigmoid",
        HeadMode::Softmax => "softmax",
    });
    Ok(())
}

fn gradcheck(a: GradcheckArgs, out: &mut dyn Write) -> CliResult {
    let target: Target = a.layer.parse().map_err(CliError::validation)?;
    let report = run_gradcheck(a.seed, target, a.corrupt).map_err(|e| CliError {
        code: EXIT_GRADIENT,
        message: e.to_string(),
    })?;
    let _ = write!(out, "{report}");
    line(out, "seed", a.seed);
    line(out, "checked_tensors", report.rows.len());
    let worst = report.rows.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    line(out, "max_rel_error", format!("{worst:.3e}"));
    let first_failure = report.failures().next();
    match first_failure {
        None => {
            line(out, "status", "ok");
            Ok(())
        }
        Some(f) => {
            line(out, "status", "failed");
            Err(CliError {
                code: EXIT_GRADIENT,
                message: format!(
                    "gradient check failed for {} at {:?}: analytic {:.6e}, numeric {:.6e}, relative error {:.3e}",
                    f.name, f.worst, f.analytic, f.numeric, f.max_rel_error
                ),
            })
        }
    }
}
