//! Command-line front end: `synth`, `train`, `eval`, `predict` and
//! `gradcheck`.

use std::io::Write;
use std::path::{Path, PathBuf};

use avfusion::data::{load_videos, synth_dataset, Manifest, Split, SynthSpec, Video};
use avfusion::gradcheck::{fusion_model_check, tiny_fusion_config};
use avfusion::metrics::ScoreKind;
use avfusion::model::{load_checkpoint, parse_key_values, FusionConfig};
use avfusion::predictions::{read_predictions, write_predictions};
use avfusion::train::{compute_metrics, evaluate, predict_video, train, TrainConfig};
use avfusion::{Error, Float, Precision, Result, Task};
use clap::{Args, Parser, Subcommand, ValueEnum};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

/// Gradient checks pass below this maximum relative error.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Parser, Debug)]
#[command(name = "avfusion", version, about = "Audio-visual emotion recognition: TCN + Transformer fusion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a planted-signal synthetic dataset and its manifest.
    Synth(SynthArgs),
    /// Train a model on the train split of a manifest.
    Train(TrainArgs),
    /// Print metrics for a checkpoint or a predictions CSV.
    Eval(EvalArgs),
    /// Write stitched per-frame predictions for a manifest.
    Predict(PredictArgs),
    /// Finite-difference check of the tiny model's gradients.
    Gradcheck(GradcheckArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum TaskArg {
    Va,
    Expr,
    Au,
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Task {
        match t {
            TaskArg::Va => Task::Va,
            TaskArg::Expr => Task::Expr,
            TaskArg::Au => Task::Au,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    All,
}

fn parse_precision(s: &str) -> std::result::Result<Precision, String> {
    s.parse::<u32>()
        .map_err(|e| e.to_string())
        .and_then(|b| Precision::from_bits(b).map_err(|e| e.to_string()))
}

#[derive(Args, Debug)]
struct Segmenting {
    /// Segment length in frames.
    #[arg(long, default_value_t = 300)]
    window: usize,
    /// Distance between segment starts.
    #[arg(long, default_value_t = 200)]
    stride: usize,
    /// Floating-point precision: 32 or 64.
    #[arg(long, default_value = "32", value_parser = parse_precision)]
    precision: Precision,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "va")]
    task: TaskArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 8)]
    videos: usize,
    #[arg(long, default_value_t = 2)]
    val_videos: usize,
    #[arg(long, default_value_t = 600)]
    frames: usize,
    #[arg(long, default_value_t = 64)]
    visual_dim: usize,
    #[arg(long, default_value_t = 16)]
    audio_dim: usize,
    /// Signal-to-noise ratio; `inf` for noiseless features.
    #[arg(long, default_value_t = 10.0)]
    snr: f64,
    #[arg(long, default_value_t = 0.02)]
    missing_face_rate: f64,
    #[arg(long, default_value_t = 0.0)]
    missing_label_rate: f64,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, value_enum, default_value = "va")]
    task: TaskArg,
    /// key=value file with model keys (e.g. `encoder.d_model=64`) and
    /// `train.*` keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    max_steps: Option<usize>,
    #[command(flatten)]
    seg: Segmenting,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Checkpoint directory (holding params.tnsr and config.txt).
    #[arg(long, conflicts_with = "predictions", required_unless_present = "predictions")]
    checkpoint: Option<PathBuf>,
    /// Predictions CSV as written by `predict`.
    #[arg(long)]
    predictions: Option<PathBuf>,
    #[arg(long, value_enum)]
    task: Option<TaskArg>,
    #[arg(long, value_enum, default_value = "val")]
    split: SplitArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    seg: Segmenting,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output CSV path.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "all")]
    split: SplitArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    seg: Segmenting,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, value_enum, default_value = "va")]
    task: TaskArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    eps: f64,
    /// Sequence length of the random input.
    #[arg(long, default_value_t = 5)]
    frames: usize,
}

/// Runs the CLI with `args` (program name first), writing normal output to
/// `out` and diagnostics to `err`. Returns the process exit code.
pub fn run_cli_with<I, S>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if e.use_stderr() { write!(err, "{text}") } else { write!(out, "{text}") };
            return code;
        }
    };
    let result = match cli.command {
        Command::Synth(a) => synth(a, out),
        Command::Train(a) => train_cmd(a, out),
        Command::Eval(a) => eval_cmd(a, out),
        Command::Predict(a) => predict_cmd(a, out),
        Command::Gradcheck(a) => gradcheck(a, out),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            EXIT_FAILURE
        }
    }
}

pub fn run_cli<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    run_cli_with(args, &mut std::io::stdout(), &mut std::io::stderr())
}

fn io_err(e: std::io::Error) -> Error {
    Error::io("<stdout>", e)
}

fn synth(a: SynthArgs, out: &mut dyn Write) -> Result<i32> {
    let spec = SynthSpec {
        n_videos: a.videos,
        n_val_videos: a.val_videos,
        n_frames: a.frames,
        visual_dim: a.visual_dim,
        audio_dim: a.audio_dim,
        task: a.task.into(),
        snr: a.snr,
        seed: a.seed,
        missing_face_rate: a.missing_face_rate,
        missing_label_rate: a.missing_label_rate,
        ..SynthSpec::default()
    };
    let m = synth_dataset(&spec, &a.out)?;
    writeln!(
        out,
        "wrote {} videos ({} train, {} val) to {}",
        m.entries.len(),
        m.split(Split::Train).len(),
        m.split(Split::Val).len(),
        a.out.join("manifest.csv").display()
    )
    .map_err(io_err)?;
    Ok(EXIT_OK)
}

fn select(m: &Manifest, split: SplitArg) -> Vec<&avfusion::data::ManifestEntry> {
    match split {
        SplitArg::Train => m.split(Split::Train),
        SplitArg::Val => m.split(Split::Val),
        SplitArg::All => m.entries.iter().collect(),
    }
}

fn train_cmd(a: TrainArgs, out: &mut dyn Write) -> Result<i32> {
    let task: Task = a.task.into();
    let manifest = Manifest::read(&a.manifest)?;
    let train_videos = load_videos(&manifest.split(Split::Train), Some(task))?;
    let val_videos = load_videos(&manifest.split(Split::Val), Some(task))?;
    let first = train_videos
        .first()
        .ok_or_else(|| Error::Training("training split is empty".into()))?;

    let mut model_cfg = FusionConfig::new(task, first.visual_dim, first.audio_dim);
    let mut cfg = TrainConfig {
        window: a.seg.window,
        stride: a.seg.stride,
        precision: a.seg.precision,
        ..TrainConfig::default()
    };
    if let Some(path) = &a.config {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut map = parse_key_values(&text)?;
        cfg.apply_overrides(&mut map)?;
        model_cfg.apply_overrides(&mut map)?;
        if model_cfg.task != task {
            return Err(Error::Config(format!("config task {} contradicts --task {task}", model_cfg.task)));
        }
        if let Some(k) = map.keys().next() {
            return Err(Error::Config(format!("{}: unknown key {k}", path.display())));
        }
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.lr {
        cfg.peak_lr = v;
    }
    if let Some(v) = a.dropout {
        cfg.dropout = v;
    }
    if a.max_steps.is_some() {
        cfg.max_steps = a.max_steps;
    }

    let report = match cfg.precision {
        Precision::F32 => run_train::<f32>(model_cfg, &train_videos, &val_videos, &cfg, &a.out)?,
        Precision::F64 => run_train::<f64>(model_cfg, &train_videos, &val_videos, &cfg, &a.out)?,
    };
    write!(out, "{report}").map_err(io_err)?;
    Ok(EXIT_OK)
}

fn run_train<T: Float>(model_cfg: FusionConfig, tr: &[Video], va: &[Video], cfg: &TrainConfig, dir: &Path) -> Result<String> {
    let o = train::<T>(model_cfg, tr, va, cfg, Some(dir))?;
    let mut s = String::new();
    let applied = o.record.steps.iter().filter(|r| !r.skipped).count();
    s += &format!("steps={}\napplied_steps={applied}\n", o.record.steps.len());
    if let Some(last) = o.record.steps.iter().rev().find(|r| !r.skipped) {
        s += &format!("final_loss={:.6}\n", last.loss);
    }
    if let Some(e) = o.record.epochs.last() {
        s += &e.metrics.to_key_values();
    }
    if let Some(p) = &o.record.last_checkpoint {
        s += &format!("last_checkpoint={}\n", p.display());
    }
    if let Some(p) = &o.record.best_checkpoint {
        s += &format!("best_checkpoint={}\n", p.display());
    }
    Ok(s)
}

fn eval_cmd(a: EvalArgs, out: &mut dyn Write) -> Result<i32> {
    let manifest = Manifest::read(&a.manifest)?;
    let entries = select(&manifest, a.split);
    let wanted: Option<Task> = a.task.map(Into::into);
    let report = if let Some(pred_path) = &a.predictions {
        let (task, tracks) = read_predictions(pred_path)?;
        check_task(wanted, task)?;
        let videos = load_videos(&entries, Some(task))?;
        let outputs = videos
            .iter()
            .map(|v| {
                tracks
                    .get(&v.id)
                    .cloned()
                    .ok_or_else(|| Error::Invalid(format!("{}: no predictions for video {}", pred_path.display(), v.id)))
            })
            .collect::<Result<Vec<_>>>()?;
        compute_metrics(task, &videos, &outputs, ScoreKind::Probabilities)?
    } else {
        let ckpt = a.checkpoint.as_deref().expect("clap enforces one source");
        match a.seg.precision {
            Precision::F32 => eval_checkpoint::<f32>(ckpt, &entries, wanted, &a.seg)?,
            Precision::F64 => eval_checkpoint::<f64>(ckpt, &entries, wanted, &a.seg)?,
        }
    };
    write!(out, "{}", report.to_key_values()).map_err(io_err)?;
    Ok(EXIT_OK)
}

fn check_task(wanted: Option<Task>, actual: Task) -> Result<()> {
    match wanted {
        Some(t) if t != actual => Err(Error::Invalid(format!("--task {t} does not match {actual}"))),
        _ => Ok(()),
    }
}

fn eval_checkpoint<T: Float>(
    dir: &Path,
    entries: &[&avfusion::data::ManifestEntry],
    wanted: Option<Task>,
    seg: &Segmenting,
) -> Result<avfusion::metrics::MetricReport> {
    let (model, params) = load_checkpoint::<T>(dir)?;
    check_task(wanted, model.task())?;
    let videos = load_videos(entries, Some(model.task()))?;
    evaluate(&model, &params, &videos, seg.window, seg.stride)
}

fn predict_cmd(a: PredictArgs, out: &mut dyn Write) -> Result<i32> {
    let manifest = Manifest::read(&a.manifest)?;
    let entries = select(&manifest, a.split);
    let rows = match a.seg.precision {
        Precision::F32 => predict_all::<f32>(&a, &entries)?,
        Precision::F64 => predict_all::<f64>(&a, &entries)?,
    };
    writeln!(out, "wrote {rows} rows to {}", a.out.display()).map_err(io_err)?;
    Ok(EXIT_OK)
}

fn predict_all<T: Float>(a: &PredictArgs, entries: &[&avfusion::data::ManifestEntry]) -> Result<usize> {
    let (model, params) = load_checkpoint::<T>(&a.checkpoint)?;
    let videos = load_videos(entries, None)?;
    let tracks = videos
        .iter()
        .map(|v| Ok((v.id.clone(), predict_video(&model, &params, v, a.seg.window, a.seg.stride)?)))
        .collect::<Result<Vec<_>>>()?;
    write_predictions(&a.out, model.task(), &tracks)
}

fn gradcheck(a: GradcheckArgs, out: &mut dyn Write) -> Result<i32> {
    let report = fusion_model_check(tiny_fusion_config(a.task.into()), a.frames, a.seed, a.eps)?;
    writeln!(out, "{report}").map_err(io_err)?;
    Ok(if report.max_rel() < GRADCHECK_TOLERANCE {
        EXIT_OK
    } else {
        EXIT_FAILURE
    })
}
