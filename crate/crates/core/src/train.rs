//! Training loop, segment inference and evaluation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{split_segments, stitch_predictions, SegmentSpec, Video};
use crate::error::{Error, Result};
use crate::losses::{au_loss, expr_loss, va_loss};
use crate::metrics::{ccc, macro_f1, multilabel_f1, MetricReport, ScoreKind};
use crate::model::{opt, save_checkpoint, FusionModel};
use crate::optim::{adamw_step, cosine_warmup_lr, AdamWConfig, OptimizerState, StepOutcome};
use crate::params::{Mode, ParamStore, Session};
use crate::task::{Task, AU_UNITS, EXPR_CLASSES};
use crate::tensor::{Float, Precision, Tensor};

/// Consecutive skipped (non-finite) steps that abort a run.
pub const MAX_CONSECUTIVE_SKIPS: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub peak_lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Overrides every dropout probability in the model.
    pub dropout: f64,
    pub betas: (f64, f64),
    pub adam_eps: f64,
    pub grad_clip_norm: Option<f64>,
    pub seed: u64,
    pub precision: Precision,
    pub window: usize,
    pub stride: usize,
    /// Stops after this many optimizer steps even if epochs remain; the
    /// schedule then spans exactly these steps.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            peak_lr: 3e-5,
            weight_decay: 1e-5,
            batch_size: 32,
            epochs: 1,
            dropout: 0.3,
            betas: (0.9, 0.999),
            adam_eps: 1e-8,
            grad_clip_norm: Some(1.0),
            seed: 0,
            precision: Precision::F32,
            window: 300,
            stride: 200,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("peak_lr", self.peak_lr),
            ("adam_eps", self.adam_eps),
        ];
        for (k, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{k} must be positive, got {v}")));
            }
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!("weight_decay must be >= 0, got {}", self.weight_decay)));
        }
        if self.batch_size == 0 || self.window == 0 {
            return Err(Error::Config("batch_size and window must be positive".into()));
        }
        if self.stride == 0 || self.stride > self.window {
            return Err(Error::Config(format!("stride must be in 1..={}, got {}", self.window, self.stride)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must be in [0, 1), got {}", self.dropout)));
        }
        for b in [self.betas.0, self.betas.1] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("betas must be in [0, 1), got {b}")));
            }
        }
        if let Some(c) = self.grad_clip_norm {
            if !(c > 0.0) {
                return Err(Error::Config(format!("grad_clip_norm must be positive, got {c}")));
            }
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.betas.0,
            beta2: self.betas.1,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }

    /// Applies and removes `train.*` keys from a parsed config file.
    pub fn apply_overrides(&mut self, map: &mut BTreeMap<String, String>) -> Result<()> {
        opt(map, "train.peak_lr", &mut self.peak_lr)?;
        opt(map, "train.weight_decay", &mut self.weight_decay)?;
        opt(map, "train.batch_size", &mut self.batch_size)?;
        opt(map, "train.epochs", &mut self.epochs)?;
        opt(map, "train.dropout", &mut self.dropout)?;
        opt(map, "train.beta1", &mut self.betas.0)?;
        opt(map, "train.beta2", &mut self.betas.1)?;
        opt(map, "train.adam_eps", &mut self.adam_eps)?;
        if let Some(v) = map.remove("train.grad_clip_norm") {
            self.grad_clip_norm = match v.as_str() {
                "none" | "off" => None,
                _ => Some(v.parse().map_err(|_| Error::Config(format!("bad value for train.grad_clip_norm: {v:?}")))?),
            };
        }
        opt(map, "train.seed", &mut self.seed)?;
        opt(map, "train.window", &mut self.window)?;
        opt(map, "train.stride", &mut self.stride)?;
        if let Some(v) = map.remove("train.max_steps") {
            self.max_steps = Some(v.parse().map_err(|_| Error::Config(format!("bad value for train.max_steps: {v:?}")))?);
        }
        if let Some(v) = map.remove("train.precision") {
            let bits = v.parse().map_err(|_| Error::Config(format!("bad value for train.precision: {v:?}")))?;
            self.precision = Precision::from_bits(bits)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub skipped: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub metrics: MetricReport,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunRecord {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    pub best_checkpoint: Option<PathBuf>,
    pub last_checkpoint: Option<PathBuf>,
}

impl RunRecord {
    /// `step,lr,loss,skipped` rows.
    pub fn steps_csv(&self) -> String {
        let mut s = String::from("step,lr,loss,skipped\n");
        for r in &self.steps {
            let _ = writeln!(s, "{},{:e},{},{}", r.step, r.lr, r.loss, u8::from(r.skipped));
        }
        s
    }

    /// `epoch,<metric>...` rows.
    pub fn metrics_csv(&self) -> String {
        let names: Vec<&str> = self
            .epochs
            .first()
            .map(|e| e.metrics.entries.iter().map(|(n, _)| n.as_str()).collect())
            .unwrap_or_default();
        let mut s = format!("epoch,{}\n", names.join(","));
        for e in &self.epochs {
            let vals: Vec<String> = e.metrics.entries.iter().map(|(_, v)| format!("{v:.6}")).collect();
            let _ = writeln!(s, "{},{}", e.epoch, vals.join(","));
        }
        s
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, body) in [("steps.csv", self.steps_csv()), ("metrics.csv", self.metrics_csv())] {
            let p = dir.join(name);
            std::fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    pub model: FusionModel,
    /// Parameters after the last step.
    pub params: ParamStore<T>,
    /// Parameters with the best validation score, when a validation split
    /// was given.
    pub best_params: Option<ParamStore<T>>,
    pub record: RunRecord,
}

/// Model input and target for one segment: rows gathered from the video with
/// tail padding, and the mask of frames that count.
struct SegmentBatch<T> {
    visual: Tensor<T>,
    audio: Tensor<T>,
    mask: Vec<bool>,
    targets: Vec<f64>,
}

fn gather_rows<T: Float>(src: &[f32], dim: usize, rows: &[usize]) -> Tensor<T> {
    let mut data = Vec::with_capacity(rows.len() * dim);
    for &r in rows {
        data.extend(src[r * dim..(r + 1) * dim].iter().map(|&v| T::of(v as f64)));
    }
    Tensor::new(vec![rows.len(), dim], data).expect("rows x dim")
}

fn segment_inputs<T: Float>(video: &Video, seg: &SegmentSpec) -> (Tensor<T>, Tensor<T>) {
    let rows = seg.frame_indices();
    (
        gather_rows(&video.visual, video.visual_dim, &rows),
        gather_rows(&video.audio, video.audio_dim, &rows),
    )
}

fn segment_batch<T: Float>(video: &Video, seg: &SegmentSpec, frame_mask: &[bool]) -> Result<SegmentBatch<T>> {
    let labels = video.labels()?;
    let rows = seg.frame_indices();
    let real = seg.real_mask();
    let (visual, audio) = segment_inputs(video, seg);
    let mask = rows.iter().zip(&real).map(|(&r, &is_real)| is_real && frame_mask[r]).collect();
    let targets = rows.iter().flat_map(|&r| labels.row(r).iter().copied()).collect();
    Ok(SegmentBatch {
        visual,
        audio,
        mask,
        targets,
    })
}

/// Masked task loss over `(N x out_dim)` outputs.
pub fn task_loss<T: Float>(
    g: &mut crate::autograd::Graph<T>,
    task: Task,
    output: crate::autograd::Var,
    targets: &[f64],
    mask: &[bool],
) -> Result<crate::autograd::Var> {
    match task {
        Task::Va => va_loss(g, output, targets, mask),
        Task::Expr => {
            let labels: Vec<i64> = targets.iter().map(|&v| v as i64).collect();
            expr_loss(g, output, &labels, mask)
        }
        Task::Au => au_loss(g, output, targets, mask),
    }
}

fn min_valid(task: Task) -> usize {
    match task {
        Task::Va => 2,
        Task::Expr | Task::Au => 1,
    }
}

/// Trains a fresh model built from `model` (dropouts overridden by
/// `cfg.dropout`) on `train` videos, validating on `val` after each epoch.
///
/// With `out_dir`, the best and last checkpoints go to `out_dir/best` and
/// `out_dir/last`, and the run record to `steps.csv` and `metrics.csv`.
pub fn train<T: Float>(
    mut model_cfg: crate::model::FusionConfig,
    train: &[Video],
    val: &[Video],
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Training("training split is empty".into()));
    }
    model_cfg.set_dropout(cfg.dropout);
    if model_cfg.encoder.max_len < cfg.window {
        model_cfg.encoder.max_len = cfg.window;
    }
    let task = model_cfg.task;
    for v in train.iter().chain(val) {
        let l = v.labels()?;
        if l.task != task {
            return Err(Error::Invalid(format!("{}: labels are for {}, model is {task}", v.id, l.task)));
        }
        if v.visual_dim != model_cfg.visual_dim || v.audio_dim != model_cfg.audio_dim {
            return Err(Error::Invalid(format!(
                "{}: feature dims {}/{} do not match model {}/{}",
                v.id, v.visual_dim, v.audio_dim, model_cfg.visual_dim, model_cfg.audio_dim
            )));
        }
    }
    let (model, mut params) = FusionModel::new::<T>(model_cfg, cfg.seed)?;
    let mut state = OptimizerState::new(&params);
    let adamw = cfg.adamw();

    let masks: Vec<Vec<bool>> = train.iter().map(Video::frame_mask).collect();
    let mut segments: Vec<(usize, SegmentSpec)> = Vec::new();
    for (vi, v) in train.iter().enumerate() {
        for s in split_segments(v.n_frames, cfg.window, cfg.stride)? {
            segments.push((vi, s));
        }
    }
    let steps_per_epoch = segments.len().div_ceil(cfg.batch_size);
    let mut total = steps_per_epoch * cfg.epochs;
    if let Some(m) = cfg.max_steps {
        total = total.min(m);
    }
    let warmup = if steps_per_epoch < total { steps_per_epoch } else { 0 };

    let mut record = RunRecord::default();
    let mut best: Option<(f64, ParamStore<T>)> = None;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let mut step = 0usize;
    let mut consecutive_skips = 0usize;

    'epochs: for epoch in 0..cfg.epochs {
        if step >= total {
            break;
        }
        segments.shuffle(&mut shuffle_rng);
        for batch in segments.chunks(cfg.batch_size) {
            if step >= total {
                break 'epochs;
            }
            let lr = cosine_warmup_lr(step, warmup, total, cfg.peak_lr)?;
            let mut session = Session::new(&params, Mode::Train, cfg.seed.wrapping_add(1 + step as u64));
            let mut outputs = Vec::with_capacity(batch.len());
            let mut mask = Vec::new();
            let mut targets = Vec::new();
            for (vi, seg) in batch {
                let b = segment_batch::<T>(&train[*vi], seg, &masks[*vi])?;
                let v = session.input(b.visual);
                let a = session.input(b.audio);
                outputs.push(model.forward(&mut session, v, a)?);
                mask.extend(b.mask);
                targets.extend(b.targets);
            }
            if mask.iter().filter(|&&m| m).count() < min_valid(task) {
                step += 1;
                record.steps.push(StepRecord { step, lr, loss: f64::NAN, skipped: true });
                continue;
            }
            let out = if outputs.len() == 1 {
                outputs[0]
            } else {
                session.graph.concat(&outputs, 0)?
            };
            let loss = task_loss(&mut session.graph, task, out, &targets, &mask)?;
            let loss_value = session.graph.value(loss).item().as_f64();
            let mut grads = session.backward(loss)?;
            drop(session);

            let outcome = if loss_value.is_finite() && grads.all_finite() {
                if let Some(c) = cfg.grad_clip_norm {
                    grads.clip_global_norm(c);
                }
                adamw_step(&mut params, &grads, &mut state, lr, &adamw)?
            } else {
                StepOutcome::Skipped
            };
            step += 1;
            let skipped = outcome == StepOutcome::Skipped;
            record.steps.push(StepRecord { step, lr, loss: loss_value, skipped });
            if skipped {
                consecutive_skips += 1;
                if consecutive_skips >= MAX_CONSECUTIVE_SKIPS {
                    return Err(Error::Training(format!(
                        "{consecutive_skips} consecutive steps with non-finite loss or gradients (last at step {step}, loss {loss_value})"
                    )));
                }
            } else {
                consecutive_skips = 0;
            }
        }

        if !val.is_empty() {
            let metrics = evaluate(&model, &params, val, cfg.window, cfg.stride)?;
            let score = metrics.get(task.selection_metric()).unwrap_or(f64::NEG_INFINITY);
            if best.as_ref().is_none_or(|(b, _)| score > *b) {
                best = Some((score, params.clone()));
                if let Some(dir) = out_dir {
                    let p = dir.join("best");
                    save_checkpoint(&p, &model.config, &params)?;
                    record.best_checkpoint = Some(p);
                }
            }
            record.epochs.push(EpochRecord { epoch: epoch + 1, metrics });
        }
    }

    if let Some(dir) = out_dir {
        let p = dir.join("last");
        save_checkpoint(&p, &model.config, &params)?;
        record.last_checkpoint = Some(p);
        record.write(dir)?;
    }
    Ok(TrainOutcome {
        model,
        params,
        best_params: best.map(|(_, p)| p),
        record,
    })
}

/// Eval-mode inference over every segment of `video`, stitched into an
/// `(n_frames x out_dim)` row-major track.
pub fn predict_video<T: Float>(
    model: &FusionModel,
    params: &ParamStore<T>,
    video: &Video,
    window: usize,
    stride: usize,
) -> Result<Vec<f64>> {
    let segs = split_segments(video.n_frames, window, stride)?;
    let mut preds = Vec::with_capacity(segs.len());
    for seg in segs {
        let (v, a) = segment_inputs::<T>(video, &seg);
        let y = model.predict(params, v, a)?;
        preds.push((seg, y.to_f64_vec()));
    }
    stitch_predictions(&preds, video.n_frames, model.task().out_dim())
}

/// Task metrics over the valid frames of all videos, concatenated.
///
/// `outputs[i]` is the `(n_frames x out_dim)` track for `videos[i]`: VA
/// values, EXPR class scores (argmax taken) or AU scores of the given kind.
pub fn compute_metrics(task: Task, videos: &[Video], outputs: &[Vec<f64>], au_scores: ScoreKind) -> Result<MetricReport> {
    if videos.len() != outputs.len() {
        return Err(Error::Invalid(format!(
            "{} prediction tracks for {} videos",
            outputs.len(),
            videos.len()
        )));
    }
    let d = task.out_dim();
    let mut mask = Vec::new();
    let mut gt = Vec::new();
    let mut pred = Vec::new();
    for (v, out) in videos.iter().zip(outputs) {
        let labels = v.labels()?;
        if labels.task != task {
            return Err(Error::Invalid(format!("{}: labels are for {}, predictions for {task}", v.id, labels.task)));
        }
        if out.len() != v.n_frames * d {
            return Err(Error::Invalid(format!(
                "{}: prediction track has {} values, expected {} x {d}",
                v.id,
                out.len(),
                v.n_frames
            )));
        }
        mask.extend(v.frame_mask());
        gt.extend_from_slice(&labels.values);
        pred.extend_from_slice(out);
    }
    let n_valid = mask.iter().filter(|&&m| m).count();
    if n_valid == 0 {
        return Err(Error::Invalid("no valid frames to evaluate".into()));
    }
    let mut report = MetricReport::default();
    match task {
        Task::Va => {
            let mut cccs = [0.0; 2];
            for (k, c) in cccs.iter_mut().enumerate() {
                let pick = |src: &[f64]| -> Vec<f64> {
                    (0..mask.len()).filter(|&f| mask[f]).map(|f| src[f * 2 + k]).collect()
                };
                *c = ccc(&pick(&pred), &pick(&gt))?;
            }
            report.push("ccc_valence", cccs[0]);
            report.push("ccc_arousal", cccs[1]);
            report.push("ccc_mean", (cccs[0] + cccs[1]) / 2.0);
        }
        Task::Expr => {
            let classes: Vec<i64> = pred
                .chunks(EXPR_CLASSES)
                .map(|row| argmax(row) as i64)
                .collect();
            let truth: Vec<i64> = gt.iter().map(|&v| v as i64).collect();
            let (m, per) = macro_f1(&classes, &truth, EXPR_CLASSES, &mask)?;
            report.push("f1_macro", m);
            for (c, f) in per.iter().enumerate() {
                report.push(format!("f1_class{c}"), *f);
            }
        }
        Task::Au => {
            let (m, per) = multilabel_f1(&pred, &gt, AU_UNITS, au_scores, &mask)?;
            report.push("f1_macro", m);
            for (u, f) in per.iter().enumerate() {
                report.push(format!("f1_au{}", u + 1), *f);
            }
        }
    }
    report.push("frames", n_valid as f64);
    Ok(report)
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

/// Segment inference, stitching and metrics for every video.
pub fn evaluate<T: Float>(
    model: &FusionModel,
    params: &ParamStore<T>,
    videos: &[Video],
    window: usize,
    stride: usize,
) -> Result<MetricReport> {
    let outputs = videos
        .iter()
        .map(|v| predict_video(model, params, v, window, stride))
        .collect::<Result<Vec<_>>>()?;
    compute_metrics(model.task(), videos, &outputs, ScoreKind::Logits)
}
