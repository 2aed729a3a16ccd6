//! Central finite-difference validation of analytic gradients.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::model::{FusionConfig, FusionModel};
use crate::params::{Mode, ParamStore, Session};
use crate::task::Task;
use crate::tensor::Tensor;
use crate::train::task_loss;

/// Denominator floor for relative errors, so gradients that are zero up to
/// roundoff do not report spurious O(1) relative error.
pub const RELATIVE_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct ParamError {
    pub name: String,
    pub max_abs: f64,
    pub max_rel: f64,
}

#[derive(Clone, Debug)]
pub struct GradientReport {
    pub params: Vec<ParamError>,
    pub elapsed: Duration,
}

impl GradientReport {
    pub fn max_abs(&self) -> f64 {
        self.params.iter().map(|p| p.max_abs).fold(0.0, f64::max)
    }

    pub fn max_rel(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&ParamError> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel.total_cmp(&b.max_rel))
    }
}

impl std::fmt::Display for GradientReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for p in &self.params {
            writeln!(f, "{:<48} max_abs={:.3e} max_rel={:.3e}", p.name, p.max_abs, p.max_rel)?;
        }
        writeln!(f, "max_abs_error={:.3e}", self.max_abs())?;
        writeln!(f, "max_relative_error={:.3e}", self.max_rel())?;
        write!(f, "elapsed_seconds={:.3}", self.elapsed.as_secs_f64())
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

/// Compares the analytic gradient of `f` with central differences
/// `(f(p + eps) - f(p - eps)) / (2 eps)` for every element of every parameter.
///
/// `f` receives a fresh graph and one leaf per parameter and must return a
/// scalar. It has to be deterministic, so dropout must be off.
pub fn finite_diff_check<F>(f: F, params: &[(String, Tensor<f64>)], eps: f64) -> Result<GradientReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::Invalid(format!("eps must be positive, got {eps}")));
    }
    let start = Instant::now();

    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|(_, t)| g.param(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    check_finite(g.value(loss).item())?;
    g.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(params)
        .map(|(v, (_, t))| g.grad(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    drop(g);

    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        let v = g.value(out).item();
        check_finite(v)?;
        Ok(v)
    };

    let mut values: Vec<Tensor<f64>> = params.iter().map(|(_, t)| t.clone()).collect();
    let mut report = Vec::with_capacity(params.len());
    for (p, (name, _)) in params.iter().enumerate() {
        let (mut max_abs, mut max_rel) = (0.0f64, 0.0f64);
        for k in 0..values[p].numel() {
            let orig = values[p].data()[k];
            values[p].data_mut()[k] = orig + eps;
            let plus = eval(&values)?;
            values[p].data_mut()[k] = orig - eps;
            let minus = eval(&values)?;
            values[p].data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[p].data()[k];
            max_abs = max_abs.max((a - numeric).abs());
            max_rel = max_rel.max(relative_error(a, numeric));
        }
        report.push(ParamError {
            name: name.clone(),
            max_abs,
            max_rel,
        });
    }
    Ok(GradientReport {
        params: report,
        elapsed: start.elapsed(),
    })
}

/// Like [`finite_diff_check`] for a model whose parameters live in a
/// [`ParamStore`]: `f` runs one eval-mode forward pass in the given session
/// and returns a scalar.
pub fn check_params<F>(store: &ParamStore<f64>, f: F, eps: f64) -> Result<GradientReport>
where
    F: Fn(&mut Session<'_, f64>) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::Invalid(format!("eps must be positive, got {eps}")));
    }
    let start = Instant::now();
    let analytic = {
        let mut s = Session::new(store, Mode::Eval, 0);
        let loss = f(&mut s)?;
        check_finite(s.graph.value(loss).item())?;
        s.backward(loss)?
    };
    let eval = |p: &ParamStore<f64>| -> Result<f64> {
        let mut s = Session::inference(p);
        let out = f(&mut s)?;
        let v = s.graph.value(out).item();
        check_finite(v)?;
        Ok(v)
    };
    let mut work = store.clone();
    let mut report = Vec::with_capacity(store.len());
    for (i, entry) in store.entries().iter().enumerate() {
        let (mut max_abs, mut max_rel) = (0.0f64, 0.0f64);
        let id = work.id(&entry.name).expect("same names");
        for k in 0..entry.value.numel() {
            let orig = entry.value.data()[k];
            work.get_mut(id).data_mut()[k] = orig + eps;
            let plus = eval(&work)?;
            work.get_mut(id).data_mut()[k] = orig - eps;
            let minus = eval(&work)?;
            work.get_mut(id).data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.grads[i].as_ref().map_or(0.0, |g| g.data()[k]);
            max_abs = max_abs.max((a - numeric).abs());
            max_rel = max_rel.max(relative_error(a, numeric));
        }
        report.push(ParamError {
            name: entry.name.clone(),
            max_abs,
            max_rel,
        });
    }
    Ok(GradientReport {
        params: report,
        elapsed: start.elapsed(),
    })
}

/// The small model used for end-to-end gradient checks: 4 visual and 4 audio
/// features, TCN width 4, encoder width 8 with 2 heads, no dropout.
pub fn tiny_fusion_config(task: Task) -> FusionConfig {
    let mut c = FusionConfig::small(task, 4, 4, 4, 8, 1);
    c.encoder.n_heads = 2;
    c.encoder.ffn_dim = 16;
    c.mlp_hidden = 8;
    c.set_dropout(0.0);
    c
}

/// Checks the full model plus its task loss on random inputs of `frames`
/// frames.
pub fn fusion_model_check(config: FusionConfig, frames: usize, seed: u64, eps: f64) -> Result<GradientReport> {
    let (model, store) = FusionModel::new::<f64>(config, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let mut random = |n: usize| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
    let c = &model.config;
    let visual = Tensor::from_f64(&[frames, c.visual_dim], &random(frames * c.visual_dim))?;
    let audio = Tensor::from_f64(&[frames, c.audio_dim], &random(frames * c.audio_dim))?;
    let noise = random(frames * c.task.label_width());
    let targets: Vec<f64> = match c.task {
        Task::Va => noise.iter().map(|v| 0.9 * v).collect(),
        Task::Expr => noise.iter().map(|v| ((v + 1.0) * 4.0).floor().min(7.0)).collect(),
        Task::Au => noise.iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 }).collect(),
    };
    let mask = vec![true; frames];
    let task = c.task;
    check_params(
        &store,
        |s| {
            let v = s.input(visual.clone());
            let a = s.input(audio.clone());
            let y = model.forward(s, v, a)?;
            task_loss(&mut s.graph, task, y, &targets, &mask)
        },
        eps,
    )
}

fn check_finite(v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            primitive: "finite_diff_check",
        })
    }
}
