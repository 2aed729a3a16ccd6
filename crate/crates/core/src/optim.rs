//! AdamW with decoupled weight decay and the warmup-then-cosine schedule.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::params::{Gradients, ParamStore};
use crate::tensor::{Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-5,
        }
    }
}

/// First and second moments per parameter, plus the number of applied steps.
#[derive(Clone, Debug)]
pub struct OptimizerState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Float> OptimizerState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let zeros = || params.entries().iter().map(|e| Tensor::zeros(e.value.shape())).collect();
        OptimizerState {
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// Some gradient was NaN or infinite; nothing was changed.
    Skipped,
}

/// One AdamW update at learning rate `lr`.
///
/// Parameters flagged for decay first shrink by `lr * weight_decay * p`; then
/// every parameter takes the bias-corrected Adam step. Parameters the loss
/// did not reach are treated as having zero gradient.
pub fn adamw_step<T: Float>(
    params: &mut ParamStore<T>,
    grads: &Gradients<T>,
    state: &mut OptimizerState<T>,
    lr: f64,
    cfg: &AdamWConfig,
) -> Result<StepOutcome> {
    if grads.grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::Invalid(format!(
            "optimizer got {} gradients and {} moment slots for {} parameters",
            grads.grads.len(),
            state.m.len(),
            params.len()
        )));
    }
    if !grads.all_finite() {
        return Ok(StepOutcome::Skipped);
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let decay = 1.0 - lr * cfg.weight_decay;
    for (i, entry) in params.entries_mut().iter_mut().enumerate() {
        let g = grads.grads[i].as_ref().map(|g| g.data());
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let p = entry.value.data_mut();
        for k in 0..p.len() {
            let gk = g.map_or(0.0, |g| g[k].as_f64());
            let mk = b1 * m[k].as_f64() + (1.0 - b1) * gk;
            let vk = b2 * v[k].as_f64() + (1.0 - b2) * gk * gk;
            m[k] = T::of(mk);
            v[k] = T::of(vk);
            let mut pk = p[k].as_f64();
            if entry.decay {
                pk *= decay;
            }
            pk -= lr * (mk / c1) / ((vk / c2).sqrt() + cfg.eps);
            p[k] = T::of(pk);
        }
    }
    Ok(StepOutcome::Applied)
}

/// Linear warmup from 0 to `peak_lr` over `warmup_steps`, then a half cosine
/// down to 0 at `total_steps`.
pub fn cosine_warmup_lr(step: usize, warmup_steps: usize, total_steps: usize, peak_lr: f64) -> Result<f64> {
    if total_steps <= warmup_steps {
        return Err(Error::Config(format!(
            "total steps {total_steps} must exceed warmup steps {warmup_steps}"
        )));
    }
    if step > total_steps {
        return Err(Error::Invalid(format!("step {step} beyond total {total_steps}")));
    }
    if step < warmup_steps {
        return Ok(peak_lr * step as f64 / warmup_steps as f64);
    }
    let progress = (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
    Ok(peak_lr * 0.5 * (1.0 + (PI * progress).cos()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(values: &[f64], decay: bool) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("p", Tensor::from_f64(&[values.len()], values).unwrap(), decay);
        s
    }

    fn grads(values: &[f64]) -> Gradients<f64> {
        Gradients {
            grads: vec![Some(Tensor::from_f64(&[values.len()], values).unwrap())],
        }
    }

    #[test]
    fn zero_gradient_is_pure_decay() {
        let init = [0.5, -2.0, 3.0];
        let mut p = store(&init, true);
        let mut st = OptimizerState::new(&p);
        let lr = 3e-5;
        adamw_step(&mut p, &grads(&[0.0; 3]), &mut st, lr, &AdamWConfig::default()).unwrap();
        for (a, b) in p.entries()[0].value.data().iter().zip(init) {
            assert_eq!(*a, b * (1.0 - lr * 1e-5));
        }

        let mut nd = store(&init, false);
        let mut st = OptimizerState::new(&nd);
        adamw_step(&mut nd, &grads(&[0.0; 3]), &mut st, lr, &AdamWConfig::default()).unwrap();
        assert_eq!(nd.entries()[0].value.data(), &init);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = store(&[1.0], true);
        let mut st = OptimizerState::new(&p);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        adamw_step(&mut p, &grads(&[1.0]), &mut st, 0.01, &cfg).unwrap();
        let delta = p.entries()[0].value.data()[0] - 1.0;
        assert!((delta + 0.01).abs() < 1e-9, "{delta}");
    }

    #[test]
    fn constant_gradient_update_tends_to_lr() {
        let mut p = store(&[0.0], false);
        let mut st = OptimizerState::new(&p);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        let mut last = 0.0;
        for _ in 0..5000 {
            let before = p.entries()[0].value.data()[0];
            adamw_step(&mut p, &grads(&[0.3]), &mut st, 1e-3, &cfg).unwrap();
            last = before - p.entries()[0].value.data()[0];
        }
        assert!((last - 1e-3).abs() < 1e-8, "{last}");
    }

    #[test]
    fn non_finite_gradients_skip() {
        let mut p = store(&[1.0, 2.0], true);
        let mut st = OptimizerState::new(&p);
        let out = adamw_step(&mut p, &grads(&[f64::NAN, 0.0]), &mut st, 0.1, &AdamWConfig::default()).unwrap();
        assert_eq!(out, StepOutcome::Skipped);
        assert_eq!(p.entries()[0].value.data(), &[1.0, 2.0]);
        assert_eq!(st.step, 0);
    }

    #[test]
    fn schedule_endpoints() {
        let peak = 3e-5;
        assert_eq!(cosine_warmup_lr(0, 10, 110, peak).unwrap(), 0.0);
        assert_eq!(cosine_warmup_lr(10, 10, 110, peak).unwrap(), peak);
        assert_eq!(cosine_warmup_lr(110, 10, 110, peak).unwrap(), 0.0);
        assert!((cosine_warmup_lr(60, 10, 110, peak).unwrap() - peak / 2.0).abs() < 1e-20);
        assert!((cosine_warmup_lr(5, 10, 110, peak).unwrap() - peak / 2.0).abs() < 1e-20);
        assert!(cosine_warmup_lr(0, 10, 10, peak).is_err());
        assert!(cosine_warmup_lr(111, 10, 110, peak).is_err());
        assert_eq!(cosine_warmup_lr(0, 0, 5, peak).unwrap(), peak);
    }
}
