//! Evaluation metrics: concordance correlation, macro F1 and multi-label F1.

use std::fmt;

use crate::error::{Error, Result};
use crate::losses::{degenerate_ccc, CCC_DEGENERATE};

/// Population concordance correlation coefficient.
///
/// When the denominator vanishes (both tracks constant and equal means) the
/// result is 1 if the tracks coincide and 0 otherwise.
pub fn ccc(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Invalid(format!(
            "ccc: length mismatch {} vs {}",
            x.len(),
            y.len()
        )));
    }
    if x.is_empty() {
        return Err(Error::Invalid("ccc: empty input".into()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut vx, mut vy, mut cov) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        vx += da * da;
        vy += db * db;
        cov += da * db;
    }
    let denom = vx / n + vy / n + (mx - my) * (mx - my);
    if denom < CCC_DEGENERATE {
        return Ok(degenerate_ccc(x, y));
    }
    Ok(2.0 * (cov / n) / denom)
}

fn f1(tp: usize, fp: usize, fnn: usize) -> f64 {
    let denom = 2 * tp + fp + fnn;
    if denom == 0 {
        0.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}

fn check_mask(mask: &[bool], n: usize, what: &str) -> Result<()> {
    if mask.len() != n {
        return Err(Error::Invalid(format!(
            "{what}: mask has {} entries, expected {n}",
            mask.len()
        )));
    }
    Ok(())
}

/// Unweighted mean of per-class F1 over `n_classes` classes, counting only
/// frames where `mask` holds. Classes with no predictions and no support
/// score 0.
pub fn macro_f1(pred: &[i64], gt: &[i64], n_classes: usize, mask: &[bool]) -> Result<(f64, Vec<f64>)> {
    if pred.len() != gt.len() {
        return Err(Error::Invalid(format!(
            "macro_f1: {} predictions for {} labels",
            pred.len(),
            gt.len()
        )));
    }
    if n_classes == 0 {
        return Err(Error::Invalid("macro_f1: n_classes must be positive".into()));
    }
    check_mask(mask, gt.len(), "macro_f1")?;
    let mut tp = vec![0usize; n_classes];
    let mut fp = vec![0usize; n_classes];
    let mut fnn = vec![0usize; n_classes];
    for (i, ((&p, &t), _)) in pred.iter().zip(gt).zip(mask).enumerate().filter(|(_, (_, &m))| m) {
        for (what, v) in [("prediction", p), ("label", t)] {
            if v < 0 || v as usize >= n_classes {
                return Err(Error::Invalid(format!(
                    "macro_f1: {what} {v} at frame {i} outside 0..{n_classes}"
                )));
            }
        }
        let (p, t) = (p as usize, t as usize);
        if p == t {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fnn[t] += 1;
        }
    }
    let per: Vec<f64> = (0..n_classes).map(|c| f1(tp[c], fp[c], fnn[c])).collect();
    let mean = per.iter().sum::<f64>() / n_classes as f64;
    Ok((mean, per))
}

/// How multi-label scores are expressed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScoreKind {
    Logits,
    Probabilities,
}

impl ScoreKind {
    /// Positive decision at sigmoid probability 0.5 or above.
    pub fn is_positive(self, score: f64) -> bool {
        match self {
            ScoreKind::Logits => score >= 0.0,
            ScoreKind::Probabilities => score >= 0.5,
        }
    }
}

/// Per-unit binary F1 at the 0.5 probability threshold, macro-averaged.
///
/// `scores` and `gt` are `(T x units)` row-major; `gt` must be 0 or 1 on
/// valid frames.
pub fn multilabel_f1(
    scores: &[f64],
    gt: &[f64],
    units: usize,
    kind: ScoreKind,
    mask: &[bool],
) -> Result<(f64, Vec<f64>)> {
    if units == 0 || scores.len() != gt.len() || !gt.len().is_multiple_of(units) {
        return Err(Error::Invalid(format!(
            "multilabel_f1: {} scores and {} labels do not form rows of {units}",
            scores.len(),
            gt.len()
        )));
    }
    let rows = gt.len() / units;
    check_mask(mask, rows, "multilabel_f1")?;
    let mut tp = vec![0usize; units];
    let mut fp = vec![0usize; units];
    let mut fnn = vec![0usize; units];
    for r in (0..rows).filter(|&r| mask[r]) {
        for u in 0..units {
            let t = gt[r * units + u];
            if t != 0.0 && t != 1.0 {
                return Err(Error::Invalid(format!(
                    "multilabel_f1: label {t} at frame {r}, unit {u} is not binary"
                )));
            }
            match (kind.is_positive(scores[r * units + u]), t == 1.0) {
                (true, true) => tp[u] += 1,
                (true, false) => fp[u] += 1,
                (false, true) => fnn[u] += 1,
                (false, false) => {}
            }
        }
    }
    let per: Vec<f64> = (0..units).map(|u| f1(tp[u], fp[u], fnn[u])).collect();
    let mean = per.iter().sum::<f64>() / units as f64;
    Ok((mean, per))
}

/// Ordered `name -> value` metrics.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub entries: Vec<(String, f64)>,
}

impl MetricReport {
    pub fn push(&mut self, name: impl Into<String>, value: f64) {
        self.entries.push((name.into(), value));
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    /// One `name=value` line per metric, six decimals.
    pub fn to_key_values(&self) -> String {
        self.entries
            .iter()
            .map(|(n, v)| format!("{n}={v:.6}\n"))
            .collect()
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self.entries.iter().map(|(n, _)| n.len()).max().unwrap_or(0);
        for (n, v) in &self.entries {
            writeln!(f, "{n:<width$}  {v:>10.6}")?;
        }
        Ok(())
    }
}
