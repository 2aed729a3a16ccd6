//! Masked training losses for the three tasks, built from graph primitives.
//!
//! Every loss takes a per-frame validity mask; masked frames are dropped with
//! a gather before any arithmetic, so their values never matter.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

/// Denominators below this make CCC degenerate (both tracks constant and equal).
pub const CCC_DEGENERATE: f64 = 1e-12;

fn valid_rows(mask: &[bool], rows: usize, what: &str) -> Result<Vec<usize>> {
    if mask.len() != rows {
        return Err(Error::Invalid(format!(
            "{what}: mask has {} frames, predictions have {rows}",
            mask.len()
        )));
    }
    Ok(mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect())
}

fn check_2d(shape: &[usize], cols: usize, what: &'static str) -> Result<usize> {
    if shape.len() != 2 || shape[1] != cols {
        return Err(Error::shape(what, &[shape], format!("expected (T x {cols})")));
    }
    Ok(shape[0])
}

/// `1 - (CCC_valence + CCC_arousal) / 2` over the frames where `mask` holds.
///
/// `target` is `(T x 2)` row-major. Needs at least two valid frames.
pub fn va_loss<T: Float>(g: &mut Graph<T>, pred: Var, target: &[f64], mask: &[bool]) -> Result<Var> {
    let rows = check_2d(g.shape(pred), 2, "va_loss")?;
    if target.len() != rows * 2 {
        return Err(Error::Invalid(format!(
            "va_loss: target has {} values, expected {}",
            target.len(),
            rows * 2
        )));
    }
    let idx = valid_rows(mask, rows, "va_loss")?;
    if idx.len() < 2 {
        return Err(Error::Invalid(format!(
            "va_loss needs at least 2 valid frames, got {}",
            idx.len()
        )));
    }
    let p = g.gather(pred, idx.clone())?;
    let mut cccs = Vec::with_capacity(2);
    for d in 0..2 {
        let y: Vec<f64> = idx.iter().map(|&i| target[i * 2 + d]).collect();
        let x = g.slice(p, 1, d, 1)?;
        cccs.push(ccc_node(g, x, &y)?);
    }
    let s = g.add(cccs[0], cccs[1])?;
    let half = g.scale(s, -0.5)?;
    let one = g.scalar(1.0);
    g.add(one, half)
}

/// Differentiable population CCC between the column `x` (`N x 1`) and the
/// constant track `y`.
fn ccc_node<T: Float>(g: &mut Graph<T>, x: Var, y: &[f64]) -> Result<Var> {
    let n = y.len();
    let my = y.iter().sum::<f64>() / n as f64;
    let vy = y.iter().map(|v| (v - my) * (v - my)).sum::<f64>() / n as f64;
    let yc = g.constant(Tensor::from_f64(&[n, 1], &y.iter().map(|v| v - my).collect::<Vec<_>>())?);

    let mx = g.mean(x, None, false)?;
    let xc = g.sub(x, mx)?;
    let sq = g.mul(xc, xc)?;
    let vx = g.mean(sq, None, false)?;
    let prod = g.mul(xc, yc)?;
    let cov = g.mean(prod, None, false)?;
    let my_c = g.scalar(my);
    let gap = g.sub(mx, my_c)?;
    let gap2 = g.mul(gap, gap)?;
    let vy_c = g.scalar(vy);
    let denom = g.add(vx, vy_c)?;
    let denom = g.add(denom, gap2)?;

    if g.value(denom).item().as_f64() < CCC_DEGENERATE {
        let xs = g.value(x).to_f64_vec();
        return Ok(g.scalar(degenerate_ccc(&xs, y)));
    }
    let inv = g.reciprocal(denom)?;
    let r = g.mul(cov, inv)?;
    g.scale(r, 2.0)
}

pub(crate) fn degenerate_ccc(x: &[f64], y: &[f64]) -> f64 {
    let max_gap = x.iter().zip(y).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    if max_gap < CCC_DEGENERATE {
        1.0
    } else {
        0.0
    }
}

/// Mean softmax cross-entropy over valid frames. `logits` is `(T x C)`.
pub fn expr_loss<T: Float>(g: &mut Graph<T>, logits: Var, labels: &[i64], mask: &[bool]) -> Result<Var> {
    let shape = g.shape(logits).to_vec();
    if shape.len() != 2 || shape[1] == 0 {
        return Err(Error::shape("expr_loss", &[&shape], "expected (T x C) with C >= 1"));
    }
    let (rows, classes) = (shape[0], shape[1]);
    if labels.len() != rows {
        return Err(Error::Invalid(format!(
            "expr_loss: {} labels for {rows} frames",
            labels.len()
        )));
    }
    let idx = valid_rows(mask, rows, "expr_loss")?;
    if idx.is_empty() {
        return Err(Error::Invalid("expr_loss: no valid frames".into()));
    }
    let mut picked = Vec::with_capacity(idx.len());
    for (k, &i) in idx.iter().enumerate() {
        let l = labels[i];
        if l < 0 || l as usize >= classes {
            return Err(Error::Invalid(format!(
                "expr_loss: label {l} at frame {i} outside 0..{classes}"
            )));
        }
        picked.push(k * classes + l as usize);
    }
    let n = idx.len();
    let z = g.gather(logits, idx)?;

    // Row maxima are constants, so shifting by them leaves gradients exact.
    let zv = g.value(z).data();
    let mut shift = Vec::with_capacity(n * classes);
    for r in 0..n {
        let row = &zv[r * classes..(r + 1) * classes];
        let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        shift.extend(std::iter::repeat_n(m, classes));
    }
    let shift = g.constant(Tensor::new(vec![n, classes], shift)?);
    let zs = g.sub(z, shift)?;
    let e = g.exp(zs)?;
    let se = g.sum(e, Some(1), false)?;
    let lse = g.log(se)?;
    let flat = g.reshape(zs, &[n * classes])?;
    let pick = g.gather(flat, picked)?;
    let nll = g.sub(lse, pick)?;
    g.mean(nll, None, false)
}

/// Mean sigmoid binary cross-entropy over valid (frame, unit) pairs, in the
/// overflow-free form `max(x, 0) - x y + log(1 + exp(-|x|))`.
///
/// `labels` is `(T x U)` row-major with values in {0, 1} on valid frames.
pub fn au_loss<T: Float>(g: &mut Graph<T>, logits: Var, labels: &[f64], mask: &[bool]) -> Result<Var> {
    let shape = g.shape(logits).to_vec();
    if shape.len() != 2 || shape[1] == 0 {
        return Err(Error::shape("au_loss", &[&shape], "expected (T x U) with U >= 1"));
    }
    let (rows, units) = (shape[0], shape[1]);
    if labels.len() != rows * units {
        return Err(Error::Invalid(format!(
            "au_loss: {} labels for {rows} x {units} logits",
            labels.len()
        )));
    }
    let idx = valid_rows(mask, rows, "au_loss")?;
    if idx.is_empty() {
        return Err(Error::Invalid("au_loss: no valid frames".into()));
    }
    let mut y = Vec::with_capacity(idx.len() * units);
    for &i in &idx {
        for (u, &v) in labels[i * units..(i + 1) * units].iter().enumerate() {
            if v != 0.0 && v != 1.0 {
                return Err(Error::Invalid(format!(
                    "au_loss: label {v} at frame {i}, unit {u} is not binary"
                )));
            }
            y.push(v);
        }
    }
    let n = idx.len();
    let x = g.gather(logits, idx)?;
    let y = g.constant(Tensor::from_f64(&[n, units], &y)?);

    let pos = g.relu(x)?;
    let neg_x = g.scale(x, -1.0)?;
    let neg = g.relu(neg_x)?;
    let abs = g.add(pos, neg)?;
    let m_abs = g.scale(abs, -1.0)?;
    let e = g.exp(m_abs)?;
    let one = g.scalar(1.0);
    let e1 = g.add(e, one)?;
    let softplus = g.log(e1)?;
    let xy = g.mul(x, y)?;
    let l = g.sub(pos, xy)?;
    let l = g.add(l, softplus)?;
    g.mean(l, None, false)
}
