//! Per-frame prediction CSVs.
//!
//! Columns are `video_id,frame` followed by
//! `valence,arousal` (VA), `expr_class,p_class0..p_class7` (EXPR) or
//! `au1_prob..au12_prob,au1..au12` (AU).

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::task::{Task, AU_UNITS, EXPR_CLASSES};
use crate::train::argmax;

pub fn header(task: Task) -> Vec<String> {
    let mut h = vec!["video_id".to_string(), "frame".to_string()];
    match task {
        Task::Va => h.extend(["valence".into(), "arousal".into()]),
        Task::Expr => {
            h.push("expr_class".into());
            h.extend((0..EXPR_CLASSES).map(|c| format!("p_class{c}")));
        }
        Task::Au => {
            h.extend((1..=AU_UNITS).map(|k| format!("au{k}_prob")));
            h.extend((1..=AU_UNITS).map(|k| format!("au{k}")));
        }
    }
    h
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Writes raw model outputs (VA values, EXPR or AU logits) for each video.
/// Returns the number of data rows written.
pub fn write_predictions(path: &Path, task: Task, tracks: &[(String, Vec<f64>)]) -> Result<usize> {
    let io = |e: csv::Error| Error::Invalid(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    w.write_record(header(task)).map_err(io)?;
    let d = task.out_dim();
    let mut rows = 0;
    for (id, out) in tracks {
        if out.len() % d != 0 {
            return Err(Error::Invalid(format!("{id}: {} outputs do not form rows of {d}", out.len())));
        }
        for (f, row) in out.chunks(d).enumerate() {
            let mut rec = vec![id.clone(), f.to_string()];
            match task {
                Task::Va => rec.extend(row.iter().map(|v| format!("{v:.6}"))),
                Task::Expr => {
                    rec.push(argmax(row).to_string());
                    rec.extend(softmax(row).iter().map(|p| format!("{p:.6}")));
                }
                Task::Au => {
                    let probs: Vec<f64> = row.iter().map(|&x| sigmoid(x)).collect();
                    rec.extend(probs.iter().map(|p| format!("{p:.6}")));
                    rec.extend(row.iter().map(|&x| if x >= 0.0 { "1" } else { "0" }.to_string()));
                }
            }
            w.write_record(&rec).map_err(io)?;
            rows += 1;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(rows)
}

/// Reads a predictions CSV back into per-video score tracks: VA values,
/// EXPR class probabilities or AU probabilities.
pub fn read_predictions(path: &Path) -> Result<(Task, BTreeMap<String, Vec<f64>>)> {
    let display = path.display().to_string();
    let err = |line: u64, message: String| Error::Csv {
        path: display.clone(),
        line,
        message,
    };
    let mut rdr = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => err(1, format!("{other:?}")),
    })?;
    let hdr = rdr.headers().map_err(|e| err(1, e.to_string()))?.clone();
    let task = Task::ALL
        .into_iter()
        .find(|&t| header(t).iter().map(String::as_str).eq(hdr.iter().map(str::trim)))
        .ok_or_else(|| err(1, "header does not match any task's prediction columns".into()))?;
    let (first, count) = match task {
        Task::Va => (2, 2),
        Task::Expr => (3, EXPR_CLASSES),
        Task::Au => (2, AU_UNITS),
    };
    let mut tracks: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i as u64 + 2;
        let rec = rec.map_err(|e| err(line, e.to_string()))?;
        let id = rec[0].trim().to_string();
        let frame: usize = rec[1]
            .trim()
            .parse()
            .map_err(|_| err(line, format!("bad frame {:?}", &rec[1])))?;
        let track = tracks.entry(id.clone()).or_default();
        if frame * task.out_dim() != track.len() {
            return Err(err(line, format!("{id}: expected frame {}, found {frame}", track.len() / task.out_dim())));
        }
        for field in rec.iter().skip(first).take(count) {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| err(line, format!("bad number {field:?}")))?;
            track.push(v);
        }
    }
    Ok((task, tracks))
}
