//! Per-frame label tracks and their CSV format.
//!
//! Headers: `frame,valence,arousal` (VA), `frame,expression` (EXPR) or
//! `frame,au1,...,au12` (AU). Frames must be listed as 0, 1, 2, ... .
//! Missing labels use -5 for VA and -1 for EXPR and AU.

use std::path::Path;

use crate::error::{Error, Result};
use crate::task::{Task, AU_UNITS, EXPR_CLASSES};

pub const VA_SENTINEL: f64 = -5.0;
pub const CLASS_SENTINEL: f64 = -1.0;

#[derive(Clone, Debug, PartialEq)]
pub struct LabelTrack {
    pub video_id: String,
    pub task: Task,
    pub n_frames: usize,
    /// `n_frames x task.label_width()`, row-major, sentinels included.
    pub values: Vec<f64>,
}

impl LabelTrack {
    /// Builds a track, checking every non-sentinel row against the task's
    /// value range.
    pub fn new(video_id: impl Into<String>, task: Task, values: Vec<f64>) -> Result<Self> {
        let width = task.label_width();
        if !values.len().is_multiple_of(width) {
            return Err(Error::Invalid(format!(
                "{} label values do not form rows of {width}",
                values.len()
            )));
        }
        let track = LabelTrack {
            video_id: video_id.into(),
            task,
            n_frames: values.len() / width,
            values,
        };
        for f in 0..track.n_frames {
            track.check_row(f).map_err(|m| Error::Invalid(format!("{}: frame {f}: {m}", track.video_id)))?;
        }
        Ok(track)
    }

    pub fn row(&self, f: usize) -> &[f64] {
        let w = self.task.label_width();
        &self.values[f * w..(f + 1) * w]
    }

    /// False for sentinel rows.
    pub fn is_labelled(&self, f: usize) -> bool {
        let r = self.row(f);
        match self.task {
            Task::Va => !r.contains(&VA_SENTINEL),
            Task::Expr | Task::Au => r[0] != CLASS_SENTINEL,
        }
    }

    fn check_row(&self, f: usize) -> std::result::Result<(), String> {
        let r = self.row(f);
        match self.task {
            Task::Va => {
                if r.contains(&VA_SENTINEL) {
                    return Ok(());
                }
                if let Some(v) = r.iter().find(|v| !(-1.0..=1.0).contains(*v)) {
                    return Err(format!("valence/arousal {v} outside [-1, 1]"));
                }
            }
            Task::Expr => {
                let v = r[0];
                if v != CLASS_SENTINEL && !(v.fract() == 0.0 && (0.0..EXPR_CLASSES as f64).contains(&v)) {
                    return Err(format!("expression {v} is not a class in 0..{EXPR_CLASSES} or -1"));
                }
            }
            Task::Au => {
                let sentinels = r.iter().filter(|&&v| v == CLASS_SENTINEL).count();
                if sentinels == r.len() {
                    return Ok(());
                }
                if sentinels > 0 {
                    return Err("action units mix -1 with labels".into());
                }
                if let Some(v) = r.iter().find(|&&v| v != 0.0 && v != 1.0) {
                    return Err(format!("action unit value {v} is not 0 or 1"));
                }
            }
        }
        Ok(())
    }

    /// Expression labels as class indices (-1 for missing).
    pub fn classes(&self) -> Vec<i64> {
        debug_assert_eq!(self.task, Task::Expr);
        self.values.iter().map(|&v| v as i64).collect()
    }
}

fn header_for(task: Task) -> Vec<String> {
    let mut h = vec!["frame".to_string()];
    match task {
        Task::Va => h.extend(["valence".into(), "arousal".into()]),
        Task::Expr => h.push("expression".into()),
        Task::Au => h.extend((1..=AU_UNITS).map(|k| format!("au{k}"))),
    }
    h
}

/// Infers the task from a header row.
pub fn task_from_header(header: &[&str]) -> Option<Task> {
    Task::ALL.into_iter().find(|&t| {
        let h = header_for(t);
        h.len() == header.len() && h.iter().zip(header).all(|(a, b)| a == b.trim())
    })
}

pub fn read_labels(path: &Path, video_id: &str) -> Result<LabelTrack> {
    let display = path.display().to_string();
    let csv_err = |line: u64, message: String| Error::Csv {
        path: display.clone(),
        line,
        message,
    };
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => csv_err(1, format!("{other:?}")),
        })?;
    let header = rdr.headers().map_err(|e| csv_err(1, e.to_string()))?.clone();
    let fields: Vec<&str> = header.iter().collect();
    let task = task_from_header(&fields).ok_or_else(|| {
        csv_err(
            1,
            format!("unrecognized header {fields:?}; expected frame,valence,arousal | frame,expression | frame,au1..au12"),
        )
    })?;
    let mut values = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i as u64 + 2;
        let rec = rec.map_err(|e| csv_err(line, e.to_string()))?;
        let frame: usize = rec[0]
            .trim()
            .parse()
            .map_err(|_| csv_err(line, format!("bad frame index {:?}", &rec[0])))?;
        if frame != i {
            return Err(csv_err(line, format!("expected frame {i}, found {frame}")));
        }
        for field in rec.iter().skip(1) {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| csv_err(line, format!("bad number {field:?}")))?;
            values.push(v);
        }
    }
    let width = task.label_width();
    let track = LabelTrack {
        video_id: video_id.to_string(),
        task,
        n_frames: values.len() / width,
        values,
    };
    for f in 0..track.n_frames {
        track.check_row(f).map_err(|m| csv_err(f as u64 + 2, m))?;
    }
    Ok(track)
}

pub fn write_labels(path: &Path, track: &LabelTrack) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))?;
    let io = |e: csv::Error| Error::Invalid(format!("{}: {e}", path.display()));
    w.write_record(header_for(track.task)).map_err(io)?;
    for f in 0..track.n_frames {
        let mut rec = vec![f.to_string()];
        rec.extend(track.row(f).iter().map(|v| format_label(track.task, *v)));
        w.write_record(&rec).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn format_label(task: Task, v: f64) -> String {
    match task {
        Task::Va => format!("{v}"),
        Task::Expr | Task::Au => format!("{}", v as i64),
    }
}
