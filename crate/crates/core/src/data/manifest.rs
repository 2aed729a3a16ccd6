//! Dataset manifests and assembled per-video inputs.
//!
//! A manifest is a CSV with columns `video_id,visual,audio,labels,split`.
//! Paths are relative to the manifest's directory; `labels` may be empty for
//! prediction-only use. `split` is `train` or `val`.

use std::path::{Path, PathBuf};

use crate::data::features::{align_audio, fill_missing_faces, load_feature_file, Modality};
use crate::data::labels::{read_labels, LabelTrack};
use crate::error::{Error, Result};
use crate::task::Task;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub video_id: String,
    pub visual: PathBuf,
    pub audio: PathBuf,
    pub labels: Option<PathBuf>,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

const HEADER: [&str; 5] = ["video_id", "visual", "audio", "labels", "split"];

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        let display = path.display().to_string();
        let err = |line: u64, message: String| Error::Csv {
            path: display.clone(),
            line,
            message,
        };
        let base = path.parent().unwrap_or(Path::new(""));
        let mut rdr = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => err(1, format!("{other:?}")),
        })?;
        let header = rdr.headers().map_err(|e| err(1, e.to_string()))?.clone();
        if header.iter().map(str::trim).ne(HEADER) {
            return Err(err(1, format!("header must be {}", HEADER.join(","))));
        }
        let mut entries: Vec<ManifestEntry> = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let line = i as u64 + 2;
            let rec = rec.map_err(|e| err(line, e.to_string()))?;
            let field = |k: usize| rec[k].trim();
            let video_id = field(0).to_string();
            if video_id.is_empty() {
                return Err(err(line, "empty video_id".into()));
            }
            if entries.iter().any(|e| e.video_id == video_id) {
                return Err(err(line, format!("duplicate video_id {video_id}")));
            }
            let split = Split::parse(field(4))
                .ok_or_else(|| err(line, format!("split must be train or val, got {:?}", field(4))))?;
            entries.push(ManifestEntry {
                video_id,
                visual: base.join(field(1)),
                audio: base.join(field(2)),
                labels: (!field(3).is_empty()).then(|| base.join(field(3))),
                split,
            });
        }
        Ok(Manifest { entries })
    }

    /// Writes a manifest whose paths are stored relative to `root`.
    pub fn write(&self, path: &Path, root: &Path) -> Result<()> {
        let rel = |p: &Path| p.strip_prefix(root).unwrap_or(p).display().to_string();
        let io = |e: csv::Error| Error::Invalid(format!("{}: {e}", path.display()));
        let mut w = csv::Writer::from_path(path).map_err(io)?;
        w.write_record(HEADER).map_err(io)?;
        for e in &self.entries {
            w.write_record([
                e.video_id.clone(),
                rel(&e.visual),
                rel(&e.audio),
                e.labels.as_deref().map(rel).unwrap_or_default(),
                e.split.name().to_string(),
            ])
            .map_err(io)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn split(&self, split: Split) -> Vec<&ManifestEntry> {
        self.entries.iter().filter(|e| e.split == split).collect()
    }
}

/// Model-ready inputs for one video: face-filled visual features, audio
/// resampled to the visual frame count, and labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Video {
    pub id: String,
    pub n_frames: usize,
    pub visual_dim: usize,
    pub audio_dim: usize,
    /// `n_frames x visual_dim`.
    pub visual: Vec<f32>,
    /// `n_frames x audio_dim`.
    pub audio: Vec<f32>,
    pub face: Vec<bool>,
    pub labels: Option<LabelTrack>,
}

impl Video {
    /// Frames that count toward losses and metrics: a face was detected and a
    /// label is present.
    pub fn frame_mask(&self) -> Vec<bool> {
        (0..self.n_frames)
            .map(|f| self.face[f] && self.labels.as_ref().is_some_and(|l| l.is_labelled(f)))
            .collect()
    }

    pub fn labels(&self) -> Result<&LabelTrack> {
        self.labels
            .as_ref()
            .ok_or_else(|| Error::Invalid(format!("{}: no labels in manifest", self.id)))
    }
}

/// Loads and prepares one manifest entry. When `task` is given the label file
/// must be for that task.
pub fn load_video(entry: &ManifestEntry, task: Option<Task>) -> Result<Video> {
    let id = &entry.video_id;
    let visual = load_feature_file(&entry.visual, id)?;
    if visual.modality != Modality::Visual {
        return Err(Error::Invalid(format!("{}: not a visual feature file", entry.visual.display())));
    }
    let audio = load_feature_file(&entry.audio, id)?;
    if audio.modality != Modality::Audio {
        return Err(Error::Invalid(format!("{}: not an audio feature file", entry.audio.display())));
    }
    if visual.n_frames == 0 {
        return Err(Error::Invalid(format!("{id}: visual track has no frames")));
    }
    let visual = fill_missing_faces(&visual)?;
    let audio = align_audio(&audio, visual.n_frames)?;
    let labels = match &entry.labels {
        Some(p) => {
            let l = read_labels(p, id)?;
            if let Some(t) = task {
                if l.task != t {
                    return Err(Error::Invalid(format!(
                        "{}: labels are for task {}, expected {t}",
                        p.display(),
                        l.task
                    )));
                }
            }
            if l.n_frames != visual.n_frames {
                return Err(Error::Invalid(format!(
                    "{id}: {} label rows for {} frames",
                    l.n_frames, visual.n_frames
                )));
            }
            Some(l)
        }
        None => None,
    };
    Ok(Video {
        id: id.clone(),
        n_frames: visual.n_frames,
        visual_dim: visual.dim,
        audio_dim: audio.dim,
        visual: visual.data,
        audio: audio.data,
        face: visual.valid,
        labels,
    })
}

pub fn load_videos(entries: &[&ManifestEntry], task: Option<Task>) -> Result<Vec<Video>> {
    let videos: Vec<Video> = entries.iter().map(|e| load_video(e, task)).collect::<Result<_>>()?;
    if let Some(first) = videos.first() {
        if let Some(v) = videos
            .iter()
            .find(|v| v.visual_dim != first.visual_dim || v.audio_dim != first.audio_dim)
        {
            return Err(Error::Invalid(format!(
                "{}: feature dims {}/{} differ from {}/{} of {}",
                v.id, v.visual_dim, v.audio_dim, first.visual_dim, first.audio_dim, first.id
            )));
        }
    }
    Ok(videos)
}
