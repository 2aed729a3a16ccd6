//! Planted-signal synthetic datasets.
//!
//! Each video carries a smooth 2-D latent trajectory. Visual and audio
//! features are fixed random linear lifts of the latent plus Gaussian noise,
//! and the labels are simple functions of the latent, so the attainable
//! scores are known by construction.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::data::features::{self, FeatureSequence, Modality};
use crate::data::labels::{write_labels, LabelTrack, CLASS_SENTINEL, VA_SENTINEL};
use crate::data::manifest::{Manifest, ManifestEntry, Split};
use crate::error::{Error, Result};
use crate::task::{Task, AU_UNITS, EXPR_CLASSES};

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    /// Training-split videos.
    pub n_videos: usize,
    /// Additional held-out videos in the `val` split.
    pub n_val_videos: usize,
    pub n_frames: usize,
    pub visual_dim: usize,
    pub audio_dim: usize,
    pub task: Task,
    /// Ratio of lifted-signal RMS to noise standard deviation; infinity means
    /// no noise.
    pub snr: f64,
    pub seed: u64,
    /// Audio frames per visual frame before alignment.
    pub audio_rate: f64,
    pub missing_face_rate: f64,
    pub missing_label_rate: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_videos: 8,
            n_val_videos: 2,
            n_frames: 600,
            visual_dim: 64,
            audio_dim: 16,
            task: Task::Va,
            snr: 10.0,
            seed: 0,
            audio_rate: 0.5,
            missing_face_rate: 0.02,
            missing_label_rate: 0.0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_videos == 0 || self.n_frames == 0 || self.visual_dim == 0 || self.audio_dim == 0 {
            return Err(Error::Config("synthetic dataset sizes must be positive".into()));
        }
        if !(self.snr > 0.0) {
            return Err(Error::Config(format!("snr must be positive, got {}", self.snr)));
        }
        if !(self.audio_rate > 0.0 && self.audio_rate.is_finite()) {
            return Err(Error::Config(format!("audio_rate must be positive, got {}", self.audio_rate)));
        }
        for (name, r) in [
            ("missing_face_rate", self.missing_face_rate),
            ("missing_label_rate", self.missing_label_rate),
        ] {
            if !(0.0..1.0).contains(&r) {
                return Err(Error::Config(format!("{name} must be in [0, 1), got {r}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SynthVideo {
    pub id: String,
    pub split: Split,
    /// `n_frames x 2` latent (valence, arousal).
    pub latent: Vec<f64>,
    pub visual: FeatureSequence,
    pub audio: FeatureSequence,
    pub labels: LabelTrack,
}

struct Lift {
    weights: Vec<f64>, // 2 x dim
    offset: Vec<f64>,
}

impl Lift {
    fn new(dim: usize, rng: &mut impl Rng) -> Self {
        let weights = (0..2 * dim).map(|_| rng.sample(StandardNormal)).collect();
        let offset = (0..dim).map(|_| 0.5 * rng.sample::<f64, _>(StandardNormal)).collect();
        Lift { weights, offset }
    }

    fn apply(&self, z: [f64; 2], noise_std: f64, rng: &mut impl Rng) -> impl Iterator<Item = f32> + '_ {
        let dim = self.offset.len();
        let noise: Vec<f64> = if noise_std > 0.0 {
            let n = Normal::new(0.0, noise_std).expect("positive std");
            (0..dim).map(|_| n.sample(rng)).collect()
        } else {
            vec![0.0; dim]
        };
        (0..dim).map(move |j| {
            (z[0] * self.weights[j] + z[1] * self.weights[dim + j] + self.offset[j] + noise[j]) as f32
        })
    }

    fn signal_rms(&self, latent: &[[f64; 2]]) -> f64 {
        let dim = self.offset.len();
        let mut acc = 0.0;
        for z in latent {
            for j in 0..dim {
                let s = z[0] * self.weights[j] + z[1] * self.weights[dim + j];
                acc += s * s;
            }
        }
        (acc / (latent.len() * dim).max(1) as f64).sqrt()
    }
}

fn trajectory(n: usize, rng: &mut impl Rng) -> Vec<[f64; 2]> {
    let comps: Vec<[(f64, f64, f64); 3]> = (0..2)
        .map(|_| {
            [0; 3].map(|_| {
                let amp = rng.random_range(0.3..0.7);
                let freq = rng.random_range(1.0 / 300.0..1.0 / 40.0);
                let phase = rng.random_range(0.0..2.0 * PI);
                (amp, freq, phase)
            })
        })
        .collect();
    (0..n)
        .map(|t| {
            let at = |d: usize| {
                comps[d]
                    .iter()
                    .map(|(a, f, p)| a * (2.0 * PI * f * t as f64 + p).sin())
                    .sum::<f64>()
                    .clamp(-1.0, 1.0)
            };
            [at(0), at(1)]
        })
        .collect()
}

/// Sector of the latent angle, 8 equal slices starting at angle -pi.
pub fn expression_of(z: [f64; 2]) -> usize {
    let angle = z[1].atan2(z[0]) + PI;
    ((angle / (2.0 * PI / EXPR_CLASSES as f64)) as usize).min(EXPR_CLASSES - 1)
}

/// Generates the dataset in memory. Same spec, same bits.
pub fn generate(spec: &SynthSpec) -> Result<Vec<SynthVideo>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let visual_lift = Lift::new(spec.visual_dim, &mut rng);
    let audio_lift = Lift::new(spec.audio_dim, &mut rng);
    let au_units: Vec<([f64; 2], f64)> = (0..AU_UNITS)
        .map(|_| {
            let theta = rng.random_range(0.0..2.0 * PI);
            ([theta.cos(), theta.sin()], rng.random_range(-0.25..0.25))
        })
        .collect();

    let total = spec.n_videos + spec.n_val_videos;
    let mut out = Vec::with_capacity(total);
    for v in 0..total {
        let (split, id) = if v < spec.n_videos {
            (Split::Train, format!("train{v:03}"))
        } else {
            (Split::Val, format!("val{:03}", v - spec.n_videos))
        };
        let n = spec.n_frames;
        let latent = trajectory(n, &mut rng);

        let v_noise = if spec.snr.is_finite() { visual_lift.signal_rms(&latent) / spec.snr } else { 0.0 };
        let mut visual = Vec::with_capacity(n * spec.visual_dim);
        let mut face = Vec::with_capacity(n);
        for z in &latent {
            let row: Vec<f32> = visual_lift.apply(*z, v_noise, &mut rng).collect();
            let missing = rng.random::<f64>() < spec.missing_face_rate;
            face.push(!missing);
            if missing {
                visual.extend(std::iter::repeat_n(0.0, spec.visual_dim));
            } else {
                visual.extend(row);
            }
        }
        if !face.contains(&true) {
            face[0] = true;
        }

        let m = ((n as f64 * spec.audio_rate).round() as usize).max(1);
        let audio_latent: Vec<[f64; 2]> = (0..m)
            .map(|j| {
                let pos = if m == 1 { 0.0 } else { j as f64 * (n - 1) as f64 / (m - 1) as f64 };
                let (lo, hi) = (pos.floor() as usize, (pos.floor() as usize + 1).min(n - 1));
                let t = pos - lo as f64;
                [0, 1].map(|d| (1.0 - t) * latent[lo][d] + t * latent[hi][d])
            })
            .collect();
        let a_noise = if spec.snr.is_finite() { audio_lift.signal_rms(&audio_latent) / spec.snr } else { 0.0 };
        let mut audio = Vec::with_capacity(m * spec.audio_dim);
        for z in &audio_latent {
            audio.extend(audio_lift.apply(*z, a_noise, &mut rng));
        }

        let mut values = Vec::with_capacity(n * spec.task.label_width());
        for z in &latent {
            let missing = rng.random::<f64>() < spec.missing_label_rate;
            match spec.task {
                Task::Va if missing => values.extend([VA_SENTINEL; 2]),
                Task::Va => values.extend([round_label(z[0]), round_label(z[1])]),
                Task::Expr if missing => values.push(CLASS_SENTINEL),
                Task::Expr => values.push(expression_of(*z) as f64),
                Task::Au if missing => values.extend([CLASS_SENTINEL; AU_UNITS]),
                Task::Au => values.extend(
                    au_units
                        .iter()
                        .map(|(w, b)| if w[0] * z[0] + w[1] * z[1] > *b { 1.0 } else { 0.0 }),
                ),
            }
        }

        out.push(SynthVideo {
            visual: FeatureSequence::new(id.clone(), Modality::Visual, spec.visual_dim, visual, Some(face))?,
            audio: FeatureSequence::new(id.clone(), Modality::Audio, spec.audio_dim, audio, None)?,
            labels: LabelTrack::new(id.clone(), spec.task, values)?,
            latent: latent.into_iter().flatten().collect(),
            id,
            split,
        });
    }
    Ok(out)
}

/// Labels go through CSV text, so keep them at a precision that prints
/// and parses back unchanged.
fn round_label(v: f64) -> f64 {
    (v * 1e6).round() / 1e6
}

/// Writes features, labels and `manifest.csv` under `dir`.
pub fn synth_dataset(spec: &SynthSpec, dir: &Path) -> Result<Manifest> {
    let videos = generate(spec)?;
    for sub in ["features", "labels"] {
        let p = dir.join(sub);
        std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut entries = Vec::with_capacity(videos.len());
    for v in &videos {
        let visual = dir.join("features").join(format!("{}.visual.fseq", v.id));
        let audio = dir.join("features").join(format!("{}.audio.fseq", v.id));
        let labels = dir.join("labels").join(format!("{}.csv", v.id));
        features::write(&visual, &v.visual)?;
        features::write(&audio, &v.audio)?;
        write_labels(&labels, &v.labels)?;
        entries.push(ManifestEntry {
            video_id: v.id.clone(),
            visual,
            audio,
            labels: Some(labels),
            split: v.split,
        });
    }
    let manifest = Manifest { entries };
    manifest.write(&dir.join("manifest.csv"), dir)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(task: Task) -> SynthSpec {
        SynthSpec {
            n_videos: 2,
            n_val_videos: 1,
            n_frames: 50,
            visual_dim: 6,
            audio_dim: 3,
            task,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn expression_sectors() {
        assert_eq!(expression_of([-1.0, -1e-9]), 0);
        assert_eq!(expression_of([1.0, 0.01]), 4);
        assert_eq!(expression_of([-1.0, 0.0]), 7);
    }

    #[test]
    fn same_seed_gives_identical_files() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let spec = small(Task::Au);
        synth_dataset(&spec, a.path()).unwrap();
        synth_dataset(&spec, b.path()).unwrap();
        for rel in ["manifest.csv", "features/train001.visual.fseq", "features/val000.audio.fseq", "labels/train000.csv"] {
            assert_eq!(
                std::fs::read(a.path().join(rel)).unwrap(),
                std::fs::read(b.path().join(rel)).unwrap(),
                "{rel}"
            );
        }
        let other = generate(&SynthSpec { seed: 1, ..spec.clone() }).unwrap();
        assert_ne!(other[0].visual.data, generate(&spec).unwrap()[0].visual.data);
    }

    #[test]
    fn manifest_loads_back() {
        let dir = tempfile::tempdir().unwrap();
        let m = synth_dataset(&small(Task::Va), dir.path()).unwrap();
        let back = Manifest::read(&dir.path().join("manifest.csv")).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.split(Split::Val).len(), 1);
        let videos = crate::data::load_videos(&back.split(Split::Train), Some(Task::Va)).unwrap();
        assert_eq!(videos[0].n_frames, 50);
        assert_eq!(videos[0].audio.len(), 50 * 3);
        assert!(crate::data::load_videos(&back.split(Split::Train), Some(Task::Expr)).is_err());
    }
}
