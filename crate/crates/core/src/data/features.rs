//! Per-video feature tracks, their binary file format, audio alignment and
//! missing-face imputation.
//!
//! File layout (all integers little-endian):
//!
//! ```text
//! "FSEQ" | version u32 = 1 | modality u8 (0 visual, 1 audio) | n_frames u32 | dim u32
//!        | validity bitmap, ceil(n_frames / 8) bytes, visual only
//!        | n_frames * dim f32, row-major
//! ```
//!
//! Bitmap bit `f % 8` of byte `f / 8` (least significant first) is set when
//! frame `f` has a detected face.

use std::path::Path;

use crate::binio::{put_f32s, put_u32, ByteReader};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"FSEQ";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    Visual,
    Audio,
}

impl Modality {
    fn code(self) -> u8 {
        match self {
            Modality::Visual => 0,
            Modality::Audio => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Visual => "visual",
            Modality::Audio => "audio",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    pub video_id: String,
    pub modality: Modality,
    pub n_frames: usize,
    pub dim: usize,
    /// `n_frames x dim`, row-major.
    pub data: Vec<f32>,
    /// Face detected per frame; all true for audio.
    pub valid: Vec<bool>,
}

impl FeatureSequence {
    pub fn new(video_id: impl Into<String>, modality: Modality, dim: usize, data: Vec<f32>, valid: Option<Vec<bool>>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Invalid("feature dim must be positive".into()));
        }
        if !data.len().is_multiple_of(dim) {
            return Err(Error::Invalid(format!(
                "{} feature values do not form rows of {dim}",
                data.len()
            )));
        }
        let n_frames = data.len() / dim;
        let valid = valid.unwrap_or_else(|| vec![true; n_frames]);
        if valid.len() != n_frames {
            return Err(Error::Invalid(format!(
                "{} validity flags for {n_frames} frames",
                valid.len()
            )));
        }
        Ok(FeatureSequence {
            video_id: video_id.into(),
            modality,
            n_frames,
            dim,
            data,
            valid,
        })
    }

    pub fn row(&self, f: usize) -> &[f32] {
        &self.data[f * self.dim..(f + 1) * self.dim]
    }
}

pub fn encode(seq: &FeatureSequence) -> Result<Vec<u8>> {
    let to_u32 = |n: usize, what: &str| {
        u32::try_from(n).map_err(|_| Error::Invalid(format!("{what} {n} exceeds u32")))
    };
    let mut out = Vec::with_capacity(17 + seq.n_frames.div_ceil(8) + seq.data.len() * 4);
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    out.push(seq.modality.code());
    put_u32(&mut out, to_u32(seq.n_frames, "n_frames")?);
    put_u32(&mut out, to_u32(seq.dim, "dim")?);
    if seq.modality == Modality::Visual {
        let mut bitmap = vec![0u8; seq.n_frames.div_ceil(8)];
        for (f, _) in seq.valid.iter().enumerate().filter(|(_, &v)| v) {
            bitmap[f / 8] |= 1 << (f % 8);
        }
        out.extend_from_slice(&bitmap);
    }
    put_f32s(&mut out, seq.data.iter().copied());
    Ok(out)
}

/// Parses a feature file; `video_id` is not stored in the file and is
/// attached by the caller.
pub fn decode(bytes: &[u8], source: &str, video_id: &str) -> Result<FeatureSequence> {
    let mut r = ByteReader::new(bytes, source);
    let magic = r.bytes(4, "magic")?;
    if magic != MAGIC {
        return Err(r.error(0, format!("bad magic {magic:?}, expected \"FSEQ\"")));
    }
    let at = r.offset();
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(r.error(at, format!("unsupported version {version}")));
    }
    let at = r.offset();
    let modality = match r.u8("modality")? {
        0 => Modality::Visual,
        1 => Modality::Audio,
        m => return Err(r.error(at, format!("unknown modality code {m}"))),
    };
    let n_frames = r.u32("n_frames")? as usize;
    let at = r.offset();
    let dim = r.u32("dim")? as usize;
    if dim == 0 {
        return Err(r.error(at, "dim must be positive"));
    }
    let valid = match modality {
        Modality::Visual => {
            let bitmap = r.bytes(n_frames.div_ceil(8), "validity bitmap")?;
            (0..n_frames).map(|f| bitmap[f / 8] >> (f % 8) & 1 == 1).collect()
        }
        Modality::Audio => vec![true; n_frames],
    };
    let at = r.offset();
    let count = n_frames
        .checked_mul(dim)
        .filter(|c| c.checked_mul(4).is_some())
        .ok_or_else(|| r.error(at, "payload size overflows"))?;
    let data = r.f32s(count, "payload")?;
    r.expect_end()?;
    Ok(FeatureSequence {
        video_id: video_id.to_string(),
        modality,
        n_frames,
        dim,
        data,
        valid,
    })
}

pub fn write(path: &Path, seq: &FeatureSequence) -> Result<()> {
    std::fs::write(path, encode(seq)?).map_err(|e| Error::io(path, e))
}

pub fn load_feature_file(path: &Path, video_id: &str) -> Result<FeatureSequence> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, &path.display().to_string(), video_id)
}

/// Resamples `a` to `n_frames` rows by per-dimension linear interpolation
/// over normalized time: output frame `j` reads source position
/// `j * (m - 1) / (n_frames - 1)`.
pub fn align_audio(a: &FeatureSequence, n_frames: usize) -> Result<FeatureSequence> {
    let m = a.n_frames;
    if m == 0 {
        return Err(Error::Invalid(format!("{}: audio track has no frames", a.video_id)));
    }
    if n_frames == 0 {
        return Err(Error::Invalid("align_audio: target length must be positive".into()));
    }
    let mut out = a.clone();
    out.n_frames = n_frames;
    out.valid = vec![true; n_frames];
    if m == n_frames {
        return Ok(out);
    }
    let d = a.dim;
    let mut data = Vec::with_capacity(n_frames * d);
    for j in 0..n_frames {
        let pos = if n_frames == 1 {
            0.0
        } else {
            j as f64 * (m - 1) as f64 / (n_frames - 1) as f64
        };
        let lo = (pos.floor() as usize).min(m - 1);
        let hi = (lo + 1).min(m - 1);
        let t = pos - lo as f64;
        let (rl, rh) = (a.row(lo), a.row(hi));
        data.extend(
            rl.iter()
                .zip(rh)
                .map(|(&x, &y)| if t == 0.0 { x } else { ((1.0 - t) * x as f64 + t * y as f64) as f32 }),
        );
    }
    out.data = data;
    Ok(out)
}

/// Replaces every frame without a face by the nearest frame that has one,
/// preferring the earlier frame on ties. Validity flags are kept so the
/// frames stay excluded from losses and metrics.
pub fn fill_missing_faces(v: &FeatureSequence) -> Result<FeatureSequence> {
    let n = v.n_frames;
    // Nearest valid frame to the left and right of each position.
    let mut left = vec![None; n];
    let mut last = None;
    for f in 0..n {
        if v.valid[f] {
            last = Some(f);
        }
        left[f] = last;
    }
    let mut right = vec![None; n];
    last = None;
    for f in (0..n).rev() {
        if v.valid[f] {
            last = Some(f);
        }
        right[f] = last;
    }
    if n > 0 && left[n - 1].is_none() {
        return Err(Error::Invalid(format!("{}: no frame has a detected face", v.video_id)));
    }
    let mut out = v.clone();
    for f in (0..n).filter(|&f| !v.valid[f]) {
        let src = match (left[f], right[f]) {
            (Some(l), Some(r)) => {
                if f - l <= r - f {
                    l
                } else {
                    r
                }
            }
            (Some(l), None) => l,
            (None, Some(r)) => r,
            (None, None) => unreachable!("at least one valid frame exists"),
        };
        out.data[f * v.dim..(f + 1) * v.dim].copy_from_slice(v.row(src));
    }
    Ok(out)
}
