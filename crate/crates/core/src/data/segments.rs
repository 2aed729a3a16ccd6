//! Fixed-length overlapping segments and the averaging stitcher that
//! merges per-segment predictions back into one track.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SegmentSpec {
    pub index: usize,
    pub start: usize,
    pub window: usize,
    pub stride: usize,
    /// Trailing positions filled by repeating the last real frame.
    pub pad: usize,
}

impl SegmentSpec {
    /// Number of real (non-pad) frames.
    pub fn real_len(&self) -> usize {
        self.window - self.pad
    }

    /// Global frame index read at each of the `window` positions.
    pub fn frame_indices(&self) -> Vec<usize> {
        let last = self.start + self.real_len() - 1;
        (0..self.window).map(|f| (self.start + f).min(last)).collect()
    }

    /// Per-position flag, false on padding.
    pub fn real_mask(&self) -> Vec<bool> {
        (0..self.window).map(|f| f < self.real_len()).collect()
    }
}

/// Segments of window `w` starting at `0, s, 2s, ...` for every start below
/// `n`. The last one is padded up to `w`.
pub fn split_segments(n: usize, w: usize, s: usize) -> Result<Vec<SegmentSpec>> {
    if n == 0 || w == 0 {
        return Err(Error::Invalid(format!("split_segments: n={n} and w={w} must be positive")));
    }
    if s == 0 || s > w {
        return Err(Error::Invalid(format!(
            "split_segments: stride {s} must be in 1..={w} or frames go uncovered"
        )));
    }
    Ok((0..n)
        .step_by(s)
        .enumerate()
        .map(|(index, start)| SegmentSpec {
            index,
            start,
            window: w,
            stride: s,
            pad: (start + w).saturating_sub(n),
        })
        .collect())
}

/// Averages overlapping segment predictions into an `(n x d)` row-major track.
///
/// Each prediction is `(window x d)`; padded rows are ignored. Every frame in
/// `0..n` must be covered.
pub fn stitch_predictions(segments: &[(SegmentSpec, Vec<f64>)], n: usize, d: usize) -> Result<Vec<f64>> {
    let mut mean = vec![0.0; n * d];
    let mut count = vec![0usize; n];
    for (spec, pred) in segments {
        if pred.len() != spec.window * d {
            return Err(Error::Invalid(format!(
                "segment {} prediction has {} values, expected {} x {d}",
                spec.index,
                pred.len(),
                spec.window
            )));
        }
        for f in 0..spec.real_len() {
            let g = spec.start + f;
            if g >= n {
                return Err(Error::Invalid(format!(
                    "segment {} reaches frame {g} beyond track length {n}",
                    spec.index
                )));
            }
            count[g] += 1;
            let k = count[g] as f64;
            for (acc, v) in mean[g * d..(g + 1) * d].iter_mut().zip(&pred[f * d..(f + 1) * d]) {
                *acc += (v - *acc) / k;
            }
        }
    }
    let gaps: Vec<usize> = (0..n).filter(|&f| count[f] == 0).collect();
    if !gaps.is_empty() {
        return Err(Error::Invalid(format!("frames not covered by any segment: {}", describe_ranges(&gaps))));
    }
    Ok(mean)
}

fn describe_ranges(frames: &[usize]) -> String {
    let mut parts = Vec::new();
    let mut i = 0;
    while i < frames.len() {
        let mut j = i;
        while j + 1 < frames.len() && frames[j + 1] == frames[j] + 1 {
            j += 1;
        }
        parts.push(if i == j {
            frames[i].to_string()
        } else {
            format!("{}-{}", frames[i], frames[j])
        });
        i = j + 1;
    }
    parts.join(", ")
}
