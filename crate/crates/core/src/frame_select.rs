//! Reference-frame selection from summed crop intensities.
//!
//! The carotids are clearest one frame before the first local maximum of the
//! frame-to-frame change in total crop activity.

use serde::{Deserialize, Serialize};

use crate::volume::{Dims3, DynVolume};

pub const DEFAULT_N_FRAMES: usize = 10;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum FrameSelectError {
    #[error("crop {0:?} is outside the volume or inverted")]
    CropOutOfBounds(CropBox),
    #[error("need at least 3 frames, got {0}")]
    TooFewFrames(usize),
    #[error("requested {requested} frames but the volume has {available}")]
    NotEnoughFrames { requested: usize, available: usize },
}

/// Inclusive voxel index bounds per axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropBox {
    pub min: [usize; 3],
    pub max: [usize; 3],
}

impl CropBox {
    /// The central half of every axis.
    pub fn central(dims: Dims3) -> Self {
        let d = dims.as_array();
        let mut min = [0; 3];
        let mut max = [0; 3];
        for a in 0..3 {
            let keep = (d[a] / 2).max(1);
            min[a] = (d[a] - keep) / 2;
            max[a] = min[a] + keep - 1;
        }
        Self { min, max }
    }

    pub fn validate(&self, dims: Dims3) -> Result<(), FrameSelectError> {
        let d = dims.as_array();
        if (0..3).any(|a| self.min[a] > self.max[a] || self.max[a] >= d[a]) {
            return Err(FrameSelectError::CropOutOfBounds(*self));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameSelection {
    /// 0-based frame index.
    pub frame: usize,
    pub sums: Vec<f64>,
    pub differences: Vec<f64>,
    /// Set when no usable interior local maximum existed and the argmax fallback was used.
    pub clamped: bool,
}

/// Total activity inside `crop` for each of the first `n_frames` frames.
pub fn summed_intensity(
    vol: &DynVolume,
    crop: &CropBox,
    n_frames: usize,
) -> Result<Vec<f64>, FrameSelectError> {
    let dims = vol.dims();
    crop.validate(dims)?;
    if n_frames > vol.n_frames() {
        return Err(FrameSelectError::NotEnoughFrames {
            requested: n_frames,
            available: vol.n_frames(),
        });
    }
    Ok((0..n_frames)
        .map(|t| {
            let f = vol.frame(t);
            let mut s = 0.0;
            for z in crop.min[2]..=crop.max[2] {
                for y in crop.min[1]..=crop.max[1] {
                    let row = dims.index(0, y, z);
                    s += f[row + crop.min[0]..=row + crop.max[0]]
                        .iter()
                        .map(|&v| v as f64)
                        .sum::<f64>();
                }
            }
            s
        })
        .collect())
}

/// `d0 = s0`, `di = si − s(i−1)`.
pub fn differences(sums: &[f64]) -> Vec<f64> {
    let mut prev = 0.0;
    sums.iter()
        .map(|&s| {
            let d = s - prev;
            prev = s;
            d
        })
        .collect()
}

pub fn select_reference_frame(sums: &[f64]) -> Result<FrameSelection, FrameSelectError> {
    let n = sums.len();
    if n < 3 {
        return Err(FrameSelectError::TooFewFrames(n));
    }
    let d = differences(sums);
    let first_max = (1..n - 1).find(|&i| d[i - 1] < d[i] && d[i] > d[i + 1]);
    let (frame, clamped) = match first_max {
        Some(i) => (i - 1, false),
        None => {
            let mut best = 0;
            for (i, &v) in d.iter().enumerate() {
                if v > d[best] {
                    best = i;
                }
            }
            (best.min(n - 1), true)
        }
    };
    Ok(FrameSelection {
        frame,
        sums: sums.to_vec(),
        differences: d,
        clamped,
    })
}
