//! Dynamic volume, mask and time-activity curve data model.
//!
//! All voxel data is stored x-fastest: `x + nx * (y + ny * (z + nz * t))`.
//! Internal units are minutes for time and kBq/mL for activity.

mod io;
pub mod nifti;

pub use io::{
    atomic_write, load_atlas, load_mask, load_nifti, load_parametric_map, load_volume,
    read_sidecar, save_atlas, save_mask, save_parametric_map, save_volume, sidecar_path,
    tac_from_csv, tac_to_csv, write_json, Sidecar,
};

use serde::{Deserialize, Serialize};
use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum VolumeError {
    #[error("frame schedule is empty")]
    EmptySchedule,
    #[error("frame {index} has non-positive duration {value} s")]
    NonPositiveDuration { index: usize, value: f64 },
    #[error("schedule offset must be finite and >= 0, got {0}")]
    NegativeOffset(f64),
    #[error("data length {actual} does not match dims (expected {expected})")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("dimension mismatch: {0}")]
    DimsMismatch(String),
    #[error("non-finite voxel value at linear index {index}")]
    NonFinite { index: usize },
    #[error("bad NIfTI magic {0:?}, expected \"n+1\\0\"")]
    BadMagic([u8; 4]),
    #[error("unsupported NIfTI datatype code {0} (float32, int16, uint16 accepted)")]
    UnsupportedDatatype(i16),
    #[error("unsupported NIfTI header: {0}")]
    BadHeader(String),
    #[error("payload truncated: need {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("sidecar schedule has {schedule} frames but the volume has {frames}")]
    SchedulingMismatch { schedule: usize, frames: usize },
    #[error("missing JSON sidecar {0}")]
    MissingSidecar(PathBuf),
    #[error("TAC times not strictly increasing at row {row}")]
    NonMonotonicTimes { row: usize },
    #[error("TAC has {times} times but {values} values")]
    UnequalLengths { times: usize, values: usize },
    #[error("non-finite TAC entry at row {row}")]
    NonFiniteTac { row: usize },
    #[error("parse error at row {row}: {message}")]
    ParseError { row: usize, message: String },
    #[error("label {0} is not in the label table")]
    UnknownLabel(u32),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T, E = VolumeError> = std::result::Result<T, E>;

/// Spatial grid size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims3 {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
}

impl Dims3 {
    pub const fn new(nx: usize, ny: usize, nz: usize) -> Self {
        Self { nx, ny, nz }
    }

    #[inline]
    pub const fn len(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    #[inline]
    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline(always)]
    pub const fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.nx * (y + self.ny * z)
    }

    #[inline]
    pub const fn coords(&self, idx: usize) -> (usize, usize, usize) {
        let x = idx % self.nx;
        let y = (idx / self.nx) % self.ny;
        let z = idx / (self.nx * self.ny);
        (x, y, z)
    }

    pub const fn as_array(&self) -> [usize; 3] {
        [self.nx, self.ny, self.nz]
    }
}

/// Per-frame acquisition durations (seconds) and a start offset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameSchedule {
    durations_s: Vec<f64>,
    offset_s: f64,
}

impl FrameSchedule {
    pub fn new(durations_s: Vec<f64>, offset_s: f64) -> Result<Self> {
        frame_mid_times(&durations_s, offset_s)?;
        Ok(Self {
            durations_s,
            offset_s,
        })
    }

    /// 18x10 s, 10x60 s, 10x288 s: 38 frames over about 61 minutes.
    pub fn default_38() -> Self {
        let mut d = vec![10.0; 18];
        d.extend(std::iter::repeat_n(60.0, 10));
        d.extend(std::iter::repeat_n(288.0, 10));
        Self::new(d, 0.0).expect("static schedule is valid")
    }

    pub fn durations_s(&self) -> &[f64] {
        &self.durations_s
    }

    pub fn offset_s(&self) -> f64 {
        self.offset_s
    }

    pub fn len(&self) -> usize {
        self.durations_s.len()
    }

    pub fn is_empty(&self) -> bool {
        self.durations_s.is_empty()
    }

    /// Frame mid-times in minutes.
    pub fn mid_times_min(&self) -> Vec<f64> {
        frame_mid_times(&self.durations_s, self.offset_s).expect("validated at construction")
    }
}

/// Mid-time of frame i is `offset + sum(d[..i]) + d[i] / 2`, returned in minutes.
pub fn frame_mid_times(durations_s: &[f64], offset_s: f64) -> Result<Vec<f64>> {
    if durations_s.is_empty() {
        return Err(VolumeError::EmptySchedule);
    }
    if !(offset_s.is_finite() && offset_s >= 0.0) {
        return Err(VolumeError::NegativeOffset(offset_s));
    }
    let mut start = offset_s;
    let mut mids = Vec::with_capacity(durations_s.len());
    for (index, &d) in durations_s.iter().enumerate() {
        if !(d.is_finite() && d > 0.0) {
            return Err(VolumeError::NonPositiveDuration { index, value: d });
        }
        mids.push((start + 0.5 * d) / 60.0);
        start += d;
    }
    Ok(mids)
}

/// 4D activity volume (kBq/mL) with its frame schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct DynVolume {
    dims: Dims3,
    voxel_mm: [f64; 3],
    schedule: FrameSchedule,
    data: Vec<f32>,
    clamped_negatives: usize,
}

impl DynVolume {
    /// Validates the payload; negative voxels are clamped to zero and counted,
    /// non-finite voxels are rejected.
    pub fn new(
        dims: Dims3,
        voxel_mm: [f64; 3],
        schedule: FrameSchedule,
        mut data: Vec<f32>,
    ) -> Result<Self> {
        let expected = dims.len() * schedule.len();
        if data.len() != expected {
            return Err(VolumeError::LengthMismatch {
                expected,
                actual: data.len(),
            });
        }
        let mut clamped = 0;
        for (index, v) in data.iter_mut().enumerate() {
            if !v.is_finite() {
                return Err(VolumeError::NonFinite { index });
            }
            if *v < 0.0 {
                *v = 0.0;
                clamped += 1;
            }
        }
        if clamped > 0 {
            log::warn!("clamped {clamped} negative voxel values to 0");
        }
        Ok(Self {
            dims,
            voxel_mm,
            schedule,
            data,
            clamped_negatives: clamped,
        })
    }

    pub fn dims(&self) -> Dims3 {
        self.dims
    }

    pub fn voxel_mm(&self) -> [f64; 3] {
        self.voxel_mm
    }

    pub fn schedule(&self) -> &FrameSchedule {
        &self.schedule
    }

    pub fn n_frames(&self) -> usize {
        self.schedule.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Number of negative values clamped to zero at construction.
    pub fn clamped_negatives(&self) -> usize {
        self.clamped_negatives
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        let n = self.dims.len();
        &self.data[t * n..(t + 1) * n]
    }

    /// Time series of one voxel across all frames.
    pub fn voxel_series(&self, idx: usize) -> Vec<f64> {
        let n = self.dims.len();
        (0..self.n_frames())
            .map(|t| self.data[t * n + idx] as f64)
            .collect()
    }

    pub fn mid_times_min(&self) -> Vec<f64> {
        self.schedule.mid_times_min()
    }
}

/// Binary voxel set over a 3D grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    dims: Dims3,
    bits: Vec<bool>,
}

impl Mask {
    pub fn empty(dims: Dims3) -> Self {
        Self {
            dims,
            bits: vec![false; dims.len()],
        }
    }

    pub fn from_bits(dims: Dims3, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != dims.len() {
            return Err(VolumeError::LengthMismatch {
                expected: dims.len(),
                actual: bits.len(),
            });
        }
        Ok(Self { dims, bits })
    }

    pub fn from_fn(dims: Dims3, f: impl Fn(usize, usize, usize) -> bool) -> Self {
        let bits = (0..dims.len())
            .map(|i| {
                let (x, y, z) = dims.coords(i);
                f(x, y, z)
            })
            .collect();
        Self { dims, bits }
    }

    pub fn dims(&self) -> Dims3 {
        self.dims
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, idx: usize) -> bool {
        self.bits[idx]
    }

    #[inline]
    pub fn set(&mut self, idx: usize, value: bool) {
        self.bits[idx] = value;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    /// Linear indices of set voxels in ascending order.
    pub fn indices(&self) -> Vec<usize> {
        self.bits
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
            .collect()
    }

    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.dims == other.dims && self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }

    pub fn or(&self, other: &Mask) -> Mask {
        assert_eq!(self.dims, other.dims);
        Mask {
            dims: self.dims,
            bits: self
                .bits
                .iter()
                .zip(&other.bits)
                .map(|(&a, &b)| a || b)
                .collect(),
        }
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.bits
            .iter()
            .map(|&b| if b { 1.0 } else { 0.0 })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Side {
    #[serde(rename = "L")]
    Left,
    #[serde(rename = "R")]
    Right,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelInfo {
    pub id: u32,
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub side: Option<Side>,
    #[serde(default)]
    pub size: usize,
}

/// Integer-labelled voxel grid (0 = background) with its label table.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledMask {
    dims: Dims3,
    labels: Vec<u32>,
    table: Vec<LabelInfo>,
}

impl LabeledMask {
    /// Builds the mask and recomputes table sizes from the label volume.
    /// Table entries whose label is absent keep size 0.
    pub fn new(dims: Dims3, labels: Vec<u32>, mut table: Vec<LabelInfo>) -> Result<Self> {
        if labels.len() != dims.len() {
            return Err(VolumeError::LengthMismatch {
                expected: dims.len(),
                actual: labels.len(),
            });
        }
        let slot: std::collections::HashMap<u32, usize> =
            table.iter().enumerate().map(|(i, e)| (e.id, i)).collect();
        for e in table.iter_mut() {
            e.size = 0;
        }
        for &l in &labels {
            if l == 0 {
                continue;
            }
            let i = *slot.get(&l).ok_or(VolumeError::UnknownLabel(l))?;
            table[i].size += 1;
        }
        Ok(Self {
            dims,
            labels,
            table,
        })
    }

    /// Table with generic names for every distinct nonzero label.
    pub fn with_generic_names(dims: Dims3, labels: Vec<u32>) -> Result<Self> {
        let mut ids: Vec<u32> = labels.iter().copied().filter(|&l| l != 0).collect();
        ids.sort_unstable();
        ids.dedup();
        let table = ids
            .into_iter()
            .map(|id| LabelInfo {
                id,
                name: format!("region_{id}"),
                side: None,
                size: 0,
            })
            .collect();
        Self::new(dims, labels, table)
    }

    pub fn dims(&self) -> Dims3 {
        self.dims
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn table(&self) -> &[LabelInfo] {
        &self.table
    }

    pub fn mask_of(&self, id: u32) -> Mask {
        Mask {
            dims: self.dims,
            bits: self.labels.iter().map(|&l| l == id).collect(),
        }
    }

    /// Union of all nonzero labels.
    pub fn foreground(&self) -> Mask {
        Mask {
            dims: self.dims,
            bits: self.labels.iter().map(|&l| l != 0).collect(),
        }
    }
}

/// Time-activity curve: mid-times in minutes, activity in kBq/mL.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tac {
    times: Vec<f64>,
    values: Vec<f64>,
}

impl Tac {
    pub fn new(times: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if times.len() != values.len() {
            return Err(VolumeError::UnequalLengths {
                times: times.len(),
                values: values.len(),
            });
        }
        for (row, (t, v)) in times.iter().zip(&values).enumerate() {
            if !t.is_finite() || !v.is_finite() {
                return Err(VolumeError::NonFiniteTac { row });
            }
            if row > 0 && *t <= times[row - 1] {
                return Err(VolumeError::NonMonotonicTimes { row });
            }
        }
        Ok(Self { times, values })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn peak(&self) -> f64 {
        self.values
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// True when both curves share the exact same time grid.
    pub fn same_grid(&self, other: &Tac) -> bool {
        self.times == other.times
    }
}
