//! Automatic carotid segmentation and IDIF extraction.
//!
//! Threshold the reference frame, split the result into connected islands,
//! keep the largest islands above a size floor, merge them, then drop small
//! face-connected fragments left over in the merged mask.

use serde::{Deserialize, Serialize};

use crate::volume::{Dims3, DynVolume, LabelInfo, LabeledMask, Mask, Tac};

#[derive(Debug, thiserror::Error)]
pub enum SegError {
    #[error("no island survived filtering (threshold {threshold}, {islands} islands)")]
    EmptySegmentation { threshold: f64, islands: usize },
    #[error("mask is empty")]
    EmptyMask,
    #[error("mask dims {mask:?} do not match volume dims {volume:?}")]
    DimsMismatch { mask: Dims3, volume: Dims3 },
    #[error("invalid segmentation config: {0}")]
    InvalidConfig(String),
    #[error("frame {frame} out of range ({n} frames)")]
    FrameOutOfRange { frame: usize, n: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", content = "value", rename_all = "snake_case")]
pub enum ThresholdMode {
    /// Absolute activity, kBq/mL.
    Absolute(f64),
    /// Fraction of the frame maximum.
    Fraction(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Connectivity {
    Six,
    Eighteen,
    TwentySix,
}

impl TryFrom<u8> for Connectivity {
    type Error = String;
    fn try_from(v: u8) -> Result<Self, String> {
        match v {
            6 => Ok(Self::Six),
            18 => Ok(Self::Eighteen),
            26 => Ok(Self::TwentySix),
            _ => Err(format!("connectivity must be 6, 18 or 26, got {v}")),
        }
    }
}

impl From<Connectivity> for u8 {
    fn from(c: Connectivity) -> u8 {
        match c {
            Connectivity::Six => 6,
            Connectivity::Eighteen => 18,
            Connectivity::TwentySix => 26,
        }
    }
}

impl Connectivity {
    /// Neighbour offsets that precede a voxel in linear order.
    fn backward_offsets(self) -> Vec<(isize, isize, isize)> {
        let mut out = Vec::new();
        for dz in -1isize..=1 {
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    let manhattan = dx.abs() + dy.abs() + dz.abs();
                    let keep = match self {
                        Self::Six => manhattan == 1,
                        Self::Eighteen => manhattan == 1 || manhattan == 2,
                        Self::TwentySix => manhattan > 0,
                    };
                    let before = (dz, dy, dx) < (0, 0, 0);
                    if keep && before {
                        out.push((dx, dy, dz));
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegConfig {
    pub threshold: ThresholdMode,
    pub connectivity: Connectivity,
    /// Islands smaller than this many voxels are discarded.
    pub min_island_size: usize,
    pub top_k: usize,
    /// Face-connected fragments of the merged mask below this size are removed.
    pub cleanup_min_size: usize,
}

impl Default for SegConfig {
    fn default() -> Self {
        Self {
            threshold: ThresholdMode::Fraction(0.6),
            connectivity: Connectivity::TwentySix,
            min_island_size: 20,
            top_k: 2,
            cleanup_min_size: 4,
        }
    }
}

impl SegConfig {
    pub fn validate(&self) -> Result<(), SegError> {
        match self.threshold {
            ThresholdMode::Fraction(f) if !(f > 0.0 && f <= 1.0) => {
                return Err(SegError::InvalidConfig(format!(
                    "threshold fraction must be in (0, 1], got {f}"
                )))
            }
            ThresholdMode::Absolute(a) if !a.is_finite() => {
                return Err(SegError::InvalidConfig(
                    "absolute threshold must be finite".into(),
                ))
            }
            _ => {}
        }
        if self.top_k == 0 {
            return Err(SegError::InvalidConfig("top_k must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SegResult {
    #[serde(skip)]
    pub mask: Mask,
    pub threshold: f64,
    /// Every island's size, largest first.
    pub island_sizes: Vec<usize>,
    pub kept_sizes: Vec<usize>,
    /// Islands dropped by the size floor or the top-k cut.
    pub removed_clusters: usize,
    /// Fragments removed by the final cleanup.
    pub cleanup_removed: usize,
    pub mask_voxels: usize,
}

pub fn resolve_threshold(frame: &[f32], mode: ThresholdMode) -> f64 {
    match mode {
        ThresholdMode::Absolute(a) => a,
        ThresholdMode::Fraction(f) => {
            let max = frame.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v));
            f * max as f64
        }
    }
}

/// Voxels with value ≥ the resolved threshold.
pub fn threshold_mask(frame: &[f32], dims: Dims3, mode: ThresholdMode) -> (Mask, f64) {
    let thr = resolve_threshold(frame, mode);
    let bits = frame.iter().map(|&v| v as f64 >= thr).collect();
    (
        Mask::from_bits(dims, bits).expect("frame length matches dims"),
        thr,
    )
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

/// Connected components, labelled 1.. by decreasing size; equal sizes are
/// ordered by their smallest linear voxel index.
pub fn label_islands(mask: &Mask, connectivity: Connectivity) -> LabeledMask {
    let dims = mask.dims();
    let (nx, ny, nz) = (dims.nx as isize, dims.ny as isize, dims.nz as isize);
    let offsets = connectivity.backward_offsets();
    let mut parent: Vec<usize> = (0..dims.len()).collect();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let i = dims.index(x as usize, y as usize, z as usize);
                if !mask.get(i) {
                    continue;
                }
                for &(dx, dy, dz) in &offsets {
                    let (a, b, c) = (x + dx, y + dy, z + dz);
                    if a < 0 || b < 0 || c < 0 || a >= nx || b >= ny || c >= nz {
                        continue;
                    }
                    let j = dims.index(a as usize, b as usize, c as usize);
                    if mask.get(j) {
                        let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                        if ri != rj {
                            // the smaller index becomes the root
                            let (lo, hi) = if ri < rj { (ri, rj) } else { (rj, ri) };
                            parent[hi] = lo;
                        }
                    }
                }
            }
        }
    }
    // roots are the smallest index of each component
    let mut size = std::collections::BTreeMap::<usize, usize>::new();
    for i in 0..dims.len() {
        if mask.get(i) {
            let r = find(&mut parent, i);
            *size.entry(r).or_default() += 1;
        }
    }
    let mut comps: Vec<(usize, usize)> = size.into_iter().collect();
    comps.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut label_of = std::collections::HashMap::with_capacity(comps.len());
    for (k, (root, _)) in comps.iter().enumerate() {
        label_of.insert(*root, k as u32 + 1);
    }
    let mut labels = vec![0u32; dims.len()];
    for (i, l) in labels.iter_mut().enumerate() {
        if mask.get(i) {
            *l = label_of[&find(&mut parent, i)];
        }
    }
    let table = (1..=comps.len() as u32)
        .map(|id| LabelInfo {
            id,
            name: format!("island_{id}"),
            side: None,
            size: 0,
        })
        .collect();
    LabeledMask::new(dims, labels, table).expect("labels match table")
}

/// Keeps islands of at least `min_island_size`, then the `top_k` largest, and
/// merges them. `threshold` is only recorded in the result.
pub fn filter_and_merge(
    labeled: &LabeledMask,
    cfg: &SegConfig,
    threshold: f64,
) -> Result<SegResult, SegError> {
    cfg.validate()?;
    let mut table: Vec<&LabelInfo> = labeled.table().iter().collect();
    table.sort_by(|a, b| b.size.cmp(&a.size).then(a.id.cmp(&b.id)));
    let island_sizes: Vec<usize> = table.iter().map(|e| e.size).collect();
    let kept: Vec<&LabelInfo> = table
        .iter()
        .copied()
        .filter(|e| e.size >= cfg.min_island_size)
        .take(cfg.top_k)
        .collect();
    if kept.is_empty() {
        return Err(SegError::EmptySegmentation {
            threshold,
            islands: table.len(),
        });
    }
    let keep_ids: std::collections::HashSet<u32> = kept.iter().map(|e| e.id).collect();
    let dims = labeled.dims();
    let merged = Mask::from_bits(
        dims,
        labeled
            .labels()
            .iter()
            .map(|l| keep_ids.contains(l))
            .collect(),
    )
    .expect("dims match");

    let (mask, cleanup_removed) = if cfg.cleanup_min_size > 1 {
        let frag = label_islands(&merged, Connectivity::Six);
        let small: std::collections::HashSet<u32> = frag
            .table()
            .iter()
            .filter(|e| e.size < cfg.cleanup_min_size)
            .map(|e| e.id)
            .collect();
        let bits = frag
            .labels()
            .iter()
            .map(|l| *l != 0 && !small.contains(l))
            .collect();
        (
            Mask::from_bits(dims, bits).expect("dims match"),
            small.len(),
        )
    } else {
        (merged, 0)
    };
    if mask.is_empty() {
        return Err(SegError::EmptySegmentation {
            threshold,
            islands: table.len(),
        });
    }
    Ok(SegResult {
        mask_voxels: mask.count(),
        mask,
        threshold,
        kept_sizes: kept.iter().map(|e| e.size).collect(),
        removed_clusters: table.len() - kept.len(),
        island_sizes,
        cleanup_removed,
    })
}

/// Threshold, label, filter and merge one frame of `vol`.
pub fn segment_frame(
    vol: &DynVolume,
    frame: usize,
    cfg: &SegConfig,
) -> Result<SegResult, SegError> {
    cfg.validate()?;
    if frame >= vol.n_frames() {
        return Err(SegError::FrameOutOfRange {
            frame,
            n: vol.n_frames(),
        });
    }
    let (mask, thr) = threshold_mask(vol.frame(frame), vol.dims(), cfg.threshold);
    let labeled = label_islands(&mask, cfg.connectivity);
    filter_and_merge(&labeled, cfg, thr)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "strategy", rename_all = "snake_case")]
pub enum IdifStrategy {
    Mean,
    /// Mean of the hottest `percent` of mask voxels, ranked per frame.
    HottestPercent {
        percent: f64,
    },
}

impl Default for IdifStrategy {
    fn default() -> Self {
        IdifStrategy::Mean
    }
}

fn check_mask(vol: &DynVolume, mask: &Mask) -> Result<Vec<usize>, SegError> {
    if mask.dims() != vol.dims() {
        return Err(SegError::DimsMismatch {
            mask: mask.dims(),
            volume: vol.dims(),
        });
    }
    let idx = mask.indices();
    if idx.is_empty() {
        return Err(SegError::EmptyMask);
    }
    Ok(idx)
}

fn tac_of(vol: &DynVolume, values: Vec<f64>) -> Tac {
    Tac::new(vol.mid_times_min(), values).expect("volume schedule is a valid grid")
}

pub fn extract_idif(vol: &DynVolume, mask: &Mask, strategy: IdifStrategy) -> Result<Tac, SegError> {
    let idx = check_mask(vol, mask)?;
    let take = match strategy {
        IdifStrategy::Mean => idx.len(),
        IdifStrategy::HottestPercent { percent } => {
            if !(percent > 0.0 && percent <= 100.0) {
                return Err(SegError::InvalidConfig(format!(
                    "hottest percent must be in (0, 100], got {percent}"
                )));
            }
            ((percent / 100.0 * idx.len() as f64).ceil() as usize).clamp(1, idx.len())
        }
    };
    let values = (0..vol.n_frames())
        .map(|t| {
            let f = vol.frame(t);
            let mut v: Vec<f64> = idx.iter().map(|&i| f[i] as f64).collect();
            if take < v.len() {
                v.sort_by(|a, b| b.total_cmp(a));
                v.truncate(take);
            }
            v.iter().sum::<f64>() / take as f64
        })
        .collect();
    Ok(tac_of(vol, values))
}

/// Cube dilation by Chebyshev radius `r` (separable running max).
fn dilate(mask: &Mask, r: usize) -> Mask {
    let dims = mask.dims();
    let mut bits = mask.bits().to_vec();
    if r == 0 {
        return Mask::from_bits(dims, bits).expect("dims match");
    }
    let [nx, ny, nz] = dims.as_array();
    let strides = [1, nx, nx * ny];
    let lens = [nx, ny, nz];
    for axis in 0..3 {
        let src = bits.clone();
        let (n, s) = (lens[axis], strides[axis]);
        for i in 0..dims.len() {
            let p = (i / s) % n;
            let lo = p.saturating_sub(r);
            let hi = (p + r).min(n - 1);
            let base = i - p * s;
            bits[i] = (lo..=hi).any(|q| src[base + q * s]);
        }
    }
    Mask::from_bits(dims, bits).expect("dims match")
}

/// Voxels at Chebyshev distance `inner..=outer` from the mask.
pub fn ring_mask(mask: &Mask, inner: usize, outer: usize) -> Mask {
    let outer_m = dilate(mask, outer);
    let inner_m = dilate(mask, inner.saturating_sub(1));
    let bits = outer_m
        .bits()
        .iter()
        .zip(inner_m.bits())
        .zip(mask.bits())
        .map(|((&o, &i), &m)| o && !i && !m)
        .collect();
    Mask::from_bits(mask.dims(), bits).expect("dims match")
}

/// Mean TAC of the tissue ring around `mask`.
pub fn surrounding_tissue_tac(
    vol: &DynVolume,
    mask: &Mask,
    inner: usize,
    outer: usize,
) -> Result<Tac, SegError> {
    check_mask(vol, mask)?;
    if inner == 0 || inner > outer {
        return Err(SegError::InvalidConfig(format!(
            "ring needs 1 <= inner <= outer, got {inner}..={outer}"
        )));
    }
    let ring = ring_mask(mask, inner, outer);
    extract_idif(vol, &ring, IdifStrategy::Mean)
}
