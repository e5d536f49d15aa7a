//! Patlak Ki estimation, voxelwise Ki maps and regional Z-scores.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::volume::{atomic_write, Dims3, DynVolume, LabeledMask, Mask, Side, Tac, VolumeError};

pub const DEFAULT_T_STAR_MIN: f64 = 10.0;
pub const DEFAULT_EPS: f64 = 1e-6;
pub const DEFAULT_Z_CUTOFF: f64 = -2.0;

#[derive(Debug, thiserror::Error)]
pub enum ParametricError {
    #[error("time grids differ ({a} vs {b} samples)")]
    GridMismatch { a: usize, b: usize },
    #[error("need at least 2 points after t* = {t_star} min, got {n}")]
    InsufficientPoints { n: usize, t_star: f64 },
    #[error("Patlak abscissae are all equal")]
    DegenerateAbscissa,
    #[error("mask/atlas dims {got:?} do not match volume dims {want:?}")]
    DimsMismatch { got: Dims3, want: Dims3 },
    #[error("need at least 2 regions with valid Ki, got {0}")]
    TooFewRegions(usize),
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatlakPoint {
    /// Acquisition time, min.
    pub t: f64,
    /// `∫₀ᵗ Cp / Cp(t)`, min.
    pub x: f64,
    /// `C_T(t) / Cp(t)`.
    pub y: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatlakFit {
    pub ki: f64,
    pub intercept: f64,
    pub r2: f64,
    pub n_points: usize,
}

/// Trapezoid cumulative integral from t = 0, with the curve taken as 0 there.
pub fn cumulative_integral(times: &[f64], values: &[f64]) -> Vec<f64> {
    let (mut t_prev, mut v_prev, mut acc) = (0.0, 0.0, 0.0);
    times
        .iter()
        .zip(values)
        .map(|(&t, &v)| {
            acc += 0.5 * (t - t_prev) * (v + v_prev);
            t_prev = t;
            v_prev = v;
            acc
        })
        .collect()
}

/// Frames usable for Patlak (`cp > eps`) with their abscissae.
struct Abscissa {
    frames: Vec<usize>,
    t: Vec<f64>,
    x: Vec<f64>,
    cp: Vec<f64>,
}

fn abscissa(cp: &Tac, eps: f64) -> Abscissa {
    let integral = cumulative_integral(cp.times(), cp.values());
    let mut a = Abscissa {
        frames: Vec::new(),
        t: Vec::new(),
        x: Vec::new(),
        cp: Vec::new(),
    };
    for (i, &c) in cp.values().iter().enumerate() {
        if c > eps {
            a.frames.push(i);
            a.t.push(cp.times()[i]);
            a.x.push(integral[i] / c);
            a.cp.push(c);
        }
    }
    a
}

fn points_from(a: &Abscissa, ct: impl Fn(usize) -> f64) -> Vec<PatlakPoint> {
    a.frames
        .iter()
        .enumerate()
        .map(|(k, &i)| PatlakPoint {
            t: a.t[k],
            x: a.x[k],
            y: ct(i) / a.cp[k],
        })
        .collect()
}

pub fn patlak_points(ct: &Tac, cp: &Tac, eps: f64) -> Result<Vec<PatlakPoint>, ParametricError> {
    if !ct.same_grid(cp) {
        return Err(ParametricError::GridMismatch {
            a: ct.len(),
            b: cp.len(),
        });
    }
    Ok(points_from(&abscissa(cp, eps), |i| ct.values()[i]))
}

/// Ordinary least squares of y on x over points with `t > t_star`.
pub fn patlak_fit(points: &[PatlakPoint], t_star: f64) -> Result<PatlakFit, ParametricError> {
    let late: Vec<&PatlakPoint> = points.iter().filter(|p| p.t > t_star).collect();
    let n = late.len();
    if n < 2 {
        return Err(ParametricError::InsufficientPoints { n, t_star });
    }
    let nf = n as f64;
    let mx = late.iter().map(|p| p.x).sum::<f64>() / nf;
    let my = late.iter().map(|p| p.y).sum::<f64>() / nf;
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for p in &late {
        let (dx, dy) = (p.x - mx, p.y - my);
        sxx += dx * dx;
        sxy += dx * dy;
        syy += dy * dy;
    }
    if sxx <= 0.0 {
        return Err(ParametricError::DegenerateAbscissa);
    }
    let ki = sxy / sxx;
    let intercept = my - ki * mx;
    let ss_res: f64 = late
        .iter()
        .map(|p| (p.y - intercept - ki * p.x).powi(2))
        .sum();
    let r2 = if syy > 0.0 { 1.0 - ss_res / syy } else { 1.0 };
    Ok(PatlakFit {
        ki,
        intercept,
        r2,
        n_points: n,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct KiMap {
    pub dims: Dims3,
    pub voxel_mm: [f64; 3],
    pub t_star: f64,
    /// `None` outside the mask, for all-zero voxels, and where the fit fails.
    pub ki: Vec<Option<f64>>,
    pub r2: Vec<Option<f64>>,
}

impl KiMap {
    pub fn save(&self, path: &Path) -> Result<(), VolumeError> {
        crate::volume::save_parametric_map(self.dims, self.voxel_mm, &self.ki, path)
    }

    pub fn valid_count(&self) -> usize {
        self.ki.iter().filter(|v| v.is_some()).count()
    }
}

/// Voxelwise Patlak using `mcif` as input. Each voxel gives exactly the result
/// [`patlak_fit`] would on its own TAC.
pub fn ki_map(
    vol: &DynVolume,
    mcif: &Tac,
    mask: &Mask,
    t_star: f64,
    eps: f64,
) -> Result<KiMap, ParametricError> {
    let grid = vol.mid_times_min();
    if grid != mcif.times() {
        return Err(ParametricError::GridMismatch {
            a: grid.len(),
            b: mcif.len(),
        });
    }
    if mask.dims() != vol.dims() {
        return Err(ParametricError::DimsMismatch {
            got: mask.dims(),
            want: vol.dims(),
        });
    }
    let a = abscissa(mcif, eps);
    let nvox = vol.dims().len();
    let fits: Vec<Option<PatlakFit>> = (0..nvox)
        .into_par_iter()
        .map(|v| {
            if !mask.get(v) {
                return None;
            }
            let series = vol.voxel_series(v);
            if series.iter().all(|&x| x == 0.0) {
                return None;
            }
            patlak_fit(&points_from(&a, |i| series[i]), t_star).ok()
        })
        .collect();
    Ok(KiMap {
        dims: vol.dims(),
        voxel_mm: vol.voxel_mm(),
        t_star,
        ki: fits.iter().map(|f| f.map(|f| f.ki)).collect(),
        r2: fits.iter().map(|f| f.map(|f| f.r2)).collect(),
    })
}

/// Population Z-scores; `None` when the spread is zero.
pub fn zscores(values: &[f64]) -> Option<Vec<f64>> {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    (sd > 0.0).then(|| values.iter().map(|v| (v - mean) / sd).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionRow {
    pub id: u32,
    pub name: String,
    pub side: Option<Side>,
    /// Mean Ki over voxels with a valid estimate.
    pub mean_ki: Option<f64>,
    pub voxels: usize,
    pub z: Option<f64>,
    pub hypometabolic: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionReport {
    pub rows: Vec<RegionRow>,
    pub mean: f64,
    pub sd: f64,
    /// Set when all region means coincide; every z is then reported as 0.
    pub degenerate: bool,
    pub cutoff: f64,
}

impl RegionReport {
    pub fn flagged(&self) -> Vec<&RegionRow> {
        self.rows.iter().filter(|r| r.hypometabolic).collect()
    }

    pub fn to_csv_bytes(&self) -> Vec<u8> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let fmt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        w.write_record([
            "id",
            "name",
            "side",
            "mean_ki",
            "voxels",
            "z",
            "hypometabolic",
        ])
        .expect("in-memory write");
        for r in &self.rows {
            let side = match r.side {
                Some(Side::Left) => "L",
                Some(Side::Right) => "R",
                None => "",
            };
            w.write_record([
                r.id.to_string(),
                r.name.clone(),
                side.to_string(),
                fmt(r.mean_ki),
                r.voxels.to_string(),
                fmt(r.z),
                r.hypometabolic.to_string(),
            ])
            .expect("in-memory write");
        }
        w.into_inner().expect("in-memory flush")
    }

    pub fn save_csv(&self, path: &Path) -> Result<(), VolumeError> {
        atomic_write(path, &self.to_csv_bytes())
    }
}

/// Region means of `kimap` over `atlas`, standardized by the mean and
/// population SD of the region means. Regions without any valid voxel get no
/// mean and no z.
pub fn regional_zscores(
    kimap: &KiMap,
    atlas: &LabeledMask,
    cutoff: f64,
) -> Result<RegionReport, ParametricError> {
    if atlas.dims() != kimap.dims {
        return Err(ParametricError::DimsMismatch {
            got: atlas.dims(),
            want: kimap.dims,
        });
    }
    let slot: std::collections::HashMap<u32, usize> = atlas
        .table()
        .iter()
        .enumerate()
        .map(|(i, e)| (e.id, i))
        .collect();
    let mut sums = vec![0.0; slot.len()];
    let mut counts = vec![0usize; slot.len()];
    for (l, k) in atlas.labels().iter().zip(&kimap.ki) {
        if let (Some(&s), Some(k)) = (slot.get(l), k) {
            sums[s] += k;
            counts[s] += 1;
        }
    }
    let means: Vec<Option<f64>> = sums
        .iter()
        .zip(&counts)
        .map(|(&s, &c)| (c > 0).then(|| s / c as f64))
        .collect();
    let present: Vec<f64> = means.iter().flatten().copied().collect();
    if present.len() < 2 {
        return Err(ParametricError::TooFewRegions(present.len()));
    }
    if present.len() < means.len() {
        log::warn!(
            "{} atlas regions have no valid Ki voxel",
            means.len() - present.len()
        );
    }
    let n = present.len() as f64;
    let mean = present.iter().sum::<f64>() / n;
    let sd = (present.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    let z = zscores(&present);
    let degenerate = z.is_none();
    let mut zi = z.unwrap_or_else(|| vec![0.0; present.len()]).into_iter();
    let rows = atlas
        .table()
        .iter()
        .zip(&means)
        .zip(&counts)
        .map(|((e, m), &c)| {
            let z = m.map(|_| zi.next().expect("one z per present region"));
            RegionRow {
                id: e.id,
                name: e.name.clone(),
                side: e.side,
                mean_ki: *m,
                voxels: c,
                hypometabolic: !degenerate && z.is_some_and(|z| z < cutoff),
                z,
            }
        })
        .collect();
    Ok(RegionReport {
        rows,
        mean,
        sd,
        degenerate,
        cutoff,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinetics::{solve_2tc_values, TwoTissueParams};
    use crate::phantom::{feng_curve, feng_input, FengParams};
    use crate::volume::{FrameSchedule, LabelInfo};
    use proptest::prelude::*;

    fn tac(t: Vec<f64>, v: Vec<f64>) -> Tac {
        Tac::new(t, v).unwrap()
    }

    #[test]
    fn linear_transform_algebra() {
        let t: Vec<f64> = (1..=20).map(|i| i as f64).collect();
        // a sample at t = 0 makes the input an exact unit step
        let mut t0 = vec![0.0];
        t0.extend(&t);
        let cp = tac(t0.clone(), vec![1.0; t0.len()]);
        let ct = tac(t0.clone(), t0.iter().map(|x| 0.025 * x).collect());
        let pts = patlak_points(&ct, &cp, DEFAULT_EPS).unwrap();
        for p in &pts {
            assert!((p.x - p.t).abs() < 1e-12);
            assert!((p.y - 0.025 * p.t).abs() < 1e-12);
        }
        let fit = patlak_fit(&pts, 0.0).unwrap();
        assert!((fit.ki - 0.025).abs() < 1e-12);
        assert!((fit.r2 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pre_bolus_frames_are_excluded() {
        let t: Vec<f64> = (1..=6).map(|i| i as f64).collect();
        let cp = tac(t.clone(), vec![0.0, 0.0, 0.0, 1.0, 2.0, 3.0]);
        let ct = tac(t, vec![0.0; 6]);
        let pts = patlak_points(&ct, &cp, DEFAULT_EPS).unwrap();
        assert_eq!(pts.len(), 3);
        assert_eq!(pts[0].t, 4.0);
    }

    #[test]
    fn collinear_fit_and_insufficient() {
        let pts: Vec<PatlakPoint> = [(1.0, 1.0), (2.0, 2.0), (3.0, 3.0)]
            .iter()
            .map(|&(x, y)| PatlakPoint { t: x, x, y })
            .collect();
        let f = patlak_fit(&pts, 0.0).unwrap();
        assert_eq!(f.ki, 1.0);
        assert_eq!(f.intercept, 0.0);
        assert_eq!(f.r2, 1.0);
        assert!(matches!(
            patlak_fit(&pts, 2.5),
            Err(ParametricError::InsufficientPoints { n: 1, .. })
        ));
    }

    #[test]
    fn grid_mismatch() {
        let a = tac(vec![1.0, 2.0], vec![1.0, 1.0]);
        let b = tac(vec![1.0, 3.0], vec![1.0, 1.0]);
        assert!(matches!(
            patlak_points(&a, &b, DEFAULT_EPS),
            Err(ParametricError::GridMismatch { .. })
        ));
    }

    #[test]
    fn irreversible_tissue_slope() {
        let times = FrameSchedule::default_38().mid_times_min();
        let cp = feng_curve(&FengParams::default(), &times);
        let (c1, c2) = solve_2tc_values(&TwoTissueParams::new(0.1, 0.15, 0.05, 0.0), &times, &cp);
        let ct: Vec<f64> = c1.iter().zip(&c2).map(|(a, b)| a + b).collect();
        let pts = patlak_points(&tac(times.clone(), ct), &tac(times, cp), DEFAULT_EPS).unwrap();
        let f = patlak_fit(&pts, DEFAULT_T_STAR_MIN).unwrap();
        assert!((f.ki / 0.025 - 1.0).abs() < 0.02, "ki {}", f.ki);
        assert!(f.r2 > 0.999);
    }

    #[test]
    fn trapezoid_matches_fine_quadrature() {
        let p = FengParams::default();
        let times = FrameSchedule::default_38().mid_times_min();
        let cp = feng_curve(&p, &times);
        let trap = cumulative_integral(&times, &cp);
        // fine midpoint-rule oracle
        let h = 1e-4;
        let (mut acc, mut t, mut k) = (0.0, 0.0, 0);
        for (i, &ti) in times.iter().enumerate() {
            while t + h <= ti {
                acc += h * feng_input(&p, t + 0.5 * h);
                t += h;
                k += 1;
            }
            let rest = ti - t;
            let fine = acc + rest * feng_input(&p, t + 0.5 * rest);
            // compare where Patlak is used
            if ti > DEFAULT_T_STAR_MIN {
                assert!(
                    (trap[i] - fine).abs() <= 5e-3 * fine,
                    "t={ti}: {} vs {fine}",
                    trap[i]
                );
            }
        }
        assert!(k > 0);
    }

    #[test]
    fn zscores_hand_values() {
        let z = zscores(&[1.0, 2.0, 3.0]).unwrap();
        let want = 1.5f64.sqrt();
        assert!((z[0] + want).abs() < 1e-12 && z[1].abs() < 1e-12 && (z[2] - want).abs() < 1e-12);
        assert!((want - 1.2247).abs() < 1e-4);
        assert!(zscores(&[4.0; 36]).is_none());
    }

    fn atlas_3(dims: Dims3) -> LabeledMask {
        let labels: Vec<u32> = (0..dims.len()).map(|i| (i % 3) as u32 + 1).collect();
        let table = (1..=3)
            .map(|id| LabelInfo {
                id,
                name: format!("r{id}"),
                side: None,
                size: 0,
            })
            .collect();
        LabeledMask::new(dims, labels, table).unwrap()
    }

    fn map_from(dims: Dims3, f: impl Fn(usize) -> f64) -> KiMap {
        KiMap {
            dims,
            voxel_mm: [1.0; 3],
            t_star: 10.0,
            ki: (0..dims.len()).map(|i| Some(f(i))).collect(),
            r2: vec![None; dims.len()],
        }
    }

    #[test]
    fn regional_report_three_regions() {
        let dims = Dims3::new(3, 2, 1);
        let m = map_from(dims, |i| (i % 3) as f64 + 1.0);
        let r = regional_zscores(&m, &atlas_3(dims), DEFAULT_Z_CUTOFF).unwrap();
        let z: Vec<f64> = r.rows.iter().map(|r| r.z.unwrap()).collect();
        assert!((z[0] + 1.2247).abs() < 1e-4 && z[1].abs() < 1e-12 && (z[2] - 1.2247).abs() < 1e-4);
        assert!(r.flagged().is_empty());
        assert_eq!(r.rows[0].voxels, 2);

        let flat = regional_zscores(&map_from(dims, |_| 0.02), &atlas_3(dims), -2.0).unwrap();
        assert!(flat.degenerate);
        assert!(flat
            .rows
            .iter()
            .all(|r| r.z == Some(0.0) && !r.hypometabolic));
    }

    #[test]
    fn reported_z_value_is_flagged() {
        // 36 regions: 35 spread around 0.025, one lowered until its z hits the target
        let target = -2.027041;
        let others: Vec<f64> = (0..35)
            .map(|i| 0.025 + 0.001 * ((i % 7) as f64 - 3.0))
            .collect();
        let z_of = |x: f64| {
            let mut v = vec![x];
            v.extend(&others);
            zscores(&v).unwrap()[0]
        };
        let (mut lo, mut hi) = (0.0, 0.025);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if z_of(mid) < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let x = 0.5 * (lo + hi);
        let dims = Dims3::new(36, 1, 1);
        let labels: Vec<u32> = (1..=36).collect();
        let table = (1..=36)
            .map(|id| LabelInfo {
                id,
                name: format!("r{id}"),
                side: None,
                size: 0,
            })
            .collect();
        let atlas = LabeledMask::new(dims, labels, table).unwrap();
        let m = map_from(dims, |i| if i == 0 { x } else { others[i - 1] });
        let r = regional_zscores(&m, &atlas, DEFAULT_Z_CUTOFF).unwrap();
        assert!((r.rows[0].z.unwrap() - target).abs() < 1e-9);
        let flagged = r.flagged();
        assert_eq!(flagged.len(), 1);
        assert_eq!(flagged[0].id, 1);
    }

    #[test]
    fn ki_map_matches_single_tac_fit_and_flags_zero_voxels() {
        let dims = Dims3::new(3, 1, 1);
        let sched = FrameSchedule::default_38();
        let times = sched.mid_times_min();
        let cp = feng_curve(&FengParams::default(), &times);
        let (c1, c2) = solve_2tc_values(&TwoTissueParams::new(0.1, 0.15, 0.05, 0.0), &times, &cp);
        let ct: Vec<f64> = c1.iter().zip(&c2).map(|(a, b)| a + b).collect();
        let mut data = vec![0.0f32; 3 * times.len()];
        for t in 0..times.len() {
            data[3 * t] = ct[t] as f32;
            data[3 * t + 1] = (2.0 * ct[t]) as f32;
        }
        let vol = DynVolume::new(dims, [1.0; 3], sched, data).unwrap();
        let mcif = tac(times.clone(), cp.clone());
        let mut mask = Mask::from_bits(dims, vec![true; 3]).unwrap();
        let m = ki_map(&vol, &mcif, &mask, 10.0, DEFAULT_EPS).unwrap();
        let series = vol.voxel_series(0);
        let single = patlak_fit(
            &patlak_points(&tac(times.clone(), series), &mcif, DEFAULT_EPS).unwrap(),
            10.0,
        )
        .unwrap();
        assert_eq!(m.ki[0], Some(single.ki));
        assert_eq!(m.ki[2], None);
        mask.set(1, false);
        let m = ki_map(&vol, &mcif, &mask, 10.0, DEFAULT_EPS).unwrap();
        assert_eq!(m.ki[1], None);
    }

    proptest! {
        #[test]
        fn z_affine_invariance(vals in proptest::collection::vec(-5.0f64..5.0, 3..40), c in 0.01f64..100.0, d in -10.0f64..10.0) {
            if let Some(z) = zscores(&vals) {
                let moved: Vec<f64> = vals.iter().map(|v| c * v + d).collect();
                let z2 = zscores(&moved).unwrap();
                for (a, b) in z.iter().zip(&z2) {
                    prop_assert!((a - b).abs() < 1e-9 * (1.0 + a.abs()));
                }
                // the flagged set is identical away from the cutoff itself
                for (a, b) in z.iter().zip(&z2) {
                    if (a + 2.0).abs() > 1e-6 {
                        prop_assert_eq!(*a < -2.0, *b < -2.0);
                    }
                }
            }
        }

        #[test]
        fn patlak_scale_invariance(k1 in 0.01f64..1.0, k2 in 0.01f64..1.0, k3 in 0.0f64..0.5, s in 0.01f64..100.0) {
            let times = FrameSchedule::default_38().mid_times_min();
            let cp = feng_curve(&FengParams::default(), &times);
            let (c1, c2) = solve_2tc_values(&TwoTissueParams::new(k1, k2, k3, 0.0), &times, &cp);
            let ct: Vec<f64> = c1.iter().zip(&c2).map(|(a, b)| a + b).collect();
            let f1 = patlak_fit(&patlak_points(&tac(times.clone(), ct.clone()), &tac(times.clone(), cp.clone()), 0.0).unwrap(), 10.0).unwrap();
            let ct2: Vec<f64> = ct.iter().map(|v| v * s).collect();
            let cp2: Vec<f64> = cp.iter().map(|v| v * s).collect();
            let f2 = patlak_fit(&patlak_points(&tac(times.clone(), ct2), &tac(times, cp2), 0.0).unwrap(), 10.0).unwrap();
            prop_assert!((f1.ki - f2.ki).abs() <= 1e-9 * f1.ki.abs().max(1e-12));
        }
    }
}
