//! Synthetic dynamic FDG phantoms with known input, carotid geometry and kinetics.

mod blur;
mod feng;

pub use blur::gaussian_blur;
pub use feng::{feng_curve, feng_input, FengParams};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::kinetics::{solve_2tc_values, TwoTissueParams};
use crate::volume::{
    Dims3, DynVolume, FrameSchedule, LabelInfo, LabeledMask, Mask, Side, Tac, VolumeError,
};

#[derive(Debug, thiserror::Error)]
pub enum PhantomError {
    #[error("invalid phantom config: {field}: {reason}")]
    InvalidConfig { field: String, reason: String },
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

fn invalid(field: &str, reason: impl Into<String>) -> PhantomError {
    PhantomError::InvalidConfig {
        field: field.to_string(),
        reason: reason.into(),
    }
}

/// Kinetics of one tissue class plus its blood-volume fraction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionKinetics {
    #[serde(flatten)]
    pub rates: TwoTissueParams,
    pub vb: f64,
}

impl RegionKinetics {
    pub const fn new(k1: f64, k2: f64, k3: f64, k4: f64, vb: f64) -> Self {
        Self {
            rates: TwoTissueParams::new(k1, k2, k3, k4),
            vb,
        }
    }

    /// `(1 − vb)·C_T + vb·Cp` on the grid of `cp`.
    pub fn tissue_curve(&self, times: &[f64], cp: &[f64]) -> Vec<f64> {
        let (c1, c2) = solve_2tc_values(&self.rates, times, cp);
        c1.iter()
            .zip(&c2)
            .zip(cp)
            .map(|((a, b), &p)| (1.0 - self.vb) * (a + b) + self.vb * p)
            .collect()
    }
}

/// Two vertical cylinders carrying the plasma input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CarotidConfig {
    pub radius_mm: f64,
    /// In-plane (x, y) centerline positions, mm from the grid corner.
    pub centers_mm: [[f64; 2]; 2],
    /// Axial extent `[z_lo, z_hi]`, mm.
    pub z_range_mm: [f64; 2],
}

impl Default for CarotidConfig {
    fn default() -> Self {
        Self {
            radius_mm: 2.5,
            centers_mm: [[50.0, 66.0], [78.0, 66.0]],
            z_range_mm: [0.0, 24.0],
        }
    }
}

/// Axis-aligned brain block split into 36 regions: two hemispheres (x), each
/// cut into 2 x-bands, 3 y-bands and 3 z-bands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BrainConfig {
    /// Lower corner in voxels (inclusive).
    pub lo_vox: [usize; 3],
    /// Upper corner in voxels (exclusive).
    pub hi_vox: [usize; 3],
    pub gray: RegionKinetics,
    /// Delay of the input reaching brain tissue relative to the carotids, s.
    pub arrival_delay_s: f64,
}

impl Default for BrainConfig {
    fn default() -> Self {
        Self {
            lo_vox: [8, 8, 12],
            hi_vox: [56, 56, 48],
            gray: RegionKinetics::new(0.1, 0.15, 0.05, 0.0, 0.04),
            arrival_delay_s: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HypoConfig {
    /// Atlas region id (1..=36) given reduced uptake.
    pub region: u32,
    pub kinetics: RegionKinetics,
}

impl Default for HypoConfig {
    /// K1 and k3 scaled so Ki is 60% of the default gray matter.
    fn default() -> Self {
        Self {
            region: 5,
            kinetics: RegionKinetics::new(0.075, 0.15, 0.0375, 0.0, 0.04),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case", deny_unknown_fields)]
pub enum NoiseConfig {
    Off,
    /// Multiplicative Gaussian noise with CV `cv·sqrt(reference_duration_s / duration)`.
    Gaussian {
        cv: f64,
        reference_duration_s: f64,
    },
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig::Gaussian {
            cv: 0.05,
            reference_duration_s: 60.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomConfig {
    pub dims: [usize; 3],
    pub voxel_mm: [f64; 3],
    pub frame_durations_s: Vec<f64>,
    pub offset_s: f64,
    pub input: FengParams,
    /// Uniform jitter (± seconds) applied to the input onset, drawn from the seed.
    pub onset_jitter_s: f64,
    pub carotid: CarotidConfig,
    pub brain: BrainConfig,
    pub hypometabolic: Option<HypoConfig>,
    /// Kinetics of every voxel outside the carotids and the brain.
    pub background: RegionKinetics,
    pub psf_sigma_mm: f64,
    pub noise: NoiseConfig,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        let sched = FrameSchedule::default_38();
        Self {
            dims: [64, 64, 48],
            voxel_mm: [2.0, 2.0, 2.0],
            frame_durations_s: sched.durations_s().to_vec(),
            offset_s: 0.0,
            input: FengParams::default(),
            onset_jitter_s: 0.0,
            carotid: CarotidConfig::default(),
            brain: BrainConfig::default(),
            hypometabolic: Some(HypoConfig::default()),
            background: RegionKinetics::new(0.06, 0.12, 0.03, 0.005, 0.03),
            psf_sigma_mm: 2.0,
            noise: NoiseConfig::default(),
            seed: 7,
        }
    }
}

fn check_kinetics(field: &str, k: &RegionKinetics) -> Result<(), PhantomError> {
    k.rates
        .validate()
        .map_err(|e| invalid(field, e.to_string()))?;
    if !(0.0..=1.0).contains(&k.vb) {
        return Err(invalid(
            &format!("{field}.vb"),
            format!("must be in [0, 1], got {}", k.vb),
        ));
    }
    Ok(())
}

impl PhantomConfig {
    pub fn dims3(&self) -> Dims3 {
        Dims3::new(self.dims[0], self.dims[1], self.dims[2])
    }

    pub fn schedule(&self) -> Result<FrameSchedule, PhantomError> {
        FrameSchedule::new(self.frame_durations_s.clone(), self.offset_s)
            .map_err(|e| invalid("frame_durations_s", e.to_string()))
    }

    pub fn validate(&self) -> Result<(), PhantomError> {
        if self.dims.iter().any(|&d| d == 0) {
            return Err(invalid("dims", "all dimensions must be >= 1"));
        }
        if self.voxel_mm.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(invalid("voxel_mm", "voxel sizes must be finite and > 0"));
        }
        self.schedule()?;
        self.input.validate().map_err(|e| invalid("input", e))?;
        if !(self.onset_jitter_s >= 0.0 && self.onset_jitter_s.is_finite()) {
            return Err(invalid("onset_jitter_s", "must be finite and >= 0"));
        }
        if self.input.tau * 60.0 < self.onset_jitter_s {
            return Err(invalid(
                "onset_jitter_s",
                "jitter may not move the onset below t = 0",
            ));
        }
        if !(self.psf_sigma_mm >= 0.0 && self.psf_sigma_mm.is_finite()) {
            return Err(invalid(
                "psf_sigma_mm",
                format!("must be >= 0, got {}", self.psf_sigma_mm),
            ));
        }
        if let NoiseConfig::Gaussian {
            cv,
            reference_duration_s,
        } = self.noise
        {
            if !(cv >= 0.0 && cv.is_finite()) {
                return Err(invalid("noise.cv", format!("must be >= 0, got {cv}")));
            }
            if !(reference_duration_s > 0.0 && reference_duration_s.is_finite()) {
                return Err(invalid("noise.reference_duration_s", "must be > 0"));
            }
        }
        check_kinetics("background", &self.background)?;
        check_kinetics("brain.gray", &self.brain.gray)?;
        if !(self.brain.arrival_delay_s >= 0.0 && self.brain.arrival_delay_s.is_finite()) {
            return Err(invalid("brain.arrival_delay_s", "must be finite and >= 0"));
        }

        let extent: Vec<f64> = (0..3)
            .map(|a| self.dims[a] as f64 * self.voxel_mm[a])
            .collect();
        let c = &self.carotid;
        if !(c.radius_mm > 0.0 && c.radius_mm.is_finite()) {
            return Err(invalid(
                "carotid.radius_mm",
                format!("must be > 0, got {}", c.radius_mm),
            ));
        }
        for (i, ctr) in c.centers_mm.iter().enumerate() {
            for a in 0..2 {
                if ctr[a] - c.radius_mm < 0.0 || ctr[a] + c.radius_mm > extent[a] {
                    return Err(invalid(
                        &format!("carotid.centers_mm[{i}]"),
                        "cylinder leaves the grid",
                    ));
                }
            }
        }
        let [z0, z1] = c.z_range_mm;
        if !(z0 >= 0.0 && z1 > z0 && z1 <= extent[2]) {
            return Err(invalid(
                "carotid.z_range_mm",
                "need 0 <= z_lo < z_hi <= grid height",
            ));
        }
        let d = c.centers_mm[0];
        let e = c.centers_mm[1];
        if ((d[0] - e[0]).powi(2) + (d[1] - e[1]).powi(2)).sqrt() <= 2.0 * c.radius_mm {
            return Err(invalid("carotid.centers_mm", "cylinders overlap"));
        }

        let b = &self.brain;
        for a in 0..3 {
            if b.lo_vox[a] >= b.hi_vox[a] || b.hi_vox[a] > self.dims[a] {
                return Err(invalid(
                    "brain",
                    "block must be non-empty and inside the grid",
                ));
            }
        }
        let (wx, wy, wz) = (
            b.hi_vox[0] - b.lo_vox[0],
            b.hi_vox[1] - b.lo_vox[1],
            b.hi_vox[2] - b.lo_vox[2],
        );
        if wx < 4 || wy < 3 || wz < 3 {
            return Err(invalid("brain", "block too small for 36 regions"));
        }
        // carotids must not reach into the brain block
        let brain_z0 = b.lo_vox[2] as f64 * self.voxel_mm[2];
        let brain_z1 = b.hi_vox[2] as f64 * self.voxel_mm[2];
        if z0 < brain_z1 && z1 > brain_z0 {
            for ctr in &c.centers_mm {
                let overlaps = (0..2).all(|a| {
                    ctr[a] + c.radius_mm > b.lo_vox[a] as f64 * self.voxel_mm[a]
                        && ctr[a] - c.radius_mm < b.hi_vox[a] as f64 * self.voxel_mm[a]
                });
                if overlaps {
                    return Err(invalid(
                        "carotid.z_range_mm",
                        "carotids intersect the brain block",
                    ));
                }
            }
        }
        if let Some(h) = &self.hypometabolic {
            if !(1..=36).contains(&h.region) {
                return Err(invalid(
                    "hypometabolic.region",
                    format!("must be in 1..=36, got {}", h.region),
                ));
            }
            check_kinetics("hypometabolic.kinetics", &h.kinetics)?;
        }
        Ok(())
    }
}

/// Ground truth for one atlas region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionTruth {
    pub id: u32,
    pub name: String,
    pub kinetics: RegionKinetics,
    pub ki: f64,
}

#[derive(Debug, Clone)]
pub struct PhantomBundle {
    pub volume: DynVolume,
    pub truth_carotid: Mask,
    pub truth_atlas: LabeledMask,
    /// Plasma input sampled at frame mid-times.
    pub truth_cp: Tac,
    /// Input parameters after onset jitter.
    pub truth_input: FengParams,
    pub truth_regions: Vec<RegionTruth>,
    pub background: RegionKinetics,
    /// Frame with the highest plasma activity among the first `n` frames, see
    /// [`PhantomBundle::bolus_frame`].
    pub bolus_frame: usize,
}

impl PhantomBundle {
    /// Index of the largest truth-Cp sample among the first `n_frames` frames.
    pub fn bolus_frame(&self, n_frames: usize) -> usize {
        argmax(&self.truth_cp.values()[..n_frames.min(self.truth_cp.len())])
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

const X_BANDS: [&str; 2] = ["lateral", "medial"];
const Y_BANDS: [&str; 3] = ["anterior", "middle", "posterior"];
const Z_BANDS: [&str; 3] = ["inferior", "middle", "superior"];

/// Label table of the 36-region synthetic atlas (sizes zero).
pub fn atlas_table() -> Vec<LabelInfo> {
    let mut out = Vec::with_capacity(36);
    for (s, side) in [Side::Left, Side::Right].into_iter().enumerate() {
        for (xb, xn) in X_BANDS.iter().enumerate() {
            for (yb, yn) in Y_BANDS.iter().enumerate() {
                for (zb, zn) in Z_BANDS.iter().enumerate() {
                    let prefix = if s == 0 { "left" } else { "right" };
                    out.push(LabelInfo {
                        id: region_id(s, xb, yb, zb),
                        name: format!("{prefix}_{xn}_{yn}_{zn}"),
                        side: Some(side),
                        size: 0,
                    });
                }
            }
        }
    }
    out
}

const fn region_id(side: usize, xb: usize, yb: usize, zb: usize) -> u32 {
    (side * 18 + xb * 9 + yb * 3 + zb + 1) as u32
}

#[inline]
fn band(pos: usize, lo: usize, width: usize, n: usize) -> usize {
    ((pos - lo) * n / width).min(n - 1)
}

#[derive(Clone, Copy, PartialEq)]
enum Class {
    Background,
    Carotid,
    Region(u32),
}

struct Geometry {
    classes: Vec<Class>,
    carotid: Mask,
    atlas: LabeledMask,
}

fn build_geometry(cfg: &PhantomConfig) -> Result<Geometry, PhantomError> {
    let dims = cfg.dims3();
    let vm = cfg.voxel_mm;
    let c = &cfg.carotid;
    let b = &cfg.brain;
    let mid_x = (b.lo_vox[0] + b.hi_vox[0]) / 2;
    let mut classes = vec![Class::Background; dims.len()];
    let mut labels = vec![0u32; dims.len()];
    let mut carotid = Mask::empty(dims);
    for z in 0..dims.nz {
        let zc = (z as f64 + 0.5) * vm[2];
        for y in 0..dims.ny {
            let yc = (y as f64 + 0.5) * vm[1];
            for x in 0..dims.nx {
                let xc = (x as f64 + 0.5) * vm[0];
                let idx = dims.index(x, y, z);
                let in_vessel = zc >= c.z_range_mm[0]
                    && zc < c.z_range_mm[1]
                    && c.centers_mm.iter().any(|ctr| {
                        (xc - ctr[0]).powi(2) + (yc - ctr[1]).powi(2) <= c.radius_mm * c.radius_mm
                    });
                if in_vessel {
                    classes[idx] = Class::Carotid;
                    carotid.set(idx, true);
                    continue;
                }
                let inside = (0..3).all(|a| {
                    let p = [x, y, z][a];
                    p >= b.lo_vox[a] && p < b.hi_vox[a]
                });
                if inside {
                    let (side, xb) = if x < mid_x {
                        (0, band(x, b.lo_vox[0], mid_x - b.lo_vox[0], 2))
                    } else {
                        // mirror so band 0 is lateral on both sides
                        (1, 1 - band(x, mid_x, b.hi_vox[0] - mid_x, 2))
                    };
                    let yb = band(y, b.lo_vox[1], b.hi_vox[1] - b.lo_vox[1], 3);
                    let zb = band(z, b.lo_vox[2], b.hi_vox[2] - b.lo_vox[2], 3);
                    let id = region_id(side, xb, yb, zb);
                    classes[idx] = Class::Region(id);
                    labels[idx] = id;
                }
            }
        }
    }
    if carotid.is_empty() {
        return Err(invalid(
            "carotid.radius_mm",
            "cylinders contain no voxel centers",
        ));
    }
    let atlas = LabeledMask::new(dims, labels, atlas_table())?;
    Ok(Geometry {
        classes,
        carotid,
        atlas,
    })
}

/// Truth input with the seed-dependent onset jitter applied.
pub fn jittered_input(cfg: &PhantomConfig, seed: u64) -> FengParams {
    let mut p = cfg.input;
    if cfg.onset_jitter_s > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(u64::MAX);
        let u: f64 = rand::Rng::random_range(&mut rng, -1.0..=1.0);
        p.tau = (p.tau + u * cfg.onset_jitter_s / 60.0).max(0.0);
    }
    p
}

/// Builds a phantom. Every frame is rendered from noiseless class curves,
/// blurred, then perturbed with noise from an RNG seeded by `(seed, frame)`, so
/// the output does not depend on the thread count.
pub fn generate_phantom(cfg: &PhantomConfig, seed: u64) -> Result<PhantomBundle, PhantomError> {
    cfg.validate()?;
    let dims = cfg.dims3();
    let schedule = cfg.schedule()?;
    let times = schedule.mid_times_min();
    let input = jittered_input(cfg, seed);
    let cp = feng_curve(&input, &times);
    let geo = build_geometry(cfg)?;

    let gray = cfg.brain.gray;
    let hypo = cfg.hypometabolic.as_ref();
    let kinetics_of = |id: u32| match hypo {
        Some(h) if h.region == id => h.kinetics,
        _ => gray,
    };
    let background_tac = cfg.background.tissue_curve(&times, &cp);
    let brain_input = FengParams {
        tau: input.tau + cfg.brain.arrival_delay_s / 60.0,
        ..input
    };
    let cp_brain = feng_curve(&brain_input, &times);
    let gray_tac = gray.tissue_curve(&times, &cp_brain);
    let hypo_tac = hypo.map(|h| h.kinetics.tissue_curve(&times, &cp_brain));

    let n_frames = times.len();
    let nvox = dims.len();
    let durations = schedule.durations_s().to_vec();
    let frames: Vec<Vec<f32>> = (0..n_frames)
        .into_par_iter()
        .map(|t| {
            let clean: Vec<f64> = geo
                .classes
                .iter()
                .map(|c| match *c {
                    Class::Background => background_tac[t],
                    Class::Carotid => cp[t],
                    Class::Region(id) => match (hypo, &hypo_tac) {
                        (Some(h), Some(ht)) if h.region == id => ht[t],
                        _ => gray_tac[t],
                    },
                })
                .collect();
            let blurred = gaussian_blur(&clean, dims, cfg.voxel_mm, cfg.psf_sigma_mm);
            match cfg.noise {
                NoiseConfig::Off => blurred.iter().map(|&v| v as f32).collect(),
                NoiseConfig::Gaussian {
                    cv,
                    reference_duration_s,
                } => {
                    let cv_t = cv * (reference_duration_s / durations[t]).sqrt();
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    rng.set_stream(t as u64);
                    blurred
                        .iter()
                        .map(|&v| {
                            let z: f64 = StandardNormal.sample(&mut rng);
                            (v * (1.0 + cv_t * z)).max(0.0) as f32
                        })
                        .collect()
                }
            }
        })
        .collect();
    let mut data = Vec::with_capacity(nvox * n_frames);
    for f in frames {
        data.extend(f);
    }
    let volume = DynVolume::new(dims, cfg.voxel_mm, schedule, data)?;
    let truth_cp = Tac::new(times, cp)?;
    let truth_regions = geo
        .atlas
        .table()
        .iter()
        .map(|e| {
            let k = kinetics_of(e.id);
            RegionTruth {
                id: e.id,
                name: e.name.clone(),
                kinetics: k,
                ki: k.rates.ki(),
            }
        })
        .collect();
    let bolus_frame = argmax(truth_cp.values());
    Ok(PhantomBundle {
        volume,
        truth_carotid: geo.carotid,
        truth_atlas: geo.atlas,
        truth_cp,
        truth_input: input,
        truth_regions,
        background: cfg.background,
        bolus_frame,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinetics::{model_observations, McifParams, MeasurementParams};

    fn small(noise: NoiseConfig, sigma: f64) -> PhantomConfig {
        PhantomConfig {
            noise,
            psf_sigma_mm: sigma,
            ..PhantomConfig::default()
        }
    }

    fn carotid_mean_peak(b: &PhantomBundle) -> f64 {
        let idx = b.truth_carotid.indices();
        (0..b.volume.n_frames())
            .map(|t| {
                let f = b.volume.frame(t);
                idx.iter().map(|&i| f[i] as f64).sum::<f64>() / idx.len() as f64
            })
            .fold(0.0, f64::max)
    }

    #[test]
    fn default_config_is_valid_and_json_roundtrips() {
        let cfg = PhantomConfig::default();
        cfg.validate().unwrap();
        let s = serde_json::to_string(&cfg).unwrap();
        let back: PhantomConfig = serde_json::from_str(&s).unwrap();
        assert_eq!(back, cfg);
        let partial: PhantomConfig =
            serde_json::from_str(r#"{"psf_sigma_mm": 0.0, "noise": {"model": "off"}}"#).unwrap();
        assert_eq!(partial.noise, NoiseConfig::Off);
    }

    #[test]
    fn bad_radius_names_field() {
        let mut cfg = PhantomConfig::default();
        cfg.carotid.radius_mm = 0.0;
        let e = cfg.validate().unwrap_err().to_string();
        assert!(e.contains("carotid.radius_mm"), "{e}");
        cfg.carotid.radius_mm = 40.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn atlas_has_36_named_regions() {
        let b = generate_phantom(&small(NoiseConfig::Off, 0.0), 1).unwrap();
        let t = b.truth_atlas.table();
        assert_eq!(t.len(), 36);
        assert!(t.iter().all(|e| e.size > 0));
        assert_eq!(t[0].name, "left_lateral_anterior_inferior");
        assert_eq!(t[18].side, Some(Side::Right));
        // regions and carotids are disjoint
        assert!(b
            .truth_carotid
            .indices()
            .iter()
            .all(|&i| b.truth_atlas.labels()[i] == 0));
        let hypo = b.truth_regions.iter().find(|r| r.id == 5).unwrap();
        let normal = b.truth_regions.iter().find(|r| r.id == 6).unwrap();
        assert!((hypo.ki / normal.ki - 0.6).abs() < 1e-12);
    }

    #[test]
    fn carotid_voxels_carry_truth_cp_without_blur_or_noise() {
        let b = generate_phantom(&small(NoiseConfig::Off, 0.0), 3).unwrap();
        for &i in &b.truth_carotid.indices() {
            for t in 0..b.volume.n_frames() {
                assert_eq!(b.volume.frame(t)[i], b.truth_cp.values()[t] as f32);
            }
        }
    }

    #[test]
    fn tissue_curves_match_measurement_model() {
        let cfg = PhantomConfig::default();
        let times = cfg.schedule().unwrap().mid_times_min();
        let cp = feng_curve(&cfg.input, &times);
        for k in [cfg.background, cfg.brain.gray] {
            let p = McifParams {
                feng: cfg.input,
                tissue: k.rates,
                meas: MeasurementParams {
                    rc: 1.0,
                    sp_bt: 0.0,
                    sp_tb: 0.0,
                    vb: k.vb,
                },
            };
            let obs = model_observations(&p, &times).unwrap();
            let mine = k.tissue_curve(&times, &cp);
            for (a, b) in mine.iter().zip(obs.tissue.values()) {
                assert!((a - b).abs() <= 1e-9);
            }
            assert_eq!(obs.idif.values(), &cp[..]);
        }
    }

    #[test]
    fn deterministic_and_thread_invariant() {
        let cfg = PhantomConfig::default();
        let a = generate_phantom(&cfg, 11).unwrap();
        let b = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap()
            .install(|| generate_phantom(&cfg, 11).unwrap());
        assert_eq!(a.volume, b.volume);
        let c = generate_phantom(&cfg, 12).unwrap();
        assert_ne!(a.volume, c.volume);
    }

    #[test]
    fn partial_volume_lowers_carotid_peak_monotonically() {
        let peaks: Vec<f64> = [0.0, 1.0, 2.0, 3.0]
            .iter()
            .map(|&s| carotid_mean_peak(&generate_phantom(&small(NoiseConfig::Off, s), 0).unwrap()))
            .collect();
        for w in peaks.windows(2) {
            assert!(w[1] <= w[0], "{peaks:?}");
        }
        let b = generate_phantom(&small(NoiseConfig::Off, 2.0), 0).unwrap();
        assert!(peaks[2] < b.truth_cp.peak());
    }

    #[test]
    fn onset_jitter_moves_tau_within_range() {
        let cfg = PhantomConfig {
            onset_jitter_s: 15.0,
            ..PhantomConfig::default()
        };
        let mut seen = std::collections::HashSet::new();
        for seed in 0..10 {
            let p = jittered_input(&cfg, seed);
            assert!((p.tau - cfg.input.tau).abs() <= 0.25 + 1e-12);
            seen.insert(p.tau.to_bits());
        }
        assert!(seen.len() > 1);
        assert_eq!(
            jittered_input(&PhantomConfig::default(), 3),
            PhantomConfig::default().input
        );
    }
}
