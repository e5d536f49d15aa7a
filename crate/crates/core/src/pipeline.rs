//! End-to-end driver: reference frame, carotid mask, IDIF, MCIF fit, Ki map and
//! regional Z-scores, with every intermediate written to one output directory.
//!
//! Exit codes: 0 success, 1 other failure, 2 bad config or input, 3 empty
//! segmentation, 4 MCIF fit did not converge (all outputs still written).

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::frame_select::{self, CropBox, FrameSelectError, FrameSelection, DEFAULT_N_FRAMES};
use crate::kinetics::{fit_mcif, FitConfig, FitResult, KineticsError};
use crate::parametric::{
    self, KiMap, ParametricError, RegionReport, DEFAULT_EPS, DEFAULT_T_STAR_MIN, DEFAULT_Z_CUTOFF,
};
use crate::phantom::{FengParams, PhantomBundle, RegionTruth};
use crate::segment::{self, IdifStrategy, SegConfig, SegError, SegResult};
use crate::volume::{self, DynVolume, LabeledMask, Mask, Tac, VolumeError};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

pub mod exit {
    pub const OK: i32 = 0;
    pub const FAILURE: i32 = 1;
    pub const INVALID_INPUT: i32 = 2;
    pub const EMPTY_SEGMENTATION: i32 = 3;
    pub const NOT_CONVERGED: i32 = 4;
}

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error("frame selection: {0}")]
    FrameSelect(#[from] FrameSelectError),
    #[error("segmentation: {0}")]
    Segment(#[from] SegError),
    #[error("MCIF fit: {0}")]
    Kinetics(#[from] KineticsError),
    #[error("Patlak: {0}")]
    Parametric(#[from] ParametricError),
}

impl PipelineError {
    pub fn exit_code(&self) -> i32 {
        use exit::*;
        match self {
            Self::Config(_) | Self::Volume(_) | Self::FrameSelect(_) => INVALID_INPUT,
            Self::Segment(SegError::EmptySegmentation { .. }) => EMPTY_SEGMENTATION,
            Self::Segment(
                SegError::DimsMismatch { .. }
                | SegError::InvalidConfig(_)
                | SegError::FrameOutOfRange { .. },
            ) => INVALID_INPUT,
            Self::Kinetics(
                KineticsError::GridMismatch { .. }
                | KineticsError::TooFewFrames { .. }
                | KineticsError::InvalidGrid(_)
                | KineticsError::InvalidBounds(_)
                | KineticsError::InvalidParams(_),
            ) => INVALID_INPUT,
            Self::Parametric(
                ParametricError::GridMismatch { .. }
                | ParametricError::DimsMismatch { .. }
                | ParametricError::Volume(_),
            ) => INVALID_INPUT,
            _ => FAILURE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FrameSelectConfig {
    /// Number of leading frames searched.
    pub n_frames: usize,
    /// Defaults to the central half of each axis.
    pub crop: Option<CropBox>,
}

impl Default for FrameSelectConfig {
    fn default() -> Self {
        Self {
            n_frames: DEFAULT_N_FRAMES,
            crop: None,
        }
    }
}

/// Peri-carotid tissue shell, in voxels of Chebyshev distance from the mask.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RingConfig {
    pub inner: usize,
    pub outer: usize,
}

impl Default for RingConfig {
    fn default() -> Self {
        Self { inner: 2, outer: 3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// 4D volume (`.nii` or raw float32) with its JSON sidecar alongside.
    pub input: PathBuf,
    /// Atlas label volume. Its foreground is the Ki map mask.
    pub atlas: PathBuf,
    /// Optional label table overriding the one embedded in the atlas.
    pub atlas_labels: Option<PathBuf>,
    pub output_dir: PathBuf,
    /// Seeds the multi-start fit; overrides `fit.seed`.
    pub seed: u64,
    pub frame_select: FrameSelectConfig,
    pub segmentation: SegConfig,
    pub idif: IdifStrategy,
    pub ring: RingConfig,
    pub fit: FitConfig,
    pub t_star_min: f64,
    pub patlak_eps: f64,
    pub z_cutoff: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            input: PathBuf::new(),
            atlas: PathBuf::new(),
            atlas_labels: None,
            output_dir: PathBuf::from("."),
            seed: 0,
            frame_select: FrameSelectConfig::default(),
            segmentation: SegConfig::default(),
            idif: IdifStrategy::Mean,
            ring: RingConfig::default(),
            fit: FitConfig::default(),
            t_star_min: DEFAULT_T_STAR_MIN,
            patlak_eps: DEFAULT_EPS,
            z_cutoff: DEFAULT_Z_CUTOFF,
        }
    }
}

impl PipelineConfig {
    pub fn from_json_file(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(|source| VolumeError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        serde_json::from_str(&text)
            .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))
    }

    /// Checks parameters and that every referenced input file exists.
    pub fn validate(&self) -> Result<(), PipelineError> {
        let cfg = |m: String| PipelineError::Config(m);
        for (field, p) in [
            ("input", Some(&self.input)),
            ("atlas", Some(&self.atlas)),
            ("atlas_labels", self.atlas_labels.as_ref()),
        ] {
            let Some(p) = p else { continue };
            if p.as_os_str().is_empty() {
                return Err(cfg(format!("{field}: path is required")));
            }
            if !p.is_file() {
                return Err(cfg(format!("{field}: {} does not exist", p.display())));
            }
        }
        if self.frame_select.n_frames < 3 {
            return Err(cfg(format!(
                "frame_select.n_frames: need at least 3, got {}",
                self.frame_select.n_frames
            )));
        }
        self.segmentation
            .validate()
            .map_err(|e| cfg(format!("segmentation: {e}")))?;
        if let IdifStrategy::HottestPercent { percent } = self.idif {
            if !(percent > 0.0 && percent <= 100.0) {
                return Err(cfg(format!(
                    "idif.percent: must be in (0, 100], got {percent}"
                )));
            }
        }
        if self.ring.inner == 0 || self.ring.inner > self.ring.outer {
            return Err(cfg(format!(
                "ring: need 1 <= inner <= outer, got {}..={}",
                self.ring.inner, self.ring.outer
            )));
        }
        self.fit.validate().map_err(|e| cfg(format!("fit: {e}")))?;
        if !(self.t_star_min.is_finite() && self.t_star_min >= 0.0) {
            return Err(cfg(format!(
                "t_star_min: must be finite and >= 0, got {}",
                self.t_star_min
            )));
        }
        if !(self.patlak_eps.is_finite() && self.patlak_eps >= 0.0) {
            return Err(cfg(format!(
                "patlak_eps: must be finite and >= 0, got {}",
                self.patlak_eps
            )));
        }
        if !self.z_cutoff.is_finite() {
            return Err(cfg("z_cutoff: must be finite".into()));
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON of the config, ignoring the output directory.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        let bytes = serde_json::to_vec(&c).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}

/// Output directory that remembers every file written through it.
#[derive(Debug)]
pub struct Outputs {
    dir: PathBuf,
    written: Vec<String>,
}

impl Outputs {
    pub fn create(dir: &Path) -> Result<Self, PipelineError> {
        std::fs::create_dir_all(dir).map_err(|source| VolumeError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        Ok(Self {
            dir: dir.to_path_buf(),
            written: Vec::new(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// File names written so far, in order.
    pub fn written(&self) -> &[String] {
        &self.written
    }

    fn record(&mut self, name: &str) {
        if !self.written.iter().any(|w| w == name) {
            self.written.push(name.to_string());
        }
    }

    pub fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), PipelineError> {
        volume::write_json(&self.path(name), value)?;
        self.record(name);
        Ok(())
    }

    pub fn tac(&mut self, name: &str, tac: &Tac) -> Result<(), PipelineError> {
        volume::tac_to_csv(tac, &self.path(name))?;
        self.record(name);
        Ok(())
    }

    pub fn mask(
        &mut self,
        name: &str,
        mask: &Mask,
        voxel_mm: [f64; 3],
    ) -> Result<(), PipelineError> {
        volume::save_mask(mask, voxel_mm, &self.path(name))?;
        self.record(name);
        Ok(())
    }

    pub fn bytes(&mut self, name: &str, bytes: &[u8]) -> Result<(), PipelineError> {
        volume::atomic_write(&self.path(name), bytes)?;
        self.record(name);
        Ok(())
    }

    /// Records a file written by other means, e.g. a volume plus its sidecar.
    pub fn note(&mut self, name: &str) {
        self.record(name);
    }
}

#[derive(Serialize)]
struct FrameSelectionDoc<'a> {
    n_frames: usize,
    crop: CropBox,
    #[serde(flatten)]
    selection: &'a FrameSelection,
}

/// Writes `frame_selection.json`.
pub fn stage_frame_select(
    vol: &DynVolume,
    cfg: &FrameSelectConfig,
    out: &mut Outputs,
) -> Result<FrameSelection, PipelineError> {
    let crop = cfg.crop.unwrap_or_else(|| CropBox::central(vol.dims()));
    let sums = frame_select::summed_intensity(vol, &crop, cfg.n_frames)?;
    let selection = frame_select::select_reference_frame(&sums)?;
    out.json(
        "frame_selection.json",
        &FrameSelectionDoc {
            n_frames: cfg.n_frames,
            crop,
            selection: &selection,
        },
    )?;
    Ok(selection)
}

#[derive(Serialize)]
struct SegmentationDoc<'a> {
    frame: usize,
    config: &'a SegConfig,
    #[serde(flatten)]
    result: &'a SegResult,
}

/// Writes `carotid_mask.nii` and `segmentation.json`.
pub fn stage_segment(
    vol: &DynVolume,
    frame: usize,
    cfg: &SegConfig,
    out: &mut Outputs,
) -> Result<SegResult, PipelineError> {
    let seg = segment::segment_frame(vol, frame, cfg)?;
    out.mask("carotid_mask.nii", &seg.mask, vol.voxel_mm())?;
    out.json(
        "segmentation.json",
        &SegmentationDoc {
            frame,
            config: cfg,
            result: &seg,
        },
    )?;
    Ok(seg)
}

/// Writes `idif.csv` and `tissue.csv`; returns `(idif, tissue)`.
pub fn stage_idif(
    vol: &DynVolume,
    mask: &Mask,
    strategy: IdifStrategy,
    ring: RingConfig,
    out: &mut Outputs,
) -> Result<(Tac, Tac), PipelineError> {
    let idif = segment::extract_idif(vol, mask, strategy)?;
    let tissue = segment::surrounding_tissue_tac(vol, mask, ring.inner, ring.outer)?;
    out.tac("idif.csv", &idif)?;
    out.tac("tissue.csv", &tissue)?;
    Ok((idif, tissue))
}

/// Writes `fit.json` and `mcif.csv`.
pub fn stage_fit(
    idif: &Tac,
    tissue: &Tac,
    cfg: &FitConfig,
    out: &mut Outputs,
) -> Result<FitResult, PipelineError> {
    let fit = fit_mcif(idif, tissue, cfg)?;
    out.json("fit.json", &fit)?;
    out.tac("mcif.csv", &fit.mcif)?;
    Ok(fit)
}

/// Writes `ki_map.nii`.
pub fn stage_patlak(
    vol: &DynVolume,
    mcif: &Tac,
    mask: &Mask,
    t_star: f64,
    eps: f64,
    out: &mut Outputs,
) -> Result<KiMap, PipelineError> {
    let map = parametric::ki_map(vol, mcif, mask, t_star, eps)?;
    map.save(&out.path("ki_map.nii"))?;
    out.note("ki_map.nii");
    Ok(map)
}

/// Writes `regions.csv` and `regions.json`.
pub fn stage_zscore(
    map: &KiMap,
    atlas: &LabeledMask,
    cutoff: f64,
    out: &mut Outputs,
) -> Result<RegionReport, PipelineError> {
    let report = parametric::regional_zscores(map, atlas, cutoff)?;
    out.bytes("regions.csv", &report.to_csv_bytes())?;
    out.json("regions.json", &report)?;
    Ok(report)
}

/// Ground-truth summary of a generated phantom.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSummary {
    pub seed: u64,
    pub dims: [usize; 4],
    pub voxel_mm: [f64; 3],
    /// 0-based frame of peak plasma activity among the frame-selection window.
    pub bolus_frame: usize,
    pub carotid_voxels: usize,
    pub truth_input: FengParams,
    pub regions: Vec<RegionTruth>,
    pub files: Vec<String>,
}

/// Writes `volume.nii` (+ `volume.json`), `carotid_truth.nii`, `atlas.nii` and
/// `truth_cp.csv`.
pub fn write_phantom(
    bundle: &PhantomBundle,
    seed: u64,
    out: &mut Outputs,
) -> Result<PhantomSummary, PipelineError> {
    let vol = &bundle.volume;
    volume::save_volume(vol, &out.path("volume.nii"))?;
    out.note("volume.nii");
    out.note("volume.json");
    out.mask("carotid_truth.nii", &bundle.truth_carotid, vol.voxel_mm())?;
    volume::save_atlas(&bundle.truth_atlas, vol.voxel_mm(), &out.path("atlas.nii"))?;
    out.note("atlas.nii");
    out.tac("truth_cp.csv", &bundle.truth_cp)?;
    let d = vol.dims();
    Ok(PhantomSummary {
        seed,
        dims: [d.nx, d.ny, d.nz, vol.n_frames()],
        voxel_mm: vol.voxel_mm(),
        bolus_frame: bundle.bolus_frame,
        carotid_voxels: bundle.truth_carotid.count(),
        truth_input: bundle.truth_input.clone(),
        regions: bundle.truth_regions.clone(),
        files: out.written().to_vec(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub name: String,
    pub seconds: f64,
    pub artifacts: Vec<String>,
    pub summary: serde_json::Value,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Ok,
    NotConverged,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub tool_version: String,
    pub status: RunStatus,
    pub exit_code: i32,
    pub error: Option<String>,
    pub pipeline_hash: String,
    pub seed: u64,
    pub threads: usize,
    pub config: PipelineConfig,
    pub stages: Vec<StageReport>,
    /// Every file in the output directory written by this run, including the report.
    pub artifacts: Vec<String>,
    pub warnings: Vec<String>,
}

pub const REPORT_FILE: &str = "run_report.json";

/// Result of [`run_pipeline`]. The report is on disk unless the output
/// directory itself could not be created.
#[derive(Debug)]
pub struct RunOutcome {
    pub report: RunReport,
    pub report_path: Option<PathBuf>,
    pub exit_code: i32,
}

struct Recorder {
    out: Outputs,
    stages: Vec<StageReport>,
    warnings: Vec<String>,
}

impl Recorder {
    fn stage<T>(
        &mut self,
        name: &str,
        f: impl FnOnce(&mut Outputs) -> Result<T, PipelineError>,
        summary: impl FnOnce(&T) -> serde_json::Value,
    ) -> Result<T, PipelineError> {
        let before = self.out.written().len();
        let t0 = Instant::now();
        let value = f(&mut self.out)?;
        self.stages.push(StageReport {
            name: name.to_string(),
            seconds: t0.elapsed().as_secs_f64(),
            artifacts: self.out.written()[before..].to_vec(),
            summary: summary(&value),
        });
        Ok(value)
    }
}

/// Runs every stage. Stages stop at the first error; a fit that does not
/// converge still runs to the end and yields exit code 4.
pub fn run_pipeline(config: &PipelineConfig) -> RunOutcome {
    let mut cfg = config.clone();
    cfg.fit.seed = cfg.seed;
    let mut report = RunReport {
        schema_version: REPORT_SCHEMA_VERSION,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        status: RunStatus::Failed,
        exit_code: exit::FAILURE,
        error: None,
        pipeline_hash: cfg.hash(),
        seed: cfg.seed,
        threads: rayon::current_num_threads(),
        config: cfg.clone(),
        stages: Vec::new(),
        artifacts: Vec::new(),
        warnings: Vec::new(),
    };
    let fail = |mut report: RunReport, e: PipelineError| {
        report.exit_code = e.exit_code();
        report.error = Some(e.to_string());
        report
    };
    if let Err(e) = cfg.validate() {
        let mut report = fail(report, e);
        let report_path = Outputs::create(&cfg.output_dir).ok().and_then(|mut out| {
            report.artifacts = vec![REPORT_FILE.to_string()];
            out.json(REPORT_FILE, &report)
                .ok()
                .map(|_| out.path(REPORT_FILE))
        });
        let exit_code = report.exit_code;
        return RunOutcome {
            report,
            report_path,
            exit_code,
        };
    }
    let out = match Outputs::create(&cfg.output_dir) {
        Ok(o) => o,
        Err(e) => {
            let report = fail(report, e);
            let exit_code = report.exit_code;
            return RunOutcome {
                report,
                report_path: None,
                exit_code,
            };
        }
    };
    let mut rec = Recorder {
        out,
        stages: Vec::new(),
        warnings: Vec::new(),
    };
    let result = run_stages(&cfg, &mut rec);
    report.stages = rec.stages;
    report.warnings = rec.warnings;
    match result {
        Ok(converged) => {
            report.status = if converged {
                RunStatus::Ok
            } else {
                RunStatus::NotConverged
            };
            report.exit_code = if converged {
                exit::OK
            } else {
                exit::NOT_CONVERGED
            };
        }
        Err(e) => report = fail(report, e),
    }
    rec.out.note(REPORT_FILE);
    report.artifacts = rec.out.written().to_vec();
    let report_path = match rec.out.json(REPORT_FILE, &report) {
        Ok(()) => Some(rec.out.path(REPORT_FILE)),
        Err(e) => {
            log::error!("could not write run report: {e}");
            None
        }
    };
    let exit_code = report.exit_code;
    RunOutcome {
        report,
        report_path,
        exit_code,
    }
}

fn run_stages(cfg: &PipelineConfig, rec: &mut Recorder) -> Result<bool, PipelineError> {
    let (vol, atlas) = rec.stage(
        "load",
        |_| {
            let vol = volume::load_volume(&cfg.input)?;
            let atlas = volume::load_atlas(&cfg.atlas, cfg.atlas_labels.as_deref())?;
            if atlas.dims() != vol.dims() {
                return Err(VolumeError::DimsMismatch(format!(
                    "atlas dims {:?} do not match volume dims {:?}",
                    atlas.dims(),
                    vol.dims()
                ))
                .into());
            }
            Ok((vol, atlas))
        },
        |(vol, atlas)| {
            let d = vol.dims();
            json!({
                "dims": [d.nx, d.ny, d.nz, vol.n_frames()],
                "voxel_mm": vol.voxel_mm(),
                "clamped_negatives": vol.clamped_negatives(),
                "atlas_regions": atlas.table().len(),
            })
        },
    )?;
    if vol.clamped_negatives() > 0 {
        rec.warnings.push(format!(
            "{} negative voxel values clamped to 0",
            vol.clamped_negatives()
        ));
    }

    let sel = rec.stage(
        "frame_select",
        |out| stage_frame_select(&vol, &cfg.frame_select, out),
        |s| json!({ "frame": s.frame, "clamped": s.clamped }),
    )?;
    if sel.clamped {
        rec.warnings
            .push("no local maximum in frame differences; used the largest difference".into());
    }

    let seg = rec.stage(
        "segment",
        |out| stage_segment(&vol, sel.frame, &cfg.segmentation, out),
        |s| json!({ "threshold": s.threshold, "mask_voxels": s.mask_voxels, "kept_sizes": s.kept_sizes }),
    )?;

    let (idif, tissue) = rec.stage(
        "idif",
        |out| stage_idif(&vol, &seg.mask, cfg.idif, cfg.ring, out),
        |(i, t)| json!({ "idif_peak": i.peak(), "tissue_peak": t.peak() }),
    )?;

    let fit = rec.stage(
        "fit_mcif",
        |out| stage_fit(&idif, &tissue, &cfg.fit, out),
        |f| {
            json!({
                "loss": f.loss,
                "converged": f.converged,
                "best_start": f.best_start,
                "evaluations": f.evaluations,
                "mcif_peak": f.mcif.peak(),
            })
        },
    )?;
    if !fit.converged {
        rec.warnings
            .push("MCIF fit did not converge within the evaluation budget".into());
    }

    let brain = atlas.foreground();
    let map = rec.stage(
        "patlak",
        |out| stage_patlak(&vol, &fit.mcif, &brain, cfg.t_star_min, cfg.patlak_eps, out),
        |m| json!({ "t_star_min": m.t_star, "valid_voxels": m.valid_count(), "mask_voxels": brain.count() }),
    )?;

    let regions = rec.stage(
        "zscore",
        |out| stage_zscore(&map, &atlas, cfg.z_cutoff, out),
        |r| {
            let flagged: Vec<&str> = r.flagged().iter().map(|row| row.name.as_str()).collect();
            json!({ "mean_ki": r.mean, "sd_ki": r.sd, "degenerate": r.degenerate, "flagged": flagged })
        },
    )?;
    let missing = regions.rows.iter().filter(|r| r.mean_ki.is_none()).count();
    if missing > 0 {
        rec.warnings
            .push(format!("{missing} atlas regions have no valid Ki voxel"));
    }
    if regions.degenerate {
        rec.warnings
            .push("regional Ki spread is zero; all Z-scores reported as 0".into());
    }
    Ok(fit.converged)
}
