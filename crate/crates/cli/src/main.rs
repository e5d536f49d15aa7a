use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;

use dfdg::frame_select::CropBox;
use dfdg::kinetics::FitConfig;
use dfdg::metrics;
use dfdg::parametric::{KiMap, DEFAULT_EPS, DEFAULT_T_STAR_MIN, DEFAULT_Z_CUTOFF};
use dfdg::phantom::{generate_phantom, PhantomConfig};
use dfdg::pipeline::{
    self, exit, FrameSelectConfig, Outputs, PipelineConfig, PipelineError, RingConfig,
};
use dfdg::segment::{IdifStrategy, SegConfig, ThresholdMode};
use dfdg::volume::{self, VolumeError};

/// Dynamic FDG-PET quantification: carotid IDIF, model-corrected input
/// function, Patlak Ki maps and regional Z-scores.
///
/// Exit codes: 0 ok, 1 other failure, 2 bad config or input, 3 empty
/// segmentation, 4 MCIF fit did not converge.
#[derive(Parser)]
#[command(name = "dfdg", version)]
struct Cli {
    /// Random seed (phantom generation, multi-start fit). Overrides config files.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; defaults to all cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dynamic scan with ground truth.
    Phantom {
        /// Phantom config JSON; unspecified fields take defaults.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Run every stage from a volume and atlas to the regional report.
    Run(RunArgs),
    /// Pick the carotid reference frame.
    FrameSelect {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = dfdg::frame_select::DEFAULT_N_FRAMES)]
        n_frames: usize,
        /// Inclusive crop as x0,y0,z0,x1,y1,z1; defaults to the central half.
        #[arg(long, value_delimiter = ',', num_args = 6)]
        crop: Option<Vec<usize>>,
    },
    /// Segment the carotids in one frame.
    Segment {
        #[arg(long)]
        input: PathBuf,
        /// 0-based frame; selected automatically when omitted.
        #[arg(long)]
        frame: Option<usize>,
        /// Segmentation config JSON.
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        threshold: ThresholdArgs,
    },
    /// Extract the IDIF and peri-carotid tissue TAC.
    Idif {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        /// Average only the hottest percent of mask voxels per frame.
        #[arg(long)]
        hottest_percent: Option<f64>,
        #[arg(long, default_value_t = 2)]
        ring_inner: usize,
        #[arg(long, default_value_t = 3)]
        ring_outer: usize,
    },
    /// Fit the model-corrected input function.
    FitMcif {
        #[arg(long)]
        idif: PathBuf,
        #[arg(long)]
        tissue: PathBuf,
        /// Fit config JSON (bounds, weights, starts).
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Voxelwise Patlak Ki map.
    Patlak {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        mcif: PathBuf,
        /// Mask or atlas volume; nonzero voxels are fitted.
        #[arg(long)]
        mask: PathBuf,
        #[arg(long, default_value_t = DEFAULT_T_STAR_MIN)]
        t_star: f64,
        #[arg(long, default_value_t = DEFAULT_EPS)]
        eps: f64,
    },
    /// Regional Ki means and Z-scores.
    Zscore {
        #[arg(long)]
        ki_map: PathBuf,
        #[arg(long)]
        atlas: PathBuf,
        #[arg(long)]
        atlas_labels: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_Z_CUTOFF, allow_hyphen_values = true)]
        cutoff: f64,
    },
    /// Compare a prediction with ground truth.
    Metrics {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long, value_enum)]
        kind: MetricKind,
        /// Also write metrics.json into --out.
        #[arg(long)]
        save: bool,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Pipeline config JSON.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Input volume; overrides the config.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Atlas volume; overrides the config.
    #[arg(long)]
    atlas: Option<PathBuf>,
    #[command(flatten)]
    threshold: ThresholdArgs,
}

#[derive(Args)]
struct ThresholdArgs {
    /// Absolute threshold in kBq/mL.
    #[arg(long, conflicts_with = "threshold_fraction")]
    threshold_abs: Option<f64>,
    /// Threshold as a fraction of the frame maximum.
    #[arg(long)]
    threshold_fraction: Option<f64>,
}

impl ThresholdArgs {
    fn apply(&self, cfg: &mut SegConfig) {
        if let Some(v) = self.threshold_abs {
            cfg.threshold = ThresholdMode::Absolute(v);
        }
        if let Some(v) = self.threshold_fraction {
            cfg.threshold = ThresholdMode::Fraction(v);
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum MetricKind {
    Mask,
    Tac,
}

/// An error carrying its exit code.
struct Failure {
    code: i32,
    err: anyhow::Error,
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        Self {
            code: e.exit_code(),
            err: e.into(),
        }
    }
}

impl From<VolumeError> for Failure {
    fn from(e: VolumeError) -> Self {
        PipelineError::from(e).into()
    }
}

fn invalid(err: anyhow::Error) -> Failure {
    Failure {
        code: exit::INVALID_INPUT,
        err,
    }
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(invalid)?;
    serde_json::from_str(&text)
        .with_context(|| format!("parsing {}", path.display()))
        .map_err(invalid)
}

fn print_json<T: serde::Serialize>(value: &T) {
    println!(
        "{}",
        serde_json::to_string_pretty(value).expect("serializable")
    );
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("error: --threads: {e}");
            return ExitCode::from(exit::INVALID_INPUT as u8);
        }
    }
    match dispatch(&cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(f) => {
            eprintln!("error: {:#}", f.err);
            ExitCode::from(f.code as u8)
        }
    }
}

fn dispatch(cli: &Cli) -> Result<i32, Failure> {
    let out_dir = cli.out.as_path();
    match &cli.cmd {
        Command::Phantom { config } => {
            let cfg: PhantomConfig = match config {
                Some(p) => read_json(p)?,
                None => PhantomConfig::default(),
            };
            let seed = cli.seed.unwrap_or(cfg.seed);
            let bundle = generate_phantom(&cfg, seed).map_err(|e| invalid(e.into()))?;
            let mut out = Outputs::create(out_dir)?;
            let summary = pipeline::write_phantom(&bundle, seed, &mut out)?;
            print_json(&summary);
            Ok(exit::OK)
        }
        Command::Run(args) => {
            let mut cfg = match &args.config {
                Some(p) => PipelineConfig::from_json_file(p)?,
                None => PipelineConfig::default(),
            };
            if let Some(p) = &args.input {
                cfg.input = p.clone();
            }
            if let Some(p) = &args.atlas {
                cfg.atlas = p.clone();
            }
            if let Some(s) = cli.seed {
                cfg.seed = s;
            }
            cfg.output_dir = out_dir.to_path_buf();
            args.threshold.apply(&mut cfg.segmentation);
            let outcome = pipeline::run_pipeline(&cfg);
            let r = &outcome.report;
            if let Some(e) = &r.error {
                eprintln!("error: {e}");
            }
            for w in &r.warnings {
                eprintln!("warning: {w}");
            }
            if let Some(zs) = r.stages.iter().find(|s| s.name == "zscore") {
                println!("flagged regions: {}", zs.summary["flagged"]);
            }
            if let Some(p) = &outcome.report_path {
                println!("report: {}", p.display());
            }
            Ok(outcome.exit_code)
        }
        Command::FrameSelect {
            input,
            n_frames,
            crop,
        } => {
            let vol = volume::load_volume(input)?;
            let crop = crop.as_ref().map(|c| CropBox {
                min: [c[0], c[1], c[2]],
                max: [c[3], c[4], c[5]],
            });
            let cfg = FrameSelectConfig {
                n_frames: *n_frames,
                crop,
            };
            let mut out = Outputs::create(out_dir)?;
            let sel = pipeline::stage_frame_select(&vol, &cfg, &mut out)?;
            println!("{}", sel.frame);
            Ok(exit::OK)
        }
        Command::Segment {
            input,
            frame,
            config,
            threshold,
        } => {
            let mut cfg: SegConfig = match config {
                Some(p) => read_json(p)?,
                None => SegConfig::default(),
            };
            threshold.apply(&mut cfg);
            cfg.validate().map_err(|e| invalid(e.into()))?;
            let vol = volume::load_volume(input)?;
            let mut out = Outputs::create(out_dir)?;
            let frame = match frame {
                Some(f) => *f,
                None => {
                    pipeline::stage_frame_select(&vol, &FrameSelectConfig::default(), &mut out)?
                        .frame
                }
            };
            let seg = pipeline::stage_segment(&vol, frame, &cfg, &mut out)?;
            println!(
                "frame {frame}: {} voxels, threshold {}",
                seg.mask_voxels, seg.threshold
            );
            Ok(exit::OK)
        }
        Command::Idif {
            input,
            mask,
            hottest_percent,
            ring_inner,
            ring_outer,
        } => {
            let vol = volume::load_volume(input)?;
            let mask = volume::load_mask(mask)?;
            let strategy = match hottest_percent {
                Some(p) => IdifStrategy::HottestPercent { percent: *p },
                None => IdifStrategy::Mean,
            };
            let ring = RingConfig {
                inner: *ring_inner,
                outer: *ring_outer,
            };
            let mut out = Outputs::create(out_dir)?;
            let (idif, tissue) = pipeline::stage_idif(&vol, &mask, strategy, ring, &mut out)?;
            println!("idif peak {}, tissue peak {}", idif.peak(), tissue.peak());
            Ok(exit::OK)
        }
        Command::FitMcif {
            idif,
            tissue,
            config,
        } => {
            let mut cfg: FitConfig = match config {
                Some(p) => read_json(p)?,
                None => FitConfig::default(),
            };
            if let Some(s) = cli.seed {
                cfg.seed = s;
            }
            let idif = volume::tac_from_csv(idif)?;
            let tissue = volume::tac_from_csv(tissue)?;
            cfg.validate().map_err(|e| invalid(e.into()))?;
            let mut out = Outputs::create(out_dir)?;
            let fit = pipeline::stage_fit(&idif, &tissue, &cfg, &mut out)?;
            println!(
                "loss {:e}, converged {}, mcif peak {}",
                fit.loss,
                fit.converged,
                fit.mcif.peak()
            );
            Ok(if fit.converged {
                exit::OK
            } else {
                exit::NOT_CONVERGED
            })
        }
        Command::Patlak {
            input,
            mcif,
            mask,
            t_star,
            eps,
        } => {
            let vol = volume::load_volume(input)?;
            let mcif = volume::tac_from_csv(mcif)?;
            let mask = volume::load_mask(mask)?;
            let mut out = Outputs::create(out_dir)?;
            let map = pipeline::stage_patlak(&vol, &mcif, &mask, *t_star, *eps, &mut out)?;
            println!("{} of {} voxels fitted", map.valid_count(), mask.count());
            Ok(exit::OK)
        }
        Command::Zscore {
            ki_map,
            atlas,
            atlas_labels,
            cutoff,
        } => {
            let (dims, voxel_mm, ki) = volume::load_parametric_map(ki_map)?;
            let map = KiMap {
                dims,
                voxel_mm,
                t_star: f64::NAN,
                r2: vec![None; ki.len()],
                ki,
            };
            let atlas = volume::load_atlas(atlas, atlas_labels.as_deref())?;
            let mut out = Outputs::create(out_dir)?;
            let report = pipeline::stage_zscore(&map, &atlas, *cutoff, &mut out)?;
            for r in report.flagged() {
                println!("{} z={:.3}", r.name, r.z.unwrap_or(f64::NAN));
            }
            Ok(exit::OK)
        }
        Command::Metrics {
            pred,
            truth,
            kind,
            save,
        } => {
            let value = match kind {
                MetricKind::Mask => {
                    let p = volume::load_mask(pred)?;
                    let t = volume::load_mask(truth)?;
                    if p.dims() != t.dims() {
                        return Err(invalid(anyhow::anyhow!(
                            "mask dims differ: {:?} vs {:?}",
                            p.dims(),
                            t.dims()
                        )));
                    }
                    let m = metrics::mask_metrics(
                        &t.as_f64(),
                        &p.as_f64(),
                        metrics::DEFAULT_SMOOTH,
                        metrics::DEFAULT_BINARIZE,
                    )
                    .map_err(|e| invalid(e.into()))?;
                    serde_json::to_value(m)
                }
                MetricKind::Tac => {
                    let p = volume::tac_from_csv(pred)?;
                    let t = volume::tac_from_csv(truth)?;
                    if !p.same_grid(&t) {
                        return Err(invalid(anyhow::anyhow!("TAC time grids differ")));
                    }
                    let m = metrics::tac_metrics(t.values(), p.values())
                        .map_err(|e| invalid(e.into()))?;
                    serde_json::to_value(m)
                }
            }
            .expect("metrics serialize");
            print_json(&value);
            if *save {
                let mut out = Outputs::create(out_dir)?;
                out.json("metrics.json", &value)?;
            }
            Ok(exit::OK)
        }
    }
}
