//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any failure.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dfdg::frame_select::{select_reference_frame, summed_intensity, CropBox};
use dfdg::kinetics::{
    fit_mcif, model_observations, solve_2tc_values, FitConfig, McifParams, MeasurementParams,
    TwoTissueParams,
};
use dfdg::metrics::{bce, combined_loss, dice_coefficient, dice_loss, iou, normalized_rmse};
use dfdg::parametric::{patlak_fit, patlak_points};
use dfdg::phantom::{feng_curve, generate_phantom, FengParams, PhantomBundle, PhantomConfig};
use dfdg::pipeline::{
    run_pipeline, write_phantom, Outputs, PipelineConfig, RunReport, REPORT_FILE,
};
use dfdg::segment::{extract_idif, segment_frame, surrounding_tissue_tac, IdifStrategy, SegConfig};
use dfdg::volume::{FrameSchedule, Tac};

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(elapsed: Duration, limit_s: f64) -> bool {
    elapsed.as_secs_f64() < limit_s
}

fn default_phantom() -> PhantomBundle {
    let cfg = PhantomConfig::default();
    generate_phantom(&cfg, cfg.seed).expect("default phantom")
}

fn segmentation_quality(b: &PhantomBundle) -> Outcome {
    let t0 = Instant::now();
    let crop = CropBox::central(b.volume.dims());
    let sums = summed_intensity(&b.volume, &crop, 10).map_err(|e| e.to_string())?;
    let sel = select_reference_frame(&sums).map_err(|e| e.to_string())?;
    let seg =
        segment_frame(&b.volume, sel.frame, &SegConfig::default()).map_err(|e| e.to_string())?;
    let dt = t0.elapsed();
    let g = b.truth_carotid.as_f64();
    let p = seg.mask.as_f64();
    let dice = dice_coefficient(&g, &p, 0.0).unwrap();
    let j = iou(&g, &p, 0.5).unwrap();
    check(
        dice >= 0.80 && j >= 0.65 && within(dt, 10.0),
        format!(
            "Dice {dice:.4} (>= 0.80), IoU {j:.4} (>= 0.65), frame {}, {dt:.2?} (< 10 s)",
            sel.frame
        ),
    )
}

fn frame_selection() -> Outcome {
    // only the first 10 frames matter; truncating the schedule leaves them unchanged
    let base = PhantomConfig::default();
    let cfg = PhantomConfig {
        frame_durations_s: base.frame_durations_s[..10].to_vec(),
        onset_jitter_s: 15.0,
        ..base
    };
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let seeds: Vec<u64> = (0..20).map(|_| rng.random()).collect();
    let t0 = Instant::now();
    let mut hits = 0;
    let mut misses = Vec::new();
    for &seed in &seeds {
        let b = generate_phantom(&cfg, seed).map_err(|e| e.to_string())?;
        let crop = CropBox::central(b.volume.dims());
        let sums = summed_intensity(&b.volume, &crop, 10).map_err(|e| e.to_string())?;
        let sel = select_reference_frame(&sums).map_err(|e| e.to_string())?;
        let truth = b.bolus_frame(10);
        if sel.frame.abs_diff(truth) <= 1 {
            hits += 1;
        } else {
            misses.push(format!("seed {seed}: {} vs {truth}", sel.frame));
        }
    }
    let dt = t0.elapsed();
    check(
        hits >= 19 && within(dt, 5.0),
        format!("{hits}/20 within ±1 of the bolus frame (>= 19) with ±15 s onset jitter, {dt:.2?} incl. synthesis (< 5 s){}", if misses.is_empty() { String::new() } else { format!("; misses: {}", misses.join(", ")) }),
    )
}

fn mcif_inverse_crime() -> Outcome {
    let grid = FrameSchedule::default_38().mid_times_min();
    let truth = McifParams {
        feng: FengParams::default(),
        tissue: TwoTissueParams::new(0.08, 0.14, 0.04, 0.004),
        meas: MeasurementParams {
            rc: 0.5,
            sp_bt: 0.5,
            sp_tb: 0.06,
            vb: 0.05,
        },
    };
    let obs = model_observations(&truth, &grid).map_err(|e| e.to_string())?;
    let t0 = Instant::now();
    let fit = fit_mcif(&obs.idif, &obs.tissue, &FitConfig::default()).map_err(|e| e.to_string())?;
    let dt = t0.elapsed();
    let e = normalized_rmse(obs.cp.values(), fit.mcif.values()).unwrap();
    check(
        e <= 1e-3 && within(dt, 60.0),
        format!(
            "nRMSE {e:.2e} (<= 1e-3), loss {:.2e}, {dt:.2?} (< 60 s)",
            fit.loss
        ),
    )
}

fn mcif_realistic(b: &PhantomBundle) -> Outcome {
    let crop = CropBox::central(b.volume.dims());
    let sums = summed_intensity(&b.volume, &crop, 10).map_err(|e| e.to_string())?;
    let sel = select_reference_frame(&sums).map_err(|e| e.to_string())?;
    let seg =
        segment_frame(&b.volume, sel.frame, &SegConfig::default()).map_err(|e| e.to_string())?;
    let idif = extract_idif(&b.volume, &seg.mask, IdifStrategy::Mean).map_err(|e| e.to_string())?;
    let tissue = surrounding_tissue_tac(&b.volume, &seg.mask, 2, 3).map_err(|e| e.to_string())?;
    let t0 = Instant::now();
    let fit = fit_mcif(&idif, &tissue, &FitConfig::default()).map_err(|e| e.to_string())?;
    let dt = t0.elapsed();
    let e = normalized_rmse(b.truth_cp.values(), fit.mcif.values()).unwrap();
    let (mp, ip) = (fit.mcif.peak(), idif.peak());
    check(
        e <= 0.07 && mp >= ip && within(dt, 300.0),
        format!(
            "nRMSE {e:.4} (<= 0.07), MCIF peak {mp:.2} >= IDIF peak {ip:.2}, {dt:.2?} (< 5 min)"
        ),
    )
}

fn patlak() -> Outcome {
    let t0 = Instant::now();
    let times = FrameSchedule::default_38().mid_times_min();
    let cp = feng_curve(&FengParams::default(), &times);
    let k = TwoTissueParams::new(0.1, 0.15, 0.05, 0.0);
    let (c1, c2) = solve_2tc_values(&k, &times, &cp);
    let ct: Vec<f64> = c1.iter().zip(&c2).map(|(a, b)| a + b).collect();
    let cp = Tac::new(times.clone(), cp).unwrap();
    let ct = Tac::new(times, ct).unwrap();
    let pts = patlak_points(&ct, &cp, 1e-6).map_err(|e| e.to_string())?;
    let fit = patlak_fit(&pts, 10.0).map_err(|e| e.to_string())?;
    let dt = t0.elapsed();
    let want = 0.1 * 0.05 / (0.15 + 0.05);
    let rel = (fit.ki - want).abs() / want;
    check(
        rel <= 0.02 && fit.r2 > 0.999 && within(dt, 1.0),
        format!(
            "Ki {:.5} vs {want:.4} ({:.2}% off, <= 2%), r² {:.6} (> 0.999), {dt:.2?} (< 1 s)",
            fit.ki,
            rel * 100.0,
            fit.r2
        ),
    )
}

fn pipeline_config(vol_dir: &Path, out: &Path) -> PipelineConfig {
    PipelineConfig {
        input: vol_dir.join("volume.nii"),
        atlas: vol_dir.join("atlas.nii"),
        output_dir: out.to_path_buf(),
        ..PipelineConfig::default()
    }
}

fn zscore_detection(work: &Path) -> Outcome {
    let t0 = Instant::now();
    let b = default_phantom();
    let ph = work.join("z_phantom");
    let mut out = Outputs::create(&ph).map_err(|e| e.to_string())?;
    write_phantom(&b, 7, &mut out).map_err(|e| e.to_string())?;
    let outcome = run_pipeline(&pipeline_config(&ph, &work.join("z_run")));
    let dt = t0.elapsed();
    if outcome.exit_code != 0 {
        return Err(format!(
            "pipeline exit {}: {:?}",
            outcome.exit_code, outcome.report.error
        ));
    }
    let text =
        std::fs::read_to_string(work.join("z_run/regions.json")).map_err(|e| e.to_string())?;
    let report: dfdg::parametric::RegionReport =
        serde_json::from_str(&text).map_err(|e| e.to_string())?;
    let hypo_id = PhantomConfig::default()
        .hypometabolic
        .map(|h| h.region)
        .ok_or("no hypometabolic region")?;
    let row = report
        .rows
        .iter()
        .find(|r| r.id == hypo_id)
        .ok_or("region missing")?;
    let z = row.z.ok_or("region has no z")?;
    let flagged: Vec<u32> = report.flagged().iter().map(|r| r.id).collect();
    check(
        z < -2.0 && flagged == vec![hypo_id] && within(dt, 120.0),
        format!(
            "region {} ({}) z {z:.2} (< -2), flagged {flagged:?}, {dt:.2?} end to end (< 2 min)",
            hypo_id, row.name
        ),
    )
}

fn metric_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let n = rng.random_range(1..200);
        let density = rng.random_range(0.05..0.95);
        let g: Vec<f64> = (0..n)
            .map(|_| f64::from(u8::from(rng.random_bool(density))))
            .collect();
        let p: Vec<f64> = (0..n)
            .map(|_| f64::from(u8::from(rng.random_bool(density))))
            .collect();
        let d = dice_coefficient(&g, &p, 0.0).unwrap();
        let j = iou(&g, &p, 0.5).unwrap();
        worst = worst.max((d - 2.0 * j / (1.0 + j)).abs());
    }
    let g: Vec<f64> = (0..64).map(|i| f64::from(u8::from(i % 3 == 0))).collect();
    let half = vec![0.5; 64];
    let bce_err = (bce(&g, &half).unwrap() - std::f64::consts::LN_2).abs();
    let p: Vec<f64> = (0..64).map(|i| (i as f64 + 0.5) / 64.0).collect();
    let combined_exact = combined_loss(&g, &p, 1e-6).unwrap()
        == dice_loss(&g, &p, 1e-6).unwrap() + bce(&g, &p).unwrap();
    check(
        worst <= 1e-9 && bce_err <= 1e-9 && combined_exact,
        format!("max |D - 2J/(1+J)| {worst:.1e} over 1000 pairs, |bce(0.5) - ln 2| {bce_err:.1e}, combined == dice_loss + bce: {combined_exact}"),
    )
}

/// Explicit Euler on a fine grid with the same piecewise-linear input.
fn euler_ct(k: &TwoTissueParams, times: &[f64], cp: &[f64], dt: f64) -> Vec<f64> {
    let cp_at = |t: f64| -> f64 {
        if t <= times[0] {
            return cp[0] * t / times[0];
        }
        let i = times.partition_point(|&x| x <= t);
        if i >= times.len() {
            return cp[times.len() - 1];
        }
        let (t0, t1) = (times[i - 1], times[i]);
        cp[i - 1] + (cp[i] - cp[i - 1]) * (t - t0) / (t1 - t0)
    };
    let (mut c1, mut c2, mut t) = (0.0f64, 0.0f64, 0.0f64);
    let mut out = Vec::with_capacity(times.len());
    for &target in times {
        while t < target - 1e-12 {
            let h = dt.min(target - t);
            let x = cp_at(t);
            let d1 = k.k1 * x - (k.k2 + k.k3) * c1 + k.k4 * c2;
            let d2 = k.k3 * c1 - k.k4 * c2;
            c1 += h * d1;
            c2 += h * d2;
            t += h;
        }
        out.push(c1 + c2);
    }
    out
}

fn oracle_equivalence() -> Outcome {
    let times = FrameSchedule::default_38().mid_times_min();
    let cp = feng_curve(&FengParams::default(), &times);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let k = TwoTissueParams::new(
            rng.random_range(0.01..1.0),
            rng.random_range(0.01..1.0),
            rng.random_range(0.0..0.5),
            rng.random_range(0.0..0.1),
        );
        let (c1, c2) = solve_2tc_values(&k, &times, &cp);
        let oracle = euler_ct(&k, &times, &cp, 1e-4);
        let peak = oracle.iter().cloned().fold(0.0, f64::max);
        for i in 0..times.len() {
            worst = worst.max(((c1[i] + c2[i]) - oracle[i]).abs() / peak);
        }
    }
    check(
        worst <= 5e-3,
        format!(
            "max deviation {:.3}% of peak (<= 0.5%) over 100 draws",
            worst * 100.0
        ),
    )
}

fn run_with_threads(threads: usize, cfg: &PipelineConfig) -> Result<RunReport, String> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| e.to_string())?;
    let outcome = pool.install(|| run_pipeline(cfg));
    if outcome.exit_code != 0 {
        return Err(format!(
            "exit {}: {:?}",
            outcome.exit_code, outcome.report.error
        ));
    }
    Ok(outcome.report)
}

fn determinism(work: &Path) -> Outcome {
    let cfg = PhantomConfig::default();
    let pool = |n| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .unwrap()
    };
    let a = pool(1)
        .install(|| generate_phantom(&cfg, 7))
        .map_err(|e| e.to_string())?;
    let b = pool(4)
        .install(|| generate_phantom(&cfg, 7))
        .map_err(|e| e.to_string())?;
    if a.volume.data() != b.volume.data() {
        return Err("phantom voxels differ between 1 and 4 threads".into());
    }
    let ph = work.join("det_phantom");
    let mut out = Outputs::create(&ph).map_err(|e| e.to_string())?;
    write_phantom(&a, 7, &mut out).map_err(|e| e.to_string())?;

    let runs = [("r1", 2), ("r2", 2), ("r3", 1), ("r4", 4)];
    let mut reports = Vec::new();
    for (name, threads) in runs {
        reports.push(run_with_threads(
            threads,
            &pipeline_config(&ph, &work.join(name)),
        )?);
    }
    let mut compared = 0;
    for f in &reports[0].artifacts {
        if f == REPORT_FILE {
            continue;
        }
        let reference = std::fs::read(work.join("r1").join(f)).map_err(|e| e.to_string())?;
        for (name, threads) in &runs[1..] {
            let other = std::fs::read(work.join(name).join(f)).map_err(|e| e.to_string())?;
            if other != reference {
                return Err(format!("{f} differs in {name} ({threads} threads)"));
            }
        }
        compared += 1;
    }
    let same_summaries = reports.windows(2).all(|w| {
        w[0].pipeline_hash == w[1].pipeline_hash
            && w[0]
                .stages
                .iter()
                .map(|s| &s.summary)
                .eq(w[1].stages.iter().map(|s| &s.summary))
    });
    check(
        same_summaries && compared >= 10,
        format!("{compared} output files byte-identical across reruns and 1/2/4 threads; phantom thread-invariant"),
    )
}

fn run(name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let r = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into()))
    });
    match r {
        Ok(d) => {
            println!("PASS {name}: {d}");
            true
        }
        Err(d) => {
            println!("FAIL {name}: {d}");
            false
        }
    }
}

fn main() {
    let work = tempfile::tempdir().expect("temp dir");
    let b = default_phantom();
    let results = [
        run("1 segmentation quality", || segmentation_quality(&b)),
        run("2 frame selection", frame_selection),
        run("3 MCIF recovery, noiseless", mcif_inverse_crime),
        run("4 MCIF recovery, blurred noisy phantom", || {
            mcif_realistic(&b)
        }),
        run("5 Patlak correctness", patlak),
        run("6 Z-score detection", || zscore_detection(work.path())),
        run("7 metric identities", metric_identities),
        run("8 solver vs Euler oracle", oracle_equivalence),
        run("9 determinism", || determinism(work.path())),
    ];
    let failed = results.iter().filter(|ok| !**ok).count();
    println!("{} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
