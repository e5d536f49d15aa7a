//! Multi-start bounded fit of the corrected input function.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::optim::{latin_hypercube, levenberg_marquardt_box, nelder_mead_box, LocalResult};
use super::{model_values, KineticsError, McifParams, IDX_RC, IDX_SP_BT, N_PARAMS, PARAM_NAMES};
use crate::volume::Tac;

pub const MIN_FRAMES: usize = N_PARAMS;

/// Inclusive box bounds per parameter, keyed by name in JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(
    try_from = "BTreeMap<String, [f64; 2]>",
    into = "BTreeMap<String, [f64; 2]>"
)]
pub struct ParamBounds {
    pub lo: [f64; N_PARAMS],
    pub hi: [f64; N_PARAMS],
}

impl Default for ParamBounds {
    fn default() -> Self {
        let pairs: [[f64; 2]; N_PARAMS] = [
            [1.0, 2000.0],
            [0.0, 200.0],
            [0.0, 200.0],
            [-10.0, -1.0],
            [-0.9, -0.05],
            [-0.04, -0.001],
            [0.0, 3.0],
            [0.0, 2.0],
            [0.0, 2.0],
            [0.0, 2.0],
            [0.0, 2.0],
            [0.0, 1.0],
            [0.0, 1.0],
            [0.0, 1.0],
            [0.0, 0.2],
        ];
        Self {
            lo: pairs.map(|p| p[0]),
            hi: pairs.map(|p| p[1]),
        }
    }
}

impl ParamBounds {
    pub fn validate(&self) -> Result<(), KineticsError> {
        for i in 0..N_PARAMS {
            let (lo, hi) = (self.lo[i], self.hi[i]);
            if !lo.is_finite() || !hi.is_finite() || lo > hi {
                return Err(KineticsError::InvalidBounds(format!(
                    "{}: [{lo}, {hi}]",
                    PARAM_NAMES[i]
                )));
            }
        }
        // every point of the box must be a valid input shape and rate set
        if !(self.hi[3] < self.lo[4] && self.hi[4] < self.lo[5] && self.hi[5] < 0.0) {
            return Err(KineticsError::InvalidBounds(
                "lambda ranges must satisfy lambda1 < lambda2 < lambda3 < 0 everywhere".into(),
            ));
        }
        if self.lo[0] <= 0.0 {
            return Err(KineticsError::InvalidBounds(
                "a1 lower bound must be > 0".into(),
            ));
        }
        if self.lo[1] < 0.0 || self.lo[2] < 0.0 || self.lo[6] < 0.0 {
            return Err(KineticsError::InvalidBounds(
                "a2, a3, tau must be >= 0".into(),
            ));
        }
        if self.lo[7..N_PARAMS].iter().any(|&v| v < 0.0) {
            return Err(KineticsError::InvalidBounds(
                "rate and measurement parameters must be >= 0".into(),
            ));
        }
        Ok(())
    }
}

impl TryFrom<BTreeMap<String, [f64; 2]>> for ParamBounds {
    type Error = String;

    fn try_from(map: BTreeMap<String, [f64; 2]>) -> Result<Self, String> {
        let mut b = ParamBounds::default();
        for (name, [lo, hi]) in map {
            let i = PARAM_NAMES
                .iter()
                .position(|n| *n == name)
                .ok_or_else(|| format!("unknown parameter `{name}`"))?;
            b.lo[i] = lo;
            b.hi[i] = hi;
        }
        Ok(b)
    }
}

impl From<ParamBounds> for BTreeMap<String, [f64; 2]> {
    fn from(b: ParamBounds) -> Self {
        (0..N_PARAMS)
            .map(|i| (PARAM_NAMES[i].to_string(), [b.lo[i], b.hi[i]]))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub bounds: ParamBounds,
    /// Weight on the normalized IDIF residual.
    pub w_idif: f64,
    /// Weight on the normalized tissue residual.
    pub w_tissue: f64,
    pub n_starts: usize,
    pub seed: u64,
    pub max_evals_per_start: usize,
    /// Relative loss change below which a start counts as converged.
    pub rel_tol: f64,
    /// Share of each start's budget spent in the simplex phase before polishing.
    pub simplex_fraction: f64,
    /// Constrain `sp_bt = 1 − rc`, i.e. treat the IDIF as a convex mixture of
    /// blood and tissue. Without it the model is invariant under rescaling the
    /// input curve, and the input amplitude is not identifiable.
    pub tie_idif_mixture: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            bounds: ParamBounds::default(),
            w_idif: 1.0,
            w_tissue: 1.0,
            n_starts: 8,
            seed: 0,
            max_evals_per_start: 5000,
            rel_tol: 1e-8,
            simplex_fraction: 0.4,
            tie_idif_mixture: true,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<(), KineticsError> {
        self.bounds.validate()?;
        if !(self.w_idif >= 0.0 && self.w_tissue >= 0.0 && self.w_idif + self.w_tissue > 0.0) {
            return Err(KineticsError::InvalidParams(
                "loss weights must be >= 0 and not both zero".into(),
            ));
        }
        if self.n_starts == 0 {
            return Err(KineticsError::InvalidParams("n_starts must be >= 1".into()));
        }
        if self.max_evals_per_start < 4 * N_PARAMS {
            return Err(KineticsError::InvalidParams(format!(
                "max_evals_per_start must be >= {}",
                4 * N_PARAMS
            )));
        }
        if !(0.0..=1.0).contains(&self.simplex_fraction) {
            return Err(KineticsError::InvalidParams(
                "simplex_fraction must be in [0, 1]".into(),
            ));
        }
        if !(self.rel_tol > 0.0) {
            return Err(KineticsError::InvalidParams("rel_tol must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StartSummary {
    pub index: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub evaluations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub params: McifParams,
    /// Fitted plasma input on the frame grid.
    pub mcif: Tac,
    pub loss: f64,
    /// Loss after each accepted step of the winning start.
    pub loss_trajectory: Vec<f64>,
    pub converged: bool,
    pub best_start: usize,
    pub idif_rmse: f64,
    pub tissue_rmse: f64,
    pub evaluations: usize,
    pub starts: Vec<StartSummary>,
}

struct Problem<'a> {
    times: &'a [f64],
    idif: &'a [f64],
    tissue: &'a [f64],
    s_idif: f64,
    s_tissue: f64,
    lo: [f64; N_PARAMS],
    span: [f64; N_PARAMS],
    free: Vec<usize>,
    tie: bool,
}

impl Problem<'_> {
    fn params(&self, u: &[f64]) -> [f64; N_PARAMS] {
        let mut v = self.lo;
        for (k, &i) in self.free.iter().enumerate() {
            v[i] = self.lo[i] + u[k].clamp(0.0, 1.0) * self.span[i];
        }
        if self.tie {
            v[IDX_SP_BT] = (1.0 - v[IDX_RC]).clamp(
                self.lo[IDX_SP_BT],
                self.lo[IDX_SP_BT] + self.span[IDX_SP_BT],
            );
        }
        v
    }

    fn residuals(&self, u: &[f64], r: &mut [f64]) {
        let p = McifParams::from_array(&self.params(u));
        let (_, _, idif, tissue) = model_values(&p, self.times);
        let n = self.times.len();
        for i in 0..n {
            r[i] = self.s_idif * (idif[i] - self.idif[i]);
            r[n + i] = self.s_tissue * (tissue[i] - self.tissue[i]);
        }
    }

    fn loss(&self, u: &[f64]) -> f64 {
        let mut r = vec![0.0; 2 * self.times.len()];
        self.residuals(u, &mut r);
        r.iter().map(|v| v * v).sum()
    }
}

fn rmse(a: &[f64], b: &[f64]) -> f64 {
    (a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64).sqrt()
}

fn run_start(prob: &Problem, u0: &[f64], cfg: &FitConfig) -> (LocalResult, f64) {
    let budget = cfg.max_evals_per_start;
    let nm_budget = ((budget as f64) * cfg.simplex_fraction) as usize;
    let f0 = prob.loss(u0);
    let (x, mut trajectory, mut evals) = if nm_budget > prob.free.len() + 1 {
        let nm = nelder_mead_box(|u| prob.loss(u), u0, 0.1, nm_budget, 1e-12);
        (nm.x, nm.trajectory, nm.evals)
    } else {
        (u0.to_vec(), vec![f0], 1)
    };
    let lm = levenberg_marquardt_box(
        |u, r| prob.residuals(u, r),
        2 * prob.times.len(),
        &x,
        budget.saturating_sub(evals).max(1),
        cfg.rel_tol,
    );
    evals += lm.evals;
    trajectory.extend(lm.trajectory.iter().skip(1));
    (
        LocalResult {
            x: lm.x,
            f: lm.f,
            trajectory,
            evals,
            converged: lm.converged,
        },
        f0,
    )
}

/// Fits the corrected input function to a measured IDIF and peri-carotid tissue TAC.
///
/// Loss is `w_idif·Σ(Δidif)²/‖idif‖² + w_tissue·Σ(Δtissue)²/‖tissue‖²`.
/// Starts are drawn by Latin-hypercube sampling over the bounds; each start
/// runs a bounded simplex search followed by a projected Levenberg–Marquardt
/// polish on a finite-difference Jacobian. The lowest final loss wins, ties
/// going to the lowest start index.
pub fn fit_mcif(idif: &Tac, tissue: &Tac, cfg: &FitConfig) -> Result<FitResult, KineticsError> {
    if idif.len() != tissue.len() || !idif.same_grid(tissue) {
        return Err(KineticsError::GridMismatch {
            idif: idif.len(),
            tissue: tissue.len(),
        });
    }
    if idif.len() < MIN_FRAMES {
        return Err(KineticsError::TooFewFrames {
            n: idif.len(),
            min: MIN_FRAMES,
        });
    }
    let times = idif.times();
    if times[0] < 0.0 {
        return Err(KineticsError::InvalidGrid(format!(
            "first time {} is negative",
            times[0]
        )));
    }
    cfg.validate()?;
    let norm2 = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>();
    let (n_idif, n_tissue) = (norm2(idif.values()), norm2(tissue.values()));
    if n_idif == 0.0 {
        return Err(KineticsError::DegenerateInput("IDIF is identically zero"));
    }
    if n_tissue == 0.0 {
        return Err(KineticsError::DegenerateInput(
            "tissue TAC is identically zero",
        ));
    }

    let b = &cfg.bounds;
    let mut span = [0.0; N_PARAMS];
    for i in 0..N_PARAMS {
        span[i] = b.hi[i] - b.lo[i];
    }
    let free: Vec<usize> = (0..N_PARAMS)
        .filter(|&i| span[i] > 0.0 && !(cfg.tie_idif_mixture && i == IDX_SP_BT))
        .collect();
    let prob = Problem {
        times,
        idif: idif.values(),
        tissue: tissue.values(),
        s_idif: (cfg.w_idif / n_idif).sqrt(),
        s_tissue: (cfg.w_tissue / n_tissue).sqrt(),
        lo: b.lo,
        span,
        free,
        tie: cfg.tie_idif_mixture,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let starts = latin_hypercube(cfg.n_starts, prob.free.len(), &mut rng);
    let results: Vec<(LocalResult, f64)> = starts
        .par_iter()
        .map(|u0| run_start(&prob, u0, cfg))
        .collect();

    let best = results
        .iter()
        .enumerate()
        .min_by(|(i, a), (j, b)| a.0.f.total_cmp(&b.0.f).then(i.cmp(j)))
        .map(|(i, _)| i)
        .expect("at least one start");
    let summaries: Vec<StartSummary> = results
        .iter()
        .enumerate()
        .map(|(index, (r, f0))| StartSummary {
            index,
            initial_loss: *f0,
            final_loss: r.f,
            evaluations: r.evals,
            converged: r.converged,
        })
        .collect();
    for s in &summaries {
        log::debug!(
            "start {}: loss {:.3e} -> {:.3e} in {} evals",
            s.index,
            s.initial_loss,
            s.final_loss,
            s.evaluations
        );
    }
    let win = &results[best].0;
    let params = McifParams::from_array(&prob.params(&win.x));
    let (cp, _, idif_fit, tissue_fit) = model_values(&params, times);
    let mcif = Tac::new(times.to_vec(), cp.iter().map(|v| v.max(0.0)).collect())
        .map_err(|e| KineticsError::InvalidGrid(e.to_string()))?;
    Ok(FitResult {
        params,
        mcif,
        loss: win.f,
        loss_trajectory: win.trajectory.clone(),
        converged: win.converged,
        best_start: best,
        idif_rmse: rmse(&idif_fit, idif.values()),
        tissue_rmse: rmse(&tissue_fit, tissue.values()),
        evaluations: results.iter().map(|r| r.0.evals).sum(),
        starts: summaries,
    })
}
