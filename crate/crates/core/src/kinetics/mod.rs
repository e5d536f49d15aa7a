//! Two-tissue FDG kinetics, the IDIF measurement model, and the MCIF fit.

mod fit;
mod model;
pub mod optim;
mod solver;

pub use fit::{fit_mcif, FitConfig, FitResult, ParamBounds, StartSummary};
pub use model::{model_observations, model_values, Observations};
pub use solver::{exp_convolution, solve_2tc, solve_2tc_values, Compartments};

use crate::phantom::FengParams;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum KineticsError {
    #[error("invalid time grid: {0}")]
    InvalidGrid(String),
    #[error("IDIF has {idif} frames but the tissue TAC has {tissue}")]
    GridMismatch { idif: usize, tissue: usize },
    #[error("need at least {min} frames, got {n}")]
    TooFewFrames { n: usize, min: usize },
    #[error("degenerate input: {0}")]
    DegenerateInput(&'static str),
    #[error("invalid bounds: {0}")]
    InvalidBounds(String),
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
}

/// K1 (mL/min/g) and k2, k3, k4 (min⁻¹).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TwoTissueParams {
    #[serde(rename = "K1")]
    pub k1: f64,
    pub k2: f64,
    pub k3: f64,
    pub k4: f64,
}

impl TwoTissueParams {
    pub const fn new(k1: f64, k2: f64, k3: f64, k4: f64) -> Self {
        Self { k1, k2, k3, k4 }
    }

    /// Net influx rate of an irreversible tracer, `K1·k3/(k2+k3)`.
    pub fn ki(&self) -> f64 {
        let d = self.k2 + self.k3;
        if d > 0.0 {
            self.k1 * self.k3 / d
        } else {
            0.0
        }
    }

    pub fn validate(&self) -> Result<(), KineticsError> {
        let v = [self.k1, self.k2, self.k3, self.k4];
        if v.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(KineticsError::InvalidParams(format!(
                "rate constants must be finite and >= 0, got {v:?}"
            )));
        }
        Ok(())
    }
}

/// Recovery and spillover coefficients linking true curves to measured ones.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeasurementParams {
    /// Blood recovery in the IDIF.
    pub rc: f64,
    /// Tissue-to-blood spillover into the IDIF.
    pub sp_bt: f64,
    /// Blood-to-tissue spillover into the tissue curve.
    pub sp_tb: f64,
    /// Tissue blood-volume fraction.
    pub vb: f64,
}

/// The 15-parameter corrected-input model: 7 input shape, 4 kinetic, 4 measurement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McifParams {
    pub feng: FengParams,
    pub tissue: TwoTissueParams,
    pub meas: MeasurementParams,
}

pub const N_PARAMS: usize = 15;

pub const PARAM_NAMES: [&str; N_PARAMS] = [
    "a1", "a2", "a3", "lambda1", "lambda2", "lambda3", "tau", "K1", "k2", "k3", "k4", "rc",
    "sp_bt", "sp_tb", "vb",
];

pub(crate) const IDX_RC: usize = 11;
pub(crate) const IDX_SP_BT: usize = 12;

impl McifParams {
    pub fn to_array(&self) -> [f64; N_PARAMS] {
        let f = &self.feng;
        let k = &self.tissue;
        let m = &self.meas;
        [
            f.a1, f.a2, f.a3, f.lambda1, f.lambda2, f.lambda3, f.tau, k.k1, k.k2, k.k3, k.k4, m.rc,
            m.sp_bt, m.sp_tb, m.vb,
        ]
    }

    pub fn from_array(v: &[f64; N_PARAMS]) -> Self {
        Self {
            feng: FengParams {
                a1: v[0],
                a2: v[1],
                a3: v[2],
                lambda1: v[3],
                lambda2: v[4],
                lambda3: v[5],
                tau: v[6],
            },
            tissue: TwoTissueParams::new(v[7], v[8], v[9], v[10]),
            meas: MeasurementParams {
                rc: v[11],
                sp_bt: v[12],
                sp_tb: v[13],
                vb: v[14],
            },
        }
    }
}
