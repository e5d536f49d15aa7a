//! Forward model linking the true plasma input to the two measured curves.

use super::{solve_2tc_values, KineticsError, McifParams};
use crate::phantom::feng_curve;
use crate::volume::Tac;

/// Model curves on the frame grid.
#[derive(Debug, Clone)]
pub struct Observations {
    /// True plasma input.
    pub cp: Tac,
    /// Tissue concentration from the two-tissue model.
    pub ct: Tac,
    /// Predicted image-derived input.
    pub idif: Tac,
    /// Predicted peri-carotid tissue curve.
    pub tissue: Tac,
}

/// Plain-vector core of [`model_observations`]: `(cp, ct, idif, tissue)`.
///
/// `idif = rc·cp + sp_bt·ct` and
/// `tissue = max(0, (1 − vb)·ct + vb·cp + sp_tb·(cp − ct))`.
pub fn model_values(p: &McifParams, times: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
    let cp = feng_curve(&p.feng, times);
    let (c1, c2) = solve_2tc_values(&p.tissue, times, &cp);
    let ct: Vec<f64> = c1.iter().zip(&c2).map(|(a, b)| a + b).collect();
    let m = &p.meas;
    let idif = cp
        .iter()
        .zip(&ct)
        .map(|(&b, &t)| m.rc * b + m.sp_bt * t)
        .collect();
    let tissue = cp
        .iter()
        .zip(&ct)
        .map(|(&b, &t)| ((1.0 - m.vb) * t + m.vb * b + m.sp_tb * (b - t)).max(0.0))
        .collect();
    (cp, ct, idif, tissue)
}

pub fn model_observations(p: &McifParams, grid: &[f64]) -> Result<Observations, KineticsError> {
    p.feng.validate().map_err(KineticsError::InvalidParams)?;
    p.tissue.validate()?;
    let (cp, ct, idif, tissue) = model_values(p, grid);
    let mk = |v: Vec<f64>| {
        Tac::new(grid.to_vec(), v).map_err(|e| KineticsError::InvalidGrid(e.to_string()))
    };
    Ok(Observations {
        cp: mk(cp)?,
        ct: mk(ct)?,
        idif: mk(idif)?,
        tissue: mk(tissue)?,
    })
}
