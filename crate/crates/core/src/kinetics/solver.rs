//! Analytic two-tissue compartment solver.
//!
//! The plasma input is taken as piecewise linear between samples, starting
//! from `cp(0) = 0`. Each compartment is a combination of convolutions
//! `e^{-αt} ⊗ cp`, which are integrated exactly segment by segment.

use super::{KineticsError, TwoTissueParams};
use crate::volume::Tac;

pub struct Compartments {
    pub c1: Tac,
    pub c2: Tac,
    pub ct: Tac,
}

fn check_grid(times: &[f64], values: &[f64]) -> Result<(), KineticsError> {
    if times.is_empty() {
        return Err(KineticsError::InvalidGrid("empty grid".into()));
    }
    if times.len() != values.len() {
        return Err(KineticsError::InvalidGrid(format!(
            "{} times vs {} values",
            times.len(),
            values.len()
        )));
    }
    if !(times[0] >= 0.0) {
        return Err(KineticsError::InvalidGrid(format!(
            "first time {} is negative",
            times[0]
        )));
    }
    if times.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(KineticsError::InvalidGrid(
            "times not strictly increasing".into(),
        ));
    }
    Ok(())
}

/// `∫_0^d e^{-α(d-s)} (c0 + m s) ds`.
#[inline]
fn segment_integral(alpha: f64, d: f64, c0: f64, m: f64) -> f64 {
    let x = alpha * d;
    if x.abs() < 1e-3 {
        // series keeps the cancellation in check for slow rates
        let x2 = x * x;
        let a = d * (1.0 - x / 2.0 + x2 / 6.0 - x2 * x / 24.0 + x2 * x2 / 120.0);
        let b = d * d * (0.5 - x / 6.0 + x2 / 24.0 - x2 * x / 120.0 + x2 * x2 / 720.0);
        c0 * a + m * b
    } else {
        let one_minus_e = -(-x).exp_m1();
        c0 * one_minus_e / alpha + m * (d - one_minus_e / alpha) / alpha
    }
}

/// `(e^{-αt} ⊗ cp)(t_i)` for every grid time, exact for piecewise-linear cp.
pub fn exp_convolution(alpha: f64, times: &[f64], cp: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(times.len());
    let (mut t_prev, mut c_prev, mut acc) = (0.0, 0.0, 0.0);
    for (&t, &c) in times.iter().zip(cp) {
        let d = t - t_prev;
        if d > 0.0 {
            let m = (c - c_prev) / d;
            acc = (-alpha * d).exp() * acc + segment_integral(alpha, d, c_prev, m);
        }
        out.push(acc);
        t_prev = t;
        c_prev = c;
    }
    out
}

/// Returns `(c1, c2)` on the grid. Inputs are assumed validated.
pub fn solve_2tc_values(k: &TwoTissueParams, times: &[f64], cp: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = times.len();
    if k.k1 == 0.0 {
        return (vec![0.0; n], vec![0.0; n]);
    }
    let s = k.k2 + k.k3 + k.k4;
    // s² − 4·k2·k4 written as a sum of nonnegative terms
    let disc = ((k.k2 - k.k4).powi(2) + k.k3 * k.k3 + 2.0 * k.k3 * (k.k2 + k.k4)).sqrt();
    if k.k3 == 0.0 || disc <= 1e-12 * s {
        let e = exp_convolution(k.k2, times, cp);
        return (e.into_iter().map(|v| k.k1 * v).collect(), vec![0.0; n]);
    }
    let a2 = 0.5 * (s + disc);
    let a1 = 2.0 * k.k2 * k.k4 / (s + disc);
    let e1 = exp_convolution(a1, times, cp);
    let e2 = exp_convolution(a2, times, cp);
    let scale = k.k1 / (a2 - a1);
    let c1 = e1
        .iter()
        .zip(&e2)
        .map(|(&u, &v)| scale * ((k.k4 - a1) * u + (a2 - k.k4) * v))
        .collect();
    let c2 = e1
        .iter()
        .zip(&e2)
        .map(|(&u, &v)| scale * k.k3 * (u - v))
        .collect();
    (c1, c2)
}

/// Solves
/// `dC1/dt = K1·Cp − (k2+k3)·C1 + k4·C2`, `dC2/dt = k3·C1 − k4·C2`
/// with zero initial conditions, returning C1, C2 and CT = C1 + C2.
pub fn solve_2tc(k: &TwoTissueParams, cp: &Tac) -> Result<Compartments, KineticsError> {
    k.validate()?;
    check_grid(cp.times(), cp.values())?;
    let (c1, c2) = solve_2tc_values(k, cp.times(), cp.values());
    let ct: Vec<f64> = c1.iter().zip(&c2).map(|(a, b)| a + b).collect();
    let times = cp.times().to_vec();
    let mk = |v: Vec<f64>| {
        Tac::new(times.clone(), v).map_err(|e| KineticsError::InvalidGrid(e.to_string()))
    };
    Ok(Compartments {
        c1: mk(c1)?,
        c2: mk(c2)?,
        ct: mk(ct)?,
    })
}
