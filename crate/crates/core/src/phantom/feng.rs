//! Tri-exponential blood input with a linear rise (Feng-style).

use serde::{Deserialize, Serialize};

/// Seven-parameter analytic plasma input.
///
/// `cp(t) = (a1·s − a2 − a3)·e^{λ1 s} + a2·e^{λ2 s} + a3·e^{λ3 s}` with
/// `s = t − tau`, and zero for `t <= tau`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FengParams {
    /// kBq/mL/min
    pub a1: f64,
    /// kBq/mL
    pub a2: f64,
    /// kBq/mL
    pub a3: f64,
    /// min⁻¹
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    /// onset delay, min
    pub tau: f64,
}

impl Default for FengParams {
    /// Classic FDG plasma curve with a 30 s injection delay.
    fn default() -> Self {
        Self {
            a1: 851.1225,
            a2: 21.8798,
            a3: 20.8113,
            lambda1: -4.133859,
            lambda2: -0.1190996,
            lambda3: -0.01043449,
            tau: 0.5,
        }
    }
}

impl FengParams {
    pub fn validate(&self) -> Result<(), String> {
        let all = [
            self.a1,
            self.a2,
            self.a3,
            self.lambda1,
            self.lambda2,
            self.lambda3,
            self.tau,
        ];
        if all.iter().any(|v| !v.is_finite()) {
            return Err("Feng parameters must be finite".into());
        }
        if !(self.lambda1 < self.lambda2 && self.lambda2 < self.lambda3 && self.lambda3 < 0.0) {
            return Err(format!(
                "need lambda1 < lambda2 < lambda3 < 0, got {}, {}, {}",
                self.lambda1, self.lambda2, self.lambda3
            ));
        }
        if self.a1 <= 0.0 {
            return Err(format!("a1 must be > 0, got {}", self.a1));
        }
        if self.a2 < 0.0 || self.a3 < 0.0 {
            return Err("a2 and a3 must be >= 0".into());
        }
        if self.tau < 0.0 {
            return Err(format!("tau must be >= 0, got {}", self.tau));
        }
        Ok(())
    }
}

/// Plasma concentration (kBq/mL) at `t` minutes.
pub fn feng_input(p: &FengParams, t: f64) -> f64 {
    let s = t - p.tau;
    if s <= 0.0 {
        return 0.0;
    }
    let e1 = (p.lambda1 * s).exp();
    // rearranged so every term is nonnegative when lambda1 is the fastest rate
    p.a1 * s * e1 + p.a2 * ((p.lambda2 * s).exp() - e1) + p.a3 * ((p.lambda3 * s).exp() - e1)
}

pub fn feng_curve(p: &FengParams, times: &[f64]) -> Vec<f64> {
    times.iter().map(|&t| feng_input(p, t)).collect()
}
