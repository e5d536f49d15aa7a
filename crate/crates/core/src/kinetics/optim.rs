//! Box-constrained local optimizers on the unit cube `[0, 1]^d`.
//!
//! Callers map their physical bounds onto the cube. Both routines only accept
//! strictly improving points, so the recorded loss trajectory never increases.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;

#[derive(Debug, Clone)]
pub struct LocalResult {
    pub x: Vec<f64>,
    pub f: f64,
    /// Best loss after every accepted improvement, starting with the initial loss.
    pub trajectory: Vec<f64>,
    pub evals: usize,
    pub converged: bool,
}

#[inline]
fn clamp_unit(x: &mut [f64]) {
    for v in x {
        *v = v.clamp(0.0, 1.0);
    }
}

/// Latin-hypercube sample of `n` points in `[0, 1]^d`.
pub fn latin_hypercube<R: Rng>(n: usize, d: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let mut pts = vec![vec![0.0; d]; n];
    let mut strata: Vec<usize> = (0..n).collect();
    for j in 0..d {
        strata.shuffle(rng);
        for (i, p) in pts.iter_mut().enumerate() {
            p[j] = (strata[i] as f64 + rng.random::<f64>()) / n as f64;
        }
    }
    pts
}

/// Nelder–Mead with adaptive coefficients; trial points are projected onto the box.
///
/// Stops when the simplex loss spread falls below `ftol·(|f_best| + tiny)` or
/// after `max_evals` evaluations.
pub fn nelder_mead_box<F>(
    mut f: F,
    x0: &[f64],
    step: f64,
    max_evals: usize,
    ftol: f64,
) -> LocalResult
where
    F: FnMut(&[f64]) -> f64,
{
    let d = x0.len();
    let n = d as f64;
    let (alpha, gamma, rho, sigma) = (1.0, 1.0 + 2.0 / n, 0.75 - 0.5 / n, 1.0 - 1.0 / n);

    let mut x_start = x0.to_vec();
    clamp_unit(&mut x_start);
    let mut evals = 0usize;
    let mut eval = |x: &[f64], evals: &mut usize| {
        *evals += 1;
        let v = f(x);
        if v.is_finite() {
            v
        } else {
            f64::INFINITY
        }
    };

    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(d + 1);
    let f0 = eval(&x_start, &mut evals);
    simplex.push((x_start.clone(), f0));
    for j in 0..d {
        let mut v = x_start.clone();
        v[j] = if v[j] + step <= 1.0 {
            v[j] + step
        } else {
            v[j] - step
        };
        let fv = eval(&v, &mut evals);
        simplex.push((v, fv));
    }
    let mut trajectory = vec![f0];
    let mut best = f0;
    let mut converged = false;

    while evals < max_evals {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        if simplex[0].1 < best {
            best = simplex[0].1;
            trajectory.push(best);
        }
        let spread = simplex[d].1 - simplex[0].1;
        if spread <= ftol * (simplex[0].1.abs() + 1e-300) {
            converged = true;
            break;
        }
        let mut centroid = vec![0.0; d];
        for (v, _) in &simplex[..d] {
            for (c, x) in centroid.iter_mut().zip(v) {
                *c += x / n;
            }
        }
        let along = |coef: f64| -> Vec<f64> {
            let mut p: Vec<f64> = centroid
                .iter()
                .zip(&simplex[d].0)
                .map(|(c, w)| c + coef * (c - w))
                .collect();
            clamp_unit(&mut p);
            p
        };
        let xr = along(alpha);
        let fr = eval(&xr, &mut evals);
        if fr < simplex[0].1 {
            let xe = along(gamma);
            let fe = eval(&xe, &mut evals);
            simplex[d] = if fe < fr { (xe, fe) } else { (xr, fr) };
        } else if fr < simplex[d - 1].1 {
            simplex[d] = (xr, fr);
        } else {
            let (xc, fc) = if fr < simplex[d].1 {
                let xc = along(rho);
                let fc = eval(&xc, &mut evals);
                (xc, fc)
            } else {
                let xc = along(-rho);
                let fc = eval(&xc, &mut evals);
                (xc, fc)
            };
            if fc < fr.min(simplex[d].1) {
                simplex[d] = (xc, fc);
            } else {
                let x_best = simplex[0].0.clone();
                for (v, fv) in simplex.iter_mut().skip(1) {
                    for (vi, bi) in v.iter_mut().zip(&x_best) {
                        *vi = bi + sigma * (*vi - bi);
                    }
                    *fv = eval(v, &mut evals);
                }
            }
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    if simplex[0].1 < best {
        trajectory.push(simplex[0].1);
    }
    let (x, fx) = simplex.swap_remove(0);
    LocalResult {
        x,
        f: fx,
        trajectory,
        evals,
        converged,
    }
}

/// Projected Levenberg–Marquardt on a residual function with a forward-difference
/// Jacobian. Coordinates pinned at a bound with the gradient pushing outward are
/// held fixed for the step.
///
/// Converges when an accepted step lowers the loss by less than `rel_tol`
/// relatively, when the projected gradient vanishes, or when no damping level
/// yields a decrease. Running out of `max_evals` leaves `converged = false`.
pub fn levenberg_marquardt_box<R>(
    mut residuals: R,
    n_res: usize,
    x0: &[f64],
    max_evals: usize,
    rel_tol: f64,
) -> LocalResult
where
    R: FnMut(&[f64], &mut [f64]),
{
    const FD_STEP: f64 = 1e-7;
    let d = x0.len();
    let mut x = x0.to_vec();
    clamp_unit(&mut x);
    let mut r = vec![0.0; n_res];
    let mut r_try = vec![0.0; n_res];
    let sq = |r: &[f64]| {
        let s: f64 = r.iter().map(|v| v * v).sum();
        if s.is_finite() {
            s
        } else {
            f64::INFINITY
        }
    };
    residuals(&x, &mut r);
    let mut evals = 1usize;
    let mut f = sq(&r);
    let mut trajectory = vec![f];
    let mut mu = 1e-3;
    let mut converged = false;
    let mut jac = DMatrix::<f64>::zeros(n_res, d);
    let mut x_probe = x.clone();

    'outer: while evals + d < max_evals {
        if f == 0.0 {
            converged = true;
            break;
        }
        for j in 0..d {
            let h = if x[j] + FD_STEP <= 1.0 {
                FD_STEP
            } else {
                -FD_STEP
            };
            x_probe.copy_from_slice(&x);
            x_probe[j] += h;
            residuals(&x_probe, &mut r_try);
            for i in 0..n_res {
                jac[(i, j)] = (r_try[i] - r[i]) / h;
            }
        }
        evals += d;
        let rv = DVector::from_column_slice(&r);
        let g = jac.tr_mul(&rv);
        let a = jac.tr_mul(&jac);
        let free: Vec<usize> = (0..d)
            .filter(|&j| !((x[j] <= 0.0 && g[j] > 0.0) || (x[j] >= 1.0 && g[j] < 0.0)))
            .collect();
        if free.is_empty() || free.iter().all(|&j| g[j].abs() <= 1e-300) {
            converged = true;
            break;
        }
        let nf = free.len();
        let diag_floor = free.iter().map(|&j| a[(j, j)]).fold(0.0, f64::max) * 1e-12 + 1e-300;
        loop {
            if evals >= max_evals {
                break 'outer;
            }
            let mut m = DMatrix::<f64>::zeros(nf, nf);
            let mut rhs = DVector::<f64>::zeros(nf);
            for (p, &jp) in free.iter().enumerate() {
                rhs[p] = -g[jp];
                for (q, &jq) in free.iter().enumerate() {
                    m[(p, q)] = a[(jp, jq)];
                }
                m[(p, p)] += mu * a[(jp, jp)].max(diag_floor);
            }
            let step = m.cholesky().map(|c| c.solve(&rhs));
            let Some(step) = step else {
                mu *= 4.0;
                if mu > 1e16 {
                    converged = true;
                    break 'outer;
                }
                continue;
            };
            x_probe.copy_from_slice(&x);
            for (p, &jp) in free.iter().enumerate() {
                x_probe[jp] += step[p];
            }
            clamp_unit(&mut x_probe);
            residuals(&x_probe, &mut r_try);
            evals += 1;
            let f_try = sq(&r_try);
            if f_try < f {
                let rel = (f - f_try) / f;
                x.copy_from_slice(&x_probe);
                std::mem::swap(&mut r, &mut r_try);
                f = f_try;
                trajectory.push(f);
                mu = (mu / 3.0).max(1e-12);
                if rel < rel_tol {
                    converged = true;
                    break 'outer;
                }
                break;
            }
            mu *= 4.0;
            if mu > 1e16 {
                converged = true;
                break 'outer;
            }
        }
    }
    LocalResult {
        x,
        f,
        trajectory,
        evals,
        converged,
    }
}
