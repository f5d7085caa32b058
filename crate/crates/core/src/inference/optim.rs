//! Derivative-free maximization of the hyperparameter log-posterior:
//! Nelder-Mead simplex search with one refinement restart, followed by a
//! central finite-difference Hessian with PD repair.

use nalgebra::DMatrix;

use crate::error::Error;
use crate::latent::HyperVector;
use crate::Result;

use super::laplace::Engine;

/// Simplex-search settings. `hessian_step` is the central-difference step
/// for the curvature at the mode.
#[derive(Debug, Clone)]
pub struct OptimOptions {
    pub initial_step: f64,
    pub f_tol: f64,
    pub max_evals: usize,
    pub hessian_step: f64,
    pub hessian_floor: f64,
}

impl Default for OptimOptions {
    fn default() -> Self {
        Self {
            initial_step: 0.5,
            f_tol: 1e-9,
            max_evals: 4000,
            hessian_step: 0.005,
            hessian_floor: 1e-6,
        }
    }
}

/// Nelder-Mead maximization of `f`. Rejected points may return -inf; the
/// search is comparison-based, so adding any constant to `f` leaves the
/// trajectory unchanged.
pub fn nelder_mead(
    f: &dyn Fn(&[f64]) -> f64,
    x0: &[f64],
    step: f64,
    f_tol: f64,
    max_evals: usize,
) -> (Vec<f64>, f64, usize) {
    let p = x0.len();
    let evals = std::cell::Cell::new(0usize);
    let eval = |x: &[f64]| -> f64 {
        evals.set(evals.get() + 1);
        let v = f(x);
        if v.is_nan() {
            f64::NEG_INFINITY
        } else {
            v
        }
    };

    // initial simplex: x0 plus one step along each coordinate
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(p + 1);
    let f0 = eval(x0);
    simplex.push((x0.to_vec(), f0));
    for j in 0..p {
        let mut x = x0.to_vec();
        x[j] += step;
        let fx = eval(&x);
        simplex.push((x, fx));
    }

    let (alpha, gamma, rho, sigma) = (1.0, 2.0, 0.5, 0.5);
    while evals.get() < max_evals {
        // descending by value: best first (maximization)
        simplex.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal));
        // absolute spread: exact shift invariance of the stopping rule
        let best = simplex[0].1;
        let worst = simplex[p].1;
        if best.is_finite() && worst.is_finite() && (best - worst).abs() < f_tol {
            break;
        }

        let centroid: Vec<f64> = (0..p)
            .map(|j| simplex[..p].iter().map(|(x, _)| x[j]).sum::<f64>() / p as f64)
            .collect();
        let reflect: Vec<f64> = (0..p)
            .map(|j| centroid[j] + alpha * (centroid[j] - simplex[p].0[j]))
            .collect();
        let f_reflect = eval(&reflect);

        if f_reflect > simplex[0].1 {
            // expansion
            let expand: Vec<f64> = (0..p)
                .map(|j| centroid[j] + gamma * (reflect[j] - centroid[j]))
                .collect();
            let f_expand = eval(&expand);
            simplex[p] = if f_expand > f_reflect {
                (expand, f_expand)
            } else {
                (reflect, f_reflect)
            };
        } else if f_reflect > simplex[p - 1].1 {
            simplex[p] = (reflect, f_reflect);
        } else {
            // contraction toward the better of worst/reflected
            let (anchor, f_anchor): (Vec<f64>, f64) = if f_reflect > simplex[p].1 {
                (reflect.clone(), f_reflect)
            } else {
                (simplex[p].0.clone(), simplex[p].1)
            };
            let contract: Vec<f64> = (0..p)
                .map(|j| centroid[j] + rho * (anchor[j] - centroid[j]))
                .collect();
            let f_contract = eval(&contract);
            if f_contract > f_anchor {
                simplex[p] = (contract, f_contract);
            } else {
                // shrink toward the best vertex
                let best_x = simplex[0].0.clone();
                for vertex in simplex.iter_mut().skip(1) {
                    for j in 0..p {
                        vertex.0[j] = best_x[j] + sigma * (vertex.0[j] - best_x[j]);
                    }
                    vertex.1 = eval(&vertex.0);
                    if evals.get() >= max_evals {
                        break;
                    }
                }
            }
        }
    }
    simplex.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal));
    let (x_best, f_best) = simplex.swap_remove(0);
    let used = evals.get();
    (x_best, f_best, used)
}

/// Maximize the Laplace log-posterior over internal hyperparameters and
/// return the mode with the PD-repaired Hessian of the negative
/// log-posterior.
pub fn optimize_hyper(
    engine: &Engine,
    theta_init: &HyperVector,
    options: &OptimOptions,
) -> Result<(HyperVector, DMatrix<f64>)> {
    let objective = |x: &[f64]| -> f64 {
        if x.iter().any(|v| !v.is_finite()) {
            return f64::NEG_INFINITY;
        }
        engine.log_post(&HyperVector::from_unchecked(x.to_vec()))
    };

    let f_init = objective(theta_init.values());
    if !f_init.is_finite() {
        return Err(Error::OptimizationFailure(
            "log-posterior is invalid at the starting point".into(),
        ));
    }

    let p = theta_init.len();
    let budget = options.max_evals.max(60 * p);
    let (stage1, f1, used) = nelder_mead(
        &objective,
        theta_init.values(),
        options.initial_step,
        options.f_tol,
        budget,
    );
    // refinement restart with a smaller simplex around the found point
    let (stage2, f2, _) = nelder_mead(
        &objective,
        &stage1,
        options.initial_step * 0.2,
        options.f_tol,
        budget.saturating_sub(used).max(40 * p),
    );
    let (x_mode, f_mode) = if f2 > f1 { (stage2, f2) } else { (stage1, f1) };
    if !f_mode.is_finite() {
        return Err(Error::OptimizationFailure(
            "no valid point found by the simplex search".into(),
        ));
    }

    let hessian = fd_hessian(&objective, &x_mode, options.hessian_step, options.hessian_floor)?;
    Ok((HyperVector::from_unchecked(x_mode), hessian))
}

/// Central-difference Hessian of -f, symmetrized and PD-repaired by
/// flooring eigenvalues.
pub fn fd_hessian(
    f: &dyn Fn(&[f64]) -> f64,
    x: &[f64],
    step: f64,
    floor: f64,
) -> Result<DMatrix<f64>> {
    let p = x.len();
    let f0 = f(x);
    let mut h = DMatrix::zeros(p, p);
    let probe = |offsets: &[(usize, f64)]| -> f64 {
        let mut y = x.to_vec();
        for &(j, d) in offsets {
            y[j] += d;
        }
        f(&y)
    };
    for i in 0..p {
        let fp = probe(&[(i, step)]);
        let fm = probe(&[(i, -step)]);
        h[(i, i)] = -(fp - 2.0 * f0 + fm) / (step * step);
        for j in 0..i {
            let fpp = probe(&[(i, step), (j, step)]);
            let fpm = probe(&[(i, step), (j, -step)]);
            let fmp = probe(&[(i, -step), (j, step)]);
            let fmm = probe(&[(i, -step), (j, -step)]);
            let v = -(fpp - fpm - fmp + fmm) / (4.0 * step * step);
            h[(i, j)] = v;
            h[(j, i)] = v;
        }
    }
    if h.iter().any(|v| !v.is_finite()) {
        return Err(Error::OptimizationFailure(
            "non-finite Hessian near the mode (rejected probe points)".into(),
        ));
    }
    // symmetrize and floor eigenvalues
    let sym = (h.clone() + h.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let mut rebuilt = DMatrix::zeros(p, p);
    for (idx, &lambda) in eig.eigenvalues.iter().enumerate() {
        let lam = lambda.max(floor);
        let v = eig.eigenvectors.column(idx);
        rebuilt += v * v.transpose() * lam;
    }
    Ok(rebuilt)
}
