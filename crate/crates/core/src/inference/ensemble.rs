//! Hyperparameter-posterior exploration and weighted-ensemble summaries:
//! the mode plus axis points along Hessian eigendirections, weighted by
//! rescaled log-posterior densities.

use nalgebra::DMatrix;
use rand::RngExt;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::latent::{HyperVector, LatentModel};
use crate::Result;

use super::laplace::{Engine, LaplaceEval};

/// Exploration designs for the hyperparameter posterior.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExploreMode {
    /// Only the posterior mode (fast, underestimates hyperparameter
    /// uncertainty).
    ModeOnly,
    /// Mode plus one-posterior-sd steps along each Hessian eigendirection:
    /// 2p + 1 points.
    Axis,
}

/// Evaluated hyperparameter points with softmax weights; the basis of every
/// posterior summary.
pub struct Ensemble {
    pub evals: Vec<LaplaceEval>,
    pub weights: Vec<f64>,
}

impl Ensemble {
    /// Indices of points with nonzero weight.
    pub fn active(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.weights
            .iter()
            .enumerate()
            .filter(|(_, &w)| w > 0.0)
            .map(|(i, &w)| (i, w))
    }
}

/// Exploration points: the mode, then +-(1/sqrt(lambda_j)) v_j along each
/// eigenpair of the Hessian of the negative log-posterior.
pub fn ensemble_points(theta_mode: &[f64], hessian: &DMatrix<f64>, delta: f64) -> Vec<Vec<f64>> {
    let p = theta_mode.len();
    let mut points = Vec::with_capacity(2 * p + 1);
    points.push(theta_mode.to_vec());
    let eig = hessian.clone().symmetric_eigen();
    for j in 0..p {
        let lambda = eig.eigenvalues[j].max(f64::MIN_POSITIVE);
        let scale = delta / lambda.sqrt();
        for sign in [1.0, -1.0] {
            let point: Vec<f64> = (0..p)
                .map(|i| theta_mode[i] + sign * scale * eig.eigenvectors[(i, j)])
                .collect();
            points.push(point);
        }
    }
    points
}

/// Normalized exponentials of log-posterior values, invariant to additive
/// shifts; -inf values get weight zero.
pub fn softmax_weights(log_posts: &[f64]) -> Vec<f64> {
    let max = log_posts
        .iter()
        .copied()
        .filter(|v| v.is_finite())
        .fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return vec![0.0; log_posts.len()];
    }
    let raw: Vec<f64> = log_posts
        .iter()
        .map(|&lp| if lp.is_finite() { (lp - max).exp() } else { 0.0 })
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

/// Evaluate the exploration design (in parallel; results are ordered, so
/// the outcome is deterministic).
pub fn explore_ensemble(
    engine: &Engine,
    theta_mode: &HyperVector,
    hessian: &DMatrix<f64>,
    mode: ExploreMode,
) -> Result<Ensemble> {
    let points = match mode {
        ExploreMode::ModeOnly => vec![theta_mode.values().to_vec()],
        ExploreMode::Axis => ensemble_points(theta_mode.values(), hessian, 1.0),
    };
    let evals: Vec<LaplaceEval> = points
        .par_iter()
        .map(|p| engine.gaussian_approx(&HyperVector::from_unchecked(p.clone())))
        .collect();
    let weights = softmax_weights(&evals.iter().map(|e| e.log_post).collect::<Vec<_>>());
    Ok(Ensemble { evals, weights })
}

/// Mean, sd and ensemble quantiles of one scalar parameter.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamSummary {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
    pub q025: f64,
    pub q500: f64,
    pub q975: f64,
}

fn weighted_summary(name: &str, values: &[f64], weights: &[f64]) -> ParamSummary {
    let mean: f64 = values.iter().zip(weights).map(|(v, w)| v * w).sum();
    let var: f64 = values
        .iter()
        .zip(weights)
        .map(|(v, w)| w * (v - mean) * (v - mean))
        .sum();
    let (q025, q500, q975) = weighted_quantiles(values, weights);
    ParamSummary {
        name: name.to_string(),
        mean,
        sd: var.max(0.0).sqrt(),
        q025,
        q500,
        q975,
    }
}

fn weighted_quantiles(values: &[f64], weights: &[f64]) -> (f64, f64, f64) {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap_or(std::cmp::Ordering::Equal));
    let pick = |q: f64| -> f64 {
        let mut acc = 0.0;
        for &i in &order {
            acc += weights[i];
            if acc >= q {
                return values[i];
            }
        }
        values[*order.last().expect("nonempty ensemble")]
    };
    (pick(0.025), pick(0.5), pick(0.975))
}

/// Weighted internal- and natural-scale summaries plus the posterior mean
/// of the between-variable covariance. Natural summaries transform each
/// ensemble point and then weight (never the reverse).
pub fn summarize_hyper(
    ensemble: &Ensemble,
    model: &LatentModel,
) -> Result<(Vec<ParamSummary>, Vec<ParamSummary>, DMatrix<f64>)> {
    let p = model.theta_dim();
    let k = model.n_variables();
    let active: Vec<(usize, f64)> = ensemble.active().collect();
    let weights: Vec<f64> = active.iter().map(|&(_, w)| w).collect();

    let mut internal = Vec::with_capacity(p);
    let theta_names = model.theta_names();
    for (j, name) in theta_names.iter().enumerate() {
        let values: Vec<f64> = active
            .iter()
            .map(|&(i, _)| ensemble.evals[i].theta.values()[j])
            .collect();
        internal.push(weighted_summary(name, &values, &weights));
    }

    let natural_points: Vec<Vec<f64>> = active
        .iter()
        .map(|&(i, _)| model.natural_coordinates(&ensemble.evals[i].theta))
        .collect();
    let mut natural = Vec::with_capacity(p);
    for (j, name) in model.natural_names().iter().enumerate() {
        let values: Vec<f64> = natural_points.iter().map(|v| v[j]).collect();
        natural.push(weighted_summary(name, &values, &weights));
    }

    let mut between = DMatrix::zeros(k, k);
    for &(i, w) in &active {
        let cov = model.to_natural(&ensemble.evals[i].theta)?.between_cov;
        between += cov * w;
    }
    Ok((internal, natural, between))
}

/// Posterior summaries of the fixed effects (intercepts and covariate
/// coefficients): a weighted mixture of the per-point Gaussians.
pub fn summarize_fixed(
    ensemble: &Ensemble,
    names: &[String],
    seed: u64,
    n_draws: usize,
) -> Vec<ParamSummary> {
    let active: Vec<(usize, f64)> = ensemble.active().collect();
    names
        .iter()
        .enumerate()
        .map(|(f, name)| {
            let comps: Vec<(f64, f64, f64)> = active
                .iter()
                .map(|&(i, w)| {
                    let e = &ensemble.evals[i];
                    (w, e.fixed_mean[f], e.fixed_var[f].max(0.0).sqrt())
                })
                .collect();
            let mean: f64 = comps.iter().map(|&(w, m, _)| w * m).sum();
            let second: f64 = comps.iter().map(|&(w, m, s)| w * (m * m + s * s)).sum();
            let sd = (second - mean * mean).max(0.0).sqrt();
            let draws = mixture_normal_draws(&comps, seed ^ hash_index(900_000 + f), n_draws);
            let (q025, q500, q975) = sorted_quantiles(draws);
            ParamSummary {
                name: name.clone(),
                mean,
                sd,
                q025,
                q500,
                q975,
            }
        })
        .collect()
}

/// Per-cell relative-risk summaries. Each linear predictor is a weighted
/// mixture of Gaussians; risks are log-normal per component (moments in
/// closed form), with quantiles from fixed-seed sampling of the mixture.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FittedCell {
    pub region: usize,
    pub variable: String,
    pub mean: f64,
    pub sd: f64,
    pub q025: f64,
    pub q500: f64,
    pub q975: f64,
}

pub fn summarize_latent(
    ensemble: &Ensemble,
    offsets: &[f64],
    variables: &[String],
    n_regions: usize,
    seed: u64,
    n_draws: usize,
) -> Vec<FittedCell> {
    let active: Vec<(usize, f64)> = ensemble.active().collect();
    let n_cells = offsets.len();
    (0..n_cells)
        .into_par_iter()
        .map(|r| {
            // log-risk components: predictor minus offset
            let comps: Vec<(f64, f64, f64)> = active
                .iter()
                .map(|&(i, w)| {
                    let e = &ensemble.evals[i];
                    (
                        w,
                        e.predictor_mean[r] - offsets[r],
                        e.predictor_var[r].max(0.0).sqrt(),
                    )
                })
                .collect();
            let mean: f64 = comps
                .iter()
                .map(|&(w, m, s)| w * (m + 0.5 * s * s).exp())
                .sum();
            let second: f64 = comps
                .iter()
                .map(|&(w, m, s)| w * (2.0 * m + 2.0 * s * s).exp())
                .sum();
            let sd = (second - mean * mean).max(0.0).sqrt();
            let draws: Vec<f64> = mixture_normal_draws(&comps, seed ^ hash_index(r), n_draws)
                .into_iter()
                .map(f64::exp)
                .collect();
            let (q025, q500, q975) = sorted_quantiles(draws);
            FittedCell {
                region: r % n_regions + 1,
                variable: variables[r / n_regions].clone(),
                mean,
                sd,
                q025,
                q500,
                q975,
            }
        })
        .collect()
}

/// Deterministic draws from a mixture of normals given as (weight, mean, sd).
pub fn mixture_normal_draws(comps: &[(f64, f64, f64)], seed: u64, n: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cumulative = Vec::with_capacity(comps.len());
    let mut acc = 0.0;
    for &(w, _, _) in comps {
        acc += w;
        cumulative.push(acc);
    }
    (0..n)
        .map(|_| {
            let u: f64 = rng.random_range(0.0..1.0);
            let idx = cumulative
                .iter()
                .position(|&c| u <= c)
                .unwrap_or(comps.len() - 1);
            let (_, m, s) = comps[idx];
            let z: f64 = rng.sample(StandardNormal);
            m + s * z
        })
        .collect()
}

fn sorted_quantiles(mut draws: Vec<f64>) -> (f64, f64, f64) {
    draws.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let n = draws.len();
    let pick = |q: f64| draws[(((n as f64) * q) as usize).min(n - 1)];
    (pick(0.025), pick(0.5), pick(0.975))
}

fn hash_index(i: usize) -> u64 {
    (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axis_design_size_and_symmetry() {
        let h = DMatrix::from_row_slice(2, 2, &[4.0, 0.0, 0.0, 1.0]);
        let points = ensemble_points(&[1.0, -1.0], &h, 1.0);
        assert_eq!(points.len(), 5);
        // pairs are symmetric about the mode
        for pair in [(1usize, 2usize), (3, 4)] {
            for j in 0..2 {
                let lo = points[pair.0][j] - 1.0 * if j == 0 { 1.0 } else { -1.0 };
                let hi = points[pair.1][j] - 1.0 * if j == 0 { 1.0 } else { -1.0 };
                assert!((lo + hi).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_weights_sum_to_one_and_shift_invariant() {
        let w1 = softmax_weights(&[-3.0, -4.0, f64::NEG_INFINITY]);
        assert!((w1.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(w1[2], 0.0);
        let w2 = softmax_weights(&[97.0, 96.0, f64::NEG_INFINITY]);
        for (a, b) in w1.iter().zip(&w2) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn equal_log_posts_get_equal_weights() {
        let w = softmax_weights(&[-5.0, -5.0, -5.0]);
        for &x in &w {
            assert!((x - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn mixture_moments_match_monte_carlo() {
        // two known components
        let comps = [(0.3, 0.0, 0.5), (0.7, 1.0, 0.2)];
        let draws = mixture_normal_draws(&comps, 42, 1_000_000);
        let risk: Vec<f64> = draws.iter().map(|&x| x.exp()).collect();
        let mc_mean = risk.iter().sum::<f64>() / risk.len() as f64;
        let analytic: f64 = comps
            .iter()
            .map(|&(w, m, s)| w * (m + 0.5 * s * s).exp())
            .sum();
        assert!(
            (mc_mean - analytic).abs() / analytic < 0.005,
            "mc {mc_mean} vs analytic {analytic}"
        );
    }

    #[test]
    fn weighted_quantiles_single_point() {
        let s = weighted_summary("x", &[2.5], &[1.0]);
        assert_eq!(s.mean, 2.5);
        assert_eq!(s.sd, 0.0);
        assert_eq!(s.q025, 2.5);
        assert_eq!(s.q975, 2.5);
    }
}
