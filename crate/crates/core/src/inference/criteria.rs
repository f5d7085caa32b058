//! Deviance information criterion and Watanabe-Akaike information
//! criterion over the weighted-ensemble posterior.
//!
//! The posterior of each linear predictor is a weighted mixture of
//! Gaussians. DIC uses the saturated-reference Poisson deviance with
//! closed-form mixture moments; WAIC uses fixed-seed per-cell sampling of
//! the pointwise log predictive density.

use serde::{Deserialize, Serialize};

use crate::likelihood::{poisson_deviance, poisson_logpdf};

use super::ensemble::{mixture_normal_draws, Ensemble};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CriteriaSummary {
    pub dic: f64,
    pub dic_p_eff: f64,
    pub waic: f64,
    pub waic_p_eff: f64,
    /// Saturated-reference deviance at the posterior mean predictor.
    pub deviance_at_mean: f64,
    /// Posterior mean of the saturated-reference deviance.
    pub mean_deviance: f64,
}

/// Per-cell mixture components (weight, mean, sd) of the linear predictor.
fn predictor_components(ensemble: &Ensemble, cell: usize) -> Vec<(f64, f64, f64)> {
    ensemble
        .active()
        .map(|(i, w)| {
            let e = &ensemble.evals[i];
            (
                w,
                e.predictor_mean[cell],
                e.predictor_var[cell].max(0.0).sqrt(),
            )
        })
        .collect()
}

/// DIC = D(E[eta]) + 2 p_eff with p_eff = E[D] - D(E[eta]); expectations
/// are exact under the Gaussian-mixture posterior (E[exp eta] has closed
/// form per component).
pub fn dic(ensemble: &Ensemble, observed: &[f64]) -> (f64, f64, f64, f64) {
    let n = observed.len();
    let mut eta_mean = Vec::with_capacity(n);
    let mut mean_dev = 0.0;
    for r in 0..n {
        let comps = predictor_components(ensemble, r);
        let e_eta: f64 = comps.iter().map(|&(w, m, _)| w * m).sum();
        let e_mu: f64 = comps
            .iter()
            .map(|&(w, m, s)| w * (m + 0.5 * s * s).exp())
            .sum();
        let y = observed[r];
        // E[D_r] = 2 (y ln y - y E[eta] - y + E[mu]); the y ln y - y terms
        // vanish for y = 0
        mean_dev += if y > 0.0 {
            2.0 * (y * y.ln() - y * e_eta - y + e_mu)
        } else {
            2.0 * e_mu
        };
        eta_mean.push(e_eta);
    }
    let dev_at_mean = poisson_deviance(observed, &eta_mean);
    let p_eff = mean_dev - dev_at_mean;
    let dic = dev_at_mean + 2.0 * p_eff;
    (dic, p_eff, dev_at_mean, mean_dev)
}

/// WAIC = -2 sum_i (lppd_i - p_i): pointwise log predictive density via
/// mixture sampling, penalty p_i the sampling variance of the pointwise
/// log-likelihood.
pub fn waic(ensemble: &Ensemble, observed: &[f64], seed: u64, n_draws: usize) -> (f64, f64) {
    let mut waic_total = 0.0;
    let mut p_total = 0.0;
    for (r, &y) in observed.iter().enumerate() {
        let comps = predictor_components(ensemble, r);
        let draws = mixture_normal_draws(
            &comps,
            seed ^ (r as u64).wrapping_mul(0xD134_2543_DE82_EF95),
            n_draws,
        );
        let lls: Vec<f64> = draws.iter().map(|&eta| poisson_logpdf(y, eta)).collect();
        let max_ll = lls.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lppd = max_ll
            + (lls.iter().map(|&l| (l - max_ll).exp()).sum::<f64>() / n_draws as f64).ln();
        let mean_ll = lls.iter().sum::<f64>() / n_draws as f64;
        let var_ll = lls.iter().map(|&l| (l - mean_ll) * (l - mean_ll)).sum::<f64>()
            / (n_draws as f64 - 1.0);
        waic_total += -2.0 * (lppd - var_ll);
        p_total += var_ll;
    }
    (waic_total, p_total)
}

pub fn criteria_summary(
    ensemble: &Ensemble,
    observed: &[f64],
    seed: u64,
    n_draws: usize,
) -> CriteriaSummary {
    let (dic_v, dic_p, dev_at_mean, mean_dev) = dic(ensemble, observed);
    let (waic_v, waic_p) = waic(ensemble, observed, seed, n_draws);
    CriteriaSummary {
        dic: dic_v,
        dic_p_eff: dic_p,
        waic: waic_v,
        waic_p_eff: waic_p,
        deviance_at_mean: dev_at_mean,
        mean_deviance: mean_dev,
    }
}
