//! Adaptive random-walk Metropolis cross-validator: proposals on the
//! internal hyperparameters with Robbins-Monro scale adaptation during
//! burn-in, the latent field refreshed through draws from the Gaussian
//! approximation with a joint Metropolis-Hastings correction.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::latent::HyperVector;
use crate::likelihood::{poisson_deviance, poisson_logpdf};
use crate::Result;

use super::laplace::{Engine, EvalCore};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct McmcOptions {
    pub iters: usize,
    pub burnin: usize,
    pub chains: usize,
    pub target_accept: f64,
}

impl Default for McmcOptions {
    fn default() -> Self {
        Self {
            iters: 50_000,
            burnin: 10_000,
            chains: 1,
            target_accept: 0.234,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct McmcCriteria {
    pub dic: f64,
    pub dic_p_eff: f64,
    pub waic: f64,
    pub waic_p_eff: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct McmcSummary {
    pub iters: usize,
    pub burnin: usize,
    pub chains: usize,
    pub hyper_names: Vec<String>,
    pub hyper_mean: Vec<f64>,
    pub hyper_sd: Vec<f64>,
    pub accept_rate: f64,
    pub criteria: Option<McmcCriteria>,
}

struct ChainOutput {
    theta_samples: Vec<Vec<f64>>,
    accepted: usize,
    proposed: usize,
    // deviance accumulation (only when counts are given)
    eta_sum: Vec<f64>,
    dev_sum: f64,
    // per-cell streaming log-sum-exp and Welford moments of the pointwise
    // log-likelihood
    ll_max: Vec<f64>,
    ll_sumexp: Vec<f64>,
    ll_mean: Vec<f64>,
    ll_m2: Vec<f64>,
    kept: usize,
}

/// Run the sampler. `observed` enables deviance-based criteria (DIC/WAIC);
/// pass `None` for prior-only or pseudo-likelihood targets.
pub fn mcmc_fit(
    engine: &Engine,
    theta_init: &HyperVector,
    observed: Option<&[f64]>,
    options: &McmcOptions,
    seed: u64,
) -> Result<McmcSummary> {
    if options.iters == 0 || options.burnin >= options.iters {
        return Err(Error::Validation(
            "mcmc needs iters > burnin >= 0".into(),
        ));
    }
    let chain_ids: Vec<usize> = (0..options.chains.max(1)).collect();
    let outputs: Vec<Result<ChainOutput>> = chain_ids
        .par_iter()
        .map(|&c| {
            run_chain(
                engine,
                theta_init,
                observed,
                options,
                seed.wrapping_add(0x9E37 * (c as u64 + 1)),
            )
        })
        .collect();

    let mut theta_samples: Vec<Vec<f64>> = Vec::new();
    let mut accepted = 0usize;
    let mut proposed = 0usize;
    let n_cells = engine.design.n_cells();
    let mut eta_sum = vec![0.0; n_cells];
    let mut dev_sum = 0.0;
    let mut kept = 0usize;
    let mut ll_max = vec![f64::NEG_INFINITY; n_cells];
    let mut ll_sumexp = vec![0.0; n_cells];
    let mut ll_mean = vec![0.0; n_cells];
    let mut ll_m2 = vec![0.0; n_cells];
    let mut ll_count = 0usize;

    for out in outputs {
        let out = out?;
        accepted += out.accepted;
        proposed += out.proposed;
        dev_sum += out.dev_sum;
        for (a, b) in eta_sum.iter_mut().zip(&out.eta_sum) {
            *a += b;
        }
        // merge streaming log-sum-exp
        for r in 0..n_cells {
            if out.kept > 0 {
                let m = ll_max[r].max(out.ll_max[r]);
                if m.is_finite() {
                    ll_sumexp[r] = ll_sumexp[r] * (ll_max[r] - m).exp()
                        + out.ll_sumexp[r] * (out.ll_max[r] - m).exp();
                    ll_max[r] = m;
                }
            }
        }
        // merge Welford moments
        if out.kept > 0 {
            let na = ll_count as f64;
            let nb = out.kept as f64;
            for r in 0..n_cells {
                let delta = out.ll_mean[r] - ll_mean[r];
                let total = na + nb;
                ll_mean[r] += delta * nb / total;
                ll_m2[r] += out.ll_m2[r] + delta * delta * na * nb / total;
            }
            ll_count += out.kept;
        }
        kept += out.kept;
        theta_samples.extend(out.theta_samples);
    }

    let p = theta_init.len();
    let nf = theta_samples.len() as f64;
    let mut mean = vec![0.0; p];
    for s in &theta_samples {
        for j in 0..p {
            mean[j] += s[j];
        }
    }
    for m in mean.iter_mut() {
        *m /= nf;
    }
    let mut sd = vec![0.0; p];
    for s in &theta_samples {
        for j in 0..p {
            sd[j] += (s[j] - mean[j]) * (s[j] - mean[j]);
        }
    }
    for s in sd.iter_mut() {
        *s = (*s / (nf - 1.0).max(1.0)).sqrt();
    }

    let criteria = observed.map(|y| {
        let nkept = kept as f64;
        let eta_bar: Vec<f64> = eta_sum.iter().map(|e| e / nkept).collect();
        let dev_at_mean = poisson_deviance(y, &eta_bar);
        let mean_dev = dev_sum / nkept;
        let dic_p = mean_dev - dev_at_mean;
        let mut waic = 0.0;
        let mut waic_p = 0.0;
        for r in 0..n_cells {
            let lppd = ll_max[r] + (ll_sumexp[r] / nkept).ln();
            let var = ll_m2[r] / (ll_count as f64 - 1.0).max(1.0);
            waic += -2.0 * (lppd - var);
            waic_p += var;
        }
        McmcCriteria {
            dic: dev_at_mean + 2.0 * dic_p,
            dic_p_eff: dic_p,
            waic,
            waic_p_eff: waic_p,
        }
    });

    Ok(McmcSummary {
        iters: options.iters,
        burnin: options.burnin,
        chains: options.chains.max(1),
        hyper_names: engine.model.theta_names(),
        hyper_mean: mean,
        hyper_sd: sd,
        accept_rate: accepted as f64 / proposed.max(1) as f64,
        criteria,
    })
}

fn run_chain(
    engine: &Engine,
    theta_init: &HyperVector,
    observed: Option<&[f64]>,
    options: &McmcOptions,
    seed: u64,
) -> Result<ChainOutput> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = theta_init.len();
    let n_cells = engine.design.n_cells();

    let mut eval = engine.eval_core(theta_init, None, false);
    if !eval.valid {
        return Err(Error::OptimizationFailure(
            "mcmc starting point is invalid".into(),
        ));
    }
    let mut x = eval.mode.clone();
    let mut ll_x = eval.ll_at_mode;
    // joint log target minus proposal density at the current state
    let state_score = |ev: &EvalCore, x: &[f64], ll: f64| -> f64 {
        ev.log_prior_theta + ev.prior_logdens(x) + ll - ev.conditional_logdens(x)
    };
    let mut score = state_score(&eval, &x, ll_x);

    let mut log_scale = (2.38 / (p as f64).sqrt()).ln();
    let mut accepted = 0usize;
    let mut proposed = 0usize;

    let mut out = ChainOutput {
        theta_samples: Vec::with_capacity(options.iters - options.burnin),
        accepted: 0,
        proposed: 0,
        eta_sum: vec![0.0; n_cells],
        dev_sum: 0.0,
        ll_max: vec![f64::NEG_INFINITY; n_cells],
        ll_sumexp: vec![0.0; n_cells],
        ll_mean: vec![0.0; n_cells],
        ll_m2: vec![0.0; n_cells],
        kept: 0,
    };

    for t in 1..=options.iters {
        // joint move: random-walk on theta with a fresh Gaussian draw of x
        let scale = log_scale.exp();
        let proposal: Vec<f64> = eval
            .theta
            .values()
            .iter()
            .map(|&v| v + scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let theta_prop = HyperVector::from_unchecked(proposal);
        let eval_prop = engine.eval_core(&theta_prop, None, false);
        let mut alpha_t = 0.0;
        if eval_prop.valid {
            let x_prop = eval_prop.draw_conditional(&mut rng);
            let eta_prop = engine.design.linear_predictor(&x_prop);
            if let Ok(terms) = engine.obs.terms(&eta_prop) {
                let cand_score = state_score(&eval_prop, &x_prop, terms.loglik);
                let log_r = cand_score - score;
                alpha_t = log_r.min(0.0).exp();
                if rng.random_range(0.0f64..1.0).ln() < log_r {
                    eval = eval_prop;
                    x = x_prop;
                    ll_x = terms.loglik;
                    score = cand_score;
                    accepted += 1;
                }
            }
        }
        proposed += 1;

        // latent refresh at the current theta (independence proposal from
        // the Gaussian approximation)
        let x_ref = eval.draw_conditional(&mut rng);
        if let Ok(terms) = engine.obs.terms(&engine.design.linear_predictor(&x_ref)) {
            let cand = eval.prior_logdens(&x_ref) + terms.loglik - eval.conditional_logdens(&x_ref);
            let cur = eval.prior_logdens(&x) + ll_x - eval.conditional_logdens(&x);
            if rng.random_range(0.0f64..1.0).ln() < cand - cur {
                x = x_ref;
                ll_x = terms.loglik;
                score = state_score(&eval, &x, ll_x);
            }
        }

        if t <= options.burnin {
            // Robbins-Monro adaptation toward the target acceptance rate
            let gamma = 1.0 / (t as f64).powf(0.6);
            log_scale += gamma * (alpha_t - options.target_accept);
        } else {
            out.theta_samples.push(eval.theta.values().to_vec());
            if let Some(y) = observed {
                let eta = engine.design.linear_predictor(&x);
                out.dev_sum += poisson_deviance(y, &eta);
                out.kept += 1;
                let k = out.kept as f64;
                for r in 0..n_cells {
                    out.eta_sum[r] += eta[r];
                    let ll = poisson_logpdf(y[r], eta[r]);
                    // streaming log-sum-exp
                    if ll > out.ll_max[r] {
                        out.ll_sumexp[r] = out.ll_sumexp[r] * (out.ll_max[r] - ll).exp() + 1.0;
                        out.ll_max[r] = ll;
                    } else {
                        out.ll_sumexp[r] += (ll - out.ll_max[r]).exp();
                    }
                    // Welford
                    let delta = ll - out.ll_mean[r];
                    out.ll_mean[r] += delta / k;
                    out.ll_m2[r] += delta * (ll - out.ll_mean[r]);
                }
            } else {
                out.kept += 1;
            }
        }
    }
    out.accepted = accepted;
    out.proposed = proposed;
    Ok(out)
}
