//! Model fitting: Laplace approximation of the hyperparameter posterior,
//! weighted-ensemble summaries, DIC/WAIC, an MCMC cross-validator, and a
//! synthetic-data generator.

mod criteria;
mod ensemble;
mod laplace;
mod mcmc;
mod optim;

pub use criteria::{criteria_summary, dic, waic, CriteriaSummary};
pub use ensemble::{
    ensemble_points, explore_ensemble, mixture_normal_draws, softmax_weights, summarize_fixed,
    summarize_hyper, summarize_latent, Ensemble, ExploreMode, FittedCell, ParamSummary,
};
pub use laplace::{Engine, LaplaceEval, FIXED_EFFECT_PRECISION};
pub use mcmc::{mcmc_fit, McmcCriteria, McmcOptions, McmcSummary};
pub use optim::{fd_hessian, nelder_mead, optimize_hyper, OptimOptions};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::latent::{HyperVector, LatentModel, ModelKind};
use crate::likelihood::{CountData, Design, PoissonObs};
use crate::Result;

/// Fit settings; see the field docs for defaults.
#[derive(Debug, Clone)]
pub struct FitOptions {
    /// Starting point for the hyperparameter search; defaults to the
    /// model's canonical initialization.
    pub theta_init: Option<Vec<f64>>,
    pub explore: ExploreMode,
    /// Central-difference step for the Hessian at the mode.
    pub hessian_step: f64,
    pub seed: u64,
    /// Draws per cell for mixture quantiles and WAIC.
    pub mixture_draws: usize,
    /// Covariate names (from the data file) to include with per-variable
    /// coefficients.
    pub covariates: Vec<String>,
    pub mcmc: Option<McmcOptions>,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            theta_init: None,
            explore: ExploreMode::Axis,
            hessian_step: 0.005,
            seed: 1,
            mixture_draws: 10_000,
            covariates: Vec::new(),
            mcmc: None,
        }
    }
}

/// Deterministic effort counters. Wall-clock time is deliberately not part
/// of the result document so identical runs produce identical files; the
/// CLI reports elapsed time on stderr.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Timing {
    pub laplace_evals: usize,
    pub newton_iters: usize,
    pub mcmc_iterations: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitMeta {
    pub kind: ModelKind,
    pub n_variables: usize,
    pub n_regions: usize,
    pub n_components: usize,
    pub alpha_min: f64,
    pub alpha_max: f64,
    pub seed: u64,
    pub explore: ExploreMode,
    pub hessian_step: f64,
    pub mixture_draws: usize,
    pub variables: Vec<String>,
    pub covariates: Vec<String>,
    pub theta_names: Vec<String>,
    pub natural_names: Vec<String>,
}

/// One evaluated ensemble point in a serializable form.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnsemblePoint {
    pub theta: Vec<f64>,
    pub log_post: f64,
    pub weight: f64,
    pub converged: bool,
    pub newton_iters: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitResult {
    pub meta: FitMeta,
    pub ensemble: Vec<EnsemblePoint>,
    pub hyper_internal: Vec<ParamSummary>,
    pub hyper_natural: Vec<ParamSummary>,
    /// Posterior mean of the between-variable covariance, row-major K x K.
    pub between_cov: Vec<Vec<f64>>,
    pub fixed_effects: Vec<ParamSummary>,
    pub fitted: Vec<FittedCell>,
    pub criteria: CriteriaSummary,
    pub timing: Timing,
    pub mcmc: Option<McmcSummary>,
}

/// Fit the model to count data with the Laplace engine; optionally run the
/// MCMC cross-validator afterwards from the same mode.
pub fn fit(model: &LatentModel, data: &CountData, options: &FitOptions) -> Result<FitResult> {
    if data.n_regions() != model.n_regions() {
        return Err(Error::Validation(format!(
            "data has {} regions but the graph has {}",
            data.n_regions(),
            model.n_regions()
        )));
    }
    if data.n_variables() != model.n_variables() {
        return Err(Error::Validation(format!(
            "data has {} variables but the model has K = {}",
            data.n_variables(),
            model.n_variables()
        )));
    }
    let design = Design::from_data(data, &options.covariates)?;
    let obs = PoissonObs::new(data);
    let engine = Engine::new(model, &design, &obs)?;

    let theta_init = match &options.theta_init {
        Some(v) => HyperVector::new(model, v.clone())?,
        None => model.default_theta_init(),
    };
    let optim_options = OptimOptions {
        hessian_step: options.hessian_step,
        ..OptimOptions::default()
    };
    let (theta_mode, hessian) = optimize_hyper(&engine, &theta_init, &optim_options)?;
    let ensemble = explore_ensemble(&engine, &theta_mode, &hessian, options.explore)?;

    let (hyper_internal, hyper_natural, between) = summarize_hyper(&ensemble, model)?;
    let fixed_effects = summarize_fixed(
        &ensemble,
        design.fixed_names(),
        options.seed,
        options.mixture_draws,
    );
    let fitted = summarize_latent(
        &ensemble,
        design.offsets(),
        data.variables(),
        data.n_regions(),
        options.seed,
        options.mixture_draws,
    );
    let criteria = criteria_summary(
        &ensemble,
        data.observed(),
        options.seed,
        options.mixture_draws,
    );

    let mcmc = match &options.mcmc {
        Some(mopts) => Some(mcmc_fit(
            &engine,
            &theta_mode,
            Some(data.observed()),
            mopts,
            options.seed,
        )?),
        None => None,
    };

    let (lo, hi) = model.alpha_range();
    let meta = FitMeta {
        kind: model.kind(),
        n_variables: model.n_variables(),
        n_regions: model.n_regions(),
        n_components: model.n_components(),
        alpha_min: lo,
        alpha_max: hi,
        seed: options.seed,
        explore: options.explore,
        hessian_step: options.hessian_step,
        mixture_draws: options.mixture_draws,
        variables: data.variables().to_vec(),
        covariates: options.covariates.clone(),
        theta_names: model.theta_names(),
        natural_names: model.natural_names(),
    };
    let ensemble_points: Vec<EnsemblePoint> = ensemble
        .evals
        .iter()
        .zip(&ensemble.weights)
        .map(|(e, &w)| EnsemblePoint {
            theta: e.theta.values().to_vec(),
            log_post: e.log_post,
            weight: w,
            converged: e.converged,
            newton_iters: e.newton_iters,
        })
        .collect();
    let timing = Timing {
        laplace_evals: engine.eval_count(),
        newton_iters: engine.newton_count(),
        mcmc_iterations: options
            .mcmc
            .as_ref()
            .map(|m| m.iters * m.chains.max(1))
            .unwrap_or(0),
    };

    Ok(FitResult {
        meta,
        ensemble: ensemble_points,
        hyper_internal,
        hyper_natural,
        between_cov: dmatrix_to_rows(&between),
        fixed_effects,
        fitted,
        criteria,
        timing,
        mcmc,
    })
}

/// Recompute the natural-scale table and between-variable covariance from a
/// stored ensemble; backs the transform command.
pub fn transform_from_ensemble(
    model: &LatentModel,
    points: &[EnsemblePoint],
) -> Result<(Vec<ParamSummary>, Vec<Vec<f64>>)> {
    if points.is_empty() {
        return Err(Error::Validation("stored ensemble is empty".into()));
    }
    let evals: Vec<(HyperVector, f64)> = points
        .iter()
        .map(|p| -> Result<_> { Ok((HyperVector::new(model, p.theta.clone())?, p.weight)) })
        .collect::<Result<_>>()?;

    let names = model.natural_names();
    let coords: Vec<Vec<f64>> = evals
        .iter()
        .map(|(t, _)| model.natural_coordinates(t))
        .collect();
    let weights: Vec<f64> = evals.iter().map(|&(_, w)| w).collect();
    let mut natural = Vec::with_capacity(names.len());
    for (j, name) in names.iter().enumerate() {
        let values: Vec<f64> = coords.iter().map(|c| c[j]).collect();
        let mean: f64 = values.iter().zip(&weights).map(|(v, w)| v * w).sum();
        let var: f64 = values
            .iter()
            .zip(&weights)
            .map(|(v, w)| w * (v - mean) * (v - mean))
            .sum();
        let mut pairs: Vec<(f64, f64)> = values.iter().copied().zip(weights.iter().copied()).collect();
        pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(std::cmp::Ordering::Equal));
        let pick = |q: f64| -> f64 {
            let mut acc = 0.0;
            for &(v, w) in &pairs {
                acc += w;
                if acc >= q {
                    return v;
                }
            }
            pairs.last().map(|&(v, _)| v).unwrap_or(f64::NAN)
        };
        natural.push(ParamSummary {
            name: name.clone(),
            mean,
            sd: var.max(0.0).sqrt(),
            q025: pick(0.025),
            q500: pick(0.5),
            q975: pick(0.975),
        });
    }

    let k = model.n_variables();
    let mut between = DMatrix::zeros(k, k);
    for (theta, w) in &evals {
        if *w > 0.0 {
            between += model.to_natural(theta)?.between_cov * *w;
        }
    }
    Ok((natural, dmatrix_to_rows(&between)))
}

fn dmatrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|r| (0..m.ncols()).map(|c| m[(r, c)]).collect())
        .collect()
}

/// Draw a synthetic dataset from the generative model: latent effects from
/// the latent prior, then Poisson counts with
/// `eta = log E + a_k + theta_ik`. Deterministic under the seed.
pub fn simulate(
    model: &LatentModel,
    theta: &HyperVector,
    intercepts: &[f64],
    expected: &[f64],
    seed: u64,
) -> Result<CountData> {
    let i = model.n_regions();
    let k = model.n_variables();
    if intercepts.len() != k {
        return Err(Error::DimensionMismatch {
            expected: k,
            got: intercepts.len(),
        });
    }
    if expected.len() != i * k {
        return Err(Error::DimensionMismatch {
            expected: i * k,
            got: expected.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let effects = model.sample_effects(theta, &mut rng)?;
    let mut observed = Vec::with_capacity(i * k);
    for var in 0..k {
        for region in 0..i {
            let eta = expected[var * i + region].ln() + intercepts[var] + effects[(region, var)];
            if !(eta <= 30.0) {
                return Err(Error::InvalidState(format!(
                    "simulated linear predictor {eta} overflows"
                )));
            }
            observed.push(sample_poisson(eta.exp(), &mut rng));
        }
    }
    let variables: Vec<String> = (1..=k).map(|j| format!("v{j}")).collect();
    CountData::new(i, k, observed, expected.to_vec(), variables)
}

fn sample_poisson<R: Rng + ?Sized>(mu: f64, rng: &mut R) -> f64 {
    use rand::RngExt;
    let dist = rand_distr::Poisson::new(mu).expect("positive mean");
    let draw: f64 = rng.sample(dist);
    draw.round()
}
