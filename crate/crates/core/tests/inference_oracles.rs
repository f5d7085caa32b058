//! Closed-form and statistical oracles for the Laplace engine: conjugate
//! Gaussian exactness, constrained modes, criteria behavior and the
//! prior-only sampler check.

use std::sync::Arc;

use mvcar_core::inference::{
    dic, mcmc_fit, softmax_weights, summarize_latent, waic, Engine, Ensemble, LaplaceEval,
    McmcOptions, FIXED_EFFECT_PRECISION,
};
use mvcar_core::latent::{HyperVector, LatentModel, ModelKind};
use mvcar_core::likelihood::{poisson_deviance, poisson_logpdf, Design, GaussianPseudoObs, NullObs, PoissonObs};
use mvcar_core::testing::{grid_graph, random_connected_graph, test_rng};
use mvcar_core::CountData;
use nalgebra::{DMatrix, DVector};
use rand::RngExt;

/// Dense prior precision, design matrix and offsets for a small system.
struct DenseSystem {
    q_prior: DMatrix<f64>,
    b: DMatrix<f64>,
    offsets: Vec<f64>,
}

fn dense_system(model: &LatentModel, design: &Design, theta: &HyperVector) -> DenseSystem {
    let n = design.n_total();
    let nl = design.n_latent();
    let mut q_prior = DMatrix::zeros(n, n);
    q_prior
        .view_mut((0, 0), (nl, nl))
        .copy_from(&model.precision(theta).unwrap().to_dense());
    for f in 0..design.n_fixed() {
        q_prior[(nl + f, nl + f)] = FIXED_EFFECT_PRECISION;
    }
    let mut b = DMatrix::zeros(design.n_cells(), n);
    for r in 0..design.n_cells() {
        b[(r, r)] = 1.0;
    }
    for f in 0..design.n_fixed() {
        for &(cell, v) in design.fixed_col_entries(f) {
            b[(cell, nl + f)] = v;
        }
    }
    DenseSystem {
        q_prior,
        b,
        offsets: design.offsets().to_vec(),
    }
}

#[test]
fn conjugate_seam_matches_gls_and_marginal() {
    // PMCAR K=2 on a 4-region graph with a Gaussian pseudo-likelihood
    let g = Arc::new(random_connected_graph(4, 2, 301));
    let model = LatentModel::new(ModelKind::Pmcar, 2, g).unwrap();
    let data = CountData::new(
        4,
        2,
        vec![1.0; 8],
        vec![2.0; 8],
        vec!["a".into(), "b".into()],
    )
    .unwrap();
    let design = Design::from_data(&data, &[]).unwrap();

    let mut rng = test_rng(302);
    let z: Vec<f64> = (0..8).map(|_| rng.random_range(-0.5..1.5)).collect();
    let weight: Vec<f64> = (0..8).map(|_| rng.random_range(0.5..3.0)).collect();
    let obs = GaussianPseudoObs {
        z: z.clone(),
        weight: weight.clone(),
    };
    let engine = Engine::new(&model, &design, &obs).unwrap();
    let theta = HyperVector::new(&model, vec![0.4, 0.1, -0.2, 0.3]).unwrap();
    let eval = engine.gaussian_approx(&theta);
    assert!(eval.converged);

    // dense GLS: (Q_p + B^T C B)^{-1} B^T C (z - offset)
    let sys = dense_system(&model, &design, &theta);
    let c = DMatrix::from_diagonal(&DVector::from_column_slice(&weight));
    let q_c = &sys.q_prior + sys.b.transpose() * &c * &sys.b;
    let resid: Vec<f64> = z.iter().zip(&sys.offsets).map(|(a, b)| a - b).collect();
    let rhs = sys.b.transpose() * &c * DVector::from_column_slice(&resid);
    let gls = q_c.clone().cholesky().unwrap().solve(&rhs);
    for i in 0..design.n_total() {
        assert!(
            (eval.mode[i] - gls[i]).abs() < 1e-8,
            "mode[{i}] = {} vs GLS {}",
            eval.mode[i],
            gls[i]
        );
    }

    // dense log marginal: z - offset ~ N(0, C^{-1} + B Q_p^{-1} B^T)
    let q_p_inv = sys.q_prior.clone().try_inverse().unwrap();
    let c_inv = DMatrix::from_diagonal(&DVector::from_iterator(8, weight.iter().map(|w| 1.0 / w)));
    let sigma_m = c_inv + &sys.b * q_p_inv * sys.b.transpose();
    let sig_chol = sigma_m.clone().cholesky().unwrap();
    let logdet_sigma: f64 = sig_chol.l().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
    let rv = DVector::from_column_slice(&resid);
    let quad = rv.dot(&sig_chol.solve(&rv));
    let n_obs = 8.0;
    let log_marginal =
        -0.5 * logdet_sigma - 0.5 * quad - 0.5 * n_obs * (2.0 * std::f64::consts::PI).ln();

    // the engine's likelihood drops the Gaussian constant
    // (1/2) sum log(c/2pi) relative to the true density
    let dropped: f64 = weight
        .iter()
        .map(|w| 0.5 * (w / (2.0 * std::f64::consts::PI)).ln())
        .sum();
    let expected = model.log_prior(&theta).unwrap() + log_marginal - dropped;
    assert!(
        (eval.log_post - expected).abs() < 1e-6,
        "log_post {} vs closed form {}",
        eval.log_post,
        expected
    );
}

#[test]
fn warm_start_at_mode_converges_immediately() {
    let g = Arc::new(grid_graph(3, 3));
    let model = LatentModel::new(ModelKind::IndepPmcar, 1, g).unwrap();
    let data = CountData::new(
        9,
        1,
        vec![3.0, 5.0, 2.0, 8.0, 4.0, 6.0, 1.0, 0.0, 7.0],
        vec![4.0; 9],
        vec!["v".into()],
    )
    .unwrap();
    let design = Design::from_data(&data, &[]).unwrap();
    let obs = PoissonObs::new(&data);
    let engine = Engine::new(&model, &design, &obs).unwrap();
    let theta = HyperVector::new(&model, vec![0.5, 0.8]).unwrap();
    let cold = engine.gaussian_approx(&theta);
    assert!(cold.converged);
    let warm = engine.gaussian_approx_from(&theta, &cold.mode);
    assert!(warm.converged);
    assert!(warm.newton_iters <= 2, "newton_iters = {}", warm.newton_iters);
}

#[test]
fn constrained_mode_satisfies_sum_to_zero() {
    let g = Arc::new(grid_graph(3, 3));
    let model = LatentModel::new(ModelKind::Imcar, 2, g).unwrap();
    let mut rng = test_rng(303);
    let observed: Vec<f64> = (0..18).map(|_| rng.random_range(0.0f64..12.0).round()).collect();
    let data = CountData::new(9, 2, observed, vec![5.0; 18], vec!["a".into(), "b".into()]).unwrap();
    let design = Design::from_data(&data, &[]).unwrap();
    let obs = PoissonObs::new(&data);
    let engine = Engine::new(&model, &design, &obs).unwrap();
    let theta = HyperVector::new(&model, vec![1.0, 1.0, 0.2]).unwrap();
    let eval = engine.gaussian_approx(&theta);
    assert!(eval.converged);
    for var in 0..2 {
        let total: f64 = eval.mode[var * 9..(var + 1) * 9].iter().sum();
        assert!(total.abs() < 1e-10, "variable {var} sums to {total}");
    }
}

#[test]
fn log_post_decreases_as_variance_grows() {
    let g = Arc::new(grid_graph(3, 3));
    let model = LatentModel::new(ModelKind::IndepImcar, 1, g).unwrap();
    let mut rng = test_rng(304);
    let observed: Vec<f64> = (0..9).map(|_| rng.random_range(0.0f64..10.0).round()).collect();
    let data = CountData::new(9, 1, observed, vec![4.0; 9], vec!["v".into()]).unwrap();
    let design = Design::from_data(&data, &[]).unwrap();
    let obs = PoissonObs::new(&data);
    let engine = Engine::new(&model, &design, &obs).unwrap();
    // variance -> infinity means log tau -> -infinity
    let probes = [-5.0, -15.0, -30.0];
    let values: Vec<f64> = probes
        .iter()
        .map(|&t| engine.log_post(&HyperVector::new(&model, vec![t]).unwrap()))
        .collect();
    assert!(
        values[0] > values[1] && values[1] > values[2],
        "log_post not decreasing: {values:?}"
    );
}

/// Synthetic single-point ensemble with given per-cell moments.
fn synthetic_ensemble(means: Vec<f64>, vars: Vec<f64>, theta_dim: usize) -> Ensemble {
    let eval = LaplaceEval {
        theta: HyperVector::from_raw(vec![0.0; theta_dim]),
        log_post: 0.0,
        mode: Vec::new(),
        factor: None,
        converged: true,
        newton_iters: 0,
        predictor_mean: means,
        predictor_var: vars,
        fixed_mean: Vec::new(),
        fixed_var: Vec::new(),
    };
    Ensemble {
        evals: vec![eval],
        weights: vec![1.0],
    }
}

#[test]
fn dic_degenerates_to_plugin_deviance_at_zero_variance() {
    let y = vec![3.0, 0.0, 7.0, 2.0];
    let eta: Vec<f64> = vec![1.2, 0.3, 1.9, 0.5];
    let ens = synthetic_ensemble(eta.clone(), vec![0.0; 4], 1);
    let (dic_v, p_eff, dev_at_mean, _) = dic(&ens, &y);
    assert!(p_eff.abs() < 1e-10);
    assert!((dev_at_mean - poisson_deviance(&y, &eta)).abs() < 1e-10);
    assert!((dic_v - poisson_deviance(&y, &eta)).abs() < 1e-9);
}

#[test]
fn saturated_fit_has_zero_deviance() {
    let y = vec![3.0, 5.0, 1.0];
    let eta: Vec<f64> = y.iter().map(|&v: &f64| v.ln()).collect();
    assert!(poisson_deviance(&y, &eta).abs() < 1e-12);
}

#[test]
fn waic_zero_variance_equals_minus_twice_loglik() {
    let y = vec![4.0, 1.0, 6.0];
    let eta = vec![1.1, 0.2, 1.8];
    let ens = synthetic_ensemble(eta.clone(), vec![0.0; 3], 1);
    let (waic_v, p_eff) = waic(&ens, &y, 9, 2000);
    let want: f64 = -2.0 * y.iter().zip(&eta).map(|(&yy, &e)| poisson_logpdf(yy, e)).sum::<f64>();
    assert!(p_eff.abs() < 1e-12);
    assert!((waic_v - want).abs() < 1e-9);
}

#[test]
fn waic_is_additive_over_independent_blocks() {
    let y_a = vec![2.0, 5.0];
    let eta_a = vec![0.8, 1.5];
    let var_a = vec![0.04, 0.09];
    let y_b = vec![1.0, 7.0, 3.0];
    let eta_b = vec![0.1, 1.9, 1.1];
    let var_b = vec![0.01, 0.16, 0.02];

    let n_draws = 200_000;
    let (wa, _) = waic(&synthetic_ensemble(eta_a.clone(), var_a.clone(), 1), &y_a, 11, n_draws);
    let (wb, _) = waic(&synthetic_ensemble(eta_b.clone(), var_b.clone(), 1), &y_b, 12, n_draws);

    let mut eta_ab = eta_a;
    eta_ab.extend(eta_b);
    let mut var_ab = var_a;
    var_ab.extend(var_b);
    let mut y_ab = y_a;
    y_ab.extend(y_b);
    let (wab, _) = waic(&synthetic_ensemble(eta_ab, var_ab, 1), &y_ab, 13, n_draws);
    assert!(
        (wab - (wa + wb)).abs() < 0.05,
        "concatenated {wab} vs parts {}",
        wa + wb
    );
}

#[test]
fn latent_summary_single_component_lognormal_moment() {
    let means = vec![0.7, -0.2];
    let vars = vec![0.09, 0.25];
    let ens = synthetic_ensemble(means.clone(), vars.clone(), 1);
    let cells = summarize_latent(&ens, &[0.0, 0.0], &["v".to_string()], 2, 5, 4000);
    for (i, cell) in cells.iter().enumerate() {
        let want = (means[i] + 0.5 * vars[i]).exp();
        assert!(
            (cell.mean - want).abs() < 1e-10,
            "cell {i}: {} vs {}",
            cell.mean,
            want
        );
    }
    // zero-variance: risk mean = exp(mean)
    let ens0 = synthetic_ensemble(means.clone(), vec![0.0, 0.0], 1);
    let cells0 = summarize_latent(&ens0, &[0.0, 0.0], &["v".to_string()], 2, 5, 100);
    for (i, cell) in cells0.iter().enumerate() {
        assert!((cell.mean - means[i].exp()).abs() < 1e-12);
    }
}

#[test]
fn prior_only_mcmc_recovers_uniform_alpha_mean() {
    // proper kind with the likelihood switched off: alpha is uniform on
    // (0, 1), so its posterior mean is 0.5
    let g = Arc::new(grid_graph(3, 3));
    let model = LatentModel::new(ModelKind::IndepPmcar, 1, g).unwrap();
    let data = CountData::new(9, 1, vec![0.0; 9], vec![1.0; 9], vec!["v".into()]).unwrap();
    let design = Design::from_data(&data, &[]).unwrap();
    let obs = NullObs { n: 9 };
    let engine = Engine::new(&model, &design, &obs).unwrap();
    let options = McmcOptions {
        iters: 12_000,
        burnin: 2_000,
        chains: 2,
        target_accept: 0.234,
    };
    let init = HyperVector::new(&model, vec![0.0, 0.0]).unwrap();
    let summary = mcmc_fit(&engine, &init, None, &options, 314).unwrap();
    // transform the alpha* samples' mean is not alpha's mean; instead use
    // the recorded mean of expit(alpha*) via natural coordinates per sample
    // -- the summary only stores internal moments, so check the internal
    // mean maps near 0 (the symmetric point) and the acceptance is sane.
    let alpha_star_mean = summary.hyper_mean[0];
    let alpha_mean = 1.0 / (1.0 + (-alpha_star_mean).exp());
    assert!(
        (alpha_mean - 0.5).abs() < 0.06,
        "expit(mean alpha*) = {alpha_mean}"
    );
    assert!(summary.accept_rate > 0.05 && summary.accept_rate < 0.8);
}

#[test]
fn softmax_rejected_points_get_zero_weight() {
    let w = softmax_weights(&[-10.0, f64::NEG_INFINITY, -11.0]);
    assert_eq!(w[1], 0.0);
    assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
}
