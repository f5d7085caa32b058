//! Scratch probe: parameter recovery on simulated PMCAR data.

use std::sync::Arc;
use std::time::Instant;

use mvcar_core::inference::{fit, simulate, ExploreMode, FitOptions};
use mvcar_core::latent::{LatentModel, ModelKind, NaturalParams, AlphaParam};
use mvcar_core::testing::grid_graph;
use nalgebra::DMatrix;

#[test]
fn probe_pmcar_recovery() {
    let g = Arc::new(grid_graph(10, 20));
    let model = LatentModel::new(ModelKind::Pmcar, 2, g).unwrap();
    let natural = NaturalParams {
        variances: vec![1.0, 1.0],
        correlations: {
            let mut c = DMatrix::identity(2, 2);
            c[(0, 1)] = 0.6;
            c[(1, 0)] = 0.6;
            c
        },
        alpha: Some(AlphaParam::Common(0.9)),
        m: None,
        lambda_inv: None,
        between_cov: DMatrix::identity(2, 2),
    };
    let theta_true = model.from_natural(&natural).unwrap();
    let data = simulate(&model, &theta_true, &[0.0, 0.0], &vec![50.0; 400], 777).unwrap();

    let t0 = Instant::now();
    let result = fit(
        &model,
        &data,
        &FitOptions {
            explore: ExploreMode::Axis,
            seed: 42,
            ..FitOptions::default()
        },
    )
    .unwrap();
    let elapsed = t0.elapsed();

    let by_name = |n: &str| -> f64 {
        result
            .hyper_natural
            .iter()
            .find(|p| p.name == n)
            .map(|p| p.mean)
            .unwrap()
    };
    eprintln!("elapsed: {elapsed:?}");
    eprintln!("evals: {:?}", result.timing);
    eprintln!(
        "alpha {:.4} var1 {:.4} var2 {:.4} rho {:.4}",
        by_name("alpha"),
        by_name("var_1"),
        by_name("var_2"),
        by_name("rho_2_1")
    );
    eprintln!("dic {:.2} p_eff {:.2} waic {:.2}", result.criteria.dic, result.criteria.dic_p_eff, result.criteria.waic);
    eprintln!("ensemble log_posts: {:?}", result.ensemble.iter().map(|e| e.log_post).collect::<Vec<_>>());
    eprintln!("weights: {:?}", result.ensemble.iter().map(|e| e.weight).collect::<Vec<_>>());
}
