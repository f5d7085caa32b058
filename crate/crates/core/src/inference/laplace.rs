//! Gaussian approximation of the latent field given hyperparameters, and
//! the Laplace approximation of the hyperparameter log-posterior.
//!
//! The augmented field is `x = (vec(Theta), a_1..a_K, beta...)`; its prior
//! precision is block-diagonal: the latent-effect precision plus a diffuse
//! Gaussian (precision 0.001) on the fixed effects. The conditional
//! posterior given hyperparameters is maximized by Newton iterations on the
//! GMRF scale, with sum-to-zero constraints enforced by conditioning by
//! kriging at every step.

use std::sync::atomic::{AtomicUsize, Ordering};

use nalgebra::DVector;

use crate::error::Error;
use crate::latent::{HyperVector, LatentModel};
use crate::likelihood::{Design, ObsLikelihood};
use crate::sparse::{CholFactor, ConstraintCorrector, ConstraintSet, JitterPolicy, SparseSym};
use crate::Result;

/// Diffuse Gaussian precision on intercepts and covariate coefficients.
pub const FIXED_EFFECT_PRECISION: f64 = 1e-3;

const NEWTON_MAX_ITERS: usize = 50;
const NEWTON_GRAD_RTOL: f64 = 1e-6;
const MAX_STEP_HALVINGS: usize = 30;

/// Bundles the pieces that define the conditional posterior for one model:
/// latent prior, design, observation likelihood and constraints.
pub struct Engine<'a> {
    pub model: &'a LatentModel,
    pub design: &'a Design,
    pub obs: &'a dyn ObsLikelihood,
    constraints: Option<ConstraintSet>,
    /// Cholesky of A A^T for projecting gradients onto the constraint
    /// null space.
    aat_chol: Option<nalgebra::Cholesky<f64, nalgebra::Dyn>>,
    eval_count: AtomicUsize,
    newton_count: AtomicUsize,
}

impl<'a> Engine<'a> {
    pub fn new(
        model: &'a LatentModel,
        design: &'a Design,
        obs: &'a dyn ObsLikelihood,
    ) -> Result<Self> {
        if design.n_cells() != model.field_dim() {
            return Err(Error::DimensionMismatch {
                expected: model.field_dim(),
                got: design.n_cells(),
            });
        }
        if obs.n_cells() != design.n_cells() {
            return Err(Error::DimensionMismatch {
                expected: design.n_cells(),
                got: obs.n_cells(),
            });
        }
        let constraints = match model.constraints() {
            Some(c) => Some(c.zero_padded(design.n_total())?),
            None => None,
        };
        let aat_chol = constraints.as_ref().map(|c| {
            let gram = c.a() * c.a().transpose();
            gram.cholesky().expect("constraint rows are independent")
        });
        Ok(Self {
            model,
            design,
            obs,
            constraints,
            aat_chol,
            eval_count: AtomicUsize::new(0),
            newton_count: AtomicUsize::new(0),
        })
    }

    pub fn n_total(&self) -> usize {
        self.design.n_total()
    }

    pub fn constraints(&self) -> Option<&ConstraintSet> {
        self.constraints.as_ref()
    }

    /// Laplace evaluations performed so far.
    pub fn eval_count(&self) -> usize {
        self.eval_count.load(Ordering::Relaxed)
    }

    /// Newton iterations performed so far.
    pub fn newton_count(&self) -> usize {
        self.newton_count.load(Ordering::Relaxed)
    }

    /// Unnormalized hyperparameter log-posterior; -inf for rejected points.
    pub fn log_post(&self, theta: &HyperVector) -> f64 {
        self.eval_core(theta, None, false).log_post
    }

    /// Full Gaussian approximation at `theta`, with per-cell predictor
    /// moments for posterior summaries.
    pub fn gaussian_approx(&self, theta: &HyperVector) -> LaplaceEval {
        self.eval_core(theta, None, true).into_public()
    }

    /// Like [`Engine::gaussian_approx`] but seeding the Newton iteration at
    /// `warm_start` (must satisfy the constraints).
    pub fn gaussian_approx_from(&self, theta: &HyperVector, warm_start: &[f64]) -> LaplaceEval {
        self.eval_core(theta, Some(warm_start), true).into_public()
    }

    /// Core evaluation. `warm_start` seeds the Newton iteration (it must
    /// satisfy the constraints); `with_variances` additionally computes
    /// marginal predictor and fixed-effect variances.
    pub(crate) fn eval_core(
        &self,
        theta: &HyperVector,
        warm_start: Option<&[f64]>,
        with_variances: bool,
    ) -> EvalCore {
        self.eval_count.fetch_add(1, Ordering::Relaxed);
        match self.try_eval(theta, warm_start, with_variances) {
            Ok(core) => core,
            Err(_) => EvalCore::rejected(theta.clone()),
        }
    }

    fn try_eval(
        &self,
        theta: &HyperVector,
        warm_start: Option<&[f64]>,
        with_variances: bool,
    ) -> Result<EvalCore> {
        let n = self.design.n_total();
        let n_latent = self.design.n_latent();

        // Augmented prior precision: latent-effect block plus diffuse
        // fixed-effect diagonal.
        let q_theta = self.model.precision(theta)?;
        let mut prior_triplets: Vec<(usize, usize, f64)> = q_theta.lower_triplets().collect();
        for f in 0..self.design.n_fixed() {
            prior_triplets.push((n_latent + f, n_latent + f, FIXED_EFFECT_PRECISION));
        }
        let q_prior = SparseSym::from_triplets(n, &prior_triplets)?;
        let prior_policy = if self.model.kind().is_intrinsic() {
            JitterPolicy::Auto
        } else {
            JitterPolicy::Strict
        };
        let factor_prior = q_prior.cholesky(prior_policy)?;
        let corrector_prior = match &self.constraints {
            Some(c) => Some(ConstraintCorrector::new(&factor_prior, c)?),
            None => None,
        };

        // Newton iteration for the conditional mode.
        let mut x = match warm_start {
            Some(w) if w.len() == n => w.to_vec(),
            _ => vec![0.0; n],
        };
        let objective = |x: &[f64], factor_prior: &CholFactor| -> Option<f64> {
            let eta = self.design.linear_predictor(x);
            match self.obs.terms(&eta) {
                Ok(t) => Some(t.loglik - 0.5 * factor_prior.quad_form(x)),
                Err(_) => None,
            }
        };

        let mut f_current = objective(&x, &factor_prior)
            .ok_or_else(|| Error::InvalidState("divergent start".into()))?;
        let mut converged = false;
        let mut iters = 0usize;
        let mut grad_tol = f64::NAN;

        for iter in 0..NEWTON_MAX_ITERS {
            let eta = self.design.linear_predictor(&x);
            let terms = self.obs.terms(&eta)?;

            // gradient of the objective: -Q_p x + B^T grad
            let mut grad_full = self.design.transpose_map(&terms.grad);
            let qx = q_prior.matvec(&x);
            let jit = factor_prior.jitter_applied();
            for i in 0..n {
                grad_full[i] -= qx[i] + jit * x[i];
            }
            let gnorm = self.projected_grad_norm(&grad_full);
            if iter == 0 {
                grad_tol = NEWTON_GRAD_RTOL * (1.0 + gnorm);
            }
            if gnorm < grad_tol {
                converged = true;
                break;
            }

            // Gauss-Newton system: (Q_p + B^T C B) x_new = B^T (g + C (eta - offset))
            let q_c = self.assemble_conditional(&prior_triplets, &terms.curvature)?;
            let factor = q_c.cholesky(JitterPolicy::Strict)?;
            let mut cell_rhs = Vec::with_capacity(terms.grad.len());
            for (r, &g) in terms.grad.iter().enumerate() {
                cell_rhs.push(g + terms.curvature[r] * (eta[r] - self.design.offsets()[r]));
            }
            let rhs = self.design.transpose_map(&cell_rhs);
            let candidate_uncon = factor.solve(&rhs);
            let mut candidate = match &self.constraints {
                Some(c) => ConstraintCorrector::new(&factor, c)?.apply(&candidate_uncon),
                None => candidate_uncon,
            };

            // Step halving keeps the conditional log-posterior non-decreasing
            // (up to roundoff at the objective's magnitude).
            let f_slack = 1e-10 * (1.0 + f_current.abs());
            let mut f_new = objective(&candidate, &factor_prior);
            let mut halvings = 0;
            while f_new.map_or(true, |f| f < f_current - f_slack) && halvings < MAX_STEP_HALVINGS {
                for i in 0..n {
                    candidate[i] = 0.5 * (candidate[i] + x[i]);
                }
                f_new = objective(&candidate, &factor_prior);
                halvings += 1;
            }
            let f_new = f_new.ok_or_else(|| {
                Error::InvalidState("step halving exhausted on divergent objective".into())
            })?;

            x = candidate;
            f_current = f_new;
            iters = iter + 1;
            self.newton_count.fetch_add(1, Ordering::Relaxed);
        }

        if !converged {
            return Err(Error::InvalidState(format!(
                "Newton iteration did not converge in {NEWTON_MAX_ITERS} steps"
            )));
        }

        // Anchor the Gaussian approximation at the converged mode: rebuild
        // the conditional system with the curvature evaluated at x*.
        let eta_mode = self.design.linear_predictor(&x);
        let terms_mode = self.obs.terms(&eta_mode)?;
        let q_c = self.assemble_conditional(&prior_triplets, &terms_mode.curvature)?;
        let factor_c = q_c.cholesky(JitterPolicy::Strict)?;
        let mut cell_rhs = Vec::with_capacity(terms_mode.grad.len());
        for (r, &g) in terms_mode.grad.iter().enumerate() {
            cell_rhs.push(g + terms_mode.curvature[r] * (eta_mode[r] - self.design.offsets()[r]));
        }
        let mean_uncon = factor_c.solve(&self.design.transpose_map(&cell_rhs));
        let corrector_c = match &self.constraints {
            Some(c) => Some(ConstraintCorrector::new(&factor_c, c)?),
            None => None,
        };

        // Laplace identity: log pi(theta) + log prior(x*) + loglik(x*)
        //                   - log pi_G(x* | theta, y), constants dropped
        // consistently (they cancel between prior and approximation).
        let log_prior_theta = self.model.log_prior(theta)?;
        let ll_mode = terms_mode.loglik;
        let prior_dens = gaussian_logdens_at(&factor_prior, None, corrector_prior.as_ref(), &x);
        let cond_dens = gaussian_logdens_at(&factor_c, Some(&mean_uncon), corrector_c.as_ref(), &x);
        let log_post = log_prior_theta + prior_dens + ll_mode - cond_dens;
        if !log_post.is_finite() {
            return Err(Error::InvalidState("non-finite log posterior".into()));
        }

        let (predictor_var, fixed_var) = if with_variances {
            self.marginal_variances(&factor_c, corrector_c.as_ref())
        } else {
            (Vec::new(), Vec::new())
        };
        let fixed_mean = x[n_latent..].to_vec();

        Ok(EvalCore {
            theta: theta.clone(),
            log_post,
            converged,
            newton_iters: iters,
            valid: true,
            mode: x,
            mean_uncon,
            factor_prior: Some(factor_prior),
            corrector_prior,
            factor_c: Some(factor_c),
            corrector_c,
            predictor_mean: eta_mode,
            predictor_var,
            fixed_mean,
            fixed_var,
            ll_at_mode: ll_mode,
            log_prior_theta,
        })
    }

    /// Q_c = Q_prior + B^T C B with C the per-cell curvature.
    fn assemble_conditional(
        &self,
        prior_triplets: &[(usize, usize, f64)],
        curvature: &[f64],
    ) -> Result<SparseSym> {
        let n = self.design.n_total();
        let n_latent = self.design.n_latent();
        let n_fixed = self.design.n_fixed();
        let mut triplets = prior_triplets.to_vec();
        for (r, &c) in curvature.iter().enumerate() {
            if c != 0.0 {
                triplets.push((r, r, c));
            }
        }
        for f in 0..n_fixed {
            for &(cell, v) in self.design.fixed_col_entries(f) {
                let w = curvature[cell] * v;
                if w != 0.0 {
                    triplets.push((n_latent + f, cell, w));
                }
            }
        }
        for f1 in 0..n_fixed {
            for f2 in 0..=f1 {
                // fixed columns only overlap within one variable block
                let mut acc = 0.0;
                let col2 = self.design.fixed_col_entries(f2);
                let map2: std::collections::HashMap<usize, f64> = col2.iter().copied().collect();
                for &(cell, v1) in self.design.fixed_col_entries(f1) {
                    if let Some(&v2) = map2.get(&cell) {
                        acc += curvature[cell] * v1 * v2;
                    }
                }
                if acc != 0.0 {
                    triplets.push((n_latent + f1, n_latent + f2, acc));
                }
            }
        }
        SparseSym::from_triplets(n, &triplets)
    }

    fn projected_grad_norm(&self, grad: &[f64]) -> f64 {
        match (&self.constraints, &self.aat_chol) {
            (Some(c), Some(chol)) => {
                let g = DVector::from_column_slice(grad);
                let ag = c.a() * &g;
                let lambda = chol.solve(&ag);
                let proj = g - c.a().transpose() * lambda;
                proj.amax()
            }
            _ => grad.iter().fold(0.0f64, |m, v| m.max(v.abs())),
        }
    }

    /// Marginal variances of every linear predictor and fixed effect under
    /// the (constrained) Gaussian approximation.
    fn marginal_variances(
        &self,
        factor: &CholFactor,
        corrector: Option<&ConstraintCorrector>,
    ) -> (Vec<f64>, Vec<f64>) {
        let n = self.design.n_total();
        let n_latent = self.design.n_latent();
        let n_fixed = self.design.n_fixed();
        let correction = |z: &[f64]| -> f64 {
            match corrector {
                Some(corr) => {
                    let zv = DVector::from_column_slice(z);
                    let w = corr.constraints().a() * zv;
                    corr.gram_quad_form(&w)
                }
                None => 0.0,
            }
        };

        let mut rhs = vec![0.0; n];
        let mut predictor_var = Vec::with_capacity(n_latent);
        for r in 0..n_latent {
            // rhs = B_r^T: unit latent entry plus this cell's fixed values
            rhs.iter_mut().for_each(|v| *v = 0.0);
            rhs[r] = 1.0;
            for f in 0..n_fixed {
                for &(cell, v) in self.design.fixed_col_entries(f) {
                    if cell == r {
                        rhs[n_latent + f] = v;
                    }
                }
            }
            let z = factor.solve(&rhs);
            let mut var: f64 = rhs.iter().zip(&z).map(|(a, b)| a * b).sum();
            var -= correction(&z);
            predictor_var.push(var.max(0.0));
        }

        let mut fixed_var = Vec::with_capacity(n_fixed);
        for f in 0..n_fixed {
            rhs.iter_mut().for_each(|v| *v = 0.0);
            rhs[n_latent + f] = 1.0;
            let z = factor.solve(&rhs);
            let mut var = z[n_latent + f];
            var -= correction(&z);
            fixed_var.push(var.max(0.0));
        }
        (predictor_var, fixed_var)
    }
}

/// Log density of a (constrained) Gaussian with the factorized precision at
/// a feasible point `x`, up to terms constant in the hyperparameters:
/// `1/2 logdet Q - 1/2 (x-m)^T Q (x-m)` plus, under constraints `A x = e`,
/// the conditioning correction `+1/2 logdet(A Q^{-1} A^T)
/// + 1/2 (e - A m)^T (A Q^{-1} A^T)^{-1} (e - A m)`.
pub(crate) fn gaussian_logdens_at(
    factor: &CholFactor,
    mean: Option<&[f64]>,
    corrector: Option<&ConstraintCorrector>,
    x: &[f64],
) -> f64 {
    let diff: Vec<f64> = match mean {
        Some(m) => x.iter().zip(m).map(|(a, b)| a - b).collect(),
        None => x.to_vec(),
    };
    let mut dens = 0.5 * factor.logdet() - 0.5 * factor.quad_form(&diff);
    if let Some(corr) = corrector {
        let resid = match mean {
            Some(m) => corr.constraints().residual(m),
            None => corr.constraints().residual(&vec![0.0; x.len()]),
        };
        // residual = A m - e; the correction uses e - A m, same quadratic
        dens += 0.5 * corr.logdet_gram() + 0.5 * corr.gram_quad_form(&resid);
    }
    dens
}

/// One evaluated hyperparameter point: Laplace log-posterior, conditional
/// mode, factorization and predictor moments.
pub struct LaplaceEval {
    pub theta: HyperVector,
    /// Unnormalized log posterior density of theta; -inf for rejected points.
    pub log_post: f64,
    /// Mode of the augmented field x*(theta) (empty when rejected).
    pub mode: Vec<f64>,
    /// Factor of the conditional precision at the mode.
    pub factor: Option<CholFactor>,
    pub converged: bool,
    pub newton_iters: usize,
    /// Linear predictor at the mode (offset included), one entry per cell.
    pub predictor_mean: Vec<f64>,
    /// Marginal variance of each linear predictor under the approximation.
    pub predictor_var: Vec<f64>,
    /// Fixed-effect means and variances (intercepts, then covariates).
    pub fixed_mean: Vec<f64>,
    pub fixed_var: Vec<f64>,
}

/// Internal evaluation state; richer than the public [`LaplaceEval`]
/// (retains the prior factorization and constraint workspaces for MCMC).
pub(crate) struct EvalCore {
    pub theta: HyperVector,
    pub log_post: f64,
    pub converged: bool,
    pub newton_iters: usize,
    pub valid: bool,
    pub mode: Vec<f64>,
    pub mean_uncon: Vec<f64>,
    pub factor_prior: Option<CholFactor>,
    pub corrector_prior: Option<ConstraintCorrector>,
    pub factor_c: Option<CholFactor>,
    pub corrector_c: Option<ConstraintCorrector>,
    pub predictor_mean: Vec<f64>,
    pub predictor_var: Vec<f64>,
    pub fixed_mean: Vec<f64>,
    pub fixed_var: Vec<f64>,
    pub ll_at_mode: f64,
    pub log_prior_theta: f64,
}

impl EvalCore {
    pub fn rejected(theta: HyperVector) -> Self {
        Self {
            theta,
            log_post: f64::NEG_INFINITY,
            converged: false,
            newton_iters: 0,
            valid: false,
            mode: Vec::new(),
            mean_uncon: Vec::new(),
            factor_prior: None,
            corrector_prior: None,
            factor_c: None,
            corrector_c: None,
            predictor_mean: Vec::new(),
            predictor_var: Vec::new(),
            fixed_mean: Vec::new(),
            fixed_var: Vec::new(),
            ll_at_mode: f64::NEG_INFINITY,
            log_prior_theta: f64::NEG_INFINITY,
        }
    }

    pub fn into_public(self) -> LaplaceEval {
        LaplaceEval {
            theta: self.theta,
            log_post: self.log_post,
            mode: self.mode,
            factor: self.factor_c,
            converged: self.converged,
            newton_iters: self.newton_iters,
            predictor_mean: self.predictor_mean,
            predictor_var: self.predictor_var,
            fixed_mean: self.fixed_mean,
            fixed_var: self.fixed_var,
        }
    }

    /// Log density of the prior GMRF (jittered, constraint-corrected) at a
    /// feasible augmented point.
    pub fn prior_logdens(&self, x: &[f64]) -> f64 {
        gaussian_logdens_at(
            self.factor_prior.as_ref().expect("valid eval"),
            None,
            self.corrector_prior.as_ref(),
            x,
        )
    }

    /// Log density of the conditional Gaussian approximation at a feasible
    /// augmented point.
    pub fn conditional_logdens(&self, x: &[f64]) -> f64 {
        gaussian_logdens_at(
            self.factor_c.as_ref().expect("valid eval"),
            Some(&self.mean_uncon),
            self.corrector_c.as_ref(),
            x,
        )
    }

    /// Draw from the conditional Gaussian approximation (kriging-corrected
    /// under constraints).
    pub fn draw_conditional<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        use rand::RngExt;
        use rand_distr::StandardNormal;
        let factor = self.factor_c.as_ref().expect("valid eval");
        let n = factor.dim();
        let z: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let noise = factor.sample_from_noise(&z);
        let draw: Vec<f64> = self
            .mean_uncon
            .iter()
            .zip(&noise)
            .map(|(m, e)| m + e)
            .collect();
        match &self.corrector_c {
            Some(corr) => corr.apply(&draw),
            None => draw,
        }
    }
}
