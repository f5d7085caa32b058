//! The five multivariate latent effects: hyperparameter layouts,
//! internal/natural transforms, log-priors, precision assembly, sum-to-zero
//! constraints and effect sampling.
//!
//! All precisions follow the variable-major vec convention: entries
//! `k*I .. (k+1)*I` of the latent vector belong to variable `k`.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use statrs::function::gamma::ln_gamma;

use crate::car;
use crate::error::Error;
use crate::graph::ArealGraph;
use crate::sparse::{kron_dense_sparse, sample_gmrf, ConstraintSet, JitterPolicy, SparseSym};
use crate::Result;

/// The latent-effect families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    /// Independent intrinsic fields: diagonal between-variable precision,
    /// D - W spatial structure.
    IndepImcar,
    /// Independent proper fields: diagonal between-variable precision,
    /// common autocorrelation, D - alpha W structure.
    IndepPmcar,
    /// Dense between-variable covariance, intrinsic spatial structure.
    Imcar,
    /// Dense between-variable covariance, common autocorrelation.
    Pmcar,
    /// Linear combinations of K proper CAR fields with loading matrix M.
    MModel,
}

impl ModelKind {
    pub const ALL: [ModelKind; 5] = [
        ModelKind::IndepImcar,
        ModelKind::IndepPmcar,
        ModelKind::Imcar,
        ModelKind::Pmcar,
        ModelKind::MModel,
    ];

    /// Intrinsic structure: improper prior, needs sum-to-zero constraints.
    pub fn is_intrinsic(self) -> bool {
        matches!(self, ModelKind::IndepImcar | ModelKind::Imcar)
    }

    /// Models whose between-variable matrix couples different variables.
    pub fn is_correlated(self) -> bool {
        matches!(self, ModelKind::Imcar | ModelKind::Pmcar | ModelKind::MModel)
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::IndepImcar => "indep-imcar",
            ModelKind::IndepPmcar => "indep-pmcar",
            ModelKind::Imcar => "imcar",
            ModelKind::Pmcar => "pmcar",
            ModelKind::MModel => "mmodel",
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "indep-imcar" | "indimcar" => Ok(ModelKind::IndepImcar),
            "indep-pmcar" | "indpmcar" => Ok(ModelKind::IndepPmcar),
            "imcar" => Ok(ModelKind::Imcar),
            "pmcar" => Ok(ModelKind::Pmcar),
            "mmodel" | "m-model" => Ok(ModelKind::MModel),
            other => Err(Error::Validation(format!("unknown model kind `{other}`"))),
        }
    }
}

/// A latent-effect specification bound to a graph.
#[derive(Debug, Clone)]
pub struct LatentModel {
    kind: ModelKind,
    k: usize,
    graph: Arc<ArealGraph>,
    alpha_range: (f64, f64),
    admissible: (f64, f64),
    n_components: usize,
    mmodel_tau: f64,
    wishart_r: usize,
    wishart_rate: DMatrix<f64>,
}

impl LatentModel {
    /// Build a model with the default autocorrelation range (0, 1), Wishart
    /// degrees of freedom r = K with identity rate, and M-model precision
    /// 0.001.
    pub fn new(kind: ModelKind, k: usize, graph: Arc<ArealGraph>) -> Result<Self> {
        if k == 0 {
            return Err(Error::Validation(
                "number of variables K must be >= 1".into(),
            ));
        }
        if graph.min_degree() == 0 {
            return Err(Error::Validation(
                "graph has a region without neighbors; all latent models require n_i >= 1".into(),
            ));
        }
        let admissible = car::alpha_bounds(&graph);
        let (_, n_components) = graph.connected_components();
        Ok(Self {
            kind,
            k,
            graph,
            alpha_range: (0.0, 1.0),
            admissible,
            n_components,
            mmodel_tau: 0.001,
            wishart_r: k,
            wishart_rate: DMatrix::identity(k, k),
        })
    }

    /// Restrict the autocorrelation to a user range; must be contained in
    /// the admissible interval.
    pub fn with_alpha_range(mut self, lo: f64, hi: f64) -> Result<Self> {
        let (adm_lo, adm_hi) = self.admissible;
        if !(lo < hi && lo >= adm_lo && hi <= adm_hi) {
            return Err(Error::Domain(format!(
                "alpha range ({lo}, {hi}) not contained in admissible ({adm_lo}, {adm_hi})"
            )));
        }
        self.alpha_range = (lo, hi);
        Ok(self)
    }

    /// Fixed M-model prior precision (default 0.001).
    pub fn with_mmodel_tau(mut self, tau: f64) -> Result<Self> {
        if !(tau > 0.0) {
            return Err(Error::Domain("mmodel tau must be positive".into()));
        }
        self.mmodel_tau = tau;
        Ok(self)
    }

    /// Wishart prior parameters for the dense between-variable precision:
    /// degrees of freedom `r` and the K x K rate matrix `R` (the density
    /// carries `exp(-tr(R X)/2)`).
    pub fn with_wishart(mut self, r: usize, rate: DMatrix<f64>) -> Result<Self> {
        if r < self.k {
            return Err(Error::Domain(format!(
                "wishart degrees of freedom {r} below K = {}",
                self.k
            )));
        }
        if rate.nrows() != self.k || rate.ncols() != self.k {
            return Err(Error::DimensionMismatch {
                expected: self.k,
                got: rate.nrows(),
            });
        }
        self.wishart_rate = rate;
        self.wishart_r = r;
        Ok(self)
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn n_variables(&self) -> usize {
        self.k
    }

    pub fn n_regions(&self) -> usize {
        self.graph.n_regions()
    }

    pub fn graph(&self) -> &Arc<ArealGraph> {
        &self.graph
    }

    pub fn alpha_range(&self) -> (f64, f64) {
        self.alpha_range
    }

    pub fn n_components(&self) -> usize {
        self.n_components
    }

    /// Latent field length I*K.
    pub fn field_dim(&self) -> usize {
        self.k * self.graph.n_regions()
    }

    /// Number of internal hyperparameters.
    pub fn theta_dim(&self) -> usize {
        let k = self.k;
        match self.kind {
            ModelKind::IndepImcar => k,
            ModelKind::IndepPmcar => k + 1,
            ModelKind::Imcar => k * (k + 1) / 2,
            ModelKind::Pmcar => k * (k + 1) / 2 + 1,
            ModelKind::MModel => k + k * k,
        }
    }

    /// Internal-scale coordinate names, ordered as the layout.
    pub fn theta_names(&self) -> Vec<String> {
        let k = self.k;
        let log_taus = |v: &mut Vec<String>| {
            for j in 1..=k {
                v.push(format!("log_tau_{j}"));
            }
        };
        let rho_stars = |v: &mut Vec<String>| {
            for (r, c) in corr_index_pairs(k) {
                v.push(format!("rho_star_{}_{}", r + 1, c + 1));
            }
        };
        let mut names = Vec::with_capacity(self.theta_dim());
        match self.kind {
            ModelKind::IndepImcar => log_taus(&mut names),
            ModelKind::IndepPmcar => {
                names.push("alpha_star".into());
                log_taus(&mut names);
            }
            ModelKind::Imcar => {
                log_taus(&mut names);
                rho_stars(&mut names);
            }
            ModelKind::Pmcar => {
                names.push("alpha_star".into());
                log_taus(&mut names);
                rho_stars(&mut names);
            }
            ModelKind::MModel => {
                for j in 1..=k {
                    names.push(format!("alpha_star_{j}"));
                }
                for col in 1..=k {
                    for row in 1..=k {
                        names.push(format!("m_{row}_{col}"));
                    }
                }
            }
        }
        names
    }

    /// Natural-scale names aligned with [`LatentModel::theta_names`].
    pub fn natural_names(&self) -> Vec<String> {
        self.theta_names()
            .iter()
            .map(|n| {
                n.replace("log_tau_", "var_")
                    .replace("rho_star_", "rho_")
                    .replace("alpha_star", "alpha")
            })
            .collect()
    }

    /// Starting point for hyperparameter optimization: zeros, except
    /// intrinsic log-precisions start at 1 and M-model loadings start at
    /// the identity (the zero matrix is singular).
    pub fn default_theta_init(&self) -> HyperVector {
        let mut v = vec![0.0; self.theta_dim()];
        match self.kind {
            ModelKind::IndepImcar => v.iter_mut().for_each(|x| *x = 1.0),
            ModelKind::Imcar => v[..self.k].iter_mut().for_each(|x| *x = 1.0),
            ModelKind::MModel => {
                for j in 0..self.k {
                    v[self.k + j * self.k + j] = 1.0;
                }
            }
            _ => {}
        }
        HyperVector::new(self, v).expect("default layout is valid")
    }

    /// Internal -> natural transform. Fails with `InvalidHyperparameters`
    /// when the implied between-variable covariance is not positive
    /// definite; inference treats that as a rejected point.
    pub fn to_natural(&self, theta: &HyperVector) -> Result<NaturalParams> {
        self.check_layout(theta)?;
        let k = self.k;
        let t = theta.values();
        let (lo, hi) = self.alpha_range;
        match self.kind {
            ModelKind::IndepImcar | ModelKind::IndepPmcar => {
                let (alpha, taus) = if self.kind == ModelKind::IndepPmcar {
                    (
                        Some(AlphaParam::Common(lo + (hi - lo) * expit(t[0]))),
                        &t[1..],
                    )
                } else {
                    (None, t)
                };
                let variances: Vec<f64> = taus.iter().map(|&x| (-x).exp()).collect();
                let between =
                    DMatrix::from_diagonal(&DVector::from_iterator(k, variances.iter().copied()));
                Ok(NaturalParams {
                    variances,
                    correlations: DMatrix::identity(k, k),
                    alpha,
                    m: None,
                    lambda_inv: Some(between.clone()),
                    between_cov: between,
                })
            }
            ModelKind::Imcar | ModelKind::Pmcar => {
                let (alpha, rest) = if self.kind == ModelKind::Pmcar {
                    (
                        Some(AlphaParam::Common(lo + (hi - lo) * expit(t[0]))),
                        &t[1..],
                    )
                } else {
                    (None, t)
                };
                let variances: Vec<f64> = rest[..k].iter().map(|&x| (-x).exp()).collect();
                let rhos: Vec<f64> = rest[k..].iter().map(|&x| 2.0 * expit(x) - 1.0).collect();
                let lambda_inv = assemble_lambda_inv(&variances, &rhos);
                if lambda_inv.clone().cholesky().is_none() {
                    return Err(Error::InvalidHyperparameters(
                        "between-variable covariance is not positive definite".into(),
                    ));
                }
                let mut correlations = DMatrix::identity(k, k);
                for (&rho, (r, c)) in rhos.iter().zip(corr_index_pairs(k)) {
                    correlations[(r, c)] = rho;
                    correlations[(c, r)] = rho;
                }
                Ok(NaturalParams {
                    variances,
                    correlations,
                    alpha,
                    m: None,
                    lambda_inv: Some(lambda_inv.clone()),
                    between_cov: lambda_inv,
                })
            }
            ModelKind::MModel => {
                let alphas: Vec<f64> = t[..k].iter().map(|&x| lo + (hi - lo) * expit(x)).collect();
                let m = DMatrix::from_column_slice(k, k, &t[k..]);
                let between = m.transpose() * &m;
                let variances: Vec<f64> = (0..k).map(|j| between[(j, j)]).collect();
                let mut correlations = DMatrix::identity(k, k);
                for (r, c) in corr_index_pairs(k) {
                    let denom = (variances[r] * variances[c]).sqrt();
                    let rho = if denom > 0.0 { between[(r, c)] / denom } else { 0.0 };
                    correlations[(r, c)] = rho;
                    correlations[(c, r)] = rho;
                }
                Ok(NaturalParams {
                    variances,
                    correlations,
                    alpha: Some(AlphaParam::PerVariable(alphas)),
                    m: Some(m),
                    lambda_inv: None,
                    between_cov: between,
                })
            }
        }
    }

    /// Natural -> internal transform; inverse of [`LatentModel::to_natural`].
    pub fn from_natural(&self, p: &NaturalParams) -> Result<HyperVector> {
        let k = self.k;
        let (lo, hi) = self.alpha_range;
        let common_alpha = |p: &NaturalParams| -> Result<f64> {
            match &p.alpha {
                Some(AlphaParam::Common(a)) => {
                    if !(*a > lo && *a < hi) {
                        return Err(Error::Domain(format!(
                            "alpha = {a} outside range ({lo}, {hi})"
                        )));
                    }
                    Ok(logit((a - lo) / (hi - lo)))
                }
                _ => Err(Error::Domain("model needs a common alpha".into())),
            }
        };
        let log_taus = |p: &NaturalParams| -> Result<Vec<f64>> {
            if p.variances.len() != k {
                return Err(Error::DimensionMismatch {
                    expected: k,
                    got: p.variances.len(),
                });
            }
            p.variances
                .iter()
                .map(|&v| {
                    if !(v > 0.0) {
                        Err(Error::Domain(format!("variance {v} must be positive")))
                    } else {
                        Ok(-v.ln())
                    }
                })
                .collect()
        };
        let rho_stars = |p: &NaturalParams| -> Result<Vec<f64>> {
            corr_index_pairs(k)
                .into_iter()
                .map(|(r, c)| {
                    let rho = p.correlations[(r, c)];
                    if !(rho > -1.0 && rho < 1.0) {
                        Err(Error::Domain(format!("correlation {rho} outside (-1, 1)")))
                    } else {
                        Ok(logit((rho + 1.0) / 2.0))
                    }
                })
                .collect()
        };

        let mut v = Vec::with_capacity(self.theta_dim());
        match self.kind {
            ModelKind::IndepImcar => v.extend(log_taus(p)?),
            ModelKind::IndepPmcar => {
                v.push(common_alpha(p)?);
                v.extend(log_taus(p)?);
            }
            ModelKind::Imcar => {
                v.extend(log_taus(p)?);
                v.extend(rho_stars(p)?);
            }
            ModelKind::Pmcar => {
                v.push(common_alpha(p)?);
                v.extend(log_taus(p)?);
                v.extend(rho_stars(p)?);
            }
            ModelKind::MModel => {
                let alphas = match &p.alpha {
                    Some(AlphaParam::PerVariable(a)) if a.len() == k => a,
                    _ => {
                        return Err(Error::Domain(
                            "M-model needs one alpha per variable".into(),
                        ))
                    }
                };
                for &a in alphas {
                    if !(a > lo && a < hi) {
                        return Err(Error::Domain(format!(
                            "alpha = {a} outside range ({lo}, {hi})"
                        )));
                    }
                    v.push(logit((a - lo) / (hi - lo)));
                }
                let m = p
                    .m
                    .as_ref()
                    .ok_or_else(|| Error::Domain("M-model needs a loading matrix".into()))?;
                if m.nrows() != k || m.ncols() != k {
                    return Err(Error::DimensionMismatch {
                        expected: k,
                        got: m.nrows(),
                    });
                }
                v.extend(m.iter().copied()); // column-major
            }
        }
        HyperVector::new(self, v)
    }

    /// Per-coordinate natural values aligned with `natural_names`: variances
    /// for log-precisions, correlations for their logits, autocorrelations
    /// for theirs, loadings unchanged.
    pub fn natural_coordinates(&self, theta: &HyperVector) -> Vec<f64> {
        let (lo, hi) = self.alpha_range;
        let t = theta.values();
        let k = self.k;
        let mut out = Vec::with_capacity(t.len());
        match self.kind {
            ModelKind::IndepImcar => out.extend(t.iter().map(|&x| (-x).exp())),
            ModelKind::IndepPmcar => {
                out.push(lo + (hi - lo) * expit(t[0]));
                out.extend(t[1..].iter().map(|&x| (-x).exp()));
            }
            ModelKind::Imcar => {
                out.extend(t[..k].iter().map(|&x| (-x).exp()));
                out.extend(t[k..].iter().map(|&x| 2.0 * expit(x) - 1.0));
            }
            ModelKind::Pmcar => {
                out.push(lo + (hi - lo) * expit(t[0]));
                out.extend(t[1..=k].iter().map(|&x| (-x).exp()));
                out.extend(t[k + 1..].iter().map(|&x| 2.0 * expit(x) - 1.0));
            }
            ModelKind::MModel => {
                out.extend(t[..k].iter().map(|&x| lo + (hi - lo) * expit(x)));
                out.extend(t[k..].iter().copied());
            }
        }
        out
    }

    /// Sparse precision of vec(Theta), dimension IK x IK.
    pub fn precision(&self, theta: &HyperVector) -> Result<SparseSym> {
        self.check_layout(theta)?;
        let t = theta.values();
        let k = self.k;
        let g = self.graph.as_ref();
        let (lo, hi) = self.alpha_range;
        match self.kind {
            ModelKind::IndepImcar => {
                let lambda =
                    DMatrix::from_diagonal(&DVector::from_iterator(k, t.iter().map(|&x| x.exp())));
                kron_dense_sparse(&lambda, &car::structural_matrix(g, 1.0))
            }
            ModelKind::IndepPmcar => {
                let alpha = lo + (hi - lo) * expit(t[0]);
                let lambda = DMatrix::from_diagonal(&DVector::from_iterator(
                    k,
                    t[1..].iter().map(|&x| x.exp()),
                ));
                kron_dense_sparse(&lambda, &car::structural_matrix(g, alpha))
            }
            ModelKind::Imcar | ModelKind::Pmcar => {
                let (alpha, sub) = if self.kind == ModelKind::Pmcar {
                    (lo + (hi - lo) * expit(t[0]), &t[1..])
                } else {
                    (1.0, t)
                };
                let lambda = lambda_from_internal(k, sub)?;
                kron_dense_sparse(&lambda, &car::structural_matrix(g, alpha))
            }
            ModelKind::MModel => {
                let m = DMatrix::from_column_slice(k, k, &t[k..]);
                let det = m.clone().lu().determinant();
                let norm = m.norm();
                if det.abs() < 1e-12 * norm.powi(k as i32) {
                    return Err(Error::InvalidHyperparameters(format!(
                        "loading matrix is singular (|det| = {:.3e})",
                        det.abs()
                    )));
                }
                let u = m.clone().try_inverse().ok_or_else(|| {
                    Error::InvalidHyperparameters("loading matrix not invertible".into())
                })?;
                let alphas: Vec<f64> = t[..k].iter().map(|&x| lo + (hi - lo) * expit(x)).collect();
                // precision = (U x I) blockdiag(D - alpha_j W) (U^T x I)
                //           = (U U^T) x D - (U diag(alpha) U^T) x W, U = M^{-1}
                let a_coef = &u * u.transpose();
                let mut b_coef = DMatrix::zeros(k, k);
                for j in 0..k {
                    for r in 0..k {
                        for c in 0..k {
                            b_coef[(r, c)] -= u[(r, j)] * alphas[j] * u[(c, j)];
                        }
                    }
                }
                let degree = degree_diagonal(g);
                let adjacency = g.adjacency_matrix();
                let q_d = kron_dense_sparse(&a_coef, &degree)?;
                let q_w = kron_dense_sparse(&b_coef, &adjacency)?;
                q_d.add_scaled(&q_w, 1.0)
            }
        }
    }

    /// Log prior density of the internal hyperparameters, up to an additive
    /// constant that is fixed per model.
    pub fn log_prior(&self, theta: &HyperVector) -> Result<f64> {
        self.check_layout(theta)?;
        let t = theta.values();
        let k = self.k;
        let (lo, hi) = self.alpha_range;
        // uniform-on-sigma prior expressed in theta = log tau
        let sigma_terms = |ts: &[f64]| -> f64 { ts.iter().map(|&x| -x / 2.0).sum() };
        match self.kind {
            ModelKind::IndepImcar => Ok(sigma_terms(t)),
            ModelKind::IndepPmcar => {
                Ok(alpha_star_log_density(t[0], lo, hi) + sigma_terms(&t[1..]))
            }
            ModelKind::Imcar => self.wishart_with_jacobian(t),
            ModelKind::Pmcar => {
                Ok(alpha_star_log_density(t[0], lo, hi) + self.wishart_with_jacobian(&t[1..])?)
            }
            ModelKind::MModel => {
                let mut total = 0.0;
                for &a in &t[..k] {
                    total += alpha_star_log_density(a, lo, hi);
                }
                let m = DMatrix::from_column_slice(k, k, &t[k..]);
                let mtm = m.transpose() * &m;
                // Wishart with nu = K and rate tau*I evaluated at M^T M;
                // the many-to-one map M -> M^T M carries no Jacobian here.
                let rate = DMatrix::identity(k, k) * self.mmodel_tau;
                total += wishart_log_density(&mtm, k as f64, &rate)?;
                Ok(total)
            }
        }
    }

    // Wishart prior on Lambda^{-1} plus the numeric log-Jacobian of the
    // (log tau, rho*) -> vech(Lambda^{-1}) reparameterization.
    fn wishart_with_jacobian(&self, sub: &[f64]) -> Result<f64> {
        let k = self.k;
        let lambda_inv = lambda_inv_from_internal(k, sub);
        let wish = wishart_log_density(&lambda_inv, self.wishart_r as f64, &self.wishart_rate)?;
        let q = sub.len();
        let h = 1e-6;
        let mut jac = DMatrix::zeros(q, q);
        let mut probe = sub.to_vec();
        for b in 0..q {
            let orig = probe[b];
            probe[b] = orig + h;
            let up = vech_lower(&lambda_inv_from_internal(k, &probe));
            probe[b] = orig - h;
            let dn = vech_lower(&lambda_inv_from_internal(k, &probe));
            probe[b] = orig;
            for a in 0..q {
                jac[(a, b)] = (up[a] - dn[a]) / (2.0 * h);
            }
        }
        let det = jac.lu().determinant();
        if !(det.abs() > 0.0) || !det.is_finite() {
            return Err(Error::InvalidHyperparameters(
                "singular reparameterization Jacobian".into(),
            ));
        }
        Ok(wish + det.abs().ln())
    }

    /// Sum-to-zero constraints for intrinsic kinds: one row per
    /// (variable, connected component), summing that variable's effects over
    /// the component; `None` for proper kinds and the M-model.
    pub fn constraints(&self) -> Option<ConstraintSet> {
        if !self.kind.is_intrinsic() {
            return None;
        }
        let i = self.graph.n_regions();
        let (labels, c) = self.graph.connected_components();
        let rows = self.k * c;
        let mut a = DMatrix::zeros(rows, self.k * i);
        for var in 0..self.k {
            for comp in 1..=c {
                let row = var * c + (comp - 1);
                for (region, &label) in labels.iter().enumerate() {
                    if label == comp {
                        a[(row, var * i + region)] = 1.0;
                    }
                }
            }
        }
        Some(
            ConstraintSet::new(a, DVector::zeros(rows))
                .expect("component indicator rows are independent"),
        )
    }

    /// Draw the latent field, constrained for intrinsic kinds, reshaped to
    /// one column per variable.
    pub fn sample_effects<R: Rng + ?Sized>(
        &self,
        theta: &HyperVector,
        rng: &mut R,
    ) -> Result<DMatrix<f64>> {
        let q = self.precision(theta)?;
        let policy = if self.kind.is_intrinsic() {
            JitterPolicy::Auto
        } else {
            JitterPolicy::Strict
        };
        let factor = q.cholesky(policy)?;
        let constraints = self.constraints();
        let x = sample_gmrf(&factor, constraints.as_ref(), rng)?;
        let i = self.graph.n_regions();
        Ok(DMatrix::from_fn(i, self.k, |r, c| x[c * i + r]))
    }

    fn check_layout(&self, theta: &HyperVector) -> Result<()> {
        if theta.len() != self.theta_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.theta_dim(),
                got: theta.len(),
            });
        }
        Ok(())
    }
}

/// Internal-scale hyperparameter vector with a model-defined layout.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperVector {
    values: Vec<f64>,
}

impl HyperVector {
    pub fn new(model: &LatentModel, values: Vec<f64>) -> Result<Self> {
        if values.len() != model.theta_dim() {
            return Err(Error::DimensionMismatch {
                expected: model.theta_dim(),
                got: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("non-finite hyperparameter".into()));
        }
        Ok(Self { values })
    }

    /// For inference internals probing arbitrary points; layout unchecked.
    pub(crate) fn from_unchecked(values: Vec<f64>) -> Self {
        Self { values }
    }

    /// Raw constructor without layout validation; for synthetic test
    /// fixtures and optimizer probes.
    pub fn from_raw(values: Vec<f64>) -> Self {
        Self { values }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Common or per-variable autocorrelation.
#[derive(Debug, Clone, PartialEq)]
pub enum AlphaParam {
    Common(f64),
    PerVariable(Vec<f64>),
}

/// Natural-scale parameters: marginal variances, correlations, optional
/// autocorrelation(s), optional loading matrix, and the between-variable
/// covariance (Lambda^{-1} for MCAR kinds, M^T M for the M-model).
#[derive(Debug, Clone)]
pub struct NaturalParams {
    pub variances: Vec<f64>,
    pub correlations: DMatrix<f64>,
    pub alpha: Option<AlphaParam>,
    pub m: Option<DMatrix<f64>>,
    pub lambda_inv: Option<DMatrix<f64>>,
    pub between_cov: DMatrix<f64>,
}

/// Column-wise lower-triangle pairs (row > col), the correlation layout.
pub fn corr_index_pairs(k: usize) -> Vec<(usize, usize)> {
    let mut pairs = Vec::with_capacity(k.saturating_sub(1) * k / 2);
    for c in 0..k {
        for r in (c + 1)..k {
            pairs.push((r, c));
        }
    }
    pairs
}

/// Between-variable covariance from marginal variances and correlations:
/// diagonal 1/tau_j, off-diagonal rho_jk / sqrt(tau_j tau_k).
pub fn assemble_lambda_inv(variances: &[f64], rhos: &[f64]) -> DMatrix<f64> {
    let k = variances.len();
    let mut m = DMatrix::zeros(k, k);
    for j in 0..k {
        m[(j, j)] = variances[j];
    }
    for (&rho, (r, c)) in rhos.iter().zip(corr_index_pairs(k)) {
        let v = rho * (variances[r] * variances[c]).sqrt();
        m[(r, c)] = v;
        m[(c, r)] = v;
    }
    m
}

fn lambda_inv_from_internal(k: usize, sub: &[f64]) -> DMatrix<f64> {
    let variances: Vec<f64> = sub[..k].iter().map(|&x| (-x).exp()).collect();
    let rhos: Vec<f64> = sub[k..].iter().map(|&x| 2.0 * expit(x) - 1.0).collect();
    assemble_lambda_inv(&variances, &rhos)
}

// Lambda = diag(sqrt(tau)) R^{-1} diag(sqrt(tau)) from the internal
// (log tau, rho*) coordinates, inverting the correlation matrix R rather
// than Lambda^{-1} itself; the independence reduction (R = I) is then exact.
fn lambda_from_internal(k: usize, sub: &[f64]) -> Result<DMatrix<f64>> {
    let taus: Vec<f64> = sub[..k].iter().map(|&x| x.exp()).collect();
    let mut corr = DMatrix::identity(k, k);
    for (&r_star, (r, c)) in sub[k..].iter().zip(corr_index_pairs(k)) {
        let rho = 2.0 * expit(r_star) - 1.0;
        corr[(r, c)] = rho;
        corr[(c, r)] = rho;
    }
    let corr_inv = corr
        .cholesky()
        .ok_or_else(|| {
            Error::InvalidHyperparameters(
                "between-variable covariance is not positive definite".into(),
            )
        })?
        .inverse();
    let mut lambda = DMatrix::zeros(k, k);
    for i in 0..k {
        lambda[(i, i)] = corr_inv[(i, i)] * taus[i];
        for j in 0..i {
            let v = corr_inv[(i, j)] * (taus[i] * taus[j]).sqrt();
            lambda[(i, j)] = v;
            lambda[(j, i)] = v;
        }
    }
    Ok(lambda)
}

/// Column-wise lower triangle (diagonal included) of a symmetric matrix.
pub fn vech_lower(m: &DMatrix<f64>) -> Vec<f64> {
    let k = m.nrows();
    let mut out = Vec::with_capacity(k * (k + 1) / 2);
    for c in 0..k {
        for r in c..k {
            out.push(m[(r, c)]);
        }
    }
    out
}

/// Log density of the internal alpha* coordinate under a uniform prior on
/// alpha: the log-Jacobian of the scaled-logit map,
/// log(hi - lo) + log expit(a*) + log(1 - expit(a*)), up to a constant.
fn alpha_star_log_density(a_star: f64, lo: f64, hi: f64) -> f64 {
    // log expit(x) = -ln(1 + exp(-x)), stable on both tails
    let log_e = -(-a_star).exp().ln_1p();
    let log_1me = -a_star.exp().ln_1p();
    (hi - lo).ln() + log_e + log_1me
}

/// Full Wishart_K(nu, rate^{-1}) log density at X (rate convention: the
/// exponent carries -tr(rate * X)/2).
pub fn wishart_log_density(x: &DMatrix<f64>, nu: f64, rate: &DMatrix<f64>) -> Result<f64> {
    let k = x.nrows();
    let chol = x.clone().cholesky().ok_or_else(|| {
        Error::InvalidHyperparameters("Wishart argument is not positive definite".into())
    })?;
    let logdet_x = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let logdet_rate = rate
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Domain("Wishart rate matrix is not positive definite".into()))?
        .l()
        .diagonal()
        .iter()
        .map(|v| 2.0 * v.ln())
        .sum::<f64>();
    let trace = (rate * x).trace();
    let kf = k as f64;
    Ok(
        0.5 * (nu - kf - 1.0) * logdet_x - 0.5 * trace - 0.5 * nu * kf * std::f64::consts::LN_2
            + 0.5 * nu * logdet_rate
            - ln_multigamma(kf, nu / 2.0),
    )
}

fn ln_multigamma(k: f64, a: f64) -> f64 {
    let mut total = k * (k - 1.0) / 4.0 * std::f64::consts::PI.ln();
    let mut j = 1.0;
    while j <= k {
        total += ln_gamma(a + (1.0 - j) / 2.0);
        j += 1.0;
    }
    total
}

fn degree_diagonal(g: &ArealGraph) -> SparseSym {
    let triplets: Vec<_> = g
        .neighbor_counts()
        .iter()
        .enumerate()
        .map(|(i, &c)| (i, i, c as f64))
        .collect();
    SparseSym::from_triplets(g.n_regions(), &triplets).expect("diagonal is valid")
}

pub(crate) fn expit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testing::{path_graph, test_rng};
    use approx::assert_abs_diff_eq;
    use rand::RngExt;

    fn model(kind: ModelKind, k: usize, n: usize) -> LatentModel {
        LatentModel::new(kind, k, Arc::new(path_graph(n))).unwrap()
    }

    #[test]
    fn theta_dim_matches_hyperparameter_counts() {
        for k in 1..=5usize {
            let g = Arc::new(path_graph(4));
            let dims: Vec<usize> = ModelKind::ALL
                .iter()
                .map(|&kind| LatentModel::new(kind, k, g.clone()).unwrap().theta_dim())
                .collect();
            assert_eq!(
                dims,
                vec![k, k + 1, k * (k + 1) / 2, k * (k + 1) / 2 + 1, k + k * k]
            );
        }
        assert_eq!(model(ModelKind::Imcar, 3, 4).theta_dim(), 6);
        assert_eq!(model(ModelKind::Pmcar, 2, 4).theta_dim(), 4);
        assert_eq!(model(ModelKind::MModel, 3, 4).theta_dim(), 12);
    }

    #[test]
    fn transform_midpoints() {
        let m = model(ModelKind::Pmcar, 2, 3);
        let theta = HyperVector::new(&m, vec![0.0, 0.0, 0.0, 0.0]).unwrap();
        let p = m.to_natural(&theta).unwrap();
        assert_eq!(p.alpha, Some(AlphaParam::Common(0.5)));
        assert_abs_diff_eq!(p.variances[0], 1.0);
        assert_eq!(p.correlations[(1, 0)], 0.0);
    }

    #[test]
    fn rho_transform_closed_form() {
        // rho = 0.6 -> rho* = logit(0.8) = ln 4
        let m = model(ModelKind::Imcar, 2, 3);
        let p = NaturalParams {
            variances: vec![1.0, 1.0],
            correlations: {
                let mut c = DMatrix::identity(2, 2);
                c[(1, 0)] = 0.6;
                c[(0, 1)] = 0.6;
                c
            },
            alpha: None,
            m: None,
            lambda_inv: None,
            between_cov: DMatrix::identity(2, 2),
        };
        let theta = m.from_natural(&p).unwrap();
        assert_abs_diff_eq!(theta.values()[2], 4.0f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn round_trip_all_kinds() {
        let mut rng = test_rng(9);
        for &kind in &ModelKind::ALL {
            let m = model(kind, 3, 5);
            for _ in 0..200 {
                let theta = HyperVector::new(
                    &m,
                    (0..m.theta_dim())
                        .map(|_| rng.random_range(-1.5..1.5))
                        .collect(),
                )
                .unwrap();
                let natural = match m.to_natural(&theta) {
                    Ok(p) => p,
                    Err(Error::InvalidHyperparameters(_)) => continue,
                    Err(e) => panic!("unexpected error {e}"),
                };
                let back = m.from_natural(&natural).unwrap();
                for (a, b) in theta.values().iter().zip(back.values()) {
                    assert!((a - b).abs() < 1e-12, "{kind:?}: {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn indep_imcar_precision_is_block_diagonal() {
        let m = model(ModelKind::IndepImcar, 2, 3);
        let theta = HyperVector::new(&m, vec![0.0, 0.0]).unwrap();
        let q = m.precision(&theta).unwrap().to_dense();
        let s = car::intrinsic_precision(&path_graph(3)).unwrap().to_dense();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(q[(i, j)], s[(i, j)]);
                assert_eq!(q[(3 + i, 3 + j)], s[(i, j)]);
                assert_eq!(q[(i, 3 + j)], 0.0);
            }
        }
    }

    #[test]
    fn imcar_reduces_to_independent_at_zero_correlation() {
        let mi = model(ModelKind::Imcar, 2, 4);
        let mind = model(ModelKind::IndepImcar, 2, 4);
        let ti = HyperVector::new(&mi, vec![0.3, -0.2, 0.0]).unwrap();
        let tind = HyperVector::new(&mind, vec![0.3, -0.2]).unwrap();
        let qi = mi.precision(&ti).unwrap().to_dense();
        let qind = mind.precision(&tind).unwrap().to_dense();
        assert_eq!(qi, qind);
    }

    #[test]
    fn pmcar_reduces_to_independent_at_zero_correlation() {
        let mp = model(ModelKind::Pmcar, 2, 4);
        let mind = model(ModelKind::IndepPmcar, 2, 4);
        let tp = HyperVector::new(&mp, vec![0.7, 0.3, -0.2, 0.0]).unwrap();
        let tind = HyperVector::new(&mind, vec![0.7, 0.3, -0.2]).unwrap();
        assert_eq!(
            mp.precision(&tp).unwrap().to_dense(),
            mind.precision(&tind).unwrap().to_dense()
        );
    }

    #[test]
    fn singular_loading_matrix_rejected() {
        let m = model(ModelKind::MModel, 2, 3);
        let theta = HyperVector::new(&m, vec![0.0, 0.0, 1.0, 1.0, 1.0, 1.0]).unwrap();
        assert!(matches!(
            m.precision(&theta),
            Err(Error::InvalidHyperparameters(_))
        ));
    }

    #[test]
    fn log_prior_closed_form_indep_imcar() {
        let m = model(ModelKind::IndepImcar, 2, 3);
        let t1 = HyperVector::new(&m, vec![0.4, -0.8]).unwrap();
        let t2 = HyperVector::new(&m, vec![1.0, 0.5]).unwrap();
        let diff = m.log_prior(&t1).unwrap() - m.log_prior(&t2).unwrap();
        let want = -(0.4 - 1.0) / 2.0 - (-0.8 - 0.5) / 2.0;
        assert_abs_diff_eq!(diff, want, epsilon = 1e-12);
    }

    #[test]
    fn alpha_prior_term_is_symmetric() {
        let v1 = alpha_star_log_density(1.3, 0.0, 1.0);
        let v2 = alpha_star_log_density(-1.3, 0.0, 1.0);
        assert_abs_diff_eq!(v1, v2, epsilon = 1e-12);
    }

    #[test]
    fn wishart_density_at_identity() {
        // Wishart_K(r = K, identity rate) at X = I: logdet terms vanish,
        // leaving -tr(I)/2 - rK/2 ln 2 - ln Gamma_K(r/2)
        for k in 1..=3usize {
            let x = DMatrix::identity(k, k);
            let rate = DMatrix::identity(k, k);
            let nu = k as f64;
            let got = wishart_log_density(&x, nu, &rate).unwrap();
            let kf = k as f64;
            let want = -0.5 * kf - 0.5 * nu * kf * std::f64::consts::LN_2
                - ln_multigamma(kf, nu / 2.0);
            assert_abs_diff_eq!(got, want, epsilon = 1e-12);
        }
    }

    #[test]
    fn constraints_shape_and_pattern() {
        let m = model(ModelKind::Imcar, 2, 3);
        let c = m.constraints().unwrap();
        assert_eq!(c.n_constraints(), 2);
        assert_eq!(c.dim(), 6);
        let a = c.a();
        assert_eq!(
            a.row(0).iter().copied().collect::<Vec<_>>(),
            vec![1.0, 1.0, 1.0, 0.0, 0.0, 0.0]
        );
        assert_eq!(
            a.row(1).iter().copied().collect::<Vec<_>>(),
            vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0]
        );
    }

    #[test]
    fn proper_kinds_have_no_constraints() {
        assert!(model(ModelKind::Pmcar, 2, 3).constraints().is_none());
        assert!(model(ModelKind::IndepPmcar, 2, 3).constraints().is_none());
        assert!(model(ModelKind::MModel, 2, 3).constraints().is_none());
    }

    #[test]
    fn constraints_per_component() {
        let g = Arc::new(ArealGraph::from_edges(4, &[(1, 2), (3, 4)]).unwrap());
        let m = LatentModel::new(ModelKind::IndepImcar, 1, g).unwrap();
        let c = m.constraints().unwrap();
        assert_eq!(c.n_constraints(), 2);
        let a = c.a();
        assert_eq!(
            a.row(0).iter().copied().collect::<Vec<_>>(),
            vec![1.0, 1.0, 0.0, 0.0]
        );
        assert_eq!(
            a.row(1).iter().copied().collect::<Vec<_>>(),
            vec![0.0, 0.0, 1.0, 1.0]
        );
    }

    #[test]
    fn intrinsic_samples_sum_to_zero() {
        let m = model(ModelKind::Imcar, 2, 5);
        let theta = HyperVector::new(&m, vec![0.5, 0.5, 0.3]).unwrap();
        let mut rng = test_rng(4);
        for _ in 0..10 {
            let draw = m.sample_effects(&theta, &mut rng).unwrap();
            for c in 0..2 {
                assert!(draw.column(c).sum().abs() < 1e-10);
            }
        }
    }

    #[test]
    fn alpha_range_must_be_admissible() {
        let g = Arc::new(path_graph(3));
        let m = LatentModel::new(ModelKind::Pmcar, 2, g).unwrap();
        assert!(m.clone().with_alpha_range(0.0, 1.5).is_err());
        assert!(m.with_alpha_range(0.2, 0.9).is_ok());
    }

    #[test]
    fn zero_neighbor_region_rejected_by_all_constructors() {
        let g = Arc::new(ArealGraph::from_edges(3, &[(1, 2)]).unwrap());
        for &kind in &ModelKind::ALL {
            assert!(LatentModel::new(kind, 2, g.clone()).is_err());
        }
    }
}
