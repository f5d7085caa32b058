//! Poisson count-model assembly: observations, offsets, per-variable
//! intercepts and covariate coefficients, and the mapping from the augmented
//! latent vector to linear predictors.
//!
//! Cells are ordered variable-major: cell `r = k*I + i` is region `i` of
//! variable `k`, matching the latent field layout.

use std::io::Write as _;
use std::path::Path;

use nalgebra::DMatrix;
use statrs::function::gamma::ln_gamma;

use crate::error::Error;
use crate::Result;

/// Linear predictors above this value signal a divergent fit.
pub const ETA_OVERFLOW_GUARD: f64 = 30.0;

/// Observed and expected counts for I regions and K variables, plus named
/// covariates (one value per cell).
#[derive(Debug, Clone)]
pub struct CountData {
    i: usize,
    k: usize,
    observed: Vec<f64>,
    expected: Vec<f64>,
    variables: Vec<String>,
    covariates: Vec<(String, Vec<f64>)>,
}

impl CountData {
    pub fn new(
        i: usize,
        k: usize,
        observed: Vec<f64>,
        expected: Vec<f64>,
        variables: Vec<String>,
    ) -> Result<Self> {
        if observed.len() != i * k || expected.len() != i * k {
            return Err(Error::DimensionMismatch {
                expected: i * k,
                got: observed.len().min(expected.len()),
            });
        }
        if variables.len() != k {
            return Err(Error::DimensionMismatch {
                expected: k,
                got: variables.len(),
            });
        }
        for (idx, &y) in observed.iter().enumerate() {
            if !(y >= 0.0 && y.fract() == 0.0 && y.is_finite()) {
                return Err(Error::Validation(format!(
                    "observed count at cell {idx} is not a nonnegative integer"
                )));
            }
        }
        for (idx, &e) in expected.iter().enumerate() {
            if !(e > 0.0 && e.is_finite()) {
                return Err(Error::Validation(format!(
                    "expected count at cell {idx} must be positive"
                )));
            }
        }
        Ok(Self {
            i,
            k,
            observed,
            expected,
            variables,
            covariates: Vec::new(),
        })
    }

    pub fn with_covariate(mut self, name: impl Into<String>, values: Vec<f64>) -> Result<Self> {
        if values.len() != self.i * self.k {
            return Err(Error::DimensionMismatch {
                expected: self.i * self.k,
                got: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation(
                "covariate value missing or non-finite where an observation exists".into(),
            ));
        }
        self.covariates.push((name.into(), values));
        Ok(self)
    }

    pub fn n_regions(&self) -> usize {
        self.i
    }

    pub fn n_variables(&self) -> usize {
        self.k
    }

    pub fn n_cells(&self) -> usize {
        self.i * self.k
    }

    /// Variable labels in data order (defines the index k).
    pub fn variables(&self) -> &[String] {
        &self.variables
    }

    pub fn observed(&self) -> &[f64] {
        &self.observed
    }

    pub fn expected(&self) -> &[f64] {
        &self.expected
    }

    pub fn covariate_names(&self) -> Vec<&str> {
        self.covariates.iter().map(|(n, _)| n.as_str()).collect()
    }

    pub fn covariate(&self, name: &str) -> Option<&[f64]> {
        self.covariates
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_slice())
    }

    /// Keep only the cells of the first `regions` regions (induced
    /// subsample; the graph must be cut to match).
    pub fn head_regions(&self, regions: usize) -> Result<CountData> {
        if regions == 0 || regions > self.i {
            return Err(Error::Validation(format!(
                "cannot take {regions} regions out of {}",
                self.i
            )));
        }
        let pick = |v: &[f64]| -> Vec<f64> {
            (0..self.k)
                .flat_map(|k| v[k * self.i..k * self.i + regions].to_vec())
                .collect()
        };
        let mut out = CountData::new(
            regions,
            self.k,
            pick(&self.observed),
            pick(&self.expected),
            self.variables.clone(),
        )?;
        for (name, values) in &self.covariates {
            out = out.with_covariate(name.clone(), pick(values))?;
        }
        Ok(out)
    }

    /// Read the canonical CSV: header `region,variable,observed,expected`
    /// plus optional `cov_<name>` columns; one row per cell.
    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_path(path.as_ref())
            .map_err(|e| Error::Validation(format!("cannot open data file: {e}")))?;
        let headers = reader
            .headers()
            .map_err(|e| Error::Parse {
                line: 1,
                msg: e.to_string(),
            })?
            .clone();
        let expected_prefix = ["region", "variable", "observed", "expected"];
        if headers.len() < 4
            || headers.iter().take(4).map(str::to_ascii_lowercase).ne(
                expected_prefix.iter().map(|s| s.to_string()),
            )
        {
            return Err(Error::Parse {
                line: 1,
                msg: "header must start with `region,variable,observed,expected`".into(),
            });
        }
        let cov_names: Vec<String> = headers
            .iter()
            .skip(4)
            .map(|h| {
                h.strip_prefix("cov_")
                    .map(str::to_string)
                    .ok_or_else(|| Error::Parse {
                        line: 1,
                        msg: format!("extra column `{h}` must be named cov_<name>"),
                    })
            })
            .collect::<Result<_>>()?;

        struct Row {
            region: usize,
            var: String,
            observed: f64,
            expected: f64,
            covs: Vec<f64>,
        }
        let mut rows: Vec<Row> = Vec::new();
        for (idx, record) in reader.records().enumerate() {
            let line = idx + 2;
            let record = record.map_err(|e| Error::Parse {
                line,
                msg: e.to_string(),
            })?;
            if record.len() != 4 + cov_names.len() {
                return Err(Error::Parse {
                    line,
                    msg: format!(
                        "expected {} fields, found {}",
                        4 + cov_names.len(),
                        record.len()
                    ),
                });
            }
            let field = |j: usize| record.get(j).unwrap_or("");
            let region: usize = field(0).parse().map_err(|_| Error::Parse {
                line,
                msg: format!("bad region id `{}`", field(0)),
            })?;
            let observed: f64 = field(2).parse().map_err(|_| Error::Parse {
                line,
                msg: format!("bad observed count `{}`", field(2)),
            })?;
            let expected: f64 = field(3).parse().map_err(|_| Error::Parse {
                line,
                msg: format!("bad expected count `{}`", field(3)),
            })?;
            let covs = (0..cov_names.len())
                .map(|c| {
                    let raw = field(4 + c);
                    if raw.is_empty() || raw.eq_ignore_ascii_case("na") {
                        Err(Error::Validation(format!(
                            "line {line}: covariate value missing where an observation exists"
                        )))
                    } else {
                        raw.parse::<f64>().map_err(|_| Error::Parse {
                            line,
                            msg: format!("bad covariate value `{raw}`"),
                        })
                    }
                })
                .collect::<Result<Vec<f64>>>()?;
            rows.push(Row {
                region,
                var: field(1).to_string(),
                observed,
                expected,
                covs,
            });
        }
        if rows.is_empty() {
            return Err(Error::Validation("data file has no rows".into()));
        }

        let mut variables: Vec<String> = Vec::new();
        for row in &rows {
            if !variables.contains(&row.var) {
                variables.push(row.var.clone());
            }
        }
        let n_regions = rows.iter().map(|r| r.region).max().unwrap_or(0);
        let k = variables.len();
        let cells = n_regions * k;
        let mut observed = vec![f64::NAN; cells];
        let mut expected = vec![f64::NAN; cells];
        let mut covs = vec![vec![f64::NAN; cells]; cov_names.len()];
        for row in &rows {
            if row.region == 0 {
                return Err(Error::Validation("region ids are 1-based".into()));
            }
            let var_idx = variables.iter().position(|v| *v == row.var).unwrap();
            let cell = var_idx * n_regions + (row.region - 1);
            if !observed[cell].is_nan() {
                return Err(Error::Validation(format!(
                    "duplicate cell (region {}, variable {})",
                    row.region, row.var
                )));
            }
            observed[cell] = row.observed;
            expected[cell] = row.expected;
            for (c, v) in row.covs.iter().enumerate() {
                covs[c][cell] = *v;
            }
        }
        if observed.iter().any(|v| v.is_nan()) {
            return Err(Error::Validation(
                "every (region, variable) cell needs a row; some are missing".into(),
            ));
        }
        let mut data = CountData::new(n_regions, k, observed, expected, variables)?;
        for (name, values) in cov_names.into_iter().zip(covs) {
            data = data.with_covariate(name, values)?;
        }
        Ok(data)
    }

    /// Write the canonical CSV; inverse of [`CountData::read_csv`].
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        write!(out, "region,variable,observed,expected")?;
        for (name, _) in &self.covariates {
            write!(out, ",cov_{name}")?;
        }
        writeln!(out)?;
        for (var_idx, var) in self.variables.iter().enumerate() {
            for region in 0..self.i {
                let cell = var_idx * self.i + region;
                write!(
                    out,
                    "{},{},{},{}",
                    region + 1,
                    var,
                    self.observed[cell],
                    self.expected[cell]
                )?;
                for (_, values) in &self.covariates {
                    write!(out, ",{}", values[cell])?;
                }
                writeln!(out)?;
            }
        }
        Ok(())
    }
}

/// Expected counts by internal standardization: `E_{ik} = r_k N_{ik}` with
/// `r_k` the overall rate of variable k. Column sums of the result equal the
/// observed column sums.
pub fn expected_counts(observed: &DMatrix<f64>, population: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if observed.shape() != population.shape() {
        return Err(Error::DimensionMismatch {
            expected: observed.nrows(),
            got: population.nrows(),
        });
    }
    let mut out = population.clone();
    for c in 0..observed.ncols() {
        let pop_sum = population.column(c).sum();
        if !(pop_sum > 0.0) {
            return Err(Error::Validation(format!(
                "population column {c} sums to zero"
            )));
        }
        let rate = observed.column(c).sum() / pop_sum;
        out.column_mut(c).scale_mut(rate);
    }
    Ok(out)
}

/// Standardized mortality ratio, elementwise observed / expected.
pub fn smr(observed: &DMatrix<f64>, expected: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if observed.shape() != expected.shape() {
        return Err(Error::DimensionMismatch {
            expected: observed.nrows(),
            got: expected.nrows(),
        });
    }
    Ok(observed.component_div(expected))
}

/// Gradient and curvature of an observation log-likelihood at a linear
/// predictor.
#[derive(Debug, Clone)]
pub struct LikTerms {
    pub loglik: f64,
    pub grad: Vec<f64>,
    /// Negative second derivative per cell (>= 0).
    pub curvature: Vec<f64>,
}

/// Observation model seen by the inference engine. Implementations must be
/// safe to evaluate from multiple threads.
pub trait ObsLikelihood: Sync {
    fn n_cells(&self) -> usize;
    /// Log-likelihood (constants dropped consistently), gradient and
    /// curvature at `eta`.
    fn terms(&self, eta: &[f64]) -> Result<LikTerms>;
}

/// Poisson likelihood with the offset already inside eta:
/// `loglik = sum(y*eta - exp(eta))` up to the `-ln y!` constant.
#[derive(Debug, Clone)]
pub struct PoissonObs {
    y: Vec<f64>,
}

impl PoissonObs {
    pub fn new(data: &CountData) -> Self {
        Self {
            y: data.observed().to_vec(),
        }
    }

    pub fn from_counts(y: Vec<f64>) -> Self {
        Self { y }
    }
}

impl ObsLikelihood for PoissonObs {
    fn n_cells(&self) -> usize {
        self.y.len()
    }

    fn terms(&self, eta: &[f64]) -> Result<LikTerms> {
        if eta.len() != self.y.len() {
            return Err(Error::DimensionMismatch {
                expected: self.y.len(),
                got: eta.len(),
            });
        }
        let mut loglik = 0.0;
        let mut grad = Vec::with_capacity(eta.len());
        let mut curvature = Vec::with_capacity(eta.len());
        for (&e, &y) in eta.iter().zip(&self.y) {
            if !(e <= ETA_OVERFLOW_GUARD) {
                return Err(Error::InvalidState(format!(
                    "linear predictor {e} beyond overflow guard {ETA_OVERFLOW_GUARD}"
                )));
            }
            let mu = e.exp();
            loglik += y * e - mu;
            grad.push(y - mu);
            curvature.push(mu);
        }
        Ok(LikTerms {
            loglik,
            grad,
            curvature,
        })
    }
}

/// Gaussian pseudo-likelihood `-(1/2) sum c (eta - z)^2`; conjugate seam for
/// validating the Laplace machinery against closed forms.
#[derive(Debug, Clone)]
pub struct GaussianPseudoObs {
    pub z: Vec<f64>,
    pub weight: Vec<f64>,
}

impl ObsLikelihood for GaussianPseudoObs {
    fn n_cells(&self) -> usize {
        self.z.len()
    }

    fn terms(&self, eta: &[f64]) -> Result<LikTerms> {
        if eta.len() != self.z.len() {
            return Err(Error::DimensionMismatch {
                expected: self.z.len(),
                got: eta.len(),
            });
        }
        let mut loglik = 0.0;
        let mut grad = Vec::with_capacity(eta.len());
        for i in 0..eta.len() {
            let r = eta[i] - self.z[i];
            loglik -= 0.5 * self.weight[i] * r * r;
            grad.push(-self.weight[i] * r);
        }
        Ok(LikTerms {
            loglik,
            grad,
            curvature: self.weight.clone(),
        })
    }
}

/// Flat likelihood: prior-only targets for sampler validation.
#[derive(Debug, Clone)]
pub struct NullObs {
    pub n: usize,
}

impl ObsLikelihood for NullObs {
    fn n_cells(&self) -> usize {
        self.n
    }

    fn terms(&self, eta: &[f64]) -> Result<LikTerms> {
        Ok(LikTerms {
            loglik: 0.0,
            grad: vec![0.0; eta.len()],
            curvature: vec![0.0; eta.len()],
        })
    }
}

/// Poisson log-likelihood terms for count data; see [`PoissonObs`].
pub fn poisson_loglik_terms(data: &CountData, eta: &[f64]) -> Result<LikTerms> {
    PoissonObs::new(data).terms(eta)
}

/// Saturated-reference Poisson deviance: `2 sum(y ln(y/mu) - (y - mu))`
/// with `mu = exp(eta)`. Zero cells contribute `2 mu`.
pub fn poisson_deviance(y: &[f64], eta: &[f64]) -> f64 {
    y.iter()
        .zip(eta)
        .map(|(&yi, &e)| {
            let mu = e.exp();
            if yi > 0.0 {
                2.0 * (yi * (yi.ln() - e) - (yi - mu))
            } else {
                2.0 * mu
            }
        })
        .sum()
}

/// Full Poisson log density `y*eta - exp(eta) - ln Gamma(y+1)` per cell.
pub fn poisson_logpdf(y: f64, eta: f64) -> f64 {
    y * eta - eta.exp() - ln_gamma(y + 1.0)
}

/// Deterministic sparse mapping from the augmented field
/// `(vec(Theta), a_1..a_K, beta_{c,k}...)` to linear predictors
/// `eta = log E + theta + a_k + sum_c beta_{c,k} x_{c,ik}`.
#[derive(Debug, Clone)]
pub struct Design {
    i: usize,
    k: usize,
    offsets: Vec<f64>,
    /// fixed-effect columns: intercepts a_1..a_K, then K columns per
    /// covariate, each a sparse list of (cell, value)
    fixed_cols: Vec<Vec<(usize, f64)>>,
    fixed_names: Vec<String>,
}

impl Design {
    /// Build from data, selecting covariates by name. Each selected
    /// covariate contributes K per-variable coefficients; the design zeroes
    /// cross-variable entries.
    pub fn from_data(data: &CountData, use_covariates: &[String]) -> Result<Self> {
        let (i, k) = (data.n_regions(), data.n_variables());
        let offsets: Vec<f64> = data.expected().iter().map(|&e| e.ln()).collect();
        let mut fixed_cols = Vec::new();
        let mut fixed_names = Vec::new();
        for (var_idx, var) in data.variables().iter().enumerate() {
            fixed_cols.push((0..i).map(|r| (var_idx * i + r, 1.0)).collect());
            fixed_names.push(format!("intercept_{var}"));
        }
        for name in use_covariates {
            let values = data.covariate(name).ok_or_else(|| {
                Error::Validation(format!("covariate `{name}` not present in data"))
            })?;
            for (var_idx, var) in data.variables().iter().enumerate() {
                fixed_cols.push(
                    (0..i)
                        .map(|r| {
                            let cell = var_idx * i + r;
                            (cell, values[cell])
                        })
                        .collect(),
                );
                fixed_names.push(format!("{name}_{var}"));
            }
        }
        Ok(Self {
            i,
            k,
            offsets,
            fixed_cols,
            fixed_names,
        })
    }

    /// Offsets only (test seams and simulation).
    pub fn offsets_only(i: usize, k: usize, offsets: Vec<f64>) -> Result<Self> {
        if offsets.len() != i * k {
            return Err(Error::DimensionMismatch {
                expected: i * k,
                got: offsets.len(),
            });
        }
        let mut fixed_cols = Vec::new();
        let mut fixed_names = Vec::new();
        for var_idx in 0..k {
            fixed_cols.push((0..i).map(|r| (var_idx * i + r, 1.0)).collect::<Vec<_>>());
            fixed_names.push(format!("intercept_{}", var_idx + 1));
        }
        Ok(Self {
            i,
            k,
            offsets,
            fixed_cols,
            fixed_names,
        })
    }

    pub fn n_regions(&self) -> usize {
        self.i
    }

    pub fn n_variables(&self) -> usize {
        self.k
    }

    pub fn n_cells(&self) -> usize {
        self.i * self.k
    }

    pub fn n_latent(&self) -> usize {
        self.i * self.k
    }

    pub fn n_fixed(&self) -> usize {
        self.fixed_cols.len()
    }

    /// Augmented-field length n = IK + K(1 + #covariates).
    pub fn n_total(&self) -> usize {
        self.n_latent() + self.n_fixed()
    }

    pub fn fixed_names(&self) -> &[String] {
        &self.fixed_names
    }

    pub fn offsets(&self) -> &[f64] {
        &self.offsets
    }

    pub fn fixed_col_entries(&self, col: usize) -> &[(usize, f64)] {
        &self.fixed_cols[col]
    }

    /// `eta = offset + B x` for the augmented field `x`.
    pub fn linear_predictor(&self, x: &[f64]) -> Vec<f64> {
        let mut eta = self.linear_map(x);
        for (e, o) in eta.iter_mut().zip(&self.offsets) {
            *e += o;
        }
        eta
    }

    /// The linear part `B x` (no offset).
    pub fn linear_map(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.n_total(), "augmented field length mismatch");
        let cells = self.n_cells();
        let mut eta = x[..cells].to_vec();
        for (col, entries) in self.fixed_cols.iter().enumerate() {
            let coef = x[cells + col];
            if coef != 0.0 {
                for &(cell, v) in entries {
                    eta[cell] += coef * v;
                }
            }
        }
        eta
    }

    /// Adjoint `B^T v` of the linear part.
    pub fn transpose_map(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.n_cells(), "cell vector length mismatch");
        let mut out = Vec::with_capacity(self.n_total());
        out.extend_from_slice(v);
        for entries in &self.fixed_cols {
            out.push(entries.iter().map(|&(cell, val)| val * v[cell]).sum());
        }
        out
    }
}
