//! Sparse symmetric matrix kernel: Kronecker assembly with small dense
//! factors, LDL^T factorization with log-determinant, linear solves,
//! constrained correction and (constrained) GMRF sampling.

mod factor;

pub use factor::{CholFactor, JitterPolicy};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngExt};
use rand_distr::StandardNormal;

use crate::error::Error;
use crate::Result;

/// Sparse symmetric matrix stored as the lower triangle (diagonal included)
/// in compressed sparse column form. Structurally symmetric by construction;
/// immutable after assembly.
#[derive(Debug, Clone)]
pub struct SparseSym {
    dim: usize,
    col_ptr: Vec<usize>,
    row_idx: Vec<usize>,
    values: Vec<f64>,
}

impl SparseSym {
    /// Assemble from coordinate triplets. Entries may address either
    /// triangle; everything is mirrored into the lower one and duplicates
    /// are summed.
    pub fn from_triplets(dim: usize, triplets: &[(usize, usize, f64)]) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Validation("matrix dimension must be >= 1".into()));
        }
        let mut entries = Vec::with_capacity(triplets.len());
        for &(i, j, v) in triplets {
            if i >= dim || j >= dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: i.max(j) + 1,
                });
            }
            if !v.is_finite() {
                return Err(Error::Validation(format!(
                    "non-finite entry at ({i}, {j})"
                )));
            }
            let (r, c) = if i >= j { (i, j) } else { (j, i) };
            entries.push((c, r, v));
        }
        entries.sort_unstable_by_key(|&(c, r, _)| (c, r));

        let mut col_ptr = vec![0usize; dim + 1];
        let mut row_idx = Vec::with_capacity(entries.len());
        let mut values = Vec::with_capacity(entries.len());
        let mut last: Option<(usize, usize)> = None;
        for (c, r, v) in entries {
            if last == Some((c, r)) {
                *values.last_mut().expect("non-empty on duplicate") += v;
            } else {
                row_idx.push(r);
                values.push(v);
                col_ptr[c + 1] += 1;
                last = Some((c, r));
            }
        }
        for c in 0..dim {
            col_ptr[c + 1] += col_ptr[c];
        }
        Ok(Self {
            dim,
            col_ptr,
            row_idx,
            values,
        })
    }

    /// Identity scaled by `v`.
    pub fn scaled_identity(dim: usize, v: f64) -> Self {
        let triplets: Vec<_> = (0..dim).map(|i| (i, i, v)).collect();
        Self::from_triplets(dim, &triplets).expect("identity pattern is valid")
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn nnz_lower(&self) -> usize {
        self.values.len()
    }

    /// Stored lower-triangle entries `(row, col, value)` with `row >= col`.
    pub fn lower_triplets(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.dim).flat_map(move |c| {
            (self.col_ptr[c]..self.col_ptr[c + 1]).map(move |p| (self.row_idx[p], c, self.values[p]))
        })
    }

    /// Diagonal as a dense vector (zeros where absent).
    pub fn diagonal(&self) -> Vec<f64> {
        let mut d = vec![0.0; self.dim];
        for (r, c, v) in self.lower_triplets() {
            if r == c {
                d[r] = v;
            }
        }
        d
    }

    /// Mean of the diagonal entries; scale reference for the jitter policy.
    pub fn mean_abs_diagonal(&self) -> f64 {
        self.diagonal().iter().map(|v| v.abs()).sum::<f64>() / self.dim as f64
    }

    /// New matrix with `delta` added to every diagonal entry.
    pub fn with_diagonal_shift(&self, delta: f64) -> Self {
        let mut triplets: Vec<_> = self.lower_triplets().collect();
        let present: std::collections::BTreeSet<usize> = triplets
            .iter()
            .filter(|&&(r, c, _)| r == c)
            .map(|&(r, _, _)| r)
            .collect();
        for t in triplets.iter_mut() {
            if t.0 == t.1 {
                t.2 += delta;
            }
        }
        for i in 0..self.dim {
            if !present.contains(&i) {
                triplets.push((i, i, delta));
            }
        }
        Self::from_triplets(self.dim, &triplets).expect("shift preserves validity")
    }

    /// `self + alpha * other` (same dimension).
    pub fn add_scaled(&self, other: &SparseSym, alpha: f64) -> Result<Self> {
        if self.dim != other.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: other.dim,
            });
        }
        let mut triplets: Vec<_> = self.lower_triplets().collect();
        triplets.extend(other.lower_triplets().map(|(r, c, v)| (r, c, alpha * v)));
        Self::from_triplets(self.dim, &triplets)
    }

    /// Symmetric matrix-vector product `y = Q x`.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.dim, "matvec dimension mismatch");
        let mut y = vec![0.0; self.dim];
        for c in 0..self.dim {
            for p in self.col_ptr[c]..self.col_ptr[c + 1] {
                let r = self.row_idx[p];
                let v = self.values[p];
                y[r] += v * x[c];
                if r != c {
                    y[c] += v * x[r];
                }
            }
        }
        y
    }

    /// Quadratic form `x^T Q x`.
    pub fn quad_form(&self, x: &[f64]) -> f64 {
        self.matvec(x).iter().zip(x).map(|(a, b)| a * b).sum()
    }

    /// Full symmetric row sums.
    pub fn row_sums(&self) -> Vec<f64> {
        self.matvec(&vec![1.0; self.dim])
    }

    /// Dense copy (small matrices and tests).
    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.dim, self.dim);
        for (r, c, v) in self.lower_triplets() {
            m[(r, c)] = v;
            if r != c {
                m[(c, r)] = v;
            }
        }
        m
    }

    /// Factorize; see [`factor::cholesky`].
    pub fn cholesky(&self, policy: JitterPolicy) -> Result<CholFactor> {
        factor::cholesky(self, policy)
    }
}

/// Kronecker product of a dense symmetric K x K factor with a sparse
/// symmetric I x I factor: block (k, l) of the result is `L[(k, l)] * S`.
/// Indices follow the variable-major vec convention: rows `k*I .. (k+1)*I`
/// belong to variable `k`.
pub fn kron_dense_sparse(l: &DMatrix<f64>, s: &SparseSym) -> Result<SparseSym> {
    let k_dim = l.nrows();
    if l.ncols() != k_dim {
        return Err(Error::DimensionMismatch {
            expected: k_dim,
            got: l.ncols(),
        });
    }
    let i_dim = s.dim();
    let total = k_dim.checked_mul(i_dim).ok_or(Error::Validation(
        "Kronecker dimension overflows usize".into(),
    ))?;
    let mut triplets = Vec::with_capacity(s.nnz_lower() * k_dim * (k_dim + 1) / 2);
    for bk in 0..k_dim {
        for bl in 0..=bk {
            let coef = l[(bk, bl)];
            if coef == 0.0 {
                continue;
            }
            if bk == bl {
                for (r, c, v) in s.lower_triplets() {
                    triplets.push((bk * i_dim + r, bl * i_dim + c, coef * v));
                }
            } else {
                // off-diagonal block needs the full S pattern
                for (r, c, v) in s.lower_triplets() {
                    triplets.push((bk * i_dim + r, bl * i_dim + c, coef * v));
                    if r != c {
                        triplets.push((bk * i_dim + c, bl * i_dim + r, coef * v));
                    }
                }
            }
        }
    }
    SparseSym::from_triplets(total, &triplets)
}

/// Dense linear constraints `A x = e` on a GMRF. Rows of `A` must be
/// linearly independent and fewer than the field dimension.
#[derive(Debug, Clone)]
pub struct ConstraintSet {
    a: DMatrix<f64>,
    e: DVector<f64>,
}

impl ConstraintSet {
    pub fn new(a: DMatrix<f64>, e: DVector<f64>) -> Result<Self> {
        let (m, n) = (a.nrows(), a.ncols());
        if m == 0 || m >= n {
            return Err(Error::Validation(format!(
                "constraint count {m} must be in [1, {n})"
            )));
        }
        if e.len() != m {
            return Err(Error::DimensionMismatch {
                expected: m,
                got: e.len(),
            });
        }
        // Independent rows <=> smallest singular value bounded away from 0.
        let svals = a.clone().svd(false, false).singular_values;
        let (smin, smax) = svals
            .iter()
            .fold((f64::INFINITY, 0.0f64), |(lo, hi), &s| (lo.min(s), hi.max(s)));
        if !(smin > 1e-10 * smax.max(f64::MIN_POSITIVE)) {
            return Err(Error::Validation(
                "constraint rows are linearly dependent".into(),
            ));
        }
        Ok(Self { a, e })
    }

    pub fn n_constraints(&self) -> usize {
        self.a.nrows()
    }

    pub fn dim(&self) -> usize {
        self.a.ncols()
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn e(&self) -> &DVector<f64> {
        &self.e
    }

    /// Residual `A x - e`.
    pub fn residual(&self, x: &[f64]) -> DVector<f64> {
        let xv = DVector::from_column_slice(x);
        &self.a * xv - &self.e
    }

    /// Same constraints embedded in a larger vector: columns beyond the
    /// original dimension are zero (fixed effects are unconstrained).
    pub fn zero_padded(&self, new_dim: usize) -> Result<Self> {
        if new_dim < self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: new_dim,
            });
        }
        let mut a = DMatrix::zeros(self.a.nrows(), new_dim);
        a.view_mut((0, 0), (self.a.nrows(), self.a.ncols()))
            .copy_from(&self.a);
        ConstraintSet::new(a, self.e.clone())
    }
}

/// Workspace for repeated kriging corrections against one factorization:
/// caches `V = Q^{-1} A^T` and the small Cholesky of `S = A V`. Owns a copy
/// of the constraints so evaluations can be retained across calls.
pub struct ConstraintCorrector {
    constraints: ConstraintSet,
    v: DMatrix<f64>,
    s_chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
}

impl ConstraintCorrector {
    pub fn new(factor: &CholFactor, constraints: &ConstraintSet) -> Result<Self> {
        let n = factor.dim();
        if constraints.dim() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: constraints.dim(),
            });
        }
        let m = constraints.n_constraints();
        let mut v = DMatrix::zeros(n, m);
        for j in 0..m {
            let col: Vec<f64> = constraints.a().row(j).iter().copied().collect();
            let sol = factor.solve(&col);
            v.column_mut(j).copy_from_slice(&sol);
        }
        let s = constraints.a() * &v;
        let s_chol = s.cholesky().ok_or(Error::ConstraintDegeneracy(
            "A Q^{-1} A^T is singular".into(),
        ))?;
        Ok(Self {
            constraints: constraints.clone(),
            v,
            s_chol,
        })
    }

    pub fn constraints(&self) -> &ConstraintSet {
        &self.constraints
    }

    /// Conditioning by kriging: `x - Q^{-1} A^T (A Q^{-1} A^T)^{-1} (A x - e)`.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let resid = self.constraints.residual(x);
        let gamma = self.s_chol.solve(&resid);
        let correction = &self.v * gamma;
        x.iter()
            .zip(correction.iter())
            .map(|(xi, ci)| xi - ci)
            .collect()
    }

    /// log det (A Q^{-1} A^T); the density correction for conditioning a
    /// GMRF on the constraints.
    pub fn logdet_gram(&self) -> f64 {
        2.0 * self
            .s_chol
            .l()
            .diagonal()
            .iter()
            .map(|v| v.ln())
            .sum::<f64>()
    }

    /// Quadratic form `r^T (A Q^{-1} A^T)^{-1} r` for `r = A x - e`.
    pub fn gram_quad_form(&self, resid: &DVector<f64>) -> f64 {
        let sol = self.s_chol.solve(resid);
        resid.dot(&sol)
    }
}

/// One-shot kriging correction; see [`ConstraintCorrector::apply`].
pub fn constrain(x: &[f64], factor: &CholFactor, constraints: &ConstraintSet) -> Result<Vec<f64>> {
    Ok(ConstraintCorrector::new(factor, constraints)?.apply(x))
}

/// Draw from the GMRF with the factorized precision; when constraints are
/// given the draw is corrected by kriging and satisfies them exactly.
pub fn sample_gmrf<R: Rng + ?Sized>(
    factor: &CholFactor,
    constraints: Option<&ConstraintSet>,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let n = factor.dim();
    let z: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let x = factor.sample_from_noise(&z);
    match constraints {
        None => Ok(x),
        Some(c) => constrain(&x, factor, c),
    }
}

/// Draw repeatedly against one factorization, reusing the constraint
/// workspace.
pub struct GmrfSampler<'a> {
    factor: &'a CholFactor,
    corrector: Option<ConstraintCorrector>,
}

impl<'a> GmrfSampler<'a> {
    pub fn new(factor: &'a CholFactor, constraints: Option<&'a ConstraintSet>) -> Result<Self> {
        let corrector = match constraints {
            Some(c) => Some(ConstraintCorrector::new(factor, c)?),
            None => None,
        };
        Ok(Self { factor, corrector })
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let n = self.factor.dim();
        let z: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let x = self.factor.sample_from_noise(&z);
        match &self.corrector {
            None => x,
            Some(c) => c.apply(&x),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn path3_intrinsic() -> SparseSym {
        // D - W of the path graph 1-2-3
        SparseSym::from_triplets(
            3,
            &[
                (0, 0, 1.0),
                (1, 1, 2.0),
                (2, 2, 1.0),
                (1, 0, -1.0),
                (2, 1, -1.0),
            ],
        )
        .unwrap()
    }

    #[test]
    fn triplets_mirror_and_accumulate() {
        let q = SparseSym::from_triplets(2, &[(0, 1, 2.0), (1, 0, 1.0), (0, 0, 4.0)]).unwrap();
        let d = q.to_dense();
        assert_eq!(d[(1, 0)], 3.0);
        assert_eq!(d[(0, 1)], 3.0);
        assert_eq!(d[(0, 0)], 4.0);
    }

    #[test]
    fn non_finite_entry_rejected() {
        assert!(SparseSym::from_triplets(2, &[(0, 0, f64::NAN)]).is_err());
    }

    #[test]
    fn matvec_matches_dense() {
        let q = path3_intrinsic();
        let x = [1.0, -2.0, 0.5];
        let y = q.matvec(&x);
        let dense = q.to_dense() * nalgebra::DVector::from_column_slice(&x);
        for i in 0..3 {
            assert_abs_diff_eq!(y[i], dense[i], epsilon = 1e-14);
        }
    }

    #[test]
    fn kron_identity_blocks() {
        let l = DMatrix::identity(2, 2);
        let s = path3_intrinsic();
        let k = kron_dense_sparse(&l, &s).unwrap();
        let d = k.to_dense();
        let sd = s.to_dense();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(d[(i, j)], sd[(i, j)]);
                assert_eq!(d[(3 + i, 3 + j)], sd[(i, j)]);
                assert_eq!(d[(i, 3 + j)], 0.0);
            }
        }
    }

    #[test]
    fn kron_scalar_case() {
        let l = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        let s = SparseSym::from_triplets(1, &[(0, 0, 3.0)]).unwrap();
        let k = kron_dense_sparse(&l, &s).unwrap();
        let d = k.to_dense();
        assert_eq!(d, DMatrix::from_row_slice(2, 2, &[6.0, 3.0, 3.0, 6.0]));
    }

    #[test]
    fn cholesky_identity_logdet_zero() {
        let q = SparseSym::scaled_identity(4, 1.0);
        let f = q.cholesky(JitterPolicy::Strict).unwrap();
        assert_abs_diff_eq!(f.logdet(), 0.0, epsilon = 1e-14);
        assert_eq!(f.jitter_applied(), 0.0);
    }

    #[test]
    fn cholesky_diagonal_logdet() {
        let q = SparseSym::from_triplets(2, &[(0, 0, 2.0), (1, 1, 8.0)]).unwrap();
        let f = q.cholesky(JitterPolicy::Strict).unwrap();
        assert_abs_diff_eq!(f.logdet(), 16.0f64.ln(), epsilon = 1e-14);
    }

    #[test]
    fn singular_matrix_fails_strict_succeeds_auto() {
        let q = path3_intrinsic();
        assert!(matches!(
            q.cholesky(JitterPolicy::Strict),
            Err(Error::NotPositiveDefinite { .. })
        ));
        let f = q.cholesky(JitterPolicy::Auto).unwrap();
        assert!(f.jitter_applied() > 0.0);
    }

    #[test]
    fn solve_identity_and_diagonal() {
        let id = SparseSym::scaled_identity(3, 1.0)
            .cholesky(JitterPolicy::Strict)
            .unwrap();
        let b = [1.0, 2.0, 3.0];
        assert_eq!(id.solve(&b), b.to_vec());

        let f = SparseSym::from_triplets(2, &[(0, 0, 2.0), (1, 1, 4.0)])
            .unwrap()
            .cholesky(JitterPolicy::Strict)
            .unwrap();
        let x = f.solve(&[2.0, 4.0]);
        assert_abs_diff_eq!(x[0], 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(x[1], 1.0, epsilon = 1e-14);
    }

    #[test]
    fn constrain_projects_onto_constraint() {
        // Q = I, A = (1, 1), e = 0: orthogonal projection
        let f = SparseSym::scaled_identity(2, 1.0)
            .cholesky(JitterPolicy::Strict)
            .unwrap();
        let c = ConstraintSet::new(
            DMatrix::from_row_slice(1, 2, &[1.0, 1.0]),
            DVector::from_element(1, 0.0),
        )
        .unwrap();
        let x = constrain(&[3.0, 1.0], &f, &c).unwrap();
        assert_abs_diff_eq!(x[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(x[1], -1.0, epsilon = 1e-12);
    }

    #[test]
    fn constrain_is_identity_when_satisfied() {
        let f = SparseSym::scaled_identity(2, 1.0)
            .cholesky(JitterPolicy::Strict)
            .unwrap();
        let c = ConstraintSet::new(
            DMatrix::from_row_slice(1, 2, &[1.0, 1.0]),
            DVector::from_element(1, 0.0),
        )
        .unwrap();
        let x = constrain(&[2.0, -2.0], &f, &c).unwrap();
        assert_abs_diff_eq!(x[0], 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(x[1], -2.0, epsilon = 1e-12);
    }

    #[test]
    fn dependent_constraint_rows_rejected() {
        let a = DMatrix::from_row_slice(2, 3, &[1.0, 1.0, 0.0, 2.0, 2.0, 0.0]);
        assert!(ConstraintSet::new(a, DVector::zeros(2)).is_err());
    }
}
