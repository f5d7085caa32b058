//! Sparse LDL^T factorization with a reverse Cuthill-McKee fill-reducing
//! ordering, following the classic up-looking elimination-tree algorithm.

use std::collections::VecDeque;

use crate::error::Error;
use crate::Result;

use super::SparseSym;

/// Behavior when a pivot collapses during factorization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum JitterPolicy {
    /// Fail with `NotPositiveDefinite`. For matrices that must be PD.
    Strict,
    /// Retry with an escalating diagonal shift `delta * mean(|diag|)`,
    /// `delta` in 1e-8, 1e-7, ..., 1e-4. For intrinsic (singular) precisions
    /// whose density is only used up to a constant and under constraints.
    Auto,
}

/// Factorization `P Q P^T = L D L^T` of a symmetric positive-definite
/// (possibly jittered) sparse matrix. `L` is unit lower triangular, stored
/// strictly below the diagonal in compressed columns.
pub struct CholFactor {
    dim: usize,
    /// permutation: position `i` of the factored matrix holds original
    /// index `perm[i]`.
    perm: Vec<usize>,
    l_colptr: Vec<usize>,
    l_rowidx: Vec<usize>,
    l_values: Vec<f64>,
    d: Vec<f64>,
    logdet: f64,
    jitter_applied: f64,
}

impl CholFactor {
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// log det of the (jittered) input matrix.
    pub fn logdet(&self) -> f64 {
        self.logdet
    }

    /// Absolute shift that was added to every diagonal entry (0 when the
    /// matrix factorized as given).
    pub fn jitter_applied(&self) -> f64 {
        self.jitter_applied
    }

    pub fn permutation(&self) -> &[usize] {
        &self.perm
    }

    /// Solve `Q x = b`.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        assert_eq!(b.len(), self.dim, "solve dimension mismatch");
        let mut x: Vec<f64> = self.perm.iter().map(|&p| b[p]).collect();
        self.lsolve(&mut x);
        for (xi, di) in x.iter_mut().zip(&self.d) {
            *xi /= di;
        }
        self.ltsolve(&mut x);
        let mut out = vec![0.0; self.dim];
        for (i, &p) in self.perm.iter().enumerate() {
            out[p] = x[i];
        }
        out
    }

    /// Solve for several right-hand sides (columns).
    pub fn solve_columns(&self, cols: &[Vec<f64>]) -> Vec<Vec<f64>> {
        cols.iter().map(|c| self.solve(c)).collect()
    }

    /// Map iid standard normal noise `z` to a draw with covariance `Q^{-1}`:
    /// solves `L^T w = D^{-1/2} z` and undoes the permutation.
    pub fn sample_from_noise(&self, z: &[f64]) -> Vec<f64> {
        assert_eq!(z.len(), self.dim, "noise dimension mismatch");
        let mut w: Vec<f64> = z
            .iter()
            .zip(&self.d)
            .map(|(zi, di)| zi / di.sqrt())
            .collect();
        self.ltsolve(&mut w);
        let mut out = vec![0.0; self.dim];
        for (i, &p) in self.perm.iter().enumerate() {
            out[p] = w[i];
        }
        out
    }

    /// Quadratic form `v^T Q v` of the (jittered) matrix the factor
    /// represents, via `sum_j d_j (L^T P v)_j^2`.
    pub fn quad_form(&self, v: &[f64]) -> f64 {
        assert_eq!(v.len(), self.dim, "quad_form dimension mismatch");
        let vp: Vec<f64> = self.perm.iter().map(|&p| v[p]).collect();
        let mut total = 0.0;
        for j in 0..self.dim {
            let mut wj = vp[j];
            for p in self.l_colptr[j]..self.l_colptr[j + 1] {
                wj += self.l_values[p] * vp[self.l_rowidx[p]];
            }
            total += self.d[j] * wj * wj;
        }
        total
    }

    /// Dense `P^T (L D L^T) P`, i.e. the (jittered) input the factor
    /// represents. Small matrices only; used to verify reconstruction.
    pub fn reconstructed_dense(&self) -> nalgebra::DMatrix<f64> {
        let n = self.dim;
        let mut l = nalgebra::DMatrix::identity(n, n);
        for j in 0..n {
            for p in self.l_colptr[j]..self.l_colptr[j + 1] {
                l[(self.l_rowidx[p], j)] = self.l_values[p];
            }
        }
        let d = nalgebra::DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(&self.d));
        let ldl = &l * d * l.transpose();
        let mut out = nalgebra::DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                out[(self.perm[i], self.perm[j])] = ldl[(i, j)];
            }
        }
        out
    }

    fn lsolve(&self, x: &mut [f64]) {
        for j in 0..self.dim {
            let xj = x[j];
            for p in self.l_colptr[j]..self.l_colptr[j + 1] {
                x[self.l_rowidx[p]] -= self.l_values[p] * xj;
            }
        }
    }

    fn ltsolve(&self, x: &mut [f64]) {
        for j in (0..self.dim).rev() {
            let mut xj = x[j];
            for p in self.l_colptr[j]..self.l_colptr[j + 1] {
                xj -= self.l_values[p] * x[self.l_rowidx[p]];
            }
            x[j] = xj;
        }
    }
}

/// Factorize `q`, retrying with diagonal jitter when the policy allows.
pub fn cholesky(q: &SparseSym, policy: JitterPolicy) -> Result<CholFactor> {
    let perm = rcm_ordering(q);
    match factorize_with_perm(q, &perm, 0.0) {
        Ok(f) => Ok(f),
        Err(first) => match policy {
            JitterPolicy::Strict => Err(first),
            JitterPolicy::Auto => {
                let scale = q.mean_abs_diagonal().max(f64::MIN_POSITIVE);
                let mut delta_rel = 1e-8;
                while delta_rel <= 1e-4 {
                    let shift = delta_rel * scale;
                    if let Ok(f) = factorize_with_perm(&q.with_diagonal_shift(shift), &perm, shift)
                    {
                        return Ok(f);
                    }
                    delta_rel *= 10.0;
                }
                Err(Error::NotPositiveDefinite {
                    jitter_tried: 1e-4 * scale,
                })
            }
        },
    }
}

/// Permuted upper-triangular CSC view of the matrix: entry (i, j), i <= j,
/// of `P Q P^T`, rows sorted within each column.
fn permuted_upper_csc(q: &SparseSym, perm: &[usize]) -> (Vec<usize>, Vec<usize>, Vec<f64>) {
    let n = q.dim();
    let mut inv = vec![0usize; n];
    for (new, &old) in perm.iter().enumerate() {
        inv[old] = new;
    }
    let mut entries: Vec<(usize, usize, f64)> = Vec::with_capacity(q.nnz_lower());
    for (r, c, v) in q.lower_triplets() {
        let (pi, pj) = (inv[r], inv[c]);
        let (lo, hi) = if pi <= pj { (pi, pj) } else { (pj, pi) };
        entries.push((hi, lo, v)); // column-major: (col, row)
    }
    entries.sort_unstable_by_key(|&(c, r, _)| (c, r));
    let mut colptr = vec![0usize; n + 1];
    let mut rowidx = Vec::with_capacity(entries.len());
    let mut values = Vec::with_capacity(entries.len());
    for (c, r, v) in entries {
        colptr[c + 1] += 1;
        rowidx.push(r);
        values.push(v);
    }
    for c in 0..n {
        colptr[c + 1] += colptr[c];
    }
    (colptr, rowidx, values)
}

fn factorize_with_perm(q: &SparseSym, perm: &[usize], jitter: f64) -> Result<CholFactor> {
    let n = q.dim();
    let (ap, ai, ax) = permuted_upper_csc(q, perm);

    // Symbolic phase: elimination tree and column counts of L.
    let mut parent = vec![usize::MAX; n];
    let mut flag = vec![usize::MAX; n];
    let mut lnz = vec![0usize; n];
    for k in 0..n {
        parent[k] = usize::MAX;
        flag[k] = k;
        for p in ap[k]..ap[k + 1] {
            let mut i = ai[p];
            while i < k && flag[i] != k {
                if parent[i] == usize::MAX {
                    parent[i] = k;
                }
                lnz[i] += 1;
                flag[i] = k;
                i = parent[i];
            }
        }
    }
    let mut l_colptr = vec![0usize; n + 1];
    for k in 0..n {
        l_colptr[k + 1] = l_colptr[k] + lnz[k];
    }

    // Numeric phase (up-looking, row by row).
    let nnz_l = l_colptr[n];
    let mut l_rowidx = vec![0usize; nnz_l];
    let mut l_values = vec![0.0f64; nnz_l];
    let mut d = vec![0.0f64; n];
    let mut y = vec![0.0f64; n];
    let mut pattern = vec![0usize; n];
    let mut lfill = vec![0usize; n]; // entries placed so far per column
    let mut flag = vec![usize::MAX; n];
    let diag = {
        // diagonal of the permuted matrix, for the relative pivot test
        let mut dg = vec![0.0f64; n];
        for k in 0..n {
            for p in ap[k]..ap[k + 1] {
                if ai[p] == k {
                    dg[k] = ax[p];
                }
            }
        }
        dg
    };

    for k in 0..n {
        let mut top = n;
        flag[k] = k;
        for p in ap[k]..ap[k + 1] {
            let entry_row = ai[p];
            if entry_row > k {
                continue;
            }
            y[entry_row] += ax[p];
            let mut i = entry_row;
            let mut len = 0usize;
            while flag[i] != k {
                pattern[len] = i;
                len += 1;
                flag[i] = k;
                i = parent[i];
            }
            while len > 0 {
                len -= 1;
                top -= 1;
                pattern[top] = pattern[len];
            }
        }
        d[k] = y[k];
        y[k] = 0.0;
        for s in top..n {
            let i = pattern[s];
            let yi = y[i];
            y[i] = 0.0;
            let p2 = l_colptr[i] + lfill[i];
            for p in l_colptr[i]..p2 {
                y[l_rowidx[p]] -= l_values[p] * yi;
            }
            let l_ki = yi / d[i];
            d[k] -= l_ki * yi;
            l_rowidx[p2] = k;
            l_values[p2] = l_ki;
            lfill[i] += 1;
        }
        // Relative pivot test: a vanishing Schur complement relative to the
        // original diagonal entry signals (numerical) rank deficiency.
        let ref_scale = diag[k].abs().max(f64::MIN_POSITIVE);
        if !(d[k] > 1e-12 * ref_scale) {
            return Err(Error::NotPositiveDefinite {
                jitter_tried: jitter,
            });
        }
    }

    let logdet = d.iter().map(|v| v.ln()).sum();
    Ok(CholFactor {
        dim: n,
        perm: perm.to_vec(),
        l_colptr,
        l_rowidx,
        l_values,
        d,
        logdet,
        jitter_applied: jitter,
    })
}

/// Reverse Cuthill-McKee ordering on the symmetric pattern. Deterministic:
/// ties break on the original index. Returns `perm` with `perm[new] = old`.
fn rcm_ordering(q: &SparseSym) -> Vec<usize> {
    let n = q.dim();
    let mut adj = vec![Vec::new(); n];
    for (r, c, _) in q.lower_triplets() {
        if r != c {
            adj[r].push(c);
            adj[c].push(r);
        }
    }
    for list in &mut adj {
        list.sort_unstable();
        list.dedup();
    }
    let degree: Vec<usize> = adj.iter().map(Vec::len).collect();

    let mut order = Vec::with_capacity(n);
    let mut visited = vec![false; n];
    loop {
        // lowest-degree unvisited node starts the next component
        let start = match (0..n)
            .filter(|&i| !visited[i])
            .min_by_key(|&i| (degree[i], i))
        {
            Some(s) => s,
            None => break,
        };
        let start = pseudo_peripheral(start, &adj, &degree);
        let mut queue = VecDeque::new();
        visited[start] = true;
        queue.push_back(start);
        while let Some(v) = queue.pop_front() {
            order.push(v);
            let mut next: Vec<usize> = adj[v].iter().copied().filter(|&w| !visited[w]).collect();
            next.sort_unstable_by_key(|&w| (degree[w], w));
            for w in next {
                visited[w] = true;
                queue.push_back(w);
            }
        }
    }
    order.reverse();
    order
}

/// A few BFS sweeps toward an eccentric node; standard RCM start heuristic.
fn pseudo_peripheral(start: usize, adj: &[Vec<usize>], degree: &[usize]) -> usize {
    let mut current = start;
    let mut last_ecc = 0usize;
    for _ in 0..4 {
        let (far, ecc) = bfs_farthest(current, adj, degree);
        if ecc <= last_ecc {
            break;
        }
        last_ecc = ecc;
        current = far;
    }
    current
}

fn bfs_farthest(start: usize, adj: &[Vec<usize>], degree: &[usize]) -> (usize, usize) {
    let n = adj.len();
    let mut dist = vec![usize::MAX; n];
    dist[start] = 0;
    let mut queue = VecDeque::new();
    queue.push_back(start);
    let mut far = start;
    let mut ecc = 0;
    while let Some(v) = queue.pop_front() {
        for &w in &adj[v] {
            if dist[w] == usize::MAX {
                dist[w] = dist[v] + 1;
                if dist[w] > ecc || (dist[w] == ecc && (degree[w], w) < (degree[far], far)) {
                    ecc = dist[w];
                    far = w;
                }
                queue.push_back(w);
            }
        }
    }
    (far, ecc)
}
