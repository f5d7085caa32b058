//! Univariate CAR structural precision matrices D - W and D - alpha W,
//! and the admissible range of the autocorrelation parameter.

use crate::error::Error;
use crate::graph::ArealGraph;
use crate::sparse::SparseSym;
use crate::Result;

/// Structural factor of a univariate CAR field.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CarKind {
    /// Intrinsic: D - W, positive semidefinite with rank deficiency equal to
    /// the number of connected components.
    Intrinsic,
    /// Proper: D - alpha W, positive definite for alpha strictly inside the
    /// admissible interval.
    Proper(f64),
}

/// A CAR structure bound to a graph with a validated kind.
#[derive(Debug, Clone)]
pub struct CarStructure<'g> {
    graph: &'g ArealGraph,
    kind: CarKind,
}

impl<'g> CarStructure<'g> {
    pub fn new(graph: &'g ArealGraph, kind: CarKind) -> Result<Self> {
        require_min_degree(graph)?;
        if let CarKind::Proper(alpha) = kind {
            let (lo, hi) = alpha_bounds(graph);
            if !(alpha > lo && alpha < hi) {
                return Err(Error::Domain(format!(
                    "alpha = {alpha} outside admissible interval ({lo}, {hi})"
                )));
            }
        }
        Ok(Self { graph, kind })
    }

    pub fn precision(&self) -> SparseSym {
        match self.kind {
            CarKind::Intrinsic => structural_matrix(self.graph, 1.0),
            CarKind::Proper(alpha) => structural_matrix(self.graph, alpha),
        }
    }
}

fn require_min_degree(g: &ArealGraph) -> Result<()> {
    if g.min_degree() == 0 {
        let lonely = g
            .neighbor_counts()
            .iter()
            .position(|&d| d == 0)
            .map(|i| i + 1)
            .unwrap_or(0);
        return Err(Error::Validation(format!(
            "region {lonely} has no neighbors; CAR models require n_i >= 1"
        )));
    }
    Ok(())
}

/// D - W: diagonal holds neighbor counts, off-diagonal -1 for neighbors.
/// Every row sums to zero; PSD with rank I - C.
pub fn intrinsic_precision(g: &ArealGraph) -> Result<SparseSym> {
    require_min_degree(g)?;
    Ok(structural_matrix(g, 1.0))
}

/// D - alpha W for alpha strictly inside the admissible interval.
pub fn proper_precision(g: &ArealGraph, alpha: f64) -> Result<SparseSym> {
    Ok(CarStructure::new(g, CarKind::Proper(alpha))?.precision())
}

/// D - alpha W without admissibility checks; callers validate the range.
pub(crate) fn structural_matrix(g: &ArealGraph, alpha: f64) -> SparseSym {
    let n = g.n_regions();
    let counts = g.neighbor_counts();
    let mut triplets = Vec::with_capacity(n + g.n_edges());
    for (i, &c) in counts.iter().enumerate() {
        triplets.push((i, i, c as f64));
    }
    if alpha != 0.0 {
        for &(a, b) in g.edges() {
            triplets.push((b, a, -alpha));
        }
    }
    SparseSym::from_triplets(n, &triplets).expect("graph pattern is valid")
}

/// Admissible open interval for the proper-CAR autocorrelation:
/// `(1/lambda_min, 1/lambda_max)` with lambda the extreme eigenvalues of
/// `B = D^{-1/2} W D^{-1/2}`. `B` is similar to the row-stochastic
/// `D^{-1} W`, so `lambda_max = 1` exactly and the upper bound is 1;
/// D - alpha W is positive definite strictly inside the interval.
///
/// The smallest eigenvalue is found by shifted power iteration with a fixed
/// start vector, so the result is deterministic for a given graph.
pub fn alpha_bounds(g: &ArealGraph) -> (f64, f64) {
    let lambda_min = extreme_eigenvalue(g, -1.0);
    (1.0 / lambda_min, 1.0)
}

/// Dominant eigenvalue of `B + shift*I` minus the shift, where
/// `B = D^{-1/2} W D^{-1/2}`. With `shift = -1` the spectrum of `B - I`
/// lies in `[lambda_min - 1, 0]`, so the iteration converges to lambda_min.
fn extreme_eigenvalue(g: &ArealGraph, shift: f64) -> f64 {
    let n = g.n_regions();
    let inv_sqrt_deg: Vec<f64> = g
        .neighbor_counts()
        .iter()
        .map(|&c| 1.0 / (c as f64).sqrt())
        .collect();

    // Fixed pseudo-random start with alternating signs; overlap with the
    // extreme eigenvector is overwhelmingly likely and reproducible.
    let mut v: Vec<f64> = (0..n)
        .map(|i| {
            let mag = (0.7 + (i as f64 * 1.61803).sin()).abs() + 0.1;
            if i % 2 == 1 {
                -mag
            } else {
                mag
            }
        })
        .collect();
    normalize(&mut v);

    let apply = |x: &[f64], out: &mut [f64]| {
        for o in out.iter_mut() {
            *o = 0.0;
        }
        for &(a, b) in g.edges() {
            let w = inv_sqrt_deg[a] * inv_sqrt_deg[b];
            out[a] += w * x[b];
            out[b] += w * x[a];
        }
        for i in 0..x.len() {
            out[i] += shift * x[i];
        }
    };

    let mut next = vec![0.0; n];
    let mut rq_prev = f64::NAN;
    for _ in 0..200_000 {
        apply(&v, &mut next);
        let rq: f64 = v.iter().zip(&next).map(|(a, b)| a * b).sum();
        std::mem::swap(&mut v, &mut next);
        normalize(&mut v);
        if (rq - rq_prev).abs() <= 1e-13 * rq.abs().max(1.0) {
            return rq - shift;
        }
        rq_prev = rq;
    }
    rq_prev - shift
}

fn normalize(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in v.iter_mut() {
            *x /= norm;
        }
    }
}
