//! Deterministic graph and parameter generators shared by the test suites
//! and benchmarks.

use rand::RngExt;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::graph::ArealGraph;

/// Rectangular lattice with rook adjacency; connected, planar, min degree 2.
pub fn grid_graph(rows: usize, cols: usize) -> ArealGraph {
    assert!(rows >= 1 && cols >= 1 && rows * cols >= 2);
    let id = |r: usize, c: usize| r * cols + c + 1; // 1-based
    let mut edges = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            if c + 1 < cols {
                edges.push((id(r, c), id(r, c + 1)));
            }
            if r + 1 < rows {
                edges.push((id(r, c), id(r + 1, c)));
            }
        }
    }
    ArealGraph::from_edges(rows * cols, &edges).expect("grid is valid")
}

/// Path graph 1-2-...-n.
pub fn path_graph(n: usize) -> ArealGraph {
    let edges: Vec<_> = (1..n).map(|i| (i, i + 1)).collect();
    ArealGraph::from_edges(n, &edges).expect("path is valid")
}

/// Connected random graph: a random spanning tree plus `extra_edges`
/// uniformly random extra pairs. Every region has at least one neighbor.
pub fn random_connected_graph(n: usize, extra_edges: usize, seed: u64) -> ArealGraph {
    assert!(n >= 2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut edges = Vec::new();
    // random attachment tree
    for v in 2..=n {
        let u = rng.random_range(1..v);
        edges.push((u, v));
    }
    for _ in 0..extra_edges {
        let a = rng.random_range(1..=n);
        let b = rng.random_range(1..=n);
        if a != b {
            edges.push((a, b));
        }
    }
    ArealGraph::from_edges(n, &edges).expect("generated edges are valid")
}

/// Seeded RNG for reproducible test draws.
pub fn test_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
