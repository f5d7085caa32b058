//! Areal lattice adjacency: regions, symmetric neighbor pairs and
//! connected components.
//!
//! The canonical input is a UTF-8 edge-list file: the first non-comment line
//! is `regions: <I>`, every following non-comment line is a pair `i j` of
//! 1-based region ids, and `#` starts a comment. Duplicate pairs and swapped
//! endpoints collapse to a single undirected edge.

use std::collections::VecDeque;
use std::path::Path;

use crate::error::Error;
use crate::sparse::SparseSym;
use crate::Result;

/// Undirected neighbor structure over `n_regions` areal units.
///
/// Edges are stored as unordered pairs `(i, j)` with `i < j`, 0-based
/// internally, 1-based in the file format and error messages. Immutable
/// after construction and safe to share across threads.
#[derive(Debug, Clone)]
pub struct ArealGraph {
    n_regions: usize,
    edges: Vec<(usize, usize)>,
    neighbors: Vec<Vec<usize>>,
    region_labels: Option<Vec<String>>,
}

impl ArealGraph {
    /// Build a graph from 1-based edge pairs, validating ids, rejecting
    /// self-loops and collapsing duplicates.
    pub fn from_edges(n_regions: usize, pairs: &[(usize, usize)]) -> Result<Self> {
        if n_regions == 0 {
            return Err(Error::Validation("graph needs at least one region".into()));
        }
        let mut edges = Vec::with_capacity(pairs.len());
        for &(a, b) in pairs {
            if a == b {
                return Err(Error::Validation(format!("self-loop at region {a}")));
            }
            if a < 1 || a > n_regions || b < 1 || b > n_regions {
                return Err(Error::Validation(format!(
                    "edge ({a}, {b}) outside region range 1..={n_regions}"
                )));
            }
            let (lo, hi) = if a < b { (a - 1, b - 1) } else { (b - 1, a - 1) };
            edges.push((lo, hi));
        }
        edges.sort_unstable();
        edges.dedup();
        let mut neighbors = vec![Vec::new(); n_regions];
        for &(a, b) in &edges {
            neighbors[a].push(b);
            neighbors[b].push(a);
        }
        for list in &mut neighbors {
            list.sort_unstable();
        }
        Ok(Self {
            n_regions,
            edges,
            neighbors,
            region_labels: None,
        })
    }

    /// Parse the canonical edge-list text format.
    pub fn load_edge_list(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse_edge_list(&text)
    }

    /// Parse edge-list text. Split out from [`ArealGraph::load_edge_list`]
    /// so in-memory inputs can be tested without touching the filesystem.
    pub fn parse_edge_list(text: &str) -> Result<Self> {
        let mut n_regions: Option<usize> = None;
        let mut pairs = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            if n_regions.is_none() {
                let rest = line.strip_prefix("regions:").ok_or_else(|| Error::Parse {
                    line: line_no,
                    msg: format!("expected header `regions: <I>`, found `{line}`"),
                })?;
                let count = rest.trim().parse::<usize>().map_err(|_| Error::Parse {
                    line: line_no,
                    msg: format!("invalid region count `{}`", rest.trim()),
                })?;
                n_regions = Some(count);
                continue;
            }
            let mut fields = line.split_whitespace();
            let parse_id = |s: Option<&str>| -> std::result::Result<usize, Error> {
                s.and_then(|t| t.parse::<usize>().ok()).ok_or(Error::Parse {
                    line: line_no,
                    msg: format!("expected `i j` pair, found `{line}`"),
                })
            };
            let a = parse_id(fields.next())?;
            let b = parse_id(fields.next())?;
            if fields.next().is_some() {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!("trailing tokens after edge pair in `{line}`"),
                });
            }
            pairs.push((a, b));
        }
        let n_regions = n_regions.ok_or(Error::Parse {
            line: 1,
            msg: "missing `regions: <I>` header".into(),
        })?;
        Self::from_edges(n_regions, &pairs)
    }

    /// Attach optional text ids (one per region).
    pub fn with_labels(mut self, labels: Vec<String>) -> Result<Self> {
        if labels.len() != self.n_regions {
            return Err(Error::DimensionMismatch {
                expected: self.n_regions,
                got: labels.len(),
            });
        }
        self.region_labels = Some(labels);
        Ok(self)
    }

    pub fn n_regions(&self) -> usize {
        self.n_regions
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    /// Unordered edges as 0-based `(i, j)` with `i < j`.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    /// Sorted 0-based neighbor list of region `i` (0-based).
    pub fn neighbors_of(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn region_labels(&self) -> Option<&[String]> {
        self.region_labels.as_deref()
    }

    /// Degree n_i of every region. Sums to twice the edge count.
    pub fn neighbor_counts(&self) -> Vec<usize> {
        self.neighbors.iter().map(Vec::len).collect()
    }

    /// Binary adjacency matrix W (zero diagonal, symmetric).
    pub fn adjacency_matrix(&self) -> SparseSym {
        let triplets = self
            .edges
            .iter()
            .map(|&(a, b)| (b, a, 1.0))
            .collect::<Vec<_>>();
        SparseSym::from_triplets(self.n_regions, &triplets)
            .expect("validated edges form a valid sparse pattern")
    }

    /// Connected-component labels in `[1, C]` plus the component count C.
    /// Regions share a label iff they are connected.
    pub fn connected_components(&self) -> (Vec<usize>, usize) {
        let mut labels = vec![0usize; self.n_regions];
        let mut next = 0usize;
        let mut queue = VecDeque::new();
        for start in 0..self.n_regions {
            if labels[start] != 0 {
                continue;
            }
            next += 1;
            labels[start] = next;
            queue.push_back(start);
            while let Some(v) = queue.pop_front() {
                for &w in &self.neighbors[v] {
                    if labels[w] == 0 {
                        labels[w] = next;
                        queue.push_back(w);
                    }
                }
            }
        }
        (labels, next)
    }

    /// Smallest degree over all regions.
    pub fn min_degree(&self) -> usize {
        self.neighbors.iter().map(Vec::len).min().unwrap_or(0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn path3() -> ArealGraph {
        ArealGraph::from_edges(3, &[(1, 2), (2, 3)]).unwrap()
    }

    #[test]
    fn parses_minimal_path_graph() {
        let g = ArealGraph::parse_edge_list("regions: 3\n1 2\n2 3\n").unwrap();
        assert_eq!(g.n_regions(), 3);
        assert_eq!(g.n_edges(), 2);
        assert_eq!(g.edges(), &[(0, 1), (1, 2)]);
    }

    #[test]
    fn swapped_endpoints_collapse_to_one_edge() {
        let g = ArealGraph::parse_edge_list("regions: 2\n1 2\n2 1\n").unwrap();
        assert_eq!(g.n_edges(), 1);
    }

    #[test]
    fn comments_and_blank_lines_are_skipped() {
        let text = "# adjacency\n\nregions: 3 # three regions\n1 2\n# middle\n2 3\n";
        let g = ArealGraph::parse_edge_list(text).unwrap();
        assert_eq!(g.n_edges(), 2);
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let err = ArealGraph::parse_edge_list("regions: 3\n1 2\n2 x\n").unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn out_of_range_id_rejected() {
        let err = ArealGraph::parse_edge_list("regions: 3\n1 4\n").unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn self_loop_rejected() {
        let err = ArealGraph::parse_edge_list("regions: 3\n2 2\n").unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn neighbor_counts_on_small_graphs() {
        assert_eq!(path3().neighbor_counts(), vec![1, 2, 1]);
        let cycle4 = ArealGraph::from_edges(4, &[(1, 2), (2, 3), (3, 4), (4, 1)]).unwrap();
        assert_eq!(cycle4.neighbor_counts(), vec![2, 2, 2, 2]);
        let star5 = ArealGraph::from_edges(5, &[(1, 2), (1, 3), (1, 4), (1, 5)]).unwrap();
        assert_eq!(star5.neighbor_counts(), vec![4, 1, 1, 1, 1]);
    }

    #[test]
    fn degree_sum_is_twice_edge_count() {
        let g = path3();
        let total: usize = g.neighbor_counts().iter().sum();
        assert_eq!(total, 2 * g.n_edges());
    }

    #[test]
    fn adjacency_matrix_matches_edges() {
        let w = path3().adjacency_matrix();
        let dense = w.to_dense();
        assert_eq!(dense[(0, 1)], 1.0);
        assert_eq!(dense[(1, 2)], 1.0);
        assert_eq!(dense[(0, 2)], 0.0);
        for i in 0..3 {
            assert_eq!(dense[(i, i)], 0.0);
        }
    }

    #[test]
    fn empty_edge_set_gives_zero_matrix() {
        let g = ArealGraph::from_edges(3, &[]).unwrap();
        let dense = g.adjacency_matrix().to_dense();
        assert_eq!(dense.iter().copied().sum::<f64>(), 0.0);
    }

    #[test]
    fn components_on_path_and_disjoint_edges() {
        let (labels, c) = path3().connected_components();
        assert_eq!(c, 1);
        assert!(labels.iter().all(|&l| l == 1));

        let two = ArealGraph::from_edges(4, &[(1, 2), (3, 4)]).unwrap();
        let (labels, c) = two.connected_components();
        assert_eq!(c, 2);
        assert_eq!(labels[0], labels[1]);
        assert_eq!(labels[2], labels[3]);
        assert_ne!(labels[0], labels[2]);
    }

    #[test]
    fn components_match_brute_force_reachability() {
        // 10-node graph with three components.
        let edges = [(1, 2), (2, 3), (3, 1), (4, 5), (6, 7), (7, 8), (8, 9)];
        let g = ArealGraph::from_edges(10, &edges).unwrap();
        let (labels, _) = g.connected_components();

        // Brute-force transitive closure.
        let n = g.n_regions();
        let mut reach = vec![vec![false; n]; n];
        for i in 0..n {
            reach[i][i] = true;
        }
        for &(a, b) in g.edges() {
            reach[a][b] = true;
            reach[b][a] = true;
        }
        for k in 0..n {
            for i in 0..n {
                for j in 0..n {
                    if reach[i][k] && reach[k][j] {
                        reach[i][j] = true;
                    }
                }
            }
        }
        for i in 0..n {
            for j in 0..n {
                assert_eq!(labels[i] == labels[j], reach[i][j], "pair ({i}, {j})");
            }
        }
    }

    #[test]
    fn load_is_invariant_to_edge_order_and_swap() {
        let a = ArealGraph::parse_edge_list("regions: 4\n1 2\n2 3\n3 4\n").unwrap();
        let b = ArealGraph::parse_edge_list("regions: 4\n4 3\n2 1\n3 2\n").unwrap();
        assert_eq!(a.edges(), b.edges());
    }
}
