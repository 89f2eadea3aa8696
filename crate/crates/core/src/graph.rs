//! Augmented leader–follower digraph and the matrices derived from it.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{self, Mat};

/// A singular value is treated as zero below this fraction of `sigma_max`.
pub const SINGULAR_REL_TOL: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("graph needs at least one follower")]
    Empty,
    #[error("adjacency must be {n}x{n}, got {rows}x{cols}")]
    AdjacencyShape { n: usize, rows: usize, cols: usize },
    #[error("pinning vector has length {found}, expected {expected}")]
    PinningLength { found: usize, expected: usize },
    #[error("negative or non-finite weight at ({row}, {col})")]
    BadWeight { row: usize, col: usize },
    #[error("negative or non-finite pinning gain for follower {0}")]
    BadPinning(usize),
    #[error("self-loop at follower {0}")]
    SelfLoop(usize),
    #[error("follower {0} has d_i + g_i = 0 (no incoming information)")]
    DegenerateNode(usize),
    #[error("every follower is pinned to the leader; the agent-wise local theory needs fewer than N pinned followers")]
    AllPinned,
}

/// Follower digraph plus leader pinning gains. Row `i` of `adjacency` holds
/// the incoming weights `a_ij` (edge `j -> i`).
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedGraph {
    adjacency: Mat,
    pinning: Vec<f64>,
}

/// Result of [`topological_order`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TopologicalOrder {
    /// Followers listed so that every edge goes from an earlier to a later entry.
    Order(Vec<usize>),
    CycleDetected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphSpec {
    pub adjacency: Vec<Vec<f64>>,
    pub pinning: Vec<f64>,
}

impl AugmentedGraph {
    pub fn new(adjacency: Mat, pinning: Vec<f64>) -> Result<Self, GraphError> {
        let n = pinning.len();
        if n == 0 {
            return Err(GraphError::Empty);
        }
        if adjacency.nrows() != n || adjacency.ncols() != n {
            return Err(GraphError::AdjacencyShape {
                n,
                rows: adjacency.nrows(),
                cols: adjacency.ncols(),
            });
        }
        for i in 0..n {
            for j in 0..n {
                let a = adjacency[(i, j)];
                if !a.is_finite() || a < 0.0 {
                    return Err(GraphError::BadWeight { row: i, col: j });
                }
            }
            if adjacency[(i, i)] != 0.0 {
                return Err(GraphError::SelfLoop(i));
            }
            if !pinning[i].is_finite() || pinning[i] < 0.0 {
                return Err(GraphError::BadPinning(i));
            }
        }
        Ok(Self { adjacency, pinning })
    }

    pub fn from_spec(spec: &GraphSpec) -> Result<Self, GraphError> {
        let n = spec.pinning.len();
        let rows = spec.adjacency.len();
        if spec.adjacency.iter().any(|r| r.len() != n) || rows != n {
            return Err(GraphError::AdjacencyShape {
                n,
                rows,
                cols: spec.adjacency.first().map_or(0, |r| r.len()),
            });
        }
        let adjacency = Mat::from_fn(n, n, |i, j| spec.adjacency[i][j]);
        Self::new(adjacency, spec.pinning.clone())
    }

    pub fn to_spec(&self) -> GraphSpec {
        GraphSpec { adjacency: linalg::to_rows(&self.adjacency), pinning: self.pinning.clone() }
    }

    pub fn n_followers(&self) -> usize {
        self.pinning.len()
    }

    pub fn adjacency(&self) -> &Mat {
        &self.adjacency
    }

    pub fn pinning(&self) -> &[f64] {
        &self.pinning
    }

    pub fn in_degree(&self, i: usize) -> f64 {
        self.adjacency.row(i).sum()
    }

    /// `d_i + g_i` for every follower.
    pub fn total_weights(&self) -> Vec<f64> {
        (0..self.n_followers()).map(|i| self.in_degree(i) + self.pinning[i]).collect()
    }

    pub fn pinned_count(&self) -> usize {
        self.pinning.iter().filter(|&&g| g > 0.0).count()
    }
}

/// Cached graph-derived matrices and scalars.
#[derive(Debug, Clone)]
pub struct GraphMatrices {
    pub p: usize,
    /// `diag(1 / (d_i + g_i))`
    pub f: Mat,
    pub fa: Mat,
    /// `(I_N - F A) ⊗ I_p`
    pub w: Mat,
    pub sigma_max: f64,
    /// Smallest singular value of `FA` above `SINGULAR_REL_TOL * sigma_max`.
    pub sigma_min_nz: f64,
    /// `sigma_max^3 / sigma_min_nz`, the smallest admissible local coupling weight.
    pub r_threshold: f64,
}

pub fn build_graph_matrices(g: &AugmentedGraph, p: usize) -> Result<GraphMatrices, GraphError> {
    assert!(p >= 1, "output dimension must be positive");
    let n = g.n_followers();
    let totals = g.total_weights();
    if let Some(i) = totals.iter().position(|&t| t <= 0.0) {
        return Err(GraphError::DegenerateNode(i));
    }
    if g.pinned_count() >= n {
        return Err(GraphError::AllPinned);
    }
    let f = Mat::from_diagonal(&nalgebra::DVector::from_iterator(n, totals.iter().map(|t| 1.0 / t)));
    let fa = &f * g.adjacency();
    let w = (Mat::identity(n, n) - &fa).kronecker(&Mat::identity(p, p));
    let s = linalg::singular_values(&fa);
    let sigma_max = s[0];
    // |E'| < N with d_i + g_i > 0 means some follower has an in-neighbour,
    // so FA is nonzero.
    debug_assert!(sigma_max > 0.0);
    let sigma_min_nz = s
        .iter()
        .copied()
        .filter(|&x| x > SINGULAR_REL_TOL * sigma_max)
        .fold(f64::INFINITY, f64::min);
    let r_threshold = sigma_max.powi(3) / sigma_min_nz;
    Ok(GraphMatrices { p, f, fa, w, sigma_max, sigma_min_nz, r_threshold })
}

/// Breadth-first reachability from the leader over the support of the weights.
pub fn reachable_from_leader(g: &AugmentedGraph) -> Vec<bool> {
    let n = g.n_followers();
    let mut seen = vec![false; n];
    let mut queue = VecDeque::new();
    for i in 0..n {
        if g.pinning[i] > 0.0 {
            seen[i] = true;
            queue.push_back(i);
        }
    }
    while let Some(j) = queue.pop_front() {
        for i in 0..n {
            if !seen[i] && g.adjacency[(i, j)] > 0.0 {
                seen[i] = true;
                queue.push_back(i);
            }
        }
    }
    seen
}

pub fn has_spanning_tree(g: &AugmentedGraph) -> bool {
    reachable_from_leader(g).into_iter().all(|r| r)
}

/// Kahn's algorithm on the follower graph (edges `j -> i` for `a_ij > 0`).
/// Ties are broken by the smallest index so the order is deterministic.
pub fn topological_order(g: &AugmentedGraph) -> TopologicalOrder {
    let n = g.n_followers();
    let mut indeg: Vec<usize> =
        (0..n).map(|i| (0..n).filter(|&j| g.adjacency[(i, j)] > 0.0).count()).collect();
    let mut order = Vec::with_capacity(n);
    let mut done = vec![false; n];
    while order.len() < n {
        let Some(next) = (0..n).find(|&i| !done[i] && indeg[i] == 0) else {
            return TopologicalOrder::CycleDetected;
        };
        done[next] = true;
        order.push(next);
        for i in 0..n {
            if g.adjacency[(i, next)] > 0.0 {
                indeg[i] -= 1;
            }
        }
    }
    TopologicalOrder::Order(order)
}

/// Permutation matrix `P` with `P[k, order[k]] = 1`.
pub fn permutation_matrix(order: &[usize]) -> Mat {
    let n = order.len();
    let mut p = Mat::zeros(n, n);
    for (k, &i) in order.iter().enumerate() {
        p[(k, i)] = 1.0;
    }
    p
}

#[cfg(test)]
mod tests {
    use super::*;

    fn graph(adj: &[&[f64]], pin: &[f64]) -> AugmentedGraph {
        let n = pin.len();
        AugmentedGraph::new(Mat::from_fn(n, n, |i, j| adj[i][j]), pin.to_vec()).unwrap()
    }

    fn example1() -> AugmentedGraph {
        graph(&[&[0.0, 1.0], &[1.0, 0.0]], &[1.0, 0.0])
    }

    fn example3() -> AugmentedGraph {
        graph(&[&[0.0, 0.0], &[1.0, 0.0]], &[1.0, 0.0])
    }

    fn example6() -> AugmentedGraph {
        graph(
            &[
                &[0.0, 0.2, 0.0, 0.1],
                &[0.2, 0.0, 0.1, 0.1],
                &[0.0, 0.2, 0.0, 0.1],
                &[0.0, 0.0, 0.0, 0.0],
            ],
            &[0.5, 0.0, 0.0, 0.1],
        )
    }

    #[test]
    fn example1_graph_matrices() {
        let gm = build_graph_matrices(&example1(), 1).unwrap();
        assert_eq!(gm.f[(0, 0)], 0.5);
        assert_eq!(gm.f[(1, 1)], 1.0);
        let expected = Mat::from_row_slice(2, 2, &[0.0, 0.5, 1.0, 0.0]);
        assert_eq!(gm.fa, expected);
    }

    #[test]
    fn example3_thresholds_are_unity() {
        let gm = build_graph_matrices(&example3(), 1).unwrap();
        assert!((gm.sigma_max - 1.0).abs() < 1e-14);
        assert!((gm.sigma_min_nz - 1.0).abs() < 1e-14);
        assert!((gm.r_threshold - 1.0).abs() < 1e-13);
    }

    #[test]
    fn single_pinned_follower_rejected() {
        let g = graph(&[&[0.0]], &[1.0]);
        assert_eq!(build_graph_matrices(&g, 1).unwrap_err(), GraphError::AllPinned);
    }

    #[test]
    fn isolated_follower_is_degenerate() {
        let g = graph(&[&[0.0, 0.0], &[0.0, 0.0]], &[1.0, 0.0]);
        assert_eq!(build_graph_matrices(&g, 1).unwrap_err(), GraphError::DegenerateNode(1));
    }

    #[test]
    fn self_loop_rejected() {
        let err = AugmentedGraph::new(Mat::from_row_slice(1, 1, &[1.0]), vec![1.0]).unwrap_err();
        assert_eq!(err, GraphError::SelfLoop(0));
    }

    #[test]
    fn spanning_tree_examples() {
        assert!(has_spanning_tree(&example1()));
        assert!(has_spanning_tree(&example6()));
        let g = graph(&[&[0.0, 0.0], &[0.0, 0.0]], &[1.0, 0.0]);
        assert!(!has_spanning_tree(&g));
    }

    #[test]
    fn topological_order_examples() {
        assert_eq!(topological_order(&example3()), TopologicalOrder::Order(vec![0, 1]));
        assert_eq!(topological_order(&example1()), TopologicalOrder::CycleDetected);
        assert_eq!(topological_order(&example6()), TopologicalOrder::CycleDetected);
    }

    #[test]
    fn example6_threshold_below_configured_weight() {
        let gm = build_graph_matrices(&example6(), 1).unwrap();
        assert!(gm.r_threshold <= 0.92);
        assert!((gm.r_threshold * gm.sigma_min_nz - gm.sigma_max.powi(3)).abs() < 1e-14);
    }

    #[test]
    fn w_has_kronecker_size() {
        let gm = build_graph_matrices(&example6(), 3).unwrap();
        assert_eq!(gm.w.shape(), (12, 12));
    }
}
