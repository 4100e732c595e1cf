//! Communication graphs and their Metropolis mixing matrices.

use std::collections::{BTreeSet, VecDeque};
use std::fmt::Write as _;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::Array2;
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng;

const STOCHASTIC_TOL: f64 = 1e-12;
pub const DEFAULT_PLACEMENT_RETRIES: usize = 1000;

/// Undirected simple graph over agents `0..n_agents`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Graph {
    n_agents: usize,
    adjacency: Vec<Vec<usize>>,
}

impl Graph {
    /// Builds a graph from unordered edges. Duplicate edges (in either
    /// orientation) collapse; self-loops and out-of-range ids are rejected.
    pub fn from_edges(n_agents: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        if n_agents == 0 {
            return Err(Error::InvalidTopology("graph needs at least one agent".into()));
        }
        let mut sets = vec![BTreeSet::new(); n_agents];
        for (i, j) in edges {
            if i >= n_agents || j >= n_agents {
                return Err(Error::InvalidTopology(format!(
                    "edge ({i}, {j}) out of range for {n_agents} agents"
                )));
            }
            if i == j {
                return Err(Error::InvalidTopology(format!("self-loop at agent {i}")));
            }
            sets[i].insert(j);
            sets[j].insert(i);
        }
        Ok(Self {
            n_agents,
            adjacency: sets.into_iter().map(|s| s.into_iter().collect()).collect(),
        })
    }

    pub fn n_agents(&self) -> usize {
        self.n_agents
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.adjacency[i]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.adjacency[i].len()
    }

    /// Edges as `(i, j)` with `i < j`, lexicographically sorted.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        self.adjacency
            .iter()
            .enumerate()
            .flat_map(|(i, nbrs)| nbrs.iter().filter(move |&&j| j > i).map(move |&j| (i, j)))
            .collect()
    }

    pub fn n_edges(&self) -> usize {
        self.adjacency.iter().map(Vec::len).sum::<usize>() / 2
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.adjacency[i].binary_search(&j).is_ok()
    }

    pub fn is_connected(&self) -> bool {
        let mut seen = vec![false; self.n_agents];
        let mut queue = VecDeque::from([0usize]);
        seen[0] = true;
        let mut count = 1;
        while let Some(i) = queue.pop_front() {
            for &j in &self.adjacency[i] {
                if !seen[j] {
                    seen[j] = true;
                    count += 1;
                    queue.push_back(j);
                }
            }
        }
        count == self.n_agents
    }

    /// Edge-list text: first line `N`, then one `i j` line per edge.
    pub fn to_edge_list(&self) -> String {
        let mut out = format!("{}\n", self.n_agents);
        for (i, j) in self.edges() {
            let _ = writeln!(out, "{i} {j}");
        }
        out
    }

    pub fn from_edge_list(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(n, l)| (n + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
        let (line, first) = lines
            .next()
            .ok_or_else(|| Error::Format("empty edge list".into()))?;
        let n_agents: usize = first.parse().map_err(|_| Error::Parse {
            line,
            message: format!("expected agent count, found `{first}`"),
        })?;
        let mut edges = Vec::new();
        for (line, l) in lines {
            let mut parts = l.split_whitespace().map(str::parse::<usize>);
            match (parts.next(), parts.next(), parts.next()) {
                (Some(Ok(i)), Some(Ok(j)), None) => edges.push((i, j)),
                _ => {
                    return Err(Error::Parse {
                        line,
                        message: format!("expected `i j`, found `{l}`"),
                    })
                }
            }
        }
        Self::from_edges(n_agents, edges)
    }
}

/// Ring: agent `i` talks to `i-1` and `i+1` (mod N).
pub fn build_ring(n_agents: usize) -> Result<Graph> {
    if n_agents < 3 {
        return Err(Error::InvalidTopology(format!(
            "a ring needs at least 3 agents, got {n_agents}"
        )));
    }
    build_circulant(n_agents, 1)
}

/// Circulant graph: agent `i` talks to `i±1, ..., i±half_width` (mod N).
pub fn build_circulant(n_agents: usize, half_width: usize) -> Result<Graph> {
    if half_width == 0 || 2 * half_width >= n_agents {
        return Err(Error::InvalidTopology(format!(
            "circulant graph needs 0 < 2*half_width < n_agents, got half_width={half_width}, n_agents={n_agents}"
        )));
    }
    let edges = (0..n_agents).flat_map(|i| (1..=half_width).map(move |s| (i, (i + s) % n_agents)));
    Graph::from_edges(n_agents, edges)
}

/// Random geometric graph on the unit square; the whole placement is redrawn
/// with a fresh derived seed until the graph is connected.
pub fn build_random_geometric(n_agents: usize, radius: f64, seed: u64) -> Result<Graph> {
    build_random_geometric_with_retries(n_agents, radius, seed, DEFAULT_PLACEMENT_RETRIES)
}

pub fn build_random_geometric_with_retries(
    n_agents: usize,
    radius: f64,
    seed: u64,
    retries: usize,
) -> Result<Graph> {
    if n_agents == 0 {
        return Err(Error::InvalidTopology("graph needs at least one agent".into()));
    }
    if !(radius > 0.0 && radius <= std::f64::consts::SQRT_2) {
        return Err(Error::InvalidTopology(format!(
            "radius must lie in (0, sqrt 2], got {radius}"
        )));
    }
    for attempt in 0..retries {
        let points = geometric_placement(n_agents, seed, attempt as u64);
        let graph = Graph::from_edges(n_agents, geometric_edges(&points, radius))?;
        if graph.is_connected() {
            return Ok(graph);
        }
    }
    Err(Error::TopologyGeneration { attempts: retries })
}

/// Agent coordinates drawn for a given placement attempt.
pub fn geometric_placement(n_agents: usize, seed: u64, attempt: u64) -> Vec<[f64; 2]> {
    let mut rng = rng::stream(seed, &[rng::TAG_TOPOLOGY, attempt]);
    (0..n_agents).map(|_| [rng.gen::<f64>(), rng.gen::<f64>()]).collect()
}

fn geometric_edges(points: &[[f64; 2]], radius: f64) -> Vec<(usize, usize)> {
    let r2 = radius * radius;
    let mut edges = Vec::new();
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            let dx = points[i][0] - points[j][0];
            let dy = points[i][1] - points[j][1];
            if dx * dx + dy * dy <= r2 {
                edges.push((i, j));
            }
        }
    }
    edges
}

/// Symmetric doubly stochastic weight matrix supported on a graph.
#[derive(Debug, Clone, PartialEq)]
pub struct MixingMatrix {
    dense: Array2<f64>,
    // Nonzero entries of each row, column-ascending, diagonal included.
    rows: Vec<Vec<(usize, f64)>>,
}

impl MixingMatrix {
    /// Wraps a dense matrix after checking symmetry, entry range, and
    /// double stochasticity.
    pub fn from_dense(dense: Array2<f64>) -> Result<Self> {
        let (n, m) = dense.dim();
        if n != m || n == 0 {
            return Err(Error::shape("non-empty square matrix", format!("{n}x{m}")));
        }
        for i in 0..n {
            let row: f64 = dense.row(i).sum();
            let col: f64 = dense.column(i).sum();
            if (row - 1.0).abs() > STOCHASTIC_TOL || (col - 1.0).abs() > STOCHASTIC_TOL {
                return Err(Error::ContractViolation(format!(
                    "row/column {i} sums to {row}/{col}, expected 1"
                )));
            }
            for j in 0..n {
                let w = dense[[i, j]];
                if !(0.0..=1.0).contains(&w) {
                    return Err(Error::ContractViolation(format!("w[{i},{j}] = {w} outside [0, 1]")));
                }
                if (w - dense[[j, i]]).abs() > STOCHASTIC_TOL {
                    return Err(Error::ContractViolation(format!("w[{i},{j}] != w[{j},{i}]")));
                }
            }
        }
        let rows = (0..n)
            .map(|i| {
                (0..n)
                    .filter(|&j| dense[[i, j]] != 0.0)
                    .map(|j| (j, dense[[i, j]]))
                    .collect()
            })
            .collect();
        Ok(Self { dense, rows })
    }

    pub fn identity(n: usize) -> Self {
        Self::from_dense(Array2::eye(n)).expect("identity is doubly stochastic")
    }

    pub fn n_agents(&self) -> usize {
        self.dense.nrows()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.dense[[i, j]]
    }

    pub fn as_dense(&self) -> &Array2<f64> {
        &self.dense
    }

    /// Nonzero `(column, weight)` pairs of row `i`, including the diagonal.
    pub fn row(&self, i: usize) -> &[(usize, f64)] {
        &self.rows[i]
    }

    /// `(W + I) / 2`, the lazy mixing matrix used by exact diffusion.
    pub fn lazy(&self) -> Self {
        let n = self.n_agents();
        let dense = (&self.dense + &Array2::<f64>::eye(n)) * 0.5;
        Self::from_dense(dense).expect("average of doubly stochastic matrices")
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for row in self.dense.rows() {
            let cells: Vec<String> = row.iter().map(|w| w.to_string()).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }

    /// All eigenvalues, ascending.
    pub fn eigenvalues(&self) -> Vec<f64> {
        let n = self.n_agents();
        let m = DMatrix::from_fn(n, n, |i, j| self.dense[[i, j]]);
        let mut ev: Vec<f64> = SymmetricEigen::new(m).eigenvalues.iter().copied().collect();
        ev.sort_by(f64::total_cmp);
        ev
    }
}

/// Max-degree Metropolis rule: `w_ij = 1 / (1 + max(deg i, deg j))` on edges,
/// diagonal takes the remainder.
pub fn metropolis_weights(g: &Graph) -> Result<MixingMatrix> {
    if !g.is_connected() {
        return Err(Error::InvalidTopology("metropolis weights need a connected graph".into()));
    }
    let n = g.n_agents();
    let mut dense = Array2::<f64>::zeros((n, n));
    for (i, j) in g.edges() {
        let w = 1.0 / (1.0 + g.degree(i).max(g.degree(j)) as f64);
        dense[[i, j]] = w;
        dense[[j, i]] = w;
    }
    for i in 0..n {
        let off: f64 = g.neighbors(i).iter().map(|&j| dense[[i, j]]).sum();
        dense[[i, i]] = 1.0 - off;
    }
    MixingMatrix::from_dense(dense)
}

/// Algebraically smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(w: &Array2<f64>) -> Result<f64> {
    let (n, m) = w.dim();
    if n != m || n == 0 {
        return Err(Error::ContractViolation(format!("expected a square matrix, got {n}x{m}")));
    }
    for i in 0..n {
        for j in i + 1..n {
            if (w[[i, j]] - w[[j, i]]).abs() > STOCHASTIC_TOL {
                return Err(Error::ContractViolation(format!(
                    "matrix is not symmetric at ({i}, {j})"
                )));
            }
        }
    }
    let m = DMatrix::from_fn(n, n, |i, j| w[[i, j]]);
    Ok(SymmetricEigen::new(m).eigenvalues.iter().copied().fold(f64::INFINITY, f64::min))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn ring_structure() {
        let g = build_ring(10).unwrap();
        assert_eq!(g.n_edges(), 10);
        assert!((0..10).all(|i| g.degree(i) == 2));
        assert!(g.has_edge(0, 9) && g.has_edge(3, 4));

        let g4 = build_ring(4).unwrap();
        assert_eq!(g4.edges(), vec![(0, 1), (0, 3), (1, 2), (2, 3)]);
        assert!(!g4.has_edge(0, 2));

        let g3 = build_ring(3).unwrap();
        assert_eq!(g3.edges(), vec![(0, 1), (0, 2), (1, 2)]);
    }

    #[test]
    fn ring_too_small() {
        assert!(matches!(build_ring(2), Err(Error::InvalidTopology(_))));
    }

    #[test]
    fn circulant_degrees() {
        let g = build_circulant(10, 2).unwrap();
        assert!((0..10).all(|i| g.degree(i) == 4));
        assert_eq!(build_circulant(5, 1).unwrap(), build_ring(5).unwrap());
        assert!(matches!(build_circulant(4, 2), Err(Error::InvalidTopology(_))));
        assert!(matches!(build_circulant(6, 0), Err(Error::InvalidTopology(_))));
    }

    #[test]
    fn circulant_edge_count_by_enumeration() {
        // Count pairs at cyclic distance <= 2 by brute force.
        let n = 6;
        let mut count = 0;
        for i in 0..n {
            for j in i + 1..n {
                let d = (j - i).min(n - (j - i));
                if d <= 2 {
                    count += 1;
                }
            }
        }
        assert_eq!(count, 12);
        assert_eq!(build_circulant(6, 2).unwrap().n_edges(), count);
    }

    #[test]
    fn geometric_two_agents_full_radius() {
        for seed in 0..20 {
            let g = build_random_geometric(2, std::f64::consts::SQRT_2, seed).unwrap();
            assert_eq!(g.edges(), vec![(0, 1)]);
        }
    }

    #[test]
    fn geometric_radius_domain() {
        assert!(build_random_geometric(5, 0.0, 1).is_err());
        assert!(build_random_geometric(5, 1.5, 1).is_err());
    }

    #[test]
    fn geometric_retry_budget_exhausted() {
        let err = build_random_geometric_with_retries(50, 0.01, 3, 5).unwrap_err();
        assert!(matches!(err, Error::TopologyGeneration { attempts: 5 }));
    }

    #[test]
    fn metropolis_ring3_uniform() {
        let w = metropolis_weights(&build_ring(3).unwrap()).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert!((w.get(i, j) - 1.0 / 3.0).abs() < 1e-15);
            }
        }
        assert!(min_eigenvalue(w.as_dense()).unwrap().abs() < 1e-12);
    }

    #[test]
    fn metropolis_ring10() {
        let w = metropolis_weights(&build_ring(10).unwrap()).unwrap();
        for i in 0..10 {
            assert!((w.get(i, i) - 1.0 / 3.0).abs() < 1e-15);
            assert!((w.get(i, (i + 1) % 10) - 1.0 / 3.0).abs() < 1e-15);
            assert_eq!(w.get(i, (i + 5) % 10), 0.0);
        }
    }

    #[test]
    fn metropolis_rejects_disconnected() {
        let g = Graph::from_edges(4, [(0, 1), (2, 3)]).unwrap();
        assert!(!g.is_connected());
        assert!(matches!(metropolis_weights(&g), Err(Error::InvalidTopology(_))));
    }

    #[test]
    fn min_eigenvalue_identity_and_asymmetric() {
        assert_eq!(min_eigenvalue(&array![[1.0]]).unwrap(), 1.0);
        let err = min_eigenvalue(&array![[0.5, 0.5], [0.2, 0.8]]).unwrap_err();
        assert!(matches!(err, Error::ContractViolation(_)));
    }

    #[test]
    fn from_dense_rejects_non_stochastic() {
        assert!(MixingMatrix::from_dense(array![[0.5, 0.4], [0.4, 0.5]]).is_err());
        assert!(MixingMatrix::from_dense(array![[1.5, -0.5], [-0.5, 1.5]]).is_err());
    }

    #[test]
    fn edge_list_round_trip() {
        let g = build_circulant(7, 2).unwrap();
        let text = g.to_edge_list();
        assert!(text.starts_with("7\n"));
        assert_eq!(Graph::from_edge_list(&text).unwrap(), g);
    }

    #[test]
    fn edge_list_errors() {
        assert!(matches!(Graph::from_edge_list(""), Err(Error::Format(_))));
        assert!(matches!(
            Graph::from_edge_list("3\n0 1\n1 x\n"),
            Err(Error::Parse { line: 3, .. })
        ));
        assert!(matches!(Graph::from_edge_list("3\n0 0\n"), Err(Error::InvalidTopology(_))));
    }

    #[test]
    fn lazy_matrix_halves_off_diagonal() {
        let w = metropolis_weights(&build_ring(4).unwrap()).unwrap();
        let lazy = w.lazy();
        assert!((lazy.get(0, 1) - w.get(0, 1) / 2.0).abs() < 1e-15);
        assert!((lazy.get(0, 0) - (w.get(0, 0) + 1.0) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn csv_export_shape() {
        let w = metropolis_weights(&build_ring(3).unwrap()).unwrap();
        let csv = w.to_csv();
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.lines().all(|l| l.split(',').count() == 3));
    }
}
