//! Collision graph and its topological Markov chain.
//!
//! Vertices are labelled collision orbits; `k → k'` is an edge when `k` ends
//! at the scatterer point where `k'` starts and the momentum jumps there.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use petgraph::algo::tarjan_scc;
use petgraph::graph::DiGraph;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SymbolicError {
    #[error("path enumeration exceeds the budget of {budget} codes")]
    BudgetExceeded { budget: usize },
    #[error("graph has no vertices")]
    Empty,
    #[error("invalid input: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, SymbolicError>;

/// A collision orbit as seen by the graph.
#[derive(Debug, Clone)]
pub struct Vertex {
    pub label: String,
    /// Id of the scatterer point where the orbit starts.
    pub from: usize,
    /// Id of the scatterer point where the orbit ends.
    pub to: usize,
    pub p_minus: DVector<f64>,
    pub p_plus: DVector<f64>,
    pub v_minus: DVector<f64>,
    pub v_plus: DVector<f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct GraphOptions {
    /// Momentum jumps below `jump_tol·‖p‖` do not count.
    pub jump_tol: f64,
    /// Also drop edges with `v_k⁺ = −v_{k'}⁻`.
    pub no_straight_reflection: bool,
    pub angle_tol: f64,
}

impl Default for GraphOptions {
    fn default() -> Self {
        Self { jump_tol: 1e-6, no_straight_reflection: false, angle_tol: 1e-6 }
    }
}

#[derive(Debug, Clone)]
pub struct CollisionGraph {
    pub vertices: Vec<Vertex>,
    pub adjacency: Vec<Vec<usize>>,
    pub options: GraphOptions,
}

fn joins(a: &Vertex, b: &Vertex, opts: &GraphOptions) -> bool {
    if a.to != b.from {
        return false;
    }
    let scale = a.p_plus.norm().max(b.p_minus.norm());
    if (&a.p_plus - &b.p_minus).norm() <= opts.jump_tol * scale {
        return false;
    }
    if opts.no_straight_reflection {
        let vs = a.v_plus.norm().max(b.v_minus.norm());
        if (&a.v_plus + &b.v_minus).norm() <= opts.angle_tol * vs {
            return false;
        }
    }
    true
}

pub fn build_graph(vertices: Vec<Vertex>, opts: &GraphOptions) -> CollisionGraph {
    let adjacency = vertices.iter().map(|a| (0..vertices.len()).filter(|&j| joins(a, &vertices[j], opts)).collect()).collect();
    CollisionGraph { vertices, adjacency, options: *opts }
}

impl CollisionGraph {
    /// Graph given directly by its adjacency lists, with placeholder vertices.
    pub fn from_adjacency(adjacency: Vec<Vec<usize>>) -> Result<Self> {
        let n = adjacency.len();
        if adjacency.iter().flatten().any(|&j| j >= n) {
            return Err(SymbolicError::Invalid("edge target out of range".into()));
        }
        let z = DVector::zeros(0);
        let vertices = (0..n)
            .map(|i| Vertex {
                label: i.to_string(),
                from: 0,
                to: 0,
                p_minus: z.clone(),
                p_plus: z.clone(),
                v_minus: z.clone(),
                v_plus: z.clone(),
            })
            .collect();
        Ok(Self { vertices, adjacency, options: GraphOptions::default() })
    }

    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        self.adjacency[a].contains(&b)
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency.iter().map(Vec::len).sum()
    }

    pub fn matrix(&self) -> DMatrix<f64> {
        let n = self.len();
        let mut a = DMatrix::zeros(n, n);
        for (i, row) in self.adjacency.iter().enumerate() {
            for &j in row {
                a[(i, j)] = 1.0;
            }
        }
        a
    }

    /// Adjacency list dump, one `label -> label, label` line per vertex.
    pub fn adjacency_text(&self) -> String {
        self.to_string()
    }

    /// Edge rule re-evaluated against the stored momenta.
    pub fn is_consistent(&self) -> bool {
        self.vertices.iter().enumerate().all(|(i, a)| {
            self.vertices.iter().enumerate().all(|(j, b)| joins(a, b, &self.options) == self.has_edge(i, j))
        })
    }

    /// Strongly connected components with at least one internal edge.
    pub fn components(&self) -> Vec<Vec<usize>> {
        let mut g = DiGraph::<(), ()>::new();
        let nodes: Vec<_> = (0..self.len()).map(|_| g.add_node(())).collect();
        for (i, row) in self.adjacency.iter().enumerate() {
            for &j in row {
                g.add_edge(nodes[i], nodes[j], ());
            }
        }
        let mut comps: Vec<Vec<usize>> = tarjan_scc(&g)
            .into_iter()
            .map(|c| {
                let mut v: Vec<usize> = c.into_iter().map(|n| n.index()).collect();
                v.sort_unstable();
                v
            })
            .filter(|c| c.len() > 1 || self.has_edge(c[0], c[0]))
            .collect();
        comps.sort();
        comps
    }
}

impl fmt::Display for CollisionGraph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (v, row) in self.vertices.iter().zip(&self.adjacency) {
            let targets: Vec<&str> = row.iter().map(|&j| self.vertices[j].label.as_str()).collect();
            writeln!(f, "{} -> {}", v.label, targets.join(", "))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct EntropyReport {
    /// `ln ρ(A)`; `−∞` when there is no chain dynamics.
    pub entropy: f64,
    pub spectral_radius: f64,
    /// The graph has more than one nontrivial component.
    pub reducible: bool,
    /// Vertices of the component that realizes the spectral radius.
    pub dominant: Vec<usize>,
    /// `|ρ_power − ρ_dense|` for graphs with at most 12 vertices.
    pub dense_check: Option<f64>,
}

impl EntropyReport {
    pub fn has_dynamics(&self) -> bool {
        self.entropy > f64::NEG_INFINITY
    }
}

/// Perron root of a nonnegative irreducible matrix, by power iteration on
/// `A + I` (which is primitive).
fn perron_root(a: &DMatrix<f64>, tol: f64) -> f64 {
    let n = a.nrows();
    let b = a + DMatrix::identity(n, n);
    let mut x = DVector::from_element(n, 1.0 / (n as f64).sqrt());
    let mut lambda = 0.0;
    for _ in 0..1_000_000 {
        let y = &b * &x;
        let next = y.norm();
        x = y / next;
        if (next - lambda).abs() <= tol * next {
            let y = &b * &x;
            let rq = x.dot(&y);
            return rq - 1.0;
        }
        lambda = next;
    }
    lambda - 1.0
}

pub fn entropy(g: &CollisionGraph) -> Result<EntropyReport> {
    if g.is_empty() {
        return Err(SymbolicError::Empty);
    }
    let a = g.matrix();
    let comps = g.components();
    let mut rho = 0.0;
    let mut dominant = Vec::new();
    for c in &comps {
        let sub = DMatrix::from_fn(c.len(), c.len(), |i, j| a[(c[i], c[j])]);
        let r = perron_root(&sub, 1e-12);
        if r > rho + 1e-12 {
            rho = r;
            dominant = c.clone();
        }
    }
    let dense_check = (g.len() <= 12).then(|| {
        let dense = a.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max);
        (dense - rho).abs()
    });
    let entropy = if rho > 0.0 { rho.ln() } else { f64::NEG_INFINITY };
    Ok(EntropyReport { entropy, spectral_radius: rho, reducible: comps.len() > 1, dominant, dense_check })
}

#[derive(Debug, Clone, Copy)]
pub struct PathBudget {
    pub max_codes: usize,
}

impl Default for PathBudget {
    fn default() -> Self {
        Self { max_codes: 1_000_000 }
    }
}

/// All walks with `n` edges (`n + 1` vertices), in lexicographic order.
pub fn paths(g: &CollisionGraph, n: usize, budget: &PathBudget) -> Result<Vec<Vec<usize>>> {
    let mut out = Vec::new();
    for v in 0..g.len() {
        extend(g, &mut vec![v], n + 1, None, budget, &mut out)?;
    }
    Ok(out)
}

/// Closed walks `k₀ → … → k_{n−1} → k₀` with `n` vertices; every rotation
/// is listed separately.
pub fn periodic_paths(g: &CollisionGraph, n: usize, budget: &PathBudget) -> Result<Vec<Vec<usize>>> {
    if n == 0 {
        return Err(SymbolicError::Invalid("period must be at least 1".into()));
    }
    let mut out = Vec::new();
    for v in 0..g.len() {
        extend(g, &mut vec![v], n, Some(v), budget, &mut out)?;
    }
    Ok(out)
}

fn extend(
    g: &CollisionGraph,
    prefix: &mut Vec<usize>,
    len: usize,
    close: Option<usize>,
    budget: &PathBudget,
    out: &mut Vec<Vec<usize>>,
) -> Result<()> {
    let last = prefix[prefix.len() - 1];
    if prefix.len() == len {
        if close.is_none_or(|c| g.has_edge(last, c)) {
            if out.len() >= budget.max_codes {
                return Err(SymbolicError::BudgetExceeded { budget: budget.max_codes });
            }
            out.push(prefix.clone());
        }
        return Ok(());
    }
    for &next in &g.adjacency[last] {
        prefix.push(next);
        extend(g, prefix, len, close, budget, out)?;
        prefix.pop();
    }
    Ok(())
}

/// Number of walks with `n` edges, by the transfer matrix.
pub fn path_count(g: &CollisionGraph, n: usize) -> f64 {
    let a = g.matrix();
    let mut x = DVector::from_element(g.len(), 1.0);
    for _ in 0..n {
        x = &a * x;
    }
    x.sum()
}
