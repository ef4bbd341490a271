//! Scenario files: JSON documents describing a system, a chain and the
//! pipeline to run on it. Unknown fields are rejected.

use std::path::Path;

use serde::Deserialize;

use crate::CliError;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub space: SpaceSpec,
    pub hamiltonian: HamiltonianSpec,
    #[serde(default)]
    pub scatterer: Option<ScattererSpec>,
    #[serde(default)]
    pub backend: Option<BackendSpec>,
    #[serde(default)]
    pub chain: Option<ChainSpec>,
    #[serde(default)]
    pub sweep: SweepSpec,
    #[serde(default)]
    pub ncenter: Option<NCenterSpec>,
    #[serde(default)]
    pub kepler: Option<KeplerSpec>,
    #[serde(default)]
    pub graph: Option<GraphSpec>,
    #[serde(default)]
    pub tolerances: Tolerances,
    #[serde(default)]
    pub gates: Gates,
    #[serde(default)]
    pub pipeline: Vec<Stage>,
    #[serde(default)]
    pub output: Option<String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SpaceSpec {
    Euclidean { dim: usize },
    Torus { periods: Vec<f64> },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HamiltonianSpec {
    /// Diagonal of the mass matrix; identity when absent.
    #[serde(default)]
    pub masses: Option<Vec<f64>>,
    pub energy: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScattererSpec {
    Points { points: Vec<Vec<f64>> },
    Diagonal { body_dim: usize },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BackendSpec {
    FreeFlight,
    Box { walls: Vec<[f64; 2]> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundarySpec {
    Periodic,
    Fixed,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PointSpec {
    pub component: usize,
    #[serde(default)]
    pub coords: Vec<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainSpec {
    pub boundary: BoundarySpec,
    pub code: Vec<Vec<i64>>,
    pub points: Vec<PointSpec>,
    #[serde(default)]
    pub a: Option<Vec<f64>>,
    #[serde(default)]
    pub b: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    #[serde(default)]
    pub eps: Vec<f64>,
    #[serde(default)]
    pub mu: Vec<f64>,
    #[serde(default)]
    pub windows: Vec<usize>,
    #[serde(default)]
    pub random_starts: usize,
    #[serde(default)]
    pub lyapunov: bool,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NCenterSpec {
    /// One coefficient per scatterer point; positive is attracting.
    pub alphas: Vec<f64>,
    /// Periodic sequence of center indices.
    pub code: Vec<usize>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KeplerSpec {
    pub alpha1: f64,
    pub alpha2: f64,
    pub energy: f64,
    pub k: Vec<[i64; 2]>,
    /// Arc types, 0 short and 1 long.
    #[serde(default)]
    pub types: Option<[i64; 2]>,
    pub z: Vec<[[f64; 2]; 2]>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphSpec {
    #[serde(default)]
    pub adjacency: Option<Vec<Vec<usize>>>,
    /// Build the graph of straight links between the scatterer points.
    #[serde(default)]
    pub from_centers: bool,
    #[serde(default)]
    pub path_lengths: Vec<usize>,
}

/// Overrides of module defaults.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tolerances {
    pub newton_tol: Option<f64>,
    pub newton_max_iterations: Option<usize>,
    pub shadow_tol: Option<f64>,
    pub shadow_max_iterations: Option<usize>,
    pub fd_step: Option<f64>,
    pub grazing_tol: Option<f64>,
    pub jump_tol: Option<f64>,
    pub angle_tol: Option<f64>,
    pub ncenter_tol: Option<f64>,
    pub ncenter_eta: Option<f64>,
    pub energy_tol: Option<f64>,
    pub random_radius: Option<f64>,
    /// `ε` of the shadow chain certified when the scatterer has no free coordinates.
    pub certify_eps: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Gates {
    pub eps_slope: Option<[f64; 2]>,
    pub lyapunov_r2: Option<f64>,
    pub certificate_stabilizes: Option<bool>,
    pub mu_slope_min: Option<f64>,
    pub min_entropy: Option<f64>,
    pub random_starts_converge: Option<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    ChainSolve,
    ChainCertify,
    BilliardShadow,
    NcenterShadow,
    KeplerTable,
    GraphEntropy,
}

impl Stage {
    pub fn name(&self) -> &'static str {
        match self {
            Stage::ChainSolve => "chain_solve",
            Stage::ChainCertify => "chain_certify",
            Stage::BilliardShadow => "billiard_shadow",
            Stage::NcenterShadow => "ncenter_shadow",
            Stage::KeplerTable => "kepler_table",
            Stage::GraphEntropy => "graph_entropy",
        }
    }
}

fn schema(path: impl Into<String>, message: impl Into<String>) -> CliError {
    CliError::Schema { path: path.into(), message: message.into() }
}

impl Scenario {
    pub fn from_str(text: &str) -> Result<Self, CliError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let sc: Scenario = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            schema(if path.is_empty() { ".".to_string() } else { path }, e.into_inner().to_string())
        })?;
        sc.validate()?;
        Ok(sc)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io { path: path.display().to_string(), message: e.to_string() })?;
        Self::from_str(&text)
    }

    pub fn dim(&self) -> usize {
        match &self.space {
            SpaceSpec::Euclidean { dim } => *dim,
            SpaceSpec::Torus { periods } => periods.len(),
        }
    }

    /// Semantic checks that serde cannot express.
    pub fn validate(&self) -> Result<(), CliError> {
        let d = self.dim();
        if d == 0 {
            return Err(schema("space", "dimension must be positive"));
        }
        if let Some(m) = &self.hamiltonian.masses {
            if m.len() != d {
                return Err(schema("hamiltonian.masses", format!("expected {d} entries, found {}", m.len())));
            }
            if let Some(i) = m.iter().position(|&x| !(x > 0.0)) {
                return Err(schema(format!("hamiltonian.masses[{i}]"), "masses must be positive"));
            }
        }
        let components = match &self.scatterer {
            Some(ScattererSpec::Points { points }) => {
                for (i, p) in points.iter().enumerate() {
                    if p.len() != d {
                        return Err(schema(format!("scatterer.points[{i}]"), format!("expected {d} coordinates, found {}", p.len())));
                    }
                }
                if points.is_empty() {
                    return Err(schema("scatterer.points", "at least one point is required"));
                }
                points.iter().map(|_| 0usize).collect::<Vec<_>>()
            }
            Some(ScattererSpec::Diagonal { body_dim }) => {
                if 2 * body_dim != d {
                    return Err(schema("scatterer.body_dim", format!("two bodies of dimension {body_dim} do not fill dimension {d}")));
                }
                vec![*body_dim]
            }
            None => Vec::new(),
        };
        if let Some(BackendSpec::Box { walls }) = &self.backend {
            if walls.len() != d {
                return Err(schema("backend.walls", format!("expected {d} intervals, found {}", walls.len())));
            }
            if let Some(i) = walls.iter().position(|w| !(w[1] > w[0])) {
                return Err(schema(format!("backend.walls[{i}]"), "interval must be increasing"));
            }
        }
        if let Some(c) = &self.chain {
            if self.scatterer.is_none() {
                return Err(schema("chain", "a chain needs a scatterer"));
            }
            if self.backend.is_none() {
                return Err(schema("chain", "a chain needs a backend"));
            }
            for (i, p) in c.points.iter().enumerate() {
                let Some(&m) = components.get(p.component) else {
                    return Err(schema(format!("chain.points[{i}].component"), format!("no scatterer component {}", p.component)));
                };
                if p.coords.len() != m {
                    return Err(schema(format!("chain.points[{i}].coords"), format!("expected {m} chart coordinates, found {}", p.coords.len())));
                }
            }
            let expected = match c.boundary {
                BoundarySpec::Periodic => c.points.len(),
                BoundarySpec::Fixed => c.points.len() + 1,
            };
            if c.code.len() != expected {
                return Err(schema("chain.code", format!("expected {expected} symbols, found {}", c.code.len())));
            }
            let width = match &self.backend {
                Some(BackendSpec::Box { .. }) => d,
                _ if matches!(self.space, SpaceSpec::Torus { .. }) => d,
                _ => 0,
            };
            for (i, k) in c.code.iter().enumerate() {
                if k.len() != width {
                    return Err(schema(format!("chain.code[{i}]"), format!("expected {width} entries, found {}", k.len())));
                }
            }
            match c.boundary {
                BoundarySpec::Fixed => {
                    for (f, v) in [("chain.a", &c.a), ("chain.b", &c.b)] {
                        match v {
                            Some(v) if v.len() == d => {}
                            Some(v) => return Err(schema(f, format!("expected {d} coordinates, found {}", v.len()))),
                            None => return Err(schema(f, "fixed chains need both endpoints")),
                        }
                    }
                }
                BoundarySpec::Periodic => {
                    if c.a.is_some() || c.b.is_some() {
                        return Err(schema("chain.a", "endpoints are only used by fixed chains"));
                    }
                    if c.points.is_empty() {
                        return Err(schema("chain.points", "a periodic chain needs at least one point"));
                    }
                }
            }
        }
        for (i, e) in self.sweep.eps.iter().enumerate() {
            if !(*e > 0.0) {
                return Err(schema(format!("sweep.eps[{i}]"), "ε must be positive"));
            }
        }
        for (i, m) in self.sweep.mu.iter().enumerate() {
            if !(*m > 0.0) {
                return Err(schema(format!("sweep.mu[{i}]"), "μ must be positive"));
            }
        }
        if let Some(n) = &self.ncenter {
            let count = match &self.scatterer {
                Some(ScattererSpec::Points { points }) => points.len(),
                _ => return Err(schema("ncenter", "the n-center problem needs a point scatterer")),
            };
            if n.alphas.len() != count {
                return Err(schema("ncenter.alphas", format!("expected {count} coefficients, found {}", n.alphas.len())));
            }
            if let Some(i) = n.code.iter().position(|&c| c >= count) {
                return Err(schema(format!("ncenter.code[{i}]"), format!("no center {}", n.code[i])));
            }
            if n.code.len() < 2 {
                return Err(schema("ncenter.code", "at least two collisions are required"));
            }
        }
        if let Some(k) = &self.kepler {
            if !(k.alpha1 > 0.0 && k.alpha2 > 0.0) || (k.alpha1 + k.alpha2 - 1.0).abs() > 1e-12 {
                return Err(schema("kepler.alpha2", "mass ratios must be positive and sum to 1"));
            }
            if let Some(t) = k.types {
                if let Some(i) = t.iter().position(|&x| x != 0 && x != 1) {
                    return Err(schema(format!("kepler.types[{i}]"), "arc type is 0 (short) or 1 (long)"));
                }
            }
        }
        if let Some(g) = &self.graph {
            match (&g.adjacency, g.from_centers) {
                (Some(_), true) => return Err(schema("graph.adjacency", "give either an adjacency list or from_centers")),
                (None, false) => return Err(schema("graph", "give an adjacency list or set from_centers")),
                (None, true) if !matches!(self.scatterer, Some(ScattererSpec::Points { .. })) => {
                    return Err(schema("graph.from_centers", "needs a point scatterer"))
                }
                _ => {}
            }
            if let Some(adj) = &g.adjacency {
                for (i, row) in adj.iter().enumerate() {
                    if let Some(j) = row.iter().position(|&t| t >= adj.len()) {
                        return Err(schema(format!("graph.adjacency[{i}][{j}]"), format!("no vertex {}", row[j])));
                    }
                }
            }
        }
        for (i, s) in self.pipeline.iter().enumerate() {
            let ok = match s {
                Stage::ChainSolve | Stage::ChainCertify | Stage::BilliardShadow => self.chain.is_some(),
                Stage::NcenterShadow => self.ncenter.is_some(),
                Stage::KeplerTable => self.kepler.is_some(),
                Stage::GraphEntropy => self.graph.is_some(),
            };
            if !ok {
                return Err(schema(format!("pipeline[{i}]"), format!("stage {} has no input block", s.name())));
            }
        }
        Ok(())
    }
}
