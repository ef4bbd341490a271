//! Scatterers: finite point sets and chart-immersed submanifolds of a flat
//! ambient space, together with their ε-tubes.
//!
//! A tube boundary point is `f(x, εs) = ψ(x) + ε·N(x)·s` where `N(x)` is the
//! Gram–Schmidt normal frame and `s` lies on the cross-section of the normal
//! space. Frames use the Euclidean metric of the ambient coordinates.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::dynamics::AmbientSpace;
use crate::linalg::fd_jacobian;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScattererError {
    #[error("chart Jacobian is rank deficient at {coords:?}")]
    RankDeficient { coords: Vec<f64> },
    #[error("component index {0} out of range")]
    NoSuchComponent(usize),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("projection onto the scatterer did not converge")]
    Projection,
}

pub type Result<T> = std::result::Result<T, ScattererError>;

/// Immersion `ψ: ℝ^m → ℝ^d` of one scatterer component.
pub trait Immersion: Send + Sync {
    fn ambient_dim(&self) -> usize;
    fn chart_dim(&self) -> usize;
    fn point(&self, x: &DVector<f64>) -> DVector<f64>;

    /// `d × m` matrix of partial derivatives.
    fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        fd_jacobian(|y| self.point(y), x, 1e-6)
    }

    fn is_linear(&self) -> bool {
        false
    }

    fn name(&self) -> String {
        "chart".into()
    }
}

/// Collision set `{q₁ = q₂}` of two bodies in `ℝᵏ`: `x ↦ (x, x)`.
#[derive(Debug, Clone, Copy)]
pub struct Diagonal {
    pub body_dim: usize,
}

impl Immersion for Diagonal {
    fn ambient_dim(&self) -> usize {
        2 * self.body_dim
    }

    fn chart_dim(&self) -> usize {
        self.body_dim
    }

    fn point(&self, x: &DVector<f64>) -> DVector<f64> {
        let k = self.body_dim;
        DVector::from_fn(2 * k, |i, _| x[i % k])
    }

    fn jacobian(&self, _x: &DVector<f64>) -> DMatrix<f64> {
        let k = self.body_dim;
        DMatrix::from_fn(2 * k, k, |i, j| if i % k == j { 1.0 } else { 0.0 })
    }

    fn is_linear(&self) -> bool {
        true
    }

    fn name(&self) -> String {
        format!("diagonal(R^{})", self.body_dim)
    }
}

/// Affine subspace `x ↦ origin + basis·x`.
#[derive(Debug, Clone)]
pub struct AffineChart {
    pub origin: DVector<f64>,
    pub basis: DMatrix<f64>,
}

impl Immersion for AffineChart {
    fn ambient_dim(&self) -> usize {
        self.origin.len()
    }

    fn chart_dim(&self) -> usize {
        self.basis.ncols()
    }

    fn point(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.origin + &self.basis * x
    }

    fn jacobian(&self, _x: &DVector<f64>) -> DMatrix<f64> {
        self.basis.clone()
    }

    fn is_linear(&self) -> bool {
        true
    }

    fn name(&self) -> String {
        "affine".into()
    }
}

type ChartFn = dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync;

/// Immersion given by a closure; the Jacobian is taken by differences.
#[derive(Clone)]
pub struct ClosureChart {
    pub ambient_dim: usize,
    pub chart_dim: usize,
    pub f: Arc<ChartFn>,
}

impl ClosureChart {
    pub fn new(ambient_dim: usize, chart_dim: usize, f: impl Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static) -> Self {
        Self { ambient_dim, chart_dim, f: Arc::new(f) }
    }
}

impl Immersion for ClosureChart {
    fn ambient_dim(&self) -> usize {
        self.ambient_dim
    }

    fn chart_dim(&self) -> usize {
        self.chart_dim
    }

    fn point(&self, x: &DVector<f64>) -> DVector<f64> {
        (self.f)(x)
    }
}

/// Strictly convex cross-section of the normal space, described through
/// its Gauss map.
pub trait CrossSection: Send + Sync {
    /// Value of the defining equation; zero on the cross-section.
    fn equation(&self, s: &DVector<f64>) -> f64;

    /// Point of the cross-section whose outward normal is `nu`.
    fn support_point(&self, nu: &DVector<f64>) -> DVector<f64>;

    /// Outward unit normal at `s`.
    fn outward_normal(&self, s: &DVector<f64>) -> DVector<f64>;

    /// Derivative of `support_point` at `nu`.
    fn support_jacobian(&self, nu: &DVector<f64>) -> DMatrix<f64> {
        fd_jacobian(|y| self.support_point(y), nu, 1e-6)
    }
}

/// Unit sphere of the normal space.
#[derive(Debug, Clone, Copy, Default)]
pub struct UnitSphere;

impl CrossSection for UnitSphere {
    fn equation(&self, s: &DVector<f64>) -> f64 {
        s.norm() - 1.0
    }

    fn support_point(&self, nu: &DVector<f64>) -> DVector<f64> {
        nu / nu.norm()
    }

    fn outward_normal(&self, s: &DVector<f64>) -> DVector<f64> {
        s / s.norm()
    }

    fn support_jacobian(&self, nu: &DVector<f64>) -> DMatrix<f64> {
        let n = nu.norm();
        let u = nu / n;
        (DMatrix::identity(nu.len(), nu.len()) - &u * u.transpose()) / n
    }
}

#[derive(Clone)]
pub enum Component {
    Point(DVector<f64>),
    Chart(Arc<dyn Immersion>),
}

impl fmt::Debug for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Component::Point(a) => write!(f, "Point({:?})", a.as_slice()),
            Component::Chart(c) => write!(f, "Chart({})", c.name()),
        }
    }
}

impl Component {
    pub fn dim(&self) -> usize {
        match self {
            Component::Point(_) => 0,
            Component::Chart(c) => c.chart_dim(),
        }
    }
}

/// A point of the scatterer: component index plus chart coordinates (empty
/// for point components).
#[derive(Debug, Clone, PartialEq)]
pub struct ChainPoint {
    pub component: usize,
    pub coords: DVector<f64>,
}

impl ChainPoint {
    pub fn new(component: usize, coords: DVector<f64>) -> Self {
        Self { component, coords }
    }

    pub fn point(component: usize) -> Self {
        Self { component, coords: DVector::zeros(0) }
    }
}

#[derive(Debug, Clone)]
pub struct Frames {
    /// `d × m`, orthonormal columns spanning `T_xN`.
    pub tangent: DMatrix<f64>,
    /// `d × (d − m)`, orthonormal columns spanning the normal space.
    pub normal: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub struct BoundaryPoint {
    pub base: ChainPoint,
    pub direction: DVector<f64>,
    pub eps: f64,
    pub ambient: DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct Projection {
    pub base: ChainPoint,
    pub distance: f64,
    /// `q − ψ(x*)`, using minimum images on a torus.
    pub offset: DVector<f64>,
    /// Another component is equally close.
    pub ambiguous: bool,
}

#[derive(Clone)]
pub struct Scatterer {
    components: Vec<Component>,
    space: AmbientSpace,
    section: Arc<dyn CrossSection>,
    tube_radius: f64,
}

impl fmt::Debug for Scatterer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Scatterer")
            .field("components", &self.components)
            .field("space", &self.space)
            .field("tube_radius", &self.tube_radius)
            .finish()
    }
}

impl Scatterer {
    pub fn new(space: AmbientSpace, components: Vec<Component>) -> Result<Self> {
        let d = space.dim();
        for c in &components {
            let ok = match c {
                Component::Point(a) => a.len() == d,
                Component::Chart(ch) => ch.ambient_dim() == d && ch.chart_dim() < d,
            };
            if !ok {
                return Err(ScattererError::Dimension(format!("{c:?} does not fit ambient dimension {d}")));
            }
        }
        let tube_radius = default_tube_radius(&space, &components);
        Ok(Self { components, space, section: Arc::new(UnitSphere), tube_radius })
    }

    pub fn point_set(space: AmbientSpace, points: Vec<DVector<f64>>) -> Result<Self> {
        let pts = points.into_iter().map(|a| Component::Point(space.wrap(&a))).collect();
        Self::new(space, pts)
    }

    pub fn chart(space: AmbientSpace, chart: impl Immersion + 'static) -> Result<Self> {
        Self::new(space, vec![Component::Chart(Arc::new(chart))])
    }

    pub fn with_cross_section(mut self, section: Arc<dyn CrossSection>) -> Self {
        self.section = section;
        self
    }

    pub fn with_tube_radius(mut self, r: f64) -> Self {
        self.tube_radius = r;
        self
    }

    pub fn space(&self) -> &AmbientSpace {
        &self.space
    }

    pub fn ambient_dim(&self) -> usize {
        self.space.dim()
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    pub fn cross_section(&self) -> &dyn CrossSection {
        self.section.as_ref()
    }

    pub fn tube_radius(&self) -> f64 {
        self.tube_radius
    }

    pub fn component(&self, i: usize) -> Result<&Component> {
        self.components.get(i).ok_or(ScattererError::NoSuchComponent(i))
    }

    pub fn component_dim(&self, i: usize) -> Result<usize> {
        Ok(self.component(i)?.dim())
    }

    pub fn is_point_set(&self) -> bool {
        self.components.iter().all(|c| matches!(c, Component::Point(_)))
    }

    /// All components are points or affine charts.
    pub fn is_linear(&self) -> bool {
        self.components.iter().all(|c| match c {
            Component::Point(_) => true,
            Component::Chart(ch) => ch.is_linear(),
        })
    }

    /// `ψ(x)` in ambient coordinates.
    pub fn embed(&self, x: &ChainPoint) -> Result<DVector<f64>> {
        match self.component(x.component)? {
            Component::Point(a) => Ok(a.clone()),
            Component::Chart(c) => Ok(c.point(&x.coords)),
        }
    }

    /// `d × m` chart Jacobian (zero columns for point components).
    pub fn jacobian(&self, x: &ChainPoint) -> Result<DMatrix<f64>> {
        match self.component(x.component)? {
            Component::Point(_) => Ok(DMatrix::zeros(self.ambient_dim(), 0)),
            Component::Chart(c) => Ok(c.jacobian(&x.coords)),
        }
    }

    pub fn frames(&self, x: &ChainPoint) -> Result<Frames> {
        let d = self.ambient_dim();
        let jac = self.jacobian(x)?;
        let m = jac.ncols();
        let mut basis: Vec<DVector<f64>> = Vec::with_capacity(d);
        for j in 0..m {
            let v = orthogonalize(jac.column(j).into_owned(), &basis);
            let n = v.norm();
            if n <= 1e-10 * jac.column(j).norm().max(1e-300) {
                return Err(ScattererError::RankDeficient { coords: x.coords.as_slice().to_vec() });
            }
            basis.push(v / n);
        }
        for i in 0..d {
            if basis.len() == d {
                break;
            }
            let v = orthogonalize(DVector::from_fn(d, |k, _| if k == i { 1.0 } else { 0.0 }), &basis);
            let n = v.norm();
            if n > 1e-6 {
                basis.push(v / n);
            }
        }
        let cols = |r: std::ops::Range<usize>| -> DMatrix<f64> {
            if r.is_empty() {
                DMatrix::zeros(d, 0)
            } else {
                DMatrix::from_columns(&basis[r])
            }
        };
        Ok(Frames { tangent: cols(0..m), normal: cols(m..d) })
    }

    pub fn tube_point(&self, x: &ChainPoint, s: &DVector<f64>, eps: f64) -> Result<DVector<f64>> {
        let f = self.frames(x)?;
        if s.len() != f.normal.ncols() {
            return Err(ScattererError::Dimension(format!("direction has {} entries, normal space {}", s.len(), f.normal.ncols())));
        }
        Ok(self.embed(x)? + &f.normal * s * eps)
    }

    pub fn boundary_point(&self, x: &ChainPoint, s: &DVector<f64>, eps: f64) -> Result<BoundaryPoint> {
        Ok(BoundaryPoint { base: x.clone(), direction: s.clone(), eps, ambient: self.tube_point(x, s, eps)? })
    }

    /// Ambient displacement `q − ψ(x)`, minimum image on a torus.
    pub fn offset(&self, q: &DVector<f64>, x: &ChainPoint) -> Result<DVector<f64>> {
        Ok(self.space.min_image(&(q - self.embed(x)?)))
    }

    /// Nearest point of the scatterer. For chart components a Gauss–Newton
    /// iteration starts from `guess` when it lies on that component, else
    /// from the chart origin.
    pub fn nearest(&self, q: &DVector<f64>, guess: Option<&ChainPoint>) -> Result<Projection> {
        let mut best: Vec<Projection> = Vec::with_capacity(self.components.len());
        for (i, c) in self.components.iter().enumerate() {
            let base = match c {
                Component::Point(_) => ChainPoint::point(i),
                Component::Chart(ch) => {
                    let x0 = match guess {
                        Some(g) if g.component == i => g.coords.clone(),
                        _ => DVector::zeros(ch.chart_dim()),
                    };
                    ChainPoint::new(i, project_chart(ch.as_ref(), q, x0)?)
                }
            };
            let offset = self.offset(q, &base)?;
            best.push(Projection { base, distance: offset.norm(), offset, ambiguous: false });
        }
        best.sort_by(|a, b| a.distance.total_cmp(&b.distance));
        let mut it = best.into_iter();
        let mut first = it.next().ok_or(ScattererError::NoSuchComponent(0))?;
        if let Some(second) = it.next() {
            first.ambiguous = second.distance - first.distance <= 1e-12 * (1.0 + first.distance);
        }
        Ok(first)
    }
}

fn orthogonalize(mut v: DVector<f64>, basis: &[DVector<f64>]) -> DVector<f64> {
    // two passes for numerical orthogonality
    for _ in 0..2 {
        for b in basis {
            let c = b.dot(&v);
            v.axpy(-c, b, 1.0);
        }
    }
    v
}

fn project_chart(ch: &dyn Immersion, q: &DVector<f64>, mut x: DVector<f64>) -> Result<DVector<f64>> {
    for _ in 0..100 {
        let r = q - ch.point(&x);
        let j = ch.jacobian(&x);
        let g = j.transpose() * &r;
        if g.norm() <= 1e-13 * (1.0 + r.norm()) * (1.0 + j.norm()) {
            return Ok(x);
        }
        let dx = (j.transpose() * &j).lu().solve(&g).ok_or(ScattererError::Projection)?;
        x += dx;
    }
    Err(ScattererError::Projection)
}

fn default_tube_radius(space: &AmbientSpace, comps: &[Component]) -> f64 {
    let pts: Vec<&DVector<f64>> = comps
        .iter()
        .filter_map(|c| match c {
            Component::Point(a) => Some(a),
            _ => None,
        })
        .collect();
    let mut r = f64::INFINITY;
    for (i, a) in pts.iter().enumerate() {
        for b in &pts[i + 1..] {
            r = r.min(0.5 * space.distance(a, b));
        }
    }
    if let crate::dynamics::SpaceKind::FlatTorus { periods } = space.kind() {
        for l in periods {
            r = r.min(0.5 * l);
        }
    }
    r
}
