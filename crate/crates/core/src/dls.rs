//! Discrete Lagrangian systems on a scatterer.
//!
//! A link Lagrangian `L_k(x₋, x₊)` is the action of the collision orbit with
//! label `k` joining two scatterer points. Collision chains are critical
//! points of the chain action `Σ L_{k_j}(x_j, x_{j+1})`, whose Hessian is
//! block tridiagonal.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::bvp::{BvpError, Symbol, TwoPointAction};
use crate::linalg::{richardson_jacobian, BlockTridiagonal, LinalgError};
use crate::scatterer::{ChainPoint, Frames, Scatterer, ScattererError};
use crate::stats::{linear_fit, LineFit};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DlsError {
    #[error(transparent)]
    Bvp(#[from] BvpError),
    #[error(transparent)]
    Scatterer(#[from] ScattererError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("link {index}: {message}")]
    Link { index: usize, message: String },
    #[error("chain Newton did not converge: residual {residual:e} after {iterations} iterations")]
    Divergence { residual: f64, iterations: usize },
    #[error("Routh reduction is degenerate: ⟨B u, u⟩ = {value:e}")]
    RouthDegenerate { value: f64 },
    #[error("invalid chain: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, DlsError>;

/// One end of a link: a scatterer point in chart coordinates, or a fixed
/// ambient point.
#[derive(Debug, Clone, PartialEq)]
pub enum Site {
    Chart(ChainPoint),
    Ambient(DVector<f64>),
}

impl Site {
    pub fn coords(&self) -> DVector<f64> {
        match self {
            Site::Chart(p) => p.coords.clone(),
            Site::Ambient(_) => DVector::zeros(0),
        }
    }

    pub fn with_coords(&self, x: DVector<f64>) -> Site {
        match self {
            Site::Chart(p) => Site::Chart(ChainPoint::new(p.component, x)),
            Site::Ambient(q) => Site::Ambient(q.clone()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LinkJet {
    pub value: f64,
    pub grad_a: DVector<f64>,
    pub grad_b: DVector<f64>,
}

/// `ba[j][i] = ∂²L/∂x₊ⱼ∂x₋ᵢ`.
#[derive(Debug, Clone)]
pub struct LinkHessian {
    pub aa: DMatrix<f64>,
    pub bb: DMatrix<f64>,
    pub ba: DMatrix<f64>,
}

pub trait DiscreteLagrangian: Send + Sync {
    fn energy(&self) -> f64;
    fn link(&self, k: &Symbol, a: &Site, b: &Site) -> Result<LinkJet>;

    fn link_hessian(&self, k: &Symbol, a: &Site, b: &Site) -> Result<LinkHessian> {
        fd_link_hessian(self, k, a, b)
    }

    /// Ambient momenta `(p₋, p₊)` of the link orbit, when the backend has them.
    fn link_momenta(&self, _k: &Symbol, _a: &Site, _b: &Site) -> Result<Option<(DVector<f64>, DVector<f64>)>> {
        Ok(None)
    }

    /// Tangent and normal frames at a chart site.
    fn frames(&self, _s: &Site) -> Option<Frames> {
        None
    }
}

/// Link Hessian by Richardson-extrapolated differences of the chart gradients.
pub fn fd_link_hessian<D: DiscreteLagrangian + ?Sized>(dl: &D, k: &Symbol, a: &Site, b: &Site) -> Result<LinkHessian> {
    let (xa, xb) = (a.coords(), b.coords());
    let (ma, mb) = (xa.len(), xb.len());
    if ma + mb == 0 {
        return Ok(LinkHessian { aa: DMatrix::zeros(0, 0), bb: DMatrix::zeros(0, 0), ba: DMatrix::zeros(0, 0) });
    }
    let mut z = DVector::zeros(ma + mb);
    z.rows_mut(0, ma).copy_from(&xa);
    z.rows_mut(ma, mb).copy_from(&xb);
    let err = std::cell::Cell::new(None);
    let step = 1e-3 * (1.0 + z.amax());
    let jac = richardson_jacobian(
        |y| {
            let sa = a.with_coords(y.rows(0, ma).into_owned());
            let sb = b.with_coords(y.rows(ma, mb).into_owned());
            match dl.link(k, &sa, &sb) {
                Ok(j) => {
                    let mut g = DVector::zeros(ma + mb);
                    g.rows_mut(0, ma).copy_from(&j.grad_a);
                    g.rows_mut(ma, mb).copy_from(&j.grad_b);
                    g
                }
                Err(e) => {
                    err.set(Some(e));
                    DVector::from_element(ma + mb, f64::NAN)
                }
            }
        },
        &z,
        step,
    );
    if let Some(e) = err.take() {
        return Err(e);
    }
    let sym = |m: DMatrix<f64>| (&m + m.transpose()) * 0.5;
    Ok(LinkHessian {
        aa: sym(jac.view((0, 0), (ma, ma)).into_owned()),
        bb: sym(jac.view((ma, ma), (mb, mb)).into_owned()),
        ba: (jac.view((ma, 0), (mb, ma)) + jac.view((0, ma), (ma, mb)).transpose()) * 0.5,
    })
}

/// The DLS of a two-point action restricted to a scatterer.
pub struct Dls<A> {
    pub action: A,
    pub scatterer: Scatterer,
}

impl<A: TwoPointAction> Dls<A> {
    pub fn new(action: A, scatterer: Scatterer) -> Result<Self> {
        if action.ambient_dim() != scatterer.ambient_dim() {
            return Err(DlsError::Invalid("action and scatterer live in different dimensions".into()));
        }
        Ok(Self { action, scatterer })
    }

    pub fn ambient(&self, s: &Site) -> Result<DVector<f64>> {
        match s {
            Site::Chart(p) => Ok(self.scatterer.embed(p)?),
            Site::Ambient(q) => Ok(q.clone()),
        }
    }

    fn jacobian(&self, s: &Site) -> Result<DMatrix<f64>> {
        match s {
            Site::Chart(p) => Ok(self.scatterer.jacobian(p)?),
            Site::Ambient(_) => Ok(DMatrix::zeros(self.scatterer.ambient_dim(), 0)),
        }
    }
}

impl<A: TwoPointAction> DiscreteLagrangian for Dls<A> {
    fn energy(&self) -> f64 {
        self.action.energy()
    }

    fn link(&self, k: &Symbol, a: &Site, b: &Site) -> Result<LinkJet> {
        let jet = self.action.action(k, &self.ambient(a)?, &self.ambient(b)?)?;
        Ok(LinkJet {
            value: jet.value,
            grad_a: self.jacobian(a)?.transpose() * jet.grad_minus,
            grad_b: self.jacobian(b)?.transpose() * jet.grad_plus,
        })
    }

    fn link_hessian(&self, k: &Symbol, a: &Site, b: &Site) -> Result<LinkHessian> {
        if !self.scatterer.is_linear() {
            return fd_link_hessian(self, k, a, b);
        }
        let h = self.action.action_hessian(k, &self.ambient(a)?, &self.ambient(b)?)?;
        let (ja, jb) = (self.jacobian(a)?, self.jacobian(b)?);
        Ok(LinkHessian {
            aa: ja.transpose() * &h.mm * &ja,
            bb: jb.transpose() * &h.pp * &jb,
            ba: jb.transpose() * &h.pm * &ja,
        })
    }

    fn link_momenta(&self, k: &Symbol, a: &Site, b: &Site) -> Result<Option<(DVector<f64>, DVector<f64>)>> {
        let jet = self.action.action(k, &self.ambient(a)?, &self.ambient(b)?)?;
        Ok(Some((-jet.grad_minus, jet.grad_plus)))
    }

    fn frames(&self, s: &Site) -> Option<Frames> {
        match s {
            Site::Chart(p) => self.scatterer.frames(p).ok(),
            Site::Ambient(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Boundary {
    /// Chain from ambient point `a` to ambient point `b`; every listed point
    /// is free and there is one more link than points.
    Fixed { a: DVector<f64>, b: DVector<f64> },
    /// Closed chain; link `j` joins point `j` to point `j+1 mod n`.
    Periodic,
    /// Open chain whose first and last points are frozen.
    Window,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainConfiguration {
    pub code: Vec<Symbol>,
    pub points: Vec<ChainPoint>,
    pub boundary: Boundary,
}

#[derive(Debug, Clone)]
pub(crate) enum End {
    Free(usize),
    Frozen(Site),
}

pub(crate) struct Link {
    pub(crate) code: usize,
    pub(crate) left: End,
    pub(crate) right: End,
}

impl ChainConfiguration {
    pub fn new(code: Vec<Symbol>, points: Vec<ChainPoint>, boundary: Boundary) -> Result<Self> {
        let (n, m) = (points.len(), code.len());
        let ok = match &boundary {
            Boundary::Fixed { .. } => m == n + 1,
            Boundary::Periodic => n >= 1 && m == n,
            Boundary::Window => n >= 2 && m == n - 1,
        };
        if !ok {
            return Err(DlsError::Invalid(format!("{n} points and {m} symbols do not fit {boundary:?}")));
        }
        Ok(Self { code, points, boundary })
    }

    pub fn periodic(code: Vec<Symbol>, points: Vec<ChainPoint>) -> Result<Self> {
        Self::new(code, points, Boundary::Periodic)
    }

    pub fn fixed(code: Vec<Symbol>, points: Vec<ChainPoint>, a: DVector<f64>, b: DVector<f64>) -> Result<Self> {
        Self::new(code, points, Boundary::Fixed { a, b })
    }

    /// Indices into `points` of the free points, in order.
    pub fn free_indices(&self) -> std::ops::Range<usize> {
        match self.boundary {
            Boundary::Window => 1..self.points.len() - 1,
            _ => 0..self.points.len(),
        }
    }

    pub fn free_count(&self) -> usize {
        self.free_indices().len()
    }

    pub(crate) fn links(&self) -> Vec<Link> {
        let n = self.points.len();
        let site = |i: usize| End::Frozen(Site::Chart(self.points[i].clone()));
        match &self.boundary {
            Boundary::Fixed { a, b } => (0..=n)
                .map(|j| Link {
                    code: j,
                    left: if j == 0 { End::Frozen(Site::Ambient(a.clone())) } else { End::Free(j - 1) },
                    right: if j == n { End::Frozen(Site::Ambient(b.clone())) } else { End::Free(j) },
                })
                .collect(),
            Boundary::Periodic => (0..n).map(|j| Link { code: j, left: End::Free(j), right: End::Free((j + 1) % n) }).collect(),
            Boundary::Window => (0..n - 1)
                .map(|j| Link {
                    code: j,
                    left: if j == 0 { site(0) } else { End::Free(j - 1) },
                    right: if j + 1 == n - 1 { site(n - 1) } else { End::Free(j) },
                })
                .collect(),
        }
    }

    pub(crate) fn site(&self, e: &End) -> Site {
        match e {
            End::Free(i) => Site::Chart(self.points[self.free_indices().start + i].clone()),
            End::Frozen(s) => s.clone(),
        }
    }

    /// Flattened chart coordinates of the free points.
    pub fn free_coords(&self) -> DVector<f64> {
        let parts: Vec<DVector<f64>> = self.free_indices().map(|i| self.points[i].coords.clone()).collect();
        BlockTridiagonal::join(&parts)
    }

    pub fn with_free_coords(&self, flat: &DVector<f64>) -> ChainConfiguration {
        let mut c = self.clone();
        let mut off = 0;
        for i in self.free_indices() {
            let m = c.points[i].coords.len();
            c.points[i].coords = flat.rows(off, m).into_owned();
            off += m;
        }
        c
    }
}

fn link_err(index: usize) -> impl Fn(DlsError) -> DlsError {
    move |e| match e {
        DlsError::Link { .. } => e,
        other => DlsError::Link { index, message: other.to_string() },
    }
}

pub fn chain_action<D: DiscreteLagrangian + ?Sized>(dl: &D, c: &ChainConfiguration) -> Result<f64> {
    let mut total = 0.0;
    for l in c.links() {
        total += dl.link(&c.code[l.code], &c.site(&l.left), &c.site(&l.right)).map_err(link_err(l.code))?.value;
    }
    Ok(total)
}

/// `D_{x_j} A` for every free point.
pub fn residual<D: DiscreteLagrangian + ?Sized>(dl: &D, c: &ChainConfiguration) -> Result<Vec<DVector<f64>>> {
    let mut r: Vec<DVector<f64>> = c.free_indices().map(|i| DVector::zeros(c.points[i].coords.len())).collect();
    for l in c.links() {
        let jet = dl.link(&c.code[l.code], &c.site(&l.left), &c.site(&l.right)).map_err(link_err(l.code))?;
        if let End::Free(i) = l.left {
            r[i] += &jet.grad_a;
        }
        if let End::Free(j) = l.right {
            r[j] += &jet.grad_b;
        }
    }
    Ok(r)
}

pub fn residual_norm(r: &[DVector<f64>]) -> f64 {
    r.iter().map(|v| v.amax()).fold(0.0, f64::max)
}

pub fn hessian<D: DiscreteLagrangian + ?Sized>(dl: &D, c: &ChainConfiguration) -> Result<BlockTridiagonal> {
    let dims: Vec<usize> = c.free_indices().map(|i| c.points[i].coords.len()).collect();
    let n = dims.len();
    let cyclic = c.boundary == Boundary::Periodic;
    let mut diag: Vec<DMatrix<f64>> = dims.iter().map(|&m| DMatrix::zeros(m, m)).collect();
    let nlower = if cyclic { n } else { n.saturating_sub(1) };
    let mut lower: Vec<DMatrix<f64>> = (0..nlower).map(|i| DMatrix::zeros(dims[(i + 1) % n], dims[i])).collect();
    for l in c.links() {
        let h = dl.link_hessian(&c.code[l.code], &c.site(&l.left), &c.site(&l.right)).map_err(link_err(l.code))?;
        if let End::Free(i) = l.left {
            diag[i] += &h.aa;
        }
        if let End::Free(j) = l.right {
            diag[j] += &h.bb;
        }
        if let (End::Free(i), End::Free(j)) = (&l.left, &l.right) {
            if *j == (i + 1) % n.max(1) && *i < nlower {
                lower[*i] += &h.ba;
            } else {
                return Err(DlsError::Invalid(format!("link {} couples non-adjacent points", l.code)));
            }
        }
    }
    Ok(BlockTridiagonal::new(diag, lower, cyclic)?)
}

/// Tangent collision momenta `y_j = D_{x_j} L_{k_{j−1}}(x_{j−1}, x_j)` at the
/// free points that have an incoming link.
pub fn tangent_momenta<D: DiscreteLagrangian + ?Sized>(dl: &D, c: &ChainConfiguration) -> Result<Vec<DVector<f64>>> {
    let mut y = vec![None; c.free_count()];
    for l in c.links() {
        if let End::Free(j) = l.right {
            y[j] = Some(dl.link(&c.code[l.code], &c.site(&l.left), &c.site(&l.right))?.grad_b);
        }
    }
    Ok(y.into_iter().flatten().collect())
}

/// Noether values `⟨u, y_j⟩` for a generator `u` given in chart coordinates.
pub fn noether_values<D: DiscreteLagrangian + ?Sized>(dl: &D, c: &ChainConfiguration, u: &DVector<f64>) -> Result<Vec<f64>> {
    Ok(tangent_momenta(dl, c)?.iter().map(|y| y.dot(u)).collect())
}

#[derive(Debug, Clone, Copy)]
pub struct NewtonOptions {
    pub tol: f64,
    pub max_iterations: usize,
    pub max_halvings: usize,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        Self { tol: 1e-10, max_iterations: 100, max_halvings: 40 }
    }
}

#[derive(Debug, Clone)]
pub struct NewtonReport {
    pub iterations: usize,
    pub residual: f64,
    pub smallest_singular_value: f64,
}

/// Damped Newton on the chain residual.
pub fn newton_chain<D: DiscreteLagrangian + ?Sized>(
    dl: &D,
    c0: &ChainConfiguration,
    opts: &NewtonOptions,
) -> Result<(ChainConfiguration, NewtonReport)> {
    let mut c = c0.clone();
    if c.free_coords().is_empty() {
        return Ok((c, NewtonReport { iterations: 0, residual: 0.0, smallest_singular_value: f64::INFINITY }));
    }
    let mut r = residual(dl, &c)?;
    let mut norm = residual_norm(&r);
    let mut it = 0;
    while norm > opts.tol {
        if it >= opts.max_iterations {
            return Err(DlsError::Divergence { residual: norm, iterations: it });
        }
        it += 1;
        let h = hessian(dl, &c)?;
        let rhs: Vec<DVector<f64>> = r.iter().map(|v| -v).collect();
        let step = BlockTridiagonal::join(&h.solve(&rhs)?);
        let x = c.free_coords();
        let mut lambda = 1.0;
        let mut accepted = false;
        for _ in 0..=opts.max_halvings {
            let trial = c.with_free_coords(&(&x + &step * lambda));
            if let Ok(rt) = residual(dl, &trial) {
                let nt = residual_norm(&rt);
                if nt < norm {
                    c = trial;
                    r = rt;
                    norm = nt;
                    accepted = true;
                    break;
                }
            }
            lambda *= 0.5;
        }
        if !accepted {
            return Err(DlsError::Divergence { residual: norm, iterations: it });
        }
    }
    let sigma = hessian(dl, &c)?.smallest_singular_value();
    Ok((c, NewtonReport { iterations: it, residual: norm, smallest_singular_value: sigma }))
}

#[derive(Debug, Clone)]
pub struct CollisionReport {
    /// Index of the point in the chain.
    pub index: usize,
    pub jump: f64,
    /// Angle between `u⁺` and `−u⁻`.
    pub reversal_angle: f64,
    pub jump_ok: bool,
    pub straight_reflection: bool,
    pub admissible: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct AdmissibilityOptions {
    /// Relative to `√(2E)`.
    pub jump_tol: f64,
    pub angle_tol: f64,
    /// Check the straight-reflection condition (attracting singularities).
    pub attracting: bool,
}

impl Default for AdmissibilityOptions {
    fn default() -> Self {
        Self { jump_tol: 1e-6, angle_tol: 1e-6, attracting: false }
    }
}

/// Jump and straight-reflection checks at each collision that has both an
/// incoming and an outgoing link. Requires backend momenta.
pub fn admissible<D: DiscreteLagrangian + ?Sized>(
    dl: &D,
    c: &ChainConfiguration,
    opts: &AdmissibilityOptions,
) -> Result<Vec<CollisionReport>> {
    let n = c.free_count();
    let mut incoming: Vec<Option<DVector<f64>>> = vec![None; n];
    let mut outgoing: Vec<Option<DVector<f64>>> = vec![None; n];
    for l in c.links() {
        let (pm, pp) = dl
            .link_momenta(&c.code[l.code], &c.site(&l.left), &c.site(&l.right))?
            .ok_or_else(|| DlsError::Invalid("backend does not provide momenta".into()))?;
        if let End::Free(i) = l.left {
            outgoing[i] = Some(pm);
        }
        if let End::Free(j) = l.right {
            incoming[j] = Some(pp);
        }
    }
    let tol = opts.jump_tol * (2.0 * dl.energy().abs()).sqrt();
    let start = c.free_indices().start;
    let mut out = Vec::with_capacity(n);
    for j in 0..n {
        let (Some(pin), Some(pout)) = (&incoming[j], &outgoing[j]) else { continue };
        let jump = (pout - pin).norm();
        let cosang = (pout.dot(&(-pin)) / (pout.norm() * pin.norm())).clamp(-1.0, 1.0);
        let angle = cosang.acos();
        let jump_ok = jump >= tol;
        let straight = opts.attracting && angle < opts.angle_tol;
        out.push(CollisionReport {
            index: start + j,
            jump,
            reversal_angle: angle,
            jump_ok,
            straight_reflection: straight,
            admissible: jump_ok && !straight,
        });
    }
    Ok(out)
}

/// Central window of `2w + 1` free points around `center` of a periodic
/// chain, with frozen neighbours on both sides.
pub fn window_chain(c: &ChainConfiguration, center: usize, w: usize) -> Result<ChainConfiguration> {
    if c.boundary != Boundary::Periodic {
        return Err(DlsError::Invalid("windows are cut from periodic chains".into()));
    }
    let n = c.points.len() as i64;
    let idx = |j: i64| ((center as i64 + j).rem_euclid(n)) as usize;
    let r = w as i64 + 1;
    let points = (-r..=r).map(|j| c.points[idx(j)].clone()).collect();
    let code = (-r..r).map(|j| c.code[idx(j)].clone()).collect();
    ChainConfiguration::new(code, points, Boundary::Window)
}

#[derive(Debug, Clone)]
pub struct Certificate {
    /// `(W, C_W)` pairs.
    pub curve: Vec<(usize, f64)>,
    /// Last value when the final two entries agree within 5%.
    pub stabilized: Option<f64>,
}

impl Certificate {
    pub fn relative_change(&self) -> Option<f64> {
        let k = self.curve.len();
        (k >= 2).then(|| {
            let (a, b) = (self.curve[k - 2].1, self.curve[k - 1].1);
            (b - a).abs() / a.abs()
        })
    }
}

/// `C_W = ‖H_W⁻¹‖` in the block sup norm for each `W`.
pub fn certificate_curve<F>(windows: &[usize], mut window_hessian: F) -> Result<Certificate>
where
    F: FnMut(usize) -> Result<BlockTridiagonal>,
{
    let mut curve = Vec::with_capacity(windows.len());
    for &w in windows {
        let h = window_hessian(w)?;
        curve.push((w, h.inverse_sup_norm_bound()?));
    }
    let mut cert = Certificate { curve, stabilized: None };
    if cert.relative_change().is_some_and(|r| r <= 0.05) {
        cert.stabilized = cert.curve.last().map(|x| x.1);
    }
    Ok(cert)
}

pub fn hyperbolicity_certificate<D: DiscreteLagrangian + ?Sized>(
    dl: &D,
    c: &ChainConfiguration,
    center: usize,
    windows: &[usize],
) -> Result<Certificate> {
    certificate_curve(windows, |w| hessian(dl, &window_chain(c, center, w)?))
}

#[derive(Debug, Clone)]
pub struct GreenFit {
    /// `(|i − j|, ‖G_ij‖)` over the whole window.
    pub profile: Vec<(usize, f64)>,
    pub c: f64,
    pub lambda: f64,
    pub r_squared: f64,
}

/// Fit `‖G_ij‖ ≈ C e^{−λ|i−j|}` on the inner half of the window.
pub fn green_decay(h: &BlockTridiagonal, j: usize) -> Result<GreenFit> {
    let g = h.inverse_blocks()?;
    let n = h.blocks();
    let profile: Vec<(usize, f64)> = (0..n).map(|i| (i.abs_diff(j), crate::linalg::spectral_norm(&g[i][j]))).collect();
    let (lo, hi) = (n / 4, n - n / 4);
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for (i, &(dist, v)) in profile.iter().enumerate() {
        if i >= lo && i < hi && v > 0.0 {
            xs.push(dist as f64);
            ys.push(v.ln());
        }
    }
    let fit: LineFit = linear_fit(&xs, &ys).ok_or_else(|| DlsError::Invalid("too few points for a decay fit".into()))?;
    Ok(GreenFit { profile, c: fit.intercept.exp(), lambda: -fit.slope, r_squared: fit.r_squared })
}

pub fn chain_green_decay<D: DiscreteLagrangian + ?Sized>(dl: &D, c: &ChainConfiguration, center: usize, w: usize) -> Result<GreenFit> {
    let h = hessian(dl, &window_chain(c, center, w)?)?;
    green_decay(&h, w)
}

/// Reduction of a DLS invariant under chart translations `x ↦ x + θu`.
///
/// Reduced sites live on the cross-section `x_ref + span(Q)` with `Q` an
/// orthonormal basis of `u^⊥`; reduced coordinates have one entry fewer.
pub struct RouthReduced<D> {
    pub inner: D,
    pub generator: DVector<f64>,
    pub momentum: f64,
    pub reference: DVector<f64>,
    basis: DMatrix<f64>,
}

impl<D: DiscreteLagrangian> RouthReduced<D> {
    pub fn new(inner: D, generator: DVector<f64>, momentum: f64, reference: DVector<f64>) -> Result<Self> {
        let m = generator.len();
        let un = generator.norm();
        if un == 0.0 || reference.len() != m {
            return Err(DlsError::Invalid("generator must be nonzero and match the chart dimension".into()));
        }
        let u = &generator / un;
        let mut cols: Vec<DVector<f64>> = Vec::new();
        for i in 0..m {
            let mut e = DVector::from_fn(m, |r, _| if r == i { 1.0 } else { 0.0 });
            for b in std::iter::once(&u).chain(cols.iter()) {
                let c = b.dot(&e);
                e.axpy(-c, b, 1.0);
            }
            let n = e.norm();
            if n > 1e-8 && cols.len() + 1 < m {
                cols.push(e / n);
            }
        }
        let basis = if cols.is_empty() { DMatrix::zeros(m, 0) } else { DMatrix::from_columns(&cols) };
        Ok(Self { inner, generator, momentum, reference, basis })
    }

    pub fn lift(&self, s: &Site) -> Site {
        match s {
            Site::Chart(p) => Site::Chart(ChainPoint::new(p.component, &self.reference + &self.basis * &p.coords)),
            Site::Ambient(q) => Site::Ambient(q.clone()),
        }
    }

    fn shifted(&self, s: &Site, theta: f64) -> Site {
        match s {
            Site::Chart(p) => Site::Chart(ChainPoint::new(p.component, &p.coords + &self.generator * theta)),
            other => other.clone(),
        }
    }

    /// Critical `θ` of `L(x₋, Φ_θ x₊) − Gθ` for lifted sites, by damped
    /// Newton from `θ = 0`.
    pub fn theta_star(&self, k: &Symbol, a: &Site, b: &Site) -> Result<f64> {
        let (la, lb) = (self.lift(a), self.lift(b));
        let u = &self.generator;
        let slope = |theta: f64| -> Result<(f64, f64)> {
            let jet = self.inner.link(k, &la, &self.shifted(&lb, theta))?;
            Ok((jet.grad_b.dot(u) - self.momentum, jet.grad_b.amax()))
        };
        let mut theta = 0.0;
        let (mut g, mut scale) = slope(theta)?;
        for _ in 0..200 {
            if g.abs() <= 1e-13 * (1.0 + scale + self.momentum.abs()) {
                return Ok(theta);
            }
            let h = self.inner.link_hessian(k, &la, &self.shifted(&lb, theta))?;
            let curv = u.dot(&(&h.bb * u));
            let twist = u.dot(&(&h.ba * u));
            if twist.abs() <= 1e-12 * (1.0 + h.ba.amax()) || curv == 0.0 {
                return Err(DlsError::RouthDegenerate { value: twist });
            }
            let mut dt = -g / curv;
            loop {
                let (gt, st) = slope(theta + dt)?;
                if gt.abs() < g.abs() || dt.abs() <= 1e-15 * (1.0 + theta.abs()) {
                    theta += dt;
                    g = gt;
                    scale = st;
                    break;
                }
                dt *= 0.5;
            }
        }
        Err(DlsError::Divergence { residual: g.abs(), iterations: 200 })
    }
}

impl<D: DiscreteLagrangian> DiscreteLagrangian for RouthReduced<D> {
    fn energy(&self) -> f64 {
        self.inner.energy()
    }

    fn link(&self, k: &Symbol, a: &Site, b: &Site) -> Result<LinkJet> {
        let theta = self.theta_star(k, a, b)?;
        let jet = self.inner.link(k, &self.lift(a), &self.shifted(&self.lift(b), theta))?;
        let q = &self.basis;
        Ok(LinkJet {
            value: jet.value - self.momentum * theta,
            grad_a: if matches!(a, Site::Chart(_)) { q.transpose() * jet.grad_a } else { jet.grad_a },
            grad_b: if matches!(b, Site::Chart(_)) { q.transpose() * jet.grad_b } else { jet.grad_b },
        })
    }

    fn link_momenta(&self, k: &Symbol, a: &Site, b: &Site) -> Result<Option<(DVector<f64>, DVector<f64>)>> {
        let theta = self.theta_star(k, a, b)?;
        self.inner.link_momenta(k, &self.lift(a), &self.shifted(&self.lift(b), theta))
    }
}
