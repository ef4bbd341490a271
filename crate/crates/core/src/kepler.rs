//! Kepler arcs in the plane with the attracting center at the origin
//! (`W = −1/|x|`, unit mass), and the discrete Lagrangian of two small
//! bodies that collide after `k₁`, `k₂` revolutions.
//!
//! A simple arc of semimajor axis 1 between `x₋` and `x₊` is described by
//! Lagrange's angles `sin²(α/2) = s/2`, `sin²(β/2) = (s − c)/2`, where `s` is
//! the semi-perimeter of the triangle `0, x₋, x₊` and `c` its chord. The
//! short arc uses `(α, β)`, the long arc `(α, −β)`; its action is
//! `F(α) − F(β)` with `F(x) = x + sin x` and its time `G(α) − G(β)` with
//! `G(x) = x − sin x`.

use std::f64::consts::TAU;

use nalgebra::DVector;
use thiserror::Error;

use crate::bvp::Symbol;
use crate::dls::{self, DiscreteLagrangian, LinkJet, Site};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KeplerError {
    #[error("eccentricity {e} is not elliptic")]
    Hyperbolic { e: f64 },
    #[error("no arc of semimajor axis 1 joins the endpoints (semi-perimeter {s})")]
    Infeasible { s: f64 },
    #[error("degenerate geometry: {0}")]
    Degenerate(String),
    #[error("revolution count must be nonzero")]
    ZeroRevolutions,
    #[error("energy split minimum lies on the feasibility boundary at h₁ = {h1}")]
    BoundaryMinimum { h1: f64 },
    #[error("invalid input: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, KeplerError>;

/// Eccentric anomaly `E` with `E − e sin E = M`, `0 ≤ e < 1`.
pub fn solve_kepler(m: f64, e: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&e) {
        return Err(KeplerError::Hyperbolic { e });
    }
    // E − M = e sin E lies in [−e, e]
    let (mut lo, mut hi) = (m - e, m + e);
    let mut x = if e < 0.8 { m } else { m + e * m.sin().signum() };
    x = x.clamp(lo, hi);
    for _ in 0..100 {
        let f = x - e * x.sin() - m;
        if f == 0.0 {
            return Ok(x);
        }
        if f > 0.0 {
            hi = x;
        } else {
            lo = x;
        }
        let mut next = x - f / (1.0 - e * x.cos());
        if !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        if (next - x).abs() <= 1e-16 * (1.0 + x.abs()) {
            return Ok(next);
        }
        x = next;
    }
    Ok(x)
}

/// Hyperbolic anomaly `H` with `e sinh H − H = M`, `e > 1`.
pub fn solve_kepler_hyperbolic(m: f64, e: f64) -> Result<f64> {
    if !(e > 1.0) {
        return Err(KeplerError::Invalid(format!("eccentricity {e} is not hyperbolic")));
    }
    let mut x = (m / e).asinh();
    for _ in 0..200 {
        let f = e * x.sinh() - x - m;
        let next = x - f / (e * x.cosh() - 1.0);
        if (next - x).abs() <= 1e-15 * (1.0 + x.abs()) {
            return Ok(next);
        }
        x = next;
    }
    Ok(x)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArcType {
    Short,
    Long,
}

impl ArcType {
    pub fn from_index(i: i64) -> Result<Self> {
        match i {
            0 => Ok(ArcType::Short),
            1 => Ok(ArcType::Long),
            _ => Err(KeplerError::Invalid(format!("arc type index {i}"))),
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Lagrange {
    alpha: f64,
    /// Signed `β`: negative on the long arc.
    beta: f64,
    s: f64,
    c: f64,
    r1: f64,
    r2: f64,
}

fn lagrange(xm: &DVector<f64>, xp: &DVector<f64>, ty: ArcType) -> Result<Lagrange> {
    if xm.len() != 2 || xp.len() != 2 {
        return Err(KeplerError::Invalid("endpoints must be planar".into()));
    }
    let (r1, r2) = (xm.norm(), xp.norm());
    if r1 == 0.0 || r2 == 0.0 {
        return Err(KeplerError::Degenerate("endpoint at the attracting center".into()));
    }
    let c = (xp - xm).norm();
    let s = 0.5 * (r1 + r2 + c);
    if s > 2.0 * (1.0 + 1e-14) {
        return Err(KeplerError::Infeasible { s });
    }
    let alpha = 2.0 * (0.5 * s).sqrt().min(1.0).asin();
    let beta = 2.0 * (0.5 * (s - c)).max(0.0).sqrt().min(1.0).asin();
    let beta = match ty {
        ArcType::Short => beta,
        ArcType::Long => -beta,
    };
    Ok(Lagrange { alpha, beta, s, c, r1, r2 })
}

/// Action of the simple Kepler arc of semimajor axis 1 joining `x₋, x₊`.
pub fn arc_action_f(xm: &DVector<f64>, xp: &DVector<f64>, ty: ArcType) -> Result<f64> {
    let l = lagrange(xm, xp, ty)?;
    Ok((l.alpha + l.alpha.sin()) - (l.beta + l.beta.sin()))
}

/// Travel time along the same arc.
pub fn arc_time_f(xm: &DVector<f64>, xp: &DVector<f64>, ty: ArcType) -> Result<f64> {
    let l = lagrange(xm, xp, ty)?;
    Ok((l.alpha - l.alpha.sin()) - (l.beta - l.beta.sin()))
}

/// `(∂f/∂x₋, ∂f/∂x₊)`.
pub fn arc_action_f_gradient(xm: &DVector<f64>, xp: &DVector<f64>, ty: ArcType) -> Result<(DVector<f64>, DVector<f64>)> {
    let l = lagrange(xm, xp, ty)?;
    if l.c == 0.0 {
        return Err(KeplerError::Degenerate("coincident endpoints".into()));
    }
    let sc = l.s - l.c;
    if sc <= 0.0 {
        return Err(KeplerError::Degenerate("the center lies on the chord".into()));
    }
    let ca = ((2.0 - l.s).max(0.0) / l.s).sqrt();
    let cb = ((2.0 - sc).max(0.0) / sc).sqrt() * l.beta.signum();
    let u = (xm - xp) / l.c;
    let (e1, e2) = (xm / l.r1, xp / l.r2);
    let ds_m = (&e1 + &u) * 0.5;
    let dsc_m = (&e1 - &u) * 0.5;
    let ds_p = (&e2 - &u) * 0.5;
    let dsc_p = (&e2 + &u) * 0.5;
    Ok((ds_m * ca - dsc_m * cb, ds_p * ca - dsc_p * cb))
}

fn sgn(n: i64) -> f64 {
    if n < 0 {
        -1.0
    } else {
        1.0
    }
}

fn check_energy(h: f64) -> Result<f64> {
    if !(h < 0.0) {
        return Err(KeplerError::Invalid(format!("energy {h} is not elliptic")));
    }
    Ok(-2.0 * h)
}

/// Action of the arc with `|n|` extra revolutions at energy `h`; `n = 0` is
/// the simple arc.
pub fn arc_action(n: i64, h: f64, xm: &DVector<f64>, xp: &DVector<f64>, ty: ArcType) -> Result<f64> {
    let lam = check_energy(h)?;
    Ok(lam.powf(-0.5) * (TAU * n.unsigned_abs() as f64 + sgn(n) * arc_action_f(&(xm * lam), &(xp * lam), ty)?))
}

/// `J_n(h, z) = (−2h)^{−1/2} (2π|n| + sgn(n) f(−2h z))`.
pub fn j_n(n: i64, h: f64, xm: &DVector<f64>, xp: &DVector<f64>, ty: ArcType) -> Result<f64> {
    if n == 0 {
        return Err(KeplerError::ZeroRevolutions);
    }
    arc_action(n, h, xm, xp, ty)
}

/// Travel time `∂J_n/∂h` of the same arc.
pub fn arc_time(n: i64, h: f64, xm: &DVector<f64>, xp: &DVector<f64>, ty: ArcType) -> Result<f64> {
    let lam = check_energy(h)?;
    Ok(lam.powf(-1.5) * (TAU * n.unsigned_abs() as f64 + sgn(n) * arc_time_f(&(xm * lam), &(xp * lam), ty)?))
}

pub fn arc_action_gradient(n: i64, h: f64, xm: &DVector<f64>, xp: &DVector<f64>, ty: ArcType) -> Result<(DVector<f64>, DVector<f64>)> {
    let lam = check_energy(h)?;
    let (gm, gp) = arc_action_f_gradient(&(xm * lam), &(xp * lam), ty)?;
    let k = sgn(n) * lam.sqrt();
    Ok((gm * k, gp * k))
}

/// An arc with its reconstructed ellipse, in the orbit frame scaled to
/// semimajor axis 1.
#[derive(Debug, Clone)]
pub struct KeplerArc {
    pub x_minus: DVector<f64>,
    pub x_plus: DVector<f64>,
    pub energy: f64,
    pub revolutions: i64,
    pub arc_type: ArcType,
    pub eccentricity: f64,
    /// Eccentric anomalies at `x₋` and `x₊`, with `E₊ ≥ E₋`.
    pub anomalies: (f64, f64),
}

impl KeplerArc {
    pub fn new(xm: &DVector<f64>, xp: &DVector<f64>, energy: f64, revolutions: i64, arc_type: ArcType) -> Result<Self> {
        let lam = check_energy(energy)?;
        let l = lagrange(&(xm * lam), &(xp * lam), arc_type)?;
        let sigma = 0.5 * (l.alpha + l.beta);
        let d = 0.5 * (l.alpha - l.beta);
        let ec = sigma.cos();
        let es = if d.sin().abs() < 1e-12 { 0.0 } else { (l.r2 - l.r1) / (2.0 * d.sin()) };
        let e = ec.hypot(es);
        if e >= 1.0 {
            return Err(KeplerError::Hyperbolic { e });
        }
        let em = es.atan2(ec);
        let arc = Self {
            x_minus: xm.clone(),
            x_plus: xp.clone(),
            energy,
            revolutions,
            arc_type,
            eccentricity: e,
            anomalies: (em - d, em + d),
        };
        for an in [arc.anomalies.0, arc.anomalies.1] {
            let mean = an - e * an.sin();
            let back = solve_kepler(mean, e)?;
            if (back - an).abs() > 1e-12 * (1.0 + an.abs()) {
                return Err(KeplerError::Degenerate(format!("Kepler equation residual {:e}", back - an)));
            }
        }
        Ok(arc)
    }

    pub fn action(&self) -> Result<f64> {
        arc_action(self.revolutions, self.energy, &self.x_minus, &self.x_plus, self.arc_type)
    }

    pub fn time(&self) -> Result<f64> {
        arc_time(self.revolutions, self.energy, &self.x_minus, &self.x_plus, self.arc_type)
    }

    /// Point of the scaled orbit at eccentric anomaly `an`, orbit frame.
    pub fn orbit_point(&self, an: f64) -> DVector<f64> {
        let e = self.eccentricity;
        DVector::from_vec(vec![an.cos() - e, (1.0 - e * e).sqrt() * an.sin()])
    }

    /// `∫ √(2/|x| + 2h) |dx|` by composite Simpson along the ellipse.
    pub fn quadrature_action(&self, intervals: usize) -> f64 {
        let (e1, e2) = self.anomalies;
        let n = self.revolutions;
        let (a, b) = if n >= 0 { (e1, e2 + TAU * n as f64) } else { (e2, e1 + TAU * n.unsigned_abs() as f64) };
        let e = self.eccentricity;
        let integrand = |an: f64| {
            let x = self.orbit_point(an);
            let dx = DVector::from_vec(vec![-an.sin(), (1.0 - e * e).sqrt() * an.cos()]);
            (2.0 / x.norm() - 1.0).max(0.0).sqrt() * dx.norm()
        };
        let m = intervals.max(2) + intervals % 2;
        let step = (b - a) / m as f64;
        let mut sum = integrand(a) + integrand(b);
        for i in 1..m {
            sum += integrand(a + i as f64 * step) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        (-2.0 * self.energy).powf(-0.5) * sum * step / 3.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergySplit {
    pub alpha1: f64,
    pub alpha2: f64,
    pub h1: f64,
    pub h2: f64,
}

impl EnergySplit {
    pub fn new(alpha1: f64, alpha2: f64, energy: f64, h1: f64) -> Result<Self> {
        if !(alpha1 > 0.0 && alpha2 > 0.0 && (alpha1 + alpha2 - 1.0).abs() <= 1e-12) {
            return Err(KeplerError::Invalid("masses must be positive with α₁ + α₂ = 1".into()));
        }
        Ok(Self { alpha1, alpha2, h1, h2: (energy - alpha1 * h1) / alpha2 })
    }

    pub fn energy(&self) -> f64 {
        self.alpha1 * self.h1 + self.alpha2 * self.h2
    }
}

#[derive(Debug, Clone)]
pub struct ThreeBodyLink {
    pub value: f64,
    pub split: EnergySplit,
    /// Common travel time; also `dL/dE`.
    pub time: f64,
    pub grad_minus: DVector<f64>,
    pub grad_plus: DVector<f64>,
}

/// Feasible interval of `h₁` for a given split problem.
pub fn split_interval(xm: &DVector<f64>, xp: &DVector<f64>, alpha1: f64, alpha2: f64, energy: f64) -> Result<(f64, f64)> {
    let s = 0.5 * (xm.norm() + xp.norm() + (xp - xm).norm());
    let hmin = -1.0 / s;
    let lo = hmin.max(energy / alpha1);
    let hi = 0.0_f64.min((energy - alpha2 * hmin) / alpha1);
    if !(lo < hi) {
        return Err(KeplerError::Infeasible { s });
    }
    Ok((lo, hi))
}

/// `L_k(z) = min over α₁h₁ + α₂h₂ = E of α₁ J_{k₁}(h₁, z) + α₂ J_{k₂}(h₂, z)`.
pub fn three_body_lagrangian(
    k: (i64, i64),
    types: (ArcType, ArcType),
    xm: &DVector<f64>,
    xp: &DVector<f64>,
    alpha1: f64,
    alpha2: f64,
    energy: f64,
) -> Result<ThreeBodyLink> {
    if k.0 == 0 || k.1 == 0 {
        return Err(KeplerError::ZeroRevolutions);
    }
    EnergySplit::new(alpha1, alpha2, energy, 0.0)?;
    let (lo, hi) = split_interval(xm, xp, alpha1, alpha2, energy)?;
    let h2_of = |h1: f64| (energy - alpha1 * h1) / alpha2;
    let g = |h1: f64| -> f64 {
        let a = j_n(k.0, h1, xm, xp, types.0);
        let b = j_n(k.1, h2_of(h1), xm, xp, types.1);
        match (a, b) {
            (Ok(a), Ok(b)) => alpha1 * a + alpha2 * b,
            _ => f64::INFINITY,
        }
    };
    let width = hi - lo;
    let (mut a, mut b) = (lo, hi - 1e-12 * width);
    let r = 0.5 * (5f64.sqrt() - 1.0);
    let (mut c, mut d) = (b - r * (b - a), a + r * (b - a));
    let (mut gc, mut gd) = (g(c), g(d));
    while b - a > 1e-7 * width {
        if gc <= gd {
            b = d;
            d = c;
            gd = gc;
            c = b - r * (b - a);
            gc = g(c);
        } else {
            a = c;
            c = d;
            gc = gd;
            d = a + r * (b - a);
            gd = g(d);
        }
    }
    // stationarity is equality of the two travel times
    let phi = |h1: f64| -> Result<f64> { Ok(arc_time(k.0, h1, xm, xp, types.0)? - arc_time(k.1, h2_of(h1), xm, xp, types.1)?) };
    let mut h1 = 0.5 * (a + b);
    for _ in 0..50 {
        let f = phi(h1)?;
        let dh = 1e-7 * width;
        let df = (phi((h1 + dh).min(hi - 1e-15 * width))? - phi((h1 - dh).max(lo))?) / (2.0 * dh);
        let step = f / df;
        let next = (h1 - step).clamp(lo, hi - 1e-12 * width);
        let done = (next - h1).abs() <= 1e-11 * (1.0 + h1.abs());
        h1 = next;
        if done {
            break;
        }
    }
    if h1 - lo <= 1e-9 * width || hi - h1 <= 1e-9 * width {
        return Err(KeplerError::BoundaryMinimum { h1 });
    }
    let split = EnergySplit::new(alpha1, alpha2, energy, h1)?;
    let value = alpha1 * j_n(k.0, split.h1, xm, xp, types.0)? + alpha2 * j_n(k.1, split.h2, xm, xp, types.1)?;
    let (g1m, g1p) = arc_action_gradient(k.0, split.h1, xm, xp, types.0)?;
    let (g2m, g2p) = arc_action_gradient(k.1, split.h2, xm, xp, types.1)?;
    Ok(ThreeBodyLink {
        value,
        split,
        time: arc_time(k.0, split.h1, xm, xp, types.0)?,
        grad_minus: g1m * alpha1 + g2m * alpha2,
        grad_plus: g1p * alpha1 + g2p * alpha2,
    })
}

#[derive(Debug, Clone)]
pub struct Commensurability {
    pub periods: (f64, f64),
    /// `(n₁, n₂)` with `0 < nᵢ < |kᵢ|` and `|n₁T₁ − n₂T₂| ≤ tol`.
    pub hits: Vec<(i64, i64)>,
    pub early_collision_risk: bool,
}

pub fn kepler_period(h: f64) -> f64 {
    TAU * (-2.0 * h).powf(-1.5)
}

/// Scan for intermediate times at which both bodies are back at their
/// starting configuration. The tolerance defaults to `10⁻³ min(T₁, T₂)`.
pub fn commensurability_check(k: (i64, i64), h1: f64, h2: f64, tol: Option<f64>) -> Commensurability {
    let (t1, t2) = (kepler_period(h1), kepler_period(h2));
    let tol = tol.unwrap_or(1e-3 * t1.min(t2));
    let mut hits = Vec::new();
    for n1 in 1..k.0.abs() {
        for n2 in 1..k.1.abs() {
            if (n1 as f64 * t1 - n2 as f64 * t2).abs() <= tol {
                hits.push((n1, n2));
            }
        }
    }
    Commensurability { periods: (t1, t2), early_collision_risk: !hits.is_empty(), hits }
}

/// The 3-body discrete Lagrangian on the collision set, in the coordinates
/// of the common collision point. Symbols are `(k₁, k₂)` with short arcs, or
/// `(k₁, k₂, t₁, t₂)` with arc types `0` (short) and `1` (long).
#[derive(Debug, Clone, Copy)]
pub struct KeplerPair {
    pub alpha1: f64,
    pub alpha2: f64,
    pub energy: f64,
}

impl KeplerPair {
    pub fn link_data(&self, k: &Symbol, a: &DVector<f64>, b: &DVector<f64>) -> Result<ThreeBodyLink> {
        let s = k.as_slice();
        let (types, ks) = match s.len() {
            2 => ((ArcType::Short, ArcType::Short), (s[0], s[1])),
            4 => ((ArcType::from_index(s[2])?, ArcType::from_index(s[3])?), (s[0], s[1])),
            _ => return Err(KeplerError::Invalid(format!("symbol {k} needs 2 or 4 entries"))),
        };
        three_body_lagrangian(ks, types, a, b, self.alpha1, self.alpha2, self.energy)
    }
}

impl DiscreteLagrangian for KeplerPair {
    fn energy(&self) -> f64 {
        self.energy
    }

    fn link(&self, k: &Symbol, a: &Site, b: &Site) -> dls::Result<LinkJet> {
        let l = self.link_data(k, &a.coords(), &b.coords()).map_err(|e| dls::DlsError::Invalid(e.to_string()))?;
        Ok(LinkJet { value: l.value, grad_a: l.grad_minus, grad_b: l.grad_plus })
    }

    fn link_momenta(&self, k: &Symbol, a: &Site, b: &Site) -> dls::Result<Option<(DVector<f64>, DVector<f64>)>> {
        let j = self.link(k, a, b)?;
        Ok(Some((-j.grad_a, j.grad_b)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::fd_gradient;
    use std::f64::consts::PI;

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(x)
    }

    fn polar(r: f64, th: f64) -> DVector<f64> {
        v(&[r * th.cos(), r * th.sin()])
    }

    #[test]
    fn kepler_equation() {
        assert_eq!(solve_kepler(0.0, 0.7).unwrap(), 0.0);
        assert_eq!(solve_kepler(1.3, 0.0).unwrap(), 1.3);
        let e = solve_kepler(PI / 2.0, 0.5).unwrap();
        assert!((e - 0.5 * e.sin() - PI / 2.0).abs() <= 1e-13);
        // bisection oracle
        let (mut lo, mut hi) = (0.0, PI);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid - 0.5 * mid.sin() < PI / 2.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        assert!((e - lo).abs() < 1e-13);
        for &(m, ecc) in &[(-3.0, 0.99), (10.0, 0.3), (0.01, 0.999)] {
            let x = solve_kepler(m, ecc).unwrap();
            assert!((x - ecc * x.sin() - m).abs() <= 1e-13 * (1.0 + m.abs()));
            assert!((x - m).abs() <= PI);
        }
        assert!(matches!(solve_kepler(1.0, 1.2), Err(KeplerError::Hyperbolic { .. })));
        let hh = solve_kepler_hyperbolic(2.0, 1.5).unwrap();
        assert!((1.5 * hh.sinh() - hh - 2.0).abs() < 1e-12);
    }

    #[test]
    fn simple_arc_action() {
        let x = polar(0.7, 0.4);
        assert_eq!(arc_action_f(&x, &x, ArcType::Short).unwrap(), 0.0);
        // half of a circular orbit of radius 1 has action π
        let (a, b) = (polar(1.0, 0.0), polar(1.0, PI));
        assert!((arc_action_f(&a, &b, ArcType::Short).unwrap() - PI).abs() < 1e-12);
        for ty in [ArcType::Short, ArcType::Long] {
            let (xm, xp) = (polar(0.6, 0.3), polar(1.1, 1.9));
            let f = arc_action_f(&xm, &xp, ty).unwrap();
            assert_eq!(f, arc_action_f(&xp, &xm, ty).unwrap());
            let arc = KeplerArc::new(&xm, &xp, -0.5, 0, ty).unwrap();
            assert!((arc.quadrature_action(4000) - f).abs() < 1e-8);
            let e = arc.eccentricity;
            let (p1, p2) = (arc.orbit_point(arc.anomalies.0), arc.orbit_point(arc.anomalies.1));
            assert!((p1.norm() - 0.6).abs() < 1e-12 && (p2.norm() - 1.1).abs() < 1e-12, "e = {e}");
            assert!(((p2 - p1).norm() - (xp.clone() - xm.clone()).norm()).abs() < 1e-12);
            let (gm, gp) = arc_action_f_gradient(&xm, &xp, ty).unwrap();
            let fdm = fd_gradient(|y| arc_action_f(y, &xp, ty).unwrap(), &xm, 1e-6);
            let fdp = fd_gradient(|y| arc_action_f(&xm, y, ty).unwrap(), &xp, 1e-6);
            assert!((gm - fdm).norm() < 1e-8 && (gp - fdp).norm() < 1e-8);
        }
        assert!(matches!(arc_action_f(&polar(1.5, 0.0), &polar(1.5, 2.0), ArcType::Short), Err(KeplerError::Infeasible { .. })));
    }

    #[test]
    fn revolutions() {
        let x = polar(1.0, 0.2);
        assert!((arc_action(1, -0.5, &x, &x, ArcType::Short).unwrap() - TAU).abs() < 1e-12);
        assert!((j_n(2, -0.5, &x, &x, ArcType::Short).unwrap() - 2.0 * TAU).abs() < 1e-12);
        assert_eq!(j_n(0, -0.5, &x, &x, ArcType::Short), Err(KeplerError::ZeroRevolutions));
        let (xm, xp) = (polar(0.5, 0.1), polar(0.8, 1.4));
        let h = -0.8;
        let lam = -2.0 * h;
        let f = arc_action_f(&(&xm * lam), &(&xp * lam), ArcType::Short).unwrap();
        let jp = j_n(3, h, &xm, &xp, ArcType::Short).unwrap();
        let jm = j_n(-3, h, &xm, &xp, ArcType::Short).unwrap();
        assert!(((jp - jm) * lam.sqrt() - 2.0 * f).abs() < 1e-12);
        assert!(((jp + jm) * lam.sqrt() - 6.0 * TAU).abs() < 1e-12);
        assert!(j_n(4, h, &xm, &xp, ArcType::Short).unwrap() > jp);
        let t = arc_time(3, h, &xm, &xp, ArcType::Short).unwrap();
        let dj = (j_n(3, h + 1e-6, &xm, &xp, ArcType::Short).unwrap() - j_n(3, h - 1e-6, &xm, &xp, ArcType::Short).unwrap()) / 2e-6;
        assert!((dj - t).abs() < 1e-6 * t);
    }

    #[test]
    fn symmetric_split_is_equal_energies() {
        let (xm, xp) = (polar(0.5, 0.0), polar(0.5, 1.0));
        let l = three_body_lagrangian((2, 2), (ArcType::Short, ArcType::Short), &xm, &xp, 0.5, 0.5, -0.6).unwrap();
        assert!((l.split.h1 + 0.6).abs() < 1e-9 && (l.split.h2 + 0.6).abs() < 1e-9);
        assert!((l.split.energy() + 0.6).abs() < 1e-12);
    }

    #[test]
    fn split_minimum_and_envelope() {
        let (xm, xp) = (polar(0.4, 0.2), polar(0.7, 1.3));
        let (a1, a2, e) = (0.3, 0.7, -0.9);
        let k = (2, 3);
        let ty = (ArcType::Short, ArcType::Short);
        let l = three_body_lagrangian(k, ty, &xm, &xp, a1, a2, e).unwrap();
        let t1 = arc_time(k.0, l.split.h1, &xm, &xp, ty.0).unwrap();
        let t2 = arc_time(k.1, l.split.h2, &xm, &xp, ty.1).unwrap();
        assert!((t1 - t2).abs() <= 1e-9 * t1);
        let de = 1e-5;
        let lp = three_body_lagrangian(k, ty, &xm, &xp, a1, a2, e + de).unwrap().value;
        let lm = three_body_lagrangian(k, ty, &xm, &xp, a1, a2, e - de).unwrap().value;
        assert!(((lp - lm) / (2.0 * de) - l.time).abs() < 1e-6 * l.time);
        let gm = fd_gradient(|y| three_body_lagrangian(k, ty, y, &xp, a1, a2, e).unwrap().value, &xm, 1e-6);
        assert!((gm - &l.grad_minus).norm() < 1e-6);
    }

    #[test]
    fn commensurability() {
        let c = commensurability_check((2, 2), -0.5, -0.5, None);
        assert_eq!(c.hits, vec![(1, 1)]);
        assert!(commensurability_check((1, 1), -0.5, -0.7, None).hits.is_empty());
        // T₁/T₂ = √2
        let h2 = -0.5;
        let h1 = h2 * 2f64.powf(-1.0 / 3.0);
        let c = commensurability_check((3, 3), h1, h2, None);
        assert!((c.periods.0 / c.periods.1 - 2f64.sqrt()).abs() < 1e-12);
        assert!(!c.early_collision_risk);
    }
}
