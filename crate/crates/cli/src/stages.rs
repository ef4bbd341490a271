//! Wiring from a scenario to the library and the individual pipeline stages.

use degbill::billiard::{
    lyapunov_estimate, replay_error, shadow_error, shadow_solve, shadow_window_hessian, BilliardDomain, ShadowChain, ShadowOptions,
};
use degbill::bvp::{BoxAction, FreeFlightAction, Symbol, TwoPointAction};
use degbill::dls::{
    admissible, certificate_curve, chain_action, green_decay, hessian, hyperbolicity_certificate, newton_chain, residual,
    window_chain, AdmissibilityOptions, Boundary, ChainConfiguration, Dls, DlsError, NewtonOptions, Site,
};
use degbill::dynamics::{AmbientSpace, ClassicalHamiltonian};
use degbill::kepler::{three_body_lagrangian, ArcType};
use degbill::linalg::{fd_gradient, rel_error, richardson_jacobian, BlockTridiagonal};
use degbill::scatterer::{ChainPoint, Diagonal, Scatterer};
use degbill::singular::{shadow_at, Coefficient, ShadowExperimentOptions, SingularError, SingularPerturbation};
use degbill::stats::{linear_fit, loglog_slope};
use degbill::symbolic::{build_graph, entropy, path_count, CollisionGraph, GraphOptions, Vertex};
use degbill::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::report::{Cell, StageOutput, Table};
use crate::scenario::{BackendSpec, BoundarySpec, Scenario, ScattererSpec, SpaceSpec};
use crate::CliError;

fn run_err(e: impl std::fmt::Display) -> CliError {
    CliError::Run(e.to_string())
}

pub enum Backend {
    Free(Dls<FreeFlightAction>),
    Box(Dls<BoxAction>),
}

macro_rules! with_dls {
    ($b:expr, $dl:ident => $body:expr) => {
        match $b {
            Backend::Free($dl) => $body,
            Backend::Box($dl) => $body,
        }
    };
}

pub struct System {
    pub scenario: Scenario,
    pub space: AmbientSpace,
    pub h: ClassicalHamiltonian,
    pub scatterer: Option<Scatterer>,
    pub backend: Option<Backend>,
    pub chain: Option<ChainConfiguration>,
    pub seed: u64,
}

fn dv(x: &[f64]) -> DVector<f64> {
    DVector::from_row_slice(x)
}

impl System {
    pub fn build(sc: &Scenario, seed: u64) -> Result<Self, CliError> {
        let space = match &sc.space {
            SpaceSpec::Euclidean { dim } => AmbientSpace::euclidean(*dim),
            SpaceSpec::Torus { periods } => AmbientSpace::torus(periods.clone()).map_err(run_err)?,
        };
        let d = space.dim();
        let h = match &sc.hamiltonian.masses {
            Some(m) => ClassicalHamiltonian::diagonal_mass(m).map_err(run_err)?,
            None => ClassicalHamiltonian::free(d),
        };
        let scatterer = match &sc.scatterer {
            Some(ScattererSpec::Points { points }) => {
                Some(Scatterer::point_set(space.clone(), points.iter().map(|p| dv(p)).collect()).map_err(run_err)?)
            }
            Some(ScattererSpec::Diagonal { body_dim }) => {
                Some(Scatterer::chart(space.clone(), Diagonal { body_dim: *body_dim }).map_err(run_err)?)
            }
            None => None,
        };
        let energy = sc.hamiltonian.energy;
        let backend = match (&sc.backend, &scatterer) {
            (Some(BackendSpec::FreeFlight), Some(s)) => Some(Backend::Free(
                Dls::new(FreeFlightAction::new(&h, space.clone(), energy).map_err(run_err)?, s.clone()).map_err(run_err)?,
            )),
            (Some(BackendSpec::Box { walls }), Some(s)) => {
                let w = walls.iter().map(|w| (w[0], w[1])).collect();
                Some(Backend::Box(Dls::new(BoxAction::new(&h, w, energy).map_err(run_err)?, s.clone()).map_err(run_err)?))
            }
            _ => None,
        };
        let chain = match &sc.chain {
            Some(c) => {
                let code = c.code.iter().map(|k| Symbol::new(k.clone())).collect();
                let points = c.points.iter().map(|p| ChainPoint::new(p.component, dv(&p.coords))).collect();
                let boundary = match c.boundary {
                    BoundarySpec::Periodic => Boundary::Periodic,
                    BoundarySpec::Fixed => Boundary::Fixed {
                        a: dv(c.a.as_deref().unwrap_or_default()),
                        b: dv(c.b.as_deref().unwrap_or_default()),
                    },
                };
                Some(ChainConfiguration::new(code, points, boundary).map_err(run_err)?)
            }
            None => None,
        };
        Ok(Self { scenario: sc.clone(), space, h, scatterer, backend, chain, seed })
    }

    fn newton_options(&self) -> NewtonOptions {
        let t = &self.scenario.tolerances;
        let d = NewtonOptions::default();
        NewtonOptions { tol: t.newton_tol.unwrap_or(d.tol), max_iterations: t.newton_max_iterations.unwrap_or(d.max_iterations), ..d }
    }

    fn shadow_options(&self) -> ShadowOptions {
        let t = &self.scenario.tolerances;
        let d = ShadowOptions::default();
        ShadowOptions {
            tol: t.shadow_tol.unwrap_or(d.tol),
            max_iterations: t.shadow_max_iterations.unwrap_or(d.max_iterations),
            fd_step: t.fd_step.unwrap_or(d.fd_step),
            grazing_tol: t.grazing_tol.unwrap_or(d.grazing_tol),
            ..d
        }
    }

    fn admissibility(&self) -> AdmissibilityOptions {
        let t = &self.scenario.tolerances;
        let d = AdmissibilityOptions::default();
        AdmissibilityOptions { jump_tol: t.jump_tol.unwrap_or(d.jump_tol), angle_tol: t.angle_tol.unwrap_or(d.angle_tol), ..d }
    }

    fn parts(&self) -> Result<(&Backend, &ChainConfiguration), CliError> {
        match (&self.backend, &self.chain) {
            (Some(b), Some(c)) => Ok((b, c)),
            _ => Err(CliError::Run("this stage needs a backend and a chain".into())),
        }
    }

    fn walls(&self) -> Option<Vec<(f64, f64)>> {
        match &self.scenario.backend {
            Some(BackendSpec::Box { walls }) => Some(walls.iter().map(|w| (w[0], w[1])).collect()),
            _ => None,
        }
    }

    fn solved<A: TwoPointAction>(&self, dl: &Dls<A>, c: &ChainConfiguration) -> Result<ChainConfiguration, CliError> {
        Ok(newton_chain(dl, c, &self.newton_options()).map_err(run_err)?.0)
    }
}

fn symbol_text(k: &Symbol) -> String {
    k.as_slice().iter().map(|x| x.to_string()).collect::<Vec<_>>().join(":")
}

/// Ends of each link as sites, in chain order.
fn link_sites(c: &ChainConfiguration) -> Vec<(Site, Site)> {
    let n = c.points.len();
    let site = |i: usize| Site::Chart(c.points[i].clone());
    match &c.boundary {
        Boundary::Fixed { a, b } => (0..=n)
            .map(|j| {
                let l = if j == 0 { Site::Ambient(a.clone()) } else { site(j - 1) };
                let r = if j == n { Site::Ambient(b.clone()) } else { site(j) };
                (l, r)
            })
            .collect(),
        Boundary::Periodic => (0..n).map(|j| (site(j), site((j + 1) % n))).collect(),
        Boundary::Window => (0..n - 1).map(|j| (site(j), site(j + 1))).collect(),
    }
}

/// Residual and Hessian against finite differences of the chain action.
fn variational_check<A: TwoPointAction>(dl: &Dls<A>, c: &ChainConfiguration) -> Result<Option<(f64, f64, f64)>, DlsError> {
    let x0 = c.free_coords();
    if x0.is_empty() {
        return Ok(None);
    }
    let f = |x: &DVector<f64>| chain_action(dl, &c.with_free_coords(x)).unwrap_or(f64::NAN);
    let g = fd_gradient(f, &x0, 1e-6);
    let r = BlockTridiagonal::join(&residual(dl, c)?);
    let grad_err = (&g - &r).amax() / r.amax().max(1e-8);
    let h = hessian(dl, c)?;
    let fdh = richardson_jacobian(
        |x| residual(dl, &c.with_free_coords(x)).map(|r| BlockTridiagonal::join(&r)).unwrap_or_else(|_| DVector::from_element(x.len(), f64::NAN)),
        &x0,
        1e-3,
    );
    Ok(Some((grad_err, rel_error(&h.to_dense(), &fdh, 1e-12), h.asymmetry())))
}

pub fn chain_solve(sys: &System) -> Result<StageOutput, CliError> {
    let (b, c) = sys.parts()?;
    with_dls!(b, dl => chain_solve_with(sys, dl, c))
}

fn chain_solve_with<A: TwoPointAction>(sys: &System, dl: &Dls<A>, c0: &ChainConfiguration) -> Result<StageOutput, CliError> {
    let mut out = StageOutput::new("chain_solve");
    let opts = sys.newton_options();
    let (c, rep) = newton_chain(dl, c0, &opts).map_err(run_err)?;
    out.set("iterations", rep.iterations);
    out.set("residual", rep.residual);
    out.set("smallest_singular_value", finite(rep.smallest_singular_value));
    out.set("action", chain_action(dl, &c).map_err(run_err)?);
    let adm = admissible(dl, &c, &sys.admissibility()).map_err(run_err)?;
    out.set("collisions", adm.len());
    out.set("admissible_collisions", adm.iter().filter(|r| r.admissible).count());
    if let Some((g, hh, asym)) = variational_check(dl, &c).map_err(run_err)? {
        out.set("gradient_rel_error", g);
        out.set("hessian_rel_error", hh);
        out.set("hessian_asymmetry", asym);
    }

    let m = c.points.iter().map(|p| p.coords.len()).max().unwrap_or(0);
    let mut header = vec!["point[index]".to_string(), "component[index]".to_string()];
    header.extend((0..m).map(|i| format!("x{i}[chart]")));
    header.extend(["jump[momentum]".to_string(), "admissible[bool]".to_string()]);
    let mut t = Table { file: "chain.csv".into(), header, rows: Vec::new() };
    for (i, p) in c.points.iter().enumerate() {
        let mut row = vec![Cell::Int(i as i64), Cell::Int(p.component as i64)];
        row.extend((0..m).map(|k| Cell::Num(p.coords.get(k).copied().unwrap_or(f64::NAN))));
        match adm.iter().find(|r| r.index == i) {
            Some(r) => row.extend([Cell::Num(r.jump), Cell::Bool(r.admissible)]),
            None => row.extend([Cell::Num(f64::NAN), Cell::Text("n/a".into())]),
        }
        t.push(row);
    }
    out.table(t);

    let box_walls = sys.walls().is_some();
    let mut links = Table::new("links.csv", &["link[index]", "symbol[code]", "action[action]", "reflections[count]"]);
    let mut odd = true;
    for (j, ((a, bb), k)) in link_sites(&c).into_iter().zip(&c.code).enumerate() {
        let value = chain_link_value(dl, k, &a, &bb)?;
        let reflections = if box_walls { BoxAction::wall_hits(k).iter().sum::<u64>() + 1 } else { 1 };
        odd &= reflections % 2 == 1;
        links.push(vec![Cell::Int(j as i64), Cell::Text(symbol_text(k)), Cell::Num(value), Cell::Int(reflections as i64)]);
    }
    if box_walls {
        out.set("odd_reflection_links", odd);
    }
    out.table(links);

    let starts = sys.scenario.sweep.random_starts;
    if starts > 0 && !c.free_coords().is_empty() {
        let radius = sys.scenario.tolerances.random_radius.unwrap_or(0.2);
        let mut rng = ChaCha8Rng::seed_from_u64(sys.seed);
        let x_ref = c.free_coords();
        let walls = sys.walls();
        let mut trials = Vec::with_capacity(starts);
        while trials.len() < starts {
            let x = x_ref.map(|v| v + rng.random_range(-radius..radius));
            let trial = c.with_free_coords(&x);
            let inside = trial.points.iter().all(|p| {
                let q = dl.ambient(&Site::Chart(p.clone())).ok();
                match (&walls, q) {
                    (Some(w), Some(q)) => q.iter().zip(w).all(|(v, (lo, hi))| v > lo && v < hi),
                    (None, Some(_)) => true,
                    (_, None) => false,
                }
            });
            if inside && chain_action(dl, &trial).is_ok() {
                trials.push(trial);
            }
        }
        let results: Vec<_> = trials.par_iter().map(|t| newton_chain(dl, t, &opts)).collect();
        let mut st = Table::new("starts.csv", &["start[index]", "converged[bool]", "iterations[count]", "residual[momentum]", "deviation[chart]"]);
        let mut all = true;
        for (i, r) in results.iter().enumerate() {
            let (conv, it, res, dev) = match r {
                Ok((cc, rr)) => {
                    let dev = (cc.free_coords() - &x_ref).amax();
                    (dev <= 1e-6, rr.iterations as i64, rr.residual, dev)
                }
                Err(_) => (false, -1, f64::NAN, f64::NAN),
            };
            all &= conv;
            st.push(vec![Cell::Int(i as i64), Cell::Bool(conv), Cell::Int(it), Cell::Num(res), Cell::Num(dev)]);
        }
        out.set("random_starts", starts);
        out.set("random_starts_converged", all);
        out.table(st);
        if let Some(expect) = sys.scenario.gates.random_starts_converge {
            out.gate("random_starts_converge", if all { 1.0 } else { 0.0 }, format!("{expect}"), all == expect);
        }
    }
    Ok(out)
}

fn chain_link_value<A: TwoPointAction>(dl: &Dls<A>, k: &Symbol, a: &Site, b: &Site) -> Result<f64, CliError> {
    let (qa, qb) = (dl.ambient(a).map_err(run_err)?, dl.ambient(b).map_err(run_err)?);
    Ok(dl.action.action(k, &qa, &qb).map_err(run_err)?.value)
}

fn finite(x: f64) -> serde_json::Value {
    if x.is_finite() {
        x.into()
    } else {
        serde_json::Value::String(format!("{x}"))
    }
}

pub fn chain_certify(sys: &System) -> Result<StageOutput, CliError> {
    let (b, c) = sys.parts()?;
    with_dls!(b, dl => chain_certify_with(sys, dl, c))
}

fn chain_certify_with<A: TwoPointAction>(sys: &System, dl: &Dls<A>, c0: &ChainConfiguration) -> Result<StageOutput, CliError> {
    let mut out = StageOutput::new("chain_certify");
    if c0.boundary != Boundary::Periodic {
        return Err(CliError::Run("certification needs a periodic chain".into()));
    }
    let c = sys.solved(dl, c0)?;
    let mut windows = sys.scenario.sweep.windows.clone();
    if windows.is_empty() {
        windows = vec![4, 8, 16];
    }
    let wmax = *windows.iter().max().unwrap_or(&8);
    let (cert, green) = if c.free_coords().is_empty() {
        let eps = sys.scenario.tolerances.certify_eps.or_else(|| sys.scenario.sweep.eps.first().copied()).unwrap_or(1e-3);
        let sc = shadow_solve(dl, &sys.h, &c, eps, &sys.shadow_options()).map_err(run_err)?;
        out.set("source", format!("shadow chain at eps = {eps:e}"));
        let wh = |w| shadow_window_hessian(dl, &sc, 0, w).map_err(|e| DlsError::Invalid(e.to_string()));
        let cert = certificate_curve(&windows, wh).map_err(run_err)?;
        let green = green_decay(&wh(wmax).map_err(run_err)?, wmax).map_err(run_err)?;
        (cert, green)
    } else {
        out.set("source", "chain");
        let cert = hyperbolicity_certificate(dl, &c, 0, &windows).map_err(run_err)?;
        let green = green_decay(&hessian(dl, &window_chain(&c, 0, wmax).map_err(run_err)?).map_err(run_err)?, wmax).map_err(run_err)?;
        (cert, green)
    };
    let mut t = Table::new("certificate.csv", &["W[points]", "C_W[inverse hessian]"]);
    for &(w, v) in &cert.curve {
        t.push(vec![Cell::Int(w as i64), Cell::Num(v)]);
    }
    out.table(t);
    let mut g = Table::new("green.csv", &["distance[links]", "norm[inverse hessian]"]);
    for &(d, v) in &green.profile {
        g.push(vec![Cell::Int(d as i64), Cell::Num(v)]);
    }
    out.table(g);
    let change = cert.relative_change().unwrap_or(f64::NAN);
    out.set("relative_change", finite(change));
    out.set("stabilized", cert.stabilized.is_some());
    out.set("green_lambda", green.lambda);
    out.set("green_r_squared", green.r_squared);
    if let Some(expect) = sys.scenario.gates.certificate_stabilizes {
        let got = cert.stabilized.is_some();
        out.gate("certificate_stabilizes", change, format!("stabilizes = {expect}"), got == expect);
    }
    Ok(out)
}

struct EpsRow {
    eps: f64,
    shadow: Result<(ShadowChain, f64, f64), String>,
    lyapunov: Option<Result<(Vec<f64>, f64), String>>,
}

pub fn billiard_shadow(sys: &System) -> Result<StageOutput, CliError> {
    let (b, c) = sys.parts()?;
    with_dls!(b, dl => billiard_shadow_with(sys, dl, c))
}

fn billiard_shadow_with<A: TwoPointAction>(sys: &System, dl: &Dls<A>, c0: &ChainConfiguration) -> Result<StageOutput, CliError> {
    let mut out = StageOutput::new("billiard_shadow");
    let c = sys.solved(dl, c0)?;
    let eps = &sys.scenario.sweep.eps;
    if eps.is_empty() {
        return Err(CliError::Run("billiard_shadow needs sweep.eps".into()));
    }
    let opts = sys.shadow_options();
    let walls = sys.walls();
    let scatterer = sys.scatterer.clone().ok_or_else(|| CliError::Run("no scatterer".into()))?;
    let want_lyap = sys.scenario.sweep.lyapunov;
    let rows: Vec<EpsRow> = eps
        .par_iter()
        .map(|&e| {
            let shadow = (|| {
                let sc = shadow_solve(dl, &sys.h, &c, e, &opts).map_err(|x| x.to_string())?;
                let err = shadow_error(dl, &c, &sc).map_err(|x| x.to_string())?;
                let dom = BilliardDomain::new(sys.h.clone(), scatterer.clone(), e, walls.clone()).map_err(|x| x.to_string())?;
                let replay = replay_error(&dom, &sc).map_err(|x| x.to_string())?;
                Ok((sc, err, replay))
            })();
            let lyapunov = match (&shadow, want_lyap) {
                (Ok((sc, _, _)), true) => Some((|| {
                    let dom = BilliardDomain::new(sys.h.clone(), scatterer.clone(), e, walls.clone()).map_err(|x| x.to_string())?;
                    let rep = lyapunov_estimate(&dom, sc).map_err(|x| x.to_string())?;
                    Ok((rep.exponents, rep.closure_error))
                })()),
                _ => None,
            };
            EpsRow { eps: e, shadow, lyapunov }
        })
        .collect();

    let mut t = Table::new(
        "shadow.csv",
        &["eps[length]", "converged[bool]", "sup_error[length]", "residual[momentum]", "iterations[count]", "replay_error[length]"],
    );
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    let mut all = true;
    for r in &rows {
        match &r.shadow {
            Ok((sc, err, replay)) => {
                xs.push(r.eps);
                ys.push(*err);
                t.push(vec![
                    Cell::Num(r.eps),
                    Cell::Bool(true),
                    Cell::Num(*err),
                    Cell::Num(sc.residual),
                    Cell::Int(sc.iterations as i64),
                    Cell::Num(*replay),
                ]);
            }
            Err(msg) => {
                all = false;
                out.set(&format!("failure_eps_{:e}", r.eps), msg.clone());
                t.push(vec![Cell::Num(r.eps), Cell::Bool(false), Cell::Num(f64::NAN), Cell::Num(f64::NAN), Cell::Int(-1), Cell::Num(f64::NAN)]);
            }
        }
    }
    out.table(t);
    out.set("all_converged", all);
    let slope = if xs.len() >= 2 { loglog_slope(&xs, &ys).map(|f| f.slope) } else { None };
    if let Some(s) = slope {
        out.set("error_slope", s);
    }
    if let Some([lo, hi]) = sys.scenario.gates.eps_slope {
        let s = slope.unwrap_or(f64::NAN);
        out.gate("eps_slope", s, format!("[{lo}, {hi}] with every ε converged"), all && s >= lo && s <= hi);
    }

    if want_lyap {
        let dim = rows.iter().find_map(|r| r.lyapunov.as_ref().and_then(|l| l.as_ref().ok()).map(|l| l.0.len())).unwrap_or(0);
        let mut header = vec!["eps[length]".to_string(), "ln_inv_eps[1]".to_string()];
        header.extend((0..dim).map(|i| format!("lambda{i}[1/period]")));
        header.extend(["large[count]".to_string(), "closure_error[phase]".to_string()]);
        let mut lt = Table { file: "lyapunov.csv".into(), header, rows: Vec::new() };
        let (mut lx, mut ly) = (Vec::new(), Vec::new());
        let mut codim_ok = true;
        let codim = codimension(sys);
        for r in &rows {
            let ln = (1.0 / r.eps).ln();
            match &r.lyapunov {
                Some(Ok((ex, closure))) => {
                    let large = ex.iter().filter(|l| l.abs() >= 0.5 * ln).count();
                    codim_ok &= large == codim;
                    lx.push(ln);
                    ly.push(ex[0]);
                    let mut row = vec![Cell::Num(r.eps), Cell::Num(ln)];
                    row.extend((0..dim).map(|i| Cell::Num(ex.get(i).copied().unwrap_or(f64::NAN))));
                    row.extend([Cell::Int(large as i64), Cell::Num(*closure)]);
                    lt.push(row);
                }
                _ => {
                    codim_ok = false;
                    let mut row = vec![Cell::Num(r.eps), Cell::Num(ln)];
                    row.extend((0..dim).map(|_| Cell::Num(f64::NAN)));
                    row.extend([Cell::Int(-1), Cell::Num(f64::NAN)]);
                    lt.push(row);
                }
            }
        }
        out.table(lt);
        let fit = linear_fit(&lx, &ly);
        if let Some(f) = &fit {
            out.set("lyapunov_slope", f.slope);
            out.set("lyapunov_r_squared", f.r_squared);
        }
        out.set("large_exponents_match_codimension", codim_ok);
        if let Some(r2) = sys.scenario.gates.lyapunov_r2 {
            let (slope, got) = fit.map(|f| (f.slope, f.r_squared)).unwrap_or((f64::NAN, f64::NAN));
            out.gate("lyapunov_r2", got, format!(">= {r2} with positive slope"), slope > 0.0 && got >= r2);
            out.gate("lyapunov_large_count", codim as f64, "large exponents = codim N", codim_ok);
        }
    }
    Ok(out)
}

fn codimension(sys: &System) -> usize {
    match &sys.scenario.scatterer {
        Some(ScattererSpec::Points { .. }) => sys.space.dim(),
        Some(ScattererSpec::Diagonal { body_dim }) => *body_dim,
        None => 0,
    }
}

pub fn ncenter_shadow(sys: &System) -> Result<StageOutput, CliError> {
    let mut out = StageOutput::new("ncenter_shadow");
    let spec = sys.scenario.ncenter.as_ref().ok_or_else(|| CliError::Run("no ncenter block".into()))?;
    if sys.space.is_torus() {
        return Err(CliError::Run("the n-center experiment runs in Euclidean space".into()));
    }
    let scatterer = sys.scatterer.clone().ok_or_else(|| CliError::Run("no scatterer".into()))?;
    let energy = sys.scenario.hamiltonian.energy;
    let dl = Dls::new(FreeFlightAction::new(&sys.h, sys.space.clone(), energy).map_err(run_err)?, scatterer.clone()).map_err(run_err)?;
    let template =
        SingularPerturbation::new(sys.h.clone(), scatterer, 0.0, Coefficient::Constant(spec.alphas.clone())).map_err(run_err)?;
    let n = spec.code.len();
    let c = ChainConfiguration::periodic(vec![Symbol::empty(); n], spec.code.iter().map(|&i| ChainPoint::point(i)).collect())
        .map_err(run_err)?;
    let t = &sys.scenario.tolerances;
    let d = ShadowExperimentOptions::default();
    let opts = ShadowExperimentOptions {
        tol: t.ncenter_tol.unwrap_or(d.tol),
        jump_tol: t.jump_tol.unwrap_or(d.jump_tol),
        angle_tol: t.angle_tol.unwrap_or(d.angle_tol),
        flow: degbill::singular::SingularFlowOptions {
            eta: t.ncenter_eta.unwrap_or(d.flow.eta),
            energy_tol: t.energy_tol.unwrap_or(d.flow.energy_tol),
            ..d.flow
        },
        ..d
    };
    degbill::singular::shadow_centers(&dl, &template, &c, &opts).map_err(run_err)?;
    let mus = &sys.scenario.sweep.mu;
    if mus.is_empty() {
        return Err(CliError::Run("ncenter_shadow needs sweep.mu".into()));
    }
    let rows: Vec<_> = mus.par_iter().map(|&mu| (mu, shadow_at(&dl, &template, &c, mu, &opts))).collect();
    let mut tab = Table::new(
        "ncenter.csv",
        &[
            "mu[1]",
            "sup_error[length]",
            "converged[bool]",
            "min_distance_to_N[length]",
            "iterations[count]",
            "residual[section]",
            "energy_drift[1]",
            "period[time]",
        ],
    );
    let (mut xs, mut ys, mut ds) = (Vec::new(), Vec::new(), Vec::new());
    let mut all = true;
    for (mu, r) in rows {
        match r {
            Ok(row) => {
                xs.push(mu);
                ys.push(row.sup_error);
                ds.push(row.min_distance / mu);
                tab.push(vec![
                    Cell::Num(mu),
                    Cell::Num(row.sup_error),
                    Cell::Bool(true),
                    Cell::Num(row.min_distance),
                    Cell::Int(row.iterations as i64),
                    Cell::Num(row.residual),
                    Cell::Num(row.energy_drift),
                    Cell::Num(row.period),
                ]);
            }
            Err(SingularError::Divergence { residual, iterations, .. }) => {
                all = false;
                tab.push(vec![
                    Cell::Num(mu),
                    Cell::Num(f64::NAN),
                    Cell::Bool(false),
                    Cell::Num(f64::NAN),
                    Cell::Int(iterations as i64),
                    Cell::Num(residual),
                    Cell::Num(f64::NAN),
                    Cell::Num(f64::NAN),
                ]);
            }
            Err(e) => return Err(run_err(e)),
        }
    }
    out.table(tab);
    out.set("all_converged", all);
    let slope = if xs.len() >= 2 { loglog_slope(&xs, &ys).map(|f| f.slope) } else { None };
    if let Some(s) = slope {
        out.set("error_slope", s);
    }
    let spread = ds.iter().cloned().fold(0.0, f64::max) / ds.iter().cloned().fold(f64::INFINITY, f64::min);
    out.set("min_distance_ratio_spread", finite(spread));
    if let Some(min) = sys.scenario.gates.mu_slope_min {
        let s = slope.unwrap_or(f64::NAN);
        out.gate("mu_slope", s, format!(">= {min} with every μ converged"), all && s >= min);
        out.gate("min_distance_scaling", spread, "max/min of d_min/μ <= 3", spread <= 3.0);
    }
    Ok(out)
}

pub fn kepler_table(sys: &System) -> Result<StageOutput, CliError> {
    let mut out = StageOutput::new("kepler_table");
    let k = sys.scenario.kepler.as_ref().ok_or_else(|| CliError::Run("no kepler block".into()))?;
    let ty = k.types.unwrap_or([0, 0]);
    let types = (ArcType::from_index(ty[0]).map_err(run_err)?, ArcType::from_index(ty[1]).map_err(run_err)?);
    let jobs: Vec<([i64; 2], [[f64; 2]; 2])> = k.k.iter().flat_map(|kk| k.z.iter().map(move |z| (*kk, *z))).collect();
    let results: Vec<_> = jobs
        .par_iter()
        .map(|(kk, z)| three_body_lagrangian((kk[0], kk[1]), types, &dv(&z[0]), &dv(&z[1]), k.alpha1, k.alpha2, k.energy))
        .collect();
    let mut t = Table::new(
        "kepler.csv",
        &[
            "k1[rev]", "k2[rev]", "xm1[length]", "xm2[length]", "xp1[length]", "xp2[length]", "h1[energy]", "h2[energy]", "L[action]",
            "time[time]", "status[text]",
        ],
    );
    let mut failures = 0;
    for ((kk, z), r) in jobs.iter().zip(results) {
        let mut row = vec![Cell::Int(kk[0]), Cell::Int(kk[1]), Cell::Num(z[0][0]), Cell::Num(z[0][1]), Cell::Num(z[1][0]), Cell::Num(z[1][1])];
        match r {
            Ok(l) => row.extend([Cell::Num(l.split.h1), Cell::Num(l.split.h2), Cell::Num(l.value), Cell::Num(l.time), Cell::Text("ok".into())]),
            Err(e) => {
                failures += 1;
                let msg = e.to_string().replace([',', '\n'], ";");
                row.extend([Cell::Num(f64::NAN), Cell::Num(f64::NAN), Cell::Num(f64::NAN), Cell::Num(f64::NAN), Cell::Text(msg)]);
            }
        }
        t.push(row);
    }
    out.table(t);
    out.set("rows", jobs.len());
    out.set("failures", failures);
    Ok(out)
}

fn centers_graph(sys: &System) -> Result<CollisionGraph, CliError> {
    let Some(ScattererSpec::Points { points }) = &sys.scenario.scatterer else {
        return Err(CliError::Run("from_centers needs a point scatterer".into()));
    };
    let mass: DMatrix<f64> = sys.h.mass().clone();
    let kinetic = sys.scenario.hamiltonian.energy - sys.h.potential_at(&DVector::zeros(sys.space.dim())).map_err(run_err)?;
    let mut vertices = Vec::new();
    for (i, a) in points.iter().enumerate() {
        for (j, b) in points.iter().enumerate() {
            if i == j {
                continue;
            }
            let d = sys.space.min_image(&(dv(b) - dv(a)));
            let v = &d * ((2.0 * kinetic).sqrt() / d.dot(&(&mass * &d)).sqrt());
            let p = &mass * &v;
            vertices.push(Vertex { label: format!("{i}>{j}"), from: i, to: j, p_minus: p.clone(), p_plus: p, v_minus: v.clone(), v_plus: v });
        }
    }
    let attracting = sys.scenario.ncenter.as_ref().is_some_and(|n| n.alphas.iter().any(|&a| a > 0.0));
    let t = &sys.scenario.tolerances;
    let d = GraphOptions::default();
    let opts = GraphOptions {
        jump_tol: t.jump_tol.unwrap_or(d.jump_tol),
        angle_tol: t.angle_tol.unwrap_or(d.angle_tol),
        no_straight_reflection: attracting,
    };
    Ok(build_graph(vertices, &opts))
}

pub fn graph_entropy(sys: &System) -> Result<StageOutput, CliError> {
    let mut out = StageOutput::new("graph_entropy");
    let spec = sys.scenario.graph.as_ref().ok_or_else(|| CliError::Run("no graph block".into()))?;
    let g = match &spec.adjacency {
        Some(adj) => CollisionGraph::from_adjacency(adj.clone()).map_err(run_err)?,
        None => centers_graph(sys)?,
    };
    let rep = entropy(&g).map_err(run_err)?;
    out.set("vertices", g.len());
    out.set("edges", g.edge_count());
    out.set("entropy", finite(rep.entropy));
    out.set("spectral_radius", rep.spectral_radius);
    out.set("reducible", rep.reducible);
    out.text.push(("graph.txt".into(), g.adjacency_text()));
    out.report.tables.push("graph.txt".into());
    let lengths = if spec.path_lengths.is_empty() { (1..=6).collect() } else { spec.path_lengths.clone() };
    let a = g.matrix();
    let mut t = Table::new("paths.csv", &["edges[count]", "paths[count]", "closed_paths[count]"]);
    let mut power = DMatrix::identity(g.len(), g.len());
    let mut done = 0;
    for &n in &lengths {
        while done < n {
            power = &power * &a;
            done += 1;
        }
        if done > n {
            power = DMatrix::identity(g.len(), g.len());
            for _ in 0..n {
                power = &power * &a;
            }
            done = n;
        }
        t.push(vec![Cell::Int(n as i64), Cell::Num(path_count(&g, n)), Cell::Num(power.trace())]);
    }
    out.table(t);
    if let Some(min) = sys.scenario.gates.min_entropy {
        out.gate("min_entropy", rep.entropy, format!(">= {min}"), rep.entropy >= min);
    }
    Ok(out)
}
