//! End-to-end acceptance run. Each criterion prints one PASS/FAIL line to
//! stdout (uncaptured) and the test fails if any criterion fails.

use std::io::Write as _;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use degbill::billiard::{
    generating_eps, lyapunov_estimate, reflect, replay_error, shadow_error, shadow_solve, shadow_window_hessian, BilliardDomain,
    BilliardError, ShadowOptions,
};
use degbill::bvp::{BoxAction, FreeFlightAction, Symbol, TwoPointAction};
use degbill::dls::{
    certificate_curve, chain_action, green_decay, hessian, hyperbolicity_certificate, newton_chain, residual, residual_norm,
    window_chain, Boundary, ChainConfiguration, Dls, DlsError, NewtonOptions,
};
use degbill::dynamics::{AmbientSpace, ClassicalHamiltonian, Magnetic};
use degbill::kepler::{arc_time, j_n, three_body_lagrangian, ArcType};
use degbill::linalg::{fd_gradient, rel_error, richardson_jacobian, BlockTridiagonal};
use degbill::scatterer::{ChainPoint, Diagonal, Scatterer};
use degbill::singular::{shadow_experiment, Coefficient, ShadowExperimentOptions, SingularPerturbation};
use degbill::stats::{linear_fit, loglog_slope};
use degbill::symbolic::{build_graph, entropy, path_count, paths, CollisionGraph, GraphOptions, PathBudget, Vertex};
use degbill::{DMatrix, DVector};
use degbill_cli::scenario::Scenario;
use degbill_cli::stages::{Backend, System};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)*) => {
        if !$cond {
            return Err(format!($($msg)*));
        }
    };
}

fn e<T: std::fmt::Display>(x: T) -> String {
    x.to_string()
}

fn v(x: &[f64]) -> DVector<f64> {
    DVector::from_row_slice(x)
}

fn sym(x: &[i64]) -> Symbol {
    Symbol::new(x.to_vec())
}

fn pt(x: f64) -> ChainPoint {
    ChainPoint::new(0, v(&[x]))
}

fn torus_point() -> (Dls<FreeFlightAction>, ClassicalHamiltonian) {
    let h = ClassicalHamiltonian::free(2);
    let space = AmbientSpace::torus(vec![1.0, 1.0]).unwrap();
    let sc = Scatterer::point_set(space.clone(), vec![v(&[0.0, 0.0])]).unwrap();
    (Dls::new(FreeFlightAction::new(&h, space, 0.5).unwrap(), sc).unwrap(), h)
}

fn alternating() -> ChainConfiguration {
    ChainConfiguration::periodic(vec![sym(&[1, 0]), sym(&[0, 1])], vec![ChainPoint::point(0), ChainPoint::point(0)]).unwrap()
}

fn sweep_eps() -> [f64; 4] {
    [1e-2, 10f64.powf(-2.5), 1e-3, 10f64.powf(-3.5)]
}

// 1. Exact torus actions.
fn exact_torus_action() -> Outcome {
    let (dl, _) = torus_point();
    let o = v(&[0.0, 0.0]);
    let value = dl.action.action(&sym(&[3, 4]), &o, &o).map_err(e)?.value;
    // Jacobi length √(2E)·|k| with E = 1/2
    let err = (value - 5.0).abs();
    ensure!(err <= 1e-9, "action {value}, error {err:e}");
    Ok(format!("action {value:.15}, error {err:.1e}"))
}

// 2. Variational consistency on shipped scenarios.
fn scenario_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

struct Consistency {
    grad: f64,
    hess: f64,
    asym: f64,
    band: f64,
}

fn chain_consistency<A: TwoPointAction>(dl: &Dls<A>, c: &ChainConfiguration) -> Result<Consistency, String> {
    let x0 = c.free_coords();
    let f = |x: &DVector<f64>| chain_action(dl, &c.with_free_coords(x)).unwrap();
    let g = fd_gradient(f, &x0, 1e-6);
    let r = BlockTridiagonal::join(&residual(dl, c).map_err(e)?);
    let grad = (&g - &r).amax() / r.amax().max(1e-3);
    let h = hessian(dl, c).map_err(e)?;
    let res = |x: &DVector<f64>| BlockTridiagonal::join(&residual(dl, &c.with_free_coords(x)).unwrap());
    let fdh = richardson_jacobian(res, &x0, 1e-3);
    let hess = rel_error(&h.to_dense(), &fdh, 1e-12);
    // entries of the differenced Hessian outside the (cyclic) block band
    let dims = h.block_dims();
    let starts: Vec<usize> = dims.iter().scan(0, |s, d| {
        let a = *s;
        *s += d;
        Some(a)
    })
    .collect();
    let n = dims.len();
    let mut band = 0.0_f64;
    for i in 0..n {
        for j in 0..n {
            let near = i.abs_diff(j) <= 1 || (c.boundary == Boundary::Periodic && i.abs_diff(j) == n - 1);
            if near {
                continue;
            }
            let blk = fdh.view((starts[i], starts[j]), (dims[i], dims[j]));
            band = band.max(blk.amax());
        }
    }
    Ok(Consistency { grad, hess, asym: h.asymmetry(), band: band / fdh.amax().max(1e-12) })
}

/// Link jets and action Hessians against differences of the link action.
fn link_consistency(act: &dyn TwoPointAction, k: &Symbol, qa: &DVector<f64>, qb: &DVector<f64>) -> Result<(f64, f64), String> {
    let jet = act.action(k, qa, qb).map_err(e)?;
    let gm = fd_gradient(|y| act.action(k, y, qb).unwrap().value, qa, 1e-6);
    let gp = fd_gradient(|y| act.action(k, qa, y).unwrap().value, qb, 1e-6);
    let scale = jet.grad_minus.amax().max(jet.grad_plus.amax());
    let grad = (&gm - &jet.grad_minus).amax().max((&gp - &jet.grad_plus).amax()) / scale;
    let hh = act.action_hessian(k, qa, qb).map_err(e)?;
    let d = qa.len();
    let both = |z: &DVector<f64>| {
        let j = act.action(k, &z.rows(0, d).into_owned(), &z.rows(d, d).into_owned()).unwrap();
        let mut out = DVector::zeros(2 * d);
        out.rows_mut(0, d).copy_from(&j.grad_minus);
        out.rows_mut(d, d).copy_from(&j.grad_plus);
        out
    };
    let mut z = DVector::zeros(2 * d);
    z.rows_mut(0, d).copy_from(qa);
    z.rows_mut(d, d).copy_from(qb);
    let fd = richardson_jacobian(both, &z, 1e-3);
    let mut an = DMatrix::zeros(2 * d, 2 * d);
    an.view_mut((0, 0), (d, d)).copy_from(&hh.mm);
    an.view_mut((d, d), (d, d)).copy_from(&hh.pp);
    an.view_mut((d, 0), (d, d)).copy_from(&hh.pm);
    an.view_mut((0, d), (d, d)).copy_from(&hh.pm.transpose());
    Ok((grad, rel_error(&an, &fd, 1e-12)))
}

fn dls_scenario<A: TwoPointAction>(dl: &Dls<A>, c0: &ChainConfiguration, worst: &mut [f64; 4], notes: &mut Vec<String>) -> Result<(), String> {
    let (c, _) = newton_chain(dl, c0, &NewtonOptions::default()).map_err(e)?;
    let mut chains = vec![c.clone()];
    if c.boundary == Boundary::Periodic {
        chains.push(window_chain(&c, 0, 3).map_err(e)?);
    }
    for ch in &chains {
        if ch.free_coords().is_empty() {
            continue;
        }
        let r = chain_consistency(dl, ch)?;
        notes.push(format!("chain[{}] grad {:.1e} hess {:.1e}", ch.points.len(), r.grad, r.hess));
        worst[0] = worst[0].max(r.grad);
        worst[1] = worst[1].max(r.hess);
        worst[2] = worst[2].max(r.asym);
        worst[3] = worst[3].max(r.band);
    }
    // links at the solved chain and at perturbed endpoints
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let n = c.points.len();
    for j in 0..c.code.len() {
        let (qa, qb) = match &c.boundary {
            Boundary::Fixed { a, b } => (
                if j == 0 { a.clone() } else { dl.scatterer.embed(&c.points[j - 1]).map_err(e)? },
                if j == n { b.clone() } else { dl.scatterer.embed(&c.points[j]).map_err(e)? },
            ),
            _ => (dl.scatterer.embed(&c.points[j]).map_err(e)?, dl.scatterer.embed(&c.points[(j + 1) % n]).map_err(e)?),
        };
        for shift in [0.0, 0.01] {
            let jit = |q: &DVector<f64>, rng: &mut ChaCha8Rng| q.map(|x| x + shift * rng.random_range(-1.0..1.0));
            let (a, b) = (jit(&qa, &mut rng), jit(&qb, &mut rng));
            let (g, h) = link_consistency(&dl.action, &c.code[j], &a, &b)?;
            worst[0] = worst[0].max(g);
            worst[1] = worst[1].max(h);
        }
    }
    Ok(())
}

fn variational_consistency() -> Outcome {
    let mut files: Vec<PathBuf> = std::fs::read_dir(scenario_dir())
        .map_err(e)?
        .map(|d| d.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    files.sort();
    ensure!(!files.is_empty(), "no shipped scenarios");
    let mut lines = Vec::new();
    let mut fail = Vec::new();
    for f in &files {
        let name = f.file_stem().unwrap().to_string_lossy().into_owned();
        let sc = Scenario::load(f).map_err(e)?;
        let sys = System::build(&sc, 0).map_err(e)?;
        let mut worst = [0.0_f64; 4];
        let mut notes = Vec::new();
        let mut checked = false;
        if let (Some(b), Some(c)) = (&sys.backend, &sys.chain) {
            match b {
                Backend::Free(dl) => dls_scenario(dl, c, &mut worst, &mut notes)?,
                Backend::Box(dl) => dls_scenario(dl, c, &mut worst, &mut notes)?,
            }
            checked = true;
        }
        if let (Some(n), Some(scat)) = (&sc.ncenter, &sys.scatterer) {
            let act = FreeFlightAction::new(&sys.h, sys.space.clone(), sc.hamiltonian.energy).map_err(e)?;
            let dl = Dls::new(act, scat.clone()).map_err(e)?;
            let c = ChainConfiguration::periodic(vec![Symbol::empty(); n.code.len()], n.code.iter().map(|&i| ChainPoint::point(i)).collect())
                .map_err(e)?;
            dls_scenario(&dl, &c, &mut worst, &mut notes)?;
            checked = true;
        }
        if let Some(k) = &sc.kepler {
            let ty = k.types.unwrap_or([0, 0]);
            let types = (ArcType::from_index(ty[0]).map_err(e)?, ArcType::from_index(ty[1]).map_err(e)?);
            for kk in &k.k {
                for z in &k.z {
                    let (xm, xp) = (v(&z[0]), v(&z[1]));
                    let l = |a: &DVector<f64>, b: &DVector<f64>| three_body_lagrangian((kk[0], kk[1]), types, a, b, k.alpha1, k.alpha2, k.energy);
                    let link = l(&xm, &xp).map_err(e)?;
                    let gm = fd_gradient(|y| l(y, &xp).unwrap().value, &xm, 1e-5);
                    let gp = fd_gradient(|y| l(&xm, y).unwrap().value, &xp, 1e-5);
                    let scale = link.grad_minus.amax().max(link.grad_plus.amax());
                    let g = (&gm - &link.grad_minus).amax().max((&gp - &link.grad_plus).amax()) / scale;
                    worst[0] = worst[0].max(g);
                }
            }
            checked = true;
        }
        if !checked {
            lines.push(format!("{name}: no action functional"));
            continue;
        }
        let ok = worst[0] <= 1e-5 && worst[1] <= 1e-4 && worst[2] <= 1e-12 && worst[3] <= 1e-6;
        if !ok {
            fail.push(name.clone());
        }
        lines.push(format!(
            "{name}: grad {:.1e}, hess {:.1e}, asym {:.1e}, off-band {:.1e}{}",
            worst[0],
            worst[1],
            worst[2],
            worst[3],
            if notes.is_empty() { String::new() } else { format!(" ({})", notes.join(", ")) }
        ));
    }
    ensure!(fail.is_empty(), "failed on {fail:?}: {}", lines.join("; "));
    Ok(lines.join("; "))
}

// 3. Reflection law.
fn reflection_law() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut worst_h, mut worst_par, mut count, mut tangential) = (0.0_f64, 0.0_f64, 0usize, 0usize);
    for trial in 0..100 {
        let d = 2 + trial % 3;
        let a = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
        let m = a.transpose() * &a + DMatrix::identity(d, d) * 0.5;
        let b = if trial % 2 == 0 { 0.0 } else { rng.random_range(-2.0..2.0) };
        let h = ClassicalHamiltonian::with_mass(m.clone())
            .map_err(e)?
            .magnetic(if b == 0.0 { Magnetic::None } else { Magnetic::Uniform { strength: b } });
        let minv = m.clone().cholesky().ok_or("mass not positive")?.inverse();
        for _ in 0..1000 {
            let q = DVector::from_fn(d, |_, _| rng.random_range(-2.0..2.0));
            let p = DVector::from_fn(d, |_, _| rng.random_range(-2.0..2.0));
            let n = DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0));
            let mut w = DVector::zeros(d);
            w[0] = -0.5 * b * q[1];
            w[1] = 0.5 * b * q[0];
            let energy = |p: &DVector<f64>| 0.5 * (p - &w).dot(&(&minv * (p - &w)));
            let p2 = match reflect(&h, &q, &p, &n) {
                Ok(p2) => p2,
                Err(BilliardError::Tangential) => {
                    tangential += 1;
                    continue;
                }
                Err(x) => return Err(e(x)),
            };
            let e0 = energy(&p);
            worst_h = worst_h.max((energy(&p2) - e0).abs() / e0.max(1.0));
            let dp = &p2 - &p;
            let along = &n * (dp.dot(&n) / n.norm_squared());
            worst_par = worst_par.max((&dp - along).norm() / dp.norm().max(1e-300));
            count += 1;
        }
    }
    ensure!(count + tangential == 100_000, "ran {count}");
    ensure!(worst_h <= 1e-12 && worst_par <= 1e-10, "ΔH {worst_h:e}, Δp off-normal {worst_par:e}");
    Ok(format!("{count} reflections ({tangential} tangential skipped): |ΔH| {worst_h:.1e}, Δp off-normal {worst_par:.1e}"))
}

// 4. and 5. Shadowing and Lyapunov scaling on the torus.
fn shadow_scaling() -> Outcome {
    let (dl, h) = torus_point();
    let c = alternating();
    let mut errs = Vec::new();
    for &eps in &sweep_eps() {
        let sc = shadow_solve(&dl, &h, &c, eps, &ShadowOptions::default()).map_err(|x| format!("ε = {eps:e}: {x}"))?;
        let err = shadow_error(&dl, &c, &sc).map_err(e)?;
        let dom = BilliardDomain::new(h.clone(), dl.scatterer.clone(), eps, None).map_err(e)?;
        let replay = replay_error(&dom, &sc).map_err(e)?;
        ensure!(replay < 1e-6, "replay error {replay:e} at ε = {eps:e}");
        errs.push(err);
    }
    let fit = loglog_slope(&sweep_eps(), &errs).ok_or("no fit")?;
    ensure!((0.9..=1.1).contains(&fit.slope), "slope {}", fit.slope);
    Ok(format!("all 4 ε converged, slope {:.4}, errors {:?}", fit.slope, errs.iter().map(|x| format!("{x:.3e}")).collect::<Vec<_>>()))
}

fn lyapunov_growth() -> Outcome {
    let (dl, h) = torus_point();
    let c = alternating();
    let (mut lx, mut ly) = (Vec::new(), Vec::new());
    let mut counts = Vec::new();
    for &eps in &sweep_eps() {
        let sc = shadow_solve(&dl, &h, &c, eps, &ShadowOptions::default()).map_err(e)?;
        let dom = BilliardDomain::new(h.clone(), dl.scatterer.clone(), eps, None).map_err(e)?;
        let rep = lyapunov_estimate(&dom, &sc).map_err(e)?;
        let ln = (1.0 / eps).ln();
        counts.push(rep.exponents.iter().filter(|l| l.abs() >= 0.5 * ln).count());
        lx.push(ln);
        ly.push(rep.exponents[0]);
    }
    let fit = linear_fit(&lx, &ly).ok_or("no fit")?;
    ensure!(fit.slope > 0.0 && fit.r_squared >= 0.98, "b = {}, R² = {}", fit.slope, fit.r_squared);
    ensure!(counts.iter().all(|&n| n == 2), "large exponent counts {counts:?}");
    Ok(format!("a = {:.3}, b = {:.4}, R² = {:.6}, large exponents {counts:?}", fit.intercept, fit.slope, fit.r_squared))
}

// 6. Generating-function expansion.
fn generating_expansion() -> Outcome {
    let epss = [1e-2, 1e-3, 1e-4];
    let mut slopes = Vec::new();
    let (torus, _) = torus_point();
    let h = ClassicalHamiltonian::diagonal_mass(&[1.0, 2.0]).map_err(e)?;
    let plane = AmbientSpace::euclidean(2);
    let pts = Scatterer::point_set(plane.clone(), vec![v(&[0.0, 0.0]), v(&[1.0, 0.3])]).map_err(e)?;
    let massive = Dls::new(FreeFlightAction::new(&h, plane, 0.7).map_err(e)?, pts).map_err(e)?;
    let mut run = |dl: &Dls<FreeFlightAction>, k: Symbol, a: ChainPoint, b: ChainPoint, sm: DVector<f64>, sp: DVector<f64>| -> Result<f64, String> {
        let (qa, qb) = (dl.scatterer.embed(&a).map_err(e)?, dl.scatterer.embed(&b).map_err(e)?);
        let jet = dl.action.action(&k, &qa, &qb).map_err(e)?;
        let (pm, pp) = (-&jet.grad_minus, jet.grad_plus.clone());
        let mut res = Vec::new();
        for &eps in &epss {
            let le = generating_eps(dl, &k, &a, &sm, &b, &sp, eps).map_err(e)?;
            res.push((le - jet.value + eps * pm.dot(&sm) - eps * pp.dot(&sp)).abs());
        }
        let s = loglog_slope(&epss, &res).ok_or("no fit")?.slope;
        slopes.push(s);
        Ok(s)
    };
    run(&torus, sym(&[1, 0]), ChainPoint::point(0), ChainPoint::point(0), v(&[0.6, 0.8]), v(&[-0.28, 0.96]))?;
    run(&torus, sym(&[2, 1]), ChainPoint::point(0), ChainPoint::point(0), v(&[-0.8, 0.6]), v(&[0.6, -0.8]))?;
    run(&massive, Symbol::empty(), ChainPoint::point(0), ChainPoint::point(1), v(&[0.0, 1.0]), v(&[0.8, -0.6]))?;
    ensure!(slopes.iter().all(|s| (s - 2.0).abs() <= 0.1), "slopes {slopes:?}");
    Ok(format!("slopes {:?}", slopes.iter().map(|s| format!("{s:.4}")).collect::<Vec<_>>()))
}

// 7. Hyperbolicity certificate behaviour.
fn certificates() -> Outcome {
    let (dl, h) = torus_point();
    let c = alternating();
    let sc = shadow_solve(&dl, &h, &c, 1e-3, &ShadowOptions::default()).map_err(e)?;
    let wh = |w| shadow_window_hessian(&dl, &sc, 0, w).map_err(|x| DlsError::Invalid(x.to_string()));
    let cert = certificate_curve(&[8, 16], wh).map_err(e)?;
    let change = cert.relative_change().ok_or("no curve")?;
    ensure!(cert.stabilized.is_some() && change <= 0.05, "torus C_W {:?}", cert.curve);
    let green = green_decay(&wh(16).map_err(e)?, 16).map_err(e)?;
    ensure!(green.lambda > 0.0 && green.r_squared >= 0.95, "Green fit λ {} R² {}", green.lambda, green.r_squared);

    let hm = ClassicalHamiltonian::diagonal_mass(&[1.0, 2.0]).map_err(e)?;
    let circle = AmbientSpace::torus(vec![1.0, 1.0]).map_err(e)?;
    let sym_dl = Dls::new(
        FreeFlightAction::new(&hm, circle.clone(), 0.5).map_err(e)?,
        Scatterer::chart(circle, Diagonal { body_dim: 1 }).map_err(e)?,
    )
    .map_err(e)?;
    let one = ChainConfiguration::periodic(vec![sym(&[1, 0])], vec![pt(0.0)]).map_err(e)?;
    let scert = hyperbolicity_certificate(&sym_dl, &one, 0, &[4, 8, 16]).map_err(e)?;
    let growing = scert.curve.windows(2).all(|w| w[1].1 > 1.5 * w[0].1);
    ensure!(scert.stabilized.is_none() && growing, "symmetric C_W {:?}", scert.curve);
    let three = ChainConfiguration::periodic(vec![sym(&[1, 0]), sym(&[0, 1]), sym(&[1, -1])], vec![pt(0.1), pt(0.5), pt(0.7)]).map_err(e)?;
    let hs = hessian(&sym_dl, &three).map_err(e)?;
    let ker = residual_norm(&hs.apply(&vec![v(&[1.0]); 3])) / hs.inf_norm();
    ensure!(ker <= 1e-8, "symmetry vector residual {ker:e}");
    Ok(format!(
        "torus C_8 {:.6e}, C_16 {:.6e} (change {:.1e}), λ {:.3} R² {:.4}; symmetric C_W {:?}, kernel {:.1e}",
        cert.curve[0].1,
        cert.curve[1].1,
        change,
        green.lambda,
        green.r_squared,
        scert.curve.iter().map(|x| format!("{:.3e}", x.1)).collect::<Vec<_>>(),
        ker
    ))
}

// 8. Two balls in a box, fixed endpoints. Ball 1 stays left of ball 2, so
// it only meets wall 0 and ball 2 only wall 1.
fn two_balls_in_a_box() -> Outcome {
    let hm = ClassicalHamiltonian::diagonal_mass(&[1.0, 2.0]).map_err(e)?;
    let walls = vec![(0.0, 1.0), (0.0, 1.0)];
    let dl = Dls::new(
        BoxAction::new(&hm, walls.clone(), 1.0).map_err(e)?,
        Scatterer::chart(AmbientSpace::euclidean(2), Diagonal { body_dim: 1 }).map_err(e)?,
    )
    .map_err(e)?;
    let (a, b) = (v(&[0.2, 0.7]), v(&[0.3, 0.8]));
    let code: Vec<Symbol> = [[0, 0], [-1, 0], [0, 1], [-1, 0], [-1, 1], [-1, 0]].iter().map(|k| sym(k)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut solution: Option<ChainConfiguration> = None;
    let starts = 20;
    for _ in 0..starts {
        let pts = (0..5).map(|_| pt(rng.random_range(0.05..0.95))).collect();
        let c0 = ChainConfiguration::fixed(code.clone(), pts, a.clone(), b.clone()).map_err(e)?;
        let (c, rep) = newton_chain(&dl, &c0, &NewtonOptions::default()).map_err(|x| format!("start {:?}: {x}", c0.free_coords().as_slice()))?;
        ensure!(rep.residual <= 1e-10, "residual {}", rep.residual);
        match &solution {
            Some(s) => {
                let dev = (s.free_coords() - c.free_coords()).amax();
                ensure!(dev <= 1e-8, "two different critical chains, deviation {dev:e}");
            }
            None => solution = Some(c),
        }
    }
    let c = solution.ok_or("no solution")?;
    let eps = 1e-3;
    let shadow = shadow_solve(&dl, &hm, &c, eps, &ShadowOptions::default()).map_err(e)?;
    let ends = (&shadow.links[0].from - &a).norm().max((&shadow.links.last().ok_or("no links")?.to - &b).norm());
    ensure!(ends <= 1e-9, "endpoints moved by {ends:e}");
    let err = shadow_error(&dl, &c, &shadow).map_err(e)?;
    let dom = BilliardDomain::new(hm, dl.scatterer.clone(), eps, Some(walls)).map_err(e)?;
    let replay = replay_error(&dom, &shadow).map_err(e)?;
    ensure!(replay < 1e-6, "replay error {replay:e}");
    Ok(format!(
        "{starts} random starts reach one chain x = {:?}; ε = 1e-3 shadow error {err:.3e}, endpoint drift {ends:.1e}, replay {replay:.1e}",
        c.free_coords().iter().map(|x| format!("{x:.6}")).collect::<Vec<_>>()
    ))
}

// 9. Kepler cross-checks.
/// RK4 for the planar Kepler problem `ẍ = −x/|x|³`, carrying `∫|ẋ|² dt`.
fn kepler_rk4(x: [f64; 2], vel: [f64; 2], t: f64, n: usize) -> ([f64; 2], f64) {
    let f = |s: &[f64; 5]| {
        let r3 = (s[0] * s[0] + s[1] * s[1]).powf(1.5);
        [s[2], s[3], -s[0] / r3, -s[1] / r3, s[2] * s[2] + s[3] * s[3]]
    };
    let dt = t / n as f64;
    let mut s = [x[0], x[1], vel[0], vel[1], 0.0];
    let add = |s: &[f64; 5], k: &[f64; 5], c: f64| -> [f64; 5] { std::array::from_fn(|i| s[i] + c * k[i]) };
    for _ in 0..n {
        let k1 = f(&s);
        let k2 = f(&add(&s, &k1, 0.5 * dt));
        let k3 = f(&add(&s, &k2, 0.5 * dt));
        let k4 = f(&add(&s, &k3, dt));
        s = std::array::from_fn(|i| s[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]));
    }
    ([s[0], s[1]], s[4])
}

/// Fixed-energy shooting from `xm` to `xp`; the unknowns are the launch
/// angle and the travel time. Returns the Jacobi action and the time.
fn kepler_shoot(xm: [f64; 2], xp: [f64; 2], h: f64, t_guess: f64) -> Result<(f64, f64), String> {
    let speed = (2.0 * (h + 1.0 / xm[0].hypot(xm[1]))).sqrt();
    let fire = |th: f64, t: f64, n: usize| kepler_rk4(xm, [speed * th.cos(), speed * th.sin()], t, n);
    let coarse = ((t_guess * 400.0) as usize).max(2000);
    let miss = |th: f64| {
        let (x, _) = fire(th, t_guess, coarse);
        (x[0] - xp[0]).hypot(x[1] - xp[1])
    };
    let mut th = (0..720).map(|i| i as f64 * std::f64::consts::TAU / 720.0).min_by(|a, b| miss(*a).total_cmp(&miss(*b))).unwrap();
    let mut t = t_guess;
    let fine = |t: f64| ((t * 20000.0) as usize).max(40000);
    for _ in 0..40 {
        let n = fine(t);
        let (x, _) = fire(th, t, n);
        let r = [x[0] - xp[0], x[1] - xp[1]];
        if r[0].hypot(r[1]) < 1e-12 {
            return Ok((fire(th, t, n).1, t));
        }
        let (dth, dt) = (1e-7, 1e-7 * t);
        let (a, _) = fire(th + dth, t, n);
        let (b, _) = fire(th, t + dt, n);
        let j = [[(a[0] - x[0]) / dth, (b[0] - x[0]) / dt], [(a[1] - x[1]) / dth, (b[1] - x[1]) / dt]];
        let det = j[0][0] * j[1][1] - j[0][1] * j[1][0];
        let s_th = (j[1][1] * r[0] - j[0][1] * r[1]) / det;
        let s_t = (-j[1][0] * r[0] + j[0][0] * r[1]) / det;
        th -= s_th;
        t -= s_t;
    }
    Err(format!("shooting from {xm:?} to {xp:?} at h = {h} did not converge"))
}

/// Brute-force minimum over the constraint line `α₁h₁ + α₂h₂ = E`.
fn brute_force_split(k: (i64, i64), xm: &DVector<f64>, xp: &DVector<f64>, a1: f64, a2: f64, energy: f64) -> f64 {
    let s = 0.5 * (xm.norm() + xp.norm() + (xp - xm).norm());
    let hmin = -1.0 / s;
    let g = |h1: f64| {
        let h2 = (energy - a1 * h1) / a2;
        match (j_n(k.0, h1, xm, xp, ArcType::Short), j_n(k.1, h2, xm, xp, ArcType::Short)) {
            (Ok(x), Ok(y)) if h1 >= hmin && h2 >= hmin && h1 < 0.0 && h2 < 0.0 => a1 * x + a2 * y,
            _ => f64::INFINITY,
        }
    };
    let (mut lo, mut hi) = (hmin, 0.0);
    let mut best = f64::INFINITY;
    for _ in 0..60 {
        let m = 200;
        let step = (hi - lo) / m as f64;
        let (mut bi, mut bv) = (0, f64::INFINITY);
        for i in 0..=m {
            let val = g(lo + i as f64 * step);
            if val < bv {
                bv = val;
                bi = i;
            }
        }
        best = best.min(bv);
        let c = lo + bi as f64 * step;
        lo = (c - 2.0 * step).max(hmin);
        hi = (c + 2.0 * step).min(0.0);
        if hi - lo < 1e-14 {
            break;
        }
    }
    best
}

fn kepler_checks() -> Outcome {
    let hs = [-0.5, -0.7, -1.0];
    let ns = [1, 2, -1];
    let zs = [([0.3, 0.1], [-0.1, 0.4]), ([0.5, 0.0], [0.2, 0.3]), ([0.25, -0.2], [0.1, 0.35])];
    let mut worst_j = 0.0_f64;
    let mut worst_t = 0.0_f64;
    for &h in &hs {
        for &n in &ns {
            for &(a, b) in &zs {
                let (xm, xp) = (v(&a), v(&b));
                let closed = j_n(n, h, &xm, &xp, ArcType::Short).map_err(e)?;
                let tc = arc_time(n, h, &xm, &xp, ArcType::Short).map_err(e)?;
                let (quad, tq) = kepler_shoot(a, b, h, tc)?;
                worst_j = worst_j.max((quad - closed).abs() / closed);
                worst_t = worst_t.max((tq - tc).abs() / tc);
            }
        }
    }
    ensure!(worst_j <= 1e-6, "J_n vs quadrature {worst_j:e}");
    let mut worst_l = 0.0_f64;
    let (a1, a2, energy) = (0.3, 0.7, -0.9);
    for k in [(1, 1), (2, 3), (1, 2)] {
        for &(a, b) in &zs {
            let (xm, xp) = (v(&a), v(&b));
            let l = three_body_lagrangian(k, (ArcType::Short, ArcType::Short), &xm, &xp, a1, a2, energy).map_err(e)?;
            let brute = brute_force_split(k, &xm, &xp, a1, a2, energy);
            worst_l = worst_l.max((l.value - brute).abs() / brute.abs());
        }
    }
    ensure!(worst_l <= 1e-9, "three-body split vs brute force {worst_l:e}");
    Ok(format!("27 arcs: J_n vs shooting quadrature {worst_j:.1e} (times {worst_t:.1e}); 9 splits vs brute force {worst_l:.1e}"))
}

// 10. Symbolic dynamics.
fn int_power_sum(adj: &[Vec<usize>], n: usize) -> u128 {
    let m = adj.len();
    let mut x = vec![1u128; m];
    for _ in 0..n {
        let mut y = vec![0u128; m];
        for (i, row) in adj.iter().enumerate() {
            for &j in row {
                y[i] += x[j];
            }
        }
        x = y;
    }
    x.iter().sum()
}

fn centers_graph(centers: &[[f64; 2]], straight: bool) -> CollisionGraph {
    let mut vertices = Vec::new();
    for (i, a) in centers.iter().enumerate() {
        for (j, b) in centers.iter().enumerate() {
            if i != j {
                let d = v(b) - v(a);
                let vel = &d / d.norm();
                vertices.push(Vertex { label: format!("{i}{j}"), from: i, to: j, p_minus: vel.clone(), p_plus: vel.clone(), v_minus: vel.clone(), v_plus: vel });
            }
        }
    }
    build_graph(vertices, &GraphOptions { no_straight_reflection: straight, ..Default::default() })
}

fn symbolic() -> Outcome {
    let full = vec![vec![0, 1, 2]; 3];
    let g = CollisionGraph::from_adjacency(full.clone()).map_err(e)?;
    let rep = entropy(&g).map_err(e)?;
    let err = (rep.entropy - 3f64.ln()).abs();
    ensure!(err <= 1e-10, "entropy error {err:e}");
    let golden = vec![vec![0, 1], vec![0]];
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let random: Vec<Vec<usize>> = (0..5).map(|_| (0..5).filter(|_| rng.random_bool(0.45)).collect()).collect();
    for adj in [&full, &golden, &random] {
        let g = CollisionGraph::from_adjacency(adj.clone()).map_err(e)?;
        for n in 0..=12 {
            let exact = int_power_sum(adj, n);
            ensure!(path_count(&g, n) == exact as f64, "path_count({n}) on {adj:?}");
            if exact <= 200_000 {
                ensure!(paths(&g, n, &PathBudget::default()).map_err(e)?.len() as u128 == exact, "paths({n}) on {adj:?}");
            }
        }
    }
    let tri = centers_graph(&[[0.0, 0.0], [1.0, 0.0], [0.3, 0.8]], false);
    let trep = entropy(&tri).map_err(e)?;
    ensure!(trep.entropy > 0.0, "three-center entropy {}", trep.entropy);
    let dense = trep.dense_check.ok_or("no dense check")?;
    ensure!(dense <= 1e-9, "dense eigenvalue mismatch {dense:e}");
    Ok(format!(
        "K₃ with loops: entropy error {err:.1e}; path counts exact to n = 12; 3 centers: {} edges, entropy {:.12} (dense gap {dense:.1e})",
        tri.edge_count(),
        trep.entropy
    ))
}

// 11. n-center shadowing.
fn ncenter_experiment() -> Outcome {
    let centers = vec![v(&[0.0, 0.0]), v(&[1.0, 0.0]), v(&[1.0, 1.0]), v(&[0.0, 1.0])];
    let h = ClassicalHamiltonian::free(2);
    let plane = AmbientSpace::euclidean(2);
    let scat = Scatterer::point_set(plane.clone(), centers).map_err(e)?;
    let dl = Dls::new(FreeFlightAction::new(&h, plane, 0.5).map_err(e)?, scat.clone()).map_err(e)?;
    let template = SingularPerturbation::new(h, scat, 0.0, Coefficient::Constant(vec![1.0; 4])).map_err(e)?;
    let c = ChainConfiguration::periodic(vec![Symbol::empty(); 4], (0..4).map(ChainPoint::point).collect()).map_err(e)?;
    let mus = [1e-3, 10f64.powf(-3.5), 1e-4];
    let table = shadow_experiment(&dl, &template, &c, &mus, &ShadowExperimentOptions::default()).map_err(e)?;
    ensure!(table.rows.iter().all(|r| r.converged), "not all μ converged");
    let fit = table.error_slope().ok_or("no fit")?;
    ensure!(fit.slope >= 0.8, "slope {}", fit.slope);
    let ratios: Vec<f64> = table.rows.iter().map(|r| r.min_distance / r.mu).collect();
    let spread = ratios.iter().cloned().fold(0.0, f64::max) / ratios.iter().cloned().fold(f64::INFINITY, f64::min);
    ensure!(spread <= 3.0, "d_min/μ {ratios:?}");
    Ok(format!(
        "slope {:.4}; d_min/μ {:?}; errors {:?}",
        fit.slope,
        ratios.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>(),
        table.rows.iter().map(|r| format!("{:.3e}", r.sup_error)).collect::<Vec<_>>()
    ))
}

fn run_criterion(n: usize, name: &str, budget: Duration, f: fn() -> Outcome) -> bool {
    let start = Instant::now();
    let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_else(|| "panic".into()))
    });
    let elapsed = start.elapsed();
    let in_time = elapsed <= budget;
    let (pass, detail) = match result {
        Ok(d) if in_time => (true, d),
        Ok(d) => (false, format!("{d}; over budget")),
        Err(d) => (false, d),
    };
    let line = format!(
        "criterion {n:>2} {}: {name} [{:.2} s of {} s] {detail}",
        if pass { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64(),
        budget.as_secs()
    );
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
    let _ = out.flush();
    pass
}

#[test]
fn acceptance() {
    let s = Duration::from_secs;
    let criteria: [(&str, Duration, fn() -> Outcome); 11] = [
        ("exact torus action", s(1), exact_torus_action),
        ("variational consistency", s(60), variational_consistency),
        ("reflection law", s(10), reflection_law),
        ("shadowing error scales like ε", s(300), shadow_scaling),
        ("Lyapunov growth", s(300), lyapunov_growth),
        ("generating-function expansion", s(60), generating_expansion),
        ("hyperbolicity certificates", s(120), certificates),
        ("two balls in a box", s(120), two_balls_in_a_box),
        ("Kepler cross-checks", s(120), kepler_checks),
        ("symbolic dynamics", s(10), symbolic),
        ("n-center shadowing", s(600), ncenter_experiment),
    ];
    let mut failed = Vec::new();
    for (i, (name, budget, f)) in criteria.into_iter().enumerate() {
        if !run_criterion(i + 1, name, budget, f) {
            failed.push(i + 1);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
