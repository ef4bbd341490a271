use degbill::billiard::reflect;
use degbill::bvp::{FreeFlightAction, Symbol, TwoPointAction};
use degbill::dynamics::{AmbientSpace, ClassicalHamiltonian};
use degbill::kepler::EnergySplit;
use degbill::linalg::{fd_gradient, BlockTridiagonal};
use degbill::symbolic::{path_count, paths, CollisionGraph, PathBudget};
use degbill::{DMatrix, DVector};
use proptest::prelude::*;

fn vec_of(n: usize, lo: f64, hi: f64) -> impl Strategy<Value = DVector<f64>> {
    prop::collection::vec(lo..hi, n).prop_map(DVector::from_vec)
}

/// `LLᵀ + I/2` from arbitrary entries.
fn spd(n: usize) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(-1.0..1.0f64, n * n).prop_map(move |e| {
        let l = DMatrix::from_vec(n, n, e);
        &l * l.transpose() + DMatrix::identity(n, n) * 0.5
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn reflection_preserves_energy_and_jumps_along_the_conormal(
        m in spd(3),
        q in vec_of(3, -1.0, 1.0),
        p in vec_of(3, -2.0, 2.0),
        n in vec_of(3, -1.0, 1.0),
    ) {
        prop_assume!(n.norm() > 0.1);
        let h = ClassicalHamiltonian::with_mass(m).unwrap();
        let a = n.dot(&(h.mass_inv() * &p));
        prop_assume!(a.abs() > 1e-6 * n.norm() * p.norm());
        let out = reflect(&h, &q, &p, &n).unwrap();
        let (e0, e1) = (h.energy(&q, &p).unwrap(), h.energy(&q, &out).unwrap());
        prop_assert!((e0 - e1).abs() <= 1e-12 * (1.0 + e0.abs()));
        let jump = &out - &p;
        let off = &jump - &n * (jump.dot(&n) / n.dot(&n));
        prop_assert!(off.norm() <= 1e-12 * (1.0 + p.norm()));
        let twice = reflect(&h, &q, &out, &n).unwrap();
        prop_assert!((twice - &p).norm() <= 1e-12 * (1.0 + p.norm()));
    }

    #[test]
    fn torus_free_flight_is_reversible_and_on_shell(
        m in spd(2),
        qm in vec_of(2, 0.0, 1.0),
        qp in vec_of(2, 0.0, 1.0),
        k in prop::collection::vec(-3i64..=3, 2),
        e in 0.1..3.0f64,
    ) {
        let h = ClassicalHamiltonian::with_mass(m).unwrap();
        let act = FreeFlightAction::new(&h, AmbientSpace::torus(vec![1.0, 1.0]).unwrap(), e).unwrap();
        let fwd = Symbol::new(k.clone());
        let back = Symbol::new(k.iter().map(|x| -x).collect::<Vec<_>>());
        let Ok(s) = act.action(&fwd, &qm, &qp) else { return Ok(()) };
        let r = act.action(&back, &qp, &qm).unwrap();
        prop_assert!(s.value > 0.0);
        prop_assert!((s.value - r.value).abs() <= 1e-12 * s.value);
        for p in [-&s.grad_minus, s.grad_plus.clone()] {
            let kin = 0.5 * p.dot(&(h.mass_inv() * &p));
            prop_assert!((kin - e).abs() <= 1e-10 * e);
        }
    }

    #[test]
    fn free_flight_gradient_matches_differences(
        m in spd(2),
        qm in vec_of(2, -1.0, 1.0),
        qp in vec_of(2, 2.0, 3.0),
    ) {
        let h = ClassicalHamiltonian::with_mass(m).unwrap();
        let act = FreeFlightAction::new(&h, AmbientSpace::euclidean(2), 0.5).unwrap();
        let k = Symbol::new(Vec::<i64>::new());
        let jet = act.action(&k, &qm, &qp).unwrap();
        let gm = fd_gradient(|x| act.action(&k, x, &qp).unwrap().value, &qm, 1e-5);
        let gp = fd_gradient(|x| act.action(&k, &qm, x).unwrap().value, &qp, 1e-5);
        prop_assert!((gm - &jet.grad_minus).amax() <= 1e-7 * (1.0 + jet.grad_minus.amax()));
        prop_assert!((gp - &jet.grad_plus).amax() <= 1e-7 * (1.0 + jet.grad_plus.amax()));
    }

    #[test]
    fn block_tridiagonal_solve_matches_dense(
        entries in prop::collection::vec(-1.0..1.0f64, 5 * 2 * 4),
        rhs in prop::collection::vec(-1.0..1.0f64, 10),
        cyclic in any::<bool>(),
    ) {
        let blocks = 5;
        let mat = |i: usize| DMatrix::from_column_slice(2, 2, &entries[4 * i..4 * i + 4]);
        let diag: Vec<_> = (0..blocks).map(|i| mat(i) + DMatrix::identity(2, 2) * 6.0).collect();
        let lower: Vec<_> = (0..if cyclic { blocks } else { blocks - 1 }).map(|i| mat(blocks + i)).collect();
        let t = BlockTridiagonal::new(diag, lower, cyclic).unwrap();
        let b = DVector::from_vec(rhs);
        let x = BlockTridiagonal::join(&t.solve(&t.split(&b)).unwrap());
        let dense = t.to_dense().lu().solve(&b).unwrap();
        prop_assert!((x - dense).amax() <= 1e-12);
    }

    #[test]
    fn path_counts_are_adjacency_powers(
        bits in prop::collection::vec(any::<bool>(), 16),
        n in 0usize..8,
    ) {
        let adjacency: Vec<Vec<usize>> = (0..4).map(|i| (0..4).filter(|&j| bits[4 * i + j]).collect()).collect();
        let g = CollisionGraph::from_adjacency(adjacency.clone()).unwrap();
        let mut x = [1u64; 4];
        for _ in 0..n {
            x = std::array::from_fn(|i| adjacency[i].iter().map(|&j| x[j]).sum());
        }
        let exact: u64 = x.iter().sum();
        prop_assert_eq!(path_count(&g, n), exact as f64);
        prop_assert_eq!(paths(&g, n, &PathBudget::default()).unwrap().len() as u64, exact);
    }

    #[test]
    fn energy_split_recovers_the_total(
        alpha1 in 0.01..0.99f64,
        energy in -3.0..-0.01f64,
        h1 in -5.0..0.0f64,
    ) {
        let s = EnergySplit::new(alpha1, 1.0 - alpha1, energy, h1).unwrap();
        prop_assert!((s.energy() - energy).abs() <= 1e-12 * (1.0 + h1.abs() / (1.0 - alpha1)));
    }
}
