mod common;

use common::{random_metric, random_vec, rng};
use nalgebra::DMatrix;
use proptest::prelude::*;

use projbal::balance::t_map;
use projbal::fiber::{eval_induced_metric, FiberPoint};
use projbal::herm::{metric_distance, sym_power_map, sym_power_metric, HermMetric, SymBasisMap};
use projbal::io::{matrices_from_text, matrices_to_text};
use projbal::linalg::{self, c, CMat};
use projbal::model::{generate, ModelSpec};
use projbal::ruled::pipeline_mesh_size;

fn rel_err(a: &CMat, b: &CMat) -> f64 {
    linalg::max_abs(&(a - b)) / linalg::max_abs(b)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn sym_power_is_positive_and_homogeneous(seed in any::<u64>(), r in 1usize..4, d in 1usize..5, lambda in 0.1f64..10.0) {
        let h = random_metric(&mut rng(seed), r, 8.0);
        let s = sym_power_metric(&h, d).unwrap();
        prop_assert!(linalg::max_skew(s.matrix()) == 0.0);
        prop_assert!(linalg::eigvalsh(s.matrix())[0] > 0.0);
        let scaled = sym_power_metric(&h.scaled(lambda), d).unwrap();
        let expect = s.matrix().scale(lambda.powi(d as i32));
        prop_assert!(rel_err(scaled.matrix(), &expect) < 1e-12);
    }

    #[test]
    fn sym_power_commutes_with_pullback(seed in any::<u64>(), r in 1usize..4, d in 1usize..4) {
        let mut g = rng(seed);
        let h = random_metric(&mut g, r, 5.0);
        let a = DMatrix::from_fn(r, r, |_, _| common::random_complex(&mut g)) + linalg::identity(r).scale(2.0);
        let pulled = HermMetric::new(linalg::symmetrize(&(a.adjoint() * h.matrix() * &a)), "e").unwrap();
        let lhs = sym_power_metric(&pulled, d).unwrap();
        let sa = sym_power_map(&a, d).unwrap();
        let rhs = sa.adjoint() * sym_power_metric(&h, d).unwrap().matrix() * sa;
        prop_assert!(rel_err(lhs.matrix(), &rhs) < 1e-11);
    }

    #[test]
    fn sym_power_map_is_multiplicative(seed in any::<u64>(), r in 1usize..4, d in 1usize..4) {
        let mut g = rng(seed);
        let a = DMatrix::from_fn(r, r, |_, _| common::random_complex(&mut g));
        let b = DMatrix::from_fn(r, r, |_, _| common::random_complex(&mut g));
        let ab = sym_power_map(&(&a * &b), d).unwrap();
        let prod = sym_power_map(&a, d).unwrap() * sym_power_map(&b, d).unwrap();
        prop_assert!(linalg::max_abs(&(ab - prod)) < 1e-12 * (1.0 + 4f64.powi(d as i32)));
    }

    #[test]
    fn metric_distance_is_congruence_invariant(seed in any::<u64>(), r in 1usize..5) {
        let mut g = rng(seed);
        let h = random_metric(&mut g, r, 4.0);
        let h0 = random_metric(&mut g, r, 4.0);
        let a = DMatrix::from_fn(r, r, |_, _| common::random_complex(&mut g)) + linalg::identity(r).scale(2.0);
        let push = |m: &HermMetric| HermMetric::new(linalg::symmetrize(&(a.adjoint() * m.matrix() * &a)), "e").unwrap();
        let before = metric_distance(&h, &h0).unwrap();
        let after = metric_distance(&push(&h), &push(&h0)).unwrap();
        prop_assert!((before - after).abs() <= 1e-9 * before.max(1.0));
        prop_assert!(metric_distance(&h, &h).unwrap() < 1e-14);
    }

    #[test]
    fn induced_metric_ignores_covector_scale(seed in any::<u64>(), r in 1usize..4, d in 1usize..4, re in -5.0f64..5.0, im in 0.2f64..5.0) {
        let mut g = rng(seed);
        let h = random_metric(&mut g, r, 4.0);
        let big = sym_power_metric(&h, d).unwrap();
        let n = SymBasisMap::new(r, d).unwrap().len();
        let s = random_vec(&mut g, n);
        let t = random_vec(&mut g, n);
        let f = FiberPoint::new(random_vec(&mut g, r)).unwrap();
        let a = eval_induced_metric(&big, d, &s, &t, &f).unwrap();
        let b = eval_induced_metric(&big, d, &s, &t, &f.scaled(c(re, im))).unwrap();
        prop_assert!((a - b).norm() <= 1e-12 * a.norm().max(1e-300));
    }

    #[test]
    fn matrix_text_round_trips(seed in any::<u64>(), rows in 1usize..5, cols in 1usize..5, count in 1usize..4, exp in -300i32..300) {
        let mut g = rng(seed);
        let ms: Vec<CMat> = (0..count)
            .map(|_| DMatrix::from_fn(rows, cols, |_, _| common::random_complex(&mut g) * 10f64.powi(exp)))
            .collect();
        let back = matrices_from_text(&matrices_to_text(&ms).unwrap()).unwrap();
        prop_assert_eq!(back, ms);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn t_map_is_homogeneous(seed in any::<u64>(), scale in 0.01f64..100.0, k in 1usize..4) {
        let spec = ModelSpec::p1(vec![1, 1], k, 1, 1);
        let spec = ModelSpec { mesh_size: pipeline_mesh_size(&spec).unwrap(), ..spec };
        let gen = generate(&spec).unwrap();
        let n = gen.sample.n;
        let h = random_metric(&mut rng(seed), n, 3.0);
        let g0 = t_map(h.matrix(), &gen.sample, &gen.mesh).unwrap();
        let g1 = t_map(&h.matrix().scale(scale), &gen.sample, &gen.mesh).unwrap();
        prop_assert!(rel_err(&g1, &g0.scale(scale)) < 1e-11);
    }
}
