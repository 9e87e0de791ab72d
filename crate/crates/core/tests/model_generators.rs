mod common;

use std::f64::consts::PI;

use projbal::balance::l2_gram;
use projbal::herm::factorial;
use projbal::linalg::{self, c};
use projbal::model::*;

/// `∫_{P^1} |z^m|^2 (1+|z|^2)^{-n}` against the Fubini-Study area.
fn beta_oracle(m: i64, n: i64) -> f64 {
    PI * factorial(m as usize) * factorial((n - m) as usize) / factorial(n as usize + 1)
}

#[test]
fn p1_gram_matches_beta_integrals() {
    for (a, k) in [
        (vec![0], 1),
        (vec![1, 1], 2),
        (vec![0, 2], 3),
        (vec![3, -1, 2], 4),
    ] {
        let spec = ModelSpec::p1(a.clone(), k, 1, 8);
        let g = gen_p1_bundle(&spec).unwrap();
        let gram = l2_gram(&g.sample, &g.metric, &g.mesh).unwrap();
        let model = P1Model::new(&a, k, 1).unwrap();
        assert_eq!(gram.nrows(), p1_riemann_roch(&a, k, 1));
        for (i, &(s, m)) in model.sections().iter().enumerate() {
            for j in 0..gram.ncols() {
                let n = model.summand_degrees()[s];
                let e = if i == j { beta_oracle(m, n) } else { 0.0 };
                assert!((gram[(i, j)] - c(e, 0.0)).norm() < 1e-12, "{a:?} {i} {j}");
            }
        }
    }
}

#[test]
fn sym_gram_matches_weighted_beta_integrals() {
    let a = vec![0, 2];
    let g = sym_sections(&ModelSpec::p1(a.clone(), 1, 2, 8), 2).unwrap();
    let gram = l2_gram(&g.sample, &g.metric, &g.mesh).unwrap();
    let model = P1Model::new(&a, 1, 2).unwrap();
    let weights = [1.0, 0.5, 1.0];
    assert_eq!(model.summand_degrees(), &[1, 3, 5]);
    for (i, &(s, m)) in model.sections().iter().enumerate() {
        let e = weights[s] * beta_oracle(m, model.summand_degrees()[s]);
        assert!((gram[(i, i)].re - e).abs() < 1e-12);
    }
    assert!(linalg::max_abs(&(gram.clone() - CMatDiag::diag(&gram))) < 1e-12);
}

struct CMatDiag;
impl CMatDiag {
    fn diag(m: &linalg::CMat) -> linalg::CMat {
        linalg::CMat::from_diagonal(&m.diagonal())
    }
}

#[test]
fn line_on_p1_has_equal_diagonal() {
    let g = gen_p1_bundle(&ModelSpec::p1(vec![0], 1, 1, 4)).unwrap();
    let gram = l2_gram(&g.sample, &g.metric, &g.mesh).unwrap();
    assert_eq!(gram.nrows(), 2);
    assert!((gram[(0, 0)].re / gram[(1, 1)].re - 1.0).abs() < 1e-14);
    assert!((gram[(0, 0)].re - PI / 2.0).abs() < 1e-13);
}

#[test]
fn meshes_have_model_volume() {
    let m = p1_mesh(7).unwrap();
    assert!((m.total_volume - PI).abs() < 1e-12);
    let t = TorusModel::new(c(0.3, 1.7), 4)
        .unwrap()
        .build_mesh(10)
        .unwrap();
    assert!((t.total_volume - 1.7).abs() < 1e-12);
    assert_eq!(t.len(), 12 * 12);
}

#[test]
fn sym_square_counts() {
    let spec = ModelSpec::p1(vec![1, 1], 0, 2, 8);
    assert_eq!(spec.section_count(), 9);
    let g = sym_sections(&spec, 2).unwrap();
    assert_eq!(g.sample.n, 9);
    assert_eq!(g.sample.fiber_rank, 3);
    assert_eq!(p1_summand_degrees(&[0, 2], 0, 2).unwrap(), vec![0, 2, 4]);
}

#[test]
fn degree_one_symmetric_power_is_the_bundle() {
    let spec = ModelSpec::p1(vec![1, 2], 1, 1, 6);
    let a = gen_p1_bundle(&spec).unwrap();
    let b = sym_sections(&spec, 1).unwrap();
    assert_eq!(a.sample, b.sample);
}

#[test]
fn riemann_roch_counts() {
    for a in [vec![0], vec![1, 1], vec![0, 2], vec![2, 1, 0]] {
        for k in 0..4 {
            for d in 1..=3 {
                let spec = ModelSpec::p1(a.clone(), k, d, 12);
                let g = generate(&spec).unwrap();
                assert_eq!(g.sample.n, p1_riemann_roch(&a, k, d));
                assert_eq!(g.sample.n, spec.section_count());
            }
        }
    }
    for n in 1..6 {
        let g = gen_torus_line(&ModelSpec::torus(c(0.0, 1.0), 1, n, 12)).unwrap();
        assert_eq!(g.sample.n, n);
    }
}

#[test]
fn single_theta_has_positive_norm() {
    let g = gen_torus_line(&ModelSpec::torus(c(0.0, 1.0), 1, 1, 16)).unwrap();
    let gram = l2_gram(&g.sample, &g.metric, &g.mesh).unwrap();
    assert!(gram[(0, 0)].re > 0.0 && gram[(0, 0)].re.is_finite());
}

#[test]
fn theta_characteristics_are_orthogonal() {
    let g = gen_torus_line(&ModelSpec::torus(c(0.0, 1.0), 3, 1, 48)).unwrap();
    let gram = l2_gram(&g.sample, &g.metric, &g.mesh).unwrap();
    let top = gram[(0, 0)].re;
    for i in 0..3 {
        // all characteristics have the same norm sqrt(Im τ / (2n))
        assert!((gram[(i, i)].re - (1.0 / 6.0f64).sqrt()).abs() < 1e-12);
        for j in 0..3 {
            if i != j {
                assert!(gram[(i, j)].norm() <= 1e-12 * top);
            }
        }
    }
}

#[test]
fn equal_degree_reference_is_hermitian_einstein() {
    let spec = ModelSpec::p1(vec![1, 1], 0, 1, 64);
    let g = gen_p1_bundle(&spec).unwrap();
    assert!(g.hermitian_einstein);
    let mesh = p1_mesh(8).unwrap();
    let r = hermitian_einstein_residual(&spec, &mesh).unwrap();
    assert!(r < 1e-6);
    let torus = ModelSpec::torus(c(0.1, 1.2), 2, 3, 8);
    let mesh = torus.build().unwrap().build_mesh(8).unwrap();
    assert!(hermitian_einstein_residual(&torus, &mesh).unwrap() < 1e-6);
}

#[test]
fn unequal_degrees_are_flagged() {
    let spec = ModelSpec::p1(vec![0, 2], 0, 1, 8);
    let g = gen_p1_bundle(&spec).unwrap();
    assert!(!g.hermitian_einstein);
    // curvature diag(0, 2) is not a multiple of the identity
    let mesh = p1_mesh(4).unwrap();
    assert!(hermitian_einstein_residual(&spec, &mesh).unwrap() > 0.5);
}

#[test]
fn spanning_fails_with_a_base_point() {
    let mut g = gen_p1_bundle(&ModelSpec::p1(vec![1], 0, 1, 4)).unwrap();
    let s = g.sample.values[3].clone();
    g.sample.values[3] = s * linalg::CMat::zeros(2, 2);
    assert!(matches!(
        check_spanning(&g.sample),
        Err(projbal::Error::BasePoint { point: 3 })
    ));
}
