use projbal::balance::BalanceOptions;
use projbal::linalg::c;
use projbal::model::ModelSpec;
use projbal::probe::*;
use projbal::Error;

#[test]
fn torus_density_is_flat_and_linear_in_k() {
    let spec = ModelSpec::torus(c(0.3, 1.2), 1, 4, 32);
    let rep = bergman_expansion_probe(&spec, &[4, 6, 8, 10]).unwrap();
    for row in &rep.rows {
        assert!(row.trace_error <= 1e-10, "{row:?}");
        assert_eq!(row.n, row.k);
    }
    // the spread of B is exponentially small in k
    assert!(rep
        .rows
        .windows(2)
        .all(|w| w[1].constancy < w[0].constancy / 2.0));
    assert!((rep.leading - 1.0).abs() <= 0.05);
    assert!(rep.fit_residual < 1e-2);
}

#[test]
fn expansion_needs_hermitian_einstein_reference() {
    let spec = ModelSpec::p1(vec![0, 1], 2, 1, 16);
    assert!(matches!(
        bergman_expansion_probe(&spec, &[2, 3, 4]),
        Err(Error::NotHermitianEinstein)
    ));
}

#[test]
fn rate_probe_rows_and_window() {
    let spec = ModelSpec::torus(c(0.0, 1.5), 1, 6, 48);
    let rep = convergence_rate_probe(
        &spec,
        &[6, 8, 10],
        &BalanceOptions::default(),
        RateStart::Identity,
        2,
    )
    .unwrap();
    assert_eq!(rep.rows.len(), 3);
    assert_eq!(rep.slopes.len(), 2);
    assert!(rep.rows.iter().all(|r| r.converged));
    assert!(rep.monotone);
    assert!(rep.top_slope().unwrap() < 0.0);
    assert!(convergence_rate_probe(
        &spec,
        &[6, 8],
        &BalanceOptions::default(),
        RateStart::Identity,
        3
    )
    .is_err());
}

#[test]
fn reference_start_on_a_line_bundle_stays_put() {
    // O(k) on the round P^1 is balanced by its Fubini-Study metric
    let spec = ModelSpec::p1(vec![0], 3, 1, 16);
    let rep = convergence_rate_probe(
        &spec,
        &[3, 4, 5],
        &BalanceOptions::default(),
        RateStart::Reference,
        2,
    )
    .unwrap();
    for row in &rep.rows {
        assert!(row.delta < 1e-9, "{row:?}");
        assert!(row.iterations <= 1);
    }
}
