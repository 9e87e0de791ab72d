mod common;

use projbal::balance::{balance_iterate, scale_free_gram_distance, BalanceOptions};
use projbal::fiber::{c_closed_form, fs_quadrature, perturbation_check};
use projbal::herm::{binomial, sym_power_metric, HermMetric};
use projbal::linalg::{self, c, CMat};
use projbal::model::{sample_model, BundleTag, ModelSpec, SectionSample};
use projbal::probe::{loglog_slope, RateStart};
use projbal::ruled::*;
use projbal::Error;

fn setup(degrees: Vec<i64>, k: usize, d: usize, level: usize) -> (RuledMesh, SectionSample) {
    let spec = ModelSpec::p1(degrees, k, d, 0);
    let spec = ModelSpec {
        mesh_size: pipeline_mesh_size(&spec).unwrap(),
        ..spec
    };
    let ruled = RuledMesh::from_spec(&spec, level).unwrap();
    let model = ruled.sym_model().unwrap();
    let (sample, _) = sample_model(model.as_ref(), &ruled.base, BundleTag::SymTwisted, k, d);
    (ruled, sample)
}

fn reference_orthonormal(ruled: &RuledMesh, sample: &SectionSample) -> HatValues {
    let model = ruled.sym_model().unwrap();
    let field = SymMetric::Reference(model.as_ref())
        .metric_field(&ruled.base)
        .unwrap();
    let l = projbal::balance::l2_gram(sample, &field, &ruled.base).unwrap();
    hat_sections(sample, ruled)
        .unwrap()
        .with_basis(&orthonormalizer(&l))
}

#[test]
fn ruled_mass_matches_product_volume() {
    for degrees in [vec![1], vec![1, 1], vec![0, 2], vec![1, 1, 1]] {
        let (ruled, _) = setup(degrees, 3, 1, 5);
        assert!(ruled.mass_error() < 1e-8, "{}", ruled.mass_error());
    }
}

#[test]
fn degree_one_hat_values_pair_sections_with_covectors() {
    let (ruled, sample) = setup(vec![1, 1], 2, 1, 4);
    let hat = hat_sections(&sample, &ruled).unwrap();
    let m = ruled.fiber_len();
    for node in [0, 7, m + 3, ruled.node_count() - 1] {
        let f = ruled.covector(node);
        let s = sample.at(node / m);
        let row = hat.at(node);
        for j in 0..sample.n {
            let pairing = f[0] * s[(0, j)] + f[1] * s[(1, j)];
            assert!((row[(0, j)] - pairing).norm() < 1e-14);
        }
    }
}

#[test]
fn zero_section_vanishes_everywhere() {
    let (ruled, sample) = setup(vec![1, 1], 2, 2, 3);
    let hat = hat_sections(&sample, &ruled).unwrap();
    let zero = hat.with_basis(&CMat::zeros(sample.n, 1));
    for node in 0..zero.node_count() {
        assert_eq!(zero.at(node)[(0, 0)], c(0.0, 0.0));
    }
}

#[test]
fn hat_sections_reject_mismatched_frames() {
    let (ruled, _) = setup(vec![1, 1], 2, 2, 3);
    let (_, other) = setup(vec![1, 1], 2, 1, 3);
    assert!(matches!(
        hat_sections(&other, &ruled),
        Err(Error::DimensionMismatch { .. } | Error::BasisMismatch { .. })
    ));
}

#[test]
fn fiber_sup_is_bounded_by_the_section_norm() {
    // Equality holds for d = 1; for d >= 2 the bound can be strict.
    for (d, level) in [(1, 4), (1, 12), (2, 8)] {
        let (ruled, sample) = setup(vec![1, 1], 2, d, level);
        let model = ruled.sym_model().unwrap();
        let metric = SymMetric::Reference(model.as_ref());
        let hhat = node_metric(&ruled, &metric).unwrap();
        let hat = hat_sections(&sample, &ruled).unwrap();
        let m = ruled.fiber_len();
        let mut worst_gap = 0.0f64;
        for p in (0..ruled.base.len()).step_by(5) {
            let h = metric
                .metric_at(ruled.base.charts[p], ruled.base.points[p])
                .unwrap();
            for j in 0..sample.n {
                let s: Vec<_> = sample.at(p).column(j).iter().copied().collect();
                let norm = linalg::quad_form(&h, &s);
                let sup = (p * m..(p + 1) * m)
                    .map(|v| hat.at(v)[(0, j)].norm_sqr() * hhat[v])
                    .fold(0.0, f64::max);
                assert!(sup <= norm * (1.0 + 1e-12));
                worst_gap = worst_gap.max(1.0 - sup / norm);
            }
        }
        if d == 1 && level == 12 {
            assert!(worst_gap < 0.05, "{worst_gap}");
        }
    }
}

#[test]
fn volume_identity_holds_for_equal_degrees() {
    for d in [1, 2] {
        for k in [5, 10] {
            let (ruled, _) = setup(vec![1, 1], k, d, 6);
            let rep = volume_identity_check(&ruled).unwrap();
            assert!(rep.discrepancy <= 1e-4, "{rep:?}");
            assert!(common::rel_close(
                rep.product_mass,
                rep.expected_mass,
                1e-12
            ));
        }
    }
    let (ruled, _) = setup(vec![2], 3, 1, 2);
    let rep = volume_identity_check(&ruled).unwrap();
    assert!(rep.discrepancy <= 1e-4, "{rep:?}");
}

#[test]
fn volume_identity_needs_hermitian_einstein_input() {
    let (ruled, _) = setup(vec![0, 2], 3, 1, 4);
    assert!(matches!(
        volume_identity_check(&ruled),
        Err(Error::NotHermitianEinstein)
    ));
}

#[test]
fn negative_curvature_is_detected() {
    let (ruled, _) = setup(vec![-1, 1], 0, 1, 4);
    let model = ruled.sym_model().unwrap();
    let out = ruled_volume(
        &ruled,
        &SymMetric::Reference(model.as_ref()),
        VolumeMode::Induced,
    );
    assert!(matches!(out, Err(Error::CurvatureFailure { .. })));
}

#[test]
fn reference_gram_is_scalar() {
    for (degrees, d) in [(vec![1, 1], 1), (vec![1, 1], 2), (vec![1, 1, 1], 2)] {
        let (ruled, sample) = setup(degrees.clone(), 6, d, d + 1);
        let hat = reference_orthonormal(&ruled, &sample);
        let model = ruled.sym_model().unwrap();
        let gram = pe_gram(
            &hat,
            &SymMetric::Reference(model.as_ref()),
            &ruled,
            VolumeMode::Product,
        )
        .unwrap();
        let r = degrees.len();
        let twist = ruled.spec.expected_curvature();
        let target = linalg::identity(hat.n).scale(c_closed_form(r, d) * twist);
        assert!(linalg::max_abs(&(&gram - target)) / twist < 1e-10);
        assert!(linalg::max_skew(&gram) == 0.0);
    }
}

#[test]
fn rank_one_gram_is_the_twisted_base_gram() {
    let (ruled, sample) = setup(vec![2], 4, 1, 1);
    let model = ruled.sym_model().unwrap();
    let metric = SymMetric::Reference(model.as_ref());
    let hat = hat_sections(&sample, &ruled).unwrap();
    let gram = pe_gram(&hat, &metric, &ruled, VolumeMode::Product).unwrap();
    let field = metric.metric_field(&ruled.base).unwrap();
    let base = projbal::balance::l2_gram(&sample, &field, &ruled.base).unwrap();
    let twist = ruled.spec.expected_curvature();
    assert!(linalg::max_abs(&(gram - base.scale(twist))) < 1e-12 * twist);
}

fn fiber_worst_ratio(r: usize, d: usize, p: &CMat) -> f64 {
    let h = HermMetric::identity(r, "e");
    let sym = sym_power_metric(&h, d).unwrap();
    let root = linalg::hermitian_sqrt(sym.matrix());
    let big = &root * (linalg::identity(p.nrows()) + p) * &root;
    let big = HermMetric::new(linalg::symmetrize(&big), "sym").unwrap();
    perturbation_check(&h, &big, d, &fs_quadrature(r, d + 6).unwrap())
        .unwrap()
        .worst_ratio
}

#[test]
fn perturbed_gram_deviation_is_linear_and_k_independent() {
    let mut rng = common::rng(11);
    let eps = [1e-1, 1e-2, 1e-3];
    for (r, d) in [(2, 1), (2, 2)] {
        let rk = binomial(d + r - 1, r - 1);
        let dir = common::perturb(&linalg::identity(rk), 1.0, &mut rng) - linalg::identity(rk);
        let bound: f64 = eps
            .iter()
            .map(|&e| fiber_worst_ratio(r, d, &dir.scale(e)))
            .fold(0.0, f64::max);
        let mut ratios = vec![];
        for k in [4, 8, 16] {
            let spec = ModelSpec::p1(vec![1; r], k, d, 0);
            let devs: Vec<f64> = eps
                .iter()
                .map(|&e| {
                    perturbed_gram_deviation(&spec, &dir.scale(e), d + 6, VolumeMode::Product)
                        .unwrap()
                })
                .collect();
            let slope = loglog_slope(&eps, &devs);
            assert!((slope - 1.0).abs() <= 0.25, "r{r} d{d} k{k} slope {slope}");
            for (dv, e) in devs.iter().zip(&eps) {
                assert!(dv / e <= bound * (1.0 + 1e-6), "{} > {bound}", dv / e);
                ratios.push(dv / e);
            }
        }
        let (lo, hi) = ratios
            .iter()
            .fold((f64::MAX, 0.0f64), |(l, h), &v| (l.min(v), h.max(v)));
        assert!(hi / lo < 1.2, "ratios {ratios:?}");
    }
}

#[test]
fn product_and_induced_grams_differ_by_order_epsilon() {
    let mut rng = common::rng(5);
    let dir = common::perturb(&linalg::identity(3), 1.0, &mut rng) - linalg::identity(3);
    let (ruled, sample) = setup(vec![1, 1], 6, 2, 8);
    let model = ruled.sym_model().unwrap();
    let twist = ruled.spec.expected_curvature();
    let mut diffs = vec![];
    for eps in [1e-1, 1e-2] {
        let p = dir.scale(eps);
        let metric = SymMetric::Perturbed(model.as_ref(), &p);
        let field = metric.metric_field(&ruled.base).unwrap();
        let l = projbal::balance::l2_gram(&sample, &field, &ruled.base).unwrap();
        let hat = hat_sections(&sample, &ruled)
            .unwrap()
            .with_basis(&orthonormalizer(&l));
        let hhat = node_metric(&ruled, &metric).unwrap();
        let product: Vec<f64> = ruled
            .product_weights()
            .iter()
            .map(|w| w * ruled.product_factor())
            .collect();
        let induced = ruled_volume(&ruled, &metric, VolumeMode::Induced).unwrap();
        let a = pe_gram_with(&hat, &product, &hhat).unwrap();
        let b = pe_gram_with(&hat, &induced, &hhat).unwrap();
        let diff = linalg::max_abs(&(a - b)) / twist;
        assert!(diff <= 3.0 * eps, "{diff}");
        diffs.push(diff);
    }
    assert!(diffs[1] < diffs[0] / 5.0);
}

#[test]
fn almost_balanced_report_is_trace_free() {
    let mut rng = common::rng(2);
    let g = common::random_metric(&mut rng, 6, 3.0).into_matrix();
    let rep = almost_balanced_report(&g, 2, 2, 1.0, 5);
    assert!(rep.m.trace().norm() < 1e-13);
    assert!(linalg::max_skew(&rep.gram) <= 1e-13);
    assert_eq!(rep.c_target, c_closed_form(2, 2));
    assert!(common::rel_close(rep.d_normalized, rep.d_avg / 7.0, 1e-15));
}

#[test]
fn pipeline_from_reference_start_is_almost_balanced() {
    for d in [1, 2] {
        let run = almost_balanced_pipeline(
            &ModelSpec::p1(vec![1, 1], 12, d, 0),
            &PipelineOptions::default(),
        )
        .unwrap();
        assert!(run.balance.converged);
        assert!(run.report.defect() <= 1e-3);
        assert!((run.report.d_normalized / run.report.c_target - 1.0).abs() <= 1e-3);
    }
}

#[test]
fn identity_start_lands_on_another_balanced_metric_for_polystable_sym() {
    // Sym^2(O(1) ⊕ O(1)) ⊗ O(k) = O(k+2)^3 has a family of Hermitian-Einstein
    // metrics; the identity start balances to one not of the form Sym^2 h.
    let opts = PipelineOptions {
        start: RateStart::Identity,
        ..Default::default()
    };
    let run = almost_balanced_pipeline(&ModelSpec::p1(vec![1, 1], 8, 2, 0), &opts).unwrap();
    assert!(run.balance.converged);
    assert!(run.report.defect() > 0.1);
}

#[test]
fn rank_one_decay_is_at_roundoff() {
    let ks: Vec<usize> = (4..=12).collect();
    let rep = decay_probe(
        &ModelSpec::p1(vec![1], 0, 1, 0),
        &ks,
        &PipelineOptions::default(),
        4,
    )
    .unwrap();
    for row in &rep.rows {
        assert!(row.defect <= 1e-11, "{row:?}");
        assert!((row.d_normalized - 1.0).abs() < 1e-12);
    }
    let csv = rep.to_csv();
    assert!(csv.starts_with("k,N,D,Dnorm,opNormM,slope\n"));
    assert_eq!(csv.lines().count(), ks.len() + 1);
}

#[test]
fn decay_probe_rejects_bad_ranges() {
    let spec = ModelSpec::p1(vec![1], 0, 1, 0);
    let o = PipelineOptions::default();
    assert!(decay_probe(&spec, &[4, 3, 5, 6], &o, 2).is_err());
    assert!(decay_probe(&spec, &[4, 5], &o, 4).is_err());
}

#[test]
fn rank_one_pe_balancing_is_base_balancing() {
    let (ruled, sample) = setup(vec![1], 5, 1, 1);
    let hat = reference_orthonormal(&ruled, &sample);
    let pe = pe_balance_iterate(&hat, &ruled, &PeBalanceOptions::default()).unwrap();
    let base = balance_iterate(&sample, &ruled.base, &BalanceOptions::default()).unwrap();
    let moved = hat.coeffs.adjoint() * &base.gram * &hat.coeffs;
    assert!(pe.converged);
    assert!(scale_free_gram_distance(&moved, &pe.gram) < 1e-8);
}

#[test]
fn direct_balancing_on_the_ruled_surface() {
    let run = almost_balanced_pipeline(
        &ModelSpec::p1(vec![1, 1], 12, 1, 0),
        &PipelineOptions::default(),
    )
    .unwrap();
    let frozen = pe_balance_iterate(&run.hat, &run.ruled, &PeBalanceOptions::default()).unwrap();
    assert!(frozen.converged);
    assert!(frozen.definition_residual <= 1e-8);
    let proj = projectivized_node_metric(&run).unwrap();
    let dist = line_metric_distance(&proj, &frozen.node_metric).unwrap();
    assert!(dist <= 10.0 * run.report.defect().max(1e-13), "{dist}");
    let report = almost_balanced_report(
        &pe_gram_with(
            &run.hat.with_basis(&orthonormalizer(&frozen.gram)),
            &frozen.volume,
            &frozen.node_metric,
        )
        .unwrap(),
        2,
        1,
        1.0,
        12,
    );
    assert!(report.op_norm_m <= 1e-10 * run.hat.n as f64);

    let recomputed = pe_balance_iterate(
        &run.hat,
        &run.ruled,
        &PeBalanceOptions {
            volume: PeVolume::Recomputed,
            ..Default::default()
        },
    )
    .unwrap();
    assert!(recomputed.converged);
    let gap = line_metric_distance(&frozen.node_metric, &recomputed.node_metric).unwrap();
    assert!(gap <= 1e-6, "{gap}");
}
