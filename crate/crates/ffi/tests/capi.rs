use std::ffi::CStr;
use std::path::PathBuf;
use std::process::Command;
use std::ptr;

use projbal_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(projbal_last_error_message()) }
        .to_string_lossy()
        .into_owned()
}

fn metric(data: &[f64], dim: usize) -> (ProjbalStatus, *mut ProjbalMetric) {
    let mut m = ptr::null_mut();
    let s = unsafe { projbal_metric_new(data.as_ptr(), dim, &mut m) };
    (s, m)
}

#[test]
fn metric_round_trip_and_errors() {
    // [[2, i], [-i, 3]]
    let data = [2.0, 0.0, 0.0, 1.0, 0.0, -1.0, 3.0, 0.0];
    let (s, m) = metric(&data, 2);
    assert_eq!(s, ProjbalStatus::Ok);
    assert_eq!(last_error(), "");
    unsafe {
        assert_eq!(projbal_metric_dim(m), 2);
        let mut out = [0.0; 8];
        assert_eq!(
            projbal_metric_copy(m, out.as_mut_ptr(), 8),
            ProjbalStatus::Ok
        );
        assert_eq!(out, data);
        assert_eq!(
            projbal_metric_copy(m, out.as_mut_ptr(), 7),
            ProjbalStatus::InvalidArgument
        );
        assert!(last_error().contains("need 8"));

        let mut s3 = ptr::null_mut();
        assert_eq!(projbal_sym_power_metric(m, 3, &mut s3), ProjbalStatus::Ok);
        assert_eq!(projbal_metric_dim(s3), 4);
        let mut bad = ptr::null_mut();
        assert_eq!(
            projbal_sym_power_metric(m, 9, &mut bad),
            ProjbalStatus::DegreeOutOfRange
        );
        assert!(bad.is_null());

        let mut dist = -1.0;
        assert_eq!(projbal_metric_distance(m, m, &mut dist), ProjbalStatus::Ok);
        assert!(dist.abs() < 1e-14);
        assert_eq!(
            projbal_metric_distance(m, s3, &mut dist),
            ProjbalStatus::DimensionMismatch
        );
        assert_eq!(
            projbal_metric_distance(ptr::null(), m, &mut dist),
            ProjbalStatus::NullPointer
        );
        assert_eq!(last_error(), "h is null");

        projbal_metric_free(s3);
        projbal_metric_free(m);
        projbal_metric_free(ptr::null_mut());
        assert_eq!(projbal_metric_dim(ptr::null()), 0);
    }

    let (s, m) = metric(&[1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0], 2);
    assert_eq!(s, ProjbalStatus::NotHermitian);
    assert!(m.is_null());
    let (s, _) = metric(&[1.0, 0.0, 2.0, 0.0, 2.0, 0.0, 1.0, 0.0], 2);
    assert_eq!(s, ProjbalStatus::NotPositiveDefinite);
    assert!(last_error().contains("positive definite"));
}

#[test]
fn fiber_constant_matches_closed_form() {
    unsafe {
        let mut q = ptr::null_mut();
        assert_eq!(projbal_fs_quadrature_new(2, 8, &mut q), ProjbalStatus::Ok);
        assert!(projbal_fs_quadrature_len(q) > 0);
        for d in 1..=3 {
            let mut got = 0.0;
            assert_eq!(projbal_c_constant(2, d, q, &mut got), ProjbalStatus::Ok);
            let want = projbal_c_closed_form(2, d);
            assert!((got - want).abs() < 1e-12 * want, "d={d}: {got} vs {want}");
        }
        assert!((projbal_c_closed_form(2, 1) - std::f64::consts::FRAC_PI_2).abs() < 1e-15);
        assert!(projbal_c_closed_form(0, 1).is_nan());
        projbal_fs_quadrature_free(q);

        let mut coarse = ptr::null_mut();
        assert_eq!(
            projbal_fs_quadrature_new(3, 1, &mut coarse),
            ProjbalStatus::Ok
        );
        let mut got = 0.0;
        assert_eq!(
            projbal_c_constant(3, 6, coarse, &mut got),
            ProjbalStatus::QuadratureUnderResolved
        );
        projbal_fs_quadrature_free(coarse);

        let mut mc = ptr::null_mut();
        assert_eq!(
            projbal_fs_quadrature_monte_carlo_new(2, 500, 7, &mut mc),
            ProjbalStatus::Ok
        );
        assert_eq!(projbal_fs_quadrature_len(mc), 500);
        projbal_fs_quadrature_free(mc);
    }
}

#[test]
fn balance_p1_converges_and_reports() {
    let degrees = [1i64, 1];
    unsafe {
        let mut b = ptr::null_mut();
        assert_eq!(
            projbal_balance_p1(degrees.as_ptr(), 2, 3, 1, 1e-10, 200, &mut b),
            ProjbalStatus::Ok
        );
        let n = projbal_balance_dim(b);
        assert_eq!(n, 10);
        assert!(projbal_balance_converged(b));
        assert!(projbal_balance_iterations(b) > 0);
        assert!(projbal_balance_residual(b) <= 1e-10);
        let mut gram = vec![0.0; 2 * n * n];
        assert_eq!(
            projbal_balance_copy_gram(b, gram.as_mut_ptr(), gram.len()),
            ProjbalStatus::Ok
        );
        for i in 0..n {
            for j in 0..n {
                let (a, t) = (2 * (i * n + j), 2 * (j * n + i));
                assert!(
                    (gram[a] - gram[t]).abs() < 1e-12 && (gram[a + 1] + gram[t + 1]).abs() < 1e-12
                );
            }
            assert!(gram[2 * (i * n + i)] > 0.0);
        }
        projbal_balance_free(b);

        let unstable = [0i64, 2];
        let mut b = ptr::null_mut();
        assert_eq!(
            projbal_balance_p1(unstable.as_ptr(), 2, 2, 1, 1e-15, 1, &mut b),
            ProjbalStatus::NotConverged
        );
        assert!(!b.is_null());
        assert!(!projbal_balance_converged(b));
        assert!(last_error().contains("did not converge"));
        projbal_balance_free(b);

        let mut b = ptr::null_mut();
        assert_eq!(
            projbal_balance_p1(degrees.as_ptr(), 2, 3, 1, 0.0, 10, &mut b),
            ProjbalStatus::InvalidArgument
        );
        assert!(b.is_null());
    }
}

#[test]
fn version_is_the_crate_version() {
    let v = unsafe { CStr::from_ptr(projbal_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

const C_PROGRAM: &str = r#"
#include "projbal.h"
#include <stdio.h>
#include <string.h>

int main(void) {
    double data[8] = {2, 0, 0, 1, 0, -1, 3, 0};
    ProjbalMetric *m = NULL, *s = NULL;
    if (projbal_metric_new(data, 2, &m) != PROJBAL_STATUS_OK) return 1;
    if (projbal_sym_power_metric(m, 2, &s) != PROJBAL_STATUS_OK) return 2;
    if (projbal_metric_dim(s) != 3) return 3;
    double dist = -1;
    if (projbal_metric_distance(m, s, &dist) != PROJBAL_STATUS_DIMENSION_MISMATCH) return 4;
    if (strlen(projbal_last_error_message()) == 0) return 5;
    projbal_metric_free(s);
    projbal_metric_free(m);
    int64_t a[2] = {1, 1};
    ProjbalBalance *b = NULL;
    if (projbal_balance_p1(a, 2, 2, 1, 1e-10, 200, &b) != PROJBAL_STATUS_OK) return 6;
    printf("%zu %d\n", projbal_balance_dim(b), (int)projbal_balance_converged(b));
    projbal_balance_free(b);
    return 0;
}
"#;

fn static_lib() -> Option<PathBuf> {
    let exe = std::env::current_exe().ok()?;
    let deps = exe.parent()?;
    let found = [deps, deps.parent()?]
        .into_iter()
        .map(|d| d.join("libprojbal_ffi.a"))
        .find(|p| p.exists());
    found
}

#[test]
fn header_compiles_and_links_from_c() {
    let header = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("include/projbal.h");
    let text = std::fs::read_to_string(&header).unwrap();
    assert!(text.contains("typedef struct ProjbalMetric ProjbalMetric;"));
    assert!(text.contains("PROJBAL_STATUS_NOT_CONVERGED = 8"));

    let lib = static_lib().expect("libprojbal_ffi.a next to the test binary");
    let work = std::env::temp_dir().join(format!("projbal-capi-{}", std::process::id()));
    std::fs::create_dir_all(&work).unwrap();
    let src = work.join("main.c");
    let bin = work.join("main");
    std::fs::write(&src, C_PROGRAM).unwrap();
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    let status = Command::new(cc)
        .args(["-std=c99", "-Wall", "-Werror", "-I"])
        .arg(header.parent().unwrap())
        .arg(&src)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .status()
        .unwrap();
    assert!(status.success());
    let out = Command::new(&bin).output().unwrap();
    assert!(out.status.success(), "exit {:?}", out.status.code());
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "8 1");
    std::fs::remove_dir_all(&work).ok();
}
