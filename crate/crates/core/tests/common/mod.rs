#![allow(dead_code)]

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use projbal::herm::HermMetric;
use projbal::linalg::{self, CMat, C64};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_complex(rng: &mut ChaCha8Rng) -> C64 {
    Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
}

pub fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<C64> {
    (0..n).map(|_| random_complex(rng)).collect()
}

pub fn random_unitary(rng: &mut ChaCha8Rng, n: usize) -> CMat {
    let a = DMatrix::from_fn(n, n, |_, _| random_complex(rng));
    a.qr().q()
}

/// Random metric with spectrum in `[1, cond]`.
pub fn random_metric(rng: &mut ChaCha8Rng, n: usize, cond: f64) -> HermMetric {
    let u = random_unitary(rng, n);
    let mut spec: Vec<f64> = (0..n).map(|_| rng.random_range(1.0..cond)).collect();
    spec[0] = 1.0;
    if n > 1 {
        spec[n - 1] = cond;
    }
    let m = &u * linalg::real_diag(&spec) * u.adjoint();
    HermMetric::new(linalg::symmetrize(&m), "e").unwrap()
}

/// Random Hermitian trace-free direction with unit operator norm relative to `h0`.
pub fn perturb(h0: &CMat, eps: f64, rng: &mut ChaCha8Rng) -> CMat {
    let n = h0.nrows();
    let a = DMatrix::from_fn(n, n, |_, _| random_complex(rng));
    let mut x = linalg::symmetrize(&a);
    let tr = x.trace() / Complex64::new(n as f64, 0.0);
    for i in 0..n {
        x[(i, i)] -= tr;
    }
    let x = x.scale(eps / linalg::op_norm_hermitian(&x));
    let s = linalg::hermitian_sqrt(h0);
    linalg::symmetrize(&(&s * (linalg::identity(n) + x) * &s))
}

pub fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * b.abs().max(1e-300)
}
