//! Gauss-Jacobi rules on [0, 1] with weight (1 - t)^alpha, by Golub-Welsch.

use nalgebra::{DMatrix, SymmetricEigen};

fn ln_gamma_int(n: usize) -> f64 {
    (1..n).map(|k| (k as f64).ln()).sum()
}

/// Nodes and weights integrating `p(t) (1-t)^alpha` exactly on [0, 1] for
/// polynomials of degree `< 2n`.
pub fn gauss_jacobi_unit(n: usize, alpha: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n > 0);
    let a = alpha as f64;
    let b = 0.0f64;
    let mut jac = DMatrix::<f64>::zeros(n, n);
    for k in 0..n {
        let kf = k as f64;
        let s = 2.0 * kf + a + b;
        let diag = if k == 0 {
            (b - a) / (a + b + 2.0)
        } else {
            (b * b - a * a) / (s * (s + 2.0))
        };
        jac[(k, k)] = diag;
        if k + 1 < n {
            let k1 = kf + 1.0;
            let s1 = 2.0 * k1 + a + b;
            let num = 4.0 * k1 * (k1 + a) * (k1 + b) * (k1 + a + b);
            let den = s1 * s1 * (s1 + 1.0) * (s1 - 1.0);
            let off = (num / den).sqrt();
            jac[(k, k + 1)] = off;
            jac[(k + 1, k)] = off;
        }
    }
    // mu0 = 2^{a+b+1} Γ(a+1)Γ(b+1)/Γ(a+b+2), with b = 0
    let ln_mu0 =
        (a + 1.0) * std::f64::consts::LN_2 + ln_gamma_int(alpha + 1) - ln_gamma_int(alpha + 2);
    let mu0 = ln_mu0.exp();
    let eig = SymmetricEigen::new(jac);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| {
            let x = eig.eigenvalues[i];
            let v0 = eig.eigenvectors[(0, i)];
            (
                (x + 1.0) / 2.0,
                mu0 * v0 * v0 * 0.5f64.powi(alpha as i32 + 1),
            )
        })
        .collect();
    pairs.sort_by(|p, q| p.0.total_cmp(&q.0));
    pairs.into_iter().unzip()
}

pub fn gauss_legendre_unit(n: usize) -> (Vec<f64>, Vec<f64>) {
    gauss_jacobi_unit(n, 0)
}
