//! Dense Hermitian helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64;

use crate::error::{Error, Result};

pub type C64 = Complex64;
pub type CMat = DMatrix<C64>;
pub type CVec = DVector<C64>;

/// Eigenvalues below this are clamped before inversion.
pub const EIGEN_FLOOR: f64 = 1e-300;

/// Items per chunk in [`chunked_sum`].
const SUM_CHUNK: usize = 64;

/// Sums `add` over `0..n` in parallel with fixed chunk boundaries, so the
/// rounding does not depend on the number of threads.
pub fn chunked_sum<T: Send>(
    n: usize,
    zero: impl Fn() -> T + Sync,
    add: impl Fn(T, usize) -> Result<T> + Sync,
    combine: impl Fn(T, T) -> T,
) -> Result<T> {
    use rayon::prelude::*;
    let starts: Vec<usize> = (0..n).step_by(SUM_CHUNK).collect();
    let parts = starts
        .par_iter()
        .map(|&s| (s..(s + SUM_CHUNK).min(n)).try_fold(zero(), &add))
        .collect::<Result<Vec<T>>>()?;
    Ok(parts.into_iter().fold(zero(), combine))
}

pub fn c(re: f64, im: f64) -> C64 {
    C64::new(re, im)
}

pub fn max_skew(m: &CMat) -> f64 {
    let n = m.nrows();
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in i..n {
            worst = worst.max((m[(i, j)] - m[(j, i)].conj()).norm());
        }
    }
    worst
}

pub fn symmetrize(m: &CMat) -> CMat {
    (m + m.adjoint()).scale(0.5)
}

pub fn max_abs(m: &CMat) -> f64 {
    m.iter().fold(0.0f64, |a, z| a.max(z.norm()))
}

/// Hermitian eigendecomposition with ascending eigenvalues.
pub fn eigh(m: &CMat) -> (Vec<f64>, CMat) {
    let eig = SymmetricEigen::new(symmetrize(m));
    let n = m.nrows();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut vectors = CMat::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    (values, vectors)
}

pub fn eigvalsh(m: &CMat) -> Vec<f64> {
    eigh(m).0
}

/// Applies `f` to the spectrum of a Hermitian matrix.
pub fn hermitian_map(m: &CMat, f: impl Fn(f64) -> f64) -> CMat {
    let (vals, vecs) = eigh(m);
    let n = vals.len();
    let mut scaled = vecs.clone();
    for j in 0..n {
        let s = f(vals[j]);
        for i in 0..n {
            scaled[(i, j)] *= s;
        }
    }
    scaled * vecs.adjoint()
}

fn floored(x: f64) -> f64 {
    x.max(EIGEN_FLOOR)
}

pub fn hermitian_inv_sqrt(m: &CMat) -> CMat {
    hermitian_map(m, |x| 1.0 / floored(x).sqrt())
}

pub fn hermitian_sqrt(m: &CMat) -> CMat {
    hermitian_map(m, |x| x.max(0.0).sqrt())
}

fn checked_cholesky(m: &CMat) -> Result<nalgebra::Cholesky<C64, nalgebra::Dyn>> {
    let fail = || Error::NotPositiveDefinite {
        min_eig: eigvalsh(m).first().copied().unwrap_or(0.0),
    };
    let ch = symmetrize(m).cholesky().ok_or_else(fail)?;
    // complex sqrt of a negative pivot lands on the imaginary axis
    let l = ch.l_dirty();
    let ok = (0..m.nrows()).all(|i| {
        let p = l[(i, i)];
        p.re > 0.0 && p.im.abs() <= 1e-12 * p.re && p.re.is_finite()
    });
    if ok {
        Ok(ch)
    } else {
        Err(fail())
    }
}

/// Inverse of a positive definite Hermitian matrix.
pub fn hermitian_inv(m: &CMat) -> Result<CMat> {
    Ok(symmetrize(&checked_cholesky(m)?.inverse()))
}

/// Lower Cholesky factor `L` with `m = L L^†`.
pub fn cholesky_lower(m: &CMat) -> Result<CMat> {
    Ok(checked_cholesky(m)?.l())
}

/// Spectral norm of a Hermitian matrix.
pub fn op_norm_hermitian(m: &CMat) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    let v = eigvalsh(m);
    v[0].abs().max(v[v.len() - 1].abs())
}

pub fn condition_number(m: &CMat) -> f64 {
    let v = eigvalsh(m);
    match (v.first(), v.last()) {
        (Some(&lo), Some(&hi)) => hi / floored(lo),
        _ => 1.0,
    }
}

pub fn identity(n: usize) -> CMat {
    CMat::identity(n, n)
}

pub fn real_diag(d: &[f64]) -> CMat {
    let n = d.len();
    let mut m = CMat::zeros(n, n);
    for (i, &x) in d.iter().enumerate() {
        m[(i, i)] = c(x, 0.0);
    }
    m
}

/// Real part of `u^† m u`.
pub fn quad_form(m: &CMat, u: &[C64]) -> f64 {
    let n = u.len();
    let mut acc = C64::new(0.0, 0.0);
    for i in 0..n {
        let mut row = C64::new(0.0, 0.0);
        for j in 0..n {
            row += m[(i, j)] * u[j];
        }
        acc += u[i].conj() * row;
    }
    acc.re
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inverse_square_root_whitens() {
        let m = CMat::from_row_slice(2, 2, &[c(2.0, 0.0), c(0.5, 0.3), c(0.5, -0.3), c(1.0, 0.0)]);
        let w = hermitian_inv_sqrt(&m);
        let id = &w * &m * &w;
        assert!(max_abs(&(id - identity(2))) < 1e-14);
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let m = real_diag(&[1.0, -1.0]);
        assert!(matches!(
            cholesky_lower(&m),
            Err(Error::NotPositiveDefinite { .. })
        ));
    }

    #[test]
    fn eigenvalues_come_sorted() {
        let v = eigvalsh(&real_diag(&[3.0, -1.0, 2.0]));
        assert_eq!(v, vec![-1.0, 2.0, 3.0]);
    }
}
