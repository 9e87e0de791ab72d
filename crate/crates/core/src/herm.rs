//! Finite-dimensional Hermitian algebra: inner products, symmetric powers and
//! their monomial bases.
//!
//! Matrix convention: a metric is stored as the matrix `M` with
//! `<u, v> = v^† M u`, linear in the first slot and conjugate-linear in the
//! second, so `M[(i, j)] = <e_j, e_i>`. For real metrics this coincides with
//! `<e_i, e_j>`.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::linalg::{self, c, CMat, C64};

/// Largest symmetric degree handled by the permanent evaluation.
pub const MAX_SYM_DEGREE: usize = 6;

#[derive(Debug, Clone, PartialEq)]
pub struct HermMetric {
    matrix: CMat,
    basis: String,
}

impl HermMetric {
    /// Validates Hermitian symmetry (entrywise 1e-14, relative to the largest
    /// entry when that exceeds one) and positive definiteness.
    pub fn new(matrix: CMat, basis: impl Into<String>) -> Result<Self> {
        if matrix.nrows() != matrix.ncols() {
            return Err(Error::DimensionMismatch {
                expected: matrix.nrows(),
                got: matrix.ncols(),
            });
        }
        if matrix.nrows() == 0 {
            return Err(Error::InvalidArgument("empty metric".into()));
        }
        let scale = linalg::max_abs(&matrix).max(1.0);
        let skew = linalg::max_skew(&matrix);
        if skew > 1e-14 * scale {
            return Err(Error::NotHermitian { skew });
        }
        let matrix = linalg::symmetrize(&matrix);
        linalg::cholesky_lower(&matrix)?;
        Ok(Self {
            matrix,
            basis: basis.into(),
        })
    }

    pub fn identity(dim: usize, basis: impl Into<String>) -> Self {
        Self {
            matrix: linalg::identity(dim),
            basis: basis.into(),
        }
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &CMat {
        &self.matrix
    }

    pub fn basis(&self) -> &str {
        &self.basis
    }

    pub fn into_matrix(self) -> CMat {
        self.matrix
    }

    /// `<u, v>`.
    pub fn inner(&self, u: &[C64], v: &[C64]) -> C64 {
        let n = self.dim();
        let mut acc = c(0.0, 0.0);
        for i in 0..n {
            let mut row = c(0.0, 0.0);
            for j in 0..n {
                row += self.matrix[(i, j)] * u[j];
            }
            acc += v[i].conj() * row;
        }
        acc
    }

    pub fn norm_sq(&self, u: &[C64]) -> f64 {
        self.inner(u, u).re
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            matrix: self.matrix.scale(s),
            basis: self.basis.clone(),
        }
    }

    /// Matrix `D` of the dual metric on covectors: `|f|^2 = f^† D f` where
    /// `f(v) = Σ f_i v_i`.
    pub fn dual_matrix(&self) -> CMat {
        let inv = linalg::hermitian_inv(&self.matrix).expect("metric is positive definite");
        inv.map(|z| z.conj())
    }

    pub fn dual_norm_sq(&self, f: &[C64]) -> f64 {
        linalg::quad_form(&self.dual_matrix(), f)
    }

    /// `L` with `L L^† = conj(M)`: covectors `f = L g` have `|f| = |g|`.
    pub fn covector_frame(&self) -> CMat {
        let conj = self.matrix.map(|z| z.conj());
        linalg::cholesky_lower(&conj).expect("metric is positive definite")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct MultiIndex {
    parts: Vec<usize>,
}

impl MultiIndex {
    pub fn new(parts: Vec<usize>) -> Self {
        Self { parts }
    }

    pub fn parts(&self) -> &[usize] {
        &self.parts
    }

    pub fn degree(&self) -> usize {
        self.parts.iter().sum()
    }

    pub fn len(&self) -> usize {
        self.parts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parts.is_empty()
    }

    /// `i_1! ⋯ i_r!`
    pub fn factorial(&self) -> f64 {
        self.parts.iter().map(|&p| factorial(p)).product()
    }

    /// Variable indices repeated by multiplicity, e.g. `(2,0,1) -> [0,0,2]`.
    pub fn multiset(&self) -> Vec<usize> {
        self.parts
            .iter()
            .enumerate()
            .flat_map(|(i, &p)| std::iter::repeat_n(i, p))
            .collect()
    }

    /// `f^I = Π f_α^{i_α}`.
    pub fn monomial(&self, f: &[C64]) -> C64 {
        let mut acc = c(1.0, 0.0);
        for (z, &p) in f.iter().zip(&self.parts) {
            for _ in 0..p {
                acc *= z;
            }
        }
        acc
    }

    /// `⟨a, I⟩`.
    pub fn weighted(&self, a: &[i64]) -> i64 {
        self.parts.iter().zip(a).map(|(&p, &w)| p as i64 * w).sum()
    }
}

pub fn factorial(n: usize) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

pub fn binomial(n: usize, k: usize) -> usize {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
    }
    acc as usize
}

/// All degree-`d` multi-indices in `r` variables, graded-lexicographic
/// (descending in the first exponent, then the second, ...).
#[derive(Debug, Clone)]
pub struct SymBasisMap {
    r: usize,
    d: usize,
    indices: Vec<MultiIndex>,
    norm_constants: Vec<f64>,
    lookup: HashMap<MultiIndex, usize>,
}

impl SymBasisMap {
    pub fn new(r: usize, d: usize) -> Result<Self> {
        if r == 0 {
            return Err(Error::InvalidArgument("rank must be positive".into()));
        }
        let mut indices = Vec::with_capacity(binomial(d + r - 1, r - 1));
        let mut current = vec![0usize; r];
        enumerate(&mut current, 0, d, &mut indices);
        let df = factorial(d);
        let norm_constants = indices
            .iter()
            .map(|i| (df / i.factorial()).sqrt())
            .collect();
        let lookup = indices
            .iter()
            .enumerate()
            .map(|(k, i)| (i.clone(), k))
            .collect();
        Ok(Self {
            r,
            d,
            indices,
            norm_constants,
            lookup,
        })
    }

    pub fn r(&self) -> usize {
        self.r
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn indices(&self) -> &[MultiIndex] {
        &self.indices
    }

    pub fn norm_constants(&self) -> &[f64] {
        &self.norm_constants
    }

    pub fn position(&self, idx: &MultiIndex) -> Option<usize> {
        self.lookup.get(idx).copied()
    }

    /// Values `f^I` for every basis index.
    pub fn monomials(&self, f: &[C64]) -> Vec<C64> {
        self.indices.iter().map(|i| i.monomial(f)).collect()
    }
}

fn enumerate(current: &mut Vec<usize>, pos: usize, remaining: usize, out: &mut Vec<MultiIndex>) {
    let r = current.len();
    if pos == r - 1 {
        current[pos] = remaining;
        out.push(MultiIndex::new(current.clone()));
        return;
    }
    for take in (0..=remaining).rev() {
        current[pos] = take;
        enumerate(current, pos + 1, remaining - take, out);
    }
    current[pos] = 0;
}

pub fn orthonormal_sym_basis(r: usize, d: usize) -> Result<SymBasisMap> {
    if d == 0 {
        return Err(Error::InvalidArgument("degree must be positive".into()));
    }
    SymBasisMap::new(r, d)
}

/// Permanent by the permutation sum (Heap's algorithm).
pub fn permanent_naive(m: &CMat) -> C64 {
    let n = m.nrows();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut total = c(0.0, 0.0);
    let mut stack = vec![0usize; n];
    let term = |p: &[usize]| -> C64 {
        p.iter()
            .enumerate()
            .fold(c(1.0, 0.0), |acc, (i, &j)| acc * m[(i, j)])
    };
    total += term(&perm);
    let mut i = 0;
    while i < n {
        if stack[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(stack[i], i);
            }
            total += term(&perm);
            stack[i] += 1;
            i = 0;
        } else {
            stack[i] = 0;
            i += 1;
        }
    }
    total
}

/// Ryser's inclusion-exclusion formula with Gray-code updates.
pub fn permanent(m: &CMat) -> C64 {
    let n = m.nrows();
    if n == 0 {
        return c(1.0, 0.0);
    }
    let mut row_sums = vec![c(0.0, 0.0); n];
    let mut total = c(0.0, 0.0);
    let mut gray_prev = 0usize;
    for k in 1..(1usize << n) {
        let gray = k ^ (k >> 1);
        let flipped = (gray ^ gray_prev).trailing_zeros() as usize;
        let added = gray & (1 << flipped) != 0;
        for (i, s) in row_sums.iter_mut().enumerate() {
            if added {
                *s += m[(i, flipped)];
            } else {
                *s -= m[(i, flipped)];
            }
        }
        let prod = row_sums.iter().fold(c(1.0, 0.0), |a, &b| a * b);
        let sign = if (n - gray.count_ones() as usize) % 2 == 0 {
            1.0
        } else {
            -1.0
        };
        total += prod * sign;
        gray_prev = gray;
    }
    total
}

fn check_degree(d: usize) -> Result<()> {
    match d {
        0 => Err(Error::InvalidArgument("degenerate degree 0".into())),
        d if d > MAX_SYM_DEGREE => Err(Error::DegreeOutOfRange(d)),
        _ => Ok(()),
    }
}

fn sym_entry(h: &CMat, rows: &[usize], cols: &[usize], perm: fn(&CMat) -> C64) -> C64 {
    let d = rows.len();
    let sub = CMat::from_fn(d, d, |a, b| h[(rows[a], cols[b])]);
    perm(&sub)
}

fn sym_power_with(h: &HermMetric, d: usize, perm: fn(&CMat) -> C64) -> Result<HermMetric> {
    check_degree(d)?;
    let basis = SymBasisMap::new(h.dim(), d)?;
    let sets: Vec<Vec<usize>> = basis.indices().iter().map(|i| i.multiset()).collect();
    let n = basis.len();
    let inv_df = 1.0 / factorial(d);
    let mut m = CMat::zeros(n, n);
    for a in 0..n {
        for b in a..n {
            let v = sym_entry(h.matrix(), &sets[a], &sets[b], perm) * inv_df;
            m[(a, b)] = v;
            m[(b, a)] = v.conj();
        }
    }
    HermMetric::new(m, format!("sym{}({})", d, h.basis()))
}

/// Gram matrix of the monomials `e^I` under the induced metric on `Sym^d V`.
pub fn sym_power_metric(h: &HermMetric, d: usize) -> Result<HermMetric> {
    sym_power_with(h, d, permanent)
}

/// Same as [`sym_power_metric`] through the permutation sum.
pub fn sym_power_metric_naive(h: &HermMetric, d: usize) -> Result<HermMetric> {
    sym_power_with(h, d, permanent_naive)
}

/// Matrix of the map induced on `Sym^d V` (monomial basis) by a linear map
/// `u` of `V`.
pub fn sym_power_map(u: &CMat, d: usize) -> Result<CMat> {
    check_degree(d)?;
    let r = u.nrows();
    let basis = SymBasisMap::new(r, d)?;
    let n = basis.len();
    let mut out = CMat::zeros(n, n);
    for (col, idx) in basis.indices().iter().enumerate() {
        // expand Π_m (Σ_i u[i, j_m] e_i)
        let mut poly: HashMap<Vec<usize>, C64> = HashMap::new();
        poly.insert(vec![0; r], c(1.0, 0.0));
        for j in idx.multiset() {
            let mut next: HashMap<Vec<usize>, C64> = HashMap::new();
            for (exp, coef) in &poly {
                for i in 0..r {
                    let a = u[(i, j)];
                    if a == c(0.0, 0.0) {
                        continue;
                    }
                    let mut e = exp.clone();
                    e[i] += 1;
                    *next.entry(e).or_insert(c(0.0, 0.0)) += coef * a;
                }
            }
            poly = next;
        }
        for (exp, coef) in poly {
            let row = basis
                .position(&MultiIndex::new(exp))
                .expect("degree preserved");
            out[(row, col)] += coef;
        }
    }
    Ok(out)
}

/// Operator norm of `H0^{-1/2} (H - H0) H0^{-1/2}`.
pub fn metric_distance(h: &HermMetric, h0: &HermMetric) -> Result<f64> {
    if h.dim() != h0.dim() {
        return Err(Error::DimensionMismatch {
            expected: h0.dim(),
            got: h.dim(),
        });
    }
    if h.basis() != h0.basis() {
        return Err(Error::BasisMismatch {
            left: h.basis().to_string(),
            right: h0.basis().to_string(),
        });
    }
    Ok(relative_distance(h.matrix(), h0.matrix()))
}

pub(crate) fn relative_distance(h: &CMat, h0: &CMat) -> f64 {
    let w = linalg::hermitian_inv_sqrt(h0);
    linalg::op_norm_hermitian(&(&w * (h - h0) * &w))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b}");
    }

    #[test]
    fn identity_square_gives_half_middle() {
        let h = HermMetric::identity(2, "e");
        let s = sym_power_metric(&h, 2).unwrap();
        let expect = [1.0, 0.5, 1.0];
        for i in 0..3 {
            for j in 0..3 {
                let e = if i == j { expect[i] } else { 0.0 };
                assert_close(s.matrix()[(i, j)].re, e, 1e-15);
                assert_close(s.matrix()[(i, j)].im, 0.0, 1e-15);
            }
        }
    }

    #[test]
    fn degree_one_is_identity_map() {
        let m = CMat::from_row_slice(2, 2, &[c(2.0, 0.0), c(0.3, 0.1), c(0.3, -0.1), c(1.5, 0.0)]);
        let h = HermMetric::new(m.clone(), "e").unwrap();
        let s = sym_power_metric(&h, 1).unwrap();
        assert!(linalg::max_abs(&(s.matrix() - m)) < 1e-15);
    }

    #[test]
    fn homogeneous_in_scalar() {
        let m = CMat::from_row_slice(2, 2, &[c(2.0, 0.0), c(0.3, 0.1), c(0.3, -0.1), c(1.5, 0.0)]);
        let h = HermMetric::new(m, "e").unwrap();
        let a = sym_power_metric(&h.scaled(1.7), 3).unwrap();
        let b = sym_power_metric(&h, 3).unwrap();
        let diff = a.matrix() - b.matrix().scale(1.7f64.powi(3));
        assert!(linalg::max_abs(&diff) < 1e-13);
    }

    #[test]
    fn rejects_zero_and_large_degree() {
        let h = HermMetric::identity(2, "e");
        assert!(matches!(
            sym_power_metric(&h, 0),
            Err(Error::InvalidArgument(_))
        ));
        assert!(matches!(
            sym_power_metric(&h, 7),
            Err(Error::DegreeOutOfRange(7))
        ));
    }

    #[test]
    fn rejects_non_hermitian_and_indefinite() {
        let m = CMat::from_row_slice(2, 2, &[c(1.0, 0.0), c(0.5, 0.0), c(0.4, 0.0), c(1.0, 0.0)]);
        assert!(matches!(
            HermMetric::new(m, "e"),
            Err(Error::NotHermitian { .. })
        ));
        let m = linalg::real_diag(&[1.0, 0.0]);
        assert!(matches!(
            HermMetric::new(m, "e"),
            Err(Error::NotPositiveDefinite { .. })
        ));
    }

    #[test]
    fn basis_constants() {
        let b = orthonormal_sym_basis(2, 2).unwrap();
        let s2 = 2f64.sqrt();
        assert_eq!(b.len(), 3);
        for (got, want) in b.norm_constants().iter().zip([1.0, s2, 1.0]) {
            assert_close(*got, want, 1e-15);
        }
        let b = orthonormal_sym_basis(1, 5).unwrap();
        assert_eq!(b.indices(), &[MultiIndex::new(vec![5])]);
        assert_eq!(b.norm_constants(), &[1.0]);
    }

    #[test]
    fn basis_r3_d2_order_and_constants() {
        // d!/(i1! i2! i3!) evaluated by hand for the six indices in order
        let b = orthonormal_sym_basis(3, 2).unwrap();
        let parts: Vec<Vec<usize>> = b.indices().iter().map(|i| i.parts().to_vec()).collect();
        assert_eq!(
            parts,
            vec![
                vec![2, 0, 0],
                vec![1, 1, 0],
                vec![1, 0, 1],
                vec![0, 2, 0],
                vec![0, 1, 1],
                vec![0, 0, 2]
            ]
        );
        let s2 = 2f64.sqrt();
        for (got, want) in b.norm_constants().iter().zip([1.0, s2, s2, 1.0, s2, 1.0]) {
            assert_close(*got, want, 1e-15);
        }
    }

    #[test]
    fn count_matches_binomial() {
        for r in 1..=5 {
            for d in 1..=6 {
                assert_eq!(
                    SymBasisMap::new(r, d).unwrap().len(),
                    binomial(d + r - 1, r - 1)
                );
            }
        }
    }

    #[test]
    fn distance_examples() {
        let h0 = HermMetric::identity(2, "e");
        assert_eq!(metric_distance(&h0, &h0).unwrap(), 0.0);
        let h = h0.scaled(1.25);
        assert_close(metric_distance(&h, &h0).unwrap(), 0.25, 1e-15);
        let h = HermMetric::new(linalg::real_diag(&[1.1, 0.9]), "e").unwrap();
        assert_close(metric_distance(&h, &h0).unwrap(), 0.1, 1e-15);
        let other = HermMetric::identity(3, "e");
        assert!(matches!(
            metric_distance(&other, &h0),
            Err(Error::DimensionMismatch { .. })
        ));
        let relabeled = HermMetric::identity(2, "f");
        assert!(matches!(
            metric_distance(&relabeled, &h0),
            Err(Error::BasisMismatch { .. })
        ));
    }

    #[test]
    fn ryser_matches_permutation_sum() {
        let m = CMat::from_fn(5, 5, |i, j| {
            c((i * 3 + j) as f64 * 0.1, (i as f64 - j as f64) * 0.2)
        });
        let a = permanent(&m);
        let b = permanent_naive(&m);
        assert!((a - b).norm() < 1e-13 * b.norm().max(1.0));
    }

    #[test]
    fn dual_norm_matches_sup() {
        let m = CMat::from_row_slice(2, 2, &[c(2.0, 0.0), c(0.3, 0.4), c(0.3, -0.4), c(1.0, 0.0)]);
        let h = HermMetric::new(m, "e").unwrap();
        let f = [c(0.7, -0.2), c(-0.1, 1.3)];
        // supremum of |f(v)|^2/|v|^2 is attained at v = M^{-1} conj(f)
        let minv = linalg::hermitian_inv(h.matrix()).unwrap();
        let fc = nalgebra::DVector::from_vec(vec![f[0].conj(), f[1].conj()]);
        let v = &minv * fc;
        let fv = f[0] * v[0] + f[1] * v[1];
        let sup = fv.norm_sqr() / h.norm_sq(v.as_slice());
        assert_close(h.dual_norm_sq(&f), sup, 1e-13);
        let frame = h.covector_frame();
        let g = [c(0.6, 0.0), c(0.0, 0.8)];
        let fg: Vec<C64> = (0..2)
            .map(|i| frame[(i, 0)] * g[0] + frame[(i, 1)] * g[1])
            .collect();
        assert_close(h.dual_norm_sq(&fg), 1.0, 1e-14);
    }
}
