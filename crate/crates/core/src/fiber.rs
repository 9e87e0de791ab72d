//! Geometry of one fiber `P(V^*)`: sections of `O(d)` from `Sym^d V`, the
//! metrics they inherit, Fubini-Study quadrature and the universal constant
//! relating fiber integrals to the symmetric-power inner product.
//!
//! Volume normalization: the Fubini-Study form is taken with the factor
//! `i/2`, so `P^{r-1}` has volume `π^{r-1}/(r-1)!`.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::gauss::gauss_jacobi_unit;
use crate::herm::{factorial, HermMetric, SymBasisMap};
use crate::linalg::{self, c, CMat, C64};

/// A nonzero covector `f ∈ V^*` standing for the point `[f]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FiberPoint {
    covector: Vec<C64>,
}

impl FiberPoint {
    pub fn new(covector: Vec<C64>) -> Result<Self> {
        if covector.iter().all(|z| z.norm() == 0.0) {
            return Err(Error::InvalidArgument("fiber covector is zero".into()));
        }
        Ok(Self { covector })
    }

    pub fn covector(&self) -> &[C64] {
        &self.covector
    }

    pub fn rank(&self) -> usize {
        self.covector.len()
    }

    pub fn scaled(&self, lambda: C64) -> Self {
        Self {
            covector: self.covector.iter().map(|z| z * lambda).collect(),
        }
    }

    pub fn transformed(&self, frame: &CMat) -> Self {
        let r = self.rank();
        let covector = (0..r)
            .map(|i| (0..r).map(|j| frame[(i, j)] * self.covector[j]).sum())
            .collect();
        Self { covector }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QuadratureScheme {
    /// Gauss-Jacobi on the simplex of `|z_a|^2` times uniform phases.
    Product,
    /// Seeded uniform samples on the unit sphere.
    MonteCarlo,
}

impl std::fmt::Display for QuadratureScheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Product => "product",
            Self::MonteCarlo => "monte-carlo",
        })
    }
}

impl FromStr for QuadratureScheme {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "product" => Ok(Self::Product),
            "monte-carlo" => Ok(Self::MonteCarlo),
            other => Err(Error::Parse(format!("unknown quadrature scheme `{other}`"))),
        }
    }
}

/// Weighted points on `P^{r-1}` integrating against `ω_FS^{r-1}/(r-1)!`.
#[derive(Debug, Clone)]
pub struct QuadratureRule {
    pub r: usize,
    pub level: usize,
    pub seed: Option<u64>,
    pub scheme: QuadratureScheme,
    pub points: Vec<FiberPoint>,
    pub weights: Vec<f64>,
    /// Moments `z^I \bar z^J / |z|^{2d}` are exact for `d <= target_degree`.
    pub target_degree: usize,
    pub total_mass: f64,
}

impl QuadratureRule {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Absolute accuracy expected of normalized moments.
    pub fn tolerance(&self) -> f64 {
        match self.scheme {
            QuadratureScheme::Product => 1e-11,
            QuadratureScheme::MonteCarlo => 3.0 / (self.len() as f64).sqrt(),
        }
    }

    pub fn integrate(&self, f: impl Fn(&FiberPoint) -> f64 + Sync) -> f64 {
        linalg::chunked_sum(
            self.len(),
            || 0.0,
            |acc, i| Ok(acc + self.weights[i] * f(&self.points[i])),
            |a, b| a + b,
        )
        .expect("infallible")
    }

    /// Text form: a header of `key value` lines followed by one row per point,
    /// `w re(f_1) im(f_1) ... re(f_r) im(f_r)`, 17 significant digits.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "# projbal fs-quadrature").unwrap();
        writeln!(out, "r {}", self.r).unwrap();
        writeln!(out, "level {}", self.level).unwrap();
        match self.seed {
            Some(s) => writeln!(out, "seed {s}").unwrap(),
            None => writeln!(out, "seed none").unwrap(),
        }
        writeln!(out, "target_degree {}", self.target_degree).unwrap();
        writeln!(out, "scheme {}", self.scheme).unwrap();
        writeln!(out, "points {}", self.len()).unwrap();
        for (p, w) in self.points.iter().zip(&self.weights) {
            write!(out, "{}", fmt17(*w)).unwrap();
            for z in p.covector() {
                write!(out, " {} {}", fmt17(z.re), fmt17(z.im)).unwrap();
            }
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .filter(|l| !l.starts_with('#') && !l.trim().is_empty());
        let mut header = |key: &str| -> Result<String> {
            let line = lines
                .next()
                .ok_or_else(|| Error::Parse(format!("missing `{key}`")))?;
            let (k, v) = line
                .split_once(' ')
                .ok_or_else(|| Error::Parse(format!("malformed header line `{line}`")))?;
            if k != key {
                return Err(Error::Parse(format!("expected `{key}`, found `{k}`")));
            }
            Ok(v.trim().to_string())
        };
        let r: usize = parse_num(&header("r")?)?;
        let level: usize = parse_num(&header("level")?)?;
        let seed = match header("seed")?.as_str() {
            "none" => None,
            s => Some(parse_num(s)?),
        };
        let target_degree: usize = parse_num(&header("target_degree")?)?;
        let scheme: QuadratureScheme = header("scheme")?.parse()?;
        let count: usize = parse_num(&header("points")?)?;
        let mut points = Vec::with_capacity(count);
        let mut weights = Vec::with_capacity(count);
        for line in lines {
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(parse_num)
                .collect::<Result<_>>()?;
            if vals.len() != 1 + 2 * r {
                return Err(Error::Parse(format!(
                    "row has {} fields, expected {}",
                    vals.len(),
                    1 + 2 * r
                )));
            }
            weights.push(vals[0]);
            let cov = (0..r)
                .map(|a| c(vals[1 + 2 * a], vals[2 + 2 * a]))
                .collect();
            points.push(FiberPoint::new(cov)?);
        }
        if points.len() != count {
            return Err(Error::Parse(format!(
                "expected {count} rows, found {}",
                points.len()
            )));
        }
        let total_mass = weights.iter().sum();
        Ok(Self {
            r,
            level,
            seed,
            scheme,
            points,
            weights,
            target_degree,
            total_mass,
        })
    }
}

pub(crate) fn fmt17(x: f64) -> String {
    format!("{x:.16e}")
}

fn parse_num<T: FromStr>(s: &str) -> Result<T> {
    s.parse()
        .map_err(|_| Error::Parse(format!("bad number `{s}`")))
}

/// `π^{r-1}/(r-1)!`
pub fn fiber_volume(r: usize) -> f64 {
    PI.powi(r as i32 - 1) / factorial(r - 1)
}

/// Deterministic product rule; `level` Gauss-Jacobi nodes per simplex axis
/// and `level + 1` phases per free angle. Exact through degree `level`.
pub fn fs_quadrature(r: usize, level: usize) -> Result<QuadratureRule> {
    if r == 0 {
        return Err(Error::InvalidArgument("rank must be positive".into()));
    }
    if level == 0 {
        return Err(Error::InvalidArgument(
            "quadrature level must be positive".into(),
        ));
    }
    let mass = fiber_volume(r);
    if r == 1 {
        return Ok(QuadratureRule {
            r,
            level,
            seed: None,
            scheme: QuadratureScheme::Product,
            points: vec![FiberPoint::new(vec![c(1.0, 0.0)])?],
            weights: vec![1.0],
            target_degree: usize::MAX,
            total_mass: 1.0,
        });
    }
    let axes: Vec<(Vec<f64>, Vec<f64>)> = (1..r)
        .map(|j| gauss_jacobi_unit(level, r - 1 - j))
        .collect();
    let phases = level + 1;
    let simplex_norm = factorial(r - 1);
    let phase_weight = 1.0 / (phases as f64).powi(r as i32 - 1);

    let mut points = Vec::new();
    let mut weights = Vec::new();
    let mut node = vec![0usize; r - 1];
    loop {
        let mut t = vec![0.0; r];
        let mut rest = 1.0;
        let mut w = simplex_norm;
        for j in 0..r - 1 {
            let (x, wx) = (&axes[j].0[node[j]], &axes[j].1[node[j]]);
            t[j] = rest * x;
            rest *= 1.0 - x;
            w *= wx;
        }
        t[r - 1] = rest;
        let mut angle = vec![0usize; r - 1];
        loop {
            let cov: Vec<C64> = (0..r)
                .map(|a| {
                    let theta = if a < r - 1 {
                        2.0 * PI * angle[a] as f64 / phases as f64
                    } else {
                        0.0
                    };
                    C64::from_polar(t[a].sqrt(), theta)
                })
                .collect();
            points.push(FiberPoint { covector: cov });
            weights.push(mass * w * phase_weight);
            if !advance(&mut angle, phases) {
                break;
            }
        }
        if !advance(&mut node, level) {
            break;
        }
    }
    Ok(QuadratureRule {
        r,
        level,
        seed: None,
        scheme: QuadratureScheme::Product,
        points,
        weights,
        target_degree: level,
        total_mass: mass,
    })
}

fn advance(counter: &mut [usize], base: usize) -> bool {
    for slot in counter.iter_mut() {
        *slot += 1;
        if *slot < base {
            return true;
        }
        *slot = 0;
    }
    false
}

/// Seeded uniform samples on `S^{2r-1}`, equal weights.
pub fn fs_quadrature_monte_carlo(r: usize, samples: usize, seed: u64) -> Result<QuadratureRule> {
    if r == 0 || samples == 0 {
        return Err(Error::InvalidArgument(
            "rank and sample count must be positive".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mass = fiber_volume(r);
    let mut points = Vec::with_capacity(samples);
    for _ in 0..samples {
        let mut v: Vec<C64> = (0..r)
            .map(|_| {
                c(
                    StandardNormal.sample(&mut rng),
                    StandardNormal.sample(&mut rng),
                )
            })
            .collect();
        let n = v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        v.iter_mut().for_each(|z| *z /= n);
        points.push(FiberPoint::new(v)?);
    }
    Ok(QuadratureRule {
        r,
        level: samples,
        seed: Some(seed),
        scheme: QuadratureScheme::MonteCarlo,
        points,
        weights: vec![mass / samples as f64; samples],
        target_degree: 0,
        total_mass: mass,
    })
}

/// `f^{⊗d}(s) = Σ_I s_I f^I`.
pub fn eval_section(basis: &SymBasisMap, s: &[C64], f: &FiberPoint) -> Result<C64> {
    check_len(basis.len(), s.len())?;
    check_len(basis.r(), f.rank())?;
    Ok(basis
        .indices()
        .iter()
        .zip(s)
        .map(|(i, si)| si * i.monomial(f.covector()))
        .sum())
}

fn check_len(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::DimensionMismatch { expected, got });
    }
    Ok(())
}

/// The metric `Ĥ` on `O(d)` induced by a metric `H` on `Sym^d V`.
#[derive(Debug, Clone)]
pub struct InducedMetric {
    basis: SymBasisMap,
    // lower factor of conj(H); |φ|^2 in the dual is |L^{-1} φ|^2
    factor: CMat,
}

impl InducedMetric {
    pub fn new(h: &HermMetric, d: usize) -> Result<Self> {
        let basis = SymBasisMap::new(degree_rank(h.dim(), d)?, d)?;
        let conj = h.matrix().map(|z| z.conj());
        Ok(Self {
            basis,
            factor: linalg::cholesky_lower(&conj)?,
        })
    }

    pub fn basis(&self) -> &SymBasisMap {
        &self.basis
    }

    /// `|f^d|^2` in the dual of `H`.
    pub fn frame_norm_sq(&self, f: &FiberPoint) -> f64 {
        let phi = crate::linalg::CVec::from_vec(self.basis.monomials(f.covector()));
        let y = self
            .factor
            .solve_lower_triangular(&phi)
            .expect("factor is nonsingular");
        y.norm_squared()
    }

    pub fn eval(&self, s: &[C64], t: &[C64], f: &FiberPoint) -> Result<C64> {
        let sv = eval_section(&self.basis, s, f)?;
        let tv = eval_section(&self.basis, t, f)?;
        Ok(sv * tv.conj() / self.frame_norm_sq(f))
    }
}

/// Rank `r` with `binomial(d + r - 1, r - 1) = dim`.
pub fn degree_rank(dim: usize, d: usize) -> Result<usize> {
    (1..=dim.max(1))
        .find(|&r| crate::herm::binomial(d + r - 1, r - 1) == dim)
        .ok_or_else(|| Error::InvalidArgument(format!("{dim} is not the rank of any Sym^{d}")))
}

/// `⟨ŝ, t̂⟩_Ĥ` at `[f]`.
pub fn eval_induced_metric(
    h: &HermMetric,
    d: usize,
    s: &[C64],
    t: &[C64],
    f: &FiberPoint,
) -> Result<C64> {
    InducedMetric::new(h, d)?.eval(s, t, f)
}

/// `d^{r-1} π^{r-1} d!/(d+r-1)!`
pub fn c_closed_form(r: usize, d: usize) -> f64 {
    (d as f64 * PI).powi(r as i32 - 1) * factorial(d) / factorial(d + r - 1)
}

/// Fiber integrals `d^{r-1} Σ_p w_p f^J \bar{f^I} / |f|_{h}^{2d}` with `f = L g`.
fn fiber_moments(
    frame: &CMat,
    dual_of_sym: Option<&CMat>,
    basis: &SymBasisMap,
    rule: &QuadratureRule,
) -> CMat {
    let d = basis.d();
    let r = basis.r();
    let n = basis.len();
    let scale = (d as f64).powi(r as i32 - 1);
    let acc = linalg::chunked_sum(
        rule.len(),
        || CMat::zeros(n, n),
        |mut acc, i| {
            let (p, w) = (&rule.points[i], rule.weights[i]);
            let f = p.transformed(frame);
            let phi = basis.monomials(f.covector());
            let denom = match dual_of_sym {
                Some(dual) => linalg::quad_form(dual, &phi),
                None => {
                    let g2: f64 = p.covector().iter().map(|z| z.norm_sqr()).sum();
                    g2.powi(d as i32)
                }
            };
            let wt = w * scale / denom;
            for a in 0..n {
                let ca = phi[a].conj() * wt;
                for b in 0..n {
                    acc[(a, b)] += ca * phi[b];
                }
            }
            Ok(acc)
        },
        |a, b| a + b,
    )
    .expect("infallible");
    linalg::symmetrize(&acc)
}

/// Empirical constant relating the fiber integral to `Sym^d` of the identity.
pub fn c_constant(r: usize, d: usize, rule: &QuadratureRule) -> Result<f64> {
    if rule.r != r {
        return Err(Error::DimensionMismatch {
            expected: r,
            got: rule.r,
        });
    }
    let basis = SymBasisMap::new(r, d)?;
    let moments = fiber_moments(&linalg::identity(r), None, &basis, rule);
    let sym: Vec<f64> = basis
        .indices()
        .iter()
        .map(|i| i.factorial() / factorial(d))
        .collect();
    let n = basis.len();
    let ratios: Vec<f64> = (0..n).map(|a| moments[(a, a)].re / sym[a]).collect();
    let mean = ratios.iter().sum::<f64>() / n as f64;
    let mut spread = 0.0f64;
    for a in 0..n {
        spread = spread.max((ratios[a] - mean).abs() / mean);
        for b in 0..n {
            if a != b {
                spread = spread.max(moments[(a, b)].norm() / (sym[a] * sym[b]).sqrt() / mean);
            }
        }
    }
    let limit = 10.0 * rule.tolerance();
    if spread > limit {
        return Err(Error::QuadratureUnderResolved { spread, limit });
    }
    Ok(mean)
}

/// Closed form once the rule reproduces it.
pub fn certified_c(r: usize, d: usize, rule: &QuadratureRule) -> Result<f64> {
    let empirical = c_constant(r, d, rule)?;
    let exact = c_closed_form(r, d);
    let spread = (empirical - exact).abs() / exact;
    let limit = 10.0 * rule.tolerance();
    if spread > limit {
        return Err(Error::QuadratureUnderResolved { spread, limit });
    }
    Ok(exact)
}

/// Fiber integral of the induced `O(d)` inner products, `≈ C_{r,d} Sym^d h`.
pub fn fiber_gram(h: &HermMetric, d: usize, rule: &QuadratureRule) -> Result<HermMetric> {
    c_constant(h.dim(), d, rule)?;
    let basis = SymBasisMap::new(h.dim(), d)?;
    let m = fiber_moments(&h.covector_frame(), None, &basis, rule);
    HermMetric::new(m, format!("sym{}({})", d, h.basis()))
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct PerturbationReport {
    /// `metric_distance(H, Sym^d h)`.
    pub epsilon: f64,
    /// `sup |LHS(v,w)| / (|v|_H |w|_H)`.
    pub lhs_norm: f64,
    /// `lhs_norm / epsilon` (zero when both vanish).
    pub worst_ratio: f64,
}

/// Measures `d^{r-1}∫⟨v̂,ŵ⟩_Ĥ ω_{FS,h}^{r-1}/(r-1)! - C_{r,d}⟨v,w⟩_H`
/// over unit vectors of `H`.
pub fn perturbation_check(
    h: &HermMetric,
    big_h: &HermMetric,
    d: usize,
    rule: &QuadratureRule,
) -> Result<PerturbationReport> {
    let reference = crate::herm::sym_power_metric(h, d)?;
    if big_h.dim() != reference.dim() {
        return Err(Error::DimensionMismatch {
            expected: reference.dim(),
            got: big_h.dim(),
        });
    }
    let epsilon = crate::herm::relative_distance(big_h.matrix(), reference.matrix());
    if epsilon >= 0.5 {
        return Err(Error::PerturbationTooLarge { epsilon });
    }
    let cst = certified_c(h.dim(), d, rule)?;
    let basis = SymBasisMap::new(h.dim(), d)?;
    let dual = big_h.dual_matrix();
    let integral = fiber_moments(&h.covector_frame(), Some(&dual), &basis, rule);
    let lhs = integral - big_h.matrix().scale(cst);
    let w = linalg::hermitian_inv_sqrt(big_h.matrix());
    let lhs_norm = linalg::op_norm_hermitian(&(&w * lhs * &w));
    let worst_ratio = if epsilon > 0.0 {
        lhs_norm / epsilon
    } else if lhs_norm < 1e-12 {
        0.0
    } else {
        f64::INFINITY
    };
    Ok(PerturbationReport {
        epsilon,
        lhs_norm,
        worst_ratio,
    })
}
