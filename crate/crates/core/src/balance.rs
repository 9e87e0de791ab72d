//! L² structures, Bergman kernels and the fixed-point iteration for balanced
//! metrics on a bundle sampled over a mesh.
//!
//! Gram convention: `G[(i, j)] = <s_j, s_i> = Σ_p w_p s_i(p)^† H(p) s_j(p)`,
//! matching the metric matrices of [`crate::herm`]. With it the metric induced
//! by a Gram matrix is `H_G = (S G^{-1} S^†)^{-1}` pointwise.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, c, CMat};
use crate::model::{BaseMesh, MetricField, SectionSample};

pub type GramMatrix = CMat;

/// Endomorphism `B(p) = Σ_i s̃_i(p) s̃_i(p)^† H(p)` over an orthonormal basis.
#[derive(Debug, Clone)]
pub struct BergmanField {
    pub mats: Vec<CMat>,
}

impl BergmanField {
    /// `Σ_p w_p tr B(p)`.
    pub fn integrated_trace(&self, weights: &[f64]) -> f64 {
        self.mats
            .iter()
            .zip(weights)
            .map(|(b, w)| w * b.trace().re)
            .sum()
    }

    /// Real eigenvalues of each `B(p)` (self-adjoint for the pointwise metric).
    pub fn spectra(&self, metric: &MetricField) -> Vec<Vec<f64>> {
        self.mats
            .iter()
            .zip(&metric.mats)
            .map(|(b, h)| {
                let s = linalg::hermitian_sqrt(h);
                let si = linalg::hermitian_inv_sqrt(h);
                linalg::eigvalsh(&linalg::symmetrize(&(&s * b * &si)))
            })
            .collect()
    }
}

/// A section sample flattened against quadrature weights; the common input of
/// base and ruled balancing.
#[derive(Debug, Clone, Copy)]
pub struct Weighted<'a> {
    pub values: &'a [CMat],
    pub weights: &'a [f64],
}

impl<'a> Weighted<'a> {
    pub fn new(sample: &'a SectionSample, mesh: &'a BaseMesh) -> Result<Self> {
        if sample.mesh_size() != mesh.len() {
            return Err(Error::DimensionMismatch {
                expected: mesh.len(),
                got: sample.mesh_size(),
            });
        }
        Ok(Self {
            values: &sample.values,
            weights: &mesh.weights,
        })
    }

    pub fn n(&self) -> usize {
        self.values.first().map_or(0, |v| v.ncols())
    }

    pub fn fiber_rank(&self) -> usize {
        self.values.first().map_or(0, |v| v.nrows())
    }

    pub fn volume(&self) -> f64 {
        self.weights.iter().sum()
    }
}

pub(crate) fn gram_of(input: Weighted<'_>, metric: &[CMat]) -> Result<GramMatrix> {
    let n = input.n();
    if metric.len() != input.values.len() {
        return Err(Error::DimensionMismatch {
            expected: input.values.len(),
            got: metric.len(),
        });
    }
    let g = linalg::chunked_sum(
        input.values.len(),
        || CMat::zeros(n, n),
        |acc, p| {
            let (s, h, w) = (&input.values[p], &metric[p], input.weights[p]);
            if h.nrows() != s.nrows() {
                return Err(Error::DimensionMismatch {
                    expected: s.nrows(),
                    got: h.nrows(),
                });
            }
            if !h.iter().all(|z| z.re.is_finite() && z.im.is_finite()) {
                return Err(Error::SingularMetric { point: p });
            }
            Ok(acc + s.adjoint() * h * s * c(w, 0.0))
        },
        |a, b| a + b,
    )?;
    Ok(linalg::symmetrize(&g))
}

/// `G[(i, j)] = Σ_p w_p s_i(p)^† H(p) s_j(p)`.
pub fn l2_gram(
    sample: &SectionSample,
    metric: &MetricField,
    mesh: &BaseMesh,
) -> Result<GramMatrix> {
    gram_of(Weighted::new(sample, mesh)?, &metric.mats)
}

pub(crate) fn inverse_gram(g: &GramMatrix) -> Result<CMat> {
    let v = linalg::eigvalsh(g);
    let top = v.last().copied().unwrap_or(0.0);
    if v.is_empty() || v[0] <= 1e-14 * top.abs() {
        return Err(Error::RankDeficient {
            min_eig: v.first().copied().unwrap_or(0.0),
        });
    }
    linalg::hermitian_inv(g)
}

fn kernel_with(input: Weighted<'_>, metric: &[CMat], gram: &GramMatrix) -> Result<BergmanField> {
    let gi = inverse_gram(gram)?;
    let mats = input
        .values
        .par_iter()
        .zip(metric.par_iter())
        .map(|(s, h)| s * &gi * s.adjoint() * h)
        .collect();
    Ok(BergmanField { mats })
}

pub fn bergman_kernel(
    sample: &SectionSample,
    metric: &MetricField,
    mesh: &BaseMesh,
) -> Result<BergmanField> {
    let input = Weighted::new(sample, mesh)?;
    let gram = gram_of(input, &metric.mats)?;
    kernel_with(input, &metric.mats, &gram)
}

pub(crate) fn fs_metric_of(values: &[CMat], g: &GramMatrix) -> Result<Vec<CMat>> {
    let gi = inverse_gram(g)?;
    values
        .par_iter()
        .enumerate()
        .map(|(p, s)| {
            let q = linalg::symmetrize(&(s * &gi * s.adjoint()));
            linalg::hermitian_inv(&q).map_err(|_| Error::BasePoint { point: p })
        })
        .collect()
}

/// `H_G(p) = (S(p) G^{-1} S(p)^†)^{-1}`.
pub fn fs_metric_from_gram(g: &GramMatrix, sample: &SectionSample) -> Result<MetricField> {
    Ok(MetricField {
        mats: fs_metric_of(&sample.values, g)?,
    })
}

/// One evaluation of the fixed-point map together with the Bergman residual
/// of the metric `H_G`.
#[derive(Debug, Clone)]
pub struct TStep {
    pub image: GramMatrix,
    pub metric: Vec<CMat>,
    /// `sup_p |spec B(p) - N/(R V)|`.
    pub residual: f64,
}

pub(crate) fn t_step(input: Weighted<'_>, g: &GramMatrix) -> Result<TStep> {
    let n = input.n() as f64;
    let r = input.fiber_rank() as f64;
    let target = n / (r * input.volume());
    let metric = fs_metric_of(input.values, g)?;
    let l2 = gram_of(input, &metric)?;
    let li = inverse_gram(&l2)?;
    let residual = input
        .values
        .par_iter()
        .zip(metric.par_iter())
        .map(|(s, h)| {
            let x = s * &li * s.adjoint();
            let spec = if x.nrows() == 1 {
                vec![(x[(0, 0)] * h[(0, 0)]).re]
            } else {
                let root = linalg::hermitian_sqrt(h);
                linalg::eigvalsh(&linalg::symmetrize(&(&root * x * &root)))
            };
            spec.iter().fold(0.0f64, |m, e| m.max((e - target).abs()))
        })
        .reduce(|| 0.0, f64::max);
    Ok(TStep {
        image: l2.scale(target),
        metric,
        residual,
    })
}

/// `G' = N/(R V) · l2_gram(S, H_G)`.
pub fn t_map(g: &GramMatrix, sample: &SectionSample, mesh: &BaseMesh) -> Result<GramMatrix> {
    Ok(t_step(Weighted::new(sample, mesh)?, g)?.image)
}

/// Bergman residual of the metric induced by `g`.
pub fn gram_residual(g: &GramMatrix, sample: &SectionSample, mesh: &BaseMesh) -> Result<f64> {
    Ok(t_step(Weighted::new(sample, mesh)?, g)?.residual)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Acceleration {
    /// `G <- T(G)`.
    None,
    /// `G <- (1 - α) G + α T(G)`.
    Damped { alpha: f64 },
    /// Anderson mixing over the last `depth` residuals, falling back to the
    /// plain step whenever the mixed iterate is not positive definite.
    Anderson { depth: usize },
}

impl Default for Acceleration {
    fn default() -> Self {
        Self::Anderson { depth: 6 }
    }
}

#[derive(Debug, Clone)]
pub struct BalanceOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub acceleration: Acceleration,
    /// Starting Gram; the identity when absent.
    pub start: Option<GramMatrix>,
}

impl Default for BalanceOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: 200,
            acceleration: Acceleration::default(),
            start: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BalanceReport {
    pub iterations: usize,
    pub residual_history: Vec<f64>,
    pub condition_numbers: Vec<f64>,
    pub converged: bool,
    pub final_residual: f64,
    pub tol: f64,
    pub acceleration: Acceleration,
    pub n: usize,
    pub fiber_rank: usize,
    pub volume: f64,
    pub wall_time_secs: f64,
}

#[derive(Debug, Clone)]
pub struct BalanceOutcome {
    pub gram: GramMatrix,
    pub metric: MetricField,
    pub report: BalanceReport,
}

impl BalanceOutcome {
    pub fn require_converged(self) -> Result<Self> {
        if self.report.converged {
            Ok(self)
        } else {
            Err(Error::NotConverged {
                iterations: self.report.iterations,
                residual: self.report.final_residual,
            })
        }
    }
}

fn trace_normalized(g: CMat) -> CMat {
    let n = g.nrows() as f64;
    let tr = g.trace().re;
    g.scale(n / tr)
}

struct Anderson {
    depth: usize,
    xs: Vec<CMat>,
    fs: Vec<CMat>,
}

impl Anderson {
    fn next(&mut self, g: &CMat, image: &CMat) -> CMat {
        let f = image - g;
        self.xs.push(g.clone());
        self.fs.push(f.clone());
        if self.xs.len() > self.depth + 1 {
            self.xs.remove(0);
            self.fs.remove(0);
        }
        let m = self.fs.len() - 1;
        if m == 0 {
            return image.clone();
        }
        let len = f.len();
        let mut df = CMat::zeros(len, m);
        let mut dx = CMat::zeros(len, m);
        for j in 0..m {
            df.set_column(
                j,
                &(&self.fs[j + 1] - &self.fs[j])
                    .reshape_generic(nalgebra::Dyn(len), nalgebra::Const::<1>),
            );
            dx.set_column(
                j,
                &(&self.xs[j + 1] - &self.xs[j])
                    .reshape_generic(nalgebra::Dyn(len), nalgebra::Const::<1>),
            );
        }
        let fv = f
            .clone()
            .reshape_generic(nalgebra::Dyn(len), nalgebra::Const::<1>);
        let gamma = match df.clone().svd(true, true).solve(&fv, 1e-14) {
            Ok(g) => g,
            Err(_) => return self.restart(image),
        };
        let step = (&dx + &df) * gamma;
        let x = g
            .clone()
            .reshape_generic(nalgebra::Dyn(len), nalgebra::Const::<1>)
            + fv
            - step;
        let n = g.nrows();
        let mixed = linalg::symmetrize(&x.reshape_generic(nalgebra::Dyn(n), nalgebra::Dyn(n)));
        if linalg::cholesky_lower(&mixed).is_ok() {
            mixed
        } else {
            self.restart(image)
        }
    }

    fn restart(&mut self, image: &CMat) -> CMat {
        self.xs.clear();
        self.fs.clear();
        image.clone()
    }
}

/// Iterates the fixed-point map until the Bergman residual drops below
/// `opts.tol`. Non-convergence is reported in the returned report; see
/// [`BalanceOutcome::require_converged`].
pub fn balance_iterate(
    sample: &SectionSample,
    mesh: &BaseMesh,
    opts: &BalanceOptions,
) -> Result<BalanceOutcome> {
    balance_weighted(Weighted::new(sample, mesh)?, opts, |_, _| {})
}

pub fn balance_weighted(
    input: Weighted<'_>,
    opts: &BalanceOptions,
    mut progress: impl FnMut(usize, f64),
) -> Result<BalanceOutcome> {
    if !(opts.tol > 0.0) {
        return Err(Error::InvalidArgument("tolerance must be positive".into()));
    }
    let clock = Instant::now();
    let n = input.n();
    let mut g = match &opts.start {
        Some(s) => {
            if s.nrows() != n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    got: s.nrows(),
                });
            }
            s.clone()
        }
        None => linalg::identity(n),
    };
    let mut anderson = match opts.acceleration {
        Acceleration::Anderson { depth } => Some(Anderson {
            depth: depth.max(1),
            xs: vec![],
            fs: vec![],
        }),
        _ => None,
    };
    let mut history = Vec::new();
    let mut conds = Vec::new();
    let mut iterations = 0;
    let (metric, residual) = loop {
        let step = t_step(input, &g)?;
        history.push(step.residual);
        conds.push(linalg::condition_number(&g));
        progress(iterations, step.residual);
        if step.residual <= opts.tol || iterations >= opts.max_iter {
            break (step.metric, step.residual);
        }
        iterations += 1;
        g = match (&mut anderson, opts.acceleration) {
            (Some(acc), _) => trace_normalized(acc.next(&g, &step.image)),
            (None, Acceleration::Damped { alpha }) => {
                trace_normalized(g.scale(1.0 - alpha) + step.image.scale(alpha))
            }
            _ => step.image,
        };
    };
    let report = BalanceReport {
        iterations,
        residual_history: history,
        condition_numbers: conds,
        converged: residual <= opts.tol,
        final_residual: residual,
        tol: opts.tol,
        acceleration: opts.acceleration,
        n,
        fiber_rank: input.fiber_rank(),
        volume: input.volume(),
        wall_time_secs: clock.elapsed().as_secs_f64(),
    };
    Ok(BalanceOutcome {
        gram: g,
        metric: MetricField { mats: metric },
        report,
    })
}

/// Scale-free distance between two metric fields: with `λ` ranging over the
/// eigenvalues of `a^{-1/2} b a^{-1/2}` at every point,
/// `(λ_max - λ_min) / (λ_max + λ_min)`. Zero iff `b` is a constant multiple
/// of `a`.
pub fn field_distance(a: &MetricField, b: &MetricField) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    let (lo, hi) = a
        .mats
        .par_iter()
        .zip(b.mats.par_iter())
        .map(|(x, y)| {
            let w = linalg::hermitian_inv_sqrt(x);
            let v = linalg::eigvalsh(&(&w * y * &w));
            (v[0], v[v.len() - 1])
        })
        .reduce(
            || (f64::INFINITY, f64::NEG_INFINITY),
            |p, q| (p.0.min(q.0), p.1.max(q.1)),
        );
    Ok((hi - lo) / (hi + lo))
}

/// `max_p |a(p)^{-1} b(p) - Q| / |Q|` in Frobenius norm, `Q` the value at the
/// first point. Zero iff `b = a Q` for one constant endomorphism `Q`; for
/// metrics of the form `h ⊗ g` this compares them modulo constant
/// automorphisms of the frame.
pub fn automorphism_distance(a: &MetricField, b: &MetricField) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    let q = |p: usize| -> Result<CMat> {
        let l = linalg::cholesky_lower(&a.mats[p])?;
        Ok(l.adjoint()
            .solve_upper_triangular(&l.solve_lower_triangular(&b.mats[p]).expect("nonsingular"))
            .expect("nonsingular"))
    };
    let q0 = q(0)?;
    let scale = q0.norm();
    let worst = (1..a.len())
        .into_par_iter()
        .map(|p| Ok((q(p)? - &q0).norm() / scale))
        .collect::<Result<Vec<f64>>>()?;
    Ok(worst.into_iter().fold(0.0, f64::max))
}

/// The same scale-free spread for two Gram matrices.
pub fn scale_free_gram_distance(a: &GramMatrix, b: &GramMatrix) -> f64 {
    let w = linalg::hermitian_inv_sqrt(a);
    let v = linalg::eigvalsh(&(&w * b * &w));
    let (lo, hi) = (v[0], v[v.len() - 1]);
    (hi - lo) / (hi + lo)
}
