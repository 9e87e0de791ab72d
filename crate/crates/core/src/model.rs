//! Model geometries with closed-form reference data: split bundles over
//! `P^1` and theta-function line bundles over flat tori.
//!
//! Base volume normalization matches the fiber one: the Fubini-Study area of
//! `P^1` is `π` and the torus `C/(Z + τZ)` has area `Im τ`.

use std::f64::consts::PI;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gauss::gauss_legendre_unit;
use crate::herm::{binomial, factorial, SymBasisMap};
use crate::linalg::{self, c, CMat, C64};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ModelKind {
    /// `E = ⊕ O(a_i)` over `P^1`.
    P1Split { degrees: Vec<i64> },
    /// Line bundle of degree `d0` over `C/(Z + τZ)`.
    TorusLine { tau_re: f64, tau_im: f64, d0: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    #[serde(flatten)]
    pub kind: ModelKind,
    pub k: usize,
    pub d: usize,
    pub mesh_size: usize,
}

impl ModelSpec {
    pub fn p1(degrees: Vec<i64>, k: usize, d: usize, mesh_size: usize) -> Self {
        Self {
            kind: ModelKind::P1Split { degrees },
            k,
            d,
            mesh_size,
        }
    }

    pub fn torus(tau: C64, d0: usize, k: usize, mesh_size: usize) -> Self {
        Self {
            kind: ModelKind::TorusLine {
                tau_re: tau.re,
                tau_im: tau.im,
                d0,
            },
            k,
            d: 1,
            mesh_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match &self.kind {
            ModelKind::P1Split { degrees } => {
                if degrees.is_empty() {
                    return Err(Error::InvalidArgument("degree list is empty".into()));
                }
            }
            ModelKind::TorusLine { tau_im, d0, .. } => {
                if !(*tau_im > 0.0) {
                    return Err(Error::InvalidArgument("Im τ must be positive".into()));
                }
                if self.k * d0 == 0 {
                    return Err(Error::InvalidArgument(
                        "torus line bundle needs k·d0 >= 1".into(),
                    ));
                }
                if self.d != 1 {
                    return Err(Error::InvalidArgument(
                        "torus models are line bundles (d = 1)".into(),
                    ));
                }
            }
        }
        if self.d == 0 {
            return Err(Error::InvalidArgument("degree must be positive".into()));
        }
        if self.mesh_size == 0 {
            return Err(Error::InvalidArgument("mesh size must be positive".into()));
        }
        Ok(())
    }

    pub fn rank(&self) -> usize {
        match &self.kind {
            ModelKind::P1Split { degrees } => degrees.len(),
            ModelKind::TorusLine { .. } => 1,
        }
    }

    /// `deg E / rank E`.
    pub fn slope(&self) -> f64 {
        match &self.kind {
            ModelKind::P1Split { degrees } => {
                degrees.iter().sum::<i64>() as f64 / degrees.len() as f64
            }
            ModelKind::TorusLine { d0, .. } => *d0 as f64,
        }
    }

    /// Whether the reference metric solves the Hermitian-Einstein equation.
    pub fn hermitian_einstein(&self) -> bool {
        match &self.kind {
            ModelKind::P1Split { degrees } => degrees.iter().all(|&a| a == degrees[0]),
            ModelKind::TorusLine { .. } => true,
        }
    }

    /// Curvature of the reference metric on `Sym^d E ⊗ L^k` relative to
    /// `ω_∞`, when it is a multiple of the identity.
    pub fn expected_curvature(&self) -> f64 {
        match &self.kind {
            ModelKind::P1Split { .. } => self.d as f64 * self.slope() + self.k as f64,
            ModelKind::TorusLine { tau_im, d0, .. } => PI * (self.k * d0) as f64 / tau_im,
        }
    }

    pub fn base_volume(&self) -> f64 {
        match &self.kind {
            ModelKind::P1Split { .. } => PI,
            ModelKind::TorusLine { tau_im, .. } => *tau_im,
        }
    }

    /// Degree of the polarization `L` on the base.
    pub fn polarization_degree(&self) -> f64 {
        match &self.kind {
            ModelKind::P1Split { .. } => 1.0,
            ModelKind::TorusLine { d0, .. } => *d0 as f64,
        }
    }

    /// `dim H^0(X, Sym^d E ⊗ L^k)`.
    pub fn section_count(&self) -> usize {
        match &self.kind {
            ModelKind::P1Split { degrees } => p1_summand_degrees(degrees, self.k, self.d)
                .map(|v| v.iter().map(|&n| (n + 1).max(0) as usize).sum())
                .unwrap_or(0),
            ModelKind::TorusLine { d0, .. } => self.k * d0,
        }
    }

    pub fn with_k(&self, k: usize) -> Self {
        Self { k, ..self.clone() }
    }

    pub fn with_d(&self, d: usize) -> Self {
        Self { d, ..self.clone() }
    }

    pub fn build(&self) -> Result<Box<dyn BundleModel>> {
        self.validate()?;
        Ok(match &self.kind {
            ModelKind::P1Split { degrees } => Box::new(P1Model::new(degrees, self.k, self.d)?),
            ModelKind::TorusLine { tau_re, tau_im, d0 } => {
                Box::new(TorusModel::new(c(*tau_re, *tau_im), self.k * d0)?)
            }
        })
    }
}

/// Degrees `<a, I> + k` of the summands of `Sym^d E ⊗ L^k`, graded-lex order.
pub fn p1_summand_degrees(a: &[i64], k: usize, d: usize) -> Result<Vec<i64>> {
    let basis = SymBasisMap::new(a.len(), d)?;
    Ok(basis
        .indices()
        .iter()
        .map(|i| i.weighted(a) + k as i64)
        .collect())
}

/// Quadrature on the base curve in chart coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseMesh {
    pub points: Vec<C64>,
    /// Chart of each point: for `P^1`, 0 is `z`, 1 is `w = 1/z`.
    pub charts: Vec<usize>,
    pub weights: Vec<f64>,
    pub total_volume: f64,
}

impl BaseMesh {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Which bundle a [`SectionSample`] lives in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BundleTag {
    ETwisted,
    SymTwisted,
    OdTwisted,
}

/// Section values in the local frames of the mesh.
#[derive(Debug, Clone, PartialEq)]
pub struct SectionSample {
    pub n: usize,
    pub fiber_rank: usize,
    pub tag: BundleTag,
    pub k: usize,
    pub d: usize,
    /// One `fiber_rank × n` matrix per mesh point.
    pub values: Vec<CMat>,
}

impl SectionSample {
    pub fn mesh_size(&self) -> usize {
        self.values.len()
    }

    pub fn at(&self, p: usize) -> &CMat {
        &self.values[p]
    }

    /// Replaces the basis `s` by `s A`, i.e. `s'_j = Σ_i A_ij s_i`.
    pub fn transformed(&self, a: &CMat) -> Self {
        Self {
            values: self.values.iter().map(|v| v * a).collect(),
            n: a.ncols(),
            ..self.clone()
        }
    }
}

/// A Hermitian metric at each mesh point in the local frame.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricField {
    pub mats: Vec<CMat>,
}

impl MetricField {
    pub fn len(&self) -> usize {
        self.mats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mats.is_empty()
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            mats: self.mats.iter().map(|m| m.scale(s)).collect(),
        }
    }
}

/// Closed-form evaluation of a model's sections and reference metric at any
/// chart point.
pub trait BundleModel: Send + Sync {
    fn fiber_rank(&self) -> usize;

    fn section_count(&self) -> usize;

    /// `fiber_rank × N` matrix of section values.
    fn sections_at(&self, chart: usize, z: C64) -> CMat;

    /// Reference metric `h_∞ ⊗ g^k` in the same frame.
    fn metric_at(&self, chart: usize, z: C64) -> CMat;

    /// Density of `ω_∞` against `dx dy`, which is also `∂_z ∂_{\bar z}` of
    /// the base potential.
    fn base_density(&self, chart: usize, z: C64) -> f64;

    fn build_mesh(&self, mesh_size: usize) -> Result<BaseMesh>;

    /// Smallest mesh size honouring the exactness contract.
    fn required_mesh_size(&self) -> usize;
}

/// `Sym^d(⊕ O(a_i)) ⊗ O(k)` on `P^1` with monomial sections.
#[derive(Debug, Clone)]
pub struct P1Model {
    summand_degrees: Vec<i64>,
    /// `I!/d!`, the `Sym^d` weight of each summand frame.
    frame_weights: Vec<f64>,
    /// `(summand, exponent in the z chart)` for each section.
    sections: Vec<(usize, i64)>,
}

impl P1Model {
    pub fn new(a: &[i64], k: usize, d: usize) -> Result<Self> {
        let basis = SymBasisMap::new(a.len(), d)?;
        let summand_degrees = p1_summand_degrees(a, k, d)?;
        let frame_weights = basis
            .indices()
            .iter()
            .map(|i| i.factorial() / factorial(d))
            .collect();
        let sections = summand_degrees
            .iter()
            .enumerate()
            .flat_map(|(s, &n)| (0..=n.max(-1)).map(move |m| (s, m)))
            .collect();
        Ok(Self {
            summand_degrees,
            frame_weights,
            sections,
        })
    }

    pub fn summand_degrees(&self) -> &[i64] {
        &self.summand_degrees
    }

    pub fn sections(&self) -> &[(usize, i64)] {
        &self.sections
    }
}

impl BundleModel for P1Model {
    fn fiber_rank(&self) -> usize {
        self.summand_degrees.len()
    }

    fn section_count(&self) -> usize {
        self.sections.len()
    }

    fn sections_at(&self, chart: usize, z: C64) -> CMat {
        let mut out = CMat::zeros(self.fiber_rank(), self.section_count());
        for (j, &(s, m)) in self.sections.iter().enumerate() {
            let e = if chart == 0 {
                m
            } else {
                self.summand_degrees[s] - m
            };
            out[(s, j)] = z.powi(e as i32);
        }
        out
    }

    fn metric_at(&self, _chart: usize, z: C64) -> CMat {
        let g = 1.0 + z.norm_sqr();
        let diag: Vec<f64> = self
            .summand_degrees
            .iter()
            .zip(&self.frame_weights)
            .map(|(&n, w)| w * g.powi(-(n as i32)))
            .collect();
        linalg::real_diag(&diag)
    }

    fn base_density(&self, _chart: usize, z: C64) -> f64 {
        (1.0 + z.norm_sqr()).powi(-2)
    }

    fn required_mesh_size(&self) -> usize {
        let top = self
            .summand_degrees
            .iter()
            .copied()
            .max()
            .unwrap_or(0)
            .max(0) as usize;
        (top + 2) / 2
    }

    /// Gauss-Legendre in `t = |z|^2/(1+|z|^2)` times `2 n` equally spaced
    /// angles; points with `t > 1/2` live in the `w = 1/z` chart.
    fn build_mesh(&self, mesh_size: usize) -> Result<BaseMesh> {
        let required = self.required_mesh_size();
        if mesh_size < required {
            return Err(Error::MeshTooSmall {
                required,
                got: mesh_size,
            });
        }
        p1_mesh(mesh_size)
    }
}

pub fn p1_mesh(mesh_size: usize) -> Result<BaseMesh> {
    if mesh_size == 0 {
        return Err(Error::InvalidArgument("mesh size must be positive".into()));
    }
    let (ts, wt) = gauss_legendre_unit(mesh_size);
    let angles = 2 * mesh_size;
    let mut mesh = BaseMesh {
        points: Vec::with_capacity(mesh_size * angles),
        charts: Vec::with_capacity(mesh_size * angles),
        weights: Vec::with_capacity(mesh_size * angles),
        total_volume: 0.0,
    };
    for (t, w) in ts.iter().zip(&wt) {
        let (chart, rho) = if *t <= 0.5 {
            (0, (t / (1.0 - t)).sqrt())
        } else {
            (1, ((1.0 - t) / t).sqrt())
        };
        for j in 0..angles {
            let theta = 2.0 * PI * (j as f64 + 0.5) / angles as f64;
            let theta = if chart == 0 { theta } else { -theta };
            mesh.points.push(C64::from_polar(rho, theta));
            mesh.charts.push(chart);
            mesh.weights.push(PI * w / angles as f64);
        }
    }
    mesh.total_volume = mesh.weights.iter().sum();
    Ok(mesh)
}

/// Degree-`n` line bundle on `C/(Z + τZ)` with the theta basis
/// `θ_j(z) = Σ_m exp(πinτ(m + j/n)^2 + 2πin(m + j/n)z)`, `j = 0..n-1`, and
/// the metric `exp(-2πn (Im z)^2 / Im τ)`.
#[derive(Debug, Clone)]
pub struct TorusModel {
    tau: C64,
    n: usize,
}

/// Terms allowed per theta series before giving up.
pub const THETA_TERM_BUDGET: usize = 400;

impl TorusModel {
    pub fn new(tau: C64, n: usize) -> Result<Self> {
        if !(tau.im > 0.0) || n == 0 {
            return Err(Error::InvalidArgument(
                "need Im τ > 0 and degree >= 1".into(),
            ));
        }
        let model = Self { tau, n };
        // truncation must succeed at the worst point of the fundamental domain
        model.theta(0, tau)?;
        Ok(model)
    }

    pub fn tau(&self) -> C64 {
        self.tau
    }

    pub fn degree(&self) -> usize {
        self.n
    }

    pub fn theta(&self, j: usize, z: C64) -> Result<C64> {
        let n = self.n as f64;
        let shift = j as f64 / n;
        let term = |m: i64| -> C64 {
            let x = m as f64 + shift;
            let arg =
                C64::new(0.0, PI * n) * self.tau * x * x + C64::new(0.0, 2.0 * PI * n * x) * z;
            arg.exp()
        };
        // the Gaussian peaks near m + j/n = -Im z / Im τ
        let center = (-z.im / self.tau.im - shift).round() as i64;
        let mut sum = term(center);
        let mut used = 1;
        for step in 1.. {
            let a = term(center + step);
            let b = term(center - step);
            sum += a + b;
            used += 2;
            if a.norm().max(b.norm()) < 1e-16 * sum.norm() {
                break;
            }
            if used > THETA_TERM_BUDGET {
                return Err(Error::ThetaTruncation {
                    budget: THETA_TERM_BUDGET,
                });
            }
        }
        Ok(sum)
    }

    pub fn metric_weight(&self, z: C64) -> f64 {
        (-2.0 * PI * self.n as f64 * z.im * z.im / self.tau.im).exp()
    }
}

impl BundleModel for TorusModel {
    fn fiber_rank(&self) -> usize {
        1
    }

    fn section_count(&self) -> usize {
        self.n
    }

    fn sections_at(&self, _chart: usize, z: C64) -> CMat {
        CMat::from_fn(1, self.n, |_, j| {
            self.theta(j, z)
                .expect("theta truncation checked at construction")
        })
    }

    fn metric_at(&self, _chart: usize, z: C64) -> CMat {
        CMat::from_element(1, 1, c(self.metric_weight(z), 0.0))
    }

    fn base_density(&self, _chart: usize, _z: C64) -> f64 {
        1.0
    }

    fn required_mesh_size(&self) -> usize {
        self.n
    }

    /// Uniform `m × m` grid in `z = x + τ y`, `m` rounded up to a multiple of
    /// the degree so the characteristics stay exactly orthogonal.
    fn build_mesh(&self, mesh_size: usize) -> Result<BaseMesh> {
        if mesh_size == 0 {
            return Err(Error::InvalidArgument("mesh size must be positive".into()));
        }
        let m = mesh_size.div_ceil(self.n) * self.n;
        let w = self.tau.im / (m * m) as f64;
        let mut mesh = BaseMesh {
            points: Vec::with_capacity(m * m),
            charts: vec![0; m * m],
            weights: vec![w; m * m],
            total_volume: 0.0,
        };
        for a in 0..m {
            for b in 0..m {
                let x = a as f64 / m as f64;
                let y = b as f64 / m as f64;
                mesh.points.push(c(x, 0.0) + self.tau * y);
            }
        }
        mesh.total_volume = mesh.weights.iter().sum();
        Ok(mesh)
    }
}

/// Evaluates sections and the reference metric over a mesh.
pub fn sample_model(
    model: &dyn BundleModel,
    mesh: &BaseMesh,
    tag: BundleTag,
    k: usize,
    d: usize,
) -> (SectionSample, MetricField) {
    let pairs: Vec<(CMat, CMat)> = mesh
        .points
        .par_iter()
        .zip(mesh.charts.par_iter())
        .map(|(&z, &ch)| (model.sections_at(ch, z), model.metric_at(ch, z)))
        .collect();
    let (values, mats): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
    (
        SectionSample {
            n: model.section_count(),
            fiber_rank: model.fiber_rank(),
            tag,
            k,
            d,
            values,
        },
        MetricField { mats },
    )
}

/// Everything a generator produces for one model.
#[derive(Debug, Clone)]
pub struct Generated {
    pub mesh: BaseMesh,
    pub sample: SectionSample,
    pub metric: MetricField,
    pub hermitian_einstein: bool,
}

/// `E ⊗ L^k` over `P^1` (the symmetric degree of `spec` is ignored).
pub fn gen_p1_bundle(spec: &ModelSpec) -> Result<Generated> {
    let ModelKind::P1Split { degrees } = &spec.kind else {
        return Err(Error::InvalidArgument("expected a p1-split model".into()));
    };
    spec.validate()?;
    let model = P1Model::new(degrees, spec.k, 1)?;
    let mesh = model.build_mesh(spec.mesh_size)?;
    let (sample, metric) = sample_model(&model, &mesh, BundleTag::ETwisted, spec.k, 1);
    check_spanning(&sample)?;
    Ok(Generated {
        mesh,
        sample,
        metric,
        hermitian_einstein: spec.hermitian_einstein(),
    })
}

/// `Sym^d E ⊗ L^k` over `P^1` in the monomial frame of `Sym^d`.
pub fn sym_sections(spec: &ModelSpec, d: usize) -> Result<Generated> {
    let ModelKind::P1Split { degrees } = &spec.kind else {
        return Err(Error::InvalidArgument("expected a p1-split model".into()));
    };
    spec.validate()?;
    if d == 1 {
        return gen_p1_bundle(spec);
    }
    let model = P1Model::new(degrees, spec.k, d)?;
    let mesh = model.build_mesh(spec.mesh_size)?;
    let (sample, metric) = sample_model(&model, &mesh, BundleTag::SymTwisted, spec.k, d);
    check_spanning(&sample)?;
    Ok(Generated {
        mesh,
        sample,
        metric,
        hermitian_einstein: spec.hermitian_einstein(),
    })
}

pub fn gen_torus_line(spec: &ModelSpec) -> Result<Generated> {
    let ModelKind::TorusLine { tau_re, tau_im, d0 } = &spec.kind else {
        return Err(Error::InvalidArgument("expected a torus-line model".into()));
    };
    spec.validate()?;
    let model = TorusModel::new(c(*tau_re, *tau_im), spec.k * d0)?;
    let mesh = model.build_mesh(spec.mesh_size)?;
    let (sample, metric) = sample_model(&model, &mesh, BundleTag::ETwisted, spec.k, 1);
    check_spanning(&sample)?;
    Ok(Generated {
        mesh,
        sample,
        metric,
        hermitian_einstein: true,
    })
}

/// Generates whatever `spec` describes at its own symmetric degree.
pub fn generate(spec: &ModelSpec) -> Result<Generated> {
    match spec.kind {
        ModelKind::P1Split { .. } => sym_sections(spec, spec.d),
        ModelKind::TorusLine { .. } => gen_torus_line(spec),
    }
}

/// Sections must span the fiber at every mesh point.
pub fn check_spanning(sample: &SectionSample) -> Result<()> {
    for (p, s) in sample.values.iter().enumerate() {
        let gram = s * s.adjoint();
        let v = linalg::eigvalsh(&gram);
        let top = v.last().copied().unwrap_or(0.0);
        if v.is_empty() || v[0] <= 1e-13 * top || top == 0.0 {
            return Err(Error::BasePoint { point: p });
        }
    }
    Ok(())
}

/// Riemann-Roch count for `Sym^d E ⊗ L^k` of a split bundle on `P^1`.
pub fn p1_riemann_roch(a: &[i64], k: usize, d: usize) -> usize {
    let r = a.len();
    let count = binomial(d + r - 1, r - 1);
    let degrees = p1_summand_degrees(a, k, d).expect("valid degree");
    debug_assert_eq!(degrees.len(), count);
    degrees.iter().map(|&n| (n + 1).max(0) as usize).sum()
}

/// Curvature of a metric by centered finite differences with one Richardson
/// step, as the endomorphism `K` with `i F = K ω_∞` (`density` is that of
/// `ω_∞` at `z`).
pub fn curvature_ratio(
    metric: impl Fn(C64) -> CMat,
    density: f64,
    z: C64,
    step: f64,
) -> Result<CMat> {
    let coarse = chern_curvature(&metric, z, step)?;
    let fine = chern_curvature(&metric, z, step / 2.0)?;
    Ok((fine.scale(4.0) - coarse).scale(-1.0 / (3.0 * density)))
}

/// `F_{z \bar z} = ∂_{\bar z}(M^{-1} ∂_z M)`, the Chern curvature acting on
/// frame coordinates (`∇ e_a = Σ_b θ_{ba} e_b` with `θ = M^{-1} ∂M`).
fn chern_curvature(metric: &impl Fn(C64) -> CMat, z: C64, step: f64) -> Result<CMat> {
    let h = |w: C64| metric(w);
    let (ex, ey) = (c(step, 0.0), c(0.0, step));
    let two = c(2.0 * step, 0.0);
    let conn = |w: C64| -> Result<CMat> {
        let dx = (h(w + ex) - h(w - ex)) / two;
        let dy = (h(w + ey) - h(w - ey)) / two;
        let dz = (dx - dy * c(0.0, 1.0)) * c(0.5, 0.0);
        Ok(linalg::hermitian_inv(&h(w))? * dz)
    };
    let ax = (conn(z + ex)? - conn(z - ex)?) / two;
    let ay = (conn(z + ey)? - conn(z - ey)?) / two;
    Ok((ax + ay * c(0.0, 1.0)) * c(0.5, 0.0))
}

/// Largest deviation of the finite-difference curvature of `spec`'s reference
/// metric from a multiple of the identity, relative to that multiple.
pub fn hermitian_einstein_residual(spec: &ModelSpec, mesh: &BaseMesh) -> Result<f64> {
    let model = spec.build()?;
    let target = spec.expected_curvature();
    let id = linalg::identity(model.fiber_rank()).scale(target);
    let worst = mesh
        .points
        .par_iter()
        .zip(mesh.charts.par_iter())
        .map(|(&z, &ch)| {
            let k = curvature_ratio(
                |w| model.metric_at(ch, w),
                model.base_density(ch, z),
                z,
                1e-3,
            )?;
            Ok(linalg::max_abs(&(k - &id)) / target.abs().max(1.0))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(worst.into_iter().fold(0.0, f64::max))
}
