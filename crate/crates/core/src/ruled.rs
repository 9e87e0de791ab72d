//! The projectivized bundle `PE^*` over a model curve: hat sections of
//! `O(d) ⊗ L^k`, combined base × fiber quadrature, induced volume forms and
//! the almost-balanced diagnostics.
//!
//! A node is a base point `p` together with a fiber point `[f]`, where
//! `f = L_p g` for `g` from a Fubini-Study rule and `L_p` the covector frame
//! of `h_∞(p)`. Near a node the chart coordinates are `(c, u)`: `c` the base
//! chart coordinate and `u` the affine coordinates of `f` with its largest
//! component set to 1.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::balance::{
    balance_weighted, fs_metric_from_gram, inverse_gram, l2_gram, scale_free_gram_distance,
    BalanceOptions, BalanceReport, GramMatrix, Weighted,
};
use crate::error::{Error, Result};
use crate::fiber::{c_closed_form, fiber_volume, fs_quadrature, QuadratureRule};
use crate::herm::{binomial, SymBasisMap};
use crate::linalg::{self, c, CMat, C64};
use crate::model::{
    sample_model, BaseMesh, BundleModel, BundleTag, MetricField, ModelKind, ModelSpec, P1Model,
    SectionSample,
};
use crate::probe::{sliding_slopes, RateStart};

pub const MAX_SECTIONS: usize = 400;
pub const MAX_NODES: usize = 5_000_000;
/// Finite-difference step in chart units for induced volume forms.
pub const FD_STEP: f64 = 1e-4;

/// Product quadrature on `PE^*` for `O(d) ⊗ L^k` at the twist of `spec`.
#[derive(Debug, Clone)]
pub struct RuledMesh {
    pub spec: ModelSpec,
    pub base: BaseMesh,
    pub rule: QuadratureRule,
    /// `ω_∞` density at each base point.
    pub densities: Vec<f64>,
    /// `L_p` with `L_p L_p^† = conj(h_∞(p))`.
    pub frames: Vec<CMat>,
    /// `conj(h_∞(p))^{-1}`, the dual metric on covectors.
    pub duals: Vec<CMat>,
    basis: SymBasisMap,
}

impl RuledMesh {
    /// Base mesh of `spec` (honouring its exactness contract) times the
    /// product Fubini-Study rule of the given level on every fiber.
    pub fn from_spec(spec: &ModelSpec, fiber_level: usize) -> Result<Self> {
        let model = spec.build()?;
        let base = model.build_mesh(spec.mesh_size)?;
        let r = spec.rank();
        let rule = fs_quadrature(r, fiber_level)?;
        let nodes = base.len() * rule.len();
        if nodes > MAX_NODES {
            return Err(Error::SizeCap {
                what: "ruled nodes",
                value: nodes,
                cap: MAX_NODES,
            });
        }
        let e_model: Option<P1Model> = match &spec.kind {
            ModelKind::P1Split { degrees } => Some(P1Model::new(degrees, 0, 1)?),
            ModelKind::TorusLine { .. } => None,
        };
        let mut frames = Vec::with_capacity(base.len());
        let mut duals = Vec::with_capacity(base.len());
        let mut densities = Vec::with_capacity(base.len());
        for (&z, &ch) in base.points.iter().zip(&base.charts) {
            let h = match &e_model {
                Some(m) => m.metric_at(ch, z),
                None => linalg::identity(1),
            };
            let conj = h.map(|v| v.conj());
            frames.push(linalg::cholesky_lower(&conj)?);
            duals.push(linalg::hermitian_inv(&conj)?);
            densities.push(model.base_density(ch, z));
        }
        Ok(Self {
            spec: spec.clone(),
            base,
            rule,
            densities,
            frames,
            duals,
            basis: SymBasisMap::new(r, spec.d)?,
        })
    }

    pub fn rank(&self) -> usize {
        self.rule.r
    }

    pub fn degree(&self) -> usize {
        self.spec.d
    }

    pub fn basis(&self) -> &SymBasisMap {
        &self.basis
    }

    pub fn fiber_len(&self) -> usize {
        self.rule.len()
    }

    pub fn node_count(&self) -> usize {
        self.base.len() * self.rule.len()
    }

    /// Combined weights `w_p w_g` for `∫ · ω_FS^{r-1}/(r-1)! ∧ ω_∞`.
    pub fn product_weights(&self) -> Vec<f64> {
        self.base
            .weights
            .iter()
            .flat_map(|wp| self.rule.weights.iter().map(move |wg| wp * wg))
            .collect()
    }

    /// Total mass of the combined weights against `Vol(P^{r-1}) Vol(X)`.
    pub fn mass_error(&self) -> f64 {
        let exact = fiber_volume(self.rank()) * self.spec.base_volume();
        (self.product_weights().iter().sum::<f64>() - exact).abs() / exact
    }

    /// Covector `f = L_p g` of a node.
    pub fn covector(&self, node: usize) -> Vec<C64> {
        let (p, g) = (node / self.fiber_len(), node % self.fiber_len());
        self.rule.points[g]
            .transformed(&self.frames[p])
            .covector()
            .to_vec()
    }

    /// `Sym^d E ⊗ L^k` at this mesh's twist.
    pub fn sym_model(&self) -> Result<Box<dyn BundleModel>> {
        self.spec.build()
    }

    /// Factor `(dμ + k) d^{r-1}` turning the product weights into `ω_k^r/r!`
    /// for a Hermitian-Einstein reference.
    pub fn product_factor(&self) -> f64 {
        let d = self.spec.d as f64;
        self.spec.expected_curvature() * d.powi(self.rank() as i32 - 1)
    }
}

/// Hat sections `ŝ_i(p, [f]) = f^{⊗d}(s_i(p))`, stored factorized as the
/// section values at base points and the monomials `f^I` at nodes.
#[derive(Debug, Clone)]
pub struct HatValues {
    pub n: usize,
    /// `R × N` section values per base point.
    pub base: Vec<CMat>,
    /// Monomials `f^I` of every node, `R` per node.
    monomials: Vec<C64>,
    sym_rank: usize,
    /// Columns express the basis in the model's sections.
    pub coeffs: CMat,
}

impl HatValues {
    /// Replaces the basis `ŝ` by `ŝ A`.
    pub fn with_basis(&self, a: &CMat) -> Self {
        Self {
            n: a.ncols(),
            base: self.base.iter().map(|s| s * a).collect(),
            monomials: self.monomials.clone(),
            sym_rank: self.sym_rank,
            coeffs: &self.coeffs * a,
        }
    }

    pub fn node_count(&self) -> usize {
        self.monomials.len() / self.sym_rank
    }

    pub fn monomials(&self, node: usize) -> &[C64] {
        &self.monomials[node * self.sym_rank..(node + 1) * self.sym_rank]
    }

    /// `1 × N` row of hat values at a node.
    pub fn at(&self, node: usize) -> CMat {
        let fiber = self.node_count() / self.base.len();
        let phi = CMat::from_row_slice(1, self.sym_rank, self.monomials(node));
        phi * &self.base[node / fiber]
    }

    pub fn materialize(&self) -> Result<Vec<CMat>> {
        let size = self.node_count() * self.n;
        let cap = 10 * MAX_NODES;
        if size > cap {
            return Err(Error::SizeCap {
                what: "hat values",
                value: size,
                cap,
            });
        }
        Ok((0..self.node_count())
            .into_par_iter()
            .map(|v| self.at(v))
            .collect())
    }
}

pub fn hat_sections(sample: &SectionSample, ruled: &RuledMesh) -> Result<HatValues> {
    if sample.mesh_size() != ruled.base.len() {
        return Err(Error::DimensionMismatch {
            expected: ruled.base.len(),
            got: sample.mesh_size(),
        });
    }
    let expected = binomial(ruled.degree() + ruled.rank() - 1, ruled.rank() - 1);
    if sample.d != ruled.degree() || sample.fiber_rank != expected {
        return Err(Error::BasisMismatch {
            left: format!("Sym^{} of rank {}", sample.d, sample.fiber_rank),
            right: format!("Sym^{} of rank {}", ruled.degree(), expected),
        });
    }
    if sample.n > MAX_SECTIONS {
        return Err(Error::SizeCap {
            what: "sections",
            value: sample.n,
            cap: MAX_SECTIONS,
        });
    }
    let monomials = (0..ruled.node_count())
        .into_par_iter()
        .flat_map_iter(|v| ruled.basis.monomials(&ruled.covector(v)))
        .collect();
    Ok(HatValues {
        n: sample.n,
        base: sample.values.clone(),
        monomials,
        sym_rank: expected,
        coeffs: linalg::identity(sample.n),
    })
}

/// A metric on `Sym^d E ⊗ L^k`, evaluable anywhere in a chart.
#[derive(Clone, Copy)]
pub enum SymMetric<'a> {
    /// The model's `Sym^d h_∞ ⊗ g^k`.
    Reference(&'a dyn BundleModel),
    /// `R^{1/2} (I + P) R^{1/2}` for the reference `R` and a constant
    /// Hermitian `P`; its distance to the reference is `||P||_op`.
    Perturbed(&'a dyn BundleModel, &'a CMat),
    /// `(S A G^{-1} A^† S^†)^{-1}` for model sections `S`, the basis `A`
    /// and a Gram `G` of it. Stores `A G^{-1} A^†`.
    FromGram(&'a dyn BundleModel, &'a CMat),
}

impl SymMetric<'_> {
    /// `conj(H)^{-1}`, so that `|f^d|^2 = φ^† D φ` for monomials `φ`.
    pub fn dual_at(&self, chart: usize, z: C64) -> Result<CMat> {
        let inv = match self {
            Self::Reference(m) => linalg::hermitian_inv(&m.metric_at(chart, z))?,
            Self::Perturbed(m, p) => {
                let root = linalg::hermitian_sqrt(&m.metric_at(chart, z));
                let h = &root * (linalg::identity(p.nrows()) + *p) * &root;
                linalg::hermitian_inv(&linalg::symmetrize(&h))?
            }
            Self::FromGram(m, k) => {
                let s = m.sections_at(chart, z);
                linalg::symmetrize(&(&s * *k * s.adjoint()))
            }
        };
        Ok(inv.map(|v| v.conj()))
    }

    pub fn metric_at(&self, chart: usize, z: C64) -> Result<CMat> {
        let d = self.dual_at(chart, z)?;
        linalg::hermitian_inv(&d.map(|v| v.conj()))
    }

    pub fn metric_field(&self, mesh: &BaseMesh) -> Result<MetricField> {
        let mats = mesh
            .points
            .par_iter()
            .zip(mesh.charts.par_iter())
            .map(|(&z, &ch)| self.metric_at(ch, z))
            .collect::<Result<Vec<_>>>()?;
        Ok(MetricField { mats })
    }
}

/// Stores `A G^{-1} A^†` for [`SymMetric::FromGram`].
pub fn gram_kernel(coeffs: &CMat, gram: &GramMatrix) -> Result<CMat> {
    Ok(linalg::symmetrize(
        &(coeffs * inverse_gram(gram)? * coeffs.adjoint()),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VolumeMode {
    /// `(dμ + k) d^{r-1} ω_FS^{r-1}/(r-1)! ∧ ω_∞` of the reference.
    Product,
    /// `ω^r/r!` for `ω = i ∂\bar∂ log Ĥ^{-1}` by finite differences.
    Induced,
}

impl std::fmt::Display for VolumeMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Product => "product",
            Self::Induced => "induced",
        })
    }
}

impl std::str::FromStr for VolumeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "product" => Ok(Self::Product),
            "induced" => Ok(Self::Induced),
            other => Err(Error::Parse(format!("unknown volume mode `{other}`"))),
        }
    }
}

/// `Ĥ = 1/|f^d|^2` at every node.
pub fn node_metric(ruled: &RuledMesh, metric: &SymMetric<'_>) -> Result<Vec<f64>> {
    let m = ruled.fiber_len();
    let per_base = (0..ruled.base.len())
        .into_par_iter()
        .map(|p| {
            let d = metric.dual_at(ruled.base.charts[p], ruled.base.points[p])?;
            Ok((0..m)
                .map(|g| {
                    let phi = ruled.basis.monomials(&ruled.covector(p * m + g));
                    1.0 / linalg::quad_form(&d, &phi)
                })
                .collect::<Vec<f64>>())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per_base.concat())
}

/// Volume weight of every node.
pub fn ruled_volume(
    ruled: &RuledMesh,
    metric: &SymMetric<'_>,
    mode: VolumeMode,
) -> Result<Vec<f64>> {
    match mode {
        VolumeMode::Product => {
            if !ruled.spec.hermitian_einstein() {
                return Err(Error::NotHermitianEinstein);
            }
            let f = ruled.product_factor();
            Ok(ruled.product_weights().into_iter().map(|w| w * f).collect())
        }
        VolumeMode::Induced => {
            let per_base = (0..ruled.base.len())
                .into_par_iter()
                .map(|p| induced_weights_at(ruled, metric, p))
                .collect::<Result<Vec<_>>>()?;
            Ok(per_base.concat())
        }
    }
}

// Offsets are in units of FD_STEP/2 and range over -2..=2.
const GRID: i32 = 2;

fn induced_weights_at(ruled: &RuledMesh, metric: &SymMetric<'_>, p: usize) -> Result<Vec<f64>> {
    let half = FD_STEP / 2.0;
    let (z, ch) = (ruled.base.points[p], ruled.base.charts[p]);
    let side = (2 * GRID + 1) as usize;
    let mut duals = Vec::with_capacity(side * side);
    for a in -GRID..=GRID {
        for b in -GRID..=GRID {
            duals.push(metric.dual_at(ch, z + c(a as f64 * half, b as f64 * half))?);
        }
    }
    let r = ruled.rank();
    let m = ruled.fiber_len();
    let wp = ruled.base.weights[p];
    let density = ruled.densities[p];
    let b = &ruled.duals[p];
    let det_b = b.determinant().re;
    let mut out = Vec::with_capacity(m);
    for g in 0..m {
        let node = p * m + g;
        let f = ruled.covector(node);
        let j = (0..r)
            .max_by(|&x, &y| f[x].norm().total_cmp(&f[y].norm()))
            .unwrap_or(0);
        let x: Vec<C64> = f.iter().map(|v| v / f[j]).collect();
        let free: Vec<usize> = (0..r).filter(|&i| i != j).collect();
        let potential = |o: &[i32]| -> f64 {
            let mut y = x.clone();
            for (t, &i) in free.iter().enumerate() {
                y[i] += c(o[2 + 2 * t] as f64 * half, o[3 + 2 * t] as f64 * half);
            }
            let idx = ((o[0] + GRID) as usize) * side + (o[1] + GRID) as usize;
            linalg::quad_form(&duals[idx], &ruled.basis.monomials(&y)).ln()
        };
        let hr = richardson_hessian(2 * r, &potential);
        let mut hc = CMat::zeros(r, r);
        for a in 0..r {
            for bb in 0..r {
                let (xa, ya, xb, yb) = (2 * a, 2 * a + 1, 2 * bb, 2 * bb + 1);
                hc[(a, bb)] = c(hr[xa][xb] + hr[ya][yb], hr[xa][yb] - hr[ya][xb]) * 0.25;
            }
        }
        let det = linalg::symmetrize(&hc).determinant().re;
        if !(det > 0.0) || !det.is_finite() {
            return Err(Error::CurvatureFailure { node });
        }
        let rho = det_b / linalg::quad_form(b, &x).powi(r as i32);
        out.push(wp * ruled.rule.weights[g] * det / (density * rho));
    }
    Ok(out)
}

/// Real Hessian by centered differences at steps `FD_STEP` and `FD_STEP/2`,
/// combined by one Richardson step.
fn richardson_hessian(dim: usize, f: &impl Fn(&[i32]) -> f64) -> Vec<Vec<f64>> {
    let f0 = f(&vec![0; dim]);
    let at = |m: i32| {
        let h = m as f64 * FD_STEP / 2.0;
        let mut out = vec![vec![0.0; dim]; dim];
        let mut o = vec![0; dim];
        for i in 0..dim {
            o[i] = m;
            let plus = f(&o);
            o[i] = -m;
            let minus = f(&o);
            o[i] = 0;
            out[i][i] = (plus - 2.0 * f0 + minus) / (h * h);
            for j in i + 1..dim {
                let mut s = 0.0;
                for (si, sj) in [(1, 1), (1, -1), (-1, 1), (-1, -1)] {
                    o[i] = si * m;
                    o[j] = sj * m;
                    s += (si * sj) as f64 * f(&o);
                }
                o[i] = 0;
                o[j] = 0;
                out[i][j] = s / (4.0 * h * h);
                out[j][i] = out[i][j];
            }
        }
        out
    };
    let (coarse, fine) = (at(2), at(1));
    (0..dim)
        .map(|i| {
            (0..dim)
                .map(|j| (4.0 * fine[i][j] - coarse[i][j]) / 3.0)
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VolumeIdentityReport {
    pub k: usize,
    pub d: usize,
    /// `(dμ + k) d^{r-1}` times the product mass.
    pub product_mass: f64,
    /// Mass of `ω_k^r/r!` from finite-difference curvature.
    pub induced_mass: f64,
    pub expected_mass: f64,
    pub discrepancy: f64,
}

/// Total mass of `ω_k^r/r!` computed from the product form and directly.
pub fn volume_identity_check(ruled: &RuledMesh) -> Result<VolumeIdentityReport> {
    if !ruled.spec.hermitian_einstein() {
        return Err(Error::NotHermitianEinstein);
    }
    let model = ruled.sym_model()?;
    let metric = SymMetric::Reference(model.as_ref());
    let product_mass: f64 = ruled_volume(ruled, &metric, VolumeMode::Product)?
        .iter()
        .sum();
    let induced_mass: f64 = ruled_volume(ruled, &metric, VolumeMode::Induced)?
        .iter()
        .sum();
    let expected_mass =
        ruled.product_factor() * fiber_volume(ruled.rank()) * ruled.spec.base_volume();
    Ok(VolumeIdentityReport {
        k: ruled.spec.k,
        d: ruled.spec.d,
        product_mass,
        induced_mass,
        expected_mass,
        discrepancy: (product_mass - induced_mass).abs() / product_mass,
    })
}

/// `G[(i, j)] = ∫ \bar ŝ_i ŝ_j Ĥ dvol` over the ruled mesh.
pub fn pe_gram(
    hat: &HatValues,
    metric: &SymMetric<'_>,
    ruled: &RuledMesh,
    mode: VolumeMode,
) -> Result<GramMatrix> {
    let vol = ruled_volume(ruled, metric, mode)?;
    let hhat = node_metric(ruled, metric)?;
    pe_gram_with(hat, &vol, &hhat)
}

/// [`pe_gram`] for precomputed node volumes and metric values.
pub fn pe_gram_with(hat: &HatValues, vol: &[f64], hhat: &[f64]) -> Result<GramMatrix> {
    let nodes = hat.node_count();
    if vol.len() != nodes || hhat.len() != nodes {
        return Err(Error::DimensionMismatch {
            expected: nodes,
            got: vol.len().min(hhat.len()),
        });
    }
    let m = nodes / hat.base.len();
    let rk = hat.sym_rank;
    let gram = linalg::chunked_sum(
        hat.base.len(),
        || CMat::zeros(hat.n, hat.n),
        |acc, p| {
            let mut f = CMat::zeros(rk, rk);
            for v in p * m..(p + 1) * m {
                let phi = hat.monomials(v);
                let w = vol[v] * hhat[v];
                for a in 0..rk {
                    let ca = phi[a].conj() * w;
                    for b in 0..rk {
                        f[(a, b)] += ca * phi[b];
                    }
                }
            }
            let s = &hat.base[p];
            Ok(acc + s.adjoint() * f * s)
        },
        |a, b| a + b,
    )?;
    Ok(linalg::symmetrize(&gram))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AlmostBalancedReport {
    pub k: usize,
    pub n: usize,
    #[serde(skip)]
    pub gram: GramMatrix,
    /// Average diagonal of the Gram.
    pub d_avg: f64,
    #[serde(skip)]
    pub m: CMat,
    pub op_norm_m: f64,
    pub d_normalized: f64,
    pub c_target: f64,
    /// `|D - C_{r,d}(dμ + k)|`.
    pub gap: f64,
}

impl AlmostBalancedReport {
    /// `||M||_op / D`.
    pub fn defect(&self) -> f64 {
        self.op_norm_m / self.d_avg
    }
}

pub fn almost_balanced_report(
    gram: &GramMatrix,
    r: usize,
    d: usize,
    mu: f64,
    k: usize,
) -> AlmostBalancedReport {
    let n = gram.nrows();
    let gram = linalg::symmetrize(gram);
    let d_avg = gram.trace().re / n as f64;
    let m = &gram - linalg::identity(n).scale(d_avg);
    let twist = d as f64 * mu + k as f64;
    let c_target = c_closed_form(r, d);
    AlmostBalancedReport {
        k,
        n,
        op_norm_m: linalg::op_norm_hermitian(&m),
        d_normalized: d_avg / twist,
        c_target,
        gap: (d_avg - c_target * twist).abs(),
        gram,
        m,
        d_avg,
    }
}

/// Options shared by the pipeline runs on `PE^*`.
#[derive(Debug, Clone)]
pub struct PipelineOptions {
    pub fiber_level: usize,
    pub mode: VolumeMode,
    /// Initial Gram of the base balancing; `balance.start` is ignored.
    pub start: RateStart,
    pub balance: BalanceOptions,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        Self {
            fiber_level: 8,
            mode: VolumeMode::Product,
            start: RateStart::Reference,
            balance: BalanceOptions::default(),
        }
    }
}

/// Everything produced by balancing `Sym^d E ⊗ L^k` and projectivizing.
#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub ruled: RuledMesh,
    /// Hat sections of an `L^2(H_k)`-orthonormal basis.
    pub hat: HatValues,
    /// Balanced Gram in the model basis.
    pub balanced_gram: GramMatrix,
    pub balance: BalanceReport,
    pub report: AlmostBalancedReport,
}

impl PipelineRun {
    /// `A G^{-1} A^†` of the balanced metric, for [`SymMetric::FromGram`].
    pub fn kernel(&self) -> Result<CMat> {
        gram_kernel(
            &linalg::identity(self.balanced_gram.nrows()),
            &self.balanced_gram,
        )
    }
}

/// `A` with `A^† L A = I`, equilibrating the diagonal first so that widely
/// spread section norms do not cost accuracy.
pub fn orthonormalizer(l: &GramMatrix) -> CMat {
    let scale: Vec<f64> = (0..l.nrows())
        .map(|i| l[(i, i)].re.sqrt().recip())
        .collect();
    let d = linalg::real_diag(&scale);
    let balanced = linalg::symmetrize(&(&d * l * &d));
    d * linalg::hermitian_inv_sqrt(&balanced)
}

/// Mesh size honouring the contract of `spec` at its own twist.
pub fn pipeline_mesh_size(spec: &ModelSpec) -> Result<usize> {
    let probe = ModelSpec {
        mesh_size: spec.mesh_size.max(1),
        ..spec.clone()
    };
    Ok(probe.mesh_size.max(probe.build()?.required_mesh_size()))
}

/// Balances `Sym^d E ⊗ L^k`, orthonormalizes its sections in `L^2(H_k)`,
/// and reports how far their hat sections are from balanced on `PE^*`.
pub fn almost_balanced_pipeline(spec: &ModelSpec, opts: &PipelineOptions) -> Result<PipelineRun> {
    let spec = ModelSpec {
        mesh_size: pipeline_mesh_size(spec)?,
        ..spec.clone()
    };
    let ruled = RuledMesh::from_spec(&spec, opts.fiber_level)?;
    let model = ruled.sym_model()?;
    let (sample, _) = sample_model(
        model.as_ref(),
        &ruled.base,
        BundleTag::SymTwisted,
        spec.k,
        spec.d,
    );
    if sample.n > MAX_SECTIONS {
        return Err(Error::SizeCap {
            what: "sections",
            value: sample.n,
            cap: MAX_SECTIONS,
        });
    }
    let mut bopts = opts.balance.clone();
    bopts.start = match opts.start {
        RateStart::Identity => None,
        RateStart::Reference => {
            let field = SymMetric::Reference(model.as_ref()).metric_field(&ruled.base)?;
            Some(l2_gram(&sample, &field, &ruled.base)?)
        }
    };
    let out = balance_weighted(Weighted::new(&sample, &ruled.base)?, &bopts, |_, _| {})?;
    project_balanced(&spec, ruled, &sample, out.gram, out.report, opts.mode)
}

/// The projectivization half of [`almost_balanced_pipeline`] for a Gram
/// balanced elsewhere, e.g. loaded from a previous run.
pub fn almost_balanced_from_gram(
    spec: &ModelSpec,
    gram: &GramMatrix,
    balance: BalanceReport,
    opts: &PipelineOptions,
) -> Result<PipelineRun> {
    let spec = ModelSpec {
        mesh_size: pipeline_mesh_size(spec)?,
        ..spec.clone()
    };
    let ruled = RuledMesh::from_spec(&spec, opts.fiber_level)?;
    let model = ruled.sym_model()?;
    let (sample, _) = sample_model(
        model.as_ref(),
        &ruled.base,
        BundleTag::SymTwisted,
        spec.k,
        spec.d,
    );
    if gram.nrows() != sample.n || gram.ncols() != sample.n {
        return Err(Error::DimensionMismatch {
            expected: sample.n,
            got: gram.nrows(),
        });
    }
    linalg::cholesky_lower(gram)?;
    project_balanced(&spec, ruled, &sample, gram.clone(), balance, opts.mode)
}

fn project_balanced(
    spec: &ModelSpec,
    ruled: RuledMesh,
    sample: &SectionSample,
    balanced_gram: GramMatrix,
    balance: BalanceReport,
    mode: VolumeMode,
) -> Result<PipelineRun> {
    let model = ruled.sym_model()?;
    let kernel = gram_kernel(&linalg::identity(sample.n), &balanced_gram)?;
    let metric = SymMetric::FromGram(model.as_ref(), &kernel);
    let l = l2_gram(
        sample,
        &fs_metric_from_gram(&balanced_gram, sample)?,
        &ruled.base,
    )?;
    let a = orthonormalizer(&l);
    let hat = hat_sections(sample, &ruled)?.with_basis(&a);
    let gram = pe_gram(&hat, &metric, &ruled, mode)?;
    let report = almost_balanced_report(&gram, ruled.rank(), spec.d, spec.slope(), spec.k);
    Ok(PipelineRun {
        ruled,
        hat,
        balanced_gram,
        balance,
        report,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecayRow {
    pub k: usize,
    pub n: usize,
    pub d_avg: f64,
    pub d_normalized: f64,
    pub op_norm_m: f64,
    pub defect: f64,
    pub gap: f64,
    pub converged: bool,
    /// Sliding slope of `defect` over the window ending at this row.
    pub slope: Option<f64>,
}

impl DecayRow {
    pub fn of(run: &PipelineRun) -> Self {
        Self {
            k: run.report.k,
            n: run.report.n,
            d_avg: run.report.d_avg,
            d_normalized: run.report.d_normalized,
            op_norm_m: run.report.op_norm_m,
            defect: run.report.defect(),
            gap: run.report.gap,
            converged: run.balance.converged,
            slope: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecayReport {
    pub r: usize,
    pub d: usize,
    pub c_target: f64,
    pub window: usize,
    pub rows: Vec<DecayRow>,
    /// Strict decrease of the defect over the top half of converged rows.
    pub monotone_top_half: bool,
    pub top_slope: Option<f64>,
}

impl DecayReport {
    /// CSV with header `k,N,D,Dnorm,opNormM,slope`, 17 significant digits.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("k,N,D,Dnorm,opNormM,slope\n");
        for row in &self.rows {
            let slope = row.slope.map(|s| format!("{s:.16e}")).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{:.16e},{:.16e},{:.16e},{}\n",
                row.k, row.n, row.d_avg, row.d_normalized, row.op_norm_m, slope
            ));
        }
        out
    }
}

/// Runs the almost-balanced pipeline for each `k` and fits the decay of
/// `||M||_op / D`.
pub fn decay_probe(
    spec: &ModelSpec,
    k_range: &[usize],
    opts: &PipelineOptions,
    window: usize,
) -> Result<DecayReport> {
    if k_range.len() < window.max(2) || k_range.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument(
            "k range must be strictly increasing and cover the slope window".into(),
        ));
    }
    let rows = k_range
        .iter()
        .map(|&k| {
            Ok(DecayRow::of(&almost_balanced_pipeline(
                &spec.with_k(k),
                opts,
            )?))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(decay_report(spec, rows, window))
}

/// Fits the slopes and monotonicity of rows computed elsewhere.
pub fn decay_report(spec: &ModelSpec, mut rows: Vec<DecayRow>, window: usize) -> DecayReport {
    let good: Vec<usize> = (0..rows.len()).filter(|&i| rows[i].converged).collect();
    let ks: Vec<f64> = good.iter().map(|&i| rows[i].k as f64).collect();
    let ys: Vec<f64> = good.iter().map(|&i| rows[i].defect).collect();
    let slopes = sliding_slopes(&ks, &ys, window);
    for (t, s) in slopes.iter().enumerate() {
        rows[good[t + window - 1]].slope = Some(*s);
    }
    let top = &ys[ys.len() / 2..];
    DecayReport {
        r: spec.rank(),
        d: spec.d,
        c_target: c_closed_form(spec.rank(), spec.d),
        window,
        monotone_top_half: !top.is_empty() && top.windows(2).all(|w| w[1] < w[0]),
        top_slope: slopes.last().copied(),
        rows,
    }
}

/// Largest entry of `|pe_gram - C_{r,d}(dμ + k) I| / (dμ + k)` for the
/// metric `R^{1/2}(I + P)R^{1/2}` with sections orthonormal in its `L^2`.
pub fn perturbed_gram_deviation(
    spec: &ModelSpec,
    direction: &CMat,
    fiber_level: usize,
    mode: VolumeMode,
) -> Result<f64> {
    let spec = ModelSpec {
        mesh_size: pipeline_mesh_size(spec)?,
        ..spec.clone()
    };
    let ruled = RuledMesh::from_spec(&spec, fiber_level)?;
    let model = ruled.sym_model()?;
    let metric = SymMetric::Perturbed(model.as_ref(), direction);
    let (sample, _) = sample_model(
        model.as_ref(),
        &ruled.base,
        BundleTag::SymTwisted,
        spec.k,
        spec.d,
    );
    let field = metric.metric_field(&ruled.base)?;
    let l = l2_gram(&sample, &field, &ruled.base)?;
    let hat = hat_sections(&sample, &ruled)?.with_basis(&orthonormalizer(&l));
    let vol = match mode {
        VolumeMode::Product => {
            let f = ruled.product_factor();
            ruled.product_weights().into_iter().map(|w| w * f).collect()
        }
        VolumeMode::Induced => ruled_volume(&ruled, &metric, mode)?,
    };
    let gram = pe_gram_with(&hat, &vol, &node_metric(&ruled, &metric)?)?;
    let twist = spec.expected_curvature();
    let target = linalg::identity(hat.n).scale(c_closed_form(spec.rank(), spec.d) * twist);
    Ok(linalg::max_abs(&(gram - target)) / twist)
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PeVolume {
    /// Reference product volume throughout.
    Frozen,
    /// Induced volume of the current metric, recomputed until self-consistent.
    Recomputed,
}

#[derive(Debug, Clone)]
pub struct PeBalanceOptions {
    pub balance: BalanceOptions,
    pub volume: PeVolume,
    /// Volume recomputations allowed in [`PeVolume::Recomputed`].
    pub max_outer: usize,
    /// Scale-free Gram change between recomputations that counts as
    /// self-consistent; finite-difference noise in the volume sits near 1e-7.
    pub volume_tol: f64,
}

impl Default for PeBalanceOptions {
    fn default() -> Self {
        Self {
            balance: BalanceOptions::default(),
            volume: PeVolume::Frozen,
            max_outer: 20,
            volume_tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PeBalanceOutcome {
    pub gram: GramMatrix,
    /// `Ĥ` at every node.
    pub node_metric: Vec<f64>,
    pub volume: Vec<f64>,
    pub report: BalanceReport,
    pub outer_iterations: usize,
    /// `max |G^{-1/2} ∫ \bar ŝ_i ŝ_j Ĥ dvol G^{-1/2} - V/N δ| / (V/N)`.
    pub definition_residual: f64,
    pub converged: bool,
}

/// Fixed-point iteration for `O(d) ⊗ L^k` on `PE^*` with fiber rank 1 on the
/// ruled nodes, starting from the identity Gram of `hat`.
pub fn pe_balance_iterate(
    hat: &HatValues,
    ruled: &RuledMesh,
    opts: &PeBalanceOptions,
) -> Result<PeBalanceOutcome> {
    let values = hat.materialize()?;
    let model = ruled.sym_model()?;
    let reference = SymMetric::Reference(model.as_ref());
    let product = ruled_volume(ruled, &reference, VolumeMode::Product);
    let mut volume = match opts.volume {
        PeVolume::Frozen => product?,
        PeVolume::Recomputed => {
            let k = gram_kernel(&hat.coeffs, &linalg::identity(hat.n))?;
            ruled_volume(
                ruled,
                &SymMetric::FromGram(model.as_ref(), &k),
                VolumeMode::Induced,
            )?
        }
    };
    let mut bopts = opts.balance.clone();
    let mut outer = 0;
    let (out, converged) = loop {
        let out = balance_weighted(
            Weighted {
                values: &values,
                weights: &volume,
            },
            &bopts,
            |_, _| {},
        )?;
        outer += 1;
        let PeVolume::Recomputed = opts.volume else {
            let ok = out.report.converged;
            break (out, ok);
        };
        let k = gram_kernel(&hat.coeffs, &out.gram)?;
        let next = ruled_volume(
            ruled,
            &SymMetric::FromGram(model.as_ref(), &k),
            VolumeMode::Induced,
        )?;
        let moved = match &bopts.start {
            Some(prev) => scale_free_gram_distance(prev, &out.gram),
            None => f64::INFINITY,
        };
        volume = next;
        if out.report.converged && moved <= opts.volume_tol {
            break (out, true);
        }
        if outer >= opts.max_outer {
            break (out, false);
        }
        bopts.start = Some(out.gram.clone());
    };
    let kernel = gram_kernel(&hat.coeffs, &out.gram)?;
    let metric = SymMetric::FromGram(model.as_ref(), &kernel);
    let node = node_metric(ruled, &metric)?;
    let gram = pe_gram_with(hat, &volume, &node)?;
    let v: f64 = volume.iter().sum();
    let target = v / hat.n as f64;
    let w = linalg::hermitian_inv_sqrt(&out.gram);
    let normalized = &w * gram * &w;
    let definition_residual =
        linalg::max_abs(&(normalized - linalg::identity(hat.n).scale(target))) / target;
    Ok(PeBalanceOutcome {
        gram: out.gram,
        node_metric: node,
        volume,
        report: out.report,
        outer_iterations: outer,
        definition_residual,
        converged,
    })
}

/// Scale-free distance `(max ρ - min ρ)/(max ρ + min ρ)` of `ρ = b/a` over
/// nodes, for metrics on a line bundle.
pub fn line_metric_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    let (lo, hi) = a
        .iter()
        .zip(b)
        .map(|(x, y)| y / x)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), q| {
            (l.min(q), h.max(q))
        });
    Ok((hi - lo) / (hi + lo))
}

/// `Ĥ` of the projectivized balanced metric of a pipeline run.
pub fn projectivized_node_metric(run: &PipelineRun) -> Result<Vec<f64>> {
    let model = run.ruled.sym_model()?;
    let kernel = run.kernel()?;
    node_metric(&run.ruled, &SymMetric::FromGram(model.as_ref(), &kernel))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fubini_study_density_formula() {
        // det Hess log(x^† B x) = det B/(x^† B x)^r in the chart x_0 = 1.
        let b = CMat::from_row_slice(2, 2, &[c(2.0, 0.0), c(0.3, 0.4), c(0.3, -0.4), c(1.0, 0.0)]);
        let x0 = [c(1.0, 0.0), c(0.2, -0.7)];
        let half = FD_STEP / 2.0;
        let pot = |o: &[i32]| {
            let y = [x0[0], x0[1] + c(o[0] as f64 * half, o[1] as f64 * half)];
            linalg::quad_form(&b, &y).ln()
        };
        let h = richardson_hessian(2, &pot);
        let det = 0.25 * (h[0][0] + h[1][1]);
        let exact = b.determinant().re / linalg::quad_form(&b, &x0).powi(2);
        // Roundoff floor of the differenced log at this step is a few 1e-7.
        assert!((det - exact).abs() / exact < 1e-6, "{det} {exact}");
    }

    #[test]
    fn report_of_scalar_gram() {
        let g = linalg::identity(4).scale(3.0);
        let rep = almost_balanced_report(&g, 2, 1, 1.0, 2);
        assert_eq!(rep.op_norm_m, 0.0);
        assert_eq!(rep.d_avg, 3.0);
        assert!(rep.m.trace().norm() == 0.0);
    }

    #[test]
    fn line_distance_is_scale_free() {
        let a = [1.0, 2.0, 3.0];
        let b = [2.0, 4.0, 6.0];
        assert_eq!(line_metric_distance(&a, &b).unwrap(), 0.0);
        assert!(line_metric_distance(&a, &[1.0, 2.0, 3.3]).unwrap() > 0.0);
    }
}
