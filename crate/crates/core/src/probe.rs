//! Asymptotic probes in the tensor power `k`: the Bergman density expansion
//! and the rate at which balanced metrics approach the reference metric.

use serde::{Deserialize, Serialize};

use crate::balance::{balance_iterate, bergman_kernel, field_distance, l2_gram, BalanceOptions};
use crate::error::{Error, Result};
use crate::model::{generate, ModelKind, ModelSpec};

/// Least-squares slope and intercept of `y` against `x`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

/// Slope of `log y` against `log x`.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    linear_fit(&lx, &ly).0
}

/// Log-log slopes over every run of `window` consecutive points.
pub fn sliding_slopes(x: &[f64], y: &[f64], window: usize) -> Vec<f64> {
    if window < 2 || x.len() < window {
        return vec![];
    }
    (0..=x.len() - window)
        .map(|i| loglog_slope(&x[i..i + window], &y[i..i + window]))
        .collect()
}

/// Mesh size used for twist `k`: the spec's size, raised for tori to six
/// points per unit of degree so the Gaussian factors are resolved.
pub fn probe_mesh_size(spec: &ModelSpec) -> usize {
    match &spec.kind {
        ModelKind::TorusLine { d0, .. } => spec.mesh_size.max(6 * spec.k * d0),
        ModelKind::P1Split { .. } => spec.mesh_size,
    }
}

fn check_range(k_range: &[usize], min: usize) -> Result<()> {
    if k_range.len() < min {
        return Err(Error::InvalidArgument(format!(
            "k range needs at least {min} values, got {}",
            k_range.len()
        )));
    }
    if k_range.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument(
            "k range must be strictly increasing".into(),
        ));
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExpansionRow {
    pub k: usize,
    pub n: usize,
    /// Mean density `B̄ V / deg L`, whose leading term is `k`.
    pub density: f64,
    /// `max_p ||B(p) - B̄||_op / B̄`.
    pub constancy: f64,
    /// `|Σ_p w_p tr B(p) - N|`.
    pub trace_error: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExpansionReport {
    pub rows: Vec<ExpansionRow>,
    pub leading: f64,
    pub a1: f64,
    pub fit_residual: f64,
}

/// Bergman kernel of the reference metric for each `k`, its spatial spread,
/// and the fit `density ≈ leading · k + a1`.
pub fn bergman_expansion_probe(spec: &ModelSpec, k_range: &[usize]) -> Result<ExpansionReport> {
    check_range(k_range, 3)?;
    if !spec.hermitian_einstein() {
        return Err(Error::NotHermitianEinstein);
    }
    let mut rows = Vec::with_capacity(k_range.len());
    for &k in k_range {
        let s = spec.with_k(k);
        let s = ModelSpec {
            mesh_size: probe_mesh_size(&s),
            ..s
        };
        let g = generate(&s)?;
        let b = bergman_kernel(&g.sample, &g.metric, &g.mesh)?;
        let n = g.sample.n;
        let r = g.sample.fiber_rank as f64;
        let trace = b.integrated_trace(&g.mesh.weights);
        let mean = trace / (r * g.mesh.total_volume);
        let constancy = b
            .spectra(&g.metric)
            .iter()
            .flatten()
            .fold(0.0f64, |m, e| m.max((e - mean).abs()))
            / mean;
        rows.push(ExpansionRow {
            k,
            n,
            density: mean * g.mesh.total_volume / s.polarization_degree(),
            constancy,
            trace_error: (trace - n as f64).abs(),
        });
    }
    let ks: Vec<f64> = rows.iter().map(|r| r.k as f64).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.density).collect();
    let (leading, a1) = linear_fit(&ks, &ys);
    let fit_residual = (ks
        .iter()
        .zip(&ys)
        .map(|(k, y)| (y - leading * k - a1).powi(2))
        .sum::<f64>()
        / ks.len() as f64)
        .sqrt();
    Ok(ExpansionReport {
        rows,
        leading,
        a1,
        fit_residual,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RateRow {
    pub k: usize,
    pub n: usize,
    /// Scale-free sup distance between the balanced and reference metrics.
    pub delta: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RateReport {
    pub rows: Vec<RateRow>,
    pub window: usize,
    /// Sliding log-log slopes of `delta` against `k` over converged rows.
    pub slopes: Vec<f64>,
    pub monotone: bool,
}

impl RateReport {
    pub fn top_slope(&self) -> Option<f64> {
        self.slopes.last().copied()
    }
}

/// Where [`convergence_rate_probe`] starts each balancing run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RateStart {
    Identity,
    /// The L² Gram of the reference metric.
    Reference,
}

/// Balances each `L^k` (or `E ⊗ L^k`) and measures how far the balanced
/// metric is from the reference one.
pub fn convergence_rate_probe(
    spec: &ModelSpec,
    k_range: &[usize],
    opts: &BalanceOptions,
    start: RateStart,
    window: usize,
) -> Result<RateReport> {
    check_range(k_range, window.max(2))?;
    let mut rows = Vec::with_capacity(k_range.len());
    for &k in k_range {
        let s = spec.with_k(k);
        let s = ModelSpec {
            mesh_size: probe_mesh_size(&s),
            ..s
        };
        let g = generate(&s)?;
        let mut o = opts.clone();
        if start == RateStart::Reference {
            o.start = Some(l2_gram(&g.sample, &g.metric, &g.mesh)?);
        }
        let out = balance_iterate(&g.sample, &g.mesh, &o)?;
        rows.push(RateRow {
            k,
            n: g.sample.n,
            delta: field_distance(&g.metric, &out.metric)?,
            iterations: out.report.iterations,
            converged: out.report.converged,
        });
    }
    let good: Vec<&RateRow> = rows.iter().filter(|r| r.converged).collect();
    let ks: Vec<f64> = good.iter().map(|r| r.k as f64).collect();
    let ds: Vec<f64> = good.iter().map(|r| r.delta).collect();
    let monotone = ds.windows(2).all(|w| w[1] < w[0]);
    Ok(RateReport {
        slopes: sliding_slopes(&ks, &ds, window),
        rows,
        window,
        monotone,
    })
}
