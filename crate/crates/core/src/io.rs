//! On-disk formats: matrix text dumps and section samples.
//!
//! Matrix text: a header line `# rows cols` (or `# rows cols count` for a
//! stack of equally shaped matrices), then one line per row holding
//! `re im` pairs, 17 significant digits, blocks in order.
//!
//! A section sample is a JSON manifest next to two payloads: the mesh
//! (`# points n`, then `chart re im weight` per point) and the section
//! values (a stack of `fiber_rank × N` matrices, one per mesh point).
//! An optional third payload holds the metric field.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::linalg::{c, CMat};
use crate::model::{BaseMesh, BundleTag, MetricField, ModelSpec, SectionSample};

pub const SAMPLE_FORMAT: &str = "projbal-sample";
pub const SAMPLE_VERSION: u32 = 1;

fn fmt(x: f64) -> String {
    format!("{x:.16e}")
}

fn parse_f64(tok: &str, line: usize) -> Result<f64> {
    tok.parse()
        .map_err(|_| Error::Parse(format!("line {line}: `{tok}` is not a number")))
}

pub fn matrix_to_text(m: &CMat) -> String {
    let mut out = format!("# {} {}\n", m.nrows(), m.ncols());
    push_rows(&mut out, m);
    out
}

pub fn matrices_to_text(ms: &[CMat]) -> Result<String> {
    let (rows, cols) = ms.first().map(|m| (m.nrows(), m.ncols())).unwrap_or((0, 0));
    let mut out = format!("# {rows} {cols} {}\n", ms.len());
    for m in ms {
        if (m.nrows(), m.ncols()) != (rows, cols) {
            return Err(Error::DimensionMismatch {
                expected: rows * cols,
                got: m.nrows() * m.ncols(),
            });
        }
        push_rows(&mut out, m);
    }
    Ok(out)
}

fn push_rows(out: &mut String, m: &CMat) {
    for i in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols())
            .map(|j| format!("{} {}", fmt(m[(i, j)].re), fmt(m[(i, j)].im)))
            .collect();
        writeln!(out, "{}", row.join(" ")).unwrap();
    }
}

pub fn matrix_from_text(text: &str) -> Result<CMat> {
    let mut ms = matrices_from_text(text)?;
    if ms.len() != 1 {
        return Err(Error::Parse(format!(
            "expected one matrix, found {}",
            ms.len()
        )));
    }
    Ok(ms.remove(0))
}

pub fn matrices_from_text(text: &str) -> Result<Vec<CMat>> {
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::Parse("empty matrix file".into()))?;
    let dims: Vec<usize> = header
        .strip_prefix('#')
        .ok_or_else(|| Error::Parse("line 1: missing `# rows cols` header".into()))?
        .split_whitespace()
        .map(|t| {
            t.parse()
                .map_err(|_| Error::Parse(format!("line 1: bad dimension `{t}`")))
        })
        .collect::<Result<_>>()?;
    let (rows, cols, count) = match dims[..] {
        [r, c] => (r, c, 1),
        [r, c, n] => (r, c, n),
        _ => {
            return Err(Error::Parse(
                "line 1: header needs 2 or 3 dimensions".into(),
            ))
        }
    };
    let mut out = Vec::with_capacity(count);
    let mut current = CMat::zeros(rows, cols);
    let mut i = 0;
    for (no, line) in lines {
        if out.len() == count {
            return Err(Error::Parse(format!("line {}: trailing data", no + 1)));
        }
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|t| parse_f64(t, no + 1))
            .collect::<Result<_>>()?;
        if vals.len() != 2 * cols {
            return Err(Error::Parse(format!(
                "line {}: {} fields, expected {}",
                no + 1,
                vals.len(),
                2 * cols
            )));
        }
        for j in 0..cols {
            current[(i, j)] = c(vals[2 * j], vals[2 * j + 1]);
        }
        i += 1;
        if i == rows {
            out.push(std::mem::replace(&mut current, CMat::zeros(rows, cols)));
            i = 0;
        }
    }
    if rows == 0 || cols == 0 {
        out.resize(count, CMat::zeros(rows, cols));
    }
    if out.len() != count || i != 0 {
        return Err(Error::Parse(format!(
            "expected {count} matrices of {rows} rows, data ended early"
        )));
    }
    Ok(out)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes through a temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn mesh_to_text(mesh: &BaseMesh) -> String {
    let mut out = format!("# points {}\n", mesh.len());
    for ((z, ch), w) in mesh.points.iter().zip(&mesh.charts).zip(&mesh.weights) {
        writeln!(out, "{ch} {} {} {}", fmt(z.re), fmt(z.im), fmt(*w)).unwrap();
    }
    out
}

pub fn mesh_from_text(text: &str) -> Result<BaseMesh> {
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::Parse("empty mesh file".into()))?;
    let count: usize = header
        .strip_prefix("# points")
        .and_then(|t| t.trim().parse().ok())
        .ok_or_else(|| Error::Parse("line 1: expected `# points n`".into()))?;
    let mut mesh = BaseMesh {
        points: Vec::with_capacity(count),
        charts: Vec::with_capacity(count),
        weights: Vec::with_capacity(count),
        total_volume: 0.0,
    };
    for (no, line) in lines {
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != 4 {
            return Err(Error::Parse(format!(
                "line {}: expected `chart re im weight`",
                no + 1
            )));
        }
        let chart = toks[0]
            .parse()
            .map_err(|_| Error::Parse(format!("line {}: bad chart `{}`", no + 1, toks[0])))?;
        mesh.charts.push(chart);
        mesh.points
            .push(c(parse_f64(toks[1], no + 1)?, parse_f64(toks[2], no + 1)?));
        mesh.weights.push(parse_f64(toks[3], no + 1)?);
    }
    if mesh.len() != count {
        return Err(Error::Parse(format!(
            "expected {count} points, found {}",
            mesh.len()
        )));
    }
    mesh.total_volume = mesh.weights.iter().sum();
    Ok(mesh)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PayloadRef {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleManifest {
    pub format: String,
    pub version: u32,
    pub model: Option<ModelSpec>,
    pub tag: BundleTag,
    pub fiber_rank: usize,
    pub d: usize,
    pub k: usize,
    pub n: usize,
    pub mesh_size: usize,
    /// How section values are expressed.
    pub frame: String,
    pub mesh: PayloadRef,
    pub values: PayloadRef,
    pub metric: Option<PayloadRef>,
}

#[derive(Debug, Clone)]
pub struct LoadedSample {
    pub manifest: SampleManifest,
    pub sample: SectionSample,
    pub mesh: BaseMesh,
    pub metric: Option<MetricField>,
}

const FRAME: &str = "local holomorphic frame of each point's chart; for p1-split models the \
monomial frame e^I of Sym^d E twisted by the k-th power of the O(1) frame";

fn payload(dir: &Path, name: String, text: String) -> Result<PayloadRef> {
    let sha256 = sha256_hex(text.as_bytes());
    write_atomic(&dir.join(&name), text.as_bytes())?;
    Ok(PayloadRef { path: name, sha256 })
}

/// Writes `<stem>.json` with its payloads into `dir`; returns the manifest path.
pub fn save_sample(
    dir: &Path,
    stem: &str,
    sample: &SectionSample,
    mesh: &BaseMesh,
    metric: Option<&MetricField>,
    model: Option<&ModelSpec>,
) -> Result<PathBuf> {
    if sample.mesh_size() != mesh.len() {
        return Err(Error::DimensionMismatch {
            expected: mesh.len(),
            got: sample.mesh_size(),
        });
    }
    let mesh_ref = payload(dir, format!("{stem}.mesh.txt"), mesh_to_text(mesh))?;
    let values = payload(
        dir,
        format!("{stem}.values.txt"),
        matrices_to_text(&sample.values)?,
    )?;
    let metric = match metric {
        Some(m) => Some(payload(
            dir,
            format!("{stem}.metric.txt"),
            matrices_to_text(&m.mats)?,
        )?),
        None => None,
    };
    let manifest = SampleManifest {
        format: SAMPLE_FORMAT.into(),
        version: SAMPLE_VERSION,
        model: model.cloned(),
        tag: sample.tag,
        fiber_rank: sample.fiber_rank,
        d: sample.d,
        k: sample.k,
        n: sample.n,
        mesh_size: mesh.len(),
        frame: FRAME.into(),
        mesh: mesh_ref,
        values,
        metric,
    };
    let path = dir.join(format!("{stem}.json"));
    write_atomic(&path, serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    Ok(path)
}

fn read_payload(dir: &Path, r: &PayloadRef) -> Result<String> {
    let text = fs::read_to_string(dir.join(&r.path))?;
    let got = sha256_hex(text.as_bytes());
    if got != r.sha256 {
        return Err(Error::Parse(format!(
            "payload `{}` hash mismatch: manifest {}, file {got}",
            r.path, r.sha256
        )));
    }
    Ok(text)
}

pub fn load_sample(manifest_path: &Path) -> Result<LoadedSample> {
    let manifest: SampleManifest = serde_json::from_str(&fs::read_to_string(manifest_path)?)?;
    if manifest.format != SAMPLE_FORMAT || manifest.version != SAMPLE_VERSION {
        return Err(Error::Parse(format!(
            "unsupported sample format {} v{}",
            manifest.format, manifest.version
        )));
    }
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let mesh = mesh_from_text(&read_payload(dir, &manifest.mesh)?)?;
    let values = matrices_from_text(&read_payload(dir, &manifest.values)?)?;
    if values.len() != mesh.len() || mesh.len() != manifest.mesh_size {
        return Err(Error::Parse(format!(
            "{} value blocks for {} mesh points (manifest says {})",
            values.len(),
            mesh.len(),
            manifest.mesh_size
        )));
    }
    if values
        .iter()
        .any(|v| v.nrows() != manifest.fiber_rank || v.ncols() != manifest.n)
    {
        return Err(Error::Parse(format!(
            "value blocks are not {} × {}",
            manifest.fiber_rank, manifest.n
        )));
    }
    let metric = match &manifest.metric {
        Some(r) => {
            let mats = matrices_from_text(&read_payload(dir, r)?)?;
            if mats.len() != mesh.len() {
                return Err(Error::Parse(
                    "metric payload does not match the mesh".into(),
                ));
            }
            Some(MetricField { mats })
        }
        None => None,
    };
    let sample = SectionSample {
        n: manifest.n,
        fiber_rank: manifest.fiber_rank,
        tag: manifest.tag,
        k: manifest.k,
        d: manifest.d,
        values,
    };
    Ok(LoadedSample {
        manifest,
        sample,
        mesh,
        metric,
    })
}
