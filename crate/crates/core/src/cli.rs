//! Command-line front end: configuration, run directories and manifests.
//!
//! Every command writes into `<out>/<command>-<id>/`, where `<id>` is the
//! first 12 hex digits of a SHA-256 over the command name, the effective
//! configuration and the content of every input file. Artifacts are written
//! through temporary files and renamed; `manifest.json` comes last.
//!
//! Exit codes: 0 all checks pass, 2 numeric check failure, 3 configuration
//! or input error, 4 convergence failure.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::balance::{
    balance_iterate, field_distance, l2_gram, Acceleration, BalanceOptions, BalanceReport,
    GramMatrix,
};
use crate::error::Error;
use crate::fiber::{
    c_closed_form, c_constant, certified_c, eval_induced_metric, eval_section, fiber_gram,
    fs_quadrature, fs_quadrature_monte_carlo, FiberPoint, QuadratureRule, QuadratureScheme,
};
use crate::herm::{sym_power_metric, HermMetric, SymBasisMap};
use crate::io::{self, load_sample, matrices_to_text, matrix_from_text, matrix_to_text};
use crate::linalg::{self, c, C64};
use crate::model::{generate, BaseMesh, MetricField, ModelKind, ModelSpec, SectionSample};
use crate::probe::{probe_mesh_size, RateStart};
use crate::ruled::{
    almost_balanced_from_gram, almost_balanced_pipeline, almost_balanced_report, decay_report,
    line_metric_distance, orthonormalizer, pe_balance_iterate, pe_gram_with, pipeline_mesh_size,
    projectivized_node_metric, DecayRow, PeBalanceOptions, PeVolume, PipelineOptions, VolumeMode,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_NUMERIC: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;
pub const EXIT_NOT_CONVERGED: i32 = 4;

const GRAM_TOL: f64 = 1e-6;
const POINTWISE_TOL: f64 = 1e-12;
const POINTWISE_MAX_CONDITION: f64 = 4.0;
const ORTHONORMAL_TOL: f64 = 1e-13;
const R1_DEFECT_TOL: f64 = 1e-11;

#[derive(Debug, Parser)]
#[command(
    name = "projbal",
    version,
    about = "Balanced metrics on symmetric powers and their projectivizations"
)]
pub struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Root directory for run outputs.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[arg(long, global = true)]
    pub tol: Option<f64>,
    #[arg(long = "max-iter", global = true)]
    pub max_iter: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fiber-integral checks over a grid of ranks and degrees.
    VerifyFiber,
    /// Balance `Sym^d E ⊗ L^k` (or an external sample) for each k.
    Balance,
    /// Balance `O(d) ⊗ L^k` directly on the projectivization and compare.
    BalancePe,
    /// Decay of the almost-balanced defect in k.
    ProbeDecay,
    /// Merge the manifests under a directory into `summary.json`.
    Report {
        /// Directory holding run directories (defaults to `--out`).
        run_dir: Option<PathBuf>,
    },
}

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn config(msg: impl Into<String>) -> Self {
        Self {
            code: EXIT_CONFIG,
            message: msg.into(),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::NotConverged { .. } => EXIT_NOT_CONVERGED,
            Error::InvalidArgument(_)
            | Error::Parse(_)
            | Error::Io(_)
            | Error::Json(_)
            | Error::DegreeOutOfRange(_)
            | Error::MeshTooSmall { .. }
            | Error::SizeCap { .. }
            | Error::BasisMismatch { .. }
            | Error::DimensionMismatch { .. } => EXIT_CONFIG,
            _ => EXIT_NUMERIC,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

// ---------------------------------------------------------------- config

/// `k` values: an integer, a list, or a string `"4..20"` (inclusive),
/// `"4..=20"` or `"4,8,16"`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum KSpec {
    One(usize),
    List(Vec<usize>),
    Text(String),
}

impl KSpec {
    pub fn values(&self) -> CliResult<Vec<usize>> {
        let ks = match self {
            KSpec::One(k) => vec![*k],
            KSpec::List(v) => v.clone(),
            KSpec::Text(t) => parse_k_text(t)?,
        };
        if ks.is_empty() {
            return Err(CliError::config("model.k: empty k range"));
        }
        if ks.windows(2).any(|w| w[0] >= w[1]) {
            return Err(CliError::config(
                "model.k: k values must be strictly increasing",
            ));
        }
        Ok(ks)
    }
}

fn parse_k_text(t: &str) -> CliResult<Vec<usize>> {
    let bad = || CliError::config(format!("model.k: malformed k range `{t}`"));
    let num = |s: &str| s.trim().parse::<usize>().map_err(|_| bad());
    if let Some((a, b)) = t.split_once("..") {
        let b = b.strip_prefix('=').unwrap_or(b);
        let (a, b) = (num(a)?, num(b)?);
        if a > b {
            return Err(bad());
        }
        return Ok((a..=b).collect());
    }
    t.split(',').map(num).collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    /// `p1-split` or `torus-line`.
    pub kind: String,
    #[serde(default)]
    pub degrees: Vec<i64>,
    #[serde(default)]
    pub tau_re: f64,
    #[serde(default = "one_f64")]
    pub tau_im: f64,
    #[serde(default = "one_usize")]
    pub d0: usize,
    #[serde(default = "one_usize")]
    pub d: usize,
    /// Zero picks the smallest size meeting the model's exactness contract.
    #[serde(default)]
    pub mesh_size: usize,
    pub k: KSpec,
}

fn one_f64() -> f64 {
    1.0
}
fn one_usize() -> usize {
    1
}

impl ModelSection {
    fn spec(&self, k: usize) -> CliResult<ModelSpec> {
        let kind = match self.kind.as_str() {
            "p1-split" => ModelKind::P1Split {
                degrees: self.degrees.clone(),
            },
            "torus-line" => ModelKind::TorusLine {
                tau_re: self.tau_re,
                tau_im: self.tau_im,
                d0: self.d0,
            },
            other => {
                return Err(CliError::config(format!(
                    "model.kind: unknown model `{other}` (expected p1-split or torus-line)"
                )))
            }
        };
        let spec = ModelSpec {
            kind,
            k,
            d: self.d,
            mesh_size: self.mesh_size.max(1),
        };
        spec.validate()
            .map_err(|e| CliError::config(format!("model: {e}")))?;
        let mesh = match spec.kind {
            ModelKind::P1Split { .. } => pipeline_mesh_size(&spec)?,
            ModelKind::TorusLine { .. } => {
                let m = spec.mesh_size.max(spec.build()?.required_mesh_size());
                probe_mesh_size(&ModelSpec {
                    mesh_size: m,
                    ..spec.clone()
                })
            }
        };
        Ok(ModelSpec {
            mesh_size: mesh,
            ..spec
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BalanceSection {
    /// `anderson`, `damped` or `none`.
    pub acceleration: String,
    pub alpha: f64,
    pub depth: usize,
    /// `identity`, `reference`, or a Gram file; `{k}` is replaced by k.
    pub start: String,
    /// Manifest of an external section sample, used instead of `[model]`.
    pub sample: Option<PathBuf>,
    /// Also write the generated samples into the run directory.
    pub export_sample: bool,
}

impl Default for BalanceSection {
    fn default() -> Self {
        Self {
            acceleration: "anderson".into(),
            alpha: 0.5,
            depth: 6,
            start: "identity".into(),
            sample: None,
            export_sample: false,
        }
    }
}

impl BalanceSection {
    fn acceleration(&self) -> CliResult<Acceleration> {
        match self.acceleration.as_str() {
            "anderson" if self.depth >= 1 => Ok(Acceleration::Anderson { depth: self.depth }),
            "damped" if self.alpha > 0.0 && self.alpha <= 1.0 => {
                Ok(Acceleration::Damped { alpha: self.alpha })
            }
            "none" => Ok(Acceleration::None),
            "anderson" => Err(CliError::config("balance.depth must be at least 1")),
            "damped" => Err(CliError::config("balance.alpha must lie in (0, 1]")),
            other => Err(CliError::config(format!(
                "balance.acceleration: unknown scheme `{other}` (expected anderson, damped or none)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FiberSection {
    pub ranks: Vec<usize>,
    pub degrees: Vec<usize>,
    /// Product rule level; the exact level `d` when absent.
    pub level: Option<usize>,
    /// `product` or `monte-carlo` (which needs a seed).
    pub scheme: String,
    pub samples: usize,
    pub trials: usize,
    pub max_condition: f64,
}

impl Default for FiberSection {
    fn default() -> Self {
        Self {
            ranks: vec![1, 2, 3],
            degrees: vec![1, 2, 3],
            level: None,
            scheme: "product".into(),
            samples: 20000,
            trials: 5,
            max_condition: 10.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProjectiveSection {
    pub fiber_level: usize,
    /// Volume form on the ruled surface: `product` or `induced`.
    pub volume: VolumeMode,
    /// Volume used by `balance-pe`: `frozen` or `recomputed`.
    pub pe_volume: PeVolume,
    /// Start of the base balancing: `reference` or `identity`.
    pub start: RateStart,
    pub window: usize,
    /// Run the base balancing inside `probe-decay`; otherwise load Grams
    /// from earlier `balance` runs under `--out`.
    pub auto_run: bool,
    /// Tolerance on the defining identity of the direct PE balancing;
    /// 1e-8 for frozen volumes and 1e-6 for recomputed ones when absent.
    pub def_tol: Option<f64>,
}

impl Default for ProjectiveSection {
    fn default() -> Self {
        Self {
            fiber_level: 8,
            volume: VolumeMode::Product,
            pe_volume: PeVolume::Frozen,
            start: RateStart::Reference,
            window: 3,
            auto_run: true,
            def_tol: None,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub seed: Option<u64>,
    pub tol: Option<f64>,
    pub max_iter: Option<usize>,
    pub model: Option<ModelSection>,
    #[serde(default)]
    pub balance: BalanceSection,
    #[serde(default)]
    pub fiber: FiberSection,
    #[serde(default)]
    pub projective: ProjectiveSection,
}

impl Config {
    pub fn parse(text: &str) -> CliResult<Self> {
        toml::from_str(text).map_err(|e| CliError::config(format!("config: {e}")))
    }

    fn model(&self) -> CliResult<&ModelSection> {
        self.model
            .as_ref()
            .ok_or_else(|| CliError::config("config needs a [model] section for this command"))
    }

    fn tol(&self) -> f64 {
        self.tol.unwrap_or(1e-10)
    }

    fn max_iter(&self) -> usize {
        self.max_iter.unwrap_or(200)
    }

    fn balance_options(&self) -> CliResult<BalanceOptions> {
        if !(self.tol() > 0.0) {
            return Err(CliError::config("tol must be positive"));
        }
        if self.max_iter() == 0 {
            return Err(CliError::config("max_iter must be positive"));
        }
        Ok(BalanceOptions {
            tol: self.tol(),
            max_iter: self.max_iter(),
            acceleration: self.balance.acceleration()?,
            start: None,
        })
    }
}

// ------------------------------------------------------------ run record

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Stage {
    pub name: String,
    pub status: String,
    pub wall_time_secs: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Artifact {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub id: String,
    pub config: Value,
    pub seed: Option<u64>,
    pub input_hashes: BTreeMap<String, String>,
    pub stages: Vec<Stage>,
    pub artifacts: Vec<Artifact>,
    pub rows: Vec<Value>,
    pub status: String,
    pub exit_code: i32,
    pub wall_time_secs: f64,
}

struct Run {
    dir: PathBuf,
    manifest: RunManifest,
    started: Instant,
}

impl Run {
    fn start(
        out: &Path,
        command: &str,
        config: &Config,
        inputs: BTreeMap<String, String>,
    ) -> CliResult<Self> {
        let config = serde_json::to_value(config).map_err(Error::from)?;
        let mut key = format!("{command}\n{config}\n");
        for (name, hash) in &inputs {
            key.push_str(&format!("{name}={hash}\n"));
        }
        let id = format!("{command}-{}", &io::sha256_hex(key.as_bytes())[..12]);
        let dir = out.join(&id);
        fs::create_dir_all(&dir).map_err(Error::from)?;
        Ok(Self {
            dir,
            manifest: RunManifest {
                command: command.into(),
                version: env!("CARGO_PKG_VERSION").into(),
                id,
                seed: config.get("seed").and_then(Value::as_u64),
                config,
                input_hashes: inputs,
                stages: vec![],
                artifacts: vec![],
                rows: vec![],
                status: "running".into(),
                exit_code: EXIT_OK,
                wall_time_secs: 0.0,
            },
            started: Instant::now(),
        })
    }

    fn artifact(&mut self, name: &str, bytes: &[u8]) -> CliResult<()> {
        io::write_atomic(&self.dir.join(name), bytes)?;
        self.manifest.artifacts.retain(|a| a.path != name);
        self.manifest.artifacts.push(Artifact {
            path: name.into(),
            sha256: io::sha256_hex(bytes),
        });
        Ok(())
    }

    /// Records a file some library routine already wrote into the run dir.
    fn adopt(&mut self, path: &Path) -> CliResult<()> {
        let bytes = fs::read(path).map_err(Error::from)?;
        let name = path
            .strip_prefix(&self.dir)
            .unwrap_or(path)
            .to_string_lossy()
            .into_owned();
        self.manifest.artifacts.push(Artifact {
            path: name,
            sha256: io::sha256_hex(&bytes),
        });
        Ok(())
    }

    fn stage(&mut self, name: String, status: &str, t0: Instant) {
        self.manifest.stages.push(Stage {
            name,
            status: status.into(),
            wall_time_secs: t0.elapsed().as_secs_f64(),
        });
    }

    fn finish(mut self, code: i32) -> CliResult<i32> {
        self.manifest.exit_code = code;
        self.manifest.status = match code {
            EXIT_OK => "pass",
            EXIT_NOT_CONVERGED => "not-converged",
            _ => "fail",
        }
        .into();
        self.manifest.wall_time_secs = self.started.elapsed().as_secs_f64();
        let text = serde_json::to_string_pretty(&self.manifest).map_err(Error::from)?;
        io::write_atomic(&self.dir.join("manifest.json"), text.as_bytes())?;
        println!("run directory: {}", self.dir.display());
        Ok(code)
    }
}

fn hash_file(path: &Path) -> CliResult<String> {
    let bytes = fs::read(path)
        .map_err(|e| CliError::config(format!("cannot read {}: {e}", path.display())))?;
    Ok(io::sha256_hex(&bytes))
}

// ------------------------------------------------------------ entry

/// Parses `std::env::args` and runs; returns the process exit code.
pub fn main_from_env() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}

pub fn run(cli: &Cli) -> CliResult<i32> {
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return Err(CliError::config("--jobs must be positive"));
        }
        // Ignored if the pool already exists (repeated calls in one process).
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global();
    }
    if let Command::Report { run_dir } = &cli.command {
        return cmd_report(run_dir.as_deref().unwrap_or(&cli.out));
    }
    let (mut config, base, mut inputs) = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::config(format!("cannot read {}: {e}", path.display())))?;
            let mut inputs = BTreeMap::new();
            inputs.insert("config".to_string(), io::sha256_hex(text.as_bytes()));
            let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
            (Config::parse(&text)?, base, inputs)
        }
        None => (Config::default(), PathBuf::new(), BTreeMap::new()),
    };
    if cli.seed.is_some() {
        config.seed = cli.seed;
    }
    if cli.tol.is_some() {
        config.tol = cli.tol;
    }
    if cli.max_iter.is_some() {
        config.max_iter = cli.max_iter;
    }
    if let Some(sample) = &config.balance.sample {
        let path = base.join(sample);
        inputs.insert("sample".into(), hash_file(&path)?);
        config.balance.sample = Some(path);
    }
    match &cli.command {
        Command::VerifyFiber => cmd_verify_fiber(&cli.out, &config, inputs),
        Command::Balance => cmd_balance(&cli.out, &config, &base, inputs),
        Command::BalancePe => cmd_balance_pe(&cli.out, &config, inputs),
        Command::ProbeDecay => cmd_probe_decay(&cli.out, &config, inputs),
        Command::Report { .. } => unreachable!(),
    }
}

fn fmt17(x: f64) -> String {
    format!("{x:.16e}")
}

// ------------------------------------------------------------ verify-fiber

fn random_metric(rng: &mut ChaCha8Rng, n: usize, cond: f64) -> CliResult<HermMetric> {
    let a = DMatrix::from_fn(n, n, |_, _| {
        c(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
    });
    let u = a.qr().q();
    let spec: Vec<f64> = (0..n)
        .map(|i| match i {
            0 => 1.0,
            _ if i + 1 == n => cond,
            _ => rng.random_range(1.0..cond),
        })
        .collect();
    let m = &u * linalg::real_diag(&spec) * u.adjoint();
    Ok(HermMetric::new(linalg::symmetrize(&m), "e")?)
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<C64> {
    (0..n)
        .map(|_| c(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
        .collect()
}

#[derive(Debug, Clone, Serialize)]
struct Check {
    r: usize,
    d: usize,
    check: &'static str,
    error: f64,
    tolerance: f64,
    pass: bool,
    message: Option<String>,
}

fn check(r: usize, d: usize, name: &'static str, tol: f64, res: crate::Result<f64>) -> Check {
    match res {
        Ok(error) => Check {
            r,
            d,
            check: name,
            error,
            tolerance: tol,
            pass: error <= tol,
            message: None,
        },
        Err(e) => Check {
            r,
            d,
            check: name,
            error: match e {
                Error::QuadratureUnderResolved { spread, .. } => spread,
                _ => f64::NAN,
            },
            tolerance: tol,
            pass: false,
            message: Some(e.to_string()),
        },
    }
}

fn fiber_rule(
    cfg: &FiberSection,
    seed: Option<u64>,
    r: usize,
    d: usize,
) -> CliResult<QuadratureRule> {
    let scheme: QuadratureScheme = cfg
        .scheme
        .parse()
        .map_err(|e: Error| CliError::config(format!("fiber.scheme: {e}")))?;
    Ok(match scheme {
        QuadratureScheme::Product => fs_quadrature(r, cfg.level.unwrap_or(d))?,
        QuadratureScheme::MonteCarlo => {
            let seed = seed.ok_or_else(|| {
                CliError::config(
                    "fiber.scheme = \"monte-carlo\" needs a seed (config `seed` or --seed)",
                )
            })?;
            fs_quadrature_monte_carlo(r, cfg.samples, seed.wrapping_add(r as u64))?
        }
    })
}

fn cmd_verify_fiber(
    out: &Path,
    config: &Config,
    inputs: BTreeMap<String, String>,
) -> CliResult<i32> {
    let cfg = &config.fiber;
    if cfg.ranks.is_empty()
        || cfg.degrees.is_empty()
        || cfg.ranks.contains(&0)
        || cfg.degrees.contains(&0)
    {
        return Err(CliError::config(
            "fiber.ranks and fiber.degrees must be non-empty and positive",
        ));
    }
    if !(cfg.max_condition >= 1.0) || cfg.trials == 0 {
        return Err(CliError::config(
            "fiber.max_condition must be >= 1 and fiber.trials positive",
        ));
    }
    if cfg.level == Some(0) {
        return Err(CliError::config("fiber.level must be positive"));
    }
    for &d in &cfg.degrees {
        SymBasisMap::new(1, d)?;
        crate::herm::sym_power_metric(&HermMetric::identity(1, "e"), d)?;
    }
    // Rules are built before the run directory exists so config errors leave no trace.
    let mut rules = BTreeMap::new();
    for &r in &cfg.ranks {
        for &d in &cfg.degrees {
            rules.insert((r, d), fiber_rule(cfg, config.seed, r, d)?);
        }
    }
    let mut run = Run::start(out, "verify-fiber", config, inputs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.unwrap_or(0));
    let mut checks = Vec::new();
    for &r in &cfg.ranks {
        for &d in &cfg.degrees {
            let t0 = Instant::now();
            let rule = &rules[&(r, d)];
            let slack = 10.0 * rule.tolerance();
            let closed = c_closed_form(r, d);
            let mut these = vec![check(
                r,
                d,
                "c_constant",
                slack,
                certified_c(r, d, rule)
                    .and_then(|_| c_constant(r, d, rule))
                    .map(|v| (v - closed).abs() / closed),
            )];
            if r == 1 {
                these.push(check(r, d, "c_rank_one", 0.0, Ok((closed - 1.0).abs())));
            }
            let mut worst = Ok(0.0f64);
            for _ in 0..cfg.trials {
                let h = random_metric(&mut rng, r, cfg.max_condition)?;
                worst = worst.and_then(|w| {
                    let g = fiber_gram(&h, d, rule)?;
                    let s = sym_power_metric(&h, d)?;
                    let diff = g.matrix() - s.matrix().scale(closed);
                    Ok(w.max(linalg::op_norm_hermitian(&diff) / closed))
                });
            }
            these.push(check(r, d, "fiber_gram", GRAM_TOL.max(slack), worst));
            these.push(check(
                r,
                d,
                "induced_metric_pointwise",
                POINTWISE_TOL,
                pointwise_error(&mut rng, r, d, cfg),
            ));
            these.push(check(
                r,
                d,
                "orthonormal_monomials",
                ORTHONORMAL_TOL.max(slack),
                orthonormal_error(r, d, rule),
            ));
            let ok = these.iter().all(|c| c.pass);
            run.stage(format!("r{r}-d{d}"), if ok { "pass" } else { "fail" }, t0);
            checks.extend(these);
        }
    }
    let mut csv = String::from("r,d,check,error,tolerance,pass\n");
    for ch in &checks {
        println!(
            "{} r={} d={} {}: error {:.3e} (tolerance {:.1e}){}",
            if ch.pass { "PASS" } else { "FAIL" },
            ch.r,
            ch.d,
            ch.check,
            ch.error,
            ch.tolerance,
            ch.message
                .as_deref()
                .map(|m| format!(" {m}"))
                .unwrap_or_default()
        );
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            ch.r,
            ch.d,
            ch.check,
            fmt17(ch.error),
            fmt17(ch.tolerance),
            ch.pass
        ));
    }
    run.artifact("checks.csv", csv.as_bytes())?;
    run.artifact(
        "checks.json",
        serde_json::to_string_pretty(&checks)
            .map_err(Error::from)?
            .as_bytes(),
    )?;
    run.manifest.rows = checks
        .iter()
        .map(|c| serde_json::to_value(c).map_err(Error::from))
        .collect::<Result<_, _>>()?;
    let code = if checks.iter().all(|c| c.pass) {
        EXIT_OK
    } else {
        EXIT_NUMERIC
    };
    run.finish(code)
}

fn pointwise_error(
    rng: &mut ChaCha8Rng,
    r: usize,
    d: usize,
    cfg: &FiberSection,
) -> crate::Result<f64> {
    let basis = SymBasisMap::new(r, d)?;
    let mut worst = 0.0f64;
    for _ in 0..cfg.trials.max(20) {
        let h = random_metric(rng, r, cfg.max_condition.min(POINTWISE_MAX_CONDITION))
            .map_err(|e| Error::InvalidArgument(e.message))?;
        let s = random_vec(rng, basis.len());
        let t = random_vec(rng, basis.len());
        let f = FiberPoint::new(random_vec(rng, r))?;
        let big = sym_power_metric(&h, d)?;
        let lhs = eval_induced_metric(&big, d, &s, &t, &f)?;
        let rhs = eval_section(&basis, &s, &f)? * eval_section(&basis, &t, &f)?.conj()
            / h.dual_norm_sq(f.covector()).powi(d as i32);
        worst = worst.max((lhs - rhs).norm() / rhs.norm().max(1e-300));
    }
    Ok(worst)
}

/// Normalized monomials `sqrt(d!/I!) e^I` are orthonormal for the fiber
/// integral of the identity metric divided by `C_{r,d}`.
fn orthonormal_error(r: usize, d: usize, rule: &QuadratureRule) -> crate::Result<f64> {
    let basis = SymBasisMap::new(r, d)?;
    let g = fiber_gram(&HermMetric::identity(r, "e"), d, rule)?;
    let n = linalg::real_diag(basis.norm_constants());
    let normalized = &n * g.matrix() * &n / c(c_closed_form(r, d), 0.0);
    Ok(linalg::max_abs(
        &(normalized - linalg::identity(basis.len())),
    ))
}

// ------------------------------------------------------------ balance

struct Source {
    spec: Option<ModelSpec>,
    k: usize,
    sample: SectionSample,
    mesh: BaseMesh,
    reference: Option<MetricField>,
}

fn sources(config: &Config) -> CliResult<Vec<Source>> {
    if let Some(path) = &config.balance.sample {
        let loaded =
            load_sample(path).map_err(|e| CliError::config(format!("balance.sample: {e}")))?;
        return Ok(vec![Source {
            spec: loaded.manifest.model.clone(),
            k: loaded.sample.k,
            sample: loaded.sample,
            mesh: loaded.mesh,
            reference: loaded.metric,
        }]);
    }
    let model = config.model()?;
    model
        .k
        .values()?
        .into_iter()
        .map(|k| {
            let spec = model.spec(k)?;
            let g = generate(&spec)?;
            Ok(Source {
                spec: Some(spec),
                k,
                sample: g.sample,
                mesh: g.mesh,
                reference: Some(g.metric),
            })
        })
        .collect()
}

fn start_gram(
    config: &Config,
    base: &Path,
    src: &Source,
    inputs: &mut BTreeMap<String, String>,
) -> CliResult<Option<GramMatrix>> {
    match config.balance.start.as_str() {
        "identity" => Ok(None),
        "reference" => {
            let metric = src.reference.as_ref().ok_or_else(|| {
                CliError::config(
                    "balance.start = \"reference\" needs a reference metric in the sample",
                )
            })?;
            Ok(Some(l2_gram(&src.sample, metric, &src.mesh)?))
        }
        path => {
            let path = base.join(path.replace("{k}", &src.k.to_string()));
            let text = fs::read_to_string(&path).map_err(|e| {
                CliError::config(format!(
                    "balance.start: cannot read {}: {e}",
                    path.display()
                ))
            })?;
            inputs.insert(format!("start_k{}", src.k), io::sha256_hex(text.as_bytes()));
            let g = matrix_from_text(&text)
                .map_err(|e| CliError::config(format!("balance.start {}: {e}", path.display())))?;
            if g.nrows() != src.sample.n || g.ncols() != src.sample.n {
                return Err(CliError::config(format!(
                    "balance.start {}: Gram is {}×{}, the model has {} sections",
                    path.display(),
                    g.nrows(),
                    g.ncols(),
                    src.sample.n
                )));
            }
            Ok(Some(g))
        }
    }
}

#[derive(Serialize)]
struct BalanceFile<'a> {
    k: usize,
    gram_condition: f64,
    distance_to_reference: Option<f64>,
    #[serde(flatten)]
    report: &'a BalanceReport,
}

fn cmd_balance(
    out: &Path,
    config: &Config,
    base: &Path,
    mut inputs: BTreeMap<String, String>,
) -> CliResult<i32> {
    let opts = config.balance_options()?;
    let srcs = sources(config)?;
    let starts = srcs
        .iter()
        .map(|s| start_gram(config, base, s, &mut inputs))
        .collect::<CliResult<Vec<_>>>()?;
    let mut run = Run::start(out, "balance", config, inputs)?;
    let mut any_converged = false;
    for (src, start) in srcs.iter().zip(starts) {
        let t0 = Instant::now();
        let k = src.k;
        let o = BalanceOptions {
            start,
            ..opts.clone()
        };
        let outcome = balance_iterate(&src.sample, &src.mesh, &o)?;
        let rep = &outcome.report;
        any_converged |= rep.converged;
        let distance = match &src.reference {
            Some(m) => Some(field_distance(m, &outcome.metric)?),
            None => None,
        };
        run.artifact(
            &format!("gram_k{k}.txt"),
            matrix_to_text(&outcome.gram).as_bytes(),
        )?;
        run.artifact(
            &format!("metric_k{k}.txt"),
            matrices_to_text(&outcome.metric.mats)?.as_bytes(),
        )?;
        let file = BalanceFile {
            k,
            gram_condition: linalg::condition_number(&outcome.gram),
            distance_to_reference: distance,
            report: rep,
        };
        run.artifact(
            &format!("report_k{k}.json"),
            serde_json::to_string_pretty(&file)
                .map_err(Error::from)?
                .as_bytes(),
        )?;
        if config.balance.export_sample {
            let path = io::save_sample(
                &run.dir,
                &format!("sample_k{k}"),
                &src.sample,
                &src.mesh,
                src.reference.as_ref(),
                src.spec.as_ref(),
            )?;
            for ext in ["mesh.txt", "values.txt", "metric.txt"] {
                let p = run.dir.join(format!("sample_k{k}.{ext}"));
                if p.exists() {
                    run.adopt(&p)?;
                }
            }
            run.adopt(&path)?;
        }
        println!(
            "{} k={k} N={} iterations={} residual={:.3e}{}",
            if rep.converged {
                "CONVERGED"
            } else {
                "NOT-CONVERGED"
            },
            rep.n,
            rep.iterations,
            rep.final_residual,
            distance
                .map(|d| format!(" distance={d:.3e}"))
                .unwrap_or_default()
        );
        run.manifest.rows.push(json!({
            "k": k,
            "n": rep.n,
            "iterations": rep.iterations,
            "converged": rep.converged,
            "final_residual": rep.final_residual,
            "distance_to_reference": distance,
        }));
        run.stage(
            format!("k{k}"),
            if rep.converged {
                "pass"
            } else {
                "not-converged"
            },
            t0,
        );
    }
    run.finish(if any_converged {
        EXIT_OK
    } else {
        EXIT_NOT_CONVERGED
    })
}

// ------------------------------------------------------------ balance-pe

fn pipeline_options(config: &Config) -> CliResult<PipelineOptions> {
    let p = &config.projective;
    if p.fiber_level == 0 {
        return Err(CliError::config("projective.fiber_level must be positive"));
    }
    Ok(PipelineOptions {
        fiber_level: p.fiber_level,
        mode: p.volume,
        start: p.start,
        balance: config.balance_options()?,
    })
}

fn p1_model(config: &Config) -> CliResult<(&ModelSection, Vec<usize>)> {
    let model = config.model()?;
    if model.kind != "p1-split" {
        return Err(CliError::config(
            "projectivization commands need a p1-split model",
        ));
    }
    let ks = model.k.values()?;
    for &k in &ks {
        model.spec(k)?;
    }
    Ok((model, ks))
}

fn cmd_balance_pe(out: &Path, config: &Config, inputs: BTreeMap<String, String>) -> CliResult<i32> {
    let (model, ks) = p1_model(config)?;
    let popts = pipeline_options(config)?;
    let p = &config.projective;
    let def_tol = p.def_tol.unwrap_or(match p.pe_volume {
        PeVolume::Frozen => 1e-8,
        PeVolume::Recomputed => 1e-6,
    });
    let pe = PeBalanceOptions {
        balance: popts.balance.clone(),
        volume: p.pe_volume,
        ..PeBalanceOptions::default()
    };
    let floor = match p.pe_volume {
        PeVolume::Frozen => 1e-13,
        PeVolume::Recomputed => pe.volume_tol,
    };
    let mut run = Run::start(out, "balance-pe", config, inputs)?;
    let (mut all_pass, mut any_converged) = (true, false);
    for k in ks {
        let t0 = Instant::now();
        let spec = model.spec(k)?;
        let base = almost_balanced_pipeline(&spec, &popts)?;
        let direct = pe_balance_iterate(&base.hat, &base.ruled, &pe)?;
        let almost = projectivized_node_metric(&base)?;
        let distance = line_metric_distance(&almost, &direct.node_metric)?;
        let defect = base.report.defect();
        let hat = base.hat.with_basis(&orthonormalizer(&direct.gram));
        let direct_report = almost_balanced_report(
            &pe_gram_with(&hat, &direct.volume, &direct.node_metric)?,
            base.ruled.rank(),
            spec.d,
            spec.slope(),
            k,
        );
        let bound = 10.0 * defect.max(floor);
        let op_bound = popts.balance.tol * direct_report.n as f64;
        let pass = direct.converged
            && direct.definition_residual <= def_tol
            && distance <= bound
            && direct_report.op_norm_m <= op_bound;
        all_pass &= pass;
        any_converged |= direct.converged;
        run.artifact(
            &format!("gram_pe_k{k}.txt"),
            matrix_to_text(&direct.gram).as_bytes(),
        )?;
        let row = json!({
            "k": k,
            "n": direct_report.n,
            "outer_iterations": direct.outer_iterations,
            "iterations": direct.report.iterations,
            "converged": direct.converged,
            "definition_residual": direct.definition_residual,
            "definition_tolerance": def_tol,
            "almost_balanced_defect": defect,
            "distance": distance,
            "distance_bound": bound,
            "direct_op_norm_m": direct_report.op_norm_m,
            "direct_d_avg": direct_report.d_avg,
            "pass": pass,
        });
        run.artifact(
            &format!("report_pe_k{k}.json"),
            serde_json::to_string_pretty(&json!({"row": row, "balance": direct.report}))
                .map_err(Error::from)?
                .as_bytes(),
        )?;
        println!(
            "{} k={k} definition residual {:.3e} (tolerance {:.1e}), distance {:.3e} (bound {:.1e})",
            if pass { "PASS" } else { "FAIL" },
            direct.definition_residual,
            def_tol,
            distance,
            bound
        );
        run.manifest.rows.push(row);
        run.stage(format!("k{k}"), if pass { "pass" } else { "fail" }, t0);
    }
    let code = match (any_converged, all_pass) {
        (false, _) => EXIT_NOT_CONVERGED,
        (true, false) => EXIT_NUMERIC,
        (true, true) => EXIT_OK,
    };
    run.finish(code)
}

// ------------------------------------------------------------ probe-decay

fn same_model(a: &Value, b: &ModelSection) -> bool {
    let Some(a) = a.get("model") else {
        return false;
    };
    let b = serde_json::to_value(b).unwrap_or(Value::Null);
    [
        "kind",
        "degrees",
        "tau_re",
        "tau_im",
        "d0",
        "d",
        "mesh_size",
    ]
    .iter()
    .all(|key| a.get(key) == b.get(key))
}

/// Searches `out` for balance runs of the same model with a Gram at `k`;
/// the most recently written one wins.
fn find_balance_gram(out: &Path, model: &ModelSection, k: usize) -> CliResult<(PathBuf, PathBuf)> {
    let name = format!("gram_k{k}.txt");
    let mut found = Vec::new();
    if let Ok(entries) = fs::read_dir(out) {
        for entry in entries.flatten() {
            let dir = entry.path();
            if !entry.file_name().to_string_lossy().starts_with("balance-") {
                continue;
            }
            let manifest = dir.join("manifest.json");
            let Ok(text) = fs::read_to_string(&manifest) else {
                continue;
            };
            let Ok(m) = serde_json::from_str::<RunManifest>(&text) else {
                continue;
            };
            if m.command == "balance"
                && same_model(&m.config, model)
                && m.artifacts.iter().any(|a| a.path == name)
            {
                let modified = fs::metadata(&manifest).and_then(|md| md.modified()).ok();
                found.push((std::cmp::Reverse(modified), dir));
            }
        }
    }
    found.sort();
    let dir = found.into_iter().next().map(|(_, d)| d).ok_or_else(|| {
        CliError::config(format!(
            "no balance run under {} has {name} for this model; run `projbal balance` with the same [model] and --out first, or set projective.auto_run = true",
            out.display()
        ))
    })?;
    Ok((dir.join(&name), dir.join(format!("report_k{k}.json"))))
}

fn cmd_probe_decay(
    out: &Path,
    config: &Config,
    mut inputs: BTreeMap<String, String>,
) -> CliResult<i32> {
    let (model, ks) = p1_model(config)?;
    let popts = pipeline_options(config)?;
    let window = config.projective.window;
    if window < 2 || ks.len() < window {
        return Err(CliError::config(format!(
            "model.k: the decay fit needs at least projective.window = {window} >= 2 values of k, got {}",
            ks.len()
        )));
    }
    let mut loaded = BTreeMap::new();
    if !config.projective.auto_run {
        for &k in &ks {
            let (gram_path, report_path) = find_balance_gram(out, model, k)?;
            let text = fs::read_to_string(&gram_path).map_err(Error::from)?;
            inputs.insert(format!("gram_k{k}"), io::sha256_hex(text.as_bytes()));
            let gram = matrix_from_text(&text)?;
            let report: BalanceReport =
                serde_json::from_str(&fs::read_to_string(&report_path).map_err(Error::from)?)
                    .map_err(Error::from)?;
            loaded.insert(k, (gram, report));
        }
    }
    let mut run = Run::start(out, "probe-decay", config, inputs)?;
    let mut rows = Vec::with_capacity(ks.len());
    let mut spec0 = None;
    for &k in &ks {
        let t0 = Instant::now();
        let spec = model.spec(k)?;
        let pipe = match loaded.remove(&k) {
            Some((gram, report)) => almost_balanced_from_gram(&spec, &gram, report, &popts)?,
            None => almost_balanced_pipeline(&spec, &popts)?,
        };
        let row = DecayRow::of(&pipe);
        run.stage(
            format!("k{k}"),
            if row.converged {
                "pass"
            } else {
                "not-converged"
            },
            t0,
        );
        rows.push(row);
        spec0.get_or_insert(spec);
    }
    let spec = spec0.expect("non-empty k range");
    let report = decay_report(&spec, rows, window);
    run.artifact("decay.csv", report.to_csv().as_bytes())?;
    run.artifact(
        "decay.json",
        serde_json::to_string_pretty(&report)
            .map_err(Error::from)?
            .as_bytes(),
    )?;
    for row in &report.rows {
        run.manifest
            .rows
            .push(serde_json::to_value(row).map_err(Error::from)?);
    }
    let any_converged = report.rows.iter().any(|r| r.converged);
    let pass = if report.r == 1 {
        let worst = report.rows.iter().map(|r| r.defect).fold(0.0, f64::max);
        println!(
            "{} rank one: max defect {worst:.3e} (tolerance {R1_DEFECT_TOL:.0e})",
            if worst <= R1_DEFECT_TOL {
                "PASS"
            } else {
                "FAIL"
            }
        );
        worst <= R1_DEFECT_TOL
    } else {
        let slope = report.top_slope.unwrap_or(f64::NAN);
        let ok = report.monotone_top_half && slope <= -1.0;
        println!(
            "{} defect decay: strictly decreasing over the top half = {}, top slope {slope:.3} (needs <= -1)",
            if ok { "PASS" } else { "FAIL" },
            report.monotone_top_half
        );
        ok
    };
    let code = match (any_converged, pass) {
        (false, _) => EXIT_NOT_CONVERGED,
        (true, false) => EXIT_NUMERIC,
        (true, true) => EXIT_OK,
    };
    run.finish(code)
}

// ------------------------------------------------------------ report

#[derive(Debug, Serialize)]
struct SummaryRun {
    id: String,
    command: String,
    status: String,
    exit_code: i32,
    rows: usize,
}

fn cmd_report(dir: &Path) -> CliResult<i32> {
    let mut manifests = Vec::new();
    let entries = match fs::read_dir(dir) {
        Ok(e) => e.flatten().map(|e| e.path()).collect::<Vec<_>>(),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => vec![],
        Err(e) => return Err(Error::from(e).into()),
    };
    let mut run_dirs: Vec<PathBuf> = entries
        .into_iter()
        .filter(|p| p.join("manifest.json").is_file())
        .collect();
    if dir.join("manifest.json").is_file() {
        run_dirs.push(dir.to_path_buf());
    }
    run_dirs.sort();
    for run_dir in &run_dirs {
        let path = run_dir.join("manifest.json");
        let corrupt =
            |why: String| CliError::config(format!("corrupt manifest {}: {why}", path.display()));
        let text = fs::read_to_string(&path).map_err(|e| corrupt(e.to_string()))?;
        let m: RunManifest = serde_json::from_str(&text).map_err(|e| corrupt(e.to_string()))?;
        for a in &m.artifacts {
            let bytes = fs::read(run_dir.join(&a.path))
                .map_err(|e| corrupt(format!("artifact {}: {e}", a.path)))?;
            if io::sha256_hex(&bytes) != a.sha256 {
                return Err(corrupt(format!(
                    "artifact {} does not match its hash",
                    a.path
                )));
            }
        }
        manifests.push(m);
    }
    let mut seen = std::collections::BTreeSet::new();
    manifests.retain(|m| seen.insert(m.id.clone()));
    let runs: Vec<SummaryRun> = manifests
        .iter()
        .map(|m| SummaryRun {
            id: m.id.clone(),
            command: m.command.clone(),
            status: m.status.clone(),
            exit_code: m.exit_code,
            rows: m.rows.len(),
        })
        .collect();
    let rows: Vec<Value> = manifests
        .iter()
        .flat_map(|m| {
            m.rows.iter().map(move |r| {
                let mut r = r.clone();
                if let Value::Object(obj) = &mut r {
                    obj.insert("run".into(), json!(m.id));
                    obj.insert("command".into(), json!(m.command));
                }
                r
            })
        })
        .collect();
    let summary = json!({
        "runs": runs,
        "row_count": rows.len(),
        "rows": rows,
    });
    io::write_atomic(
        &dir.join("summary.json"),
        serde_json::to_string_pretty(&summary)
            .map_err(Error::from)?
            .as_bytes(),
    )?;
    println!(
        "{} runs, {} rows -> {}",
        runs.len(),
        rows.len(),
        dir.join("summary.json").display()
    );
    Ok(EXIT_OK)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn k_ranges() {
        assert_eq!(
            KSpec::Text("4..7".into()).values().unwrap(),
            vec![4, 5, 6, 7]
        );
        assert_eq!(KSpec::Text("4..=5".into()).values().unwrap(), vec![4, 5]);
        assert_eq!(
            KSpec::Text("4, 8,16".into()).values().unwrap(),
            vec![4, 8, 16]
        );
        assert_eq!(KSpec::One(3).values().unwrap(), vec![3]);
        for bad in ["", "4..x", "9..4", "4,4", "8,4", "-1"] {
            assert!(KSpec::Text(bad.into()).values().is_err(), "{bad}");
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err =
            Config::parse("[model]\nkind = \"p1-split\"\nk = 3\ndegress = [1]\n").unwrap_err();
        assert_eq!(err.code, EXIT_CONFIG);
        assert!(err.message.contains("degress"), "{}", err.message);
    }
}
