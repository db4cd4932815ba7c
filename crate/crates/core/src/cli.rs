//! Command-line front end.
//!
//! A run is described by a TOML manifest (`--config`) whose sections mirror
//! the library types; command-line flags override manifest values. Every
//! file written carries a provenance header with the tool version, the
//! SHA-256 of the effective configuration and the seed.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::detector;
use crate::error::Error;
use crate::estimators::{robust_shrinkage_fit, ScatterEstimate, ShrinkageParam, SolverConfig, DEFAULT_KAPPA};
use crate::model::{self, CovarianceSpec, Dataset, SteeringSpec, TextureModel};
use crate::montecarlo::{self, ProbeConfig, TrialPlan};
use crate::rmt::{self, TheoryContext};

pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_SCHEMA: i32 = 2;
pub const EXIT_NONCONVERGENCE: i32 = 3;
pub const EXIT_IO: i32 = 4;

/// Environment variable consulted when `--threads` is absent.
pub const THREADS_ENV: &str = "RTSE_THREADS";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Schema(String),
    #[error("{0}")]
    NonConvergence(String),
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Schema(_) => EXIT_SCHEMA,
            CliError::NonConvergence(_) => EXIT_NONCONVERGENCE,
            CliError::Io(_) => EXIT_IO,
            CliError::Other(_) => EXIT_FAILURE,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Schema(_) => "schema",
            CliError::NonConvergence(_) => "non-convergence",
            CliError::Io(_) => "io",
            CliError::Other(_) => "failure",
        }
    }

    fn schema(field: &str, err: impl std::fmt::Display) -> Self {
        CliError::Schema(format!("`{field}`: {err}"))
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::NonConvergence { .. } => CliError::NonConvergence(msg),
            Error::Io(_) | Error::Csv(_) | Error::Parse(_) => CliError::Io(msg),
            Error::InvalidParameter { .. } | Error::RhoOutOfRange { .. } | Error::DimensionMismatch { .. } => {
                CliError::Schema(msg)
            }
            _ => CliError::Other(msg),
        }
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

type CliResult<T> = std::result::Result<T, CliError>;

/// `rho` values given either explicitly or as `count` equispaced points of
/// the admissible range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GridSpec {
    Values(Vec<f64>),
    Count { count: usize },
}

impl GridSpec {
    pub fn resolve(&self, c: f64, kappa: f64) -> crate::Result<Vec<f64>> {
        match self {
            GridSpec::Values(v) => Ok(v.clone()),
            GridSpec::Count { count } => {
                Ok(ShrinkageParam::grid(c, kappa, *count)?.into_iter().map(|p| p.rho).collect())
            }
        }
    }

    /// `0.1,0.2,0.5` or `count=19`.
    pub fn parse(s: &str) -> std::result::Result<Self, String> {
        if let Some(n) = s.trim().strip_prefix("count=") {
            return n.trim().parse().map(|count| GridSpec::Count { count }).map_err(|e| format!("bad count: {e}"));
        }
        parse_list(s).map(GridSpec::Values)
    }
}

fn parse_list(s: &str) -> std::result::Result<Vec<f64>, String> {
    s.split(',')
        .filter(|t| !t.trim().is_empty())
        .map(|t| t.trim().parse::<f64>().map_err(|e| format!("{t:?}: {e}")))
        .collect()
}

fn default_grid() -> GridSpec {
    GridSpec::Count { count: 19 }
}

fn default_gammas() -> Vec<f64> {
    vec![2.0, 3.0]
}

fn default_rho() -> f64 {
    0.2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default = "default_dim")]
    pub dim: usize,
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default = "default_covariance")]
    pub covariance: CovarianceSpec,
    #[serde(default)]
    pub texture: TextureModel,
    #[serde(default)]
    pub steering: SteeringSpec,
    #[serde(default = "default_kappa")]
    pub kappa: f64,
}

fn default_dim() -> usize {
    100
}
fn default_samples() -> usize {
    200
}
fn default_covariance() -> CovarianceSpec {
    CovarianceSpec::ToeplitzAr { coefficient: 0.7 }
}
fn default_kappa() -> f64 {
    DEFAULT_KAPPA
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            dim: default_dim(),
            samples: default_samples(),
            covariance: default_covariance(),
            texture: TextureModel::Unit,
            steering: SteeringSpec::Uniform,
            kappa: DEFAULT_KAPPA,
        }
    }
}

impl ModelSection {
    pub fn ratio(&self) -> f64 {
        self.dim as f64 / self.samples as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimateSection {
    /// Dataset CSV; defaults to `dataset.csv` in the output directory.
    pub input: Option<PathBuf>,
    #[serde(default = "default_rho")]
    pub rho: f64,
}

impl Default for EstimateSection {
    fn default() -> Self {
        Self { input: None, rho: default_rho() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TheorySection {
    #[serde(default = "default_grid")]
    pub grid: GridSpec,
    #[serde(default = "default_gammas")]
    pub gammas: Vec<f64>,
}

impl Default for TheorySection {
    fn default() -> Self {
        Self { grid: default_grid(), gammas: default_gammas() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub input: Option<PathBuf>,
    #[serde(default = "default_grid")]
    pub grid: GridSpec,
    #[serde(default = "default_gammas")]
    pub gammas: Vec<f64>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self { input: None, grid: default_grid(), gammas: default_gammas() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeSection {
    pub sizes: Vec<usize>,
    #[serde(default = "default_probe_seeds")]
    pub seeds: usize,
    #[serde(default = "default_rho")]
    pub rho: f64,
}

fn default_probe_seeds() -> usize {
    5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValidateSection {
    #[serde(default = "default_grid")]
    pub grid: GridSpec,
    #[serde(default = "default_gammas")]
    pub gammas: Vec<f64>,
    #[serde(default)]
    pub thresholds: Vec<f64>,
    #[serde(default = "default_outer")]
    pub outer_trials: usize,
    #[serde(default = "default_inner")]
    pub inner_trials: usize,
    /// Grid value whose `sqrt(N) T` samples feed the histogram; defaults to
    /// the grid value closest to 0.2.
    pub histogram_rho: Option<f64>,
    /// Rate study; defaults to sizes `N, 2N, 4N` with 5 seeds.
    pub probe: Option<ProbeSection>,
}

fn default_outer() -> usize {
    200
}
fn default_inner() -> usize {
    500
}

impl Default for ValidateSection {
    fn default() -> Self {
        Self {
            grid: default_grid(),
            gammas: default_gammas(),
            thresholds: Vec::new(),
            outer_trials: default_outer(),
            inner_trials: default_inner(),
            histogram_rho: None,
            probe: None,
        }
    }
}

/// Whole manifest.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub threads: Option<usize>,
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub verbose: bool,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub estimate: EstimateSection,
    #[serde(default)]
    pub theory: TheorySection,
    #[serde(default)]
    pub sweep: SweepSection,
    #[serde(default)]
    pub validate: ValidateSection,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> CliResult<Self> {
        toml::from_str(text).map_err(|e| CliError::Schema(format!("config: {}", e.to_string().trim())))
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out_dir.clone().unwrap_or_else(|| PathBuf::from("rtse-out"))
    }

    /// SHA-256 of the configuration fields that influence results (thread
    /// count, output location and verbosity excluded).
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.threads = None;
        canonical.out_dir = None;
        canonical.verbose = false;
        let bytes = serde_json::to_vec(&canonical).expect("config serializes");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Checks every section, naming the offending field.
    pub fn validate(&self) -> CliResult<()> {
        let m = &self.model;
        if m.dim == 0 {
            return Err(CliError::schema("model.dim", "must be positive"));
        }
        if m.samples == 0 {
            return Err(CliError::schema("model.samples", "must be positive"));
        }
        if !(m.kappa > 0.0) {
            return Err(CliError::schema("model.kappa", "must be positive"));
        }
        m.covariance.build(1).map_err(|e| CliError::schema("model.covariance", e))?;
        m.texture.validate().map_err(|e| CliError::schema("model.texture", e))?;
        m.steering.build(m.dim).map_err(|e| CliError::schema("model.steering", e))?;
        self.solver.validate().map_err(|e| CliError::schema("solver", e))?;
        if self.threads == Some(0) {
            return Err(CliError::schema("threads", "must be at least 1"));
        }
        let c = m.ratio();
        ShrinkageParam::new(self.estimate.rho, c, m.kappa).map_err(|e| CliError::schema("estimate.rho", e))?;
        check_grid("theory.grid", &self.theory.grid, c, m.kappa)?;
        check_gammas("theory.gammas", &self.theory.gammas)?;
        check_grid("sweep.grid", &self.sweep.grid, c, m.kappa)?;
        check_gammas("sweep.gammas", &self.sweep.gammas)?;
        let v = &self.validate;
        check_grid("validate.grid", &v.grid, c, m.kappa)?;
        check_gammas("validate.gammas", &v.gammas)?;
        check_gammas("validate.thresholds", &v.thresholds)?;
        if v.outer_trials.saturating_mul(v.inner_trials) == 0 {
            return Err(CliError::schema("validate.outer_trials", "outer_trials * inner_trials must be at least 1"));
        }
        if let Some(r) = v.histogram_rho {
            let grid = v.grid.resolve(c, m.kappa)?;
            if !grid.contains(&r) {
                return Err(CliError::schema("validate.histogram_rho", format!("{r} is not a grid value")));
            }
        }
        if let Some(p) = &v.probe {
            if p.sizes.is_empty() || p.sizes.contains(&0) {
                return Err(CliError::schema("validate.probe.sizes", "need positive sizes"));
            }
            if p.seeds == 0 {
                return Err(CliError::schema("validate.probe.seeds", "must be at least 1"));
            }
            ShrinkageParam::new(p.rho, c, m.kappa).map_err(|e| CliError::schema("validate.probe.rho", e))?;
        }
        Ok(())
    }
}

fn check_grid(field: &str, grid: &GridSpec, c: f64, kappa: f64) -> CliResult<()> {
    let values = grid.resolve(c, kappa).map_err(|e| CliError::schema(field, e))?;
    if values.is_empty() {
        return Err(CliError::schema(field, "grid must not be empty"));
    }
    for rho in values {
        ShrinkageParam::new(rho, c, kappa).map_err(|e| CliError::schema(field, e))?;
    }
    Ok(())
}

fn check_gammas(field: &str, gammas: &[f64]) -> CliResult<()> {
    match gammas.iter().find(|g| !(g.is_finite() && **g >= 0.0)) {
        Some(g) => Err(CliError::schema(field, format!("thresholds must be finite and >= 0, got {g}"))),
        None => Ok(()),
    }
}

#[derive(Debug, Parser)]
#[command(name = "rtse", version, about = "Robust shrinkage scatter estimation and GLRT false-alarm analysis")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// TOML manifest.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    /// Worker threads for Monte Carlo runs.
    #[arg(long, global = true, env = THREADS_ENV)]
    pub threads: Option<usize>,
    /// Shrinkage grid: `0.1,0.2,0.5` or `count=19`.
    #[arg(long, global = true, value_parser = GridSpec::parse)]
    pub grid: Option<GridSpec>,
    /// Thresholds for `sqrt(N) T`, comma separated.
    #[arg(long, global = true, value_delimiter = ',')]
    pub gammas: Option<Vec<f64>>,
    /// Dataset CSV for `estimate` and `sweep`.
    #[arg(long, global = true)]
    pub input: Option<PathBuf>,
    /// Shrinkage for `estimate`.
    #[arg(long, global = true)]
    pub rho: Option<f64>,
    #[arg(long, short, global = true)]
    pub verbose: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Draw a synthetic dataset.
    Generate,
    /// Fit the robust shrinkage estimator to a dataset.
    Estimate,
    /// Evaluate the asymptotic false-alarm theory over a grid.
    Theory,
    /// Plug-in variance over a grid and the selected shrinkage for a dataset.
    Sweep,
    /// Monte Carlo validation run.
    Validate,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Generate => "generate",
            Command::Estimate => "estimate",
            Command::Theory => "theory",
            Command::Sweep => "sweep",
            Command::Validate => "validate",
        }
    }
}

/// Manifest (if any) with flag overrides applied.
pub fn effective_config(command: Command, args: &CommonArgs) -> CliResult<RunConfig> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
            RunConfig::from_toml(&text)?
        }
        None => RunConfig::default(),
    };
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(d) = &args.out_dir {
        cfg.out_dir = Some(d.clone());
    }
    if let Some(t) = args.threads {
        cfg.threads = Some(t);
    }
    if args.verbose {
        cfg.verbose = true;
    }
    match command {
        Command::Estimate => {
            if let Some(i) = &args.input {
                cfg.estimate.input = Some(i.clone());
            }
            if let Some(r) = args.rho {
                cfg.estimate.rho = r;
            }
        }
        Command::Theory => {
            if let Some(g) = &args.grid {
                cfg.theory.grid = g.clone();
            }
            if let Some(g) = &args.gammas {
                cfg.theory.gammas = g.clone();
            }
        }
        Command::Sweep => {
            if let Some(i) = &args.input {
                cfg.sweep.input = Some(i.clone());
            }
            if let Some(g) = &args.grid {
                cfg.sweep.grid = g.clone();
            }
            if let Some(g) = &args.gammas {
                cfg.sweep.gammas = g.clone();
            }
        }
        Command::Validate => {
            if let Some(g) = &args.grid {
                cfg.validate.grid = g.clone();
            }
            if let Some(g) = &args.gammas {
                cfg.validate.gammas = g.clone();
            }
        }
        Command::Generate => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Tool version, configuration hash and seed attached to every output.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Provenance {
    pub tool: String,
    pub config_sha256: String,
    pub seed: u64,
    pub command: String,
}

impl Provenance {
    pub fn new(cfg: &RunConfig, command: Command) -> Self {
        Self {
            tool: format!("rtse {}", env!("CARGO_PKG_VERSION")),
            config_sha256: cfg.hash(),
            seed: cfg.seed,
            command: command.name().to_string(),
        }
    }

    pub fn lines(&self) -> Vec<String> {
        vec![
            format!("tool={}", self.tool),
            format!("config_sha256={}", self.config_sha256),
            format!("seed={}", self.seed),
            format!("command={}", self.command),
        ]
    }
}

struct Context {
    cfg: RunConfig,
    prov: Provenance,
    out_dir: PathBuf,
    written: Vec<PathBuf>,
}

impl Context {
    fn create(&mut self, name: &str) -> CliResult<BufWriter<File>> {
        let path = self.out_dir.join(name);
        let file = File::create(&path).map_err(|e| io_err(&path, e))?;
        self.written.push(path);
        Ok(BufWriter::new(file))
    }

    fn provenance_header(&self, w: &mut impl Write) -> CliResult<()> {
        for line in self.prov.lines() {
            writeln!(w, "# {line}").map_err(|e| CliError::Io(e.to_string()))?;
        }
        Ok(())
    }

    fn write_json<T: Serialize>(&mut self, name: &str, body: &T) -> CliResult<()> {
        #[derive(Serialize)]
        struct Doc<'a, T> {
            provenance: &'a Provenance,
            #[serde(flatten)]
            body: &'a T,
        }
        let prov = self.prov.clone();
        let mut w = self.create(name)?;
        serde_json::to_writer_pretty(&mut w, &Doc { provenance: &prov, body })
            .map_err(|e| CliError::Io(e.to_string()))?;
        writeln!(w).and_then(|_| w.flush()).map_err(|e| CliError::Io(e.to_string()))
    }

    fn log(&self, msg: impl AsRef<str>) {
        if self.cfg.verbose {
            eprintln!("rtse: {}", msg.as_ref());
        }
    }

    fn input(&self, given: &Option<PathBuf>) -> PathBuf {
        given.clone().unwrap_or_else(|| self.out_dir.join("dataset.csv"))
    }
}

fn load_dataset(path: &Path) -> CliResult<Dataset> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    Dataset::read_csv(file).map_err(|e| match e {
        Error::Io(e) => io_err(path, e),
        other => CliError::Io(format!("{}: {other}", path.display())),
    })
}

fn cmd_generate(ctx: &mut Context) -> CliResult<()> {
    let m = ctx.cfg.model.clone();
    let model = m.covariance.build(m.dim)?;
    let data = model::sample_dataset(&model, m.samples, &m.texture, ctx.cfg.seed)?;
    let mut w = ctx.create("dataset.csv")?;
    ctx.provenance_header(&mut w)?;
    data.write_csv(&mut w)?;
    w.flush().map_err(|e| CliError::Io(e.to_string()))?;

    #[derive(Serialize)]
    struct Meta<'a> {
        dim: usize,
        samples: usize,
        covariance: &'a CovarianceSpec,
        texture: &'a TextureModel,
        seed: u64,
        population_eigenvalues: &'a [f64],
    }
    let seed = ctx.cfg.seed;
    ctx.write_json(
        "dataset.json",
        &Meta {
            dim: m.dim,
            samples: m.samples,
            covariance: &m.covariance,
            texture: &m.texture,
            seed,
            population_eigenvalues: model.eigenvalues(),
        },
    )
}

fn cmd_estimate(ctx: &mut Context) -> CliResult<()> {
    let path = ctx.input(&ctx.cfg.estimate.input);
    let data = load_dataset(&path)?;
    let rho = ShrinkageParam::new(ctx.cfg.estimate.rho, data.ratio(), ctx.cfg.model.kappa)
        .map_err(|e| CliError::schema("estimate.rho", e))?;
    let est = robust_shrinkage_fit(&data, rho, &ctx.cfg.solver)?;
    ctx.log(format!("converged in {} iterations", est.iterations_used));
    let mut w = ctx.create("scatter.csv")?;
    est.write_csv(&mut w, &ctx.prov.lines())?;
    w.flush().map_err(|e| CliError::Io(e.to_string()))?;

    #[derive(Serialize)]
    struct Summary {
        input: String,
        dim: usize,
        samples: usize,
        rho: f64,
        iterations: usize,
        residual: f64,
        rho_bar_hat: f64,
    }
    let summary = Summary {
        input: path.display().to_string(),
        dim: data.dim(),
        samples: data.len(),
        rho: est.rho.rho,
        iterations: est.iterations_used,
        residual: est.final_residual,
        rho_bar_hat: if est.rho.rho < 1.0 { detector::empirical_rho_bar(&est) } else { 1.0 },
    };
    ctx.write_json("estimate.json", &summary)
}

fn gamma_column(prefix: &str, g: f64) -> String {
    format!("{prefix}{}", model::fmt_f64(g))
}

fn cmd_theory(ctx: &mut Context) -> CliResult<()> {
    let m = ctx.cfg.model.clone();
    let model = m.covariance.build(m.dim)?;
    let p = m.steering.build(m.dim)?;
    let c = m.ratio();
    let grid = ctx.cfg.theory.grid.resolve(c, m.kappa)?;
    let gammas = ctx.cfg.theory.gammas.clone();
    let rows: Vec<TheoryContext> =
        grid.iter().map(|&rho| TheoryContext::evaluate(&model, &p, c, rho)).collect::<crate::Result<_>>()?;

    let mut w = ctx.create("theory.csv")?;
    ctx.provenance_header(&mut w)?;
    let mut csv = csv::Writer::from_writer(w);
    let mut header: Vec<String> =
        ["rho", "c", "gamma_n", "alpha", "rho_bar", "m", "sigma2"].iter().map(|s| s.to_string()).collect();
    header.extend(gammas.iter().map(|&g| gamma_column("far_gamma", g)));
    csv.write_record(&header).map_err(Error::from)?;
    for t in &rows {
        let mut rec: Vec<String> =
            [t.rho, t.c, t.gamma, t.alpha, t.rho_bar, t.m, t.sigma2].iter().map(|v| model::fmt_f64(*v)).collect();
        rec.extend(gammas.iter().map(|&g| model::fmt_f64(rmt::rayleigh_tail(g, t.sigma2))));
        csv.write_record(&rec).map_err(Error::from)?;
    }
    csv.flush().map_err(|e| CliError::Io(e.to_string()))?;
    Ok(())
}

fn cmd_sweep(ctx: &mut Context) -> CliResult<()> {
    let path = ctx.input(&ctx.cfg.sweep.input);
    let data = load_dataset(&path)?;
    let p = ctx.cfg.model.steering.build(data.dim())?;
    let grid = ctx.cfg.sweep.grid.resolve(data.ratio(), ctx.cfg.model.kappa)?;
    for &rho in &grid {
        ShrinkageParam::new(rho, data.ratio(), ctx.cfg.model.kappa).map_err(|e| CliError::schema("sweep.grid", e))?;
    }
    let gammas = ctx.cfg.sweep.gammas.clone();
    let result = detector::select_rho_star(&data, &p, &grid, &ctx.cfg.solver)?;
    for e in result.entries.iter().filter_map(|e| e.error.as_ref()) {
        ctx.log(format!("grid point failed: {e}"));
    }

    let mut w = ctx.create("sweep.csv")?;
    ctx.provenance_header(&mut w)?;
    let mut csv = csv::Writer::from_writer(w);
    let mut header: Vec<String> =
        ["rho", "rho_bar_hat", "sigma2_hat", "iterations"].iter().map(|s| s.to_string()).collect();
    header.extend(gammas.iter().map(|&g| gamma_column("predicted_far_gamma", g)));
    header.push("is_rho_star".into());
    header.push("error".into());
    csv.write_record(&header).map_err(Error::from)?;
    for (k, e) in result.entries.iter().enumerate() {
        let opt = |v: Option<f64>| v.map(model::fmt_f64).unwrap_or_default();
        let mut rec = vec![
            model::fmt_f64(e.rho),
            opt(e.rho_bar_hat),
            opt(e.sigma2_hat),
            e.iterations.map(|i| i.to_string()).unwrap_or_default(),
        ];
        rec.extend(gammas.iter().map(|&g| opt(e.sigma2_hat.map(|s| rmt::rayleigh_tail(g, s)))));
        rec.push(u8::from(k == result.index).to_string());
        rec.push(e.error.clone().unwrap_or_default());
        csv.write_record(&rec).map_err(Error::from)?;
    }
    csv.flush().map_err(|e| CliError::Io(e.to_string()))?;
    drop(csv);

    #[derive(Serialize)]
    struct Summary<'a> {
        input: String,
        rho_star: f64,
        sigma2_hat_at_rho_star: Option<f64>,
        entries: &'a [detector::SweepEntry],
    }
    let summary = Summary {
        input: path.display().to_string(),
        rho_star: result.rho_star,
        sigma2_hat_at_rho_star: result.entries[result.index].sigma2_hat,
        entries: &result.entries,
    };
    ctx.write_json("sweep.json", &summary)
}

fn cmd_validate(ctx: &mut Context) -> CliResult<()> {
    let m = ctx.cfg.model.clone();
    let v = ctx.cfg.validate.clone();
    let grid = v.grid.resolve(m.ratio(), m.kappa)?;
    let histogram_rho = v.histogram_rho.unwrap_or_else(|| {
        *grid.iter().min_by(|a, b| (*a - 0.2).abs().total_cmp(&(*b - 0.2).abs())).expect("non-empty grid")
    });
    let plan = TrialPlan {
        dim: m.dim,
        samples: m.samples,
        covariance: m.covariance.clone(),
        texture: m.texture.clone(),
        steering: m.steering.clone(),
        rho_grid: grid,
        gammas: v.gammas.clone(),
        thresholds: v.thresholds.clone(),
        outer_trials: v.outer_trials,
        inner_trials: v.inner_trials,
        seed: ctx.cfg.seed,
        kappa: m.kappa,
        solver: ctx.cfg.solver,
        keep_samples_at: Some(histogram_rho),
    };
    ctx.log(format!("running {} x {} trials over {} grid points", v.outer_trials, v.inner_trials, plan.rho_grid.len()));
    let sweep = montecarlo::run_far_sweep(&plan)?;
    let lines = ctx.prov.lines();
    let w = ctx.create("far_curve.csv")?;
    montecarlo::write_far_curve(&sweep, w, &lines)?;
    let w = ctx.create("selected_curve.csv")?;
    montecarlo::write_selected_curve(&sweep, w, &lines)?;
    let w = ctx.create("sigma.csv")?;
    montecarlo::write_sigma_summary(&sweep.sigma, w, &lines)?;

    let sigma2 = sweep.curves.iter().find(|c| c.rho == histogram_rho).and_then(|c| c.theory_sigma2);
    let diagnostics = match sigma2 {
        Some(s2) if sweep.kept_samples.len() >= 100 => {
            let d = montecarlo::ks_distance_vs_rayleigh(&sweep.kept_samples, s2.sqrt())?;
            let w = ctx.create("histogram.csv")?;
            montecarlo::write_histogram(&d, w, &lines)?;
            Some(d)
        }
        _ => {
            ctx.log("fewer than 100 samples or no theory at the histogram rho; histogram skipped");
            None
        }
    };

    let probe = v.probe.clone().unwrap_or(ProbeSection {
        sizes: vec![m.dim, 2 * m.dim, 4 * m.dim],
        seeds: default_probe_seeds(),
        rho: histogram_rho.min(0.99),
    });
    let rates = montecarlo::convergence_probe(&ProbeConfig {
        sizes: probe.sizes.clone(),
        ratio: m.ratio(),
        rho: probe.rho,
        seeds: probe.seeds,
        seed: ctx.cfg.seed,
        covariance: m.covariance.clone(),
        texture: m.texture.clone(),
        steering: m.steering.clone(),
        solver: ctx.cfg.solver,
    })?;
    let w = ctx.create("rates.csv")?;
    montecarlo::write_rates(&rates, w, &lines)?;

    let mut w = ctx.create("plot.gp")?;
    ctx.provenance_header(&mut w)?;
    w.write_all(montecarlo::plot_script(&format!("N={} n={}", m.dim, m.samples)).as_bytes())
        .and_then(|_| w.flush())
        .map_err(|e| CliError::Io(e.to_string()))?;

    #[derive(Serialize)]
    struct Summary<'a> {
        histogram_rho: f64,
        ks_distance: Option<f64>,
        median_rho_star: Option<f64>,
        failures: &'a [montecarlo::TrialFailure],
        norm_slope: f64,
        bilinear_slopes: [f64; 4],
        selected: &'a [montecarlo::FarPoint],
    }
    let summary = Summary {
        histogram_rho,
        ks_distance: diagnostics.as_ref().map(|d| d.ks),
        median_rho_star: montecarlo::median(&sweep.selected.rho_star),
        failures: &sweep.failures,
        norm_slope: rates.norm_slope,
        bilinear_slopes: rates.bilinear_slopes,
        selected: &sweep.selected.points,
    };
    ctx.write_json("summary.json", &summary)
}

fn configure_threads(threads: Option<usize>) -> CliResult<()> {
    if let Some(n) = threads {
        // A second configuration in the same process (tests) keeps the first pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

/// Runs one parsed invocation and returns the files written.
pub fn execute(cli: &Cli) -> CliResult<Vec<PathBuf>> {
    let cfg = effective_config(cli.command, &cli.common)?;
    configure_threads(cfg.threads)?;
    let out_dir = cfg.out_dir();
    fs::create_dir_all(&out_dir).map_err(|e| io_err(&out_dir, e))?;
    let prov = Provenance::new(&cfg, cli.command);
    let mut ctx = Context { cfg, prov, out_dir, written: Vec::new() };
    match cli.command {
        Command::Generate => cmd_generate(&mut ctx)?,
        Command::Estimate => cmd_estimate(&mut ctx)?,
        Command::Theory => cmd_theory(&mut ctx)?,
        Command::Sweep => cmd_sweep(&mut ctx)?,
        Command::Validate => cmd_validate(&mut ctx)?,
    }
    Ok(ctx.written)
}

/// Entry point: parses `args`, runs, reports, and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_SCHEMA } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(files) => {
            for f in files {
                println!("{}", f.display());
            }
            0
        }
        Err(e) => {
            let report = serde_json::json!({
                "error": e.kind(),
                "exit_code": e.exit_code(),
                "message": e.to_string(),
            });
            eprintln!("{report}");
            e.exit_code()
        }
    }
}

/// Reads a `ScatterEstimate` written by `estimate`.
pub fn load_scatter(path: &Path) -> CliResult<ScatterEstimate> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    ScatterEstimate::read_csv(file).map_err(CliError::from)
}
