//! Reproducible false-alarm experiments.
//!
//! A [`TrialPlan`] runs `outer_trials` independent secondary-data draws. Each
//! outer trial fits `C_hat(rho)` over the whole grid (warm-started along the
//! grid), computes the plug-in variance, picks `rho_hat^*`, and evaluates the
//! GLRT on `inner_trials` fresh noise-only observations shared by every grid
//! point. Outer trials run on the rayon pool and are reduced in index order,
//! so results are bitwise identical for any thread count.

use std::fmt::Write as _;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detector::{self, SweepPoint};
use crate::error::{Error, Result};
use crate::estimators::{self, robust_shrinkage_fit, Equivalent, ShrinkageParam, SolverConfig, DEFAULT_KAPPA};
use crate::linalg::{self, CMat, Factor};
use crate::model::{self, CovarianceModel, CovarianceSpec, Dataset, SteeringSpec, SteeringVector, TextureModel};
use crate::rmt::{self, TheoryContext};
use crate::rng::{self, Purpose};

/// Histogram layout shared by every `histogram.csv`.
pub const HISTOGRAM_WIDTH: f64 = 0.1;
pub const HISTOGRAM_BINS: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrialPlan {
    /// `N`.
    pub dim: usize,
    /// `n`.
    pub samples: usize,
    #[serde(default = "default_covariance")]
    pub covariance: CovarianceSpec,
    #[serde(default)]
    pub texture: TextureModel,
    #[serde(default)]
    pub steering: SteeringSpec,
    pub rho_grid: Vec<f64>,
    /// Thresholds `gamma` for `sqrt(N) T`.
    #[serde(default)]
    pub gammas: Vec<f64>,
    /// Unscaled thresholds `Gamma` for `T` itself.
    #[serde(default)]
    pub thresholds: Vec<f64>,
    pub outer_trials: usize,
    pub inner_trials: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_kappa")]
    pub kappa: f64,
    #[serde(default)]
    pub solver: SolverConfig,
    /// Keep every `sqrt(N) T` value drawn at this grid value (for histograms and KS).
    #[serde(default)]
    pub keep_samples_at: Option<f64>,
}

fn default_covariance() -> CovarianceSpec {
    CovarianceSpec::ToeplitzAr { coefficient: 0.7 }
}

fn default_kappa() -> f64 {
    DEFAULT_KAPPA
}

impl TrialPlan {
    /// Plan for the standard experiment: Toeplitz(0.7), uniform `p`, unit texture.
    pub fn standard(dim: usize, samples: usize, rho_grid: Vec<f64>, outer_trials: usize, inner_trials: usize) -> Self {
        Self {
            dim,
            samples,
            covariance: default_covariance(),
            texture: TextureModel::Unit,
            steering: SteeringSpec::Uniform,
            rho_grid,
            gammas: vec![2.0, 3.0],
            thresholds: Vec::new(),
            outer_trials,
            inner_trials,
            seed: 0,
            kappa: DEFAULT_KAPPA,
            solver: SolverConfig::default(),
            keep_samples_at: None,
        }
    }

    pub fn ratio(&self) -> f64 {
        self.dim as f64 / self.samples as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::InvalidParameter { name: "dim", reason: "must be positive".into() });
        }
        if self.samples == 0 {
            return Err(Error::InvalidParameter { name: "samples", reason: "must be positive".into() });
        }
        if self.outer_trials.saturating_mul(self.inner_trials) == 0 {
            return Err(Error::InvalidParameter {
                name: "outer_trials",
                reason: "outer_trials * inner_trials must be at least 1".into(),
            });
        }
        self.validate_common()
    }

    fn validate_common(&self) -> Result<()> {
        if self.rho_grid.is_empty() {
            return Err(Error::InvalidParameter { name: "rho_grid", reason: "must not be empty".into() });
        }
        for &rho in &self.rho_grid {
            ShrinkageParam::new(rho, self.ratio(), self.kappa)?;
        }
        if let Some(&g) = self.gammas.iter().find(|g| !(g.is_finite() && **g >= 0.0)) {
            return Err(Error::InvalidParameter { name: "gammas", reason: format!("thresholds must be >= 0, got {g}") });
        }
        if let Some(&g) = self.thresholds.iter().find(|g| !(g.is_finite() && **g >= 0.0)) {
            return Err(Error::InvalidParameter {
                name: "thresholds",
                reason: format!("thresholds must be >= 0, got {g}"),
            });
        }
        if let Some(r) = self.keep_samples_at {
            if !self.rho_grid.contains(&r) {
                return Err(Error::InvalidParameter {
                    name: "keep_samples_at",
                    reason: format!("{r} is not a grid value"),
                });
            }
        }
        self.texture.validate()?;
        self.solver.validate()
    }
}

/// Empirical and predicted exceedance probability of `sqrt(N) T > gamma`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FarPoint {
    pub rho: f64,
    pub gamma: f64,
    pub trials: u64,
    pub exceedances: u64,
    pub empirical: f64,
    pub stderr: f64,
    /// `exp(-gamma^2 / (2 sigma^2))`; `None` if the theory could not be evaluated.
    pub theory: Option<f64>,
    /// Mean and standard deviation over outer trials of `exp(-gamma^2 / (2 sigma_hat^2))`.
    pub plugin_mean: f64,
    pub plugin_std: f64,
}

/// One `rho` of the plan with its collected `FarPoint`s.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FarCurve {
    pub rho: f64,
    pub theory_sigma2: Option<f64>,
    pub points: Vec<FarPoint>,
    /// `P(T > Gamma)` per unscaled threshold, with the plug-in prediction
    /// `exp(-N Gamma^2 / (2 sigma_hat^2))` averaged over outer trials.
    pub raw: Vec<RawPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RawPoint {
    pub threshold: f64,
    pub trials: u64,
    pub empirical: f64,
    pub stderr: f64,
    pub predicted: f64,
}

/// Plug-in variance against the limit, per grid value.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SigmaSummary {
    pub rho: f64,
    pub theory_sigma2: Option<f64>,
    pub fits: usize,
    pub mean_sigma2_hat: f64,
    pub std_sigma2_hat: f64,
    /// Median over outer trials of `|sigma_hat^2 - sigma^2| / sigma^2`.
    pub median_relative_error: Option<f64>,
    pub mean_rho_bar_hat: f64,
    pub theory_rho_bar: Option<f64>,
}

/// The detector run at the data-selected `rho_hat^*` of each outer trial.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SelectedSummary {
    /// `rho_hat^*` per outer trial, `NaN` where every grid point failed.
    pub rho_star: Vec<f64>,
    pub points: Vec<FarPoint>,
    pub raw: Vec<RawPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialFailure {
    pub outer: usize,
    pub rho: f64,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FarSweep {
    pub curves: Vec<FarCurve>,
    pub sigma: Vec<SigmaSummary>,
    pub selected: SelectedSummary,
    pub failures: Vec<TrialFailure>,
    /// `sqrt(N) T` values at `keep_samples_at`, ordered by (outer, inner).
    pub kept_samples: Vec<f64>,
}

impl FarSweep {
    /// `(rho, gamma)` lookup.
    pub fn point(&self, rho: f64, gamma: f64) -> Option<&FarPoint> {
        self.curves.iter().find(|c| c.rho == rho)?.points.iter().find(|p| p.gamma == gamma)
    }

    pub fn sigma_at(&self, rho: f64) -> Option<&SigmaSummary> {
        self.sigma.iter().find(|s| s.rho == rho)
    }
}

/// Result of one outer trial, per grid value.
struct OuterOutcome {
    points: Vec<std::result::Result<GridOutcome, String>>,
    star: Option<usize>,
}

struct GridOutcome {
    sigma2_hat: f64,
    rho_bar_hat: f64,
    /// `T` for each inner observation; empty when no inner trials were run.
    stats: Vec<f64>,
}

struct Setup {
    model: CovarianceModel,
    p: SteeringVector,
    theory: Vec<Option<TheoryContext>>,
}

fn setup(plan: &TrialPlan) -> Result<Setup> {
    let model = plan.covariance.build(plan.dim)?;
    let p = plan.steering.build(plan.dim)?;
    let theory = plan
        .rho_grid
        .iter()
        .map(|&rho| TheoryContext::evaluate(&model, &p, plan.ratio(), rho).ok())
        .collect();
    Ok(Setup { model, p, theory })
}

/// Secondary data of outer trial `k`.
pub fn outer_dataset(plan: &TrialPlan, model: &CovarianceModel, k: usize) -> Result<Dataset> {
    let mut rng = rng::stream(plan.seed, Purpose::Dataset, k as u64, 0);
    model::sample_dataset_with(model, plan.samples, &plan.texture, &mut rng)
}

/// Noise-only test vectors of outer trial `k`, one stream per inner index.
pub fn inner_observations(plan: &TrialPlan, model: &CovarianceModel, k: usize) -> Result<CMat> {
    let mut ys = CMat::zeros(plan.dim, plan.inner_trials);
    for j in 0..plan.inner_trials {
        let mut rng = rng::stream(plan.seed, Purpose::TestVector, k as u64, j as u64);
        let y = model::sample_dataset_with(model, 1, &plan.texture, &mut rng)?;
        ys.set_column(j, &y.samples().column(0));
    }
    Ok(ys)
}

fn run_outer(plan: &TrialPlan, setup: &Setup, k: usize, with_inner: bool) -> Result<OuterOutcome> {
    let data = outer_dataset(plan, &setup.model, k)?;
    let ys = if with_inner { Some(inner_observations(plan, &setup.model, k)?) } else { None };
    let fitted = detector::sweep_points(&data, &setup.p, &plan.rho_grid, &plan.solver);
    let points: Vec<_> = fitted
        .into_iter()
        .map(|pt| {
            let SweepPoint { rho_bar_hat, sigma2_hat, estimate, .. } = pt.map_err(|e| e.to_string())?;
            let stats = match &ys {
                Some(ys) => detector::glrt_batch(ys, &setup.p, &estimate).map_err(|e| e.to_string())?,
                None => Vec::new(),
            };
            Ok(GridOutcome { sigma2_hat, rho_bar_hat, stats })
        })
        .collect();
    let keyed: Vec<(f64, f64)> = points
        .iter()
        .zip(&plan.rho_grid)
        .map(|(pt, &rho)| (rho, pt.as_ref().map(|g| g.sigma2_hat).unwrap_or(f64::NAN)))
        .collect();
    let star = detector::argmin_by_rho(&keyed);
    Ok(OuterOutcome { points, star })
}

fn run_all(plan: &TrialPlan, setup: &Setup, with_inner: bool) -> Result<Vec<OuterOutcome>> {
    (0..plan.outer_trials)
        .into_par_iter()
        .map(|k| run_outer(plan, setup, k, with_inner))
        .collect::<Vec<_>>()
        .into_iter()
        .collect()
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Median of finite values; `None` if there are none.
pub fn median(values: &[f64]) -> Option<f64> {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[mid] } else { 0.5 * (v[mid - 1] + v[mid]) })
}

fn binomial(exceedances: u64, trials: u64) -> (f64, f64) {
    if trials == 0 {
        return (f64::NAN, f64::NAN);
    }
    let p = exceedances as f64 / trials as f64;
    (p, (p * (1.0 - p) / trials as f64).sqrt())
}

/// Accumulates statistics at one grid value (or at `rho_hat^*`).
struct Tally {
    scale: f64,
    gammas: Vec<f64>,
    thresholds: Vec<f64>,
    exceed: Vec<u64>,
    raw_exceed: Vec<u64>,
    trials: u64,
    sigma2: Vec<f64>,
}

impl Tally {
    fn new(plan: &TrialPlan) -> Self {
        Self {
            scale: (plan.dim as f64).sqrt(),
            gammas: plan.gammas.clone(),
            thresholds: plan.thresholds.clone(),
            exceed: vec![0; plan.gammas.len()],
            raw_exceed: vec![0; plan.thresholds.len()],
            trials: 0,
            sigma2: Vec::new(),
        }
    }

    fn add(&mut self, g: &GridOutcome) {
        self.sigma2.push(g.sigma2_hat);
        self.trials += g.stats.len() as u64;
        for &t in &g.stats {
            for (count, &gamma) in self.exceed.iter_mut().zip(&self.gammas) {
                if self.scale * t > gamma {
                    *count += 1;
                }
            }
            for (count, &th) in self.raw_exceed.iter_mut().zip(&self.thresholds) {
                if t > th {
                    *count += 1;
                }
            }
        }
    }

    fn far_points(&self, rho: f64, theory: Option<&TheoryContext>) -> Vec<FarPoint> {
        self.gammas
            .iter()
            .zip(&self.exceed)
            .map(|(&gamma, &count)| {
                let (empirical, stderr) = binomial(count, self.trials);
                let plugin: Vec<f64> = self.sigma2.iter().map(|&s| rmt::rayleigh_tail(gamma, s)).collect();
                let (plugin_mean, plugin_std) = mean_std(&plugin);
                FarPoint {
                    rho,
                    gamma,
                    trials: self.trials,
                    exceedances: count,
                    empirical,
                    stderr,
                    theory: theory.map(|t| t.false_alarm(gamma)),
                    plugin_mean,
                    plugin_std,
                }
            })
            .collect()
    }

    fn raw_points(&self) -> Vec<RawPoint> {
        self.thresholds
            .iter()
            .zip(&self.raw_exceed)
            .map(|(&th, &count)| {
                let (empirical, stderr) = binomial(count, self.trials);
                let gamma = self.scale * th;
                let predicted: Vec<f64> = self.sigma2.iter().map(|&s| rmt::rayleigh_tail(gamma, s)).collect();
                RawPoint { threshold: th, trials: self.trials, empirical, stderr, predicted: mean_std(&predicted).0 }
            })
            .collect()
    }
}

fn summarize(plan: &TrialPlan, setup: &Setup, outcomes: &[OuterOutcome]) -> FarSweep {
    let mut tallies: Vec<Tally> = plan.rho_grid.iter().map(|_| Tally::new(plan)).collect();
    let mut rho_bars: Vec<Vec<f64>> = vec![Vec::new(); plan.rho_grid.len()];
    let mut star_tally = Tally::new(plan);
    let mut rho_star = Vec::with_capacity(outcomes.len());
    let mut failures = Vec::new();
    let mut kept_samples = Vec::new();
    let keep = plan.keep_samples_at.and_then(|r| plan.rho_grid.iter().position(|&g| g == r));
    let scale = (plan.dim as f64).sqrt();

    for (k, outcome) in outcomes.iter().enumerate() {
        for (i, pt) in outcome.points.iter().enumerate() {
            match pt {
                Ok(g) => {
                    tallies[i].add(g);
                    rho_bars[i].push(g.rho_bar_hat);
                    if keep == Some(i) {
                        kept_samples.extend(g.stats.iter().map(|t| scale * t));
                    }
                }
                Err(message) => {
                    failures.push(TrialFailure { outer: k, rho: plan.rho_grid[i], message: message.clone() })
                }
            }
        }
        match outcome.star {
            Some(i) => {
                rho_star.push(plan.rho_grid[i]);
                if let Ok(g) = &outcome.points[i] {
                    star_tally.add(g);
                }
            }
            None => rho_star.push(f64::NAN),
        }
    }

    let curves = plan
        .rho_grid
        .iter()
        .enumerate()
        .map(|(i, &rho)| FarCurve {
            rho,
            theory_sigma2: setup.theory[i].as_ref().map(|t| t.sigma2),
            points: tallies[i].far_points(rho, setup.theory[i].as_ref()),
            raw: tallies[i].raw_points(),
        })
        .collect();
    let sigma = plan
        .rho_grid
        .iter()
        .enumerate()
        .map(|(i, &rho)| {
            let th = setup.theory[i].as_ref();
            let values = &tallies[i].sigma2;
            let (mean, std) = mean_std(values);
            let median_relative_error = th.and_then(|t| {
                let errs: Vec<f64> = values.iter().map(|s| (s - t.sigma2).abs() / t.sigma2).collect();
                median(&errs)
            });
            SigmaSummary {
                rho,
                theory_sigma2: th.map(|t| t.sigma2),
                fits: values.len(),
                mean_sigma2_hat: mean,
                std_sigma2_hat: std,
                median_relative_error,
                mean_rho_bar_hat: mean_std(&rho_bars[i]).0,
                theory_rho_bar: th.map(|t| t.rho_bar),
            }
        })
        .collect();
    let selected = SelectedSummary {
        rho_star,
        points: star_tally.far_points(f64::NAN, None),
        raw: star_tally.raw_points(),
    };
    FarSweep { curves, sigma, selected, failures, kept_samples }
}

/// Full nested experiment.
pub fn run_far_sweep(plan: &TrialPlan) -> Result<FarSweep> {
    plan.validate()?;
    let setup = setup(plan)?;
    let outcomes = run_all(plan, &setup, true)?;
    Ok(summarize(plan, &setup, &outcomes))
}

/// Plug-in variance statistics only: fits every outer trial over the grid
/// without drawing test vectors. `inner_trials` is ignored.
pub fn estimator_error_sweep(plan: &TrialPlan) -> Result<Vec<SigmaSummary>> {
    if plan.dim == 0 || plan.samples == 0 || plan.outer_trials == 0 {
        return Err(Error::InvalidParameter {
            name: "outer_trials",
            reason: "dim, samples and outer_trials must be positive".into(),
        });
    }
    plan.validate_common()?;
    let setup = setup(plan)?;
    let outcomes = run_all(plan, &setup, false)?;
    Ok(summarize(plan, &setup, &outcomes).sigma)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HistogramBin {
    pub left: f64,
    pub density: f64,
    pub rayleigh_density: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitDiagnostics {
    pub ks: f64,
    pub sigma: f64,
    pub samples: usize,
    pub histogram: Vec<HistogramBin>,
    /// `(t, empirical CDF, Rayleigh CDF)` on the histogram edges.
    pub cdf: Vec<(f64, f64, f64)>,
}

fn rayleigh_cdf(t: f64, sigma: f64) -> f64 {
    if t <= 0.0 {
        0.0
    } else {
        1.0 - (-t * t / (2.0 * sigma * sigma)).exp()
    }
}

/// Exact one-sample Kolmogorov-Smirnov distance to `Rayleigh(sigma)`, with
/// the fixed-width histogram over `[0, 5]`.
pub fn ks_distance_vs_rayleigh(samples: &[f64], sigma: f64) -> Result<FitDiagnostics> {
    if samples.len() < 100 {
        return Err(Error::InvalidParameter {
            name: "samples",
            reason: format!("need at least 100 samples, got {}", samples.len()),
        });
    }
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidParameter { name: "sigma", reason: format!("must be positive, got {sigma}") });
    }
    if samples.iter().any(|s| !s.is_finite()) {
        return Err(Error::InvalidParameter { name: "samples", reason: "non-finite sample".into() });
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let mut ks = 0.0_f64;
    for (i, &x) in sorted.iter().enumerate() {
        let f = rayleigh_cdf(x, sigma);
        ks = ks.max(f - i as f64 / n).max((i + 1) as f64 / n - f);
    }

    let mut counts = vec![0usize; HISTOGRAM_BINS];
    for &x in &sorted {
        let b = (x / HISTOGRAM_WIDTH).floor();
        if b >= 0.0 && (b as usize) < HISTOGRAM_BINS {
            counts[b as usize] += 1;
        }
    }
    let histogram = counts
        .iter()
        .enumerate()
        .map(|(b, &count)| {
            let left = b as f64 * HISTOGRAM_WIDTH;
            let right = left + HISTOGRAM_WIDTH;
            HistogramBin {
                left,
                density: count as f64 / (n * HISTOGRAM_WIDTH),
                rayleigh_density: (rayleigh_cdf(right, sigma) - rayleigh_cdf(left, sigma)) / HISTOGRAM_WIDTH,
            }
        })
        .collect();
    let cdf = (0..=HISTOGRAM_BINS)
        .map(|b| {
            let t = b as f64 * HISTOGRAM_WIDTH;
            let below = sorted.partition_point(|&x| x <= t);
            (t, below as f64 / n, rayleigh_cdf(t, sigma))
        })
        .collect();
    Ok(FitDiagnostics { ks: ks.clamp(0.0, 1.0), sigma, samples: sorted.len(), histogram, cdf })
}

/// Configuration of the estimator-to-equivalent distance study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    pub sizes: Vec<usize>,
    /// `c = N / n`.
    #[serde(default = "default_ratio")]
    pub ratio: f64,
    pub rho: f64,
    pub seeds: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_covariance")]
    pub covariance: CovarianceSpec,
    #[serde(default)]
    pub texture: TextureModel,
    #[serde(default)]
    pub steering: SteeringSpec,
    #[serde(default)]
    pub solver: SolverConfig,
}

fn default_ratio() -> f64 {
    0.5
}

/// Powers used in the bilinear gaps `p^* (C_hat^k - S_hat^k) p`.
pub const BILINEAR_POWERS: [i32; 4] = [-2, -1, 1, 2];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RateRow {
    pub dim: usize,
    /// Median over seeds of `||C_hat - S_hat||` (spectral norm).
    pub norm_gap: f64,
    /// Median over seeds of the bilinear gaps, in [`BILINEAR_POWERS`] order.
    pub bilinear_gap: [f64; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RateReport {
    pub rho: f64,
    pub rows: Vec<RateRow>,
    /// Least-squares slope of `log gap` against `log N`; `NaN` if a gap is 0.
    pub norm_slope: f64,
    pub bilinear_slopes: [f64; 4],
}

impl RateReport {
    pub fn bilinear_slope(&self, power: i32) -> Option<f64> {
        BILINEAR_POWERS.iter().position(|&k| k == power).map(|i| self.bilinear_slopes[i])
    }
}

/// `p^* M^k p` for Hermitian positive-definite `M`.
fn bilinear_power(m: &CMat, factor: &Factor, p: &SteeringVector, k: i32) -> f64 {
    let v = p.as_vector();
    match k {
        -2 => linalg::norm_sqr(&factor.solve(v)),
        -1 => linalg::dot(v, &factor.solve(v)).re,
        1 => linalg::dot(v, &(m * v)).re,
        2 => linalg::norm_sqr(&(m * v)),
        _ => unreachable!("unsupported power {k}"),
    }
}

fn probe_one(cfg: &ProbeContext, dim: usize, seed: usize) -> Result<(f64, [f64; 4])> {
    let samples = ((dim as f64) / cfg.probe.ratio).round() as usize;
    let model = cfg.probe.covariance.build(dim)?;
    let p = cfg.probe.steering.build(dim)?;
    let mut rng = rng::stream(cfg.probe.seed, Purpose::Probe, dim as u64, seed as u64);
    let data = model::sample_dataset_with(&model, samples, &cfg.probe.texture, &mut rng)?;
    let c = data.ratio();
    let param = ShrinkageParam::new(cfg.probe.rho, c, DEFAULT_KAPPA)?;
    let est = robust_shrinkage_fit(&data, param, &cfg.probe.solver)?;
    let gamma = rmt::solve_gamma(&model, cfg.probe.rho)?;
    let s_hat = estimators::deterministic_equivalent(&data, gamma, cfg.probe.rho, c, Equivalent::Scaled)?;
    let s_factor = Factor::new(&s_hat)?;
    let norm_gap = linalg::hermitian_spectral_norm(&(est.matrix() - &s_hat));
    let mut gaps = [0.0; 4];
    for (gap, &k) in gaps.iter_mut().zip(&BILINEAR_POWERS) {
        *gap = (bilinear_power(est.matrix(), est.factor(), &p, k) - bilinear_power(&s_hat, &s_factor, &p, k)).abs();
    }
    Ok((norm_gap, gaps))
}

struct ProbeContext<'a> {
    probe: &'a ProbeConfig,
}

fn log_slope(xs: &[f64], ys: &[f64]) -> f64 {
    if ys.iter().any(|y| !(*y > 0.0)) || xs.len() < 2 {
        return f64::NAN;
    }
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

/// Distance between `C_hat(rho)` and its deterministic equivalent `S_hat(rho)`
/// across sizes, with fitted log-log slopes.
pub fn convergence_probe(cfg: &ProbeConfig) -> Result<RateReport> {
    if cfg.sizes.is_empty() || cfg.seeds == 0 {
        return Err(Error::InvalidParameter { name: "sizes", reason: "need at least one size and one seed".into() });
    }
    if !(cfg.ratio > 0.0) {
        return Err(Error::InvalidParameter { name: "ratio", reason: "must be positive".into() });
    }
    cfg.solver.validate()?;
    cfg.texture.validate()?;
    let ctx = ProbeContext { probe: cfg };
    let jobs: Vec<(usize, usize)> = cfg.sizes.iter().flat_map(|&d| (0..cfg.seeds).map(move |s| (d, s))).collect();
    let results: Vec<(f64, [f64; 4])> = jobs
        .par_iter()
        .map(|&(d, s)| probe_one(&ctx, d, s))
        .collect::<Vec<_>>()
        .into_iter()
        .collect::<Result<_>>()?;
    let rows: Vec<RateRow> = cfg
        .sizes
        .iter()
        .enumerate()
        .map(|(i, &dim)| {
            let chunk = &results[i * cfg.seeds..(i + 1) * cfg.seeds];
            let norms: Vec<f64> = chunk.iter().map(|r| r.0).collect();
            let mut bilinear_gap = [0.0; 4];
            for (j, g) in bilinear_gap.iter_mut().enumerate() {
                let v: Vec<f64> = chunk.iter().map(|r| r.1[j]).collect();
                *g = median(&v).unwrap_or(f64::NAN);
            }
            RateRow { dim, norm_gap: median(&norms).unwrap_or(f64::NAN), bilinear_gap }
        })
        .collect();
    let xs: Vec<f64> = rows.iter().map(|r| r.dim as f64).collect();
    let norm_slope = log_slope(&xs, &rows.iter().map(|r| r.norm_gap).collect::<Vec<_>>());
    let mut bilinear_slopes = [0.0; 4];
    for (j, s) in bilinear_slopes.iter_mut().enumerate() {
        *s = log_slope(&xs, &rows.iter().map(|r| r.bilinear_gap[j]).collect::<Vec<_>>());
    }
    Ok(RateReport { rho: cfg.rho, rows, norm_slope, bilinear_slopes })
}

fn csv_writer<W: Write>(out: W, provenance: &[String]) -> Result<csv::Writer<W>> {
    let mut out = out;
    for line in provenance {
        writeln!(out, "# {line}")?;
    }
    Ok(csv::Writer::from_writer(out))
}

fn opt(v: Option<f64>) -> String {
    v.map(model::fmt_f64).unwrap_or_default()
}

/// `far_curve.csv`: one row per `(rho, gamma)`.
pub fn write_far_curve<W: Write>(sweep: &FarSweep, out: W, provenance: &[String]) -> Result<()> {
    let mut w = csv_writer(out, provenance)?;
    w.write_record(["rho", "gamma", "empirical", "stderr", "theory", "plugin_mean", "plugin_std"])?;
    for p in sweep.curves.iter().flat_map(|c| &c.points) {
        w.write_record([
            model::fmt_f64(p.rho),
            model::fmt_f64(p.gamma),
            model::fmt_f64(p.empirical),
            model::fmt_f64(p.stderr),
            opt(p.theory),
            model::fmt_f64(p.plugin_mean),
            model::fmt_f64(p.plugin_std),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// `selected_curve.csv`: the detector at `rho_hat^*`, scaled (`kind = gamma`)
/// and unscaled (`kind = threshold`) thresholds.
pub fn write_selected_curve<W: Write>(sweep: &FarSweep, out: W, provenance: &[String]) -> Result<()> {
    let mut w = csv_writer(out, provenance)?;
    w.write_record(["kind", "threshold", "empirical", "stderr", "predicted"])?;
    for p in &sweep.selected.points {
        w.write_record([
            "gamma".to_string(),
            model::fmt_f64(p.gamma),
            model::fmt_f64(p.empirical),
            model::fmt_f64(p.stderr),
            model::fmt_f64(p.plugin_mean),
        ])?;
    }
    for p in &sweep.selected.raw {
        w.write_record([
            "threshold".to_string(),
            model::fmt_f64(p.threshold),
            model::fmt_f64(p.empirical),
            model::fmt_f64(p.stderr),
            model::fmt_f64(p.predicted),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// `sigma.csv`: plug-in variance against the limit per grid value.
pub fn write_sigma_summary<W: Write>(rows: &[SigmaSummary], out: W, provenance: &[String]) -> Result<()> {
    let mut w = csv_writer(out, provenance)?;
    w.write_record([
        "rho",
        "theory_sigma2",
        "mean_sigma2_hat",
        "std_sigma2_hat",
        "median_relative_error",
        "theory_rho_bar",
        "mean_rho_bar_hat",
        "fits",
    ])?;
    for r in rows {
        w.write_record([
            model::fmt_f64(r.rho),
            opt(r.theory_sigma2),
            model::fmt_f64(r.mean_sigma2_hat),
            model::fmt_f64(r.std_sigma2_hat),
            opt(r.median_relative_error),
            opt(r.theory_rho_bar),
            model::fmt_f64(r.mean_rho_bar_hat),
            r.fits.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// `histogram.csv`.
pub fn write_histogram<W: Write>(diag: &FitDiagnostics, out: W, provenance: &[String]) -> Result<()> {
    let mut w = csv_writer(out, provenance)?;
    w.write_record(["bin_left", "density", "rayleigh_density"])?;
    for b in &diag.histogram {
        w.write_record([model::fmt_f64(b.left), model::fmt_f64(b.density), model::fmt_f64(b.rayleigh_density)])?;
    }
    w.flush()?;
    Ok(())
}

/// `rates.csv`.
pub fn write_rates<W: Write>(report: &RateReport, out: W, provenance: &[String]) -> Result<()> {
    let mut w = csv_writer(out, provenance)?;
    let mut header = vec!["N".to_string(), "norm_gap".to_string()];
    header.extend(BILINEAR_POWERS.iter().map(|k| format!("bilinear_gap_k{k}")));
    w.write_record(&header)?;
    for r in &report.rows {
        let mut rec = vec![r.dim.to_string(), model::fmt_f64(r.norm_gap)];
        rec.extend(r.bilinear_gap.iter().map(|g| model::fmt_f64(*g)));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Self-contained gnuplot script plotting the CSVs written next to it.
pub fn plot_script(title: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# gnuplot script; run from the directory holding the CSV files");
    let _ = writeln!(s, "set datafile separator ','");
    let _ = writeln!(s, "set datafile commentschars '#'");
    let _ = writeln!(s, "set key autotitle columnhead");
    let _ = writeln!(s, "set terminal pngcairo size 900,600");
    let _ = writeln!(s);
    let _ = writeln!(s, "set output 'far_curve.png'");
    let _ = writeln!(s, "set title '{} - false alarm rate'", title.replace('\'', ""));
    let _ = writeln!(s, "set logscale y");
    let _ = writeln!(s, "set xlabel 'rho'");
    let _ = writeln!(s, "set ylabel 'P(sqrt(N) T > gamma)'");
    let _ = writeln!(
        s,
        "plot for [g in system(\"awk -F, '!/^#/ && NR>1 && $2!=\\\"gamma\\\" {{print $2}}' far_curve.csv | sort -u\")] \\"
    );
    let _ = writeln!(s, "    'far_curve.csv' using 1:($2==g+0 ? $3 : 1/0):4 with yerrorbars title sprintf('detector gamma=%s', g), \\");
    let _ = writeln!(s, "    for [g in system(\"awk -F, '!/^#/ && NR>1 && $2!=\\\"gamma\\\" {{print $2}}' far_curve.csv | sort -u\")] \\");
    let _ = writeln!(s, "    'far_curve.csv' using 1:($2==g+0 ? $5 : 1/0) with lines title sprintf('theory gamma=%s', g), \\");
    let _ = writeln!(s, "    for [g in system(\"awk -F, '!/^#/ && NR>1 && $2!=\\\"gamma\\\" {{print $2}}' far_curve.csv | sort -u\")] \\");
    let _ = writeln!(s, "    'far_curve.csv' using 1:($2==g+0 ? $6 : 1/0):7 with yerrorbars title sprintf('plug-in gamma=%s', g)");
    let _ = writeln!(s, "unset logscale y");
    let _ = writeln!(s);
    let _ = writeln!(s, "set output 'histogram.png'");
    let _ = writeln!(s, "set title 'sqrt(N) T against Rayleigh'");
    let _ = writeln!(s, "set xlabel 't'");
    let _ = writeln!(s, "set ylabel 'density'");
    let _ = writeln!(s, "set style fill transparent solid 0.4");
    let _ = writeln!(s, "plot 'histogram.csv' using ($1+0.05):2 with boxes title 'detector', \\");
    let _ = writeln!(s, "     'histogram.csv' using ($1+0.05):3 with lines lw 2 title 'Rayleigh'");
    let _ = writeln!(s);
    let _ = writeln!(s, "set output 'rates.png'");
    let _ = writeln!(s, "set title 'distance to the deterministic equivalent'");
    let _ = writeln!(s, "set logscale xy");
    let _ = writeln!(s, "set xlabel 'N'");
    let _ = writeln!(s, "set ylabel 'median gap'");
    let _ = writeln!(s, "plot for [col=2:6] 'rates.csv' using 1:col with linespoints");
    s
}
