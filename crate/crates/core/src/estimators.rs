//! Robust shrinkage scatter estimation.
//!
//! `robust_shrinkage_fit` solves
//!
//! ```text
//! C = (1 - rho) (1/n) sum_i x_i x_i^* / ((1/N) x_i^* C^{-1} x_i) + rho I
//! ```
//!
//! by Picard iteration. Each step costs one Cholesky factorization, one
//! `N x N x n` GEMM to whiten the samples and one `N x n x N` GEMM for the
//! weighted Gram matrix. The deterministic equivalents `S_hat(rho)` and
//! `S_under(rho_bar)` built from the Gaussian parts `z_i` live here too; they
//! are only available for simulated data.

use std::io::{BufRead, BufReader, Read, Write};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, CMat, Factor, C64};
use crate::model::{self, Dataset};
use crate::rmt;

/// Default margin `kappa` kept between `rho` and its lower limit.
pub const DEFAULT_KAPPA: f64 = 1e-3;

/// Shrinkage `rho` together with the admissible set
/// `[kappa + max(0, 1 - 1/c), 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShrinkageParam {
    pub rho: f64,
    pub lower_bound: f64,
    pub kappa: f64,
}

impl ShrinkageParam {
    /// `c = N / n`.
    pub fn new(rho: f64, c: f64, kappa: f64) -> Result<Self> {
        if !(c > 0.0) || !c.is_finite() {
            return Err(Error::InvalidParameter { name: "c", reason: format!("ratio N/n must be positive, got {c}") });
        }
        if !(kappa > 0.0) {
            return Err(Error::InvalidParameter { name: "kappa", reason: format!("must be positive, got {kappa}") });
        }
        let lower_bound = (1.0 - 1.0 / c).max(0.0);
        if !(rho >= lower_bound + kappa && rho <= 1.0) {
            return Err(Error::RhoOutOfRange { rho, lower: lower_bound + kappa });
        }
        Ok(Self { rho, lower_bound, kappa })
    }

    pub fn for_dataset(rho: f64, data: &Dataset) -> Result<Self> {
        Self::new(rho, data.ratio(), DEFAULT_KAPPA)
    }

    /// `count` equispaced values covering the admissible set.
    pub fn grid(c: f64, kappa: f64, count: usize) -> Result<Vec<Self>> {
        let lo = (1.0 - 1.0 / c).max(0.0) + kappa;
        match count {
            0 => Ok(Vec::new()),
            1 => Ok(vec![Self::new(1.0, c, kappa)?]),
            _ => (0..count)
                .map(|k| {
                    let t = k as f64 / (count - 1) as f64;
                    let rho = if k + 1 == count { 1.0 } else { lo + (1.0 - lo) * t };
                    Self::new(rho, c, kappa)
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    /// Stop when the relative Frobenius change between iterates drops below this.
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Anderson mixing depth; 0 gives plain Picard iteration `C <- RHS(C)`.
    /// Mixing leaves the fixed point unchanged and removes the slow overall
    /// scale mode of the plain iteration, whose rate is close to `1 - rho_bar`.
    pub anderson_depth: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self { tolerance: 1e-9, max_iterations: 500, anderson_depth: 5 }
    }
}

impl SolverConfig {
    /// Plain Picard iteration `C <- RHS(C)`.
    pub fn plain() -> Self {
        Self { anderson_depth: 0, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tolerance > 0.0) {
            return Err(Error::InvalidParameter { name: "tolerance", reason: "must be positive".into() });
        }
        if self.max_iterations == 0 {
            return Err(Error::InvalidParameter { name: "max_iterations", reason: "must be at least 1".into() });
        }
        Ok(())
    }
}

/// Converged `C_hat(rho)` with its Cholesky factor and solver diagnostics.
#[derive(Debug, Clone)]
pub struct ScatterEstimate {
    pub rho: ShrinkageParam,
    matrix: CMat,
    factor: Factor,
    pub iterations_used: usize,
    pub final_residual: f64,
}

impl ScatterEstimate {
    /// Wraps an externally supplied scatter matrix (e.g. one read from disk).
    pub fn from_matrix(rho: ShrinkageParam, matrix: CMat) -> Result<Self> {
        let factor = Factor::new(&matrix)?;
        Ok(Self { rho, matrix, factor, iterations_used: 0, final_residual: f64::NAN })
    }

    pub fn matrix(&self) -> &CMat {
        &self.matrix
    }

    pub fn factor(&self) -> &Factor {
        &self.factor
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    /// Same estimate multiplied by `s > 0`.
    pub fn scaled(&self, s: f64) -> Result<Self> {
        let mut est = Self::from_matrix(self.rho, &self.matrix * C64::new(s, 0.0))?;
        est.iterations_used = self.iterations_used;
        est.final_residual = self.final_residual;
        Ok(est)
    }

    /// Matrix CSV preceded by `#` comment lines carrying rho and the solver
    /// diagnostics, plus any extra provenance lines.
    pub fn write_csv<W: Write>(&self, mut out: W, provenance: &[String]) -> Result<()> {
        for line in provenance {
            writeln!(out, "# {line}")?;
        }
        writeln!(out, "# rho={}", model::fmt_f64(self.rho.rho))?;
        writeln!(out, "# lower_bound={}", model::fmt_f64(self.rho.lower_bound))?;
        writeln!(out, "# kappa={}", model::fmt_f64(self.rho.kappa))?;
        writeln!(out, "# iterations={}", self.iterations_used)?;
        writeln!(out, "# residual={}", model::fmt_f64(self.final_residual))?;
        model::write_matrix_csv(&self.matrix, out)
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut text = String::new();
        BufReader::new(input).read_to_string(&mut text)?;
        let mut rho = None;
        let mut lower = None;
        let mut kappa = None;
        let mut iterations = 0;
        let mut residual = f64::NAN;
        for line in text.as_bytes().lines() {
            let line = line?;
            let Some(rest) = line.strip_prefix('#') else { continue };
            let Some((k, v)) = rest.trim().split_once('=') else { continue };
            match k.trim() {
                "rho" => rho = Some(model::parse_f64(v)?),
                "lower_bound" => lower = Some(model::parse_f64(v)?),
                "kappa" => kappa = Some(model::parse_f64(v)?),
                "iterations" => iterations = v.trim().parse().map_err(|_| Error::Parse(format!("iterations: {v}")))?,
                "residual" => residual = model::parse_f64(v)?,
                _ => {}
            }
        }
        let rho = rho.ok_or_else(|| Error::Parse("missing `# rho=` header".into()))?;
        let param = ShrinkageParam {
            rho,
            lower_bound: lower.unwrap_or(0.0),
            kappa: kappa.unwrap_or(DEFAULT_KAPPA),
        };
        let matrix = model::read_matrix_csv(text.as_bytes())?;
        let mut est = Self::from_matrix(param, matrix)?;
        est.iterations_used = iterations;
        est.final_residual = residual;
        Ok(est)
    }
}

/// Samples scaled to unit norm. The fixed-point map only sees `x_i` through
/// `x_i x_i^* / (x_i^* C^{-1} x_i)`, so this changes nothing mathematically
/// and makes the result insensitive to the texture in floating point too.
struct Normalized {
    x: CMat,
    x_conj: CMat,
}

fn normalize_samples(data: &Dataset) -> Result<Normalized> {
    let mut x = data.samples().clone();
    for (index, mut col) in x.column_iter_mut().enumerate() {
        let norm = col.norm();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::ZeroSample { index });
        }
        col.unscale_mut(norm);
    }
    let x_conj = x.map(|z| z.conj());
    Ok(Normalized { x, x_conj })
}

fn check_rho(data: &Dataset, rho: &ShrinkageParam) -> Result<()> {
    let lower = (1.0 - 1.0 / data.ratio()).max(0.0);
    if !(rho.rho > lower && rho.rho <= 1.0) {
        return Err(Error::RhoOutOfRange { rho: rho.rho, lower });
    }
    Ok(())
}

/// Homogeneous part `A(C) = (N/n) sum_i x_i x_i^* / (x_i^* C^{-1} x_i)` of the
/// fixed-point map, so that `RHS(C) = (1 - rho) A(C) + rho I`.
fn homogeneous_part(samples: &Normalized, factor: &Factor) -> CMat {
    let (dim, n) = samples.x.shape();
    let whitened = linalg::matmul(&factor.lower_inverse(), &samples.x);
    let mut weighted = samples.x.clone();
    let coef = dim as f64 / n as f64;
    for (i, mut col) in weighted.column_iter_mut().enumerate() {
        let q: f64 = whitened.column(i).iter().map(|z| z.norm_sqr()).sum();
        col *= C64::new(coef / q, 0.0);
    }
    let mut out = linalg::matmul_adjoint_conj(&weighted, &samples.x_conj);
    linalg::hermitize(&mut out);
    out
}

/// `scale * (1 - rho) * a + rho I`.
fn affine(a: &CMat, scale: f64, rho: f64) -> CMat {
    let mut out = a * C64::new(scale * (1.0 - rho), 0.0);
    for k in 0..out.nrows() {
        out[(k, k)] += C64::new(rho, 0.0);
    }
    out
}

/// `C_hat(rho)` started from the identity.
pub fn robust_shrinkage_fit(data: &Dataset, rho: ShrinkageParam, cfg: &SolverConfig) -> Result<ScatterEstimate> {
    let dim = data.dim();
    robust_shrinkage_fit_from(data, rho, cfg, &CMat::identity(dim, dim))
}

/// `C_hat(rho)` started from `init`, which must be Hermitian positive definite.
/// The fixed point is unique, so the start only affects the iteration count;
/// sweeps over `rho` use it to warm-start from a neighbouring solution.
pub fn robust_shrinkage_fit_from(
    data: &Dataset,
    rho: ShrinkageParam,
    cfg: &SolverConfig,
    init: &CMat,
) -> Result<ScatterEstimate> {
    cfg.validate()?;
    check_rho(data, &rho)?;
    let dim = data.dim();
    if init.shape() != (dim, dim) {
        return Err(Error::DimensionMismatch { expected: dim, got: init.nrows() });
    }
    let samples = normalize_samples(data)?;
    if rho.rho == 1.0 {
        let eye = CMat::identity(dim, dim);
        let factor = Factor::new(&eye)?;
        return Ok(ScatterEstimate { rho, matrix: eye, factor, iterations_used: 0, final_residual: 0.0 });
    }

    let mut mixer = Anderson::new(cfg.anderson_depth);
    let mut current = init.clone();
    let mut residual = f64::INFINITY;
    for iteration in 1..=cfg.max_iterations {
        let factor = match Factor::new(&current) {
            Ok(f) => f,
            // A mixed iterate left the cone; fall back to the last plain image.
            Err(_) if iteration > 1 && mixer.active() => {
                current = mixer.reset();
                Factor::new(&current)?
            }
            Err(e) => return Err(e),
        };
        let image = affine(&homogeneous_part(&samples, &factor), 1.0, rho.rho);
        residual = linalg::frobenius(&(&image - &current)) / linalg::frobenius(&current);
        if residual < cfg.tolerance {
            // `residual` is exactly the fixed-point residual of `current`.
            return Ok(ScatterEstimate {
                rho,
                matrix: current,
                factor,
                iterations_used: iteration,
                final_residual: residual,
            });
        }
        current = mixer.step(&current, image);
    }
    Err(Error::NonConvergence { iterations: cfg.max_iterations, residual })
}

/// Type-II Anderson mixing over the last `depth` iterates.
struct Anderson {
    depth: usize,
    prev: Option<(CMat, CMat)>,
    d_res: Vec<CMat>,
    d_img: Vec<CMat>,
}

impl Anderson {
    fn new(depth: usize) -> Self {
        Self { depth, prev: None, d_res: Vec::new(), d_img: Vec::new() }
    }

    fn active(&self) -> bool {
        self.depth > 0
    }

    /// Drops the history and returns the last plain image.
    fn reset(&mut self) -> CMat {
        self.d_res.clear();
        self.d_img.clear();
        let (_, img) = self.prev.take().expect("reset before any step");
        img
    }

    fn step(&mut self, x: &CMat, image: CMat) -> CMat {
        if self.depth == 0 {
            return image;
        }
        let res = &image - x;
        if let Some((prev_res, prev_img)) = &self.prev {
            self.d_res.push(&res - prev_res);
            self.d_img.push(&image - prev_img);
            if self.d_res.len() > self.depth {
                self.d_res.remove(0);
                self.d_img.remove(0);
            }
        }
        let m = self.d_res.len();
        let mut next = image.clone();
        if m > 0 {
            // min_theta ||res - dR theta||; the m x m normal equations are tiny.
            let gram = DMatrix::from_fn(m, m, |i, j| re_inner(&self.d_res[i], &self.d_res[j]));
            let rhs = DVector::from_fn(m, |i, _| re_inner(&self.d_res[i], &res));
            let ridge = 1e-12 * gram.trace().max(f64::MIN_POSITIVE);
            let reg = gram + DMatrix::identity(m, m) * ridge;
            if let Some(theta) = reg.lu().solve(&rhs) {
                if theta.iter().all(|t| t.is_finite()) {
                    for (t, dg) in theta.iter().zip(&self.d_img) {
                        next -= dg * C64::new(*t, 0.0);
                    }
                    linalg::hermitize(&mut next);
                }
            }
        }
        self.prev = Some((res, image));
        next
    }
}

/// `Re tr(a^* b)`.
fn re_inner(a: &CMat, b: &CMat) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x.re * y.re + x.im * y.im).sum()
}

/// `||C - RHS(C)||_F / ||C||_F` for an arbitrary candidate `C`.
pub fn fixed_point_residual(data: &Dataset, rho: f64, candidate: &CMat) -> Result<f64> {
    let samples = normalize_samples(data)?;
    let factor = Factor::new(candidate)?;
    let next = affine(&homogeneous_part(&samples, &factor), 1.0, rho);
    Ok(linalg::frobenius(&(next - candidate)) / linalg::frobenius(candidate))
}

/// `(1/n) sum_i x_i x_i^*`.
pub fn sample_covariance(data: &Dataset) -> CMat {
    gram(data.samples())
}

fn gram(x: &CMat) -> CMat {
    let n = x.ncols() as f64;
    let mut g = linalg::matmul_adjoint_conj(x, &x.map(|z| z.conj()));
    g /= C64::new(n, 0.0);
    linalg::hermitize(&mut g);
    g
}

/// Which deterministic-equivalent matrix to build from the Gaussian parts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Equivalent {
    /// `S_hat(rho) = (1/gamma) alpha(rho) (1/n) sum z_i z_i^* + rho I`.
    Scaled,
    /// `S_under(rho) = (1 - rho) (1/n) sum z_i z_i^* + rho I`; `gamma` and `c` are ignored.
    Normalized,
}

pub fn deterministic_equivalent(data: &Dataset, gamma: f64, rho: f64, c: f64, kind: Equivalent) -> Result<CMat> {
    let truth = data.truth().ok_or(Error::MissingTruth)?;
    let coef = match kind {
        Equivalent::Scaled => {
            if !(gamma > 0.0) {
                return Err(Error::InvalidParameter { name: "gamma", reason: format!("must be positive, got {gamma}") });
            }
            rmt::shrinkage_alpha(rho, c)? / gamma
        }
        Equivalent::Normalized => 1.0 - rho,
    };
    let dim = data.dim();
    if coef == 0.0 {
        return Ok(CMat::identity(dim, dim) * C64::new(rho, 0.0));
    }
    let mut s = gram(&truth.z) * C64::new(coef, 0.0);
    for k in 0..dim {
        s[(k, k)] += C64::new(rho, 0.0);
    }
    Ok(s)
}
