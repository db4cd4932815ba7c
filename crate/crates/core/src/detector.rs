//! Adaptive GLRT built on the robust shrinkage estimate, the plug-in
//! estimate of its false-alarm variance, and the shrinkage selector that
//! minimizes it.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::estimators::{robust_shrinkage_fit_from, ScatterEstimate, ShrinkageParam, SolverConfig, DEFAULT_KAPPA};
use crate::linalg::{self, CMat, CVec};
use crate::model::{Dataset, SteeringVector};

/// `T = |y^* C^{-1} p| / sqrt(y^* C^{-1} y * p^* C^{-1} p)` with its pieces.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GlrtStatistic {
    pub rho: f64,
    pub value: f64,
    pub y_cinv_p_abs: f64,
    pub y_cinv_y: f64,
    pub p_cinv_p: f64,
}

pub fn glrt_statistic(y: &CVec, p: &SteeringVector, est: &ScatterEstimate) -> Result<GlrtStatistic> {
    if y.len() != est.dim() || p.dim() != est.dim() {
        return Err(Error::DimensionMismatch { expected: est.dim(), got: y.len().max(p.dim()) });
    }
    let a = est.factor().whiten(y);
    let b = est.factor().whiten(p.as_vector());
    let cross = linalg::dot(&a, &b).norm();
    let yy = linalg::norm_sqr(&a);
    let pp = linalg::norm_sqr(&b);
    if !(yy > 0.0) {
        return Err(Error::InvalidParameter { name: "y", reason: "observation must be nonzero".into() });
    }
    if !(pp > 0.0) || !pp.is_finite() {
        return Err(Error::NotPositiveDefinite);
    }
    let value = (cross / (yy.sqrt() * pp.sqrt())).clamp(0.0, 1.0);
    Ok(GlrtStatistic { rho: est.rho.rho, value, y_cinv_p_abs: cross, y_cinv_y: yy, p_cinv_p: pp })
}

/// `T_N(rho)` for every column of `ys`, sharing one whitening GEMM.
pub fn glrt_batch(ys: &CMat, p: &SteeringVector, est: &ScatterEstimate) -> Result<Vec<f64>> {
    if ys.nrows() != est.dim() || p.dim() != est.dim() {
        return Err(Error::DimensionMismatch { expected: est.dim(), got: ys.nrows() });
    }
    let li = est.factor().lower_inverse();
    let b = &li * p.as_vector();
    let b_norm = b.norm();
    let a = linalg::matmul(&li, ys);
    Ok(a.column_iter()
        .map(|col| {
            let cross = col.iter().zip(b.iter()).map(|(x, y)| x.conj() * y).sum::<linalg::C64>().norm();
            let yy = col.norm();
            if yy > 0.0 {
                (cross / (yy * b_norm)).clamp(0.0, 1.0)
            } else {
                0.0
            }
        })
        .collect())
}

/// Decide H1 iff `T > threshold`.
pub fn decide(stat: &GlrtStatistic, threshold: f64) -> bool {
    stat.value > threshold
}

/// `rho / ((1/N) tr C_hat(rho))`, a data-only estimate of `rho_bar`.
pub fn empirical_rho_bar(est: &ScatterEstimate) -> f64 {
    est.rho.rho / (linalg::trace_re(est.matrix()) / est.dim() as f64)
}

/// Traces and quadratic forms of `C_hat` used by the plug-in variance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PluginTerms {
    pub tr_c: f64,
    pub tr_cinv: f64,
    pub p_cinv_p: f64,
    pub p_cinv2_p: f64,
}

pub fn plugin_terms(est: &ScatterEstimate, p: &SteeringVector) -> PluginTerms {
    let n = est.dim() as f64;
    let f = est.factor();
    let cinv_p = f.solve(p.as_vector());
    PluginTerms {
        tr_c: linalg::trace_re(est.matrix()) / n,
        tr_cinv: f.inverse_trace() / n,
        p_cinv_p: linalg::dot(p.as_vector(), &cinv_p).re,
        p_cinv2_p: linalg::norm_sqr(&cinv_p),
    }
}

/// Plug-in estimate `sigma_hat^2(rho_bar)` of the limiting variance, valid for `rho < 1`.
pub fn empirical_sigma2(est: &ScatterEstimate, p: &SteeringVector, rho_bar: f64, c: f64) -> Result<f64> {
    if est.rho.rho >= 1.0 {
        return Err(Error::InvalidParameter {
            name: "rho",
            reason: "rho = 1 is a removable singularity; use empirical_sigma2_at_one".into(),
        });
    }
    if p.dim() != est.dim() {
        return Err(Error::DimensionMismatch { expected: est.dim(), got: p.dim() });
    }
    let t = plugin_terms(est, p);
    let prod = t.tr_cinv * t.tr_c;
    let numerator = 1.0 - rho_bar * (t.p_cinv2_p / t.p_cinv_p) * t.tr_c;
    let denominator = (1.0 - c + c * rho_bar * prod) * (1.0 - rho_bar * prod);
    if !(denominator > 0.0) {
        return Err(Error::DegenerateDenominator { context: "plug-in variance", value: denominator });
    }
    let sigma2 = 0.5 * numerator / denominator;
    if !(sigma2 > 0.0) || !sigma2.is_finite() {
        return Err(Error::DegenerateDenominator { context: "plug-in variance numerator", value: numerator });
    }
    Ok(sigma2)
}

fn sigma2_from_gram_columns(columns: &CMat, p: &SteeringVector) -> f64 {
    // (1/2) p^* S p / ((1/N) tr S) with S = (1/n) sum_i v_i v_i^*.
    let n = columns.ncols() as f64;
    let dim = columns.nrows() as f64;
    let mut quad = 0.0;
    let mut trace = 0.0;
    for col in columns.column_iter() {
        let proj: linalg::C64 = p.as_vector().iter().zip(col.iter()).map(|(a, b)| a.conj() * b).sum();
        quad += proj.norm_sqr();
        trace += col.norm_squared();
    }
    0.5 * (quad / n) / (trace / (n * dim))
}

/// `lim_{rho_bar -> 1} sigma_hat^2`, evaluated with the texture-free proxies
/// `z_i ~ sqrt(N) x_i / ||x_i||`.
pub fn empirical_sigma2_at_one(data: &Dataset, p: &SteeringVector) -> Result<f64> {
    if p.dim() != data.dim() {
        return Err(Error::DimensionMismatch { expected: data.dim(), got: p.dim() });
    }
    let dim = data.dim() as f64;
    let mut proxies = data.samples().clone();
    for (index, mut col) in proxies.column_iter_mut().enumerate() {
        let norm = col.norm();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::ZeroSample { index });
        }
        col *= linalg::C64::new(dim.sqrt() / norm, 0.0);
    }
    Ok(sigma2_from_gram_columns(&proxies, p))
}

/// Same limit evaluated on the ground-truth `z_i` (simulation only).
pub fn empirical_sigma2_at_one_truth(data: &Dataset, p: &SteeringVector) -> Result<f64> {
    let truth = data.truth().ok_or(Error::MissingTruth)?;
    if p.dim() != data.dim() {
        return Err(Error::DimensionMismatch { expected: data.dim(), got: p.dim() });
    }
    Ok(sigma2_from_gram_columns(&truth.z, p))
}

/// One grid point of a shrinkage sweep.
#[derive(Debug, Clone)]
pub struct SweepPoint {
    pub rho: f64,
    pub rho_bar_hat: f64,
    pub sigma2_hat: f64,
    pub estimate: ScatterEstimate,
}

/// Fits `C_hat(rho)` at every grid value (warm-starting each fit from the
/// previous solution) and evaluates the plug-in variance. Failed points are
/// returned as errors in place.
pub fn sweep_points(data: &Dataset, p: &SteeringVector, grid: &[f64], cfg: &SolverConfig) -> Vec<Result<SweepPoint>> {
    let dim = data.dim();
    let c = data.ratio();
    let mut warm = CMat::identity(dim, dim);
    grid.iter()
        .map(|&rho| {
            let param = ShrinkageParam::new(rho, c, DEFAULT_KAPPA)?;
            let estimate = robust_shrinkage_fit_from(data, param, cfg, &warm)?;
            if rho < 1.0 {
                warm = estimate.matrix().clone();
            }
            let (rho_bar_hat, sigma2_hat) = if rho == 1.0 {
                (1.0, empirical_sigma2_at_one(data, p)?)
            } else {
                let rb = empirical_rho_bar(&estimate);
                (rb, empirical_sigma2(&estimate, p, rb, c)?)
            };
            Ok(SweepPoint { rho, rho_bar_hat, sigma2_hat, estimate })
        })
        .collect()
}

/// Per-grid-point outcome of the selector.
#[derive(Debug, Clone, Serialize)]
pub struct SweepEntry {
    pub rho: f64,
    pub rho_bar_hat: Option<f64>,
    pub sigma2_hat: Option<f64>,
    pub iterations: Option<usize>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RhoSweepResult {
    pub entries: Vec<SweepEntry>,
    pub rho_star: f64,
    pub index: usize,
}

/// Index of the smallest value; ties go to the smallest `rho`.
pub(crate) fn argmin_by_rho(values: &[(f64, f64)]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (k, &(rho, v)) in values.iter().enumerate() {
        if !v.is_finite() {
            continue;
        }
        best = match best {
            None => Some(k),
            Some(b) => {
                let (brho, bv) = values[b];
                if v < bv || (v == bv && rho < brho) {
                    Some(k)
                } else {
                    Some(b)
                }
            }
        };
    }
    best
}

/// `rho_hat^* = argmin_rho sigma_hat^2(rho_bar)` over `grid`.
pub fn select_rho_star(data: &Dataset, p: &SteeringVector, grid: &[f64], cfg: &SolverConfig) -> Result<RhoSweepResult> {
    if grid.is_empty() {
        return Err(Error::InvalidParameter { name: "grid", reason: "grid must not be empty".into() });
    }
    let points = sweep_points(data, p, grid, cfg);
    let entries: Vec<SweepEntry> = points
        .iter()
        .zip(grid)
        .map(|(pt, &rho)| match pt {
            Ok(pt) => SweepEntry {
                rho,
                rho_bar_hat: Some(pt.rho_bar_hat),
                sigma2_hat: Some(pt.sigma2_hat),
                iterations: Some(pt.estimate.iterations_used),
                error: None,
            },
            Err(e) => SweepEntry { rho, rho_bar_hat: None, sigma2_hat: None, iterations: None, error: Some(e.to_string()) },
        })
        .collect();
    let keyed: Vec<(f64, f64)> = entries.iter().map(|e| (e.rho, e.sigma2_hat.unwrap_or(f64::NAN))).collect();
    let index = argmin_by_rho(&keyed).ok_or(Error::AllPointsFailed)?;
    Ok(RhoSweepResult { rho_star: grid[index], index, entries })
}
