//! Scalar random-matrix fixed points and the limiting false-alarm variance.
//!
//! All integrals against the spectral measure of `C_N` are plain averages over
//! its eigenvalues. Both scalar equations are solved by bisection on a
//! monotone function, so convergence never depends on a starting guess.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{CovarianceModel, SteeringVector};

/// Largest admissible absolute residual for the scalar fixed points.
pub const FIXED_POINT_RESIDUAL: f64 = 1e-12;

/// `alpha(rho) = (1 - rho) / (1 - (1 - rho) c)`.
pub fn shrinkage_alpha(rho: f64, c: f64) -> Result<f64> {
    let denom = 1.0 - (1.0 - rho) * c;
    if !(denom > 0.0) {
        return Err(Error::DegenerateDenominator { context: "1 - (1 - rho) c", value: denom });
    }
    Ok((1.0 - rho) / denom)
}

/// Bisection for the root of a function that is positive left of the root
/// and negative right of it (pass `-f` for increasing functions). Runs until
/// the midpoint no longer moves.
fn bisect(mut lo: f64, mut hi: f64, f: impl Fn(f64) -> f64) -> f64 {
    for _ in 0..4096 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if f(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let (flo, fhi) = (f(lo).abs(), f(hi).abs());
    if flo <= fhi {
        lo
    } else {
        hi
    }
}

fn mean(values: impl Iterator<Item = f64>, count: usize) -> f64 {
    values.sum::<f64>() / count as f64
}

/// `(1/N) sum_i lambda_i / (gamma rho + (1 - rho) lambda_i) - 1`.
pub fn gamma_equation(eigenvalues: &[f64], rho: f64, gamma: f64) -> f64 {
    mean(eigenvalues.iter().map(|&l| l / (gamma * rho + (1.0 - rho) * l)), eigenvalues.len()) - 1.0
}

/// `gamma_N(rho)`, the unique positive root of [`gamma_equation`].
pub fn solve_gamma(model: &CovarianceModel, rho: f64) -> Result<f64> {
    let eig = model.eigenvalues();
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(Error::RhoOutOfRange { rho, lower: 0.0 });
    }
    if rho == 1.0 {
        return Ok(mean(eig.iter().copied(), eig.len()));
    }
    // Strictly decreasing in gamma, equal to rho / (1 - rho) > 0 at gamma = 0.
    let f = |g: f64| gamma_equation(eig, rho, g);
    let mut hi = 1.0;
    let mut grown = 0;
    while f(hi) > 0.0 {
        hi *= 2.0;
        grown += 1;
        if grown > 1100 || !hi.is_finite() {
            return Err(Error::BracketFailure("gamma_N(rho)"));
        }
    }
    let gamma = bisect(0.0, hi, f);
    if !(gamma > 0.0) || f(gamma).abs() > FIXED_POINT_RESIDUAL {
        return Err(Error::BracketFailure("gamma_N(rho)"));
    }
    Ok(gamma)
}

/// `rho_bar = rho / (rho + alpha(rho) / gamma)`.
pub fn rho_bar(rho: f64, c: f64, gamma: f64) -> Result<f64> {
    if !(gamma > 0.0) {
        return Err(Error::InvalidParameter { name: "gamma", reason: format!("must be positive, got {gamma}") });
    }
    let alpha = shrinkage_alpha(rho, c)?;
    Ok(rho / (rho + alpha / gamma))
}

/// `m (rho_bar + c (1/N) sum (1 - rho_bar) lambda / (1 + (1 - rho_bar) lambda m)) - 1`.
pub fn stieltjes_equation(eigenvalues: &[f64], rho_bar: f64, c: f64, m: f64) -> f64 {
    let s = 1.0 - rho_bar;
    let integral = mean(eigenvalues.iter().map(|&l| s * l / (1.0 + s * l * m)), eigenvalues.len());
    m * (rho_bar + c * integral) - 1.0
}

/// `m(-rho_bar) > 0`, the Stieltjes transform of the limiting spectrum of
/// `(1 - rho_bar) (1/n) Z^* Z` evaluated on the negative real axis.
pub fn solve_stieltjes(model: &CovarianceModel, rho_bar: f64, c: f64) -> Result<f64> {
    if !(rho_bar > 0.0 && rho_bar <= 1.0) {
        return Err(Error::InvalidParameter { name: "rho_bar", reason: format!("must lie in (0, 1], got {rho_bar}") });
    }
    if !(c > 0.0) {
        return Err(Error::InvalidParameter { name: "c", reason: format!("must be positive, got {c}") });
    }
    let eig = model.eigenvalues();
    if rho_bar == 1.0 {
        return Ok(1.0);
    }
    // Increasing in m, -1 at m = 0 and non-negative at m = 1 / rho_bar.
    let g = |m: f64| stieltjes_equation(eig, rho_bar, c, m);
    let hi = 1.0 / rho_bar;
    if g(hi) < 0.0 {
        return Err(Error::BracketFailure("m(-rho_bar)"));
    }
    let m = bisect(0.0, hi, |m| -g(m));
    if !(m > 0.0) || g(m).abs() > FIXED_POINT_RESIDUAL {
        return Err(Error::BracketFailure("m(-rho_bar)"));
    }
    Ok(m)
}

/// Ingredients of the limiting variance, all evaluated in the eigenbasis of `C`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct VarianceTerms {
    /// `p^* C Q^2 p`
    pub p_cq2_p: f64,
    /// `p^* Q p`
    pub p_q_p: f64,
    /// `(1/N) tr C Q`
    pub tr_cq: f64,
    /// `1 - c (1 - rho_bar)^2 m^2 (1/N) tr C^2 Q^2`
    pub bracket: f64,
}

pub fn variance_terms(model: &CovarianceModel, p: &SteeringVector, rho_bar: f64, m: f64, c: f64) -> Result<VarianceTerms> {
    if p.dim() != model.dim() {
        return Err(Error::DimensionMismatch { expected: model.dim(), got: p.dim() });
    }
    let eig = model.eigenvalues();
    let weights = model.spectral_weights(p);
    let s = 1.0 - rho_bar;
    // Eigenvalues of Q = (I + (1 - rho_bar) m C)^{-1}.
    let q: Vec<f64> = eig.iter().map(|&l| 1.0 / (1.0 + s * m * l)).collect();
    let n = eig.len();
    let p_cq2_p = weights.iter().zip(eig).zip(&q).map(|((w, l), d)| w * l * d * d).sum();
    let p_q_p = weights.iter().zip(&q).map(|(w, d)| w * d).sum();
    let tr_cq = mean(eig.iter().zip(&q).map(|(l, d)| l * d), n);
    let tr_c2q2 = mean(eig.iter().zip(&q).map(|(l, d)| l * l * d * d), n);
    let bracket = 1.0 - c * s * s * m * m * tr_c2q2;
    Ok(VarianceTerms { p_cq2_p, p_q_p, tr_cq, bracket })
}

/// Limiting variance `sigma_N^2(rho_bar)` of the Rayleigh law approximating
/// `sqrt(N) T_N(rho)` under the noise-only hypothesis.
pub fn theoretical_sigma2(model: &CovarianceModel, p: &SteeringVector, rho_bar: f64, m: f64, c: f64) -> Result<f64> {
    let t = variance_terms(model, p, rho_bar, m, c)?;
    if !(t.bracket > 0.0 && t.bracket <= 1.0) {
        return Err(Error::DegenerateDenominator { context: "1 - c (1 - rho_bar)^2 m^2 (1/N) tr C^2 Q^2", value: t.bracket });
    }
    let sigma2 = 0.5 * t.p_cq2_p / (t.p_q_p * t.tr_cq * t.bracket);
    if !(sigma2 > 0.0) || !sigma2.is_finite() {
        return Err(Error::DegenerateDenominator { context: "sigma^2", value: sigma2 });
    }
    Ok(sigma2)
}

/// `P(R > gamma) = exp(-gamma^2 / (2 sigma^2))` for `R ~ Rayleigh(sigma)`.
pub fn rayleigh_tail(gamma: f64, sigma2: f64) -> f64 {
    (-gamma * gamma / (2.0 * sigma2)).exp()
}

/// Every theoretical quantity attached to one `(C, p, c, rho)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TheoryContext {
    pub c: f64,
    pub rho: f64,
    pub gamma: f64,
    pub alpha: f64,
    pub rho_bar: f64,
    pub m: f64,
    pub sigma2: f64,
    /// Eigenvalues of `Q_N(rho_bar)`, aligned with the ascending eigenvalues of `C`.
    pub resolvent_diagonal: Vec<f64>,
}

impl TheoryContext {
    pub fn evaluate(model: &CovarianceModel, p: &SteeringVector, c: f64, rho: f64) -> Result<Self> {
        let lower = (1.0 - 1.0 / c).max(0.0);
        if !(rho > lower && rho <= 1.0) {
            return Err(Error::RhoOutOfRange { rho, lower });
        }
        let gamma = solve_gamma(model, rho)?;
        let alpha = shrinkage_alpha(rho, c)?;
        let rho_bar = rho_bar(rho, c, gamma)?;
        let m = solve_stieltjes(model, rho_bar, c)?;
        let sigma2 = theoretical_sigma2(model, p, rho_bar, m, c)?;
        let resolvent_diagonal = model
            .eigenvalues()
            .iter()
            .map(|&l| 1.0 / (1.0 + (1.0 - rho_bar) * m * l))
            .collect();
        Ok(Self { c, rho, gamma, alpha, rho_bar, m, sigma2, resolvent_diagonal })
    }

    pub fn false_alarm(&self, gamma_threshold: f64) -> f64 {
        rayleigh_tail(gamma_threshold, self.sigma2)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_toeplitz_ar, uniform_steering};

    const RHO_BAR_ID: f64 = 0.2 / (0.2 + 0.8 / 0.6);

    #[test]
    fn identity_gamma_is_one() {
        let model = CovarianceModel::identity(5).unwrap();
        for rho in [0.01, 0.2, 0.5, 0.99, 1.0] {
            assert!((solve_gamma(&model, rho).unwrap() - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn gamma_at_rho_one_is_one_for_normalized_spectrum() {
        let model = build_toeplitz_ar(0.9, 12).unwrap();
        assert!((solve_gamma(&model, 1.0).unwrap() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn rho_bar_cases() {
        assert_eq!(rho_bar(1.0, 0.5, 0.7).unwrap(), 1.0);
        assert!((rho_bar(0.2, 0.5, 1.0).unwrap() - 0.130_434_782_608_695_65).abs() < 1e-15);
        // 1 - (1 - rho) c <= 0 outside the admissible range.
        assert!(rho_bar(0.2, 2.0, 1.0).is_err());
        assert!(rho_bar(0.2, 0.5, 0.0).is_err());
    }

    #[test]
    fn stieltjes_cases() {
        let model = CovarianceModel::identity(3).unwrap();
        assert_eq!(solve_stieltjes(&model, 1.0, 0.5).unwrap(), 1.0);
        let m = solve_stieltjes(&model, RHO_BAR_ID, 0.5).unwrap();
        assert!((m - 4.6).abs() < 1e-12, "m = {m}");
        assert!(solve_stieltjes(&model, 0.0, 0.5).is_err());
    }

    #[test]
    fn identity_sigma2_closed_form() {
        let model = CovarianceModel::identity(7).unwrap();
        let p = uniform_steering(7).unwrap();
        let ctx = TheoryContext::evaluate(&model, &p, 0.5, 0.2).unwrap();
        assert!((ctx.sigma2 - 0.5 / 0.68).abs() < 1e-12);
        assert!(ctx.resolvent_diagonal.iter().all(|q| (q - 0.2).abs() < 1e-12));
    }

    #[test]
    fn sigma2_at_rho_bar_one() {
        let model = build_toeplitz_ar(0.7, 10).unwrap();
        let p = uniform_steering(10).unwrap();
        let pcp = (p.as_vector().adjoint() * model.matrix() * p.as_vector())[(0, 0)].re;
        let s2 = theoretical_sigma2(&model, &p, 1.0, 1.0, 0.5).unwrap();
        assert!((s2 - 0.5 * pcp).abs() < 1e-12);
    }

    #[test]
    fn degenerate_bracket_detected() {
        let model = CovarianceModel::identity(4).unwrap();
        let p = uniform_steering(4).unwrap();
        // c > 1 with a large m drives the bracket negative.
        assert!(matches!(
            theoretical_sigma2(&model, &p, 0.1, 50.0, 2.0),
            Err(Error::DegenerateDenominator { .. })
        ));
    }

    #[test]
    fn rayleigh_tail_values() {
        assert_eq!(rayleigh_tail(0.0, 0.3), 1.0);
        assert!((rayleigh_tail(1.0, 0.5) - (-1.0f64).exp()).abs() < 1e-15);
        assert!((rayleigh_tail(2.0, 0.735294) - (-4.0f64 / (2.0 * 0.735294)).exp()).abs() < 1e-15);
        assert!((rayleigh_tail(2.0, 0.735294) - 0.0659).abs() < 5e-5);
    }
}
