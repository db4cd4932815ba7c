//! Library results checked against independent computations done here with
//! plain loops, dense inverses and textbook algorithms.

use nalgebra::DMatrix;
use num_complex::Complex64 as C64;
use rtse::detector::{self, decide, glrt_statistic, GlrtStatistic};
use rtse::estimators::{
    deterministic_equivalent, robust_shrinkage_fit, robust_shrinkage_fit_from, Equivalent, ShrinkageParam,
    SolverConfig,
};
use rtse::linalg::{CMat, CVec};
use rtse::model::{self, build_toeplitz_ar, sample_dataset, CovarianceModel, TextureModel};
use rtse::rmt::{self, TheoryContext};

fn toeplitz_data(dim: usize, n: usize, texture: &TextureModel, seed: u64) -> (CovarianceModel, rtse::model::Dataset) {
    let m = build_toeplitz_ar(0.7, dim).unwrap();
    let d = sample_dataset(&m, n, texture, seed).unwrap();
    (m, d)
}

/// Cyclic Jacobi eigenvalue iteration for real symmetric matrices.
fn jacobi_eigenvalues(mut a: DMatrix<f64>) -> Vec<f64> {
    let n = a.nrows();
    for _sweep in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).filter(|(i, j)| i != j).map(|(i, j)| a[(i, j)].powi(2)).sum();
        if off < 1e-26 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                if a[(p, q)].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * a[(p, q)]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| a[(i, i)]).collect();
    ev.sort_by(f64::total_cmp);
    ev
}

#[test]
fn toeplitz_eigenvalues_match_jacobi() {
    let m = build_toeplitz_ar(0.7, 20).unwrap();
    let explicit = DMatrix::from_fn(20, 20, |i, j| 0.7_f64.powi((i as i32 - j as i32).abs()));
    let oracle = jacobi_eigenvalues(explicit);
    for (a, b) in m.eigenvalues().iter().zip(&oracle) {
        assert!((a - b).abs() < 1e-10, "{a} vs {b}");
    }
    assert!((m.eigenvalues().iter().sum::<f64>() / 20.0 - 1.0).abs() < 1e-12);
}

#[test]
fn toeplitz_small_cases() {
    let m = build_toeplitz_ar(0.7, 2).unwrap();
    assert!((m.eigenvalues()[0] - 0.3).abs() < 1e-12);
    assert!((m.eigenvalues()[1] - 1.7).abs() < 1e-12);
    let one = build_toeplitz_ar(0.3, 1).unwrap();
    assert_eq!(one.matrix()[(0, 0)], C64::new(1.0, 0.0));
    assert!(build_toeplitz_ar(1.0, 4).is_err());
    assert!(build_toeplitz_ar(0.0, 4).is_err());
    assert!(build_toeplitz_ar(0.5, 0).is_err());
}

#[test]
fn identity_closed_forms() {
    let model = CovarianceModel::identity(16).unwrap();
    let p = model::uniform_steering(16).unwrap();
    let t = TheoryContext::evaluate(&model, &p, 0.5, 0.2).unwrap();
    // gamma = 1; alpha = 0.8 / 0.6; rho_bar = 0.2 / (0.2 + alpha).
    let alpha = 0.8 / 0.6;
    let rb = 0.2 / (0.2 + alpha);
    assert!((t.gamma - 1.0).abs() < 1e-9);
    assert!((t.rho_bar - rb).abs() < 1e-12);
    assert!((t.rho_bar - 0.130434).abs() < 1e-6);
    // m solves c s m^2 + (rho_bar + c s - ... ) : quadratic from m (rb + c s / (1 + s m)) = 1.
    let s = 1.0 - rb;
    let (qa, qb, qc) = (rb * s, rb + 0.5 * s - s, -1.0);
    let m = (-qb + (qb * qb - 4.0 * qa * qc).sqrt()) / (2.0 * qa);
    assert!((t.m - m).abs() < 1e-9);
    assert!((t.m - 4.6).abs() < 1e-9);
    assert!((t.sigma2 - 0.5 / 0.68).abs() < 1e-9);
}

#[test]
fn gamma_matches_newton_oracle() {
    let model = build_toeplitz_ar(0.7, 50).unwrap();
    for &rho in &[0.05, 0.3, 0.8] {
        let eig = model.eigenvalues();
        // Newton on f(g) = mean(l / (g rho + (1 - rho) l)) - 1 from g = 1.
        let mut g = 1.0_f64;
        for _ in 0..100 {
            let f: f64 = eig.iter().map(|l| l / (g * rho + (1.0 - rho) * l)).sum::<f64>() / 50.0 - 1.0;
            let df: f64 = eig.iter().map(|l| -l * rho / (g * rho + (1.0 - rho) * l).powi(2)).sum::<f64>() / 50.0;
            g -= f / df;
        }
        let ours = rmt::solve_gamma(&model, rho).unwrap();
        assert!((ours - g).abs() < 1e-10, "rho {rho}: {ours} vs {g}");
        // Grid scan: the sign change sits within one grid step of the root.
        let step = 1e-4;
        let below = rmt::gamma_equation(eig, rho, ours - step);
        let above = rmt::gamma_equation(eig, rho, ours + step);
        assert!(below > 0.0 && above < 0.0);
    }
}

#[test]
fn stieltjes_matches_secant_oracle() {
    let model = build_toeplitz_ar(0.7, 40).unwrap();
    let eig = model.eigenvalues().to_vec();
    for &(rb, c) in &[(0.05, 0.5), (0.4, 0.5), (0.2, 2.0)] {
        let h = |m: f64| {
            let s = 1.0 - rb;
            m * (rb + c * eig.iter().map(|l| s * l / (1.0 + s * l * m)).sum::<f64>() / eig.len() as f64) - 1.0
        };
        let (mut a, mut b) = (0.5_f64, 1.0_f64);
        for _ in 0..200 {
            let (fa, fb) = (h(a), h(b));
            if fb == fa {
                break;
            }
            let nb = b - fb * (b - a) / (fb - fa);
            a = b;
            b = nb;
        }
        let ours = rmt::solve_stieltjes(&model, rb, c).unwrap();
        assert!((ours - b).abs() < 1e-9 * b.max(1.0), "{ours} vs {b}");
    }
}

#[test]
fn sigma2_matches_dense_matrix_evaluation() {
    let model = build_toeplitz_ar(0.7, 30).unwrap();
    let p = model::uniform_steering(30).unwrap();
    let (c, rho) = (0.5, 0.3);
    let t = TheoryContext::evaluate(&model, &p, c, rho).unwrap();
    let cm = model.matrix().clone();
    let s = 1.0 - t.rho_bar;
    let q = (CMat::identity(30, 30) + &cm * C64::new(s * t.m, 0.0)).try_inverse().unwrap();
    let pv = p.as_vector();
    let quad = |m: &CMat| (pv.adjoint() * m * pv)[(0, 0)].re;
    let q2 = &q * &q;
    let tr = |m: &CMat| m.trace().re / 30.0;
    let bracket = 1.0 - c * s * s * t.m * t.m * tr(&(&cm * &cm * &q2));
    let sigma2 = 0.5 * quad(&(&cm * &q2)) / (quad(&q) * tr(&(&cm * &q)) * bracket);
    assert!((sigma2 - t.sigma2).abs() < 1e-10 * sigma2, "{sigma2} vs {}", t.sigma2);
}

#[test]
fn rayleigh_tail_matches_numeric_integral() {
    for &(g, s2) in &[(1.0, 0.5), (2.0, 0.9113), (3.0, 1.7)] {
        // Simpson on the density t / s2 exp(-t^2 / (2 s2)) over [g, g + 40].
        let (a, b, k) = (g, g + 40.0, 20_000);
        let h = (b - a) / k as f64;
        let f = |t: f64| t / s2 * (-t * t / (2.0 * s2)).exp();
        let mut acc = f(a) + f(b);
        for i in 1..k {
            acc += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        let integral = acc * h / 3.0;
        assert!((rmt::rayleigh_tail(g, s2) - integral).abs() < 1e-10);
    }
}

/// Explicit-inverse evaluation of the fixed-point equation on the raw samples.
fn naive_rhs(x: &CMat, cand: &CMat, rho: f64) -> CMat {
    let (dim, n) = x.shape();
    let inv = cand.clone().try_inverse().unwrap();
    let mut acc = CMat::zeros(dim, dim);
    for i in 0..n {
        let xi = x.column(i).into_owned();
        let q = (xi.adjoint() * &inv * &xi)[(0, 0)].re / dim as f64;
        acc += (&xi * xi.adjoint()) / C64::new(q, 0.0);
    }
    acc * C64::new((1.0 - rho) / n as f64, 0.0) + CMat::identity(dim, dim) * C64::new(rho, 0.0)
}

#[test]
fn fit_solves_the_fixed_point_equation() {
    let (_, data) = toeplitz_data(12, 30, &TextureModel::InverseGamma { shape: 1.2 }, 4);
    for &rho in &[0.05, 0.2, 0.7] {
        let est = robust_shrinkage_fit(&data, ShrinkageParam::for_dataset(rho, &data).unwrap(), &SolverConfig::default()).unwrap();
        let rhs = naive_rhs(data.samples(), est.matrix(), rho);
        let rel = (rhs - est.matrix()).norm() / est.matrix().norm();
        assert!(rel < 1e-8, "rho {rho}: residual {rel}");
        assert!(est.final_residual < 1e-9);
    }
}

#[test]
fn fixed_point_is_unique_across_starts() {
    let (_, data) = toeplitz_data(20, 40, &TextureModel::Unit, 8);
    let rho = ShrinkageParam::for_dataset(0.2, &data).unwrap();
    let cfg = SolverConfig::default();
    let from_id = robust_shrinkage_fit(&data, rho, &cfg).unwrap();
    let starts = [
        CMat::identity(20, 20) * C64::new(5.0, 0.0),
        CMat::identity(20, 20) * C64::new(0.05, 0.0),
        rtse::estimators::sample_covariance(&data) + CMat::identity(20, 20),
    ];
    for init in &starts {
        let other = robust_shrinkage_fit_from(&data, rho, &cfg, init).unwrap();
        let gap = (other.matrix() - from_id.matrix()).norm() / from_id.matrix().norm();
        assert!(gap < 1e-7, "gap {gap}");
    }
}

#[test]
fn equivalents_follow_their_definitions() {
    let (model, data) = toeplitz_data(8, 16, &TextureModel::InverseGamma { shape: 2.0 }, 2);
    let z = &data.truth().unwrap().z;
    let n = z.ncols() as f64;
    let mut gram = CMat::zeros(8, 8);
    for col in z.column_iter() {
        gram += col * col.adjoint();
    }
    gram /= C64::new(n, 0.0);
    let rho = 0.3;
    let gamma = rmt::solve_gamma(&model, rho).unwrap();
    let alpha = (1.0 - rho) / (1.0 - (1.0 - rho) * 0.5);
    let want = &gram * C64::new(alpha / gamma, 0.0) + CMat::identity(8, 8) * C64::new(rho, 0.0);
    let got = deterministic_equivalent(&data, gamma, rho, 0.5, Equivalent::Scaled).unwrap();
    assert!((got - want).norm() < 1e-12);
    let want = &gram * C64::new(1.0 - rho, 0.0) + CMat::identity(8, 8) * C64::new(rho, 0.0);
    let got = deterministic_equivalent(&data, 0.0, rho, 0.5, Equivalent::Normalized).unwrap();
    assert!((got - want).norm() < 1e-12);
}

#[test]
fn glrt_matches_dense_formula() {
    let (model, data) = toeplitz_data(10, 20, &TextureModel::Unit, 5);
    let est = robust_shrinkage_fit(&data, ShrinkageParam::for_dataset(0.4, &data).unwrap(), &SolverConfig::default()).unwrap();
    let y = sample_dataset(&model, 1, &TextureModel::Unit, 77).unwrap().samples().column(0).into_owned();
    let p = model::uniform_steering(10).unwrap();
    let inv = est.matrix().clone().try_inverse().unwrap();
    let pv = p.as_vector();
    let num = (y.adjoint() * &inv * pv)[(0, 0)].norm();
    let den = ((y.adjoint() * &inv * &y)[(0, 0)].re * (pv.adjoint() * &inv * pv)[(0, 0)].re).sqrt();
    let stat = glrt_statistic(&y, &p, &est).unwrap();
    assert!((stat.value - num / den).abs() < 1e-12);
    let batch = detector::glrt_batch(&CMat::from_columns(&[y.clone(), y * C64::new(0.0, 2.0)]), &p, &est).unwrap();
    assert!((batch[0] - stat.value).abs() < 1e-12 && (batch[1] - stat.value).abs() < 1e-12);
}

#[test]
fn decision_boundary_is_strict() {
    let mk = |value| GlrtStatistic { rho: 0.2, value, y_cinv_p_abs: 0.0, y_cinv_y: 1.0, p_cinv_p: 1.0 };
    assert!(!decide(&mk(0.5), 0.5));
    assert!(decide(&mk(1.0), 0.99));
    assert!(decide(&mk(1e-9), 0.0));
}

#[test]
fn plugin_variance_matches_dense_formula() {
    let (_, data) = toeplitz_data(16, 32, &TextureModel::Unit, 6);
    let p = model::uniform_steering(16).unwrap();
    let est = robust_shrinkage_fit(&data, ShrinkageParam::for_dataset(0.3, &data).unwrap(), &SolverConfig::default()).unwrap();
    let c = 0.5;
    let m = est.matrix();
    let inv = m.clone().try_inverse().unwrap();
    let tr = |a: &CMat| a.trace().re / 16.0;
    let rb = 0.3 / tr(m);
    let pv = p.as_vector();
    let quad = |a: &CMat| (pv.adjoint() * a * pv)[(0, 0)].re;
    let prod = tr(&inv) * tr(m);
    let want = 0.5 * (1.0 - rb * quad(&(&inv * &inv)) / quad(&inv) * tr(m)) / ((1.0 - c + c * rb * prod) * (1.0 - rb * prod));
    let got = detector::empirical_sigma2(&est, &p, detector::empirical_rho_bar(&est), c).unwrap();
    assert!((got - want).abs() < 1e-10 * want, "{got} vs {want}");
}

#[test]
fn plugin_variance_at_one_matches_proxy_formula() {
    let (_, data) = toeplitz_data(12, 24, &TextureModel::InverseGamma { shape: 1.5 }, 7);
    let p = model::uniform_steering(12).unwrap();
    let x = data.samples();
    let mut quad = 0.0;
    for col in x.column_iter() {
        let v: CVec = col.into_owned() * C64::new(12f64.sqrt() / col.norm(), 0.0);
        quad += (p.as_vector().adjoint() * &v)[(0, 0)].norm_sqr();
    }
    // (1/N) tr of the proxy Gram matrix is exactly 1.
    let want = 0.5 * quad / 24.0;
    let got = detector::empirical_sigma2_at_one(&data, &p).unwrap();
    assert!((got - want).abs() < 1e-12);
}

#[test]
fn plugin_variance_is_continuous_at_one() {
    let p = model::uniform_steering(100).unwrap();
    let gaps: Vec<f64> = (0..5)
        .map(|seed| {
            let (_, data) = toeplitz_data(100, 200, &TextureModel::Unit, 100 + seed);
            let rho = 1.0 - 1e-3;
            let est = robust_shrinkage_fit(&data, ShrinkageParam::for_dataset(rho, &data).unwrap(), &SolverConfig::default()).unwrap();
            let near = detector::empirical_sigma2(&est, &p, detector::empirical_rho_bar(&est), data.ratio()).unwrap();
            let at = detector::empirical_sigma2_at_one(&data, &p).unwrap();
            (near - at).abs() / at
        })
        .collect();
    let med = rtse::montecarlo::median(&gaps).unwrap();
    assert!(med <= 0.02, "median relative gap {med}");
}

#[test]
fn trace_ratio_tracks_theoretical_rho_bar() {
    let (model, data) = toeplitz_data(200, 400, &TextureModel::InverseGamma { shape: 2.0 }, 3);
    let p = model::uniform_steering(200).unwrap();
    for &rho in &[0.1, 0.5] {
        let est = robust_shrinkage_fit(&data, ShrinkageParam::for_dataset(rho, &data).unwrap(), &SolverConfig::default()).unwrap();
        let th = TheoryContext::evaluate(&model, &p, 0.5, rho).unwrap();
        let hat = detector::empirical_rho_bar(&est);
        assert!((hat - th.rho_bar).abs() <= 0.05 * th.rho_bar, "rho {rho}: {hat} vs {}", th.rho_bar);
    }
}

#[test]
fn sample_covariance_concentrates() {
    let model = CovarianceModel::identity(4).unwrap();
    let data = sample_dataset(&model, 10_000, &TextureModel::Unit, 9).unwrap();
    let s = rtse::estimators::sample_covariance(&data) - CMat::identity(4, 4);
    let herm = DMatrix::from_fn(8, 8, |i, j| {
        // real embedding [[A, -B], [B, A]] shares the spectrum of A + iB
        let (a, b) = (s[(i % 4, j % 4)].re, s[(i % 4, j % 4)].im);
        match (i < 4, j < 4) {
            (true, true) | (false, false) => a,
            (true, false) => -b,
            (false, true) => b,
        }
    });
    let spec = jacobi_eigenvalues(herm).iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    assert!(spec < 0.1, "spectral gap {spec}");
}

#[test]
fn selector_single_point_and_failures() {
    let (_, data) = toeplitz_data(10, 20, &TextureModel::Unit, 1);
    let p = model::uniform_steering(10).unwrap();
    let r = detector::select_rho_star(&data, &p, &[0.4], &SolverConfig::default()).unwrap();
    assert_eq!(r.rho_star, 0.4);
    let bad = SolverConfig { max_iterations: 1, ..SolverConfig::default() };
    assert!(matches!(
        detector::select_rho_star(&data, &p, &[0.3, 0.4], &bad),
        Err(rtse::Error::AllPointsFailed)
    ));
    // rho = 1 never iterates, so it survives a starved solver and wins.
    let r = detector::select_rho_star(&data, &p, &[0.3, 1.0], &bad).unwrap();
    assert_eq!(r.rho_star, 1.0);
    assert!(r.entries[0].error.is_some());
}

#[test]
fn selector_ranks_like_the_false_alarm_prediction() {
    let (_, data) = toeplitz_data(30, 60, &TextureModel::Unit, 12);
    let p = model::uniform_steering(30).unwrap();
    let grid: Vec<f64> = (1..=10).map(|k| k as f64 / 10.0).collect();
    let r = detector::select_rho_star(&data, &p, &grid, &SolverConfig::default()).unwrap();
    for &g in &[0.5, 2.0, 4.0] {
        let far: Vec<f64> = r.entries.iter().map(|e| rmt::rayleigh_tail(g, e.sigma2_hat.unwrap())).collect();
        let best = far.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        assert_eq!(grid[best], r.rho_star);
    }
}
