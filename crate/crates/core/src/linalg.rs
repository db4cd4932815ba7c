//! Dense complex linear algebra shared by the estimators and the detector.
//!
//! Matrices are `nalgebra` column-major `DMatrix<Complex<f64>>`. The two hot
//! kernels of the fixed-point iteration (triangular whitening of the sample
//! block and the weighted Gram product) go through `matrixmultiply::zgemm`,
//! which is several times faster than the generic complex loops on a single
//! core.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex;

use crate::error::{Error, Result};

pub type C64 = Complex<f64>;
pub type CMat = DMatrix<C64>;
pub type CVec = DVector<C64>;

/// `a * b` for column-major complex matrices.
pub fn matmul(a: &CMat, b: &CMat) -> CMat {
    assert_eq!(a.ncols(), b.nrows(), "matmul: inner dimensions differ");
    let (m, k, n) = (a.nrows(), a.ncols(), b.ncols());
    let mut out = CMat::zeros(m, n);
    if m == 0 || n == 0 || k == 0 {
        return out;
    }
    // SAFETY: `Complex<f64>` is `repr(C)` with layout `[f64; 2]`, the three
    // buffers are contiguous column-major and sized m*k, k*n and m*n, and the
    // output does not alias either input.
    unsafe {
        matrixmultiply::zgemm(
            matrixmultiply::CGemmOption::Standard,
            matrixmultiply::CGemmOption::Standard,
            m,
            k,
            n,
            [1.0, 0.0],
            a.as_ptr() as *const [f64; 2],
            1,
            m as isize,
            b.as_ptr() as *const [f64; 2],
            1,
            k as isize,
            [0.0, 0.0],
            out.as_mut_ptr() as *mut [f64; 2],
            1,
            m as isize,
        );
    }
    out
}

/// `a * conj(b)^T` given `b_conj = conj(b)` (stored `n x k`, same shape as `b`).
///
/// `zgemm` ignores its conjugation flags, so callers keep a conjugated copy
/// of the right operand and this routine only transposes it through strides.
pub fn matmul_adjoint_conj(a: &CMat, b_conj: &CMat) -> CMat {
    assert_eq!(a.ncols(), b_conj.ncols(), "matmul_adjoint: inner dimensions differ");
    let (m, k, n) = (a.nrows(), a.ncols(), b_conj.nrows());
    let mut out = CMat::zeros(m, n);
    if m == 0 || n == 0 || k == 0 {
        return out;
    }
    // SAFETY: see `matmul`; the right operand is read as its transpose
    // (row stride = its column stride, column stride = 1).
    unsafe {
        matrixmultiply::zgemm(
            matrixmultiply::CGemmOption::Standard,
            matrixmultiply::CGemmOption::Standard,
            m,
            k,
            n,
            [1.0, 0.0],
            a.as_ptr() as *const [f64; 2],
            1,
            m as isize,
            b_conj.as_ptr() as *const [f64; 2],
            n as isize,
            1,
            [0.0, 0.0],
            out.as_mut_ptr() as *mut [f64; 2],
            1,
            m as isize,
        );
    }
    out
}

/// Replace `m` by `(m + m^*) / 2`.
pub fn hermitize(m: &mut CMat) {
    let n = m.nrows();
    for j in 0..n {
        m[(j, j)].im = 0.0;
        for i in (j + 1)..n {
            let v = (m[(i, j)] + m[(j, i)].conj()) * 0.5;
            m[(i, j)] = v;
            m[(j, i)] = v.conj();
        }
    }
}

pub fn frobenius(m: &CMat) -> f64 {
    m.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

pub fn trace_re(m: &CMat) -> f64 {
    (0..m.nrows()).map(|i| m[(i, i)].re).sum()
}

/// Largest deviation from Hermitian symmetry, `max |m_ij - conj(m_ji)|`.
pub fn hermitian_defect(m: &CMat) -> f64 {
    let n = m.nrows();
    let mut worst = 0.0_f64;
    for j in 0..n {
        for i in j..n {
            worst = worst.max((m[(i, j)] - m[(j, i)].conj()).norm());
        }
    }
    worst
}

/// Eigenvalues of a Hermitian matrix, ascending.
pub fn hermitian_eigenvalues(m: &CMat) -> Vec<f64> {
    let mut vals: Vec<f64> = m.clone().symmetric_eigenvalues().iter().copied().collect();
    vals.sort_by(f64::total_cmp);
    vals
}

/// Spectral norm of a Hermitian matrix (largest absolute eigenvalue).
pub fn hermitian_spectral_norm(m: &CMat) -> f64 {
    let mut h = m.clone();
    hermitize(&mut h);
    hermitian_eigenvalues(&h)
        .into_iter()
        .fold(0.0, |acc, v| acc.max(v.abs()))
}

pub fn dot(a: &CVec, b: &CVec) -> C64 {
    a.iter().zip(b.iter()).map(|(x, y)| x.conj() * y).sum()
}

pub fn norm_sqr(v: &CVec) -> f64 {
    v.iter().map(|z| z.norm_sqr()).sum()
}

/// Cholesky factor `L` of a Hermitian positive-definite matrix, with the
/// solves needed by the estimator and the detector.
#[derive(Debug, Clone)]
pub struct Factor {
    lower: CMat,
}

impl Factor {
    pub fn new(m: &CMat) -> Result<Self> {
        let n = m.nrows();
        if m.ncols() != n {
            return Err(Error::DimensionMismatch { expected: n, got: m.ncols() });
        }
        // Right-looking factorization on the lower triangle; every update runs
        // down a contiguous column.
        let mut a = m.clone();
        let buf = a.as_mut_slice();
        for k in 0..n {
            let pivot = buf[k * n + k].re;
            if !(pivot > 0.0) || !pivot.is_finite() {
                return Err(Error::NotPositiveDefinite);
            }
            let root = pivot.sqrt();
            buf[k * n + k] = C64::new(root, 0.0);
            for v in &mut buf[k * n + k + 1..(k + 1) * n] {
                *v /= root;
            }
            for j in (k + 1)..n {
                let (head, tail) = buf.split_at_mut(j * n);
                let colk = &head[k * n..(k + 1) * n];
                let factor = colk[j].conj();
                for (dst, src) in tail[j..n].iter_mut().zip(&colk[j..n]) {
                    *dst -= src * factor;
                }
            }
        }
        for j in 0..n {
            for i in 0..j {
                a[(i, j)] = C64::new(0.0, 0.0);
            }
        }
        Ok(Self { lower: a })
    }

    pub fn dim(&self) -> usize {
        self.lower.nrows()
    }

    pub fn lower(&self) -> &CMat {
        &self.lower
    }

    /// `L^{-1} b`.
    pub fn whiten(&self, b: &CVec) -> CVec {
        let mut out = b.clone();
        let ok = self.lower.solve_lower_triangular_mut(&mut out);
        debug_assert!(ok);
        out
    }

    /// `M^{-1} b` with `M = L L^*`.
    pub fn solve(&self, b: &CVec) -> CVec {
        let mut out = self.whiten(b);
        let ok = self.lower.ad_solve_lower_triangular_mut(&mut out);
        debug_assert!(ok);
        out
    }

    /// Explicit `L^{-1}`, used to whiten whole sample blocks with one GEMM.
    pub fn lower_inverse(&self) -> CMat {
        let n = self.dim();
        let mut inv = CMat::zeros(n, n);
        // Forward substitution on each unit vector; column j of L^{-1} is zero
        // above row j and the updates run down contiguous columns of L.
        for j in 0..n {
            let col = &mut inv.as_mut_slice()[j * n..(j + 1) * n];
            col[j] = C64::new(1.0, 0.0);
            for k in j..n {
                let xk = col[k] / self.lower[(k, k)];
                col[k] = xk;
                let lcol = &self.lower.as_slice()[k * n + k + 1..(k + 1) * n];
                for (dst, l) in col[k + 1..].iter_mut().zip(lcol) {
                    *dst -= xk * l;
                }
            }
        }
        inv
    }

    /// Explicit `M^{-1} = L^{-*} L^{-1}`.
    pub fn inverse(&self) -> CMat {
        let li = self.lower_inverse();
        let li_conj = li.map(|z| z.conj());
        // (L^{-1})^* L^{-1}; build the adjoint explicitly and reuse matmul.
        let li_adj = li_conj.transpose();
        let mut out = matmul(&li_adj, &li);
        hermitize(&mut out);
        out
    }

    /// `tr(M^{-1}) = ||L^{-1}||_F^2`.
    pub fn inverse_trace(&self) -> f64 {
        let li = self.lower_inverse();
        li.iter().map(|z| z.norm_sqr()).sum()
    }
}
