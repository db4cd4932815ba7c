//! Elliptical data model: population scatter, texture laws, steering vectors
//! and synthetic datasets `x_i = sqrt(tau_i) C^{1/2} w_i`.

use std::f64::consts::FRAC_1_SQRT_2;
use std::io::{Read, Write};

use nalgebra::SymmetricEigen;
use rand::distr::weighted::WeightedIndex;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, CMat, CVec, C64};
use crate::rng::{self, Purpose};

/// Recipe for a population scatter matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum CovarianceSpec {
    Identity,
    /// `[C]_{ij} = a^{|i-j|}`.
    ToeplitzAr { coefficient: f64 },
}

impl CovarianceSpec {
    pub fn build(&self, dim: usize) -> Result<CovarianceModel> {
        match *self {
            CovarianceSpec::Identity => CovarianceModel::identity(dim),
            CovarianceSpec::ToeplitzAr { coefficient } => build_toeplitz_ar(coefficient, dim),
        }
    }
}

/// Trace-normalized Hermitian positive-definite scatter `C` with its
/// eigendecomposition. The eigenvalues are the atoms of the spectral measure
/// every deterministic equivalent integrates against.
#[derive(Debug, Clone)]
pub struct CovarianceModel {
    matrix: CMat,
    eigenvalues: Vec<f64>,
    eigenvectors: CMat,
    sqrt: CMat,
}

impl CovarianceModel {
    pub fn identity(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidParameter { name: "N", reason: "dimension must be positive".into() });
        }
        Ok(Self {
            matrix: CMat::identity(dim, dim),
            eigenvalues: vec![1.0; dim],
            eigenvectors: CMat::identity(dim, dim),
            sqrt: CMat::identity(dim, dim),
        })
    }

    /// Builds a model from any Hermitian positive-definite matrix, rescaling
    /// it so that `(1/N) tr C = 1`.
    pub fn from_matrix(matrix: CMat) -> Result<Self> {
        let dim = matrix.nrows();
        if dim == 0 {
            return Err(Error::InvalidParameter { name: "N", reason: "dimension must be positive".into() });
        }
        if matrix.ncols() != dim {
            return Err(Error::DimensionMismatch { expected: dim, got: matrix.ncols() });
        }
        let scale = linalg::frobenius(&matrix).max(1.0);
        if linalg::hermitian_defect(&matrix) > 1e-12 * scale {
            return Err(Error::InvalidParameter { name: "C", reason: "matrix is not Hermitian".into() });
        }
        let mut matrix = matrix;
        linalg::hermitize(&mut matrix);
        let trace = linalg::trace_re(&matrix);
        if trace <= 0.0 {
            return Err(Error::NotPositiveDefinite);
        }
        matrix *= C64::new(dim as f64 / trace, 0.0);
        linalg::hermitize(&mut matrix);

        let eig = SymmetricEigen::new(matrix.clone());
        let mut order: Vec<usize> = (0..dim).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
        let eigenvalues: Vec<f64> = order.iter().map(|&k| eig.eigenvalues[k]).collect();
        if eigenvalues[0] <= 0.0 {
            return Err(Error::NotPositiveDefinite);
        }
        let eigenvectors = CMat::from_fn(dim, dim, |i, j| eig.eigenvectors[(i, order[j])]);
        let root = CVec::from_iterator(dim, eigenvalues.iter().map(|l| C64::new(l.sqrt(), 0.0)));
        let mut sqrt = linalg::matmul(
            &(&eigenvectors * CMat::from_diagonal(&root)),
            &eigenvectors.adjoint(),
        );
        linalg::hermitize(&mut sqrt);
        Ok(Self { matrix, eigenvalues, eigenvectors, sqrt })
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &CMat {
        &self.matrix
    }

    /// Ascending.
    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn eigenvectors(&self) -> &CMat {
        &self.eigenvectors
    }

    /// Symmetric square root `C^{1/2}`.
    pub fn sqrt(&self) -> &CMat {
        &self.sqrt
    }

    /// Weights `|u_k^* p|^2` of `p` on the eigenvectors of `C`.
    pub fn spectral_weights(&self, p: &SteeringVector) -> Vec<f64> {
        let rotated = self.eigenvectors.adjoint() * p.as_vector();
        rotated.iter().map(|z| z.norm_sqr()).collect()
    }

    /// `||U diag(lambda) U^* - C||_2`.
    pub fn recomposition_error(&self) -> f64 {
        let d = CVec::from_iterator(self.dim(), self.eigenvalues.iter().map(|&l| C64::new(l, 0.0)));
        let rebuilt = &self.eigenvectors * CMat::from_diagonal(&d) * self.eigenvectors.adjoint();
        linalg::hermitian_spectral_norm(&(rebuilt - &self.matrix))
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        write_matrix_csv(&self.matrix, out)
    }
}

/// `[C]_{ij} = a^{|i-j|}` (already unit diagonal, so trace-normalized).
pub fn build_toeplitz_ar(coefficient: f64, dim: usize) -> Result<CovarianceModel> {
    if !(coefficient > 0.0 && coefficient < 1.0) {
        return Err(Error::InvalidParameter {
            name: "coefficient",
            reason: format!("AR coefficient must lie in (0, 1), got {coefficient}"),
        });
    }
    if dim == 0 {
        return Err(Error::InvalidParameter { name: "N", reason: "dimension must be positive".into() });
    }
    let m = CMat::from_fn(dim, dim, |i, j| C64::new(coefficient.powi(i.abs_diff(j) as i32), 0.0));
    CovarianceModel::from_matrix(m)
}

/// Law of the texture `tau_i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "law", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TextureModel {
    /// `tau_i = 1`.
    #[default]
    Unit,
    /// `tau = 1/g`, `g ~ Gamma(shape, scale = 1/shape)`; heavy tailed for small shape.
    InverseGamma { shape: f64 },
    Discrete { values: Vec<f64>, weights: Vec<f64> },
}

impl TextureModel {
    pub fn validate(&self) -> Result<()> {
        match self {
            TextureModel::Unit => Ok(()),
            TextureModel::InverseGamma { shape } => {
                if shape.is_finite() && *shape > 0.0 {
                    Ok(())
                } else {
                    Err(Error::InvalidParameter { name: "shape", reason: format!("must be positive, got {shape}") })
                }
            }
            TextureModel::Discrete { values, weights } => {
                if values.is_empty() || values.len() != weights.len() {
                    return Err(Error::InvalidParameter {
                        name: "values",
                        reason: "values and weights must be non-empty and of equal length".into(),
                    });
                }
                if values.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
                    return Err(Error::InvalidParameter { name: "values", reason: "textures must be positive".into() });
                }
                WeightedIndex::new(weights).map_err(|e| Error::InvalidParameter {
                    name: "weights",
                    reason: e.to_string(),
                })?;
                Ok(())
            }
        }
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            TextureModel::Unit => 1.0,
            TextureModel::InverseGamma { shape } => {
                let g = Gamma::new(*shape, 1.0 / shape).expect("validated shape");
                loop {
                    let v: f64 = g.sample(rng);
                    if v > 0.0 {
                        break 1.0 / v;
                    }
                }
            }
            TextureModel::Discrete { values, weights } => {
                let idx = WeightedIndex::new(weights).expect("validated weights");
                values[idx.sample(rng)]
            }
        }
    }
}

/// Unit-norm steering vector `p`.
#[derive(Debug, Clone, PartialEq)]
pub struct SteeringVector(CVec);

impl SteeringVector {
    /// Normalizes `v`; rejects the zero vector.
    pub fn new(v: CVec) -> Result<Self> {
        let norm = v.norm();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::InvalidParameter { name: "p", reason: "steering vector must be nonzero".into() });
        }
        Ok(Self(v.unscale(norm)))
    }

    pub fn as_vector(&self) -> &CVec {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

/// `p = N^{-1/2} [1, ..., 1]^T`.
pub fn uniform_steering(dim: usize) -> Result<SteeringVector> {
    if dim == 0 {
        return Err(Error::InvalidParameter { name: "N", reason: "dimension must be positive".into() });
    }
    let v = 1.0 / (dim as f64).sqrt();
    Ok(SteeringVector(CVec::from_element(dim, C64::new(v, 0.0))))
}

/// Recipe for a steering vector.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum SteeringSpec {
    /// `N^{-1/2} [1, ..., 1]^T`.
    #[default]
    Uniform,
    /// The `index`-th canonical basis vector.
    Basis { index: usize },
}

impl SteeringSpec {
    pub fn build(&self, dim: usize) -> Result<SteeringVector> {
        match *self {
            SteeringSpec::Uniform => uniform_steering(dim),
            SteeringSpec::Basis { index } => {
                if index >= dim {
                    return Err(Error::InvalidParameter {
                        name: "index",
                        reason: format!("basis index {index} out of range for N = {dim}"),
                    });
                }
                let mut v = CVec::zeros(dim);
                v[index] = C64::new(1.0, 0.0);
                SteeringVector::new(v)
            }
        }
    }
}

/// Simulation ground truth: the Gaussian parts `z_i = C^{1/2} w_i` and the textures.
#[derive(Debug, Clone, PartialEq)]
pub struct Truth {
    pub z: CMat,
    pub tau: Vec<f64>,
}

/// `n` observations in `C^N`, stored as the columns of an `N x n` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    samples: CMat,
    truth: Option<Truth>,
}

impl Dataset {
    pub fn new(samples: CMat) -> Result<Self> {
        if samples.nrows() == 0 || samples.ncols() == 0 {
            return Err(Error::InvalidParameter { name: "n", reason: "dataset must hold at least one sample".into() });
        }
        Ok(Self { samples, truth: None })
    }

    pub fn with_truth(samples: CMat, truth: Truth) -> Result<Self> {
        let mut ds = Self::new(samples)?;
        if truth.z.shape() != ds.samples.shape() {
            return Err(Error::DimensionMismatch { expected: ds.samples.ncols(), got: truth.z.ncols() });
        }
        if truth.tau.len() != ds.samples.ncols() {
            return Err(Error::DimensionMismatch { expected: ds.samples.ncols(), got: truth.tau.len() });
        }
        ds.truth = Some(truth);
        Ok(ds)
    }

    pub fn dim(&self) -> usize {
        self.samples.nrows()
    }

    pub fn len(&self) -> usize {
        self.samples.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.ncols() == 0
    }

    /// `c_N = N / n`.
    pub fn ratio(&self) -> f64 {
        self.dim() as f64 / self.len() as f64
    }

    pub fn samples(&self) -> &CMat {
        &self.samples
    }

    pub fn truth(&self) -> Option<&Truth> {
        self.truth.as_ref()
    }

    /// Multiplies sample `i` by `scales[i]` (truth textures follow as `tau_i * s_i^2`).
    pub fn rescaled(&self, scales: &[f64]) -> Result<Self> {
        if scales.len() != self.len() {
            return Err(Error::DimensionMismatch { expected: self.len(), got: scales.len() });
        }
        let mut samples = self.samples.clone();
        for (mut col, &s) in samples.column_iter_mut().zip(scales) {
            col *= C64::new(s, 0.0);
        }
        let truth = self.truth.as_ref().map(|t| Truth {
            z: t.z.clone(),
            tau: t.tau.iter().zip(scales).map(|(tau, s)| tau * s * s).collect(),
        });
        Ok(Self { samples, truth })
    }

    /// Worst element-wise gap between `x_i` and `sqrt(tau_i) z_i`, if truth is present.
    pub fn reconstruction_error(&self) -> Option<f64> {
        let t = self.truth.as_ref()?;
        let mut worst = 0.0_f64;
        for (i, tau) in t.tau.iter().enumerate() {
            let s = tau.sqrt();
            for k in 0..self.dim() {
                worst = worst.max((self.samples[(k, i)] - t.z[(k, i)] * s).norm());
            }
        }
        Some(worst)
    }

    /// One row per observation: `x0_re,x0_im,...`, followed by `tau,z0_re,z0_im,...`
    /// when ground truth is present.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let dim = self.dim();
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<String> = complex_header("x", dim);
        if self.truth.is_some() {
            header.push("tau".into());
            header.extend(complex_header("z", dim));
        }
        w.write_record(&header)?;
        for i in 0..self.len() {
            let mut row: Vec<String> = Vec::with_capacity(header.len());
            push_complex(&mut row, self.samples.column(i).iter());
            if let Some(t) = &self.truth {
                row.push(fmt_f64(t.tau[i]));
                push_complex(&mut row, t.z.column(i).iter());
            }
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(input);
        let header = r.headers()?.clone();
        let x_cols = header.iter().filter(|h| h.starts_with('x')).count();
        if x_cols == 0 || x_cols % 2 != 0 {
            return Err(Error::Parse("dataset header must hold x<k>_re,x<k>_im pairs".into()));
        }
        let dim = x_cols / 2;
        let has_truth = header.iter().any(|h| h == "tau");
        let expected = if has_truth { 2 * x_cols + 1 } else { x_cols };
        if header.len() != expected {
            return Err(Error::Parse(format!("expected {expected} columns, found {}", header.len())));
        }
        let mut xs: Vec<C64> = Vec::new();
        let mut zs: Vec<C64> = Vec::new();
        let mut taus: Vec<f64> = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let vals: Vec<f64> = rec.iter().map(parse_f64).collect::<Result<_>>()?;
            xs.extend(vals[..x_cols].chunks(2).map(|c| C64::new(c[0], c[1])));
            if has_truth {
                taus.push(vals[x_cols]);
                zs.extend(vals[x_cols + 1..].chunks(2).map(|c| C64::new(c[0], c[1])));
            }
        }
        let n = xs.len() / dim;
        let samples = CMat::from_vec(dim, n, xs);
        if has_truth {
            Dataset::with_truth(samples, Truth { z: CMat::from_vec(dim, n, zs), tau: taus })
        } else {
            Dataset::new(samples)
        }
    }
}

/// Draws `n` observations from `model` with textures from `texture`.
pub fn sample_dataset(model: &CovarianceModel, n: usize, texture: &TextureModel, seed: u64) -> Result<Dataset> {
    let mut rng = rng::stream(seed, Purpose::Dataset, 0, 0);
    sample_dataset_with(model, n, texture, &mut rng)
}

/// As [`sample_dataset`] but drawing from a caller-supplied stream.
pub fn sample_dataset_with<R: Rng + ?Sized>(
    model: &CovarianceModel,
    n: usize,
    texture: &TextureModel,
    rng: &mut R,
) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::InvalidParameter { name: "n", reason: "need at least one sample".into() });
    }
    texture.validate()?;
    let dim = model.dim();
    let w = standard_complex_gaussian(dim, n, rng);
    let z = linalg::matmul(model.sqrt(), &w);
    let tau: Vec<f64> = (0..n).map(|_| texture.draw(rng)).collect();
    let mut x = z.clone();
    for (mut col, t) in x.column_iter_mut().zip(&tau) {
        col *= C64::new(t.sqrt(), 0.0);
    }
    Dataset::with_truth(x, Truth { z, tau })
}

/// `rows x cols` matrix of i.i.d. circular `CN(0, 1)` entries.
pub fn standard_complex_gaussian<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> CMat {
    CMat::from_fn(rows, cols, |_, _| {
        let re: f64 = rng.sample(StandardNormal);
        let im: f64 = rng.sample(StandardNormal);
        C64::new(re * FRAC_1_SQRT_2, im * FRAC_1_SQRT_2)
    })
}

pub(crate) fn complex_header(prefix: &str, count: usize) -> Vec<String> {
    (0..count)
        .flat_map(|k| [format!("{prefix}{k}_re"), format!("{prefix}{k}_im")])
        .collect()
}

fn push_complex<'a>(row: &mut Vec<String>, vals: impl Iterator<Item = &'a C64>) {
    for z in vals {
        row.push(fmt_f64(z.re));
        row.push(fmt_f64(z.im));
    }
}

/// Shortest round-trip representation.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

pub fn parse_f64(s: &str) -> Result<f64> {
    s.trim().parse::<f64>().map_err(|_| Error::Parse(format!("not a number: {s:?}")))
}

/// One CSV row per matrix row, complex entries as adjacent `re,im` columns.
pub fn write_matrix_csv<W: Write>(m: &CMat, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(complex_header("c", m.ncols()))?;
    for i in 0..m.nrows() {
        let mut row = Vec::with_capacity(2 * m.ncols());
        push_complex(&mut row, m.row(i).iter());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_matrix_csv<R: Read>(input: R) -> Result<CMat> {
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(input);
    let cols = r.headers()?.len();
    if cols == 0 || cols % 2 != 0 {
        return Err(Error::Parse("matrix header must hold re/im pairs".into()));
    }
    let mut rows: Vec<Vec<C64>> = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let vals: Vec<f64> = rec.iter().map(parse_f64).collect::<Result<_>>()?;
        rows.push(vals.chunks(2).map(|c| C64::new(c[0], c[1])).collect());
    }
    let ncols = cols / 2;
    Ok(CMat::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}
