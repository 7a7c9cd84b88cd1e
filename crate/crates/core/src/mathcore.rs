//! Dense linear algebra, Gaussian densities and log-domain accumulation.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use std::f64::consts::PI;
use thiserror::Error;

/// log(2π)
pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Relative pivot floor below which a Cholesky factorization is rejected.
const PIVOT_REL_TOL: f64 = 1e-14;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MathError {
    #[error("matrix is not positive definite")]
    NotPositiveDefinite,
    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("invalid mixture weights: {0}")]
    InvalidWeights(String),
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
}

pub type Result<T> = std::result::Result<T, MathError>;

/// Cholesky factor of a symmetric positive definite matrix.
///
/// Fails with [`MathError::NotPositiveDefinite`] when a pivot is non-positive
/// or negligible relative to its diagonal entry. No jitter is added.
pub fn chol(c: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = c.nrows();
    if c.ncols() != n {
        return Err(MathError::DimensionMismatch { expected: n, found: c.ncols() });
    }
    let mut l = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let mut diag = c[(j, j)];
        for k in 0..j {
            diag -= l[(j, k)] * l[(j, k)];
        }
        if !(diag > PIVOT_REL_TOL * c[(j, j)].abs()) || !diag.is_finite() {
            return Err(MathError::NotPositiveDefinite);
        }
        let ljj = diag.sqrt();
        l[(j, j)] = ljj;
        for i in (j + 1)..n {
            let mut s = c[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / ljj;
        }
    }
    Ok(l)
}

/// Solves `L z = b` in place for lower-triangular `L`.
pub fn forward_substitute(l: &DMatrix<f64>, b: &mut [f64]) {
    let n = l.nrows();
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[(i, k)] * b[k];
        }
        b[i] = s / l[(i, i)];
    }
}

/// Solves `Lᵀ z = b` in place for lower-triangular `L`.
pub fn backward_substitute_transpose(l: &DMatrix<f64>, b: &mut [f64]) {
    let n = l.nrows();
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in (i + 1)..n {
            s -= l[(k, i)] * b[k];
        }
        b[i] = s / l[(i, i)];
    }
}

/// Symmetric positive definite matrix with a cached Cholesky factor.
#[derive(Debug, Clone, PartialEq)]
pub struct SpdMatrix {
    entries: DMatrix<f64>,
    chol: DMatrix<f64>,
    log_det: f64,
}

impl SpdMatrix {
    /// Validates symmetry (relative 1e-12) and factorizes.
    pub fn new(entries: DMatrix<f64>) -> Result<Self> {
        let n = entries.nrows();
        if entries.ncols() != n {
            return Err(MathError::DimensionMismatch { expected: n, found: entries.ncols() });
        }
        let scale = entries.amax().max(f64::MIN_POSITIVE);
        let mut asym = 0.0f64;
        for i in 0..n {
            for j in 0..i {
                asym = asym.max((entries[(i, j)] - entries[(j, i)]).abs());
            }
        }
        if asym > 1e-12 * scale {
            return Err(MathError::NotSymmetric(asym / scale));
        }
        let chol = chol(&entries)?;
        let log_det = 2.0 * chol.diagonal().iter().map(|v| v.ln()).sum::<f64>();
        Ok(Self { entries, chol, log_det })
    }

    /// Symmetrizes `(M + Mᵀ)/2` before validating.
    pub fn from_symmetrized(m: DMatrix<f64>) -> Result<Self> {
        let s = (&m + m.transpose()) * 0.5;
        Self::new(s)
    }

    pub fn identity(d: usize) -> Self {
        Self::scaled_identity(d, 1.0)
    }

    /// `s·I` for `s > 0`.
    pub fn scaled_identity(d: usize, s: f64) -> Self {
        assert!(s > 0.0, "scale must be positive");
        Self {
            entries: DMatrix::identity(d, d) * s,
            chol: DMatrix::identity(d, d) * s.sqrt(),
            log_det: d as f64 * s.ln(),
        }
    }

    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    /// Lower Cholesky factor `L` with `L Lᵀ = C`.
    pub fn chol(&self) -> &DMatrix<f64> {
        &self.chol
    }

    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    /// `L⁻¹ v`.
    pub fn whiten(&self, v: &DVector<f64>) -> DVector<f64> {
        let mut out = v.clone();
        forward_substitute(&self.chol, out.as_mut_slice());
        out
    }

    /// `C⁻¹ v`.
    pub fn solve_vec(&self, v: &DVector<f64>) -> DVector<f64> {
        let mut out = v.clone();
        forward_substitute(&self.chol, out.as_mut_slice());
        backward_substitute_transpose(&self.chol, out.as_mut_slice());
        out
    }

    /// `C⁻¹ B` column by column.
    pub fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = b.clone();
        for mut col in out.column_iter_mut() {
            let s = col.as_mut_slice();
            forward_substitute(&self.chol, s);
            backward_substitute_transpose(&self.chol, s);
        }
        out
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        self.solve(&DMatrix::identity(self.dim(), self.dim()))
    }

    /// Ratio of the largest to smallest squared Cholesky pivot, a cheap
    /// lower estimate of the 2-norm condition number.
    pub fn condition_estimate(&self) -> f64 {
        let d = self.chol.diagonal();
        let max = d.max();
        let min = d.min();
        (max / min).powi(2)
    }
}

/// Squared Mahalanobis distance `(x−m)ᵀ C⁻¹ (x−m)`.
pub fn mahalanobis_sq(x: &DVector<f64>, mean: &DVector<f64>, cov: &SpdMatrix) -> f64 {
    let mut z: Vec<f64> = x.iter().zip(mean.iter()).map(|(a, b)| a - b).collect();
    forward_substitute(cov.chol(), &mut z);
    z.iter().map(|v| v * v).sum()
}

/// Gaussian distribution `N(mean, cov)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianComponent {
    pub mean: DVector<f64>,
    pub cov: SpdMatrix,
}

impl GaussianComponent {
    pub fn new(mean: DVector<f64>, cov: SpdMatrix) -> Result<Self> {
        if mean.len() != cov.dim() {
            return Err(MathError::DimensionMismatch { expected: cov.dim(), found: mean.len() });
        }
        Ok(Self { mean, cov })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Log density of a Gaussian component at `x`.
pub fn log_gaussian_density(x: &DVector<f64>, comp: &GaussianComponent) -> f64 {
    let d = comp.dim() as f64;
    -0.5 * (mahalanobis_sq(x, &comp.mean, &comp.cov) + comp.cov.log_det() + d * LN_2PI)
}

#[derive(Debug, Clone, PartialEq)]
enum MixtureCovariance {
    /// One covariance for every component; means are stored whitened.
    Shared { cov: SpdMatrix, whitened_means: Vec<f64> },
    PerComponent(Vec<SpdMatrix>),
}

/// Finite Gaussian mixture with arbitrary weights, stored in log domain.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture {
    log_weights: Vec<f64>,
    means: Vec<DVector<f64>>,
    covariance: MixtureCovariance,
}

fn check_log_weights(log_weights: &[f64], k: usize) -> Result<()> {
    if log_weights.len() != k {
        return Err(MathError::DimensionMismatch { expected: k, found: log_weights.len() });
    }
    if k == 0 {
        return Err(MathError::InvalidWeights("empty mixture".into()));
    }
    if log_weights.iter().any(|w| w.is_nan() || *w == f64::INFINITY) {
        return Err(MathError::InvalidWeights("non-finite log weight".into()));
    }
    let total = log_sum_exp(log_weights);
    if !(total.abs() <= 1e-10) {
        return Err(MathError::InvalidWeights(format!("log-sum-exp of weights is {total}")));
    }
    Ok(())
}

impl GaussianMixture {
    /// Equally weighted mixture of `N(m_k, cov)`.
    pub fn equal_weights_shared(means: Vec<DVector<f64>>, cov: SpdMatrix) -> Result<Self> {
        let k = means.len();
        let lw = vec![-(k as f64).ln(); k];
        Self::shared(lw, means, cov)
    }

    /// Mixture of `N(m_k, cov)` with normalized log weights.
    pub fn shared(log_weights: Vec<f64>, means: Vec<DVector<f64>>, cov: SpdMatrix) -> Result<Self> {
        check_log_weights(&log_weights, means.len())?;
        let d = cov.dim();
        let mut whitened = Vec::with_capacity(means.len() * d);
        for m in &means {
            if m.len() != d {
                return Err(MathError::DimensionMismatch { expected: d, found: m.len() });
            }
            whitened.extend_from_slice(cov.whiten(m).as_slice());
        }
        Ok(Self {
            log_weights,
            means,
            covariance: MixtureCovariance::Shared { cov, whitened_means: whitened },
        })
    }

    /// Mixture with one covariance per component.
    pub fn general(log_weights: Vec<f64>, components: Vec<GaussianComponent>) -> Result<Self> {
        check_log_weights(&log_weights, components.len())?;
        let d = components[0].dim();
        if let Some(c) = components.iter().find(|c| c.dim() != d) {
            return Err(MathError::DimensionMismatch { expected: d, found: c.dim() });
        }
        let (means, covs) = components.into_iter().map(|c| (c.mean, c.cov)).unzip();
        Ok(Self { log_weights, means, covariance: MixtureCovariance::PerComponent(covs) })
    }

    /// Builds from nonnegative weights summing to one within 1e-12.
    pub fn from_weights_shared(weights: &[f64], means: Vec<DVector<f64>>, cov: SpdMatrix) -> Result<Self> {
        if weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(MathError::InvalidWeights("negative weight".into()));
        }
        let s: f64 = weights.iter().sum();
        if (s - 1.0).abs() > 1e-12 {
            return Err(MathError::InvalidWeights(format!("weights sum to {s}")));
        }
        let lw: Vec<f64> = weights.iter().map(|w| (w / s).ln()).collect();
        Self::shared(lw, means, cov)
    }

    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn log_weights(&self) -> &[f64] {
        &self.log_weights
    }

    pub fn weights(&self) -> Vec<f64> {
        self.log_weights.iter().map(|w| w.exp()).collect()
    }

    pub fn means(&self) -> &[DVector<f64>] {
        &self.means
    }

    /// The shared covariance, if the mixture has one.
    pub fn shared_cov(&self) -> Option<&SpdMatrix> {
        match &self.covariance {
            MixtureCovariance::Shared { cov, .. } => Some(cov),
            MixtureCovariance::PerComponent(_) => None,
        }
    }

    pub fn component_cov(&self, k: usize) -> &SpdMatrix {
        match &self.covariance {
            MixtureCovariance::Shared { cov, .. } => cov,
            MixtureCovariance::PerComponent(c) => &c[k],
        }
    }

    pub fn component(&self, k: usize) -> GaussianComponent {
        GaussianComponent { mean: self.means[k].clone(), cov: self.component_cov(k).clone() }
    }

    /// Log density of component `k` alone (without its weight).
    pub fn log_component_density(&self, k: usize, x: &DVector<f64>) -> f64 {
        let cov = self.component_cov(k);
        let d = self.dim() as f64;
        -0.5 * (mahalanobis_sq(x, &self.means[k], cov) + cov.log_det() + d * LN_2PI)
    }

    /// Mean `Σ w_k m_k`.
    pub fn mean(&self) -> DVector<f64> {
        let mut m = DVector::zeros(self.dim());
        for (lw, mu) in self.log_weights.iter().zip(&self.means) {
            m.axpy(lw.exp(), mu, 1.0);
        }
        m
    }
}

/// Log density of a mixture at `x`.
pub fn log_mixture_density(x: &DVector<f64>, mix: &GaussianMixture) -> f64 {
    let d = mix.dim();
    match &mix.covariance {
        MixtureCovariance::Shared { cov, whitened_means } => {
            let mut z: Vec<f64> = x.iter().copied().collect();
            forward_substitute(cov.chol(), &mut z);
            let terms: Vec<f64> = mix
                .log_weights
                .iter()
                .zip(whitened_means.chunks_exact(d))
                .map(|(lw, mu)| {
                    let q: f64 = z.iter().zip(mu).map(|(a, b)| (a - b) * (a - b)).sum();
                    lw - 0.5 * q
                })
                .collect();
            log_sum_exp(&terms) - 0.5 * (cov.log_det() + d as f64 * LN_2PI)
        }
        MixtureCovariance::PerComponent(_) => {
            let terms: Vec<f64> = (0..mix.len())
                .map(|k| mix.log_weights[k] + mix.log_component_density(k, x))
                .collect();
            log_sum_exp(&terms)
        }
    }
}

/// `log Σ exp(v_i)` with max shift. Empty input gives `−∞`.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if values.iter().any(|v| v.is_nan()) {
        return f64::NAN;
    }
    if max.is_infinite() {
        return max;
    }
    let s: f64 = values.iter().map(|v| (v - max).exp()).sum();
    max + s.ln()
}

/// Sample mean of a non-empty list of vectors.
pub fn sample_mean(xs: &[DVector<f64>]) -> DVector<f64> {
    let mut m = DVector::zeros(xs[0].len());
    for x in xs {
        m += x;
    }
    m / xs.len() as f64
}

/// Empirical cross-covariance `(N−1)⁻¹ Σ (x_i − x̄)(y_i − ȳ)ᵀ`.
pub fn empirical_cov(xs: &[DVector<f64>], ys: &[DVector<f64>]) -> Result<DMatrix<f64>> {
    if xs.len() != ys.len() {
        return Err(MathError::DimensionMismatch { expected: xs.len(), found: ys.len() });
    }
    let n = xs.len();
    if n < 2 {
        return Err(MathError::TooFewSamples { needed: 2, got: n });
    }
    let xm = sample_mean(xs);
    let ym = sample_mean(ys);
    let mut c = DMatrix::zeros(xm.len(), ym.len());
    for (x, y) in xs.iter().zip(ys) {
        let dx = x - &xm;
        let dy = y - &ym;
        c.ger(1.0, &dx, &dy, 1.0);
    }
    Ok(c / (n as f64 - 1.0))
}

/// Weighted covariance `Σ w_i (x_i − x̄_w)(x_i − x̄_w)ᵀ / (1 − Σ w_i²)`.
///
/// Reduces to [`empirical_cov`] for uniform weights.
pub fn weighted_empirical_cov(xs: &[DVector<f64>], weights: &[f64]) -> Result<DMatrix<f64>> {
    if xs.len() != weights.len() {
        return Err(MathError::DimensionMismatch { expected: xs.len(), found: weights.len() });
    }
    if xs.len() < 2 {
        return Err(MathError::TooFewSamples { needed: 2, got: xs.len() });
    }
    let d = xs[0].len();
    let mut mean = DVector::zeros(d);
    for (x, w) in xs.iter().zip(weights) {
        mean.axpy(*w, x, 1.0);
    }
    let mut c = DMatrix::zeros(d, d);
    for (x, w) in xs.iter().zip(weights) {
        let dx = x - &mean;
        c.ger(*w, &dx, &dx, 1.0);
    }
    let w2: f64 = weights.iter().map(|w| w * w).sum();
    let denom = 1.0 - w2;
    if !(denom > 0.0) {
        return Ok(DMatrix::zeros(d, d));
    }
    Ok(c / denom)
}

/// `n` independent standard normals by the Box–Muller transform.
pub fn standard_normals<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n + 1);
    while out.len() < n {
        let u1: f64 = 1.0 - rng.random::<f64>();
        let u2: f64 = rng.random::<f64>();
        let r = (-2.0 * u1.ln()).sqrt();
        let (s, c) = (2.0 * PI * u2).sin_cos();
        out.push(r * c);
        out.push(r * s);
    }
    out.truncate(n);
    out
}

/// One draw of `N(0, C)` as `L z`.
pub fn gaussian_noise<R: Rng + ?Sized>(rng: &mut R, cov: &SpdMatrix) -> DVector<f64> {
    let z = DVector::from_vec(standard_normals(rng, cov.dim()));
    cov.chol() * z
}

/// One draw of `N(mean, C)`.
pub fn sample_gaussian<R: Rng + ?Sized>(rng: &mut R, mean: &DVector<f64>, cov: &SpdMatrix) -> DVector<f64> {
    mean + gaussian_noise(rng, cov)
}
