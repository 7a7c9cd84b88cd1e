//! Exact checks of the estimator theory: discrete importance-sampling
//! variances in rational arithmetic, Kalman/EnKF matrix identities, the
//! closed-form filtering component and the weight bounds built on it.

use crate::mathcore::{empirical_cov, GaussianComponent, MathError, SpdMatrix};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};
use rand::Rng;
use std::fmt;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TheoryError {
    #[error("target mixture puts mass on state {state} where proposal {component} has none")]
    AbsoluteContinuityViolated { component: usize, state: usize },
    #[error("(B − A) v differs from b − a by {0:e}")]
    IncompatibleInput(f64),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("invalid instance: {0}")]
    InvalidInstance(String),
    #[error(transparent)]
    Math(#[from] MathError),
}

pub type Result<T> = std::result::Result<T, TheoryError>;

fn rat(n: i64, d: i64) -> BigRational {
    BigRational::new(BigInt::from(n), BigInt::from(d))
}

/// Targets `p_i`, proposals `q_i` and an integrand `g` on `{0, …, S−1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteISInstance {
    p: Vec<Vec<BigRational>>,
    q: Vec<Vec<BigRational>>,
    g: Vec<BigRational>,
}

impl DiscreteISInstance {
    /// Exact probability vectors; each must be nonnegative and sum to one,
    /// and `p_mix ≪ q_i` for every `i`.
    pub fn new(p: Vec<Vec<BigRational>>, q: Vec<Vec<BigRational>>, g: Vec<BigRational>) -> Result<Self> {
        let s = g.len();
        if s == 0 || p.is_empty() {
            return Err(TheoryError::InvalidInstance("empty space or no components".into()));
        }
        if p.len() != q.len() {
            return Err(TheoryError::DimensionMismatch { expected: p.len(), found: q.len() });
        }
        for v in p.iter().chain(&q) {
            if v.len() != s {
                return Err(TheoryError::DimensionMismatch { expected: s, found: v.len() });
            }
            if v.iter().any(|x| x.is_negative()) {
                return Err(TheoryError::InvalidInstance("negative probability".into()));
            }
            if v.iter().cloned().sum::<BigRational>() != BigRational::one() {
                return Err(TheoryError::InvalidInstance("probability vector does not sum to one".into()));
            }
        }
        let inst = Self { p, q, g };
        let pmix = inst.p_mix();
        for (i, qi) in inst.q.iter().enumerate() {
            for x in 0..s {
                if !pmix[x].is_zero() && qi[x].is_zero() {
                    return Err(TheoryError::AbsoluteContinuityViolated { component: i, state: x });
                }
            }
        }
        Ok(inst)
    }

    /// Converts floats exactly (every `f64` is a dyadic rational) and
    /// rescales each vector to sum to one; vectors must already sum to one
    /// within `1e-14`.
    pub fn from_f64(p: &[Vec<f64>], q: &[Vec<f64>], g: &[f64]) -> Result<Self> {
        let conv = |x: f64| {
            BigRational::from_float(x).ok_or_else(|| TheoryError::InvalidInstance(format!("non-finite value {x}")))
        };
        let prob = |v: &Vec<f64>| -> Result<Vec<BigRational>> {
            let total: f64 = v.iter().sum();
            if (total - 1.0).abs() > 1e-14 {
                return Err(TheoryError::InvalidInstance(format!("vector sums to {total}")));
            }
            let r: Vec<BigRational> = v.iter().map(|x| conv(*x)).collect::<Result<_>>()?;
            let sum: BigRational = r.iter().cloned().sum();
            Ok(r.into_iter().map(|x| x / &sum).collect())
        };
        Self::new(
            p.iter().map(prob).collect::<Result<_>>()?,
            q.iter().map(prob).collect::<Result<_>>()?,
            g.iter().map(|x| conv(*x)).collect::<Result<_>>()?,
        )
    }

    pub fn space_size(&self) -> usize {
        self.g.len()
    }

    pub fn n(&self) -> usize {
        self.p.len()
    }

    fn mix(v: &[Vec<BigRational>]) -> Vec<BigRational> {
        let n = BigRational::from_integer(BigInt::from(v.len()));
        (0..v[0].len()).map(|x| v.iter().map(|r| r[x].clone()).sum::<BigRational>() / &n).collect()
    }

    pub fn p_mix(&self) -> Vec<BigRational> {
        Self::mix(&self.p)
    }

    pub fn q_mix(&self) -> Vec<BigRational> {
        Self::mix(&self.q)
    }

    /// `E_{p_mix}[g]`.
    pub fn target_mean(&self) -> BigRational {
        self.p_mix().iter().zip(&self.g).map(|(a, b)| a * b).sum()
    }
}

/// Which draws and which weight ratio an estimator uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EstimatorKind {
    /// `x_i ~ q_i`, weight `p_i / q_i`.
    II,
    /// `x_i ~ q_i`, weight `p_mix / q_i`.
    MI,
    /// `x_i ~ q_mix` iid, weight `p_i / q_mix`.
    IM,
    /// `x_i ~ q_mix` iid, weight `p_mix / q_mix`.
    MM,
    /// `x_i ~ q_i`, weight `p_mix / q_mix`.
    MMstr,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 5] = [Self::II, Self::MI, Self::IM, Self::MM, Self::MMstr];

    fn stratified(&self) -> bool {
        matches!(self, Self::II | Self::MI | Self::MMstr)
    }
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Self::II => "II",
            Self::MI => "MI",
            Self::IM => "IM",
            Self::MM => "MM",
            Self::MMstr => "MMstr",
        };
        f.write_str(s)
    }
}

/// Exact mean and variance by enumerating all `S^N` joint outcomes.
pub fn exact_estimator_mean_var(inst: &DiscreteISInstance, kind: EstimatorKind) -> (BigRational, BigRational) {
    let (s, n) = (inst.space_size(), inst.n());
    let pmix = inst.p_mix();
    let qmix = inst.q_mix();
    let nn = BigRational::from_integer(BigInt::from(n));
    // sampling law and per-state term of draw i
    let law = |i: usize| if kind.stratified() { &inst.q[i] } else { &qmix };
    let term: Vec<Vec<BigRational>> = (0..n)
        .map(|i| {
            (0..s)
                .map(|x| {
                    let (num, den) = match kind {
                        EstimatorKind::II => (&inst.p[i][x], &inst.q[i][x]),
                        EstimatorKind::MI => (&pmix[x], &inst.q[i][x]),
                        EstimatorKind::IM => (&inst.p[i][x], &qmix[x]),
                        EstimatorKind::MM | EstimatorKind::MMstr => (&pmix[x], &qmix[x]),
                    };
                    if den.is_zero() {
                        BigRational::zero()
                    } else {
                        num / den * &inst.g[x] / &nn
                    }
                })
                .collect()
        })
        .collect();
    let mut mean = BigRational::zero();
    let mut second = BigRational::zero();
    let mut idx = vec![0usize; n];
    loop {
        let mut prob = BigRational::one();
        for (i, &x) in idx.iter().enumerate() {
            prob *= &law(i)[x];
            if prob.is_zero() {
                break;
            }
        }
        if !prob.is_zero() {
            let val: BigRational = idx.iter().enumerate().map(|(i, &x)| term[i][x].clone()).sum();
            second += &prob * &val * &val;
            mean += prob * val;
        }
        // odometer over {0..s}^n
        let mut k = 0;
        loop {
            if k == n {
                let var = second - &mean * &mean;
                return (mean, var);
            }
            idx[k] += 1;
            if idx[k] < s {
                break;
            }
            idx[k] = 0;
            k += 1;
        }
    }
}

fn random_prob<R: Rng + ?Sized>(rng: &mut R, s: usize, min: i64) -> Vec<BigRational> {
    loop {
        let k: Vec<i64> = (0..s).map(|_| rng.random_range(min..=9)).collect();
        let total: i64 = k.iter().sum();
        if total > 0 {
            return k.into_iter().map(|x| rat(x, total)).collect();
        }
    }
}

/// Random instance with small-denominator rationals: targets may contain
/// zeros, proposals are strictly positive, `g` takes integer values in
/// `−3..=3`.
pub fn random_instance<R: Rng + ?Sized>(rng: &mut R, s: usize, n: usize) -> DiscreteISInstance {
    let p = (0..n).map(|_| random_prob(rng, s, 0)).collect();
    let q = (0..n).map(|_| random_prob(rng, s, 1)).collect();
    let g = (0..s).map(|_| rat(rng.random_range(-3..=3), 1)).collect();
    DiscreteISInstance::new(p, q, g).expect("positive proposals dominate any target")
}

/// Maximum relative residual of each of the five EnKF matrix identities.
#[derive(Debug, Clone, PartialEq)]
pub struct IdentityReport {
    /// `Σ = Q − KHQ`, `ΣHᵀ = KR`, `det Σ det S = det Q det R`,
    /// `Δ_K = (I − K_t H) Δ_Q Hᵀ S⁻¹`, `Δ_Σ = Δ_K S Δ_Kᵀ`. The last two are
    /// relative to `‖K_t‖ + ‖K‖` and `‖Σ_t‖ + ‖Σ‖`.
    pub residuals: [f64; 5],
    pub delta_k: DMatrix<f64>,
    pub delta_sigma: DMatrix<f64>,
}

impl IdentityReport {
    pub const NAMES: [&'static str; 5] = [
        "posterior covariance",
        "sigma H^T = K R",
        "determinant product",
        "gain difference",
        "covariance difference",
    ];

    pub fn max_residual(&self) -> f64 {
        self.residuals.iter().cloned().fold(0.0, f64::max)
    }
}

fn rel_residual(lhs: &DMatrix<f64>, rhs: &DMatrix<f64>) -> f64 {
    scaled_residual(lhs, rhs, lhs.norm().max(rhs.norm()))
}

fn scaled_residual(lhs: &DMatrix<f64>, rhs: &DMatrix<f64>, scale: f64) -> f64 {
    let diff = (lhs - rhs).norm();
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Kalman quantities built from a prior covariance `Q`: `S`, `K` and the
/// Joseph-form covariance `(I − KH) Q (I − KH)ᵀ + K R Kᵀ`.
fn kalman_parts(prior: &DMatrix<f64>, r: &SpdMatrix, h: &DMatrix<f64>) -> Result<(SpdMatrix, DMatrix<f64>)> {
    let s = SpdMatrix::from_symmetrized(h * prior * h.transpose() + r.entries())?;
    let k = s.solve(&(h * prior)).transpose();
    Ok((s, k))
}

fn joseph(k: &DMatrix<f64>, h: &DMatrix<f64>, q: &DMatrix<f64>, r: &SpdMatrix) -> DMatrix<f64> {
    let a = DMatrix::identity(q.nrows(), q.ncols()) - k * h;
    &a * q * a.transpose() + k * r.entries() * k.transpose()
}

/// Builds `S, K, Σ` from `Q` and `S_t, K_t, Σ_t` from `Q_t = prev_cov + Q`
/// (with `Σ_t` in Joseph form around `Q`) and reports the residual of each
/// identity.
pub fn check_matrix_identities(q: &SpdMatrix, r: &SpdMatrix, h: &DMatrix<f64>, prev_cov: &DMatrix<f64>) -> Result<IdentityReport> {
    let d = q.dim();
    if h.ncols() != d || h.nrows() != r.dim() {
        return Err(TheoryError::DimensionMismatch { expected: d, found: h.ncols() });
    }
    let qm = q.entries();
    let qt = prev_cov + qm;
    let (s, k) = kalman_parts(qm, r, h)?;
    let (_, kt) = kalman_parts(&qt, r, h)?;
    let sigma = joseph(&k, h, qm, r);
    let sigma_t = joseph(&kt, h, qm, r);
    let dq = &qt - qm;
    let dk = &kt - &k;
    let dsigma = &sigma_t - &sigma;

    let r1 = rel_residual(&sigma, &(qm - &k * h * qm));
    let r2 = rel_residual(&(&sigma * h.transpose()), &(&k * r.entries()));
    let sigma_spd = SpdMatrix::from_symmetrized(sigma.clone())?;
    let r3 = ((sigma_spd.log_det() + s.log_det()) - (q.log_det() + r.log_det())).exp_m1().abs();
    let rhs4 = (DMatrix::identity(d, d) - &kt * h) * &dq * h.transpose() * s.inverse();
    // the differences are measured against the matrices they subtract
    let r4 = scaled_residual(&dk, &rhs4, kt.norm() + k.norm());
    let r5 = scaled_residual(&dsigma, &(&dk * s.entries() * dk.transpose()), sigma_t.norm() + sigma.norm());
    Ok(IdentityReport { residuals: [r1, r2, r3, r4, r5], delta_k: dk, delta_sigma: dsigma })
}

/// Mass and normalized law of `ℓ(x) N(x; z, Q)` with the unnormalized
/// likelihood `ℓ(x) = exp(−½|y − Hx|²_R)`:
/// `log mass = ½(log det R − log det S) − ½|y − Hz|²_S`, law `N(z + Kw, Q − KHQ)`.
pub fn filtering_component(
    z: &DVector<f64>,
    y: &DVector<f64>,
    h: &DMatrix<f64>,
    q: &SpdMatrix,
    r: &SpdMatrix,
) -> Result<(f64, GaussianComponent)> {
    let d = q.dim();
    if z.len() != d || h.ncols() != d {
        return Err(TheoryError::DimensionMismatch { expected: d, found: z.len().min(h.ncols()) });
    }
    if y.len() != r.dim() || h.nrows() != r.dim() {
        return Err(TheoryError::DimensionMismatch { expected: r.dim(), found: y.len() });
    }
    let (s, k) = kalman_parts(q.entries(), r, h)?;
    let w = y - h * z;
    let log_mass = 0.5 * (r.log_det() - s.log_det()) - 0.5 * w.dot(&s.solve_vec(&w));
    let sigma = SpdMatrix::from_symmetrized(q.entries() - &k * h * q.entries())?;
    Ok((log_mass, GaussianComponent::new(z + &k * w, sigma)?))
}

fn inner_log_mean_exp(vals: &[f64]) -> f64 {
    crate::mathcore::log_sum_exp(vals) - (vals.len() as f64).ln()
}

/// Log of `(det Ĉ / det Q)^{1/2} (N⁻¹ Σ_j exp(−½|y − H f_j|²_S))⁻¹` with
/// `Ĉ = Cov^emp[f_j] + Q`, for flow images `f_j`.
pub fn log_weight_upper_bound(
    flow_images: &[DVector<f64>],
    y: &DVector<f64>,
    h: &DMatrix<f64>,
    q: &SpdMatrix,
    r: &SpdMatrix,
) -> Result<f64> {
    let c = SpdMatrix::from_symmetrized(empirical_cov(flow_images, flow_images)? + q.entries())?;
    let (s, _) = kalman_parts(q.entries(), r, h)?;
    let e: Vec<f64> = flow_images
        .iter()
        .map(|f| {
            let w = y - h * f;
            -0.5 * w.dot(&s.solve_vec(&w))
        })
        .collect();
    Ok(0.5 * (c.log_det() - q.log_det()) - inner_log_mean_exp(&e))
}

/// [`log_weight_upper_bound`] exponentiated.
pub fn weight_upper_bound(
    flow_images: &[DVector<f64>],
    y: &DVector<f64>,
    h: &DMatrix<f64>,
    q: &SpdMatrix,
    r: &SpdMatrix,
) -> Result<f64> {
    Ok(log_weight_upper_bound(flow_images, y, h, q, r)?.exp())
}

/// Moore–Penrose pseudoinverse of a symmetric matrix; eigenvalues below
/// `1e-12 ‖M‖` are treated as zero.
pub fn symmetric_pinv(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = 0.5 * (m + m.transpose());
    let tol = 1e-12 * sym.norm();
    let eig = SymmetricEigen::new(sym);
    let n = m.nrows();
    let mut out = DMatrix::zeros(n, n);
    for (k, lambda) in eig.eigenvalues.iter().enumerate() {
        if lambda.abs() > tol {
            let v = eig.eigenvectors.column(k);
            out += (v * v.transpose()) / *lambda;
        }
    }
    out
}

/// Writes `|x − a|²_A − |x − b|²_B` as `(x − u)ᵀ(A⁻¹ − B⁻¹)(x − u) + constant`
/// with `u = b − Bv` and `constant = −(b − a)ᵀ(B − A)†(b − a)`, given `v`
/// with `(B − A) v = b − a`.
pub fn quadratic_difference_decomposition(
    a_mat: &SpdMatrix,
    b_mat: &SpdMatrix,
    a: &DVector<f64>,
    b: &DVector<f64>,
    v: &DVector<f64>,
) -> Result<(DVector<f64>, f64)> {
    let d = a_mat.dim();
    for len in [b_mat.dim(), a.len(), b.len(), v.len()] {
        if len != d {
            return Err(TheoryError::DimensionMismatch { expected: d, found: len });
        }
    }
    let diff = b_mat.entries() - a_mat.entries();
    let ba = b - a;
    let miss = (&diff * v - &ba).norm();
    if miss > 1e-10 * ba.norm().max(1.0) {
        return Err(TheoryError::IncompatibleInput(miss));
    }
    let u = b - b_mat.entries() * v;
    // every solution v gives the same vᵀ(B − A)v = (b − a)ᵀ(B − A)†(b − a)
    let constant = -ba.dot(v);
    Ok((u, constant))
}

/// Pieces of the ratio `p_i / q_{p,i}` between a filtering component and
/// its previous-ensemble proposal, written around the centre `u` from the
/// quadratic-difference decomposition.
#[derive(Debug, Clone)]
pub struct RatioBound {
    pub u: DVector<f64>,
    /// `Σ⁻¹ − Σ_t⁻¹`, positive semidefinite.
    pub curvature: DMatrix<f64>,
    /// `½ log(det Σ_t / det Q)`.
    pub log_prefactor: f64,
    /// `−½|w|²_S + ½ δᵀ Δ_Σ† δ ≤ 0`; zero exactly when the bound is attained.
    pub log_slack: f64,
    target: GaussianComponent,
    target_log_mass: f64,
    proposal: GaussianComponent,
    // curvature = Gᵀ M⁻¹ G with G = AᵀΣ⁻¹, M = I + AᵀΣ⁻¹A, and
    // G(x − u) = G(x − m_t) + shift
    g: DMatrix<f64>,
    m: SpdMatrix,
    shift: DVector<f64>,
}

impl RatioBound {
    /// Log of the bound at `x`.
    pub fn log_bound(&self, x: &DVector<f64>) -> f64 {
        let e = &self.g * (x - &self.proposal.mean) + &self.shift;
        self.log_prefactor - 0.5 * self.m.whiten(&e).norm_squared()
    }

    /// Log of the exact ratio at `x`.
    pub fn log_ratio(&self, x: &DVector<f64>) -> f64 {
        self.target_log_mass + crate::mathcore::log_gaussian_density(x, &self.target)
            - crate::mathcore::log_gaussian_density(x, &self.proposal)
    }
}

/// Constructs the bound for flow image `z`, with `prev_cov` the empirical
/// covariance of the flow images.
///
/// `Δ_K`, `Δ_Σ = A Aᵀ` (`A = Δ_K L`, `S = L Lᵀ`) and `m_t − m̂ = A c`
/// (`c = L⁻¹ w`) are formed without differencing nearby matrices; `v`
/// is the minimum-norm solution of `Δ_Σ v = m_t − m̂` from the spectrum of `AᵀA`,
/// and the slack reduces to `−½ |(I − P) c|²` with `P` the projection onto
/// the row space of `A`.
pub fn ratio_bound(
    z: &DVector<f64>,
    y: &DVector<f64>,
    h: &DMatrix<f64>,
    q: &SpdMatrix,
    r: &SpdMatrix,
    prev_cov: &DMatrix<f64>,
) -> Result<RatioBound> {
    let (log_mass, target) = filtering_component(z, y, h, q, r)?;
    let d = q.dim();
    if prev_cov.nrows() != d || prev_cov.ncols() != d {
        return Err(TheoryError::DimensionMismatch { expected: d, found: prev_cov.nrows() });
    }
    let qm = q.entries();
    let (s, _) = kalman_parts(qm, r, h)?;
    let (_, kt) = kalman_parts(&(prev_cov + qm), r, h)?;
    let sigma_t = SpdMatrix::from_symmetrized(joseph(&kt, h, qm, r))?;
    let w = y - h * z;
    let m_t = z + &kt * &w;
    let proposal = GaussianComponent::new(m_t.clone(), sigma_t.clone())?;

    let dk = (DMatrix::identity(d, d) - &kt * h) * prev_cov * h.transpose() * s.inverse();
    let a = &dk * s.chol();
    let c = s.whiten(&w);
    // with AᵀA = Σ λ_k f_k f_kᵀ: P c = Σ f_k f_kᵀ c and v = Σ A f_k f_kᵀ c / λ_k
    let eig = (a.transpose() * &a).symmetric_eigen();
    let tol = 1e-11 * eig.eigenvalues.amax();
    let mut v = DVector::zeros(d);
    let mut pc = DVector::zeros(c.len());
    for (k, lambda) in eig.eigenvalues.iter().enumerate() {
        if *lambda > tol {
            let f = eig.eigenvectors.column(k);
            let coef = f.dot(&c);
            pc += f * coef;
            v += &a * f * (coef / lambda);
        }
    }
    let u = &m_t - sigma_t.entries() * &v;
    let g = target.cov.solve(&a).transpose();
    let m = SpdMatrix::from_symmetrized(DMatrix::identity(a.ncols(), a.ncols()) + &g * &a)?;
    let shift = m.entries() * &pc;
    let curvature = g.transpose() * m.solve(&g);
    let rest = &c - &pc;
    Ok(RatioBound {
        u,
        curvature: 0.5 * (&curvature + curvature.transpose()),
        log_prefactor: 0.5 * (sigma_t.log_det() - q.log_det()),
        log_slack: -0.5 * rest.norm_squared(),
        target,
        target_log_mass: log_mass,
        proposal,
        g,
        m,
        shift,
    })
}

/// Random SPD matrix `MᵀM + 0.1 I` with standard normal `M`.
pub fn random_spd<R: Rng + ?Sized>(rng: &mut R, d: usize) -> SpdMatrix {
    let m = random_matrix(rng, d, d);
    SpdMatrix::from_symmetrized(m.transpose() * &m + DMatrix::identity(d, d) * 0.1).expect("shifted Gram matrix is SPD")
}

/// Standard normal `rows × cols` matrix.
pub fn random_matrix<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_vec(rows, cols, crate::mathcore::standard_normals(rng, rows * cols))
}

/// Outcome of one named check.
#[derive(Debug, Clone, PartialEq)]
pub struct TheoryCheck {
    pub name: String,
    pub detail: String,
    pub pass: bool,
}

impl fmt::Display for TheoryCheck {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}: {}", if self.pass { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

fn rv(v: &[(i64, i64)]) -> Vec<BigRational> {
    v.iter().map(|(a, b)| rat(*a, *b)).collect()
}

/// The two-state, two-component instances with hand-computed variances,
/// as `(instance, expected variance per kind)`.
pub fn two_point_examples() -> Vec<(DiscreteISInstance, Vec<(EstimatorKind, BigRational)>)> {
    use EstimatorKind::*;
    let a = DiscreteISInstance::new(
        vec![rv(&[(1, 10), (9, 10)]), rv(&[(4, 10), (6, 10)])],
        vec![rv(&[(3, 10), (7, 10)]), rv(&[(2, 10), (8, 10)])],
        rv(&[(1, 1), (1, 1)]),
    )
    .expect("valid");
    let b = DiscreteISInstance::new(
        vec![rv(&[(4, 5), (1, 5)]), rv(&[(1, 2), (1, 2)])],
        vec![rv(&[(2, 3), (1, 3)]), rv(&[(1, 3), (2, 3)])],
        rv(&[(1, 1), (2, 1)]),
    )
    .expect("valid");
    vec![
        (a, vec![(II, rat(37, 336)), (IM, rat(3, 50)), (MI, rat(37, 5376)), (MM, rat(0, 1)), (MMstr, rat(0, 1))]),
        (b, vec![(MI, rat(369, 3200)), (IM, rat(41, 400)), (MM, rat(1, 800)), (MMstr, rat(1, 900)), (II, rat(0, 1))]),
    ]
}

/// Runs the exact and randomized checks and returns one line per check.
pub fn theory_report(seed: u64) -> Vec<TheoryCheck> {
    let mut out = Vec::new();
    for (e, (inst, expected)) in two_point_examples().iter().enumerate() {
        for (kind, want) in expected {
            let (mean, var) = exact_estimator_mean_var(inst, *kind);
            out.push(TheoryCheck {
                name: format!("two-point example {} V[{kind}]", e + 1),
                detail: format!("{var} (expected {want}), mean {mean}"),
                pass: &var == want && mean == inst.target_mean(),
            });
        }
    }

    let mut rng = crate::rng_from_seed(seed);
    let mut violations = 0;
    let mut biased = 0;
    for k in 0..1000 {
        let inst = random_instance(&mut rng, 2 + k % 2, 2 + (k / 2) % 2);
        let v: Vec<BigRational> = EstimatorKind::ALL
            .iter()
            .map(|kind| {
                let (m, v) = exact_estimator_mean_var(&inst, *kind);
                if m != inst.target_mean() {
                    biased += 1;
                }
                v
            })
            .collect();
        let (mi, im, mm, mmstr) = (&v[1], &v[2], &v[3], &v[4]);
        if !(mmstr <= mm && mm <= mi.min(im)) {
            violations += 1;
        }
    }
    out.push(TheoryCheck {
        name: "variance ordering on 1000 random instances".into(),
        detail: format!("{violations} ordering violations, {biased} biased means"),
        pass: violations == 0 && biased == 0,
    });

    let mut worst = [0.0f64; 5];
    for _ in 0..50 {
        let d = rng.random_range(1..=5);
        let m = rng.random_range(1..=5);
        let q = random_spd(&mut rng, d);
        let r = random_spd(&mut rng, m);
        let h = random_matrix(&mut rng, m, d);
        let k = rng.random_range(1..=d + 1);
        let g = random_matrix(&mut rng, k, d);
        let rep = check_matrix_identities(&q, &r, &h, &(g.transpose() * g)).expect("well-posed instance");
        for (w, x) in worst.iter_mut().zip(rep.residuals) {
            *w = w.max(x);
        }
    }
    for (name, w) in IdentityReport::NAMES.iter().zip(worst) {
        out.push(TheoryCheck {
            name: format!("matrix identity: {name}"),
            detail: format!("max relative residual {w:.3e} over 50 instances"),
            pass: w < 1e-10,
        });
    }

    let q1 = SpdMatrix::identity(1);
    let h1 = DMatrix::identity(1, 1);
    let (lm, comp) = filtering_component(&DVector::zeros(1), &DVector::from_element(1, 2.0), &h1, &q1, &q1).expect("1d");
    let want = 0.5 * 0.5f64.ln() - 1.0;
    out.push(TheoryCheck {
        name: "filtering component, scalar case".into(),
        detail: format!("log mass {lm:.12} (expected {want:.12}), mean {:.12}", comp.mean[0]),
        pass: (lm - want).abs() < 1e-12 && (comp.mean[0] - 1.0).abs() < 1e-12,
    });

    let (u, c) = quadratic_difference_decomposition(
        &SpdMatrix::identity(1),
        &SpdMatrix::scaled_identity(1, 2.0),
        &DVector::zeros(1),
        &DVector::from_element(1, 1.0),
        &DVector::from_element(1, 1.0),
    )
    .expect("compatible");
    out.push(TheoryCheck {
        name: "quadratic difference, scalar case".into(),
        detail: format!("u = {}, constant = {c}", u[0]),
        pass: (u[0] + 1.0).abs() < 1e-15 && (c + 1.0).abs() < 1e-15,
    });
    out
}

/// `f64` view of an exact rational.
pub fn to_f64(r: &BigRational) -> f64 {
    r.to_f64().unwrap_or(f64::NAN)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn two_point_examples_are_exact() {
        for (inst, expected) in two_point_examples() {
            for (kind, want) in expected {
                let (mean, var) = exact_estimator_mean_var(&inst, kind);
                assert_eq!(var, want, "{kind}");
                assert_eq!(mean, inst.target_mean());
            }
        }
    }

    #[test]
    fn matched_proposals_reduce_to_stratified_mc() {
        let mut rng = crate::rng_from_seed(8);
        let base = random_instance(&mut rng, 3, 3);
        let inst = DiscreteISInstance::new(base.q.clone(), base.q.clone(), base.g.clone()).unwrap();
        let (m_ii, v_ii) = exact_estimator_mean_var(&inst, EstimatorKind::II);
        let (_, v_str) = exact_estimator_mean_var(&inst, EstimatorKind::MMstr);
        // plain stratified MC: N⁻² Σ_i Var_{q_i}[g]
        let n2 = rat(9, 1);
        let strat: BigRational = inst
            .q
            .iter()
            .map(|qi| {
                let m: BigRational = qi.iter().zip(&inst.g).map(|(a, b)| a * b).sum();
                let s2: BigRational = qi.iter().zip(&inst.g).map(|(a, b)| a * b * b).sum();
                s2 - &m * &m
            })
            .sum::<BigRational>()
            / n2;
        assert_eq!(v_ii, strat);
        assert_eq!(v_str, strat);
        assert_eq!(m_ii, inst.target_mean());
    }

    #[test]
    fn enumeration_matches_independent_terms() {
        // every estimator is a sum of independent per-draw terms
        let mut rng = crate::rng_from_seed(9);
        for _ in 0..30 {
            let inst = random_instance(&mut rng, 3, 3);
            let n = rat(3, 1);
            let pmix = inst.p_mix();
            let qmix = inst.q_mix();
            for kind in EstimatorKind::ALL {
                let mut var = BigRational::zero();
                for i in 0..3 {
                    let law = if kind.stratified() { &inst.q[i] } else { &qmix };
                    let t: Vec<BigRational> = (0..3)
                        .map(|x| {
                            let (a, b) = match kind {
                                EstimatorKind::II => (&inst.p[i][x], &inst.q[i][x]),
                                EstimatorKind::MI => (&pmix[x], &inst.q[i][x]),
                                EstimatorKind::IM => (&inst.p[i][x], &qmix[x]),
                                _ => (&pmix[x], &qmix[x]),
                            };
                            a / b * &inst.g[x] / &n
                        })
                        .collect();
                    let m: BigRational = law.iter().zip(&t).map(|(p, v)| p * v).sum();
                    let s: BigRational = law.iter().zip(&t).map(|(p, v)| p * v * v).sum();
                    var += s - &m * &m;
                }
                assert_eq!(exact_estimator_mean_var(&inst, kind).1, var);
            }
        }
    }

    #[test]
    fn continuity_violation_detected() {
        let r = DiscreteISInstance::new(
            vec![rv(&[(1, 2), (1, 2)])],
            vec![rv(&[(1, 1), (0, 1)])],
            rv(&[(1, 1), (1, 1)]),
        );
        assert_eq!(r, Err(TheoryError::AbsoluteContinuityViolated { component: 0, state: 1 }));
    }

    #[test]
    fn from_f64_renormalizes_exactly() {
        let inst = DiscreteISInstance::from_f64(&[vec![0.1, 0.9], vec![0.4, 0.6]], &[vec![0.3, 0.7], vec![0.2, 0.8]], &[1.0, 1.0]).unwrap();
        // the binary values of 0.1, 0.9, ... are not the decimals, so p_mix ≠ q_mix slightly
        let (mean, var) = exact_estimator_mean_var(&inst, EstimatorKind::MM);
        assert_eq!(mean, BigRational::one());
        assert!(to_f64(&var) < 1e-30);
        assert!((to_f64(&exact_estimator_mean_var(&inst, EstimatorKind::II).1) - 37.0 / 336.0).abs() < 1e-14);
        assert!(DiscreteISInstance::from_f64(&[vec![0.5, 0.6]], &[vec![0.5, 0.5]], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn no_further_ordering_witnesses() {
        use EstimatorKind::*;
        let pairs = [(II, MI), (II, IM), (II, MM), (II, MMstr), (MI, IM)];
        let mut found = [[false; 2]; 5];
        let mut rng = crate::rng_from_seed(10);
        for k in 0..4000 {
            let inst = random_instance(&mut rng, 2 + k % 2, 2 + (k / 2) % 2);
            for (p, (a, b)) in pairs.iter().enumerate() {
                let va = exact_estimator_mean_var(&inst, *a).1;
                let vb = exact_estimator_mean_var(&inst, *b).1;
                if va < vb {
                    found[p][0] = true;
                }
                if va > vb {
                    found[p][1] = true;
                }
            }
            if found.iter().flatten().all(|f| *f) {
                return;
            }
        }
        panic!("missing witnesses: {found:?}");
    }

    #[test]
    fn identities_on_simple_case() {
        let d = 3;
        let q = SpdMatrix::identity(d);
        let h = DMatrix::identity(d, d);
        let rep = check_matrix_identities(&q, &q, &h, &DMatrix::zeros(d, d)).unwrap();
        assert!(rep.max_residual() < 1e-14);
        assert!(rep.delta_k.iter().all(|x| *x == 0.0));
        assert!(rep.delta_sigma.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn identities_random() {
        let mut rng = crate::rng_from_seed(11);
        for _ in 0..50 {
            let d = rng.random_range(1..=5);
            let m = rng.random_range(1..=5);
            let q = random_spd(&mut rng, d);
            let r = random_spd(&mut rng, m);
            let h = random_matrix(&mut rng, m, d);
            let g = random_matrix(&mut rng, d, d);
            let rep = check_matrix_identities(&q, &r, &h, &(g.transpose() * g)).unwrap();
            assert!(rep.max_residual() < 1e-10, "{:?}", rep.residuals);
        }
    }

    #[test]
    fn filtering_component_examples() {
        let q = SpdMatrix::identity(2);
        let r = SpdMatrix::scaled_identity(1, 0.3);
        let h = DMatrix::from_row_slice(1, 2, &[1.0, -0.5]);
        let z = DVector::from_vec(vec![0.4, 1.0]);
        let y = &h * &z;
        let (lm, comp) = filtering_component(&z, &y, &h, &q, &r).unwrap();
        let s = SpdMatrix::from_symmetrized(&h * q.entries() * h.transpose() + r.entries()).unwrap();
        assert!((lm - 0.5 * (r.log_det() - s.log_det())).abs() < 1e-14);
        assert!((comp.mean - z).amax() < 1e-15);
        assert!(filtering_component(&DVector::zeros(3), &y, &h, &q, &r).is_err());

        let one = SpdMatrix::identity(1);
        let (lm, comp) = filtering_component(&DVector::zeros(1), &DVector::from_element(1, 2.0), &DMatrix::identity(1, 1), &one, &one).unwrap();
        assert!((lm - (0.5 * 0.5f64.ln() - 1.0)).abs() < 1e-14);
        assert!((comp.mean[0] - 1.0).abs() < 1e-15);
        assert!((comp.cov.entries()[(0, 0)] - 0.5).abs() < 1e-15);
    }

    fn simpson<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, n: usize) -> f64 {
        let h = (b - a) / n as f64;
        let mut s = f(a) + f(b);
        for k in 1..n {
            s += f(a + k as f64 * h) * if k % 2 == 1 { 4.0 } else { 2.0 };
        }
        s * h / 3.0
    }

    #[test]
    fn filtering_component_quadrature() {
        let (z, y, qv, rv_, hv) = (0.3, 1.1, 0.8, 0.5, 1.3);
        let (lm, comp) = filtering_component(
            &DVector::from_element(1, z),
            &DVector::from_element(1, y),
            &DMatrix::from_element(1, 1, hv),
            &SpdMatrix::scaled_identity(1, qv),
            &SpdMatrix::scaled_identity(1, rv_),
        )
        .unwrap();
        let dens = |x: f64| {
            (-0.5 * (y - hv * x) * (y - hv * x) / rv_).exp() * (-0.5 * (x - z) * (x - z) / qv).exp()
                / (2.0 * std::f64::consts::PI * qv).sqrt()
        };
        let sd = qv.sqrt();
        let (a, b) = (z - 10.0 * sd, z + 10.0 * sd);
        let mass = simpson(dens, a, b, 20_000);
        let m1 = simpson(|x| x * dens(x), a, b, 20_000) / mass;
        let m2 = simpson(|x| (x - m1) * (x - m1) * dens(x), a, b, 20_000) / mass;
        assert!((mass - lm.exp()).abs() < 1e-8);
        assert!((m1 - comp.mean[0]).abs() < 1e-6);
        assert!((m2 - comp.cov.entries()[(0, 0)]).abs() < 1e-6);
    }

    #[test]
    fn weight_bound_examples() {
        let q = SpdMatrix::identity(1);
        let r = SpdMatrix::identity(1);
        let h = DMatrix::identity(1, 1);
        // coincident images with y = H f
        let same = vec![DVector::from_element(1, 0.5); 3];
        let b = weight_upper_bound(&same, &DVector::from_element(1, 0.5), &h, &q, &r).unwrap();
        assert!((b - 1.0).abs() < 1e-14);
        // two images 0 and 2, y = 1: Ĉ = 2 + 1 = 3, S = 2, both |w|²_S = ½
        let two = vec![DVector::from_element(1, 0.0), DVector::from_element(1, 2.0)];
        let b = weight_upper_bound(&two, &DVector::from_element(1, 1.0), &h, &q, &r).unwrap();
        assert!((b - 3f64.sqrt() * 0.25f64.exp()).abs() < 1e-13);
        // moving y away from the images raises the bound
        let mut last = 0.0;
        for k in 0..10 {
            let b = weight_upper_bound(&two, &DVector::from_element(1, 1.0 + k as f64), &h, &q, &r).unwrap();
            assert!(b >= last);
            last = b;
        }
    }

    #[test]
    fn quadratic_difference_examples() {
        let one = SpdMatrix::identity(1);
        let b = DVector::from_element(1, 0.7);
        let (u, c) = quadratic_difference_decomposition(&one, &SpdMatrix::scaled_identity(1, 3.0), &b, &b, &DVector::zeros(1)).unwrap();
        assert_eq!((u[0], c), (0.7, 0.0));
        let (u, c) = quadratic_difference_decomposition(
            &one,
            &SpdMatrix::scaled_identity(1, 2.0),
            &DVector::zeros(1),
            &DVector::from_element(1, 1.0),
            &DVector::from_element(1, 1.0),
        )
        .unwrap();
        assert_eq!((u[0], c), (-1.0, -1.0));
        let bad = quadratic_difference_decomposition(
            &one,
            &SpdMatrix::scaled_identity(1, 2.0),
            &DVector::zeros(1),
            &DVector::from_element(1, 1.0),
            &DVector::from_element(1, 3.0),
        );
        assert!(matches!(bad, Err(TheoryError::IncompatibleInput(_))));
    }

    #[test]
    fn quadratic_difference_random_3d() {
        let mut rng = crate::rng_from_seed(12);
        for _ in 0..10 {
            let a_mat = random_spd(&mut rng, 3);
            let b_mat = random_spd(&mut rng, 3);
            let a = DVector::from_vec(crate::mathcore::standard_normals(&mut rng, 3));
            let v = DVector::from_vec(crate::mathcore::standard_normals(&mut rng, 3));
            let b = &a + (b_mat.entries() - a_mat.entries()) * &v;
            let (u, c) = quadratic_difference_decomposition(&a_mat, &b_mat, &a, &b, &v).unwrap();
            let mid = a_mat.inverse() - b_mat.inverse();
            for _ in 0..20 {
                let x = DVector::from_vec(crate::mathcore::standard_normals(&mut rng, 3)) * 3.0;
                let lhs = crate::mathcore::mahalanobis_sq(&x, &a, &a_mat) - crate::mathcore::mahalanobis_sq(&x, &b, &b_mat);
                let e = &x - &u;
                let rhs = e.dot(&(&mid * &e)) + c;
                assert!((lhs - rhs).abs() < 1e-8 * lhs.abs().max(1.0), "{lhs} {rhs}");
            }
        }
    }

    #[test]
    fn ratio_bound_attained_full_rank() {
        let mut rng = crate::rng_from_seed(13);
        let d = 3;
        let q = random_spd(&mut rng, d);
        let r = random_spd(&mut rng, d);
        let h = random_matrix(&mut rng, d, d);
        let g = random_matrix(&mut rng, d, d);
        let prev = g.transpose() * g;
        let z = DVector::from_vec(crate::mathcore::standard_normals(&mut rng, d));
        let y = DVector::from_vec(crate::mathcore::standard_normals(&mut rng, d));
        let rb = ratio_bound(&z, &y, &h, &q, &r, &prev).unwrap();
        assert!(rb.log_slack.abs() < 1e-8, "{}", rb.log_slack);
        for _ in 0..20 {
            let x = DVector::from_vec(crate::mathcore::standard_normals(&mut rng, d));
            assert!((rb.log_ratio(&x) - rb.log_bound(&x)).abs() < 1e-8);
        }
    }

    #[test]
    fn ratio_bound_strict_rank_deficient() {
        let mut rng = crate::rng_from_seed(14);
        let d = 3;
        let q = random_spd(&mut rng, d);
        let r = random_spd(&mut rng, 2);
        let h = DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 0.0, 2.0, 0.0, 0.0]);
        let g = random_matrix(&mut rng, d, d);
        let prev = g.transpose() * g;
        let z = DVector::from_vec(crate::mathcore::standard_normals(&mut rng, d));
        let y = DVector::from_vec(vec![0.9, -1.4]);
        let rb = ratio_bound(&z, &y, &h, &q, &r, &prev).unwrap();
        assert!(rb.log_slack < -1e-6, "{}", rb.log_slack);
        for _ in 0..20 {
            let x = DVector::from_vec(crate::mathcore::standard_normals(&mut rng, d));
            assert!(rb.log_ratio(&x) < rb.log_bound(&x));
            assert!((rb.log_ratio(&x) - rb.log_bound(&x) - rb.log_slack).abs() < 1e-8);
        }
    }

    #[test]
    fn ratio_bound_rank_one_spread_many_observations() {
        for seed in 0..40u64 {
            let mut rng = crate::rng_from_seed(seed);
            let (d, m) = (3, 5);
            let q = random_spd(&mut rng, d);
            let r = random_spd(&mut rng, m);
            let h = random_matrix(&mut rng, m, d);
            let g = random_matrix(&mut rng, 1, d);
            let prev = g.transpose() * g;
            let z = DVector::from_vec(crate::mathcore::standard_normals(&mut rng, d));
            let y = DVector::from_vec(crate::mathcore::standard_normals(&mut rng, m));
            let rb = ratio_bound(&z, &y, &h, &q, &r, &prev).unwrap();
            for _ in 0..20 {
                let x = DVector::from_vec(crate::mathcore::standard_normals(&mut rng, d)) * 3.0;
                assert!((rb.log_ratio(&x) - rb.log_bound(&x) - rb.log_slack).abs() < 1e-8, "seed {seed}");
            }
        }
    }

    #[test]
    fn report_passes() {
        let lines = theory_report(1);
        assert!(lines.iter().all(|l| l.pass), "{lines:#?}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn ordering_and_unbiasedness(seed in 0u64..1_000_000, s in 2usize..4, n in 2usize..4) {
            let mut rng = crate::rng_from_seed(seed);
            let inst = random_instance(&mut rng, s, n);
            let r: Vec<(BigRational, BigRational)> =
                EstimatorKind::ALL.iter().map(|k| exact_estimator_mean_var(&inst, *k)).collect();
            for (m, _) in &r {
                prop_assert_eq!(m, &inst.target_mean());
            }
            prop_assert!(r[4].1 <= r[3].1);
            prop_assert!(r[3].1 <= r[1].1.clone().min(r[2].1.clone()));
        }
    }
}
