//! Scrambled Sobol' points and their transport onto Gaussian mixtures.
//!
//! A point `u ∈ (0,1)^{d+1}` is mapped to a mixture sample by picking the
//! component with the categorical inverse CDF of `u_0` and pushing
//! `u_1..u_d` through `m_k + L_k Φ⁻¹(·)`.

use crate::filters::{
    cumulative_weights, gain_current_adjusted, gain_previous_adjusted, log_likelihood, normalize_log_weights,
    proposals_current, proposals_previous, CovAdjust, FilterError, WeightedEnsemble,
};
use crate::mathcore::{log_mixture_density, GaussianMixture, MathError};
use crate::models::StateSpaceModel;
use crate::seed;
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rayon::prelude::*;
use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;
use thiserror::Error;

/// New Joe–Kuo D6 direction numbers, dimensions 2..=100.
pub const JOE_KUO_D6: &str = include_str!("../data/joe_kuo_d6.txt");

const BITS: usize = 32;
/// Interior clamp applied to every coordinate.
pub const CLAMP: f64 = 1.0 / (1u64 << 33) as f64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QmcError {
    #[error("dimension {requested} exceeds the direction table ({max})")]
    UnsupportedDimension { requested: usize, max: usize },
    #[error("point count {0} is not a power of two")]
    NotPowerOfTwo(usize),
    #[error("inverse normal CDF argument {0} outside (0,1)")]
    OutOfDomain(f64),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("direction table: {0}")]
    Table(String),
    #[error(transparent)]
    Filter(#[from] FilterError),
    #[error(transparent)]
    Math(#[from] MathError),
}

pub type Result<T> = std::result::Result<T, QmcError>;

/// Primitive-polynomial rows `(s, a, m_1..m_s)` for dimensions 2, 3, ...
#[derive(Debug, Clone)]
pub struct DirectionTable {
    rows: Vec<(u32, u32, Vec<u32>)>,
}

impl DirectionTable {
    /// Parses whitespace-separated `d s a m_1..m_s` rows. Lines whose first
    /// field is not an integer (headers) are skipped; rows must list
    /// dimensions 2, 3, ... in order.
    pub fn parse(text: &str) -> Result<Self> {
        let mut rows = Vec::new();
        for line in text.lines() {
            let fields: Vec<&str> = line.split_whitespace().collect();
            let Some(first) = fields.first() else { continue };
            let Ok(d) = first.parse::<usize>() else { continue };
            let nums: Vec<u32> = fields[1..]
                .iter()
                .map(|f| f.parse::<u32>().map_err(|_| QmcError::Table(format!("bad field `{f}` in row {d}"))))
                .collect::<Result<_>>()?;
            if nums.len() < 2 {
                return Err(QmcError::Table(format!("row {d} is too short")));
            }
            let (s, a) = (nums[0], nums[1]);
            let m = nums[2..].to_vec();
            if m.len() != s as usize {
                return Err(QmcError::Table(format!("row {d} lists {} m values, expected {s}", m.len())));
            }
            if d != rows.len() + 2 {
                return Err(QmcError::Table(format!("row for dimension {d} out of order")));
            }
            for (k, mk) in m.iter().enumerate() {
                if mk % 2 == 0 || *mk >= 1 << (k + 1) {
                    return Err(QmcError::Table(format!("m_{} = {mk} invalid in row {d}", k + 1)));
                }
            }
            rows.push((s, a, m));
        }
        Ok(Self { rows })
    }

    /// The embedded table.
    pub fn joe_kuo_d6() -> &'static Self {
        static TABLE: OnceLock<DirectionTable> = OnceLock::new();
        TABLE.get_or_init(|| Self::parse(JOE_KUO_D6).expect("embedded table parses"))
    }

    /// Largest supported dimension.
    pub fn max_dim(&self) -> usize {
        self.rows.len() + 1
    }

    /// Direction integers `v_1..v_32` of dimension `j` (0-based), as 32-bit
    /// fractions.
    pub fn direction_vectors(&self, j: usize) -> [u32; BITS] {
        let mut v = [0u32; BITS];
        if j == 0 {
            for (k, vk) in v.iter_mut().enumerate() {
                *vk = 1u32 << (BITS - 1 - k);
            }
            return v;
        }
        let (s, a, m) = &self.rows[j - 1];
        let s = *s as usize;
        for k in 0..s.min(BITS) {
            v[k] = m[k] << (BITS - 1 - k);
        }
        for k in s..BITS {
            let mut x = v[k - s] ^ (v[k - s] >> s);
            for l in 1..s {
                if (a >> (s - 1 - l)) & 1 == 1 {
                    x ^= v[k - l];
                }
            }
            v[k] = x;
        }
        v
    }
}

/// `n` points in `[0,1)^dim` stored as 32-bit binary fractions.
#[derive(Debug, Clone, PartialEq)]
pub struct LowDiscrepancySet {
    n: usize,
    dim: usize,
    bits: Vec<u32>,
    scramble_seed: Option<u64>,
}

impl LowDiscrepancySet {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn scramble_seed(&self) -> Option<u64> {
        self.scramble_seed
    }

    /// Raw 32-bit digits of coordinate `j` of point `i`.
    pub fn raw(&self, i: usize, j: usize) -> u32 {
        self.bits[i * self.dim + j]
    }

    /// Coordinate `j` of point `i`, clamped to `[2^-33, 1 − 2^-33]`.
    pub fn coord(&self, i: usize, j: usize) -> f64 {
        let u = self.raw(i, j) as f64 / (1u64 << 32) as f64;
        u.clamp(CLAMP, 1.0 - CLAMP)
    }

    pub fn point(&self, i: usize) -> Vec<f64> {
        (0..self.dim).map(|j| self.coord(i, j)).collect()
    }
}

/// Unscrambled Sobol' points with indices `0..n` in Gray-code order.
///
/// The full net is kept so that every elementary interval of volume `1/n`
/// holds exactly one point; the origin is moved into the interior by the
/// coordinate clamp.
pub fn sobol(n: usize, dim: usize) -> Result<LowDiscrepancySet> {
    sobol_with(DirectionTable::joe_kuo_d6(), n, dim)
}

/// [`sobol`] with an explicit direction table.
pub fn sobol_with(table: &DirectionTable, n: usize, dim: usize) -> Result<LowDiscrepancySet> {
    if dim == 0 || dim > table.max_dim() {
        return Err(QmcError::UnsupportedDimension { requested: dim, max: table.max_dim() });
    }
    if !n.is_power_of_two() || n as u64 > 1 << BITS {
        return Err(QmcError::NotPowerOfTwo(n));
    }
    let dirs: Vec<[u32; BITS]> = (0..dim).map(|j| table.direction_vectors(j)).collect();
    let mut bits = vec![0u32; n * dim];
    let mut x = vec![0u32; dim];
    for i in 1..n {
        let c = (i - 1).trailing_ones() as usize;
        for j in 0..dim {
            x[j] ^= dirs[j][c];
        }
        bits[i * dim..(i + 1) * dim].copy_from_slice(&x);
    }
    Ok(LowDiscrepancySet { n, dim, bits, scramble_seed: None })
}

/// Matoušek affine scrambling: per dimension, a random lower-triangular
/// 32×32 bit matrix with unit diagonal followed by a random digital shift.
pub fn owen_scramble(set: &LowDiscrepancySet, seed: u64) -> LowDiscrepancySet {
    let mut bits = set.bits.clone();
    for j in 0..set.dim {
        let mut rng = crate::rng_from_seed(seed::derive(&[seed, j as u64]));
        // column b acts on input digit b (0 = most significant)
        let mut cols = [0u32; BITS];
        for (b, col) in cols.iter_mut().enumerate() {
            let diag = 1u32 << (BITS - 1 - b);
            let below = diag.wrapping_sub(1);
            *col = diag | (rng.random::<u32>() & below);
        }
        let shift: u32 = rng.random();
        for i in 0..set.n {
            let x = set.bits[i * set.dim + j];
            let mut y = shift;
            let mut rest = x;
            while rest != 0 {
                let b = rest.leading_zeros() as usize;
                y ^= cols[b];
                rest &= !(1u32 << (BITS - 1 - b));
            }
            bits[i * set.dim + j] = y;
        }
    }
    LowDiscrepancySet { n: set.n, dim: set.dim, bits, scramble_seed: Some(seed) }
}

/// Scrambled set for a seed, as used throughout the filters.
pub fn scrambled_sobol(n: usize, dim: usize, seed: u64) -> Result<LowDiscrepancySet> {
    Ok(owen_scramble(&sobol(n, dim)?, seed))
}

const ACKLAM_A: [f64; 6] = [
    -3.969_683_028_665_376e1,
    2.209_460_984_245_205e2,
    -2.759_285_104_469_687e2,
    1.383_577_518_672_690e2,
    -3.066_479_806_614_716e1,
    2.506_628_277_459_239,
];
const ACKLAM_B: [f64; 5] = [
    -5.447_609_879_822_406e1,
    1.615_858_368_580_409e2,
    -1.556_989_798_598_866e2,
    6.680_131_188_771_972e1,
    -1.328_068_155_288_572e1,
];
const ACKLAM_C: [f64; 6] = [
    -7.784_894_002_430_293e-3,
    -3.223_964_580_411_365e-1,
    -2.400_758_277_161_838,
    -2.549_732_539_343_734,
    4.374_664_141_464_968,
    2.938_163_982_698_783,
];
const ACKLAM_D: [f64; 4] = [
    7.784_695_709_041_462e-3,
    3.224_671_290_700_398e-1,
    2.445_134_137_142_996,
    3.754_408_661_907_416,
];

fn acklam(p: f64) -> f64 {
    let (a, b, c, d) = (ACKLAM_A, ACKLAM_B, ACKLAM_C, ACKLAM_D);
    const P_LOW: f64 = 0.02425;
    if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5])
            / ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0)
    } else {
        let q = p - 0.5;
        let r = q * q;
        (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q
            / (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0)
    }
}

/// Standard normal CDF via `erfc`.
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// `Φ⁻¹(u)` for `u ∈ (0,1)`: rational approximation refined by one Halley
/// step on `Φ(x) − u`.
pub fn inv_norm_cdf(u: f64) -> Result<f64> {
    if !(u > 0.0 && u < 1.0) {
        return Err(QmcError::OutOfDomain(u));
    }
    if u > 0.5 {
        return Ok(-inv_norm_cdf(1.0 - u)?);
    }
    if u == 0.5 {
        return Ok(0.0);
    }
    let x = acklam(u);
    let e = norm_cdf(x) - u;
    let t = e * (2.0 * std::f64::consts::PI).sqrt() * (0.5 * x * x).exp();
    Ok(x - t / (1.0 + 0.5 * x * t))
}

/// Pushes each point through the categorical inverse CDF (coordinate 0) and
/// the Gaussian inverse CDF of the selected component (coordinates 1..d).
pub fn transport_to_mixture(set: &LowDiscrepancySet, mix: &GaussianMixture) -> Result<Vec<DVector<f64>>> {
    let d = mix.dim();
    if set.dim() != d + 1 {
        return Err(QmcError::DimensionMismatch { expected: d + 1, found: set.dim() });
    }
    let cum = cumulative_weights(mix.log_weights());
    (0..set.n())
        .into_par_iter()
        .map(|i| {
            let u0 = set.coord(i, 0);
            let k = cum.partition_point(|c| *c <= u0).min(cum.len() - 1);
            let z: Vec<f64> = (1..=d).map(|j| inv_norm_cdf(set.coord(i, j))).collect::<Result<_>>()?;
            let l = mix.component_cov(k).chol();
            Ok(&mix.means()[k] + l * DVector::from_vec(z))
        })
        .collect()
}

/// The five transported-QMC filters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TqmcScheme {
    Bpf,
    EnkfC,
    MmC,
    EnkfP,
    MmP,
}

impl TqmcScheme {
    pub const ALL: [TqmcScheme; 5] = [Self::Bpf, Self::EnkfC, Self::MmC, Self::EnkfP, Self::MmP];

    pub fn tag(&self) -> &'static str {
        match self {
            Self::Bpf => "QMC-BPF",
            Self::EnkfC => "QMC-EnKF_c",
            Self::MmC => "QMC-MM_c",
            Self::EnkfP => "QMC-EnKF_p",
            Self::MmP => "QMC-MM_p",
        }
    }

    fn previous(&self) -> bool {
        matches!(self, Self::EnkfP | Self::MmP)
    }
}

impl fmt::Display for TqmcScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for TqmcScheme {
    type Err = QmcError;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|t| t.tag() == s)
            .ok_or_else(|| QmcError::Filter(FilterError::InvalidScheme(format!("unknown scheme `{s}`"))))
    }
}

/// Weighted ensemble after one transported-QMC step.
#[derive(Debug, Clone)]
pub struct TqmcOutput {
    pub ensemble: WeightedEnsemble,
    /// Unnormalized log weights (zeros for the EnKF variants).
    pub raw_log_weights: Vec<f64>,
    pub warnings: Vec<String>,
}

/// `N` transported points of the initial law, equally weighted.
pub fn tqmc_initial_ensemble(model: &StateSpaceModel, n: usize, qmc_seed: u64) -> Result<WeightedEnsemble> {
    let prior = GaussianMixture::equal_weights_shared(vec![model.prior_mean().clone()], model.prior_cov().clone())?;
    let set = scrambled_sobol(n, model.d() + 1, seed::derive(&[qmc_seed, seed::role::QMC_INIT]))?;
    Ok(WeightedEnsemble::uniform(transport_to_mixture(&set, &prior)?)?)
}

/// One step of a transported-QMC filter. The forecast and analysis point
/// sets use independent scramble seeds split from `qmc_seed`.
pub fn tqmc_filter_step(
    scheme: TqmcScheme,
    state: &WeightedEnsemble,
    y: &DVector<f64>,
    model: &StateSpaceModel,
    qmc_seed: u64,
) -> Result<TqmcOutput> {
    if scheme.previous() && model.linear_obs().is_none() {
        return Err(FilterError::RequiresLinearObservation("previous-ensemble conditioning").into());
    }
    let n = state.len();
    let d = model.d();
    let flows: Vec<DVector<f64>> = state.particles().par_iter().map(|x| model.flow(x)).collect();
    let rho = GaussianMixture::shared(state.log_weights().to_vec(), flows.clone(), model.q().clone())?;
    let fset = scrambled_sobol(n, d + 1, seed::derive(&[qmc_seed, seed::role::QMC_FORECAST]))?;
    let forecast = transport_to_mixture(&fset, &rho)?;

    if scheme == TqmcScheme::Bpf {
        let raw: Vec<f64> = forecast.par_iter().map(|x| log_likelihood(y, x, model)).collect();
        let ensemble = WeightedEnsemble::from_unnormalized(forecast, &raw)?;
        return Ok(TqmcOutput { ensemble, raw_log_weights: raw, warnings: Vec::new() });
    }

    let weights = state.weights();
    let (k, cond) = if model.linear_obs().is_some() {
        gain_previous_adjusted(&flows, Some(&weights), model, &CovAdjust::none())?
    } else {
        gain_current_adjusted(&forecast, model, &CovAdjust::none())?
    };
    let q_mix = if scheme.previous() {
        proposals_previous(&flows, &k, y, model)?.reweighted(state.log_weights().to_vec())?
    } else {
        proposals_current(&forecast, &k, y, model)?
    };
    let aset = scrambled_sobol(n, d + 1, seed::derive(&[qmc_seed, seed::role::QMC_ANALYSIS]))?;
    let analysis = transport_to_mixture(&aset, q_mix.mixture())?;
    let warnings = if cond > crate::filters::CONDITION_WARNING {
        vec![format!("innovation covariance condition estimate {cond:.3e}")]
    } else {
        Vec::new()
    };

    match scheme {
        TqmcScheme::EnkfC | TqmcScheme::EnkfP => {
            let ensemble = WeightedEnsemble::uniform(analysis)?;
            Ok(TqmcOutput { ensemble, raw_log_weights: vec![0.0; n], warnings })
        }
        _ => {
            let raw: Vec<f64> = analysis
                .par_iter()
                .map(|x| log_likelihood(y, x, model) + log_mixture_density(x, &rho) - q_mix.log_mix(x))
                .collect();
            let lw = normalize_log_weights(&raw)?;
            let ensemble = WeightedEnsemble::new(analysis, lw)?;
            Ok(TqmcOutput { ensemble, raw_log_weights: raw, warnings })
        }
    }
}

/// Per-step scramble seed for step `t` of a run.
pub fn step_seed(run_seed: u64, t: usize) -> u64 {
    seed::derive(&[run_seed, seed::role::QMC_STEP, t as u64])
}

/// Builds an iid RNG from a seed; used by baseline comparisons.
pub fn iid_rng(seed: u64) -> crate::Rng64 {
    crate::Rng64::seed_from_u64(seed)
}
