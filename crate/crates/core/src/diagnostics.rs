//! Accuracy and degeneracy measures for weighted ensembles.

use crate::filters::WeightedEnsemble;
use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiagnosticsError {
    #[error("median pairwise distance is zero")]
    ZeroBandwidth,
    #[error("raw weights have zero (or non-finite) mean")]
    ZeroMeanWeight,
    #[error("need at least {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("invalid bandwidth {0}")]
    InvalidBandwidth(f64),
}

pub type Result<T> = std::result::Result<T, DiagnosticsError>;

/// Gaussian kernel `exp(−‖x−y‖²/(2ℓ²))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelSpec {
    bandwidth_sq: f64,
}

impl KernelSpec {
    pub fn new(bandwidth_sq: f64) -> Result<Self> {
        if bandwidth_sq > 0.0 && bandwidth_sq.is_finite() {
            Ok(Self { bandwidth_sq })
        } else {
            Err(DiagnosticsError::InvalidBandwidth(bandwidth_sq))
        }
    }

    pub fn bandwidth_sq(&self) -> f64 {
        self.bandwidth_sq
    }

    pub fn eval(&self, x: &DVector<f64>, y: &DVector<f64>) -> f64 {
        (-sq_dist(x, y) / (2.0 * self.bandwidth_sq)).exp()
    }
}

fn sq_dist(x: &DVector<f64>, y: &DVector<f64>) -> f64 {
    x.iter().zip(y.iter()).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// `|E_ens[g] − E_ref[g]|` under the normalized weights.
pub fn mae<G: Fn(&DVector<f64>) -> f64>(ens: &WeightedEnsemble, reference: &WeightedEnsemble, g: G) -> f64 {
    (ens.expectation(&g) - reference.expectation(&g)).abs()
}

fn for_each_pair<F: FnMut(f64)>(pts: &[DVector<f64>], mut f: F) {
    for i in 0..pts.len() {
        for j in i + 1..pts.len() {
            f(sq_dist(&pts[i], &pts[j]));
        }
    }
}

const DIRECT_PAIRS: usize = 1 << 22;
const BUCKETS: usize = 1 << 16;

/// Median of the `N(N−1)/2` pairwise squared distances (two middle values
/// averaged when the pair count is even). Exact for any `N`; large inputs
/// use a bucketed selection instead of materializing every pair.
pub fn median_pairwise_sq_dist(pts: &[DVector<f64>]) -> Result<f64> {
    let n = pts.len();
    if n < 2 {
        return Err(DiagnosticsError::TooFewPoints { needed: 2, got: n });
    }
    let pairs = n * (n - 1) / 2;
    let hi_rank = pairs / 2;
    let lo_rank = if pairs.is_multiple_of(2) { hi_rank - 1 } else { hi_rank };
    if pairs <= DIRECT_PAIRS {
        let mut all = Vec::with_capacity(pairs);
        for_each_pair(pts, |v| all.push(v));
        all.sort_unstable_by(f64::total_cmp);
        return Ok(0.5 * (all[lo_rank] + all[hi_rank]));
    }
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for_each_pair(pts, |v| {
        lo = lo.min(v);
        hi = hi.max(v);
    });
    if hi == lo {
        return Ok(lo);
    }
    let bucket = |v: f64| (((v - lo) / (hi - lo) * BUCKETS as f64) as usize).min(BUCKETS - 1);
    let mut counts = vec![0usize; BUCKETS];
    for_each_pair(pts, |v| counts[bucket(v)] += 1);
    let locate = |rank: usize| {
        let mut acc = 0;
        for (b, c) in counts.iter().enumerate() {
            if acc + c > rank {
                return (b, acc);
            }
            acc += c;
        }
        unreachable!("rank below pair count")
    };
    let (b_lo, before) = locate(lo_rank);
    let (b_hi, _) = locate(hi_rank);
    let mut inside = Vec::new();
    for_each_pair(pts, |v| {
        let b = bucket(v);
        if b >= b_lo && b <= b_hi {
            inside.push(v);
        }
    });
    inside.sort_unstable_by(f64::total_cmp);
    Ok(0.5 * (inside[lo_rank - before] + inside[hi_rank - before]))
}

/// Median-heuristic bandwidth `ℓ² = median‖x_i − x_j‖² / ln N_ref`, from
/// the reference particles alone.
pub fn median_bandwidth(reference: &[DVector<f64>]) -> Result<KernelSpec> {
    let med = median_pairwise_sq_dist(reference)?;
    if med <= 0.0 {
        return Err(DiagnosticsError::ZeroBandwidth);
    }
    KernelSpec::new(med / (reference.len() as f64).ln())
}

/// `Σ_i Σ_j a_i b_j k(x_i, y_j)`.
fn cross_term(xs: &[DVector<f64>], a: &[f64], ys: &[DVector<f64>], b: &[f64], k: &KernelSpec) -> f64 {
    let rows: Vec<f64> = xs
        .par_iter()
        .zip(a.par_iter())
        .map(|(x, ai)| ai * ys.iter().zip(b).map(|(y, bj)| bj * k.eval(x, y)).sum::<f64>())
        .collect();
    rows.iter().sum()
}

/// `Σ_i Σ_j a_i a_j k(x_i, x_j)` using symmetry.
fn self_term(xs: &[DVector<f64>], a: &[f64], k: &KernelSpec) -> f64 {
    let rows: Vec<f64> = (0..xs.len())
        .into_par_iter()
        .map(|i| {
            let off: f64 = (i + 1..xs.len()).map(|j| a[j] * k.eval(&xs[i], &xs[j])).sum();
            a[i] * (a[i] + 2.0 * off)
        })
        .collect();
    rows.iter().sum()
}

/// Squared MMD in the biased (V-statistic) form, diagonal terms included.
/// May be slightly negative from rounding; see [`clamp_mmd`].
pub fn mmd_sq(ens: &WeightedEnsemble, reference: &WeightedEnsemble, kernel: &KernelSpec) -> f64 {
    MmdReference::new(reference, *kernel).mmd_sq(ens)
}

/// Reference side of the MMD with its self-interaction term cached.
#[derive(Debug, Clone)]
pub struct MmdReference {
    points: Vec<DVector<f64>>,
    weights: Vec<f64>,
    kernel: KernelSpec,
    self_term: f64,
}

impl MmdReference {
    pub fn new(reference: &WeightedEnsemble, kernel: KernelSpec) -> Self {
        let points = reference.particles().to_vec();
        let weights = reference.weights();
        let self_term = self_term(&points, &weights, &kernel);
        Self { points, weights, kernel, self_term }
    }

    pub fn kernel(&self) -> &KernelSpec {
        &self.kernel
    }

    pub fn mmd_sq(&self, ens: &WeightedEnsemble) -> f64 {
        let w = ens.weights();
        let xx = self_term(ens.particles(), &w, &self.kernel);
        let xr = cross_term(ens.particles(), &w, &self.points, &self.weights, &self.kernel);
        xx + self.self_term - 2.0 * xr
    }
}

/// Values in `[−1e-9, 0)` are rounded to zero and flagged; anything lower
/// is returned unchanged (and flagged).
pub fn clamp_mmd(v: f64) -> (f64, bool) {
    if v >= 0.0 {
        (v, false)
    } else if v >= -1e-9 {
        (0.0, true)
    } else {
        (v, true)
    }
}

/// `1/Σ w²` for normalized weights.
pub fn ess(weights: &[f64]) -> f64 {
    1.0 / weights.iter().map(|w| w * w).sum::<f64>()
}

/// [`ess`] from normalized log weights.
pub fn ess_from_log(log_weights: &[f64]) -> f64 {
    let w: Vec<f64> = log_weights.iter().map(|l| l.exp()).collect();
    ess(&w)
}

/// Log of the arithmetic mean of `exp(raw_log)`.
pub fn log_mean_weight(raw_log: &[f64]) -> f64 {
    crate::mathcore::log_sum_exp(raw_log) - (raw_log.len() as f64).ln()
}

/// Sample variance (divisor `N−1`) of `v_i / Ẑ`, with `v_i = exp(raw_log_i)`
/// and `Ẑ = exp(log_z)`.
pub fn weight_cv_sq(raw_log: &[f64], log_z: f64) -> Result<f64> {
    let n = raw_log.len();
    if n < 2 {
        return Err(DiagnosticsError::TooFewPoints { needed: 2, got: n });
    }
    if !log_z.is_finite() {
        return Err(DiagnosticsError::ZeroMeanWeight);
    }
    let r: Vec<f64> = raw_log.iter().map(|l| (l - log_z).exp()).collect();
    let mean = r.iter().sum::<f64>() / n as f64;
    Ok(r.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64)
}

/// [`weight_cv_sq`] with `Ẑ` set to the empirical mean of the raw weights.
pub fn weight_cv_sq_empirical(raw_log: &[f64]) -> Result<f64> {
    weight_cv_sq(raw_log, log_mean_weight(raw_log))
}

/// One row of a sweep. Failed runs leave the metric cells empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub method: String,
    #[serde(rename = "N")]
    pub n: usize,
    pub t: usize,
    pub rep: usize,
    pub mae: Option<f64>,
    pub mmd_sq: Option<f64>,
    pub ess: Option<f64>,
    pub weight_cv_sq: Option<f64>,
    pub wall_ms: f64,
}
