//! Bootstrap particle filter, stochastic EnKF and the importance-weighted
//! EnKF schemes.
//!
//! Every weighted scheme shares the EnKF transport; the schemes differ only
//! in which target and proposal densities enter the weight ratio:
//!
//! | scheme | target | proposal |
//! |---|---|---|
//! | II | p_i = ℓ·π_i | q_i |
//! | MI | p_mix | q_i |
//! | MMstr | p_mix | q_mix |
//!
//! with `_c` (current-ensemble) or `_p` (previous-ensemble) proposals.

use crate::mathcore::{
    empirical_cov, gaussian_noise, log_mixture_density, log_sum_exp, mahalanobis_sq, weighted_empirical_cov,
    GaussianMixture, MathError, SpdMatrix,
};
use crate::models::StateSpaceModel;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

/// Condition estimate above which a gain solve is reported as a warning.
pub const CONDITION_WARNING: f64 = 1e10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FilterError {
    #[error(transparent)]
    Math(#[from] MathError),
    #[error("degenerate proposal: {0}")]
    DegenerateProposal(String),
    #[error("all importance weights are zero")]
    AllWeightsZero,
    #[error("{0} requires a linear observation operator")]
    RequiresLinearObservation(&'static str),
    #[error("previous ensemble must be equally weighted")]
    NotEquallyWeighted,
    #[error("invalid ensemble: {0}")]
    InvalidEnsemble(String),
    #[error("invalid scheme: {0}")]
    InvalidScheme(String),
}

pub type Result<T> = std::result::Result<T, FilterError>;

/// Particles with normalized log weights.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedEnsemble {
    particles: Vec<DVector<f64>>,
    log_weights: Vec<f64>,
}

impl WeightedEnsemble {
    /// Requires `N ≥ 2`, equal particle dimensions and `log Σ w = 0 ± 1e-10`.
    pub fn new(particles: Vec<DVector<f64>>, log_weights: Vec<f64>) -> Result<Self> {
        check_particles(&particles)?;
        if log_weights.len() != particles.len() {
            return Err(FilterError::InvalidEnsemble("weight count differs from particle count".into()));
        }
        if log_weights.iter().any(|w| w.is_nan() || *w == f64::INFINITY) {
            return Err(FilterError::InvalidEnsemble("non-finite weight".into()));
        }
        let total = log_sum_exp(&log_weights);
        if !(total.abs() <= 1e-10) {
            return Err(FilterError::InvalidEnsemble(format!("log weights sum to {total}")));
        }
        Ok(Self { particles, log_weights })
    }

    /// Equal weights `1/N`.
    pub fn uniform(particles: Vec<DVector<f64>>) -> Result<Self> {
        check_particles(&particles)?;
        let lw = vec![-(particles.len() as f64).ln(); particles.len()];
        Ok(Self { particles, log_weights: lw })
    }

    /// Normalizes unnormalized log weights.
    pub fn from_unnormalized(particles: Vec<DVector<f64>>, raw_log: &[f64]) -> Result<Self> {
        check_particles(&particles)?;
        let log_weights = normalize_log_weights(raw_log)?;
        if log_weights.len() != particles.len() {
            return Err(FilterError::InvalidEnsemble("weight count differs from particle count".into()));
        }
        Ok(Self { particles, log_weights })
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.particles[0].len()
    }

    pub fn particles(&self) -> &[DVector<f64>] {
        &self.particles
    }

    pub fn log_weights(&self) -> &[f64] {
        &self.log_weights
    }

    pub fn weights(&self) -> Vec<f64> {
        self.log_weights.iter().map(|w| w.exp()).collect()
    }

    /// Weighted mean `Σ w_i x_i`.
    pub fn mean(&self) -> DVector<f64> {
        let mut m = DVector::zeros(self.dim());
        for (x, lw) in self.particles.iter().zip(&self.log_weights) {
            m.axpy(lw.exp(), x, 1.0);
        }
        m
    }

    /// Weighted mean of `g` over the particles.
    pub fn expectation<G: Fn(&DVector<f64>) -> f64>(&self, g: G) -> f64 {
        self.particles.iter().zip(&self.log_weights).map(|(x, lw)| lw.exp() * g(x)).sum()
    }

    pub fn is_equally_weighted(&self) -> bool {
        let target = -(self.len() as f64).ln();
        self.log_weights.iter().all(|w| (w - target).abs() <= 1e-12)
    }

    pub fn into_parts(self) -> (Vec<DVector<f64>>, Vec<f64>) {
        (self.particles, self.log_weights)
    }
}

fn check_particles(particles: &[DVector<f64>]) -> Result<()> {
    if particles.len() < 2 {
        return Err(FilterError::InvalidEnsemble(format!("need N ≥ 2, got {}", particles.len())));
    }
    let d = particles[0].len();
    if particles.iter().any(|p| p.len() != d) {
        return Err(FilterError::InvalidEnsemble("particles differ in dimension".into()));
    }
    Ok(())
}

/// Subtracts `log Σ exp(raw)`.
pub fn normalize_log_weights(raw_log: &[f64]) -> Result<Vec<f64>> {
    if raw_log.iter().any(|v| v.is_nan()) {
        return Err(FilterError::InvalidEnsemble("NaN log weight".into()));
    }
    let total = log_sum_exp(raw_log);
    if total == f64::NEG_INFINITY {
        return Err(FilterError::AllWeightsZero);
    }
    if !total.is_finite() {
        return Err(FilterError::InvalidEnsemble("infinite log weight".into()));
    }
    Ok(raw_log.iter().map(|v| v - total).collect())
}

/// Prior components `π_i = N(f(x_{t−1}^i), Q)` of the forecast mixture.
#[derive(Debug, Clone)]
pub struct TargetSet {
    prior: GaussianMixture,
}

impl TargetSet {
    /// Equally weighted prior mixture over the given flow images.
    pub fn new(flow_images: Vec<DVector<f64>>, q: SpdMatrix) -> Result<Self> {
        Ok(Self { prior: GaussianMixture::equal_weights_shared(flow_images, q)? })
    }

    /// Prior mixture with arbitrary normalized log weights.
    pub fn weighted(flow_images: Vec<DVector<f64>>, log_weights: Vec<f64>, q: SpdMatrix) -> Result<Self> {
        Ok(Self { prior: GaussianMixture::shared(log_weights, flow_images, q)? })
    }

    pub fn len(&self) -> usize {
        self.prior.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prior.is_empty()
    }

    /// `f(x_{t−1}^i)` for every previous particle.
    pub fn flow_images(&self) -> &[DVector<f64>] {
        self.prior.means()
    }

    /// π_mix.
    pub fn prior_mixture(&self) -> &GaussianMixture {
        &self.prior
    }

    pub fn log_prior_component(&self, i: usize, x: &DVector<f64>) -> f64 {
        self.prior.log_component_density(i, x)
    }

    pub fn log_prior_mix(&self, x: &DVector<f64>) -> f64 {
        log_mixture_density(x, &self.prior)
    }

    /// `log p_i(x) = log ℓ(x) + log π_i(x)`.
    pub fn log_target_component(&self, i: usize, x: &DVector<f64>, y: &DVector<f64>, model: &StateSpaceModel) -> f64 {
        log_likelihood(y, x, model) + self.log_prior_component(i, x)
    }

    /// `log p_mix(x)`.
    pub fn log_target_mix(&self, x: &DVector<f64>, y: &DVector<f64>, model: &StateSpaceModel) -> f64 {
        log_likelihood(y, x, model) + self.log_prior_mix(x)
    }
}

/// Per-particle Gaussian proposals sharing one covariance.
#[derive(Debug, Clone)]
pub struct ProposalSet {
    mixture: GaussianMixture,
    gain: Option<DMatrix<f64>>,
    condition: Option<f64>,
}

impl ProposalSet {
    /// Equally weighted proposals `N(m_i, cov)`.
    pub fn new(means: Vec<DVector<f64>>, cov: SpdMatrix) -> Result<Self> {
        Ok(Self { mixture: GaussianMixture::equal_weights_shared(means, cov)?, gain: None, condition: None })
    }

    /// Attaches the gain that produced the proposal means.
    pub fn with_gain(mut self, gain: DMatrix<f64>, condition: f64) -> Self {
        self.gain = Some(gain);
        self.condition = Some(condition);
        self
    }

    /// Same components, mixture weights replaced by `log_weights`.
    pub fn reweighted(&self, log_weights: Vec<f64>) -> Result<Self> {
        let cov = self.cov().clone();
        let mixture = GaussianMixture::shared(log_weights, self.means().to_vec(), cov)?;
        Ok(Self { mixture, gain: self.gain.clone(), condition: self.condition })
    }

    pub fn len(&self) -> usize {
        self.mixture.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mixture.is_empty()
    }

    pub fn means(&self) -> &[DVector<f64>] {
        self.mixture.means()
    }

    pub fn cov(&self) -> &SpdMatrix {
        self.mixture.shared_cov().expect("proposal mixtures share one covariance")
    }

    pub fn gain(&self) -> Option<&DMatrix<f64>> {
        self.gain.as_ref()
    }

    /// Condition estimate of the innovation covariance used for the gain.
    pub fn condition(&self) -> Option<f64> {
        self.condition
    }

    /// q_mix.
    pub fn mixture(&self) -> &GaussianMixture {
        &self.mixture
    }

    pub fn log_component(&self, i: usize, x: &DVector<f64>) -> f64 {
        self.mixture.log_component_density(i, x)
    }

    pub fn log_mix(&self, x: &DVector<f64>) -> f64 {
        log_mixture_density(x, &self.mixture)
    }
}

/// Weight rule of a scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Bpf,
    Enkf,
    II,
    MI,
    MMstr,
}

/// Which ensemble the proposal densities condition on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Conditioning {
    Current,
    Previous,
    None,
}

/// Which ensemble the Kalman gain is estimated from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GainKind {
    Current,
    Previous,
}

/// Localization mask and inflation factor applied to the forecast covariance
/// before the gain is formed.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CovAdjust {
    pub localization: Option<DMatrix<f64>>,
    pub inflation: Option<f64>,
}

impl CovAdjust {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn is_identity(&self) -> bool {
        self.localization.is_none() && self.inflation.is_none()
    }

    /// `δ² (L ∘ C)`.
    pub fn apply(&self, c: DMatrix<f64>) -> Result<DMatrix<f64>> {
        let mut c = c;
        if let Some(mask) = &self.localization {
            if mask.shape() != c.shape() {
                return Err(FilterError::InvalidScheme(format!(
                    "localization mask is {:?}, covariance is {:?}",
                    mask.shape(),
                    c.shape()
                )));
            }
            c = localized_cov(&c, mask);
        }
        if let Some(delta) = self.inflation {
            c = inflated_cov(&c, delta);
        }
        Ok(c)
    }
}

/// A filtering scheme.
#[derive(Debug, Clone, PartialEq)]
pub struct SchemeSpec {
    pub method: Method,
    pub conditioning: Conditioning,
    /// `None` selects K^p for linear `h` and K^c otherwise.
    pub gain: Option<GainKind>,
    pub adjust: CovAdjust,
}

impl SchemeSpec {
    pub fn bpf() -> Self {
        Self { method: Method::Bpf, conditioning: Conditioning::None, gain: None, adjust: CovAdjust::none() }
    }

    pub fn enkf() -> Self {
        Self { method: Method::Enkf, conditioning: Conditioning::None, gain: None, adjust: CovAdjust::none() }
    }

    pub fn weighted(method: Method, conditioning: Conditioning) -> Self {
        Self { method, conditioning, gain: None, adjust: CovAdjust::none() }
    }

    pub fn with_gain(mut self, gain: GainKind) -> Self {
        self.gain = Some(gain);
        self
    }

    pub fn with_adjust(mut self, adjust: CovAdjust) -> Self {
        self.adjust = adjust;
        self
    }

    /// The six weighted schemes in table order.
    pub fn six_weighted() -> Vec<Self> {
        let mut out = Vec::new();
        for c in [Conditioning::Current, Conditioning::Previous] {
            for m in [Method::II, Method::MI, Method::MMstr] {
                out.push(Self::weighted(m, c));
            }
        }
        out
    }

    /// Gain used on `model` after applying the default rule.
    pub fn effective_gain(&self, model: &StateSpaceModel) -> GainKind {
        self.gain.unwrap_or(if model.linear_obs().is_some() { GainKind::Previous } else { GainKind::Current })
    }

    /// Checks the scheme against the model.
    pub fn validate(&self, model: &StateSpaceModel) -> Result<()> {
        let weighted = matches!(self.method, Method::II | Method::MI | Method::MMstr);
        if weighted && self.conditioning == Conditioning::None {
            return Err(FilterError::InvalidScheme("weighted schemes need a conditioning".into()));
        }
        if !weighted && self.conditioning != Conditioning::None {
            return Err(FilterError::InvalidScheme("BPF and EnKF take no conditioning".into()));
        }
        if self.method != Method::Bpf {
            if self.conditioning == Conditioning::Previous && model.linear_obs().is_none() {
                return Err(FilterError::RequiresLinearObservation("previous-ensemble conditioning"));
            }
            if self.gain == Some(GainKind::Previous) && model.linear_obs().is_none() {
                return Err(FilterError::RequiresLinearObservation("previous-ensemble gain"));
            }
        }
        if let Some(delta) = self.adjust.inflation {
            if !(delta >= 1.0) {
                return Err(FilterError::InvalidScheme(format!("inflation {delta} < 1")));
            }
        }
        if let Some(mask) = &self.adjust.localization {
            if mask.nrows() != model.d() || mask.ncols() != model.d() {
                return Err(FilterError::InvalidScheme("localization mask must be d×d".into()));
            }
        }
        Ok(())
    }

    /// Short tag: `BPF`, `EnKF`, `II_c`, `MMstr_p`, optionally suffixed with
    /// `@Kc` or `@Kp` when the gain is overridden.
    pub fn tag(&self) -> String {
        let base = match (self.method, self.conditioning) {
            (Method::Bpf, _) => "BPF".to_string(),
            (Method::Enkf, _) => "EnKF".to_string(),
            (m, c) => {
                let m = match m {
                    Method::II => "II",
                    Method::MI => "MI",
                    _ => "MMstr",
                };
                let c = if c == Conditioning::Previous { "p" } else { "c" };
                format!("{m}_{c}")
            }
        };
        match self.gain {
            Some(GainKind::Current) if self.method != Method::Bpf => format!("{base}@Kc"),
            Some(GainKind::Previous) if self.method != Method::Bpf => format!("{base}@Kp"),
            _ => base,
        }
    }
}

impl fmt::Display for SchemeSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.tag())
    }
}

impl FromStr for SchemeSpec {
    type Err = FilterError;
    fn from_str(s: &str) -> Result<Self> {
        let (base, gain) = match s.split_once('@') {
            Some((b, "Kc")) => (b, Some(GainKind::Current)),
            Some((b, "Kp")) => (b, Some(GainKind::Previous)),
            Some(_) => return Err(FilterError::InvalidScheme(format!("unknown gain suffix in `{s}`"))),
            None => (s, None),
        };
        let mut spec = match base {
            "BPF" => Self::bpf(),
            "EnKF" => Self::enkf(),
            _ => {
                let (m, c) = base
                    .rsplit_once('_')
                    .ok_or_else(|| FilterError::InvalidScheme(format!("unknown scheme `{s}`")))?;
                let method = match m {
                    "II" => Method::II,
                    "MI" => Method::MI,
                    "MMstr" => Method::MMstr,
                    _ => return Err(FilterError::InvalidScheme(format!("unknown scheme `{s}`"))),
                };
                let cond = match c {
                    "c" => Conditioning::Current,
                    "p" => Conditioning::Previous,
                    _ => return Err(FilterError::InvalidScheme(format!("unknown conditioning in `{s}`"))),
                };
                Self::weighted(method, cond)
            }
        };
        spec.gain = gain;
        Ok(spec)
    }
}

/// `log ℓ(x) = −½ |y − h(x)|²_R`.
pub fn log_likelihood(y: &DVector<f64>, x: &DVector<f64>, model: &StateSpaceModel) -> f64 {
    -0.5 * mahalanobis_sq(y, &model.obs(x), model.r())
}

/// Propagates an equally weighted ensemble: `x̂_i = f(x_i) + η_i`.
///
/// Flow images are computed in parallel; noises are drawn in index order.
pub fn predict<R: Rng + ?Sized>(
    prev: &WeightedEnsemble,
    model: &StateSpaceModel,
    rng: &mut R,
) -> Result<(WeightedEnsemble, TargetSet)> {
    if !prev.is_equally_weighted() {
        return Err(FilterError::NotEquallyWeighted);
    }
    let flows: Vec<DVector<f64>> = prev.particles().par_iter().map(|x| model.flow(x)).collect();
    let forecast: Vec<DVector<f64>> = flows.iter().map(|f| f + gaussian_noise(rng, model.q())).collect();
    let targets = TargetSet::new(flows, model.q().clone())?;
    Ok((WeightedEnsemble::uniform(forecast)?, targets))
}

/// Elementwise product `L ∘ C`.
pub fn localized_cov(c: &DMatrix<f64>, mask: &DMatrix<f64>) -> DMatrix<f64> {
    c.component_mul(mask)
}

/// `δ² C`.
pub fn inflated_cov(c: &DMatrix<f64>, delta: f64) -> DMatrix<f64> {
    c * (delta * delta)
}

fn require_h(model: &StateSpaceModel, what: &'static str) -> Result<DMatrix<f64>> {
    model.linear_obs().cloned().ok_or(FilterError::RequiresLinearObservation(what))
}

/// `K = C_xy C_y⁻¹`, with a condition estimate of `C_y`.
fn solve_gain(cxy: &DMatrix<f64>, cy: DMatrix<f64>) -> Result<(DMatrix<f64>, f64)> {
    let s = SpdMatrix::from_symmetrized(cy)?;
    let k = s.solve(&cxy.transpose()).transpose();
    Ok((k, s.condition_estimate()))
}

/// Gain `K = Ĉ Hᵀ (H Ĉ Hᵀ + R)⁻¹` for a state covariance `Ĉ`.
fn linear_gain(c: &DMatrix<f64>, h: &DMatrix<f64>, model: &StateSpaceModel) -> Result<(DMatrix<f64>, f64)> {
    let cxy = c * h.transpose();
    let cy = h * &cxy + model.r().entries();
    solve_gain(&cxy, cy)
}

/// Current-ensemble gain K^c from forecast particles.
pub fn gain_current(forecast: &[DVector<f64>], model: &StateSpaceModel) -> Result<DMatrix<f64>> {
    Ok(gain_current_adjusted(forecast, model, &CovAdjust::none())?.0)
}

/// [`gain_current`] with localization/inflation; also returns a condition
/// estimate of the innovation covariance.
pub fn gain_current_adjusted(
    forecast: &[DVector<f64>],
    model: &StateSpaceModel,
    adjust: &CovAdjust,
) -> Result<(DMatrix<f64>, f64)> {
    match model.linear_obs() {
        Some(h) => {
            let c = adjust.apply(empirical_cov(forecast, forecast)?)?;
            linear_gain(&c, h, model)
        }
        None => {
            let hx: Vec<DVector<f64>> = forecast.iter().map(|x| model.obs(x)).collect();
            let mut cxy = empirical_cov(forecast, &hx)?;
            let mut chh = empirical_cov(&hx, &hx)?;
            if let Some(mask) = &adjust.localization {
                if mask.shape() != cxy.shape() {
                    return Err(FilterError::InvalidScheme("localization needs m = d for nonlinear h".into()));
                }
                cxy = localized_cov(&cxy, mask);
            }
            if let Some(delta) = adjust.inflation {
                cxy = inflated_cov(&cxy, delta);
                chh = inflated_cov(&chh, delta);
            }
            solve_gain(&cxy, chh + model.r().entries())
        }
    }
}

/// Previous-ensemble gain K^p from the flow images `f(x_{t−1}^i)`.
pub fn gain_previous(flow_images: &[DVector<f64>], model: &StateSpaceModel) -> Result<DMatrix<f64>> {
    Ok(gain_previous_adjusted(flow_images, None, model, &CovAdjust::none())?.0)
}

/// K^p with `Ĉ^{x,p} = Cov(f(x_{t−1})) + Q`, optionally weighted, adjusted
/// and returned with a condition estimate.
pub fn gain_previous_adjusted(
    flow_images: &[DVector<f64>],
    weights: Option<&[f64]>,
    model: &StateSpaceModel,
    adjust: &CovAdjust,
) -> Result<(DMatrix<f64>, f64)> {
    let h = require_h(model, "previous-ensemble gain")?;
    let spread = match weights {
        Some(w) => weighted_empirical_cov(flow_images, w)?,
        None => empirical_cov(flow_images, flow_images)?,
    };
    let c = adjust.apply(spread + model.q().entries())?;
    linear_gain(&c, &h, model)
}

/// `x̃_i = x̂_i + K (y + ε_i − h(x̂_i))`, `ε_i ~ N(0, R)` drawn in index order.
pub fn enkf_update<R: Rng + ?Sized>(
    forecast: &[DVector<f64>],
    k: &DMatrix<f64>,
    y: &DVector<f64>,
    model: &StateSpaceModel,
    rng: &mut R,
) -> Result<WeightedEnsemble> {
    let out = forecast
        .iter()
        .map(|x| {
            let innov = y + gaussian_noise(rng, model.r()) - model.obs(x);
            x + k * innov
        })
        .collect();
    WeightedEnsemble::uniform(out)
}

/// `q_c^i = N(x̂_i + K(y − h(x̂_i)), K R Kᵀ)`.
pub fn proposals_current(
    forecast: &[DVector<f64>],
    k: &DMatrix<f64>,
    y: &DVector<f64>,
    model: &StateSpaceModel,
) -> Result<ProposalSet> {
    if model.m() < model.d() {
        return Err(FilterError::DegenerateProposal(format!(
            "K R Kᵀ has rank at most m = {} < d = {}",
            model.m(),
            model.d()
        )));
    }
    let sigma = k * model.r().entries() * k.transpose();
    let sigma = SpdMatrix::from_symmetrized(sigma).map_err(|_| {
        FilterError::DegenerateProposal(format!(
            "K R Kᵀ is singular (N = {}, d = {})",
            forecast.len(),
            model.d()
        ))
    })?;
    let means = forecast.iter().map(|x| x + k * (y - model.obs(x))).collect();
    ProposalSet::new(means, sigma)
}

/// `q_p^i = N(f_i + K(y − H f_i), (I − KH) Q (I − KH)ᵀ + K R Kᵀ)`.
pub fn proposals_previous(
    flow_images: &[DVector<f64>],
    k: &DMatrix<f64>,
    y: &DVector<f64>,
    model: &StateSpaceModel,
) -> Result<ProposalSet> {
    let h = require_h(model, "previous-ensemble proposal")?;
    let d = model.d();
    let a = DMatrix::identity(d, d) - k * &h;
    let sigma = &a * model.q().entries() * a.transpose() + k * model.r().entries() * k.transpose();
    let sigma = SpdMatrix::from_symmetrized(sigma)
        .map_err(|e| FilterError::DegenerateProposal(format!("previous-ensemble covariance: {e}")))?;
    let means = flow_images.iter().map(|f| f + k * (y - &h * f)).collect();
    ProposalSet::new(means, sigma)
}

/// Normalized and raw log weights.
#[derive(Debug, Clone, PartialEq)]
pub struct SnisWeights {
    pub normalized: Vec<f64>,
    pub raw: Vec<f64>,
}

/// `log v_i = log p̌(x̃_i) − log q̌(x̃_i)` for the given method.
pub fn snis_weights(
    method: Method,
    targets: &TargetSet,
    proposals: &ProposalSet,
    particles: &[DVector<f64>],
    y: &DVector<f64>,
    model: &StateSpaceModel,
) -> Result<SnisWeights> {
    if !matches!(method, Method::II | Method::MI | Method::MMstr) {
        return Err(FilterError::InvalidScheme(format!("{method:?} has no importance weights")));
    }
    let n = particles.len();
    if targets.len() != n || proposals.len() != n {
        return Err(FilterError::InvalidEnsemble("targets, proposals and particles differ in count".into()));
    }
    let raw: Vec<f64> = particles
        .par_iter()
        .enumerate()
        .map(|(i, x)| {
            let ll = log_likelihood(y, x, model);
            let (lp, lq) = match method {
                Method::II => (targets.log_prior_component(i, x), proposals.log_component(i, x)),
                Method::MI => (targets.log_prior_mix(x), proposals.log_component(i, x)),
                _ => (targets.log_prior_mix(x), proposals.log_mix(x)),
            };
            ll + lp - lq
        })
        .collect();
    let normalized = normalize_log_weights(&raw)?;
    Ok(SnisWeights { normalized, raw })
}

/// Cumulative weights by Neumaier summation, last entry clamped to 1.
pub fn cumulative_weights(log_weights: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(log_weights.len());
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for lw in log_weights {
        let w = lw.exp();
        let t = sum + w;
        if sum.abs() >= w.abs() {
            comp += (sum - t) + w;
        } else {
            comp += (w - t) + sum;
        }
        sum = t;
        out.push((sum + comp).min(1.0));
    }
    if let Some(last) = out.last_mut() {
        *last = 1.0;
    }
    out
}

/// Systematic resampling indices for offset `u1 ∈ (0, 1/N]`:
/// `ind(i) = min{j : c_j ≥ u1 + (i−1)/N}`, found in one left-to-right scan.
pub fn systematic_indices(log_weights: &[f64], u1: f64) -> Vec<usize> {
    let n = log_weights.len();
    let cum = cumulative_weights(log_weights);
    let mut out = Vec::with_capacity(n);
    let mut j = 0;
    for i in 0..n {
        let u = u1 + i as f64 / n as f64;
        while j + 1 < n && cum[j] < u {
            j += 1;
        }
        out.push(j);
    }
    out
}

/// Systematic resampling with `u1 ~ U(0, 1/N]`.
pub fn systematic_resample<R: Rng + ?Sized>(ens: &WeightedEnsemble, rng: &mut R) -> WeightedEnsemble {
    let n = ens.len();
    let u1 = (1.0 - rng.random::<f64>()) / n as f64;
    let idx = systematic_indices(ens.log_weights(), u1);
    let particles = idx.iter().map(|&j| ens.particles()[j].clone()).collect();
    WeightedEnsemble::uniform(particles).expect("size preserved")
}

/// Result of one assimilation step.
#[derive(Debug, Clone)]
pub struct StepOutput {
    /// Weighted analysis ensemble before resampling.
    pub analysis: WeightedEnsemble,
    /// Equally weighted ensemble carried to the next step.
    pub posterior: WeightedEnsemble,
    /// Unnormalized log weights `log v_i` (zeros for the EnKF).
    pub raw_log_weights: Vec<f64>,
    pub warnings: Vec<String>,
}

/// Everything a proposal function may condition on.
pub struct ProposalContext<'a> {
    pub prev: &'a WeightedEnsemble,
    pub forecast: &'a WeightedEnsemble,
    pub targets: &'a TargetSet,
    pub y: &'a DVector<f64>,
    pub model: &'a StateSpaceModel,
}

/// A rule producing one Gaussian proposal per particle.
///
/// Closures `Fn(&ProposalContext) -> Result<ProposalSet>` implement this
/// trait and draw `x̃_i = m_i + L z_i`.
pub trait ProposalFunction {
    fn proposals(&self, ctx: &ProposalContext<'_>) -> Result<ProposalSet>;

    /// One draw from each proposal component, in index order.
    fn draw<R: Rng + ?Sized>(
        &self,
        _ctx: &ProposalContext<'_>,
        set: &ProposalSet,
        rng: &mut R,
    ) -> Result<Vec<DVector<f64>>> {
        Ok(set.means().iter().map(|m| m + gaussian_noise(rng, set.cov())).collect())
    }
}

impl<F> ProposalFunction for F
where
    F: Fn(&ProposalContext<'_>) -> Result<ProposalSet>,
{
    fn proposals(&self, ctx: &ProposalContext<'_>) -> Result<ProposalSet> {
        self(ctx)
    }
}

/// The EnKF transport viewed as a proposal.
#[derive(Debug, Clone)]
pub struct EnkfProposal {
    pub conditioning: Conditioning,
    pub gain: GainKind,
    pub adjust: CovAdjust,
}

impl EnkfProposal {
    pub fn for_scheme(scheme: &SchemeSpec, model: &StateSpaceModel) -> Self {
        Self { conditioning: scheme.conditioning, gain: scheme.effective_gain(model), adjust: scheme.adjust.clone() }
    }
}

fn gain_for(kind: GainKind, ctx: &ProposalContext<'_>, adjust: &CovAdjust) -> Result<(DMatrix<f64>, f64)> {
    match kind {
        GainKind::Current => gain_current_adjusted(ctx.forecast.particles(), ctx.model, adjust),
        GainKind::Previous => gain_previous_adjusted(ctx.targets.flow_images(), None, ctx.model, adjust),
    }
}

impl ProposalFunction for EnkfProposal {
    fn proposals(&self, ctx: &ProposalContext<'_>) -> Result<ProposalSet> {
        let (k, cond) = gain_for(self.gain, ctx, &self.adjust)?;
        let set = match self.conditioning {
            Conditioning::Previous => proposals_previous(ctx.targets.flow_images(), &k, ctx.y, ctx.model)?,
            _ => proposals_current(ctx.forecast.particles(), &k, ctx.y, ctx.model)?,
        };
        Ok(set.with_gain(k, cond))
    }

    fn draw<R: Rng + ?Sized>(
        &self,
        ctx: &ProposalContext<'_>,
        set: &ProposalSet,
        rng: &mut R,
    ) -> Result<Vec<DVector<f64>>> {
        let k = set.gain().expect("EnKF proposals carry their gain");
        Ok(enkf_update(ctx.forecast.particles(), k, ctx.y, ctx.model, rng)?.into_parts().0)
    }
}

/// Proposes from the prior components `π_i`; the forecast particles are
/// exact draws, so no extra randomness is consumed.
#[derive(Debug, Clone, Copy, Default)]
pub struct PriorProposal;

impl ProposalFunction for PriorProposal {
    fn proposals(&self, ctx: &ProposalContext<'_>) -> Result<ProposalSet> {
        ProposalSet::new(ctx.targets.flow_images().to_vec(), ctx.model.q().clone())
    }

    fn draw<R: Rng + ?Sized>(
        &self,
        ctx: &ProposalContext<'_>,
        _set: &ProposalSet,
        _rng: &mut R,
    ) -> Result<Vec<DVector<f64>>> {
        Ok(ctx.forecast.particles().to_vec())
    }
}

fn condition_warning(cond: Option<f64>) -> Vec<String> {
    match cond {
        Some(c) if c > CONDITION_WARNING => vec![format!("innovation covariance condition estimate {c:.3e}")],
        _ => Vec::new(),
    }
}

/// Predict, propose, draw, reweight and resample with an arbitrary
/// proposal function.
pub fn generic_filter_step<P: ProposalFunction, R: Rng + ?Sized>(
    proposal_fn: &P,
    flavor: Method,
    prev: &WeightedEnsemble,
    y: &DVector<f64>,
    model: &StateSpaceModel,
    rng: &mut R,
) -> Result<StepOutput> {
    if !matches!(flavor, Method::II | Method::MI | Method::MMstr) {
        return Err(FilterError::InvalidScheme(format!("{flavor:?} is not a weight flavor")));
    }
    let (forecast, targets) = predict(prev, model, rng)?;
    let ctx = ProposalContext { prev, forecast: &forecast, targets: &targets, y, model };
    let set = proposal_fn.proposals(&ctx)?;
    if set.len() != prev.len() {
        return Err(FilterError::InvalidEnsemble("proposal count differs from ensemble size".into()));
    }
    let particles = proposal_fn.draw(&ctx, &set, rng)?;
    let w = snis_weights(flavor, &targets, &set, &particles, y, model)?;
    let analysis = WeightedEnsemble { particles, log_weights: w.normalized };
    let posterior = systematic_resample(&analysis, rng);
    Ok(StepOutput { analysis, posterior, raw_log_weights: w.raw, warnings: condition_warning(set.condition()) })
}

/// One step of BPF, EnKF or a weighted EnKF scheme.
pub fn filter_step<R: Rng + ?Sized>(
    scheme: &SchemeSpec,
    prev: &WeightedEnsemble,
    y: &DVector<f64>,
    model: &StateSpaceModel,
    rng: &mut R,
) -> Result<StepOutput> {
    scheme.validate(model)?;
    match scheme.method {
        Method::Bpf => {
            let (forecast, _) = predict(prev, model, rng)?;
            let particles = forecast.into_parts().0;
            let raw: Vec<f64> = particles.par_iter().map(|x| log_likelihood(y, x, model)).collect();
            let analysis = WeightedEnsemble::from_unnormalized(particles, &raw)?;
            let posterior = systematic_resample(&analysis, rng);
            Ok(StepOutput { analysis, posterior, raw_log_weights: raw, warnings: Vec::new() })
        }
        Method::Enkf => {
            let (forecast, targets) = predict(prev, model, rng)?;
            let ctx = ProposalContext { prev, forecast: &forecast, targets: &targets, y, model };
            let (k, cond) = gain_for(scheme.effective_gain(model), &ctx, &scheme.adjust)?;
            let analysis = enkf_update(forecast.particles(), &k, y, model, rng)?;
            let raw = vec![0.0; analysis.len()];
            Ok(StepOutput { posterior: analysis.clone(), analysis, raw_log_weights: raw, warnings: condition_warning(Some(cond)) })
        }
        flavor => generic_filter_step(&EnkfProposal::for_scheme(scheme, model), flavor, prev, y, model, rng),
    }
}

/// `N` iid draws from the model's initial law, equally weighted.
pub fn initial_ensemble<R: Rng + ?Sized>(model: &StateSpaceModel, n: usize, rng: &mut R) -> Result<WeightedEnsemble> {
    let particles = (0..n)
        .map(|_| crate::mathcore::sample_gaussian(rng, model.prior_mean(), model.prior_cov()))
        .collect();
    WeightedEnsemble::uniform(particles)
}
