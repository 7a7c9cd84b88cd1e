//! Benchmark state-space models, their RK4 flows and synthetic data.

use crate::mathcore::{sample_gaussian, gaussian_noise, MathError, SpdMatrix};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Math(#[from] MathError),
    #[error("unknown benchmark name `{0}`")]
    UnknownBenchmark(String),
    #[error("unknown observation kind `{0}`")]
    UnknownObservation(String),
    #[error("invalid model: {0}")]
    Invalid(String),
    #[error("trajectory csv: {0}")]
    Csv(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Drift dynamics integrated over one assimilation window.
#[derive(Debug, Clone, PartialEq)]
pub enum Dynamics {
    /// Lotka–Volterra in log coordinates.
    LotkaVolterra { alpha: f64 },
    Lorenz63 { sigma: f64, rho: f64, beta: f64 },
    Lorenz96 { forcing: f64 },
    /// `f(x) = A x` applied once per window, no integration.
    Linear(DMatrix<f64>),
}

/// Observation operator `h`.
#[derive(Debug, Clone, PartialEq)]
pub enum Observation {
    Linear(DMatrix<f64>),
    /// `h(x)_j = arctan(γ x_j / 20)`.
    Arctan { gamma: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Benchmark {
    LotkaVolterra,
    Lorenz63,
    Lorenz96,
}

impl FromStr for Benchmark {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lotka_volterra" => Ok(Self::LotkaVolterra),
            "lorenz63" => Ok(Self::Lorenz63),
            "lorenz96" => Ok(Self::Lorenz96),
            other => Err(ModelError::UnknownBenchmark(other.into())),
        }
    }
}

impl fmt::Display for Benchmark {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::LotkaVolterra => "lotka_volterra",
            Self::Lorenz63 => "lorenz63",
            Self::Lorenz96 => "lorenz96",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ObsKind {
    Linear,
    Arctan,
}

impl FromStr for ObsKind {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Self::Linear),
            "arctan" => Ok(Self::Arctan),
            other => Err(ModelError::UnknownObservation(other.into())),
        }
    }
}

impl fmt::Display for ObsKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Linear => "linear",
            Self::Arctan => "arctan",
        })
    }
}

/// `x_t = f(x_{t−1}) + η_t`, `y_t = h(x_t) + ε_t` with Gaussian noises and
/// Gaussian initial law.
#[derive(Debug, Clone)]
pub struct StateSpaceModel {
    pub name: String,
    dynamics: Dynamics,
    window: f64,
    substeps: usize,
    observation: Observation,
    q: SpdMatrix,
    r: SpdMatrix,
    prior_mean: DVector<f64>,
    prior_cov: SpdMatrix,
    gamma: f64,
}

impl StateSpaceModel {
    /// Assembles a model and checks all dimensions.
    ///
    /// # Arguments
    /// * `window` - total integration time Δτ of one step
    /// * `substeps` - fixed RK4 substeps per window
    /// * `gamma` - scale γ used by the test integrand
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: impl Into<String>,
        dynamics: Dynamics,
        window: f64,
        substeps: usize,
        observation: Observation,
        q: SpdMatrix,
        r: SpdMatrix,
        prior_mean: DVector<f64>,
        prior_cov: SpdMatrix,
        gamma: f64,
    ) -> Result<Self> {
        let d = prior_mean.len();
        let check = |what: &str, got: usize, want: usize| {
            if got == want {
                Ok(())
            } else {
                Err(ModelError::Invalid(format!("{what} has dimension {got}, expected {want}")))
            }
        };
        check("Q", q.dim(), d)?;
        check("prior covariance", prior_cov.dim(), d)?;
        let m = match &observation {
            Observation::Linear(h) => {
                check("H columns", h.ncols(), d)?;
                h.nrows()
            }
            Observation::Arctan { .. } => d,
        };
        check("R", r.dim(), m)?;
        match &dynamics {
            Dynamics::LotkaVolterra { .. } => check("Lotka–Volterra state", d, 2)?,
            Dynamics::Lorenz63 { .. } => check("Lorenz-63 state", d, 3)?,
            Dynamics::Lorenz96 { .. } => {
                if d < 4 {
                    return Err(ModelError::Invalid("Lorenz-96 needs d ≥ 4".into()));
                }
            }
            Dynamics::Linear(a) => {
                check("A rows", a.nrows(), d)?;
                check("A columns", a.ncols(), d)?;
            }
        }
        if substeps == 0 {
            return Err(ModelError::Invalid("substeps must be positive".into()));
        }
        Ok(Self {
            name: name.into(),
            dynamics,
            window,
            substeps,
            observation,
            q,
            r,
            prior_mean,
            prior_cov,
            gamma,
        })
    }

    /// Linear-Gaussian model `x_t = A x_{t−1} + η`, `y_t = H x_t + ε`.
    pub fn linear_gaussian(
        a: DMatrix<f64>,
        h: DMatrix<f64>,
        q: SpdMatrix,
        r: SpdMatrix,
        prior_mean: DVector<f64>,
        prior_cov: SpdMatrix,
    ) -> Result<Self> {
        Self::new("linear_gaussian", Dynamics::Linear(a), 1.0, 1, Observation::Linear(h), q, r, prior_mean, prior_cov, 1.0)
    }

    /// State dimension `d`.
    pub fn d(&self) -> usize {
        self.prior_mean.len()
    }

    /// Observation dimension `m`.
    pub fn m(&self) -> usize {
        self.r.dim()
    }

    pub fn dynamics(&self) -> &Dynamics {
        &self.dynamics
    }

    pub fn observation(&self) -> &Observation {
        &self.observation
    }

    pub fn window(&self) -> f64 {
        self.window
    }

    pub fn substeps(&self) -> usize {
        self.substeps
    }

    /// Replaces the number of RK4 substeps.
    pub fn with_substeps(mut self, substeps: usize) -> Self {
        assert!(substeps > 0);
        self.substeps = substeps;
        self
    }

    pub fn q(&self) -> &SpdMatrix {
        &self.q
    }

    pub fn r(&self) -> &SpdMatrix {
        &self.r
    }

    pub fn prior_mean(&self) -> &DVector<f64> {
        &self.prior_mean
    }

    pub fn prior_cov(&self) -> &SpdMatrix {
        &self.prior_cov
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// `H` when the observation map is linear.
    pub fn linear_obs(&self) -> Option<&DMatrix<f64>> {
        match &self.observation {
            Observation::Linear(h) => Some(h),
            Observation::Arctan { .. } => None,
        }
    }

    /// The drift `f = Φ^{Δτ}`.
    pub fn flow(&self, x: &DVector<f64>) -> DVector<f64> {
        let (t, n) = (self.window, self.substeps);
        match &self.dynamics {
            Dynamics::LotkaVolterra { alpha } => rk4_flow(|z| lotka_volterra_rhs(z, *alpha), x, t, n),
            Dynamics::Lorenz63 { sigma, rho, beta } => {
                rk4_flow(|z| lorenz63_rhs_with(z, *sigma, *rho, *beta), x, t, n)
            }
            Dynamics::Lorenz96 { forcing } => rk4_flow(|z| lorenz96_rhs(z, *forcing), x, t, n),
            Dynamics::Linear(a) => a * x,
        }
    }

    /// The observation map `h`.
    pub fn obs(&self, x: &DVector<f64>) -> DVector<f64> {
        match &self.observation {
            Observation::Linear(h) => h * x,
            Observation::Arctan { gamma } => obs_arctan(x, *gamma),
        }
    }

    /// Short parameter summary used in manifests.
    pub fn describe(&self) -> Vec<(String, String)> {
        let mut out = vec![
            ("name".to_string(), self.name.clone()),
            ("d".to_string(), self.d().to_string()),
            ("m".to_string(), self.m().to_string()),
            ("window".to_string(), self.window.to_string()),
            ("substeps".to_string(), self.substeps.to_string()),
            ("gamma".to_string(), self.gamma.to_string()),
            ("q_diag".to_string(), format!("{:?}", self.q.entries().diagonal().as_slice())),
            ("r_diag".to_string(), format!("{:?}", self.r.entries().diagonal().as_slice())),
            ("prior_mean".to_string(), format!("{:?}", self.prior_mean.as_slice())),
        ];
        out.push((
            "observation".to_string(),
            match &self.observation {
                Observation::Linear(_) => "linear".to_string(),
                Observation::Arctan { gamma } => format!("arctan(gamma={gamma})"),
            },
        ));
        out
    }
}

/// Integrates `ż = rhs(z)` with classical fixed-step RK4.
pub fn rk4_flow<F>(rhs: F, x0: &DVector<f64>, total_time: f64, substeps: usize) -> DVector<f64>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let h = total_time / substeps as f64;
    let mut x = x0.clone();
    for _ in 0..substeps {
        let k1 = rhs(&x);
        let k2 = rhs(&(&x + &k1 * (0.5 * h)));
        let k3 = rhs(&(&x + &k2 * (0.5 * h)));
        let k4 = rhs(&(&x + &k3 * h));
        x += (k1 + (k2 + k3) * 2.0 + k4) * (h / 6.0);
    }
    x
}

/// `(1 − e^v, α(e^u − 1))` for `z = (u, v)`.
pub fn lotka_volterra_rhs(z: &DVector<f64>, alpha: f64) -> DVector<f64> {
    DVector::from_vec(vec![1.0 - z[1].exp(), alpha * (z[0].exp() - 1.0)])
}

/// Lorenz-63 with σ = 10, ρ = 28, β = 8/3.
pub fn lorenz63_rhs(z: &DVector<f64>) -> DVector<f64> {
    lorenz63_rhs_with(z, 10.0, 28.0, 8.0 / 3.0)
}

fn lorenz63_rhs_with(z: &DVector<f64>, sigma: f64, rho: f64, beta: f64) -> DVector<f64> {
    DVector::from_vec(vec![
        sigma * (z[1] - z[0]),
        z[0] * (rho - z[2]) - z[1],
        z[0] * z[1] - beta * z[2],
    ])
}

/// `ż_j = (z_{j+1} − z_{j−2}) z_{j−1} − z_j + F` with cyclic indices.
pub fn lorenz96_rhs(z: &DVector<f64>, forcing: f64) -> DVector<f64> {
    let d = z.len();
    DVector::from_fn(d, |j, _| {
        let p1 = z[(j + 1) % d];
        let m1 = z[(j + d - 1) % d];
        let m2 = z[(j + d - 2) % d];
        (p1 - m2) * m1 - z[j] + forcing
    })
}

/// Componentwise `arctan(γ x / 20)`.
pub fn obs_arctan(x: &DVector<f64>, gamma: f64) -> DVector<f64> {
    x.map(|v| (gamma * v / 20.0).atan())
}

/// `g(x) = sin(4γ Σ_j x_j)`.
pub fn test_integrand(x: &DVector<f64>, gamma: f64) -> f64 {
    (4.0 * gamma * x.sum()).sin()
}

/// One of the three benchmark configurations.
///
/// | system | m0 | Δτ | γ | d | RK4 substeps |
/// |---|---|---|---|---|---|
/// | Lotka–Volterra | (log 1.25, log 0.66) | 5 | 20 | 2 | 500 |
/// | Lorenz-63 | (0, 0, 22) | 2 | 1 | 3 | 200 |
/// | Lorenz-96 | 0 | 0.5 | 4 | 40 | 50 |
///
/// Σ0 = Q = γ⁻² I. Linear observations use H = I and R = (10γ)⁻² I,
/// arctan observations use R = 1e-4 I.
pub fn build_benchmark(name: Benchmark, obs_kind: ObsKind) -> StateSpaceModel {
    let (dynamics, m0, window, gamma, substeps) = match name {
        Benchmark::LotkaVolterra => (
            Dynamics::LotkaVolterra { alpha: 1.0 },
            DVector::from_vec(vec![1.25f64.ln(), 0.66f64.ln()]),
            5.0,
            20.0f64,
            500,
        ),
        Benchmark::Lorenz63 => (
            Dynamics::Lorenz63 { sigma: 10.0, rho: 28.0, beta: 8.0 / 3.0 },
            DVector::from_vec(vec![0.0, 0.0, 22.0]),
            2.0,
            1.0,
            200,
        ),
        Benchmark::Lorenz96 => (Dynamics::Lorenz96 { forcing: 8.0 }, DVector::zeros(40), 0.5, 4.0, 50),
    };
    let d = m0.len();
    let q = SpdMatrix::scaled_identity(d, gamma.powi(-2));
    let (observation, r) = match obs_kind {
        ObsKind::Linear => (
            Observation::Linear(DMatrix::identity(d, d)),
            SpdMatrix::scaled_identity(d, (10.0 * gamma).powi(-2)),
        ),
        ObsKind::Arctan => (Observation::Arctan { gamma }, SpdMatrix::scaled_identity(d, 1e-4)),
    };
    StateSpaceModel::new(
        format!("{name}-{obs_kind}"),
        dynamics,
        window,
        substeps,
        observation,
        q.clone(),
        r,
        m0,
        q,
        gamma,
    )
    .expect("benchmark parameters are consistent")
}

/// Hidden states `x_0..x_T` and observations `y_1..y_T`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<DVector<f64>>,
    pub observations: Vec<DVector<f64>>,
}

impl Trajectory {
    pub fn horizon(&self) -> usize {
        self.observations.len()
    }

    /// CSV with header `t,x_1..x_d,y_1..y_m`; the `y` cells are empty at `t = 0`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let d = self.states[0].len();
        let m = self.observations.first().map_or(0, |y| y.len());
        let mut wr = csv::Writer::from_writer(w);
        let mut header = vec!["t".to_string()];
        header.extend((1..=d).map(|j| format!("x_{j}")));
        header.extend((1..=m).map(|j| format!("y_{j}")));
        wr.write_record(&header).map_err(|e| ModelError::Csv(e.to_string()))?;
        for (t, x) in self.states.iter().enumerate() {
            let mut row = vec![t.to_string()];
            row.extend(x.iter().map(|v| v.to_string()));
            if t == 0 {
                row.extend(std::iter::repeat_n(String::new(), m));
            } else {
                row.extend(self.observations[t - 1].iter().map(|v| v.to_string()));
            }
            wr.write_record(&row).map_err(|e| ModelError::Csv(e.to_string()))?;
        }
        wr.flush()?;
        Ok(())
    }

    /// Parses the format produced by [`Trajectory::write_csv`].
    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(r);
        let header = rd.headers().map_err(|e| ModelError::Csv(e.to_string()))?.clone();
        let d = header.iter().filter(|h| h.starts_with("x_")).count();
        let m = header.iter().filter(|h| h.starts_with("y_")).count();
        if header.len() != 1 + d + m || header.get(0) != Some("t") {
            return Err(ModelError::Csv("unexpected header".into()));
        }
        let parse = |s: &str| s.parse::<f64>().map_err(|e| ModelError::Csv(format!("bad number `{s}`: {e}")));
        let mut states = Vec::new();
        let mut observations = Vec::new();
        for (row_idx, rec) in rd.records().enumerate() {
            let rec = rec.map_err(|e| ModelError::Csv(e.to_string()))?;
            let t: usize = rec[0].parse().map_err(|_| ModelError::Csv(format!("bad t in row {row_idx}")))?;
            if t != row_idx {
                return Err(ModelError::Csv(format!("row {row_idx} has t = {t}")));
            }
            let x: Vec<f64> = (1..=d).map(|j| parse(&rec[j])).collect::<Result<_>>()?;
            states.push(DVector::from_vec(x));
            if t > 0 {
                let y: Vec<f64> = (1..=m).map(|j| parse(&rec[d + j])).collect::<Result<_>>()?;
                observations.push(DVector::from_vec(y));
            }
        }
        if states.is_empty() {
            return Err(ModelError::Csv("no rows".into()));
        }
        Ok(Self { states, observations })
    }
}

/// Draws `x_0 ~ p0` and runs the stochastic model for `horizon` steps.
pub fn simulate_truth<R: Rng + ?Sized>(model: &StateSpaceModel, horizon: usize, rng: &mut R) -> Trajectory {
    let mut states = Vec::with_capacity(horizon + 1);
    let mut observations = Vec::with_capacity(horizon);
    states.push(sample_gaussian(rng, model.prior_mean(), model.prior_cov()));
    for t in 1..=horizon {
        let x = model.flow(&states[t - 1]) + gaussian_noise(rng, model.q());
        let y = model.obs(&x) + gaussian_noise(rng, model.r());
        states.push(x);
        observations.push(y);
    }
    Trajectory { states, observations }
}
