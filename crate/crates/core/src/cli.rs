//! Experiment orchestration: datasets, reference runs, sweeps and reports.
//!
//! An output directory holds
//!
//! ```text
//! trajectory.csv        states and observations
//! manifest.toml         seed, mix function, model parameters, sha256 of trajectory.csv
//! reference/t{t}.csv    log_weight,x_1..x_d of the reference ensemble at step t
//! reference/manifest.toml
//! runs.csv              method,N,t,rep,mae,mmd_sq,ess,weight_cv_sq,wall_ms
//! failures.csv          method,N,rep,t,error
//! report/               {mae,mmd_sq}_t{t}.svg and summary.txt
//! ```

use crate::diagnostics::{self, clamp_mmd, median_bandwidth, MmdReference, RunRecord};
use crate::filters::{filter_step, initial_ensemble, SchemeSpec, WeightedEnsemble};
use crate::models::{build_benchmark, test_integrand, Benchmark, ObsKind, StateSpaceModel, Trajectory};
use crate::qmc::{self, TqmcScheme};
use crate::seed;
use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;
use thiserror::Error;

pub const CONFIG_VERSION: u32 = 1;
pub const TRAJECTORY_FILE: &str = "trajectory.csv";
pub const MANIFEST_FILE: &str = "manifest.toml";
pub const REFERENCE_DIR: &str = "reference";
pub const RUNS_FILE: &str = "runs.csv";
pub const FAILURES_FILE: &str = "failures.csv";
pub const REPORT_DIR: &str = "report";
pub const RUN_COLUMNS: [&str; 9] = ["method", "N", "t", "rep", "mae", "mmd_sq", "ess", "weight_cv_sq", "wall_ms"];

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("config: {0}")]
    Config(String),
    #[error("dataset hash mismatch: manifest has {expected}, file hashes to {found}")]
    HashMismatch { expected: String, found: String },
    #[error("malformed CSV: {0}")]
    MalformedCsv(String),
    #[error(transparent)]
    Model(#[from] crate::models::ModelError),
    #[error(transparent)]
    Filter(#[from] crate::filters::FilterError),
    #[error(transparent)]
    Qmc(#[from] crate::qmc::QmcError),
    #[error(transparent)]
    Diagnostics(#[from] crate::diagnostics::DiagnosticsError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.to_path_buf(), source }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(io_err(path))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, bytes).map_err(io_err(path))
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn default_reference_method() -> String {
    TqmcScheme::MmC.tag().to_string()
}

/// Experiment description read from TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub config_version: u32,
    /// `lotka_volterra`, `lorenz63` or `lorenz96`.
    pub model: String,
    /// `linear` or `arctan`.
    pub obs: String,
    pub horizon: usize,
    /// Particle numbers, powers of two.
    pub grid: Vec<usize>,
    pub repetitions: usize,
    #[serde(default = "default_reference_method")]
    pub reference_method: String,
    /// Defaults to 2^11 (2^13 with `--full-scale`, 2^12 for Lorenz-96).
    #[serde(default)]
    pub reference_n: Option<usize>,
    pub seed: u64,
    pub schemes: Vec<String>,
    /// Overrides the benchmark's RK4 substeps per window.
    #[serde(default)]
    pub substeps: Option<usize>,
    /// Sweep worker threads; defaults to all cores.
    #[serde(default)]
    pub workers: Option<usize>,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read(path)?;
        let text = String::from_utf8(bytes).map_err(|e| CliError::Config(e.to_string()))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Defaults: `T = 3`, `N ∈ {2^2..2^10}`, `M = 10`.
    pub fn desk_default(model: Benchmark, obs: ObsKind, seed: u64) -> Self {
        let min_exp = if model == Benchmark::Lorenz96 && obs == ObsKind::Arctan { 6 } else { 2 };
        Self {
            config_version: CONFIG_VERSION,
            model: model.to_string(),
            obs: obs.to_string(),
            horizon: 3,
            grid: (min_exp..=10).map(|k| 1 << k).collect(),
            repetitions: 10,
            reference_method: default_reference_method(),
            reference_n: None,
            seed,
            schemes: vec!["EnKF".into(), "MMstr_c".into(), "QMC-MM_c".into()],
            substeps: None,
            workers: None,
        }
    }

    pub fn benchmark(&self) -> Result<(Benchmark, ObsKind)> {
        let b = self.model.parse().map_err(|e: crate::models::ModelError| CliError::Config(e.to_string()))?;
        let o = self.obs.parse().map_err(|e: crate::models::ModelError| CliError::Config(e.to_string()))?;
        Ok((b, o))
    }

    pub fn build_model(&self) -> Result<StateSpaceModel> {
        let (b, o) = self.benchmark()?;
        let model = build_benchmark(b, o);
        Ok(match self.substeps {
            Some(s) => model.with_substeps(s),
            None => model,
        })
    }

    pub fn reference_size(&self, full_scale: bool) -> Result<usize> {
        if let Some(n) = self.reference_n {
            return Ok(n);
        }
        let (b, _) = self.benchmark()?;
        Ok(if b == Benchmark::Lorenz96 {
            1 << 12
        } else if full_scale {
            1 << 13
        } else {
            1 << 11
        })
    }

    /// Checks every invariant and resolves names into runnable objects.
    pub fn resolve(&self, full_scale: bool) -> Result<Plan> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.config_version != CONFIG_VERSION {
            return bad(format!("config_version {} unsupported (expected {CONFIG_VERSION})", self.config_version));
        }
        if self.horizon == 0 {
            return bad("horizon must be at least 1".into());
        }
        if self.repetitions == 0 {
            return bad("repetitions must be at least 1".into());
        }
        if self.grid.is_empty() {
            return bad("particle grid is empty".into());
        }
        if let Some(n) = self.grid.iter().find(|n| **n < 4 || !n.is_power_of_two()) {
            return bad(format!("grid entry {n} is not a power of two ≥ 4"));
        }
        if self.substeps == Some(0) || self.workers == Some(0) {
            return bad("substeps and workers must be positive".into());
        }
        let (b, o) = self.benchmark()?;
        let max_n = *self.grid.iter().max().expect("nonempty");
        let min_n = *self.grid.iter().min().expect("nonempty");
        if b == Benchmark::Lorenz96 && o == ObsKind::Arctan && min_n < 64 {
            return bad(format!("lorenz96 with arctan observations needs N ≥ 64, grid starts at {min_n}"));
        }
        let n_ref = self.reference_size(full_scale)?;
        if n_ref < max_n || !n_ref.is_power_of_two() {
            return bad(format!("reference_n {n_ref} must be a power of two ≥ max N = {max_n}"));
        }
        let model = self.build_model()?;
        let mut schemes = Vec::new();
        let mut seen = BTreeSet::new();
        for s in &self.schemes {
            let scheme = AnyScheme::parse(s)?;
            scheme.validate(&model)?;
            if !seen.insert(scheme.tag()) {
                return bad(format!("scheme {s} listed twice"));
            }
            schemes.push(scheme);
        }
        if schemes.is_empty() {
            return bad("no schemes".into());
        }
        let reference = AnyScheme::parse(&self.reference_method)?;
        reference.validate(&model)?;
        Ok(Plan { config: self.clone(), model, schemes, reference, n_ref })
    }
}

/// A validated configuration.
#[derive(Debug, Clone)]
pub struct Plan {
    pub config: ExperimentConfig,
    pub model: StateSpaceModel,
    pub schemes: Vec<AnyScheme>,
    pub reference: AnyScheme,
    pub n_ref: usize,
}

/// Any filter the sweep can run.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyScheme {
    Mc(SchemeSpec),
    Qmc(TqmcScheme),
}

impl AnyScheme {
    pub fn parse(s: &str) -> Result<Self> {
        if s.starts_with("QMC-") {
            return Ok(Self::Qmc(s.parse().map_err(|e: qmc::QmcError| CliError::Config(e.to_string()))?));
        }
        s.parse::<SchemeSpec>().map(Self::Mc).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn tag(&self) -> String {
        match self {
            Self::Mc(s) => s.tag(),
            Self::Qmc(s) => s.tag().to_string(),
        }
    }

    pub fn validate(&self, model: &StateSpaceModel) -> Result<()> {
        match self {
            Self::Mc(s) => Ok(s.validate(model)?),
            Self::Qmc(s) => {
                if matches!(s, TqmcScheme::EnkfP | TqmcScheme::MmP) && model.linear_obs().is_none() {
                    return Err(CliError::Config(format!("{} needs linear observations", s.tag())));
                }
                Ok(())
            }
        }
    }
}

/// Pre-resampling output of one step.
#[derive(Debug, Clone)]
pub struct StepResult {
    pub ensemble: WeightedEnsemble,
    pub raw_log_weights: Vec<f64>,
    pub wall_ms: f64,
}

/// A filter between steps: the ensemble carried forward and the most
/// recent weighted (pre-resampling) ensemble.
#[derive(Debug, Clone)]
pub struct FilterState {
    scheme: AnyScheme,
    carry: WeightedEnsemble,
    current: WeightedEnsemble,
    rng: crate::Rng64,
    run_seed: u64,
    t: usize,
}

impl FilterState {
    /// Initial ensemble of `n` particles: iid draws for Monte-Carlo schemes,
    /// transported points for QMC schemes.
    pub fn new(scheme: AnyScheme, model: &StateSpaceModel, n: usize, run_seed: u64) -> Result<Self> {
        let mut rng = crate::rng_from_seed(run_seed);
        let init = match &scheme {
            AnyScheme::Mc(_) => initial_ensemble(model, n, &mut rng)?,
            AnyScheme::Qmc(_) => qmc::tqmc_initial_ensemble(model, n, run_seed)?,
        };
        Ok(Self { scheme, carry: init.clone(), current: init, rng, run_seed, t: 0 })
    }

    pub fn scheme(&self) -> &AnyScheme {
        &self.scheme
    }

    /// Most recent weighted ensemble (the initial one before any step).
    pub fn current(&self) -> &WeightedEnsemble {
        &self.current
    }

    /// Number of assimilated observations.
    pub fn time(&self) -> usize {
        self.t
    }
}

/// Assimilates `y`, advancing `state`.
pub fn run_filter_step(state: &mut FilterState, model: &StateSpaceModel, y: &DVector<f64>) -> std::result::Result<StepResult, String> {
    let start = Instant::now();
    let t = state.t + 1;
    let (ensemble, raw, carry) = match &state.scheme {
        AnyScheme::Mc(spec) => {
            let step = filter_step(spec, &state.carry, y, model, &mut state.rng).map_err(|e| e.to_string())?;
            (step.analysis, step.raw_log_weights, step.posterior)
        }
        AnyScheme::Qmc(s) => {
            let step = qmc::tqmc_filter_step(*s, &state.carry, y, model, qmc::step_seed(state.run_seed, t))
                .map_err(|e| e.to_string())?;
            (step.ensemble.clone(), step.raw_log_weights, step.ensemble)
        }
    };
    let wall_ms = start.elapsed().as_secs_f64() * 1e3;
    state.t = t;
    state.carry = carry;
    state.current = ensemble.clone();
    Ok(StepResult { ensemble, raw_log_weights: raw, wall_ms })
}

/// Runs a filter over all observations. Stops at the first failing step;
/// the error is returned with its (1-based) time index.
pub fn run_filter(
    scheme: &AnyScheme,
    model: &StateSpaceModel,
    observations: &[DVector<f64>],
    n: usize,
    run_seed: u64,
) -> (Vec<StepResult>, Option<(usize, String)>) {
    let mut out = Vec::with_capacity(observations.len());
    let mut state = match FilterState::new(scheme.clone(), model, n, run_seed) {
        Ok(s) => s,
        Err(e) => return (out, Some((1, e.to_string()))),
    };
    for (k, y) in observations.iter().enumerate() {
        match run_filter_step(&mut state, model, y) {
            Ok(step) => out.push(step),
            Err(e) => return (out, Some((k + 1, e))),
        }
    }
    (out, None)
}

/// Dataset manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_version: u32,
    pub seed: u64,
    /// Name of the seed-derivation function.
    pub mix: String,
    pub model: String,
    pub obs: String,
    pub horizon: usize,
    pub trajectory_file: String,
    pub trajectory_sha256: String,
    pub params: BTreeMap<String, String>,
}

/// Writes `trajectory.csv` and `manifest.toml`; returns the manifest.
pub fn cmd_simulate(config: &ExperimentConfig, out: &Path) -> Result<Manifest> {
    let plan = config.resolve(false)?;
    let mut rng = crate::rng_from_seed(seed::derive(&[config.seed, seed::role::DATASET]));
    let traj = crate::models::simulate_truth(&plan.model, config.horizon, &mut rng);
    let mut bytes = Vec::new();
    traj.write_csv(&mut bytes)?;
    write(&out.join(TRAJECTORY_FILE), &bytes)?;
    let manifest = Manifest {
        config_version: CONFIG_VERSION,
        seed: config.seed,
        mix: seed::MIX_NAME.to_string(),
        model: config.model.clone(),
        obs: config.obs.clone(),
        horizon: config.horizon,
        trajectory_file: TRAJECTORY_FILE.to_string(),
        trajectory_sha256: sha256_hex(&bytes),
        params: plan.model.describe().into_iter().collect(),
    };
    let text = toml::to_string(&manifest).expect("manifest serializes");
    write(&out.join(MANIFEST_FILE), text.as_bytes())?;
    Ok(manifest)
}

/// Reads the dataset and verifies its hash against the manifest.
pub fn load_dataset(out: &Path) -> Result<(Trajectory, Manifest)> {
    let mpath = out.join(MANIFEST_FILE);
    let text = String::from_utf8(read(&mpath)?).map_err(|e| CliError::Config(e.to_string()))?;
    let manifest: Manifest = toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", mpath.display())))?;
    let bytes = read(&out.join(&manifest.trajectory_file))?;
    let found = sha256_hex(&bytes);
    if found != manifest.trajectory_sha256 {
        return Err(CliError::HashMismatch { expected: manifest.trajectory_sha256.clone(), found });
    }
    Ok((Trajectory::read_csv(bytes.as_slice())?, manifest))
}

fn check_dataset_matches(config: &ExperimentConfig, manifest: &Manifest) -> Result<()> {
    if manifest.model != config.model || manifest.obs != config.obs {
        return Err(CliError::Config(format!(
            "dataset is {}/{} but config asks for {}/{}",
            manifest.model, manifest.obs, config.model, config.obs
        )));
    }
    if manifest.horizon < config.horizon {
        return Err(CliError::Config(format!("dataset horizon {} < config horizon {}", manifest.horizon, config.horizon)));
    }
    Ok(())
}

/// Reference-run manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceManifest {
    pub method: String,
    pub n_ref: usize,
    pub seed: u64,
    pub horizon: usize,
    pub dataset_sha256: String,
}

fn write_ensemble_csv(path: &Path, ens: &WeightedEnsemble) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["log_weight".to_string()];
    header.extend((1..=ens.dim()).map(|i| format!("x_{i}")));
    w.write_record(&header)?;
    for (x, lw) in ens.particles().iter().zip(ens.log_weights()) {
        let mut row = vec![lw.to_string()];
        row.extend(x.iter().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::MalformedCsv(e.to_string()))?;
    write(path, &bytes)
}

/// Reads a `log_weight,x_1..` file.
pub fn read_ensemble_csv(path: &Path) -> Result<WeightedEnsemble> {
    let bytes = read(path)?;
    let mut r = csv::Reader::from_reader(bytes.as_slice());
    let mut particles = Vec::new();
    let mut lw = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        let vals: Vec<f64> = rec
            .iter()
            .map(|f| f.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| CliError::MalformedCsv(format!("{} row {}: {e}", path.display(), line + 1)))?;
        if vals.len() < 2 {
            return Err(CliError::MalformedCsv(format!("{} row {}: too few columns", path.display(), line + 1)));
        }
        lw.push(vals[0]);
        particles.push(DVector::from_vec(vals[1..].to_vec()));
    }
    Ok(WeightedEnsemble::new(particles, lw)?)
}

pub fn reference_path(out: &Path, t: usize) -> PathBuf {
    out.join(REFERENCE_DIR).join(format!("t{t}.csv"))
}

/// Runs the reference method at `N_ref` and stores the weighted ensemble of
/// each step.
pub fn cmd_reference(config: &ExperimentConfig, out: &Path, full_scale: bool) -> Result<ReferenceManifest> {
    let plan = config.resolve(full_scale)?;
    let (traj, manifest) = load_dataset(out)?;
    check_dataset_matches(config, &manifest)?;
    let obs = &traj.observations[..config.horizon];
    let ref_seed = seed::derive(&[config.seed, seed::role::REFERENCE]);
    let (steps, err) = run_filter(&plan.reference, &plan.model, obs, plan.n_ref, ref_seed);
    if let Some((t, e)) = err {
        return Err(CliError::Config(format!("reference run failed at t = {t}: {e}")));
    }
    for (k, s) in steps.iter().enumerate() {
        write_ensemble_csv(&reference_path(out, k + 1), &s.ensemble)?;
    }
    let rm = ReferenceManifest {
        method: plan.reference.tag(),
        n_ref: plan.n_ref,
        seed: ref_seed,
        horizon: config.horizon,
        dataset_sha256: manifest.trajectory_sha256,
    };
    write(&out.join(REFERENCE_DIR).join(MANIFEST_FILE), toml::to_string(&rm).expect("serializes").as_bytes())?;
    Ok(rm)
}

/// One failed run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub method: String,
    #[serde(rename = "N")]
    pub n: usize,
    pub rep: usize,
    pub t: usize,
    pub error: String,
}

/// Sub-seed of one sweep cell.
pub fn run_seed(base: u64, scheme_tag: &str, n: usize, rep: usize) -> u64 {
    seed::derive(&[base, seed::role::RUN, seed::fnv1a64(scheme_tag.as_bytes()), n as u64, rep as u64])
}

/// Summary of a finished sweep.
#[derive(Debug, Clone)]
pub struct SweepOutput {
    pub records: Vec<RunRecord>,
    pub failures: Vec<FailureRecord>,
}

/// Runs every `(scheme, N, repetition)` cell and writes `runs.csv` and
/// `failures.csv`. Failed steps produce rows with empty metric cells.
pub fn cmd_sweep(config: &ExperimentConfig, out: &Path, full_scale: bool) -> Result<SweepOutput> {
    let plan = config.resolve(full_scale)?;
    let (traj, manifest) = load_dataset(out)?;
    check_dataset_matches(config, &manifest)?;
    let rpath = out.join(REFERENCE_DIR).join(MANIFEST_FILE);
    let rtext = String::from_utf8(read(&rpath)?).map_err(|e| CliError::Config(e.to_string()))?;
    let rm: ReferenceManifest = toml::from_str(&rtext).map_err(|e| CliError::Config(format!("{}: {e}", rpath.display())))?;
    if rm.dataset_sha256 != manifest.trajectory_sha256 {
        return Err(CliError::HashMismatch { expected: rm.dataset_sha256, found: manifest.trajectory_sha256 });
    }
    if rm.horizon < config.horizon {
        return Err(CliError::Config(format!("reference covers {} steps, need {}", rm.horizon, config.horizon)));
    }
    let t_max = config.horizon;
    let gamma = plan.model.gamma();
    let g = move |x: &DVector<f64>| test_integrand(x, gamma);
    let mut refs = Vec::with_capacity(t_max);
    for t in 1..=t_max {
        let ens = read_ensemble_csv(&reference_path(out, t))?;
        let kernel = median_bandwidth(ens.particles())?;
        let mean_g = ens.expectation(g);
        refs.push((mean_g, MmdReference::new(&ens, kernel)));
    }
    let obs = &traj.observations[..t_max];

    let mut jobs = Vec::new();
    for s in &plan.schemes {
        for &n in &config.grid {
            for rep in 0..config.repetitions {
                jobs.push((s, n, rep));
            }
        }
    }
    let workers = config.workers.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| CliError::Config(e.to_string()))?;
    let cells: Vec<(Vec<RunRecord>, Option<FailureRecord>)> = pool.install(|| {
        jobs.par_iter()
            .map(|(scheme, n, rep)| {
                let tag = scheme.tag();
                let (steps, err) = run_filter(scheme, &plan.model, obs, *n, run_seed(config.seed, &tag, *n, *rep));
                let mut rows = Vec::with_capacity(t_max);
                for t in 1..=t_max {
                    let mut rec = RunRecord {
                        method: tag.clone(),
                        n: *n,
                        t,
                        rep: *rep,
                        mae: None,
                        mmd_sq: None,
                        ess: None,
                        weight_cv_sq: None,
                        wall_ms: 0.0,
                    };
                    if let Some(s) = steps.get(t - 1) {
                        let (mean_ref, mmd_ref) = &refs[t - 1];
                        rec.mae = Some((s.ensemble.expectation(g) - mean_ref).abs());
                        rec.mmd_sq = Some(clamp_mmd(mmd_ref.mmd_sq(&s.ensemble)).0);
                        rec.ess = Some(diagnostics::ess(&s.ensemble.weights()));
                        rec.weight_cv_sq = diagnostics::weight_cv_sq_empirical(&s.raw_log_weights).ok();
                        rec.wall_ms = s.wall_ms;
                    }
                    rows.push(rec);
                }
                let fail = err.map(|(t, error)| FailureRecord { method: tag, n: *n, rep: *rep, t, error });
                (rows, fail)
            })
            .collect()
    });
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for (rows, f) in cells {
        records.extend(rows);
        failures.extend(f);
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in &records {
        w.serialize(r)?;
    }
    if records.is_empty() {
        w.write_record(RUN_COLUMNS)?;
    }
    write(&out.join(RUNS_FILE), &w.into_inner().map_err(|e| CliError::MalformedCsv(e.to_string()))?)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["method", "N", "rep", "t", "error"])?;
    for f in &failures {
        w.write_record([f.method.clone(), f.n.to_string(), f.rep.to_string(), f.t.to_string(), f.error.clone()])?;
    }
    write(&out.join(FAILURES_FILE), &w.into_inner().map_err(|e| CliError::MalformedCsv(e.to_string()))?)?;
    Ok(SweepOutput { records, failures })
}

/// Parses a `runs.csv` body.
pub fn parse_runs_csv(bytes: &[u8]) -> Result<Vec<RunRecord>> {
    let mut r = csv::Reader::from_reader(bytes);
    let header: Vec<String> = r.headers().map_err(|e| CliError::MalformedCsv(e.to_string()))?.iter().map(String::from).collect();
    if header != RUN_COLUMNS {
        return Err(CliError::MalformedCsv(format!("header {header:?} differs from {RUN_COLUMNS:?}")));
    }
    r.deserialize()
        .enumerate()
        .map(|(i, rec)| rec.map_err(|e| CliError::MalformedCsv(format!("row {}: {e}", i + 1))))
        .collect()
}

/// Least-squares slope of `ys` against `xs`.
pub fn least_squares_slope(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let n = xs.len();
    if n < 2 || ys.len() != n {
        return None;
    }
    let mx = xs.iter().sum::<f64>() / n as f64;
    let my = ys.iter().sum::<f64>() / n as f64;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    Some(sxy / sxx)
}

/// Median (mean of the middle pair for even counts).
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

/// Aggregate of one `(metric, t, method, N)` cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CurvePoint {
    pub n: usize,
    pub median: f64,
    pub mean: f64,
    pub count: usize,
}

/// Curves keyed by `(metric, t, method)`.
pub type Curves = BTreeMap<(String, usize, String), Vec<CurvePoint>>;

/// Groups successful rows into per-method curves; failed rows are returned
/// separately.
pub fn aggregate(records: &[RunRecord]) -> (Curves, Vec<RunRecord>) {
    let mut cells: BTreeMap<(String, usize, String, usize), Vec<f64>> = BTreeMap::new();
    let mut excluded = Vec::new();
    for r in records {
        let (Some(mae), Some(mmd)) = (r.mae, r.mmd_sq) else {
            excluded.push(r.clone());
            continue;
        };
        cells.entry(("mae".into(), r.t, r.method.clone(), r.n)).or_default().push(mae);
        cells.entry(("mmd_sq".into(), r.t, r.method.clone(), r.n)).or_default().push(mmd);
    }
    let mut curves: Curves = BTreeMap::new();
    for ((metric, t, method, n), vals) in cells {
        let point = CurvePoint {
            n,
            median: median(&vals).expect("nonempty"),
            mean: vals.iter().sum::<f64>() / vals.len() as f64,
            count: vals.len(),
        };
        curves.entry((metric, t, method)).or_default().push(point);
    }
    (curves, excluded)
}

/// Log-log slope of the median curve; nonpositive medians are skipped.
pub fn curve_slope(points: &[CurvePoint]) -> Option<f64> {
    let (xs, ys): (Vec<f64>, Vec<f64>) =
        points.iter().filter(|p| p.median > 0.0).map(|p| ((p.n as f64).ln(), p.median.ln())).unzip();
    least_squares_slope(&xs, &ys)
}

const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf"];

/// Log-log plot of median curves, one polyline per method.
pub fn render_svg(title: &str, curves: &[(&str, &[CurvePoint])]) -> String {
    let (w, h) = (720.0, 460.0);
    let (left, right, top, bottom) = (70.0, 190.0, 40.0, 50.0);
    let pts: Vec<(f64, f64)> = curves
        .iter()
        .flat_map(|(_, c)| c.iter())
        .filter(|p| p.median > 0.0)
        .map(|p| ((p.n as f64).log2(), p.median.log10()))
        .collect();
    let mut svg = String::new();
    let _ = writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(svg, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(svg, r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#, left + (w - left - right) / 2.0, xml_escape(title));
    if pts.is_empty() {
        let _ = writeln!(svg, r#"<text x="{}" y="{}">no positive values</text>"#, left, h / 2.0);
        svg.push_str("</svg>\n");
        return svg;
    }
    let (mut x0, mut x1) = pts.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.0), b.max(p.0)));
    let (mut y0, mut y1) = pts.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.1), b.max(p.1)));
    if x1 - x0 < 1.0 {
        x0 -= 0.5;
        x1 += 0.5;
    }
    y0 = y0.floor();
    y1 = y1.ceil().max(y0 + 1.0);
    let px = |x: f64| left + (x - x0) / (x1 - x0) * (w - left - right);
    let py = |y: f64| h - bottom - (y - y0) / (y1 - y0) * (h - top - bottom);
    let _ = writeln!(
        svg,
        r#"<rect x="{left}" y="{top}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        w - left - right,
        h - top - bottom
    );
    let mut k = x0.ceil() as i64;
    while k as f64 <= x1 {
        let x = px(k as f64);
        let _ = writeln!(svg, r##"<line x1="{x}" y1="{}" x2="{x}" y2="{}" stroke="#ddd"/>"##, top, h - bottom);
        let _ = writeln!(svg, r#"<text x="{x}" y="{}" text-anchor="middle">2^{k}</text>"#, h - bottom + 18.0);
        k += 1;
    }
    let mut e = y0 as i64;
    while e as f64 <= y1 {
        let y = py(e as f64);
        let _ = writeln!(svg, r##"<line x1="{left}" y1="{y}" x2="{}" y2="{y}" stroke="#ddd"/>"##, w - right);
        let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="end">1e{e}</text>"#, left - 6.0, y + 4.0);
        e += 1;
    }
    let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="middle">N</text>"#, left + (w - left - right) / 2.0, h - 12.0);
    for (i, (name, c)) in curves.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let line: Vec<String> = c
            .iter()
            .filter(|p| p.median > 0.0)
            .map(|p| format!("{:.2},{:.2}", px((p.n as f64).log2()), py(p.median.log10())))
            .collect();
        let _ = writeln!(svg, r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#, line.join(" "));
        for p in &line {
            let (a, b) = p.split_once(',').expect("pair");
            let _ = writeln!(svg, r#"<circle cx="{a}" cy="{b}" r="3" fill="{color}"/>"#);
        }
        let ly = top + 16.0 + 18.0 * i as f64;
        let lx = w - right + 14.0;
        let _ = writeln!(svg, r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#, lx + 20.0);
        let _ = writeln!(svg, r#"<text x="{}" y="{}">{}</text>"#, lx + 26.0, ly + 4.0, xml_escape(name));
    }
    svg.push_str("</svg>\n");
    svg
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Text summary: medians and means per cell, fitted slopes, excluded rows.
pub fn summary_text(curves: &Curves, excluded: &[RunRecord]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# metric t method N runs median mean");
    for ((metric, t, method), points) in curves {
        for p in points {
            let _ = writeln!(s, "{metric} {t} {method} {} {} {:.6e} {:.6e}", p.n, p.count, p.median, p.mean);
        }
    }
    let _ = writeln!(s, "\n# log-log least-squares slope of the median");
    for ((metric, t, method), points) in curves {
        match curve_slope(points) {
            Some(v) => {
                let _ = writeln!(s, "{metric} {t} {method} {v:.4}");
            }
            None => {
                let _ = writeln!(s, "{metric} {t} {method} n/a");
            }
        }
    }
    let _ = writeln!(s, "\n# excluded rows (failed runs): {}", excluded.len());
    for r in excluded {
        let _ = writeln!(s, "{} N={} t={} rep={}", r.method, r.n, r.t, r.rep);
    }
    s
}

/// Reads `runs.csv` and writes one SVG per `(metric, t)` plus `summary.txt`
/// into `report_dir`. Returns the written paths.
pub fn cmd_report(csv_path: &Path, report_dir: &Path) -> Result<Vec<PathBuf>> {
    let records = parse_runs_csv(&read(csv_path)?)?;
    let (curves, excluded) = aggregate(&records);
    let mut written = Vec::new();
    let mut panels: BTreeMap<(String, usize), Vec<(&str, &[CurvePoint])>> = BTreeMap::new();
    for ((metric, t, method), points) in &curves {
        panels.entry((metric.clone(), *t)).or_default().push((method.as_str(), points.as_slice()));
    }
    for ((metric, t), list) in &panels {
        let path = report_dir.join(format!("{metric}_t{t}.svg"));
        write(&path, render_svg(&format!("{metric}, t = {t} (median over runs)"), list).as_bytes())?;
        written.push(path);
    }
    let path = report_dir.join("summary.txt");
    write(&path, summary_text(&curves, &excluded).as_bytes())?;
    written.push(path);
    Ok(written)
}

/// Writes the theory checks to `out/theory_report.txt` and returns the text
/// and whether every check passed.
pub fn cmd_theory_report(out: &Path, seed: u64) -> Result<(String, bool)> {
    let lines = crate::theorylab::theory_report(seed);
    let text: String = lines.iter().map(|l| format!("{l}\n")).collect();
    write(&out.join("theory_report.txt"), text.as_bytes())?;
    Ok((text, lines.iter().all(|l| l.pass)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ExperimentConfig {
        let mut c = ExperimentConfig::desk_default(Benchmark::Lorenz63, ObsKind::Linear, 7);
        c.grid = vec![4, 8];
        c.repetitions = 2;
        c.reference_n = Some(64);
        c.schemes = vec!["EnKF".into(), "MMstr_c".into(), "QMC-MM_c".into()];
        c.substeps = Some(20);
        c
    }

    #[test]
    fn config_round_trip() {
        let c = cfg();
        assert_eq!(ExperimentConfig::from_toml_str(&c.to_toml_string()).unwrap(), c);
        assert!(ExperimentConfig::from_toml_str("config_version = 1\nbogus = 3").is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = cfg();
        assert!(c.resolve(false).is_ok());
        c.grid = vec![6];
        assert!(c.resolve(false).is_err());
        let mut c = cfg();
        c.config_version = 2;
        assert!(c.resolve(false).is_err());
        let mut c = cfg();
        c.reference_n = Some(4);
        assert!(c.resolve(false).is_err());
        let mut c = ExperimentConfig::desk_default(Benchmark::Lorenz96, ObsKind::Arctan, 1);
        assert!(c.resolve(false).is_ok());
        c.grid = vec![32, 64];
        assert!(c.resolve(false).is_err());
        let mut c = ExperimentConfig::desk_default(Benchmark::Lorenz63, ObsKind::Arctan, 1);
        c.schemes = vec!["MMstr_p".into()];
        assert!(c.resolve(false).is_err());
        c.schemes = vec!["QMC-MM_p".into()];
        assert!(c.resolve(false).is_err());
    }

    #[test]
    fn reference_size_defaults() {
        let c = ExperimentConfig::desk_default(Benchmark::Lorenz63, ObsKind::Linear, 1);
        assert_eq!(c.reference_size(false).unwrap(), 1 << 11);
        assert_eq!(c.reference_size(true).unwrap(), 1 << 13);
        let c = ExperimentConfig::desk_default(Benchmark::Lorenz96, ObsKind::Linear, 1);
        assert_eq!(c.reference_size(false).unwrap(), 1 << 12);
        let mut c = ExperimentConfig::desk_default(Benchmark::LotkaVolterra, ObsKind::Linear, 1);
        c.reference_n = Some(1 << 9);
        assert_eq!(c.reference_size(true).unwrap(), 1 << 9);
    }

    #[test]
    fn slope_of_inverse_n() {
        let xs: Vec<f64> = (2..=10).map(|k| ((1u64 << k) as f64).ln()).collect();
        let ys: Vec<f64> = (2..=10).map(|k| (3.0 / (1u64 << k) as f64).ln()).collect();
        assert!((least_squares_slope(&xs, &ys).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(least_squares_slope(&[1.0], &[2.0]), None);
    }

    #[test]
    fn median_values() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&[]), None);
    }

    #[test]
    fn scheme_names_parse() {
        for s in ["BPF", "EnKF", "EnKF@Kp", "II_c", "MI_p", "MMstr_c", "QMC-BPF", "QMC-MM_p"] {
            assert_eq!(AnyScheme::parse(s).unwrap().tag(), s);
        }
        assert!(AnyScheme::parse("QMC-II_c").is_err());
        assert!(AnyScheme::parse("nope").is_err());
    }

    #[test]
    fn runs_csv_header_checked() {
        assert!(matches!(parse_runs_csv(b"a,b\n1,2\n"), Err(CliError::MalformedCsv(_))));
        let ok = b"method,N,t,rep,mae,mmd_sq,ess,weight_cv_sq,wall_ms\nEnKF,4,1,0,0.5,0.1,4,0,1.0\nEnKF,4,2,0,,,,,0\n";
        let rows = parse_runs_csv(ok).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[1].mae, None);
        assert!(matches!(parse_runs_csv(b"method,N,t,rep,mae,mmd_sq,ess,weight_cv_sq,wall_ms\nEnKF,x,1,0,,,,,0\n"), Err(CliError::MalformedCsv(_))));
    }

    #[test]
    fn pipeline_small() {
        let dir = tempfile::tempdir().unwrap();
        let c = cfg();
        cmd_simulate(&c, dir.path()).unwrap();
        let (traj, _) = load_dataset(dir.path()).unwrap();
        assert_eq!(traj.observations.len(), 3);
        assert!(traj.observations.iter().all(|y| y.len() == 3));
        cmd_reference(&c, dir.path(), false).unwrap();
        for t in 1..=3 {
            let e = read_ensemble_csv(&reference_path(dir.path(), t)).unwrap();
            assert!(crate::mathcore::log_sum_exp(e.log_weights()).abs() < 1e-10);
            assert_eq!(e.len(), 64);
        }
        let out = cmd_sweep(&c, dir.path(), false).unwrap();
        assert_eq!(out.records.len(), 3 * 2 * 2 * 3);
        for r in out.records.iter().filter(|r| r.method == "EnKF") {
            assert!((r.ess.unwrap() - r.n as f64).abs() < 1e-9);
            assert_eq!(r.weight_cv_sq, Some(0.0));
        }
        let files = cmd_report(&dir.path().join(RUNS_FILE), &dir.path().join(REPORT_DIR)).unwrap();
        assert_eq!(files.len(), 2 * 3 + 1);
    }
}
