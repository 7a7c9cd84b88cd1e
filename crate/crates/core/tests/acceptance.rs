//! Acceptance suite: one PASS/FAIL line per criterion. Exits nonzero when
//! any criterion fails.

use mixenkf::cli::{median, run_filter, AnyScheme};
use mixenkf::diagnostics::{median_bandwidth, weight_cv_sq, MmdReference};
use mixenkf::filters::{
    filter_step, initial_ensemble, systematic_indices, Conditioning, GainKind, Method, SchemeSpec,
};
use mixenkf::mathcore::{log_sum_exp, GaussianMixture, SpdMatrix};
use mixenkf::models::{
    build_benchmark, simulate_truth, test_integrand, Benchmark, ObsKind, StateSpaceModel, Trajectory,
};
use mixenkf::qmc::{scrambled_sobol, sobol, transport_to_mixture, TqmcScheme};
use mixenkf::seed::{derive, fnv1a64};
use mixenkf::theorylab::{
    check_matrix_identities, exact_estimator_mean_var, filtering_component, log_weight_upper_bound, random_instance,
    random_matrix, random_spd, two_point_examples, EstimatorKind,
};
use mixenkf::{cli, rng_from_seed};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn slope(ns: &[usize], ys: &[f64]) -> f64 {
    let xs: Vec<f64> = ns.iter().map(|n| (*n as f64).ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    cli::least_squares_slope(&xs, &ly).unwrap_or(f64::NAN)
}

fn log_z_mix(flows: &[DVector<f64>], y: &DVector<f64>, model: &StateSpaceModel) -> f64 {
    let h = model.linear_obs().expect("linear observations");
    let masses: Vec<f64> = flows
        .iter()
        .map(|f| filtering_component(f, y, h, model.q(), model.r()).expect("well-posed").0)
        .collect();
    log_sum_exp(&masses) - (flows.len() as f64).ln()
}

fn c1_exact_examples() -> Outcome {
    let mut bad = Vec::new();
    let mut count = 0;
    for (e, (inst, expected)) in two_point_examples().iter().enumerate() {
        for (kind, want) in expected {
            let (mean, var) = exact_estimator_mean_var(inst, *kind);
            count += 1;
            if &var != want || mean != inst.target_mean() {
                bad.push(format!("example {} V[{kind}] = {var}, expected {want}", e + 1));
            }
        }
    }
    check(bad.is_empty(), if bad.is_empty() { format!("{count} exact variances reproduced") } else { bad.join("; ") })
}

fn c2_variance_ordering() -> Outcome {
    let mut rng = rng_from_seed(derive(&[2, 1000]));
    let (mut violations, mut biased) = (0, 0);
    for k in 0..1000 {
        let inst = random_instance(&mut rng, 2 + k % 3, 2 + (k / 3) % 2);
        let target = inst.target_mean();
        let v: Vec<_> = EstimatorKind::ALL
            .iter()
            .map(|kind| {
                let (m, v) = exact_estimator_mean_var(&inst, *kind);
                biased += usize::from(m != target);
                v
            })
            .collect();
        let (mi, im, mm, mmstr) = (&v[1], &v[2], &v[3], &v[4]);
        if !(mmstr <= mm && mm <= mi.min(im)) {
            violations += 1;
        }
    }
    check(
        violations == 0 && biased == 0,
        format!("1000 instances: {violations} ordering violations, {biased} biased estimators"),
    )
}

fn c3_matrix_identities() -> Outcome {
    let mut rng = rng_from_seed(derive(&[3, 50]));
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let d = rng.random_range(1..=5);
        let m = rng.random_range(1..=5);
        let q = random_spd(&mut rng, d);
        let r = random_spd(&mut rng, m);
        let h = random_matrix(&mut rng, m, d);
        let k = rng.random_range(1..=d + 1);
        let g = random_matrix(&mut rng, k, d);
        let rep = check_matrix_identities(&q, &r, &h, &(g.transpose() * &g)).map_err(|e| e.to_string())?;
        worst = worst.max(rep.max_residual());
    }
    check(worst < 1e-10, format!("max relative residual {worst:.2e} over 50 instances"))
}

fn simpson<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for k in 1..n {
        s += f(a + k as f64 * h) * if k % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

fn c4_scalar_quadrature() -> Outcome {
    let mut rng = rng_from_seed(derive(&[4, 20]));
    let (mut mass_err, mut mom_err) = (0.0f64, 0.0f64);
    for _ in 0..20 {
        let z: f64 = rng.random_range(-3.0..3.0);
        let y: f64 = rng.random_range(-3.0..3.0);
        let q: f64 = rng.random_range(0.2..3.0);
        let r: f64 = rng.random_range(0.2..3.0);
        let h: f64 = rng.random_range(-2.0..2.0);
        let dens = |x: f64| {
            (-0.5 * (y - h * x).powi(2) / r).exp() * (-0.5 * (x - z).powi(2) / q).exp()
                / (2.0 * std::f64::consts::PI * q).sqrt()
        };
        let (a, b) = (z - 14.0 * q.sqrt(), z + 14.0 * q.sqrt());
        let n = 20_000;
        let mass = simpson(dens, a, b, n);
        let mean = simpson(|x| x * dens(x), a, b, n) / mass;
        let var = simpson(|x| (x - mean).powi(2) * dens(x), a, b, n) / mass;
        let (lm, comp) = filtering_component(
            &DVector::from_element(1, z),
            &DVector::from_element(1, y),
            &DMatrix::from_element(1, 1, h),
            &SpdMatrix::scaled_identity(1, q),
            &SpdMatrix::scaled_identity(1, r),
        )
        .map_err(|e| e.to_string())?;
        mass_err = mass_err.max((lm.exp() - mass).abs() / mass);
        mom_err = mom_err
            .max((comp.mean[0] - mean).abs())
            .max((comp.cov.entries()[(0, 0)] - var).abs());
    }
    check(
        mass_err < 1e-8 && mom_err < 1e-6,
        format!("20 cases: mass error {mass_err:.2e}, moment error {mom_err:.2e}"),
    )
}

fn c5_weight_bound() -> Outcome {
    let model = build_benchmark(Benchmark::Lorenz63, ObsKind::Linear);
    let h = model.linear_obs().expect("linear").clone();
    let traj = simulate_truth(&model, 100, &mut rng_from_seed(derive(&[5, 1])));
    let scheme = SchemeSpec::weighted(Method::II, Conditioning::Previous);
    let mut rng = rng_from_seed(derive(&[5, 2]));
    let mut ens = initial_ensemble(&model, 64, &mut rng).map_err(|e| e.to_string())?;
    let (mut violations, mut checked) = (0, 0);
    let mut closest = f64::NEG_INFINITY;
    for y in &traj.observations {
        let flows: Vec<DVector<f64>> = ens.particles().iter().map(|x| model.flow(x)).collect();
        let lz = log_z_mix(&flows, y, &model);
        let lb = log_weight_upper_bound(&flows, y, &h, model.q(), model.r()).map_err(|e| e.to_string())?;
        let step = filter_step(&scheme, &ens, y, &model, &mut rng).map_err(|e| e.to_string())?;
        let bound = lb.exp();
        for lv in &step.raw_log_weights {
            let ratio = (lv - lz).exp();
            checked += 1;
            closest = closest.max(lv - lz - lb);
            if ratio > bound + 1e-9 * bound.max(1.0) {
                violations += 1;
            }
        }
        ens = step.posterior;
    }
    check(
        violations == 0,
        format!("{checked} weights over 100 steps: {violations} violations, max log(ratio/bound) {closest:.3}"),
    )
}

fn c6_weight_variance() -> Outcome {
    let model = build_benchmark(Benchmark::Lorenz63, ObsKind::Linear);
    let traj = simulate_truth(&model, 200, &mut rng_from_seed(derive(&[6, 1])));
    let kinds = [Method::MMstr, Method::II, Method::MI];
    let schemes: Vec<SchemeSpec> = kinds.iter().map(|m| SchemeSpec::weighted(*m, Conditioning::Previous)).collect();
    let mut rng = rng_from_seed(derive(&[6, 2]));
    let mut ens = initial_ensemble(&model, 128, &mut rng).map_err(|e| e.to_string())?;
    let mut sums = [0.0f64; 3];
    for (t, y) in traj.observations.iter().enumerate() {
        let flows: Vec<DVector<f64>> = ens.particles().iter().map(|x| model.flow(x)).collect();
        let lz = log_z_mix(&flows, y, &model);
        let mut next = None;
        for (k, s) in schemes.iter().enumerate() {
            let mut step_rng = rng_from_seed(derive(&[6, 3, t as u64]));
            let out = filter_step(s, &ens, y, &model, &mut step_rng).map_err(|e| e.to_string())?;
            sums[k] += weight_cv_sq(&out.raw_log_weights, lz).map_err(|e| e.to_string())?;
            if k == 0 {
                next = Some(out.posterior);
            }
        }
        ens = next.expect("driver step");
    }
    let n = traj.observations.len() as f64;
    let [mmstr, ii, mi] = sums.map(|s| s / n);
    check(
        mmstr <= 1.01 * ii && mmstr <= 1.01 * mi,
        format!("mean weight CV² over 200 steps: MMstr_p {mmstr:.4}, II_p {ii:.4}, MI_p {mi:.4}"),
    )
}

struct Kalman1d {
    a: f64,
    q: f64,
    r: f64,
    m0: f64,
    p0: f64,
}

impl Kalman1d {
    /// Posterior means and standard deviations after each observation.
    fn run(&self, ys: &[f64]) -> Vec<(f64, f64)> {
        let (mut m, mut p) = (self.m0, self.p0);
        ys.iter()
            .map(|y| {
                let (mf, pf) = (self.a * m, self.a * self.a * p + self.q);
                let k = pf / (pf + self.r);
                m = mf + k * (y - mf);
                p = (1.0 - k) * pf;
                (m, p.sqrt())
            })
            .collect()
    }

    fn model(&self) -> StateSpaceModel {
        StateSpaceModel::linear_gaussian(
            DMatrix::from_element(1, 1, self.a),
            DMatrix::identity(1, 1),
            SpdMatrix::scaled_identity(1, self.q),
            SpdMatrix::scaled_identity(1, self.r),
            DVector::from_element(1, self.m0),
            SpdMatrix::scaled_identity(1, self.p0),
        )
        .expect("valid model")
    }
}

fn c7_kalman_oracle() -> Outcome {
    let kf = Kalman1d { a: 0.9, q: 1.0, r: 0.1, m0: 1.0, p0: 1.0 };
    let model = kf.model();
    let horizon = 4;
    let (small, large) = (1usize << 6, 1usize << 12);
    let mut schemes = vec![
        SchemeSpec::enkf().with_gain(GainKind::Current),
        SchemeSpec::enkf().with_gain(GainKind::Previous),
        SchemeSpec::bpf(),
    ];
    schemes.extend(SchemeSpec::six_weighted());
    let mut failures = Vec::new();
    let mut worst_z = 0.0f64;
    for scheme in &schemes {
        let mut wins = 0;
        for seed in 0..10u64 {
            let traj = simulate_truth(&model, horizon, &mut rng_from_seed(derive(&[7, seed])));
            let ys: Vec<f64> = traj.observations.iter().map(|y| y[0]).collect();
            let oracle = kf.run(&ys);
            // time-averaged |m̂_t − m_t| / σ_t
            let err = |n: usize| -> Result<f64, String> {
                let mut rng = rng_from_seed(derive(&[7, seed, n as u64, fnv1a64(scheme.tag().as_bytes())]));
                let mut ens = initial_ensemble(&model, n, &mut rng).map_err(|e| e.to_string())?;
                let mut total = 0.0;
                for (y, (m, s)) in traj.observations.iter().zip(&oracle) {
                    let out = filter_step(scheme, &ens, y, &model, &mut rng).map_err(|e| e.to_string())?;
                    total += (out.analysis.mean()[0] - m).abs() / s;
                    ens = out.posterior;
                }
                Ok(total / horizon as f64)
            };
            let e_small = err(small)?;
            let e_large = err(large)?;
            wins += usize::from(e_large < e_small);
            let z = e_large * (large as f64).sqrt();
            worst_z = worst_z.max(z);
            if z >= 5.0 {
                failures.push(format!("{scheme} seed {seed}: error {e_large:.2e}σ ≥ 5σ/√N"));
            }
        }
        if wins < 9 {
            failures.push(format!("{scheme}: N=2^12 beats N=2^6 in only {wins}/10 seeds"));
        }
    }
    check(
        failures.is_empty(),
        if failures.is_empty() {
            format!("{} schemes × 10 seeds converge; max error at N=2^12 is {worst_z:.2}σ/√N", schemes.len())
        } else {
            failures.join("; ")
        },
    )
}

fn c8_consistency_slope() -> Outcome {
    let model = build_benchmark(Benchmark::Lorenz63, ObsKind::Linear);
    let traj = simulate_truth(&model, 1, &mut rng_from_seed(derive(&[8, 1])));
    let obs = &traj.observations[..1];
    let reference = AnyScheme::Qmc(TqmcScheme::MmC);
    let (steps, err) = run_filter(&reference, &model, obs, 1 << 13, derive(&[8, 2]));
    if let Some((_, e)) = err {
        return Err(format!("reference failed: {e}"));
    }
    let ref_ens = &steps[0].ensemble;
    let mmd = MmdReference::new(ref_ens, median_bandwidth(ref_ens.particles()).map_err(|e| e.to_string())?);
    let run_median = |scheme: &AnyScheme, n: usize| -> Result<f64, String> {
        let mut vals = Vec::new();
        for rep in 0..10 {
            let (s, err) = run_filter(scheme, &model, obs, n, cli::run_seed(8, &scheme.tag(), n, rep));
            if let Some((_, e)) = err {
                return Err(format!("{} N={n}: {e}", scheme.tag()));
            }
            vals.push(mmd.mmd_sq(&s[0].ensemble).max(0.0));
        }
        Ok(median(&vals).expect("nonempty"))
    };
    let mmstr = AnyScheme::Mc(SchemeSpec::weighted(Method::MMstr, Conditioning::Current));
    let ns: Vec<usize> = (4..=10).map(|k| 1 << k).collect();
    let curve: Vec<f64> = ns.iter().map(|n| run_median(&mmstr, *n)).collect::<Result<_, _>>()?;
    let s = slope(&ns, &curve);
    let plain = AnyScheme::Mc(SchemeSpec::enkf());
    let enkf = run_median(&plain, 1 << 10)?;
    let last = *curve.last().expect("nonempty");
    // reported only: the EnKF floor is clearer one octave further out
    let (enkf_12, mmstr_12) = (run_median(&plain, 1 << 12)?, run_median(&mmstr, 1 << 12)?);
    check(
        s <= -0.6 && enkf > last,
        format!(
            "MMstr_c MMD² slope {s:.3}; at N=2^10 EnKF {enkf:.3e} vs MMstr_c {last:.3e} (ratio {:.3}); \
             at N=2^12 EnKF {enkf_12:.3e} vs MMstr_c {mmstr_12:.3e}",
            enkf / last
        ),
    )
}

fn mean_mae(steps: &[cli::StepResult], refs: &[f64], gamma: f64) -> f64 {
    steps
        .iter()
        .zip(refs)
        .map(|(s, r)| (s.ensemble.expectation(|x| test_integrand(x, gamma)) - r).abs())
        .sum::<f64>()
        / refs.len() as f64
}

fn c9_tqmc_gain() -> Outcome {
    let model = build_benchmark(Benchmark::LotkaVolterra, ObsKind::Linear);
    let gamma = model.gamma();
    let horizon = 3;
    let n = 1 << 8;
    let qmc = AnyScheme::Qmc(TqmcScheme::MmC);
    let mc = AnyScheme::Mc(SchemeSpec::weighted(Method::MMstr, Conditioning::Current));
    let mut wins = 0;
    let mut lines = Vec::new();
    for ds in 0..10u64 {
        let traj: Trajectory = simulate_truth(&model, horizon, &mut rng_from_seed(derive(&[9, ds])));
        let (rsteps, err) = run_filter(&qmc, &model, &traj.observations, 1 << 11, derive(&[9, ds, 6]));
        if let Some((_, e)) = err {
            return Err(format!("reference for dataset {ds}: {e}"));
        }
        let refs: Vec<f64> = rsteps.iter().map(|s| s.ensemble.expectation(|x| test_integrand(x, gamma))).collect();
        let mut med = [0.0; 2];
        for (k, scheme) in [&qmc, &mc].into_iter().enumerate() {
            let mut vals = Vec::new();
            for rep in 0..10 {
                let (steps, err) = run_filter(scheme, &model, &traj.observations, n, cli::run_seed(ds, "paired", n, rep));
                if let Some((_, e)) = err {
                    return Err(format!("{} dataset {ds}: {e}", scheme.tag()));
                }
                vals.push(mean_mae(&steps, &refs, gamma));
            }
            med[k] = median(&vals).expect("nonempty");
        }
        wins += usize::from(med[0] <= med[1]);
        lines.push(format!("{:.1e}/{:.1e}", med[0], med[1]));
    }
    check(wins >= 7, format!("QMC-MM_c ≤ MMstr_c in {wins}/10 datasets (median MAE {})", lines.join(" ")))
}

fn c10_qmc_mechanics() -> Outcome {
    let mut problems = Vec::new();

    // moment error of a single transported Gaussian
    let mean = DVector::from_vec(vec![1.0, -2.0]);
    let cov = SpdMatrix::new(DMatrix::from_row_slice(2, 2, &[2.0, 0.6, 0.6, 1.0])).map_err(|e| e.to_string())?;
    let mix = GaussianMixture::equal_weights_shared(vec![mean.clone()], cov.clone()).map_err(|e| e.to_string())?;
    let ns: Vec<usize> = (6..=12).map(|k| 1 << k).collect();
    let mut rms = Vec::new();
    for &n in &ns {
        let mut acc = 0.0;
        let reps = 32;
        for s in 0..reps {
            let set = scrambled_sobol(n, 3, derive(&[10, s])).map_err(|e| e.to_string())?;
            let pts = transport_to_mixture(&set, &mix).map_err(|e| e.to_string())?;
            let m = pts.iter().fold(DVector::zeros(2), |a, p| a + p) / n as f64;
            let c = pts.iter().fold(DMatrix::zeros(2, 2), |a, p| a + (p - &mean) * (p - &mean).transpose()) / n as f64;
            acc += (&m - &mean).norm_squared() + (c - cov.entries()).norm_squared();
        }
        rms.push((acc / reps as f64).sqrt());
    }
    let s = slope(&ns, &rms);
    if s > -0.6 {
        problems.push(format!("moment RMS-error slope {s:.3}"));
    }

    // dyadic weights give exact component counts
    let weights = [0.5, 0.25, 0.125, 0.125];
    let means: Vec<DVector<f64>> = (0..4).map(|k| DVector::from_element(1, 100.0 * k as f64)).collect();
    let mix = GaussianMixture::from_weights_shared(&weights, means, SpdMatrix::identity(1)).map_err(|e| e.to_string())?;
    for n in [8usize, 64, 1024] {
        for scramble in [None, Some(3u64)] {
            let set = match scramble {
                None => sobol(n, 2),
                Some(s) => scrambled_sobol(n, 2, s),
            }
            .map_err(|e| e.to_string())?;
            let mut counts = [0usize; 4];
            for p in transport_to_mixture(&set, &mix).map_err(|e| e.to_string())? {
                counts[((p[0] / 100.0).round()) as usize] += 1;
            }
            let want: Vec<usize> = weights.iter().map(|w| (w * n as f64) as usize).collect();
            if counts.to_vec() != want {
                problems.push(format!("N={n} counts {counts:?}, want {want:?}"));
            }
        }
    }

    // leading points in Gray-code order
    let oracle = [[0.0, 0.0], [0.5, 0.5], [0.75, 0.25], [0.25, 0.75], [0.375, 0.375], [0.875, 0.875], [0.625, 0.125], [0.125, 0.625]];
    let set = sobol(8, 2).map_err(|e| e.to_string())?;
    for (i, want) in oracle.iter().enumerate() {
        for (j, w) in want.iter().enumerate() {
            let got = set.raw(i, j) as f64 / 2f64.powi(32);
            if got != *w {
                problems.push(format!("point {i} coord {j}: {got} vs {w}"));
            }
        }
    }
    check(
        problems.is_empty(),
        if problems.is_empty() {
            format!("moment slope {s:.3}, dyadic counts exact, 8-point prefix matches")
        } else {
            problems.join("; ")
        },
    )
}

fn grid_counts(weights: &[f64]) -> Vec<Vec<f64>> {
    let n = weights.len();
    let lw: Vec<f64> = weights.iter().map(|w| w.ln()).collect();
    (0..10_000)
        .map(|k| {
            let u1 = (k as f64 + 0.5) / 1e4 / n as f64;
            let mut c = vec![0.0; n];
            for j in systematic_indices(&lw, u1) {
                c[j] += 1.0;
            }
            c
        })
        .collect()
}

fn c11_resampling() -> Outcome {
    let mut problems = Vec::new();
    let exact = [0.5, 0.5, 0.0, 0.0];
    let grid = grid_counts(&exact);
    for (j, w) in exact.iter().enumerate() {
        let mean = grid.iter().map(|c| c[j]).sum::<f64>() / grid.len() as f64;
        if mean != 4.0 * w {
            problems.push(format!("(0.5,0.5,0,0) index {j}: mean count {mean}"));
        }
    }
    let mut rng = rng_from_seed(derive(&[11, 0]));
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let n = rng.random_range(2..=12);
        let raw: Vec<f64> = (0..n).map(|_| rng.random::<f64>() + 1e-3).collect();
        let total: f64 = raw.iter().sum();
        let w: Vec<f64> = raw.iter().map(|x| x / total).collect();
        let grid = grid_counts(&w);
        let g = grid.len() as f64;
        for j in 0..n {
            let mean = grid.iter().map(|c| c[j]).sum::<f64>() / g;
            let var = grid.iter().map(|c| (c[j] - mean).powi(2)).sum::<f64>() / (g - 1.0);
            let sigma = (var / g).sqrt().max(1e-12);
            let z = (mean - n as f64 * w[j]).abs() / sigma;
            worst = worst.max(z);
            if z > 3.0 {
                problems.push(format!("weights {w:?} index {j}: {z:.2}σ"));
            }
        }
    }
    check(
        problems.is_empty(),
        if problems.is_empty() {
            format!("exact example reproduced; 20 random weight vectors within {worst:.2}σ")
        } else {
            problems.join("; ")
        },
    )
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome, u64); 11] = [
        ("exact two-point variances", c1_exact_examples, 1),
        ("variance ordering and unbiasedness", c2_variance_ordering, 30),
        ("EnKF matrix identities", c3_matrix_identities, 1),
        ("scalar filtering component vs quadrature", c4_scalar_quadrature, 5),
        ("importance weight bound", c5_weight_bound, 600),
        ("weight variance ordering", c6_weight_variance, 600),
        ("linear-Gaussian Kalman oracle", c7_kalman_oracle, 600),
        ("MMD consistency slope", c8_consistency_slope, 300),
        ("TQMC gain on Lotka-Volterra", c9_tqmc_gain, 180),
        ("QMC mechanics", c10_qmc_mechanics, 600),
        ("resampling unbiasedness", c11_resampling, 600),
    ];
    let only: Option<usize> = std::env::args().nth(1).and_then(|a| a.parse().ok());
    let mut failed = 0;
    for (k, (name, run, budget)) in criteria.iter().enumerate() {
        let idx = k + 1;
        if only.is_some_and(|o| o != idx) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let elapsed = start.elapsed();
        let outcome = match outcome {
            Ok(d) if elapsed > Duration::from_secs(*budget) => Err(format!("{d} (over the {budget} s budget)")),
            o => o,
        };
        let (tag, detail) = match &outcome {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        failed += usize::from(outcome.is_err());
        println!("{tag} criterion {idx} ({name}): {detail} [{:.1} s]", elapsed.as_secs_f64());
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
