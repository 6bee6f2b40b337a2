//! Self-checks of the implementation: graph construction, spectral routes,
//! perturbation nullspace, centroid bookkeeping, gradients, accountant and
//! the analytical bounds on a bundled configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;

use crate::analysis::{descent_residual_stats, disagreement_bound, BoundInputs};
use crate::config::ExperimentConfig;
use crate::engine::run;
use crate::error::{Error, Result};
use crate::experiment::{prepare, run_config, run_experiment, ExperimentOutcome};
use crate::graph::{
    metropolis_weights, spectral_gap_dense, spectral_gap_power, CombinationMatrix, Topology,
};
use crate::loss::{LossKind, LossModel, Sample};
use crate::perturbation::{homomorphic_plan, weighted_plan_sum, PerturbationScheme};
use crate::privacy::{
    empirical_dp_check, epsilon, epsilon_or_unbounded, sensitivity_bound, Epsilon,
};
use crate::rng::{agent_streams, stream, Purpose, StreamRng};

/// The configuration the bound checks run on by default.
pub const BOUNDS_CONFIG: &str = include_str!("../../../configs/bounds.cfg");

/// Relative slack on the disagreement bound.
pub const DISAGREEMENT_SLACK: f64 = 0.05;

pub const NULLSPACE_TOL: f64 = 1e-12;

pub const FD_TOL: f64 = 1e-6;

pub fn bounds_config() -> ExperimentConfig {
    ExperimentConfig::from_toml_str(BOUNDS_CONFIG, Path::new("."))
        .expect("bundled bounds configuration is valid")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &str, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.to_string(),
            passed,
            detail: detail.into(),
        }
    }

    fn from_result(name: &str, r: Result<(bool, String)>) -> Self {
        match r {
            Ok((passed, detail)) => Self::new(name, passed, detail),
            Err(e) => Self::new(name, false, e.to_string()),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Options {
    pub seed: u64,
    /// Combination matrix document to validate alongside the built-in ones.
    pub matrix: Option<PathBuf>,
    /// Replaces the bundled bounds configuration.
    pub config: Option<ExperimentConfig>,
}

pub fn all_passed(checks: &[Check]) -> bool {
    checks.iter().all(|c| c.passed)
}

pub fn format_table(checks: &[Check]) -> String {
    let width = checks.iter().map(|c| c.name.len()).max().unwrap_or(0);
    let mut out = String::new();
    for c in checks {
        let _ = writeln!(
            out,
            "{:<width$}  {}  {}",
            c.name,
            if c.passed { "PASS" } else { "FAIL" },
            c.detail
        );
    }
    out
}

pub fn run_suite(opts: &Options) -> Vec<Check> {
    let cfg = opts.config.clone().unwrap_or_else(bounds_config);
    let mut checks = vec![
        Check::from_result("graph.metropolis", metropolis_check(opts.seed)),
        Check::from_result("graph.spectral_routes", spectral_routes_check(opts.seed)),
    ];
    let mut injected = None;
    if let Some(path) = &opts.matrix {
        let loaded =
            CombinationMatrix::from_file(path).and_then(|a| a.check_assumptions().map(|_| a));
        checks.push(Check::from_result(
            "matrix.injected",
            loaded
                .as_ref()
                .map(|a| {
                    (
                        true,
                        format!("{} agents, lambda2 = {:.6}", a.size(), a.lambda2()),
                    )
                })
                .map_err(clone_err),
        ));
        injected = loaded.ok();
    }
    checks.push(Check::from_result(
        "perturbation.nullspace",
        nullspace_check(opts.seed, injected.as_ref()),
    ));
    checks.push(Check::from_result(
        "loss.finite_differences",
        gradient_check(opts.seed, 200),
    ));
    checks.push(Check::from_result(
        "accountant.identities",
        accountant_check(&cfg),
    ));
    checks.push(Check::from_result(
        "accountant.dp_micro_check",
        dp_micro_check(opts.seed),
    ));
    checks.push(Check::from_result(
        "engine.zero_noise",
        zero_noise_check(&cfg),
    ));
    checks.push(Check::from_result("engine.centroid", centroid_check(&cfg)));
    match bound_experiment(&cfg) {
        Ok(out) => {
            checks.push(Check::from_result(
                "bounds.disagreement",
                disagreement_check(&cfg, &out),
            ));
            checks.push(Check::from_result(
                "bounds.descent",
                descent_check(&cfg, &out),
            ));
        }
        Err(e) => checks.push(Check::new("bounds", false, e.to_string())),
    }
    checks
}

fn clone_err(e: &Error) -> Error {
    Error::InvalidMatrix(e.to_string())
}

fn random_connected(rng: &mut StreamRng, k: usize) -> Result<Topology> {
    let p = rng.random_range(0.2..0.7);
    Topology::erdos_renyi(k, p, rng)
}

fn metropolis_check(seed: u64) -> Result<(bool, String)> {
    let mut rng = stream(seed, Purpose::Validation, 0);
    for _ in 0..20 {
        let k = rng.random_range(2..30);
        let topo = random_connected(&mut rng, k)?;
        let a = metropolis_weights(&topo)?;
        a.check_sparsity(&topo)?;
        a.check_assumptions()?;
        // from_rows re-runs the symmetry and stochasticity validation
        CombinationMatrix::from_rows(a.to_rows())?;
    }
    Ok((
        true,
        "20 random graphs: symmetric, doubly stochastic, connected".into(),
    ))
}

fn spectral_routes_check(seed: u64) -> Result<(bool, String)> {
    let mut rng = stream(seed, Purpose::Validation, 1);
    let mut worst = 0.0_f64;
    for _ in 0..10 {
        let k = rng.random_range(3..60);
        let a = metropolis_weights(&random_connected(&mut rng, k)?)?;
        let dense = spectral_gap_dense(&a);
        let power = spectral_gap_power(&a, crate::graph::POWER_ITERATION_MAX_STEPS)?;
        worst = worst.max((dense - power).abs());
    }
    Ok((worst <= 1e-8, format!("max |dense - power| = {worst:.2e}")))
}

fn nullspace_check(seed: u64, extra: Option<&CombinationMatrix>) -> Result<(bool, String)> {
    let mut rng = stream(seed, Purpose::Validation, 2);
    let mut matrices = Vec::new();
    for _ in 0..20 {
        let k = rng.random_range(3..=20);
        matrices.push(crate::graph::blend_self_loops(
            &metropolis_weights(&random_connected(&mut rng, k)?)?,
            0.05,
        ));
    }
    matrices.extend(extra.cloned());
    let mut worst = 0.0_f64;
    for (n, a) in matrices.iter().enumerate() {
        let mut streams = agent_streams(seed ^ n as u64, Purpose::Perturbation, a.size());
        for _ in 0..20 {
            let plan = homomorphic_plan(a, 1.0, 4, &mut streams)?;
            let sum = weighted_plan_sum(a, &plan)?;
            worst = sum.iter().fold(worst, |w, x| w.max(x.abs()));
        }
    }
    Ok((
        worst <= NULLSPACE_TOL,
        format!(
            "{} matrices x 20 plans, max |weighted sum| = {worst:.2e}",
            matrices.len()
        ),
    ))
}

/// Analytic per-sample gradients against central differences of the losses.
pub fn gradient_check(seed: u64, points: usize) -> Result<(bool, String)> {
    let mut rng = stream(seed, Purpose::Validation, 3);
    let models = [
        LossModel::new(LossKind::LeastSquares, 1e9, 1.0)?,
        LossModel::new(LossKind::RidgeLogistic { rho: 0.1 }, 1e9, 1.0)?,
    ];
    let mut worst = 0.0_f64;
    for model in &models {
        for _ in 0..points {
            let m = rng.random_range(1..8);
            let w: Vec<f64> = (0..m).map(|_| rng.random_range(-2.0..2.0)).collect();
            let s = Sample {
                features: (0..m).map(|_| rng.random_range(-2.0..2.0)).collect(),
                label: if rng.random_bool(0.5) { 1.0 } else { -1.0 },
            };
            let g = model.raw_gradient(&w, &s)?;
            let fd = central_difference(&w, |x| model.loss(x, &s))?;
            worst = worst.max(relative_error(&g, &fd));
        }
    }
    Ok((worst <= FD_TOL, format!("max relative error = {worst:.2e}")))
}

pub fn central_difference(w: &[f64], f: impl Fn(&[f64]) -> Result<f64>) -> Result<Vec<f64>> {
    let mut x = w.to_vec();
    (0..w.len())
        .map(|j| {
            let h = 1e-5 * w[j].abs().max(1.0);
            x[j] = w[j] + h;
            let up = f(&x)?;
            x[j] = w[j] - h;
            let down = f(&x)?;
            x[j] = w[j];
            Ok((up - down) / (2.0 * h))
        })
        .collect()
}

/// `|a - b| / max(|a|, floor)` with a floor that keeps tiny gradients from
/// dominating.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let scale: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / scale.max(1e-3)
}

fn accountant_check(cfg: &ExperimentConfig) -> Result<(bool, String)> {
    let mu = cfg.run.mu;
    let g = cfg.loss.clip_bound;
    let horizon = cfg.run.iterations as u64;
    let mut notes = Vec::new();
    let mut ok = sensitivity_bound(mu, g, 0) == 0.0;
    for s in &cfg.schemes {
        if *s == PerturbationScheme::None {
            continue;
        }
        let b = s.laplace_scale();
        match epsilon_or_unbounded(mu, g, b, horizon) {
            Epsilon::NoPrivacy => notes.push(format!("{}: {}", s.label(), Epsilon::NoPrivacy)),
            Epsilon::Finite(e) => {
                let mut acc = 0.0;
                for n in 1..=horizon {
                    acc += 2.0 * mu * g * n as f64 / b;
                }
                ok &= (acc - e).abs() <= 1e-9 * e.max(1.0);
                ok &= (epsilon(mu, g, 2.0 * b, horizon)? - e / 2.0).abs() <= 1e-12 * e.max(1.0);
                notes.push(format!("{}: eps({horizon}) = {e:.4}", s.label()));
            }
        }
    }
    Ok((ok, notes.join("; ")))
}

fn dp_micro_check(seed: u64) -> Result<(bool, String)> {
    let mut rng = stream(seed, Purpose::Validation, 4);
    let r = empirical_dp_check(1.0, 1.0, 1.0, 1_000_000, &mut rng)?;
    Ok((
        r.pass,
        format!(
            "max log ratio {:.4} vs eps 1 (+3 se = {:.4}), {} bins",
            r.max_log_ratio,
            3.0 * r.std_error,
            r.bins_used
        ),
    ))
}

fn short(cfg: &ExperimentConfig) -> ExperimentConfig {
    let mut c = cfg.clone();
    c.run.iterations = c.run.iterations.min(50);
    c
}

fn zero_noise_check(cfg: &ExperimentConfig) -> Result<(bool, String)> {
    let c = short(cfg);
    let setup = prepare(&c)?;
    let none = run(
        &run_config(&c, &setup, PerturbationScheme::None, c.seed),
        &setup.eval_set,
    )?;
    let hom = run(
        &run_config(
            &c,
            &setup,
            PerturbationScheme::GraphHomomorphic { b_v: 0.0 },
            c.seed,
        ),
        &setup.eval_set,
    )?;
    let same = none.rows.iter().zip(&hom.rows).all(|(a, b)| {
        a.risk_centroid.to_bits() == b.risk_centroid.to_bits()
            && a.disagreement.to_bits() == b.disagreement.to_bits()
    });
    Ok((
        same,
        format!("{} iterations compared bit for bit", c.run.iterations),
    ))
}

fn centroid_check(cfg: &ExperimentConfig) -> Result<(bool, String)> {
    let c = short(cfg);
    let setup = prepare(&c)?;
    let mut worst = 0.0_f64;
    for b_v in [0.1, 1.0, 10.0] {
        let t = run(
            &run_config(
                &c,
                &setup,
                PerturbationScheme::GraphHomomorphic { b_v },
                c.seed,
            ),
            &setup.eval_set,
        )?;
        worst = t
            .rows
            .iter()
            .filter_map(|r| r.centroid_residual)
            .fold(worst, f64::max);
    }
    Ok((
        worst <= crate::engine::CENTROID_TOL,
        format!("b_v up to 10, max relative residual = {worst:.2e}"),
    ))
}

/// Runs the schemes that carry a disagreement bound (none and
/// graph-homomorphic).
pub fn bound_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    let mut c = cfg.clone();
    c.schemes
        .retain(|s| !matches!(s, PerturbationScheme::Iid { .. }));
    if c.schemes.is_empty() {
        c.schemes.push(PerturbationScheme::None);
    }
    run_experiment(&c)
}

fn bound_b_v(s: PerturbationScheme) -> f64 {
    match s {
        PerturbationScheme::GraphHomomorphic { b_v } => b_v,
        _ => 0.0,
    }
}

pub fn bound_inputs(
    cfg: &ExperimentConfig,
    out: &ExperimentOutcome,
    s: PerturbationScheme,
) -> Result<BoundInputs> {
    BoundInputs::new(
        cfg.run.mu,
        &out.setup.loss,
        bound_b_v(s),
        &out.setup.matrix,
        cfg.analysis.j_floor,
    )
}

/// Worst ratio of replica-averaged disagreement to its bound.
pub fn disagreement_check(
    cfg: &ExperimentConfig,
    out: &ExperimentOutcome,
) -> Result<(bool, String)> {
    let mut notes = Vec::new();
    let mut ok = true;
    for s in &out.summaries {
        let bound = disagreement_bound(&bound_inputs(cfg, out, s.scheme)?);
        let worst = s
            .rows
            .iter()
            .map(|r| r.disagreement.mean)
            .fold(0.0_f64, f64::max);
        ok &= worst <= bound * (1.0 + DISAGREEMENT_SLACK);
        notes.push(format!(
            "{}: max {worst:.3e} <= bound {bound:.3e}",
            s.scheme.label()
        ));
    }
    Ok((
        ok,
        format!("{} replicas; {}", out.replicas, notes.join("; ")),
    ))
}

/// Smallest replica-averaged descent residual relative to its slack.
pub fn descent_check(cfg: &ExperimentConfig, out: &ExperimentOutcome) -> Result<(bool, String)> {
    let mut notes = Vec::new();
    let mut ok = true;
    for (s, traces) in out.summaries.iter().zip(&out.traces) {
        let inputs = bound_inputs(cfg, out, s.scheme)?;
        if !inputs.descent_hypothesis_holds() {
            notes.push(format!(
                "{}: skipped, mu * delta = {:.3} >= 1/2",
                s.scheme.label(),
                inputs.step_size * inputs.smoothness
            ));
            continue;
        }
        let mut worst = f64::INFINITY;
        for i in 1..=cfg.run.iterations {
            let r = descent_residual_stats(traces, &inputs, i)?;
            let slack = 3.0 * r.stderr + inputs.third_order_allowance();
            ok &= r.mean >= -slack;
            worst = worst.min(r.mean + slack);
        }
        notes.push(format!(
            "{}: min residual + slack = {worst:.3e}",
            s.scheme.label()
        ));
    }
    Ok((ok, notes.join("; ")))
}
