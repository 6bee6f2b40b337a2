//! Acceptance criteria, one PASS/FAIL line each. Exits nonzero if any fails.

use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::Rng;

use homodiff::analysis::{descent_residual_stats, disagreement_bound};
use homodiff::config::ExperimentConfig;
use homodiff::engine::{run, CENTROID_TOL};
use homodiff::experiment::{prepare, run_config, run_experiment};
use homodiff::graph::{blend_self_loops, metropolis_weights, Topology};
use homodiff::loss::{LossKind, LossModel, Sample};
use homodiff::perturbation::{homomorphic_plan, weighted_plan_sum, PerturbationScheme};
use homodiff::privacy::{empirical_dp_check, epsilon, sensitivity_bound};
use homodiff::rng::{agent_streams, stream, Purpose};
use homodiff::validation::{bound_experiment, bound_inputs, central_difference, relative_error};
use homodiff::Result;

const SEED: u64 = 20_240_601;

type Timed = (Result<Outcome>, Duration);

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Result<Outcome> {
    Ok(Outcome {
        passed,
        detail: detail.into(),
    })
}

fn config(name: &str) -> ExperimentConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name);
    ExperimentConfig::from_file(&path).expect("bundled configuration")
}

fn nullspace() -> Result<Outcome> {
    let mut rng = stream(SEED, Purpose::Validation, 1);
    let mut worst = 0.0_f64;
    for t in 0..50 {
        let k = rng.random_range(3..=20);
        let p = rng.random_range(0.15..0.8);
        let topo = Topology::erdos_renyi(k, p, &mut rng)?;
        let theta = rng.random_range(0.0..0.9);
        let a = blend_self_loops(&metropolis_weights(&topo)?, theta);
        let dim = rng.random_range(1..=8);
        let b_v = rng.random_range(0.01..10.0);
        let mut streams = agent_streams(SEED + t, Purpose::Perturbation, k);
        for _ in 0..100 {
            let plan = homomorphic_plan(&a, b_v, dim, &mut streams)?;
            worst = weighted_plan_sum(&a, &plan)?
                .iter()
                .fold(worst, |w, x| w.max(x.abs()));
        }
    }
    outcome(
        worst <= 1e-12,
        format!("50 topologies x 100 plans, max |sum| = {worst:.2e}"),
    )
}

fn centroid() -> Result<Outcome> {
    let mut cfg = config("fig1.cfg");
    cfg.run.iterations = 100;
    let mut worst = 0.0_f64;
    let mut runs = 0;
    for (theta, mu) in [(0.05, 0.05), (0.8, 1.0)] {
        cfg.topology.self_loop_blend = theta;
        cfg.run.mu = mu;
        let setup = prepare(&cfg)?;
        for b_v in [0.01, 0.5, 1.0, 3.0, 10.0] {
            for r in 0..4 {
                let rc = run_config(
                    &cfg,
                    &setup,
                    PerturbationScheme::GraphHomomorphic { b_v },
                    SEED + r,
                );
                let trace = run(&rc, &setup.eval_set)?;
                worst = trace
                    .rows
                    .iter()
                    .filter_map(|x| x.centroid_residual)
                    .fold(worst, f64::max);
                runs += 1;
            }
        }
    }
    outcome(
        worst <= CENTROID_TOL,
        format!("{runs} runs, b_v up to 10, max relative residual = {worst:.2e}"),
    )
}

fn zero_noise() -> Result<Outcome> {
    let cfg = config("fig1.cfg");
    let setup = prepare(&cfg)?;
    let mut identical = true;
    for r in 0..5 {
        let none = run(
            &run_config(&cfg, &setup, PerturbationScheme::None, SEED + r),
            &setup.eval_set,
        )?;
        let hom = run(
            &run_config(
                &cfg,
                &setup,
                PerturbationScheme::GraphHomomorphic { b_v: 0.0 },
                SEED + r,
            ),
            &setup.eval_set,
        )?;
        identical &= none.rows.iter().zip(&hom.rows).all(|(a, b)| {
            a.iteration == b.iteration
                && a.risk_centroid.to_bits() == b.risk_centroid.to_bits()
                && a.grad_norm_sq_centroid.to_bits() == b.grad_norm_sq_centroid.to_bits()
                && a.disagreement.to_bits() == b.disagreement.to_bits()
                && a.disagreement_bound.map(f64::to_bits) == b.disagreement_bound.map(f64::to_bits)
                && a.epsilon == b.epsilon
                && a.sensitivity_bound.to_bits() == b.sensitivity_bound.to_bits()
        }) && none.rows.len() == hom.rows.len();
    }
    outcome(identical, "5 seeds x 300 iterations on the fig1 setup")
}

fn accountant() -> Result<Outcome> {
    let mut ok = sensitivity_bound(1.0, 10.0, 0) == 0.0 && sensitivity_bound(0.05, 10.0, 0) == 0.0;
    // integer form of the telescoped sum: sum_{n=1}^{i} 2n = i^2 + i
    let mut acc: u128 = 0;
    for i in 1..=10_000u128 {
        acc += 2 * i;
        ok &= acc == i * i + i;
    }
    let mut worst = 0.0_f64;
    for (mu, g, b) in [
        (0.001, 10.0, 1.0),
        (0.05, 10.0, 1.0),
        (1.0, 10.0, 0.7),
        (0.3, 2.5, 3.0),
    ] {
        // Neumaier-compensated running sum of the per-step increments
        let (mut sum, mut comp) = (0.0_f64, 0.0_f64);
        for i in 1..=10_000u64 {
            let inc = 2.0 * mu * g * i as f64 / b;
            let t = sum + inc;
            comp += if sum.abs() >= inc.abs() {
                (sum - t) + inc
            } else {
                (inc - t) + sum
            };
            sum = t;
            let e = epsilon(mu, g, b, i)?;
            worst = worst.max(((sum + comp) - e).abs() / e);
            for c in [2.0, 4.0, 0.5] {
                ok &= epsilon(mu, g, b * c, i)? == e / c;
            }
            let c = 3.0;
            worst = worst.max((epsilon(mu, g, b * c, i)? - e / c).abs() / (e / c));
        }
        ok &= epsilon(mu, g, b, 0)? == 0.0;
    }
    outcome(
        ok && worst <= 1e-12,
        format!("i <= 1e4, integer identity exact, max float deviation {worst:.2e} relative"),
    )
}

fn dp_micro() -> Result<Outcome> {
    let mut rng = stream(SEED, Purpose::Validation, 5);
    let r = empirical_dp_check(1.0, 1.0, 1.0, 1_000_000, &mut rng)?;
    outcome(
        r.pass,
        format!(
            "max |log ratio| = {:.4} <= 1 + 3 se ({:.4}), {} bins",
            r.max_log_ratio,
            1.0 + 3.0 * r.std_error,
            r.bins_used
        ),
    )
}

fn disagreement_bound_holds(
    cfg: &ExperimentConfig,
    out: &homodiff::experiment::ExperimentOutcome,
) -> Result<Outcome> {
    let mut ok = true;
    let mut notes = Vec::new();
    for s in &out.summaries {
        let bound = disagreement_bound(&bound_inputs(cfg, out, s.scheme)?);
        let worst = s
            .rows
            .iter()
            .map(|r| r.disagreement.mean / bound)
            .fold(0.0_f64, f64::max);
        ok &= worst <= 1.05;
        notes.push(format!("{} max ratio {worst:.3e}", s.scheme.label()));
    }
    outcome(
        ok,
        format!("{} replicas; {}", out.replicas, notes.join(", ")),
    )
}

fn descent_bound_holds(
    cfg: &ExperimentConfig,
    out: &homodiff::experiment::ExperimentOutcome,
) -> Result<Outcome> {
    let mut ok = true;
    let mut notes = Vec::new();
    for (s, traces) in out.summaries.iter().zip(&out.traces) {
        let inputs = bound_inputs(cfg, out, s.scheme)?;
        if !inputs.descent_hypothesis_holds() {
            ok = false;
            notes.push(format!("{}: mu * delta >= 1/2", s.scheme.label()));
            continue;
        }
        let mut worst = f64::INFINITY;
        for i in 1..=cfg.run.iterations {
            let r = descent_residual_stats(traces, &inputs, i)?;
            let margin = r.mean + 3.0 * r.stderr + inputs.third_order_allowance();
            worst = worst.min(margin);
        }
        ok &= worst >= 0.0;
        notes.push(format!(
            "{} min residual + slack {worst:.3e}",
            s.scheme.label()
        ));
    }
    outcome(ok, notes.join(", "))
}

fn fig1() -> Result<Outcome> {
    let cfg = config("fig1.cfg");
    let out = run_experiment(&cfg)?;
    let plateau = |label: &str| {
        out.summary(label)
            .map(|s| s.plateau_excess_risk.mean)
            .unwrap_or(f64::NAN)
    };
    let (none, iid, hom) = (
        plateau("none"),
        plateau("iid"),
        plateau("graph_homomorphic"),
    );
    let ok = none <= hom && hom < iid && hom <= 2.0 * none && iid >= 2.0 * hom;
    outcome(
        ok,
        format!(
            "{} replicas; none {none:.4e}, homomorphic {hom:.4e} ({:.2}x none), iid {iid:.4e} ({:.2}x homomorphic)",
            out.replicas,
            hom / none,
            iid / hom
        ),
    )
}

fn gradients() -> Result<Outcome> {
    let mut rng = stream(SEED, Purpose::Validation, 9);
    let models = [
        LossModel::new(LossKind::LeastSquares, f64::MAX, 1.0)?,
        LossModel::new(LossKind::RidgeLogistic { rho: 0.1 }, f64::MAX, 1.0)?,
    ];
    let mut worst = 0.0_f64;
    let mut resampled = 0;
    for model in &models {
        let mut accepted = 0;
        while accepted < 1000 {
            let m = rng.random_range(1..=8);
            let w: Vec<f64> = (0..m).map(|_| rng.random_range(-3.0..3.0)).collect();
            let s = Sample {
                features: (0..m).map(|_| rng.random_range(-3.0..3.0)).collect(),
                label: if rng.random_bool(0.5) { 1.0 } else { -1.0 },
            };
            let g = model.raw_gradient(&w, &s)?;
            if g.iter().map(|x| x * x).sum::<f64>().sqrt() < 1e-2 {
                resampled += 1;
                continue;
            }
            let fd = central_difference(&w, |x| model.loss(x, &s))?;
            worst = worst.max(relative_error(&g, &fd));
            accepted += 1;
        }
    }
    outcome(
        worst <= 1e-6,
        format!("2 x 1000 points ({resampled} resampled), max relative error {worst:.2e}"),
    )
}

fn main() -> ExitCode {
    let bounds = config("bounds.cfg");
    let mut bound_run: Option<(Result<homodiff::experiment::ExperimentOutcome>, Duration)> = None;
    let mut with_bounds =
        |f: fn(&ExperimentConfig, &homodiff::experiment::ExperimentOutcome) -> Result<Outcome>| {
            let (out, elapsed) = bound_run.get_or_insert_with(|| {
                let start = Instant::now();
                (bound_experiment(&bounds), start.elapsed())
            });
            let start = Instant::now();
            let r = match out {
                Ok(o) => f(&bounds, o),
                Err(e) => Err(homodiff::Error::InvalidParameter(e.to_string())),
            };
            (r, *elapsed + start.elapsed())
        };

    let timed = |f: fn() -> Result<Outcome>| {
        let start = Instant::now();
        let r = f();
        (r, start.elapsed())
    };

    let results: Vec<(u32, &str, Option<u64>, Timed)> = vec![
        (1, "nullspace exactness", Some(10), timed(nullspace)),
        (2, "centroid invariance", Some(10), timed(centroid)),
        (3, "zero-noise equivalence", None, timed(zero_noise)),
        (4, "accountant identities", None, timed(accountant)),
        (5, "empirical DP micro-check", Some(30), timed(dp_micro)),
        (
            6,
            "disagreement bound",
            Some(120),
            with_bounds(disagreement_bound_holds),
        ),
        (
            7,
            "centroid descent bound",
            Some(120),
            with_bounds(descent_bound_holds),
        ),
        (8, "scheme ordering on fig1", None, timed(fig1)),
        (9, "gradient finite differences", None, timed(gradients)),
    ];

    let mut all = true;
    for (n, name, budget, (r, elapsed)) in results {
        let secs = elapsed.as_secs_f64();
        let (passed, detail) = match r {
            Ok(o) => (o.passed, o.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        let in_time = budget.is_none_or(|b| secs < b as f64);
        let passed = passed && in_time;
        all &= passed;
        let budget = budget.map_or(String::new(), |b| format!(" / {b} s"));
        println!(
            "criterion {n}: {} {name}: {detail} [{secs:.2} s{budget}]",
            if passed { "PASS" } else { "FAIL" }
        );
    }
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
