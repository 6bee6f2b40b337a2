//! Synchronous adapt-then-combine diffusion with perturbed messages.
//!
//! Each iteration every agent takes a clipped stochastic-gradient step from
//! its previous iterate (adapt), sends `psi_{lk} = phi_l + q_{lk}` to each
//! neighbor `k` (itself included), and averages what it receives with the
//! combination weights (combine). The non-private recursion is the special
//! case of an all-zero plan; the i.i.d. scheme applies the perturbation to
//! the current intermediate estimate `phi_{k,i}`.

use std::sync::Arc;

use crate::analysis::{
    centroid, disagreement, disagreement_bound, BoundInputs, RunTrace, TraceRow,
};
use crate::error::{Error, Result};
use crate::graph::CombinationMatrix;
use crate::loss::{norm, DataSpec, LossModel, Sample, SampleSource};
use crate::perturbation::{PerturbationPlan, PerturbationScheme};
use crate::privacy::{epsilon_or_unbounded, sensitivity_bound, Epsilon};
use crate::rng::{agent_streams, Purpose, StreamRng};

/// Tolerance on `|w_c - mean(phi)| / max(1, |mean(phi)|)` for
/// graph-homomorphic runs.
pub const CENTROID_TOL: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub step_size: f64,
    pub iterations: usize,
    pub scheme: PerturbationScheme,
    pub seed: u64,
    pub loss: LossModel,
    pub data: DataSpec,
    pub matrix: Arc<CombinationMatrix>,
    /// Common starting point of all agents; zero when absent.
    pub initial: Option<Vec<f64>>,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "step size must be positive, got {}",
                self.step_size
            )));
        }
        self.scheme.validate()?;
        self.data.validate()?;
        if let Some(w0) = &self.initial {
            if w0.len() != self.data.dim() {
                return Err(Error::DimensionMismatch {
                    expected: self.data.dim(),
                    actual: w0.len(),
                });
            }
        }
        if self.scheme.is_homomorphic() {
            self.matrix.check_assumptions()?;
        }
        Ok(())
    }

    pub fn num_agents(&self) -> usize {
        self.matrix.size()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkState {
    pub iteration: usize,
    pub w: Vec<Vec<f64>>,
    /// Intermediate estimates of the last adapt step (equal to `w` at start).
    pub phi: Vec<Vec<f64>>,
    pub centroid: Vec<f64>,
}

impl NetworkState {
    pub fn uniform(agents: usize, start: Vec<f64>) -> Self {
        let w = vec![start.clone(); agents];
        Self {
            iteration: 0,
            phi: w.clone(),
            w,
            centroid: start,
        }
    }
}

/// `phi_k = w_k - mu * grad(w_k; batch_k)` for every agent, all from the
/// same pre-update iterates.
pub fn adapt_step(
    w: &[Vec<f64>],
    loss: &LossModel,
    step_size: f64,
    batches: &[Vec<Sample>],
) -> Result<Vec<Vec<f64>>> {
    if batches.len() != w.len() {
        return Err(Error::DimensionMismatch {
            expected: w.len(),
            actual: batches.len(),
        });
    }
    w.iter()
        .zip(batches)
        .map(|(wk, batch)| {
            let g = loss.minibatch_gradient(wk, batch)?;
            Ok(wk
                .iter()
                .zip(&g)
                .map(|(x, gx)| x - step_size * gx)
                .collect())
        })
        .collect()
}

/// `w_k = sum_{l in N_k} a_lk (phi_l + q_lk)`.
pub fn combine_step(
    phi: &[Vec<f64>],
    plan: &PerturbationPlan,
    a: &CombinationMatrix,
) -> Result<Vec<Vec<f64>>> {
    let m = phi.first().map_or(0, Vec::len);
    if phi.len() != a.size() {
        return Err(Error::StructureMismatch(format!(
            "{} intermediate estimates for {} agents",
            phi.len(),
            a.size()
        )));
    }
    plan.check_structure(a, m)?;
    let mut out = vec![vec![0.0; m]; a.size()];
    let mut psi = vec![0.0; m];
    for (k, wk) in out.iter_mut().enumerate() {
        // a is symmetric, so N_k lists exactly the senders l with a_lk > 0
        for &l in a.neighbors(k) {
            let q = plan.get(l, k).expect("structure checked");
            for ((p, f), n) in psi.iter_mut().zip(&phi[l]).zip(q) {
                *p = f + n;
            }
            let weight = a.weight(l, k);
            for (x, p) in wk.iter_mut().zip(&psi) {
                *x += weight * p;
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub iteration: usize,
    /// Relative centroid residual, graph-homomorphic runs only.
    pub centroid_residual: Option<f64>,
}

/// A single replica in progress. Owns the per-agent data and noise streams.
pub struct Simulation<'a> {
    config: &'a RunConfig,
    source: &'a dyn SampleSource,
    state: NetworkState,
    data_streams: Vec<StreamRng>,
    noise_streams: Vec<StreamRng>,
}

impl<'a> Simulation<'a> {
    pub fn new(config: &'a RunConfig, source: &'a dyn SampleSource) -> Result<Self> {
        config.validate()?;
        let k = config.num_agents();
        let m = source.dim();
        let start = config.initial.clone().unwrap_or_else(|| vec![0.0; m]);
        if start.len() != m {
            return Err(Error::DimensionMismatch {
                expected: m,
                actual: start.len(),
            });
        }
        Ok(Self {
            config,
            source,
            state: NetworkState::uniform(k, start),
            data_streams: agent_streams(config.seed, Purpose::Data, k),
            noise_streams: agent_streams(config.seed, Purpose::Perturbation, k),
        })
    }

    pub fn state(&self) -> &NetworkState {
        &self.state
    }

    pub fn step(&mut self) -> Result<StepReport> {
        let cfg = self.config;
        let batch = cfg.data.samples_per_agent_per_iter;
        let batches: Vec<Vec<Sample>> = self
            .data_streams
            .iter_mut()
            .enumerate()
            .map(|(k, rng)| (0..batch).map(|_| self.source.draw(k, rng)).collect())
            .collect();
        let phi = adapt_step(&self.state.w, &cfg.loss, cfg.step_size, &batches)?;
        let iteration = self.state.iteration + 1;
        let plan = cfg.scheme.plan(
            &cfg.matrix,
            self.source.dim(),
            iteration,
            &mut self.noise_streams,
        )?;
        let w = combine_step(&phi, &plan, &cfg.matrix)?;
        let c = centroid(&w);

        let centroid_residual = if cfg.scheme.is_homomorphic() {
            let phi_mean = centroid(&phi);
            let diff: Vec<f64> = c.iter().zip(&phi_mean).map(|(a, b)| a - b).collect();
            let residual = norm(&diff) / norm(&phi_mean).max(1.0);
            if !(residual <= CENTROID_TOL) {
                return Err(Error::CentroidDrift {
                    iteration,
                    residual,
                });
            }
            Some(residual)
        } else {
            None
        };

        self.state = NetworkState {
            iteration,
            w,
            phi,
            centroid: c,
        };
        Ok(StepReport {
            iteration,
            centroid_residual,
        })
    }
}

/// Runs `config.iterations` steps on the synthetic data of `config.data`,
/// evaluating the centroid on `eval_set`.
pub fn run(config: &RunConfig, eval_set: &[Sample]) -> Result<RunTrace> {
    run_with_source(config, &config.data, eval_set)
}

pub fn run_with_source(
    config: &RunConfig,
    source: &dyn SampleSource,
    eval_set: &[Sample],
) -> Result<RunTrace> {
    let mut sim = Simulation::new(config, source)?;
    let tracker = RowBuilder::new(config, eval_set)?;
    let mut rows = Vec::with_capacity(config.iterations + 1);
    rows.push(tracker.row(sim.state(), config.scheme.is_homomorphic().then_some(0.0))?);
    for _ in 0..config.iterations {
        let report = sim.step()?;
        rows.push(tracker.row(sim.state(), report.centroid_residual)?);
    }
    Ok(RunTrace {
        scheme: config.scheme,
        seed: config.seed,
        rows,
    })
}

struct RowBuilder<'a> {
    config: &'a RunConfig,
    eval_set: &'a [Sample],
    bound: Option<f64>,
}

impl<'a> RowBuilder<'a> {
    fn new(config: &'a RunConfig, eval_set: &'a [Sample]) -> Result<Self> {
        if eval_set.is_empty() {
            return Err(Error::EmptyEvalSet);
        }
        let b_v = match config.scheme {
            PerturbationScheme::None => Some(0.0),
            PerturbationScheme::GraphHomomorphic { b_v } => Some(b_v),
            PerturbationScheme::Iid { .. } => None,
        };
        let bound = match b_v {
            Some(b_v) if config.matrix.check_assumptions().is_ok() => Some(disagreement_bound(
                &BoundInputs::new(config.step_size, &config.loss, b_v, &config.matrix, 0.0)?,
            )),
            _ => None,
        };
        Ok(Self {
            config,
            eval_set,
            bound,
        })
    }

    fn row(&self, state: &NetworkState, centroid_residual: Option<f64>) -> Result<TraceRow> {
        let cfg = self.config;
        let i = state.iteration as u64;
        let grad = cfg.loss.risk_gradient(&state.centroid, self.eval_set)?;
        let epsilon = match cfg.scheme {
            PerturbationScheme::None => Epsilon::NoPrivacy,
            s => epsilon_or_unbounded(cfg.step_size, cfg.loss.clip_bound, s.laplace_scale(), i),
        };
        Ok(TraceRow {
            iteration: state.iteration,
            risk_centroid: cfg.loss.empirical_risk(&state.centroid, self.eval_set)?,
            grad_norm_sq_centroid: grad.iter().map(|g| g * g).sum(),
            disagreement: disagreement(&state.w),
            disagreement_bound: self.bound,
            epsilon,
            sensitivity_bound: sensitivity_bound(cfg.step_size, cfg.loss.clip_bound, i),
            centroid_residual,
        })
    }
}
