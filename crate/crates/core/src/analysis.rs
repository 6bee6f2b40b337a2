//! Per-iteration metrics and the analytical disagreement / descent bounds.

use std::io::Write;

use crate::error::{Error, Result};
use crate::graph::CombinationMatrix;
use crate::loss::LossModel;
use crate::perturbation::PerturbationScheme;
use crate::privacy::Epsilon;

/// Constants entering the disagreement and descent bounds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundInputs {
    pub step_size: f64,
    pub clip_bound: f64,
    pub smoothness: f64,
    pub b_v: f64,
    pub lambda2: f64,
    pub a_bar: f64,
    /// Declared lower bound on the risk.
    pub j_floor: f64,
}

impl BoundInputs {
    pub fn new(
        step_size: f64,
        loss: &LossModel,
        b_v: f64,
        a: &CombinationMatrix,
        j_floor: f64,
    ) -> Result<Self> {
        if a.lambda2() >= 1.0 {
            return Err(Error::InvalidParameter(format!(
                "bounds need lambda2 < 1, got {}",
                a.lambda2()
            )));
        }
        Ok(Self {
            step_size,
            clip_bound: loss.clip_bound,
            smoothness: loss.smoothness,
            b_v,
            lambda2: a.lambda2(),
            a_bar: a_bar(a)?,
            j_floor,
        })
    }

    /// `mu * delta < 1/2`: the gradient term of the descent relation has
    /// the right sign.
    pub fn descent_hypothesis_holds(&self) -> bool {
        self.step_size * self.smoothness < 0.5
    }

    /// Allowance for the dropped third-order term: `10 mu^3 delta G^2`.
    pub fn third_order_allowance(&self) -> f64 {
        10.0 * self.step_size.powi(3) * self.smoothness * self.clip_bound.powi(2)
    }
}

/// `max_k (1 - a_kk) + (1 - a_kk)^2 / a_kk^2`.
pub fn a_bar(a: &CombinationMatrix) -> Result<f64> {
    (0..a.size()).try_fold(0.0_f64, |acc, k| {
        let d = a.self_weight(k);
        if d <= 0.0 {
            return Err(Error::ZeroSelfWeight { agent: k });
        }
        let off = 1.0 - d;
        Ok(acc.max(off + off * off / (d * d)))
    })
}

/// `(1/K) sum_k |w_k - w_c|^2`.
pub fn disagreement(iterates: &[Vec<f64>]) -> f64 {
    let c = centroid(iterates);
    let k = iterates.len() as f64;
    iterates
        .iter()
        .map(|w| w.iter().zip(&c).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
        .sum::<f64>()
        / k
}

pub fn centroid(iterates: &[Vec<f64>]) -> Vec<f64> {
    let m = iterates.first().map_or(0, Vec::len);
    let mut c = vec![0.0; m];
    for w in iterates {
        for (ci, wi) in c.iter_mut().zip(w) {
            *ci += wi;
        }
    }
    let inv = 1.0 / iterates.len() as f64;
    c.iter_mut().for_each(|x| *x *= inv);
    c
}

/// `mu^2 lambda2^2 / (1 - lambda2)^2 G^2 + b_v^2 2 a_bar / (1 - lambda2)`.
pub fn disagreement_bound(inputs: &BoundInputs) -> f64 {
    let BoundInputs {
        step_size: mu,
        clip_bound: g,
        b_v,
        lambda2: l2,
        a_bar,
        ..
    } = *inputs;
    mu * mu * l2 * l2 / ((1.0 - l2) * (1.0 - l2)) * g * g + b_v * b_v * 2.0 * a_bar / (1.0 - l2)
}

/// Right-hand side of the descent relation without its third-order term,
/// given the previous risk and squared gradient norm at the centroid.
pub fn descent_rhs(inputs: &BoundInputs, prev_risk: f64, prev_grad_norm_sq: f64) -> f64 {
    let BoundInputs {
        step_size: mu,
        clip_bound: g,
        smoothness: delta,
        b_v,
        lambda2: l2,
        a_bar,
        ..
    } = *inputs;
    prev_risk - 0.5 * mu * (1.0 - 2.0 * mu * delta) * prev_grad_norm_sq
        + 0.5 * mu * (1.0 + 2.0 * delta * mu) * b_v * b_v * 2.0 * delta * delta * a_bar / (1.0 - l2)
        + 2.0 * mu * mu * delta * g * g
}

/// `RHS(i) - J(w_{c,i})` on a single trace. Averaging this over replicas
/// gives the residual of the expectation bound, since it is affine in the
/// risk and gradient columns.
pub fn descent_residual(trace: &RunTrace, inputs: &BoundInputs, i: usize) -> Result<f64> {
    if i == 0 || i >= trace.rows.len() {
        return Err(Error::InvalidParameter(format!(
            "descent residual needs 1 <= i < {}, got {i}",
            trace.rows.len()
        )));
    }
    let prev = &trace.rows[i - 1];
    Ok(
        descent_rhs(inputs, prev.risk_centroid, prev.grad_norm_sq_centroid)
            - trace.rows[i].risk_centroid,
    )
}

/// Replica mean and standard error of [`descent_residual`].
pub fn descent_residual_stats(
    traces: &[RunTrace],
    inputs: &BoundInputs,
    i: usize,
) -> Result<MeanStderr> {
    let vals = traces
        .iter()
        .map(|t| descent_residual(t, inputs, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(mean_stderr(&vals))
}

/// `(1/i) sum_{n < i}` of the replica-averaged squared centroid gradient norm.
pub fn stationarity_summary(traces: &[RunTrace], i: usize) -> Result<f64> {
    if traces.is_empty() {
        return Err(Error::InvalidParameter("no completed replica".into()));
    }
    let len = traces.iter().map(|t| t.rows.len()).min().unwrap_or(0);
    if i == 0 || i > len {
        return Err(Error::InvalidParameter(format!(
            "stationarity summary needs 1 <= i <= {len}, got {i}"
        )));
    }
    let r = traces.len() as f64;
    let total: f64 = (0..i)
        .map(|n| {
            traces
                .iter()
                .map(|t| t.rows[n].grad_norm_sq_centroid)
                .sum::<f64>()
                / r
        })
        .sum();
    Ok(total / i as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanStderr {
    pub mean: f64,
    pub stderr: f64,
}

pub fn mean_stderr(values: &[f64]) -> MeanStderr {
    let n = values.len() as f64;
    if values.is_empty() {
        return MeanStderr {
            mean: f64::NAN,
            stderr: f64::NAN,
        };
    }
    let mean = values.iter().sum::<f64>() / n;
    let stderr = if values.len() > 1 {
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (var / n).sqrt()
    } else {
        0.0
    };
    MeanStderr { mean, stderr }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub iteration: usize,
    pub risk_centroid: f64,
    pub grad_norm_sq_centroid: f64,
    pub disagreement: f64,
    /// Absent for schemes the disagreement bound does not cover.
    pub disagreement_bound: Option<f64>,
    pub epsilon: Epsilon,
    pub sensitivity_bound: f64,
    /// `|w_c - mean(phi)|`, graph-homomorphic runs only.
    pub centroid_residual: Option<f64>,
}

pub const TRACE_HEADER: [&str; 8] = [
    "iter",
    "risk_centroid",
    "grad_norm_sq_centroid",
    "disagreement",
    "disagreement_bound",
    "epsilon",
    "sensitivity_bound",
    "centroid_residual",
];

pub const NOT_APPLICABLE: &str = "NA";

/// One row per iteration `0..=T`.
#[derive(Debug, Clone, PartialEq)]
pub struct RunTrace {
    pub scheme: PerturbationScheme,
    pub seed: u64,
    pub rows: Vec<TraceRow>,
}

impl RunTrace {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        wtr.write_record(TRACE_HEADER)?;
        let opt = |v: Option<f64>| v.map_or_else(|| NOT_APPLICABLE.to_string(), |x| x.to_string());
        for r in &self.rows {
            wtr.write_record([
                r.iteration.to_string(),
                r.risk_centroid.to_string(),
                r.grad_norm_sq_centroid.to_string(),
                r.disagreement.to_string(),
                opt(r.disagreement_bound),
                r.epsilon.to_string(),
                r.sensitivity_bound.to_string(),
                opt(r.centroid_residual),
            ])?;
        }
        wtr.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("csv is utf-8")
    }
}
