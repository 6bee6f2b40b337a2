//! Synthetic binary-classification data and the per-agent loss models.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_CLIP_BOUND: f64 = 10.0;

/// Parameter vector `w`; entries are finite.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "parameter entry {i} is not finite"
            )));
        }
        Ok(Self(values))
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl std::ops::Deref for ParamVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub features: Vec<f64>,
    pub label: f64,
}

/// Class-conditional Gaussian features with equiprobable labels `+1 / -1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSpec {
    pub mean_pos: Vec<f64>,
    pub mean_neg: Vec<f64>,
    pub feature_variance: f64,
    #[serde(default = "default_batch")]
    pub samples_per_agent_per_iter: usize,
    pub eval_set_size: usize,
}

fn default_batch() -> usize {
    1
}

impl DataSpec {
    pub fn validate(&self) -> Result<()> {
        if self.mean_pos.is_empty() {
            return Err(Error::Config("data.mean_pos must be nonempty".into()));
        }
        if self.mean_pos.len() != self.mean_neg.len() {
            return Err(Error::Config(format!(
                "data.mean_neg has dimension {}, data.mean_pos has {}",
                self.mean_neg.len(),
                self.mean_pos.len()
            )));
        }
        if self
            .mean_pos
            .iter()
            .chain(&self.mean_neg)
            .any(|v| !v.is_finite())
        {
            return Err(Error::Config("data means must be finite".into()));
        }
        if !(self.feature_variance > 0.0 && self.feature_variance.is_finite()) {
            return Err(Error::Config(
                "data.feature_variance must be positive".into(),
            ));
        }
        if self.samples_per_agent_per_iter == 0 {
            return Err(Error::Config(
                "data.samples_per_agent_per_iter must be positive".into(),
            ));
        }
        if self.eval_set_size == 0 {
            return Err(Error::Config("data.eval_set_size must be positive".into()));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.mean_pos.len()
    }

    pub fn draw_sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Sample {
        let label = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        self.draw_with_label(label, rng)
    }

    pub fn draw_with_label<R: Rng + ?Sized>(&self, label: f64, rng: &mut R) -> Sample {
        let mean = if label > 0.0 {
            &self.mean_pos
        } else {
            &self.mean_neg
        };
        let sd = self.feature_variance.sqrt();
        let features = mean
            .iter()
            .map(|&m| m + sd * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Sample { features, label }
    }

    pub fn draw_set<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<Sample> {
        (0..n).map(|_| self.draw_sample(rng)).collect()
    }
}

/// Source of streaming samples for the diffusion engine.
pub trait SampleSource: Sync {
    fn dim(&self) -> usize;
    fn draw(&self, agent: usize, rng: &mut dyn rand::RngCore) -> Sample;
}

impl SampleSource for DataSpec {
    fn dim(&self) -> usize {
        DataSpec::dim(self)
    }

    fn draw(&self, _agent: usize, rng: &mut dyn rand::RngCore) -> Sample {
        self.draw_sample(rng)
    }
}

/// Hands every agent the same sample at every iteration.
#[derive(Debug, Clone)]
pub struct FixedSample(pub Sample);

impl SampleSource for FixedSample {
    fn dim(&self) -> usize {
        self.0.features.len()
    }

    fn draw(&self, _agent: usize, _rng: &mut dyn rand::RngCore) -> Sample {
        self.0.clone()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossKind {
    /// `Q = 1/2 (gamma - h^T w)^2`
    LeastSquares,
    /// `Q = ln(1 + exp(-gamma h^T w)) + rho/2 |w|^2`
    RidgeLogistic { rho: f64 },
}

/// A per-sample loss with its gradient clipped to norm `clip_bound`.
/// `smoothness` is the declared Lipschitz constant of the gradient and only
/// enters the analytical bounds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossModel {
    pub kind: LossKind,
    pub clip_bound: f64,
    pub smoothness: f64,
}

impl LossModel {
    pub fn new(kind: LossKind, clip_bound: f64, smoothness: f64) -> Result<Self> {
        if !(clip_bound > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "clip bound G must be positive, got {clip_bound}"
            )));
        }
        if !(smoothness > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "smoothness must be positive, got {smoothness}"
            )));
        }
        if let LossKind::RidgeLogistic { rho } = kind {
            if !(rho >= 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "rho must be nonnegative, got {rho}"
                )));
            }
        }
        Ok(Self {
            kind,
            clip_bound,
            smoothness,
        })
    }

    /// Hessian-based smoothness estimate over a sample set:
    /// `max |h|^2` for least squares, `max |h|^2 / 4 + rho` for logistic.
    pub fn estimate_smoothness(kind: LossKind, samples: &[Sample]) -> f64 {
        let max_sq = samples
            .iter()
            .map(|s| dot(&s.features, &s.features))
            .fold(0.0_f64, f64::max);
        match kind {
            LossKind::LeastSquares => max_sq,
            LossKind::RidgeLogistic { rho } => max_sq / 4.0 + rho,
        }
    }

    pub fn rho(&self) -> f64 {
        match self.kind {
            LossKind::LeastSquares => 0.0,
            LossKind::RidgeLogistic { rho } => rho,
        }
    }

    pub fn loss(&self, w: &[f64], s: &Sample) -> Result<f64> {
        check_dim(w, s)?;
        let z = dot(&s.features, w);
        Ok(match self.kind {
            LossKind::LeastSquares => 0.5 * (s.label - z).powi(2),
            LossKind::RidgeLogistic { rho } => softplus(-s.label * z) + 0.5 * rho * dot(w, w),
        })
    }

    /// Unclipped gradient of the per-sample loss.
    pub fn raw_gradient(&self, w: &[f64], s: &Sample) -> Result<Vec<f64>> {
        check_dim(w, s)?;
        let z = dot(&s.features, w);
        Ok(match self.kind {
            LossKind::LeastSquares => {
                let r = s.label - z;
                s.features.iter().map(|h| -h * r).collect()
            }
            LossKind::RidgeLogistic { rho } => {
                // 1 / (1 + exp(gamma z)) = sigmoid(-gamma z)
                let c = -s.label * sigmoid(-s.label * z);
                s.features
                    .iter()
                    .zip(w)
                    .map(|(h, wi)| c * h + rho * wi)
                    .collect()
            }
        })
    }

    pub fn stochastic_gradient(&self, w: &[f64], s: &Sample) -> Result<Vec<f64>> {
        let mut g = self.raw_gradient(w, s)?;
        clip_in_place(&mut g, self.clip_bound);
        Ok(g)
    }

    /// Mean of clipped per-sample gradients.
    pub fn minibatch_gradient(&self, w: &[f64], batch: &[Sample]) -> Result<Vec<f64>> {
        if batch.len() == 1 {
            return self.stochastic_gradient(w, &batch[0]);
        }
        let mut acc = vec![0.0; w.len()];
        for s in batch {
            for (a, g) in acc.iter_mut().zip(self.stochastic_gradient(w, s)?) {
                *a += g;
            }
        }
        let n = batch.len() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        Ok(acc)
    }

    pub fn empirical_risk(&self, w: &[f64], eval_set: &[Sample]) -> Result<f64> {
        if eval_set.is_empty() {
            return Err(Error::EmptyEvalSet);
        }
        let mut sum = 0.0;
        for s in eval_set {
            check_dim(w, s)?;
            let z = dot(&s.features, w);
            sum += match self.kind {
                LossKind::LeastSquares => 0.5 * (s.label - z).powi(2),
                LossKind::RidgeLogistic { .. } => softplus(-s.label * z),
            };
        }
        Ok(sum / eval_set.len() as f64 + 0.5 * self.rho() * dot(w, w))
    }

    /// Full (unclipped) gradient of the empirical risk.
    pub fn risk_gradient(&self, w: &[f64], eval_set: &[Sample]) -> Result<Vec<f64>> {
        if eval_set.is_empty() {
            return Err(Error::EmptyEvalSet);
        }
        let mut g = vec![0.0; w.len()];
        for s in eval_set {
            check_dim(w, s)?;
            let z = dot(&s.features, w);
            let c = match self.kind {
                LossKind::LeastSquares => -(s.label - z),
                LossKind::RidgeLogistic { .. } => -s.label * sigmoid(-s.label * z),
            };
            for (gi, h) in g.iter_mut().zip(&s.features) {
                *gi += c * h;
            }
        }
        let n = eval_set.len() as f64;
        let rho = self.rho();
        for (gi, wi) in g.iter_mut().zip(w) {
            *gi = *gi / n + rho * wi;
        }
        Ok(g)
    }

    /// Minimizer and minimum of the empirical risk, by Newton's method with
    /// backtracking. Least squares falls back to a pseudo-inverse solve.
    pub fn minimize_risk(&self, eval_set: &[Sample]) -> Result<(Vec<f64>, f64)> {
        let first = eval_set.first().ok_or(Error::EmptyEvalSet)?;
        let m = first.features.len();
        let n = eval_set.len() as f64;
        let rho = self.rho();
        let mut w = vec![0.0; m];
        for _ in 0..100 {
            let g = self.risk_gradient(&w, eval_set)?;
            if norm(&g) < 1e-13 {
                break;
            }
            let mut hess = DMatrix::<f64>::zeros(m, m);
            for s in eval_set {
                let curv = match self.kind {
                    LossKind::LeastSquares => 1.0,
                    LossKind::RidgeLogistic { .. } => {
                        let p = sigmoid(dot(&s.features, &w));
                        p * (1.0 - p)
                    }
                };
                let h = DVector::from_column_slice(&s.features);
                hess.ger(curv / n, &h, &h, 1.0);
            }
            for i in 0..m {
                hess[(i, i)] += rho;
            }
            let rhs = DVector::from_vec(g.iter().map(|x| -x).collect());
            let step = match hess.clone().cholesky() {
                Some(ch) => ch.solve(&rhs),
                None => {
                    hess.pseudo_inverse(1e-12)
                        .map_err(|e| Error::InvalidParameter(e.to_string()))?
                        * rhs
                }
            };
            let f0 = self.empirical_risk(&w, eval_set)?;
            let slope: f64 = g.iter().zip(step.iter()).map(|(a, b)| a * b).sum();
            let mut t = 1.0;
            loop {
                let trial: Vec<f64> = w.iter().zip(step.iter()).map(|(a, b)| a + t * b).collect();
                if self.empirical_risk(&trial, eval_set)? <= f0 + 1e-4 * t * slope || t < 1e-10 {
                    w = trial;
                    break;
                }
                t *= 0.5;
            }
        }
        let j = self.empirical_risk(&w, eval_set)?;
        Ok((w, j))
    }
}

fn check_dim(w: &[f64], s: &Sample) -> Result<()> {
    if w.len() != s.features.len() {
        return Err(Error::DimensionMismatch {
            expected: s.features.len(),
            actual: w.len(),
        });
    }
    Ok(())
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Rescales `g` to norm `bound` when it is longer.
pub fn clip_in_place(g: &mut [f64], bound: f64) {
    let n = norm(g);
    if n > bound {
        let s = bound / n;
        g.iter_mut().for_each(|x| *x *= s);
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Writes samples as CSV with header `gamma,h_1,...,h_M`.
pub fn write_samples_csv<W: Write>(samples: &[Sample], out: W) -> Result<()> {
    let m = samples.first().map_or(0, |s| s.features.len());
    let mut wtr = csv::Writer::from_writer(out);
    let mut header = vec!["gamma".to_string()];
    header.extend((1..=m).map(|j| format!("h_{j}")));
    wtr.write_record(&header)?;
    for s in samples {
        let mut rec = vec![s.label.to_string()];
        rec.extend(s.features.iter().map(|v| v.to_string()));
        wtr.write_record(&rec)?;
    }
    wtr.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

pub fn read_samples_csv<R: Read>(input: R) -> Result<Vec<Sample>> {
    let mut rdr = csv::Reader::from_reader(input);
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let vals: Vec<f64> = rec
            .iter()
            .map(|f| {
                f.parse::<f64>()
                    .map_err(|e| Error::Config(format!("eval set csv: `{f}`: {e}")))
            })
            .collect::<Result<_>>()?;
        let (label, features) = vals
            .split_first()
            .ok_or_else(|| Error::Config("eval set csv: empty row".into()))?;
        out.push(Sample {
            features: features.to_vec(),
            label: *label,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Purpose};
    use proptest::prelude::*;
    use rand::Rng;

    fn ls(g: f64) -> LossModel {
        LossModel::new(LossKind::LeastSquares, g, 1.0).unwrap()
    }

    fn logistic(rho: f64, g: f64) -> LossModel {
        LossModel::new(LossKind::RidgeLogistic { rho }, g, 1.0).unwrap()
    }

    fn spec(m: usize) -> DataSpec {
        DataSpec {
            mean_pos: vec![1.0; m],
            mean_neg: vec![-1.0; m],
            feature_variance: 1.0,
            samples_per_agent_per_iter: 1,
            eval_set_size: 10,
        }
    }

    #[test]
    fn degenerate_variance_returns_mean() {
        let d = DataSpec {
            mean_pos: vec![1.0, 0.0],
            mean_neg: vec![-1.0, 0.0],
            feature_variance: 1e-30,
            samples_per_agent_per_iter: 1,
            eval_set_size: 1,
        };
        let s = d.draw_with_label(1.0, &mut stream(0, Purpose::Data, 0));
        assert!((s.features[0] - 1.0).abs() < 1e-12 && s.features[1].abs() < 1e-12);
        assert_eq!(s.label, 1.0);
    }

    #[test]
    fn label_frequency_and_feature_variance() {
        let mut d = spec(3);
        d.feature_variance = 2.0;
        let mut rng = stream(11, Purpose::Data, 0);
        let n = 100_000;
        let mut pos = 0usize;
        let mut sq = [0.0; 3];
        for _ in 0..n {
            let s = d.draw_sample(&mut rng);
            let mean = if s.label > 0.0 {
                &d.mean_pos
            } else {
                &d.mean_neg
            };
            if s.label > 0.0 {
                pos += 1;
            }
            for j in 0..3 {
                sq[j] += (s.features[j] - mean[j]).powi(2);
            }
        }
        assert!((pos as f64 / n as f64 - 0.5).abs() < 0.01);
        for v in sq {
            assert!((v / n as f64 / 2.0 - 1.0).abs() < 0.03);
        }
    }

    #[test]
    fn gradient_examples() {
        let s = Sample {
            features: vec![1.0, 0.0],
            label: 1.0,
        };
        assert_eq!(
            ls(10.0).stochastic_gradient(&[0.0, 0.0], &s).unwrap(),
            vec![-1.0, 0.0]
        );

        let s = Sample {
            features: vec![2.0, 0.0],
            label: 1.0,
        };
        let g = logistic(0.0, 10.0)
            .stochastic_gradient(&[0.0, 0.0], &s)
            .unwrap();
        assert!((g[0] + 1.0).abs() < 1e-15 && g[1] == 0.0);

        let mut raw = vec![3.0, 4.0];
        clip_in_place(&mut raw, 0.5);
        assert!((raw[0] - 0.3).abs() < 1e-15 && (raw[1] - 0.4).abs() < 1e-15);

        // raw least-squares gradient [3, 4] at w = 0: h = [3, 4], gamma = 1
        let s = Sample {
            features: vec![3.0, 4.0],
            label: 1.0,
        };
        let g = ls(0.5).stochastic_gradient(&[0.0, 0.0], &s).unwrap();
        assert!((g[0] + 0.3).abs() < 1e-15 && (g[1] + 0.4).abs() < 1e-15);
    }

    #[test]
    fn dimension_mismatch() {
        let s = Sample {
            features: vec![1.0, 0.0],
            label: 1.0,
        };
        assert!(matches!(
            ls(1.0).stochastic_gradient(&[0.0], &s),
            Err(Error::DimensionMismatch {
                expected: 2,
                actual: 1
            })
        ));
    }

    #[test]
    fn risk_examples() {
        let s = Sample {
            features: vec![1.0],
            label: 2.0,
        };
        assert_eq!(ls(10.0).empirical_risk(&[0.0], &[s]).unwrap(), 2.0);

        let s = Sample {
            features: vec![0.3, -2.0],
            label: -1.0,
        };
        let r = logistic(0.0, 10.0)
            .empirical_risk(&[0.0, 0.0], std::slice::from_ref(&s))
            .unwrap();
        assert!((r - 2f64.ln()).abs() < 1e-15);

        let w = [2.0, 0.0]; // |w|^2 = 4
        let l = logistic(0.0, 10.0)
            .empirical_risk(&w, std::slice::from_ref(&s))
            .unwrap();
        let r = logistic(0.1, 10.0).empirical_risk(&w, &[s]).unwrap();
        assert!((r - (l + 0.2)).abs() < 1e-14);

        assert!(matches!(
            ls(1.0).empirical_risk(&[0.0], &[]),
            Err(Error::EmptyEvalSet)
        ));
    }

    #[test]
    fn minimizer_is_stationary() {
        let d = spec(4);
        let set = d.draw_set(500, &mut stream(5, Purpose::EvalSet, 0));
        for model in [logistic(0.1, 10.0), ls(10.0)] {
            let (w, j) = model.minimize_risk(&set).unwrap();
            assert!(norm(&model.risk_gradient(&w, &set).unwrap()) < 1e-10);
            assert!(j <= model.empirical_risk(&[0.0; 4], &set).unwrap());
        }
    }

    #[test]
    fn risk_gradient_matches_finite_differences() {
        let d = spec(5);
        let set = d.draw_set(200, &mut stream(8, Purpose::EvalSet, 0));
        let mut rng = stream(9, Purpose::Validation, 0);
        for model in [logistic(0.1, 10.0), ls(10.0)] {
            for _ in 0..20 {
                let w: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
                let g = model.risk_gradient(&w, &set).unwrap();
                let fd = central_difference(|x| model.empirical_risk(x, &set).unwrap(), &w);
                let err = norm(&g.iter().zip(&fd).map(|(a, b)| a - b).collect::<Vec<_>>());
                assert!(err <= 1e-6 * norm(&g), "{err} vs {}", norm(&g));
            }
        }
    }

    fn central_difference(f: impl Fn(&[f64]) -> f64, w: &[f64]) -> Vec<f64> {
        let h = 1e-5;
        (0..w.len())
            .map(|j| {
                let mut p = w.to_vec();
                let mut m = w.to_vec();
                p[j] += h;
                m[j] -= h;
                (f(&p) - f(&m)) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn eval_set_csv_round_trip() {
        let set = spec(3).draw_set(5, &mut stream(1, Purpose::EvalSet, 0));
        let mut buf = Vec::new();
        write_samples_csv(&set, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("gamma,h_1,h_2,h_3\n"));
        assert_eq!(read_samples_csv(&buf[..]).unwrap(), set);
    }

    proptest! {
        #[test]
        fn clipped_norm_bounded(
            w in prop::collection::vec(-50.0f64..50.0, 4),
            h in prop::collection::vec(-50.0f64..50.0, 4),
            pos in any::<bool>(),
            g in 0.01f64..20.0,
            rho in 0.0f64..2.0,
        ) {
            let s = Sample { features: h, label: if pos { 1.0 } else { -1.0 } };
            for model in [logistic(rho, g), ls(g)] {
                let grad = model.stochastic_gradient(&w, &s).unwrap();
                prop_assert!(norm(&grad) <= g + 1e-12);
            }
        }

        #[test]
        fn least_squares_gradient_parallel_to_features(
            w in prop::collection::vec(-5.0f64..5.0, 3),
            h in prop::collection::vec(-5.0f64..5.0, 3),
            label in -3.0f64..3.0,
        ) {
            let s = Sample { features: h.clone(), label };
            let g = ls(1e9).stochastic_gradient(&w, &s).unwrap();
            // g = c h: every 2x2 minor vanishes
            for i in 0..3 {
                for j in 0..3 {
                    let minor = g[i] * h[j] - g[j] * h[i];
                    prop_assert!(minor.abs() <= 1e-9 * (1.0 + norm(&g) * norm(&h)));
                }
            }
        }
    }
}
