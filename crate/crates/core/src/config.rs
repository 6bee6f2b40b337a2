//! Experiment configuration: a TOML document describing the network, the
//! loss, the data model and the schemes to compare.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::graph::{
    blend_self_loops, blend_to_lambda2, metropolis_weights, CombinationMatrix, Topology,
    DEFAULT_SELF_LOOP_BLEND,
};
use crate::loss::{DataSpec, LossKind, LossModel, Sample, DEFAULT_CLIP_BOUND};
use crate::perturbation::PerturbationScheme;
use crate::rng::{stream, Purpose};

/// Parameters a sweep may vary.
pub const SWEEP_PARAMS: [&str; 5] = ["mu", "b_v", "sigma_p2", "K", "lambda2_target"];

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub replicas: usize,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default = "default_true")]
    pub emit_svg: bool,
    pub run: RunSection,
    pub loss: LossSection,
    pub data: DataSpec,
    pub topology: TopologySection,
    pub schemes: Vec<PerturbationScheme>,
    #[serde(default)]
    pub analysis: AnalysisSection,
    /// Directory that relative input paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub mu: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossName {
    LeastSquares,
    RidgeLogistic,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSection {
    pub kind: LossName,
    #[serde(default)]
    pub rho: f64,
    #[serde(default = "default_clip")]
    pub clip_bound: f64,
    /// Lipschitz constant of the gradient; estimated from the evaluation
    /// set when absent.
    pub smoothness: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TopologyKind {
    ErdosRenyi,
    Ring,
    Path,
    Complete,
    /// Edge list document, Metropolis weights.
    File,
    /// Explicit combination matrix document.
    Weights,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologySection {
    pub kind: TopologyKind,
    #[serde(rename = "K")]
    pub agents: Option<usize>,
    pub edge_probability: Option<f64>,
    /// Seed of the random graph; derived from the master seed when absent.
    pub seed: Option<u64>,
    pub path: Option<PathBuf>,
    #[serde(default = "default_blend")]
    pub self_loop_blend: f64,
    /// Overrides `self_loop_blend` with the blend reaching this `lambda2`.
    pub lambda2_target: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisSection {
    /// Lower bound on the risk.
    #[serde(default)]
    pub j_floor: f64,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_true() -> bool {
    true
}

fn default_clip() -> f64 {
    DEFAULT_CLIP_BOUND
}

fn default_blend() -> f64 {
    DEFAULT_SELF_LOOP_BLEND
}

fn field_err(field: &str, msg: impl std::fmt::Display) -> Error {
    Error::Config(format!("{field}: {msg}"))
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.base_dir = base_dir.to_path_buf();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml_str(&text, base).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.replicas == 0 {
            return Err(field_err("replicas", "must be at least 1"));
        }
        if !(self.run.mu > 0.0 && self.run.mu.is_finite()) {
            return Err(field_err(
                "run.mu",
                format!("must be positive, got {}", self.run.mu),
            ));
        }
        if self.run.iterations == 0 {
            return Err(field_err("run.iterations", "must be at least 1"));
        }
        self.loss_kind()?;
        if !(self.loss.clip_bound > 0.0 && self.loss.clip_bound.is_finite()) {
            return Err(field_err(
                "loss.clip_bound",
                format!("must be positive, got {}", self.loss.clip_bound),
            ));
        }
        if let Some(d) = self.loss.smoothness {
            if !(d > 0.0 && d.is_finite()) {
                return Err(field_err(
                    "loss.smoothness",
                    format!("must be positive, got {d}"),
                ));
            }
        }
        self.data.validate().map_err(|e| field_err("data", e))?;
        if self.data.eval_set_size == 0 {
            return Err(field_err("data.eval_set_size", "must be at least 1"));
        }
        self.validate_topology()?;
        if self.schemes.is_empty() {
            return Err(field_err("schemes", "at least one scheme is required"));
        }
        for (i, s) in self.schemes.iter().enumerate() {
            s.validate()
                .map_err(|e| field_err(&format!("schemes[{i}]"), e))?;
            if self.schemes[..i].iter().any(|t| t.label() == s.label()) {
                return Err(field_err(
                    &format!("schemes[{i}].kind"),
                    format!("scheme `{}` listed twice", s.label()),
                ));
            }
        }
        if !self.analysis.j_floor.is_finite() {
            return Err(field_err("analysis.j_floor", "must be finite"));
        }
        Ok(())
    }

    fn validate_topology(&self) -> Result<()> {
        let t = &self.topology;
        let needs_k = !matches!(t.kind, TopologyKind::File | TopologyKind::Weights);
        match (needs_k, t.agents) {
            (true, None) => return Err(field_err("topology.K", "required for this topology kind")),
            (true, Some(0)) => return Err(field_err("topology.K", "must be at least 1")),
            (false, Some(_)) => {
                return Err(field_err(
                    "topology.K",
                    "taken from the file for this topology kind",
                ))
            }
            _ => {}
        }
        match (t.kind, t.edge_probability) {
            (TopologyKind::ErdosRenyi, None) => {
                return Err(field_err(
                    "topology.edge_probability",
                    "required for erdos_renyi",
                ))
            }
            (TopologyKind::ErdosRenyi, Some(p)) if !(p > 0.0 && p <= 1.0) => {
                return Err(field_err(
                    "topology.edge_probability",
                    format!("must lie in (0, 1], got {p}"),
                ))
            }
            (TopologyKind::ErdosRenyi, _) => {}
            (_, Some(_)) => {
                return Err(field_err(
                    "topology.edge_probability",
                    "only used by erdos_renyi",
                ))
            }
            _ => {}
        }
        let needs_path = matches!(t.kind, TopologyKind::File | TopologyKind::Weights);
        if needs_path != t.path.is_some() {
            return Err(field_err(
                "topology.path",
                if needs_path {
                    "required for this topology kind"
                } else {
                    "only used by file and weights"
                },
            ));
        }
        if !(0.0..1.0).contains(&t.self_loop_blend) {
            return Err(field_err(
                "topology.self_loop_blend",
                format!("must lie in [0, 1), got {}", t.self_loop_blend),
            ));
        }
        if let Some(l) = t.lambda2_target {
            if !(0.0..1.0).contains(&l) {
                return Err(field_err(
                    "topology.lambda2_target",
                    format!("must lie in [0, 1), got {l}"),
                ));
            }
        }
        Ok(())
    }

    pub fn loss_kind(&self) -> Result<LossKind> {
        let rho = self.loss.rho;
        match self.loss.kind {
            LossName::LeastSquares if rho != 0.0 => {
                Err(field_err("loss.rho", "only used by ridge_logistic"))
            }
            LossName::LeastSquares => Ok(LossKind::LeastSquares),
            LossName::RidgeLogistic if !(rho >= 0.0 && rho.is_finite()) => Err(field_err(
                "loss.rho",
                format!("must be nonnegative, got {rho}"),
            )),
            LossName::RidgeLogistic => Ok(LossKind::RidgeLogistic { rho }),
        }
    }

    /// The loss model, with `smoothness` estimated from `eval_set` unless
    /// configured.
    pub fn loss_model(&self, eval_set: &[Sample]) -> Result<LossModel> {
        let kind = self.loss_kind()?;
        let delta = match self.loss.smoothness {
            Some(d) => d,
            None => LossModel::estimate_smoothness(kind, eval_set),
        };
        LossModel::new(kind, self.loss.clip_bound, delta)
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// The graph, when the configuration describes one through edges.
    pub fn build_topology(&self) -> Result<Option<Topology>> {
        let t = &self.topology;
        let k = t.agents.unwrap_or(0);
        let topo = match t.kind {
            TopologyKind::ErdosRenyi => {
                let mut rng = match t.seed {
                    Some(s) => stream(s, Purpose::Topology, 0),
                    None => stream(self.seed, Purpose::Topology, 0),
                };
                Topology::erdos_renyi(k, t.edge_probability.unwrap_or(0.0), &mut rng)?
            }
            TopologyKind::Ring => Topology::ring(k)?,
            TopologyKind::Path => Topology::path(k)?,
            TopologyKind::Complete => Topology::complete(k)?,
            TopologyKind::File => {
                Topology::from_file(&self.resolve(t.path.as_deref().unwrap_or(Path::new(""))))?
            }
            TopologyKind::Weights => return Ok(None),
        };
        Ok(Some(topo))
    }

    pub fn build_matrix(&self) -> Result<CombinationMatrix> {
        let t = &self.topology;
        let base = match self.build_topology()? {
            Some(topo) => {
                let a = metropolis_weights(&topo)?;
                if let Some(target) = t.lambda2_target {
                    return blend_to_lambda2(&a, target);
                }
                a
            }
            None => {
                let path = self.resolve(t.path.as_deref().unwrap_or(Path::new("")));
                let a = CombinationMatrix::from_file(&path)?;
                if let Some(target) = t.lambda2_target {
                    return blend_to_lambda2(&a, target);
                }
                a
            }
        };
        Ok(if t.self_loop_blend > 0.0 {
            blend_self_loops(&base, t.self_loop_blend)
        } else {
            base
        })
    }

    pub fn num_agents(&self) -> Result<usize> {
        match self.topology.agents {
            Some(k) => Ok(k),
            None => Ok(self.build_matrix()?.size()),
        }
    }

    /// Applies one sweep value. Values that do not fit the parameter or the
    /// configuration are reported as [`Error::InvalidParameter`].
    pub fn set_param(&mut self, name: &str, value: f64) -> Result<()> {
        let bad = |msg: String| Error::InvalidParameter(format!("{name} = {value}: {msg}"));
        match name {
            "mu" => self.run.mu = value,
            "b_v" | "sigma_p2" => {
                let mut hit = false;
                for s in &mut self.schemes {
                    match s {
                        PerturbationScheme::GraphHomomorphic { b_v } if name == "b_v" => {
                            *b_v = value;
                            hit = true;
                        }
                        PerturbationScheme::Iid { sigma_p2 } if name == "sigma_p2" => {
                            *sigma_p2 = value;
                            hit = true;
                        }
                        _ => {}
                    }
                }
                if !hit {
                    return Err(bad("no scheme uses this parameter".into()));
                }
            }
            "K" => {
                if matches!(
                    self.topology.kind,
                    TopologyKind::File | TopologyKind::Weights
                ) {
                    return Err(bad("the agent count is fixed by the topology file".into()));
                }
                if value.fract() != 0.0 || value < 1.0 {
                    return Err(bad("must be a positive integer".into()));
                }
                self.topology.agents = Some(value as usize);
            }
            "lambda2_target" => self.topology.lambda2_target = Some(value),
            other => return Err(Error::UnknownParameter(other.to_string())),
        }
        self.validate().map_err(|e| bad(e.to_string()))
    }
}
