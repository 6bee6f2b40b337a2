//! Replicated comparison of perturbation schemes and parameter sweeps.
//!
//! All schemes share the network, the evaluation set and the replica seeds,
//! so their curves differ only through the noise they add.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;

use crate::analysis::{mean_stderr, MeanStderr, RunTrace, NOT_APPLICABLE};
use crate::config::ExperimentConfig;
use crate::engine::{run, RunConfig};
use crate::error::{Error, Result};
use crate::graph::{CombinationMatrix, Topology};
use crate::loss::{write_samples_csv, LossModel, Sample};
use crate::perturbation::PerturbationScheme;
use crate::privacy::Epsilon;
use crate::report::render_comparison_svg;
use crate::rng::{replica_seed, stream, Purpose};

/// Everything shared by the runs of one experiment.
#[derive(Debug, Clone)]
pub struct Setup {
    pub matrix: Arc<CombinationMatrix>,
    pub topology: Option<Topology>,
    pub eval_set: Vec<Sample>,
    pub loss: LossModel,
    /// Minimizer of the empirical risk on the evaluation set and its value.
    pub w_star: Vec<f64>,
    pub j_star: f64,
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<Setup> {
    let topology = cfg.build_topology()?;
    let matrix = cfg.build_matrix()?;
    if let Some(t) = &topology {
        matrix.check_sparsity(t)?;
    }
    let mut rng = stream(cfg.seed, Purpose::EvalSet, 0);
    let eval_set = cfg.data.draw_set(cfg.data.eval_set_size, &mut rng);
    let loss = cfg.loss_model(&eval_set)?;
    let (w_star, j_star) = loss.minimize_risk(&eval_set)?;
    Ok(Setup {
        matrix: Arc::new(matrix),
        topology,
        eval_set,
        loss,
        w_star,
        j_star,
    })
}

pub fn run_config(
    cfg: &ExperimentConfig,
    setup: &Setup,
    scheme: PerturbationScheme,
    seed: u64,
) -> RunConfig {
    RunConfig {
        step_size: cfg.run.mu,
        iterations: cfg.run.iterations,
        scheme,
        seed,
        loss: setup.loss,
        data: cfg.data.clone(),
        matrix: Arc::clone(&setup.matrix),
        initial: None,
    }
}

/// Rows `1..=T` averaged for steady-state figures: the final tenth, at least
/// one row.
pub fn plateau_rows(iterations: usize) -> std::ops::RangeInclusive<usize> {
    let len = iterations.div_ceil(10).max(1);
    (iterations + 1 - len.min(iterations.max(1)))..=iterations
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregateRow {
    pub iteration: usize,
    pub excess_risk: MeanStderr,
    pub risk: MeanStderr,
    pub disagreement: MeanStderr,
    pub grad_norm_sq: MeanStderr,
    pub disagreement_bound: Option<f64>,
    pub epsilon: Epsilon,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SchemeSummary {
    pub scheme: PerturbationScheme,
    pub rows: Vec<AggregateRow>,
    /// Steady-state excess risk: per-replica plateau, then across replicas.
    pub plateau_excess_risk: MeanStderr,
    pub plateau_disagreement: MeanStderr,
}

impl SchemeSummary {
    fn new(
        scheme: PerturbationScheme,
        traces: &[RunTrace],
        j_star: f64,
        iterations: usize,
    ) -> Self {
        let column = |i: usize, f: &dyn Fn(&crate::analysis::TraceRow) -> f64| {
            mean_stderr(&traces.iter().map(|t| f(&t.rows[i])).collect::<Vec<_>>())
        };
        let rows = (0..=iterations)
            .map(|i| {
                let first = &traces[0].rows[i];
                AggregateRow {
                    iteration: i,
                    excess_risk: column(i, &|r| r.risk_centroid - j_star),
                    risk: column(i, &|r| r.risk_centroid),
                    disagreement: column(i, &|r| r.disagreement),
                    grad_norm_sq: column(i, &|r| r.grad_norm_sq_centroid),
                    disagreement_bound: first.disagreement_bound,
                    epsilon: first.epsilon,
                }
            })
            .collect();
        let window = plateau_rows(iterations);
        let per_replica = |f: &dyn Fn(&crate::analysis::TraceRow) -> f64| {
            let v: Vec<f64> = traces
                .iter()
                .map(|t| {
                    let rows = &t.rows[window.clone()];
                    rows.iter().map(f).sum::<f64>() / rows.len() as f64
                })
                .collect();
            mean_stderr(&v)
        };
        Self {
            scheme,
            rows,
            plateau_excess_risk: per_replica(&|r| r.risk_centroid - j_star),
            plateau_disagreement: per_replica(&|r| r.disagreement),
        }
    }

    pub fn final_row(&self) -> &AggregateRow {
        self.rows.last().expect("at least the initial row")
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub setup: Setup,
    pub replicas: usize,
    /// `traces[s][r]`: scheme `s`, replica `r`.
    pub traces: Vec<Vec<RunTrace>>,
    pub summaries: Vec<SchemeSummary>,
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let setup = prepare(cfg)?;
    let replicas = cfg.replicas;
    let jobs: Vec<(usize, usize)> = (0..cfg.schemes.len())
        .flat_map(|s| (0..replicas).map(move |r| (s, r)))
        .collect();
    let flat: Vec<RunTrace> = jobs
        .par_iter()
        .map(|&(s, r)| {
            let rc = run_config(
                cfg,
                &setup,
                cfg.schemes[s],
                replica_seed(cfg.seed, r as u64),
            );
            run(&rc, &setup.eval_set)
        })
        .collect::<Result<_>>()?;
    let mut flat = flat.into_iter();
    let traces: Vec<Vec<RunTrace>> = cfg
        .schemes
        .iter()
        .map(|_| flat.by_ref().take(replicas).collect())
        .collect();
    let summaries = cfg
        .schemes
        .iter()
        .zip(&traces)
        .map(|(&s, t)| SchemeSummary::new(s, t, setup.j_star, cfg.run.iterations))
        .collect();
    Ok(ExperimentOutcome {
        setup,
        replicas,
        traces,
        summaries,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| NOT_APPLICABLE.to_string(), |x| x.to_string())
}

impl ExperimentOutcome {
    /// Per-iteration, per-scheme means; standard errors only with more than
    /// one replica.
    pub fn comparison_csv(&self) -> String {
        let with_se = self.replicas > 1;
        let metrics = ["excess_risk", "risk", "disagreement", "grad_norm_sq"];
        let mut header = vec!["scheme".to_string(), "iter".to_string()];
        for m in metrics {
            header.push(m.to_string());
            if with_se {
                header.push(format!("{m}_stderr"));
            }
        }
        header.push("disagreement_bound".into());
        header.push("epsilon".into());
        let mut out = header.join(",");
        out.push('\n');
        for s in &self.summaries {
            for r in &s.rows {
                let _ = write!(out, "{},{}", s.scheme.label(), r.iteration);
                for v in [r.excess_risk, r.risk, r.disagreement, r.grad_norm_sq] {
                    let _ = write!(out, ",{}", v.mean);
                    if with_se {
                        let _ = write!(out, ",{}", v.stderr);
                    }
                }
                let _ = writeln!(out, ",{},{}", opt(r.disagreement_bound), r.epsilon);
            }
        }
        out
    }

    pub fn summary_csv(&self) -> String {
        let mut out = String::from(
            "scheme,plateau_excess_risk,plateau_excess_risk_stderr,plateau_disagreement,plateau_disagreement_stderr,final_risk,final_epsilon\n",
        );
        for s in &self.summaries {
            let f = s.final_row();
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                s.scheme.label(),
                s.plateau_excess_risk.mean,
                s.plateau_excess_risk.stderr,
                s.plateau_disagreement.mean,
                s.plateau_disagreement.stderr,
                f.risk.mean,
                f.epsilon
            );
        }
        out
    }

    pub fn summary(&self, scheme_label: &str) -> Option<&SchemeSummary> {
        self.summaries
            .iter()
            .find(|s| s.scheme.label() == scheme_label)
    }

    /// Writes the report files into `dir` (which must exist).
    fn write_files(&self, dir: &Path, emit_svg: bool) -> Result<()> {
        let put = |name: &Path, text: &str| {
            let path = dir.join(name);
            fs::write(&path, text).map_err(|e| Error::io(&path, e))
        };
        let runs = dir.join("runs");
        fs::create_dir_all(&runs).map_err(|e| Error::io(&runs, e))?;
        for traces in &self.traces {
            for (r, t) in traces.iter().enumerate() {
                put(
                    &Path::new("runs").join(format!("{}_{r:03}.csv", t.scheme.label())),
                    &t.to_csv_string(),
                )?;
            }
        }
        let mut eval = Vec::new();
        write_samples_csv(&self.setup.eval_set, &mut eval)?;
        put(
            Path::new("eval_set.csv"),
            &String::from_utf8(eval).expect("csv is utf-8"),
        )?;
        let comparison = self.comparison_csv();
        put(Path::new("comparison.csv"), &comparison)?;
        put(Path::new("summary.csv"), &self.summary_csv())?;
        if emit_svg {
            let title = format!("Excess risk, {} replica(s)", self.replicas);
            put(
                Path::new("comparison.svg"),
                &render_comparison_svg(&comparison, &title)?,
            )?;
        }
        Ok(())
    }

    /// Writes the report into `dest`. Files are staged next to `dest` and
    /// only moved into place once all of them are written.
    pub fn write_report(&self, dest: &Path, emit_svg: bool) -> Result<()> {
        commit_staged(dest, |dir| self.write_files(dir, emit_svg))
    }
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub param: String,
    pub points: Vec<(f64, ExperimentOutcome)>,
}

pub fn run_sweep(cfg: &ExperimentConfig, param: &str, values: &[f64]) -> Result<SweepOutcome> {
    if !crate::config::SWEEP_PARAMS.contains(&param) {
        return Err(Error::UnknownParameter(param.to_string()));
    }
    if values.is_empty() {
        return Err(Error::InvalidParameter(format!(
            "sweep over {param} needs at least one value"
        )));
    }
    let points = values
        .iter()
        .map(|&v| {
            let mut c = cfg.clone();
            c.set_param(param, v)?;
            Ok((v, run_experiment(&c)?))
        })
        .collect::<Result<_>>()?;
    Ok(SweepOutcome {
        param: param.to_string(),
        points,
    })
}

impl SweepOutcome {
    pub fn point_dir(&self, value: f64) -> PathBuf {
        PathBuf::from(format!("{}_{value}", self.param))
    }

    pub fn summary_csv(&self) -> String {
        let mut out = String::from(
            "param,value,scheme,plateau_excess_risk,plateau_excess_risk_stderr,plateau_disagreement,plateau_disagreement_stderr\n",
        );
        for (v, o) in &self.points {
            for s in &o.summaries {
                let _ = writeln!(
                    out,
                    "{},{v},{},{},{},{},{}",
                    self.param,
                    s.scheme.label(),
                    s.plateau_excess_risk.mean,
                    s.plateau_excess_risk.stderr,
                    s.plateau_disagreement.mean,
                    s.plateau_disagreement.stderr
                );
            }
        }
        out
    }

    pub fn write_report(&self, dest: &Path, emit_svg: bool) -> Result<()> {
        commit_staged(dest, |dir| {
            for (v, o) in &self.points {
                let sub = dir.join(self.point_dir(*v));
                fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
                o.write_files(&sub, emit_svg)?;
            }
            let path = dir.join("sweep_summary.csv");
            fs::write(&path, self.summary_csv()).map_err(|e| Error::io(&path, e))
        })
    }
}

fn commit_staged(dest: &Path, write: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    let parent = match dest.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&parent).map_err(|e| Error::io(&parent, e))?;
    let staging = tempfile::Builder::new()
        .prefix(".homodiff-staging-")
        .tempdir_in(&parent)
        .map_err(|e| Error::io(&parent, e))?;
    write(staging.path())?;
    move_tree(staging.path(), dest)
}

fn move_tree(from: &Path, to: &Path) -> Result<()> {
    fs::create_dir_all(to).map_err(|e| Error::io(to, e))?;
    let mut entries: Vec<_> = fs::read_dir(from)
        .map_err(|e| Error::io(from, e))?
        .collect::<std::io::Result<_>>()
        .map_err(|e| Error::io(from, e))?;
    entries.sort_by_key(|e| e.file_name());
    for entry in entries {
        let src = entry.path();
        let dst = to.join(entry.file_name());
        if src.is_dir() {
            move_tree(&src, &dst)?;
        } else {
            fs::rename(&src, &dst).map_err(|e| Error::io(&dst, e))?;
        }
    }
    Ok(())
}
