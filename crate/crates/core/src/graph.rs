//! Network topologies and symmetric doubly stochastic combination matrices.

use std::collections::BTreeSet;
use std::path::Path;

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on row sums of a combination matrix.
pub const STOCHASTIC_TOL: f64 = 1e-12;

/// Matrices up to this size get a dense symmetric eigendecomposition;
/// larger ones go through power iteration.
pub const DENSE_EIGEN_MAX: usize = 512;

pub const POWER_ITERATION_MAX_STEPS: usize = 100_000;

pub const DEFAULT_SELF_LOOP_BLEND: f64 = 0.05;

/// Undirected graph over agents `0..K`. Edges are stored as `(min, max)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Topology {
    num_agents: usize,
    edges: BTreeSet<(usize, usize)>,
}

impl Topology {
    pub fn new(num_agents: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        if num_agents == 0 {
            return Err(Error::InvalidTopology("K must be positive".into()));
        }
        let mut set = BTreeSet::new();
        for (l, k) in edges {
            if l == k {
                return Err(Error::InvalidTopology(format!("self-loop on agent {l}")));
            }
            if l >= num_agents || k >= num_agents {
                return Err(Error::InvalidTopology(format!(
                    "edge ({l}, {k}) out of range for K = {num_agents}"
                )));
            }
            set.insert((l.min(k), l.max(k)));
        }
        Ok(Self {
            num_agents,
            edges: set,
        })
    }

    pub fn path(num_agents: usize) -> Result<Self> {
        Self::new(num_agents, (1..num_agents).map(|k| (k - 1, k)))
    }

    pub fn ring(num_agents: usize) -> Result<Self> {
        if num_agents < 3 {
            return Self::path(num_agents);
        }
        Self::new(
            num_agents,
            (0..num_agents).map(|k| (k, (k + 1) % num_agents)),
        )
    }

    pub fn complete(num_agents: usize) -> Result<Self> {
        Self::new(
            num_agents,
            (0..num_agents).flat_map(|l| (l + 1..num_agents).map(move |k| (l, k))),
        )
    }

    /// Erdős–Rényi G(K, p), resampled until connected.
    pub fn erdos_renyi<R: Rng + ?Sized>(num_agents: usize, p: f64, rng: &mut R) -> Result<Self> {
        const MAX_ATTEMPTS: usize = 10_000;
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::InvalidTopology(format!(
                "edge probability {p} outside [0, 1]"
            )));
        }
        for _ in 0..MAX_ATTEMPTS {
            let g = Self::erdos_renyi_once(num_agents, p, rng)?;
            if g.is_connected() {
                return Ok(g);
            }
        }
        Err(Error::InvalidTopology(format!(
            "no connected G({num_agents}, {p}) sample in {MAX_ATTEMPTS} attempts"
        )))
    }

    /// A single G(K, p) draw, connected or not.
    pub fn erdos_renyi_once<R: Rng + ?Sized>(
        num_agents: usize,
        p: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let mut edges = Vec::new();
        for l in 0..num_agents {
            for k in l + 1..num_agents {
                if rng.random::<f64>() < p {
                    edges.push((l, k));
                }
            }
        }
        Self::new(num_agents, edges)
    }

    pub fn num_agents(&self) -> usize {
        self.num_agents
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.edges.iter().copied()
    }

    pub fn has_edge(&self, l: usize, k: usize) -> bool {
        self.edges.contains(&(l.min(k), l.max(k)))
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.num_agents];
        for &(l, k) in &self.edges {
            deg[l] += 1;
            deg[k] += 1;
        }
        deg
    }

    fn adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.num_agents];
        for &(l, k) in &self.edges {
            adj[l].push(k);
            adj[k].push(l);
        }
        adj
    }

    pub fn num_components(&self) -> usize {
        count_components(&self.adjacency())
    }

    pub fn is_connected(&self) -> bool {
        self.num_components() == 1
    }

    /// Parses the topology document: `K = <n>` and `edges = [[l, k], ...]`,
    /// agents numbered from 1.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let doc: TopologyDoc =
            toml::from_str(text).map_err(|e| Error::Config(format!("topology: {e}")))?;
        let mut edges = Vec::with_capacity(doc.edges.len());
        for [l, k] in doc.edges {
            if l == 0 || k == 0 {
                return Err(Error::Config(format!(
                    "topology: edge [{l}, {k}] uses agent 0; agents are numbered from 1"
                )));
            }
            edges.push((l - 1, k - 1));
        }
        Self::new(doc.agents, edges)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        let doc = TopologyDoc {
            agents: self.num_agents,
            edges: self.edges.iter().map(|&(l, k)| [l + 1, k + 1]).collect(),
        };
        toml::to_string(&doc).expect("topology document serializes")
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TopologyDoc {
    #[serde(rename = "K")]
    agents: usize,
    #[serde(default)]
    edges: Vec<[usize; 2]>,
}

fn count_components(adj: &[Vec<usize>]) -> usize {
    let mut seen = vec![false; adj.len()];
    let mut components = 0;
    for start in 0..adj.len() {
        if seen[start] {
            continue;
        }
        components += 1;
        seen[start] = true;
        let mut stack = vec![start];
        while let Some(u) = stack.pop() {
            for &v in &adj[u] {
                if !seen[v] {
                    seen[v] = true;
                    stack.push(v);
                }
            }
        }
    }
    components
}

/// Symmetric, doubly stochastic, nonnegative weights `a[l][k]` together with
/// the mixing rate `lambda2 = rho(A - 11^T / K)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CombinationMatrix {
    size: usize,
    weights: Vec<f64>,
    // Closed neighborhoods: every k with a[l][k] > 0, plus l itself.
    neighbors: Vec<Vec<usize>>,
    lambda2: f64,
}

impl CombinationMatrix {
    /// Validates symmetry, nonnegativity and row sums, then computes `lambda2`.
    /// Connectivity and positive self-weights are checked separately by
    /// [`CombinationMatrix::check_assumptions`].
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let size = rows.len();
        if size == 0 {
            return Err(Error::InvalidMatrix("empty matrix".into()));
        }
        if let Some(r) = rows.iter().position(|r| r.len() != size) {
            return Err(Error::InvalidMatrix(format!(
                "row {r} has {} entries, expected {size}",
                rows[r].len()
            )));
        }
        let weights: Vec<f64> = rows.into_iter().flatten().collect();
        Self::from_flat(size, weights)
    }

    fn from_flat(size: usize, weights: Vec<f64>) -> Result<Self> {
        for l in 0..size {
            let row = &weights[l * size..(l + 1) * size];
            for (k, &a) in row.iter().enumerate() {
                if !a.is_finite() || a < 0.0 {
                    return Err(Error::InvalidMatrix(format!(
                        "a[{l}][{k}] = {a} is not a nonnegative number"
                    )));
                }
                if a != weights[k * size + l] {
                    return Err(Error::InvalidMatrix(format!(
                        "not symmetric: a[{l}][{k}] = {a} but a[{k}][{l}] = {}",
                        weights[k * size + l]
                    )));
                }
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > STOCHASTIC_TOL {
                return Err(Error::InvalidMatrix(format!("row {l} sums to {sum}")));
            }
        }
        let neighbors = (0..size)
            .map(|l| {
                (0..size)
                    .filter(|&k| k == l || weights[l * size + k] > 0.0)
                    .collect()
            })
            .collect();
        let mut m = Self {
            size,
            weights,
            neighbors,
            lambda2: f64::NAN,
        };
        m.lambda2 = spectral_gap(&m)?;
        Ok(m)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let doc: MatrixDoc =
            toml::from_str(text).map_err(|e| Error::Config(format!("matrix: {e}")))?;
        Self::from_rows(doc.weights)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn identity(size: usize) -> Self {
        let mut w = vec![0.0; size * size];
        for k in 0..size {
            w[k * size + k] = 1.0;
        }
        Self::from_flat(size, w).expect("identity is doubly stochastic")
    }

    pub fn size(&self) -> usize {
        self.size
    }

    #[inline]
    pub fn weight(&self, l: usize, k: usize) -> f64 {
        self.weights[l * self.size + k]
    }

    pub fn self_weight(&self, k: usize) -> f64 {
        self.weight(k, k)
    }

    pub fn row(&self, l: usize) -> &[f64] {
        &self.weights[l * self.size..(l + 1) * self.size]
    }

    /// Closed neighborhood of `l` (includes `l`), ascending.
    pub fn neighbors(&self, l: usize) -> &[usize] {
        &self.neighbors[l]
    }

    pub fn lambda2(&self) -> f64 {
        self.lambda2
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.size).map(|l| self.row(l).to_vec()).collect()
    }

    /// Connectivity (`lambda2 < 1`) and strictly positive self-weights.
    pub fn check_assumptions(&self) -> Result<()> {
        if let Some(agent) = (0..self.size).find(|&k| self.self_weight(k) <= 0.0) {
            return Err(Error::ZeroSelfWeight { agent });
        }
        let components = count_components(&self.neighbors);
        if components > 1 || self.lambda2 >= 1.0 - STOCHASTIC_TOL {
            return Err(Error::DisconnectedGraph {
                agents: self.size,
                components,
            });
        }
        Ok(())
    }

    /// Every nonzero off-diagonal weight must sit on an edge of `topology`.
    pub fn check_sparsity(&self, topology: &Topology) -> Result<()> {
        if topology.num_agents() != self.size {
            return Err(Error::DimensionMismatch {
                expected: self.size,
                actual: topology.num_agents(),
            });
        }
        for l in 0..self.size {
            for k in 0..self.size {
                if l != k && self.weight(l, k) != 0.0 && !topology.has_edge(l, k) {
                    return Err(Error::InvalidMatrix(format!(
                        "a[{l}][{k}] = {} but ({l}, {k}) is not an edge",
                        self.weight(l, k)
                    )));
                }
            }
        }
        Ok(())
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        for (l, o) in out.iter_mut().enumerate() {
            *o = self.neighbors[l]
                .iter()
                .map(|&k| self.weight(l, k) * x[k])
                .sum();
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct MatrixDoc {
    weights: Vec<Vec<f64>>,
}

/// Metropolis–Hastings weights: `1 / (1 + max(deg l, deg k))` on every edge,
/// with the diagonal absorbing what is left of each row.
pub fn metropolis_weights(topology: &Topology) -> Result<CombinationMatrix> {
    let k = topology.num_agents();
    let components = topology.num_components();
    if components > 1 {
        return Err(Error::DisconnectedGraph {
            agents: k,
            components,
        });
    }
    let deg = topology.degrees();
    let mut w = vec![0.0; k * k];
    for (a, b) in topology.edges() {
        let weight = 1.0 / (1 + deg[a].max(deg[b])) as f64;
        w[a * k + b] = weight;
        w[b * k + a] = weight;
    }
    for l in 0..k {
        let off: f64 = (0..k).filter(|&j| j != l).map(|j| w[l * k + j]).sum();
        w[l * k + l] = 1.0 - off;
        if w[l * k + l] <= 0.0 {
            return Err(Error::ZeroSelfWeight { agent: l });
        }
    }
    CombinationMatrix::from_flat(k, w)
}

/// `(1 - theta) A + theta I`.
pub fn blend_self_loops(a: &CombinationMatrix, theta: f64) -> CombinationMatrix {
    assert!(
        (0.0..1.0).contains(&theta),
        "self-loop blend {theta} outside [0, 1)"
    );
    let size = a.size;
    let mut w: Vec<f64> = a.weights.iter().map(|&x| (1.0 - theta) * x).collect();
    for k in 0..size {
        w[k * size + k] += theta;
    }
    CombinationMatrix::from_flat(size, w).expect("convex blend of a doubly stochastic matrix")
}

/// Blends self-loops into `a` until its mixing rate equals `target`.
/// Blending only slows mixing, so targets below `a.lambda2()` are rejected.
pub fn blend_to_lambda2(a: &CombinationMatrix, target: f64) -> Result<CombinationMatrix> {
    if !(0.0..1.0).contains(&target) {
        return Err(Error::InvalidParameter(format!(
            "lambda2 target {target} outside [0, 1)"
        )));
    }
    let base = a.lambda2();
    if (target - base).abs() <= 1e-12 {
        return Ok(a.clone());
    }
    if target < base {
        return Err(Error::InvalidParameter(format!(
            "lambda2 target {target} is below the unblended value {base}"
        )));
    }
    let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if blend_self_loops(a, mid).lambda2() < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(blend_self_loops(a, 0.5 * (lo + hi)))
}

/// `rho(A - 11^T / K)`. Dense eigendecomposition up to [`DENSE_EIGEN_MAX`]
/// agents, deflated power iteration beyond.
pub fn spectral_gap(a: &CombinationMatrix) -> Result<f64> {
    if a.size <= DENSE_EIGEN_MAX {
        Ok(spectral_gap_dense(a))
    } else {
        spectral_gap_power(a, POWER_ITERATION_MAX_STEPS)
    }
}

pub fn spectral_gap_dense(a: &CombinationMatrix) -> f64 {
    let k = a.size;
    let inv = 1.0 / k as f64;
    let b = DMatrix::from_fn(k, k, |i, j| a.weight(i, j) - inv);
    b.symmetric_eigen()
        .eigenvalues
        .iter()
        .fold(0.0_f64, |m, &e| m.max(e.abs()))
}

/// Power iteration on `A` restricted to the complement of the consensus
/// direction, where it coincides with `A - 11^T / K`.
pub fn spectral_gap_power(a: &CombinationMatrix, max_steps: usize) -> Result<f64> {
    let k = a.size;
    if k == 1 {
        return Ok(0.0);
    }
    let mut x: Vec<f64> = (0..k)
        .map(|j| ((j + 1) as f64 * 0.618_033_988_7).sin() + 0.5)
        .collect();
    if !deflate_and_normalize(&mut x) {
        return Ok(0.0);
    }
    let mut y = vec![0.0; k];
    let mut prev_est = 0.0;
    let mut prev_inc = f64::INFINITY;
    for _ in 0..max_steps {
        a.apply(&x, &mut y);
        std::mem::swap(&mut x, &mut y);
        let mean = x.iter().sum::<f64>() / k as f64;
        x.iter_mut().for_each(|v| *v -= mean);
        let est = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        if est == 0.0 {
            return Ok(0.0);
        }
        x.iter_mut().for_each(|v| *v /= est);
        // ||B x|| increases monotonically towards rho(B); successive
        // increments shrink geometrically, which bounds the remaining error.
        let inc = (est - prev_est).abs();
        let ratio = if prev_inc.is_finite() && prev_inc > 0.0 {
            (inc / prev_inc).min(1.0 - 1e-12)
        } else {
            0.5
        };
        if inc <= 1e-15 || inc * ratio / (1.0 - ratio) < 1e-12 {
            return Ok(est);
        }
        prev_est = est;
        prev_inc = inc;
    }
    Err(Error::ConvergenceFailure {
        iterations: max_steps,
    })
}

fn deflate_and_normalize(x: &mut [f64]) -> bool {
    let mean = x.iter().sum::<f64>() / x.len() as f64;
    x.iter_mut().for_each(|v| *v -= mean);
    let n = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n == 0.0 {
        return false;
    }
    x.iter_mut().for_each(|v| *v /= n);
    true
}
