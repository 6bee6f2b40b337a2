//! Privacy perturbations attached to the messages `psi_{lk} = phi_l + q_{lk}`.
//!
//! Three schemes are supported. `None` sends raw intermediate estimates.
//! `Iid` adds one Laplace vector per agent, broadcast identically to every
//! neighbor and to the agent itself. `GraphHomomorphic` sends the same Laplace
//! vector `v_l` to every neighbor and keeps `-(1 - a_ll) / a_ll * v_l` on the
//! self-message, so that `sum_l sum_k a_lk q_lk = 0` for every realization.

use rand::distr::Open01;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::CombinationMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PerturbationScheme {
    None,
    /// Per-coordinate power `sigma_p2`; Laplace scale `sqrt(sigma_p2 / 2)`.
    Iid {
        sigma_p2: f64,
    },
    /// Laplace scale `b_v`; per-coordinate power `2 b_v^2`.
    GraphHomomorphic {
        b_v: f64,
    },
}

impl PerturbationScheme {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            Self::None => true,
            Self::Iid { sigma_p2 } => sigma_p2 >= 0.0 && sigma_p2.is_finite(),
            Self::GraphHomomorphic { b_v } => b_v >= 0.0 && b_v.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!(
                "perturbation scale must be finite and nonnegative: {self:?}"
            )))
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Iid { .. } => "iid",
            Self::GraphHomomorphic { .. } => "graph_homomorphic",
        }
    }

    /// Laplace scale of the transmitted noise; zero for `None`.
    pub fn laplace_scale(&self) -> f64 {
        match *self {
            Self::None => 0.0,
            Self::Iid { sigma_p2 } => (sigma_p2 / 2.0).sqrt(),
            Self::GraphHomomorphic { b_v } => b_v,
        }
    }

    pub fn is_homomorphic(&self) -> bool {
        matches!(self, Self::GraphHomomorphic { .. })
    }

    /// Draws the plan for one iteration; `streams[l]` belongs to agent `l`.
    pub fn plan<R: Rng>(
        &self,
        a: &CombinationMatrix,
        dim: usize,
        iteration: usize,
        streams: &mut [R],
    ) -> Result<PerturbationPlan> {
        let mut plan = match *self {
            Self::None => PerturbationPlan::zeros(a, dim),
            Self::Iid { sigma_p2 } => iid_plan(a, sigma_p2, dim, streams)?,
            Self::GraphHomomorphic { b_v } => homomorphic_plan(a, b_v, dim, streams)?,
        };
        plan.iteration = iteration;
        Ok(plan)
    }
}

/// Inverse CDF of the zero-mean Laplace law with scale `b`, for `u` in (0, 1).
pub fn laplace_inverse_cdf(u: f64, b: f64) -> f64 {
    if u < 0.5 {
        b * (2.0 * u).ln()
    } else {
        -b * (2.0 * (1.0 - u)).ln()
    }
}

/// `dim` i.i.d. Laplace(0, b) coordinates.
pub fn sample_laplace<R: Rng + ?Sized>(b: f64, dim: usize, rng: &mut R) -> Vec<f64> {
    assert!(b > 0.0, "Laplace scale must be positive, got {b}");
    (0..dim)
        .map(|_| laplace_inverse_cdf(rng.sample(Open01), b))
        .collect()
}

/// Noise `q_{lk}` for every directed pair `(l, k)` with `k` in the closed
/// neighborhood of `l`.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationPlan {
    pub iteration: usize,
    dim: usize,
    receivers: Vec<Vec<usize>>,
    // values[l] holds receivers[l].len() vectors of length dim, back to back
    values: Vec<Vec<f64>>,
}

impl PerturbationPlan {
    pub fn zeros(a: &CombinationMatrix, dim: usize) -> Self {
        let receivers: Vec<Vec<usize>> = (0..a.size()).map(|l| a.neighbors(l).to_vec()).collect();
        let values = receivers.iter().map(|r| vec![0.0; r.len() * dim]).collect();
        Self {
            iteration: 0,
            dim,
            receivers,
            values,
        }
    }

    pub fn num_agents(&self) -> usize {
        self.receivers.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn receivers(&self, sender: usize) -> &[usize] {
        &self.receivers[sender]
    }

    /// `q_{lk}`, if `k` is in the closed neighborhood of `l`.
    pub fn get(&self, sender: usize, receiver: usize) -> Option<&[f64]> {
        let pos = self.receivers[sender].binary_search(&receiver).ok()?;
        Some(&self.values[sender][pos * self.dim..(pos + 1) * self.dim])
    }

    /// Self-messages `psi_{ll}` are used in the combination but never leave
    /// their agent.
    pub fn is_transmitted(&self, sender: usize, receiver: usize) -> bool {
        sender != receiver && self.receivers[sender].binary_search(&receiver).is_ok()
    }

    fn set(&mut self, sender: usize, receiver: usize, q: &[f64]) {
        let pos = self.receivers[sender]
            .binary_search(&receiver)
            .expect("receiver in neighborhood");
        self.values[sender][pos * self.dim..(pos + 1) * self.dim].copy_from_slice(q);
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().flatten().all(|&v| v == 0.0)
    }

    /// Checks that the plan is defined exactly on `a`'s neighborhoods.
    pub fn check_structure(&self, a: &CombinationMatrix, dim: usize) -> Result<()> {
        if self.num_agents() != a.size() {
            return Err(Error::StructureMismatch(format!(
                "plan has {} agents, matrix has {}",
                self.num_agents(),
                a.size()
            )));
        }
        if self.dim != dim {
            return Err(Error::StructureMismatch(format!(
                "plan dimension {} but iterates have dimension {dim}",
                self.dim
            )));
        }
        for l in 0..a.size() {
            if self.receivers[l] != a.neighbors(l) {
                return Err(Error::StructureMismatch(format!(
                    "neighborhood of agent {l} differs"
                )));
            }
        }
        Ok(())
    }
}

pub fn homomorphic_plan<R: Rng>(
    a: &CombinationMatrix,
    b_v: f64,
    dim: usize,
    streams: &mut [R],
) -> Result<PerturbationPlan> {
    if let Some(agent) = (0..a.size()).find(|&l| a.self_weight(l) <= 0.0) {
        return Err(Error::ZeroSelfWeight { agent });
    }
    let mut plan = PerturbationPlan::zeros(a, dim);
    if b_v == 0.0 {
        return Ok(plan);
    }
    check_streams(a, streams.len())?;
    for (l, rng) in streams.iter_mut().enumerate() {
        let v = sample_laplace(b_v, dim, rng);
        let a_ll = a.self_weight(l);
        let own_scale = -(1.0 - a_ll) / a_ll;
        let own: Vec<f64> = v.iter().map(|x| own_scale * x).collect();
        for &k in a.neighbors(l) {
            plan.set(l, k, if k == l { &own } else { &v });
        }
    }
    Ok(plan)
}

pub fn iid_plan<R: Rng>(
    a: &CombinationMatrix,
    sigma_p2: f64,
    dim: usize,
    streams: &mut [R],
) -> Result<PerturbationPlan> {
    let mut plan = PerturbationPlan::zeros(a, dim);
    if sigma_p2 == 0.0 {
        return Ok(plan);
    }
    check_streams(a, streams.len())?;
    let b = (sigma_p2 / 2.0).sqrt();
    for (l, rng) in streams.iter_mut().enumerate() {
        let q = sample_laplace(b, dim, rng);
        for &k in a.neighbors(l) {
            plan.set(l, k, &q);
        }
    }
    Ok(plan)
}

fn check_streams(a: &CombinationMatrix, n: usize) -> Result<()> {
    if n != a.size() {
        return Err(Error::StructureMismatch(format!(
            "{n} random streams for {} agents",
            a.size()
        )));
    }
    Ok(())
}

/// `(1/K) sum_l sum_k a_lk q_lk`, per coordinate.
pub fn weighted_plan_sum(a: &CombinationMatrix, plan: &PerturbationPlan) -> Result<Vec<f64>> {
    plan.check_structure(a, plan.dim)?;
    let mut total = vec![0.0; plan.dim];
    for l in 0..a.size() {
        for &k in plan.receivers(l) {
            let w = a.weight(l, k);
            let q = plan.get(l, k).expect("structure checked");
            for (t, x) in total.iter_mut().zip(q) {
                *t += w * x;
            }
        }
    }
    let inv = 1.0 / a.size() as f64;
    total.iter_mut().for_each(|t| *t *= inv);
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{blend_self_loops, metropolis_weights, Topology};
    use crate::rng::{agent_streams, stream, Purpose};
    use proptest::prelude::*;

    fn uniform2() -> CombinationMatrix {
        CombinationMatrix::from_rows(vec![vec![0.5, 0.5], vec![0.5, 0.5]]).unwrap()
    }

    #[test]
    fn inverse_cdf_median_is_zero() {
        assert_eq!(laplace_inverse_cdf(0.5, 1.0), 0.0);
        assert_eq!(laplace_inverse_cdf(0.5, 3.0), 0.0);
        assert!((laplace_inverse_cdf(0.25, 1.0) + 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn laplace_moments() {
        let mut rng = stream(42, Purpose::Validation, 0);
        let x = sample_laplace(1.0, 1_000_000, &mut rng);
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var / 2.0 - 1.0).abs() < 0.02, "variance {var}");
    }

    #[test]
    fn homomorphic_construction_values() {
        // path-3 Metropolis: the middle agent has a_ll = 1/3
        let a = metropolis_weights(&Topology::path(3).unwrap()).unwrap();
        let mut streams = agent_streams(1, Purpose::Perturbation, 3);
        let plan = homomorphic_plan(&a, 0.8, 1, &mut streams).unwrap();
        let v = plan.get(1, 0).unwrap()[0];
        assert_eq!(plan.get(1, 2).unwrap()[0], v);
        assert!((plan.get(1, 1).unwrap()[0] - (-2.0 * v)).abs() < 1e-15);
        assert!(plan.get(0, 2).is_none());
    }

    #[test]
    fn zero_scales_give_zero_plans() {
        let a = metropolis_weights(&Topology::ring(5).unwrap()).unwrap();
        let mut s = agent_streams(1, Purpose::Perturbation, 5);
        assert!(homomorphic_plan(&a, 0.0, 3, &mut s).unwrap().is_zero());
        assert!(iid_plan(&a, 0.0, 3, &mut s).unwrap().is_zero());
        let p = PerturbationScheme::None.plan(&a, 3, 4, &mut s).unwrap();
        assert!(p.is_zero());
        assert_eq!(p.iteration, 4);
    }

    #[test]
    fn two_agent_weighted_sum_vanishes() {
        let a = uniform2();
        let mut plan = PerturbationPlan::zeros(&a, 1);
        plan.set(0, 1, &[1.0]);
        plan.set(0, 0, &[-1.0]);
        assert_eq!(weighted_plan_sum(&a, &plan).unwrap(), vec![0.0]);
    }

    #[test]
    fn iid_broadcast_identity() {
        let a = uniform2();
        let mut s = agent_streams(3, Purpose::Perturbation, 2);
        for _ in 0..10 {
            let plan = iid_plan(&a, 2.0, 4, &mut s).unwrap();
            assert_eq!(plan.get(0, 1), plan.get(0, 0));
            assert_eq!(plan.get(1, 0), plan.get(1, 1));
        }
        assert_eq!(
            PerturbationScheme::Iid { sigma_p2: 2.0 }.laplace_scale(),
            1.0
        );
    }

    #[test]
    fn single_agent_sum_is_the_noise() {
        let a = CombinationMatrix::identity(1);
        let mut s = agent_streams(3, Purpose::Perturbation, 1);
        let plan = iid_plan(&a, 2.0, 2, &mut s).unwrap();
        assert_eq!(
            weighted_plan_sum(&a, &plan).unwrap(),
            plan.get(0, 0).unwrap()
        );
    }

    #[test]
    fn zero_self_weight_rejected() {
        let swap = CombinationMatrix::from_rows(vec![vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let mut s = agent_streams(3, Purpose::Perturbation, 2);
        assert!(matches!(
            homomorphic_plan(&swap, 1.0, 1, &mut s),
            Err(Error::ZeroSelfWeight { agent: 0 })
        ));
    }

    #[test]
    fn structure_mismatch_detected() {
        let a = metropolis_weights(&Topology::path(3).unwrap()).unwrap();
        let b = metropolis_weights(&Topology::complete(3).unwrap()).unwrap();
        let plan = PerturbationPlan::zeros(&a, 2);
        assert!(matches!(
            weighted_plan_sum(&b, &plan),
            Err(Error::StructureMismatch(_))
        ));
        assert!(plan.check_structure(&a, 3).is_err());
    }

    #[test]
    fn iid_weighted_sum_variance() {
        // complete graph with uniform weights: the sum is the mean of K
        // independent Laplace vectors, variance sigma_p2 / K per coordinate
        let k = 5;
        let a = CombinationMatrix::from_rows(vec![vec![1.0 / k as f64; k]; k]).unwrap();
        let mut s = agent_streams(5, Purpose::Perturbation, k);
        let reps = 10_000;
        let sums: Vec<f64> = (0..reps)
            .map(|_| weighted_plan_sum(&a, &iid_plan(&a, 2.0, 1, &mut s).unwrap()).unwrap()[0])
            .collect();
        let var = sums.iter().map(|x| x * x).sum::<f64>() / reps as f64;
        let expected = 2.0 / k as f64;
        assert!((var / expected - 1.0).abs() < 0.05, "{var} vs {expected}");
    }

    #[test]
    fn homomorphic_neighbor_message_power() {
        let a = blend_self_loops(
            &metropolis_weights(&Topology::ring(4).unwrap()).unwrap(),
            0.05,
        );
        let mut s = agent_streams(9, Purpose::Perturbation, 4);
        let (b, m, reps) = (0.7, 3, 100_000);
        let mut acc = 0.0;
        for _ in 0..reps {
            let plan = homomorphic_plan(&a, b, m, &mut s).unwrap();
            acc += plan.get(0, 1).unwrap().iter().map(|x| x * x).sum::<f64>();
        }
        let expected = 2.0 * b * b * m as f64;
        assert!((acc / reps as f64 / expected - 1.0).abs() < 0.05);
    }

    #[test]
    fn plans_are_deterministic() {
        let a = metropolis_weights(&Topology::ring(6).unwrap()).unwrap();
        let scheme = PerturbationScheme::GraphHomomorphic { b_v: 1.5 };
        let mut s1 = agent_streams(77, Purpose::Perturbation, 6);
        let mut s2 = agent_streams(77, Purpose::Perturbation, 6);
        for i in 0..5 {
            assert_eq!(
                scheme.plan(&a, 4, i, &mut s1).unwrap(),
                scheme.plan(&a, 4, i, &mut s2).unwrap()
            );
        }
    }

    #[test]
    fn scheme_config_parsing() {
        #[derive(Deserialize)]
        struct W {
            schemes: Vec<PerturbationScheme>,
        }
        let w: W = toml::from_str(
            "[[schemes]]\nkind = \"none\"\n[[schemes]]\nkind = \"iid\"\nsigma_p2 = 2.0\n\
             [[schemes]]\nkind = \"graph_homomorphic\"\nb_v = 1.0\n",
        )
        .unwrap();
        assert_eq!(
            w.schemes,
            vec![
                PerturbationScheme::None,
                PerturbationScheme::Iid { sigma_p2: 2.0 },
                PerturbationScheme::GraphHomomorphic { b_v: 1.0 }
            ]
        );
        assert!(toml::from_str::<W>("[[schemes]]\nkind = \"iid\"\nb_v = 1.0\n").is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn homomorphic_nullspace(k in 2usize..20, p in 0.2f64..0.9, b in 0.01f64..10.0, seed in any::<u64>()) {
            let mut rng = stream(seed, Purpose::Topology, 0);
            let t = Topology::erdos_renyi(k, p, &mut rng).unwrap();
            let a = blend_self_loops(&metropolis_weights(&t).unwrap(), 0.05);
            let mut s = agent_streams(seed, Purpose::Perturbation, k);
            for _ in 0..5 {
                let plan = homomorphic_plan(&a, b, 3, &mut s).unwrap();
                for x in weighted_plan_sum(&a, &plan).unwrap() {
                    prop_assert!(x.abs() <= 1e-12);
                }
            }
        }
    }
}
