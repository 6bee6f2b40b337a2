//! Sensitivity and privacy-loss accounting for the perturbed diffusion.
//!
//! Everything here is analytic in `(mu, G, b_v, i)`: the sensitivity
//! `Delta(i) = 2 mu G i` is a worst case over data, and the privacy loss
//! `eps(i) = mu G (i^2 + i) / b_v` accumulates `2 mu G n / b_v` per step.

use std::fmt;

use rand::Rng;

use crate::error::{Error, Result};
use crate::perturbation::sample_laplace;

/// Privacy loss at one iteration. `NoPrivacy` stands for an unbounded loss
/// (zero noise scale).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Epsilon {
    Finite(f64),
    NoPrivacy,
}

impl Epsilon {
    pub fn value(&self) -> Option<f64> {
        match *self {
            Epsilon::Finite(e) => Some(e),
            Epsilon::NoPrivacy => None,
        }
    }
}

impl fmt::Display for Epsilon {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Epsilon::Finite(e) => write!(f, "{e}"),
            Epsilon::NoPrivacy => f.write_str("no_privacy"),
        }
    }
}

pub fn sensitivity_bound(mu: f64, clip_bound: f64, i: u64) -> f64 {
    2.0 * mu * clip_bound * i as f64
}

pub fn epsilon(mu: f64, clip_bound: f64, b_v: f64, i: u64) -> Result<f64> {
    if b_v == 0.0 {
        return Err(Error::ZeroScale);
    }
    let i = i as f64;
    Ok(mu * clip_bound * (i * i + i) / b_v)
}

/// `eps` at a scale that may be zero, mapped onto [`Epsilon`].
pub fn epsilon_or_unbounded(mu: f64, clip_bound: f64, b_v: f64, i: u64) -> Epsilon {
    match epsilon(mu, clip_bound, b_v, i) {
        Ok(e) => Epsilon::Finite(e),
        Err(_) => Epsilon::NoPrivacy,
    }
}

/// `(i, eps(i))` for `i = 0..=T`.
pub fn epsilon_schedule(
    mu: f64,
    clip_bound: f64,
    b_v: f64,
    horizon: u64,
) -> Result<Vec<(u64, f64)>> {
    (0..=horizon)
        .map(|i| epsilon(mu, clip_bound, b_v, i).map(|e| (i, e)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LedgerEntry {
    pub iteration: u64,
    pub sensitivity: f64,
    pub epsilon: Epsilon,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrivacyLedger {
    pub mu: f64,
    pub clip_bound: f64,
    pub b_v: f64,
    pub entries: Vec<LedgerEntry>,
}

impl PrivacyLedger {
    pub fn new(mu: f64, clip_bound: f64, b_v: f64, horizon: u64) -> Self {
        let entries = (0..=horizon)
            .map(|i| LedgerEntry {
                iteration: i,
                sensitivity: sensitivity_bound(mu, clip_bound, i),
                epsilon: epsilon_or_unbounded(mu, clip_bound, b_v, i),
            })
            .collect();
        Self {
            mu,
            clip_bound,
            b_v,
            entries,
        }
    }

    pub fn is_private(&self) -> bool {
        self.b_v > 0.0
    }

    pub fn final_epsilon(&self) -> Epsilon {
        self.entries
            .last()
            .map_or(Epsilon::Finite(0.0), |e| e.epsilon)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DpCheckReport {
    pub analytic_bound: f64,
    pub max_log_ratio: f64,
    /// Standard error of the log ratio in the bin that attains the maximum.
    pub std_error: f64,
    pub bins_used: usize,
    pub pass: bool,
}

/// Bins with fewer hits than this in either histogram are skipped.
pub const DP_CHECK_MIN_COUNT: u64 = 1_000;

pub const DP_CHECK_MIN_SAMPLES: usize = 100_000;

/// Histogram test of the scalar Laplace mechanism: releases `x + v` and
/// `x' + v` with `|x - x'| = shift` and compares the empirical densities.
/// Passes when the largest absolute log ratio stays within
/// `eps_target + 3` standard errors of its bin.
pub fn empirical_dp_check<R: Rng + ?Sized>(
    shift: f64,
    b: f64,
    eps_target: f64,
    num_samples: usize,
    rng: &mut R,
) -> Result<DpCheckReport> {
    if num_samples < DP_CHECK_MIN_SAMPLES {
        return Err(Error::InvalidParameter(format!(
            "empirical DP check needs at least {DP_CHECK_MIN_SAMPLES} samples, got {num_samples}"
        )));
    }
    if !(b > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "Laplace scale must be positive, got {b}"
        )));
    }
    let d = shift.abs();
    let width = b / 4.0;
    let lo = -8.0 * b;
    let hi = d + 8.0 * b;
    let nbins = ((hi - lo) / width).ceil() as usize;
    let mut hist = [vec![0u64; nbins], vec![0u64; nbins]];
    for (h, x) in hist.iter_mut().zip([0.0, d]) {
        for v in sample_laplace(b, num_samples, rng) {
            let y = x + v;
            if y >= lo && y < hi {
                let bin = (((y - lo) / width) as usize).min(nbins - 1);
                h[bin] += 1;
            }
        }
    }
    let mut best: Option<(f64, f64)> = None;
    let mut used = 0;
    for (&c0, &c1) in hist[0].iter().zip(&hist[1]) {
        if c0 < DP_CHECK_MIN_COUNT || c1 < DP_CHECK_MIN_COUNT {
            continue;
        }
        used += 1;
        let (c0, c1) = (c0 as f64, c1 as f64);
        let ratio = (c0 / c1).ln().abs();
        let se = (1.0 / c0 + 1.0 / c1).sqrt();
        if best.is_none_or(|(r, _)| ratio > r) {
            best = Some((ratio, se));
        }
    }
    let (max_log_ratio, std_error) = best.ok_or(Error::InsufficientMass)?;
    Ok(DpCheckReport {
        analytic_bound: d / b,
        max_log_ratio,
        std_error,
        bins_used: used,
        pass: max_log_ratio <= eps_target + 3.0 * std_error,
    })
}
