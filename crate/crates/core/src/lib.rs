//! Decentralized diffusion learning with locally private message exchange.
//!
//! Agents on an undirected graph run adapt-then-combine diffusion and add
//! Laplace noise to what they share. Two schemes are provided: independent
//! noise per broadcast, and graph-homomorphic noise whose weighted network
//! sum vanishes so that the network centroid is untouched.

pub mod analysis;
pub mod config;
pub mod engine;
pub mod error;
pub mod experiment;
pub mod graph;
pub mod loss;
pub mod perturbation;
pub mod privacy;
pub mod report;
pub mod rng;
pub mod validation;

pub use error::{Error, Result};
