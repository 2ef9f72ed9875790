//! Cooperative dual evolution for adversarial training.
//!
//! A population of generators and a population of discriminators evolve
//! side by side. Each generator parent produces offspring by taking one
//! optimizer step on one of three losses (minimax, heuristic, least
//! squares) against a softmax-weighted ensemble of the discriminators;
//! each discriminator parent does the same with two losses (minimax, least
//! squares). Offspring are scored and the best replace their parents.
//!
//! The crate ships a small reverse-mode autodiff engine, the fully
//! connected networks of the 2-D ring-of-Gaussians benchmark, mode
//! coverage metrics, and a `cdegan` command line tool.

pub mod autodiff;
pub mod config;
pub mod data;
pub mod error;
pub mod evolution;
pub mod fitness;
pub mod metrics;
pub mod nets;
pub mod objectives;
mod par;

pub use error::{Error, Result};
