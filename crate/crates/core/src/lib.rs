//! Approximate message passing (AMP) with sliding-window Bayesian denoisers
//! for signals generated by a finite-state Markov chain.
//!
//! - [`markov`]: chains, stationary laws, window marginals, spectral gaps.
//! - [`denoiser`]: the posterior-mean sliding-window denoiser.
//! - [`state_evolution`]: the scalar recursion predicting AMP's error.
//! - [`amp`]: problem instances and the AMP iteration.
//! - [`diagnostics`]: empirical concentration checks.
//! - [`experiment`]: config-driven runs behind the `amp-sw` binary.

pub mod amp;
pub mod denoiser;
pub mod diagnostics;
pub mod error;
pub mod experiment;
pub mod markov;
pub mod rng;
pub mod state_evolution;

pub use error::{Error, Result};
