//! State evolution for sliding-window AMP.
//!
//! ```text
//! σ₀² = σ_β² / δ
//! τ_t² = σ² + σ_t²
//! σ_{t+1}² = ((1 − w_k) E[(η_t(β̲ + τ_t Z̲) − β̲_c)²] + w_k σ_β²) / δ,   w_k = 2k/N
//! ```
//!
//! The expectation is exact over the enumerated window prior and numeric over
//! the Gaussian vector `Z̲` through an [`ExpectationEngine`].

use std::io::Write;

use nalgebra::{DMatrix, SymmetricEigen};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::denoiser::BayesSwDenoiser;
use crate::error::{Error, Result};
use crate::markov::WindowPrior;
use crate::rng::{chunk_rng, Stream};

/// Absolute tolerance on `|σ_{t+1}² − σ_t²|` that ends [`run_se`] early.
pub const SE_CONVERGENCE_TOL: f64 = 1e-8;
/// Default iteration budget.
pub const DEFAULT_MAX_ITERATIONS: usize = 30;
/// Default number of Gaussian samples for the Monte Carlo engine.
pub const DEFAULT_MC_SAMPLES: usize = 200_000;
/// Samples per Monte Carlo work item; each chunk draws from its own stream.
pub const MC_CHUNK: usize = 4096;
/// Upper bound on tensor-product Gauss–Hermite grid sizes.
pub const MAX_QUADRATURE_POINTS: usize = 20_000_000;

/// Problem constants entering state evolution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeParams {
    pub k: usize,
    /// Signal length `N`.
    pub signal_len: usize,
    /// Number of measurements `n`.
    pub measurements: usize,
    /// Measurement noise variance `σ²`.
    pub noise_var: f64,
    /// `σ_β² = E[β²]`.
    pub signal_second_moment: f64,
}

impl SeParams {
    pub fn new(
        k: usize,
        signal_len: usize,
        measurements: usize,
        noise_var: f64,
        signal_second_moment: f64,
    ) -> Result<Self> {
        if signal_len <= 2 * k {
            return Err(Error::InvalidParameter(format!(
                "N = {signal_len} must exceed 2k = {}",
                2 * k
            )));
        }
        if measurements == 0 {
            return Err(Error::InvalidParameter("n must be positive".into()));
        }
        if !(noise_var.is_finite() && noise_var >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "noise variance {noise_var}"
            )));
        }
        if !(signal_second_moment.is_finite() && signal_second_moment > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "signal second moment must be positive, got {signal_second_moment}"
            )));
        }
        Ok(SeParams {
            k,
            signal_len,
            measurements,
            noise_var,
            signal_second_moment,
        })
    }

    /// `δ = n / N`.
    pub fn delta(&self) -> f64 {
        self.measurements as f64 / self.signal_len as f64
    }

    /// `w_k = 2k / N`.
    pub fn edge_weight(&self) -> f64 {
        2.0 * self.k as f64 / self.signal_len as f64
    }
}

/// How `E[f(Z̲)]`, `Z̲ ~ N(0, I_d)`, is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ExpectationEngine {
    /// Seeded Monte Carlo. With `antithetic`, `samples / 2` pairs `(Z, −Z)`
    /// are drawn. The same seed always yields the same samples.
    MonteCarlo {
        samples: usize,
        seed: u64,
        antithetic: bool,
    },
    /// Tensor-product Gauss–Hermite quadrature with `nodes` per dimension.
    GaussHermite { nodes: usize },
}

impl ExpectationEngine {
    pub fn monte_carlo(samples: usize, seed: u64) -> Self {
        ExpectationEngine::MonteCarlo {
            samples,
            seed,
            antithetic: true,
        }
    }

    pub fn sample_count(&self) -> usize {
        match *self {
            ExpectationEngine::MonteCarlo { samples, .. } => samples,
            ExpectationEngine::GaussHermite { nodes } => nodes,
        }
    }

    pub fn seed(&self) -> Option<u64> {
        match *self {
            ExpectationEngine::MonteCarlo { seed, .. } => Some(seed),
            ExpectationEngine::GaussHermite { .. } => None,
        }
    }

    /// `E[f(Z̲)]` for `Z̲ ~ N(0, I_dim)`.
    pub fn gaussian_expectation<F>(&self, dim: usize, f: F) -> Result<f64>
    where
        F: Fn(&[f64]) -> f64 + Sync,
    {
        if dim == 0 {
            return Err(Error::Engine("dimension must be positive".into()));
        }
        match *self {
            ExpectationEngine::MonteCarlo {
                samples,
                seed,
                antithetic,
            } => monte_carlo(samples, seed, antithetic, dim, &f),
            ExpectationEngine::GaussHermite { nodes } => gauss_hermite(nodes, dim, &f),
        }
    }
}

fn monte_carlo<F>(samples: usize, seed: u64, antithetic: bool, dim: usize, f: &F) -> Result<f64>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    if samples == 0 {
        return Err(Error::Engine("sample count is 0".into()));
    }
    // draws = number of independent Gaussian vectors
    let draws = if antithetic {
        samples.div_ceil(2)
    } else {
        samples
    };
    let chunks = draws.div_ceil(MC_CHUNK);
    if chunks > u32::MAX as usize {
        return Err(Error::Engine("too many samples".into()));
    }
    let partial: Vec<f64> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = chunk_rng(seed, Stream::StateEvolution, c as u32);
            let len = MC_CHUNK.min(draws - c * MC_CHUNK);
            let mut z = vec![0.0; dim];
            let mut neg = vec![0.0; dim];
            let mut acc = 0.0;
            for _ in 0..len {
                for zi in z.iter_mut() {
                    *zi = StandardNormal.sample(&mut rng);
                }
                if antithetic {
                    for (n, zi) in neg.iter_mut().zip(&z) {
                        *n = -zi;
                    }
                    acc += 0.5 * (f(&z) + f(&neg));
                } else {
                    acc += f(&z);
                }
            }
            acc
        })
        .collect();
    Ok(partial.iter().sum::<f64>() / draws as f64)
}

/// Nodes and weights for `E[g(Z)]`, `Z ~ N(0, 1)`, via Golub–Welsch on the
/// probabilists' Hermite recurrence.
pub fn gauss_hermite_rule(nodes: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if nodes == 0 {
        return Err(Error::Engine("quadrature needs at least one node".into()));
    }
    let jacobi = DMatrix::from_fn(nodes, nodes, |i, j| {
        if i + 1 == j || j + 1 == i {
            (i.max(j) as f64).sqrt()
        } else {
            0.0
        }
    });
    let eig = SymmetricEigen::new(jacobi);
    let mut rule: Vec<(f64, f64)> = (0..nodes)
        .map(|i| (eig.eigenvalues[i], eig.eigenvectors[(0, i)].powi(2)))
        .collect();
    rule.sort_by(|a, b| a.0.total_cmp(&b.0));
    let total: f64 = rule.iter().map(|r| r.1).sum();
    Ok((
        rule.iter().map(|r| r.0).collect(),
        rule.iter().map(|r| r.1 / total).collect(),
    ))
}

fn gauss_hermite<F>(nodes: usize, dim: usize, f: &F) -> Result<f64>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    let (x, w) = gauss_hermite_rule(nodes)?;
    let points = nodes
        .checked_pow(dim as u32)
        .filter(|&p| p <= MAX_QUADRATURE_POINTS)
        .ok_or_else(|| Error::Engine(format!("{nodes}^{dim} quadrature points exceed the cap")))?;
    let partial: Vec<f64> = (0..points.div_ceil(MC_CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut z = vec![0.0; dim];
            let mut acc = 0.0;
            for p in c * MC_CHUNK..points.min((c + 1) * MC_CHUNK) {
                let mut rem = p;
                let mut weight = 1.0;
                for zi in z.iter_mut() {
                    let idx = rem % nodes;
                    rem /= nodes;
                    *zi = x[idx];
                    weight *= w[idx];
                }
                acc += weight * f(&z);
            }
            acc
        })
        .collect();
    Ok(partial.iter().sum())
}

/// `σ₀² = σ_β² / δ`.
pub fn se_init(signal_second_moment: f64, delta: f64) -> Result<f64> {
    if !(signal_second_moment > 0.0 && delta > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "σ_β² = {signal_second_moment} and δ = {delta} must both be positive"
        )));
    }
    Ok(signal_second_moment / delta)
}

/// `E[(η(β̲ + τZ̲) − β̲_c)²]` for the Bayes sliding-window denoiser at noise
/// level `tau`.
pub fn denoiser_mse(prior: &WindowPrior, tau: f64, engine: &ExpectationEngine) -> Result<f64> {
    let denoiser = BayesSwDenoiser::new(prior);
    denoiser.at(tau)?;
    let width = prior.width();
    let c = prior.center_index();
    let inv_tau2 = 1.0 / (tau * tau);
    let support: Vec<(&[f64], f64)> = prior.sequences().filter(|(_, p)| *p > 0.0).collect();
    engine.gaussian_expectation(width, |z| {
        let mut v = [0.0; 64];
        let mut heap;
        let v: &mut [f64] = if width <= v.len() {
            &mut v[..width]
        } else {
            heap = vec![0.0; width];
            &mut heap
        };
        let mut acc = 0.0;
        for (x, p) in &support {
            for ((vi, xi), zi) in v.iter_mut().zip(*x).zip(z) {
                *vi = xi + tau * zi;
            }
            let est = denoiser.posterior_unchecked(inv_tau2, v).mean;
            acc += p * (est - x[c]).powi(2);
        }
        acc
    })
}

/// One state-evolution update `σ_t² ↦ σ_{t+1}²`.
pub fn se_step(
    sigma2: f64,
    params: &SeParams,
    prior: &WindowPrior,
    engine: &ExpectationEngine,
) -> Result<f64> {
    if !(sigma2.is_finite() && sigma2 > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "σ_t² must be positive, got {sigma2}"
        )));
    }
    check_prior(params, prior)?;
    let tau = (params.noise_var + sigma2).sqrt();
    let mse = denoiser_mse(prior, tau, engine)?;
    let w = params.edge_weight();
    Ok(((1.0 - w) * mse + w * params.signal_second_moment) / params.delta())
}

fn check_prior(params: &SeParams, prior: &WindowPrior) -> Result<()> {
    if prior.k() != params.k {
        return Err(Error::InvalidParameter(format!(
            "prior half-window {} does not match k = {}",
            prior.k(),
            params.k
        )));
    }
    Ok(())
}

/// Middle-coordinate MSE implied by `τ²`:
/// `(n(τ² − σ²) − 2kσ_β²) / (N − 2k)`.
pub fn predicted_middle_mse(tau2: f64, params: &SeParams) -> f64 {
    let n = params.measurements as f64;
    let k2 = 2.0 * params.k as f64;
    (n * (tau2 - params.noise_var) - k2 * params.signal_second_moment)
        / (params.signal_len as f64 - k2)
}

/// A state-evolution run. Index `t` of every vector refers to iteration `t`;
/// `predicted_mse[t]` is the predicted middle MSE of the AMP estimate `β^t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeTrace {
    pub params: SeParams,
    pub engine: ExpectationEngine,
    pub sigma2: Vec<f64>,
    pub tau2: Vec<f64>,
    pub predicted_mse: Vec<f64>,
    pub converged: bool,
}

impl SeTrace {
    fn push(&mut self, sigma2: f64) {
        let tau2 = self.params.noise_var + sigma2;
        self.sigma2.push(sigma2);
        self.tau2.push(tau2);
        self.predicted_mse
            .push(predicted_middle_mse(tau2, &self.params));
    }

    pub fn len(&self) -> usize {
        self.sigma2.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sigma2.is_empty()
    }

    /// Number of updates performed.
    pub fn iterations(&self) -> usize {
        self.len().saturating_sub(1)
    }

    /// `τ_t²`; past the end of a converged trace the fixed point is returned.
    pub fn tau2_at(&self, t: usize) -> Result<f64> {
        match self.tau2.get(t) {
            Some(&v) => Ok(v),
            None if self.converged => Ok(*self.tau2.last().expect("trace is never empty")),
            None => Err(Error::MissingTrace(format!(
                "τ² requested at t = {t}, trace has {} entries and did not converge",
                self.len()
            ))),
        }
    }

    /// Predicted middle MSE of `β^t`, extended past convergence like
    /// [`tau2_at`](Self::tau2_at).
    pub fn predicted_mse_at(&self, t: usize) -> Result<f64> {
        Ok(predicted_middle_mse(self.tau2_at(t)?, &self.params))
    }

    /// CSV with header `t,sigma2,tau2,predicted_mse`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["t", "sigma2", "tau2", "predicted_mse"])?;
        for t in 0..self.len() {
            w.write_record([
                t.to_string(),
                self.sigma2[t].to_string(),
                self.tau2[t].to_string(),
                self.predicted_mse[t].to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Runs at most `max_iterations` updates from `σ₀²`, stopping once
/// `|σ_{t+1}² − σ_t²| < SE_CONVERGENCE_TOL`.
pub fn run_se(
    params: &SeParams,
    prior: &WindowPrior,
    max_iterations: usize,
    engine: &ExpectationEngine,
) -> Result<SeTrace> {
    check_prior(params, prior)?;
    let sigma0 = se_init(params.signal_second_moment, params.delta())?;
    let mut trace = SeTrace {
        params: *params,
        engine: *engine,
        sigma2: Vec::new(),
        tau2: Vec::new(),
        predicted_mse: Vec::new(),
        converged: false,
    };
    trace.push(sigma0);
    let mut current = sigma0;
    for _ in 0..max_iterations {
        let next = se_step(current, params, prior, engine)?;
        trace.push(next);
        let done = (next - current).abs() < SE_CONVERGENCE_TOL;
        current = next;
        if done {
            trace.converged = true;
            break;
        }
    }
    Ok(trace)
}
