//! Sliding-window denoisers.
//!
//! A denoiser maps a noisy window of length `2k + 1` to an estimate of its
//! center coordinate and also reports the partial derivative with respect to
//! that center coordinate, which feeds the Onsager correction.
//!
//! [`BayesSwDenoiser`] is the exact posterior mean under a [`WindowPrior`]
//! observed through i.i.d. Gaussian noise of standard deviation `τ`:
//!
//! ```text
//! η(v) = Σ_x π(x) w(x) x_c / Σ_x π(x) w(x),   w(x) = exp(−‖v − x‖² / 2τ²)
//! ```
//!
//! and its center derivative is the posterior variance of `x_c` over `τ²`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::markov::WindowPrior;

/// Windows per parallel work item in [`denoise_signal`]. The Onsager sum is
/// reduced chunk by chunk in index order, so results do not depend on the
/// number of worker threads.
pub const DENOISE_CHUNK: usize = 1024;

/// A map `ℝ^{2k+1} → ℝ` with a center-coordinate derivative.
pub trait WindowDenoiser: Sync {
    fn half_window(&self) -> usize;

    fn window_len(&self) -> usize {
        2 * self.half_window() + 1
    }

    fn evaluate(&self, window: &[f64]) -> Result<f64> {
        Ok(self.evaluate_with_derivative(window)?.0)
    }

    fn center_derivative(&self, window: &[f64]) -> Result<f64> {
        Ok(self.evaluate_with_derivative(window)?.1)
    }

    /// `(η(v), ∂η/∂v_c)`.
    fn evaluate_with_derivative(&self, window: &[f64]) -> Result<(f64, f64)>;
}

/// What to do with the `k` positions at each end of the signal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Boundary {
    /// Edge estimates are zero.
    #[default]
    Zero,
    /// Edge positions are denoised with out-of-range window entries replaced
    /// by the median of the in-range ones.
    Median,
}

impl std::str::FromStr for Boundary {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zero" => Ok(Boundary::Zero),
            "median" => Ok(Boundary::Median),
            other => Err(Error::InvalidParameter(format!(
                "unknown boundary policy {other:?}"
            ))),
        }
    }
}

/// Posterior mean and variance of the center coordinate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CenterPosterior {
    pub mean: f64,
    pub variance: f64,
}

/// Posterior-mean denoiser for a discrete window prior.
#[derive(Debug, Clone)]
pub struct BayesSwDenoiser {
    k: usize,
    /// Support sequences only (zero-probability sequences are dropped).
    support: Vec<f64>,
    log_prior: Vec<f64>,
    half_sq_norm: Vec<f64>,
    centers: Vec<f64>,
}

impl BayesSwDenoiser {
    pub fn new(prior: &WindowPrior) -> Self {
        let k = prior.k();
        let mut support = Vec::new();
        let mut log_prior = Vec::new();
        let mut half_sq_norm = Vec::new();
        let mut centers = Vec::new();
        for (x, p) in prior.sequences() {
            if p > 0.0 {
                support.extend_from_slice(x);
                log_prior.push(p.ln());
                half_sq_norm.push(0.5 * x.iter().map(|a| a * a).sum::<f64>());
                centers.push(x[k]);
            }
        }
        BayesSwDenoiser {
            k,
            support,
            log_prior,
            half_sq_norm,
            centers,
        }
    }

    pub fn half_window(&self) -> usize {
        self.k
    }

    pub fn window_len(&self) -> usize {
        2 * self.k + 1
    }

    /// Fixes the noise level, giving a [`WindowDenoiser`].
    pub fn at(&self, tau: f64) -> Result<BayesSwAt<'_>> {
        if !(tau.is_finite() && tau > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "tau must be positive, got {tau}"
            )));
        }
        Ok(BayesSwAt {
            denoiser: self,
            inv_tau2: 1.0 / (tau * tau),
        })
    }

    pub fn denoise(&self, tau: f64, v: &[f64]) -> Result<f64> {
        self.at(tau)?.evaluate(v)
    }

    pub fn center_derivative(&self, tau: f64, v: &[f64]) -> Result<f64> {
        self.at(tau)?.center_derivative(v)
    }

    /// Center posterior for `v`; `inv_tau2 = 1/τ²`. Length is not checked.
    pub fn posterior_unchecked(&self, inv_tau2: f64, v: &[f64]) -> CenterPosterior {
        let width = self.window_len();
        let logits = self
            .support
            .chunks_exact(width)
            .zip(&self.log_prior)
            .zip(&self.half_sq_norm)
            .map(|((x, lp), hs)| {
                let dot: f64 = x.iter().zip(v).map(|(a, b)| a * b).sum();
                lp + (dot - hs) * inv_tau2
            });
        posterior_from_logits(logits, &self.centers)
    }
}

/// Streaming log-sum-exp over `(logit, center)` pairs: keeps a running max
/// and rescales the partial sums whenever it increases.
pub(crate) fn posterior_from_logits(
    logits: impl Iterator<Item = f64>,
    centers: &[f64],
) -> CenterPosterior {
    let mut max = f64::NEG_INFINITY;
    let (mut z, mut s1, mut s2) = (0.0, 0.0, 0.0);
    for (l, &c) in logits.zip(centers) {
        if l > max {
            let scale = (max - l).exp();
            z *= scale;
            s1 *= scale;
            s2 *= scale;
            max = l;
        }
        let w = (l - max).exp();
        z += w;
        s1 += w * c;
        s2 += w * c * c;
    }
    let mean = s1 / z;
    let variance = (s2 / z - mean * mean).max(0.0);
    CenterPosterior { mean, variance }
}

/// [`BayesSwDenoiser`] at a fixed noise level.
#[derive(Debug, Clone, Copy)]
pub struct BayesSwAt<'a> {
    denoiser: &'a BayesSwDenoiser,
    inv_tau2: f64,
}

impl BayesSwAt<'_> {
    pub fn posterior(&self, v: &[f64]) -> Result<CenterPosterior> {
        check_len(self.denoiser.window_len(), v)?;
        Ok(self.denoiser.posterior_unchecked(self.inv_tau2, v))
    }
}

impl WindowDenoiser for BayesSwAt<'_> {
    fn half_window(&self) -> usize {
        self.denoiser.k
    }

    fn evaluate_with_derivative(&self, window: &[f64]) -> Result<(f64, f64)> {
        let post = self.posterior(window)?;
        Ok((post.mean, post.variance * self.inv_tau2))
    }
}

fn check_len(expected: usize, v: &[f64]) -> Result<()> {
    if v.len() != expected {
        return Err(Error::DimensionMismatch {
            expected,
            got: v.len(),
        });
    }
    Ok(())
}

/// Output of [`denoise_signal`].
#[derive(Debug, Clone, PartialEq)]
pub struct Denoised {
    pub estimate: Vec<f64>,
    /// Sum of center derivatives over the middle positions `k..N−k`.
    pub onsager_sum: f64,
}

/// Applies `denoiser` to every window of `signal`.
///
/// Middle positions `i ∈ [k, N−k)` (0-based) use the window `s[i−k..=i+k]`
/// and contribute to the derivative sum; edge positions follow `boundary`
/// and never contribute.
pub fn denoise_signal<D: WindowDenoiser>(
    denoiser: &D,
    signal: &[f64],
    boundary: Boundary,
) -> Result<Denoised> {
    let k = denoiser.half_window();
    let width = 2 * k + 1;
    let n = signal.len();
    if n < width {
        return Err(Error::InvalidParameter(format!(
            "signal length {n} is shorter than the window length {width}"
        )));
    }
    let middle = n - 2 * k;

    let chunks: Vec<(Vec<f64>, f64)> = (0..middle)
        .collect::<Vec<_>>()
        .par_chunks(DENOISE_CHUNK)
        .map(|idx| -> Result<(Vec<f64>, f64)> {
            let mut values = Vec::with_capacity(idx.len());
            let mut deriv = 0.0;
            for &j in idx {
                let (v, d) = denoiser.evaluate_with_derivative(&signal[j..j + width])?;
                values.push(v);
                deriv += d;
            }
            Ok((values, deriv))
        })
        .collect::<Result<_>>()?;

    let mut estimate = vec![0.0; n];
    let mut onsager_sum = 0.0;
    let mut pos = k;
    for (values, deriv) in chunks {
        estimate[pos..pos + values.len()].copy_from_slice(&values);
        pos += values.len();
        onsager_sum += deriv;
    }

    if boundary == Boundary::Median {
        let mut window = vec![0.0; width];
        for i in (0..k).chain(n - k..n) {
            fill_median_window(signal, i, k, &mut window);
            estimate[i] = denoiser.evaluate(&window)?;
        }
    }

    Ok(Denoised {
        estimate,
        onsager_sum,
    })
}

/// Window centered at `i` with out-of-range entries replaced by the median of
/// the in-range entries.
pub fn fill_median_window(signal: &[f64], i: usize, k: usize, window: &mut [f64]) {
    let n = signal.len() as isize;
    let lo = i as isize - k as isize;
    let mut present: Vec<f64> = (lo..=lo + 2 * k as isize)
        .filter(|&j| (0..n).contains(&j))
        .map(|j| signal[j as usize])
        .collect();
    present.sort_by(f64::total_cmp);
    let m = present.len();
    let median = if m % 2 == 1 {
        present[m / 2]
    } else {
        0.5 * (present[m / 2 - 1] + present[m / 2])
    };
    for (slot, j) in window.iter_mut().zip(lo..) {
        *slot = if (0..n).contains(&j) {
            signal[j as usize]
        } else {
            median
        };
    }
}
