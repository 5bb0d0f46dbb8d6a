//! Empirical checks of the concentration behaviour behind AMP state
//! evolution: effective-noise moments, the initial residual norm, and
//! averages of pseudo-Lipschitz functions over overlapping windows of Markov
//! and Gaussian sequences.

use std::fmt::Write as _;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::amp::{dot, norm2, AmpState, ProblemInstance};
use crate::denoiser::BayesSwDenoiser;
use crate::error::{Error, Result};
use crate::markov::{FiniteMarkovChain, WindowPrior};
use crate::rng::{stream_rng, Stream};
use crate::state_evolution::ExpectationEngine;

/// Default sample count for the Gaussian window-average oracle.
pub const GAUSSIAN_ORACLE_SAMPLES: usize = 1_000_000;

/// Pass thresholds. A check passes when the absolute deviation is within
/// `abs` or the relative deviation is within `rel`; a missing bound never
/// passes on its own.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Tolerance {
    pub abs: Option<f64>,
    pub rel: Option<f64>,
}

impl Tolerance {
    pub fn abs(abs: f64) -> Self {
        Tolerance {
            abs: Some(abs),
            rel: None,
        }
    }

    pub fn rel(rel: f64) -> Self {
        Tolerance {
            abs: None,
            rel: Some(rel),
        }
    }

    /// `3/√size`, the CLT scale for means of bounded quantities.
    pub fn clt(size: usize) -> Self {
        Self::abs(3.0 / (size as f64).sqrt())
    }

    pub fn scaled(self, factor: f64) -> Self {
        Tolerance {
            abs: self.abs.map(|a| a * factor),
            rel: self.rel.map(|r| r * factor),
        }
    }

    pub fn accepts(&self, abs_dev: f64, rel_dev: f64) -> bool {
        self.abs.is_some_and(|a| abs_dev <= a) || self.rel.is_some_and(|r| rel_dev <= r)
    }
}

/// Empirical value of a quantity against its theoretical limit.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConcentrationReport {
    quantity: String,
    empirical: f64,
    theoretical: f64,
    abs_deviation: f64,
    rel_deviation: f64,
    sample_size: usize,
    tolerance: Tolerance,
    pass: bool,
}

impl ConcentrationReport {
    pub fn new(
        quantity: impl Into<String>,
        empirical: f64,
        theoretical: f64,
        sample_size: usize,
        tolerance: Tolerance,
    ) -> Self {
        let abs_deviation = (empirical - theoretical).abs();
        let rel_deviation = if abs_deviation == 0.0 {
            0.0
        } else {
            abs_deviation / theoretical.abs()
        };
        ConcentrationReport {
            quantity: quantity.into(),
            empirical,
            theoretical,
            abs_deviation,
            rel_deviation,
            sample_size,
            tolerance,
            pass: tolerance.accepts(abs_deviation, rel_deviation),
        }
    }

    pub fn quantity(&self) -> &str {
        &self.quantity
    }

    pub fn empirical(&self) -> f64 {
        self.empirical
    }

    pub fn theoretical(&self) -> f64 {
        self.theoretical
    }

    pub fn abs_deviation(&self) -> f64 {
        self.abs_deviation
    }

    pub fn rel_deviation(&self) -> f64 {
        self.rel_deviation
    }

    pub fn sample_size(&self) -> usize {
        self.sample_size
    }

    pub fn tolerance(&self) -> Tolerance {
        self.tolerance
    }

    pub fn pass(&self) -> bool {
        self.pass
    }
}

/// Fixed-width text table of reports.
pub fn render_table(reports: &[ConcentrationReport]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<44} {:>13} {:>13} {:>11} {:>10} {:>9}  result",
        "quantity", "empirical", "theoretical", "abs dev", "rel dev", "size"
    );
    for r in reports {
        let _ = writeln!(
            out,
            "{:<44} {:>13.6e} {:>13.6e} {:>11.3e} {:>10.3e} {:>9}  {}",
            r.quantity,
            r.empirical,
            r.theoretical,
            r.abs_deviation,
            r.rel_deviation,
            r.sample_size,
            if r.pass { "PASS" } else { "FAIL" }
        );
    }
    out
}

/// `h^{t+1} = β₀ − (Aᵀ z^t + β^t)`.
pub fn effective_noise(state: &AmpState, instance: &ProblemInstance) -> Result<Vec<f64>> {
    let s = state.effective_observation(instance)?;
    if s.len() != instance.beta0.len() {
        return Err(Error::DimensionMismatch {
            expected: instance.beta0.len(),
            got: s.len(),
        });
    }
    Ok(instance.beta0.iter().zip(&s).map(|(b, v)| b - v).collect())
}

/// Tolerances for [`check_h_moments`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HMomentTolerances {
    pub norm: Tolerance,
    pub correlation: Tolerance,
    /// `None` skips the tail-fraction proxy.
    pub tail: Option<Tolerance>,
}

impl HMomentTolerances {
    pub fn defaults(signal_len: usize) -> Self {
        let p = 0.05f64;
        HMomentTolerances {
            norm: Tolerance::rel(0.1),
            correlation: Tolerance::abs(0.05),
            tail: Some(Tolerance::abs(
                3.0 * (p * (1.0 - p) / signal_len as f64).sqrt(),
            )),
        }
    }

    pub fn scaled(self, factor: f64) -> Self {
        HMomentTolerances {
            norm: self.norm.scaled(factor),
            correlation: self.correlation.scaled(factor),
            tail: self.tail.map(|t| t.scaled(factor)),
        }
    }
}

/// Two-sided 5% normal quantile.
const Z_975: f64 = 1.959_963_984_540_054;

/// `‖h‖²/N` against `τ²`, `hᵀβ₀/n` against 0, and optionally the fraction of
/// `|h_i| > 1.96 τ` against 0.05.
pub fn check_h_moments(
    h: &[f64],
    tau2: f64,
    beta0: &[f64],
    measurements: usize,
    tol: &HMomentTolerances,
) -> Result<Vec<ConcentrationReport>> {
    if h.len() != beta0.len() {
        return Err(Error::DimensionMismatch {
            expected: beta0.len(),
            got: h.len(),
        });
    }
    let big_n = h.len();
    let mut reports = vec![
        ConcentrationReport::new(
            "h_norm2_over_N",
            norm2(h) / big_n as f64,
            tau2,
            big_n,
            tol.norm,
        ),
        ConcentrationReport::new(
            "h_dot_beta0_over_n",
            dot(h, beta0) / measurements as f64,
            0.0,
            big_n,
            tol.correlation,
        ),
    ];
    if let Some(tail) = tol.tail {
        let cut = Z_975 * tau2.sqrt();
        let frac = h.iter().filter(|x| x.abs() > cut).count() as f64 / big_n as f64;
        reports.push(ConcentrationReport::new(
            "h_tail_fraction_1.96",
            frac,
            0.05,
            big_n,
            tail,
        ));
    }
    Ok(reports)
}

/// `‖q⁰‖²/n = ‖β₀‖²/n` against `σ₀² = σ_β²/δ`.
pub fn q0_norm_check(
    instance: &ProblemInstance,
    signal_second_moment: f64,
    tol: Tolerance,
) -> ConcentrationReport {
    let n = instance.measurements();
    ConcentrationReport::new(
        "q0_norm2_over_n",
        norm2(&instance.beta0) / n as f64,
        signal_second_moment / instance.delta(),
        n,
        tol,
    )
}

/// Test functions on windows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WindowFn {
    /// `Σ_j x_j²`.
    SumSquares,
    /// `x_1 · x_d`.
    ProductFirstLast,
    /// `max_j x_j`.
    Max,
    /// `1`.
    One,
}

impl WindowFn {
    pub fn eval(self, x: &[f64]) -> f64 {
        match self {
            WindowFn::SumSquares => x.iter().map(|a| a * a).sum(),
            WindowFn::ProductFirstLast => x[0] * x[x.len() - 1],
            WindowFn::Max => x.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            WindowFn::One => 1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            WindowFn::SumSquares => "sum-squares",
            WindowFn::ProductFirstLast => "product-first-last",
            WindowFn::Max => "max",
            WindowFn::One => "one",
        }
    }
}

fn overlapping_mean(values: &[f64], width: usize, f: WindowFn) -> f64 {
    let windows = values.windows(width);
    let count = windows.len() as f64;
    windows.map(|w| f.eval(w)).sum::<f64>() / count
}

/// Average of `f` over the overlapping length-`2k+1` windows of a sampled
/// stationary path, against the exact window-marginal expectation.
pub fn mc_window_average(
    chain: &FiniteMarkovChain,
    f: WindowFn,
    k: usize,
    len: usize,
    seed: u64,
    tol: Tolerance,
) -> Result<ConcentrationReport> {
    let prior = chain.window_marginal(k)?;
    mc_window_average_with(chain, &prior, f, len, seed, tol)
}

/// As [`mc_window_average`] with a precomputed window prior.
pub fn mc_window_average_with(
    chain: &FiniteMarkovChain,
    prior: &WindowPrior,
    f: WindowFn,
    len: usize,
    seed: u64,
    tol: Tolerance,
) -> Result<ConcentrationReport> {
    let width = prior.width();
    if len < width {
        return Err(Error::InvalidParameter(format!(
            "path length {len} shorter than window {width}"
        )));
    }
    let path = chain.sample_path(len, seed);
    Ok(ConcentrationReport::new(
        format!("markov_window_{}_k{}", f.name(), prior.k()),
        overlapping_mean(&path, width, f),
        // normalized so that f ≡ 1 is exact despite rounding in the probabilities
        prior.expectation(|x| f.eval(x)) / prior.probs().iter().sum::<f64>(),
        len,
        tol,
    ))
}

/// Average of `f` over overlapping length-`dim` windows of an i.i.d.
/// standard Gaussian sequence, against `E f(Z̲)` estimated from an
/// independent stream of `oracle_samples` draws.
pub fn gaussian_window_average(
    f: WindowFn,
    dim: usize,
    len: usize,
    seed: u64,
    oracle_samples: usize,
    tol: Tolerance,
) -> Result<ConcentrationReport> {
    if dim == 0 || len < dim {
        return Err(Error::InvalidParameter(format!(
            "need 1 ≤ d ≤ N, got d = {dim}, N = {len}"
        )));
    }
    if oracle_samples == 0 {
        return Err(Error::Engine("oracle sample count is 0".into()));
    }
    let mut rng = stream_rng(seed, Stream::Diagnostics);
    let seq: Vec<f64> = (0..len).map(|_| StandardNormal.sample(&mut rng)).collect();
    let empirical = overlapping_mean(&seq, dim, f);

    let mut rng = stream_rng(seed, Stream::Oracle);
    let mut z = vec![0.0; dim];
    let mut acc = 0.0;
    for _ in 0..oracle_samples {
        for zi in z.iter_mut() {
            *zi = StandardNormal.sample(&mut rng);
        }
        acc += f.eval(&z);
    }
    Ok(ConcentrationReport::new(
        format!("gaussian_window_{}_d{dim}", f.name()),
        empirical,
        acc / oracle_samples as f64,
        len,
        tol,
    ))
}

/// Both sides of Stein's identity for the Bayes denoiser:
/// `E[Z_c η(β̲ + τZ̲)]` and `τ E[η'(β̲ + τZ̲)]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SteinCheck {
    pub lhs: f64,
    pub rhs: f64,
}

pub fn stein_identity(
    prior: &WindowPrior,
    tau: f64,
    engine: &ExpectationEngine,
) -> Result<SteinCheck> {
    let denoiser = BayesSwDenoiser::new(prior);
    denoiser.at(tau)?;
    let width = prior.width();
    let c = prior.center_index();
    let inv_tau2 = 1.0 / (tau * tau);
    let support: Vec<(&[f64], f64)> = prior.sequences().filter(|(_, p)| *p > 0.0).collect();
    // both sides see the same samples: the engine is seeded
    let side = |want_lhs: bool| {
        engine.gaussian_expectation(width, |z| {
            let mut v = vec![0.0; width];
            let mut acc = 0.0;
            for (x, p) in &support {
                for ((vi, xi), zi) in v.iter_mut().zip(*x).zip(z) {
                    *vi = xi + tau * zi;
                }
                let post = denoiser.posterior_unchecked(inv_tau2, &v);
                acc += p * if want_lhs {
                    z[c] * post.mean
                } else {
                    tau * post.variance * inv_tau2
                };
            }
            acc
        })
    };
    Ok(SteinCheck {
        lhs: side(true)?,
        rhs: side(false)?,
    })
}

/// Per-seed reports of one check, passing when at least `min_pass_fraction`
/// of them pass.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeedSuite {
    pub name: String,
    pub reports: Vec<ConcentrationReport>,
    pub passed: usize,
    pub min_pass_fraction: f64,
    pub pass: bool,
}

impl SeedSuite {
    pub fn new(
        name: impl Into<String>,
        reports: Vec<ConcentrationReport>,
        min_pass_fraction: f64,
    ) -> Self {
        let passed = reports.iter().filter(|r| r.pass()).count();
        let pass = !reports.is_empty() && passed as f64 >= min_pass_fraction * reports.len() as f64;
        SeedSuite {
            name: name.into(),
            reports,
            passed,
            min_pass_fraction,
            pass,
        }
    }
}
