//! Finite-state Markov chain signals.
//!
//! A [`FiniteMarkovChain`] is the prior on the unknown signal: a bounded,
//! finite set of real state values with a row-stochastic transition matrix
//! and its (unique) stationary distribution. [`WindowPrior`] enumerates the
//! joint law of `2k + 1` consecutive entries of the stationary chain, which is
//! what the sliding-window denoiser and the state evolution integrate against.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};

/// Row sums must equal one within this tolerance.
pub const ROW_SUM_TOL: f64 = 1e-12;
/// `γP = γ` must hold within this tolerance.
pub const STATIONARY_TOL: f64 = 1e-10;
/// Detailed balance tolerance used by [`FiniteMarkovChain::check_reversibility`].
pub const REVERSIBILITY_TOL: f64 = 1e-10;
/// Default cap on the number of enumerated window sequences.
pub const DEFAULT_ENUMERATION_CAP: usize = 1 << 20;

/// Parses a probability written either as a decimal (`"0.25"`) or as an
/// exact rational (`"3/70"`).
pub fn parse_probability(text: &str) -> Result<f64> {
    let err = || Error::ParseProbability(text.to_string());
    let t = text.trim();
    let value = match t.split_once('/') {
        Some((num, den)) => {
            let num: f64 = num.trim().parse().map_err(|_| err())?;
            let den: f64 = den.trim().parse().map_err(|_| err())?;
            if den == 0.0 {
                return Err(err());
            }
            num / den
        }
        None => t.parse().map_err(|_| err())?,
    };
    if value.is_finite() {
        Ok(value)
    } else {
        Err(err())
    }
}

/// A transition-matrix entry as written in a config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ProbEntry {
    Number(f64),
    Text(String),
}

impl ProbEntry {
    pub fn value(&self) -> Result<f64> {
        match self {
            ProbEntry::Number(x) => Ok(*x),
            ProbEntry::Text(s) => parse_probability(s),
        }
    }
}

/// Serializable chain definition: `states = [..]`, `transition = [[..], ..]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainSpec {
    pub states: Vec<f64>,
    pub transition: Vec<Vec<ProbEntry>>,
}

impl ChainSpec {
    pub fn build(&self) -> Result<FiniteMarkovChain> {
        let transition = self
            .transition
            .iter()
            .map(|row| row.iter().map(ProbEntry::value).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()?;
        FiniteMarkovChain::new(self.states.clone(), transition)
    }

    /// The two-state `{0, 1}` chain with `r(0,1) = 3/70`, `r(1,0) = 1/10`.
    pub fn binary_example() -> Self {
        let t = |s: &str| ProbEntry::Text(s.to_string());
        ChainSpec {
            states: vec![0.0, 1.0],
            transition: vec![vec![t("67/70"), t("3/70")], vec![t("1/10"), t("9/10")]],
        }
    }
}

/// Outcome of a detailed-balance check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Reversibility {
    pub reversible: bool,
    pub max_violation: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FiniteMarkovChain {
    states: Vec<f64>,
    transition: Vec<Vec<f64>>,
    stationary: Vec<f64>,
}

impl FiniteMarkovChain {
    /// Validates the transition matrix and computes the stationary
    /// distribution. Fails unless the chain is irreducible.
    pub fn new(states: Vec<f64>, transition: Vec<Vec<f64>>) -> Result<Self> {
        validate_states(&states)?;
        validate_transition(&transition, states.len())?;
        if !is_irreducible(&transition) {
            return Err(Error::NoUniqueStationary(
                "transition graph is not strongly connected".into(),
            ));
        }
        let stationary = stationary_distribution(&transition)?;
        Ok(FiniteMarkovChain {
            states,
            transition,
            stationary,
        })
    }

    /// The binary example chain used throughout the experiments.
    pub fn binary_example() -> Self {
        ChainSpec::binary_example()
            .build()
            .expect("example chain is valid")
    }

    pub fn states(&self) -> &[f64] {
        &self.states
    }

    pub fn transition(&self) -> &[Vec<f64>] {
        &self.transition
    }

    pub fn stationary(&self) -> &[f64] {
        &self.stationary
    }

    pub fn num_states(&self) -> usize {
        self.states.len()
    }

    pub fn min_state(&self) -> f64 {
        self.states.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_state(&self) -> f64 {
        self.states
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// `E[β²]` under the stationary distribution.
    pub fn second_moment(&self) -> f64 {
        self.states
            .iter()
            .zip(&self.stationary)
            .map(|(s, g)| g * s * s)
            .sum()
    }

    pub fn mean(&self) -> f64 {
        self.states
            .iter()
            .zip(&self.stationary)
            .map(|(s, g)| g * s)
            .sum()
    }

    pub fn check_reversibility(&self) -> Reversibility {
        detailed_balance(&self.transition, &self.stationary)
    }

    /// `1 - λ₂`, with `λ₂` the second largest eigenvalue of the transition
    /// matrix. Errors for non-reversible chains.
    pub fn spectral_gap(&self) -> Result<f64> {
        spectral_gap_of(&self.transition, &self.stationary)
    }

    /// Samples a stationary path of length `len`; deterministic in `seed`.
    pub fn sample_path(&self, len: usize, seed: u64) -> Vec<f64> {
        self.sample_path_indices(len, seed)
            .into_iter()
            .map(|i| self.states[i])
            .collect()
    }

    /// Same path as [`sample_path`](Self::sample_path), as state indices.
    pub fn sample_path_indices(&self, len: usize, seed: u64) -> Vec<usize> {
        let mut rng = stream_rng(seed, Stream::Signal);
        let mut path = Vec::with_capacity(len);
        if len == 0 {
            return path;
        }
        let mut current = draw_index(&self.stationary, rng.random::<f64>());
        path.push(current);
        for _ in 1..len {
            current = draw_index(&self.transition[current], rng.random::<f64>());
            path.push(current);
        }
        path
    }

    pub fn window_marginal(&self, k: usize) -> Result<WindowPrior> {
        self.window_marginal_with_cap(k, DEFAULT_ENUMERATION_CAP)
    }

    /// Enumerates every length-`2k+1` state sequence with probability
    /// `γ(x₁) ∏ P(x_{i-1}, x_i)`. Sequences are in lexicographic order of
    /// state indices, first coordinate most significant.
    pub fn window_marginal_with_cap(&self, k: usize, cap: usize) -> Result<WindowPrior> {
        let width = 2 * k + 1;
        let s = self.states.len();
        let count = (s as u128).checked_pow(width as u32).unwrap_or(u128::MAX);
        if count > cap as u128 {
            return Err(Error::EnumerationCap { count, cap });
        }
        let count = count as usize;

        // Extend one coordinate at a time; `paths` holds state indices.
        let mut paths: Vec<Vec<usize>> = (0..s).map(|i| vec![i]).collect();
        let mut probs: Vec<f64> = self.stationary.clone();
        for _ in 1..width {
            let mut next_paths = Vec::with_capacity(paths.len() * s);
            let mut next_probs = Vec::with_capacity(paths.len() * s);
            for (path, p) in paths.iter().zip(&probs) {
                let last = *path.last().unwrap();
                for j in 0..s {
                    let mut np = path.clone();
                    np.push(j);
                    next_paths.push(np);
                    next_probs.push(p * self.transition[last][j]);
                }
            }
            paths = next_paths;
            probs = next_probs;
        }
        debug_assert_eq!(paths.len(), count);

        let sequences = paths
            .iter()
            .flat_map(|p| p.iter().map(|&i| self.states[i]))
            .collect();
        WindowPrior::from_parts(k, sequences, probs)
    }
}

/// Joint law of a length-`2k+1` window.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowPrior {
    k: usize,
    /// Row-major, `len() × width()`.
    sequences: Vec<f64>,
    probs: Vec<f64>,
}

impl WindowPrior {
    /// Builds a prior from flattened sequences (row-major) and their
    /// probabilities.
    pub fn from_parts(k: usize, sequences: Vec<f64>, probs: Vec<f64>) -> Result<Self> {
        let width = 2 * k + 1;
        if probs.is_empty() || sequences.len() != probs.len() * width {
            return Err(Error::DimensionMismatch {
                expected: probs.len() * width,
                got: sequences.len(),
            });
        }
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::InvalidParameter(
                "window probabilities must lie in [0, 1]".into(),
            ));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > STATIONARY_TOL {
            return Err(Error::InvalidParameter(format!(
                "window probabilities sum to {total}"
            )));
        }
        if sequences.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidParameter("non-finite state value".into()));
        }
        Ok(WindowPrior {
            k,
            sequences,
            probs,
        })
    }

    /// Single-atom prior on `sequence`.
    pub fn degenerate(k: usize, sequence: &[f64]) -> Result<Self> {
        Self::from_parts(k, sequence.to_vec(), vec![1.0])
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn width(&self) -> usize {
        2 * self.k + 1
    }

    pub fn center_index(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn sequence(&self, i: usize) -> &[f64] {
        let w = self.width();
        &self.sequences[i * w..(i + 1) * w]
    }

    pub fn sequences(&self) -> impl Iterator<Item = (&[f64], f64)> {
        self.sequences
            .chunks_exact(self.width())
            .zip(self.probs.iter().copied())
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn center(&self, i: usize) -> f64 {
        self.sequences[i * self.width() + self.k]
    }

    /// `E_π[f(β̲)]` by enumeration.
    pub fn expectation(&self, f: impl Fn(&[f64]) -> f64) -> f64 {
        self.sequences().map(|(x, p)| p * f(x)).sum()
    }

    /// Second moment of the center coordinate.
    pub fn second_moment(&self) -> f64 {
        let c = self.k;
        self.expectation(|x| x[c] * x[c])
    }

    pub fn center_mean(&self) -> f64 {
        let c = self.k;
        self.expectation(|x| x[c])
    }

    pub fn min_center(&self) -> f64 {
        (0..self.len())
            .filter(|&i| self.probs[i] > 0.0)
            .map(|i| self.center(i))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn max_center(&self) -> f64 {
        (0..self.len())
            .filter(|&i| self.probs[i] > 0.0)
            .map(|i| self.center(i))
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

fn validate_states(states: &[f64]) -> Result<()> {
    if states.is_empty() {
        return Err(Error::InvalidChain("empty state space".into()));
    }
    if states.iter().any(|s| !s.is_finite()) {
        return Err(Error::InvalidChain("state values must be finite".into()));
    }
    for (i, a) in states.iter().enumerate() {
        if states[..i].contains(a) {
            return Err(Error::InvalidChain(format!("duplicate state value {a}")));
        }
    }
    Ok(())
}

fn validate_transition(transition: &[Vec<f64>], n: usize) -> Result<()> {
    if transition.len() != n {
        return Err(Error::InvalidChain(format!(
            "transition has {} rows for {n} states",
            transition.len()
        )));
    }
    for (i, row) in transition.iter().enumerate() {
        if row.len() != n {
            return Err(Error::InvalidChain(format!(
                "row {i} has {} entries, expected {n}",
                row.len()
            )));
        }
        if row.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::InvalidChain(format!(
                "row {i} has entries outside [0, 1]"
            )));
        }
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > ROW_SUM_TOL {
            return Err(Error::InvalidChain(format!("row {i} sums to {sum}")));
        }
    }
    Ok(())
}

fn reachable(transition: &[Vec<f64>], forward: bool) -> Vec<bool> {
    let n = transition.len();
    let mut seen = vec![false; n];
    let mut stack = vec![0];
    seen[0] = true;
    while let Some(i) = stack.pop() {
        for j in 0..n {
            let p = if forward {
                transition[i][j]
            } else {
                transition[j][i]
            };
            if p > 0.0 && !seen[j] {
                seen[j] = true;
                stack.push(j);
            }
        }
    }
    seen
}

fn is_irreducible(transition: &[Vec<f64>]) -> bool {
    reachable(transition, true).iter().all(|&b| b)
        && reachable(transition, false).iter().all(|&b| b)
}

fn draw_index(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // u landed in the rounding slack above the last cumulative sum
    probs
        .iter()
        .rposition(|&p| p > 0.0)
        .unwrap_or(probs.len() - 1)
}

/// Solves `γ(P − I) = 0, Σγ = 1` directly, with lazy power iteration as a
/// fallback when the linear system is numerically singular.
pub fn stationary_distribution(transition: &[Vec<f64>]) -> Result<Vec<f64>> {
    let n = transition.len();
    if n == 0 {
        return Err(Error::InvalidChain("empty transition matrix".into()));
    }
    let mut system = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            system[(i, j)] = transition[j][i] - if i == j { 1.0 } else { 0.0 };
        }
    }
    for j in 0..n {
        system[(n - 1, j)] = 1.0;
    }
    let mut rhs = DVector::<f64>::zeros(n);
    rhs[n - 1] = 1.0;

    let gamma = match system.lu().solve(&rhs) {
        Some(sol) if sol.iter().all(|x| x.is_finite()) => sol.iter().copied().collect(),
        _ => power_iteration(transition)?,
    };
    let gamma = normalize(gamma)?;
    if gamma.iter().any(|&g| g <= 0.0) {
        return Err(Error::NoUniqueStationary(
            "stationary vector has non-positive entries".into(),
        ));
    }
    let residual = stationary_residual(transition, &gamma);
    if residual > STATIONARY_TOL {
        return Err(Error::NoUniqueStationary(format!(
            "residual |γP − γ| = {residual:.3e}"
        )));
    }
    Ok(gamma)
}

fn normalize(v: Vec<f64>) -> Result<Vec<f64>> {
    let total: f64 = v.iter().sum();
    if !(total.is_finite() && total > 0.0) {
        return Err(Error::NoUniqueStationary("degenerate eigenvector".into()));
    }
    Ok(v.into_iter().map(|x| x / total).collect())
}

fn power_iteration(transition: &[Vec<f64>]) -> Result<Vec<f64>> {
    let n = transition.len();
    let mut v = vec![1.0 / n as f64; n];
    for _ in 0..1_000_000 {
        // (P + I)/2 has the same stationary law and no periodicity
        let mut next = vec![0.0; n];
        for i in 0..n {
            for j in 0..n {
                next[j] += 0.5 * v[i] * transition[i][j];
            }
            next[i] += 0.5 * v[i];
        }
        let diff: f64 = next.iter().zip(&v).map(|(a, b)| (a - b).abs()).sum();
        v = next;
        if diff < 1e-14 {
            return Ok(v);
        }
    }
    Err(Error::NoUniqueStationary(
        "power iteration did not converge".into(),
    ))
}

/// `max_j |(γP)_j − γ_j|`.
pub fn stationary_residual(transition: &[Vec<f64>], gamma: &[f64]) -> f64 {
    let n = gamma.len();
    (0..n)
        .map(|j| {
            let gp: f64 = (0..n).map(|i| gamma[i] * transition[i][j]).sum();
            (gp - gamma[j]).abs()
        })
        .fold(0.0, f64::max)
}

/// `max_{i,j} |γ_i P_ij − γ_j P_ji|`.
pub fn detailed_balance(transition: &[Vec<f64>], gamma: &[f64]) -> Reversibility {
    let n = gamma.len();
    let mut max_violation = 0.0f64;
    for i in 0..n {
        for j in (i + 1)..n {
            let v = (gamma[i] * transition[i][j] - gamma[j] * transition[j][i]).abs();
            max_violation = max_violation.max(v);
        }
    }
    Reversibility {
        reversible: max_violation <= REVERSIBILITY_TOL,
        max_violation,
    }
}

/// Spectral gap of a transition matrix that is reversible with respect to
/// `weights`. The similarity `D^{1/2} P D^{-1/2}` (`D = diag(weights)`) is
/// then symmetric, so its eigenvalues are real and equal those of `P`.
///
/// The result is `1 − λ₂`, which lies in `[0, 2]`; it exceeds one only when
/// `λ₂ < 0`. A single-state chain has gap 1.
pub fn spectral_gap_of(transition: &[Vec<f64>], weights: &[f64]) -> Result<f64> {
    let n = transition.len();
    let balance = detailed_balance(transition, weights);
    if !balance.reversible {
        return Err(Error::NotReversible(balance.max_violation));
    }
    if n == 1 {
        return Ok(1.0);
    }
    let sqrt_w: Vec<f64> = weights.iter().map(|w| w.sqrt()).collect();
    let sym = DMatrix::from_fn(n, n, |i, j| {
        let a = sqrt_w[i] * transition[i][j] / sqrt_w[j];
        let b = sqrt_w[j] * transition[j][i] / sqrt_w[i];
        0.5 * (a + b)
    });
    let mut eig: Vec<f64> = SymmetricEigen::new(sym)
        .eigenvalues
        .iter()
        .copied()
        .collect();
    eig.sort_by(|a, b| b.total_cmp(a));
    Ok((1.0 - eig[1]).max(0.0))
}
