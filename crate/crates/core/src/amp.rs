//! Problem instances and the sliding-window AMP recursion.
//!
//! Starting from `β⁰ = 0` and `z⁰ = y`, each step computes
//!
//! ```text
//! s       = Aᵀ z^t + β^t
//! β^{t+1} = η_t(s)            (window-wise, edges by boundary policy)
//! z^{t+1} = y − A β^{t+1} + (z^t / n) Σ_{middle} η_t'(s windows)
//! ```

use std::io::{Read, Write};

use rand_distr::{Distribution, StandardNormal, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::denoiser::{denoise_signal, BayesSwDenoiser, Boundary};
use crate::error::{Error, Result};
use crate::markov::FiniteMarkovChain;
use crate::rng::{chunk_rng, stream_rng, Stream};
use crate::state_evolution::SeTrace;

/// Rows per work item in matrix generation and `A x`.
const ROW_CHUNK: usize = 64;
/// Columns per work item in `Aᵀ z`.
const COL_CHUNK: usize = 512;

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn from_row_major(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                expected: rows * cols,
                got: data.len(),
            });
        }
        Ok(DenseMatrix { rows, cols, data })
    }

    /// i.i.d. `N(0, 1/rows)` entries. Row blocks draw from separate chunk
    /// streams so generation parallelizes without changing the result.
    pub fn gaussian(rows: usize, cols: usize, seed: u64) -> Self {
        let scale = 1.0 / (rows as f64).sqrt();
        let mut data = vec![0.0; rows * cols];
        data.par_chunks_mut(ROW_CHUNK * cols)
            .enumerate()
            .for_each(|(c, block)| {
                let mut rng = chunk_rng(seed, Stream::Matrix, c as u32);
                for x in block.iter_mut() {
                    let g: f64 = StandardNormal.sample(&mut rng);
                    *x = g * scale;
                }
            });
        DenseMatrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    /// `A x`.
    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.cols, x.len())?;
        let mut out = vec![0.0; self.rows];
        out.par_chunks_mut(ROW_CHUNK)
            .enumerate()
            .for_each(|(c, block)| {
                for (r, o) in block.iter_mut().enumerate() {
                    *o = dot(self.row(c * ROW_CHUNK + r), x);
                }
            });
        Ok(out)
    }

    /// `Aᵀ z`. Each output entry is accumulated over rows in index order.
    pub fn matvec_t(&self, z: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.rows, z.len())?;
        let mut out = vec![0.0; self.cols];
        out.par_chunks_mut(COL_CHUNK)
            .enumerate()
            .for_each(|(c, block)| {
                let start = c * COL_CHUNK;
                for (i, &zi) in z.iter().enumerate() {
                    let row = &self.row(i)[start..start + block.len()];
                    for (o, a) in block.iter_mut().zip(row) {
                        *o += zi * a;
                    }
                }
            });
        Ok(out)
    }

    /// Mean squared column norm.
    pub fn mean_column_norm2(&self) -> f64 {
        self.data.iter().map(|a| a * a).sum::<f64>() / self.cols as f64
    }

    /// Binary dump: `rows` and `cols` as little-endian u64, then the entries
    /// row-major as little-endian f64.
    pub fn write_binary<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(&(self.rows as u64).to_le_bytes())?;
        out.write_all(&(self.cols as u64).to_le_bytes())?;
        for x in &self.data {
            out.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut input: R) -> Result<Self> {
        let mut word = [0u8; 8];
        input.read_exact(&mut word)?;
        let rows = u64::from_le_bytes(word) as usize;
        input.read_exact(&mut word)?;
        let cols = u64::from_le_bytes(word) as usize;
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            input.read_exact(&mut word)?;
            data.push(f64::from_le_bytes(word));
        }
        Self::from_row_major(rows, cols, data)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm2(a: &[f64]) -> f64 {
    dot(a, a)
}

fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::DimensionMismatch { expected, got });
    }
    Ok(())
}

/// Measurement noise distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    /// `N(0, σ²)`.
    #[default]
    Gaussian,
    /// Uniform on `[−√(3σ²), √(3σ²)]`, variance `σ²`.
    Uniform,
}

impl std::str::FromStr for NoiseKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(NoiseKind::Gaussian),
            "uniform" => Ok(NoiseKind::Uniform),
            other => Err(Error::InvalidParameter(format!(
                "unknown noise kind {other:?}"
            ))),
        }
    }
}

/// `y = A β₀ + w`.
#[derive(Debug, Clone)]
pub struct ProblemInstance {
    pub a: DenseMatrix,
    pub y: Vec<f64>,
    pub beta0: Vec<f64>,
    pub w: Vec<f64>,
    pub noise_var: f64,
    pub seed: u64,
}

impl ProblemInstance {
    pub fn from_parts(
        a: DenseMatrix,
        beta0: Vec<f64>,
        w: Vec<f64>,
        noise_var: f64,
    ) -> Result<Self> {
        check_dim(a.rows(), w.len())?;
        let ax = a.matvec(&beta0)?;
        let y = ax.iter().zip(&w).map(|(p, q)| p + q).collect();
        Ok(ProblemInstance {
            a,
            y,
            beta0,
            w,
            noise_var,
            seed: 0,
        })
    }

    /// Measurements `n`.
    pub fn measurements(&self) -> usize {
        self.a.rows()
    }

    /// Signal length `N`.
    pub fn signal_len(&self) -> usize {
        self.a.cols()
    }

    /// `δ = n / N` as realized.
    pub fn delta(&self) -> f64 {
        self.measurements() as f64 / self.signal_len() as f64
    }

    /// `|‖w‖²/n − σ²| ≤ 5σ²/√n`.
    pub fn noise_is_plausible(&self) -> bool {
        let n = self.measurements() as f64;
        (norm2(&self.w) / n - self.noise_var).abs() <= 5.0 * self.noise_var / n.sqrt()
    }

    /// CSV with header `i,beta0`.
    pub fn write_signal_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["i", "beta0"])?;
        for (i, b) in self.beta0.iter().enumerate() {
            w.write_record([i.to_string(), b.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    /// CSV with header `j,y,w`.
    pub fn write_measurements_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["j", "y", "w"])?;
        for (j, (y, e)) in self.y.iter().zip(&self.w).enumerate() {
            w.write_record([j.to_string(), y.to_string(), e.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// `n = round(δ N)`.
pub fn measurement_count(signal_len: usize, delta: f64) -> Result<usize> {
    if !(delta.is_finite() && delta > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "δ must be positive, got {delta}"
        )));
    }
    let n = (delta * signal_len as f64).round();
    if n < 1.0 {
        return Err(Error::InvalidParameter(format!(
            "δ·N = {} gives no measurements",
            delta * signal_len as f64
        )));
    }
    Ok(n as usize)
}

/// Draws `A`, `β₀` and `w` from the `Matrix`, `Signal` and `Noise` streams
/// of `seed`.
pub fn generate_instance(
    chain: &FiniteMarkovChain,
    signal_len: usize,
    delta: f64,
    noise_var: f64,
    noise: NoiseKind,
    seed: u64,
) -> Result<ProblemInstance> {
    if signal_len == 0 {
        return Err(Error::InvalidParameter("N must be positive".into()));
    }
    if !(noise_var.is_finite() && noise_var >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "noise variance {noise_var}"
        )));
    }
    let n = measurement_count(signal_len, delta)?;
    let a = DenseMatrix::gaussian(n, signal_len, seed);
    let beta0 = chain.sample_path(signal_len, seed);
    let mut rng = stream_rng(seed, Stream::Noise);
    let w: Vec<f64> = match noise {
        NoiseKind::Gaussian => {
            let sd = noise_var.sqrt();
            (0..n)
                .map(|_| {
                    sd * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
                })
                .collect()
        }
        NoiseKind::Uniform => {
            let half = (3.0 * noise_var).sqrt();
            if half == 0.0 {
                vec![0.0; n]
            } else {
                let u = Uniform::new_inclusive(-half, half)
                    .map_err(|e| Error::InvalidParameter(e.to_string()))?;
                (0..n).map(|_| u.sample(&mut rng)).collect()
            }
        }
    };
    let mut inst = ProblemInstance::from_parts(a, beta0, w, noise_var)?;
    inst.seed = seed;
    Ok(inst)
}

/// AMP iterate `t`: `beta = β^t`, `z = z^t`, and the derivative sum that
/// produced `β^t` (zero at `t = 0`).
#[derive(Debug, Clone, PartialEq)]
pub struct AmpState {
    pub t: usize,
    pub beta: Vec<f64>,
    pub z: Vec<f64>,
    pub onsager_prev: f64,
    /// `τ_{t−1}²` used by the denoiser that produced `β^t`.
    pub tau2_used: Option<f64>,
}

impl AmpState {
    /// `β⁰ = 0`, `z⁰ = y`.
    pub fn initial(instance: &ProblemInstance) -> Self {
        AmpState {
            t: 0,
            beta: vec![0.0; instance.signal_len()],
            z: instance.y.clone(),
            onsager_prev: 0.0,
            tau2_used: None,
        }
    }

    /// `Aᵀ z^t + β^t`, the input to the next denoising step.
    pub fn effective_observation(&self, instance: &ProblemInstance) -> Result<Vec<f64>> {
        let mut s = instance.a.matvec_t(&self.z)?;
        check_dim(s.len(), self.beta.len())?;
        for (si, b) in s.iter_mut().zip(&self.beta) {
            *si += b;
        }
        Ok(s)
    }

    /// `‖z^t‖² / n`.
    pub fn residual_power(&self) -> f64 {
        norm2(&self.z) / self.z.len() as f64
    }
}

/// Per-step switches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepOptions {
    pub boundary: Boundary,
    /// Turning this off drops the Onsager term; only useful for experiments
    /// that demonstrate why it is there.
    pub onsager_correction: bool,
}

impl Default for StepOptions {
    fn default() -> Self {
        StepOptions {
            boundary: Boundary::Zero,
            onsager_correction: true,
        }
    }
}

/// One AMP iteration at noise level `tau2 = τ_t²`.
pub fn amp_step(
    state: &AmpState,
    instance: &ProblemInstance,
    denoiser: &BayesSwDenoiser,
    tau2: f64,
    options: StepOptions,
) -> Result<AmpState> {
    if !(tau2.is_finite() && tau2 > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "τ² must be positive, got {tau2}"
        )));
    }
    check_dim(instance.measurements(), state.z.len())?;
    let s = state.effective_observation(instance)?;
    let den = denoise_signal(&denoiser.at(tau2.sqrt())?, &s, options.boundary)?;

    let mut z = instance.a.matvec(&den.estimate)?;
    let coef = if options.onsager_correction {
        den.onsager_sum / instance.measurements() as f64
    } else {
        0.0
    };
    for ((zi, yi), zp) in z.iter_mut().zip(&instance.y).zip(&state.z) {
        *zi = yi - *zi + coef * zp;
    }
    Ok(AmpState {
        t: state.t + 1,
        beta: den.estimate,
        z,
        onsager_prev: den.onsager_sum,
        tau2_used: Some(tau2),
    })
}

/// Where the denoiser's noise level comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TauSource {
    /// `τ_t²` from a state-evolution trace.
    #[default]
    SeTrace,
    /// `τ_t² = ‖z^t‖² / n` (extension; not covered by the theory).
    Empirical,
}

impl std::str::FromStr for TauSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "se-trace" => Ok(TauSource::SeTrace),
            "empirical" => Ok(TauSource::Empirical),
            other => Err(Error::InvalidParameter(format!(
                "unknown tau source {other:?}"
            ))),
        }
    }
}

/// One row of an AMP run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AmpIteration {
    pub t: usize,
    /// Middle-coordinate MSE of `β^t`.
    pub middle_mse: f64,
    /// `τ_{t−1}²` that produced `β^t`; `None` at `t = 0`.
    pub tau2_used: Option<f64>,
    /// `‖z^t‖² / n`.
    pub residual_power: f64,
}

#[derive(Debug, Clone)]
pub struct AmpRun {
    pub k: usize,
    pub states: Vec<AmpState>,
    pub iterations: Vec<AmpIteration>,
}

impl AmpRun {
    pub fn final_mse(&self) -> f64 {
        self.iterations
            .last()
            .expect("run has an initial row")
            .middle_mse
    }

    /// CSV with header `t,middle_mse,tau2,residual_power`; `tau2` is empty
    /// at `t = 0`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["t", "middle_mse", "tau2", "residual_power"])?;
        for it in &self.iterations {
            w.write_record([
                it.t.to_string(),
                it.middle_mse.to_string(),
                it.tau2_used.map(|v| v.to_string()).unwrap_or_default(),
                it.residual_power.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Runs `iterations` AMP steps, recording every state.
pub fn run_amp(
    instance: &ProblemInstance,
    denoiser: &BayesSwDenoiser,
    iterations: usize,
    tau_source: TauSource,
    trace: Option<&SeTrace>,
    options: StepOptions,
) -> Result<AmpRun> {
    let k = denoiser.half_window();
    if tau_source == TauSource::SeTrace {
        let trace = trace.ok_or_else(|| {
            Error::MissingTrace("tau source is se-trace but no trace was supplied".into())
        })?;
        if trace.params.k != k {
            return Err(Error::InvalidParameter(format!(
                "trace is for k = {}, denoiser has k = {k}",
                trace.params.k
            )));
        }
        if iterations > 0 {
            trace.tau2_at(iterations - 1)?;
        }
    }
    let record = |s: &AmpState| -> Result<AmpIteration> {
        Ok(AmpIteration {
            t: s.t,
            middle_mse: middle_mse(&s.beta, &instance.beta0, k)?,
            tau2_used: s.tau2_used,
            residual_power: s.residual_power(),
        })
    };

    let mut state = AmpState::initial(instance);
    let mut rows = vec![record(&state)?];
    let mut states = Vec::with_capacity(iterations + 1);
    for t in 0..iterations {
        let tau2 = match tau_source {
            TauSource::SeTrace => trace.expect("checked above").tau2_at(t)?,
            TauSource::Empirical => state.residual_power(),
        };
        let next = amp_step(&state, instance, denoiser, tau2, options)?;
        states.push(std::mem::replace(&mut state, next));
        rows.push(record(&state)?);
    }
    states.push(state);
    Ok(AmpRun {
        k,
        states,
        iterations: rows,
    })
}

fn middle_range(len: usize, other: usize, k: usize) -> Result<std::ops::Range<usize>> {
    check_dim(len, other)?;
    if len <= 2 * k {
        return Err(Error::InvalidParameter(format!(
            "signal length {len} leaves no middle coordinates for k = {k}"
        )));
    }
    Ok(k..len - k)
}

/// `Σ_{i=k+1}^{N−k} (β_i − β₀ᵢ)² / (N − 2k)` (1-based).
pub fn middle_mse(beta: &[f64], beta0: &[f64], k: usize) -> Result<f64> {
    pl_loss(beta, beta0, k, PlLoss::Squared)
}

/// Order-2 pseudo-Lipschitz losses `φ(estimate, truth)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlLoss {
    Squared,
    Absolute,
    Product,
}

impl PlLoss {
    pub fn eval(self, a: f64, b: f64) -> f64 {
        match self {
            PlLoss::Squared => (a - b) * (a - b),
            PlLoss::Absolute => (a - b).abs(),
            PlLoss::Product => a * b,
        }
    }
}

impl std::str::FromStr for PlLoss {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "squared" => Ok(PlLoss::Squared),
            "absolute" => Ok(PlLoss::Absolute),
            "product" => Ok(PlLoss::Product),
            other => Err(Error::InvalidParameter(format!(
                "unknown loss id {other:?}"
            ))),
        }
    }
}

/// Mean of `φ(β_i, β₀ᵢ)` over the middle coordinates.
pub fn pl_loss(beta: &[f64], beta0: &[f64], k: usize, loss: PlLoss) -> Result<f64> {
    let range = middle_range(beta.len(), beta0.len(), k)?;
    let count = range.len() as f64;
    Ok(range.map(|i| loss.eval(beta[i], beta0[i])).sum::<f64>() / count)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matvec_small() {
        let a = DenseMatrix::from_row_major(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(a.matvec(&[1.0, 0.0, -1.0]).unwrap(), vec![-2.0, -2.0]);
        assert_eq!(a.matvec_t(&[1.0, -1.0]).unwrap(), vec![-3.0, -3.0, -3.0]);
        assert!(a.matvec(&[1.0]).is_err());
        assert!(a.matvec_t(&[1.0]).is_err());
    }

    #[test]
    fn matvec_t_matches_naive_across_chunks() {
        let a = DenseMatrix::gaussian(7, 1300, 3);
        let z: Vec<f64> = (0..7).map(|i| i as f64 - 3.0).collect();
        let got = a.matvec_t(&z).unwrap();
        for (j, g) in got.iter().enumerate() {
            let expected: f64 = (0..7).map(|i| a.get(i, j) * z[i]).sum();
            assert!((g - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn binary_dump_round_trip() {
        let a = DenseMatrix::gaussian(3, 5, 9);
        let mut buf = Vec::new();
        a.write_binary(&mut buf).unwrap();
        assert_eq!(buf.len(), 16 + 15 * 8);
        assert_eq!(DenseMatrix::read_binary(&buf[..]).unwrap(), a);
    }

    #[test]
    fn measurement_counts() {
        assert_eq!(measurement_count(10_000, 0.3).unwrap(), 3000);
        assert_eq!(measurement_count(8, 0.5).unwrap(), 4);
        assert!(measurement_count(10, 0.01).is_err());
        assert!(measurement_count(10, 0.0).is_err());
    }

    #[test]
    fn losses() {
        let b = [1.0, 0.0, 1.0, 1.0];
        let e = [0.5, 0.0, 0.0, 1.0];
        assert_eq!(middle_mse(&b, &b, 1).unwrap(), 0.0);
        assert!((middle_mse(&e, &b, 0).unwrap() - (0.25 + 1.0) / 4.0).abs() < 1e-15);
        assert!((middle_mse(&e, &b, 1).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(pl_loss(&b, &b, 0, PlLoss::Absolute).unwrap(), 0.0);
        assert_eq!(pl_loss(&b, &b, 0, PlLoss::Product).unwrap(), 0.75);
        assert!(middle_mse(&b, &b, 2).is_err());
        assert!(middle_mse(&b, &b[..3], 0).is_err());
        assert!("huber".parse::<PlLoss>().is_err());
        assert_eq!("product".parse::<PlLoss>().unwrap(), PlLoss::Product);
    }

    #[test]
    fn tau_source_parsing() {
        assert_eq!("se-trace".parse::<TauSource>().unwrap(), TauSource::SeTrace);
        assert_eq!(
            "empirical".parse::<TauSource>().unwrap(),
            TauSource::Empirical
        );
        assert!("oracle".parse::<TauSource>().is_err());
    }
}
