//! Config-driven experiments: state evolution traces, AMP runs, the
//! empirical-vs-predicted MSE sweep, and the diagnostics bundle.
//!
//! Seeds: every trial seed `s` in `seeds` is turned into an instance key
//! `trial_seed(master_seed, s)`, from which the matrix, signal and noise are
//! drawn on separate streams. The state-evolution Monte Carlo uses
//! `master_seed` on its own stream and is shared by every trial; changing
//! `mc_samples` leaves the instances untouched.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::amp::{
    generate_instance, measurement_count, run_amp, AmpRun, NoiseKind, StepOptions, TauSource,
};
use crate::denoiser::{BayesSwDenoiser, Boundary};
use crate::diagnostics::{
    check_h_moments, effective_noise, gaussian_window_average, mc_window_average_with,
    q0_norm_check, ConcentrationReport, HMomentTolerances, SeedSuite, Tolerance, WindowFn,
    GAUSSIAN_ORACLE_SAMPLES,
};
use crate::error::{Error, Result};
use crate::markov::{ChainSpec, FiniteMarkovChain, ProbEntry};
use crate::rng::trial_seed;
use crate::state_evolution::{run_se, ExpectationEngine, SeParams, SeTrace};

pub const SWEEP_SCHEMA: &str = "amp-sw/sweep/v1";
pub const DIAG_SCHEMA: &str = "amp-sw/diag/v1";
pub const SE_SCHEMA: &str = "amp-sw/se/v1";
pub const AMP_SCHEMA: &str = "amp-sw/amp/v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Se,
    Amp,
    Sweep,
    Diag,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "se" => Ok(Mode::Se),
            "amp" => Ok(Mode::Amp),
            "sweep" => Ok(Mode::Sweep),
            "diag" => Ok(Mode::Diag),
            other => Err(Error::Config(format!("unknown mode {other:?}"))),
        }
    }
}

fn default_mode() -> Mode {
    Mode::Sweep
}
fn default_k() -> Vec<usize> {
    vec![0, 1, 2]
}
fn default_iterations() -> usize {
    15
}
fn default_seeds() -> Vec<u64> {
    (0..10).collect()
}
fn default_mc_samples() -> usize {
    crate::state_evolution::DEFAULT_MC_SAMPLES
}
fn default_se_max_iterations() -> usize {
    crate::state_evolution::DEFAULT_MAX_ITERATIONS
}
fn default_denoiser() -> String {
    "bayes-sw".into()
}
fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}
fn default_one() -> f64 {
    1.0
}
fn default_window_len() -> usize {
    100_000
}
fn default_window_seeds() -> usize {
    20
}
fn default_window_pass_fraction() -> f64 {
    0.9
}
fn default_h_iterations() -> usize {
    5
}

/// One experiment, read from a flat TOML (or JSON) file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_mode")]
    pub mode: Mode,
    pub states: Vec<f64>,
    pub transition: Vec<Vec<ProbEntry>>,
    /// Signal length.
    #[serde(rename = "N")]
    pub signal_len: usize,
    pub delta: f64,
    /// Measurement noise variance.
    pub sigma2: f64,
    #[serde(default = "default_k")]
    pub k: Vec<usize>,
    /// AMP iterations.
    #[serde(rename = "T", default = "default_iterations")]
    pub iterations: usize,
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_mc_samples")]
    pub mc_samples: usize,
    #[serde(default = "default_se_max_iterations")]
    pub se_max_iterations: usize,
    #[serde(default)]
    pub boundary: Boundary,
    #[serde(default)]
    pub tau_source: TauSource,
    #[serde(default = "default_denoiser")]
    pub denoiser: String,
    #[serde(default)]
    pub noise: NoiseKind,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    /// Multiplies every diagnostics tolerance.
    #[serde(default = "default_one")]
    pub tolerance_scale: f64,
    /// AMP iterations covered by the effective-noise checks.
    #[serde(default = "default_h_iterations")]
    pub diag_h_iterations: usize,
    #[serde(default = "default_window_len")]
    pub diag_window_len: usize,
    #[serde(default = "default_window_seeds")]
    pub diag_window_seeds: usize,
    #[serde(default = "default_window_pass_fraction")]
    pub diag_window_pass_fraction: f64,
}

impl ExperimentConfig {
    /// Reference sweep: binary chain, `N = 10⁴`,
    /// `δ = 0.3`, `σ² = 0.1`, `k ∈ {0, 1, 2}`.
    pub fn reference_default() -> Self {
        let chain = ChainSpec::binary_example();
        ExperimentConfig {
            mode: Mode::Sweep,
            states: chain.states,
            transition: chain.transition,
            signal_len: 10_000,
            delta: 0.3,
            sigma2: 0.1,
            k: default_k(),
            iterations: default_iterations(),
            master_seed: 0,
            seeds: default_seeds(),
            mc_samples: default_mc_samples(),
            se_max_iterations: default_se_max_iterations(),
            boundary: Boundary::Zero,
            tau_source: TauSource::SeTrace,
            denoiser: default_denoiser(),
            noise: NoiseKind::Gaussian,
            out_dir: default_out_dir(),
            tolerance_scale: 1.0,
            diag_h_iterations: default_h_iterations(),
            diag_window_len: default_window_len(),
            diag_window_seeds: default_window_seeds(),
            diag_window_pass_fraction: default_window_pass_fraction(),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads TOML, or JSON when the file name ends in `.json`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| Error::Config(e.to_string()))
        } else {
            Self::from_toml_str(&text)
        }
    }

    pub fn chain_spec(&self) -> ChainSpec {
        ChainSpec {
            states: self.states.clone(),
            transition: self.transition.clone(),
        }
    }

    pub fn chain(&self) -> Result<FiniteMarkovChain> {
        self.chain_spec()
            .build()
            .map_err(|e| Error::Config(format!("chain: {e}")))
    }

    pub fn measurements(&self) -> Result<usize> {
        measurement_count(self.signal_len, self.delta).map_err(|e| Error::Config(e.to_string()))
    }

    /// Checks everything that can be checked without running anything.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.chain()?.second_moment() <= 0.0 {
            return bad(
                "the chain's stationary second moment is 0; state evolution needs a nonzero signal"
                    .into(),
            );
        }
        if self.denoiser != "bayes-sw" {
            return bad(format!("unknown denoiser {:?}", self.denoiser));
        }
        let Some(&kmax) = self.k.iter().max() else {
            return bad("k list is empty".into());
        };
        if self.signal_len <= 2 * kmax {
            return bad(format!(
                "N = {} must exceed 2·max(k) = {}",
                self.signal_len,
                2 * kmax
            ));
        }
        let n = self.measurements()?;
        if n < 2 * kmax + 1 {
            return bad(format!("δ·N gives n = {n} < 2k + 1 = {}", 2 * kmax + 1));
        }
        if !(self.sigma2.is_finite() && self.sigma2 >= 0.0) {
            return bad(format!("sigma2 must be non-negative, got {}", self.sigma2));
        }
        if self.seeds.is_empty() {
            return bad("seeds list is empty".into());
        }
        if self.seeds.iter().collect::<BTreeSet<_>>().len() != self.seeds.len() {
            return bad("seeds must be distinct".into());
        }
        if self.mc_samples == 0 {
            return bad("mc_samples must be positive".into());
        }
        if !(self.tolerance_scale.is_finite() && self.tolerance_scale >= 0.0) {
            return bad("tolerance_scale must be non-negative".into());
        }
        if self.mode == Mode::Diag && self.diag_window_seeds == 0 {
            return bad("diag_window_seeds must be positive".into());
        }
        Ok(())
    }

    pub fn engine(&self) -> ExpectationEngine {
        ExpectationEngine::monte_carlo(self.mc_samples, self.master_seed)
    }

    pub fn instance_seed(&self, trial: u64) -> u64 {
        trial_seed(self.master_seed, trial)
    }
}

/// State-evolution traces for every `k`, in the order of `config.k`.
pub fn compute_se_traces(config: &ExperimentConfig) -> Result<Vec<SeTrace>> {
    config.validate()?;
    let chain = config.chain()?;
    let n = config.measurements()?;
    let engine = config.engine();
    config
        .k
        .iter()
        .map(|&k| {
            let prior = chain.window_marginal(k)?;
            let params = SeParams::new(
                k,
                config.signal_len,
                n,
                config.sigma2,
                chain.second_moment(),
            )?;
            run_se(&params, &prior, config.se_max_iterations, &engine)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeSummaryEntry {
    pub k: usize,
    pub iterations: usize,
    pub converged: bool,
    pub final_sigma2: f64,
    pub final_tau2: f64,
    pub final_predicted_mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeSummary {
    pub schema: &'static str,
    pub mc_samples: usize,
    pub mc_seed: u64,
    pub traces: Vec<SeSummaryEntry>,
}

/// Writes `se_k{k}.csv` per `k` and `se_summary.json`.
pub fn run_mode_se(config: &ExperimentConfig, out: &Path) -> Result<Vec<SeTrace>> {
    let traces = compute_se_traces(config)?;
    fs::create_dir_all(out)?;
    for trace in &traces {
        let file = fs::File::create(out.join(format!("se_k{}.csv", trace.params.k)))?;
        trace.write_csv(std::io::BufWriter::new(file))?;
    }
    let summary = SeSummary {
        schema: SE_SCHEMA,
        mc_samples: config.mc_samples,
        mc_seed: config.master_seed,
        traces: traces
            .iter()
            .map(|t| SeSummaryEntry {
                k: t.params.k,
                iterations: t.iterations(),
                converged: t.converged,
                final_sigma2: *t.sigma2.last().unwrap(),
                final_tau2: *t.tau2.last().unwrap(),
                final_predicted_mse: *t.predicted_mse.last().unwrap(),
            })
            .collect(),
    };
    write_json(&out.join("se_summary.json"), &summary)?;
    Ok(traces)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// AMP runs for every `(seed, k)`: one instance per seed, shared by all `k`.
/// Results are ordered by `k` (config order), then seed (config order).
pub fn compute_amp_runs(
    config: &ExperimentConfig,
    traces: &[SeTrace],
) -> Result<Vec<(usize, u64, AmpRun)>> {
    config.validate()?;
    let chain = config.chain()?;
    let denoisers = config
        .k
        .iter()
        .map(|&k| Ok(BayesSwDenoiser::new(&chain.window_marginal(k)?)))
        .collect::<Result<Vec<_>>>()?;
    let options = StepOptions {
        boundary: config.boundary,
        onsager_correction: true,
    };
    let mut by_seed = Vec::with_capacity(config.seeds.len());
    for &seed in &config.seeds {
        let instance = generate_instance(
            &chain,
            config.signal_len,
            config.delta,
            config.sigma2,
            config.noise,
            config.instance_seed(seed),
        )?;
        let runs = denoisers
            .par_iter()
            .enumerate()
            .map(|(i, den)| {
                run_amp(
                    &instance,
                    den,
                    config.iterations,
                    config.tau_source,
                    traces.get(i),
                    options,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        by_seed.push(runs);
    }
    let mut out = Vec::new();
    for (i, &k) in config.k.iter().enumerate() {
        for (s, &seed) in config.seeds.iter().enumerate() {
            out.push((k, seed, by_seed[s][i].clone()));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AmpSummaryEntry {
    pub k: usize,
    pub seed: u64,
    pub final_mse: f64,
}

/// Writes `amp.csv` (`k,seed,t,middle_mse,tau2,residual_power`) and
/// `amp_summary.json`.
pub fn run_mode_amp(config: &ExperimentConfig, out: &Path) -> Result<Vec<(usize, u64, AmpRun)>> {
    config.validate()?;
    let traces = if config.tau_source == TauSource::SeTrace {
        compute_se_traces(config)?
    } else {
        Vec::new()
    };
    let runs = compute_amp_runs(config, &traces)?;
    fs::create_dir_all(out)?;
    let mut w = csv::Writer::from_path(out.join("amp.csv"))?;
    w.write_record(["k", "seed", "t", "middle_mse", "tau2", "residual_power"])?;
    for (k, seed, run) in &runs {
        for it in &run.iterations {
            w.write_record([
                k.to_string(),
                seed.to_string(),
                it.t.to_string(),
                it.middle_mse.to_string(),
                it.tau2_used.map(|v| v.to_string()).unwrap_or_default(),
                it.residual_power.to_string(),
            ])?;
        }
    }
    w.flush()?;
    #[derive(Serialize)]
    struct Summary<'a> {
        schema: &'static str,
        tau_source: TauSource,
        runs: &'a [AmpSummaryEntry],
    }
    let entries: Vec<_> = runs
        .iter()
        .map(|(k, seed, run)| AmpSummaryEntry {
            k: *k,
            seed: *seed,
            final_mse: run.final_mse(),
        })
        .collect();
    write_json(
        &out.join("amp_summary.json"),
        &Summary {
            schema: AMP_SCHEMA,
            tau_source: config.tau_source,
            runs: &entries,
        },
    )?;
    Ok(runs)
}

/// One row of `sweep.csv`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepRow {
    pub k: usize,
    pub seed: u64,
    pub t: usize,
    pub emp_mse: f64,
    pub se_mse: f64,
    pub tau2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepPoint {
    pub t: usize,
    pub emp_mean: f64,
    pub se_mse: f64,
    /// Mean over seeds of `|emp − se|`.
    pub mean_abs_gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepK {
    pub k: usize,
    pub se_iterations: usize,
    pub se_converged: bool,
    pub final_mse_mean: f64,
    pub final_mse_stderr: f64,
    pub final_se_mse: f64,
    pub per_t: Vec<SweepPoint>,
}

/// Final-MSE comparison between consecutive entries of the k list.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OrderingGap {
    pub k_smaller: usize,
    pub k_larger: usize,
    /// Mean over seeds of `MSE(k_smaller) − MSE(k_larger)`.
    pub mean_gap: f64,
    /// Standard error of the paired per-seed differences.
    pub stderr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepSummary {
    pub schema: &'static str,
    pub seeds: usize,
    pub per_k: Vec<SweepK>,
    pub ordering: Vec<OrderingGap>,
    /// Final mean MSE strictly decreases along increasing `k`.
    pub mse_decreases_with_k: bool,
}

#[derive(Debug, Clone)]
pub struct SweepOutput {
    pub rows: Vec<SweepRow>,
    pub summary: SweepSummary,
    pub traces: Vec<SeTrace>,
}

fn mean_and_stderr(values: &[f64]) -> (f64, f64) {
    let m = values.len() as f64;
    let mean = values.iter().sum::<f64>() / m;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0);
    (mean, (var / m).sqrt())
}

/// SE traces, AMP runs with SE noise levels, and per-iteration comparison.
pub fn compute_sweep(config: &ExperimentConfig) -> Result<SweepOutput> {
    let mut config = config.clone();
    config.tau_source = TauSource::SeTrace;
    let traces = compute_se_traces(&config)?;
    let runs = compute_amp_runs(&config, &traces)?;

    let mut rows = Vec::new();
    for (k, seed, run) in &runs {
        let trace = &traces[config.k.iter().position(|x| x == k).unwrap()];
        for it in &run.iterations {
            rows.push(SweepRow {
                k: *k,
                seed: *seed,
                t: it.t,
                emp_mse: it.middle_mse,
                se_mse: trace.predicted_mse_at(it.t)?,
                tau2: trace.tau2_at(it.t)?,
            });
        }
    }
    rows.sort_by_key(|r| (r.k, r.seed, r.t));

    let mut per_k = Vec::new();
    let mut finals: Vec<(usize, Vec<f64>)> = Vec::new();
    for (i, &k) in config.k.iter().enumerate() {
        let trace = &traces[i];
        let mut per_t = Vec::new();
        for t in 0..=config.iterations {
            let at: Vec<&SweepRow> = rows.iter().filter(|r| r.k == k && r.t == t).collect();
            let m = at.len() as f64;
            let se = trace.predicted_mse_at(t)?;
            per_t.push(SweepPoint {
                t,
                emp_mean: at.iter().map(|r| r.emp_mse).sum::<f64>() / m,
                se_mse: se,
                mean_abs_gap: at.iter().map(|r| (r.emp_mse - se).abs()).sum::<f64>() / m,
            });
        }
        let final_values: Vec<f64> = config
            .seeds
            .iter()
            .map(|&s| {
                rows.iter()
                    .find(|r| r.k == k && r.seed == s && r.t == config.iterations)
                    .unwrap()
                    .emp_mse
            })
            .collect();
        let (mean, stderr) = mean_and_stderr(&final_values);
        per_k.push(SweepK {
            k,
            se_iterations: trace.iterations(),
            se_converged: trace.converged,
            final_mse_mean: mean,
            final_mse_stderr: stderr,
            final_se_mse: trace.predicted_mse_at(config.iterations)?,
            per_t,
        });
        finals.push((k, final_values));
    }

    let mut sorted = finals.clone();
    sorted.sort_by_key(|(k, _)| *k);
    let ordering: Vec<OrderingGap> = sorted
        .windows(2)
        .map(|w| {
            let diffs: Vec<f64> = w[0].1.iter().zip(&w[1].1).map(|(a, b)| a - b).collect();
            let (mean_gap, stderr) = mean_and_stderr(&diffs);
            OrderingGap {
                k_smaller: w[0].0,
                k_larger: w[1].0,
                mean_gap,
                stderr,
            }
        })
        .collect();
    let mse_decreases_with_k = ordering.iter().all(|g| g.mean_gap > 0.0);

    Ok(SweepOutput {
        rows,
        summary: SweepSummary {
            schema: SWEEP_SCHEMA,
            seeds: config.seeds.len(),
            per_k,
            ordering,
            mse_decreases_with_k,
        },
        traces,
    })
}

/// Writes `sweep.csv` (`k,seed,t,emp_mse,se_mse,tau2`) and
/// `sweep_summary.json`.
pub fn run_mode_sweep(config: &ExperimentConfig, out: &Path) -> Result<SweepOutput> {
    let result = compute_sweep(config)?;
    fs::create_dir_all(out)?;
    let mut w = csv::Writer::from_path(out.join("sweep.csv"))?;
    w.write_record(["k", "seed", "t", "emp_mse", "se_mse", "tau2"])?;
    for r in &result.rows {
        w.write_record([
            r.k.to_string(),
            r.seed.to_string(),
            r.t.to_string(),
            r.emp_mse.to_string(),
            r.se_mse.to_string(),
            r.tau2.to_string(),
        ])?;
    }
    w.flush()?;
    write_json(&out.join("sweep_summary.json"), &result.summary)?;
    Ok(result)
}

/// A named diagnostic with its reports.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiagCheck {
    pub name: String,
    pub pass: bool,
    pub reports: Vec<ConcentrationReport>,
    /// For seed suites: how many reports must pass.
    pub required_passes: usize,
}

impl From<SeedSuite> for DiagCheck {
    fn from(s: SeedSuite) -> Self {
        let required = (s.min_pass_fraction * s.reports.len() as f64).ceil() as usize;
        DiagCheck {
            name: s.name,
            pass: s.pass,
            reports: s.reports,
            required_passes: required,
        }
    }
}

impl DiagCheck {
    fn all_of(name: impl Into<String>, reports: Vec<ConcentrationReport>) -> Self {
        DiagCheck {
            name: name.into(),
            pass: reports.iter().all(|r| r.pass()),
            required_passes: reports.len(),
            reports,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiagReport {
    pub schema: &'static str,
    pub pass: bool,
    pub checks: Vec<DiagCheck>,
}

impl DiagReport {
    pub fn all_reports(&self) -> Vec<ConcentrationReport> {
        self.checks
            .iter()
            .flat_map(|c| c.reports.iter().cloned())
            .collect()
    }
}

/// Diagnostics bundle:
/// - `‖q⁰‖²/n` against `σ₀²` for the first seed's instance;
/// - effective-noise moments `h^{t+1}` for `t < diag_h_iterations + 1` and
///   every `k`, first seed;
/// - Markov window averages (`x²` with `k = 0`, `x₁x₃` with `k = 1`) and
///   Gaussian window averages (`z²`, `z₁z₂`, `max(z₁, z₂)`), each over
///   `diag_window_seeds` seeds at length `diag_window_len`.
pub fn compute_diag(config: &ExperimentConfig) -> Result<DiagReport> {
    config.validate()?;
    let traces = compute_se_traces(config)?;
    compute_diag_with_traces(config, &traces)
}

/// As [`compute_diag`] with state-evolution traces already computed, one per
/// entry of `config.k` in order.
pub fn compute_diag_with_traces(
    config: &ExperimentConfig,
    traces: &[SeTrace],
) -> Result<DiagReport> {
    config.validate()?;
    if traces.len() != config.k.len() || traces.iter().zip(&config.k).any(|(t, &k)| t.params.k != k)
    {
        return Err(Error::Config(
            "traces do not match the configured k list".into(),
        ));
    }
    let chain = config.chain()?;
    let scale = config.tolerance_scale;
    let sigma_beta2 = chain.second_moment();
    let first_seed = config.instance_seed(config.seeds[0]);
    let instance = generate_instance(
        &chain,
        config.signal_len,
        config.delta,
        config.sigma2,
        config.noise,
        first_seed,
    )?;

    let mut checks = vec![DiagCheck::all_of(
        "q0_norm",
        vec![q0_norm_check(
            &instance,
            sigma_beta2,
            Tolerance::rel(0.05).scaled(scale),
        )],
    )];

    let h_tol = HMomentTolerances::defaults(config.signal_len).scaled(scale);
    let steps = config.diag_h_iterations + 1;
    for (i, &k) in config.k.iter().enumerate() {
        let den = BayesSwDenoiser::new(&chain.window_marginal(k)?);
        let run = run_amp(
            &instance,
            &den,
            steps,
            TauSource::SeTrace,
            Some(&traces[i]),
            StepOptions {
                boundary: config.boundary,
                onsager_correction: true,
            },
        )?;
        let mut reports = Vec::new();
        for t in 0..steps {
            let h = effective_noise(&run.states[t], &instance)?;
            for r in check_h_moments(
                &h,
                traces[i].tau2_at(t)?,
                &instance.beta0,
                instance.measurements(),
                &h_tol,
            )? {
                reports.push(ConcentrationReport::new(
                    format!("k{k}_t{t}_{}", r.quantity()),
                    r.empirical(),
                    r.theoretical(),
                    r.sample_size(),
                    r.tolerance(),
                ));
            }
        }
        checks.push(DiagCheck::all_of(format!("effective_noise_k{k}"), reports));
    }

    let len = config.diag_window_len;
    let tol = Tolerance::clt(len).scaled(scale);
    let window_seeds: Vec<u64> = (0..config.diag_window_seeds as u64)
        .map(|s| trial_seed(config.master_seed, s))
        .collect();
    let frac = config.diag_window_pass_fraction;

    for (f, k) in [
        (WindowFn::SumSquares, 0usize),
        (WindowFn::ProductFirstLast, 1),
    ] {
        let prior = chain.window_marginal(k)?;
        let reports = window_seeds
            .par_iter()
            .map(|&s| mc_window_average_with(&chain, &prior, f, len, s, tol))
            .collect::<Result<Vec<_>>>()?;
        checks
            .push(SeedSuite::new(format!("markov_window_{}_k{k}", f.name()), reports, frac).into());
    }
    for (f, d) in [
        (WindowFn::SumSquares, 1usize),
        (WindowFn::ProductFirstLast, 2),
        (WindowFn::Max, 2),
    ] {
        let reports = window_seeds
            .par_iter()
            .map(|&s| gaussian_window_average(f, d, len, s, GAUSSIAN_ORACLE_SAMPLES, tol))
            .collect::<Result<Vec<_>>>()?;
        checks.push(
            SeedSuite::new(format!("gaussian_window_{}_d{d}", f.name()), reports, frac).into(),
        );
    }

    Ok(DiagReport {
        schema: DIAG_SCHEMA,
        pass: checks.iter().all(|c| c.pass),
        checks,
    })
}

/// Writes `diag.json` and returns the report.
pub fn run_mode_diag(config: &ExperimentConfig, out: &Path) -> Result<DiagReport> {
    let report = compute_diag(config)?;
    fs::create_dir_all(out)?;
    write_json(&out.join("diag.json"), &report)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip() {
        let cfg = ExperimentConfig::reference_default();
        let text = cfg.to_toml_string().unwrap();
        assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), cfg);
    }

    #[test]
    fn minimal_toml_uses_defaults() {
        let cfg = ExperimentConfig::from_toml_str(
            r#"
            states = [0, 1]
            transition = [["67/70", "3/70"], ["1/10", "9/10"]]
            N = 10000
            delta = 0.3
            sigma2 = 0.1
            "#,
        )
        .unwrap();
        assert_eq!(cfg, ExperimentConfig::reference_default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut text = ExperimentConfig::reference_default()
            .to_toml_string()
            .unwrap();
        text.insert_str(0, "bogus = 1\n");
        assert!(ExperimentConfig::from_toml_str(&text).is_err());
    }

    #[test]
    fn validation() {
        let base = ExperimentConfig::reference_default();
        assert!(base.validate().is_ok());

        let mut c = base.clone();
        c.k.clear();
        assert!(matches!(c.validate(), Err(Error::Config(_))));

        let mut c = base.clone();
        c.seeds = vec![1, 1];
        assert!(c.validate().is_err());

        let mut c = base.clone();
        c.signal_len = 4;
        assert!(c.validate().is_err());

        let mut c = base.clone();
        c.signal_len = 20;
        c.delta = 0.2;
        // n = 4 < 5
        assert!(c.validate().is_err());

        let mut c = base.clone();
        c.transition[0][0] = ProbEntry::Text("1/2".into());
        assert!(c.validate().is_err());

        let mut c = base;
        c.denoiser = "soft-threshold".into();
        assert!(c.validate().is_err());
    }

    #[test]
    fn stderr_of_constant_is_zero() {
        assert_eq!(mean_and_stderr(&[2.0, 2.0, 2.0]), (2.0, 0.0));
        let (m, s) = mean_and_stderr(&[1.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-15);
    }
}
