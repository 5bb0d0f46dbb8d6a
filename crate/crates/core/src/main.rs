use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};

use amp_sw::diagnostics::render_table;
use amp_sw::experiment::{
    run_mode_amp, run_mode_diag, run_mode_se, run_mode_sweep, ExperimentConfig, Mode,
};

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Se,
    Amp,
    Sweep,
    Diag,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Se => Mode::Se,
            ModeArg::Amp => Mode::Amp,
            ModeArg::Sweep => Mode::Sweep,
            ModeArg::Diag => Mode::Diag,
        }
    }
}

/// AMP with sliding-window denoisers for Markov-chain signals.
#[derive(Debug, Parser)]
#[command(name = "amp-sw", version)]
struct Cli {
    mode: ModeArg,
    /// Experiment config (TOML, or JSON with a .json extension).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `out_dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed; overrides `master_seed` from the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    threads: Option<usize>,
}

const EXIT_CHECK_FAILED: u8 = 1;
const EXIT_CONFIG: u8 = 2;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_CONFIG)
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()?;
    }
    let mut config = ExperimentConfig::load(&cli.config)?;
    config.mode = cli.mode.into();
    if let Some(seed) = cli.seed {
        config.master_seed = seed;
    }
    if let Some(out) = cli.out {
        config.out_dir = out;
    }
    config.validate()?;
    let out = config.out_dir.clone();

    match config.mode {
        Mode::Se => {
            for trace in run_mode_se(&config, &out)? {
                println!(
                    "k={} iterations={} converged={} sigma2={} predicted_mse={}",
                    trace.params.k,
                    trace.iterations(),
                    trace.converged,
                    trace.sigma2.last().unwrap(),
                    trace.predicted_mse.last().unwrap()
                );
            }
        }
        Mode::Amp => {
            for (k, seed, run) in run_mode_amp(&config, &out)? {
                println!("k={k} seed={seed} final_mse={}", run.final_mse());
            }
        }
        Mode::Sweep => {
            let result = run_mode_sweep(&config, &out)?;
            for k in &result.summary.per_k {
                println!(
                    "k={} final_mse={:.6} ± {:.6} (se {:.6})",
                    k.k, k.final_mse_mean, k.final_mse_stderr, k.final_se_mse
                );
            }
        }
        Mode::Diag => {
            let report = run_mode_diag(&config, &out)?;
            print!("{}", render_table(&report.all_reports()));
            for c in &report.checks {
                let passed = c.reports.iter().filter(|r| r.pass()).count();
                println!(
                    "{:<40} {}/{} (need {})  {}",
                    c.name,
                    passed,
                    c.reports.len(),
                    c.required_passes,
                    if c.pass { "PASS" } else { "FAIL" }
                );
            }
            if !report.pass {
                return Ok(ExitCode::from(EXIT_CHECK_FAILED));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}
