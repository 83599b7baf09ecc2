use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cascade_clock::experiment::{available_presets, parse_config, run_experiment, Mode};

/// Monte Carlo simulator of a local oscillator locked to a cascade of atomic
/// ensembles with geometrically increasing Ramsey times.
#[derive(Parser)]
#[command(name = "cascade-clock", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one clock configuration and report its stability.
    Run(Common),
    /// Sweep ensemble size with the Ramsey-time multiplier (stability tables).
    SweepN(Common),
    /// Scan the Ramsey time for the protocol break-down point.
    ScanBeta(Common),
    /// Estimate locked/unlocked frequency-noise spectra.
    Spectrum(Common),
}

#[derive(Args)]
struct Common {
    /// Flat key=value config file, or a manifest.json from a previous run.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in preset name (fig1b, fig2, fig3, figs1-white, figs1-pink).
    #[arg(long)]
    preset: Option<String>,
    /// Master seed (overrides config).
    #[arg(long)]
    seed: Option<u64>,
    /// Trial count (overrides config).
    #[arg(long)]
    trials: Option<u64>,
    /// Worker threads; 0 = all cores (overrides config).
    #[arg(long)]
    workers: Option<usize>,
    /// Output directory (overrides config).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Extra key=value overrides, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

fn overrides_from(common: &Common) -> Result<Vec<(String, String)>, String> {
    let mut v = Vec::new();
    for kv in &common.set {
        let Some((k, val)) = kv.split_once('=') else {
            return Err(format!("--set expects KEY=VALUE, got '{kv}'"));
        };
        v.push((k.trim().to_string(), val.trim().to_string()));
    }
    if let Some(seed) = common.seed {
        v.push(("seed".into(), seed.to_string()));
    }
    if let Some(trials) = common.trials {
        v.push(("trials".into(), trials.to_string()));
    }
    if let Some(workers) = common.workers {
        v.push(("workers".into(), workers.to_string()));
    }
    if let Some(out) = &common.out {
        v.push(("out".into(), out.display().to_string()));
    }
    Ok(v)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help/version requests are not errors.
            if e.use_stderr() {
                eprintln!("{e}");
                return ExitCode::from(1);
            }
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };

    let (mode, common) = match &cli.command {
        Command::Run(c) => (Mode::Run, c),
        Command::SweepN(c) => (Mode::SweepN, c),
        Command::ScanBeta(c) => (Mode::ScanBeta, c),
        Command::Spectrum(c) => (Mode::Spectrum, c),
    };

    let overrides = match overrides_from(common) {
        Ok(v) => v,
        Err(msg) => {
            eprintln!("error: {msg}");
            return ExitCode::from(1);
        }
    };

    let spec = match parse_config(mode, common.preset.as_deref(), common.config.as_deref(), &overrides) {
        Ok(spec) => spec,
        Err(e) => {
            eprintln!("error: {e}");
            if common.preset.is_none() && common.config.is_none() {
                eprintln!("hint: presets available: {}", available_presets().join(", "));
            }
            return ExitCode::from(1);
        }
    };

    match run_experiment(&spec) {
        Ok(summary) => {
            if let Some(rep) = &summary.stability {
                println!(
                    "sigma = {:.6e} +- {:.2e}  F = {:.4}  aborts = {:.2}%",
                    rep.sigma,
                    rep.sigma_stderr,
                    rep.figure_of_merit,
                    100.0 * rep.abort_rate
                );
            }
            for row in &summary.sweep_rows {
                println!(
                    "n = {:<3} m = {} N = {:<4} sigma = {:.6e} (theory {:.6e})",
                    row.multiplier, row.m, row.atoms, row.sigma, row.theory_sigma
                );
            }
            for (protocol, scan) in &summary.scans {
                println!(
                    "{protocol}: beta = {}{}",
                    scan.beta_estimate,
                    if scan.low_confidence { " (low confidence)" } else { "" }
                );
            }
            println!("wrote {} file(s) + {}", summary.outputs.len(), summary.manifest.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
