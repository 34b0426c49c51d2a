//! `sospkit`: runs configured experiments and writes their CSV outputs.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sospkit::harness::{self, ExperimentConfig, ExperimentReport, Mode, Preset};
use sospkit::Error;

#[derive(Parser, Debug)]
#[command(name = "sospkit", version, about = "Private second-order stationary point experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Runs the mode named in the config (single, distributed or sweep).
    Run(Common),
    /// Runs the cross product of the `[sweep]` grids.
    Sweep(Common),
    /// Single escape rounds from the planted saddle.
    EscapeTest(Common),
    /// Coupled escape trials from the planted saddle.
    CoupledTest(Common),
    /// Direct output against private selection over a grid of dimensions.
    SelectAblation(Common),
    /// Prints the default configuration as TOML.
    Defaults,
}

#[derive(Args, Debug)]
struct Common {
    /// TOML experiment configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated seeds, replacing the config's list.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// `derived` or `paper-defaults`.
    #[arg(long)]
    preset: Option<String>,
    /// Worker threads; results do not depend on it.
    #[arg(long)]
    workers: Option<usize>,
}

fn load(common: &Common, mode: Option<Mode>) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(mode) = mode {
        cfg.mode = mode;
    }
    if let Some(out) = &common.out {
        cfg.out = Some(out.clone());
    }
    if let Some(seeds) = &common.seeds {
        cfg.seeds = Some(seeds.clone());
    }
    if let Some(p) = &common.preset {
        cfg.preset = Preset::parse(p)?;
    }
    if common.workers.is_some() {
        cfg.workers = common.workers;
    }
    Ok(cfg)
}

fn print_report(report: &ExperimentReport) {
    for s in &report.summary {
        println!(
            "grid {:>3}  n={:<7} m={:<3} d={:<4} eps={:<6} runs={:<3} passed={:<3} truncated={:<3} median|grad|={:.4e} median lambda_min={:+.4e} alpha={:.4e}",
            s.grid_index,
            s.n,
            s.m,
            s.d,
            s.epsilon,
            s.runs,
            s.passed,
            s.truncated,
            s.median_grad_norm,
            s.median_lambda_min,
            s.median_alpha
        );
    }
    if let Some(fit) = &report.slope {
        println!("log-log slope of median |grad| vs {}: {:.4}", fit.axis, fit.slope);
    }
    for e in &report.escape {
        println!(
            "{}: {}/{} escaped ({:.4}), reference {:.4}, lower bound {:.4}, {}",
            e.experiment,
            e.escapes,
            e.trials,
            e.fraction,
            e.reference,
            e.lower_bound,
            if e.passed { "above" } else { "below" }
        );
    }
    for r in &report.degradation {
        println!(
            "d={:<4} runs={:<3} direct pass={:.3} selection non-SOSP={:.3} (none={:.3})",
            r.d, r.runs, r.direct_pass_fraction, r.selection_non_sosp_fraction, r.selection_none_fraction
        );
    }
    println!("outputs in {}", report.out_dir.display());
}

fn execute(cli: Cli) -> Result<(), Error> {
    let (common, mode) = match &cli.command {
        Command::Defaults => {
            print!("{}", ExperimentConfig::default().to_toml()?);
            return Ok(());
        }
        Command::Run(c) => (c, None),
        Command::Sweep(c) => (c, Some(Mode::Sweep)),
        Command::EscapeTest(c) => (c, Some(Mode::EscapeTest)),
        Command::CoupledTest(c) => (c, Some(Mode::CoupledTest)),
        Command::SelectAblation(c) => (c, Some(Mode::SelectAblation)),
    };
    let cfg = load(common, mode)?;
    if matches!(cli.command, Command::Run(_))
        && !matches!(cfg.mode, Mode::Single | Mode::Distributed | Mode::Sweep)
    {
        return Err(Error::Config(format!(
            "`run` executes single, distributed or sweep configs; use the `{}` subcommand",
            cfg.mode.as_str()
        )));
    }
    let report = harness::run_experiment(&cfg)?;
    print_report(&report);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(harness::exit_code(&e) as u8)
        }
    }
}
