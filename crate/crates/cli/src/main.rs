//! Experiment runner for the verification library: configured pipelines with
//! hash-stamped CSV/JSON artifacts and verdict-driven exit codes.
//!
//! Exit status: 0 when every check passes, 1 when any verdict fails (the
//! reports are still written), 2 when the configuration or its parameters
//! are rejected before any compute.

mod artifacts;
mod config;
mod pipelines;
mod sweep;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use schrokernel_core::Verdict;

use config::ExperimentConfig;

#[derive(Parser)]
#[command(
    name = "schrokernel",
    version,
    about = "Verification campaigns for divergence-form Schrodinger heat kernels"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Audit the comparison weight and the seven hypothesis constants
    AuditHyp(RunArgs),
    /// Calibrate and verify the drift-rate weight inequality
    AuditLyapunov(RunArgs),
    /// Kernel columns, operator dump, positivity and free-decay probes
    Kernel(RunArgs),
    /// Calibrate the kernel upper bound, verify it on a refined holdout
    Bounds(RunArgs),
    /// Lowest eigenpairs, domain saturation, decay envelope
    Spectrum(RunArgs),
    /// Fan member configs out to a worker pool and aggregate verdicts
    Sweep(RunArgs),
    /// Every applicable pipeline on one config
    All(RunArgs),
}

impl Cmd {
    fn split(&self) -> (&'static str, &RunArgs) {
        match self {
            Cmd::AuditHyp(a) => ("audit-hyp", a),
            Cmd::AuditLyapunov(a) => ("audit-lyapunov", a),
            Cmd::Kernel(a) => ("kernel", a),
            Cmd::Bounds(a) => ("bounds", a),
            Cmd::Spectrum(a) => ("spectrum", a),
            Cmd::Sweep(a) => ("sweep", a),
            Cmd::All(a) => ("all", a),
        }
    }
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config (TOML); for sweep, the sweep file
    #[arg(long)]
    config: PathBuf,
    /// Worker pool size for sweep (default: available parallelism)
    #[arg(long)]
    jobs: Option<usize>,
    /// Override the configured output directory
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the configured seed
    #[arg(long)]
    seed: Option<u64>,
    /// Treat near-miss margins (a pass within 5% of its scale) as failures
    #[arg(long)]
    strict: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (name, args) = cli.cmd.split();
    match run(name, args) {
        Ok(Verdict::Pass) => ExitCode::SUCCESS,
        Ok(Verdict::Fail) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(name: &str, args: &RunArgs) -> Result<Verdict> {
    if name == "sweep" {
        return sweep::run_sweep(
            &args.config,
            args.jobs,
            args.out.as_deref(),
            args.seed,
            args.strict,
        );
    }
    let cfg = ExperimentConfig::load(&args.config)?.resolved(args.out.as_deref(), args.seed);
    let outcome = sweep::run_single(name, &cfg, args.strict)?;
    for c in &outcome.checks {
        let note = if c.warning() { " (near miss)" } else { "" };
        println!(
            "check {}: {}{note} (worst margin {:.3e})",
            c.name,
            c.effective(args.strict),
            c.worst_margin
        );
    }
    println!(
        "{name}: {} (config {}, artifacts in {})",
        outcome.verdict,
        &outcome.hash[..8],
        cfg.output.dir.display()
    );
    Ok(outcome.verdict)
}
