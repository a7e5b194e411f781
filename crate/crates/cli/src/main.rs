use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use retro_cli::run::{run, Command, RunOptions};

#[derive(Parser)]
#[command(name = "retro", version, about = "Forward simulation, time reversal and source inversion for diffusions")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(clap::Args)]
struct Common {
    /// Experiment config (INI).
    #[arg(long, short)]
    config: PathBuf,
    /// Output directory; overrides `output` in the config.
    #[arg(long, short)]
    output: Option<PathBuf>,
    /// Overwrite existing outputs.
    #[arg(long)]
    force: bool,
    /// Worker threads, 0 picks from RETRO_THREADS or the core count.
    #[arg(long, default_value_t = 0)]
    threads: usize,
}

#[derive(Subcommand)]
enum Cmd {
    /// Simulate the forward SDE and record snapshots.
    Forward(Common),
    /// Run the reversed McKean-Vlasov dynamics from a terminal law.
    Reverse(Common),
    /// Cross-check the OU Fourier routes against each other.
    OuVerify(Common),
    /// Recover a point source from terminal data.
    Invert(Common),
    /// Check the second-moment stability bound.
    MomentCheck(Common),
    /// Probe whether candidate sources are distinguishable at the horizon.
    Injectivity(Common),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (command, common) = match cli.command {
        Cmd::Forward(c) => (Command::Forward, c),
        Cmd::Reverse(c) => (Command::Reverse, c),
        Cmd::OuVerify(c) => (Command::OuVerify, c),
        Cmd::Invert(c) => (Command::Invert, c),
        Cmd::MomentCheck(c) => (Command::MomentCheck, c),
        Cmd::Injectivity(c) => (Command::Injectivity, c),
    };
    let threads = match common.threads {
        0 => std::env::var("RETRO_THREADS").ok().and_then(|v| v.parse().ok()).unwrap_or(0),
        n => n,
    };
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
        eprintln!("retro: thread pool: {e}");
        return ExitCode::from(3);
    }
    let opts = RunOptions { output: common.output, force: common.force, threads };
    match run(command, &common.config, &opts) {
        Ok(out) => {
            let failed = out.report["failed"].as_array().map(|a| a.len()).unwrap_or(0);
            println!("{}: {}", command.name(), if out.pass { "PASS".into() } else { format!("FAIL ({failed} checks)") });
            ExitCode::from(if out.pass { 0 } else { 1 })
        }
        Err(e) => {
            eprintln!("retro {}: {e}", command.name());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
