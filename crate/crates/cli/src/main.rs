//! `treerl` command-line entry point.

mod config;
mod error;
mod report;
mod run;

use clap::{Parser, Subcommand};
use config::Command;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "treerl", version, about = "Entropy-guided tree search and tree-based policy optimization")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
    /// TOML run configuration.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Dotted override, e.g. `search.m=16`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Parent directory for run directories (report: output directory).
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Grow search trees for every prompt and write forests.
    Search,
    /// Run a grid of (M, N, L, T) configurations.
    Sweep,
    /// Entropy versus random fork points over many seeds.
    Ablate,
    /// Train the synthetic policy with TreeRL or ChainRL.
    Train,
    /// Check the leaf-per-token bounds numerically.
    Theory,
    /// Aggregate the CSV artifacts under a directory.
    Report { dir: PathBuf },
}

impl Cmd {
    fn command(&self) -> Command {
        match self {
            Cmd::Search => Command::Search,
            Cmd::Sweep => Command::Sweep,
            Cmd::Ablate => Command::Ablate,
            Cmd::Train => Command::Train,
            Cmd::Theory => Command::Theory,
            Cmd::Report { .. } => Command::Report,
        }
    }
}

fn execute(cli: &Cli, run_dir: &mut Option<PathBuf>) -> anyhow::Result<()> {
    if let Cmd::Report { dir } = &cli.command {
        return report::cmd_report(dir, cli.out.as_deref());
    }
    let cfg = config::load(cli.config.as_deref(), &cli.set, cli.seed)?;
    rayon::ThreadPoolBuilder::new().num_threads(cfg.threads).build_global()?;
    let command = cli.command.command();
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("runs"));
    let dir = run::RunDir::create(&out, command, &cfg)?;
    *run_dir = Some(dir.path.clone());
    match command {
        Command::Search => run::cmd_search(&cfg, &dir)?,
        Command::Sweep => run::cmd_sweep(&cfg, &dir)?,
        Command::Ablate => run::cmd_ablate(&cfg, &dir)?,
        Command::Train => run::cmd_train(&cfg, &dir)?,
        Command::Theory => run::cmd_theory(&cfg, &dir)?,
        Command::Report => unreachable!("handled above"),
    }
    println!("run directory: {}", dir.path.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let mut run_dir = None;
    match execute(&cli, &mut run_dir) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = error::classify(&e);
            let code = kind.exit_code();
            let record = error::ErrorRecord {
                exit_code: code,
                kind,
                message: format!("{e:#}"),
                command: cli.command.command().name(),
            };
            let line = serde_json::to_string(&record).expect("error record serializes");
            if let Some(dir) = run_dir {
                let _ = std::fs::write(dir.join("error.json"), format!("{line}\n"));
            }
            eprintln!("{line}");
            ExitCode::from(code as u8)
        }
    }
}
