//! Experiment command line: reproducible training runs driven by TOML
//! configs, plus metric plotting and embedding export.
//!
//! Exit codes: 0 success, 1 config error, 2 data error, 3 numerical failure
//! (training aborted on a non-finite metric).

use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;
use tourbillon_core::config::{RunConfig, RunKind};
use tourbillon_core::experiment::run_config;
use tourbillon_core::plot::emit_plots;
use tourbillon_core::Error;

#[derive(Parser)]
#[command(
    name = "tourbillon",
    about = "Train circular autoencoders, stacks, and their twins with local learning rules"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct RunArgs {
    /// Experiment config; may repeat to run several configs
    #[arg(long, required = true)]
    config: Vec<PathBuf>,
    /// Override the config's seed
    #[arg(long)]
    seed: Option<u64>,
    /// Override the config's output directory
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run this many configs in parallel child processes
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Train a circular autoencoder (recirculation, symmetric, bp, or fa)
    TrainCae(RunArgs),
    /// Train a stack of circular autoencoders plus a supervised head, or an
    /// equivalent end-to-end bp/fa baseline
    TrainTourbillon(RunArgs),
    /// Fine-tune a trained stack through its decoder channel
    FineTune(RunArgs),
    /// Build and train the physically-plausible twin of a source network
    Tourbillonize(RunArgs),
    /// Evaluate a checkpoint on a dataset
    Eval(RunArgs),
    /// Export hinge-layer embeddings as CSV
    ExportEmbeddings(RunArgs),
    /// Overlay metric curves from several runs as SVG files
    Plot {
        /// Metrics CSV; repeat once per run
        #[arg(long, required = true)]
        csv: Vec<PathBuf>,
        /// Legend label; one per --csv, in order
        #[arg(long, required = true)]
        label: Vec<String>,
        /// Output directory for the SVG files
        #[arg(long)]
        out: PathBuf,
    },
}

fn expected_kind(cmd: &Command) -> Option<RunKind> {
    match cmd {
        Command::TrainCae(_) => Some(RunKind::TrainCae),
        Command::TrainTourbillon(_) => Some(RunKind::TrainTourbillon),
        Command::FineTune(_) => Some(RunKind::FineTune),
        Command::Tourbillonize(_) => Some(RunKind::Tourbillonize),
        Command::Eval(_) => Some(RunKind::Eval),
        Command::ExportEmbeddings(_) => Some(RunKind::ExportEmbeddings),
        Command::Plot { .. } => None,
    }
}

fn run_one(path: &PathBuf, kind: RunKind, args: &RunArgs) -> Result<(), Error> {
    let mut cfg = RunConfig::from_file(path)?;
    if cfg.kind != kind {
        return Err(Error::Config(format!(
            "{}: config kind is {} but the subcommand expects {}",
            path.display(),
            cfg.kind.as_str(),
            kind.as_str()
        )));
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &args.out {
        cfg.out_dir = out.clone();
    }
    let artifacts = run_config(&cfg)?;
    if let Some(metrics) = &artifacts.primary_metrics {
        let last_epoch = metrics.rows.iter().map(|r| r.epoch).max().unwrap_or(0);
        for row in metrics.rows.iter().filter(|r| r.epoch == last_epoch) {
            println!(
                "{}: {} {} = {}",
                path.display(),
                row.split,
                row.metric,
                row.value
            );
        }
    }
    println!("artifacts in {}", artifacts.out_dir.display());
    Ok(())
}

/// Run the configs in up to `jobs` child processes of this same binary.
fn run_parallel(args: &RunArgs, kind_flag: &str) -> ExitCode {
    let exe = match std::env::current_exe() {
        Ok(e) => e,
        Err(e) => {
            eprintln!("error: cannot locate executable: {e}");
            return ExitCode::from(1);
        }
    };
    let mut pending = args.config.clone();
    pending.reverse();
    let mut running: Vec<(PathBuf, std::process::Child)> = Vec::new();
    let mut worst: u8 = 0;
    loop {
        while running.len() < args.jobs.max(1) {
            let Some(cfg) = pending.pop() else { break };
            let mut cmd = std::process::Command::new(&exe);
            cmd.arg(kind_flag).arg("--config").arg(&cfg);
            if let Some(seed) = args.seed {
                cmd.arg("--seed").arg(seed.to_string());
            }
            if let Some(out) = &args.out {
                cmd.arg("--out").arg(out);
            }
            match cmd.spawn() {
                Ok(child) => running.push((cfg, child)),
                Err(e) => {
                    eprintln!("error: spawn for {}: {e}", cfg.display());
                    worst = worst.max(1);
                }
            }
        }
        if running.is_empty() {
            break;
        }
        let (cfg, mut child) = running.remove(0);
        match child.wait() {
            Ok(status) => {
                let code = status.code().unwrap_or(1) as u8;
                if code != 0 {
                    eprintln!("{}: exited with code {code}", cfg.display());
                }
                worst = worst.max(code);
            }
            Err(e) => {
                eprintln!("{}: wait failed: {e}", cfg.display());
                worst = worst.max(1);
            }
        }
    }
    ExitCode::from(worst)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let kind = expected_kind(&cli.command);
    match &cli.command {
        Command::Plot { csv, label, out } => match emit_plots(csv, label, out) {
            Ok(files) => {
                for f in files {
                    println!("wrote {}", f.display());
                }
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(e.exit_code() as u8)
            }
        },
        Command::TrainCae(args)
        | Command::TrainTourbillon(args)
        | Command::FineTune(args)
        | Command::Tourbillonize(args)
        | Command::Eval(args)
        | Command::ExportEmbeddings(args) => {
            let kind = kind.expect("run kinds have an expected config kind");
            if args.config.len() > 1 && args.jobs > 1 {
                return run_parallel(args, kind.as_str());
            }
            let mut worst: u8 = 0;
            for path in &args.config {
                if let Err(e) = run_one(path, kind, args) {
                    eprintln!("error: {e}");
                    worst = worst.max(e.exit_code() as u8);
                }
            }
            ExitCode::from(worst)
        }
    }
}
