use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use faqs::config::RunConfig;
use faqs::protocol::{self, BlockSpec};

#[derive(Parser)]
#[command(name = "faqs", version, about = "Federated architecture and quantization co-search simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "faqs-out")]
    out: PathBuf,
    #[arg(long)]
    rounds: Option<u32>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the co-search and the FedAvg baseline, then finetune and report.
    Run {
        #[command(flatten)]
        args: RunArgs,
        /// Skip the FedAvg comparison run.
        #[arg(long)]
        no_baseline: bool,
    },
    /// Run the fixed-architecture FedAvg baseline only.
    Baseline {
        #[command(flatten)]
        args: RunArgs,
    },
    /// Per-block communication comparison.
    Account {
        #[arg(long, default_value_t = 24)]
        c_in: usize,
        #[arg(long)]
        c_out: Option<usize>,
        #[arg(long, default_value_t = 0.51)]
        gamma: f64,
        #[arg(long, default_value_t = 16.0)]
        bits: f64,
    },
    /// Parse and validate a configuration file.
    ValidateConfig {
        #[arg(long)]
        config: PathBuf,
    },
}

fn load(args: &RunArgs) -> anyhow::Result<RunConfig> {
    let mut cfg = RunConfig::load(&args.config).with_context(|| format!("invalid config {}", args.config.display()))?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(r) = args.rounds {
        cfg.rounds = r;
    }
    Ok(cfg)
}

fn main() -> ExitCode {
    match real_main() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn real_main() -> anyhow::Result<()> {
    match Cli::parse().command {
        Command::Run { args, no_baseline } => {
            let cfg = load(&args)?;
            let report = faqs_cli::run_experiment(&cfg, true, !no_baseline, Some(&args.out))?;
            print!("{}", report.summary());
            println!("\nwrote {} files to {}", report.files.len(), args.out.display());
        }
        Command::Baseline { args } => {
            let cfg = load(&args)?;
            let report = faqs_cli::run_experiment(&cfg, false, true, Some(&args.out))?;
            print!("{}", report.summary());
        }
        Command::Account { c_in, c_out, gamma, bits } => {
            println!("published constants (24 input channels, ratios {{3, 6}}):");
            print!("{}", protocol::format_table(&protocol::published_constants()));
            let spec = BlockSpec { c_in, c_out: c_out.unwrap_or(c_in), faqs_gamma: gamma, faqs_bits: bits, ..BlockSpec::default() };
            println!("\ncounted from block shape (C_in={}, C_out={}):", spec.c_in, spec.c_out);
            print!("{}", protocol::format_table(&protocol::block_costs(&spec)));
        }
        Command::ValidateConfig { config } => {
            let cfg = RunConfig::load(&config).with_context(|| format!("invalid config {}", config.display()))?;
            println!(
                "ok: {} clients, {} layers, {} rounds",
                cfg.clients.len(),
                cfg.layers.len(),
                cfg.rounds
            );
        }
    }
    Ok(())
}
