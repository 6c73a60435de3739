use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use spot_core::commands::{self, Invocation};
use spot_core::io::config::RunConfig;

/// Token sparsification for vision transformers driven by attention-map
/// statistics.
#[derive(Parser)]
#[command(name = "spot", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// key = value configuration file
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override one configuration key (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Directory for artifacts
    #[arg(long, value_name = "DIR", default_value = "spot-out")]
    out: PathBuf,
    /// Seed for initialization, shuffling and mask sampling
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain a dense backbone, then fine-tune it with predictors
    Train(Common),
    /// Accuracy and cost of dense, learned and heuristic pruning
    Eval(Common),
    /// Analytical compute report
    Flops {
        #[command(flatten)]
        common: Common,
        /// Print comma-separated rows instead of aligned text
        #[arg(long)]
        csv: bool,
    },
    /// Render pruned patches of one image as a shaded pixmap
    Visualize(Common),
    /// Dump per-token attention descriptors at each stage
    StatsDump(Common),
    /// Overlap between learned and heuristic token selection
    CompareBaseline(Common),
    /// Fine-tune and evaluate predictor variants
    Ablate(Common),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let (common, csv) = match &cli.command {
        Command::Train(c)
        | Command::Eval(c)
        | Command::Visualize(c)
        | Command::StatsDump(c)
        | Command::CompareBaseline(c)
        | Command::Ablate(c) => (c, false),
        Command::Flops { common, csv } => (common, *csv),
    };
    let mut overrides = common.overrides.clone();
    if let Some(seed) = common.seed {
        overrides.push(format!("seed={seed}"));
    }
    let config = match RunConfig::load(common.config.as_deref(), &overrides) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("spot: {e}");
            return ExitCode::from(1);
        }
    };
    let inv = Invocation {
        config,
        out: common.out.clone(),
    };
    let result = match &cli.command {
        Command::Train(_) => commands::train(&inv),
        Command::Eval(_) => commands::eval(&inv),
        Command::Flops { .. } => commands::flops(&inv, csv),
        Command::Visualize(_) => commands::visualize(&inv),
        Command::StatsDump(_) => commands::stats_dump(&inv),
        Command::CompareBaseline(_) => commands::compare_baseline(&inv),
        Command::Ablate(_) => commands::ablate(&inv),
    };
    match result {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("spot: {e}");
            ExitCode::from(2)
        }
    }
}
