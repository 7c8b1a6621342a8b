use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use postq::pipeline::{self, PipelineConfig, Stage};
use postq::Error;

#[derive(Parser)]
#[command(name = "postq", version, about = "Posterior-guided mixed-precision post-training quantization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Pipeline config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Fit block posteriors (writes blocks.tsv, posteriors.json).
    FitPosterior(Common),
    /// Design per-bit codebooks (writes codebooks.json).
    DesignCodebooks(Common),
    /// Build the expected-loss table (writes loss_table.tsv).
    BuildTable(Common),
    /// Allocate bit-widths under the budget (writes allocation.tsv, trace.tsv).
    Allocate(Common),
    /// Pack the allocated model (writes model.qmanifest/.qblob).
    Export {
        #[command(flatten)]
        common: Common,
        /// Re-import the packed model and check it bit-for-bit.
        #[arg(long)]
        verify: bool,
    },
    /// Tune group scales against the posterior-predictive teacher.
    Distill(Common),
    /// Evaluate the packed model (writes metrics.tsv, predictions.tsv).
    Metrics(Common),
    /// Sweep budgets and seeds (writes frontier.tsv).
    Frontier(Common),
    /// Run every stage in order (writes report.json, timings.tsv).
    Run(Common),
    /// Write a seeded toy MLP, calibration inputs and a config.
    MakeToy {
        #[arg(long)]
        dir: PathBuf,
        /// Layer widths, input first.
        #[arg(long, value_delimiter = ',', default_value = "16,64,64,8")]
        dims: Vec<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 3.0)]
        target_bits: f64,
    },
}

fn load(c: &Common) -> Result<PipelineConfig, Error> {
    let mut cfg = PipelineConfig::load(&c.config)?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(o) = &c.out {
        cfg.paths.out = o.clone();
    }
    Ok(cfg)
}

fn stage(c: &Common, s: Stage, verify: bool) -> Result<(), Error> {
    let cfg = load(c)?;
    pipeline::run_stage(&cfg, s, verify)?;
    println!("{}: outputs in {}", s.name(), cfg.out_dir().display());
    Ok(())
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::FitPosterior(c) => stage(&c, Stage::FitPosterior, false),
        Command::DesignCodebooks(c) => stage(&c, Stage::DesignCodebooks, false),
        Command::BuildTable(c) => stage(&c, Stage::BuildTable, false),
        Command::Allocate(c) => stage(&c, Stage::Allocate, false),
        Command::Export { common, verify } => stage(&common, Stage::Export, verify),
        Command::Distill(c) => stage(&c, Stage::Distill, false),
        Command::Metrics(c) => stage(&c, Stage::Metrics, false),
        Command::Frontier(c) => stage(&c, Stage::Frontier, false),
        Command::Run(c) => {
            let cfg = load(&c)?;
            let (_, report) = pipeline::run_pipeline(&cfg)?;
            println!(
                "run: {:.4} bits/weight ({} of {} budget bits), expected loss {:.6e}{}",
                report.average_bits,
                report.total_cost,
                report.budget,
                report.total_loss,
                if report.off_target { ", off target" } else { "" }
            );
            Ok(())
        }
        Command::MakeToy { dir, dims, seed, target_bits } => {
            let path = pipeline::make_toy(&dir, &dims, seed, target_bits)?;
            println!("{}", path.display());
            Ok(())
        }
    }
}

/// 2 for configuration problems, 4 for failed verification, 3 otherwise.
fn exit_code(e: &Error) -> u8 {
    let mut cur: &dyn std::error::Error = e;
    loop {
        match cur.downcast_ref::<Error>() {
            Some(Error::Config(_)) => return 2,
            Some(Error::Verification(_)) => return 4,
            _ => {}
        }
        match cur.source() {
            Some(next) => cur = next,
            None => return 3,
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
