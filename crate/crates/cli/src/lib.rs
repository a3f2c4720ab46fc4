//! Command-line pipeline over the shared artifact files: train a chain,
//! score it, decompose, transfer, fine-tune, evaluate and carve subnetworks.

pub mod config;
pub mod pipeline;

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

pub use config::{DatasetSource, PipelineConfig};
pub use pipeline::Pipeline;

#[derive(Debug, Parser)]
#[command(name = "hsdnet", version, about = "Decompose a chain CNN into a class-hierarchical tree")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Pipeline configuration file; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory holding the stage artifacts; overrides `out`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Run seed; overrides `seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct SubsetArg {
    /// Comma-separated class ids.
    #[arg(long, value_delimiter = ',')]
    pub subset: Option<Vec<usize>>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the conventional chain network.
    TrainBase,
    /// Compute per-class channel sensitivity of the trained chain.
    Iscv,
    /// Grow the tree layout from the sensitivity scores.
    Decompose,
    /// Fill the tree edges with sliced chain weights.
    Transfer,
    /// Train the transferred tree end to end.
    Finetune,
    /// Test accuracy of the chain and the fine-tuned tree.
    Eval(SubsetArg),
    /// Extract the subnetwork covering a class subset.
    Subnet(SubsetArg),
    /// Subnetwork accuracy over sampled class subsets.
    Sweep {
        #[arg(long, value_delimiter = ',', default_value = "2,3,4")]
        cardinalities: Vec<usize>,
        /// Subsets drawn per cardinality; all are used when there are fewer.
        #[arg(long, default_value_t = 20)]
        combos: usize,
    },
    /// Size, cost, latency and accuracy of the tree or a subnetwork against the chain.
    Metrics(SubsetArg),
    /// Write the tree as a Graphviz digraph.
    ExportDot,
    /// Print the effective configuration.
    ShowConfig,
}

/// Caps rayon parallelism when `HSDNET_THREADS` is set.
fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var("HSDNET_THREADS") else { return Ok(()) };
    let n: usize = v.trim().parse().with_context(|| format!("HSDNET_THREADS={v:?} is not a thread count"))?;
    if n == 0 {
        bail!("HSDNET_THREADS must be at least 1");
    }
    // a pool built earlier in the same process keeps its size
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

pub fn effective_config(global: &GlobalArgs) -> Result<PipelineConfig> {
    let mut cfg = match &global.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(out) = &global.out {
        cfg.out = out.clone();
    }
    if let Some(seed) = global.seed {
        cfg.set_seed(seed);
    }
    Ok(cfg)
}

fn need_subset(arg: &SubsetArg, stage: &str) -> Result<Vec<usize>> {
    arg.subset.clone().with_context(|| format!("{stage} needs --subset"))
}

/// Runs one subcommand and returns its one-paragraph summary.
pub fn run(cli: &Cli) -> Result<String> {
    configure_threads()?;
    let cfg = effective_config(&cli.global)?;
    if let Command::ShowConfig = cli.command {
        return Ok(cfg.serialize().trim_end().to_string());
    }
    let p = Pipeline::new(cfg)?;
    match &cli.command {
        Command::TrainBase => p.train_base(),
        Command::Iscv => p.iscv(),
        Command::Decompose => p.decompose(),
        Command::Transfer => p.transfer(),
        Command::Finetune => p.finetune(),
        Command::Eval(s) => p.eval(s.subset.as_deref()),
        Command::Subnet(s) => p.subnet(&need_subset(s, "subnet")?),
        Command::Sweep { cardinalities, combos } => p.sweep(cardinalities, *combos),
        Command::Metrics(s) => p.metrics(s.subset.as_deref()),
        Command::ExportDot => p.export_dot(),
        Command::ShowConfig => unreachable!(),
    }
}
