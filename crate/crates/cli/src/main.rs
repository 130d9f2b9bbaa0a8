//! Command-line front end: synthetic store generation, throughput
//! benchmarks, entropy grids, invariant checks, and the classifier
//! strategy comparison. Each command emits one versioned CSV schema;
//! `--json` appends a one-line machine summary.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use quasar_core::store::Store;

mod bench;
mod entropy;
mod generate;
mod train;
mod validate;

#[derive(Parser)]
#[command(
    name = "quasar",
    version,
    about = "Out-of-core block sampling toolkit",
    after_help = "Environment overrides: QUASAR_RANK, QUASAR_WORLD_SIZE, and \
QUASAR_WORKERS stand in for --rank, --ranks, and --workers, mirroring the \
usual launcher conventions."
)]
pub struct Cli {
    /// Base seed; every derived stream is keyed off it.
    #[arg(long, global = true, default_value_t = 7)]
    pub seed: u64,
    /// Store manifest to operate on.
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,
    /// Output path: CSV file for bench/entropy/train, store directory for
    /// generate. Defaults to stdout (bench/entropy/train).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads per rank.
    #[arg(long, global = true, env = "QUASAR_WORKERS", default_value_t = 1)]
    pub workers: u64,
    /// Simulated rank count (world size).
    #[arg(long, global = true, env = "QUASAR_WORLD_SIZE", default_value_t = 1)]
    pub ranks: u64,
    /// This process's rank within the simulated world.
    #[arg(long, global = true, env = "QUASAR_RANK", default_value_t = 0)]
    pub rank: u64,
    /// Append a one-line JSON summary to stdout.
    #[arg(long, global = true)]
    pub json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a deterministic synthetic store and print its manifest path.
    Generate(generate::GenerateArgs),
    /// Measure pipeline throughput over a (block size, fetch factor) grid.
    Bench(bench::BenchArgs),
    /// Measure minibatch label entropy over a grid, with analytic bounds.
    Entropy(entropy::EntropyArgs),
    /// Run the invariant suites against fresh temporary fixtures.
    Validate(validate::ValidateArgs),
    /// Train linear probes under each loading strategy and report macro F1.
    Train(train::TrainArgs),
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let summary = match &cli.command {
        Command::Generate(args) => generate::run(&cli, args)?,
        Command::Bench(args) => bench::run(&cli, args)?,
        Command::Entropy(args) => entropy::run(&cli, args)?,
        Command::Validate(args) => validate::run(&cli, args)?,
        Command::Train(args) => train::run(&cli, args)?,
    };
    if cli.json {
        println!("{summary}");
    }
    Ok(())
}

impl Cli {
    fn require_manifest(&self) -> Result<&Path> {
        self.manifest
            .as_deref()
            .ok_or_else(|| anyhow::anyhow!("this command reads a store; pass --manifest PATH"))
    }

    fn open_store(&self) -> Result<Store> {
        let path = self.require_manifest()?;
        Store::open(path).with_context(|| format!("opening store manifest {}", path.display()))
    }

    fn single_rank_only(&self, command: &str) -> Result<()> {
        if self.ranks > 1 || self.rank > 0 {
            bail!("{command} is not rank-aware; --ranks/--rank apply to bench and validate");
        }
        Ok(())
    }
}

/// Writes `text` to `--out` when given, stdout otherwise.
fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(path) => std::fs::write(path, text)
            .with_context(|| format!("writing {}", path.display()))?,
        None => print!("{text}"),
    }
    Ok(())
}
