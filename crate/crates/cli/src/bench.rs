use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};
use quasar_core::bench::{run_throughput, BenchConfig, BenchResult};
use quasar_core::sampling::Strategy;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum StrategyKind {
    Streaming,
    StreamingBuffered,
    BlockShuffling,
}

#[derive(Args)]
pub struct BenchArgs {
    #[arg(long, default_value_t = 64)]
    batch_size: u64,
    /// Block sizes to sweep.
    #[arg(long, value_delimiter = ',', default_value = "1,4,16,64,256,1024")]
    blocks: Vec<u64>,
    /// Fetch factors to sweep.
    #[arg(long, value_delimiter = ',', default_value = "1,64")]
    fetch_factors: Vec<u64>,
    #[arg(long, value_enum, default_value_t = StrategyKind::BlockShuffling)]
    strategy: StrategyKind,
    /// Shuffle window for streaming-buffered; defaults to 256 batches.
    #[arg(long)]
    buffer_rows: Option<u64>,
    #[arg(long, default_value_t = 3.0)]
    warmup_secs: f64,
    #[arg(long, default_value_t = 12.0)]
    measure_secs: f64,
    /// Evict the store from the page cache before each cell. Without it
    /// the OS cache can mask most of the I/O cost being measured.
    #[arg(long)]
    drop_page_cache_hint: bool,
}

fn csv_row(r: &BenchResult) -> String {
    let fits = match r.fits_in_ram {
        Some(v) => v.to_string(),
        None => String::new(),
    };
    format!(
        "{},{},{},{},{:.1},{},{},{},{:.3},{}",
        r.strategy,
        r.b,
        r.f,
        r.workers,
        r.samples_per_sec,
        r.range_reads,
        r.rows_read,
        r.bytes_read,
        r.duration_secs,
        fits
    )
}

pub fn run(cli: &crate::Cli, args: &BenchArgs) -> Result<serde_json::Value> {
    let store = cli.open_store()?;
    if args.blocks.is_empty() || args.fetch_factors.is_empty() {
        bail!("--blocks and --fetch-factors must name at least one value");
    }
    for window in [args.warmup_secs, args.measure_secs] {
        if !window.is_finite() || window <= 0.0 {
            bail!("--warmup-secs and --measure-secs must be positive");
        }
    }
    let strategy = |kind: StrategyKind| -> Strategy {
        match kind {
            StrategyKind::Streaming => Strategy::Streaming,
            StrategyKind::StreamingBuffered => Strategy::StreamingBuffered {
                buffer_rows: args.buffer_rows.unwrap_or(256 * args.batch_size),
            },
            StrategyKind::BlockShuffling => Strategy::BlockShuffling,
        }
    };
    let mut cells: Vec<(String, Strategy, u64, u64)> = Vec::new();
    for &b in &args.blocks {
        for &f in &args.fetch_factors {
            cells.push(("grid".into(), strategy(args.strategy), b, f));
        }
    }
    let covered = |s: &Strategy, b: u64, f: u64, list: &[(String, Strategy, u64, u64)]| {
        list.iter()
            .any(|(_, cs, cb, cf)| cs.name() == s.name() && *cb == b && *cf == f)
    };
    if !covered(&Strategy::BlockShuffling, 1, 1, &cells) {
        cells.push(("random_baseline".into(), Strategy::BlockShuffling, 1, 1));
    }
    if !covered(&Strategy::Streaming, 1, 1, &cells) {
        cells.push(("streaming_baseline".into(), Strategy::Streaming, 1, 1));
    }

    let mut results: Vec<(String, BenchResult)> = Vec::new();
    for (role, strat, b, f) in cells {
        let cfg = BenchConfig {
            batch_size: args.batch_size,
            block_size: b,
            fetch_factor: f,
            strategy: strat,
            seed: cli.seed,
            workers: cli.workers,
            world_size: cli.ranks,
            rank: cli.rank,
            warmup: Duration::from_secs_f64(args.warmup_secs),
            measure: Duration::from_secs_f64(args.measure_secs),
            drop_page_cache: args.drop_page_cache_hint,
        };
        let res = run_throughput(&store, &cfg)
            .with_context(|| format!("bench cell b={b} f={f}"))?;
        eprintln!(
            "{role:<18} {:<18} b={b:<6} f={f:<5} {:>12.0} rows/s",
            res.strategy, res.samples_per_sec
        );
        results.push((role, res));
    }

    let random_rate = results
        .iter()
        .find(|(_, r)| r.strategy == "block_shuffling" && r.b == 1 && r.f == 1)
        .map(|(_, r)| r.samples_per_sec)
        .unwrap_or(f64::NAN);
    let streaming_rate = results
        .iter()
        .find(|(_, r)| r.strategy == "streaming" && r.f == 1)
        .map(|(_, r)| r.samples_per_sec);

    let mut csv = String::from("# schema: bench/v1\n");
    csv.push_str(
        "strategy,b,f,workers,samples_per_sec,range_reads,rows_read,bytes_read,duration_secs,fits_in_ram,speedup_vs_random\n",
    );
    for (_, r) in &results {
        let speedup = r.samples_per_sec / random_rate;
        csv.push_str(&format!("{},{speedup:.3}\n", csv_row(r)));
    }
    crate::emit(cli.out.as_deref(), &csv)?;

    let max = results
        .iter()
        .map(|(_, r)| r.samples_per_sec)
        .fold(f64::NAN, f64::max);
    Ok(serde_json::json!({
        "command": "bench",
        "cells": results.len(),
        "random_baseline_rows_per_sec": random_rate,
        "streaming_baseline_rows_per_sec": streaming_rate,
        "max_rows_per_sec": max,
        "max_speedup_vs_random": max / random_rate,
        "store_fits_in_ram": results.first().and_then(|(_, r)| r.fits_in_ram),
    }))
}
