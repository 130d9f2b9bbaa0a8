use anyhow::{bail, Context, Result};
use clap::Args;
use quasar_core::pipeline::{iterate, CallbackSet, PART_LABELS};
use quasar_core::sampling::{build_plan, SamplerConfig, Strategy};
use quasar_core::theory::{bounds, measure_pipeline_entropy, LabelDistribution};

#[derive(Args)]
pub struct EntropyArgs {
    #[arg(long, default_value_t = 64)]
    batch_size: u64,
    #[arg(long, value_delimiter = ',', default_value = "1,4,16,64,256,1024")]
    blocks: Vec<u64>,
    #[arg(long, value_delimiter = ',', default_value = "1,16,256")]
    fetch_factors: Vec<u64>,
    /// Minibatches measured per grid cell.
    #[arg(long, default_value_t = 512)]
    n_batches: u64,
}

pub fn run(cli: &crate::Cli, args: &EntropyArgs) -> Result<serde_json::Value> {
    cli.single_rank_only("entropy")?;
    let store = cli.open_store()?;
    if args.blocks.is_empty() || args.fetch_factors.is_empty() {
        bail!("--blocks and --fetch-factors must name at least one value");
    }
    if args.n_batches == 0 {
        bail!("--n-batches must be positive");
    }
    let p = LabelDistribution::from_counts(&store.label_histogram())
        .context("label distribution of the store")?;

    let mut csv = String::from("# schema: entropy/v1\n");
    csv.push_str("b,f,batch_size,n_batches,mean_bits,std_bits,se_bits,h_p_bits,lower_bits,upper_bits,sandwich\n");
    let mut violations = 0u64;
    for &b in &args.blocks {
        for &f in &args.fetch_factors {
            let cfg = SamplerConfig {
                n_rows: store.total_rows(),
                batch_size: args.batch_size,
                block_size: b,
                fetch_factor: f,
                seed: cli.seed,
                strategy: Strategy::BlockShuffling,
            };
            let plan = build_plan(&cfg, 0).with_context(|| format!("cell b={b} f={f}"))?;
            let callbacks = CallbackSet::default();
            let stream = iterate(&plan, &store, &cfg, &callbacks);
            let report = measure_pipeline_entropy(stream, PART_LABELS, args.n_batches)
                .with_context(|| format!("cell b={b} f={f}"))?;
            let cell_bounds = if b <= args.batch_size {
                Some(bounds(&p, args.batch_size, b)?)
            } else {
                None
            };
            let (lower, upper, flag) = match &cell_bounds {
                Some(bd) => {
                    let slack = 3.0 * report.std_error;
                    let flag = if report.empirical_mean < bd.lower - slack {
                        "low"
                    } else if report.empirical_mean > bd.upper + slack {
                        "high"
                    } else {
                        "ok"
                    };
                    (format!("{:.6}", bd.lower), format!("{:.6}", bd.upper), flag)
                }
                None => (String::new(), String::new(), "-"),
            };
            if flag == "low" || flag == "high" {
                violations += 1;
                eprintln!(
                    "sandwich violation at b={b} f={f}: mean {:.4} outside [{lower}, {upper}] by more than 3 SE",
                    report.empirical_mean
                );
            }
            csv.push_str(&format!(
                "{b},{f},{},{},{:.6},{:.6},{:.6},{:.6},{lower},{upper},{flag}\n",
                args.batch_size,
                report.n_minibatches,
                report.empirical_mean,
                report.empirical_std,
                report.std_error,
                p.entropy_bits(),
            ));
        }
    }
    crate::emit(cli.out.as_deref(), &csv)?;
    Ok(serde_json::json!({
        "command": "entropy",
        "cells": args.blocks.len() * args.fetch_factors.len(),
        "h_p_bits": p.entropy_bits(),
        "sandwich_violations": violations,
    }))
}
