use anyhow::{bail, Context, Result};
use clap::Args;
use quasar_core::experiments::{compare_strategies, CompareSpec};

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long, value_delimiter = ',', default_value = "5,6")]
    seeds: Vec<u64>,
    /// Subset of strategies to run, by name. Defaults to all of them.
    #[arg(long, value_delimiter = ',')]
    strategies: Option<Vec<String>>,
    #[arg(long, default_value_t = 64)]
    batch_size: u64,
    #[arg(long, default_value_t = 2e-3)]
    learning_rate: f64,
    #[arg(long, default_value_t = 1)]
    epochs: u64,
    /// Plate held out for evaluation; defaults to the trailing shard.
    #[arg(long)]
    test_plate: Option<usize>,
}

pub fn run(cli: &crate::Cli, args: &TrainArgs) -> Result<serde_json::Value> {
    cli.single_rank_only("train")?;
    let store = cli.open_store()?;
    if args.seeds.is_empty() {
        bail!("--seeds must name at least one seed");
    }
    let mut spec = CompareSpec::desk_scale(args.seeds.clone());
    spec.batch_size = args.batch_size;
    spec.learning_rate = args.learning_rate;
    spec.epochs = args.epochs;
    if let Some(plate) = args.test_plate {
        spec.test_plate = plate;
    } else {
        spec.test_plate = store.manifest().shards.len().saturating_sub(1);
    }
    if let Some(names) = &args.strategies {
        let known: Vec<String> = spec.strategies.iter().map(|s| s.name.clone()).collect();
        for name in names {
            if !known.contains(name) {
                bail!(
                    "unknown strategy {name:?}; known strategies: {}",
                    known.join(", ")
                );
            }
        }
        spec.strategies.retain(|s| names.contains(&s.name));
    }
    let report = compare_strategies(&store, &spec).context("strategy comparison")?;
    crate::emit(cli.out.as_deref(), &report.to_csv())?;
    let mut summaries = Vec::new();
    for s in &report.summaries {
        eprintln!(
            "{:>18} {:>7}: macro-F1 {:.4} +/- {:.4} over {} runs",
            s.strategy, s.task, s.mean, s.std, s.runs
        );
        summaries.push(serde_json::json!({
            "strategy": s.strategy,
            "task": s.task,
            "mean_macro_f1": s.mean,
            "std_macro_f1": s.std,
            "runs": s.runs,
        }));
    }
    Ok(serde_json::json!({
        "command": "train",
        "runs": report.rows.len(),
        "summaries": summaries,
    }))
}
