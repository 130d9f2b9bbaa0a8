use std::fmt::Write as _;
use std::path::Path;

use anyhow::{bail, Context, Result};
use clap::Args;
use quasar_core::dist::{assign_fetches, local_plan, shared_seed, Topology};
use quasar_core::rng::derive_seed;
use quasar_core::sampling::{build_plan, SamplerConfig, Strategy};
use quasar_core::store::synth::{generate, LabelScheme, SynthSpec, ValueModel};
use quasar_core::store::{Manifest, Store};
use quasar_core::theory::{simulate, LabelDistribution};

#[derive(Args)]
pub struct ValidateArgs {
    /// Randomized sampler configurations checked for exact epoch coverage.
    #[arg(long, default_value_t = 50)]
    coverage_cases: u64,
}

pub fn run(cli: &crate::Cli, args: &ValidateArgs) -> Result<serde_json::Value> {
    let mut lines = String::new();
    let mut failures: Vec<String> = Vec::new();
    let mut suites = 0u64;
    {
        let mut report = |name: &str, result: Result<()>| {
            suites += 1;
            match result {
                Ok(()) => {
                    let _ = writeln!(lines, "ok: {name}");
                }
                Err(e) => {
                    let _ = writeln!(lines, "FAIL: {name}: {e:#}");
                    failures.push(name.to_string());
                }
            }
        };
        report("epoch coverage", coverage_suite(cli.seed, args.coverage_cases));
        report("plan determinism", determinism_suite(cli.seed));
        report("store regeneration", regeneration_suite());
        report("partition sweep", partition_suite(cli.ranks, cli.workers));
        report(
            "rank plan agreement",
            rank_agreement_suite(cli.seed, cli.ranks.max(2)),
        );
        report("entropy sandwich", sandwich_suite(cli.seed));
        report("shard corruption detection", corruption_suite());
        if let Some(path) = &cli.manifest {
            report("store health", store_suite(path));
        }
    }
    crate::emit(cli.out.as_deref(), &lines)?;
    let summary = serde_json::json!({
        "command": "validate",
        "suites": suites,
        "passed": suites - failures.len() as u64,
        "failures": failures,
    });
    if !failures.is_empty() {
        bail!(
            "{} of {suites} validation suites failed: {}",
            failures.len(),
            failures.join(", ")
        );
    }
    Ok(summary)
}

fn coverage_suite(seed: u64, cases: u64) -> Result<()> {
    if cases == 0 {
        bail!("--coverage-cases must be positive");
    }
    for case in 0..cases {
        let pick = |tag: u64, lo: u64, span: u64| lo + derive_seed(seed, tag, case) % span;
        let cfg = SamplerConfig {
            n_rows: pick(1, 512, 8192),
            batch_size: pick(2, 1, 128),
            block_size: pick(3, 1, 512),
            fetch_factor: pick(4, 1, 8),
            seed: derive_seed(seed, 5, case),
            strategy: Strategy::BlockShuffling,
        };
        let epoch = pick(6, 0, 4);
        let plan = build_plan(&cfg, epoch)
            .with_context(|| format!("case {case}: plan for {cfg:?} epoch {epoch}"))?;
        let mut seen = vec![false; cfg.n_rows as usize];
        for fetch in &plan.fetches {
            for &idx in &fetch.indices {
                if idx >= cfg.n_rows {
                    bail!("case {case}: index {idx} out of range for {} rows", cfg.n_rows);
                }
                if seen[idx as usize] {
                    bail!("case {case}: index {idx} planned twice");
                }
                seen[idx as usize] = true;
            }
        }
        if let Some(missing) = seen.iter().position(|&s| !s) {
            bail!("case {case}: index {missing} never planned");
        }
    }
    Ok(())
}

fn determinism_suite(seed: u64) -> Result<()> {
    let cfg = SamplerConfig {
        n_rows: 16_384,
        batch_size: 32,
        block_size: 64,
        fetch_factor: 4,
        seed,
        strategy: Strategy::BlockShuffling,
    };
    let first = build_plan(&cfg, 0)?;
    let again = build_plan(&cfg, 0)?;
    if first != again {
        bail!("same seed and epoch produced different plans");
    }
    let next_epoch = build_plan(&cfg, 1)?;
    if first == next_epoch {
        bail!("epoch 1 reproduced the epoch 0 order");
    }
    Ok(())
}

fn tiny_spec(seed: u64) -> SynthSpec {
    SynthSpec {
        total_rows: 1920,
        n_cols: 32,
        seed,
        labels: LabelScheme::Plate,
        values: ValueModel::UniformNoise {
            nnz_min: 2,
            nnz_max: 4,
        },
    }
}

fn regeneration_suite() -> Result<()> {
    let spec = tiny_spec(11);
    let dir_a = tempfile::TempDir::new()?;
    let dir_b = tempfile::TempDir::new()?;
    let manifest_a = generate(dir_a.path(), &spec).context("first generation")?;
    let manifest_b = generate(dir_b.path(), &spec).context("second generation")?;
    if std::fs::read(&manifest_a)? != std::fs::read(&manifest_b)? {
        bail!("manifests differ between generations of the same spec");
    }
    let manifest = Manifest::load(&manifest_a)?;
    for shard in &manifest.shards {
        let bytes_a = std::fs::read(dir_a.path().join(&shard.path))?;
        let bytes_b = std::fs::read(dir_b.path().join(&shard.path))?;
        if bytes_a != bytes_b {
            bail!("shard {} differs between generations of the same spec", shard.path);
        }
    }
    Ok(())
}

fn partition_suite(cli_ranks: u64, cli_workers: u64) -> Result<()> {
    for ranks in 1..=4 {
        for workers in 1..=4 {
            for total in [1u64, 7, 10, 64, 100] {
                check_partition(ranks, workers, total)?;
            }
        }
    }
    check_partition(cli_ranks, cli_workers, 10)
}

fn check_partition(ranks: u64, workers: u64, total: u64) -> Result<()> {
    let at = |detail: String| format!("{ranks} ranks x {workers} workers over {total}: {detail}");
    let mut seen = vec![false; total as usize];
    for rank in 0..ranks {
        for worker in 0..workers {
            let topo = Topology {
                world_size: ranks,
                rank,
                workers_per_rank: workers,
                worker_id: worker,
            };
            for pos in assign_fetches(total, &topo)? {
                if pos >= total {
                    bail!(at(format!("fetch {pos} out of range")));
                }
                if seen[pos as usize] {
                    bail!(at(format!(
                        "fetch {pos} assigned twice (rank {rank} worker {worker})"
                    )));
                }
                seen[pos as usize] = true;
            }
        }
    }
    if let Some(orphan) = seen.iter().position(|&s| !s) {
        bail!(at(format!("fetch {orphan} never assigned")));
    }
    Ok(())
}

fn rank_agreement_suite(seed: u64, world: u64) -> Result<()> {
    let rank_seeds: Vec<u64> = (0..world).map(|r| derive_seed(seed, 77, r)).collect();
    let mut canonical: Option<Vec<u8>> = None;
    let mut owned: Vec<bool> = Vec::new();
    for rank in 0..world {
        let topo = Topology {
            world_size: world,
            rank,
            workers_per_rank: 1,
            worker_id: 0,
        };
        let shared = shared_seed(&topo, &rank_seeds)?;
        let cfg = SamplerConfig {
            n_rows: 8192,
            batch_size: 16,
            block_size: 32,
            fetch_factor: 4,
            seed: shared,
            strategy: Strategy::BlockShuffling,
        };
        let plan = build_plan(&cfg, 3)?;
        let bytes = plan.canonical_bytes();
        match &canonical {
            None => {
                owned = vec![false; plan.fetches.len()];
                canonical = Some(bytes);
            }
            Some(reference) if *reference != bytes => {
                bail!("rank {rank} derived a different global plan from the shared seed");
            }
            Some(_) => {}
        }
        for fetch in &local_plan(&plan, &topo)?.fetches {
            if owned[fetch.position as usize] {
                bail!("fetch {} claimed by two ranks", fetch.position);
            }
            owned[fetch.position as usize] = true;
        }
    }
    if let Some(orphan) = owned.iter().position(|&s| !s) {
        bail!("fetch {orphan} claimed by no rank");
    }
    Ok(())
}

fn sandwich_suite(seed: u64) -> Result<()> {
    let p = LabelDistribution::plate_mix();
    let m = 64;
    let n = 1536;
    for (b, f) in [(16u64, 1u64), (16, 64), (16, 256), (4, 16)] {
        let report = simulate(&p, m, b, f, n, derive_seed(seed, 9, b * 1000 + f))?;
        let Some(bounds) = &report.bounds else {
            bail!("simulation at b={b} f={f} reported no bounds");
        };
        let slack = 3.0 * report.std_error;
        if report.empirical_mean < bounds.lower - slack {
            bail!(
                "b={b} f={f}: mean {:.4} bits sits below the lower bound {:.4} by more than 3 SE",
                report.empirical_mean,
                bounds.lower
            );
        }
        if report.empirical_mean > bounds.upper + slack {
            bail!(
                "b={b} f={f}: mean {:.4} bits sits above the upper bound {:.4} by more than 3 SE",
                report.empirical_mean,
                bounds.upper
            );
        }
    }
    Ok(())
}

fn corruption_suite() -> Result<()> {
    let dir = tempfile::TempDir::new()?;
    let manifest_path = generate(dir.path(), &tiny_spec(13))?;
    let manifest = Manifest::load(&manifest_path)?;
    let shard_path = dir.path().join(&manifest.shards[0].path);
    let mut bytes = std::fs::read(&shard_path)?;
    bytes[128] ^= 0x01;
    std::fs::write(&shard_path, &bytes)?;
    match Store::open(&manifest_path) {
        Err(_) => Ok(()),
        Ok(_) => bail!("a flipped shard byte went unnoticed on open"),
    }
}

fn store_suite(manifest_path: &Path) -> Result<()> {
    let store = Store::open(manifest_path)
        .with_context(|| format!("opening store manifest {}", manifest_path.display()))?;
    let labeled: u64 = store.label_histogram().iter().sum();
    if labeled != store.total_rows() {
        bail!(
            "label histogram covers {labeled} rows but the store holds {}",
            store.total_rows()
        );
    }
    Ok(())
}
