//! Wall-clock throughput measurement.
//!
//! A run warms the pipeline for a fixed window, resets the store's I/O
//! counters, then measures rows per second over a second window. Plans
//! are rebuilt per epoch so long windows loop the store; with several
//! workers each thread walks its own share of the epoch's fetch sets
//! against the same store handle.

use std::sync::{Barrier, OnceLock};
use std::time::{Duration, Instant};

use crate::dist::{local_plan, DistError, Topology};
use crate::pipeline::{iterate, iterate_buffered_stream, CallbackSet, PipelineError};
use crate::sampling::{build_plan, SamplerConfig, Strategy};
use crate::store::Store;

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("bad bench config: {detail}")]
    Config { detail: String },
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Dist(#[from] DistError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug)]
pub struct BenchConfig {
    pub batch_size: u64,
    pub block_size: u64,
    pub fetch_factor: u64,
    pub strategy: Strategy,
    pub seed: u64,
    pub workers: u64,
    /// Simulated rank count; this process measures its own rank's share.
    pub world_size: u64,
    pub rank: u64,
    pub warmup: Duration,
    pub measure: Duration,
    /// Evict the store from the page cache before warmup, so the run
    /// starts cold instead of replaying yesterday's cache.
    pub drop_page_cache: bool,
}

impl BenchConfig {
    pub fn new(strategy: Strategy, block_size: u64, fetch_factor: u64) -> BenchConfig {
        BenchConfig {
            batch_size: 64,
            block_size,
            fetch_factor,
            strategy,
            seed: 1,
            workers: 1,
            world_size: 1,
            rank: 0,
            warmup: Duration::from_secs(3),
            measure: Duration::from_secs(12),
            drop_page_cache: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct BenchResult {
    pub strategy: &'static str,
    pub b: u64,
    pub f: u64,
    pub workers: u64,
    pub samples_per_sec: f64,
    pub range_reads: u64,
    pub rows_read: u64,
    pub bytes_read: u64,
    pub duration_secs: f64,
    /// Whether the store's on-disk size fits under MemTotal; `None` when
    /// the platform does not expose it.
    pub fits_in_ram: Option<bool>,
}

/// MemTotal from /proc/meminfo, in bytes.
pub fn mem_total_bytes() -> Option<u64> {
    let text = std::fs::read_to_string("/proc/meminfo").ok()?;
    let line = text.lines().find(|l| l.starts_with("MemTotal:"))?;
    let kb: u64 = line.split_whitespace().nth(1)?.parse().ok()?;
    Some(kb * 1024)
}

struct WorkerOutcome {
    rows: u64,
    finished: Instant,
}

fn worker_loop(
    store: &Store,
    cfg: &SamplerConfig,
    topo: Topology,
    warmup_deadline: Instant,
    measure: Duration,
    gate: &Barrier,
    measure_start: &OnceLock<Instant>,
) -> Result<WorkerOutcome, BenchError> {
    let callbacks = CallbackSet::default();
    let mut rows = 0u64;
    let mut measuring = false;
    let mut epoch = 0u64;
    'run: loop {
        let local;
        let plan;
        let mut block_stream;
        let mut buffered_stream;
        let stream: &mut dyn Iterator<Item = _> = match cfg.strategy {
            Strategy::StreamingBuffered { .. } => {
                buffered_stream = iterate_buffered_stream(store, cfg, epoch, &callbacks)?;
                &mut buffered_stream
            }
            _ => {
                plan = build_plan(cfg, epoch).map_err(PipelineError::from)?;
                local = if topo.world_size > 1 || topo.workers_per_rank > 1 {
                    Some(local_plan(&plan, &topo)?)
                } else {
                    None
                };
                block_stream = iterate(local.as_ref().unwrap_or(&plan), store, cfg, &callbacks);
                &mut block_stream
            }
        };
        for batch in stream {
            let batch = batch?;
            let now = Instant::now();
            if !measuring {
                if now >= warmup_deadline {
                    let leader = gate.wait().is_leader();
                    if leader {
                        store.reset_io_counters();
                        let _ = measure_start.set(Instant::now());
                    } else {
                        // reset happens on the leader; wait for it
                        while measure_start.get().is_none() {
                            std::hint::spin_loop();
                        }
                    }
                    measuring = true;
                }
                continue;
            }
            rows += batch.source_indices.len() as u64;
            if now >= *measure_start.get().expect("measure window started") + measure {
                break 'run;
            }
        }
        epoch += 1;
    }
    Ok(WorkerOutcome {
        rows,
        finished: Instant::now(),
    })
}

/// Streams the store under `cfg`, discarding payloads, and reports the
/// measured-window rate. The payload path is the real one (backend read,
/// payload assembly, reshuffle); only consumption is a no-op.
pub fn run_throughput(store: &Store, cfg: &BenchConfig) -> Result<BenchResult, BenchError> {
    if cfg.workers == 0 {
        return Err(BenchError::Config {
            detail: "workers must be at least 1".into(),
        });
    }
    if (cfg.workers > 1 || cfg.world_size > 1)
        && matches!(cfg.strategy, Strategy::StreamingBuffered { .. })
    {
        return Err(BenchError::Config {
            detail: "buffered streaming benches single-worker, single-rank".into(),
        });
    }
    Topology {
        world_size: cfg.world_size,
        rank: cfg.rank,
        workers_per_rank: cfg.workers,
        worker_id: 0,
    }
    .validate()?;
    let scfg = SamplerConfig {
        n_rows: store.total_rows(),
        batch_size: cfg.batch_size,
        block_size: cfg.block_size,
        fetch_factor: cfg.fetch_factor,
        seed: cfg.seed,
        strategy: cfg.strategy.clone(),
    };
    scfg.validate().map_err(PipelineError::from)?;
    if cfg.drop_page_cache {
        store.drop_page_cache()?;
    }

    let warmup_deadline = Instant::now() + cfg.warmup;
    let gate = Barrier::new(cfg.workers as usize);
    let measure_start: OnceLock<Instant> = OnceLock::new();
    let outcomes: Vec<Result<WorkerOutcome, BenchError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..cfg.workers)
            .map(|w| {
                let topo = Topology {
                    world_size: cfg.world_size,
                    rank: cfg.rank,
                    workers_per_rank: cfg.workers,
                    worker_id: w,
                };
                let (scfg, gate, measure_start) = (&scfg, &gate, &measure_start);
                scope.spawn(move || {
                    worker_loop(
                        store,
                        scfg,
                        topo,
                        warmup_deadline,
                        cfg.measure,
                        gate,
                        measure_start,
                    )
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("bench worker panicked"))
            .collect()
    });

    let started = *measure_start.get().expect("measure window never started");
    let mut rows = 0u64;
    let mut finished = started;
    for outcome in outcomes {
        let outcome = outcome?;
        rows += outcome.rows;
        finished = finished.max(outcome.finished);
    }
    let window = (finished - started).as_secs_f64();
    let counters = store.io_counters();
    Ok(BenchResult {
        strategy: cfg.strategy.name(),
        b: cfg.block_size,
        f: cfg.fetch_factor,
        workers: cfg.workers,
        samples_per_sec: rows as f64 / window.max(1e-9),
        range_reads: counters.range_reads,
        rows_read: counters.rows_read,
        bytes_read: counters.bytes_read,
        duration_secs: (finished - (warmup_deadline - cfg.warmup)).as_secs_f64(),
        fits_in_ram: mem_total_bytes().map(|ram| store.disk_bytes() <= ram),
    })
}
