//! Fetch partitioning across ranks and workers.
//!
//! Two-level round-robin: rank `r` of `R` owns fetch positions
//! `{r, r+R, r+2R, ...}`, and worker `w` of `W` owns every `W`-th entry
//! of its rank's list. Every rank builds the identical global plan from a
//! seed broadcast by rank 0 (modeled in-process; the contract is index
//! arithmetic and seeding, which needs no network), then carves out its
//! share with [`IndexPlan::subset`]. Per-fetch shuffle seeds derive from
//! the global fetch position, so a minibatch is byte-identical no matter
//! which worker produced it.

use std::sync::mpsc::{Receiver, SyncSender};
use std::thread::JoinHandle;

use crate::pipeline::{Minibatch, PipelineError};
use crate::sampling::IndexPlan;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Topology {
    pub world_size: u64,
    pub rank: u64,
    pub workers_per_rank: u64,
    pub worker_id: u64,
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum DistError {
    #[error("topology invalid: {detail}")]
    InvalidTopology { detail: String },
    #[error("expected one seed per rank ({expected}), got {got}")]
    SeedCount { expected: u64, got: usize },
}

impl Topology {
    pub fn single() -> Topology {
        Topology {
            world_size: 1,
            rank: 0,
            workers_per_rank: 1,
            worker_id: 0,
        }
    }

    pub fn validate(&self) -> Result<(), DistError> {
        let fail = |detail: String| Err(DistError::InvalidTopology { detail });
        if self.world_size == 0 {
            return fail("world_size must be at least 1".into());
        }
        if self.rank >= self.world_size {
            return fail(format!(
                "rank {} out of range for world_size {}",
                self.rank, self.world_size
            ));
        }
        if self.workers_per_rank == 0 {
            return fail("workers_per_rank must be at least 1".into());
        }
        if self.worker_id >= self.workers_per_rank {
            return fail(format!(
                "worker {} out of range for {} workers",
                self.worker_id, self.workers_per_rank
            ));
        }
        Ok(())
    }

    /// The same process position with a different worker id.
    pub fn with_worker(&self, worker_id: u64) -> Topology {
        Topology { worker_id, ..*self }
    }
}

/// Fetch positions owned by `topo`, ascending.
pub fn assign_fetches(total_fetches: u64, topo: &Topology) -> Result<Vec<u64>, DistError> {
    topo.validate()?;
    let mut out = Vec::new();
    let mut pos = topo.rank;
    let mut nth = 0u64;
    while pos < total_fetches {
        if nth % topo.workers_per_rank == topo.worker_id {
            out.push(pos);
        }
        pos += topo.world_size;
        nth += 1;
    }
    Ok(out)
}

/// Broadcast of rank 0's seed: every rank adopts `rank_seeds[0]` and so
/// builds the same global plan. `rank_seeds` holds each rank's local seed,
/// one per rank (the in-process stand-in for the collective).
pub fn shared_seed(topo: &Topology, rank_seeds: &[u64]) -> Result<u64, DistError> {
    topo.validate()?;
    if rank_seeds.len() as u64 != topo.world_size {
        return Err(DistError::SeedCount {
            expected: topo.world_size,
            got: rank_seeds.len(),
        });
    }
    Ok(rank_seeds[0])
}

/// This topology's slice of a global plan.
pub fn local_plan(global: &IndexPlan, topo: &Topology) -> Result<IndexPlan, DistError> {
    let positions = assign_fetches(global.fetches.len() as u64, topo)?;
    Ok(global.subset(&positions))
}

/// All minibatches of one fetch, kept together so the merge can
/// round-robin at fetch granularity.
pub type FetchBundle = Result<Vec<Minibatch>, PipelineError>;

/// Groups a minibatch stream into per-fetch bundles and pushes them into
/// `tx`, stopping on stream end, stream error (forwarded), or a dropped
/// receiver. The worker side of [`merge_streams`].
pub fn send_fetch_bundles<I>(stream: I, tx: &SyncSender<FetchBundle>)
where
    I: Iterator<Item = Result<Minibatch, PipelineError>>,
{
    let mut bundle: Vec<Minibatch> = Vec::new();
    for item in stream {
        match item {
            Ok(batch) => {
                if let Some(last) = bundle.last() {
                    if last.fetch_position != batch.fetch_position {
                        let full = std::mem::take(&mut bundle);
                        if tx.send(Ok(full)).is_err() {
                            return;
                        }
                    }
                }
                bundle.push(batch);
            }
            Err(e) => {
                let _ = tx.send(Err(e));
                return;
            }
        }
    }
    if !bundle.is_empty() {
        let _ = tx.send(Ok(bundle));
    }
}

type WorkerFn = Box<dyn FnOnce(SyncSender<FetchBundle>) + Send>;

/// Runs worker closures on their own threads and merges their bundles
/// round-robin in worker order, which equals ascending global fetch
/// position when workers were assigned by [`assign_fetches`]. Each worker
/// sends one bundle per fetch through a bounded queue of `prefetch`
/// bundles, so producers stay at most `prefetch` fetches ahead. A worker
/// error aborts the merged stream after it is yielded.
pub struct MergedStream {
    lanes: Vec<Lane>,
    cursor: usize,
    pending: std::vec::IntoIter<Minibatch>,
    failed: bool,
}

struct Lane {
    rx: Receiver<FetchBundle>,
    handle: Option<JoinHandle<()>>,
    open: bool,
}

pub fn merge_streams(workers: Vec<WorkerFn>, prefetch: usize) -> MergedStream {
    let lanes = workers
        .into_iter()
        .map(|worker| {
            let (tx, rx) = std::sync::mpsc::sync_channel(prefetch.max(1));
            let handle = std::thread::spawn(move || worker(tx));
            Lane {
                rx,
                handle: Some(handle),
                open: true,
            }
        })
        .collect();
    MergedStream {
        lanes,
        cursor: 0,
        pending: Vec::new().into_iter(),
        failed: false,
    }
}

impl MergedStream {
    fn next_bundle(&mut self) -> Option<FetchBundle> {
        let n = self.lanes.len();
        let mut seen = 0;
        while seen < n {
            let lane = &mut self.lanes[self.cursor];
            if lane.open {
                match lane.rx.recv() {
                    Ok(bundle) => {
                        self.cursor = (self.cursor + 1) % n;
                        return Some(bundle);
                    }
                    Err(_) => {
                        lane.open = false;
                        if let Some(h) = lane.handle.take() {
                            let _ = h.join();
                        }
                    }
                }
            }
            self.cursor = (self.cursor + 1) % n;
            seen += 1;
        }
        None
    }
}

impl Iterator for MergedStream {
    type Item = Result<Minibatch, PipelineError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        loop {
            if let Some(batch) = self.pending.next() {
                return Some(Ok(batch));
            }
            match self.next_bundle()? {
                Ok(bundle) => {
                    self.pending = bundle.into_iter();
                }
                Err(e) => {
                    self.failed = true;
                    return Some(Err(e));
                }
            }
        }
    }
}

impl Drop for MergedStream {
    fn drop(&mut self) {
        for lane in &mut self.lanes {
            // closing the receiver unblocks the producer's send
            lane.open = false;
        }
        let receivers: Vec<Receiver<FetchBundle>> = self
            .lanes
            .iter_mut()
            .map(|lane| {
                let (_, dummy) = std::sync::mpsc::sync_channel(1);
                std::mem::replace(&mut lane.rx, dummy)
            })
            .collect();
        drop(receivers);
        for lane in &mut self.lanes {
            if let Some(h) = lane.handle.take() {
                let _ = h.join();
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::{iterate, Backend, CallbackSet};
    use crate::sampling::{build_plan, SamplerConfig, Strategy};
    use crate::store::{RowBlock, RowRange, StoreError};
    use std::sync::Arc;

    struct MemBackend {
        n_rows: u64,
    }

    impl Backend for MemBackend {
        fn total_rows(&self) -> u64 {
            self.n_rows
        }
        fn read_rows(&self, ranges: &[RowRange]) -> Result<RowBlock, StoreError> {
            let mut block = RowBlock::default();
            block.indptr.push(0);
            for r in ranges {
                for row in r.start..r.end {
                    block.cols.push(0);
                    block.vals.push(row as f32);
                    block.indptr.push(block.cols.len() as u64);
                    block.labels.push(0);
                    block.plates.push(0);
                    block.row_ids.push(row);
                }
            }
            Ok(block)
        }
    }

    fn topo(world_size: u64, rank: u64, workers: u64, worker: u64) -> Topology {
        Topology {
            world_size,
            rank,
            workers_per_rank: workers,
            worker_id: worker,
        }
    }

    #[test]
    fn ranks_interleave_fetch_positions() {
        let rank0 = assign_fetches(100, &topo(4, 0, 1, 0)).unwrap();
        assert_eq!(rank0[..3], [0, 4, 8]);
        assert_eq!(*rank0.last().unwrap(), 96);
        assert_eq!(rank0.len(), 25);
        let rank1 = assign_fetches(100, &topo(4, 1, 1, 0)).unwrap();
        assert_eq!(rank1[..3], [1, 5, 9]);
        assert_eq!(*rank1.last().unwrap(), 97);
    }

    #[test]
    fn trivial_topology_is_identity() {
        let got = assign_fetches(7, &topo(1, 0, 1, 0)).unwrap();
        assert_eq!(got, vec![0, 1, 2, 3, 4, 5, 6]);
    }

    #[test]
    fn workers_split_their_ranks_list_round_robin() {
        // rank 1 of 3 owns {1, 4, 7, 10, 13}; two workers alternate
        let w0 = assign_fetches(14, &topo(3, 1, 2, 0)).unwrap();
        let w1 = assign_fetches(14, &topo(3, 1, 2, 1)).unwrap();
        assert_eq!(w0, vec![1, 7, 13]);
        assert_eq!(w1, vec![4, 10]);
    }

    #[test]
    fn assignment_partitions_fetch_range() {
        for (world, workers, total) in [(3u64, 2u64, 14u64), (4, 3, 100), (5, 1, 7), (2, 4, 9)] {
            let mut all = Vec::new();
            for rank in 0..world {
                for worker in 0..workers {
                    all.extend(
                        assign_fetches(total, &topo(world, rank, workers, worker)).unwrap(),
                    );
                }
            }
            all.sort_unstable();
            assert_eq!(all, (0..total).collect::<Vec<_>>());
        }
    }

    #[test]
    fn invalid_topologies_are_rejected() {
        assert!(topo(0, 0, 1, 0).validate().is_err());
        assert!(topo(2, 2, 1, 0).validate().is_err());
        assert!(topo(2, 0, 0, 0).validate().is_err());
        assert!(topo(2, 0, 2, 2).validate().is_err());
        assert!(topo(2, 1, 2, 1).validate().is_ok());
    }

    #[test]
    fn broadcast_makes_all_ranks_adopt_rank_zero() {
        let seeds = [42u64, 7, 9, 1];
        for rank in 0..4 {
            let effective = shared_seed(&topo(4, rank, 1, 0), &seeds).unwrap();
            assert_eq!(effective, 42);
        }
        assert_eq!(shared_seed(&topo(1, 0, 1, 0), &[5]).unwrap(), 5);
        assert!(matches!(
            shared_seed(&topo(4, 0, 1, 0), &[1, 2]),
            Err(DistError::SeedCount { .. })
        ));
    }

    #[test]
    fn ranks_build_identical_plans_and_disjoint_row_sets() {
        let seeds = [42u64, 7, 9, 1];
        let mut canon: Option<Vec<u8>> = None;
        let mut rows: Vec<u64> = Vec::new();
        for rank in 0..4u64 {
            let t = topo(4, rank, 1, 0);
            let cfg = SamplerConfig {
                n_rows: 1000,
                batch_size: 8,
                block_size: 16,
                fetch_factor: 4,
                seed: shared_seed(&t, &seeds).unwrap(),
                strategy: Strategy::BlockShuffling,
            };
            let plan = build_plan(&cfg, 0).unwrap();
            let bytes = plan.canonical_bytes();
            match &canon {
                Some(c) => assert_eq!(c, &bytes, "rank {rank} built a different plan"),
                None => canon = Some(bytes),
            }
            let local = local_plan(&plan, &t).unwrap();
            rows.extend(local.fetches.iter().flat_map(|f| f.indices.iter().copied()));
        }
        rows.sort_unstable();
        assert_eq!(rows, (0..1000).collect::<Vec<_>>());
    }

    fn run_merged(n: u64, m: u64, f: u64, workers: u64, prefetch: usize) -> Vec<Minibatch> {
        let backend = Arc::new(MemBackend { n_rows: n });
        let cfg = SamplerConfig {
            n_rows: n,
            batch_size: m,
            block_size: 4,
            fetch_factor: f,
            seed: 7,
            strategy: Strategy::BlockShuffling,
        };
        let plan = build_plan(&cfg, 0).unwrap();
        let mut closures: Vec<WorkerFn> = Vec::new();
        for w in 0..workers {
            let t = topo(1, 0, workers, w);
            let local = local_plan(&plan, &t).unwrap();
            let backend = Arc::clone(&backend);
            let cfg = cfg.clone();
            closures.push(Box::new(move |tx| {
                let callbacks = CallbackSet::default();
                let stream = iterate(&local, &*backend, &cfg, &callbacks);
                send_fetch_bundles(stream, &tx);
            }));
        }
        merge_streams(closures, prefetch)
            .map(|r| r.unwrap())
            .collect()
    }

    #[test]
    fn merged_stream_equals_sequential_iteration() {
        let backend = MemBackend { n_rows: 210 };
        let cfg = SamplerConfig {
            n_rows: 210,
            batch_size: 8,
            block_size: 4,
            fetch_factor: 2,
            seed: 7,
            strategy: Strategy::BlockShuffling,
        };
        let plan = build_plan(&cfg, 0).unwrap();
        let callbacks = CallbackSet::default();
        let reference: Vec<Minibatch> = iterate(&plan, &backend, &cfg, &callbacks)
            .map(|r| r.unwrap())
            .collect();
        for workers in [1u64, 2, 3] {
            let merged = run_merged(210, 8, 2, workers, 2);
            assert_eq!(merged.len(), reference.len());
            for (a, b) in merged.iter().zip(&reference) {
                assert_eq!(a.fetch_position, b.fetch_position);
                assert_eq!(a.source_indices, b.source_indices);
                assert_eq!(a.payload, b.payload);
            }
        }
    }

    #[test]
    fn merged_positions_ascend_and_cover() {
        let merged = run_merged(100, 4, 3, 3, 1);
        let mut positions: Vec<u64> = merged.iter().map(|b| b.fetch_position).collect();
        positions.dedup();
        let sorted = {
            let mut p = positions.clone();
            p.sort_unstable();
            p
        };
        assert_eq!(positions, sorted, "fetch positions must ascend");
        assert_eq!(positions, (0..9).collect::<Vec<_>>());
        let mut rows: Vec<u64> = merged
            .iter()
            .flat_map(|b| b.source_indices.iter().copied())
            .collect();
        rows.sort_unstable();
        assert_eq!(rows, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn failed_worker_aborts_merge() {
        let ok_worker: WorkerFn = Box::new(|tx| {
            let batch = Minibatch {
                payload: crate::pipeline::MultiPayload::new(),
                source_indices: vec![0],
                fetch_position: 0,
            };
            let _ = tx.send(Ok(vec![batch]));
        });
        let bad_worker: WorkerFn = Box::new(|tx| {
            let _ = tx.send(Err(PipelineError::FetchShape {
                fetch_position: 1,
                expected: 4,
                got: 0,
            }));
        });
        let mut merged = merge_streams(vec![ok_worker, bad_worker], 1);
        assert!(matches!(merged.next(), Some(Ok(_))));
        assert!(matches!(
            merged.next(),
            Some(Err(PipelineError::FetchShape { .. }))
        ));
        assert!(merged.next().is_none(), "merge must fuse after failure");
    }

    #[test]
    fn dropping_the_merge_does_not_wedge_producers() {
        let merged = run_merged(200, 4, 1, 2, 1);
        drop(merged);
        // run_merged consumed everything; now drop mid-stream
        let backend = Arc::new(MemBackend { n_rows: 400 });
        let cfg = SamplerConfig {
            n_rows: 400,
            batch_size: 4,
            block_size: 4,
            fetch_factor: 1,
            seed: 7,
            strategy: Strategy::Streaming,
        };
        let plan = build_plan(&cfg, 0).unwrap();
        let mut closures: Vec<WorkerFn> = Vec::new();
        for w in 0..2u64 {
            let t = topo(1, 0, 2, w);
            let local = local_plan(&plan, &t).unwrap();
            let backend = Arc::clone(&backend);
            let cfg = cfg.clone();
            closures.push(Box::new(move |tx| {
                let callbacks = CallbackSet::default();
                let stream = iterate(&local, &*backend, &cfg, &callbacks);
                send_fetch_bundles(stream, &tx);
            }));
        }
        let mut merged = merge_streams(closures, 1);
        assert!(merged.next().is_some());
        drop(merged);
    }
}
