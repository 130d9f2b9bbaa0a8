//! Epoch plan construction.
//!
//! An epoch over `n` rows is described by an [`IndexPlan`]: the full index
//! range carved into contiguous blocks of `block_size` rows, the blocks
//! ordered by the active strategy, and the concatenated order split into
//! fetch sets of `batch_size * fetch_factor` indices. Plans are pure data;
//! they can be built on any machine and compared byte for byte. All
//! randomness is drawn from [`crate::rng`] streams keyed by
//! `(seed, epoch)`, so a `(config, epoch)` pair pins the plan exactly.

use std::sync::Arc;

use crate::rng::{self, derive_seed, rng_from_seed, WeightedSampler};

/// Row-order strategies.
///
/// `Streaming` and `StreamingBuffered` keep on-disk order at the plan level;
/// the buffered variant mixes rows at iteration time through a shuffle
/// buffer (see the pipeline module). `BlockShuffling` permutes whole blocks.
/// The weighted variants order blocks by sequential weighted sampling
/// without replacement, so an epoch still covers every row exactly once but
/// heavy blocks surface earlier.
#[derive(Clone, Debug)]
pub enum Strategy {
    Streaming,
    StreamingBuffered { buffer_rows: u64 },
    BlockShuffling,
    BlockWeighted { row_weights: Arc<Vec<f64>> },
    ClassBalanced { row_labels: Arc<Vec<u16>> },
}

impl Strategy {
    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Streaming => "streaming",
            Strategy::StreamingBuffered { .. } => "streaming_buffered",
            Strategy::BlockShuffling => "block_shuffling",
            Strategy::BlockWeighted { .. } => "block_weighted",
            Strategy::ClassBalanced { .. } => "class_balanced",
        }
    }
}

#[derive(Clone, Debug)]
pub struct SamplerConfig {
    pub n_rows: u64,
    /// Minibatch size (`m`).
    pub batch_size: u64,
    /// Contiguous block size (`b`).
    pub block_size: u64,
    /// Minibatches fetched together (`f`).
    pub fetch_factor: u64,
    pub seed: u64,
    pub strategy: Strategy,
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ConfigError {
    #[error("{field} must be at least 1")]
    ZeroField { field: &'static str },
    #[error("strategy data covers {got} rows but the config declares {expected}")]
    RowMismatch { expected: u64, got: u64 },
    #[error("row weights must be finite and non-negative (index {index})")]
    BadWeight { index: usize },
    #[error("fetch size batch_size * fetch_factor overflows")]
    FetchOverflow,
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        for (field, v) in [
            ("n_rows", self.n_rows),
            ("batch_size", self.batch_size),
            ("block_size", self.block_size),
            ("fetch_factor", self.fetch_factor),
        ] {
            if v == 0 {
                return Err(ConfigError::ZeroField { field });
            }
        }
        self.batch_size
            .checked_mul(self.fetch_factor)
            .ok_or(ConfigError::FetchOverflow)?;
        match &self.strategy {
            Strategy::StreamingBuffered { buffer_rows } if *buffer_rows == 0 => {
                return Err(ConfigError::ZeroField { field: "buffer_rows" });
            }
            Strategy::BlockWeighted { row_weights } => {
                if row_weights.len() as u64 != self.n_rows {
                    return Err(ConfigError::RowMismatch {
                        expected: self.n_rows,
                        got: row_weights.len() as u64,
                    });
                }
                if let Some(index) = row_weights
                    .iter()
                    .position(|w| !w.is_finite() || *w < 0.0)
                {
                    return Err(ConfigError::BadWeight { index });
                }
            }
            Strategy::ClassBalanced { row_labels }
                if row_labels.len() as u64 != self.n_rows =>
            {
                return Err(ConfigError::RowMismatch {
                    expected: self.n_rows,
                    got: row_labels.len() as u64,
                });
            }
            _ => {}
        }
        Ok(())
    }

    /// Rows per fetch set (`m * f`).
    pub fn fetch_rows(&self) -> u64 {
        self.batch_size * self.fetch_factor
    }

    /// Number of blocks covering the index range.
    pub fn block_count(&self) -> u64 {
        self.n_rows.div_ceil(self.block_size)
    }
}

/// Distinct blocks a single fetch set can touch:
/// `ceil(m*f / b)`, capped by the number of blocks that exist.
pub fn blocks_per_fetch(cfg: &SamplerConfig) -> u64 {
    let per_fetch = cfg.fetch_rows().div_ceil(cfg.block_size);
    per_fetch.min(cfg.block_count())
}

/// One fetch set: the indices loaded from disk together.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FetchIndexSet {
    /// Position of this fetch within the epoch, starting at 0.
    pub position: u64,
    pub indices: Vec<u64>,
}

/// A full epoch of fetch sets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IndexPlan {
    pub epoch: u64,
    pub fetches: Vec<FetchIndexSet>,
    pub total_indices: u64,
}

impl IndexPlan {
    /// Canonical little-endian encoding, used to compare plans across
    /// simulated ranks byte for byte.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(32 + self.total_indices as usize * 8);
        out.extend_from_slice(b"QPLAN\x01\x00\x00");
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&self.total_indices.to_le_bytes());
        out.extend_from_slice(&(self.fetches.len() as u64).to_le_bytes());
        for fetch in &self.fetches {
            out.extend_from_slice(&fetch.position.to_le_bytes());
            out.extend_from_slice(&(fetch.indices.len() as u64).to_le_bytes());
            for &idx in &fetch.indices {
                out.extend_from_slice(&idx.to_le_bytes());
            }
        }
        out
    }

    /// Keeps only the fetch sets at the given positions (which must exist),
    /// preserving their original position numbers. Used to carve per-rank
    /// and per-worker sub-plans out of a shared global plan.
    pub fn subset(&self, positions: &[u64]) -> IndexPlan {
        let fetches: Vec<FetchIndexSet> = positions
            .iter()
            .map(|&p| self.fetches[p as usize].clone())
            .collect();
        let total = fetches.iter().map(|f| f.indices.len() as u64).sum();
        IndexPlan {
            epoch: self.epoch,
            fetches,
            total_indices: total,
        }
    }
}

/// Inverse-class-frequency weight per row: a row of class `c` gets
/// `1 / count(c)`, so each class contributes equal total weight.
pub fn class_weights(labels: &[u16]) -> Vec<f64> {
    let mut counts = std::collections::HashMap::new();
    for &l in labels {
        *counts.entry(l).or_insert(0u64) += 1;
    }
    labels
        .iter()
        .map(|l| 1.0 / counts[l] as f64)
        .collect()
}

/// Builds the epoch plan for `(cfg, epoch)`.
///
/// The epoch seed is `derive_seed(cfg.seed, stream::EPOCH, epoch)`; block
/// permutation is Fisher-Yates under ChaCha8 on that seed; weighted
/// strategies replace the permutation with sequential weighted sampling.
/// The last block and the last fetch set may be short when `block_size`
/// or `batch_size * fetch_factor` do not divide `n_rows`.
pub fn build_plan(cfg: &SamplerConfig, epoch: u64) -> Result<IndexPlan, ConfigError> {
    cfg.validate()?;
    let epoch_seed = derive_seed(cfg.seed, rng::stream::EPOCH, epoch);
    let order = match &cfg.strategy {
        Strategy::Streaming | Strategy::StreamingBuffered { .. } => {
            (0..cfg.n_rows).collect::<Vec<u64>>()
        }
        Strategy::BlockShuffling => {
            let mut blocks: Vec<u64> = (0..cfg.block_count()).collect();
            rng::shuffle(&mut rng_from_seed(epoch_seed), &mut blocks);
            expand_blocks(cfg, &blocks)
        }
        Strategy::BlockWeighted { row_weights } => {
            weighted_block_order(cfg, row_weights, epoch_seed)
        }
        Strategy::ClassBalanced { row_labels } => {
            let weights = class_weights(row_labels);
            weighted_block_order(cfg, &weights, epoch_seed)
        }
    };
    let fetch_rows = cfg.fetch_rows() as usize;
    let mut fetches = Vec::with_capacity(order.len().div_ceil(fetch_rows));
    for (position, chunk) in order.chunks(fetch_rows).enumerate() {
        fetches.push(FetchIndexSet {
            position: position as u64,
            indices: chunk.to_vec(),
        });
    }
    Ok(IndexPlan {
        epoch,
        fetches,
        total_indices: cfg.n_rows,
    })
}

fn expand_blocks(cfg: &SamplerConfig, blocks: &[u64]) -> Vec<u64> {
    let mut order = Vec::with_capacity(cfg.n_rows as usize);
    for &blk in blocks {
        let start = blk * cfg.block_size;
        let end = (start + cfg.block_size).min(cfg.n_rows);
        order.extend(start..end);
    }
    order
}

fn weighted_block_order(cfg: &SamplerConfig, row_weights: &[f64], epoch_seed: u64) -> Vec<u64> {
    let k = cfg.block_count();
    let mut block_weights = vec![0.0f64; k as usize];
    for (row, &w) in row_weights.iter().enumerate() {
        block_weights[row / cfg.block_size as usize] += w;
    }
    let mut sampler = WeightedSampler::new(&block_weights);
    let mut rng = rng_from_seed(epoch_seed);
    let mut blocks = Vec::with_capacity(k as usize);
    while let Some(b) = sampler.draw(&mut rng) {
        blocks.push(b as u64);
    }
    expand_blocks(cfg, &blocks)
}
