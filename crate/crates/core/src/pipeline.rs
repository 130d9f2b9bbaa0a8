//! Minibatch iteration over an epoch plan.
//!
//! Each fetch set is processed as a unit: indices sorted ascending, one
//! backend read, an optional whole-fetch transform, an in-memory
//! reshuffle under a seed derived from the fetch position, then a split
//! into minibatches with optional per-batch hooks. Data access is
//! decoupled from sampling through four optional callbacks; the defaults
//! read from any ranged backend and slice positionally.

use crate::rng::{self, derive_seed, rng_from_seed, stream};
use crate::sampling::{IndexPlan, SamplerConfig, Strategy};
use crate::store::{coalesce_indices, RowBlock, RowRange, Store, StoreError};

/// Ranged row access plus total length; what the pipeline needs from
/// storage. Reads take sorted, non-overlapping, non-empty ranges.
pub trait Backend {
    fn total_rows(&self) -> u64;
    fn read_rows(&self, ranges: &[RowRange]) -> Result<RowBlock, StoreError>;
}

impl Backend for Store {
    fn total_rows(&self) -> u64 {
        Store::total_rows(self)
    }
    fn read_rows(&self, ranges: &[RowRange]) -> Result<RowBlock, StoreError> {
        Store::read_rows(self, ranges)
    }
}

/// CSR rows without per-row metadata.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SparseRows {
    pub indptr: Vec<u64>,
    pub cols: Vec<u32>,
    pub vals: Vec<f32>,
}

impl SparseRows {
    pub fn n_rows(&self) -> usize {
        self.indptr.len().saturating_sub(1)
    }

    pub fn row(&self, i: usize) -> (&[u32], &[f32]) {
        let lo = self.indptr[i] as usize;
        let hi = self.indptr[i + 1] as usize;
        (&self.cols[lo..hi], &self.vals[lo..hi])
    }

    pub fn select(&self, positions: &[usize]) -> SparseRows {
        let mut out = SparseRows {
            indptr: Vec::with_capacity(positions.len() + 1),
            cols: Vec::new(),
            vals: Vec::new(),
        };
        out.indptr.push(0);
        for &p in positions {
            let (cols, vals) = self.row(p);
            out.cols.extend_from_slice(cols);
            out.vals.extend_from_slice(vals);
            out.indptr.push(out.cols.len() as u64);
        }
        out
    }

    pub fn to_dense(&self, n_cols: usize) -> DenseRows {
        let rows = self.n_rows();
        let mut values = vec![0.0f32; rows * n_cols];
        for i in 0..rows {
            let (cols, vals) = self.row(i);
            let base = i * n_cols;
            for (&c, &v) in cols.iter().zip(vals) {
                values[base + c as usize] = v;
            }
        }
        DenseRows { n_cols, values }
    }
}

/// Row-major dense rows.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DenseRows {
    pub n_cols: usize,
    pub values: Vec<f32>,
}

impl DenseRows {
    pub fn n_rows(&self) -> usize {
        self.values.len().checked_div(self.n_cols).unwrap_or(0)
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.n_cols..(i + 1) * self.n_cols]
    }

    pub fn select(&self, positions: &[usize]) -> DenseRows {
        let mut values = Vec::with_capacity(positions.len() * self.n_cols);
        for &p in positions {
            values.extend_from_slice(self.row(p));
        }
        DenseRows {
            n_cols: self.n_cols,
            values,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum PayloadPart {
    Sparse(SparseRows),
    Dense(DenseRows),
    U16(Vec<u16>),
    U64(Vec<u64>),
}

impl PayloadPart {
    /// Leading length (row count).
    pub fn len(&self) -> usize {
        match self {
            PayloadPart::Sparse(s) => s.n_rows(),
            PayloadPart::Dense(d) => d.n_rows(),
            PayloadPart::U16(v) => v.len(),
            PayloadPart::U64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, positions: &[usize]) -> PayloadPart {
        match self {
            PayloadPart::Sparse(s) => PayloadPart::Sparse(s.select(positions)),
            PayloadPart::Dense(d) => PayloadPart::Dense(d.select(positions)),
            PayloadPart::U16(v) => PayloadPart::U16(positions.iter().map(|&p| v[p]).collect()),
            PayloadPart::U64(v) => PayloadPart::U64(positions.iter().map(|&p| v[p]).collect()),
        }
    }
}

/// Named payload parts with a shared leading length, so indexing with the
/// same positions yields aligned slices across all parts.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MultiPayload {
    parts: Vec<(String, PayloadPart)>,
}

pub const PART_ROWS: &str = "rows";
pub const PART_LABELS: &str = "labels";
pub const PART_PLATES: &str = "plates";
pub const PART_ROW_IDS: &str = "row_ids";

impl MultiPayload {
    pub fn new() -> MultiPayload {
        MultiPayload::default()
    }

    pub fn len(&self) -> usize {
        self.parts.first().map_or(0, |(_, p)| p.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Adds or replaces a part; its length must match the other parts.
    pub fn set(&mut self, name: &str, part: PayloadPart) -> Result<(), String> {
        let pos = self.parts.iter().position(|(n, _)| n == name);
        let other_len = self
            .parts
            .iter()
            .enumerate()
            .find(|(i, _)| Some(*i) != pos)
            .map(|(_, (_, p))| p.len());
        if let Some(len) = other_len {
            if part.len() != len {
                return Err(format!(
                    "part {name} has length {}, payload holds {len}",
                    part.len()
                ));
            }
        }
        match pos {
            Some(i) => self.parts[i].1 = part,
            None => self.parts.push((name.to_string(), part)),
        }
        Ok(())
    }

    pub fn with(mut self, name: &str, part: PayloadPart) -> Result<MultiPayload, String> {
        self.set(name, part)?;
        Ok(self)
    }

    pub fn part(&self, name: &str) -> Option<&PayloadPart> {
        self.parts
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, p)| p)
    }

    pub fn part_names(&self) -> impl Iterator<Item = &str> {
        self.parts.iter().map(|(n, _)| n.as_str())
    }

    pub fn select(&self, positions: &[usize]) -> MultiPayload {
        MultiPayload {
            parts: self
                .parts
                .iter()
                .map(|(n, p)| (n.clone(), p.select(positions)))
                .collect(),
        }
    }
}

/// One yielded minibatch.
#[derive(Clone, Debug, PartialEq)]
pub struct Minibatch {
    pub payload: MultiPayload,
    /// Global row ids in yielded order, aligned with the payload.
    pub source_indices: Vec<u64>,
    pub fetch_position: u64,
}

type FetchHook<'a, B> = dyn Fn(&B, &[u64]) -> Result<MultiPayload, String> + 'a;
type TransformHook<'a> = dyn Fn(MultiPayload) -> Result<MultiPayload, String> + 'a;
type BatchHook<'a> = dyn Fn(&MultiPayload, &[usize]) -> Result<MultiPayload, String> + 'a;

/// The four optional hooks. `fetch` receives the sorted indices of one
/// fetch set (duplicates included) and must return a payload aligned to
/// them; the default reads the deduplicated ranges from the backend and
/// duplicates rows in memory. `batch` receives local positions into the
/// fetch payload; the default is positional selection.
pub struct CallbackSet<'a, B: ?Sized> {
    pub fetch: Option<Box<FetchHook<'a, B>>>,
    pub fetch_transform: Option<Box<TransformHook<'a>>>,
    pub batch: Option<Box<BatchHook<'a>>>,
    pub batch_transform: Option<Box<TransformHook<'a>>>,
}

impl<B: ?Sized> Default for CallbackSet<'_, B> {
    fn default() -> Self {
        CallbackSet {
            fetch: None,
            fetch_transform: None,
            batch: None,
            batch_transform: None,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("fetch {fetch_position}: backend read failed: {source}")]
    Backend {
        fetch_position: u64,
        #[source]
        source: StoreError,
    },
    #[error("fetch {fetch_position}: {hook} hook failed: {detail}")]
    Hook {
        fetch_position: u64,
        hook: &'static str,
        detail: String,
    },
    #[error("fetch {fetch_position}: payload holds {got} rows for {expected} indices")]
    FetchShape {
        fetch_position: u64,
        expected: usize,
        got: usize,
    },
    #[error(transparent)]
    Config(#[from] crate::sampling::ConfigError),
    #[error("buffered iteration requires the buffered streaming strategy")]
    NotBuffered,
    #[error("shuffle buffer of {buffer_rows} rows cannot serve batches of {batch_size}")]
    BufferTooSmall { buffer_rows: u64, batch_size: u64 },
}

/// Splits a store read into the standard payload parts.
pub fn payload_from_block(block: RowBlock) -> MultiPayload {
    let RowBlock {
        indptr,
        cols,
        vals,
        labels,
        plates,
        row_ids,
    } = block;
    MultiPayload::new()
        .with(PART_ROWS, PayloadPart::Sparse(SparseRows { indptr, cols, vals }))
        .and_then(|p| p.with(PART_LABELS, PayloadPart::U16(labels)))
        .and_then(|p| p.with(PART_PLATES, PayloadPart::U16(plates)))
        .and_then(|p| p.with(PART_ROW_IDS, PayloadPart::U64(row_ids)))
        .expect("block parts share one length")
}

/// Default fetch: deduplicate, coalesce, one ranged read, then duplicate
/// repeated indices in memory. `sorted` must be ascending.
fn default_fetch<B: Backend + ?Sized>(
    backend: &B,
    sorted: &[u64],
) -> Result<MultiPayload, StoreError> {
    let mut unique: Vec<u64> = Vec::with_capacity(sorted.len());
    let mut pos_of: Vec<usize> = Vec::with_capacity(sorted.len());
    for &idx in sorted {
        if unique.last() != Some(&idx) {
            unique.push(idx);
        }
        pos_of.push(unique.len() - 1);
    }
    let ranges = coalesce_indices(&unique);
    let payload = payload_from_block(backend.read_rows(&ranges)?);
    if unique.len() == sorted.len() {
        Ok(payload)
    } else {
        Ok(payload.select(&pos_of))
    }
}

struct LoadedFetch {
    position: u64,
    payload: MultiPayload,
    sorted: Vec<u64>,
    order: Vec<usize>,
    cursor: usize,
}

/// Sequential minibatch stream over a plan. Yields
/// `Result<Minibatch, PipelineError>`; the first error fuses the stream.
pub struct MinibatchStream<'a, B: ?Sized> {
    backend: &'a B,
    callbacks: &'a CallbackSet<'a, B>,
    fetches: std::slice::Iter<'a, crate::sampling::FetchIndexSet>,
    batch_size: usize,
    seed: u64,
    current: Option<LoadedFetch>,
    done: bool,
}

/// Iterates a plan against a backend.
///
/// One backend fetch per fetch set; the in-memory reshuffle for fetch
/// position `p` draws from the stream derived as
/// `(seed, fetch-shuffle, p)`, independent of the epoch permutation.
pub fn iterate<'a, B: Backend + ?Sized>(
    plan: &'a IndexPlan,
    backend: &'a B,
    cfg: &SamplerConfig,
    callbacks: &'a CallbackSet<'a, B>,
) -> MinibatchStream<'a, B> {
    MinibatchStream {
        backend,
        callbacks,
        fetches: plan.fetches.iter(),
        batch_size: cfg.batch_size as usize,
        seed: cfg.seed,
        current: None,
        done: false,
    }
}

impl<B: Backend + ?Sized> MinibatchStream<'_, B> {
    fn load_next_fetch(&mut self) -> Result<Option<()>, PipelineError> {
        let Some(fetch) = self.fetches.next() else {
            return Ok(None);
        };
        let position = fetch.position;
        let mut sorted = fetch.indices.clone();
        sorted.sort();
        let payload = match &self.callbacks.fetch {
            Some(hook) => hook(self.backend, &sorted).map_err(|detail| PipelineError::Hook {
                fetch_position: position,
                hook: "fetch_callback",
                detail,
            })?,
            None => default_fetch(self.backend, &sorted).map_err(|source| {
                PipelineError::Backend {
                    fetch_position: position,
                    source,
                }
            })?,
        };
        let payload = match &self.callbacks.fetch_transform {
            Some(hook) => hook(payload).map_err(|detail| PipelineError::Hook {
                fetch_position: position,
                hook: "fetch_transform",
                detail,
            })?,
            None => payload,
        };
        if payload.len() != sorted.len() {
            return Err(PipelineError::FetchShape {
                fetch_position: position,
                expected: sorted.len(),
                got: payload.len(),
            });
        }
        let mut order: Vec<usize> = (0..sorted.len()).collect();
        let shuffle_seed = derive_seed(self.seed, stream::FETCH_SHUFFLE, position);
        rng::shuffle(&mut rng_from_seed(shuffle_seed), &mut order);
        self.current = Some(LoadedFetch {
            position,
            payload,
            sorted,
            order,
            cursor: 0,
        });
        Ok(Some(()))
    }

    fn emit(&mut self) -> Result<Option<Minibatch>, PipelineError> {
        loop {
            let exhausted = match &self.current {
                Some(f) => f.cursor >= f.order.len(),
                None => true,
            };
            if exhausted {
                self.current = None;
                if self.load_next_fetch()?.is_none() {
                    return Ok(None);
                }
                continue;
            }
            let fetch = self.current.as_mut().unwrap();
            let lo = fetch.cursor;
            let hi = (lo + self.batch_size).min(fetch.order.len());
            fetch.cursor = hi;
            let positions = &fetch.order[lo..hi];
            let source_indices: Vec<u64> = positions.iter().map(|&p| fetch.sorted[p]).collect();
            let position = fetch.position;
            let payload = match &self.callbacks.batch {
                Some(hook) => {
                    hook(&fetch.payload, positions).map_err(|detail| PipelineError::Hook {
                        fetch_position: position,
                        hook: "batch_callback",
                        detail,
                    })?
                }
                None => fetch.payload.select(positions),
            };
            let payload = match &self.callbacks.batch_transform {
                Some(hook) => hook(payload).map_err(|detail| PipelineError::Hook {
                    fetch_position: position,
                    hook: "batch_transform",
                    detail,
                })?,
                None => payload,
            };
            return Ok(Some(Minibatch {
                payload,
                source_indices,
                fetch_position: position,
            }));
        }
    }
}

impl<B: Backend + ?Sized> Iterator for MinibatchStream<'_, B> {
    type Item = Result<Minibatch, PipelineError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        match self.emit() {
            Ok(Some(batch)) => Some(Ok(batch)),
            Ok(None) => {
                self.done = true;
                None
            }
            Err(e) => {
                self.done = true;
                Some(Err(e))
            }
        }
    }
}

/// Classic shuffle-buffer baseline: fill the buffer from the sequential
/// stream, draw each minibatch uniformly without replacement from the
/// buffer, then refill one row per emitted row from the stream's tail.
/// Every row is emitted exactly once per epoch. Both fetch hooks run once
/// per minibatch here (the minibatch is the unit of I/O).
pub struct BufferedStream<'a, B: ?Sized> {
    backend: &'a B,
    callbacks: &'a CallbackSet<'a, B>,
    buffer: Vec<u64>,
    next_row: u64,
    n_rows: u64,
    batch_size: usize,
    rng: rand_chacha::ChaCha8Rng,
    ordinal: u64,
    done: bool,
}

pub fn iterate_buffered_stream<'a, B: Backend + ?Sized>(
    backend: &'a B,
    cfg: &SamplerConfig,
    epoch: u64,
    callbacks: &'a CallbackSet<'a, B>,
) -> Result<BufferedStream<'a, B>, PipelineError> {
    cfg.validate()?;
    let Strategy::StreamingBuffered { buffer_rows } = cfg.strategy else {
        return Err(PipelineError::NotBuffered);
    };
    if buffer_rows < cfg.batch_size {
        return Err(PipelineError::BufferTooSmall {
            buffer_rows,
            batch_size: cfg.batch_size,
        });
    }
    let n_rows = cfg.n_rows;
    let fill = buffer_rows.min(n_rows);
    Ok(BufferedStream {
        backend,
        callbacks,
        buffer: (0..fill).collect(),
        next_row: fill,
        n_rows,
        batch_size: cfg.batch_size as usize,
        rng: rng_from_seed(derive_seed(cfg.seed, stream::BUFFER, epoch)),
        ordinal: 0,
        done: false,
    })
}

impl<B: Backend + ?Sized> BufferedStream<'_, B> {
    fn emit(&mut self) -> Result<Option<Minibatch>, PipelineError> {
        if self.buffer.is_empty() {
            return Ok(None);
        }
        let k = self.batch_size.min(self.buffer.len());
        rng::partial_shuffle(&mut self.rng, &mut self.buffer, k);
        let emitted: Vec<u64> = self.buffer[..k].to_vec();
        let refill = (k as u64).min(self.n_rows - self.next_row) as usize;
        for (i, slot) in self.buffer[..refill].iter_mut().enumerate() {
            *slot = self.next_row + i as u64;
        }
        self.next_row += refill as u64;
        if refill < k {
            self.buffer.drain(refill..k);
        }
        let position = self.ordinal;
        self.ordinal += 1;

        let mut sorted = emitted.clone();
        sorted.sort();
        let payload = match &self.callbacks.fetch {
            Some(hook) => hook(self.backend, &sorted).map_err(|detail| PipelineError::Hook {
                fetch_position: position,
                hook: "fetch_callback",
                detail,
            })?,
            None => default_fetch(self.backend, &sorted).map_err(|source| {
                PipelineError::Backend {
                    fetch_position: position,
                    source,
                }
            })?,
        };
        let payload = match &self.callbacks.fetch_transform {
            Some(hook) => hook(payload).map_err(|detail| PipelineError::Hook {
                fetch_position: position,
                hook: "fetch_transform",
                detail,
            })?,
            None => payload,
        };
        if payload.len() != sorted.len() {
            return Err(PipelineError::FetchShape {
                fetch_position: position,
                expected: sorted.len(),
                got: payload.len(),
            });
        }
        let positions: Vec<usize> = emitted
            .iter()
            .map(|idx| sorted.binary_search(idx).unwrap())
            .collect();
        let payload = match &self.callbacks.batch {
            Some(hook) => {
                hook(&payload, &positions).map_err(|detail| PipelineError::Hook {
                    fetch_position: position,
                    hook: "batch_callback",
                    detail,
                })?
            }
            None => payload.select(&positions),
        };
        let payload = match &self.callbacks.batch_transform {
            Some(hook) => hook(payload).map_err(|detail| PipelineError::Hook {
                fetch_position: position,
                hook: "batch_transform",
                detail,
            })?,
            None => payload,
        };
        Ok(Some(Minibatch {
            payload,
            source_indices: emitted,
            fetch_position: position,
        }))
    }
}

impl<B: Backend + ?Sized> Iterator for BufferedStream<'_, B> {
    type Item = Result<Minibatch, PipelineError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        match self.emit() {
            Ok(Some(batch)) => Some(Ok(batch)),
            Ok(None) => {
                self.done = true;
                None
            }
            Err(e) => {
                self.done = true;
                Some(Err(e))
            }
        }
    }
}
