//! Chunked sparse row store.
//!
//! A store is a directory: one TOML manifest plus one shard file per
//! plate. Shards hold disjoint, contiguous global row ranges in order, so
//! a sorted list of row ranges maps to a short list of contiguous byte
//! spans per shard. Reads go through memory maps opened with
//! `MADV_RANDOM` (block sampling defeats the kernel's sequential
//! readahead heuristic) and issue an explicit `MADV_WILLNEED` per
//! contiguous span instead, sized to the span, so prefetch matches the
//! access pattern exactly.

pub mod format;
pub mod synth;

use std::fs::File;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use memmap2::{Advice, Mmap};
use serde::{Deserialize, Serialize};

use format::ShardHeader;

#[cfg(target_endian = "big")]
compile_error!("the shard reader assumes a little-endian host");

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("manifest parse error: {0}")]
    ManifestParse(#[from] toml::de::Error),
    #[error("manifest encode error: {0}")]
    ManifestEncode(#[from] toml::ser::Error),
    #[error("manifest invalid: {detail}")]
    ManifestInvalid { detail: String },
    #[error("shard {shard}: bad magic")]
    BadMagic { shard: String },
    #[error("shard {shard}: unsupported format version {got}")]
    BadVersion { shard: String, got: u32 },
    #[error("shard {shard}: file shorter than its declared sections")]
    Truncated { shard: String },
    #[error("shard {shard}: {detail}")]
    Layout { shard: String, detail: String },
    #[error("shard {shard}: checksum mismatch in {section} section")]
    ChecksumMismatch { shard: String, section: &'static str },
    #[error("shard {shard}: {detail}")]
    ShardMismatch { shard: String, detail: String },
    #[error("row {row}: {detail}")]
    RowShape { row: u64, detail: String },
    #[error("writer declaration mismatch: {detail}")]
    DeclarationMismatch { detail: String },
    #[error("read ranges must be sorted, non-overlapping, within 0..{total}: {detail}")]
    BadRanges { total: u64, detail: String },
    #[error("synthesis spec invalid: {detail}")]
    SpecInvalid { detail: String },
}

/// Half-open global row range.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RowRange {
    pub start: u64,
    pub end: u64,
}

impl RowRange {
    pub fn len(&self) -> u64 {
        self.end - self.start
    }
    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }
}

/// Cumulative I/O accounting since the last reset.
///
/// `range_reads` counts contiguous per-shard segments actually served; a
/// requested range that crosses a shard boundary counts once per shard
/// touched.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct IoCounters {
    pub range_reads: u64,
    pub rows_read: u64,
    pub bytes_read: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ShardEntry {
    pub path: String,
    pub rows: u64,
    pub row_offset: u64,
    pub plate: String,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Manifest {
    pub version: u32,
    pub total_rows: u64,
    pub n_cols: u64,
    /// Label vocabulary; row labels index into it.
    pub labels: Vec<String>,
    pub shards: Vec<ShardEntry>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Manifest, StoreError> {
        let text = std::fs::read_to_string(path)?;
        let manifest: Manifest = toml::from_str(&text)?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn save(&self, path: &Path) -> Result<(), StoreError> {
        self.validate()?;
        let text = toml::to_string_pretty(self)?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<(), StoreError> {
        let fail = |detail: String| Err(StoreError::ManifestInvalid { detail });
        if self.version != format::FORMAT_VERSION {
            return fail(format!("unsupported manifest version {}", self.version));
        }
        if self.shards.is_empty() {
            return fail("manifest lists no shards".into());
        }
        if self.labels.is_empty() {
            return fail("label vocabulary is empty".into());
        }
        if self.labels.len() > u16::MAX as usize {
            return fail("label vocabulary exceeds u16 codes".into());
        }
        let mut expected_offset = 0u64;
        for (i, shard) in self.shards.iter().enumerate() {
            if shard.rows == 0 {
                return fail(format!("shard {i} is empty"));
            }
            if shard.row_offset != expected_offset {
                return fail(format!(
                    "shard {i} starts at row {} but {} rows precede it",
                    shard.row_offset, expected_offset
                ));
            }
            expected_offset += shard.rows;
        }
        if expected_offset != self.total_rows {
            return fail(format!(
                "shards cover {expected_offset} rows, manifest declares {}",
                self.total_rows
            ));
        }
        Ok(())
    }

    /// Index of the shard containing a global row.
    pub fn shard_of(&self, row: u64) -> usize {
        debug_assert!(row < self.total_rows);
        self.shards
            .partition_point(|s| s.row_offset + s.rows <= row)
    }
}

struct LoadedShard {
    header: ShardHeader,
    map: Mmap,
    file: File,
    row_offset: u64,
}

/// A sparse slab of rows returned by [`Store::read_rows`]: CSR triplet
/// rebased to local offsets, the per-row labels, the plate code (shard
/// index) per row, and the global row ids, all in requested order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RowBlock {
    pub indptr: Vec<u64>,
    pub cols: Vec<u32>,
    pub vals: Vec<f32>,
    pub labels: Vec<u16>,
    pub plates: Vec<u16>,
    pub row_ids: Vec<u64>,
}

impl RowBlock {
    pub fn n_rows(&self) -> usize {
        self.labels.len()
    }

    fn with_capacity(rows: usize) -> RowBlock {
        let mut b = RowBlock {
            indptr: Vec::with_capacity(rows + 1),
            cols: Vec::new(),
            vals: Vec::new(),
            labels: Vec::with_capacity(rows),
            plates: Vec::with_capacity(rows),
            row_ids: Vec::with_capacity(rows),
        };
        b.indptr.push(0);
        b
    }
}

pub struct Store {
    root: PathBuf,
    manifest: Manifest,
    shards: Vec<LoadedShard>,
    range_reads: AtomicU64,
    rows_read: AtomicU64,
    bytes_read: AtomicU64,
}

/// Spans at least this long get an explicit WILLNEED hint; shorter ones
/// are served by the fault itself without the syscall.
const HINT_MIN_BYTES: usize = 4096;

fn le_slice<T: Copy>(bytes: &[u8]) -> &[T] {
    let size = std::mem::size_of::<T>();
    debug_assert_eq!(bytes.len() % size, 0);
    debug_assert_eq!(bytes.as_ptr() as usize % std::mem::align_of::<T>(), 0);
    unsafe { std::slice::from_raw_parts(bytes.as_ptr() as *const T, bytes.len() / size) }
}

impl Store {
    /// Opens a store, verifying every shard header and section checksum.
    pub fn open(manifest_path: &Path) -> Result<Store, StoreError> {
        let manifest = Manifest::load(manifest_path)?;
        let root = manifest_path
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .to_path_buf();
        let mut shards = Vec::with_capacity(manifest.shards.len());
        for entry in &manifest.shards {
            let path = root.join(&entry.path);
            let shard_name = || path.display().to_string();
            let file = File::open(&path)?;
            let map = unsafe { Mmap::map(&file)? };
            let _ = map.advise(Advice::Random);
            let header = ShardHeader::decode(&map, map.len() as u64, &path)?;
            if header.n_rows != entry.rows {
                return Err(StoreError::ShardMismatch {
                    shard: shard_name(),
                    detail: format!(
                        "header says {} rows, manifest says {}",
                        header.n_rows, entry.rows
                    ),
                });
            }
            if header.n_cols != manifest.n_cols {
                return Err(StoreError::ShardMismatch {
                    shard: shard_name(),
                    detail: format!(
                        "header says {} columns, manifest says {}",
                        header.n_cols, manifest.n_cols
                    ),
                });
            }
            if header.label_count as usize != manifest.labels.len() {
                return Err(StoreError::ShardMismatch {
                    shard: shard_name(),
                    detail: format!(
                        "header vocabulary size {} vs manifest {}",
                        header.label_count,
                        manifest.labels.len()
                    ),
                });
            }
            let checks: [(&'static str, u64, u64, u32); 4] = [
                ("indptr", header.indptr_off, header.indptr_bytes(), header.crc_indptr),
                (
                    "col_indices",
                    header.col_indices_off,
                    header.col_indices_bytes(),
                    header.crc_col_indices,
                ),
                ("values", header.values_off, header.values_bytes(), header.crc_values),
                (
                    "row_labels",
                    header.row_labels_off,
                    header.row_labels_bytes(),
                    header.crc_row_labels,
                ),
            ];
            for (section, off, len, expected) in checks {
                let got = crc32fast::hash(&map[off as usize..(off + len) as usize]);
                if got != expected {
                    return Err(StoreError::ChecksumMismatch {
                        shard: shard_name(),
                        section,
                    });
                }
            }
            shards.push(LoadedShard {
                header,
                map,
                file,
                row_offset: entry.row_offset,
            });
        }
        Ok(Store {
            root,
            manifest,
            shards,
            range_reads: AtomicU64::new(0),
            rows_read: AtomicU64::new(0),
            bytes_read: AtomicU64::new(0),
        })
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn total_rows(&self) -> u64 {
        self.manifest.total_rows
    }

    pub fn n_cols(&self) -> u64 {
        self.manifest.n_cols
    }

    pub fn io_counters(&self) -> IoCounters {
        IoCounters {
            range_reads: self.range_reads.load(Ordering::Relaxed),
            rows_read: self.rows_read.load(Ordering::Relaxed),
            bytes_read: self.bytes_read.load(Ordering::Relaxed),
        }
    }

    pub fn reset_io_counters(&self) {
        self.range_reads.store(0, Ordering::Relaxed);
        self.rows_read.store(0, Ordering::Relaxed);
        self.bytes_read.store(0, Ordering::Relaxed);
    }

    /// Total bytes across all shard files.
    pub fn disk_bytes(&self) -> u64 {
        self.shards.iter().map(|s| s.map.len() as u64).sum()
    }

    /// Asks the kernel to evict this store's pages from the page cache.
    /// Best effort; used by benchmarks to measure cold-cache behavior.
    pub fn drop_page_cache(&self) -> std::io::Result<()> {
        use std::os::unix::io::AsRawFd;
        for shard in &self.shards {
            let rc = unsafe {
                libc::posix_fadvise(shard.file.as_raw_fd(), 0, 0, libc::POSIX_FADV_DONTNEED)
            };
            if rc != 0 {
                return Err(std::io::Error::from_raw_os_error(rc));
            }
        }
        Ok(())
    }

    /// Reads the rows covered by `ranges`, which must be sorted by start,
    /// non-overlapping, non-empty, and within bounds. Rows come back in
    /// range order. Each contiguous per-shard segment is one counted range
    /// read with its own readahead hint.
    pub fn read_rows(&self, ranges: &[RowRange]) -> Result<RowBlock, StoreError> {
        let total = self.manifest.total_rows;
        let mut prev_end = 0u64;
        let mut rows = 0u64;
        for (i, r) in ranges.iter().enumerate() {
            if r.is_empty() {
                return Err(StoreError::BadRanges {
                    total,
                    detail: format!("range {i} [{}, {}) is empty", r.start, r.end),
                });
            }
            if r.end > total {
                return Err(StoreError::BadRanges {
                    total,
                    detail: format!("range {i} ends at {}", r.end),
                });
            }
            if i > 0 && r.start < prev_end {
                return Err(StoreError::BadRanges {
                    total,
                    detail: format!("range {i} starts before range {} ends", i - 1),
                });
            }
            prev_end = r.end;
            rows += r.len();
        }
        let mut block = RowBlock::with_capacity(rows as usize);
        let mut bytes = 0u64;
        let mut segments = 0u64;
        for r in ranges {
            let mut cursor = r.start;
            while cursor < r.end {
                let shard_idx = self.manifest.shard_of(cursor);
                let shard = &self.shards[shard_idx];
                let local_start = cursor - shard.row_offset;
                let local_end = (r.end - shard.row_offset).min(shard.header.n_rows);
                bytes += self.read_segment(
                    shard_idx,
                    local_start,
                    local_end,
                    &mut block,
                )?;
                segments += 1;
                cursor = shard.row_offset + local_end;
            }
        }
        self.range_reads.fetch_add(segments, Ordering::Relaxed);
        self.rows_read.fetch_add(rows, Ordering::Relaxed);
        self.bytes_read.fetch_add(bytes, Ordering::Relaxed);
        Ok(block)
    }

    fn read_segment(
        &self,
        shard_idx: usize,
        local_start: u64,
        local_end: u64,
        block: &mut RowBlock,
    ) -> Result<u64, StoreError> {
        let shard = &self.shards[shard_idx];
        let h = &shard.header;
        let map = &shard.map;
        let rows = (local_end - local_start) as usize;

        let indptr_from = (h.indptr_off + local_start * 8) as usize;
        let indptr_to = (h.indptr_off + (local_end + 1) * 8) as usize;
        self.hint(map, indptr_from, indptr_to - indptr_from);
        let indptr: &[u64] = le_slice(&map[indptr_from..indptr_to]);
        let (p0, p1) = (indptr[0], indptr[rows]);

        let cols_from = (h.col_indices_off + p0 * 4) as usize;
        let cols_to = (h.col_indices_off + p1 * 4) as usize;
        let vals_from = (h.values_off + p0 * 4) as usize;
        let vals_to = (h.values_off + p1 * 4) as usize;
        self.hint(map, cols_from, cols_to - cols_from);
        self.hint(map, vals_from, vals_to - vals_from);

        let base = *block.indptr.last().unwrap();
        for &p in &indptr[1..=rows] {
            block.indptr.push(base + (p - p0));
        }
        block
            .cols
            .extend_from_slice(le_slice::<u32>(&map[cols_from..cols_to]));
        block
            .vals
            .extend_from_slice(le_slice::<f32>(&map[vals_from..vals_to]));

        let labels_from = (h.row_labels_off + local_start * 2) as usize;
        let labels_to = (h.row_labels_off + local_end * 2) as usize;
        block
            .labels
            .extend_from_slice(le_slice::<u16>(&map[labels_from..labels_to]));
        block
            .plates
            .extend(std::iter::repeat_n(shard_idx as u16, rows));
        block
            .row_ids
            .extend(shard.row_offset + local_start..shard.row_offset + local_end);

        Ok((indptr_to - indptr_from) as u64
            + (cols_to - cols_from) as u64
            + (vals_to - vals_from) as u64
            + (labels_to - labels_from) as u64)
    }

    fn hint(&self, map: &Mmap, offset: usize, len: usize) {
        if len >= HINT_MIN_BYTES {
            let _ = map.advise_range(Advice::WillNeed, offset, len);
        }
    }

    /// Per-label row counts over the whole store, indexed by label code.
    pub fn label_histogram(&self) -> Vec<u64> {
        let mut counts = vec![0u64; self.manifest.labels.len()];
        for shard in &self.shards {
            let h = &shard.header;
            let from = h.row_labels_off as usize;
            let to = from + h.row_labels_bytes() as usize;
            for &label in le_slice::<u16>(&shard.map[from..to]) {
                counts[label as usize] += 1;
            }
        }
        counts
    }

    /// All row labels in global order. Used for class-balanced sampling.
    pub fn all_labels(&self) -> Vec<u16> {
        let mut out = Vec::with_capacity(self.manifest.total_rows as usize);
        for shard in &self.shards {
            let h = &shard.header;
            let from = h.row_labels_off as usize;
            let to = from + h.row_labels_bytes() as usize;
            out.extend_from_slice(le_slice::<u16>(&shard.map[from..to]));
        }
        out
    }

    /// Global row span `[offset, offset + rows)` of one shard.
    pub fn shard_span(&self, shard_idx: usize) -> RowRange {
        let s = &self.manifest.shards[shard_idx];
        RowRange {
            start: s.row_offset,
            end: s.row_offset + s.rows,
        }
    }
}

/// Merges sorted unique row indices into maximal contiguous ranges.
pub fn coalesce_indices(sorted_unique: &[u64]) -> Vec<RowRange> {
    let mut ranges: Vec<RowRange> = Vec::new();
    for &idx in sorted_unique {
        match ranges.last_mut() {
            Some(last) if last.end == idx => last.end += 1,
            _ => ranges.push(RowRange {
                start: idx,
                end: idx + 1,
            }),
        }
    }
    ranges
}
