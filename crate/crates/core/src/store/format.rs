//! On-disk shard format.
//!
//! A shard is one file holding a contiguous slab of rows in compressed
//! sparse row layout plus one u16 label per row. Everything is
//! little-endian. The file opens with a fixed 128-byte header; the four
//! data sections follow, each aligned to 64 bytes, in a fixed order:
//!
//! ```text
//! offset  field
//! 0       magic              8 bytes, "QUASAR01"
//! 8       version            u32
//! 12      label_count        u16     size of the label vocabulary
//! 14      reserved           u16     zero
//! 16      n_rows             u64
//! 24      n_cols             u64
//! 32      nnz                u64
//! 40      indptr_off         u64     (n_rows + 1) x u64
//! 48      col_indices_off    u64     nnz x u32
//! 56      values_off         u64     nnz x f32
//! 64      row_labels_off     u64     n_rows x u16
//! 72      crc_indptr         u32
//! 76      crc_col_indices    u32
//! 80      crc_values         u32
//! 84      crc_row_labels     u32
//! 88      zero padding to 128
//! ```
//!
//! CRCs are CRC-32 (IEEE) over the exact section bytes, excluding
//! alignment padding, and are verified when a store is opened, not on
//! every read. Rows within a shard are stored in their global order; the
//! manifest records which global row the shard starts at.

use std::fs::File;
use std::io::{self, Write};
use std::os::unix::fs::FileExt;
use std::path::Path;

use super::StoreError;

pub const SHARD_MAGIC: [u8; 8] = *b"QUASAR01";
pub const FORMAT_VERSION: u32 = 1;
pub const SECTION_ALIGN: u64 = 64;
pub const HEADER_SPAN: u64 = 128;

pub const fn align_up(off: u64) -> u64 {
    off.div_ceil(SECTION_ALIGN) * SECTION_ALIGN
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ShardHeader {
    pub label_count: u16,
    pub n_rows: u64,
    pub n_cols: u64,
    pub nnz: u64,
    pub indptr_off: u64,
    pub col_indices_off: u64,
    pub values_off: u64,
    pub row_labels_off: u64,
    pub crc_indptr: u32,
    pub crc_col_indices: u32,
    pub crc_values: u32,
    pub crc_row_labels: u32,
}

impl ShardHeader {
    pub fn indptr_bytes(&self) -> u64 {
        (self.n_rows + 1) * 8
    }
    pub fn col_indices_bytes(&self) -> u64 {
        self.nnz * 4
    }
    pub fn values_bytes(&self) -> u64 {
        self.nnz * 4
    }
    pub fn row_labels_bytes(&self) -> u64 {
        self.n_rows * 2
    }

    /// Canonical section offsets for a shard of this shape.
    pub fn canonical_offsets(n_rows: u64, nnz: u64) -> (u64, u64, u64, u64) {
        let indptr = HEADER_SPAN;
        let cols = align_up(indptr + (n_rows + 1) * 8);
        let values = align_up(cols + nnz * 4);
        let labels = align_up(values + nnz * 4);
        (indptr, cols, values, labels)
    }

    pub fn encode(&self) -> [u8; HEADER_SPAN as usize] {
        let mut h = [0u8; HEADER_SPAN as usize];
        h[0..8].copy_from_slice(&SHARD_MAGIC);
        h[8..12].copy_from_slice(&FORMAT_VERSION.to_le_bytes());
        h[12..14].copy_from_slice(&self.label_count.to_le_bytes());
        // 14..16 reserved, zero
        h[16..24].copy_from_slice(&self.n_rows.to_le_bytes());
        h[24..32].copy_from_slice(&self.n_cols.to_le_bytes());
        h[32..40].copy_from_slice(&self.nnz.to_le_bytes());
        h[40..48].copy_from_slice(&self.indptr_off.to_le_bytes());
        h[48..56].copy_from_slice(&self.col_indices_off.to_le_bytes());
        h[56..64].copy_from_slice(&self.values_off.to_le_bytes());
        h[64..72].copy_from_slice(&self.row_labels_off.to_le_bytes());
        h[72..76].copy_from_slice(&self.crc_indptr.to_le_bytes());
        h[76..80].copy_from_slice(&self.crc_col_indices.to_le_bytes());
        h[80..84].copy_from_slice(&self.crc_values.to_le_bytes());
        h[84..88].copy_from_slice(&self.crc_row_labels.to_le_bytes());
        h
    }

    pub fn decode(bytes: &[u8], file_len: u64, path: &Path) -> Result<ShardHeader, StoreError> {
        let shard = || path.display().to_string();
        if bytes.len() < HEADER_SPAN as usize {
            return Err(StoreError::Truncated { shard: shard() });
        }
        if bytes[0..8] != SHARD_MAGIC {
            return Err(StoreError::BadMagic { shard: shard() });
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        let u16_at = |o: usize| u16::from_le_bytes(bytes[o..o + 2].try_into().unwrap());
        let version = u32_at(8);
        if version != FORMAT_VERSION {
            return Err(StoreError::BadVersion {
                shard: shard(),
                got: version,
            });
        }
        let header = ShardHeader {
            label_count: u16_at(12),
            n_rows: u64_at(16),
            n_cols: u64_at(24),
            nnz: u64_at(32),
            indptr_off: u64_at(40),
            col_indices_off: u64_at(48),
            values_off: u64_at(56),
            row_labels_off: u64_at(64),
            crc_indptr: u32_at(72),
            crc_col_indices: u32_at(76),
            crc_values: u32_at(80),
            crc_row_labels: u32_at(84),
        };
        let sections = [
            ("indptr", header.indptr_off, header.indptr_bytes()),
            (
                "col_indices",
                header.col_indices_off,
                header.col_indices_bytes(),
            ),
            ("values", header.values_off, header.values_bytes()),
            ("row_labels", header.row_labels_off, header.row_labels_bytes()),
        ];
        let mut prev_end = HEADER_SPAN;
        for (name, off, len) in sections {
            if off % SECTION_ALIGN != 0 {
                return Err(StoreError::Layout {
                    shard: shard(),
                    detail: format!("{name} offset {off} is not 64-byte aligned"),
                });
            }
            if off < prev_end {
                return Err(StoreError::Layout {
                    shard: shard(),
                    detail: format!("{name} section overlaps its predecessor"),
                });
            }
            let end = off.checked_add(len).ok_or_else(|| StoreError::Layout {
                shard: shard(),
                detail: format!("{name} section overflows"),
            })?;
            if end > file_len {
                return Err(StoreError::Truncated { shard: shard() });
            }
            prev_end = end;
        }
        Ok(header)
    }
}

/// Streaming shard writer.
///
/// The row count and nnz total must be declared up front (the sections are
/// laid out before data arrives); `finish` fails if the pushed rows do not
/// match the declaration. Sections are written through per-section buffers
/// with positioned writes, so memory stays flat regardless of shard size.
pub struct ShardWriter {
    file: File,
    n_cols: u64,
    label_count: u16,
    n_rows: u64,
    nnz: u64,
    rows_pushed: u64,
    nnz_pushed: u64,
    offsets: (u64, u64, u64, u64),
    sections: [SectionCursor; 4],
}

struct SectionCursor {
    file_pos: u64,
    buf: Vec<u8>,
    crc: crc32fast::Hasher,
}

const FLUSH_BYTES: usize = 1 << 20;

impl SectionCursor {
    fn new(file_pos: u64) -> Self {
        SectionCursor {
            file_pos,
            buf: Vec::with_capacity(FLUSH_BYTES),
            crc: crc32fast::Hasher::new(),
        }
    }

    fn push(&mut self, file: &File, bytes: &[u8]) -> io::Result<()> {
        self.crc.update(bytes);
        self.buf.extend_from_slice(bytes);
        if self.buf.len() >= FLUSH_BYTES {
            self.flush(file)?;
        }
        Ok(())
    }

    fn flush(&mut self, file: &File) -> io::Result<()> {
        if !self.buf.is_empty() {
            file.write_all_at(&self.buf, self.file_pos)?;
            self.file_pos += self.buf.len() as u64;
            self.buf.clear();
        }
        Ok(())
    }
}

impl ShardWriter {
    pub fn create(
        path: &Path,
        n_rows: u64,
        n_cols: u64,
        nnz: u64,
        label_count: u16,
    ) -> Result<ShardWriter, StoreError> {
        let file = File::create(path)?;
        let offsets = ShardHeader::canonical_offsets(n_rows, nnz);
        let file_len = offsets.3 + n_rows * 2;
        file.set_len(file_len)?;
        let mut w = ShardWriter {
            file,
            n_cols,
            label_count,
            n_rows,
            nnz,
            rows_pushed: 0,
            nnz_pushed: 0,
            offsets,
            sections: [
                SectionCursor::new(offsets.0),
                SectionCursor::new(offsets.1),
                SectionCursor::new(offsets.2),
                SectionCursor::new(offsets.3),
            ],
        };
        // indptr opens with 0
        let file = w.file.try_clone()?;
        w.sections[0].push(&file, &0u64.to_le_bytes())?;
        Ok(w)
    }

    pub fn push_row(&mut self, cols: &[u32], vals: &[f32], label: u16) -> Result<(), StoreError> {
        if cols.len() != vals.len() {
            return Err(StoreError::RowShape {
                row: self.rows_pushed,
                detail: format!("{} columns vs {} values", cols.len(), vals.len()),
            });
        }
        for pair in cols.windows(2) {
            if pair[1] <= pair[0] {
                return Err(StoreError::RowShape {
                    row: self.rows_pushed,
                    detail: "column indices must be strictly increasing".into(),
                });
            }
        }
        if let Some(&last) = cols.last() {
            if last as u64 >= self.n_cols {
                return Err(StoreError::RowShape {
                    row: self.rows_pushed,
                    detail: format!("column {last} out of range (n_cols {})", self.n_cols),
                });
            }
        }
        if label >= self.label_count {
            return Err(StoreError::RowShape {
                row: self.rows_pushed,
                detail: format!("label {label} out of vocabulary ({})", self.label_count),
            });
        }
        self.rows_pushed += 1;
        self.nnz_pushed += cols.len() as u64;
        if self.rows_pushed > self.n_rows || self.nnz_pushed > self.nnz {
            return Err(StoreError::DeclarationMismatch {
                detail: format!(
                    "pushed {} rows / {} nnz against declared {} / {}",
                    self.rows_pushed, self.nnz_pushed, self.n_rows, self.nnz
                ),
            });
        }
        let file = &self.file;
        self.sections[0].push(file, &self.nnz_pushed.to_le_bytes())?;
        let mut col_bytes = Vec::with_capacity(cols.len() * 4);
        for &c in cols {
            col_bytes.extend_from_slice(&c.to_le_bytes());
        }
        self.sections[1].push(file, &col_bytes)?;
        let mut val_bytes = Vec::with_capacity(vals.len() * 4);
        for &v in vals {
            val_bytes.extend_from_slice(&v.to_le_bytes());
        }
        self.sections[2].push(file, &val_bytes)?;
        self.sections[3].push(file, &label.to_le_bytes())?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<ShardHeader, StoreError> {
        if self.rows_pushed != self.n_rows || self.nnz_pushed != self.nnz {
            return Err(StoreError::DeclarationMismatch {
                detail: format!(
                    "shard declared {} rows / {} nnz but received {} / {}",
                    self.n_rows, self.nnz, self.rows_pushed, self.nnz_pushed
                ),
            });
        }
        let file = self.file.try_clone()?;
        let mut crcs = [0u32; 4];
        for (i, section) in self.sections.iter_mut().enumerate() {
            section.flush(&file)?;
            crcs[i] = std::mem::replace(&mut section.crc, crc32fast::Hasher::new()).finalize();
        }
        let header = ShardHeader {
            label_count: self.label_count,
            n_rows: self.n_rows,
            n_cols: self.n_cols,
            nnz: self.nnz,
            indptr_off: self.offsets.0,
            col_indices_off: self.offsets.1,
            values_off: self.offsets.2,
            row_labels_off: self.offsets.3,
            crc_indptr: crcs[0],
            crc_col_indices: crcs[1],
            crc_values: crcs[2],
            crc_row_labels: crcs[3],
        };
        self.file.write_all_at(&header.encode(), 0)?;
        self.file.flush()?;
        self.file.sync_all()?;
        Ok(header)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_round_trips() {
        let h = ShardHeader {
            label_count: 3,
            n_rows: 100,
            n_cols: 50,
            nnz: 777,
            indptr_off: 128,
            col_indices_off: align_up(128 + 101 * 8),
            values_off: align_up(align_up(128 + 101 * 8) + 777 * 4),
            row_labels_off: align_up(align_up(align_up(128 + 101 * 8) + 777 * 4) + 777 * 4),
            crc_indptr: 1,
            crc_col_indices: 2,
            crc_values: 3,
            crc_row_labels: 4,
        };
        let bytes = h.encode();
        let file_len = h.row_labels_off + h.row_labels_bytes();
        let decoded = ShardHeader::decode(&bytes, file_len, Path::new("x")).unwrap();
        assert_eq!(decoded, h);
    }

    #[test]
    fn decode_rejects_bad_magic_and_version() {
        let h = ShardHeader {
            label_count: 1,
            n_rows: 1,
            n_cols: 1,
            nnz: 0,
            indptr_off: 128,
            col_indices_off: 192,
            values_off: 192,
            row_labels_off: 192,
            crc_indptr: 0,
            crc_col_indices: 0,
            crc_values: 0,
            crc_row_labels: 0,
        };
        let mut bytes = h.encode();
        bytes[0] ^= 0xFF;
        assert!(matches!(
            ShardHeader::decode(&bytes, 1 << 20, Path::new("x")),
            Err(StoreError::BadMagic { .. })
        ));
        let mut bytes = h.encode();
        bytes[8] = 99;
        assert!(matches!(
            ShardHeader::decode(&bytes, 1 << 20, Path::new("x")),
            Err(StoreError::BadVersion { got: 99, .. })
        ));
    }

    #[test]
    fn decode_rejects_truncated_sections() {
        let h = ShardHeader {
            label_count: 1,
            n_rows: 10,
            n_cols: 4,
            nnz: 20,
            indptr_off: 128,
            col_indices_off: align_up(128 + 11 * 8),
            values_off: align_up(align_up(128 + 11 * 8) + 80),
            row_labels_off: align_up(align_up(align_up(128 + 11 * 8) + 80) + 80),
            crc_indptr: 0,
            crc_col_indices: 0,
            crc_values: 0,
            crc_row_labels: 0,
        };
        let bytes = h.encode();
        let full = h.row_labels_off + h.row_labels_bytes();
        assert!(ShardHeader::decode(&bytes, full, Path::new("x")).is_ok());
        assert!(matches!(
            ShardHeader::decode(&bytes, full - 1, Path::new("x")),
            Err(StoreError::Truncated { .. })
        ));
    }
}
