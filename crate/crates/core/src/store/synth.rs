//! Synthetic corpus generation.
//!
//! Stores are built one shard per plate, with plate sizes following a
//! fixed mix of weights measured off a public single-cell screen (fourteen
//! plates of visibly unequal depth). Every row is generated from its own
//! derived RNG stream keyed by the global row id, so shard contents are a
//! pure function of the spec and do not depend on generation order or
//! batching.

use std::path::{Path, PathBuf};

use rand_core::RngCore;

use super::format::ShardWriter;
use super::{Manifest, ShardEntry, StoreError};
use crate::rng::{self, stream};

/// Relative plate depths. The entropy of the normalized mix is
/// 3.7801 bits, close to the measured value for the screen it mimics.
pub const PLATE_MIX_UNITS: [u64; 14] = [14, 9, 16, 14, 11, 17, 13, 14, 11, 20, 14, 11, 14, 14];

pub fn plate_mix_proportions() -> Vec<f64> {
    let total: u64 = PLATE_MIX_UNITS.iter().sum();
    PLATE_MIX_UNITS
        .iter()
        .map(|&u| u as f64 / total as f64)
        .collect()
}

/// How row labels are assigned.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LabelScheme {
    /// Label = plate of origin.
    Plate,
    /// Each plate carries a contiguous window of `window` classes out of
    /// `n_classes`, laid down in ascending runs within the plate; the last
    /// plate carries every class and serves as the held-out plate. Window
    /// starts are spread evenly so the training plates jointly cover all
    /// classes.
    PlateWindowedClasses { n_classes: u16, window: u16 },
}

/// How row values are generated.
#[derive(Clone, Debug, PartialEq)]
pub enum ValueModel {
    /// Sparse rows: nnz uniform in `[nnz_min, nnz_max]`, distinct random
    /// columns, values uniform in [0, 1). Payload for I/O benchmarks.
    UniformNoise { nnz_min: u32, nnz_max: u32 },
    /// Dense rows: fixed per-class template plus fixed per-plate offset
    /// plus Gaussian noise. The plate offset is a covariate shift between
    /// plates, so per-plate statistics differ even for shared classes.
    ClassSignal {
        class_scale: f64,
        plate_scale: f64,
        noise: f64,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub total_rows: u64,
    pub n_cols: u64,
    pub seed: u64,
    pub labels: LabelScheme,
    pub values: ValueModel,
}

/// Splits `total` across weights by largest remainder, preserving the sum.
pub fn apportion(total: u64, units: &[u64]) -> Vec<u64> {
    let denom: u64 = units.iter().sum();
    assert!(denom > 0, "apportion over zero total weight");
    let mut out: Vec<u64> = Vec::with_capacity(units.len());
    let mut remainders: Vec<(u64, usize)> = Vec::with_capacity(units.len());
    let mut assigned = 0u64;
    for (i, &u) in units.iter().enumerate() {
        let exact = total as u128 * u as u128;
        let floor = (exact / denom as u128) as u64;
        let rem = (exact % denom as u128) as u64;
        out.push(floor);
        assigned += floor;
        remainders.push((rem, i));
    }
    remainders.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    for &(_, i) in remainders.iter().take((total - assigned) as usize) {
        out[i] += 1;
    }
    out
}

/// Class window `[start, end)` carried by one plate. The last plate gets
/// the full range.
pub fn plate_window(plate: usize, n_plates: usize, n_classes: u16, window: u16) -> (u16, u16) {
    if plate + 1 == n_plates {
        return (0, n_classes);
    }
    let span = (n_classes - window) as f64;
    let start = (plate as f64 * span / (n_plates - 2) as f64).round() as u16;
    (start, start + window)
}

/// Floyd's sampling of `k` distinct columns out of `n`, returned sorted.
fn sample_columns(rng: &mut impl RngCore, n: u64, k: u32) -> Vec<u32> {
    let mut out: Vec<u32> = Vec::with_capacity(k as usize);
    for j in (n - k as u64)..n {
        let t = rng::bounded(rng, j + 1) as u32;
        match out.binary_search(&t) {
            Ok(_) => {
                let pos = out.binary_search(&(j as u32)).unwrap_err();
                out.insert(pos, j as u32);
            }
            Err(pos) => out.insert(pos, t),
        }
    }
    out
}

fn row_seed(spec_seed: u64, global_row: u64) -> u64 {
    rng::derive_seed(rng::derive_seed(spec_seed, stream::SYNTH, 0), stream::SYNTH, global_row)
}

fn vector_seed(spec_seed: u64, purpose: u64, index: u64) -> u64 {
    rng::derive_seed(rng::derive_seed(spec_seed, stream::SYNTH, purpose), stream::SYNTH, index)
}

fn fixed_vector(spec_seed: u64, purpose: u64, index: u64, len: usize) -> Vec<f64> {
    let mut rng = rng::rng_from_seed(vector_seed(spec_seed, purpose, index));
    (0..len).map(|_| rng::normal_f64(&mut rng)).collect()
}

fn validate(spec: &SynthSpec) -> Result<(), StoreError> {
    let fail = |detail: String| Err(StoreError::SpecInvalid { detail });
    if spec.total_rows < PLATE_MIX_UNITS.len() as u64 {
        return fail(format!(
            "total_rows {} cannot cover {} plates",
            spec.total_rows,
            PLATE_MIX_UNITS.len()
        ));
    }
    if spec.n_cols == 0 || spec.n_cols > u32::MAX as u64 {
        return fail(format!("n_cols {} out of range", spec.n_cols));
    }
    match &spec.labels {
        LabelScheme::Plate => {}
        LabelScheme::PlateWindowedClasses { n_classes, window } => {
            if *n_classes == 0 || *window == 0 || window > n_classes {
                return fail(format!(
                    "window {window} of {n_classes} classes is not usable"
                ));
            }
        }
    }
    match &spec.values {
        ValueModel::UniformNoise { nnz_min, nnz_max } => {
            if nnz_min > nnz_max || *nnz_max as u64 > spec.n_cols {
                return fail(format!(
                    "nnz range [{nnz_min}, {nnz_max}] does not fit {} columns",
                    spec.n_cols
                ));
            }
        }
        ValueModel::ClassSignal { .. } => {}
    }
    Ok(())
}

/// Label codes for one plate, in storage order (ascending class runs).
fn plate_labels(spec: &SynthSpec, plate: usize, plate_rows: u64) -> Vec<u16> {
    match &spec.labels {
        LabelScheme::Plate => vec![plate as u16; plate_rows as usize],
        LabelScheme::PlateWindowedClasses { n_classes, window } => {
            let (start, end) = plate_window(plate, PLATE_MIX_UNITS.len(), *n_classes, *window);
            let counts = apportion(plate_rows, &vec![1u64; (end - start) as usize]);
            let mut labels = Vec::with_capacity(plate_rows as usize);
            for (k, &count) in counts.iter().enumerate() {
                labels.extend(std::iter::repeat_n(start + k as u16, count as usize));
            }
            labels
        }
    }
}

fn vocabulary(spec: &SynthSpec) -> Vec<String> {
    match &spec.labels {
        LabelScheme::Plate => (0..PLATE_MIX_UNITS.len())
            .map(|p| format!("plate_{p:02}"))
            .collect(),
        LabelScheme::PlateWindowedClasses { n_classes, .. } => {
            (0..*n_classes).map(|c| format!("class_{c:02}")).collect()
        }
    }
}

/// Generates a store under `dir` and returns the manifest path.
///
/// Deterministic: the same spec produces bit-identical shard files.
pub fn generate(dir: &Path, spec: &SynthSpec) -> Result<PathBuf, StoreError> {
    validate(spec)?;
    std::fs::create_dir_all(dir)?;
    let plate_rows = apportion(spec.total_rows, &PLATE_MIX_UNITS);
    if plate_rows.contains(&0) {
        return Err(StoreError::SpecInvalid {
            detail: format!("total_rows {} leaves an empty plate", spec.total_rows),
        });
    }
    let vocab = vocabulary(spec);

    let templates: Vec<Vec<f64>>;
    let offsets: Vec<Vec<f64>>;
    let dense_cols: Vec<u32>;
    match &spec.values {
        ValueModel::ClassSignal { .. } => {
            templates = (0..vocab.len())
                .map(|c| fixed_vector(spec.seed, 1, c as u64, spec.n_cols as usize))
                .collect();
            offsets = (0..PLATE_MIX_UNITS.len())
                .map(|p| fixed_vector(spec.seed, 2, p as u64, spec.n_cols as usize))
                .collect();
            dense_cols = (0..spec.n_cols as u32).collect();
        }
        ValueModel::UniformNoise { .. } => {
            templates = Vec::new();
            offsets = Vec::new();
            dense_cols = Vec::new();
        }
    }

    let mut shards = Vec::with_capacity(PLATE_MIX_UNITS.len());
    let mut row_offset = 0u64;
    for (plate, &rows) in plate_rows.iter().enumerate() {
        let shard_name = format!("shard_{plate:03}.qsd");
        let labels = plate_labels(spec, plate, rows);
        let nnz: u64 = match &spec.values {
            ValueModel::ClassSignal { .. } => rows * spec.n_cols,
            ValueModel::UniformNoise { nnz_min, nnz_max } => {
                let span = (*nnz_max - *nnz_min + 1) as u64;
                (0..rows)
                    .map(|r| {
                        let mut rng = rng::rng_from_seed(row_seed(spec.seed, row_offset + r));
                        *nnz_min as u64 + rng::bounded(&mut rng, span)
                    })
                    .sum()
            }
        };
        let mut writer = ShardWriter::create(
            &dir.join(&shard_name),
            rows,
            spec.n_cols,
            nnz,
            vocab.len() as u16,
        )?;
        let mut vals = Vec::new();
        for r in 0..rows {
            let mut rng = rng::rng_from_seed(row_seed(spec.seed, row_offset + r));
            let label = labels[r as usize];
            match &spec.values {
                ValueModel::UniformNoise { nnz_min, nnz_max } => {
                    let span = (*nnz_max - *nnz_min + 1) as u64;
                    let k = *nnz_min + rng::bounded(&mut rng, span) as u32;
                    let cols = sample_columns(&mut rng, spec.n_cols, k);
                    vals.clear();
                    vals.extend((0..k).map(|_| rng::uniform_f64(&mut rng) as f32));
                    writer.push_row(&cols, &vals, label)?;
                }
                ValueModel::ClassSignal {
                    class_scale,
                    plate_scale,
                    noise,
                } => {
                    let template = &templates[label as usize];
                    let offset = &offsets[plate];
                    vals.clear();
                    vals.extend((0..spec.n_cols as usize).map(|j| {
                        (class_scale * template[j]
                            + plate_scale * offset[j]
                            + noise * rng::normal_f64(&mut rng)) as f32
                    }));
                    writer.push_row(&dense_cols, &vals, label)?;
                }
            }
        }
        writer.finish()?;
        shards.push(ShardEntry {
            path: shard_name,
            rows,
            row_offset,
            plate: format!("plate_{plate:02}"),
        });
        row_offset += rows;
    }

    let manifest = Manifest {
        version: super::format::FORMAT_VERSION,
        total_rows: spec.total_rows,
        n_cols: spec.n_cols,
        labels: vocab,
        shards,
    };
    let manifest_path = dir.join("manifest.toml");
    manifest.save(&manifest_path)?;
    Ok(manifest_path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::{RowRange, Store};
    use tempfile::TempDir;

    #[test]
    fn apportion_is_exact_when_divisible() {
        let rows = apportion(196_608, &PLATE_MIX_UNITS);
        let want: Vec<u64> = PLATE_MIX_UNITS.iter().map(|&u| u * 1024).collect();
        assert_eq!(rows, want);
    }

    #[test]
    fn apportion_preserves_total_on_awkward_sizes() {
        for total in [14, 15, 100, 191, 193, 12_345] {
            let rows = apportion(total, &PLATE_MIX_UNITS);
            assert_eq!(rows.iter().sum::<u64>(), total);
        }
        assert_eq!(apportion(7, &[1, 1, 1]).iter().sum::<u64>(), 7);
    }

    #[test]
    fn windows_cover_all_classes_and_last_plate_sees_everything() {
        let n_plates = PLATE_MIX_UNITS.len();
        let mut covered = [false; 27];
        for p in 0..n_plates - 1 {
            let (start, end) = plate_window(p, n_plates, 27, 9);
            assert_eq!(end - start, 9);
            assert!(end <= 27);
            for c in start..end {
                covered[c as usize] = true;
            }
        }
        assert!(covered.iter().all(|&c| c));
        assert_eq!(plate_window(n_plates - 1, n_plates, 27, 9), (0, 27));
    }

    fn tiny_spec() -> SynthSpec {
        SynthSpec {
            total_rows: 400,
            n_cols: 64,
            seed: 7,
            labels: LabelScheme::Plate,
            values: ValueModel::UniformNoise {
                nnz_min: 2,
                nnz_max: 6,
            },
        }
    }

    #[test]
    fn generated_store_matches_its_spec() {
        let dir = TempDir::new().unwrap();
        let manifest = generate(dir.path(), &tiny_spec()).unwrap();
        let store = Store::open(&manifest).unwrap();
        assert_eq!(store.total_rows(), 400);
        let plate_rows = apportion(400, &PLATE_MIX_UNITS);
        for (p, entry) in store.manifest().shards.iter().enumerate() {
            assert_eq!(entry.rows, plate_rows[p]);
        }
        let block = store
            .read_rows(&[RowRange { start: 0, end: 400 }])
            .unwrap();
        for i in 0..400usize {
            assert_eq!(block.labels[i], block.plates[i]);
            let lo = block.indptr[i] as usize;
            let hi = block.indptr[i + 1] as usize;
            assert!((2..=6).contains(&(hi - lo)));
            let cols = &block.cols[lo..hi];
            assert!(cols.windows(2).all(|w| w[0] < w[1]));
            assert!(block.vals[lo..hi].iter().all(|v| (0.0..1.0).contains(v)));
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = TempDir::new().unwrap();
        let b = TempDir::new().unwrap();
        generate(a.path(), &tiny_spec()).unwrap();
        generate(b.path(), &tiny_spec()).unwrap();
        for p in 0..PLATE_MIX_UNITS.len() {
            let name = format!("shard_{p:03}.qsd");
            let x = std::fs::read(a.path().join(&name)).unwrap();
            let y = std::fs::read(b.path().join(&name)).unwrap();
            assert!(x == y, "{name} differs between runs");
        }
        let mut other = tiny_spec();
        other.seed = 8;
        let c = TempDir::new().unwrap();
        generate(c.path(), &other).unwrap();
        let x = std::fs::read(a.path().join("shard_000.qsd")).unwrap();
        let y = std::fs::read(c.path().join("shard_000.qsd")).unwrap();
        assert!(x != y, "different seeds should differ");
    }

    #[test]
    fn windowed_labels_run_ascending_within_plates() {
        let dir = TempDir::new().unwrap();
        let spec = SynthSpec {
            total_rows: 2_000,
            n_cols: 16,
            seed: 3,
            labels: LabelScheme::PlateWindowedClasses {
                n_classes: 27,
                window: 9,
            },
            values: ValueModel::UniformNoise {
                nnz_min: 1,
                nnz_max: 4,
            },
        };
        let manifest = generate(dir.path(), &spec).unwrap();
        let store = Store::open(&manifest).unwrap();
        let n_plates = PLATE_MIX_UNITS.len();
        for p in 0..n_plates {
            let span = store.shard_span(p);
            let block = store.read_rows(&[span]).unwrap();
            let (start, end) = plate_window(p, n_plates, 27, 9);
            assert!(block.labels.windows(2).all(|w| w[0] <= w[1]));
            assert!(block.labels.iter().all(|&l| l >= start && l < end));
            let mut distinct = block.labels.clone();
            distinct.dedup();
            assert_eq!(distinct.len(), (end - start) as usize);
        }
    }

    #[test]
    fn class_signal_rows_are_dense_and_finite() {
        let dir = TempDir::new().unwrap();
        let spec = SynthSpec {
            total_rows: 200,
            n_cols: 24,
            seed: 11,
            labels: LabelScheme::PlateWindowedClasses {
                n_classes: 27,
                window: 9,
            },
            values: ValueModel::ClassSignal {
                class_scale: 1.0,
                plate_scale: 0.5,
                noise: 0.25,
            },
        };
        let manifest = generate(dir.path(), &spec).unwrap();
        let store = Store::open(&manifest).unwrap();
        let block = store
            .read_rows(&[RowRange { start: 0, end: 200 }])
            .unwrap();
        for i in 0..200usize {
            let lo = block.indptr[i] as usize;
            let hi = block.indptr[i + 1] as usize;
            assert_eq!(hi - lo, 24);
            assert!(block.vals[lo..hi].iter().all(|v| v.is_finite()));
        }
        // same class in different plates differs by the plate offset: check
        // the store is not degenerate (values vary across plates)
        let span0 = store.shard_span(0);
        let span1 = store.shard_span(1);
        let a = store.read_rows(&[span0]).unwrap();
        let b = store.read_rows(&[span1]).unwrap();
        assert_ne!(a.vals[..24], b.vals[..24]);
    }

    #[test]
    fn bad_specs_are_rejected() {
        let dir = TempDir::new().unwrap();
        let mut spec = tiny_spec();
        spec.total_rows = 5;
        assert!(matches!(
            generate(dir.path(), &spec),
            Err(StoreError::SpecInvalid { .. })
        ));
        let mut spec = tiny_spec();
        spec.values = ValueModel::UniformNoise {
            nnz_min: 9,
            nnz_max: 3,
        };
        assert!(matches!(
            generate(dir.path(), &spec),
            Err(StoreError::SpecInvalid { .. })
        ));
        let mut spec = tiny_spec();
        spec.values = ValueModel::UniformNoise {
            nnz_min: 1,
            nnz_max: 100,
        };
        assert!(matches!(
            generate(dir.path(), &spec),
            Err(StoreError::SpecInvalid { .. })
        ));
        let mut spec = tiny_spec();
        spec.labels = LabelScheme::PlateWindowedClasses {
            n_classes: 5,
            window: 9,
        };
        assert!(matches!(
            generate(dir.path(), &spec),
            Err(StoreError::SpecInvalid { .. })
        ));
    }
}
