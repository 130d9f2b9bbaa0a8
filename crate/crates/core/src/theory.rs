//! Minibatch label entropy: definition, bias bounds, and a Monte Carlo
//! simulator for the block-sampling model.
//!
//! For a minibatch of `m` cells with per-label counts `C_k`, the entropy
//! is `H(C) = -sum((C_k/m) * log2(C_k/m))`. Under block sampling with
//! blocks of `b` cells that are label-constant (one plate per block), the
//! expected entropy is squeezed between two plug-in bias corrections of
//! the source distribution's entropy `H(p)`:
//!
//! ```text
//! H(p) - (K-1) * b / (2 m ln2)  <=  E[H(C)]  <=  H(p) - (K-1) / (2 m ln2)
//! ```
//!
//! The upper expression is the classic plug-in bias at sample size `m`
//! (reached as the fetch factor grows); the lower expression is the same
//! bias at the effective sample size `m / b` (one independent draw per
//! block, reached at fetch factor 1).

use crate::pipeline::{Minibatch, PayloadPart, PipelineError, PART_LABELS};
use crate::rng::{self, derive_seed, rng_from_seed, stream};
use crate::store::synth::PLATE_MIX_UNITS;

const LN2: f64 = std::f64::consts::LN_2;

#[derive(Debug, thiserror::Error)]
pub enum TheoryError {
    #[error("distribution invalid: {detail}")]
    BadDistribution { detail: String },
    #[error("counts sum to {got}, expected {expected}")]
    CountSum { expected: u64, got: u64 },
    #[error("block size {b} exceeds batch size {m}; the sandwich assumes at least one block per batch")]
    BlockExceedsBatch { b: u64, m: u64 },
    #[error("{field} must be at least 1")]
    ZeroArg { field: &'static str },
    #[error("minibatch payload has no u16 part named {part}")]
    MissingLabels { part: String },
    #[error("pipeline failed while measuring entropy: {0}")]
    Pipeline(#[from] PipelineError),
}

/// Categorical distribution over `K` labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelDistribution {
    p: Vec<f64>,
}

impl LabelDistribution {
    pub fn new(p: Vec<f64>) -> Result<LabelDistribution, TheoryError> {
        if p.is_empty() {
            return Err(TheoryError::BadDistribution {
                detail: "no categories".into(),
            });
        }
        if let Some(bad) = p.iter().find(|x| !x.is_finite() || **x < 0.0) {
            return Err(TheoryError::BadDistribution {
                detail: format!("entry {bad} is negative or non-finite"),
            });
        }
        let sum: f64 = p.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(TheoryError::BadDistribution {
                detail: format!("entries sum to {sum}, expected 1"),
            });
        }
        Ok(LabelDistribution { p })
    }

    pub fn from_counts(counts: &[u64]) -> Result<LabelDistribution, TheoryError> {
        let total: u64 = counts.iter().sum();
        if total == 0 {
            return Err(TheoryError::BadDistribution {
                detail: "counts are all zero".into(),
            });
        }
        LabelDistribution::new(counts.iter().map(|&c| c as f64 / total as f64).collect())
    }

    /// The fourteen-plate mix used by the synthetic corpus
    /// ([`PLATE_MIX_UNITS`]); its entropy is 3.7801 bits.
    pub fn plate_mix() -> LabelDistribution {
        LabelDistribution::from_counts(&PLATE_MIX_UNITS).expect("fixed units are valid")
    }

    pub fn k(&self) -> usize {
        self.p.len()
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.p
    }

    /// `H(p)` in bits.
    pub fn entropy_bits(&self) -> f64 {
        -self
            .p
            .iter()
            .filter(|x| **x > 0.0)
            .map(|x| x * x.log2())
            .sum::<f64>()
    }
}

/// Minibatch entropy in bits from per-label counts summing to `m`.
pub fn entropy(counts: &[u64], m: u64) -> Result<f64, TheoryError> {
    if m == 0 {
        return Err(TheoryError::ZeroArg { field: "m" });
    }
    let total: u64 = counts.iter().sum();
    if total != m {
        return Err(TheoryError::CountSum {
            expected: m,
            got: total,
        });
    }
    Ok(entropy_unchecked(counts, m))
}

fn entropy_unchecked(counts: &[u64], m: u64) -> f64 {
    let m = m as f64;
    -counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let q = c as f64 / m;
            q * q.log2()
        })
        .sum::<f64>()
}

/// The sandwich around expected minibatch entropy for batch size `m` and
/// block size `b`, in bits.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EntropyBounds {
    pub h_p: f64,
    pub lower: f64,
    pub upper: f64,
    pub m: u64,
    pub b: u64,
    pub k: usize,
}

pub fn bounds(p: &LabelDistribution, m: u64, b: u64) -> Result<EntropyBounds, TheoryError> {
    if m == 0 {
        return Err(TheoryError::ZeroArg { field: "m" });
    }
    if b == 0 {
        return Err(TheoryError::ZeroArg { field: "b" });
    }
    if b > m {
        return Err(TheoryError::BlockExceedsBatch { b, m });
    }
    let h_p = p.entropy_bits();
    let k = p.k();
    let bias = (k as f64 - 1.0) / (2.0 * m as f64 * LN2);
    Ok(EntropyBounds {
        h_p,
        lower: h_p - bias * b as f64,
        upper: h_p - bias,
        m,
        b,
        k,
    })
}

/// Empirical entropy over a set of minibatches.
#[derive(Clone, Debug, PartialEq)]
pub struct EntropyReport {
    pub empirical_mean: f64,
    /// Sample standard deviation across minibatches.
    pub empirical_std: f64,
    /// Monte Carlo standard error of the mean.
    pub std_error: f64,
    pub n_minibatches: u64,
    /// Present when the sandwich applies (`b <= m`).
    pub bounds: Option<EntropyBounds>,
}

fn report_from_moments(
    sum: f64,
    sum_sq: f64,
    n: u64,
    bounds: Option<EntropyBounds>,
) -> EntropyReport {
    let mean = sum / n as f64;
    let var = if n > 1 {
        ((sum_sq - sum * sum / n as f64) / (n as f64 - 1.0)).max(0.0)
    } else {
        0.0
    };
    let std = var.sqrt();
    EntropyReport {
        empirical_mean: mean,
        empirical_std: std,
        std_error: std / (n as f64).sqrt(),
        n_minibatches: n,
        bounds,
    }
}

/// Trials are split across fixed shards with independently derived seeds
/// and merged in shard order, so the result is one number regardless of
/// how the shards are executed.
const SIM_SHARDS: u64 = 16;

pub const DEFAULT_SIM_MINIBATCHES: u64 = 10_000;

/// Monte Carlo expected minibatch entropy under the plate-constant block
/// model: each fetch spans `ceil(m*f / b)` blocks (the last one short when
/// `b` does not divide `m*f`), block labels are drawn IID from `p`, every
/// block contributes one label-constant run of cells, and the minibatch
/// takes `m` of the `m*f` cells uniformly without replacement.
pub fn simulate(
    p: &LabelDistribution,
    m: u64,
    b: u64,
    f: u64,
    n_minibatches: u64,
    seed: u64,
) -> Result<EntropyReport, TheoryError> {
    for (field, v) in [
        ("m", m),
        ("b", b),
        ("f", f),
        ("n_minibatches", n_minibatches),
    ] {
        if v == 0 {
            return Err(TheoryError::ZeroArg { field });
        }
    }
    let cells = (m * f) as usize;
    let n_blocks = cells.div_ceil(b as usize);
    let mut cum = Vec::with_capacity(p.k());
    let mut acc = 0.0;
    for &x in p.probabilities() {
        acc += x;
        cum.push(acc);
    }
    if let Some(last) = cum.last_mut() {
        *last = 1.0;
    }

    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    let mut cell_labels: Vec<u16> = vec![0; cells];
    let mut counts = vec![0u64; p.k()];
    let shards = SIM_SHARDS.min(n_minibatches);
    for shard in 0..shards {
        let trials = n_minibatches / shards + u64::from(shard < n_minibatches % shards);
        let mut rng = rng_from_seed(derive_seed(seed, stream::SIM_SHARD, shard));
        for _ in 0..trials {
            let mut filled = 0usize;
            for blk in 0..n_blocks {
                let u = rng::uniform_f64(&mut rng);
                let label = cum.partition_point(|&c| c <= u) as u16;
                let run = (b as usize).min(cells - blk * b as usize);
                cell_labels[filled..filled + run].fill(label);
                filled += run;
            }
            debug_assert_eq!(filled, cells);
            rng::partial_shuffle(&mut rng, &mut cell_labels, m as usize);
            counts.fill(0);
            for &label in &cell_labels[..m as usize] {
                counts[label as usize] += 1;
            }
            let h = entropy_unchecked(&counts, m);
            sum += h;
            sum_sq += h * h;
        }
    }
    let sandwich = if b <= m {
        Some(bounds(p, m, b)?)
    } else {
        None
    };
    Ok(report_from_moments(sum, sum_sq, n_minibatches, sandwich))
}

/// Empirical label entropy over the first `n_minibatches` of a pipeline
/// stream; the u16 payload part named `label_part` supplies the labels.
/// Short minibatches contribute at their own length.
pub fn measure_pipeline_entropy<I>(
    stream: I,
    label_part: &str,
    n_minibatches: u64,
) -> Result<EntropyReport, TheoryError>
where
    I: Iterator<Item = Result<Minibatch, PipelineError>>,
{
    if n_minibatches == 0 {
        return Err(TheoryError::ZeroArg {
            field: "n_minibatches",
        });
    }
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    let mut n = 0u64;
    let mut counts: Vec<u64> = Vec::new();
    for batch in stream.take(n_minibatches as usize) {
        let batch = batch?;
        let Some(PayloadPart::U16(labels)) = batch.payload.part(label_part) else {
            return Err(TheoryError::MissingLabels {
                part: label_part.to_string(),
            });
        };
        counts.iter_mut().for_each(|c| *c = 0);
        for &label in labels {
            if label as usize >= counts.len() {
                counts.resize(label as usize + 1, 0);
            }
            counts[label as usize] += 1;
        }
        let h = entropy_unchecked(&counts, labels.len() as u64);
        sum += h;
        sum_sq += h * h;
        n += 1;
    }
    if n == 0 {
        return Err(TheoryError::ZeroArg {
            field: "stream length",
        });
    }
    Ok(report_from_moments(sum, sum_sq, n, None))
}

/// Default label part for [`measure_pipeline_entropy`].
pub const LABEL_PART: &str = PART_LABELS;
