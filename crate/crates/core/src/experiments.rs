//! Linear-probe comparison of loading strategies.
//!
//! Trains softmax classifiers over the minibatch stream each strategy
//! produces and scores them on a held-out plate. The store for this
//! experiment is generated with class windows tied to plate position, so
//! a sequential reader sees the classes in near-sorted order while a
//! shuffling reader sees a stationary mixture; the measured macro F1 gap
//! is then attributable to stream order alone.

use std::sync::Arc;
use std::time::Instant;

use crate::pipeline::{
    iterate, iterate_buffered_stream, CallbackSet, DenseRows, Minibatch, MultiPayload,
    PayloadPart, PipelineError, PART_LABELS, PART_ROWS,
};
use crate::rng::{self, stream};
use crate::sampling::{build_plan, SamplerConfig, Strategy};
use crate::store::synth::{LabelScheme, SynthSpec, ValueModel};
use crate::store::{RowRange, Store, StoreError};

pub const DEFAULT_BATCH_SIZE: u64 = 64;
pub const DEFAULT_LEARNING_RATE: f64 = 2e-3;

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error("bad experiment config: {detail}")]
    Config { detail: String },
    #[error("step {step}: loss is not finite")]
    NonFiniteLoss { step: u64 },
    #[error("model holds non-finite parameters after training")]
    NonFiniteModel,
    #[error("empty test set")]
    EmptyTestSet,
    #[error("label {label} out of range for {n_classes} classes")]
    LabelOutOfRange { label: u16, n_classes: usize },
    #[error("minibatch payload lacks {part}")]
    MissingPart { part: &'static str },
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

fn config_err<T>(detail: String) -> Result<T, ExperimentError> {
    Err(ExperimentError::Config { detail })
}

/// Softmax regression weights, stored row-major as `weights[j * C + k]`
/// for feature `j` and class `k`.
#[derive(Clone, Debug)]
pub struct LinearModel {
    pub n_features: usize,
    pub n_classes: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LinearModel {
    /// Small Gaussian init so tied logits break deterministically.
    pub fn new(n_features: usize, n_classes: usize, init_seed: u64) -> LinearModel {
        let mut rng = rng::rng_from_seed(init_seed);
        let weights = (0..n_features * n_classes)
            .map(|_| 0.01 * rng::normal_f64(&mut rng))
            .collect();
        LinearModel {
            n_features,
            n_classes,
            weights,
            bias: vec![0.0; n_classes],
        }
    }

    pub fn logits_into(&self, x: &[f32], out: &mut [f64]) {
        out.copy_from_slice(&self.bias);
        for (j, &xj) in x.iter().enumerate() {
            if xj == 0.0 {
                continue;
            }
            let xj = xj as f64;
            let w = &self.weights[j * self.n_classes..(j + 1) * self.n_classes];
            for (o, &wk) in out.iter_mut().zip(w) {
                *o += xj * wk;
            }
        }
    }

    pub fn predict_row(&self, x: &[f32]) -> usize {
        let mut logits = vec![0.0; self.n_classes];
        self.logits_into(x, &mut logits);
        argmax(&logits)
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().chain(&self.bias).all(|v| v.is_finite())
    }
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Mean softmax cross-entropy over the batch and its gradient, written
/// into `gw` and `gb` (same layout as the model parameters).
pub fn loss_and_grad(
    model: &LinearModel,
    x: &DenseRows,
    y: &[u16],
    gw: &mut [f64],
    gb: &mut [f64],
) -> Result<f64, ExperimentError> {
    let c = model.n_classes;
    if x.n_cols != model.n_features {
        return config_err(format!(
            "batch has {} features, model expects {}",
            x.n_cols, model.n_features
        ));
    }
    if x.n_rows() != y.len() || y.is_empty() {
        return config_err(format!(
            "batch shape mismatch: {} rows, {} labels",
            x.n_rows(),
            y.len()
        ));
    }
    if gw.len() != model.weights.len() || gb.len() != model.bias.len() {
        return config_err("gradient buffers do not match the model".into());
    }
    gw.fill(0.0);
    gb.fill(0.0);
    let mut logits = vec![0.0f64; c];
    let mut loss = 0.0;
    for (i, &label) in y.iter().enumerate() {
        let label = label as usize;
        if label >= c {
            return Err(ExperimentError::LabelOutOfRange {
                label: label as u16,
                n_classes: c,
            });
        }
        let row = x.row(i);
        model.logits_into(row, &mut logits);
        let peak = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|&l| (l - peak).exp()).sum();
        let log_z = peak + z.ln();
        loss += log_z - logits[label];
        for l in logits.iter_mut() {
            *l = (*l - log_z).exp();
        }
        logits[label] -= 1.0;
        for (k, &d) in logits.iter().enumerate() {
            gb[k] += d;
        }
        for (j, &xj) in row.iter().enumerate() {
            if xj == 0.0 {
                continue;
            }
            let xj = xj as f64;
            let gwj = &mut gw[j * c..(j + 1) * c];
            for (g, &d) in gwj.iter_mut().zip(logits.iter()) {
                *g += xj * d;
            }
        }
    }
    let inv_n = 1.0 / y.len() as f64;
    for g in gw.iter_mut() {
        *g *= inv_n;
    }
    for g in gb.iter_mut() {
        *g *= inv_n;
    }
    Ok(loss * inv_n)
}

/// Bias-corrected Adam over one parameter slice.
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(len: usize, beta1: f64, beta2: f64, eps: f64) -> Adam {
        Adam {
            beta1,
            beta2,
            eps,
            t: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub n_features: usize,
    pub n_classes: usize,
    pub learning_rate: f64,
    pub epochs: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub init_seed: u64,
}

impl TrainConfig {
    pub fn new(n_features: usize, n_classes: usize) -> TrainConfig {
        TrainConfig {
            n_features,
            n_classes,
            learning_rate: DEFAULT_LEARNING_RATE,
            epochs: 1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            init_seed: 0,
        }
    }

    fn validate(&self) -> Result<(), ExperimentError> {
        if self.learning_rate <= 0.0 || self.learning_rate.is_nan() {
            return config_err(format!("learning rate {} must be > 0", self.learning_rate));
        }
        if self.n_features == 0 || self.n_classes < 2 {
            return config_err(format!(
                "{} features and {} classes cannot be trained",
                self.n_features, self.n_classes
            ));
        }
        if self.epochs == 0 {
            return config_err("epochs must be >= 1".into());
        }
        Ok(())
    }
}

/// Incremental trainer; optimizer state persists across the streams it
/// consumes, so multi-epoch runs feed it one epoch stream at a time.
pub struct Trainer {
    model: LinearModel,
    adam_w: Adam,
    adam_b: Adam,
    lr: f64,
    steps: u64,
    gw: Vec<f64>,
    gb: Vec<f64>,
}

impl Trainer {
    pub fn new(cfg: &TrainConfig) -> Result<Trainer, ExperimentError> {
        cfg.validate()?;
        let model = LinearModel::new(cfg.n_features, cfg.n_classes, cfg.init_seed);
        Ok(Trainer {
            adam_w: Adam::new(model.weights.len(), cfg.beta1, cfg.beta2, cfg.eps),
            adam_b: Adam::new(model.bias.len(), cfg.beta1, cfg.beta2, cfg.eps),
            lr: cfg.learning_rate,
            steps: 0,
            gw: vec![0.0; model.weights.len()],
            gb: vec![0.0; model.bias.len()],
            model,
        })
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn consume<I>(&mut self, stream: I) -> Result<u64, ExperimentError>
    where
        I: Iterator<Item = Result<Minibatch, PipelineError>>,
    {
        let mut seen = 0;
        for batch in stream {
            let batch = batch?;
            let Some(PayloadPart::Dense(x)) = batch.payload.part(PART_ROWS) else {
                return Err(ExperimentError::MissingPart {
                    part: "dense rows",
                });
            };
            let Some(PayloadPart::U16(y)) = batch.payload.part(PART_LABELS) else {
                return Err(ExperimentError::MissingPart { part: "labels" });
            };
            let loss = loss_and_grad(&self.model, x, y, &mut self.gw, &mut self.gb)?;
            if !loss.is_finite() {
                return Err(ExperimentError::NonFiniteLoss { step: self.steps });
            }
            self.adam_w.step(&mut self.model.weights, &self.gw, self.lr);
            self.adam_b.step(&mut self.model.bias, &self.gb, self.lr);
            self.steps += 1;
            seen += 1;
        }
        Ok(seen)
    }

    pub fn finish(self) -> Result<LinearModel, ExperimentError> {
        if !self.model.is_finite() {
            return Err(ExperimentError::NonFiniteModel);
        }
        Ok(self.model)
    }
}

/// One-pass training over a prepared minibatch stream.
pub fn train<I>(stream: I, cfg: &TrainConfig) -> Result<LinearModel, ExperimentError>
where
    I: Iterator<Item = Result<Minibatch, PipelineError>>,
{
    let mut trainer = Trainer::new(cfg)?;
    trainer.consume(stream)?;
    trainer.finish()
}

#[derive(Clone, Debug)]
pub struct EvalResult {
    pub macro_f1: f64,
    pub per_class_f1: Vec<f64>,
    /// Row-major counts, `confusion[true * C + predicted]`.
    pub confusion: Vec<u64>,
}

/// Macro F1 over all model classes; a class never predicted and never
/// present still contributes zero to the mean.
pub fn evaluate(model: &LinearModel, x: &DenseRows, y: &[u16]) -> Result<EvalResult, ExperimentError> {
    if y.is_empty() {
        return Err(ExperimentError::EmptyTestSet);
    }
    let c = model.n_classes;
    if x.n_cols != model.n_features || x.n_rows() != y.len() {
        return config_err(format!(
            "test shape {}x{} does not fit model {}x{} with {} labels",
            x.n_rows(),
            x.n_cols,
            model.n_features,
            c,
            y.len()
        ));
    }
    let mut confusion = vec![0u64; c * c];
    let mut logits = vec![0.0f64; c];
    for (i, &label) in y.iter().enumerate() {
        let label = label as usize;
        if label >= c {
            return Err(ExperimentError::LabelOutOfRange {
                label: label as u16,
                n_classes: c,
            });
        }
        model.logits_into(x.row(i), &mut logits);
        confusion[label * c + argmax(&logits)] += 1;
    }
    let mut per_class_f1 = Vec::with_capacity(c);
    for k in 0..c {
        let tp = confusion[k * c + k] as f64;
        let predicted: u64 = (0..c).map(|t| confusion[t * c + k]).sum();
        let actual: u64 = confusion[k * c..(k + 1) * c].iter().sum();
        let precision = if predicted > 0 { tp / predicted as f64 } else { 0.0 };
        let recall = if actual > 0 { tp / actual as f64 } else { 0.0 };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        per_class_f1.push(f1);
    }
    let macro_f1 = per_class_f1.iter().sum::<f64>() / c as f64;
    Ok(EvalResult {
        macro_f1,
        per_class_f1,
        confusion,
    })
}

/// Per-feature affine map fitted on a subsample of the training split.
#[derive(Clone, Debug)]
pub struct Preprocess {
    pub mean: Vec<f64>,
    pub inv_std: Vec<f64>,
}

impl Preprocess {
    pub fn n_cols(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, rows: &mut DenseRows) {
        assert_eq!(rows.n_cols, self.n_cols());
        for (i, v) in rows.values.iter_mut().enumerate() {
            let j = i % self.mean.len();
            *v = ((*v as f64 - self.mean[j]) * self.inv_std[j]) as f32;
        }
    }
}

/// Fits feature means and scales on evenly spaced row chunks, so every
/// plate in the training split contributes.
pub fn fit_preprocess(
    store: &Store,
    train_rows: u64,
    chunks: u64,
    chunk_rows: u64,
) -> Result<Preprocess, ExperimentError> {
    if train_rows == 0 || chunks == 0 || chunk_rows == 0 {
        return config_err("preprocess needs a non-empty sample".into());
    }
    let n_cols = store.n_cols() as usize;
    let mut ranges = Vec::new();
    if train_rows <= chunks * chunk_rows {
        ranges.push(RowRange {
            start: 0,
            end: train_rows,
        });
    } else {
        let stride = train_rows / chunks;
        for i in 0..chunks {
            let start = i * stride;
            ranges.push(RowRange {
                start,
                end: (start + chunk_rows).min(train_rows),
            });
        }
    }
    let block = store.read_rows(&ranges)?;
    let n = (block.indptr.len() - 1) as f64;
    let mut sum = vec![0.0f64; n_cols];
    let mut sumsq = vec![0.0f64; n_cols];
    for (pos, &col) in block.cols.iter().enumerate() {
        let v = block.vals[pos] as f64;
        sum[col as usize] += v;
        sumsq[col as usize] += v * v;
    }
    let mut mean = Vec::with_capacity(n_cols);
    let mut inv_std = Vec::with_capacity(n_cols);
    for j in 0..n_cols {
        let mu = sum[j] / n;
        let var = (sumsq[j] / n - mu * mu).max(0.0);
        mean.push(mu);
        inv_std.push(1.0 / var.sqrt().max(1e-6));
    }
    Ok(Preprocess { mean, inv_std })
}

/// Maps stored fine labels onto a task's class set.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LabelCollapse {
    Identity,
    /// `min(label / div, cap)`: groups consecutive fine classes.
    DivCap { div: u16, cap: u16 },
}

impl LabelCollapse {
    pub fn apply(&self, label: u16) -> u16 {
        match self {
            LabelCollapse::Identity => label,
            LabelCollapse::DivCap { div, cap } => (label / div).min(*cap),
        }
    }
}

#[derive(Clone, Debug)]
pub struct TaskSpec {
    pub name: String,
    pub n_classes: u16,
    pub collapse: LabelCollapse,
}

#[derive(Clone, Debug)]
pub struct StrategySpec {
    pub name: String,
    pub strategy: Strategy,
    pub block_size: u64,
    pub fetch_factor: u64,
}

/// The four loading strategies under comparison. Pure streaming runs at
/// fetch factor 1 because the in-memory reshuffle acts within one fetch
/// set; any larger factor would hand it a free shuffle window.
pub fn default_strategies(batch_size: u64) -> Vec<StrategySpec> {
    vec![
        StrategySpec {
            name: "streaming".into(),
            strategy: Strategy::Streaming,
            block_size: 1,
            fetch_factor: 1,
        },
        StrategySpec {
            name: "streaming_buffered".into(),
            strategy: Strategy::StreamingBuffered {
                buffer_rows: 256 * batch_size,
            },
            block_size: 1,
            fetch_factor: 1,
        },
        StrategySpec {
            name: "block_shuffling".into(),
            strategy: Strategy::BlockShuffling,
            block_size: 16,
            fetch_factor: 256,
        },
        StrategySpec {
            name: "random".into(),
            strategy: Strategy::BlockShuffling,
            block_size: 1,
            fetch_factor: 256,
        },
    ]
}

/// Fine labels as stored, plus a broad grouping of seven fine classes
/// per broad class.
pub fn default_tasks() -> Vec<TaskSpec> {
    vec![
        TaskSpec {
            name: "fine27".into(),
            n_classes: 27,
            collapse: LabelCollapse::Identity,
        },
        TaskSpec {
            name: "broad4".into(),
            n_classes: 4,
            collapse: LabelCollapse::DivCap { div: 7, cap: 3 },
        },
    ]
}

/// Store recipe whose class structure is deliberately hostile to
/// sequential reads: class windows slide with plate position and every
/// plate adds its own feature offset.
pub fn adversarial_store_spec(total_rows: u64, n_cols: u64, seed: u64) -> SynthSpec {
    SynthSpec {
        total_rows,
        n_cols,
        seed,
        labels: LabelScheme::PlateWindowedClasses {
            n_classes: 27,
            window: 9,
        },
        values: ValueModel::ClassSignal {
            class_scale: 0.3,
            plate_scale: 1.2,
            noise: 1.0,
        },
    }
}

#[derive(Clone, Debug)]
pub struct CompareSpec {
    pub batch_size: u64,
    pub learning_rate: f64,
    pub epochs: u64,
    pub seeds: Vec<u64>,
    /// Plate held out for evaluation; must be the trailing shard.
    pub test_plate: usize,
    pub strategies: Vec<StrategySpec>,
    pub tasks: Vec<TaskSpec>,
    pub sample_chunks: u64,
    pub sample_chunk_rows: u64,
}

impl CompareSpec {
    pub fn desk_scale(seeds: Vec<u64>) -> CompareSpec {
        CompareSpec {
            batch_size: DEFAULT_BATCH_SIZE,
            learning_rate: DEFAULT_LEARNING_RATE,
            epochs: 1,
            seeds,
            test_plate: 13,
            strategies: default_strategies(DEFAULT_BATCH_SIZE),
            tasks: default_tasks(),
            sample_chunks: 64,
            sample_chunk_rows: 256,
        }
    }
}

#[derive(Clone, Debug)]
pub struct RunRow {
    pub strategy: String,
    pub task: String,
    pub seed: u64,
    pub macro_f1: f64,
    pub wall_secs: f64,
}

#[derive(Clone, Debug)]
pub struct StrategySummary {
    pub strategy: String,
    pub task: String,
    pub mean: f64,
    pub std: f64,
    pub runs: usize,
}

#[derive(Clone, Debug)]
pub struct CompareReport {
    pub rows: Vec<RunRow>,
    pub summaries: Vec<StrategySummary>,
}

impl CompareReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("# schema: experiments/v1\n");
        out.push_str("strategy,task,seed,macro_f1,wall_secs\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{:.6},{:.3}\n",
                r.strategy, r.task, r.seed, r.macro_f1, r.wall_secs
            ));
        }
        out
    }

    pub fn summary(&self, strategy: &str, task: &str) -> Option<&StrategySummary> {
        self.summaries
            .iter()
            .find(|s| s.strategy == strategy && s.task == task)
    }
}

fn build_callbacks<'a>(pre: &Arc<Preprocess>, collapse: LabelCollapse) -> CallbackSet<'a, Store> {
    let pre = Arc::clone(pre);
    let fetch_transform = Box::new(move |mut payload: MultiPayload| {
        let Some(PayloadPart::Sparse(rows)) = payload.part(PART_ROWS) else {
            return Err("fetch payload lacks sparse rows".to_string());
        };
        let mut dense = rows.to_dense(pre.n_cols());
        pre.apply(&mut dense);
        payload.set(PART_ROWS, PayloadPart::Dense(dense))?;
        Ok(payload)
    });
    let batch_transform: Option<Box<TransformFn>> = if collapse == LabelCollapse::Identity {
        None
    } else {
        Some(Box::new(move |mut payload: MultiPayload| {
            let Some(PayloadPart::U16(labels)) = payload.part(PART_LABELS) else {
                return Err("batch payload lacks labels".to_string());
            };
            let mapped = labels.iter().map(|&l| collapse.apply(l)).collect();
            payload.set(PART_LABELS, PayloadPart::U16(mapped))?;
            Ok(payload)
        }))
    };
    CallbackSet {
        fetch_transform: Some(fetch_transform),
        batch_transform,
        ..CallbackSet::default()
    }
}

type TransformFn = dyn Fn(MultiPayload) -> Result<MultiPayload, String>;

struct RunContext<'s> {
    store: &'s Store,
    spec: &'s CompareSpec,
    pre: Arc<Preprocess>,
    train_rows: u64,
}

fn run_training(
    ctx: &RunContext,
    strat: &StrategySpec,
    task: &TaskSpec,
    task_index: usize,
    seed: u64,
) -> Result<LinearModel, ExperimentError> {
    let (store, spec) = (ctx.store, ctx.spec);
    let cfg = SamplerConfig {
        n_rows: ctx.train_rows,
        batch_size: spec.batch_size,
        block_size: strat.block_size,
        fetch_factor: strat.fetch_factor,
        seed,
        strategy: strat.strategy.clone(),
    };
    let mut tc = TrainConfig::new(ctx.pre.n_cols(), task.n_classes as usize);
    tc.learning_rate = spec.learning_rate;
    tc.epochs = spec.epochs;
    tc.init_seed = rng::derive_seed(seed, stream::MODEL_INIT, task_index as u64);
    let callbacks = build_callbacks(&ctx.pre, task.collapse);
    let mut trainer = Trainer::new(&tc)?;
    for epoch in 0..spec.epochs {
        match cfg.strategy {
            Strategy::StreamingBuffered { .. } => {
                let stream = iterate_buffered_stream(store, &cfg, epoch, &callbacks)?;
                trainer.consume(stream)?;
            }
            _ => {
                let plan = build_plan(&cfg, epoch).map_err(PipelineError::from)?;
                let stream = iterate(&plan, store, &cfg, &callbacks);
                trainer.consume(stream)?;
            }
        }
    }
    trainer.finish()
}

fn load_standardized(
    store: &Store,
    span: RowRange,
    pre: &Preprocess,
) -> Result<(DenseRows, Vec<u16>), ExperimentError> {
    const CHUNK: u64 = 4096;
    let n_cols = pre.n_cols();
    let mut x = DenseRows {
        n_cols,
        values: Vec::with_capacity(((span.end - span.start) as usize) * n_cols),
    };
    let mut y = Vec::with_capacity((span.end - span.start) as usize);
    let mut start = span.start;
    while start < span.end {
        let end = (start + CHUNK).min(span.end);
        let block = store.read_rows(&[RowRange { start, end }])?;
        let rows = crate::pipeline::SparseRows {
            indptr: block.indptr,
            cols: block.cols,
            vals: block.vals,
        };
        let mut dense = rows.to_dense(n_cols);
        pre.apply(&mut dense);
        x.values.extend_from_slice(&dense.values);
        y.extend_from_slice(&block.labels);
        start = end;
    }
    Ok((x, y))
}

fn sample_std(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    (ss / (values.len() - 1) as f64).sqrt()
}

/// Trains every (strategy, seed) pair on each task and scores it on the
/// held-out plate. Deterministic apart from wall times.
pub fn compare_strategies(store: &Store, spec: &CompareSpec) -> Result<CompareReport, ExperimentError> {
    if spec.strategies.is_empty() || spec.tasks.is_empty() || spec.seeds.is_empty() {
        return config_err("strategies, tasks, and seeds must be non-empty".into());
    }
    if spec.learning_rate <= 0.0 || spec.learning_rate.is_nan() {
        return config_err(format!("learning rate {} must be > 0", spec.learning_rate));
    }
    let shards = &store.manifest().shards;
    if spec.test_plate + 1 != shards.len() {
        return config_err(format!(
            "held-out plate {} must be the trailing shard of {}",
            spec.test_plate,
            shards.len()
        ));
    }
    let test = &shards[spec.test_plate];
    let train_rows = test.row_offset;
    let test_span = RowRange {
        start: test.row_offset,
        end: test.row_offset + test.rows,
    };
    if train_rows == 0 || test.rows == 0 {
        return Err(ExperimentError::EmptyTestSet);
    }
    let pre = Arc::new(fit_preprocess(
        store,
        train_rows,
        spec.sample_chunks,
        spec.sample_chunk_rows,
    )?);
    let (test_x, test_y_raw) = load_standardized(store, test_span, &pre)?;
    let ctx = RunContext {
        store,
        spec,
        pre,
        train_rows,
    };

    let mut rows = Vec::new();
    for (ti, task) in spec.tasks.iter().enumerate() {
        let test_y: Vec<u16> = test_y_raw.iter().map(|&l| task.collapse.apply(l)).collect();
        for strat in &spec.strategies {
            for &seed in &spec.seeds {
                let clock = Instant::now();
                let model = run_training(&ctx, strat, task, ti, seed)?;
                let scored = evaluate(&model, &test_x, &test_y)?;
                rows.push(RunRow {
                    strategy: strat.name.clone(),
                    task: task.name.clone(),
                    seed,
                    macro_f1: scored.macro_f1,
                    wall_secs: clock.elapsed().as_secs_f64(),
                });
            }
        }
    }

    let mut summaries = Vec::new();
    for task in &spec.tasks {
        for strat in &spec.strategies {
            let f1s: Vec<f64> = rows
                .iter()
                .filter(|r| r.strategy == strat.name && r.task == task.name)
                .map(|r| r.macro_f1)
                .collect();
            summaries.push(StrategySummary {
                strategy: strat.name.clone(),
                task: task.name.clone(),
                mean: f1s.iter().sum::<f64>() / f1s.len() as f64,
                std: sample_std(&f1s),
                runs: f1s.len(),
            });
        }
    }
    Ok(CompareReport { rows, summaries })
}
