//! Training loop, train/test split, error metrics and latency benchmark.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::io;
use crate::layers::{mse_loss, Mode};
use crate::model::{Network, NetworkConfig};
use crate::optim::{adamw_step, AdamWConfig, OptimizerState};
use crate::preprocess::{
    denormalize_position, normalize_image, normalize_position, NormalizationConfig, TipPosition,
};
use crate::seeding;
use crate::simulate::{render_scatter_image, OpticsConfig, SampleRecord};
use crate::tensor::Tensor;

/// Physical positions are kept in cm; reported errors are in mm.
pub const MM_PER_CM: f64 = 10.0;
/// Per-frame processing time of the original system, ms.
pub const REFERENCE_LATENCY_MS: f64 = 20.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub split_ratio: f64,
    /// Write a checkpoint every this many epochs; 0 disables checkpoints.
    pub checkpoint_every: usize,
    pub optimizer: AdamWConfig,
    /// Supplied by the experiment driver, not the config file.
    #[serde(skip)]
    pub seed: u64,
    #[serde(skip)]
    pub checkpoint: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 16,
            split_ratio: 0.8,
            checkpoint_every: 25,
            optimizer: AdamWConfig::default(),
            seed: 0,
            checkpoint: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be >= 1"));
        }
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return Err(Error::config(
                "train.split_ratio",
                format!("must lie in (0, 1), got {}", self.split_ratio),
            ));
        }
        self.optimizer.validate()
    }
}

// ---------------------------------------------------------------------------
// Split
// ---------------------------------------------------------------------------

/// Shuffled index split with `round(ratio · n)` training entries.
pub fn split_indices(n: usize, ratio: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n == 0 {
        return Err(Error::invalid("split_dataset", "dataset is empty"));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::invalid(
            "split_dataset",
            format!("ratio must lie in (0, 1), got {ratio}"),
        ));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeding::stream(seed, seeding::SPLIT, 0));
    let n_train = (ratio * n as f64).round() as usize;
    let test = order.split_off(n_train);
    Ok((order, test))
}

pub fn split_dataset<T: Clone>(items: &[T], ratio: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    let (train, test) = split_indices(items.len(), ratio, seed)?;
    Ok((
        train.iter().map(|&i| items[i].clone()).collect(),
        test.iter().map(|&i| items[i].clone()).collect(),
    ))
}

// ---------------------------------------------------------------------------
// Predictors
// ---------------------------------------------------------------------------

/// Anything that maps a raw count image to a normalized tip estimate.
pub trait TipPredictor: Sync {
    fn normalization(&self) -> &NormalizationConfig;

    fn predict_normalized(&self, image: &Tensor<f32>) -> Result<[f64; 3]>;

    fn predict(&self, image: &Tensor<f32>) -> Result<TipPosition> {
        Ok(denormalize_position(self.predict_normalized(image)?, self.normalization()))
    }
}

/// A trained network together with the preprocessing it was trained under.
#[derive(Debug, Clone, PartialEq)]
pub struct TipTracker {
    pub network: Network<f32>,
    pub normalization: NormalizationConfig,
    pub max_count: f64,
}

impl TipTracker {
    pub fn preprocess(&self, image: &Tensor<f32>) -> Result<Tensor<f32>> {
        normalize_image(image, self.max_count, self.network.config().input_channels)
    }
}

/// Sidecar describing how a weights file was trained; enough to rebuild the
/// tracker around it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelCard {
    pub network: NetworkConfig,
    pub normalization: NormalizationConfig,
    pub max_count: f64,
    pub config_digest: String,
}

impl TipTracker {
    pub fn card(&self, config_digest: impl Into<String>) -> ModelCard {
        ModelCard {
            network: self.network.config().clone(),
            normalization: self.normalization.clone(),
            max_count: self.max_count,
            config_digest: config_digest.into(),
        }
    }

    /// Writes the weights file and its JSON model card.
    pub fn save(&self, weights: &Path, card: &Path, config_digest: &str) -> Result<()> {
        io::save_tensors(weights, self.network.params())?;
        io::write_json(card, &self.card(config_digest))
    }

    pub fn load(weights: &Path, card: &Path) -> Result<Self> {
        let card: ModelCard = io::read_json(card)?;
        card.normalization.validate()?;
        let params = io::load_tensors(weights)?;
        let network = Network::from_parts(card.network, params)
            .map_err(|e| Error::format(weights, e.to_string()))?;
        Ok(Self {
            network,
            normalization: card.normalization,
            max_count: card.max_count,
        })
    }
}

impl TipPredictor for TipTracker {
    fn normalization(&self) -> &NormalizationConfig {
        &self.normalization
    }

    fn predict_normalized(&self, image: &Tensor<f32>) -> Result<[f64; 3]> {
        let out = self.network.predict(&self.preprocess(image)?)?;
        match *out.data() {
            [x, y, z] => Ok([x as f64, y as f64, z as f64]),
            _ => Err(Error::invalid(
                "predict",
                format!("network emits {} values, expected 3", out.len()),
            )),
        }
    }
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub tracker: TipTracker,
    /// Mean training MSE (normalized units) of each epoch.
    pub history: Vec<f64>,
}

pub fn train(
    records: &[SampleRecord],
    normalization: &NormalizationConfig,
    max_count: f64,
    config: &TrainConfig,
    network: &NetworkConfig,
) -> Result<TrainOutcome> {
    train_with_progress(records, normalization, max_count, config, network, |_, _| {})
}

/// Mini-batch training on normalized targets; `on_epoch(epoch, mean_loss)` is
/// called after every epoch.
pub fn train_with_progress(
    records: &[SampleRecord],
    normalization: &NormalizationConfig,
    max_count: f64,
    config: &TrainConfig,
    network: &NetworkConfig,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<TrainOutcome> {
    config.validate()?;
    network.validate()?;
    normalization.validate()?;
    if records.is_empty() {
        return Err(Error::invalid("train", "training set is empty"));
    }
    if network.output_dim != 3 {
        return Err(Error::config(
            "network.output_dim",
            format!("tip regression needs 3 outputs, got {}", network.output_dim),
        ));
    }

    let mut tracker = TipTracker {
        network: Network::build(network.clone(), seeding::derive_seed(config.seed, seeding::INIT))?,
        normalization: normalization.clone(),
        max_count,
    };
    let inputs = records
        .iter()
        .map(|r| tracker.preprocess(&r.image))
        .collect::<Result<Vec<_>>>()?;
    let targets: Vec<Tensor<f32>> = records
        .iter()
        .map(|r| {
            let n = normalize_position(&r.ground_truth, normalization).value;
            Tensor::from_fn(vec![3], |i| n[i] as f32)
        })
        .collect();

    let mut state = OptimizerState::new(tracker.network.params());
    let mut grads = tracker.network.params().zeros_like();
    let mut dropout_rng = seeding::stream(config.seed, seeding::DROPOUT, 0);
    let mut order: Vec<usize> = (0..records.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        order.shuffle(&mut seeding::stream(config.seed, seeding::SHUFFLE, epoch as u64));
        let mut epoch_loss = 0.0f64;
        for (batch, idx) in order.chunks(config.batch_size).enumerate() {
            grads.fill(0.0);
            let scale = 1.0 / idx.len() as f32;
            for &i in idx {
                let net = &tracker.network;
                let (pred, trace) = net.forward(&inputs[i], Mode::Train, &mut dropout_rng)?;
                let (loss, grad) = mse_loss(&pred, &targets[i])?;
                if !loss.is_finite() {
                    return Err(Error::NonFiniteLoss { epoch, batch });
                }
                epoch_loss += loss as f64;
                net.backward_accumulate(trace, &grad.map(|g| g * scale), &mut grads)?;
            }
            adamw_step(tracker.network.params_mut(), &grads, &mut state, &config.optimizer)?;
        }
        let mean = epoch_loss / records.len() as f64;
        history.push(mean);
        on_epoch(epoch, mean);

        if let Some(path) = &config.checkpoint {
            if config.checkpoint_every > 0 && (epoch + 1) % config.checkpoint_every == 0 {
                io::save_tensors(path, tracker.network.params())?;
            }
        }
    }
    Ok(TrainOutcome { tracker, history })
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorStat {
    pub mean_mm: f64,
    pub std_mm: f64,
}

impl ErrorStat {
    /// Mean and population standard deviation.
    fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self {
            mean_mm: mean,
            std_mm: var.sqrt(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AxisMetrics {
    pub x: ErrorStat,
    pub y: ErrorStat,
    pub z: ErrorStat,
}

/// Absolute per-axis errors and Euclidean error, in mm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub per_axis: AxisMetrics,
    pub l2: ErrorStat,
    pub n_test: usize,
}

impl Metrics {
    pub fn from_positions(predicted: &[TipPosition], truth: &[TipPosition]) -> Result<Self> {
        if predicted.len() != truth.len() || predicted.is_empty() {
            return Err(Error::invalid(
                "evaluate",
                format!(
                    "need equal, non-zero counts of predictions ({}) and ground truths ({})",
                    predicted.len(),
                    truth.len()
                ),
            ));
        }
        let mut axes = [
            Vec::with_capacity(truth.len()),
            Vec::with_capacity(truth.len()),
            Vec::with_capacity(truth.len()),
        ];
        let mut l2 = Vec::with_capacity(truth.len());
        for (p, t) in predicted.iter().zip(truth) {
            let err = [
                (p.x - t.x) * MM_PER_CM,
                (p.y - t.y) * MM_PER_CM,
                (p.z - t.z) * MM_PER_CM,
            ];
            for (axis, e) in axes.iter_mut().zip(err) {
                axis.push(e.abs());
            }
            l2.push(err.iter().map(|e| e * e).sum::<f64>().sqrt());
        }
        Ok(Self {
            per_axis: AxisMetrics {
                x: ErrorStat::of(&axes[0]),
                y: ErrorStat::of(&axes[1]),
                z: ErrorStat::of(&axes[2]),
            },
            l2: ErrorStat::of(&l2),
            n_test: truth.len(),
        })
    }

    /// Plain-text table: one row per axis plus the Euclidean row.
    pub fn table(&self) -> String {
        let rows = [
            ("x", self.per_axis.x),
            ("y", self.per_axis.y),
            ("z", self.per_axis.z),
            ("L2-Norm", self.l2),
        ];
        let mut out = format!("{:<9}| {}\n", "", "Accuracy & Standard Deviation (mm)");
        out.push_str(&format!("{:-<9}+{:-<37}\n", "", ""));
        for (name, s) in rows {
            out.push_str(&format!("{name:<9}| {:.4} ± {:.4}\n", s.mean_mm, s.std_mm));
        }
        out.push_str(&format!("n_test = {}\n", self.n_test));
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_axis: AxisMetrics,
    pub l2: ErrorStat,
    pub n_test: usize,
    pub config_digest: String,
}

impl MetricsReport {
    pub fn new(metrics: &Metrics, config_digest: impl Into<String>) -> Self {
        Self {
            per_axis: metrics.per_axis,
            l2: metrics.l2,
            n_test: metrics.n_test,
            config_digest: config_digest.into(),
        }
    }
}

/// Hex SHA-256 of the compact JSON form of `config`.
pub fn config_digest<S: Serialize>(config: &S) -> String {
    let bytes = serde_json::to_vec(config).expect("configuration types serialize infallibly");
    Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Eval-mode predictions on every record, compared in mm.
///
/// `normalization` is the configuration the test data was labelled under; it
/// must equal the predictor's.
pub fn evaluate<P: TipPredictor>(
    predictor: &P,
    records: &[SampleRecord],
    normalization: &NormalizationConfig,
) -> Result<Metrics> {
    if records.is_empty() {
        return Err(Error::invalid("evaluate", "test set is empty"));
    }
    if predictor.normalization() != normalization {
        return Err(Error::NormalizationMismatch);
    }
    let predicted = records
        .par_iter()
        .map(|r| predictor.predict(&r.image))
        .collect::<Result<Vec<_>>>()?;
    let truth: Vec<TipPosition> = records.iter().map(|r| r.ground_truth).collect();
    Metrics::from_positions(&predicted, &truth)
}

/// Eval-mode mean squared error in normalized target units, averaged over
/// records and axes.
pub fn normalized_mse<P: TipPredictor>(predictor: &P, records: &[SampleRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::invalid("normalized_mse", "record set is empty"));
    }
    let per_record = records
        .par_iter()
        .map(|r| {
            let pred = predictor.predict_normalized(&r.image)?;
            let target = normalize_position(&r.ground_truth, predictor.normalization()).value;
            Ok(pred.iter().zip(target).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / 3.0)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(per_record.iter().sum::<f64>() / records.len() as f64)
}

// ---------------------------------------------------------------------------
// Latency
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
}

impl LatencyStats {
    /// Nearest-rank percentiles.
    pub fn from_samples(samples_ms: &[f64]) -> Self {
        let mut sorted = samples_ms.to_vec();
        sorted.sort_by(f64::total_cmp);
        let rank = |p: f64| {
            let k = (p * sorted.len() as f64).ceil() as usize;
            sorted[k.clamp(1, sorted.len()) - 1]
        };
        Self {
            mean_ms: sorted.iter().sum::<f64>() / sorted.len() as f64,
            p50_ms: rank(0.50),
            p95_ms: rank(0.95),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub image_side: usize,
    pub n_runs: usize,
    pub warmup_runs: usize,
    /// Pixel scaling and channel replication.
    pub preprocess: LatencyStats,
    /// Eval-mode network forward pass.
    pub inference: LatencyStats,
    pub total: LatencyStats,
    pub reference_ms: f64,
}

impl LatencyReport {
    pub fn summary(&self) -> String {
        format!(
            "{side}x{side}: total mean {:.3} ms, p50 {:.3} ms, p95 {:.3} ms \
             (preprocess {:.3} ms, inference {:.3} ms); reference {:.0} ms per frame",
            self.total.mean_ms,
            self.total.p50_ms,
            self.total.p95_ms,
            self.preprocess.mean_ms,
            self.inference.mean_ms,
            self.reference_ms,
            side = self.image_side,
        )
    }
}

/// Times preprocessing plus eval-mode inference on a rendered frame.
/// `warmup` extra runs precede the measured ones and are discarded.
pub fn benchmark_inference(
    tracker: &TipTracker,
    optics: &OpticsConfig,
    n_runs: usize,
    warmup: usize,
) -> Result<LatencyReport> {
    if n_runs < 10 {
        return Err(Error::invalid("benchmark_inference", format!("n_runs must be >= 10, got {n_runs}")));
    }
    let side = tracker.network.config().input_side;
    if optics.image_side != side {
        return Err(Error::config(
            "optics.image_side",
            format!("{} does not match network input side {side}", optics.image_side),
        ));
    }
    let frame = render_scatter_image(
        &TipPosition::new(0.0, 0.0, 3.0),
        optics,
        &mut seeding::stream(0, "bench", 0),
    )?;
    let mut pre = Vec::with_capacity(n_runs);
    let mut inf = Vec::with_capacity(n_runs);
    let mut total = Vec::with_capacity(n_runs);
    for run in 0..warmup + n_runs {
        let t0 = Instant::now();
        let input = tracker.preprocess(&frame)?;
        let t1 = Instant::now();
        let out = tracker.network.predict(&input)?;
        let t2 = Instant::now();
        std::hint::black_box(out);
        if run >= warmup {
            pre.push((t1 - t0).as_secs_f64() * 1e3);
            inf.push((t2 - t1).as_secs_f64() * 1e3);
            total.push((t2 - t0).as_secs_f64() * 1e3);
        }
    }
    Ok(LatencyReport {
        image_side: side,
        n_runs,
        warmup_runs: warmup,
        preprocess: LatencyStats::from_samples(&pre),
        inference: LatencyStats::from_samples(&inf),
        total: LatencyStats::from_samples(&total),
        reference_ms: REFERENCE_LATENCY_MS,
    })
}
