//! Training loops: a non-private Adam/SGD baseline and DPSGD.
//!
//! DPSGD clips each example's gradient to L2 norm `C`, sums the clipped
//! gradients, adds one Gaussian draw with per-coordinate standard deviation
//! `sigma * C` to the sum, and divides by the batch size. Every step
//! appends `(q, sigma, 1)` to the privacy ledger.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::accountant::{LedgerEntry, PrivacyLedger, PER_EXAMPLE_NOISE, SAMPLED_GAUSSIAN};
use crate::corpus::ContextWindowDataset;
use crate::error::{Error, Result};
use crate::model::{perplexity, LanguageModel};
use crate::numerics::{example_grad_sparse, GradVector};

/// Examples per gradient shard; shard sums merge in shard order, so results
/// do not depend on the thread count.
const GRAD_SHARD: usize = 32;

pub type Batch<'a> = [(&'a [usize], usize)];

/// Parameters of one private training run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrivacySpec {
    /// Noise multiplier: noise std divided by the clip norm.
    pub sigma: f64,
    pub clip_norm: f64,
    pub delta: f64,
    /// Largest number of sentences a single contributor supplies.
    pub gamma: u64,
    /// Add independent noise to every example instead of once to the sum.
    pub per_example_noise: bool,
}

impl Default for PrivacySpec {
    fn default() -> Self {
        Self {
            sigma: 1.1,
            clip_norm: 1.0,
            delta: 1e-5,
            gamma: 1,
            per_example_noise: false,
        }
    }
}

impl PrivacySpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidPrivacySpec(m.to_string()));
        if !(self.sigma >= 0.0) || !self.sigma.is_finite() {
            return bad("sigma must be >= 0");
        }
        if !(self.clip_norm > 0.0) || !self.clip_norm.is_finite() {
            return bad("clip norm must be > 0");
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return bad("delta must lie in (0, 1)");
        }
        if self.gamma < 1 {
            return bad("gamma must be >= 1");
        }
        Ok(())
    }

    /// A zero noise multiplier gives no privacy guarantee.
    pub fn is_private(&self) -> bool {
        self.sigma > 0.0
    }

    pub fn ledger_tag(&self) -> &'static str {
        if self.per_example_noise {
            PER_EXAMPLE_NOISE
        } else {
            SAMPLED_GAUSSIAN
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Adam,
    Sgd,
    Dpsgd,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adam" => Ok(Self::Adam),
            "sgd" => Ok(Self::Sgd),
            "dpsgd" => Ok(Self::Dpsgd),
            other => Err(Error::InvalidConfig(format!("unknown optimizer {other:?}"))),
        }
    }
}

impl std::fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Adam => "adam",
            Self::Sgd => "sgd",
            Self::Dpsgd => "dpsgd",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    /// Record metrics every this many steps (and after the last step).
    pub eval_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 256,
            epochs: 5,
            learning_rate: 1e-3,
            seed: 0,
            optimizer: OptimizerKind::Adam,
            eval_interval: 200,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, dataset_len: usize) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be positive".into()));
        }
        if self.batch_size > dataset_len {
            return Err(Error::InvalidConfig(format!(
                "batch size {} exceeds dataset size {dataset_len}",
                self.batch_size
            )));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::InvalidConfig("learning rate must be positive".into()));
        }
        if self.eval_interval == 0 {
            return Err(Error::InvalidConfig("evaluation interval must be positive".into()));
        }
        Ok(())
    }
}

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }
}

/// Scales `g` to L2 norm at most `clip_norm`: `g / max(1, |g| / C)`.
pub fn clip_gradient(g: &GradVector, clip_norm: f64) -> Result<GradVector> {
    if !(clip_norm > 0.0) {
        return Err(Error::InvalidConfig("clip norm must be positive".into()));
    }
    if !g.is_finite() {
        return Err(Error::DivergentGradient);
    }
    let norm = g.norm();
    if norm <= clip_norm {
        return Ok(g.clone());
    }
    let scale = clip_norm / norm;
    Ok(GradVector {
        values: g.values.iter().map(|v| v * scale).collect(),
        layout: g.layout.clone(),
    })
}

fn clip_factor(norm: f64, clip_norm: f64) -> f64 {
    if norm <= clip_norm {
        1.0
    } else {
        clip_norm / norm
    }
}

/// Sum over the batch of per-example gradients, each clipped to
/// `clip_norm` (pass `f64::INFINITY` for no clipping), plus the summed loss.
pub fn clipped_gradient_sum(model: &LanguageModel, batch: &Batch<'_>, clip_norm: f64) -> Result<(Vec<f64>, f64)> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let len = model.params.len();
    let shards: Vec<Result<(Vec<f64>, f64)>> = batch
        .par_chunks(GRAD_SHARD)
        .enumerate()
        .map(|(s, chunk)| {
            let mut acc = vec![0.0; len];
            let mut loss = 0.0;
            for (j, &(context, target)) in chunk.iter().enumerate() {
                let index = s * GRAD_SHARD + j;
                let g = example_grad_sparse(&model.params, context, target, &model.arch).map_err(|e| match e {
                    Error::ShapeMismatch { .. } | Error::TokenOutOfRange { .. } => e,
                    _ => Error::DivergentExample(index),
                })?;
                if !g.is_finite() {
                    return Err(Error::DivergentExample(index));
                }
                let factor = if clip_norm.is_finite() {
                    clip_factor(g.norm(), clip_norm)
                } else {
                    1.0
                };
                g.accumulate_into(&mut acc, factor);
                loss += g.loss;
            }
            Ok((acc, loss))
        })
        .collect();
    let mut total = vec![0.0; len];
    let mut loss = 0.0;
    for shard in shards {
        let (acc, l) = shard?;
        for (t, a) in total.iter_mut().zip(&acc) {
            *t += a;
        }
        loss += l;
    }
    Ok((total, loss))
}

/// `(1/L) [sum_i clip(grad_i) + N(0, sigma^2 C^2 I)]`.
///
/// With `per_example_noise`, each example receives its own draw, which
/// multiplies the noise variance on the sum by `L`.
pub fn noisy_batch_gradient<R: Rng + ?Sized>(
    model: &LanguageModel,
    batch: &Batch<'_>,
    spec: &PrivacySpec,
    rng: &mut R,
) -> Result<GradVector> {
    Ok(noisy_batch_gradient_with_loss(model, batch, spec, rng)?.0)
}

fn noisy_batch_gradient_with_loss<R: Rng + ?Sized>(
    model: &LanguageModel,
    batch: &Batch<'_>,
    spec: &PrivacySpec,
    rng: &mut R,
) -> Result<(GradVector, f64)> {
    spec.validate()?;
    let (mut sum, loss) = clipped_gradient_sum(model, batch, spec.clip_norm)?;
    let l = batch.len() as f64;
    if spec.sigma > 0.0 {
        let mut std = spec.sigma * spec.clip_norm;
        if spec.per_example_noise {
            // sum of L independent N(0, s^2) draws is N(0, L s^2)
            std *= l.sqrt();
        }
        for v in &mut sum {
            let z: f64 = rng.sample(StandardNormal);
            *v += std * z;
        }
    }
    for v in &mut sum {
        *v /= l;
    }
    Ok((
        GradVector {
            values: sum,
            layout: model.params.layout.clone(),
        },
        loss / l,
    ))
}

/// `theta <- theta - lr * grad`.
pub fn sgd_update(model: &mut LanguageModel, grad: &GradVector, lr: f64) {
    for (p, g) in model.params.values.iter_mut().zip(&grad.values) {
        *p -= lr * g;
    }
}

/// Result of a single optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    /// Mean loss over the batch before the update.
    pub loss: f64,
    /// Privacy consumed, for private steps.
    pub entry: Option<LedgerEntry>,
}

/// One DPSGD step. Privacy is consumed even when `lr` is zero.
pub fn dpsgd_step<R: Rng + ?Sized>(
    model: &mut LanguageModel,
    batch: &Batch<'_>,
    spec: &PrivacySpec,
    lr: f64,
    sampling_rate: f64,
    rng: &mut R,
) -> Result<StepOutcome> {
    let (grad, loss) = noisy_batch_gradient_with_loss(model, batch, spec, rng)?;
    sgd_update(model, &grad, lr);
    let entry = if spec.is_private() {
        Some(LedgerEntry::new(sampling_rate, spec.sigma, 1)?)
    } else {
        None
    };
    Ok(StepOutcome { loss, entry })
}

/// Mean unclipped gradient and mean loss of a batch.
pub fn batch_gradient(model: &LanguageModel, batch: &Batch<'_>) -> Result<(GradVector, f64)> {
    let (mut sum, loss) = clipped_gradient_sum(model, batch, f64::INFINITY)?;
    let l = batch.len() as f64;
    for v in &mut sum {
        *v /= l;
    }
    Ok((
        GradVector {
            values: sum,
            layout: model.params.layout.clone(),
        },
        loss / l,
    ))
}

/// Adam update with bias correction.
pub fn adam_update(
    model: &mut LanguageModel,
    grad: &GradVector,
    lr: f64,
    state: &mut AdamState,
    hyper: &AdamHyper,
) -> Result<()> {
    if state.m.len() != model.params.len() || grad.values.len() != model.params.len() {
        return Err(Error::ShapeMismatch {
            expected: model.params.len(),
            actual: state.m.len(),
        });
    }
    if !grad.is_finite() {
        return Err(Error::DivergentGradient);
    }
    state.t += 1;
    let bc1 = 1.0 - hyper.beta1.powi(state.t as i32);
    let bc2 = 1.0 - hyper.beta2.powi(state.t as i32);
    for (((p, g), m), v) in model
        .params
        .values
        .iter_mut()
        .zip(&grad.values)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        *m = hyper.beta1 * *m + (1.0 - hyper.beta1) * g;
        *v = hyper.beta2 * *v + (1.0 - hyper.beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= lr * m_hat / (v_hat.sqrt() + hyper.eps);
    }
    Ok(())
}

/// One Adam step on the mean batch gradient.
pub fn adam_step(
    model: &mut LanguageModel,
    batch: &Batch<'_>,
    lr: f64,
    state: &mut AdamState,
    hyper: &AdamHyper,
) -> Result<StepOutcome> {
    let (grad, loss) = batch_gradient(model, batch)?;
    adam_update(model, &grad, lr, state, hyper)?;
    Ok(StepOutcome { loss, entry: None })
}

/// One row of a metrics CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRecord {
    pub step: u64,
    pub epoch: usize,
    pub split: String,
    pub metric: String,
    pub value: f64,
}

impl MetricRecord {
    pub fn new(step: u64, epoch: usize, split: &str, metric: &str, value: f64) -> Self {
        Self {
            step,
            epoch,
            split: split.to_string(),
            metric: metric.to_string(),
            value,
        }
    }
}

pub const METRICS_HEADER: &str = "step,epoch,split,metric,value";

/// CSV text; values use Rust's shortest round-trip formatting.
pub fn metrics_csv(rows: &[MetricRecord]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.step, r.epoch, r.split, r.metric, r.value
        ));
    }
    out
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricRecord>> {
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(Error::format("metrics CSV", "missing header"));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|line| {
            let bad = || Error::format("metrics CSV", line.to_string());
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(bad());
            }
            Ok(MetricRecord {
                step: f[0].parse().map_err(|_| bad())?,
                epoch: f[1].parse().map_err(|_| bad())?,
                split: f[2].to_string(),
                metric: f[3].to_string(),
                value: f[4].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

pub fn write_metrics_csv(path: impl AsRef<Path>, rows: &[MetricRecord]) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, metrics_csv(rows)).map_err(|e| Error::io(path, e))
}

/// Appends rows, writing the header first if the file is new or empty.
pub fn append_metrics_csv(path: impl AsRef<Path>, rows: &[MetricRecord]) -> Result<()> {
    let path = path.as_ref();
    let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let text = metrics_csv(rows);
    let body = if fresh {
        &text[..]
    } else {
        &text[METRICS_HEADER.len() + 1..]
    };
    f.write_all(body.as_bytes()).map_err(|e| Error::io(path, e))
}

/// What [`train`] returns.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: LanguageModel,
    pub metrics: Vec<MetricRecord>,
    /// Present for DPSGD runs.
    pub ledger: Option<PrivacyLedger>,
    pub steps: u64,
    /// Training hit a non-finite gradient and stopped early.
    pub diverged: bool,
}

/// Trains for `config.epochs` passes of `ceil(N / L)` steps over shuffled
/// examples.
///
/// Every `eval_interval` steps (and after the final step) the mean training
/// loss since the last record is logged, along with dev perplexity when a
/// dev set is given. A diverged run stops early and reports infinite
/// perplexity rather than failing.
pub fn train(
    model: LanguageModel,
    dataset: &ContextWindowDataset,
    dev: Option<&ContextWindowDataset>,
    config: &TrainConfig,
    spec: Option<&PrivacySpec>,
) -> Result<TrainOutcome> {
    let mut model = model;
    let mut outcome_ledger = None;
    if config.optimizer == OptimizerKind::Dpsgd {
        let spec = spec.ok_or_else(|| Error::InvalidConfig("dpsgd requires a privacy spec".into()))?;
        spec.validate()?;
        outcome_ledger = Some(PrivacyLedger::new(spec.ledger_tag()));
    }
    if config.epochs == 0 {
        return Ok(TrainOutcome {
            model,
            metrics: Vec::new(),
            ledger: outcome_ledger,
            steps: 0,
            diverged: false,
        });
    }
    config.validate(dataset.len())?;

    let n = dataset.len();
    let sampling_rate = config.batch_size as f64 / n as f64;
    let steps_per_epoch = n.div_ceil(config.batch_size);
    let total_steps = (steps_per_epoch * config.epochs) as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = AdamState::new(model.params.len());
    let hyper = AdamHyper::default();
    let mut order: Vec<usize> = (0..n).collect();
    let mut metrics = Vec::new();
    let mut step: u64 = 0;
    let mut loss_sum = 0.0;
    let mut loss_count = 0usize;
    let mut diverged = false;

    'epochs: for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<(&[usize], usize)> = chunk.iter().map(|&i| dataset.example(i)).collect();
            let result = match config.optimizer {
                OptimizerKind::Adam => adam_step(&mut model, &batch, config.learning_rate, &mut adam, &hyper),
                OptimizerKind::Sgd => batch_gradient(&model, &batch).map(|(g, loss)| {
                    sgd_update(&mut model, &g, config.learning_rate);
                    StepOutcome { loss, entry: None }
                }),
                OptimizerKind::Dpsgd => dpsgd_step(
                    &mut model,
                    &batch,
                    spec.expect("checked above"),
                    config.learning_rate,
                    sampling_rate,
                    &mut rng,
                ),
            };
            let outcome = match result {
                Ok(o) => o,
                Err(Error::DivergentExample(_)) | Err(Error::DivergentGradient) => {
                    diverged = true;
                    break 'epochs;
                }
                Err(e) => return Err(e),
            };
            step += 1;
            if let (Some(ledger), Some(entry)) = (outcome_ledger.as_mut(), outcome.entry) {
                ledger.record(entry);
            }
            loss_sum += outcome.loss;
            loss_count += 1;
            if step.is_multiple_of(config.eval_interval as u64) || step == total_steps {
                record_metrics(&mut metrics, &model, dev, step, epoch, loss_sum / loss_count as f64)?;
                loss_sum = 0.0;
                loss_count = 0;
            }
        }
    }
    if diverged {
        let epoch = (step as usize / steps_per_epoch + 1).min(config.epochs);
        metrics.push(MetricRecord::new(step, epoch, "train", "loss", f64::INFINITY));
        if dev.is_some() {
            metrics.push(MetricRecord::new(step, epoch, "dev", "perplexity", f64::INFINITY));
        }
    }
    Ok(TrainOutcome {
        model,
        metrics,
        ledger: outcome_ledger,
        steps: step,
        diverged,
    })
}

fn record_metrics(
    metrics: &mut Vec<MetricRecord>,
    model: &LanguageModel,
    dev: Option<&ContextWindowDataset>,
    step: u64,
    epoch: usize,
    train_loss: f64,
) -> Result<()> {
    let train_loss = if train_loss.is_finite() {
        train_loss
    } else {
        f64::INFINITY
    };
    metrics.push(MetricRecord::new(step, epoch, "train", "loss", train_loss));
    if let Some(dev) = dev.filter(|d| !d.is_empty()) {
        metrics.push(MetricRecord::new(
            step,
            epoch,
            "dev",
            "perplexity",
            perplexity(model, dev)?,
        ));
    }
    Ok(())
}
