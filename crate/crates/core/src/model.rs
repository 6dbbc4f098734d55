//! The feedforward language model: architecture presets, batched loss,
//! perplexity, and prompt-conditioned generation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::corpus::{self, ContextWindowDataset, Vocabulary, PAD};
use crate::error::{Error, Result};
use crate::numerics::{self, Layout, ParamVector};

/// Default width of the learned token embeddings.
pub const DEFAULT_EMBEDDING_DIM: usize = 64;

/// Examples per evaluation shard. Shard sums are merged in shard order.
pub(crate) const SHARD: usize = 256;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Architecture {
    pub context: usize,
    pub embedding_dim: usize,
    pub hidden: Vec<usize>,
    pub vocab: usize,
}

impl Architecture {
    pub fn new(context: usize, embedding_dim: usize, hidden: Vec<usize>, vocab: usize) -> Result<Self> {
        if context == 0 {
            return Err(Error::ZeroContext);
        }
        if embedding_dim == 0 || vocab == 0 {
            return Err(Error::InvalidConfig(
                "embedding dim and vocab size must be positive".into(),
            ));
        }
        if hidden.is_empty() || hidden.contains(&0) {
            return Err(Error::InvalidConfig(
                "hidden sizes must be a non-empty list of positive sizes".into(),
            ));
        }
        Ok(Self {
            context,
            embedding_dim,
            hidden,
            vocab,
        })
    }

    /// Three hidden layers of 500, 250 and 50 units over a 20-token context.
    pub fn small(vocab: usize) -> Self {
        Self::preset("small", vocab).expect("known preset")
    }

    /// Three hidden layers of 10000, 5000 and 1000 units over a 20-token context.
    pub fn large(vocab: usize) -> Self {
        Self::preset("large", vocab).expect("known preset")
    }

    pub fn preset(name: &str, vocab: usize) -> Result<Self> {
        let hidden = match name {
            "small" => vec![500, 250, 50],
            "large" => vec![10_000, 5_000, 1_000],
            other => return Err(Error::InvalidConfig(format!("unknown preset {other:?}"))),
        };
        Self::new(corpus::DEFAULT_CONTEXT, DEFAULT_EMBEDDING_DIM, hidden, vocab)
    }

    pub fn input_dim(&self) -> usize {
        self.context * self.embedding_dim
    }

    pub fn param_count(&self) -> usize {
        let mut n = self.vocab * self.embedding_dim;
        let mut fan_in = self.input_dim();
        for &h in self.hidden.iter().chain(std::iter::once(&self.vocab)) {
            n += fan_in * h + h;
            fan_in = h;
        }
        n
    }

    pub fn layout(&self) -> Layout {
        Layout::for_arch(self)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LanguageModel {
    pub arch: Architecture,
    pub params: ParamVector,
}

impl LanguageModel {
    pub fn zeros(arch: Architecture) -> Self {
        let params = ParamVector::zeros(&arch);
        Self { arch, params }
    }

    pub fn init<R: Rng + ?Sized>(arch: Architecture, rng: &mut R) -> Self {
        let params = ParamVector::init(&arch, rng);
        Self { arch, params }
    }

    pub fn from_params(arch: Architecture, params: ParamVector) -> Result<Self> {
        params.check_arch(&arch)?;
        Ok(Self { arch, params })
    }

    pub fn probabilities(&self, context: &[usize]) -> Result<Vec<f64>> {
        numerics::forward(&self.params, context, &self.arch)
    }

    pub fn example_loss(&self, context: &[usize], target: usize) -> Result<f64> {
        numerics::example_loss(&self.params, context, target, &self.arch)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        numerics::save_checkpoint(path, &self.arch, &self.params)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let (arch, params) = numerics::load_checkpoint(path)?;
        Ok(Self { arch, params })
    }
}

/// Mean of the example losses over a non-empty batch.
pub fn batch_loss(model: &LanguageModel, batch: &[(&[usize], usize)]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut sum = 0.0;
    for &(context, target) in batch {
        sum += model.example_loss(context, target)?;
    }
    Ok(sum / batch.len() as f64)
}

/// Running sum of negative log-likelihoods.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct NllAccumulator {
    pub sum: f64,
    pub count: usize,
}

impl NllAccumulator {
    pub fn add(&mut self, nll: f64) {
        self.sum += nll;
        self.count += 1;
    }

    pub fn merge(&mut self, other: NllAccumulator) {
        self.sum += other.sum;
        self.count += other.count;
    }

    pub fn mean(&self) -> f64 {
        self.sum / self.count as f64
    }

    /// `exp(mean NLL)`; anything non-finite reads as +inf.
    pub fn perplexity(&self) -> f64 {
        let pp = self.mean().exp();
        if pp.is_finite() {
            pp
        } else {
            f64::INFINITY
        }
    }
}

/// Summed NLL over a dataset, sharded across threads.
pub fn dataset_nll(model: &LanguageModel, dataset: &ContextWindowDataset) -> Result<NllAccumulator> {
    if dataset.context_len() != model.arch.context {
        return Err(Error::ShapeMismatch {
            expected: model.arch.context,
            actual: dataset.context_len(),
        });
    }
    let n = dataset.len();
    let shards: Vec<Result<NllAccumulator>> = (0..n.div_ceil(SHARD))
        .into_par_iter()
        .map(|s| {
            let mut acc = NllAccumulator::default();
            for i in s * SHARD..((s + 1) * SHARD).min(n) {
                let (c, t) = dataset.example(i);
                acc.add(model.example_loss(c, t)?);
            }
            Ok(acc)
        })
        .collect();
    let mut total = NllAccumulator::default();
    for shard in shards {
        total.merge(shard?);
    }
    Ok(total)
}

/// Token-level perplexity `exp(mean -log p(target | context))`.
///
/// Returns +inf for a diverged model rather than an error.
pub fn perplexity(model: &LanguageModel, dataset: &ContextWindowDataset) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if !model.params.is_finite() {
        return Ok(f64::INFINITY);
    }
    Ok(dataset_nll(model, dataset)?.perplexity())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecodeMode {
    Greedy,
    Sample,
}

impl std::str::FromStr for DecodeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "greedy" => Ok(Self::Greedy),
            "sample" => Ok(Self::Sample),
            other => Err(Error::InvalidConfig(format!("unknown decode mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenerateOptions {
    pub length: usize,
    pub mode: DecodeMode,
    pub seed: u64,
    pub temperature: f64,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        Self {
            length: 10,
            mode: DecodeMode::Sample,
            seed: 0,
            temperature: 1.0,
        }
    }
}

/// Emits exactly `opts.length` token ids continuing `prompt`.
///
/// PAD is never emitted: its probability is removed and the rest
/// renormalized. EOS does not stop emission.
pub fn generate_ids(model: &LanguageModel, prompt: &[usize], opts: &GenerateOptions) -> Result<Vec<usize>> {
    if opts.length == 0 {
        return Err(Error::InvalidConfig("generation length must be positive".into()));
    }
    if !(opts.temperature > 0.0) || !opts.temperature.is_finite() {
        return Err(Error::InvalidConfig("temperature must be positive".into()));
    }
    if model.arch.vocab < 2 {
        return Err(Error::InvalidConfig("vocabulary has nothing but PAD".into()));
    }
    let k = model.arch.context;
    let mut history: Vec<usize> = vec![PAD; k];
    history.extend_from_slice(prompt);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut out = Vec::with_capacity(opts.length);
    for _ in 0..opts.length {
        let context = &history[history.len() - k..];
        let mut logits = numerics::logits(&model.params, context, &model.arch)?;
        logits[PAD] = f64::NEG_INFINITY;
        let next = match opts.mode {
            DecodeMode::Greedy => argmax(&logits),
            DecodeMode::Sample => {
                for z in &mut logits {
                    *z /= opts.temperature;
                }
                let probs = numerics::softmax(&logits);
                if probs.iter().any(|p| !p.is_finite()) {
                    argmax(&logits)
                } else {
                    sample(&probs, rng.random::<f64>())
                }
            }
        };
        out.push(next);
        history.push(next);
    }
    Ok(out)
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 1;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

// Inverse-CDF draw, skipping zero-probability ids.
fn sample(probs: &[f64], u: f64) -> usize {
    let mut cum = 0.0;
    let mut last = 1;
    for (i, &p) in probs.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        cum += p;
        last = i;
        if u < cum {
            return i;
        }
    }
    last
}

/// Generates `opts.length` whitespace-joined tokens after `prompt`.
pub fn generate(model: &LanguageModel, vocab: &Vocabulary, prompt: &str, opts: &GenerateOptions) -> Result<String> {
    let prompt_ids = corpus::encode_prompt(prompt, vocab);
    let ids = generate_ids(model, &prompt_ids, opts)?;
    Ok(ids
        .iter()
        .map(|&id| vocab.token(id).unwrap_or(corpus::SPECIALS[corpus::UNK]))
        .collect::<Vec<_>>()
        .join(" "))
}
