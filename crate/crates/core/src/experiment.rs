//! The four-model comparison pipeline.
//!
//! Stages, in order:
//! 1. `public_only`: trained on the public corpus only.
//! 2. `private_only`: trained on the private corpus only, without privacy.
//! 3. `finetune`: stage 1's model tuned on private data without privacy.
//! 4. `dp_finetune`: stage 1's model tuned on private data with DPSGD.
//! 5. `dp_scratch` (optional): DPSGD on private data from a fresh model.
//!
//! Every stage is evaluated on the private dev and test splits. Outputs land
//! in one directory: a checkpoint and metrics CSV per stage, the shared
//! vocabulary, and a `manifest.txt` tying them together.

pub mod config;
pub mod manifest;
pub mod report;
pub mod synthetic;

pub use config::ExperimentConfig;
pub use manifest::{RunManifest, StageRecord};
pub use report::{compare_report, token_report, CompareReport, TokenReport};

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::accountant::EpsilonReport;
use crate::corpus::{self, ContextWindowDataset, Splits, Vocabulary};
use crate::error::{Error, Result};
use crate::model::{self, LanguageModel};
use crate::numerics;
use crate::optimizer::{self, MetricRecord, OptimizerKind, PrivacySpec, TrainConfig};

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const VOCAB_FILE: &str = "vocab.txt";

/// Stage names in execution order.
pub const STAGES: [&str; 5] = ["public_only", "private_only", "finetune", "dp_finetune", "dp_scratch"];

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Vocabulary and encoded datasets shared by every stage.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub vocab: Vocabulary,
    pub public: ContextWindowDataset,
    pub private: Splits,
}

/// Builds the shared vocabulary, encodes both corpora, and splits the
/// private corpus into train/dev/test by sentence.
pub fn prepare_data(config: &ExperimentConfig) -> Result<PreparedData> {
    let public_lines = corpus::read_corpus(&config.public_corpus)?;
    let private_lines = corpus::read_corpus(&config.private_corpus)?;
    prepare_from_lines(config, &public_lines, &private_lines)
}

pub fn prepare_from_lines(
    config: &ExperimentConfig,
    public_lines: &[String],
    private_lines: &[String],
) -> Result<PreparedData> {
    let vocab = corpus::vocabulary_from_lines(public_lines.iter().chain(private_lines), config.min_count)?;
    let k = config.context;
    let public = corpus::windows(&corpus::encode_all(public_lines, &vocab), k)?;
    let private_all = corpus::windows(&corpus::encode_all(private_lines, &vocab), k)?;
    let private = corpus::split(&private_all, config.split, config.split_seed)?;
    Ok(PreparedData { vocab, public, private })
}

struct StageSpec<'a> {
    name: &'static str,
    train_set: &'static str,
    data: &'a ContextWindowDataset,
    train: TrainConfig,
    privacy: Option<PrivacySpec>,
}

/// Runs every configured stage and writes the manifest.
pub fn run_schema(config: &ExperimentConfig) -> Result<RunManifest> {
    config.validate()?;
    let out = &config.output_dir;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;

    let data = prepare_data(config)?;
    data.vocab.save(out.join(VOCAB_FILE))?;
    let arch = config.architecture(data.vocab.len())?;
    let initial = LanguageModel::init(arch, &mut ChaCha8Rng::seed_from_u64(config.seed));
    let initial_sha = sha256_hex(&numerics::checkpoint_bytes(&initial.arch, &initial.params)?);

    let mut manifest = RunManifest {
        run_id: config.hash()[..12].to_string(),
        config_hash: config.hash(),
        seed: config.seed,
        vocab: VOCAB_FILE.into(),
        stages: Vec::new(),
    };

    let private_train = &data.private.train;
    let dp_spec = Some(config.privacy);

    let public_only = run_stage(
        config,
        &data,
        StageSpec {
            name: "public_only",
            train_set: "public",
            data: &data.public,
            train: config.pretrain,
            privacy: None,
        },
        initial.clone(),
        &initial_sha,
    )?;
    let base = public_only.1.clone();
    let base_sha = public_only.0.checkpoint_sha256.clone();
    manifest.stages.push(public_only.0);

    let private_only = run_stage(
        config,
        &data,
        StageSpec {
            name: "private_only",
            train_set: "private",
            data: private_train,
            train: config.pretrain,
            privacy: None,
        },
        initial.clone(),
        &initial_sha,
    )?;
    manifest.stages.push(private_only.0);

    let finetune = run_stage(
        config,
        &data,
        StageSpec {
            name: "finetune",
            train_set: "fine-tuned",
            data: private_train,
            train: config.finetune,
            privacy: None,
        },
        base.clone(),
        &base_sha,
    )?;
    manifest.stages.push(finetune.0);

    let dp_finetune = run_stage(
        config,
        &data,
        StageSpec {
            name: "dp_finetune",
            train_set: "fine-tuned",
            data: private_train,
            train: config.private,
            privacy: dp_spec,
        },
        base,
        &base_sha,
    )?;
    manifest.stages.push(dp_finetune.0);

    if config.dp_scratch {
        let scratch = run_stage(
            config,
            &data,
            StageSpec {
                name: "dp_scratch",
                train_set: "private (dp)",
                data: private_train,
                train: config.private,
                privacy: dp_spec,
            },
            initial,
            &initial_sha,
        )?;
        manifest.stages.push(scratch.0);
    }

    manifest.save(out.join(MANIFEST_FILE))?;
    Ok(manifest)
}

fn run_stage(
    config: &ExperimentConfig,
    data: &PreparedData,
    stage: StageSpec<'_>,
    start: LanguageModel,
    start_sha: &str,
) -> Result<(StageRecord, LanguageModel)> {
    let name = stage.name;
    let wrap = |e: Error| Error::Stage {
        stage: name.to_string(),
        source: Box::new(e),
    };
    let out = &config.output_dir;
    let dev = &data.private.dev;
    let test = &data.private.test;

    let mut train_cfg = stage.train;
    train_cfg.eval_interval = config.eval_interval;
    let privacy = stage.privacy.filter(|_| train_cfg.optimizer == OptimizerKind::Dpsgd);
    let outcome = optimizer::train(
        start,
        stage.data,
        Some(dev).filter(|d| !d.is_empty()),
        &train_cfg,
        privacy.as_ref(),
    )
    .map_err(wrap)?;

    let mut metrics = outcome.metrics.clone();
    let last_epoch = metrics.last().map_or(0, |m| m.epoch);
    for (split, ds) in [("dev", dev), ("test", test)] {
        if ds.is_empty() {
            continue;
        }
        let pp = model::perplexity(&outcome.model, ds).map_err(wrap)?;
        metrics.push(MetricRecord::new(
            outcome.steps,
            last_epoch,
            split,
            "final_perplexity",
            pp,
        ));
    }

    let ckpt_name = format!("{name}.ckpt");
    let metrics_name = format!("{name}.metrics.csv");
    let ckpt_bytes = numerics::checkpoint_bytes(&outcome.model.arch, &outcome.model.params).map_err(wrap)?;
    let ckpt_path = out.join(&ckpt_name);
    std::fs::write(&ckpt_path, &ckpt_bytes).map_err(|e| wrap(Error::io(&ckpt_path, e)))?;
    optimizer::write_metrics_csv(out.join(&metrics_name), &metrics).map_err(wrap)?;

    let mut generations_name = None;
    if !config.prompts.is_empty() {
        let mut text = String::new();
        for (i, prompt) in config.prompts.iter().enumerate() {
            let opts = model::GenerateOptions {
                length: config.generate_length,
                mode: model::DecodeMode::Sample,
                seed: config.generate_seed.wrapping_add(i as u64),
                temperature: 1.0,
            };
            let sentence = model::generate(&outcome.model, &data.vocab, prompt, &opts).map_err(wrap)?;
            text.push_str(&format!("{prompt}\t{sentence}\n"));
        }
        let gen_name = format!("{name}.generations.txt");
        let path = out.join(&gen_name);
        std::fs::write(&path, text).map_err(|e| wrap(Error::io(&path, e)))?;
        generations_name = Some(gen_name);
    }

    let (ledger, epsilon) = match (&outcome.ledger, privacy) {
        (Some(ledger), Some(spec)) if spec.is_private() => {
            let report = EpsilonReport::for_ledger(ledger, spec.delta, spec.gamma).map_err(wrap)?;
            (Some(ledger.clone()), Some(report))
        }
        (ledger, _) => (ledger.clone(), None),
    };

    let record = StageRecord {
        name: name.to_string(),
        train_set: stage.train_set.to_string(),
        sigma: privacy.map_or(0.0, |p| p.sigma),
        optimizer: train_cfg.optimizer,
        checkpoint: ckpt_name,
        checkpoint_sha256: sha256_hex(&ckpt_bytes),
        init_sha256: start_sha.to_string(),
        metrics: metrics_name,
        generations: generations_name,
        steps: outcome.steps,
        diverged: outcome.diverged,
        ledger,
        epsilon,
    };
    Ok((record, outcome.model))
}

/// Loads the model and vocabulary a manifest points at.
pub fn load_stage_model(manifest_path: &Path, stage: &str) -> Result<(LanguageModel, Vocabulary)> {
    let manifest = RunManifest::load(manifest_path)?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let record = manifest
        .stage(stage)
        .ok_or_else(|| Error::IncompleteManifest(format!("no stage {stage}")))?;
    let model = LanguageModel::load(dir.join(&record.checkpoint))?;
    let vocab = Vocabulary::load(dir.join(&manifest.vocab))?;
    Ok((model, vocab))
}
