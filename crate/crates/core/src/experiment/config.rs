//! Experiment configuration as flat `key=value` lines with dotted prefixes.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::corpus::{SplitFractions, DEFAULT_CONTEXT, DEFAULT_MIN_COUNT};
use crate::error::{Error, Result};
use crate::model::{Architecture, DEFAULT_EMBEDDING_DIM};
use crate::optimizer::{OptimizerKind, PrivacySpec, TrainConfig};

use super::sha256_hex;

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub public_corpus: PathBuf,
    pub private_corpus: PathBuf,
    pub output_dir: PathBuf,
    pub min_count: usize,
    /// `small`, `large`, or `custom` (uses `hidden`).
    pub preset: String,
    pub context: usize,
    pub embedding_dim: usize,
    pub hidden: Vec<usize>,
    pub split: SplitFractions,
    pub split_seed: u64,
    /// Seed for parameter initialization.
    pub seed: u64,
    /// Stages trained from scratch without privacy.
    pub pretrain: TrainConfig,
    /// Non-private tuning of the public model.
    pub finetune: TrainConfig,
    /// DPSGD stages.
    pub private: TrainConfig,
    pub privacy: PrivacySpec,
    pub eval_interval: usize,
    pub dp_scratch: bool,
    pub prompts: Vec<String>,
    pub generate_length: usize,
    pub generate_seed: u64,
}

impl ExperimentConfig {
    /// Defaults for a preset: 5+5 epochs for `small`, 2+2 for `large`.
    pub fn for_preset(preset: &str) -> Result<Self> {
        let (hidden, epochs) = match preset {
            "small" => (vec![500, 250, 50], 5),
            "large" => (vec![10_000, 5_000, 1_000], 2),
            other => return Err(Error::InvalidConfig(format!("unknown preset {other:?}"))),
        };
        let train = |optimizer, seed| TrainConfig {
            batch_size: 256,
            epochs,
            learning_rate: 1e-3,
            seed,
            optimizer,
            eval_interval: 200,
        };
        Ok(Self {
            public_corpus: "public.txt".into(),
            private_corpus: "private.txt".into(),
            output_dir: "out".into(),
            min_count: DEFAULT_MIN_COUNT,
            preset: preset.to_string(),
            context: DEFAULT_CONTEXT,
            embedding_dim: DEFAULT_EMBEDDING_DIM,
            hidden,
            // 10k train : 5k dev+test, dev and test halves
            split: SplitFractions {
                train: 2.0 / 3.0,
                dev: 1.0 / 6.0,
                test: 1.0 / 6.0,
            },
            split_seed: 0,
            seed: 0,
            pretrain: train(OptimizerKind::Adam, 1),
            finetune: train(OptimizerKind::Adam, 2),
            private: train(OptimizerKind::Dpsgd, 3),
            privacy: PrivacySpec::default(),
            eval_interval: 200,
            dp_scratch: false,
            prompts: vec!["Bob lives close to the".to_string()],
            generate_length: 10,
            generate_seed: 0,
        })
    }

    pub fn architecture(&self, vocab: usize) -> Result<Architecture> {
        Architecture::new(self.context, self.embedding_dim, self.hidden.clone(), vocab)
    }

    pub fn validate(&self) -> Result<()> {
        self.split.validate()?;
        self.privacy.validate()?;
        if self.min_count == 0 || self.eval_interval == 0 || self.generate_length == 0 {
            return Err(Error::InvalidConfig(
                "min_count, eval.interval and generate.length must be positive".into(),
            ));
        }
        Architecture::new(self.context, self.embedding_dim, self.hidden.clone(), 4)?;
        Ok(())
    }

    /// Checks that both corpora exist.
    pub fn check_paths(&self) -> Result<()> {
        for p in [&self.public_corpus, &self.private_corpus] {
            if !p.is_file() {
                return Err(Error::io(
                    p,
                    std::io::Error::new(std::io::ErrorKind::NotFound, "corpus file not found"),
                ));
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical text form.
    pub fn hash(&self) -> String {
        sha256_hex(self.to_text().as_bytes())
    }

    pub fn to_text(&self) -> String {
        let mut lines: Vec<(String, String)> = vec![
            ("paths.public".into(), self.public_corpus.display().to_string()),
            ("paths.private".into(), self.private_corpus.display().to_string()),
            ("paths.output".into(), self.output_dir.display().to_string()),
            ("vocab.min_count".into(), self.min_count.to_string()),
            ("model.preset".into(), self.preset.clone()),
            ("model.context".into(), self.context.to_string()),
            ("model.embedding_dim".into(), self.embedding_dim.to_string()),
            ("model.hidden".into(), join(&self.hidden)),
            ("split.train".into(), self.split.train.to_string()),
            ("split.dev".into(), self.split.dev.to_string()),
            ("split.test".into(), self.split.test.to_string()),
            ("split.seed".into(), self.split_seed.to_string()),
            ("seed".into(), self.seed.to_string()),
        ];
        for (prefix, t) in [
            ("pretrain", &self.pretrain),
            ("finetune", &self.finetune),
            ("private", &self.private),
        ] {
            lines.push((format!("{prefix}.optimizer"), t.optimizer.to_string()));
            lines.push((format!("{prefix}.batch_size"), t.batch_size.to_string()));
            lines.push((format!("{prefix}.epochs"), t.epochs.to_string()));
            lines.push((format!("{prefix}.learning_rate"), t.learning_rate.to_string()));
            lines.push((format!("{prefix}.seed"), t.seed.to_string()));
        }
        lines.extend([
            ("privacy.sigma".into(), self.privacy.sigma.to_string()),
            ("privacy.clip_norm".into(), self.privacy.clip_norm.to_string()),
            ("privacy.delta".into(), self.privacy.delta.to_string()),
            ("privacy.gamma".into(), self.privacy.gamma.to_string()),
            (
                "privacy.per_example_noise".into(),
                self.privacy.per_example_noise.to_string(),
            ),
            ("eval.interval".into(), self.eval_interval.to_string()),
            ("stages.dp_scratch".into(), self.dp_scratch.to_string()),
            ("generate.length".into(), self.generate_length.to_string()),
            ("generate.seed".into(), self.generate_seed.to_string()),
        ]);
        for (i, p) in self.prompts.iter().enumerate() {
            lines.push((format!("generate.prompt.{i}"), p.clone()));
        }
        let mut out = String::new();
        for (k, v) in lines {
            out.push_str(&k);
            out.push('=');
            out.push_str(&v);
            out.push('\n');
        }
        out
    }

    /// Parses `key=value` lines over the defaults of `model.preset` (small
    /// when absent). Blank lines and `#` comments are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut kv: BTreeMap<String, String> = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::format("config", format!("line {}: expected key=value", n + 1)))?;
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
        let preset = kv.get("model.preset").cloned().unwrap_or_else(|| "small".into());
        let mut c = match preset.as_str() {
            "custom" => {
                let mut c = Self::for_preset("small")?;
                c.preset = preset.clone();
                c
            }
            p => Self::for_preset(p)?,
        };
        let mut prompts: BTreeMap<usize, String> = BTreeMap::new();
        for (k, v) in &kv {
            let bad = || Error::format("config", format!("invalid value for {k}: {v:?}"));
            macro_rules! num {
                () => {
                    v.parse().map_err(|_| bad())?
                };
            }
            if let Some(i) = k.strip_prefix("generate.prompt.") {
                prompts.insert(i.parse().map_err(|_| bad())?, v.clone());
                continue;
            }
            if let Some((prefix, field)) = k.split_once('.') {
                let stage = match prefix {
                    "pretrain" => Some(&mut c.pretrain),
                    "finetune" => Some(&mut c.finetune),
                    "private" => Some(&mut c.private),
                    _ => None,
                };
                if let Some(t) = stage {
                    match field {
                        "optimizer" => t.optimizer = v.parse()?,
                        "batch_size" => t.batch_size = num!(),
                        "epochs" => t.epochs = num!(),
                        "learning_rate" => t.learning_rate = num!(),
                        "seed" => t.seed = num!(),
                        _ => return Err(Error::format("config", format!("unknown key {k}"))),
                    }
                    continue;
                }
            }
            match k.as_str() {
                "paths.public" => c.public_corpus = v.into(),
                "paths.private" => c.private_corpus = v.into(),
                "paths.output" => c.output_dir = v.into(),
                "vocab.min_count" => c.min_count = num!(),
                "model.preset" => {}
                "model.context" => c.context = num!(),
                "model.embedding_dim" => c.embedding_dim = num!(),
                "model.hidden" => {
                    c.hidden = v
                        .split(',')
                        .map(|s| s.trim().parse().map_err(|_| bad()))
                        .collect::<Result<_>>()?
                }
                "split.train" => c.split.train = num!(),
                "split.dev" => c.split.dev = num!(),
                "split.test" => c.split.test = num!(),
                "split.seed" => c.split_seed = num!(),
                "seed" => c.seed = num!(),
                "privacy.sigma" => c.privacy.sigma = num!(),
                "privacy.clip_norm" => c.privacy.clip_norm = num!(),
                "privacy.delta" => c.privacy.delta = num!(),
                "privacy.gamma" => c.privacy.gamma = num!(),
                "privacy.per_example_noise" => c.privacy.per_example_noise = num!(),
                "eval.interval" => c.eval_interval = num!(),
                "stages.dp_scratch" => c.dp_scratch = num!(),
                "generate.length" => c.generate_length = num!(),
                "generate.seed" => c.generate_seed = num!(),
                _ => return Err(Error::format("config", format!("unknown key {k}"))),
            }
        }
        if kv.keys().any(|k| k.starts_with("generate.prompt.")) {
            c.prompts = prompts.into_values().collect();
        }
        c.pretrain.eval_interval = c.eval_interval;
        c.finetune.eval_interval = c.eval_interval;
        c.private.eval_interval = c.eval_interval;
        c.validate()?;
        Ok(c)
    }

    /// Reads a config file. Relative corpus and output paths are resolved
    /// against the file's directory, and both corpora must exist.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut c = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut c.public_corpus, &mut c.private_corpus, &mut c.output_dir] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        c.check_paths()?;
        Ok(c)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

fn join(xs: &[usize]) -> String {
    xs.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}
