use std::collections::BTreeMap;
use std::path::Path;

use crate::accountant::{EpsilonReport, LedgerEntry, PrivacyLedger};
use crate::error::{Error, Result};
use crate::optimizer::OptimizerKind;

/// Outputs of one stage. File names are relative to the manifest directory.
#[derive(Debug, Clone, PartialEq)]
pub struct StageRecord {
    pub name: String,
    /// Row label for the comparison table.
    pub train_set: String,
    pub sigma: f64,
    pub optimizer: OptimizerKind,
    pub checkpoint: String,
    pub checkpoint_sha256: String,
    /// Hash of the checkpoint this stage started from.
    pub init_sha256: String,
    pub metrics: String,
    pub generations: Option<String>,
    pub steps: u64,
    pub diverged: bool,
    pub ledger: Option<PrivacyLedger>,
    /// Present only for stages trained with sigma > 0.
    pub epsilon: Option<EpsilonReport>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunManifest {
    pub run_id: String,
    pub config_hash: String,
    pub seed: u64,
    pub vocab: String,
    pub stages: Vec<StageRecord>,
}

fn ledger_to_text(ledger: &PrivacyLedger) -> String {
    ledger
        .entries()
        .iter()
        .map(|e| format!("{}:{}:{}", e.q, e.sigma, e.steps))
        .collect::<Vec<_>>()
        .join(";")
}

fn ledger_from_text(text: &str, assumption: &str) -> Result<PrivacyLedger> {
    let mut ledger = PrivacyLedger::new(assumption);
    for part in text.split(';').filter(|p| !p.is_empty()) {
        let bad = || Error::format("ledger", part.to_string());
        let f: Vec<&str> = part.split(':').collect();
        if f.len() != 3 {
            return Err(bad());
        }
        ledger.record(LedgerEntry::new(
            f[0].parse().map_err(|_| bad())?,
            f[1].parse().map_err(|_| bad())?,
            f[2].parse().map_err(|_| bad())?,
        )?);
    }
    Ok(ledger)
}

impl RunManifest {
    pub fn stage(&self, name: &str) -> Option<&StageRecord> {
        self.stages.iter().find(|s| s.name == name)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "run_id={}\nconfig_hash={}\nseed={}\nvocab={}\nstages={}\n",
            self.run_id,
            self.config_hash,
            self.seed,
            self.vocab,
            self.stages
                .iter()
                .map(|s| s.name.as_str())
                .collect::<Vec<_>>()
                .join(",")
        );
        for s in &self.stages {
            let p = format!("stage.{}", s.name);
            out.push_str(&format!("{p}.train_set={}\n", s.train_set));
            out.push_str(&format!("{p}.sigma={}\n", s.sigma));
            out.push_str(&format!("{p}.optimizer={}\n", s.optimizer));
            out.push_str(&format!("{p}.checkpoint={}\n", s.checkpoint));
            out.push_str(&format!("{p}.checkpoint_sha256={}\n", s.checkpoint_sha256));
            out.push_str(&format!("{p}.init_sha256={}\n", s.init_sha256));
            out.push_str(&format!("{p}.metrics={}\n", s.metrics));
            if let Some(g) = &s.generations {
                out.push_str(&format!("{p}.generations={g}\n"));
            }
            out.push_str(&format!("{p}.steps={}\n", s.steps));
            out.push_str(&format!("{p}.diverged={}\n", s.diverged));
            if let Some(l) = &s.ledger {
                out.push_str(&format!("{p}.ledger={}\n", ledger_to_text(l)));
                out.push_str(&format!("{p}.ledger_assumption={}\n", l.assumption));
            }
            if let Some(e) = &s.epsilon {
                out.push_str(&format!("{p}.epsilon_report={e}\n"));
            }
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut kv: BTreeMap<&str, &str> = BTreeMap::new();
        for line in text.lines().filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::format("manifest", line.to_string()))?;
            kv.insert(k, v);
        }
        let get = |k: &str| -> Result<&str> {
            kv.get(k)
                .copied()
                .ok_or_else(|| Error::IncompleteManifest(format!("missing {k}")))
        };
        let parse_err = |k: &str| Error::format("manifest", format!("invalid {k}"));
        let mut stages = Vec::new();
        for name in get("stages")?.split(',').filter(|s| !s.is_empty()) {
            let key = |f: &str| format!("stage.{name}.{f}");
            let ledger = match kv.get(key("ledger").as_str()) {
                Some(text) => Some(ledger_from_text(
                    text,
                    kv.get(key("ledger_assumption").as_str()).copied().unwrap_or_default(),
                )?),
                None => None,
            };
            let epsilon = match kv.get(key("epsilon_report").as_str()) {
                Some(line) => Some(EpsilonReport::parse(line)?),
                None => None,
            };
            stages.push(StageRecord {
                name: name.to_string(),
                train_set: get(&key("train_set"))?.to_string(),
                sigma: get(&key("sigma"))?.parse().map_err(|_| parse_err(&key("sigma")))?,
                optimizer: get(&key("optimizer"))?.parse()?,
                checkpoint: get(&key("checkpoint"))?.to_string(),
                checkpoint_sha256: get(&key("checkpoint_sha256"))?.to_string(),
                init_sha256: get(&key("init_sha256"))?.to_string(),
                metrics: get(&key("metrics"))?.to_string(),
                generations: kv.get(key("generations").as_str()).map(|s| s.to_string()),
                steps: get(&key("steps"))?.parse().map_err(|_| parse_err(&key("steps")))?,
                diverged: get(&key("diverged"))?
                    .parse()
                    .map_err(|_| parse_err(&key("diverged")))?,
                ledger,
                epsilon,
            });
        }
        Ok(Self {
            run_id: get("run_id")?.to_string(),
            config_hash: get("config_hash")?.to_string(),
            seed: get("seed")?.parse().map_err(|_| parse_err("seed"))?,
            vocab: get("vocab")?.to_string(),
            stages,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_round_trip() {
        let ledger = PrivacyLedger::uniform(0.01, 1.1, 40).unwrap();
        let eps = EpsilonReport::for_ledger(&ledger, 1e-5, 1).unwrap();
        let m = RunManifest {
            run_id: "abc".into(),
            config_hash: "abcdef".into(),
            seed: 3,
            vocab: "vocab.txt".into(),
            stages: vec![
                StageRecord {
                    name: "public_only".into(),
                    train_set: "public".into(),
                    sigma: 0.0,
                    optimizer: OptimizerKind::Adam,
                    checkpoint: "public_only.ckpt".into(),
                    checkpoint_sha256: "00".into(),
                    init_sha256: "11".into(),
                    metrics: "public_only.metrics.csv".into(),
                    generations: None,
                    steps: 10,
                    diverged: false,
                    ledger: None,
                    epsilon: None,
                },
                StageRecord {
                    name: "dp_finetune".into(),
                    train_set: "fine-tuned".into(),
                    sigma: 1.1,
                    optimizer: OptimizerKind::Dpsgd,
                    checkpoint: "dp_finetune.ckpt".into(),
                    checkpoint_sha256: "22".into(),
                    init_sha256: "00".into(),
                    metrics: "dp_finetune.metrics.csv".into(),
                    generations: Some("dp_finetune.generations.txt".into()),
                    steps: 40,
                    diverged: false,
                    ledger: Some(ledger),
                    epsilon: Some(eps),
                },
            ],
        };
        let text = m.to_text();
        assert!(text.contains("stage.dp_finetune.epsilon_report=delta=0.00001 epsilon="));
        assert_eq!(RunManifest::parse(&text).unwrap(), m);
        assert!(RunManifest::parse("run_id=x\n").is_err());
    }
}
