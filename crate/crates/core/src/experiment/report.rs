//! Comparison and token-count tables built from emitted run files.

use std::fmt;
use std::path::Path;

use crate::corpus::ContextWindowDataset;
use crate::error::{Error, Result};
use crate::optimizer::{parse_metrics_csv, MetricRecord};

use super::manifest::RunManifest;

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub stage: String,
    pub train_set: String,
    pub sigma: f64,
    pub pp_dev: f64,
    pub pp_test: f64,
}

/// Final perplexities per stage plus the orderings the comparison is about.
#[derive(Debug, Clone, PartialEq)]
pub struct CompareReport {
    pub rows: Vec<ReportRow>,
    /// Non-private fine-tuning beats both non-private baselines on test.
    pub finetune_beats_baselines: bool,
    /// DP fine-tuning beats the public-only baseline on private test.
    pub dp_finetune_beats_public: bool,
    /// DP training from scratch is the worst stage or diverged; `None`
    /// when that stage was not run.
    pub dp_scratch_worst_or_divergent: Option<bool>,
    /// DP training from scratch ends worse than DP fine-tuning, or diverged.
    pub dp_scratch_behind_dp_finetune: Option<bool>,
}

impl CompareReport {
    pub fn row(&self, stage: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.stage == stage)
    }

    /// Orderings recomputed from rows alone.
    pub fn from_rows(rows: Vec<ReportRow>) -> Result<Self> {
        let test = |stage: &str| -> Result<f64> {
            rows.iter()
                .find(|r| r.stage == stage)
                .map(|r| r.pp_test)
                .ok_or_else(|| Error::IncompleteManifest(format!("no stage {stage}")))
        };
        let public = test("public_only")?;
        let private = test("private_only")?;
        let finetune = test("finetune")?;
        let dp = test("dp_finetune")?;
        let scratch = rows.iter().find(|r| r.stage == "dp_scratch").map(|r| {
            r.pp_test.is_infinite()
                || rows
                    .iter()
                    .filter(|o| o.stage != "dp_scratch")
                    .all(|o| r.pp_test > o.pp_test)
        });
        let behind = rows
            .iter()
            .find(|r| r.stage == "dp_scratch")
            .map(|r| r.pp_test.is_infinite() || r.pp_test > dp);
        Ok(Self {
            dp_scratch_behind_dp_finetune: behind,
            finetune_beats_baselines: finetune < public && finetune < private,
            dp_finetune_beats_public: dp < public,
            dp_scratch_worst_or_divergent: scratch,
            rows,
        })
    }
}

fn final_perplexity(rows: &[MetricRecord], split: &str) -> Option<f64> {
    rows.iter()
        .rev()
        .find(|r| r.split == split && r.metric == "final_perplexity")
        .map(|r| r.value)
}

/// Builds the comparison table from the metrics CSVs a manifest lists.
/// `dir` is the directory the manifest's file names are relative to.
pub fn compare_report(manifest: &RunManifest, dir: &Path) -> Result<CompareReport> {
    let mut rows = Vec::new();
    for stage in &manifest.stages {
        let path = dir.join(&stage.metrics);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let metrics = parse_metrics_csv(&text)?;
        let missing = || Error::IncompleteManifest(format!("stage {} lacks final perplexities", stage.name));
        rows.push(ReportRow {
            stage: stage.name.clone(),
            train_set: stage.train_set.clone(),
            sigma: stage.sigma,
            pp_dev: final_perplexity(&metrics, "dev").ok_or_else(missing)?,
            pp_test: final_perplexity(&metrics, "test").ok_or_else(missing)?,
        });
    }
    CompareReport::from_rows(rows)
}

fn fmt_pp(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.2}")
    } else {
        "inf".to_string()
    }
}

impl fmt::Display for CompareReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<26} {:>6} {:>12} {:>12}",
            "Training / Testing Set", "sigma", "PP (dev)", "PP (test)"
        )?;
        for r in &self.rows {
            writeln!(
                f,
                "{:<26} {:>6} {:>12} {:>12}",
                format!("{} / private", r.train_set),
                r.sigma,
                fmt_pp(r.pp_dev),
                fmt_pp(r.pp_test)
            )?;
        }
        writeln!(f, "finetune_beats_baselines={}", self.finetune_beats_baselines)?;
        writeln!(f, "dp_finetune_beats_public={}", self.dp_finetune_beats_public)?;
        let opt = |b: Option<bool>| b.map_or("n/a".to_string(), |b| b.to_string());
        writeln!(
            f,
            "dp_scratch_worst_or_divergent={}",
            opt(self.dp_scratch_worst_or_divergent)
        )?;
        writeln!(
            f,
            "dp_scratch_behind_dp_finetune={}",
            opt(self.dp_scratch_behind_dp_finetune)
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenRow {
    pub dataset: String,
    pub train: usize,
    /// `None` for corpora that are never evaluated on.
    pub test: Option<usize>,
}

/// Train/test token counts per corpus. A token is one prediction target,
/// so the sentence-final EOS counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenReport {
    pub rows: Vec<TokenRow>,
}

pub fn token_report(datasets: &[(&str, &ContextWindowDataset, Option<&ContextWindowDataset>)]) -> TokenReport {
    TokenReport {
        rows: datasets
            .iter()
            .map(|(name, train, test)| TokenRow {
                dataset: name.to_string(),
                train: train.len(),
                test: test.map(|t| t.len()),
            })
            .collect(),
    }
}

impl fmt::Display for TokenReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<12} {:>14} {:>14}", "Dataset", "Tokens (train)", "Tokens (test)")?;
        for r in &self.rows {
            let test = r.test.map_or("-".to_string(), |t| t.to_string());
            writeln!(f, "{:<12} {:>14} {:>14}", r.dataset, r.train, test)?;
        }
        Ok(())
    }
}
