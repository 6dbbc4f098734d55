use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use dplm::accountant::{self, EpsilonReport, PrivacyLedger};
use dplm::corpus::{self, Vocabulary};
use dplm::experiment::{self, ExperimentConfig, RunManifest};
use dplm::model::{self, DecodeMode, GenerateOptions, LanguageModel};
use dplm::optimizer::{append_metrics_csv, MetricRecord};
use dplm::Result;

#[derive(Parser)]
#[command(
    name = "dplm",
    about = "Differentially private fine-tuning of feedforward language models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the shared vocabulary of a public and a private corpus.
    BuildVocab {
        #[arg(long)]
        public: PathBuf,
        #[arg(long)]
        private: PathBuf,
        #[arg(long, default_value_t = corpus::DEFAULT_MIN_COUNT)]
        min_count: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Token-level perplexity of a checkpoint on a corpus.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        /// CSV to append the result to [default: <model>.eval.csv]
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Continue a prompt with a fixed number of tokens.
    Generate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        prompt: String,
        #[arg(long, default_value_t = 10)]
        length: usize,
        #[arg(long, default_value = "sample")]
        mode: DecodeMode,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
    },
    /// Epsilon of T sampled Gaussian steps.
    Account {
        #[arg(long)]
        q: f64,
        #[arg(long)]
        sigma: f64,
        #[arg(long)]
        steps: u64,
        #[arg(long)]
        delta: f64,
        #[arg(long, default_value_t = 1)]
        gamma: u64,
    },
    /// CSV of epsilon over a grid of noise multipliers and deltas.
    AccountCurve {
        #[arg(long, default_value_t = 1e-3)]
        q: f64,
        #[arg(long, default_value_t = 100_000)]
        steps: u64,
        #[arg(long, value_delimiter = ',', default_value = "0.5,0.75,1,1.1,1.5,2,3,4")]
        sigmas: Vec<f64>,
        #[arg(
            long,
            value_delimiter = ',',
            default_value = "1e-10,1e-9,1e-8,1e-7,1e-6,1e-5,1e-4,1e-3,1e-2"
        )]
        deltas: Vec<f64>,
    },
    /// Smallest noise multiplier meeting a target epsilon.
    Calibrate {
        #[arg(long)]
        epsilon: f64,
        #[arg(long)]
        delta: f64,
        #[arg(long)]
        q: f64,
        #[arg(long)]
        steps: u64,
    },
    /// Run every stage of an experiment config.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Final perplexity table of a finished run.
    Report {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Train/test token counts of an experiment's corpora.
    Tokens {
        #[arg(long)]
        config: PathBuf,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::BuildVocab {
            public,
            private,
            min_count,
            out,
        } => {
            let vocab = corpus::build_vocabulary_from_files(&public, &private, min_count)?;
            vocab.save(&out)?;
            println!("vocab_size={}", vocab.len());
        }
        Command::Eval {
            model,
            data,
            vocab,
            metrics,
        } => {
            let lm = LanguageModel::load(&model)?;
            let vocab = Vocabulary::load(&vocab)?;
            let lines = corpus::read_corpus(&data)?;
            let ds = corpus::windows(&corpus::encode_all(&lines, &vocab), lm.arch.context)?;
            let pp = model::perplexity(&lm, &ds)?;
            println!("perplexity={pp}");
            let csv = metrics.unwrap_or_else(|| with_suffix(&model, ".eval.csv"));
            append_metrics_csv(csv, &[MetricRecord::new(0, 0, "eval", "perplexity", pp)])?;
        }
        Command::Generate {
            model,
            vocab,
            prompt,
            length,
            mode,
            seed,
            temperature,
        } => {
            let lm = LanguageModel::load(&model)?;
            let vocab = Vocabulary::load(&vocab)?;
            let opts = GenerateOptions {
                length,
                mode,
                seed,
                temperature,
            };
            println!("{}", model::generate(&lm, &vocab, &prompt, &opts)?);
        }
        Command::Account {
            q,
            sigma,
            steps,
            delta,
            gamma,
        } => {
            let ledger = PrivacyLedger::uniform(q, sigma, steps)?;
            let r = EpsilonReport::for_ledger(&ledger, delta, gamma)?;
            println!(
                "epsilon={} order={} epsilon_group={}",
                r.epsilon, r.order, r.epsilon_group
            );
        }
        Command::AccountCurve {
            q,
            steps,
            sigmas,
            deltas,
        } => {
            println!("sigma,delta,epsilon");
            let orders = accountant::default_orders();
            for &sigma in &sigmas {
                let curve = accountant::compose(&PrivacyLedger::uniform(q, sigma, steps)?, &orders)?;
                for &delta in &deltas {
                    println!("{sigma},{delta},{}", accountant::epsilon(&curve, delta)?.0);
                }
            }
        }
        Command::Calibrate {
            epsilon,
            delta,
            q,
            steps,
        } => {
            println!("sigma={}", accountant::calibrate_sigma(epsilon, delta, q, steps)?);
        }
        Command::Run { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            let manifest = experiment::run_schema(&cfg)?;
            let path = cfg.output_dir.join(experiment::MANIFEST_FILE);
            println!("manifest={}", path.display());
            print!("{}", experiment::compare_report(&manifest, &cfg.output_dir)?);
        }
        Command::Report { manifest } => {
            let m = RunManifest::load(&manifest)?;
            let dir = manifest.parent().unwrap_or(Path::new("."));
            print!("{}", experiment::compare_report(&m, dir)?);
            for s in &m.stages {
                if let Some(e) = &s.epsilon {
                    println!("{}: {e}", s.name);
                }
            }
        }
        Command::Tokens { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            let data = experiment::prepare_data(&cfg)?;
            let report = experiment::token_report(&[
                ("public", &data.public, None),
                ("private", &data.private.train, Some(&data.private.test)),
            ]);
            print!("{report}");
        }
    }
    Ok(())
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}
