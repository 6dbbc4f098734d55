//! The full comparison on a synthetic corpus pair: public-only and
//! private-only baselines, non-private and DP fine-tuning, and DP training
//! from scratch. Writes checkpoints, metrics and a manifest.
//!
//! Usage: cargo run --release --example fine_tune [seed] [out-dir]

use std::path::PathBuf;

use dplm::corpus;
use dplm::experiment::{self, synthetic, ExperimentConfig};

fn main() -> dplm::Result<()> {
    let mut args = std::env::args().skip(1);
    let seed: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(0);
    let dir = args
        .next()
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join(format!("dplm-fine-tune-{seed}")));
    std::fs::create_dir_all(&dir).map_err(|e| dplm::Error::Io {
        path: dir.clone(),
        source: e,
    })?;

    let (public, private) = synthetic::corpus_pair(&synthetic::SyntheticSpec {
        seed,
        ..Default::default()
    });
    corpus::write_corpus(dir.join("public.txt"), &public)?;
    corpus::write_corpus(dir.join("private.txt"), &private)?;

    let mut config = ExperimentConfig::for_preset("small")?;
    config.public_corpus = dir.join("public.txt");
    config.private_corpus = dir.join("private.txt");
    config.output_dir = dir.join("out");
    // desk-scale network
    config.preset = "custom".into();
    config.hidden = vec![64, 32, 16];
    config.embedding_dim = 16;
    config.seed = seed;
    config.split_seed = seed;
    for t in [&mut config.pretrain, &mut config.finetune, &mut config.private] {
        t.batch_size = 32;
        t.seed += seed * 10;
    }
    config.private.learning_rate = 0.5;
    config.privacy.sigma = 0.1;
    config.dp_scratch = true;
    config.prompts = vec![private[0].split_whitespace().take(3).collect::<Vec<_>>().join(" ")];
    config.save(dir.join("run.conf"))?;

    let manifest = experiment::run_schema(&config)?;
    println!("{}", experiment::compare_report(&manifest, &config.output_dir)?);
    for stage in &manifest.stages {
        if let Some(e) = &stage.epsilon {
            println!("{}: {e}", stage.name);
        }
        if let Some(g) = &stage.generations {
            let text = std::fs::read_to_string(config.output_dir.join(g)).unwrap_or_default();
            println!("{:<13} {}", stage.name, text.trim().replace('\t', " | "));
        }
    }
    println!("\noutputs in {}", config.output_dir.display());
    Ok(())
}
