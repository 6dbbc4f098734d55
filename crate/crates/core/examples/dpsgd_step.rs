//! A few DPSGD steps by hand: clipping, noise, and the privacy ledger.

use dplm::accountant::{EpsilonReport, PrivacyLedger};
use dplm::model::{self, Architecture, LanguageModel};
use dplm::numerics;
use dplm::optimizer::{self, PrivacySpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> dplm::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let arch = Architecture::new(3, 8, vec![32, 16, 8], 40)?;
    let mut lm = LanguageModel::init(arch, &mut rng);

    // a toy dataset of N = 1000 examples, batches of L = 10
    let data: Vec<(Vec<usize>, usize)> = (0..1000)
        .map(|_| {
            (
                (0..3).map(|_| rng.random_range(0..40)).collect(),
                rng.random_range(4..40),
            )
        })
        .collect();
    let spec = PrivacySpec {
        sigma: 1.1,
        clip_norm: 1.0,
        ..Default::default()
    };
    let q = 10.0 / data.len() as f64;

    let batch: Vec<(&[usize], usize)> = data[..10].iter().map(|(c, t)| (c.as_slice(), *t)).collect();
    for (i, &(c, t)) in batch.iter().take(3).enumerate() {
        let g = numerics::example_grad(&lm.params, c, t, &lm.arch)?;
        let clipped = optimizer::clip_gradient(&g, spec.clip_norm)?;
        println!("example {i}: |g| = {:.4} -> {:.4}", g.norm(), clipped.norm());
    }

    let mut ledger = PrivacyLedger::new(spec.ledger_tag());
    for step in 0..100 {
        let start = (step * 10) % data.len();
        let batch: Vec<(&[usize], usize)> = data[start..start + 10]
            .iter()
            .map(|(c, t)| (c.as_slice(), *t))
            .collect();
        let out = optimizer::dpsgd_step(&mut lm, &batch, &spec, 0.5, q, &mut rng)?;
        if let Some(entry) = out.entry {
            ledger.record(entry);
        }
        if step % 25 == 0 {
            println!("step {step:>3}: batch loss {:.4}", out.loss);
        }
    }
    let all: Vec<(&[usize], usize)> = data.iter().map(|(c, t)| (c.as_slice(), *t)).collect();
    println!("mean loss after 100 steps: {:.4}", model::batch_loss(&lm, &all)?);

    let e = &ledger.entries()[0];
    println!(
        "\nledger: q={} sigma={} T={} ({})",
        e.q,
        e.sigma,
        ledger.total_steps(),
        ledger.assumption
    );
    println!("{}", EpsilonReport::for_ledger(&ledger, spec.delta, 1)?);
    Ok(())
}
