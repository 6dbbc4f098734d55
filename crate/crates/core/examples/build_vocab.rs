//! Shared vocabulary and context windows for a public/private corpus pair.
//!
//! Usage: cargo run --example build_vocab [public.txt private.txt]
//!
//! Without arguments a seeded synthetic pair is used.

use dplm::corpus::{self, SplitFractions};
use dplm::experiment::{self, synthetic};

fn main() -> dplm::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let (public, private) = match args.as_slice() {
        [p, q] => (corpus::read_corpus(p)?, corpus::read_corpus(q)?),
        _ => synthetic::corpus_pair(&synthetic::SyntheticSpec::default()),
    };

    let vocab = corpus::vocabulary_from_lines(public.iter().chain(&private), corpus::DEFAULT_MIN_COUNT)?;
    println!("vocabulary: {} entries", vocab.len());
    println!("most frequent: {:?}", &vocab.tokens()[4..vocab.len().min(14)]);

    let line = &private[0];
    let sentence = corpus::encode(line, &vocab);
    println!(
        "\n{line}\n  -> {:?}\n  -> {}",
        sentence.ids(),
        corpus::decode(sentence.ids(), &vocab)
    );

    let k = corpus::DEFAULT_CONTEXT;
    let public_ds = corpus::windows(&corpus::encode_all(&public, &vocab), k)?;
    let private_ds = corpus::windows(&corpus::encode_all(&private, &vocab), k)?;
    let (ctx, target) = private_ds.example(3);
    println!("\nwindow 3: context {ctx:?} -> {target}");

    let splits = corpus::split(&private_ds, SplitFractions::new(2.0 / 3.0, 1.0 / 6.0, 1.0 / 6.0)?, 0)?;
    println!();
    print!(
        "{}",
        experiment::token_report(&[
            ("public", &public_ds, None),
            ("private", &splits.train, Some(&splits.test)),
        ])
    );
    Ok(())
}
