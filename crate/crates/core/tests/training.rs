use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dplm::corpus::{self, ContextWindowDataset, Sentence};
use dplm::experiment::synthetic;
use dplm::model::{Architecture, LanguageModel};
use dplm::optimizer::{self, OptimizerKind, PrivacySpec, TrainConfig};
use dplm::{accountant, Error};

fn random_dataset(seed: u64, sentences: usize, vocab: usize, k: usize) -> ContextWindowDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s: Vec<Sentence> = (0..sentences)
        .map(|_| {
            Sentence(
                (0..rng.random_range(3..12))
                    .map(|_| rng.random_range(1..vocab))
                    .collect(),
            )
        })
        .collect();
    corpus::windows(&s, k).unwrap()
}

fn small_model(vocab: usize) -> LanguageModel {
    let arch = Architecture::new(3, 4, vec![8, 4, 4], vocab).unwrap();
    LanguageModel::init(arch, &mut ChaCha8Rng::seed_from_u64(5))
}

fn config(optimizer: OptimizerKind, batch_size: usize, epochs: usize, lr: f64) -> TrainConfig {
    TrainConfig {
        batch_size,
        epochs,
        learning_rate: lr,
        seed: 9,
        optimizer,
        eval_interval: 10,
    }
}

#[test]
fn zero_epochs_returns_the_model() {
    let ds = random_dataset(0, 10, 12, 3);
    let m = small_model(12);
    let out = optimizer::train(m.clone(), &ds, None, &config(OptimizerKind::Adam, 4, 0, 1e-3), None).unwrap();
    assert_eq!(out.model, m);
    assert!(out.metrics.is_empty());
    assert_eq!(out.steps, 0);
}

#[test]
fn dpsgd_needs_a_privacy_spec() {
    let ds = random_dataset(0, 10, 12, 3);
    let err = optimizer::train(
        small_model(12),
        &ds,
        None,
        &config(OptimizerKind::Dpsgd, 4, 1, 0.1),
        None,
    );
    assert!(matches!(err, Err(Error::InvalidConfig(_))));
}

#[test]
fn batch_larger_than_dataset_is_rejected() {
    let ds = random_dataset(0, 2, 12, 3);
    let err = optimizer::train(
        small_model(12),
        &ds,
        None,
        &config(OptimizerKind::Sgd, ds.len() + 1, 1, 0.1),
        None,
    );
    assert!(err.is_err());
}

#[test]
fn dpsgd_ledger_bookkeeping() {
    // N = 1000 examples, L = 10, one epoch = 100 steps
    let s: Vec<Sentence> = (0..100)
        .map(|i| Sentence((0..10).map(|j| 1 + (i + j) % 11).collect()))
        .collect();
    let ds = corpus::windows(&s, 3).unwrap();
    assert_eq!(ds.len(), 1000);
    let spec = PrivacySpec::default();
    let out = optimizer::train(
        small_model(12),
        &ds,
        None,
        &config(OptimizerKind::Dpsgd, 10, 1, 0.05),
        Some(&spec),
    )
    .unwrap();
    let ledger = out.ledger.unwrap();
    assert_eq!(out.steps, 100);
    assert_eq!(ledger.total_steps(), 100);
    assert_eq!(ledger.entries().len(), 1);
    assert_eq!(ledger.entries()[0].q, 0.01);
    assert_eq!(ledger.entries()[0].sigma, 1.1);
    assert_eq!(ledger.assumption, accountant::SAMPLED_GAUSSIAN);
}

#[test]
fn wasted_steps_still_consume_privacy() {
    let m = small_model(12);
    let ctx = [1usize, 2, 3];
    let batch = vec![(&ctx[..], 4usize); 5];
    let spec = PrivacySpec::default();
    let mut stepped = m.clone();
    let out = optimizer::dpsgd_step(
        &mut stepped,
        &batch,
        &spec,
        0.0,
        0.05,
        &mut ChaCha8Rng::seed_from_u64(0),
    )
    .unwrap();
    assert_eq!(stepped.params, m.params);
    let entry = out.entry.unwrap();
    assert_eq!((entry.q, entry.sigma, entry.steps), (0.05, 1.1, 1));

    // zero learning rate is rejected for whole runs
    let ds = random_dataset(1, 20, 12, 3);
    assert!(optimizer::train(m, &ds, None, &config(OptimizerKind::Dpsgd, 8, 1, 0.0), Some(&spec)).is_err());
}

#[test]
fn per_example_noise_is_tagged() {
    let ds = random_dataset(1, 20, 12, 3);
    let spec = PrivacySpec {
        per_example_noise: true,
        ..Default::default()
    };
    let out = optimizer::train(
        small_model(12),
        &ds,
        None,
        &config(OptimizerKind::Dpsgd, 8, 1, 0.1),
        Some(&spec),
    )
    .unwrap();
    assert_eq!(out.ledger.unwrap().assumption, accountant::PER_EXAMPLE_NOISE);
}

#[test]
fn hand_computed_clipped_step() {
    // zero network, V = 2: p = (1/2, 1/2), so only the output bias has a
    // gradient, p - onehot(1) = (1/2, -1/2), with norm 1/sqrt(2)
    let arch = Architecture::new(1, 1, vec![1], 2).unwrap();
    let model = LanguageModel::zeros(arch);
    let context = [0usize];
    let batch = [(&context[..], 1usize)];
    let bias = |m: &LanguageModel| m.params.block("output.bias").unwrap().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(0);

    let mut unclipped = model.clone();
    let spec = PrivacySpec {
        sigma: 0.0,
        clip_norm: 1.0,
        ..Default::default()
    };
    optimizer::dpsgd_step(&mut unclipped, &batch, &spec, 0.1, 1.0, &mut rng).unwrap();
    assert_eq!(bias(&unclipped), [-0.05, 0.05]);

    let mut clipped = model.clone();
    let spec = PrivacySpec {
        sigma: 0.0,
        clip_norm: 0.5,
        ..Default::default()
    };
    optimizer::dpsgd_step(&mut clipped, &batch, &spec, 0.1, 1.0, &mut rng).unwrap();
    // rescaled to norm 0.5: 0.1 * 0.5 / sqrt(2)
    let expect = 0.05 / 2f64.sqrt();
    let b = bias(&clipped);
    assert!((b[0] + expect).abs() < 1e-15 && (b[1] - expect).abs() < 1e-15, "{b:?}");
    let rest: f64 = clipped.params.values.iter().map(|v| v.abs()).sum::<f64>() - b[0].abs() - b[1].abs();
    assert_eq!(rest, 0.0);
}

#[test]
fn identical_examples_within_clip_give_one_gradient() {
    let m = small_model(12);
    let ctx = [3usize, 4, 5];
    let single = dplm::numerics::example_grad(&m.params, &ctx, 6, &m.arch).unwrap();
    let spec = PrivacySpec {
        sigma: 0.0,
        clip_norm: single.norm() * 2.0,
        ..Default::default()
    };
    let batch = vec![(&ctx[..], 6usize); 4];
    let g = optimizer::noisy_batch_gradient(&m, &batch, &spec, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    for (a, b) in g.values.iter().zip(&single.values) {
        assert!((a - b).abs() <= 1e-15 * b.abs().max(1e-300), "{a} vs {b}");
    }
}

#[test]
fn divergent_example_is_named() {
    let mut m = small_model(12);
    let off = m.params.layout.block("output.bias").unwrap().offset;
    m.params.values[off] = f64::NAN;
    let ctx = [1usize, 2, 3];
    let batch = vec![(&ctx[..], 4usize); 3];
    let spec = PrivacySpec::default();
    let err = optimizer::noisy_batch_gradient(&m, &batch, &spec, &mut ChaCha8Rng::seed_from_u64(0));
    assert!(matches!(err, Err(Error::DivergentExample(0))), "{err:?}");
}

#[test]
fn divergence_is_recorded_not_raised() {
    let ds = random_dataset(2, 20, 12, 3);
    let mut m = small_model(12);
    m.params.values[0] = f64::INFINITY;
    let dev = random_dataset(3, 5, 12, 3);
    let spec = PrivacySpec::default();
    let out = optimizer::train(
        m,
        &ds,
        Some(&dev),
        &config(OptimizerKind::Dpsgd, 4, 1, 0.1),
        Some(&spec),
    )
    .unwrap();
    assert!(out.diverged);
    let last = out.metrics.last().unwrap();
    assert_eq!(last.value, f64::INFINITY);
}

#[test]
fn training_is_deterministic() {
    let ds = random_dataset(4, 30, 12, 3);
    let spec = PrivacySpec::default();
    let c = config(OptimizerKind::Dpsgd, 8, 2, 0.1);
    let a = optimizer::train(small_model(12), &ds, Some(&ds), &c, Some(&spec)).unwrap();
    let b = optimizer::train(small_model(12), &ds, Some(&ds), &c, Some(&spec)).unwrap();
    assert_eq!(a.model.params.values, b.model.params.values);
    assert_eq!(optimizer::metrics_csv(&a.metrics), optimizer::metrics_csv(&b.metrics));

    let c = config(OptimizerKind::Adam, 8, 2, 1e-2);
    let a = optimizer::train(small_model(12), &ds, None, &c, None).unwrap();
    let b = optimizer::train(small_model(12), &ds, None, &c, None).unwrap();
    assert_eq!(a.model.params.values, b.model.params.values);
}

#[test]
fn smoke_run_loss_decreases() {
    let (public, _) = synthetic::corpus_pair(&synthetic::SyntheticSpec {
        public_sentences: 50,
        private_sentences: 10,
        words: 40,
        ..Default::default()
    });
    let vocab = corpus::vocabulary_from_lines(public.iter(), 2).unwrap();
    let ds = corpus::windows(&corpus::encode_all(&public, &vocab), 5).unwrap();
    let arch = Architecture::new(5, 8, vec![32, 16, 8], vocab.len()).unwrap();
    let model = LanguageModel::init(arch, &mut ChaCha8Rng::seed_from_u64(0));
    let c = TrainConfig {
        batch_size: 16,
        epochs: 3,
        learning_rate: 1e-2,
        seed: 0,
        optimizer: OptimizerKind::Adam,
        eval_interval: 10,
    };
    let out = optimizer::train(model, &ds, Some(&ds), &c, None).unwrap();
    let losses: Vec<f64> = out
        .metrics
        .iter()
        .filter(|r| r.split == "train")
        .map(|r| r.value)
        .collect();
    assert!(losses.len() >= 3);
    assert!(losses[0] > losses[1] && losses[1] > losses[2], "{losses:?}");
    let dev: Vec<f64> = out
        .metrics
        .iter()
        .filter(|r| r.split == "dev")
        .map(|r| r.value)
        .collect();
    assert_eq!(dev.len(), losses.len());
}

#[test]
fn metrics_csv_file_round_trip() {
    let ds = random_dataset(5, 20, 12, 3);
    let out = optimizer::train(
        small_model(12),
        &ds,
        Some(&ds),
        &config(OptimizerKind::Sgd, 4, 1, 0.1),
        None,
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.csv");
    optimizer::write_metrics_csv(&path, &out.metrics).unwrap();
    optimizer::append_metrics_csv(&path, &out.metrics[..1]).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.starts_with(optimizer::METRICS_HEADER));
    let back = optimizer::parse_metrics_csv(&text).unwrap();
    assert_eq!(back.len(), out.metrics.len() + 1);
    assert_eq!(&back[..out.metrics.len()], &out.metrics[..]);
}
