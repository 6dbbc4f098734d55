//! Seeded synthetic corpus pairs for desk-scale runs.
//!
//! Both corpora draw words from one word list, so their vocabularies
//! overlap, but they follow different first-order transition tables: each
//! word keeps its public successor list in the private corpus only with
//! probability `shared_transitions`, and the private background frequencies
//! are a permutation of the public ones.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SYLLABLES: [&str; 20] = [
    "ka", "lo", "mi", "nu", "re", "sa", "to", "vi", "be", "da", "fu", "go", "hi", "ja", "ke", "lu", "mo", "ni", "po",
    "ru",
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticSpec {
    pub words: usize,
    pub public_sentences: usize,
    pub private_sentences: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Successor candidates per word.
    pub branching: usize,
    /// Probability of following the transition table instead of the
    /// background unigram distribution.
    pub follow: f64,
    pub shared_transitions: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            words: 640,
            public_sentences: 1000,
            private_sentences: 300,
            min_len: 6,
            max_len: 14,
            branching: 4,
            follow: 0.85,
            shared_transitions: 0.5,
            seed: 0,
        }
    }
}

/// Word `i` spelled as three syllables.
pub fn word(i: usize) -> String {
    let n = SYLLABLES.len();
    format!(
        "{}{}{}",
        SYLLABLES[(i / (n * n)) % n],
        SYLLABLES[(i / n) % n],
        SYLLABLES[i % n]
    )
}

struct Language {
    background: Vec<f64>,
    successors: Vec<Vec<usize>>,
}

fn zipf_weights(n: usize) -> Vec<f64> {
    (0..n).map(|r| 1.0 / (r as f64 + 1.0)).collect()
}

fn draw(weights: &[f64], rng: &mut impl Rng) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        if u < w {
            return i;
        }
        u -= w;
    }
    weights.len() - 1
}

impl Language {
    fn sentence(&self, spec: &SyntheticSpec, rng: &mut impl Rng) -> String {
        let len = rng.random_range(spec.min_len..=spec.max_len);
        let succ_weights = zipf_weights(spec.branching);
        let mut cur = draw(&self.background, rng);
        let mut words = vec![word(cur)];
        for _ in 1..len {
            cur = if rng.random::<f64>() < spec.follow {
                self.successors[cur][draw(&succ_weights, rng)]
            } else {
                draw(&self.background, rng)
            };
            words.push(word(cur));
        }
        words.join(" ")
    }
}

fn successor_list(spec: &SyntheticSpec, background: &[f64], rng: &mut impl Rng) -> Vec<usize> {
    (0..spec.branching).map(|_| draw(background, rng)).collect()
}

/// Generates `(public, private)` corpora, one sentence per entry.
pub fn corpus_pair(spec: &SyntheticSpec) -> (Vec<String>, Vec<String>) {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let public_bg = zipf_weights(spec.words);
    let public_succ: Vec<Vec<usize>> = (0..spec.words)
        .map(|_| successor_list(spec, &public_bg, &mut rng))
        .collect();

    let mut perm: Vec<usize> = (0..spec.words).collect();
    perm.shuffle(&mut rng);
    let mut private_bg = vec![0.0; spec.words];
    for (rank, &w) in perm.iter().enumerate() {
        private_bg[w] = public_bg[rank];
    }
    let private_succ: Vec<Vec<usize>> = public_succ
        .iter()
        .map(|succ| {
            if rng.random::<f64>() < spec.shared_transitions {
                succ.clone()
            } else {
                successor_list(spec, &private_bg, &mut rng)
            }
        })
        .collect();

    let public = Language {
        background: public_bg,
        successors: public_succ,
    };
    let private = Language {
        background: private_bg,
        successors: private_succ,
    };
    let pub_lines = (0..spec.public_sentences)
        .map(|_| public.sentence(spec, &mut rng))
        .collect();
    let priv_lines = (0..spec.private_sentences)
        .map(|_| private.sentence(spec, &mut rng))
        .collect();
    (pub_lines, priv_lines)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_sized() {
        let spec = SyntheticSpec {
            public_sentences: 20,
            private_sentences: 7,
            ..Default::default()
        };
        let (a, b) = corpus_pair(&spec);
        assert_eq!((a.len(), b.len()), (20, 7));
        assert_eq!(corpus_pair(&spec), (a.clone(), b));
        for line in &a {
            let n = line.split_whitespace().count();
            assert!((spec.min_len..=spec.max_len).contains(&n));
        }
    }

    #[test]
    fn words_are_distinct() {
        let words: std::collections::HashSet<String> = (0..8000).map(word).collect();
        assert_eq!(words.len(), 8000);
    }
}
