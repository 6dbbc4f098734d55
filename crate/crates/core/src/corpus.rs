//! Plain-text corpora, the shared vocabulary, and fixed-length context windows.
//!
//! Corpora are UTF-8 files with one sentence per line. Tokenization is
//! whitespace splitting after lowercasing. Both the public and the private
//! corpus feed a single vocabulary so that a model pretrained on one can be
//! fine-tuned on the other without remapping ids.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;

/// Surface strings of the reserved tokens, indexed by id.
pub const SPECIALS: [&str; 4] = ["<pad>", "<unk>", "<bos>", "<eos>"];

/// Default context length of the feedforward model.
pub const DEFAULT_CONTEXT: usize = 20;

/// Default minimum count for a token to enter the vocabulary.
pub const DEFAULT_MIN_COUNT: usize = 2;

/// Bidirectional token/id map. Ids are contiguous and the four specials
/// occupy ids 0..4.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds a vocabulary from regular tokens, placed after the specials in
    /// the given order. Duplicates and special surface strings are rejected.
    pub fn from_tokens<I, S>(regular: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        let mut index: HashMap<String, usize> = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        for tok in regular {
            let tok = tok.into();
            if tok.is_empty() || tok.chars().any(char::is_whitespace) {
                return Err(Error::format("vocabulary", format!("invalid token {tok:?}")));
            }
            if index.contains_key(&tok) {
                return Err(Error::format("vocabulary", format!("duplicate token {tok:?}")));
            }
            index.insert(tok.clone(), tokens.len());
            tokens.push(tok);
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    /// Always false: the specials are present in every vocabulary.
    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Id of `token`, or `UNK` when it is out of vocabulary.
    pub fn id_or_unk(&self, token: &str) -> usize {
        self.id(token).unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Serializes as one token per line, line number = id.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for tok in &self.tokens {
            out.push_str(tok);
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let lines: Vec<&str> = text.lines().collect();
        if lines.len() < SPECIALS.len() || lines[..SPECIALS.len()] != SPECIALS {
            return Err(Error::format(
                "vocabulary",
                "file must start with <pad>, <unk>, <bos>, <eos>",
            ));
        }
        Self::from_tokens(lines[SPECIALS.len()..].iter().copied())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

/// Lowercased whitespace tokens of one line.
pub fn tokenize(line: &str) -> impl Iterator<Item = String> + '_ {
    line.split_whitespace().map(str::to_lowercase)
}

/// Reads every line of `reader`, reporting the 1-based line number on failure.
pub fn read_lines<R: BufRead>(reader: R, name: &Path) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|source| Error::ReadAt {
            path: name.to_path_buf(),
            line: i + 1,
            source,
        })?;
        out.push(line);
    }
    Ok(out)
}

pub fn read_corpus(path: impl AsRef<Path>) -> Result<Vec<String>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_lines(BufReader::new(file), path)
}

/// Builds the shared vocabulary over both corpora.
///
/// Tokens occurring at least `min_count` times across the two corpora are
/// kept, sorted by descending count with lexicographic tie-breaking, so the
/// result does not depend on line order.
pub fn build_vocabulary<P: BufRead, Q: BufRead>(public: P, private: Q, min_count: usize) -> Result<Vocabulary> {
    let public = read_lines(public, &PathBuf::from("<public>"))?;
    let private = read_lines(private, &PathBuf::from("<private>"))?;
    vocabulary_from_lines(public.iter().chain(private.iter()), min_count)
}

pub fn build_vocabulary_from_files(
    public: impl AsRef<Path>,
    private: impl AsRef<Path>,
    min_count: usize,
) -> Result<Vocabulary> {
    let public = read_corpus(public)?;
    let private = read_corpus(private)?;
    vocabulary_from_lines(public.iter().chain(private.iter()), min_count)
}

pub fn vocabulary_from_lines<'a, I>(lines: I, min_count: usize) -> Result<Vocabulary>
where
    I: IntoIterator<Item = &'a String>,
{
    if min_count == 0 {
        return Err(Error::InvalidConfig("min_count must be positive".into()));
    }
    let mut counts: HashMap<String, usize> = HashMap::new();
    let mut total = 0usize;
    for line in lines {
        for tok in tokenize(line) {
            total += 1;
            if SPECIALS.contains(&tok.as_str()) {
                continue;
            }
            *counts.entry(tok).or_default() += 1;
        }
    }
    if total == 0 {
        return Err(Error::EmptyCorpus);
    }
    let mut kept: Vec<(String, usize)> = counts.into_iter().filter(|(_, c)| *c >= min_count).collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Vocabulary::from_tokens(kept.into_iter().map(|(t, _)| t))
}

/// Token ids of one sentence, always terminated by `EOS`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sentence(pub Vec<usize>);

impl Sentence {
    pub fn ids(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

pub fn encode(line: &str, vocab: &Vocabulary) -> Sentence {
    let mut ids: Vec<usize> = tokenize(line).map(|t| vocab.id_or_unk(&t)).collect();
    ids.push(EOS);
    Sentence(ids)
}

/// Encodes a prompt for generation: same tokenization, no trailing `EOS`.
pub fn encode_prompt(line: &str, vocab: &Vocabulary) -> Vec<usize> {
    tokenize(line).map(|t| vocab.id_or_unk(&t)).collect()
}

/// Space-joined surface form, skipping PAD, BOS and EOS.
pub fn decode(ids: &[usize], vocab: &Vocabulary) -> String {
    ids.iter()
        .filter(|&&id| !matches!(id, PAD | BOS | EOS))
        .map(|&id| vocab.token(id).unwrap_or(SPECIALS[UNK]))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn encode_all(lines: &[String], vocab: &Vocabulary) -> Vec<Sentence> {
    lines.iter().map(|l| encode(l, vocab)).collect()
}

/// Supervised (previous k ids -> next id) pairs.
///
/// Examples are stored sentence by sentence; `sentence_starts[s]` is the
/// index of the first example of sentence `s`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContextWindowDataset {
    context_len: usize,
    contexts: Vec<usize>,
    targets: Vec<usize>,
    sentence_starts: Vec<usize>,
}

impl ContextWindowDataset {
    pub fn empty(context_len: usize) -> Self {
        Self {
            context_len,
            contexts: Vec::new(),
            targets: Vec::new(),
            sentence_starts: Vec::new(),
        }
    }

    pub fn context_len(&self) -> usize {
        self.context_len
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn context(&self, i: usize) -> &[usize] {
        &self.contexts[i * self.context_len..(i + 1) * self.context_len]
    }

    pub fn target(&self, i: usize) -> usize {
        self.targets[i]
    }

    pub fn targets(&self) -> &[usize] {
        &self.targets
    }

    pub fn example(&self, i: usize) -> (&[usize], usize) {
        (self.context(i), self.targets[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[usize], usize)> + '_ {
        (0..self.len()).map(move |i| self.example(i))
    }

    pub fn sentence_count(&self) -> usize {
        self.sentence_starts.len()
    }

    /// Example index range covered by sentence `s`.
    pub fn sentence_range(&self, s: usize) -> std::ops::Range<usize> {
        let start = self.sentence_starts[s];
        let end = self.sentence_starts.get(s + 1).copied().unwrap_or(self.targets.len());
        start..end
    }

    fn push_sentence_from(&mut self, other: &Self, s: usize) {
        self.sentence_starts.push(self.targets.len());
        for i in other.sentence_range(s) {
            self.contexts.extend_from_slice(other.context(i));
            self.targets.push(other.target(i));
        }
    }

    /// Copies the examples at `indices` into a new dataset. Sentence
    /// boundaries are not preserved; each example becomes its own group.
    pub fn select(&self, indices: &[usize]) -> Self {
        let mut out = Self::empty(self.context_len);
        for &i in indices {
            out.sentence_starts.push(out.targets.len());
            out.contexts.extend_from_slice(self.context(i));
            out.targets.push(self.target(i));
        }
        out
    }
}

/// Materializes one example per token position of every sentence.
pub fn windows(sentences: &[Sentence], k: usize) -> Result<ContextWindowDataset> {
    if k == 0 {
        return Err(Error::ZeroContext);
    }
    let mut ds = ContextWindowDataset::empty(k);
    for sentence in sentences {
        ds.sentence_starts.push(ds.targets.len());
        let ids = sentence.ids();
        for (pos, &target) in ids.iter().enumerate() {
            let start = pos.saturating_sub(k);
            let pad = k - (pos - start);
            ds.contexts.extend(std::iter::repeat_n(PAD, pad));
            ds.contexts.extend_from_slice(&ids[start..pos]);
            ds.targets.push(target);
        }
    }
    Ok(ds)
}

/// Train/dev/test fractions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitFractions {
    pub train: f64,
    pub dev: f64,
    pub test: f64,
}

impl SplitFractions {
    pub fn new(train: f64, dev: f64, test: f64) -> Result<Self> {
        let f = Self { train, dev, test };
        f.validate()?;
        Ok(f)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.train, self.dev, self.test];
        if all.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::InvalidFractions(format!("{all:?} must be nonnegative")));
        }
        if (all.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidFractions(format!("{all:?} must sum to 1")));
        }
        Ok(())
    }

    /// Sentence counts per split: dev and test are floored, the remainder
    /// goes to train.
    pub fn counts(&self, sentences: usize) -> (usize, usize, usize) {
        let n = sentences as f64;
        let dev = ((n * self.dev + 1e-9).floor() as usize).min(sentences);
        let test = ((n * self.test + 1e-9).floor() as usize).min(sentences - dev);
        (sentences - dev - test, dev, test)
    }
}

/// Train/dev/test partition of a dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Splits {
    pub train: ContextWindowDataset,
    pub dev: ContextWindowDataset,
    pub test: ContextWindowDataset,
}

/// Partitions whole sentences into train/dev/test after a seeded shuffle.
/// Within each split, sentences keep their original relative order.
pub fn split(dataset: &ContextWindowDataset, fractions: SplitFractions, seed: u64) -> Result<Splits> {
    fractions.validate()?;
    let n = dataset.sentence_count();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (_, n_dev, n_test) = fractions.counts(n);
    let mut dev_ids = order[..n_dev].to_vec();
    let mut test_ids = order[n_dev..n_dev + n_test].to_vec();
    let mut train_ids = order[n_dev + n_test..].to_vec();
    dev_ids.sort_unstable();
    test_ids.sort_unstable();
    train_ids.sort_unstable();

    let gather = |ids: &[usize]| {
        let mut out = ContextWindowDataset::empty(dataset.context_len());
        for &s in ids {
            out.push_sentence_from(dataset, s);
        }
        out
    };
    Ok(Splits {
        train: gather(&train_ids),
        dev: gather(&dev_ids),
        test: gather(&test_ids),
    })
}

/// Writes lines to a corpus file, one per line.
pub fn write_corpus(path: impl AsRef<Path>, lines: &[String]) -> Result<()> {
    let path = path.as_ref();
    let mut f = std::io::BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    for line in lines {
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    f.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ab_vocab() -> Vocabulary {
        build_vocabulary("a b\n".as_bytes(), "a b\n".as_bytes(), 1).unwrap()
    }

    #[test]
    fn tiny_vocabulary() {
        let v = ab_vocab();
        assert_eq!(v.tokens(), &["<pad>", "<unk>", "<bos>", "<eos>", "a", "b"]);
        assert_eq!(v.len(), 6);
    }

    #[test]
    fn threshold_above_every_count_keeps_only_specials() {
        let v = build_vocabulary("a b a\n".as_bytes(), "b c\n".as_bytes(), 5).unwrap();
        assert_eq!(v.len(), 4);
    }

    #[test]
    fn hand_counted_frequencies() {
        // the:4 cat:2 sat:2 mat:1 on:1 dog:1 ran:1 (the "The" folds to "the")
        let public = "The cat sat\nthe dog ran\n";
        let private = "the cat sat on The mat\n";
        let v = build_vocabulary(public.as_bytes(), private.as_bytes(), 1).unwrap();
        assert_eq!(&v.tokens()[4..], &["the", "cat", "sat", "dog", "mat", "on", "ran"]);
        let v2 = build_vocabulary(public.as_bytes(), private.as_bytes(), 2).unwrap();
        assert_eq!(&v2.tokens()[4..], &["the", "cat", "sat"]);
    }

    #[test]
    fn empty_corpus_is_an_error() {
        let err = build_vocabulary("\n\n".as_bytes(), "".as_bytes(), 1).unwrap_err();
        assert_eq!(err.to_string(), "empty corpus");
    }

    #[test]
    fn invalid_utf8_reports_line() {
        let bytes: &[u8] = b"ok line\n\xff\xfe\n";
        let err = build_vocabulary("a\n".as_bytes(), bytes, 1).unwrap_err();
        match err {
            Error::ReadAt { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn encode_rules() {
        let v = ab_vocab();
        assert_eq!(encode("", &v).0, vec![EOS]);
        assert_eq!(encode("a b", &v).0, vec![4, 5, EOS]);
        assert_eq!(encode("A zzz", &v).0, vec![4, UNK, EOS]);
        assert_eq!(decode(&encode("A zzz b", &v).0, &v), "a <unk> b");
    }

    #[test]
    fn window_padding() {
        let ds = windows(&[Sentence(vec![5, EOS])], 3).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.context(0), &[PAD, PAD, PAD]);
        assert_eq!(ds.context(1), &[PAD, PAD, 5]);
        assert_eq!(ds.targets(), &[5, EOS]);
    }

    #[test]
    fn window_edge_cases() {
        assert_eq!(windows(&[], 4).unwrap().len(), 0);
        assert_eq!(
            windows(&[], 0).unwrap_err().to_string(),
            "context length must be positive"
        );
    }

    #[test]
    fn two_sentence_windows_by_hand() {
        let s = [Sentence(vec![4, 5, 6, EOS]), Sentence(vec![7, EOS])];
        let ds = windows(&s, 2).unwrap();
        let expected: Vec<(Vec<usize>, usize)> = vec![
            (vec![PAD, PAD], 4),
            (vec![PAD, 4], 5),
            (vec![4, 5], 6),
            (vec![5, 6], EOS),
            (vec![PAD, PAD], 7),
            (vec![PAD, 7], EOS),
        ];
        let got: Vec<(Vec<usize>, usize)> = ds.iter().map(|(c, t)| (c.to_vec(), t)).collect();
        assert_eq!(got, expected);
        assert_eq!(ds.sentence_range(1), 4..6);
    }

    fn hundred_sentences() -> ContextWindowDataset {
        let s: Vec<Sentence> = (0..100).map(|i| Sentence(vec![4 + i % 7, EOS])).collect();
        windows(&s, 3).unwrap()
    }

    #[test]
    fn split_counts_and_determinism() {
        let ds = hundred_sentences();
        let f = SplitFractions::new(0.8, 0.1, 0.1).unwrap();
        let a = split(&ds, f, 7).unwrap();
        assert_eq!(
            (
                a.train.sentence_count(),
                a.dev.sentence_count(),
                a.test.sentence_count()
            ),
            (80, 10, 10)
        );
        assert_eq!(a.train.len() + a.dev.len() + a.test.len(), ds.len());
        assert_eq!(a, split(&ds, f, 7).unwrap());

        let all = split(&ds, SplitFractions::new(1.0, 0.0, 0.0).unwrap(), 1).unwrap();
        assert_eq!(all.train, ds);
        assert!(all.dev.is_empty() && all.test.is_empty());
    }

    #[test]
    fn split_remainder_goes_to_train() {
        let f = SplitFractions::new(0.5, 0.25, 0.25).unwrap();
        assert_eq!(f.counts(7), (5, 1, 1));
        let f = SplitFractions::new(0.71, 0.29, 0.0).unwrap();
        assert_eq!(f.counts(100), (71, 29, 0));
    }

    #[test]
    fn bad_fractions() {
        assert!(SplitFractions::new(0.5, 0.5, 0.5).is_err());
        assert!(SplitFractions::new(1.2, -0.1, -0.1).is_err());
    }

    #[test]
    fn vocabulary_file_round_trip() {
        let v = build_vocabulary("x y z y\n".as_bytes(), "z z\n".as_bytes(), 1).unwrap();
        let text = v.to_text();
        assert_eq!(text, "<pad>\n<unk>\n<bos>\n<eos>\nz\ny\nx\n");
        let back = Vocabulary::from_text(&text).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.to_text(), text);
        assert!(Vocabulary::from_text("a\nb\n").is_err());
    }
}
