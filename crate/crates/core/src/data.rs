//! Vocabularies, corpus I/O and padded batches.
//!
//! Reserved ids are shared by every module: `0 = PAD`, `1 = EOS`, `2 = BOS`,
//! `3 = UNK`.

use std::collections::HashMap;
use std::fs;
use std::io::{self, BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const EOS: TokenId = 1;
pub const BOS: TokenId = 2;
pub const UNK: TokenId = 3;
pub const NUM_RESERVED: usize = 4;

pub const RESERVED_TOKENS: [&str; NUM_RESERVED] = ["<pad>", "</s>", "<s>", "<unk>"];

#[derive(Debug, Error)]
pub enum DataError {
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("max vocabulary size {0} leaves no room for the reserved tokens")]
    VocabTooSmall(usize),
    #[error("malformed vocabulary file: {0}")]
    MalformedVocab(String),
    #[error("parallel corpus is misaligned: {source_lines} source vs {target_lines} target lines")]
    Misaligned {
        source_lines: usize,
        target_lines: usize,
    },
    #[error("no sentence pairs survive length filtering ({dropped} dropped)")]
    NoSurvivingPairs { dropped: usize },
    #[error("{path}: {err}")]
    Io { path: String, err: io::Error },
}

pub type Result<T> = std::result::Result<T, DataError>;

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> DataError + '_ {
    move |err| DataError::Io {
        path: path.display().to_string(),
        err,
    }
}

/// Dense token list. Line index equals id; the first four ids are reserved.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocab {
    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as TokenId))
            .collect();
        Self { tokens, index }
    }

    /// Vocabulary with only the reserved tokens followed by `words` in order.
    pub fn with_words<S: AsRef<str>>(words: &[S]) -> Self {
        let mut tokens: Vec<String> = RESERVED_TOKENS.iter().map(|s| s.to_string()).collect();
        tokens.extend(words.iter().map(|w| w.as_ref().to_string()));
        Self::from_tokens(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Whitespace-tokenises `text`; out-of-vocabulary tokens map to `UNK`.
    pub fn encode_line(&self, text: &str) -> Vec<TokenId> {
        text.split_whitespace()
            .map(|t| match self.index.get(t) {
                Some(&id) if id as usize >= NUM_RESERVED => id,
                _ => UNK,
            })
            .collect()
    }

    /// Joins tokens with single spaces, stopping at the first `EOS` and
    /// skipping every other reserved id.
    pub fn decode_line(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .take_while(|&&id| id != EOS)
            .filter(|&&id| id as usize >= NUM_RESERVED)
            .filter_map(|&id| self.token(id))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for t in &self.tokens {
            out.push_str(t);
            out.push('\n');
        }
        fs::write(path, out).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        if tokens.len() < NUM_RESERVED {
            return Err(DataError::MalformedVocab(format!(
                "{} lines, need at least {NUM_RESERVED}",
                tokens.len()
            )));
        }
        for (i, r) in RESERVED_TOKENS.iter().enumerate() {
            if tokens[i] != *r {
                return Err(DataError::MalformedVocab(format!(
                    "line {} must be {r}, found {:?}",
                    i + 1,
                    tokens[i]
                )));
            }
        }
        let vocab = Self::from_tokens(tokens);
        if vocab.index.len() != vocab.tokens.len() {
            return Err(DataError::MalformedVocab("duplicate tokens".into()));
        }
        if let Some(t) = vocab.tokens.iter().find(|t| t.is_empty() || t.contains(char::is_whitespace)) {
            return Err(DataError::MalformedVocab(format!("invalid token {t:?}")));
        }
        Ok(vocab)
    }
}

/// Frequency-ranked whitespace vocabulary of at most `max_size` entries
/// (reserved ids included). Ties are broken lexicographically.
pub fn build_vocab<'a>(lines: impl IntoIterator<Item = &'a str>, max_size: usize) -> Result<Vocab> {
    if max_size < NUM_RESERVED {
        return Err(DataError::VocabTooSmall(max_size));
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for line in lines {
        for tok in line.split_whitespace() {
            if !RESERVED_TOKENS.contains(&tok) {
                *counts.entry(tok).or_default() += 1;
            }
        }
    }
    if counts.is_empty() {
        return Err(DataError::EmptyCorpus);
    }
    let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    ranked.truncate(max_size - NUM_RESERVED);
    let words: Vec<&str> = ranked.into_iter().map(|(t, _)| t).collect();
    Ok(Vocab::with_words(&words))
}

pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    BufReader::new(file)
        .lines()
        .collect::<io::Result<Vec<_>>>()
        .map_err(io_err(path))
}

pub fn write_lines<S: AsRef<str>>(path: &Path, lines: &[S]) -> Result<()> {
    let mut out = io::BufWriter::new(fs::File::create(path).map_err(io_err(path))?);
    for l in lines {
        out.write_all(l.as_ref().as_bytes()).map_err(io_err(path))?;
        out.write_all(b"\n").map_err(io_err(path))?;
    }
    out.flush().map_err(io_err(path))
}

/// Sentence pairs encoded as token ids, aligned by index.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParallelCorpus {
    pub source: Vec<Vec<TokenId>>,
    pub target: Vec<Vec<TokenId>>,
}

impl ParallelCorpus {
    pub fn new(source: Vec<Vec<TokenId>>, target: Vec<Vec<TokenId>>) -> Result<Self> {
        if source.len() != target.len() {
            return Err(DataError::Misaligned {
                source_lines: source.len(),
                target_lines: target.len(),
            });
        }
        Ok(Self { source, target })
    }

    pub fn encode(src_vocab: &Vocab, tgt_vocab: &Vocab, src: &[String], tgt: &[String]) -> Result<Self> {
        Self::new(
            src.iter().map(|l| src_vocab.encode_line(l)).collect(),
            tgt.iter().map(|l| tgt_vocab.encode_line(l)).collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.source.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source.is_empty()
    }
}

/// Row-major `[rows, cols]` id matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct IdMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<TokenId>,
}

impl IdMatrix {
    pub fn row(&self, r: usize) -> &[TokenId] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Right-pads each row with `PAD` to the longest row.
    pub fn from_rows(rows: &[Vec<TokenId>]) -> Self {
        let cols = rows.iter().map(Vec::len).max().unwrap_or(0).max(1);
        let mut data = vec![PAD; rows.len() * cols];
        for (r, row) in rows.iter().enumerate() {
            data[r * cols..r * cols + row.len()].copy_from_slice(row);
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }
}

/// One padded training batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub source: IdMatrix,
    /// `BOS y1 .. yn`, PAD-filled.
    pub target_in: IdMatrix,
    /// `y1 .. yn EOS`, PAD-filled.
    pub target_out: IdMatrix,
    /// 1.0 exactly where `target_out != PAD`.
    pub mask: Vec<f64>,
}

impl Batch {
    pub fn from_pairs(pairs: &[(&[TokenId], &[TokenId])]) -> Self {
        let src: Vec<Vec<TokenId>> = pairs.iter().map(|(s, _)| s.to_vec()).collect();
        let tin: Vec<Vec<TokenId>> = pairs
            .iter()
            .map(|(_, t)| std::iter::once(BOS).chain(t.iter().copied()).collect())
            .collect();
        let tout: Vec<Vec<TokenId>> = pairs
            .iter()
            .map(|(_, t)| t.iter().copied().chain(std::iter::once(EOS)).collect())
            .collect();
        let target_out = IdMatrix::from_rows(&tout);
        let mask = target_out
            .data
            .iter()
            .map(|&t| if t == PAD { 0.0 } else { 1.0 })
            .collect();
        Self {
            source: IdMatrix::from_rows(&src),
            target_in: IdMatrix::from_rows(&tin),
            target_out,
            mask,
        }
    }

    pub fn len(&self) -> usize {
        self.source.rows
    }

    pub fn is_empty(&self) -> bool {
        self.source.rows == 0
    }

    pub fn num_target_tokens(&self) -> usize {
        self.mask.iter().filter(|&&m| m > 0.0).count()
    }
}

/// Maximum allowed ratio between the longer and the shorter side of a pair.
pub const MAX_LENGTH_RATIO: f64 = 3.0;

/// True when a pair passes the length filters: non-empty source, both sides at
/// most `max_len` tokens, and length ratio at most [`MAX_LENGTH_RATIO`].
pub fn keep_pair(src: &[TokenId], tgt: &[TokenId], max_len: usize) -> bool {
    if src.is_empty() || src.len() > max_len || tgt.len() > max_len {
        return false;
    }
    let (s, t) = (src.len() as f64, tgt.len().max(1) as f64);
    s.max(t) / s.min(t) <= MAX_LENGTH_RATIO
}

/// Endless, seeded stream of shuffled batches. Each epoch reshuffles with a
/// seed derived from `(seed, epoch)`.
#[derive(Debug, Clone)]
pub struct BatchStream<'a> {
    corpus: &'a ParallelCorpus,
    kept: Vec<usize>,
    dropped: usize,
    batch_size: usize,
    seed: u64,
    epoch: u64,
    order: Vec<usize>,
    cursor: usize,
}

pub fn batch_iter(
    corpus: &ParallelCorpus,
    batch_size: usize,
    max_len: usize,
    seed: u64,
) -> Result<BatchStream<'_>> {
    assert!(batch_size > 0, "batch size must be positive");
    let kept: Vec<usize> = (0..corpus.len())
        .filter(|&i| keep_pair(&corpus.source[i], &corpus.target[i], max_len))
        .collect();
    let dropped = corpus.len() - kept.len();
    if kept.is_empty() {
        return Err(DataError::NoSurvivingPairs { dropped });
    }
    let mut stream = BatchStream {
        corpus,
        kept,
        dropped,
        batch_size,
        seed,
        epoch: 0,
        order: Vec::new(),
        cursor: 0,
    };
    stream.reshuffle();
    Ok(stream)
}

impl BatchStream<'_> {
    fn reshuffle(&mut self) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.epoch);
        self.order = self.kept.clone();
        self.order.shuffle(&mut rng);
        self.cursor = 0;
    }

    /// Pairs removed by the length filters.
    pub fn dropped(&self) -> usize {
        self.dropped
    }

    pub fn num_pairs(&self) -> usize {
        self.kept.len()
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }
}

impl Iterator for BatchStream<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.cursor >= self.order.len() {
            self.epoch += 1;
            self.reshuffle();
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let pairs: Vec<(&[TokenId], &[TokenId])> = self.order[self.cursor..end]
            .iter()
            .map(|&i| (self.corpus.source[i].as_slice(), self.corpus.target[i].as_slice()))
            .collect();
        self.cursor = end;
        Some(Batch::from_pairs(&pairs))
    }
}

/// Batches over the corpus in its original order (for evaluation).
pub fn sequential_batches(corpus: &ParallelCorpus, batch_size: usize) -> Vec<Batch> {
    (0..corpus.len())
        .collect::<Vec<_>>()
        .chunks(batch_size.max(1))
        .map(|idx| {
            let pairs: Vec<(&[TokenId], &[TokenId])> = idx
                .iter()
                .map(|&i| (corpus.source[i].as_slice(), corpus.target[i].as_slice()))
                .collect();
            Batch::from_pairs(&pairs)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocab_from_tiny_corpus() {
        let v = build_vocab(["a a b"], 100).unwrap();
        assert_eq!(v.tokens(), &["<pad>", "</s>", "<s>", "<unk>", "a", "b"]);
    }

    #[test]
    fn vocab_ids_follow_hand_count() {
        // the:4 cat:2 sat:2 mat:1 on:1 ; ties lexicographic
        let corpus = ["the cat sat", "the cat on the mat", "sat the"];
        let v = build_vocab(corpus, 100).unwrap();
        assert_eq!(&v.tokens()[4..], &["the", "cat", "sat", "mat", "on"]);
        let v = build_vocab(corpus, 6).unwrap();
        assert_eq!(v.len(), 6);
        assert_eq!(v.id("cat"), Some(5));
        assert_eq!(v.id("sat"), None);
    }

    #[test]
    fn vocab_size_is_bounded() {
        for max in 4..12 {
            let v = build_vocab(["a b c d e f g h i j k l m"], max).unwrap();
            assert!(v.len() <= max);
        }
        assert!(matches!(build_vocab([""], 10), Err(DataError::EmptyCorpus)));
        assert!(matches!(build_vocab(["a"], 3), Err(DataError::VocabTooSmall(3))));
    }

    #[test]
    fn encode_decode() {
        let v = build_vocab(["x y z y"], 100).unwrap();
        assert_eq!(v.decode_line(&v.encode_line("z y x")), "z y x");
        // y=4, x=5, z=6
        assert_eq!(v.encode_line("x  q y <s>"), vec![5, UNK, 4, UNK]);
        assert_eq!(v.decode_line(&[BOS, 4, UNK, PAD, 6, EOS, 5]), "y z");
    }

    #[test]
    fn vocab_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let v = build_vocab(["b a c a"], 100).unwrap();
        let p = dir.path().join("vocab.txt");
        v.save(&p).unwrap();
        assert_eq!(Vocab::load(&p).unwrap(), v);
        assert!(Vocab::parse("<pad>\n</s>\n<unk>\n<s>\n").is_err());
        assert!(Vocab::parse("<pad>\n</s>\n<s>\n<unk>\na\na\n").is_err());
    }

    #[test]
    fn batch_shift_and_mask() {
        let b = Batch::from_pairs(&[(&[5, 6, 7], &[8, 9]), (&[5], &[8, 9, 10, 11])]);
        assert_eq!(b.target_in.row(0), &[BOS, 8, 9, PAD, PAD]);
        assert_eq!(b.target_out.row(0), &[8, 9, EOS, PAD, PAD]);
        assert_eq!(b.target_out.row(1), &[8, 9, 10, 11, EOS]);
        assert_eq!(b.source.row(1), &[5, PAD, PAD]);
        assert_eq!(b.mask.iter().sum::<f64>(), 8.0);
        assert_eq!(b.num_target_tokens(), 8);
    }

    #[test]
    fn length_filter_counts() {
        let corpus = ParallelCorpus::new(
            vec![vec![4], vec![4, 5, 6, 7, 8, 9], vec![], vec![4, 5], vec![4]],
            vec![vec![4, 5], vec![4], vec![4], vec![4, 5, 6, 7, 8, 9, 10], vec![4, 5, 6, 7]],
        )
        .unwrap();
        // pair 1: ratio 6; pair 2: empty source; pair 3: target too long; pair 4: ratio 4
        let s = batch_iter(&corpus, 2, 6, 0).unwrap();
        assert_eq!(s.dropped(), 4);
        assert_eq!(s.num_pairs(), 1);
        let empty = ParallelCorpus::new(vec![vec![]], vec![vec![4]]).unwrap();
        assert!(matches!(
            batch_iter(&empty, 2, 6, 0),
            Err(DataError::NoSurvivingPairs { dropped: 1 })
        ));
    }

    #[test]
    fn batch_stream_is_seeded() {
        let corpus = ParallelCorpus::new(
            (0..10).map(|i| vec![4 + i]).collect(),
            (0..10).map(|i| vec![4 + i, 5]).collect(),
        )
        .unwrap();
        let a: Vec<Batch> = batch_iter(&corpus, 3, 10, 7).unwrap().take(12).collect();
        let b: Vec<Batch> = batch_iter(&corpus, 3, 10, 7).unwrap().take(12).collect();
        let c: Vec<Batch> = batch_iter(&corpus, 3, 10, 8).unwrap().take(12).collect();
        assert_eq!(a, b);
        assert_ne!(a, c);
        // epochs reshuffle: the first batch of epoch 0 and epoch 1 differ in content order
        assert_ne!(a[0..4], a[4..8]);
        for batch in &a {
            for r in 0..batch.len() {
                let tin = batch.target_in.row(r);
                let tout = batch.target_out.row(r);
                let n = tout.iter().position(|&t| t == EOS).unwrap();
                assert_eq!(&tin[1..=n], &tout[..n]);
            }
        }
    }

    #[test]
    fn misaligned_corpus_rejected() {
        assert!(matches!(
            ParallelCorpus::new(vec![vec![4]], vec![]),
            Err(DataError::Misaligned { .. })
        ));
    }
}
