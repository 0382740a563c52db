//! Corpus BLEU, length ratio, score statistics and paired bootstrap.
//!
//! BLEU here is plain corpus-level BLEU-4 on whitespace tokens with no
//! smoothing:
//!
//! ```text
//! p_n  = sum of clipped n-gram matches / sum of hypothesis n-grams
//! BP   = 1 if c > r else exp(1 - r / c)      (0 when c = 0)
//! BLEU = 100 * BP * exp(mean(log p_n))       (0 if any p_n = 0)
//! ```

use std::collections::HashMap;
use std::hash::Hash;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::exec::{map_indexed, Exec};

pub const MAX_ORDER: usize = 4;
pub const DEFAULT_RESAMPLES: usize = 1000;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("{0} hypotheses but {1} references")]
    Misaligned(usize, usize),
    #[error("reference {0} is empty")]
    EmptyReference(usize),
    #[error("empty input")]
    Empty,
    #[error("references contain no tokens")]
    ZeroReferenceLength,
    #[error("need at least 100 bootstrap resamples, got {0}")]
    TooFewResamples(usize),
}

pub type Result<T> = std::result::Result<T, EvalError>;

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// 0 to 100.
    pub bleu: f64,
    pub precisions: [f64; MAX_ORDER],
    pub brevity_penalty: f64,
    pub length_ratio: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
}

/// Sufficient statistics of one sentence pair.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SentenceStats {
    pub matches: [usize; MAX_ORDER],
    pub totals: [usize; MAX_ORDER],
    pub hyp_len: usize,
    pub ref_len: usize,
}

impl std::ops::AddAssign for SentenceStats {
    fn add_assign(&mut self, o: Self) {
        for n in 0..MAX_ORDER {
            self.matches[n] += o.matches[n];
            self.totals[n] += o.totals[n];
        }
        self.hyp_len += o.hyp_len;
        self.ref_len += o.ref_len;
    }
}

fn ngram_counts<W: Hash + Eq>(words: &[W], n: usize) -> HashMap<&[W], usize> {
    let mut m = HashMap::new();
    for g in words.windows(n) {
        *m.entry(g).or_insert(0) += 1;
    }
    m
}

pub fn sentence_stats<W: Hash + Eq>(hyp: &[W], reference: &[W]) -> SentenceStats {
    let mut s = SentenceStats {
        hyp_len: hyp.len(),
        ref_len: reference.len(),
        ..Default::default()
    };
    for n in 1..=MAX_ORDER {
        let h = ngram_counts(hyp, n);
        let r = ngram_counts(reference, n);
        s.totals[n - 1] = hyp.len().saturating_sub(n - 1);
        s.matches[n - 1] = h.iter().map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0))).sum();
    }
    s
}

impl SentenceStats {
    pub fn report(&self) -> EvalReport {
        let mut precisions = [0.0; MAX_ORDER];
        for n in 0..MAX_ORDER {
            precisions[n] = if self.totals[n] == 0 {
                0.0
            } else {
                self.matches[n] as f64 / self.totals[n] as f64
            };
        }
        let (c, r) = (self.hyp_len as f64, self.ref_len as f64);
        let brevity_penalty = if c > r {
            1.0
        } else if c == 0.0 {
            0.0
        } else {
            (1.0 - r / c).exp()
        };
        let bleu = if precisions.iter().any(|&p| p == 0.0) {
            0.0
        } else {
            100.0 * brevity_penalty * (precisions.iter().map(|p| p.ln()).sum::<f64>() / MAX_ORDER as f64).exp()
        };
        EvalReport {
            bleu,
            precisions,
            brevity_penalty,
            length_ratio: if r > 0.0 { c / r } else { 0.0 },
            hyp_len: self.hyp_len,
            ref_len: self.ref_len,
        }
    }
}

fn all_stats<W: Hash + Eq>(hyps: &[Vec<W>], refs: &[Vec<W>]) -> Result<Vec<SentenceStats>> {
    if hyps.len() != refs.len() {
        return Err(EvalError::Misaligned(hyps.len(), refs.len()));
    }
    if hyps.is_empty() {
        return Err(EvalError::Empty);
    }
    if let Some(i) = refs.iter().position(Vec::is_empty) {
        return Err(EvalError::EmptyReference(i));
    }
    Ok(hyps.iter().zip(refs).map(|(h, r)| sentence_stats(h, r)).collect())
}

pub fn corpus_bleu<W: Hash + Eq>(hyps: &[Vec<W>], refs: &[Vec<W>]) -> Result<EvalReport> {
    let mut total = SentenceStats::default();
    for s in all_stats(hyps, refs)? {
        total += s;
    }
    Ok(total.report())
}

/// Splits every line on whitespace.
pub fn tokenize(lines: &[String]) -> Vec<Vec<&str>> {
    lines.iter().map(|l| l.split_whitespace().collect()).collect()
}

/// Total hypothesis tokens over total reference tokens.
pub fn length_ratio<W>(hyps: &[Vec<W>], refs: &[Vec<W>]) -> Result<f64> {
    if hyps.len() != refs.len() {
        return Err(EvalError::Misaligned(hyps.len(), refs.len()));
    }
    let r: usize = refs.iter().map(Vec::len).sum();
    if r == 0 {
        return Err(EvalError::ZeroReferenceLength);
    }
    Ok(hyps.iter().map(Vec::len).sum::<usize>() as f64 / r as f64)
}

/// Mean and population standard deviation.
pub fn logprob_stats(scores: &[f64]) -> Result<(f64, f64)> {
    if scores.is_empty() {
        return Err(EvalError::Empty);
    }
    let n = scores.len() as f64;
    let mean = scores.iter().sum::<f64>() / n;
    let var = scores.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / n;
    Ok((mean, var.sqrt()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BootstrapResult {
    /// Fraction of resamples with `BLEU_A <= BLEU_B`.
    pub p_value: f64,
    /// Fraction of resamples with `BLEU_A > BLEU_B`.
    pub win_rate_a: f64,
    pub bleu_a: f64,
    pub bleu_b: f64,
}

/// Sentence indices drawn for resample `k`: stream `k` of a ChaCha8 generator
/// seeded with `seed`.
pub fn resample_indices(n: usize, seed: u64, k: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(k as u64);
    (0..n).map(|_| rng.gen_range(0..n)).collect()
}

/// Paired bootstrap over sentences. Resamples are independent and seeded by
/// index, so the parallel and sequential paths agree exactly.
pub fn paired_bootstrap<W: Hash + Eq + Sync>(
    hyps_a: &[Vec<W>],
    hyps_b: &[Vec<W>],
    refs: &[Vec<W>],
    n_resamples: usize,
    seed: u64,
    exec: Exec,
) -> Result<BootstrapResult> {
    if n_resamples < 100 {
        return Err(EvalError::TooFewResamples(n_resamples));
    }
    if hyps_b.len() != refs.len() {
        return Err(EvalError::Misaligned(hyps_b.len(), refs.len()));
    }
    let sa = all_stats(hyps_a, refs)?;
    let sb = all_stats(hyps_b, refs)?;
    let n = refs.len();
    let wins = map_indexed(exec, n_resamples, |k| {
        let (mut ta, mut tb) = (SentenceStats::default(), SentenceStats::default());
        for i in resample_indices(n, seed, k) {
            ta += sa[i];
            tb += sb[i];
        }
        ta.report().bleu > tb.report().bleu
    });
    let a_wins = wins.iter().filter(|&&w| w).count();
    let sum = |s: &[SentenceStats]| {
        let mut t = SentenceStats::default();
        s.iter().for_each(|x| t += *x);
        t.report().bleu
    };
    Ok(BootstrapResult {
        p_value: (n_resamples - a_wins) as f64 / n_resamples as f64,
        win_rate_a: a_wins as f64 / n_resamples as f64,
        bleu_a: sum(&sa),
        bleu_b: sum(&sb),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(lines: &[&str]) -> Vec<Vec<String>> {
        lines.iter().map(|l| l.split_whitespace().map(String::from).collect()).collect()
    }

    #[test]
    fn hand_example() {
        let r = corpus_bleu(&toks(&["a b c d"]), &toks(&["a b c d e"])).unwrap();
        assert_eq!(r.precisions, [1.0; 4]);
        assert!((r.brevity_penalty - (-0.25f64).exp()).abs() < 1e-15);
        assert!((r.bleu - 77.8800783).abs() < 1e-6);
    }

    #[test]
    fn identity_and_zero() {
        let c = toks(&["the cat sat on the mat", "a b c d e f"]);
        let r = corpus_bleu(&c, &c).unwrap();
        assert_eq!(r.bleu, 100.0);
        assert_eq!(r.brevity_penalty, 1.0);
        let r = corpus_bleu(&toks(&["x y z w"]), &toks(&["a b c d"])).unwrap();
        assert_eq!(r.bleu, 0.0);
    }

    #[test]
    fn clipping_counts() {
        // "the the the" vs "the cat": unigram matches clipped to 1 of 3.
        let s = sentence_stats(&["the", "the", "the"], &["the", "cat"]);
        assert_eq!(s.matches[0], 1);
        assert_eq!(s.totals, [3, 2, 1, 0]);
    }

    #[test]
    fn errors() {
        assert_eq!(corpus_bleu(&toks(&["a"]), &toks(&["a", "b"])).unwrap_err(), EvalError::Misaligned(1, 2));
        assert_eq!(corpus_bleu(&toks(&["a"]), &toks(&[""])).unwrap_err(), EvalError::EmptyReference(0));
        assert!(logprob_stats(&[]).is_err());
        assert!(length_ratio(&toks(&["a"]), &toks(&[""])).is_err());
    }

    #[test]
    fn length_ratio_and_stats() {
        let h = toks(&["a b c", "d e f g"]);
        let r = toks(&["a b c d e", "f g h i j"]);
        assert!((length_ratio(&h, &r).unwrap() - 0.7).abs() < 1e-15);
        assert_eq!(length_ratio(&toks(&["", ""]), &r).unwrap(), 0.0);
        assert_eq!(logprob_stats(&[-1.0, -1.0]).unwrap(), (-1.0, 0.0));
        assert_eq!(logprob_stats(&[0.0, -2.0]).unwrap(), (-1.0, 1.0));
    }

    #[test]
    fn bootstrap_degenerate_cases() {
        let refs = toks(&[
            "a b c d e", "f g h i j", "k l m n o", "p q r s t", "u v w x y",
            "a c e g i", "b d f h j", "k m o q s", "l n p r t", "u w y a c",
        ]);
        let same = paired_bootstrap(&refs, &refs, &refs, 200, 1, Exec::Sequential).unwrap();
        assert_eq!(same.p_value, 1.0);
        assert_eq!(same.win_rate_a, 0.0);
        let empty = vec![Vec::<String>::new(); 10];
        let dom = paired_bootstrap(&refs, &empty, &refs, 200, 1, Exec::Parallel).unwrap();
        assert_eq!(dom.p_value, 0.0);
        assert!(paired_bootstrap(&refs, &refs, &refs, 99, 1, Exec::Sequential).is_err());
    }
}
