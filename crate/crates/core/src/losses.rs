//! Output-head losses and sequence scoring.
//!
//! Two heads share the same logits:
//!
//! * `softmax`: cross-entropy against a single normalised distribution.
//! * `scones`: one independent Bernoulli per vocabulary entry. The gold token's
//!   classifier is pushed towards `true` and every other token's classifier
//!   towards `false`, the latter weighted by `alpha`. Optional label smoothing
//!   `lambda` mixes in the opposite label.
//!
//! The `(1 - sigmoid)` probabilities are computed as `1 - exp(log_sigmoid)` and
//! clamped from below at `clamp_floor` before the log, so a saturated negative
//! classifier contributes `log(clamp_floor)` instead of `-inf`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{TokenId, PAD};
use crate::tensor::{log_sigmoid, Tape, TensorError, Var};

pub use crate::decode::sequence_logprob;

pub const DEFAULT_CLAMP_FLOOR: f64 = 1e-30;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("gold id {gold} outside vocabulary of size {vocab}")]
    InvalidGold { gold: usize, vocab: usize },
    #[error("every target position is PAD")]
    AllPad,
    #[error("invalid loss spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, LossError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Head {
    Softmax,
    Scones,
}

impl Head {
    /// Per-token log scores from raw logits: `log_softmax` or elementwise `log_sigmoid`.
    pub fn log_scores(self, logits: &[f64]) -> Vec<f64> {
        let mut out = logits.to_vec();
        match self {
            Head::Softmax => crate::tensor::log_softmax_in_place(&mut out),
            Head::Scones => out.iter_mut().for_each(|v| *v = log_sigmoid(*v)),
        }
        out
    }

    pub fn name(self) -> &'static str {
        match self {
            Head::Softmax => "softmax",
            Head::Scones => "scones",
        }
    }
}

impl std::str::FromStr for Head {
    type Err = LossError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softmax" => Ok(Head::Softmax),
            "scones" => Ok(Head::Scones),
            other => Err(LossError::InvalidSpec(format!("unknown head {other:?}"))),
        }
    }
}

impl std::fmt::Display for Head {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// How batch losses are normalised.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    /// Sum of token losses over the count of non-PAD tokens in the whole batch.
    #[default]
    BatchTokenMean,
    /// Mean over sentences of each sentence's per-token mean.
    SentenceMean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub head: Head,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub lambda: f64,
    #[serde(default = "default_clamp")]
    pub clamp_floor: f64,
}

fn default_alpha() -> f64 {
    1.0
}

fn default_clamp() -> f64 {
    DEFAULT_CLAMP_FLOOR
}

impl LossSpec {
    pub fn softmax() -> Self {
        Self {
            head: Head::Softmax,
            alpha: 1.0,
            lambda: 0.0,
            clamp_floor: DEFAULT_CLAMP_FLOOR,
        }
    }

    pub fn scones(alpha: f64) -> Self {
        Self {
            head: Head::Scones,
            alpha,
            lambda: 0.0,
            clamp_floor: DEFAULT_CLAMP_FLOOR,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(LossError::InvalidSpec(format!("alpha must be > 0, got {}", self.alpha)));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(LossError::InvalidSpec(format!("lambda must be in [0,1], got {}", self.lambda)));
        }
        if !(self.clamp_floor > 0.0) {
            return Err(LossError::InvalidSpec("clamp_floor must be > 0".into()));
        }
        if self.head == Head::Softmax && self.lambda != 0.0 {
            return Err(LossError::InvalidSpec("softmax head is trained without label smoothing".into()));
        }
        Ok(())
    }
}

/// Positive and negative terms of the sigmoid-head token loss, evaluated in
/// plain scalar arithmetic. Returns `(L+, L-)`; the token loss is `L+ + alpha * L-`.
pub fn scones_token_terms(logits: &[f64], gold: usize, lambda: f64, clamp_floor: f64) -> Result<(f64, f64)> {
    if gold >= logits.len() {
        return Err(LossError::InvalidGold {
            gold,
            vocab: logits.len(),
        });
    }
    let true_lp = |x: f64| log_sigmoid(x);
    let false_lp = |x: f64| (1.0 - log_sigmoid(x).exp()).max(clamp_floor).ln();
    let g = logits[gold];
    let pos = -(1.0 - lambda) * true_lp(g) - lambda * false_lp(g);
    let neg = logits
        .iter()
        .enumerate()
        .filter(|&(w, _)| w != gold)
        .map(|(_, &x)| -(1.0 - lambda) * false_lp(x) - lambda * true_lp(x))
        .sum();
    Ok((pos, neg))
}

pub fn scones_token_loss(logits: &[f64], gold: usize, alpha: f64, lambda: f64) -> Result<f64> {
    let (pos, neg) = scones_token_terms(logits, gold, lambda, DEFAULT_CLAMP_FLOOR)?;
    Ok(pos + alpha * neg)
}

fn check_targets(tape: &Tape, logits: Var, targets: &[TokenId]) -> Result<(usize, Vec<usize>)> {
    let shape = tape.shape(logits);
    let v = *shape.last().unwrap_or(&0);
    let rows = tape.value(logits).numel() / v.max(1);
    if shape.len() < 2 || targets.len() != rows {
        return Err(TensorError::ShapeMismatch {
            op: "loss targets",
            lhs: shape.to_vec(),
            rhs: vec![targets.len()],
        }
        .into());
    }
    if let Some(&bad) = targets.iter().find(|&&t| t as usize >= v) {
        return Err(LossError::InvalidGold {
            gold: bad as usize,
            vocab: v,
        });
    }
    if targets.iter().all(|&t| t == PAD) {
        return Err(LossError::AllPad);
    }
    Ok((v, targets.iter().map(|&t| t as usize).collect()))
}

/// Reduces per-token losses `[.., T]` (already shaped like `targets`) with the PAD mask.
fn reduce(tape: &mut Tape, token_losses: Var, targets: &[TokenId], seq_len: usize, reduction: Reduction) -> Result<Var> {
    let shape = tape.shape(token_losses).to_vec();
    let weights: Vec<f64> = match reduction {
        Reduction::BatchTokenMean => {
            let count = targets.iter().filter(|&&t| t != PAD).count() as f64;
            targets.iter().map(|&t| if t == PAD { 0.0 } else { 1.0 / count }).collect()
        }
        Reduction::SentenceMean => {
            let rows: Vec<&[TokenId]> = targets.chunks(seq_len).collect();
            let live = rows.iter().filter(|r| r.iter().any(|&t| t != PAD)).count() as f64;
            rows.iter()
                .flat_map(|r| {
                    let n = r.iter().filter(|&&t| t != PAD).count() as f64;
                    r.iter().map(move |&t| if t == PAD { 0.0 } else { 1.0 / (n * live) })
                })
                .collect()
        }
    };
    let w = tape.constant(crate::tensor::Tensor::new(shape, weights)?);
    let weighted = tape.mul(token_losses, w)?;
    Ok(tape.sum_all(weighted)?)
}

/// Sigmoid-head batch loss on the tape. `logits` is `[B, T, V]`, `targets`
/// the row-major `[B, T]` gold ids (PAD = 0 is masked).
pub fn scones_batch_loss(
    tape: &mut Tape,
    logits: Var,
    targets: &[TokenId],
    spec: &LossSpec,
    reduction: Reduction,
) -> Result<Var> {
    let (_, idx) = check_targets(tape, logits, targets)?;
    let seq_len = tape.shape(logits)[tape.shape(logits).len() - 2];
    let (a, l) = (spec.alpha, spec.lambda);

    let true_lp = tape.log_sigmoid(logits)?;
    let p = tape.exp(true_lp)?;
    let q = tape.neg(p)?;
    let q = tape.add_scalar(q, 1.0)?;
    let q = tape.clamp_min(q, spec.clamp_floor)?;
    let false_lp = tape.log(q)?;

    let tgt_true = tape.gather_last(true_lp, &idx)?;
    let tgt_false = tape.gather_last(false_lp, &idx)?;

    // -(1-l) * first - l * second
    let xent = |tape: &mut Tape, first: Var, second: Var| -> Result<Var> {
        let x = tape.scale(first, -(1.0 - l))?;
        if l == 0.0 {
            return Ok(x);
        }
        let y = tape.scale(second, -l)?;
        Ok(tape.add(x, y)?)
    };
    let tgt_true_xent = xent(tape, tgt_true, tgt_false)?;
    let tgt_false_xent = xent(tape, tgt_false, tgt_true)?;
    let all_false_xent = xent(tape, false_lp, true_lp)?;
    let all_false = tape.sum_last(all_false_xent)?;
    let neg = tape.sub(all_false, tgt_false_xent)?;
    let neg = tape.scale(neg, a)?;
    let per_token = tape.add(neg, tgt_true_xent)?;
    reduce(tape, per_token, targets, seq_len, reduction)
}

/// Softmax cross-entropy batch loss on the tape, masked by PAD.
pub fn softmax_xent_batch_loss(tape: &mut Tape, logits: Var, targets: &[TokenId], reduction: Reduction) -> Result<Var> {
    let (_, idx) = check_targets(tape, logits, targets)?;
    let rank = tape.shape(logits).len();
    let seq_len = tape.shape(logits)[rank - 2];
    let lp = tape.log_softmax(logits, rank - 1)?;
    let gold = tape.gather_last(lp, &idx)?;
    let nll = tape.neg(gold)?;
    reduce(tape, nll, targets, seq_len, reduction)
}

/// Dispatches on the head of `spec`.
pub fn batch_loss(tape: &mut Tape, logits: Var, targets: &[TokenId], spec: &LossSpec, reduction: Reduction) -> Result<Var> {
    match spec.head {
        Head::Softmax => softmax_xent_batch_loss(tape, logits, targets, reduction),
        Head::Scones => scones_batch_loss(tape, logits, targets, spec, reduction),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_diff_grad, sigmoid, Tensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    // Binary cross-entropy of each vocabulary entry against the one-hot target,
    // written directly from sigmoid probabilities.
    fn one_hot_bce(logits: &[f64], gold: usize) -> f64 {
        logits
            .iter()
            .enumerate()
            .map(|(w, &x)| {
                let p = 1.0 / (1.0 + (-x).exp());
                if w == gold {
                    -p.ln()
                } else {
                    -(1.0 - p).ln()
                }
            })
            .sum()
    }

    fn batch_value(logits: &Tensor, targets: &[TokenId], spec: &LossSpec, reduction: Reduction) -> f64 {
        let mut tape = Tape::new();
        let v = tape.constant(logits.clone());
        let l = batch_loss(&mut tape, v, targets, spec, reduction).unwrap();
        tape.value(l).item().unwrap()
    }

    #[test]
    fn token_loss_symmetric_point() {
        for lambda in [0.0, 0.1, 0.5, 1.0] {
            let l = scones_token_loss(&[0.0, 0.0], 0, 1.0, lambda).unwrap();
            assert!((l - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
        }
    }

    #[test]
    fn token_loss_hand_value() {
        // -log σ(2) = 0.126928; -log(1-σ(-1)) = 0.313262; -log(1-σ(0)) = 0.693147
        let l = scones_token_loss(&[2.0, -1.0, 0.0], 0, 0.5, 0.0).unwrap();
        assert!((l - 0.630133).abs() < 1e-5, "{l}");
    }

    #[test]
    fn token_loss_equals_one_hot_bce() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let v = rng.gen_range(2..12);
            let logits: Vec<f64> = (0..v).map(|_| rng.gen_range(-6.0..6.0)).collect();
            let gold = rng.gen_range(0..v);
            let l = scones_token_loss(&logits, gold, 1.0, 0.0).unwrap();
            assert!((l - one_hot_bce(&logits, gold)).abs() < 1e-9);
        }
        assert!(matches!(
            scones_token_loss(&[0.0; 3], 3, 1.0, 0.0),
            Err(LossError::InvalidGold { gold: 3, vocab: 3 })
        ));
    }

    #[test]
    fn unsmoothed_terms_match_plain_formulas() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        for _ in 0..100 {
            let logits: Vec<f64> = (0..9).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let gold = rng.gen_range(0..9);
            let (pos, neg) = scones_token_terms(&logits, gold, 0.0, DEFAULT_CLAMP_FLOOR).unwrap();
            let plain_pos = -log_sigmoid(logits[gold]);
            let plain_neg: f64 = (0..9).filter(|&w| w != gold).map(|w| -log_sigmoid(-logits[w])).sum();
            assert!((pos - plain_pos).abs() < 1e-12);
            assert!((neg - plain_neg).abs() < 1e-12);
        }
    }

    #[test]
    fn negative_term_is_linear_in_alpha() {
        let logits = [0.3, -1.2, 2.5, 0.0];
        let (pos, neg) = scones_token_terms(&logits, 2, 0.0, DEFAULT_CLAMP_FLOOR).unwrap();
        for alpha in [0.2, 0.5, 1.0, 3.0] {
            let l = scones_token_loss(&logits, 2, alpha, 0.0).unwrap();
            assert_eq!(l, pos + alpha * neg);
        }
    }

    #[test]
    fn clamp_keeps_saturated_negative_finite() {
        let (_, neg) = scones_token_terms(&[0.0, 100.0], 0, 0.0, DEFAULT_CLAMP_FLOOR).unwrap();
        assert_eq!(neg, -(1e-30f64).ln());
        let mut tape = Tape::new();
        let v = tape.leaf(Tensor::new(vec![1, 1, 2], vec![0.0, 100.0]).unwrap());
        let l = scones_batch_loss(&mut tape, v, &[1], &LossSpec::scones(1.0), Reduction::BatchTokenMean).unwrap();
        assert!(tape.value(l).item().unwrap().is_finite());
        assert!(tape.backward(l).unwrap().wrt(v).is_finite());
    }

    #[test]
    fn batch_matches_token_mean_and_ignores_padding() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let v = 6;
        let logits: Vec<f64> = (0..3 * v).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let targets = [4u32, 1, 5];
        let spec = LossSpec {
            lambda: 0.1,
            ..LossSpec::scones(0.7)
        };
        let expected: f64 = (0..3)
            .map(|t| scones_token_loss(&logits[t * v..(t + 1) * v], targets[t] as usize, 0.7, 0.1).unwrap())
            .sum::<f64>()
            / 3.0;
        let t = Tensor::new(vec![1, 3, v], logits.clone()).unwrap();
        let got = batch_value(&t, &targets, &spec, Reduction::BatchTokenMean);
        assert!((got - expected).abs() < 1e-12);

        let mut padded = logits.clone();
        padded.extend((0..2 * v).map(|_| rng.gen_range(-3.0..3.0)));
        let t = Tensor::new(vec![1, 5, v], padded).unwrap();
        let got_pad = batch_value(&t, &[4, 1, 5, 0, 0], &spec, Reduction::BatchTokenMean);
        assert!((got_pad - expected).abs() < 1e-12);

        let mut twice = logits.clone();
        twice.extend(&logits);
        let t = Tensor::new(vec![2, 3, v], twice).unwrap();
        let got2 = batch_value(&t, &[4, 1, 5, 4, 1, 5], &spec, Reduction::BatchTokenMean);
        assert!((got2 - expected).abs() < 1e-12);
    }

    #[test]
    fn reductions_differ_on_ragged_batches() {
        let logits = Tensor::new(vec![2, 3, 4], (0..24).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let targets = [1u32, 0, 0, 2, 3, 1];
        let spec = LossSpec::softmax();
        let per_token: Vec<f64> = (0..6)
            .map(|r| {
                let row = &logits.data()[r * 4..(r + 1) * 4];
                let mut lp = row.to_vec();
                crate::tensor::log_softmax_in_place(&mut lp);
                -lp[targets[r] as usize]
            })
            .collect();
        let tok = (per_token[0] + per_token[3] + per_token[4] + per_token[5]) / 4.0;
        let sent = (per_token[0] + (per_token[3] + per_token[4] + per_token[5]) / 3.0) / 2.0;
        assert!((batch_value(&logits, &targets, &spec, Reduction::BatchTokenMean) - tok).abs() < 1e-12);
        assert!((batch_value(&logits, &targets, &spec, Reduction::SentenceMean) - sent).abs() < 1e-12);
    }

    #[test]
    fn softmax_reference_values() {
        let uniform = Tensor::zeros(&[1, 2, 4]);
        let l = batch_value(&uniform, &[2, 3], &LossSpec::softmax(), Reduction::BatchTokenMean);
        assert!((l - 4f64.ln()).abs() < 1e-12);
        let mut sat = vec![0.0; 4];
        sat[1] = 1e6;
        let t = Tensor::new(vec![1, 1, 4], sat).unwrap();
        assert!(batch_value(&t, &[1], &LossSpec::softmax(), Reduction::BatchTokenMean).abs() < 1e-12);
        let mut tape = Tape::new();
        let v = tape.constant(Tensor::zeros(&[1, 2, 4]));
        let all_pad = batch_loss(&mut tape, v, &[0, 0], &LossSpec::softmax(), Reduction::BatchTokenMean);
        assert_eq!(all_pad.unwrap_err(), LossError::AllPad);
    }

    // d/dx of the gold terms is sigmoid(x) - (1 - lambda) and of each other
    // token alpha * (sigmoid(x) - lambda); so with lambda = 0 the signs are
    // fixed, and with lambda > 0 they flip only past the smoothing targets.
    #[test]
    fn gradient_signs_for_small_lambda() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for case in 0..40 {
            let logits: Vec<f64> = (0..5).map(|_| rng.gen_range(-4.0..4.0)).collect();
            let lambda = if case % 2 == 0 { 0.0 } else { rng.gen_range(0.0..0.49) };
            let alpha = rng.gen_range(0.1..2.0);
            let gold = rng.gen_range(1..5);
            let x = Tensor::new(vec![1, 1, 5], logits.clone()).unwrap();
            let spec = LossSpec { lambda, ..LossSpec::scones(alpha) };
            let mut tape = Tape::new();
            let v = tape.leaf(x);
            let l = scones_batch_loss(&mut tape, v, &[gold as u32], &spec, Reduction::BatchTokenMean).unwrap();
            let g = tape.backward(l).unwrap().wrt(v);
            for (w, &gv) in g.data().iter().enumerate() {
                let s = sigmoid(logits[w]);
                let expected = if w == gold { s - (1.0 - lambda) } else { alpha * (s - lambda) };
                assert!((gv - expected).abs() < 1e-9, "{gv} vs {expected}");
                if lambda == 0.0 {
                    assert!(if w == gold { gv < 0.0 } else { gv > 0.0 });
                }
            }
        }
    }

    #[test]
    fn batch_loss_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for case in 0..8 {
            let x = Tensor::new(vec![2, 3, 7], (0..42).map(|_| rng.gen_range(-3.0..3.0)).collect()).unwrap();
            let targets: Vec<TokenId> = (0..6).map(|i| if i == 5 { 0 } else { rng.gen_range(1..7) }).collect();
            let spec = match case % 3 {
                0 => LossSpec::softmax(),
                1 => LossSpec::scones(0.2),
                _ => LossSpec {
                    lambda: 0.1,
                    ..LossSpec::scones(1.0)
                },
            };
            let mut tape = Tape::new();
            let v = tape.leaf(x.clone());
            let l = batch_loss(&mut tape, v, &targets, &spec, Reduction::BatchTokenMean).unwrap();
            let g = tape.backward(l).unwrap().wrt(v);
            let fd = finite_diff_grad(|p| Ok(batch_value(p, &targets, &spec, Reduction::BatchTokenMean)), &x, 1e-5)
                .unwrap();
            for (a, b) in g.data().iter().zip(fd.data()) {
                assert!((a - b).abs() / a.abs().max(b.abs()).max(1e-6) < 1e-4, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn spec_validation() {
        assert!(LossSpec::scones(0.0).validate().is_err());
        assert!(LossSpec {
            lambda: 1.5,
            ..LossSpec::scones(1.0)
        }
        .validate()
        .is_err());
        assert!(LossSpec {
            lambda: 0.1,
            ..LossSpec::softmax()
        }
        .validate()
        .is_err());
        assert!(LossSpec::scones(0.2).validate().is_ok());
    }
}
