//! Single-threaded training loop: Adam with inverse square root warmup,
//! global gradient-norm clipping, periodic dev evaluation, best-dev-BLEU
//! checkpoint selection and patience-based early stopping.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{batch_iter, sequential_batches, Batch, DataError, ParallelCorpus, TokenId};
use crate::decode::{decode_all, DecodeError, SearchMode};
use crate::eval::{corpus_bleu, EvalError};
use crate::exec::Exec;
use crate::losses::{batch_loss, LossError, LossSpec, Reduction};
use crate::model::{bind_params, forward, init_params, Checkpoint, ModelConfig, ModelError, OptimizerState, Transformer};
use crate::tensor::{Tape, Tensor, TensorError};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.98;
pub const ADAM_EPS: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: u64, detail: String },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Peak learning rate, reached at the end of warmup.
    pub learning_rate: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub batch_size: usize,
    pub clip_norm: f64,
    pub eval_every: u64,
    /// Evaluations without dev improvement before stopping.
    pub patience: usize,
    /// Length filter for training pairs.
    pub max_len: usize,
    /// Dev sentences used for greedy BLEU (0 = all).
    pub dev_bleu_sentences: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            warmup_steps: 500,
            total_steps: 4000,
            batch_size: 32,
            clip_norm: 1.0,
            eval_every: 250,
            patience: 5,
            max_len: 60,
            dev_bleu_sentences: 200,
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.into()));
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if self.total_steps == 0 || self.batch_size == 0 || self.eval_every == 0 {
            return bad("total_steps, batch_size and eval_every must be positive");
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip_norm must be positive");
        }
        Ok(())
    }

    /// Linear warmup to the peak, then decay with `1/sqrt(step)`. Steps count from 1.
    pub fn learning_rate_at(&self, step: u64) -> f64 {
        let s = step.max(1) as f64;
        let w = self.warmup_steps as f64;
        if self.warmup_steps == 0 {
            return self.learning_rate;
        }
        self.learning_rate * (s / w).min((w / s).sqrt())
    }
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub learning_rate: f64,
    /// Mean training loss since the previous evaluation.
    pub train_loss: f64,
    pub dev_loss: f64,
    pub dev_bleu: f64,
    pub best: bool,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters at the best evaluation.
    pub best: Checkpoint,
    /// Parameters and optimizer state when training stopped.
    pub last: Checkpoint,
    pub log: Vec<LogRow>,
    pub stopped_early: bool,
    pub dropped_pairs: usize,
}

/// Adam step over every parameter with bias correction.
pub fn adam_update(
    params: &mut BTreeMap<String, Tensor>,
    grads: &BTreeMap<String, Tensor>,
    state: &mut OptimizerState,
    lr: f64,
) {
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    for (name, p) in params.iter_mut() {
        let Some(g) = grads.get(name) else { continue };
        let m = state.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.shape()));
        let v = state.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.shape()));
        for (((w, &gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut().iter_mut())
            .zip(v.data_mut().iter_mut())
        {
            *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * gi;
            *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * gi * gi;
            *w -= lr * (*mi / c1) / ((*vi / c2).sqrt() + ADAM_EPS);
        }
    }
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> f64 {
    let norm = grads
        .values()
        .flat_map(|g| g.data().iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

/// Loss and parameter gradients for one batch.
pub fn loss_and_grads(
    ckpt: &Checkpoint,
    batch: &Batch,
    dropout: Option<&mut ChaCha8Rng>,
) -> Result<(f64, BTreeMap<String, Tensor>)> {
    let mut tape = Tape::new();
    let params = bind_params(&mut tape, ckpt, true);
    let rate = ckpt.config.dropout_rate;
    let logits = forward(
        &mut tape,
        &ckpt.config,
        &params,
        &batch.source,
        &batch.target_in,
        dropout.map(|r| (rate, r)),
    )?;
    let loss = batch_loss(&mut tape, logits, &batch.target_out.data, &ckpt.loss, Reduction::BatchTokenMean)?;
    let value = tape.value(loss).item().expect("scalar loss");
    let g = tape.backward(loss).map_err(ModelError::from)?;
    let grads = params.iter().map(|(k, &v)| (k.clone(), g.wrt(v))).collect();
    Ok((value, grads))
}

/// Token-mean loss over a corpus without dropout.
pub fn corpus_loss(ckpt: &Checkpoint, corpus: &ParallelCorpus, batch_size: usize) -> Result<f64> {
    let (mut total, mut count) = (0.0, 0usize);
    for b in sequential_batches(corpus, batch_size) {
        let mut tape = Tape::new();
        let params = bind_params(&mut tape, ckpt, false);
        let logits = forward(&mut tape, &ckpt.config, &params, &b.source, &b.target_in, None)?;
        let loss = batch_loss(&mut tape, logits, &b.target_out.data, &ckpt.loss, Reduction::BatchTokenMean)?;
        let n = b.num_target_tokens();
        total += tape.value(loss).item().expect("scalar") * n as f64;
        count += n;
    }
    Ok(total / count.max(1) as f64)
}

/// Greedy BLEU on the first `limit` dev pairs (all when 0), on token ids.
pub fn greedy_bleu(ckpt: &Checkpoint, corpus: &ParallelCorpus, limit: usize, exec: Exec) -> Result<f64> {
    let n = if limit == 0 { corpus.len() } else { limit.min(corpus.len()) };
    let model = Transformer::new(ckpt)?;
    let out = decode_all(&model, ckpt.loss.head, &corpus.source[..n], SearchMode::Greedy, None, exec)?;
    let hyps: Vec<Vec<TokenId>> = out.iter().map(|r| r.words().to_vec()).collect();
    let refs: Vec<Vec<TokenId>> = corpus.target[..n].to_vec();
    Ok(corpus_bleu(&hyps, &refs)?.bleu)
}

fn finite_or_diverged(step: u64, v: f64, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(TrainError::Diverged {
            step,
            detail: format!("{what} is {v}"),
        })
    }
}

/// Trains from a fresh initialisation. `on_eval` sees every log row as it is
/// produced.
pub fn train(
    model: &ModelConfig,
    loss: LossSpec,
    cfg: &TrainConfig,
    train_data: &ParallelCorpus,
    dev: &ParallelCorpus,
    mut on_eval: impl FnMut(&LogRow),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    loss.validate()?;
    let mut ckpt = init_params(model, loss)?;
    let mut opt = OptimizerState {
        step: 0,
        m: BTreeMap::new(),
        v: BTreeMap::new(),
    };
    let mut stream = batch_iter(train_data, cfg.batch_size, cfg.max_len, cfg.seed)?;
    let dropped_pairs = stream.dropped();
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    dropout_rng.set_stream(1);
    let mut best: Option<(f64, f64, Checkpoint)> = None;
    let mut since_best = 0;
    let mut log = Vec::new();
    let (mut acc, mut acc_n) = (0.0, 0usize);
    let mut stopped_early = false;
    for step in 1..=cfg.total_steps {
        let batch = stream.next().expect("endless stream");
        let (l, mut grads) = match loss_and_grads(&ckpt, &batch, Some(&mut dropout_rng)) {
            Ok(x) => x,
            Err(TrainError::Model(ModelError::Tensor(TensorError::NonFinite(op))))
            | Err(TrainError::Loss(LossError::Tensor(TensorError::NonFinite(op)))) => {
                return Err(TrainError::Diverged {
                    step,
                    detail: format!("non-finite value in {op}"),
                })
            }
            Err(e) => return Err(e),
        };
        finite_or_diverged(step, l, "training loss")?;
        let norm = clip_global_norm(&mut grads, cfg.clip_norm);
        finite_or_diverged(step, norm, "gradient norm")?;
        let lr = cfg.learning_rate_at(step);
        adam_update(&mut ckpt.params, &grads, &mut opt, lr);
        ckpt.step = step;
        acc += l;
        acc_n += 1;
        if step % cfg.eval_every == 0 || step == cfg.total_steps {
            let dev_loss = finite_or_diverged(step, corpus_loss(&ckpt, dev, 64)?, "dev loss")?;
            let dev_bleu = greedy_bleu(&ckpt, dev, cfg.dev_bleu_sentences, Exec::Sequential)?;
            let better = match &best {
                None => true,
                Some((b, dl, _)) => dev_bleu > *b || (dev_bleu == *b && dev_loss < *dl),
            };
            if better {
                best = Some((dev_bleu, dev_loss, ckpt.clone()));
                since_best = 0;
            } else {
                since_best += 1;
            }
            let row = LogRow {
                step,
                learning_rate: lr,
                train_loss: acc / acc_n as f64,
                dev_loss,
                dev_bleu,
                best: better,
            };
            on_eval(&row);
            log.push(row);
            acc = 0.0;
            acc_n = 0;
            if cfg.patience > 0 && since_best >= cfg.patience {
                stopped_early = true;
                break;
            }
        }
    }
    let mut last = ckpt;
    last.optimizer = Some(opt);
    let best = best.map(|(_, _, c)| c).expect("at least one evaluation");
    Ok(TrainOutcome {
        best,
        last,
        log,
        stopped_early,
        dropped_pairs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_shape() {
        let c = TrainConfig {
            learning_rate: 1e-3,
            warmup_steps: 100,
            ..Default::default()
        };
        assert!((c.learning_rate_at(50) - 5e-4).abs() < 1e-15);
        assert!((c.learning_rate_at(100) - 1e-3).abs() < 1e-15);
        assert!((c.learning_rate_at(400) - 5e-4).abs() < 1e-15);
    }

    #[test]
    fn clipping_scales_to_the_limit() {
        let mut g = BTreeMap::new();
        g.insert("a".to_string(), Tensor::from_vec(vec![3.0]));
        g.insert("b".to_string(), Tensor::from_vec(vec![4.0]));
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g["a"].data()[0] - 0.6).abs() < 1e-15);
        assert!((g["b"].data()[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        // With bias correction the first update is lr * g / (|g| + eps).
        let mut p = BTreeMap::new();
        p.insert("w".to_string(), Tensor::from_vec(vec![1.0, 1.0]));
        let mut g = BTreeMap::new();
        g.insert("w".to_string(), Tensor::from_vec(vec![0.5, -2.0]));
        let mut st = OptimizerState {
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        };
        adam_update(&mut p, &g, &mut st, 0.1);
        assert!((p["w"].data()[0] - 0.9).abs() < 1e-9);
        assert!((p["w"].data()[1] - 1.1).abs() < 1e-9);
        assert_eq!(st.step, 1);
    }
}
