//! Teacher-forced forward pass recorded on a [`Tape`].

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{positional_encoding, Checkpoint, ModelConfig, ModelError, Result, LAYER_NORM_EPS};
use crate::data::{IdMatrix, PAD};
use crate::tensor::{Tape, Tensor, Var};

/// Checkpoint parameters bound to tape variables.
#[derive(Debug, Clone)]
pub struct ParamVars {
    vars: BTreeMap<String, Var>,
}

impl ParamVars {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

/// Puts every parameter on the tape, as leaves when `trainable`, else as constants.
pub fn bind_params(tape: &mut Tape, ckpt: &Checkpoint, trainable: bool) -> ParamVars {
    let vars = ckpt
        .params
        .iter()
        .map(|(k, t)| {
            let v = if trainable {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            };
            (k.clone(), v)
        })
        .collect();
    ParamVars { vars }
}

fn check_ids(m: &IdMatrix, vocab: usize, max: usize) -> Result<()> {
    if m.cols > max {
        return Err(ModelError::TooLong { len: m.cols, max });
    }
    if let Some(&id) = m.data.iter().find(|&&id| id as usize >= vocab) {
        return Err(ModelError::TokenOutOfRange { id, vocab });
    }
    Ok(())
}

struct Ctx<'a, 'r> {
    tape: &'a mut Tape,
    p: &'a ParamVars,
    cfg: &'a ModelConfig,
    dropout: Option<(f64, &'r mut ChaCha8Rng)>,
}

impl Ctx<'_, '_> {
    fn linear(&mut self, x: Var, prefix: &str, w: &str, b: &str) -> Result<Var> {
        let wv = self.p.get(&format!("{prefix}.{w}"))?;
        let bv = self.p.get(&format!("{prefix}.{b}"))?;
        let y = self.tape.matmul(x, wv)?;
        Ok(self.tape.add(y, bv)?)
    }

    fn layer_norm(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let g = self.p.get(&format!("{prefix}.gain"))?;
        let b = self.p.get(&format!("{prefix}.bias"))?;
        Ok(self.tape.layer_norm(x, g, b, LAYER_NORM_EPS)?)
    }

    fn dropout(&mut self, x: Var) -> Result<Var> {
        let Some((rate, rng)) = self.dropout.as_mut() else {
            return Ok(x);
        };
        if *rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - *rate;
        let shape = self.tape.shape(x).to_vec();
        let n = shape.iter().product();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let m = self.tape.constant(Tensor::new(shape, mask)?);
        Ok(self.tape.mul(x, m)?)
    }

    fn embed(&mut self, table: &str, ids: &IdMatrix) -> Result<Var> {
        let d = self.cfg.d_model;
        let t = self.p.get(table)?;
        let idx: Vec<usize> = ids.data.iter().map(|&i| i as usize).collect();
        let e = self.tape.embedding(t, &idx)?;
        let e = self.tape.scale(e, (d as f64).sqrt())?;
        let e = self.tape.reshape(e, &[ids.rows, ids.cols, d])?;
        let pe = self
            .tape
            .constant(Tensor::new(vec![ids.cols, d], positional_encoding(ids.cols, d))?);
        let e = self.tape.add(e, pe)?;
        self.dropout(e)
    }

    /// Multi-head attention of `q_in` `[B, Tq, d]` over `kv_in` `[B, Tk, d]`.
    fn attention(&mut self, q_in: Var, kv_in: Var, prefix: &str, keep: &[bool]) -> Result<Var> {
        let (h, dh, d) = (self.cfg.num_heads, self.cfg.head_dim(), self.cfg.d_model);
        let (b, tq) = (self.tape.shape(q_in)[0], self.tape.shape(q_in)[1]);
        let tk = self.tape.shape(kv_in)[1];
        let split = |ctx: &mut Self, x: Var, t: usize| -> Result<Var> {
            let x = ctx.tape.reshape(x, &[b, t, h, dh])?;
            Ok(ctx.tape.permute_0213(x)?)
        };
        let q = self.linear(q_in, prefix, "wq", "bq")?;
        let q = split(self, q, tq)?;
        let k = self.linear(kv_in, prefix, "wk", "bk")?;
        let k = split(self, k, tk)?;
        let v = self.linear(kv_in, prefix, "wv", "bv")?;
        let v = split(self, v, tk)?;
        let kt = self.tape.transpose_last2(k)?;
        let scores = self.tape.matmul(q, kt)?;
        let scores = self.tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
        let probs = self.tape.masked_softmax(scores, keep)?;
        let ctx = self.tape.matmul(probs, v)?;
        let ctx = self.tape.permute_0213(ctx)?;
        let ctx = self.tape.reshape(ctx, &[b, tq, d])?;
        self.linear(ctx, prefix, "wo", "bo")
    }

    fn feed_forward(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let hdn = self.linear(x, prefix, "w1", "b1")?;
        let hdn = self.tape.relu(hdn)?;
        self.linear(hdn, prefix, "w2", "b2")
    }

    fn residual(&mut self, x: Var, y: Var) -> Result<Var> {
        let y = self.dropout(y)?;
        Ok(self.tape.add(x, y)?)
    }
}

/// Records the teacher-forced forward pass and returns logits `[B, T, V]`.
///
/// Pre-norm residual blocks; the source PAD positions are masked out of all
/// attention and decoder self-attention is causal. Dropout is applied only
/// when `dropout` is given.
pub fn forward(
    tape: &mut Tape,
    config: &ModelConfig,
    params: &ParamVars,
    source: &IdMatrix,
    target_in: &IdMatrix,
    dropout: Option<(f64, &mut ChaCha8Rng)>,
) -> Result<Var> {
    check_ids(source, config.source_vocab_size, config.max_positions)?;
    check_ids(target_in, config.target_vocab_size, config.max_positions)?;
    if source.rows != target_in.rows {
        return Err(ModelError::Format(format!(
            "batch sizes differ: {} source rows, {} target rows",
            source.rows, target_in.rows
        )));
    }
    let (b, s, t) = (source.rows, source.cols, target_in.cols);
    let src_keep = |q: usize| -> Vec<bool> {
        (0..b)
            .flat_map(|bi| (0..q).flat_map(move |_| (0..s).map(move |k| source.data[bi * s + k] != PAD)))
            .collect()
    };
    let enc_keep = src_keep(s);
    let cross_keep = src_keep(t);
    let causal: Vec<bool> = (0..b)
        .flat_map(|_| (0..t).flat_map(move |q| (0..t).map(move |k| k <= q)))
        .collect();

    let mut c = Ctx {
        tape,
        p: params,
        cfg: config,
        dropout,
    };
    let mut x = c.embed("src_embed", source)?;
    for l in 0..config.num_layers {
        let hdn = c.layer_norm(x, &format!("enc.{l}.ln1"))?;
        let a = c.attention(hdn, hdn, &format!("enc.{l}.self_attn"), &enc_keep)?;
        x = c.residual(x, a)?;
        let hdn = c.layer_norm(x, &format!("enc.{l}.ln2"))?;
        let f = c.feed_forward(hdn, &format!("enc.{l}.ff"))?;
        x = c.residual(x, f)?;
    }
    let memory = c.layer_norm(x, "enc.ln_f")?;

    let mut y = c.embed("tgt_embed", target_in)?;
    for l in 0..config.num_layers {
        let hdn = c.layer_norm(y, &format!("dec.{l}.ln1"))?;
        let a = c.attention(hdn, hdn, &format!("dec.{l}.self_attn"), &causal)?;
        y = c.residual(y, a)?;
        let hdn = c.layer_norm(y, &format!("dec.{l}.ln2"))?;
        let a = c.attention(hdn, memory, &format!("dec.{l}.cross_attn"), &cross_keep)?;
        y = c.residual(y, a)?;
        let hdn = c.layer_norm(y, &format!("dec.{l}.ln3"))?;
        let f = c.feed_forward(hdn, &format!("dec.{l}.ff"))?;
        y = c.residual(y, f)?;
    }
    let y = c.layer_norm(y, "dec.ln_f")?;
    let w_out = if config.tie_output_embedding {
        let e = c.p.get("tgt_embed")?;
        c.tape.transpose_last2(e)?
    } else {
        c.p.get("out.w")?
    };
    let logits = c.tape.matmul(y, w_out)?;
    let bias = c.p.get("out.b")?;
    Ok(c.tape.add(logits, bias)?)
}

/// Dropout-free logits `[B, T, V]` for a batch, computed on a throwaway tape.
pub fn forward_teacher_forced(ckpt: &Checkpoint, source: &IdMatrix, target_in: &IdMatrix) -> Result<Tensor> {
    let mut tape = Tape::new();
    let params = bind_params(&mut tape, ckpt, false);
    let logits = forward(&mut tape, &ckpt.config, &params, source, target_in, None)?;
    Ok(tape.value(logits).clone())
}
