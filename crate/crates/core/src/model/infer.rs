//! Incremental inference with key/value caching.
//!
//! This path shares no code with the tape forward beyond the matrix kernels,
//! so the two act as independent checks on each other.

use std::sync::Arc;

use super::{positional_encoding, Checkpoint, StepModel, ModelConfig, ModelError, Result, LAYER_NORM_EPS};
use crate::data::{TokenId, BOS, PAD};
use crate::tensor::kernels::{gemm, layer_norm_row, vec_mat};
use crate::tensor::softmax_masked_row;

struct Linear {
    w: Vec<f64>,
    b: Vec<f64>,
    n_out: usize,
}

impl Linear {
    fn load(ck: &Checkpoint, prefix: &str, w: &str, b: &str) -> Result<Self> {
        let wt = ck.param(&format!("{prefix}.{w}"))?;
        Ok(Self {
            w: wt.data().to_vec(),
            b: ck.param(&format!("{prefix}.{b}"))?.data().to_vec(),
            n_out: wt.shape()[1],
        })
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        vec_mat(x, &self.w, Some(&self.b), out);
    }

    /// Row-wise application to `rows` stacked inputs.
    fn apply_rows(&self, x: &[f64], rows: usize) -> Vec<f64> {
        let k = x.len() / rows.max(1);
        let mut out = vec![0.0; rows * self.n_out];
        for r in 0..rows {
            out[r * self.n_out..(r + 1) * self.n_out].copy_from_slice(&self.b);
        }
        gemm(rows, k, self.n_out, x, false, &self.w, false, &mut out, true);
        out
    }
}

struct Norm {
    gain: Vec<f64>,
    bias: Vec<f64>,
}

impl Norm {
    fn load(ck: &Checkpoint, prefix: &str) -> Result<Self> {
        Ok(Self {
            gain: ck.param(&format!("{prefix}.gain"))?.data().to_vec(),
            bias: ck.param(&format!("{prefix}.bias"))?.data().to_vec(),
        })
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        layer_norm_row(x, &self.gain, &self.bias, LAYER_NORM_EPS, out);
    }
}

struct Attn {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

impl Attn {
    fn load(ck: &Checkpoint, prefix: &str) -> Result<Self> {
        Ok(Self {
            q: Linear::load(ck, prefix, "wq", "bq")?,
            k: Linear::load(ck, prefix, "wk", "bk")?,
            v: Linear::load(ck, prefix, "wv", "bv")?,
            o: Linear::load(ck, prefix, "wo", "bo")?,
        })
    }
}

struct Ffn {
    l1: Linear,
    l2: Linear,
}

impl Ffn {
    fn load(ck: &Checkpoint, prefix: &str) -> Result<Self> {
        Ok(Self {
            l1: Linear::load(ck, prefix, "w1", "b1")?,
            l2: Linear::load(ck, prefix, "w2", "b2")?,
        })
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        let mut h = vec![0.0; self.l1.n_out];
        self.l1.apply(x, &mut h);
        h.iter_mut().for_each(|v| *v = v.max(0.0));
        self.l2.apply(&h, out);
    }
}

struct EncLayer {
    ln1: Norm,
    attn: Attn,
    ln2: Norm,
    ff: Ffn,
}

struct DecLayer {
    ln1: Norm,
    self_attn: Attn,
    ln2: Norm,
    cross: Attn,
    ln3: Norm,
    ff: Ffn,
}

/// Dropout-free weights laid out for step-wise decoding. Immutable once built,
/// so one instance can serve many threads.
pub struct Transformer {
    config: ModelConfig,
    src_embed: Vec<f64>,
    tgt_embed: Vec<f64>,
    enc: Vec<EncLayer>,
    enc_ln: Norm,
    dec: Vec<DecLayer>,
    dec_ln: Norm,
    /// Output projection `[d, V]`.
    out_w: Vec<f64>,
    out_b: Vec<f64>,
    pe: Vec<f64>,
}

/// Encoder output projected to cross-attention keys and values, per layer.
#[derive(Debug)]
struct Memory {
    source: Vec<TokenId>,
    keep: Vec<bool>,
    k: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

/// Per-sentence decoder state: encoder keys/values for cross attention plus
/// the self-attention cache of every consumed target token.
#[derive(Clone, Debug)]
pub struct DecoderState {
    memory: Arc<Memory>,
    self_k: Vec<Vec<f64>>,
    self_v: Vec<Vec<f64>>,
    tokens: Vec<TokenId>,
}

impl DecoderState {
    /// Target tokens consumed so far.
    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Forgets every consumed token past the first `len`.
    pub fn truncate(&mut self, len: usize) {
        if len >= self.tokens.len() {
            return;
        }
        let d = self.self_k.first().map_or(0, |k| k.len() / self.tokens.len());
        self.tokens.truncate(len);
        for c in self.self_k.iter_mut().chain(self.self_v.iter_mut()) {
            c.truncate(len * d);
        }
    }
}

impl Transformer {
    pub fn new(ck: &Checkpoint) -> Result<Self> {
        ck.validate()?;
        let c = &ck.config;
        let enc = (0..c.num_layers)
            .map(|l| {
                Ok(EncLayer {
                    ln1: Norm::load(ck, &format!("enc.{l}.ln1"))?,
                    attn: Attn::load(ck, &format!("enc.{l}.self_attn"))?,
                    ln2: Norm::load(ck, &format!("enc.{l}.ln2"))?,
                    ff: Ffn::load(ck, &format!("enc.{l}.ff"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let dec = (0..c.num_layers)
            .map(|l| {
                Ok(DecLayer {
                    ln1: Norm::load(ck, &format!("dec.{l}.ln1"))?,
                    self_attn: Attn::load(ck, &format!("dec.{l}.self_attn"))?,
                    ln2: Norm::load(ck, &format!("dec.{l}.ln2"))?,
                    cross: Attn::load(ck, &format!("dec.{l}.cross_attn"))?,
                    ln3: Norm::load(ck, &format!("dec.{l}.ln3"))?,
                    ff: Ffn::load(ck, &format!("dec.{l}.ff"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let tgt_embed = ck.param("tgt_embed")?.data().to_vec();
        let (d, v) = (c.d_model, c.target_vocab_size);
        let out_w = if c.tie_output_embedding {
            let mut w = vec![0.0; d * v];
            for t in 0..v {
                for i in 0..d {
                    w[i * v + t] = tgt_embed[t * d + i];
                }
            }
            w
        } else {
            ck.param("out.w")?.data().to_vec()
        };
        Ok(Self {
            config: c.clone(),
            src_embed: ck.param("src_embed")?.data().to_vec(),
            tgt_embed,
            enc,
            enc_ln: Norm::load(ck, "enc.ln_f")?,
            dec,
            dec_ln: Norm::load(ck, "dec.ln_f")?,
            out_w,
            out_b: ck.param("out.b")?.data().to_vec(),
            pe: positional_encoding(c.max_positions, d),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn embed(&self, table: &[f64], id: TokenId, pos: usize, out: &mut [f64]) {
        let d = self.config.d_model;
        let scale = (d as f64).sqrt();
        let row = &table[id as usize * d..(id as usize + 1) * d];
        for i in 0..d {
            out[i] = row[i] * scale + self.pe[pos * d + i];
        }
    }

    /// Attention of one query row over `n` cached key/value rows, all heads.
    fn attend(&self, q: &[f64], k: &[f64], v: &[f64], n: usize, keep: Option<&[bool]>, out: &mut [f64]) {
        let (h, dh, d) = (self.config.num_heads, self.config.head_dim(), self.config.d_model);
        let scale = 1.0 / (dh as f64).sqrt();
        let all = vec![true; n];
        let keep = keep.unwrap_or(&all);
        let mut scores = vec![0.0; n];
        let mut probs = vec![0.0; n];
        out.iter_mut().for_each(|o| *o = 0.0);
        for hd in 0..h {
            let off = hd * dh;
            for j in 0..n {
                let kr = &k[j * d + off..j * d + off + dh];
                scores[j] = q[off..off + dh].iter().zip(kr).map(|(a, b)| a * b).sum::<f64>() * scale;
            }
            softmax_masked_row(&scores, keep, &mut probs);
            for j in 0..n {
                let p = probs[j];
                if p == 0.0 {
                    continue;
                }
                let vr = &v[j * d + off..j * d + off + dh];
                for (o, x) in out[off..off + dh].iter_mut().zip(vr) {
                    *o += p * x;
                }
            }
        }
    }

    /// Runs the encoder and prepares a fresh decoder state.
    pub fn encode(&self, source: &[TokenId]) -> Result<DecoderState> {
        let c = &self.config;
        let (d, s) = (c.d_model, source.len());
        if s > c.max_positions {
            return Err(ModelError::TooLong { len: s, max: c.max_positions });
        }
        if let Some(&id) = source.iter().find(|&&id| id as usize >= c.source_vocab_size) {
            return Err(ModelError::TokenOutOfRange { id, vocab: c.source_vocab_size });
        }
        let keep: Vec<bool> = source.iter().map(|&t| t != PAD).collect();
        let mut x = vec![0.0; s * d];
        for (p, &id) in source.iter().enumerate() {
            self.embed(&self.src_embed, id, p, &mut x[p * d..(p + 1) * d]);
        }
        let mut hbuf = vec![0.0; s * d];
        let mut tmp = vec![0.0; d];
        for layer in &self.enc {
            for p in 0..s {
                layer.ln1.apply(&x[p * d..(p + 1) * d], &mut hbuf[p * d..(p + 1) * d]);
            }
            let q = layer.attn.q.apply_rows(&hbuf, s);
            let k = layer.attn.k.apply_rows(&hbuf, s);
            let v = layer.attn.v.apply_rows(&hbuf, s);
            let mut ctx = vec![0.0; d];
            for p in 0..s {
                self.attend(&q[p * d..(p + 1) * d], &k, &v, s, Some(&keep), &mut ctx);
                layer.attn.o.apply(&ctx, &mut tmp);
                x[p * d..(p + 1) * d].iter_mut().zip(&tmp).for_each(|(a, b)| *a += b);
            }
            for p in 0..s {
                layer.ln2.apply(&x[p * d..(p + 1) * d], &mut hbuf[p * d..(p + 1) * d]);
                layer.ff.apply(&hbuf[p * d..(p + 1) * d], &mut tmp);
                x[p * d..(p + 1) * d].iter_mut().zip(&tmp).for_each(|(a, b)| *a += b);
            }
        }
        for p in 0..s {
            self.enc_ln.apply(&x[p * d..(p + 1) * d], &mut hbuf[p * d..(p + 1) * d]);
        }
        let cross_k = self.dec.iter().map(|l| l.cross.k.apply_rows(&hbuf, s)).collect();
        let cross_v = self.dec.iter().map(|l| l.cross.v.apply_rows(&hbuf, s)).collect();
        Ok(DecoderState {
            memory: Arc::new(Memory {
                source: source.to_vec(),
                keep,
                k: cross_k,
                v: cross_v,
            }),
            self_k: vec![Vec::new(); self.dec.len()],
            self_v: vec![Vec::new(); self.dec.len()],
            tokens: Vec::new(),
        })
    }

    /// Consumes `token` and returns the logits for the next position.
    pub fn step(&self, state: &mut DecoderState, token: TokenId) -> Result<Vec<f64>> {
        let c = &self.config;
        let d = c.d_model;
        let pos = state.tokens.len();
        if pos == 0 && token != BOS {
            return Err(ModelError::MissingBos);
        }
        if pos + 1 > c.max_positions {
            return Err(ModelError::TooLong { len: pos + 1, max: c.max_positions });
        }
        if token as usize >= c.target_vocab_size {
            return Err(ModelError::TokenOutOfRange { id: token, vocab: c.target_vocab_size });
        }
        let mut x = vec![0.0; d];
        self.embed(&self.tgt_embed, token, pos, &mut x);
        let (mut h, mut q, mut kv, mut ctx, mut tmp) =
            (vec![0.0; d], vec![0.0; d], vec![0.0; d], vec![0.0; d], vec![0.0; d]);
        for (l, layer) in self.dec.iter().enumerate() {
            layer.ln1.apply(&x, &mut h);
            layer.self_attn.q.apply(&h, &mut q);
            layer.self_attn.k.apply(&h, &mut kv);
            state.self_k[l].extend_from_slice(&kv);
            layer.self_attn.v.apply(&h, &mut kv);
            state.self_v[l].extend_from_slice(&kv);
            self.attend(&q, &state.self_k[l], &state.self_v[l], pos + 1, None, &mut ctx);
            layer.self_attn.o.apply(&ctx, &mut tmp);
            x.iter_mut().zip(&tmp).for_each(|(a, b)| *a += b);

            layer.ln2.apply(&x, &mut h);
            layer.cross.q.apply(&h, &mut q);
            let mem = &state.memory;
            self.attend(&q, &mem.k[l], &mem.v[l], mem.source.len(), Some(&mem.keep), &mut ctx);
            layer.cross.o.apply(&ctx, &mut tmp);
            x.iter_mut().zip(&tmp).for_each(|(a, b)| *a += b);

            layer.ln3.apply(&x, &mut h);
            layer.ff.apply(&h, &mut tmp);
            x.iter_mut().zip(&tmp).for_each(|(a, b)| *a += b);
        }
        state.tokens.push(token);
        self.dec_ln.apply(&x, &mut h);
        let mut logits = vec![0.0; c.target_vocab_size];
        vec_mat(&h, &self.out_w, Some(&self.out_b), &mut logits);
        Ok(logits)
    }
}

impl StepModel for Transformer {
    type State = DecoderState;

    fn vocab_size(&self) -> usize {
        self.config.target_vocab_size
    }

    fn start(&self, source: &[TokenId]) -> Result<DecoderState> {
        self.encode(source)
    }

    fn push(&self, state: &mut DecoderState, token: TokenId) -> Result<Vec<f64>> {
        self.step(state, token)
    }

    fn truncate(&self, state: &mut DecoderState, len: usize) {
        state.truncate(len);
    }
}

/// Logits for the position after `prefix`, reusing `cache` when it holds a
/// prefix of `prefix` for the same source. Returns the extended cache.
pub fn decode_step(
    model: &Transformer,
    source: &[TokenId],
    prefix: &[TokenId],
    cache: Option<DecoderState>,
) -> Result<(Vec<f64>, DecoderState)> {
    if prefix.first() != Some(&BOS) {
        return Err(ModelError::MissingBos);
    }
    let mut state = match cache {
        Some(mut st) if st.memory.source == source => {
            let common = st.tokens.iter().zip(prefix).take_while(|(a, b)| a == b).count();
            st.truncate(common.min(prefix.len() - 1));
            st
        }
        _ => model.encode(source)?,
    };
    let mut logits = Vec::new();
    for &t in &prefix[state.len()..] {
        logits = model.step(&mut state, t)?;
    }
    Ok((logits, state))
}
