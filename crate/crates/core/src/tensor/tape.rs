use super::kernels::gemm;
use super::{log_sigmoid, sigmoid, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    Exp(Var),
    Log(Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul {
        a: Var,
        b: Var,
        shared_b: bool,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    TransposeLast2(Var),
    Reshape(Var),
    Permute0213(Var),
    LogSigmoid(Var),
    LogSoftmax {
        x: Var,
        inner: usize,
        len: usize,
    },
    GatherLast {
        x: Var,
        idx: Vec<usize>,
    },
    SumAll(Var),
    SumLast(Var),
    ClampMin(Var, f64),
    Relu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    MaskedSoftmax(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Ordered record of operations. Inputs always precede the ops that use them,
/// so a single reverse sweep is a valid topological order for backward.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`; all zeros if the loss does
    /// not depend on it.
    pub fn wrt(&self, var: Var) -> Tensor {
        let shape = self.shapes[var.0].clone();
        match &self.grads[var.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(&shape),
        }
    }

    pub fn raw(&self, var: Var) -> Option<&[f64]> {
        self.grads[var.0].as_deref()
    }
}

fn broadcast_ok(a: &[usize], b: &[usize]) -> bool {
    let nb: usize = b.iter().product();
    nb == 1 || (b.len() <= a.len() && a[a.len() - b.len()..] == *b)
}

/// Sums `g` (shaped like the larger operand) down to a broadcast operand of `nb` elements.
fn reduce_broadcast(g: &[f64], nb: usize) -> Vec<f64> {
    let mut out = vec![0.0; nb];
    for chunk in g.chunks(nb) {
        for (o, v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    out
}

fn accumulate(slot: &mut Option<Vec<f64>>, delta: Vec<f64>) {
    match slot {
        Some(existing) => {
            for (e, d) in existing.iter_mut().zip(delta) {
                *e += d;
            }
        }
        None => *slot = Some(delta),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// A differentiable input (parameter).
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            tracked: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// An input that receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Constant,
            tracked: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite(name));
        }
        let tracked = inputs.iter().any(|v| self.nodes[v.0].tracked);
        self.nodes.push(Node { value, op, tracked });
        Ok(Var(self.nodes.len() - 1))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !broadcast_ok(ta.shape(), tb.shape()) {
            return Err(TensorError::ShapeMismatch {
                op: name,
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let nb = tb.numel();
        let bd = tb.data();
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bd[i % nb]))
            .collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    /// `a + b`, where `b` may be a scalar or match a trailing suffix of `a`'s shape.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("add", a, b, |x, y| x + y)?;
        self.push("add", v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("sub", a, b, |x, y| x - y)?;
        self.push("sub", v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("mul", a, b, |x, y| x * y)?;
        self.push("mul", v, Op::Mul(a, b), &[a, b])
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| -x);
        self.push("neg", v, Op::Neg(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(f64::exp);
        self.push("exp", v, Op::Exp(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(&bad) = self.value(a).data().iter().find(|&&x| x <= 0.0) {
            return Err(TensorError::NonPositiveLog(bad));
        }
        let v = self.value(a).map(f64::ln);
        self.push("log", v, Op::Log(a), &[a])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = self.value(a).map(|x| x * c);
        self.push("scale", v, Op::Scale(a, c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = self.value(a).map(|x| x + c);
        self.push("add_scalar", v, Op::AddScalar(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push("relu", v, Op::Relu(a), &[a])
    }

    /// Elementwise `max(a, floor)`.
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Result<Var> {
        let v = self.value(a).map(|x| x.max(floor));
        self.push("clamp_min", v, Op::ClampMin(a, floor), &[a])
    }

    pub fn log_sigmoid(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(log_sigmoid);
        self.push("log_sigmoid", v, Op::LogSigmoid(a), &[a])
    }

    /// Matrix product over the last two axes.
    ///
    /// `a` is `[.., m, k]`; `b` is either `[k, n]` (shared across the leading
    /// axes of `a`) or `[.., k, n]` with the same leading axes as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let mismatch = || TensorError::ShapeMismatch {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return Err(mismatch());
        }
        let lead = &sa[..sa.len() - 2];
        let batch: usize = lead.iter().product();
        let shared_b = sb.len() == 2;
        if !shared_b && sb[..sb.len() - 2] != *lead {
            return Err(mismatch());
        }
        let mut out = vec![0.0; batch * m * n];
        {
            let (ad, bd) = (self.value(a).data(), self.value(b).data());
            if shared_b {
                gemm(batch * m, k, n, ad, false, bd, false, &mut out, false);
            } else {
                for i in 0..batch {
                    gemm(
                        m,
                        k,
                        n,
                        &ad[i * m * k..(i + 1) * m * k],
                        false,
                        &bd[i * k * n..(i + 1) * k * n],
                        false,
                        &mut out[i * m * n..(i + 1) * m * n],
                        false,
                    );
                }
            }
        }
        let mut shape = lead.to_vec();
        shape.extend([m, n]);
        let v = Tensor::new(shape, out)?;
        self.push(
            "matmul",
            v,
            Op::MatMul {
                a,
                b,
                shared_b,
                batch,
                m,
                k,
                n,
            },
            &[a, b],
        )
    }

    pub fn transpose_last2(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let s = t.shape();
        if s.len() < 2 {
            return Err(TensorError::InvalidAxis {
                axis: 1,
                rank: s.len(),
            });
        }
        let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
        let mut out = vec![0.0; t.numel()];
        for (blk, src) in t.data().chunks(r * c).enumerate() {
            let dst = &mut out[blk * r * c..(blk + 1) * r * c];
            for i in 0..r {
                for j in 0..c {
                    dst[j * r + i] = src[i * c + j];
                }
            }
        }
        let mut shape = s.to_vec();
        let len = shape.len();
        shape.swap(len - 1, len - 2);
        let v = Tensor::new(shape, out)?;
        self.push("transpose", v, Op::TransposeLast2(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshape(shape.to_vec())?;
        self.push("reshape", v, Op::Reshape(a), &[a])
    }

    /// `[p, q, r, s] -> [p, r, q, s]`; used to split and merge attention heads.
    pub fn permute_0213(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let &[p, q, r, s] = t.shape() else {
            return Err(TensorError::InvalidAxis {
                axis: 3,
                rank: t.rank(),
            });
        };
        let out = permute_0213_data(t.data(), p, q, r, s);
        let v = Tensor::new(vec![p, r, q, s], out)?;
        self.push("permute", v, Op::Permute0213(a), &[a])
    }

    /// `x - logsumexp(x)` along `axis`, max-subtracted.
    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.value(a);
        if axis >= t.rank() {
            return Err(TensorError::InvalidAxis {
                axis,
                rank: t.rank(),
            });
        }
        let len = t.shape()[axis];
        let inner: usize = t.shape()[axis + 1..].iter().product();
        let outer = t.numel() / (len * inner);
        let mut out = t.data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let idx = |j: usize| base + j * inner;
                let max = (0..len).map(|j| out[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                let sum: f64 = (0..len).map(|j| (out[idx(j)] - max).exp()).sum();
                let lse = max + sum.ln();
                for j in 0..len {
                    out[idx(j)] -= lse;
                }
            }
        }
        let v = Tensor::new(t.shape().to_vec(), out)?;
        self.push("log_softmax", v, Op::LogSoftmax { x: a, inner, len }, &[a])
    }

    /// Selects `x[..., idx[...]]`; `idx` has one entry per leading position.
    pub fn gather_last(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let v = t.last_dim();
        let rows = t.numel() / v;
        if t.rank() == 0 || idx.len() != rows {
            return Err(TensorError::ShapeMismatch {
                op: "gather_last",
                lhs: t.shape().to_vec(),
                rhs: vec![idx.len()],
            });
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= v) {
            return Err(TensorError::IndexOutOfRange { index: bad, size: v });
        }
        let data: Vec<f64> = idx.iter().enumerate().map(|(r, &i)| t.data()[r * v + i]).collect();
        let shape = t.shape()[..t.rank() - 1].to_vec();
        let out = Tensor::new(shape, data)?;
        self.push(
            "gather_last",
            out,
            Op::GatherLast {
                x: a,
                idx: idx.to_vec(),
            },
            &[a],
        )
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push("sum_all", Tensor::scalar(s), Op::SumAll(a), &[a])
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel() as f64;
        let s = self.sum_all(a)?;
        self.scale(s, 1.0 / n)
    }

    /// Sum over the last axis, dropping it.
    pub fn sum_last(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.rank() == 0 {
            return Err(TensorError::InvalidAxis { axis: 0, rank: 0 });
        }
        let v = t.last_dim();
        let data: Vec<f64> = t.data().chunks(v).map(|c| c.iter().sum()).collect();
        let out = Tensor::new(t.shape()[..t.rank() - 1].to_vec(), data)?;
        self.push("sum_last", out, Op::SumLast(a), &[a])
    }

    /// Layer normalisation over the last axis with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let t = self.value(x);
        let d = t.last_dim();
        for p in [gain, bias] {
            if self.shape(p) != [d] {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: t.shape().to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let rows = t.numel() / d;
        let mut xhat = vec![0.0; t.numel()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; t.numel()];
        for r in 0..rows {
            let row = &t.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for i in 0..d {
                let xh = (row[i] - mean) * rs;
                xhat[r * d + i] = xh;
                out[r * d + i] = xh * g[i] + b[i];
            }
        }
        let v = Tensor::new(t.shape().to_vec(), out)?;
        self.push(
            "layer_norm",
            v,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        )
    }

    /// Rows of `table` (`[V, d]`) selected by `ids`, giving `[ids.len(), d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let &[vocab, d] = t.shape() else {
            return Err(TensorError::InvalidAxis {
                axis: 1,
                rank: t.rank(),
            });
        };
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(TensorError::IndexOutOfRange {
                    index: id,
                    size: vocab,
                });
            }
            out.extend_from_slice(&t.data()[id * d..(id + 1) * d]);
        }
        let v = Tensor::new(vec![ids.len(), d], out)?;
        self.push(
            "embedding",
            v,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        )
    }

    /// Softmax over the last axis of `[B, H, T, S]` scores, restricted to
    /// positions where `keep[b, t, s]` is true. Masked entries get exactly zero.
    pub fn masked_softmax(&mut self, a: Var, keep: &[bool]) -> Result<Var> {
        let t = self.value(a);
        let &[b, h, tq, s] = t.shape() else {
            return Err(TensorError::InvalidAxis {
                axis: 3,
                rank: t.rank(),
            });
        };
        if keep.len() != b * tq * s {
            return Err(TensorError::ShapeMismatch {
                op: "masked_softmax",
                lhs: t.shape().to_vec(),
                rhs: vec![keep.len()],
            });
        }
        let mut out = vec![0.0; t.numel()];
        for bi in 0..b {
            for hi in 0..h {
                for qi in 0..tq {
                    let off = ((bi * h + hi) * tq + qi) * s;
                    let moff = (bi * tq + qi) * s;
                    let row = &t.data()[off..off + s];
                    let mask = &keep[moff..moff + s];
                    softmax_masked_row(row, mask, &mut out[off..off + s]);
                }
            }
        }
        let v = Tensor::new(t.shape().to_vec(), out)?;
        self.push("masked_softmax", v, Op::MaskedSoftmax(a), &[a])
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(TensorError::NotScalar(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].tracked {
            grads[loss.0] = Some(vec![1.0]);
        }
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let tracked = |v: Var| self.nodes[v.0].tracked;
        let val = |v: Var| self.nodes[v.0].value.data();
        let y = node.value.data();
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                if tracked(*a) {
                    accumulate(&mut grads[a.0], g.to_vec());
                }
                if tracked(*b) {
                    let mut gb = reduce_broadcast(g, val(*b).len());
                    if matches!(node.op, Op::Sub(..)) {
                        gb.iter_mut().for_each(|v| *v = -*v);
                    }
                    accumulate(&mut grads[b.0], gb);
                }
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (val(*a), val(*b));
                let nb = bd.len();
                if tracked(*a) {
                    let ga = g.iter().enumerate().map(|(i, gv)| gv * bd[i % nb]).collect();
                    accumulate(&mut grads[a.0], ga);
                }
                if tracked(*b) {
                    let prod: Vec<f64> = g.iter().zip(ad).map(|(gv, av)| gv * av).collect();
                    accumulate(&mut grads[b.0], reduce_broadcast(&prod, nb));
                }
            }
            Op::Neg(a) => accumulate(&mut grads[a.0], g.iter().map(|v| -v).collect()),
            Op::Exp(a) => accumulate(&mut grads[a.0], g.iter().zip(y).map(|(gv, yv)| gv * yv).collect()),
            Op::Log(a) => {
                let x = val(*a);
                accumulate(&mut grads[a.0], g.iter().zip(x).map(|(gv, xv)| gv / xv).collect());
            }
            Op::Scale(a, c) => accumulate(&mut grads[a.0], g.iter().map(|v| v * c).collect()),
            Op::AddScalar(a) | Op::Reshape(a) => accumulate(&mut grads[a.0], g.to_vec()),
            Op::Relu(a) => {
                let x = val(*a);
                let d = g.iter().zip(x).map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 }).collect();
                accumulate(&mut grads[a.0], d);
            }
            Op::ClampMin(a, floor) => {
                let x = val(*a);
                let d = g.iter().zip(x).map(|(gv, xv)| if xv > floor { *gv } else { 0.0 }).collect();
                accumulate(&mut grads[a.0], d);
            }
            Op::LogSigmoid(a) => {
                let x = val(*a);
                let d = g.iter().zip(x).map(|(gv, xv)| gv * sigmoid(-xv)).collect();
                accumulate(&mut grads[a.0], d);
            }
            Op::MatMul {
                a,
                b,
                shared_b,
                batch,
                m,
                k,
                n,
            } => {
                let (ad, bd) = (val(*a), val(*b));
                let (batch, m, k, n) = (*batch, *m, *k, *n);
                if tracked(*a) {
                    let mut ga = vec![0.0; batch * m * k];
                    if *shared_b {
                        gemm(batch * m, n, k, g, false, bd, true, &mut ga, false);
                    } else {
                        for i in 0..batch {
                            gemm(
                                m,
                                n,
                                k,
                                &g[i * m * n..(i + 1) * m * n],
                                false,
                                &bd[i * k * n..(i + 1) * k * n],
                                true,
                                &mut ga[i * m * k..(i + 1) * m * k],
                                false,
                            );
                        }
                    }
                    accumulate(&mut grads[a.0], ga);
                }
                if tracked(*b) {
                    let gb = if *shared_b {
                        let mut gb = vec![0.0; k * n];
                        gemm(k, batch * m, n, ad, true, g, false, &mut gb, false);
                        gb
                    } else {
                        let mut gb = vec![0.0; batch * k * n];
                        for i in 0..batch {
                            gemm(
                                k,
                                m,
                                n,
                                &ad[i * m * k..(i + 1) * m * k],
                                true,
                                &g[i * m * n..(i + 1) * m * n],
                                false,
                                &mut gb[i * k * n..(i + 1) * k * n],
                                false,
                            );
                        }
                        gb
                    };
                    accumulate(&mut grads[b.0], gb);
                }
            }
            Op::TransposeLast2(a) => {
                // gradient is the transpose of g back to the input layout
                let s = node.value.shape();
                let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
                let mut ga = vec![0.0; g.len()];
                for (blk, src) in g.chunks(r * c).enumerate() {
                    let dst = &mut ga[blk * r * c..(blk + 1) * r * c];
                    for i in 0..r {
                        for j in 0..c {
                            dst[j * r + i] = src[i * c + j];
                        }
                    }
                }
                accumulate(&mut grads[a.0], ga);
            }
            Op::Permute0213(a) => {
                let s = node.value.shape();
                let ga = permute_0213_data(g, s[0], s[1], s[2], s[3]);
                accumulate(&mut grads[a.0], ga);
            }
            Op::LogSoftmax { x, inner, len } => {
                let (inner, len) = (*inner, *len);
                let mut gx = g.to_vec();
                let outer = g.len() / (inner * len);
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let gs: f64 = (0..len).map(|j| g[base + j * inner]).sum();
                        for j in 0..len {
                            let p = base + j * inner;
                            gx[p] = g[p] - y[p].exp() * gs;
                        }
                    }
                }
                accumulate(&mut grads[x.0], gx);
            }
            Op::GatherLast { x, idx } => {
                let v = self.nodes[x.0].value.last_dim();
                let mut gx = vec![0.0; idx.len() * v];
                for (r, &i) in idx.iter().enumerate() {
                    gx[r * v + i] += g[r];
                }
                accumulate(&mut grads[x.0], gx);
            }
            Op::SumAll(a) => {
                let n = val(*a).len();
                accumulate(&mut grads[a.0], vec![g[0]; n]);
            }
            Op::SumLast(a) => {
                let v = self.nodes[a.0].value.last_dim();
                let gx = g.iter().flat_map(|&gv| std::iter::repeat(gv).take(v)).collect();
                accumulate(&mut grads[a.0], gx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let gd = val(*gain);
                let d = gd.len();
                if tracked(*x) {
                    let mut gx = vec![0.0; g.len()];
                    for (r, &rs) in rstd.iter().enumerate() {
                        let span = r * d..(r + 1) * d;
                        let (gr, xr) = (&g[span.clone()], &xhat[span.clone()]);
                        let dxhat: Vec<f64> = gr.iter().zip(gd).map(|(a, b)| a * b).collect();
                        let m1 = dxhat.iter().sum::<f64>() / d as f64;
                        let m2 = dxhat.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for i in 0..d {
                            gx[r * d + i] = rs * (dxhat[i] - m1 - xr[i] * m2);
                        }
                    }
                    accumulate(&mut grads[x.0], gx);
                }
                if tracked(*gain) {
                    let prod: Vec<f64> = g.iter().zip(xhat).map(|(a, b)| a * b).collect();
                    accumulate(&mut grads[gain.0], reduce_broadcast(&prod, d));
                }
                if tracked(*bias) {
                    accumulate(&mut grads[bias.0], reduce_broadcast(g, d));
                }
            }
            Op::Embedding { table, ids } => {
                let t = &self.nodes[table.0].value;
                let d = t.last_dim();
                let mut gt = vec![0.0; t.numel()];
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        gt[id * d + j] += g[r * d + j];
                    }
                }
                accumulate(&mut grads[table.0], gt);
            }
            Op::MaskedSoftmax(a) => {
                let s = node.value.last_dim();
                let mut gx = vec![0.0; g.len()];
                for ((gr, yr), out) in g.chunks(s).zip(y.chunks(s)).zip(gx.chunks_mut(s)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for i in 0..s {
                        out[i] = yr[i] * (gr[i] - dot);
                    }
                }
                accumulate(&mut grads[a.0], gx);
            }
        }
    }
}

pub(crate) fn permute_0213_data(data: &[f64], p: usize, q: usize, r: usize, s: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for pi in 0..p {
        for qi in 0..q {
            for ri in 0..r {
                let src = ((pi * q + qi) * r + ri) * s;
                let dst = ((pi * r + ri) * q + qi) * s;
                out[dst..dst + s].copy_from_slice(&data[src..src + s]);
            }
        }
    }
    out
}

/// Softmax over the kept entries of `row`; dropped entries are set to zero.
pub(crate) fn softmax_masked_row(row: &[f64], keep: &[bool], out: &mut [f64]) {
    let max = row
        .iter()
        .zip(keep)
        .filter(|(_, &k)| k)
        .map(|(v, _)| *v)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        out.fill(0.0);
        return;
    }
    let mut sum = 0.0;
    for i in 0..row.len() {
        out[i] = if keep[i] { (row[i] - max).exp() } else { 0.0 };
        sum += out[i];
    }
    for v in out.iter_mut() {
        *v /= sum;
    }
}
