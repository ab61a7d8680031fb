use rand::Rng;

use super::{Scalar, Tensor};
use crate::{Error, Result};

/// Handle to a tensor recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Layout of a fused multi-head attention call.
///
/// Queries are `[batch * q_len, heads * head_dim]`, keys and values are
/// `[batch * k_len, heads * head_dim]`. Key positions at or beyond
/// `key_lengths[b]` are masked out.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionSpec {
    pub batch: usize,
    pub q_len: usize,
    pub k_len: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub causal: bool,
    pub key_lengths: Vec<usize>,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Sigmoid(Var),
    XLogX(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        pad_id: usize,
        count: usize,
        probs: Vec<T>,
    },
    Concat(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Transpose(Var),
    Sum(Var),
    Mean(Var),
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    BlockTile {
        x: Var,
        rows: usize,
        width: usize,
        transpose: bool,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        spec: AttentionSpec,
        probs: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Reverse-mode tape. Operations are appended in execution order and
/// [`Graph::backward`] replays them in reverse.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn dim_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Dimension {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<T>, requires_grad: bool, op: Op<T>) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node {
            value: Tensor {
                shape,
                data,
                requires_grad,
                grad: None,
            },
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn data(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value.data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<T>> {
        self.nodes[v.0].value.grad.take()
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self, v: Var) -> T {
        self.nodes[v.0].value.data[0]
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.shape.clone(), t.data.clone(), true, Op::Leaf)
    }

    pub fn param_from(&mut self, shape: Vec<usize>, data: Vec<T>) -> Var {
        self.push(shape, data, true, Op::Leaf)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<T>) -> Result<Var> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(dim_err("constant", &shape, &[data.len()]));
        }
        Ok(self.push(shape, data, false, Op::Leaf))
    }

    pub fn scalar_constant(&mut self, x: T) -> Var {
        self.push(vec![1], vec![x], false, Op::Leaf)
    }

    fn two_d(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(dim_err(op, s, &[0, 0])),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.two_d(a, "matmul")?;
        let (k2, n) = self.two_d(b, "matmul")?;
        if k != k2 {
            return Err(dim_err("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, self.data(a), false, self.data(b), false, &mut out, false);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, rg, Op::MatMul(a, b)))
    }

    /// Orders operands so that a scalar-vs-tensor pair has the scalar second.
    fn broadcast_pair(&self, a: Var, b: Var, op: &'static str) -> Result<(Var, Var)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (na, nb) = (self.value(a).numel(), self.value(b).numel());
        if sa == sb || nb == 1 {
            Ok((a, b))
        } else if na == 1 {
            Ok((b, a))
        } else {
            Err(dim_err(op, sa, sb))
        }
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> (Vec<usize>, Vec<T>) {
        let (xa, xb) = (self.data(a), self.data(b));
        let out = if xb.len() == 1 {
            let s = xb[0];
            xa.iter().map(|&x| f(x, s)).collect()
        } else {
            xa.iter().zip(xb).map(|(&x, &y)| f(x, y)).collect()
        };
        (self.shape(a).to_vec(), out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = self.broadcast_pair(a, b, "add")?;
        let (shape, out) = self.binary(a, b, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(shape, out, rg, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if !(sa == sb || self.value(b).numel() == 1) {
            return Err(dim_err("sub", sa, sb));
        }
        let (shape, out) = self.binary(a, b, |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(shape, out, rg, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = self.broadcast_pair(a, b, "mul")?;
        let (shape, out) = self.binary(a, b, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(shape, out, rg, Op::Mul(a, b)))
    }

    /// Adds a `[n]` bias to every row of `x[.., n]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = self.value(x).cols();
        if self.shape(bias) != [n] {
            return Err(dim_err("add_bias", self.shape(x), self.shape(bias)));
        }
        let b = self.data(bias);
        let out: Vec<T> = self
            .data(x)
            .chunks(n)
            .flat_map(|row| row.iter().zip(b).map(|(&v, &c)| v + c))
            .collect();
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(self.shape(x).to_vec(), out, rg, Op::AddBias(x, bias)))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let out = self.data(x).iter().map(|&v| v * c).collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), out, rg, Op::Scale(x, c))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self
            .data(x)
            .iter()
            .map(|&v| if v > T::zero() { v } else { T::zero() })
            .collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), out, rg, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.data(x).iter().map(|&v| sigmoid_scalar(v)).collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), out, rg, Op::Sigmoid(x))
    }

    /// `x ln x` with the convention `0 ln 0 = 0`. Inputs must be non-negative.
    pub fn xlogx(&mut self, x: Var) -> Result<Var> {
        if let Some(bad) = self.data(x).iter().find(|v| !(**v >= T::zero())) {
            return Err(Error::Domain(format!("xlogx of {bad}")));
        }
        let out = self
            .data(x)
            .iter()
            .map(|&v| if v > T::zero() { v * v.ln() } else { T::zero() })
            .collect();
        let rg = self.rg(x);
        Ok(self.push(self.shape(x).to_vec(), out, rg, Op::XLogX(x)))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(dim_err("softmax", &shape, &[axis]));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let src = self.data(x);
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let max = (0..len).map(|j| src[at(j)]).fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for j in 0..len {
                    let e = (src[at(j)] - max).exp();
                    out[at(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    out[at(j)] = out[at(j)] / total;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(shape, out, rg, Op::Softmax { x, axis }))
    }

    /// Normalizes over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if !(eps > 0.0) {
            return Err(Error::config(format!("layer norm eps must be positive, got {eps}")));
        }
        let n = self.value(x).cols();
        if self.shape(gain) != [n] || self.shape(bias) != [n] {
            return Err(dim_err("layer_norm", self.shape(x), self.shape(gain)));
        }
        let eps = T::of(eps);
        let nf = T::of(n as f64);
        let (g, b) = (self.data(gain), self.data(bias));
        let src = self.data(x);
        let rows = src.len() / n;
        let mut out = vec![T::zero(); src.len()];
        let mut xhat = vec![T::zero(); src.len()];
        let mut rstd = vec![T::zero(); rows];
        for r in 0..rows {
            let row = &src[r * n..(r + 1) * n];
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                let h = (row[j] - mean) * rs;
                xhat[r * n + j] = h;
                out[r * n + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            self.shape(x).to_vec(),
            out,
            rg,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        ))
    }

    /// Mean token negative log-likelihood over the rows whose target is not `pad_id`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], pad_id: usize) -> Result<Var> {
        let (rows, vocab) = self.two_d(logits, "cross_entropy")?;
        if targets.len() != rows {
            return Err(dim_err("cross_entropy", self.shape(logits), &[targets.len()]));
        }
        if let Some(&t) = targets.iter().find(|&&t| t != pad_id && t >= vocab) {
            return Err(Error::input(format!("target id {t} outside vocabulary of {vocab}")));
        }
        let count = targets.iter().filter(|&&t| t != pad_id).count();
        if count == 0 {
            return Err(Error::DegenerateBatch);
        }
        let src = self.data(logits);
        let mut probs = vec![T::zero(); src.len()];
        let mut total = T::zero();
        for (r, &t) in targets.iter().enumerate() {
            if t == pad_id {
                continue;
            }
            let row = &src[r * vocab..(r + 1) * vocab];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let sum: T = row.iter().map(|&v| (v - max).exp()).sum();
            let lse = max + sum.ln();
            total += lse - row[t];
            for j in 0..vocab {
                probs[r * vocab + j] = (row[j] - lse).exp();
            }
        }
        let loss = total / T::of(count as f64);
        let rg = self.rg(logits);
        Ok(self.push(
            vec![1],
            vec![loss],
            rg,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                pad_id,
                count,
                probs,
            },
        ))
    }

    /// Concatenates along the last axis. All parts must share the leading shape.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::input("concat of nothing"))?;
        let lead = self.shape(first)[..self.shape(first).len() - 1].to_vec();
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s[..s.len() - 1] != lead[..] {
                return Err(dim_err("concat", self.shape(first), s));
            }
            total += s[s.len() - 1];
        }
        let rows: usize = lead.iter().product();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                let c = self.value(p).cols();
                out.extend_from_slice(&self.data(p)[r * c..(r + 1) * c]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(shape, out, rg, Op::Concat(parts.to_vec())))
    }

    /// Columns `start..start+len` of the last axis.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let c = self.value(x).cols();
        if len == 0 || start + len > c {
            return Err(dim_err("slice_cols", self.shape(x), &[start, len]));
        }
        let out: Vec<T> = self
            .data(x)
            .chunks(c)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let mut shape = self.shape(x).to_vec();
        *shape.last_mut().unwrap() = len;
        let rg = self.rg(x);
        Ok(self.push(shape, out, rg, Op::SliceCols { x, start }))
    }

    /// Splits the last axis into consecutive pieces of the given widths.
    pub fn split(&mut self, x: Var, widths: &[usize]) -> Result<Vec<Var>> {
        if widths.iter().sum::<usize>() != self.value(x).cols() {
            return Err(dim_err("split", self.shape(x), widths));
        }
        let mut start = 0;
        let mut out = Vec::with_capacity(widths.len());
        for &w in widths {
            out.push(self.slice_cols(x, start, w)?);
            start += w;
        }
        Ok(out)
    }

    /// Rows of `table[V, d]` selected by `ids`, giving `[ids.len(), d]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.two_d(table, "gather")?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::input(format!("token id {bad} outside vocabulary of {v}")));
        }
        if ids.is_empty() {
            return Err(Error::input("gather of no ids"));
        }
        let src = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            vec![ids.len(), d],
            out,
            rg,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.two_d(x, "transpose")?;
        let src = self.data(x);
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.rg(x);
        Ok(self.push(vec![c, r], out, rg, Op::Transpose(x)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().copied().sum();
        let rg = self.rg(x);
        self.push(vec![1], vec![s], rg, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = T::of(self.value(x).numel() as f64);
        let s = self.data(x).iter().copied().sum::<T>() / n;
        let rg = self.rg(x);
        self.push(vec![1], vec![s], rg, Op::Mean(x))
    }

    /// Inverted dropout. `p == 0` returns `x` unchanged without recording.
    pub fn dropout<R: Rng>(&mut self, x: Var, p: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::config(format!("dropout probability {p} not in [0, 1)")));
        }
        if p == 0.0 {
            return Ok(x);
        }
        let keep = T::of(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..self.value(x).numel())
            .map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep })
            .collect();
        let out = self.data(x).iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let rg = self.rg(x);
        Ok(self.push(self.shape(x).to_vec(), out, rg, Op::Dropout { x, mask }))
    }

    /// Expands a `[K]` vector into a `[rows, K * width]` matrix where column
    /// block `k` is filled with `x[k]`, or its `[K * width, rows]` transpose.
    pub fn block_tile(&mut self, x: Var, rows: usize, width: usize, transpose: bool) -> Result<Var> {
        let k = match self.shape(x) {
            [k] => *k,
            s => return Err(dim_err("block_tile", s, &[0])),
        };
        if rows == 0 || width == 0 {
            return Err(dim_err("block_tile", &[k], &[rows, width]));
        }
        let src = self.data(x);
        let cols = k * width;
        let (shape, out) = if transpose {
            let mut out = Vec::with_capacity(cols * rows);
            for c in 0..cols {
                out.extend(std::iter::repeat(src[c / width]).take(rows));
            }
            (vec![cols, rows], out)
        } else {
            let row: Vec<T> = (0..cols).map(|c| src[c / width]).collect();
            let mut out = Vec::with_capacity(cols * rows);
            for _ in 0..rows {
                out.extend_from_slice(&row);
            }
            (vec![rows, cols], out)
        };
        let rg = self.rg(x);
        Ok(self.push(
            shape,
            out,
            rg,
            Op::BlockTile {
                x,
                rows,
                width,
                transpose,
            },
        ))
    }

    /// Scaled dot-product attention for all heads; output heads are laid
    /// out consecutively along the last axis.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: AttentionSpec) -> Result<Var> {
        let width = spec.heads * spec.head_dim;
        let (qr, qc) = self.two_d(q, "attention")?;
        let (kr, kc) = self.two_d(k, "attention")?;
        if qc != width || qr != spec.batch * spec.q_len {
            return Err(dim_err("attention", &[qr, qc], &[spec.batch * spec.q_len, width]));
        }
        if kc != width || kr != spec.batch * spec.k_len || self.shape(v) != [kr, kc] {
            return Err(dim_err("attention", self.shape(k), self.shape(v)));
        }
        if spec.key_lengths.len() != spec.batch
            || spec.key_lengths.iter().any(|&l| l == 0 || l > spec.k_len)
        {
            return Err(Error::input("attention key lengths inconsistent with batch"));
        }
        let (b, tq, tk, h, dh) = (spec.batch, spec.q_len, spec.k_len, spec.heads, spec.head_dim);
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let (qd, kd, vd) = (self.data(q), self.data(k), self.data(v));
        let mut probs = vec![T::zero(); b * h * tq * tk];
        let mut out = vec![T::zero(); b * tq * width];
        let mut row = vec![T::zero(); tk];
        for bi in 0..b {
            for hi in 0..h {
                for i in 0..tq {
                    let limit = visible_keys(&spec, bi, i);
                    let qrow = &qd[(bi * tq + i) * width + hi * dh..][..dh];
                    let mut max = T::neg_infinity();
                    for (j, r) in row.iter_mut().enumerate().take(limit) {
                        let krow = &kd[(bi * tk + j) * width + hi * dh..][..dh];
                        let s = dot(qrow, krow) * scale;
                        *r = s;
                        max = max.max(s);
                    }
                    let mut total = T::zero();
                    for r in row.iter_mut().take(limit) {
                        *r = (*r - max).exp();
                        total += *r;
                    }
                    let p = &mut probs[((bi * h + hi) * tq + i) * tk..][..tk];
                    let o = &mut out[(bi * tq + i) * width + hi * dh..][..dh];
                    for j in 0..limit {
                        let pj = row[j] / total;
                        p[j] = pj;
                        let vrow = &vd[(bi * tk + j) * width + hi * dh..][..dh];
                        for (oc, &vc) in o.iter_mut().zip(vrow) {
                            *oc += pj * vc;
                        }
                    }
                }
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(
            vec![b * tq, width],
            out,
            rg,
            Op::Attention {
                q,
                k,
                v,
                spec,
                probs,
            },
        ))
    }

    /// Back-propagates from a one-element tensor. Gradients accumulate into
    /// every reachable node that requires them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(dim_err("backward", self.shape(loss), &[1]));
        }
        self.nodes[loss.0].value.grad = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].value.requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].value.grad.take() else {
                continue;
            };
            let contributions = self.backward_node(i, &g);
            self.nodes[i].value.grad = Some(g);
            for (target, delta) in contributions {
                if !self.rg(target) {
                    continue;
                }
                let node = &mut self.nodes[target.0].value;
                match &mut node.grad {
                    Some(acc) => {
                        for (a, d) in acc.iter_mut().zip(delta) {
                            *a += d;
                        }
                    }
                    None => node.grad = Some(delta),
                }
            }
        }
        Ok(())
    }

    fn backward_node(&self, i: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[i];
        let y = &node.value.data;
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let mut out = Vec::new();
                if self.rg(*a) {
                    let mut ga = vec![T::zero(); m * k];
                    T::gemm(m, n, k, g, false, self.data(*b), true, &mut ga, false);
                    out.push((*a, ga));
                }
                if self.rg(*b) {
                    let mut gb = vec![T::zero(); k * n];
                    T::gemm(k, m, n, self.data(*a), true, g, false, &mut gb, false);
                    out.push((*b, gb));
                }
                out
            }
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, reduce_to(g, self.value(*b).numel()))],
            Op::Sub(a, b) => {
                let neg: Vec<T> = g.iter().map(|&x| -x).collect();
                vec![(*a, g.to_vec()), (*b, reduce_to(&neg, self.value(*b).numel()))]
            }
            Op::Mul(a, b) => {
                let (xa, xb) = (self.data(*a), self.data(*b));
                let mut out = Vec::new();
                if self.rg(*a) {
                    let ga = if xb.len() == 1 {
                        g.iter().map(|&d| d * xb[0]).collect()
                    } else {
                        g.iter().zip(xb).map(|(&d, &v)| d * v).collect()
                    };
                    out.push((*a, ga));
                }
                if self.rg(*b) {
                    let prod: Vec<T> = g.iter().zip(xa).map(|(&d, &v)| d * v).collect();
                    out.push((*b, reduce_to(&prod, xb.len())));
                }
                out
            }
            Op::AddBias(x, bias) => {
                let n = self.value(*bias).numel();
                let mut gb = vec![T::zero(); n];
                for row in g.chunks(n) {
                    for (acc, &d) in gb.iter_mut().zip(row) {
                        *acc += d;
                    }
                }
                vec![(*x, g.to_vec()), (*bias, gb)]
            }
            Op::Scale(x, c) => vec![(*x, g.iter().map(|&d| d * *c).collect())],
            Op::Relu(x) => {
                let xs = self.data(*x);
                let gx = g
                    .iter()
                    .zip(xs)
                    .map(|(&d, &v)| if v > T::zero() { d } else { T::zero() })
                    .collect();
                vec![(*x, gx)]
            }
            Op::Sigmoid(x) => {
                let gx = g.iter().zip(y).map(|(&d, &s)| d * s * (T::one() - s)).collect();
                vec![(*x, gx)]
            }
            Op::XLogX(x) => {
                let tiny = T::min_positive_value();
                let gx = g
                    .iter()
                    .zip(self.data(*x))
                    .map(|(&d, &v)| d * (v.max(tiny).ln() + T::one()))
                    .collect();
                vec![(*x, gx)]
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = axis_split(&node.value.shape, *axis);
                let mut gx = vec![T::zero(); g.len()];
                for o in 0..outer {
                    for ii in 0..inner {
                        let at = |j: usize| o * len * inner + j * inner + ii;
                        let dotp: T = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..len {
                            gx[at(j)] = y[at(j)] * (g[at(j)] - dotp);
                        }
                    }
                }
                vec![(*x, gx)]
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let n = self.value(*gain).numel();
                let nf = T::of(n as f64);
                let gain_d = self.data(*gain);
                let mut gx = vec![T::zero(); g.len()];
                let mut gg = vec![T::zero(); n];
                let mut gbias = vec![T::zero(); n];
                let mut dxhat = vec![T::zero(); n];
                for (r, &rs) in rstd.iter().enumerate() {
                    let gr = &g[r * n..(r + 1) * n];
                    let hr = &xhat[r * n..(r + 1) * n];
                    let mut mean_d = T::zero();
                    let mut mean_dh = T::zero();
                    for j in 0..n {
                        gg[j] += gr[j] * hr[j];
                        gbias[j] += gr[j];
                        dxhat[j] = gr[j] * gain_d[j];
                        mean_d += dxhat[j];
                        mean_dh += dxhat[j] * hr[j];
                    }
                    mean_d = mean_d / nf;
                    mean_dh = mean_dh / nf;
                    for j in 0..n {
                        gx[r * n + j] = rs * (dxhat[j] - mean_d - hr[j] * mean_dh);
                    }
                }
                vec![(*x, gx), (*gain, gg), (*bias, gbias)]
            }
            Op::CrossEntropy {
                logits,
                targets,
                pad_id,
                count,
                probs,
            } => {
                let vocab = self.value(*logits).cols();
                let coef = g[0] / T::of(*count as f64);
                let mut gx = vec![T::zero(); probs.len()];
                for (r, &t) in targets.iter().enumerate() {
                    if t == *pad_id {
                        continue;
                    }
                    for j in 0..vocab {
                        gx[r * vocab + j] = coef * probs[r * vocab + j];
                    }
                    gx[r * vocab + t] -= coef;
                }
                vec![(*logits, gx)]
            }
            Op::Concat(parts) => {
                let total = node.value.cols();
                let rows = node.value.rows();
                let mut offset = 0;
                let mut out = Vec::with_capacity(parts.len());
                for &p in parts {
                    let c = self.value(p).cols();
                    let mut gp = Vec::with_capacity(rows * c);
                    for r in 0..rows {
                        gp.extend_from_slice(&g[r * total + offset..r * total + offset + c]);
                    }
                    offset += c;
                    out.push((p, gp));
                }
                out
            }
            Op::SliceCols { x, start } => {
                let c = self.value(*x).cols();
                let len = node.value.cols();
                let mut gx = vec![T::zero(); self.value(*x).numel()];
                for (r, grow) in g.chunks(len).enumerate() {
                    gx[r * c + start..r * c + start + len].copy_from_slice(grow);
                }
                vec![(*x, gx)]
            }
            Op::Gather { table, ids } => {
                let d = self.value(*table).cols();
                let mut gt = vec![T::zero(); self.value(*table).numel()];
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        gt[id * d + j] += g[r * d + j];
                    }
                }
                vec![(*table, gt)]
            }
            Op::Transpose(x) => {
                let (r, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                let mut gx = vec![T::zero(); r * c];
                for i in 0..r {
                    for j in 0..c {
                        gx[i * c + j] = g[j * r + i];
                    }
                }
                vec![(*x, gx)]
            }
            Op::Sum(x) => vec![(*x, vec![g[0]; self.value(*x).numel()])],
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                vec![(*x, vec![g[0] / T::of(n as f64); n])]
            }
            Op::Dropout { x, mask } => {
                vec![(*x, g.iter().zip(mask).map(|(&d, &m)| d * m).collect())]
            }
            Op::BlockTile {
                x,
                rows,
                width,
                transpose,
            } => {
                let k = self.value(*x).numel();
                let cols = k * width;
                let mut gx = vec![T::zero(); k];
                if *transpose {
                    for c in 0..cols {
                        gx[c / width] += g[c * rows..(c + 1) * rows].iter().copied().sum::<T>();
                    }
                } else {
                    for r in 0..*rows {
                        for c in 0..cols {
                            gx[c / width] += g[r * cols + c];
                        }
                    }
                }
                vec![(*x, gx)]
            }
            Op::Attention {
                q,
                k,
                v,
                spec,
                probs,
            } => self.attention_backward(*q, *k, *v, spec, probs, g),
        }
    }

    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        spec: &AttentionSpec,
        probs: &[T],
        g: &[T],
    ) -> Vec<(Var, Vec<T>)> {
        let (b, tq, tk, h, dh) = (spec.batch, spec.q_len, spec.k_len, spec.heads, spec.head_dim);
        let width = h * dh;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let (qd, kd, vd) = (self.data(q), self.data(k), self.data(v));
        let mut gq = vec![T::zero(); qd.len()];
        let mut gk = vec![T::zero(); kd.len()];
        let mut gv = vec![T::zero(); vd.len()];
        let mut dp = vec![T::zero(); tk];
        for bi in 0..b {
            for hi in 0..h {
                for i in 0..tq {
                    let limit = visible_keys(spec, bi, i);
                    let p = &probs[((bi * h + hi) * tq + i) * tk..][..tk];
                    let go = &g[(bi * tq + i) * width + hi * dh..][..dh];
                    let mut weighted = T::zero();
                    for j in 0..limit {
                        let voff = (bi * tk + j) * width + hi * dh;
                        dp[j] = dot(go, &vd[voff..voff + dh]);
                        weighted += dp[j] * p[j];
                        for c in 0..dh {
                            gv[voff + c] += p[j] * go[c];
                        }
                    }
                    let qoff = (bi * tq + i) * width + hi * dh;
                    for j in 0..limit {
                        let ds = p[j] * (dp[j] - weighted) * scale;
                        if ds == T::zero() {
                            continue;
                        }
                        let koff = (bi * tk + j) * width + hi * dh;
                        for c in 0..dh {
                            gq[qoff + c] += ds * kd[koff + c];
                            gk[koff + c] += ds * qd[qoff + c];
                        }
                    }
                }
            }
        }
        vec![(q, gq), (k, gk), (v, gv)]
    }
}

fn visible_keys(spec: &AttentionSpec, batch: usize, query: usize) -> usize {
    let valid = spec.key_lengths[batch];
    if spec.causal {
        valid.min(query + 1)
    } else {
        valid
    }
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

pub fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Sums a full-size gradient down to a scalar when the operand was broadcast.
fn reduce_to<T: Scalar>(g: &[T], numel: usize) -> Vec<T> {
    if numel == g.len() {
        g.to_vec()
    } else {
        vec![g.iter().copied().sum()]
    }
}
