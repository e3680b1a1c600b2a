//! Dense f64 tensors with a tape-based reverse-mode autodiff graph.
//!
//! A [`Graph`] owns every node. Parameters are created first and survive
//! [`Graph::truncate`], which drops the per-step activations while keeping the
//! accumulated parameter gradients.

pub mod kernels;

use rand::Rng;

use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.contains(&0) || numel != data.len() {
            return Err(Error::Shape { op: "tensor", lhs: shape, rhs: vec![data.len()] });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        Self { shape: shape.to_vec(), data: vec![v; shape.iter().product()] }
    }

    pub fn scalar(v: f64) -> Self {
        Self { shape: vec![1], data: vec![v] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Size of the last axis.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().unwrap()
    }

    /// Number of rows when viewed as `[numel / last_dim, last_dim]`.
    pub fn rows(&self) -> usize {
        self.numel() / self.last_dim()
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let d = self.last_dim();
        &self.data[r * d..(r + 1) * d]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    fn add_assign(&mut self, other: &Tensor) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    BatchMatMul { a: Var, b: Var, transpose_b: bool },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Permute(Var, Vec<usize>),
    Concat(Var, Var),
    Slice { x: Var, start: usize },
    Gather { table: Var, ids: Vec<usize> },
    Reshape(Var),
    Softmax(Var),
    AttentionMask(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Gelu(Var),
    Dropout { x: Var, mask: Vec<f64> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
    Sum(Var),
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

pub const LAYER_NORM_EPS: f64 = 1e-12;
/// Added to attention scores of padded keys; `exp` of it underflows to 0.
pub const MASK_FILL: f64 = -1e9;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape { op, lhs: a.shape.clone(), rhs: b.shape.clone() }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn permuted_shape(shape: &[usize], perm: &[usize]) -> Vec<usize> {
    perm.iter().map(|&p| shape[p]).collect()
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn permute_data(data: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let out_shape = permuted_shape(shape, perm);
    let in_strides = strides(shape);
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; out_shape.len()];
    for _ in 0..data.len() {
        let off: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
        out.push(data[off]);
        for ax in (0..idx.len()).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    out
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node created at or after `len`.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad, grad: None });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: &[Var]) -> bool {
        v.iter().any(|x| self.nodes[x.0].requires_grad)
    }

    /// A trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// A leaf that receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn value_mut(&mut self, v: Var) -> &mut Tensor {
        &mut self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn grad_mut(&mut self, v: Var) -> Option<&mut Tensor> {
        self.nodes[v.0].grad.as_mut()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// `x[.., k] · w[k, n] -> [.., n]`.
    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        let (a, b) = (self.value(x), self.value(w));
        let k = a.last_dim();
        if b.shape.len() != 2 || b.shape[0] != k {
            return Err(shape_err("matmul", a, b));
        }
        let (m, n) = (a.rows(), b.shape[1]);
        let mut out = vec![0.0; m * n];
        kernels::matmul_nn(&a.data, &b.data, m, k, n, &mut out);
        let mut shape = a.shape.clone();
        *shape.last_mut().unwrap() = n;
        let rg = self.rg(&[x, w]);
        Ok(self.push(Tensor { shape, data: out }, Op::MatMul(x, w), rg))
    }

    /// `a[B, m, k] · b[B, k, n]`, or `a · bᵀ` with `b[B, n, k]`.
    pub fn batch_matmul(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape.len() != 3 || tb.shape.len() != 3 || ta.shape[0] != tb.shape[0] {
            return Err(shape_err("batch_matmul", ta, tb));
        }
        let (bs, m, k) = (ta.shape[0], ta.shape[1], ta.shape[2]);
        let (kb, n) = if transpose_b { (tb.shape[2], tb.shape[1]) } else { (tb.shape[1], tb.shape[2]) };
        if kb != k {
            return Err(shape_err("batch_matmul", ta, tb));
        }
        let mut out = vec![0.0; bs * m * n];
        for i in 0..bs {
            let (sa, sb, so) = (
                &ta.data[i * m * k..(i + 1) * m * k],
                &tb.data[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
            );
            if transpose_b {
                kernels::matmul_nt(sa, sb, m, k, n, so);
            } else {
                kernels::matmul_nn(sa, sb, m, k, n, so);
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor { shape: vec![bs, m, n], data: out }, Op::BatchMatMul { a, b, transpose_b }, rg))
    }

    /// Elementwise sum; `b` may match a suffix of `a`'s shape and is then
    /// broadcast over the leading axes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if tb.shape.len() > ta.shape.len() || ta.shape[ta.shape.len() - tb.shape.len()..] != tb.shape[..] {
            return Err(shape_err("add", ta, tb));
        }
        let nb = tb.numel();
        let data = ta.data.iter().enumerate().map(|(i, x)| x + tb.data[i % nb]).collect();
        let shape = ta.shape.clone();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor { shape, data }, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape != tb.shape {
            return Err(shape_err("mul", ta, tb));
        }
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x * y).collect();
        let shape = ta.shape.clone();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor { shape, data }, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let t = self.value(x);
        let out = Tensor { shape: t.shape.clone(), data: t.data.iter().map(|v| v * s).collect() };
        let rg = self.rg(&[x]);
        self.push(out, Op::Scale(x, s), rg)
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let mut seen = perm.to_vec();
        seen.sort_unstable();
        if seen != (0..t.shape.len()).collect::<Vec<_>>() {
            return Err(Error::Shape { op: "permute", lhs: t.shape.clone(), rhs: perm.to_vec() });
        }
        let out = Tensor { shape: permuted_shape(&t.shape, perm), data: permute_data(&t.data, &t.shape, perm) };
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Permute(x, perm.to_vec()), rg))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.value(x).shape.len();
        if r < 2 {
            return Err(Error::Shape { op: "transpose", lhs: self.value(x).shape.clone(), rhs: vec![] });
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(x, &perm)
    }

    /// Concatenates along the last axis.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let r = ta.shape.len();
        if tb.shape.len() != r || ta.shape[..r - 1] != tb.shape[..r - 1] {
            return Err(shape_err("concat", ta, tb));
        }
        let (p, q) = (ta.last_dim(), tb.last_dim());
        let mut data = Vec::with_capacity(ta.numel() + tb.numel());
        for i in 0..ta.rows() {
            data.extend_from_slice(&ta.data[i * p..(i + 1) * p]);
            data.extend_from_slice(&tb.data[i * q..(i + 1) * q]);
        }
        let mut shape = ta.shape.clone();
        shape[r - 1] = p + q;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor { shape, data }, Op::Concat(a, b), rg))
    }

    /// `x[.., start..end]` along the last axis.
    pub fn slice(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(x);
        let d = t.last_dim();
        if start >= end || end > d {
            return Err(Error::OutOfRange { op: "slice", index: end, size: d });
        }
        let w = end - start;
        let mut data = Vec::with_capacity(t.rows() * w);
        for i in 0..t.rows() {
            data.extend_from_slice(&t.data[i * d + start..i * d + end]);
        }
        let mut shape = t.shape.clone();
        *shape.last_mut().unwrap() = w;
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor { shape, data }, Op::Slice { x, start }, rg))
    }

    /// Rows of `table[R, D]` selected by `ids`, giving `[ids.len(), D]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.shape.len() != 2 || ids.is_empty() {
            return Err(Error::Shape { op: "gather", lhs: t.shape.clone(), rhs: vec![ids.len()] });
        }
        let (r, d) = (t.shape[0], t.shape[1]);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            if i >= r {
                return Err(Error::OutOfRange { op: "gather", index: i, size: r });
            }
            data.extend_from_slice(&t.data[i * d..(i + 1) * d]);
        }
        let rg = self.rg(&[table]);
        Ok(self.push(Tensor { shape: vec![ids.len(), d], data }, Op::Gather { table, ids: ids.to_vec() }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if shape.iter().product::<usize>() != t.numel() || shape.contains(&0) {
            return Err(Error::Shape { op: "reshape", lhs: t.shape.clone(), rhs: shape.to_vec() });
        }
        let out = Tensor { shape: shape.to_vec(), data: t.data.clone() };
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let d = t.last_dim();
        let mut data = t.data.clone();
        for row in data.chunks_mut(d) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let shape = t.shape.clone();
        let rg = self.rg(&[x]);
        self.push(Tensor { shape, data }, Op::Softmax(x), rg)
    }

    /// Adds [`MASK_FILL`] to attention scores `[B·heads, S, S]` at key
    /// positions where `key_padding[b·S + j]` is set.
    pub fn attention_mask(&mut self, scores: Var, key_padding: &[bool], heads: usize) -> Result<Var> {
        let t = self.value(scores);
        let s = t.last_dim();
        if t.shape.len() != 3 || t.shape[1] != s || t.shape[0] * s != key_padding.len() * heads {
            return Err(Error::Shape {
                op: "attention_mask",
                lhs: t.shape.clone(),
                rhs: vec![key_padding.len(), heads],
            });
        }
        let mut data = t.data.clone();
        for (bh, block) in data.chunks_mut(s * s).enumerate() {
            let pad = &key_padding[(bh / heads) * s..(bh / heads + 1) * s];
            for row in block.chunks_mut(s) {
                for (v, &p) in row.iter_mut().zip(pad) {
                    if p {
                        *v += MASK_FILL;
                    }
                }
            }
        }
        let shape = t.shape.clone();
        let rg = self.rg(&[scores]);
        Ok(self.push(Tensor { shape, data }, Op::AttentionMask(scores), rg))
    }

    /// Layer normalisation over the last axis with gain and bias `[D]`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (t, g, b) = (self.value(x), self.value(gain), self.value(bias));
        let d = t.last_dim();
        if g.shape != [d] || b.shape != [d] {
            return Err(shape_err("layer_norm", t, g));
        }
        let rows = t.rows();
        let mut xhat = vec![0.0; t.numel()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; t.numel()];
        for r in 0..rows {
            let row = &t.data[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g.data[j] + b.data[j];
            }
        }
        let shape = t.shape.clone();
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(Tensor { shape, data: out }, Op::LayerNorm { x, gain, bias, xhat, rstd }, rg))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = Tensor { shape: t.shape.clone(), data: t.data.iter().map(|&v| gelu(v)).collect() };
        let rg = self.rg(&[x]);
        self.push(out, Op::Gelu(x), rg)
    }

    /// Inverted dropout. With `p == 0` the input is returned unchanged.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Var {
        if p <= 0.0 {
            return x;
        }
        let keep = 1.0 / (1.0 - p);
        let t = self.value(x);
        let mask: Vec<f64> = (0..t.numel()).map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep }).collect();
        let out = Tensor { shape: t.shape.clone(), data: t.data.iter().zip(&mask).map(|(v, m)| v * m).collect() };
        let rg = self.rg(&[x]);
        self.push(out, Op::Dropout { x, mask }, rg)
    }

    /// Mean cross-entropy of `logits[N, V]` against `targets`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let v = t.last_dim();
        if t.shape.len() != 2 || t.shape[0] != targets.len() || targets.is_empty() {
            return Err(Error::Shape { op: "cross_entropy", lhs: t.shape.clone(), rhs: vec![targets.len()] });
        }
        if let Some(&bad) = targets.iter().find(|&&y| y >= v) {
            return Err(Error::OutOfRange { op: "cross_entropy", index: bad, size: v });
        }
        let mut probs = t.data.clone();
        let mut loss = 0.0;
        for (row, &y) in probs.chunks_mut(v).zip(targets) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
            loss += lse - row[y];
            for z in row.iter_mut() {
                *z = (*z - lse).exp();
            }
        }
        loss /= targets.len() as f64;
        let rg = self.rg(&[logits]);
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, targets: targets.to_vec(), probs }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Back-propagates from the scalar `loss`, adding into the stored
    /// gradients of every trainable leaf. Gradients accumulate across calls
    /// until [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Shape { op: "backward", lhs: self.value(loss).shape.clone(), rhs: vec![1] });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(acc) => acc.add_assign(&g),
                    None => node.grad = Some(g),
                }
                continue;
            }
            for (v, contrib) in self.local_grads(i, &g) {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&contrib),
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        for (i, n) in self.nodes.iter().enumerate() {
            if let Some(g) = &n.grad {
                if g.data.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFiniteGradient(format!("node {i}")));
                }
            }
        }
        Ok(())
    }

    fn local_grads(&self, i: usize, g: &Tensor) -> Vec<(Var, Tensor)> {
        let node = &self.nodes[i];
        let like = |v: Var, data: Vec<f64>| Tensor { shape: self.value(v).shape.clone(), data };
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::MatMul(x, w) => {
                let (a, b) = (self.value(*x), self.value(*w));
                let (m, k, n) = (a.rows(), a.last_dim(), b.shape[1]);
                let mut ga = vec![0.0; m * k];
                kernels::matmul_nt(&g.data, &b.data, m, n, k, &mut ga);
                let mut gb = vec![0.0; k * n];
                kernels::matmul_tn(&a.data, &g.data, m, k, n, &mut gb);
                vec![(*x, like(*x, ga)), (*w, like(*w, gb))]
            }
            Op::BatchMatMul { a, b, transpose_b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (bs, m, k) = (ta.shape[0], ta.shape[1], ta.shape[2]);
                let n = g.shape[2];
                let mut ga = vec![0.0; bs * m * k];
                let mut gb = vec![0.0; bs * k * n];
                for i in 0..bs {
                    let sa = &ta.data[i * m * k..(i + 1) * m * k];
                    let sb = &tb.data[i * k * n..(i + 1) * k * n];
                    let sg = &g.data[i * m * n..(i + 1) * m * n];
                    let oa = &mut ga[i * m * k..(i + 1) * m * k];
                    let ob = &mut gb[i * k * n..(i + 1) * k * n];
                    if *transpose_b {
                        // C = A·Bᵀ: dA = dC·B, dB = dCᵀ·A
                        kernels::matmul_nn(sg, sb, m, n, k, oa);
                        kernels::matmul_tn(sg, sa, m, n, k, ob);
                    } else {
                        kernels::matmul_nt(sg, sb, m, n, k, oa);
                        kernels::matmul_tn(sa, sg, m, k, n, ob);
                    }
                }
                vec![(*a, like(*a, ga)), (*b, like(*b, gb))]
            }
            Op::Add(a, b) => {
                let nb = self.value(*b).numel();
                let mut gb = vec![0.0; nb];
                for (i, v) in g.data.iter().enumerate() {
                    gb[i % nb] += v;
                }
                vec![(*a, g.clone()), (*b, like(*b, gb))]
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let ga = g.data.iter().zip(&tb.data).map(|(x, y)| x * y).collect();
                let gb = g.data.iter().zip(&ta.data).map(|(x, y)| x * y).collect();
                vec![(*a, like(*a, ga)), (*b, like(*b, gb))]
            }
            Op::Scale(x, s) => vec![(*x, like(*x, g.data.iter().map(|v| v * s).collect()))],
            Op::Permute(x, perm) => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                vec![(*x, like(*x, permute_data(&g.data, &g.shape, &inv)))]
            }
            Op::Concat(a, b) => {
                let (p, q) = (self.value(*a).last_dim(), self.value(*b).last_dim());
                let mut ga = Vec::with_capacity(self.value(*a).numel());
                let mut gb = Vec::with_capacity(self.value(*b).numel());
                for row in g.data.chunks(p + q) {
                    ga.extend_from_slice(&row[..p]);
                    gb.extend_from_slice(&row[p..]);
                }
                vec![(*a, like(*a, ga)), (*b, like(*b, gb))]
            }
            Op::Slice { x, start } => {
                let t = self.value(*x);
                let (d, w) = (t.last_dim(), g.last_dim());
                let mut gx = vec![0.0; t.numel()];
                for (r, row) in g.data.chunks(w).enumerate() {
                    gx[r * d + start..r * d + start + w].copy_from_slice(row);
                }
                vec![(*x, like(*x, gx))]
            }
            Op::Gather { table, ids } => {
                let t = self.value(*table);
                let d = t.shape[1];
                let mut gt = vec![0.0; t.numel()];
                for (row, &id) in g.data.chunks(d).zip(ids) {
                    for (o, v) in gt[id * d..(id + 1) * d].iter_mut().zip(row) {
                        *o += v;
                    }
                }
                vec![(*table, like(*table, gt))]
            }
            Op::Reshape(x) => vec![(*x, like(*x, g.data.clone()))],
            Op::Softmax(x) => {
                let y = &node.value;
                let d = y.last_dim();
                let mut gx = vec![0.0; y.numel()];
                for r in 0..y.rows() {
                    let (yr, gr) = (&y.data[r * d..(r + 1) * d], &g.data[r * d..(r + 1) * d]);
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        gx[r * d + j] = yr[j] * (gr[j] - dot);
                    }
                }
                vec![(*x, like(*x, gx))]
            }
            Op::AttentionMask(x) => vec![(*x, g.clone())],
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let gam = &self.value(*gain).data;
                let d = gam.len();
                let mut gx = vec![0.0; xhat.len()];
                let mut gg = vec![0.0; d];
                let mut gbias = vec![0.0; d];
                let mut dxhat = vec![0.0; d];
                for r in 0..rstd.len() {
                    let gr = &g.data[r * d..(r + 1) * d];
                    let hr = &xhat[r * d..(r + 1) * d];
                    let (mut m1, mut m2) = (0.0, 0.0);
                    for j in 0..d {
                        dxhat[j] = gr[j] * gam[j];
                        m1 += dxhat[j];
                        m2 += dxhat[j] * hr[j];
                        gg[j] += gr[j] * hr[j];
                        gbias[j] += gr[j];
                    }
                    m1 /= d as f64;
                    m2 /= d as f64;
                    for j in 0..d {
                        gx[r * d + j] = rstd[r] * (dxhat[j] - m1 - hr[j] * m2);
                    }
                }
                vec![(*x, like(*x, gx)), (*gain, like(*gain, gg)), (*bias, like(*bias, gbias))]
            }
            Op::Gelu(x) => {
                let t = self.value(*x);
                let gx = t.data.iter().zip(&g.data).map(|(v, d)| d * gelu_grad(*v)).collect();
                vec![(*x, like(*x, gx))]
            }
            Op::Dropout { x, mask } => {
                vec![(*x, like(*x, g.data.iter().zip(mask).map(|(a, b)| a * b).collect()))]
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let v = self.value(*logits).last_dim();
                let scale = g.item() / targets.len() as f64;
                let mut gx = probs.clone();
                for (r, &y) in targets.iter().enumerate() {
                    gx[r * v + y] -= 1.0;
                }
                for z in &mut gx {
                    *z *= scale;
                }
                vec![(*logits, like(*logits, gx))]
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                vec![(*x, like(*x, vec![g.item(); n]))]
            }
        }
    }
}

/// Report of a finite-difference gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub checked: usize,
}

/// Relative error `|a - n| / max(|a|, |n|, floor)`. The floor keeps
/// near-zero gradients from amplifying finite-difference rounding.
pub fn rel_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Default denominator floor for [`grad_check`].
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// Above this many elements per input a random subsample is checked.
pub const GRAD_CHECK_FULL_LIMIT: usize = 10_000;

/// Compares analytic gradients of the scalar `f` against central differences
/// for every element of every input (or a seeded subsample of large inputs).
pub fn grad_check<F>(f: F, inputs: &[Tensor], h: f64, seed: u64) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let mut rng = crate::rng::stream(seed, &[]);
    let mut worst = 0.0f64;
    let mut checked = 0;
    let mut vals = inputs.to_vec();
    for (p, v) in vars.iter().enumerate() {
        let analytic = g.grad(*v).cloned().unwrap_or_else(|| Tensor::zeros(inputs[p].shape()));
        let n = inputs[p].numel();
        let idx: Vec<usize> = if n > GRAD_CHECK_FULL_LIMIT {
            rand::seq::index::sample(&mut rng, n, GRAD_CHECK_FULL_LIMIT).into_vec()
        } else {
            (0..n).collect()
        };
        for i in idx {
            let x0 = inputs[p].data[i];
            vals[p].data[i] = x0 + h;
            let up = eval(&vals)?;
            vals[p].data[i] = x0 - h;
            let down = eval(&vals)?;
            vals[p].data[i] = x0;
            let numeric = (up - down) / (2.0 * h);
            worst = worst.max(rel_error(analytic.data[i], numeric, GRAD_CHECK_FLOOR));
            checked += 1;
        }
    }
    Ok(GradCheck { max_rel_error: worst, checked })
}
