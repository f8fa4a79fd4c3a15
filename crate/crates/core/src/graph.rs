//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its value and
//! enough context to push gradients back to its inputs. Parameters are
//! borrowed, so building a graph per sample does not copy model weights.

use std::borrow::Cow;

use crate::tensor::{gemm_into, matmul, matmul_nt, matmul_tn, Tensor, View};

const LN_EPS: f64 = 1e-5;
const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        rstd: Vec<f64>,
    },
    Attention {
        qkv: Var,
        heads: usize,
        probs: Vec<Tensor>,
    },
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    Gather(Var, Vec<usize>),
    Mse(Var, Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Tensor,
        count: usize,
    },
    Cosine(Var, Var),
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, value: Cow<'a, Tensor>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: &'a Tensor) -> Var {
        self.push(Cow::Borrowed(t), Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: &'a Tensor) -> Var {
        self.push(Cow::Borrowed(t), Op::Leaf, false)
    }

    /// Owned leaf; `needs_grad` makes it a differentiation target.
    pub fn input(&mut self, t: Tensor, needs_grad: bool) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, needs_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = matmul(self.value(a), self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(Cow::Owned(v), Op::MatMul(a, b), ng)
    }

    /// `x + bias`, bias broadcast over rows.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Var {
        let b = self.value(bias);
        assert_eq!(b.rows(), 1);
        assert_eq!(b.cols(), self.value(x).cols(), "bias width");
        let mut v = self.value(x).clone();
        let bd = b.data().to_vec();
        for r in 0..v.rows() {
            for (o, bb) in v.row_mut(r).iter_mut().zip(&bd) {
                *o += *bb;
            }
        }
        let ng = self.ng(x) || self.ng(bias);
        self.push(Cow::Owned(v), Op::AddBias(x, bias), ng)
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let h = self.matmul(x, w);
        self.add_bias(h, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "add shapes");
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(Cow::Owned(v), Op::Add(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "mul shapes");
        let mut v = self.value(a).clone();
        for (x, y) in v.data_mut().iter_mut().zip(self.value(b).data()) {
            *x *= *y;
        }
        let ng = self.ng(a) || self.ng(b);
        self.push(Cow::Owned(v), Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let mut v = self.value(a).clone();
        v.scale_assign(s);
        let ng = self.ng(a);
        self.push(Cow::Owned(v), Op::Scale(a, s), ng)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for x in v.data_mut() {
            *x = gelu(*x);
        }
        let ng = self.ng(a);
        self.push(Cow::Owned(v), Op::Gelu(a), ng)
    }

    /// Row-wise layer normalization with affine parameters of shape 1×n.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (rows, n) = xv.shape();
        let mut xhat = Tensor::zeros(rows, n);
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd.push(rs);
            for (o, v) in xhat.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * rs;
            }
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut out = xhat.clone();
        for r in 0..rows {
            for ((o, gg), bb) in out.row_mut(r).iter_mut().zip(g).zip(b) {
                *o = *o * gg + bb;
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(
            Cow::Owned(out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            ng,
        )
    }

    /// Multi-head scaled dot-product self-attention over a packed `[Q | K | V]`
    /// matrix of shape T×3H. Returns the concatenated head outputs (T×H).
    pub fn attention(&mut self, qkv: Var, heads: usize, causal: bool) -> Var {
        let src = self.value(qkv);
        let t = src.rows();
        assert_eq!(src.cols() % 3, 0, "packed qkv width");
        let h = src.cols() / 3;
        assert_eq!(h % heads, 0, "head split");
        let dh = h / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Tensor::zeros(t, h);
        let mut probs = Vec::with_capacity(heads);
        for head in 0..heads {
            let q = View::cols_of(src, head * dh, dh);
            let k = View::cols_of(src, h + head * dh, dh);
            let v = View::cols_of(src, 2 * h + head * dh, dh);
            let mut s = Tensor::zeros(t, t);
            gemm_into(scale, q, k.t(), 0.0, s.data_mut(), 0, t);
            for i in 0..t {
                let row = s.row_mut(i);
                let lim = if causal { i + 1 } else { t };
                let max = row[..lim].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for x in row[..lim].iter_mut() {
                    *x = (*x - max).exp();
                    sum += *x;
                }
                for x in row[..lim].iter_mut() {
                    *x /= sum;
                }
                for x in row[lim..].iter_mut() {
                    *x = 0.0;
                }
            }
            gemm_into(1.0, View::of(&s), v, 0.0, out.data_mut(), head * dh, h);
            probs.push(s);
        }
        let ng = self.ng(qkv);
        self.push(Cow::Owned(out), Op::Attention { qkv, heads, probs }, ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let v = self.value(*p);
            assert_eq!(v.cols(), cols, "concat_rows widths");
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let ng = parts.iter().any(|p| self.ng(*p));
        self.push(
            Cow::Owned(Tensor::from_vec(rows, cols, data)),
            Op::ConcatRows(parts.to_vec()),
            ng,
        )
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let v = self.value(x).slice_rows(start, len);
        let ng = self.ng(x);
        self.push(Cow::Owned(v), Op::SliceRows(x, start), ng)
    }

    /// Rows of `table` selected by `idx`.
    pub fn gather(&mut self, table: Var, idx: &[usize]) -> Var {
        let tv = self.value(table);
        let cols = tv.cols();
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            data.extend_from_slice(tv.row(i));
        }
        let ng = self.ng(table);
        self.push(
            Cow::Owned(Tensor::from_vec(idx.len(), cols, data)),
            Op::Gather(table, idx.to_vec()),
            ng,
        )
    }

    /// Mean squared error over all components.
    pub fn mse(&mut self, pred: Var, target: Var) -> Var {
        let p = self.value(pred);
        let t = self.value(target);
        assert_eq!(p.shape(), t.shape(), "mse shapes");
        let n = p.len() as f64;
        let s = p
            .data()
            .iter()
            .zip(t.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n;
        let ng = self.ng(pred) || self.ng(target);
        self.push(Cow::Owned(Tensor::scalar(s)), Op::Mse(pred, target), ng)
    }

    /// Mean next-token cross-entropy over rows whose target is `Some`.
    /// Panics if no row carries a target.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.rows(), targets.len(), "one target slot per row");
        let count = targets.iter().filter(|t| t.is_some()).count();
        assert!(count > 0, "cross_entropy without targets");
        let mut probs = Tensor::zeros(lv.rows(), lv.cols());
        let mut total = 0.0;
        for (r, tgt) in targets.iter().enumerate() {
            let Some(tgt) = *tgt else { continue };
            let row = lv.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|x| (x - max).exp()).sum();
            let lse = max + sum.ln();
            total += lse - row[tgt];
            for (p, x) in probs.row_mut(r).iter_mut().zip(row) {
                *p = (x - lse).exp();
            }
        }
        let loss = total / count as f64;
        let ng = self.ng(logits);
        self.push(
            Cow::Owned(Tensor::scalar(loss)),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
            ng,
        )
    }

    /// Cosine similarity between two equally shaped tensors, flattened.
    pub fn cosine(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        assert_eq!(av.len(), bv.len(), "cosine lengths");
        let s = cos_parts(av.data(), bv.data()).0;
        let ng = self.ng(a) || self.ng(b);
        self.push(Cow::Owned(Tensor::scalar(s)), Op::Cosine(a, b), ng)
    }

    /// Gradients of the scalar `root` with respect to every node that needs one.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).len(), 1, "backward from a non-scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(1.0));
        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.ng(*a) {
                    self.acc(grads, *a, matmul_nt(g, self.value(*b)));
                }
                if self.ng(*b) {
                    self.acc(grads, *b, matmul_tn(self.value(*a), g));
                }
            }
            Op::AddBias(x, b) => {
                if self.ng(*b) {
                    let mut gb = Tensor::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, v) in gb.data_mut().iter_mut().zip(g.row(r)) {
                            *o += *v;
                        }
                    }
                    self.acc(grads, *b, gb);
                }
                if self.ng(*x) {
                    self.acc(grads, *x, g.clone());
                }
            }
            Op::Add(a, b) => {
                if self.ng(*a) {
                    self.acc(grads, *a, g.clone());
                }
                if self.ng(*b) {
                    self.acc(grads, *b, g.clone());
                }
            }
            Op::Mul(a, b) => {
                for (this, other) in [(*a, *b), (*b, *a)] {
                    if self.ng(this) {
                        let mut d = g.clone();
                        for (x, y) in d.data_mut().iter_mut().zip(self.value(other).data()) {
                            *x *= *y;
                        }
                        self.acc(grads, this, d);
                    }
                }
            }
            Op::Scale(a, s) => {
                let mut d = g.clone();
                d.scale_assign(*s);
                self.acc(grads, *a, d);
            }
            Op::Gelu(a) => {
                let mut d = g.clone();
                for (x, inp) in d.data_mut().iter_mut().zip(self.value(*a).data()) {
                    *x *= gelu_grad(*inp);
                }
                self.acc(grads, *a, d);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (rows, n) = xhat.shape();
                if self.ng(*gamma) || self.ng(*beta) {
                    let mut gg = Tensor::zeros(1, n);
                    let mut gb = Tensor::zeros(1, n);
                    for r in 0..rows {
                        for c in 0..n {
                            gg.data_mut()[c] += g.get(r, c) * xhat.get(r, c);
                            gb.data_mut()[c] += g.get(r, c);
                        }
                    }
                    self.acc(grads, *gamma, gg);
                    self.acc(grads, *beta, gb);
                }
                if self.ng(*x) {
                    let gamma_v = self.value(*gamma).data();
                    let mut dx = Tensor::zeros(rows, n);
                    for r in 0..rows {
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for c in 0..n {
                            let d = g.get(r, c) * gamma_v[c];
                            mean_d += d;
                            mean_dx += d * xhat.get(r, c);
                        }
                        mean_d /= n as f64;
                        mean_dx /= n as f64;
                        for c in 0..n {
                            let d = g.get(r, c) * gamma_v[c];
                            dx.set(r, c, rstd[r] * (d - mean_d - xhat.get(r, c) * mean_dx));
                        }
                    }
                    self.acc(grads, *x, dx);
                }
            }
            Op::Attention { qkv, heads, probs } => {
                let src = self.value(*qkv);
                let t = src.rows();
                let h = src.cols() / 3;
                let dh = h / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut dqkv = Tensor::zeros(t, 3 * h);
                let w = 3 * h;
                for (head, p) in probs.iter().enumerate() {
                    let q = View::cols_of(src, head * dh, dh);
                    let k = View::cols_of(src, h + head * dh, dh);
                    let v = View::cols_of(src, 2 * h + head * dh, dh);
                    let go = View::cols_of(g, head * dh, dh);
                    // dV = Pᵀ dO
                    gemm_into(1.0, View::of(p).t(), go, 0.0, dqkv.data_mut(), 2 * h + head * dh, w);
                    // dP = dO Vᵀ
                    let mut dp = Tensor::zeros(t, t);
                    gemm_into(1.0, go, v.t(), 0.0, dp.data_mut(), 0, t);
                    for i in 0..t {
                        let prow = p.row(i);
                        let drow = dp.row_mut(i);
                        let s: f64 = prow.iter().zip(drow.iter()).map(|(a, b)| a * b).sum();
                        for (d, pp) in drow.iter_mut().zip(prow) {
                            *d = pp * (*d - s) * scale;
                        }
                    }
                    gemm_into(1.0, View::of(&dp), k, 0.0, dqkv.data_mut(), head * dh, w);
                    gemm_into(1.0, View::of(&dp).t(), q, 0.0, dqkv.data_mut(), h + head * dh, w);
                }
                self.acc(grads, *qkv, dqkv);
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for p in parts {
                    let n = self.value(*p).rows();
                    if self.ng(*p) {
                        self.acc(grads, *p, g.slice_rows(start, n));
                    }
                    start += n;
                }
            }
            Op::SliceRows(x, start) => {
                let xv = self.value(*x);
                let mut d = Tensor::zeros(xv.rows(), xv.cols());
                for r in 0..g.rows() {
                    d.row_mut(start + r).copy_from_slice(g.row(r));
                }
                self.acc(grads, *x, d);
            }
            Op::Gather(table, idx) => {
                let tv = self.value(*table);
                let mut d = Tensor::zeros(tv.rows(), tv.cols());
                for (k, &i) in idx.iter().enumerate() {
                    for (o, v) in d.row_mut(i).iter_mut().zip(g.row(k)) {
                        *o += *v;
                    }
                }
                self.acc(grads, *table, d);
            }
            Op::Mse(pred, target) => {
                let up = g.item();
                let p = self.value(*pred);
                let t = self.value(*target);
                let n = p.len() as f64;
                let mut d = p.clone();
                for (x, y) in d.data_mut().iter_mut().zip(t.data()) {
                    *x = up * 2.0 * (*x - *y) / n;
                }
                if self.ng(*target) {
                    let mut dt = d.clone();
                    dt.scale_assign(-1.0);
                    self.acc(grads, *target, dt);
                }
                self.acc(grads, *pred, d);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                let up = g.item() / *count as f64;
                let mut d = Tensor::zeros(probs.rows(), probs.cols());
                for (r, tgt) in targets.iter().enumerate() {
                    let Some(tgt) = *tgt else { continue };
                    for (o, p) in d.row_mut(r).iter_mut().zip(probs.row(r)) {
                        *o = up * p;
                    }
                    d.row_mut(r)[tgt] -= up;
                }
                self.acc(grads, *logits, d);
            }
            Op::Cosine(a, b) => {
                let up = g.item();
                let av = self.value(*a);
                let bv = self.value(*b);
                let (s, na, nb) = cos_parts(av.data(), bv.data());
                for (this, this_v, this_n, other_v) in [(*a, av, na, bv), (*b, bv, nb, av)] {
                    if !self.ng(this) {
                        continue;
                    }
                    let mut d = this_v.clone();
                    if na > 0.0 && nb > 0.0 {
                        for (x, (tv, ov)) in d
                            .data_mut()
                            .iter_mut()
                            .zip(this_v.data().iter().zip(other_v.data()))
                        {
                            *x = up * (ov / (na * nb) - s * tv / (this_n * this_n));
                        }
                    } else {
                        d.scale_assign(0.0);
                    }
                    self.acc(grads, this, d);
                }
            }
        }
    }
}

fn cos_parts(a: &[f64], b: &[f64]) -> (f64, f64, f64) {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return (0.0, na, nb);
    }
    let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    (d / (na * nb), na, nb)
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
    let th = u.tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central-difference check of d(root)/d(input) for a graph builder.
    fn check<F>(inputs: &[Tensor], build: F)
    where
        F: Fn(&mut Graph, &[Var]) -> Var,
    {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t)).collect();
        let root = build(&mut g, &vars);
        let grads = g.backward(root);
        let h = 1e-6;
        for (k, t) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[k]).cloned().unwrap_or_else(|| Tensor::zeros(t.rows(), t.cols()));
            for i in 0..t.len() {
                let eval = |delta: f64| {
                    let mut perturbed: Vec<Tensor> = inputs.to_vec();
                    perturbed[k].data_mut()[i] += delta;
                    let mut g = Graph::new();
                    let vars: Vec<Var> = perturbed.iter().map(|t| g.param(t)).collect();
                    let r = build(&mut g, &vars);
                    g.value(r).item()
                };
                let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                let a = analytic.data()[i];
                let denom = a.abs().max(numeric.abs()).max(1e-6);
                assert!(
                    (a - numeric).abs() / denom < 1e-5,
                    "input {k} entry {i}: analytic {a} numeric {numeric}"
                );
            }
        }
    }

    fn rand(r: usize, c: usize, seed: u64) -> Tensor {
        Tensor::randn(r, c, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn linear_gelu_mse() {
        let x = rand(3, 4, 1);
        let w = rand(4, 5, 2);
        let b = rand(1, 5, 3);
        let t = rand(3, 5, 4);
        check(&[x, w, b, t], |g, v| {
            let h = g.linear(v[0], v[1], v[2]);
            let a = g.gelu(h);
            g.mse(a, v[3])
        });
    }

    #[test]
    fn layer_norm_grads() {
        let x = rand(3, 6, 5);
        let gm = rand(1, 6, 6);
        let bt = rand(1, 6, 7);
        let t = rand(3, 6, 8);
        check(&[x, gm, bt, t], |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2]);
            g.mse(y, v[3])
        });
    }

    #[test]
    fn attention_grads_both_modes() {
        for causal in [false, true] {
            let qkv = rand(5, 12, 9);
            let t = rand(5, 4, 10);
            check(&[qkv, t], |g, v| {
                let o = g.attention(v[0], 2, causal);
                g.mse(o, v[1])
            });
        }
    }

    #[test]
    fn structural_ops_and_cosine() {
        let a = rand(2, 3, 11);
        let b = rand(1, 3, 12);
        let table = rand(4, 3, 13);
        let t = rand(1, 3, 14);
        check(&[a, b, table, t], |g, v| {
            let c = g.concat_rows(&[v[1], v[0]]);
            let p = g.gather(v[2], &[3, 0, 3]);
            let s = g.add(c, p);
            let m = g.mul(s, p);
            let r = g.slice_rows(m, 1, 1);
            let sc = g.scale(r, 0.7);
            g.cosine(sc, v[3])
        });
    }

    #[test]
    fn cross_entropy_grads_and_mask() {
        let logits = rand(4, 6, 15);
        let targets = [None, Some(2), None, Some(5)];
        check(&[logits.clone()], |g, v| g.cross_entropy(v[0], &targets));
        let mut g = Graph::new();
        let l = g.param(&logits);
        let loss = g.cross_entropy(l, &targets);
        let grads = g.backward(loss);
        let d = grads.get(l).unwrap();
        assert!(d.row(0).iter().all(|x| *x == 0.0));
        assert!(d.row(2).iter().all(|x| *x == 0.0));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let x = rand(2, 2, 16);
        let w = rand(2, 2, 17);
        let t = rand(2, 2, 18);
        let mut g = Graph::new();
        let xv = g.constant(&x);
        let wv = g.param(&w);
        let tv = g.constant(&t);
        let y = g.matmul(xv, wv);
        let l = g.mse(y, tv);
        let grads = g.backward(l);
        assert!(grads.get(xv).is_none());
        assert!(grads.get(wv).is_some());
    }
}
