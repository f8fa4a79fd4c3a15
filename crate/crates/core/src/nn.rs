//! Named parameter sets, transformer blocks, Adam and deterministic
//! data-parallel gradient accumulation.

use rand::Rng;
use rayon::prelude::*;

use crate::error::{ensure, Error, Result};
use crate::graph::{Gradients, Graph, Var};
use crate::tensor::Tensor;

/// Ordered, named collection of model tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) -> usize {
        self.names.push(name.into());
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, i: usize) -> &Tensor {
        &self.tensors[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.tensors[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Registers every tensor in `g`, trainable or not.
    pub fn bind<'a>(&'a self, g: &mut Graph<'a>, trainable: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| if trainable { g.param(t) } else { g.constant(t) })
            .collect()
    }

    /// Gradients for bound vars, zero-filled where none flowed.
    pub fn collect_grads(&self, vars: &[Var], grads: &mut Gradients) -> Vec<Tensor> {
        vars.iter()
            .zip(&self.tensors)
            .map(|(v, t)| grads.take(*v).unwrap_or_else(|| Tensor::zeros(t.rows(), t.cols())))
            .collect()
    }

    pub fn zeros_like(&self) -> Vec<Tensor> {
        self.tensors
            .iter()
            .map(|t| Tensor::zeros(t.rows(), t.cols()))
            .collect()
    }

    pub fn round_to_f32(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::round_to_f32);
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    /// Exact bit pattern of every value, for freeze and determinism checks.
    pub fn bits(&self) -> Vec<u64> {
        self.tensors
            .iter()
            .flat_map(|t| t.data().iter().map(|v| v.to_bits()))
            .collect()
    }
}

/// Indices of one pre-norm transformer block inside a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockLayout {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub w_qkv: usize,
    pub b_qkv: usize,
    pub w_o: usize,
    pub b_o: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub w_fc1: usize,
    pub b_fc1: usize,
    pub w_fc2: usize,
    pub b_fc2: usize,
}

impl BlockLayout {
    pub fn init<R: Rng>(
        params: &mut ParamSet,
        prefix: &str,
        width: usize,
        mlp_width: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        let mut add = |name: &str, t: Tensor| params.push(format!("{prefix}.{name}"), t);
        BlockLayout {
            ln1_g: add("ln1.gamma", Tensor::filled(1, width, 1.0)),
            ln1_b: add("ln1.beta", Tensor::zeros(1, width)),
            w_qkv: add("attn.qkv.weight", Tensor::randn(width, 3 * width, std, rng)),
            b_qkv: add("attn.qkv.bias", Tensor::zeros(1, 3 * width)),
            w_o: add("attn.out.weight", Tensor::randn(width, width, std, rng)),
            b_o: add("attn.out.bias", Tensor::zeros(1, width)),
            ln2_g: add("ln2.gamma", Tensor::filled(1, width, 1.0)),
            ln2_b: add("ln2.beta", Tensor::zeros(1, width)),
            w_fc1: add("mlp.fc1.weight", Tensor::randn(width, mlp_width, std, rng)),
            b_fc1: add("mlp.fc1.bias", Tensor::zeros(1, mlp_width)),
            w_fc2: add("mlp.fc2.weight", Tensor::randn(mlp_width, width, std, rng)),
            b_fc2: add("mlp.fc2.bias", Tensor::zeros(1, width)),
        }
    }

    /// `x + attn(ln1(x))`, then `+ mlp(ln2(·))`. `drop` masks, when given,
    /// multiply the attention and MLP branch outputs.
    pub fn forward(
        &self,
        g: &mut Graph<'_>,
        vars: &[Var],
        x: Var,
        heads: usize,
        causal: bool,
        drop: Option<(Var, Var)>,
    ) -> Var {
        let h = g.layer_norm(x, vars[self.ln1_g], vars[self.ln1_b]);
        let qkv = g.linear(h, vars[self.w_qkv], vars[self.b_qkv]);
        let a = g.attention(qkv, heads, causal);
        let mut a = g.linear(a, vars[self.w_o], vars[self.b_o]);
        if let Some((m, _)) = drop {
            a = g.mul(a, m);
        }
        let x = g.add(x, a);
        let h = g.layer_norm(x, vars[self.ln2_g], vars[self.ln2_b]);
        let h = g.linear(h, vars[self.w_fc1], vars[self.b_fc1]);
        let h = g.gelu(h);
        let mut h = g.linear(h, vars[self.w_fc2], vars[self.b_fc2]);
        if let Some((_, m)) = drop {
            h = g.mul(h, m);
        }
        g.add(x, h)
    }
}

/// Two linear maps with a GELU in between.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MlpLayout {
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

impl MlpLayout {
    pub fn init<R: Rng>(
        params: &mut ParamSet,
        prefix: &str,
        dims: [usize; 3],
        std: f64,
        rng: &mut R,
    ) -> Self {
        let [i, h, o] = dims;
        MlpLayout {
            w1: params.push(format!("{prefix}.fc1.weight"), Tensor::randn(i, h, std, rng)),
            b1: params.push(format!("{prefix}.fc1.bias"), Tensor::zeros(1, h)),
            w2: params.push(format!("{prefix}.fc2.weight"), Tensor::randn(h, o, std, rng)),
            b2: params.push(format!("{prefix}.fc2.bias"), Tensor::zeros(1, o)),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, vars: &[Var], x: Var) -> Var {
        let h = g.linear(x, vars[self.w1], vars[self.b1]);
        let h = g.gelu(h);
        g.linear(h, vars[self.w2], vars[self.b2])
    }
}

/// Inverted-dropout mask: zeros with probability `p`, survivors scaled by 1/(1−p).
pub fn dropout_mask<R: Rng>(rows: usize, cols: usize, p: f64, rng: &mut R) -> Tensor {
    let keep = 1.0 / (1.0 - p);
    let data = (0..rows * cols)
        .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
        .collect();
    Tensor::from_vec(rows, cols, data)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

pub struct Adam {
    cfg: AdamConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: i32,
}

impl Adam {
    pub fn new(cfg: AdamConfig, params: &ParamSet) -> Self {
        Adam {
            cfg,
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }

    /// One update of the tensors listed in `which` (indices into `params`),
    /// with `grads[k]` belonging to `which[k]`.
    pub fn step(&mut self, params: &mut ParamSet, which: &[usize], grads: &[Tensor]) {
        self.t += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.t);
        let c2 = 1.0 - beta2.powi(self.t);
        for (&i, g) in which.iter().zip(grads) {
            let p = params.get_mut(i).data_mut();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for k in 0..p.len() {
                let gk = g.data()[k];
                m[k] = beta1 * m[k] + (1.0 - beta1) * gk;
                v[k] = beta2 * v[k] + (1.0 - beta2) * gk * gk;
                let update = (m[k] / c1) / ((v[k] / c2).sqrt() + eps);
                p[k] -= lr * update;
            }
        }
    }
}

/// Samples per gradient chunk. Chunk sums are formed sequentially and then
/// reduced in chunk order, so the result does not depend on the thread count.
pub const GRAD_CHUNK: usize = 4;

/// Mean loss and mean gradients over `items`, where `f` returns one item's
/// loss and gradient list.
pub fn mean_gradients<T, F>(items: &[T], f: F) -> Result<(f64, Vec<Tensor>)>
where
    T: Sync,
    F: Fn(&T) -> Result<(f64, Vec<Tensor>)> + Sync,
{
    ensure!(!items.is_empty(), Error::Invalid("empty batch".into()));
    let chunks: Vec<Result<(f64, Vec<Tensor>)>> = items
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| {
            let mut iter = chunk.iter();
            let (mut loss, mut grads) = f(iter.next().expect("nonempty chunk"))?;
            for item in iter {
                let (l, g) = f(item)?;
                loss += l;
                for (acc, gi) in grads.iter_mut().zip(&g) {
                    acc.add_assign(gi);
                }
            }
            Ok((loss, grads))
        })
        .collect();
    let mut iter = chunks.into_iter();
    let (mut loss, mut grads) = iter.next().expect("nonempty")?;
    for c in iter {
        let (l, g) = c?;
        loss += l;
        for (acc, gi) in grads.iter_mut().zip(&g) {
            acc.add_assign(gi);
        }
    }
    let n = items.len() as f64;
    grads.iter_mut().for_each(|g| g.scale_assign(1.0 / n));
    Ok((loss / n, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng;

    #[test]
    fn adam_zero_lr_is_a_no_op() {
        let mut p = ParamSet::new();
        p.push("w", Tensor::randn(3, 4, 1.0, &mut rng(1)));
        let before = p.bits();
        let mut opt = Adam::new(AdamConfig::with_lr(0.0), &p);
        let g = vec![Tensor::filled(3, 4, 0.3)];
        opt.step(&mut p, &[0], &g);
        assert_eq!(p.bits(), before);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = ParamSet::new();
        p.push("w", Tensor::zeros(1, 2));
        let mut opt = Adam::new(AdamConfig::with_lr(0.1), &p);
        opt.step(&mut p, &[0], &[Tensor::from_vec(1, 2, vec![2.0, -0.5])]);
        // Bias-corrected first step is lr·sign(g) up to eps.
        assert!((p.get(0).data()[0] + 0.1).abs() < 1e-8);
        assert!((p.get(0).data()[1] - 0.1).abs() < 1e-8);
    }

    #[test]
    fn mean_gradients_independent_of_threads() {
        let items: Vec<f64> = (0..23).map(|i| i as f64 * 0.37).collect();
        let f = |x: &f64| Ok((x.sin(), vec![Tensor::scalar(x.cos() / 3.0)]));
        let a = mean_gradients(&items, f).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let b = pool.install(|| mean_gradients(&items, f).unwrap());
        assert_eq!(a.0.to_bits(), b.0.to_bits());
        assert_eq!(a.1[0].item().to_bits(), b.1[0].item().to_bits());
    }

    #[test]
    fn dropout_mask_keeps_expectation() {
        let m = dropout_mask(100, 100, 0.25, &mut rng(4));
        let mean = m.data().iter().sum::<f64>() / 10_000.0;
        assert!((mean - 1.0).abs() < 0.05);
    }
}
