//! Tiny decoder-only language model used as the stand-in for a pretrained LM.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{BlockLayout, ParamSet};
use crate::seed::rng;
use crate::tensor::Tensor;

const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LmConfig {
    pub vocab_size: usize,
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub context: usize,
    /// Learned absolute positions. Without them the model only sees order
    /// through causal masking.
    pub positional: bool,
}

impl LmConfig {
    pub fn standin(vocab_size: usize) -> Self {
        LmConfig {
            vocab_size,
            width: 128,
            layers: 2,
            heads: 4,
            mlp_ratio: 4.0,
            context: 256,
            positional: true,
        }
    }

    pub fn mlp_width(&self) -> usize {
        (self.width as f64 * self.mlp_ratio).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.vocab_size > 0 && self.width > 0 && self.heads > 0 && self.context > 0,
            Error::Config("language model dims must be positive".into())
        );
        ensure!(
            self.width % self.heads == 0,
            Error::Config(format!("width {} not divisible by {} heads", self.width, self.heads))
        );
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Layout {
    tok_emb: usize,
    pos_emb: Option<usize>,
    blocks: Vec<BlockLayout>,
    final_g: usize,
    final_b: usize,
    out_w: usize,
    out_b: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TinyLm {
    pub config: LmConfig,
    params: ParamSet,
    layout: Layout,
}

impl TinyLm {
    pub fn init(config: LmConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng(seed);
        let w = config.width;
        let mut params = ParamSet::new();
        let tok_emb = params.push("tok_emb", Tensor::randn(config.vocab_size, w, INIT_STD, &mut r));
        let pos_emb = config
            .positional
            .then(|| params.push("pos_emb", Tensor::randn(config.context, w, INIT_STD, &mut r)));
        let blocks = (0..config.layers)
            .map(|l| BlockLayout::init(&mut params, &format!("block{l}"), w, config.mlp_width(), INIT_STD, &mut r))
            .collect();
        let final_g = params.push("final_norm.gamma", Tensor::filled(1, w, 1.0));
        let final_b = params.push("final_norm.beta", Tensor::zeros(1, w));
        let out_w = params.push("out.weight", Tensor::randn(w, config.vocab_size, INIT_STD, &mut r));
        let out_b = params.push("out.bias", Tensor::zeros(1, config.vocab_size));
        params.round_to_f32();
        Ok(TinyLm {
            config,
            params,
            layout: Layout {
                tok_emb,
                pos_emb,
                blocks,
                final_g,
                final_b,
                out_w,
                out_b,
            },
        })
    }

    /// A model whose output layer is zero, so every next-token distribution
    /// is uniform over the vocabulary.
    pub fn uniform(config: LmConfig) -> Result<Self> {
        let mut lm = TinyLm::init(config, 0)?;
        let (w, b) = (lm.layout.out_w, lm.layout.out_b);
        lm.params.get_mut(w).scale_assign(0.0);
        lm.params.get_mut(b).scale_assign(0.0);
        Ok(lm)
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub(crate) fn replace_params(&mut self, params: ParamSet) -> Result<()> {
        ensure!(
            params.names() == self.params.names()
                && params
                    .tensors()
                    .iter()
                    .zip(self.params.tensors())
                    .all(|(a, b)| a.shape() == b.shape()),
            Error::Format("language model tensors do not match the configuration".into())
        );
        self.params = params;
        Ok(())
    }

    pub fn embedding_row(&self, id: usize) -> &[f64] {
        self.params.get(self.layout.tok_emb).row(id)
    }

    /// Token embeddings for `ids`.
    pub(crate) fn embed(&self, g: &mut Graph<'_>, vars: &[Var], ids: &[usize]) -> Var {
        g.gather(vars[self.layout.tok_emb], ids)
    }

    /// Logits (L×vocab) for an embedded sequence (L×width); row `i` scores
    /// the token at position `i + 1`.
    pub(crate) fn logits(&self, g: &mut Graph<'_>, vars: &[Var], x: Var) -> Result<Var> {
        let len = g.value(x).rows();
        ensure!(
            len <= self.config.context,
            Error::Invalid(format!(
                "sequence of {len} tokens overflows the {}-token context",
                self.config.context
            ))
        );
        let mut x = x;
        if let Some(p) = self.layout.pos_emb {
            let idx: Vec<usize> = (0..len).collect();
            let pos = g.gather(vars[p], &idx);
            x = g.add(x, pos);
        }
        for (l, block) in self.layout.blocks.iter().enumerate() {
            x = block.forward(g, vars, x, self.config.heads, true, None);
            ensure!(
                g.value(x).is_finite(),
                Error::NonFiniteActivation {
                    layer: format!("lm block {}", l + 1)
                }
            );
        }
        let h = g.layer_norm(x, vars[self.layout.final_g], vars[self.layout.final_b]);
        Ok(g.linear(h, vars[self.layout.out_w], vars[self.layout.out_b]))
    }
}
