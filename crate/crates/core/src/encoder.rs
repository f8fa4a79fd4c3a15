//! Transformer encoder over patch tokens with two alignment heads.
//!
//! The token sequence is `[class] ++ [W·row_k + b + pos[retained[k]]]`. Blocks
//! are pre-norm. The class row of the last block passes through a final layer
//! norm and then through the embedding head (`pred_c`) and the latent head
//! (`pred_v`). Training minimizes `mse(pred_c, z_c) + α·mse(pred_v, z_v)`.

use std::collections::BTreeMap;
use std::path::Path;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{ensure, Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{dropout_mask, mean_gradients, Adam, AdamConfig, BlockLayout, MlpLayout, ParamSet};
use crate::preprocess::{mixup, PatchIndexMap, PatchSpec, PatchedSignal};
use crate::seed::{mix, rng, rng_for, Rng};
use crate::tensor::Tensor;

const INIT_STD: f64 = 0.02;
const CHECKPOINT_KIND: &str = "encoder";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub n_layers: usize,
    pub hidden: usize,
    pub n_heads: usize,
    pub mlp_ratio: f64,
    pub patch_dim: usize,
    pub pos_table_size: usize,
    pub d_c: usize,
    pub d_v: usize,
    pub head_hidden: usize,
    pub alpha: f64,
    pub dropout: f64,
}

impl EncoderConfig {
    /// Published sizes: 16 layers, width 768, heads of 1024 hidden units, α = 1/64.
    pub fn full(patch_dim: usize, pos_table_size: usize, d_c: usize, d_v: usize) -> Self {
        EncoderConfig {
            n_layers: 16,
            hidden: 768,
            n_heads: 12,
            mlp_ratio: 4.0,
            patch_dim,
            pos_table_size,
            d_c,
            d_v,
            head_hidden: 1024,
            alpha: 1.0 / 64.0,
            dropout: 0.0,
        }
    }

    pub fn mlp_width(&self) -> usize {
        (self.hidden as f64 * self.mlp_ratio).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.hidden > 0
                && self.n_heads > 0
                && self.patch_dim > 0
                && self.pos_table_size > 0
                && self.d_c > 0
                && self.d_v > 0
                && self.head_hidden > 0
                && self.mlp_width() > 0,
            Error::Config("encoder dims must be positive".into())
        );
        ensure!(
            self.hidden % self.n_heads == 0,
            Error::Config(format!(
                "hidden {} not divisible by {} heads",
                self.hidden, self.n_heads
            ))
        );
        ensure!(
            (0.0..1.0).contains(&self.dropout),
            Error::Config(format!("dropout {} outside [0, 1)", self.dropout))
        );
        ensure!(
            self.alpha >= 0.0 && self.alpha.is_finite(),
            Error::Config("alpha must be a nonnegative real".into())
        );
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Layout {
    patch_w: usize,
    patch_b: usize,
    class_token: usize,
    pos_table: usize,
    blocks: Vec<BlockLayout>,
    final_g: usize,
    final_b: usize,
    head_c: MlpLayout,
    head_v: MlpLayout,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderState {
    pub config: EncoderConfig,
    params: ParamSet,
    layout: Layout,
    /// Patching geometry the encoder was trained with, when known.
    pub patch_spec: Option<PatchSpec>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace {
    /// `hidden_states[0]` is the embedded sequence, `hidden_states[l]` the
    /// output of block `l`. Empty unless a trace was requested.
    pub hidden_states: Vec<Tensor>,
    pub class_final: Vec<f64>,
    pub penultimate: Tensor,
    pub pred_c: Vec<f64>,
    pub pred_v: Vec<f64>,
}

/// Graph handles for one forward pass.
pub(crate) struct Built {
    pub hidden: Vec<Var>,
    pub pred_c: Var,
    pub pred_v: Var,
    pub class_final: Var,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossTerms {
    pub total: f64,
    pub mse_c: f64,
    pub mse_v: f64,
}

impl EncoderState {
    pub fn init(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng(seed);
        let h = config.hidden;
        let mut params = ParamSet::new();
        let patch_w = params.push("patch.weight", Tensor::randn(config.patch_dim, h, INIT_STD, &mut r));
        let patch_b = params.push("patch.bias", Tensor::zeros(1, h));
        let class_token = params.push("class_token", Tensor::randn(1, h, INIT_STD, &mut r));
        let pos_table = params.push(
            "pos_table",
            Tensor::randn(config.pos_table_size, h, INIT_STD, &mut r),
        );
        let blocks = (0..config.n_layers)
            .map(|l| {
                BlockLayout::init(&mut params, &format!("block{l}"), h, config.mlp_width(), INIT_STD, &mut r)
            })
            .collect();
        let final_g = params.push("final_norm.gamma", Tensor::filled(1, h, 1.0));
        let final_b = params.push("final_norm.beta", Tensor::zeros(1, h));
        let head_c = MlpLayout::init(&mut params, "head_c", [h, config.head_hidden, config.d_c], INIT_STD, &mut r);
        let head_v = MlpLayout::init(&mut params, "head_v", [h, config.head_hidden, config.d_v], INIT_STD, &mut r);
        params.round_to_f32();
        Ok(EncoderState {
            config,
            params,
            layout: Layout {
                patch_w,
                patch_b,
                class_token,
                pos_table,
                blocks,
                final_g,
                final_b,
                head_c,
                head_v,
            },
            patch_spec: None,
        })
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Index of a named tensor (e.g. `"head_c.fc2.bias"`).
    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.params.index_of(name)
    }

    /// Sets both heads' weights and biases to zero.
    pub fn zero_heads(&mut self) {
        for m in [self.layout.head_c, self.layout.head_v] {
            for i in [m.w1, m.b1, m.w2, m.b2] {
                self.params.get_mut(i).scale_assign(0.0);
            }
        }
    }

    pub fn head_c_bias(&self) -> &Tensor {
        self.params.get(self.layout.head_c.b2)
    }

    pub fn head_c_bias_mut(&mut self) -> &mut Tensor {
        self.params.get_mut(self.layout.head_c.b2)
    }

    /// Tensor indices belonging to the latent head.
    pub fn head_v_indices(&self) -> [usize; 4] {
        let m = self.layout.head_v;
        [m.w1, m.b1, m.w2, m.b2]
    }

    pub fn check_input(&self, b: &PatchedSignal) -> Result<()> {
        ensure!(
            b.spec.patch_dim() == self.config.patch_dim,
            Error::Shape(format!(
                "patch vectors have {} values, encoder expects {}",
                b.spec.patch_dim(),
                self.config.patch_dim
            ))
        );
        ensure!(b.n() > 0, Error::Shape("signal has no retained patches".into()));
        ensure!(
            b.values.len() == b.n() * self.config.patch_dim,
            Error::PayloadMismatch {
                expected: b.n() * self.config.patch_dim,
                found: b.values.len()
            }
        );
        ensure!(
            b.index_map.retained.iter().all(|i| *i < self.config.pos_table_size),
            Error::Shape(format!(
                "retained cell index exceeds positional table of {}",
                self.config.pos_table_size
            ))
        );
        Ok(())
    }

    /// Embedded sequence `hidden_states[0]`.
    fn embed(&self, g: &mut Graph<'_>, vars: &[Var], b: &PatchedSignal) -> Result<Var> {
        self.check_input(b)?;
        let l = &self.layout;
        let x = g.input(b.to_tensor(), false);
        let proj = g.linear(x, vars[l.patch_w], vars[l.patch_b]);
        let pos = g.gather(vars[l.pos_table], &b.index_map.retained);
        let patches = g.add(proj, pos);
        let seq = g.concat_rows(&[vars[l.class_token], patches]);
        ensure!(
            g.value(seq).is_finite(),
            Error::NonFiniteActivation {
                layer: "embedding".into()
            }
        );
        Ok(seq)
    }

    /// Applies blocks `from..n_layers` to `x` (the state after block `from`).
    fn run_blocks(
        &self,
        g: &mut Graph<'_>,
        vars: &[Var],
        x: Var,
        from: usize,
        mut drop_rng: Option<&mut Rng>,
    ) -> Result<Vec<Var>> {
        let mut states = Vec::with_capacity(self.config.n_layers - from);
        let mut x = x;
        let (t, h) = g.value(x).shape();
        for (l, block) in self.layout.blocks.iter().enumerate().skip(from) {
            let drop = match drop_rng.as_deref_mut() {
                Some(r) if self.config.dropout > 0.0 => {
                    let p = self.config.dropout;
                    let a = g.input(dropout_mask(t, h, p, r), false);
                    let m = g.input(dropout_mask(t, h, p, r), false);
                    Some((a, m))
                }
                _ => None,
            };
            x = block.forward(g, vars, x, self.config.n_heads, false, drop);
            ensure!(
                g.value(x).is_finite(),
                Error::NonFiniteActivation {
                    layer: format!("block {}", l + 1)
                }
            );
            states.push(x);
        }
        Ok(states)
    }

    fn heads(&self, g: &mut Graph<'_>, vars: &[Var], last: Var) -> Result<(Var, Var, Var)> {
        let l = &self.layout;
        let cls = g.slice_rows(last, 0, 1);
        let cls = g.layer_norm(cls, vars[l.final_g], vars[l.final_b]);
        let pred_c = l.head_c.forward(g, vars, cls);
        let pred_v = l.head_v.forward(g, vars, cls);
        ensure!(
            g.value(pred_c).is_finite() && g.value(pred_v).is_finite(),
            Error::NonFiniteActivation {
                layer: "heads".into()
            }
        );
        Ok((cls, pred_c, pred_v))
    }

    pub(crate) fn build(
        &self,
        g: &mut Graph<'_>,
        vars: &[Var],
        b: &PatchedSignal,
        drop_rng: Option<&mut Rng>,
    ) -> Result<Built> {
        let x0 = self.embed(g, vars, b)?;
        let mut hidden = vec![x0];
        hidden.extend(self.run_blocks(g, vars, x0, 0, drop_rng)?);
        let last = *hidden.last().expect("embedding present");
        let (class_final, pred_c, pred_v) = self.heads(g, vars, last)?;
        Ok(Built {
            hidden,
            pred_c,
            pred_v,
            class_final,
        })
    }

    /// Continues a forward pass from `activation`, the state after block
    /// `layer`, returning `(pred_c, pred_v)` handles.
    pub(crate) fn build_from_layer(
        &self,
        g: &mut Graph<'_>,
        vars: &[Var],
        activation: Var,
        layer: usize,
    ) -> Result<(Var, Var)> {
        ensure!(
            layer <= self.config.n_layers,
            Error::Invalid(format!(
                "layer {layer} outside [0, {}]",
                self.config.n_layers
            ))
        );
        let states = self.run_blocks(g, vars, activation, layer, None)?;
        let last = states.last().copied().unwrap_or(activation);
        let (_, c, v) = self.heads(g, vars, last)?;
        Ok((c, v))
    }

    pub fn forward(&self, b: &PatchedSignal, want_trace: bool) -> Result<ForwardTrace> {
        let mut g = Graph::new();
        let vars = self.params.bind(&mut g, false);
        let built = self.build(&mut g, &vars, b, None)?;
        let penultimate_idx = self.config.n_layers.saturating_sub(1);
        Ok(ForwardTrace {
            hidden_states: if want_trace {
                built.hidden.iter().map(|v| g.value(*v).clone()).collect()
            } else {
                Vec::new()
            },
            class_final: g.value(built.class_final).data().to_vec(),
            penultimate: g.value(built.hidden[penultimate_idx]).clone(),
            pred_c: g.value(built.pred_c).data().to_vec(),
            pred_v: g.value(built.pred_v).data().to_vec(),
        })
    }

    /// Predictions from a given activation at `layer` (0 = embeddings).
    pub fn forward_from_layer(&self, activation: &Tensor, layer: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut g = Graph::new();
        let vars = self.params.bind(&mut g, false);
        let a = g.input(activation.clone(), false);
        let (c, v) = self.build_from_layer(&mut g, &vars, a, layer)?;
        Ok((g.value(c).data().to_vec(), g.value(v).data().to_vec()))
    }

    /// Loss and parameter gradients for one sample.
    fn sample_gradients(&self, s: &SampleRef<'_>, drop_seed: Option<u64>) -> Result<(f64, Vec<Tensor>)> {
        let mut g = Graph::new();
        let vars = self.params.bind(&mut g, true);
        let mut drop_rng = drop_seed.map(rng);
        let built = self.build(&mut g, &vars, s.signal, drop_rng.as_mut())?;
        let zc = g.input(Tensor::row_vector(s.z_c.to_vec()), false);
        let zv = g.input(Tensor::row_vector(s.z_v.to_vec()), false);
        check_target_dims(&self.config, s.z_c, s.z_v)?;
        let lc = g.mse(built.pred_c, zc);
        let lv = g.mse(built.pred_v, zv);
        let lv = g.scale(lv, self.config.alpha);
        let loss = g.add(lc, lv);
        let value = g.value(loss).item();
        let mut grads = g.backward(loss);
        Ok((value, self.params.collect_grads(&vars, &mut grads)))
    }

    /// Mean alignment loss and its gradient over a batch.
    pub fn batch_gradients(&self, samples: &[AlignmentSample]) -> Result<(f64, Vec<Tensor>)> {
        let refs: Vec<SampleRef<'_>> = samples.iter().map(SampleRef::from).collect();
        mean_gradients(&refs, |s| self.sample_gradients(s, None))
    }

    /// Mean alignment loss over a batch (inference mode).
    pub fn batch_loss(&self, samples: &[AlignmentSample]) -> Result<f64> {
        ensure!(!samples.is_empty(), Error::Invalid("empty batch".into()));
        let mut total = 0.0;
        for s in samples {
            let t = self.forward(&s.signal, false)?;
            total += alignment_loss(&t, &s.z_c, &s.z_v, self.config.alpha)?.total;
        }
        Ok(total / samples.len() as f64)
    }

    pub fn save(&self, dir: impl AsRef<Path>, meta: serde_json::Value) -> Result<()> {
        let mut meta = meta;
        if let Some(spec) = &self.patch_spec {
            if let serde_json::Value::Object(m) = &mut meta {
                m.insert("patch_spec".into(), serde_json::to_value(spec)?);
            } else {
                meta = serde_json::json!({ "patch_spec": spec });
            }
        }
        checkpoint::save(dir, CHECKPOINT_KIND, &self.params, &self.config, meta)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<(Self, serde_json::Value)> {
        let (params, config, meta): (ParamSet, EncoderConfig, _) =
            checkpoint::load(dir.as_ref(), CHECKPOINT_KIND)?;
        let mut state = EncoderState::init(config, 0)?;
        ensure!(
            params.names() == state.params.names(),
            Error::Format("checkpoint tensor names do not match the configuration".into())
        );
        for (a, b) in params.tensors().iter().zip(state.params.tensors()) {
            ensure!(
                a.shape() == b.shape(),
                Error::Format("checkpoint tensor shapes do not match the configuration".into())
            );
        }
        state.params = params;
        state.patch_spec = meta
            .get("patch_spec")
            .map(|v| serde_json::from_value(v.clone()))
            .transpose()?;
        Ok((state, meta))
    }
}

fn check_target_dims(config: &EncoderConfig, z_c: &[f64], z_v: &[f64]) -> Result<()> {
    ensure!(
        z_c.len() == config.d_c && z_v.len() == config.d_v,
        Error::Shape(format!(
            "targets have dims ({}, {}), heads produce ({}, {})",
            z_c.len(),
            z_v.len(),
            config.d_c,
            config.d_v
        ))
    );
    Ok(())
}

fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

/// `mse(pred_c, z_c) + α·mse(pred_v, z_v)`, means over components.
pub fn alignment_loss(trace: &ForwardTrace, z_c: &[f64], z_v: &[f64], alpha: f64) -> Result<LossTerms> {
    ensure!(
        trace.pred_c.len() == z_c.len() && trace.pred_v.len() == z_v.len(),
        Error::Shape(format!(
            "predictions ({}, {}) vs targets ({}, {})",
            trace.pred_c.len(),
            trace.pred_v.len(),
            z_c.len(),
            z_v.len()
        ))
    );
    let mse_c = mse(&trace.pred_c, z_c);
    let mse_v = mse(&trace.pred_v, z_v);
    Ok(LossTerms {
        total: mse_c + alpha * mse_v,
        mse_c,
        mse_v,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentSample {
    pub signal: PatchedSignal,
    pub z_c: Vec<f64>,
    pub z_v: Vec<f64>,
    pub stimulus_id: String,
}

struct SampleRef<'s> {
    signal: &'s PatchedSignal,
    z_c: &'s [f64],
    z_v: &'s [f64],
}

impl<'s> From<&'s AlignmentSample> for SampleRef<'s> {
    fn from(s: &'s AlignmentSample) -> Self {
        SampleRef {
            signal: &s.signal,
            z_c: &s.z_c,
            z_v: &s.z_v,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignSchedule {
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
    pub mixup: bool,
}

impl Default for AlignSchedule {
    fn default() -> Self {
        AlignSchedule {
            lr: 5e-4,
            epochs: 30,
            batch: 32,
            seed: 0,
            mixup: true,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub initial_loss: f64,
    pub epoch_losses: Vec<f64>,
    pub val_losses: Vec<f64>,
    pub final_loss: f64,
    pub best_val: Option<f64>,
    pub best_epoch: Option<usize>,
}

const TAG_INIT: u64 = 11;
const TAG_SHUFFLE: u64 = 12;

/// Adam on the alignment loss. MixUp, when on, blends each sample with a
/// random other trial of the same stimulus that shares its index map; the
/// targets are left as they are because both trials share them.
pub fn train_alignment(
    config: EncoderConfig,
    train: &[AlignmentSample],
    val: &[AlignmentSample],
    schedule: &AlignSchedule,
) -> Result<(EncoderState, TrainReport)> {
    ensure!(!train.is_empty(), Error::Invalid("empty training set".into()));
    ensure!(schedule.batch > 0, Error::Config("batch size must be positive".into()));
    ensure!(
        schedule.lr >= 0.0 && schedule.lr.is_finite(),
        Error::Config("learning rate must be a nonnegative real".into())
    );
    let mut state = EncoderState::init(config, mix(schedule.seed, &[TAG_INIT]))?;
    state.patch_spec = Some(train[0].signal.spec.clone());
    for s in train.iter().chain(val) {
        state.check_input(&s.signal)?;
        check_target_dims(&state.config, &s.z_c, &s.z_v)?;
    }

    let partners = mixup_partners(train);
    let mut report = TrainReport {
        initial_loss: state.batch_loss(train)?,
        ..TrainReport::default()
    };
    info!("initial alignment loss {:.6}", report.initial_loss);
    let mut opt = Adam::new(AdamConfig::with_lr(schedule.lr), &state.params);
    let all: Vec<usize> = (0..state.params.len()).collect();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut r = rng_for(schedule.seed, &[TAG_SHUFFLE]);

    for epoch in 0..schedule.epochs {
        order.shuffle(&mut r);
        let mut epoch_loss = 0.0;
        let mut steps = 0;
        for (step, batch) in order.chunks(schedule.batch).enumerate() {
            // Draw every random quantity sequentially so results do not
            // depend on how the batch is split across threads.
            let mixed: Vec<Option<PatchedSignal>> = batch
                .iter()
                .map(|&i| {
                    if !schedule.mixup || partners[i].is_empty() {
                        return Ok(None);
                    }
                    let j = partners[i][r.random_range(0..partners[i].len())];
                    let lambda: f64 = r.random();
                    mixup(&train[i].signal, &train[j].signal, lambda).map(Some)
                })
                .collect::<Result<_>>()?;
            let drop_seeds: Vec<Option<u64>> = batch
                .iter()
                .map(|_| (state.config.dropout > 0.0).then(|| r.random()))
                .collect();
            let items: Vec<(SampleRef<'_>, Option<u64>)> = batch
                .iter()
                .zip(&mixed)
                .zip(&drop_seeds)
                .map(|((&i, m), d)| {
                    let s = &train[i];
                    (
                        SampleRef {
                            signal: m.as_ref().unwrap_or(&s.signal),
                            z_c: &s.z_c,
                            z_v: &s.z_v,
                        },
                        *d,
                    )
                })
                .collect();
            let (loss, grads) = mean_gradients(&items, |(s, d)| state.sample_gradients(s, *d))?;
            ensure!(
                loss.is_finite(),
                Error::NonFiniteLoss {
                    epoch,
                    step,
                    value: loss
                }
            );
            opt.step(&mut state.params, &all, &grads);
            epoch_loss += loss;
            steps += 1;
        }
        let epoch_loss = epoch_loss / steps as f64;
        report.epoch_losses.push(epoch_loss);
        if !val.is_empty() {
            let v = state.batch_loss(val)?;
            report.val_losses.push(v);
            if report.best_val.is_none_or(|b| v < b) {
                report.best_val = Some(v);
                report.best_epoch = Some(epoch);
            }
            debug!("epoch {epoch}: train {epoch_loss:.6} val {v:.6}");
        } else {
            debug!("epoch {epoch}: train {epoch_loss:.6}");
        }
    }
    state.params.round_to_f32();
    report.final_loss = state.batch_loss(train)?;
    info!("final alignment loss {:.6}", report.final_loss);
    Ok((state, report))
}

/// For each sample, the other samples of the same stimulus with an identical index map.
fn mixup_partners(train: &[AlignmentSample]) -> Vec<Vec<usize>> {
    let mut groups: BTreeMap<(&str, &PatchIndexMap), Vec<usize>> = BTreeMap::new();
    for (i, s) in train.iter().enumerate() {
        groups
            .entry((s.stimulus_id.as_str(), &s.signal.index_map))
            .or_default()
            .push(i);
    }
    let mut partners = vec![Vec::new(); train.len()];
    for members in groups.values() {
        for &i in members {
            partners[i] = members.iter().copied().filter(|j| *j != i).collect();
        }
    }
    partners
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    pub max_abs_error: f64,
}

/// Denominator floor for relative errors, so parameters whose gradient is
/// numerically zero are judged on absolute error.
pub const GRAD_CHECK_FLOOR: f64 = 1e-5;
/// Step of the fourth-order central stencil.
const GRAD_CHECK_STEP: f64 = 1e-3;
const GRAD_CHECK_SAMPLES: usize = 256;

/// Random probe data for a configuration: `count` signals with random
/// retained subsets of a `pos_table_size × 1 × 1` cell grid.
pub fn probe_samples(config: &EncoderConfig, count: usize, seed: u64) -> Result<Vec<AlignmentSample>> {
    let r = (config.patch_dim as f64).cbrt().round() as usize;
    ensure!(
        r * r * r == config.patch_dim,
        Error::Config(format!("patch_dim {} is not a cube", config.patch_dim))
    );
    let spec = PatchSpec::new(r, [r * config.pos_table_size, r, r])?;
    let mut g = rng(seed);
    (0..count)
        .map(|i| {
            let mut retained: Vec<usize> = (0..config.pos_table_size)
                .filter(|_| g.random::<f64>() < 0.6)
                .collect();
            if retained.is_empty() {
                retained.push(g.random_range(0..config.pos_table_size));
            }
            let n = retained.len();
            let values = (0..n * config.patch_dim)
                .map(|_| g.sample::<f64, _>(StandardNormal) as f32)
                .collect();
            let z = |d: usize, g: &mut Rng| (0..d).map(|_| g.sample::<f64, _>(StandardNormal)).collect();
            Ok(AlignmentSample {
                signal: PatchedSignal {
                    values,
                    index_map: PatchIndexMap {
                        grid_dims: spec.grid_dims(),
                        retained,
                        pad: spec.pad(),
                    },
                    spec: spec.clone(),
                    provenance: format!("probe{i}"),
                },
                z_c: z(config.d_c, &mut g),
                z_v: z(config.d_v, &mut g),
                stimulus_id: format!("probe{i}"),
            })
        })
        .collect()
}

/// Analytic gradients against central finite differences on randomly chosen
/// parameters of a model whose weights are perturbed away from the small
/// initialization scale.
pub fn gradient_check(config: &EncoderConfig, seed: u64) -> Result<GradCheckReport> {
    let mut state = EncoderState::init(config.clone(), seed)?;
    let mut g = rng_for(seed, &[1]);
    for t in state.params.tensors_mut() {
        for v in t.data_mut() {
            *v += 0.3 * g.sample::<f64, _>(StandardNormal);
        }
    }
    let samples = probe_samples(config, 2, mix(seed, &[2]))?;
    let (_, grads) = state.batch_gradients(&samples)?;
    let sizes: Vec<usize> = state.params.tensors().iter().map(Tensor::len).collect();
    let total: usize = sizes.iter().sum();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        max_abs_error: 0.0,
    };
    for _ in 0..GRAD_CHECK_SAMPLES.min(total.max(1)) {
        let mut flat = g.random_range(0..total);
        let mut ti = 0;
        while flat >= sizes[ti] {
            flat -= sizes[ti];
            ti += 1;
        }
        let original = state.params.get(ti).data()[flat];
        let mut loss_at = |offset: f64| -> Result<f64> {
            state.params.get_mut(ti).data_mut()[flat] = original + offset;
            state.batch_loss(&samples)
        };
        let h = GRAD_CHECK_STEP;
        let (p1, m1, p2, m2) = (loss_at(h)?, loss_at(-h)?, loss_at(2.0 * h)?, loss_at(-2.0 * h)?);
        state.params.get_mut(ti).data_mut()[flat] = original;
        let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h);
        let analytic = grads[ti].data()[flat];
        let abs = (numeric - analytic).abs();
        let rel = abs / analytic.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
        report.max_abs_error = report.max_abs_error.max(abs);
        report.max_rel_error = report.max_rel_error.max(rel);
        report.checked += 1;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny(n_layers: usize) -> EncoderConfig {
        EncoderConfig {
            n_layers,
            hidden: 16,
            n_heads: 2,
            mlp_ratio: 2.0,
            patch_dim: 8,
            pos_table_size: 6,
            d_c: 5,
            d_v: 7,
            head_hidden: 12,
            alpha: 0.5,
            dropout: 0.0,
        }
    }

    #[test]
    fn zero_heads_emit_bias() {
        let mut s = EncoderState::init(tiny(1), 3).unwrap();
        s.zero_heads();
        let b: Vec<f64> = (0..5).map(|i| i as f64 * 0.25).collect();
        s.head_c_bias_mut().data_mut().copy_from_slice(&b);
        let x = probe_samples(&s.config, 1, 0).unwrap();
        assert_eq!(s.forward(&x[0].signal, false).unwrap().pred_c, b);
    }

    #[test]
    fn zero_layers_ignore_patch_content() {
        let s = EncoderState::init(tiny(0), 3).unwrap();
        let mut x = probe_samples(&s.config, 1, 0).unwrap().remove(0);
        x.signal.index_map.retained.truncate(1);
        let c = s.config.patch_dim;
        x.signal.values.truncate(c);
        let a = s.forward(&x.signal, false).unwrap();
        x.signal.values.iter_mut().for_each(|v| *v = 9.0);
        let b = s.forward(&x.signal, false).unwrap();
        assert_eq!(a.class_final, b.class_final);
        assert_eq!(a.pred_c, b.pred_c);
    }

    #[test]
    fn loss_hand_values() {
        let mut trace = ForwardTrace {
            hidden_states: vec![],
            class_final: vec![],
            penultimate: Tensor::zeros(1, 1),
            pred_c: vec![0.0; 64],
            pred_v: vec![1.0; 4],
        };
        let zc = vec![0.0; 64];
        let zv = vec![1.0; 4];
        assert_eq!(alignment_loss(&trace, &zc, &zv, 0.5).unwrap().total, 0.0);
        trace.pred_c[0] = 2.0;
        assert_eq!(alignment_loss(&trace, &zc, &zv, 0.5).unwrap().total, 0.0625);
        trace.pred_v[2] = 10.0;
        assert_eq!(alignment_loss(&trace, &zc, &zv, 0.0).unwrap().total, 0.0625);
        assert!(alignment_loss(&trace, &zc[..3], &zv, 0.0).is_err());
    }

    #[test]
    fn shape_errors() {
        let s = EncoderState::init(tiny(1), 3).unwrap();
        let mut x = probe_samples(&s.config, 1, 0).unwrap().remove(0);
        x.signal.index_map.retained[0] = 99;
        assert!(matches!(s.forward(&x.signal, false), Err(Error::Shape(_))));
    }

    #[test]
    fn non_finite_activation_names_layer() {
        let mut s = EncoderState::init(tiny(2), 3).unwrap();
        let i = s.param_index("block1.mlp.fc2.bias").unwrap();
        s.params_mut().get_mut(i).data_mut()[0] = f64::INFINITY;
        let x = probe_samples(&s.config, 1, 0).unwrap();
        match s.forward(&x[0].signal, false) {
            Err(Error::NonFiniteActivation { layer }) => assert_eq!(layer, "block 2"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
