//! Token bridge between the frozen encoder and a language model.
//!
//! The encoder's penultimate token states pass through a two-layer perceptron
//! `f_t` into the LM embedding space and replace the `[image]` placeholder of
//! the first human turn. Sequences follow
//! `[BOS] <human>: … [fMRI] … <bot>: answer [EOT] <human>: …`, and the loss
//! is the mean next-token cross-entropy over answer tokens and their
//! terminators.

pub mod conversation;
pub mod lm;
pub mod tokenizer;

use std::path::Path;

use log::{debug, info};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{ensure, Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{mean_gradients, Adam, AdamConfig, MlpLayout, ParamSet};
use crate::seed::{mix, rng, rng_for};
use crate::tensor::Tensor;

pub use conversation::{ConversationRecord, Role, TaskKind, Turn, PLACEHOLDER};
pub use lm::{LmConfig, TinyLm};
pub use tokenizer::Tokenizer;

pub const HUMAN_TAG: &str = "<human>:";
pub const BOT_TAG: &str = "<bot>:";
const CHECKPOINT_KIND: &str = "bridge";
const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BridgeConfig {
    /// Width of the encoder states fed to `f_t`.
    pub encoder_hidden: usize,
    pub lm: LmConfig,
    pub tokenizer: Tokenizer,
    /// Project only the class token instead of every token.
    pub class_only: bool,
}

impl BridgeConfig {
    pub fn standin(encoder_hidden: usize) -> Self {
        let tokenizer = Tokenizer::Bytes;
        BridgeConfig {
            encoder_hidden,
            lm: LmConfig::standin(tokenizer.vocab_size()),
            tokenizer,
            class_only: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum LanguageModelHandle {
    TinyStandin(TinyLm),
    /// A pretrained model behind an adapter. None ships with this crate, so
    /// every use reports a capability error.
    External { adapter_id: String },
}

impl LanguageModelHandle {
    fn tiny(&self) -> Result<&TinyLm> {
        match self {
            LanguageModelHandle::TinyStandin(lm) => Ok(lm),
            LanguageModelHandle::External { adapter_id } => Err(Error::Capability(format!(
                "language model adapter {adapter_id:?} is not available"
            ))),
        }
    }

    fn tiny_mut(&mut self) -> Result<&mut TinyLm> {
        match self {
            LanguageModelHandle::TinyStandin(lm) => Ok(lm),
            LanguageModelHandle::External { adapter_id } => Err(Error::Capability(format!(
                "language model adapter {adapter_id:?} is not trainable here"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BridgeState {
    pub config: BridgeConfig,
    f_t: ParamSet,
    f_t_layout: MlpLayout,
    pub lm: LanguageModelHandle,
}

/// Position-level description of an assembled sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SequenceLayout {
    pub segments: Vec<Segment>,
    /// Token id per position; `None` on fMRI positions.
    pub ids: Vec<Option<usize>>,
    /// True on answer tokens and their terminators.
    pub loss_mask: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Segment {
    Text(Vec<usize>),
    Fmri(usize),
}

impl SequenceLayout {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    fn push_text(&mut self, ids: Vec<usize>, loss: bool) {
        if ids.is_empty() {
            return;
        }
        self.ids.extend(ids.iter().map(|i| Some(*i)));
        self.loss_mask.extend(std::iter::repeat_n(loss, ids.len()));
        match self.segments.last_mut() {
            Some(Segment::Text(prev)) => prev.extend(ids),
            _ => self.segments.push(Segment::Text(ids)),
        }
    }

    fn push_fmri(&mut self, n: usize) {
        self.ids.extend(std::iter::repeat_n(None, n));
        self.loss_mask.extend(std::iter::repeat_n(false, n));
        self.segments.push(Segment::Fmri(n));
    }

    /// Cross-entropy target per row: row `i` predicts position `i + 1`
    /// whenever that position is in the loss mask.
    pub fn targets(&self) -> Vec<Option<usize>> {
        (0..self.len())
            .map(|i| match (self.loss_mask.get(i + 1), self.ids.get(i + 1)) {
                (Some(true), Some(id)) => *id,
                _ => None,
            })
            .collect()
    }
}

fn split_placeholder(text: &str) -> (&str, &str) {
    let pos = text.find(PLACEHOLDER).expect("validated record");
    (
        text[..pos].trim_end(),
        text[pos + PLACEHOLDER.len()..].trim_start(),
    )
}

/// Layout of the prompt part of a first human turn, up to and including the
/// bot tag.
fn prompt_layout(tok: &Tokenizer, human_text: &str, n_fmri: usize) -> SequenceLayout {
    let mut out = SequenceLayout {
        segments: Vec::new(),
        ids: Vec::new(),
        loss_mask: Vec::new(),
    };
    let (pre, post) = split_placeholder(human_text);
    out.push_text(vec![tok.bos()], false);
    out.push_text(tok.encode(&format!("{HUMAN_TAG}{pre}")), false);
    out.push_fmri(n_fmri);
    out.push_text(tok.encode(&format!("{post}{BOT_TAG}")), false);
    out
}

/// Token layout of a whole conversation with `n_fmri` spliced tokens.
pub fn sequence_layout(tok: &Tokenizer, record: &ConversationRecord, n_fmri: usize) -> Result<SequenceLayout> {
    record.validate()?;
    let mut out = prompt_layout(tok, &record.turns[0].text, n_fmri);
    for (i, pair) in record.turns.chunks(2).enumerate() {
        if i > 0 {
            out.push_text(tok.encode(&format!("{HUMAN_TAG}{}{BOT_TAG}", pair[0].text)), false);
        }
        out.push_text(tok.encode(&pair[1].text), true);
        out.push_text(vec![tok.eot()], true);
    }
    Ok(out)
}

/// Embedded sequence with its loss mask.
#[derive(Clone, Debug, PartialEq)]
pub struct AssembledSequence {
    pub embeddings: Tensor,
    pub layout: SequenceLayout,
}

impl BridgeState {
    pub fn init(config: BridgeConfig, lm: LanguageModelHandle, seed: u64) -> Result<Self> {
        let w = config.lm.width;
        if let LanguageModelHandle::TinyStandin(m) = &lm {
            ensure!(
                m.config == config.lm,
                Error::Config("language model does not match the bridge configuration".into())
            );
        }
        ensure!(
            config.tokenizer.vocab_size() == config.lm.vocab_size,
            Error::Config(format!(
                "tokenizer has {} symbols, language model vocabulary is {}",
                config.tokenizer.vocab_size(),
                config.lm.vocab_size
            ))
        );
        let mut f_t = ParamSet::new();
        let mut r = rng(seed);
        let f_t_layout = MlpLayout::init(&mut f_t, "f_t", [config.encoder_hidden, w, w], INIT_STD, &mut r);
        f_t.round_to_f32();
        Ok(BridgeState {
            config,
            f_t,
            f_t_layout,
            lm,
        })
    }

    /// Bridge with a freshly initialized stand-in LM.
    pub fn standin(config: BridgeConfig, seed: u64) -> Result<Self> {
        let lm = TinyLm::init(config.lm.clone(), mix(seed, &[1]))?;
        BridgeState::init(config, LanguageModelHandle::TinyStandin(lm), mix(seed, &[2]))
    }

    pub fn f_t(&self) -> &ParamSet {
        &self.f_t
    }

    pub fn lm_params(&self) -> Result<&ParamSet> {
        Ok(self.lm.tiny()?.params())
    }

    pub fn tokenizer(&self) -> &Tokenizer {
        &self.config.tokenizer
    }

    fn fmri_rows(&self, penultimate: &Tensor) -> usize {
        if self.config.class_only {
            1
        } else {
            penultimate.rows()
        }
    }

    fn check_states(&self, penultimate: &Tensor) -> Result<()> {
        ensure!(
            penultimate.cols() == self.config.encoder_hidden && penultimate.rows() > 0,
            Error::Shape(format!(
                "encoder states are {}×{}, bridge expects width {}",
                penultimate.rows(),
                penultimate.cols(),
                self.config.encoder_hidden
            ))
        );
        Ok(())
    }

    /// `f_t` applied to the encoder states (or just the class row).
    fn project(&self, g: &mut Graph<'_>, ft: &[Var], pen: Var) -> Var {
        let x = if self.config.class_only {
            g.slice_rows(pen, 0, 1)
        } else {
            pen
        };
        self.f_t_layout.forward(g, ft, x)
    }

    fn embed_layout(&self, g: &mut Graph<'_>, lm_vars: &[Var], fmri: Var, layout: &SequenceLayout) -> Result<Var> {
        let lm = self.lm.tiny()?;
        let parts: Vec<Var> = layout
            .segments
            .iter()
            .map(|s| match s {
                Segment::Text(ids) => lm.embed(g, lm_vars, ids),
                Segment::Fmri(_) => fmri,
            })
            .collect();
        Ok(g.concat_rows(&parts))
    }

    /// fMRI tokens in LM embedding space, `(N+1)×width` (or `1×width` with
    /// `class_only`).
    pub fn project_states(&self, penultimate: &Tensor) -> Result<Tensor> {
        self.check_states(penultimate)?;
        let mut g = Graph::new();
        let ft = self.f_t.bind(&mut g, false);
        let pen = g.input(penultimate.clone(), false);
        let out = self.project(&mut g, &ft, pen);
        Ok(g.value(out).clone())
    }

    /// Splices `fmri_tokens` into the embedded conversation.
    pub fn assemble_sequence(&self, record: &ConversationRecord, fmri_tokens: &Tensor) -> Result<AssembledSequence> {
        let lm = self.lm.tiny()?;
        ensure!(
            fmri_tokens.cols() == lm.config.width,
            Error::Shape(format!(
                "fMRI tokens have width {}, language model embeds to {}",
                fmri_tokens.cols(),
                lm.config.width
            ))
        );
        let layout = sequence_layout(self.tokenizer(), record, fmri_tokens.rows())?;
        let mut g = Graph::new();
        let lm_vars = lm.params().bind(&mut g, false);
        let fmri = g.input(fmri_tokens.clone(), false);
        let x = self.embed_layout(&mut g, &lm_vars, fmri, &layout)?;
        Ok(AssembledSequence {
            embeddings: g.value(x).clone(),
            layout,
        })
    }

    /// Builds logits for a conversation; returns `(logits, layout)`.
    fn build_logits(
        &self,
        g: &mut Graph<'_>,
        ft: &[Var],
        lm_vars: &[Var],
        penultimate: Var,
        layout: &SequenceLayout,
    ) -> Result<Var> {
        let fmri = self.project(g, ft, penultimate);
        let x = self.embed_layout(g, lm_vars, fmri, layout)?;
        self.lm.tiny()?.logits(g, lm_vars, x)
    }

    /// Logits over the whole conversation with the layout used to build them.
    pub fn conversation_logits(
        &self,
        record: &ConversationRecord,
        penultimate: &Tensor,
    ) -> Result<(Tensor, SequenceLayout)> {
        self.check_states(penultimate)?;
        let layout = sequence_layout(self.tokenizer(), record, self.fmri_rows(penultimate))?;
        let lm = self.lm.tiny()?;
        let mut g = Graph::new();
        let ft = self.f_t.bind(&mut g, false);
        let lm_vars = lm.params().bind(&mut g, false);
        let pen = g.input(penultimate.clone(), false);
        let logits = self.build_logits(&mut g, &ft, &lm_vars, pen, &layout)?;
        Ok((g.value(logits).clone(), layout))
    }

    /// Mean next-token cross-entropy over answer positions.
    pub fn bridge_loss(&self, record: &ConversationRecord, penultimate: &Tensor) -> Result<f64> {
        let (logits, layout) = self.conversation_logits(record, penultimate)?;
        let targets = layout.targets();
        ensure!(
            targets.iter().any(Option::is_some),
            Error::Invalid("conversation has no answer positions".into())
        );
        let mut g = Graph::new();
        let l = g.input(logits, false);
        let loss = g.cross_entropy(l, &targets);
        Ok(g.value(loss).item())
    }

    /// Gradient of the loss with respect to every logit, with the target row map.
    pub fn logit_gradient(
        &self,
        record: &ConversationRecord,
        penultimate: &Tensor,
    ) -> Result<(Tensor, Vec<Option<usize>>)> {
        let (logits, layout) = self.conversation_logits(record, penultimate)?;
        let targets = layout.targets();
        ensure!(
            targets.iter().any(Option::is_some),
            Error::Invalid("conversation has no answer positions".into())
        );
        let mut g = Graph::new();
        let l = g.input(logits, true);
        let loss = g.cross_entropy(l, &targets);
        let grads = g.backward(loss);
        Ok((grads.get(l).cloned().expect("logits need grad"), targets))
    }

    /// Loss and gradients for one sample: `f_t` gradients first, then LM
    /// gradients when `stage == 2`.
    fn sample_gradients(&self, s: &BridgeSample, stage: u8) -> Result<(f64, Vec<Tensor>)> {
        self.check_states(&s.penultimate)?;
        let lm = self.lm.tiny()?;
        let layout = sequence_layout(self.tokenizer(), &s.record, self.fmri_rows(&s.penultimate))?;
        let targets = layout.targets();
        ensure!(
            targets.iter().any(Option::is_some),
            Error::Invalid("conversation has no answer positions".into())
        );
        let mut g = Graph::new();
        let ft = self.f_t.bind(&mut g, true);
        let lm_vars = lm.params().bind(&mut g, stage == 2);
        let pen = g.input(s.penultimate.clone(), false);
        let logits = self.build_logits(&mut g, &ft, &lm_vars, pen, &layout)?;
        let loss = g.cross_entropy(logits, &targets);
        let value = g.value(loss).item();
        let mut grads = g.backward(loss);
        let mut out = self.f_t.collect_grads(&ft, &mut grads);
        if stage == 2 {
            out.extend(lm.params().collect_grads(&lm_vars, &mut grads));
        }
        Ok((value, out))
    }

    /// Fraction of answer positions whose greedy prediction is correct.
    pub fn answer_accuracy(&self, samples: &[BridgeSample]) -> Result<f64> {
        let mut hit = 0usize;
        let mut total = 0usize;
        for s in samples {
            let (logits, layout) = self.conversation_logits(&s.record, &s.penultimate)?;
            for (i, t) in layout.targets().iter().enumerate() {
                if let Some(t) = t {
                    total += 1;
                    hit += usize::from(argmax(logits.row(i)) == *t);
                }
            }
        }
        ensure!(total > 0, Error::Invalid("no answer positions".into()));
        Ok(hit as f64 / total as f64)
    }

    /// Greedy decoding of the bot reply to `instruction` about the given
    /// encoder states. Stops at the end-of-turn token or after `max_tokens`.
    pub fn generate(&self, penultimate: &Tensor, instruction: &str, max_tokens: usize) -> Result<String> {
        self.check_states(penultimate)?;
        if max_tokens == 0 {
            return Ok(String::new());
        }
        let lm = self.lm.tiny()?;
        let tok = self.tokenizer();
        let human = format!("{PLACEHOLDER} {instruction}");
        let mut layout = prompt_layout(tok, &human, self.fmri_rows(penultimate));
        let fmri_tokens = self.project_states(penultimate)?;
        let mut out = Vec::new();
        for _ in 0..max_tokens {
            ensure!(
                layout.len() <= lm.config.context,
                Error::Invalid(format!(
                    "generation needs {} positions, context holds {}",
                    layout.len(),
                    lm.config.context
                ))
            );
            let mut g = Graph::new();
            let lm_vars = lm.params().bind(&mut g, false);
            let fmri = g.input(fmri_tokens.clone(), false);
            let x = self.embed_layout(&mut g, &lm_vars, fmri, &layout)?;
            let logits = lm.logits(&mut g, &lm_vars, x)?;
            let last = g.value(logits).row(layout.len() - 1);
            let next = argmax(last);
            if next == tok.eot() {
                break;
            }
            out.push(next);
            layout.push_text(vec![next], false);
        }
        Ok(tok.decode(&out))
    }

    pub fn save(&self, dir: impl AsRef<Path>, meta: serde_json::Value) -> Result<()> {
        let lm = self.lm.tiny()?;
        let mut all = ParamSet::new();
        for (n, t) in self.f_t.names().iter().zip(self.f_t.tensors()) {
            all.push(n.clone(), t.clone());
        }
        for (n, t) in lm.params().names().iter().zip(lm.params().tensors()) {
            all.push(format!("lm.{n}"), t.clone());
        }
        checkpoint::save(dir, CHECKPOINT_KIND, &all, &self.config, meta)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let (all, config, _): (ParamSet, BridgeConfig, _) = checkpoint::load(dir.as_ref(), CHECKPOINT_KIND)?;
        let mut state = BridgeState::standin(config, 0)?;
        let mut f_t = ParamSet::new();
        let mut lm_params = ParamSet::new();
        for (n, t) in all.names().iter().zip(all.tensors()) {
            match n.strip_prefix("lm.") {
                Some(rest) => lm_params.push(rest, t.clone()),
                None => f_t.push(n.clone(), t.clone()),
            };
        }
        ensure!(
            f_t.names() == state.f_t.names()
                && f_t
                    .tensors()
                    .iter()
                    .zip(state.f_t.tensors())
                    .all(|(a, b)| a.shape() == b.shape()),
            Error::Format("projection tensors do not match the configuration".into())
        );
        state.f_t = f_t;
        state.lm.tiny_mut()?.replace_params(lm_params)?;
        Ok(state)
    }
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// A conversation paired with the frozen encoder's penultimate states.
#[derive(Clone, Debug, PartialEq)]
pub struct BridgeSample {
    pub penultimate: Tensor,
    pub record: ConversationRecord,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BridgeSchedule {
    pub stage: u8,
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
}

impl BridgeSchedule {
    /// One epoch at 2e-5 with batch 32 (stage 1) or 24 (stage 2), the
    /// published settings.
    pub fn full(stage: u8, seed: u64) -> Self {
        BridgeSchedule {
            stage,
            lr: 2e-5,
            epochs: 1,
            batch: if stage == 1 { 32 } else { 24 },
            seed,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BridgeReport {
    pub stage: u8,
    pub epoch_losses: Vec<f64>,
}

const TAG_SHUFFLE: u64 = 21;

/// Stage 1 updates `f_t` only; stage 2 updates `f_t` and the language model.
/// The encoder is never touched: samples carry precomputed states.
pub fn train_bridge(
    state: &mut BridgeState,
    samples: &[BridgeSample],
    schedule: &BridgeSchedule,
) -> Result<BridgeReport> {
    ensure!(
        schedule.stage == 1 || schedule.stage == 2,
        Error::Invalid(format!("unknown bridge stage {}", schedule.stage))
    );
    ensure!(!samples.is_empty(), Error::Invalid("no bridge samples".into()));
    ensure!(schedule.batch > 0, Error::Config("batch size must be positive".into()));
    if schedule.stage == 2 {
        state.lm.tiny_mut()?;
    } else {
        state.lm.tiny()?;
    }
    let stage = schedule.stage;
    let n_ft = state.f_t.len();
    let mut opt_ft = Adam::new(AdamConfig::with_lr(schedule.lr), &state.f_t);
    let mut opt_lm = Adam::new(AdamConfig::with_lr(schedule.lr), state.lm.tiny()?.params());
    let ft_all: Vec<usize> = (0..n_ft).collect();
    let lm_all: Vec<usize> = (0..state.lm.tiny()?.params().len()).collect();
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut r = rng_for(schedule.seed, &[TAG_SHUFFLE, stage as u64]);
    let mut report = BridgeReport {
        stage,
        epoch_losses: Vec::new(),
    };
    for epoch in 0..schedule.epochs {
        order.shuffle(&mut r);
        let mut total = 0.0;
        let mut steps = 0;
        for (step, batch) in order.chunks(schedule.batch).enumerate() {
            let items: Vec<&BridgeSample> = batch.iter().map(|&i| &samples[i]).collect();
            let (loss, grads) = mean_gradients(&items, |s| state.sample_gradients(s, stage))?;
            ensure!(
                loss.is_finite(),
                Error::NonFiniteLoss {
                    epoch,
                    step,
                    value: loss
                }
            );
            opt_ft.step(&mut state.f_t, &ft_all, &grads[..n_ft]);
            if stage == 2 {
                opt_lm.step(state.lm.tiny_mut()?.params_mut(), &lm_all, &grads[n_ft..]);
            }
            total += loss;
            steps += 1;
        }
        let mean = total / steps as f64;
        debug!("bridge stage {stage} epoch {epoch}: loss {mean:.6}");
        report.epoch_losses.push(mean);
    }
    state.f_t.round_to_f32();
    if stage == 2 {
        state.lm.tiny_mut()?.params_mut().round_to_f32();
    }
    if let Some(l) = report.epoch_losses.last() {
        info!("bridge stage {stage} final epoch loss {l:.6}");
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> BridgeConfig {
        let tokenizer = Tokenizer::Bytes;
        BridgeConfig {
            encoder_hidden: 8,
            lm: LmConfig {
                vocab_size: tokenizer.vocab_size(),
                width: 16,
                layers: 1,
                heads: 2,
                mlp_ratio: 2.0,
                context: 128,
                positional: true,
            },
            tokenizer,
            class_only: false,
        }
    }

    #[test]
    fn layout_counts() {
        let tok = Tokenizer::Bytes;
        let rec = ConversationRecord::single("s", TaskKind::Brief, "hello", "abc");
        let l = sequence_layout(&tok, &rec, 10).unwrap();
        let framing = 1 + HUMAN_TAG.len() + BOT_TAG.len() + 1;
        assert_eq!(l.len(), framing + 5 + 10 + 3);
        assert_eq!(l.loss_mask.iter().filter(|m| **m).count(), 4);
        let targets = l.targets();
        assert_eq!(targets.iter().filter(|t| t.is_some()).count(), 4);
        assert_eq!(*targets.last().unwrap(), None);
    }

    #[test]
    fn empty_answer_masks_only_terminator() {
        let tok = Tokenizer::Bytes;
        let rec = ConversationRecord::single("s", TaskKind::Brief, "q", "");
        let l = sequence_layout(&tok, &rec, 2).unwrap();
        let masked: Vec<usize> = (0..l.len()).filter(|i| l.loss_mask[*i]).collect();
        assert_eq!(masked, vec![l.len() - 1]);
        assert_eq!(l.ids[l.len() - 1], Some(tok.eot()));
    }

    #[test]
    fn two_pairs_mask_both_answers() {
        let tok = Tokenizer::Bytes;
        let mut rec = ConversationRecord::single("s", TaskKind::Dialogue, "q1", "ab");
        rec.turns.push(Turn {
            role: Role::Human,
            text: "q2".into(),
        });
        rec.turns.push(Turn {
            role: Role::Bot,
            text: "cde".into(),
        });
        let l = sequence_layout(&tok, &rec, 3).unwrap();
        let masked: Vec<usize> = l
            .ids
            .iter()
            .zip(&l.loss_mask)
            .filter(|(_, m)| **m)
            .map(|(i, _)| i.unwrap())
            .collect();
        let e = tok.eot();
        assert_eq!(masked, vec![97, 98, e, 99, 100, 101, e]);
    }

    #[test]
    fn assembled_sequence_splices_fmri_rows() {
        let state = BridgeState::standin(small_config(), 1).unwrap();
        let rec = ConversationRecord::single("s", TaskKind::Brief, "hi", "ok");
        let fmri = Tensor::filled(3, 16, 7.0);
        let a = state.assemble_sequence(&rec, &fmri).unwrap();
        let start = 1 + HUMAN_TAG.len();
        for r in start..start + 3 {
            assert!(a.embeddings.row(r).iter().all(|v| *v == 7.0));
        }
        let lm = state.lm.tiny().unwrap();
        assert_eq!(a.embeddings.row(0), lm.embedding_row(Tokenizer::Bytes.bos()));
    }

    #[test]
    fn generate_budget_and_determinism() {
        let state = BridgeState::standin(small_config(), 1).unwrap();
        let pen = Tensor::filled(4, 8, 0.5);
        assert_eq!(state.generate(&pen, "Describe.", 0).unwrap(), "");
        let a = state.generate(&pen, "Describe.", 5).unwrap();
        let b = state.generate(&pen, "Describe.", 5).unwrap();
        assert_eq!(a, b);
        let long = "x".repeat(200);
        assert!(state.generate(&pen, &long, 3).is_err());
    }

    #[test]
    fn external_lm_is_a_capability_error() {
        let cfg = small_config();
        let mut state = BridgeState::init(
            cfg,
            LanguageModelHandle::External {
                adapter_id: "llm".into(),
            },
            0,
        )
        .unwrap();
        let sample = BridgeSample {
            penultimate: Tensor::zeros(2, 8),
            record: ConversationRecord::single("s", TaskKind::Brief, "q", "a"),
        };
        let err = train_bridge(&mut state, &[sample], &BridgeSchedule::full(2, 0)).unwrap_err();
        assert!(matches!(err, Error::Capability(_)));
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let state = BridgeState::standin(small_config(), 3).unwrap();
        state.save(dir.path(), serde_json::json!({})).unwrap();
        let back = BridgeState::load(dir.path()).unwrap();
        assert_eq!(back.f_t().bits(), state.f_t().bits());
        assert_eq!(back.lm_params().unwrap().bits(), state.lm_params().unwrap().bits());
    }
}
