//! Flat `key = value` run configuration.
//!
//! Every key has a default (the published setting where one exists). A
//! `preset = desk` line swaps in the CPU-sized defaults first; later keys
//! override it regardless of their position. Unknown keys are errors.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::bridge::{BridgeConfig, BridgeSchedule, LmConfig, Tokenizer};
use crate::embedders::{EmbedKind, EmbedderImpl, EmbedderSpec};
use crate::encoder::{AlignSchedule, EncoderConfig};
use crate::error::{ensure, Error, Result};
use crate::preprocess::PatchSpec;
use crate::reconstruct::{DecoderImpl, DecoderSpec};

/// Where a pluggable component comes from: `standin:<seed>` or
/// `external:<adapter id>`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Component {
    Standin(u64),
    External(String),
}

impl FromStr for Component {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.split_once(':') {
            Some(("standin", seed)) => seed
                .parse()
                .map(Component::Standin)
                .map_err(|_| Error::Config(format!("bad stand-in seed in {s:?}"))),
            Some(("external", id)) if !id.is_empty() => Ok(Component::External(id.to_string())),
            _ if s == "standin" => Ok(Component::Standin(0)),
            _ => Err(Error::Config(format!(
                "component {s:?} is neither standin:<seed> nor external:<adapter>"
            ))),
        }
    }
}

impl std::fmt::Display for Component {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Component::Standin(seed) => write!(f, "standin:{seed}"),
            Component::External(id) => write!(f, "external:{id}"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Preset {
    Full,
    Desk,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub preset: Preset,
    pub seed: u64,
    pub canonical_dims: [usize; 3],
    pub patch_r: usize,
    pub scales: Vec<usize>,
    pub retain_threshold: usize,
    pub d_c: usize,
    pub d_v: usize,
    pub enc_layers: usize,
    pub enc_hidden: usize,
    pub enc_heads: usize,
    pub enc_mlp_ratio: f64,
    pub head_hidden: usize,
    pub alpha: f64,
    pub dropout: f64,
    pub align_lr: f64,
    pub align_epochs: usize,
    pub align_batch: usize,
    pub mixup: bool,
    pub bridge_lr: f64,
    pub bridge_epochs: usize,
    pub bridge_batch_stage1: usize,
    pub bridge_batch_stage2: usize,
    pub lm: Component,
    pub lm_width: usize,
    pub lm_layers: usize,
    pub lm_heads: usize,
    pub lm_context: usize,
    pub image_embedder: Component,
    pub latent_embedder: Component,
    pub text_embedder: Component,
    pub allow_standin_fallback: bool,
    pub decoder: Component,
    pub decoder_size: usize,
    pub beta: f64,
    pub tau: f64,
    /// 0 selects the second-to-last block.
    pub gradcam_layer: usize,
    pub eval_resolution: usize,
}

/// `(key, description)` for every accepted key, in echo order.
pub const KEYS: &[(&str, &str)] = &[
    ("preset", "full or desk; applied before every other key"),
    ("seed", "root seed; stage seeds derive from it"),
    ("canonical_dims", "resize target X,Y,Z"),
    ("patch_r", "cube edge r for single-scale stages"),
    ("scales", "cube edges of the localization models"),
    ("retain_threshold", "minimum mask voxels for a cube to be kept"),
    ("d_c", "image-embedding (and text-embedding) length"),
    ("d_v", "image-latent length"),
    ("enc_layers", "encoder blocks"),
    ("enc_hidden", "encoder width"),
    ("enc_heads", "attention heads"),
    ("enc_mlp_ratio", "block MLP width over encoder width"),
    ("head_hidden", "hidden units of the two alignment heads"),
    ("alpha", "weight of the latent alignment term"),
    ("dropout", "encoder dropout probability"),
    ("align_lr", "alignment learning rate"),
    ("align_epochs", "alignment epochs"),
    ("align_batch", "alignment batch size"),
    ("mixup", "MixUp between trials of a stimulus"),
    ("bridge_lr", "bridge learning rate (both stages)"),
    ("bridge_epochs", "bridge epochs per stage"),
    ("bridge_batch_stage1", "bridge batch size, projection only"),
    ("bridge_batch_stage2", "bridge batch size, joint"),
    ("lm", "language model: standin:<seed> or external:<adapter>"),
    ("lm_width", "stand-in LM width"),
    ("lm_layers", "stand-in LM blocks"),
    ("lm_heads", "stand-in LM heads"),
    ("lm_context", "stand-in LM context length"),
    ("image_embedder", "image-embedding extractor"),
    ("latent_embedder", "image-latent extractor"),
    ("text_embedder", "text-embedding extractor"),
    ("allow_standin_fallback", "use stand-ins when an adapter is missing"),
    ("decoder", "image decoder"),
    ("decoder_size", "decoded image edge in pixels"),
    ("beta", "noise weight of the latent mix"),
    ("tau", "nullification percentile"),
    ("gradcam_layer", "GradCAM block, 0 = second-to-last"),
    ("eval_resolution", "pixel-metric resolution"),
];

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::full()
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("bad value {v:?} for {key}")))
}

fn parse_list(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',').map(|p| parse(key, p.trim())).collect()
}

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn full() -> Self {
        RunConfig {
            preset: Preset::Full,
            seed: 7,
            canonical_dims: [83, 104, 81],
            patch_r: 14,
            scales: vec![14, 12, 10],
            retain_threshold: 1,
            d_c: 768,
            d_v: 16384,
            enc_layers: 16,
            enc_hidden: 768,
            enc_heads: 12,
            enc_mlp_ratio: 4.0,
            head_hidden: 1024,
            alpha: 1.0 / 64.0,
            dropout: 0.0,
            align_lr: 5e-4,
            align_epochs: 30,
            align_batch: 32,
            mixup: true,
            bridge_lr: 2e-5,
            bridge_epochs: 1,
            bridge_batch_stage1: 32,
            bridge_batch_stage2: 24,
            lm: Component::Standin(0),
            lm_width: 128,
            lm_layers: 2,
            lm_heads: 4,
            lm_context: 256,
            image_embedder: Component::Standin(0),
            latent_embedder: Component::Standin(1),
            text_embedder: Component::Standin(0),
            allow_standin_fallback: false,
            decoder: Component::Standin(0),
            decoder_size: 512,
            beta: 0.93,
            tau: 90.0,
            gradcam_layer: 0,
            eval_resolution: 425,
        }
    }

    /// Sizes that train in minutes on one CPU.
    pub fn desk() -> Self {
        RunConfig {
            preset: Preset::Desk,
            canonical_dims: [20, 24, 18],
            patch_r: 6,
            scales: vec![6, 4, 3],
            d_c: 64,
            d_v: 256,
            enc_layers: 4,
            enc_hidden: 128,
            enc_heads: 4,
            head_hidden: 256,
            bridge_lr: 1e-3,
            bridge_epochs: 60,
            bridge_batch_stage1: 8,
            bridge_batch_stage2: 8,
            decoder_size: 64,
            eval_resolution: 64,
            ..RunConfig::full()
        }
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "preset" => {}
            "seed" => self.seed = parse(key, v)?,
            "canonical_dims" => {
                let d = parse_list(key, v)?;
                ensure!(d.len() == 3, Error::Config("canonical_dims needs three values".into()));
                self.canonical_dims = [d[0], d[1], d[2]];
            }
            "patch_r" => self.patch_r = parse(key, v)?,
            "scales" => self.scales = parse_list(key, v)?,
            "retain_threshold" => self.retain_threshold = parse(key, v)?,
            "d_c" => self.d_c = parse(key, v)?,
            "d_v" => self.d_v = parse(key, v)?,
            "enc_layers" => self.enc_layers = parse(key, v)?,
            "enc_hidden" => self.enc_hidden = parse(key, v)?,
            "enc_heads" => self.enc_heads = parse(key, v)?,
            "enc_mlp_ratio" => self.enc_mlp_ratio = parse(key, v)?,
            "head_hidden" => self.head_hidden = parse(key, v)?,
            "alpha" => self.alpha = parse(key, v)?,
            "dropout" => self.dropout = parse(key, v)?,
            "align_lr" => self.align_lr = parse(key, v)?,
            "align_epochs" => self.align_epochs = parse(key, v)?,
            "align_batch" => self.align_batch = parse(key, v)?,
            "mixup" => self.mixup = parse(key, v)?,
            "bridge_lr" => self.bridge_lr = parse(key, v)?,
            "bridge_epochs" => self.bridge_epochs = parse(key, v)?,
            "bridge_batch_stage1" => self.bridge_batch_stage1 = parse(key, v)?,
            "bridge_batch_stage2" => self.bridge_batch_stage2 = parse(key, v)?,
            "lm" => self.lm = v.parse()?,
            "lm_width" => self.lm_width = parse(key, v)?,
            "lm_layers" => self.lm_layers = parse(key, v)?,
            "lm_heads" => self.lm_heads = parse(key, v)?,
            "lm_context" => self.lm_context = parse(key, v)?,
            "image_embedder" => self.image_embedder = v.parse()?,
            "latent_embedder" => self.latent_embedder = v.parse()?,
            "text_embedder" => self.text_embedder = v.parse()?,
            "allow_standin_fallback" => self.allow_standin_fallback = parse(key, v)?,
            "decoder" => self.decoder = v.parse()?,
            "decoder_size" => self.decoder_size = parse(key, v)?,
            "beta" => self.beta = parse(key, v)?,
            "tau" => self.tau = parse(key, v)?,
            "gradcam_layer" => self.gradcam_layer = parse(key, v)?,
            "eval_resolution" => self.eval_resolution = parse(key, v)?,
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    fn get(&self, key: &str) -> String {
        match key {
            "preset" => match self.preset {
                Preset::Full => "full".into(),
                Preset::Desk => "desk".into(),
            },
            "seed" => self.seed.to_string(),
            "canonical_dims" => join(&self.canonical_dims),
            "patch_r" => self.patch_r.to_string(),
            "scales" => join(&self.scales),
            "retain_threshold" => self.retain_threshold.to_string(),
            "d_c" => self.d_c.to_string(),
            "d_v" => self.d_v.to_string(),
            "enc_layers" => self.enc_layers.to_string(),
            "enc_hidden" => self.enc_hidden.to_string(),
            "enc_heads" => self.enc_heads.to_string(),
            "enc_mlp_ratio" => self.enc_mlp_ratio.to_string(),
            "head_hidden" => self.head_hidden.to_string(),
            "alpha" => self.alpha.to_string(),
            "dropout" => self.dropout.to_string(),
            "align_lr" => self.align_lr.to_string(),
            "align_epochs" => self.align_epochs.to_string(),
            "align_batch" => self.align_batch.to_string(),
            "mixup" => self.mixup.to_string(),
            "bridge_lr" => self.bridge_lr.to_string(),
            "bridge_epochs" => self.bridge_epochs.to_string(),
            "bridge_batch_stage1" => self.bridge_batch_stage1.to_string(),
            "bridge_batch_stage2" => self.bridge_batch_stage2.to_string(),
            "lm" => self.lm.to_string(),
            "lm_width" => self.lm_width.to_string(),
            "lm_layers" => self.lm_layers.to_string(),
            "lm_heads" => self.lm_heads.to_string(),
            "lm_context" => self.lm_context.to_string(),
            "image_embedder" => self.image_embedder.to_string(),
            "latent_embedder" => self.latent_embedder.to_string(),
            "text_embedder" => self.text_embedder.to_string(),
            "allow_standin_fallback" => self.allow_standin_fallback.to_string(),
            "decoder" => self.decoder.to_string(),
            "decoder_size" => self.decoder_size.to_string(),
            "beta" => self.beta.to_string(),
            "tau" => self.tau.to_string(),
            "gradcam_layer" => self.gradcam_layer.to_string(),
            "eval_resolution" => self.eval_resolution.to_string(),
            _ => unreachable!("KEYS lists only known keys"),
        }
    }

    /// Parses config text. Blank lines and `#` comments are ignored.
    pub fn parse_text(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value", no + 1))
            })?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        let mut cfg = match pairs.iter().rev().find(|(k, _)| k == "preset") {
            Some((_, v)) if v == "full" => RunConfig::full(),
            Some((_, v)) if v == "desk" => RunConfig::desk(),
            Some((_, v)) => return Err(Error::Config(format!("unknown preset {v:?}"))),
            None => RunConfig::full(),
        };
        for (k, v) in &pairs {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::parse_text(&text)
    }

    /// Applies one `key=value` override.
    pub fn apply(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
        ensure!(
            k.trim() != "preset",
            Error::Config("preset can only be chosen in the config file".into())
        );
        self.set(k.trim(), v.trim())?;
        self.validate()
    }

    /// Every key with its effective value, one per line, in `KEYS` order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, doc) in KEYS {
            let _ = writeln!(out, "# {doc}\n{k} = {}", self.get(k));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            (0.0..=1.0).contains(&self.beta),
            Error::Config(format!("beta {} outside [0, 1]", self.beta))
        );
        ensure!(
            self.tau > 0.0 && self.tau < 100.0,
            Error::Config(format!("tau {} outside (0, 100)", self.tau))
        );
        ensure!(!self.scales.is_empty(), Error::Config("scales is empty".into()));
        ensure!(
            self.align_batch > 0 && self.bridge_batch_stage1 > 0 && self.bridge_batch_stage2 > 0,
            Error::Config("batch sizes must be positive".into())
        );
        ensure!(
            self.gradcam_layer <= self.enc_layers,
            Error::Config(format!(
                "gradcam_layer {} exceeds enc_layers {}",
                self.gradcam_layer, self.enc_layers
            ))
        );
        self.patch_spec(self.patch_r)?;
        self.encoder_config(self.patch_r)?.validate()
    }

    pub fn patch_spec(&self, r: usize) -> Result<PatchSpec> {
        let mut spec = PatchSpec::new(r, self.canonical_dims)?;
        spec.retain_threshold = self.retain_threshold;
        Ok(spec)
    }

    pub fn encoder_config(&self, r: usize) -> Result<EncoderConfig> {
        let spec = self.patch_spec(r)?;
        Ok(EncoderConfig {
            n_layers: self.enc_layers,
            hidden: self.enc_hidden,
            n_heads: self.enc_heads,
            mlp_ratio: self.enc_mlp_ratio,
            patch_dim: spec.patch_dim(),
            pos_table_size: spec.cell_count(),
            d_c: self.d_c,
            d_v: self.d_v,
            head_hidden: self.head_hidden,
            alpha: self.alpha,
            dropout: self.dropout,
        })
    }

    pub fn align_schedule(&self, seed: u64) -> AlignSchedule {
        AlignSchedule {
            lr: self.align_lr,
            epochs: self.align_epochs,
            batch: self.align_batch,
            seed,
            mixup: self.mixup,
        }
    }

    pub fn bridge_schedule(&self, stage: u8, seed: u64) -> BridgeSchedule {
        BridgeSchedule {
            stage,
            lr: self.bridge_lr,
            epochs: self.bridge_epochs,
            batch: if stage == 1 {
                self.bridge_batch_stage1
            } else {
                self.bridge_batch_stage2
            },
            seed,
        }
    }

    /// Bridge over a byte-level stand-in LM of the configured size.
    pub fn bridge_config(&self) -> BridgeConfig {
        let tokenizer = Tokenizer::Bytes;
        BridgeConfig {
            encoder_hidden: self.enc_hidden,
            lm: LmConfig {
                vocab_size: tokenizer.vocab_size(),
                width: self.lm_width,
                layers: self.lm_layers,
                heads: self.lm_heads,
                mlp_ratio: 4.0,
                context: self.lm_context,
                positional: true,
            },
            tokenizer,
            class_only: false,
        }
    }

    pub fn embedder_spec(&self, kind: EmbedKind) -> EmbedderSpec {
        let (component, dim) = match kind {
            EmbedKind::ImageEmbedding => (&self.image_embedder, self.d_c),
            EmbedKind::ImageLatent => (&self.latent_embedder, self.d_v),
            EmbedKind::TextEmbedding => (&self.text_embedder, self.d_c),
        };
        EmbedderSpec {
            kind,
            dim,
            imp: match component {
                Component::Standin(seed) => EmbedderImpl::Standin { seed: *seed },
                Component::External(id) => EmbedderImpl::External {
                    adapter_id: id.clone(),
                },
            },
        }
    }

    pub fn decoder_spec(&self) -> DecoderSpec {
        DecoderSpec {
            imp: match &self.decoder {
                Component::Standin(seed) => DecoderImpl::Standin { seed: *seed },
                Component::External(id) => DecoderImpl::External {
                    adapter_id: id.clone(),
                },
            },
            width: self.decoder_size,
            height: self.decoder_size,
        }
    }

    /// The configured GradCAM block for an encoder with `n_layers` blocks.
    pub fn gradcam_layer_for(&self, n_layers: usize) -> usize {
        if self.gradcam_layer == 0 {
            crate::localize::default_layer(n_layers)
        } else {
            self.gradcam_layer
        }
    }
}
