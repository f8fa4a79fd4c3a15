use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{ArgGroup, Args};
use log::{info, warn};
use serde_json::{json, Value};

use voxelbridge::bridge::{train_bridge as run_bridge_training, BridgeState, LanguageModelHandle, TaskKind};
use voxelbridge::config::Component;
use voxelbridge::dataset::{DatasetManifest, TargetsStore};
use voxelbridge::embedders::{EmbedKind, Embedder};
use voxelbridge::encoder::{train_alignment, EncoderState};
use voxelbridge::eval::{bleu, evaluate_images, rouge_l, ImageMetric, MetricsReport, Protocol};
use voxelbridge::image::{read_ppm, write_ppm, RgbImage};
use voxelbridge::localize::{extract_concept, localize as run_localize, montage, nullify as run_nullify, read_heatmap, write_heatmap};
use voxelbridge::pipeline::{
    bridge_samples, load_alignment_samples, preprocess_manifest, write_synthetic_dataset, SplitSizes, MASK_FILE,
    TRUTH_IMAGE,
};
use voxelbridge::preprocess::{preprocess as preprocess_volume, read_patched, TaskMask};
use voxelbridge::reconstruct::{recon_pipeline, Decoder, StandinDecoder};
use voxelbridge::repro::{compare_runs, repro as run_repro, CriterionResult, ReproOptions, Status, REPORT_TEXT};
use voxelbridge::seed::stage_seed;
use voxelbridge::synth::{generate_planted_world, generate_synthetic_world, WorldSpec};
use voxelbridge::volume::{read_volume, write_f32_file, write_volume};
use voxelbridge::Error;

use crate::{rundir, Ctx};

/// What a finished command reports back for `run.json`.
pub struct Outcome {
    pub success: bool,
    pub seed: Option<u64>,
    pub details: Value,
}

impl Outcome {
    fn ok(details: Value) -> Self {
        Outcome {
            success: true,
            seed: None,
            details,
        }
    }
}

fn ensure_parent(p: &Path) -> Result<()> {
    if let Some(d) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(d).with_context(|| format!("creating {}", d.display()))?;
    }
    Ok(())
}

fn load_encoder(path: &Path) -> Result<EncoderState> {
    let (enc, _) = EncoderState::load(path).with_context(|| format!("loading encoder {}", path.display()))?;
    Ok(enc)
}

// ---------------------------------------------------------------------------

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Output dataset directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 256)]
    pub n_train: usize,
    #[arg(long, default_value_t = 64)]
    pub n_test: usize,
    /// Repeated trials per stimulus.
    #[arg(long, default_value_t = 3)]
    pub trials: usize,
    /// Fraction of voxels inside the task mask.
    #[arg(long, default_value_t = 0.15)]
    pub mask_fraction: f64,
    /// Standard deviation of the per-trial voxel noise.
    #[arg(long, default_value_t = 0.5)]
    pub noise: f64,
    #[arg(long, default_value_t = 16)]
    pub latent_dim: usize,
    /// Plant this concept in the first octant of the volume.
    #[arg(long, value_name = "CONCEPT")]
    pub planted: Option<String>,
}

pub fn synth(ctx: &Ctx, a: &SynthArgs) -> Result<Outcome> {
    let cfg = &ctx.cfg;
    let seed = stage_seed(cfg.seed, "synth");
    let spec = WorldSpec {
        seed,
        d_c: cfg.d_c,
        d_v: cfg.d_v,
        grid_dims: cfg.canonical_dims,
        mask_fraction: a.mask_fraction,
        noise_sigma: a.noise,
        latent_dim: a.latent_dim,
    };
    let world = match &a.planted {
        Some(concept) => {
            let text = Embedder::new(cfg.embedder_spec(EmbedKind::TextEmbedding), cfg.allow_standin_fallback)?;
            generate_planted_world(&spec, &text.embed_text(concept)?)?
        }
        None => generate_synthetic_world(&spec)?,
    };
    let decoder = match cfg.decoder {
        Component::Standin(s) => Some(StandinDecoder::new(cfg.decoder_size, cfg.decoder_size, s)?),
        Component::External(_) => {
            warn!("ground-truth images need the stand-in decoder; none written");
            None
        }
    };
    let out = ctx.path(&a.out);
    let sizes = SplitSizes {
        n_train: a.n_train,
        n_test: a.n_test,
        trials: a.trials,
    };
    let (train, test) = write_synthetic_dataset(&world, &out, sizes, seed, decoder.as_ref())?;
    println!(
        "wrote {} training and {} test records to {}",
        train.records.len(),
        test.records.len(),
        out.display()
    );
    Ok(Outcome::ok(json!({
        "out": out,
        "train_records": train.records.len(),
        "test_records": test.records.len(),
        "planted": a.planted,
    })))
}

// ---------------------------------------------------------------------------

#[derive(Args, Debug)]
pub struct PreprocessArgs {
    /// Manifest of raw volumes.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Task mask; defaults to mask.nvol next to the manifest.
    #[arg(long)]
    pub mask: Option<PathBuf>,
    /// Output directory for .npat files and manifest.jsonl.
    #[arg(long)]
    pub out: PathBuf,
    /// Cube side; defaults to the configured patch_r.
    #[arg(long)]
    pub r: Option<usize>,
    /// Average the trials of each stimulus before patching.
    #[arg(long)]
    pub average_trials: bool,
}

pub fn preprocess(ctx: &Ctx, a: &PreprocessArgs) -> Result<Outcome> {
    let path = ctx.path(&a.manifest);
    let manifest = DatasetManifest::read(&path)?;
    let mask_path = match &a.mask {
        Some(m) => ctx.path(m),
        None => path.parent().unwrap_or(Path::new(".")).join(MASK_FILE),
    };
    let mask = TaskMask::read(&mask_path)?;
    let spec = ctx.cfg.patch_spec(a.r.unwrap_or(ctx.cfg.patch_r))?;
    let out = ctx.path(&a.out);
    let done = preprocess_manifest(&manifest, &spec, &mask, &out, a.average_trials)?;
    println!("wrote {} patched records to {}", done.records.len(), out.display());
    Ok(Outcome::ok(json!({
        "out": out,
        "records": done.records.len(),
        "r": spec.r,
        "average_trials": a.average_trials,
    })))
}

// ---------------------------------------------------------------------------

#[derive(Args, Debug)]
pub struct TrainAlignArgs {
    /// Preprocessed training manifest.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Preprocessed validation manifest.
    #[arg(long)]
    pub val: Option<PathBuf>,
    /// Checkpoint directory.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn train_align(ctx: &Ctx, a: &TrainAlignArgs) -> Result<Outcome> {
    let cfg = &ctx.cfg;
    let train = load_alignment_samples(&DatasetManifest::read(ctx.path(&a.manifest))?, cfg.d_c, cfg.d_v)?;
    let val = match &a.val {
        Some(v) => load_alignment_samples(&DatasetManifest::read(ctx.path(v))?, cfg.d_c, cfg.d_v)?,
        None => Vec::new(),
    };
    let first = train.first().ok_or_else(|| Error::Invalid("the training manifest is empty".into()))?;
    let spec = &first.signal.spec;
    let mut ec = cfg.encoder_config(cfg.patch_r)?;
    ec.patch_dim = spec.patch_dim();
    ec.pos_table_size = spec.cell_count();
    let seed = stage_seed(cfg.seed, "train-align");
    let (enc, report) = train_alignment(ec, &train, &val, &cfg.align_schedule(seed))?;
    let out = ctx.path(&a.out);
    enc.save(&out, json!({ "stage": "align", "seed": seed }))?;
    println!(
        "alignment loss {:.6} -> {:.6}; checkpoint {}",
        report.initial_loss,
        report.final_loss,
        out.display()
    );
    Ok(Outcome {
        success: true,
        seed: Some(seed),
        details: json!({ "out": out, "report": report }),
    })
}

// ---------------------------------------------------------------------------

#[derive(Args, Debug)]
#[command(group(ArgGroup::new("source").required(true).args(["input", "text"])))]
pub struct EmbedArgs {
    /// image_embedding, image_latent or text_embedding.
    #[arg(long)]
    pub kind: String,
    /// Image to embed (PPM).
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Text to embed.
    #[arg(long)]
    pub text: Option<String>,
    /// Output vector file (little-endian f32).
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_kind(s: &str) -> Result<EmbedKind> {
    Ok(match s {
        "image_embedding" => EmbedKind::ImageEmbedding,
        "image_latent" => EmbedKind::ImageLatent,
        "text_embedding" => EmbedKind::TextEmbedding,
        other => return Err(Error::Invalid(format!("unknown embedding kind {other:?}")).into()),
    })
}

pub fn embed(ctx: &Ctx, a: &EmbedArgs) -> Result<Outcome> {
    let kind = parse_kind(&a.kind)?;
    let e = Embedder::new(ctx.cfg.embedder_spec(kind), ctx.cfg.allow_standin_fallback)?;
    let v = match (&a.input, &a.text) {
        (Some(p), _) => e.embed_image(&read_ppm(ctx.path(p))?)?,
        (None, Some(t)) => e.embed_text(t)?,
        (None, None) => unreachable!("clap requires a source"),
    };
    let out = ctx.path(&a.out);
    ensure_parent(&out)?;
    write_f32_file(&out, &v.iter().map(|x| *x as f32).collect::<Vec<_>>())?;
    println!("{}-dimensional {} written to {}", v.len(), a.kind, out.display());
    Ok(Outcome::ok(json!({ "out": out, "dim": v.len() })))
}

// ---------------------------------------------------------------------------

#[derive(Args, Debug)]
pub struct TrainBridgeArgs {
    /// Frozen encoder checkpoint.
    #[arg(long)]
    pub encoder: PathBuf,
    /// Preprocessed manifest whose stimuli provide the conversations.
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    pub stage: u8,
    /// Bridge checkpoint to continue from (stage 2 usually starts from stage 1).
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Task kinds to train on.
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "brief,detailed,dialogue,reasoning,recon_prompt,concept_loc"
    )]
    pub kinds: Vec<String>,
}

fn fresh_bridge(ctx: &Ctx, seed: u64) -> Result<BridgeState> {
    let bcfg = ctx.cfg.bridge_config();
    Ok(match &ctx.cfg.lm {
        Component::Standin(s) => BridgeState::standin(bcfg, voxelbridge::seed::mix(seed, &[*s]))?,
        Component::External(id) => BridgeState::init(
            bcfg,
            LanguageModelHandle::External {
                adapter_id: id.clone(),
            },
            seed,
        )?,
    })
}

pub fn train_bridge(ctx: &Ctx, a: &TrainBridgeArgs) -> Result<Outcome> {
    let cfg = &ctx.cfg;
    let kinds = a.kinds.iter().map(|k| TaskKind::parse(k.trim())).collect::<voxelbridge::Result<Vec<_>>>()?;
    let encoder = load_encoder(&ctx.path(&a.encoder))?;
    let manifest = DatasetManifest::read(ctx.path(&a.manifest))?;
    let samples = load_alignment_samples(&manifest, encoder.config.d_c, encoder.config.d_v)?;
    let store = TargetsStore::new(manifest.targets_dir(), encoder.config.d_c, encoder.config.d_v);
    let seed = stage_seed(cfg.seed, &format!("train-bridge-{}", a.stage));
    let data = bridge_samples(&encoder, &samples, &store, &kinds, seed)?;
    let mut bridge = match &a.init {
        Some(p) => BridgeState::load(ctx.path(p))?,
        None => {
            if a.stage == 2 {
                warn!("stage 2 without --init starts from an untrained projector");
            }
            fresh_bridge(ctx, stage_seed(cfg.seed, "bridge-init"))?
        }
    };
    let report = run_bridge_training(&mut bridge, &data, &cfg.bridge_schedule(a.stage, seed))?;
    let accuracy = bridge.answer_accuracy(&data)?;
    let out = ctx.path(&a.out);
    bridge.save(&out, json!({ "stage": a.stage, "seed": seed }))?;
    println!(
        "stage {} on {} conversations: final loss {:.6}, answer accuracy {:.2}%; checkpoint {}",
        a.stage,
        data.len(),
        report.epoch_losses.last().copied().unwrap_or(f64::NAN),
        100.0 * accuracy,
        out.display()
    );
    Ok(Outcome {
        success: true,
        seed: Some(seed),
        details: json!({ "out": out, "conversations": data.len(), "report": report, "answer_accuracy": accuracy }),
    })
}

// ---------------------------------------------------------------------------

#[derive(Args, Debug)]
pub struct ChatArgs {
    /// Encoder checkpoint the bridge was trained on.
    #[arg(long)]
    pub encoder: PathBuf,
    /// Bridge checkpoint.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Patched scan (.npat).
    #[arg(long)]
    pub fmri: PathBuf,
    #[arg(long)]
    pub instruction: String,
    #[arg(long, default_value_t = 64)]
    pub max_tokens: usize,
}

pub fn chat(ctx: &Ctx, a: &ChatArgs) -> Result<Outcome> {
    let encoder = load_encoder(&ctx.path(&a.encoder))?;
    let bridge = BridgeState::load(ctx.path(&a.ckpt))?;
    let b = read_patched(ctx.path(&a.fmri))?;
    let states = encoder.forward(&b, false)?.penultimate;
    let answer = bridge.generate(&states, &a.instruction, a.max_tokens)?;
    println!("{answer}");
    Ok(Outcome::ok(json!({ "instruction": a.instruction, "answer": answer })))
}

// ---------------------------------------------------------------------------

#[derive(Args, Debug)]
#[command(group(ArgGroup::new("prompting").required(true).args(["bridge", "no_llm"])))]
pub struct ReconstructArgs {
    /// Patched scan (.npat).
    #[arg(long)]
    pub fmri: PathBuf,
    #[arg(long)]
    pub encoder: PathBuf,
    /// Bridge checkpoint that writes the text prompt.
    #[arg(long)]
    pub bridge: Option<PathBuf>,
    /// Reconstruct without a text prompt.
    #[arg(long)]
    pub no_llm: bool,
    /// Noise fraction of the initial latent, in [0, 1]; defaults to the configured beta.
    #[arg(long)]
    pub beta: Option<f64>,
    /// Noise seed; defaults to one derived from the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output image (PPM).
    #[arg(long)]
    pub out: PathBuf,
}

pub fn reconstruct(ctx: &Ctx, a: &ReconstructArgs) -> Result<Outcome> {
    let cfg = &ctx.cfg;
    let encoder = load_encoder(&ctx.path(&a.encoder))?;
    let bridge = a.bridge.as_ref().map(|p| BridgeState::load(ctx.path(p))).transpose()?;
    let decoder = Decoder::new(&cfg.decoder_spec())?;
    let b = read_patched(ctx.path(&a.fmri))?;
    let beta = a.beta.unwrap_or(cfg.beta);
    let seed = a.seed.unwrap_or_else(|| stage_seed(cfg.seed, "reconstruct"));
    let (img, prompt) = recon_pipeline(&encoder, bridge.as_ref(), &decoder, &b, beta, seed)?;
    let out = ctx.path(&a.out);
    ensure_parent(&out)?;
    write_ppm(&img, &out)?;
    if !prompt.is_empty() {
        println!("prompt: {prompt}");
    }
    println!("wrote {}", out.display());
    Ok(Outcome {
        success: true,
        seed: Some(seed),
        details: json!({ "out": out, "beta": beta, "prompt": prompt }),
    })
}

// ---------------------------------------------------------------------------

#[derive(Args, Debug)]
#[command(group(ArgGroup::new("what").required(true).args(["concept", "instruction"])))]
pub struct LocalizeArgs {
    /// Concept to localize.
    #[arg(long)]
    pub concept: Option<String>,
    /// Free-form instruction; needs --bridge unless it follows the
    /// localization template.
    #[arg(long)]
    pub instruction: Option<String>,
    /// Bridge checkpoint used to read a concept out of --instruction.
    #[arg(long)]
    pub bridge: Option<PathBuf>,
    /// Raw scan (.nvol).
    #[arg(long)]
    pub fmri: PathBuf,
    /// Task mask.
    #[arg(long)]
    pub mask: PathBuf,
    /// Encoder checkpoint, one per scale (repeatable).
    #[arg(long)]
    pub ckpt: Vec<PathBuf>,
    /// Encoder checkpoint at cube side 14.
    #[arg(long)]
    pub ckpt14: Option<PathBuf>,
    /// Encoder checkpoint at cube side 12.
    #[arg(long)]
    pub ckpt12: Option<PathBuf>,
    /// Encoder checkpoint at cube side 10.
    #[arg(long)]
    pub ckpt10: Option<PathBuf>,
    /// Encoder block whose tokens are weighted; defaults to the configured layer.
    #[arg(long)]
    pub layer: Option<usize>,
    /// Heatmap output (.nvol); a .meta.json and a .ppm montage go next to it.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn localize(ctx: &Ctx, a: &LocalizeArgs) -> Result<Outcome> {
    let cfg = &ctx.cfg;
    let paths: Vec<PathBuf> = a
        .ckpt14
        .iter()
        .chain(&a.ckpt12)
        .chain(&a.ckpt10)
        .chain(&a.ckpt)
        .map(|p| ctx.path(p))
        .collect();
    if paths.is_empty() {
        return Err(Error::Invalid("at least one encoder checkpoint is needed".into()).into());
    }
    let encoders = paths.iter().map(|p| load_encoder(p)).collect::<Result<Vec<_>>>()?;
    let volume = read_volume(ctx.path(&a.fmri))?;
    let mask = TaskMask::read(ctx.path(&a.mask))?;
    let signals = encoders
        .iter()
        .zip(&paths)
        .map(|(e, p)| {
            let spec = e.patch_spec.as_ref().ok_or_else(|| {
                Error::Invalid(format!("checkpoint {} records no patch layout", p.display()))
            })?;
            Ok(preprocess_volume(&volume, spec, &mask)?)
        })
        .collect::<Result<Vec<_>>>()?;
    let concept = match (&a.concept, &a.instruction) {
        (Some(c), _) => c.clone(),
        (None, Some(instr)) => {
            let bridge = a.bridge.as_ref().map(|p| BridgeState::load(ctx.path(p))).transpose()?;
            let states = match &bridge {
                Some(_) => Some(encoders[0].forward(&signals[0], false)?.penultimate),
                None => None,
            };
            extract_concept(instr, bridge.as_ref().zip(states.as_ref()))?
        }
        (None, None) => unreachable!("clap requires a concept or an instruction"),
    };
    let text = Embedder::new(cfg.embedder_spec(EmbedKind::TextEmbedding), cfg.allow_standin_fallback)?;
    let layer = a.layer.or((cfg.gradcam_layer != 0).then_some(cfg.gradcam_layer));
    let refs: Vec<&EncoderState> = encoders.iter().collect();
    let heat = run_localize(&refs, &signals, &concept, &text, layer)?;
    let out = ctx.path(&a.out);
    ensure_parent(&out)?;
    write_heatmap(&heat, cfg.tau, &out)?;
    let picture = out.with_extension("ppm");
    write_ppm(&montage(&heat), &picture)?;
    println!(
        "heatmap for {concept:?} over scales {:?} written to {}",
        heat.scales_used,
        out.display()
    );
    Ok(Outcome::ok(json!({
        "out": out,
        "montage": picture,
        "concept": concept,
        "scales": heat.scales_used,
    })))
}

// ---------------------------------------------------------------------------

#[derive(Args, Debug)]
pub struct NullifyArgs {
    /// Heatmap written by `localize`.
    #[arg(long)]
    pub heat: PathBuf,
    /// Percentile above which voxels are zeroed; defaults to the configured tau.
    #[arg(long)]
    pub tau: Option<f64>,
    /// Raw scan to edit.
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn nullify(ctx: &Ctx, a: &NullifyArgs) -> Result<Outcome> {
    let (heat, meta) = read_heatmap(ctx.path(&a.heat))?;
    let tau = a.tau.unwrap_or(ctx.cfg.tau);
    let v = read_volume(ctx.path(&a.input))?;
    let nulled = run_nullify(&v, &heat, tau)?;
    let zeroed = v
        .data
        .iter()
        .zip(&nulled.data)
        .filter(|(a, b)| a != b)
        .count();
    let out = ctx.path(&a.out);
    ensure_parent(&out)?;
    write_volume(&nulled, &out)?;
    println!(
        "zeroed {zeroed} voxels above the {tau}th percentile of the {:?} heatmap; wrote {}",
        meta.concept,
        out.display()
    );
    Ok(Outcome::ok(json!({ "out": out, "tau": tau, "changed_voxels": zeroed, "concept": meta.concept })))
}

// ---------------------------------------------------------------------------

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// Directory of reconstructed images (.ppm).
    #[arg(long)]
    pub recon: Option<PathBuf>,
    /// Directory holding <name>.ppm or <name>/image.ppm for each reconstruction.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// Comma-separated: pixcorr, ssim, twoway, bleu, rouge.
    #[arg(long, value_delimiter = ',', default_value = "pixcorr,ssim,twoway")]
    pub metrics: Vec<String>,
    /// Candidate captions, one `id<TAB>text` per line.
    #[arg(long)]
    pub candidates: Option<PathBuf>,
    /// Reference captions, `id<TAB>text`; an id may repeat.
    #[arg(long)]
    pub references: Option<PathBuf>,
    /// Comparison resolution; defaults to the configured eval_resolution.
    #[arg(long)]
    pub resolution: Option<usize>,
    /// Report path (JSON).
    #[arg(long)]
    pub out: PathBuf,
}

fn truth_for(truth_dir: &Path, name: &str) -> Result<PathBuf> {
    let flat = truth_dir.join(format!("{name}.ppm"));
    if flat.is_file() {
        return Ok(flat);
    }
    let nested = truth_dir.join(name).join(TRUTH_IMAGE);
    if nested.is_file() {
        return Ok(nested);
    }
    Err(Error::Invalid(format!("no ground truth for {name:?} in {}", truth_dir.display())).into())
}

fn read_tsv(path: &Path) -> Result<BTreeMap<String, Vec<String>>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for (no, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (id, caption) = line
            .split_once('\t')
            .ok_or_else(|| Error::Format(format!("{} line {}: expected id<TAB>text", path.display(), no + 1)))?;
        out.entry(id.to_string()).or_default().push(caption.to_string());
    }
    Ok(out)
}

pub fn evaluate(ctx: &Ctx, a: &EvaluateArgs) -> Result<Outcome> {
    let cfg = &ctx.cfg;
    let resolution = a.resolution.unwrap_or(cfg.eval_resolution);
    let mut image_metrics = Vec::new();
    let mut text_metrics = BTreeSet::new();
    for m in &a.metrics {
        match m.trim() {
            "bleu" | "rouge" => {
                text_metrics.insert(m.trim().to_string());
            }
            other => image_metrics.push(ImageMetric::parse(other)?),
        }
    }
    let mut report = if image_metrics.is_empty() {
        None
    } else {
        let (Some(recon_dir), Some(truth_dir)) = (&a.recon, &a.truth) else {
            bail!(Error::Invalid("image metrics need --recon and --truth".into()));
        };
        let recon_dir = ctx.path(recon_dir);
        let truth_dir = ctx.path(truth_dir);
        let mut names: Vec<String> = fs::read_dir(&recon_dir)
            .with_context(|| format!("listing {}", recon_dir.display()))?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.extension().is_some_and(|x| x == "ppm"))
            .filter_map(|p| p.file_stem().and_then(|s| s.to_str()).map(str::to_string))
            .collect();
        names.sort();
        let mut recon = Vec::new();
        let mut truth: Vec<RgbImage> = Vec::new();
        for n in &names {
            recon.push(read_ppm(recon_dir.join(format!("{n}.ppm")))?);
            truth.push(read_ppm(truth_for(&truth_dir, n)?)?);
        }
        let embedder = if image_metrics.contains(&ImageMetric::TwoWay) {
            Some(Embedder::new(cfg.embedder_spec(EmbedKind::ImageEmbedding), cfg.allow_standin_fallback)?)
        } else {
            None
        };
        info!("evaluating {} reconstructions", names.len());
        Some(evaluate_images(&recon, &truth, &image_metrics, resolution, embedder.as_ref(), cfg.seed)?)
    };
    if !text_metrics.is_empty() {
        let (Some(c), Some(r)) = (&a.candidates, &a.references) else {
            bail!(Error::Invalid("caption metrics need --candidates and --references".into()));
        };
        let cands = read_tsv(&ctx.path(c))?;
        let refs = read_tsv(&ctx.path(r))?;
        let mut b = vec![Vec::new(); 4];
        let mut rl = Vec::new();
        for (id, texts) in &cands {
            let candidate = &texts[0];
            let rs: Vec<&str> = refs
                .get(id)
                .ok_or_else(|| Error::Invalid(format!("no reference caption for {id:?}")))?
                .iter()
                .map(String::as_str)
                .collect();
            for (n, v) in bleu(candidate, &rs, 4).into_iter().enumerate() {
                b[n].push(v);
            }
            rl.push(rs.iter().map(|r| rouge_l(candidate, r)).fold(0.0, f64::max));
        }
        let rep = report.get_or_insert_with(|| {
            MetricsReport::new(Protocol {
                n_items: cands.len(),
                comparisons_per_item: 0,
                seed: cfg.seed,
                resolution,
                tokenizer: "lowercase, split on whitespace and punctuation".into(),
            })
        });
        if text_metrics.contains("bleu") {
            for (n, v) in b.into_iter().enumerate() {
                rep.insert(&format!("bleu{}", n + 1), v)?;
            }
        }
        if text_metrics.contains("rouge") {
            rep.insert("rouge_l", rl)?;
        }
    }
    let report = report.ok_or_else(|| Error::Invalid("no metrics requested".into()))?;
    let out = ctx.path(&a.out);
    ensure_parent(&out)?;
    fs::write(&out, report.to_json()?).with_context(|| format!("writing {}", out.display()))?;
    for (name, series) in &report.metrics {
        println!("{name:<10} {:.4}", series.aggregate);
    }
    Ok(Outcome::ok(json!({
        "out": out,
        "aggregates": report.metrics.iter().map(|(k, v)| (k.clone(), v.aggregate)).collect::<BTreeMap<_, _>>(),
    })))
}

// ---------------------------------------------------------------------------

#[derive(Args, Debug)]
pub struct ReproArgs {
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Output directory; defaults to the run directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Only these criteria (comma-separated ids); all by default.
    #[arg(long, value_delimiter = ',', value_parser = clap::value_parser!(u8).range(1..=9))]
    pub criteria: Vec<u8>,
    /// Run twice and compare the two runs for the determinism check.
    #[arg(long)]
    pub twice: bool,
}

/// The latest earlier repro in this workdir with the same seed and selection.
fn previous_repro(ctx: &Ctx, seed: u64, selection: &Value) -> Result<Option<PathBuf>> {
    for dir in rundir::list(&ctx.workdir)?.iter().rev() {
        if *dir == ctx.run_dir {
            continue;
        }
        let Some(rec) = rundir::read_record(dir) else { continue };
        if rec["command"] != "repro" || rec["status"] == "error" {
            continue;
        }
        let o = &rec["outputs"];
        if o["seed"] != json!(seed) || o["criteria"] != *selection {
            continue;
        }
        if let Some(out) = o["out"].as_str().map(PathBuf::from) {
            if out.join(REPORT_TEXT).is_file() {
                return Ok(Some(out));
            }
        }
    }
    Ok(None)
}

pub fn repro(ctx: &Ctx, a: &ReproArgs) -> Result<Outcome> {
    let out = a.out.as_ref().map_or_else(|| ctx.run_dir.join("repro"), |p| ctx.path(p));
    let only: Option<BTreeSet<u8>> = (!a.criteria.is_empty()).then(|| a.criteria.iter().copied().collect());
    let mut opts = ReproOptions::new(a.seed, &out);
    opts.only = only.clone();
    let report = run_repro(&opts)?;
    let mut lines: Vec<CriterionResult> = report.criteria.clone();
    let selection = json!(only.as_ref().map(|s| s.iter().collect::<Vec<_>>()));

    if only.as_ref().is_none_or(|s| s.contains(&9)) {
        let c9 = if a.twice {
            let second = out.join("second");
            let mut o2 = opts.clone();
            o2.out_dir = second.clone();
            run_repro(&o2)?;
            compare_runs(&out, &second)?
        } else {
            match previous_repro(ctx, a.seed, &selection)? {
                Some(prev) => compare_runs(&prev, &out)?,
                None => CriterionResult::skipped(
                    9,
                    format!(
                        "no earlier run with seed {} in this workdir; run again or pass --twice to compare",
                        a.seed
                    ),
                ),
            }
        };
        lines.push(c9);
    }

    for c in &lines {
        println!("{}", c.line());
    }
    let text = report.to_text();
    if let Some(i) = text.find("deviations from the published setup") {
        let table = &text[i..];
        let end = table.find("\n\n").unwrap_or(table.len());
        println!("\n{}", &table[..end]);
    }
    for (stage, secs) in &report.timings {
        println!("time {stage}: {secs:.1} s");
    }
    // A skipped determinism check only means there was nothing to compare.
    let success = lines
        .iter()
        .all(|c| c.status == Status::Pass || (c.status == Status::Skipped && c.id == 9));
    Ok(Outcome {
        success,
        seed: Some(a.seed),
        details: json!({
            "seed": a.seed,
            "out": out,
            "criteria": selection,
            "results": lines,
            "timings_seconds": report.timings.iter().cloned().collect::<BTreeMap<_, _>>(),
        }),
    })
}
