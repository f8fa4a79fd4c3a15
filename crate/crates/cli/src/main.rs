use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use voxelbridge::config::RunConfig;

mod commands;
mod rundir;

use commands::*;

/// Structure-preserving fMRI decoding: synthetic data, alignment, bridge,
/// reconstruction, localization and evaluation.
#[derive(Parser, Debug)]
#[command(name = "voxelbridge", version)]
struct Cli {
    /// Configuration file of `key = value` lines; a `preset` line picks the base.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Override one configuration key (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    /// Directory that relative paths and the `runs/` log resolve against.
    #[arg(long, global = true, default_value = ".")]
    workdir: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a seeded synthetic dataset (volumes, targets, mask, manifests).
    Synth(SynthArgs),
    /// Resize, normalize and patchify every volume of a manifest.
    Preprocess(PreprocessArgs),
    /// Train the encoder against embedding and latent targets.
    TrainAlign(TrainAlignArgs),
    /// Embed an image or a text with the configured embedder.
    Embed(EmbedArgs),
    /// Train the bridge (stage 1: projector, stage 2: projector and LM).
    TrainBridge(TrainBridgeArgs),
    /// Answer one instruction about a scan.
    Chat(ChatArgs),
    /// Reconstruct an image from a scan.
    Reconstruct(ReconstructArgs),
    /// Multi-scale concept heatmap for a scan.
    Localize(LocalizeArgs),
    /// Zero the voxels above a heatmap percentile.
    Nullify(NullifyArgs),
    /// Image and caption metrics over a directory of reconstructions.
    Evaluate(EvaluateArgs),
    /// Run the acceptance checks end to end and print one line per criterion.
    Repro(ReproArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Synth(_) => "synth",
            Command::Preprocess(_) => "preprocess",
            Command::TrainAlign(_) => "train-align",
            Command::Embed(_) => "embed",
            Command::TrainBridge(_) => "train-bridge",
            Command::Chat(_) => "chat",
            Command::Reconstruct(_) => "reconstruct",
            Command::Localize(_) => "localize",
            Command::Nullify(_) => "nullify",
            Command::Evaluate(_) => "evaluate",
            Command::Repro(_) => "repro",
        }
    }
}

/// Everything a command needs besides its own arguments.
pub struct Ctx {
    pub cfg: RunConfig,
    pub workdir: PathBuf,
    pub run_dir: PathBuf,
}

impl Ctx {
    /// `p` as given when absolute, else under the working directory.
    pub fn path(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.workdir.join(p)
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => {
            let p = if p.is_absolute() { p.clone() } else { cli.workdir.join(p) };
            RunConfig::read(&p)?
        }
        None => RunConfig::full(),
    };
    for o in &cli.overrides {
        cfg.apply(o)?;
    }
    Ok(cfg)
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("VOXELBRIDGE_THREADS") {
        let n: usize = v
            .trim()
            .parse()
            .map_err(|_| voxelbridge::Error::Config(format!("VOXELBRIDGE_THREADS={v:?} is not a count")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    Ok(())
}

/// Category of the innermost library error, or `runtime`.
fn category(e: &anyhow::Error) -> &'static str {
    e.chain()
        .find_map(|c| c.downcast_ref::<voxelbridge::Error>())
        .map(|e| e.category())
        .unwrap_or("runtime")
}

/// The context chain down to the first library error, whose own message
/// already names its cause.
fn message(e: &anyhow::Error) -> String {
    let mut parts = Vec::new();
    for c in e.chain() {
        parts.push(c.to_string());
        if c.downcast_ref::<voxelbridge::Error>().is_some() {
            break;
        }
    }
    parts.join(": ").replace('\n', " ")
}

fn report_error(e: &anyhow::Error) {
    let msg = message(e);
    eprintln!("error[{}]: {msg}", category(e));
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Err(e) = init_threads() {
        report_error(&e);
        return ExitCode::FAILURE;
    }
    let cfg = match load_config(&cli) {
        Ok(c) => c,
        Err(e) => {
            report_error(&e);
            return ExitCode::FAILURE;
        }
    };
    let name = cli.command.name();
    let run_dir = match rundir::create(&cli.workdir, name) {
        Ok(d) => d,
        Err(e) => {
            report_error(&e);
            return ExitCode::FAILURE;
        }
    };
    let ctx = Ctx {
        cfg,
        workdir: cli.workdir.clone(),
        run_dir,
    };
    let start = Instant::now();
    let result = match &cli.command {
        Command::Synth(a) => synth(&ctx, a),
        Command::Preprocess(a) => preprocess(&ctx, a),
        Command::TrainAlign(a) => train_align(&ctx, a),
        Command::Embed(a) => embed(&ctx, a),
        Command::TrainBridge(a) => train_bridge(&ctx, a),
        Command::Chat(a) => chat(&ctx, a),
        Command::Reconstruct(a) => reconstruct(&ctx, a),
        Command::Localize(a) => localize(&ctx, a),
        Command::Nullify(a) => nullify(&ctx, a),
        Command::Evaluate(a) => evaluate(&ctx, a),
        Command::Repro(a) => repro(&ctx, a),
    };
    let elapsed = start.elapsed().as_secs_f64();
    let (code, record) = match &result {
        Ok(out) => (
            if out.success { ExitCode::SUCCESS } else { ExitCode::FAILURE },
            rundir::Record::finished(name, &ctx, out, elapsed),
        ),
        Err(e) => (ExitCode::FAILURE, rundir::Record::failed(name, &ctx, category(e), e, elapsed)),
    };
    if let Err(e) = rundir::write_record(&ctx.run_dir, &record) {
        report_error(&e);
        return ExitCode::FAILURE;
    }
    if let Err(e) = &result {
        report_error(e);
    }
    code
}
