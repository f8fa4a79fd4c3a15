//! Append-only run log: every invocation gets `runs/NNNN-<command>/` with a
//! `run.json` describing it.

use std::fs;
use std::io::ErrorKind;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde_json::{json, Value};

use crate::commands::Outcome;
use crate::Ctx;

pub const RUNS_DIR: &str = "runs";
pub const RUN_RECORD: &str = "run.json";

fn run_number(name: &str) -> Option<u32> {
    name.split_once('-').and_then(|(n, _)| n.parse().ok())
}

/// Existing run directories in creation order.
pub fn list(workdir: &Path) -> Result<Vec<PathBuf>> {
    let root = workdir.join(RUNS_DIR);
    let mut runs = Vec::new();
    if root.is_dir() {
        for entry in fs::read_dir(&root).with_context(|| format!("listing {}", root.display()))? {
            let entry = entry?;
            if let Some(n) = entry.file_name().to_str().and_then(run_number) {
                runs.push((n, entry.path()));
            }
        }
    }
    runs.sort();
    Ok(runs.into_iter().map(|(_, p)| p).collect())
}

/// A fresh run directory. Existing directories are never reused.
pub fn create(workdir: &Path, command: &str) -> Result<PathBuf> {
    let root = workdir.join(RUNS_DIR);
    fs::create_dir_all(&root).with_context(|| format!("creating {}", root.display()))?;
    let mut next = list(workdir)?
        .iter()
        .filter_map(|p| p.file_name()?.to_str().and_then(run_number))
        .max()
        .map_or(1, |n| n + 1);
    loop {
        let dir = root.join(format!("{next:04}-{command}"));
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == ErrorKind::AlreadyExists => next += 1,
            Err(e) => return Err(e).with_context(|| format!("creating {}", dir.display())),
        }
    }
}

pub struct Record(Value);

impl Record {
    fn base(command: &str, ctx: &Ctx, seed: u64, wall: f64) -> serde_json::Map<String, Value> {
        let mut m = serde_json::Map::new();
        m.insert("command".into(), json!(command));
        m.insert("argv".into(), json!(std::env::args().collect::<Vec<_>>()));
        m.insert("seed".into(), json!(seed));
        m.insert("config".into(), json!(ctx.cfg.to_text()));
        m.insert(
            "versions".into(),
            json!({
                "voxelbridge": env!("CARGO_PKG_VERSION"),
                "arch": std::env::consts::ARCH,
                "os": std::env::consts::OS,
            }),
        );
        m.insert("wall_time_seconds".into(), json!(wall));
        m
    }

    pub fn finished(command: &str, ctx: &Ctx, out: &Outcome, wall: f64) -> Record {
        let mut m = Record::base(command, ctx, out.seed.unwrap_or(ctx.cfg.seed), wall);
        m.insert("status".into(), json!(if out.success { "ok" } else { "failed" }));
        m.insert("outputs".into(), out.details.clone());
        Record(Value::Object(m))
    }

    pub fn failed(command: &str, ctx: &Ctx, category: &str, e: &anyhow::Error, wall: f64) -> Record {
        let mut m = Record::base(command, ctx, ctx.cfg.seed, wall);
        m.insert("status".into(), json!("error"));
        m.insert("error".into(), json!({ "category": category, "message": crate::message(e) }));
        Record(Value::Object(m))
    }
}

pub fn write_record(run_dir: &Path, record: &Record) -> Result<()> {
    let path = run_dir.join(RUN_RECORD);
    let text = serde_json::to_string_pretty(&record.0)? + "\n";
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn read_record(run_dir: &Path) -> Option<Value> {
    let text = fs::read_to_string(run_dir.join(RUN_RECORD)).ok()?;
    serde_json::from_str(&text).ok()
}
