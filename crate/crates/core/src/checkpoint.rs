//! Checkpoint directories: one raw float32 LE file per tensor, a
//! `manifest.json` describing them and a `config.json` echoing the model
//! configuration.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{ensure, Error, Result};
use crate::nn::ParamSet;
use crate::tensor::Tensor;
use crate::volume::decode_f32_payload;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub dtype: String,
    pub file: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub kind: String,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

fn file_name(name: &str) -> String {
    format!("{}.f32", name.replace(['/', '\\'], "_"))
}

/// Writes `params` into `dir`. Values are stored as f32; callers that need
/// bit-exact reloads keep their parameters f32-representable.
pub fn save(
    dir: impl AsRef<Path>,
    kind: &str,
    params: &ParamSet,
    config: &impl Serialize,
    meta: serde_json::Value,
) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    ensure!(params.is_finite(), Error::NonFinite("checkpoint tensors".into()));
    let mut entries = Vec::with_capacity(params.len());
    for (name, t) in params.names().iter().zip(params.tensors()) {
        let mut bytes = Vec::with_capacity(4 * t.len());
        for v in t.data() {
            bytes.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        let file = file_name(name);
        let path = dir.join(&file);
        fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
        entries.push(TensorEntry {
            name: name.clone(),
            shape: [t.rows(), t.cols()],
            dtype: "f32le".into(),
            file,
            sha256: hex::encode(Sha256::digest(&bytes)),
        });
    }
    let manifest = CheckpointManifest {
        kind: kind.into(),
        tensors: entries,
        meta,
    };
    write_json(&dir.join("manifest.json"), &manifest)?;
    write_json(&dir.join("config.json"), config)
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Loads a checkpoint of the given kind, verifying every content hash.
pub fn load<C: serde::de::DeserializeOwned>(
    dir: impl AsRef<Path>,
    kind: &str,
) -> Result<(ParamSet, C, serde_json::Value)> {
    let dir = dir.as_ref();
    let manifest: CheckpointManifest = read_json(&dir.join("manifest.json"))?;
    ensure!(
        manifest.kind == kind,
        Error::Format(format!(
            "{} holds a {:?} checkpoint, expected {kind:?}",
            dir.display(),
            manifest.kind
        ))
    );
    let mut params = ParamSet::new();
    for e in &manifest.tensors {
        ensure!(
            e.dtype == "f32le",
            Error::Format(format!("tensor {} has unsupported dtype {}", e.name, e.dtype))
        );
        let path = dir.join(&e.file);
        let bytes = fs::read(&path).map_err(|err| Error::io(&path, err))?;
        let digest = hex::encode(Sha256::digest(&bytes));
        ensure!(
            digest == e.sha256,
            Error::Format(format!("content hash mismatch for tensor {}", e.name))
        );
        let values = decode_f32_payload(&bytes, e.shape[0] * e.shape[1])?;
        ensure!(
            values.iter().all(|v| v.is_finite()),
            Error::NonFinite(format!("tensor {}", e.name))
        );
        params.push(
            e.name.clone(),
            Tensor::from_vec(e.shape[0], e.shape[1], values.into_iter().map(f64::from).collect()),
        );
    }
    let config = read_json(&dir.join("config.json"))?;
    Ok((params, config, manifest.meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng;

    #[test]
    fn round_trip_and_tamper_detection() {
        let dir = tempfile::tempdir().unwrap();
        let mut p = ParamSet::new();
        p.push("a.weight", Tensor::randn(3, 2, 1.0, &mut rng(0)));
        p.push("b", Tensor::filled(1, 4, 0.5));
        p.round_to_f32();
        save(dir.path(), "toy", &p, &serde_json::json!({"k": 1}), serde_json::json!({})).unwrap();
        let (back, cfg, _): (ParamSet, serde_json::Value, _) = load(dir.path(), "toy").unwrap();
        assert_eq!(back.bits(), p.bits());
        assert_eq!(back.names(), p.names());
        assert_eq!(cfg["k"], 1);
        assert!(load::<serde_json::Value>(dir.path(), "other").is_err());

        fs::write(dir.path().join("b.f32"), [0u8; 16]).unwrap();
        assert!(matches!(
            load::<serde_json::Value>(dir.path(), "toy"),
            Err(Error::Format(_))
        ));
    }
}
