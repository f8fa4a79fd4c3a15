//! Dataset manifests and the per-stimulus targets store.
//!
//! A manifest is UTF-8 JSON lines. The first line names the targets store
//! (`{"targets_path": "..."}`); every following line is one record. Relative
//! paths resolve against the manifest's directory.
//!
//! The targets store holds one directory per stimulus:
//!
//! ```text
//! <stimulus_id>/z_c.f32          raw float32 LE
//! <stimulus_id>/z_v.f32          raw float32 LE
//! <stimulus_id>/captions.txt     one caption per line (brief first, then detailed)
//! <stimulus_id>/objects.txt      optional, one object name per line
//! <stimulus_id>/image.ppm        optional ground-truth image
//! <stimulus_id>/conversations/   one record file per conversation
//! ```

use std::collections::{BTreeSet, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bridge::conversation::ConversationRecord;
use crate::error::{ensure, Error, Result};
use crate::volume::{read_f32_file, write_f32_file};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub record_id: String,
    pub subject_id: String,
    pub volume_path: PathBuf,
    pub stimulus_id: String,
    pub trial_index: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ManifestHeader {
    targets_path: PathBuf,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub records: Vec<ManifestRecord>,
    pub targets_path: PathBuf,
    /// Directory relative paths resolve against.
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn targets_dir(&self) -> PathBuf {
        self.resolve(&self.targets_path)
    }

    pub fn stimulus_ids(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.records.iter().map(|r| r.stimulus_id.as_str()).collect();
        set.into_iter().map(String::from).collect()
    }

    /// Record uniqueness plus presence of every referenced stimulus.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for r in &self.records {
            ensure!(
                seen.insert((&r.stimulus_id, &r.subject_id, r.trial_index)),
                Error::Invalid(format!(
                    "duplicate (stimulus, subject, trial) = ({}, {}, {})",
                    r.stimulus_id, r.subject_id, r.trial_index
                ))
            );
        }
        let targets = self.targets_dir();
        for id in self.stimulus_ids() {
            ensure!(
                targets.join(&id).is_dir(),
                Error::Invalid(format!("stimulus {id} missing from targets store"))
            );
        }
        Ok(())
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = serde_json::to_string(&ManifestHeader {
            targets_path: self.targets_path.clone(),
        })?;
        out.push('\n');
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: ManifestHeader = serde_json::from_str(
            lines
                .next()
                .ok_or_else(|| Error::Format("empty manifest".into()))?,
        )?;
        let records = lines
            .map(|l| serde_json::from_str(l).map_err(Error::from))
            .collect::<Result<Vec<ManifestRecord>>>()?;
        let manifest = DatasetManifest {
            records,
            targets_path: header.targets_path,
            root: path.parent().map(Path::to_path_buf).unwrap_or_default(),
        };
        manifest.validate()?;
        Ok(manifest)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StimulusTargets {
    pub stimulus_id: String,
    pub z_c: Vec<f64>,
    pub z_v: Vec<f64>,
    pub captions: Vec<String>,
    pub objects: Vec<String>,
    pub conversations: Vec<String>,
    pub image_path: Option<PathBuf>,
}

impl StimulusTargets {
    pub fn brief_caption(&self) -> Option<&str> {
        self.captions.first().map(String::as_str)
    }

    pub fn detailed_caption(&self) -> Option<&str> {
        self.captions.get(1).or(self.captions.first()).map(String::as_str)
    }
}

/// Directory-backed store of [`StimulusTargets`].
pub struct TargetsStore {
    root: PathBuf,
    d_c: usize,
    d_v: usize,
}

impl TargetsStore {
    pub fn new(root: impl Into<PathBuf>, d_c: usize, d_v: usize) -> Self {
        TargetsStore {
            root: root.into(),
            d_c,
            d_v,
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn write(&self, t: &StimulusTargets) -> Result<()> {
        ensure!(
            t.z_c.len() == self.d_c && t.z_v.len() == self.d_v,
            Error::Shape(format!(
                "targets for {} have dims ({}, {}), store expects ({}, {})",
                t.stimulus_id,
                t.z_c.len(),
                t.z_v.len(),
                self.d_c,
                self.d_v
            ))
        );
        let dir = self.root.join(&t.stimulus_id);
        fs::create_dir_all(dir.join("conversations")).map_err(|e| Error::io(&dir, e))?;
        let to32 = |v: &[f64]| v.iter().map(|x| *x as f32).collect::<Vec<f32>>();
        write_f32_file(dir.join("z_c.f32"), &to32(&t.z_c))?;
        write_f32_file(dir.join("z_v.f32"), &to32(&t.z_v))?;
        write_lines(&dir.join("captions.txt"), &t.captions)?;
        if !t.objects.is_empty() {
            write_lines(&dir.join("objects.txt"), &t.objects)?;
        }
        Ok(())
    }

    pub fn write_conversation(&self, id: &str, record: &ConversationRecord) -> Result<()> {
        let dir = self.root.join(&record.stimulus_id).join("conversations");
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        record.write(dir.join(format!("{id}.json")))
    }

    pub fn read(&self, stimulus_id: &str) -> Result<StimulusTargets> {
        let dir = self.root.join(stimulus_id);
        let z_c: Vec<f64> = read_f32_file(dir.join("z_c.f32"))?
            .into_iter()
            .map(f64::from)
            .collect();
        let z_v: Vec<f64> = read_f32_file(dir.join("z_v.f32"))?
            .into_iter()
            .map(f64::from)
            .collect();
        ensure!(
            z_c.len() == self.d_c && z_v.len() == self.d_v,
            Error::Shape(format!(
                "stored targets for {stimulus_id} have dims ({}, {}), expected ({}, {})",
                z_c.len(),
                z_v.len(),
                self.d_c,
                self.d_v
            ))
        );
        let captions = read_lines_if_exists(&dir.join("captions.txt"))?;
        let objects = read_lines_if_exists(&dir.join("objects.txt"))?;
        let mut conversations = Vec::new();
        let conv_dir = dir.join("conversations");
        if conv_dir.is_dir() {
            for entry in fs::read_dir(&conv_dir).map_err(|e| Error::io(&conv_dir, e))? {
                let entry = entry.map_err(|e| Error::io(&conv_dir, e))?;
                if let Some(stem) = entry.path().file_stem() {
                    conversations.push(stem.to_string_lossy().into_owned());
                }
            }
        }
        conversations.sort();
        let image = dir.join("image.ppm");
        Ok(StimulusTargets {
            stimulus_id: stimulus_id.to_string(),
            z_c,
            z_v,
            captions,
            objects,
            conversations,
            image_path: image.is_file().then_some(image),
        })
    }

    pub fn read_conversation(&self, stimulus_id: &str, id: &str) -> Result<ConversationRecord> {
        ConversationRecord::read(
            self.root
                .join(stimulus_id)
                .join("conversations")
                .join(format!("{id}.json")),
        )
    }
}

fn write_lines(path: &Path, lines: &[String]) -> Result<()> {
    let mut out = String::new();
    for l in lines {
        ensure!(
            !l.contains('\n'),
            Error::Invalid("caption lines must not contain newlines".into())
        );
        out.push_str(l);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn read_lines_if_exists(path: &Path) -> Result<Vec<String>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn targets(id: &str) -> StimulusTargets {
        StimulusTargets {
            stimulus_id: id.into(),
            z_c: vec![0.5, -1.0],
            z_v: vec![1.0, 2.0, 3.0],
            captions: vec!["a zebra".into(), "a photo of a zebra".into()],
            objects: vec!["zebra".into()],
            conversations: vec![],
            image_path: None,
        }
    }

    #[test]
    fn store_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let store = TargetsStore::new(dir.path(), 2, 3);
        store.write(&targets("s0")).unwrap();
        let back = store.read("s0").unwrap();
        assert_eq!(back, targets("s0"));
        assert!(TargetsStore::new(dir.path(), 3, 3).read("s0").is_err());
    }

    #[test]
    fn manifest_round_trip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let store = TargetsStore::new(dir.path().join("targets"), 2, 3);
        store.write(&targets("s0")).unwrap();
        let rec = |trial| ManifestRecord {
            record_id: format!("r{trial}"),
            subject_id: "subj01".into(),
            volume_path: PathBuf::from(format!("volumes/r{trial}.nvol")),
            stimulus_id: "s0".into(),
            trial_index: trial,
        };
        let m = DatasetManifest {
            records: vec![rec(0), rec(1)],
            targets_path: "targets".into(),
            root: dir.path().to_path_buf(),
        };
        let path = dir.path().join("manifest.jsonl");
        m.write(&path).unwrap();
        let back = DatasetManifest::read(&path).unwrap();
        assert_eq!(back.records, m.records);

        let dup = DatasetManifest {
            records: vec![rec(0), rec(0)],
            ..m.clone()
        };
        assert!(dup.validate().is_err());
        let mut missing = m.clone();
        missing.records[0].stimulus_id = "nope".into();
        assert!(missing.validate().is_err());
    }
}
