//! File-level stages shared by the command line and `repro`: writing a
//! synthetic dataset, preprocessing a manifest into patched signals and
//! loading training samples back.
//!
//! A synthetic dataset directory looks like
//!
//! ```text
//! mask.nvol
//! volumes/<stimulus>_t<k>.nvol
//! targets/<stimulus>/...      targets store, with image.ppm when rendered
//! train.jsonl, test.jsonl     manifests
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::bridge::conversation::{build_instruction_dataset, InstructionTemplates};
use crate::bridge::{BridgeSample, TaskKind};
use crate::dataset::{DatasetManifest, ManifestRecord, TargetsStore};
use crate::encoder::{AlignmentSample, EncoderState};
use crate::error::{ensure, Error, Result};
use crate::image::write_ppm;
use crate::preprocess::{preprocess, read_patched, write_patched, PatchSpec, PatchedSignal, TaskMask};
use crate::reconstruct::{make_bundle, StandinDecoder};
use crate::synth::{sample_synthetic_trial, split_stimulus_seed, SyntheticWorld};
use crate::volume::{read_volume, write_volume, BrainVolume};

pub const TRAIN_MANIFEST: &str = "train.jsonl";
pub const TEST_MANIFEST: &str = "test.jsonl";
pub const MASK_FILE: &str = "mask.nvol";
pub const TARGETS_DIR: &str = "targets";
pub const TRUTH_IMAGE: &str = "image.ppm";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplitSizes {
    pub n_train: usize,
    pub n_test: usize,
    pub trials: usize,
}

fn mkdir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

/// Ground-truth picture of a stimulus: its true targets rendered without
/// noise by the stand-in decoder.
pub fn render_truth(decoder: &StandinDecoder, z_v: &[f64], z_c: &[f64]) -> Result<crate::image::RgbImage> {
    decoder.render(&make_bundle(z_v, z_c, "", 0.0, 0)?)
}

/// Writes volumes, targets, mask and the two manifests. Stimulus seeds come
/// from `split_stimulus_seed(root_seed, split, i)`.
pub fn write_synthetic_dataset(
    world: &SyntheticWorld,
    dir: &Path,
    sizes: SplitSizes,
    root_seed: u64,
    truth_decoder: Option<&StandinDecoder>,
) -> Result<(DatasetManifest, DatasetManifest)> {
    ensure!(sizes.trials > 0, Error::Invalid("at least one trial per stimulus".into()));
    mkdir(&dir.join("volumes"))?;
    write_volume(&world.mask.to_volume(), dir.join(MASK_FILE))?;
    let store = TargetsStore::new(dir.join(TARGETS_DIR), world.spec.d_c, world.spec.d_v);
    let mut manifests = Vec::new();
    for (split, n) in [("train", sizes.n_train), ("test", sizes.n_test)] {
        let mut records = Vec::new();
        for i in 0..n {
            let s = split_stimulus_seed(root_seed, split, i);
            for t in 0..sizes.trials {
                let (v, targets) = sample_synthetic_trial(world, s, t);
                if t == 0 {
                    store.write(&targets)?;
                    if let Some(d) = truth_decoder {
                        let img = render_truth(d, &targets.z_v, &targets.z_c)?;
                        write_ppm(&img, store.root().join(&targets.stimulus_id).join(TRUTH_IMAGE))?;
                    }
                }
                let rel = PathBuf::from("volumes").join(format!("{}_t{t}.nvol", targets.stimulus_id));
                write_volume(&v, dir.join(&rel))?;
                records.push(ManifestRecord {
                    record_id: format!("{}_t{t}", targets.stimulus_id),
                    subject_id: v.subject_id.clone(),
                    volume_path: rel,
                    stimulus_id: targets.stimulus_id.clone(),
                    trial_index: t,
                });
            }
        }
        let manifest = DatasetManifest {
            records,
            targets_path: PathBuf::from(TARGETS_DIR),
            root: dir.to_path_buf(),
        };
        manifest.write(dir.join(if split == "train" { TRAIN_MANIFEST } else { TEST_MANIFEST }))?;
        manifests.push(manifest);
    }
    let test = manifests.pop().expect("two manifests");
    let train = manifests.pop().expect("two manifests");
    Ok((train, test))
}

/// Preprocesses every record of `manifest` into `out_dir/<record>.npat` and
/// writes `out_dir/manifest.jsonl` pointing at them. With `average_trials`
/// the trials of each (stimulus, subject) are averaged first and written as
/// one record with trial index 0.
pub fn preprocess_manifest(
    manifest: &DatasetManifest,
    spec: &PatchSpec,
    mask: &TaskMask,
    out_dir: &Path,
    average_trials: bool,
) -> Result<DatasetManifest> {
    mkdir(out_dir)?;
    let mut groups: BTreeMap<(String, String), Vec<&ManifestRecord>> = BTreeMap::new();
    for r in &manifest.records {
        let key = if average_trials {
            (r.stimulus_id.clone(), r.subject_id.clone())
        } else {
            (r.record_id.clone(), String::new())
        };
        groups.entry(key).or_default().push(r);
    }
    let mut records = Vec::new();
    for members in groups.values() {
        let volumes = members
            .iter()
            .map(|r| read_volume(manifest.resolve(&r.volume_path)))
            .collect::<Result<Vec<BrainVolume>>>()?;
        let v = BrainVolume::mean_of(&volumes)?;
        let first = members[0];
        let record_id = if average_trials {
            format!("{}_{}_avg", first.stimulus_id, first.subject_id)
        } else {
            first.record_id.clone()
        };
        let rel = PathBuf::from(format!("{record_id}.npat"));
        write_patched(&preprocess(&v, spec, mask)?, out_dir.join(&rel))?;
        records.push(ManifestRecord {
            record_id,
            subject_id: first.subject_id.clone(),
            volume_path: rel,
            stimulus_id: first.stimulus_id.clone(),
            trial_index: if average_trials { 0 } else { first.trial_index },
        });
    }
    let targets = manifest.targets_dir();
    let targets_path = fs::canonicalize(&targets).map_err(|e| Error::io(&targets, e))?;
    let out = DatasetManifest {
        records,
        targets_path,
        root: out_dir.to_path_buf(),
    };
    out.write(out_dir.join("manifest.jsonl"))?;
    Ok(out)
}

/// Patched signals with their targets, in manifest order.
pub fn load_alignment_samples(manifest: &DatasetManifest, d_c: usize, d_v: usize) -> Result<Vec<AlignmentSample>> {
    let store = TargetsStore::new(manifest.targets_dir(), d_c, d_v);
    manifest
        .records
        .iter()
        .map(|r| {
            let t = store.read(&r.stimulus_id)?;
            Ok(AlignmentSample {
                signal: read_patched(manifest.resolve(&r.volume_path))?,
                z_c: t.z_c,
                z_v: t.z_v,
                stimulus_id: r.stimulus_id.clone(),
            })
        })
        .collect()
}

/// Instruction records for the stimuli of `samples`, each paired with the
/// frozen encoder's penultimate states of the first sample of its stimulus.
pub fn bridge_samples(
    encoder: &EncoderState,
    samples: &[AlignmentSample],
    store: &TargetsStore,
    kinds: &[TaskKind],
    seed: u64,
) -> Result<Vec<BridgeSample>> {
    let mut first: BTreeMap<&str, &PatchedSignal> = BTreeMap::new();
    let mut ids = Vec::new();
    for s in samples {
        if !first.contains_key(s.stimulus_id.as_str()) {
            first.insert(&s.stimulus_id, &s.signal);
            ids.push(s.stimulus_id.clone());
        }
    }
    let set = build_instruction_dataset(store, &ids, &InstructionTemplates::default(), kinds, seed)?;
    let mut states = BTreeMap::new();
    set.records
        .into_iter()
        .map(|record| {
            let pen = match states.get(&record.stimulus_id) {
                Some(p) => p,
                None => {
                    let b = first.get(record.stimulus_id.as_str()).ok_or_else(|| {
                        Error::Invalid(format!("no signal for stimulus {}", record.stimulus_id))
                    })?;
                    let p = encoder.forward(b, false)?.penultimate;
                    states.entry(record.stimulus_id.clone()).or_insert(p)
                }
            };
            Ok(BridgeSample {
                penultimate: pen.clone(),
                record,
            })
        })
        .collect()
}
