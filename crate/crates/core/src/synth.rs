//! Seeded synthetic worlds: a linear-Gaussian stand-in for recorded BOLD data
//! with known stimulus targets.
//!
//! Each stimulus has a latent `u ~ N(0, I_K)`. Masked voxels respond with
//! `loading_row · u + ε`, unmasked voxels are independent N(0, 1) distractors,
//! and the targets are `z_c = normalize(P_c u)`, `z_v = P_v u`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::StimulusTargets;
use crate::error::{ensure, Error, Result};
use crate::preprocess::TaskMask;
use crate::seed::{mix, rng_for};
use crate::tensor::{dot, l2_norm, Tensor};
use crate::volume::{linear_index, voxel_count, BrainVolume};

const TAG_LOADINGS: u64 = 1;
const TAG_PROJ_C: u64 = 2;
const TAG_PROJ_V: u64 = 3;
const TAG_CENTER: u64 = 4;
const TAG_LATENT: u64 = 5;
const TAG_TRIAL: u64 = 6;

pub const OBJECTS: [&str; 16] = [
    "zebra", "train", "giraffe", "boat", "pizza", "clock", "horse", "kite", "bench", "dog", "cat",
    "bus", "surfboard", "umbrella", "elephant", "bird",
];
const COLORS: [&str; 4] = ["red", "blue", "green", "yellow"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldSpec {
    pub seed: u64,
    pub d_c: usize,
    pub d_v: usize,
    pub grid_dims: [usize; 3],
    pub mask_fraction: f64,
    pub noise_sigma: f64,
    pub latent_dim: usize,
}

impl Default for WorldSpec {
    fn default() -> Self {
        WorldSpec {
            seed: 0,
            d_c: 64,
            d_v: 256,
            grid_dims: [20, 24, 18],
            mask_fraction: 0.15,
            noise_sigma: 0.5,
            latent_dim: 16,
        }
    }
}

/// A region whose voxels respond only to latent coordinate 0, which in turn
/// drives `z_c` along a fixed concept direction.
#[derive(Clone, Debug, PartialEq)]
pub struct PlantedConcept {
    pub region: Vec<bool>,
    pub direction: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticWorld {
    pub spec: WorldSpec,
    pub mask: TaskMask,
    /// Flattened volume indices of the masked voxels, increasing.
    pub mask_voxels: Vec<usize>,
    /// M×K voxel loadings.
    pub loadings: Tensor,
    /// d_c×K.
    pub proj_c: Tensor,
    /// d_v×K.
    pub proj_v: Tensor,
    pub planted: Option<PlantedConcept>,
}

impl SyntheticWorld {
    pub fn m(&self) -> usize {
        self.mask_voxels.len()
    }
}

fn validate(spec: &WorldSpec) -> Result<()> {
    ensure!(
        spec.grid_dims.iter().all(|d| *d > 0),
        Error::Invalid(format!("degenerate grid dims {:?}", spec.grid_dims))
    );
    ensure!(
        spec.d_c > 0 && spec.d_v > 0 && spec.latent_dim > 0,
        Error::Invalid("embedding and latent dims must be positive".into())
    );
    ensure!(
        spec.mask_fraction > 0.0 && spec.mask_fraction <= 1.0,
        Error::Invalid(format!("mask fraction {} outside (0, 1]", spec.mask_fraction))
    );
    ensure!(
        spec.noise_sigma >= 0.0 && spec.noise_sigma.is_finite(),
        Error::Invalid("noise sigma must be a nonnegative real".into())
    );
    Ok(())
}

/// Ellipsoidal blob of exactly ⌊fraction·X·Y·Z⌋ voxels: voxels are ranked by
/// normalized ellipsoidal distance to a seeded posterior-leaning centre.
fn blob_mask(spec: &WorldSpec) -> Result<TaskMask> {
    let dims = spec.grid_dims;
    let total = voxel_count(dims);
    let count = ((spec.mask_fraction * total as f64).floor() as usize).max(1);
    if count >= total {
        return Ok(TaskMask::full(dims));
    }
    let mut rng = rng_for(spec.seed, &[TAG_CENTER]);
    let center = [
        dims[0] as f64 * rng.random_range(0.4..0.6),
        dims[1] as f64 * rng.random_range(0.25..0.4),
        dims[2] as f64 * rng.random_range(0.4..0.6),
    ];
    let mut ranked: Vec<(f64, usize)> = Vec::with_capacity(total);
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let p = [x as f64 + 0.5, y as f64 + 0.5, z as f64 + 0.5];
                let d: f64 = (0..3)
                    .map(|a| ((p[a] - center[a]) / dims[a] as f64).powi(2))
                    .sum();
                ranked.push((d, linear_index(dims, x, y, z)));
            }
        }
    }
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut data = vec![false; total];
    for (_, i) in ranked.into_iter().take(count) {
        data[i] = true;
    }
    TaskMask::new(dims, data)
}

pub fn generate_synthetic_world(spec: &WorldSpec) -> Result<SyntheticWorld> {
    validate(spec)?;
    let mask = blob_mask(spec)?;
    let mask_voxels: Vec<usize> = (0..mask.data.len()).filter(|i| mask.data[*i]).collect();
    let k = spec.latent_dim;
    let loadings = Tensor::randn(mask_voxels.len(), k, 1.0, &mut rng_for(spec.seed, &[TAG_LOADINGS]));
    let proj_c = Tensor::randn(spec.d_c, k, 1.0, &mut rng_for(spec.seed, &[TAG_PROJ_C]));
    let proj_v = Tensor::randn(spec.d_v, k, 1.0, &mut rng_for(spec.seed, &[TAG_PROJ_V]));
    Ok(SyntheticWorld {
        spec: spec.clone(),
        mask,
        mask_voxels,
        loadings,
        proj_c,
        proj_v,
        planted: None,
    })
}

/// World with a concept planted in the low octant `[0, X/2)×[0, Y/2)×[0, Z/2)`.
///
/// Octant voxels load only on latent 0, all other masked voxels only on
/// latents 1..K, column 0 of `P_c` is `direction·√d_c` and the remaining
/// columns are orthogonal to `direction`.
pub fn generate_planted_world(spec: &WorldSpec, direction: &[f64]) -> Result<SyntheticWorld> {
    ensure!(
        direction.len() == spec.d_c,
        Error::Shape(format!(
            "concept direction has {} dims, world d_c is {}",
            direction.len(),
            spec.d_c
        ))
    );
    ensure!(spec.latent_dim >= 2, Error::Invalid("planted world needs K >= 2".into()));
    let norm = l2_norm(direction);
    ensure!(norm > 0.0, Error::Invalid("zero concept direction".into()));
    let unit: Vec<f64> = direction.iter().map(|v| v / norm).collect();

    let mut world = generate_synthetic_world(spec)?;
    let dims = spec.grid_dims;
    let half = dims.map(|d| d.div_ceil(2));
    let mut region = vec![false; voxel_count(dims)];
    for z in 0..half[2] {
        for y in 0..half[1] {
            for x in 0..half[0] {
                region[linear_index(dims, x, y, z)] = true;
            }
        }
    }
    let k = spec.latent_dim;
    for (row, &vox) in world.mask_voxels.iter().enumerate() {
        let r = world.loadings.row_mut(row);
        if region[vox] {
            // Keep the first loading (rescaled so octant voxels carry comparable variance).
            let w0 = r[0] * (k as f64).sqrt();
            r.iter_mut().for_each(|v| *v = 0.0);
            r[0] = w0;
        } else {
            r[0] = 0.0;
        }
    }
    let scale = (spec.d_c as f64).sqrt();
    for i in 0..spec.d_c {
        world.proj_c.set(i, 0, unit[i] * scale);
    }
    for col in 1..k {
        let c: Vec<f64> = (0..spec.d_c).map(|i| world.proj_c.get(i, col)).collect();
        let along = dot(&c, &unit);
        for i in 0..spec.d_c {
            world.proj_c.set(i, col, c[i] - along * unit[i]);
        }
    }
    world.planted = Some(PlantedConcept {
        region,
        direction: unit,
    });
    Ok(world)
}

/// Stimulus latent, a pure function of (world seed, stimulus seed).
pub fn stimulus_latent(world: &SyntheticWorld, stimulus_seed: u64) -> Vec<f64> {
    let mut rng = rng_for(world.spec.seed, &[TAG_LATENT, stimulus_seed]);
    (0..world.spec.latent_dim)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect()
}

pub fn stimulus_id(stimulus_seed: u64) -> String {
    format!("stim{stimulus_seed:05}")
}

fn matvec(m: &Tensor, u: &[f64]) -> Vec<f64> {
    (0..m.rows()).map(|i| dot(m.row(i), u)).collect()
}

/// Targets and captions for a latent.
pub fn targets_for_latent(world: &SyntheticWorld, stimulus_seed: u64, u: &[f64]) -> StimulusTargets {
    let zc = matvec(&world.proj_c, u);
    let n = l2_norm(&zc).max(1e-12);
    let z_c: Vec<f64> = zc.iter().map(|v| (v / n) as f32 as f64).collect();
    let z_v: Vec<f64> = matvec(&world.proj_v, u)
        .into_iter()
        .map(|v| v as f32 as f64)
        .collect();
    let (brief, detailed, objects) = captions_for_latent(u);
    StimulusTargets {
        stimulus_id: stimulus_id(stimulus_seed),
        z_c,
        z_v,
        captions: vec![brief, detailed],
        objects,
        conversations: Vec::new(),
        image_path: None,
    }
}

/// Deterministic captions: the two strongest latent coordinates name the
/// objects, the sign pattern of the first two picks a colour.
pub fn captions_for_latent(u: &[f64]) -> (String, String, Vec<String>) {
    let mut order: Vec<usize> = (0..u.len()).collect();
    order.sort_by(|a, b| u[*b].total_cmp(&u[*a]).then(a.cmp(b)));
    let first = OBJECTS[order[0] % OBJECTS.len()];
    let second = OBJECTS[order.get(1).copied().unwrap_or(order[0]) % OBJECTS.len()];
    let color_idx = (u[0] > 0.0) as usize * 2 + (u.get(1).copied().unwrap_or(0.0) > 0.0) as usize;
    let color = COLORS[color_idx];
    let brief = format!("a {first} near a {second}");
    let detailed = format!("a photo of a {color} {first} standing near a {second}");
    (brief, detailed, vec![first.to_string(), second.to_string()])
}

/// One trial for a given latent. Noise and distractors are drawn from
/// (world seed, stimulus seed, trial index).
pub fn sample_with_latent(
    world: &SyntheticWorld,
    u: &[f64],
    stimulus_seed: u64,
    trial_index: usize,
    subject_id: &str,
) -> BrainVolume {
    let dims = world.spec.grid_dims;
    let mut rng = rng_for(world.spec.seed, &[TAG_TRIAL, stimulus_seed, trial_index as u64]);
    let mut data = vec![0.0f32; voxel_count(dims)];
    for v in data.iter_mut() {
        *v = rng.sample::<f64, _>(StandardNormal) as f32;
    }
    let sigma = world.spec.noise_sigma;
    for (row, &vox) in world.mask_voxels.iter().enumerate() {
        let eps: f64 = rng.sample(StandardNormal);
        data[vox] = (dot(world.loadings.row(row), u) + sigma * eps) as f32;
    }
    BrainVolume {
        subject_id: subject_id.to_string(),
        dims,
        data,
    }
}

pub fn sample_synthetic_trial(
    world: &SyntheticWorld,
    stimulus_seed: u64,
    trial_index: usize,
) -> (BrainVolume, StimulusTargets) {
    let u = stimulus_latent(world, stimulus_seed);
    let v = sample_with_latent(world, &u, stimulus_seed, trial_index, "subj01");
    (v, targets_for_latent(world, stimulus_seed, &u))
}

/// Masked-voxel signal without noise.
pub fn noiseless_signal(world: &SyntheticWorld, u: &[f64]) -> Vec<f64> {
    (0..world.m()).map(|row| dot(world.loadings.row(row), u)).collect()
}

/// Seed for the `i`-th stimulus of a named split.
pub fn split_stimulus_seed(root: u64, split: &str, i: usize) -> u64 {
    let base = match split {
        "train" => 0,
        "test" => 1_000_000,
        other => mix(root, &[other.len() as u64]) % 1_000_000 + 2_000_000,
    };
    base + i as u64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::pearson;

    fn masked(world: &SyntheticWorld, v: &BrainVolume) -> Vec<f64> {
        world.mask_voxels.iter().map(|i| v.data[*i] as f64).collect()
    }

    #[test]
    fn full_mask_covers_everything() {
        let spec = WorldSpec {
            mask_fraction: 1.0,
            grid_dims: [4, 5, 6],
            ..WorldSpec::default()
        };
        let w = generate_synthetic_world(&spec).unwrap();
        assert_eq!(w.m(), 120);
        assert!(w.mask.data.iter().all(|b| *b));
    }

    #[test]
    fn mask_count_matches_floor() {
        let w = generate_synthetic_world(&WorldSpec::default()).unwrap();
        assert_eq!(w.m(), 1296);
        assert_eq!(w.mask.count(), (0.15f64 * 8640.0).floor() as usize);
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = generate_synthetic_world(&WorldSpec::default()).unwrap();
        let b = generate_synthetic_world(&WorldSpec::default()).unwrap();
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.loadings), bits(&b.loadings));
        assert_eq!(bits(&a.proj_c), bits(&b.proj_c));
        assert_eq!(a.mask, b.mask);
        let c = generate_synthetic_world(&WorldSpec {
            seed: 1,
            ..WorldSpec::default()
        })
        .unwrap();
        assert_ne!(bits(&a.loadings), bits(&c.loadings));
    }

    #[test]
    fn degenerate_specs_rejected() {
        for spec in [
            WorldSpec {
                grid_dims: [0, 2, 2],
                ..WorldSpec::default()
            },
            WorldSpec {
                mask_fraction: 0.0,
                ..WorldSpec::default()
            },
            WorldSpec {
                mask_fraction: 1.2,
                ..WorldSpec::default()
            },
        ] {
            assert!(generate_synthetic_world(&spec).is_err());
        }
    }

    #[test]
    fn zero_noise_trials_agree() {
        let w = generate_synthetic_world(&WorldSpec {
            noise_sigma: 0.0,
            ..WorldSpec::default()
        })
        .unwrap();
        let (a, ta) = sample_synthetic_trial(&w, 3, 0);
        let (b, tb) = sample_synthetic_trial(&w, 3, 1);
        assert_eq!(masked(&w, &a), masked(&w, &b));
        assert_eq!(ta, tb);
        assert_ne!(a.data, b.data, "distractors differ between trials");
        assert!((l2_norm(&ta.z_c) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn distinct_stimuli_are_uncorrelated() {
        let w = generate_synthetic_world(&WorldSpec::default()).unwrap();
        // A single pair correlates like the cosine of two K-dim latents
        // (spread ~1/sqrt(K)); the Monte-Carlo mean over pairs is what vanishes.
        let mut sum = 0.0;
        for pair in 0..50u64 {
            let (a, _) = sample_synthetic_trial(&w, 2 * pair, 0);
            let (b, _) = sample_synthetic_trial(&w, 2 * pair + 1, 0);
            sum += pearson(&masked(&w, &a), &masked(&w, &b)).unwrap();
        }
        assert!((sum / 50.0).abs() < 0.1, "mean r {}", sum / 50.0);
    }

    #[test]
    fn trial_averaging_divides_noise_by_three() {
        let w = generate_synthetic_world(&WorldSpec {
            noise_sigma: 1.0,
            ..WorldSpec::default()
        })
        .unwrap();
        let mut single = 0.0;
        let mut averaged = 0.0;
        for s in 0..20u64 {
            let u = stimulus_latent(&w, s);
            let clean = noiseless_signal(&w, &u);
            let trials: Vec<Vec<f64>> = (0..3)
                .map(|t| masked(&w, &sample_with_latent(&w, &u, s, t, "s")))
                .collect();
            for i in 0..w.m() {
                let mean = (trials[0][i] + trials[1][i] + trials[2][i]) / 3.0;
                single += (trials[0][i] - clean[i]).powi(2);
                averaged += (mean - clean[i]).powi(2);
            }
        }
        let ratio = averaged / single;
        assert!((ratio - 1.0 / 3.0).abs() < 0.2 / 3.0, "ratio {ratio}");
    }

    #[test]
    fn per_voxel_noise_variance_converges() {
        let w = generate_synthetic_world(&WorldSpec {
            noise_sigma: 0.7,
            grid_dims: [6, 6, 6],
            ..WorldSpec::default()
        })
        .unwrap();
        let u = stimulus_latent(&w, 1);
        let vox = w.mask_voxels[0];
        let t = 1000;
        let xs: Vec<f64> = (0..t)
            .map(|k| sample_with_latent(&w, &u, 1, k, "s").data[vox] as f64)
            .collect();
        let mean = xs.iter().sum::<f64>() / t as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (t - 1) as f64;
        let target = 0.49;
        // Standard error of a Gaussian sample variance: σ²·sqrt(2/(T−1)).
        let se = target * (2.0 / (t as f64 - 1.0)).sqrt();
        assert!((var - target).abs() < 3.0 * se, "var {var}");
    }

    #[test]
    fn planted_world_structure() {
        let spec = WorldSpec {
            grid_dims: [8, 8, 8],
            mask_fraction: 1.0,
            d_c: 16,
            d_v: 8,
            latent_dim: 4,
            ..WorldSpec::default()
        };
        let mut dir = vec![0.0; 16];
        dir[3] = 2.0;
        let w = generate_planted_world(&spec, &dir).unwrap();
        let planted = w.planted.as_ref().unwrap();
        assert_eq!(planted.region.iter().filter(|b| **b).count(), 64);
        for (row, &vox) in w.mask_voxels.iter().enumerate() {
            let r = w.loadings.row(row);
            if planted.region[vox] {
                assert!(r[1..].iter().all(|v| *v == 0.0));
            } else {
                assert_eq!(r[0], 0.0);
            }
        }
        for col in 1..4 {
            let c: Vec<f64> = (0..16).map(|i| w.proj_c.get(i, col)).collect();
            assert!(dot(&c, &planted.direction).abs() < 1e-12);
        }
    }
}
