//! Concept localization: token GradCAM on the encoder, multi-scale voxel
//! heatmaps, nullification of the located voxels and heatmap export.

use std::path::{Path, PathBuf};

use log::warn;
use serde::{Deserialize, Serialize};

use crate::bridge::conversation::parse_localization;
use crate::bridge::BridgeState;
use crate::checkpoint::{read_json, write_json};
use crate::embedders::Embedder;
use crate::encoder::EncoderState;
use crate::error::{ensure, Error, Result};
use crate::graph::Graph;
use crate::image::RgbImage;
use crate::preprocess::{paint_cells, PatchedSignal};
use crate::tensor::{l2_norm, Tensor};
use crate::volume::{read_volume, voxel_count, write_volume, BrainVolume};

/// Longest free-form answer decoded when asking the bridge for a concept.
const CONCEPT_TOKENS: usize = 24;

/// Default nullification percentile.
pub const DEFAULT_TAU: f64 = 90.0;

/// The object named by a localization instruction. Instructions in the
/// template form are parsed exactly; anything else is answered by the bridge
/// (given the encoder states of the scan) and cut to its first word.
pub fn extract_concept(instruction: &str, bridge: Option<(&BridgeState, &Tensor)>) -> Result<String> {
    ensure!(
        !instruction.trim().is_empty(),
        Error::Invalid("empty instruction".into())
    );
    if let Some(object) = parse_localization(instruction) {
        return Ok(object);
    }
    let (bridge, states) = bridge.ok_or_else(|| {
        Error::Invalid(format!(
            "instruction {instruction:?} names no concept and no bridge is loaded"
        ))
    })?;
    let answer = bridge.generate(states, instruction, CONCEPT_TOKENS)?;
    let span = answer
        .split_whitespace()
        .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric() && c != '-' && c != '_'))
        .find(|w| !w.is_empty())
        .unwrap_or("");
    ensure!(
        !span.is_empty(),
        Error::Invalid("the bridge answered without a concept".into())
    );
    Ok(span.to_string())
}

/// Which score the gradients are taken of.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScoreProbe {
    /// cos(pred_c, target).
    Cosine,
    /// The same score computed from a detached copy of pred_c, so no
    /// gradient reaches the activations.
    Blocked,
}

/// Default GradCAM layer for an encoder with `n_layers` blocks.
pub fn default_layer(n_layers: usize) -> usize {
    n_layers.saturating_sub(1).max(1)
}

/// Token activations (patch rows only) and the gradient of the score with
/// respect to them.
pub fn activation_gradients(
    encoder: &EncoderState,
    b: &PatchedSignal,
    target: &[f64],
    layer: usize,
    probe: ScoreProbe,
) -> Result<(Tensor, Tensor)> {
    let n_b = encoder.config.n_layers;
    ensure!(
        (1..=n_b).contains(&layer),
        Error::Invalid(format!("GradCAM layer {layer} outside [1, {n_b}]"))
    );
    ensure!(
        target.len() == encoder.config.d_c,
        Error::Shape(format!(
            "target has {} values, encoder predicts {}",
            target.len(),
            encoder.config.d_c
        ))
    );
    ensure!(
        l2_norm(target) > 0.0 && target.iter().all(|v| v.is_finite()),
        Error::Invalid("GradCAM target must be finite with nonzero norm".into())
    );
    let trace = encoder.forward(b, true)?;
    let activation = trace.hidden_states[layer].clone();

    let mut g = Graph::new();
    let vars = encoder.params().bind(&mut g, false);
    let a = g.input(activation.clone(), true);
    let (pred_c, _) = encoder.build_from_layer(&mut g, &vars, a, layer)?;
    let t = g.input(Tensor::row_vector(target.to_vec()), false);
    let pred_c = match probe {
        ScoreProbe::Cosine => pred_c,
        ScoreProbe::Blocked => {
            let detached = g.value(pred_c).clone();
            g.input(detached, false)
        }
    };
    let score = g.cosine(pred_c, t);
    let grads = g.backward(score);
    let grad = grads
        .get(a)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(activation.rows(), activation.cols()));
    let n = b.n();
    Ok((activation.slice_rows(1, n), grad.slice_rows(1, n)))
}

/// `ReLU(Σ_k w_k·A[t, k])` with `w_k` the token mean of `G[·, k]`.
pub fn relevance_from(activations: &Tensor, grads: &Tensor) -> Vec<f64> {
    let (n, h) = activations.shape();
    let mut w = vec![0.0; h];
    for t in 0..n {
        w.iter_mut().zip(grads.row(t)).for_each(|(w, g)| *w += g);
    }
    w.iter_mut().for_each(|v| *v /= n as f64);
    (0..n)
        .map(|t| {
            let s: f64 = activations.row(t).iter().zip(&w).map(|(a, w)| a * w).sum();
            s.max(0.0)
        })
        .collect()
}

/// Per-token relevance (length N) of the patch tokens at `layer` for the
/// cosine between the image-embedding prediction and `target`.
pub fn gradcam(encoder: &EncoderState, b: &PatchedSignal, target: &[f64], layer: usize) -> Result<Vec<f64>> {
    let (a, g) = activation_gradients(encoder, b, target, layer, ScoreProbe::Cosine)?;
    Ok(relevance_from(&a, &g))
}

#[derive(Clone, Debug, PartialEq)]
pub struct VoxelHeatmap {
    /// Canonical-dims field in [0, 1], zero outside retained cubes.
    pub values: BrainVolume,
    pub concept: String,
    pub scales_used: Vec<usize>,
}

impl VoxelHeatmap {
    pub fn max(&self) -> f32 {
        self.values.data.iter().copied().fold(0.0, f32::max)
    }
}

fn max_normalize(v: &mut [f64]) {
    let m = v.iter().copied().fold(0.0, f64::max);
    if m > 0.0 {
        v.iter_mut().for_each(|x| *x /= m);
    }
}

/// Paints per-token relevance into the canonical grid (padding cropped) and
/// max-normalizes.
pub fn paint_relevance(b: &PatchedSignal, relevance: &[f64]) -> Result<Vec<f64>> {
    ensure!(
        relevance.len() == b.n(),
        Error::Shape(format!("{} relevance values for {} tokens", relevance.len(), b.n()))
    );
    let dims = b.spec.canonical_dims;
    let mut field = vec![0.0; voxel_count(dims)];
    paint_cells(b, dims, |k, _| relevance[k], &mut field);
    max_normalize(&mut field);
    Ok(field)
}

/// Every voxel covered by two scales must carry the same source value.
fn check_same_source(signals: &[PatchedSignal]) -> Result<()> {
    let dims = signals[0].spec.canonical_dims;
    let mut seen: Vec<Option<f32>> = vec![None; voxel_count(dims)];
    for (s_idx, s) in signals.iter().enumerate() {
        ensure!(
            s.spec.canonical_dims == dims,
            Error::Invalid(format!(
                "scale {} has canonical dims {:?}, expected {dims:?}",
                s.spec.r, s.spec.canonical_dims
            ))
        );
        let mut painted: Vec<Option<f32>> = vec![None; seen.len()];
        paint_cells(s, dims, |k, off| Some(s.row(k)[off]), &mut painted);
        for (prev, now) in seen.iter_mut().zip(painted) {
            match (*prev, now) {
                (Some(a), Some(b)) if a.to_bits() != b.to_bits() => {
                    return Err(Error::Invalid(format!(
                        "signal {s_idx} (r = {}) does not derive from the same volume",
                        s.spec.r
                    )));
                }
                (None, Some(b)) => *prev = Some(b),
                _ => {}
            }
        }
    }
    Ok(())
}

/// Fused multi-scale heatmap for `concept`. `encoders[i]` reads
/// `signals[i]`; both come from the same source volume.
pub fn localize(
    encoders: &[&EncoderState],
    signals: &[PatchedSignal],
    concept: &str,
    text_embedder: &Embedder,
    layer: Option<usize>,
) -> Result<VoxelHeatmap> {
    ensure!(
        !encoders.is_empty() && encoders.len() == signals.len(),
        Error::Invalid(format!(
            "{} encoders for {} signals",
            encoders.len(),
            signals.len()
        ))
    );
    check_same_source(signals)?;
    let target = text_embedder.embed_text(concept)?;
    let dims = signals[0].spec.canonical_dims;
    let mut fused = vec![0.0; voxel_count(dims)];
    for (enc, b) in encoders.iter().zip(signals) {
        let layer = layer.unwrap_or_else(|| default_layer(enc.config.n_layers));
        let field = paint_relevance(b, &gradcam(enc, b, &target, layer)?)?;
        fused.iter_mut().zip(&field).for_each(|(f, v)| *f += v);
    }
    fused.iter_mut().for_each(|f| *f /= signals.len() as f64);
    max_normalize(&mut fused);
    Ok(VoxelHeatmap {
        values: BrainVolume::new(
            format!("heatmap:{concept}"),
            dims,
            fused.iter().map(|v| *v as f32).collect(),
        )?,
        concept: concept.to_string(),
        scales_used: signals.iter().map(|s| s.spec.r).collect(),
    })
}

/// Linear-interpolation percentile (`q` in [0, 100]) of sorted values.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// The value at the τ-th percentile of the nonzero heatmap entries, or
/// `None` when the heatmap is all zero.
pub fn nullify_threshold(h: &VoxelHeatmap, tau: f64) -> Result<Option<f64>> {
    ensure!(
        tau > 0.0 && tau < 100.0,
        Error::Invalid(format!("percentile {tau} outside (0, 100)"))
    );
    let mut nz: Vec<f64> = h
        .values
        .data
        .iter()
        .filter(|v| **v > 0.0)
        .map(|v| *v as f64)
        .collect();
    if nz.is_empty() {
        return Ok(None);
    }
    nz.sort_by(f64::total_cmp);
    Ok(Some(percentile(&nz, tau)))
}

/// Zeroes every voxel whose heatmap value is at least `threshold`.
pub fn nullify_above(v: &BrainVolume, h: &VoxelHeatmap, threshold: f64) -> Result<BrainVolume> {
    ensure!(
        v.dims == h.values.dims,
        Error::Shape(format!(
            "volume dims {:?} differ from heatmap dims {:?}",
            v.dims, h.values.dims
        ))
    );
    let mut out = v.clone();
    for (x, hv) in out.data.iter_mut().zip(&h.values.data) {
        if *hv as f64 >= threshold {
            *x = 0.0;
        }
    }
    Ok(out)
}

pub fn nullify(v: &BrainVolume, h: &VoxelHeatmap, tau: f64) -> Result<BrainVolume> {
    match nullify_threshold(h, tau)? {
        Some(t) => nullify_above(v, h, t),
        None => {
            warn!("heatmap for {:?} is all zero; volume left unchanged", h.concept);
            ensure!(
                v.dims == h.values.dims,
                Error::Shape(format!(
                    "volume dims {:?} differ from heatmap dims {:?}",
                    v.dims, h.values.dims
                ))
            );
            Ok(v.clone())
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeatmapMeta {
    pub concept: String,
    pub scales: Vec<usize>,
    /// Nullification percentile the heatmap is meant for.
    pub tau: f64,
}

/// `heat.nvol` → `heat.meta.json`.
pub fn meta_path(volume_path: &Path) -> PathBuf {
    let stem = volume_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "heatmap".into());
    volume_path.with_file_name(format!("{stem}.meta.json"))
}

pub fn write_heatmap(h: &VoxelHeatmap, tau: f64, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    write_volume(&h.values, path)?;
    write_json(
        &meta_path(path),
        &HeatmapMeta {
            concept: h.concept.clone(),
            scales: h.scales_used.clone(),
            tau,
        },
    )
}

pub fn read_heatmap(path: impl AsRef<Path>) -> Result<(VoxelHeatmap, HeatmapMeta)> {
    let path = path.as_ref();
    let values = read_volume(path)?;
    let meta: HeatmapMeta = read_json(&meta_path(path))?;
    ensure!(
        values.data.iter().all(|v| (0.0..=1.0).contains(v)),
        Error::Format(format!("{} holds values outside [0, 1]", path.display()))
    );
    Ok((
        VoxelHeatmap {
            values,
            concept: meta.concept.clone(),
            scales_used: meta.scales.clone(),
        },
        meta,
    ))
}

/// Axial slices tiled left to right, top to bottom, in a near-square grid.
/// Heat runs black → red → yellow → white.
pub fn montage(h: &VoxelHeatmap) -> RgbImage {
    let [x, y, z] = h.values.dims;
    let cols = (z as f64).sqrt().ceil() as usize;
    let rows = z.div_ceil(cols);
    let (w, ht) = (cols * x, rows * y);
    let mut img = RgbImage::filled(w, ht, [0.0; 3]);
    for k in 0..z {
        let (ox, oy) = ((k % cols) * x, (k / cols) * y);
        for j in 0..y {
            for i in 0..x {
                let v = h.values.get(i, j, k).clamp(0.0, 1.0);
                let rgb = [
                    (3.0 * v).min(1.0),
                    (3.0 * v - 1.0).clamp(0.0, 1.0),
                    (3.0 * v - 2.0).clamp(0.0, 1.0),
                ];
                // Flip y so anterior is up.
                let p = 3 * ((oy + y - 1 - j) * w + ox + i);
                img.data[p..p + 3].copy_from_slice(&rgb);
            }
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relevance_matches_hand_values() {
        let a = Tensor::from_vec(2, 3, vec![1.0, 2.0, 0.0, -1.0, 0.5, 3.0]);
        let g = Tensor::from_vec(2, 3, vec![0.2, -0.4, 1.0, 0.0, 0.2, -0.6]);
        // w = (0.1, -0.1, 0.2)
        let r = relevance_from(&a, &g);
        assert_eq!(r[0], 0.0);
        assert!((r[1] - 0.45).abs() < 1e-12);
    }

    #[test]
    fn zero_gradient_gives_zero_relevance() {
        let a = Tensor::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(relevance_from(&a, &Tensor::zeros(2, 2)), vec![0.0, 0.0]);
    }

    #[test]
    fn percentile_interpolates() {
        let v = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(percentile(&v, 50.0), 3.0);
        assert!((percentile(&v, 90.0) - 4.6).abs() < 1e-12);
        assert_eq!(percentile(&[7.0], 30.0), 7.0);
    }

    #[test]
    fn meta_path_sits_next_to_the_volume() {
        assert_eq!(meta_path(Path::new("out/heat.nvol")), PathBuf::from("out/heat.meta.json"));
    }

    #[test]
    fn montage_shape() {
        let h = VoxelHeatmap {
            values: BrainVolume::zeros("h", [4, 3, 5]),
            concept: "c".into(),
            scales_used: vec![2],
        };
        let img = montage(&h);
        assert_eq!((img.width, img.height), (12, 6));
    }
}
