//! Latent-mixing reconstruction: the conditioning bundle and image decoders.
//!
//! `init_latent = (1 − β)·ẑ_v + β·σ` with σ drawn per component from
//! N(0, 1). The stand-in decoder renders a fixed low-frequency cosine
//! pattern from `clip_cond` and adds the upsampled latent as a residual.

use std::io::{Read, Write};
use std::path::PathBuf;
use std::process::{Command, Stdio};

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::bridge::conversation::RECON_TEMPLATES;
use crate::bridge::BridgeState;
use crate::encoder::EncoderState;
use crate::error::{ensure, Error, Result};
use crate::image::{decode_ppm, RgbImage};
use crate::preprocess::{axis_weights, PatchedSignal};
use crate::seed::{rng, rng_for};
use crate::tensor::{dot, l2_norm, Tensor};

/// Mixing weight used when none is configured.
pub const DEFAULT_BETA: f64 = 0.93;
/// Longest reconstruction prompt generated by the bridge.
pub const PROMPT_TOKENS: usize = 48;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditioningBundle {
    pub init_latent: Vec<f64>,
    pub clip_cond: Vec<f64>,
    pub prompt: String,
    pub beta: f64,
    pub noise_seed: u64,
}

impl ConditioningBundle {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            (0.0..=1.0).contains(&self.beta),
            Error::Invalid(format!("beta {} outside [0, 1]", self.beta))
        );
        ensure!(
            self.init_latent.iter().chain(&self.clip_cond).all(|v| v.is_finite()),
            Error::NonFinite("conditioning bundle".into())
        );
        ensure!(
            !self.init_latent.is_empty() && !self.clip_cond.is_empty(),
            Error::Invalid("conditioning vectors must be nonempty".into())
        );
        Ok(())
    }
}

/// The per-component standard normal draw used for `noise_seed`.
pub fn latent_noise(dim: usize, noise_seed: u64) -> Vec<f64> {
    let mut r = rng(noise_seed);
    (0..dim).map(|_| StandardNormal.sample(&mut r)).collect()
}

pub fn make_bundle(
    z_v: &[f64],
    z_c: &[f64],
    prompt: &str,
    beta: f64,
    noise_seed: u64,
) -> Result<ConditioningBundle> {
    ensure!(
        (0.0..=1.0).contains(&beta),
        Error::Invalid(format!("beta {beta} outside [0, 1]"))
    );
    let sigma = latent_noise(z_v.len(), noise_seed);
    let bundle = ConditioningBundle {
        init_latent: z_v
            .iter()
            .zip(&sigma)
            .map(|(z, s)| (1.0 - beta) * z + beta * s)
            .collect(),
        clip_cond: z_c.to_vec(),
        prompt: prompt.to_string(),
        beta,
        noise_seed,
    };
    bundle.validate()?;
    Ok(bundle)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "impl", rename_all = "snake_case")]
pub enum DecoderImpl {
    Standin { seed: u64 },
    External { adapter_id: String },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderSpec {
    #[serde(flatten)]
    pub imp: DecoderImpl,
    pub width: usize,
    pub height: usize,
}

/// Low spatial frequencies per axis in the stand-in basis.
const FREQS: usize = 4;
const CLIP_GAIN: f64 = 0.5;
const LATENT_GAIN: f64 = 0.25;

/// Deterministic stand-in for a latent diffusion decoder.
///
/// `pixel = 0.5 + 0.5·Σ_k (A·c)_k B_k + 0.25·up(init_latent)`, clamped to
/// [0, 1]. `B_k` are separable DCT-II images per channel scaled to unit RMS
/// over the raster, `A` has orthonormal rows or columns, and `c` is
/// `clip_cond` projected onto the unit ball. The render is therefore
/// 0.5-Lipschitz in `clip_cond` under the RMS pixel norm.
#[derive(Clone, Debug)]
pub struct StandinDecoder {
    pub width: usize,
    pub height: usize,
    seed: u64,
}

impl StandinDecoder {
    pub fn new(width: usize, height: usize, seed: u64) -> Result<Self> {
        ensure!(
            width >= FREQS && height >= FREQS,
            Error::Invalid(format!("decoder output {width}×{height} is below {FREQS}×{FREQS}"))
        );
        Ok(StandinDecoder {
            width,
            height,
            seed,
        })
    }

    fn mixing(&self, d_c: usize) -> Tensor {
        let n_basis = 3 * FREQS * FREQS;
        let mut r = rng_for(self.seed, &[d_c as u64]);
        if d_c >= n_basis {
            orthonormal_rows(Tensor::randn(n_basis, d_c, 1.0, &mut r))
        } else {
            orthonormal_rows(Tensor::randn(d_c, n_basis, 1.0, &mut r)).transpose()
        }
    }

    /// Low-frequency component only, before offset and clamping.
    pub fn clip_pattern(&self, clip_cond: &[f64]) -> Vec<f64> {
        let (w, h) = (self.width, self.height);
        let norm = l2_norm(clip_cond);
        let c: Vec<f64> = if norm > 1.0 {
            clip_cond.iter().map(|v| v / norm).collect()
        } else {
            clip_cond.to_vec()
        };
        let a = self.mixing(c.len());
        let coef: Vec<f64> = (0..a.rows()).map(|i| dot(a.row(i), &c)).collect();
        let cx = cosine_table(w);
        let cy = cosine_table(h);
        let mut out = vec![0.0; 3 * w * h];
        for y in 0..h {
            for x in 0..w {
                for ch in 0..3 {
                    let mut v = 0.0;
                    for p in 0..FREQS {
                        for q in 0..FREQS {
                            v += coef[ch * FREQS * FREQS + p * FREQS + q] * cy[q][y] * cx[p][x];
                        }
                    }
                    out[3 * (y * w + x) + ch] = v * 3f64.sqrt();
                }
            }
        }
        out
    }

    /// The latent reshaped to the smallest square holding it (zero padded)
    /// and bilinearly resampled to the output size.
    pub fn latent_pattern(&self, latent: &[f64]) -> Vec<f64> {
        let side = (latent.len() as f64).sqrt().ceil() as usize;
        let at = |x: usize, y: usize| latent.get(y * side + x).copied().unwrap_or(0.0);
        let xs = axis_weights(self.width, side);
        let mut out = Vec::with_capacity(self.width * self.height);
        for (y0, y1, ty) in axis_weights(self.height, side) {
            for &(x0, x1, tx) in &xs {
                let top = at(x0, y0) + tx * (at(x1, y0) - at(x0, y0));
                let bottom = at(x0, y1) + tx * (at(x1, y1) - at(x0, y1));
                out.push(top + ty * (bottom - top));
            }
        }
        out
    }

    pub fn render(&self, bundle: &ConditioningBundle) -> Result<RgbImage> {
        bundle.validate()?;
        let low = self.clip_pattern(&bundle.clip_cond);
        let res = self.latent_pattern(&bundle.init_latent);
        let data = low
            .iter()
            .enumerate()
            .map(|(i, l)| (0.5 + CLIP_GAIN * l + LATENT_GAIN * res[i / 3]).clamp(0.0, 1.0) as f32)
            .collect();
        RgbImage::new(self.width, self.height, data)
    }
}

/// `table[p][x]` is the DCT-II basis value `cos(π(x + ½)p / n)` scaled so
/// that each row has unit mean square.
fn cosine_table(n: usize) -> Vec<Vec<f64>> {
    (0..FREQS)
        .map(|p| {
            let scale = if p == 0 { 1.0 } else { 2f64.sqrt() };
            (0..n)
                .map(|x| scale * (std::f64::consts::PI * (x as f64 + 0.5) * p as f64 / n as f64).cos())
                .collect()
        })
        .collect()
}

/// Modified Gram-Schmidt on the rows (rows ≤ cols).
fn orthonormal_rows(mut t: Tensor) -> Tensor {
    for i in 0..t.rows() {
        for j in 0..i {
            let proj = dot(t.row(i), t.row(j));
            let rj = t.row(j).to_vec();
            t.row_mut(i).iter_mut().zip(&rj).for_each(|(a, b)| *a -= proj * b);
        }
        let n = l2_norm(t.row(i));
        t.row_mut(i).iter_mut().for_each(|a| *a /= n);
    }
    t
}

/// An image decoder: the stand-in or an external program that reads the
/// bundle as JSON on stdin and writes a binary PPM of the requested size.
pub enum Decoder {
    Standin(StandinDecoder),
    External {
        program: PathBuf,
        width: usize,
        height: usize,
    },
}

impl Decoder {
    pub fn new(spec: &DecoderSpec) -> Result<Self> {
        match &spec.imp {
            DecoderImpl::Standin { seed } => Ok(Decoder::Standin(StandinDecoder::new(
                spec.width,
                spec.height,
                *seed,
            )?)),
            DecoderImpl::External { adapter_id } => {
                let program = PathBuf::from(adapter_id);
                ensure!(
                    program.is_file(),
                    Error::Capability(format!("decoder adapter {adapter_id:?} is not available"))
                );
                Ok(Decoder::External {
                    program,
                    width: spec.width,
                    height: spec.height,
                })
            }
        }
    }

    pub fn reconstruct(&self, bundle: &ConditioningBundle) -> Result<RgbImage> {
        match self {
            Decoder::Standin(d) => d.render(bundle),
            Decoder::External {
                program,
                width,
                height,
            } => {
                bundle.validate()?;
                let failed =
                    |e: std::io::Error| Error::Capability(format!("decoder adapter failed: {e}"));
                let mut child = Command::new(program)
                    .arg(width.to_string())
                    .arg(height.to_string())
                    .stdin(Stdio::piped())
                    .stdout(Stdio::piped())
                    .spawn()
                    .map_err(failed)?;
                let payload = serde_json::to_vec(bundle)?;
                child
                    .stdin
                    .take()
                    .expect("piped stdin")
                    .write_all(&payload)
                    .map_err(failed)?;
                let mut out = Vec::new();
                child
                    .stdout
                    .take()
                    .expect("piped stdout")
                    .read_to_end(&mut out)
                    .map_err(failed)?;
                let status = child.wait().map_err(failed)?;
                ensure!(
                    status.success(),
                    Error::Capability(format!("decoder adapter exited with {status}"))
                );
                let img = decode_ppm(&out)?;
                ensure!(
                    img.width == *width && img.height == *height,
                    Error::Shape(format!(
                        "decoder returned {}×{}, expected {width}×{height}",
                        img.width, img.height
                    ))
                );
                Ok(img)
            }
        }
    }
}

/// Encoder predictions, optional bridge prompt, bundle and decode. Without a
/// bridge the prompt is empty.
pub fn recon_pipeline(
    encoder: &EncoderState,
    bridge: Option<&BridgeState>,
    decoder: &Decoder,
    b: &PatchedSignal,
    beta: f64,
    noise_seed: u64,
) -> Result<(RgbImage, String)> {
    let trace = encoder.forward(b, false)?;
    let prompt = match bridge {
        Some(br) => br.generate(&trace.penultimate, RECON_TEMPLATES[0], PROMPT_TOKENS)?,
        None => String::new(),
    };
    let bundle = make_bundle(&trace.pred_v, &trace.pred_c, &prompt, beta, noise_seed)?;
    Ok((decoder.reconstruct(&bundle)?, prompt))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::pearson;

    fn gray(img: &RgbImage) -> Vec<f64> {
        img.grayscale()
    }

    fn normals(r: &mut crate::seed::Rng, n: usize, scale: f64) -> Vec<f64> {
        (0..n).map(|_| scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut *r)).collect()
    }

    #[test]
    fn bundle_endpoints_and_errors() {
        let zv: Vec<f64> = (0..32).map(|i| i as f64 * 0.1).collect();
        let zc = vec![0.2; 8];
        assert_eq!(make_bundle(&zv, &zc, "", 0.0, 3).unwrap().init_latent, zv);
        let b1 = make_bundle(&zv, &zc, "", 1.0, 3).unwrap();
        assert_eq!(b1.init_latent, latent_noise(32, 3));
        assert_eq!(b1.init_latent, make_bundle(&vec![5.0; 32], &zc, "", 1.0, 3).unwrap().init_latent);
        assert!(make_bundle(&zv, &zc, "", 1.01, 3).is_err());
        assert!(make_bundle(&zv, &zc, "", -0.1, 3).is_err());
        assert!(make_bundle(&[f64::NAN], &zc, "", 0.5, 3).is_err());
    }

    #[test]
    fn mixing_is_affine_in_the_prior() {
        let zv: Vec<f64> = (0..16).map(|i| (i as f64).sin()).collect();
        let scaled: Vec<f64> = zv.iter().map(|v| 3.0 * v).collect();
        let beta = 0.4;
        let a = make_bundle(&zv, &[1.0], "", beta, 9).unwrap().init_latent;
        let b = make_bundle(&scaled, &[1.0], "", beta, 9).unwrap().init_latent;
        let sigma = latent_noise(16, 9);
        for i in 0..16 {
            let prior_a = a[i] - beta * sigma[i];
            let prior_b = b[i] - beta * sigma[i];
            assert!((prior_b - 3.0 * prior_a).abs() < 1e-12);
        }
    }

    #[test]
    fn continuity_in_beta() {
        let zv: Vec<f64> = (0..64).map(|i| (i as f64 * 0.3).cos()).collect();
        let sigma = latent_noise(64, 1);
        let bound = l2_norm(&zv) + l2_norm(&sigma);
        for (b1, b2) in [(0.0, 0.3), (0.2, 0.93), (0.5, 1.0)] {
            let x = make_bundle(&zv, &[1.0], "", b1, 1).unwrap().init_latent;
            let y = make_bundle(&zv, &[1.0], "", b2, 1).unwrap().init_latent;
            let d: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a - b).collect();
            assert!(l2_norm(&d) <= (b2 - b1) * bound + 1e-12);
        }
    }

    #[test]
    fn render_is_deterministic_and_sensitive_to_clip() {
        let dec = StandinDecoder::new(32, 24, 4).unwrap();
        let zv = vec![0.0; 64];
        let b = make_bundle(&zv, &[0.3, -0.2, 0.1, 0.4], "", 0.5, 2).unwrap();
        assert_eq!(dec.render(&b).unwrap(), dec.render(&b).unwrap());
        let mut b2 = b.clone();
        b2.clip_cond[1] = 0.2;
        assert_ne!(dec.render(&b).unwrap(), dec.render(&b2).unwrap());
        assert!(dec.render(&b).unwrap().data.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn clip_pattern_is_lipschitz() {
        let dec = StandinDecoder::new(16, 16, 1).unwrap();
        let mut r = rng(5);
        for dim in [8usize, 64] {
            for _ in 0..20 {
                let a = normals(&mut r, dim, 0.1);
                let b = normals(&mut r, dim, 0.1);
                let pa = dec.clip_pattern(&a);
                let pb = dec.clip_pattern(&b);
                let rms = (pa.iter().zip(&pb).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / pa.len() as f64).sqrt();
                let d: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
                assert!(rms <= l2_norm(&d) + 1e-9, "{rms} > {}", l2_norm(&d));
            }
        }
    }

    #[test]
    fn beta_sweep_reduces_prior_correlation() {
        for seed in 0..5u64 {
            let mut r = rng(100 + seed);
            let zv = normals(&mut r, 256, 1.0);
            let zc = normals(&mut r, 16, 0.1);
            let dec = StandinDecoder::new(32, 32, seed).unwrap();
            let prior_only = ConditioningBundle {
                init_latent: zv.clone(),
                clip_cond: vec![0.0; zc.len()],
                prompt: String::new(),
                beta: 0.0,
                noise_seed: 0,
            };
            let reference = gray(&dec.render(&prior_only).unwrap());
            let corr: Vec<f64> = [0.0, 0.5, 1.0]
                .iter()
                .map(|beta| {
                    let b = make_bundle(&zv, &zc, "", *beta, 77 + seed).unwrap();
                    pearson(&gray(&dec.render(&b).unwrap()), &reference).unwrap()
                })
                .collect();
            assert!(corr[0] > corr[1] && corr[1] > corr[2], "seed {seed}: {corr:?}");
        }
    }

    #[test]
    fn missing_decoder_adapter_is_a_capability_error() {
        let spec = DecoderSpec {
            imp: DecoderImpl::External {
                adapter_id: "/nonexistent/unclip".into(),
            },
            width: 8,
            height: 8,
        };
        assert!(matches!(Decoder::new(&spec), Err(Error::Capability(_))));
    }
}
