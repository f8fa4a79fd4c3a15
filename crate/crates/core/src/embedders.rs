//! Target embedders: image embedding, image latent and text embedding.
//!
//! The stand-ins are deterministic. Images are downsampled to 16×16×3,
//! centred and passed through a seeded Gaussian projection. Text is case-folded
//! and its character trigrams are hashed into signed buckets. An external
//! adapter is an executable that reads the image (binary PPM) or UTF-8 text
//! on stdin and writes `dim` float32 LE values to stdout.

use std::io::{Read, Write};
use std::path::PathBuf;
use std::process::{Command, Stdio};
use std::sync::Mutex;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::image::{encode_ppm, resize_bilinear, RgbImage};
use crate::seed::{mix, rng_for};
use crate::tensor::{l2_norm, Tensor};

const THUMB: usize = 16;
const THUMB_LEN: usize = THUMB * THUMB * 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedKind {
    ImageEmbedding,
    ImageLatent,
    TextEmbedding,
}

impl EmbedKind {
    fn tag(self) -> u64 {
        match self {
            EmbedKind::ImageEmbedding => 1,
            EmbedKind::ImageLatent => 2,
            EmbedKind::TextEmbedding => 3,
        }
    }

    fn name(self) -> &'static str {
        match self {
            EmbedKind::ImageEmbedding => "image_embedding",
            EmbedKind::ImageLatent => "image_latent",
            EmbedKind::TextEmbedding => "text_embedding",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "impl", rename_all = "snake_case")]
pub enum EmbedderImpl {
    Standin { seed: u64 },
    External { adapter_id: String },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbedderSpec {
    pub kind: EmbedKind,
    pub dim: usize,
    #[serde(flatten)]
    pub imp: EmbedderImpl,
}

impl EmbedderSpec {
    pub fn standin(kind: EmbedKind, dim: usize, seed: u64) -> Self {
        EmbedderSpec {
            kind,
            dim,
            imp: EmbedderImpl::Standin { seed },
        }
    }
}

enum Backend {
    Standin { seed: u64, projection: Option<Tensor> },
    /// Calls are serialized: adapters declare no reentrancy.
    External { program: PathBuf, gate: Mutex<()> },
}

pub struct Embedder {
    pub spec: EmbedderSpec,
    backend: Backend,
}

impl Embedder {
    /// Builds the embedder. An unavailable external adapter is a capability
    /// error unless `standin_fallback` is set, in which case a stand-in with
    /// seed 0 is used and a warning is logged.
    pub fn new(spec: EmbedderSpec, standin_fallback: bool) -> Result<Self> {
        ensure!(spec.dim > 0, Error::Invalid("embedding dim must be positive".into()));
        let backend = match &spec.imp {
            EmbedderImpl::Standin { seed } => standin_backend(spec.kind, spec.dim, *seed),
            EmbedderImpl::External { adapter_id } => {
                let program = PathBuf::from(adapter_id);
                if program.is_file() {
                    Backend::External {
                        program,
                        gate: Mutex::new(()),
                    }
                } else if standin_fallback {
                    warn!("embedding adapter {adapter_id:?} unavailable; using the stand-in");
                    standin_backend(spec.kind, spec.dim, 0)
                } else {
                    return Err(Error::Capability(format!(
                        "embedding adapter {adapter_id:?} is not available"
                    )));
                }
            }
        };
        Ok(Embedder { spec, backend })
    }

    pub fn standin(kind: EmbedKind, dim: usize, seed: u64) -> Result<Self> {
        Embedder::new(EmbedderSpec::standin(kind, dim, seed), false)
    }

    pub fn embed_image(&self, image: &RgbImage) -> Result<Vec<f64>> {
        ensure!(
            self.spec.kind != EmbedKind::TextEmbedding,
            Error::Invalid("text embedder cannot embed images".into())
        );
        match &self.backend {
            Backend::Standin { projection, .. } => {
                let thumb = resize_bilinear(image, THUMB, THUMB)?;
                let x: Vec<f64> = thumb.data.iter().map(|v| *v as f64 - 0.5).collect();
                let p = projection.as_ref().expect("image stand-in has a projection");
                let mut out: Vec<f64> = (0..p.rows())
                    .map(|i| p.row(i).iter().zip(&x).map(|(a, b)| a * b).sum())
                    .collect();
                if self.spec.kind == EmbedKind::ImageEmbedding {
                    normalize(&mut out);
                }
                Ok(out)
            }
            Backend::External { program, gate } => {
                self.call_adapter(program, gate, &encode_ppm(image))
            }
        }
    }

    pub fn embed_text(&self, text: &str) -> Result<Vec<f64>> {
        ensure!(
            self.spec.kind == EmbedKind::TextEmbedding,
            Error::Invalid("image embedder cannot embed text".into())
        );
        ensure!(!text.is_empty(), Error::Invalid("cannot embed empty text".into()));
        match &self.backend {
            Backend::Standin { seed, .. } => Ok(trigram_embedding(text, self.spec.dim, *seed)),
            Backend::External { program, gate } => self.call_adapter(program, gate, text.as_bytes()),
        }
    }

    fn call_adapter(&self, program: &PathBuf, gate: &Mutex<()>, input: &[u8]) -> Result<Vec<f64>> {
        let _guard = gate.lock().unwrap_or_else(|p| p.into_inner());
        let unavailable = |e: std::io::Error| {
            Error::Capability(format!("embedding adapter {} failed: {e}", program.display()))
        };
        let mut child = Command::new(program)
            .arg(self.spec.kind.name())
            .arg(self.spec.dim.to_string())
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .map_err(unavailable)?;
        child
            .stdin
            .take()
            .expect("piped stdin")
            .write_all(input)
            .map_err(unavailable)?;
        let mut bytes = Vec::new();
        child
            .stdout
            .take()
            .expect("piped stdout")
            .read_to_end(&mut bytes)
            .map_err(unavailable)?;
        let status = child.wait().map_err(unavailable)?;
        ensure!(
            status.success(),
            Error::Capability(format!("embedding adapter exited with {status}"))
        );
        let values = crate::volume::decode_f32_payload(&bytes, self.spec.dim)?;
        ensure!(
            values.iter().all(|v| v.is_finite()),
            Error::NonFinite("adapter embedding".into())
        );
        Ok(values.into_iter().map(f64::from).collect())
    }
}

fn standin_backend(kind: EmbedKind, dim: usize, seed: u64) -> Backend {
    let projection = (kind != EmbedKind::TextEmbedding).then(|| {
        let mut r = rng_for(seed, &[kind.tag(), dim as u64]);
        Tensor::randn(dim, THUMB_LEN, 1.0 / (THUMB_LEN as f64).sqrt(), &mut r)
    });
    Backend::Standin { seed, projection }
}

fn normalize(v: &mut [f64]) {
    let n = l2_norm(v);
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

fn fnv1a(bytes: impl IntoIterator<Item = u8>, basis: u64) -> u64 {
    bytes.into_iter().fold(basis, |h, b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

/// Case-folded character trigrams of `^text$`, each hashed (FNV-1a) to a
/// bucket and a sign; the count vector is L2-normalized.
pub fn trigram_embedding(text: &str, dim: usize, seed: u64) -> Vec<f64> {
    let chars: Vec<char> = std::iter::once('^')
        .chain(text.to_lowercase().chars())
        .chain(std::iter::once('$'))
        .collect();
    let basis = 0xcbf2_9ce4_8422_2325 ^ mix(seed, &[EmbedKind::TextEmbedding.tag()]);
    let mut out = vec![0.0; dim];
    for w in chars.windows(3.min(chars.len())) {
        let s: String = w.iter().collect();
        let h = fnv1a(s.bytes(), basis);
        let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
        out[(h % dim as u64) as usize] += sign;
    }
    normalize(&mut out);
    out
}

/// Stand-in text embedding with the default seed.
pub fn embed_text(text: &str, dim: usize) -> Result<Vec<f64>> {
    Embedder::standin(EmbedKind::TextEmbedding, dim, 0)?.embed_text(text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng;
    use crate::tensor::cosine;
    use rand::Rng;

    fn random_image(seed: u64) -> RgbImage {
        let mut r = rng(seed);
        RgbImage::new(32, 32, (0..32 * 32 * 3).map(|_| r.random::<f32>()).collect()).unwrap()
    }

    #[test]
    fn image_stand_in_is_deterministic_and_unit() {
        let e = Embedder::standin(EmbedKind::ImageEmbedding, 64, 5).unwrap();
        let img = random_image(1);
        let a = e.embed_image(&img).unwrap();
        let b = e.embed_image(&img).unwrap();
        assert_eq!(a, b);
        assert!((l2_norm(&a) - 1.0).abs() < 1e-6);
        let latent = Embedder::standin(EmbedKind::ImageLatent, 64, 5).unwrap();
        assert!((l2_norm(&latent.embed_image(&img).unwrap()) - 1.0).abs() > 1e-3);
    }

    #[test]
    fn unrelated_images_are_nearly_orthogonal() {
        let mut ok = 0;
        for t in 0..1000u64 {
            let e = Embedder::standin(EmbedKind::ImageEmbedding, 64, t).unwrap();
            let a = e.embed_image(&random_image(2 * t + 10_000)).unwrap();
            let b = e.embed_image(&random_image(2 * t + 10_001)).unwrap();
            ok += usize::from(cosine(&a, &b).abs() < 0.5);
        }
        assert!(ok >= 990, "{ok}/1000");
    }

    #[test]
    fn text_stand_in_rules() {
        let a = embed_text("zebra", 64).unwrap();
        assert_eq!(a, embed_text("zebra", 64).unwrap());
        assert_eq!(a, embed_text("Zebra", 64).unwrap());
        assert!(cosine(&a, &embed_text("train", 64).unwrap()) < 0.9);
        assert!((l2_norm(&a) - 1.0).abs() < 1e-12);
        assert!(embed_text("", 64).is_err());
        assert!((l2_norm(&embed_text("a", 8).unwrap()) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn missing_adapter_needs_explicit_fallback() {
        let spec = EmbedderSpec {
            kind: EmbedKind::TextEmbedding,
            dim: 8,
            imp: EmbedderImpl::External {
                adapter_id: "/nonexistent/clip-adapter".into(),
            },
        };
        assert!(matches!(Embedder::new(spec.clone(), false), Err(Error::Capability(_))));
        let e = Embedder::new(spec, true).unwrap();
        assert_eq!(e.embed_text("cat").unwrap().len(), 8);
    }
}
