//! Reconstruction and caption metrics and the metrics report.
//!
//! Text metrics share one tokenizer: lowercase, split on whitespace and
//! ASCII punctuation, punctuation dropped. Values are only comparable with
//! other values produced by this tokenizer.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::embedders::Embedder;
use crate::error::{ensure, Error, Result};
use crate::image::{resize_bilinear, RgbImage};
use crate::tensor::pearson;

/// Protocol resolution for pixel metrics on full-size reconstructions.
pub const PROTOCOL_SIZE: usize = 425;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;
/// β of the ROUGE-L F-measure.
pub const ROUGE_BETA: f64 = 1.2;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PixCorr {
    pub value: f64,
    /// Set when either image had zero variance and the value is defined as 0.
    pub degenerate: bool,
}

fn co_resize(a: &RgbImage, b: &RgbImage, size: usize) -> Result<(RgbImage, RgbImage)> {
    Ok((resize_bilinear(a, size, size)?, resize_bilinear(b, size, size)?))
}

/// Pearson correlation of all channel values after resizing both images to
/// `size`×`size`.
pub fn pixcorr(recon: &RgbImage, truth: &RgbImage, size: usize) -> Result<PixCorr> {
    let (a, b) = co_resize(recon, truth, size)?;
    let x: Vec<f64> = a.data.iter().map(|v| *v as f64).collect();
    let y: Vec<f64> = b.data.iter().map(|v| *v as f64).collect();
    Ok(match pearson(&x, &y) {
        Some(value) => PixCorr {
            value,
            degenerate: false,
        },
        None => PixCorr {
            value: 0.0,
            degenerate: true,
        },
    })
}

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let w: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - half).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Valid-mode separable filtering of a `w`×`h` field.
fn filter_valid(x: &[f64], w: usize, h: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (ow, oh) = (w + 1 - n, h + 1 - n);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for ox in 0..ow {
            rows[y * ow + ox] = k.iter().enumerate().map(|(i, kv)| kv * x[y * w + ox + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for oy in 0..oh {
        for ox in 0..ow {
            out[oy * ow + ox] = k.iter().enumerate().map(|(i, kv)| kv * rows[(oy + i) * ow + ox]).sum();
        }
    }
    out
}

/// SSIM on luma planes of equal size in [0, 1].
pub fn ssim_gray(x: &[f64], y: &[f64], w: usize, h: usize) -> Result<f64> {
    ensure!(
        w >= SSIM_WINDOW && h >= SSIM_WINDOW,
        Error::Invalid(format!("{w}×{h} image is smaller than the {SSIM_WINDOW}×{SSIM_WINDOW} window"))
    );
    ensure!(
        x.len() == w * h && y.len() == w * h,
        Error::Shape("SSIM planes differ in size".into())
    );
    let k = gaussian_window();
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let prod = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).collect::<Vec<f64>>();
    let mx = filter_valid(x, w, h, &k);
    let my = filter_valid(y, w, h, &k);
    let sxx = filter_valid(&prod(x, x), w, h, &k);
    let syy = filter_valid(&prod(y, y), w, h, &k);
    let sxy = filter_valid(&prod(x, y), w, h, &k);
    let total: f64 = (0..mx.len())
        .map(|i| {
            let (m1, m2) = (mx[i], my[i]);
            let v1 = sxx[i] - m1 * m1;
            let v2 = syy[i] - m2 * m2;
            let cov = sxy[i] - m1 * m2;
            ((2.0 * m1 * m2 + c1) * (2.0 * cov + c2)) / ((m1 * m1 + m2 * m2 + c1) * (v1 + v2 + c2))
        })
        .sum();
    Ok(total / mx.len() as f64)
}

/// SSIM of the grayscale images after resizing both to `size`×`size`.
pub fn ssim(recon: &RgbImage, truth: &RgbImage, size: usize) -> Result<f64> {
    let (a, b) = co_resize(recon, truth, size)?;
    ssim_gray(&a.grayscale(), &b.grayscale(), size, size)
}

/// Per-item two-way identification percentages from embeddings. Item i
/// beats distractor j when `r(truth_i, recon_i) > r(truth_i, recon_j)`;
/// ties score one half. Undefined correlations count as 0.
pub fn two_way_per_item(truth: &[Vec<f64>], recon: &[Vec<f64>]) -> Result<Vec<f64>> {
    let n = truth.len();
    ensure!(
        n == recon.len(),
        Error::Invalid(format!("{n} truths for {} reconstructions", recon.len()))
    );
    ensure!(n >= 2, Error::Invalid("two-way identification needs at least 2 items".into()));
    let corr: Vec<Vec<f64>> = truth
        .iter()
        .map(|t| recon.iter().map(|r| pearson(t, r).unwrap_or(0.0)).collect())
        .collect();
    Ok(corr
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let own = row[i];
            let score: f64 = row
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, c)| match own.partial_cmp(c) {
                    Some(std::cmp::Ordering::Greater) => 1.0,
                    Some(std::cmp::Ordering::Equal) => 0.5,
                    _ => 0.0,
                })
                .sum();
            100.0 * score / (n - 1) as f64
        })
        .collect())
}

pub fn two_way_from_embeddings(truth: &[Vec<f64>], recon: &[Vec<f64>]) -> Result<f64> {
    let per = two_way_per_item(truth, recon)?;
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

/// Embeds both image lists and returns the per-item percentages.
pub fn two_way_identification(
    embedder: &Embedder,
    recon: &[RgbImage],
    truth: &[RgbImage],
) -> Result<Vec<f64>> {
    let embed = |imgs: &[RgbImage]| -> Result<Vec<Vec<f64>>> {
        imgs.iter().map(|i| embedder.embed_image(i)).collect()
    };
    two_way_per_item(&embed(truth)?, &embed(recon)?)
}

pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| c.is_whitespace() || c.is_ascii_punctuation())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Cumulative BLEU-1..`max_n`: brevity penalty times the geometric mean of
/// the clipped n-gram precisions up to each order. The reference length
/// for the penalty is the one closest to the candidate (shorter on ties).
pub fn bleu(candidate: &str, references: &[&str], max_n: usize) -> Vec<f64> {
    let cand = tokenize(candidate);
    let refs: Vec<Vec<String>> = references.iter().map(|r| tokenize(r)).collect();
    if cand.is_empty() || refs.is_empty() || max_n == 0 {
        return vec![0.0; max_n];
    }
    let c = cand.len();
    let r = refs
        .iter()
        .map(|t| t.len())
        .min_by_key(|l| (l.abs_diff(c), *l))
        .expect("references nonempty");
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    let mut log_sum = 0.0;
    let mut zero = false;
    (1..=max_n)
        .map(|n| {
            let counts = ngram_counts(&cand, n);
            let total: usize = counts.values().sum();
            let ref_counts: Vec<_> = refs.iter().map(|t| ngram_counts(t, n)).collect();
            let clipped: usize = counts
                .iter()
                .map(|(g, k)| {
                    let max_ref = ref_counts.iter().map(|m| m.get(g).copied().unwrap_or(0)).max().unwrap_or(0);
                    (*k).min(max_ref)
                })
                .sum();
            if clipped == 0 || total == 0 {
                zero = true;
            } else {
                log_sum += (clipped as f64 / total as f64).ln();
            }
            if zero {
                0.0
            } else {
                bp * (log_sum / n as f64).exp()
            }
        })
        .collect()
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    for x in a {
        let mut cur = vec![0usize; b.len() + 1];
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        prev = cur;
    }
    prev[b.len()]
}

/// ROUGE-L F-measure `(1 + β²)·P·R / (R + β²·P)` with β = 1.2, where
/// P = LCS / |candidate| and R = LCS / |reference|.
pub fn rouge_l(candidate: &str, reference: &str) -> f64 {
    let c = tokenize(candidate);
    let r = tokenize(reference);
    if c.is_empty() || r.is_empty() {
        return 0.0;
    }
    let l = lcs_len(&c, &r) as f64;
    if l == 0.0 {
        return 0.0;
    }
    let p = l / c.len() as f64;
    let rec = l / r.len() as f64;
    let b2 = ROUGE_BETA * ROUGE_BETA;
    (1.0 + b2) * p * rec / (rec + b2 * p)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Protocol {
    pub n_items: usize,
    pub comparisons_per_item: usize,
    pub seed: u64,
    pub resolution: usize,
    pub tokenizer: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSeries {
    pub aggregate: f64,
    pub per_sample: Vec<f64>,
}

impl MetricSeries {
    pub fn new(per_sample: Vec<f64>) -> Result<Self> {
        ensure!(!per_sample.is_empty(), Error::Invalid("metric with no samples".into()));
        Ok(MetricSeries {
            aggregate: per_sample.iter().sum::<f64>() / per_sample.len() as f64,
            per_sample,
        })
    }
}

/// The protocol block serializes first; metrics are keyed in name order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub protocol: Protocol,
    pub metrics: BTreeMap<String, MetricSeries>,
    /// Items whose value was defined by convention (e.g. zero variance).
    pub flags: Vec<String>,
}

impl MetricsReport {
    pub fn new(protocol: Protocol) -> Self {
        MetricsReport {
            protocol,
            metrics: BTreeMap::new(),
            flags: Vec::new(),
        }
    }

    pub fn insert(&mut self, name: &str, per_sample: Vec<f64>) -> Result<()> {
        self.metrics.insert(name.to_string(), MetricSeries::new(per_sample)?);
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ImageMetric {
    PixCorr,
    Ssim,
    TwoWay,
}

impl ImageMetric {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "pixcorr" => Ok(ImageMetric::PixCorr),
            "ssim" => Ok(ImageMetric::Ssim),
            "twoway" => Ok(ImageMetric::TwoWay),
            other => Err(Error::Invalid(format!("unknown metric {other:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ImageMetric::PixCorr => "pixcorr",
            ImageMetric::Ssim => "ssim",
            ImageMetric::TwoWay => "twoway",
        }
    }
}

/// Image metrics over paired lists. `embedder` is needed for two-way
/// identification only.
pub fn evaluate_images(
    recon: &[RgbImage],
    truth: &[RgbImage],
    metrics: &[ImageMetric],
    resolution: usize,
    embedder: Option<&Embedder>,
    seed: u64,
) -> Result<MetricsReport> {
    ensure!(
        recon.len() == truth.len() && !recon.is_empty(),
        Error::Invalid(format!(
            "{} reconstructions for {} ground-truth images",
            recon.len(),
            truth.len()
        ))
    );
    let mut report = MetricsReport::new(Protocol {
        n_items: recon.len(),
        comparisons_per_item: recon.len() - 1,
        seed,
        resolution,
        tokenizer: "lowercase, split on whitespace and punctuation".into(),
    });
    for m in metrics {
        let values = match m {
            ImageMetric::PixCorr => {
                let mut v = Vec::new();
                for (i, (a, b)) in recon.iter().zip(truth).enumerate() {
                    let pc = pixcorr(a, b, resolution)?;
                    if pc.degenerate {
                        report.flags.push(format!("pixcorr[{i}]: zero variance, defined as 0"));
                    }
                    v.push(pc.value);
                }
                v
            }
            ImageMetric::Ssim => recon
                .iter()
                .zip(truth)
                .map(|(a, b)| ssim(a, b, resolution))
                .collect::<Result<_>>()?,
            ImageMetric::TwoWay => {
                let e = embedder.ok_or_else(|| {
                    Error::Invalid("two-way identification needs an image embedder".into())
                })?;
                two_way_identification(e, recon, truth)?
            }
        };
        report.insert(m.name(), values)?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenizer_rule() {
        assert_eq!(tokenize("A photo, of THE cat!"), ["a", "photo", "of", "the", "cat"]);
        assert!(tokenize("  ...").is_empty());
    }

    #[test]
    fn gaussian_window_sums_to_one() {
        let w = gaussian_window();
        assert_eq!(w.len(), 11);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!((w[5] / w[6] - (1.0 / (2.0 * 2.25f64)).exp()).abs() < 1e-12);
    }

    #[test]
    fn lcs_cases() {
        let t = |s: &str| tokenize(s);
        assert_eq!(lcs_len(&t("a b c d"), &t("a c d")), 3);
        assert_eq!(lcs_len(&t("a b"), &t("c d")), 0);
    }

    #[test]
    fn metric_names_round_trip() {
        for m in [ImageMetric::PixCorr, ImageMetric::Ssim, ImageMetric::TwoWay] {
            assert_eq!(ImageMetric::parse(m.name()).unwrap(), m);
        }
        assert!(ImageMetric::parse("clip").is_err());
    }
}
