//! RGB rasters, binary PPM (P6) files and bilinear resampling.

use std::fs;
use std::path::Path;

use crate::error::{ensure, Error, Result};
use crate::preprocess::axis_weights;

/// Row-major RGB raster with channel values in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    /// `3·width·height` values, interleaved RGB, rows top to bottom.
    pub data: Vec<f32>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        ensure!(
            width > 0 && height > 0,
            Error::Invalid(format!("empty image {width}×{height}"))
        );
        ensure!(
            data.len() == 3 * width * height,
            Error::PayloadMismatch {
                expected: 3 * width * height,
                found: data.len()
            }
        );
        Ok(RgbImage {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        RgbImage {
            width,
            height,
            data: (0..width * height).flat_map(|_| rgb).collect(),
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.data[3 * (y * self.width + x) + c]
    }

    /// Luma with ITU-R BT.601 weights, row-major.
    pub fn grayscale(&self) -> Vec<f64> {
        self.data
            .chunks_exact(3)
            .map(|p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64)
            .collect()
    }

    /// The image with every value snapped to the 8-bit grid it is stored on.
    pub fn quantized(&self) -> Self {
        RgbImage {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|v| to_byte(*v) as f32 / 255.0).collect(),
        }
    }
}

fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode_ppm(img: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.data.iter().map(|v| to_byte(*v)));
    out
}

pub fn decode_ppm(bytes: &[u8]) -> Result<RgbImage> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        ensure!(pos > start, Error::Header("truncated PPM header".into()));
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| Error::Header("PPM header is not ASCII".into()))?);
    }
    ensure!(
        fields[0] == "P6",
        Error::BadMagic {
            expected: "P6",
            found: fields[0].to_string()
        }
    );
    let num = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::Header(format!("bad PPM number {s:?}")))
    };
    let (w, h, max) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    ensure!(max == 255, Error::Header(format!("only 8-bit PPM is supported, maxval {max}")));
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let raster = bytes.get(pos..).unwrap_or(&[]);
    ensure!(
        raster.len() == 3 * w * h,
        Error::PayloadMismatch {
            expected: 3 * w * h,
            found: raster.len()
        }
    );
    RgbImage::new(w, h, raster.iter().map(|b| *b as f32 / 255.0).collect())
}

pub fn write_ppm(img: &RgbImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_ppm(img)).map_err(|e| Error::io(path, e))
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<RgbImage> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ppm(&bytes)
}

pub fn resize_bilinear(img: &RgbImage, width: usize, height: usize) -> Result<RgbImage> {
    ensure!(
        width > 0 && height > 0,
        Error::Invalid(format!("resize target {width}×{height} is empty"))
    );
    if width == img.width && height == img.height {
        return Ok(img.clone());
    }
    let xs = axis_weights(width, img.width);
    let mut data = Vec::with_capacity(3 * width * height);
    for (y0, y1, ty) in axis_weights(height, img.height) {
        for &(x0, x1, tx) in &xs {
            for c in 0..3 {
                let top = lerp(img.get(x0, y0, c) as f64, img.get(x1, y0, c) as f64, tx);
                let bottom = lerp(img.get(x0, y1, c) as f64, img.get(x1, y1, c) as f64, tx);
                data.push(lerp(top, bottom, ty) as f32);
            }
        }
    }
    RgbImage::new(width, height, data)
}

#[inline]
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + t * (b - a)
}
