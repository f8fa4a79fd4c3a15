//! 3D scalar volumes and the NVOL1 container.
//!
//! NVOL1 is a five-line ASCII header followed by a raw little-endian float32
//! raster, x varying fastest, then y, then z:
//!
//! ```text
//! NVOL1
//! dims <X> <Y> <Z>
//! dtype f32le
//! order x-fastest
//! ---
//! ```

use std::fs;
use std::path::Path;

use crate::error::{ensure, Error, Result};

pub const NVOL_MAGIC: &str = "NVOL1";

#[derive(Clone, Debug, PartialEq)]
pub struct BrainVolume {
    pub subject_id: String,
    pub dims: [usize; 3],
    pub data: Vec<f32>,
}

impl BrainVolume {
    pub fn new(subject_id: impl Into<String>, dims: [usize; 3], data: Vec<f32>) -> Result<Self> {
        let n = voxel_count(dims);
        ensure!(
            dims.iter().all(|d| *d > 0),
            Error::Invalid(format!("volume dims must be positive, got {dims:?}"))
        );
        ensure!(
            data.len() == n,
            Error::PayloadMismatch {
                expected: n,
                found: data.len()
            }
        );
        Ok(BrainVolume {
            subject_id: subject_id.into(),
            dims,
            data,
        })
    }

    pub fn zeros(subject_id: impl Into<String>, dims: [usize; 3]) -> Self {
        BrainVolume {
            subject_id: subject_id.into(),
            dims,
            data: vec![0.0; voxel_count(dims)],
        }
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        linear_index(self.dims, x, y, z)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.index(x, y, z)]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Voxelwise mean of same-shaped volumes.
    pub fn mean_of(volumes: &[BrainVolume]) -> Result<BrainVolume> {
        ensure!(!volumes.is_empty(), Error::Invalid("mean of zero volumes".into()));
        let dims = volumes[0].dims;
        ensure!(
            volumes.iter().all(|v| v.dims == dims),
            Error::Shape("averaged volumes differ in dims".into())
        );
        let n = volumes.len() as f64;
        let data = (0..volumes[0].len())
            .map(|i| (volumes.iter().map(|v| v.data[i] as f64).sum::<f64>() / n) as f32)
            .collect();
        Ok(BrainVolume {
            subject_id: volumes[0].subject_id.clone(),
            dims,
            data,
        })
    }
}

pub fn voxel_count(dims: [usize; 3]) -> usize {
    dims[0] * dims[1] * dims[2]
}

#[inline]
pub fn linear_index(dims: [usize; 3], x: usize, y: usize, z: usize) -> usize {
    x + dims[0] * (y + dims[1] * z)
}

pub fn encode_volume(v: &BrainVolume) -> Result<Vec<u8>> {
    ensure!(v.is_finite(), Error::NonFinite("volume payload".into()));
    ensure!(
        v.data.len() == voxel_count(v.dims),
        Error::PayloadMismatch {
            expected: voxel_count(v.dims),
            found: v.data.len()
        }
    );
    let header = format!(
        "{NVOL_MAGIC}\ndims {} {} {}\ndtype f32le\norder x-fastest\n---\n",
        v.dims[0], v.dims[1], v.dims[2]
    );
    let mut out = Vec::with_capacity(header.len() + 4 * v.data.len());
    out.extend_from_slice(header.as_bytes());
    for x in &v.data {
        out.extend_from_slice(&x.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_volume(bytes: &[u8]) -> Result<BrainVolume> {
    let mut cursor = HeaderCursor::new(bytes);
    let magic = cursor.line()?;
    ensure!(
        magic == NVOL_MAGIC,
        Error::BadMagic {
            expected: NVOL_MAGIC,
            found: magic.to_string()
        }
    );
    let dims_line = cursor.line()?;
    let dims = parse_keyed_usizes(dims_line, "dims", 3)?;
    let dims = [dims[0], dims[1], dims[2]];
    ensure!(
        dims.iter().all(|d| *d > 0),
        Error::Header(format!("non-positive dims {dims:?}"))
    );
    expect_line(cursor.line()?, "dtype f32le")?;
    expect_line(cursor.line()?, "order x-fastest")?;
    expect_line(cursor.line()?, "---")?;
    let data = decode_f32_payload(cursor.rest(), voxel_count(dims))?;
    ensure!(
        data.iter().all(|v| v.is_finite()),
        Error::NonFinite("volume payload".into())
    );
    Ok(BrainVolume {
        subject_id: String::new(),
        dims,
        data,
    })
}

/// Writes `v` as NVOL1. The subject tag is not part of the container.
pub fn write_volume(v: &BrainVolume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_volume(v)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<BrainVolume> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_volume(&bytes)
}

pub(crate) struct HeaderCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> HeaderCursor<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        HeaderCursor { bytes, pos: 0 }
    }

    pub fn line(&mut self) -> Result<&'a str> {
        self.line_within(4096)
    }

    /// A header line without the usual length cap.
    pub fn long_line(&mut self) -> Result<&'a str> {
        self.line_within(usize::MAX)
    }

    fn line_within(&mut self, limit: usize) -> Result<&'a str> {
        let rest = &self.bytes[self.pos..];
        let end = rest
            .iter()
            .take(limit)
            .position(|b| *b == b'\n')
            .ok_or_else(|| Error::Header("unterminated header line".into()))?;
        let line = std::str::from_utf8(&rest[..end])
            .map_err(|_| Error::Header("header is not UTF-8".into()))?;
        self.pos += end + 1;
        Ok(line)
    }

    pub fn rest(&self) -> &'a [u8] {
        &self.bytes[self.pos..]
    }
}

pub(crate) fn expect_line(found: &str, expected: &str) -> Result<()> {
    ensure!(
        found == expected,
        Error::Header(format!("expected {expected:?}, found {found:?}"))
    );
    Ok(())
}

pub(crate) fn parse_keyed_usizes(line: &str, key: &str, count: usize) -> Result<Vec<usize>> {
    let mut parts = line.split(' ');
    ensure!(
        parts.next() == Some(key),
        Error::Header(format!("expected `{key}` line, found {line:?}"))
    );
    let values: Vec<usize> = parts
        .map(|p| {
            p.parse::<usize>()
                .map_err(|_| Error::Header(format!("bad integer {p:?} in `{key}` line")))
        })
        .collect::<Result<_>>()?;
    ensure!(
        values.len() == count,
        Error::Header(format!("`{key}` expects {count} values, found {}", values.len()))
    );
    Ok(values)
}

pub(crate) fn decode_f32_payload(bytes: &[u8], expected: usize) -> Result<Vec<f32>> {
    ensure!(
        bytes.len() == expected * 4,
        Error::PayloadMismatch {
            expected,
            found: bytes.len() / 4
        }
    );
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub fn write_f32_file(path: impl AsRef<Path>, values: &[f32]) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::with_capacity(values.len() * 4);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_f32_file(path: impl AsRef<Path>) -> Result<Vec<f32>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    ensure!(
        bytes.len() % 4 == 0,
        Error::Format(format!("{} is not a whole number of f32 values", path.display()))
    );
    decode_f32_payload(&bytes, bytes.len() / 4)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn payload_is_x_fastest() {
        let v = BrainVolume::new("s", [2, 2, 2], (0..8).map(|i| i as f32).collect()).unwrap();
        let bytes = encode_volume(&v).unwrap();
        let header = b"NVOL1\ndims 2 2 2\ndtype f32le\norder x-fastest\n---\n";
        assert_eq!(&bytes[..header.len()], header);
        let payload = &bytes[header.len()..];
        assert_eq!(payload.len(), 32);
        for i in 0..8 {
            let f = f32::from_le_bytes(payload[4 * i..4 * i + 4].try_into().unwrap());
            assert_eq!(f, i as f32);
        }
        assert_eq!(v.get(1, 0, 0), 1.0);
        assert_eq!(v.get(0, 1, 0), 2.0);
        assert_eq!(v.get(0, 0, 1), 4.0);
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let dims = [rng.random_range(1..6), rng.random_range(1..6), rng.random_range(1..6)];
            let data = (0..voxel_count(dims))
                .map(|_| f32::from_bits(rng.random::<u32>() & 0x7f7f_ffff))
                .collect();
            let v = BrainVolume::new("", dims, data).unwrap();
            let back = decode_volume(&encode_volume(&v).unwrap()).unwrap();
            assert_eq!(back.dims, v.dims);
            let a: Vec<u32> = v.data.iter().map(|x| x.to_bits()).collect();
            let b: Vec<u32> = back.data.iter().map(|x| x.to_bits()).collect();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn rejects_nan_on_write() {
        let v = BrainVolume::new("s", [1, 1, 2], vec![0.0, f32::NAN]).unwrap();
        assert!(matches!(encode_volume(&v), Err(Error::NonFinite(_))));
    }

    #[test]
    fn truncated_payload_is_mismatch() {
        let v = BrainVolume::new("s", [2, 2, 2], vec![1.0; 8]).unwrap();
        let mut bytes = encode_volume(&v).unwrap();
        bytes.truncate(bytes.len() - 4);
        match decode_volume(&bytes) {
            Err(Error::PayloadMismatch { expected, found }) => {
                assert_eq!(expected, 8);
                assert_eq!(found, 7);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let v = BrainVolume::new("s", [1, 1, 1], vec![1.0]).unwrap();
        let mut bytes = encode_volume(&v).unwrap();
        bytes[4] = b'2';
        assert!(matches!(decode_volume(&bytes), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn non_finite_payload_is_rejected_on_read() {
        let v = BrainVolume::new("s", [1, 1, 1], vec![1.0]).unwrap();
        let mut bytes = encode_volume(&v).unwrap();
        let n = bytes.len();
        bytes[n - 4..].copy_from_slice(&f32::INFINITY.to_le_bytes());
        assert!(matches!(decode_volume(&bytes), Err(Error::NonFinite(_))));
    }
}
