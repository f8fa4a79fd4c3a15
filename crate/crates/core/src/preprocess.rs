//! Volume-to-token preprocessing: canonical resampling, masked z-scoring,
//! cubic patching with index bookkeeping, the inverse map, and MixUp.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::tensor::Tensor;
use crate::volume::{
    decode_f32_payload, expect_line, linear_index, parse_keyed_usizes, read_volume, voxel_count,
    write_volume, BrainVolume, HeaderCursor,
};

pub const NPAT_MAGIC: &str = "NPAT1";
pub const FULL_CANONICAL_DIMS: [usize; 3] = [83, 104, 81];
const SIGMA_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchSpec {
    pub r: usize,
    pub canonical_dims: [usize; 3],
    pub retain_threshold: usize,
}

impl Default for PatchSpec {
    fn default() -> Self {
        PatchSpec {
            r: 14,
            canonical_dims: FULL_CANONICAL_DIMS,
            retain_threshold: 1,
        }
    }
}

impl PatchSpec {
    pub fn new(r: usize, canonical_dims: [usize; 3]) -> Result<Self> {
        let spec = PatchSpec {
            r,
            canonical_dims,
            retain_threshold: 1,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.r >= 1, Error::Invalid("patch edge r must be >= 1".into()));
        ensure!(
            self.canonical_dims.iter().all(|d| *d > 0),
            Error::Invalid(format!("canonical dims must be positive: {:?}", self.canonical_dims))
        );
        Ok(())
    }

    /// C = r³.
    pub fn patch_dim(&self) -> usize {
        self.r * self.r * self.r
    }

    pub fn grid_dims(&self) -> [usize; 3] {
        self.canonical_dims.map(|d| d.div_ceil(self.r))
    }

    pub fn padded_dims(&self) -> [usize; 3] {
        self.grid_dims().map(|g| g * self.r)
    }

    pub fn pad(&self) -> [usize; 3] {
        let p = self.padded_dims();
        [
            p[0] - self.canonical_dims[0],
            p[1] - self.canonical_dims[1],
            p[2] - self.canonical_dims[2],
        ]
    }

    pub fn cell_count(&self) -> usize {
        voxel_count(self.grid_dims())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PatchIndexMap {
    pub grid_dims: [usize; 3],
    pub retained: Vec<usize>,
    pub pad: [usize; 3],
}

impl PatchIndexMap {
    pub fn n(&self) -> usize {
        self.retained.len()
    }

    /// Grid coordinates of a flattened cell index.
    pub fn cell_coords(&self, cell: usize) -> [usize; 3] {
        let [gx, gy, _] = self.grid_dims;
        [cell % gx, (cell / gx) % gy, cell / (gx * gy)]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchedSignal {
    /// N×C, row-major; row k is grid cell `index_map.retained[k]`, x-fastest
    /// within the cube.
    pub values: Vec<f32>,
    pub index_map: PatchIndexMap,
    pub spec: PatchSpec,
    pub provenance: String,
}

impl PatchedSignal {
    pub fn n(&self) -> usize {
        self.index_map.n()
    }

    pub fn row(&self, k: usize) -> &[f32] {
        let c = self.spec.patch_dim();
        &self.values[k * c..(k + 1) * c]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(
            self.n(),
            self.spec.patch_dim(),
            self.values.iter().map(|v| *v as f64).collect(),
        )
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        let cells = voxel_count(self.index_map.grid_dims);
        ensure!(
            self.index_map.grid_dims == self.spec.grid_dims(),
            Error::Shape("index map grid disagrees with patch spec".into())
        );
        ensure!(
            self.index_map.retained.windows(2).all(|w| w[0] < w[1]),
            Error::Invalid("retained indices must be strictly increasing".into())
        );
        ensure!(
            self.index_map.retained.iter().all(|i| *i < cells),
            Error::Invalid("retained index outside the grid".into())
        );
        ensure!(
            self.values.len() == self.n() * self.spec.patch_dim(),
            Error::PayloadMismatch {
                expected: self.n() * self.spec.patch_dim(),
                found: self.values.len()
            }
        );
        Ok(())
    }

    /// Reorders rows (and their grid indices) by `perm`. The result no longer
    /// satisfies the increasing-index invariant; used to probe equivariance.
    pub fn permuted(&self, perm: &[usize]) -> PatchedSignal {
        let c = self.spec.patch_dim();
        let mut values = Vec::with_capacity(self.values.len());
        let mut retained = Vec::with_capacity(perm.len());
        for &k in perm {
            values.extend_from_slice(&self.values[k * c..(k + 1) * c]);
            retained.push(self.index_map.retained[k]);
        }
        PatchedSignal {
            values,
            index_map: PatchIndexMap {
                retained,
                ..self.index_map.clone()
            },
            spec: self.spec.clone(),
            provenance: self.provenance.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskMask {
    pub dims: [usize; 3],
    pub data: Vec<bool>,
}

impl TaskMask {
    pub fn new(dims: [usize; 3], data: Vec<bool>) -> Result<Self> {
        ensure!(
            data.len() == voxel_count(dims),
            Error::PayloadMismatch {
                expected: voxel_count(dims),
                found: data.len()
            }
        );
        ensure!(
            data.iter().any(|b| *b),
            Error::Invalid("task mask has no true voxel".into())
        );
        Ok(TaskMask { dims, data })
    }

    pub fn full(dims: [usize; 3]) -> Self {
        TaskMask {
            dims,
            data: vec![true; voxel_count(dims)],
        }
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|b| **b).count()
    }

    pub fn to_volume(&self) -> BrainVolume {
        BrainVolume {
            subject_id: String::new(),
            dims: self.dims,
            data: self.data.iter().map(|b| if *b { 1.0 } else { 0.0 }).collect(),
        }
    }

    /// Nonzero voxels of `v` become true.
    pub fn from_volume(v: &BrainVolume) -> Result<Self> {
        TaskMask::new(v.dims, v.data.iter().map(|x| *x != 0.0).collect())
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_volume(&self.to_volume(), path)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        TaskMask::from_volume(&read_volume(path)?)
    }
}

pub(crate) fn axis_weights(out_len: usize, in_len: usize) -> Vec<(usize, usize, f64)> {
    let ratio = in_len as f64 / out_len as f64;
    let max = (in_len - 1) as f64;
    (0..out_len)
        .map(|i| {
            let src = ((i as f64 + 0.5) * ratio - 0.5).clamp(0.0, max);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Trilinear resampling with half-pixel-centre (align-corners-false) mapping
/// and edge clamping. Applied as three separable linear passes.
pub fn trilinear_resize(v: &BrainVolume, target: [usize; 3]) -> Result<BrainVolume> {
    ensure!(
        target.iter().all(|d| *d > 0),
        Error::Invalid(format!("target dims must be positive: {target:?}"))
    );
    let [ix, iy, iz] = v.dims;
    let [ox, oy, oz] = target;
    let src: Vec<f64> = v.data.iter().map(|x| *x as f64).collect();

    let wx = axis_weights(ox, ix);
    let mut a = vec![0.0; ox * iy * iz];
    for z in 0..iz {
        for y in 0..iy {
            let row = (y + iy * z) * ix;
            for (x, &(x0, x1, t)) in wx.iter().enumerate() {
                let lo = src[row + x0];
                a[x + ox * (y + iy * z)] = lo + t * (src[row + x1] - lo);
            }
        }
    }
    let wy = axis_weights(oy, iy);
    let mut b = vec![0.0; ox * oy * iz];
    for z in 0..iz {
        for (y, &(y0, y1, t)) in wy.iter().enumerate() {
            for x in 0..ox {
                let lo = a[x + ox * (y0 + iy * z)];
                let hi = a[x + ox * (y1 + iy * z)];
                b[x + ox * (y + oy * z)] = lo + t * (hi - lo);
            }
        }
    }
    let wz = axis_weights(oz, iz);
    let mut out = vec![0.0f32; ox * oy * oz];
    for (z, &(z0, z1, t)) in wz.iter().enumerate() {
        for y in 0..oy {
            for x in 0..ox {
                let lo = b[x + ox * (y + oy * z0)];
                let hi = b[x + ox * (y + oy * z1)];
                out[x + ox * (y + oy * z)] = (lo + t * (hi - lo)) as f32;
            }
        }
    }
    Ok(BrainVolume {
        subject_id: v.subject_id.clone(),
        dims: target,
        data: out,
    })
}

/// Z-scores the whole volume with the mean and population standard deviation
/// of the masked voxels (σ floored at 1e-6).
pub fn normalize(v: &BrainVolume, mask: &TaskMask) -> Result<BrainVolume> {
    ensure!(
        v.dims == mask.dims,
        Error::Shape(format!("volume {:?} vs mask {:?}", v.dims, mask.dims))
    );
    let mut n = 0usize;
    let mut sum = 0.0;
    for (x, m) in v.data.iter().zip(&mask.data) {
        if *m {
            n += 1;
            sum += *x as f64;
        }
    }
    ensure!(n > 0, Error::Invalid("mask selects no voxel".into()));
    let mean = sum / n as f64;
    let var = v
        .data
        .iter()
        .zip(&mask.data)
        .filter(|(_, m)| **m)
        .map(|(x, _)| (*x as f64 - mean).powi(2))
        .sum::<f64>()
        / n as f64;
    let sd = var.sqrt().max(SIGMA_FLOOR);
    Ok(BrainVolume {
        subject_id: v.subject_id.clone(),
        dims: v.dims,
        data: v
            .data
            .iter()
            .map(|x| ((*x as f64 - mean) / sd) as f32)
            .collect(),
    })
}

/// Zero-pads at the high end of each axis, cuts r³ cubes and keeps those with
/// at least `retain_threshold` mask voxels, in increasing cell order.
pub fn patchify(v: &BrainVolume, spec: &PatchSpec, mask: &TaskMask) -> Result<PatchedSignal> {
    spec.validate()?;
    ensure!(
        v.dims == spec.canonical_dims,
        Error::Shape(format!(
            "volume dims {:?} differ from canonical {:?}",
            v.dims, spec.canonical_dims
        ))
    );
    ensure!(
        mask.dims == spec.canonical_dims,
        Error::Shape(format!(
            "mask dims {:?} differ from canonical {:?}",
            mask.dims, spec.canonical_dims
        ))
    );
    let r = spec.r;
    let grid = spec.grid_dims();
    let dims = v.dims;
    let c = spec.patch_dim();
    let mut retained = Vec::new();
    let mut values = Vec::new();
    for gz in 0..grid[2] {
        for gy in 0..grid[1] {
            for gx in 0..grid[0] {
                let cell = linear_index(grid, gx, gy, gz);
                let mut count = 0usize;
                let mut row = Vec::with_capacity(c);
                for dz in 0..r {
                    for dy in 0..r {
                        for dx in 0..r {
                            let (x, y, z) = (gx * r + dx, gy * r + dy, gz * r + dz);
                            if x < dims[0] && y < dims[1] && z < dims[2] {
                                let i = linear_index(dims, x, y, z);
                                if mask.data[i] {
                                    count += 1;
                                }
                                row.push(v.data[i]);
                            } else {
                                row.push(0.0);
                            }
                        }
                    }
                }
                if count >= spec.retain_threshold.max(1) {
                    retained.push(cell);
                    values.extend_from_slice(&row);
                }
            }
        }
    }
    ensure!(
        !retained.is_empty(),
        Error::Invalid("mask retains no patch".into())
    );
    Ok(PatchedSignal {
        values,
        index_map: PatchIndexMap {
            grid_dims: grid,
            retained,
            pad: spec.pad(),
        },
        spec: spec.clone(),
        provenance: v.subject_id.clone(),
    })
}

/// Paints every retained row back into its cube; everything else is zero and
/// the padding is cropped.
pub fn depatchify(p: &PatchedSignal) -> BrainVolume {
    let dims = p.spec.canonical_dims;
    let mut out = BrainVolume::zeros(p.provenance.clone(), dims);
    paint_cells(p, dims, |k, offset| p.row(k)[offset], &mut out.data);
    out
}

/// Calls `value(k, offset_in_cube)` for every in-bounds voxel of every
/// retained cube and stores the result into `out`.
pub fn paint_cells<T: Copy>(
    p: &PatchedSignal,
    dims: [usize; 3],
    value: impl Fn(usize, usize) -> T,
    out: &mut [T],
) {
    let r = p.spec.r;
    for (k, &cell) in p.index_map.retained.iter().enumerate() {
        let [gx, gy, gz] = p.index_map.cell_coords(cell);
        let mut offset = 0;
        for dz in 0..r {
            for dy in 0..r {
                for dx in 0..r {
                    let (x, y, z) = (gx * r + dx, gy * r + dy, gz * r + dz);
                    if x < dims[0] && y < dims[1] && z < dims[2] {
                        out[linear_index(dims, x, y, z)] = value(k, offset);
                    }
                    offset += 1;
                }
            }
        }
    }
}

/// `λ·b1 + (1−λ)·b2`, elementwise. Both signals must share spec and index map.
pub fn mixup(b1: &PatchedSignal, b2: &PatchedSignal, lambda: f64) -> Result<PatchedSignal> {
    ensure!(
        (0.0..=1.0).contains(&lambda),
        Error::Invalid(format!("mixup coefficient {lambda} outside [0,1]"))
    );
    ensure!(
        b1.index_map == b2.index_map && b1.spec == b2.spec,
        Error::Shape("mixup operands have different index maps".into())
    );
    let values = b1
        .values
        .iter()
        .zip(&b2.values)
        .map(|(a, b)| (lambda * *a as f64 + (1.0 - lambda) * *b as f64) as f32)
        .collect();
    Ok(PatchedSignal {
        values,
        index_map: b1.index_map.clone(),
        spec: b1.spec.clone(),
        provenance: b1.provenance.clone(),
    })
}

pub fn build_union_mask(masks: &[TaskMask]) -> Result<TaskMask> {
    let first = masks
        .first()
        .ok_or_else(|| Error::Invalid("union of an empty mask list".into()))?;
    ensure!(
        masks.iter().all(|m| m.dims == first.dims),
        Error::Shape("masks differ in dims".into())
    );
    let data = (0..first.data.len())
        .map(|i| masks.iter().any(|m| m.data[i]))
        .collect();
    TaskMask::new(first.dims, data)
}

/// Resize → normalize → patchify, in that order.
pub fn preprocess(v: &BrainVolume, spec: &PatchSpec, mask: &TaskMask) -> Result<PatchedSignal> {
    let resized = if v.dims == spec.canonical_dims {
        v.clone()
    } else {
        trilinear_resize(v, spec.canonical_dims)?
    };
    let normalized = normalize(&resized, mask)?;
    patchify(&normalized, spec, mask)
}

pub fn encode_patched(p: &PatchedSignal) -> Result<Vec<u8>> {
    p.validate()?;
    ensure!(
        p.values.iter().all(|v| v.is_finite()),
        Error::NonFinite("patched signal".into())
    );
    let g = p.index_map.grid_dims;
    let pad = p.index_map.pad;
    let mut header = format!(
        "{NPAT_MAGIC}\ngrid {} {} {}\nr {}\npad {} {} {}\nretained {}",
        g[0],
        g[1],
        g[2],
        p.spec.r,
        pad[0],
        pad[1],
        pad[2],
        p.n()
    );
    for i in &p.index_map.retained {
        header.push(' ');
        header.push_str(&i.to_string());
    }
    header.push_str("\n---\n");
    let mut out = header.into_bytes();
    for v in &p.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_patched(bytes: &[u8]) -> Result<PatchedSignal> {
    let mut cursor = HeaderCursor::new(bytes);
    let magic = cursor.line()?;
    ensure!(
        magic == NPAT_MAGIC,
        Error::BadMagic {
            expected: NPAT_MAGIC,
            found: magic.to_string()
        }
    );
    let g = parse_keyed_usizes(cursor.line()?, "grid", 3)?;
    let r = parse_keyed_usizes(cursor.line()?, "r", 1)?[0];
    let pad = parse_keyed_usizes(cursor.line()?, "pad", 3)?;
    let retained_line = cursor.long_line()?;
    let mut parts = retained_line.split(' ');
    ensure!(
        parts.next() == Some("retained"),
        Error::Header("expected `retained` line".into())
    );
    let nums: Vec<usize> = parts
        .map(|p| p.parse().map_err(|_| Error::Header(format!("bad index {p:?}"))))
        .collect::<Result<_>>()?;
    ensure!(!nums.is_empty(), Error::Header("empty `retained` line".into()));
    let n = nums[0];
    ensure!(
        nums.len() == n + 1,
        Error::Header(format!("retained count {n} but {} indices", nums.len() - 1))
    );
    expect_line(cursor.line()?, "---")?;
    ensure!(r >= 1, Error::Header("r must be >= 1".into()));
    let grid = [g[0], g[1], g[2]];
    let pad = [pad[0], pad[1], pad[2]];
    let mut canonical = [0; 3];
    for a in 0..3 {
        ensure!(
            grid[a] * r > pad[a],
            Error::Header("padding exceeds padded extent".into())
        );
        canonical[a] = grid[a] * r - pad[a];
    }
    let spec = PatchSpec {
        r,
        canonical_dims: canonical,
        retain_threshold: 1,
    };
    ensure!(
        spec.grid_dims() == grid,
        Error::Header("grid inconsistent with r and pad".into())
    );
    let values = decode_f32_payload(cursor.rest(), n * spec.patch_dim())?;
    ensure!(
        values.iter().all(|v| v.is_finite()),
        Error::NonFinite("patched signal".into())
    );
    let p = PatchedSignal {
        values,
        index_map: PatchIndexMap {
            grid_dims: grid,
            retained: nums[1..].to_vec(),
            pad,
        },
        spec,
        provenance: String::new(),
    };
    p.validate()?;
    Ok(p)
}

pub fn write_patched(p: &PatchedSignal, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_patched(p)?).map_err(|e| Error::io(path, e))
}

pub fn read_patched(path: impl AsRef<Path>) -> Result<PatchedSignal> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut p = decode_patched(&bytes)?;
    p.provenance = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_volume(dims: [usize; 3], seed: u64) -> BrainVolume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        BrainVolume::new(
            "s",
            dims,
            (0..voxel_count(dims)).map(|_| rng.random_range(-2.0..2.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn full_geometry() {
        let spec = PatchSpec::default();
        assert_eq!(spec.padded_dims(), [84, 112, 84]);
        assert_eq!(spec.grid_dims(), [6, 8, 6]);
        assert_eq!(spec.cell_count(), 288);
        assert_eq!(spec.patch_dim(), 2744);
        assert_eq!(spec.pad(), [1, 8, 3]);
    }

    #[test]
    fn resize_identity_and_constant() {
        let v = random_volume([5, 4, 3], 1);
        assert_eq!(trilinear_resize(&v, [5, 4, 3]).unwrap().data, v.data);
        let c = BrainVolume::new("s", [3, 4, 5], vec![3.5; 60]).unwrap();
        let out = trilinear_resize(&c, [7, 2, 9]).unwrap();
        assert!(out.data.iter().all(|x| *x == 3.5));
    }

    #[test]
    fn normalize_hand_values() {
        let v = BrainVolume::new("s", [3, 1, 1], vec![1.0, 2.0, 3.0]).unwrap();
        let out = normalize(&v, &TaskMask::full([3, 1, 1])).unwrap();
        let e = 1.224_744_871_391_589;
        assert!((out.data[0] as f64 + e).abs() < 1e-6);
        assert_eq!(out.data[1], 0.0);
        assert!((out.data[2] as f64 - e).abs() < 1e-6);
    }

    #[test]
    fn normalize_constant_and_idempotent() {
        let c = BrainVolume::new("s", [2, 2, 2], vec![4.0; 8]).unwrap();
        let m = TaskMask::full([2, 2, 2]);
        assert!(normalize(&c, &m).unwrap().data.iter().all(|x| *x == 0.0));
        let v = random_volume([4, 4, 4], 2);
        let once = normalize(&v, &TaskMask::full([4, 4, 4])).unwrap();
        let twice = normalize(&once, &TaskMask::full([4, 4, 4])).unwrap();
        for (a, b) in once.data.iter().zip(&twice.data) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn patchify_full_and_single_voxel_masks() {
        let spec = PatchSpec::default();
        let v = BrainVolume::zeros("s", spec.canonical_dims);
        let full = patchify(&v, &spec, &TaskMask::full(spec.canonical_dims)).unwrap();
        assert_eq!(full.n(), 288);
        let mut data = vec![false; voxel_count(spec.canonical_dims)];
        data[0] = true;
        let one = TaskMask::new(spec.canonical_dims, data).unwrap();
        let p = patchify(&v, &spec, &one).unwrap();
        assert_eq!(p.index_map.retained, vec![0]);
    }

    #[test]
    fn retain_threshold_filters_sparse_cubes() {
        let spec = PatchSpec {
            r: 2,
            canonical_dims: [4, 2, 2],
            retain_threshold: 2,
        };
        let mut data = vec![false; 16];
        data[0] = true; // cube 0 has one voxel
        data[2] = true;
        data[3] = true; // cube 1 has two
        let mask = TaskMask::new([4, 2, 2], data).unwrap();
        let p = patchify(&BrainVolume::zeros("s", [4, 2, 2]), &spec, &mask).unwrap();
        assert_eq!(p.index_map.retained, vec![1]);
    }

    #[test]
    fn depatchify_round_trip_and_single_cube() {
        let spec = PatchSpec::new(3, [7, 5, 4]).unwrap();
        let v = random_volume([7, 5, 4], 3);
        let full = patchify(&v, &spec, &TaskMask::full([7, 5, 4])).unwrap();
        assert_eq!(depatchify(&full).data, v.data);

        let mut data = vec![false; 140];
        data[linear_index([7, 5, 4], 4, 4, 3)] = true;
        let mask = TaskMask::new([7, 5, 4], data).unwrap();
        let p = patchify(&v, &spec, &mask).unwrap();
        assert_eq!(p.n(), 1);
        let back = depatchify(&p);
        for z in 0..4 {
            for y in 0..5 {
                for x in 0..7 {
                    let inside = x >= 3 && x < 6 && y >= 3 && z >= 3;
                    let val = back.get(x, y, z);
                    if inside {
                        assert_eq!(val, v.get(x, y, z));
                    } else {
                        assert_eq!(val, 0.0);
                    }
                }
            }
        }
        let again = patchify(&back, &spec, &mask).unwrap();
        assert_eq!(again.values, p.values);
    }

    #[test]
    fn mixup_endpoints_and_arithmetic() {
        let spec = PatchSpec::new(1, [2, 1, 1]).unwrap();
        let mask = TaskMask::full([2, 1, 1]);
        let a = patchify(&BrainVolume::new("s", [2, 1, 1], vec![4.0, 1.0]).unwrap(), &spec, &mask).unwrap();
        let b = patchify(&BrainVolume::new("s", [2, 1, 1], vec![8.0, -3.0]).unwrap(), &spec, &mask).unwrap();
        assert_eq!(mixup(&a, &b, 1.0).unwrap().values, a.values);
        assert_eq!(mixup(&a, &b, 0.0).unwrap().values, b.values);
        assert_eq!(mixup(&a, &b, 0.25).unwrap().values, vec![7.0, -2.0]);
        assert!(mixup(&a, &b, 1.5).is_err());
        let other = patchify(
            &BrainVolume::new("s", [2, 1, 1], vec![1.0, 1.0]).unwrap(),
            &spec,
            &TaskMask::new([2, 1, 1], vec![true, false]).unwrap(),
        )
        .unwrap();
        assert!(matches!(mixup(&a, &other, 0.5), Err(Error::Shape(_))));
    }

    #[test]
    fn union_mask_cases() {
        let dims = [10, 3, 1];
        let mut a = vec![false; 30];
        let mut b = vec![false; 30];
        a[..10].iter_mut().for_each(|x| *x = true);
        b[10..].iter_mut().for_each(|x| *x = true);
        let ma = TaskMask::new(dims, a).unwrap();
        let mb = TaskMask::new(dims, b).unwrap();
        assert_eq!(build_union_mask(&[ma.clone()]).unwrap(), ma);
        assert_eq!(build_union_mask(&[ma.clone(), mb]).unwrap().count(), 30);
        assert_eq!(build_union_mask(&[ma.clone(), ma.clone()]).unwrap(), ma);
        assert!(build_union_mask(&[]).is_err());
    }

    #[test]
    fn npat_round_trip() {
        let spec = PatchSpec::new(3, [7, 5, 4]).unwrap();
        let v = random_volume([7, 5, 4], 9);
        let mut data = vec![false; 140];
        data[5] = true;
        data[139] = true;
        let p = patchify(&v, &spec, &TaskMask::new([7, 5, 4], data).unwrap()).unwrap();
        let bytes = encode_patched(&p).unwrap();
        let text = String::from_utf8_lossy(&bytes[..60]).to_string();
        assert!(text.starts_with("NPAT1\ngrid 3 2 2\nr 3\npad 2 1 2\nretained 2 1 11\n---\n"));
        let back = decode_patched(&bytes).unwrap();
        assert_eq!(back.values, p.values);
        assert_eq!(back.index_map, p.index_map);
        assert_eq!(back.spec, p.spec);
    }
}
