use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use voxelbridge::preprocess::{
    depatchify, decode_patched, encode_patched, patchify, trilinear_resize, PatchSpec, TaskMask,
};
use voxelbridge::volume::{decode_volume, encode_volume, BrainVolume};

fn random_volume(r: &mut ChaCha8Rng, dims: [usize; 3]) -> BrainVolume {
    let n = dims.iter().product();
    BrainVolume::new("s", dims, (0..n).map(|_| r.random_range(-2.0..2.0)).collect()).unwrap()
}

/// Weighted sum over the eight neighbours, half-pixel centres, clamped.
fn resize_oracle(v: &BrainVolume, target: [usize; 3]) -> Vec<f64> {
    let coord = |o: usize, n_in: usize, n_out: usize| {
        let c = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let lo = c.floor() as usize;
        (lo, (lo + 1).min(n_in - 1), c - lo as f64)
    };
    let at = |x: usize, y: usize, z: usize| v.data[x + v.dims[0] * (y + v.dims[1] * z)] as f64;
    let mut out = Vec::new();
    for z in 0..target[2] {
        let (z0, z1, tz) = coord(z, v.dims[2], target[2]);
        for y in 0..target[1] {
            let (y0, y1, ty) = coord(y, v.dims[1], target[1]);
            for x in 0..target[0] {
                let (x0, x1, tx) = coord(x, v.dims[0], target[0]);
                let mut s = 0.0;
                for (xi, wx) in [(x0, 1.0 - tx), (x1, tx)] {
                    for (yi, wy) in [(y0, 1.0 - ty), (y1, ty)] {
                        for (zi, wz) in [(z0, 1.0 - tz), (z1, tz)] {
                            s += wx * wy * wz * at(xi, yi, zi);
                        }
                    }
                }
                out.push(s);
            }
        }
    }
    out
}

#[test]
fn resize_matches_corner_weighted_oracle() {
    let mut r = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..12 {
        let dims = [r.random_range(2..12), r.random_range(2..12), r.random_range(2..12)];
        let target = [r.random_range(1..15), r.random_range(1..15), r.random_range(1..15)];
        let v = random_volume(&mut r, dims);
        let got = trilinear_resize(&v, target).unwrap();
        let want = resize_oracle(&v, target);
        let worst = got
            .data
            .iter()
            .zip(&want)
            .map(|(a, b)| (*a as f64 - b).abs())
            .fold(0.0, f64::max);
        assert!(worst < 1e-6, "{dims:?} -> {target:?}: {worst}");
    }
}

#[test]
fn resize_to_same_size_is_identity() {
    let mut r = ChaCha8Rng::seed_from_u64(2);
    let v = random_volume(&mut r, [5, 7, 3]);
    assert_eq!(trilinear_resize(&v, v.dims).unwrap().data, v.data);
}

#[test]
fn canonical_grid_geometry() {
    // ceil(83/14), ceil(104/14), ceil(81/14)
    let spec = PatchSpec::new(14, [83, 104, 81]).unwrap();
    assert_eq!(spec.grid_dims(), [6, 8, 6]);
    assert_eq!(spec.cell_count(), 6 * 8 * 6);
    assert_eq!(spec.patch_dim(), 14 * 14 * 14);
    assert_eq!(spec.padded_dims(), [84, 112, 84]);
}

#[test]
fn patchify_round_trip_under_full_mask() {
    let mut r = ChaCha8Rng::seed_from_u64(5);
    let dims = [13, 9, 10];
    let v = random_volume(&mut r, dims);
    let spec = PatchSpec::new(4, dims).unwrap();
    let p = patchify(&v, &spec, &TaskMask::full(dims)).unwrap();
    assert_eq!(p.n(), spec.cell_count());
    assert_eq!(depatchify(&p).data, v.data);
}

#[test]
fn partial_mask_keeps_touched_cubes_only() {
    let dims = [8, 8, 8];
    let mut data = vec![false; 512];
    data[0] = true; // cube (0,0,0)
    data[7 + 8 * (7 + 8 * 7)] = true; // cube (1,1,1)
    let mask = TaskMask::new(dims, data).unwrap();
    let spec = PatchSpec::new(4, dims).unwrap();
    let v = BrainVolume::new("s", dims, (0..512).map(|i| i as f32).collect()).unwrap();
    let p = patchify(&v, &spec, &mask).unwrap();
    assert_eq!(p.index_map.retained, vec![0, 7]);
    let back = depatchify(&p);
    assert_eq!(back.data[0], 0.0);
    assert_eq!(back.data[511], 511.0);
    assert_eq!(back.data[4], 0.0, "dropped cube comes back as zero");
}

#[test]
fn file_formats_round_trip() {
    let mut r = ChaCha8Rng::seed_from_u64(8);
    let v = random_volume(&mut r, [6, 5, 4]);
    assert_eq!(decode_volume(&encode_volume(&v).unwrap()).unwrap().data, v.data);
    let spec = PatchSpec::new(3, v.dims).unwrap();
    let p = patchify(&v, &spec, &TaskMask::full(v.dims)).unwrap();
    let back = decode_patched(&encode_patched(&p).unwrap()).unwrap();
    assert_eq!(back.values, p.values);
    assert_eq!(back.index_map, p.index_map);
}

#[test]
fn corrupt_volume_is_rejected() {
    let mut r = ChaCha8Rng::seed_from_u64(9);
    let mut bytes = encode_volume(&random_volume(&mut r, [3, 3, 3])).unwrap();
    bytes.truncate(bytes.len() - 4);
    let e = decode_volume(&bytes).unwrap_err();
    assert_eq!(e.category(), "format");
    let e = decode_volume(b"NOPE\n").unwrap_err();
    assert_eq!(e.category(), "format");
}
