//! Backward warping of volumes through dense motion fields.
//!
//! Every output voxel samples the reference at `p + field(p)` with
//! bilinear (per-slice) or trilinear intensity interpolation. All
//! arithmetic is fixed point with [`FP_BITS`](crate::mesh::FP_BITS)
//! fractional bits and 64-bit accumulators, so results are bit-identical
//! across runs, platforms, and thread counts. Sampling positions are
//! clamped to the volume bounds component-wise.

use crate::error::{Error, Result};
use crate::mesh::{Mesh, Meshes, MotionField, FP_BITS};
use crate::par;
use crate::volume::Volume3D;

/// A warped volume before rounding: intensities in fixed point.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WarpResult {
    width: usize,
    height: usize,
    depth: usize,
    samples_fp: Vec<i32>,
}

impl WarpResult {
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.width, self.height, self.depth)
    }

    /// Fixed-point intensities, x-fastest.
    pub fn samples_fp(&self) -> &[i32] {
        &self.samples_fp
    }

    #[inline]
    pub fn get_fp(&self, x: usize, y: usize, z: usize) -> i32 {
        self.samples_fp[x + self.width * (y + self.height * z)]
    }

    /// Floor (toward minus infinity) to integer intensities.
    pub fn floor_to_volume(&self) -> Volume3D {
        let samples = self.samples_fp.iter().map(|&v| v >> FP_BITS).collect();
        Volume3D::from_samples(self.width, self.height, self.depth, samples).expect("same dims")
    }
}

#[inline]
pub(crate) fn sample_trilinear_fp(vol: &Volume3D, sx: i64, sy: i64, sz: i64) -> i32 {
    let (w, h, d) = vol.dims();
    let fp = 1i64 << FP_BITS;
    let mask = fp - 1;
    let sx = sx.clamp(0, ((w - 1) as i64) << FP_BITS);
    let sy = sy.clamp(0, ((h - 1) as i64) << FP_BITS);
    let sz = sz.clamp(0, ((d - 1) as i64) << FP_BITS);
    let (x0, fx) = ((sx >> FP_BITS) as usize, sx & mask);
    let (y0, fy) = ((sy >> FP_BITS) as usize, sy & mask);
    let (z0, fz) = ((sz >> FP_BITS) as usize, sz & mask);
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let z1 = (z0 + 1).min(d - 1);
    let wx = [fp - fx, fx];
    let wy = [fp - fy, fy];
    let wz = [fp - fz, fz];
    let xs = [x0, x1];
    let ys = [y0, y1];
    let zs = [z0, z1];
    let mut acc = 0i64;
    for dk in 0..2 {
        if wz[dk] == 0 {
            continue;
        }
        for dj in 0..2 {
            if wy[dj] == 0 {
                continue;
            }
            for di in 0..2 {
                if wx[di] == 0 {
                    continue;
                }
                acc += vol.get(xs[di], ys[dj], zs[dk]) as i64 * (wx[di] * wy[dj] * wz[dk]);
            }
        }
    }
    // acc is intensity * 2^(3*FP_BITS); floor down to fp8.
    (acc >> (2 * FP_BITS)) as i32
}

#[inline]
pub(crate) fn sample_bilinear_fp(vol: &Volume3D, z: usize, sx: i64, sy: i64) -> i32 {
    let (w, h, _) = vol.dims();
    let fp = 1i64 << FP_BITS;
    let mask = fp - 1;
    let sx = sx.clamp(0, ((w - 1) as i64) << FP_BITS);
    let sy = sy.clamp(0, ((h - 1) as i64) << FP_BITS);
    let (x0, fx) = ((sx >> FP_BITS) as usize, sx & mask);
    let (y0, fy) = ((sy >> FP_BITS) as usize, sy & mask);
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let wx = [fp - fx, fx];
    let wy = [fp - fy, fy];
    let xs = [x0, x1];
    let ys = [y0, y1];
    let mut acc = 0i64;
    for dj in 0..2 {
        if wy[dj] == 0 {
            continue;
        }
        for di in 0..2 {
            if wx[di] == 0 {
                continue;
            }
            acc += vol.get(xs[di], ys[dj], z) as i64 * (wx[di] * wy[dj]);
        }
    }
    (acc >> FP_BITS) as i32
}

/// Warp `reference` through a dense field of matching dimensions.
///
/// A 2-component field shifts within slices (bilinear); a 3-component
/// field samples trilinearly.
pub fn warp(reference: &Volume3D, field: &MotionField) -> Result<WarpResult> {
    let (w, h, d) = reference.dims();
    if field.dims() != (w, h, d) {
        return Err(Error::DimensionMismatch(format!(
            "field {:?} vs volume {:?}",
            field.dims(),
            reference.dims()
        )));
    }
    let three = field.components() == 3;
    let mut out = vec![0i32; w * h * d];
    par::for_each_chunk(&mut out, w * h, |z, chunk| {
        let mut idx = 0;
        for y in 0..h {
            for x in 0..w {
                let f = field.get(x, y, z);
                let sx = ((x as i64) << FP_BITS) + f[0] as i64;
                let sy = ((y as i64) << FP_BITS) + f[1] as i64;
                chunk[idx] = if three {
                    let sz = ((z as i64) << FP_BITS) + f[2] as i64;
                    sample_trilinear_fp(reference, sx, sy, sz)
                } else {
                    sample_bilinear_fp(reference, z, sx, sy)
                };
                idx += 1;
            }
        }
    });
    Ok(WarpResult {
        width: w,
        height: h,
        depth: d,
        samples_fp: out,
    })
}

/// Warp `reference` through the field induced by a mesh set.
///
/// Equals `warp(reference, dense_field(mesh))`, evaluated without
/// materializing the field.
pub fn compensate(reference: &Volume3D, meshes: &Meshes) -> Result<WarpResult> {
    let (w, h, d) = reference.dims();
    meshes.check_dims(w, h, d)?;
    let mut out = vec![0i32; w * h * d];
    match meshes {
        Meshes::None => {
            for (o, &s) in out.iter_mut().zip(reference.samples()) {
                *o = s << FP_BITS;
            }
        }
        Meshes::Volume(mesh) => {
            par::for_each_chunk(&mut out, w * h, |z, chunk| {
                warp_slice_3d(reference, mesh, z, chunk);
            });
        }
        Meshes::Slices(ms) => {
            par::for_each_chunk(&mut out, w * h, |z, chunk| {
                warp_slice_2d(reference, &ms[z], z, chunk);
            });
        }
    }
    Ok(WarpResult {
        width: w,
        height: h,
        depth: d,
        samples_fp: out,
    })
}

fn warp_slice_3d(reference: &Volume3D, mesh: &Mesh, z: usize, chunk: &mut [i32]) {
    let (w, h, _) = reference.dims();
    let mut idx = 0;
    for y in 0..h {
        for x in 0..w {
            let f = mesh.field_at(x, y, z);
            let sx = ((x as i64) << FP_BITS) + f[0] as i64;
            let sy = ((y as i64) << FP_BITS) + f[1] as i64;
            let sz = ((z as i64) << FP_BITS) + f[2] as i64;
            chunk[idx] = sample_trilinear_fp(reference, sx, sy, sz);
            idx += 1;
        }
    }
}

fn warp_slice_2d(reference: &Volume3D, mesh: &Mesh, z: usize, chunk: &mut [i32]) {
    let (w, h, _) = reference.dims();
    let mut idx = 0;
    for y in 0..h {
        for x in 0..w {
            let f = mesh.field_at(x, y, 0);
            let sx = ((x as i64) << FP_BITS) + f[0] as i64;
            let sy = ((y as i64) << FP_BITS) + f[1] as i64;
            chunk[idx] = sample_bilinear_fp(reference, z, sx, sy);
            idx += 1;
        }
    }
}

/// Approximate inverse of [`compensate`]: warp with negated grid-point
/// vectors. Not an exact inverse; the lifting structure absorbs the error.
pub fn inverse_compensate(band: &Volume3D, meshes: &Meshes) -> Result<WarpResult> {
    compensate(band, &meshes.negate())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{create_mesh, dense_field, dense_field_slices, GridSpec, FP_ONE};

    fn ramp_x(w: usize, h: usize, d: usize) -> Volume3D {
        let mut v = Volume3D::zeros(w, h, d);
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    v.set(x, y, z, x as i32);
                }
            }
        }
        v
    }

    #[test]
    fn zero_field_is_identity() {
        let vol = ramp_x(5, 4, 3);
        let field = MotionField::zeros(5, 4, 3, 3);
        let out = warp(&vol, &field).unwrap();
        for z in 0..3 {
            for y in 0..4 {
                for x in 0..5 {
                    assert_eq!(out.get_fp(x, y, z), vol.get(x, y, z) << FP_BITS);
                }
            }
        }
    }

    #[test]
    fn unit_shift_on_ramp_clamps_at_boundary() {
        let w = 6;
        let vol = ramp_x(w, 3, 2);
        let data = vec![FP_ONE; w * 3 * 2 * 3];
        let mut data = data;
        // Only x displacement: zero the y and z components.
        for c in 0..data.len() {
            if c % 3 != 0 {
                data[c] = 0;
            }
        }
        let field = MotionField::from_data(w, 3, 2, 3, data).unwrap();
        let out = warp(&vol, &field).unwrap();
        for z in 0..2 {
            for y in 0..3 {
                for x in 0..w {
                    let want = (x + 1).min(w - 1) as i32;
                    assert_eq!(out.get_fp(x, y, z), want << FP_BITS);
                }
            }
        }
    }

    #[test]
    fn warp_matches_brute_force_oracle() {
        // Independent oracle: floor division arithmetic, no shifts.
        fn oracle(vol: &Volume3D, p: [usize; 3], f: [i32; 3]) -> i32 {
            let (w, h, d) = vol.dims();
            let clamp = |v: i128, hi: usize| v.clamp(0, ((hi - 1) as i128) * 256);
            let sx = clamp(p[0] as i128 * 256 + f[0] as i128, w);
            let sy = clamp(p[1] as i128 * 256 + f[1] as i128, h);
            let sz = clamp(p[2] as i128 * 256 + f[2] as i128, d);
            let (x0, fx) = ((sx.div_euclid(256)) as usize, sx.rem_euclid(256));
            let (y0, fy) = ((sy.div_euclid(256)) as usize, sy.rem_euclid(256));
            let (z0, fz) = ((sz.div_euclid(256)) as usize, sz.rem_euclid(256));
            let mut acc: i128 = 0;
            for dk in 0..2usize {
                for dj in 0..2usize {
                    for di in 0..2usize {
                        let xx = (x0 + di).min(w - 1);
                        let yy = (y0 + dj).min(h - 1);
                        let zz = (z0 + dk).min(d - 1);
                        let wgt = (if di == 0 { 256 - fx } else { fx })
                            * (if dj == 0 { 256 - fy } else { fy })
                            * (if dk == 0 { 256 - fz } else { fz });
                        acc += vol.get(xx, yy, zz) as i128 * wgt;
                    }
                }
            }
            acc.div_euclid(65536) as i32
        }

        let (w, h, d) = (6, 6, 4);
        let mut state = 12345u64;
        let mut next = |m: u64| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 33) % m
        };
        let samples: Vec<i32> = (0..w * h * d).map(|_| next(4096) as i32).collect();
        let vol = Volume3D::from_samples(w, h, d, samples).unwrap();
        let data: Vec<i32> = (0..w * h * d * 3)
            .map(|_| next(2 * 700 + 1) as i32 - 700)
            .collect();
        let field = MotionField::from_data(w, h, d, 3, data).unwrap();
        let out = warp(&vol, &field).unwrap();
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let f = field.get(x, y, z);
                    assert_eq!(out.get_fp(x, y, z), oracle(&vol, [x, y, z], f));
                }
            }
        }
    }

    #[test]
    fn compensate_zero_mesh_is_identity() {
        let vol = ramp_x(8, 8, 4);
        let spec = GridSpec::three_d(4, 4, 2, 8, 8, 4).unwrap();
        let meshes = Meshes::Volume(create_mesh(&spec));
        let out = compensate(&vol, &meshes).unwrap();
        for (i, &s) in vol.samples().iter().enumerate() {
            assert_eq!(out.samples_fp()[i], s << FP_BITS);
        }
        // And the explicit no-compensation mode matches the zero mesh.
        let none = compensate(&vol, &Meshes::None).unwrap();
        assert_eq!(none, out);
    }

    #[test]
    fn displaced_grid_point_touches_only_incident_cells() {
        let vol = ramp_x(12, 12, 8);
        let spec = GridSpec::three_d(4, 4, 4, 12, 12, 8).unwrap();
        let mut mesh = create_mesh(&spec);
        let id = mesh.gp_id(1, 1, 1);
        mesh.set_vector(id, [1, -1, 1]);
        let out = compensate(&vol, &Meshes::Volume(mesh)).unwrap();
        let ident = compensate(&vol, &Meshes::None).unwrap();
        // Incident cells cover voxel coords [0,8) x [0,8) x [0,8).
        for z in 0..8 {
            for y in 0..12 {
                for x in 0..12 {
                    let inside = x < 8 && y < 8 && z < 8;
                    if !inside {
                        assert_eq!(
                            out.get_fp(x, y, z),
                            ident.get_fp(x, y, z),
                            "voxel ({x},{y},{z}) outside support changed"
                        );
                    }
                }
            }
        }
        // Something inside the support must differ for a ramp.
        assert_ne!(out, ident);
    }

    #[test]
    fn compensate_equals_warp_of_dense_field() {
        let mut state = 99u64;
        let mut next = |m: u64| {
            state = state.wrapping_mul(2862933555777941757).wrapping_add(3037000493);
            (state >> 33) % m
        };
        let (w, h, d) = (8, 8, 4);
        let samples: Vec<i32> = (0..w * h * d).map(|_| next(4096) as i32).collect();
        let vol = Volume3D::from_samples(w, h, d, samples).unwrap();

        let spec = GridSpec::three_d(4, 4, 2, w, h, d).unwrap();
        let mut mesh = create_mesh(&spec);
        for id in 0..mesh.grid_point_count() {
            let free = mesh.free_axes(id);
            let mut v = [0; 3];
            for a in 0..3 {
                if free[a] {
                    v[a] = next(5) as i32 - 2;
                }
            }
            mesh.set_vector(id, v);
        }
        let fused = compensate(&vol, &Meshes::Volume(mesh.clone())).unwrap();
        let composed = warp(&vol, &dense_field(&mesh)).unwrap();
        assert_eq!(fused, composed);

        let spec2 = GridSpec::two_d(4, 4, w, h).unwrap();
        let mut slices = Vec::new();
        for _ in 0..d {
            let mut m = create_mesh(&spec2);
            for id in 0..m.grid_point_count() {
                let free = m.free_axes(id);
                let mut v = [0; 3];
                for a in 0..2 {
                    if free[a] {
                        v[a] = next(5) as i32 - 2;
                    }
                }
                m.set_vector(id, v);
            }
            slices.push(m);
        }
        let fused2 = compensate(&vol, &Meshes::Slices(slices.clone())).unwrap();
        let composed2 = warp(&vol, &dense_field_slices(&slices).unwrap()).unwrap();
        assert_eq!(fused2, composed2);
    }

    #[test]
    fn inverse_compensate_is_compensate_with_negated_mesh() {
        let vol = ramp_x(8, 8, 4);
        let spec = GridSpec::three_d(4, 4, 2, 8, 8, 4).unwrap();
        let mut mesh = create_mesh(&spec);
        mesh.set_vector(mesh.gp_id(1, 1, 1), [2, 1, -1]);
        let meshes = Meshes::Volume(mesh);
        let a = inverse_compensate(&vol, &meshes).unwrap();
        let b = compensate(&vol, &meshes.negate()).unwrap();
        assert_eq!(a, b);
        // Zero mesh: identity.
        let zero = Meshes::Volume(create_mesh(&spec));
        let c = inverse_compensate(&vol, &zero).unwrap();
        assert_eq!(c, compensate(&vol, &Meshes::None).unwrap());
    }

    #[test]
    fn warped_samples_stay_in_reference_range() {
        let mut state = 7u64;
        let mut next = |m: u64| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1);
            (state >> 33) % m
        };
        let (w, h, d) = (6, 5, 4);
        let samples: Vec<i32> = (0..w * h * d).map(|_| next(4096) as i32).collect();
        let vol = Volume3D::from_samples(w, h, d, samples).unwrap();
        let lo = *vol.samples().iter().min().unwrap();
        let hi = *vol.samples().iter().max().unwrap();
        let data: Vec<i32> = (0..w * h * d * 3)
            .map(|_| next(1025) as i32 - 512)
            .collect();
        let field = MotionField::from_data(w, h, d, 3, data).unwrap();
        let out = warp(&vol, &field).unwrap();
        for &s in out.samples_fp() {
            assert!(s >= lo << FP_BITS && s <= hi << FP_BITS);
        }
    }
}
