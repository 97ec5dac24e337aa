//! Regular deformation meshes: 2-D quadrilateral and 3-D hexahedral grids
//! of grid points carrying integer motion vectors.
//!
//! Grid point (i, j, k) rests at (i*gx, j*gy, k*gz) in voxel coordinates;
//! the mesh covers the continuous domain [0, width] x [0, height] x
//! [0, depth]. Motion vectors on the outer hull are constrained so the
//! hull keeps its shape: a component is free only where the grid index is
//! interior along that axis. Corners are fully fixed, boundary edges keep
//! only their along-edge component, boundary faces lose their normal
//! component.
//!
//! Dense per-voxel fields are bilinear/trilinear interpolations of the
//! grid vectors, in fixed point with [`FP_BITS`] fractional bits.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::par;

/// Fractional bits of dense motion fields and warped intensities.
pub const FP_BITS: u32 = 8;
/// 1.0 in fixed point.
pub const FP_ONE: i32 = 1 << FP_BITS;

/// Grid geometry: cell sizes plus the volume dimensions they tile.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridSpec {
    dims: [usize; 3],
    cells: [usize; 3],
    three_d: bool,
}

impl GridSpec {
    /// 2-D grid over one slice of the given width and height.
    pub fn two_d(gx: usize, gy: usize, width: usize, height: usize) -> Result<Self> {
        let spec = Self {
            dims: [width, height, 1],
            cells: [gx, gy, 0],
            three_d: false,
        };
        spec.check()?;
        Ok(spec)
    }

    /// 3-D grid over a volume.
    pub fn three_d(
        gx: usize,
        gy: usize,
        gz: usize,
        width: usize,
        height: usize,
        depth: usize,
    ) -> Result<Self> {
        let spec = Self {
            dims: [width, height, depth],
            cells: [gx, gy, gz],
            three_d: true,
        };
        spec.check()?;
        Ok(spec)
    }

    fn check(&self) -> Result<()> {
        let axes = if self.three_d { 3 } else { 2 };
        for a in 0..axes {
            let (g, dim) = (self.cells[a], self.dims[a]);
            if g < 2 {
                return Err(Error::InvalidGrid(format!(
                    "cell size {g} on axis {a} must be >= 2"
                )));
            }
            if dim == 0 || dim % g != 0 {
                return Err(Error::InvalidGrid(format!(
                    "cell size {g} does not divide dimension {dim} on axis {a}"
                )));
            }
        }
        Ok(())
    }

    pub fn is_three_d(&self) -> bool {
        self.three_d
    }

    /// Volume dims covered by one mesh of this spec (depth 1 for 2-D).
    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    /// Cell sizes; the z entry is meaningless for 2-D specs.
    pub fn cell_sizes(&self) -> [usize; 3] {
        self.cells
    }

    /// Grid point counts per axis (nz = 1 for 2-D).
    pub fn points(&self) -> [usize; 3] {
        let mut n = [1usize; 3];
        let axes = if self.three_d { 3 } else { 2 };
        for a in 0..axes {
            n[a] = self.dims[a] / self.cells[a] + 1;
        }
        n
    }

    pub fn grid_point_count(&self) -> usize {
        let n = self.points();
        n[0] * n[1] * n[2]
    }

    /// Number of motion components per grid point (2 or 3).
    pub fn components(&self) -> usize {
        if self.three_d {
            3
        } else {
            2
        }
    }

    /// Scalar degrees of freedom of one mesh after the hull constraints.
    pub fn free_parameters(&self) -> u64 {
        let n = self.points();
        let mut total = 0u64;
        for k in 0..n[2] {
            for j in 0..n[1] {
                for i in 0..n[0] {
                    let idx = [i, j, k];
                    for a in 0..3 {
                        if idx[a] > 0 && idx[a] + 1 < n[a] {
                            total += 1;
                        }
                    }
                }
            }
        }
        total
    }
}

/// Total free parameters for a spec applied per slice (`slices` = 1 for 3-D).
pub fn count_free_parameters(spec: &GridSpec, slices: usize) -> u64 {
    spec.free_parameters() * slices as u64
}

/// A mesh: a grid spec plus one integer motion vector per grid point.
///
/// The z vector component of a 2-D mesh is always zero.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mesh {
    spec: GridSpec,
    vectors: Vec<[i32; 3]>,
}

/// Create a mesh with all motion vectors zero.
pub fn create_mesh(spec: &GridSpec) -> Mesh {
    Mesh {
        spec: *spec,
        vectors: vec![[0; 3]; spec.grid_point_count()],
    }
}

impl Mesh {
    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn grid_point_count(&self) -> usize {
        self.vectors.len()
    }

    #[inline]
    pub fn gp_id(&self, i: usize, j: usize, k: usize) -> usize {
        let n = self.spec.points();
        debug_assert!(i < n[0] && j < n[1] && k < n[2]);
        i + n[0] * (j + n[1] * k)
    }

    #[inline]
    pub fn gp_coords(&self, id: usize) -> [usize; 3] {
        let n = self.spec.points();
        let i = id % n[0];
        let j = (id / n[0]) % n[1];
        let k = id / (n[0] * n[1]);
        [i, j, k]
    }

    /// Rest position of a grid point in voxel coordinates.
    pub fn rest(&self, id: usize) -> [i64; 3] {
        let c = self.gp_coords(id);
        let g = self.spec.cells;
        [
            (c[0] * g[0]) as i64,
            (c[1] * g[1]) as i64,
            (c[2] * g[2]) as i64,
        ]
    }

    pub fn vector(&self, id: usize) -> [i32; 3] {
        self.vectors[id]
    }

    pub fn set_vector(&mut self, id: usize, v: [i32; 3]) {
        debug_assert!(!self.spec.three_d && v[2] == 0 || self.spec.three_d);
        self.vectors[id] = v;
    }

    pub fn vectors(&self) -> &[[i32; 3]] {
        &self.vectors
    }

    /// Current (rest + motion) position.
    pub fn position(&self, id: usize) -> [i64; 3] {
        let r = self.rest(id);
        let v = self.vectors[id];
        [r[0] + v[0] as i64, r[1] + v[1] as i64, r[2] + v[2] as i64]
    }

    /// Per-axis freedom after the hull rules: free iff the grid index is
    /// interior along that axis.
    pub fn free_axes(&self, id: usize) -> [bool; 3] {
        let c = self.gp_coords(id);
        let n = self.spec.points();
        let mut free = [false; 3];
        for a in 0..3 {
            free[a] = c[a] > 0 && c[a] + 1 < n[a];
        }
        free
    }

    fn neighbor_id(&self, id: usize, axis: usize, dir: i64) -> usize {
        let mut c = self.gp_coords(id);
        c[axis] = (c[axis] as i64 + dir) as usize;
        self.gp_id(c[0], c[1], c[2])
    }

    /// Whether `candidate` (an absolute position) is an admissible location
    /// for grid point `id` given safety margin `d` (voxels).
    ///
    /// Free components are bounded by the convex polytope of the direct
    /// neighbors' current positions (segment / quadrilateral / octahedron)
    /// with every bounding hyperplane moved inward by Euclidean distance
    /// `d`; fixed components must equal the rest position.
    pub fn candidate_allowed(&self, id: usize, candidate: [i64; 3], d: u32) -> Result<bool> {
        if id >= self.vectors.len() {
            return Err(Error::IndexOutOfRange(format!(
                "grid point {id} of {}",
                self.vectors.len()
            )));
        }
        let rest = self.rest(id);
        let free = self.free_axes(id);
        for a in 0..3 {
            if !free[a] && candidate[a] != rest[a] {
                return Ok(false);
            }
        }
        let free_list: Vec<usize> = (0..3).filter(|&a| free[a]).collect();
        let d = d as i64;
        match free_list.len() {
            0 => Ok(true),
            1 => {
                let a = free_list[0];
                let lo = self.position(self.neighbor_id(id, a, -1))[a];
                let hi = self.position(self.neighbor_id(id, a, 1))[a];
                Ok(lo + d <= candidate[a] && candidate[a] <= hi - d)
            }
            2 => {
                let (u, v) = (free_list[0], free_list[1]);
                // Cyclic order -u, -v, +u, +v gives a simple polygon.
                let ring = [
                    self.position(self.neighbor_id(id, u, -1)),
                    self.position(self.neighbor_id(id, v, -1)),
                    self.position(self.neighbor_id(id, u, 1)),
                    self.position(self.neighbor_id(id, v, 1)),
                ];
                let poly: Vec<[i64; 2]> = ring.iter().map(|p| [p[u], p[v]]).collect();
                Ok(point_in_polygon_margin(
                    [candidate[u], candidate[v]],
                    &poly,
                    d,
                ))
            }
            _ => {
                let xp = self.position(self.neighbor_id(id, 0, 1));
                let xm = self.position(self.neighbor_id(id, 0, -1));
                let yp = self.position(self.neighbor_id(id, 1, 1));
                let ym = self.position(self.neighbor_id(id, 1, -1));
                let zp = self.position(self.neighbor_id(id, 2, 1));
                let zm = self.position(self.neighbor_id(id, 2, -1));
                Ok(point_in_octahedron_margin(
                    candidate,
                    [xm, xp],
                    [ym, yp],
                    [zm, zp],
                    d,
                ))
            }
        }
    }

    /// All grid points sit at least `d` inside their neighbor polytopes.
    pub fn margin_ok(&self, d: u32) -> bool {
        (0..self.vectors.len())
            .all(|id| self.candidate_allowed(id, self.position(id), d).unwrap())
    }

    /// Every cell passes the signed-area (2-D) / signed-volume (3-D)
    /// convexity test of its corner tessellation.
    pub fn all_cells_convex(&self) -> bool {
        let n = self.spec.points();
        if self.spec.three_d {
            for k in 0..n[2] - 1 {
                for j in 0..n[1] - 1 {
                    for i in 0..n[0] - 1 {
                        if !self.hex_cell_convex(i, j, k) {
                            return false;
                        }
                    }
                }
            }
        } else {
            for j in 0..n[1] - 1 {
                for i in 0..n[0] - 1 {
                    if !self.quad_cell_convex(i, j) {
                        return false;
                    }
                }
            }
        }
        true
    }

    fn quad_cell_convex(&self, i: usize, j: usize) -> bool {
        let p = |i, j| {
            let pos = self.position(self.gp_id(i, j, 0));
            [pos[0], pos[1]]
        };
        let ring = [p(i, j), p(i + 1, j), p(i + 1, j + 1), p(i, j + 1)];
        (0..4).all(|c| {
            let a = ring[c];
            let b = ring[(c + 1) % 4];
            let d = ring[(c + 2) % 4];
            cross2([b[0] - a[0], b[1] - a[1]], [d[0] - b[0], d[1] - b[1]]) > 0
        })
    }

    fn hex_cell_convex(&self, i: usize, j: usize, k: usize) -> bool {
        let p = |di: usize, dj: usize, dk: usize| self.position(self.gp_id(i + di, j + dj, k + dk));
        for dk in 0..2usize {
            for dj in 0..2usize {
                for di in 0..2usize {
                    let o = p(di, dj, dk);
                    let ex = sub3(p(1 - di, dj, dk), o);
                    let ey = sub3(p(di, 1 - dj, dk), o);
                    let ez = sub3(p(di, dj, 1 - dk), o);
                    let vol = det3(ex, ey, ez);
                    let parity = if (di + dj + dk) % 2 == 0 { 1 } else { -1 };
                    if parity * vol <= 0 {
                        return false;
                    }
                }
            }
        }
        true
    }

    /// Dense-field vector at voxel (x, y, z), fixed point.
    ///
    /// For 2-D meshes z must be 0 and the returned z component is 0.
    #[inline]
    pub fn field_at(&self, x: usize, y: usize, z: usize) -> [i32; 3] {
        let g = self.spec.cells;
        let n = self.spec.points();
        let fp = FP_ONE as i64;

        let ci = x / g[0];
        let cj = y / g[1];
        let u = ((x - ci * g[0]) as i64 * fp) / g[0] as i64;
        let v = ((y - cj * g[1]) as i64 * fp) / g[1] as i64;
        let wx = [fp - u, u];
        let wy = [fp - v, v];

        if self.spec.three_d {
            let ck = z / g[2];
            let w = ((z - ck * g[2]) as i64 * fp) / g[2] as i64;
            let wz = [fp - w, w];
            let mut acc = [0i64; 3];
            for dk in 0..2 {
                for dj in 0..2 {
                    for di in 0..2 {
                        let weight = wx[di] * wy[dj] * wz[dk];
                        if weight == 0 {
                            continue;
                        }
                        let id = (ci + di) + n[0] * ((cj + dj) + n[1] * (ck + dk));
                        let vec = self.vectors[id];
                        acc[0] += vec[0] as i64 * weight;
                        acc[1] += vec[1] as i64 * weight;
                        acc[2] += vec[2] as i64 * weight;
                    }
                }
            }
            // acc is value * 2^24; shift down to fp8.
            [
                (acc[0] >> (2 * FP_BITS)) as i32,
                (acc[1] >> (2 * FP_BITS)) as i32,
                (acc[2] >> (2 * FP_BITS)) as i32,
            ]
        } else {
            debug_assert_eq!(z, 0);
            let mut acc = [0i64; 2];
            for dj in 0..2 {
                for di in 0..2 {
                    let weight = wx[di] * wy[dj];
                    if weight == 0 {
                        continue;
                    }
                    let id = (ci + di) + n[0] * (cj + dj);
                    let vec = self.vectors[id];
                    acc[0] += vec[0] as i64 * weight;
                    acc[1] += vec[1] as i64 * weight;
                }
            }
            [(acc[0] >> FP_BITS) as i32, (acc[1] >> FP_BITS) as i32, 0]
        }
    }
}

/// Dense per-voxel displacement field in fixed point.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MotionField {
    width: usize,
    height: usize,
    depth: usize,
    components: usize,
    data: Vec<i32>,
}

impl MotionField {
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.width, self.height, self.depth)
    }

    pub fn components(&self) -> usize {
        self.components
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> [i32; 3] {
        let base = (x + self.width * (y + self.height * z)) * self.components;
        let mut v = [0; 3];
        v[..self.components].copy_from_slice(&self.data[base..base + self.components]);
        v
    }

    pub fn data(&self) -> &[i32] {
        &self.data
    }

    /// A zero field (identity warp).
    pub fn zeros(width: usize, height: usize, depth: usize, components: usize) -> Self {
        assert!(components == 2 || components == 3);
        Self {
            width,
            height,
            depth,
            components,
            data: vec![0; width * height * depth * components],
        }
    }

    /// Build a field directly from raw fixed-point data (tests, tooling).
    pub fn from_data(
        width: usize,
        height: usize,
        depth: usize,
        components: usize,
        data: Vec<i32>,
    ) -> Result<Self> {
        if components != 2 && components != 3 {
            return Err(Error::DimensionMismatch(format!(
                "components must be 2 or 3, got {components}"
            )));
        }
        if data.len() != width * height * depth * components {
            return Err(Error::DimensionMismatch(format!(
                "field data length {} does not match {}x{}x{}x{}",
                data.len(),
                width,
                height,
                depth,
                components
            )));
        }
        Ok(Self {
            width,
            height,
            depth,
            components,
            data,
        })
    }
}

/// Interpolate a mesh into its dense field (one slice for 2-D meshes).
pub fn dense_field(mesh: &Mesh) -> MotionField {
    let dims = mesh.spec.dims();
    let comps = mesh.spec.components();
    let mut field = MotionField::zeros(dims[0], dims[1], dims[2], comps);
    let slice_len = dims[0] * dims[1] * comps;
    par::for_each_chunk(&mut field.data, slice_len, |z, chunk| {
        let mut idx = 0;
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let v = mesh.field_at(x, y, z);
                chunk[idx..idx + comps].copy_from_slice(&v[..comps]);
                idx += comps;
            }
        }
    });
    field
}

/// Stack per-slice 2-D meshes into one depth-sized field.
pub fn dense_field_slices(meshes: &[Mesh]) -> Result<MotionField> {
    if meshes.is_empty() {
        return Err(Error::DimensionMismatch("no slice meshes".into()));
    }
    let spec = meshes[0].spec;
    if spec.is_three_d() || meshes.iter().any(|m| m.spec != spec) {
        return Err(Error::DimensionMismatch(
            "slice meshes must share one 2-D spec".into(),
        ));
    }
    let dims = spec.dims();
    let mut field = MotionField::zeros(dims[0], dims[1], meshes.len(), 2);
    let slice_len = dims[0] * dims[1] * 2;
    par::for_each_chunk(&mut field.data, slice_len, |z, chunk| {
        let mut idx = 0;
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let v = meshes[z].field_at(x, y, 0);
                chunk[idx] = v[0];
                chunk[idx + 1] = v[1];
                idx += 2;
            }
        }
    });
    Ok(field)
}

/// Negate every motion vector (the update-step inversion).
pub fn negate(mesh: &Mesh) -> Mesh {
    Mesh {
        spec: mesh.spec,
        vectors: mesh
            .vectors
            .iter()
            .map(|v| [-v[0], -v[1], -v[2]])
            .collect(),
    }
}

/// The compensation attached to one temporal pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Meshes {
    /// Uncompensated (identity warp).
    None,
    /// One 2-D mesh per z-slice.
    Slices(Vec<Mesh>),
    /// One 3-D mesh for the whole volume.
    Volume(Mesh),
}

impl Meshes {
    pub fn negate(&self) -> Meshes {
        match self {
            Meshes::None => Meshes::None,
            Meshes::Slices(ms) => Meshes::Slices(ms.iter().map(negate).collect()),
            Meshes::Volume(m) => Meshes::Volume(negate(m)),
        }
    }

    /// Scalar motion parameters carried by this compensation.
    pub fn free_parameters(&self) -> u64 {
        match self {
            Meshes::None => 0,
            Meshes::Slices(ms) => ms.iter().map(|m| m.spec.free_parameters()).sum(),
            Meshes::Volume(m) => m.spec.free_parameters(),
        }
    }

    /// Check compatibility with a volume of the given dimensions.
    pub fn check_dims(&self, width: usize, height: usize, depth: usize) -> Result<()> {
        match self {
            Meshes::None => Ok(()),
            Meshes::Slices(ms) => {
                if ms.len() != depth {
                    return Err(Error::DimensionMismatch(format!(
                        "{} slice meshes for depth {depth}",
                        ms.len()
                    )));
                }
                for m in ms {
                    let d = m.spec.dims();
                    if d[0] != width || d[1] != height {
                        return Err(Error::DimensionMismatch(format!(
                            "slice mesh {}x{} on volume {width}x{height}",
                            d[0], d[1]
                        )));
                    }
                }
                Ok(())
            }
            Meshes::Volume(m) => {
                let d = m.spec.dims();
                if d != [width, height, depth] {
                    return Err(Error::DimensionMismatch(format!(
                        "mesh {}x{}x{} on volume {width}x{height}x{depth}",
                        d[0], d[1], d[2]
                    )));
                }
                Ok(())
            }
        }
    }

    pub fn all_cells_convex(&self) -> bool {
        match self {
            Meshes::None => true,
            Meshes::Slices(ms) => ms.iter().all(Mesh::all_cells_convex),
            Meshes::Volume(m) => m.all_cells_convex(),
        }
    }

    pub fn margin_ok(&self, d: u32) -> bool {
        match self {
            Meshes::None => true,
            Meshes::Slices(ms) => ms.iter().all(|m| m.margin_ok(d)),
            Meshes::Volume(m) => m.margin_ok(d),
        }
    }
}

// ---------------------------------------------------------------------------
// Exact polytope-with-margin tests
// ---------------------------------------------------------------------------

fn cross2(a: [i64; 2], b: [i64; 2]) -> i64 {
    a[0] * b[1] - a[1] * b[0]
}

fn sub3(a: [i64; 3], b: [i64; 3]) -> [i64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross3(a: [i64; 3], b: [i64; 3]) -> [i64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn dot3(a: [i64; 3], b: [i64; 3]) -> i64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn det3(a: [i64; 3], b: [i64; 3], c: [i64; 3]) -> i64 {
    dot3(a, cross3(b, c))
}

/// Point inside a simple polygon with all edges pushed inward by `d`
/// (Euclidean). Exact integer arithmetic: distance >= d iff
/// cross >= 0 and cross^2 >= d^2 * |edge|^2.
fn point_in_polygon_margin(p: [i64; 2], poly: &[[i64; 2]], d: i64) -> bool {
    let n = poly.len();
    let mut area2 = 0i64;
    for i in 0..n {
        let a = poly[i];
        let b = poly[(i + 1) % n];
        area2 += cross2(a, b);
    }
    if area2 == 0 {
        return false;
    }
    let orient = if area2 > 0 { 1 } else { -1 };
    for i in 0..n {
        let a = poly[i];
        let b = poly[(i + 1) % n];
        let e = [b[0] - a[0], b[1] - a[1]];
        let len2 = e[0] * e[0] + e[1] * e[1];
        if len2 == 0 {
            return false;
        }
        let c = orient * cross2(e, [p[0] - a[0], p[1] - a[1]]);
        if c < 0 {
            return false;
        }
        if (c as i128) * (c as i128) < (d as i128) * (d as i128) * (len2 as i128) {
            return false;
        }
    }
    true
}

/// Point inside the octahedron spanned by per-axis neighbor pairs, every
/// face plane pushed inward by `d` (Euclidean), exact arithmetic.
fn point_in_octahedron_margin(
    p: [i64; 3],
    x: [[i64; 3]; 2],
    y: [[i64; 3]; 2],
    z: [[i64; 3]; 2],
    d: i64,
) -> bool {
    // 6*centroid keeps everything integer.
    let mut c6 = [0i64; 3];
    for v in [x[0], x[1], y[0], y[1], z[0], z[1]] {
        for a in 0..3 {
            c6[a] += v[a];
        }
    }
    for sx in 0..2 {
        for sy in 0..2 {
            for sz in 0..2 {
                let (a, b, c) = (x[sx], y[sy], z[sz]);
                let nrm = cross3(sub3(b, a), sub3(c, a));
                let nn = dot3(nrm, nrm);
                if nn == 0 {
                    return false;
                }
                let a6 = [6 * a[0], 6 * a[1], 6 * a[2]];
                let inward = dot3(nrm, sub3(c6, a6));
                if inward == 0 {
                    return false;
                }
                let s = if inward > 0 { 1 } else { -1 };
                let q = s * dot3(nrm, sub3(p, a));
                if q < 0 {
                    return false;
                }
                if (q as i128) * (q as i128) < (d as i128) * (d as i128) * (nn as i128) {
                    return false;
                }
            }
        }
    }
    true
}

// ---------------------------------------------------------------------------
// File format
// ---------------------------------------------------------------------------

/// Serialize meshes: text header, blank line, then little-endian i16
/// vector components, grid points x-fastest, components interleaved.
pub fn write_meshes(meshes: &Meshes, path: &Path) -> Result<()> {
    let mut header = String::new();
    let mut list: Vec<&Mesh> = Vec::new();
    match meshes {
        Meshes::None => {
            return Err(Error::InvalidGrid(
                "cannot serialize an absent compensation".into(),
            ))
        }
        Meshes::Slices(ms) => {
            if ms.is_empty() {
                return Err(Error::InvalidGrid("empty slice mesh set".into()));
            }
            let spec = ms[0].spec;
            if ms.iter().any(|m| m.spec != spec) {
                return Err(Error::InvalidGrid("slice meshes differ in spec".into()));
            }
            let g = spec.cell_sizes();
            let dims = spec.dims();
            header.push_str("dim=2\n");
            header.push_str(&format!("gx={}\ngy={}\n", g[0], g[1]));
            header.push_str(&format!("width={}\nheight={}\n", dims[0], dims[1]));
            header.push_str(&format!("slices={}\n", ms.len()));
            list.extend(ms.iter());
        }
        Meshes::Volume(m) => {
            let g = m.spec.cell_sizes();
            let dims = m.spec.dims();
            header.push_str("dim=3\n");
            header.push_str(&format!("gx={}\ngy={}\ngz={}\n", g[0], g[1], g[2]));
            header.push_str(&format!(
                "width={}\nheight={}\ndepth={}\n",
                dims[0], dims[1], dims[2]
            ));
            list.push(m);
        }
    }
    header.push('\n');

    let mut bytes = header.into_bytes();
    for mesh in list {
        let comps = mesh.spec.components();
        for v in &mesh.vectors {
            for c in &v[..comps] {
                let c16 = i16::try_from(*c).map_err(|_| {
                    Error::SampleOutOfRange(format!("motion component {c} exceeds i16"))
                })?;
                bytes.extend_from_slice(&c16.to_le_bytes());
            }
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Read back a mesh file written by [`write_meshes`].
pub fn read_meshes(path: &Path) -> Result<Meshes> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    // Header ends at the first blank line.
    let sep = bytes
        .windows(2)
        .position(|w| w == b"\n\n")
        .ok_or_else(|| Error::header(path, "missing blank line after header"))?;
    let header = std::str::from_utf8(&bytes[..sep + 1])
        .map_err(|_| Error::header(path, "header is not UTF-8"))?;
    let data = &bytes[sep + 2..];

    let mut kv = std::collections::HashMap::new();
    for line in header.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::header(path, format!("bad line: {line}")))?;
        let v: i64 = v
            .trim()
            .parse()
            .map_err(|_| Error::header(path, format!("bad value: {line}")))?;
        kv.insert(k.trim().to_string(), v);
    }
    let get = |k: &str| -> Result<usize> {
        kv.get(k)
            .copied()
            .filter(|&v| v >= 0)
            .map(|v| v as usize)
            .ok_or_else(|| Error::header(path, format!("missing key: {k}")))
    };

    let dim = get("dim")?;
    let (spec, count) = match dim {
        2 => {
            let spec = GridSpec::two_d(get("gx")?, get("gy")?, get("width")?, get("height")?)?;
            let slices = get("slices").unwrap_or(1).max(1);
            (spec, slices)
        }
        3 => {
            let spec = GridSpec::three_d(
                get("gx")?,
                get("gy")?,
                get("gz")?,
                get("width")?,
                get("height")?,
                get("depth")?,
            )?;
            (spec, 1)
        }
        other => return Err(Error::header(path, format!("bad dim: {other}"))),
    };

    let comps = spec.components();
    let per_mesh = spec.grid_point_count() * comps;
    if data.len() != per_mesh * count * 2 {
        return Err(Error::header(
            path,
            format!(
                "payload {} bytes does not match {} meshes of {} components",
                data.len(),
                count,
                per_mesh
            ),
        ));
    }
    let mut meshes = Vec::with_capacity(count);
    let mut off = 0;
    for _ in 0..count {
        let mut mesh = create_mesh(&spec);
        for id in 0..spec.grid_point_count() {
            let mut v = [0i32; 3];
            for c in v.iter_mut().take(comps) {
                *c = i16::from_le_bytes([data[off], data[off + 1]]) as i32;
                off += 2;
            }
            mesh.vectors[id] = v;
        }
        meshes.push(mesh);
    }
    Ok(if dim == 2 {
        Meshes::Slices(meshes)
    } else {
        Meshes::Volume(meshes.pop().expect("one mesh"))
    })
}
