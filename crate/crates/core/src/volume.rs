//! Volume containers, raw file I/O, and a synthetic deforming phantom.
//!
//! Samples are kept as `i32` so the same container holds 12-bit originals
//! and signed highpass bands. Voxel layout is x-fastest, then y, then z,
//! then t.
//!
//! # File format
//!
//! A volume on disk is a pair of files: a UTF-8 text header and a raw
//! little-endian 16-bit file next to it (same path, extension replaced by
//! `raw`). The header holds `key=value` lines:
//!
//! ```text
//! width=64
//! height=64
//! depth=32
//! frames=4
//! bits=12
//! signed=0
//! offset=0
//! ```
//!
//! `offset` maps signed bands into unsigned storage: it is added to each
//! sample on store and subtracted on load. Highpass bands use
//! `offset=32768`, `signed=1`.
//!
//! # Phantom
//!
//! The phantom stands in for a dynamic CT acquisition. Frame `t` samples a
//! fixed analytic pattern through a smooth, time-periodic displacement:
//!
//! ```text
//! f_t(p)  = pattern(p + disp(p, t)) + noise
//! disp(p, t) = amplitude * sin(2*pi*t / period) * window(p)
//! window(p)  = prod_axis sin^2(pi * p_axis / (dim_axis - 1))
//! pattern(q) = 420 + 2500*bump(r1) + 500*bump(r2) + 400*bump(r1)*texture(q)
//! bump(r)    = 0.5*(1 + cos(pi*r)) for r < 1, else 0
//! ```
//!
//! where `r1`, `r2` are normalized ellipsoid distances (the second bump is
//! offset from the first) and `texture` is a separable sinusoid that gives
//! the interior enough gradient for motion estimation. `window` is zero on
//! the volume boundary, so boundary voxels are identical across frames,
//! and the whole construction is a pure function of the spec.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Maximum sample value of original (pre-transform) volumes.
pub const SAMPLE_MAX: i32 = 4095;

/// A single 3-D volume of signed 32-bit samples.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Volume3D {
    width: usize,
    height: usize,
    depth: usize,
    samples: Vec<i32>,
}

impl Volume3D {
    /// All-zero volume.
    pub fn zeros(width: usize, height: usize, depth: usize) -> Self {
        assert!(width >= 1 && height >= 1 && depth >= 1);
        Self {
            width,
            height,
            depth,
            samples: vec![0; width * height * depth],
        }
    }

    /// Wrap an existing sample buffer (x-fastest layout).
    pub fn from_samples(
        width: usize,
        height: usize,
        depth: usize,
        samples: Vec<i32>,
    ) -> Result<Self> {
        if width < 1 || height < 1 || depth < 1 {
            return Err(Error::DimensionMismatch(format!(
                "dims must be >= 1, got {width}x{height}x{depth}"
            )));
        }
        if samples.len() != width * height * depth {
            return Err(Error::DimensionMismatch(format!(
                "expected {} samples, got {}",
                width * height * depth,
                samples.len()
            )));
        }
        Ok(Self {
            width,
            height,
            depth,
            samples,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.width, self.height, self.depth)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        debug_assert!(x < self.width && y < self.height && z < self.depth);
        x + self.width * (y + self.height * z)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> i32 {
        self.samples[self.index(x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, v: i32) {
        let i = self.index(x, y, z);
        self.samples[i] = v;
    }

    pub fn samples(&self) -> &[i32] {
        &self.samples
    }

    pub fn samples_mut(&mut self) -> &mut [i32] {
        &mut self.samples
    }

    pub fn into_samples(self) -> Vec<i32> {
        self.samples
    }

    pub(crate) fn same_dims(&self, other: &Volume3D) -> bool {
        self.dims() == other.dims()
    }
}

/// An ordered sequence of equally sized frames: the 3-D+t volume.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Volume4D {
    frames: Vec<Volume3D>,
}

impl Volume4D {
    pub fn from_frames(frames: Vec<Volume3D>) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::DimensionMismatch("no frames".into()));
        }
        let dims = frames[0].dims();
        if frames.iter().any(|f| f.dims() != dims) {
            return Err(Error::DimensionMismatch(
                "frames differ in dimensions".into(),
            ));
        }
        Ok(Self { frames })
    }

    pub fn frame_count(&self) -> usize {
        self.frames.len()
    }

    pub fn frames(&self) -> &[Volume3D] {
        &self.frames
    }

    pub fn frame(&self, t: usize) -> &Volume3D {
        &self.frames[t]
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.frames[0].dims()
    }
}

/// Extract frame `t` by value.
pub fn extract_frame(vol: &Volume4D, t: usize) -> Result<Volume3D> {
    if t >= vol.frame_count() {
        return Err(Error::IndexOutOfRange(format!(
            "frame {t} of {}",
            vol.frame_count()
        )));
    }
    Ok(vol.frames[t].clone())
}

// ---------------------------------------------------------------------------
// File I/O
// ---------------------------------------------------------------------------

/// Storage parameters written to the volume header.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StorageParams {
    /// Content bit depth: 12 for originals, 16 for bands.
    pub bits: u8,
    /// Whether the stored band is signed (informational).
    pub signed: bool,
    /// Added to each sample on store, subtracted on load.
    pub offset: i32,
}

impl Default for StorageParams {
    fn default() -> Self {
        Self {
            bits: 12,
            signed: false,
            offset: 0,
        }
    }
}

impl StorageParams {
    /// Convention for signed highpass bands.
    pub fn signed_band() -> Self {
        Self {
            bits: 16,
            signed: true,
            offset: 32768,
        }
    }
}

fn raw_path(header_path: &Path) -> PathBuf {
    header_path.with_extension("raw")
}

/// Store a volume as header + raw file pair.
pub fn store_volume(vol: &Volume4D, header_path: &Path) -> Result<()> {
    store_volume_with(vol, header_path, StorageParams::default())
}

/// Store with explicit storage parameters (e.g. signed bands).
pub fn store_volume_with(vol: &Volume4D, header_path: &Path, params: StorageParams) -> Result<()> {
    if params.bits != 12 && params.bits != 16 {
        return Err(Error::header(
            header_path,
            format!("bits must be 12 or 16, got {}", params.bits),
        ));
    }
    let (w, h, d) = vol.dims();
    let t = vol.frame_count();
    let mut raw = Vec::with_capacity(w * h * d * t * 2);
    for frame in vol.frames() {
        for &s in frame.samples() {
            let stored = s as i64 + params.offset as i64;
            if !(0..=65535).contains(&stored) {
                return Err(Error::SampleOutOfRange(format!(
                    "sample {s} with offset {} maps to {stored}",
                    params.offset
                )));
            }
            raw.extend_from_slice(&(stored as u16).to_le_bytes());
        }
    }

    let mut header = String::new();
    header.push_str(&format!("width={w}\n"));
    header.push_str(&format!("height={h}\n"));
    header.push_str(&format!("depth={d}\n"));
    header.push_str(&format!("frames={t}\n"));
    header.push_str(&format!("bits={}\n", params.bits));
    header.push_str(&format!("signed={}\n", u8::from(params.signed)));
    header.push_str(&format!("offset={}\n", params.offset));

    let mut f = fs::File::create(header_path).map_err(|e| Error::io(header_path, e))?;
    f.write_all(header.as_bytes())
        .map_err(|e| Error::io(header_path, e))?;
    let rp = raw_path(header_path);
    fs::write(&rp, &raw).map_err(|e| Error::io(&rp, e))?;
    Ok(())
}

/// Parsed header contents.
#[derive(Debug, Clone, Copy)]
pub struct VolumeHeader {
    pub width: usize,
    pub height: usize,
    pub depth: usize,
    pub frames: usize,
    pub params: StorageParams,
}

/// Read and validate a volume header.
pub fn read_header(header_path: &Path) -> Result<VolumeHeader> {
    let text = fs::read_to_string(header_path).map_err(|e| Error::io(header_path, e))?;
    let mut width = None;
    let mut height = None;
    let mut depth = None;
    let mut frames = None;
    let mut bits = None;
    let mut signed = None;
    let mut offset = None;
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::header(header_path, format!("bad line: {line}")))?;
        let parse = |v: &str| -> Result<i64> {
            v.trim()
                .parse::<i64>()
                .map_err(|_| Error::header(header_path, format!("bad value for {key}: {v}")))
        };
        match key.trim() {
            "width" => width = Some(parse(value)?),
            "height" => height = Some(parse(value)?),
            "depth" => depth = Some(parse(value)?),
            "frames" => frames = Some(parse(value)?),
            "bits" => bits = Some(parse(value)?),
            "signed" => signed = Some(parse(value)?),
            "offset" => offset = Some(parse(value)?),
            other => {
                return Err(Error::header(header_path, format!("unknown key: {other}")));
            }
        }
    }
    let require = |v: Option<i64>, name: &str| -> Result<i64> {
        v.ok_or_else(|| Error::header(header_path, format!("missing key: {name}")))
    };
    let width = require(width, "width")?;
    let height = require(height, "height")?;
    let depth = require(depth, "depth")?;
    let frames = require(frames, "frames")?;
    let bits = require(bits, "bits")?;
    let signed = require(signed, "signed")?;
    let offset = require(offset, "offset")?;
    if width < 1 || height < 1 || depth < 1 || frames < 1 {
        return Err(Error::header(header_path, "dims must be >= 1"));
    }
    if bits != 12 && bits != 16 {
        return Err(Error::header(header_path, "bits must be 12 or 16"));
    }
    if signed != 0 && signed != 1 {
        return Err(Error::header(header_path, "signed must be 0 or 1"));
    }
    if offset < -65535 || offset > 65535 {
        return Err(Error::header(header_path, "offset out of range"));
    }
    Ok(VolumeHeader {
        width: width as usize,
        height: height as usize,
        depth: depth as usize,
        frames: frames as usize,
        params: StorageParams {
            bits: bits as u8,
            signed: signed == 1,
            offset: offset as i32,
        },
    })
}

/// Load a volume from a header + raw file pair.
pub fn load_volume(header_path: &Path) -> Result<Volume4D> {
    let hdr = read_header(header_path)?;
    let rp = raw_path(header_path);
    let raw = fs::read(&rp).map_err(|e| Error::io(&rp, e))?;
    let n = hdr.width * hdr.height * hdr.depth * hdr.frames;
    if raw.len() != n * 2 {
        return Err(Error::header(
            header_path,
            format!("raw size {} does not match {} samples", raw.len(), n),
        ));
    }
    let per_frame = hdr.width * hdr.height * hdr.depth;
    let mut frames = Vec::with_capacity(hdr.frames);
    for t in 0..hdr.frames {
        let mut samples = Vec::with_capacity(per_frame);
        let base = t * per_frame * 2;
        for i in 0..per_frame {
            let b = base + i * 2;
            let stored = u16::from_le_bytes([raw[b], raw[b + 1]]);
            samples.push(stored as i32 - hdr.params.offset);
        }
        frames.push(Volume3D::from_samples(
            hdr.width, hdr.height, hdr.depth, samples,
        )?);
    }
    Volume4D::from_frames(frames)
}

// ---------------------------------------------------------------------------
// Phantom
// ---------------------------------------------------------------------------

/// Parameters of the synthetic deforming phantom.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    pub width: usize,
    pub height: usize,
    pub depth: usize,
    pub frames: usize,
    /// Ellipsoid center in voxel coordinates.
    pub center: [f64; 3],
    /// Ellipsoid radii in voxels.
    pub radii: [f64; 3],
    /// Peak displacement per axis in voxels.
    pub amplitude: [f64; 3],
    /// Temporal period in frames.
    pub period: f64,
    /// Uniform integer noise amplitude (levels).
    pub noise: u32,
    pub seed: u64,
}

impl PhantomSpec {
    /// Spec with centered ellipsoid defaults for the given dimensions.
    pub fn new(width: usize, height: usize, depth: usize, frames: usize) -> Self {
        let c = |d: usize| (d as f64 - 1.0) / 2.0;
        let r = |d: usize| (d as f64 * 0.35).max(1.0);
        Self {
            width,
            height,
            depth,
            frames,
            center: [c(width), c(height), c(depth)],
            radii: [r(width), r(height), r(depth)],
            amplitude: [0.0, 0.0, 0.0],
            period: frames.max(1) as f64,
            noise: 0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width < 1 || self.height < 1 || self.depth < 1 || self.frames < 1 {
            return Err(Error::InvalidSpec("dims must be >= 1".into()));
        }
        if !(self.period > 0.0) {
            return Err(Error::InvalidSpec("period must be > 0".into()));
        }
        let dims = [self.width, self.height, self.depth];
        for a in 0..3 {
            if !self.amplitude[a].is_finite() || self.amplitude[a] < 0.0 {
                return Err(Error::InvalidSpec(format!(
                    "amplitude[{a}] must be finite and >= 0"
                )));
            }
            // Keeps the deformation small relative to the volume so it stays
            // inside typical mesh search polytopes.
            if self.amplitude[a] * 4.0 > dims[a] as f64 {
                return Err(Error::InvalidSpec(format!(
                    "amplitude[{a}]={} too large for dim {}",
                    self.amplitude[a], dims[a]
                )));
            }
            if !self.radii[a].is_finite() || self.radii[a] <= 0.0 {
                return Err(Error::InvalidSpec(format!("radii[{a}] must be > 0")));
            }
        }
        Ok(())
    }
}

fn raised_cosine(r: f64) -> f64 {
    if r >= 1.0 {
        0.0
    } else {
        0.5 * (1.0 + (std::f64::consts::PI * r).cos())
    }
}

fn ellipsoid_dist(q: [f64; 3], center: [f64; 3], radii: [f64; 3]) -> f64 {
    let mut s = 0.0;
    for a in 0..3 {
        let d = (q[a] - center[a]) / radii[a];
        s += d * d;
    }
    s.sqrt()
}

fn pattern(q: [f64; 3], spec: &PhantomSpec) -> f64 {
    let r1 = ellipsoid_dist(q, spec.center, spec.radii);
    let b1 = raised_cosine(r1);
    let center2 = [
        spec.center[0] + 0.45 * spec.radii[0],
        spec.center[1] - 0.3 * spec.radii[1],
        spec.center[2] + 0.35 * spec.radii[2],
    ];
    let radii2 = [
        0.5 * spec.radii[0],
        0.5 * spec.radii[1],
        0.5 * spec.radii[2],
    ];
    let b2 = raised_cosine(ellipsoid_dist(q, center2, radii2));
    let tau = std::f64::consts::TAU;
    let lambda = 9.0;
    let tex = (tau * q[0] / lambda).sin() * (tau * q[1] / lambda).sin() * (tau * q[2] / lambda).sin();
    420.0 + 2500.0 * b1 + 500.0 * b2 + 400.0 * b1 * tex
}

fn boundary_window(p: usize, dim: usize) -> f64 {
    if dim <= 1 {
        return 0.0;
    }
    let s = (std::f64::consts::PI * p as f64 / (dim - 1) as f64).sin();
    s * s
}

/// Generate the deterministic deforming phantom.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<Volume4D> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut frames = Vec::with_capacity(spec.frames);
    for t in 0..spec.frames {
        let phase = (std::f64::consts::TAU * t as f64 / spec.period).sin();
        let mut frame = Volume3D::zeros(spec.width, spec.height, spec.depth);
        for z in 0..spec.depth {
            let wz = boundary_window(z, spec.depth);
            for y in 0..spec.height {
                let wy = boundary_window(y, spec.height);
                for x in 0..spec.width {
                    let wx = boundary_window(x, spec.width);
                    let win = wx * wy * wz;
                    let q = [
                        x as f64 + spec.amplitude[0] * phase * win,
                        y as f64 + spec.amplitude[1] * phase * win,
                        z as f64 + spec.amplitude[2] * phase * win,
                    ];
                    let mut v = pattern(q, spec).round() as i32;
                    if spec.noise > 0 {
                        let n = spec.noise as i32;
                        v += rng.gen_range(-n..=n);
                    }
                    frame.set(x, y, z, v.clamp(0, SAMPLE_MAX));
                }
            }
        }
        frames.push(frame);
    }
    Volume4D::from_frames(frames)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn load_decodes_little_endian() {
        let dir = tempdir().unwrap();
        let hp = dir.path().join("v.hdr");
        fs::write(
            &hp,
            "width=2\nheight=1\ndepth=1\nframes=1\nbits=12\nsigned=0\noffset=0\n",
        )
        .unwrap();
        fs::write(dir.path().join("v.raw"), [0x01, 0x00, 0xFF, 0x0F]).unwrap();
        let vol = load_volume(&hp).unwrap();
        assert_eq!(vol.frame(0).samples(), &[1, 4095]);
    }

    #[test]
    fn load_splits_frames() {
        let dir = tempdir().unwrap();
        let hp = dir.path().join("v.hdr");
        fs::write(
            &hp,
            "width=1\nheight=1\ndepth=1\nframes=2\nbits=12\nsigned=0\noffset=0\n",
        )
        .unwrap();
        fs::write(dir.path().join("v.raw"), [7, 0, 9, 0]).unwrap();
        let vol = load_volume(&hp).unwrap();
        assert_eq!(vol.frame_count(), 2);
        assert_eq!(vol.frame(0).samples(), &[7]);
        assert_eq!(vol.frame(1).samples(), &[9]);
    }

    #[test]
    fn store_is_inverse_of_load_example() {
        let dir = tempdir().unwrap();
        let hp = dir.path().join("v.hdr");
        let vol = Volume4D::from_frames(vec![
            Volume3D::from_samples(2, 1, 1, vec![1, 4095]).unwrap()
        ])
        .unwrap();
        store_volume(&vol, &hp).unwrap();
        assert_eq!(
            fs::read(dir.path().join("v.raw")).unwrap(),
            [0x01, 0x00, 0xFF, 0x0F]
        );
    }

    #[test]
    fn store_rejects_out_of_range() {
        let dir = tempdir().unwrap();
        let hp = dir.path().join("v.hdr");
        let vol =
            Volume4D::from_frames(vec![Volume3D::from_samples(1, 1, 1, vec![-1]).unwrap()])
                .unwrap();
        let err = store_volume(&vol, &hp).unwrap_err();
        assert!(matches!(err, Error::SampleOutOfRange(_)));
    }

    #[test]
    fn signed_band_offset_round_trips() {
        let dir = tempdir().unwrap();
        let hp = dir.path().join("hp.hdr");
        let vol = Volume4D::from_frames(vec![Volume3D::from_samples(
            3,
            1,
            1,
            vec![-8190, 0, 8190],
        )
        .unwrap()])
        .unwrap();
        store_volume_with(&vol, &hp, StorageParams::signed_band()).unwrap();
        let back = load_volume(&hp).unwrap();
        assert_eq!(back, vol);
    }

    #[test]
    fn load_rejects_size_mismatch() {
        let dir = tempdir().unwrap();
        let hp = dir.path().join("v.hdr");
        fs::write(
            &hp,
            "width=2\nheight=1\ndepth=1\nframes=1\nbits=12\nsigned=0\noffset=0\n",
        )
        .unwrap();
        fs::write(dir.path().join("v.raw"), [0u8; 6]).unwrap();
        assert!(matches!(
            load_volume(&hp).unwrap_err(),
            Error::InvalidHeader { .. }
        ));
    }

    #[test]
    fn extract_frame_bounds() {
        let vol = Volume4D::from_frames(vec![
            Volume3D::zeros(2, 2, 1),
            Volume3D::zeros(2, 2, 1),
        ])
        .unwrap();
        assert_eq!(extract_frame(&vol, 0).unwrap(), *vol.frame(0));
        assert!(matches!(
            extract_frame(&vol, 2).unwrap_err(),
            Error::IndexOutOfRange(_)
        ));
    }

    #[test]
    fn phantom_zero_amplitude_is_static() {
        let mut spec = PhantomSpec::new(12, 10, 6, 3);
        spec.amplitude = [0.0, 0.0, 0.0];
        let vol = generate_phantom(&spec).unwrap();
        assert_eq!(vol.frame(1), vol.frame(0));
        assert_eq!(vol.frame(2), vol.frame(0));
    }

    #[test]
    fn phantom_is_deterministic() {
        let mut spec = PhantomSpec::new(10, 10, 8, 2);
        spec.amplitude = [1.0, 1.0, 0.5];
        spec.period = 4.0;
        spec.noise = 3;
        spec.seed = 42;
        let a = generate_phantom(&spec).unwrap();
        let b = generate_phantom(&spec).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn phantom_boundary_is_static_without_noise() {
        let mut spec = PhantomSpec::new(14, 12, 8, 4);
        spec.amplitude = [2.0, 2.0, 1.0];
        spec.period = 4.0;
        let vol = generate_phantom(&spec).unwrap();
        let (w, h, d) = vol.dims();
        for t in 1..vol.frame_count() {
            for z in 0..d {
                for y in 0..h {
                    for x in 0..w {
                        if x == 0 || y == 0 || z == 0 || x == w - 1 || y == h - 1 || z == d - 1 {
                            assert_eq!(vol.frame(t).get(x, y, z), vol.frame(0).get(x, y, z));
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn phantom_rejects_oversized_amplitude() {
        let mut spec = PhantomSpec::new(8, 8, 8, 2);
        spec.amplitude = [3.0, 0.0, 0.0];
        assert!(matches!(
            generate_phantom(&spec).unwrap_err(),
            Error::InvalidSpec(_)
        ));
    }

    #[test]
    fn header_rejects_unknown_keys() {
        let dir = tempdir().unwrap();
        let hp = dir.path().join("v.hdr");
        fs::write(&hp, "width=1\nbogus=3\n").unwrap();
        assert!(matches!(
            read_header(&hp).unwrap_err(),
            Error::InvalidHeader { .. }
        ));
    }
}
