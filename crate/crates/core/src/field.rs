//! Queryable radiance fields.
//!
//! A field maps a world position (and nominally a view direction) to color
//! and volume density. The sampler only ever needs point queries, so any
//! density/radiance source can stand in for a trained NeRF: here a trilinear
//! voxel grid and a couple of analytic fields used as desk-scale stand-ins.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{Point3, Vector3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::face_model::Landmarks68;
use crate::sampling::regions;

pub(crate) const GRID_MAGIC: [u8; 4] = *b"FLNV";
pub(crate) const GRID_VERSION: u32 = 1;

/// Upper bound on grid payload size accepted by the loader (2 GiB).
const MAX_GRID_BYTES: u64 = 2 << 30;

/// One field query result. `rgb` is clamped to `[0, 1]`, density is
/// nonnegative and compared against the sampling threshold downstream.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldSample {
    pub rgb: [f64; 3],
    pub density: f64,
}

impl FieldSample {
    pub const VACUUM: FieldSample = FieldSample {
        rgb: [0.0; 3],
        density: 0.0,
    };

    pub fn new(rgb: [f64; 3], density: f64) -> Self {
        Self {
            rgb: rgb.map(|c| c.clamp(0.0, 1.0)),
            density: density.max(0.0),
        }
    }
}

/// A queryable radiance/density field. Queries must be pure: identical
/// inputs yield identical outputs, and concurrent queries are safe.
pub trait RadianceField: Sync {
    fn query(&self, position: &Point3<f64>, view_dir: &Vector3<f64>) -> FieldSample;
}

/// Field with the same sample everywhere. Handy for calibration tests.
#[derive(Debug, Clone, Copy)]
pub struct ConstantField {
    pub sample: FieldSample,
}

impl RadianceField for ConstantField {
    fn query(&self, _position: &Point3<f64>, _view_dir: &Vector3<f64>) -> FieldSample {
        self.sample
    }
}

/// Solid ball of uniform density and color, vacuum outside.
#[derive(Debug, Clone, Copy)]
pub struct SphereField {
    pub center: Point3<f64>,
    pub radius: f64,
    pub density: f64,
    pub rgb: [f64; 3],
}

impl SphereField {
    pub fn unit(density: f64) -> Self {
        Self {
            center: Point3::origin(),
            radius: 1.0,
            density,
            rgb: [0.8, 0.8, 0.8],
        }
    }
}

impl RadianceField for SphereField {
    fn query(&self, position: &Point3<f64>, _view_dir: &Vector3<f64>) -> FieldSample {
        if (position - self.center).norm() <= self.radius {
            FieldSample::new(self.rgb, self.density)
        } else {
            FieldSample::VACUUM
        }
    }
}

/// Regular grid of (r, g, b, density) values with trilinear interpolation
/// between nodes and vacuum outside the grid box. Node `(0,0,0)` sits at
/// `origin`, node `(nx-1, ny-1, nz-1)` at `origin + extent`. View direction
/// is ignored: grid fields are view-independent.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGridField {
    dims: [usize; 3],
    origin: Point3<f64>,
    extent: Vector3<f64>,
    /// Channel-major layout `[c][z][y][x]`, x fastest, 4 channels.
    data: Vec<f64>,
}

impl VoxelGridField {
    pub fn new(
        dims: [usize; 3],
        origin: Point3<f64>,
        extent: Vector3<f64>,
        data: Vec<f64>,
    ) -> Result<Self> {
        if dims.iter().any(|&d| d < 2) {
            return Err(Error::InvalidArgument(format!(
                "grid needs at least 2 nodes per axis, got {dims:?}"
            )));
        }
        if extent.iter().any(|&e| !e.is_finite() || e <= 0.0) {
            return Err(Error::InvalidArgument(
                "grid extent must be positive per axis".into(),
            ));
        }
        let expected = 4 * dims[0] * dims[1] * dims[2];
        if data.len() != expected {
            return Err(Error::DimensionMismatch {
                context: "voxel grid payload",
                expected,
                got: data.len(),
            });
        }
        Ok(Self {
            dims,
            origin,
            extent,
            data,
        })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn origin(&self) -> Point3<f64> {
        self.origin
    }

    pub fn extent(&self) -> Vector3<f64> {
        self.extent
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    fn index(&self, c: usize, x: usize, y: usize, z: usize) -> usize {
        ((c * self.dims[2] + z) * self.dims[1] + y) * self.dims[0] + x
    }

    pub fn node_value(&self, c: usize, x: usize, y: usize, z: usize) -> f64 {
        self.data[self.index(c, x, y, z)]
    }

    pub fn node_position(&self, x: usize, y: usize, z: usize) -> Point3<f64> {
        let step = |i: usize, n: usize, o: f64, e: f64| o + e * i as f64 / (n - 1) as f64;
        Point3::new(
            step(x, self.dims[0], self.origin.x, self.extent.x),
            step(y, self.dims[1], self.origin.y, self.extent.y),
            step(z, self.dims[2], self.origin.z, self.extent.z),
        )
    }

    fn interpolate(&self, position: &Point3<f64>) -> Option<[f64; 4]> {
        // Fractional node coordinates; outside [0, n-1] means outside the box.
        let mut frac = [0.0f64; 3];
        for a in 0..3 {
            let t = (position[a] - self.origin[a]) / self.extent[a];
            if !(0.0..=1.0).contains(&t) {
                return None;
            }
            frac[a] = t * (self.dims[a] - 1) as f64;
        }
        let mut i0 = [0usize; 3];
        let mut w = [0.0f64; 3];
        for a in 0..3 {
            let fl = frac[a].floor().min((self.dims[a] - 2) as f64);
            i0[a] = fl as usize;
            w[a] = frac[a] - fl;
        }
        let mut out = [0.0f64; 4];
        for (c, o) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            for dz in 0..2 {
                for dy in 0..2 {
                    for dx in 0..2 {
                        let weight = (if dx == 1 { w[0] } else { 1.0 - w[0] })
                            * (if dy == 1 { w[1] } else { 1.0 - w[1] })
                            * (if dz == 1 { w[2] } else { 1.0 - w[2] });
                        acc += weight
                            * self.data[self.index(c, i0[0] + dx, i0[1] + dy, i0[2] + dz)];
                    }
                }
            }
            *o = acc;
        }
        Some(out)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        write_flnv(
            w,
            [self.dims[0] as u32, self.dims[1] as u32, self.dims[2] as u32],
            4,
            self.origin,
            self.extent,
            &self.data,
        )
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let raw = read_flnv(&mut BufReader::new(File::open(path)?))?;
        if raw.channels != 4 {
            return Err(Error::InvalidFormatDimensions(format!(
                "voxel grid requires 4 channels, got {}",
                raw.channels
            )));
        }
        Self::new(
            [raw.dims[0] as usize, raw.dims[1] as usize, raw.dims[2] as usize],
            raw.origin,
            raw.extent,
            raw.data,
        )
    }
}

impl RadianceField for VoxelGridField {
    fn query(&self, position: &Point3<f64>, _view_dir: &Vector3<f64>) -> FieldSample {
        match self.interpolate(position) {
            Some([r, g, b, d]) => FieldSample::new([r, g, b], d),
            None => FieldSample::VACUUM,
        }
    }
}

/// Evaluates `field` at every node of a regular grid spanning
/// `origin..origin+extent`, querying along the frontal `-z` direction.
pub fn bake_to_grid<F: RadianceField + ?Sized>(
    field: &F,
    origin: Point3<f64>,
    extent: Vector3<f64>,
    dims: [usize; 3],
) -> Result<VoxelGridField> {
    if dims.iter().any(|&d| d < 2) {
        return Err(Error::InvalidArgument(format!(
            "bake needs at least 2 nodes per axis, got {dims:?}"
        )));
    }
    let view = Vector3::new(0.0, 0.0, -1.0);
    let count = dims[0] * dims[1] * dims[2];
    let grid = VoxelGridField::new(dims, origin, extent, vec![0.0; 4 * count])?;
    let samples: Vec<FieldSample> = (0..count)
        .into_par_iter()
        .map(|i| {
            let x = i % dims[0];
            let y = (i / dims[0]) % dims[1];
            let z = i / (dims[0] * dims[1]);
            field.query(&grid.node_position(x, y, z), &view)
        })
        .collect();
    let mut data = vec![0.0f64; 4 * count];
    for (i, s) in samples.iter().enumerate() {
        data[i] = s.rgb[0];
        data[count + i] = s.rgb[1];
        data[2 * count + i] = s.rgb[2];
        data[3 * count + i] = s.density;
    }
    VoxelGridField::new(dims, origin, extent, data)
}

/// Landmark-driven analytic head: a logistic ellipsoid shell around all
/// landmarks plus Gaussian feature blobs at the eye, mouth, and nose
/// landmarks. Color comes from a fixed per-region palette, blended by each
/// component's density contribution. Densities are calibrated so the head
/// interior sits well above the sampling threshold of 20 and the background
/// decays to zero.
#[derive(Debug, Clone)]
pub struct SyntheticHeadField {
    center: Point3<f64>,
    semi_axes: Vector3<f64>,
    steepness: f64,
    shell_amp: f64,
    shell_rgb: [f64; 3],
    blobs: Vec<Blob>,
}

#[derive(Debug, Clone)]
struct Blob {
    center: Point3<f64>,
    inv_two_sigma_sq: f64,
    amp: f64,
    rgb: [f64; 3],
}

const MOUTH_RGB: [f64; 3] = [0.9, 0.1, 0.1];
const EYE_RGB: [f64; 3] = [0.1, 0.2, 0.9];
const NOSE_RGB: [f64; 3] = [0.1, 0.8, 0.2];
const SHELL_RGB: [f64; 3] = [0.6, 0.5, 0.45];

impl SyntheticHeadField {
    /// Builds the head for a landmark set. Every landmark must lie inside
    /// `[-1, 1]^3`; the construction guarantees density >= 40 at each
    /// landmark position (twice the default threshold). `seed` jitters blob
    /// widths and shell falloff without weakening that guarantee.
    pub fn new(landmarks: &Landmarks68, seed: u64) -> Result<Self> {
        use rand::{RngExt, SeedableRng};
        for (i, p) in landmarks.points().iter().enumerate() {
            if p.coords.iter().any(|c| c.abs() > 1.0) {
                return Err(Error::OutOfBounds(format!(
                    "landmark {i} at ({:.3}, {:.3}, {:.3}) is outside [-1,1]^3",
                    p.x, p.y, p.z
                )));
            }
        }
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);

        let scale = landmarks.head_scale().max(1e-6);
        let center = landmarks.centroid() + Vector3::new(0.0, 0.0, -0.2 * scale);
        let mut half: Vector3<f64> = Vector3::new(1e-6, 1e-6, 1e-6);
        for p in landmarks.points() {
            let d = p - center;
            for a in 0..3 {
                half[a] = half[a].max(d[a].abs());
            }
        }
        // Inflate so every landmark sits at normalized radius <= 1/1.1.
        let rho_max = landmarks
            .points()
            .iter()
            .map(|p| {
                let d = p - center;
                (0..3).map(|a| (d[a] / half[a]).powi(2)).sum::<f64>().sqrt()
            })
            .fold(0.0f64, f64::max)
            .max(1e-6);
        let semi_axes = half * rho_max * 1.1;

        let steepness = rng.random_range(14.0..18.0);
        let shell_amp = rng.random_range(76.0..84.0);

        let mut blobs = Vec::new();
        let mut add_blobs = |indices: &[usize], rgb: [f64; 3], rng: &mut rand_chacha::ChaCha8Rng| {
            for &i in indices {
                let sigma: f64 = rng.random_range(0.045..0.06);
                blobs.push(Blob {
                    center: landmarks.points()[i],
                    inv_two_sigma_sq: 1.0 / (2.0 * sigma * sigma),
                    amp: 45.0,
                    rgb,
                });
            }
        };
        add_blobs(regions::MOUTH, MOUTH_RGB, &mut rng);
        add_blobs(regions::LEFT_EYE_BROW, EYE_RGB, &mut rng);
        add_blobs(regions::RIGHT_EYE_BROW, EYE_RGB, &mut rng);
        add_blobs(regions::NOSE, NOSE_RGB, &mut rng);

        Ok(Self {
            center,
            semi_axes,
            steepness,
            shell_amp,
            shell_rgb: SHELL_RGB,
            blobs,
        })
    }
}

impl RadianceField for SyntheticHeadField {
    fn query(&self, position: &Point3<f64>, _view_dir: &Vector3<f64>) -> FieldSample {
        let d = position - self.center;
        let rho = (0..3)
            .map(|a| (d[a] / self.semi_axes[a]).powi(2))
            .sum::<f64>()
            .sqrt();
        let shell = self.shell_amp / (1.0 + (self.steepness * (rho - 1.0)).exp());

        let mut density = shell;
        let mut rgb = [
            shell * self.shell_rgb[0],
            shell * self.shell_rgb[1],
            shell * self.shell_rgb[2],
        ];
        for blob in &self.blobs {
            let r2 = (position - blob.center).norm_squared();
            let contrib = blob.amp * (-r2 * blob.inv_two_sigma_sq).exp();
            density += contrib;
            for (acc, c) in rgb.iter_mut().zip(blob.rgb) {
                *acc += contrib * c;
            }
        }
        if density > 1e-12 {
            for c in rgb.iter_mut() {
                *c /= density;
            }
        } else {
            rgb = [0.0; 3];
        }
        FieldSample::new(rgb, density)
    }
}

pub(crate) struct RawGrid {
    pub dims: [u32; 3],
    pub channels: u32,
    pub origin: Point3<f64>,
    pub extent: Vector3<f64>,
    pub data: Vec<f64>,
}

/// Writes the `FLNV` binary grid format: magic, version, dims, channel
/// count, f32 origin and extent, then an f32 payload ordered `[c][z][y][x]`.
pub(crate) fn write_flnv<W: Write>(
    w: &mut W,
    dims: [u32; 3],
    channels: u32,
    origin: Point3<f64>,
    extent: Vector3<f64>,
    data: &[f64],
) -> Result<()> {
    w.write_all(&GRID_MAGIC)?;
    w.write_all(&GRID_VERSION.to_le_bytes())?;
    for d in dims {
        w.write_all(&d.to_le_bytes())?;
    }
    w.write_all(&channels.to_le_bytes())?;
    for v in [origin.x, origin.y, origin.z, extent.x, extent.y, extent.z] {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    for v in data {
        w.write_all(&(*v as f32).to_le_bytes())?;
    }
    Ok(())
}

pub(crate) fn read_flnv<R: Read>(r: &mut R) -> Result<RawGrid> {
    let mut magic = [0u8; 4];
    read_fully(r, &mut magic)?;
    if magic != GRID_MAGIC {
        return Err(Error::BadMagic {
            expected: GRID_MAGIC,
            got: magic,
        });
    }
    let mut u32buf = [0u8; 4];
    read_fully(r, &mut u32buf)?;
    let version = u32::from_le_bytes(u32buf);
    if version != GRID_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let mut dims = [0u32; 3];
    for d in dims.iter_mut() {
        read_fully(r, &mut u32buf)?;
        *d = u32::from_le_bytes(u32buf);
    }
    read_fully(r, &mut u32buf)?;
    let channels = u32::from_le_bytes(u32buf);
    if dims.iter().any(|&d| d < 2) || channels == 0 {
        return Err(Error::InvalidFormatDimensions(format!(
            "grid dims {dims:?} x {channels} channels"
        )));
    }
    let count = (channels as u64)
        .checked_mul(dims[0] as u64)
        .and_then(|c| c.checked_mul(dims[1] as u64))
        .and_then(|c| c.checked_mul(dims[2] as u64))
        .filter(|c| c.saturating_mul(4) <= MAX_GRID_BYTES)
        .ok_or_else(|| {
            Error::DimensionOverflow(format!(
                "grid dims {dims:?} x {channels} channels exceed the {MAX_GRID_BYTES}-byte cap"
            ))
        })?;
    let mut f32buf = [0u8; 4];
    let mut geom = [0.0f64; 6];
    for g in geom.iter_mut() {
        read_fully(r, &mut f32buf)?;
        *g = f32::from_le_bytes(f32buf) as f64;
    }
    let mut data = vec![0.0f64; count as usize];
    for (i, v) in data.iter_mut().enumerate() {
        if let Err(e) = read_fully(r, &mut f32buf) {
            return match e {
                Error::Truncated { .. } => Err(Error::Truncated {
                    needed: count * 4,
                    got: i as u64 * 4,
                }),
                other => Err(other),
            };
        }
        *v = f32::from_le_bytes(f32buf) as f64;
    }
    Ok(RawGrid {
        dims,
        channels,
        origin: Point3::new(geom[0], geom[1], geom[2]),
        extent: Vector3::new(geom[3], geom[4], geom[5]),
        data,
    })
}

fn read_fully<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    let mut filled = 0;
    while filled < buf.len() {
        let n = r.read(&mut buf[filled..])?;
        if n == 0 {
            return Err(Error::Truncated {
                needed: buf.len() as u64,
                got: filled as u64,
            });
        }
        filled += n;
    }
    Ok(())
}
