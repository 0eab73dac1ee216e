//! Feature-volume sampling.
//!
//! Volumes are sampled over oriented cubic boxes at the res^3 cell centers,
//! queried along the box's frontal axis. Voxels below the density threshold
//! (default 20) are zeroed in all raw channels; voxels at or above it keep
//! their color and get density 1, so a thresholded volume is a binary
//! occupancy mask with color. Optional sinusoidal position-encoding channels
//! are appended from the normalized grid coordinates and are never zeroed.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::{Matrix3, Point3, Vector3};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::face_model::{Landmarks68, TransformMatrix};
use crate::field::{read_flnv, write_flnv, RadianceField};

/// Landmark index sets for the standard 68-point annotation.
pub mod regions {
    pub const MOUTH: &[usize] = &[
        48, 49, 50, 51, 52, 53, 54, 55, 56, 57, 58, 59, 60, 61, 62, 63, 64, 65, 66, 67,
    ];
    pub const LEFT_EYE_BROW: &[usize] = &[17, 18, 19, 20, 21, 36, 37, 38, 39, 40, 41];
    pub const RIGHT_EYE_BROW: &[usize] = &[22, 23, 24, 25, 26, 42, 43, 44, 45, 46, 47];
    pub const NOSE: &[usize] = &[27, 28, 29, 30, 31, 32, 33, 34, 35];
    pub const EYES: &[usize] = &[
        17, 18, 19, 20, 21, 36, 37, 38, 39, 40, 41, 22, 23, 24, 25, 26, 42, 43, 44, 45, 46, 47,
    ];
}

/// Default density threshold for discarding noisy samples.
pub const DEFAULT_THRESHOLD: f64 = 20.0;

/// Position-encoding frequency count; the encoding of one coordinate has
/// `1 + 2L` entries.
pub const ENCODING_L: usize = 4;

/// Channels of an encoded volume: 4 raw plus `3 * (1 + 2L)` encoding.
pub const ENCODED_CHANNELS: usize = 4 + 3 * (1 + 2 * ENCODING_L);

const MAX_RES: usize = 512;

/// Sinusoidal encoding of one normalized coordinate:
/// `(p, sin(2^0 pi p), cos(2^0 pi p), ..., sin(2^3 pi p), cos(2^3 pi p))`.
pub fn position_encoding(p: f64) -> [f64; 1 + 2 * ENCODING_L] {
    let mut out = [0.0; 1 + 2 * ENCODING_L];
    out[0] = p;
    for k in 0..ENCODING_L {
        let arg = (1u32 << k) as f64 * std::f64::consts::PI * p;
        out[1 + 2 * k] = arg.sin();
        out[2 + 2 * k] = arg.cos();
    }
    out
}

/// A cube in world space: center, orthonormal orientation, half edge length.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrientedBox {
    center: Point3<f64>,
    rotation: Matrix3<f64>,
    half_extent: f64,
}

impl OrientedBox {
    pub fn new(center: Point3<f64>, rotation: Matrix3<f64>, half_extent: f64) -> Result<Self> {
        if !(half_extent > 0.0 && half_extent.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "box half extent must be positive, got {half_extent}"
            )));
        }
        let defect = (rotation.transpose() * rotation - Matrix3::identity()).amax();
        if !defect.is_finite() || defect > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "box rotation is not orthonormal (defect {defect:.3e})"
            )));
        }
        Ok(Self {
            center,
            rotation,
            half_extent,
        })
    }

    pub fn axis_aligned(center: Point3<f64>, half_extent: f64) -> Result<Self> {
        Self::new(center, Matrix3::identity(), half_extent)
    }

    pub fn center(&self) -> Point3<f64> {
        self.center
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.rotation
    }

    pub fn half_extent(&self) -> f64 {
        self.half_extent
    }

    /// View direction used for every query in this box: its `-z` axis.
    pub fn frontal_view(&self) -> Vector3<f64> {
        -self.rotation.column(2)
    }

    pub fn local_to_world(&self, local: &Point3<f64>) -> Point3<f64> {
        self.center + self.rotation * local.coords
    }

    pub fn world_to_local(&self, world: &Point3<f64>) -> Point3<f64> {
        Point3::from(self.rotation.transpose() * (world - self.center))
    }

    /// World position of cell center `(i, j, k)` on a res^3 grid: normalized
    /// coordinate `(i + 0.5) / res`, stretched over `[-h, h]` per axis.
    pub fn cell_center(&self, res: usize, i: usize, j: usize, k: usize) -> Point3<f64> {
        let c = |i: usize| (2.0 * (i as f64 + 0.5) / res as f64 - 1.0) * self.half_extent;
        self.local_to_world(&Point3::new(c(i), c(j), c(k)))
    }
}

/// A sampled res^3 feature volume: 4 raw channels (r, g, b, thresholded
/// density), optionally followed by 27 position-encoding channels. Data is
/// channel-major `[c][z][y][x]` with x fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVolume {
    res: usize,
    channels: usize,
    sample_box: OrientedBox,
    data: Vec<f64>,
}

impl FeatureVolume {
    pub fn res(&self) -> usize {
        self.res
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn sample_box(&self) -> &OrientedBox {
        &self.sample_box
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Edge length of one voxel in world units.
    pub fn voxel_pitch(&self) -> f64 {
        2.0 * self.sample_box.half_extent / self.res as f64
    }

    #[inline]
    pub fn get(&self, c: usize, x: usize, y: usize, z: usize) -> f64 {
        self.data[((c * self.res + z) * self.res + y) * self.res + x]
    }

    /// Number of voxels surviving the density threshold.
    pub fn occupied_count(&self) -> usize {
        let n = self.res * self.res * self.res;
        self.data[3 * n..4 * n].iter().filter(|&&d| d > 0.5).count()
    }

    /// Grid indices of occupied voxels, x fastest.
    pub fn occupied_indices(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        let res = self.res;
        let n = res * res * res;
        self.data[3 * n..4 * n]
            .iter()
            .enumerate()
            .filter(|(_, &d)| d > 0.5)
            .map(move |(i, _)| (i % res, (i / res) % res, i / (res * res)))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    /// Writes the `FLNV` grid format. The box orientation is not part of the
    /// format; the file records the box footprint in its own local frame
    /// (origin `center - h`, extent `2h` per axis).
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let h = self.sample_box.half_extent;
        write_flnv(
            w,
            [self.res as u32; 3],
            self.channels as u32,
            self.sample_box.center + Vector3::new(-h, -h, -h),
            Vector3::new(2.0 * h, 2.0 * h, 2.0 * h),
            &self.data,
        )
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let raw = read_flnv(&mut BufReader::new(File::open(path)?))?;
        if raw.channels != 4 && raw.channels as usize != ENCODED_CHANNELS {
            return Err(Error::InvalidFormatDimensions(format!(
                "feature volume requires 4 or {ENCODED_CHANNELS} channels, got {}",
                raw.channels
            )));
        }
        if raw.dims[0] != raw.dims[1] || raw.dims[0] != raw.dims[2] {
            return Err(Error::InvalidFormatDimensions(format!(
                "feature volume must be cubic, got {:?}",
                raw.dims
            )));
        }
        let res = raw.dims[0] as usize;
        let ext = raw.extent;
        if (ext.x - ext.y).abs() > 1e-6 * ext.x.abs() || (ext.x - ext.z).abs() > 1e-6 * ext.x.abs()
        {
            return Err(Error::InvalidFormatDimensions(
                "feature volume extent must be cubic".into(),
            ));
        }
        let half = ext.x / 2.0;
        let center = raw.origin + Vector3::new(half, half, half);
        Ok(Self {
            res,
            channels: raw.channels as usize,
            sample_box: OrientedBox::new(center, Matrix3::identity(), half)?,
            data: raw.data,
        })
    }

    /// ASCII PLY dump of occupied voxels (world position + color) for
    /// eyeballing volumes in a point-cloud viewer.
    pub fn export_ply<W: Write>(&self, w: &mut W) -> Result<()> {
        let occupied: Vec<_> = self.occupied_indices().collect();
        writeln!(w, "ply")?;
        writeln!(w, "format ascii 1.0")?;
        writeln!(w, "element vertex {}", occupied.len())?;
        for axis in ["x", "y", "z"] {
            writeln!(w, "property float {axis}")?;
        }
        for color in ["red", "green", "blue"] {
            writeln!(w, "property uchar {color}")?;
        }
        writeln!(w, "end_header")?;
        for (x, y, z) in occupied {
            let p = self.sample_box.cell_center(self.res, x, y, z);
            let byte = |c: usize| (self.get(c, x, y, z).clamp(0.0, 1.0) * 255.0).round() as u8;
            writeln!(
                w,
                "{} {} {} {} {} {}",
                p.x,
                p.y,
                p.z,
                byte(0),
                byte(1),
                byte(2)
            )?;
        }
        Ok(())
    }
}

/// Samples `field` over the box at res^3 cell centers with density
/// thresholding; appends position-encoding channels when `encode` is set.
pub fn sample_volume<F: RadianceField + ?Sized>(
    field: &F,
    sample_box: &OrientedBox,
    res: usize,
    threshold: f64,
    encode: bool,
) -> Result<FeatureVolume> {
    sample_volume_mapped(field, sample_box, res, threshold, encode, |x| x)
}

/// Shared sampler: queries the field at `map(cell_center)` so warped
/// (pull-back) sampling reuses the exact same grid traversal, threshold and
/// layout logic as the plain sampler.
pub(crate) fn sample_volume_mapped<F, M>(
    field: &F,
    sample_box: &OrientedBox,
    res: usize,
    threshold: f64,
    encode: bool,
    map: M,
) -> Result<FeatureVolume>
where
    F: RadianceField + ?Sized,
    M: Fn(Point3<f64>) -> Point3<f64> + Sync,
{
    if !(2..=MAX_RES).contains(&res) {
        return Err(Error::InvalidArgument(format!(
            "volume resolution must be in [2, {MAX_RES}], got {res}"
        )));
    }
    if threshold.is_nan() || threshold < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "density threshold must be nonnegative, got {threshold}"
        )));
    }
    let view = sample_box.frontal_view();
    let n = res * res * res;
    let raw: Vec<[f64; 4]> = (0..n)
        .into_par_iter()
        .map(|i| {
            let x = i % res;
            let y = (i / res) % res;
            let z = i / (res * res);
            let pos = map(sample_box.cell_center(res, x, y, z));
            let s = field.query(&pos, &view);
            if s.density < threshold {
                [0.0; 4]
            } else {
                [s.rgb[0], s.rgb[1], s.rgb[2], 1.0]
            }
        })
        .collect();

    let channels = if encode { ENCODED_CHANNELS } else { 4 };
    let mut data = vec![0.0f64; channels * n];
    for (i, v) in raw.iter().enumerate() {
        for c in 0..4 {
            data[c * n + i] = v[c];
        }
    }
    if encode {
        // Per-axis encodings depend only on one grid index; precompute rows.
        let enc: Vec<[f64; 9]> = (0..res)
            .map(|i| position_encoding((i as f64 + 0.5) / res as f64))
            .collect();
        for i in 0..n {
            let (x, y, z) = (i % res, (i / res) % res, i / (res * res));
            for e in 0..9 {
                data[(4 + e) * n + i] = enc[x][e];
                data[(13 + e) * n + i] = enc[y][e];
                data[(22 + e) * n + i] = enc[z][e];
            }
        }
    }
    Ok(FeatureVolume {
        res,
        channels,
        sample_box: *sample_box,
        data,
    })
}

/// Scale factors for the fine sampling regions, relative to the head scale
/// (largest landmark distance from the centroid), plus the enlargement
/// applied to compensate coarse-stage inaccuracy.
#[derive(Debug, Clone, Copy)]
pub struct BoxConstants {
    pub face: f64,
    pub eye: f64,
    pub mouth: f64,
    pub enlargement: f64,
}

impl Default for BoxConstants {
    fn default() -> Self {
        Self {
            face: 0.7,
            eye: 0.18,
            mouth: 0.25,
            enlargement: 1.15,
        }
    }
}

/// The four fine sampling regions.
#[derive(Debug, Clone, Copy)]
pub struct FineBoxes {
    pub face: OrientedBox,
    pub left_eye: OrientedBox,
    pub right_eye: OrientedBox,
    pub mouth: OrientedBox,
}

/// Derives the fine sampling boxes from coarse landmarks and the head
/// transform, with default size constants.
pub fn fine_boxes(coarse: &Landmarks68, head: &TransformMatrix) -> Result<FineBoxes> {
    fine_boxes_with(coarse, head, &BoxConstants::default())
}

pub fn fine_boxes_with(
    coarse: &Landmarks68,
    head: &TransformMatrix,
    constants: &BoxConstants,
) -> Result<FineBoxes> {
    let linear = head.linear();
    if linear.determinant().abs() < 1e-12 {
        return Err(Error::Singular("head transform linear part"));
    }
    let rotation = polar_rotation(&linear)?;
    let scale = coarse.head_scale();
    if scale <= 1e-9 {
        return Err(Error::InvalidArgument(
            "degenerate landmarks: zero head scale".into(),
        ));
    }

    let mean_of = |indices: &[usize]| -> Point3<f64> {
        let sum = indices
            .iter()
            .fold(Vector3::zeros(), |acc, &i| acc + coarse.points()[i].coords);
        Point3::from(sum / indices.len() as f64)
    };

    let face_center = coarse.centroid();
    // Guarantee the face box covers every landmark even when the nominal
    // constant would clip an outlier along a box axis.
    let needed = coarse
        .points()
        .iter()
        .map(|p| (rotation.transpose() * (p - face_center)).amax())
        .fold(0.0f64, f64::max);
    let face_half = (constants.face * constants.enlargement * scale).max(1.05 * needed);

    let make = |center: Point3<f64>, half: f64| OrientedBox::new(center, rotation, half);
    Ok(FineBoxes {
        face: make(face_center, face_half)?,
        left_eye: make(
            mean_of(regions::LEFT_EYE_BROW),
            constants.eye * constants.enlargement * scale,
        )?,
        right_eye: make(
            mean_of(regions::RIGHT_EYE_BROW),
            constants.eye * constants.enlargement * scale,
        )?,
        mouth: make(
            mean_of(regions::MOUTH),
            constants.mouth * constants.enlargement * scale,
        )?,
    })
}

/// Nearest rotation to `m` (polar factor via SVD, reflected if needed).
fn polar_rotation(m: &Matrix3<f64>) -> Result<Matrix3<f64>> {
    let svd = m.svd(true, true);
    let u = svd.u.ok_or(Error::Singular("polar decomposition"))?;
    let v_t = svd.v_t.ok_or(Error::Singular("polar decomposition"))?;
    let mut r = u * v_t;
    if r.determinant() < 0.0 {
        let mut flip = u;
        flip.column_mut(2).neg_mut();
        r = flip * v_t;
    }
    Ok(r)
}

/// Pose/scale augmentation: sample positions are mapped `S -> tau (R S + t)`
/// before field queries, with `tau` in `[2, 3]`, `R` uniform on SO(3) and
/// `t` in `[-1, 1]^3`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentTransform {
    tau: f64,
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl AugmentTransform {
    pub fn new(tau: f64, rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        if !(2.0..=3.0).contains(&tau) {
            return Err(Error::InvalidArgument(format!(
                "augment scale must be in [2, 3], got {tau}"
            )));
        }
        let defect = (rotation.transpose() * rotation - Matrix3::identity()).amax();
        if defect > 1e-9 || (rotation.determinant() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(
                "augment rotation is not a proper rotation".into(),
            ));
        }
        if translation.iter().any(|c| c.abs() > 1.0) {
            return Err(Error::InvalidArgument(format!(
                "augment translation must lie in [-1, 1]^3, got {translation:?}"
            )));
        }
        Ok(Self {
            tau,
            rotation,
            translation,
        })
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.rotation
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.translation
    }

    /// Where a sampling position ends up: `tau (R s + t)`.
    pub fn map_position(&self, s: &Point3<f64>) -> Point3<f64> {
        Point3::from(self.tau * (self.rotation * s.coords + self.translation))
    }

    /// Volume-space position of a world point, inverting `map_position`.
    pub fn unmap_position(&self, world: &Point3<f64>) -> Point3<f64> {
        Point3::from(self.rotation.transpose() * (world.coords / self.tau - self.translation))
    }
}

/// Uniformly random rotation matrix from a uniformly random unit quaternion.
pub(crate) fn random_rotation(rng: &mut ChaCha8Rng) -> Matrix3<f64> {
    use std::f64::consts::TAU;
    let u1: f64 = rng.random_range(0.0..1.0);
    let u2: f64 = rng.random_range(0.0..TAU);
    let u3: f64 = rng.random_range(0.0..TAU);
    let a = (1.0 - u1).sqrt();
    let b = u1.sqrt();
    let q = nalgebra::Quaternion::new(a * u2.sin(), a * u2.cos(), b * u3.sin(), b * u3.cos());
    nalgebra::UnitQuaternion::from_quaternion(q)
        .to_rotation_matrix()
        .into_inner()
}

/// Draws a deterministic augmentation transform for `seed`.
pub fn random_augment(seed: u64) -> AugmentTransform {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tau = rng.random_range(2.0..=3.0);
    let rotation = random_rotation(&mut rng);
    let translation = Vector3::new(
        rng.random_range(-1.0..=1.0),
        rng.random_range(-1.0..=1.0),
        rng.random_range(-1.0..=1.0),
    );
    AugmentTransform {
        tau,
        rotation,
        translation,
    }
}

/// Applies the augmentation by transforming the sampling box, so that each
/// cell center queries the field at `tau (R S + t)`.
pub fn apply_augment(a: &AugmentTransform, sample_box: &OrientedBox) -> OrientedBox {
    let center = Point3::from(a.tau * (a.rotation * sample_box.center.coords + a.translation));
    OrientedBox {
        center,
        rotation: a.rotation * sample_box.rotation,
        half_extent: a.tau * sample_box.half_extent,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::face_model::{canonical_template, generate_landmarks, synth_core};
    use crate::face_model::{ExpressionWeights, IdentityWeights};
    use crate::field::{ConstantField, FieldSample, SphereField};

    fn template_landmarks() -> Landmarks68 {
        Landmarks68::from_arrays(&canonical_template()).unwrap()
    }

    #[test]
    fn encoding_of_zero_and_one() {
        let g0 = position_encoding(0.0);
        assert_eq!(g0[0], 0.0);
        for k in 0..4 {
            assert_eq!(g0[1 + 2 * k], 0.0);
            assert_eq!(g0[2 + 2 * k], 1.0);
        }
        let g1 = position_encoding(1.0);
        let expect = [1.0, 0.0, -1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0];
        for (got, want) in g1.iter().zip(expect) {
            assert!((got - want).abs() < 1e-12, "got {got}, want {want}");
        }
        assert_eq!(g1.len(), 9);
    }

    #[test]
    fn constant_below_threshold_zeroes_everything() {
        let f = ConstantField {
            sample: FieldSample::new([0.9, 0.9, 0.9], 19.0),
        };
        let b = OrientedBox::axis_aligned(Point3::origin(), 1.0).unwrap();
        let v = sample_volume(&f, &b, 4, 20.0, false).unwrap();
        assert!(v.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn constant_above_threshold_binarizes_density() {
        let f = ConstantField {
            sample: FieldSample::new([0.5, 0.5, 0.5], 30.0),
        };
        let b = OrientedBox::axis_aligned(Point3::origin(), 1.0).unwrap();
        let v = sample_volume(&f, &b, 4, 20.0, false).unwrap();
        let n = 64;
        for i in 0..n {
            assert_eq!(v.data()[i], 0.5);
            assert_eq!(v.data()[3 * n + i], 1.0);
        }
    }

    #[test]
    fn sphere_occupancy_matches_volume_ratio() {
        let f = SphereField::unit(40.0);
        let b = OrientedBox::axis_aligned(Point3::origin(), 1.0).unwrap();
        let v = sample_volume(&f, &b, 64, 20.0, false).unwrap();
        let frac = v.occupied_count() as f64 / 64.0f64.powi(3);
        let expected = std::f64::consts::PI / 6.0;
        assert!(
            (frac - expected).abs() / expected < 0.02,
            "occupied fraction {frac} vs {expected}"
        );
    }

    #[test]
    fn encoding_channels_match_grid_coordinates() {
        let f = ConstantField {
            sample: FieldSample::new([0.1, 0.2, 0.3], 25.0),
        };
        let b = OrientedBox::axis_aligned(Point3::new(0.5, -1.0, 2.0), 0.7).unwrap();
        let v = sample_volume(&f, &b, 5, 20.0, true).unwrap();
        assert_eq!(v.channels(), ENCODED_CHANNELS);
        for (x, y, z) in [(0, 0, 0), (3, 1, 4), (2, 2, 2)] {
            let gx = position_encoding((x as f64 + 0.5) / 5.0);
            let gy = position_encoding((y as f64 + 0.5) / 5.0);
            let gz = position_encoding((z as f64 + 0.5) / 5.0);
            for e in 0..9 {
                assert_eq!(v.get(4 + e, x, y, z), gx[e]);
                assert_eq!(v.get(13 + e, x, y, z), gy[e]);
                assert_eq!(v.get(22 + e, x, y, z), gz[e]);
            }
        }
    }

    #[test]
    fn threshold_monotonicity() {
        let lm = template_landmarks();
        let head = crate::field::SyntheticHeadField::new(&lm, 2).unwrap();
        let b = OrientedBox::axis_aligned(Point3::origin(), 1.0).unwrap();
        let mut last = usize::MAX;
        for t in [5.0, 20.0, 40.0, 70.0] {
            let v = sample_volume(&head, &b, 24, t, false).unwrap();
            let occ = v.occupied_count();
            assert!(occ <= last, "occupancy grew when threshold rose");
            last = occ;
        }
    }

    #[test]
    fn fine_boxes_center_and_containment() {
        let lm = template_landmarks();
        let boxes = fine_boxes(&lm, &TransformMatrix::identity()).unwrap();
        assert!((boxes.face.center() - lm.centroid()).norm() < 1e-12);

        // Every landmark inside the face box.
        for p in lm.points() {
            let local = boxes.face.world_to_local(p);
            assert!(local.coords.amax() <= boxes.face.half_extent());
        }
        // Mouth landmarks inside the mouth box with >= 10% margin.
        for &i in regions::MOUTH {
            let local = boxes.mouth.world_to_local(&lm.points()[i]);
            assert!(local.coords.amax() <= 0.9 * boxes.mouth.half_extent());
        }
    }

    #[test]
    fn fine_boxes_are_rotation_equivariant() {
        let lm = template_landmarks();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let r = random_rotation(&mut rng);
        let head = TransformMatrix::from_parts(Matrix3::identity() * 1.3, Vector3::zeros());
        let rot = TransformMatrix::from_parts(r, Vector3::zeros());

        let base = fine_boxes(&lm, &head).unwrap();
        let rotated = fine_boxes(&rot.apply(&lm), &head.then(&rot)).unwrap();

        for (a, b) in [
            (&base.face, &rotated.face),
            (&base.left_eye, &rotated.left_eye),
            (&base.right_eye, &rotated.right_eye),
            (&base.mouth, &rotated.mouth),
        ] {
            assert!((r * a.center().coords - b.center().coords).norm() < 1e-9);
            assert!((r * a.rotation() - b.rotation()).amax() < 1e-9);
            assert!((a.half_extent() - b.half_extent()).abs() < 1e-9);
        }
    }

    #[test]
    fn fine_boxes_reject_degenerate_head() {
        let lm = template_landmarks();
        let head = TransformMatrix::from_parts(Matrix3::zeros(), Vector3::zeros());
        assert!(matches!(
            fine_boxes(&lm, &head),
            Err(Error::Singular(_))
        ));
    }

    #[test]
    fn fine_boxes_cover_synthetic_faces() {
        let core = synth_core(31, 6, 4).unwrap();
        for j in 0..6 {
            let lm = generate_landmarks(
                &core,
                &IdentityWeights::one_hot(4, j % 4),
                &ExpressionWeights::one_hot(6, j),
            )
            .unwrap();
            let boxes = fine_boxes(&lm, &TransformMatrix::identity()).unwrap();
            for p in lm.points() {
                let local = boxes.face.world_to_local(p);
                assert!(local.coords.amax() <= boxes.face.half_extent());
            }
            for &i in regions::MOUTH {
                let local = boxes.mouth.world_to_local(&lm.points()[i]);
                assert!(local.coords.amax() <= 0.9 * boxes.mouth.half_extent());
            }
        }
    }

    #[test]
    fn pure_scaling_augment_doubles_the_box() {
        let a = AugmentTransform::new(2.0, Matrix3::identity(), Vector3::zeros()).unwrap();
        let b = OrientedBox::axis_aligned(Point3::origin(), 1.0).unwrap();
        let out = apply_augment(&a, &b);
        assert_eq!(out.half_extent(), 2.0);
        assert_eq!(out.center(), Point3::origin());
        assert_eq!(out.rotation(), Matrix3::identity());
        // Sampling positions of the new box span [-2, 2]^3: with res 4 the
        // first cell center sits at -1.5 on each axis.
        let corner = out.cell_center(4, 0, 0, 0);
        assert!((corner.coords - Vector3::new(-1.5, -1.5, -1.5)).norm() < 1e-12);
    }

    #[test]
    fn augmented_box_queries_transformed_positions() {
        let a = random_augment(5);
        let b = OrientedBox::axis_aligned(Point3::new(0.2, -0.1, 0.05), 0.8).unwrap();
        let out = apply_augment(&a, &b);
        for (i, j, k) in [(0, 0, 0), (3, 1, 2), (7, 7, 7)] {
            let s = b.cell_center(8, i, j, k);
            let want = a.map_position(&s);
            let got = out.cell_center(8, i, j, k);
            assert!((got - want).norm() < 1e-12);
        }
    }

    #[test]
    fn random_augment_is_deterministic() {
        assert_eq!(random_augment(123), random_augment(123));
        assert_ne!(random_augment(123), random_augment(124));
    }

    #[test]
    fn so3_sampling_has_no_preferred_direction() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut mean = Vector3::zeros();
        let n = 10_000;
        for _ in 0..n {
            mean += random_rotation(&mut rng) * Vector3::z();
        }
        mean /= n as f64;
        assert!(mean.norm() < 0.05, "mean rotated axis {:?}", mean);
    }

    #[test]
    fn volume_file_round_trip_preserves_bytes() {
        let f = SphereField::unit(40.0);
        let b = OrientedBox::axis_aligned(Point3::origin(), 1.0).unwrap();
        let v = sample_volume(&f, &b, 8, 20.0, true).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vol.flnv");
        v.save(&path).unwrap();
        let loaded = FeatureVolume::load(&path).unwrap();
        assert_eq!(loaded.res(), 8);
        assert_eq!(loaded.channels(), ENCODED_CHANNELS);
        // Round-trip the file itself: reading and re-writing is bit-exact.
        let bytes = std::fs::read(&path).unwrap();
        let mut rewritten = Vec::new();
        loaded.write_to(&mut rewritten).unwrap();
        assert_eq!(bytes, rewritten);
    }

    #[test]
    fn ply_export_lists_occupied_voxels() {
        let f = SphereField::unit(40.0);
        let b = OrientedBox::axis_aligned(Point3::origin(), 1.0).unwrap();
        let v = sample_volume(&f, &b, 6, 20.0, false).unwrap();
        let mut out = Vec::new();
        v.export_ply(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        let expected = format!("element vertex {}", v.occupied_count());
        assert!(text.contains(&expected));
        assert!(text.lines().count() > v.occupied_count());
    }

    #[test]
    fn volume_loader_rejects_unsupported_channel_counts() {
        let mut bytes = Vec::new();
        crate::field::write_flnv(
            &mut bytes,
            [4, 4, 4],
            5,
            Point3::origin(),
            Vector3::new(1.0, 1.0, 1.0),
            &vec![0.0; 5 * 64],
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.flnv");
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            FeatureVolume::load(&path),
            Err(Error::InvalidFormatDimensions(_))
        ));
    }

    #[test]
    fn bad_res_and_threshold_are_rejected() {
        let f = ConstantField {
            sample: FieldSample::VACUUM,
        };
        let b = OrientedBox::axis_aligned(Point3::origin(), 1.0).unwrap();
        assert!(sample_volume(&f, &b, 1, 20.0, false).is_err());
        assert!(sample_volume(&f, &b, 8, -1.0, false).is_err());
    }
}
