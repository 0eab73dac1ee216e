//! Bilinear landmark model: a rank-3 core tensor contracted with identity and
//! expression weight vectors yields 68 3D landmarks, which a 3x4 transform
//! then aligns with a captured head.
//!
//! All landmark coordinates are in head units (dataset millimetres divided by
//! 100), and a whole head fits comfortably inside `[-1, 1]^3`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{Matrix3, Matrix3x4, Point3, Vector3};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of landmarks in the standard 68-point annotation.
pub const NUM_LANDMARKS: usize = 68;

/// First tensor dimension: 68 landmarks x 3 coordinates, xyz-interleaved.
pub const LANDMARK_DIM: usize = NUM_LANDMARKS * 3;

const CORE_MAGIC: [u8; 4] = *b"FLNC";
const CORE_VERSION: u32 = 1;

/// Upper bound on core payload size accepted by the loader (1 GiB).
const MAX_CORE_BYTES: u64 = 1 << 30;

/// Rank-3 core tensor mapping (identity, expression) weights to landmarks.
///
/// Shape is `(204, n_exp, n_id)` with the first index fastest in memory, so
/// `data[i + 204*j + 204*n_exp*k]` is entry `(i, j, k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BilinearCore {
    data: Vec<f64>,
    n_exp: usize,
    n_id: usize,
}

impl BilinearCore {
    pub fn new(data: Vec<f64>, n_exp: usize, n_id: usize) -> Result<Self> {
        if n_exp == 0 || n_id == 0 {
            return Err(Error::InvalidArgument(format!(
                "core dimensions must be positive, got ({n_exp}, {n_id})"
            )));
        }
        let expected = LANDMARK_DIM * n_exp * n_id;
        if data.len() != expected {
            return Err(Error::DimensionMismatch {
                context: "bilinear core payload",
                expected,
                got: data.len(),
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidArgument(
                "bilinear core contains non-finite entries".into(),
            ));
        }
        Ok(Self { data, n_exp, n_id })
    }

    pub fn n_exp(&self) -> usize {
        self.n_exp
    }

    pub fn n_id(&self) -> usize {
        self.n_id
    }

    /// Entry `(i, j, k)` of the tensor, `i` over landmark coordinates,
    /// `j` over expression modes, `k` over identity modes.
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        debug_assert!(i < LANDMARK_DIM && j < self.n_exp && k < self.n_id);
        self.data[i + LANDMARK_DIM * (j + self.n_exp * k)]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Writes the `FLNC` binary format to `w`.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(&CORE_MAGIC)?;
        w.write_all(&CORE_VERSION.to_le_bytes())?;
        for dim in [LANDMARK_DIM as u32, self.n_exp as u32, self.n_id as u32] {
            w.write_all(&dim.to_le_bytes())?;
        }
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    /// Reads the `FLNC` binary format from `r`.
    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let magic = read_exact_array::<4, R>(r, "FLNC header")?;
        if magic != CORE_MAGIC {
            return Err(Error::BadMagic {
                expected: CORE_MAGIC,
                got: magic,
            });
        }
        let version = u32::from_le_bytes(read_exact_array::<4, R>(r, "FLNC version")?);
        if version != CORE_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let mut dims = [0u32; 3];
        for d in dims.iter_mut() {
            *d = u32::from_le_bytes(read_exact_array::<4, R>(r, "FLNC dims")?);
        }
        if dims[0] as usize != LANDMARK_DIM {
            return Err(Error::InvalidFormatDimensions(format!(
                "first core dimension must be {LANDMARK_DIM}, got {}",
                dims[0]
            )));
        }
        if dims[1] == 0 || dims[2] == 0 {
            return Err(Error::InvalidFormatDimensions(
                "expression/identity dimensions must be positive".into(),
            ));
        }
        let count = (dims[0] as u64)
            .checked_mul(dims[1] as u64)
            .and_then(|c| c.checked_mul(dims[2] as u64))
            .filter(|c| c.saturating_mul(8) <= MAX_CORE_BYTES)
            .ok_or_else(|| {
                Error::DimensionOverflow(format!(
                    "core dims {dims:?} exceed the {MAX_CORE_BYTES}-byte cap"
                ))
            })?;
        let mut data = vec![0.0f64; count as usize];
        let mut buf = [0u8; 8];
        for (i, v) in data.iter_mut().enumerate() {
            if let Err(e) = r.read_exact(&mut buf) {
                if e.kind() == std::io::ErrorKind::UnexpectedEof {
                    return Err(Error::Truncated {
                        needed: count * 8,
                        got: i as u64 * 8,
                    });
                }
                return Err(e.into());
            }
            *v = f64::from_le_bytes(buf);
        }
        Self::new(data, dims[1] as usize, dims[2] as usize)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}

fn read_exact_array<const N: usize, R: Read>(r: &mut R, what: &str) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    let mut filled = 0;
    while filled < N {
        let n = r.read(&mut buf[filled..])?;
        if n == 0 {
            return Err(Error::Truncated {
                needed: N as u64,
                got: filled as u64,
            });
        }
        filled += n;
    }
    let _ = what;
    Ok(buf)
}

/// Identity weight vector, length `n_id` of its paired core.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct IdentityWeights(pub Vec<f64>);

/// Expression weight vector, length `n_exp` of its paired core.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ExpressionWeights(pub Vec<f64>);

impl IdentityWeights {
    /// Unit vector selecting identity mode `k`.
    pub fn one_hot(n: usize, k: usize) -> Self {
        let mut w = vec![0.0; n];
        w[k] = 1.0;
        Self(w)
    }
}

impl ExpressionWeights {
    /// Unit vector selecting expression mode `j`.
    pub fn one_hot(n: usize, j: usize) -> Self {
        let mut w = vec![0.0; n];
        w[j] = 1.0;
        Self(w)
    }
}

/// 68 3D landmarks in head units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<[f64; 3]>", into = "Vec<[f64; 3]>")]
pub struct Landmarks68 {
    points: [Point3<f64>; 68],
}

impl Landmarks68 {
    pub fn new(points: [Point3<f64>; 68]) -> Result<Self> {
        for (i, p) in points.iter().enumerate() {
            if !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "landmark {i} has non-finite coordinates"
                )));
            }
        }
        Ok(Self { points })
    }

    pub fn from_arrays(points: &[[f64; 3]]) -> Result<Self> {
        if points.len() != NUM_LANDMARKS {
            return Err(Error::DimensionMismatch {
                context: "landmark list",
                expected: NUM_LANDMARKS,
                got: points.len(),
            });
        }
        let mut out = [Point3::origin(); 68];
        for (o, p) in out.iter_mut().zip(points) {
            *o = Point3::new(p[0], p[1], p[2]);
        }
        Self::new(out)
    }

    /// Interleaved 204-vector `[x0, y0, z0, x1, ...]`.
    pub fn from_flat(flat: &[f64]) -> Result<Self> {
        if flat.len() != LANDMARK_DIM {
            return Err(Error::DimensionMismatch {
                context: "flat landmark vector",
                expected: LANDMARK_DIM,
                got: flat.len(),
            });
        }
        let mut out = [Point3::origin(); 68];
        for (l, o) in out.iter_mut().enumerate() {
            *o = Point3::new(flat[3 * l], flat[3 * l + 1], flat[3 * l + 2]);
        }
        Self::new(out)
    }

    pub fn points(&self) -> &[Point3<f64>; 68] {
        &self.points
    }

    /// Flattens to the interleaved 204-vector used by losses and fitting.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(LANDMARK_DIM);
        for p in &self.points {
            flat.extend_from_slice(&[p.x, p.y, p.z]);
        }
        flat
    }

    pub fn centroid(&self) -> Point3<f64> {
        let sum = self
            .points
            .iter()
            .fold(Vector3::zeros(), |acc, p| acc + p.coords);
        Point3::from(sum / NUM_LANDMARKS as f64)
    }

    /// Largest Euclidean distance of any landmark from the centroid.
    pub fn head_scale(&self) -> f64 {
        let c = self.centroid();
        self.points
            .iter()
            .map(|p| (p - c).norm())
            .fold(0.0, f64::max)
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer(&mut w, self)?;
        w.flush()?;
        Ok(())
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
    }
}

impl TryFrom<Vec<[f64; 3]>> for Landmarks68 {
    type Error = Error;

    fn try_from(v: Vec<[f64; 3]>) -> Result<Self> {
        Self::from_arrays(&v)
    }
}

impl From<Landmarks68> for Vec<[f64; 3]> {
    fn from(lm: Landmarks68) -> Self {
        lm.points.iter().map(|p| [p.x, p.y, p.z]).collect()
    }
}

/// 3x4 transform: 3x3 linear part (rotation and scale) plus translation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransformMatrix {
    m: Matrix3x4<f64>,
}

impl TransformMatrix {
    pub fn new(m: Matrix3x4<f64>) -> Result<Self> {
        if !m.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidArgument(
                "transform matrix has non-finite entries".into(),
            ));
        }
        Ok(Self { m })
    }

    pub fn identity() -> Self {
        Self {
            m: Matrix3x4::identity(),
        }
    }

    pub fn from_parts(linear: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        let mut m = Matrix3x4::zeros();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&linear);
        m.set_column(3, &translation);
        Self { m }
    }

    pub fn matrix(&self) -> &Matrix3x4<f64> {
        &self.m
    }

    pub fn linear(&self) -> Matrix3<f64> {
        self.m.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.m.column(3).into_owned()
    }

    /// `v -> P [v; 1]`.
    pub fn apply_point(&self, p: &Point3<f64>) -> Point3<f64> {
        Point3::from(self.linear() * p.coords + self.translation())
    }

    pub fn apply(&self, lm: &Landmarks68) -> Landmarks68 {
        let mut points = *lm.points();
        for p in points.iter_mut() {
            *p = self.apply_point(p);
        }
        // The affine image of finite points is finite.
        Landmarks68 { points }
    }

    /// Composition: applying `self` then `next` equals applying the result.
    pub fn then(&self, next: &TransformMatrix) -> TransformMatrix {
        let linear = next.linear() * self.linear();
        let translation = next.linear() * self.translation() + next.translation();
        TransformMatrix::from_parts(linear, translation)
    }

    /// Row-major 12-element view, for JSON interchange.
    pub fn to_row_major(&self) -> [f64; 12] {
        let mut out = [0.0; 12];
        for r in 0..3 {
            for c in 0..4 {
                out[4 * r + c] = self.m[(r, c)];
            }
        }
        out
    }

    pub fn from_row_major(v: &[f64; 12]) -> Result<Self> {
        let mut m = Matrix3x4::zeros();
        for r in 0..3 {
            for c in 0..4 {
                m[(r, c)] = v[4 * r + c];
            }
        }
        Self::new(m)
    }
}

/// Contracts the core with the expression weights, then the identity weights,
/// and reshapes the resulting 204-vector into 68 landmarks.
pub fn generate_landmarks(
    core: &BilinearCore,
    id: &IdentityWeights,
    exp: &ExpressionWeights,
) -> Result<Landmarks68> {
    if id.0.len() != core.n_id {
        return Err(Error::DimensionMismatch {
            context: "identity weights",
            expected: core.n_id,
            got: id.0.len(),
        });
    }
    if exp.0.len() != core.n_exp {
        return Err(Error::DimensionMismatch {
            context: "expression weights",
            expected: core.n_exp,
            got: exp.0.len(),
        });
    }
    // Expression contraction first: g[i, k] = sum_j core[i, j, k] exp[j].
    let g = contract_expression(core, &exp.0);
    let mut flat = vec![0.0f64; LANDMARK_DIM];
    for k in 0..core.n_id {
        let wk = id.0[k];
        if wk == 0.0 {
            continue;
        }
        let col = &g[k * LANDMARK_DIM..(k + 1) * LANDMARK_DIM];
        for (f, c) in flat.iter_mut().zip(col) {
            *f += wk * c;
        }
    }
    Landmarks68::from_flat(&flat)
}

/// `g[i + 204 k] = sum_j core[i, j, k] exp[j]` — the per-identity landmark basis.
pub(crate) fn contract_expression(core: &BilinearCore, exp: &[f64]) -> Vec<f64> {
    let mut g = vec![0.0f64; LANDMARK_DIM * core.n_id];
    for k in 0..core.n_id {
        let out = &mut g[k * LANDMARK_DIM..(k + 1) * LANDMARK_DIM];
        for (j, &wj) in exp.iter().enumerate() {
            if wj == 0.0 {
                continue;
            }
            let base = LANDMARK_DIM * (j + core.n_exp * k);
            let slab = &core.data[base..base + LANDMARK_DIM];
            for (o, s) in out.iter_mut().zip(slab) {
                *o += wj * s;
            }
        }
    }
    g
}

/// `h[i + 204 j] = sum_k core[i, j, k] id[k]` — the per-expression landmark basis.
pub(crate) fn contract_identity(core: &BilinearCore, id: &[f64]) -> Vec<f64> {
    let mut h = vec![0.0f64; LANDMARK_DIM * core.n_exp];
    for (k, &wk) in id.iter().enumerate() {
        if wk == 0.0 {
            continue;
        }
        for j in 0..core.n_exp {
            let base = LANDMARK_DIM * (j + core.n_exp * k);
            let slab = &core.data[base..base + LANDMARK_DIM];
            let out = &mut h[j * LANDMARK_DIM..(j + 1) * LANDMARK_DIM];
            for (o, s) in out.iter_mut().zip(slab) {
                *o += wk * s;
            }
        }
    }
    h
}

/// Canonical neutral-face layout: jaw 0-16, brows 17-26, nose 27-35,
/// eyes 36-47, mouth 48-67. Frontal face looks along +z.
pub fn canonical_template() -> [[f64; 3]; 68] {
    use std::f64::consts::PI;
    let mut t = [[0.0f64; 3]; 68];

    // Jaw: half-ellipse from ear to ear through the chin.
    for (i, p) in t.iter_mut().enumerate().take(17) {
        let a = PI * i as f64 / 16.0;
        *p = [
            -0.72 * a.cos(),
            0.40 - 1.10 * a.sin(),
            -0.25 + 0.55 * a.sin(),
        ];
    }
    // Brows: gentle arches. 17-21 on -x, 22-26 mirrored.
    for k in 0..5 {
        let s = k as f64 / 4.0;
        let arch = (PI * s).sin();
        t[17 + k] = [-0.52 + 0.34 * s, 0.32 + 0.06 * arch, 0.26 + 0.04 * arch];
        t[22 + k] = [0.18 + 0.34 * s, 0.32 + 0.06 * (PI * (1.0 - s)).sin(), 0.26 + 0.04 * (PI * (1.0 - s)).sin()];
    }
    // Nose bridge 27-30 (30 is the tip), base row 31-35.
    for k in 0..4 {
        t[27 + k] = [0.0, 0.24 - 0.08 * k as f64, 0.30 + 0.0733333333333 * k as f64];
    }
    t[30][2] = 0.52;
    let base_x = [-0.14, -0.07, 0.0, 0.07, 0.14];
    let base_y = [-0.11, -0.105, -0.10, -0.105, -0.11];
    let base_z = [0.38, 0.42, 0.46, 0.42, 0.38];
    for k in 0..5 {
        t[31 + k] = [base_x[k], base_y[k], base_z[k]];
    }
    // Eyes: hexagons, outer corner first on the left eye, inner first on the right.
    let eye = |cx: f64, sign: f64| -> [[f64; 3]; 6] {
        [
            [cx - sign * 0.12, 0.18, 0.24],
            [cx - sign * 0.05, 0.225, 0.25],
            [cx + sign * 0.05, 0.225, 0.25],
            [cx + sign * 0.12, 0.18, 0.24],
            [cx + sign * 0.05, 0.135, 0.25],
            [cx - sign * 0.05, 0.135, 0.25],
        ]
    };
    let left = eye(-0.33, 1.0);
    // Mirrored traversal so the right eye runs inner corner -> outer corner.
    let right = eye(0.33, -1.0);
    t[36..42].copy_from_slice(&left);
    t[42..48].copy_from_slice(&right);
    // Mouth: outer ellipse of 12 points, inner ellipse of 8.
    let mouth = |rx: f64, ry: f64, z: f64, deg: f64| -> [f64; 3] {
        let a = deg.to_radians();
        [rx * a.cos(), -0.33 + ry * a.sin(), z]
    };
    for (k, deg) in (0..7).map(|k| (k, 180.0 - 30.0 * k as f64)) {
        t[48 + k] = mouth(0.19, 0.10, 0.36, deg);
    }
    for (k, deg) in (0..5).map(|k| (k, -30.0 - 30.0 * k as f64)) {
        t[55 + k] = mouth(0.19, 0.10, 0.36, deg);
    }
    for (k, deg) in (0..8).map(|k| (k, 180.0 - 45.0 * k as f64)) {
        t[60 + k] = mouth(0.12, 0.045, 0.35, deg);
    }
    t
}

/// Builds a deterministic synthetic core: the canonical neutral template plus
/// one low-frequency sinusoidal deformation mode per (expression, identity)
/// pair, amplitude 0.05 head units.
pub fn synth_core(seed: u64, n_exp: usize, n_id: usize) -> Result<BilinearCore> {
    if n_exp == 0 || n_id == 0 {
        return Err(Error::InvalidArgument(format!(
            "core dimensions must be positive, got ({n_exp}, {n_id})"
        )));
    }
    let template = canonical_template();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = vec![0.0f64; LANDMARK_DIM * n_exp * n_id];
    let tau = std::f64::consts::TAU;
    for k in 0..n_id {
        for j in 0..n_exp {
            let freq: [f64; 3] = std::array::from_fn(|_| rng.random_range(1..=4u32) as f64);
            let phase: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..tau));
            let base = LANDMARK_DIM * (j + n_exp * k);
            for l in 0..NUM_LANDMARKS {
                for c in 0..3 {
                    let wobble = 0.05 * (tau * freq[c] * l as f64 / 68.0 + phase[c]).sin();
                    data[base + 3 * l + c] = template[l][c] + wobble;
                }
            }
        }
    }
    BilinearCore::new(data, n_exp, n_id)
}
