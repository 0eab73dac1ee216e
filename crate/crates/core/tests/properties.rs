//! Property tests for the crate's contract invariants.

use facevol_core::face_model::{
    generate_landmarks, synth_core, ExpressionWeights, IdentityWeights, TransformMatrix,
    LANDMARK_DIM,
};
use facevol_core::field::{FieldSample, RadianceField, SyntheticHeadField, VoxelGridField};
use facevol_core::fitting::{triangulate, wing_loss, CameraPose, WingParams};
use facevol_core::sampling::{sample_volume, OrientedBox};
use facevol_core::tps::fit_tps;
use nalgebra::{Matrix3, Point3, Vector3};
use proptest::prelude::*;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_weight() -> impl Strategy<Value = f64> {
    prop_oneof![Just(0.0), -2.0..2.0f64]
}

proptest! {
    #[test]
    fn generation_is_bilinear_in_each_weight_vector(
        seed in 0u64..1000,
        alpha in prop_oneof![Just(-1.0f64), Just(2.5), -3.0..3.0f64],
        id in prop::collection::vec(small_weight(), 3),
        exp in prop::collection::vec(small_weight(), 4),
    ) {
        let core = synth_core(seed, 4, 3).unwrap();
        let base = generate_landmarks(
            &core,
            &IdentityWeights(id.clone()),
            &ExpressionWeights(exp.clone()),
        ).unwrap().to_flat();

        let scaled_id = generate_landmarks(
            &core,
            &IdentityWeights(id.iter().map(|v| alpha * v).collect()),
            &ExpressionWeights(exp.clone()),
        ).unwrap().to_flat();
        let scaled_exp = generate_landmarks(
            &core,
            &IdentityWeights(id),
            &ExpressionWeights(exp.iter().map(|v| alpha * v).collect()),
        ).unwrap().to_flat();

        for i in 0..LANDMARK_DIM {
            let want = alpha * base[i];
            let tol = 1e-12 * want.abs().max(1.0);
            prop_assert!((scaled_id[i] - want).abs() <= tol);
            prop_assert!((scaled_exp[i] - want).abs() <= tol);
        }
    }

    #[test]
    fn weight_scale_ambiguity_cancels(
        seed in 0u64..1000,
        alpha in prop_oneof![Just(-2.0f64), 0.1..4.0f64],
    ) {
        let core = synth_core(seed, 3, 3).unwrap();
        let id = IdentityWeights(vec![0.8, 0.3, -0.4]);
        let exp = ExpressionWeights(vec![1.0, 0.2, 0.1]);
        let a = generate_landmarks(&core, &id, &exp).unwrap().to_flat();
        let b = generate_landmarks(
            &core,
            &IdentityWeights(id.0.iter().map(|v| alpha * v).collect()),
            &ExpressionWeights(exp.0.iter().map(|v| v / alpha).collect()),
        ).unwrap().to_flat();
        for i in 0..LANDMARK_DIM {
            prop_assert!((a[i] - b[i]).abs() <= 1e-10 * a[i].abs().max(1.0));
        }
    }

    #[test]
    fn transform_composition_is_associative_on_landmarks(
        lin1 in prop::array::uniform9(-1.5..1.5f64),
        lin2 in prop::array::uniform9(-1.5..1.5f64),
        t1 in prop::array::uniform3(-1.0..1.0f64),
        t2 in prop::array::uniform3(-1.0..1.0f64),
    ) {
        let a = TransformMatrix::from_parts(
            Matrix3::from_row_slice(&lin1),
            Vector3::from_row_slice(&t1),
        );
        let b = TransformMatrix::from_parts(
            Matrix3::from_row_slice(&lin2),
            Vector3::from_row_slice(&t2),
        );
        let core = synth_core(3, 2, 2).unwrap();
        let lm = generate_landmarks(
            &core,
            &IdentityWeights::one_hot(2, 0),
            &ExpressionWeights::one_hot(2, 0),
        ).unwrap();
        let seq = b.apply(&a.apply(&lm));
        let fused = a.then(&b).apply(&lm);
        for (x, y) in seq.points().iter().zip(fused.points()) {
            prop_assert!((x - y).norm() < 1e-10 * x.coords.norm().max(1.0));
        }
    }

    #[test]
    fn wing_loss_is_nonnegative_even_and_monotone(
        omega in 0.5..20.0f64,
        epsilon in 0.05..5.0f64,
        d in 0.0..40.0f64,
        bump in 0.0..5.0f64,
    ) {
        let p = WingParams::new(omega, epsilon).unwrap();
        let pred = vec![d, -d];
        let gt = vec![0.0, 0.0];
        let v = wing_loss(&pred, &gt, &p).unwrap();
        prop_assert!(v >= 0.0);
        // Even: |d| and |-d| contribute identically.
        let v_pos = wing_loss(&[d], &[0.0], &p).unwrap();
        let v_neg = wing_loss(&[-d], &[0.0], &p).unwrap();
        prop_assert_eq!(v_pos, v_neg);
        // Monotone in the deviation magnitude.
        let v_larger = wing_loss(&[d + bump], &[0.0], &p).unwrap();
        prop_assert!(v_larger >= v_pos);
        // Zero iff equal.
        if d > 0.0 {
            prop_assert!(v_pos > 0.0);
        }
    }

    #[test]
    fn tps_affine_maps_need_no_kernel_weights(
        n in 6usize..20,
        seed in 0u64..500,
        b in prop::array::uniform9(-1.0..1.0f64),
        c in prop::array::uniform3(-1.0..1.0f64),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let src: Vec<Point3<f64>> = (0..n)
            .map(|_| Point3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ))
            .collect();
        let lin = Matrix3::from_row_slice(&b);
        let off = Vector3::from_row_slice(&c);
        let dst: Vec<Point3<f64>> = src.iter().map(|p| Point3::from(lin * p.coords + off)).collect();
        let warp = match fit_tps(&src, &dst) {
            Ok(w) => w,
            // Ill-conditioned draws (near-coplanar clouds) are legitimately rejected.
            Err(_) => return Ok(()),
        };
        for w in warp.weights() {
            prop_assert!(w.norm() < 1e-8, "kernel weight {:e}", w.norm());
        }
        prop_assert!((warp.affine_linear() - lin).amax() < 1e-8);
        prop_assert!((warp.affine_translation() - off).amax() < 1e-8);
    }

    #[test]
    fn core_files_round_trip_bit_exactly(
        seed in 0u64..10_000,
        n_exp in 1usize..6,
        n_id in 1usize..6,
    ) {
        let core = synth_core(seed, n_exp, n_id).unwrap();
        let mut bytes = Vec::new();
        core.write_to(&mut bytes).unwrap();
        let loaded = facevol_core::BilinearCore::read_from(&mut bytes.as_slice()).unwrap();
        prop_assert_eq!(&core, &loaded);
        let mut rewritten = Vec::new();
        loaded.write_to(&mut rewritten).unwrap();
        prop_assert_eq!(bytes, rewritten);
    }

    #[test]
    fn triangulation_is_invariant_to_camera_scaling(
        seed in 0u64..500,
        lambda in prop_oneof![Just(-3.0f64), 0.01..100.0f64],
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = Point3::new(
            rng.random_range(-0.5..0.5),
            rng.random_range(-0.5..0.5),
            rng.random_range(-0.5..0.5),
        );
        let mut obs = Vec::new();
        let mut scaled = Vec::new();
        for i in 0..3 {
            let theta = std::f64::consts::TAU * (i as f64 / 3.0) + rng.random_range(0.0..0.5);
            let eye = Point3::new(4.0 * theta.cos(), rng.random_range(-1.0..1.0), 4.0 * theta.sin());
            let z = (Point3::origin() - eye).normalize();
            let x = Vector3::y().cross(&z).normalize();
            let y = z.cross(&x);
            let r = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
            let cam = CameraPose::from_krt(1000.0, [500.0, 500.0], r, -r * eye.coords).unwrap();
            let uv = cam.project(&p).unwrap();
            obs.push((cam, uv));
            let scaled_cam = if i == 1 {
                CameraPose::new(cam.matrix() * lambda).unwrap()
            } else {
                cam
            };
            scaled.push((scaled_cam, uv));
        }
        let a = triangulate(&obs).unwrap().point;
        let b = triangulate(&scaled).unwrap().point;
        prop_assert!((a - b).norm() < 1e-9, "scaling moved point by {:e}", (a - b).norm());
    }
}

// Heavier sampled-volume properties run with fewer proptest cases.
proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn thresholded_volumes_are_dichotomous_and_monotone(
        seed in 0u64..200,
        res in 6usize..20,
        threshold in 1.0..60.0f64,
    ) {
        let core = synth_core(seed, 3, 2).unwrap();
        let lm = generate_landmarks(
            &core,
            &IdentityWeights::one_hot(2, 0),
            &ExpressionWeights::one_hot(3, 0),
        ).unwrap();
        let head = SyntheticHeadField::new(&lm, seed).unwrap();
        let b = OrientedBox::axis_aligned(Point3::origin(), 1.0).unwrap();
        let v = sample_volume(&head, &b, res, threshold, false).unwrap();
        let n = res * res * res;
        for i in 0..n {
            let d = v.data()[3 * n + i];
            prop_assert!(d == 0.0 || d == 1.0, "density {d} not binarized");
            if d == 0.0 {
                for c in 0..3 {
                    prop_assert_eq!(v.data()[c * n + i], 0.0);
                }
            }
        }
        let higher = sample_volume(&head, &b, res, threshold + 10.0, false).unwrap();
        prop_assert!(higher.occupied_count() <= v.occupied_count());
    }
}

/// A field affine in position; trilinear interpolation must reproduce it
/// exactly at interior points.
struct AffineField {
    grad: [Vector3<f64>; 4],
    offset: [f64; 4],
}

impl RadianceField for AffineField {
    fn query(&self, p: &Point3<f64>, _v: &Vector3<f64>) -> FieldSample {
        let val = |i: usize| self.grad[i].dot(&p.coords) + self.offset[i];
        FieldSample {
            rgb: [val(0), val(1), val(2)],
            density: val(3),
        }
    }
}

#[test]
fn trilinear_interpolation_reproduces_affine_fields() {
    let mut rng = ChaCha8Rng::seed_from_u64(88);
    for _ in 0..20 {
        // Coefficients chosen so rgb stays inside [0, 1] over the whole box;
        // the FieldSample gamut clamp would otherwise break affinity.
        let field = AffineField {
            grad: std::array::from_fn(|_| {
                Vector3::new(
                    rng.random_range(-0.05..0.05),
                    rng.random_range(-0.05..0.05),
                    rng.random_range(-0.05..0.05),
                )
            }),
            offset: std::array::from_fn(|_| rng.random_range(0.4..0.6)),
        };
        let dims = [
            rng.random_range(2..8usize),
            rng.random_range(2..8usize),
            rng.random_range(2..8usize),
        ];
        let origin = Point3::new(
            rng.random_range(-1.0..0.0),
            rng.random_range(-1.0..0.0),
            rng.random_range(-1.0..0.0),
        );
        let extent = Vector3::new(
            rng.random_range(0.5..2.0),
            rng.random_range(0.5..2.0),
            rng.random_range(0.5..2.0),
        );
        let grid = facevol_core::field::bake_to_grid(&field, origin, extent, dims).unwrap();
        let view = Vector3::new(0.0, 0.0, -1.0);
        for _ in 0..50 {
            let p = Point3::new(
                origin.x + rng.random_range(0.0..1.0) * extent.x,
                origin.y + rng.random_range(0.0..1.0) * extent.y,
                origin.z + rng.random_range(0.0..1.0) * extent.z,
            );
            let direct = field.query(&p, &view);
            let interp = grid.query(&p, &view);
            assert!((interp.density - direct.density).abs() < 1e-12);
            for c in 0..3 {
                assert!((interp.rgb[c] - direct.rgb[c]).abs() < 1e-12);
            }
        }
    }
}

/// Composing the field with a rotation and counter-rotating the box leaves
/// the sampled volume unchanged voxel-for-voxel.
struct RotatedField<'a, F> {
    inner: &'a F,
    rotation: Matrix3<f64>,
}

impl<F: RadianceField> RadianceField for RotatedField<'_, F> {
    fn query(&self, p: &Point3<f64>, v: &Vector3<f64>) -> FieldSample {
        self.inner
            .query(&Point3::from(self.rotation * p.coords), &(self.rotation * v))
    }
}

#[test]
fn sampling_is_box_rotation_equivariant() {
    let core = synth_core(64, 3, 2).unwrap();
    let lm = generate_landmarks(
        &core,
        &IdentityWeights::one_hot(2, 1),
        &ExpressionWeights::one_hot(3, 1),
    )
    .unwrap();
    let head = SyntheticHeadField::new(&lm, 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for trial in 0..4 {
        // A random rotation via normalized quaternion from raw draws.
        let q = nalgebra::UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        ));
        let r = q.to_rotation_matrix().into_inner();
        let base_box = OrientedBox::axis_aligned(Point3::new(0.1, -0.05, 0.2), 0.9).unwrap();
        let rotated_field = RotatedField {
            inner: &head,
            rotation: r,
        };
        let counter_box = OrientedBox::new(
            Point3::from(r.transpose() * base_box.center().coords),
            r.transpose() * base_box.rotation(),
            base_box.half_extent(),
        )
        .unwrap();
        let direct = sample_volume(&head, &base_box, 16, 20.0, false).unwrap();
        let rotated = sample_volume(&rotated_field, &counter_box, 16, 20.0, false).unwrap();
        let max_diff = direct
            .data()
            .iter()
            .zip(rotated.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_diff < 1e-9, "trial {trial}: max voxel diff {max_diff}");
    }
}

/// Loaded grids answer queries identically to the grid that wrote the file.
#[test]
fn grid_round_trip_preserves_queries() {
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let dims = [5, 4, 6];
    let n = dims[0] * dims[1] * dims[2];
    // f32-exact payload so the f32 file format is lossless here.
    let data: Vec<f64> = (0..4 * n).map(|i| (i % 97) as f64 / 32.0).collect();
    let grid = VoxelGridField::new(
        dims,
        Point3::new(-0.5, -0.25, 0.0),
        Vector3::new(1.0, 0.75, 1.5),
        data,
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("g.flnv");
    grid.save(&path).unwrap();
    let loaded = VoxelGridField::load(&path).unwrap();
    let view = Vector3::new(0.0, 0.0, -1.0);
    for _ in 0..100 {
        let p = Point3::new(
            rng.random_range(-0.6..0.6),
            rng.random_range(-0.3..0.6),
            rng.random_range(-0.1..1.6),
        );
        assert_eq!(grid.query(&p, &view), loaded.query(&p, &view));
    }
}
