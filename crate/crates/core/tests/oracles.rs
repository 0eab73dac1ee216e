//! Independent-oracle checks: every numerical path is compared against a
//! brute-force or closed-form computation that shares no code with it.

use facevol_core::face_model::{
    generate_landmarks, BilinearCore, ExpressionWeights, IdentityWeights, TransformMatrix,
    LANDMARK_DIM,
};
use facevol_core::fitting::{
    model_jacobian, model_prediction, triangulate, wing_gradient, wing_loss, CameraPose,
    WingParams,
};
use facevol_core::tps::{fit_tps, TpsSystem};
use nalgebra::{Matrix3, Point3, Vector3};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Triple-loop contraction, the oracle for bilinear landmark generation.
fn brute_force_landmarks(core: &BilinearCore, id: &[f64], exp: &[f64]) -> Vec<f64> {
    let mut flat = vec![0.0f64; LANDMARK_DIM];
    for (i, f) in flat.iter_mut().enumerate() {
        let mut acc = 0.0;
        for (k, wk) in id.iter().enumerate() {
            for (j, wj) in exp.iter().enumerate() {
                acc += core.get(i, j, k) * wj * wk;
            }
        }
        *f = acc;
    }
    flat
}

fn random_core(rng: &mut ChaCha8Rng, n_exp: usize, n_id: usize) -> BilinearCore {
    let data = (0..LANDMARK_DIM * n_exp * n_id)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    BilinearCore::new(data, n_exp, n_id).unwrap()
}

#[test]
fn bilinear_generation_matches_brute_force_on_random_cores() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for _ in 0..100 {
        let n_exp = rng.random_range(1..=8usize);
        let n_id = rng.random_range(1..=8usize);
        let core = random_core(&mut rng, n_exp, n_id);
        let id: Vec<f64> = (0..n_id).map(|_| rng.random_range(-2.0..2.0)).collect();
        let exp: Vec<f64> = (0..n_exp).map(|_| rng.random_range(-2.0..2.0)).collect();
        let got = generate_landmarks(
            &core,
            &IdentityWeights(id.clone()),
            &ExpressionWeights(exp.clone()),
        )
        .unwrap()
        .to_flat();
        let want = brute_force_landmarks(&core, &id, &exp);
        for (g, w) in got.iter().zip(&want) {
            assert!(
                (g - w).abs() <= 1e-12 * w.abs().max(1.0),
                "contraction mismatch: {g} vs {w}"
            );
        }
    }
}

#[test]
fn tps_solver_matches_dense_inverse() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..40 {
        let n = rng.random_range(5..=12usize);
        let src: Vec<Point3<f64>> = (0..n)
            .map(|_| {
                Point3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                )
            })
            .collect();
        let dst: Vec<Point3<f64>> = (0..n)
            .map(|_| {
                Point3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                )
            })
            .collect();
        let warp = fit_tps(&src, &dst).unwrap();

        let sys = TpsSystem::build(&src, &dst).unwrap();
        let inv = sys
            .block_matrix()
            .clone()
            .try_inverse()
            .expect("oracle inverse");
        let x = inv * sys.rhs();

        let scale = x.amax().max(1.0);
        for i in 0..n {
            let w = warp.weights()[i];
            for c in 0..3 {
                assert!(
                    (w[c] - x[(i, c)]).abs() <= 1e-9 * scale,
                    "weight mismatch at ({i}, {c})"
                );
            }
        }
        for c in 0..3 {
            assert!((warp.affine_translation()[c] - x[(n, c)]).abs() <= 1e-9 * scale);
            for inp in 0..3 {
                assert!(
                    (warp.affine_linear()[(c, inp)] - x[(n + 1 + inp, c)]).abs() <= 1e-9 * scale
                );
            }
        }
    }
}

#[test]
fn wing_gradient_matches_central_differences_across_seeds() {
    let mut rng = ChaCha8Rng::seed_from_u64(4242);
    let h = 1e-6;
    for _ in 0..30 {
        let omega = rng.random_range(1.0..20.0);
        let epsilon = rng.random_range(0.1..5.0);
        let p = WingParams::new(omega, epsilon).unwrap();
        let pred: Vec<f64> = (0..LANDMARK_DIM)
            .map(|_| rng.random_range(-25.0..25.0))
            .collect();
        let gt: Vec<f64> = (0..LANDMARK_DIM)
            .map(|_| rng.random_range(-25.0..25.0))
            .collect();
        let grad = wing_gradient(&pred, &gt, &p).unwrap();
        for i in (0..LANDMARK_DIM).step_by(7) {
            let mut plus = pred.clone();
            let mut minus = pred.clone();
            plus[i] += h;
            minus[i] -= h;
            let fd =
                (wing_loss(&plus, &gt, &p).unwrap() - wing_loss(&minus, &gt, &p).unwrap())
                    / (2.0 * h);
            let scale = fd.abs().max(grad[i].abs()).max(1e-12);
            assert!((fd - grad[i]).abs() / scale < 1e-5);
        }
    }
}

#[test]
fn model_jacobian_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(9001);
    for _ in 0..10 {
        let n_exp = rng.random_range(2..=4usize);
        let n_id = rng.random_range(2..=4usize);
        let core = random_core(&mut rng, n_exp, n_id);
        let id = IdentityWeights((0..n_id).map(|_| rng.random_range(-1.0..1.0)).collect());
        let exp = ExpressionWeights((0..n_exp).map(|_| rng.random_range(-1.0..1.0)).collect());
        let t = TransformMatrix::from_parts(
            Matrix3::from_fn(|_, _| rng.random_range(-1.0..1.0)) + Matrix3::identity(),
            Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ),
        );
        let jac = model_jacobian(&core, &id, &exp, &t).unwrap();

        let mut theta: Vec<f64> = id.0.clone();
        theta.extend_from_slice(&exp.0);
        theta.extend_from_slice(&t.to_row_major());
        let eval = |theta: &[f64]| {
            let id = IdentityWeights(theta[..n_id].to_vec());
            let exp = ExpressionWeights(theta[n_id..n_id + n_exp].to_vec());
            let mut raw = [0.0; 12];
            raw.copy_from_slice(&theta[n_id + n_exp..]);
            let t = TransformMatrix::from_row_major(&raw).unwrap();
            model_prediction(&core, &id, &exp, &t).unwrap()
        };
        let h = 1e-6;
        for c in 0..theta.len() {
            let mut plus = theta.clone();
            let mut minus = theta.clone();
            plus[c] += h;
            minus[c] -= h;
            let fp = eval(&plus);
            let fm = eval(&minus);
            for r in (0..LANDMARK_DIM).step_by(11) {
                let fd = (fp[r] - fm[r]) / (2.0 * h);
                let scale = fd.abs().max(jac[(r, c)].abs()).max(1.0);
                assert!(
                    (fd - jac[(r, c)]).abs() / scale < 1e-5,
                    "J[{r},{c}] fd {fd} vs {}",
                    jac[(r, c)]
                );
            }
        }
    }
}

fn look_at_camera(eye: Point3<f64>, focal: f64) -> CameraPose {
    let z = (Point3::origin() - eye).normalize();
    let up = Vector3::y();
    let x = up.cross(&z).normalize();
    let y = z.cross(&x);
    let r = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
    CameraPose::from_krt(focal, [500.0, 500.0], r, -r * eye.coords).unwrap()
}

fn random_rig(rng: &mut ChaCha8Rng, views: usize) -> Vec<CameraPose> {
    (0..views)
        .map(|_| {
            let theta: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let phi: f64 = rng.random_range(-0.9..0.9);
            let eye = Point3::new(
                4.0 * phi.cos() * theta.cos(),
                4.0 * phi.sin(),
                4.0 * phi.cos() * theta.sin(),
            );
            look_at_camera(eye, 1000.0)
        })
        .collect()
}

#[test]
fn triangulation_round_trip_is_exact_on_clean_data() {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    for _ in 0..200 {
        let p = Point3::new(
            rng.random_range(-0.6..0.6),
            rng.random_range(-0.6..0.6),
            rng.random_range(-0.6..0.6),
        );
        let views = rng.random_range(2..=6usize);
        let cams = random_rig(&mut rng, views);
        let obs: Vec<_> = cams.iter().map(|c| (*c, c.project(&p).unwrap())).collect();
        let got = triangulate(&obs).unwrap();
        assert!(
            (got.point - p).norm() < 1e-9,
            "error {:e}",
            (got.point - p).norm()
        );
    }
}

#[test]
fn triangulation_with_pixel_noise_stays_accurate() {
    let mut rng = ChaCha8Rng::seed_from_u64(34);
    let mut worst = 0.0f64;
    let mut total = 0.0f64;
    let trials = 200;
    for _ in 0..trials {
        let p = Point3::new(
            rng.random_range(-0.6..0.6),
            rng.random_range(-0.6..0.6),
            rng.random_range(-0.6..0.6),
        );
        let cams = random_rig(&mut rng, 10);
        let obs: Vec<_> = cams
            .iter()
            .map(|c| {
                let [u, v] = c.project(&p).unwrap();
                // sigma = 1 px via Box-Muller
                let u1: f64 = rng.random_range(1e-12..1.0);
                let u2: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                let g0 = (-2.0 * u1.ln()).sqrt() * u2.cos();
                let g1 = (-2.0 * u1.ln()).sqrt() * u2.sin();
                (*c, [u + g0, v + g1])
            })
            .collect();
        let err = (triangulate(&obs).unwrap().point - p).norm();
        worst = worst.max(err);
        total += err;
    }
    let mean = total / trials as f64;
    assert!(mean < 0.05, "mean noisy-triangulation error {mean}");
    assert!(worst < 0.05, "worst noisy-triangulation error {worst}");
}
