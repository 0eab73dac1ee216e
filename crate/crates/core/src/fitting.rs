//! Model fitting and evaluation.
//!
//! The Wing loss is logarithmic for small residuals and linear beyond
//! `omega`, with the constant `C = omega - omega ln(1 + omega/epsilon)`
//! keeping the two branches continuous. Fitting minimizes the mean Wing
//! loss between observed landmarks and `P [C x w_id x w_exp; 1]` over the
//! weight vectors and the full 3x4 transform, using Levenberg-damped
//! Gauss-Newton steps on the piecewise-smooth objective with a gradient
//! fallback when damping saturates. Steps are accepted only on improvement,
//! so the reported loss trace is monotone nonincreasing.
//!
//! Weight vectors carry a scale ambiguity (`(a w_id, w_exp / a)` produces
//! the same face), so accuracy is always judged on landmarks, never on
//! recovered weights.

use nalgebra::{DMatrix, DVector, Matrix3, Matrix3x4, Point3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::face_model::{
    contract_expression, contract_identity, BilinearCore, ExpressionWeights, IdentityWeights,
    Landmarks68, TransformMatrix, LANDMARK_DIM,
};
use crate::sampling::regions;

/// Wing loss parameters. The linear/log switch `omega` and log width
/// `epsilon`; the continuity constant is always derived from them.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WingParams {
    omega: f64,
    epsilon: f64,
}

impl WingParams {
    pub fn new(omega: f64, epsilon: f64) -> Result<Self> {
        if !(omega > 0.0 && omega.is_finite()) || !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "wing parameters must be positive, got omega={omega}, epsilon={epsilon}"
            )));
        }
        Ok(Self { omega, epsilon })
    }

    pub fn omega(&self) -> f64 {
        self.omega
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    /// `C = omega - omega ln(1 + omega/epsilon)`.
    pub fn continuity_constant(&self) -> f64 {
        self.omega - self.omega * (1.0 + self.omega / self.epsilon).ln()
    }

    /// Per-coordinate wing value of an absolute deviation `d`.
    pub fn value(&self, d: f64) -> f64 {
        if d < self.omega {
            self.omega * (1.0 + d / self.epsilon).ln()
        } else {
            d - self.continuity_constant()
        }
    }

    /// Derivative of [`WingParams::value`] with respect to `d` (for `d > 0`).
    pub fn derivative(&self, d: f64) -> f64 {
        if d < self.omega {
            self.omega / (self.epsilon + d)
        } else {
            1.0
        }
    }
}

impl Default for WingParams {
    fn default() -> Self {
        Self {
            omega: 10.0,
            epsilon: 2.0,
        }
    }
}

fn wing_mean(pred: &[f64], gt: &[f64], p: &WingParams) -> f64 {
    let n = pred.len() as f64;
    pred.iter()
        .zip(gt)
        .map(|(a, b)| p.value((a - b).abs()))
        .sum::<f64>()
        / n
}

/// Mean per-coordinate Wing loss between two equal-length vectors.
pub fn wing_loss(pred: &[f64], gt: &[f64], p: &WingParams) -> Result<f64> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::DimensionMismatch {
            context: "wing loss operands",
            expected: gt.len(),
            got: pred.len(),
        });
    }
    Ok(wing_mean(pred, gt, p))
}

/// Analytic gradient of [`wing_loss`] with respect to `pred`; the
/// subgradient at a zero deviation is taken as 0.
pub fn wing_gradient(pred: &[f64], gt: &[f64], p: &WingParams) -> Result<Vec<f64>> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::DimensionMismatch {
            context: "wing gradient operands",
            expected: gt.len(),
            got: pred.len(),
        });
    }
    let n = pred.len() as f64;
    Ok(pred
        .iter()
        .zip(gt)
        .map(|(a, b)| {
            let r = a - b;
            if r == 0.0 {
                0.0
            } else {
                r.signum() * p.derivative(r.abs()) / n
            }
        })
        .collect())
}

/// Convergence controls for [`fit_landmarks`].
#[derive(Debug, Clone, Copy)]
pub struct FitOptions {
    pub max_iterations: usize,
    pub gradient_tolerance: f64,
    pub step_tolerance: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            gradient_tolerance: 1e-9,
            step_tolerance: 1e-12,
        }
    }
}

/// A landmark-fitting problem: observed landmarks, the core to explain them
/// with, initial parameters, and loss/convergence settings.
#[derive(Debug, Clone)]
pub struct FitProblem<'a> {
    core: &'a BilinearCore,
    observed: &'a Landmarks68,
    init_identity: IdentityWeights,
    init_expression: ExpressionWeights,
    init_transform: TransformMatrix,
    wing: WingParams,
    options: FitOptions,
}

impl<'a> FitProblem<'a> {
    /// Problem with the default deterministic start: one-hot weights on the
    /// first identity and expression modes, identity transform.
    pub fn new(core: &'a BilinearCore, observed: &'a Landmarks68) -> Self {
        Self {
            init_identity: IdentityWeights::one_hot(core.n_id(), 0),
            init_expression: ExpressionWeights::one_hot(core.n_exp(), 0),
            init_transform: TransformMatrix::identity(),
            core,
            observed,
            wing: WingParams::default(),
            options: FitOptions::default(),
        }
    }

    pub fn with_initial(
        mut self,
        id: IdentityWeights,
        exp: ExpressionWeights,
        transform: TransformMatrix,
    ) -> Self {
        self.init_identity = id;
        self.init_expression = exp;
        self.init_transform = transform;
        self
    }

    pub fn with_wing(mut self, wing: WingParams) -> Self {
        self.wing = wing;
        self
    }

    pub fn with_options(mut self, options: FitOptions) -> Self {
        self.options = options;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.init_identity.0.len() != self.core.n_id() {
            return Err(Error::DimensionMismatch {
                context: "initial identity weights",
                expected: self.core.n_id(),
                got: self.init_identity.0.len(),
            });
        }
        if self.init_expression.0.len() != self.core.n_exp() {
            return Err(Error::DimensionMismatch {
                context: "initial expression weights",
                expected: self.core.n_exp(),
                got: self.init_expression.0.len(),
            });
        }
        if self.init_transform.linear().determinant().abs() < 1e-12 {
            return Err(Error::Singular("initial transform linear part"));
        }
        Ok(())
    }
}

/// Fit output: final parameters, fitted landmarks, and the accepted-loss
/// trace. `converged` is false when the iteration budget ran out or no
/// descent step could be found while the gradient was still large.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub identity: IdentityWeights,
    pub expression: ExpressionWeights,
    pub transform: TransformMatrix,
    pub landmarks: Landmarks68,
    pub trace: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
}

/// Predicted flat landmark vector `P [C x w_id x w_exp; 1]` for a parameter
/// assignment, xyz-interleaved.
pub fn model_prediction(
    core: &BilinearCore,
    id: &IdentityWeights,
    exp: &ExpressionWeights,
    transform: &TransformMatrix,
) -> Result<Vec<f64>> {
    let lm = crate::face_model::generate_landmarks(core, id, exp)?;
    Ok(transform.apply(&lm).to_flat())
}

/// Jacobian of [`model_prediction`] with respect to the parameter vector
/// `[w_id, w_exp, P row-major]`, shape 204 x (n_id + n_exp + 12).
pub fn model_jacobian(
    core: &BilinearCore,
    id: &IdentityWeights,
    exp: &ExpressionWeights,
    transform: &TransformMatrix,
) -> Result<DMatrix<f64>> {
    let n_id = core.n_id();
    let n_exp = core.n_exp();
    if id.0.len() != n_id || exp.0.len() != n_exp {
        return Err(Error::DimensionMismatch {
            context: "jacobian weights",
            expected: n_id + n_exp,
            got: id.0.len() + exp.0.len(),
        });
    }
    let m = n_id + n_exp + 12;
    let p = transform.matrix();

    // Landmark bases with one weight vector contracted away.
    let g = contract_expression(core, &exp.0); // d V / d id_k
    let h = contract_identity(core, &id.0); // d V / d exp_j
    let v: Vec<f64> = {
        let mut v = vec![0.0; LANDMARK_DIM];
        for (k, wk) in id.0.iter().enumerate() {
            for (i, vi) in v.iter_mut().enumerate() {
                *vi += wk * g[i + LANDMARK_DIM * k];
            }
        }
        v
    };

    let mut j = DMatrix::zeros(LANDMARK_DIM, m);
    for l in 0..LANDMARK_DIM / 3 {
        for a in 0..3 {
            let row = 3 * l + a;
            for k in 0..n_id {
                let mut acc = 0.0;
                for b in 0..3 {
                    acc += p[(a, b)] * g[3 * l + b + LANDMARK_DIM * k];
                }
                j[(row, k)] = acc;
            }
            for jj in 0..n_exp {
                let mut acc = 0.0;
                for b in 0..3 {
                    acc += p[(a, b)] * h[3 * l + b + LANDMARK_DIM * jj];
                }
                j[(row, n_id + jj)] = acc;
            }
            // d pred / d P[a, b] = V_b for the linear block, 1 for translation.
            for b in 0..3 {
                j[(row, n_id + n_exp + 4 * a + b)] = v[3 * l + b];
            }
            j[(row, n_id + n_exp + 4 * a + 3)] = 1.0;
        }
    }
    Ok(j)
}

fn unpack(theta: &DVector<f64>, n_id: usize, n_exp: usize) -> (IdentityWeights, ExpressionWeights, TransformMatrix) {
    let id = IdentityWeights(theta.as_slice()[..n_id].to_vec());
    let exp = ExpressionWeights(theta.as_slice()[n_id..n_id + n_exp].to_vec());
    let mut m = Matrix3x4::zeros();
    for r in 0..3 {
        for c in 0..4 {
            m[(r, c)] = theta[n_id + n_exp + 4 * r + c];
        }
    }
    (id, exp, TransformMatrix::new(m).expect("finite parameters"))
}

/// Floor on the residual magnitude used by the IRLS weights; keeps the
/// reweighting bounded once coordinates are essentially interpolated.
const IRLS_FLOOR: f64 = 1e-9;
const MAX_DAMPING: f64 = 1e8;

/// Minimizes the mean Wing loss over `(w_id, w_exp, P)`.
pub fn fit_landmarks(problem: &FitProblem) -> Result<FitResult> {
    problem.validate()?;
    let core = problem.core;
    let (n_id, n_exp) = (core.n_id(), core.n_exp());
    let m = n_id + n_exp + 12;
    let obs = problem.observed.to_flat();
    let wing = &problem.wing;
    let opts = &problem.options;

    let mut theta = DVector::zeros(m);
    for (i, v) in problem.init_identity.0.iter().enumerate() {
        theta[i] = *v;
    }
    for (i, v) in problem.init_expression.0.iter().enumerate() {
        theta[n_id + i] = *v;
    }
    for (i, v) in problem.init_transform.to_row_major().iter().enumerate() {
        theta[n_id + n_exp + i] = *v;
    }

    let predict = |theta: &DVector<f64>| -> Result<Vec<f64>> {
        let (id, exp, t) = unpack(theta, n_id, n_exp);
        model_prediction(core, &id, &exp, &t)
    };

    let mut pred = predict(&theta)?;
    let mut loss = wing_mean(&pred, &obs, wing);
    let mut trace = vec![loss];
    let mut lambda = 1e-3;
    let mut converged = false;
    let mut iterations = 0;

    for _ in 0..opts.max_iterations {
        iterations += 1;
        // The objective is nonnegative, so an exact zero is a global
        // minimum even though the kink keeps the gradient from vanishing.
        if loss == 0.0 {
            converged = true;
            break;
        }
        let (id, exp, t) = unpack(&theta, n_id, n_exp);
        let jac = model_jacobian(core, &id, &exp, &t)?;
        let grad204 = DVector::from_vec(wing_gradient(&pred, &obs, wing)?);
        let grad = jac.transpose() * &grad204;
        if grad.amax() < opts.gradient_tolerance {
            converged = true;
            break;
        }

        // IRLS system: weights rho'(d)/max(d, floor) reproduce the wing
        // gradient while shaping curvature like Gauss-Newton.
        let n = LANDMARK_DIM as f64;
        let mut weighted_jac = jac.clone();
        let mut weighted_res = DVector::zeros(LANDMARK_DIM);
        for i in 0..LANDMARK_DIM {
            let r = pred[i] - obs[i];
            let d = r.abs();
            let w = wing.derivative(d) / d.max(IRLS_FLOOR) / n;
            let sw = w.sqrt();
            for c in 0..m {
                weighted_jac[(i, c)] *= sw;
            }
            weighted_res[i] = sw * r;
        }
        let a = weighted_jac.transpose() * &weighted_jac;
        let g = weighted_jac.transpose() * &weighted_res;
        let max_diag = (0..m).map(|i| a[(i, i)]).fold(0.0f64, f64::max);

        let mut accepted = false;
        while lambda <= MAX_DAMPING {
            let mut h = a.clone();
            for i in 0..m {
                h[(i, i)] += lambda * a[(i, i)].max(1e-12 * max_diag.max(1e-300));
            }
            let delta = match h.clone().cholesky() {
                Some(ch) => ch.solve(&(-&g)),
                None => match h.lu().solve(&(-&g)) {
                    Some(d) => d,
                    None => {
                        lambda *= 10.0;
                        continue;
                    }
                },
            };
            let cand = &theta + &delta;
            let cand_pred = predict(&cand)?;
            let cand_loss = wing_mean(&cand_pred, &obs, wing);
            if cand_loss.is_finite() && cand_loss < loss {
                theta = cand;
                pred = cand_pred;
                loss = cand_loss;
                trace.push(loss);
                lambda = (lambda / 3.0).max(1e-12);
                accepted = true;
                if delta.norm() < opts.step_tolerance {
                    converged = true;
                }
                break;
            }
            lambda *= 10.0;
        }

        if !accepted {
            // Damping saturated: fall back to a backtracking gradient step.
            let gnorm = grad.norm();
            let mut t_step = 1.0 / gnorm.max(1.0);
            for _ in 0..60 {
                let cand = &theta - &grad * t_step;
                let cand_pred = predict(&cand)?;
                let cand_loss = wing_mean(&cand_pred, &obs, wing);
                if cand_loss.is_finite() && cand_loss < loss {
                    theta = cand;
                    pred = cand_pred;
                    loss = cand_loss;
                    trace.push(loss);
                    lambda = 1e2;
                    accepted = true;
                    break;
                }
                t_step *= 0.5;
            }
        }
        if !accepted || converged {
            break;
        }
    }

    let (identity, expression, transform) = unpack(&theta, n_id, n_exp);
    let landmarks = Landmarks68::from_flat(&pred)?;
    Ok(FitResult {
        identity,
        expression,
        transform,
        landmarks,
        trace,
        converged,
        iterations,
    })
}

/// A pinhole camera as a composed 3x4 projection matrix in pixel units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraPose {
    m: Matrix3x4<f64>,
}

impl CameraPose {
    pub fn new(m: Matrix3x4<f64>) -> Result<Self> {
        if !m.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidArgument(
                "camera matrix has non-finite entries".into(),
            ));
        }
        if m.fixed_view::<3, 3>(0, 0).determinant().abs() < 1e-15 {
            return Err(Error::Singular("camera matrix left 3x3 block"));
        }
        Ok(Self { m })
    }

    /// `K [R | t]` with focal length `f`, principal point `c`, and the
    /// world-to-camera rigid transform.
    pub fn from_krt(
        focal: f64,
        principal: [f64; 2],
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
    ) -> Result<Self> {
        let k = Matrix3::new(
            focal,
            0.0,
            principal[0],
            0.0,
            focal,
            principal[1],
            0.0,
            0.0,
            1.0,
        );
        let mut rt = Matrix3x4::zeros();
        rt.fixed_view_mut::<3, 3>(0, 0).copy_from(&rotation);
        rt.set_column(3, &translation);
        Self::new(k * rt)
    }

    pub fn matrix(&self) -> &Matrix3x4<f64> {
        &self.m
    }

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

    /// Pixel projection; `None` for points on the principal plane.
    pub fn project(&self, p: &Point3<f64>) -> Option<[f64; 2]> {
        let h = self.m * nalgebra::Vector4::new(p.x, p.y, p.z, 1.0);
        if h.z.abs() < 1e-12 {
            return None;
        }
        Some([h.x / h.z, h.y / h.z])
    }
}

/// DLT triangulation result.
#[derive(Debug, Clone, Copy)]
pub struct Triangulated {
    pub point: Point3<f64>,
    /// RMS pixel reprojection error over the input views.
    pub reprojection_rms: f64,
}

/// Recovers a 3D point from two or more pixel observations by the
/// homogeneous DLT system, solved via the smallest singular vector.
pub fn triangulate(observations: &[(CameraPose, [f64; 2])]) -> Result<Triangulated> {
    let n = observations.len();
    if n < 2 {
        return Err(Error::InsufficientViews(n));
    }
    let mut a = DMatrix::zeros(2 * n, 4);
    for (i, (cam, uv)) in observations.iter().enumerate() {
        let m = cam.matrix();
        for c in 0..4 {
            a[(2 * i, c)] = uv[0] * m[(2, c)] - m[(0, c)];
            a[(2 * i + 1, c)] = uv[1] * m[(2, c)] - m[(1, c)];
        }
    }
    // Row normalization: pure conditioning, the null space is unchanged.
    for i in 0..2 * n {
        let norm = a.row(i).norm();
        if norm > 0.0 {
            for c in 0..4 {
                a[(i, c)] /= norm;
            }
        }
    }
    let svd = a.svd(false, true);
    let sv = &svd.singular_values;
    if sv[2] <= 1e-10 * sv[0] {
        return Err(Error::Singular("triangulation system is rank-deficient"));
    }
    let v_t = svd.v_t.ok_or(Error::Singular("triangulation SVD"))?;
    let x = v_t.row(3);
    let w = x[3];
    let xyz_norm = (x[0] * x[0] + x[1] * x[1] + x[2] * x[2]).sqrt();
    if w.abs() <= 1e-12 * xyz_norm.max(1.0) {
        return Err(Error::Singular("triangulated point at infinity"));
    }
    let point = Point3::new(x[0] / w, x[1] / w, x[2] / w);

    let mut sq_sum = 0.0;
    for (cam, uv) in observations {
        match cam.project(&point) {
            Some([u, v]) => {
                sq_sum += (u - uv[0]).powi(2) + (v - uv[1]).powi(2);
            }
            None => {
                sq_sum = f64::INFINITY;
            }
        }
    }
    Ok(Triangulated {
        point,
        reprojection_rms: (sq_sum / n as f64).sqrt(),
    })
}

/// Mean Wing losses for the whole face and the mouth/eyes/nose regions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub whole_face: f64,
    pub mouth: f64,
    pub eyes: f64,
    pub nose: f64,
}

/// Region-wise Wing metric between predicted and ground-truth landmarks.
pub fn evaluate(pred: &Landmarks68, gt: &Landmarks68, p: &WingParams) -> EvalReport {
    let pf = pred.to_flat();
    let gf = gt.to_flat();
    let region = |indices: &[usize]| -> f64 {
        let mut a = Vec::with_capacity(indices.len() * 3);
        let mut b = Vec::with_capacity(indices.len() * 3);
        for &i in indices {
            a.extend_from_slice(&pf[3 * i..3 * i + 3]);
            b.extend_from_slice(&gf[3 * i..3 * i + 3]);
        }
        wing_mean(&a, &b, p)
    };
    EvalReport {
        whole_face: wing_mean(&pf, &gf, p),
        mouth: region(regions::MOUTH),
        eyes: region(regions::EYES),
        nose: region(regions::NOSE),
    }
}
