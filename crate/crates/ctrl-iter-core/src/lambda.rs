//! Nonlinear deterministic value-gradient solver.
//!
//! For dynamics `A(x) + B a`, running cost `F(x) + a^T N a / 2`, and discount
//! rate α, the value gradient λ = Du solves the self-contained first-order
//! system `α λ - DA^T λ - Dλ (A - B N^{-1} B^T λ) = DF`. This module
//! represents λ by values on a collocation set with kernel interpolation and
//! computes it as the fixed point of the trajectory-integral map
//!
//! ```text
//! Γ[λ](x) = ∫_0^∞ exp(-α s) ( DF(y(s)) + DA^T(y(s)) λ(y(s)) ) ds,
//! dy/ds = A(y) - B N^{-1} B^T λ(y),  y(0) = x,
//! ```
//!
//! which contracts on the cone `{ |λ(x)| <= ϖ |x|, |Dλ| <= ν }` whenever the
//! certificate of [`crate::lqr::ConvergenceCertificate`] passes. A
//! transport-equation backend ([`policy_style_iteration`]) solves the same
//! update through the splitting module and recovers the value function.

use std::sync::Arc;

use rayon::prelude::*;
use thiserror::Error;

use crate::approx::{fit_kernel, fit_parametric, ApproxError, BasisFamily, FittedModel, KernelSpec};
use crate::lqr::{ConvergenceCertificate, LqProblem};
use crate::numerics::{
    integrate_ode, simpson_on_samples, spectral_norm, Matrix, NumericsError, OdeStepSpec,
    QuadratureSpec, Trajectory, Vector,
};
use crate::splitting::{
    solve_transport, Grid, SplitIterate, SplittingError, TransportProblem, DEFAULT_G_MIN,
};
use crate::trace::IterationTrace;

#[derive(Debug, Error)]
pub enum LambdaError {
    #[error("certificate fails: {0}")]
    CertificateFailed(String),
    #[error("dimension mismatch: {0}")]
    Dimensions(String),
    #[error("supplied modulus violated: {0}")]
    ModulusViolated(String),
    #[error("field violates the certified cone at collocation point {index}: {detail}")]
    ConeViolation { index: usize, detail: String },
    #[error("action cost must be positive definite for the closed-form minimizer")]
    ActionCostNotPd,
    #[error("line search produced non-finite values")]
    NonFiniteSearch,
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Approx(#[from] ApproxError),
    #[error(transparent)]
    Splitting(#[from] SplittingError),
}

type DynField = Arc<dyn Fn(&Vector) -> Vector + Send + Sync>;
type DynJacobian = Arc<dyn Fn(&Vector) -> Matrix + Send + Sync>;
type DynScalar = Arc<dyn Fn(&Vector) -> f64 + Send + Sync>;

/// Deterministic control problem with drift `A(x) + B a` and cost
/// `F(x) + a^T N a / 2`, plus the growth moduli the convergence theory needs.
pub struct NonlinearProblem {
    state_dim: usize,
    action_dim: usize,
    /// `A(x)`, with `|A(x)| <= gamma |x|`.
    pub drift: DynField,
    /// `DA(x)`.
    pub drift_jacobian: DynJacobian,
    /// `F(x)` (needed to recover values; its gradient drives the iteration).
    pub cost: DynScalar,
    /// `DF(x)`, with `|DF(x)| <= m_bound |x|`.
    pub cost_gradient: DynField,
    pub gamma: f64,
    pub b_modulus: f64,
    pub m_bound: f64,
    control: Matrix,
    action_cost: Matrix,
    discount: f64,
    n_inv_bt: Matrix,
    bnb: Matrix,
    bnb_norm: f64,
    action_cost_pd: bool,
}

impl NonlinearProblem {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        state_dim: usize,
        drift: DynField,
        drift_jacobian: DynJacobian,
        cost: DynScalar,
        cost_gradient: DynField,
        gamma: f64,
        b_modulus: f64,
        m_bound: f64,
        control: Matrix,
        action_cost: Matrix,
        discount: f64,
    ) -> Result<Self, LambdaError> {
        if gamma < 0.0 || b_modulus < 0.0 || m_bound < 0.0 {
            return Err(LambdaError::ModulusViolated(
                "moduli must be nonnegative".into(),
            ));
        }
        if control.nrows() != state_dim {
            return Err(LambdaError::Dimensions(format!(
                "control must have {state_dim} rows, got {}",
                control.nrows()
            )));
        }
        let action_dim = control.ncols();
        if action_cost.nrows() != action_dim || action_cost.ncols() != action_dim {
            return Err(LambdaError::Dimensions(format!(
                "action cost must be {action_dim}x{action_dim}"
            )));
        }
        let eig = action_cost.clone().symmetric_eigen();
        let min_abs = eig
            .eigenvalues
            .iter()
            .fold(f64::INFINITY, |a, v| a.min(v.abs()));
        if min_abs <= 1e-10 {
            return Err(LambdaError::Dimensions(
                "action cost matrix is singular".into(),
            ));
        }
        let action_cost_pd = eig.eigenvalues.iter().all(|v| *v > 0.0);
        let inv_diag = Matrix::from_diagonal(&eig.eigenvalues.map(|v| 1.0 / v));
        let n_inv = &eig.eigenvectors * inv_diag * eig.eigenvectors.transpose();
        let n_inv_bt = &n_inv * control.transpose();
        let bnb = &control * &n_inv_bt;
        let bnb_norm = spectral_norm(&bnb)?;

        let problem = Self {
            state_dim,
            action_dim,
            drift,
            drift_jacobian,
            cost,
            cost_gradient,
            gamma,
            b_modulus,
            m_bound,
            control,
            action_cost,
            discount,
            n_inv_bt,
            bnb,
            bnb_norm,
            action_cost_pd,
        };
        problem.spot_check_moduli()?;
        Ok(problem)
    }

    /// A linear-quadratic problem viewed through the nonlinear interface;
    /// the drift and cost-gradient moduli are the operator norms.
    pub fn from_lq(p: &LqProblem) -> Result<Self, LambdaError> {
        let a = p.dynamics().clone();
        let a2 = a.clone();
        let m = p.state_cost().clone();
        let m2 = m.clone();
        let gamma = spectral_norm(&a)?;
        let m_bound = spectral_norm(&m)?;
        let n = p.state_dim();
        Self::new(
            n,
            Arc::new(move |x: &Vector| &a * x),
            Arc::new(move |_x: &Vector| a2.clone()),
            Arc::new(move |x: &Vector| 0.5 * x.dot(&(&m * x))),
            Arc::new(move |x: &Vector| &m2 * x),
            gamma,
            0.0,
            m_bound,
            p.control().clone(),
            p.action_cost().clone(),
            p.discount(),
        )
    }

    /// Sampled sanity check of the declared growth moduli.
    fn spot_check_moduli(&self) -> Result<(), LambdaError> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0xC0FFEE);
        let slack = 1e-9;
        let mut sample = |scale: f64| {
            let v = Vector::from_fn(self.state_dim, |_, _| rng.gen_range(-1.0..=1.0));
            let norm = v.norm();
            if norm == 0.0 {
                v
            } else {
                v * (scale / norm)
            }
        };
        let mut points = Vec::new();
        for scale in [0.5, 1.0, 2.0] {
            for _ in 0..8 {
                points.push(sample(scale));
            }
        }
        for x in &points {
            let ax = (self.drift)(x).norm();
            if ax > self.gamma * x.norm() + slack {
                return Err(LambdaError::ModulusViolated(format!(
                    "|A(x)| = {ax:.6} exceeds gamma |x| = {:.6}",
                    self.gamma * x.norm()
                )));
            }
            let df = (self.cost_gradient)(x).norm();
            if df > self.m_bound * x.norm() + slack {
                return Err(LambdaError::ModulusViolated(format!(
                    "|DF(x)| = {df:.6} exceeds m_bound |x| = {:.6}",
                    self.m_bound * x.norm()
                )));
            }
        }
        for pair in points.chunks(2) {
            if pair.len() < 2 {
                break;
            }
            let (x1, x2) = (&pair[0], &pair[1]);
            let dj = (self.drift_jacobian)(x1) - (self.drift_jacobian)(x2);
            let lhs = spectral_norm(&dj)?;
            let rhs =
                self.b_modulus * (x1 - x2).norm() / (1.0 + x1.norm() + x2.norm()) + slack;
            if lhs > rhs {
                return Err(LambdaError::ModulusViolated(format!(
                    "|DA(x1) - DA(x2)| = {lhs:.6} exceeds the b-modulus bound {rhs:.6}"
                )));
            }
        }
        Ok(())
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    pub fn control(&self) -> &Matrix {
        &self.control
    }

    pub fn action_cost(&self) -> &Matrix {
        &self.action_cost
    }

    /// `B N^{-1} B^T`.
    pub fn control_quadratic(&self) -> &Matrix {
        &self.bnb
    }

    pub fn certificate(&self) -> ConvergenceCertificate {
        ConvergenceCertificate::from_moduli(
            self.gamma,
            self.b_modulus,
            self.m_bound,
            self.bnb_norm,
            self.discount,
        )
    }

    /// Running cost `F(x) + a^T N a / 2`.
    pub fn running_cost(&self, x: &Vector, action: &Vector) -> f64 {
        (self.cost)(x) + 0.5 * action.dot(&(&self.action_cost * action))
    }

    /// Controlled drift `A(x) + B a`.
    pub fn controlled_drift(&self, x: &Vector, action: &Vector) -> Vector {
        (self.drift)(x) + &self.control * action
    }

    /// Closed-form Hamiltonian minimizer `â = -N^{-1} B^T λ(x)`; requires a
    /// positive-definite action cost.
    pub fn minimize_hamiltonian(&self, lambda_x: &Vector) -> Result<Vector, LambdaError> {
        if !self.action_cost_pd {
            return Err(LambdaError::ActionCostNotPd);
        }
        if lambda_x.len() != self.state_dim {
            return Err(LambdaError::Dimensions(format!(
                "gradient must have length {}, got {}",
                self.state_dim,
                lambda_x.len()
            )));
        }
        Ok(-(&self.n_inv_bt * lambda_x))
    }

    /// True when the origin is a stationary point of both the drift and the
    /// cost gradient, which pins λ(0) = 0.
    fn origin_fixed(&self) -> bool {
        let zero = Vector::zeros(self.state_dim);
        (self.drift)(&zero).amax() < 1e-12 && (self.cost_gradient)(&zero).amax() < 1e-12
    }
}

/// Interpolation settings for sampled fields: an affine least-squares
/// detrend (exact on linear data) plus Gaussian-kernel interpolation of the
/// residual, with the bandwidth tied to the nearest-neighbor spacing.
#[derive(Debug, Clone, Copy)]
pub struct FieldInterp {
    /// Kernel bandwidth as a multiple of the median nearest-neighbor
    /// distance of the collocation set.
    pub bandwidth_scale: f64,
    /// Ridge weight for the kernel stage (0 = interpolation).
    pub regularization: f64,
}

impl Default for FieldInterp {
    fn default() -> Self {
        Self {
            bandwidth_scale: 2.5,
            regularization: 0.0,
        }
    }
}

fn median_nearest_neighbor(points: &[Vector]) -> f64 {
    let mut nn: Vec<f64> = points
        .iter()
        .enumerate()
        .map(|(i, a)| {
            points
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, b)| (a - b).norm())
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    nn.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let med = nn[nn.len() / 2];
    if med.is_finite() && med > 0.0 {
        med
    } else {
        1.0
    }
}

/// A sampled vector field with smooth interpolation between samples.
///
/// Stores one output vector per collocation point; queries anywhere go
/// through the fitted interpolant. Optionally carries the cone bounds the
/// field is certified to respect.
pub struct SampledField {
    points: Vec<Vector>,
    values: Vec<Vector>,
    affine: FittedModel,
    residual: FittedModel,
    /// Certified cone bounds `(varpi, nu)`, when known.
    pub cone: Option<(f64, f64)>,
}

impl SampledField {
    pub fn fit(
        points: Vec<Vector>,
        values: Vec<Vector>,
        interp: &FieldInterp,
    ) -> Result<Self, LambdaError> {
        if points.is_empty() || points.len() != values.len() {
            return Err(LambdaError::Dimensions(format!(
                "need matching nonempty points/values, got {} and {}",
                points.len(),
                values.len()
            )));
        }
        let dim = points[0].len();
        let basis = BasisFamily::Affine { dim };
        let affine = match fit_parametric(&basis, &points, &values, 0.0) {
            Ok(m) => m,
            // Degenerate collocation geometry: fall back to a ridge fit.
            Err(ApproxError::RankDeficient) => fit_parametric(&basis, &points, &values, 1e-10)?,
            Err(e) => return Err(e.into()),
        };
        let residuals: Vec<Vector> = points
            .iter()
            .zip(&values)
            .map(|(x, y)| y - affine.predict(x).expect("dims checked"))
            .collect();
        let bandwidth = interp.bandwidth_scale * median_nearest_neighbor(&points);
        let spec = KernelSpec::new(bandwidth, interp.regularization)?;
        let residual = fit_kernel(spec, &points, &residuals)?;
        Ok(Self {
            points,
            values,
            affine,
            residual,
            cone: None,
        })
    }

    pub fn from_fn<F: Fn(&Vector) -> Vector>(
        points: Vec<Vector>,
        f: F,
        interp: &FieldInterp,
    ) -> Result<Self, LambdaError> {
        let values: Vec<Vector> = points.iter().map(|x| f(x)).collect();
        Self::fit(points, values, interp)
    }

    pub fn zeros(points: Vec<Vector>, dim: usize, interp: &FieldInterp) -> Result<Self, LambdaError> {
        let values = vec![Vector::zeros(dim); points.len()];
        Self::fit(points, values, interp)
    }

    pub fn points(&self) -> &[Vector] {
        &self.points
    }

    pub fn values(&self) -> &[Vector] {
        &self.values
    }

    /// Interpolated evaluation at an arbitrary state.
    pub fn query(&self, x: &Vector) -> Vector {
        self.affine.predict(x).expect("dimension checked at fit")
            + self.residual.predict(x).expect("dimension checked at fit")
    }

    /// Jacobian estimate by central differences with step `1e-4 (1 + |x|)`.
    pub fn jacobian_fd(&self, x: &Vector) -> Matrix {
        let h = 1e-4 * (1.0 + x.norm());
        let dim_in = x.len();
        let dim_out = self.values[0].len();
        let mut jac = Matrix::zeros(dim_out, dim_in);
        for j in 0..dim_in {
            let mut hi = x.clone();
            let mut lo = x.clone();
            hi[j] += h;
            lo[j] -= h;
            let diff = (self.query(&hi) - self.query(&lo)) / (2.0 * h);
            jac.set_column(j, &diff);
        }
        jac
    }
}

/// Gradient field λ: collocation samples of the value gradient.
pub type GradientField = SampledField;
/// Feedback field â: collocation samples of the minimizing action.
pub type FeedbackField = SampledField;

/// Tuning knobs for the trajectory-integral map.
#[derive(Debug, Clone, Copy)]
pub struct LambdaConfig {
    /// RK4 step for closed-loop trajectories; `None` picks `0.1 / α`.
    pub ode_step: Option<f64>,
    /// Truncation tail tolerance for the discounted integral.
    pub tail_tol: f64,
    /// Interpolation settings for the iterated fields.
    pub interp: FieldInterp,
    /// Numerical slack accepted when checking the cone bounds.
    pub cone_slack: f64,
}

impl Default for LambdaConfig {
    fn default() -> Self {
        Self {
            ode_step: None,
            tail_tol: 1e-10,
            interp: FieldInterp::default(),
            cone_slack: 1e-6,
        }
    }
}

/// Fixed-point solver for the value-gradient field; construction requires a
/// passing convergence certificate.
pub struct LambdaSolver {
    problem: NonlinearProblem,
    certificate: ConvergenceCertificate,
    config: LambdaConfig,
}

impl LambdaSolver {
    pub fn new(problem: NonlinearProblem, config: LambdaConfig) -> Result<Self, LambdaError> {
        let certificate = problem.certificate();
        if !certificate.passes() {
            return Err(LambdaError::CertificateFailed(format!(
                "alpha_ok = {}, b_ok = {} (discount {} vs threshold {:.6})",
                certificate.alpha_ok,
                certificate.b_ok,
                problem.discount(),
                certificate.discount_threshold()
            )));
        }
        Ok(Self {
            problem,
            certificate,
            config,
        })
    }

    pub fn problem(&self) -> &NonlinearProblem {
        &self.problem
    }

    pub fn certificate(&self) -> &ConvergenceCertificate {
        &self.certificate
    }

    fn ode_step(&self) -> f64 {
        self.config
            .ode_step
            .unwrap_or(0.1 / self.problem.discount())
    }

    /// Exponential growth rate of closed-loop trajectories driven by a
    /// cone-bounded field.
    fn trajectory_growth(&self) -> f64 {
        self.problem.gamma + self.problem.bnb_norm * self.certificate.varpi
    }

    /// Integrate `dy/ds = A(y) - B N^{-1} B^T λ(y)` from `x`.
    pub fn closed_loop_trajectory(
        &self,
        lam: &GradientField,
        x: &Vector,
        duration: f64,
    ) -> Result<Trajectory, LambdaError> {
        let field = |y: &Vector| (self.problem.drift)(y) - &self.problem.bnb * lam.query(y);
        Ok(integrate_ode(
            field,
            x,
            duration,
            OdeStepSpec::new(self.ode_step())?,
        )?)
    }

    /// The contraction map: discounted trajectory integral of
    /// `DF(y) + DA^T(y) λ(y)` along the closed loop from `x`.
    pub fn gamma_map(&self, lam: &GradientField, x: &Vector) -> Result<Vector, LambdaError> {
        let p = &self.problem;
        let growth = self.trajectory_growth();
        let bound = (p.m_bound + p.gamma * self.certificate.varpi) * x.norm().max(1.0);
        let horizon =
            QuadratureSpec::horizon_for_tail(p.discount(), growth, bound, self.config.tail_tol)?;
        let traj = self.closed_loop_trajectory(lam, x, horizon)?;
        let samples: Vec<Vector> = traj
            .states
            .iter()
            .enumerate()
            .map(|(i, y)| {
                let s = traj.time(i);
                let integrand =
                    (p.cost_gradient)(y) + (p.drift_jacobian)(y).transpose() * lam.query(y);
                integrand * (-p.discount() * s).exp()
            })
            .collect();
        Ok(simpson_on_samples(&samples, traj.step))
    }

    /// Checks the cone `|λ(x)| <= ϖ |x|` and `|Dλ| <= ν` at the collocation
    /// points, with finite-difference Jacobians and the configured slack.
    pub fn check_cone(&self, lam: &GradientField) -> Result<(), LambdaError> {
        let varpi = self.certificate.varpi;
        let nu = self.certificate.nu;
        let slack = self.config.cone_slack;
        for (i, (x, v)) in lam.points().iter().zip(lam.values()).enumerate() {
            let vn = v.norm();
            if vn > varpi * x.norm() + slack {
                return Err(LambdaError::ConeViolation {
                    index: i,
                    detail: format!("|λ(x)| = {vn:.6} vs ϖ|x| = {:.6}", varpi * x.norm()),
                });
            }
            let jn = spectral_norm(&lam.jacobian_fd(x))?;
            // Interpolated fields wiggle between samples; the derivative
            // check tolerates a looser slack than the value check.
            if jn > nu + slack.max(1e-3) {
                return Err(LambdaError::ConeViolation {
                    index: i,
                    detail: format!("|Dλ(x)| = {jn:.6} vs ν = {nu:.6}"),
                });
            }
        }
        Ok(())
    }

    /// Fixed-point iteration `λ_{k+1} = Γ[λ_k]` on the collocation values,
    /// refitting the interpolant each sweep.
    ///
    /// The trace records the weighted sup distance
    /// `max_i |λ_{k+1}(x_i) - λ_k(x_i)| / max(|x_i|, 1e-8)`.
    pub fn lambda_fixed_point(
        &self,
        start: GradientField,
        tol: f64,
        max_iter: usize,
    ) -> Result<(GradientField, IterationTrace), LambdaError> {
        self.check_cone(&start)?;
        let pin_origin = self.problem.origin_fixed();
        let mut trace = IterationTrace::new(tol);
        let mut current = start;
        for _ in 0..max_iter {
            let new_values: Result<Vec<Vector>, LambdaError> = current
                .points()
                .par_iter()
                .map(|x| {
                    if pin_origin && x.norm() < 1e-14 {
                        Ok(Vector::zeros(self.problem.state_dim()))
                    } else {
                        self.gamma_map(&current, x)
                    }
                })
                .collect();
            let new_values = new_values?;
            let distance = current
                .points()
                .iter()
                .zip(current.values())
                .zip(&new_values)
                .map(|((x, old), new)| (new - old).norm() / x.norm().max(1e-8))
                .fold(0.0, f64::max);
            let mut next = SampledField::fit(
                current.points().to_vec(),
                new_values,
                &self.config.interp,
            )?;
            next.cone = Some((self.certificate.varpi, self.certificate.nu));
            current = next;
            if !trace.record(distance) {
                break;
            }
        }
        Ok((current, trace))
    }

    /// Value recovery `α u = f(x, â(x)) + λ(x) · g(x, â(x))`.
    pub fn recover_value(
        &self,
        lam: &GradientField,
        feedback: &FeedbackField,
        x: &Vector,
    ) -> f64 {
        recover_value(&self.problem, lam, feedback, x)
    }

    /// One damped feedback update at `x`; see [`hamiltonian_descent_step`].
    pub fn feedback_gradient_step(
        &self,
        feedback: &FeedbackField,
        lam_next: &GradientField,
        x: &Vector,
    ) -> Result<Vector, LambdaError> {
        let p = &self.problem;
        let action = feedback.query(x);
        let lambda_x = lam_next.query(x);
        hamiltonian_descent_step(
            |xx, a| p.running_cost(xx, a),
            |xx, a| p.controlled_drift(xx, a),
            Some(&|_: &Vector, a: &Vector| &p.action_cost * a),
            Some(&|_: &Vector, _: &Vector| p.control.clone()),
            &lambda_x,
            x,
            &action,
            10.0 / (1.0 + spectral_norm(&p.action_cost)?),
        )
    }
}

/// Value recovery `α u = f(x, â(x)) + λ(x) · g(x, â(x))` without needing a
/// passing certificate.
pub fn recover_value(
    p: &NonlinearProblem,
    lam: &GradientField,
    feedback: &FeedbackField,
    x: &Vector,
) -> f64 {
    let action = feedback.query(x);
    let lambda_x = lam.query(x);
    (p.running_cost(x, &action) + lambda_x.dot(&p.controlled_drift(x, &action))) / p.discount()
}

/// One damped gradient update of the action at a single state.
///
/// Descends `d = D_a f + (D_a g)^T λ` and picks the step by a golden-section
/// line search of the Hamiltonian `H(θ) = f(x, a - θ d) + λ · g(x, a - θ d)`
/// over `θ ∈ [0, θ_max]` (60 evaluations), so the step length depends on the
/// state. Derivatives fall back to central differences when not supplied.
#[allow(clippy::too_many_arguments)]
pub fn hamiltonian_descent_step(
    cost: impl Fn(&Vector, &Vector) -> f64,
    drift: impl Fn(&Vector, &Vector) -> Vector,
    cost_action_grad: Option<&dyn Fn(&Vector, &Vector) -> Vector>,
    drift_action_jac: Option<&dyn Fn(&Vector, &Vector) -> Matrix>,
    lambda_x: &Vector,
    x: &Vector,
    action: &Vector,
    theta_max: f64,
) -> Result<Vector, LambdaError> {
    let fd = 1e-6;
    let d_cost = match cost_action_grad {
        Some(g) => g(x, action),
        None => Vector::from_fn(action.len(), |i, _| {
            let mut hi = action.clone();
            let mut lo = action.clone();
            hi[i] += fd;
            lo[i] -= fd;
            (cost(x, &hi) - cost(x, &lo)) / (2.0 * fd)
        }),
    };
    let d_drift_t_lambda = match drift_action_jac {
        Some(j) => j(x, action).transpose() * lambda_x,
        None => Vector::from_fn(action.len(), |i, _| {
            let mut hi = action.clone();
            let mut lo = action.clone();
            hi[i] += fd;
            lo[i] -= fd;
            (drift(x, &hi) - drift(x, &lo)).dot(lambda_x) / (2.0 * fd)
        }),
    };
    let direction = d_cost + d_drift_t_lambda;
    if direction.norm() == 0.0 {
        return Ok(action.clone());
    }
    let hamiltonian = |theta: f64| {
        let w = action - &direction * theta;
        cost(x, &w) + lambda_x.dot(&drift(x, &w))
    };
    let (theta_star, h_star) = crate::mdp::golden_section_min(hamiltonian, theta_max, 60);
    if !h_star.is_finite() {
        return Err(LambdaError::NonFiniteSearch);
    }
    Ok(action - &direction * theta_star)
}

/// Output of one transport-backed policy-style update.
pub struct PolicyStyleStep {
    /// Value samples on the grid.
    pub value: SplitIterate,
    /// Grid the value lives on.
    pub grid: Grid,
    /// `λ = Du` by grid differencing, refit as a field.
    pub lambda: GradientField,
    /// Greedy feedback from the new gradient.
    pub feedback: FeedbackField,
    pub trace: IterationTrace,
}

/// Transport-backed iteration: solves
/// `α u - Du · g(x, â(x)) = f(x, â(x))` on a grid through the splitting
/// module, differentiates `u` for the new gradient, and minimizes the
/// Hamiltonian for the new feedback.
pub fn policy_style_iteration(
    p: &NonlinearProblem,
    feedback: &FeedbackField,
    grid: &Grid,
    warm_start: Option<&SplitIterate>,
    tol: f64,
    max_sweeps: usize,
    interp: &FieldInterp,
) -> Result<PolicyStyleStep, LambdaError> {
    let drift = Arc::clone(&p.drift);
    let control = p.control.clone();
    let fb_points = feedback.points().to_vec();
    let fb_values = feedback.values().to_vec();
    let fb = SampledField::fit(fb_points, fb_values, interp)?;
    let closed_drift: DynField = {
        let control = control.clone();
        Arc::new(move |x: &Vector| drift(x) + &control * fb.query(x))
    };
    let cost = Arc::clone(&p.cost);
    let action_cost = p.action_cost.clone();
    let fb2 = SampledField::fit(feedback.points().to_vec(), feedback.values().to_vec(), interp)?;
    let rhs: DynField = Arc::new(move |x: &Vector| {
        let a = fb2.query(x);
        Vector::from_vec(vec![cost(x) + 0.5 * a.dot(&(&action_cost * &a))])
    });
    let transport = TransportProblem::new(
        grid.clone(),
        closed_drift,
        rhs,
        1,
        p.discount(),
        DEFAULT_G_MIN,
    )?;
    let start = match warm_start {
        Some(w) => w.clone(),
        None => SplitIterate::zeros(grid, 1),
    };
    let (value, trace) = solve_transport(&transport, start, tol, max_sweeps);

    // Differentiate u on the grid: central interior, one-sided at the faces.
    let nodes = grid.node_count();
    let dim = grid.dim();
    let mut points = Vec::with_capacity(nodes);
    let mut lambda_values = Vec::with_capacity(nodes);
    for node in 0..nodes {
        let mut g = Vector::zeros(dim);
        for axis in 0..dim {
            let n = grid.nodes_along(axis);
            let i = grid.axis_index(node, axis);
            let h = grid.step(axis);
            let v = |delta: isize| value.value(grid.offset(node, axis, delta), 0);
            g[axis] = if i == 0 {
                (-3.0 * v(0) + 4.0 * v(1) - v(2)) / (2.0 * h)
            } else if i == n - 1 {
                (3.0 * v(0) - 4.0 * v(-1) + v(-2)) / (2.0 * h)
            } else {
                (v(1) - v(-1)) / (2.0 * h)
            };
        }
        points.push(grid.coordinates(node));
        lambda_values.push(g);
    }
    let lambda = SampledField::fit(points.clone(), lambda_values.clone(), interp)?;
    let feedback_values: Result<Vec<Vector>, LambdaError> = lambda_values
        .iter()
        .map(|lx| p.minimize_hamiltonian(lx))
        .collect();
    let feedback = SampledField::fit(points, feedback_values?, interp)?;
    Ok(PolicyStyleStep {
        value,
        grid: grid.clone(),
        lambda,
        feedback,
        trace,
    })
}

/// Residual of the stationary gradient system
/// `α λ - DA^T λ - Dλ (A - B N^{-1} B^T λ) - DF` at `x`, with the Jacobian
/// of the field taken by central differences.
pub fn gradient_system_residual(p: &NonlinearProblem, lam: &GradientField, x: &Vector) -> f64 {
    let lx = lam.query(x);
    let jac = lam.jacobian_fd(x);
    let closed = (p.drift)(x) - &p.bnb * &lx;
    let r = &lx * p.discount()
        - (p.drift_jacobian)(x).transpose() * &lx
        - jac * closed
        - (p.cost_gradient)(x);
    r.norm()
}

/// Tensor-product collocation grid over a box.
pub fn tensor_collocation(bounds: &[(f64, f64)], per_axis: usize) -> Vec<Vector> {
    assert!(per_axis >= 2, "need at least two nodes per axis");
    let dim = bounds.len();
    let mut points = Vec::with_capacity(per_axis.pow(dim as u32));
    let mut idx = vec![0usize; dim];
    loop {
        let p = Vector::from_fn(dim, |axis, _| {
            let (lo, hi) = bounds[axis];
            lo + (hi - lo) * idx[axis] as f64 / (per_axis - 1) as f64
        });
        points.push(p);
        let mut axis = 0;
        loop {
            idx[axis] += 1;
            if idx[axis] < per_axis {
                break;
            }
            idx[axis] = 0;
            axis += 1;
            if axis == dim {
                return points;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    /// Positive root of P^2 + 3P - 1 = 0: the scalar fixed point at α = 3.
    const P_STAR: f64 = 0.30277563773199456;

    fn scalar_lq_problem() -> NonlinearProblem {
        let lq = LqProblem::scalar(0.0, 1.0, 1.0, 1.0, 3.0).unwrap();
        NonlinearProblem::from_lq(&lq).unwrap()
    }

    fn scalar_solver() -> LambdaSolver {
        LambdaSolver::new(scalar_lq_problem(), LambdaConfig::default()).unwrap()
    }

    fn line_points(lo: f64, hi: f64, n: usize) -> Vec<Vector> {
        tensor_collocation(&[(lo, hi)], n)
    }

    fn linear_field(points: Vec<Vector>, slope: f64) -> GradientField {
        SampledField::from_fn(points, |x| x * slope, &FieldInterp::default()).unwrap()
    }

    #[test]
    fn interpolation_reproduces_linear_fields_exactly() {
        let pts = tensor_collocation(&[(-1.0, 1.0), (-1.0, 1.0)], 7);
        let field = SampledField::from_fn(
            pts,
            |x| Vector::from_vec(vec![2.0 * x[0] - x[1], 0.5 * x[1]]),
            &FieldInterp::default(),
        )
        .unwrap();
        let probe = Vector::from_vec(vec![0.137, -0.58]);
        let got = field.query(&probe);
        assert!((got[0] - (2.0 * 0.137 + 0.58)).abs() < 1e-9);
        assert!((got[1] - (0.5 * -0.58)).abs() < 1e-9);
        // FD Jacobian of a linear field recovers the matrix.
        let jac = field.jacobian_fd(&probe);
        assert!((jac[(0, 0)] - 2.0).abs() < 1e-6);
        assert!((jac[(0, 1)] + 1.0).abs() < 1e-6);
    }

    #[test]
    fn certificate_gate_rejects_small_discounts() {
        let lq = LqProblem::scalar(0.0, 1.0, 1.0, 1.0, 1.0).unwrap();
        let p = NonlinearProblem::from_lq(&lq).unwrap();
        assert!(matches!(
            LambdaSolver::new(p, LambdaConfig::default()),
            Err(LambdaError::CertificateFailed(_))
        ));
    }

    #[test]
    fn closed_loop_is_stationary_without_drift_or_gradient() {
        let solver = scalar_solver();
        let lam = SampledField::zeros(line_points(-1.0, 1.0, 9), 1, &FieldInterp::default())
            .unwrap();
        let x = Vector::from_vec(vec![0.7]);
        let traj = solver.closed_loop_trajectory(&lam, &x, 3.0).unwrap();
        for state in &traj.states {
            assert!((state[0] - 0.7).abs() < 1e-9);
        }
    }

    #[test]
    fn closed_loop_matches_linear_decay() {
        let solver = scalar_solver();
        let lam = linear_field(line_points(-2.0, 2.0, 41), P_STAR);
        let x = Vector::from_vec(vec![1.0]);
        let traj = solver.closed_loop_trajectory(&lam, &x, 2.0).unwrap();
        let expected = (-P_STAR * 2.0f64).exp();
        assert!(
            (traj.final_state()[0] - expected).abs() < 1e-6,
            "{} vs {expected}",
            traj.final_state()[0]
        );
    }

    #[test]
    fn closed_loop_respects_growth_bound() {
        let solver = scalar_solver();
        let cert = *solver.certificate();
        let lam = linear_field(line_points(-2.0, 2.0, 41), cert.varpi * 0.9);
        let rho = solver.trajectory_growth();
        let x = Vector::from_vec(vec![1.5]);
        let traj = solver.closed_loop_trajectory(&lam, &x, 1.0).unwrap();
        for (i, state) in traj.states.iter().enumerate() {
            let bound = 1.5 * (rho * traj.time(i)).exp() + 1e-9;
            assert!(state.norm() <= bound);
        }
    }

    #[test]
    fn gamma_map_reproduces_scalar_fixed_point() {
        let solver = scalar_solver();
        let lam = linear_field(line_points(-2.0, 2.0, 41), P_STAR);
        let x = Vector::from_vec(vec![1.0]);
        let image = solver.gamma_map(&lam, &x).unwrap();
        // Γ(1) = ∫ exp(-3s) exp(-P* s) ds = 1/(3 + P*) = P*.
        assert!(
            (image[0] - P_STAR).abs() < 1e-6,
            "gamma map gave {}",
            image[0]
        );
    }

    #[test]
    fn gamma_map_vanishes_at_origin() {
        let solver = scalar_solver();
        let lam = linear_field(line_points(-1.0, 1.0, 21), 0.2);
        let image = solver.gamma_map(&lam, &Vector::zeros(1)).unwrap();
        assert!(image[0].abs() < 1e-9);
    }

    #[test]
    fn gamma_map_preserves_cone_on_samples() {
        use rand::{Rng, SeedableRng};
        let solver = scalar_solver();
        let cert = *solver.certificate();
        let lam = linear_field(line_points(-2.0, 2.0, 41), 0.8 * cert.varpi);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let x = Vector::from_vec(vec![rng.gen_range(-1.5..1.5)]);
            let image = solver.gamma_map(&lam, &x).unwrap();
            assert!(
                image.norm() <= cert.varpi * x.norm() + 1e-6,
                "cone violated at {x:?}: |Γ| = {} vs {}",
                image.norm(),
                cert.varpi * x.norm()
            );
        }
    }

    #[test]
    fn gamma_map_contracts_pairs_of_cone_fields() {
        let solver = scalar_solver();
        let cert = *solver.certificate();
        let pts = line_points(-1.5, 1.5, 31);
        let lam1 = linear_field(pts.clone(), 0.7 * cert.varpi);
        let lam2 = linear_field(pts.clone(), 0.3 * cert.varpi);
        let bound = cert.contraction_factor() + 0.05;
        let dist = |a: &GradientField, b: &GradientField| {
            pts.iter()
                .map(|x| (a.query(x) - b.query(x)).norm() / x.norm().max(1e-8))
                .fold(0.0, f64::max)
        };
        let before = dist(&lam1, &lam2);
        let after = pts
            .iter()
            .map(|x| {
                let g1 = solver.gamma_map(&lam1, x).unwrap();
                let g2 = solver.gamma_map(&lam2, x).unwrap();
                (g1 - g2).norm() / x.norm().max(1e-8)
            })
            .fold(0.0, f64::max);
        assert!(
            after <= bound * before + 1e-9,
            "contraction violated: {after} vs {bound} * {before}"
        );
    }

    #[test]
    fn fixed_point_matches_riccati_scalar() {
        let solver = scalar_solver();
        let start =
            SampledField::zeros(line_points(-1.0, 1.0, 21), 1, &FieldInterp::default()).unwrap();
        let (lam, trace) = solver.lambda_fixed_point(start, 1e-8, 60).unwrap();
        assert!(trace.converged, "trace: {:?}", trace.distances);
        for x in lam.points() {
            let expect = P_STAR * x[0];
            assert!(
                (lam.query(x)[0] - expect).abs() <= 1e-4 * expect.abs().max(1e-2),
                "at {}: {} vs {expect}",
                x[0],
                lam.query(x)[0]
            );
        }
    }

    #[test]
    fn fixed_point_from_exact_start_converges_immediately() {
        let solver = scalar_solver();
        let start = linear_field(line_points(-1.0, 1.0, 21), P_STAR);
        let (_, trace) = solver.lambda_fixed_point(start, 1e-4, 10).unwrap();
        assert!(trace.converged);
        assert!(trace.iterations() <= 2, "took {}", trace.iterations());
    }

    #[test]
    fn cone_violating_start_is_rejected() {
        let solver = scalar_solver();
        let cert = *solver.certificate();
        let start = linear_field(line_points(-1.0, 1.0, 21), cert.varpi * 3.0);
        match solver.lambda_fixed_point(start, 1e-6, 10) {
            Err(LambdaError::ConeViolation { .. }) => {}
            other => panic!("expected cone violation, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn tanh_drift_fixed_point_satisfies_gradient_system() {
        // A(x) = γ tanh(x): |A(x)| <= γ|x|, and the Jacobian modulus is
        // bounded; cost F = x^2/2.
        let gamma = 0.05;
        let b_modulus = 2.0 * gamma;
        let p = NonlinearProblem::new(
            1,
            Arc::new(move |x: &Vector| Vector::from_vec(vec![gamma * x[0].tanh()])),
            Arc::new(move |x: &Vector| {
                Matrix::from_element(1, 1, gamma * (1.0 - x[0].tanh().powi(2)))
            }),
            Arc::new(|x: &Vector| 0.5 * x[0] * x[0]),
            Arc::new(|x: &Vector| x.clone()),
            gamma,
            b_modulus,
            1.0,
            Matrix::identity(1, 1),
            Matrix::identity(1, 1),
            3.0,
        )
        .unwrap();
        let solver = LambdaSolver::new(p, LambdaConfig::default()).unwrap();
        assert!(solver.certificate().passes());
        let start =
            SampledField::zeros(line_points(-1.0, 1.0, 41), 1, &FieldInterp::default()).unwrap();
        let (lam, trace) = solver.lambda_fixed_point(start, 1e-8, 80).unwrap();
        assert!(trace.converged);
        for x in lam.points() {
            if x[0].abs() < 0.85 && x[0].abs() > 1e-9 {
                let r = gradient_system_residual(solver.problem(), &lam, x);
                assert!(r < 1e-4, "residual {r} at x = {}", x[0]);
            }
        }
    }

    #[test]
    fn recover_value_scalar_lq() {
        let solver = scalar_solver();
        let pts = line_points(-1.5, 1.5, 31);
        let lam = linear_field(pts.clone(), P_STAR);
        let fb = SampledField::from_fn(pts, |x| x * -P_STAR, &FieldInterp::default()).unwrap();
        let at = |v: f64| solver.recover_value(&lam, &fb, &Vector::from_vec(vec![v]));
        assert!(at(0.0).abs() < 1e-9);
        assert_relative_eq!(at(1.0), P_STAR / 2.0, epsilon = 1e-6);
        assert_relative_eq!(at(1.0), 0.151388, epsilon = 1e-5);
        // Quadratic homogeneity u(cx) = c^2 u(x).
        assert_relative_eq!(at(1.2), 1.2 * 1.2 * at(1.0), epsilon = 1e-6);
    }

    #[test]
    fn hamiltonian_minimizer_closed_form() {
        let p = scalar_lq_problem();
        assert_eq!(
            p.minimize_hamiltonian(&Vector::zeros(1)).unwrap(),
            Vector::zeros(1)
        );
        let a = p
            .minimize_hamiltonian(&Vector::from_vec(vec![0.302776]))
            .unwrap();
        assert_relative_eq!(a[0], -0.302776, epsilon = 1e-12);

        // Doubling N halves the action.
        let lq2 = LqProblem::scalar(0.0, 1.0, 2.0, 1.0, 3.0).unwrap();
        let p2 = NonlinearProblem::from_lq(&lq2).unwrap();
        let a2 = p2
            .minimize_hamiltonian(&Vector::from_vec(vec![0.302776]))
            .unwrap();
        assert_relative_eq!(a2[0], a[0] / 2.0, epsilon = 1e-12);
    }

    #[test]
    fn descent_step_exact_on_isotropic_quadratic() {
        // N = I makes the descent direction collinear with the error, so an
        // exact line search lands on -N^{-1} B^T λ in one step.
        let solver = scalar_solver();
        let pts = line_points(-1.0, 1.0, 11);
        let lam = linear_field(pts.clone(), P_STAR);
        let fb = SampledField::from_fn(pts, |_| Vector::from_vec(vec![0.9]), &FieldInterp::default())
            .unwrap();
        let x = Vector::from_vec(vec![0.5]);
        let stepped = solver.feedback_gradient_step(&fb, &lam, &x).unwrap();
        let target = -P_STAR * 0.5;
        assert!(
            (stepped[0] - target).abs() < 1e-6,
            "{} vs {target}",
            stepped[0]
        );
    }

    #[test]
    fn descent_step_fixed_at_stationary_action() {
        let solver = scalar_solver();
        let pts = line_points(-1.0, 1.0, 11);
        let lam = linear_field(pts.clone(), P_STAR);
        // Feedback already optimal: direction vanishes pointwise.
        let fb = SampledField::from_fn(pts, |x| x * -P_STAR, &FieldInterp::default()).unwrap();
        let x = Vector::from_vec(vec![0.4]);
        let stepped = solver.feedback_gradient_step(&fb, &lam, &x).unwrap();
        assert!((stepped[0] - (-P_STAR * 0.4)).abs() < 1e-7);
    }

    #[test]
    fn descent_step_scalar_calculus_example() {
        // f(x, a) = (a - 1)^2, drift independent of the action: one exact
        // line search reaches a = 1 from any start.
        let lambda_x = Vector::from_vec(vec![0.3]);
        let x = Vector::from_vec(vec![0.0]);
        let a0 = Vector::from_vec(vec![-2.0]);
        let stepped = hamiltonian_descent_step(
            |_, a| (a[0] - 1.0).powi(2),
            |_, _| Vector::from_vec(vec![0.5]),
            None,
            None,
            &lambda_x,
            &x,
            &a0,
            10.0,
        )
        .unwrap();
        assert!((stepped[0] - 1.0).abs() < 1e-6, "got {}", stepped[0]);
    }

    #[test]
    fn policy_style_iteration_recovers_lq_value() {
        // Scalar LQ on a grid away from the characteristic degeneracy at 0:
        // with â(x) = -P* x the transport solution is u = (P*/2) x^2.
        let p = scalar_lq_problem();
        let grid = Grid::new(&[(0.2, 2.0)], &[81]).unwrap();
        let pts = line_points(0.2, 2.0, 81);
        let fb = SampledField::from_fn(pts, |x| x * -P_STAR, &FieldInterp::default()).unwrap();
        let step =
            policy_style_iteration(&p, &fb, &grid, None, 1e-11, 200, &FieldInterp::default())
                .unwrap();
        assert!(step.trace.converged);
        for node in 0..grid.node_count() {
            let x = grid.coordinates(node);
            if x[0] < 0.3 || x[0] > 1.9 {
                continue; // skip the inflow/outflow layers
            }
            let u = step.value.value(node, 0);
            let expect = 0.5 * P_STAR * x[0] * x[0];
            assert!(
                (u - expect).abs() < 1e-4,
                "u({}) = {u} vs {expect}",
                x[0]
            );
            let l = step.lambda.query(&x)[0];
            assert!(
                (l - P_STAR * x[0]).abs() < 2e-3,
                "lambda({}) = {l} vs {}",
                x[0],
                P_STAR * x[0]
            );
            let a = step.feedback.query(&x)[0];
            assert!((a + P_STAR * x[0]).abs() < 2e-3);
        }
    }

    #[test]
    fn policy_style_iteration_constant_cost() {
        // F ≡ c with a zero-gain feedback and unit leftward drift:
        // u = c/α exactly (the derivative term vanishes).
        let c = 0.8;
        let p = NonlinearProblem::new(
            1,
            Arc::new(|_: &Vector| Vector::from_vec(vec![-1.0])),
            Arc::new(|_: &Vector| Matrix::zeros(1, 1)),
            Arc::new(move |_: &Vector| c),
            Arc::new(|_: &Vector| Vector::zeros(1)),
            3.0, // growth modulus over the sampled shells, not tight
            0.0,
            0.0,
            Matrix::zeros(1, 1),
            Matrix::identity(1, 1),
            2.0,
        )
        .unwrap();
        let grid = Grid::new(&[(0.5, 2.0)], &[31]).unwrap();
        let pts = line_points(0.5, 2.0, 31);
        let fb = SampledField::zeros(pts, 1, &FieldInterp::default()).unwrap();
        let step =
            policy_style_iteration(&p, &fb, &grid, None, 1e-12, 100, &FieldInterp::default())
                .unwrap();
        assert!(step.trace.converged);
        for node in 0..grid.node_count() {
            assert!((step.value.value(node, 0) - c / 2.0).abs() < 1e-10);
        }
    }

    #[test]
    fn modulus_spot_check_catches_lies() {
        // Claim gamma = 0.1 for a drift that actually grows like 1.0.
        let res = NonlinearProblem::new(
            1,
            Arc::new(|x: &Vector| x.clone()),
            Arc::new(|_: &Vector| Matrix::identity(1, 1)),
            Arc::new(|_: &Vector| 0.0),
            Arc::new(|_: &Vector| Vector::zeros(1)),
            0.1,
            0.0,
            0.0,
            Matrix::identity(1, 1),
            Matrix::identity(1, 1),
            3.0,
        );
        assert!(matches!(res, Err(LambdaError::ModulusViolated(_))));
    }
}
