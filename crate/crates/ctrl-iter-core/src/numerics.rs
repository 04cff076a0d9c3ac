//! Shared numerical kernels: operator norms, fixed-step ODE integration,
//! discounted semi-infinite quadrature, and symmetric matrix square roots.
//!
//! Everything here is a pure function of its inputs and safe to call from
//! any number of worker threads.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// Dense column-major matrix of `f64`, the working type for all solvers.
pub type Matrix = DMatrix<f64>;
/// Dense vector of `f64`.
pub type Vector = DVector<f64>;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("matrix has non-finite entries")]
    NonFiniteMatrix,
    #[error("vector has non-finite entries")]
    NonFiniteVector,
    #[error("ODE state became non-finite at t = {time}")]
    OdeDivergence { time: f64 },
    #[error("discount rate must be positive, got {0}")]
    NonPositiveDiscount(f64),
    #[error("matrix is not symmetric within tolerance (max asymmetry {0:.3e})")]
    NotSymmetric(f64),
    #[error("matrix is indefinite beyond tolerance (eigenvalue {0:.3e})")]
    Indefinite(f64),
    #[error("{0}")]
    Invalid(String),
}

pub fn ensure_finite_matrix(m: &Matrix) -> Result<(), NumericsError> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(NumericsError::NonFiniteMatrix)
    }
}

pub fn ensure_finite_vector(v: &Vector) -> Result<(), NumericsError> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(NumericsError::NonFiniteVector)
    }
}

/// Largest singular value of `m` (the operator-2 norm).
pub fn spectral_norm(m: &Matrix) -> Result<f64, NumericsError> {
    ensure_finite_matrix(m)?;
    if m.iter().all(|v| *v == 0.0) {
        return Ok(0.0);
    }
    // The SVD resolves clustered singular values that a plain power
    // iteration could stall on before reaching 1e-10 relative accuracy.
    let sv = m.clone().singular_values();
    Ok(sv.iter().cloned().fold(0.0, f64::max))
}

/// Step configuration for the fixed-step 4th-order integrator.
#[derive(Debug, Clone, Copy)]
pub struct OdeStepSpec {
    pub step_size: f64,
}

impl OdeStepSpec {
    pub fn new(step_size: f64) -> Result<Self, NumericsError> {
        if step_size > 0.0 && step_size.is_finite() {
            Ok(Self { step_size })
        } else {
            Err(NumericsError::Invalid(format!(
                "step size must be positive and finite, got {step_size}"
            )))
        }
    }
}

/// A trajectory sampled on a uniform time grid.
#[derive(Debug, Clone)]
pub struct Trajectory {
    /// Uniform spacing between samples.
    pub step: f64,
    /// States at times `0, step, 2*step, ...`.
    pub states: Vec<Vector>,
}

impl Trajectory {
    pub fn final_state(&self) -> &Vector {
        self.states.last().expect("trajectory has at least one state")
    }

    pub fn time(&self, index: usize) -> f64 {
        self.step * index as f64
    }

    pub fn duration(&self) -> f64 {
        self.step * (self.states.len() - 1) as f64
    }
}

/// Classical 4th-order one-step integration of `dy/ds = field(y)` from `x0`
/// over `[0, duration]`.
///
/// The requested step size is shrunk (never grown) so that an integer number
/// of equal steps lands exactly on `duration`. Final-state error is O(h^4)
/// for smooth fields.
pub fn integrate_ode<F>(
    field: F,
    x0: &Vector,
    duration: f64,
    spec: OdeStepSpec,
) -> Result<Trajectory, NumericsError>
where
    F: Fn(&Vector) -> Vector,
{
    ensure_finite_vector(x0)?;
    if duration < 0.0 || !duration.is_finite() {
        return Err(NumericsError::Invalid(format!(
            "duration must be nonnegative and finite, got {duration}"
        )));
    }
    if duration == 0.0 {
        return Ok(Trajectory {
            step: spec.step_size,
            states: vec![x0.clone()],
        });
    }
    let steps = (duration / spec.step_size).ceil().max(1.0) as usize;
    let h = duration / steps as f64;
    let mut states = Vec::with_capacity(steps + 1);
    states.push(x0.clone());
    let mut y = x0.clone();
    for i in 0..steps {
        let k1 = field(&y);
        let k2 = field(&(&y + &k1 * (h / 2.0)));
        let k3 = field(&(&y + &k2 * (h / 2.0)));
        let k4 = field(&(&y + &k3 * h));
        y += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        if !y.iter().all(|v| v.is_finite()) {
            return Err(NumericsError::OdeDivergence {
                time: h * (i + 1) as f64,
            });
        }
        states.push(y.clone());
    }
    Ok(Trajectory { step: h, states })
}

/// Truncated discounted integral specification: approximates
/// `∫_0^∞ exp(-α s) h(s) ds` by composite Simpson quadrature on `[0, T]`.
#[derive(Debug, Clone, Copy)]
pub struct QuadratureSpec {
    /// Discount rate α > 0.
    pub discount: f64,
    /// Truncation horizon T > 0.
    pub horizon: f64,
    /// Number of quadrature nodes (rounded up to an odd count ≥ 3).
    pub node_count: usize,
}

impl QuadratureSpec {
    pub fn new(discount: f64, horizon: f64, node_count: usize) -> Result<Self, NumericsError> {
        if discount <= 0.0 || !discount.is_finite() {
            return Err(NumericsError::NonPositiveDiscount(discount));
        }
        if horizon <= 0.0 || !horizon.is_finite() {
            return Err(NumericsError::Invalid(format!(
                "horizon must be positive and finite, got {horizon}"
            )));
        }
        if node_count < 2 {
            return Err(NumericsError::Invalid(format!(
                "node count must be at least 2, got {node_count}"
            )));
        }
        Ok(Self {
            discount,
            horizon,
            node_count,
        })
    }

    /// Horizon large enough that the truncation tail of an integrand bounded
    /// by `bound * exp(growth * s)` stays below `tol`, per the tail estimate
    /// `bound * exp(-(α - growth) T) / (α - growth)`. Requires `growth < α`.
    pub fn horizon_for_tail(
        discount: f64,
        growth: f64,
        bound: f64,
        tol: f64,
    ) -> Result<f64, NumericsError> {
        let margin = discount - growth;
        if margin <= 0.0 {
            return Err(NumericsError::Invalid(format!(
                "integrand growth rate {growth} must stay below the discount {discount}"
            )));
        }
        let bound = bound.max(f64::MIN_POSITIVE);
        let t = (bound / (tol * margin)).ln() / margin;
        Ok(t.max(1.0 / margin))
    }

    /// Upper bound on the truncation error for integrands bounded by
    /// `bound * exp(growth * s)` with `growth < discount`.
    pub fn tail_bound(&self, growth: f64, bound: f64) -> f64 {
        let margin = self.discount - growth;
        if margin <= 0.0 {
            return f64::INFINITY;
        }
        bound * (-margin * self.horizon).exp() / margin
    }
}

fn simpson_weights(nodes: usize) -> (usize, Vec<f64>) {
    // Round up to an odd node count so the interval count is even.
    let n = if nodes < 3 {
        3
    } else if nodes % 2 == 0 {
        nodes + 1
    } else {
        nodes
    };
    let mut w = vec![1.0; n];
    for (i, wi) in w.iter_mut().enumerate().take(n - 1).skip(1) {
        *wi = if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    (n, w)
}

/// `∫_0^T exp(-α s) h(s) ds` by composite Simpson on a uniform grid.
pub fn discounted_quadrature<F>(integrand: F, spec: QuadratureSpec) -> Result<f64, NumericsError>
where
    F: Fn(f64) -> f64,
{
    let (n, w) = simpson_weights(spec.node_count);
    let h = spec.horizon / (n - 1) as f64;
    let mut acc = 0.0;
    for (i, wi) in w.iter().enumerate() {
        let s = h * i as f64;
        let v = (-spec.discount * s).exp() * integrand(s);
        if !v.is_finite() {
            return Err(NumericsError::Invalid(format!(
                "integrand is non-finite at s = {s}"
            )));
        }
        acc += wi * v;
    }
    Ok(acc * h / 3.0)
}

/// Componentwise variant of [`discounted_quadrature`] for vector integrands.
pub fn discounted_quadrature_vec<F>(
    integrand: F,
    dim: usize,
    spec: QuadratureSpec,
) -> Result<Vector, NumericsError>
where
    F: Fn(f64) -> Vector,
{
    let (n, w) = simpson_weights(spec.node_count);
    let h = spec.horizon / (n - 1) as f64;
    let mut acc = Vector::zeros(dim);
    for (i, wi) in w.iter().enumerate() {
        let s = h * i as f64;
        let v = integrand(s);
        debug_assert_eq!(v.len(), dim);
        acc.axpy(wi * (-spec.discount * s).exp(), &v, 1.0);
    }
    acc *= h / 3.0;
    ensure_finite_vector(&acc)?;
    Ok(acc)
}

/// Simpson sum of already-discounted samples on a uniform grid of spacing
/// `step`; used when the integrand is only known along a trajectory.
pub fn simpson_on_samples(samples: &[Vector], step: f64) -> Vector {
    assert!(!samples.is_empty(), "need at least one sample");
    let dim = samples[0].len();
    if samples.len() == 1 {
        return Vector::zeros(dim);
    }
    // Odd sample counts give an even interval count; otherwise finish the
    // last interval with a trapezoid rule.
    let simpson_len = if samples.len() % 2 == 1 {
        samples.len()
    } else {
        samples.len() - 1
    };
    let mut acc = Vector::zeros(dim);
    if simpson_len >= 3 {
        for (i, s) in samples.iter().enumerate().take(simpson_len) {
            let w = if i == 0 || i == simpson_len - 1 {
                1.0
            } else if i % 2 == 1 {
                4.0
            } else {
                2.0
            };
            acc.axpy(w, s, 1.0);
        }
        acc *= step / 3.0;
    }
    if simpson_len < samples.len() {
        let a = &samples[samples.len() - 2];
        let b = &samples[samples.len() - 1];
        acc.axpy(step / 2.0, a, 1.0);
        acc.axpy(step / 2.0, b, 1.0);
    }
    acc
}

/// Symmetric PSD square root: returns symmetric `r` with `r * r = s`.
///
/// Eigenvalues in `[-1e-12, 0)` (relative to the entry scale) are clamped to
/// zero; anything more negative, or asymmetry beyond `1e-10`, is rejected.
pub fn symmetric_sqrt(s: &Matrix) -> Result<Matrix, NumericsError> {
    ensure_finite_matrix(s)?;
    if s.nrows() != s.ncols() {
        return Err(NumericsError::Invalid(format!(
            "expected a square matrix, got {}x{}",
            s.nrows(),
            s.ncols()
        )));
    }
    let scale = 1.0 + s.amax();
    let asym = (s - s.transpose()).amax();
    if asym > 1e-10 * scale {
        return Err(NumericsError::NotSymmetric(asym));
    }
    let sym = (s + s.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let clamp = 1e-12 * scale;
    let mut roots = eig.eigenvalues.clone();
    for v in roots.iter_mut() {
        if *v < -clamp {
            return Err(NumericsError::Indefinite(*v));
        }
        *v = v.max(0.0).sqrt();
    }
    let dim = s.nrows();
    let mut out = Matrix::zeros(dim, dim);
    for (k, r) in roots.iter().enumerate() {
        let col = eig.eigenvectors.column(k).clone_owned();
        for i in 0..dim {
            for j in 0..dim {
                out[(i, j)] += r * col[i] * col[j];
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn spectral_norm_identity() {
        let m = Matrix::identity(2, 2);
        assert_relative_eq!(spectral_norm(&m).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn spectral_norm_diagonal_takes_largest_magnitude() {
        let m = Matrix::from_diagonal(&Vector::from_vec(vec![3.0, -4.0]));
        assert_relative_eq!(spectral_norm(&m).unwrap(), 4.0, epsilon = 1e-12);
    }

    #[test]
    fn spectral_norm_nilpotent_block() {
        // M^T M = diag(0, 4), so the largest singular value is 2.
        let m = Matrix::from_row_slice(2, 2, &[0.0, 2.0, 0.0, 0.0]);
        assert_relative_eq!(spectral_norm(&m).unwrap(), 2.0, epsilon = 1e-12);
    }

    #[test]
    fn spectral_norm_rejects_non_finite() {
        let m = Matrix::from_row_slice(1, 2, &[f64::NAN, 0.0]);
        assert!(matches!(
            spectral_norm(&m),
            Err(NumericsError::NonFiniteMatrix)
        ));
    }

    #[test]
    fn ode_constant_field_stays_put() {
        let x0 = Vector::from_vec(vec![1.0, 2.0]);
        let traj = integrate_ode(
            |_| Vector::zeros(2),
            &x0,
            5.0,
            OdeStepSpec::new(0.1).unwrap(),
        )
        .unwrap();
        assert_relative_eq!(traj.final_state()[0], 1.0, epsilon = 1e-14);
        assert_relative_eq!(traj.final_state()[1], 2.0, epsilon = 1e-14);
    }

    #[test]
    fn ode_exponential_growth_matches_closed_form() {
        let x0 = Vector::from_vec(vec![1.0]);
        let traj =
            integrate_ode(|y| y.clone(), &x0, 1.0, OdeStepSpec::new(0.01).unwrap()).unwrap();
        assert!((traj.final_state()[0] - 1.0f64.exp()).abs() < 1e-8);
    }

    #[test]
    fn ode_linear_decay_matches_closed_form() {
        let rate = 0.302776;
        let x0 = Vector::from_vec(vec![1.0]);
        let traj = integrate_ode(|y| y * -rate, &x0, 2.0, OdeStepSpec::new(0.01).unwrap()).unwrap();
        let expected = (-rate * 2.0f64).exp();
        assert!((traj.final_state()[0] - expected).abs() < 1e-10);
        assert_relative_eq!(expected, 0.545773, epsilon = 1e-6);
    }

    #[test]
    fn ode_fourth_order_convergence() {
        let x0 = Vector::from_vec(vec![1.0]);
        let exact = 1.0f64.exp();
        let err = |h: f64| {
            let traj =
                integrate_ode(|y| y.clone(), &x0, 1.0, OdeStepSpec::new(h).unwrap()).unwrap();
            (traj.final_state()[0] - exact).abs()
        };
        let e1 = err(0.05);
        let e2 = err(0.025);
        assert!(
            e1 / e2 >= 12.0,
            "expected 4th-order error reduction, got ratio {}",
            e1 / e2
        );
    }

    #[test]
    fn ode_reports_blow_up_time() {
        // dy/ds = y^3 from 2 blows up near s = 1/(2*4) = 0.125.
        let x0 = Vector::from_vec(vec![2.0]);
        let res = integrate_ode(
            |y| y.map(|v| v * v * v),
            &x0,
            1.0,
            OdeStepSpec::new(0.001).unwrap(),
        );
        match res {
            Err(NumericsError::OdeDivergence { time }) => {
                assert!(time > 0.0 && time < 1.0);
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn quadrature_constant_integrand() {
        let spec = QuadratureSpec::new(2.0, 20.0, 4001).unwrap();
        let v = discounted_quadrature(|_| 1.0, spec).unwrap();
        assert!((v - 0.5).abs() < 1e-8, "got {v}");
    }

    #[test]
    fn quadrature_gamma_integral() {
        let spec = QuadratureSpec::new(1.0, 40.0, 8001).unwrap();
        let v = discounted_quadrature(|s| s, spec).unwrap();
        assert!((v - 1.0).abs() < 1e-8, "got {v}");
    }

    #[test]
    fn quadrature_exponential_growth_below_discount() {
        let spec = QuadratureSpec::new(1.0, 60.0, 20001).unwrap();
        let v = discounted_quadrature(|s| (0.5 * s).exp(), spec).unwrap();
        assert!((v - 2.0).abs() < 1e-7, "got {v}");
    }

    #[test]
    fn quadrature_finite_horizon_identity() {
        // With h ≡ 1 the truncated integral is (1 - exp(-αT))/α.
        let spec = QuadratureSpec::new(1.5, 3.0, 2001).unwrap();
        let v = discounted_quadrature(|_| 1.0, spec).unwrap();
        let expected = (1.0 - (-1.5f64 * 3.0).exp()) / 1.5;
        assert!((v - expected).abs() < 1e-12);
    }

    #[test]
    fn quadrature_tail_bound_dominates_truncation() {
        // Integrand exp(0.3 s): exact integral 1/(α - 0.3).
        let alpha = 1.3;
        let growth = 0.3;
        for horizon in [5.0, 10.0, 20.0] {
            let spec = QuadratureSpec::new(alpha, horizon, 40001).unwrap();
            let v = discounted_quadrature(|s| (growth * s).exp(), spec).unwrap();
            let exact = 1.0 / (alpha - growth);
            let observed_tail = exact - v;
            let bound = spec.tail_bound(growth, 1.0);
            assert!(
                observed_tail.abs() <= bound + 1e-9,
                "tail {observed_tail} exceeds bound {bound} at T={horizon}"
            );
        }
    }

    #[test]
    fn quadrature_rejects_bad_discount() {
        assert!(QuadratureSpec::new(0.0, 1.0, 10).is_err());
        assert!(QuadratureSpec::new(-1.0, 1.0, 10).is_err());
    }

    #[test]
    fn sqrt_identity_and_diagonal() {
        let r = symmetric_sqrt(&Matrix::identity(3, 3)).unwrap();
        assert!((r - Matrix::identity(3, 3)).amax() < 1e-12);

        let d = Matrix::from_diagonal(&Vector::from_vec(vec![4.0, 9.0]));
        let r = symmetric_sqrt(&d).unwrap();
        let expected = Matrix::from_diagonal(&Vector::from_vec(vec![2.0, 3.0]));
        assert!((r - expected).amax() < 1e-12);
    }

    #[test]
    fn sqrt_reconstructs_random_spd() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let g = Matrix::from_fn(3, 3, |_, _| rng.gen_range(-1.0..1.0));
        let s = &g * g.transpose();
        let r = symmetric_sqrt(&s).unwrap();
        assert!(((&r * &r) - &s).amax() < 1e-8);
        assert!((&r - r.transpose()).amax() < 1e-12);
        let eig = r.symmetric_eigen();
        assert!(eig.eigenvalues.iter().all(|v| *v >= -1e-10));
    }

    #[test]
    fn sqrt_rejects_asymmetric_and_indefinite() {
        let a = Matrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(matches!(
            symmetric_sqrt(&a),
            Err(NumericsError::NotSymmetric(_))
        ));
        let n = Matrix::from_diagonal(&Vector::from_vec(vec![1.0, -0.5]));
        assert!(matches!(
            symmetric_sqrt(&n),
            Err(NumericsError::Indefinite(_))
        ));
    }

    #[test]
    fn sqrt_clamps_round_off_negatives() {
        let s = Matrix::from_diagonal(&Vector::from_vec(vec![1.0, -1e-13]));
        let r = symmetric_sqrt(&s).unwrap();
        assert!((r[(0, 0)] - 1.0).abs() < 1e-12);
        assert_eq!(r[(1, 1)], 0.0);
    }

    proptest! {
        #[test]
        fn spectral_norm_scales_homogeneously(
            entries in proptest::collection::vec(-10.0f64..10.0, 9),
            c in -5.0f64..5.0,
        ) {
            let m = Matrix::from_row_slice(3, 3, &entries);
            let base = spectral_norm(&m).unwrap();
            let scaled = spectral_norm(&(&m * c)).unwrap();
            prop_assert!((scaled - c.abs() * base).abs() <= 1e-12 * (1.0 + c.abs() * base));
        }

        #[test]
        fn simpson_samples_matches_direct_quadrature(n in 5usize..40) {
            // Discounted samples of a smooth integrand agree with the
            // closed-form quadrature on the same grid.
            let alpha = 1.2;
            let horizon = 2.0;
            let nodes = 2 * n + 1;
            let h = horizon / (nodes - 1) as f64;
            let samples: Vec<Vector> = (0..nodes)
                .map(|i| {
                    let s = h * i as f64;
                    Vector::from_vec(vec![(-alpha * s).exp() * s.cos()])
                })
                .collect();
            let via_samples = simpson_on_samples(&samples, h)[0];
            let spec = QuadratureSpec::new(alpha, horizon, nodes).unwrap();
            let direct = discounted_quadrature(|s| s.cos(), spec).unwrap();
            prop_assert!((via_samples - direct).abs() < 1e-12);
        }
    }
}
