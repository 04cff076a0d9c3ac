//! Linear-quadratic specialization: the Riccati fixed-point iteration
//! `P_{k+1} (αI - A + B N^{-1} B^T P_k) = M + A^T P_k`, its contraction
//! certificate, and residual checks against the stationary Riccati equation
//! `αP = M + A^T P + P A - P B N^{-1} B^T P`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::numerics::{ensure_finite_matrix, spectral_norm, Matrix, NumericsError, Vector};
use crate::trace::IterationTrace;

#[derive(Debug, Error)]
pub enum LqrError {
    #[error("dimension mismatch: {0}")]
    Dimensions(String),
    #[error("action cost matrix is not symmetric (max asymmetry {0:.3e})")]
    ActionCostNotSymmetric(f64),
    #[error("action cost matrix is singular (min |eigenvalue| {0:.3e})")]
    ActionCostSingular(f64),
    #[error("state cost matrix is not symmetric PSD (eigenvalue {0:.3e})")]
    StateCostNotPsd(f64),
    #[error("discount must be positive, got {0}")]
    BadDiscount(f64),
    #[error(
        "linear step system is singular at iteration {iteration} \
         (min singular value {min_singular:.3e})"
    )]
    SingularStep {
        iteration: usize,
        min_singular: f64,
        /// Distances recorded before the abort.
        partial: IterationTrace,
    },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Discounted linear-quadratic problem: dynamics `A x + B a`, running cost
/// `x^T M x / 2 + a^T N a / 2`, discount rate `alpha`.
#[derive(Debug, Clone)]
pub struct LqProblem {
    dynamics: Matrix,
    control: Matrix,
    action_cost: Matrix,
    state_cost: Matrix,
    discount: f64,
    /// Cached `N^{-1} B^T`.
    n_inv_bt: Matrix,
    /// Cached `B N^{-1} B^T`.
    bnb: Matrix,
}

impl LqProblem {
    /// Validates shapes, symmetry, and definiteness, then caches the
    /// products used by every iteration.
    pub fn new(
        dynamics: Matrix,
        control: Matrix,
        action_cost: Matrix,
        state_cost: Matrix,
        discount: f64,
    ) -> Result<Self, LqrError> {
        let n = dynamics.nrows();
        let d = control.ncols();
        if dynamics.ncols() != n {
            return Err(LqrError::Dimensions(format!(
                "dynamics must be square, got {}x{}",
                dynamics.nrows(),
                dynamics.ncols()
            )));
        }
        if control.nrows() != n {
            return Err(LqrError::Dimensions(format!(
                "control must have {n} rows, got {}",
                control.nrows()
            )));
        }
        if action_cost.nrows() != d || action_cost.ncols() != d {
            return Err(LqrError::Dimensions(format!(
                "action cost must be {d}x{d}, got {}x{}",
                action_cost.nrows(),
                action_cost.ncols()
            )));
        }
        if state_cost.nrows() != n || state_cost.ncols() != n {
            return Err(LqrError::Dimensions(format!(
                "state cost must be {n}x{n}, got {}x{}",
                state_cost.nrows(),
                state_cost.ncols()
            )));
        }
        for m in [&dynamics, &control, &action_cost, &state_cost] {
            ensure_finite_matrix(m)?;
        }
        if !(discount > 0.0 && discount.is_finite()) {
            return Err(LqrError::BadDiscount(discount));
        }

        let scale = 1.0 + action_cost.amax();
        let asym = (&action_cost - action_cost.transpose()).amax();
        if asym > 1e-10 * scale {
            return Err(LqrError::ActionCostNotSymmetric(asym));
        }
        let eig = action_cost.clone().symmetric_eigen();
        let min_abs = eig.eigenvalues.iter().fold(f64::INFINITY, |a, v| a.min(v.abs()));
        if min_abs <= 1e-10 {
            return Err(LqrError::ActionCostSingular(min_abs));
        }

        let mscale = 1.0 + state_cost.amax();
        let masym = (&state_cost - state_cost.transpose()).amax();
        if masym > 1e-10 * mscale {
            return Err(LqrError::StateCostNotPsd(f64::NAN));
        }
        let meig = state_cost.clone().symmetric_eigen();
        if let Some(bad) = meig.eigenvalues.iter().find(|v| **v < -1e-10 * mscale) {
            return Err(LqrError::StateCostNotPsd(*bad));
        }

        // N^{-1} B^T through the eigendecomposition already in hand.
        let inv_diag = Matrix::from_diagonal(&eig.eigenvalues.map(|v| 1.0 / v));
        let n_inv = &eig.eigenvectors * inv_diag * eig.eigenvectors.transpose();
        let n_inv_bt = &n_inv * control.transpose();
        let bnb = &control * &n_inv_bt;
        Ok(Self {
            dynamics,
            control,
            action_cost,
            state_cost,
            discount,
            n_inv_bt,
            bnb,
        })
    }

    /// The scalar problem `A = a, B = b, N = n, M = m` used throughout the
    /// tests and the certify fixtures.
    pub fn scalar(a: f64, b: f64, n: f64, m: f64, discount: f64) -> Result<Self, LqrError> {
        Self::new(
            Matrix::from_element(1, 1, a),
            Matrix::from_element(1, 1, b),
            Matrix::from_element(1, 1, n),
            Matrix::from_element(1, 1, m),
            discount,
        )
    }

    /// Seeded random problem with the given shapes: entries uniform in
    /// `[-1, 1]`, after which the action cost becomes `G^T G + I` (symmetric,
    /// invertible) and the state cost `H^T H` (symmetric PSD).
    pub fn seeded_random(
        state_dim: usize,
        action_dim: usize,
        discount: f64,
        seed: u64,
    ) -> Result<Self, LqrError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut uniform =
            |r: usize, c: usize| Matrix::from_fn(r, c, |_, _| rng.gen_range(-1.0..=1.0));
        let dynamics = uniform(state_dim, state_dim);
        let control = uniform(state_dim, action_dim);
        let g = uniform(action_dim, action_dim);
        let action_cost = g.transpose() * &g + Matrix::identity(action_dim, action_dim);
        let h = uniform(state_dim, state_dim);
        let state_cost = h.transpose() * &h;
        Self::new(dynamics, control, action_cost, state_cost, discount)
    }

    /// Same matrices, different discount rate.
    pub fn with_discount(&self, discount: f64) -> Result<Self, LqrError> {
        if !(discount > 0.0 && discount.is_finite()) {
            return Err(LqrError::BadDiscount(discount));
        }
        let mut p = self.clone();
        p.discount = discount;
        Ok(p)
    }

    pub fn state_dim(&self) -> usize {
        self.dynamics.nrows()
    }

    pub fn action_dim(&self) -> usize {
        self.control.ncols()
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    pub fn dynamics(&self) -> &Matrix {
        &self.dynamics
    }

    pub fn control(&self) -> &Matrix {
        &self.control
    }

    pub fn action_cost(&self) -> &Matrix {
        &self.action_cost
    }

    pub fn state_cost(&self) -> &Matrix {
        &self.state_cost
    }

    /// Cached `N^{-1} B^T`.
    pub fn gain_map(&self) -> &Matrix {
        &self.n_inv_bt
    }

    /// Cached `B N^{-1} B^T`.
    pub fn control_quadratic(&self) -> &Matrix {
        &self.bnb
    }
}

/// Contraction-certificate constants for the gradient fixed-point map.
///
/// `varpi` and `nu` are the smaller roots of
/// `w^2 |BN^{-1}B^T| - (α - 2γ) w + M = 0` and the analogous equation with
/// `M + b·varpi`; they bound the fixed point by `|λ(x)| <= varpi |x|` and
/// `|Dλ| <= nu` whenever `alpha_ok` and `b_ok` hold.
#[derive(Debug, Clone, Copy)]
pub struct ConvergenceCertificate {
    /// Growth modulus of the drift (`|A(x)| <= gamma |x|`; the operator norm
    /// of `A` in the linear case).
    pub gamma: f64,
    /// Modulus of continuity of the drift Jacobian (0 in the linear case).
    pub b: f64,
    /// Growth modulus of the cost gradient (`|DF(x)| <= m_bound |x|`).
    pub m_bound: f64,
    /// Operator norm of `B N^{-1} B^T`.
    pub bnb_norm: f64,
    /// Discount rate the certificate was computed for.
    pub discount: f64,
    /// `(α - 2γ)^2 / (4 m_bound bnb_norm)`; must exceed 1 when `alpha_ok`.
    pub beta: f64,
    /// Cone slope bound for the field itself.
    pub varpi: f64,
    /// Cone bound for the field Jacobian (`= varpi` when `b = 0`).
    pub nu: f64,
    /// Discount large enough: `α - 2γ > 2 sqrt(m_bound · bnb_norm)`.
    pub alpha_ok: bool,
    /// Jacobian modulus small enough for `nu` to exist.
    pub b_ok: bool,
}

/// Smaller root of `a w^2 - s w + c = 0` in the numerically stable form
/// `2c / (s + sqrt(s^2 - 4ac))`; handles `a = 0` (degenerates to `c / s`).
fn smaller_quadratic_root(a: f64, s: f64, c: f64) -> Option<f64> {
    let disc = s * s - 4.0 * a * c;
    if disc < 0.0 || s <= 0.0 {
        return None;
    }
    let denom = s + disc.sqrt();
    if denom <= 0.0 {
        // s > 0 and disc >= 0 make this unreachable unless c = a = 0.
        return Some(0.0);
    }
    Some(2.0 * c / denom)
}

impl ConvergenceCertificate {
    /// Certificate from the four problem moduli and the discount rate.
    pub fn from_moduli(gamma: f64, b: f64, m_bound: f64, bnb_norm: f64, discount: f64) -> Self {
        let spread = discount - 2.0 * gamma;
        let product = m_bound * bnb_norm;
        let alpha_ok = spread > 0.0 && spread > 2.0 * product.sqrt();
        let beta = if product > 0.0 {
            spread * spread / (4.0 * product)
        } else {
            f64::INFINITY
        };
        let mut varpi = f64::NAN;
        let mut nu = f64::NAN;
        let mut b_ok = false;
        if alpha_ok {
            varpi = smaller_quadratic_root(bnb_norm, spread, m_bound)
                .expect("alpha_ok guarantees a real root");
            // Sufficient smallness of b, plus solvability of the nu equation
            // (the latter is implied only when m_bound >= 1, so check both).
            let b_limit = if m_bound > 0.0 && beta.is_finite() {
                (bnb_norm / m_bound).sqrt() * (beta - 1.0) / (beta.sqrt() - (beta - 1.0).sqrt())
            } else {
                f64::INFINITY
            };
            if b < b_limit || b == 0.0 {
                if let Some(root) = smaller_quadratic_root(bnb_norm, spread, m_bound + b * varpi) {
                    nu = root;
                    b_ok = true;
                }
            }
        }
        Self {
            gamma,
            b,
            m_bound,
            bnb_norm,
            discount,
            beta,
            varpi,
            nu,
            alpha_ok,
            b_ok,
        }
    }

    /// Both conditions hold and the cone bounds exist.
    pub fn passes(&self) -> bool {
        self.alpha_ok && self.b_ok
    }

    /// Smallest discount for which `alpha_ok` holds given the moduli.
    pub fn discount_threshold(&self) -> f64 {
        2.0 * self.gamma + 2.0 * (self.m_bound * self.bnb_norm).sqrt()
    }

    /// Contraction factor `(γ + bnb·ν)/(α - γ - bnb·ϖ)` of the fixed-point
    /// map on the certified cone; below 1 whenever the certificate passes.
    pub fn contraction_factor(&self) -> f64 {
        (self.gamma + self.bnb_norm * self.nu)
            / (self.discount - self.gamma - self.bnb_norm * self.varpi)
    }
}

/// Certificate for a linear-quadratic problem: `γ = |A|`, `b = 0`,
/// `m_bound = |M|`, so `ϖ = ν`.
pub fn compute_certificate(p: &LqProblem) -> Result<ConvergenceCertificate, LqrError> {
    let gamma = spectral_norm(&p.dynamics)?;
    let m_bound = spectral_norm(&p.state_cost)?;
    let bnb_norm = spectral_norm(&p.bnb)?;
    Ok(ConvergenceCertificate::from_moduli(
        gamma, 0.0, m_bound, bnb_norm, p.discount,
    ))
}

/// Outcome of one linear-system step of the Riccati iteration.
#[derive(Debug, Clone)]
pub struct RiccatiStep {
    pub next: Matrix,
    /// Relative residual of the linear solve.
    pub solve_residual: f64,
    /// Condition number of the stepped system `αI - A + B N^{-1} B^T P_k`.
    pub condition: f64,
}

fn solve_step(p: &LqProblem, p_k: &Matrix) -> Result<RiccatiStep, (f64, String)> {
    // P_{k+1} multiplies from the left as the iteration is stated, so solve
    // the transposed system K^T X = R^T and return X^T.
    let n = p.state_dim();
    let system = Matrix::identity(n, n) * p.discount - &p.dynamics + &p.bnb * p_k;
    let rhs = &p.state_cost + p.dynamics.transpose() * p_k;

    let sv = system.clone().singular_values();
    let smax = sv.iter().cloned().fold(0.0f64, f64::max);
    let smin = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    let condition = if smin > 0.0 { smax / smin } else { f64::INFINITY };

    let lu = system.transpose().lu();
    let rhs_t = rhs.transpose();
    let mut x = match lu.solve(&rhs_t) {
        Some(x) => x,
        None => return Err((smin, "LU solve failed".to_string())),
    };
    // One round of iterative refinement keeps the relative solve residual at
    // the 1e-12 contract even for moderately conditioned systems.
    let scale = rhs_t.amax().max(1.0);
    for _ in 0..2 {
        let resid = &rhs_t - system.transpose() * &x;
        if resid.amax() <= 1e-13 * scale {
            break;
        }
        if let Some(corr) = lu.solve(&resid) {
            x += corr;
        } else {
            break;
        }
    }
    let resid = (&rhs_t - system.transpose() * &x).amax() / scale;
    if !x.iter().all(|v| v.is_finite()) {
        return Err((smin, "solution is non-finite".to_string()));
    }
    Ok(RiccatiStep {
        next: x.transpose(),
        solve_residual: resid,
        condition,
    })
}

/// One fixed-point update `P_{k+1}(αI - A + B N^{-1} B^T P_k) = M + A^T P_k`.
pub fn riccati_step(p: &LqProblem, p_k: &Matrix) -> Result<RiccatiStep, LqrError> {
    ensure_finite_matrix(p_k)?;
    solve_step(p, p_k).map_err(|(min_singular, _)| LqrError::SingularStep {
        iteration: 0,
        min_singular,
        partial: IterationTrace::new(f64::NAN),
    })
}

/// Result of running the Riccati iteration to tolerance.
#[derive(Debug, Clone)]
pub struct RiccatiSolution {
    pub p: Matrix,
    pub trace: IterationTrace,
}

/// Iterates [`riccati_step`] from `p0` until the spectral distance between
/// consecutive iterates falls below `tol` or `max_iter` is reached.
///
/// Divergence (distance beyond the blow-up limit) is a recorded outcome, not
/// an error; only a singular linear system aborts the run.
pub fn solve_riccati(
    p: &LqProblem,
    p0: &Matrix,
    tol: f64,
    max_iter: usize,
) -> Result<RiccatiSolution, LqrError> {
    let n = p.state_dim();
    if p0.nrows() != n || p0.ncols() != n {
        return Err(LqrError::Dimensions(format!(
            "initial iterate must be {n}x{n}, got {}x{}",
            p0.nrows(),
            p0.ncols()
        )));
    }
    ensure_finite_matrix(p0)?;
    let mut trace = IterationTrace::new(tol);
    let mut current = p0.clone();
    for k in 0..max_iter {
        let step = match solve_step(p, &current) {
            Ok(s) => s,
            Err((min_singular, _)) => {
                return Err(LqrError::SingularStep {
                    iteration: k,
                    min_singular,
                    partial: trace,
                });
            }
        };
        let distance = spectral_norm(&(&step.next - &current))?;
        current = step.next;
        if !trace.record(distance) {
            break;
        }
    }
    Ok(RiccatiSolution { p: current, trace })
}

/// Spectral norm of `αP - M - A^T P - P A + P B N^{-1} B^T P`.
pub fn riccati_residual(p: &LqProblem, candidate: &Matrix) -> Result<f64, LqrError> {
    let n = p.state_dim();
    if candidate.nrows() != n || candidate.ncols() != n {
        return Err(LqrError::Dimensions(format!(
            "candidate must be {n}x{n}, got {}x{}",
            candidate.nrows(),
            candidate.ncols()
        )));
    }
    let res = candidate * p.discount
        - &p.state_cost
        - p.dynamics.transpose() * candidate
        - candidate * &p.dynamics
        + candidate * &p.bnb * candidate;
    Ok(spectral_norm(&res)?)
}

/// Value, feedback action, and value gradient at `x` for a quadratic value
/// `u(x) = x^T P x / 2`:
/// `λ = P x`, `a = -N^{-1} B^T λ`, `α u = F(x) + a^T N a / 2 + λ·(Ax + Ba)`.
pub fn lq_value_and_feedback(
    p: &LqProblem,
    riccati: &Matrix,
    x: &Vector,
) -> Result<(f64, Vector, Vector), LqrError> {
    let n = p.state_dim();
    if x.len() != n {
        return Err(LqrError::Dimensions(format!(
            "state must have length {n}, got {}",
            x.len()
        )));
    }
    let sym = (riccati + riccati.transpose()) * 0.5;
    let lambda = &sym * x;
    let action = -(&p.n_inv_bt * &lambda);
    let drift = &p.dynamics * x + &p.control * &action;
    let running = 0.5 * x.dot(&(&p.state_cost * x))
        + 0.5 * action.dot(&(&p.action_cost * &action));
    let value = (running + lambda.dot(&drift)) / p.discount;
    Ok((value, action, lambda))
}
