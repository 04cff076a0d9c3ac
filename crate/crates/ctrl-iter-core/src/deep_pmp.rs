//! Training continuous-depth models as a control problem.
//!
//! The model state obeys `dX/dt = f(X, θ_t, t)` on `[0, T]` with
//! `X_0 = χ(x)`; the prediction is `g(X_T)` and the objective
//!
//! ```text
//! J(θ) = Σ_m (y_m - g(X_T^m))^2 + ∫_0^T L(θ_t) dt,   L(θ) = reg ‖θ‖².
//! ```
//!
//! Stationarity couples each sample's forward trajectory to an adjoint
//! `-dp/dt = (D_x f)^T p` with terminal value `D_x Φ(X_T)`, and the optimal
//! control minimizes the summed Hamiltonian `Σ_m p·f(X, θ, t) + L(θ)` at
//! almost every time. The trainer alternates forward/backward integration
//! with per-node Hamiltonian descent; raw alternation can oscillate, so
//! accepted updates are damped until the cost decreases.

use std::sync::Arc;

use rayon::prelude::*;
use thiserror::Error;

use crate::approx::Activation;
use crate::numerics::{Matrix, Vector};

#[derive(Debug, Error)]
pub enum PmpError {
    #[error("dimension mismatch: {0}")]
    Dimensions(String),
    #[error("forward state diverged for sample {sample} at node {node}")]
    ForwardDivergence { sample: usize, node: usize },
    #[error("non-finite Hamiltonian at node {0}")]
    NonFiniteHamiltonian(usize),
    #[error("training set parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
}

/// Right-hand side `f(X, θ, t)` of the depth dynamics.
pub enum NetDynamics {
    /// `σ(W X + b)` with `θ = (W row-major, b)`; Jacobians are analytic.
    SingleLayer { activation: Activation },
    /// User-supplied dynamics with its state-Jacobian and the
    /// parameter-gradient contraction `θ ↦ (D_θ f)^T p`.
    Custom {
        param_dim: usize,
        f: Arc<dyn Fn(&Vector, &Vector, f64) -> Vector + Send + Sync>,
        jac_x: Arc<dyn Fn(&Vector, &Vector, f64) -> Matrix + Send + Sync>,
        grad_theta: Arc<dyn Fn(&Vector, &Vector, f64, &Vector) -> Vector + Send + Sync>,
    },
}

/// Time integrator for the depth variable.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DepthIntegrator {
    /// One classical 4th-order step per grid interval.
    Rk4,
    /// Forward Euler; reproduces the layered network arithmetic exactly.
    Euler,
}

/// A continuous-depth network: dynamics, input and output maps, horizon,
/// and the time grid the control lives on.
pub struct ContinuousNet {
    pub state_dim: usize,
    pub dynamics: NetDynamics,
    /// Input embedding `χ`; `None` means the identity (input dim = state dim).
    pub input_map: Option<Arc<dyn Fn(&Vector) -> Vector + Send + Sync>>,
    /// Scalar output map `g` and its gradient.
    pub output: Arc<dyn Fn(&Vector) -> f64 + Send + Sync>,
    pub output_gradient: Arc<dyn Fn(&Vector) -> Vector + Send + Sync>,
    pub horizon: f64,
    /// Number of grid intervals (the control is piecewise constant on them).
    pub steps: usize,
    pub integrator: DepthIntegrator,
}

impl ContinuousNet {
    /// Single hidden layer `σ(W X + b)` with first-component readout.
    pub fn single_layer(
        state_dim: usize,
        activation: Activation,
        horizon: f64,
        steps: usize,
    ) -> Self {
        Self {
            state_dim,
            dynamics: NetDynamics::SingleLayer { activation },
            input_map: None,
            output: Arc::new(|x: &Vector| x[0]),
            output_gradient: Arc::new(|x: &Vector| {
                let mut g = Vector::zeros(x.len());
                g[0] = 1.0;
                g
            }),
            horizon,
            steps,
            integrator: DepthIntegrator::Rk4,
        }
    }

    pub fn param_dim(&self) -> usize {
        match &self.dynamics {
            NetDynamics::SingleLayer { .. } => self.state_dim * (self.state_dim + 1),
            NetDynamics::Custom { param_dim, .. } => *param_dim,
        }
    }

    pub fn step_size(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    fn field(&self, x: &Vector, theta: &Vector, t: f64) -> Vector {
        match &self.dynamics {
            NetDynamics::SingleLayer { activation } => {
                let n = self.state_dim;
                let mut z = Vector::zeros(n);
                for i in 0..n {
                    let mut acc = theta[n * n + i]; // bias
                    for j in 0..n {
                        acc += theta[i * n + j] * x[j];
                    }
                    z[i] = activation.apply(acc);
                }
                z
            }
            NetDynamics::Custom { f, .. } => f(x, theta, t),
        }
    }

    fn jac_x(&self, x: &Vector, theta: &Vector, t: f64) -> Matrix {
        match &self.dynamics {
            NetDynamics::SingleLayer { activation } => {
                let n = self.state_dim;
                let mut jac = Matrix::zeros(n, n);
                for i in 0..n {
                    let mut acc = theta[n * n + i];
                    for j in 0..n {
                        acc += theta[i * n + j] * x[j];
                    }
                    let s = activation.derivative(acc);
                    for j in 0..n {
                        jac[(i, j)] = s * theta[i * n + j];
                    }
                }
                jac
            }
            NetDynamics::Custom { jac_x, .. } => jac_x(x, theta, t),
        }
    }

    /// `(D_θ f)^T p` at one state.
    fn grad_theta(&self, x: &Vector, theta: &Vector, t: f64, p: &Vector) -> Vector {
        match &self.dynamics {
            NetDynamics::SingleLayer { activation } => {
                let n = self.state_dim;
                let mut g = Vector::zeros(n * (n + 1));
                for i in 0..n {
                    let mut acc = theta[n * n + i];
                    for j in 0..n {
                        acc += theta[i * n + j] * x[j];
                    }
                    let s = activation.derivative(acc) * p[i];
                    for j in 0..n {
                        g[i * n + j] = s * x[j];
                    }
                    g[n * n + i] = s;
                }
                g
            }
            NetDynamics::Custom { grad_theta, .. } => grad_theta(x, theta, t, p),
        }
    }

    fn embed(&self, input: &Vector) -> Result<Vector, PmpError> {
        match &self.input_map {
            Some(chi) => Ok(chi(input)),
            None => {
                if input.len() != self.state_dim {
                    return Err(PmpError::Dimensions(format!(
                        "identity input map needs inputs of length {}, got {}",
                        self.state_dim,
                        input.len()
                    )));
                }
                Ok(input.clone())
            }
        }
    }
}

/// Piecewise-constant control: one parameter vector per grid interval.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlPath {
    pub values: Vec<Vector>,
}

impl ControlPath {
    pub fn constant(theta: Vector, steps: usize) -> Self {
        Self {
            values: vec![theta; steps],
        }
    }

    pub fn zeros(net: &ContinuousNet) -> Self {
        Self::constant(Vector::zeros(net.param_dim()), net.steps)
    }

    fn check(&self, net: &ContinuousNet) -> Result<(), PmpError> {
        if self.values.len() != net.steps {
            return Err(PmpError::Dimensions(format!(
                "control path has {} nodes, grid has {} intervals",
                self.values.len(),
                net.steps
            )));
        }
        if let Some(bad) = self.values.iter().find(|v| v.len() != net.param_dim()) {
            return Err(PmpError::Dimensions(format!(
                "parameter vector of length {} (expected {})",
                bad.len(),
                net.param_dim()
            )));
        }
        Ok(())
    }
}

/// Samples `(x_m, y_m)` with the quadratic regularization weight for
/// `L(θ) = reg_weight ‖θ‖²`.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    pub inputs: Vec<Vector>,
    pub targets: Vec<f64>,
    pub reg_weight: f64,
}

impl TrainingSet {
    pub fn new(inputs: Vec<Vector>, targets: Vec<f64>, reg_weight: f64) -> Result<Self, PmpError> {
        if inputs.is_empty() || inputs.len() != targets.len() {
            return Err(PmpError::Dimensions(format!(
                "need matching nonempty inputs/targets, got {} and {}",
                inputs.len(),
                targets.len()
            )));
        }
        Ok(Self {
            inputs,
            targets,
            reg_weight,
        })
    }

    /// Parse delimited text: one sample per line, `input_dim` numbers then
    /// the target, separated by whitespace or commas; `#` starts a comment.
    pub fn from_delimited(text: &str, input_dim: usize, reg_weight: f64) -> Result<Self, PmpError> {
        let mut inputs = Vec::new();
        let mut targets = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let nums: Result<Vec<f64>, _> = body
                .split(|c: char| c.is_whitespace() || c == ',')
                .filter(|s| !s.is_empty())
                .map(str::parse::<f64>)
                .collect();
            let nums = nums.map_err(|e| PmpError::Parse {
                line: idx + 1,
                message: format!("bad number: {e}"),
            })?;
            if nums.len() != input_dim + 1 {
                return Err(PmpError::Parse {
                    line: idx + 1,
                    message: format!("expected {} numbers, got {}", input_dim + 1, nums.len()),
                });
            }
            inputs.push(Vector::from_vec(nums[..input_dim].to_vec()));
            targets.push(nums[input_dim]);
        }
        Self::new(inputs, targets, reg_weight)
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

/// Per-sample states at the `steps + 1` grid nodes.
pub type ForwardStates = Vec<Vec<Vector>>;
/// Per-sample adjoints at the `steps + 1` grid nodes.
pub type AdjointStates = Vec<Vec<Vector>>;

/// Integrate every sample forward through the depth dynamics.
pub fn forward_states(
    net: &ContinuousNet,
    path: &ControlPath,
    data: &TrainingSet,
) -> Result<ForwardStates, PmpError> {
    path.check(net)?;
    let h = net.step_size();
    data.inputs
        .par_iter()
        .enumerate()
        .map(|(sample, input)| {
            let mut states = Vec::with_capacity(net.steps + 1);
            let mut x = net.embed(input)?;
            states.push(x.clone());
            for (i, theta) in path.values.iter().enumerate() {
                let t = h * i as f64;
                x = match net.integrator {
                    DepthIntegrator::Euler => &x + net.field(&x, theta, t) * h,
                    DepthIntegrator::Rk4 => {
                        let k1 = net.field(&x, theta, t);
                        let k2 = net.field(&(&x + &k1 * (h / 2.0)), theta, t + h / 2.0);
                        let k3 = net.field(&(&x + &k2 * (h / 2.0)), theta, t + h / 2.0);
                        let k4 = net.field(&(&x + &k3 * h), theta, t + h);
                        &x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
                    }
                };
                if !x.iter().all(|v| v.is_finite()) {
                    return Err(PmpError::ForwardDivergence {
                        sample,
                        node: i + 1,
                    });
                }
                states.push(x.clone());
            }
            Ok(states)
        })
        .collect()
}

/// Integrate the adjoint `-dp/dt = (D_x f)^T p` backward from
/// `p_T = D_x Φ(X_T) = -2 (y - g(X_T)) Dg(X_T)`, with forward states frozen
/// (linear interpolation supplies the half-step states for the 4th-order
/// integrator).
pub fn backward_adjoints(
    net: &ContinuousNet,
    path: &ControlPath,
    data: &TrainingSet,
    forwards: &ForwardStates,
) -> Result<AdjointStates, PmpError> {
    path.check(net)?;
    if forwards.len() != data.len() {
        return Err(PmpError::Dimensions(format!(
            "forward pass covers {} samples, training set has {}",
            forwards.len(),
            data.len()
        )));
    }
    let h = net.step_size();
    forwards
        .par_iter()
        .zip(&data.targets)
        .map(|(states, target)| {
            let x_t = states.last().expect("nonempty forward trajectory");
            let misfit = target - (net.output)(x_t);
            let mut p = (net.output_gradient)(x_t) * (-2.0 * misfit);
            let mut adj = vec![Vector::zeros(net.state_dim); net.steps + 1];
            adj[net.steps] = p.clone();
            for i in (0..net.steps).rev() {
                let theta = &path.values[i];
                let t = h * i as f64;
                p = match net.integrator {
                    DepthIntegrator::Euler => {
                        // Discrete adjoint of the explicit Euler layer.
                        &p + net.jac_x(&states[i], theta, t).transpose() * &p * h
                    }
                    DepthIntegrator::Rk4 => {
                        let x_left = &states[i];
                        let x_right = &states[i + 1];
                        let x_mid = (x_left + x_right) * 0.5;
                        let rhs = |x: &Vector, q: &Vector, tt: f64| {
                            net.jac_x(x, theta, tt).transpose() * q
                        };
                        let k1 = rhs(x_right, &p, t + h);
                        let k2 = rhs(&x_mid, &(&p + &k1 * (h / 2.0)), t + h / 2.0);
                        let k3 = rhs(&x_mid, &(&p + &k2 * (h / 2.0)), t + h / 2.0);
                        let k4 = rhs(x_left, &(&p + &k3 * h), t);
                        &p + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
                    }
                };
                adj[i] = p.clone();
            }
            Ok(adj)
        })
        .collect()
}

/// Objective `J(θ) = Σ_m (y_m - g(X_T^m))² + h Σ_i L(θ_i)`.
pub fn cost(net: &ContinuousNet, path: &ControlPath, data: &TrainingSet) -> Result<f64, PmpError> {
    let forwards = forward_states(net, path, data)?;
    Ok(cost_given_forwards(net, path, data, &forwards))
}

fn cost_given_forwards(
    net: &ContinuousNet,
    path: &ControlPath,
    data: &TrainingSet,
    forwards: &ForwardStates,
) -> f64 {
    let h = net.step_size();
    let fit: f64 = forwards
        .iter()
        .zip(&data.targets)
        .map(|(states, y)| {
            let pred = (net.output)(states.last().expect("nonempty"));
            (y - pred).powi(2)
        })
        .sum();
    let reg: f64 = path.values.iter().map(|th| th.norm_squared()).sum();
    fit + data.reg_weight * h * reg
}

/// Gradient of `J` with respect to each interval's parameters, assembled
/// from the adjoints by interval trapezoid quadrature of `Σ_m p·D_θ f`.
pub fn cost_gradient_path(
    net: &ContinuousNet,
    path: &ControlPath,
    data: &TrainingSet,
) -> Result<Vec<Vector>, PmpError> {
    let forwards = forward_states(net, path, data)?;
    let adjoints = backward_adjoints(net, path, data, &forwards)?;
    let h = net.step_size();
    let mut grads = Vec::with_capacity(net.steps);
    for i in 0..net.steps {
        let theta = &path.values[i];
        let t = h * i as f64;
        let mut g = Vector::zeros(net.param_dim());
        for (states, adj) in forwards.iter().zip(&adjoints) {
            let left = net.grad_theta(&states[i], theta, t, &adj[i]);
            let right = net.grad_theta(&states[i + 1], theta, t + h, &adj[i + 1]);
            g += (left + right) * (0.5 * h);
        }
        g += theta * (2.0 * data.reg_weight * h);
        grads.push(g);
    }
    Ok(grads)
}

/// Per-node Hamiltonian minimization settings.
#[derive(Debug, Clone, Copy)]
pub struct MsaConfig {
    /// Run the inner descent to stationarity instead of one damped step.
    pub full_argmin: bool,
    /// Fallback learning rate scale when no regularization is present.
    pub fallback_rate: f64,
    /// Backtracking halvings per inner step.
    pub max_halvings: usize,
}

impl Default for MsaConfig {
    fn default() -> Self {
        Self {
            full_argmin: false,
            fallback_rate: 0.5,
            max_halvings: 30,
        }
    }
}

/// One sweep of the successive-approximation update: forward pass, backward
/// pass, then a damped Hamiltonian descent step at every time node.
///
/// The per-node objective is `H_i(θ) = Σ_m p_i^m · f(X_i^m, θ, t_i) + L(θ)`.
/// With dynamics linear in `θ` the Hessian is exactly `2 L''`, so the
/// undamped step with rate `1/(2 reg)` lands on the closed-form minimizer;
/// otherwise backtracking halves the rate until `H` does not increase.
pub fn msa_step(
    net: &ContinuousNet,
    path: &ControlPath,
    data: &TrainingSet,
    config: &MsaConfig,
) -> Result<ControlPath, PmpError> {
    let forwards = forward_states(net, path, data)?;
    let adjoints = backward_adjoints(net, path, data, &forwards)?;
    let h = net.step_size();
    let mut new_values = Vec::with_capacity(net.steps);
    for i in 0..net.steps {
        let t = h * i as f64;
        let hamiltonian = |theta: &Vector| -> f64 {
            let mut acc = data.reg_weight * theta.norm_squared();
            for (states, adj) in forwards.iter().zip(&adjoints) {
                acc += adj[i].dot(&net.field(&states[i], theta, t));
            }
            acc
        };
        let gradient = |theta: &Vector| -> Vector {
            let mut g = theta * (2.0 * data.reg_weight);
            for (states, adj) in forwards.iter().zip(&adjoints) {
                g += net.grad_theta(&states[i], theta, t, &adj[i]);
            }
            g
        };

        let mut theta = path.values[i].clone();
        let inner_steps = if config.full_argmin { 200 } else { 1 };
        for _ in 0..inner_steps {
            let g = gradient(&theta);
            let gnorm = g.norm();
            if gnorm < 1e-12 {
                break;
            }
            let mut rate = if data.reg_weight > 0.0 {
                1.0 / (2.0 * data.reg_weight)
            } else {
                config.fallback_rate / (1.0 + gnorm)
            };
            let h_old = hamiltonian(&theta);
            if !h_old.is_finite() {
                return Err(PmpError::NonFiniteHamiltonian(i));
            }
            let mut accepted = false;
            for _ in 0..=config.max_halvings {
                let candidate = &theta - &g * rate;
                let h_new = hamiltonian(&candidate);
                if h_new.is_finite() && h_new <= h_old {
                    theta = candidate;
                    accepted = true;
                    break;
                }
                rate *= 0.5;
            }
            if !accepted {
                // Keep the previous parameters at this node.
                theta = path.values[i].clone();
                break;
            }
        }
        new_values.push(theta);
    }
    Ok(ControlPath { values: new_values })
}

/// Outcome of [`train`].
#[derive(Debug, Clone)]
pub struct TrainReport {
    pub path: ControlPath,
    /// Accepted cost per epoch, starting with the initial cost.
    pub cost_trace: Vec<f64>,
    pub converged: bool,
    /// No damping factor produced a decrease within the halving budget.
    pub stagnated: bool,
}

/// Safeguarded training loop: each epoch proposes a full sweep and damps it
/// toward the previous path until the cost decreases; the accepted-cost
/// trace is therefore non-increasing. Stops when the improvement falls
/// below `tol`, stagnation is declared after the halving budget, and the
/// best path seen is always returned.
pub fn train(
    net: &ContinuousNet,
    start: ControlPath,
    data: &TrainingSet,
    epochs: usize,
    tol: f64,
) -> Result<TrainReport, PmpError> {
    train_with(net, start, data, epochs, tol, &MsaConfig::default())
}

pub fn train_with(
    net: &ContinuousNet,
    start: ControlPath,
    data: &TrainingSet,
    epochs: usize,
    tol: f64,
    config: &MsaConfig,
) -> Result<TrainReport, PmpError> {
    let mut current = start;
    let mut current_cost = cost(net, &current, data)?;
    let mut trace = vec![current_cost];
    for _ in 0..epochs {
        let proposal = msa_step(net, &current, data, config)?;
        let mut damping = 1.0;
        let mut accepted = None;
        for _ in 0..=30 {
            let trial = ControlPath {
                values: current
                    .values
                    .iter()
                    .zip(&proposal.values)
                    .map(|(old, new)| old * (1.0 - damping) + new * damping)
                    .collect(),
            };
            let trial_cost = cost(net, &trial, data)?;
            if trial_cost < current_cost - 1e-12 {
                accepted = Some((trial, trial_cost));
                break;
            }
            damping *= 0.5;
        }
        match accepted {
            Some((path, new_cost)) => {
                let improvement = current_cost - new_cost;
                current = path;
                current_cost = new_cost;
                trace.push(current_cost);
                if improvement < tol {
                    return Ok(TrainReport {
                        path: current,
                        cost_trace: trace,
                        converged: true,
                        stagnated: false,
                    });
                }
            }
            None => {
                // A proposal that no longer moves the path is a fixed point
                // of the sweep; only a rejected nontrivial move stagnates.
                let proposal_shift = current
                    .values
                    .iter()
                    .zip(&proposal.values)
                    .map(|(old, new)| (new - old).amax())
                    .fold(0.0, f64::max);
                let at_fixed_point = proposal_shift < 1e-10 * (1.0 + current_cost.abs());
                return Ok(TrainReport {
                    path: current,
                    cost_trace: trace,
                    converged: at_fixed_point,
                    stagnated: !at_fixed_point,
                });
            }
        }
    }
    Ok(TrainReport {
        path: current,
        cost_trace: trace,
        converged: false,
        stagnated: false,
    })
}
