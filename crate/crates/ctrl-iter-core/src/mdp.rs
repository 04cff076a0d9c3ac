//! Discounted Markov decision processes on finite state sets: the Markov
//! operator, exact and Monte-Carlo reward-sum evaluation, value iteration,
//! policy iteration, Q-iteration, and a per-state gradient action update for
//! continuous action spaces.
//!
//! Fixture problems load from a plain text format; see [`MdpProblem::parse`].

use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::numerics::{Matrix, Vector};

#[derive(Debug, Error)]
pub enum MdpError {
    #[error("transition row {row} sums to {sum}, expected 1")]
    NotStochastic { row: usize, sum: f64 },
    #[error("transition entry at ({row}, {col}) is {value}, outside [0, 1]")]
    BadProbability { row: usize, col: usize, value: f64 },
    #[error("cost must be nonnegative, found {0}")]
    NegativeCost(f64),
    #[error("discount must lie in (0, 1), got {0}")]
    BadDiscount(f64),
    #[error("dimension mismatch: {0}")]
    Dimensions(String),
    #[error("state index {0} out of range")]
    BadState(usize),
    #[error("evaluation system did not solve")]
    SingularEvaluation,
    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),
    #[error("fixture parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("fixture io error: {0}")]
    Io(#[from] std::io::Error),
}

fn check_stochastic(transition: &Matrix) -> Result<(), MdpError> {
    for i in 0..transition.nrows() {
        let mut sum = 0.0;
        for j in 0..transition.ncols() {
            let v = transition[(i, j)];
            if !(0.0..=1.0 + 1e-12).contains(&v) {
                return Err(MdpError::BadProbability {
                    row: i,
                    col: j,
                    value: v,
                });
            }
            sum += v;
        }
        if (sum - 1.0).abs() > 1e-10 {
            return Err(MdpError::NotStochastic { row: i, sum });
        }
    }
    Ok(())
}

/// Uncontrolled chain: transition matrix, per-state cost, discount in (0,1).
#[derive(Debug, Clone)]
pub struct MarkovChain {
    transition: Matrix,
    reward: Vector,
    alpha: f64,
}

impl MarkovChain {
    pub fn new(transition: Matrix, reward: Vector, alpha: f64) -> Result<Self, MdpError> {
        if transition.nrows() != transition.ncols() {
            return Err(MdpError::Dimensions(format!(
                "transition must be square, got {}x{}",
                transition.nrows(),
                transition.ncols()
            )));
        }
        if reward.len() != transition.nrows() {
            return Err(MdpError::Dimensions(format!(
                "reward length {} does not match {} states",
                reward.len(),
                transition.nrows()
            )));
        }
        check_stochastic(&transition)?;
        if let Some(neg) = reward.iter().find(|v| **v < 0.0) {
            return Err(MdpError::NegativeCost(*neg));
        }
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(MdpError::BadDiscount(alpha));
        }
        Ok(Self {
            transition,
            reward,
            alpha,
        })
    }

    pub fn states(&self) -> usize {
        self.transition.nrows()
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn reward(&self) -> &Vector {
        &self.reward
    }

    pub fn transition(&self) -> &Matrix {
        &self.transition
    }

    /// Smallest horizon with geometric tail `α^n max f / (1-α)` below `tol`.
    pub fn bias_horizon(&self, tol: f64) -> usize {
        let fmax = self.reward.amax().max(f64::MIN_POSITIVE);
        let target = tol * (1.0 - self.alpha) / fmax;
        if target >= 1.0 {
            return 1;
        }
        (target.ln() / self.alpha.ln()).ceil().max(1.0) as usize
    }
}

/// `(Φ g)(x) = Σ_η π(x; η) g(η)`; sup-norm non-expansive.
pub fn apply_markov_operator(chain: &MarkovChain, g: &Vector) -> Result<Vector, MdpError> {
    if g.len() != chain.states() {
        return Err(MdpError::Dimensions(format!(
            "operand length {} does not match {} states",
            g.len(),
            chain.states()
        )));
    }
    Ok(&chain.transition * g)
}

/// Exact discounted reward sum: the unique solution of `u = f + αΦu`,
/// computed as a dense solve of `(I - αΦ) u = f`.
pub fn evaluate_reward_sum(chain: &MarkovChain) -> Result<Vector, MdpError> {
    let n = chain.states();
    let system = Matrix::identity(n, n) - &chain.transition * chain.alpha;
    let lu = system.clone().lu();
    let mut u = lu.solve(&chain.reward).ok_or(MdpError::SingularEvaluation)?;
    // Refine once; α < 1 keeps the system well conditioned, this just pins
    // the residual at the 1e-12 contract.
    let resid = &chain.reward - &system * &u;
    if let Some(corr) = lu.solve(&resid) {
        u += corr;
    }
    Ok(u)
}

/// Seeded Monte-Carlo estimate of the discounted reward sum from state `x`.
///
/// Returns the sample mean and its standard error over `samples` independent
/// trajectories truncated at `horizon` steps (bias at most
/// `α^horizon max f / (1-α)`). Trajectory `ν` uses seed `seed + ν`, so the
/// estimate is reproducible under any parallel schedule.
pub fn monte_carlo_value(
    chain: &MarkovChain,
    x: usize,
    samples: usize,
    horizon: usize,
    seed: u64,
) -> Result<(f64, f64), MdpError> {
    if x >= chain.states() {
        return Err(MdpError::BadState(x));
    }
    if samples == 0 {
        return Err(MdpError::Dimensions("need at least one sample".into()));
    }
    let totals: Vec<f64> = (0..samples)
        .map(|nu| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(nu as u64));
            let mut state = x;
            let mut weight = 1.0;
            let mut total = 0.0;
            for _ in 0..horizon {
                total += weight * chain.reward[state];
                weight *= chain.alpha;
                let draw: f64 = rng.gen_range(0.0..1.0);
                let mut acc = 0.0;
                let mut next = chain.states() - 1;
                for j in 0..chain.states() {
                    acc += chain.transition[(state, j)];
                    if draw < acc {
                        next = j;
                        break;
                    }
                }
                state = next;
            }
            total
        })
        .collect();
    let mean = totals.iter().sum::<f64>() / samples as f64;
    let var = if samples > 1 {
        totals.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (samples - 1) as f64
    } else {
        0.0
    };
    Ok((mean, (var / samples as f64).sqrt()))
}

/// Finite-action decision process: per-action transition kernels and a
/// nonnegative cost table, discounted by `alpha` per period.
#[derive(Debug, Clone)]
pub struct MdpProblem {
    /// One row-stochastic `S x S` kernel per action.
    transitions: Vec<Matrix>,
    /// `S x A` cost table.
    cost: Matrix,
    alpha: f64,
}

impl MdpProblem {
    pub fn new(transitions: Vec<Matrix>, cost: Matrix, alpha: f64) -> Result<Self, MdpError> {
        if transitions.is_empty() {
            return Err(MdpError::Dimensions("need at least one action".into()));
        }
        let s = cost.nrows();
        if cost.ncols() != transitions.len() {
            return Err(MdpError::Dimensions(format!(
                "cost table has {} actions, kernels supply {}",
                cost.ncols(),
                transitions.len()
            )));
        }
        for (a, t) in transitions.iter().enumerate() {
            if t.nrows() != s || t.ncols() != s {
                return Err(MdpError::Dimensions(format!(
                    "kernel for action {a} must be {s}x{s}, got {}x{}",
                    t.nrows(),
                    t.ncols()
                )));
            }
            check_stochastic(t)?;
        }
        if let Some(neg) = cost.iter().find(|v| **v < 0.0) {
            return Err(MdpError::NegativeCost(*neg));
        }
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(MdpError::BadDiscount(alpha));
        }
        Ok(Self {
            transitions,
            cost,
            alpha,
        })
    }

    pub fn states(&self) -> usize {
        self.cost.nrows()
    }

    pub fn actions(&self) -> usize {
        self.cost.ncols()
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn cost(&self, state: usize, action: usize) -> f64 {
        self.cost[(state, action)]
    }

    pub fn kernel(&self, action: usize) -> &Matrix {
        &self.transitions[action]
    }

    /// Chain induced by following `policy` everywhere.
    pub fn chain_under(&self, policy: &Policy) -> Result<MarkovChain, MdpError> {
        let s = self.states();
        policy.check(self)?;
        let mut transition = Matrix::zeros(s, s);
        let mut reward = Vector::zeros(s);
        for x in 0..s {
            let a = policy.actions[x];
            transition
                .row_mut(x)
                .copy_from(&self.transitions[a].row(x));
            reward[x] = self.cost[(x, a)];
        }
        MarkovChain::new(transition, reward, self.alpha)
    }

    /// `f(x, a) + α Σ_η π(x, a; η) u(η)` for every state/action pair.
    fn q_values(&self, u: &Vector) -> Matrix {
        let mut q = self.cost.clone();
        for (a, t) in self.transitions.iter().enumerate() {
            let phi = t * u;
            for x in 0..self.states() {
                q[(x, a)] += self.alpha * phi[x];
            }
        }
        q
    }

    /// Parse the plain-text fixture format:
    ///
    /// ```text
    /// # comments and blank lines are ignored
    /// states 2
    /// actions 2
    /// alpha 0.9
    /// transition 0      # then S rows of S probabilities (row-major)
    /// 0.7 0.3
    /// 0.4 0.6
    /// transition 1
    /// 1.0 0.0
    /// 0.1 0.9
    /// cost              # then S rows of A entries
    /// 1.0 2.0
    /// 0.5 1.5
    /// ```
    pub fn parse(text: &str) -> Result<Self, MdpError> {
        let mut states: Option<usize> = None;
        let mut actions: Option<usize> = None;
        let mut alpha: Option<f64> = None;
        let mut transitions: Vec<Option<Matrix>> = Vec::new();
        let mut cost: Option<Matrix> = None;

        let mut lines = text.lines().enumerate().peekable();
        let parse_err = |line: usize, message: String| MdpError::Parse {
            line: line + 1,
            message,
        };

        fn read_block<'a, I>(
            lines: &mut std::iter::Peekable<I>,
            rows: usize,
            cols: usize,
        ) -> Result<Matrix, (usize, String)>
        where
            I: Iterator<Item = (usize, &'a str)>,
        {
            let mut m = Matrix::zeros(rows, cols);
            let mut row = 0;
            while row < rows {
                let (idx, raw) = lines
                    .next()
                    .ok_or((usize::MAX, "unexpected end of fixture inside block".into()))?;
                let body = raw.split('#').next().unwrap_or("").trim();
                if body.is_empty() {
                    continue;
                }
                let vals: Result<Vec<f64>, _> =
                    body.split_whitespace().map(str::parse::<f64>).collect();
                let vals = vals.map_err(|e| (idx, format!("bad number: {e}")))?;
                if vals.len() != cols {
                    return Err((idx, format!("expected {cols} entries, got {}", vals.len())));
                }
                for (j, v) in vals.iter().enumerate() {
                    m[(row, j)] = *v;
                }
                row += 1;
            }
            Ok(m)
        }

        while let Some((idx, raw)) = lines.next() {
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let mut parts = body.split_whitespace();
            let key = parts.next().unwrap();
            match key {
                "states" => {
                    let v = parts
                        .next()
                        .ok_or_else(|| parse_err(idx, "states needs a value".into()))?;
                    states = Some(
                        v.parse()
                            .map_err(|e| parse_err(idx, format!("bad state count: {e}")))?,
                    );
                }
                "actions" => {
                    let v = parts
                        .next()
                        .ok_or_else(|| parse_err(idx, "actions needs a value".into()))?;
                    let a: usize = v
                        .parse()
                        .map_err(|e| parse_err(idx, format!("bad action count: {e}")))?;
                    actions = Some(a);
                    transitions = vec![None; a];
                }
                "alpha" => {
                    let v = parts
                        .next()
                        .ok_or_else(|| parse_err(idx, "alpha needs a value".into()))?;
                    alpha = Some(
                        v.parse()
                            .map_err(|e| parse_err(idx, format!("bad alpha: {e}")))?,
                    );
                }
                "transition" => {
                    let s = states
                        .ok_or_else(|| parse_err(idx, "states must precede transition".into()))?;
                    let a_total = actions
                        .ok_or_else(|| parse_err(idx, "actions must precede transition".into()))?;
                    let v = parts
                        .next()
                        .ok_or_else(|| parse_err(idx, "transition needs an action index".into()))?;
                    let a: usize = v
                        .parse()
                        .map_err(|e| parse_err(idx, format!("bad action index: {e}")))?;
                    if a >= a_total {
                        return Err(parse_err(idx, format!("action {a} out of range")));
                    }
                    let block = read_block(&mut lines, s, s)
                        .map_err(|(l, m)| parse_err(if l == usize::MAX { idx } else { l }, m))?;
                    transitions[a] = Some(block);
                }
                "cost" => {
                    let s = states
                        .ok_or_else(|| parse_err(idx, "states must precede cost".into()))?;
                    let a = actions
                        .ok_or_else(|| parse_err(idx, "actions must precede cost".into()))?;
                    let block = read_block(&mut lines, s, a)
                        .map_err(|(l, m)| parse_err(if l == usize::MAX { idx } else { l }, m))?;
                    cost = Some(block);
                }
                other => {
                    return Err(parse_err(idx, format!("unknown directive `{other}`")));
                }
            }
        }

        let alpha = alpha.ok_or_else(|| parse_err(0, "missing alpha".into()))?;
        let cost = cost.ok_or_else(|| parse_err(0, "missing cost block".into()))?;
        let transitions: Result<Vec<Matrix>, MdpError> = transitions
            .into_iter()
            .enumerate()
            .map(|(a, t)| t.ok_or_else(|| parse_err(0, format!("missing transition {a}"))))
            .collect();
        Self::new(transitions?, cost, alpha)
    }

    pub fn load_fixture<P: AsRef<Path>>(path: P) -> Result<Self, MdpError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

/// One action per state.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Policy {
    pub actions: Vec<usize>,
}

impl Policy {
    pub fn new(actions: Vec<usize>) -> Self {
        Self { actions }
    }

    /// The myopic start: per state, the action minimizing the one-period
    /// cost (ties to the lowest index).
    pub fn greedy_myopic(p: &MdpProblem) -> Self {
        let actions = (0..p.states())
            .map(|x| argmin_row(&p.cost, x))
            .collect();
        Self { actions }
    }

    fn check(&self, p: &MdpProblem) -> Result<(), MdpError> {
        if self.actions.len() != p.states() {
            return Err(MdpError::Dimensions(format!(
                "policy covers {} states, problem has {}",
                self.actions.len(),
                p.states()
            )));
        }
        if let Some(bad) = self.actions.iter().find(|a| **a >= p.actions()) {
            return Err(MdpError::Dimensions(format!(
                "policy action {bad} out of range"
            )));
        }
        Ok(())
    }
}

fn argmin_row(m: &Matrix, row: usize) -> usize {
    let mut best = 0;
    let mut best_v = f64::INFINITY;
    for a in 0..m.ncols() {
        let v = m[(row, a)];
        if v < best_v {
            best_v = v;
            best = a;
        }
    }
    best
}

/// Value iteration `u_{k+1}(x) = min_a [f(x,a) + αΦ^a u_k(x)]` from
/// `u_0 = 0`; returns the final iterate and the per-iteration sup-changes.
pub fn value_iteration(p: &MdpProblem, iterations: usize) -> (Vector, Vec<f64>) {
    let mut u = Vector::zeros(p.states());
    let mut changes = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let q = p.q_values(&u);
        let next = Vector::from_fn(p.states(), |x, _| {
            (0..p.actions()).map(|a| q[(x, a)]).fold(f64::INFINITY, f64::min)
        });
        changes.push((&next - &u).amax());
        u = next;
    }
    (u, changes)
}

/// Output of [`policy_iteration`].
#[derive(Debug, Clone)]
pub struct PolicyIterationResult {
    pub value: Vector,
    pub policy: Policy,
    /// Sup-change of the value between outer iterations.
    pub value_changes: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Policy iteration: exact evaluation `u = f_a + αΦ^a u` alternating with
/// greedy improvement, until the policy is stable.
pub fn policy_iteration(
    p: &MdpProblem,
    start: Policy,
    max_iter: usize,
) -> Result<PolicyIterationResult, MdpError> {
    start.check(p)?;
    let mut policy = start;
    let mut value = evaluate_reward_sum(&p.chain_under(&policy)?)?;
    let mut value_changes = Vec::new();
    for k in 0..max_iter {
        let q = p.q_values(&value);
        let improved = Policy::new((0..p.states()).map(|x| argmin_row(&q, x)).collect());
        let next_value = evaluate_reward_sum(&p.chain_under(&improved)?)?;
        value_changes.push((&next_value - &value).amax());
        let stable = improved == policy;
        policy = improved;
        value = next_value;
        if stable {
            return Ok(PolicyIterationResult {
                value,
                policy,
                value_changes,
                iterations: k + 1,
                converged: true,
            });
        }
    }
    Ok(PolicyIterationResult {
        value,
        policy,
        value_changes,
        iterations: max_iter,
        converged: false,
    })
}

/// State-action cost table with the first action frozen.
#[derive(Debug, Clone)]
pub struct QTable {
    pub values: Matrix,
    pub iterations: usize,
    pub converged: bool,
}

impl QTable {
    /// `min_a Q(x, a)` per state.
    pub fn greedy_value(&self) -> Vector {
        Vector::from_fn(self.values.nrows(), |x, _| {
            (0..self.values.ncols())
                .map(|a| self.values[(x, a)])
                .fold(f64::INFINITY, f64::min)
        })
    }

    /// Greedy policy (ties to the lowest action index).
    pub fn greedy_policy(&self) -> Policy {
        Policy::new(
            (0..self.values.nrows())
                .map(|x| argmin_row(&self.values, x))
                .collect(),
        )
    }

    /// Sup-norm residual of `Q(x,a) = f(x,a) + αΦ^a (min_a' Q(·,a'))(x)`.
    pub fn bellman_residual(&self, p: &MdpProblem) -> f64 {
        let u = self.greedy_value();
        let target = p.q_values(&u);
        (&self.values - target).amax()
    }
}

/// Q-iteration starting from `Q_0 = f` with the greedy action update:
/// `ū_{k+1}(x) = Q_k(x, a_k(x))`, `Q_{k+1}(x,a) = f(x,a) + αΦ^a ū_{k+1}`.
pub fn q_iteration(p: &MdpProblem, max_iter: usize, tol: f64) -> QTable {
    let mut q = p.cost.clone();
    let mut policy = Policy::greedy_myopic(p);
    for k in 0..max_iter {
        let u_bar = Vector::from_fn(p.states(), |x, _| q[(x, policy.actions[x])]);
        let next = p.q_values(&u_bar);
        let change = (&next - &q).amax();
        q = next;
        policy = Policy::new((0..p.states()).map(|x| argmin_row(&q, x)).collect());
        if change < tol {
            return QTable {
                values: q,
                iterations: k + 1,
                converged: true,
            };
        }
    }
    QTable {
        values: q,
        iterations: max_iter,
        converged: false,
    }
}

/// Brute-force optimum by enumerating all `A^S` deterministic policies and
/// evaluating each exactly. Test oracle for the iterative schemes.
pub fn enumerate_optimal(p: &MdpProblem) -> Result<(Vector, Policy), MdpError> {
    let s = p.states();
    let a = p.actions();
    let total = a.checked_pow(s as u32).ok_or_else(|| {
        MdpError::Dimensions("policy space too large to enumerate".into())
    })?;
    let mut best: Option<(Vector, Policy)> = None;
    for code in 0..total {
        let mut c = code;
        let actions: Vec<usize> = (0..s)
            .map(|_| {
                let act = c % a;
                c /= a;
                act
            })
            .collect();
        let pol = Policy::new(actions);
        let u = evaluate_reward_sum(&p.chain_under(&pol)?)?;
        best = match best {
            None => Some((u, pol)),
            Some((bu, bp)) => {
                // Entrywise comparison: the optimal policy dominates in
                // every state, so a pointwise min also works.
                let better = u.iter().zip(bu.iter()).all(|(n, o)| n <= o);
                if better {
                    Some((u, pol))
                } else {
                    Some((bu, bp))
                }
            }
        };
    }
    Ok(best.expect("at least one policy"))
}

/// Continuous-action decision process over a finite state set: the cost and
/// kernel are callables of `(state, action vector)`, with derivatives by
/// central finite differences when no analytic forms are supplied.
pub struct ContinuousMdp {
    pub states: usize,
    pub action_dim: usize,
    pub cost: Arc<dyn Fn(usize, &Vector) -> f64 + Send + Sync>,
    /// Row of transition probabilities out of `state` under `action`.
    pub kernel: Arc<dyn Fn(usize, &Vector) -> Vector + Send + Sync>,
    /// Analytic action-gradient of the cost, if available.
    pub cost_grad: Option<Arc<dyn Fn(usize, &Vector) -> Vector + Send + Sync>>,
    /// Analytic action-Jacobian of the kernel row, if available.
    pub kernel_jac: Option<Arc<dyn Fn(usize, &Vector) -> Matrix + Send + Sync>>,
    pub alpha: f64,
}

impl ContinuousMdp {
    /// `Q(x, a) = f(x, a) + α Σ_η π(x, a; η) u(η)`.
    pub fn q_value(&self, x: usize, action: &Vector, u: &Vector) -> f64 {
        (self.cost)(x, action) + self.alpha * (self.kernel)(x, action).dot(u)
    }

    fn q_gradient(&self, x: usize, action: &Vector, u: &Vector) -> Vector {
        let fd_step = 1e-5;
        let mut grad = match &self.cost_grad {
            Some(g) => g(x, action),
            None => central_difference(|a| (self.cost)(x, a), action, fd_step),
        };
        match &self.kernel_jac {
            Some(j) => {
                grad += j(x, action).transpose() * u * self.alpha;
            }
            None => {
                let phi = central_difference(|a| (self.kernel)(x, a).dot(u), action, fd_step);
                grad += phi * self.alpha;
            }
        }
        grad
    }
}

fn central_difference<F: Fn(&Vector) -> f64>(f: F, at: &Vector, step: f64) -> Vector {
    Vector::from_fn(at.len(), |i, _| {
        let mut hi = at.clone();
        let mut lo = at.clone();
        hi[i] += step;
        lo[i] -= step;
        (f(&hi) - f(&lo)) / (2.0 * step)
    })
}

/// Golden-section scan of `f` over `[0, hi]` with a fixed evaluation budget.
pub(crate) fn golden_section_min<F: Fn(f64) -> f64>(f: F, hi: f64, evals: usize) -> (f64, f64) {
    let inv_phi = 0.618_033_988_749_894_9_f64;
    let mut a = 0.0;
    let mut b = hi;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    let mut budget = evals.saturating_sub(2);
    while budget > 0 {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
        budget -= 1;
    }
    // Also consider the endpoints of the final bracket.
    let mid = if fc < fd { (c, fc) } else { (d, fd) };
    let f0 = f(0.0);
    let fhi = f(hi);
    let mut best = mid;
    if f0 < best.1 {
        best = (0.0, f0);
    }
    if fhi < best.1 {
        best = (hi, fhi);
    }
    best
}

/// One gradient update of the per-state action:
/// descends `D_a Q(x, a)` with the step chosen by a scalar line search of
/// `Q(x, a - ρ D_a Q)` (golden section, 60 evaluations).
pub fn action_gradient_step(
    p: &ContinuousMdp,
    action: &Vector,
    u: &Vector,
    x: usize,
) -> Result<Vector, MdpError> {
    if x >= p.states {
        return Err(MdpError::BadState(x));
    }
    let grad = p.q_gradient(x, action, u);
    let gnorm = grad.norm();
    if gnorm == 0.0 {
        return Ok(action.clone());
    }
    let rho_max = 10.0 / (1.0 + gnorm);
    let objective = |rho: f64| p.q_value(x, &(action - &grad * rho), u);
    let (rho_star, q_star) = golden_section_min(objective, rho_max, 60);
    if !q_star.is_finite() {
        return Err(MdpError::NonFinite("action line search"));
    }
    Ok(action - &grad * rho_star)
}

/// [`action_gradient_step`] applied at every state.
pub fn action_gradient_sweep(
    p: &ContinuousMdp,
    actions: &[Vector],
    u: &Vector,
) -> Result<Vec<Vector>, MdpError> {
    actions
        .iter()
        .enumerate()
        .map(|(x, a)| action_gradient_step(p, a, u, x))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn two_state_chain() -> MarkovChain {
        MarkovChain::new(
            Matrix::from_row_slice(2, 2, &[0.5, 0.5, 0.5, 0.5]),
            Vector::from_vec(vec![0.0, 2.0]),
            0.5,
        )
        .unwrap()
    }

    fn toy_problem() -> MdpProblem {
        // Two states, two actions: action 1 jumps toward the cheap state.
        MdpProblem::new(
            vec![
                Matrix::from_row_slice(2, 2, &[0.7, 0.3, 0.4, 0.6]),
                Matrix::from_row_slice(2, 2, &[1.0, 0.0, 0.1, 0.9]),
            ],
            Matrix::from_row_slice(2, 2, &[1.0, 2.0, 0.5, 1.5]),
            0.9,
        )
        .unwrap()
    }

    #[test]
    fn operator_identity_and_averaging() {
        let id = MarkovChain::new(
            Matrix::identity(2, 2),
            Vector::from_vec(vec![1.0, 2.0]),
            0.5,
        )
        .unwrap();
        let g = Vector::from_vec(vec![3.0, -1.0]);
        assert_eq!(apply_markov_operator(&id, &g).unwrap(), g);

        let avg = two_state_chain();
        let g = Vector::from_vec(vec![0.0, 2.0]);
        let out = apply_markov_operator(&avg, &g).unwrap();
        assert_eq!(out.as_slice(), &[1.0, 1.0]);
    }

    #[test]
    fn rejects_non_stochastic_rows() {
        let res = MarkovChain::new(
            Matrix::from_row_slice(2, 2, &[0.7, 0.2, 0.4, 0.6]),
            Vector::from_vec(vec![1.0, 1.0]),
            0.5,
        );
        assert!(matches!(res, Err(MdpError::NotStochastic { row: 0, .. })));
    }

    #[test]
    fn reward_sum_identity_chain_is_geometric() {
        let id = MarkovChain::new(
            Matrix::identity(2, 2),
            Vector::from_vec(vec![1.0, 2.0]),
            0.5,
        )
        .unwrap();
        let u = evaluate_reward_sum(&id).unwrap();
        assert_relative_eq!(u[0], 2.0, epsilon = 1e-12);
        assert_relative_eq!(u[1], 4.0, epsilon = 1e-12);
    }

    #[test]
    fn reward_sum_constant_cost() {
        let chain = MarkovChain::new(
            Matrix::from_row_slice(2, 2, &[0.3, 0.7, 0.8, 0.2]),
            Vector::from_vec(vec![1.0, 1.0]),
            0.5,
        )
        .unwrap();
        let u = evaluate_reward_sum(&chain).unwrap();
        assert_relative_eq!(u[0], 2.0, epsilon = 1e-12);
        assert_relative_eq!(u[1], 2.0, epsilon = 1e-12);
    }

    #[test]
    fn reward_sum_matches_neumann_series() {
        let chain = two_state_chain();
        let exact = evaluate_reward_sum(&chain).unwrap();
        let mut series = Vector::zeros(2);
        let mut term = chain.reward().clone();
        for _ in 0..100 {
            series += &term;
            term = apply_markov_operator(&chain, &term).unwrap() * chain.alpha();
        }
        assert!((series - exact).amax() < 1e-10);
    }

    #[test]
    fn monte_carlo_degenerate_chain_has_zero_variance() {
        let id = MarkovChain::new(
            Matrix::identity(2, 2),
            Vector::from_vec(vec![1.0, 5.0]),
            0.5,
        )
        .unwrap();
        let horizon = id.bias_horizon(1e-8);
        let (est, stderr) = monte_carlo_value(&id, 0, 50, horizon, 7).unwrap();
        let bias = 0.5f64.powi(horizon as i32) * 1.0 / 0.5;
        assert!((est - 2.0).abs() <= bias + 1e-12);
        assert_eq!(stderr, 0.0);
    }

    #[test]
    fn monte_carlo_agrees_with_exact_solve() {
        let chain = MarkovChain::new(
            Matrix::from_row_slice(2, 2, &[0.2, 0.8, 0.6, 0.4]),
            Vector::from_vec(vec![1.0, 3.0]),
            0.8,
        )
        .unwrap();
        let exact = evaluate_reward_sum(&chain).unwrap();
        let horizon = chain.bias_horizon(1e-8);
        let (est, stderr) = monte_carlo_value(&chain, 0, 10_000, horizon, 123).unwrap();
        assert!(
            (est - exact[0]).abs() < 4.0 * stderr + 1e-6,
            "estimate {est} vs exact {} (stderr {stderr})",
            exact[0]
        );
    }

    #[test]
    fn value_iteration_geometric_single_action() {
        let p = MdpProblem::new(
            vec![Matrix::identity(2, 2)],
            Matrix::from_element(2, 1, 1.0),
            0.5,
        )
        .unwrap();
        let (u1, _) = value_iteration(&p, 1);
        let (u2, _) = value_iteration(&p, 2);
        let (u3, _) = value_iteration(&p, 3);
        assert_relative_eq!(u1[0], 1.0);
        assert_relative_eq!(u2[0], 1.5);
        assert_relative_eq!(u3[0], 1.75);
    }

    #[test]
    fn value_iteration_monotone_and_contracting() {
        let p = toy_problem();
        let mut prev = Vector::zeros(2);
        let (_, changes) = value_iteration(&p, 60);
        for k in 1..changes.len() {
            assert!(
                changes[k] <= p.alpha() * changes[k - 1] + 1e-12,
                "contraction violated at {k}"
            );
        }
        for k in 1..=60 {
            let (u, _) = value_iteration(&p, k);
            assert!(u.iter().zip(prev.iter()).all(|(n, o)| *n >= *o - 1e-12));
            prev = u;
        }
    }

    #[test]
    fn value_iteration_matches_brute_force() {
        let p = toy_problem();
        let (u, _) = value_iteration(&p, 400);
        let (best, _) = enumerate_optimal(&p).unwrap();
        assert!((u - best).amax() < 1e-10);
    }

    #[test]
    fn policy_iteration_single_action_is_exact_evaluation() {
        let p = MdpProblem::new(
            vec![Matrix::from_row_slice(2, 2, &[0.5, 0.5, 0.2, 0.8])],
            Matrix::from_row_slice(2, 1, &[1.0, 2.0]),
            0.7,
        )
        .unwrap();
        let res = policy_iteration(&p, Policy::greedy_myopic(&p), 10).unwrap();
        assert!(res.converged);
        assert_eq!(res.iterations, 1);
        let chain = p.chain_under(&res.policy).unwrap();
        let exact = evaluate_reward_sum(&chain).unwrap();
        assert!((res.value - exact).amax() < 1e-12);
    }

    #[test]
    fn policy_iteration_matches_brute_force_and_improves_monotonically() {
        let p = toy_problem();
        let res = policy_iteration(&p, Policy::new(vec![1, 0]), 50).unwrap();
        assert!(res.converged);
        let (best_u, best_pol) = enumerate_optimal(&p).unwrap();
        assert_eq!(res.policy, best_pol);
        assert!((res.value.clone() - best_u).amax() < 1e-12);

        // Monotone improvement for cost minimization.
        let mut policy = Policy::new(vec![1, 0]);
        let mut value = evaluate_reward_sum(&p.chain_under(&policy).unwrap()).unwrap();
        for _ in 0..10 {
            let q = p.q_values(&value);
            policy = Policy::new((0..p.states()).map(|x| argmin_row(&q, x)).collect());
            let next = evaluate_reward_sum(&p.chain_under(&policy).unwrap()).unwrap();
            assert!(next.iter().zip(value.iter()).all(|(n, o)| *n <= *o + 1e-12));
            value = next;
        }
    }

    #[test]
    fn bellman_residual_of_policy_iteration_output() {
        let p = toy_problem();
        let res = policy_iteration(&p, Policy::greedy_myopic(&p), 50).unwrap();
        let q = p.q_values(&res.value);
        let greedy = Vector::from_fn(p.states(), |x, _| {
            (0..p.actions()).map(|a| q[(x, a)]).fold(f64::INFINITY, f64::min)
        });
        assert!((greedy - res.value).amax() < 1e-10);
    }

    #[test]
    fn q_iteration_single_action_collapses_to_value() {
        let p = MdpProblem::new(
            vec![Matrix::from_row_slice(2, 2, &[0.5, 0.5, 0.2, 0.8])],
            Matrix::from_row_slice(2, 1, &[1.0, 2.0]),
            0.7,
        )
        .unwrap();
        let table = q_iteration(&p, 2000, 1e-12);
        assert!(table.converged);
        let chain = p.chain_under(&Policy::new(vec![0, 0])).unwrap();
        let u = evaluate_reward_sum(&chain).unwrap();
        assert!((table.greedy_value() - u).amax() < 1e-10);
    }

    #[test]
    fn q_iteration_constant_cost_fixed_point() {
        let p = MdpProblem::new(
            vec![
                Matrix::from_row_slice(2, 2, &[0.5, 0.5, 0.3, 0.7]),
                Matrix::identity(2, 2),
            ],
            Matrix::from_element(2, 2, 1.0),
            0.5,
        )
        .unwrap();
        let table = q_iteration(&p, 500, 1e-12);
        for v in table.values.iter() {
            assert_relative_eq!(*v, 2.0, epsilon = 1e-10);
        }
    }

    #[test]
    fn q_iteration_agrees_with_value_iteration_and_satisfies_bellman() {
        let p = toy_problem();
        let table = q_iteration(&p, 2000, 1e-10);
        assert!(table.converged);
        assert!(table.bellman_residual(&p) < 1e-9);
        let (u, _) = value_iteration(&p, 500);
        assert!((table.greedy_value() - u).amax() < 1e-8);
    }

    #[test]
    fn constant_cost_shift_moves_value_by_geometric_factor() {
        let p = toy_problem();
        let res = policy_iteration(&p, Policy::greedy_myopic(&p), 50).unwrap();
        let c = 0.75;
        let shifted = MdpProblem::new(
            p.transitions.clone(),
            p.cost.map(|v| v + c),
            p.alpha,
        )
        .unwrap();
        let res2 = policy_iteration(&shifted, Policy::greedy_myopic(&shifted), 50).unwrap();
        let shift = c / (1.0 - p.alpha());
        assert!((res2.value - res.value.map(|v| v + shift)).amax() < 1e-10);
    }

    #[test]
    fn fixture_round_trip() {
        let text = "\
# toy fixture
states 2
actions 2
alpha 0.9
transition 0
0.7 0.3
0.4 0.6
transition 1
1.0 0.0
0.1 0.9
cost
1.0 2.0
0.5 1.5
";
        let p = MdpProblem::parse(text).unwrap();
        assert_eq!(p.states(), 2);
        assert_eq!(p.actions(), 2);
        let reference = toy_problem();
        assert_eq!(p.cost, reference.cost);
        assert_eq!(p.transitions[1], reference.transitions[1]);
    }

    #[test]
    fn fixture_reports_line_numbers() {
        let text = "states 2\nactions 1\nalpha 0.9\ntransition 0\n0.7 oops\n0.4 0.6\ncost\n1\n1\n";
        match MdpProblem::parse(text) {
            Err(MdpError::Parse { line, .. }) => assert_eq!(line, 5),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn gradient_step_lands_on_quadratic_minimum() {
        // Q(x, a) = (a - 1)^2 + 2: state-independent, kernel constant.
        let p = ContinuousMdp {
            states: 1,
            action_dim: 1,
            cost: Arc::new(|_, a: &Vector| (a[0] - 1.0).powi(2) + 2.0),
            kernel: Arc::new(|_, _: &Vector| Vector::from_vec(vec![1.0])),
            cost_grad: None,
            kernel_jac: None,
            alpha: 0.5,
        };
        let u = Vector::zeros(1);
        let a0 = Vector::from_vec(vec![0.0]);
        let a1 = action_gradient_step(&p, &a0, &u, 0).unwrap();
        assert!((a1[0] - 1.0).abs() < 1e-6, "got {}", a1[0]);
    }

    #[test]
    fn gradient_step_stationary_at_zero_gradient() {
        let p = ContinuousMdp {
            states: 1,
            action_dim: 2,
            cost: Arc::new(|_, a: &Vector| a.norm_squared()),
            kernel: Arc::new(|_, _: &Vector| Vector::from_vec(vec![1.0])),
            cost_grad: Some(Arc::new(|_, a: &Vector| a * 2.0)),
            kernel_jac: Some(Arc::new(|_, _: &Vector| Matrix::zeros(1, 2))),
            alpha: 0.5,
        };
        let u = Vector::zeros(1);
        let at_min = Vector::zeros(2);
        let stepped = action_gradient_step(&p, &at_min, &u, 0).unwrap();
        assert_eq!(stepped, at_min);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn markov_operator_is_non_expansive(
            g0 in -10.0f64..10.0,
            g1 in -10.0f64..10.0,
            p0 in 0.0f64..1.0,
            p1 in 0.0f64..1.0,
        ) {
            let chain = MarkovChain::new(
                Matrix::from_row_slice(2, 2, &[p0, 1.0 - p0, p1, 1.0 - p1]),
                Vector::zeros(2),
                0.5,
            ).unwrap();
            let g = Vector::from_vec(vec![g0, g1]);
            let out = apply_markov_operator(&chain, &g).unwrap();
            prop_assert!(out.amax() <= g.amax() + 1e-12);
        }
    }
}
