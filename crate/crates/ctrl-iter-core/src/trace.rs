//! Successive-iterate distance traces shared by the fixed-point solvers.

/// Distance threshold beyond which an iteration is flagged as blown up.
pub const DIVERGENCE_LIMIT: f64 = 1e12;

/// Record of successive-iterate distances for a fixed-point run.
///
/// `converged` means the last recorded distance fell below `tolerance`;
/// `diverged` means a distance exceeded [`DIVERGENCE_LIMIT`] and the run was
/// cut short. Divergence is a reportable outcome, not an error.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationTrace {
    pub distances: Vec<f64>,
    pub tolerance: f64,
    pub converged: bool,
    pub diverged: bool,
}

impl IterationTrace {
    pub fn new(tolerance: f64) -> Self {
        Self {
            distances: Vec::new(),
            tolerance,
            converged: false,
            diverged: false,
        }
    }

    /// Number of recorded iterations.
    pub fn iterations(&self) -> usize {
        self.distances.len()
    }

    pub fn last_distance(&self) -> Option<f64> {
        self.distances.last().copied()
    }

    /// Push a distance and update the `converged`/`diverged` flags.
    /// Returns `true` while the iteration should continue.
    pub fn record(&mut self, distance: f64) -> bool {
        self.distances.push(distance);
        if !distance.is_finite() || distance > DIVERGENCE_LIMIT {
            self.diverged = true;
            self.converged = false;
            return false;
        }
        self.converged = distance < self.tolerance;
        !self.converged
    }
}
