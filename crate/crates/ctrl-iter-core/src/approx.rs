//! Function approximation: regularized parametric least squares on a feature
//! basis, single-hidden-layer feature maps, and Gaussian-kernel (RKHS)
//! regression. Backs the interpolated gradient fields used by the nonlinear
//! solver.
//!
//! The fitting objectives are collocation least squares: a sum of squared
//! residuals over a user-declared sample set plus a quadratic penalty. A
//! sup-norm variant of the same objective would need a different solver
//! class; the collocation relaxation converges to it as the sample set
//! densifies, and is flagged here as a deliberate choice.

use std::sync::Arc;

use nalgebra::Cholesky;
use thiserror::Error;

use crate::numerics::{Matrix, Vector};

#[derive(Debug, Error)]
pub enum ApproxError {
    #[error("no training points supplied")]
    EmptyTrainingSet,
    #[error("training points and targets disagree: {points} points, {targets} targets")]
    LengthMismatch { points: usize, targets: usize },
    #[error("design matrix is rank-deficient with zero regularization; supply gamma > 0")]
    RankDeficient,
    #[error("gram system is numerically singular (gamma = 0 with duplicate points?)")]
    SingularGram,
    #[error("regularization must be nonnegative, got {0}")]
    NegativeRegularization(f64),
    #[error("bandwidth must be positive, got {0}")]
    BadBandwidth(f64),
    #[error("input dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
}

/// Elementwise activation for the single-hidden-layer feature map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
}

impl Activation {
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
            Activation::Sigmoid => 1.0 / (1.0 + (-z).exp()),
        }
    }

    /// Derivative; ReLU uses the subgradient convention `0` at the kink.
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - z.tanh().powi(2),
            Activation::Sigmoid => {
                let s = 1.0 / (1.0 + (-z).exp());
                s * (1.0 - s)
            }
        }
    }
}

/// Hidden-layer features `σ(W x + b)` applied elementwise.
pub fn single_layer_features(
    weights: &Matrix,
    bias: &Vector,
    activation: Activation,
    x: &Vector,
) -> Result<Vector, ApproxError> {
    if weights.ncols() != x.len() {
        return Err(ApproxError::DimensionMismatch {
            expected: weights.ncols(),
            got: x.len(),
        });
    }
    if weights.nrows() != bias.len() {
        return Err(ApproxError::DimensionMismatch {
            expected: weights.nrows(),
            got: bias.len(),
        });
    }
    let mut z = weights * x + bias;
    for v in z.iter_mut() {
        *v = activation.apply(*v);
    }
    Ok(z)
}

/// A family of scalar feature functions evaluated at points of `R^d`.
#[derive(Clone)]
pub enum BasisFamily {
    /// Arbitrary user-supplied feature functions.
    Custom(Vec<Arc<dyn Fn(&Vector) -> f64 + Send + Sync>>),
    /// `1, x_1, ..., x_d` — exact for affine targets.
    Affine { dim: usize },
    /// Features `σ(W x + b)` with fixed weights.
    SingleLayer {
        weights: Matrix,
        bias: Vector,
        activation: Activation,
    },
}

impl BasisFamily {
    pub fn len(&self) -> usize {
        match self {
            BasisFamily::Custom(fs) => fs.len(),
            BasisFamily::Affine { dim } => dim + 1,
            BasisFamily::SingleLayer { bias, .. } => bias.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn features(&self, x: &Vector) -> Result<Vector, ApproxError> {
        match self {
            BasisFamily::Custom(fs) => Ok(Vector::from_iterator(fs.len(), fs.iter().map(|f| f(x)))),
            BasisFamily::Affine { dim } => {
                if x.len() != *dim {
                    return Err(ApproxError::DimensionMismatch {
                        expected: *dim,
                        got: x.len(),
                    });
                }
                let mut v = Vector::zeros(dim + 1);
                v[0] = 1.0;
                v.rows_mut(1, *dim).copy_from(x);
                Ok(v)
            }
            BasisFamily::SingleLayer {
                weights,
                bias,
                activation,
            } => single_layer_features(weights, bias, *activation, x),
        }
    }
}

/// Gaussian RBF kernel configuration with ridge regularization.
#[derive(Debug, Clone, Copy)]
pub struct KernelSpec {
    /// Bandwidth of `exp(-|x - y|^2 / (2 bw^2))`.
    pub bandwidth: f64,
    /// Ridge weight on the RKHS norm.
    pub regularization: f64,
}

impl KernelSpec {
    pub fn new(bandwidth: f64, regularization: f64) -> Result<Self, ApproxError> {
        if !(bandwidth > 0.0 && bandwidth.is_finite()) {
            return Err(ApproxError::BadBandwidth(bandwidth));
        }
        if regularization < 0.0 {
            return Err(ApproxError::NegativeRegularization(regularization));
        }
        Ok(Self {
            bandwidth,
            regularization,
        })
    }

    /// Median pairwise distance of the training points (the median
    /// heuristic); falls back to 1 when all points coincide.
    pub fn median_heuristic(points: &[Vector], regularization: f64) -> Result<Self, ApproxError> {
        if points.is_empty() {
            return Err(ApproxError::EmptyTrainingSet);
        }
        let mut dists = Vec::with_capacity(points.len() * (points.len() - 1) / 2);
        for (i, a) in points.iter().enumerate() {
            for b in points.iter().skip(i + 1) {
                dists.push((a - b).norm());
            }
        }
        dists.retain(|d| *d > 0.0);
        let bandwidth = if dists.is_empty() {
            1.0
        } else {
            dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
            dists[dists.len() / 2]
        };
        Self::new(bandwidth, regularization)
    }

    pub fn eval(&self, a: &Vector, b: &Vector) -> f64 {
        let d2 = (a - b).norm_squared();
        (-d2 / (2.0 * self.bandwidth * self.bandwidth)).exp()
    }
}

/// Targets for a fit: one scalar or one row of outputs per point.
fn targets_to_matrix(ys: &[Vector], rows: usize) -> Result<Matrix, ApproxError> {
    if ys.is_empty() {
        return Err(ApproxError::EmptyTrainingSet);
    }
    if ys.len() != rows {
        return Err(ApproxError::LengthMismatch {
            points: rows,
            targets: ys.len(),
        });
    }
    let out_dim = ys[0].len();
    let mut m = Matrix::zeros(rows, out_dim);
    for (i, y) in ys.iter().enumerate() {
        if y.len() != out_dim {
            return Err(ApproxError::DimensionMismatch {
                expected: out_dim,
                got: y.len(),
            });
        }
        m.row_mut(i).copy_from(&y.transpose());
    }
    Ok(m)
}

enum ModelKind {
    Parametric {
        basis: BasisFamily,
        /// One coefficient column per output component.
        coefficients: Matrix,
    },
    Kernel {
        spec: KernelSpec,
        points: Vec<Vector>,
        /// One dual-coefficient column per output component.
        coefficients: Matrix,
    },
}

/// A fitted approximation model; evaluation is deterministic and pure.
pub struct FittedModel {
    kind: ModelKind,
    /// Frobenius norm of the training residuals.
    pub residual_norm: f64,
    /// Reciprocal condition estimate of the solved normal system.
    pub condition_estimate: f64,
}

impl FittedModel {
    /// Number of output components produced per prediction.
    pub fn output_dim(&self) -> usize {
        match &self.kind {
            ModelKind::Parametric { coefficients, .. } => coefficients.ncols(),
            ModelKind::Kernel { coefficients, .. } => coefficients.ncols(),
        }
    }

    /// Evaluate the model; vector-valued targets were fitted componentwise.
    pub fn predict(&self, x: &Vector) -> Result<Vector, ApproxError> {
        match &self.kind {
            ModelKind::Parametric {
                basis,
                coefficients,
            } => {
                let phi = basis.features(x)?;
                Ok(coefficients.transpose() * phi)
            }
            ModelKind::Kernel {
                spec,
                points,
                coefficients,
            } => {
                if points[0].len() != x.len() {
                    return Err(ApproxError::DimensionMismatch {
                        expected: points[0].len(),
                        got: x.len(),
                    });
                }
                let k = Vector::from_iterator(points.len(), points.iter().map(|p| spec.eval(x, p)));
                Ok(coefficients.transpose() * k)
            }
        }
    }

    /// Convenience accessor for scalar-output models.
    pub fn predict_scalar(&self, x: &Vector) -> Result<f64, ApproxError> {
        Ok(self.predict(x)?[0])
    }
}

fn cholesky_with_cond(system: &Matrix) -> Option<(Cholesky<f64, nalgebra::Dyn>, f64)> {
    let chol = Cholesky::new(system.clone())?;
    let diag = chol.l_dirty().diagonal();
    let dmax = diag.iter().cloned().fold(0.0f64, f64::max);
    let dmin = diag.iter().cloned().fold(f64::INFINITY, f64::min);
    let cond = if dmin > 0.0 {
        (dmax / dmin).powi(2)
    } else {
        f64::INFINITY
    };
    Some((chol, cond))
}

/// Ridge regression on a feature basis:
/// minimizes `gamma |theta|^2 + sum_m |Phi(x_m) theta - y_m|^2`
/// via the normal equations `(gamma I + Phi^T Phi) theta = Phi^T y`.
pub fn fit_parametric(
    basis: &BasisFamily,
    xs: &[Vector],
    ys: &[Vector],
    gamma: f64,
) -> Result<FittedModel, ApproxError> {
    if gamma < 0.0 {
        return Err(ApproxError::NegativeRegularization(gamma));
    }
    if xs.is_empty() {
        return Err(ApproxError::EmptyTrainingSet);
    }
    let y = targets_to_matrix(ys, xs.len())?;
    let n_feat = basis.len();
    let mut design = Matrix::zeros(xs.len(), n_feat);
    for (i, x) in xs.iter().enumerate() {
        design.row_mut(i).copy_from(&basis.features(x)?.transpose());
    }
    let mut system = design.transpose() * &design;
    for i in 0..n_feat {
        system[(i, i)] += gamma;
    }
    let (chol, cond) = cholesky_with_cond(&system).ok_or(ApproxError::RankDeficient)?;
    let coefficients = chol.solve(&(design.transpose() * &y));
    let residual_norm = (&design * &coefficients - &y).norm();
    Ok(FittedModel {
        kind: ModelKind::Parametric {
            basis: basis.clone(),
            coefficients,
        },
        residual_norm,
        condition_estimate: cond,
    })
}

/// Kernel ridge regression: dual coefficients solve `(gamma I + K) c = y`
/// with `K_{mm'} = k(x_m, x_m')`; predictions are `sum_m c_m k(x, x_m)`.
pub fn fit_kernel(
    spec: KernelSpec,
    xs: &[Vector],
    ys: &[Vector],
) -> Result<FittedModel, ApproxError> {
    if xs.is_empty() {
        return Err(ApproxError::EmptyTrainingSet);
    }
    let y = targets_to_matrix(ys, xs.len())?;
    let m = xs.len();
    let mut gram = Matrix::zeros(m, m);
    for i in 0..m {
        for j in i..m {
            let v = spec.eval(&xs[i], &xs[j]);
            gram[(i, j)] = v;
            gram[(j, i)] = v;
        }
    }
    let mut system = gram.clone();
    for i in 0..m {
        system[(i, i)] += spec.regularization;
    }
    let solved = cholesky_with_cond(&system).or_else(|| {
        // Exact interpolation of near-duplicate points: retry once with a
        // trace-scaled jitter before giving up.
        if spec.regularization == 0.0 {
            let jitter = 1e-12 * gram.trace() / m as f64;
            let mut jittered = gram.clone();
            for i in 0..m {
                jittered[(i, i)] += jitter;
            }
            cholesky_with_cond(&jittered)
        } else {
            None
        }
    });
    let (chol, cond) = solved.ok_or(ApproxError::SingularGram)?;
    let coefficients = chol.solve(&y);
    let residual_norm = (&gram * &coefficients - &y).norm();
    Ok(FittedModel {
        kind: ModelKind::Kernel {
            spec,
            points: xs.to_vec(),
            coefficients,
        },
        residual_norm,
        condition_estimate: cond,
    })
}
