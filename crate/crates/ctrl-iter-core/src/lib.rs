pub mod approx;
pub mod deep_pmp;
pub mod lambda;
pub mod lqr;
pub mod mdp;
pub mod numerics;
pub mod splitting;
pub mod trace;

pub use numerics::{Matrix, Vector};
pub use trace::IterationTrace;
