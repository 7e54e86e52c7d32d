//! Smooth oracles `f`, `F` and their derivatives, evaluated to a requested tolerance.

pub mod burgers;
pub mod elliptic;
pub mod linalg;
pub mod newton;
pub mod synthetic;

use thiserror::Error;

use crate::hilbert::{HilbertError, LinOp, Space, SpaceVec};
use crate::support_sets::SupportError;

/// `1e-4 * sqrt(eps)`, the tightest tolerance ever passed to a PDE solve.
pub const TIGHT_TOL: f64 = 1e-4 * 1.4901161193847656e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error("Newton did not converge for sample {sample} after {iterations} iterations (residual {residual:e})")]
    Newton {
        sample: usize,
        iterations: usize,
        residual: f64,
    },
    #[error("Newton line search failed for sample {sample} (residual {residual:e})")]
    LineSearch { sample: usize, residual: f64 },
    #[error("singular linear system at pivot {0}")]
    Singular(usize),
    #[error("invalid problem parameters: {0}")]
    Invalid(String),
    #[error(transparent)]
    Hilbert(#[from] HilbertError),
    #[error(transparent)]
    Support(#[from] SupportError),
}

/// An oracle output with the error bound the oracle guarantees for it.
#[derive(Debug, Clone)]
pub struct Inexact<T> {
    pub value: T,
    pub err: f64,
}

impl<T> Inexact<T> {
    pub fn exact(value: T) -> Self {
        Self { value, err: 0.0 }
    }
}

/// Smooth part of `J(x) = f(x) + sigma(F(x)) + phi(x)`.
///
/// Every evaluation takes a tolerance request; the returned `err` never exceeds
/// it unless the request is below what the oracle can deliver (`TIGHT_TOL` for
/// PDE-based problems), in which case the achievable bound is reported.
pub trait SmoothProblem: Send {
    fn control_space(&self) -> Space;
    fn constraint_space(&self) -> Space;
    fn value_f(&mut self, x: &SpaceVec, tol: f64) -> Result<Inexact<f64>, OracleError>;
    fn value_con(&mut self, x: &SpaceVec, tol: f64) -> Result<Inexact<SpaceVec>, OracleError>;
    fn gradient_f(&mut self, x: &SpaceVec, tol: f64) -> Result<Inexact<SpaceVec>, OracleError>;
    /// `F'(x)` together with a bound on its operator-norm error.
    fn jacobian(&mut self, x: &SpaceVec, tol: f64) -> Result<Inexact<Box<dyn LinOp>>, OracleError>;
    /// Hessian of `x -> f(x) + (theta, F(x))_Y`, self-adjoint on `X`.
    fn hessian_lagrangian(
        &mut self,
        x: &SpaceVec,
        theta: &SpaceVec,
        tol: f64,
    ) -> Result<Box<dyn LinOp>, OracleError>;
    /// Cumulative nonlinear solver iterations spent so far.
    fn newton_iterations(&self) -> u64 {
        0
    }
    /// Smallest error bound the oracle can guarantee.
    fn accuracy_floor(&self) -> f64 {
        0.0
    }
}

impl<P: SmoothProblem + ?Sized> SmoothProblem for Box<P> {
    fn control_space(&self) -> Space {
        (**self).control_space()
    }
    fn constraint_space(&self) -> Space {
        (**self).constraint_space()
    }
    fn value_f(&mut self, x: &SpaceVec, tol: f64) -> Result<Inexact<f64>, OracleError> {
        (**self).value_f(x, tol)
    }
    fn value_con(&mut self, x: &SpaceVec, tol: f64) -> Result<Inexact<SpaceVec>, OracleError> {
        (**self).value_con(x, tol)
    }
    fn gradient_f(&mut self, x: &SpaceVec, tol: f64) -> Result<Inexact<SpaceVec>, OracleError> {
        (**self).gradient_f(x, tol)
    }
    fn jacobian(&mut self, x: &SpaceVec, tol: f64) -> Result<Inexact<Box<dyn LinOp>>, OracleError> {
        (**self).jacobian(x, tol)
    }
    fn hessian_lagrangian(
        &mut self,
        x: &SpaceVec,
        theta: &SpaceVec,
        tol: f64,
    ) -> Result<Box<dyn LinOp>, OracleError> {
        (**self).hessian_lagrangian(x, theta, tol)
    }
    fn newton_iterations(&self) -> u64 {
        (**self).newton_iterations()
    }
    fn accuracy_floor(&self) -> f64 {
        (**self).accuracy_floor()
    }
}
