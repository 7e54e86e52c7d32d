//! Separable convex terms `phi` with closed-form proximity operators.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hilbert::SpaceVec;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConvexError {
    #[error("prox radius must be positive and finite, got {0}")]
    BadRadius(f64),
    #[error("invalid term parameters: {0}")]
    BadParameters(String),
}

/// Proper, closed, convex, componentwise-separable term.
///
/// The `L1` weight uses the space metric, so `WeightedL1 { tau }` is
/// `tau * sum_i w_i |x_i|`, the discrete `L1(D)` norm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum NonsmoothTerm {
    Zero,
    WeightedL1 { tau: f64 },
    BoxIndicator { lo: f64, hi: f64 },
    L1PlusBox { tau: f64, lo: f64, hi: f64 },
}

fn soft_threshold(z: f64, t: f64) -> f64 {
    if z > t {
        z - t
    } else if z < -t {
        z + t
    } else {
        0.0
    }
}

impl NonsmoothTerm {
    pub fn validate(&self) -> Result<(), ConvexError> {
        match *self {
            NonsmoothTerm::Zero => Ok(()),
            NonsmoothTerm::WeightedL1 { tau } => check_tau(tau),
            NonsmoothTerm::BoxIndicator { lo, hi } => check_box(lo, hi),
            NonsmoothTerm::L1PlusBox { tau, lo, hi } => {
                check_tau(tau)?;
                check_box(lo, hi)
            }
        }
    }

    /// `phi(x)`, `+inf` outside the domain.
    pub fn value(&self, x: &SpaceVec) -> f64 {
        let l1 = |tau: f64| {
            tau * x
                .weights()
                .iter()
                .zip(x.coeffs())
                .map(|(w, a)| w * a.abs())
                .sum::<f64>()
        };
        let inside = |lo: f64, hi: f64| x.coeffs().iter().all(|&a| a >= lo && a <= hi);
        match *self {
            NonsmoothTerm::Zero => 0.0,
            NonsmoothTerm::WeightedL1 { tau } => l1(tau),
            NonsmoothTerm::BoxIndicator { lo, hi } => {
                if inside(lo, hi) {
                    0.0
                } else {
                    f64::INFINITY
                }
            }
            NonsmoothTerm::L1PlusBox { tau, lo, hi } => {
                if inside(lo, hi) {
                    l1(tau)
                } else {
                    f64::INFINITY
                }
            }
        }
    }

    /// `prox_{r phi}(z)` in the metric of `z`'s space.
    pub fn prox(&self, z: &SpaceVec, r: f64) -> Result<SpaceVec, ConvexError> {
        if !(r > 0.0 && r.is_finite()) {
            return Err(ConvexError::BadRadius(r));
        }
        Ok(match *self {
            NonsmoothTerm::Zero => z.clone(),
            NonsmoothTerm::WeightedL1 { tau } => z.map(|a| soft_threshold(a, r * tau)),
            NonsmoothTerm::BoxIndicator { lo, hi } => z.map(|a| a.clamp(lo, hi)),
            // 1-D convex: the constrained minimizer is the clipped unconstrained one
            NonsmoothTerm::L1PlusBox { tau, lo, hi } => {
                z.map(|a| soft_threshold(a, r * tau).clamp(lo, hi))
            }
        })
    }
}

fn check_tau(tau: f64) -> Result<(), ConvexError> {
    if tau >= 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(ConvexError::BadParameters(format!("L1 weight {tau}")))
    }
}

fn check_box(lo: f64, hi: f64) -> Result<(), ConvexError> {
    if lo <= hi && !lo.is_nan() && !hi.is_nan() {
        Ok(())
    } else {
        Err(ConvexError::BadParameters(format!("empty box [{lo}, {hi}]")))
    }
}
