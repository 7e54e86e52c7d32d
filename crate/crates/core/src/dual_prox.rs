//! Proximity operator of `psi(x) = sigma(A (x - c) + b) + phi(x)`.
//!
//! The prox has no closed form, so it is computed from the dual problem
//!
//! ```text
//! max_{theta in set} min_x (1/2r)||x - z||^2 + phi(x) + (theta, A(x - c) + b)
//! ```
//!
//! whose inner minimizer is `p(theta) = prox_{r phi}(z - r A* theta)`. The dual
//! objective `d` is concave with gradient `A(p(theta) - c) + b`, and is maximized
//! here by a spectral projected gradient ascent with a nonmonotone line search.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::convex_terms::{ConvexError, NonsmoothTerm};
use crate::hilbert::{HilbertError, LinOp, SpaceVec};
use crate::support_sets::{SupportError, SupportSet};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProxError {
    #[error("non-finite dual value {value} at SPG iteration {iteration}")]
    NonFinite { iteration: usize, value: f64 },
    #[error("line search made no progress after {0} reductions")]
    LineSearch(usize),
    #[error("invalid SPG configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Convex(#[from] ConvexError),
    #[error(transparent)]
    Support(#[from] SupportError),
    #[error(transparent)]
    Hilbert(#[from] HilbertError),
}

/// The affine map `x -> A (x - center) + offset`.
#[derive(Clone, Copy)]
pub struct AffineModelMap<'a> {
    pub op: &'a dyn LinOp,
    pub offset: &'a SpaceVec,
    pub center: &'a SpaceVec,
}

impl<'a> AffineModelMap<'a> {
    pub fn new(op: &'a dyn LinOp, offset: &'a SpaceVec, center: &'a SpaceVec) -> Result<Self, HilbertError> {
        op.domain().check_same(center.space())?;
        op.codomain().check_same(offset.space())?;
        Ok(Self { op, offset, center })
    }

    pub fn eval(&self, x: &SpaceVec) -> Result<SpaceVec, HilbertError> {
        let mut out = self.op.apply(&x.sub(self.center)?)?;
        out.axpy(1.0, self.offset)?;
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpgConfig {
    pub lambda0: f64,
    pub gamma_init: f64,
    pub gamma_min: f64,
    pub gamma_max: f64,
    pub sigma1: f64,
    pub sigma2: f64,
    pub alpha: f64,
    pub beta: f64,
    pub memory: usize,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SpgConfig {
    fn default() -> Self {
        Self {
            lambda0: 1.0,
            gamma_init: 1.0,
            gamma_min: 1e-6,
            gamma_max: 1e6,
            sigma1: 0.1,
            sigma2: 0.9,
            alpha: 1e-4,
            beta: 0.5,
            memory: 1,
            tol: 1e-10,
            max_iter: 10_000,
        }
    }
}

impl SpgConfig {
    pub fn validate(&self) -> Result<(), ProxError> {
        let bad = |m: &str| Err(ProxError::Config(m.to_string()));
        if !(self.lambda0 > 0.0 && self.lambda0 <= 1.0) {
            return bad("lambda0 must lie in (0, 1]");
        }
        if !(0.0 < self.gamma_min && self.gamma_min < self.gamma_max) {
            return bad("need 0 < gamma_min < gamma_max");
        }
        if !(0.0 < self.sigma1 && self.sigma1 < self.sigma2 && self.sigma2 < 1.0) {
            return bad("need 0 < sigma1 < sigma2 < 1");
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad("alpha must lie in (0, 1)");
        }
        if !(self.beta >= self.sigma1 && self.beta <= self.sigma2) {
            return bad("beta must lie in [sigma1, sigma2]");
        }
        if self.memory == 0 || self.max_iter == 0 || !(self.tol > 0.0) {
            return bad("memory, max_iter and tol must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ProxResult {
    pub primal: SpaceVec,
    pub dual: SpaceVec,
    pub iterations: usize,
    pub final_residual: f64,
    pub converged: bool,
    pub dual_values: Vec<f64>,
}

/// Dual quantities at one `theta`.
struct DualPoint {
    theta: SpaceVec,
    primal: SpaceVec,
    grad: SpaceVec,
    value: f64,
}

fn check_radius(r: f64) -> Result<(), ProxError> {
    if r > 0.0 && r.is_finite() {
        Ok(())
    } else {
        Err(ConvexError::BadRadius(r).into())
    }
}

fn dual_point(
    theta: SpaceVec,
    z: &SpaceVec,
    r: f64,
    map: &AffineModelMap<'_>,
    phi: &NonsmoothTerm,
) -> Result<DualPoint, ProxError> {
    let shifted = z.lin_comb(1.0, -r, &map.op.apply_adjoint(&theta)?)?;
    let primal = phi.prox(&shifted, r)?;
    let grad = map.eval(&primal)?;
    let value = primal.dist(z)?.powi(2) / (2.0 * r) + phi.value(&primal) + theta.inner(&grad)?;
    Ok(DualPoint {
        theta,
        primal,
        grad,
        value,
    })
}

/// Dual objective `d(theta)`.
pub fn dual_value(
    theta: &SpaceVec,
    z: &SpaceVec,
    r: f64,
    map: &AffineModelMap<'_>,
    phi: &NonsmoothTerm,
) -> Result<f64, ProxError> {
    check_radius(r)?;
    Ok(dual_point(theta.clone(), z, r, map, phi)?.value)
}

/// `grad d(theta) = A (prox_{r phi}(z - r A* theta) - c) + b`.
pub fn dual_grad(
    theta: &SpaceVec,
    z: &SpaceVec,
    r: f64,
    map: &AffineModelMap<'_>,
    phi: &NonsmoothTerm,
) -> Result<SpaceVec, ProxError> {
    check_radius(r)?;
    Ok(dual_point(theta.clone(), z, r, map, phi)?.grad)
}

/// `psi(x) = sigma(A(x - c) + b) + phi(x)`.
pub fn psi_value(
    x: &SpaceVec,
    map: &AffineModelMap<'_>,
    phi: &NonsmoothTerm,
    set: &SupportSet,
) -> Result<f64, ProxError> {
    let phi_x = phi.value(x);
    if !phi_x.is_finite() {
        return Ok(f64::INFINITY);
    }
    Ok(set.support_value(&map.eval(x)?)? + phi_x)
}

/// Primal prox objective `(1/2r)||x - z||^2 + psi(x)`.
pub fn prox_objective(
    x: &SpaceVec,
    z: &SpaceVec,
    r: f64,
    map: &AffineModelMap<'_>,
    phi: &NonsmoothTerm,
    set: &SupportSet,
) -> Result<f64, ProxError> {
    Ok(x.dist(z)?.powi(2) / (2.0 * r) + psi_value(x, map, phi, set)?)
}

/// `prox_{r psi}(z)` by spectral projected gradient ascent on the dual.
///
/// Stops when `||s|| / gamma <= cfg.tol`, where `s` is the projected step.
/// Hitting `cfg.max_iter` is not an error; the last iterate is returned with
/// `converged = false`.
pub fn prox_psi(
    z: &SpaceVec,
    r: f64,
    map: &AffineModelMap<'_>,
    phi: &NonsmoothTerm,
    set: &SupportSet,
    theta_init: &SpaceVec,
    cfg: &SpgConfig,
) -> Result<ProxResult, ProxError> {
    check_radius(r)?;
    cfg.validate()?;
    map.op.domain().check_same(z.space())?;

    let mut current = dual_point(set.project(theta_init)?, z, r, map, phi)?;
    if !current.value.is_finite() {
        return Err(ProxError::NonFinite {
            iteration: 1,
            value: current.value,
        });
    }
    let mut window: VecDeque<f64> = VecDeque::with_capacity(cfg.memory);
    window.push_back(current.value);
    let mut dual_values = vec![current.value];

    let mut gamma = cfg.gamma_init.clamp(cfg.gamma_min, cfg.gamma_max);
    // (s, lambda, grad) from the previous iteration
    let mut previous: Option<(SpaceVec, f64, SpaceVec)> = None;
    let mut residual = f64::INFINITY;

    for n in 1..=cfg.max_iter {
        if let Some((s_prev, lambda_prev, grad_prev)) = &previous {
            let curvature = grad_prev.sub(&current.grad)?.inner(s_prev)?;
            gamma = if curvature > 0.0 {
                (lambda_prev * s_prev.norm_squared() / curvature).clamp(cfg.gamma_min, cfg.gamma_max)
            } else {
                cfg.gamma_max
            };
        }
        let ascent = current.theta.lin_comb(1.0, gamma, &current.grad)?;
        let s = set.project(&ascent)?.sub(&current.theta)?;
        residual = s.norm() / gamma;
        if residual <= cfg.tol {
            return Ok(ProxResult {
                primal: current.primal,
                dual: current.theta,
                iterations: n,
                final_residual: residual,
                converged: true,
                dual_values,
            });
        }

        let slope = current.grad.inner(&s)?;
        let reference = window.iter().cloned().fold(f64::INFINITY, f64::min);
        let mut lambda = cfg.lambda0;
        let mut reductions = 0;
        let trial = loop {
            let trial = dual_point(current.theta.lin_comb(1.0, lambda, &s)?, z, r, map, phi)?;
            if !trial.value.is_finite() {
                return Err(ProxError::NonFinite {
                    iteration: n,
                    value: trial.value,
                });
            }
            // near the solution the increments of d fall below rounding level while
            // the gradient is still informative, so allow a few ulps of slack
            let slack = 8.0 * f64::EPSILON * (1.0 + reference.abs());
            if trial.value >= reference + cfg.alpha * lambda * slope - slack {
                break trial;
            }
            reductions += 1;
            if reductions > 100 {
                return Err(ProxError::LineSearch(reductions));
            }
            let delta = -(0.5 * lambda * lambda * slope) / (trial.value - current.value - lambda * slope);
            lambda = if delta >= cfg.sigma1 * lambda && delta <= cfg.sigma2 * lambda {
                delta
            } else {
                cfg.beta * lambda
            };
        };

        let grad_prev = std::mem::replace(&mut current, trial).grad;
        previous = Some((s, lambda, grad_prev));
        if window.len() == cfg.memory {
            window.pop_front();
        }
        window.push_back(current.value);
        dual_values.push(current.value);
    }

    Ok(ProxResult {
        primal: current.primal,
        dual: current.theta,
        iterations: cfg.max_iter,
        final_residual: residual,
        converged: false,
        dual_values,
    })
}
