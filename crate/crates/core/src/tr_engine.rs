//! Inexact proximal trust-region method for `min f(x) + sigma(F(x)) + phi(x)`.
//!
//! Each iteration builds the model
//!
//! ```text
//! m_k(x) = 1/2 (B_k(x - x_k), x - x_k) + (g_k, x - x_k) + sigma(A_k(x - x_k) + b_k) + phi(x)
//! ```
//!
//! from oracle outputs whose accuracy is tied to the stationarity measure
//! `h_k` and the radius, computes a Cauchy point along the proximal-gradient
//! path, refines it with proximal-gradient steps on `m_k`, and accepts or
//! rejects the trial point from the ratio of computed to predicted reduction.

use std::fmt::Write as _;
use std::sync::Arc;

use log::{debug, info, trace, warn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::convex_terms::NonsmoothTerm;
use crate::dual_prox::{prox_psi, psi_value, AffineModelMap, ProxError, ProxResult, SpgConfig};
use crate::hilbert::{HilbertError, LinOp, SpaceVec, ZeroOp};
use crate::problems::{Inexact, OracleError, SmoothProblem, TIGHT_TOL};
use crate::support_sets::{SupportError, SupportSet};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrError {
    #[error("invalid trust-region configuration: {0}")]
    Config(String),
    #[error("initial point is outside the domain of phi")]
    Infeasible,
    #[error("iteration {k}: no fraction-of-Cauchy-decrease point after {halvings} step halvings")]
    Cauchy { k: usize, halvings: usize },
    #[error("iteration {k}: oracle tolerances did not settle after {rounds} tightening rounds")]
    Tolerance { k: usize, rounds: usize },
    #[error("iteration {k}: {what}")]
    Invariant { k: usize, what: String },
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Prox(#[from] ProxError),
    #[error(transparent)]
    Hilbert(#[from] HilbertError),
    #[error(transparent)]
    Support(#[from] SupportError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Inexactness {
    /// Every oracle call uses the tight floor tolerance.
    Exact,
    /// Tolerances follow the accuracy conditions on the model and the reduction.
    Adaptive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Curvature {
    /// Hessian of the Lagrangian at the support maximizer of `b_k`.
    Lagrangian,
    /// Hessian of the Lagrangian at the dual multiplier of the last prox,
    /// falling back to the support maximizer before the first one.
    DualLagrangian,
    Zero,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrConfig {
    pub delta1: f64,
    pub eta1: f64,
    pub eta2: f64,
    pub gamma1: f64,
    pub gamma2: f64,
    pub gamma3: f64,
    pub stop_tol: f64,
    pub max_iter: usize,
    pub kappa_rad: f64,
    pub kappa_fcd: f64,
    pub kappa_grad: f64,
    pub kappa_val: f64,
    pub kappa_jac: f64,
    pub kappa_obj: f64,
    /// Exponent `zeta > 1` in the reduction-accuracy bound.
    pub zeta: f64,
    /// Agreement margin, `0 < eta < min(eta1, 1 - eta2)`.
    pub eta: f64,
    /// `zeta_k = zeta_base * zeta_rate^k`.
    pub zeta_base: f64,
    pub zeta_rate: f64,
    pub refine_cap: usize,
    /// Refinement stops once the prox-gradient residual is below `refine_rtol * h_k * min(1, h_k)`.
    pub refine_rtol: f64,
    pub t_min: f64,
    pub t_max: f64,
    pub max_halvings: usize,
    pub max_tighten: usize,
    pub tight_tol: f64,
    pub mode: Inexactness,
    pub curvature: Curvature,
    pub certificate: bool,
    /// Analysis constant for the very-successful-step diagnostic; unused when absent.
    pub kappa_vs: Option<f64>,
}

impl Default for TrConfig {
    fn default() -> Self {
        Self {
            delta1: 10.0,
            eta1: 1e-4,
            eta2: 0.5,
            gamma1: 0.25,
            gamma2: 0.25,
            gamma3: 10.0,
            stop_tol: 1e-8,
            max_iter: 100,
            kappa_rad: 1.0,
            kappa_fcd: 1e-2,
            kappa_grad: 1.0,
            kappa_val: 1.0,
            kappa_jac: 1.0,
            kappa_obj: 1e4,
            zeta: 1.1,
            eta: 5e-5,
            zeta_base: 1e-8,
            zeta_rate: 0.5,
            refine_cap: 15,
            refine_rtol: 1e-2,
            t_min: 1e-12,
            t_max: 1e12,
            max_halvings: 30,
            max_tighten: 10,
            tight_tol: TIGHT_TOL,
            mode: Inexactness::Exact,
            curvature: Curvature::Lagrangian,
            certificate: true,
            kappa_vs: None,
        }
    }
}

impl TrConfig {
    pub fn validate(&self) -> Result<(), TrError> {
        let bad = |m: &str| Err(TrError::Config(m.to_string()));
        if !(0.0 < self.eta1 && self.eta1 < self.eta2 && self.eta2 < 1.0) {
            return bad("need 0 < eta1 < eta2 < 1");
        }
        if !(0.0 < self.gamma1 && self.gamma1 <= self.gamma2 && self.gamma2 < 1.0 && 1.0 <= self.gamma3) {
            return bad("need 0 < gamma1 <= gamma2 < 1 <= gamma3");
        }
        if !(self.eta > 0.0 && self.eta < self.eta1.min(1.0 - self.eta2)) {
            return bad("need 0 < eta < min(eta1, 1 - eta2)");
        }
        if !(self.zeta > 1.0) || !(self.zeta_base > 0.0) || !(self.zeta_rate > 0.0 && self.zeta_rate < 1.0) {
            return bad("need zeta > 1, zeta_base > 0 and zeta_rate in (0, 1)");
        }
        if !(0.0 < self.t_min && self.t_min <= 1.0 && 1.0 <= self.t_max) {
            return bad("need 0 < t_min <= 1 <= t_max");
        }
        let positive = [
            self.delta1,
            self.stop_tol,
            self.kappa_rad,
            self.kappa_fcd,
            self.kappa_grad,
            self.kappa_val,
            self.kappa_jac,
            self.kappa_obj,
            self.tight_tol,
            self.refine_rtol,
        ];
        if positive.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return bad("radius, tolerances and kappa constants must be positive");
        }
        if self.max_iter == 0 || self.max_tighten == 0 {
            return bad("max_iter and max_tighten must be positive");
        }
        Ok(())
    }

    fn zeta_k(&self, k: usize) -> f64 {
        self.zeta_base * self.zeta_rate.powi(k as i32)
    }
}

/// Oracle and subsolver work counters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Counters {
    pub nfval: usize,
    pub ngrad: usize,
    pub nhess: usize,
    pub npsi: usize,
    pub nprox: usize,
    pub spg_iters: usize,
}

impl Counters {
    /// Average SPG iterations per prox evaluation.
    pub fn aprox(&self) -> f64 {
        if self.nprox == 0 {
            0.0
        } else {
            self.spg_iters as f64 / self.nprox as f64
        }
    }
}

/// Local model data at `x_k`.
#[derive(Clone)]
pub struct ModelState {
    pub x: SpaceVec,
    pub g: SpaceVec,
    pub b: SpaceVec,
    pub a: Arc<dyn LinOp>,
    pub hess: Arc<dyn LinOp>,
    pub delta: f64,
    pub t: f64,
    /// Dual warm start for the prox of `psi_k`.
    pub theta: SpaceVec,
    pub h: f64,
    /// Running lower estimate of `||B_k||` from Rayleigh quotients.
    pub b_norm: f64,
    /// SPG iteration count of every prox call made through this state.
    pub trace: Vec<usize>,
}

impl ModelState {
    pub fn new(
        x: SpaceVec,
        g: SpaceVec,
        b: SpaceVec,
        a: Arc<dyn LinOp>,
        hess: Arc<dyn LinOp>,
        delta: f64,
    ) -> Self {
        let theta = b.space().constant(1.0);
        Self {
            x,
            g,
            b,
            a,
            hess,
            delta,
            t: 1.0,
            theta,
            h: f64::NAN,
            b_norm: 0.0,
            trace: Vec::new(),
        }
    }

    fn map(&self) -> AffineModelMap<'_> {
        AffineModelMap {
            op: self.a.as_ref(),
            offset: &self.b,
            center: &self.x,
        }
    }

    fn prox(
        &mut self,
        z: &SpaceVec,
        r: f64,
        phi: &NonsmoothTerm,
        set: &SupportSet,
        spg: &SpgConfig,
        counters: &mut Counters,
    ) -> Result<ProxResult, TrError> {
        let res = prox_psi(z, r, &self.map(), phi, set, &self.theta, spg)?;
        counters.nprox += 1;
        counters.spg_iters += res.iterations;
        self.trace.push(res.iterations);
        trace!("prox: {} SPG iterations, residual {:e}", res.iterations, res.final_residual);
        if !res.converged {
            warn!(
                "prox of psi_k did not converge: residual {:e} after {} SPG iterations",
                res.final_residual, res.iterations
            );
        }
        self.theta = res.dual.clone();
        Ok(res)
    }

    fn psi(&self, x: &SpaceVec, phi: &NonsmoothTerm, set: &SupportSet, counters: &mut Counters) -> Result<f64, TrError> {
        counters.npsi += 1;
        Ok(psi_value(x, &self.map(), phi, set)?)
    }

    fn note_curvature(&mut self, s: &SpaceVec, bs: &SpaceVec) -> Result<f64, TrError> {
        let c = bs.inner(s)?;
        let ns = s.norm_squared();
        if ns > 0.0 {
            self.b_norm = self.b_norm.max(c.abs() / ns);
        }
        Ok(c)
    }
}

/// `m_k(x)`; `+inf` outside the domain of `phi`.
pub fn model_value(state: &ModelState, phi: &NonsmoothTerm, set: &SupportSet, x: &SpaceVec) -> Result<f64, TrError> {
    let d = x.sub(&state.x)?;
    let psi = psi_value(x, &state.map(), phi, set)?;
    if !psi.is_finite() {
        return Ok(f64::INFINITY);
    }
    let bd = state.hess.apply(&d)?;
    Ok(0.5 * bd.inner(&d)? + state.g.inner(&d)? + psi)
}

/// `H_k(t) = ||prox_{t psi_k}(x_k - t g_k) - x_k|| / t`.
pub fn stationarity(
    state: &mut ModelState,
    phi: &NonsmoothTerm,
    set: &SupportSet,
    t: f64,
    spg: &SpgConfig,
) -> Result<f64, TrError> {
    let mut counters = Counters::default();
    let (h, res) = stationarity_with_prox(state, phi, set, t, spg, &mut counters)?;
    if !res.converged {
        return Err(ProxError::Config(format!(
            "SPG stopped at residual {:e} after {} iterations",
            res.final_residual, res.iterations
        ))
        .into());
    }
    Ok(h)
}

fn stationarity_with_prox(
    state: &mut ModelState,
    phi: &NonsmoothTerm,
    set: &SupportSet,
    t: f64,
    spg: &SpgConfig,
    counters: &mut Counters,
) -> Result<(f64, ProxResult), TrError> {
    if !(t > 0.0) {
        return Err(TrError::Config(format!("stationarity step {t}")));
    }
    let z = state.x.lin_comb(1.0, -t, &state.g)?;
    let res = state.prox(&z, t, phi, set, spg, counters)?;
    Ok((res.primal.dist(&state.x)? / t, res))
}

#[derive(Debug, Clone)]
pub struct CauchyPoint {
    pub x: SpaceVec,
    pub t: f64,
    pub alpha: f64,
    pub pred: f64,
    /// `q_k(x_c)` and `psi_k(x_c)`, reused by the refinement.
    q: f64,
    psi: f64,
    grad_q: SpaceVec,
}

fn fcd_rhs(cfg: &TrConfig, state: &ModelState) -> f64 {
    let h = state.h;
    cfg.kappa_fcd * h * (h / (1.0 + state.b_norm)).min(state.delta)
}

/// Cauchy point along the proximal-gradient path from `x_k` with step `state.t`.
///
/// Requires `state.h` to be set. The step length is halved until the model
/// decrease meets the fraction-of-Cauchy-decrease bound.
pub fn cauchy_point(
    state: &mut ModelState,
    phi: &NonsmoothTerm,
    set: &SupportSet,
    cfg: &TrConfig,
    spg: &SpgConfig,
    counters: &mut Counters,
) -> Result<CauchyPoint, TrError> {
    cauchy_from(state, phi, set, cfg, spg, counters, None)
}

fn cauchy_from(
    state: &mut ModelState,
    phi: &NonsmoothTerm,
    set: &SupportSet,
    cfg: &TrConfig,
    spg: &SpgConfig,
    counters: &mut Counters,
    first_prox: Option<SpaceVec>,
) -> Result<CauchyPoint, TrError> {
    let psi0 = state.psi(&state.x.clone(), phi, set, counters)?;
    let mut t = state.t;
    let mut cached = first_prox;
    for _ in 0..=cfg.max_halvings {
        let p = match cached.take() {
            Some(p) => p,
            None => {
                let z = state.x.lin_comb(1.0, -t, &state.g)?;
                state.prox(&z, t, phi, set, spg, counters)?.primal
            }
        };
        let s = p.sub(&state.x)?;
        let ns = s.norm();
        if ns == 0.0 {
            return Ok(CauchyPoint {
                x: state.x.clone(),
                t,
                alpha: 0.0,
                pred: 0.0,
                q: 0.0,
                psi: psi0,
                grad_q: state.g.clone(),
            });
        }
        let bs = state.hess.apply(&s)?;
        counters.nhess += 1;
        let c2 = state.note_curvature(&s, &bs)?;
        let gs = state.g.inner(&s)?;
        let c1 = gs + state.psi(&p, phi, set, counters)? - psi0;
        let alpha_max = (cfg.kappa_rad * state.delta / ns).min(1.0);
        let alpha = if c2 > 0.0 && c1 < 0.0 {
            (-c1 / c2).min(alpha_max)
        } else {
            alpha_max
        };
        let xc = state.x.lin_comb(1.0, alpha, &s)?;
        let q = alpha * gs + 0.5 * alpha * alpha * c2;
        let psi = state.psi(&xc, phi, set, counters)?;
        let pred = psi0 - (q + psi);
        if pred >= fcd_rhs(cfg, state) - 8.0 * f64::EPSILON * (1.0 + psi0.abs()) {
            let grad_q = state.g.lin_comb(1.0, alpha, &bs)?;
            return Ok(CauchyPoint {
                x: xc,
                t,
                alpha,
                pred,
                q,
                psi,
                grad_q,
            });
        }
        debug!("Cauchy decrease {pred:e} too small at t = {t:e}; halving");
        t = (0.5 * t).max(cfg.t_min);
    }
    Err(TrError::Cauchy {
        k: 0,
        halvings: cfg.max_halvings,
    })
}

#[derive(Debug, Clone)]
pub struct SubproblemStep {
    pub x: SpaceVec,
    pub pred: f64,
    pub pred_cauchy: f64,
    pub iterations: usize,
    pub cauchy: CauchyPoint,
}

/// Refinement of the Cauchy point on `m_k` inside the trust region.
///
/// Each round takes a proximal-gradient step with spectral steplength. After an
/// accepted step, conjugate gradients are run on the quadratic obtained by
/// freezing the dual multiplier of the prox and the active face of `phi`.
/// A trial point is kept only if it does not increase `m_k`, and every prox
/// step or CG iteration counts toward `refine_cap`. A CG run that reaches the
/// trust-region boundary or the edge of its face ends the loop.
pub fn solve_subproblem(
    state: &mut ModelState,
    phi: &NonsmoothTerm,
    set: &SupportSet,
    cfg: &TrConfig,
    spg: &SpgConfig,
    counters: &mut Counters,
    cauchy: CauchyPoint,
) -> Result<SubproblemStep, TrError> {
    let psi0 = psi_value(&state.x, &state.map(), phi, set)?;
    let radius = cfg.kappa_rad * state.delta;
    let mut cur = Trial {
        x: cauchy.x.clone(),
        q: cauchy.q,
        psi: cauchy.psi,
        grad_q: cauchy.grad_q.clone(),
    };
    let mut t = cauchy.t;
    let tol = cfg.refine_rtol * state.h * state.h.min(1.0);
    let mut iterations = 0;
    while iterations < cfg.refine_cap && cauchy.alpha > 0.0 {
        iterations += 1;
        let z = cur.x.lin_comb(1.0, -t, &cur.grad_q)?;
        let p = state.prox(&z, t, phi, set, spg, counters)?.primal;
        let mut d = p.sub(&cur.x)?;
        if d.norm() / t <= tol {
            break;
        }
        let from_center = cur.x.sub(&state.x)?;
        let cut = boundary_step(&from_center, &d, radius)?;
        let on_boundary = cut < 1.0;
        if on_boundary {
            d.scale(cut);
        }
        let y = cur.x.add(&d)?;
        let bd = state.hess.apply(&d)?;
        counters.nhess += 1;
        let curv = state.note_curvature(&d, &bd)?;
        let q_y = cur.q + cur.grad_q.inner(&d)? + 0.5 * curv;
        let psi_y = state.psi(&y, phi, set, counters)?;
        if q_y + psi_y > cur.q + cur.psi {
            t = (0.5 * t).max(cfg.t_min);
            continue;
        }
        cur.grad_q.axpy(1.0, &bd)?;
        cur = Trial { x: y, q: q_y, psi: psi_y, grad_q: cur.grad_q };
        if curv > 0.0 {
            t = (d.norm_squared() / curv).clamp(cfg.t_min, cfg.t_max);
        }
        if on_boundary || iterations >= cfg.refine_cap {
            break;
        }
        let budget = cfg.refine_cap - iterations;
        let (trial, used, hit) = face_cg(state, phi, set, &cur, radius, tol, budget, counters)?;
        iterations += used;
        if let Some(trial) = trial {
            if trial.q + trial.psi <= cur.q + cur.psi {
                cur = trial;
                if hit {
                    break;
                }
            }
        }
    }
    let pred = psi0 - (cur.q + cur.psi);
    Ok(SubproblemStep {
        x: cur.x,
        pred,
        pred_cauchy: cauchy.pred,
        iterations,
        cauchy,
    })
}

struct Trial {
    x: SpaceVec,
    q: f64,
    psi: f64,
    grad_q: SpaceVec,
}

/// Largest `tau` in `[0, 1]` with `||c + tau d|| <= radius`.
fn boundary_step(c: &SpaceVec, d: &SpaceVec, radius: f64) -> Result<f64, TrError> {
    if c.lin_comb(1.0, 1.0, d)?.norm() <= radius {
        return Ok(1.0);
    }
    Ok(sphere_hit(c, d, radius)?.clamp(0.0, 1.0))
}

/// Positive root of `||c + tau d|| = radius`.
fn sphere_hit(c: &SpaceVec, d: &SpaceVec, radius: f64) -> Result<f64, TrError> {
    let dd = d.norm_squared();
    if dd == 0.0 {
        return Ok(f64::INFINITY);
    }
    let cd = c.inner(d)?;
    let cc = c.norm_squared();
    let disc = (cd * cd + dd * (radius * radius - cc)).max(0.0);
    Ok(((-cd + disc.sqrt()) / dd).max(0.0))
}

/// Free coordinates of the smooth face of `phi` through `x`, with the
/// gradient of `phi` on that face.
fn face(phi: &NonsmoothTerm, x: &SpaceVec) -> (Vec<bool>, Vec<f64>) {
    let n = x.len();
    let mut free = vec![true; n];
    let mut slope = vec![0.0; n];
    for (i, &v) in x.coeffs().iter().enumerate() {
        let (l1, bounds) = match *phi {
            NonsmoothTerm::Zero => (None, None),
            NonsmoothTerm::WeightedL1 { tau } => (Some(tau), None),
            NonsmoothTerm::BoxIndicator { lo, hi } => (None, Some((lo, hi))),
            NonsmoothTerm::L1PlusBox { tau, lo, hi } => (Some(tau), Some((lo, hi))),
        };
        if let Some(tau) = l1 {
            if v == 0.0 && tau > 0.0 {
                free[i] = false;
            }
            slope[i] = tau * v.signum();
        }
        if let Some((lo, hi)) = bounds {
            if v <= lo || v >= hi {
                free[i] = false;
            }
        }
        if !free[i] {
            slope[i] = 0.0;
        }
    }
    (free, slope)
}

/// Largest step along `d` from `x` that stays in the closure of the face.
fn face_limit(phi: &NonsmoothTerm, x: &SpaceVec, d: &SpaceVec) -> f64 {
    let (l1, lo, hi) = match *phi {
        NonsmoothTerm::Zero => (false, f64::NEG_INFINITY, f64::INFINITY),
        NonsmoothTerm::WeightedL1 { tau } => (tau > 0.0, f64::NEG_INFINITY, f64::INFINITY),
        NonsmoothTerm::BoxIndicator { lo, hi } => (false, lo, hi),
        NonsmoothTerm::L1PlusBox { tau, lo, hi } => (tau > 0.0, lo, hi),
    };
    let mut limit = f64::INFINITY;
    for (&v, &di) in x.coeffs().iter().zip(d.coeffs()) {
        if di == 0.0 {
            continue;
        }
        let mut bound = if di > 0.0 { hi } else { lo };
        if l1 && v.signum() == -di.signum() {
            bound = if di > 0.0 { bound.min(0.0) } else { bound.max(0.0) };
        }
        limit = limit.min(((bound - v) / di).max(0.0));
    }
    limit
}

/// Truncated CG on `q + (theta, A .) + phi` restricted to the face of `phi`
/// at `cur.x`, with `theta` the multiplier of the last prox. When `theta` is
/// strictly inside a scalar interval the iterates are also kept on the kink
/// `b + A d = 0` of `sigma`. Returns the end point (if any step was taken),
/// the iterations used and whether it stopped on the trust-region or face
/// boundary.
#[allow(clippy::too_many_arguments)]
fn face_cg(
    state: &mut ModelState,
    phi: &NonsmoothTerm,
    set: &SupportSet,
    cur: &Trial,
    radius: f64,
    tol: f64,
    budget: usize,
    counters: &mut Counters,
) -> Result<(Option<Trial>, usize, bool), TrError> {
    let (free, slope) = face(phi, &cur.x);
    let mask = |v: &mut SpaceVec| {
        for (c, &f) in v.coeffs_mut().iter_mut().zip(&free) {
            if !f {
                *c = 0.0;
            }
        }
    };
    let mut y = cur.x.clone();
    let mut s = cur.x.space().zeros();
    let mut bs = cur.x.space().zeros();
    let mut used = 0;

    // normal of the kink, restricted to the face
    let mut normal = None;
    if let SupportSet::ScalarInterval { lo, hi } = *set {
        let th = state.theta.coeffs()[0];
        let margin = 1e-8 * (hi - lo);
        if th > lo + margin && th < hi - margin {
            let unit = state.b.with_coeffs(vec![1.0])?;
            let mut a = state.a.apply_adjoint(&unit)?;
            mask(&mut a);
            let aa = a.norm_squared();
            if aa > 0.0 {
                let level = state.b.add(&state.a.apply(&cur.x.sub(&state.x)?)?)?;
                let shift = -level.inner(&unit)? / aa;
                if shift != 0.0 {
                    let d0 = a.scaled(shift);
                    let edge = sphere_hit(&cur.x.sub(&state.x)?, &d0, radius)?.min(face_limit(phi, &y, &d0));
                    let step = edge.min(1.0);
                    let bd0 = state.hess.apply(&d0)?;
                    counters.nhess += 1;
                    used += 1;
                    y.axpy(step, &d0)?;
                    s.axpy(step, &d0)?;
                    bs.axpy(step, &bd0)?;
                }
                normal = Some((a, aa));
            }
        }
    }
    let project = |v: &mut SpaceVec| -> Result<(), TrError> {
        mask(v);
        if let Some((a, aa)) = &normal {
            let c = v.inner(a)? / aa;
            v.axpy(-c, a)?;
        }
        Ok(())
    };

    let mut r = state.a.apply_adjoint(&state.theta)?;
    r.axpy(1.0, &cur.grad_q)?;
    r.axpy(1.0, &bs)?;
    r.axpy(1.0, &cur.x.with_coeffs(slope)?)?;
    r.scale(-1.0);
    project(&mut r)?;
    let mut rr = r.norm_squared();
    let mut d = r.clone();
    let mut hit = false;
    while used < budget && rr.sqrt() > tol {
        used += 1;
        let mut bd = state.hess.apply(&d)?;
        counters.nhess += 1;
        let curv = state.note_curvature(&d, &bd)?;
        let edge = sphere_hit(&y.sub(&state.x)?, &d, radius)?.min(face_limit(phi, &y, &d));
        let alpha = if curv > 0.0 { rr / curv } else { f64::INFINITY };
        let step = alpha.min(edge);
        if !step.is_finite() {
            break;
        }
        y.axpy(step, &d)?;
        s.axpy(step, &d)?;
        bs.axpy(step, &bd)?;
        if step < alpha {
            hit = true;
            break;
        }
        project(&mut bd)?;
        r.axpy(-alpha, &bd)?;
        let rr_new = r.norm_squared();
        d = r.lin_comb(1.0, rr_new / rr, &d)?;
        rr = rr_new;
    }
    if s.norm_squared() == 0.0 {
        return Ok((None, used, hit));
    }
    // snap coordinates that reached the face boundary up to rounding
    let (lo, hi) = match *phi {
        NonsmoothTerm::BoxIndicator { lo, hi } | NonsmoothTerm::L1PlusBox { lo, hi, .. } => (lo, hi),
        _ => (f64::NEG_INFINITY, f64::INFINITY),
    };
    let l1 = matches!(phi, NonsmoothTerm::WeightedL1 { .. } | NonsmoothTerm::L1PlusBox { .. });
    let mut snapped = false;
    for (yi, &xi) in y.coeffs_mut().iter_mut().zip(cur.x.coeffs()) {
        let mut v = yi.clamp(lo, hi);
        if l1 && xi != 0.0 && v.signum() == -xi.signum() {
            v = 0.0;
        }
        if v != *yi {
            *yi = v;
            snapped = true;
        }
    }
    if snapped {
        s = y.sub(&cur.x)?;
        bs = state.hess.apply(&s)?;
        counters.nhess += 1;
    }
    let q = cur.q + cur.grad_q.inner(&s)? + 0.5 * bs.inner(&s)?;
    let psi = state.psi(&y, phi, set, counters)?;
    let mut grad_q = cur.grad_q.clone();
    grad_q.axpy(1.0, &bs)?;
    Ok((Some(Trial { x: y, q, psi, grad_q }), used, hit))
}

/// Tolerances used for one model (all floored at `tight_tol`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tolerances {
    pub grad: f64,
    pub val: f64,
    pub jac: f64,
    /// Realized oracle error bounds.
    pub grad_err: f64,
    pub val_err: f64,
    pub jac_err: f64,
    pub rounds: usize,
}

/// One row of the iteration history. Row 0 describes the initial point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub k: usize,
    pub j: f64,
    pub h: f64,
    pub delta: f64,
    pub step_norm: Option<f64>,
    pub val_tol: f64,
    pub grad_tol: f64,
    pub itsp: Option<usize>,
    pub spg_avg: f64,
    pub rho: Option<f64>,
    pub accepted: Option<bool>,
    pub counters: Counters,
}

/// Per-iteration quantities used by the invariant checks.
#[derive(Debug, Clone)]
pub struct StepInfo {
    pub k: usize,
    pub x: SpaceVec,
    pub trial: SpaceVec,
    pub h: f64,
    pub delta: f64,
    pub t: f64,
    pub b_norm: f64,
    pub pred: f64,
    pub pred_cauchy: f64,
    pub cred: f64,
    pub rho: f64,
    pub obj_tol: f64,
    pub step_norm: f64,
    pub accepted: bool,
    pub tolerances: Tolerances,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    pub steps: Vec<f64>,
    pub residuals: Vec<f64>,
    pub threshold: f64,
    pub passed: bool,
}

#[derive(Debug, Clone)]
pub struct TrResult {
    pub x: SpaceVec,
    pub j: f64,
    pub h: f64,
    pub converged: bool,
    pub iterations: usize,
    pub records: Vec<IterationRecord>,
    pub steps: Vec<StepInfo>,
    pub counters: Counters,
    /// SPG iterations of each prox call, in call order. Its length is
    /// `counters.nprox` and its sum `counters.spg_iters`.
    pub prox_trace: Vec<usize>,
    pub newton_iterations: u64,
    pub certificate: Option<Certificate>,
}

/// CSV with header `k,J,h,delta,step_norm,val_tol,grad_tol,itsp`.
pub fn records_to_csv(records: &[IterationRecord]) -> String {
    let mut out = String::from("k,J,h,delta,step_norm,val_tol,grad_tol,itsp\n");
    for r in records {
        let step = r.step_norm.map(|v| format!("{v:.4e}")).unwrap_or_default();
        let itsp = r.itsp.map(|v| v.to_string()).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{:.4e},{:.4e},{:.4e},{},{:.4e},{:.4e},{}",
            r.k, r.j, r.h, r.delta, step, r.val_tol, r.grad_tol, itsp
        );
    }
    out
}

/// Oracle outputs at one point, reused while their accuracy suffices.
#[derive(Default)]
struct PointCache {
    f: Option<Inexact<f64>>,
    con: Option<Inexact<SpaceVec>>,
    grad: Option<Inexact<SpaceVec>>,
    jac: Option<(Arc<dyn LinOp>, f64)>,
    hess: Option<(Arc<dyn LinOp>, SpaceVec)>,
}

struct Engine<'p, P: SmoothProblem + ?Sized> {
    problem: &'p mut P,
    phi: NonsmoothTerm,
    set: SupportSet,
    cfg: TrConfig,
    spg: SpgConfig,
    m_set: f64,
    counters: Counters,
    cache: PointCache,
    last_step: Option<SpaceVec>,
    theta: Option<SpaceVec>,
    /// Prox point from the last stationarity evaluation, reused by the Cauchy step.
    pending_prox: Option<SpaceVec>,
    prox_trace: Vec<usize>,
}

impl<P: SmoothProblem + ?Sized> Engine<'_, P> {
    fn floor(&self, tol: f64) -> f64 {
        match self.cfg.mode {
            Inexactness::Exact => self.cfg.tight_tol,
            Inexactness::Adaptive => tol,
        }
    }

    /// A tolerance is met if the error is within it or at the oracle's accuracy limit.
    fn met(&self, err: f64, tol: f64) -> bool {
        err <= tol.max(self.problem.accuracy_floor())
    }

    fn con(&mut self, x: &SpaceVec, tol: f64) -> Result<Inexact<SpaceVec>, TrError> {
        if let Some(c) = &self.cache.con {
            if self.met(c.err, tol) {
                return Ok(c.clone());
            }
        }
        let c = self.problem.value_con(x, tol)?;
        self.counters.nfval += 1;
        self.cache.con = Some(c.clone());
        self.cache.hess = None;
        Ok(c)
    }

    fn f(&mut self, x: &SpaceVec, tol: f64) -> Result<Inexact<f64>, TrError> {
        if let Some(c) = &self.cache.f {
            if self.met(c.err, tol) {
                return Ok(c.clone());
            }
        }
        let c = self.problem.value_f(x, tol)?;
        self.cache.f = Some(c.clone());
        Ok(c)
    }

    /// Computed objective at the cached point with per-term accuracies.
    fn objective(&mut self, x: &SpaceVec, tol_f: f64, tol_con: f64) -> Result<f64, TrError> {
        let f = self.f(x, tol_f)?.value;
        let c = self.con(x, tol_con)?.value;
        Ok(f + self.set.support_value(&c)? + self.phi.value(x))
    }

    fn grad_jac(&mut self, x: &SpaceVec, tol_g: f64, tol_j: f64) -> Result<(), TrError> {
        let need_g = self.cache.grad.as_ref().map_or(true, |g| !self.met(g.err, tol_g));
        let need_j = self.cache.jac.as_ref().map_or(true, |j| !self.met(j.1, tol_j));
        if need_g {
            self.cache.grad = Some(self.problem.gradient_f(x, tol_g)?);
        }
        if need_j {
            let j = self.problem.jacobian(x, tol_j)?;
            self.cache.jac = Some((Arc::from(j.value), j.err));
            self.cache.hess = None;
        }
        if need_g || need_j {
            self.counters.ngrad += 1;
        }
        Ok(())
    }

    fn hessian(&mut self, x: &SpaceVec, b: &SpaceVec, tol: f64) -> Result<Arc<dyn LinOp>, TrError> {
        let space = self.problem.control_space();
        if self.cfg.curvature == Curvature::Zero {
            return Ok(Arc::new(ZeroOp::new(space.clone(), space)));
        }
        let theta = match (&self.cfg.curvature, &self.theta) {
            (Curvature::DualLagrangian, Some(th)) => th.clone(),
            _ => self.set.support_argmax(b)?,
        };
        if let Some((h, th)) = &self.cache.hess {
            if *th == theta {
                return Ok(h.clone());
            }
        }
        let h: Arc<dyn LinOp> = Arc::from(self.problem.hessian_lagrangian(x, &theta, tol)?);
        self.cache.hess = Some((h.clone(), theta));
        Ok(h)
    }

    /// Builds `m_k` at `x` with tolerances that satisfy the model-accuracy
    /// conditions at the resulting `h_k`.
    fn build_model(
        &mut self,
        x: &SpaceVec,
        delta: f64,
        h_prev: Option<f64>,
        k: usize,
    ) -> Result<(ModelState, Tolerances), TrError> {
        let cfg = self.cfg;
        let base = h_prev.unwrap_or(1e-2_f64.min(delta));
        let mut req_g = self.floor(cfg.kappa_grad * base.min(delta));
        let mut req_v = self.floor(cfg.kappa_val * base.min(delta * delta));
        let mut req_j = self.floor(cfg.kappa_jac * base.min(delta));
        for round in 1..=cfg.max_tighten {
            self.grad_jac(x, req_g, req_j)?;
            let b = self.con(x, req_v)?;
            let (g, g_err) = {
                let g = self.cache.grad.as_ref().expect("gradient cached");
                (g.value.clone(), g.err)
            };
            let (a, j_err) = self.cache.jac.clone().expect("Jacobian cached");
            let hess = self.hessian(x, &b.value, req_j)?;
            let mut state = ModelState::new(x.clone(), g, b.value.clone(), a, hess, delta);
            if let Some(theta) = &self.theta {
                state.theta = theta.clone();
            }
            state.t = match &self.last_step {
                Some(s) => {
                    let bs = state.hess.apply(s)?;
                    self.counters.nhess += 1;
                    let c = state.note_curvature(s, &bs)?;
                    if c > 0.0 {
                        (s.norm_squared() / c).clamp(cfg.t_min, cfg.t_max)
                    } else {
                        cfg.t_max
                    }
                }
                None => 1.0,
            };
            let t = state.t;
            let (h, res) = stationarity_with_prox(&mut state, &self.phi, &self.set, t, &self.spg, &mut self.counters)?;
            state.h = h;
            self.theta = Some(state.theta.clone());
            let tols = Tolerances {
                grad: req_g,
                val: req_v,
                jac: req_j,
                grad_err: g_err,
                val_err: b.err,
                jac_err: j_err,
                rounds: round,
            };
            let rhs_g = self.floor(cfg.kappa_grad * h.min(delta));
            let rhs_v = self.floor(cfg.kappa_val * h.min(delta * delta));
            let rhs_j = self.floor(cfg.kappa_jac * h.min(delta));
            let ok_g = self.met(g_err, rhs_g);
            let ok_v = self.met(b.err, rhs_v);
            let ok_j = self.met(j_err, rhs_j);
            if ok_g && ok_v && ok_j {
                self.pending_prox = Some(res.primal);
                return Ok((state, tols));
            }
            debug!("k = {k}: tightening tolerances (round {round}, h = {h:e})");
            self.prox_trace.append(&mut state.trace);
            if !ok_g {
                req_g = self.floor(0.1 * req_g.min(rhs_g));
            }
            if !ok_v {
                req_v = self.floor(0.1 * req_v.min(rhs_v));
            }
            if !ok_j {
                req_j = self.floor(0.1 * req_j.min(rhs_j));
            }
        }
        Err(TrError::Tolerance {
            k,
            rounds: cfg.max_tighten,
        })
    }
}

fn invariant(k: usize, what: String) -> TrError {
    TrError::Invariant { k, what }
}

/// Runs the trust-region method from `x1` until `h_k <= stop_tol` or `max_iter`.
pub fn run<P: SmoothProblem + ?Sized>(
    x1: &SpaceVec,
    problem: &mut P,
    phi: &NonsmoothTerm,
    set: &SupportSet,
    cfg: &TrConfig,
    spg: &SpgConfig,
) -> Result<TrResult, TrError> {
    cfg.validate()?;
    spg.validate()?;
    phi.validate().map_err(ProxError::from)?;
    let yspace = problem.constraint_space();
    set.check(&yspace)?;
    problem.control_space().check_same(x1.space())?;
    if !phi.value(x1).is_finite() {
        return Err(TrError::Infeasible);
    }

    let mut eng = Engine {
        problem,
        phi: *phi,
        set: set.clone(),
        cfg: *cfg,
        spg: *spg,
        m_set: set.bound(&yspace),
        counters: Counters::default(),
        cache: PointCache::default(),
        last_step: None,
        theta: None,
        pending_prox: None,
        prox_trace: Vec::new(),
    };
    let mut x = x1.clone();
    let mut delta = cfg.delta1;
    let boot = eng.floor(1e-2_f64.min(cfg.delta1));
    let mut j = eng.objective(&x, boot, boot)?;
    let (mut state, mut tols) = eng.build_model(&x, delta, None, 1)?;
    let mut records = vec![IterationRecord {
        k: 0,
        j,
        h: state.h,
        delta,
        step_norm: None,
        val_tol: boot,
        grad_tol: tols.grad,
        itsp: None,
        spg_avg: eng.counters.aprox(),
        rho: None,
        accepted: None,
        counters: eng.counters,
    }];
    info!("k = 0: J = {j:.6e}, h = {:.4e}, delta = {delta:.4e}", state.h);

    let mut steps = Vec::new();
    let mut converged = state.h <= cfg.stop_tol;
    let mut iterations = 0;
    while !converged && iterations < cfg.max_iter {
        iterations += 1;
        let k = iterations;
        let first = eng.pending_prox.take();
        let cauchy = cauchy_from(&mut state, &eng.phi, &eng.set, &eng.cfg, &eng.spg, &mut eng.counters, first)
            .map_err(|e| match e {
                TrError::Cauchy { halvings, .. } => TrError::Cauchy { k, halvings },
                other => other,
            })?;
        let step = solve_subproblem(&mut state, &eng.phi, &eng.set, &eng.cfg, &eng.spg, &mut eng.counters, cauchy)?;
        let step_norm = step.x.dist(&x)?;
        let radius = cfg.kappa_rad * delta;
        let round = 8.0 * f64::EPSILON * (1.0 + x.norm());
        if step_norm > radius * (1.0 + 1e-12) + round {
            return Err(invariant(k, format!("step norm {step_norm:e} exceeds radius {radius:e}")));
        }
        let required = fcd_rhs(cfg, &state);
        let m_scale = 8.0 * f64::EPSILON * (1.0 + model_value(&state, &eng.phi, &eng.set, &x)?.abs());
        if step.pred < required * (1.0 - 1e-12) - m_scale || (step.pred <= 0.0 && required > m_scale) {
            return Err(invariant(
                k,
                format!("model decrease {:e} below the Cauchy bound {required:e}", step.pred),
            ));
        }

        let obj_tol = cfg.kappa_obj * (cfg.eta * step.pred.min(cfg.zeta_k(k))).powf(cfg.zeta);
        let tol_f = eng.floor(obj_tol / 4.0);
        let tol_con = eng.floor(if eng.m_set > 0.0 { obj_tol / (4.0 * eng.m_set) } else { obj_tol / 4.0 });
        let j_k = eng.objective(&x, tol_f, tol_con)?;
        let saved = std::mem::replace(&mut eng.cache, PointCache::default());
        let j_plus = eng.objective(&step.x, tol_f, tol_con)?;
        let cred = j_k - j_plus;
        let small = 10.0 * f64::EPSILON * (1.0 + j_k.abs());
        let rho = if cred.abs() <= small && step.pred <= small {
            1.0
        } else {
            cred / step.pred
        };
        let accepted = rho >= cfg.eta1;
        let old_delta = delta;
        if accepted {
            eng.last_step = Some(step.x.sub(&x)?);
            x = step.x.clone();
            j = j_plus;
            delta = if rho >= cfg.eta2 { cfg.gamma3 * delta } else { delta };
        } else {
            eng.cache = saved;
            j = j_k;
            delta *= cfg.gamma1;
        }
        if let Some(kvs) = cfg.kappa_vs {
            if (1.0 + state.b_norm) * old_delta <= kvs * state.h && rho < cfg.eta2 {
                warn!("k = {k}: rho = {rho:e} below eta2 although the radius is small relative to h");
            }
        }
        steps.push(StepInfo {
            k,
            x: state.x.clone(),
            trial: step.x.clone(),
            h: state.h,
            delta: old_delta,
            t: step.cauchy.t,
            b_norm: state.b_norm,
            pred: step.pred,
            pred_cauchy: step.pred_cauchy,
            cred,
            rho,
            obj_tol,
            step_norm,
            accepted,
            tolerances: tols,
        });

        eng.prox_trace.append(&mut state.trace);
        let (next, next_tols) = eng.build_model(&x, delta, Some(state.h), k + 1)?;
        state = next;
        tols = next_tols;
        converged = state.h <= cfg.stop_tol;
        records.push(IterationRecord {
            k,
            j,
            h: state.h,
            delta,
            step_norm: Some(step_norm),
            val_tol: tol_con,
            grad_tol: tols.grad,
            itsp: Some(step.iterations),
            spg_avg: eng.counters.aprox(),
            rho: Some(rho),
            accepted: Some(accepted),
            counters: eng.counters,
        });
        info!(
            "k = {k}: J = {j:.6e}, h = {:.4e}, delta = {delta:.4e}, step = {step_norm:.4e}, rho = {rho:.4e}, itsp = {}",
            state.h, step.iterations
        );
    }

    let certificate = if converged && cfg.certificate {
        let cert = certify(&mut *eng.problem, &x, phi, set, cfg, spg, state.theta.clone())?;
        if !cert.passed {
            warn!("stationarity certificate failed: {:?}", cert.residuals);
        }
        Some(cert)
    } else {
        None
    };
    if !converged {
        warn!("no convergence after {iterations} iterations (h = {:e})", state.h);
    }
    let newton_iterations = eng.problem.newton_iterations();
    eng.prox_trace.append(&mut state.trace);
    Ok(TrResult {
        x,
        j,
        h: state.h,
        converged,
        iterations,
        records,
        steps,
        counters: eng.counters,
        prox_trace: eng.prox_trace,
        newton_iterations,
        certificate,
    })
}

/// Checks `||x - prox_{t psi_x}(x - t grad f(x))|| / t <= 100 stop_tol` for
/// `t in {0.1, 1, 10}` with tight-tolerance oracles at `x`.
pub fn certify<P: SmoothProblem + ?Sized>(
    problem: &mut P,
    x: &SpaceVec,
    phi: &NonsmoothTerm,
    set: &SupportSet,
    cfg: &TrConfig,
    spg: &SpgConfig,
    theta: SpaceVec,
) -> Result<Certificate, TrError> {
    let tight = cfg.tight_tol;
    let g = problem.gradient_f(x, tight)?.value;
    let b = problem.value_con(x, tight)?.value;
    let a: Arc<dyn LinOp> = Arc::from(problem.jacobian(x, tight)?.value);
    let space = x.space().clone();
    let mut state = ModelState::new(x.clone(), g, b, a, Arc::new(ZeroOp::new(space.clone(), space)), cfg.delta1);
    state.theta = theta;
    let steps = vec![0.1, 1.0, 10.0];
    let mut scratch = Counters::default();
    let mut residuals = Vec::with_capacity(steps.len());
    for &t in &steps {
        residuals.push(stationarity_with_prox(&mut state, phi, set, t, spg, &mut scratch)?.0);
    }
    let threshold = 100.0 * cfg.stop_tol;
    let passed = residuals.iter().all(|r| *r <= threshold);
    Ok(Certificate {
        steps,
        residuals,
        threshold,
        passed,
    })
}
