//! Sparse control of a semilinear elliptic equation on `(0, 0.6) x (0, 0.2)`.
//!
//! `-kappa lap u + gamma u^3 = 12 chi_{D_b} + z`, `u = 0` on the bottom edge and
//! homogeneous Neumann data elsewhere. The state is P1 on a uniform mesh of
//! split quadrilaterals and the control is piecewise constant on the same
//! triangles. The cubic term uses the lumped mass matrix.

use serde::{Deserialize, Serialize};

use super::linalg::SymBand;
use super::newton::newton_pde_solve;
use super::{Inexact, OracleError, SmoothProblem, TIGHT_TOL};
use crate::convex_terms::NonsmoothTerm;
use crate::hilbert::{DenseOp, HilbertError, LinOp, Space, SpaceVec};
use crate::support_sets::SupportSet;

pub const WIDTH: f64 = 0.6;
pub const HEIGHT: f64 = 0.2;
/// Source region `D_b`.
pub const SOURCE: Rect = Rect { x0: 0.0, x1: 0.1, y0: 0.167, y1: 0.2 };
/// Observation region `D_o`.
pub const OBSERVE: Rect = Rect { x0: 0.5, x1: 0.6, y0: 0.167, y1: 0.2 };

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rect {
    pub x0: f64,
    pub x1: f64,
    pub y0: f64,
    pub y1: f64,
}

impl Rect {
    pub fn area(&self) -> f64 {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EllipticConfig {
    pub nx: usize,
    pub ny: usize,
    pub kappa: f64,
    pub gamma: f64,
    /// Target level `w` in `F(z) = w - mean of u over D_o`.
    pub target: f64,
    pub tau: f64,
    pub tau1: f64,
    pub lower: f64,
    pub upper: f64,
}

impl Default for EllipticConfig {
    fn default() -> Self {
        Self {
            nx: 60,
            ny: 20,
            kappa: 0.25,
            gamma: 1.45,
            target: 0.2,
            tau: 1e-4,
            tau1: 1e-2,
            lower: -10.0,
            upper: 10.0,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Triangle {
    /// Reduced unknown index of each vertex, `None` on the Dirichlet edge.
    dofs: [Option<usize>; 3],
    pts: [[f64; 2]; 3],
}

#[derive(Debug)]
struct StateCache {
    x: Vec<f64>,
    u: Vec<f64>,
    err: f64,
    adjoint: Option<Vec<f64>>,
}

#[derive(Debug)]
pub struct Elliptic {
    cfg: EllipticConfig,
    tris: Vec<Triangle>,
    area: f64,
    stiffness: SymBand,
    lumped: Vec<f64>,
    source: Vec<f64>,
    /// `int_{D_o} phi_i / |D_o|`.
    observe: Vec<f64>,
    xspace: Space,
    yspace: Space,
    cache: Option<StateCache>,
    warm: Option<Vec<f64>>,
    newton: u64,
}

/// Problem, envelope `[0, 1]` and `tau1 ||z||_1 + indicator of [lower, upper]`.
pub fn elliptic_make(nx: usize, ny: usize) -> Result<(Elliptic, SupportSet, NonsmoothTerm), OracleError> {
    elliptic_from_config(&EllipticConfig {
        nx,
        ny,
        ..Default::default()
    })
}

pub fn elliptic_from_config(cfg: &EllipticConfig) -> Result<(Elliptic, SupportSet, NonsmoothTerm), OracleError> {
    if cfg.nx < 30 || cfg.nx != 3 * cfg.ny {
        return Err(OracleError::Invalid(format!(
            "mesh {}x{} must have nx >= 30 and nx = 3 ny",
            cfg.nx, cfg.ny
        )));
    }
    if !(cfg.kappa > 0.0) || !(cfg.gamma >= 0.0) || !(cfg.tau >= 0.0) || !(cfg.tau1 >= 0.0) || !(cfg.lower <= cfg.upper) {
        return Err(OracleError::Invalid(format!("bad constants {cfg:?}")));
    }
    let phi = NonsmoothTerm::L1PlusBox {
        tau: cfg.tau1,
        lo: cfg.lower,
        hi: cfg.upper,
    };
    let set = SupportSet::ScalarInterval { lo: 0.0, hi: 1.0 };
    Ok((Elliptic::new(cfg.clone())?, set, phi))
}

impl Elliptic {
    fn new(cfg: EllipticConfig) -> Result<Self, OracleError> {
        let (nx, ny) = (cfg.nx, cfg.ny);
        let hx = WIDTH / nx as f64;
        let hy = HEIGHT / ny as f64;
        let n = (nx + 1) * ny;
        let dof = |i: usize, j: usize| if j == 0 { None } else { Some(i * ny + j - 1) };
        let pt = |i: usize, j: usize| [i as f64 * hx, j as f64 * hy];
        let mut tris = Vec::with_capacity(2 * nx * ny);
        for i in 0..nx {
            for j in 0..ny {
                let (a, b, c, d) = ((i, j), (i + 1, j), (i + 1, j + 1), (i, j + 1));
                for [p, q, r] in [[a, b, c], [a, c, d]] {
                    tris.push(Triangle {
                        dofs: [dof(p.0, p.1), dof(q.0, q.1), dof(r.0, r.1)],
                        pts: [pt(p.0, p.1), pt(q.0, q.1), pt(r.0, r.1)],
                    });
                }
            }
        }
        let area = 0.5 * hx * hy;
        let mut stiffness = SymBand::zeros(n, ny + 1);
        let mut lumped = vec![0.0; n];
        let mut source = vec![0.0; n];
        let mut observe = vec![0.0; n];
        for t in &tris {
            let grads = p1_gradients(&t.pts);
            for a in 0..3 {
                let Some(ia) = t.dofs[a] else { continue };
                lumped[ia] += area / 3.0;
                for b in 0..=a {
                    let Some(ib) = t.dofs[b] else { continue };
                    let k = cfg.kappa * area * (grads[a][0] * grads[b][0] + grads[a][1] * grads[b][1]);
                    if ia == ib {
                        stiffness.add(ia, ia, k);
                    } else {
                        stiffness.add(ia, ib, k);
                    }
                }
            }
            let sb = clipped_moments(&t.pts, &SOURCE);
            let so = clipped_moments(&t.pts, &OBSERVE);
            for a in 0..3 {
                if let Some(ia) = t.dofs[a] {
                    source[ia] += 12.0 * sb[a];
                    observe[ia] += so[a] / OBSERVE.area();
                }
            }
        }
        let xspace = Space::new(vec![area; tris.len()])?;
        Ok(Self {
            cfg,
            tris,
            area,
            stiffness,
            lumped,
            source,
            observe,
            xspace,
            yspace: Space::euclidean(1),
            cache: None,
            warm: None,
            newton: 0,
        })
    }

    pub fn config(&self) -> &EllipticConfig {
        &self.cfg
    }

    pub fn n_states(&self) -> usize {
        self.lumped.len()
    }

    /// Reduced state at `x` solved to relative residual `tol`.
    pub fn state(&mut self, x: &SpaceVec, tol: f64) -> Result<Vec<f64>, OracleError> {
        self.ensure_state(x, tol)?;
        Ok(self.cache.as_ref().expect("state cached").u.clone())
    }

    /// `int_{D_o} u / |D_o|` for a reduced state vector.
    pub fn observed_mean(&self, u: &[f64]) -> f64 {
        self.observe.iter().zip(u).map(|(o, v)| o * v).sum()
    }

    fn load(&self, z: &[f64]) -> Vec<f64> {
        let mut f = self.source.clone();
        for (t, &zt) in self.tris.iter().zip(z) {
            for d in t.dofs.iter().flatten() {
                f[*d] += zt * self.area / 3.0;
            }
        }
        f
    }

    fn residual(&self, u: &[f64], load: &[f64]) -> Vec<f64> {
        let mut r = self.stiffness.mul(u);
        for i in 0..r.len() {
            r[i] += self.cfg.gamma * self.lumped[i] * u[i].powi(3) - load[i];
        }
        r
    }

    fn jacobian_matrix(&self, u: &[f64]) -> SymBand {
        let mut j = self.stiffness.clone();
        for (i, (m, v)) in self.lumped.iter().zip(u).enumerate() {
            j.add(i, i, 3.0 * self.cfg.gamma * m * v * v);
        }
        j
    }

    fn ensure_state(&mut self, x: &SpaceVec, tol: f64) -> Result<(), OracleError> {
        self.xspace.check_same(x.space())?;
        let tol = tol.max(TIGHT_TOL);
        let start = match &self.cache {
            Some(c) if c.x == x.coeffs() => {
                if c.err <= tol {
                    return Ok(());
                }
                c.u.clone()
            }
            _ => self.warm.clone().unwrap_or_else(|| vec![0.0; self.n_states()]),
        };
        let load = self.load(x.coeffs());
        let (u, rep) = newton_pde_solve(
            |u| self.residual(u, &load),
            |u, r| Ok(self.jacobian_matrix(u).cholesky()?.solve(r)),
            start,
            tol,
            0,
        )?;
        self.newton += rep.newton_iters as u64;
        self.warm = Some(u.clone());
        self.cache = Some(StateCache {
            x: x.coeffs().to_vec(),
            u,
            err: rep.relative_residual(),
            adjoint: None,
        });
        Ok(())
    }

    /// Solves `J(u) lambda = observe`.
    fn ensure_adjoint(&mut self, x: &SpaceVec, tol: f64) -> Result<(Vec<f64>, f64), OracleError> {
        self.ensure_state(x, tol)?;
        let c = self.cache.as_ref().expect("state cached");
        if let Some(l) = &c.adjoint {
            return Ok((l.clone(), c.err));
        }
        let l = self.jacobian_matrix(&c.u).cholesky()?.solve(&self.observe);
        let err = c.err;
        self.cache.as_mut().expect("state cached").adjoint = Some(l.clone());
        Ok((l, err))
    }

    /// Representer in `X` of `v -> (w, B v)` for a nodal vector `w`,
    /// where `B` maps a P0 control to its load vector.
    fn control_representer(&self, w: &[f64]) -> Vec<f64> {
        self.tris
            .iter()
            .map(|t| t.dofs.iter().flatten().map(|d| w[*d]).sum::<f64>() / 3.0)
            .collect()
    }
}

impl SmoothProblem for Elliptic {
    fn control_space(&self) -> Space {
        self.xspace.clone()
    }

    fn constraint_space(&self) -> Space {
        self.yspace.clone()
    }

    fn value_f(&mut self, x: &SpaceVec, _tol: f64) -> Result<Inexact<f64>, OracleError> {
        self.xspace.check_same(x.space())?;
        Ok(Inexact::exact(0.5 * self.cfg.tau * x.norm_squared()))
    }

    fn value_con(&mut self, x: &SpaceVec, tol: f64) -> Result<Inexact<SpaceVec>, OracleError> {
        self.ensure_state(x, tol)?;
        let c = self.cache.as_ref().expect("state cached");
        let v = self.cfg.target - self.observed_mean(&c.u);
        Ok(Inexact {
            value: self.yspace.vector(vec![v])?,
            err: c.err,
        })
    }

    fn gradient_f(&mut self, x: &SpaceVec, _tol: f64) -> Result<Inexact<SpaceVec>, OracleError> {
        self.xspace.check_same(x.space())?;
        Ok(Inexact::exact(x.scaled(self.cfg.tau)))
    }

    fn jacobian(&mut self, x: &SpaceVec, tol: f64) -> Result<Inexact<Box<dyn LinOp>>, OracleError> {
        let (l, err) = self.ensure_adjoint(x, tol)?;
        let rep: Vec<f64> = self.control_representer(&l).into_iter().map(|v| -v).collect();
        let op = DenseOp::from_representers(self.xspace.clone(), self.yspace.clone(), &[self.xspace.vector(rep)?])?;
        Ok(Inexact {
            value: Box::new(op),
            err,
        })
    }

    fn hessian_lagrangian(&mut self, x: &SpaceVec, theta: &SpaceVec, tol: f64) -> Result<Box<dyn LinOp>, OracleError> {
        self.yspace.check_same(theta.space())?;
        let (l, _) = self.ensure_adjoint(x, tol)?;
        let u = self.cache.as_ref().expect("state cached").u.clone();
        let chol = self.jacobian_matrix(&u).cholesky()?;
        let th = theta.coeffs()[0];
        let weight: Vec<f64> = (0..u.len())
            .map(|i| th * 6.0 * self.cfg.gamma * self.lumped[i] * u[i] * l[i])
            .collect();
        Ok(Box::new(EllipticHessian {
            space: self.xspace.clone(),
            tris: self.tris.clone(),
            area: self.area,
            tau: self.cfg.tau,
            n: u.len(),
            weight,
            chol,
        }))
    }

    fn newton_iterations(&self) -> u64 {
        self.newton
    }

    fn accuracy_floor(&self) -> f64 {
        TIGHT_TOL
    }
}

/// `v -> tau v + theta F''(z) v` through two solves with the state Jacobian.
struct EllipticHessian {
    space: Space,
    tris: Vec<Triangle>,
    area: f64,
    tau: f64,
    n: usize,
    weight: Vec<f64>,
    chol: super::linalg::BandCholesky,
}

impl LinOp for EllipticHessian {
    fn domain(&self) -> &Space {
        &self.space
    }

    fn codomain(&self) -> &Space {
        &self.space
    }

    fn apply(&self, v: &SpaceVec) -> Result<SpaceVec, HilbertError> {
        self.space.check_same(v.space())?;
        let mut load = vec![0.0; self.n];
        for (t, &vt) in self.tris.iter().zip(v.coeffs()) {
            for d in t.dofs.iter().flatten() {
                load[*d] += vt * self.area / 3.0;
            }
        }
        let du = self.chol.solve(&load);
        let rhs: Vec<f64> = du.iter().zip(&self.weight).map(|(a, w)| a * w).collect();
        let w = self.chol.solve(&rhs);
        let out = self
            .tris
            .iter()
            .zip(v.coeffs())
            .map(|(t, &vt)| self.tau * vt + t.dofs.iter().flatten().map(|d| w[*d]).sum::<f64>() / 3.0)
            .collect();
        self.space.vector(out)
    }

    fn apply_adjoint(&self, v: &SpaceVec) -> Result<SpaceVec, HilbertError> {
        self.apply(v)
    }
}

/// Constant gradients of the three P1 basis functions.
fn p1_gradients(p: &[[f64; 2]; 3]) -> [[f64; 2]; 3] {
    let det = (p[1][0] - p[0][0]) * (p[2][1] - p[0][1]) - (p[2][0] - p[0][0]) * (p[1][1] - p[0][1]);
    let mut g = [[0.0; 2]; 3];
    for a in 0..3 {
        let (b, c) = ((a + 1) % 3, (a + 2) % 3);
        g[a] = [(p[b][1] - p[c][1]) / det, (p[c][0] - p[b][0]) / det];
    }
    g
}

/// `int_{T cap R} phi_a` for the three P1 basis functions of `T`.
///
/// The integrand is linear, so area times the value at the centroid of the
/// clipped polygon is exact.
fn clipped_moments(p: &[[f64; 2]; 3], r: &Rect) -> [f64; 3] {
    let poly = clip(p, r);
    if poly.len() < 3 {
        return [0.0; 3];
    }
    let (mut a2, mut cx, mut cy) = (0.0, 0.0, 0.0);
    for k in 0..poly.len() {
        let (q0, q1) = (poly[k], poly[(k + 1) % poly.len()]);
        let cross = q0[0] * q1[1] - q1[0] * q0[1];
        a2 += cross;
        cx += (q0[0] + q1[0]) * cross;
        cy += (q0[1] + q1[1]) * cross;
    }
    if a2.abs() < 1e-300 {
        return [0.0; 3];
    }
    let area = 0.5 * a2.abs();
    let c = [cx / (3.0 * a2), cy / (3.0 * a2)];
    let bary = barycentric(p, c);
    [area * bary[0], area * bary[1], area * bary[2]]
}

fn barycentric(p: &[[f64; 2]; 3], q: [f64; 2]) -> [f64; 3] {
    let det = (p[1][0] - p[0][0]) * (p[2][1] - p[0][1]) - (p[2][0] - p[0][0]) * (p[1][1] - p[0][1]);
    let l1 = ((q[0] - p[0][0]) * (p[2][1] - p[0][1]) - (p[2][0] - p[0][0]) * (q[1] - p[0][1])) / det;
    let l2 = ((p[1][0] - p[0][0]) * (q[1] - p[0][1]) - (q[0] - p[0][0]) * (p[1][1] - p[0][1])) / det;
    [1.0 - l1 - l2, l1, l2]
}

/// Sutherland-Hodgman clipping of a triangle against an axis-aligned rectangle.
fn clip(p: &[[f64; 2]; 3], r: &Rect) -> Vec<[f64; 2]> {
    let mut poly: Vec<[f64; 2]> = p.to_vec();
    // (axis, bound, keep points with coordinate >= bound when true)
    for (axis, bound, above) in [(0, r.x0, true), (0, r.x1, false), (1, r.y0, true), (1, r.y1, false)] {
        if poly.is_empty() {
            break;
        }
        let inside = |q: &[f64; 2]| if above { q[axis] >= bound } else { q[axis] <= bound };
        let mut out = Vec::with_capacity(poly.len() + 2);
        for k in 0..poly.len() {
            let cur = poly[k];
            let prev = poly[(k + poly.len() - 1) % poly.len()];
            let (ci, pi) = (inside(&cur), inside(&prev));
            if ci != pi {
                let s = (bound - prev[axis]) / (cur[axis] - prev[axis]);
                out.push([prev[0] + s * (cur[0] - prev[0]), prev[1] + s * (cur[1] - prev[1])]);
            }
            if ci {
                out.push(cur);
            }
        }
        poly = out;
    }
    poly
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clipping_recovers_rectangle_areas() {
        let (p, _, _) = elliptic_make(60, 20).unwrap();
        let total_b: f64 = p.tris.iter().map(|t| clipped_moments(&t.pts, &SOURCE).iter().sum::<f64>()).sum();
        assert!((total_b - SOURCE.area()).abs() < 1e-15);
        // Dirichlet vertices lie at y = 0, far from D_o, so nothing is lost there
        let total_o: f64 = p.observe.iter().sum();
        assert!((total_o - 1.0).abs() < 1e-12);
    }

    #[test]
    fn clipped_first_moment_is_exact() {
        let tri = [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]];
        let r = Rect { x0: 0.0, x1: 0.5, y0: 0.0, y1: 1.0 };
        let m = clipped_moments(&tri, &r);
        // int of x over {x <= 1/2} in the unit triangle is 1/12
        assert!((m[1] - 1.0 / 12.0).abs() < 1e-15);
        assert!((m.iter().sum::<f64>() - 0.375).abs() < 1e-15);
    }

    #[test]
    fn stiffness_annihilates_constants_in_the_interior() {
        let (p, _, _) = elliptic_make(30, 10).unwrap();
        let ones = vec![1.0; p.n_states()];
        let k1 = p.stiffness.mul(&ones);
        // rows not coupled to the Dirichlet edge (j >= 2) sum to zero
        for i in 0..=30 {
            for j in 2..=10 {
                assert!(k1[i * 10 + j - 1].abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gradients_of_basis_sum_to_zero() {
        let g = p1_gradients(&[[0.0, 0.0], [0.2, 0.0], [0.2, 0.1]]);
        assert!((g[0][0] + g[1][0] + g[2][0]).abs() < 1e-14);
        assert!((g[0][1] + g[1][1] + g[2][1]).abs() < 1e-14);
    }

    #[test]
    fn rejects_bad_aspect() {
        assert!(elliptic_make(60, 30).is_err());
        assert!(elliptic_make(24, 8).is_err());
    }
}
