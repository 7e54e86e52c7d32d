//! Small closed-form problems for verification, plus an error-injection wrapper.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Inexact, OracleError, SmoothProblem};
use crate::hilbert::{DenseOp, DiagonalOp, HilbertError, LinOp, Space, SpaceVec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticKind {
    /// Convex quadratic `f`, affine `F`.
    ConvexQuadratic,
    /// Nonconvex quartic `f`, quadratic `F`.
    Quartic,
}

/// Exact-oracle test problem on a weighted `X` and a uniform probability `Y`.
///
/// `ConvexQuadratic`: `f(x) = 1/2 x^T S x + p^T x` in coefficients, `F(x) = C x + d`.
/// `Quartic`: `f(x) = sum_i w_i (x_i^4/4 - a_i x_i^2/2) + p^T x`,
/// `F_j(x) = 1/2 sum_i w_i q_ji x_i^2 + (r_j, x)_X + d_j`.
#[derive(Debug, Clone)]
pub struct Synthetic {
    kind: SyntheticKind,
    x: Space,
    y: Space,
    s: Vec<f64>,
    p: Vec<f64>,
    a: Vec<f64>,
    q: Vec<f64>,
    reps: Vec<SpaceVec>,
    d: Vec<f64>,
}

pub fn synthetic_make(dim_x: usize, dim_y: usize, seed: u64, kind: SyntheticKind) -> Result<Synthetic, OracleError> {
    if dim_x == 0 || dim_y == 0 || dim_x > 50 || dim_y > 50 {
        return Err(OracleError::Invalid(format!("synthetic dims {dim_x}x{dim_y} outside 1..=50")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w: Vec<f64> = (0..dim_x).map(|_| rng.gen_range(0.5..1.5) / dim_x as f64).collect();
    let x = Space::new(w.clone())?;
    let y = Space::uniform_probability(dim_y);

    // S = W^{1/2} (G^T G / n + I) W^{1/2}, so W^{-1} S has spectrum in [1, ...)
    let g: Vec<f64> = (0..dim_x * dim_x).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut s = vec![0.0; dim_x * dim_x];
    for i in 0..dim_x {
        for j in 0..dim_x {
            let mut v: f64 = (0..dim_x).map(|k| g[k * dim_x + i] * g[k * dim_x + j]).sum::<f64>() / dim_x as f64;
            if i == j {
                v += 1.0;
            }
            s[i * dim_x + j] = v * (w[i] * w[j]).sqrt();
        }
    }
    let p: Vec<f64> = w.iter().map(|wi| wi * rng.gen_range(-1.0..1.0)).collect();
    let a: Vec<f64> = (0..dim_x).map(|_| rng.gen_range(0.0..1.0)).collect();
    let q: Vec<f64> = (0..dim_y * dim_x).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let reps: Vec<SpaceVec> = (0..dim_y).map(|_| x.random(&mut rng)).collect();
    let d: Vec<f64> = (0..dim_y).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Ok(Synthetic {
        kind,
        x,
        y,
        s,
        p,
        a,
        q,
        reps,
        d,
    })
}

impl Synthetic {
    pub fn kind(&self) -> SyntheticKind {
        self.kind
    }

    /// Coefficient Hessian `S` of the convex quadratic (row-major).
    pub fn quadratic_matrix(&self) -> &[f64] {
        &self.s
    }

    /// Coefficient linear term `p`.
    pub fn linear_term(&self) -> &[f64] {
        &self.p
    }

    /// Riesz representers of the rows of `C` (affine part of `F`).
    pub fn constraint_representers(&self) -> &[SpaceVec] {
        &self.reps
    }

    pub fn constraint_offset(&self) -> &[f64] {
        &self.d
    }

    fn n(&self) -> usize {
        self.x.dim()
    }

    fn q_row(&self, j: usize) -> &[f64] {
        &self.q[j * self.n()..(j + 1) * self.n()]
    }

    pub fn f(&self, x: &SpaceVec) -> f64 {
        let c = x.coeffs();
        match self.kind {
            SyntheticKind::ConvexQuadratic => {
                let n = self.n();
                let mut v = 0.0;
                for i in 0..n {
                    let row: f64 = (0..n).map(|j| self.s[i * n + j] * c[j]).sum();
                    v += 0.5 * c[i] * row + self.p[i] * c[i];
                }
                v
            }
            SyntheticKind::Quartic => (0..self.n())
                .map(|i| {
                    let w = self.x.weights()[i];
                    w * (0.25 * c[i].powi(4) - 0.5 * self.a[i] * c[i] * c[i]) + self.p[i] * c[i]
                })
                .sum(),
        }
    }

    pub fn con(&self, x: &SpaceVec) -> Result<SpaceVec, HilbertError> {
        let mut out = Vec::with_capacity(self.y.dim());
        for (j, r) in self.reps.iter().enumerate() {
            let mut v = r.inner(x)? + self.d[j];
            if self.kind == SyntheticKind::Quartic {
                v += 0.5
                    * x.weights()
                        .iter()
                        .zip(self.q_row(j))
                        .zip(x.coeffs())
                        .map(|((w, q), a)| w * q * a * a)
                        .sum::<f64>();
            }
            out.push(v);
        }
        self.y.vector(out)
    }

    pub fn grad(&self, x: &SpaceVec) -> Result<SpaceVec, HilbertError> {
        self.x.check_same(x.space())?;
        let c = x.coeffs();
        let n = self.n();
        let w = self.x.weights();
        let g: Vec<f64> = match self.kind {
            SyntheticKind::ConvexQuadratic => (0..n)
                .map(|i| ((0..n).map(|j| self.s[i * n + j] * c[j]).sum::<f64>() + self.p[i]) / w[i])
                .collect(),
            SyntheticKind::Quartic => (0..n)
                .map(|i| c[i].powi(3) - self.a[i] * c[i] + self.p[i] / w[i])
                .collect(),
        };
        self.x.vector(g)
    }

    pub fn jac(&self, x: &SpaceVec) -> Result<DenseOp, HilbertError> {
        let reps: Vec<SpaceVec> = match self.kind {
            SyntheticKind::ConvexQuadratic => self.reps.clone(),
            SyntheticKind::Quartic => (0..self.y.dim())
                .map(|j| {
                    let mut r = self.reps[j].clone();
                    for ((ri, q), a) in r.coeffs_mut().iter_mut().zip(self.q_row(j)).zip(x.coeffs()) {
                        *ri += q * a;
                    }
                    r
                })
                .collect(),
        };
        DenseOp::from_representers(self.x.clone(), self.y.clone(), &reps)
    }

    pub fn hess(&self, x: &SpaceVec, theta: &SpaceVec) -> Result<Box<dyn LinOp>, HilbertError> {
        self.y.check_same(theta.space())?;
        let n = self.n();
        let w = self.x.weights();
        Ok(match self.kind {
            SyntheticKind::ConvexQuadratic => {
                let m: Vec<f64> = (0..n * n).map(|k| self.s[k] / w[k / n]).collect();
                Box::new(DenseOp::new(self.x.clone(), self.x.clone(), m)?)
            }
            SyntheticKind::Quartic => {
                let mut diag: Vec<f64> = (0..n)
                    .map(|i| 3.0 * x.coeffs()[i].powi(2) - self.a[i])
                    .collect();
                for (j, (&t, &wy)) in theta.coeffs().iter().zip(self.y.weights()).enumerate() {
                    for (di, q) in diag.iter_mut().zip(self.q_row(j)) {
                        *di += wy * t * q;
                    }
                }
                Box::new(DiagonalOp::new(self.x.clone(), diag)?)
            }
        })
    }
}

impl SmoothProblem for Synthetic {
    fn control_space(&self) -> Space {
        self.x.clone()
    }
    fn constraint_space(&self) -> Space {
        self.y.clone()
    }
    fn value_f(&mut self, x: &SpaceVec, _tol: f64) -> Result<Inexact<f64>, OracleError> {
        self.x.check_same(x.space())?;
        Ok(Inexact::exact(self.f(x)))
    }
    fn value_con(&mut self, x: &SpaceVec, _tol: f64) -> Result<Inexact<SpaceVec>, OracleError> {
        Ok(Inexact::exact(self.con(x)?))
    }
    fn gradient_f(&mut self, x: &SpaceVec, _tol: f64) -> Result<Inexact<SpaceVec>, OracleError> {
        Ok(Inexact::exact(self.grad(x)?))
    }
    fn jacobian(&mut self, x: &SpaceVec, _tol: f64) -> Result<Inexact<Box<dyn LinOp>>, OracleError> {
        Ok(Inexact::exact(Box::new(self.jac(x)?)))
    }
    fn hessian_lagrangian(&mut self, x: &SpaceVec, theta: &SpaceVec, _tol: f64) -> Result<Box<dyn LinOp>, OracleError> {
        Ok(self.hess(x, theta)?)
    }
}

/// `f(x) = 1/2 ||x - center||_X^2` with `F = 0` on a one-point `Y`.
#[derive(Debug, Clone)]
pub struct ShiftedQuadratic {
    center: SpaceVec,
    y: Space,
}

impl ShiftedQuadratic {
    pub fn new(center: SpaceVec) -> Self {
        Self {
            center,
            y: Space::euclidean(1),
        }
    }
}

impl SmoothProblem for ShiftedQuadratic {
    fn control_space(&self) -> Space {
        self.center.space().clone()
    }
    fn constraint_space(&self) -> Space {
        self.y.clone()
    }
    fn value_f(&mut self, x: &SpaceVec, _tol: f64) -> Result<Inexact<f64>, OracleError> {
        Ok(Inexact::exact(0.5 * x.dist(&self.center)?.powi(2)))
    }
    fn value_con(&mut self, x: &SpaceVec, _tol: f64) -> Result<Inexact<SpaceVec>, OracleError> {
        self.center.space().check_same(x.space())?;
        Ok(Inexact::exact(self.y.zeros()))
    }
    fn gradient_f(&mut self, x: &SpaceVec, _tol: f64) -> Result<Inexact<SpaceVec>, OracleError> {
        Ok(Inexact::exact(x.sub(&self.center)?))
    }
    fn jacobian(&mut self, _x: &SpaceVec, _tol: f64) -> Result<Inexact<Box<dyn LinOp>>, OracleError> {
        let x = self.center.space().clone();
        Ok(Inexact::exact(Box::new(crate::hilbert::ZeroOp::new(x, self.y.clone()))))
    }
    fn hessian_lagrangian(&mut self, _x: &SpaceVec, _theta: &SpaceVec, _tol: f64) -> Result<Box<dyn LinOp>, OracleError> {
        Ok(Box::new(crate::hilbert::IdentityOp::new(self.center.space().clone())))
    }
}

fn mix(mut h: u64, v: u64) -> u64 {
    h ^= v.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(h << 6).wrapping_add(h >> 2);
    h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^ (h >> 31)
}

fn point_rng(x: &SpaceVec, salt: u64) -> ChaCha8Rng {
    let seed = x.coeffs().iter().fold(mix(0, salt), |h, a| mix(h, a.to_bits()));
    ChaCha8Rng::seed_from_u64(seed)
}

fn unit(space: &Space, rng: &mut ChaCha8Rng) -> SpaceVec {
    loop {
        let v = space.random(rng);
        let n = v.norm();
        if n > 1e-3 {
            return v.scaled(1.0 / n);
        }
    }
}

/// `A + eps * u (v, .)_X` with unit `u`, `v`, so `||perturbation|| = eps`.
struct RankOnePerturbed {
    base: Box<dyn LinOp>,
    u: SpaceVec,
    v: SpaceVec,
    eps: f64,
}

impl LinOp for RankOnePerturbed {
    fn domain(&self) -> &Space {
        self.base.domain()
    }
    fn codomain(&self) -> &Space {
        self.base.codomain()
    }
    fn apply(&self, w: &SpaceVec) -> Result<SpaceVec, HilbertError> {
        let mut out = self.base.apply(w)?;
        out.axpy(self.eps * self.v.inner(w)?, &self.u)?;
        Ok(out)
    }
    fn apply_adjoint(&self, t: &SpaceVec) -> Result<SpaceVec, HilbertError> {
        let mut out = self.base.apply_adjoint(t)?;
        out.axpy(self.eps * self.u.inner(t)?, &self.v)?;
        Ok(out)
    }
}

/// Wraps a problem and perturbs every value, gradient and Jacobian by exactly
/// the requested tolerance, in a direction that depends only on `x`.
///
/// The reported error bound equals the injected error, so the wrapper is an
/// honest inexact oracle. At `tol = 0` outputs are bit-equal to the inner problem.
pub struct Perturbed<P> {
    inner: P,
}

impl<P: SmoothProblem> Perturbed<P> {
    pub fn new(inner: P) -> Self {
        Self { inner }
    }

    pub fn inner(&self) -> &P {
        &self.inner
    }

    pub fn inner_mut(&mut self) -> &mut P {
        &mut self.inner
    }
}

impl<P: SmoothProblem> SmoothProblem for Perturbed<P> {
    fn control_space(&self) -> Space {
        self.inner.control_space()
    }
    fn constraint_space(&self) -> Space {
        self.inner.constraint_space()
    }
    fn value_f(&mut self, x: &SpaceVec, tol: f64) -> Result<Inexact<f64>, OracleError> {
        let mut out = self.inner.value_f(x, tol)?;
        if tol > 0.0 {
            let sign = if point_rng(x, 1).gen_bool(0.5) { 1.0 } else { -1.0 };
            out.value += sign * tol;
            out.err += tol;
        }
        Ok(out)
    }
    fn value_con(&mut self, x: &SpaceVec, tol: f64) -> Result<Inexact<SpaceVec>, OracleError> {
        let mut out = self.inner.value_con(x, tol)?;
        if tol > 0.0 {
            let dir = unit(&self.inner.constraint_space(), &mut point_rng(x, 2));
            out.value.axpy(tol, &dir)?;
            out.err += tol;
        }
        Ok(out)
    }
    fn gradient_f(&mut self, x: &SpaceVec, tol: f64) -> Result<Inexact<SpaceVec>, OracleError> {
        let mut out = self.inner.gradient_f(x, tol)?;
        if tol > 0.0 {
            let dir = unit(&self.inner.control_space(), &mut point_rng(x, 3));
            out.value.axpy(tol, &dir)?;
            out.err += tol;
        }
        Ok(out)
    }
    fn jacobian(&mut self, x: &SpaceVec, tol: f64) -> Result<Inexact<Box<dyn LinOp>>, OracleError> {
        let out = self.inner.jacobian(x, tol)?;
        if tol > 0.0 {
            let mut rng = point_rng(x, 4);
            let u = unit(&self.inner.constraint_space(), &mut rng);
            let v = unit(&self.inner.control_space(), &mut rng);
            return Ok(Inexact {
                value: Box::new(RankOnePerturbed {
                    base: out.value,
                    u,
                    v,
                    eps: tol,
                }),
                err: out.err + tol,
            });
        }
        Ok(out)
    }
    fn hessian_lagrangian(&mut self, x: &SpaceVec, theta: &SpaceVec, tol: f64) -> Result<Box<dyn LinOp>, OracleError> {
        self.inner.hessian_lagrangian(x, theta, tol)
    }
    fn newton_iterations(&self) -> u64 {
        self.inner.newton_iterations()
    }
    fn accuracy_floor(&self) -> f64 {
        self.inner.accuracy_floor()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hilbert::{check_adjoint, operator_norm};

    fn fd_check(p: &mut dyn SmoothProblem, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xs = p.control_space();
        let ys = p.constraint_space();
        for _ in 0..5 {
            let x = xs.random(&mut rng);
            let dir = xs.random(&mut rng);
            let h = 1e-6 * (1.0 + x.norm());
            let fp = p.value_f(&x.lin_comb(1.0, h, &dir).unwrap(), 0.0).unwrap().value;
            let fm = p.value_f(&x.lin_comb(1.0, -h, &dir).unwrap(), 0.0).unwrap().value;
            let fd = (fp - fm) / (2.0 * h);
            let an = p.gradient_f(&x, 0.0).unwrap().value.inner(&dir).unwrap();
            assert!((fd - an).abs() <= 1e-5 * an.abs().max(1.0), "{fd} {an}");

            let theta = ys.random(&mut rng);
            let lag = |p: &mut dyn SmoothProblem, x: &SpaceVec| p.value_con(x, 0.0).unwrap().value.inner(&theta).unwrap();
            let fd = (lag(p, &x.lin_comb(1.0, h, &dir).unwrap()) - lag(p, &x.lin_comb(1.0, -h, &dir).unwrap())) / (2.0 * h);
            let jac = p.jacobian(&x, 0.0).unwrap().value;
            let an = jac.apply_adjoint(&theta).unwrap().inner(&dir).unwrap();
            assert!((fd - an).abs() <= 1e-5 * an.abs().max(1.0));
            assert!(check_adjoint(jac.as_ref(), 5, seed).unwrap() < 1e-12);

            // Hessian of the Lagrangian vs. differences of its gradient
            let lag_grad = |p: &mut dyn SmoothProblem, x: &SpaceVec| {
                let mut g = p.gradient_f(x, 0.0).unwrap().value;
                g.axpy(1.0, &p.jacobian(x, 0.0).unwrap().value.apply_adjoint(&theta).unwrap()).unwrap();
                g
            };
            let gp = lag_grad(p, &x.lin_comb(1.0, h, &dir).unwrap());
            let gm = lag_grad(p, &x.lin_comb(1.0, -h, &dir).unwrap());
            let fd = gp.lin_comb(0.5 / h, -0.5 / h, &gm).unwrap();
            let hv = p.hessian_lagrangian(&x, &theta, 0.0).unwrap().apply(&dir).unwrap();
            assert!(fd.dist(&hv).unwrap() <= 1e-5 * hv.norm().max(1.0));
        }
    }

    #[test]
    fn derivatives_match_finite_differences() {
        fd_check(&mut synthetic_make(6, 4, 3, SyntheticKind::ConvexQuadratic).unwrap(), 1);
        fd_check(&mut synthetic_make(5, 3, 4, SyntheticKind::Quartic).unwrap(), 2);
    }

    #[test]
    fn hessian_is_self_adjoint() {
        for kind in [SyntheticKind::ConvexQuadratic, SyntheticKind::Quartic] {
            let mut p = synthetic_make(7, 3, 9, kind).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let x = p.control_space().random(&mut rng);
            let th = p.constraint_space().random(&mut rng);
            let h = p.hessian_lagrangian(&x, &th, 0.0).unwrap();
            for _ in 0..10 {
                let u = x.space().random(&mut rng);
                let v = x.space().random(&mut rng);
                let a = h.apply(&u).unwrap().inner(&v).unwrap();
                let b = u.inner(&h.apply(&v).unwrap()).unwrap();
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn zero_tolerance_is_bit_exact() {
        let p = synthetic_make(4, 2, 1, SyntheticKind::Quartic).unwrap();
        let mut wrapped = Perturbed::new(p.clone());
        let mut plain = p;
        let x = wrapped.control_space().constant(0.3);
        assert_eq!(
            wrapped.value_f(&x, 0.0).unwrap().value.to_bits(),
            plain.value_f(&x, 0.0).unwrap().value.to_bits()
        );
        assert_eq!(wrapped.value_con(&x, 0.0).unwrap().value, plain.value_con(&x, 0.0).unwrap().value);
        assert_eq!(wrapped.gradient_f(&x, 0.0).unwrap().value, plain.gradient_f(&x, 0.0).unwrap().value);
    }

    #[test]
    fn injected_error_equals_reported_bound() {
        let p = synthetic_make(5, 3, 2, SyntheticKind::ConvexQuadratic).unwrap();
        let mut wrapped = Perturbed::new(p.clone());
        let mut plain = p;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for &tol in &[1e-1, 1e-4, 3e-7] {
            let x = wrapped.control_space().random(&mut rng);
            let fv = wrapped.value_f(&x, tol).unwrap();
            assert_eq!(fv.err, tol);
            assert!(((fv.value - plain.value_f(&x, 0.0).unwrap().value).abs() - tol).abs() < 1e-15);
            let cv = wrapped.value_con(&x, tol).unwrap();
            let d = cv.value.dist(&plain.value_con(&x, 0.0).unwrap().value).unwrap();
            assert!((d - tol).abs() < 1e-14 && cv.err == tol);
            let gv = wrapped.gradient_f(&x, tol).unwrap();
            let d = gv.value.dist(&plain.gradient_f(&x, 0.0).unwrap().value).unwrap();
            assert!((d - tol).abs() < 1e-14 && gv.err == tol);

            // same point, same perturbation
            assert_eq!(wrapped.value_f(&x, tol).unwrap().value, fv.value);

            let jw = wrapped.jacobian(&x, tol).unwrap();
            let jp = plain.jac(&x).unwrap();
            struct Diff<'a>(&'a dyn LinOp, &'a DenseOp);
            impl LinOp for Diff<'_> {
                fn domain(&self) -> &Space {
                    self.0.domain()
                }
                fn codomain(&self) -> &Space {
                    self.0.codomain()
                }
                fn apply(&self, u: &SpaceVec) -> Result<SpaceVec, HilbertError> {
                    self.0.apply(u)?.sub(&self.1.apply(u)?)
                }
                fn apply_adjoint(&self, v: &SpaceVec) -> Result<SpaceVec, HilbertError> {
                    self.0.apply_adjoint(v)?.sub(&self.1.apply_adjoint(v)?)
                }
            }
            let n = operator_norm(&Diff(jw.value.as_ref(), &jp), 100, 1e-13, 3).unwrap();
            assert!((n - tol).abs() <= 1e-8 * tol, "{n} {tol}");
            assert_eq!(jw.err, tol);
        }
    }
}
