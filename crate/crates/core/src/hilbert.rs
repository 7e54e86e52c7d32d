//! Weighted coefficient spaces.
//!
//! A [`Space`] is a diagonal Riesz map: the inner product of two coefficient
//! vectors is `sum_i w_i u_i v_i`. Using quadrature or lumped-mass weights makes
//! inner products and norms approximate the continuum `L2` quantities, so
//! algorithm constants do not drift with the mesh.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HilbertError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("vectors live in different weighted spaces")]
    WeightMismatch,
    #[error("weight {index} is not strictly positive and finite: {value}")]
    BadWeight { index: usize, value: f64 },
    #[error("operator application failed: {0}")]
    Apply(String),
}

/// Diagonal metric shared by all vectors of one space.
#[derive(Clone)]
pub struct Space {
    weights: Arc<[f64]>,
}

impl Space {
    pub fn new(weights: Vec<f64>) -> Result<Self, HilbertError> {
        for (index, &value) in weights.iter().enumerate() {
            if !(value.is_finite() && value > 0.0) {
                return Err(HilbertError::BadWeight { index, value });
            }
        }
        Ok(Self {
            weights: weights.into(),
        })
    }

    /// Unit weights, i.e. plain Euclidean `R^n`.
    pub fn euclidean(dim: usize) -> Self {
        Self {
            weights: vec![1.0; dim].into(),
        }
    }

    /// `n` equal weights summing to one (sample-average probabilities).
    pub fn uniform_probability(n: usize) -> Self {
        Self {
            weights: vec![1.0 / n as f64; n].into(),
        }
    }

    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Total measure `sum_i w_i`.
    pub fn measure(&self) -> f64 {
        self.weights.iter().sum()
    }

    pub fn zeros(&self) -> SpaceVec {
        SpaceVec {
            space: self.clone(),
            coeffs: vec![0.0; self.dim()],
        }
    }

    pub fn constant(&self, value: f64) -> SpaceVec {
        SpaceVec {
            space: self.clone(),
            coeffs: vec![value; self.dim()],
        }
    }

    pub fn vector(&self, coeffs: Vec<f64>) -> Result<SpaceVec, HilbertError> {
        SpaceVec::new(coeffs, self.clone())
    }

    /// Random vector with i.i.d. entries in `[-1, 1)`.
    pub fn random(&self, rng: &mut impl Rng) -> SpaceVec {
        let coeffs = (0..self.dim()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        SpaceVec {
            space: self.clone(),
            coeffs,
        }
    }

    pub fn check_same(&self, other: &Space) -> Result<(), HilbertError> {
        if self == other {
            Ok(())
        } else if self.dim() != other.dim() {
            Err(HilbertError::Dimension {
                expected: self.dim(),
                got: other.dim(),
            })
        } else {
            Err(HilbertError::WeightMismatch)
        }
    }
}

impl PartialEq for Space {
    fn eq(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.weights, &other.weights) || self.weights[..] == other.weights[..]
    }
}

impl fmt::Debug for Space {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Space(dim={}, measure={})", self.dim(), self.measure())
    }
}

/// Coefficient vector tied to its space.
#[derive(Clone, PartialEq)]
pub struct SpaceVec {
    space: Space,
    coeffs: Vec<f64>,
}

impl fmt::Debug for SpaceVec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SpaceVec")
            .field("coeffs", &self.coeffs)
            .finish()
    }
}

impl SpaceVec {
    pub fn new(coeffs: Vec<f64>, space: Space) -> Result<Self, HilbertError> {
        if coeffs.len() != space.dim() {
            return Err(HilbertError::Dimension {
                expected: space.dim(),
                got: coeffs.len(),
            });
        }
        Ok(Self { space, coeffs })
    }

    pub fn space(&self) -> &Space {
        &self.space
    }

    pub fn weights(&self) -> &[f64] {
        self.space.weights()
    }

    pub fn len(&self) -> usize {
        self.coeffs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coeffs.is_empty()
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn coeffs_mut(&mut self) -> &mut [f64] {
        &mut self.coeffs
    }

    pub fn into_coeffs(self) -> Vec<f64> {
        self.coeffs
    }

    /// Same space, new coefficients.
    pub fn with_coeffs(&self, coeffs: Vec<f64>) -> Result<Self, HilbertError> {
        Self::new(coeffs, self.space.clone())
    }

    pub fn inner(&self, other: &SpaceVec) -> Result<f64, HilbertError> {
        self.space.check_same(&other.space)?;
        Ok(self
            .weights()
            .iter()
            .zip(&self.coeffs)
            .zip(&other.coeffs)
            .map(|((w, a), b)| w * a * b)
            .sum())
    }

    pub fn norm_squared(&self) -> f64 {
        self.weights()
            .iter()
            .zip(&self.coeffs)
            .map(|(w, a)| w * a * a)
            .sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_squared().sqrt()
    }

    pub fn dist(&self, other: &SpaceVec) -> Result<f64, HilbertError> {
        self.space.check_same(&other.space)?;
        Ok(self
            .weights()
            .iter()
            .zip(&self.coeffs)
            .zip(&other.coeffs)
            .map(|((w, a), b)| w * (a - b) * (a - b))
            .sum::<f64>()
            .sqrt())
    }

    /// `self += alpha * x`
    pub fn axpy(&mut self, alpha: f64, x: &SpaceVec) -> Result<(), HilbertError> {
        self.space.check_same(&x.space)?;
        for (a, b) in self.coeffs.iter_mut().zip(&x.coeffs) {
            *a += alpha * b;
        }
        Ok(())
    }

    /// `alpha * self + beta * x` as a new vector.
    pub fn lin_comb(&self, alpha: f64, beta: f64, x: &SpaceVec) -> Result<SpaceVec, HilbertError> {
        self.space.check_same(&x.space)?;
        let coeffs = self
            .coeffs
            .iter()
            .zip(&x.coeffs)
            .map(|(a, b)| alpha * a + beta * b)
            .collect();
        Ok(SpaceVec {
            space: self.space.clone(),
            coeffs,
        })
    }

    pub fn add(&self, x: &SpaceVec) -> Result<SpaceVec, HilbertError> {
        self.lin_comb(1.0, 1.0, x)
    }

    pub fn sub(&self, x: &SpaceVec) -> Result<SpaceVec, HilbertError> {
        self.lin_comb(1.0, -1.0, x)
    }

    pub fn scaled(&self, alpha: f64) -> SpaceVec {
        SpaceVec {
            space: self.space.clone(),
            coeffs: self.coeffs.iter().map(|a| alpha * a).collect(),
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        self.coeffs.iter_mut().for_each(|a| *a *= alpha);
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> SpaceVec {
        SpaceVec {
            space: self.space.clone(),
            coeffs: self.coeffs.iter().map(|&a| f(a)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.coeffs.iter().all(|a| a.is_finite())
    }
}

/// Bounded linear operator between two weighted spaces.
///
/// `apply_adjoint` must be the adjoint in the *weighted* inner products,
/// `(A u, v)_Y = (u, A* v)_X`, not the plain matrix transpose.
pub trait LinOp: Send + Sync {
    fn domain(&self) -> &Space;
    fn codomain(&self) -> &Space;
    fn apply(&self, u: &SpaceVec) -> Result<SpaceVec, HilbertError>;
    fn apply_adjoint(&self, v: &SpaceVec) -> Result<SpaceVec, HilbertError>;
}

pub struct IdentityOp {
    space: Space,
}

impl IdentityOp {
    pub fn new(space: Space) -> Self {
        Self { space }
    }
}

impl LinOp for IdentityOp {
    fn domain(&self) -> &Space {
        &self.space
    }
    fn codomain(&self) -> &Space {
        &self.space
    }
    fn apply(&self, u: &SpaceVec) -> Result<SpaceVec, HilbertError> {
        self.space.check_same(u.space())?;
        Ok(u.clone())
    }
    fn apply_adjoint(&self, v: &SpaceVec) -> Result<SpaceVec, HilbertError> {
        self.apply(v)
    }
}

/// The zero map `X -> Y`.
pub struct ZeroOp {
    domain: Space,
    codomain: Space,
}

impl ZeroOp {
    pub fn new(domain: Space, codomain: Space) -> Self {
        Self { domain, codomain }
    }
}

impl LinOp for ZeroOp {
    fn domain(&self) -> &Space {
        &self.domain
    }
    fn codomain(&self) -> &Space {
        &self.codomain
    }
    fn apply(&self, u: &SpaceVec) -> Result<SpaceVec, HilbertError> {
        self.domain.check_same(u.space())?;
        Ok(self.codomain.zeros())
    }
    fn apply_adjoint(&self, v: &SpaceVec) -> Result<SpaceVec, HilbertError> {
        self.codomain.check_same(v.space())?;
        Ok(self.domain.zeros())
    }
}

/// Coefficient-level diagonal scaling `u_i -> d_i u_i` on one space.
pub struct DiagonalOp {
    space: Space,
    diag: Vec<f64>,
}

impl DiagonalOp {
    pub fn new(space: Space, diag: Vec<f64>) -> Result<Self, HilbertError> {
        if diag.len() != space.dim() {
            return Err(HilbertError::Dimension {
                expected: space.dim(),
                got: diag.len(),
            });
        }
        Ok(Self { space, diag })
    }
}

impl LinOp for DiagonalOp {
    fn domain(&self) -> &Space {
        &self.space
    }
    fn codomain(&self) -> &Space {
        &self.space
    }
    fn apply(&self, u: &SpaceVec) -> Result<SpaceVec, HilbertError> {
        self.space.check_same(u.space())?;
        let coeffs = u.coeffs().iter().zip(&self.diag).map(|(a, d)| a * d).collect();
        u.with_coeffs(coeffs)
    }
    fn apply_adjoint(&self, v: &SpaceVec) -> Result<SpaceVec, HilbertError> {
        // diagonal scaling commutes with a diagonal metric
        self.apply(v)
    }
}

/// Dense matrix acting on coefficients, row-major, `rows = dim Y`, `cols = dim X`.
///
/// The weighted adjoint is `W_X^{-1} M^T W_Y`.
#[derive(Clone)]
pub struct DenseOp {
    domain: Space,
    codomain: Space,
    matrix: Vec<f64>,
}

impl DenseOp {
    pub fn new(domain: Space, codomain: Space, matrix: Vec<f64>) -> Result<Self, HilbertError> {
        let expected = domain.dim() * codomain.dim();
        if matrix.len() != expected {
            return Err(HilbertError::Dimension {
                expected,
                got: matrix.len(),
            });
        }
        Ok(Self {
            domain,
            codomain,
            matrix,
        })
    }

    pub fn random(domain: Space, codomain: Space, rng: &mut impl Rng) -> Self {
        let matrix = (0..domain.dim() * codomain.dim())
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        Self {
            domain,
            codomain,
            matrix,
        }
    }

    /// Operator `u -> ((r_i, u)_X)_i` built from Riesz representers `r_i` in `X`.
    pub fn from_representers(domain: Space, codomain: Space, reps: &[SpaceVec]) -> Result<Self, HilbertError> {
        if reps.len() != codomain.dim() {
            return Err(HilbertError::Dimension {
                expected: codomain.dim(),
                got: reps.len(),
            });
        }
        let mut matrix = Vec::with_capacity(domain.dim() * codomain.dim());
        for r in reps {
            domain.check_same(r.space())?;
            matrix.extend(r.coeffs().iter().zip(domain.weights()).map(|(a, w)| a * w));
        }
        Self::new(domain, codomain, matrix)
    }

    pub fn matrix(&self) -> &[f64] {
        &self.matrix
    }

    pub fn entry(&self, row: usize, col: usize) -> f64 {
        self.matrix[row * self.domain.dim() + col]
    }

    /// Coefficient-level difference `self - other`.
    pub fn minus(&self, other: &DenseOp) -> Result<DenseOp, HilbertError> {
        self.domain.check_same(&other.domain)?;
        self.codomain.check_same(&other.codomain)?;
        let matrix = self
            .matrix
            .iter()
            .zip(&other.matrix)
            .map(|(a, b)| a - b)
            .collect();
        Ok(DenseOp {
            domain: self.domain.clone(),
            codomain: self.codomain.clone(),
            matrix,
        })
    }
}

impl LinOp for DenseOp {
    fn domain(&self) -> &Space {
        &self.domain
    }
    fn codomain(&self) -> &Space {
        &self.codomain
    }
    fn apply(&self, u: &SpaceVec) -> Result<SpaceVec, HilbertError> {
        self.domain.check_same(u.space())?;
        let n = self.domain.dim();
        let coeffs = self
            .matrix
            .chunks_exact(n.max(1))
            .take(self.codomain.dim())
            .map(|row| row.iter().zip(u.coeffs()).map(|(a, b)| a * b).sum())
            .collect();
        self.codomain.vector(coeffs)
    }
    fn apply_adjoint(&self, v: &SpaceVec) -> Result<SpaceVec, HilbertError> {
        self.codomain.check_same(v.space())?;
        let n = self.domain.dim();
        let mut out = vec![0.0; n];
        for (row, (&vi, &wi)) in self
            .matrix
            .chunks_exact(n.max(1))
            .zip(v.coeffs().iter().zip(self.codomain.weights()))
        {
            let s = vi * wi;
            for (o, a) in out.iter_mut().zip(row) {
                *o += a * s;
            }
        }
        for (o, w) in out.iter_mut().zip(self.domain.weights()) {
            *o /= w;
        }
        self.domain.vector(out)
    }
}

/// Largest relative adjoint defect `|(Au,v)_Y - (u,A*v)_X| / (1 + |(Au,v)_Y|)`
/// over `trials` random pairs.
pub fn check_adjoint(op: &dyn LinOp, trials: usize, seed: u64) -> Result<f64, HilbertError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0_f64;
    for _ in 0..trials {
        let u = op.domain().random(&mut rng);
        let v = op.codomain().random(&mut rng);
        let lhs = op.apply(&u)?.inner(&v)?;
        let rhs = u.inner(&op.apply_adjoint(&v)?)?;
        worst = worst.max((lhs - rhs).abs() / (1.0 + lhs.abs()));
    }
    Ok(worst)
}

/// Operator norm estimate by power iteration on `A* A`.
pub fn operator_norm(op: &dyn LinOp, iterations: usize, tol: f64, seed: u64) -> Result<f64, HilbertError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut u = op.domain().random(&mut rng);
    let n0 = u.norm();
    if n0 == 0.0 {
        return Ok(0.0);
    }
    u.scale(1.0 / n0);
    let mut estimate = 0.0_f64;
    for _ in 0..iterations {
        let au = op.apply(&u)?;
        let next = op.apply_adjoint(&au)?;
        let lambda = next.norm();
        if lambda == 0.0 {
            return Ok(0.0);
        }
        let new_estimate = lambda.sqrt();
        u = next.scaled(1.0 / lambda);
        let done = (new_estimate - estimate).abs() <= tol * new_estimate;
        estimate = new_estimate;
        if done {
            break;
        }
    }
    Ok(estimate)
}

/// Spectral-radius estimate of a self-adjoint operator on `X` by power iteration.
pub fn self_adjoint_norm(op: &dyn LinOp, iterations: usize, tol: f64, seed: u64) -> Result<f64, HilbertError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut u = op.domain().random(&mut rng);
    let n0 = u.norm();
    if n0 == 0.0 {
        return Ok(0.0);
    }
    u.scale(1.0 / n0);
    let mut estimate = 0.0_f64;
    for _ in 0..iterations {
        let next = op.apply(&u)?;
        let lambda = next.norm();
        if lambda == 0.0 {
            return Ok(0.0);
        }
        u = next.scaled(1.0 / lambda);
        let done = (lambda - estimate).abs() <= tol * lambda;
        estimate = lambda;
        if done {
            break;
        }
    }
    Ok(estimate)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn space(w: &[f64]) -> Space {
        Space::new(w.to_vec()).unwrap()
    }

    #[test]
    fn inner_examples() {
        let s = space(&[1.0, 1.0]);
        let u = s.vector(vec![1.0, 2.0]).unwrap();
        let v = s.vector(vec![3.0, 4.0]).unwrap();
        assert_eq!(u.inner(&v).unwrap(), 11.0);

        let h = space(&[0.5, 0.5]);
        let u = h.vector(vec![1.0, 2.0]).unwrap();
        let v = h.vector(vec![3.0, 4.0]).unwrap();
        assert_eq!(u.inner(&v).unwrap(), 5.5);

        let d = space(&[0.1, 0.2, 0.3, 0.4]);
        let one = d.constant(1.0);
        assert!((one.inner(&one).unwrap() - d.measure()).abs() < 1e-15);
    }

    #[test]
    fn norm_examples() {
        let s = space(&[1.0, 1.0]);
        assert_eq!(s.vector(vec![3.0, 4.0]).unwrap().norm(), 5.0);
        assert_eq!(s.zeros().norm(), 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let r = space(&[0.3, 1.7, 0.01, 2.0, 0.5]);
        for _ in 0..20 {
            let u = r.random(&mut rng);
            let n2 = u.norm().powi(2);
            let ip = u.inner(&u).unwrap();
            assert!((n2 - ip).abs() <= 1e-14 * ip.max(1e-300));
        }
    }

    #[test]
    fn mismatches_are_errors() {
        let a = space(&[1.0, 1.0]);
        let b = space(&[1.0, 2.0]);
        let c = space(&[1.0, 1.0, 1.0]);
        assert_eq!(a.zeros().inner(&b.zeros()), Err(HilbertError::WeightMismatch));
        assert!(matches!(
            a.zeros().inner(&c.zeros()),
            Err(HilbertError::Dimension { .. })
        ));
        assert!(matches!(
            Space::new(vec![1.0, 0.0]),
            Err(HilbertError::BadWeight { index: 1, .. })
        ));
        assert!(Space::new(vec![f64::NAN]).is_err());
    }

    #[test]
    fn adjoint_defects() {
        let s = space(&[0.2, 0.7, 1.3]);
        assert_eq!(check_adjoint(&IdentityOp::new(s.clone()), 10, 1).unwrap(), 0.0);
        let d = DiagonalOp::new(s.clone(), vec![2.0, -1.0, 0.5]).unwrap();
        assert!(check_adjoint(&d, 10, 2).unwrap() <= 1e-14);

        let y = space(&[0.25, 0.25, 0.5, 1.5]);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m = DenseOp::random(s, y, &mut rng);
        assert!(check_adjoint(&m, 20, 4).unwrap() <= 1e-14);
    }

    #[test]
    fn power_iteration_on_diagonal() {
        let s = space(&[1.0, 3.0, 0.5]);
        let d = DiagonalOp::new(s, vec![2.0, -5.0, 1.0]).unwrap();
        let n = operator_norm(&d, 200, 1e-14, 1).unwrap();
        assert!((n - 5.0).abs() < 1e-8);
    }
}
