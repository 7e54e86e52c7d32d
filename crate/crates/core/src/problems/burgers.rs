//! Risk-averse control of the viscous Burgers equation on `(0, 1)`.
//!
//! For each sample `omega_i` the state solves
//! `-nu u'' + u u' = z` with `u(0) = d0`, `u(1) = d1`, discretized with
//! continuous P1 elements on a uniform grid. The control lives on the same
//! nodes with lumped-mass weights, and `F(z)_i = 1/2 ||S_i(z) - 1||^2`.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::linalg::Tridiagonal;
use super::newton::{newton_pde_solve, PdeSolveReport};
use super::{Inexact, OracleError, SmoothProblem, TIGHT_TOL};
use crate::hilbert::{DenseOp, HilbertError, LinOp, Space, SpaceVec};
use crate::support_sets::SupportSet;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BurgersConfig {
    pub n_cells: usize,
    pub n_samples: usize,
    pub seed: u64,
    pub lambda: f64,
    pub p: f64,
    /// Control cost `tau / 2 ||z||^2`.
    pub tau: f64,
}

impl Default for BurgersConfig {
    fn default() -> Self {
        Self {
            n_cells: 128,
            n_samples: 200,
            seed: 0,
            lambda: 0.75,
            p: 0.9,
            tau: 1e-3,
        }
    }
}

/// Random coefficients of one sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleData {
    pub nu: f64,
    pub d0: f64,
    pub d1: f64,
}

impl SampleData {
    /// `nu = 10^u` with `u ~ U[-2, -1]`, `d0 = 1 + 0.1 xi0`, `d1 = -0.1 xi1`.
    pub fn draw(rng: &mut impl Rng) -> Self {
        let e: f64 = rng.gen_range(-2.0..-1.0);
        let xi0: f64 = rng.gen_range(0.0..1.0);
        let xi1: f64 = rng.gen_range(0.0..1.0);
        Self {
            nu: 10f64.powf(e),
            d0: 1.0 + 0.1 * xi0,
            d1: -0.1 * xi1,
        }
    }
}

#[derive(Debug)]
struct StateCache {
    x: Vec<f64>,
    states: Arc<Vec<Vec<f64>>>,
    err: f64,
    values: Vec<f64>,
    adjoints: Option<Arc<Vec<Vec<f64>>>>,
}

#[derive(Debug)]
pub struct Burgers {
    n: usize,
    h: f64,
    tau: f64,
    xspace: Space,
    yspace: Space,
    samples: Vec<SampleData>,
    cache: Option<StateCache>,
    warm: Option<Arc<Vec<Vec<f64>>>>,
    newton: u64,
}

pub fn burgers_make(cfg: &BurgersConfig) -> Result<(Burgers, SupportSet), OracleError> {
    if cfg.n_cells < 16 {
        return Err(OracleError::Invalid(format!("n_cells = {} < 16", cfg.n_cells)));
    }
    if cfg.n_samples == 0 {
        return Err(OracleError::Invalid("n_samples = 0".into()));
    }
    if !(cfg.tau >= 0.0) {
        return Err(OracleError::Invalid(format!("tau = {}", cfg.tau)));
    }
    let set = SupportSet::risk_combo(cfg.lambda, cfg.p)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let samples = (0..cfg.n_samples).map(|_| SampleData::draw(&mut rng)).collect();
    Ok((Burgers::new(cfg.n_cells, samples, cfg.tau)?, set))
}

impl Burgers {
    pub fn new(n_cells: usize, samples: Vec<SampleData>, tau: f64) -> Result<Self, OracleError> {
        if n_cells < 2 || samples.is_empty() {
            return Err(OracleError::Invalid("need at least 2 cells and 1 sample".into()));
        }
        let h = 1.0 / n_cells as f64;
        let mut w = vec![h; n_cells + 1];
        w[0] = 0.5 * h;
        w[n_cells] = 0.5 * h;
        Ok(Self {
            n: n_cells,
            h,
            tau,
            xspace: Space::new(w)?,
            yspace: Space::uniform_probability(samples.len()),
            samples,
            cache: None,
            warm: None,
            newton: 0,
        })
    }

    pub fn n_cells(&self) -> usize {
        self.n
    }

    pub fn samples(&self) -> &[SampleData] {
        &self.samples
    }

    /// Interior states of every sample at `x`, solved to relative residual `tol`.
    pub fn states(&mut self, x: &SpaceVec, tol: f64) -> Result<Arc<Vec<Vec<f64>>>, OracleError> {
        self.ensure_states(x, tol)?;
        Ok(self.cache.as_ref().expect("states cached").states.clone())
    }

    fn ensure_states(&mut self, x: &SpaceVec, tol: f64) -> Result<(), OracleError> {
        self.xspace.check_same(x.space())?;
        let tol = tol.max(TIGHT_TOL);
        let start = match &self.cache {
            Some(c) if c.x == x.coeffs() => {
                if c.err <= tol {
                    return Ok(());
                }
                Some(c.states.clone())
            }
            _ => self.warm.clone(),
        };
        let z = x.coeffs();
        let this = &*self;
        let solved: Vec<(Vec<f64>, PdeSolveReport)> = (0..this.samples.len())
            .into_par_iter()
            .map(|i| {
                let s = this.samples[i];
                let u0 = match &start {
                    Some(st) => st[i].clone(),
                    None => this.linear_guess(&s),
                };
                newton_pde_solve(
                    |u| this.residual(&s, u, z),
                    |u, r| this.jacobian_matrix(&s, u).solve(r),
                    u0,
                    tol,
                    i,
                )
            })
            .collect::<Result<_, _>>()?;
        let mut err: f64 = 0.0;
        let mut states = Vec::with_capacity(solved.len());
        let mut values = Vec::with_capacity(solved.len());
        for (i, (u, rep)) in solved.into_iter().enumerate() {
            self.newton += rep.newton_iters as u64;
            err = err.max(rep.relative_residual());
            values.push(self.misfit(&self.samples[i], &u));
            states.push(u);
        }
        let states = Arc::new(states);
        self.warm = Some(states.clone());
        self.cache = Some(StateCache {
            x: z.to_vec(),
            states,
            err,
            values,
            adjoints: None,
        });
        Ok(())
    }

    fn ensure_adjoints(&mut self, x: &SpaceVec, tol: f64) -> Result<(Arc<Vec<Vec<f64>>>, f64), OracleError> {
        self.ensure_states(x, tol)?;
        let cache = self.cache.as_ref().expect("states cached");
        if let Some(a) = &cache.adjoints {
            return Ok((a.clone(), cache.err));
        }
        let this = &*self;
        let adj: Vec<Vec<f64>> = (0..this.samples.len())
            .into_par_iter()
            .map(|i| {
                let s = this.samples[i];
                let u = &cache.states[i];
                let rhs = this.mass_misfit(&s, u);
                this.jacobian_matrix(&s, u).transpose().solve(&rhs)
            })
            .collect::<Result<_, _>>()?;
        let adj = Arc::new(adj);
        let err = cache.err;
        self.cache.as_mut().expect("states cached").adjoints = Some(adj.clone());
        Ok((adj, err))
    }

    fn linear_guess(&self, s: &SampleData) -> Vec<f64> {
        (1..self.n)
            .map(|i| {
                let t = i as f64 * self.h;
                (1.0 - t) * s.d0 + t * s.d1
            })
            .collect()
    }

    /// Node value `u_j`, `j = 0..=n`, from interior unknowns.
    fn node(&self, s: &SampleData, u: &[f64], j: usize) -> f64 {
        if j == 0 {
            s.d0
        } else if j == self.n {
            s.d1
        } else {
            u[j - 1]
        }
    }

    fn residual(&self, s: &SampleData, u: &[f64], z: &[f64]) -> Vec<f64> {
        let k = s.nu / self.h;
        (1..self.n)
            .map(|i| {
                let (a, b, c) = (self.node(s, u, i - 1), u[i - 1], self.node(s, u, i + 1));
                k * (2.0 * b - a - c) + (c * c - a * a + b * (c - a)) / 6.0 - self.h * z[i]
            })
            .collect()
    }

    fn jacobian_matrix(&self, s: &SampleData, u: &[f64]) -> Tridiagonal {
        let k = s.nu / self.h;
        let m = self.n - 1;
        let mut t = Tridiagonal::zeros(m);
        for r in 0..m {
            let i = r + 1;
            let (a, b, c) = (self.node(s, u, i - 1), u[r], self.node(s, u, i + 1));
            t.diag[r] = 2.0 * k + (c - a) / 6.0;
            t.lower[r] = -k - (2.0 * a + b) / 6.0;
            t.upper[r] = -k + (2.0 * c + b) / 6.0;
        }
        t
    }

    /// `1/2 int (u - 1)^2` with the consistent P1 mass matrix.
    fn misfit(&self, s: &SampleData, u: &[f64]) -> f64 {
        let mut sum = 0.0;
        for e in 0..self.n {
            let a = self.node(s, u, e) - 1.0;
            let b = self.node(s, u, e + 1) - 1.0;
            sum += a * a + a * b + b * b;
        }
        sum * self.h / 6.0
    }

    /// Gradient of the misfit with respect to the interior unknowns.
    fn mass_misfit(&self, s: &SampleData, u: &[f64]) -> Vec<f64> {
        (1..self.n)
            .map(|i| {
                let e = |j| self.node(s, u, j) - 1.0;
                self.h / 6.0 * (e(i - 1) + 4.0 * e(i) + e(i + 1))
            })
            .collect()
    }

    fn representer(&self, interior: &[f64]) -> Result<SpaceVec, HilbertError> {
        let mut c = vec![0.0; self.n + 1];
        c[1..self.n].copy_from_slice(interior);
        self.xspace.vector(c)
    }
}

impl SmoothProblem for Burgers {
    fn control_space(&self) -> Space {
        self.xspace.clone()
    }

    fn constraint_space(&self) -> Space {
        self.yspace.clone()
    }

    fn value_f(&mut self, x: &SpaceVec, _tol: f64) -> Result<Inexact<f64>, OracleError> {
        self.xspace.check_same(x.space())?;
        Ok(Inexact::exact(0.5 * self.tau * x.norm_squared()))
    }

    fn value_con(&mut self, x: &SpaceVec, tol: f64) -> Result<Inexact<SpaceVec>, OracleError> {
        self.ensure_states(x, tol)?;
        let c = self.cache.as_ref().expect("states cached");
        Ok(Inexact {
            value: self.yspace.vector(c.values.clone())?,
            err: c.err,
        })
    }

    fn gradient_f(&mut self, x: &SpaceVec, _tol: f64) -> Result<Inexact<SpaceVec>, OracleError> {
        self.xspace.check_same(x.space())?;
        Ok(Inexact::exact(x.scaled(self.tau)))
    }

    fn jacobian(&mut self, x: &SpaceVec, tol: f64) -> Result<Inexact<Box<dyn LinOp>>, OracleError> {
        let (adj, err) = self.ensure_adjoints(x, tol)?;
        let reps = adj.iter().map(|l| self.representer(l)).collect::<Result<Vec<_>, _>>()?;
        let op = DenseOp::from_representers(self.xspace.clone(), self.yspace.clone(), &reps)?;
        Ok(Inexact {
            value: Box::new(op),
            err,
        })
    }

    fn hessian_lagrangian(&mut self, x: &SpaceVec, theta: &SpaceVec, tol: f64) -> Result<Box<dyn LinOp>, OracleError> {
        self.yspace.check_same(theta.space())?;
        let (adj, _) = self.ensure_adjoints(x, tol)?;
        let states = self.cache.as_ref().expect("states cached").states.clone();
        let mut parts = Vec::new();
        for (i, s) in self.samples.iter().enumerate() {
            let coef = theta.coeffs()[i] * self.yspace.weights()[i];
            if coef == 0.0 {
                continue;
            }
            let jac = self.jacobian_matrix(s, &states[i]);
            parts.push(SampleCurvature {
                coef,
                jac_t: jac.transpose(),
                jac,
                adjoint: adj[i].clone(),
            });
        }
        Ok(Box::new(BurgersHessian {
            space: self.xspace.clone(),
            n: self.n,
            h: self.h,
            tau: self.tau,
            parts,
        }))
    }

    fn newton_iterations(&self) -> u64 {
        self.newton
    }

    fn accuracy_floor(&self) -> f64 {
        TIGHT_TOL
    }
}

struct SampleCurvature {
    coef: f64,
    jac: Tridiagonal,
    jac_t: Tridiagonal,
    adjoint: Vec<f64>,
}

/// `v -> tau v + sum_i w_i theta_i F_i''(z) v`, each term through one
/// linearized and one adjoint solve.
struct BurgersHessian {
    space: Space,
    n: usize,
    h: f64,
    tau: f64,
    parts: Vec<SampleCurvature>,
}

impl BurgersHessian {
    fn sample_term(&self, p: &SampleCurvature, v: &[f64]) -> Result<Vec<f64>, HilbertError> {
        let m = self.n - 1;
        let rhs: Vec<f64> = (0..m).map(|r| self.h * v[r + 1]).collect();
        let du = p.jac.solve(&rhs).map_err(|e| HilbertError::Apply(e.to_string()))?;
        let at = |r: isize| if r < 0 || r as usize >= m { 0.0 } else { du[r as usize] };
        let mut rhs2: Vec<f64> = (0..m as isize)
            .map(|r| self.h / 6.0 * (at(r - 1) + 4.0 * at(r) + at(r + 1)))
            .collect();
        for r in 0..m {
            let l = p.adjoint[r] / 6.0;
            let (a, b, c) = (at(r as isize - 1), du[r], at(r as isize + 1));
            if r + 1 < m {
                rhs2[r + 1] -= l * (2.0 * c + b);
            }
            if r > 0 {
                rhs2[r - 1] -= l * (-2.0 * a - b);
            }
            rhs2[r] -= l * (c - a);
        }
        p.jac_t.solve(&rhs2).map_err(|e| HilbertError::Apply(e.to_string()))
    }
}

impl LinOp for BurgersHessian {
    fn domain(&self) -> &Space {
        &self.space
    }

    fn codomain(&self) -> &Space {
        &self.space
    }

    fn apply(&self, u: &SpaceVec) -> Result<SpaceVec, HilbertError> {
        self.space.check_same(u.space())?;
        let v = u.coeffs();
        let terms: Vec<Vec<f64>> = self
            .parts
            .par_iter()
            .map(|p| self.sample_term(p, v))
            .collect::<Result<_, _>>()?;
        let mut out: Vec<f64> = v.iter().map(|a| self.tau * a).collect();
        for (p, t) in self.parts.iter().zip(&terms) {
            for (o, d) in out[1..self.n].iter_mut().zip(t) {
                *o += p.coef * d;
            }
        }
        self.space.vector(out)
    }

    fn apply_adjoint(&self, v: &SpaceVec) -> Result<SpaceVec, HilbertError> {
        self.apply(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(n_samples: usize) -> (Burgers, SupportSet) {
        burgers_make(&BurgersConfig {
            n_cells: 32,
            n_samples,
            seed: 3,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn default_envelope_bounds() {
        let (_, set) = burgers_make(&BurgersConfig {
            n_samples: 2,
            ..Default::default()
        })
        .unwrap();
        match set {
            SupportSet::MeanConstrainedBox { lo, hi } => {
                assert!((lo - 0.25).abs() < 1e-15);
                assert!((hi - 7.75).abs() < 1e-12);
            }
            other => panic!("unexpected set {other:?}"),
        }
    }

    #[test]
    fn rejects_coarse_mesh() {
        let cfg = BurgersConfig {
            n_cells: 8,
            ..Default::default()
        };
        assert!(burgers_make(&cfg).is_err());
    }

    #[test]
    fn states_meet_requested_residual() {
        let (mut p, _) = small(4);
        let x = p.control_space().constant(0.3);
        let st = p.states(&x, 1e-10).unwrap();
        for (i, s) in p.samples().iter().enumerate() {
            let r = p.residual(s, &st[i], x.coeffs());
            let nr = r.iter().map(|a| a * a).sum::<f64>().sqrt();
            assert!(nr <= 1e-10 * 10.0, "sample {i}: {nr}");
        }
        let before = p.newton_iterations();
        p.value_con(&x, 1e-8).unwrap();
        assert_eq!(p.newton_iterations(), before);
    }

    #[test]
    fn linearized_solve_matches_state_difference() {
        let (mut p, _) = small(1);
        let x = p.control_space().constant(0.1);
        let v = p.control_space().constant(1.0);
        let s = p.samples()[0];
        let u = p.states(&x, 0.0).unwrap()[0].clone();
        let eps = 1e-6;
        let up = p.states(&x.lin_comb(1.0, eps, &v).unwrap(), 0.0).unwrap()[0].clone();
        let um = p.states(&x.lin_comb(1.0, -eps, &v).unwrap(), 0.0).unwrap()[0].clone();
        let rhs: Vec<f64> = (1..p.n).map(|_| p.h).collect();
        let du = p.jacobian_matrix(&s, &u).solve(&rhs).unwrap();
        for r in 0..du.len() {
            let fd = (up[r] - um[r]) / (2.0 * eps);
            assert!((fd - du[r]).abs() < 1e-6 * (1.0 + du[r].abs()));
        }
    }
}
