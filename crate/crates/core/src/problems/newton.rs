//! Newton's method with a backtracking line search for discretized PDEs.

use super::OracleError;

const ARMIJO: f64 = 1e-4;
const MAX_HALVINGS: usize = 30;
pub const MAX_NEWTON: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PdeSolveReport {
    pub newton_iters: usize,
    pub initial_residual: f64,
    pub final_residual: f64,
    pub tol: f64,
}

impl PdeSolveReport {
    /// Achieved `||r(u)|| / max(1, ||r(u0)||)`.
    pub fn relative_residual(&self) -> f64 {
        self.final_residual / self.initial_residual.max(1.0)
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

/// Solves `r(u) = 0` until `||r(u)|| <= tol * max(1, ||r(u0)||)`.
///
/// `step(u, r)` must return the Newton correction `r'(u)^{-1} r`. The step is
/// halved until `||r||^2 / 2` satisfies an Armijo decrease.
pub fn newton_pde_solve<R, S>(
    mut residual: R,
    mut step: S,
    u0: Vec<f64>,
    tol: f64,
    sample: usize,
) -> Result<(Vec<f64>, PdeSolveReport), OracleError>
where
    R: FnMut(&[f64]) -> Vec<f64>,
    S: FnMut(&[f64], &[f64]) -> Result<Vec<f64>, OracleError>,
{
    if !(tol > 0.0) {
        return Err(OracleError::Invalid(format!("Newton tolerance {tol}")));
    }
    let mut u = u0;
    let mut r = residual(&u);
    let mut rn = norm(&r);
    let initial = rn;
    let target = tol * initial.max(1.0);
    let mut iters = 0;
    while rn > target {
        if iters == MAX_NEWTON {
            return Err(OracleError::Newton {
                sample,
                iterations: iters,
                residual: rn,
            });
        }
        let du = step(&u, &r)?;
        let merit = 0.5 * rn * rn;
        let mut alpha = 1.0;
        let mut accepted = false;
        for _ in 0..=MAX_HALVINGS {
            let trial: Vec<f64> = u.iter().zip(&du).map(|(a, d)| a - alpha * d).collect();
            let rt = residual(&trial);
            let nt = norm(&rt);
            if nt.is_finite() && 0.5 * nt * nt <= merit - ARMIJO * alpha * rn * rn {
                u = trial;
                r = rt;
                rn = nt;
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        iters += 1;
        if !accepted {
            return Err(OracleError::LineSearch { sample, residual: rn });
        }
    }
    Ok((
        u,
        PdeSolveReport {
            newton_iters: iters,
            initial_residual: initial,
            final_residual: rn,
            tol,
        },
    ))
}
