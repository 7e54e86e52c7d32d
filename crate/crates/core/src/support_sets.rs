//! Closed bounded convex sets described through their support function.
//!
//! Every set offers the support value `sigma(y) = sup_{theta in set} (theta, y)_Y`,
//! a maximizer (a subgradient of `sigma` at `y`), the metric projection in the
//! weighted `Y` inner product, and an upper bound on `sup ||theta||_Y`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hilbert::{HilbertError, Space, SpaceVec};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SupportError {
    #[error("infeasible set: {0}")]
    Infeasible(String),
    #[error("projection bracket failed: residuals {lo_res} and {hi_res} do not straddle zero")]
    NonBracketing { lo_res: f64, hi_res: f64 },
    #[error(transparent)]
    Hilbert(#[from] HilbertError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SupportSet {
    /// `{a}`; `sigma` is linear.
    Singleton { point: Vec<f64> },
    /// `[lo, hi]` on a one-dimensional `Y`.
    ScalarInterval { lo: f64, hi: f64 },
    /// `{theta : lo <= theta_i <= hi}`.
    Box { lo: f64, hi: f64 },
    /// `{theta : sum_i w_i theta_i = 1, lo <= theta_i <= hi}`, the risk envelope
    /// of a mixture of expectation and average value-at-risk under SAA.
    MeanConstrainedBox { lo: f64, hi: f64 },
}

impl SupportSet {
    /// Envelope of `(1 - lambda) E[.] + lambda AVaR_p[.]`.
    pub fn risk_combo(lambda: f64, p: f64) -> Result<Self, SupportError> {
        if !(0.0..=1.0).contains(&lambda) || !(0.0..1.0).contains(&p) {
            return Err(SupportError::Infeasible(format!(
                "risk mixture needs lambda in [0,1] and p in [0,1), got lambda={lambda}, p={p}"
            )));
        }
        let lo = 1.0 - lambda;
        Ok(SupportSet::MeanConstrainedBox {
            lo,
            hi: lo + lambda / (1.0 - p),
        })
    }

    /// Validates the set against `space` (dimension and nonemptiness).
    pub fn check(&self, space: &Space) -> Result<(), SupportError> {
        match self {
            SupportSet::Singleton { point } => {
                if point.len() != space.dim() {
                    return Err(HilbertError::Dimension {
                        expected: space.dim(),
                        got: point.len(),
                    }
                    .into());
                }
            }
            SupportSet::ScalarInterval { lo, hi } => {
                if space.dim() != 1 {
                    return Err(HilbertError::Dimension {
                        expected: 1,
                        got: space.dim(),
                    }
                    .into());
                }
                if !(lo <= hi) {
                    return Err(SupportError::Infeasible(format!("interval [{lo}, {hi}]")));
                }
            }
            SupportSet::Box { lo, hi } => {
                if !(lo <= hi) {
                    return Err(SupportError::Infeasible(format!("box [{lo}, {hi}]")));
                }
            }
            SupportSet::MeanConstrainedBox { lo, hi } => {
                let m = space.measure();
                let slack = 1e-12;
                if !(lo <= hi) || lo * m > 1.0 + slack || hi * m < 1.0 - slack {
                    return Err(SupportError::Infeasible(format!(
                        "mean-one box [{lo}, {hi}] on a space of measure {m}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn support_value(&self, y: &SpaceVec) -> Result<f64, SupportError> {
        let theta = self.support_argmax(y)?;
        Ok(theta.inner(y)?)
    }

    /// A maximizer of `(theta, y)_Y` over the set. Ties go to the lower bound
    /// for intervals and boxes; for the mean-constrained box, entries are
    /// filled in order of decreasing `y` with the lowest index first among equals.
    pub fn support_argmax(&self, y: &SpaceVec) -> Result<SpaceVec, SupportError> {
        self.check(y.space())?;
        let pick = |lo: f64, hi: f64| move |v: f64| if v > 0.0 { hi } else { lo };
        match self {
            SupportSet::Singleton { point } => Ok(y.with_coeffs(point.clone())?),
            SupportSet::ScalarInterval { lo, hi } | SupportSet::Box { lo, hi } => {
                Ok(y.map(pick(*lo, *hi)))
            }
            SupportSet::MeanConstrainedBox { lo, hi } => {
                let w = y.weights();
                let mut order: Vec<usize> = (0..y.len()).collect();
                // stable: equal values keep index order
                order.sort_by(|&a, &b| y.coeffs()[b].total_cmp(&y.coeffs()[a]));
                let mut theta = vec![*lo; y.len()];
                let mut budget = 1.0 - lo * y.space().measure();
                for &i in &order {
                    if budget <= 0.0 {
                        break;
                    }
                    let capacity = (hi - lo) * w[i];
                    if capacity <= budget {
                        theta[i] = *hi;
                        budget -= capacity;
                    } else {
                        theta[i] = lo + budget / w[i];
                        budget = 0.0;
                    }
                }
                Ok(y.with_coeffs(theta)?)
            }
        }
    }

    /// Metric projection in the weighted `Y` inner product.
    pub fn project(&self, y: &SpaceVec) -> Result<SpaceVec, SupportError> {
        self.check(y.space())?;
        match self {
            SupportSet::Singleton { point } => Ok(y.with_coeffs(point.clone())?),
            SupportSet::ScalarInterval { lo, hi } | SupportSet::Box { lo, hi } => {
                Ok(y.map(|v| v.clamp(*lo, *hi)))
            }
            SupportSet::MeanConstrainedBox { lo, hi } => {
                let mu = mean_shift(y, *lo, *hi)?;
                Ok(y.map(|v| (v - mu).clamp(*lo, *hi)))
            }
        }
    }

    /// Upper bound on `sup_{theta in set} ||theta||_Y` (box-corner bound).
    pub fn bound(&self, space: &Space) -> f64 {
        match self {
            SupportSet::Singleton { point } => space
                .weights()
                .iter()
                .zip(point)
                .map(|(w, a)| w * a * a)
                .sum::<f64>()
                .sqrt(),
            SupportSet::ScalarInterval { lo, hi }
            | SupportSet::Box { lo, hi }
            | SupportSet::MeanConstrainedBox { lo, hi } => {
                lo.abs().max(hi.abs()) * space.measure().sqrt()
            }
        }
    }
}

/// Solve `sum_i w_i clip(y_i - mu, lo, hi) = 1` for `mu`: bisection, then an
/// exact solve on the free set identified by the final bracket.
fn mean_shift(y: &SpaceVec, lo: f64, hi: f64) -> Result<f64, SupportError> {
    let w = y.weights();
    let c = y.coeffs();
    let residual = |mu: f64| -> f64 {
        w.iter()
            .zip(c)
            .map(|(wi, yi)| wi * (yi - mu).clamp(lo, hi))
            .sum::<f64>()
            - 1.0
    };
    let ymax = c.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let ymin = c.iter().cloned().fold(f64::INFINITY, f64::min);
    let (mut a, mut b) = (ymin - hi, ymax - lo);
    let (ra, rb) = (residual(a), residual(b));
    let tol = 1e-13;
    if ra.abs() <= tol {
        return Ok(a);
    }
    if rb.abs() <= tol {
        return Ok(b);
    }
    if !(ra > 0.0 && rb < 0.0) {
        return Err(SupportError::NonBracketing {
            lo_res: ra,
            hi_res: rb,
        });
    }
    let mut mu = 0.5 * (a + b);
    for _ in 0..200 {
        mu = 0.5 * (a + b);
        let r = residual(mu);
        if r.abs() <= tol || mu <= a || mu >= b {
            break;
        }
        if r > 0.0 {
            a = mu;
        } else {
            b = mu;
        }
    }
    // polish: with the active set fixed the equation is linear in mu
    let (mut free_w, mut free_wy, mut fixed) = (0.0, 0.0, 0.0);
    for (wi, yi) in w.iter().zip(c) {
        let v = yi - mu;
        if v <= lo {
            fixed += wi * lo;
        } else if v >= hi {
            fixed += wi * hi;
        } else {
            free_w += wi;
            free_wy += wi * yi;
        }
    }
    if free_w > 0.0 {
        let exact = (free_wy + fixed - 1.0) / free_w;
        if residual(exact).abs() <= residual(mu).abs() {
            mu = exact;
        }
    }
    Ok(mu)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn half() -> Space {
        Space::new(vec![0.5, 0.5]).unwrap()
    }

    /// Enumerate the vertices of `{theta : w.theta = 1, lo <= theta <= hi}` in 2-D.
    fn vertices_2d(w: [f64; 2], lo: f64, hi: f64) -> Vec<[f64; 2]> {
        let mut out = Vec::new();
        for fixed in 0..2 {
            for &val in &[lo, hi] {
                let other = 1 - fixed;
                let t = (1.0 - w[fixed] * val) / w[other];
                if t >= lo - 1e-12 && t <= hi + 1e-12 {
                    let mut v = [0.0; 2];
                    v[fixed] = val;
                    v[other] = t;
                    out.push(v);
                }
            }
        }
        out
    }

    #[test]
    fn interval_support() {
        let s = Space::euclidean(1);
        let set = SupportSet::ScalarInterval { lo: 0.0, hi: 1.0 };
        assert_eq!(set.support_value(&s.vector(vec![-3.0]).unwrap()).unwrap(), 0.0);
        assert_eq!(set.support_value(&s.vector(vec![2.0]).unwrap()).unwrap(), 2.0);
        assert_eq!(set.support_argmax(&s.vector(vec![2.0]).unwrap()).unwrap().coeffs(), &[1.0]);
        assert_eq!(set.bound(&s), 1.0);
    }

    #[test]
    fn risk_combo_bounds() {
        let set = SupportSet::risk_combo(0.75, 0.9).unwrap();
        match set {
            SupportSet::MeanConstrainedBox { lo, hi } => {
                assert!((lo - 0.25).abs() < 1e-15);
                assert!((hi - 7.75).abs() < 1e-12);
            }
            _ => unreachable!(),
        }
    }

    #[test]
    fn mean_box_support_matches_vertex_lp() {
        let set = SupportSet::MeanConstrainedBox { lo: 0.25, hi: 7.75 };
        let y = half().vector(vec![1.0, 0.0]).unwrap();
        let lp = vertices_2d([0.5, 0.5], 0.25, 7.75)
            .iter()
            .map(|v| 0.5 * v[0] * 1.0 + 0.5 * v[1] * 0.0)
            .fold(f64::NEG_INFINITY, f64::max);
        let value = set.support_value(&y).unwrap();
        assert!((value - 0.875).abs() < 1e-14);
        assert!((value - lp).abs() < 1e-14);
        let theta = set.support_argmax(&y).unwrap();
        assert!((theta.coeffs()[0] - 1.75).abs() < 1e-14);
        assert!((theta.coeffs()[1] - 0.25).abs() < 1e-14);

        let corner = vertices_2d([0.5, 0.5], 0.25, 7.75)
            .iter()
            .map(|v| (0.5 * v[0] * v[0] + 0.5 * v[1] * v[1]).sqrt())
            .fold(0.0, f64::max);
        let b = set.bound(&half());
        assert!(b <= 7.75 + 1e-12 && b >= corner);
    }

    #[test]
    fn singleton_is_constant() {
        let set = SupportSet::Singleton { point: vec![0.3, -2.0] };
        let y = half().vector(vec![5.0, 1.0]).unwrap();
        assert_eq!(set.support_argmax(&y).unwrap().coeffs(), &[0.3, -2.0]);
        let a = half().vector(vec![0.3, -2.0]).unwrap();
        assert!((set.bound(&half()) - a.norm()).abs() < 1e-15);
    }

    #[test]
    fn projection_examples() {
        let s = Space::euclidean(2);
        let b = SupportSet::Box { lo: -1.0, hi: 1.0 };
        assert_eq!(b.project(&s.vector(vec![2.0, -0.5]).unwrap()).unwrap().coeffs(), &[1.0, -0.5]);

        let m = SupportSet::MeanConstrainedBox { lo: 0.25, hi: 7.75 };
        let p = m.project(&half().vector(vec![2.0, 2.0]).unwrap()).unwrap();
        assert!((p.coeffs()[0] - 1.0).abs() < 1e-13 && (p.coeffs()[1] - 1.0).abs() < 1e-13);
    }

    #[test]
    fn mean_box_projection_matches_segment_search() {
        let m = SupportSet::MeanConstrainedBox { lo: 0.0, hi: 10.0 };
        let y = half().vector(vec![3.0, 0.0]).unwrap();
        let p = m.project(&y).unwrap();
        // feasible segment: theta = (t, 2 - t), t in [0, 2]
        let n = 2_000_001;
        let mut best = (f64::INFINITY, 0.0);
        for k in 0..n {
            let t = 2.0 * k as f64 / (n - 1) as f64;
            let d = 0.5 * (t - 3.0).powi(2) + 0.5 * (2.0 - t).powi(2);
            if d < best.0 {
                best = (d, t);
            }
        }
        assert!((p.coeffs()[0] - best.1).abs() < 1e-6);
        assert!((p.coeffs()[1] - (2.0 - best.1)).abs() < 1e-6);
    }

    #[test]
    fn infeasible_parameters() {
        let m = SupportSet::MeanConstrainedBox { lo: 3.0, hi: 4.0 };
        assert!(matches!(
            m.project(&half().zeros()),
            Err(SupportError::Infeasible(_))
        ));
        assert!(SupportSet::risk_combo(0.5, 1.0).is_err());
        let i = SupportSet::ScalarInterval { lo: 0.0, hi: 1.0 };
        assert!(i.support_value(&half().zeros()).is_err());
    }

    fn random_sets() -> Vec<(SupportSet, Space)> {
        let w = Space::new(vec![0.1, 0.3, 0.2, 0.15, 0.25]).unwrap();
        vec![
            (SupportSet::Box { lo: -1.0, hi: 2.0 }, w.clone()),
            (SupportSet::ScalarInterval { lo: -0.5, hi: 1.0 }, Space::new(vec![0.7]).unwrap()),
            (SupportSet::MeanConstrainedBox { lo: 0.25, hi: 7.75 }, w.clone()),
            (SupportSet::MeanConstrainedBox { lo: 0.0, hi: 2.0 }, w.clone()),
            (SupportSet::Singleton { point: vec![1.0, -1.0, 0.5, 0.0, 2.0] }, w),
        ]
    }

    #[test]
    fn structural_invariants() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for (set, space) in random_sets() {
            let m = set.bound(&space);
            for _ in 0..200 {
                let y = space.random(&mut rng).scaled(5.0);
                let y2 = space.random(&mut rng).scaled(5.0);
                let th = set.support_argmax(&y).unwrap();
                let sv = set.support_value(&y).unwrap();
                assert!(set.project(&th).unwrap().dist(&th).unwrap() <= 1e-10);
                assert!((sv - th.inner(&y).unwrap()).abs() <= 1e-10);
                let sum = set.support_value(&y.add(&y2).unwrap()).unwrap();
                assert!(sum <= sv + set.support_value(&y2).unwrap() + 1e-10);
                let alpha = rng.gen_range(0.0..4.0);
                let scaled = set.support_value(&y.scaled(alpha)).unwrap();
                assert!((scaled - alpha * sv).abs() <= 1e-10 * (1.0 + sv.abs()));
                let p = set.project(&y).unwrap();
                assert!(set.project(&p).unwrap().dist(&p).unwrap() <= 1e-12);
                let c = set.project(&space.random(&mut rng).scaled(8.0)).unwrap();
                let lhs = y.sub(&p).unwrap().inner(&c.sub(&p).unwrap()).unwrap();
                assert!(lhs <= 1e-10);
                assert!((sv - set.support_value(&y2).unwrap()).abs() <= m * y.dist(&y2).unwrap() + 1e-10);
            }
            let y = space.random(&mut rng);
            let sv = set.support_value(&y).unwrap();
            for _ in 0..1000 {
                let th = set.project(&space.random(&mut rng).scaled(10.0)).unwrap();
                assert!(sv >= th.inner(&y).unwrap() - 1e-12);
            }
        }
    }

    #[test]
    fn tie_break_is_lowest_index_first() {
        let s = Space::uniform_probability(4);
        let set = SupportSet::MeanConstrainedBox { lo: 0.5, hi: 1.5 };
        let y = s.vector(vec![1.0, 1.0, 1.0, 0.0]).unwrap();
        let th = set.support_argmax(&y).unwrap();
        // budget 0.5 fills index 0 completely, then index 1 partially
        assert_eq!(th.coeffs(), &[1.5, 1.5, 0.5, 0.5]);
    }
}
