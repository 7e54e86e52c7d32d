//! Small direct solvers for the discretized PDEs.

use super::OracleError;

/// General tridiagonal matrix: `lower[i] = a[i][i-1]`, `diag[i] = a[i][i]`,
/// `upper[i] = a[i][i+1]`. `lower[0]` and `upper[n-1]` are unused.
#[derive(Debug, Clone, PartialEq)]
pub struct Tridiagonal {
    pub lower: Vec<f64>,
    pub diag: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Tridiagonal {
    pub fn zeros(n: usize) -> Self {
        Self {
            lower: vec![0.0; n],
            diag: vec![0.0; n],
            upper: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.diag.len()
    }

    pub fn is_empty(&self) -> bool {
        self.diag.is_empty()
    }

    pub fn mul(&self, x: &[f64]) -> Vec<f64> {
        let n = self.len();
        (0..n)
            .map(|i| {
                let mut s = self.diag[i] * x[i];
                if i > 0 {
                    s += self.lower[i] * x[i - 1];
                }
                if i + 1 < n {
                    s += self.upper[i] * x[i + 1];
                }
                s
            })
            .collect()
    }

    pub fn transpose(&self) -> Self {
        let n = self.len();
        let mut t = Self::zeros(n);
        t.diag.copy_from_slice(&self.diag);
        for i in 1..n {
            t.lower[i] = self.upper[i - 1];
            t.upper[i - 1] = self.lower[i];
        }
        t
    }

    /// Thomas algorithm (no pivoting).
    pub fn solve(&self, rhs: &[f64]) -> Result<Vec<f64>, OracleError> {
        let n = self.len();
        let mut c = vec![0.0; n];
        let mut d = vec![0.0; n];
        for i in 0..n {
            let sub = if i > 0 { self.lower[i] } else { 0.0 };
            let prev_c = if i > 0 { c[i - 1] } else { 0.0 };
            let prev_d = if i > 0 { d[i - 1] } else { 0.0 };
            let pivot = self.diag[i] - sub * prev_c;
            if pivot == 0.0 || !pivot.is_finite() {
                return Err(OracleError::Singular(i));
            }
            c[i] = if i + 1 < n { self.upper[i] / pivot } else { 0.0 };
            d[i] = (rhs[i] - sub * prev_d) / pivot;
        }
        for i in (0..n.saturating_sub(1)).rev() {
            d[i] -= c[i] * d[i + 1];
        }
        Ok(d)
    }
}

/// Symmetric banded matrix storing the lower band row by row:
/// `band[i * (bw + 1) + k] = a[i][i - k]` for `k <= min(i, bw)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SymBand {
    n: usize,
    bw: usize,
    band: Vec<f64>,
}

impl SymBand {
    pub fn zeros(n: usize, bw: usize) -> Self {
        Self {
            n,
            bw,
            band: vec![0.0; n * (bw + 1)],
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn bandwidth(&self) -> usize {
        self.bw
    }

    /// Adds `v` to `a[i][j]` (and implicitly `a[j][i]`).
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        let (r, c) = if i >= j { (i, j) } else { (j, i) };
        let k = r - c;
        assert!(k <= self.bw, "entry ({i}, {j}) outside the band");
        self.band[r * (self.bw + 1) + k] += v;
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (r, c) = if i >= j { (i, j) } else { (j, i) };
        let k = r - c;
        if k > self.bw {
            0.0
        } else {
            self.band[r * (self.bw + 1) + k]
        }
    }

    pub fn mul(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        for i in 0..self.n {
            let row = &self.band[i * (self.bw + 1)..(i + 1) * (self.bw + 1)];
            y[i] += row[0] * x[i];
            for k in 1..=self.bw.min(i) {
                y[i] += row[k] * x[i - k];
                y[i - k] += row[k] * x[i];
            }
        }
        y
    }

    /// Banded Cholesky factorization `A = L L^T`.
    pub fn cholesky(&self) -> Result<BandCholesky, OracleError> {
        let (n, bw) = (self.n, self.bw);
        let stride = bw + 1;
        let mut l = self.band.clone();
        for i in 0..n {
            let kmax = bw.min(i);
            // off-diagonal entries l[i][j], j = i - k, from left to right
            for k in (1..=kmax).rev() {
                let j = i - k;
                let mut s = l[i * stride + k];
                let lo = if i >= bw { i - bw } else { 0 };
                let lo = lo.max(if j >= bw { j - bw } else { 0 });
                for p in lo..j {
                    s -= l[i * stride + (i - p)] * l[j * stride + (j - p)];
                }
                l[i * stride + k] = s / l[j * stride];
            }
            let mut d = l[i * stride];
            for k in 1..=kmax {
                d -= l[i * stride + k].powi(2);
            }
            if !(d > 0.0) || !d.is_finite() {
                return Err(OracleError::Singular(i));
            }
            l[i * stride] = d.sqrt();
        }
        Ok(BandCholesky { n, bw, l })
    }
}

#[derive(Debug, Clone)]
pub struct BandCholesky {
    n: usize,
    bw: usize,
    l: Vec<f64>,
}

impl BandCholesky {
    pub fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let stride = self.bw + 1;
        let mut y = rhs.to_vec();
        for i in 0..self.n {
            let mut s = y[i];
            for k in 1..=self.bw.min(i) {
                s -= self.l[i * stride + k] * y[i - k];
            }
            y[i] = s / self.l[i * stride];
        }
        for i in (0..self.n).rev() {
            y[i] /= self.l[i * stride];
            let yi = y[i];
            for k in 1..=self.bw.min(i) {
                y[i - k] -= self.l[i * stride + k] * yi;
            }
        }
        y
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn thomas_matches_dense_solve() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 9;
        let mut t = Tridiagonal::zeros(n);
        for i in 0..n {
            t.diag[i] = 4.0 + rng.gen_range(0.0..1.0);
            t.lower[i] = rng.gen_range(-1.0..1.0);
            t.upper[i] = rng.gen_range(-1.0..1.0);
        }
        let b: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let dense = DMatrix::from_fn(n, n, |i, j| {
            if i == j {
                t.diag[i]
            } else if i == j + 1 {
                t.lower[i]
            } else if j == i + 1 {
                t.upper[i]
            } else {
                0.0
            }
        });
        let x = dense.clone().lu().solve(&DVector::from_vec(b.clone())).unwrap();
        let got = t.solve(&b).unwrap();
        for i in 0..n {
            assert!((got[i] - x[i]).abs() < 1e-12);
        }
        let tb = t.transpose().mul(&got);
        let dense_t = dense.transpose() * DVector::from_vec(got.clone());
        for i in 0..n {
            assert!((tb[i] - dense_t[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn band_cholesky_matches_dense_solve() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (n, bw) = (12, 3);
        let mut a = SymBand::zeros(n, bw);
        for i in 0..n {
            a.add(i, i, 8.0);
            for k in 1..=bw.min(i) {
                a.add(i, i - k, rng.gen_range(-1.0..1.0));
            }
        }
        let dense = DMatrix::from_fn(n, n, |i, j| a.get(i, j));
        let b: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = dense.clone().cholesky().unwrap().solve(&DVector::from_vec(b.clone()));
        let got = a.cholesky().unwrap().solve(&b);
        for i in 0..n {
            assert!((got[i] - x[i]).abs() < 1e-12);
        }
        let y = a.mul(&got);
        for i in 0..n {
            assert!((y[i] - b[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn indefinite_band_is_rejected() {
        let mut a = SymBand::zeros(2, 1);
        a.add(0, 0, 1.0);
        a.add(1, 1, 1.0);
        a.add(1, 0, 2.0);
        assert!(matches!(a.cholesky(), Err(OracleError::Singular(1))));
    }
}
