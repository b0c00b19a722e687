//! Symmetric banded matrices and their Cholesky factors.
//!
//! Lattice precision matrices in row-major cell order have all nonzeros within
//! `stencil_radius * row_length` of the diagonal, so a dense band factorization
//! is exact and has no fill outside the band.

use crate::error::{Error, Result};

/// Lower band of a symmetric matrix. Row `i` stores columns `i - bw ..= i`.
#[derive(Clone, Debug, PartialEq)]
pub struct BandMatrix {
    n: usize,
    bw: usize,
    data: Vec<f64>,
}

impl BandMatrix {
    pub fn zeros(n: usize, bw: usize) -> Self {
        let bw = bw.min(n.saturating_sub(1));
        Self {
            n,
            bw,
            data: vec![0.0; n * (bw + 1)],
        }
    }

    pub fn from_dense(a: &[Vec<f64>]) -> Self {
        let n = a.len();
        let mut bw = 0;
        for (i, row) in a.iter().enumerate() {
            for (j, &v) in row.iter().enumerate().take(i) {
                if v != 0.0 {
                    bw = bw.max(i - j);
                }
            }
        }
        let mut m = Self::zeros(n, bw);
        for i in 0..n {
            for j in i.saturating_sub(bw)..=i {
                m.set(i, j, a[i][j]);
            }
        }
        m
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn bandwidth(&self) -> usize {
        self.bw
    }

    #[inline]
    fn offset(&self, i: usize, j: usize) -> usize {
        i * (self.bw + 1) + (j + self.bw - i)
    }

    /// Entry `(i, j)`; symmetric access, zero outside the band.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (i, j) = if i >= j { (i, j) } else { (j, i) };
        if i - j > self.bw {
            0.0
        } else {
            self.data[self.offset(i, j)]
        }
    }

    /// Sets `(i, j)` and, implicitly, `(j, i)`. Panics outside the band.
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        let (i, j) = if i >= j { (i, j) } else { (j, i) };
        assert!(i - j <= self.bw, "entry ({i}, {j}) outside band {}", self.bw);
        let o = self.offset(i, j);
        self.data[o] = v;
    }

    pub fn add_diagonal(&mut self, d: &[f64]) {
        assert_eq!(d.len(), self.n);
        for (i, &v) in d.iter().enumerate() {
            let o = self.offset(i, i);
            self.data[o] += v;
        }
    }

    /// `y = A x` using the symmetric band.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.n);
        let mut y = vec![0.0; self.n];
        for i in 0..self.n {
            let lo = i.saturating_sub(self.bw);
            let row = &self.data[self.offset(i, lo)..=self.offset(i, i)];
            let mut acc = row[row.len() - 1] * x[i];
            for (k, &a) in row[..row.len() - 1].iter().enumerate() {
                let j = lo + k;
                acc += a * x[j];
                y[j] += a * x[i];
            }
            y[i] += acc;
        }
        y
    }

    /// `xᵀ A x`.
    pub fn quad_form(&self, x: &[f64]) -> f64 {
        self.matvec(x).iter().zip(x).map(|(a, b)| a * b).sum()
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        (0..self.n)
            .map(|i| (0..self.n).map(|j| self.get(i, j)).collect())
            .collect()
    }

    /// Cholesky factorization `A = L Lᵀ`.
    pub fn cholesky(&self) -> Result<BandCholesky> {
        let mut l = self.data.clone();
        let w = self.bw + 1;
        let bw = self.bw;
        for i in 0..self.n {
            let lo = i.saturating_sub(bw);
            for j in lo..=i {
                // row i holds columns lo..=i, row j holds columns j-bw..=j
                let k0 = lo.max(j.saturating_sub(bw));
                let len = j - k0;
                let ri = i * w + (k0 + bw - i);
                let rj = j * w + (k0 + bw - j);
                let dot = dot(&l[ri..ri + len], &l[rj..rj + len]);
                let oij = i * w + (j + bw - i);
                let s = l[oij] - dot;
                if i == j {
                    if !(s > 0.0) || !s.is_finite() {
                        return Err(Error::Numeric(format!(
                            "matrix not positive definite at row {i} (pivot {s:e})"
                        )));
                    }
                    l[oij] = s.sqrt();
                } else {
                    l[oij] = s / l[j * w + bw];
                }
            }
        }
        Ok(BandCholesky {
            n: self.n,
            bw,
            data: l,
        })
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

/// Lower-triangular band factor `L` with `A = L Lᵀ`.
#[derive(Clone, Debug)]
pub struct BandCholesky {
    n: usize,
    bw: usize,
    data: Vec<f64>,
}

impl BandCholesky {
    pub fn dim(&self) -> usize {
        self.n
    }

    #[inline]
    fn diag(&self, i: usize) -> f64 {
        self.data[i * (self.bw + 1) + self.bw]
    }

    /// `log det A = 2 Σ log L_ii`.
    pub fn log_det(&self) -> f64 {
        2.0 * (0..self.n).map(|i| self.diag(i).ln()).sum::<f64>()
    }

    /// Solves `L x = b` in place.
    pub fn solve_lower(&self, b: &mut [f64]) {
        let w = self.bw + 1;
        for i in 0..self.n {
            let lo = i.saturating_sub(self.bw);
            let row = &self.data[i * w + (lo + self.bw - i)..i * w + self.bw];
            let s = dot(row, &b[lo..i]);
            b[i] = (b[i] - s) / self.diag(i);
        }
    }

    /// Solves `Lᵀ x = b` in place.
    pub fn solve_upper(&self, b: &mut [f64]) {
        let w = self.bw + 1;
        for i in (0..self.n).rev() {
            b[i] /= self.diag(i);
            let xi = b[i];
            let lo = i.saturating_sub(self.bw);
            let row = &self.data[i * w + (lo + self.bw - i)..i * w + self.bw];
            for (bj, &l) in b[lo..i].iter_mut().zip(row) {
                *bj -= l * xi;
            }
        }
    }

    /// Diagonal of `A⁻¹` by the Takahashi recursion restricted to the band.
    pub fn inverse_diagonal(&self) -> Vec<f64> {
        let (n, bw, w) = (self.n, self.bw, self.bw + 1);
        let at = |r: usize, c: usize| r * w + (c + bw - r);
        let mut sig = vec![0.0; self.data.len()];
        let get = |sig: &[f64], a: usize, b: usize| if a >= b { sig[at(a, b)] } else { sig[at(b, a)] };
        for i in (0..n).rev() {
            let lii = self.diag(i);
            let hi = (i + bw).min(n - 1);
            for j in (i + 1..=hi).rev() {
                let mut s = 0.0;
                for k in i + 1..=hi {
                    s += self.data[at(k, i)] * get(&sig, j, k);
                }
                sig[at(j, i)] = -s / lii;
            }
            let mut s = 0.0;
            for k in i + 1..=hi {
                s += self.data[at(k, i)] * sig[at(k, i)];
            }
            sig[at(i, i)] = 1.0 / (lii * lii) - s / lii;
        }
        (0..n).map(|i| sig[at(i, i)]).collect()
    }

    /// Solves `A x = b`.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut x = b.to_vec();
        self.solve_lower(&mut x);
        self.solve_upper(&mut x);
        x
    }
}

/// Dense lower-triangular factor supporting rank-one updates, stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct LowerTriangular {
    n: usize,
    data: Vec<f64>,
}

impl LowerTriangular {
    pub fn diagonal(d: &[f64]) -> Self {
        let n = d.len();
        let mut data = vec![0.0; n * n];
        for (i, &v) in d.iter().enumerate() {
            data[i * n + i] = v;
        }
        Self { n, data }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn mul_vec(&self, u: &[f64]) -> Vec<f64> {
        (0..self.n)
            .map(|i| (0..=i).map(|j| self.data[i * self.n + j] * u[j]).sum())
            .collect()
    }

    /// Replaces `L` by the factor of `L Lᵀ + sign · v vᵀ`.
    ///
    /// Returns an error when a downdate would lose positive definiteness; the
    /// factor is left unchanged in that case.
    pub fn rank_one(&mut self, v: &[f64], downdate: bool) -> Result<()> {
        let n = self.n;
        let mut l = self.data.clone();
        let mut x = v.to_vec();
        let sign = if downdate { -1.0 } else { 1.0 };
        for k in 0..n {
            let lkk = l[k * n + k];
            let r2 = lkk * lkk + sign * x[k] * x[k];
            if !(r2 > 0.0) || !r2.is_finite() {
                return Err(Error::Numeric("rank-one downdate lost definiteness".into()));
            }
            let r = r2.sqrt();
            let c = r / lkk;
            let s = x[k] / lkk;
            l[k * n + k] = r;
            for i in k + 1..n {
                let lik = (l[i * n + k] + sign * s * x[i]) / c;
                x[i] = c * x[i] - s * lik;
                l[i * n + k] = lik;
            }
        }
        self.data = l;
        Ok(())
    }

    /// `L Lᵀ` as a dense matrix.
    pub fn gram(&self) -> Vec<Vec<f64>> {
        let n = self.n;
        (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| (0..=i.min(j)).map(|k| self.get(i, k) * self.get(j, k)).sum())
                    .collect()
            })
            .collect()
    }
}
