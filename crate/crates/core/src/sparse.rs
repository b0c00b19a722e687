//! Sparse symmetric matrices with a reusable fill-reducing Cholesky analysis.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use faer::dyn_stack::{MemBuffer, MemStack};
use faer::sparse::linalg::cholesky::simplicial::SimplicialLltRef;
use faer::sparse::linalg::cholesky::supernodal::SupernodalLltRef;
use faer::sparse::linalg::cholesky::{
    factorize_symbolic_cholesky, LltRef, SymbolicCholesky, SymbolicCholeskyRaw, SymmetricOrdering,
};
use faer::sparse::{SparseColMatRef, SymbolicSparseColMatRef};
use faer::{Conj, MatMut, Par, Side};

use crate::error::{Error, Result};
use crate::linalg::BandMatrix;

/// Lower-triangular CSC structure and its symbolic factorization.
#[derive(Debug)]
pub struct Pattern {
    n: usize,
    col_ptr: Vec<usize>,
    row_idx: Vec<usize>,
    /// Position of each diagonal entry in the value array.
    diag: Vec<usize>,
    symbolic: SymbolicCholesky<usize>,
}

impl Pattern {
    /// `cols[j]` lists the rows `i >= j` present in column `j`; the diagonal is always included.
    pub fn new(n: usize, cols: &[Vec<usize>]) -> Result<Self> {
        let mut col_ptr = Vec::with_capacity(n + 1);
        let mut row_idx = Vec::new();
        let mut diag = Vec::with_capacity(n);
        col_ptr.push(0);
        for (j, rows) in cols.iter().enumerate() {
            let mut rows: Vec<usize> = rows.iter().copied().filter(|&i| i >= j && i < n).collect();
            rows.push(j);
            rows.sort_unstable();
            rows.dedup();
            diag.push(row_idx.len());
            row_idx.extend(rows);
            col_ptr.push(row_idx.len());
        }
        let sym = SymbolicSparseColMatRef::new_checked(n, n, &col_ptr, None, &row_idx);
        let symbolic = factorize_symbolic_cholesky(sym, Side::Lower, SymmetricOrdering::Amd, Default::default())
            .map_err(|e| Error::Numeric(format!("symbolic Cholesky analysis failed: {e:?}")))?;
        Ok(Self {
            n,
            col_ptr,
            row_idx,
            diag,
            symbolic,
        })
    }

    /// Structure of the entries of `q` that are not exactly zero.
    pub fn of_band(q: &BandMatrix) -> Result<Self> {
        let n = q.dim();
        let bw = q.bandwidth();
        let cols: Vec<Vec<usize>> = (0..n)
            .map(|j| (j..n.min(j + bw + 1)).filter(|&i| q.get(i, j) != 0.0).collect())
            .collect();
        Self::new(n, &cols)
    }

    /// Five-point-cubed stencil (`|di| + |dj| <= 3`) on an `nx × ny` lattice, shared per shape.
    pub fn lattice(nx: usize, ny: usize) -> Result<Arc<Self>> {
        static CACHE: OnceLock<Mutex<HashMap<(usize, usize), Arc<Pattern>>>> = OnceLock::new();
        let cache = CACHE.get_or_init(Default::default);
        if let Some(p) = cache.lock().unwrap().get(&(nx, ny)) {
            return Ok(p.clone());
        }
        let n = nx * ny;
        let mut cols = vec![Vec::new(); n];
        for j in 0..ny {
            for i in 0..nx {
                let c = j * nx + i;
                for dj in 0..=3isize {
                    for di in -3..=3isize {
                        if di.abs() + dj > 3 || (dj == 0 && di < 0) {
                            continue;
                        }
                        let (x, y) = (i as isize + di, j as isize + dj);
                        if x >= 0 && (x as usize) < nx && (y as usize) < ny {
                            cols[c].push(y as usize * nx + x as usize);
                        }
                    }
                }
            }
        }
        let p = Arc::new(Self::new(n, &cols)?);
        cache.lock().unwrap().insert((nx, ny), p.clone());
        Ok(p)
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.row_idx.len()
    }
}

/// Symmetric matrix stored as its lower triangle on a shared [`Pattern`].
#[derive(Clone, Debug)]
pub struct SparseSymmetric {
    pattern: Arc<Pattern>,
    values: Vec<f64>,
}

impl SparseSymmetric {
    /// Copies the lower triangle of `q` onto `pattern`; entries of `q` outside the pattern must be zero.
    pub fn from_band(q: &BandMatrix, pattern: Arc<Pattern>) -> Result<Self> {
        if q.dim() != pattern.n {
            return Err(Error::Internal("pattern and matrix dimensions differ".into()));
        }
        let mut values = vec![0.0; pattern.nnz()];
        for j in 0..pattern.n {
            for k in pattern.col_ptr[j]..pattern.col_ptr[j + 1] {
                let i = pattern.row_idx[k];
                if i - j <= q.bandwidth() {
                    values[k] = q.get(i, j);
                }
            }
        }
        Ok(Self { pattern, values })
    }

    pub fn dim(&self) -> usize {
        self.pattern.n
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let p = &self.pattern;
        let mut y = vec![0.0; p.n];
        for j in 0..p.n {
            let d = p.diag[j];
            y[j] += self.values[d] * x[j];
            let mut acc = 0.0;
            for k in d + 1..p.col_ptr[j + 1] {
                let i = p.row_idx[k];
                let v = self.values[k];
                y[i] += v * x[j];
                acc += v * x[i];
            }
            y[j] += acc;
        }
        y
    }

    pub fn quad_form(&self, x: &[f64]) -> f64 {
        let p = &self.pattern;
        let mut s = 0.0;
        for j in 0..p.n {
            let d = p.diag[j];
            let mut off = 0.0;
            for k in d + 1..p.col_ptr[j + 1] {
                off += self.values[k] * x[p.row_idx[k]];
            }
            s += x[j] * (self.values[d] * x[j] + 2.0 * off);
        }
        s
    }

    /// Cholesky factor of `self + diag(shift)`.
    pub fn cholesky_shifted(&self, shift: &[f64]) -> Result<SparseCholesky> {
        let p = &self.pattern;
        let mut a = self.values.clone();
        for (j, s) in shift.iter().enumerate() {
            a[p.diag[j]] += s;
        }
        let sym = SymbolicSparseColMatRef::new_checked(p.n, p.n, &p.col_ptr, None, &p.row_idx);
        let mat = SparseColMatRef::new(sym, &a);
        let mut l = vec![0.0; p.symbolic.len_val()];
        let mut mem = MemBuffer::new(p.symbolic.factorize_numeric_llt_scratch::<f64>(Par::Seq, Default::default()));
        p.symbolic
            .factorize_numeric_llt(
                &mut l,
                mat,
                Side::Lower,
                Default::default(),
                Par::Seq,
                MemStack::new(&mut mem),
                Default::default(),
            )
            .map_err(|e| Error::Numeric(format!("sparse Cholesky failed: matrix not positive definite ({e:?})")))?;
        Ok(SparseCholesky {
            pattern: self.pattern.clone(),
            l,
        })
    }

    pub fn cholesky(&self) -> Result<SparseCholesky> {
        self.cholesky_shifted(&[])
    }
}

/// Numeric factor `P A Pᵀ = L Lᵀ`.
#[derive(Debug)]
pub struct SparseCholesky {
    pattern: Arc<Pattern>,
    l: Vec<f64>,
}

impl SparseCholesky {
    pub fn dim(&self) -> usize {
        self.pattern.n
    }

    pub fn log_det(&self) -> f64 {
        let mut s = 0.0;
        match self.pattern.symbolic.raw() {
            SymbolicCholeskyRaw::Simplicial(sym) => {
                let f = SimplicialLltRef::<usize, f64>::new(sym, &self.l);
                let cp = sym.col_ptr();
                for j in 0..sym.ncols() {
                    // sorted row indices: the diagonal leads each column
                    s += f.values()[cp[j]].ln();
                }
            }
            SymbolicCholeskyRaw::Supernodal(sym) => {
                let f = SupernodalLltRef::<usize, f64>::new(sym, &self.l);
                for k in 0..sym.n_supernodes() {
                    let v = f.supernode(k).val();
                    for i in 0..v.ncols() {
                        s += v[(i, i)].ln();
                    }
                }
            }
        }
        2.0 * s
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let sym = &self.pattern.symbolic;
        let mut x = b.to_vec();
        let mut mem = MemBuffer::new(sym.solve_in_place_scratch::<f64>(1, Par::Seq));
        let llt = LltRef::<usize, f64>::new(sym, &self.l);
        let n = x.len();
        llt.solve_in_place_with_conj(
            Conj::No,
            MatMut::from_column_major_slice_mut(&mut x, n, 1),
            Par::Seq,
            MemStack::new(&mut mem),
        );
        x
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::discretize;
    use crate::geometry::Window;
    use crate::gmrf::{build_precision, MaternParams};

    fn lattice_q(side: f64, cell: f64, sigma: f64, range: f64) -> crate::gmrf::PrecisionOperator {
        let g = discretize(Window::square(side).unwrap(), cell).unwrap();
        build_precision(&g, &MaternParams::from_sd(sigma, range).unwrap()).unwrap()
    }

    #[test]
    fn matches_band_factor() {
        let q = lattice_q(10.0, 1.0, 1.6, 2.6);
        let l = q.layout().unwrap();
        let pat = Pattern::lattice(l.ext_nx(), l.ext_ny()).unwrap();
        let s = SparseSymmetric::from_band(q.matrix(), pat).unwrap();
        let n = s.dim();
        let shift: Vec<f64> = (0..n).map(|i| 0.1 + (i % 7) as f64 * 0.3).collect();
        let mut band = q.matrix().clone();
        band.add_diagonal(&shift);
        let bc = band.cholesky().unwrap();
        let sc = s.cholesky_shifted(&shift).unwrap();
        assert!((bc.log_det() - sc.log_det()).abs() < 1e-9 * bc.log_det().abs());
        let b: Vec<f64> = (0..n).map(|i| ((i * 37) % 11) as f64 - 5.0).collect();
        let (x1, x2) = (bc.solve(&b), sc.solve(&b));
        for i in 0..n {
            assert!((x1[i] - x2[i]).abs() < 1e-9 * (1.0 + x1[i].abs()));
        }
        let y1 = q.matrix().matvec(&b);
        let y2 = s.matvec(&b);
        for i in 0..n {
            assert!((y1[i] - y2[i]).abs() < 1e-9 * (1.0 + y1[i].abs()));
        }
        let qf = q.matrix().quad_form(&b);
        assert!((qf - s.quad_form(&b)).abs() < 1e-9 * qf.abs());
        // closed-form log det of Q
        assert!((s.cholesky().unwrap().log_det() - q.log_det()).abs() < 1e-8 * q.log_det().abs());
    }

    #[test]
    fn lattice_pattern_covers_band() {
        let q = lattice_q(6.0, 0.5, 1.0, 1.0);
        let l = q.layout().unwrap();
        let pat = Pattern::lattice(l.ext_nx(), l.ext_ny()).unwrap();
        let from_values = Pattern::of_band(q.matrix()).unwrap();
        assert!(from_values.nnz() <= pat.nnz());
        let s = SparseSymmetric::from_band(q.matrix(), pat).unwrap();
        let dense = q.matrix().to_dense();
        let total: f64 = dense.iter().enumerate().map(|(i, r)| r[..=i].iter().sum::<f64>()).sum();
        assert!((total - s.values.iter().sum::<f64>()).abs() < 1e-9 * total.abs());
    }

    #[test]
    fn small_band_roundtrip() {
        let a = vec![vec![4.0, 1.0, 0.0], vec![1.0, 3.0, 0.5], vec![0.0, 0.5, 2.0]];
        let band = BandMatrix::from_dense(&a);
        let s = SparseSymmetric::from_band(&band, Arc::new(Pattern::of_band(&band).unwrap())).unwrap();
        let c = s.cholesky().unwrap();
        let det: f64 = 4.0 * (3.0 * 2.0 - 0.25) - 1.0 * 2.0;
        assert!((c.log_det() - det.ln()).abs() < 1e-12);
        let x = c.solve(&[1.0, 2.0, 3.0]);
        let y = s.matvec(&x);
        for (u, v) in y.iter().zip([1.0, 2.0, 3.0]) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn indefinite_is_numeric_error() {
        let band = BandMatrix::from_dense(&[vec![1.0, 2.0], vec![2.0, 1.0]]);
        let s = SparseSymmetric::from_band(&band, Arc::new(Pattern::of_band(&band).unwrap())).unwrap();
        assert!(matches!(s.cholesky(), Err(Error::Numeric(_))));
    }
}
