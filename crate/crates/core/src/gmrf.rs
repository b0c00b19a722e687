//! Matérn (ν = 2) random fields and their lattice GMRF approximation.
//!
//! The precision is the third power of the Dirichlet lattice operator
//! `K = (κh)² I + Δ_h`, where `Δ_h` is the five-point graph Laplacian, scaled so
//! that the infinite-lattice marginal variance equals `σ_Z²`. Observation grids
//! are embedded in a lattice padded with `ceil(2ρ_Z / h)` ghost cells per side.

use std::f64::consts::PI;
use std::sync::OnceLock;

use rand::Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex64;

use crate::error::{Error, Result};
use crate::fft::{fast_len, Fft2};
use crate::geometry::Grid;
use crate::linalg::{BandCholesky, BandMatrix};
use crate::sparse::{Pattern, SparseSymmetric};
use crate::quad;

pub const SMOOTHNESS: f64 = 2.0;
const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Matérn parameters `θ_Z = (σ_Z², ρ_Z)`; smoothness fixed at 2.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaternParams {
    pub sigma2: f64,
    pub range: f64,
}

impl MaternParams {
    pub fn new(sigma2: f64, range: f64) -> Result<Self> {
        if !(sigma2 > 0.0 && sigma2.is_finite() && range > 0.0 && range.is_finite()) {
            return Err(Error::Model(format!(
                "Matérn parameters must be positive (sigma2 = {sigma2}, range = {range})"
            )));
        }
        Ok(Self { sigma2, range })
    }

    /// From the standard deviation `σ_Z`.
    pub fn from_sd(sigma: f64, range: f64) -> Result<Self> {
        Self::new(sigma * sigma, range)
    }

    pub fn sigma(&self) -> f64 {
        self.sigma2.sqrt()
    }

    /// SPDE scale `κ = √(2ν) / ρ_Z`.
    pub fn kappa(&self) -> f64 {
        (2.0 * SMOOTHNESS).sqrt() / self.range
    }
}

fn bessel_i0(x: f64) -> f64 {
    let y = (x / 3.75).powi(2);
    1.0 + y
        * (3.515_622_9
            + y * (3.089_942_4 + y * (1.206_749_2 + y * (0.265_973_2 + y * (0.036_076_8 + y * 0.004_581_3)))))
}

fn bessel_i1(x: f64) -> f64 {
    let y = (x / 3.75).powi(2);
    x * (0.5
        + y * (0.878_905_94
            + y * (0.514_988_69 + y * (0.150_849_34 + y * (0.026_587_33 + y * (0.003_015_32 + y * 0.000_324_11))))))
}

/// Modified Bessel function of the second kind, order 0.
fn bessel_k0(x: f64) -> f64 {
    if x <= 2.0 {
        let y = x * x / 4.0;
        -(x / 2.0).ln() * bessel_i0(x)
            + (-0.577_215_66
                + y * (0.422_784_20
                    + y * (0.230_697_56 + y * (0.034_885_90 + y * (0.002_626_98 + y * (0.000_107_50 + y * 0.000_007_4))))))
    } else {
        let y = 2.0 / x;
        (-x).exp() / x.sqrt()
            * (1.253_314_14
                + y * (-0.078_323_58
                    + y * (0.021_895_68 + y * (-0.010_624_46 + y * (0.005_878_72 + y * (-0.002_515_40 + y * 0.000_532_08))))))
    }
}

/// Modified Bessel function of the second kind, order 1.
fn bessel_k1(x: f64) -> f64 {
    if x <= 2.0 {
        let y = x * x / 4.0;
        (x / 2.0).ln() * bessel_i1(x)
            + (1.0 / x)
                * (1.0
                    + y * (0.154_431_44
                        + y * (-0.672_785_79
                            + y * (-0.181_568_97 + y * (-0.019_194_02 + y * (-0.001_104_04 + y * -0.000_046_86))))))
    } else {
        let y = 2.0 / x;
        (-x).exp() / x.sqrt()
            * (1.253_314_14
                + y * (0.234_986_19
                    + y * (-0.036_556_20 + y * (0.015_042_68 + y * (-0.007_803_53 + y * (0.003_256_14 + y * -0.000_682_45))))))
    }
}

/// Matérn covariance with ν = 2 at lag `r`; `σ_Z²` at `r = 0`.
pub fn matern_cov(r: f64, params: &MaternParams) -> f64 {
    let d = (2.0 * SMOOTHNESS).sqrt() * r / params.range;
    if d <= 0.0 {
        return params.sigma2;
    }
    // 2^{1-ν}/Γ(ν) = 1/2 for ν = 2; d² K₂(d) = d² K₀(d) + 2 d K₁(d)
    let d2k2 = d * d * bessel_k0(d) + 2.0 * d * bessel_k1(d);
    (params.sigma2 * 0.5 * d2k2).min(params.sigma2)
}

/// Lag-zero value of the infinite-lattice Green's function of `K³`, with
/// `K = a I − (shift neighbours)` and `a = (κh)² + 4`.
pub fn lattice_variance(kappa_h: f64) -> Result<f64> {
    let c = kappa_h * kappa_h;
    // inner angle integrated in closed form:
    // ∫₀^{2π} dω / (b − 2cos ω)³ = 2π (b² + 2) / (b² − 4)^{5/2}
    let inner = |w: f64| {
        let b = c + 4.0 - 2.0 * w.cos();
        let b2 = b * b;
        (b2 + 2.0) / (b2 - 4.0).powf(2.5)
    };
    let v = quad::integrate(inner, 0.0, PI, 0.0, 1e-12)?;
    Ok(v / PI)
}

/// Placement of an observation grid inside its padded lattice.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LatticeLayout {
    pub nx: usize,
    pub ny: usize,
    pub ghost: usize,
    pub kappa_h: f64,
}

impl LatticeLayout {
    pub fn ext_nx(&self) -> usize {
        self.nx + 2 * self.ghost
    }

    pub fn ext_ny(&self) -> usize {
        self.ny + 2 * self.ghost
    }

    pub fn ext_len(&self) -> usize {
        self.ext_nx() * self.ext_ny()
    }

    /// Lattice index of observation cell `g`.
    pub fn ext_index(&self, g: usize) -> usize {
        let (i, j) = (g % self.nx, g / self.nx);
        (j + self.ghost) * self.ext_nx() + i + self.ghost
    }

    /// Observation-grid values of a lattice vector.
    pub fn interior(&self, z: &[f64]) -> Vec<f64> {
        (0..self.nx * self.ny).map(|g| z[self.ext_index(g)]).collect()
    }
}

/// Ghost-cell padding for a grid: `ceil(2ρ_Z / h)`.
pub fn ghost_cells(range: f64, cell_size: f64) -> usize {
    (2.0 * range / cell_size - 1e-9).ceil().max(0.0) as usize
}

/// Sparse SPD precision matrix with its log-determinant and a lazily computed factor.
#[derive(Debug)]
pub struct PrecisionOperator {
    q: BandMatrix,
    layout: Option<LatticeLayout>,
    params: Option<MaternParams>,
    log_det: f64,
    factor: OnceLock<BandCholesky>,
    sparse: OnceLock<SparseSymmetric>,
}

impl PrecisionOperator {
    /// Wraps an arbitrary SPD band matrix; the log-determinant comes from its factorization.
    pub fn from_band(q: BandMatrix) -> Result<Self> {
        let l = q.cholesky()?;
        let log_det = l.log_det();
        let factor = OnceLock::new();
        let _ = factor.set(l);
        Ok(Self {
            q,
            layout: None,
            params: None,
            log_det,
            factor,
            sparse: OnceLock::new(),
        })
    }

    pub fn matrix(&self) -> &BandMatrix {
        &self.q
    }

    pub fn dim(&self) -> usize {
        self.q.dim()
    }

    pub fn layout(&self) -> Option<&LatticeLayout> {
        self.layout.as_ref()
    }

    pub fn params(&self) -> Option<&MaternParams> {
        self.params.as_ref()
    }

    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    /// `Q` in compressed sparse form, built on first use.
    pub fn sparse(&self) -> Result<&SparseSymmetric> {
        if let Some(s) = self.sparse.get() {
            return Ok(s);
        }
        let pattern = match self.layout {
            Some(l) => Pattern::lattice(l.ext_nx(), l.ext_ny())?,
            None => std::sync::Arc::new(Pattern::of_band(&self.q)?),
        };
        let s = SparseSymmetric::from_band(&self.q, pattern)?;
        Ok(self.sparse.get_or_init(|| s))
    }

    /// Cholesky factor of `Q`, computed on first use.
    pub fn factor(&self) -> Result<&BandCholesky> {
        if let Some(l) = self.factor.get() {
            return Ok(l);
        }
        let l = self.q.cholesky().map_err(|e| match (e, self.params) {
            (Error::Numeric(m), Some(p)) => Error::Numeric(format!(
                "precision factorization failed for sigma2 = {}, range = {}: {m}",
                p.sigma2, p.range
            )),
            (e, _) => e,
        })?;
        Ok(self.factor.get_or_init(|| l))
    }
}

/// Row `g` of the Dirichlet lattice operator `K³`, as `(column, value)` pairs.
fn k_cubed_row(nx: usize, ny: usize, a: f64, i: usize, j: usize) -> Vec<(usize, f64)> {
    // local 7×7 window centred on (i, j); cells outside the lattice are dropped
    const W: usize = 7;
    const R: isize = 3;
    let inside = |di: isize, dj: isize| {
        let x = i as isize + di;
        let y = j as isize + dj;
        x >= 0 && y >= 0 && (x as usize) < nx && (y as usize) < ny
    };
    let mut v = [[0.0f64; W]; W];
    v[R as usize][R as usize] = 1.0;
    for _ in 0..3 {
        let mut nv = [[0.0f64; W]; W];
        for dj in -R..=R {
            for di in -R..=R {
                if !inside(di, dj) {
                    continue;
                }
                let (u, w) = ((di + R) as usize, (dj + R) as usize);
                let mut s = a * v[w][u];
                if u > 0 {
                    s -= v[w][u - 1];
                }
                if u + 1 < W {
                    s -= v[w][u + 1];
                }
                if w > 0 {
                    s -= v[w - 1][u];
                }
                if w + 1 < W {
                    s -= v[w + 1][u];
                }
                nv[w][u] = s;
            }
        }
        v = nv;
    }
    let mut out = Vec::new();
    for dj in -R..=R {
        for di in -R..=R {
            let val = v[(dj + R) as usize][(di + R) as usize];
            if val != 0.0 && inside(di, dj) {
                let col = (j as isize + dj) as usize * nx + (i as isize + di) as usize;
                out.push((col, val));
            }
        }
    }
    out
}

/// Scaled `K³` on an `nx × ny` Dirichlet lattice.
fn lattice_precision(nx: usize, ny: usize, kappa_h: f64, scale: f64) -> BandMatrix {
    let a = kappa_h * kappa_h + 4.0;
    let n = nx * ny;
    let mut q = BandMatrix::zeros(n, 3 * nx);
    for j in 0..ny {
        for i in 0..nx {
            let row = j * nx + i;
            for (col, v) in k_cubed_row(nx, ny, a, i, j) {
                if col <= row {
                    q.set(row, col, scale * v);
                }
            }
        }
    }
    q
}

/// `log det K` for the Dirichlet lattice operator via its sine-transform eigenvalues.
fn dirichlet_log_det(nx: usize, ny: usize, kappa_h: f64) -> f64 {
    let c = kappa_h * kappa_h;
    let ex: Vec<f64> = (1..=nx)
        .map(|k| 2.0 - 2.0 * (PI * k as f64 / (nx + 1) as f64).cos())
        .collect();
    let ey: Vec<f64> = (1..=ny)
        .map(|k| 2.0 - 2.0 * (PI * k as f64 / (ny + 1) as f64).cos())
        .collect();
    ey.iter()
        .map(|&b| ex.iter().map(|&a| (c + a + b).ln()).sum::<f64>())
        .sum()
}

/// GMRF precision for the Matérn field on `grid`, padded with ghost cells.
pub fn build_precision(grid: &Grid, params: &MaternParams) -> Result<PrecisionOperator> {
    let h = grid.cell_size();
    let kappa_h = params.kappa() * h;
    let layout = LatticeLayout {
        nx: grid.nx(),
        ny: grid.ny(),
        ghost: ghost_cells(params.range, h),
        kappa_h,
    };
    let v0 = lattice_variance(kappa_h)?;
    let scale = v0 / params.sigma2;
    let (nx, ny) = (layout.ext_nx(), layout.ext_ny());
    let q = lattice_precision(nx, ny, kappa_h, scale);
    let log_det = (nx * ny) as f64 * scale.ln() + 3.0 * dirichlet_log_det(nx, ny, kappa_h);
    if !log_det.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite precision log-determinant for sigma2 = {}, range = {}",
            params.sigma2, params.range
        )));
    }
    Ok(PrecisionOperator {
        q,
        layout: Some(layout),
        params: Some(*params),
        log_det,
        factor: OnceLock::new(),
        sparse: OnceLock::new(),
    })
}

/// Gaussian log-density `½ log det Q − (n/2) log 2π − ½ zᵀQz`.
pub fn gmrf_logpdf(z: &[f64], q: &PrecisionOperator) -> Result<f64> {
    if z.len() != q.dim() {
        return Err(Error::Data(format!(
            "field has {} values but the precision has dimension {}",
            z.len(),
            q.dim()
        )));
    }
    Ok(0.5 * q.log_det() - 0.5 * q.dim() as f64 * LN_2PI - 0.5 * q.matrix().quad_form(z))
}

/// Draw with precision `Q`: `z = L⁻ᵀ u` for standard normal `u`.
pub fn gmrf_sample<R: Rng + ?Sized>(q: &PrecisionOperator, rng: &mut R) -> Result<Vec<f64>> {
    let l = q.factor()?;
    let mut u: Vec<f64> = (0..q.dim()).map(|_| rng.sample(StandardNormal)).collect();
    l.solve_upper(&mut u);
    Ok(u)
}

/// FFT sampler for the same lattice model on a periodic lattice, for grids too
/// large for a band factorization.
pub struct SpectralSampler {
    nx: usize,
    ny: usize,
    ghost: usize,
    lx: usize,
    ly: usize,
    fft: Fft2,
    amplitude: Vec<f64>,
}

impl SpectralSampler {
    pub fn new(grid: &Grid, params: &MaternParams) -> Result<Self> {
        let h = grid.cell_size();
        let kappa_h = params.kappa() * h;
        let ghost = ghost_cells(params.range, h);
        let lx = fast_len(grid.nx() + 2 * ghost);
        let ly = fast_len(grid.ny() + 2 * ghost);
        let scale = lattice_variance(kappa_h)? / params.sigma2;
        let a = kappa_h * kappa_h + 4.0;
        let mut amplitude = Vec::with_capacity(lx * ly);
        for l in 0..ly {
            let cy = 2.0 * (2.0 * PI * l as f64 / ly as f64).cos();
            for k in 0..lx {
                let mu = a - 2.0 * (2.0 * PI * k as f64 / lx as f64).cos() - cy;
                amplitude.push(1.0 / (scale * mu * mu * mu).sqrt());
            }
        }
        Ok(Self {
            nx: grid.nx(),
            ny: grid.ny(),
            ghost,
            lx,
            ly,
            fft: Fft2::new(lx, ly),
            amplitude,
        })
    }

    /// Field values on the observation grid, row-major.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let n = self.lx * self.ly;
        let mut buf: Vec<Complex64> = (0..n)
            .map(|_| Complex64::new(rng.sample(StandardNormal), 0.0))
            .collect();
        self.fft.forward(&mut buf);
        for (b, &a) in buf.iter_mut().zip(&self.amplitude) {
            *b *= a;
        }
        self.fft.inverse(&mut buf);
        let norm = 1.0 / n as f64;
        let mut out = Vec::with_capacity(self.nx * self.ny);
        for j in 0..self.ny {
            let row = (j + self.ghost) * self.lx + self.ghost;
            out.extend(buf[row..row + self.nx].iter().map(|c| c.re * norm));
        }
        out
    }
}
