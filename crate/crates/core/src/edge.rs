//! Influence from unobserved parents outside the window.
//!
//! The exterior field is the expected influence of a homogeneous Poisson parent
//! process on the complement of the window:
//! `E(s) = λ [∫ f(‖u‖) du − ∫_W f(‖s − y‖) dy]`, where `f` is the kernel averaged
//! over the mark distribution. The window integral is a discrete convolution of
//! the window indicator with cell averages of `f`, evaluated by FFT.

use rustfft::num_complex::Complex64;

use crate::error::{Error, Result};
use crate::fft::{fast_len, Fft2};
use crate::geometry::{Grid, PointPattern, Window};
use crate::influence::{influence_field, FieldKind, InfluenceField, KernelSpec, DEFAULT_CUTOFF};
use crate::quad;

/// Radius, in maximal effective ranges, beyond which the kernel is treated as zero.
pub const KERNEL_SUPPORT: f64 = 10.0;

/// Empirical mark distribution used to average the kernel.
#[derive(Clone, Debug, PartialEq)]
pub struct MarkDistribution {
    marks: Vec<f64>,
}

impl MarkDistribution {
    pub fn new(marks: Vec<f64>) -> Result<Self> {
        if marks.is_empty() {
            return Err(Error::Data("mark distribution needs at least one mark".into()));
        }
        if let Some(m) = marks.iter().find(|m| !(**m > 0.0 && m.is_finite())) {
            return Err(Error::Data(format!("mark {m} is not positive")));
        }
        Ok(Self { marks })
    }

    /// Point mass at one; the right choice for unmarked kernels.
    pub fn unit() -> Self {
        Self { marks: vec![1.0] }
    }

    /// Observed marks of `pattern`, or [`unit`](Self::unit) when it is unmarked or empty.
    pub fn from_pattern(pattern: &PointPattern) -> Self {
        match pattern.marks() {
            Some(m) if !m.is_empty() => Self { marks: m.to_vec() },
            _ => Self::unit(),
        }
    }

    pub fn marks(&self) -> &[f64] {
        &self.marks
    }

    /// Distinct marks with their probabilities.
    fn atoms(&self) -> Vec<(f64, f64)> {
        let mut sorted = self.marks.clone();
        sorted.sort_by(f64::total_cmp);
        let w = 1.0 / sorted.len() as f64;
        let mut atoms: Vec<(f64, f64)> = Vec::new();
        for m in sorted {
            match atoms.last_mut() {
                Some(last) if last.0 == m => last.1 += w,
                _ => atoms.push((m, w)),
            }
        }
        atoms
    }
}

/// How parents beyond the window are accounted for.
#[derive(Clone, Debug, PartialEq)]
pub enum EdgeMode {
    /// Only observed parents contribute.
    NoCorrection,
    /// Observed parents plus the expected exterior influence of a Poisson process.
    Poisson { intensity: f64, marks: MarkDistribution },
    /// Parents observed on a larger window are used directly.
    PlusSampling { parents: PointPattern },
}

impl EdgeMode {
    pub fn poisson(intensity: f64, marks: MarkDistribution) -> Result<Self> {
        if !(intensity > 0.0 && intensity.is_finite()) {
            return Err(Error::Model(format!("parent intensity {intensity} must be positive")));
        }
        Ok(EdgeMode::Poisson { intensity, marks })
    }

    /// Poisson correction with intensity `n / |W|` and marks taken from `parents`.
    pub fn poisson_from(parents: &PointPattern) -> Result<Self> {
        let lambda = parents.len() as f64 / parents.window().area();
        if lambda == 0.0 {
            return Err(Error::Data("cannot estimate parent intensity from an empty pattern".into()));
        }
        Self::poisson(lambda, MarkDistribution::from_pattern(parents))
    }

    pub fn label(&self) -> &'static str {
        match self {
            EdgeMode::NoCorrection => "none",
            EdgeMode::Poisson { .. } => "poisson",
            EdgeMode::PlusSampling { .. } => "plus",
        }
    }
}

fn max_range(spec: &KernelSpec, marks: &MarkDistribution) -> Result<f64> {
    let mut r: f64 = 0.0;
    for &m in marks.marks() {
        r = r.max(spec.range_and_strength(Some(m))?.0);
    }
    Ok(r)
}

/// Mark-averaged kernel `f(r)`.
fn averaged_kernel(spec: &KernelSpec, atoms: &[(f64, f64, f64)], r2: f64) -> f64 {
    if matches!(spec, KernelSpec::NoInfluence) {
        return 0.0;
    }
    atoms
        .iter()
        .map(|&(w, inv_range2, strength)| w * strength * (-r2 * inv_range2).exp())
        .sum()
}

/// `(weight, 1/range², strength)` per distinct mark.
fn kernel_atoms(spec: &KernelSpec, marks: &MarkDistribution) -> Result<Vec<(f64, f64, f64)>> {
    marks
        .atoms()
        .into_iter()
        .map(|(m, w)| {
            let (range, strength) = spec.range_and_strength(Some(m))?;
            Ok((w, 1.0 / (range * range), strength))
        })
        .collect()
}

/// `∫_{R²} f(‖u‖) du = 2π ∫_0^U r f(r) dr` with `U` ten maximal effective ranges.
pub fn radial_total_integral(spec: &KernelSpec, marks: &MarkDistribution) -> Result<f64> {
    if matches!(spec, KernelSpec::NoInfluence) {
        return Ok(0.0);
    }
    spec.validate()?;
    let atoms = kernel_atoms(spec, marks)?;
    let upper = KERNEL_SUPPORT * max_range(spec, marks)?;
    let v = quad::integrate(|r| r * averaged_kernel(spec, &atoms, r * r), 0.0, upper, 1e-10, 1e-12)?;
    Ok(2.0 * std::f64::consts::PI * v)
}

/// Gauss–Legendre nodes and weights on `[-1, 1]` by Newton iteration on `P_n`.
fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, z);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * z * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (z * p1 - p0) / (z * z - 1.0);
            let dz = p1 / dp;
            z -= dz;
            if dz.abs() < 1e-15 {
                break;
            }
        }
        if n == 1 {
            z = 0.0;
            dp = 1.0;
        }
        x[i] = -z;
        x[n - 1 - i] = z;
        w[i] = 2.0 / ((1.0 - z * z) * dp * dp);
        w[n - 1 - i] = w[i];
    }
    if n == 1 {
        w[0] = 2.0;
    }
    (x, w)
}

/// Cell means of `f` on the lag lattice `(a h, b h)`, `0 ≤ a ≤ kx`, `0 ≤ b ≤ ky`.
fn lag_cell_means(spec: &KernelSpec, atoms: &[(f64, f64, f64)], h: f64, min_range: f64, kx: usize, ky: usize) -> Vec<f64> {
    let n = ((6.0 * h / min_range).ceil() as usize + 6).clamp(8, 32);
    let (gx, gw) = gauss_legendre(n);
    let offs: Vec<f64> = gx.iter().map(|t| 0.5 * h * t).collect();
    let mut out = vec![0.0; (kx + 1) * (ky + 1)];
    let mut col = vec![0.0; n];
    for b in 0..=ky {
        for (q, o) in offs.iter().enumerate() {
            let y = b as f64 * h + o;
            col[q] = y * y;
        }
        for a in 0..=kx {
            let mut s = 0.0;
            for (p, op) in offs.iter().enumerate() {
                let x = a as f64 * h + op;
                let x2 = x * x;
                let mut inner = 0.0;
                for q in 0..n {
                    inner += gw[q] * averaged_kernel(spec, atoms, x2 + col[q]);
                }
                s += gw[p] * inner;
            }
            out[b * (kx + 1) + a] = 0.25 * s;
        }
    }
    out
}

/// Expected influence of exterior Poisson parents with intensity `lambda` at each cell centre.
pub fn expected_exterior_field(
    spec: &KernelSpec,
    lambda: f64,
    marks: &MarkDistribution,
    grid: &Grid,
) -> Result<InfluenceField> {
    let mut field = InfluenceField::zeros(*grid, *spec, FieldKind::Exterior, "poisson");
    if matches!(spec, KernelSpec::NoInfluence) || lambda == 0.0 {
        return Ok(field);
    }
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::Model(format!("parent intensity {lambda} must be positive")));
    }
    spec.validate()?;
    let total = radial_total_integral(spec, marks)?;
    let atoms = kernel_atoms(spec, marks)?;
    let h = grid.cell_size();
    let (nx, ny) = (grid.nx(), grid.ny());
    let reach = KERNEL_SUPPORT * max_range(spec, marks)?;
    let kx = ((reach / h).ceil() as usize).min(nx - 1);
    let ky = ((reach / h).ceil() as usize).min(ny - 1);
    let mut min_range = f64::INFINITY;
    for &(_, inv2, _) in &atoms {
        min_range = min_range.min(inv2.sqrt().recip());
    }
    let means = lag_cell_means(spec, &atoms, h, min_range, kx, ky);

    let lx = fast_len(nx + 2 * kx);
    let ly = fast_len(ny + 2 * ky);
    let fft = Fft2::new(lx, ly);
    let mut img = vec![Complex64::new(0.0, 0.0); lx * ly];
    for j in 0..ny {
        for i in 0..nx {
            img[j * lx + i].re = 1.0;
        }
    }
    let mut ker = vec![Complex64::new(0.0, 0.0); lx * ly];
    for b in -(ky as isize)..=(ky as isize) {
        let row = b.rem_euclid(ly as isize) as usize;
        for a in -(kx as isize)..=(kx as isize) {
            let c = a.rem_euclid(lx as isize) as usize;
            ker[row * lx + c].re = means[b.unsigned_abs() * (kx + 1) + a.unsigned_abs()];
        }
    }
    fft.forward(&mut img);
    fft.forward(&mut ker);
    for (u, v) in img.iter_mut().zip(&ker) {
        *u *= v;
    }
    fft.inverse(&mut img);
    let scale = grid.cell_area() / (lx * ly) as f64;
    for j in 0..ny {
        for i in 0..nx {
            let inside = img[j * lx + i].re * scale;
            field.values[grid.index(i, j)] = (lambda * (total - inside)).max(0.0);
        }
    }
    Ok(field)
}

/// Influence field used in the likelihood under the chosen edge treatment.
pub fn corrected_field(spec: &KernelSpec, parents: &PointPattern, grid: &Grid, mode: &EdgeMode) -> Result<InfluenceField> {
    let mut field = match mode {
        EdgeMode::PlusSampling { parents: outer } => {
            if !outer.window().strictly_contains(grid.window()) && outer.window() != grid.window() {
                return Err(Error::Data("plus-sampling window must contain the observation window".into()));
            }
            influence_field(spec, outer, grid, DEFAULT_CUTOFF)?
        }
        _ => influence_field(spec, parents, grid, DEFAULT_CUTOFF)?,
    };
    if let EdgeMode::Poisson { intensity, marks } = mode {
        let ext = expected_exterior_field(spec, *intensity, marks, grid)?;
        for (v, e) in field.values.iter_mut().zip(&ext.values) {
            *v += e;
        }
    }
    field.kind = FieldKind::Corrected;
    field.edge = mode.label().to_string();
    Ok(field)
}

/// `∫_W f(‖s − y‖) dy` for the unmarked Gaussian kernel, in closed form.
pub fn gaussian_window_integral(theta: f64, w: &Window, s: [f64; 2]) -> f64 {
    let e = |a: f64, b: f64| statrs::function::erf::erf(b / theta) - statrs::function::erf::erf(a / theta);
    0.25 * std::f64::consts::PI * theta * theta * e(w.x_min - s[0], w.x_max - s[0]) * e(w.y_min - s[1], w.y_max - s[1])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::discretize;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    #[test]
    fn gauss_legendre_exact_for_polynomials() {
        for n in [1, 2, 5, 8, 13, 32] {
            let (x, w) = gauss_legendre(n);
            for deg in 0..(2 * n) {
                let q: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(deg as i32)).sum();
                let exact = if deg % 2 == 1 { 0.0 } else { 2.0 / (deg as f64 + 1.0) };
                assert!((q - exact).abs() < 1e-13, "n={n} deg={deg}: {q}");
            }
        }
    }

    #[test]
    fn radial_total_matches_closed_forms() {
        for theta in [0.01, 0.3, 2.1, 6.0] {
            let v = radial_total_integral(&KernelSpec::Gaussian { theta }, &MarkDistribution::unit()).unwrap();
            assert!((v - PI * theta * theta).abs() <= 1e-8 * PI * theta * theta, "theta={theta}");
        }
        let marks = MarkDistribution::new(vec![1.0, 4.0, 9.0]).unwrap();
        let k = KernelSpec::MarkFull {
            theta: 1.5,
            delta: 0.5,
            alpha: 1.0,
        };
        let exact: f64 = [1.0f64, 4.0, 9.0].iter().map(|m| m * PI * (1.5 * m.sqrt()).powi(2)).sum::<f64>() / 3.0;
        let v = radial_total_integral(&k, &marks).unwrap();
        assert!((v - exact).abs() < 1e-8 * exact);
        assert_eq!(radial_total_integral(&KernelSpec::NoInfluence, &marks).unwrap(), 0.0);
    }

    #[test]
    fn mark_atoms_merge_duplicates() {
        let d = MarkDistribution::new(vec![2.0, 1.0, 2.0, 2.0]).unwrap();
        assert_eq!(d.atoms(), vec![(1.0, 0.25), (2.0, 0.75)]);
        assert!(MarkDistribution::new(vec![]).is_err());
        assert!(MarkDistribution::new(vec![1.0, 0.0]).is_err());
    }

    fn check_against_erf(theta: f64, lambda: f64, side: f64, cs: f64) -> f64 {
        let w = Window::square(side).unwrap();
        let g = discretize(w, cs).unwrap();
        let f = expected_exterior_field(&KernelSpec::Gaussian { theta }, lambda, &MarkDistribution::unit(), &g).unwrap();
        let floor = 1e-6 * lambda * PI * theta * theta;
        let mut worst: f64 = 0.0;
        for c in 0..g.len() {
            let exact = lambda * (PI * theta * theta - gaussian_window_integral(theta, &w, g.center(c)));
            worst = worst.max((f.values[c] - exact).abs() / exact.max(floor));
        }
        worst
    }

    #[test]
    fn exterior_field_matches_erf_form() {
        assert!(check_against_erf(2.1, 0.0375, 40.0, 1.0) < 1e-4);
        assert!(check_against_erf(0.4, 1.0, 20.0, 1.0) < 1e-4);
        assert!(check_against_erf(6.0, 0.2, 10.0, 0.5) < 1e-4);
    }

    #[test]
    fn exterior_field_shape() {
        let w = Window::square(40.0).unwrap();
        let g = discretize(w, 1.0).unwrap();
        let lambda = 0.0375;
        let theta = 2.1;
        let f = expected_exterior_field(&KernelSpec::Gaussian { theta }, lambda, &MarkDistribution::unit(), &g).unwrap();
        let cap = lambda * PI * theta * theta;
        let corner = f.values[g.index(0, 0)];
        let edge_mid = f.values[g.index(0, 20)];
        // a point on the corner sees three quarters of the plane outside, on an edge one half
        assert!(corner < 0.75 * cap && corner > edge_mid);
        assert!(edge_mid < 0.5 * cap && edge_mid > 0.3 * cap);
        assert!(f.values[g.index(20, 20)] < 1e-6 * cap);
    }

    #[test]
    fn corrected_field_modes() {
        let w = Window::square(10.0).unwrap();
        let g = discretize(w, 1.0).unwrap();
        let k = KernelSpec::Gaussian { theta: 1.0 };
        let parents = PointPattern::new(vec![[2.0, 3.0], [7.0, 7.0]], None, w).unwrap();
        let none = corrected_field(&k, &parents, &g, &EdgeMode::NoCorrection).unwrap();
        let obs = influence_field(&k, &parents, &g, DEFAULT_CUTOFF).unwrap();
        assert_eq!(none.values, obs.values);
        let mode = EdgeMode::poisson_from(&parents).unwrap();
        let pois = corrected_field(&k, &parents, &g, &mode).unwrap();
        assert!(pois.values.iter().zip(&obs.values).all(|(a, b)| a >= b));
        assert_eq!(pois.edge, "poisson");
        let big = w.dilate(5.0).unwrap();
        let outer = PointPattern::new(vec![[2.0, 3.0], [7.0, 7.0], [-1.0, 5.0]], None, big).unwrap();
        let plus = corrected_field(&k, &parents, &g, &EdgeMode::PlusSampling { parents: outer }).unwrap();
        assert!(plus.values[g.index(0, 5)] > obs.values[g.index(0, 5)]);
        assert!(EdgeMode::poisson_from(&PointPattern::empty(w)).is_err());
        assert!(EdgeMode::poisson(-1.0, MarkDistribution::unit()).is_err());
        let z = corrected_field(&KernelSpec::NoInfluence, &parents, &g, &mode).unwrap();
        assert!(z.values.iter().all(|&v| v == 0.0));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn exterior_field_bounded(theta in 0.3f64..5.0, lambda in 0.01f64..2.0) {
            let g = discretize(Window::square(12.0).unwrap(), 1.0).unwrap();
            let k = KernelSpec::Gaussian { theta };
            let f = expected_exterior_field(&k, lambda, &MarkDistribution::unit(), &g).unwrap();
            let cap = lambda * PI * theta * theta;
            for v in &f.values {
                prop_assert!(*v >= 0.0 && *v <= cap * (1.0 + 1e-9));
            }
        }
    }
}
