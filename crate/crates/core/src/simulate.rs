//! Parent and child pattern simulation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::edge::{corrected_field, EdgeMode};
use crate::error::{Error, Result};
use crate::geometry::{discretize, PointPattern, Window};
use crate::gmrf::SpectralSampler;
use crate::influence::{InfluenceField, KernelSpec};
use crate::likelihood::ModelParams;
use crate::mcmc::{Chain, ParamLayout};

/// Default number of Metropolis–Hastings proposals for the Strauss sampler.
pub const STRAUSS_PROPOSALS: usize = 100_000;

/// Independent generator for simulation `stream` under a run seed.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn poisson_count<R: Rng + ?Sized>(mean: f64, rng: &mut R) -> Result<usize> {
    if mean == 0.0 {
        return Ok(0);
    }
    let d = Poisson::new(mean).map_err(|e| Error::Model(format!("Poisson mean {mean}: {e}")))?;
    Ok(d.sample(rng) as usize)
}

fn uniform_in<R: Rng + ?Sized>(w: &Window, rng: &mut R) -> [f64; 2] {
    [
        w.x_min + rng.random::<f64>() * w.width(),
        w.y_min + rng.random::<f64>() * w.height(),
    ]
}

/// Homogeneous Poisson process with intensity `lambda` on `window`.
pub fn sample_poisson<R: Rng + ?Sized>(lambda: f64, window: &Window, rng: &mut R) -> Result<PointPattern> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::Model(format!("Poisson intensity {lambda} must be positive")));
    }
    let n = poisson_count(lambda * window.area(), rng)?;
    let pts = (0..n).map(|_| uniform_in(window, rng)).collect();
    PointPattern::new(pts, None, *window)
}

/// Strauss process with density proportional to `β^n γ^{s(x)}`.
#[derive(Clone, Copy, Debug, PartialEq, Deserialize, Serialize)]
pub struct StraussParams {
    pub beta: f64,
    pub gamma: f64,
    pub radius: f64,
    #[serde(default = "default_proposals")]
    pub n_mh: usize,
}

fn default_proposals() -> usize {
    STRAUSS_PROPOSALS
}

impl StraussParams {
    pub fn new(beta: f64, gamma: f64, radius: f64) -> Result<Self> {
        let p = Self {
            beta,
            gamma,
            radius,
            n_mh: STRAUSS_PROPOSALS,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && (0.0..=1.0).contains(&self.gamma) && self.radius > 0.0) {
            return Err(Error::Model(format!("invalid Strauss parameters {self:?}")));
        }
        Ok(())
    }
}

fn close_pairs(u: [f64; 2], pts: &[[f64; 2]], skip: Option<usize>, r2: f64) -> i32 {
    pts.iter()
        .enumerate()
        .filter(|(i, p)| Some(*i) != skip && (p[0] - u[0]).powi(2) + (p[1] - u[1]).powi(2) <= r2)
        .count() as i32
}

/// Birth–death–move Metropolis–Hastings, each move type with probability 1/3, started empty.
pub fn sample_strauss<R: Rng + ?Sized>(params: &StraussParams, window: &Window, rng: &mut R) -> Result<PointPattern> {
    params.validate()?;
    let r2 = params.radius * params.radius;
    let ba = params.beta * window.area();
    let ln_gamma = params.gamma.ln();
    let gpow = |t: i32| -> f64 {
        if t == 0 {
            1.0
        } else if params.gamma == 0.0 {
            0.0
        } else {
            (t as f64 * ln_gamma).exp()
        }
    };
    let mut pts: Vec<[f64; 2]> = Vec::new();
    for _ in 0..params.n_mh {
        let kind = rng.random_range(0..3u8);
        match kind {
            0 => {
                let u = uniform_in(window, rng);
                let t = close_pairs(u, &pts, None, r2);
                let ratio = ba * gpow(t) / (pts.len() + 1) as f64;
                if rng.random::<f64>() < ratio {
                    pts.push(u);
                }
            }
            1 => {
                if pts.is_empty() {
                    continue;
                }
                let i = rng.random_range(0..pts.len());
                let t = close_pairs(pts[i], &pts, Some(i), r2);
                let ratio = pts.len() as f64 / (ba * gpow(t));
                if rng.random::<f64>() < ratio {
                    pts.swap_remove(i);
                }
            }
            _ => {
                if pts.is_empty() {
                    continue;
                }
                let i = rng.random_range(0..pts.len());
                let u = uniform_in(window, rng);
                let told = close_pairs(pts[i], &pts, Some(i), r2);
                let tnew = close_pairs(u, &pts, Some(i), r2);
                let ratio = if params.gamma == 0.0 {
                    if tnew == 0 {
                        1.0
                    } else {
                        0.0
                    }
                } else {
                    ((tnew - told) as f64 * ln_gamma).exp()
                };
                if rng.random::<f64>() < ratio {
                    pts[i] = u;
                }
            }
        }
    }
    PointPattern::new(pts, None, *window)
}

/// Conditional LGCP children on `window`, with intensity piecewise constant on
/// `sim_cell` cells. Uses the first intercept of `params`.
pub fn sample_lgcp<R: Rng + ?Sized>(
    params: &ModelParams,
    parents: &PointPattern,
    window: &Window,
    sim_cell: f64,
    edge: &EdgeMode,
    rng: &mut R,
) -> Result<PointPattern> {
    let grid = discretize(*window, sim_cell)?;
    let sampler = SpectralSampler::new(&grid, &params.field)?;
    let z = sampler.sample(rng);
    let field = lgcp_field(params, parents, &grid, edge)?;
    sample_cells(params, &field, &z, rng)
}

fn lgcp_field(params: &ModelParams, parents: &PointPattern, grid: &crate::geometry::Grid, edge: &EdgeMode) -> Result<InfluenceField> {
    params.validate()?;
    corrected_field(&params.kernel, parents, grid, edge)
}

fn sample_cells<R: Rng + ?Sized>(params: &ModelParams, field: &InfluenceField, z: &[f64], rng: &mut R) -> Result<PointPattern> {
    let grid = &field.grid;
    let beta0 = *params
        .beta0
        .first()
        .ok_or_else(|| Error::Model("no intercept given".into()))?;
    let area = grid.cell_area();
    let mut pts = Vec::new();
    for g in 0..grid.len() {
        let mean = area * (beta0 + params.beta1 * field.values[g] + z[g]).exp();
        if !mean.is_finite() {
            return Err(Error::Numeric(format!("non-finite cell intensity at cell {g}")));
        }
        let n = poisson_count(mean, rng)?;
        if n > 0 {
            let r = grid.cell_rect(g);
            for _ in 0..n {
                pts.push(uniform_in(&r, rng));
            }
        }
    }
    PointPattern::new(pts, None, *grid.window())
}

/// Simulation from a fixed intensity surface, reusing one field and sampler across draws.
pub struct LgcpSimulator {
    params: ModelParams,
    field: InfluenceField,
    sampler: SpectralSampler,
}

impl LgcpSimulator {
    pub fn new(params: &ModelParams, parents: &PointPattern, window: &Window, sim_cell: f64, edge: &EdgeMode) -> Result<Self> {
        let grid = discretize(*window, sim_cell)?;
        Ok(Self {
            field: lgcp_field(params, parents, &grid, edge)?,
            sampler: SpectralSampler::new(&grid, &params.field)?,
            params: params.clone(),
        })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<PointPattern> {
        let z = self.sampler.sample(rng);
        sample_cells(&self.params, &self.field, &z, rng)
    }

    pub fn field(&self) -> &InfluenceField {
        &self.field
    }
}

/// Patterns from the posterior predictive of replicate `k`: one stored draw per
/// simulation, chosen uniformly with replacement, then a fresh latent field.
#[allow(clippy::too_many_arguments)]
pub fn posterior_predictive<R: Rng + ?Sized>(
    chain: &Chain,
    layout: &ParamLayout,
    k: usize,
    parents: &PointPattern,
    window: &Window,
    n_sims: usize,
    sim_cell: f64,
    edge: &EdgeMode,
    rng: &mut R,
) -> Result<Vec<PointPattern>> {
    if chain.samples.is_empty() {
        return Err(Error::Data("posterior predictive needs a nonempty chain".into()));
    }
    let n = chain.samples.len();
    let mut out = Vec::with_capacity(n_sims);
    for _ in 0..n_sims {
        let i = if n == 1 { 0 } else { rng.random_range(0..n) };
        let mut p = layout.from_natural(&chain.samples[i])?;
        p.beta0 = vec![p.beta0[k]];
        out.push(sample_lgcp(&p, parents, window, sim_cell, edge, rng)?);
    }
    Ok(out)
}

/// Intercept giving expected count `target` on the field grid:
/// `β_0 = log target − σ²/2 − log mean_r Σ_g A e^{β_1 C_rg}` over pilot fields `r`.
pub fn tune_beta0(target: f64, beta1: f64, sigma2: f64, pilot: &[InfluenceField]) -> Result<f64> {
    if !(target > 0.0) || pilot.is_empty() {
        return Err(Error::Config("intercept tuning needs a positive target and pilot fields".into()));
    }
    let mean: f64 = pilot
        .iter()
        .map(|f| f.grid.cell_area() * f.values.iter().map(|c| (beta1 * c).exp()).sum::<f64>())
        .sum::<f64>()
        / pilot.len() as f64;
    Ok(target.ln() - 0.5 * sigma2 - mean.ln())
}

/// Influence field of `parents` on `grid` with no correction; convenience for intercept tuning.
pub fn pilot_field(kernel: &KernelSpec, parents: &PointPattern, window: &Window, cell: f64, edge: &EdgeMode) -> Result<InfluenceField> {
    let grid = discretize(*window, cell)?;
    corrected_field(kernel, parents, &grid, edge)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gmrf::MaternParams;

    fn w40() -> Window {
        Window::square(40.0).unwrap()
    }

    #[test]
    fn poisson_mean_and_dispersion() {
        let mut rng = stream_rng(1, 0);
        let counts: Vec<f64> = (0..1000)
            .map(|_| sample_poisson(0.0375, &w40(), &mut rng).unwrap().len() as f64)
            .collect();
        let m = counts.iter().sum::<f64>() / 1000.0;
        assert!((m - 60.0).abs() < 3.0 * (60.0f64 / 1000.0).sqrt(), "{m}");
        // index of dispersion: (n−1) s²/m ~ χ²_{999}; 1% two-sided bounds ≈ [887, 1117]
        let d = counts.iter().map(|c| (c - m).powi(2)).sum::<f64>() / m;
        assert!(d > 887.0 && d < 1117.0, "{d}");
        let tiny = sample_poisson(1e-9, &w40(), &mut rng).unwrap();
        assert!(tiny.is_empty());
    }

    #[test]
    fn strauss_limits() {
        let mut rng = stream_rng(2, 0);
        let w = Window::square(20.0).unwrap();
        let mut p = StraussParams::new(0.1, 1.0, 1.0).unwrap();
        p.n_mh = 20_000;
        let m: f64 = (0..100).map(|_| sample_strauss(&p, &w, &mut rng).unwrap().len() as f64).sum::<f64>() / 100.0;
        assert!((m - 40.0).abs() < 3.0 * (40.0f64 / 100.0).sqrt() + 1.0, "{m}");
        p.gamma = 0.0;
        for _ in 0..5 {
            let x = sample_strauss(&p, &w, &mut rng).unwrap();
            let pts = x.points();
            for i in 0..pts.len() {
                for j in 0..i {
                    let d2 = (pts[i][0] - pts[j][0]).powi(2) + (pts[i][1] - pts[j][1]).powi(2);
                    assert!(d2 > 1.0);
                }
            }
        }
    }

    #[test]
    fn samplers_are_deterministic() {
        let a = sample_strauss(&StraussParams::new(0.06, 0.1, 2.0).unwrap(), &w40(), &mut stream_rng(5, 3)).unwrap();
        let b = sample_strauss(&StraussParams::new(0.06, 0.1, 2.0).unwrap(), &w40(), &mut stream_rng(5, 3)).unwrap();
        assert_eq!(a, b);
        let c = sample_strauss(&StraussParams::new(0.06, 0.1, 2.0).unwrap(), &w40(), &mut stream_rng(5, 4)).unwrap();
        assert_ne!(a, c);
    }

    fn flat_params(beta0: f64, beta1: f64) -> ModelParams {
        ModelParams {
            beta0: vec![beta0],
            beta1,
            kernel: KernelSpec::Gaussian { theta: 2.1 },
            field: MaternParams::from_sd(1e-6, 2.6).unwrap(),
        }
    }

    #[test]
    fn lgcp_without_field_is_poisson() {
        let w = Window::square(20.0).unwrap();
        let parents = PointPattern::empty(w);
        let p = flat_params(0.5f64.ln(), 0.0);
        let sim = LgcpSimulator::new(&p, &parents, &w, 0.5, &EdgeMode::NoCorrection).unwrap();
        let mut rng = stream_rng(3, 0);
        let m: f64 = (0..200).map(|_| sim.sample(&mut rng).unwrap().len() as f64).sum::<f64>() / 200.0;
        assert!((m - 200.0).abs() < 3.0 * (200.0f64 / 200.0).sqrt(), "{m}");
    }

    #[test]
    fn negative_influence_lowers_counts() {
        let w = Window::square(20.0).unwrap();
        let parents = PointPattern::new(vec![[5.0, 5.0], [12.0, 14.0], [15.0, 3.0]], None, w).unwrap();
        let mut p = flat_params(0.0, 0.0);
        p.field = MaternParams::from_sd(1.0, 2.0).unwrap();
        let base = sample_lgcp(&p, &parents, &w, 0.5, &EdgeMode::NoCorrection, &mut stream_rng(8, 1)).unwrap();
        p.beta1 = -1.5;
        let low = sample_lgcp(&p, &parents, &w, 0.5, &EdgeMode::NoCorrection, &mut stream_rng(8, 1)).unwrap();
        assert!(low.len() < base.len());
    }

    #[test]
    fn tuned_intercept_hits_target() {
        let w = w40();
        let k = KernelSpec::Gaussian { theta: 2.1 };
        let mut rng = stream_rng(4, 0);
        let pilots: Vec<InfluenceField> = (0..20)
            .map(|_| {
                let x = sample_poisson(0.0375, &w, &mut rng).unwrap();
                pilot_field(&k, &x, &w, 0.5, &EdgeMode::NoCorrection).unwrap()
            })
            .collect();
        let b0 = tune_beta0(600.0, -0.7, 0.0, &pilots).unwrap();
        let mut p = flat_params(b0, -0.7);
        p.field = MaternParams::from_sd(1e-6, 2.6).unwrap();
        let mut total = 0.0;
        for r in 0..40 {
            let x = sample_poisson(0.0375, &w, &mut stream_rng(40, r)).unwrap();
            total += sample_lgcp(&p, &x, &w, 0.5, &EdgeMode::NoCorrection, &mut stream_rng(41, r)).unwrap().len() as f64;
        }
        let m = total / 40.0;
        assert!((m - 600.0).abs() < 60.0, "{m}");
    }
}
