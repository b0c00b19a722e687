//! Discretized count likelihood with a Laplace-approximated latent field,
//! replicated over plots, plus priors and the log posterior.

use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, Exp, Gamma, Normal};
use statrs::function::gamma::ln_gamma;

use crate::edge::{corrected_field, EdgeMode};
use crate::error::{Error, Result};
use crate::geometry::{CountGrid, Grid, PointPattern};
use crate::gmrf::{build_precision, LatticeLayout, MaternParams, PrecisionOperator};
use crate::influence::{KernelFamily, KernelSpec};
use crate::sparse::{SparseCholesky, SparseSymmetric};

/// Newton stopping rule: gradient sup-norm.
pub const NEWTON_TOL: f64 = 1e-8;
pub const NEWTON_MAX_ITER: usize = 50;

/// Parameters of the hierarchical model on their natural scale.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    /// One intercept per replicate.
    pub beta0: Vec<f64>,
    pub beta1: f64,
    pub kernel: KernelSpec,
    pub field: MaternParams,
}

impl ModelParams {
    pub fn validate(&self) -> Result<()> {
        self.kernel.validate()?;
        if !(self.field.sigma2 > 0.0 && self.field.range > 0.0) {
            return Err(Error::Model("field variance and range must be positive".into()));
        }
        if !self.beta1.is_finite() || self.beta0.iter().any(|b| !b.is_finite()) {
            return Err(Error::Model("regression coefficients must be finite".into()));
        }
        Ok(())
    }
}

/// Mode and approximate log marginal likelihood of one latent field.
#[derive(Clone, Debug, PartialEq)]
pub struct LaplaceResult {
    /// Mode on the full latent lattice.
    pub mode: Vec<f64>,
    pub log_marginal: f64,
    pub converged: bool,
    pub newton_iters: usize,
}

/// Maps observation cells to latent lattice indices.
fn observed_index(n_obs: usize, q: &PrecisionOperator) -> Result<Vec<usize>> {
    match q.layout() {
        Some(l) if l.nx * l.ny == n_obs => Ok((0..n_obs).map(|g| l.ext_index(g)).collect()),
        None if q.dim() == n_obs => Ok((0..n_obs).collect()),
        _ => Err(Error::Data(format!(
            "{n_obs} observed cells do not match a precision of dimension {}",
            q.dim()
        ))),
    }
}

struct NewtonProblem<'a> {
    counts: &'a [u32],
    offsets: &'a [f64],
    obs: Vec<usize>,
    q: &'a PrecisionOperator,
    qs: &'a SparseSymmetric,
}

impl NewtonProblem<'_> {
    /// `Σ [n(η+z) − e^{η+z}] − ½ zᵀQz`.
    fn objective(&self, z: &[f64]) -> f64 {
        let mut s = -0.5 * self.qs.quad_form(z);
        for (g, &o) in self.obs.iter().enumerate() {
            let t = self.offsets[g] + z[o];
            s += self.counts[g] as f64 * t - t.exp();
        }
        s
    }

    fn gradient(&self, z: &[f64]) -> Vec<f64> {
        let mut grad = self.qs.matvec(z);
        grad.iter_mut().for_each(|v| *v = -*v);
        for (g, &o) in self.obs.iter().enumerate() {
            grad[o] += self.counts[g] as f64 - (self.offsets[g] + z[o]).exp();
        }
        grad
    }

    fn weights(&self, z: &[f64]) -> Vec<f64> {
        let mut d = vec![0.0; z.len()];
        for (g, &o) in self.obs.iter().enumerate() {
            d[o] = (self.offsets[g] + z[o]).exp();
        }
        d
    }

    /// Factor of the negative Hessian `Q + diag(μ)`.
    fn hessian(&self, z: &[f64]) -> Result<SparseCholesky> {
        self.qs.cholesky_shifted(&self.weights(z))
    }

    fn band_hessian(&self, z: &[f64]) -> Result<crate::linalg::BandCholesky> {
        let mut h = self.q.matrix().clone();
        h.add_diagonal(&self.weights(z));
        h.cholesky()
    }
}

fn sup_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn check_inputs(counts: &[u32], offsets: &[f64]) -> Result<()> {
    if counts.len() != offsets.len() {
        return Err(Error::Data(format!(
            "{} counts but {} offsets",
            counts.len(),
            offsets.len()
        )));
    }
    if offsets.iter().any(|o| !o.is_finite()) {
        return Err(Error::Numeric("non-finite offset".into()));
    }
    Ok(())
}

/// Required gradient reduction per step for a reused Hessian factor to be kept.
const CHORD_CONTRACTION: f64 = 0.3;

/// Damped Newton iterations for the mode; returns the mode, the factor of `H`
/// at it when converged, and the iteration count.
///
/// A factor is reused across steps (and `precond` from a nearby problem is tried
/// first) as long as each step cuts the gradient norm by [`CHORD_CONTRACTION`];
/// otherwise `H` is refactored at the current point. The returned factor is
/// always exact at the mode.
fn newton(
    p: &NewtonProblem,
    start: Option<&[f64]>,
    precond: Option<&SparseCholesky>,
) -> Result<(Vec<f64>, Option<SparseCholesky>, usize)> {
    let n = p.q.dim();
    let mut z = match start {
        Some(s) if s.len() == n && s.iter().all(|v| v.is_finite()) => s.to_vec(),
        _ => vec![0.0; n],
    };
    let mut f = p.objective(&z);
    if !f.is_finite() {
        if start.is_some() {
            return newton(p, None, None);
        }
        return Err(Error::Numeric("non-finite Laplace objective at the starting point".into()));
    }
    let mut borrowed = precond.filter(|m| m.dim() == n);
    let mut owned: Option<SparseCholesky> = None;
    // whether `owned` was factored at the current z
    let mut fresh = false;
    let mut iters = 0;
    let mut grad = p.gradient(&z);
    let mut gnorm = sup_norm(&grad);
    loop {
        if !gnorm.is_finite() {
            return Err(Error::Numeric("non-finite gradient in mode search".into()));
        }
        if gnorm < NEWTON_TOL {
            let h = match owned {
                Some(h) if fresh => h,
                _ => p.hessian(&z)?,
            };
            return Ok((z, Some(h), iters));
        }
        if iters == NEWTON_MAX_ITER {
            return Ok((z, None, iters));
        }
        iters += 1;
        if owned.is_none() && borrowed.is_none() {
            owned = Some(p.hessian(&z)?);
            fresh = true;
        }
        let m = owned.as_ref().or(borrowed).unwrap();
        let step = m.solve(&grad);
        // near the mode the ascent falls below the rounding error of the objective
        let slack = 1e-12 * (1.0 + f.abs());
        let mut t = 1.0;
        let mut moved = false;
        for _ in 0..40 {
            let cand: Vec<f64> = z.iter().zip(&step).map(|(a, b)| a + t * b).collect();
            let fc = p.objective(&cand);
            if fc.is_finite() && fc >= f - slack {
                z = cand;
                f = fc.max(f);
                moved = true;
                break;
            }
            t *= 0.5;
        }
        if !moved {
            if !fresh {
                owned = None;
                borrowed = None;
                continue;
            }
            // no ascent possible at working precision
            let grad = p.gradient(&z);
            let ok = sup_norm(&grad) < NEWTON_TOL;
            return Ok((z, ok.then(|| owned.take().unwrap()), iters));
        }
        fresh = false;
        let prev = gnorm;
        grad = p.gradient(&z);
        gnorm = sup_norm(&grad);
        if gnorm > CHORD_CONTRACTION * prev {
            owned = None;
            borrowed = None;
        }
    }
}

/// Mode `ẑ` of `log p(n | η + z) + log p(z)` by damped Newton iteration.
pub fn find_mode(counts: &[u32], offsets: &[f64], q: &PrecisionOperator, start: Option<&[f64]>) -> Result<LaplaceResult> {
    laplace(counts, offsets, q, start)
}

/// Laplace approximation of `log ∫ p(n | η + z) p(z) dz`.
///
/// Returns `log_marginal = −∞` with `converged = false` when Newton does not converge.
pub fn laplace(counts: &[u32], offsets: &[f64], q: &PrecisionOperator, start: Option<&[f64]>) -> Result<LaplaceResult> {
    Ok(laplace_with(counts, offsets, q, start, None)?.0)
}

fn laplace_with(
    counts: &[u32],
    offsets: &[f64],
    q: &PrecisionOperator,
    start: Option<&[f64]>,
    precond: Option<&SparseCholesky>,
) -> Result<(LaplaceResult, Option<SparseCholesky>)> {
    check_inputs(counts, offsets)?;
    let p = NewtonProblem {
        counts,
        offsets,
        obs: observed_index(counts.len(), q)?,
        q,
        qs: q.sparse()?,
    };
    let (mode, factor, newton_iters) = newton(&p, start, precond)?;
    let Some(h) = factor else {
        let res = LaplaceResult {
            mode,
            log_marginal: f64::NEG_INFINITY,
            converged: false,
            newton_iters,
        };
        return Ok((res, None));
    };
    let ln_fact: f64 = counts.iter().map(|&c| ln_gamma(c as f64 + 1.0)).sum();
    let log_marginal = p.objective(&mode) - ln_fact + 0.5 * q.log_det() - 0.5 * h.log_det();
    if !log_marginal.is_finite() {
        return Err(Error::Numeric("non-finite Laplace log marginal".into()));
    }
    let res = LaplaceResult {
        mode,
        log_marginal,
        converged: true,
        newton_iters,
    };
    Ok((res, Some(h)))
}

/// Laplace log marginal likelihood starting Newton from zero.
pub fn laplace_loglik(counts: &[u32], offsets: &[f64], q: &PrecisionOperator) -> Result<f64> {
    Ok(laplace(counts, offsets, q, None)?.log_marginal)
}

/// Derivative of the Laplace log marginal with respect to each offset, with the
/// mode re-optimized: `(n − μ) − ½ μ ∘ (diag H⁻¹ − H⁻¹(μ ∘ diag H⁻¹))` on observed cells.
pub fn laplace_offset_gradient(counts: &[u32], offsets: &[f64], q: &PrecisionOperator) -> Result<Vec<f64>> {
    check_inputs(counts, offsets)?;
    let p = NewtonProblem {
        counts,
        offsets,
        obs: observed_index(counts.len(), q)?,
        q,
        qs: q.sparse()?,
    };
    let (mode, factor, _) = newton(&p, None, None)?;
    if factor.is_none() {
        return Err(Error::Numeric("mode search did not converge".into()));
    }
    let h = p.band_hessian(&mode)?;
    let sdiag = h.inverse_diagonal();
    let mut mu = vec![0.0; mode.len()];
    for (g, &o) in p.obs.iter().enumerate() {
        mu[o] = (offsets[g] + mode[o]).exp();
    }
    let d: Vec<f64> = mu.iter().zip(&sdiag).map(|(m, s)| m * s).collect();
    let w = h.solve(&d);
    Ok(p.obs
        .iter()
        .enumerate()
        .map(|(g, &o)| counts[g] as f64 - mu[o] - 0.5 * mu[o] * (sdiag[o] - w[o]))
        .collect())
}

/// Bit-exact key of a kernel parameter vector.
fn kernel_key(spec: &KernelSpec) -> (KernelFamily, Vec<u64>) {
    (spec.family(), spec.params().iter().map(|v| v.to_bits()).collect())
}

type FieldCache = Mutex<Option<((KernelFamily, Vec<u64>), Arc<Vec<f64>>)>>;

/// One plot: counts of the response pattern, the parent pattern and its edge treatment.
#[derive(Debug)]
pub struct Replicate {
    pub id: String,
    pub counts: CountGrid,
    pub parents: PointPattern,
    pub edge: EdgeMode,
    cache: FieldCache,
}

impl Clone for Replicate {
    fn clone(&self) -> Self {
        Self {
            id: self.id.clone(),
            counts: self.counts.clone(),
            parents: self.parents.clone(),
            edge: self.edge.clone(),
            cache: Mutex::new(self.cache.lock().map(|c| c.clone()).unwrap_or(None)),
        }
    }
}

impl Replicate {
    pub fn new(id: impl Into<String>, counts: CountGrid, parents: PointPattern, edge: EdgeMode) -> Result<Self> {
        let id = id.into();
        if parents.window() != counts.grid.window() {
            return Err(Error::Data(format!(
                "replicate {id}: parent window differs from the count grid window"
            )));
        }
        if let EdgeMode::PlusSampling { parents: outer } = &edge {
            if !outer.window().strictly_contains(parents.window()) {
                return Err(Error::Data(format!(
                    "replicate {id}: plus-sampling window must strictly contain the observation window"
                )));
            }
            if outer.is_marked() != parents.is_marked() {
                return Err(Error::Data(format!("replicate {id}: inconsistent marking of parent patterns")));
            }
        }
        Ok(Self {
            id,
            counts,
            parents,
            edge,
            cache: Mutex::new(None),
        })
    }

    pub fn grid(&self) -> &Grid {
        &self.counts.grid
    }

    /// Edge-corrected influence field for `kernel`, computed once per distinct parameter vector.
    pub fn field(&self, kernel: &KernelSpec) -> Result<Arc<Vec<f64>>> {
        let key = kernel_key(kernel);
        let mut guard = self
            .cache
            .lock()
            .map_err(|_| Error::Internal("field cache poisoned".into()))?;
        if let Some((k, v)) = guard.as_ref() {
            if *k == key {
                return Ok(Arc::clone(v));
            }
        }
        let f = Arc::new(corrected_field(kernel, &self.parents, self.grid(), &self.edge)?.values);
        *guard = Some((key, Arc::clone(&f)));
        Ok(f)
    }

    fn cached_field(&self, kernel: &KernelSpec) -> Result<Arc<Vec<f64>>> {
        let guard = self
            .cache
            .lock()
            .map_err(|_| Error::Internal("field cache poisoned".into()))?;
        match guard.as_ref() {
            Some((k, v)) if *k == kernel_key(kernel) => Ok(Arc::clone(v)),
            _ => Err(Error::Internal(format!(
                "replicate {}: influence field not prepared for {kernel}",
                self.id
            ))),
        }
    }

    /// Offsets `log A + β_0k + β_1 C_g`.
    pub fn offsets(&self, params: &ModelParams, k: usize) -> Result<Vec<f64>> {
        let c = self.field(&params.kernel)?;
        let base = self.grid().cell_area().ln() + beta0_of(params, k)?;
        Ok(c.iter().map(|cg| base + params.beta1 * cg).collect())
    }
}

fn beta0_of(params: &ModelParams, k: usize) -> Result<f64> {
    params
        .beta0
        .get(k)
        .copied()
        .ok_or_else(|| Error::Model(format!("no intercept for replicate {k}")))
}

/// `log A + β_0k + β_1 C_g + z_g`; the field for the current kernel must already be cached.
pub fn cell_log_intensity(params: &ModelParams, rep: &Replicate, k: usize, g: usize, z_g: f64) -> Result<f64> {
    let c = if matches!(params.kernel, KernelSpec::NoInfluence) {
        0.0
    } else {
        *rep.cached_field(&params.kernel)?
            .get(g)
            .ok_or_else(|| Error::Data(format!("cell {g} outside the grid")))?
    };
    Ok(rep.grid().cell_area().ln() + beta0_of(params, k)? + params.beta1 * c + z_g)
}

/// Newton starting point for one replicate: a previous mode and, optionally,
/// the Hessian factor at it.
#[derive(Clone, Debug)]
pub struct WarmStart {
    pub mode: Vec<f64>,
    factor: Option<Arc<SparseCholesky>>,
}

impl WarmStart {
    pub fn from_mode(mode: Vec<f64>) -> Self {
        Self { mode, factor: None }
    }
}

/// Log likelihood summed over replicates with per-replicate modes.
#[derive(Clone, Debug)]
pub struct ReplicatedFit {
    pub log_lik: f64,
    pub modes: Vec<Vec<f64>>,
    pub newton_failures: usize,
    factors: Vec<Option<Arc<SparseCholesky>>>,
}

impl ReplicatedFit {
    /// Warm starts for a nearby parameter value.
    pub fn warm_starts(&self) -> Vec<WarmStart> {
        self.modes
            .iter()
            .zip(&self.factors)
            .map(|(m, f)| WarmStart {
                mode: m.clone(),
                factor: f.clone(),
            })
            .collect()
    }
}

/// `Σ_k` Laplace log marginal of replicate `k`, warm-starting Newton from `warm` when given.
pub fn replicated_fit(params: &ModelParams, reps: &[Replicate], warm: Option<&[Vec<f64>]>) -> Result<ReplicatedFit> {
    let warm: Option<Vec<WarmStart>> = warm.map(|w| w.iter().cloned().map(WarmStart::from_mode).collect());
    replicated_fit_warm(params, reps, warm.as_deref())
}

/// As [`replicated_fit`], also reusing Hessian factors carried by the warm starts.
pub fn replicated_fit_warm(params: &ModelParams, reps: &[Replicate], warm: Option<&[WarmStart]>) -> Result<ReplicatedFit> {
    params.validate()?;
    if params.beta0.len() != reps.len() {
        return Err(Error::Model(format!(
            "{} intercepts for {} replicates",
            params.beta0.len(),
            reps.len()
        )));
    }
    let mut precisions: Vec<(Grid, PrecisionOperator)> = Vec::new();
    let mut out = ReplicatedFit {
        log_lik: 0.0,
        modes: Vec::with_capacity(reps.len()),
        newton_failures: 0,
        factors: Vec::with_capacity(reps.len()),
    };
    for (k, rep) in reps.iter().enumerate() {
        let grid = *rep.grid();
        let pos = match precisions.iter().position(|(g, _)| *g == grid) {
            Some(p) => p,
            None => {
                precisions.push((grid, build_precision(&grid, &params.field)?));
                precisions.len() - 1
            }
        };
        let q = &precisions[pos].1;
        let offsets = rep.offsets(params, k)?;
        let ws = warm.and_then(|w| w.get(k));
        let start = ws.and_then(|w| match q.layout() {
            Some(l) if w.mode.len() != q.dim() => remap_mode(&w.mode, l),
            _ => Some(w.mode.clone()),
        });
        let precond = ws.and_then(|w| w.factor.as_deref());
        let (res, factor) = laplace_with(&rep.counts.counts, &offsets, q, start.as_deref(), precond)
            .map_err(|e| annotate(e, &rep.id))?;
        if !res.converged {
            out.newton_failures += 1;
        }
        out.log_lik += res.log_marginal;
        out.modes.push(res.mode);
        out.factors.push(factor.map(Arc::new));
    }
    Ok(out)
}

/// Carries a mode from a lattice with a different ghost padding onto `layout`,
/// keeping the interior and setting new ghost cells to zero.
fn remap_mode(z: &[f64], layout: &LatticeLayout) -> Option<Vec<f64>> {
    let (nx, ny) = (layout.nx, layout.ny);
    let old_ghost = (0..=z.len()).find(|g| (nx + 2 * g) * (ny + 2 * g) >= z.len())?;
    if (nx + 2 * old_ghost) * (ny + 2 * old_ghost) != z.len() {
        return None;
    }
    let old = LatticeLayout {
        ghost: old_ghost,
        ..*layout
    };
    let mut out = vec![0.0; layout.ext_len()];
    let (g0, g1) = (old_ghost as isize, layout.ghost as isize);
    for j in 0..old.ext_ny() as isize {
        for i in 0..old.ext_nx() as isize {
            let (x, y) = (i - g0 + g1, j - g0 + g1);
            if x >= 0 && y >= 0 && (x as usize) < layout.ext_nx() && (y as usize) < layout.ext_ny() {
                out[y as usize * layout.ext_nx() + x as usize] = z[j as usize * old.ext_nx() + i as usize];
            }
        }
    }
    Some(out)
}

fn annotate(e: Error, id: &str) -> Error {
    match e {
        Error::Numeric(m) => Error::Numeric(format!("replicate {id}: {m}")),
        other => other,
    }
}

/// `Σ_k` Laplace log marginal over replicates.
pub fn replicated_loglik(params: &ModelParams, reps: &[Replicate]) -> Result<f64> {
    Ok(replicated_fit(params, reps, None)?.log_lik)
}

/// Independent prior of one scalar parameter.
#[derive(Clone, Copy, Debug, PartialEq, Deserialize, Serialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Prior {
    Normal { mean: f64, sd: f64 },
    Gamma { shape: f64, scale: f64 },
    Exponential { mean: f64 },
    Flat,
}

impl Prior {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            Prior::Normal { mean, sd } => mean.is_finite() && sd > 0.0,
            Prior::Gamma { shape, scale } => shape > 0.0 && scale > 0.0,
            Prior::Exponential { mean } => mean > 0.0,
            Prior::Flat => true,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid prior hyperparameters {self:?}")))
        }
    }

    /// Log density, `−∞` outside the support.
    pub fn ln_pdf(&self, x: f64) -> f64 {
        if !x.is_finite() {
            return f64::NEG_INFINITY;
        }
        match *self {
            Prior::Normal { mean, sd } => Normal::new(mean, sd).map_or(f64::NEG_INFINITY, |d| d.ln_pdf(x)),
            Prior::Gamma { shape, scale } => {
                if x <= 0.0 {
                    return f64::NEG_INFINITY;
                }
                Gamma::new(shape, 1.0 / scale).map_or(f64::NEG_INFINITY, |d| d.ln_pdf(x))
            }
            Prior::Exponential { mean } => {
                if x < 0.0 {
                    return f64::NEG_INFINITY;
                }
                Exp::new(1.0 / mean).map_or(f64::NEG_INFINITY, |d| d.ln_pdf(x))
            }
            Prior::Flat => 0.0,
        }
    }

    /// Whether the prior constrains the parameter to be positive.
    pub fn positive(&self) -> bool {
        matches!(self, Prior::Gamma { .. } | Prior::Exponential { .. })
    }
}

/// Priors for all model parameters.
#[derive(Clone, Copy, Debug, PartialEq, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorSpec {
    pub beta0: Prior,
    pub beta1: Prior,
    pub theta: Prior,
    pub delta: Prior,
    pub alpha: Prior,
    pub sigma: Prior,
    pub range: Prior,
}

impl Default for PriorSpec {
    fn default() -> Self {
        let normal = Prior::Normal { mean: 0.0, sd: 10.0 };
        let gamma = Prior::Gamma {
            shape: 2.4,
            scale: 1.8,
        };
        let exp = Prior::Exponential { mean: 10.0 };
        Self {
            beta0: normal,
            beta1: normal,
            theta: gamma,
            delta: exp,
            alpha: exp,
            sigma: exp,
            range: gamma,
        }
    }
}

impl PriorSpec {
    pub fn flat() -> Self {
        Self {
            beta0: Prior::Flat,
            beta1: Prior::Flat,
            theta: Prior::Flat,
            delta: Prior::Flat,
            alpha: Prior::Flat,
            sigma: Prior::Flat,
            range: Prior::Flat,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for p in [
            self.beta0, self.beta1, self.theta, self.delta, self.alpha, self.sigma, self.range,
        ] {
            p.validate()?;
        }
        Ok(())
    }
}

/// Sum of independent prior log densities; `β_1` and kernel priors enter only
/// when the model has an influence term.
pub fn log_prior(params: &ModelParams, priors: &PriorSpec) -> f64 {
    let sigma = params.field.sigma2.sqrt();
    if !(sigma > 0.0) || !(params.field.range > 0.0) {
        return f64::NEG_INFINITY;
    }
    let mut lp: f64 = params.beta0.iter().map(|b| priors.beta0.ln_pdf(*b)).sum();
    lp += priors.sigma.ln_pdf(sigma) + priors.range.ln_pdf(params.field.range);
    match params.kernel {
        KernelSpec::NoInfluence => {}
        KernelSpec::Gaussian { theta } => {
            lp += priors.beta1.ln_pdf(params.beta1) + priors.theta.ln_pdf(theta);
        }
        KernelSpec::MarkRange { theta, delta } => {
            lp += priors.beta1.ln_pdf(params.beta1) + priors.theta.ln_pdf(theta) + priors.delta.ln_pdf(delta);
        }
        KernelSpec::MarkStrength { theta, alpha } => {
            lp += priors.beta1.ln_pdf(params.beta1) + priors.theta.ln_pdf(theta) + priors.alpha.ln_pdf(alpha);
        }
        KernelSpec::MarkFull { theta, delta, alpha } => {
            lp += priors.beta1.ln_pdf(params.beta1)
                + priors.theta.ln_pdf(theta)
                + priors.delta.ln_pdf(delta)
                + priors.alpha.ln_pdf(alpha);
        }
    }
    if lp.is_nan() {
        f64::NEG_INFINITY
    } else {
        lp
    }
}

/// Log posterior together with the modes that produced it.
#[derive(Clone, Debug)]
pub struct PosteriorEval {
    pub log_post: f64,
    pub fit: Option<ReplicatedFit>,
}

/// `log_prior + replicated log likelihood`; numerical failures give `−∞`.
pub fn evaluate_posterior(
    params: &ModelParams,
    reps: &[Replicate],
    priors: &PriorSpec,
    warm: Option<&[WarmStart]>,
) -> PosteriorEval {
    let lp = log_prior(params, priors);
    if lp == f64::NEG_INFINITY || params.validate().is_err() {
        return PosteriorEval {
            log_post: f64::NEG_INFINITY,
            fit: None,
        };
    }
    match replicated_fit_warm(params, reps, warm) {
        Ok(fit) => PosteriorEval {
            log_post: lp + fit.log_lik,
            fit: Some(fit),
        },
        Err(e) => {
            log::debug!("posterior evaluation failed: {e}");
            PosteriorEval {
                log_post: f64::NEG_INFINITY,
                fit: None,
            }
        }
    }
}

pub fn log_posterior(params: &ModelParams, reps: &[Replicate], priors: &PriorSpec) -> f64 {
    evaluate_posterior(params, reps, priors, None).log_post
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn remap_keeps_interior() {
        let small = LatticeLayout { nx: 3, ny: 2, ghost: 1, kappa_h: 1.0 };
        let big = LatticeLayout { ghost: 3, ..small };
        let z: Vec<f64> = (0..small.ext_len()).map(|v| v as f64 + 1.0).collect();
        let up = remap_mode(&z, &big).unwrap();
        assert_eq!(small.interior(&z), big.interior(&up));
        assert_eq!(up.iter().filter(|v| **v != 0.0).count(), z.len());
        let down = remap_mode(&up, &small).unwrap();
        assert_eq!(down, z);
        assert!(remap_mode(&[1.0; 7], &small).is_none());
    }
    use crate::geometry::{bin_points, discretize, Window};
    use crate::linalg::BandMatrix;
    use crate::quad::integrate;
    use statrs::distribution::ContinuousCDF;

    fn scalar_q(sigma: f64) -> PrecisionOperator {
        PrecisionOperator::from_band(BandMatrix::from_dense(&[vec![1.0 / (sigma * sigma)]])).unwrap()
    }

    /// Root of a decreasing function by bisection.
    fn bisect(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64) -> f64 {
        for _ in 0..200 {
            let m = 0.5 * (a + b);
            if f(m) > 0.0 {
                a = m;
            } else {
                b = m;
            }
        }
        0.5 * (a + b)
    }

    #[test]
    fn scalar_mode_matches_bisection() {
        for (n, eta, s) in [(0u32, 0.0, 1.6), (3, 1.0, 0.3), (20, 0.5, 1.6), (7, -2.0, 2.0)] {
            let q = scalar_q(s);
            let r = find_mode(&[n], &[eta], &q, None).unwrap();
            let z = bisect(|z| n as f64 - (eta + z).exp() - z / (s * s), -30.0, 30.0);
            assert!(r.converged);
            assert!((r.mode[0] - z).abs() < 1e-8, "n={n}: {} vs {z}", r.mode[0]);
        }
    }

    #[test]
    fn zero_mode_when_counts_match_intensity() {
        let g = discretize(Window::square(5.0).unwrap(), 1.0).unwrap();
        let q = build_precision(&g, &MaternParams::from_sd(1.0, 2.0).unwrap()).unwrap();
        let counts = vec![4u32; g.len()];
        let offsets = vec![4f64.ln(); g.len()];
        let r = find_mode(&counts, &offsets, &q, None).unwrap();
        assert!(r.converged);
        assert_eq!(r.newton_iters, 0);
        assert!(r.mode.iter().all(|&z| z == 0.0));
    }

    #[test]
    fn scalar_laplace_against_quadrature() {
        // the Laplace error is intrinsic; this checks the implementation, not the approximation
        for (n, s) in [(3u32, 0.3), (20, 0.3)] {
            let eta = (n as f64).ln();
            let q = scalar_q(s);
            let lap = laplace_loglik(&[n], &[eta], &q).unwrap();
            let f = |z: f64| {
                (n as f64 * (eta + z) - (eta + z).exp() - ln_gamma(n as f64 + 1.0) - z * z / (2.0 * s * s)).exp()
                    / (s * (2.0 * std::f64::consts::PI).sqrt())
            };
            let exact = integrate(f, -40.0 * s, 40.0 * s, 1e-300, 1e-13).unwrap().ln();
            assert!((lap - exact).abs() < 2e-3 * exact.abs(), "n={n} s={s}: {lap} vs {exact}");
        }
    }

    #[test]
    fn degenerate_prior_limit() {
        let q = scalar_q(1e-5);
        let (n, eta) = (5u32, 1.2);
        let v = laplace_loglik(&[n], &[eta], &q).unwrap();
        let pois = n as f64 * eta - eta.exp() - ln_gamma(6.0);
        assert!((v - pois).abs() < 1e-6);
    }

    fn toy_replicate(seed: u64, side: f64) -> Replicate {
        let w = Window::square(side).unwrap();
        let g = discretize(w, 1.0).unwrap();
        let mut pts = Vec::new();
        let mut s = seed;
        let mut next = || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (s >> 11) as f64 / (1u64 << 53) as f64
        };
        for _ in 0..(6.0 * side * side) as usize {
            pts.push([next() * side, next() * side]);
        }
        let children = PointPattern::new(pts, None, w).unwrap();
        let parents = PointPattern::new(vec![[1.2, 1.7], [3.9, 2.2], [2.5, 4.1]], None, w).unwrap();
        let counts = bin_points(&children, &g).unwrap();
        Replicate::new("toy", counts, parents, EdgeMode::NoCorrection).unwrap()
    }

    fn toy_params(beta1: f64) -> ModelParams {
        ModelParams {
            beta0: vec![1.5],
            beta1,
            kernel: KernelSpec::Gaussian { theta: 1.3 },
            field: MaternParams::from_sd(0.8, 1.5).unwrap(),
        }
    }

    #[test]
    fn beta1_gradient_matches_finite_differences() {
        let rep = toy_replicate(7, 5.0);
        let params = toy_params(-0.7);
        let q = build_precision(rep.grid(), &params.field).unwrap();
        let offsets = rep.offsets(&params, 0).unwrap();
        let c = rep.field(&params.kernel).unwrap();
        let g = laplace_offset_gradient(&rep.counts.counts, &offsets, &q).unwrap();
        let analytic: f64 = g.iter().zip(c.iter()).map(|(a, b)| a * b).sum();
        let h = 1e-5;
        let lp = replicated_loglik(&toy_params(-0.7 + h), std::slice::from_ref(&rep)).unwrap();
        let lm = replicated_loglik(&toy_params(-0.7 - h), std::slice::from_ref(&rep)).unwrap();
        let fd = (lp - lm) / (2.0 * h);
        assert!((fd - analytic).abs() < 1e-4 * analytic.abs(), "{fd} vs {analytic}");
    }

    #[test]
    fn replicate_algebra() {
        let a = toy_replicate(1, 5.0);
        let b = toy_replicate(2, 5.0);
        let one = replicated_loglik(&toy_params(-0.5), std::slice::from_ref(&a)).unwrap();
        let mut p2 = toy_params(-0.5);
        p2.beta0 = vec![1.5, 1.5];
        let twice = replicated_loglik(&p2, &[a.clone(), a.clone()]).unwrap();
        assert_eq!(twice, 2.0 * one);
        let ab = replicated_loglik(&p2, &[a.clone(), b.clone()]).unwrap();
        let ba = replicated_loglik(&p2, &[b, a]).unwrap();
        assert!((ab - ba).abs() < 1e-12 * ab.abs());
    }

    #[test]
    fn warm_start_does_not_change_result() {
        let rep = toy_replicate(3, 6.0);
        let reps = std::slice::from_ref(&rep);
        let cold = replicated_fit(&toy_params(-0.7), reps, None).unwrap();
        let warm_src = replicated_fit(&toy_params(-0.6), reps, None).unwrap();
        let warm = replicated_fit(&toy_params(-0.7), reps, Some(&warm_src.modes)).unwrap();
        assert!((cold.log_lik - warm.log_lik).abs() < 1e-9 * cold.log_lik.abs(), "{} vs {}", cold.log_lik, warm.log_lik);
    }

    #[test]
    fn reused_factor_does_not_change_result() {
        let rep = toy_replicate(3, 6.0);
        let reps = std::slice::from_ref(&rep);
        let mut far = toy_params(-0.7);
        far.field = MaternParams::from_sd(1.4, 0.9).unwrap();
        for src in [toy_params(-0.65), toy_params(0.5), far] {
            let cold = replicated_fit(&toy_params(-0.7), reps, None).unwrap();
            let ws = replicated_fit(&src, reps, None).unwrap().warm_starts();
            let warm = replicated_fit_warm(&toy_params(-0.7), reps, Some(&ws)).unwrap();
            assert_eq!(warm.newton_failures, 0);
            assert!((cold.log_lik - warm.log_lik).abs() < 1e-9 * cold.log_lik.abs(), "{} vs {}", cold.log_lik, warm.log_lik);
        }
    }

    #[test]
    fn offsets_only_matter() {
        let g = discretize(Window::square(4.0).unwrap(), 1.0).unwrap();
        let q = build_precision(&g, &MaternParams::from_sd(1.0, 1.5).unwrap()).unwrap();
        let counts: Vec<u32> = (0..16).map(|i| (i % 4) as u32).collect();
        let off: Vec<f64> = (0..16).map(|i| 0.1 * i as f64).collect();
        let a = laplace_loglik(&counts, &off, &q).unwrap();
        let b = laplace_loglik(&counts, &off.clone(), &q).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn mode_monotone_in_counts() {
        let g = discretize(Window::square(5.0).unwrap(), 1.0).unwrap();
        let q = build_precision(&g, &MaternParams::from_sd(1.2, 2.0).unwrap()).unwrap();
        let counts: Vec<u32> = (0..25).map(|i| ((i * 7) % 5) as u32).collect();
        let off = vec![0.3; 25];
        let base = find_mode(&counts, &off, &q, None).unwrap();
        let plus: Vec<u32> = counts.iter().map(|c| c + 1).collect();
        let up = find_mode(&plus, &off, &q, None).unwrap();
        assert!(up.mode.iter().sum::<f64>() >= base.mode.iter().sum::<f64>());
    }

    #[test]
    fn cell_log_intensity_examples() {
        let rep = toy_replicate(1, 5.0);
        let mut p = toy_params(0.0);
        p.beta0 = vec![0.0];
        p.kernel = KernelSpec::NoInfluence;
        assert_eq!(cell_log_intensity(&p, &rep, 0, 3, 0.0).unwrap(), 0.0);
        let p = toy_params(-0.7);
        assert!(matches!(cell_log_intensity(&p, &rep, 0, 0, 0.0), Err(Error::Internal(_))));
        let c = rep.field(&p.kernel).unwrap();
        let v = cell_log_intensity(&p, &rep, 0, 4, 0.25).unwrap();
        assert!((v - (1.5 - 0.7 * c[4] + 0.25)).abs() < 1e-15);
    }

    #[test]
    fn prior_values() {
        let pr = PriorSpec::default();
        let expect = -(10.0 * (2.0 * std::f64::consts::PI).sqrt()).ln();
        assert!((pr.beta1.ln_pdf(0.0) - expect).abs() < 1e-12);
        let gamma = statrs::distribution::Gamma::new(2.4, 1.0 / 1.8).unwrap();
        let mass = gamma.cdf(10.0) - gamma.cdf(1.0);
        assert!((mass - 0.90).abs() < 0.01, "{mass}");
        let mass_q = integrate(|x| pr.theta.ln_pdf(x).exp(), 1.0, 10.0, 1e-12, 1e-12).unwrap();
        assert!((mass_q - mass).abs() < 1e-9);
        let mut p = toy_params(0.0);
        p.field.sigma2 = 1.0;
        assert!(log_prior(&p, &pr).is_finite());
        assert_eq!(pr.sigma.ln_pdf(-1.0), f64::NEG_INFINITY);
    }

    #[test]
    fn posterior_is_prior_plus_likelihood() {
        let rep = toy_replicate(5, 5.0);
        let reps = std::slice::from_ref(&rep);
        let p = toy_params(-0.7);
        let flat = log_posterior(&p, reps, &PriorSpec::flat());
        assert_eq!(flat, replicated_loglik(&p, reps).unwrap());
        let a = log_posterior(&p, reps, &PriorSpec::default());
        let b = log_posterior(&p, reps, &PriorSpec::default());
        assert_eq!(a.to_bits(), b.to_bits());
        let mut bad = p.clone();
        bad.field.sigma2 = -1.0;
        assert_eq!(log_posterior(&bad, reps, &PriorSpec::default()), f64::NEG_INFINITY);
    }

    #[test]
    fn marginal_rises_as_count_approaches_intensity() {
        let q = scalar_q(0.3);
        let eta = 10f64.ln();
        let mut last = f64::NEG_INFINITY;
        for n in 0..=8u32 {
            let v = log_posterior_scalar(n, eta, &q);
            assert!(v > last, "n={n}");
            last = v;
        }
    }

    fn log_posterior_scalar(n: u32, eta: f64, q: &PrecisionOperator) -> f64 {
        laplace_loglik(&[n], &[eta], q).unwrap()
    }
}
