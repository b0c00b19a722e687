//! Robust Adaptive Metropolis over the unconstrained parameter vector, chain
//! storage and posterior summaries.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gmrf::MaternParams;
use crate::influence::KernelFamily;
use crate::likelihood::{evaluate_posterior, log_prior, ModelParams, PriorSpec, Replicate, WarmStart};
use crate::linalg::LowerTriangular;

/// Acceptance rate the proposal adapts towards.
pub const TARGET_ACCEPT: f64 = 0.234;

/// Density on an unconstrained vector, with optional state carried between evaluations.
pub trait Target {
    type Aux: Clone;

    fn dim(&self) -> usize;

    fn names(&self) -> Vec<String> {
        (0..self.dim()).map(|i| format!("x{i}")).collect()
    }

    /// Log density (including any transform Jacobian) and auxiliary state.
    /// `warm` is the state of the current chain position.
    fn evaluate(&self, x: &[f64], warm: Option<&Self::Aux>) -> (f64, Option<Self::Aux>);

    /// Values reported in the chain, on the natural scale.
    fn natural(&self, x: &[f64]) -> Vec<f64> {
        x.to_vec()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChainSettings {
    pub n_iter: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub target_accept: f64,
    /// Adaptation decay exponent.
    pub gamma: f64,
    /// Initial proposal factor `S = init_scale · I`.
    pub init_scale: f64,
    pub adapt: bool,
}

impl Default for ChainSettings {
    fn default() -> Self {
        Self {
            n_iter: 100_000,
            burn_in: 20_000,
            thin: 10,
            target_accept: TARGET_ACCEPT,
            gamma: 2.0 / 3.0,
            init_scale: 0.1,
            adapt: true,
        }
    }
}

impl ChainSettings {
    pub fn validate(&self) -> Result<()> {
        if self.thin == 0 {
            return Err(Error::Config("thin must be at least 1".into()));
        }
        if self.burn_in > self.n_iter {
            return Err(Error::Config(format!(
                "burn_in {} exceeds n_iter {}",
                self.burn_in, self.n_iter
            )));
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return Err(Error::Config("target acceptance must lie in (0, 1)".into()));
        }
        if !(self.gamma > 0.5 && self.gamma <= 1.0) {
            return Err(Error::Config("adaptation exponent must lie in (0.5, 1]".into()));
        }
        if !(self.init_scale > 0.0) {
            return Err(Error::Config("initial proposal scale must be positive".into()));
        }
        Ok(())
    }

    pub fn n_stored(&self) -> usize {
        (self.n_iter - self.burn_in) / self.thin
    }
}

/// Sampler state: position, its log density, the proposal factor and the step counter.
#[derive(Clone, Debug)]
pub struct RamState<A> {
    pub x: Vec<f64>,
    pub log_density: f64,
    pub aux: Option<A>,
    pub s: LowerTriangular,
    pub step: u64,
    pub target_accept: f64,
    pub gamma: f64,
    pub adapt: bool,
}

impl<A: Clone> RamState<A> {
    pub fn new<T: Target<Aux = A>>(target: &T, x: Vec<f64>, settings: &ChainSettings) -> Result<Self> {
        if x.len() != target.dim() {
            return Err(Error::Config(format!(
                "initial vector has {} entries, target dimension is {}",
                x.len(),
                target.dim()
            )));
        }
        let (log_density, aux) = target.evaluate(&x, None);
        if !log_density.is_finite() {
            return Err(Error::Config("initial values lie outside the posterior support".into()));
        }
        Ok(Self {
            s: LowerTriangular::diagonal(&vec![settings.init_scale; x.len()]),
            x,
            log_density,
            aux,
            step: 0,
            target_accept: settings.target_accept,
            gamma: settings.gamma,
            adapt: settings.adapt,
        })
    }
}

/// One RAM iteration: propose `x + S u`, accept or reject, adapt `S`.
/// Returns the acceptance probability and whether the move was accepted.
pub fn ram_step<T: Target, R: Rng + ?Sized>(state: &mut RamState<T::Aux>, target: &T, rng: &mut R) -> (f64, bool) {
    let d = state.x.len();
    state.step += 1;
    let u: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    let su = state.s.mul_vec(&u);
    let y: Vec<f64> = state.x.iter().zip(&su).map(|(a, b)| a + b).collect();
    let (ly, aux) = target.evaluate(&y, state.aux.as_ref());
    let a = if ly.is_finite() {
        (ly - state.log_density).exp().min(1.0)
    } else {
        0.0
    };
    let accepted = rng.random::<f64>() < a;
    if accepted {
        state.x = y;
        state.log_density = ly;
        state.aux = aux;
    }
    if state.adapt && d > 0 {
        let eta = (d as f64 * (state.step as f64).powf(-state.gamma)).min(1.0);
        let c = eta * (a - state.target_accept);
        let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
        if c != 0.0 && norm > 0.0 {
            let k = c.abs().sqrt() / norm;
            let v: Vec<f64> = su.iter().map(|s| s * k).collect();
            if state.s.rank_one(&v, c < 0.0).is_err() {
                log::warn!("proposal downdate rejected at step {}", state.step);
            }
        }
    }
    (a, accepted)
}

/// Stored draws of one run.
#[derive(Clone, Debug, PartialEq)]
pub struct Chain {
    pub names: Vec<String>,
    /// Thinned post-burn-in draws on the natural scale.
    pub samples: Vec<Vec<f64>>,
    pub log_post: Vec<f64>,
    pub accepted: u64,
    pub proposals: u64,
    /// Mean acceptance probability over all iterations.
    pub mean_accept_prob: f64,
    pub seed: u64,
    pub settings: ChainSettings,
    pub newton_failures: usize,
    /// Final position on the unconstrained scale.
    pub last: Vec<f64>,
}

impl Chain {
    pub fn acceptance_rate(&self) -> f64 {
        if self.proposals == 0 {
            0.0
        } else {
            self.accepted as f64 / self.proposals as f64
        }
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let j = self.names.iter().position(|n| n == name)?;
        Some(self.samples.iter().map(|s| s[j]).collect())
    }

    pub fn mean(&self, name: &str) -> Option<f64> {
        let c = self.column(name)?;
        if c.is_empty() {
            return None;
        }
        Some(c.iter().sum::<f64>() / c.len() as f64)
    }
}

/// Runs a chain from `init` (unconstrained scale); deterministic for a given seed.
pub fn run_chain<T: Target>(target: &T, init: Vec<f64>, settings: &ChainSettings, seed: u64) -> Result<Chain> {
    settings.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = RamState::new(target, init, settings)?;
    let mut chain = Chain {
        names: target.names(),
        samples: Vec::with_capacity(settings.n_stored()),
        log_post: Vec::with_capacity(settings.n_stored()),
        accepted: 0,
        proposals: 0,
        mean_accept_prob: 0.0,
        seed,
        settings: *settings,
        newton_failures: 0,
        last: Vec::new(),
    };
    let mut prob_sum = 0.0;
    for it in 1..=settings.n_iter {
        let (a, acc) = ram_step(&mut state, target, &mut rng);
        prob_sum += a;
        chain.proposals += 1;
        chain.accepted += acc as u64;
        if it > settings.burn_in && (it - settings.burn_in) % settings.thin == 0 {
            chain.samples.push(target.natural(&state.x));
            chain.log_post.push(state.log_density);
        }
    }
    if settings.n_iter > 0 {
        chain.mean_accept_prob = prob_sum / settings.n_iter as f64;
    }
    chain.last = state.x;
    Ok(chain)
}

/// Layout of the model parameters in the sampled vector:
/// intercepts, `β_1`, log kernel parameters, `log σ_Z`, `log ρ_Z`.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamLayout {
    pub family: KernelFamily,
    pub plot_ids: Vec<String>,
}

impl ParamLayout {
    pub fn new(family: KernelFamily, plot_ids: Vec<String>) -> Self {
        Self { family, plot_ids }
    }

    fn has_influence(&self) -> bool {
        self.family != KernelFamily::None
    }

    pub fn dim(&self) -> usize {
        let k = if self.has_influence() {
            1 + self.family.param_names().len()
        } else {
            0
        };
        self.plot_ids.len() + k + 2
    }

    pub fn names(&self) -> Vec<String> {
        let mut v: Vec<String> = self.plot_ids.iter().map(|id| format!("beta0_{id}")).collect();
        if self.has_influence() {
            v.push("beta1".into());
            v.extend(self.family.param_names().iter().map(|s| s.to_string()));
        }
        v.push("sigmaZ".into());
        v.push("rhoZ".into());
        v
    }

    /// Natural-scale values in [`names`](Self::names) order.
    pub fn natural(&self, p: &ModelParams) -> Vec<f64> {
        let mut v = p.beta0.clone();
        if self.has_influence() {
            v.push(p.beta1);
            v.extend(p.kernel.params());
        }
        v.push(p.field.sigma());
        v.push(p.field.range);
        v
    }

    pub fn to_unconstrained(&self, p: &ModelParams) -> Result<Vec<f64>> {
        if p.kernel.family() != self.family || p.beta0.len() != self.plot_ids.len() {
            return Err(Error::Config("parameters do not match the model layout".into()));
        }
        let n = self.plot_ids.len();
        let mut v = self.natural(p);
        for (i, x) in v.iter_mut().enumerate().skip(if self.has_influence() { n + 1 } else { n }) {
            if !(*x > 0.0) {
                return Err(Error::Config(format!(
                    "{} = {x} must be positive",
                    self.names()[i]
                )));
            }
            *x = x.ln();
        }
        Ok(v)
    }

    pub fn from_unconstrained(&self, x: &[f64]) -> Result<ModelParams> {
        let n = self.plot_ids.len();
        let beta0 = x[..n].to_vec();
        let mut i = n;
        let (beta1, kernel) = if self.has_influence() {
            let b1 = x[i];
            let k = self.family.param_names().len();
            let kp: Vec<f64> = x[i + 1..i + 1 + k].iter().map(|v| v.exp()).collect();
            i += 1 + k;
            (b1, self.family.with_params(&kp)?)
        } else {
            (0.0, self.family.with_params(&[])?)
        };
        let field = MaternParams::from_sd(x[i].exp(), x[i + 1].exp())?;
        Ok(ModelParams {
            beta0,
            beta1,
            kernel,
            field,
        })
    }

    /// Inverse of [`natural`](Self::natural).
    pub fn from_natural(&self, v: &[f64]) -> Result<ModelParams> {
        if v.len() != self.dim() {
            return Err(Error::Data(format!(
                "expected {} parameter values, got {}",
                self.dim(),
                v.len()
            )));
        }
        let n = self.plot_ids.len();
        let mut i = n;
        let (beta1, kernel) = if self.has_influence() {
            let k = self.family.param_names().len();
            let out = (v[i], self.family.with_params(&v[i + 1..i + 1 + k])?);
            i += 1 + k;
            out
        } else {
            (0.0, self.family.with_params(&[])?)
        };
        Ok(ModelParams {
            beta0: v[..n].to_vec(),
            beta1,
            kernel,
            field: MaternParams::from_sd(v[i], v[i + 1])?,
        })
    }

    /// `log |∂natural/∂x|`: the sum of the log-transformed coordinates.
    pub fn log_jacobian(&self, x: &[f64]) -> f64 {
        let start = self.plot_ids.len() + usize::from(self.has_influence());
        x[start..].iter().sum()
    }
}

/// Posterior of the hierarchical model on the unconstrained scale. The
/// auxiliary state holds the latent modes used to warm-start Newton.
pub struct PosteriorTarget<'a> {
    pub reps: &'a [Replicate],
    pub priors: PriorSpec,
    pub layout: ParamLayout,
    /// When false, only the prior is used.
    pub likelihood: bool,
    failures: AtomicUsize,
}

impl<'a> PosteriorTarget<'a> {
    pub fn new(reps: &'a [Replicate], priors: PriorSpec, family: KernelFamily) -> Self {
        Self {
            layout: ParamLayout::new(family, reps.iter().map(|r| r.id.clone()).collect()),
            reps,
            priors,
            likelihood: true,
            failures: AtomicUsize::new(0),
        }
    }

    pub fn prior_only(mut self) -> Self {
        self.likelihood = false;
        self
    }

    /// Evaluations rejected because of Newton non-convergence or numerical failure.
    pub fn failures(&self) -> usize {
        self.failures.load(Ordering::Relaxed)
    }
}

impl Target for PosteriorTarget<'_> {
    type Aux = Arc<Vec<WarmStart>>;

    fn dim(&self) -> usize {
        self.layout.dim()
    }

    fn names(&self) -> Vec<String> {
        self.layout.names()
    }

    fn evaluate(&self, x: &[f64], warm: Option<&Self::Aux>) -> (f64, Option<Self::Aux>) {
        let Ok(params) = self.layout.from_unconstrained(x) else {
            return (f64::NEG_INFINITY, None);
        };
        let jac = self.layout.log_jacobian(x);
        if !self.likelihood {
            return (log_prior(&params, &self.priors) + jac, None);
        }
        let ev = evaluate_posterior(&params, self.reps, &self.priors, warm.map(|w| w.as_slice()));
        match ev.fit {
            Some(fit) if ev.log_post.is_finite() => {
                if fit.newton_failures > 0 {
                    self.failures.fetch_add(1, Ordering::Relaxed);
                }
                (ev.log_post + jac, Some(Arc::new(fit.warm_starts())))
            }
            Some(_) => {
                self.failures.fetch_add(1, Ordering::Relaxed);
                (f64::NEG_INFINITY, None)
            }
            None => {
                if log_prior(&params, &self.priors).is_finite() {
                    self.failures.fetch_add(1, Ordering::Relaxed);
                }
                (f64::NEG_INFINITY, None)
            }
        }
    }

    fn natural(&self, x: &[f64]) -> Vec<f64> {
        match self.layout.from_unconstrained(x) {
            Ok(p) => self.layout.natural(&p),
            Err(_) => vec![f64::NAN; x.len()],
        }
    }
}

/// Runs the model posterior chain from natural-scale initial values.
pub fn run_posterior_chain(target: &PosteriorTarget, init: &ModelParams, settings: &ChainSettings, seed: u64) -> Result<Chain> {
    let x0 = target.layout.to_unconstrained(init)?;
    let before = target.failures();
    let mut chain = run_chain(target, x0, settings, seed)?;
    chain.newton_failures = target.failures() - before;
    Ok(chain)
}

/// Empirical quantile with linear interpolation between order statistics.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = p.clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Effective sample size from Geyer's initial monotone sequence of autocorrelations.
pub fn effective_sample_size(x: &[f64]) -> f64 {
    let n = x.len();
    if n < 4 {
        return n as f64;
    }
    let mean = x.iter().sum::<f64>() / n as f64;
    let c: Vec<f64> = x.iter().map(|v| v - mean).collect();
    let var = c.iter().map(|v| v * v).sum::<f64>() / n as f64;
    if var == 0.0 {
        return n as f64;
    }
    let acf = |k: usize| c[..n - k].iter().zip(&c[k..]).map(|(a, b)| a * b).sum::<f64>() / (n as f64 * var);
    let mut sum = 0.0;
    let mut prev = f64::INFINITY;
    let mut k = 0;
    while k + 1 < n {
        let pair = acf(k) + acf(k + 1);
        if pair <= 0.0 {
            break;
        }
        let pair = pair.min(prev);
        sum += pair;
        prev = pair;
        k += 2;
    }
    let tau = (2.0 * sum - 1.0).max(1.0 / n as f64);
    (n as f64 / tau).min(n as f64 * (n as f64).log10().max(1.0))
}

/// Posterior mean, quantiles and effective sample size of one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSummary {
    pub name: String,
    pub mean: f64,
    /// Quantiles at [`SUMMARY_PROBS`].
    pub quantiles: [f64; 5],
    pub ess: f64,
}

pub const SUMMARY_PROBS: [f64; 5] = [0.05, 0.25, 0.5, 0.75, 0.95];

pub fn summarize(chain: &Chain) -> Result<Vec<ParamSummary>> {
    if chain.samples.is_empty() {
        return Err(Error::Data("cannot summarize an empty chain".into()));
    }
    let mut out = Vec::with_capacity(chain.names.len());
    for (j, name) in chain.names.iter().enumerate() {
        let col: Vec<f64> = chain.samples.iter().map(|s| s[j]).collect();
        let mean = col.iter().sum::<f64>() / col.len() as f64;
        let mut sorted = col.clone();
        sorted.sort_by(f64::total_cmp);
        out.push(ParamSummary {
            name: name.clone(),
            mean,
            quantiles: SUMMARY_PROBS.map(|p| quantile(&sorted, p)),
            ess: effective_sample_size(&col),
        });
    }
    Ok(out)
}

/// Writes a chain as CSV preceded by `#` metadata lines.
pub fn write_chain(chain: &Chain, path: &Path, meta: &[(String, String)]) -> Result<()> {
    let mut head = String::new();
    let s = &chain.settings;
    let _ = writeln!(head, "# seed={}", chain.seed);
    let _ = writeln!(
        head,
        "# n_iter={} burn_in={} thin={} target_accept={} gamma={} init_scale={}",
        s.n_iter, s.burn_in, s.thin, s.target_accept, s.gamma, s.init_scale
    );
    let _ = writeln!(
        head,
        "# acceptance_rate={:.4} newton_failures={}",
        chain.acceptance_rate(),
        chain.newton_failures
    );
    for (k, v) in meta {
        let _ = writeln!(head, "# {k}={v}");
    }
    let mut w = csv::Writer::from_writer(head.into_bytes());
    let mut header = chain.names.clone();
    header.push("logpost".into());
    w.write_record(&header).map_err(csv_err)?;
    for (row, lp) in chain.samples.iter().zip(&chain.log_post) {
        let rec: Vec<String> = row.iter().chain(std::iter::once(lp)).map(|v| format!("{v}")).collect();
        w.write_record(&rec).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Internal(e.to_string()))?;
    std::fs::write(path, bytes)?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::Internal(format!("csv: {e}"))
}

/// Reads a chain CSV; returns the column names (including `logpost`) and rows.
pub fn read_chain(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let names: Vec<String> = r
        .headers()
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?
        .iter()
        .map(String::from)
        .collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let row = rec
            .iter()
            .map(|s| {
                s.parse::<f64>()
                    .map_err(|e| Error::Data(format!("{}: {e}", path.display())))
            })
            .collect::<Result<Vec<f64>>>()?;
        if row.len() != names.len() {
            return Err(Error::Data(format!("{}: ragged row", path.display())));
        }
        rows.push(row);
    }
    Ok((names, rows))
}
