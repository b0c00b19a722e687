//! Simulation study of edge treatments: parents from a Poisson or Strauss process
//! on an extended window, children from the conditional model with the full
//! parent pattern, then fits with no correction, the Poisson correction and plus
//! sampling.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::config::{EdgeKind, ParentProcess, Regime, RunConfig};
use crate::edge::EdgeMode;
use crate::error::{Error, Result};
use crate::geometry::{bin_points, discretize, PointPattern, Window};
use crate::gmrf::MaternParams;
use crate::influence::{InfluenceField, KernelFamily, KernelSpec};
use crate::likelihood::{ModelParams, PriorSpec, Replicate};
use crate::mcmc::{quantile, run_posterior_chain, ChainSettings, PosteriorTarget};
use crate::pool::{par_map, stream_id};
use crate::simulate::{pilot_field, sample_lgcp, sample_poisson, sample_strauss, stream_rng, tune_beta0, StraussParams};

/// Parameters tracked in the study, in output order.
pub const STUDY_PARAMS: [&str; 5] = ["beta0", "beta1", "theta", "sigmaZ", "rhoZ"];

const PLOT_ID: &str = "1";

#[derive(Clone, Debug)]
pub struct StudyDesign {
    pub window: Window,
    pub ext_margin: f64,
    pub parent_intensity: f64,
    pub strauss: StraussParams,
    pub sim_cell: f64,
    pub fit_cell: f64,
    pub target_count: f64,
    pub pilot: usize,
    pub sigma: f64,
    pub range: f64,
    pub replicates: usize,
    pub processes: Vec<ParentProcess>,
    pub regimes: Vec<Regime>,
    pub edges: Vec<EdgeKind>,
    pub priors: PriorSpec,
    pub chain: ChainSettings,
}

impl StudyDesign {
    pub fn from_config(cfg: &RunConfig) -> Result<Self> {
        let sim = &cfg.simulate;
        sim.validate()?;
        let e = &cfg.experiment;
        if e.replicates == 0 || e.processes.is_empty() || e.regimes.is_empty() || e.edges.is_empty() {
            return Err(Error::Config(
                "experiment needs at least one replicate, process, regime and edge mode".into(),
            ));
        }
        let design = Self {
            window: cfg.window.window()?,
            ext_margin: sim.ext_margin,
            parent_intensity: sim.parent_intensity,
            strauss: sim.strauss,
            sim_cell: sim.sim_cell,
            fit_cell: cfg.model.fit_cell,
            target_count: sim.target_count.unwrap_or(600.0),
            pilot: sim.pilot.max(1),
            sigma: cfg.model.sigma,
            range: cfg.model.range,
            replicates: e.replicates,
            processes: e.processes.clone(),
            regimes: e.regimes.clone(),
            edges: e.edges.clone(),
            priors: cfg.priors,
            chain: cfg.chain.settings()?,
        };
        design.field()?;
        discretize(design.window, design.fit_cell)?;
        Ok(design)
    }

    pub fn ext_window(&self) -> Result<Window> {
        self.window.dilate(self.ext_margin)
    }

    fn field(&self) -> Result<MaternParams> {
        MaternParams::from_sd(self.sigma, self.range)
    }

    fn parents<R: rand::Rng + ?Sized>(&self, process: ParentProcess, rng: &mut R) -> Result<PointPattern> {
        let ext = self.ext_window()?;
        match process {
            ParentProcess::Poisson => sample_poisson(self.parent_intensity, &ext, rng),
            ParentProcess::Strauss => sample_strauss(&self.strauss, &ext, rng),
        }
    }

    /// True parameters of `regime` with the intercept tuned for `process`.
    fn truth(&self, process: ParentProcess, regime: Regime, seed: u64) -> Result<ModelParams> {
        let (beta1, theta) = regime.truth();
        let kernel = KernelSpec::Gaussian { theta };
        let field = self.field()?;
        let pilots = (0..self.pilot)
            .map(|i| {
                let mut rng = stream_rng(seed, stream_id(&[1, process as u64, i as u64]));
                let ext = self.parents(process, &mut rng)?;
                pilot_field(
                    &kernel,
                    &ext.restrict(self.window),
                    &self.window,
                    self.sim_cell,
                    &EdgeMode::PlusSampling { parents: ext },
                )
            })
            .collect::<Result<Vec<InfluenceField>>>()?;
        let beta0 = tune_beta0(self.target_count, beta1, field.sigma2, &pilots)?;
        Ok(ModelParams {
            beta0: vec![beta0],
            beta1,
            kernel,
            field,
        })
    }
}

/// One generated data set.
#[derive(Clone, Debug)]
pub struct StudyData {
    pub process: ParentProcess,
    pub replicate: usize,
    pub ext_parents: PointPattern,
    pub parents: PointPattern,
    /// Children per regime, in design order.
    pub children: Vec<PointPattern>,
}

/// Posterior summary of one fit; `means` is empty when the fit failed.
#[derive(Clone, Debug)]
pub struct StudyRecord {
    pub process: ParentProcess,
    pub regime: Regime,
    pub edge: EdgeKind,
    pub replicate: usize,
    pub n_parents: usize,
    pub n_children: usize,
    pub truth: [f64; 5],
    pub means: Option<[f64; 5]>,
    pub sd: Option<[f64; 5]>,
    pub acceptance: f64,
    pub newton_failures: usize,
    pub status: String,
}

impl StudyRecord {
    pub fn error(&self, j: usize) -> Option<f64> {
        self.means.map(|m| m[j] - self.truth[j])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StudyCheck {
    pub process: ParentProcess,
    pub check: &'static str,
    pub parameter: &'static str,
    pub value: f64,
    pub threshold: f64,
    /// `None` for reported-only quantities and checks without data.
    pub pass: Option<bool>,
}

#[derive(Clone, Debug)]
pub struct StudyReport {
    pub design: StudyDesign,
    pub truths: Vec<(ParentProcess, Regime, ModelParams)>,
    pub records: Vec<StudyRecord>,
    pub checks: Vec<StudyCheck>,
}

fn natural(p: &ModelParams) -> [f64; 5] {
    let theta = p.kernel.params().first().copied().unwrap_or(f64::NAN);
    [p.beta0[0], p.beta1, theta, p.field.sigma(), p.field.range]
}

fn edge_mode(kind: EdgeKind, data: &StudyData) -> Result<EdgeMode> {
    Ok(match kind {
        EdgeKind::None => EdgeMode::NoCorrection,
        EdgeKind::Poisson => EdgeMode::poisson_from(&data.parents)?,
        EdgeKind::Plus => EdgeMode::PlusSampling {
            parents: data.ext_parents.clone(),
        },
    })
}

pub fn generate(design: &StudyDesign, truths: &[(ParentProcess, Regime, ModelParams)], process: ParentProcess, replicate: usize, seed: u64) -> Result<StudyData> {
    let mut rng = stream_rng(seed, stream_id(&[2, process as u64, replicate as u64]));
    let ext = design.parents(process, &mut rng)?;
    let parents = ext.restrict(design.window);
    let edge = EdgeMode::PlusSampling { parents: ext.clone() };
    let children = design
        .regimes
        .iter()
        .map(|&regime| {
            let (_, _, truth) = truths
                .iter()
                .find(|(p, r, _)| *p == process && *r == regime)
                .ok_or_else(|| Error::Internal("missing truth".into()))?;
            let mut rng = stream_rng(seed, stream_id(&[3, process as u64, replicate as u64, regime as u64]));
            sample_lgcp(truth, &parents, &design.window, design.sim_cell, &edge, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(StudyData {
        process,
        replicate,
        ext_parents: ext,
        parents,
        children,
    })
}

fn fit_one(design: &StudyDesign, data: &StudyData, k: usize, truth: &ModelParams, edge: EdgeKind, seed: u64) -> Result<(crate::mcmc::Chain, usize)> {
    let grid = discretize(design.window, design.fit_cell)?;
    let children = &data.children[k];
    let rep = Replicate::new(PLOT_ID, bin_points(children, &grid)?, data.parents.clone(), edge_mode(edge, data)?)?;
    let reps = [rep];
    let target = PosteriorTarget::new(&reps, design.priors, KernelFamily::Gaussian);
    let chain_seed = stream_id(&[
        seed,
        4,
        data.process as u64,
        data.replicate as u64,
        design.regimes[k] as u64,
        edge as u64,
    ]);
    let chain = run_posterior_chain(&target, truth, &design.chain, chain_seed)?;
    let n = children.len();
    Ok((chain, n))
}

fn summarize_fit(chain: &crate::mcmc::Chain) -> Result<([f64; 5], [f64; 5])> {
    let names = ["beta0_1", "beta1", "theta", "sigmaZ", "rhoZ"];
    let mut mean = [0.0; 5];
    let mut sd = [0.0; 5];
    for (j, name) in names.iter().enumerate() {
        let col = chain
            .column(name)
            .ok_or_else(|| Error::Internal(format!("chain lacks column {name}")))?;
        if col.is_empty() {
            return Err(Error::Numeric("no stored draws".into()));
        }
        let m = col.iter().sum::<f64>() / col.len() as f64;
        mean[j] = m;
        sd[j] = (col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / col.len() as f64).sqrt();
    }
    Ok((mean, sd))
}

/// Runs the whole study. Individual failures are logged and recorded; the study continues.
pub fn run_study(design: &StudyDesign, seed: u64, workers: usize) -> Result<StudyReport> {
    let pairs: Vec<(ParentProcess, Regime)> = design
        .processes
        .iter()
        .flat_map(|&p| design.regimes.iter().map(move |&r| (p, r)))
        .collect();
    let truths = par_map(pairs.len(), workers, |i| design.truth(pairs[i].0, pairs[i].1, seed))
        .into_iter()
        .zip(&pairs)
        .map(|(t, &(p, r))| t.map(|t| (p, r, t)))
        .collect::<Result<Vec<_>>>()?;
    for (p, r, t) in &truths {
        log::info!("{} {}: beta0 = {:.4}", p.label(), r.label(), t.beta0[0]);
    }

    let data_jobs: Vec<(ParentProcess, usize)> = design
        .processes
        .iter()
        .flat_map(|&p| (0..design.replicates).map(move |r| (p, r)))
        .collect();
    let data = par_map(data_jobs.len(), workers, |i| {
        let (p, r) = data_jobs[i];
        generate(design, &truths, p, r, seed)
    });

    struct Job {
        data: usize,
        regime: usize,
        edge: EdgeKind,
    }
    let mut jobs = Vec::new();
    for d in 0..data.len() {
        for k in 0..design.regimes.len() {
            for &edge in &design.edges {
                jobs.push(Job { data: d, regime: k, edge });
            }
        }
    }
    let records = par_map(jobs.len(), workers, |i| {
        let job = &jobs[i];
        let (process, replicate) = data_jobs[job.data];
        let regime = design.regimes[job.regime];
        let truth = &truths
            .iter()
            .find(|(p, r, _)| *p == process && *r == regime)
            .expect("truth for every design cell")
            .2;
        let mut rec = StudyRecord {
            process,
            regime,
            edge: job.edge,
            replicate,
            n_parents: 0,
            n_children: 0,
            truth: natural(truth),
            means: None,
            sd: None,
            acceptance: f64::NAN,
            newton_failures: 0,
            status: "ok".into(),
        };
        let outcome = match &data[job.data] {
            Err(e) => Err(Error::Internal(format!("data generation failed: {e}"))),
            Ok(d) => {
                rec.n_parents = d.parents.len();
                rec.n_children = d.children[job.regime].len();
                fit_one(design, d, job.regime, truth, job.edge, seed)
                    .and_then(|(chain, _)| summarize_fit(&chain).map(|s| (chain, s)))
            }
        };
        match outcome {
            Ok((chain, (m, s))) => {
                rec.means = Some(m);
                rec.sd = Some(s);
                rec.acceptance = chain.acceptance_rate();
                rec.newton_failures = chain.newton_failures;
                log::debug!(
                    "{} {} {} #{}: beta1 {:.3} theta {:.3} acc {:.3}",
                    process.label(),
                    regime.label(),
                    job.edge.label(),
                    replicate,
                    m[1],
                    m[2],
                    rec.acceptance
                );
            }
            Err(e) => {
                log::warn!(
                    "{} {} {} replicate {replicate} failed: {e}",
                    process.label(),
                    regime.label(),
                    job.edge.label()
                );
                rec.status = format!("failed: {e}").replace(',', ";");
            }
        }
        rec
    });
    let checks = checks(design, &records);
    Ok(StudyReport {
        design: design.clone(),
        truths,
        records,
        checks,
    })
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    Some(quantile(&v, 0.5))
}

/// Posterior means of parameter `j` keyed by replicate, for one design cell.
fn means_by_replicate(records: &[StudyRecord], p: ParentProcess, r: Regime, e: EdgeKind, j: usize) -> Vec<(usize, f64)> {
    records
        .iter()
        .filter(|x| x.process == p && x.regime == r && x.edge == e)
        .filter_map(|x| x.means.map(|m| (x.replicate, m[j])))
        .collect()
}

/// Median absolute difference to plus sampling over replicates fitted both ways.
fn median_gap(records: &[StudyRecord], p: ParentProcess, r: Regime, e: EdgeKind, j: usize) -> Option<f64> {
    let plus = means_by_replicate(records, p, r, EdgeKind::Plus, j);
    let other = means_by_replicate(records, p, r, e, j);
    let gaps = other
        .iter()
        .filter_map(|(rep, v)| plus.iter().find(|(q, _)| q == rep).map(|(_, w)| (v - w).abs()))
        .collect();
    median(gaps)
}

pub fn checks(design: &StudyDesign, records: &[StudyRecord]) -> Vec<StudyCheck> {
    let mut out = Vec::new();
    for &p in &design.processes {
        for (j, name) in [(1usize, "beta1"), (2, "theta")] {
            let truth = Regime::Strong.truth();
            let scale = if j == 1 { truth.0.abs() } else { truth.1 };
            let errs = records
                .iter()
                .filter(|x| x.process == p && x.regime == Regime::Strong && x.edge == EdgeKind::Plus)
                .filter_map(|x| x.error(j))
                .collect();
            let (value, pass) = match median(errs) {
                Some(m) => (m.abs() / scale, Some(m.abs() < 0.25 * scale)),
                None => (f64::NAN, None),
            };
            out.push(StudyCheck {
                process: p,
                check: "a",
                parameter: name,
                value,
                threshold: 0.25,
                pass,
            });
        }
        for (j, name) in [(1usize, "beta1"), (2, "theta")] {
            let poisson = median_gap(records, p, Regime::Wide, EdgeKind::Poisson, j);
            let none = median_gap(records, p, Regime::Wide, EdgeKind::None, j);
            let (value, threshold, pass) = match (poisson, none) {
                (Some(a), Some(b)) => (a, b, Some(a < b)),
                _ => (f64::NAN, f64::NAN, None),
            };
            out.push(StudyCheck {
                process: p,
                check: "b",
                parameter: name,
                value,
                threshold,
                pass,
            });
        }
        for (j, name) in [(3usize, "sigmaZ"), (4, "rhoZ")] {
            for &r in &design.regimes {
                let errs = records
                    .iter()
                    .filter(|x| x.process == p && x.regime == r && x.edge == EdgeKind::Plus)
                    .filter_map(|x| x.error(j))
                    .collect();
                out.push(StudyCheck {
                    process: p,
                    check: match r {
                        Regime::Estimated => "c_estimated",
                        Regime::Strong => "c_strong",
                        Regime::Wide => "c_wide",
                    },
                    parameter: name,
                    value: median(errs).unwrap_or(f64::NAN),
                    threshold: f64::NAN,
                    pass: None,
                });
            }
        }
    }
    out
}

fn header(meta: &[(String, String)]) -> String {
    let mut s = String::new();
    for (k, v) in meta {
        let _ = writeln!(s, "# {k}={v}");
    }
    s
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".into(), |x| format!("{x}"))
}

/// Writes `replicates.csv`, `error_quantiles.csv`, `checks.csv` and `truth.csv` into `dir`.
pub fn write_report(report: &StudyReport, dir: &Path, meta: &[(String, String)]) -> Result<Vec<PathBuf>> {
    let head = header(meta);
    let mut files = Vec::new();

    let mut s = head.clone();
    s.push_str("process,regime,edge,replicate,n_parents,n_children,parameter,truth,mean,sd,error,acceptance,newton_failures,status\n");
    for r in &report.records {
        for (j, name) in STUDY_PARAMS.iter().enumerate() {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                r.process.label(),
                r.regime.label(),
                r.edge.label(),
                r.replicate,
                r.n_parents,
                r.n_children,
                name,
                r.truth[j],
                fmt_opt(r.means.map(|m| m[j])),
                fmt_opt(r.sd.map(|m| m[j])),
                fmt_opt(r.error(j)),
                r.acceptance,
                r.newton_failures,
                r.status
            );
        }
    }
    let p = dir.join("replicates.csv");
    std::fs::write(&p, s)?;
    files.push(p);

    let probs = [0.05, 0.25, 0.5, 0.75, 0.95];
    let mut s = head.clone();
    s.push_str("process,regime,edge,parameter,n,q05,q25,q50,q75,q95\n");
    let d = &report.design;
    for &pr in &d.processes {
        for &rg in &d.regimes {
            for &e in &d.edges {
                for (j, name) in STUDY_PARAMS.iter().enumerate() {
                    let mut errs: Vec<f64> = report
                        .records
                        .iter()
                        .filter(|x| x.process == pr && x.regime == rg && x.edge == e)
                        .filter_map(|x| x.error(j))
                        .collect();
                    errs.sort_by(f64::total_cmp);
                    let qs: Vec<String> = probs
                        .iter()
                        .map(|&q| if errs.is_empty() { "NA".into() } else { format!("{}", quantile(&errs, q)) })
                        .collect();
                    let _ = writeln!(
                        s,
                        "{},{},{},{},{},{}",
                        pr.label(),
                        rg.label(),
                        e.label(),
                        name,
                        errs.len(),
                        qs.join(",")
                    );
                }
            }
        }
    }
    let p = dir.join("error_quantiles.csv");
    std::fs::write(&p, s)?;
    files.push(p);

    let mut s = head.clone();
    s.push_str("process,check,parameter,value,threshold,pass\n");
    for c in &report.checks {
        let pass = match c.pass {
            Some(true) => "PASS",
            Some(false) => "FAIL",
            None => "reported",
        };
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            c.process.label(),
            c.check,
            c.parameter,
            c.value,
            c.threshold,
            pass
        );
    }
    let p = dir.join("checks.csv");
    std::fs::write(&p, s)?;
    files.push(p);

    let mut s = head;
    s.push_str("process,regime,parameter,value\n");
    for (pr, rg, t) in &report.truths {
        for (name, v) in STUDY_PARAMS.iter().zip(natural(t)) {
            let _ = writeln!(s, "{},{},{},{}", pr.label(), rg.label(), name, v);
        }
    }
    let p = dir.join("truth.csv");
    std::fs::write(&p, s)?;
    files.push(p);
    Ok(files)
}
