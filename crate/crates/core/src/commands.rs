//! Command implementations behind the `coxfield` binary.
//!
//! Each command writes into the output directory and records every file in
//! `manifest.txt`. All randomness is derived from the run seed and a task index.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::config::{EdgeKind, LoadedConfig, ParentProcess, PlotSpec};
use crate::edge::{expected_exterior_field, EdgeMode, MarkDistribution};
use crate::error::{Error, Result};
use crate::geometry::{bin_points, discretize, PointPattern, Window};
use crate::influence::{influence_field, FieldKind, DEFAULT_CUTOFF};
use crate::likelihood::Replicate;
use crate::mcmc::{
    effective_sample_size, read_chain, run_posterior_chain, summarize, write_chain, Chain, ChainSettings,
    ParamLayout, PosteriorTarget, SUMMARY_PROBS,
};
use crate::pool::{default_workers, par_map, stream_id};
use crate::simulate::{
    pilot_field, posterior_predictive, sample_lgcp, sample_poisson, sample_strauss, stream_rng, tune_beta0,
};
use crate::study::{run_study, write_report, StudyDesign};
use crate::summaries::{
    cross_l12, empty_space_f, erl_envelope, l_function, nn_distance_g, r_grid, Statistic, SummaryCurve,
};

/// Posterior predictive simulations drawn per task.
const SIM_CHUNK: usize = 25;

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Mode {
    Simulate,
    Fit,
    Envelope,
    Edgefield,
    Experiment,
}

impl Mode {
    pub fn label(&self) -> &'static str {
        match self {
            Mode::Simulate => "simulate",
            Mode::Fit => "fit",
            Mode::Envelope => "envelope",
            Mode::Edgefield => "edgefield",
            Mode::Experiment => "experiment",
        }
    }
}

pub struct Context {
    pub loaded: LoadedConfig,
    pub mode: Mode,
    pub seed: u64,
    pub out: PathBuf,
    pub workers: usize,
}

impl Context {
    pub fn new(loaded: LoadedConfig, mode: Mode, seed: Option<u64>, out: Option<&Path>) -> Self {
        Self {
            seed: loaded.seed(seed),
            out: loaded.out_dir(out),
            loaded,
            mode,
            workers: default_workers(),
        }
    }

    /// Mode, seed and the configuration text, one entry per non-blank line.
    pub fn meta(&self) -> Vec<(String, String)> {
        let mut m = vec![
            ("mode".to_string(), self.mode.label().to_string()),
            ("seed".to_string(), self.seed.to_string()),
        ];
        for line in self.loaded.text.lines() {
            let t = line.trim();
            if !t.is_empty() && !t.starts_with('#') {
                m.push(("config".into(), t.to_string()));
            }
        }
        m
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        self.loaded.resolve(p)
    }
}

/// Collects output paths and writes the manifest.
struct Collector {
    dir: PathBuf,
    files: Vec<PathBuf>,
}

impl Collector {
    fn new(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)
            .map_err(|e| Error::Config(format!("cannot create output directory {}: {e}", dir.display())))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn add(&mut self, p: PathBuf) {
        self.files.push(p);
    }

    fn finish(mut self, meta: &[(String, String)]) -> Result<Vec<PathBuf>> {
        let mut s = String::new();
        for (k, v) in meta {
            let _ = writeln!(s, "# {k}={v}");
        }
        for f in &self.files {
            let rel = f.strip_prefix(&self.dir).unwrap_or(f);
            let _ = writeln!(s, "{}", rel.display());
        }
        let m = self.path("manifest.txt");
        std::fs::write(&m, s)?;
        self.files.push(m);
        Ok(self.files)
    }
}

pub fn run(ctx: &Context) -> Result<Vec<PathBuf>> {
    log::info!("{} seed={} out={}", ctx.mode.label(), ctx.seed, ctx.out.display());
    let mut col = Collector::new(&ctx.out)?;
    match ctx.mode {
        Mode::Simulate => cmd_simulate(ctx, &mut col)?,
        Mode::Fit => cmd_fit(ctx, &mut col)?,
        Mode::Envelope => cmd_envelope(ctx, &mut col)?,
        Mode::Edgefield => cmd_edgefield(ctx, &mut col)?,
        Mode::Experiment => cmd_experiment(ctx, &mut col)?,
    }
    col.finish(&ctx.meta())
}

fn sanitize(id: &str) -> Result<&str> {
    if id.is_empty() || !id.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
        return Err(Error::Config(format!(
            "plot id '{id}' must be nonempty and use only letters, digits, '_' or '-'"
        )));
    }
    Ok(id)
}

fn simulate_parents<R: rand::Rng + ?Sized>(ctx: &Context, ext: &Window, rng: &mut R) -> Result<PointPattern> {
    let s = &ctx.loaded.config.simulate;
    match s.parents {
        ParentProcess::Poisson => sample_poisson(s.parent_intensity, ext, rng),
        ParentProcess::Strauss => sample_strauss(&s.strauss, ext, rng),
    }
}

/// Parent patterns on the window grown by the margin, children on the window from the full parents.
fn cmd_simulate(ctx: &Context, col: &mut Collector) -> Result<()> {
    let cfg = &ctx.loaded.config;
    let s = &cfg.simulate;
    s.validate()?;
    if s.replicates == 0 {
        return Err(Error::Config("simulate.replicates must be at least 1".into()));
    }
    let w = cfg.window.window()?;
    let ext = w.dilate(s.ext_margin)?;
    let mut params = cfg.model.params(1)?;
    if params.kernel.requires_marks() {
        return Err(Error::Config("simulated parents are unmarked; choose an unmarked kernel".into()));
    }
    if let Some(target) = s.target_count {
        let pilots = par_map(s.pilot, ctx.workers, |i| {
            let mut rng = stream_rng(ctx.seed, stream_id(&[10, i as u64]));
            let xe = simulate_parents(ctx, &ext, &mut rng)?;
            pilot_field(&params.kernel, &xe.restrict(w), &w, s.sim_cell, &EdgeMode::PlusSampling { parents: xe })
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        params.beta0 = vec![tune_beta0(target, params.beta1, params.field.sigma2, &pilots)?];
        log::info!("tuned beta0 = {:.4}", params.beta0[0]);
    }
    let meta = ctx.meta();
    let sims = par_map(s.replicates, ctx.workers, |r| -> Result<(PointPattern, PointPattern)> {
        let mut rng = stream_rng(ctx.seed, stream_id(&[11, r as u64]));
        let xe = simulate_parents(ctx, &ext, &mut rng)?;
        let x = xe.restrict(w);
        let y = sample_lgcp(&params, &x, &w, s.sim_cell, &EdgeMode::PlusSampling { parents: xe.clone() }, &mut rng)?;
        Ok((xe, y))
    });
    let mut plots = String::from("# [[plots]] entries for the simulated patterns\n");
    for (r, sim) in sims.into_iter().enumerate() {
        let (xe, y) = sim?;
        let id = format!("sim{:03}", r + 1);
        let x = xe.restrict(w);
        let mut m = meta.clone();
        m.push(("plot".into(), id.clone()));
        for (suffix, pat) in [("parents", &x), ("parents_ext", &xe), ("children", &y)] {
            let p = col.path(&format!("{id}_{suffix}.csv"));
            pat.write_csv(&p, &m)?;
            col.add(p);
        }
        let _ = write!(
            plots,
            "\n[[plots]]\nid = \"{id}\"\nparents = \"{id}_parents.csv\"\nchildren = \"{id}_children.csv\"\next_parents = \"{id}_parents_ext.csv\"\next_window = {{ x_min = {:?}, x_max = {:?}, y_min = {:?}, y_max = {:?} }}\n",
            ext.x_min, ext.x_max, ext.y_min, ext.y_max
        );
        log::info!("{id}: {} parents ({} on the extended window), {} children", x.len(), xe.len(), y.len());
    }
    let p = col.path("plots.toml");
    std::fs::write(&p, plots)?;
    col.add(p);

    let mut t = String::new();
    for (k, v) in &meta {
        let _ = writeln!(t, "# {k}={v}");
    }
    t.push_str("parameter,value\n");
    let layout = ParamLayout::new(params.kernel.family(), vec!["sim".into()]);
    for (name, v) in layout.names().iter().zip(layout.natural(&params)) {
        let _ = writeln!(t, "{},{}", name.strip_suffix("_sim").unwrap_or(name), v);
    }
    let p = col.path("truth.csv");
    std::fs::write(&p, t)?;
    col.add(p);
    Ok(())
}

struct Plot {
    id: String,
    parents: PointPattern,
    children: PointPattern,
    edge: EdgeMode,
}

fn load_plots(ctx: &Context) -> Result<Vec<Plot>> {
    let cfg = &ctx.loaded.config;
    if cfg.plots.is_empty() {
        return Err(Error::Config("no [[plots]] configured".into()));
    }
    let w = cfg.window.window()?;
    let mut out: Vec<Plot> = Vec::with_capacity(cfg.plots.len());
    for spec in &cfg.plots {
        let id = sanitize(&spec.id)?.to_string();
        if out.iter().any(|p| p.id == id) {
            return Err(Error::Config(format!("duplicate plot id '{id}'")));
        }
        let parents = PointPattern::read_csv(&ctx.resolve(&spec.parents), w)?;
        let children = PointPattern::read_csv(&ctx.resolve(&spec.children), w)?;
        let edge = plot_edge(ctx, spec, &parents, w)?;
        out.push(Plot {
            id,
            parents,
            children,
            edge,
        });
    }
    Ok(out)
}

fn plot_edge(ctx: &Context, spec: &PlotSpec, parents: &PointPattern, w: Window) -> Result<EdgeMode> {
    let cfg = &ctx.loaded.config;
    Ok(match cfg.edge.mode {
        EdgeKind::None => EdgeMode::NoCorrection,
        EdgeKind::Poisson => match cfg.edge.intensity {
            Some(l) => EdgeMode::poisson(l, MarkDistribution::from_pattern(parents))
                .map_err(|e| Error::Config(format!("edge.intensity: {e}")))?,
            None => EdgeMode::poisson_from(parents)
                .map_err(|e| Error::Data(format!("plot {}: {e}", spec.id)))?,
        },
        EdgeKind::Plus => {
            let path = spec.ext_parents.as_ref().ok_or_else(|| {
                Error::Config(format!("plot {}: plus sampling needs ext_parents", spec.id))
            })?;
            let ext_w = match &spec.ext_window {
                Some(e) => e.window()?,
                None => w.dilate(cfg.simulate.ext_margin)?,
            };
            EdgeMode::PlusSampling {
                parents: PointPattern::read_csv(&ctx.resolve(path), ext_w)?,
            }
        }
    })
}

fn fmt_row(vals: impl IntoIterator<Item = f64>) -> String {
    vals.into_iter().map(|v| format!("{v}")).collect::<Vec<_>>().join(",")
}

fn cmd_fit(ctx: &Context, col: &mut Collector) -> Result<()> {
    let cfg = &ctx.loaded.config;
    let settings = cfg.chain.settings()?;
    cfg.priors.validate()?;
    let plots = load_plots(ctx)?;
    let grid = discretize(cfg.window.window()?, cfg.model.fit_cell)?;
    let reps = plots
        .iter()
        .map(|p| Replicate::new(p.id.clone(), bin_points(&p.children, &grid)?, p.parents.clone(), p.edge.clone()))
        .collect::<Result<Vec<_>>>()?;
    let init = cfg.model.params(reps.len())?;
    let chains = par_map(cfg.chain.n_chains, ctx.workers, |c| {
        let target = PosteriorTarget::new(&reps, cfg.priors, cfg.model.kernel);
        run_posterior_chain(&target, &init, &settings, stream_id(&[ctx.seed, 20, c as u64]))
    })
    .into_iter()
    .collect::<Result<Vec<Chain>>>()?;

    let meta = ctx.meta();
    for (c, chain) in chains.iter().enumerate() {
        log::info!(
            "chain {c}: acceptance {:.3}, {} Newton failures",
            chain.acceptance_rate(),
            chain.newton_failures
        );
        let mut m = meta.clone();
        m.push(("chain".into(), c.to_string()));
        let p = col.path(&format!("chain_{c}.csv"));
        write_chain(chain, &p, &m)?;
        col.add(p);
    }

    let mut pooled = chains[0].clone();
    for ch in &chains[1..] {
        pooled.samples.extend(ch.samples.iter().cloned());
        pooled.log_post.extend(&ch.log_post);
    }
    let mut summary = summarize(&pooled)?;
    for (j, s) in summary.iter_mut().enumerate() {
        s.ess = chains
            .iter()
            .map(|ch| effective_sample_size(&ch.samples.iter().map(|r| r[j]).collect::<Vec<_>>()))
            .sum();
    }
    let mut t = String::new();
    for (k, v) in &meta {
        let _ = writeln!(t, "# {k}={v}");
    }
    let acc: Vec<String> = chains.iter().map(|c| format!("{:.4}", c.acceptance_rate())).collect();
    let _ = writeln!(t, "# n_chains={} draws={} acceptance={}", chains.len(), pooled.samples.len(), acc.join(" "));
    let qn: Vec<String> = SUMMARY_PROBS.iter().map(|p| format!("q{:02}", (p * 100.0).round() as u32)).collect();
    let _ = writeln!(t, "parameter,mean,{},ess", qn.join(","));
    for s in &summary {
        let _ = writeln!(t, "{},{},{},{}", s.name, s.mean, fmt_row(s.quantiles), s.ess);
    }
    let p = col.path("summary.csv");
    std::fs::write(&p, t)?;
    col.add(p);
    Ok(())
}

fn load_chain(ctx: &Context, layout: &ParamLayout) -> Result<Chain> {
    let cfg = &ctx.loaded.config;
    let path = match &cfg.envelope.chain {
        Some(p) => ctx.resolve(p),
        None => ctx.out.join("chain_0.csv"),
    };
    if !path.exists() {
        return Err(Error::Config(format!(
            "chain file {} not found; set envelope.chain",
            path.display()
        )));
    }
    let (names, rows) = read_chain(&path)?;
    let mut expect = layout.names();
    expect.push("logpost".into());
    if names != expect {
        return Err(Error::Data(format!(
            "{}: columns [{}] do not match the configured model [{}]",
            path.display(),
            names.join(","),
            expect.join(",")
        )));
    }
    if rows.is_empty() {
        return Err(Error::Data(format!("{}: chain has no draws", path.display())));
    }
    let d = layout.dim();
    Ok(Chain {
        names: layout.names(),
        samples: rows.iter().map(|r| r[..d].to_vec()).collect(),
        log_post: rows.iter().map(|r| r[d]).collect(),
        accepted: 0,
        proposals: 0,
        mean_accept_prob: f64::NAN,
        seed: 0,
        settings: ChainSettings::default(),
        newton_failures: 0,
        last: Vec::new(),
    })
}

fn curve(stat: Statistic, parents: &PointPattern, children: &PointPattern, r: &[f64], spacing: f64) -> Result<SummaryCurve> {
    match stat {
        Statistic::L => l_function(children, r),
        Statistic::F => empty_space_f(children, r, spacing),
        Statistic::G => nn_distance_g(children, r),
        Statistic::L12 => cross_l12(parents, children, r),
    }
}

fn cmd_envelope(ctx: &Context, col: &mut Collector) -> Result<()> {
    let cfg = &ctx.loaded.config;
    let env = &cfg.envelope;
    if env.statistics.is_empty() {
        return Err(Error::Config("envelope.statistics is empty".into()));
    }
    if !(env.level > 0.0 && env.level < 1.0) {
        return Err(Error::Config("envelope.level must lie in (0, 1)".into()));
    }
    let r = r_grid(env.r_max, env.r_step).map_err(|e| Error::Config(format!("envelope: {e}")))?;
    let plots = load_plots(ctx)?;
    let w = cfg.window.window()?;
    let layout = ParamLayout::new(cfg.model.kernel, plots.iter().map(|p| p.id.clone()).collect());
    let chain = load_chain(ctx, &layout)?;
    let meta = ctx.meta();
    let stats = &env.statistics;
    let mut gof = String::new();
    for (k, v) in &meta {
        let _ = writeln!(gof, "# {k}={v}");
    }
    gof.push_str("plot,statistic,pass,erl_rank,p_value,n_sims,level\n");

    for (k, plot) in plots.iter().enumerate() {
        let data = stats
            .iter()
            .map(|&s| curve(s, &plot.parents, &plot.children, &r, env.f_spacing))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| Error::Data(format!("plot {}: {e}", plot.id)))?;
        let n_chunks = env.n_sims.div_ceil(SIM_CHUNK);
        let chunks = par_map(n_chunks, ctx.workers, |c| -> Result<Vec<Vec<SummaryCurve>>> {
            let m = SIM_CHUNK.min(env.n_sims - c * SIM_CHUNK);
            let mut rng = stream_rng(ctx.seed, stream_id(&[30, k as u64, c as u64]));
            let pats = posterior_predictive(&chain, &layout, k, &plot.parents, &w, m, env.sim_cell, &plot.edge, &mut rng)?;
            pats.iter()
                .map(|y| {
                    stats
                        .iter()
                        .map(|&s| curve(s, &plot.parents, y, &r, env.f_spacing))
                        .collect::<Result<Vec<_>>>()
                })
                .collect()
        });
        let mut sims: Vec<Vec<SummaryCurve>> = vec![Vec::with_capacity(env.n_sims); stats.len()];
        for chunk in chunks {
            for per_sim in chunk? {
                for (i, c) in per_sim.into_iter().enumerate() {
                    sims[i].push(c);
                }
            }
        }
        for (i, &stat) in stats.iter().enumerate() {
            let res = erl_envelope(&data[i], &sims[i], env.level)?;
            log::info!("{} {stat}: pass={} p={:.4}", plot.id, res.pass, res.p_value);
            let _ = writeln!(
                gof,
                "{},{},{},{},{},{},{}",
                plot.id,
                stat,
                if res.pass { "PASS" } else { "FAIL" },
                res.data_rank,
                res.p_value,
                res.n_sims,
                res.level
            );
            let mut m = meta.clone();
            m.push(("plot".into(), plot.id.clone()));
            m.push(("sim_cell".into(), env.sim_cell.to_string()));
            let p = col.path(&format!("envelope_{}_{stat}.csv", plot.id));
            res.write(&p, &m)?;
            col.add(p);
        }
    }
    let p = col.path("gof.csv");
    std::fs::write(&p, gof)?;
    col.add(p);
    Ok(())
}

fn cmd_edgefield(ctx: &Context, col: &mut Collector) -> Result<()> {
    let cfg = &ctx.loaded.config;
    let w = cfg.window.window()?;
    let kernel = cfg.model.kernel_spec()?;
    let grid = discretize(w, cfg.edgefield.cell.unwrap_or(cfg.model.fit_cell))?;
    let sources: Vec<(String, PathBuf)> = match &cfg.edgefield.parents {
        Some(p) => vec![("field".into(), ctx.resolve(p))],
        None if !cfg.plots.is_empty() => cfg
            .plots
            .iter()
            .map(|s| Ok((sanitize(&s.id)?.to_string(), ctx.resolve(&s.parents))))
            .collect::<Result<_>>()?,
        None => return Err(Error::Config("edgefield needs edgefield.parents or [[plots]]".into())),
    };
    let meta = ctx.meta();
    for (id, path) in sources {
        let parents = PointPattern::read_csv(&path, w)?;
        let lambda = match cfg.edge.intensity {
            Some(l) => l,
            None => parents.len() as f64 / w.area(),
        };
        if lambda == 0.0 && !matches!(kernel, crate::influence::KernelSpec::NoInfluence) {
            return Err(Error::Data(format!(
                "{}: cannot estimate parent intensity from an empty pattern; set edge.intensity",
                path.display()
            )));
        }
        let observed = influence_field(&kernel, &parents, &grid, DEFAULT_CUTOFF)?;
        let exterior = expected_exterior_field(&kernel, lambda, &MarkDistribution::from_pattern(&parents), &grid)?;
        let mut corrected = observed.clone();
        for (v, e) in corrected.values.iter_mut().zip(&exterior.values) {
            *v += e;
        }
        corrected.kind = FieldKind::Corrected;
        corrected.edge = "poisson".into();
        let mut m = meta.clone();
        m.push(("plot".into(), id.clone()));
        m.push(("intensity".into(), lambda.to_string()));
        for (name, f) in [("observed", &observed), ("exterior", &exterior), ("corrected", &corrected)] {
            let p = col.path(&format!("edgefield_{id}_{name}.csv"));
            f.write_matrix(&p, &m)?;
            col.add(p);
        }
    }
    Ok(())
}

fn cmd_experiment(ctx: &Context, col: &mut Collector) -> Result<()> {
    let design = StudyDesign::from_config(&ctx.loaded.config)?;
    let report = run_study(&design, ctx.seed, ctx.workers)?;
    let ok = report.records.iter().filter(|r| r.means.is_some()).count();
    log::info!("{ok} of {} fits succeeded", report.records.len());
    for f in write_report(&report, &ctx.out, &ctx.meta())? {
        col.add(f);
    }
    if ok == 0 {
        return Err(Error::Numeric("every fit in the study failed".into()));
    }
    Ok(())
}
