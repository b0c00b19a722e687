//! Run configuration, read from a TOML file.
//!
//! Every section is optional; commands check the parts they use. Relative paths
//! are resolved against the directory holding the configuration file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Window;
use crate::gmrf::MaternParams;
use crate::influence::{KernelFamily, KernelSpec};
use crate::likelihood::{ModelParams, PriorSpec};
use crate::mcmc::ChainSettings;
use crate::simulate::StraussParams;
use crate::summaries::{Statistic, DEFAULT_F_SPACING, DEFAULT_R_MAX, DEFAULT_R_STEP};

/// Seed used when neither the command line nor the file gives one.
pub const DEFAULT_SEED: u64 = 1;
/// Output directory used when nothing else is configured.
pub const DEFAULT_OUT: &str = "coxfield-out";
/// Environment variable overriding the output directory from the file.
pub const OUT_ENV: &str = "COXFIELD_OUT";

#[derive(Clone, Debug, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub window: WindowSpec,
    #[serde(default)]
    pub model: ModelSpec,
    #[serde(default)]
    pub edge: EdgeSpec,
    #[serde(default)]
    pub priors: PriorSpec,
    #[serde(default)]
    pub chain: ChainSpec,
    #[serde(default)]
    pub simulate: SimulateSpec,
    #[serde(default)]
    pub plots: Vec<PlotSpec>,
    #[serde(default)]
    pub envelope: EnvelopeSpec,
    #[serde(default)]
    pub edgefield: EdgefieldSpec,
    #[serde(default)]
    pub experiment: ExperimentSpec,
}

#[derive(Clone, Copy, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct WindowSpec {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl Default for WindowSpec {
    fn default() -> Self {
        Self {
            x_min: 0.0,
            x_max: 40.0,
            y_min: 0.0,
            y_max: 40.0,
        }
    }
}

impl WindowSpec {
    pub fn window(&self) -> Result<Window> {
        Window::new(self.x_min, self.x_max, self.y_min, self.y_max)
            .map_err(|e| Error::Config(format!("window: {e}")))
    }
}

/// Kernel family, parameter values (true values for simulation, starting values
/// for fitting) and the fitting grid.
#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub kernel: KernelFamily,
    /// One value per plot, or a single value shared by all plots.
    pub beta0: Vec<f64>,
    pub beta1: f64,
    pub theta: f64,
    pub delta: Option<f64>,
    pub alpha: Option<f64>,
    pub sigma: f64,
    pub range: f64,
    pub fit_cell: f64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            kernel: KernelFamily::Gaussian,
            beta0: vec![0.0],
            beta1: -0.7,
            theta: 2.1,
            delta: None,
            alpha: None,
            sigma: 1.6,
            range: 2.6,
            fit_cell: 1.0,
        }
    }
}

impl ModelSpec {
    pub fn kernel_spec(&self) -> Result<KernelSpec> {
        let vals = self
            .kernel
            .param_names()
            .iter()
            .map(|name| match *name {
                "theta" => Ok(self.theta),
                "delta" => self.delta.ok_or_else(|| Error::Config(format!("model.delta is required for kernel {}", self.kernel))),
                "alpha" => self.alpha.ok_or_else(|| Error::Config(format!("model.alpha is required for kernel {}", self.kernel))),
                other => Err(Error::Internal(format!("unknown kernel parameter {other}"))),
            })
            .collect::<Result<Vec<f64>>>()?;
        self.kernel
            .with_params(&vals)
            .map_err(|e| Error::Config(format!("model: {e}")))
    }

    pub fn field(&self) -> Result<MaternParams> {
        MaternParams::from_sd(self.sigma, self.range).map_err(|e| Error::Config(format!("model: {e}")))
    }

    /// Parameters for `n_plots` replicates, broadcasting a single intercept.
    pub fn params(&self, n_plots: usize) -> Result<ModelParams> {
        let beta0 = match self.beta0.len() {
            1 => vec![self.beta0[0]; n_plots],
            k if k == n_plots => self.beta0.clone(),
            k => return Err(Error::Config(format!("model.beta0 has {k} values for {n_plots} plots"))),
        };
        let p = ModelParams {
            beta0,
            beta1: if self.kernel == KernelFamily::None { 0.0 } else { self.beta1 },
            kernel: self.kernel_spec()?,
            field: self.field()?,
        };
        p.validate().map_err(|e| Error::Config(format!("model: {e}")))?;
        Ok(p)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Deserialize, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeKind {
    None,
    Poisson,
    Plus,
}

impl EdgeKind {
    pub fn label(&self) -> &'static str {
        match self {
            EdgeKind::None => "none",
            EdgeKind::Poisson => "poisson",
            EdgeKind::Plus => "plus",
        }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct EdgeSpec {
    pub mode: EdgeKind,
    /// Exterior parent intensity; estimated per plot as `n / |W|` when absent.
    pub intensity: Option<f64>,
}

impl Default for EdgeSpec {
    fn default() -> Self {
        Self {
            mode: EdgeKind::Poisson,
            intensity: None,
        }
    }
}

#[derive(Clone, Copy, Debug, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChainSpec {
    pub n_iter: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub n_chains: usize,
    pub target_accept: f64,
    pub gamma: f64,
    pub init_scale: f64,
    pub adapt: bool,
}

impl Default for ChainSpec {
    fn default() -> Self {
        let s = ChainSettings::default();
        Self {
            n_iter: s.n_iter,
            burn_in: s.burn_in,
            thin: s.thin,
            n_chains: 1,
            target_accept: s.target_accept,
            gamma: s.gamma,
            init_scale: s.init_scale,
            adapt: s.adapt,
        }
    }
}

impl ChainSpec {
    pub fn settings(&self) -> Result<ChainSettings> {
        let s = ChainSettings {
            n_iter: self.n_iter,
            burn_in: self.burn_in,
            thin: self.thin,
            target_accept: self.target_accept,
            gamma: self.gamma,
            init_scale: self.init_scale,
            adapt: self.adapt,
        };
        s.validate()?;
        if self.n_chains == 0 {
            return Err(Error::Config("chain.n_chains must be at least 1".into()));
        }
        Ok(s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Deserialize, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ParentProcess {
    Poisson,
    Strauss,
}

impl ParentProcess {
    pub fn label(&self) -> &'static str {
        match self {
            ParentProcess::Poisson => "poisson",
            ParentProcess::Strauss => "strauss",
        }
    }
}

/// Data generation: parent process on the window grown by `ext_margin`, then
/// children from the model at `sim_cell` resolution.
#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateSpec {
    pub parents: ParentProcess,
    pub parent_intensity: f64,
    pub strauss: StraussParams,
    pub ext_margin: f64,
    pub sim_cell: f64,
    /// Expected child count; when set, the intercept is tuned instead of taken from
    /// the model. The experiment always tunes, to 600 when unset.
    pub target_count: Option<f64>,
    /// Parent patterns used to tune the intercept.
    pub pilot: usize,
    pub replicates: usize,
}

impl Default for SimulateSpec {
    fn default() -> Self {
        Self {
            parents: ParentProcess::Poisson,
            parent_intensity: 0.0375,
            strauss: StraussParams::new(0.06, 0.1, 2.0).expect("valid default"),
            ext_margin: 20.0,
            sim_cell: 0.1,
            target_count: None,
            pilot: 20,
            replicates: 1,
        }
    }
}

impl SimulateSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.parent_intensity > 0.0) {
            return Err(Error::Config("simulate.parent_intensity must be positive".into()));
        }
        self.strauss.validate()?;
        if !(self.ext_margin > 0.0) {
            return Err(Error::Config("simulate.ext_margin must be positive".into()));
        }
        if !(self.sim_cell > 0.0) {
            return Err(Error::Config("simulate.sim_cell must be positive".into()));
        }
        if matches!(self.target_count, Some(t) if !(t > 0.0)) {
            return Err(Error::Config("simulate.target_count must be positive".into()));
        }
        if self.target_count.is_some() && self.pilot == 0 {
            return Err(Error::Config("simulate.pilot must be at least 1 when tuning the intercept".into()));
        }
        Ok(())
    }
}

/// One observed plot: parent and child pattern files, and optionally the parents on a larger window.
#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct PlotSpec {
    pub id: String,
    pub parents: PathBuf,
    pub children: PathBuf,
    pub ext_parents: Option<PathBuf>,
    pub ext_window: Option<WindowSpec>,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvelopeSpec {
    pub chain: Option<PathBuf>,
    pub statistics: Vec<Statistic>,
    pub n_sims: usize,
    pub sim_cell: f64,
    pub level: f64,
    pub r_max: f64,
    pub r_step: f64,
    pub f_spacing: f64,
}

impl Default for EnvelopeSpec {
    fn default() -> Self {
        Self {
            chain: None,
            statistics: Statistic::ALL.to_vec(),
            n_sims: 999,
            sim_cell: 0.2,
            level: 0.95,
            r_max: DEFAULT_R_MAX,
            r_step: DEFAULT_R_STEP,
            f_spacing: DEFAULT_F_SPACING,
        }
    }
}

#[derive(Clone, Debug, Default, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct EdgefieldSpec {
    pub parents: Option<PathBuf>,
    /// Grid cell size; the model fitting cell when absent.
    pub cell: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Deserialize, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Estimated,
    Strong,
    Wide,
}

impl Regime {
    pub fn label(&self) -> &'static str {
        match self {
            Regime::Estimated => "estimated",
            Regime::Strong => "strong",
            Regime::Wide => "wide",
        }
    }

    /// True `(β_1, θ)`.
    pub fn truth(&self) -> (f64, f64) {
        match self {
            Regime::Estimated => (-0.7, 2.1),
            Regime::Strong => (-3.0, 2.1),
            Regime::Wide => (-0.7, 6.0),
        }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    pub replicates: usize,
    pub processes: Vec<ParentProcess>,
    pub regimes: Vec<Regime>,
    pub edges: Vec<EdgeKind>,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            replicates: 20,
            processes: vec![ParentProcess::Poisson, ParentProcess::Strauss],
            regimes: vec![Regime::Estimated, Regime::Strong, Regime::Wide],
            edges: vec![EdgeKind::None, EdgeKind::Poisson, EdgeKind::Plus],
        }
    }
}

/// A parsed configuration with the text it came from.
#[derive(Clone, Debug)]
pub struct LoadedConfig {
    pub config: RunConfig,
    pub text: String,
    pub base_dir: PathBuf,
}

impl LoadedConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read configuration {}: {e}", path.display())))?;
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_str(&text, base_dir).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn from_str(text: &str, base_dir: PathBuf) -> Result<Self> {
        let config: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.priors.validate()?;
        config.window.window()?;
        Ok(Self {
            config,
            text: text.to_string(),
            base_dir,
        })
    }

    /// Default configuration, echoed as its serialized form.
    pub fn defaults() -> Self {
        let config = RunConfig::default();
        let text = toml::to_string(&config).unwrap_or_default();
        Self {
            config,
            text,
            base_dir: PathBuf::new(),
        }
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// `cli` wins over the environment, which wins over the file.
    pub fn out_dir(&self, cli: Option<&Path>) -> PathBuf {
        if let Some(p) = cli {
            return p.to_path_buf();
        }
        if let Some(p) = std::env::var_os(OUT_ENV).filter(|v| !v.is_empty()) {
            return PathBuf::from(p);
        }
        match &self.config.out {
            Some(p) => self.resolve(p),
            None => PathBuf::from(DEFAULT_OUT),
        }
    }

    pub fn seed(&self, cli: Option<u64>) -> u64 {
        cli.or(self.config.seed).unwrap_or(DEFAULT_SEED)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c = LoadedConfig::from_str("", PathBuf::new()).unwrap();
        assert_eq!(c.config.window.window().unwrap(), Window::square(40.0).unwrap());
        assert_eq!(c.config.chain.settings().unwrap(), ChainSettings::default());
        assert_eq!(c.config.model.kernel_spec().unwrap(), KernelSpec::Gaussian { theta: 2.1 });
        assert_eq!(c.seed(None), DEFAULT_SEED);
        assert_eq!(c.seed(Some(9)), 9);
    }

    #[test]
    fn full_example_parses() {
        let text = r#"
seed = 7
out = "results"

[window]
x_min = 0.0
x_max = 20.0
y_min = 0.0
y_max = 10.0

[model]
kernel = "mark_full"
beta0 = [1.0, 2.0]
beta1 = -1.0
theta = 1.5
delta = 0.5
alpha = 0.3

[edge]
mode = "plus"

[priors.theta]
family = "gamma"
shape = 2.0
scale = 1.0

[chain]
n_iter = 500
burn_in = 100
thin = 2
n_chains = 2

[[plots]]
id = "a"
parents = "a_x.csv"
children = "a_y.csv"

[[plots]]
id = "b"
parents = "/abs/b_x.csv"
children = "b_y.csv"

[envelope]
statistics = ["L12", "G"]
n_sims = 99

[experiment]
replicates = 3
regimes = ["strong"]
"#;
        let c = LoadedConfig::from_str(text, PathBuf::from("/cfg")).unwrap();
        let cfg = &c.config;
        assert_eq!(c.seed(None), 7);
        assert_eq!(c.out_dir(Some(Path::new("x"))), PathBuf::from("x"));
        assert_eq!(cfg.plots.len(), 2);
        assert_eq!(c.resolve(&cfg.plots[0].parents), PathBuf::from("/cfg/a_x.csv"));
        assert_eq!(c.resolve(&cfg.plots[1].parents), PathBuf::from("/abs/b_x.csv"));
        assert_eq!(cfg.edge.mode, EdgeKind::Plus);
        let p = cfg.model.params(2).unwrap();
        assert_eq!(p.beta0, vec![1.0, 2.0]);
        assert_eq!(p.kernel, KernelSpec::MarkFull { theta: 1.5, delta: 0.5, alpha: 0.3 });
        assert!(cfg.model.params(3).is_err());
        assert_eq!(cfg.envelope.statistics, vec![Statistic::L12, Statistic::G]);
        assert_eq!(cfg.experiment.regimes, vec![Regime::Strong]);
        assert_eq!(cfg.chain.settings().unwrap().n_iter, 500);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(matches!(LoadedConfig::from_str("sed = 3", PathBuf::new()), Err(Error::Config(_))));
        assert!(matches!(
            LoadedConfig::from_str("[window]\nx_min = 5.0\nx_max = 1.0\ny_min = 0.0\ny_max = 1.0", PathBuf::new()),
            Err(Error::Config(_))
        ));
        let c = LoadedConfig::from_str("[chain]\nburn_in = 10\nn_iter = 5", PathBuf::new()).unwrap();
        assert!(c.config.chain.settings().is_err());
        let c = LoadedConfig::from_str("[model]\nkernel = \"mark_range\"", PathBuf::new()).unwrap();
        assert!(c.config.model.kernel_spec().is_err());
    }

    #[test]
    fn defaults_round_trip() {
        let d = LoadedConfig::defaults();
        let again = LoadedConfig::from_str(&d.text, PathBuf::new()).unwrap();
        assert_eq!(again.config.experiment.replicates, 20);
        assert_eq!(again.config.simulate.target_count, None);
        assert_eq!(again.config.simulate.sim_cell, 0.1);
    }
}
