use std::path::{Path, PathBuf};
use std::process::Command;

use coxfield::influence::InfluenceField;
use coxfield::mcmc::read_chain;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_coxfield"));
    c.env_remove("COXFIELD_OUT").env("RUST_LOG", "warn");
    c
}

fn run(dir: &Path, args: &[&str]) -> (i32, String) {
    let out = bin().current_dir(dir).args(args).output().unwrap();
    (out.status.code().unwrap_or(-1), String::from_utf8_lossy(&out.stderr).into_owned())
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

const SIM: &str = r#"
seed = 11
[window]
x_min = 0.0
x_max = 16.0
y_min = 0.0
y_max = 16.0
[model]
kernel = "gaussian"
beta0 = [0.5]
beta1 = -1.5
theta = 1.5
sigma = 0.8
range = 2.0
[simulate]
ext_margin = 8.0
sim_cell = 0.25
replicates = 2
"#;

fn fit_config(sim_dir: &str, extra: &str) -> String {
    format!(
        r#"
seed = 3
[window]
x_min = 0.0
x_max = 16.0
y_min = 0.0
y_max = 16.0
[model]
kernel = "gaussian"
beta0 = [0.5]
beta1 = -1.5
theta = 1.5
sigma = 0.8
range = 2.0
[chain]
n_iter = 60
burn_in = 20
thin = 2
{extra}
[[plots]]
id = "a"
parents = "{sim_dir}/sim001_parents.csv"
children = "{sim_dir}/sim001_children.csv"
ext_parents = "{sim_dir}/sim001_parents_ext.csv"
ext_window = {{ x_min = -8.0, x_max = 24.0, y_min = -8.0, y_max = 24.0 }}

[[plots]]
id = "b"
parents = "{sim_dir}/sim002_parents.csv"
children = "{sim_dir}/sim002_children.csv"
ext_parents = "{sim_dir}/sim002_parents_ext.csv"
ext_window = {{ x_min = -8.0, x_max = 24.0, y_min = -8.0, y_max = 24.0 }}
"#
    )
}

fn simulate(dir: &Path) {
    write(dir, "sim.toml", SIM);
    let (code, err) = run(dir, &["simulate", "--config", "sim.toml", "--out", "sim"]);
    assert_eq!(code, 0, "{err}");
}

fn manifest(dir: &Path) -> Vec<String> {
    std::fs::read_to_string(dir.join("manifest.txt"))
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(String::from)
        .collect()
}

#[test]
fn simulate_is_deterministic_and_echoes_config() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    simulate(d);
    let files = manifest(&d.join("sim"));
    assert_eq!(files.len(), 2 * 3 + 2);
    for f in &files {
        let text = std::fs::read_to_string(d.join("sim").join(f)).unwrap();
        if f.ends_with(".csv") {
            assert!(text.starts_with("# mode=simulate\n# seed=11\n"), "{f}");
            assert!(text.contains("# config=beta1 = -1.5\n"), "{f}");
        }
    }
    let (code, _) = run(d, &["simulate", "--config", "sim.toml", "--out", "again"]);
    assert_eq!(code, 0);
    for f in &files {
        assert_eq!(
            std::fs::read(d.join("sim").join(f)).unwrap(),
            std::fs::read(d.join("again").join(f)).unwrap(),
            "{f}"
        );
    }
    let (code, _) = run(d, &["simulate", "--config", "sim.toml", "--out", "other", "--seed", "12"]);
    assert_eq!(code, 0);
    assert_ne!(
        std::fs::read(d.join("sim/sim001_children.csv")).unwrap(),
        std::fs::read(d.join("other/sim001_children.csv")).unwrap()
    );
}

#[test]
fn output_directory_from_environment() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    write(d, "sim.toml", SIM);
    let out = bin()
        .current_dir(d)
        .env("COXFIELD_OUT", d.join("from_env"))
        .args(["simulate", "--config", "sim.toml"])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(d.join("from_env/manifest.txt").exists());
    // the command line still wins
    let out = bin()
        .current_dir(d)
        .env("COXFIELD_OUT", d.join("ignored"))
        .args(["simulate", "--config", "sim.toml", "--out", "cli"])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(d.join("cli/manifest.txt").exists() && !d.join("ignored").exists());
}

#[test]
fn fit_then_envelope() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    simulate(d);
    write(
        d,
        "fit.toml",
        &fit_config("sim", "n_chains = 2\n[edge]\nmode = \"plus\"\n[envelope]\nchain = \"fit/chain_0.csv\"\nn_sims = 99\nsim_cell = 0.5\nr_max = 3.0\nr_step = 0.1"),
    );
    let (code, err) = run(d, &["fit", "--config", "fit.toml", "--out", "fit"]);
    assert_eq!(code, 0, "{err}");
    let (names, rows) = read_chain(&d.join("fit/chain_0.csv")).unwrap();
    // two plots give two intercept columns
    assert_eq!(names.iter().filter(|n| n.starts_with("beta0_")).count(), 2);
    assert_eq!(&names[..2], &["beta0_a".to_string(), "beta0_b".to_string()]);
    assert_eq!(rows.len(), 20);
    let summary = std::fs::read_to_string(d.join("fit/summary.csv")).unwrap();
    assert!(summary.contains("parameter,mean,q05,q25,q50,q75,q95,ess"));
    assert!(summary.lines().any(|l| l.starts_with("theta,")));

    let (code, _) = run(d, &["fit", "--config", "fit.toml", "--out", "fit2"]);
    assert_eq!(code, 0);
    for c in ["chain_0.csv", "chain_1.csv", "summary.csv"] {
        assert_eq!(
            std::fs::read(d.join("fit").join(c)).unwrap(),
            std::fs::read(d.join("fit2").join(c)).unwrap(),
            "{c}"
        );
    }
    assert_ne!(
        std::fs::read(d.join("fit/chain_0.csv")).unwrap(),
        std::fs::read(d.join("fit/chain_1.csv")).unwrap()
    );

    let (code, err) = run(d, &["envelope", "--config", "fit.toml", "--out", "env"]);
    assert_eq!(code, 0, "{err}");
    let gof = std::fs::read_to_string(d.join("env/gof.csv")).unwrap();
    let rows: Vec<&str> = gof.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows[0], "plot,statistic,pass,erl_rank,p_value,n_sims,level");
    assert_eq!(rows.len(), 1 + 2 * 4);
    assert!(rows[1..].iter().all(|r| r.contains(",99,0.95")));
    let env = std::fs::read_to_string(d.join("env/envelope_b_L12.csv")).unwrap();
    assert!(env.contains("r,lo,central,hi,data\n"));
    assert!(env.starts_with("# statistic=L12 estimator=translational n_sims=99 level=0.95 pass="));
    assert_eq!(manifest(&d.join("env")).len(), 2 * 4 + 1);
}

#[test]
fn edgefield_matrices() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    simulate(d);
    write(d, "ef.toml", &fit_config("sim", "[edgefield]\ncell = 0.5"));
    let (code, err) = run(d, &["edgefield", "--config", "ef.toml", "--out", "ef"]);
    assert_eq!(code, 0, "{err}");
    for id in ["a", "b"] {
        let read = |k: &str| InfluenceField::read_matrix(&d.join(format!("ef/edgefield_{id}_{k}.csv"))).unwrap();
        let (obs, ext, cor) = (read("observed"), read("exterior"), read("corrected"));
        assert_eq!(obs.len(), 32);
        assert_eq!(obs[0].len(), 32);
        for j in 0..32 {
            for i in 0..32 {
                assert_eq!(cor[j][i], obs[j][i] + ext[j][i]);
            }
        }
        let mut best = (0, 0, f64::MIN);
        for (j, row) in ext.iter().enumerate() {
            for (i, &v) in row.iter().enumerate() {
                if v > best.2 {
                    best = (i, j, v);
                }
            }
        }
        assert!([0, 31].contains(&best.0) && [0, 31].contains(&best.1), "{best:?}");
    }

    write(d, "none.toml", &fit_config("sim", "").replace("kernel = \"gaussian\"", "kernel = \"none\""));
    let (code, err) = run(d, &["edgefield", "--config", "none.toml", "--out", "none"]);
    assert_eq!(code, 0, "{err}");
    for k in ["observed", "exterior", "corrected"] {
        let m = InfluenceField::read_matrix(&d.join(format!("none/edgefield_a_{k}.csv"))).unwrap();
        assert!(m.iter().flatten().all(|&v| v == 0.0));
    }
}

#[test]
fn experiment_smoke() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    write(d, "exp.toml", "[experiment]\nreplicates = 1\n[chain]\nn_iter = 200\nburn_in = 50\nthin = 1\n");
    let (code, err) = run(d, &["experiment", "--config", "exp.toml", "--out", "exp"]);
    assert_eq!(code, 0, "{err}");
    let files = manifest(&d.join("exp"));
    for f in ["replicates.csv", "error_quantiles.csv", "checks.csv", "truth.csv"] {
        assert!(files.iter().any(|x| x == f), "{f}");
    }
    let reps = std::fs::read_to_string(d.join("exp/replicates.csv")).unwrap();
    let rows: Vec<&str> = reps.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows.len(), 1 + 2 * 3 * 3 * 5);
    assert!(rows[1..].iter().all(|r| r.ends_with(",ok")), "{reps}");
    let q = std::fs::read_to_string(d.join("exp/error_quantiles.csv")).unwrap();
    assert!(q.contains("process,regime,edge,parameter,n,q05,q25,q50,q75,q95\n"));
    assert!(q.contains("strauss,wide,poisson,theta,1,"));
}

#[test]
fn exit_codes() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    // missing configuration
    assert_eq!(run(d, &["fit", "--config", "nope.toml"]).0, 1);
    // unknown key
    write(d, "bad.toml", "sede = 3\n");
    let (code, err) = run(d, &["simulate", "--config", "bad.toml"]);
    assert_eq!(code, 1);
    assert!(err.contains("sede"), "{err}");
    // no plots for fit
    write(d, "empty.toml", "");
    assert_eq!(run(d, &["fit", "--config", "empty.toml", "--out", "o"]).0, 1);
    // malformed pattern file reports its line
    write(d, "x.csv", "x,y\n1,2\n3,4\n");
    write(d, "y.csv", "x,y\n1,2\n3,abc\n");
    write(
        d,
        "malformed.toml",
        "[chain]\nn_iter = 10\nburn_in = 0\n[[plots]]\nid = \"p\"\nparents = \"x.csv\"\nchildren = \"y.csv\"\n",
    );
    let (code, err) = run(d, &["fit", "--config", "malformed.toml", "--out", "o"]);
    assert_eq!(code, 1);
    assert!(err.contains("line 3"), "{err}");
    // non-finite intensity is a numeric failure
    write(d, "overflow.toml", "[model]\nbeta0 = [800.0]\n[simulate]\nsim_cell = 1.0\n");
    let (code, err) = run(d, &["simulate", "--config", "overflow.toml", "--out", "o"]);
    assert_eq!(code, 2, "{err}");
    // unknown mode is a usage error
    assert_eq!(run(d, &["bogus", "--config", "empty.toml"]).0, 1);
}
