//! Summary functions of point patterns and global extreme rank length envelopes.

use std::fmt;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{PointPattern, Window};

/// Default upper end of the distance grid, in metres.
pub const DEFAULT_R_MAX: f64 = 5.0;
/// Default distance grid step.
pub const DEFAULT_R_STEP: f64 = 0.05;
/// Spacing of the evaluation lattice used by the empty space function.
pub const DEFAULT_F_SPACING: f64 = 0.25;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Deserialize, Serialize)]
pub enum Statistic {
    L,
    F,
    G,
    L12,
}

impl Statistic {
    pub const ALL: [Statistic; 4] = [Statistic::L, Statistic::F, Statistic::G, Statistic::L12];

    pub fn estimator(&self) -> &'static str {
        match self {
            Statistic::L | Statistic::L12 => "translational",
            Statistic::F | Statistic::G => "kaplan-meier",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "L" => Ok(Statistic::L),
            "F" => Ok(Statistic::F),
            "G" => Ok(Statistic::G),
            "L12" => Ok(Statistic::L12),
            other => Err(Error::Config(format!("unknown summary statistic '{other}'"))),
        }
    }
}

impl fmt::Display for Statistic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Statistic::L => "L",
            Statistic::F => "F",
            Statistic::G => "G",
            Statistic::L12 => "L12",
        };
        f.write_str(s)
    }
}

/// Uniform grid `0, step, ..., r_max`.
pub fn r_grid(r_max: f64, step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0 && r_max > 0.0 && r_max.is_finite()) {
        return Err(Error::Config(format!("invalid distance grid: r_max={r_max}, step={step}")));
    }
    let n = (r_max / step + 1e-9).floor() as usize;
    Ok((0..=n).map(|k| k as f64 * step).collect())
}

pub fn default_r_grid() -> Vec<f64> {
    r_grid(DEFAULT_R_MAX, DEFAULT_R_STEP).expect("default grid is valid")
}

fn check_grid(r: &[f64]) -> Result<()> {
    if r.is_empty() {
        return Err(Error::Config("empty distance grid".into()));
    }
    if r[0] < 0.0 || r.windows(2).any(|w| w[1] <= w[0]) || r.iter().any(|v| !v.is_finite()) {
        return Err(Error::Config("distance grid must be finite, nonnegative and strictly increasing".into()));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SummaryCurve {
    pub statistic: Statistic,
    pub r: Vec<f64>,
    pub values: Vec<f64>,
}

impl SummaryCurve {
    pub fn estimator(&self) -> &'static str {
        self.statistic.estimator()
    }

    pub fn write(&self, path: &Path, meta: &[(String, String)]) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "# statistic={} estimator={}", self.statistic, self.estimator())?;
        for (k, v) in meta {
            writeln!(f, "# {k}={v}")?;
        }
        writeln!(f, "r,value")?;
        for (r, v) in self.r.iter().zip(&self.values) {
            writeln!(f, "{r},{v:e}")?;
        }
        f.flush()?;
        Ok(())
    }
}

/// Weighted pair distances accumulated onto `r`: entry k sums weights with `d <= r[k]`.
fn cumulate(mut pairs: Vec<(f64, f64)>, r: &[f64]) -> Vec<f64> {
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut out = Vec::with_capacity(r.len());
    let mut acc = 0.0;
    let mut it = pairs.iter().peekable();
    for &rk in r {
        while let Some(&&(d, w)) = it.peek() {
            if d > rk {
                break;
            }
            acc += w;
            it.next();
        }
        out.push(acc);
    }
    out
}

fn translational_pairs(a: &[[f64; 2]], b: &[[f64; 2]], w: &Window, r_max: f64, same: bool) -> Vec<(f64, f64)> {
    let mut pairs = Vec::new();
    for (i, p) in a.iter().enumerate() {
        for (j, q) in b.iter().enumerate() {
            if same && i == j {
                continue;
            }
            let h = [q[0] - p[0], q[1] - p[1]];
            let d = h[0].hypot(h[1]);
            if d <= r_max {
                let overlap = w.translated_overlap(h);
                if overlap > 0.0 {
                    pairs.push((d, 1.0 / overlap));
                }
            }
        }
    }
    pairs
}

fn centred_l(k: &[f64], r: &[f64]) -> Vec<f64> {
    k.iter().zip(r).map(|(k, r)| (k / std::f64::consts::PI).sqrt() - r).collect()
}

/// Centred L-function `sqrt(K/pi) - r` with translational edge correction.
pub fn l_function(pattern: &PointPattern, r: &[f64]) -> Result<SummaryCurve> {
    check_grid(r)?;
    let n = pattern.len();
    if n < 2 {
        return Err(Error::Data(format!("L-function needs at least 2 points, got {n}")));
    }
    let w = pattern.window();
    let r_max = *r.last().unwrap();
    let pairs = translational_pairs(pattern.points(), pattern.points(), w, r_max, true);
    let scale = w.area() * w.area() / (n as f64 * (n - 1) as f64);
    let k: Vec<f64> = cumulate(pairs, r).into_iter().map(|v| v * scale).collect();
    Ok(SummaryCurve { statistic: Statistic::L, values: centred_l(&k, r), r: r.to_vec() })
}

/// Centred cross L-function between two patterns on the same window.
pub fn cross_l12(first: &PointPattern, second: &PointPattern, r: &[f64]) -> Result<SummaryCurve> {
    check_grid(r)?;
    if first.is_empty() || second.is_empty() {
        return Err(Error::Data("cross L-function needs two nonempty patterns".into()));
    }
    let w = first.window();
    if w != second.window() {
        return Err(Error::Data("cross L-function patterns must share a window".into()));
    }
    let r_max = *r.last().unwrap();
    let pairs = translational_pairs(first.points(), second.points(), w, r_max, false);
    let scale = w.area() * w.area() / (first.len() as f64 * second.len() as f64);
    let k: Vec<f64> = cumulate(pairs, r).into_iter().map(|v| v * scale).collect();
    Ok(SummaryCurve { statistic: Statistic::L12, values: centred_l(&k, r), r: r.to_vec() })
}

/// Nearest-neighbour lookup over points sorted by x.
struct SweepIndex {
    pts: Vec<[f64; 2]>,
}

impl SweepIndex {
    fn new(points: &[[f64; 2]]) -> Self {
        let mut pts = points.to_vec();
        pts.sort_by(|a, b| a[0].total_cmp(&b[0]));
        SweepIndex { pts }
    }

    /// Squared distance to the nearest indexed point, skipping one exact copy of `q` if `skip_self`.
    fn nearest_sq(&self, q: [f64; 2], skip_self: bool) -> f64 {
        let start = self.pts.partition_point(|p| p[0] < q[0]);
        let mut best = f64::INFINITY;
        let mut skipped = !skip_self;
        let mut visit = |p: &[f64; 2], best: &mut f64| {
            let d = (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2);
            if !skipped && d == 0.0 {
                skipped = true;
                return;
            }
            if d < *best {
                *best = d;
            }
        };
        for p in &self.pts[start..] {
            if (p[0] - q[0]).powi(2) > best {
                break;
            }
            visit(p, &mut best);
        }
        for p in self.pts[..start].iter().rev() {
            if (p[0] - q[0]).powi(2) > best {
                break;
            }
            visit(p, &mut best);
        }
        best
    }
}

/// Kaplan–Meier distribution function from (observed time, uncensored) pairs, evaluated on `r`.
fn kaplan_meier(mut obs: Vec<(f64, bool)>, r: &[f64]) -> Vec<f64> {
    // events before censorings at equal times
    obs.sort_by(|a, b| a.0.total_cmp(&b.0).then(b.1.cmp(&a.1)));
    let n = obs.len();
    let mut surv = 1.0;
    let mut out = Vec::with_capacity(r.len());
    let mut i = 0;
    for &rk in r {
        while i < n && obs[i].0 <= rk {
            let t = obs[i].0;
            let at_risk = (n - i) as f64;
            let mut events = 0usize;
            let mut j = i;
            while j < n && obs[j].0 == t {
                if obs[j].1 {
                    events += 1;
                }
                j += 1;
            }
            if events > 0 {
                surv *= 1.0 - events as f64 / at_risk;
            }
            i = j;
        }
        out.push(1.0 - surv);
    }
    out
}

/// Empty space function from a regular evaluation lattice with the given spacing.
pub fn empty_space_f(pattern: &PointPattern, r: &[f64], spacing: f64) -> Result<SummaryCurve> {
    check_grid(r)?;
    if pattern.is_empty() {
        return Err(Error::Data("empty space function needs a nonempty pattern".into()));
    }
    if !(spacing > 0.0 && spacing.is_finite()) {
        return Err(Error::Config(format!("evaluation lattice spacing {spacing} must be positive")));
    }
    let w = pattern.window();
    let nx = (w.width() / spacing).round().max(1.0) as usize;
    let ny = (w.height() / spacing).round().max(1.0) as usize;
    let (sx, sy) = (w.width() / nx as f64, w.height() / ny as f64);
    let index = SweepIndex::new(pattern.points());
    let mut obs = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            let u = [w.x_min + (i as f64 + 0.5) * sx, w.y_min + (j as f64 + 0.5) * sy];
            let d = index.nearest_sq(u, false).sqrt();
            let b = w.boundary_distance(u);
            obs.push((d.min(b), d <= b));
        }
    }
    Ok(SummaryCurve { statistic: Statistic::F, values: kaplan_meier(obs, r), r: r.to_vec() })
}

/// Nearest-neighbour distance distribution function.
pub fn nn_distance_g(pattern: &PointPattern, r: &[f64]) -> Result<SummaryCurve> {
    check_grid(r)?;
    let n = pattern.len();
    if n < 2 {
        return Err(Error::Data(format!("G-function needs at least 2 points, got {n}")));
    }
    let w = pattern.window();
    let index = SweepIndex::new(pattern.points());
    let obs = pattern
        .points()
        .iter()
        .map(|&p| {
            let d = index.nearest_sq(p, true).sqrt();
            let b = w.boundary_distance(p);
            (d.min(b), d <= b)
        })
        .collect();
    Ok(SummaryCurve { statistic: Statistic::G, values: kaplan_meier(obs, r), r: r.to_vec() })
}

/// Statistic of a (parents, children) pair; L, F and G use the children.
pub fn compute(stat: Statistic, parents: &PointPattern, children: &PointPattern, r: &[f64]) -> Result<SummaryCurve> {
    match stat {
        Statistic::L => l_function(children, r),
        Statistic::F => empty_space_f(children, r, DEFAULT_F_SPACING),
        Statistic::G => nn_distance_g(children, r),
        Statistic::L12 => cross_l12(parents, children, r),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnvelopeResult {
    pub statistic: Statistic,
    pub r: Vec<f64>,
    pub lower: Vec<f64>,
    pub central: Vec<f64>,
    pub upper: Vec<f64>,
    pub data: Vec<f64>,
    pub level: f64,
    pub n_sims: usize,
    pub pass: bool,
    /// Position of the data curve in the extremeness ordering, 1 = most extreme.
    pub data_rank: usize,
    /// Fraction of all curves at least as extreme as the data curve.
    pub p_value: f64,
}

impl EnvelopeResult {
    pub fn write(&self, path: &Path, meta: &[(String, String)]) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(
            f,
            "# statistic={} estimator={} n_sims={} level={} pass={} erl_rank={} p_value={}",
            self.statistic,
            self.statistic.estimator(),
            self.n_sims,
            self.level,
            self.pass,
            self.data_rank,
            self.p_value
        )?;
        for (k, v) in meta {
            writeln!(f, "# {k}={v}")?;
        }
        writeln!(f, "r,lo,central,hi,data")?;
        for k in 0..self.r.len() {
            writeln!(
                f,
                "{},{:e},{:e},{:e},{:e}",
                self.r[k], self.lower[k], self.central[k], self.upper[k], self.data[k]
            )?;
        }
        f.flush()?;
        Ok(())
    }
}

/// Minimum number of simulated curves accepted by [`erl_envelope`].
pub const MIN_ENVELOPE_SIMS: usize = 99;

/// Global envelope from extreme rank lengths.
///
/// Curve 0 is the data; ties in the ordering are resolved so that the data curve counts as the least
/// extreme among equals, then by index.
pub fn erl_envelope(data: &SummaryCurve, sims: &[SummaryCurve], level: f64) -> Result<EnvelopeResult> {
    if sims.len() < MIN_ENVELOPE_SIMS {
        return Err(Error::Config(format!(
            "envelope needs at least {MIN_ENVELOPE_SIMS} simulated curves, got {}",
            sims.len()
        )));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Config(format!("envelope level {level} must lie in (0, 1)")));
    }
    if let Some(k) = sims.iter().position(|s| s.r != data.r || s.values.len() != data.values.len()) {
        return Err(Error::Data(format!("simulated curve {k} is on a different distance grid")));
    }
    let m = data.r.len();
    let curves: Vec<&[f64]> = std::iter::once(&data.values[..]).chain(sims.iter().map(|s| &s.values[..])).collect();
    let n = curves.len();

    let mut ranks = vec![vec![0u32; m]; n];
    let mut col = vec![0.0; n];
    for k in 0..m {
        for (c, v) in curves.iter().zip(col.iter_mut()) {
            *v = c[k];
        }
        let mut sorted = col.clone();
        sorted.sort_by(f64::total_cmp);
        for i in 0..n {
            let x = col[i];
            let le = sorted.partition_point(|v| *v <= x);
            let ge = n - sorted.partition_point(|v| *v < x);
            ranks[i][k] = le.min(ge) as u32;
        }
    }
    for rv in &mut ranks {
        rv.sort_unstable();
    }

    // most extreme first: lexicographically smallest sorted rank vector
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        ranks[a].cmp(&ranks[b]).then_with(|| match (a, b) {
            (0, _) => std::cmp::Ordering::Greater,
            (_, 0) => std::cmp::Ordering::Less,
            _ => a.cmp(&b),
        })
    });
    let excluded = ((1.0 - level) * n as f64 + 1e-9).floor() as usize;
    let kept = &order[excluded..];

    let mut lower = vec![f64::INFINITY; m];
    let mut upper = vec![f64::NEG_INFINITY; m];
    for &i in kept {
        for k in 0..m {
            lower[k] = lower[k].min(curves[i][k]);
            upper[k] = upper[k].max(curves[i][k]);
        }
    }
    let mut central = Vec::with_capacity(m);
    let mut buf = vec![0.0; sims.len()];
    for k in 0..m {
        for (b, s) in buf.iter_mut().zip(sims) {
            *b = s.values[k];
        }
        buf.sort_by(f64::total_cmp);
        central.push(buf[(buf.len() - 1) / 2]);
    }
    let pass = (0..m).all(|k| data.values[k] >= lower[k] && data.values[k] <= upper[k]);
    let data_rank = order.iter().position(|&i| i == 0).unwrap() + 1;
    let at_least = ranks.iter().filter(|rv| **rv <= ranks[0]).count();
    Ok(EnvelopeResult {
        statistic: data.statistic,
        r: data.r.clone(),
        lower,
        central,
        upper,
        data: data.values.clone(),
        level,
        n_sims: sims.len(),
        pass,
        data_rank,
        p_value: at_least as f64 / n as f64,
    })
}
