//! Parametric influence kernels and the superposed influence field of a parent pattern.

use std::fmt;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{Grid, PointPattern};

/// Default truncation radius, in effective kernel ranges.
pub const DEFAULT_CUTOFF: f64 = 5.0;

/// Kernel family without parameter values; selects the model variant.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Deserialize, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelFamily {
    None,
    Gaussian,
    MarkRange,
    MarkStrength,
    MarkFull,
}

impl KernelFamily {
    /// Names of the kernel parameters, in vector order.
    pub fn param_names(&self) -> &'static [&'static str] {
        match self {
            KernelFamily::None => &[],
            KernelFamily::Gaussian => &["theta"],
            KernelFamily::MarkRange => &["theta", "delta"],
            KernelFamily::MarkStrength => &["theta", "alpha"],
            KernelFamily::MarkFull => &["theta", "delta", "alpha"],
        }
    }

    pub fn requires_marks(&self) -> bool {
        matches!(
            self,
            KernelFamily::MarkRange | KernelFamily::MarkStrength | KernelFamily::MarkFull
        )
    }

    /// Builds a kernel from parameters ordered as in [`param_names`](Self::param_names).
    pub fn with_params(&self, p: &[f64]) -> Result<KernelSpec> {
        if p.len() != self.param_names().len() {
            return Err(Error::Model(format!(
                "{self} kernel takes {} parameters, got {}",
                self.param_names().len(),
                p.len()
            )));
        }
        let spec = match self {
            KernelFamily::None => KernelSpec::NoInfluence,
            KernelFamily::Gaussian => KernelSpec::Gaussian { theta: p[0] },
            KernelFamily::MarkRange => KernelSpec::MarkRange {
                theta: p[0],
                delta: p[1],
            },
            KernelFamily::MarkStrength => KernelSpec::MarkStrength {
                theta: p[0],
                alpha: p[1],
            },
            KernelFamily::MarkFull => KernelSpec::MarkFull {
                theta: p[0],
                delta: p[1],
                alpha: p[2],
            },
        };
        spec.validate()?;
        Ok(spec)
    }
}

impl fmt::Display for KernelFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            KernelFamily::None => "none",
            KernelFamily::Gaussian => "gaussian",
            KernelFamily::MarkRange => "mark_range",
            KernelFamily::MarkStrength => "mark_strength",
            KernelFamily::MarkFull => "mark_full",
        };
        f.write_str(s)
    }
}

/// Influence kernel `c(h, m) = m^α exp(−(h / (θ m^δ))²)` and its reduced forms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum KernelSpec {
    NoInfluence,
    Gaussian { theta: f64 },
    MarkRange { theta: f64, delta: f64 },
    MarkStrength { theta: f64, alpha: f64 },
    MarkFull { theta: f64, delta: f64, alpha: f64 },
}

impl KernelSpec {
    pub fn family(&self) -> KernelFamily {
        match self {
            KernelSpec::NoInfluence => KernelFamily::None,
            KernelSpec::Gaussian { .. } => KernelFamily::Gaussian,
            KernelSpec::MarkRange { .. } => KernelFamily::MarkRange,
            KernelSpec::MarkStrength { .. } => KernelFamily::MarkStrength,
            KernelSpec::MarkFull { .. } => KernelFamily::MarkFull,
        }
    }

    /// Parameter vector `θ_I`, ordered as in [`KernelFamily::param_names`].
    pub fn params(&self) -> Vec<f64> {
        match *self {
            KernelSpec::NoInfluence => vec![],
            KernelSpec::Gaussian { theta } => vec![theta],
            KernelSpec::MarkRange { theta, delta } => vec![theta, delta],
            KernelSpec::MarkStrength { theta, alpha } => vec![theta, alpha],
            KernelSpec::MarkFull {
                theta,
                delta,
                alpha,
            } => vec![theta, delta, alpha],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (theta, delta, alpha) = self.shape();
        let ok = theta > 0.0
            && theta.is_finite()
            && delta >= 0.0
            && delta.is_finite()
            && alpha >= 0.0
            && alpha.is_finite();
        let delta_ok = !matches!(self, KernelSpec::MarkRange { .. } | KernelSpec::MarkFull { .. }) || delta > 0.0;
        if matches!(self, KernelSpec::NoInfluence) || (ok && delta_ok) {
            Ok(())
        } else {
            Err(Error::Model(format!("invalid kernel parameters {self}")))
        }
    }

    /// `(θ, δ, α)` with absent parameters set to their neutral values.
    fn shape(&self) -> (f64, f64, f64) {
        match *self {
            KernelSpec::NoInfluence => (1.0, 0.0, 0.0),
            KernelSpec::Gaussian { theta } => (theta, 0.0, 0.0),
            KernelSpec::MarkRange { theta, delta } => (theta, delta, 0.0),
            KernelSpec::MarkStrength { theta, alpha } => (theta, 0.0, alpha),
            KernelSpec::MarkFull {
                theta,
                delta,
                alpha,
            } => (theta, delta, alpha),
        }
    }

    pub fn requires_marks(&self) -> bool {
        self.family().requires_marks()
    }

    fn mark_value(&self, mark: Option<f64>) -> Result<f64> {
        if !self.requires_marks() {
            return Ok(1.0);
        }
        match mark {
            Some(m) if m > 0.0 => Ok(m),
            Some(m) => Err(Error::Model(format!("mark {m} is not positive"))),
            None => Err(Error::Model(format!("{} kernel requires marked parents", self.family()))),
        }
    }

    /// Range `θ m^δ` and strength `m^α` for a parent with mark `m`.
    pub fn range_and_strength(&self, mark: Option<f64>) -> Result<(f64, f64)> {
        let m = self.mark_value(mark)?;
        let (theta, delta, alpha) = self.shape();
        let range = if delta == 0.0 { theta } else { theta * m.powf(delta) };
        let strength = if alpha == 0.0 { 1.0 } else { m.powf(alpha) };
        Ok((range, strength))
    }

    /// Kernel value at distance `h` from a parent with mark `mark`.
    pub fn value(&self, h: f64, mark: Option<f64>) -> Result<f64> {
        if matches!(self, KernelSpec::NoInfluence) {
            return Ok(0.0);
        }
        let (range, strength) = self.range_and_strength(mark)?;
        let t = h / range;
        Ok(strength * (-t * t).exp())
    }
}

impl fmt::Display for KernelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let fam = self.family();
        write!(f, "{fam}")?;
        for (name, v) in fam.param_names().iter().zip(self.params()) {
            write!(f, " {name}={v}")?;
        }
        Ok(())
    }
}

/// Which edge treatment produced a field.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FieldKind {
    Observed,
    Exterior,
    Corrected,
}

impl fmt::Display for FieldKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FieldKind::Observed => "observed",
            FieldKind::Exterior => "exterior",
            FieldKind::Corrected => "corrected",
        })
    }
}

/// Piecewise constant influence field on a grid.
#[derive(Clone, Debug, PartialEq)]
pub struct InfluenceField {
    pub grid: Grid,
    pub values: Vec<f64>,
    pub kernel: KernelSpec,
    pub kind: FieldKind,
    pub edge: String,
}

impl InfluenceField {
    pub fn zeros(grid: Grid, kernel: KernelSpec, kind: FieldKind, edge: &str) -> Self {
        Self {
            values: vec![0.0; grid.len()],
            grid,
            kernel,
            kind,
            edge: edge.to_string(),
        }
    }

    /// Writes an `n_y × n_x` matrix; the first data row is the lowest row of cells.
    pub fn write_matrix(&self, path: &Path, meta: &[(String, String)]) -> Result<()> {
        let w = self.grid.window();
        let mut out = format!(
            "# window=[{},{}]x[{},{}] cell_size={} nx={} ny={} kernel={} field={} edge={}\n",
            w.x_min,
            w.x_max,
            w.y_min,
            w.y_max,
            self.grid.cell_size(),
            self.grid.nx(),
            self.grid.ny(),
            self.kernel,
            self.kind,
            self.edge,
        );
        for (k, v) in meta {
            out.push_str(&format!("# {k}={v}\n"));
        }
        for row in self.values.chunks(self.grid.nx()) {
            let line: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    /// Reads a matrix written by [`write_matrix`](Self::write_matrix), returning the raw values.
    pub fn read_matrix(path: &Path) -> Result<Vec<Vec<f64>>> {
        let text = std::fs::read_to_string(path)?;
        let mut rows = Vec::new();
        for (k, line) in text.lines().enumerate() {
            if line.starts_with('#') || line.trim().is_empty() {
                continue;
            }
            let row = line
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse::<f64>()
                        .map_err(|e| Error::Data(format!("{}: line {}: {e}", path.display(), k + 1)))
                })
                .collect::<Result<Vec<f64>>>()?;
            rows.push(row);
        }
        Ok(rows)
    }
}

/// Adds the truncated kernel of one parent onto `values`.
fn add_parent(values: &mut [f64], grid: &Grid, p: [f64; 2], range: f64, strength: f64, cutoff: f64) {
    let radius = cutoff * range;
    let w = grid.window();
    let cs = grid.cell_size();
    let span = |c: f64, lo: f64, n: usize| -> Option<(usize, usize)> {
        let a = ((c - radius - lo) / cs - 0.5).ceil();
        let b = ((c + radius - lo) / cs - 0.5).floor();
        if b < 0.0 || a > (n - 1) as f64 || a > b {
            return None;
        }
        Some((a.max(0.0) as usize, (b as usize).min(n - 1)))
    };
    let (Some((i0, i1)), Some((j0, j1))) = (span(p[0], w.x_min, grid.nx()), span(p[1], w.y_min, grid.ny())) else {
        return;
    };
    // Gaussian kernels factor over the axes
    let inv = 1.0 / range;
    let dx: Vec<f64> = (i0..=i1)
        .map(|i| (w.x_min + (i as f64 + 0.5) * cs - p[0]) * inv)
        .collect();
    let ex: Vec<f64> = dx.iter().map(|t| (-t * t).exp()).collect();
    let r2 = cutoff * cutoff;
    for j in j0..=j1 {
        let ty = (w.y_min + (j as f64 + 0.5) * cs - p[1]) * inv;
        let ty2 = ty * ty;
        if ty2 > r2 {
            continue;
        }
        let ey = strength * (-ty2).exp();
        let row = &mut values[j * grid.nx()..(j + 1) * grid.nx()];
        for (k, i) in (i0..=i1).enumerate() {
            if dx[k] * dx[k] + ty2 <= r2 {
                row[i] += ey * ex[k];
            }
        }
    }
}

/// Superposed influence `Σ_j c(‖ξ_g − x_j‖, m_j)` at every cell centre, with each
/// parent's contribution truncated beyond `cutoff` effective ranges.
pub fn influence_field(spec: &KernelSpec, parents: &PointPattern, grid: &Grid, cutoff: f64) -> Result<InfluenceField> {
    spec.validate()?;
    let mut field = InfluenceField::zeros(*grid, *spec, FieldKind::Observed, "none");
    if matches!(spec, KernelSpec::NoInfluence) {
        return Ok(field);
    }
    if spec.requires_marks() && !parents.is_marked() && !parents.is_empty() {
        return Err(Error::Model(format!("{} kernel requires marked parents", spec.family())));
    }
    for (k, &p) in parents.points().iter().enumerate() {
        let (range, strength) = spec.range_and_strength(parents.mark(k))?;
        add_parent(&mut field.values, grid, p, range, strength, cutoff);
    }
    Ok(field)
}
