//! Rectangular windows, point patterns, and regular-grid discretization.

use std::path::Path;

use crate::error::{Error, Result};

const DIVISIBILITY_TOL: f64 = 1e-9;
const BOUNDARY_SNAP: f64 = 1e-9;

/// Axis-aligned rectangle `[x_min, x_max] × [y_min, y_max]` in metres.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Window {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl Window {
    pub fn new(x_min: f64, x_max: f64, y_min: f64, y_max: f64) -> Result<Self> {
        let ok = [x_min, x_max, y_min, y_max].iter().all(|v| v.is_finite());
        if !ok || !(x_min < x_max) || !(y_min < y_max) {
            return Err(Error::Config(format!(
                "invalid window [{x_min}, {x_max}] x [{y_min}, {y_max}]"
            )));
        }
        Ok(Self {
            x_min,
            x_max,
            y_min,
            y_max,
        })
    }

    /// `[0, side]²`.
    pub fn square(side: f64) -> Result<Self> {
        Self::new(0.0, side, 0.0, side)
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn contains(&self, p: [f64; 2]) -> bool {
        p[0] >= self.x_min && p[0] <= self.x_max && p[1] >= self.y_min && p[1] <= self.y_max
    }

    /// True if `other` lies inside `self` with a margin on every side.
    pub fn strictly_contains(&self, other: &Window) -> bool {
        self.x_min < other.x_min
            && self.x_max > other.x_max
            && self.y_min < other.y_min
            && self.y_max > other.y_max
    }

    /// Window grown by `d` on every side.
    pub fn dilate(&self, d: f64) -> Result<Self> {
        Self::new(self.x_min - d, self.x_max + d, self.y_min - d, self.y_max + d)
    }

    /// Distance from an interior point to the window boundary.
    pub fn boundary_distance(&self, p: [f64; 2]) -> f64 {
        (p[0] - self.x_min)
            .min(self.x_max - p[0])
            .min(p[1] - self.y_min)
            .min(self.y_max - p[1])
    }

    /// Area of `W ∩ (W + h)` for a translation vector `h`.
    pub fn translated_overlap(&self, h: [f64; 2]) -> f64 {
        (self.width() - h[0].abs()).max(0.0) * (self.height() - h[1].abs()).max(0.0)
    }
}

/// Point locations with optional strictly positive marks.
#[derive(Clone, Debug, PartialEq)]
pub struct PointPattern {
    points: Vec<[f64; 2]>,
    marks: Option<Vec<f64>>,
    window: Window,
}

impl PointPattern {
    /// Observed pattern: every point must lie inside the window.
    pub fn new(points: Vec<[f64; 2]>, marks: Option<Vec<f64>>, window: Window) -> Result<Self> {
        if let Some(i) = points.iter().position(|p| !window.contains(*p)) {
            return Err(Error::Data(format!(
                "point {i} at ({}, {}) lies outside the window",
                points[i][0], points[i][1]
            )));
        }
        Self::with_marks_checked(points, marks, window)
    }

    fn with_marks_checked(points: Vec<[f64; 2]>, marks: Option<Vec<f64>>, window: Window) -> Result<Self> {
        if let Some(m) = &marks {
            if m.len() != points.len() {
                return Err(Error::Data(format!(
                    "{} marks for {} points",
                    m.len(),
                    points.len()
                )));
            }
            if let Some(i) = m.iter().position(|v| !(*v > 0.0) || !v.is_finite()) {
                return Err(Error::Data(format!("mark {i} is not strictly positive")));
            }
        }
        Ok(Self {
            points,
            marks,
            window,
        })
    }

    pub fn empty(window: Window) -> Self {
        Self {
            points: Vec::new(),
            marks: None,
            window,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[[f64; 2]] {
        &self.points
    }

    pub fn marks(&self) -> Option<&[f64]> {
        self.marks.as_deref()
    }

    pub fn mark(&self, i: usize) -> Option<f64> {
        self.marks.as_ref().map(|m| m[i])
    }

    pub fn window(&self) -> &Window {
        &self.window
    }

    pub fn is_marked(&self) -> bool {
        self.marks.is_some()
    }

    /// Points (and marks) falling inside `w`, re-windowed to `w`.
    pub fn restrict(&self, w: Window) -> Self {
        let keep: Vec<usize> = (0..self.len()).filter(|&i| w.contains(self.points[i])).collect();
        Self {
            points: keep.iter().map(|&i| self.points[i]).collect(),
            marks: self
                .marks
                .as_ref()
                .map(|m| keep.iter().map(|&i| m[i]).collect()),
            window: w,
        }
    }

    /// Union of two patterns on `self`'s window. Marks are kept only if both are marked.
    pub fn union(&self, other: &PointPattern) -> Self {
        let mut points = self.points.clone();
        points.extend_from_slice(&other.points);
        let marks = match (&self.marks, &other.marks) {
            (Some(a), Some(b)) => Some(a.iter().chain(b).copied().collect()),
            _ => None,
        };
        Self {
            points,
            marks,
            window: self.window,
        }
    }

    /// Pattern and window shifted by `d`.
    pub fn translate(&self, d: [f64; 2]) -> Self {
        let w = self.window;
        Self {
            points: self.points.iter().map(|p| [p[0] + d[0], p[1] + d[1]]).collect(),
            marks: self.marks.clone(),
            window: Window {
                x_min: w.x_min + d[0],
                x_max: w.x_max + d[0],
                y_min: w.y_min + d[1],
                y_max: w.y_max + d[1],
            },
        }
    }

    /// Pattern and window scaled about the origin by `c > 0`.
    pub fn scale(&self, c: f64) -> Self {
        let w = self.window;
        Self {
            points: self.points.iter().map(|p| [p[0] * c, p[1] * c]).collect(),
            marks: self.marks.clone(),
            window: Window {
                x_min: w.x_min * c,
                x_max: w.x_max * c,
                y_min: w.y_min * c,
                y_max: w.y_max * c,
            },
        }
    }

    /// Reads `x,y` or `x,y,mark` delimited text. The window comes from configuration.
    pub fn read_csv(path: &Path, window: Window) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| {
            Error::Data(format!("cannot open pattern file {}: {e}", path.display()))
        })?;
        Self::from_reader(file, window).map_err(|e| match e {
            Error::Data(m) => Error::Data(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn from_reader<R: std::io::Read>(reader: R, window: Window) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .comment(Some(b'#'))
            .from_reader(reader);
        let headers = rdr
            .headers()
            .map_err(|e| Error::Data(format!("unreadable header: {e}")))?
            .clone();
        let names: Vec<&str> = headers.iter().collect();
        let marked = match names.as_slice() {
            ["x", "y"] => false,
            ["x", "y", "mark"] => true,
            _ => {
                return Err(Error::Data(format!(
                    "line 1: expected header `x,y` or `x,y,mark`, found `{}`",
                    names.join(",")
                )))
            }
        };
        let mut points = Vec::new();
        let mut marks = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| Error::Data(format!("malformed row: {e}")))?;
            let line = rec.position().map_or(0, |p| p.line());
            let field = |k: usize| -> Result<f64> {
                rec.get(k)
                    .ok_or_else(|| Error::Data(format!("line {line}: missing column {}", k + 1)))?
                    .parse::<f64>()
                    .map_err(|e| Error::Data(format!("line {line}: {e}")))
            };
            let p = [field(0)?, field(1)?];
            if !window.contains(p) {
                return Err(Error::Data(format!(
                    "line {line}: point ({}, {}) lies outside the window",
                    p[0], p[1]
                )));
            }
            points.push(p);
            if marked {
                let m = field(2)?;
                if !(m > 0.0) {
                    return Err(Error::Data(format!("line {line}: mark must be positive")));
                }
                marks.push(m);
            }
        }
        Self::new(points, marked.then_some(marks), window)
    }

    /// Writes the pattern, preceded by `# key=value` metadata lines.
    pub fn write_csv(&self, path: &Path, meta: &[(String, String)]) -> Result<()> {
        let mut out = String::new();
        for (k, v) in meta {
            out.push_str(&format!("# {k}={v}\n"));
        }
        out.push_str(if self.is_marked() { "x,y,mark\n" } else { "x,y\n" });
        for (i, p) in self.points.iter().enumerate() {
            match self.mark(i) {
                Some(m) => out.push_str(&format!("{},{},{}\n", p[0], p[1], m)),
                None => out.push_str(&format!("{},{}\n", p[0], p[1])),
            }
        }
        std::fs::write(path, out)?;
        Ok(())
    }
}

/// Regular grid over a window, cells indexed row-major: `g = j * n_x + i`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Grid {
    window: Window,
    cell_size: f64,
    nx: usize,
    ny: usize,
}

/// Splits `window` into square cells of side `cell_size`.
pub fn discretize(window: Window, cell_size: f64) -> Result<Grid> {
    if !(cell_size > 0.0) || !cell_size.is_finite() {
        return Err(Error::Config(format!("cell size must be positive, got {cell_size}")));
    }
    let count = |extent: f64, axis: &str| -> Result<usize> {
        let k = (extent / cell_size).round();
        if k < 1.0 || ((k * cell_size - extent) / extent).abs() > DIVISIBILITY_TOL {
            return Err(Error::Config(format!(
                "{axis} extent {extent} is not an integer multiple of cell size {cell_size}"
            )));
        }
        Ok(k as usize)
    };
    let nx = count(window.width(), "x")?;
    let ny = count(window.height(), "y")?;
    Ok(Grid {
        window,
        cell_size,
        nx,
        ny,
    })
}

impl Grid {
    pub fn window(&self) -> &Window {
        &self.window
    }

    pub fn cell_size(&self) -> f64 {
        self.cell_size
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    /// Number of cells `G`.
    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn cell_area(&self) -> f64 {
        self.cell_size * self.cell_size
    }

    pub fn index(&self, i: usize, j: usize) -> usize {
        j * self.nx + i
    }

    pub fn coords(&self, g: usize) -> (usize, usize) {
        (g % self.nx, g / self.nx)
    }

    pub fn center(&self, g: usize) -> [f64; 2] {
        let (i, j) = self.coords(g);
        [
            self.window.x_min + (i as f64 + 0.5) * self.cell_size,
            self.window.y_min + (j as f64 + 0.5) * self.cell_size,
        ]
    }

    /// Rectangle covered by cell `g`.
    pub fn cell_rect(&self, g: usize) -> Window {
        let (i, j) = self.coords(g);
        let x0 = self.window.x_min + i as f64 * self.cell_size;
        let y0 = self.window.y_min + j as f64 * self.cell_size;
        Window {
            x_min: x0,
            x_max: x0 + self.cell_size,
            y_min: y0,
            y_max: y0 + self.cell_size,
        }
    }

    fn axis_index(&self, offset: f64, n: usize) -> usize {
        let t = offset / self.cell_size;
        let r = t.round();
        // boundary points belong to the right/upper cell
        let k = if (t - r).abs() < BOUNDARY_SNAP { r } else { t.floor() };
        (k.max(0.0) as usize).min(n - 1)
    }

    /// Cell containing `p`, or `None` outside the window.
    pub fn cell_of(&self, p: [f64; 2]) -> Option<usize> {
        if !self.window.contains(p) {
            return None;
        }
        let i = self.axis_index(p[0] - self.window.x_min, self.nx);
        let j = self.axis_index(p[1] - self.window.y_min, self.ny);
        Some(self.index(i, j))
    }
}

/// Per-cell point counts on a grid.
#[derive(Clone, Debug, PartialEq)]
pub struct CountGrid {
    pub grid: Grid,
    pub counts: Vec<u32>,
}

impl CountGrid {
    pub fn total(&self) -> u64 {
        self.counts.iter().map(|&c| c as u64).sum()
    }
}

/// Counts pattern points per grid cell.
pub fn bin_points(pattern: &PointPattern, grid: &Grid) -> Result<CountGrid> {
    let mut counts = vec![0u32; grid.len()];
    for (k, p) in pattern.points().iter().enumerate() {
        let g = grid.cell_of(*p).ok_or_else(|| {
            Error::Data(format!("point {k} at ({}, {}) lies outside the grid window", p[0], p[1]))
        })?;
        counts[g] += 1;
    }
    Ok(CountGrid { grid: *grid, counts })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn discretize_standard_grids() {
        let w = Window::square(40.0).unwrap();
        let g = discretize(w, 1.0).unwrap();
        assert_eq!(g.len(), 1600);
        assert_eq!(g.cell_area(), 1.0);
        assert_eq!(discretize(w, 0.2).unwrap().len(), 40_000);
        assert_eq!(discretize(w, 0.1).unwrap().len(), 160_000);
        let unit = discretize(Window::square(1.0).unwrap(), 1.0).unwrap();
        assert_eq!(unit.len(), 1);
        assert_eq!(unit.center(0), [0.5, 0.5]);
    }

    #[test]
    fn non_divisible_axis_is_named() {
        let w = Window::new(0.0, 40.0, 0.0, 10.5).unwrap();
        let err = discretize(w, 1.0).unwrap_err();
        assert!(err.to_string().contains("y extent"), "{err}");
        let w = Window::new(0.0, 3.3, 0.0, 4.0).unwrap();
        assert!(discretize(w, 1.0).unwrap_err().to_string().contains("x extent"));
    }

    #[test]
    fn invalid_windows() {
        assert!(Window::new(1.0, 1.0, 0.0, 1.0).is_err());
        assert!(Window::new(0.0, 1.0, 2.0, 1.0).is_err());
    }

    #[test]
    fn boundary_points_go_right_and_up() {
        let g = discretize(Window::square(3.0).unwrap(), 1.0).unwrap();
        assert_eq!(g.cell_of([1.0, 0.5]), Some(g.index(1, 0)));
        assert_eq!(g.cell_of([0.5, 2.0]), Some(g.index(0, 2)));
        assert_eq!(g.cell_of([3.0, 3.0]), Some(g.index(2, 2)));
        let fine = discretize(Window::square(1.0).unwrap(), 0.1).unwrap();
        // 0.3 / 0.1 is not exactly 3 in floating point
        assert_eq!(fine.cell_of([0.3, 0.05]), Some(fine.index(3, 0)));
    }

    #[test]
    fn bin_points_examples() {
        let w = Window::square(1.0).unwrap();
        let g = discretize(w, 1.0).unwrap();
        let empty = bin_points(&PointPattern::empty(w), &g).unwrap();
        assert_eq!(empty.counts, vec![0]);
        let one = PointPattern::new(vec![[0.5, 0.5]], None, w).unwrap();
        assert_eq!(bin_points(&one, &g).unwrap().counts, vec![1]);
    }

    #[test]
    fn point_outside_is_rejected_with_index() {
        let w = Window::square(2.0).unwrap();
        let g = discretize(Window::square(1.0).unwrap(), 1.0).unwrap();
        let p = PointPattern::new(vec![[0.5, 0.5], [1.5, 0.5]], None, w).unwrap();
        let err = bin_points(&p, &g).unwrap_err();
        assert!(err.to_string().contains("point 1"));
        assert!(PointPattern::new(vec![[3.0, 0.0]], None, w).is_err());
    }

    #[test]
    fn marks_validated() {
        let w = Window::square(1.0).unwrap();
        assert!(PointPattern::new(vec![[0.1, 0.1]], Some(vec![0.0]), w).is_err());
        assert!(PointPattern::new(vec![[0.1, 0.1]], Some(vec![1.0, 2.0]), w).is_err());
    }

    #[test]
    fn csv_roundtrip_and_errors() {
        let w = Window::square(10.0).unwrap();
        let p = PointPattern::from_reader("x,y,mark\n1,2,30\n3.5,4,12.5\n".as_bytes(), w).unwrap();
        assert_eq!(p.points(), &[[1.0, 2.0], [3.5, 4.0]]);
        assert_eq!(p.marks(), Some(&[30.0, 12.5][..]));
        let err = PointPattern::from_reader("x,y\n1,2\n3,oops\n".as_bytes(), w).unwrap_err();
        assert!(err.to_string().contains("line 3"), "{err}");
        let err = PointPattern::from_reader("a,b\n".as_bytes(), w).unwrap_err();
        assert!(err.to_string().contains("header"));
        let err = PointPattern::from_reader("x,y\n1,2\n11,2\n".as_bytes(), w).unwrap_err();
        assert!(err.to_string().contains("line 3"), "{err}");

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.csv");
        p.write_csv(&path, &[("seed".into(), "1".into())]).unwrap();
        assert_eq!(PointPattern::read_csv(&path, w).unwrap(), p);
    }

    proptest! {
        #[test]
        fn binning_is_a_partition(pts in proptest::collection::vec((0.0f64..=40.0, 0.0f64..=40.0), 0..300),
                                  cs in prop::sample::select(vec![0.5, 1.0, 2.0, 4.0])) {
            let w = Window::square(40.0).unwrap();
            let grid = discretize(w, cs).unwrap();
            let pattern = PointPattern::new(pts.iter().map(|&(x, y)| [x, y]).collect(), None, w).unwrap();
            let counts = bin_points(&pattern, &grid).unwrap();
            prop_assert_eq!(counts.total() as usize, pattern.len());
            for p in pattern.points() {
                let g = grid.cell_of(*p).unwrap();
                let r = grid.cell_rect(g);
                prop_assert!(r.contains(*p));
            }
        }

        #[test]
        fn cells_tile_the_window(nx in 1usize..20, ny in 1usize..20, cs in prop::sample::select(vec![0.1, 0.25, 1.0, 3.0])) {
            let w = Window::new(-5.0, -5.0 + nx as f64 * cs, 2.0, 2.0 + ny as f64 * cs).unwrap();
            let g = discretize(w, cs).unwrap();
            prop_assert_eq!(g.len(), nx * ny);
            let area: f64 = (0..g.len()).map(|k| g.cell_rect(k).area()).sum();
            prop_assert!((area - w.area()).abs() < 1e-9 * w.area());
            let last = g.cell_rect(g.len() - 1);
            prop_assert!((last.x_max - w.x_max).abs() < 1e-9 && (last.y_max - w.y_max).abs() < 1e-9);
        }
    }
}
