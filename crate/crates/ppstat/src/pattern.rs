//! Point patterns on rectangular windows, close-pair enumeration, and the
//! CSV interchange format.
//!
//! Coordinates round-trip exactly through CSV: values are written with 17
//! significant digits, which uniquely determines an `f64`.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, Read};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::geometry::{Point, Window};

#[derive(Debug, Error)]
pub enum PatternError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: cannot parse row {content:?}")]
    Parse { line: usize, content: String },
    #[error("line {line}: expected {expected} columns, found {got}")]
    ColumnCount { line: usize, expected: usize, got: usize },
    #[error("line {line}: mark must be 1 or 2, found {value:?}")]
    BadMark { line: usize, value: String },
    #[error("{} point(s) outside the window, first at index {}", indices.len(), indices[0])]
    OutOfWindow { indices: Vec<usize> },
    #[error("refusing to overwrite existing file {0}; pass overwrite=true")]
    FileExists(PathBuf),
    #[error("file mixes 2-column and 3-column rows (line {line})")]
    MixedColumns { line: usize },
}

/// An observed point pattern together with its observation window.
#[derive(Debug, Clone)]
pub struct PointPattern {
    points: Vec<Point>,
    window: Window,
    has_duplicates: bool,
}

impl PointPattern {
    /// Every point must lie in the (closed) window. Duplicate coordinates are
    /// allowed but flagged, since they make pairwise reweighting terms at lag
    /// zero diverge downstream.
    pub fn new(points: Vec<Point>, window: Window) -> Result<Self, PatternError> {
        let outside: Vec<usize> = points
            .iter()
            .enumerate()
            .filter(|(_, p)| !window.contains(**p))
            .map(|(i, _)| i)
            .collect();
        if !outside.is_empty() {
            return Err(PatternError::OutOfWindow { indices: outside });
        }
        let has_duplicates = detect_duplicates(&points);
        Ok(PointPattern { points, window, has_duplicates })
    }

    pub fn n(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn window(&self) -> &Window {
        &self.window
    }

    pub fn has_duplicates(&self) -> bool {
        self.has_duplicates
    }

    /// Ordered close pairs `(i, j, |x_j - x_i|)` with `i != j` and distance at
    /// most `t_max`. Both orientations of each pair are reported. Enumeration
    /// order is deterministic: ascending in `i`, then cell-scan order in `j`.
    pub fn close_pairs(&self, t_max: f64) -> Vec<(usize, usize, f64)> {
        let grid = CellGrid::build(&self.points, &self.window, t_max);
        let mut out = Vec::new();
        for (i, &p) in self.points.iter().enumerate() {
            grid.for_box(p, t_max, |j, q| {
                if j != i {
                    let d = p.dist(q);
                    if d <= t_max {
                        out.push((i, j, d));
                    }
                }
            });
        }
        out
    }

    /// Loads `x,y` CSV. The first line may be the `x,y` header or a data row.
    pub fn from_csv_reader<R: Read>(reader: R, window: Window) -> Result<Self, PatternError> {
        let rows = parse_rows(reader)?;
        let mut points = Vec::with_capacity(rows.len());
        for row in rows {
            match row {
                CsvRow::Plain { line: _, p } => points.push(p),
                CsvRow::Marked { line, .. } => {
                    return Err(PatternError::ColumnCount { line, expected: 2, got: 3 })
                }
            }
        }
        PointPattern::new(points, window)
    }

    pub fn from_csv(path: &Path, window: Window) -> Result<Self, PatternError> {
        Self::from_csv_reader(BufReader::new(fs::File::open(path)?), window)
    }

    pub fn to_csv_string(&self) -> String {
        let mut s = String::from("x,y\n");
        for p in &self.points {
            let _ = writeln!(s, "{},{}", fmt_coord(p.x), fmt_coord(p.y));
        }
        s
    }

    pub fn to_csv(&self, path: &Path, overwrite: bool) -> Result<(), PatternError> {
        write_guarded(path, overwrite, self.to_csv_string())
    }
}

/// A pair of point patterns (marks 1 and 2) sharing one window.
#[derive(Debug, Clone)]
pub struct BivariatePattern {
    first: PointPattern,
    second: PointPattern,
}

impl BivariatePattern {
    pub fn new(points1: Vec<Point>, points2: Vec<Point>, window: Window) -> Result<Self, PatternError> {
        Ok(BivariatePattern {
            first: PointPattern::new(points1, window)?,
            second: PointPattern::new(points2, window)?,
        })
    }

    pub fn first(&self) -> &PointPattern {
        &self.first
    }

    pub fn second(&self) -> &PointPattern {
        &self.second
    }

    pub fn window(&self) -> &Window {
        self.first.window()
    }

    /// Ordered cross pairs `(i, j, d)` with `i` indexing the first pattern and
    /// `j` the second; every qualifying pair appears exactly once.
    pub fn close_cross_pairs(&self, t_max: f64) -> Vec<(usize, usize, f64)> {
        let grid = CellGrid::build(self.second.points(), self.window(), t_max);
        let mut out = Vec::new();
        for (i, &p) in self.first.points().iter().enumerate() {
            grid.for_box(p, t_max, |j, q| {
                let d = p.dist(q);
                if d <= t_max {
                    out.push((i, j, d));
                }
            });
        }
        out
    }

    pub fn from_csv_reader<R: Read>(reader: R, window: Window) -> Result<Self, PatternError> {
        let rows = parse_rows(reader)?;
        let mut p1 = Vec::new();
        let mut p2 = Vec::new();
        for row in rows {
            match row {
                CsvRow::Plain { line, .. } => {
                    return Err(PatternError::ColumnCount { line, expected: 3, got: 2 })
                }
                CsvRow::Marked { p, mark, .. } => {
                    if mark == 1 {
                        p1.push(p);
                    } else {
                        p2.push(p);
                    }
                }
            }
        }
        BivariatePattern::new(p1, p2, window)
    }

    pub fn from_csv(path: &Path, window: Window) -> Result<Self, PatternError> {
        Self::from_csv_reader(BufReader::new(fs::File::open(path)?), window)
    }

    pub fn to_csv_string(&self) -> String {
        let mut s = String::from("x,y,mark\n");
        for p in self.first.points() {
            let _ = writeln!(s, "{},{},1", fmt_coord(p.x), fmt_coord(p.y));
        }
        for p in self.second.points() {
            let _ = writeln!(s, "{},{},2", fmt_coord(p.x), fmt_coord(p.y));
        }
        s
    }

    pub fn to_csv(&self, path: &Path, overwrite: bool) -> Result<(), PatternError> {
        write_guarded(path, overwrite, self.to_csv_string())
    }
}

/// Either kind of pattern file, detected from the column count.
#[derive(Debug, Clone)]
pub enum LoadedPattern {
    Univariate(PointPattern),
    Bivariate(BivariatePattern),
}

pub fn load_auto(path: &Path, window: Window) -> Result<LoadedPattern, PatternError> {
    let rows = parse_rows(BufReader::new(fs::File::open(path)?))?;
    let marked = rows.iter().any(|r| matches!(r, CsvRow::Marked { .. }));
    if marked {
        let mut p1 = Vec::new();
        let mut p2 = Vec::new();
        for row in rows {
            match row {
                CsvRow::Plain { line, .. } => return Err(PatternError::MixedColumns { line }),
                CsvRow::Marked { p, mark, .. } => {
                    if mark == 1 {
                        p1.push(p)
                    } else {
                        p2.push(p)
                    }
                }
            }
        }
        Ok(LoadedPattern::Bivariate(BivariatePattern::new(p1, p2, window)?))
    } else {
        let mut points = Vec::new();
        for row in rows {
            if let CsvRow::Plain { p, .. } = row {
                points.push(p);
            }
        }
        Ok(LoadedPattern::Univariate(PointPattern::new(points, window)?))
    }
}

/// 17 significant digits: enough to reproduce any f64 bit pattern exactly.
pub(crate) fn fmt_coord(v: f64) -> String {
    format!("{v:.16e}")
}

fn write_guarded(path: &Path, overwrite: bool, content: String) -> Result<(), PatternError> {
    if path.exists() && !overwrite {
        return Err(PatternError::FileExists(path.to_path_buf()));
    }
    fs::write(path, content)?;
    Ok(())
}

enum CsvRow {
    Plain { line: usize, p: Point },
    Marked { line: usize, p: Point, mark: u8 },
}

fn is_header(line: &str) -> bool {
    let norm: String = line.to_ascii_lowercase().chars().filter(|c| !c.is_whitespace()).collect();
    norm == "x,y" || norm == "x,y,mark"
}

fn parse_rows<R: Read>(reader: R) -> Result<Vec<CsvRow>, PatternError> {
    let mut rows = Vec::new();
    for (idx, line) in BufReader::new(reader).lines().enumerate() {
        let line_no = idx + 1;
        let raw = line?;
        let text = raw.trim_end_matches('\r');
        if text.trim().is_empty() {
            continue;
        }
        if line_no == 1 && is_header(text) {
            continue;
        }
        let fields: Vec<&str> = text.split(',').collect();
        match fields.len() {
            2 => {
                let p = parse_point(fields[0], fields[1]).ok_or_else(|| PatternError::Parse {
                    line: line_no,
                    content: text.to_string(),
                })?;
                rows.push(CsvRow::Plain { line: line_no, p });
            }
            3 => {
                let p = parse_point(fields[0], fields[1]).ok_or_else(|| PatternError::Parse {
                    line: line_no,
                    content: text.to_string(),
                })?;
                let mark = match fields[2].trim() {
                    "1" => 1,
                    "2" => 2,
                    other => {
                        return Err(PatternError::BadMark { line: line_no, value: other.to_string() })
                    }
                };
                rows.push(CsvRow::Marked { line: line_no, p, mark });
            }
            other => {
                return Err(PatternError::ColumnCount { line: line_no, expected: 2, got: other })
            }
        }
    }
    Ok(rows)
}

fn parse_point(a: &str, b: &str) -> Option<Point> {
    let x: f64 = a.trim().parse().ok()?;
    let y: f64 = b.trim().parse().ok()?;
    Some(Point::new(x, y))
}

fn detect_duplicates(points: &[Point]) -> bool {
    if points.len() < 2 {
        return false;
    }
    let mut keys: Vec<(u64, u64)> = points.iter().map(|p| (p.x.to_bits(), p.y.to_bits())).collect();
    keys.sort_unstable();
    keys.windows(2).any(|w| w[0] == w[1])
}

/// Uniform-cell spatial index. Cell sides never fall below the query radius
/// it was built for, so a one-ring neighborhood scan is exhaustive.
pub struct CellGrid {
    ncx: usize,
    ncy: usize,
    inv_csx: f64,
    inv_csy: f64,
    x0: f64,
    y0: f64,
    starts: Vec<u32>,
    ids: Vec<u32>,
    pts: Vec<Point>,
}

/// Cap on cells per axis; keeps tiny query radii from exploding the index.
const MAX_CELLS: usize = 1024;

impl CellGrid {
    pub fn build(points: &[Point], window: &Window, radius: f64) -> Self {
        let dims = |extent: f64| -> usize {
            if radius <= 0.0 {
                return MAX_CELLS;
            }
            ((extent / radius).floor() as usize).clamp(1, MAX_CELLS)
        };
        let ncx = dims(window.width());
        let ncy = dims(window.height());
        let csx = window.width() / ncx as f64;
        let csy = window.height() / ncy as f64;
        let (x0, _) = window.x_range();
        let (y0, _) = window.y_range();
        let cell_of = |p: &Point| -> usize {
            let cx = (((p.x - x0) / csx) as usize).min(ncx - 1);
            let cy = (((p.y - y0) / csy) as usize).min(ncy - 1);
            cy * ncx + cx
        };
        let ncells = ncx * ncy;
        let mut counts = vec![0u32; ncells + 1];
        for p in points {
            counts[cell_of(p) + 1] += 1;
        }
        for i in 0..ncells {
            counts[i + 1] += counts[i];
        }
        let starts = counts.clone();
        let mut cursor = counts;
        let mut ids = vec![0u32; points.len()];
        let mut pts = vec![Point::new(0.0, 0.0); points.len()];
        for (i, p) in points.iter().enumerate() {
            let c = cell_of(p);
            let slot = cursor[c] as usize;
            ids[slot] = i as u32;
            pts[slot] = *p;
            cursor[c] += 1;
        }
        CellGrid { ncx, ncy, inv_csx: 1.0 / csx, inv_csy: 1.0 / csy, x0, y0, starts, ids, pts }
    }

    /// Visits every indexed point within the L-infinity box of half-width
    /// `hw` around `center` (callers needing a Euclidean ball filter further).
    /// Visit order is fixed by the grid layout, independent of threading.
    pub fn for_box<F: FnMut(usize, Point)>(&self, center: Point, hw: f64, mut f: F) {
        let lo_x = ((center.x - hw - self.x0) * self.inv_csx).floor();
        let hi_x = ((center.x + hw - self.x0) * self.inv_csx).floor();
        let lo_y = ((center.y - hw - self.y0) * self.inv_csy).floor();
        let hi_y = ((center.y + hw - self.y0) * self.inv_csy).floor();
        let cx0 = (lo_x.max(0.0) as usize).min(self.ncx - 1);
        let cx1 = (hi_x.max(0.0) as usize).min(self.ncx - 1);
        let cy0 = (lo_y.max(0.0) as usize).min(self.ncy - 1);
        let cy1 = (hi_y.max(0.0) as usize).min(self.ncy - 1);
        for cy in cy0..=cy1 {
            for cx in cx0..=cx1 {
                let c = cy * self.ncx + cx;
                let a = self.starts[c] as usize;
                let b = self.starts[c + 1] as usize;
                for k in a..b {
                    let q = self.pts[k];
                    if (q.x - center.x).abs() <= hw && (q.y - center.y).abs() <= hw {
                        f(self.ids[k] as usize, q);
                    }
                }
            }
        }
    }
}
