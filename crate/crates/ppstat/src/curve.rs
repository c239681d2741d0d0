//! Estimate containers: function estimates on distance grids, surface
//! estimates on lag grids, and their CSV output format.

use std::io::Write as IoWrite;
use std::path::Path;

use thiserror::Error;

use crate::pattern::fmt_coord;

#[derive(Debug, Error)]
pub enum CurveError {
    #[error("grid must be finite, non-negative and strictly increasing: {0}")]
    BadGrid(String),
    #[error("values length {values} does not match grid length {grid}")]
    LengthMismatch { grid: usize, values: usize },
}

/// Descriptive metadata carried through estimation and into output files.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CurveMeta {
    /// Estimator identifier, e.g. `k_global_iso`.
    pub estimator: String,
    /// Intensity model label (`known`, `parametric`, `kernel`,
    /// `kernel-leaveout`).
    pub intensity: String,
    /// Intensity smoothing bandwidth, when a kernel model was used.
    pub sigma: Option<f64>,
    /// Pair-distance smoothing bandwidth, for density-type estimators.
    pub b: Option<f64>,
    /// Monte Carlo cv threshold used for normalizers.
    pub alpha: Option<f64>,
    /// Seed of the replicate or sample bank the estimate depends on.
    pub seed: Option<u64>,
}

impl CurveMeta {
    pub fn named(estimator: &str) -> Self {
        CurveMeta { estimator: estimator.to_string(), ..Default::default() }
    }

    fn header_lines(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("# estimator={}\n", self.estimator));
        if !self.intensity.is_empty() {
            s.push_str(&format!("# intensity={}\n", self.intensity));
        }
        if let Some(v) = self.sigma {
            s.push_str(&format!("# sigma={}\n", fmt_coord(v)));
        }
        if let Some(v) = self.b {
            s.push_str(&format!("# b={}\n", fmt_coord(v)));
        }
        if let Some(v) = self.alpha {
            s.push_str(&format!("# alpha={}\n", fmt_coord(v)));
        }
        if let Some(v) = self.seed {
            s.push_str(&format!("# seed={v}\n"));
        }
        s
    }
}

fn check_grid(grid: &[f64]) -> Result<(), CurveError> {
    if grid.is_empty() {
        return Err(CurveError::BadGrid("empty grid".into()));
    }
    if grid.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(CurveError::BadGrid("grid entries must be finite and non-negative".into()));
    }
    if grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(CurveError::BadGrid("grid must be strictly increasing".into()));
    }
    Ok(())
}

/// A function estimate on a strictly increasing distance grid.
#[derive(Debug, Clone)]
pub struct CurveEstimate {
    grid: Vec<f64>,
    values: Vec<f64>,
    pub meta: CurveMeta,
}

impl CurveEstimate {
    pub fn new(grid: Vec<f64>, values: Vec<f64>, meta: CurveMeta) -> Result<Self, CurveError> {
        check_grid(&grid)?;
        if grid.len() != values.len() {
            return Err(CurveError::LengthMismatch { grid: grid.len(), values: values.len() });
        }
        Ok(CurveEstimate { grid, values, meta })
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }

    pub fn to_csv_string(&self) -> String {
        let mut s = self.meta.header_lines();
        s.push_str("t,value\n");
        for (t, v) in self.grid.iter().zip(&self.values) {
            s.push_str(&format!("{},{}\n", fmt_coord(*t), fmt_coord(*v)));
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> std::io::Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(self.to_csv_string().as_bytes())?;
        f.flush()
    }
}

/// A surface estimate on a uniform 2-D lag grid (row-major over `ys`).
#[derive(Debug, Clone)]
pub struct SurfaceEstimate {
    xs: Vec<f64>,
    ys: Vec<f64>,
    values: Vec<f64>,
    pub meta: CurveMeta,
}

impl SurfaceEstimate {
    pub fn new(xs: Vec<f64>, ys: Vec<f64>, values: Vec<f64>, meta: CurveMeta) -> Result<Self, CurveError> {
        if xs.is_empty() || ys.is_empty() {
            return Err(CurveError::BadGrid("empty lag grid".into()));
        }
        if xs.windows(2).any(|w| w[1] <= w[0]) || ys.windows(2).any(|w| w[1] <= w[0]) {
            return Err(CurveError::BadGrid("lag grid must be strictly increasing".into()));
        }
        if values.len() != xs.len() * ys.len() {
            return Err(CurveError::LengthMismatch { grid: xs.len() * ys.len(), values: values.len() });
        }
        Ok(SurfaceEstimate { xs, ys, values, meta })
    }

    pub fn xs(&self) -> &[f64] {
        &self.xs
    }

    pub fn ys(&self) -> &[f64] {
        &self.ys
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn value_at(&self, ix: usize, iy: usize) -> f64 {
        self.values[iy * self.xs.len() + ix]
    }

    pub fn to_csv_string(&self) -> String {
        let mut s = self.meta.header_lines();
        s.push_str("hx,hy,value\n");
        for (iy, y) in self.ys.iter().enumerate() {
            for (ix, x) in self.xs.iter().enumerate() {
                s.push_str(&format!(
                    "{},{},{}\n",
                    fmt_coord(*x),
                    fmt_coord(*y),
                    fmt_coord(self.values[iy * self.xs.len() + ix])
                ));
            }
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> std::io::Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(self.to_csv_string().as_bytes())?;
        f.flush()
    }
}

/// `n` evenly spaced values from `a` to `b` inclusive.
pub fn uniform_grid(a: f64, b: f64, n: usize) -> Vec<f64> {
    assert!(n >= 2 && b > a);
    (0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect()
}

/// Default distance grid for K-type estimates: 129 points on `[0, 0.125]`.
pub fn default_t_grid() -> Vec<f64> {
    uniform_grid(0.0, 0.125, 129)
}

/// Default distance grid for correlation-type estimates: 128 points on
/// `[0.005, 0.125]` (zero excluded, where `1/r` factors blow up).
pub fn default_r_grid() -> Vec<f64> {
    uniform_grid(0.005, 0.125, 128)
}
