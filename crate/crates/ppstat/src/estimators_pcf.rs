//! Kernel estimators of the pair correlation function and its cross
//! version. Each distinct pair smears a smoothing kernel around its lag
//! (vector forms) or separation (isotropic forms), and the smeared mass is
//! divided by a normalizer:
//!
//! * global: `γ` evaluated at the grid node, shared by all pairs near it
//! * local: a per-pair weight `1/(ρ(x) ρ(y) |W ∩ W_{x−y}|)`
//!
//! Isotropic forms additionally divide by the sphere measure `2πr`; the
//! `tilde` local form divides by the pair separation instead of the node
//! radius, trading positive for negative small-`r` bias. The partially
//! reweighted cross estimator normalizes one factor pointwise by `ρ₂(y)`
//! and the other in aggregate by `∫ ρ₁` over the shifted window overlap.
//!
//! Sums accumulate in sorted pair order (by separation, or by lag `x`),
//! fixed by the input pattern alone, so results do not depend on how the
//! surrounding code schedules work.

use std::f64::consts::TAU;

use thiserror::Error;

use crate::curve::{CurveError, CurveEstimate, CurveMeta, SurfaceEstimate};
use crate::gamma::{GammaError, GammaFunction, GammaKind};
use crate::geometry::Point;
use crate::intensity::{IntensityModel, Kernel2d, TRUNCATION_K};
use crate::pattern::{BivariatePattern, PointPattern};

#[derive(Debug, Error)]
pub enum PcfError {
    #[error(transparent)]
    Curve(#[from] CurveError),
    #[error("smoothing bandwidth must be positive and finite, got {b}")]
    BadBandwidth { b: f64 },
    #[error("correlation grids need strictly positive distances, got {r}")]
    NonPositiveRadius { r: f64 },
    #[error("normalizer failed at grid lag ({hx}, {hy}): {source}")]
    GammaAtLag { hx: f64, hy: f64, source: GammaError },
    #[error("normalizer {value} is not positive at grid lag ({hx}, {hy})")]
    NonPositiveGammaLag { hx: f64, hy: f64, value: f64 },
    #[error("normalizer failed at grid distance {r}: {source}")]
    GammaAtDistance { r: f64, source: GammaError },
    #[error("normalizer {value} is not positive at grid distance {r}")]
    NonPositiveGammaDistance { r: f64, value: f64 },
    #[error("intensity {value} is not positive at point {index} ({x}, {y})")]
    NonPositiveIntensity { index: usize, x: f64, y: f64, value: f64 },
    #[error("overlap volume vanishes for pair ({i}, {j}) at distance {d}")]
    ZeroOverlap { i: usize, j: usize, d: f64 },
    #[error("the intensity integral term must be a cross vector normalizer, got {got:?}")]
    WrongIntegralKind { got: GammaKind },
}

/// Truncated Gaussian probability density on `[-3b, 3b]`, renormalized so
/// its mass is exactly one: `κ̃_b(t) = κ̃₁(t/b)/b`.
#[derive(Debug, Clone, Copy)]
pub struct Kernel1d {
    bandwidth: f64,
    cutoff: f64,
    inv_two_b_sq: f64,
    peak: f64,
}

impl Kernel1d {
    pub fn new(bandwidth: f64) -> Result<Self, PcfError> {
        if !(bandwidth.is_finite() && bandwidth > 0.0) {
            return Err(PcfError::BadBandwidth { b: bandwidth });
        }
        let z = libm::erf(TRUNCATION_K / std::f64::consts::SQRT_2);
        Ok(Kernel1d {
            bandwidth,
            cutoff: TRUNCATION_K * bandwidth,
            inv_two_b_sq: 1.0 / (2.0 * bandwidth * bandwidth),
            peak: 1.0 / (bandwidth * TAU.sqrt() * z),
        })
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    /// Support half-width `3b`.
    pub fn cutoff(&self) -> f64 {
        self.cutoff
    }

    pub fn peak(&self) -> f64 {
        self.peak
    }

    pub fn eval(&self, t: f64) -> f64 {
        if t.abs() > self.cutoff {
            return 0.0;
        }
        self.peak * (-t * t * self.inv_two_b_sq).exp()
    }
}

/// Which of the two isotropic local forms to compute: `Hat` divides by the
/// node radius, `Tilde` by each pair's separation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LocalIsoForm {
    Hat,
    Tilde,
}

fn meta_for(
    estimator: &str,
    b: f64,
    gamma: Option<&GammaFunction>,
    models: &[&IntensityModel],
) -> CurveMeta {
    let mut meta = CurveMeta::named(estimator);
    meta.b = Some(b);
    if let Some(g) = gamma {
        meta.alpha = Some(g.alpha());
    }
    if let Some(m) = models.first() {
        meta.intensity = m.label().to_string();
        meta.sigma = m.sigma();
    }
    meta
}

/// Intensity values at pattern points, computed once per point on demand.
struct PointIntensities<'m> {
    model: &'m IntensityModel,
    cache: Vec<f64>,
}

impl<'m> PointIntensities<'m> {
    fn new(model: &'m IntensityModel, n: usize) -> Self {
        PointIntensities { model, cache: vec![f64::NAN; n] }
    }

    fn get(&mut self, pts: &[Point], i: usize) -> Result<f64, PcfError> {
        let v = self.cache[i];
        if !v.is_nan() {
            return Ok(v);
        }
        let v = self.model.at_data_point(pts[i], i);
        if !(v > 0.0) {
            return Err(PcfError::NonPositiveIntensity {
                index: i,
                x: pts[i].x,
                y: pts[i].y,
                value: v,
            });
        }
        self.cache[i] = v;
        Ok(v)
    }
}

/// Weighted pair separations sorted ascending, queried one kernel window
/// at a time.
struct RadialPairs {
    d: Vec<f64>,
    w: Vec<f64>,
}

impl RadialPairs {
    fn collect(
        pairs: impl IntoIterator<Item = (usize, usize, f64)>,
        lo: f64,
        mut weight: impl FnMut(usize, usize, f64) -> Result<f64, PcfError>,
    ) -> Result<Self, PcfError> {
        let mut v: Vec<(f64, f64)> = Vec::new();
        for (i, j, d) in pairs {
            if d < lo {
                continue;
            }
            v.push((d, weight(i, j, d)?));
        }
        // stable sort keeps the enumeration order among equal separations,
        // so the summation order below is reproducible
        v.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        let (d, w) = v.into_iter().unzip();
        Ok(RadialPairs { d, w })
    }

    fn kernel_sum(&self, kernel: &Kernel1d, r: f64) -> f64 {
        let lo = self.d.partition_point(|&d| d < r - kernel.cutoff());
        let hi = self.d.partition_point(|&d| d <= r + kernel.cutoff());
        let mut s = 0.0;
        for k in lo..hi {
            s += self.w[k] * kernel.eval(r - self.d[k]);
        }
        s
    }
}

fn radial_curve(
    pairs: &RadialPairs,
    kernel: &Kernel1d,
    grid: &[f64],
    meta: CurveMeta,
    mut denom: impl FnMut(f64) -> Result<f64, PcfError>,
) -> Result<CurveEstimate, PcfError> {
    let mut values = Vec::with_capacity(grid.len());
    for &r in grid {
        if !(r > 0.0) {
            return Err(PcfError::NonPositiveRadius { r });
        }
        values.push(pairs.kernel_sum(kernel, r) / denom(r)?);
    }
    Ok(CurveEstimate::new(grid.to_vec(), values, meta)?)
}

fn radial_lo(grid: &[f64], kernel: &Kernel1d) -> (f64, f64) {
    let r_max = *grid.last().unwrap_or(&0.0);
    let lo = (*grid.first().unwrap_or(&0.0) - kernel.cutoff()).max(0.0);
    (lo, r_max + kernel.cutoff())
}

/// Lag-grid extent padded by the kernel support; pairs outside never
/// contribute to any node.
struct LagReach {
    x_lo: f64,
    x_hi: f64,
    y_lo: f64,
    y_hi: f64,
}

impl LagReach {
    fn new(xs: &[f64], ys: &[f64], cutoff: f64) -> Result<Self, PcfError> {
        if xs.is_empty() || ys.is_empty() {
            return Err(CurveError::BadGrid("empty lag grid".into()).into());
        }
        Ok(LagReach {
            x_lo: xs[0] - cutoff,
            x_hi: xs[xs.len() - 1] + cutoff,
            y_lo: ys[0] - cutoff,
            y_hi: ys[ys.len() - 1] + cutoff,
        })
    }

    fn contains(&self, v: Point) -> bool {
        v.x >= self.x_lo && v.x <= self.x_hi && v.y >= self.y_lo && v.y <= self.y_hi
    }

    fn radius(&self) -> f64 {
        let mx = self.x_lo.abs().max(self.x_hi.abs());
        let my = self.y_lo.abs().max(self.y_hi.abs());
        mx.hypot(my)
    }
}

/// Weighted pair lags sorted by their `x` component.
struct LagPairs {
    lags: Vec<Point>,
    w: Vec<f64>,
}

impl LagPairs {
    fn new(mut pairs: Vec<(Point, f64)>) -> Self {
        pairs.sort_by(|a, b| a.0.x.partial_cmp(&b.0.x).unwrap());
        let (lags, w) = pairs.into_iter().unzip();
        LagPairs { lags, w }
    }

    fn sum_at(&self, kernel: &Kernel2d, h: Point) -> f64 {
        let c = kernel.cutoff();
        let start = self.lags.partition_point(|p| p.x < h.x - c);
        let mut s = 0.0;
        for k in start..self.lags.len() {
            let v = self.lags[k];
            if v.x > h.x + c {
                break;
            }
            let dy = h.y - v.y;
            if dy.abs() <= c {
                s += self.w[k] * kernel.eval(Point::new(h.x - v.x, dy));
            }
        }
        s
    }
}

fn lag_surface(
    pairs: &LagPairs,
    kernel: &Kernel2d,
    xs: &[f64],
    ys: &[f64],
    meta: CurveMeta,
    mut denom: impl FnMut(Point) -> Result<f64, PcfError>,
) -> Result<SurfaceEstimate, PcfError> {
    let mut values = Vec::with_capacity(xs.len() * ys.len());
    for &hy in ys {
        for &hx in xs {
            let h = Point::new(hx, hy);
            values.push(pairs.sum_at(kernel, h) / denom(h)?);
        }
    }
    Ok(SurfaceEstimate::new(xs.to_vec(), ys.to_vec(), values, meta)?)
}

fn node_gamma_vec(gamma: &GammaFunction, h: Point) -> Result<f64, PcfError> {
    let g = gamma
        .eval_vec(h)
        .map_err(|source| PcfError::GammaAtLag { hx: h.x, hy: h.y, source })?;
    if !(g > 0.0) {
        return Err(PcfError::NonPositiveGammaLag { hx: h.x, hy: h.y, value: g });
    }
    Ok(g)
}

fn node_gamma_iso(gamma: &GammaFunction, r: f64) -> Result<f64, PcfError> {
    let g = gamma.eval_iso(r).map_err(|source| PcfError::GammaAtDistance { r, source })?;
    if !(g > 0.0) {
        return Err(PcfError::NonPositiveGammaDistance { r, value: g });
    }
    Ok(g)
}

/// Global estimator on a lag grid: `ĝ(h) = Σ^{≠} κ_b(h−(y−x)) / γ(h)`.
pub fn g_global(
    pattern: &PointPattern,
    gamma: &GammaFunction,
    kernel: &Kernel2d,
    xs: &[f64],
    ys: &[f64],
) -> Result<SurfaceEstimate, PcfError> {
    let reach = LagReach::new(xs, ys, kernel.cutoff())?;
    let pts = pattern.points();
    let mut v = Vec::new();
    for (i, j, _) in pattern.close_pairs(reach.radius()) {
        let lag = pts[j].sub(pts[i]);
        if reach.contains(lag) {
            v.push((lag, 1.0));
        }
    }
    let pairs = LagPairs::new(v);
    let meta = meta_for("g_global", kernel.sigma(), Some(gamma), &[]);
    lag_surface(&pairs, kernel, xs, ys, meta, |h| node_gamma_vec(gamma, h))
}

/// Local estimator on a lag grid: each pair carries the weight
/// `1/(ρ(x) ρ(y) |W ∩ W_{x−y}|)`.
pub fn g_local(
    pattern: &PointPattern,
    model: &IntensityModel,
    kernel: &Kernel2d,
    xs: &[f64],
    ys: &[f64],
) -> Result<SurfaceEstimate, PcfError> {
    let reach = LagReach::new(xs, ys, kernel.cutoff())?;
    let pts = pattern.points();
    let win = pattern.window();
    let mut rho = PointIntensities::new(model, pts.len());
    let mut v = Vec::new();
    for (i, j, d) in pattern.close_pairs(reach.radius()) {
        let lag = pts[j].sub(pts[i]);
        if !reach.contains(lag) {
            continue;
        }
        let ov = win.overlap_volume(lag);
        if !(ov > 0.0) {
            return Err(PcfError::ZeroOverlap { i, j, d });
        }
        let w = rho.get(pts, i)? * rho.get(pts, j)? * ov;
        v.push((lag, 1.0 / w));
    }
    let pairs = LagPairs::new(v);
    let meta = meta_for("g_local", kernel.sigma(), None, &[model]);
    lag_surface(&pairs, kernel, xs, ys, meta, |_| Ok(1.0))
}

/// Global isotropic estimator:
/// `ĝ^iso(r) = Σ^{≠} κ̃_b(r−‖y−x‖) / (2πr γ^iso(r))`.
pub fn g_global_iso(
    pattern: &PointPattern,
    gamma: &GammaFunction,
    kernel: &Kernel1d,
    grid: &[f64],
) -> Result<CurveEstimate, PcfError> {
    let (lo, reach) = radial_lo(grid, kernel);
    let pairs = RadialPairs::collect(pattern.close_pairs(reach), lo, |_, _, _| Ok(1.0))?;
    let meta = meta_for("g_global_iso", kernel.bandwidth(), Some(gamma), &[]);
    radial_curve(&pairs, kernel, grid, meta, |r| Ok(TAU * r * node_gamma_iso(gamma, r)?))
}

/// Local isotropic estimator in either form. Both weight pairs by
/// `1/(ρ(x) ρ(y) |W ∩ W_{x−y}|)`; `Hat` then divides the sum by `2πr`
/// while `Tilde` folds each pair's own separation into its weight and
/// divides by `2π` only.
pub fn g_local_iso(
    pattern: &PointPattern,
    model: &IntensityModel,
    kernel: &Kernel1d,
    grid: &[f64],
    form: LocalIsoForm,
) -> Result<CurveEstimate, PcfError> {
    let (lo, reach) = radial_lo(grid, kernel);
    let pts = pattern.points();
    let win = pattern.window();
    let mut rho = PointIntensities::new(model, pts.len());
    let pairs = RadialPairs::collect(pattern.close_pairs(reach), lo, |i, j, d| {
        let ov = win.overlap_volume(pts[j].sub(pts[i]));
        if !(ov > 0.0) {
            return Err(PcfError::ZeroOverlap { i, j, d });
        }
        let mut w = rho.get(pts, i)? * rho.get(pts, j)? * ov;
        if form == LocalIsoForm::Tilde {
            w *= d;
        }
        Ok(1.0 / w)
    })?;
    let name = match form {
        LocalIsoForm::Hat => "g_local_iso_hat",
        LocalIsoForm::Tilde => "g_local_iso_tilde",
    };
    let meta = meta_for(name, kernel.bandwidth(), None, &[model]);
    match form {
        LocalIsoForm::Hat => radial_curve(&pairs, kernel, grid, meta, |r| Ok(TAU * r)),
        LocalIsoForm::Tilde => radial_curve(&pairs, kernel, grid, meta, |_| Ok(TAU)),
    }
}

/// Cross global estimator over pairs `(x ∈ X₁, y ∈ X₂)`:
/// `ĉ(h) = Σ κ_b(h−(y−x)) / γ₁₂(h)`.
pub fn c_global(
    bivariate: &BivariatePattern,
    gamma12: &GammaFunction,
    kernel: &Kernel2d,
    xs: &[f64],
    ys: &[f64],
) -> Result<SurfaceEstimate, PcfError> {
    let reach = LagReach::new(xs, ys, kernel.cutoff())?;
    let pts1 = bivariate.first().points();
    let pts2 = bivariate.second().points();
    let mut v = Vec::new();
    for (i, j, _) in bivariate.close_cross_pairs(reach.radius()) {
        let lag = pts2[j].sub(pts1[i]);
        if reach.contains(lag) {
            v.push((lag, 1.0));
        }
    }
    let pairs = LagPairs::new(v);
    let meta = meta_for("c_global", kernel.sigma(), Some(gamma12), &[]);
    lag_surface(&pairs, kernel, xs, ys, meta, |h| node_gamma_vec(gamma12, h))
}

/// Cross local estimator: weight `1/(ρ₁(x) ρ₂(y) |W ∩ W_{x−y}|)`.
pub fn c_local(
    bivariate: &BivariatePattern,
    model1: &IntensityModel,
    model2: &IntensityModel,
    kernel: &Kernel2d,
    xs: &[f64],
    ys: &[f64],
) -> Result<SurfaceEstimate, PcfError> {
    let reach = LagReach::new(xs, ys, kernel.cutoff())?;
    let pts1 = bivariate.first().points();
    let pts2 = bivariate.second().points();
    let win = bivariate.first().window();
    let mut rho1 = PointIntensities::new(model1, pts1.len());
    let mut rho2 = PointIntensities::new(model2, pts2.len());
    let mut v = Vec::new();
    for (i, j, d) in bivariate.close_cross_pairs(reach.radius()) {
        let lag = pts2[j].sub(pts1[i]);
        if !reach.contains(lag) {
            continue;
        }
        let ov = win.overlap_volume(lag);
        if !(ov > 0.0) {
            return Err(PcfError::ZeroOverlap { i, j, d });
        }
        let w = rho1.get(pts1, i)? * rho2.get(pts2, j)? * ov;
        v.push((lag, 1.0 / w));
    }
    let pairs = LagPairs::new(v);
    let meta = meta_for("c_local", kernel.sigma(), None, &[model1, model2]);
    lag_surface(&pairs, kernel, xs, ys, meta, |_| Ok(1.0))
}

/// Cross global isotropic estimator:
/// `ĉ^iso(r) = Σ κ̃_b(r−‖y−x‖) / (2πr γ₁₂^iso(r))`.
pub fn c_global_iso(
    bivariate: &BivariatePattern,
    gamma12: &GammaFunction,
    kernel: &Kernel1d,
    grid: &[f64],
) -> Result<CurveEstimate, PcfError> {
    let (lo, reach) = radial_lo(grid, kernel);
    let pairs = RadialPairs::collect(bivariate.close_cross_pairs(reach), lo, |_, _, _| Ok(1.0))?;
    let meta = meta_for("c_global_iso", kernel.bandwidth(), Some(gamma12), &[]);
    radial_curve(&pairs, kernel, grid, meta, |r| Ok(TAU * r * node_gamma_iso(gamma12, r)?))
}

/// Cross local isotropic estimator, the `Hat` form over cross pairs.
pub fn c_local_iso(
    bivariate: &BivariatePattern,
    model1: &IntensityModel,
    model2: &IntensityModel,
    kernel: &Kernel1d,
    grid: &[f64],
) -> Result<CurveEstimate, PcfError> {
    let (lo, reach) = radial_lo(grid, kernel);
    let pts1 = bivariate.first().points();
    let pts2 = bivariate.second().points();
    let win = bivariate.first().window();
    let mut rho1 = PointIntensities::new(model1, pts1.len());
    let mut rho2 = PointIntensities::new(model2, pts2.len());
    let pairs = RadialPairs::collect(bivariate.close_cross_pairs(reach), lo, |i, j, d| {
        let ov = win.overlap_volume(pts2[j].sub(pts1[i]));
        if !(ov > 0.0) {
            return Err(PcfError::ZeroOverlap { i, j, d });
        }
        Ok(1.0 / (rho1.get(pts1, i)? * rho2.get(pts2, j)? * ov))
    })?;
    let meta = meta_for("c_local_iso", kernel.bandwidth(), None, &[model1, model2]);
    radial_curve(&pairs, kernel, grid, meta, |r| Ok(TAU * r))
}

/// Partially reweighted cross estimator:
/// `ĉ_partial(h) = Σ κ_b(h−(y−x)) / (ρ₂(y) ∫_{W∩W_{−h}} ρ₁)`.
///
/// `rho1_integral` supplies the denominator integral; it must be a cross
/// vector normalizer built from `ρ₁` paired with the constant one (the
/// integral is not even in `h`, so the univariate kind, which folds `h`
/// and `−h` together, would silently corrupt it).
pub fn c_partial(
    bivariate: &BivariatePattern,
    model2: &IntensityModel,
    rho1_integral: &GammaFunction,
    kernel: &Kernel2d,
    xs: &[f64],
    ys: &[f64],
) -> Result<SurfaceEstimate, PcfError> {
    if rho1_integral.kind() != GammaKind::CrossVector {
        return Err(PcfError::WrongIntegralKind { got: rho1_integral.kind() });
    }
    let reach = LagReach::new(xs, ys, kernel.cutoff())?;
    let pts1 = bivariate.first().points();
    let pts2 = bivariate.second().points();
    let mut rho2 = PointIntensities::new(model2, pts2.len());
    let mut v = Vec::new();
    for (i, j, _) in bivariate.close_cross_pairs(reach.radius()) {
        let lag = pts2[j].sub(pts1[i]);
        if !reach.contains(lag) {
            continue;
        }
        v.push((lag, 1.0 / rho2.get(pts2, j)?));
    }
    let pairs = LagPairs::new(v);
    let mut meta = meta_for("c_partial", kernel.sigma(), Some(rho1_integral), &[model2]);
    meta.alpha = Some(rho1_integral.alpha());
    lag_surface(&pairs, kernel, xs, ys, meta, |h| node_gamma_vec(rho1_integral, h))
}
