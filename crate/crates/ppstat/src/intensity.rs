//! Intensity estimation for point patterns: truncated-Gaussian kernel
//! estimators with Diggle edge correction (plain and leave-one-out),
//! parametric profile fitting, and likelihood/Campbell-based bandwidth
//! selection.
//!
//! The separable 2-D kernel is a product of 1-D Gaussians truncated at
//! `k = 3` standard deviations and renormalized, so the kernel integrates to
//! one exactly and all window masses reduce to differences of 1-D Gaussian
//! CDFs.

use std::sync::Arc;

use thiserror::Error;

use crate::geometry::{Point, Window};
use crate::numeric::{gauss_legendre, integrate_gl, midpoint_2d};
use crate::pattern::{CellGrid, PointPattern};

/// Truncation radius in units of sigma.
pub const TRUNCATION_K: f64 = 3.0;

/// Resolution of the midpoint rule used to normalize parametric profiles.
pub const PROFILE_QUAD_CELLS: usize = 512;

#[derive(Debug, Error)]
pub enum IntensityError {
    #[error("bandwidth must be positive and finite, got {0}")]
    BadSigma(f64),
    #[error("operation requires a nonempty pattern")]
    EmptyPattern,
    #[error("bandwidth grid is empty")]
    EmptyGrid,
    #[error("leave-one-out likelihood is degenerate (-inf) at every grid bandwidth")]
    AllDegenerate,
    #[error("exclusion index {index} out of range for pattern of size {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("profile integrates to {integral}; parametric intensity needs a positive integral")]
    ZeroProfile { integral: f64 },
}

/// Standard normal CDF.
fn phi(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

/// Separable truncated-Gaussian smoothing kernel.
#[derive(Debug, Clone, Copy)]
pub struct Kernel2d {
    sigma: f64,
    cutoff: f64,
    inv_two_sigma_sq: f64,
    peak: f64,
}

impl Kernel2d {
    pub fn new(sigma: f64) -> Result<Self, IntensityError> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(IntensityError::BadSigma(sigma));
        }
        let z = libm::erf(TRUNCATION_K / std::f64::consts::SQRT_2);
        let axis_scale = 1.0 / ((2.0 * std::f64::consts::PI).sqrt() * sigma * z);
        Ok(Kernel2d {
            sigma,
            cutoff: TRUNCATION_K * sigma,
            inv_two_sigma_sq: 0.5 / (sigma * sigma),
            peak: axis_scale * axis_scale,
        })
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    /// Half-width of the square support, `k * sigma`.
    pub fn cutoff(&self) -> f64 {
        self.cutoff
    }

    /// Kernel density at lag `h`; zero outside the square support.
    pub fn eval(&self, h: Point) -> f64 {
        if h.x.abs() > self.cutoff || h.y.abs() > self.cutoff {
            return 0.0;
        }
        self.peak * (-(h.x * h.x + h.y * h.y) * self.inv_two_sigma_sq).exp()
    }

    /// Value at the origin, `1 / (2 pi sigma^2 Z^2)`.
    pub fn peak(&self) -> f64 {
        self.peak
    }

    /// Mass of the 1-D truncated kernel centered at `c` over `[a, b]`.
    fn axis_mass(&self, c: f64, a: f64, b: f64) -> f64 {
        let z = libm::erf(TRUNCATION_K / std::f64::consts::SQRT_2);
        let lo = (a - c).max(-self.cutoff);
        let hi = (b - c).min(self.cutoff);
        if hi <= lo {
            return 0.0;
        }
        ((phi(hi / self.sigma) - phi(lo / self.sigma)) / z).clamp(0.0, 1.0)
    }
}

/// Diggle edge-correction weight `w_W(x) = ∫_W κ_σ(u - x) du`; separability
/// makes it a product of two 1-D truncated-CDF differences.
pub fn edge_weight(win: &Window, kernel: &Kernel2d, x: Point) -> f64 {
    let (x0, x1) = win.x_range();
    let (y0, y1) = win.y_range();
    kernel.axis_mass(x.x, x0, x1) * kernel.axis_mass(x.y, y0, y1)
}

/// Plain kernel intensity estimate at `x`:
/// `ρ̂(x) = Σ_y κ_σ(y - x) / w_W(x)`.
pub fn rho_hat(pattern: &PointPattern, kernel: &Kernel2d, x: Point) -> f64 {
    let w = edge_weight(pattern.window(), kernel, x);
    if w <= 0.0 {
        return 0.0;
    }
    let sum: f64 = pattern.points().iter().map(|&y| kernel.eval(y.sub(x))).sum();
    sum / w
}

/// Leave-one-out estimate: the term of the excluded point is dropped, so
/// `ρ̂(x) - ρ̄(x, i) = κ_σ(x_i - x) / w_W(x)` exactly.
pub fn rho_bar(
    pattern: &PointPattern,
    kernel: &Kernel2d,
    x: Point,
    exclude: usize,
) -> Result<f64, IntensityError> {
    let n = pattern.n();
    if exclude >= n {
        return Err(IntensityError::IndexOutOfRange { index: exclude, len: n });
    }
    let w = edge_weight(pattern.window(), kernel, x);
    if w <= 0.0 {
        return Ok(0.0);
    }
    let sum: f64 = pattern
        .points()
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != exclude)
        .map(|(_, &y)| kernel.eval(y.sub(x)))
        .sum();
    Ok(sum / w)
}

type ProfileFn = dyn Fn(Point) -> f64 + Send + Sync;

/// Intensity proportional to a known profile, normalized so the window
/// integral equals the observed count: `ρ̂_p(x) = N p(x) / ∫_W p`.
#[derive(Clone)]
pub struct ParametricIntensity {
    profile: Arc<ProfileFn>,
    scale: f64,
    integral: f64,
}

impl ParametricIntensity {
    pub fn new<F>(profile: F, n: usize, window: &Window) -> Result<Self, IntensityError>
    where
        F: Fn(Point) -> f64 + Send + Sync + 'static,
    {
        let integral = midpoint_2d(&profile, window, PROFILE_QUAD_CELLS, PROFILE_QUAD_CELLS);
        if !(integral > 0.0 && integral.is_finite()) {
            return Err(IntensityError::ZeroProfile { integral });
        }
        Ok(ParametricIntensity { profile: Arc::new(profile), scale: n as f64 / integral, integral })
    }

    pub fn eval(&self, x: Point) -> f64 {
        self.scale * (self.profile)(x)
    }

    /// The profile integral used for normalization.
    pub fn profile_integral(&self) -> f64 {
        self.integral
    }
}

/// Kernel-estimator state shared by the plain and leave-out model variants.
pub struct KernelModel {
    kernel: Kernel2d,
    window: Window,
    grid: CellGrid,
}

impl KernelModel {
    fn new(pattern: &PointPattern, kernel: Kernel2d) -> Self {
        let grid = CellGrid::build(pattern.points(), pattern.window(), kernel.cutoff());
        KernelModel {
            kernel,
            window: *pattern.window(),
            grid,
        }
    }

    fn kappa_sum(&self, x: Point) -> f64 {
        let mut s = 0.0;
        let c = self.kernel.cutoff;
        let inv = self.kernel.inv_two_sigma_sq;
        self.grid.for_box(x, c, |_, q| {
            let dx = q.x - x.x;
            let dy = q.y - x.y;
            s += (-(dx * dx + dy * dy) * inv).exp();
        });
        s * self.kernel.peak
    }

    fn rho_plain(&self, x: Point) -> f64 {
        let w = edge_weight(&self.window, &self.kernel, x);
        if w <= 0.0 {
            return 0.0;
        }
        self.kappa_sum(x) / w
    }

    fn rho_excluding(&self, x: Point, exclude: usize) -> f64 {
        let w = edge_weight(&self.window, &self.kernel, x);
        if w <= 0.0 {
            return 0.0;
        }
        let mut s = 0.0;
        let c = self.kernel.cutoff;
        let inv = self.kernel.inv_two_sigma_sq;
        self.grid.for_box(x, c, |i, q| {
            if i != exclude {
                let dx = q.x - x.x;
                let dy = q.y - x.y;
                s += (-(dx * dx + dy * dy) * inv).exp();
            }
        });
        s * self.kernel.peak / w
    }

    /// `Σ_z κ(u - z) κ(v - z) / (w(u) w(v))`: the diagonal of the squared
    /// kernel sum, subtracted by the leave-out product estimator.
    fn diag_sum(&self, u: Point, v: Point) -> f64 {
        let wu = edge_weight(&self.window, &self.kernel, u);
        let wv = edge_weight(&self.window, &self.kernel, v);
        if wu <= 0.0 || wv <= 0.0 {
            return 0.0;
        }
        let c = self.kernel.cutoff;
        let lo = Point::new(u.x.max(v.x) - c, u.y.max(v.y) - c);
        let hi = Point::new(u.x.min(v.x) + c, u.y.min(v.y) + c);
        if lo.x > hi.x || lo.y > hi.y {
            return 0.0;
        }
        let center = Point::new(0.5 * (lo.x + hi.x), 0.5 * (lo.y + hi.y));
        let hw = 0.5 * (hi.x - lo.x).max(hi.y - lo.y);
        let inv = self.kernel.inv_two_sigma_sq;
        let mut s = 0.0;
        self.grid.for_box(center, hw, |_, z| {
            let ax = z.x - u.x;
            let ay = z.y - u.y;
            let bx = z.x - v.x;
            let by = z.y - v.y;
            if ax.abs() <= c && ay.abs() <= c && bx.abs() <= c && by.abs() <= c {
                s += (-(ax * ax + ay * ay + bx * bx + by * by) * inv).exp();
            }
        });
        s * self.kernel.peak * self.kernel.peak / (wu * wv)
    }
}

/// An intensity model: everything the reweighted estimators need to know
/// about `ρ`, namely point evaluation and the product `ρ(u)ρ(v)` (which for
/// the leave-out kernel variant is *not* a product of point evaluations).
pub enum IntensityModel {
    /// A known intensity function.
    Known(Arc<ProfileFn>),
    /// Profile-proportional intensity normalized to the observed count.
    Parametric(ParametricIntensity),
    /// Plain kernel estimator.
    Kernel(KernelModel),
    /// Kernel estimator with diagonal terms removed from products and the
    /// evaluation point dropped from sums at data points.
    KernelLeaveOut(KernelModel),
}

impl IntensityModel {
    pub fn known<F>(f: F) -> Self
    where
        F: Fn(Point) -> f64 + Send + Sync + 'static,
    {
        IntensityModel::Known(Arc::new(f))
    }

    pub fn parametric(p: ParametricIntensity) -> Self {
        IntensityModel::Parametric(p)
    }

    pub fn kernel(pattern: &PointPattern, kernel: Kernel2d) -> Self {
        IntensityModel::Kernel(KernelModel::new(pattern, kernel))
    }

    pub fn kernel_leave_out(pattern: &PointPattern, kernel: Kernel2d) -> Self {
        IntensityModel::KernelLeaveOut(KernelModel::new(pattern, kernel))
    }

    /// Short label used in output metadata.
    pub fn label(&self) -> &'static str {
        match self {
            IntensityModel::Known(_) => "known",
            IntensityModel::Parametric(_) => "parametric",
            IntensityModel::Kernel(_) => "kernel",
            IntensityModel::KernelLeaveOut(_) => "kernel-leaveout",
        }
    }

    pub fn sigma(&self) -> Option<f64> {
        match self {
            IntensityModel::Kernel(m) | IntensityModel::KernelLeaveOut(m) => Some(m.kernel.sigma()),
            _ => None,
        }
    }

    /// Point evaluation. For the leave-out variant, pattern points exactly
    /// coinciding with `x` are excluded from the sum.
    pub fn evaluate(&self, x: Point) -> f64 {
        match self {
            IntensityModel::Known(f) => f(x),
            IntensityModel::Parametric(p) => p.eval(x),
            IntensityModel::Kernel(m) => m.rho_plain(x),
            IntensityModel::KernelLeaveOut(m) => {
                let w = edge_weight(&m.window, &m.kernel, x);
                if w <= 0.0 {
                    return 0.0;
                }
                let mut coincident = 0usize;
                m.grid.for_box(x, 0.0, |_, q| {
                    if q.x == x.x && q.y == x.y {
                        coincident += 1;
                    }
                });
                m.rho_plain(x) - coincident as f64 * m.kernel.peak / w
            }
        }
    }

    /// Evaluation at the `index`-th point of the pattern the model was built
    /// from; leave-out drops exactly that point.
    pub fn at_data_point(&self, x: Point, index: usize) -> f64 {
        match self {
            IntensityModel::KernelLeaveOut(m) => m.rho_excluding(x, index),
            other => other.plain_at(x),
        }
    }

    fn plain_at(&self, x: Point) -> f64 {
        match self {
            IntensityModel::Known(f) => f(x),
            IntensityModel::Parametric(p) => p.eval(x),
            IntensityModel::Kernel(m) | IntensityModel::KernelLeaveOut(m) => m.rho_plain(x),
        }
    }

    /// The product `ρ(u)ρ(v)` entering normalizer integrands. For the
    /// leave-out kernel model this is the double sum without its diagonal:
    /// always bounded above by the plain product.
    pub fn product_evaluate(&self, u: Point, v: Point) -> f64 {
        match self {
            IntensityModel::Known(f) => f(u) * f(v),
            IntensityModel::Parametric(p) => p.eval(u) * p.eval(v),
            IntensityModel::Kernel(m) => m.rho_plain(u) * m.rho_plain(v),
            IntensityModel::KernelLeaveOut(m) => m.rho_plain(u) * m.rho_plain(v) - m.diag_sum(u, v),
        }
    }

    /// Plain point evaluation of one endpoint, for callers that cache it.
    pub(crate) fn endpoint(&self, x: Point) -> f64 {
        self.plain_at(x)
    }

    /// Completes a product from a cached endpoint value.
    pub(crate) fn product_from(&self, rho_u: f64, u: Point, v: Point) -> f64 {
        match self {
            IntensityModel::KernelLeaveOut(m) => rho_u * m.rho_plain(v) - m.diag_sum(u, v),
            other => rho_u * other.plain_at(v),
        }
    }
}

/// 32 log-spaced bandwidths spanning `[0.01, 0.7] * diameter / sqrt(2)`.
pub fn default_sigma_grid(window: &Window) -> Vec<f64> {
    let scale = window.diameter() / std::f64::consts::SQRT_2;
    let lo = 0.01 * scale;
    let hi = 0.7 * scale;
    let n = 32;
    (0..n)
        .map(|i| lo * (hi / lo).powf(i as f64 / (n - 1) as f64))
        .collect()
}

/// Campbell-count criterion for a candidate bandwidth: squared gap between
/// `Σ_i 1/ρ̂(x_i)` and the window area, with ρ̂ the *uncorrected* kernel sum
/// (self-term included, no edge weight). The self-term deflates the sum at
/// small bandwidths while boundary mass leakage inflates it at large ones,
/// so the gap has an interior root; edge-correcting would cancel both
/// effects and push the minimizer to the top of the grid.
pub fn cvl_score(pattern: &PointPattern, sigma: f64) -> Result<f64, IntensityError> {
    let kernel = Kernel2d::new(sigma)?;
    let grid = CellGrid::build(pattern.points(), pattern.window(), kernel.cutoff());
    let mut acc = 0.0;
    for &x in pattern.points() {
        let mut s = 0.0;
        let inv = kernel.inv_two_sigma_sq;
        grid.for_box(x, kernel.cutoff(), |_, q| {
            let dx = q.x - x.x;
            let dy = q.y - x.y;
            s += (-(dx * dx + dy * dy) * inv).exp();
        });
        acc += 1.0 / (s * kernel.peak());
    }
    let gap = acc - pattern.window().area();
    Ok(gap * gap)
}

/// Leave-one-out log-likelihood criterion:
/// `Σ_i log ρ̄(x_i) - ∫_W ρ̂(u) du`, `-inf` when any `ρ̄(x_i)` vanishes.
/// The integral factorizes into per-point products of 1-D integrals
/// (Gauss-Legendre, 32 nodes per axis).
pub fn lcv_score(pattern: &PointPattern, sigma: f64) -> Result<f64, IntensityError> {
    let kernel = Kernel2d::new(sigma)?;
    let model = KernelModel::new(pattern, kernel);
    let mut loglik = 0.0;
    for (i, &x) in pattern.points().iter().enumerate() {
        let rho = model.rho_excluding(x, i);
        if rho <= 0.0 {
            return Ok(f64::NEG_INFINITY);
        }
        loglik += rho.ln();
    }
    let (nodes, weights) = gauss_legendre(32);
    let win = pattern.window();
    let (x0, x1) = win.x_range();
    let (y0, y1) = win.y_range();
    let z = libm::erf(TRUNCATION_K / std::f64::consts::SQRT_2);
    let axis_integral = |c: f64, lo: f64, hi: f64, other: (f64, f64)| -> f64 {
        let a = lo.max(c - kernel.cutoff());
        let b = hi.min(c + kernel.cutoff());
        if b <= a {
            return 0.0;
        }
        let f = |s: f64| {
            let t = (s - c) / sigma;
            let q = (-0.5 * t * t).exp() / ((2.0 * std::f64::consts::PI).sqrt() * sigma * z);
            let w_axis = kernel.axis_mass(s, other.0, other.1);
            if w_axis <= 0.0 {
                0.0
            } else {
                q / w_axis
            }
        };
        integrate_gl(&f, a, b, &nodes, &weights)
    };
    let mut integral = 0.0;
    for &y in pattern.points() {
        integral += axis_integral(y.x, x0, x1, (x0, x1)) * axis_integral(y.y, y0, y1, (y0, y1));
    }
    Ok(loglik - integral)
}

fn prepare_grid(pattern: &PointPattern, grid: &[f64]) -> Result<Vec<f64>, IntensityError> {
    if pattern.is_empty() {
        return Err(IntensityError::EmptyPattern);
    }
    if grid.is_empty() {
        return Err(IntensityError::EmptyGrid);
    }
    let mut g = grid.to_vec();
    g.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(g)
}

/// Selects the bandwidth minimizing the Campbell-count criterion; ties go to
/// the smaller bandwidth.
pub fn bandwidth_cvl(pattern: &PointPattern, grid: &[f64]) -> Result<f64, IntensityError> {
    let grid = prepare_grid(pattern, grid)?;
    let mut best = (f64::INFINITY, grid[0]);
    for &sigma in &grid {
        let score = cvl_score(pattern, sigma)?;
        if score < best.0 {
            best = (score, sigma);
        }
    }
    Ok(best.1)
}

/// Selects the bandwidth maximizing the leave-one-out likelihood criterion;
/// ties go to the smaller bandwidth. Errors if every candidate is `-inf`.
pub fn bandwidth_lcv(pattern: &PointPattern, grid: &[f64]) -> Result<f64, IntensityError> {
    let grid = prepare_grid(pattern, grid)?;
    let mut best: Option<(f64, f64)> = None;
    for &sigma in &grid {
        let score = lcv_score(pattern, sigma)?;
        if score == f64::NEG_INFINITY {
            continue;
        }
        match best {
            Some((s, _)) if score <= s => {}
            _ => best = Some((score, sigma)),
        }
    }
    best.map(|(_, s)| s).ok_or(IntensityError::AllDegenerate)
}

/// Pcf smoothing bandwidth default: `0.15 / sqrt(n)` clamped to
/// `[0.005, 0.05]`.
pub fn default_pcf_bandwidth(expected_n: f64) -> f64 {
    (0.15 / expected_n.max(1.0).sqrt()).clamp(0.005, 0.05)
}
