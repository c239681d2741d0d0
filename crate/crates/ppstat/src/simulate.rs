//! Point-process generators and analytic ground-truth curves.
//!
//! Covers the designs used in the comparative experiments: homogeneous and
//! bounded inhomogeneous Poisson sampling, independent thinning under a small
//! family of retention profiles, Gaussian random fields drawn by circulant
//! embedding, and log-Gaussian Cox processes (univariate and bivariate) whose
//! log-intensity offsets are solved in closed form so the realized expected
//! count hits a requested target. Every generator is a pure function of its
//! spec and seed.
//!
//! Cox intensities are evaluated by bilinear interpolation on the realized
//! field grid, and points are drawn by thinning a dominating homogeneous
//! process whose rate bounds the interpolated intensity, so samples are exact
//! for the interpolated field. Count calibration accounts for the variance
//! the interpolation removes: the offset uses the cell-averaged variance of
//! the interpolant rather than the nominal field variance.

use num_complex::Complex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use rustfft::FftPlanner;
use thiserror::Error;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::curve::{CurveError, CurveEstimate, CurveMeta};
use crate::geometry::{Point, Window};
use crate::numeric::{adaptive_simpson, midpoint_2d, BilinearInterp};
use crate::pattern::{BivariatePattern, PatternError, PointPattern};

/// Relative tolerance below which a negative embedding eigenvalue is clipped
/// to zero instead of forcing a larger padding.
const EIG_TOL_REL: f64 = 1e-10;
/// Padding factors tried for the circulant embedding, in order.
const PADDINGS: [usize; 3] = [2, 4, 8];
/// Grid used when every padded embedding stays indefinite and the field must
/// be drawn from a dense factorization instead.
const DENSE_FALLBACK_RESOLUTION: usize = 48;
const MIN_FIELD_RESOLUTION: usize = 64;
const DEFAULT_FIELD_RESOLUTION: usize = 256;
/// Offsets per axis when averaging the interpolant variance over a grid cell.
const CALIBRATION_OFFSETS: usize = 32;
/// Cells per axis for retention-profile integrals.
const PROFILE_QUAD_CELLS: usize = 512;
/// Absolute per-segment quadrature tolerance for K truth curves.
const K_SEGMENT_TOL: f64 = 1e-13;

const LGF_VARIANCE: f64 = 0.1;
const LGF_SCALE: f64 = 0.3;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("intensity must be finite and non-negative, got {rho}")]
    BadIntensity { rho: f64 },
    #[error("intensity at ({x}, {y}) is {value}, outside [0, {bound}]")]
    OutsideBound { x: f64, y: f64, value: f64, bound: f64 },
    #[error("field variance and correlation scale must be positive and finite, got variance {variance}, scale {scale}")]
    BadFieldSpec { variance: f64, scale: f64 },
    #[error("field resolution must be at least 64, got {resolution}")]
    LowResolution { resolution: usize },
    #[error("field loading must be finite, got {loading}")]
    BadLoading { loading: f64 },
    #[error("private-field amplitude must be positive and finite, got {beta}")]
    BadAmplitude { beta: f64 },
    #[error("covariance embedding stayed indefinite at every padding and dense factorization failed")]
    EmbeddingFailed,
    #[error("target expected count must be positive and finite, got {target}")]
    BadTarget { target: f64 },
    #[error("retention probability must lie in [0, 1], got {p}")]
    BadRetention { p: f64 },
    #[error("retention profile integrates to {integral}, cannot calibrate a positive target count")]
    DegenerateProfile { integral: f64 },
    #[error("unknown reference curve {name:?}; expected g_lgcp, g_dpp, c_segr, or c_cluster")]
    UnknownReference { name: String },
    #[error(transparent)]
    Curve(#[from] CurveError),
    #[error(transparent)]
    Pattern(#[from] PatternError),
}

/// Mixes a master seed with two stream counters into an independent seed.
///
/// Used to split one experiment seed into per-replicate, per-purpose RNG
/// streams without any sequential dependence between replicates.
pub fn derive_seed(master: u64, stream: u64, index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(master) ^ stream) ^ index)
}

fn splitmix64(state: u64) -> u64 {
    let mut z = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Realized Gaussian field sampled on a regular grid over a window, read back
/// by bilinear interpolation.
#[derive(Clone, Debug)]
pub struct FieldGrid {
    interp: BilinearInterp,
}

impl FieldGrid {
    fn from_window(window: &Window, n: usize, values: Vec<f64>) -> Self {
        let (x0, _) = window.x_range();
        let (y0, _) = window.y_range();
        let dx = window.width() / (n - 1) as f64;
        let dy = window.height() / (n - 1) as f64;
        FieldGrid { interp: BilinearInterp::new(x0, y0, dx, dy, n, n, values) }
    }

    pub fn resolution(&self) -> (usize, usize) {
        (self.interp.nx, self.interp.ny)
    }

    pub fn spacing(&self) -> (f64, f64) {
        (self.interp.dx, self.interp.dy)
    }

    pub fn values(&self) -> &[f64] {
        &self.interp.values
    }

    pub fn eval(&self, p: Point) -> f64 {
        let xmax = self.interp.x0 + (self.interp.nx - 1) as f64 * self.interp.dx;
        let ymax = self.interp.y0 + (self.interp.ny - 1) as f64 * self.interp.dy;
        let x = p.x.clamp(self.interp.x0, xmax);
        let y = p.y.clamp(self.interp.y0, ymax);
        self.interp.eval(x, y).expect("point clamped to the grid extent")
    }

    pub fn max_value(&self) -> f64 {
        self.interp.values.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b))
    }

    pub fn min_value(&self) -> f64 {
        self.interp.values.iter().fold(f64::INFINITY, |a, &b| a.min(b))
    }
}

/// Zero-mean Gaussian random field with exponential covariance
/// `variance * exp(-r / scale)`, sampled on a `resolution` x `resolution`
/// grid of nodes spanning the window.
#[derive(Clone, Copy, Debug)]
pub struct GaussianFieldSpec {
    pub variance: f64,
    pub scale: f64,
    pub resolution: usize,
}

impl GaussianFieldSpec {
    pub fn new(variance: f64, scale: f64, resolution: usize) -> Result<Self, SimError> {
        let spec = GaussianFieldSpec { variance, scale, resolution };
        spec.validate()?;
        Ok(spec)
    }

    fn validate(&self) -> Result<(), SimError> {
        if !(self.variance > 0.0) || !self.variance.is_finite() || !(self.scale > 0.0) || !self.scale.is_finite() {
            return Err(SimError::BadFieldSpec { variance: self.variance, scale: self.scale });
        }
        if self.resolution < MIN_FIELD_RESOLUTION {
            return Err(SimError::LowResolution { resolution: self.resolution });
        }
        Ok(())
    }

    fn covariance(&self, rx: f64, ry: f64) -> f64 {
        self.variance * (-rx.hypot(ry) / self.scale).exp()
    }
}

/// Draws one field realization by circulant embedding of the covariance on a
/// padded torus. Padding grows until the embedding is positive semidefinite
/// within tolerance; if it never is, the field falls back to a dense
/// factorization on a coarser grid.
pub fn simulate_grf(spec: &GaussianFieldSpec, window: &Window, seed: u64) -> Result<FieldGrid, SimError> {
    spec.validate()?;
    let n = spec.resolution;
    let dx = window.width() / (n - 1) as f64;
    let dy = window.height() / (n - 1) as f64;
    for pad in PADDINGS {
        let m = (n * pad).next_power_of_two();
        if let Some(eigs) = embedding_eigenvalues(spec, dx, dy, m) {
            let values = circulant_sample(&eigs, m, n, seed);
            return Ok(FieldGrid::from_window(window, n, values));
        }
    }
    let (factor, _) = dense_factor(spec, window, DENSE_FALLBACK_RESOLUTION)?;
    Ok(dense_sample(&factor, window, DENSE_FALLBACK_RESOLUTION, seed))
}

/// Eigenvalues of the covariance extended periodically to an `m x m` torus,
/// or None when the extension is indefinite beyond the clipping tolerance.
fn embedding_eigenvalues(spec: &GaussianFieldSpec, dx: f64, dy: f64, m: usize) -> Option<Vec<f64>> {
    let mut buf = vec![Complex::new(0.0, 0.0); m * m];
    for iy in 0..m {
        let ry = iy.min(m - iy) as f64 * dy;
        for ix in 0..m {
            let rx = ix.min(m - ix) as f64 * dx;
            buf[iy * m + ix] = Complex::new(spec.covariance(rx, ry), 0.0);
        }
    }
    fft2(&mut buf, m);
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    for c in &buf {
        min = min.min(c.re);
        max = max.max(c.re);
    }
    if min < -EIG_TOL_REL * max {
        return None;
    }
    Some(buf.iter().map(|c| c.re.max(0.0)).collect())
}

/// One real field sample from the torus spectrum: the real part of the DFT of
/// sqrt(eigenvalue)-scaled complex normals, restricted to the leading
/// `n x n` block. The 1/m factor makes the node covariance exact.
fn circulant_sample(eigs: &[f64], m: usize, n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut buf: Vec<Complex<f64>> = eigs
        .iter()
        .map(|&l| {
            let a: f64 = StandardNormal.sample(&mut rng);
            let b: f64 = StandardNormal.sample(&mut rng);
            let s = l.sqrt();
            Complex::new(a * s, b * s)
        })
        .collect();
    fft2(&mut buf, m);
    let inv_m = 1.0 / m as f64;
    let mut values = vec![0.0; n * n];
    for iy in 0..n {
        for ix in 0..n {
            values[iy * n + ix] = buf[iy * m + ix].re * inv_m;
        }
    }
    values
}

fn fft2(buf: &mut [Complex<f64>], m: usize) {
    let fft = FftPlanner::new().plan_fft_forward(m);
    fft.process(buf);
    transpose_square(buf, m);
    fft.process(buf);
    transpose_square(buf, m);
}

fn transpose_square(buf: &mut [Complex<f64>], m: usize) {
    for i in 0..m {
        for j in i + 1..m {
            buf.swap(i * m + j, j * m + i);
        }
    }
}

/// Dense Cholesky factor of the node covariance, with a diagonal jitter
/// ladder for factorizations that fail by rounding.
fn dense_factor(
    spec: &GaussianFieldSpec,
    window: &Window,
    n: usize,
) -> Result<(Cholesky<f64, Dyn>, f64), SimError> {
    let dx = window.width() / (n - 1) as f64;
    let dy = window.height() / (n - 1) as f64;
    let total = n * n;
    let mut cov = DMatrix::zeros(total, total);
    for a in 0..total {
        let (ax, ay) = ((a % n) as f64 * dx, (a / n) as f64 * dy);
        for b in a..total {
            let (bx, by) = ((b % n) as f64 * dx, (b / n) as f64 * dy);
            let c = spec.covariance(ax - bx, ay - by);
            cov[(a, b)] = c;
            cov[(b, a)] = c;
        }
    }
    let mut jitter = spec.variance * 1e-12;
    loop {
        if let Some(chol) = Cholesky::new(cov.clone()) {
            return Ok((chol, jitter));
        }
        if jitter > spec.variance * 1e-6 {
            return Err(SimError::EmbeddingFailed);
        }
        for i in 0..total {
            cov[(i, i)] += jitter;
        }
        jitter *= 100.0;
    }
}

fn dense_sample(factor: &Cholesky<f64, Dyn>, window: &Window, n: usize, seed: u64) -> FieldGrid {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = DVector::from_iterator(n * n, (0..n * n).map(|_| -> f64 { StandardNormal.sample(&mut rng) }));
    let y = factor.l() * z;
    FieldGrid::from_window(window, n, y.iter().copied().collect())
}

/// Location-dependent retention probability for independent thinning.
#[derive(Clone, Debug)]
pub enum RetentionProfile {
    Constant(f64),
    /// 1 - 0.5 exp[-{(x-0.5)^2 + (y-0.5)^2} / 0.18]
    Hole,
    /// 1 - 0.5 cos^2(5x)
    Waves,
    /// 1 - 0.9 cos^2(5x)
    DeepWaves,
    /// exp(field) / sup exp(field) for a realized log-Gaussian field.
    Lgf { field: FieldGrid, sup: f64 },
}

impl RetentionProfile {
    /// Fresh log-Gaussian-field profile (variance 0.1, scale 0.3), normalized
    /// by its supremum so retention peaks at one.
    pub fn lgf(window: &Window, seed: u64) -> Result<Self, SimError> {
        let spec = GaussianFieldSpec::new(LGF_VARIANCE, LGF_SCALE, DEFAULT_FIELD_RESOLUTION)?;
        let field = simulate_grf(&spec, window, seed)?;
        let sup = field.max_value();
        Ok(RetentionProfile::Lgf { field, sup })
    }

    pub fn eval(&self, p: Point) -> f64 {
        match self {
            RetentionProfile::Constant(c) => *c,
            RetentionProfile::Hole => {
                1.0 - 0.5 * (-((p.x - 0.5).powi(2) + (p.y - 0.5).powi(2)) / 0.18).exp()
            }
            RetentionProfile::Waves => 1.0 - 0.5 * (5.0 * p.x).cos().powi(2),
            RetentionProfile::DeepWaves => 1.0 - 0.9 * (5.0 * p.x).cos().powi(2),
            RetentionProfile::Lgf { field, sup } => (field.eval(p) - sup).exp(),
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            RetentionProfile::Constant(_) => "constant",
            RetentionProfile::Hole => "hole",
            RetentionProfile::Waves => "waves",
            RetentionProfile::DeepWaves => "deep_waves",
            RetentionProfile::Lgf { .. } => "lgf",
        }
    }

    /// Integral of the retention probability over the window.
    pub fn integral(&self, window: &Window) -> f64 {
        match self {
            RetentionProfile::Constant(c) => c * window.area(),
            _ => midpoint_2d(&|p| self.eval(p), window, PROFILE_QUAD_CELLS, PROFILE_QUAD_CELLS),
        }
    }
}

/// Homogeneous Poisson sample with intensity `rho`.
pub fn simulate_poisson(window: &Window, rho: f64, seed: u64) -> Result<PointPattern, SimError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points = homogeneous_points(window, rho, &mut rng)?;
    Ok(PointPattern::new(points, *window)?)
}

/// Inhomogeneous Poisson sample drawn by thinning a dominating homogeneous
/// process of rate `bound`; the intensity must stay within [0, bound].
pub fn simulate_poisson_fn<F: Fn(Point) -> f64>(
    window: &Window,
    intensity: F,
    bound: f64,
    seed: u64,
) -> Result<PointPattern, SimError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points = thinned_points(window, bound, intensity, &mut rng)?;
    Ok(PointPattern::new(points, *window)?)
}

/// Independent thinning: keeps each point with probability `profile(x)`.
pub fn thin(pattern: &PointPattern, profile: &RetentionProfile, seed: u64) -> Result<PointPattern, SimError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut kept = Vec::new();
    for &p in pattern.points() {
        let keep = profile.eval(p);
        if !keep.is_finite() || !(0.0..=1.0).contains(&keep) {
            return Err(SimError::BadRetention { p: keep });
        }
        if rng.random::<f64>() < keep {
            kept.push(p);
        }
    }
    Ok(PointPattern::new(kept, *pattern.window())?)
}

fn homogeneous_points(window: &Window, rho: f64, rng: &mut ChaCha8Rng) -> Result<Vec<Point>, SimError> {
    if !rho.is_finite() || rho < 0.0 {
        return Err(SimError::BadIntensity { rho });
    }
    let mean = rho * window.area();
    if mean == 0.0 {
        return Ok(Vec::new());
    }
    let count = Poisson::new(mean).map_err(|_| SimError::BadIntensity { rho })?.sample(rng) as usize;
    Ok((0..count).map(|_| window.sample_uniform(rng)).collect())
}

fn thinned_points<F: Fn(Point) -> f64>(
    window: &Window,
    bound: f64,
    intensity: F,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Point>, SimError> {
    let dominating = homogeneous_points(window, bound, rng)?;
    let slack = bound * (1.0 + 1e-9);
    let mut kept = Vec::new();
    for p in dominating {
        let value = intensity(p);
        if !value.is_finite() || value < 0.0 || value > slack {
            return Err(SimError::OutsideBound { x: p.x, y: p.y, value, bound });
        }
        if rng.random::<f64>() * bound < value {
            kept.push(p);
        }
    }
    Ok(kept)
}

/// Variance of the bilinear interpolant of a unit-variance exponential-
/// covariance field at fractional cell offset (fx, fy).
fn interpolant_unit_variance(scale: f64, dx: f64, dy: f64, fx: f64, fy: f64) -> f64 {
    let nodes = [(0.0, 0.0), (dx, 0.0), (0.0, dy), (dx, dy)];
    let w = [(1.0 - fx) * (1.0 - fy), fx * (1.0 - fy), (1.0 - fx) * fy, fx * fy];
    let mut v = 0.0;
    for i in 0..4 {
        for j in 0..4 {
            let d = (nodes[i].0 - nodes[j].0).hypot(nodes[i].1 - nodes[j].1);
            v += w[i] * w[j] * (-d / scale).exp();
        }
    }
    v
}

/// Cell average of exp(v(u)/2) for the interpolated log-field, where each
/// component contributes `amplitude * unit-variance interpolant variance`.
/// This is the exact count-calibration factor for the sampled process.
fn mean_exp_half_variance(components: &[(f64, f64)], dx: f64, dy: f64) -> f64 {
    let mut acc = 0.0;
    for iy in 0..CALIBRATION_OFFSETS {
        let fy = (iy as f64 + 0.5) / CALIBRATION_OFFSETS as f64;
        for ix in 0..CALIBRATION_OFFSETS {
            let fx = (ix as f64 + 0.5) / CALIBRATION_OFFSETS as f64;
            let v: f64 = components
                .iter()
                .map(|&(amplitude, scale)| amplitude * interpolant_unit_variance(scale, dx, dy, fx, fy))
                .sum();
            acc += (0.5 * v).exp();
        }
    }
    acc / (CALIBRATION_OFFSETS * CALIBRATION_OFFSETS) as f64
}

/// Log-Gaussian Cox process: intensity `p(u) exp(mu + loading * Y(u))` for a
/// single field Y, with `mu` solved so the expected count hits `target_n`.
#[derive(Clone, Debug)]
pub struct LgcpSpec {
    pub field: GaussianFieldSpec,
    pub loading: f64,
    pub profile: RetentionProfile,
    pub target_n: f64,
}

impl LgcpSpec {
    /// Homogeneous design: unit-variance field at correlation scale 0.05, no
    /// retention thinning.
    pub fn homogeneous(target_n: f64) -> Self {
        LgcpSpec::thinned(target_n, RetentionProfile::Constant(1.0))
    }

    /// Same field as the homogeneous design, modulated by a retention profile.
    pub fn thinned(target_n: f64, profile: RetentionProfile) -> Self {
        LgcpSpec {
            field: GaussianFieldSpec { variance: 1.0, scale: 0.05, resolution: DEFAULT_FIELD_RESOLUTION },
            loading: 1.0,
            profile,
            target_n,
        }
    }

    /// Calibrated log-intensity offset: solves
    /// `target = exp(mu) * integral(p) * E exp(interpolated log-field)`.
    pub fn log_offset(&self, window: &Window) -> Result<f64, SimError> {
        self.field.validate()?;
        if !self.loading.is_finite() {
            return Err(SimError::BadLoading { loading: self.loading });
        }
        if !(self.target_n > 0.0) || !self.target_n.is_finite() {
            return Err(SimError::BadTarget { target: self.target_n });
        }
        let coverage = self.profile.integral(window);
        if !(coverage > 0.0) {
            return Err(SimError::DegenerateProfile { integral: coverage });
        }
        let dx = window.width() / (self.field.resolution - 1) as f64;
        let dy = window.height() / (self.field.resolution - 1) as f64;
        let components = [(self.loading * self.loading * self.field.variance, self.field.scale)];
        let factor = mean_exp_half_variance(&components, dx, dy);
        Ok(self.target_n.ln() - coverage.ln() - factor.ln())
    }
}

/// One LGCP draw: realizes the field, then thins a dominating homogeneous
/// process against the supremum of the interpolated intensity.
pub fn simulate_lgcp(window: &Window, spec: &LgcpSpec, seed: u64) -> Result<PointPattern, SimError> {
    let mu = spec.log_offset(window)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 2, 0));
    let points = if spec.loading == 0.0 {
        let bound = mu.exp();
        thinned_points(window, bound, |p| spec.profile.eval(p) * bound, &mut rng)?
    } else {
        let field = simulate_grf(&spec.field, window, derive_seed(seed, 1, 0))?;
        let a = spec.loading;
        let extreme = if a >= 0.0 { field.max_value() } else { field.min_value() };
        let bound = (mu + a * extreme).exp();
        thinned_points(window, bound, |p| spec.profile.eval(p) * (mu + a * field.eval(p)).exp(), &mut rng)?
    };
    Ok(PointPattern::new(points, *window)?)
}

/// Bivariate log-Gaussian Cox process with one shared field Y (scale `phi`)
/// and private fields U1, U2 (scales `psi`): component intensities
/// `p(u) exp(mu_i + alpha_i Y(u) + sqrt(beta) U_i(u))`.
///
/// The private term enters with amplitude sqrt(beta) so the realized
/// log-covariance amplitude is beta, giving the target pair correlations
/// `g_i(r) = exp{alpha_i^2 e^(-r/phi) + beta e^(-r/psi_i)}` and
/// `c(r) = exp{alpha_1 alpha_2 e^(-r/phi)}`.
#[derive(Clone, Debug)]
pub struct BivariateLgcpSpec {
    pub shared_loadings: (f64, f64),
    pub beta: f64,
    pub shared_scale: f64,
    pub private_scales: (f64, f64),
    pub profile: RetentionProfile,
    pub targets: (f64, f64),
    pub resolution: usize,
}

impl BivariateLgcpSpec {
    fn with_loadings(targets: (f64, f64), loadings: (f64, f64)) -> Self {
        BivariateLgcpSpec {
            shared_loadings: loadings,
            beta: 0.25,
            shared_scale: 0.03,
            private_scales: (0.02, 0.01),
            profile: RetentionProfile::Constant(1.0),
            targets,
            resolution: DEFAULT_FIELD_RESOLUTION,
        }
    }

    /// Opposite shared loadings (1, -1): components avoid each other.
    pub fn segregated(targets: (f64, f64)) -> Self {
        BivariateLgcpSpec::with_loadings(targets, (1.0, -1.0))
    }

    /// Equal shared loadings (1, 1): components cluster together.
    pub fn clustered(targets: (f64, f64)) -> Self {
        BivariateLgcpSpec::with_loadings(targets, (1.0, 1.0))
    }

    /// One zero loading: components share nothing and are independent.
    pub fn independent(targets: (f64, f64)) -> Self {
        BivariateLgcpSpec::with_loadings(targets, (1.0, 0.0))
    }

    fn validate(&self) -> Result<(), SimError> {
        if !self.shared_loadings.0.is_finite() || !self.shared_loadings.1.is_finite() {
            let loading = if self.shared_loadings.0.is_finite() {
                self.shared_loadings.1
            } else {
                self.shared_loadings.0
            };
            return Err(SimError::BadLoading { loading });
        }
        if !(self.beta > 0.0) || !self.beta.is_finite() {
            return Err(SimError::BadAmplitude { beta: self.beta });
        }
        for target in [self.targets.0, self.targets.1] {
            if !(target > 0.0) || !target.is_finite() {
                return Err(SimError::BadTarget { target });
            }
        }
        GaussianFieldSpec::new(1.0, self.shared_scale, self.resolution)?;
        GaussianFieldSpec::new(1.0, self.private_scales.0, self.resolution)?;
        GaussianFieldSpec::new(1.0, self.private_scales.1, self.resolution)?;
        Ok(())
    }

    /// Calibrated per-component log-intensity offsets.
    pub fn log_offsets(&self, window: &Window) -> Result<(f64, f64), SimError> {
        self.validate()?;
        let coverage = self.profile.integral(window);
        if !(coverage > 0.0) {
            return Err(SimError::DegenerateProfile { integral: coverage });
        }
        let dx = window.width() / (self.resolution - 1) as f64;
        let dy = window.height() / (self.resolution - 1) as f64;
        let offset = |target: f64, loading: f64, psi: f64| {
            let components = [(loading * loading, self.shared_scale), (self.beta, psi)];
            target.ln() - coverage.ln() - mean_exp_half_variance(&components, dx, dy).ln()
        };
        Ok((
            offset(self.targets.0, self.shared_loadings.0, self.private_scales.0),
            offset(self.targets.1, self.shared_loadings.1, self.private_scales.1),
        ))
    }

    /// Target cross pair correlation exp{alpha_1 alpha_2 e^(-r/phi)}.
    pub fn cross_pcf(&self, r: f64) -> f64 {
        (self.shared_loadings.0 * self.shared_loadings.1 * (-r / self.shared_scale).exp()).exp()
    }

    /// Target marginal pair correlation of component 0 or 1.
    pub fn component_pcf(&self, component: usize, r: f64) -> f64 {
        let (a, psi) = if component == 0 {
            (self.shared_loadings.0, self.private_scales.0)
        } else {
            (self.shared_loadings.1, self.private_scales.1)
        };
        (a * a * (-r / self.shared_scale).exp() + self.beta * (-r / psi).exp()).exp()
    }
}

/// One bivariate LGCP draw: realizes the shared and private fields, then
/// thins each component independently given the fields.
pub fn simulate_bivariate_lgcp(
    window: &Window,
    spec: &BivariateLgcpSpec,
    seed: u64,
) -> Result<BivariatePattern, SimError> {
    let (mu1, mu2) = spec.log_offsets(window)?;
    let shared = GaussianFieldSpec { variance: 1.0, scale: spec.shared_scale, resolution: spec.resolution };
    let y = simulate_grf(&shared, window, derive_seed(seed, 1, 0))?;
    let amp = spec.beta.sqrt();
    let component = |mu: f64, alpha: f64, psi: f64, index: u64| -> Result<Vec<Point>, SimError> {
        let private_spec = GaussianFieldSpec { variance: 1.0, scale: psi, resolution: spec.resolution };
        let private = simulate_grf(&private_spec, window, derive_seed(seed, 1, index + 1))?;
        let shared_extreme = if alpha >= 0.0 { y.max_value() } else { y.min_value() };
        let bound = (mu + alpha * shared_extreme + amp * private.max_value()).exp();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 2, index));
        thinned_points(
            window,
            bound,
            |p| spec.profile.eval(p) * (mu + alpha * y.eval(p) + amp * private.eval(p)).exp(),
            &mut rng,
        )
    };
    let first = component(mu1, spec.shared_loadings.0, spec.private_scales.0, 0)?;
    let second = component(mu2, spec.shared_loadings.1, spec.private_scales.1, 1)?;
    Ok(BivariatePattern::new(first, second, *window)?)
}

/// Closed-form pair correlation and cross correlation curves used as ground
/// truth in the experiments.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReferencePcf {
    /// exp{exp(-r/0.05)}: log-Gaussian Cox clustering at scale 0.05.
    GLgcp,
    /// 1 - exp{-2 (r/0.02)^2}: determinantal repulsion with a Gaussian kernel.
    GDpp,
    /// exp{-exp(-r/0.03)}: segregated bivariate components.
    CSegr,
    /// exp{exp(-r/0.03)}: clustered bivariate components.
    CCluster,
}

impl ReferencePcf {
    pub fn from_name(name: &str) -> Result<Self, SimError> {
        match name {
            "g_lgcp" => Ok(ReferencePcf::GLgcp),
            "g_dpp" => Ok(ReferencePcf::GDpp),
            "c_segr" => Ok(ReferencePcf::CSegr),
            "c_cluster" => Ok(ReferencePcf::CCluster),
            _ => Err(SimError::UnknownReference { name: name.to_string() }),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ReferencePcf::GLgcp => "g_lgcp",
            ReferencePcf::GDpp => "g_dpp",
            ReferencePcf::CSegr => "c_segr",
            ReferencePcf::CCluster => "c_cluster",
        }
    }

    pub fn eval(&self, r: f64) -> f64 {
        match self {
            ReferencePcf::GLgcp => (-r / 0.05).exp().exp(),
            ReferencePcf::GDpp => 1.0 - (-2.0 * (r / 0.02).powi(2)).exp(),
            ReferencePcf::CSegr => (-(-r / 0.03).exp()).exp(),
            ReferencePcf::CCluster => (-r / 0.03).exp().exp(),
        }
    }
}

/// Evaluates a named reference pair correlation on a grid.
pub fn reference_curves(name: &str, grid: &[f64]) -> Result<CurveEstimate, SimError> {
    let pcf = ReferencePcf::from_name(name)?;
    let values = grid.iter().map(|&r| pcf.eval(r)).collect();
    Ok(CurveEstimate::new(grid.to_vec(), values, CurveMeta::named(pcf.name()))?)
}

/// K truth from a pair correlation: `K(t) = 2 pi * integral_0^t g(r) r dr`,
/// accumulated segment by segment with adaptive quadrature.
pub fn true_k_from_pcf<F: Fn(f64) -> f64>(g: &F, grid: &[f64]) -> Result<CurveEstimate, SimError> {
    let mut values = Vec::with_capacity(grid.len());
    let mut acc = 0.0;
    let mut prev = 0.0;
    for &t in grid {
        acc += std::f64::consts::TAU * adaptive_simpson(&|r| g(r) * r, prev, t, K_SEGMENT_TOL);
        values.push(acc);
        prev = t;
    }
    Ok(CurveEstimate::new(grid.to_vec(), values, CurveMeta::named("k_truth"))?)
}
