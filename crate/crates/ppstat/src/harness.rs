//! Replication-experiment driver.
//!
//! Runs estimator x intensity-model x bandwidth-method combinations over
//! seeded replicates of a point-process design, then aggregates mean curves,
//! pointwise probability envelopes, and root integrated mean square errors
//! against the analytic truth. The whole run is a pure function of the config:
//! every replicate draws its streams from counter-derived seeds, replicates
//! may run on a worker pool, and aggregation folds over replicate index order,
//! so serial and parallel runs produce identical output bytes.
//!
//! Designs live on the unit square. Failed replicates are recorded with their
//! seed and skipped; more than 5% failures aborts the run.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use thiserror::Error;

use crate::curve::{default_r_grid, default_t_grid, CurveError, CurveEstimate};
use crate::estimators_k::{k12_global_iso, k12_local_iso, k_global_iso, k_local_iso, KError};
use crate::estimators_pcf::{g_global_iso, g_local_iso, Kernel1d, LocalIsoForm, PcfError};
use crate::gamma::{
    build_interpolated_cross_iso, build_interpolated_iso, GammaError, GammaFunction, SampleBank,
};
use crate::geometry::Window;
use crate::intensity::{
    bandwidth_cvl, bandwidth_lcv, default_pcf_bandwidth, default_sigma_grid, IntensityError,
    IntensityModel, Kernel2d, ParametricIntensity,
};
use crate::pattern::{BivariatePattern, PatternError, PointPattern};
use crate::simulate::{
    derive_seed, simulate_lgcp, simulate_poisson_fn, true_k_from_pcf, LgcpSpec, ReferencePcf,
    RetentionProfile, SimError,
};

/// Base spacing for interpolated normalizer grids; kernel models tighten it
/// to a tenth of their smoothing bandwidth.
const GAMMA_SPACING: f64 = 0.005;
/// Fraction of failed replicates above which the run aborts.
const FAILURE_BUDGET: f64 = 0.05;
/// Replicate count below which the 95% envelope is flagged as unreliable.
const ENVELOPE_MIN_REPLICATES: usize = 40;
const ENVELOPE_LEVEL: f64 = 0.95;

// stream tags for counter-derived seeds
const STREAM_BANK: u64 = 1;
const STREAM_PROFILE: u64 = 3;
const STREAM_PATTERN: u64 = 10;
const STREAM_PATTERN_SECOND: u64 = 11;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config line {line}: {message}")]
    Config { line: usize, message: String },
    #[error("curves must share one grid")]
    GridMismatch,
    #[error("need at least one curve")]
    EmptyInput,
    #[error("integration end {r_max} must be positive and at most the grid max {grid_max}")]
    BadRange { r_max: f64, grid_max: f64 },
    #[error("envelope level {level} must lie in (0, 1]")]
    BadLevel { level: f64 },
    #[error("{failed} of {total} replicates failed; first: replicate {first_replicate} (seed {first_seed}): {first_message}")]
    TooManyFailures {
        failed: usize,
        total: usize,
        first_replicate: usize,
        first_seed: u64,
        first_message: String,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Intensity(#[from] IntensityError),
    #[error(transparent)]
    Gamma(#[from] GammaError),
    #[error(transparent)]
    K(#[from] KError),
    #[error(transparent)]
    Pcf(#[from] PcfError),
    #[error(transparent)]
    Curve(#[from] CurveError),
    #[error(transparent)]
    Pattern(#[from] PatternError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProcessKind {
    Poisson,
    Lgcp,
    PoissonPair,
}

impl ProcessKind {
    pub fn parse(s: &str) -> Result<Self, String> {
        match s {
            "poisson" => Ok(ProcessKind::Poisson),
            "lgcp" => Ok(ProcessKind::Lgcp),
            "poisson_pair" => Ok(ProcessKind::PoissonPair),
            _ => Err(format!("unknown process {s:?}; expected poisson, lgcp, or poisson_pair")),
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            ProcessKind::Poisson => "poisson",
            ProcessKind::Lgcp => "lgcp",
            ProcessKind::PoissonPair => "poisson_pair",
        }
    }

    fn is_pair(&self) -> bool {
        matches!(self, ProcessKind::PoissonPair)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProfileKind {
    Constant,
    Hole,
    Waves,
    DeepWaves,
    Lgf,
}

impl ProfileKind {
    pub fn parse(s: &str) -> Result<Self, String> {
        match s {
            "constant" => Ok(ProfileKind::Constant),
            "hole" => Ok(ProfileKind::Hole),
            "waves" => Ok(ProfileKind::Waves),
            "deep_waves" => Ok(ProfileKind::DeepWaves),
            "lgf" => Ok(ProfileKind::Lgf),
            _ => Err(format!(
                "unknown profile {s:?}; expected constant, hole, waves, deep_waves, or lgf"
            )),
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            ProfileKind::Constant => "constant",
            ProfileKind::Hole => "hole",
            ProfileKind::Waves => "waves",
            ProfileKind::DeepWaves => "deep_waves",
            ProfileKind::Lgf => "lgf",
        }
    }

    /// Static retention profile, or None when each replicate realizes a
    /// fresh one.
    pub fn static_profile(&self) -> Option<RetentionProfile> {
        match self {
            ProfileKind::Constant => Some(RetentionProfile::Constant(1.0)),
            ProfileKind::Hole => Some(RetentionProfile::Hole),
            ProfileKind::Waves => Some(RetentionProfile::Waves),
            ProfileKind::DeepWaves => Some(RetentionProfile::DeepWaves),
            ProfileKind::Lgf => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BandwidthMethod {
    Cvl,
    Lcv,
    Fixed(f64),
}

impl BandwidthMethod {
    pub fn parse(s: &str) -> Result<Self, String> {
        match s {
            "cvl" => Ok(BandwidthMethod::Cvl),
            "lcv" => Ok(BandwidthMethod::Lcv),
            _ => {
                if let Some(v) = s.strip_prefix("fixed:") {
                    let sigma: f64 = v
                        .trim()
                        .parse()
                        .map_err(|_| format!("bad fixed bandwidth {v:?}"))?;
                    if !(sigma > 0.0) || !sigma.is_finite() {
                        return Err(format!("fixed bandwidth must be positive, got {sigma}"));
                    }
                    Ok(BandwidthMethod::Fixed(sigma))
                } else {
                    Err(format!("unknown bandwidth method {s:?}; expected cvl, lcv, or fixed:<sigma>"))
                }
            }
        }
    }

    pub fn label(&self) -> String {
        match self {
            BandwidthMethod::Cvl => "cvl".to_string(),
            BandwidthMethod::Lcv => "lcv".to_string(),
            BandwidthMethod::Fixed(v) => format!("fixed:{v}"),
        }
    }

    fn tag(&self) -> String {
        match self {
            BandwidthMethod::Cvl => "cvl".to_string(),
            BandwidthMethod::Lcv => "lcv".to_string(),
            BandwidthMethod::Fixed(v) => format!("fixed{v}"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IntensityKind {
    Known,
    Parametric,
    Kernel,
    KernelLeaveOut,
}

impl IntensityKind {
    pub fn parse(s: &str) -> Result<Self, String> {
        match s {
            "known" => Ok(IntensityKind::Known),
            "parametric" => Ok(IntensityKind::Parametric),
            "kernel" => Ok(IntensityKind::Kernel),
            "kernel-leaveout" => Ok(IntensityKind::KernelLeaveOut),
            _ => Err(format!(
                "unknown intensity model {s:?}; expected known, parametric, kernel, or kernel-leaveout"
            )),
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            IntensityKind::Known => "known",
            IntensityKind::Parametric => "parametric",
            IntensityKind::Kernel => "kernel",
            IntensityKind::KernelLeaveOut => "kernel-leaveout",
        }
    }

    pub fn is_kernel(&self) -> bool {
        matches!(self, IntensityKind::Kernel | IntensityKind::KernelLeaveOut)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EstimatorId {
    KGlobalIso,
    KLocalIso,
    K12GlobalIso,
    K12LocalIso,
    GGlobalIso,
    GLocalIso,
}

impl EstimatorId {
    fn parse(s: &str) -> Result<Self, String> {
        match s {
            "k_global_iso" => Ok(EstimatorId::KGlobalIso),
            "k_local_iso" => Ok(EstimatorId::KLocalIso),
            "k12_global_iso" => Ok(EstimatorId::K12GlobalIso),
            "k12_local_iso" => Ok(EstimatorId::K12LocalIso),
            "g_global_iso" => Ok(EstimatorId::GGlobalIso),
            "g_local_iso" => Ok(EstimatorId::GLocalIso),
            _ => Err(format!("unknown estimator {s:?}")),
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            EstimatorId::KGlobalIso => "k_global_iso",
            EstimatorId::KLocalIso => "k_local_iso",
            EstimatorId::K12GlobalIso => "k12_global_iso",
            EstimatorId::K12LocalIso => "k12_local_iso",
            EstimatorId::GGlobalIso => "g_global_iso",
            EstimatorId::GLocalIso => "g_local_iso",
        }
    }

    fn needs_pair(&self) -> bool {
        matches!(self, EstimatorId::K12GlobalIso | EstimatorId::K12LocalIso)
    }

    fn needs_gamma(&self) -> bool {
        matches!(
            self,
            EstimatorId::KGlobalIso | EstimatorId::K12GlobalIso | EstimatorId::GGlobalIso
        )
    }

    fn is_pcf(&self) -> bool {
        matches!(self, EstimatorId::GGlobalIso | EstimatorId::GLocalIso)
    }
}

/// One estimator column of an experiment: what to estimate, which intensity
/// model feeds it, and how that model's bandwidth is chosen.
#[derive(Clone, Debug)]
pub struct EstimatorSpec {
    pub id: EstimatorId,
    pub intensity: IntensityKind,
    /// Smoothing bandwidth method for kernel intensities; None otherwise.
    pub bandwidth: Option<BandwidthMethod>,
}

impl EstimatorSpec {
    fn parse(s: &str, default_bandwidth: BandwidthMethod) -> Result<Self, String> {
        let parts: Vec<&str> = s.split(':').collect();
        let id = EstimatorId::parse(parts[0].trim())?;
        let intensity = if parts.len() > 1 {
            IntensityKind::parse(parts[1].trim())?
        } else {
            IntensityKind::Known
        };
        let bandwidth = if intensity.is_kernel() {
            if parts.len() > 2 {
                Some(BandwidthMethod::parse(parts[2..].join(":").trim())?)
            } else {
                Some(default_bandwidth)
            }
        } else {
            None
        };
        Ok(EstimatorSpec { id, intensity, bandwidth })
    }

    /// Short identifier used in file names and tables.
    pub fn tag(&self) -> String {
        match self.bandwidth {
            Some(method) => {
                format!("{}_{}_{}", self.id.label(), self.intensity.label(), method.tag())
            }
            None => format!("{}_{}", self.id.label(), self.intensity.label()),
        }
    }

    pub fn bandwidth_label(&self) -> String {
        self.bandwidth.map_or_else(|| "none".to_string(), |m| m.label())
    }
}

/// Full description of one replication experiment, parsed from a flat
/// `key = value` config.
#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    pub process: ProcessKind,
    pub profile: ProfileKind,
    pub n_expected: f64,
    pub replicates: usize,
    pub estimators: Vec<EstimatorSpec>,
    pub alpha: f64,
    pub r_max: f64,
    pub seed: u64,
    pub outdir: Option<PathBuf>,
}

impl ExperimentConfig {
    /// Parses a flat config: one `key = value` per line, `#` starts a
    /// comment. Keys: process, profile, n_expected, replicates, estimators,
    /// bandwidth, alpha, r_max, seed, outdir. The estimators value is a
    /// comma-separated list of `id[:intensity[:bandwidth]]` entries; the
    /// top-level bandwidth key sets the default method for kernel models.
    pub fn parse(text: &str) -> Result<Self, HarnessError> {
        let fail = |line: usize, message: String| HarnessError::Config { line, message };
        let mut process = None;
        let mut profile = ProfileKind::Constant;
        let mut n_expected = None;
        let mut replicates = None;
        let mut estimator_text: Option<(usize, String)> = None;
        let mut default_bandwidth = BandwidthMethod::Cvl;
        let mut alpha = 0.005;
        let mut r_max = 0.125;
        let mut seed = 0u64;
        let mut outdir = None;

        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| fail(line, format!("expected key = value, got {content:?}")))?;
            let key = key.trim();
            let value = value.trim();
            let num = |v: &str| -> Result<f64, HarnessError> {
                v.parse().map_err(|_| fail(line, format!("bad number {v:?} for {key}")))
            };
            match key {
                "process" => process = Some(ProcessKind::parse(value).map_err(|m| fail(line, m))?),
                "profile" => profile = ProfileKind::parse(value).map_err(|m| fail(line, m))?,
                "n_expected" => n_expected = Some(num(value)?),
                "replicates" => {
                    replicates = Some(
                        value
                            .parse::<usize>()
                            .map_err(|_| fail(line, format!("bad replicate count {value:?}")))?,
                    )
                }
                "estimators" => estimator_text = Some((line, value.to_string())),
                "bandwidth" => {
                    default_bandwidth = BandwidthMethod::parse(value).map_err(|m| fail(line, m))?
                }
                "alpha" => alpha = num(value)?,
                "r_max" => r_max = num(value)?,
                "seed" => {
                    seed = value
                        .parse()
                        .map_err(|_| fail(line, format!("bad seed {value:?}")))?
                }
                "outdir" => outdir = Some(PathBuf::from(value)),
                _ => return Err(fail(line, format!("unknown key {key:?}"))),
            }
        }

        let process = process.ok_or_else(|| fail(0, "missing required key: process".into()))?;
        let n_expected =
            n_expected.ok_or_else(|| fail(0, "missing required key: n_expected".into()))?;
        let replicates =
            replicates.ok_or_else(|| fail(0, "missing required key: replicates".into()))?;
        let (est_line, est_text) =
            estimator_text.ok_or_else(|| fail(0, "missing required key: estimators".into()))?;
        let mut estimators = Vec::new();
        for part in est_text.split(',') {
            let part = part.trim();
            if part.is_empty() {
                continue;
            }
            estimators
                .push(EstimatorSpec::parse(part, default_bandwidth).map_err(|m| fail(est_line, m))?);
        }

        let config = ExperimentConfig {
            process,
            profile,
            n_expected,
            replicates,
            estimators,
            alpha,
            r_max,
            seed,
            outdir,
        };
        config.validate().map_err(|m| fail(0, m))?;
        Ok(config)
    }

    pub fn from_file(path: &Path) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(path)?;
        ExperimentConfig::parse(&text)
    }

    fn validate(&self) -> Result<(), String> {
        if self.replicates < 1 {
            return Err("replicates must be at least 1".into());
        }
        if !(self.n_expected > 0.0) || !self.n_expected.is_finite() {
            return Err(format!("n_expected must be positive, got {}", self.n_expected));
        }
        if !(self.alpha > 0.0 && self.alpha < 0.5) {
            return Err(format!("alpha must lie in (0, 0.5), got {}", self.alpha));
        }
        if self.estimators.is_empty() {
            return Err("estimators must list at least one entry".into());
        }
        for spec in &self.estimators {
            if spec.id.needs_pair() != self.process.is_pair() {
                return Err(format!(
                    "estimator {} needs a {} process, config has {}",
                    spec.id.label(),
                    if spec.id.needs_pair() { "paired" } else { "univariate" },
                    self.process.label()
                ));
            }
            if spec.id.is_pcf() && self.process.is_pair() {
                return Err(format!(
                    "estimator {} is univariate, config has {}",
                    spec.id.label(),
                    self.process.label()
                ));
            }
        }
        let grid_max = self
            .estimators
            .iter()
            .map(|spec| *grid_for(spec.id).last().unwrap())
            .fold(f64::INFINITY, f64::min);
        if !(self.r_max > 0.0) || self.r_max > grid_max + 1e-12 {
            return Err(format!(
                "r_max must lie in (0, {grid_max}], got {}",
                self.r_max
            ));
        }
        Ok(())
    }

    /// Normalized text echo written to the run manifest.
    fn echo(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "process = {}", self.process.label());
        let _ = writeln!(s, "profile = {}", self.profile.label());
        let _ = writeln!(s, "n_expected = {}", self.n_expected);
        let _ = writeln!(s, "replicates = {}", self.replicates);
        let specs: Vec<String> = self
            .estimators
            .iter()
            .map(|e| match e.bandwidth {
                Some(m) => format!("{}:{}:{}", e.id.label(), e.intensity.label(), m.label()),
                None => format!("{}:{}", e.id.label(), e.intensity.label()),
            })
            .collect();
        let _ = writeln!(s, "estimators = {}", specs.join(", "));
        let _ = writeln!(s, "alpha = {}", self.alpha);
        let _ = writeln!(s, "r_max = {}", self.r_max);
        let _ = writeln!(s, "seed = {}", self.seed);
        s
    }
}

fn grid_for(id: EstimatorId) -> Vec<f64> {
    if id.is_pcf() {
        default_r_grid()
    } else {
        default_t_grid()
    }
}

/// Root integrated mean square error against a truth curve:
/// the square root of the replicate-average of the integral of the squared
/// error from the grid start to `r_max`, by the trapezoid rule.
pub fn rimse(curves: &[CurveEstimate], truth: &CurveEstimate, r_max: f64) -> Result<f64, HarnessError> {
    if curves.is_empty() {
        return Err(HarnessError::EmptyInput);
    }
    for c in curves {
        if c.grid() != truth.grid() {
            return Err(HarnessError::GridMismatch);
        }
    }
    let rows: Vec<&[f64]> = curves.iter().map(|c| c.values()).collect();
    rimse_rows(truth.grid(), &rows, truth.values(), r_max)
}

fn rimse_rows(grid: &[f64], rows: &[&[f64]], truth: &[f64], r_max: f64) -> Result<f64, HarnessError> {
    let grid_max = *grid.last().unwrap_or(&0.0);
    if !(r_max > 0.0) || r_max > grid_max + 1e-12 {
        return Err(HarnessError::BadRange { r_max, grid_max });
    }
    if rows.is_empty() {
        return Err(HarnessError::EmptyInput);
    }
    let mut total = 0.0;
    for row in rows {
        total += squared_error_integral(grid, row, truth, r_max);
    }
    Ok((total / rows.len() as f64).sqrt())
}

/// Trapezoid integral of `(value - truth)^2` from the first grid node to
/// `r_max`, with a linearly interpolated partial segment at the end.
fn squared_error_integral(grid: &[f64], values: &[f64], truth: &[f64], r_max: f64) -> f64 {
    let mut acc = 0.0;
    for k in 1..grid.len() {
        let (a, b) = (grid[k - 1], grid[k]);
        if a >= r_max {
            break;
        }
        let fa = (values[k - 1] - truth[k - 1]).powi(2);
        if b <= r_max {
            let fb = (values[k] - truth[k]).powi(2);
            acc += 0.5 * (fa + fb) * (b - a);
        } else {
            let w = (r_max - a) / (b - a);
            let vm = values[k - 1] + w * (values[k] - values[k - 1]);
            let tm = truth[k - 1] + w * (truth[k] - truth[k - 1]);
            let fm = (vm - tm).powi(2);
            acc += 0.5 * (fa + fm) * (r_max - a);
            break;
        }
    }
    acc
}

/// Pointwise empirical probability band: per grid node, the
/// `(1-level)/2` and `1-(1-level)/2` quantiles across curves, as order
/// statistics with linear interpolation between ranks. Bands from fewer than
/// 40 curves are noisy at the default 95% level.
pub fn pointwise_envelope(
    curves: &[CurveEstimate],
    level: f64,
) -> Result<(CurveEstimate, CurveEstimate), HarnessError> {
    if curves.is_empty() {
        return Err(HarnessError::EmptyInput);
    }
    for c in curves {
        if c.grid() != curves[0].grid() {
            return Err(HarnessError::GridMismatch);
        }
    }
    let rows: Vec<&[f64]> = curves.iter().map(|c| c.values()).collect();
    let (lo, hi) = envelope_rows(&rows, level)?;
    let mut lo_meta = curves[0].meta.clone();
    lo_meta.estimator = format!("{}_lo", lo_meta.estimator);
    let mut hi_meta = curves[0].meta.clone();
    hi_meta.estimator = format!("{}_hi", hi_meta.estimator);
    Ok((
        CurveEstimate::new(curves[0].grid().to_vec(), lo, lo_meta)?,
        CurveEstimate::new(curves[0].grid().to_vec(), hi, hi_meta)?,
    ))
}

fn envelope_rows(rows: &[&[f64]], level: f64) -> Result<(Vec<f64>, Vec<f64>), HarnessError> {
    if rows.is_empty() {
        return Err(HarnessError::EmptyInput);
    }
    if !(level > 0.0 && level <= 1.0) {
        return Err(HarnessError::BadLevel { level });
    }
    let len = rows[0].len();
    if rows.iter().any(|r| r.len() != len) {
        return Err(HarnessError::GridMismatch);
    }
    let q_lo = 0.5 * (1.0 - level);
    let q_hi = 1.0 - q_lo;
    let mut lo = Vec::with_capacity(len);
    let mut hi = Vec::with_capacity(len);
    let mut column = vec![0.0; rows.len()];
    for node in 0..len {
        for (slot, row) in column.iter_mut().zip(rows) {
            *slot = row[node];
        }
        column.sort_by(f64::total_cmp);
        lo.push(quantile_sorted(&column, q_lo));
        hi.push(quantile_sorted(&column, q_hi));
    }
    Ok((lo, hi))
}

/// Quantile of a sorted sample: order statistics with linear interpolation
/// between ranks at position `q * (n - 1)`.
fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q * (n - 1) as f64;
    let i = (pos.floor() as usize).min(n - 1);
    let frac = pos - i as f64;
    if i + 1 >= n || frac == 0.0 {
        sorted[i]
    } else {
        sorted[i] + frac * (sorted[i + 1] - sorted[i])
    }
}

/// Per-estimator aggregate of one experiment.
#[derive(Clone, Debug)]
pub struct EstimatorSummary {
    pub spec: EstimatorSpec,
    pub grid: Vec<f64>,
    pub mean: Vec<f64>,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub truth: Vec<f64>,
    pub rimse: f64,
    pub bandwidth_mean: Option<f64>,
    pub bandwidth_sd: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct BandwidthRecord {
    pub replicate: usize,
    pub method: BandwidthMethod,
    pub sigma: f64,
}

#[derive(Clone, Debug)]
pub struct ReplicateFailure {
    pub replicate: usize,
    pub seed: u64,
    pub message: String,
}

/// Aggregated output of `run_experiment`.
#[derive(Clone, Debug)]
pub struct ExperimentSummary {
    pub replicates: usize,
    pub completed: usize,
    pub estimators: Vec<EstimatorSummary>,
    pub bandwidths: Vec<BandwidthRecord>,
    pub failures: Vec<ReplicateFailure>,
    pub warnings: Vec<String>,
    config_echo: String,
}

impl ExperimentSummary {
    /// Writes `summary_<estimator>.csv` (r,mean,lo,hi,truth), `rimse.csv`,
    /// `bandwidths.csv`, and a manifest describing the run.
    pub fn write(&self, dir: &Path) -> Result<(), HarnessError> {
        fs::create_dir_all(dir)?;
        for est in &self.estimators {
            let mut s = String::from("r,mean,lo,hi,truth\n");
            for k in 0..est.grid.len() {
                let _ = writeln!(
                    s,
                    "{},{},{},{},{}",
                    est.grid[k], est.mean[k], est.lo[k], est.hi[k], est.truth[k]
                );
            }
            fs::write(dir.join(format!("summary_{}.csv", est.spec.tag())), s)?;
        }

        let mut table = String::from("estimator,bandwidth_method,rimse\n");
        for est in &self.estimators {
            let _ = writeln!(
                table,
                "{}:{},{},{}",
                est.spec.id.label(),
                est.spec.intensity.label(),
                est.spec.bandwidth_label(),
                est.rimse
            );
        }
        fs::write(dir.join("rimse.csv"), table)?;

        let mut bw = String::from("replicate,sigma\n");
        for record in &self.bandwidths {
            let _ = writeln!(bw, "{},{}", record.replicate, record.sigma);
        }
        fs::write(dir.join("bandwidths.csv"), bw)?;

        let mut manifest = self.config_echo.clone();
        let _ = writeln!(manifest, "completed = {} of {}", self.completed, self.replicates);
        for f in &self.failures {
            let _ = writeln!(
                manifest,
                "failure: replicate {} seed {}: {}",
                f.replicate, f.seed, f.message
            );
        }
        for w in &self.warnings {
            let _ = writeln!(manifest, "warning: {w}");
        }
        fs::write(dir.join("manifest.txt"), manifest)?;
        Ok(())
    }
}

struct EstimatorPlan {
    spec: EstimatorSpec,
    grid: Vec<f64>,
    truth: Vec<f64>,
    gamma_reach: f64,
    pcf_bandwidth: f64,
    shared_model: Option<Arc<IntensityModel>>,
    shared_gamma: Option<Arc<GammaFunction>>,
}

struct Shared {
    process: ProcessKind,
    n_expected: f64,
    alpha: f64,
    seed: u64,
    window: Window,
    bank: Arc<SampleBank>,
    static_profile: Option<RetentionProfile>,
    static_coverage: f64,
    sigma_grid: Vec<f64>,
    needs_cvl: bool,
    needs_lcv: bool,
    plans: Vec<EstimatorPlan>,
}

enum Simulated {
    Uni(PointPattern),
    Pair(BivariatePattern),
}

struct ReplicateOutput {
    values: Vec<Vec<f64>>,
    bandwidths: Vec<(BandwidthMethod, f64)>,
}

/// Runs the experiment with replicates on the rayon worker pool.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentSummary, HarnessError> {
    run_experiment_with_mode(config, true)
}

/// Same experiment with an explicit scheduling mode; serial and parallel
/// runs produce identical summaries.
pub fn run_experiment_with_mode(
    config: &ExperimentConfig,
    parallel: bool,
) -> Result<ExperimentSummary, HarnessError> {
    config.validate().map_err(|m| HarnessError::Config { line: 0, message: m })?;
    let shared = prepare(config)?;
    let total = config.replicates;
    let results: Vec<Result<ReplicateOutput, ReplicateFailure>> = if parallel {
        (0..total).into_par_iter().map(|rep| run_replicate(&shared, rep)).collect()
    } else {
        (0..total).map(|rep| run_replicate(&shared, rep)).collect()
    };
    aggregate(config, &shared, results)
}

fn prepare(config: &ExperimentConfig) -> Result<Shared, HarnessError> {
    let window = Window::unit();
    let bank = Arc::new(SampleBank::new(derive_seed(config.seed, STREAM_BANK, 0), window));
    let static_profile = config.profile.static_profile();
    let static_coverage = static_profile.as_ref().map_or(0.0, |p| p.integral(&window));

    let mut plans = Vec::new();
    for spec in &config.estimators {
        let grid = grid_for(spec.id);
        let pcf_bandwidth = default_pcf_bandwidth(config.n_expected);
        let kern_reach = if spec.id.is_pcf() { 3.0 * pcf_bandwidth } else { 0.0 };
        let gamma_reach = grid.last().unwrap() + kern_reach;
        let truth = truth_values(spec.id, config.process, &grid)?;

        // the true-intensity model and its normalizer are replicate
        // independent whenever the profile is static, so build them once
        let mut shared_model = None;
        let mut shared_gamma = None;
        if spec.intensity == IntensityKind::Known {
            if let Some(profile) = &static_profile {
                let rho0 = config.n_expected / static_coverage;
                let model = Arc::new(known_model(rho0, profile.clone()));
                if spec.id.needs_gamma() {
                    let gamma = if spec.id.needs_pair() {
                        build_interpolated_cross_iso(
                            &model,
                            &model,
                            &bank,
                            gamma_reach,
                            GAMMA_SPACING,
                            config.alpha,
                        )?
                    } else {
                        build_interpolated_iso(&model, &bank, gamma_reach, GAMMA_SPACING, config.alpha)?
                    };
                    shared_gamma = Some(Arc::new(gamma));
                }
                shared_model = Some(model);
            }
        }
        plans.push(EstimatorPlan {
            spec: spec.clone(),
            grid,
            truth,
            gamma_reach,
            pcf_bandwidth,
            shared_model,
            shared_gamma,
        });
    }

    let needs_cvl = config.estimators.iter().any(|e| e.bandwidth == Some(BandwidthMethod::Cvl));
    let needs_lcv = config.estimators.iter().any(|e| e.bandwidth == Some(BandwidthMethod::Lcv));
    Ok(Shared {
        process: config.process,
        n_expected: config.n_expected,
        alpha: config.alpha,
        seed: config.seed,
        window,
        bank,
        static_profile,
        static_coverage,
        sigma_grid: default_sigma_grid(&window),
        needs_cvl,
        needs_lcv,
        plans,
    })
}

fn known_model(rho0: f64, profile: RetentionProfile) -> IntensityModel {
    IntensityModel::known(move |p| rho0 * profile.eval(p))
}

fn truth_values(
    id: EstimatorId,
    process: ProcessKind,
    grid: &[f64],
) -> Result<Vec<f64>, HarnessError> {
    let values = match (id.is_pcf(), process) {
        (false, ProcessKind::Lgcp) => {
            true_k_from_pcf(&|r| ReferencePcf::GLgcp.eval(r), grid)?.values().to_vec()
        }
        (false, _) => grid.iter().map(|&t| std::f64::consts::PI * t * t).collect(),
        (true, ProcessKind::Lgcp) => grid.iter().map(|&r| ReferencePcf::GLgcp.eval(r)).collect(),
        (true, _) => vec![1.0; grid.len()],
    };
    Ok(values)
}

fn run_replicate(shared: &Shared, rep: usize) -> Result<ReplicateOutput, ReplicateFailure> {
    let rep_seed = derive_seed(shared.seed, STREAM_PATTERN, rep as u64);
    replicate_inner(shared, rep, rep_seed).map_err(|e| ReplicateFailure {
        replicate: rep,
        seed: rep_seed,
        message: e.to_string(),
    })
}

fn replicate_inner(shared: &Shared, rep: usize, rep_seed: u64) -> Result<ReplicateOutput, HarnessError> {
    let window = &shared.window;
    let (profile, coverage) = match &shared.static_profile {
        Some(p) => (p.clone(), shared.static_coverage),
        None => {
            let p = RetentionProfile::lgf(window, derive_seed(shared.seed, STREAM_PROFILE, rep as u64))?;
            let coverage = p.integral(window);
            (p, coverage)
        }
    };
    let rho0 = shared.n_expected / coverage;

    let sim = match shared.process {
        ProcessKind::Poisson => {
            let p = profile.clone();
            Simulated::Uni(simulate_poisson_fn(window, move |u| rho0 * p.eval(u), rho0, rep_seed)?)
        }
        ProcessKind::Lgcp => {
            let spec = LgcpSpec::thinned(shared.n_expected, profile.clone());
            Simulated::Uni(simulate_lgcp(window, &spec, rep_seed)?)
        }
        ProcessKind::PoissonPair => {
            let p1 = profile.clone();
            let p2 = profile.clone();
            let first = simulate_poisson_fn(window, move |u| rho0 * p1.eval(u), rho0, rep_seed)?;
            let second = simulate_poisson_fn(
                window,
                move |u| rho0 * p2.eval(u),
                rho0,
                derive_seed(shared.seed, STREAM_PATTERN_SECOND, rep as u64),
            )?;
            Simulated::Pair(BivariatePattern::new(
                first.points().to_vec(),
                second.points().to_vec(),
                *window,
            )?)
        }
    };
    let selection_pattern = match &sim {
        Simulated::Uni(p) => p,
        Simulated::Pair(b) => b.first(),
    };

    let mut bandwidths = Vec::new();
    let mut sigma_cvl = None;
    let mut sigma_lcv = None;
    if shared.needs_cvl {
        let sigma = bandwidth_cvl(selection_pattern, &shared.sigma_grid)?;
        bandwidths.push((BandwidthMethod::Cvl, sigma));
        sigma_cvl = Some(sigma);
    }
    if shared.needs_lcv {
        let sigma = bandwidth_lcv(selection_pattern, &shared.sigma_grid)?;
        bandwidths.push((BandwidthMethod::Lcv, sigma));
        sigma_lcv = Some(sigma);
    }

    let mut values = Vec::with_capacity(shared.plans.len());
    for plan in &shared.plans {
        let sigma = match plan.spec.bandwidth {
            Some(BandwidthMethod::Cvl) => sigma_cvl,
            Some(BandwidthMethod::Lcv) => sigma_lcv,
            Some(BandwidthMethod::Fixed(v)) => Some(v),
            None => None,
        };
        let curve = estimate_one(shared, plan, &sim, &profile, rho0, sigma)?;
        values.push(curve);
    }
    Ok(ReplicateOutput { values, bandwidths })
}

/// Builds the intensity model for one estimator on one component pattern.
fn build_model(
    spec: &EstimatorSpec,
    plan: &EstimatorPlan,
    pattern: &PointPattern,
    profile: &RetentionProfile,
    rho0: f64,
    sigma: Option<f64>,
) -> Result<Arc<IntensityModel>, HarnessError> {
    match spec.intensity {
        IntensityKind::Known => {
            if let Some(model) = &plan.shared_model {
                Ok(model.clone())
            } else {
                Ok(Arc::new(known_model(rho0, profile.clone())))
            }
        }
        IntensityKind::Parametric => {
            let p = profile.clone();
            let parametric =
                ParametricIntensity::new(move |u| p.eval(u), pattern.points().len(), pattern.window())?;
            Ok(Arc::new(IntensityModel::parametric(parametric)))
        }
        IntensityKind::Kernel | IntensityKind::KernelLeaveOut => {
            let sigma = sigma.expect("kernel intensities always carry a bandwidth method");
            let kernel = Kernel2d::new(sigma)?;
            Ok(Arc::new(if spec.intensity == IntensityKind::Kernel {
                IntensityModel::kernel(pattern, kernel)
            } else {
                IntensityModel::kernel_leave_out(pattern, kernel)
            }))
        }
    }
}

fn estimate_one(
    shared: &Shared,
    plan: &EstimatorPlan,
    sim: &Simulated,
    profile: &RetentionProfile,
    rho0: f64,
    sigma: Option<f64>,
) -> Result<Vec<f64>, HarnessError> {
    let spec = &plan.spec;
    let curve = match sim {
        Simulated::Uni(pattern) => {
            let model = build_model(spec, plan, pattern, profile, rho0, sigma)?;
            match spec.id {
                EstimatorId::KGlobalIso | EstimatorId::GGlobalIso => {
                    let gamma = match &plan.shared_gamma {
                        Some(g) => g.clone(),
                        None => Arc::new(build_interpolated_iso(
                            &model,
                            &shared.bank,
                            plan.gamma_reach,
                            GAMMA_SPACING,
                            shared.alpha,
                        )?),
                    };
                    if spec.id == EstimatorId::KGlobalIso {
                        k_global_iso(pattern, &gamma, &plan.grid)?
                    } else {
                        let kern = Kernel1d::new(plan.pcf_bandwidth)?;
                        g_global_iso(pattern, &gamma, &kern, &plan.grid)?
                    }
                }
                EstimatorId::KLocalIso => k_local_iso(pattern, &model, &plan.grid)?,
                EstimatorId::GLocalIso => {
                    let kern = Kernel1d::new(plan.pcf_bandwidth)?;
                    g_local_iso(pattern, &model, &kern, &plan.grid, LocalIsoForm::Hat)?
                }
                _ => unreachable!("pair estimators rejected for univariate processes"),
            }
        }
        Simulated::Pair(biv) => {
            let m1 = build_model(spec, plan, biv.first(), profile, rho0, sigma)?;
            let m2 = build_model(spec, plan, biv.second(), profile, rho0, sigma)?;
            match spec.id {
                EstimatorId::K12GlobalIso => {
                    let gamma = match &plan.shared_gamma {
                        Some(g) => g.clone(),
                        None => Arc::new(build_interpolated_cross_iso(
                            &m1,
                            &m2,
                            &shared.bank,
                            plan.gamma_reach,
                            GAMMA_SPACING,
                            shared.alpha,
                        )?),
                    };
                    k12_global_iso(biv, &gamma, &plan.grid)?
                }
                EstimatorId::K12LocalIso => k12_local_iso(biv, &m1, &m2, &plan.grid)?,
                _ => unreachable!("univariate estimators rejected for paired processes"),
            }
        }
    };
    Ok(curve.values().to_vec())
}

fn aggregate(
    config: &ExperimentConfig,
    shared: &Shared,
    results: Vec<Result<ReplicateOutput, ReplicateFailure>>,
) -> Result<ExperimentSummary, HarnessError> {
    let total = results.len();
    let mut outputs = Vec::new();
    let mut failures = Vec::new();
    let mut bandwidths = Vec::new();
    for (rep, result) in results.into_iter().enumerate() {
        match result {
            Ok(out) => {
                for &(method, sigma) in &out.bandwidths {
                    bandwidths.push(BandwidthRecord { replicate: rep, method, sigma });
                }
                outputs.push(out);
            }
            Err(failure) => failures.push(failure),
        }
    }
    if failures.len() as f64 > FAILURE_BUDGET * total as f64 {
        let first = &failures[0];
        return Err(HarnessError::TooManyFailures {
            failed: failures.len(),
            total,
            first_replicate: first.replicate,
            first_seed: first.seed,
            first_message: first.message.clone(),
        });
    }
    let completed = outputs.len();
    if completed == 0 {
        return Err(HarnessError::EmptyInput);
    }

    let mut warnings = Vec::new();
    if completed < ENVELOPE_MIN_REPLICATES {
        warnings.push(format!(
            "envelope from {completed} replicates; the 95% band needs at least {ENVELOPE_MIN_REPLICATES}"
        ));
    }

    let mut estimators = Vec::new();
    for (e_idx, plan) in shared.plans.iter().enumerate() {
        let rows: Vec<&[f64]> = outputs.iter().map(|o| o.values[e_idx].as_slice()).collect();
        let len = plan.grid.len();
        let mut mean = vec![0.0; len];
        for row in &rows {
            for (m, v) in mean.iter_mut().zip(*row) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= rows.len() as f64;
        }
        let (lo, hi) = envelope_rows(&rows, ENVELOPE_LEVEL)?;
        let value = rimse_rows(&plan.grid, &rows, &plan.truth, config.r_max)?;
        let (bandwidth_mean, bandwidth_sd) = match plan.spec.bandwidth {
            Some(method @ (BandwidthMethod::Cvl | BandwidthMethod::Lcv)) => {
                let sigmas: Vec<f64> = bandwidths
                    .iter()
                    .filter(|r| r.method == method)
                    .map(|r| r.sigma)
                    .collect();
                let m = sigmas.iter().sum::<f64>() / sigmas.len() as f64;
                let sd = if sigmas.len() > 1 {
                    (sigmas.iter().map(|s| (s - m).powi(2)).sum::<f64>() / (sigmas.len() - 1) as f64)
                        .sqrt()
                } else {
                    0.0
                };
                (Some(m), Some(sd))
            }
            _ => (None, None),
        };
        estimators.push(EstimatorSummary {
            spec: plan.spec.clone(),
            grid: plan.grid.clone(),
            mean,
            lo,
            hi,
            truth: plan.truth.clone(),
            rimse: value,
            bandwidth_mean,
            bandwidth_sd,
        });
    }

    Ok(ExperimentSummary {
        replicates: total,
        completed,
        estimators,
        bandwidths,
        failures,
        warnings,
        config_echo: config.echo(),
    })
}
