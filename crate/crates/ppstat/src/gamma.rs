//! Monte Carlo evaluation of the global normalization factors used by the
//! reweighted second-order estimators:
//!
//! * `γ(h)   = ∫_{W ∩ W_{-h}} ρ(u) ρ(u+h) du`
//! * `γ^iso(r)`: the angular average of `γ(r s)` over unit directions `s`
//! * cross versions with `ρ₁(u) ρ₂(u+h)`
//!
//! Evaluations draw from a shared [`SampleBank`] of uniform points and
//! directions so that repeated queries reuse samples deterministically, and
//! can be frozen onto interpolation grids for fast downstream evaluation.

use std::io::{BufRead, Write as IoWrite};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::geometry::{Point, Window};
use crate::intensity::IntensityModel;
use crate::numeric::{BilinearInterp, LinearInterp};
use crate::pattern::fmt_coord;

/// Default coefficient-of-variation stopping threshold.
pub const DEFAULT_ALPHA: f64 = 0.005;
/// Tighter threshold used by envelope and error-curve experiments.
pub const EXPERIMENT_ALPHA: f64 = 0.001;

/// First convergence check happens after this many accepted samples.
const BATCH_START: usize = 1024;
/// Hard cap on accepted samples per evaluation.
pub const SAMPLE_CAP: usize = 1 << 22;
/// Hard cap on bank entries consumed per evaluation, so queries with a
/// near-zero acceptance rate terminate.
const PROPOSAL_CAP: usize = 1 << 23;
/// Overlap volumes below this evaluate to exactly zero.
const MIN_OVERLAP: f64 = 1e-12;

const BANK_BLOCK: usize = 1 << 15;

#[derive(Debug, Error)]
pub enum GammaError {
    #[error("cv threshold must be positive and finite, got {0}")]
    BadAlpha(f64),
    #[error("constant intensity product must be positive and finite, got {0}")]
    BadProduct(f64),
    #[error("distance must be non-negative, got {0}")]
    NegativeDistance(f64),
    #[error("grid spacing must be positive and finite, got {0}")]
    BadSpacing(f64),
    #[error("degenerate intensity model: mean sample product {mean} at n={n} for {query}")]
    DegenerateModel { query: String, mean: f64, n: usize },
    #[error("query {query} outside interpolation range [0, {max}]")]
    OutOfRange { query: String, max: f64 },
    #[error("{op} needs a {want} normalizer, got {got}")]
    KindMismatch { op: &'static str, want: &'static str, got: &'static str },
    #[error("gamma cache i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("gamma cache parse error at line {line}: {detail}")]
    Parse { line: usize, detail: String },
}

/// Append-only bank of uniform points on `W` paired with uniform unit
/// directions. Entry `j` depends only on the seed and `j`, never on how the
/// bank grew, so evaluations that consume a prefix are reproducible.
pub struct SampleBank {
    seed: u64,
    window: Window,
    state: RwLock<BankState>,
}

struct BankState {
    rng: ChaCha8Rng,
    pts: Vec<Point>,
    dirs: Vec<Point>,
}

impl SampleBank {
    pub fn new(seed: u64, window: Window) -> Self {
        SampleBank {
            seed,
            window,
            state: RwLock::new(BankState {
                rng: ChaCha8Rng::seed_from_u64(seed),
                pts: Vec::new(),
                dirs: Vec::new(),
            }),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn window(&self) -> &Window {
        &self.window
    }

    pub fn len(&self) -> usize {
        self.state.read().unwrap().pts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Grows the bank to at least `n` entries.
    pub fn ensure(&self, n: usize) {
        if self.state.read().unwrap().pts.len() >= n {
            return;
        }
        let mut st = self.state.write().unwrap();
        while st.pts.len() < n {
            let p = self.window.sample_uniform(&mut st.rng);
            let theta: f64 = st.rng.random::<f64>() * std::f64::consts::TAU;
            st.pts.push(p);
            st.dirs.push(Point::new(theta.cos(), theta.sin()));
        }
    }

    /// Runs `f` over entries `[from, to)` while holding the read lock.
    fn with_entries<R>(&self, from: usize, to: usize, f: impl FnOnce(&[Point], &[Point]) -> R) -> R {
        self.ensure(to);
        let st = self.state.read().unwrap();
        f(&st.pts[from..to], &st.dirs[from..to])
    }
}

/// Result of one Monte Carlo normalizer evaluation.
#[derive(Debug, Clone, Copy)]
pub struct GammaEval {
    pub value: f64,
    /// Achieved coefficient of variation of the mean.
    pub cv: f64,
    /// Accepted samples used.
    pub n: usize,
    /// False when a cap was hit before the cv threshold was met.
    pub converged: bool,
}

enum StopRule {
    Cv(f64),
    FixedN(usize),
}

/// Shared accumulation loop: walks bank entries in order, feeds accepted
/// terms into a running mean, and stops per the rule. `factor` scales the
/// conditional mean back to the integral (overlap volume, or its angular
/// mean for isotropic kinds).
fn run_mc(
    bank: &SampleBank,
    stop: StopRule,
    factor: f64,
    query: &str,
    mut term: impl FnMut(usize, Point, Point) -> Option<f64>,
) -> Result<GammaEval, GammaError> {
    if factor < MIN_OVERLAP {
        return Ok(GammaEval { value: 0.0, cv: 0.0, n: 0, converged: true });
    }
    let mut sum = 0.0f64;
    let mut sum_sq = 0.0f64;
    let mut n = 0usize;
    let mut target = match stop {
        StopRule::Cv(_) => BATCH_START,
        StopRule::FixedN(k) => k,
    };
    let mut start = 0usize;
    let mut finished: Option<(f64, bool)> = None; // (cv, converged)
    while finished.is_none() && start < PROPOSAL_CAP {
        let end = (start + BANK_BLOCK).min(PROPOSAL_CAP);
        bank.with_entries(start, end, |pts, dirs| {
            for (off, (&v, &dir)) in pts.iter().zip(dirs).enumerate() {
                let Some(t) = term(start + off, v, dir) else { continue };
                sum += t;
                sum_sq += t * t;
                n += 1;
                if n == target {
                    let mean = sum / n as f64;
                    let cv = if mean > 0.0 && n > 1 {
                        let var = ((sum_sq - sum * mean) / (n - 1) as f64).max(0.0);
                        (var / n as f64).sqrt() / mean
                    } else {
                        f64::INFINITY
                    };
                    match stop {
                        StopRule::FixedN(_) => {
                            finished = Some((cv, true));
                            return;
                        }
                        StopRule::Cv(alpha) => {
                            if cv < alpha {
                                finished = Some((cv, true));
                                return;
                            }
                            if n >= SAMPLE_CAP {
                                finished = Some((cv, false));
                                return;
                            }
                            target = (target * 2).min(SAMPLE_CAP);
                        }
                    }
                }
            }
        });
        start = end;
    }
    let mean = if n > 0 { sum / n as f64 } else { 0.0 };
    let (cv, converged) = finished.unwrap_or((f64::INFINITY, false));
    if !(mean > 0.0) {
        return Err(GammaError::DegenerateModel { query: query.to_string(), mean, n });
    }
    Ok(GammaEval { value: factor * mean, cv, n, converged })
}

fn check_alpha(alpha: f64) -> Result<(), GammaError> {
    if alpha > 0.0 && alpha.is_finite() {
        Ok(())
    } else {
        Err(GammaError::BadAlpha(alpha))
    }
}

/// Maps `h` to its sign-canonical representative; `γ(h) = γ(-h)` for a
/// single process, so both signs share one sample subsequence and agree
/// bit-for-bit. Cross normalizers are not symmetric and must not do this.
fn canonical(h: Point) -> Point {
    if h.x < 0.0 || (h.x == 0.0 && h.y < 0.0) {
        h.neg()
    } else {
        h
    }
}

/// Cache of plain intensity evaluations at bank points, keyed by bank index.
/// Values are pure functions of the index, so racing writers store the same
/// bits and reads are deterministic.
struct EndpointCache {
    chunks: RwLock<Vec<Arc<Vec<AtomicU64>>>>,
}

const CACHE_CHUNK: usize = 1 << 16;

impl EndpointCache {
    fn new() -> Self {
        EndpointCache { chunks: RwLock::new(Vec::new()) }
    }

    fn rho(&self, model: &IntensityModel, j: usize, v: Point) -> f64 {
        let ci = j / CACHE_CHUNK;
        let off = j % CACHE_CHUNK;
        let chunk = {
            let ch = self.chunks.read().unwrap();
            if ci < ch.len() {
                Some(ch[ci].clone())
            } else {
                None
            }
        };
        let chunk = match chunk {
            Some(c) => c,
            None => {
                let mut ch = self.chunks.write().unwrap();
                while ch.len() <= ci {
                    ch.push(Arc::new((0..CACHE_CHUNK).map(|_| AtomicU64::new(u64::MAX)).collect()));
                }
                ch[ci].clone()
            }
        };
        let bits = chunk[off].load(Ordering::Relaxed);
        if bits != u64::MAX {
            return f64::from_bits(bits);
        }
        let val = model.endpoint(v);
        chunk[off].store(val.to_bits(), Ordering::Relaxed);
        val
    }
}

fn gamma_mc_impl(
    model: &IntensityModel,
    bank: &SampleBank,
    h: Point,
    stop: StopRule,
    cache: Option<&EndpointCache>,
) -> Result<GammaEval, GammaError> {
    let h = canonical(h);
    let win = *bank.window();
    let overlap = win.overlap_volume(h);
    let query = format!("gamma(h=({}, {}))", h.x, h.y);
    run_mc(bank, stop, overlap, &query, |j, v, _| {
        let u2 = v.add(h);
        if !win.contains(u2) {
            return None;
        }
        Some(match cache {
            Some(c) => model.product_from(c.rho(model, j, v), v, u2),
            None => model.product_evaluate(v, u2),
        })
    })
}

fn gamma_iso_mc_impl(
    model: &IntensityModel,
    bank: &SampleBank,
    r: f64,
    stop: StopRule,
    cache: Option<&EndpointCache>,
) -> Result<GammaEval, GammaError> {
    if r < 0.0 {
        return Err(GammaError::NegativeDistance(r));
    }
    let win = *bank.window();
    let factor = win.isotropized_overlap(r);
    let query = format!("gamma_iso(r={r})");
    run_mc(bank, stop, factor, &query, |j, v, dir| {
        let u2 = Point::new(v.x + r * dir.x, v.y + r * dir.y);
        if !win.contains(u2) {
            return None;
        }
        Some(match cache {
            Some(c) => model.product_from(c.rho(model, j, v), v, u2),
            None => model.product_evaluate(v, u2),
        })
    })
}

fn gamma12_mc_impl(
    model1: &IntensityModel,
    model2: &IntensityModel,
    bank: &SampleBank,
    h: Point,
    stop: StopRule,
    cache1: Option<&EndpointCache>,
) -> Result<GammaEval, GammaError> {
    let win = *bank.window();
    let overlap = win.overlap_volume(h);
    let query = format!("gamma12(h=({}, {}))", h.x, h.y);
    // cross products pair distinct processes, so there are no diagonal
    // terms: plain endpoint evaluations on both sides
    run_mc(bank, stop, overlap, &query, |j, v, _| {
        let u2 = v.add(h);
        if !win.contains(u2) {
            return None;
        }
        let r1 = match cache1 {
            Some(c) => c.rho(model1, j, v),
            None => model1.endpoint(v),
        };
        Some(r1 * model2.endpoint(u2))
    })
}

fn gamma12_iso_mc_impl(
    model1: &IntensityModel,
    model2: &IntensityModel,
    bank: &SampleBank,
    r: f64,
    stop: StopRule,
    cache1: Option<&EndpointCache>,
) -> Result<GammaEval, GammaError> {
    if r < 0.0 {
        return Err(GammaError::NegativeDistance(r));
    }
    let win = *bank.window();
    let factor = win.isotropized_overlap(r);
    let query = format!("gamma12_iso(r={r})");
    run_mc(bank, stop, factor, &query, |j, v, dir| {
        let u2 = Point::new(v.x + r * dir.x, v.y + r * dir.y);
        if !win.contains(u2) {
            return None;
        }
        let r1 = match cache1 {
            Some(c) => c.rho(model1, j, v),
            None => model1.endpoint(v),
        };
        Some(r1 * model2.endpoint(u2))
    })
}

/// `γ(h)` by Monte Carlo, stopping when the cv of the mean drops below
/// `alpha`.
pub fn gamma_mc(
    model: &IntensityModel,
    bank: &SampleBank,
    h: Point,
    alpha: f64,
) -> Result<GammaEval, GammaError> {
    check_alpha(alpha)?;
    gamma_mc_impl(model, bank, h, StopRule::Cv(alpha), None)
}

/// `γ(h)` from exactly `n` accepted samples (no adaptive stopping); used
/// for unbiasedness and dominance checks where estimates must share their
/// sample subsequence.
pub fn gamma_mc_fixed(
    model: &IntensityModel,
    bank: &SampleBank,
    h: Point,
    n: usize,
) -> Result<GammaEval, GammaError> {
    gamma_mc_impl(model, bank, h, StopRule::FixedN(n), None)
}

/// `γ^iso(r)` by Monte Carlo with cv stopping.
pub fn gamma_iso_mc(
    model: &IntensityModel,
    bank: &SampleBank,
    r: f64,
    alpha: f64,
) -> Result<GammaEval, GammaError> {
    check_alpha(alpha)?;
    gamma_iso_mc_impl(model, bank, r, StopRule::Cv(alpha), None)
}

/// `γ^iso(r)` from exactly `n` accepted samples.
pub fn gamma_iso_mc_fixed(
    model: &IntensityModel,
    bank: &SampleBank,
    r: f64,
    n: usize,
) -> Result<GammaEval, GammaError> {
    gamma_iso_mc_impl(model, bank, r, StopRule::FixedN(n), None)
}

/// Cross normalizer `γ₁₂(h)`; not symmetric in `h` (instead
/// `γ₂₁(h) = γ₁₂(-h)`), so no sign canonicalization happens.
pub fn gamma12_mc(
    model1: &IntensityModel,
    model2: &IntensityModel,
    bank: &SampleBank,
    h: Point,
    alpha: f64,
) -> Result<GammaEval, GammaError> {
    check_alpha(alpha)?;
    gamma12_mc_impl(model1, model2, bank, h, StopRule::Cv(alpha), None)
}

/// Cross isotropic normalizer `γ₁₂^iso(r)`.
pub fn gamma12_iso_mc(
    model1: &IntensityModel,
    model2: &IntensityModel,
    bank: &SampleBank,
    r: f64,
    alpha: f64,
) -> Result<GammaEval, GammaError> {
    check_alpha(alpha)?;
    gamma12_iso_mc_impl(model1, model2, bank, r, StopRule::Cv(alpha), None)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GammaKind {
    Vector,
    Isotropic,
    CrossVector,
    CrossIsotropic,
}

impl GammaKind {
    fn name(self) -> &'static str {
        match self {
            GammaKind::Vector => "vector",
            GammaKind::Isotropic => "isotropic",
            GammaKind::CrossVector => "cross-vector",
            GammaKind::CrossIsotropic => "cross-isotropic",
        }
    }
}

enum GammaBody {
    DirectUni { model: Arc<IntensityModel>, bank: Arc<SampleBank> },
    DirectCross { model1: Arc<IntensityModel>, model2: Arc<IntensityModel>, bank: Arc<SampleBank> },
    InterpIso { interp: LinearInterp, cvs: Vec<f64> },
    InterpVec { interp: BilinearInterp, cvs: Vec<f64> },
    ClosedFormConstant { product: f64, window: Window },
}

/// An evaluable normalizer: either a live Monte Carlo evaluator or a frozen
/// interpolation grid.
pub struct GammaFunction {
    kind: GammaKind,
    alpha: f64,
    body: GammaBody,
}

impl GammaFunction {
    /// Live vector-lag evaluator.
    pub fn direct(kind: GammaKind, model: Arc<IntensityModel>, bank: Arc<SampleBank>, alpha: f64) -> Result<Self, GammaError> {
        check_alpha(alpha)?;
        Ok(GammaFunction { kind, alpha, body: GammaBody::DirectUni { model, bank } })
    }

    /// Exact normalizer for constant intensities, `product = ρ₁ρ₂`:
    /// `γ(h) = ρ₁ρ₂ |W ∩ W_{−h}|` and `γ^iso(r) = ρ₁ρ₂ ā_W(r)`, both in
    /// closed form with no Monte Carlo error. `alpha()` reports 0.
    pub fn closed_form_constant(
        kind: GammaKind,
        product: f64,
        window: Window,
    ) -> Result<Self, GammaError> {
        if !(product > 0.0) || !product.is_finite() {
            return Err(GammaError::BadProduct(product));
        }
        Ok(GammaFunction {
            kind,
            alpha: 0.0,
            body: GammaBody::ClosedFormConstant { product, window },
        })
    }

    /// Live cross evaluator.
    pub fn direct_cross(
        kind: GammaKind,
        model1: Arc<IntensityModel>,
        model2: Arc<IntensityModel>,
        bank: Arc<SampleBank>,
        alpha: f64,
    ) -> Result<Self, GammaError> {
        check_alpha(alpha)?;
        Ok(GammaFunction { kind, alpha, body: GammaBody::DirectCross { model1, model2, bank } })
    }

    pub fn kind(&self) -> GammaKind {
        self.kind
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn is_interpolated(&self) -> bool {
        matches!(self.body, GammaBody::InterpIso { .. } | GammaBody::InterpVec { .. })
    }

    /// Achieved per-node cv estimates, when interpolated.
    pub fn node_cvs(&self) -> Option<&[f64]> {
        match &self.body {
            GammaBody::InterpIso { cvs, .. } | GammaBody::InterpVec { cvs, .. } => Some(cvs),
            _ => None,
        }
    }

    /// Evaluates at a vector lag. Isotropic kinds reduce to the lag norm.
    pub fn eval_vec(&self, h: Point) -> Result<f64, GammaError> {
        match self.kind {
            GammaKind::Isotropic | GammaKind::CrossIsotropic => return self.eval_iso(h.norm()),
            GammaKind::Vector | GammaKind::CrossVector => {}
        }
        match &self.body {
            GammaBody::DirectUni { model, bank } => {
                Ok(gamma_mc_impl(model, bank, h, StopRule::Cv(self.alpha), None)?.value)
            }
            GammaBody::DirectCross { model1, model2, bank } => {
                Ok(gamma12_mc_impl(model1, model2, bank, h, StopRule::Cv(self.alpha), None)?.value)
            }
            GammaBody::InterpVec { interp, .. } => {
                let h = if self.kind == GammaKind::Vector { canonical(h) } else { h };
                interp.eval(h.x, h.y).ok_or_else(|| GammaError::OutOfRange {
                    query: format!("h=({}, {})", h.x, h.y),
                    max: interp.x0 + (interp.nx - 1) as f64 * interp.dx,
                })
            }
            GammaBody::ClosedFormConstant { product, window } => {
                Ok(product * window.overlap_volume(h))
            }
            GammaBody::InterpIso { .. } => unreachable!("kind checked above"),
        }
    }

    /// Evaluates at a distance; errors for vector kinds.
    pub fn eval_iso(&self, r: f64) -> Result<f64, GammaError> {
        match self.kind {
            GammaKind::Vector | GammaKind::CrossVector => {
                return Err(GammaError::KindMismatch {
                    op: "eval_iso",
                    want: "isotropic",
                    got: self.kind.name(),
                })
            }
            GammaKind::Isotropic | GammaKind::CrossIsotropic => {}
        }
        match &self.body {
            GammaBody::DirectUni { model, bank } => {
                Ok(gamma_iso_mc_impl(model, bank, r, StopRule::Cv(self.alpha), None)?.value)
            }
            GammaBody::DirectCross { model1, model2, bank } => {
                Ok(gamma12_iso_mc_impl(model1, model2, bank, r, StopRule::Cv(self.alpha), None)?.value)
            }
            GammaBody::InterpIso { interp, .. } => {
                interp.eval(r).ok_or_else(|| GammaError::OutOfRange {
                    query: format!("r={r}"),
                    max: interp.max_arg(),
                })
            }
            GammaBody::ClosedFormConstant { product, window } => {
                if r < 0.0 {
                    return Err(GammaError::NegativeDistance(r));
                }
                Ok(product * window.isotropized_overlap(r))
            }
            GammaBody::InterpVec { .. } => unreachable!("kind checked above"),
        }
    }

    /// Writes an isotropic interpolation grid as CSV (`r,gamma,cv` after
    /// `#` metadata lines).
    pub fn save_iso_csv(&self, path: &Path) -> Result<(), GammaError> {
        let GammaBody::InterpIso { interp, cvs } = &self.body else {
            return Err(GammaError::KindMismatch {
                op: "save_iso_csv",
                want: "interpolated isotropic",
                got: self.kind.name(),
            });
        };
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "# kind={}", self.kind.name())?;
        writeln!(out, "# alpha={}", fmt_coord(self.alpha))?;
        writeln!(out, "r,gamma,cv")?;
        for (i, (&v, &cv)) in interp.values.iter().zip(cvs).enumerate() {
            let r = interp.start + i as f64 * interp.step;
            writeln!(out, "{},{},{}", fmt_coord(r), fmt_coord(v), fmt_coord(cv))?;
        }
        out.flush()?;
        Ok(())
    }

    /// Reads a grid written by [`GammaFunction::save_iso_csv`].
    pub fn load_iso_csv(path: &Path) -> Result<Self, GammaError> {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut kind = GammaKind::Isotropic;
        let mut alpha = DEFAULT_ALPHA;
        let mut rs: Vec<f64> = Vec::new();
        let mut vals = Vec::new();
        let mut cvs = Vec::new();
        for (idx, line) in file.lines().enumerate() {
            let line = line?;
            let lineno = idx + 1;
            let t = line.trim();
            if t.is_empty() {
                continue;
            }
            if let Some(rest) = t.strip_prefix('#') {
                let rest = rest.trim();
                if let Some(v) = rest.strip_prefix("kind=") {
                    kind = match v.trim() {
                        "isotropic" => GammaKind::Isotropic,
                        "cross-isotropic" => GammaKind::CrossIsotropic,
                        other => {
                            return Err(GammaError::Parse {
                                line: lineno,
                                detail: format!("unsupported kind {other:?}"),
                            })
                        }
                    };
                } else if let Some(v) = rest.strip_prefix("alpha=") {
                    alpha = v.trim().parse().map_err(|e| GammaError::Parse {
                        line: lineno,
                        detail: format!("bad alpha: {e}"),
                    })?;
                }
                continue;
            }
            if t == "r,gamma,cv" {
                continue;
            }
            let mut parts = t.split(',');
            let mut next = |name: &str| -> Result<f64, GammaError> {
                parts
                    .next()
                    .ok_or_else(|| GammaError::Parse {
                        line: lineno,
                        detail: format!("missing {name}"),
                    })?
                    .trim()
                    .parse()
                    .map_err(|e| GammaError::Parse { line: lineno, detail: format!("bad {name}: {e}") })
            };
            rs.push(next("r")?);
            vals.push(next("gamma")?);
            cvs.push(next("cv")?);
        }
        if rs.len() < 2 {
            return Err(GammaError::Parse { line: 0, detail: "need at least two grid rows".into() });
        }
        let step = rs[1] - rs[0];
        for (i, w) in rs.windows(2).enumerate() {
            if ((w[1] - w[0]) - step).abs() > 1e-9 * step.abs().max(1.0) {
                return Err(GammaError::Parse {
                    line: i + 1,
                    detail: "grid abscissae not uniformly spaced".into(),
                });
            }
        }
        if !(step > 0.0) {
            return Err(GammaError::Parse { line: 0, detail: "grid step must be positive".into() });
        }
        let interp = LinearInterp::new(rs[0], step, vals);
        Ok(GammaFunction { kind, alpha, body: GammaBody::InterpIso { interp, cvs } })
    }
}

/// Spacing actually used for an interpolation grid: the requested spacing,
/// tightened to `σ/10` for kernel models so smoothing-scale curvature is
/// resolved.
fn effective_spacing(requested: f64, sigmas: &[Option<f64>]) -> Result<f64, GammaError> {
    if !(requested > 0.0 && requested.is_finite()) {
        return Err(GammaError::BadSpacing(requested));
    }
    let mut s = requested;
    for sig in sigmas.iter().flatten() {
        s = s.min(sig / 10.0);
    }
    Ok(s)
}

/// Number of equal intervals covering `extent` at (close to) `spacing`.
///
/// A quotient within a relative 1e-9 of an integer snaps to it, so an extent
/// chosen as an exact multiple of the spacing keeps that spacing even when
/// the division lands a few ulps above the integer; anything else rounds up.
fn interval_count(extent: f64, spacing: f64) -> usize {
    let ratio = extent / spacing;
    let snapped = ratio.round();
    let n = if (ratio - snapped).abs() <= 1e-9 * snapped.max(1.0) { snapped } else { ratio.ceil() };
    (n as usize).max(1)
}

fn iso_grid(extent: f64, spacing: f64) -> (usize, f64) {
    let n = interval_count(extent, spacing) + 1;
    (n, extent / (n - 1) as f64)
}

fn build_iso_body(
    kind: GammaKind,
    bank: &SampleBank,
    r_max: f64,
    spacing: f64,
    alpha: f64,
    eval: impl Fn(f64, &EndpointCache) -> Result<GammaEval, GammaError> + Sync,
) -> Result<GammaFunction, GammaError> {
    check_alpha(alpha)?;
    if !(r_max > 0.0 && r_max.is_finite()) {
        return Err(GammaError::BadSpacing(r_max));
    }
    let (n, step) = iso_grid(r_max, spacing);
    let cache = EndpointCache::new();
    // warm the bank serially so parallel node evaluation never races growth
    bank.ensure(BANK_BLOCK);
    let results: Result<Vec<GammaEval>, GammaError> = (0..n)
        .into_par_iter()
        .map(|i| eval(i as f64 * step, &cache))
        .collect();
    let results = results?;
    let values = results.iter().map(|e| e.value).collect();
    let cvs = results.iter().map(|e| e.cv).collect();
    Ok(GammaFunction {
        kind,
        alpha,
        body: GammaBody::InterpIso { interp: LinearInterp::new(0.0, step, values), cvs },
    })
}

/// Freezes `γ^iso` onto a uniform grid over `[0, r_max]` with linear
/// interpolation between nodes.
pub fn build_interpolated_iso(
    model: &Arc<IntensityModel>,
    bank: &Arc<SampleBank>,
    r_max: f64,
    spacing: f64,
    alpha: f64,
) -> Result<GammaFunction, GammaError> {
    let spacing = effective_spacing(spacing, &[model.sigma()])?;
    build_iso_body(GammaKind::Isotropic, bank, r_max, spacing, alpha, |r, cache| {
        gamma_iso_mc_impl(model, bank, r, StopRule::Cv(alpha), Some(cache))
    })
}

/// Cross version of [`build_interpolated_iso`].
pub fn build_interpolated_cross_iso(
    model1: &Arc<IntensityModel>,
    model2: &Arc<IntensityModel>,
    bank: &Arc<SampleBank>,
    r_max: f64,
    spacing: f64,
    alpha: f64,
) -> Result<GammaFunction, GammaError> {
    let spacing = effective_spacing(spacing, &[model1.sigma(), model2.sigma()])?;
    build_iso_body(GammaKind::CrossIsotropic, bank, r_max, spacing, alpha, |r, cache| {
        gamma12_iso_mc_impl(model1, model2, bank, r, StopRule::Cv(alpha), Some(cache))
    })
}

fn build_vec_body(
    kind: GammaKind,
    bank: &SampleBank,
    h_max: f64,
    spacing: f64,
    alpha: f64,
    eval: impl Fn(Point, &EndpointCache) -> Result<GammaEval, GammaError> + Sync,
) -> Result<GammaFunction, GammaError> {
    check_alpha(alpha)?;
    if !(h_max > 0.0 && h_max.is_finite()) {
        return Err(GammaError::BadSpacing(h_max));
    }
    let half = interval_count(h_max, spacing);
    let n = 2 * half + 1;
    let step = h_max / half as f64;
    let cache = EndpointCache::new();
    bank.ensure(BANK_BLOCK);
    let results: Result<Vec<GammaEval>, GammaError> = (0..n * n)
        .into_par_iter()
        .map(|idx| {
            let i = idx / n;
            let j = idx % n;
            let h = Point::new(
                (j as f64 - half as f64) * step,
                (i as f64 - half as f64) * step,
            );
            eval(h, &cache)
        })
        .collect();
    let results = results?;
    let values: Vec<f64> = results.iter().map(|e| e.value).collect();
    let cvs = results.iter().map(|e| e.cv).collect();
    let interp = BilinearInterp::new(-h_max, -h_max, step, step, n, n, values);
    Ok(GammaFunction { kind, alpha, body: GammaBody::InterpVec { interp, cvs } })
}

/// Freezes `γ(h)` onto a uniform grid over `[-h_max, h_max]²` with bilinear
/// interpolation.
pub fn build_interpolated_vec(
    model: &Arc<IntensityModel>,
    bank: &Arc<SampleBank>,
    h_max: f64,
    spacing: f64,
    alpha: f64,
) -> Result<GammaFunction, GammaError> {
    let spacing = effective_spacing(spacing, &[model.sigma()])?;
    build_vec_body(GammaKind::Vector, bank, h_max, spacing, alpha, |h, cache| {
        gamma_mc_impl(model, bank, h, StopRule::Cv(alpha), Some(cache))
    })
}

/// Cross version of [`build_interpolated_vec`].
pub fn build_interpolated_cross_vec(
    model1: &Arc<IntensityModel>,
    model2: &Arc<IntensityModel>,
    bank: &Arc<SampleBank>,
    h_max: f64,
    spacing: f64,
    alpha: f64,
) -> Result<GammaFunction, GammaError> {
    let spacing = effective_spacing(spacing, &[model1.sigma(), model2.sigma()])?;
    build_vec_body(GammaKind::CrossVector, bank, h_max, spacing, alpha, |h, cache| {
        gamma12_mc_impl(model1, model2, bank, h, StopRule::Cv(alpha), Some(cache))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::intensity::Kernel2d;
    use crate::numeric::{gauss_legendre, integrate_gl};
    use crate::pattern::PointPattern;
    use rand::Rng;

    fn const_model(rho: f64) -> IntensityModel {
        IntensityModel::known(move |_| rho)
    }

    #[test]
    fn bank_is_index_pure() {
        let a = SampleBank::new(42, Window::unit());
        let b = SampleBank::new(42, Window::unit());
        a.ensure(50);
        let first: Vec<(Point, Point)> =
            a.with_entries(0, 50, |p, d| p.iter().copied().zip(d.iter().copied()).collect());
        b.ensure(1000);
        let again: Vec<(Point, Point)> =
            b.with_entries(0, 50, |p, d| p.iter().copied().zip(d.iter().copied()).collect());
        a.ensure(1000);
        let grown: Vec<(Point, Point)> =
            a.with_entries(0, 50, |p, d| p.iter().copied().zip(d.iter().copied()).collect());
        for i in 0..50 {
            assert_eq!(first[i].0.x.to_bits(), again[i].0.x.to_bits());
            assert_eq!(first[i].1.y.to_bits(), again[i].1.y.to_bits());
            assert_eq!(first[i].0.y.to_bits(), grown[i].0.y.to_bits());
        }
        a.with_entries(0, 200, |p, d| {
            for (v, dir) in p.iter().zip(d) {
                assert!(Window::unit().contains(*v));
                assert!((dir.norm() - 1.0).abs() < 1e-12);
            }
        });
    }

    #[test]
    fn interval_count_snaps_near_integer_ratios() {
        // 0.14/0.005 lands a few ulps above 28; the grid must not gain a node
        assert_eq!(interval_count(0.14, 0.005), 28);
        // a few ulps below 26
        assert_eq!(interval_count(0.13, 0.005), 26);
        assert_eq!(interval_count(0.125, 0.005), 25);
        // a genuine fraction still rounds up
        assert_eq!(interval_count(0.1475, 0.005), 30);
        assert_eq!(interval_count(0.003, 0.005), 1);
        // snapped grids at matching spacing share node positions exactly
        let (_, step_a) = iso_grid(0.14, 0.005);
        let (_, step_b) = iso_grid(0.125, 0.005);
        assert_eq!(step_a.to_bits(), step_b.to_bits());
    }

    #[test]
    fn constant_model_vector_value() {
        let bank = SampleBank::new(7, Window::unit());
        let m = const_model(20.0);
        let e = gamma_mc(&m, &bank, Point::new(0.5, 0.0), 0.005).unwrap();
        // constant integrand: converges at the first batch with cv 0
        assert!((e.value - 200.0).abs() < 3.0 * 0.005 * 200.0);
        assert!(e.converged);
        assert!(e.cv < 0.005);
    }

    #[test]
    fn disjoint_translate_is_exact_zero() {
        let bank = SampleBank::new(7, Window::unit());
        let m = const_model(20.0);
        let e = gamma_mc(&m, &bank, Point::new(1.5, 0.0), 0.005).unwrap();
        assert_eq!(e.value, 0.0);
        assert_eq!(e.n, 0);
        assert!(e.converged);
    }

    #[test]
    fn linear_model_at_zero_lag() {
        let bank = SampleBank::new(3, Window::unit());
        let m = IntensityModel::known(|p: Point| p.x);
        let e = gamma_mc(&m, &bank, Point::new(0.0, 0.0), 0.005).unwrap();
        // ∫∫ x^2 = 1/3
        assert!((e.value - 1.0 / 3.0).abs() / (1.0 / 3.0) < 3.0 * 0.005, "{}", e.value);
        assert!(e.converged);
    }

    #[test]
    fn symmetry_is_bit_exact() {
        let bank = SampleBank::new(11, Window::unit());
        let m = IntensityModel::known(|p: Point| 1.0 + p.x + 0.5 * p.y);
        let h = Point::new(-0.3, 0.4);
        let a = gamma_mc(&m, &bank, h, 0.01).unwrap();
        let b = gamma_mc(&m, &bank, h.neg(), 0.01).unwrap();
        assert_eq!(a.value.to_bits(), b.value.to_bits());
        assert_eq!(a.n, b.n);
    }

    #[test]
    fn iso_constant_matches_closed_form() {
        let bank = SampleBank::new(5, Window::unit());
        let m = const_model(20.0);
        let want = 400.0 * Window::unit().isotropized_overlap(0.1);
        let e = gamma_iso_mc(&m, &bank, 0.1, 0.005).unwrap();
        assert!((e.value - want).abs() / want < 3.0 * 0.005, "{} vs {}", e.value, want);
        let e0 = gamma_iso_mc(&m, &bank, 0.0, 0.005).unwrap();
        assert!((e0.value - 400.0).abs() < 1e-9);
    }

    #[test]
    fn iso_linear_model_matches_quadrature_oracle() {
        let bank = SampleBank::new(9, Window::unit());
        let m = IntensityModel::known(|p: Point| p.x);
        let r = 0.1;
        // gamma(h) for rho(x,y)=x has a closed inner integral over the
        // overlap box; average it over angles with Gauss-Legendre
        let gamma_h = |h: Point| {
            let ax = (-h.x).max(0.0);
            let bx = (1.0 - h.x).min(1.0);
            let ay = (-h.y).max(0.0);
            let by = (1.0 - h.y).min(1.0);
            if bx <= ax || by <= ay {
                return 0.0;
            }
            let cube = |x: f64| x * x * x / 3.0 + h.x * x * x / 2.0;
            (cube(bx) - cube(ax)) * (by - ay)
        };
        let (nodes, weights) = gauss_legendre(256);
        let oracle = integrate_gl(
            &|th: f64| gamma_h(Point::new(r * th.cos(), r * th.sin())),
            0.0,
            std::f64::consts::TAU,
            &nodes,
            &weights,
        ) / std::f64::consts::TAU;
        let e = gamma_iso_mc(&m, &bank, r, 0.005).unwrap();
        assert!((e.value - oracle).abs() / oracle < 3.0 * 0.005, "{} vs {oracle}", e.value);
    }

    #[test]
    fn cross_constant_and_separable() {
        let bank = SampleBank::new(13, Window::unit());
        let m1 = const_model(10.0);
        let m2 = const_model(40.0);
        let e = gamma12_mc(&m1, &m2, &bank, Point::new(0.5, 0.0), 0.005).unwrap();
        assert!((e.value - 200.0).abs() < 3.0);
        let mx = IntensityModel::known(|p: Point| p.x);
        let my = IntensityModel::known(|p: Point| p.y);
        let e = gamma12_mc(&mx, &my, &bank, Point::new(0.0, 0.0), 0.005).unwrap();
        assert!((e.value - 0.25).abs() / 0.25 < 3.0 * 0.005, "{}", e.value);
    }

    #[test]
    fn cross_swap_reflection_identity() {
        let bank = SampleBank::new(17, Window::unit());
        let mx = IntensityModel::known(|p: Point| p.x);
        let my = IntensityModel::known(|p: Point| p.y);
        let h = Point::new(0.5, 0.0);
        // analytic check that gamma21(h) = gamma12(-h) and that the two
        // differ from gamma12(h) (the cross normalizer is not even in h)
        let g12 = gamma12_mc(&mx, &my, &bank, h, 0.001).unwrap().value;
        let g21 = gamma12_mc(&my, &mx, &bank, h, 0.001).unwrap().value;
        let g12_neg = gamma12_mc(&mx, &my, &bank, h.neg(), 0.001).unwrap().value;
        assert!((g21 - g12_neg).abs() / g12_neg < 6.0 * 0.001, "{g21} vs {g12_neg}");
        // x-profile mass sits inside the overlap [0, .5]: ∫_0^.5 x dx * ∫ y = 1/16
        // vs shifted ∫_.5^1 x dx * ∫ y = 3/16
        assert!((g12 - 0.0625).abs() / 0.0625 < 6.0 * 0.001);
        assert!((g21 - 0.1875).abs() / 0.1875 < 6.0 * 0.001);
    }

    #[test]
    fn fixed_n_unbiased_for_constant() {
        let m = const_model(2.0);
        let h = Point::new(0.3, 0.2);
        let want = 4.0 * 0.7 * 0.8;
        let reps = 1000;
        let mut vals = Vec::with_capacity(reps);
        for seed in 0..reps as u64 {
            let bank = SampleBank::new(1000 + seed, Window::unit());
            vals.push(gamma_mc_fixed(&m, &bank, h, 64).unwrap().value);
        }
        let mean = vals.iter().sum::<f64>() / reps as f64;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (reps - 1) as f64;
        let se = (var / reps as f64).sqrt();
        // constant model: every accepted term is rho^2 exactly, so each
        // estimate equals the truth and the spread collapses
        assert!((mean - want).abs() <= 3.0 * se + 1e-12, "mean {mean} want {want} se {se}");
    }

    #[test]
    fn fixed_n_unbiased_for_linear_model() {
        let m = IntensityModel::known(|p: Point| p.x + 0.1);
        let h = Point::new(0.2, 0.1);
        // ∫ over [0,.8]x[0,.9] of (x+.1)(x+.3) dx dy
        let prim = |x: f64| x * x * x / 3.0 + 0.2 * x * x + 0.03 * x;
        let want = (prim(0.8) - prim(0.0)) * 0.9;
        let reps = 1000;
        let mut vals = Vec::with_capacity(reps);
        for seed in 0..reps as u64 {
            let bank = SampleBank::new(7000 + seed, Window::unit());
            vals.push(gamma_mc_fixed(&m, &bank, h, 64).unwrap().value);
        }
        let mean = vals.iter().sum::<f64>() / reps as f64;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (reps - 1) as f64;
        let se = (var / reps as f64).sqrt();
        assert!((mean - want).abs() <= 3.0 * se, "mean {mean} want {want} se {se}");
    }

    #[test]
    fn leave_out_never_exceeds_plain() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(23);
        let pts: Vec<Point> = (0..200).map(|_| Point::new(rng.random(), rng.random())).collect();
        let pat = PointPattern::new(pts, Window::unit()).unwrap();
        let k = Kernel2d::new(0.05).unwrap();
        let plain = IntensityModel::kernel(&pat, k);
        let lo = IntensityModel::kernel_leave_out(&pat, k);
        let bank = SampleBank::new(31, Window::unit());
        for &h in &[
            Point::new(0.0, 0.0),
            Point::new(0.02, 0.01),
            Point::new(0.1, -0.05),
            Point::new(0.4, 0.3),
        ] {
            let a = gamma_mc_fixed(&plain, &bank, h, 2000).unwrap();
            let b = gamma_mc_fixed(&lo, &bank, h, 2000).unwrap();
            assert_eq!(a.n, b.n);
            assert!(
                a.value >= b.value - 1e-12 * a.value.abs(),
                "h={h:?}: plain {} < leave-out {}",
                a.value,
                b.value
            );
        }
    }

    #[test]
    fn bad_inputs_rejected() {
        let bank = SampleBank::new(1, Window::unit());
        let m = const_model(1.0);
        assert!(matches!(gamma_mc(&m, &bank, Point::new(0.0, 0.0), 0.0), Err(GammaError::BadAlpha(_))));
        assert!(matches!(
            gamma_iso_mc(&m, &bank, -0.1, 0.005),
            Err(GammaError::NegativeDistance(_))
        ));
    }

    #[test]
    fn zero_model_is_degenerate() {
        let bank = SampleBank::new(1, Window::unit());
        let empty = PointPattern::new(vec![], Window::unit()).unwrap();
        let m = IntensityModel::kernel(&empty, Kernel2d::new(0.1).unwrap());
        // zero everywhere: mean never becomes positive, reported as such
        let err = gamma_mc_fixed(&m, &bank, Point::new(0.1, 0.0), 256).unwrap_err();
        assert!(matches!(err, GammaError::DegenerateModel { .. }));
    }

    #[test]
    fn interpolated_constant_matches_closed_form() {
        let model = Arc::new(const_model(20.0));
        let bank = Arc::new(SampleBank::new(19, Window::unit()));
        let g = build_interpolated_iso(&model, &bank, 0.125, 0.005, 0.001).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let r: f64 = rng.random::<f64>() * 0.12;
            let want = 400.0 * Window::unit().isotropized_overlap(r);
            let got = g.eval_iso(r).unwrap();
            assert!((got - want).abs() / want < 1e-3, "r={r}: {got} vs {want}");
        }
        // a probe exactly on a node returns the stored node value
        let step = 0.125 / ((0.125f64 / 0.005).ceil());
        let node_val = g.eval_iso(3.0 * step).unwrap();
        let again = g.eval_iso(3.0 * step).unwrap();
        assert_eq!(node_val.to_bits(), again.to_bits());
        assert!(g.eval_iso(0.2).is_err());
        assert!(g.node_cvs().is_some());
    }

    #[test]
    fn interpolated_kernel_tracks_direct_evaluation() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(41);
        let pts: Vec<Point> = (0..300).map(|_| Point::new(rng.random(), rng.random())).collect();
        let pat = PointPattern::new(pts, Window::unit()).unwrap();
        let model = Arc::new(IntensityModel::kernel_leave_out(&pat, Kernel2d::new(0.05).unwrap()));
        let bank = Arc::new(SampleBank::new(43, Window::unit()));
        let g = build_interpolated_iso(&model, &bank, 0.125, 1.0, 0.001).unwrap();
        // requested spacing 1.0 must be tightened to sigma/10
        let n_nodes = g.node_cvs().unwrap().len();
        assert!(n_nodes >= 26, "spacing not clamped: {n_nodes} nodes");
        for &r in &[0.012, 0.0571, 0.11] {
            let direct = gamma_iso_mc(&model, &bank, r, 0.001).unwrap().value;
            let interp = g.eval_iso(r).unwrap();
            assert!(
                (interp - direct).abs() / direct < 1e-3,
                "r={r}: interp {interp} vs direct {direct}"
            );
        }
    }

    #[test]
    fn vector_interpolation_grid() {
        let model = Arc::new(IntensityModel::known(|p: Point| 1.0 + p.x));
        let bank = Arc::new(SampleBank::new(47, Window::unit()));
        let g = build_interpolated_vec(&model, &bank, 0.1, 0.02, 0.005).unwrap();
        let h = Point::new(0.033, -0.041);
        let v = g.eval_vec(h).unwrap();
        // compare against a direct evaluation at moderate precision
        let direct = gamma_mc(&model, &bank, h, 0.002).unwrap().value;
        assert!((v - direct).abs() / direct < 0.02, "{v} vs {direct}");
        assert!(g.eval_vec(Point::new(0.2, 0.0)).is_err());
        // symmetric evaluation through the canonical representative
        let v_neg = g.eval_vec(h.neg()).unwrap();
        assert_eq!(v.to_bits(), v_neg.to_bits());
    }

    #[test]
    fn csv_round_trip() {
        let model = Arc::new(const_model(5.0));
        let bank = Arc::new(SampleBank::new(53, Window::unit()));
        let g = build_interpolated_iso(&model, &bank, 0.1, 0.01, 0.005).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gamma.csv");
        g.save_iso_csv(&path).unwrap();
        let loaded = GammaFunction::load_iso_csv(&path).unwrap();
        assert_eq!(loaded.kind(), GammaKind::Isotropic);
        assert_eq!(loaded.alpha(), 0.005);
        for &r in &[0.0, 0.013, 0.05, 0.0999] {
            assert_eq!(
                g.eval_iso(r).unwrap().to_bits(),
                loaded.eval_iso(r).unwrap().to_bits()
            );
        }
    }

    #[test]
    fn direct_gamma_function_dispatch() {
        let model = Arc::new(const_model(2.0));
        let bank = Arc::new(SampleBank::new(59, Window::unit()));
        let g = GammaFunction::direct(GammaKind::Isotropic, model.clone(), bank.clone(), 0.005).unwrap();
        let v = g.eval_vec(Point::new(0.06, 0.08)).unwrap();
        let want = 4.0 * Window::unit().isotropized_overlap(0.1);
        assert!((v - want).abs() / want < 0.02);
        let gv = GammaFunction::direct(GammaKind::Vector, model, bank, 0.005).unwrap();
        assert!(matches!(
            gv.eval_iso(0.1),
            Err(GammaError::KindMismatch { .. })
        ));
    }

    #[test]
    fn closed_form_constant_matches_overlap_formulas() {
        let win = Window::unit();
        let g = GammaFunction::closed_form_constant(GammaKind::Vector, 12.0, win).unwrap();
        let h = Point::new(0.1, -0.05);
        assert_eq!(g.eval_vec(h).unwrap(), 12.0 * win.overlap_volume(h));
        assert_eq!(g.eval_vec(h.neg()).unwrap(), g.eval_vec(h).unwrap());
        assert_eq!(g.alpha(), 0.0);
        assert!(!g.is_interpolated());

        let gi = GammaFunction::closed_form_constant(GammaKind::Isotropic, 12.0, win).unwrap();
        assert_eq!(gi.eval_iso(0.07).unwrap(), 12.0 * win.isotropized_overlap(0.07));
        // isotropic kinds reduce vector queries to the norm
        assert_eq!(gi.eval_vec(Point::new(0.07, 0.0)).unwrap(), gi.eval_iso(0.07).unwrap());
        assert!(matches!(gi.eval_iso(-0.1), Err(GammaError::NegativeDistance(_))));
        assert!(matches!(
            GammaFunction::closed_form_constant(GammaKind::Isotropic, 0.0, win),
            Err(GammaError::BadProduct(_))
        ));
    }
}
