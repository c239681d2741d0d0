//! Reweighted K-function estimators. Each pair of points contributes the
//! reciprocal of a normalizer to every grid distance at or beyond the pair
//! separation:
//!
//! * global: `1 / γ(y−x)` (or `1 / γ^iso(‖y−x‖)`)
//! * local: `1 / (ρ(x) ρ(y) v(y−x))` with `v` the translate overlap volume
//!   (or its angular mean for the isotropic form)
//!
//! Cross versions sum over pairs taking one point from each component
//! pattern. All estimators return cumulative curves that are non-decreasing
//! in `t` whenever the normalizers are positive.

use thiserror::Error;

use crate::curve::{CurveError, CurveEstimate, CurveMeta};
use crate::gamma::{GammaError, GammaFunction};
use crate::geometry::Point;
use crate::intensity::IntensityModel;
use crate::pattern::{BivariatePattern, PointPattern};

#[derive(Debug, Error)]
pub enum KError {
    #[error(transparent)]
    Curve(#[from] CurveError),
    #[error("normalizer failed for pair ({i}, {j}) at lag ({hx}, {hy}): {source}")]
    GammaAt { i: usize, j: usize, hx: f64, hy: f64, source: GammaError },
    #[error("normalizer {value} is not positive for pair ({i}, {j}) at lag ({hx}, {hy})")]
    NonPositiveGamma { i: usize, j: usize, hx: f64, hy: f64, value: f64 },
    #[error("intensity {value} is not positive at point {index} ({x}, {y})")]
    NonPositiveIntensity { index: usize, x: f64, y: f64, value: f64 },
    #[error("overlap volume vanishes for pair ({i}, {j}) at distance {d}")]
    ZeroOverlap { i: usize, j: usize, d: f64 },
    #[error("K-type transform needs non-negative values, got {value} at t={t}")]
    NegativeValue { t: f64, value: f64 },
}

/// Accumulates per-pair weights into grid buckets, then prefix-sums into a
/// cumulative curve: pair distance `d` contributes to every `t ≥ d`.
struct Accumulator<'g> {
    grid: &'g [f64],
    buckets: Vec<f64>,
}

impl<'g> Accumulator<'g> {
    fn new(grid: &'g [f64]) -> Self {
        Accumulator { grid, buckets: vec![0.0; grid.len()] }
    }

    fn add(&mut self, d: f64, weight: f64) {
        let idx = self.grid.partition_point(|&t| t < d);
        if idx < self.buckets.len() {
            self.buckets[idx] += weight;
        }
    }

    fn finish(mut self, meta: CurveMeta) -> Result<CurveEstimate, KError> {
        let mut acc = 0.0;
        for v in &mut self.buckets {
            acc += *v;
            *v = acc;
        }
        Ok(CurveEstimate::new(self.grid.to_vec(), self.buckets, meta)?)
    }
}

fn meta_for(estimator: &str, gamma: Option<&GammaFunction>, models: &[&IntensityModel]) -> CurveMeta {
    let mut meta = CurveMeta::named(estimator);
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

    fn get(&mut self, pts: &[Point], i: usize) -> Result<f64, KError> {
        let v = self.cache[i];
        if !v.is_nan() {
            return Ok(v);
        }
        let v = self.model.at_data_point(pts[i], i);
        if !(v > 0.0) {
            return Err(KError::NonPositiveIntensity { index: i, x: pts[i].x, y: pts[i].y, value: v });
        }
        self.cache[i] = v;
        Ok(v)
    }
}

/// Global estimator: each ordered distinct pair within `t` contributes
/// `1/γ(y−x)`.
pub fn k_global(
    pattern: &PointPattern,
    gamma: &GammaFunction,
    grid: &[f64],
) -> Result<CurveEstimate, KError> {
    let mut acc = Accumulator::new(grid);
    let t_max = *grid.last().unwrap_or(&0.0);
    for (i, j, d) in pattern.close_pairs(t_max) {
        let h = pattern.points()[j].sub(pattern.points()[i]);
        let g = gamma
            .eval_vec(h)
            .map_err(|source| KError::GammaAt { i, j, hx: h.x, hy: h.y, source })?;
        if !(g > 0.0) {
            return Err(KError::NonPositiveGamma { i, j, hx: h.x, hy: h.y, value: g });
        }
        acc.add(d, 1.0 / g);
    }
    acc.finish(meta_for("k_global", Some(gamma), &[]))
}

/// Global isotropic estimator: weight `1/γ^iso(‖y−x‖)`.
pub fn k_global_iso(
    pattern: &PointPattern,
    gamma: &GammaFunction,
    grid: &[f64],
) -> Result<CurveEstimate, KError> {
    let mut acc = Accumulator::new(grid);
    let t_max = *grid.last().unwrap_or(&0.0);
    for (i, j, d) in pattern.close_pairs(t_max) {
        let g = gamma.eval_iso(d).map_err(|source| {
            let h = pattern.points()[j].sub(pattern.points()[i]);
            KError::GammaAt { i, j, hx: h.x, hy: h.y, source }
        })?;
        if !(g > 0.0) {
            let h = pattern.points()[j].sub(pattern.points()[i]);
            return Err(KError::NonPositiveGamma { i, j, hx: h.x, hy: h.y, value: g });
        }
        acc.add(d, 1.0 / g);
    }
    acc.finish(meta_for("k_global_iso", Some(gamma), &[]))
}

/// Local estimator: weight `1/(ρ(x) ρ(y) |W ∩ W_{y−x}|)`. Kernel models
/// evaluate at data points per their variant (plain or leave-out).
pub fn k_local(
    pattern: &PointPattern,
    model: &IntensityModel,
    grid: &[f64],
) -> Result<CurveEstimate, KError> {
    let mut acc = Accumulator::new(grid);
    let t_max = *grid.last().unwrap_or(&0.0);
    let pts = pattern.points();
    let mut rho = PointIntensities::new(model, pts.len());
    for (i, j, d) in pattern.close_pairs(t_max) {
        let h = pts[j].sub(pts[i]);
        let v = pattern.window().overlap_volume(h);
        if !(v > 0.0) {
            return Err(KError::ZeroOverlap { i, j, d });
        }
        let w = rho.get(pts, i)? * rho.get(pts, j)? * v;
        acc.add(d, 1.0 / w);
    }
    acc.finish(meta_for("k_local", None, &[model]))
}

/// Local isotropic estimator: weight `1/(ρ(x) ρ(y) a_W(‖y−x‖))` with `a_W`
/// the angular mean of the overlap volume.
pub fn k_local_iso(
    pattern: &PointPattern,
    model: &IntensityModel,
    grid: &[f64],
) -> Result<CurveEstimate, KError> {
    let mut acc = Accumulator::new(grid);
    let t_max = *grid.last().unwrap_or(&0.0);
    let pts = pattern.points();
    let mut rho = PointIntensities::new(model, pts.len());
    for (i, j, d) in pattern.close_pairs(t_max) {
        let a = pattern.window().isotropized_overlap(d);
        if !(a > 0.0) {
            return Err(KError::ZeroOverlap { i, j, d });
        }
        let w = rho.get(pts, i)? * rho.get(pts, j)? * a;
        acc.add(d, 1.0 / w);
    }
    acc.finish(meta_for("k_local_iso", None, &[model]))
}

/// Cross global estimator over pairs `(x ∈ X₁, y ∈ X₂)` with weight
/// `1/γ₁₂(y−x)`; swapping the patterns together with the reflected
/// normalizer leaves the sum unchanged.
pub fn k12_global(
    bivariate: &BivariatePattern,
    gamma12: &GammaFunction,
    grid: &[f64],
) -> Result<CurveEstimate, KError> {
    let mut acc = Accumulator::new(grid);
    let t_max = *grid.last().unwrap_or(&0.0);
    for (i, j, d) in bivariate.close_cross_pairs(t_max) {
        let h = bivariate.second().points()[j].sub(bivariate.first().points()[i]);
        let g = gamma12
            .eval_vec(h)
            .map_err(|source| KError::GammaAt { i, j, hx: h.x, hy: h.y, source })?;
        if !(g > 0.0) {
            return Err(KError::NonPositiveGamma { i, j, hx: h.x, hy: h.y, value: g });
        }
        acc.add(d, 1.0 / g);
    }
    acc.finish(meta_for("k12_global", Some(gamma12), &[]))
}

/// Cross global isotropic estimator: weight `1/γ₁₂^iso(‖y−x‖)`.
pub fn k12_global_iso(
    bivariate: &BivariatePattern,
    gamma12: &GammaFunction,
    grid: &[f64],
) -> Result<CurveEstimate, KError> {
    let mut acc = Accumulator::new(grid);
    let t_max = *grid.last().unwrap_or(&0.0);
    for (i, j, d) in bivariate.close_cross_pairs(t_max) {
        let g = gamma12.eval_iso(d).map_err(|source| {
            let h = bivariate.second().points()[j].sub(bivariate.first().points()[i]);
            KError::GammaAt { i, j, hx: h.x, hy: h.y, source }
        })?;
        if !(g > 0.0) {
            let h = bivariate.second().points()[j].sub(bivariate.first().points()[i]);
            return Err(KError::NonPositiveGamma { i, j, hx: h.x, hy: h.y, value: g });
        }
        acc.add(d, 1.0 / g);
    }
    acc.finish(meta_for("k12_global_iso", Some(gamma12), &[]))
}

/// Cross local estimator: weight `1/(ρ₁(x) ρ₂(y) |W ∩ W_{y−x}|)`.
pub fn k12_local(
    bivariate: &BivariatePattern,
    model1: &IntensityModel,
    model2: &IntensityModel,
    grid: &[f64],
) -> Result<CurveEstimate, KError> {
    let mut acc = Accumulator::new(grid);
    let t_max = *grid.last().unwrap_or(&0.0);
    let pts1 = bivariate.first().points();
    let pts2 = bivariate.second().points();
    let mut rho1 = PointIntensities::new(model1, pts1.len());
    let mut rho2 = PointIntensities::new(model2, pts2.len());
    for (i, j, d) in bivariate.close_cross_pairs(t_max) {
        let h = pts2[j].sub(pts1[i]);
        let v = bivariate.first().window().overlap_volume(h);
        if !(v > 0.0) {
            return Err(KError::ZeroOverlap { i, j, d });
        }
        let w = rho1.get(pts1, i)? * rho2.get(pts2, j)? * v;
        acc.add(d, 1.0 / w);
    }
    acc.finish(meta_for("k12_local", None, &[model1, model2]))
}

/// Cross local isotropic estimator: weight `1/(ρ₁(x) ρ₂(y) a_W(‖y−x‖))`.
pub fn k12_local_iso(
    bivariate: &BivariatePattern,
    model1: &IntensityModel,
    model2: &IntensityModel,
    grid: &[f64],
) -> Result<CurveEstimate, KError> {
    let mut acc = Accumulator::new(grid);
    let t_max = *grid.last().unwrap_or(&0.0);
    let pts1 = bivariate.first().points();
    let pts2 = bivariate.second().points();
    let mut rho1 = PointIntensities::new(model1, pts1.len());
    let mut rho2 = PointIntensities::new(model2, pts2.len());
    for (i, j, d) in bivariate.close_cross_pairs(t_max) {
        let a = bivariate.first().window().isotropized_overlap(d);
        if !(a > 0.0) {
            return Err(KError::ZeroOverlap { i, j, d });
        }
        let w = rho1.get(pts1, i)? * rho2.get(pts2, j)? * a;
        acc.add(d, 1.0 / w);
    }
    acc.finish(meta_for("k12_local_iso", None, &[model1, model2]))
}

/// `L(t) − t = sqrt(K(t)/π) − t`, a variance-stabilizing transform of any
/// K-type estimate.
pub fn l_transform(curve: &CurveEstimate) -> Result<CurveEstimate, KError> {
    let mut values = Vec::with_capacity(curve.len());
    for (&t, &k) in curve.grid().iter().zip(curve.values()) {
        if k < 0.0 {
            return Err(KError::NegativeValue { t, value: k });
        }
        values.push((k / std::f64::consts::PI).sqrt() - t);
    }
    let mut meta = curve.meta.clone();
    meta.estimator = format!("{}_l", meta.estimator);
    Ok(CurveEstimate::new(curve.grid().to_vec(), values, meta)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gamma::{GammaFunction, GammaKind, SampleBank};
    use crate::geometry::Window;
    use crate::intensity::Kernel2d;
    use rand::Rng;
    use rand::SeedableRng;
    use std::sync::Arc;

    fn two_point_pattern() -> PointPattern {
        PointPattern::new(
            vec![Point::new(0.2, 0.2), Point::new(0.25, 0.2)],
            Window::unit(),
        )
        .unwrap()
    }

    fn const_gamma(rho: f64, kind: GammaKind) -> GammaFunction {
        let model = Arc::new(IntensityModel::known(move |_| rho));
        let bank = Arc::new(SampleBank::new(1, Window::unit()));
        GammaFunction::direct(kind, model, bank, 0.005).unwrap()
    }

    #[test]
    fn two_point_global_value() {
        let pat = two_point_pattern();
        let g = const_gamma(2.0, GammaKind::Vector);
        let k = k_global(&pat, &g, &[0.0, 0.05, 0.1]).unwrap();
        // both ordered pairs at lag (±0.05, 0): γ = 4 · 0.95 = 3.8 exactly
        // (constant integrand, Monte Carlo mean has no spread)
        assert_eq!(k.values()[0], 0.0);
        let want = 2.0 / 3.8;
        assert!((k.values()[1] - want).abs() < 1e-12, "{}", k.values()[1]);
        assert!((k.values()[2] - want).abs() < 1e-12);
        assert_eq!(k.meta.estimator, "k_global");
    }

    #[test]
    fn two_point_local_matches_global_for_constant_intensity() {
        let pat = two_point_pattern();
        let g = const_gamma(2.0, GammaKind::Vector);
        let model = IntensityModel::known(|_| 2.0);
        let grid = [0.0, 0.05, 0.1];
        let kg = k_global(&pat, &g, &grid).unwrap();
        let kl = k_local(&pat, &model, &grid).unwrap();
        for (a, b) in kg.values().iter().zip(kl.values()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn two_point_iso_value() {
        let pat = two_point_pattern();
        let g = const_gamma(2.0, GammaKind::Isotropic);
        let grid = [0.0, 0.05, 0.1];
        let k = k_global_iso(&pat, &g, &grid).unwrap();
        let want = 2.0 / (4.0 * Window::unit().isotropized_overlap(0.05));
        assert!((k.values()[1] - want).abs() < 1e-12, "{} vs {want}", k.values()[1]);
        // frozen: a_W(0.05) for the unit square gives this estimate
        assert!((k.values()[1] - 0.533541743287050452).abs() < 1e-12);
        let kl = k_local_iso(&pat, &IntensityModel::known(|_| 2.0), &grid).unwrap();
        assert!((kl.values()[1] - want).abs() < 1e-14);
    }

    #[test]
    fn empty_and_singleton_patterns_give_zero() {
        let g = const_gamma(2.0, GammaKind::Vector);
        let empty = PointPattern::new(vec![], Window::unit()).unwrap();
        let single = PointPattern::new(vec![Point::new(0.4, 0.4)], Window::unit()).unwrap();
        let grid = [0.0, 0.05, 0.1];
        for pat in [&empty, &single] {
            let k = k_global(pat, &g, &grid).unwrap();
            assert!(k.values().iter().all(|&v| v == 0.0));
            let kl = k_local(pat, &IntensityModel::known(|_| 2.0), &grid).unwrap();
            assert!(kl.values().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn cross_two_point_value_and_swap() {
        let biv = BivariatePattern::new(
            vec![Point::new(0.2, 0.2)],
            vec![Point::new(0.25, 0.2)],
            Window::unit(),
        )
        .unwrap();
        let g = const_gamma(2.0, GammaKind::CrossVector);
        let grid = [0.0, 0.05, 0.1];
        let k = k12_global(&biv, &g, &grid).unwrap();
        let want = 1.0 / (4.0 * 0.95);
        assert!((k.values()[1] - want).abs() < 1e-12, "{}", k.values()[1]);
        assert!((want - 0.2631578947368421).abs() < 1e-16);
        // swapping the patterns reflects every lag; a constant normalizer
        // is even, so the estimate is unchanged bit for bit
        let swapped = BivariatePattern::new(
            biv.second().points().to_vec(),
            biv.first().points().to_vec(),
            Window::unit(),
        )
        .unwrap();
        let ks = k12_global(&swapped, &g, &grid).unwrap();
        for (a, b) in k.values().iter().zip(ks.values()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        let m = IntensityModel::known(|_| 2.0);
        let kl = k12_local(&biv, &m, &m, &grid).unwrap();
        assert!((kl.values()[1] - want).abs() < 1e-14);
        let kli = k12_local_iso(&biv, &m, &m, &grid).unwrap();
        let want_iso = 1.0 / (4.0 * Window::unit().isotropized_overlap(0.05));
        assert!((kli.values()[1] - want_iso).abs() < 1e-14);
        let kgi = k12_global_iso(&biv, &const_gamma(2.0, GammaKind::CrossIsotropic), &grid).unwrap();
        assert!((kgi.values()[1] - want_iso).abs() < 1e-12);
    }

    #[test]
    fn cross_empty_component_gives_zero() {
        let biv = BivariatePattern::new(vec![], vec![Point::new(0.25, 0.2)], Window::unit()).unwrap();
        let g = const_gamma(2.0, GammaKind::CrossVector);
        let k = k12_global(&biv, &g, &[0.0, 0.1]).unwrap();
        assert!(k.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn curves_are_monotone() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<Point> = (0..300).map(|_| Point::new(rng.random(), rng.random())).collect();
        let pat = PointPattern::new(pts, Window::unit()).unwrap();
        let g = const_gamma(300.0, GammaKind::Isotropic);
        let grid = crate::curve::default_t_grid();
        for curve in [
            k_global_iso(&pat, &g, &grid).unwrap(),
            k_local_iso(&pat, &IntensityModel::known(|_| 300.0), &grid).unwrap(),
        ] {
            assert!(curve.values().windows(2).all(|w| w[1] >= w[0]));
            assert!(curve.values().iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn gamma_out_of_range_names_pair() {
        let pat = two_point_pattern();
        let model = Arc::new(IntensityModel::known(|_| 2.0));
        let bank = Arc::new(SampleBank::new(5, Window::unit()));
        // grid reaching past the interpolation extent exposes the far pair
        let g = crate::gamma::build_interpolated_iso(&model, &bank, 0.03, 0.005, 0.005).unwrap();
        let err = k_global_iso(&pat, &g, &[0.0, 0.1]).unwrap_err();
        match err {
            KError::GammaAt { i: 0, j: 1, source: GammaError::OutOfRange { .. }, .. } => {}
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn isolated_point_with_tiny_bandwidth_errors() {
        let pat = two_point_pattern();
        let model = IntensityModel::kernel_leave_out(&pat, Kernel2d::new(0.001).unwrap());
        let err = k_local(&pat, &model, &[0.0, 0.1]).unwrap_err();
        assert!(matches!(err, KError::NonPositiveIntensity { index: 0, .. }), "{err:?}");
    }

    #[test]
    fn l_transform_values() {
        let meta = CurveMeta::named("k_test");
        let grid = vec![0.01, 0.05, 0.1];
        let pi = std::f64::consts::PI;
        let k = CurveEstimate::new(grid.clone(), vec![pi * 0.0001, pi * 0.01, 0.0], meta).unwrap();
        let l = l_transform(&k).unwrap();
        assert!((l.values()[0] - 0.0).abs() < 1e-15);
        assert!((l.values()[1] - 0.05).abs() < 1e-15);
        assert!((l.values()[2] + 0.1).abs() < 1e-15);
        assert_eq!(l.meta.estimator, "k_test_l");
        let bad = CurveEstimate::new(grid, vec![0.0, -1.0, 0.0], CurveMeta::named("k")).unwrap();
        assert!(matches!(l_transform(&bad), Err(KError::NegativeValue { .. })));
    }
}
