//! Planar observation windows and the translation-correction geometry that
//! second-order reweighted estimators rely on.
//!
//! The central quantities are the overlap volume `|W ∩ W_{-h}|` of a window
//! with its own translate and the angular average of that overlap over all
//! directions at a fixed distance, here called the isotropized overlap. Both
//! have exact closed forms for axis-aligned rectangles, which is the only
//! window shape supported.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("degenerate window: [{x0}, {x1}] x [{y0}, {y1}] has no area")]
    DegenerateWindow { x0: f64, y0: f64, x1: f64, y1: f64 },
}

/// A location (or lag vector) in the plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    /// Lag vector from `other` to `self`.
    pub fn sub(self, other: Point) -> Point {
        Point::new(self.x - other.x, self.y - other.y)
    }

    pub fn add(self, other: Point) -> Point {
        Point::new(self.x + other.x, self.y + other.y)
    }

    pub fn neg(self) -> Point {
        Point::new(-self.x, -self.y)
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn norm_sq(self) -> f64 {
        self.x * self.x + self.y * self.y
    }

    pub fn dist(self, other: Point) -> f64 {
        self.sub(other).norm()
    }
}

/// Axis-aligned rectangular observation window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Window {
    x0: f64,
    y0: f64,
    x1: f64,
    y1: f64,
}

impl Window {
    /// Rejects windows with zero or negative extent along either axis.
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self, GeometryError> {
        if !(x1 > x0 && y1 > y0) || !(x0.is_finite() && y0.is_finite() && x1.is_finite() && y1.is_finite()) {
            return Err(GeometryError::DegenerateWindow { x0, y0, x1, y1 });
        }
        Ok(Window { x0, y0, x1, y1 })
    }

    /// The unit square `[0,1]^2`.
    pub fn unit() -> Self {
        Window { x0: 0.0, y0: 0.0, x1: 1.0, y1: 1.0 }
    }

    pub fn x_range(&self) -> (f64, f64) {
        (self.x0, self.x1)
    }

    pub fn y_range(&self) -> (f64, f64) {
        (self.y0, self.y1)
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn diameter(&self) -> f64 {
        self.width().hypot(self.height())
    }

    /// Closed-set membership: boundary points are inside.
    pub fn contains(&self, p: Point) -> bool {
        p.x >= self.x0 && p.x <= self.x1 && p.y >= self.y0 && p.y <= self.y1
    }

    /// `|W ∩ W_{-h}|`, the area of the window intersected with its translate.
    ///
    /// Zero once either lag component exceeds the corresponding side length;
    /// invariant under `h -> -h`.
    pub fn overlap_volume(&self, h: Point) -> f64 {
        let ox = (self.width() - h.x.abs()).max(0.0);
        let oy = (self.height() - h.y.abs()).max(0.0);
        ox * oy
    }

    /// Angular average of the overlap volume at distance `r`:
    /// `a_W(r) = (1/2π) ∫ |W ∩ W_{-r s(θ)}| dθ`.
    ///
    /// `a_W(0) = |W|`, nonincreasing in `r`, and exactly zero for `r` at or
    /// beyond the window diameter. Evaluated in closed form: the angular
    /// integrand `(w - r cosθ)(h - r sinθ)` restricted to the arc where both
    /// factors are positive has the elementary antiderivative
    /// `w h θ + w r cosθ - h r sinθ + r² sin²θ / 2`.
    pub fn isotropized_overlap(&self, r: f64) -> f64 {
        debug_assert!(r >= 0.0);
        let w = self.width();
        let h = self.height();
        if r == 0.0 {
            return w * h;
        }
        let th_lo = if r > w { (w / r).acos() } else { 0.0 };
        let th_hi = if r > h { (h / r).asin() } else { std::f64::consts::FRAC_PI_2 };
        if th_lo >= th_hi {
            return 0.0;
        }
        let f = |t: f64| {
            let (s, c) = t.sin_cos();
            w * h * t + w * r * c - h * r * s + 0.5 * r * r * s * s
        };
        let val = std::f64::consts::FRAC_2_PI * (f(th_hi) - f(th_lo));
        val.max(0.0)
    }

    /// `∫_{S^1} |W ∩ W_{-r s}| dν(s) = 2π a_W(r)`, the full-circle overlap
    /// integral that converts per-direction averages into shell totals.
    pub fn isotropized_overlap_integral(&self, r: f64) -> f64 {
        std::f64::consts::TAU * self.isotropized_overlap(r)
    }

    /// Uniform draw from the window.
    pub fn sample_uniform<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> Point {
        let u: f64 = rng.random();
        let v: f64 = rng.random();
        Point::new(self.x0 + u * self.width(), self.y0 + v * self.height())
    }
}
