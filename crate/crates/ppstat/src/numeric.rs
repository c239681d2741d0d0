//! Small numeric helpers shared across modules: adaptive quadrature and
//! uniform-grid interpolation.

use crate::geometry::{Point, Window};

/// Adaptive Simpson quadrature with absolute tolerance `tol`.
pub fn adaptive_simpson<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: f64) -> f64 {
    if a == b {
        return 0.0;
    }
    let fa = f(a);
    let fb = f(b);
    let m = 0.5 * (a + b);
    let fm = f(m);
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    simpson_step(f, a, b, fa, fm, fb, whole, tol, 50)
}

#[allow(clippy::too_many_arguments)]
fn simpson_step<F: Fn(f64) -> f64>(
    f: &F,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: u32,
) -> f64 {
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = f(lm);
    let frm = f(rm);
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol {
        left + right + delta / 15.0
    } else {
        simpson_step(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)
            + simpson_step(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
    }
}

/// Composite midpoint rule on an `nx` by `ny` subdivision of the window.
pub fn midpoint_2d<F: Fn(Point) -> f64>(f: &F, win: &Window, nx: usize, ny: usize) -> f64 {
    let (x0, _) = win.x_range();
    let (y0, _) = win.y_range();
    let hx = win.width() / nx as f64;
    let hy = win.height() / ny as f64;
    let mut total = 0.0;
    for j in 0..ny {
        let y = y0 + (j as f64 + 0.5) * hy;
        let mut row = 0.0;
        for i in 0..nx {
            let x = x0 + (i as f64 + 0.5) * hx;
            row += f(Point::new(x, y));
        }
        total += row;
    }
    total * hx * hy
}

/// Gauss-Legendre nodes and weights on `[-1, 1]`, by Newton iteration on the
/// Legendre recurrence.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 2);
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        for _ in 0..100 {
            // p = P_n(x), dp = P_n'(x)
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let kf = k as f64;
                let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
                p0 = p1;
                p1 = p2;
            }
            let dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        let (mut p0, mut p1) = (1.0, x);
        for k in 2..=n {
            let kf = k as f64;
            let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
            p0 = p1;
            p1 = p2;
        }
        let dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

/// Integrates `f` over `[a, b]` with a fixed-order Gauss-Legendre rule.
pub fn integrate_gl<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, nodes: &[f64], weights: &[f64]) -> f64 {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let mut s = 0.0;
    for (x, w) in nodes.iter().zip(weights) {
        s += w * f(c + h * x);
    }
    s * h
}

/// Piecewise-linear interpolant on a uniformly spaced grid.
#[derive(Debug, Clone)]
pub struct LinearInterp {
    pub start: f64,
    pub step: f64,
    pub values: Vec<f64>,
}

impl LinearInterp {
    pub fn new(start: f64, step: f64, values: Vec<f64>) -> Self {
        assert!(step > 0.0 && values.len() >= 2);
        LinearInterp { start, step, values }
    }

    pub fn max_arg(&self) -> f64 {
        self.start + self.step * (self.values.len() - 1) as f64
    }

    /// `None` outside the grid range (up to a half-ulp slack at the ends).
    pub fn eval(&self, x: f64) -> Option<f64> {
        let t = (x - self.start) / self.step;
        let n = self.values.len();
        if t < 0.0 {
            if x >= self.start - self.step * 1e-9 {
                return Some(self.values[0]);
            }
            return None;
        }
        let i = t.floor() as usize;
        if i + 1 >= n {
            if t <= (n - 1) as f64 + 1e-9 {
                return Some(self.values[n - 1]);
            }
            return None;
        }
        let frac = t - i as f64;
        Some(self.values[i] * (1.0 - frac) + self.values[i + 1] * frac)
    }
}

/// Bilinear interpolant on a uniform 2-D grid, values in row-major order
/// (`iy * nx + ix`).
#[derive(Debug, Clone)]
pub struct BilinearInterp {
    pub x0: f64,
    pub y0: f64,
    pub dx: f64,
    pub dy: f64,
    pub nx: usize,
    pub ny: usize,
    pub values: Vec<f64>,
}

impl BilinearInterp {
    pub fn new(x0: f64, y0: f64, dx: f64, dy: f64, nx: usize, ny: usize, values: Vec<f64>) -> Self {
        assert!(nx >= 2 && ny >= 2 && values.len() == nx * ny && dx > 0.0 && dy > 0.0);
        BilinearInterp { x0, y0, dx, dy, nx, ny, values }
    }

    pub fn eval(&self, x: f64, y: f64) -> Option<f64> {
        let tx = (x - self.x0) / self.dx;
        let ty = (y - self.y0) / self.dy;
        let fix = |t: f64, n: usize| -> Option<(usize, f64)> {
            if t < 0.0 {
                if t >= -1e-9 {
                    return Some((0, 0.0));
                }
                return None;
            }
            let i = t.floor() as usize;
            if i + 1 >= n {
                if t <= (n - 1) as f64 + 1e-9 {
                    return Some((n - 2, 1.0));
                }
                return None;
            }
            Some((i, t - i as f64))
        };
        let (ix, fx) = fix(tx, self.nx)?;
        let (iy, fy) = fix(ty, self.ny)?;
        let v00 = self.values[iy * self.nx + ix];
        let v10 = self.values[iy * self.nx + ix + 1];
        let v01 = self.values[(iy + 1) * self.nx + ix];
        let v11 = self.values[(iy + 1) * self.nx + ix + 1];
        Some(v00 * (1.0 - fx) * (1.0 - fy) + v10 * fx * (1.0 - fy) + v01 * (1.0 - fx) * fy + v11 * fx * fy)
    }
}
