//! Delay-coordinate polynomial maps and their ground-truth geometry.
//!
//! A map is the recurrence `x_i = g(θ, x_{i-2}, x_{i-1}) + e_i`, with `g` a
//! complete polynomial in the two lags. The planar form used everywhere in the
//! crate is `(u, v) ↦ (v, g(u, v))` with `u = x_{i-2}` (older) and
//! `v = x_{i-1}` (newer), so a [`Point`] is always `[older, newer]`.

use serde::{Deserialize, Serialize};

use crate::error::{param_err, Error, Result};
use crate::stochastics::{sample_mixture_noise, RngStream};

/// A delay-coordinate state `[older, newer]`.
pub type Point = [f64; 2];

/// Row-major 2×2 matrix.
pub type Matrix2 = [[f64; 2]; 2];

/// Default bound on `|x_i|` before a simulated orbit is declared escaped.
pub const DEFAULT_ESCAPE_BOUND: f64 = 1e6;

/// Names of the built-in maps.
pub const PRESETS: [&str; 4] = ["henon", "dual-henon", "noninv-quad", "henon-138"];

/// Number of monomials of total degree at most `degree` in `delay` variables.
pub fn basis_size(delay: usize, degree: usize) -> usize {
    // binomial(delay + degree, degree)
    let mut b = 1usize;
    for i in 1..=degree {
        b = b * (delay + i) / i;
    }
    b
}

fn check_model(delay: usize, degree: usize) -> Result<()> {
    if delay == 2 && (degree == 2 || degree == 3) {
        Ok(())
    } else {
        Err(Error::UnsupportedModel { delay, degree })
    }
}

/// Fill `out` with the polynomial basis at `(recent, older) = (x_{i-1}, x_{i-2})`.
///
/// Ordering: `1, r, o, r·o, r², o²`, then for degree 3 `r³, r²o, ro², o³`.
#[inline]
pub(crate) fn fill_features(recent: f64, older: f64, degree: usize, out: &mut [f64]) {
    let (r, o) = (recent, older);
    out[0] = 1.0;
    out[1] = r;
    out[2] = o;
    out[3] = r * o;
    out[4] = r * r;
    out[5] = o * o;
    if degree == 3 {
        out[6] = r * r * r;
        out[7] = r * r * o;
        out[8] = r * o * o;
        out[9] = o * o * o;
    }
}

/// Partial derivatives of every basis function with respect to `recent` and `older`.
fn fill_feature_gradients(recent: f64, older: f64, degree: usize, d_r: &mut [f64], d_o: &mut [f64]) {
    let (r, o) = (recent, older);
    d_r[..6].copy_from_slice(&[0.0, 1.0, 0.0, o, 2.0 * r, 0.0]);
    d_o[..6].copy_from_slice(&[0.0, 0.0, 1.0, r, 0.0, 2.0 * o]);
    if degree == 3 {
        d_r[6..10].copy_from_slice(&[3.0 * r * r, 2.0 * r * o, o * o, 0.0]);
        d_o[6..10].copy_from_slice(&[0.0, r * r, 2.0 * r * o, 3.0 * o * o]);
    }
}

/// Evaluate the polynomial basis. `lags` is most-recent first: `[x_{i-1}, x_{i-2}]`.
pub fn poly_features(lags: &[f64], degree: usize) -> Result<Vec<f64>> {
    check_model(lags.len(), degree)?;
    if lags.iter().any(|x| !x.is_finite()) {
        return param_err("lags must be finite");
    }
    let mut out = vec![0.0; basis_size(2, degree)];
    fill_features(lags[0], lags[1], degree, &mut out);
    Ok(out)
}

/// A delay-`d` polynomial map of degree `p`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapSpec {
    pub delay: usize,
    pub degree: usize,
    pub coeffs: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
}

impl MapSpec {
    pub fn new(delay: usize, degree: usize, coeffs: Vec<f64>) -> Result<Self> {
        let map = Self {
            delay,
            degree,
            coeffs,
            preset: None,
        };
        map.validate()?;
        Ok(map)
    }

    pub fn validate(&self) -> Result<()> {
        check_model(self.delay, self.degree)?;
        let want = basis_size(self.delay, self.degree);
        if self.coeffs.len() != want {
            return param_err(format!(
                "map has {} coefficients, basis of degree {} needs {want}",
                self.coeffs.len(),
                self.degree
            ));
        }
        if self.coeffs.iter().any(|c| !c.is_finite()) {
            return param_err("map coefficients must be finite");
        }
        Ok(())
    }

    /// Built-in maps.
    ///
    /// * `henon`: `x_i = 1 − 1.4 x_{i-1}² + 0.3 x_{i-2}`
    /// * `dual-henon`: `x_i = 2 x_{i-1} − 0.1 x_{i-1}³ + 0.3 x_{i-2}`
    /// * `noninv-quad`: `x_i = 1.38 − x_{i-1}² + 0.211 x_{i-2}²`
    /// * `henon-138`: `x_i = 1.38 − x_{i-1}² + 0.27 x_{i-2}`, the generator of
    ///   the multiple-series starting points
    pub fn preset(name: &str) -> Result<Self> {
        let (degree, entries): (usize, &[(usize, f64)]) = match name {
            "henon" => (2, &[(0, 1.0), (4, -1.4), (2, 0.3)]),
            "dual-henon" => (3, &[(1, 2.0), (6, -0.1), (2, 0.3)]),
            "noninv-quad" => (2, &[(0, 1.38), (4, -1.0), (5, 0.211)]),
            "henon-138" => (2, &[(0, 1.38), (4, -1.0), (2, 0.27)]),
            _ => {
                return param_err(format!(
                    "unknown preset '{name}' (known: {})",
                    PRESETS.join(", ")
                ))
            }
        };
        let mut coeffs = vec![0.0; basis_size(2, degree)];
        for &(i, c) in entries {
            coeffs[i] = c;
        }
        Ok(Self {
            delay: 2,
            degree,
            coeffs,
            preset: Some(name.to_string()),
        })
    }

    pub fn basis_size(&self) -> usize {
        self.coeffs.len()
    }

    /// `g(θ, older, recent)` without overflow checks.
    #[inline]
    pub fn g(&self, older: f64, recent: f64) -> f64 {
        let mut f = [0.0; 10];
        fill_features(recent, older, self.degree, &mut f);
        self.coeffs.iter().zip(f.iter()).map(|(c, x)| c * x).sum()
    }

    /// Evaluate `g` at lags given most-recent first: `[x_{i-1}, x_{i-2}]`.
    pub fn map_eval(&self, lags: &[f64]) -> Result<f64> {
        if lags.len() != self.delay {
            return param_err(format!("expected {} lags, got {}", self.delay, lags.len()));
        }
        let y = self.g(lags[1], lags[0]);
        if y.is_finite() {
            Ok(y)
        } else {
            Err(Error::Overflow(format!("map value at {lags:?} is not finite")))
        }
    }

    /// Forward delay map `(u, v) ↦ (v, g(u, v))`.
    #[inline]
    pub fn step(&self, p: Point) -> Point {
        [p[1], self.g(p[0], p[1])]
    }

    /// `(∂g/∂u, ∂g/∂v)` at `(u, v)`.
    pub fn gradient(&self, p: Point) -> (f64, f64) {
        let mut d_r = [0.0; 10];
        let mut d_o = [0.0; 10];
        fill_feature_gradients(p[1], p[0], self.degree, &mut d_r, &mut d_o);
        let dv = self.coeffs.iter().zip(d_r.iter()).map(|(c, x)| c * x).sum();
        let du = self.coeffs.iter().zip(d_o.iter()).map(|(c, x)| c * x).sum();
        (du, dv)
    }

    /// True when `g(u, v) = a(v) + c·u` with `c ≠ 0`, so the delay map has a
    /// closed-form inverse.
    pub fn is_invertible(&self) -> bool {
        // indices of monomials that involve the older lag nonlinearly
        let nonlinear_older: &[usize] = if self.degree == 3 { &[3, 5, 7, 8, 9] } else { &[3, 5] };
        self.coeffs[2] != 0.0 && nonlinear_older.iter().all(|&i| self.coeffs[i] == 0.0)
    }
}

/// Jacobian of `(u, v) ↦ (v, g(u, v))`, rows/columns in `(u, v)` order.
pub fn jacobian_delay(map: &MapSpec, p: Point) -> Matrix2 {
    let (du, dv) = map.gradient(p);
    [[0.0, 1.0], [du, dv]]
}

/// Closed-form preimage under the delay map.
pub fn inverse_step(map: &MapSpec, p: Point) -> Result<Point> {
    if !map.is_invertible() {
        return Err(Error::NotInvertible(format!(
            "{} depends nonlinearly on the older lag",
            map.preset.as_deref().unwrap_or("map")
        )));
    }
    Ok(inverse_step_unchecked(map, p))
}

#[inline]
fn inverse_step_unchecked(map: &MapSpec, p: Point) -> Point {
    // (p, q) = (v, a(v) + c u)  =>  u = (q − a(p)) / c
    let a = map.g(0.0, p[0]);
    [(p[1] - a) / map.coeffs[2], p[0]]
}

/// One weighted zero-mean Gaussian noise component.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseComponent {
    pub weight: f64,
    pub variance: f64,
}

/// Finite mixture of zero-mean Gaussians. Empty means no noise.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub components: Vec<NoiseComponent>,
}

impl NoiseSpec {
    pub fn new(components: Vec<NoiseComponent>) -> Result<Self> {
        let spec = Self { components };
        spec.validate()?;
        Ok(spec)
    }

    pub fn none() -> Self {
        Self::default()
    }

    /// Build from `(weight, variance)` pairs.
    pub fn mixture(pairs: &[(f64, f64)]) -> Result<Self> {
        Self::new(
            pairs
                .iter()
                .map(|&(weight, variance)| NoiseComponent { weight, variance })
                .collect(),
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.components.is_empty() {
            return Ok(());
        }
        for c in &self.components {
            if !(c.weight > 0.0 && c.weight <= 1.0) {
                return param_err(format!("noise weight {} outside (0, 1]", c.weight));
            }
            if !(c.variance > 0.0 && c.variance.is_finite()) {
                return param_err(format!("noise variance {} must be positive", c.variance));
            }
        }
        let total: f64 = self.components.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > 1e-12 {
            return param_err(format!("noise weights sum to {total}, not 1"));
        }
        Ok(())
    }

    pub fn is_zero(&self) -> bool {
        self.components.is_empty()
    }

    /// Variance of the mixture.
    pub fn variance(&self) -> f64 {
        self.components.iter().map(|c| c.weight * c.variance).sum()
    }
}

/// Provenance of a simulated or loaded series.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeriesMeta {
    pub preset: Option<String>,
    pub coeffs: Vec<f64>,
    pub degree: usize,
    pub noise: NoiseSpec,
    /// Initial point `x_{-d+1:0}` in chronological order.
    pub x0: Vec<f64>,
    pub seed: u64,
}

/// An observed scalar series `x_{1:n}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeSeries {
    pub values: Vec<f64>,
    pub meta: Option<SeriesMeta>,
}

impl TimeSeries {
    pub fn from_values(values: Vec<f64>) -> Self {
        Self { values, meta: None }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Delay-embedded points `[x_{i-1}, x_i]`.
    pub fn embed(&self) -> Vec<Point> {
        self.values.windows(2).map(|w| [w[0], w[1]]).collect()
    }
}

/// Iterate `x_i = g(x_{i-2}, x_{i-1}) + e_i` for `n` steps from `x0 = (x_{-1}, x_0)`.
pub fn simulate(map: &MapSpec, noise: &NoiseSpec, x0: &[f64], n: usize, seed: u64) -> Result<TimeSeries> {
    simulate_with_bound(map, noise, x0, n, seed, DEFAULT_ESCAPE_BOUND)
}

pub fn simulate_with_bound(
    map: &MapSpec,
    noise: &NoiseSpec,
    x0: &[f64],
    n: usize,
    seed: u64,
    escape_bound: f64,
) -> Result<TimeSeries> {
    map.validate()?;
    noise.validate()?;
    if n < 1 {
        return param_err("series length must be at least 1");
    }
    if x0.len() != map.delay || x0.iter().any(|x| !x.is_finite()) {
        return param_err(format!("x0 must hold {} finite values", map.delay));
    }
    let mut rng = RngStream::new(seed, 0);
    let mut older = x0[0];
    let mut recent = x0[1];
    let mut values = Vec::with_capacity(n);
    for i in 1..=n {
        let x = map.g(older, recent) + sample_mixture_noise(noise, &mut rng)?;
        if !x.is_finite() || x.abs() > escape_bound {
            return Err(Error::Escape { index: i, value: x });
        }
        values.push(x);
        older = recent;
        recent = x;
    }
    Ok(TimeSeries {
        values,
        meta: Some(SeriesMeta {
            preset: map.preset.clone(),
            coeffs: map.coeffs.clone(),
            degree: map.degree,
            noise: noise.clone(),
            x0: x0.to_vec(),
            seed,
        }),
    })
}

/// A saddle fixed point of the delay map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaddlePoint {
    pub location: Point,
    /// `(λ_s, λ_u)` with `|λ_s| < 1 < |λ_u|`.
    pub eigenvalues: [f64; 2],
    pub stable_dir: Point,
    pub unstable_dir: Point,
}

/// Real eigenvalues of `[[0, 1], [a, b]]`, if any.
fn companion_eigenvalues(j: &Matrix2) -> Option<[f64; 2]> {
    let (a, b) = (j[1][0], j[1][1]);
    // λ² − bλ − a = 0
    let disc = b * b + 4.0 * a;
    if disc < 0.0 {
        return None;
    }
    let s = disc.sqrt();
    // stable root form avoids cancellation
    let q = if b >= 0.0 { 0.5 * (b + s) } else { 0.5 * (b - s) };
    if q == 0.0 {
        return Some([0.0, 0.0]);
    }
    Some([q, -a / q])
}

fn unit(v: Point) -> Point {
    let n = v[0].hypot(v[1]);
    [v[0] / n, v[1] / n]
}

/// Classify the fixed point `(x, x)`; `None` unless it is a saddle.
pub fn classify_fixed_point(map: &MapSpec, x: f64) -> Option<SaddlePoint> {
    let j = jacobian_delay(map, [x, x]);
    let ev = companion_eigenvalues(&j)?;
    let (ls, lu) = if ev[0].abs() < ev[1].abs() { (ev[0], ev[1]) } else { (ev[1], ev[0]) };
    if !(ls.abs() < 1.0 && lu.abs() > 1.0) {
        return None;
    }
    // J (1, λ) = (λ, λ²) for the companion form
    Some(SaddlePoint {
        location: [x, x],
        eigenvalues: [ls, lu],
        stable_dir: unit([1.0, ls]),
        unstable_dir: unit([1.0, lu]),
    })
}

/// Saddle fixed points `(x*, x*)` with `x*` in `(lo, hi)`.
///
/// Roots of `g(x, x) − x` are bracketed by a sign scan over 10⁴ subintervals
/// and refined by bisection to 1e-12.
pub fn find_saddle(map: &MapSpec, lo: f64, hi: f64) -> Result<Vec<SaddlePoint>> {
    map.validate()?;
    if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
        return param_err("search interval must be finite with lo < hi");
    }
    let h = |x: f64| map.g(x, x) - x;
    const SCAN: usize = 10_000;
    let step = (hi - lo) / SCAN as f64;
    let mut roots: Vec<f64> = Vec::new();
    let push = |r: f64, roots: &mut Vec<f64>| {
        if roots.last().is_none_or(|&last| (r - last).abs() > 1e-9) {
            roots.push(r);
        }
    };
    let mut xa = lo;
    let mut ha = h(xa);
    for i in 1..=SCAN {
        let xb = if i == SCAN { hi } else { lo + step * i as f64 };
        let hb = h(xb);
        if ha == 0.0 {
            push(xa, &mut roots);
        } else if hb != 0.0 && ha.signum() != hb.signum() {
            let (mut a, mut b, mut fa) = (xa, xb, ha);
            while b - a > 1e-12 {
                let m = 0.5 * (a + b);
                let fm = h(m);
                if fm == 0.0 {
                    a = m;
                    b = m;
                    break;
                }
                if fm.signum() == fa.signum() {
                    a = m;
                    fa = fm;
                } else {
                    b = m;
                }
            }
            push(0.5 * (a + b), &mut roots);
        }
        xa = xb;
        ha = hb;
    }
    Ok(roots
        .into_iter()
        .filter(|r| *r > lo && *r < hi)
        .filter_map(|r| classify_fixed_point(map, r))
        .collect())
}

#[cfg(test)]
fn mat_vec(m: &Matrix2, v: Point) -> Point {
    [m[0][0] * v[0] + m[0][1] * v[1], m[1][0] * v[0] + m[1][1] * v[1]]
}

/// Pull `start` back through `jacobians` (last to first) with inverse
/// Jacobians, renormalizing after each step.
pub fn stable_direction_along(jacobians: &[Matrix2], start: Point) -> Result<Point> {
    let mut v = unit(start);
    for (index, j) in jacobians.iter().enumerate().rev() {
        let det = j[0][0] * j[1][1] - j[0][1] * j[1][0];
        if det.abs() < 1e-300 || !det.is_finite() {
            return Err(Error::SingularJacobian { index });
        }
        let w = [
            (j[1][1] * v[0] - j[0][1] * v[1]) / det,
            (-j[1][0] * v[0] + j[0][0] * v[1]) / det,
        ];
        v = unit(w);
    }
    Ok(v)
}

/// Local stable direction at `orbit_point`, given the forward orbit `orbit`
/// that follows it (`orbit[k] = F^{k+1}(orbit_point)`).
pub fn stable_direction(map: &MapSpec, orbit_point: Point, orbit: &[Point], rng: &mut RngStream) -> Result<Point> {
    let jacobians: Vec<Matrix2> = std::iter::once(orbit_point)
        .chain(orbit.iter().copied())
        .take(orbit.len().max(1))
        .map(|p| jacobian_delay(map, p))
        .collect();
    let angle = 2.0 * std::f64::consts::PI * rng.open01();
    let mut v = stable_direction_along(&jacobians, [angle.cos(), angle.sin()])?;
    if v[0] < 0.0 {
        v = [-v[0], -v[1]];
    }
    Ok(v)
}

/// Forward orbit `F(p), F²(p), …, F^steps(p)`.
pub fn forward_orbit(map: &MapSpec, p: Point, steps: usize) -> Vec<Point> {
    let mut out = Vec::with_capacity(steps);
    let mut q = p;
    for _ in 0..steps {
        q = map.step(q);
        out.push(q);
    }
    out
}

/// Axis-aligned rectangle.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub xmin: f64,
    pub xmax: f64,
    pub ymin: f64,
    pub ymax: f64,
}

impl Rect {
    pub fn new(xmin: f64, xmax: f64, ymin: f64, ymax: f64) -> Result<Self> {
        let r = Self { xmin, xmax, ymin, ymax };
        r.validate()?;
        Ok(r)
    }

    pub fn square(lo: f64, hi: f64) -> Self {
        Self {
            xmin: lo,
            xmax: hi,
            ymin: lo,
            ymax: hi,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = [self.xmin, self.xmax, self.ymin, self.ymax]
            .iter()
            .all(|v| v.is_finite())
            && self.xmin < self.xmax
            && self.ymin < self.ymax;
        if ok {
            Ok(())
        } else {
            param_err(format!("degenerate rectangle {self:?}"))
        }
    }

    pub fn contains(&self, p: Point) -> bool {
        p[0] >= self.xmin && p[0] <= self.xmax && p[1] >= self.ymin && p[1] <= self.ymax
    }

    /// Euclidean distance from `p` to the rectangle (0 inside).
    pub fn distance(&self, p: Point) -> f64 {
        let dx = (self.xmin - p[0]).max(0.0).max(p[0] - self.xmax);
        let dy = (self.ymin - p[1]).max(0.0).max(p[1] - self.ymax);
        dx.hypot(dy)
    }
}

/// Ordered manifold points with the backward-iteration depth of each.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Polyline {
    pub points: Vec<Point>,
    pub depth: Vec<usize>,
    /// Set when the point budget ran out before tracing finished.
    pub truncated: bool,
}

impl Polyline {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Parameters for [`trace_stable_manifold`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceOptions {
    /// Half-length of the seed segment along the stable direction.
    pub eps: f64,
    /// Number of backward iterations.
    pub n_back: usize,
    pub window: Rect,
    pub max_points: usize,
    /// Maximum spacing between consecutive points inside the window.
    pub resolution: f64,
    /// Seed points per fundamental segment before refinement.
    pub seed_points: usize,
}

impl Default for TraceOptions {
    fn default() -> Self {
        Self {
            eps: 1e-4,
            n_back: 16,
            window: Rect::square(-3.0, 3.0),
            max_points: 2_000_000,
            resolution: 0.01,
            seed_points: 64,
        }
    }
}

// Intermediate backward iterates of points on the stable manifold stay near
// the attractor region; anything beyond this has left for good.
const TRACE_ESCAPE: f64 = 1e4;

fn pull_back(map: &MapSpec, mut p: Point, depth: usize) -> Option<Point> {
    for _ in 0..depth {
        p = pull_back_once(map, p)?;
    }
    Some(p)
}

fn pull_back_once(map: &MapSpec, p: Point) -> Option<Point> {
    let q = inverse_step_unchecked(map, p);
    (q[0].abs() < TRACE_ESCAPE && q[1].abs() < TRACE_ESCAPE).then_some(q)
}

/// Seed parameter `t` and its image at the current depth.
type Node = (f64, Option<Point>);

struct Tracer<'a> {
    opts: &'a TraceOptions,
    /// Region whose points are carried to the next depth: the window grown
    /// by its own size on every side.
    keep: Rect,
    evaluated: usize,
}

impl Tracer<'_> {
    fn needs_split(&self, a: Option<Point>, b: Option<Point>) -> bool {
        match (a, b) {
            (Some(a), Some(b)) => {
                let gap = (a[0] - b[0]).hypot(a[1] - b[1]);
                let slack = 0.5 * self.opts.window.distance(a).min(self.opts.window.distance(b));
                gap > self.opts.resolution.max(slack)
            }
            (Some(a), None) | (None, Some(a)) => self.keep.contains(a),
            (None, None) => false,
        }
    }

    /// Insert midpoints until consecutive images satisfy the spacing rule.
    /// Returns `None` once the evaluation budget is spent.
    fn refine(&mut self, run: Vec<Node>, eval: impl Fn(f64) -> Option<Point>) -> Option<Vec<Node>> {
        let mut out = Vec::with_capacity(run.len());
        let mut pending: Vec<Node> = run.into_iter().rev().collect();
        let Some(mut left) = pending.pop() else {
            return Some(out);
        };
        out.push(left);
        while let Some(right) = pending.last().copied() {
            let tm = 0.5 * (left.0 + right.0);
            if self.needs_split(left.1, right.1) && tm != left.0 && tm != right.0 {
                if self.evaluated >= self.opts.max_points {
                    return None;
                }
                self.evaluated += 1;
                pending.push((tm, eval(tm)));
                continue;
            }
            pending.pop();
            out.push(right);
            left = right;
        }
        Some(out)
    }

    /// Maximal runs of nodes inside `keep`, each with one neighbour on either
    /// side, pulled back one step.
    fn next_runs(&self, map: &MapSpec, run: &[Node]) -> Vec<Vec<Node>> {
        let inside = |n: &Node| n.1.is_some_and(|p| self.keep.contains(p));
        let mut runs = Vec::new();
        let mut i = 0;
        while i < run.len() {
            if !inside(&run[i]) {
                i += 1;
                continue;
            }
            let lo = i.saturating_sub(1);
            while i < run.len() && inside(&run[i]) {
                i += 1;
            }
            let hi = i.min(run.len() - 1);
            runs.push(
                run[lo..=hi]
                    .iter()
                    .map(|&(t, p)| (t, p.and_then(|p| pull_back_once(map, p))))
                    .collect(),
            );
        }
        runs
    }
}

/// Trace the global stable manifold of `saddle` by backward iteration of
/// short segments along its stable direction.
///
/// Depth 0 is the seed segment `saddle ± t·stable_dir`, `|t| ≤ eps`. Depth
/// `k ≥ 1` is the `k`-th preimage of the fundamental pieces
/// `|λ_s|·eps ≤ |t| ≤ eps` on both sides, so the depths tile the manifold
/// without overlap. Each piece is continued depth by depth: the refined
/// curve at depth `k` is pulled back to seed depth `k + 1`, keeping only the
/// parts near the window, and refined in `t` until consecutive points inside
/// the window are at most `resolution` apart. Outside the window the spacing
/// may grow with distance to it. Only points inside the window are returned.
pub fn trace_stable_manifold(map: &MapSpec, saddle: &SaddlePoint, opts: &TraceOptions) -> Result<Polyline> {
    if !map.is_invertible() {
        return Err(Error::NotInvertible(
            "ground-truth tracing needs an invertible map".to_string(),
        ));
    }
    if !(opts.eps > 0.0) || !(opts.resolution > 0.0) {
        return param_err("eps and resolution must be positive");
    }
    let w = opts.window;
    w.validate()?;
    let grow = (w.xmax - w.xmin).max(w.ymax - w.ymin);
    let mut tracer = Tracer {
        opts,
        keep: Rect::new(w.xmin - grow, w.xmax + grow, w.ymin - grow, w.ymax + grow)?,
        evaluated: 0,
    };
    let s = saddle.location;
    let dir = saddle.stable_dir;
    let at = |t: f64| [s[0] + t * dir[0], s[1] + t * dir[1]];
    let shrink = saddle.eigenvalues[0].abs().max(1e-6);
    let seeds = opts.seed_points.max(2);
    let seed_run = |t0: f64, t1: f64, depth: usize| -> Vec<Node> {
        (0..seeds)
            .map(|i| {
                let t = t0 + (t1 - t0) * i as f64 / (seeds - 1) as f64;
                (t, pull_back(map, at(t), depth))
            })
            .collect()
    };

    let mut out = Polyline::default();
    let emit = |run: &[Node], depth: usize, out: &mut Polyline| {
        for p in run.iter().filter_map(|n| n.1).filter(|&p| w.contains(p)) {
            out.points.push(p);
            out.depth.push(depth);
        }
    };

    let mut pieces = vec![(0usize, vec![seed_run(-opts.eps, opts.eps, 0)])];
    if opts.n_back >= 1 {
        pieces.push((1, vec![seed_run(shrink * opts.eps, opts.eps, 1)]));
        pieces.push((1, vec![seed_run(-opts.eps, -shrink * opts.eps, 1)]));
    }
    tracer.evaluated = 3 * seeds;
    'pieces: for (first_depth, mut runs) in pieces {
        let last = if first_depth == 0 { 0 } else { opts.n_back };
        for depth in first_depth..=last {
            let mut next = Vec::new();
            for run in runs {
                let Some(run) = tracer.refine(run, |t| pull_back(map, at(t), depth)) else {
                    out.truncated = true;
                    log::warn!("stable manifold tracing stopped at the point budget ({})", opts.max_points);
                    break 'pieces;
                };
                emit(&run, depth, &mut out);
                if depth < last {
                    next.extend(tracer.next_runs(map, &run));
                }
            }
            runs = next;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    const HENON_FIXED: f64 = 0.631_354_477_089_505_6;

    fn henon() -> MapSpec {
        MapSpec::preset("henon").unwrap()
    }

    #[test]
    fn basis_sizes() {
        assert_eq!(basis_size(2, 2), 6);
        assert_eq!(basis_size(2, 3), 10);
        assert_eq!(basis_size(3, 2), 10);
    }

    #[test]
    fn features_examples() {
        assert_eq!(poly_features(&[2.0, 3.0], 2).unwrap(), vec![1.0, 2.0, 3.0, 6.0, 4.0, 9.0]);
        assert_eq!(poly_features(&[0.0, 0.0], 2).unwrap(), vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(poly_features(&[1.0, 1.0], 3).unwrap(), vec![1.0; 10]);
        assert_eq!(
            poly_features(&[2.0, 3.0], 3).unwrap()[6..],
            [8.0, 12.0, 18.0, 27.0]
        );
    }

    #[test]
    fn features_reject_unsupported() {
        assert!(matches!(
            poly_features(&[1.0, 2.0, 3.0], 2),
            Err(Error::UnsupportedModel { .. })
        ));
        assert!(matches!(poly_features(&[1.0, 2.0], 4), Err(Error::UnsupportedModel { .. })));
        assert!(poly_features(&[f64::NAN, 0.0], 2).is_err());
    }

    #[test]
    fn presets_have_expected_coefficients() {
        assert_eq!(henon().coeffs, vec![1.0, 0.0, 0.3, 0.0, -1.4, 0.0]);
        let dual = MapSpec::preset("dual-henon").unwrap();
        assert_eq!(dual.coeffs, vec![0.0, 2.0, 0.3, 0.0, 0.0, 0.0, -0.1, 0.0, 0.0, 0.0]);
        let ni = MapSpec::preset("noninv-quad").unwrap();
        assert_eq!(ni.coeffs, vec![1.38, 0.0, 0.0, 0.0, -1.0, 0.211]);
        assert!(MapSpec::preset("lorenz").is_err());
    }

    #[test]
    fn map_eval_examples() {
        let h = henon();
        assert!((h.map_eval(&[0.5, -1.0]).unwrap() - 0.35).abs() < 1e-15);
        assert!((h.map_eval(&[HENON_FIXED, HENON_FIXED]).unwrap() - HENON_FIXED).abs() < 1e-7);
        let zero = MapSpec::new(2, 2, vec![0.0; 6]).unwrap();
        assert_eq!(zero.map_eval(&[3.0, -7.0]).unwrap(), 0.0);
        assert!(matches!(h.map_eval(&[1e200, 0.0]), Err(Error::Overflow(_))));
    }

    #[test]
    fn presets_fix_their_fixed_points() {
        let cases = [
            ("henon", HENON_FIXED),
            ("dual-henon", 13f64.sqrt()),
            ("dual-henon", -(13f64.sqrt())),
            ("noninv-quad", (-1.0 + (1.0 + 4.0 * 0.789 * 1.38f64).sqrt()) / (2.0 * 0.789)),
        ];
        for (name, x) in cases {
            let m = MapSpec::preset(name).unwrap();
            assert!((m.map_eval(&[x, x]).unwrap() - x).abs() < 1e-7, "{name}");
        }
    }

    #[test]
    fn simulate_noiseless_henon() {
        let s = simulate(&henon(), &NoiseSpec::none(), &[-1.0, 0.5], 2, 0).unwrap();
        assert!((s.values[0] - 0.35).abs() < 1e-15);
        assert!((s.values[1] - 0.9785).abs() < 1e-12);
    }

    #[test]
    fn simulate_is_deterministic_and_exact() {
        let h = henon();
        let a = simulate(&h, &NoiseSpec::none(), &[0.1, 0.2], 500, 3).unwrap();
        let b = simulate(&h, &NoiseSpec::none(), &[0.1, 0.2], 500, 3).unwrap();
        assert_eq!(a, b);
        let mut lags = [0.1, 0.2];
        for &x in &a.values {
            assert_eq!(x - h.g(lags[0], lags[1]), 0.0);
            lags = [lags[1], x];
        }
    }

    #[test]
    fn simulate_noise_stream_variance() {
        // a noisy orbit of this length leaves the basin, so pool shorter runs
        let h = henon();
        let noise = NoiseSpec::mixture(&[(0.9, 1e-7), (0.1, 1e-3)]).unwrap();
        let mut res = Vec::with_capacity(100_000);
        let mut seed = 0;
        while res.len() < 100_000 {
            seed += 1;
            let Ok(s) = simulate(&h, &noise, &[-1.0, 0.5], 500, seed) else {
                continue;
            };
            let mut lags = [-1.0, 0.5];
            for &x in &s.values {
                res.push(x - h.g(lags[0], lags[1]));
                lags = [lags[1], x];
            }
        }
        let m = res.iter().sum::<f64>() / res.len() as f64;
        let v = res.iter().map(|r| (r - m).powi(2)).sum::<f64>() / (res.len() - 1) as f64;
        assert!((v - 1.009e-4).abs() / 1.009e-4 < 0.05, "variance {v}");
    }

    #[test]
    fn simulate_reports_escape() {
        let err = simulate(&henon(), &NoiseSpec::none(), &[5.0, 5.0], 50, 0).unwrap_err();
        assert!(matches!(err, Error::Escape { index, .. } if index > 1));
        assert!(simulate(&henon(), &NoiseSpec::none(), &[0.0], 5, 0).is_err());
        assert!(simulate(&henon(), &NoiseSpec::none(), &[0.0, 0.0], 0, 0).is_err());
    }

    #[test]
    fn noise_spec_validation() {
        assert!(NoiseSpec::mixture(&[(0.5, 1.0), (0.4, 1.0)]).is_err());
        assert!(NoiseSpec::mixture(&[(1.0, 0.0)]).is_err());
        assert!(NoiseSpec::mixture(&[(1.0, 2.0)]).is_ok());
        assert!(NoiseSpec::none().validate().is_ok());
    }

    #[test]
    fn henon_saddle() {
        let s = find_saddle(&henon(), -3.0, 3.0).unwrap();
        // the negative fixed point of 1.4x² + 0.7x − 1 is a saddle too
        assert_eq!(s.len(), 2);
        assert!((s[0].location[0] + 1.131_354_477).abs() < 1e-8);
        let s = &s[1];
        assert!((s.location[0] - HENON_FIXED).abs() < 1e-10);
        assert!((s.eigenvalues[0] - 0.155_946).abs() < 1e-5);
        assert!((s.eigenvalues[1] + 1.923_737).abs() < 1e-5);
    }

    #[test]
    fn dual_henon_saddles() {
        let s = find_saddle(&MapSpec::preset("dual-henon").unwrap(), -5.0, 5.0).unwrap();
        let xs: Vec<f64> = s.iter().map(|p| p.location[0]).collect();
        let r13 = 3.605_551_275_463_989;
        assert!(xs.iter().any(|x| (x - r13).abs() < 1e-10));
        assert!(xs.iter().any(|x| (x + r13).abs() < 1e-10));
        // the origin is a saddle of this map as well
        assert!(xs.iter().any(|x| x.abs() < 1e-10));
        assert_eq!(xs.len(), 3);
    }

    #[test]
    fn noninvertible_fixed_point() {
        let m = MapSpec::preset("noninv-quad").unwrap();
        let s = find_saddle(&m, -2.0, 2.0).unwrap();
        let x = (-1.0 + (1.0 + 4.0 * 0.789 * 1.38f64).sqrt()) / (2.0 * 0.789);
        assert_eq!(s.len(), 1);
        assert!((s[0].location[0] - x).abs() < 1e-10);
    }

    #[test]
    fn saddle_invariants() {
        for (name, lo, hi) in [("henon", -3.0, 3.0), ("dual-henon", -5.0, 5.0), ("noninv-quad", -2.0, 2.0)] {
            let m = MapSpec::preset(name).unwrap();
            for s in find_saddle(&m, lo, hi).unwrap() {
                let [ls, lu] = s.eigenvalues;
                assert!(ls.abs() < 1.0 && lu.abs() > 1.0);
                for d in [s.stable_dir, s.unstable_dir] {
                    assert!((d[0].hypot(d[1]) - 1.0).abs() < 1e-12);
                }
                let j = jacobian_delay(&m, s.location);
                let jv = mat_vec(&j, s.stable_dir);
                assert!((jv[0] - ls * s.stable_dir[0]).abs() < 1e-9);
                assert!((jv[1] - ls * s.stable_dir[1]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn no_saddle_is_empty() {
        assert!(find_saddle(&henon(), 1.0, 2.0).unwrap().is_empty());
    }

    #[test]
    fn jacobian_examples() {
        let j = jacobian_delay(&henon(), [0.631_354_46, 0.631_354_46]);
        assert_eq!(j[0], [0.0, 1.0]);
        assert!((j[1][0] - 0.3).abs() < 1e-15);
        assert!((j[1][1] + 1.767_792_49).abs() < 1e-8);
        let ev = companion_eigenvalues(&j).unwrap();
        // λ² + 1.76779249λ − 0.3 = 0
        let b = 1.767_792_49f64;
        let r = (b * b + 1.2).sqrt();
        let (l1, l2) = ((-b + r) / 2.0, (-b - r) / 2.0);
        assert!(ev.iter().any(|e| (e - l1).abs() < 1e-8));
        assert!(ev.iter().any(|e| (e - l2).abs() < 1e-8));
        assert!((l1 - 0.155_946).abs() < 1e-5 && (l2 + 1.923_737).abs() < 1e-5);
        let zero = MapSpec::new(2, 2, vec![0.0; 6]).unwrap();
        assert_eq!(jacobian_delay(&zero, [1.0, 2.0]), [[0.0, 1.0], [0.0, 0.0]]);
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let m = MapSpec::preset("dual-henon").unwrap();
        let p = [0.7, -1.3];
        let j = jacobian_delay(&m, p);
        let h = 1e-6;
        let du = (m.g(p[0] + h, p[1]) - m.g(p[0] - h, p[1])) / (2.0 * h);
        let dv = (m.g(p[0], p[1] + h) - m.g(p[0], p[1] - h)) / (2.0 * h);
        assert!((j[1][0] - du).abs() < 1e-7);
        assert!((j[1][1] - dv).abs() < 1e-7);
    }

    #[test]
    fn stable_direction_at_saddle() {
        let h = henon();
        let s = &henon_main_saddle(&h);
        let orbit = vec![s.location; 40];
        let mut rng = RngStream::new(5, 0);
        let v = stable_direction(&h, s.location, &orbit, &mut rng).unwrap();
        // eigenvector of the Jacobian for λ_s, in (u, v) order: (1, λ_s)
        let e = unit([1.0, s.eigenvalues[0]]);
        let angle = (v[0] * e[1] - v[1] * e[0]).abs().asin();
        assert!(angle < 1e-4, "angle {angle}");
        let jv = mat_vec(&jacobian_delay(&h, s.location), v);
        assert!((jv[0].hypot(jv[1]) - s.eigenvalues[0].abs()).abs() < 1e-9);
    }

    #[test]
    fn stable_direction_identity_keeps_vector() {
        let id = [[1.0, 0.0], [0.0, 1.0]];
        let start = unit([0.3, -0.8]);
        let v = stable_direction_along(&[id; 5], start).unwrap();
        assert!((v[0] - start[0]).abs() < 1e-15 && (v[1] - start[1]).abs() < 1e-15);
        let singular = [[1.0, 2.0], [2.0, 4.0]];
        assert!(matches!(
            stable_direction_along(&[id, singular, id], start),
            Err(Error::SingularJacobian { index: 1 })
        ));
    }

    #[test]
    fn inverse_step_examples() {
        let h = henon();
        let p = inverse_step(&h, [0.5, 0.35]).unwrap();
        assert!((p[0] + 1.0).abs() < 1e-12 && (p[1] - 0.5).abs() < 1e-15);
        let fp = [HENON_FIXED, HENON_FIXED];
        let q = inverse_step(&h, fp).unwrap();
        assert!((q[0] - fp[0]).abs() < 1e-12 && (q[1] - fp[1]).abs() < 1e-15);
        assert!(matches!(
            inverse_step(&MapSpec::preset("noninv-quad").unwrap(), [0.0, 0.0]),
            Err(Error::NotInvertible(_))
        ));
    }

    #[test]
    fn inverse_roundtrip_random_points() {
        let mut rng = RngStream::new(12, 0);
        for name in ["henon", "dual-henon"] {
            let m = MapSpec::preset(name).unwrap();
            let mut worst: f64 = 0.0;
            for _ in 0..1000 {
                let p = [4.0 * rng.open01() - 2.0, 4.0 * rng.open01() - 2.0];
                let a = inverse_step(&m, m.step(p)).unwrap();
                let b = m.step(inverse_step(&m, p).unwrap());
                worst = worst
                    .max((a[0] - p[0]).abs())
                    .max((a[1] - p[1]).abs())
                    .max((b[0] - p[0]).abs())
                    .max((b[1] - p[1]).abs());
            }
            assert!(worst < 1e-10, "{name}: {worst}");
        }
    }

    fn henon_main_saddle(h: &MapSpec) -> SaddlePoint {
        find_saddle(h, 0.0, 3.0).unwrap().remove(0)
    }

    fn henon_trace(n_back: usize) -> (MapSpec, SaddlePoint, Polyline) {
        let h = henon();
        let s = henon_main_saddle(&h);
        let opts = TraceOptions {
            n_back,
            ..TraceOptions::default()
        };
        let line = trace_stable_manifold(&h, &s, &opts).unwrap();
        (h, s, line)
    }

    #[test]
    fn trace_depth_zero_is_seed_segment() {
        let (_, s, line) = henon_trace(0);
        assert!(!line.is_empty());
        for p in &line.points {
            let d = (p[0] - s.location[0]).hypot(p[1] - s.location[1]);
            assert!(d <= 1e-4 + 1e-15);
        }
    }

    #[test]
    fn traced_points_converge_forward() {
        let (h, s, line) = henon_trace(10);
        assert!(line.len() > 100);
        for (p, &depth) in line.points.iter().zip(&line.depth) {
            assert!(depth <= 10);
            let mut q = *p;
            let mut hit = false;
            for _ in 0..=50 {
                if (q[0] - s.location[0]).hypot(q[1] - s.location[1]) < 1e-2 {
                    hit = true;
                    break;
                }
                q = h.step(q);
            }
            assert!(hit, "point {p:?} at depth {depth} does not reach the saddle");
        }
    }

    #[test]
    fn trace_grows_with_depth() {
        let counts: Vec<usize> = (0..8).map(|k| henon_trace(k).2.len()).collect();
        assert!(counts.windows(2).all(|w| w[0] <= w[1]), "{counts:?}");
    }

    #[test]
    fn trace_spacing_inside_window() {
        let (_, _, line) = henon_trace(6);
        // consecutive points from one piece are at most `resolution` apart
        let close = line
            .points
            .windows(2)
            .filter(|w| (w[0][0] - w[1][0]).hypot(w[0][1] - w[1][1]) <= 0.01 + 1e-12)
            .count();
        assert!(close as f64 > 0.95 * (line.len() - 1) as f64);
    }

    #[test]
    fn trace_rejects_noninvertible() {
        let m = MapSpec::preset("noninv-quad").unwrap();
        let s = find_saddle(&m, -2.0, 2.0).unwrap().remove(0);
        assert!(trace_stable_manifold(&m, &s, &TraceOptions::default()).is_err());
    }

    #[test]
    fn trace_budget_sets_flag() {
        let h = henon();
        let s = henon_main_saddle(&h);
        let opts = TraceOptions {
            max_points: 500,
            ..TraceOptions::default()
        };
        assert!(trace_stable_manifold(&h, &s, &opts).unwrap().truncated);
    }
}
