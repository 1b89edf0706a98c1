//! Manifold clouds from many chains, their grid rendering and scoring.
//!
//! Cloud coordinates follow the delay convention of the rest of the crate:
//! `x` is the older value `x_{-T-1}` and `y` the newer `x_{-T}` of each
//! retained initial point.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{Point, Polyline, Rect, TimeSeries};
use crate::error::{param_err, Error, Result};
use crate::gsbr::{run_chain, ChainOutput, GsbrConfig};
use crate::stochastics::RngStream;

/// Stride-1 windows `x_{j : n-k+j}`, `j = 1..=k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowPlan {
    pub k: usize,
    pub window_len: usize,
    /// 1-based start index of each window.
    pub offsets: Vec<usize>,
}

impl WindowPlan {
    /// Window `j` (1-based) of `series`.
    pub fn window(&self, series: &TimeSeries, j: usize) -> TimeSeries {
        let start = j - 1;
        TimeSeries::from_values(series.values[start..start + self.window_len].to_vec())
    }
}

/// Plan `k` windows over `series`, each long enough to fit the model of `config`.
pub fn sliding_windows(series: &TimeSeries, k: usize, config: &GsbrConfig) -> Result<WindowPlan> {
    if k < 1 {
        return param_err("k must be at least 1");
    }
    let min = config.basis_size() + 1;
    let n = series.len();
    if k > n || n - k + 1 < min {
        return Err(Error::WindowLength {
            len: (n + 1).saturating_sub(k),
            min,
        });
    }
    Ok(WindowPlan {
        k,
        window_len: n - k + 1,
        offsets: (1..=k).collect(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CloudMode {
    Sliding,
    Multi,
}

/// One retained initial point.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CloudPoint {
    pub x: f64,
    pub y: f64,
    pub source_id: usize,
    pub sweep_index: usize,
}

/// A chain that did not finish.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceFailure {
    pub source_id: usize,
    pub kind: String,
    pub message: String,
}

/// Per-source run summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceSummary {
    pub source_id: usize,
    pub retained: usize,
    pub acceptance: Vec<f64>,
    pub n_star_max: usize,
    pub lambda_mean: f64,
}

/// Union of posterior initial-point draws over sources.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifoldCloud {
    pub points: Vec<CloudPoint>,
    pub mode: CloudMode,
    pub config: GsbrConfig,
    pub seed: u64,
    pub sources: Vec<SourceSummary>,
    pub failures: Vec<SourceFailure>,
}

impl ManifoldCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn xy(&self) -> Vec<Point> {
        self.points.iter().map(|p| [p.x, p.y]).collect()
    }

    /// Points of one source.
    pub fn source(&self, source_id: usize) -> Vec<Point> {
        self.points
            .iter()
            .filter(|p| p.source_id == source_id)
            .map(|p| [p.x, p.y])
            .collect()
    }
}

fn pool(jobs: Option<usize>) -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(j) = jobs {
        if j == 0 {
            return param_err("jobs must be at least 1");
        }
        b = b.num_threads(j);
    }
    b.build().map_err(|e| Error::Parameter(format!("cannot build worker pool: {e}")))
}

/// Run one chain per `(source_id, series)` on a bounded pool and merge the
/// results in source order.
fn run_sources(
    sources: Vec<(usize, TimeSeries)>,
    config: &GsbrConfig,
    seed: u64,
    jobs: Option<usize>,
    mode: CloudMode,
) -> Result<ManifoldCloud> {
    config.validate()?;
    let total = sources.len();
    let results: Vec<(usize, Result<ChainOutput>)> = pool(jobs)?.install(|| {
        sources
            .into_par_iter()
            .map(|(id, s)| (id, run_chain(config, &s, RngStream::new(seed, id as u64))))
            .collect()
    });
    let mut cloud = ManifoldCloud {
        points: Vec::new(),
        mode,
        config: config.clone(),
        seed,
        sources: Vec::new(),
        failures: Vec::new(),
    };
    for (id, res) in results {
        match res {
            Ok(out) => {
                cloud.points.extend(out.samples.iter().map(|s| CloudPoint {
                    x: s.initial_point[0],
                    y: s.initial_point[1],
                    source_id: id,
                    sweep_index: s.sweep_index,
                }));
                cloud.sources.push(SourceSummary {
                    source_id: id,
                    retained: out.samples.len(),
                    acceptance: out.diagnostics.acceptance,
                    n_star_max: out.diagnostics.n_star_max,
                    lambda_mean: out.diagnostics.lambda_mean,
                });
            }
            Err(e) => {
                log::warn!("source {id} failed: {e}");
                cloud.failures.push(SourceFailure {
                    source_id: id,
                    kind: e.kind().to_string(),
                    message: e.to_string(),
                });
            }
        }
    }
    if cloud.failures.len() * 10 > total {
        return Err(Error::TooManyFailures {
            failed: cloud.failures.len(),
            total,
            first: cloud.failures[0].message.clone(),
        });
    }
    Ok(cloud)
}

/// Sliding-window approximation: one chain per window `j` on stream `j`.
pub fn approximate_manifold_sliding(
    series: &TimeSeries,
    k: usize,
    config: &GsbrConfig,
    seed: u64,
    jobs: Option<usize>,
) -> Result<ManifoldCloud> {
    let plan = sliding_windows(series, k, config)?;
    let sources = plan.offsets.iter().map(|&j| (j, plan.window(series, j))).collect();
    run_sources(sources, config, seed, jobs, CloudMode::Sliding)
}

/// Multiple-series approximation: one chain per series, source ids `1..=r`.
pub fn approximate_manifold_multi(
    series_list: &[TimeSeries],
    config: &GsbrConfig,
    seed: u64,
    jobs: Option<usize>,
) -> Result<ManifoldCloud> {
    if series_list.is_empty() {
        return param_err("at least one series is required");
    }
    let n = series_list[0].len();
    if series_list.iter().any(|s| s.len() != n) {
        return param_err("all series must have the same length");
    }
    let sources = series_list.iter().cloned().enumerate().map(|(i, s)| (i + 1, s)).collect();
    run_sources(sources, config, seed, jobs, CloudMode::Multi)
}

/// Occupancy counts of a cloud over a rectangle.
///
/// `counts` is row-major with `rows` rows of `cols` cells. Row 0 is the
/// bottom strip (`y` nearest `ymin`) and column 0 the left strip (`x`
/// nearest `xmin`). Points on the upper edges fall in the last row/column.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HpdrGrid {
    pub bounds: Rect,
    pub cols: usize,
    pub rows: usize,
    pub counts: Vec<u64>,
    /// Every point offered, binned or not.
    pub total: u64,
}

/// JSON header written next to the count matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridHeader {
    pub bounds: Rect,
    pub resolution: [usize; 2],
    pub total: u64,
    pub inside: u64,
    pub orientation: String,
}

impl HpdrGrid {
    pub fn row(&self, r: usize) -> &[u64] {
        &self.counts[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, col: usize, row: usize) -> u64 {
        self.counts[row * self.cols + col]
    }

    pub fn inside(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn header(&self) -> GridHeader {
        GridHeader {
            bounds: self.bounds,
            resolution: [self.cols, self.rows],
            total: self.total,
            inside: self.inside(),
            orientation: "row-major; row 0 at ymin, column 0 at xmin".to_string(),
        }
    }
}

/// Bin points into a `cols × rows` grid over `bounds`.
pub fn hpdr_grid(points: &[Point], bounds: Rect, cols: usize, rows: usize) -> Result<HpdrGrid> {
    bounds.validate()?;
    if cols < 1 || rows < 1 {
        return param_err("grid resolution must be at least 1×1");
    }
    let mut counts = vec![0u64; cols * rows];
    let (w, h) = (bounds.xmax - bounds.xmin, bounds.ymax - bounds.ymin);
    for p in points {
        if !bounds.contains(*p) {
            continue;
        }
        let c = (((p[0] - bounds.xmin) / w * cols as f64) as usize).min(cols - 1);
        let r = (((p[1] - bounds.ymin) / h * rows as f64) as usize).min(rows - 1);
        counts[r * cols + c] += 1;
    }
    Ok(HpdrGrid {
        bounds,
        cols,
        rows,
        counts,
        total: points.len() as u64,
    })
}

/// Agreement between a cloud and a reference polyline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CloudMetrics {
    pub n_points: usize,
    pub n_vertices: usize,
    pub tol: f64,
    pub max_gap: f64,
    pub median: f64,
    pub p95: f64,
    pub max: f64,
    /// Share of cloud points within `tol` of the polyline.
    pub coverage: f64,
    /// Share of polyline vertices within `tol` of some cloud point.
    pub truth_recall: f64,
}

fn point_segment_distance(p: Point, a: Point, b: Point) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let (px, py) = (p[0] - a[0], p[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let dot = px * dx + py * dy;
    if len2 == 0.0 || dot <= 0.0 {
        px.hypot(py)
    } else if dot >= len2 {
        (p[0] - b[0]).hypot(p[1] - b[1])
    } else {
        // cross product form is exactly zero for collinear points
        (px * dy - py * dx).abs() / len2.sqrt()
    }
}

/// Uniform bucket grid over a bounding box.
struct Buckets {
    x0: f64,
    y0: f64,
    cell: f64,
    nx: usize,
    ny: usize,
    items: Vec<Vec<usize>>,
}

impl Buckets {
    fn new(pts: impl Iterator<Item = Point> + Clone, cell: f64) -> Self {
        let (mut x0, mut y0, mut x1, mut y1) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
        for p in pts {
            x0 = x0.min(p[0]);
            y0 = y0.min(p[1]);
            x1 = x1.max(p[0]);
            y1 = y1.max(p[1]);
        }
        let nx = (((x1 - x0) / cell) as usize + 1).min(4096);
        let ny = (((y1 - y0) / cell) as usize + 1).min(4096);
        let cell = cell.max((x1 - x0) / nx as f64).max((y1 - y0) / ny as f64);
        Self {
            x0,
            y0,
            cell,
            nx,
            ny,
            items: vec![Vec::new(); nx * ny],
        }
    }

    fn index(&self, p: Point) -> (usize, usize) {
        let cx = ((p[0] - self.x0) / self.cell).floor().clamp(0.0, (self.nx - 1) as f64) as usize;
        let cy = ((p[1] - self.y0) / self.cell).floor().clamp(0.0, (self.ny - 1) as f64) as usize;
        (cx, cy)
    }

    fn insert_box(&mut self, lo: Point, hi: Point, id: usize) {
        let (ax, ay) = self.index(lo);
        let (bx, by) = self.index(hi);
        for cy in ay..=by {
            for cx in ax..=bx {
                self.items[cy * self.nx + cx].push(id);
            }
        }
    }

    /// Distance from `p` to the box of its clamped cell.
    fn outside(&self, p: Point, (cx, cy): (usize, usize)) -> f64 {
        let bx0 = self.x0 + cx as f64 * self.cell;
        let by0 = self.y0 + cy as f64 * self.cell;
        let dx = (bx0 - p[0]).max(0.0).max(p[0] - bx0 - self.cell);
        let dy = (by0 - p[1]).max(0.0).max(p[1] - by0 - self.cell);
        dx.hypot(dy)
    }

    /// Smallest `dist(p, item)` by ring search around `p`'s cell.
    fn nearest(&self, p: Point, dist: impl Fn(usize) -> f64) -> f64 {
        let c = self.index(p);
        let e = self.outside(p, c);
        let mut best = f64::INFINITY;
        let kmax = self.nx.max(self.ny);
        for k in 0..=kmax {
            let (cx, cy) = (c.0 as isize, c.1 as isize);
            let k = k as isize;
            for y in (cy - k)..=(cy + k) {
                if y < 0 || y >= self.ny as isize {
                    continue;
                }
                let ring_row = y == cy - k || y == cy + k;
                let mut x = cx - k;
                while x <= cx + k {
                    if x >= 0 && x < self.nx as isize {
                        for &id in &self.items[y as usize * self.nx + x as usize] {
                            best = best.min(dist(id));
                        }
                    }
                    x += if ring_row || k == 0 { 1 } else { 2 * k };
                }
            }
            // unvisited cells are at least k cells away from p's cell
            if best <= k as f64 * self.cell - e {
                break;
            }
        }
        best
    }
}

/// Segments of `truth`: consecutive vertices closer than `max_gap`; isolated
/// vertices become zero-length segments.
fn polyline_segments(truth: &Polyline, max_gap: f64) -> Vec<(Point, Point)> {
    let pts = &truth.points;
    let mut segs = Vec::new();
    let mut covered = vec![false; pts.len()];
    for i in 1..pts.len() {
        let (a, b) = (pts[i - 1], pts[i]);
        if (a[0] - b[0]).hypot(a[1] - b[1]) <= max_gap {
            segs.push((a, b));
            covered[i - 1] = true;
            covered[i] = true;
        }
    }
    for (i, &c) in covered.iter().enumerate() {
        if !c {
            segs.push((pts[i], pts[i]));
        }
    }
    segs
}

/// Distances from each point to the polyline.
pub fn polyline_distances(points: &[Point], truth: &Polyline, max_gap: f64) -> Result<Vec<f64>> {
    if points.is_empty() || truth.points.is_empty() {
        return param_err("cloud and polyline must be non-empty");
    }
    let segs = polyline_segments(truth, max_gap);
    let cell = (max_gap * 2.0).max(1e-6);
    let mut grid = Buckets::new(truth.points.iter().copied(), cell);
    for (i, (a, b)) in segs.iter().enumerate() {
        grid.insert_box([a[0].min(b[0]), a[1].min(b[1])], [a[0].max(b[0]), a[1].max(b[1])], i);
    }
    Ok(points
        .par_iter()
        .map(|&p| grid.nearest(p, |i| point_segment_distance(p, segs[i].0, segs[i].1)))
        .collect())
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    // linear interpolation between closest ranks
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Score a cloud against a reference polyline. Consecutive polyline vertices
/// further apart than `max_gap` are treated as a break.
pub fn cloud_metrics(points: &[Point], truth: &Polyline, tol: f64, max_gap: f64) -> Result<CloudMetrics> {
    if !(tol > 0.0) || !(max_gap > 0.0) {
        return param_err("tol and max_gap must be positive");
    }
    let mut d = polyline_distances(points, truth, max_gap)?;
    let coverage = d.iter().filter(|&&x| x <= tol).count() as f64 / d.len() as f64;
    d.sort_by(f64::total_cmp);
    let mut near = Buckets::new(points.iter().copied(), tol);
    for (i, p) in points.iter().enumerate() {
        near.insert_box(*p, *p, i);
    }
    let recalled = truth
        .points
        .par_iter()
        .filter(|&&v| {
            let (cx, cy) = near.index(v);
            (cy.saturating_sub(1)..=(cy + 1).min(near.ny - 1)).any(|y| {
                (cx.saturating_sub(1)..=(cx + 1).min(near.nx - 1)).any(|x| {
                    near.items[y * near.nx + x].iter().any(|&i| {
                        let p = points[i];
                        (p[0] - v[0]).hypot(p[1] - v[1]) <= tol
                    })
                })
            })
        })
        .count();
    Ok(CloudMetrics {
        n_points: points.len(),
        n_vertices: truth.points.len(),
        tol,
        max_gap,
        median: quantile(&d, 0.5),
        p95: quantile(&d, 0.95),
        max: d[d.len() - 1],
        coverage,
        truth_recall: recalled as f64 / truth.points.len() as f64,
    })
}

/// Sample covariance `[sxx, sxy, syy]`.
fn covariance(points: &[Point]) -> [f64; 3] {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p[0]).sum::<f64>() / n;
    let my = points.iter().map(|p| p[1]).sum::<f64>() / n;
    let mut c = [0.0; 3];
    for p in points {
        let (dx, dy) = (p[0] - mx, p[1] - my);
        c[0] += dx * dx;
        c[1] += dx * dy;
        c[2] += dy * dy;
    }
    c.map(|v| v / (n - 1.0))
}

/// Eigenvalues (descending) of a symmetric 2×2 matrix.
fn sym_eigenvalues([a, b, c]: [f64; 3]) -> (f64, f64) {
    let m = 0.5 * (a + c);
    let r = (0.5 * (a - c)).hypot(b);
    (m + r, m - r)
}

/// Leading principal axis of a point set and its angle to the positive
/// x-axis in `[0°, 180°)`.
///
/// An eigenvalue gap below `1e-12` times the leading eigenvalue is treated as
/// an isotropic, degenerate cloud.
pub fn principal_direction(points: &[Point]) -> Result<(Point, f64)> {
    if points.len() < 3 {
        return Err(Error::DegenerateCloud(format!("{} points, need at least 3", points.len())));
    }
    let cov = covariance(points);
    let (l1, l2) = sym_eigenvalues(cov);
    if !(l1 > 0.0) {
        return Err(Error::DegenerateCloud("zero covariance".into()));
    }
    if l1 - l2 <= 1e-12 * l1 {
        return Err(Error::DegenerateCloud("no dominant direction".into()));
    }
    let [a, b, c] = cov;
    // eigenvector for l1, from whichever row is better conditioned
    let v = if (l1 - a).abs() >= (l1 - c).abs() { [b, l1 - a] } else { [l1 - c, b] };
    let n = v[0].hypot(v[1]);
    let mut v = [v[0] / n, v[1] / n];
    if v[1] < 0.0 || (v[1] == 0.0 && v[0] < 0.0) {
        v = [-v[0], -v[1]];
    }
    let angle = v[1].atan2(v[0]).to_degrees();
    Ok((v, if angle >= 180.0 { angle - 180.0 } else { angle }))
}

/// Square root of the leading covariance eigenvalue.
pub fn major_axis_sd(points: &[Point]) -> f64 {
    if points.len() < 2 {
        return 0.0;
    }
    sym_eigenvalues(covariance(points)).0.max(0.0).sqrt()
}

/// Mean over sources of [`major_axis_sd`].
pub fn mean_major_spread(cloud: &ManifoldCloud) -> f64 {
    let mut ids: Vec<usize> = cloud.points.iter().map(|p| p.source_id).collect();
    ids.dedup();
    ids.sort_unstable();
    ids.dedup();
    if ids.is_empty() {
        return 0.0;
    }
    ids.iter().map(|&id| major_axis_sd(&cloud.source(id))).sum::<f64>() / ids.len() as f64
}

/// Angle in degrees between two undirected directions, in `[0°, 90°]`.
pub fn line_angle(a: Point, b: Point) -> f64 {
    let cos = (a[0] * b[0] + a[1] * b[1]).abs() / (a[0].hypot(a[1]) * b[0].hypot(b[1]));
    cos.min(1.0).acos().to_degrees()
}
