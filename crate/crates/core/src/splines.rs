//! Natural cubic splines for the reference path and the lateral boundaries,
//! plus Cartesian <-> Frenet conversions.
//!
//! The reference path is reparameterized by arclength, so curvature follows
//! directly from `x'y'' - x''y'`. Evaluation outside the knot range
//! continues linearly along the end tangent.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{PlanError, Result};
use crate::geometry::Point2;

/// Spacing of the dense pre-sampling used to seed projections.
pub const PROJECTION_SAMPLE_SPACING: f64 = 0.5;
pub const PROJECTION_MAX_SEEDS: usize = 16;
pub const PROJECTION_MAX_ITERATIONS: usize = 20;
pub const PROJECTION_TOLERANCE: f64 = 1e-10;
pub const DEFAULT_CAPTURE_RADIUS: f64 = 50.0;
/// Search half-width for curve-to-curve local projections.
pub const LOCAL_PROJECTION_WINDOW: f64 = 5.0;

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w -= 2.0 * PI;
    }
    w
}

/// Natural cubic spline `y(t)` with linear extrapolation past the ends.
#[derive(Debug, Clone, PartialEq)]
pub struct CubicSpline1D {
    t: Vec<f64>,
    y: Vec<f64>,
    b: Vec<f64>,
    c: Vec<f64>,
    d: Vec<f64>,
}

impl CubicSpline1D {
    pub fn natural(t: &[f64], y: &[f64]) -> Result<Self> {
        if t.len() != y.len() {
            return Err(PlanError::Dimension { expected: t.len(), got: y.len() });
        }
        let n = t.len();
        if n < 2 {
            return Err(PlanError::DegenerateInput("spline needs at least 2 knots".into()));
        }
        if t.windows(2).any(|w| !(w[1] > w[0])) || t.iter().chain(y).any(|v| !v.is_finite()) {
            return Err(PlanError::DegenerateInput("spline knots must be finite and strictly increasing".into()));
        }
        let h: Vec<f64> = t.windows(2).map(|w| w[1] - w[0]).collect();

        // Second derivatives with m[0] = m[n-1] = 0 (Thomas algorithm).
        let mut m = vec![0.0; n];
        if n > 2 {
            let k = n - 2;
            let mut diag = vec![0.0; k];
            let mut rhs = vec![0.0; k];
            for i in 0..k {
                diag[i] = 2.0 * (h[i] + h[i + 1]);
                rhs[i] = 6.0 * ((y[i + 2] - y[i + 1]) / h[i + 1] - (y[i + 1] - y[i]) / h[i]);
            }
            for i in 1..k {
                let w = h[i] / diag[i - 1];
                diag[i] -= w * h[i];
                rhs[i] -= w * rhs[i - 1];
            }
            m[k] = rhs[k - 1] / diag[k - 1];
            for i in (0..k - 1).rev() {
                m[i + 1] = (rhs[i] - h[i + 1] * m[i + 2]) / diag[i];
            }
        }

        let segs = n - 1;
        let mut b = Vec::with_capacity(segs);
        let mut c = Vec::with_capacity(segs);
        let mut d = Vec::with_capacity(segs);
        for i in 0..segs {
            b.push((y[i + 1] - y[i]) / h[i] - h[i] * (2.0 * m[i] + m[i + 1]) / 6.0);
            c.push(0.5 * m[i]);
            d.push((m[i + 1] - m[i]) / (6.0 * h[i]));
        }
        Ok(Self { t: t.to_vec(), y: y.to_vec(), b, c, d })
    }

    pub fn knots(&self) -> &[f64] {
        &self.t
    }

    pub fn values(&self) -> &[f64] {
        &self.y
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.t[0], self.t[self.t.len() - 1])
    }

    /// Value and first three derivatives at `t`.
    pub fn derivatives(&self, t: f64) -> [f64; 4] {
        let (t0, t1) = self.domain();
        let segs = self.b.len();
        if t < t0 {
            let slope = self.b[0];
            return [self.y[0] + slope * (t - t0), slope, 0.0, 0.0];
        }
        if t > t1 {
            let i = segs - 1;
            let h = t1 - self.t[i];
            let slope = self.b[i] + 2.0 * self.c[i] * h + 3.0 * self.d[i] * h * h;
            return [self.y[segs] + slope * (t - t1), slope, 0.0, 0.0];
        }
        let i = self.t.partition_point(|&k| k <= t).saturating_sub(1).min(segs - 1);
        let u = t - self.t[i];
        let (b, c, d) = (self.b[i], self.c[i], self.d[i]);
        [
            self.y[i] + u * (b + u * (c + u * d)),
            b + u * (2.0 * c + 3.0 * d * u),
            2.0 * c + 6.0 * d * u,
            6.0 * d,
        ]
    }

    pub fn eval(&self, t: f64) -> f64 {
        self.derivatives(t)[0]
    }

    /// Largest absolute polynomial coefficient, used to scale tolerances.
    pub fn coefficient_scale(&self) -> f64 {
        self.y
            .iter()
            .chain(&self.b)
            .chain(&self.c)
            .chain(&self.d)
            .fold(0.0_f64, |acc, v| acc.max(v.abs()))
    }
}

/// Arclength-parameterized planar reference curve.
#[derive(Debug, Clone)]
pub struct PathSpline2D {
    x: CubicSpline1D,
    y: CubicSpline1D,
    knots: Vec<Point2>,
    samples: Vec<(f64, Point2)>,
}

/// Result of projecting a Cartesian point onto the reference path.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathProjection {
    pub s: f64,
    pub d: f64,
    /// True when the foot point lies on the linear extension past an end.
    pub extrapolated: bool,
}

/// Frenet pose relative to the reference path.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FrenetPose {
    pub s: f64,
    pub d: f64,
    pub heading_diff: f64,
}

fn simpson_arclength(x: &CubicSpline1D, y: &CubicSpline1D, a: f64, b: f64) -> f64 {
    const PANELS: usize = 16;
    let h = (b - a) / PANELS as f64;
    let speed = |t: f64| x.derivatives(t)[1].hypot(y.derivatives(t)[1]);
    let mut acc = speed(a) + speed(b);
    for i in 1..PANELS {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * speed(a + i as f64 * h);
    }
    acc * h / 3.0
}

/// Fits a natural cubic spline through `points` and reparameterizes it by
/// arclength (chord-length fit, then refits on Simpson arclength until the
/// knot parameters settle).
pub fn fit_path(points: &[Point2]) -> Result<PathSpline2D> {
    if points.len() < 3 {
        return Err(PlanError::DegenerateInput(format!("path needs at least 3 points, got {}", points.len())));
    }
    if points.iter().any(|p| !p.is_finite()) {
        return Err(PlanError::DegenerateInput("non-finite path point".into()));
    }
    if let Some(i) = points.windows(2).position(|w| w[0].distance(w[1]) < 1e-9) {
        return Err(PlanError::DegenerateInput(format!("duplicate consecutive path points at index {i}")));
    }
    let xs: Vec<f64> = points.iter().map(|p| p.x).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.y).collect();

    let mut params = Vec::with_capacity(points.len());
    params.push(0.0);
    for w in points.windows(2) {
        params.push(params[params.len() - 1] + w[0].distance(w[1]));
    }
    let mut sx = CubicSpline1D::natural(&params, &xs)?;
    let mut sy = CubicSpline1D::natural(&params, &ys)?;

    for _ in 0..3 {
        let mut next = Vec::with_capacity(params.len());
        next.push(0.0);
        for w in params.windows(2) {
            next.push(next[next.len() - 1] + simpson_arclength(&sx, &sy, w[0], w[1]));
        }
        let change = next.iter().zip(&params).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        params = next;
        sx = CubicSpline1D::natural(&params, &xs)?;
        sy = CubicSpline1D::natural(&params, &ys)?;
        if change < 1e-12 * params[params.len() - 1].max(1.0) {
            break;
        }
    }
    Ok(PathSpline2D::from_splines(sx, sy, points.to_vec()))
}

impl PathSpline2D {
    fn from_splines(x: CubicSpline1D, y: CubicSpline1D, knots: Vec<Point2>) -> Self {
        let length = x.domain().1;
        let count = (length / PROJECTION_SAMPLE_SPACING).ceil().max(1.0) as usize;
        let samples = (0..=count)
            .map(|i| {
                let s = length * i as f64 / count as f64;
                (s, Point2::new(x.eval(s), y.eval(s)))
            })
            .collect();
        Self { x, y, knots, samples }
    }

    pub fn length(&self) -> f64 {
        self.x.domain().1
    }

    pub fn knots(&self) -> &[Point2] {
        &self.knots
    }

    /// Arclength parameter of each knot.
    pub fn knot_params(&self) -> &[f64] {
        self.x.knots()
    }

    pub fn x_spline(&self) -> &CubicSpline1D {
        &self.x
    }

    pub fn y_spline(&self) -> &CubicSpline1D {
        &self.y
    }

    /// Position at `s`, linearly extended past the ends.
    pub fn position(&self, s: f64) -> Point2 {
        Point2::new(self.x.eval(s), self.y.eval(s))
    }

    /// `[gamma, gamma', gamma'', gamma''']` at `s`.
    pub fn derivatives(&self, s: f64) -> [Point2; 4] {
        let dx = self.x.derivatives(s);
        let dy = self.y.derivatives(s);
        [0, 1, 2, 3].map(|i| Point2::new(dx[i], dy[i]))
    }

    pub fn unit_tangent(&self, s: f64) -> Point2 {
        let t = self.derivatives(s)[1];
        t * (1.0 / t.norm())
    }

    pub fn unit_normal(&self, s: f64) -> Point2 {
        let t = self.unit_tangent(s);
        Point2::new(-t.y, t.x)
    }

    pub fn tangent_angle(&self, s: f64) -> f64 {
        let t = self.derivatives(s)[1];
        t.y.atan2(t.x)
    }

    fn check_domain(&self, s: f64) -> Result<()> {
        let l = self.length();
        if !(0.0..=l).contains(&s) {
            return Err(PlanError::Domain { value: s, lo: 0.0, hi: l });
        }
        Ok(())
    }

    /// Signed curvature `x'y'' - x''y'` on `[0, L]`.
    pub fn curvature(&self, s: f64) -> Result<f64> {
        self.check_domain(s)?;
        Ok(self.curvature_extended(s))
    }

    /// Curvature without the domain check (zero on the linear extensions).
    pub fn curvature_extended(&self, s: f64) -> f64 {
        self.curvature_derivatives(s)[0]
    }

    /// `[kappa, dkappa/ds, d2kappa/ds2]` from the arclength formula.
    pub fn curvature_derivatives(&self, s: f64) -> [f64; 3] {
        let [_, d1, d2, d3] = self.derivatives(s);
        [d1.cross(d2), d1.cross(d3), d2.cross(d3)]
    }

    /// Projects a Cartesian point onto the path.
    pub fn project(&self, p: Point2) -> Result<PathProjection> {
        self.project_within(p, DEFAULT_CAPTURE_RADIUS)
    }

    pub fn project_within(&self, p: Point2, capture_radius: f64) -> Result<PathProjection> {
        if !p.is_finite() {
            return Err(PlanError::NoProjection(format!("non-finite point {p:?}")));
        }
        let dist2: Vec<f64> = self.samples.iter().map(|(_, q)| (*q - p).dot(*q - p)).collect();
        let n = dist2.len();
        let mut seeds: Vec<usize> = (0..n)
            .filter(|&i| (i == 0 || dist2[i] <= dist2[i - 1]) && (i + 1 == n || dist2[i] <= dist2[i + 1]))
            .collect();
        seeds.sort_by(|&a, &b| dist2[a].total_cmp(&dist2[b]));
        seeds.truncate(PROJECTION_MAX_SEEDS);

        let length = self.length();
        let mut best: Option<(f64, PathProjection)> = None;
        for &i in &seeds {
            let s0 = self.samples[i].0;
            let lo = (s0 - PROJECTION_SAMPLE_SPACING).max(0.0);
            let hi = (s0 + PROJECTION_SAMPLE_SPACING).min(length);
            let s = self.newton_foot(p, s0, lo, hi);
            let candidate = self.classify_foot(p, s);
            let foot = self.position(candidate.s);
            let dist = foot.distance(p);
            if best.as_ref().is_none_or(|(bd, _)| dist < *bd) {
                best = Some((dist, candidate));
            }
        }
        let (dist, proj) = best.ok_or_else(|| PlanError::NoProjection("no projection seeds".into()))?;
        if dist > capture_radius {
            return Err(PlanError::NoProjection(format!(
                "point {p:?} is {dist:.3} m from the path (capture radius {capture_radius} m)"
            )));
        }
        Ok(proj)
    }

    /// Safeguarded Newton on the derivative of the squared distance.
    fn newton_foot(&self, p: Point2, s0: f64, lo: f64, hi: f64) -> f64 {
        let mut s = s0;
        for _ in 0..PROJECTION_MAX_ITERATIONS {
            let [g, d1, d2, _] = self.derivatives(s);
            let r = g - p;
            let grad = r.dot(d1);
            let hess = d1.dot(d1) + r.dot(d2);
            let step = if hess > 1e-12 { -grad / hess } else { -grad.signum() * 0.25 * (hi - lo) };
            let next = (s + step).clamp(lo, hi);
            if (next - s).abs() < PROJECTION_TOLERANCE {
                s = next;
                break;
            }
            s = next;
        }
        s
    }

    /// Turns a foot parameter into `(s, d)`, moving onto the linear
    /// extension when the point lies beyond an end of the path.
    fn classify_foot(&self, p: Point2, s: f64) -> PathProjection {
        let length = self.length();
        let at_end = |e: f64| (s - e).abs() < 1e-9;
        let tangent = self.unit_tangent(s);
        let along = (p - self.position(s)).dot(tangent);
        let (s, extrapolated) = if at_end(0.0) && along < 0.0 {
            (along, true)
        } else if at_end(length) && along > 0.0 {
            (length + along, true)
        } else {
            (s, false)
        };
        let foot = self.position(s);
        let d = self.unit_tangent(s).cross(p - foot);
        PathProjection { s, d, extrapolated }
    }

    /// Cartesian point and heading from a Frenet pose on `[0, L]`.
    pub fn frenet_to_cartesian(&self, pose: FrenetPose) -> Result<(Point2, f64)> {
        self.check_domain(pose.s)?;
        Ok(self.frenet_to_cartesian_extended(pose))
    }

    pub fn frenet_to_cartesian_extended(&self, pose: FrenetPose) -> (Point2, f64) {
        let p = self.position(pose.s) + self.unit_normal(pose.s) * pose.d;
        (p, wrap_angle(self.tangent_angle(pose.s) + pose.heading_diff))
    }
}

/// Frenet pose of a Cartesian point and heading.
pub fn project_to_frenet(path: &PathSpline2D, p: Point2, heading: f64) -> Result<FrenetPose> {
    let proj = path.project(p)?;
    Ok(FrenetPose {
        s: proj.s,
        d: proj.d,
        heading_diff: wrap_angle(heading - path.tangent_angle(proj.s)),
    })
}

pub fn frenet_to_cartesian(path: &PathSpline2D, pose: FrenetPose) -> Result<(Point2, f64)> {
    path.frenet_to_cartesian(pose)
}

/// Lateral deviation `d(s)` of a lane boundary (or a speed limit `v(s)`),
/// as a natural cubic spline over arclength.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundarySpline1D {
    spline: CubicSpline1D,
}

impl BoundarySpline1D {
    /// Fits through `(s, d)` knots; knots are sorted and near-duplicates in
    /// `s` are averaged.
    pub fn fit(knots: &[Point2]) -> Result<Self> {
        let mut sorted = knots.to_vec();
        sorted.sort_by(|a, b| a.x.total_cmp(&b.x));
        let mut merged: Vec<(f64, f64, usize)> = Vec::with_capacity(sorted.len());
        for p in sorted {
            match merged.last_mut() {
                Some((s, d, n)) if (p.x - *s / *n as f64).abs() < 1e-6 => {
                    *s += p.x;
                    *d += p.y;
                    *n += 1;
                }
                _ => merged.push((p.x, p.y, 1)),
            }
        }
        let s: Vec<f64> = merged.iter().map(|&(s, _, n)| s / n as f64).collect();
        let d: Vec<f64> = merged.iter().map(|&(_, d, n)| d / n as f64).collect();
        Ok(Self { spline: CubicSpline1D::natural(&s, &d)? })
    }

    /// Constant deviation over `[s0, s1]`.
    pub fn constant(s0: f64, s1: f64, d: f64) -> Self {
        Self::fit(&[Point2::new(s0, d), Point2::new(s1, d)]).expect("valid constant spline")
    }

    pub fn domain(&self) -> (f64, f64) {
        self.spline.domain()
    }

    pub fn eval(&self, s: f64) -> f64 {
        self.spline.eval(s)
    }

    /// `[d, d', d'']` at `s`.
    pub fn eval3(&self, s: f64) -> [f64; 3] {
        let [v, d1, d2, _] = self.spline.derivatives(s);
        [v, d1, d2]
    }

    pub fn spline(&self) -> &CubicSpline1D {
        &self.spline
    }

    /// Knots as `(s, d)` points.
    pub fn knots(&self) -> Vec<Point2> {
        self.spline
            .knots()
            .iter()
            .zip(self.spline.values())
            .map(|(&s, &d)| Point2::new(s, d))
            .collect()
    }
}

/// Projects Cartesian boundary points onto `path` and fits `d(s)`.
pub fn boundary_from_points(path: &PathSpline2D, points: &[Point2]) -> Result<BoundarySpline1D> {
    let mut knots = Vec::with_capacity(points.len());
    for &p in points {
        let proj = path.project(p)?;
        knots.push(Point2::new(proj.s, proj.d));
    }
    BoundarySpline1D::fit(&knots)
}

/// A curve in the Frenet `(s, d)` plane given as a graph `d = f(s)`.
pub trait LaneCurve {
    /// `[f, f', f'']` at `s`.
    fn offset(&self, s: f64) -> [f64; 3];
}

/// The reference path itself: `d = 0`.
#[derive(Debug, Clone, Copy, Default)]
pub struct ReferenceLine;

impl LaneCurve for ReferenceLine {
    fn offset(&self, _s: f64) -> [f64; 3] {
        [0.0; 3]
    }
}

impl LaneCurve for BoundarySpline1D {
    fn offset(&self, s: f64) -> [f64; 3] {
        self.eval3(s)
    }
}

fn curve_frame(curve: &dyn LaneCurve, s: f64) -> (Point2, Point2) {
    let [f, df, _] = curve.offset(s);
    let norm = (1.0 + df * df).sqrt();
    (Point2::new(s, f), Point2::new(-df / norm, 1.0 / norm))
}

/// Re-expresses `(s, d)` points measured along `from` as `(s', d')`
/// measured along `to`: `s'` is the foot parameter on `to` and `d'` the
/// signed normal distance (positive to the left).
pub fn local_projection(from: &dyn LaneCurve, to: &dyn LaneCurve, points: &[Point2]) -> Result<Vec<Point2>> {
    points.iter().map(|&p| local_project_point(from, to, p)).collect()
}

pub fn local_project_point(from: &dyn LaneCurve, to: &dyn LaneCurve, p: Point2) -> Result<Point2> {
    let (origin, normal) = curve_frame(from, p.x);
    let q = origin + normal * p.y;
    let (lo, hi) = (q.x - LOCAL_PROJECTION_WINDOW, q.x + LOCAL_PROJECTION_WINDOW);
    let mut tau = q.x;
    for _ in 0..PROJECTION_MAX_ITERATIONS * 2 {
        let [g, dg, ddg] = to.offset(tau);
        let grad = -(q.x - tau) - (q.y - g) * dg;
        let hess = 1.0 + dg * dg - (q.y - g) * ddg;
        let step = if hess > 1e-9 { -grad / hess } else { -grad.signum() * 0.5 };
        let next = (tau + step).clamp(lo, hi);
        if (next - tau).abs() < PROJECTION_TOLERANCE {
            if (next - lo).abs() < 1e-12 || (next - hi).abs() < 1e-12 {
                return Err(PlanError::Domain { value: next, lo, hi });
            }
            // The last step is below tolerance, so a first-order update of
            // the evaluated frame stands in for a fresh evaluation.
            let h = next - tau;
            let (f, df) = (g + dg * h, dg + ddg * h);
            let norm = (1.0 + df * df).sqrt();
            let n = Point2::new(-df / norm, 1.0 / norm);
            return Ok(Point2::new(next, (q - Point2::new(next, f)).dot(n)));
        }
        tau = next;
    }
    Err(PlanError::Domain { value: tau, lo, hi })
}
