//! Time-indexed driving corridor: augmented lane boundaries, homotopy
//! blending, blockade detection and the stop-aware speed limit.

use serde::{Deserialize, Serialize};

use crate::dynamics::ControlBounds;
use crate::error::{PlanError, Result};
use crate::geometry::{monotone_chains, signed_area, Point2};
use crate::projection::{ProtrusionSet, Side};
use crate::splines::BoundarySpline1D;

/// Ego footprint relative to the rear-axle reference point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EgoGeometry {
    pub width: f64,
    pub front: f64,
    pub back: f64,
}

impl Default for EgoGeometry {
    fn default() -> Self {
        Self { width: 1.8, front: 3.6, back: 1.0 }
    }
}

impl EgoGeometry {
    pub fn is_valid(&self) -> bool {
        self.width > 0.0 && self.front > 0.0 && self.back > 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorridorParams {
    pub ego: EgoGeometry,
    /// Minimum tunnel width before a blockade is declared [m].
    pub omega_min: f64,
    /// Length of the ramp joining an envelope to the base boundary [m].
    pub edge_ramp: f64,
    /// Sampling step of the dilated contours [m].
    pub dilation_spacing: f64,
    /// Bracketing step of the blockade scan [m].
    pub scan_step: f64,
    /// Step of the backtracking search for the anticipatory stop [m].
    pub backtrack_step: f64,
    pub road_speed: f64,
    pub controls: ControlBounds,
    pub lateral_accel_limit: f64,
    pub homotopy_z: usize,
}

impl Default for CorridorParams {
    fn default() -> Self {
        Self {
            ego: EgoGeometry::default(),
            omega_min: 0.05,
            edge_ramp: 1.0,
            dilation_spacing: 0.25,
            scan_step: 0.1,
            backtrack_step: 0.05,
            road_speed: 8.0,
            controls: ControlBounds::default(),
            lateral_accel_limit: 4.0,
            homotopy_z: 20,
        }
    }
}

/// Linear homotopy schedule `zeta_i = (i - 1) / (Z - 1)`; a single step is
/// the full problem.
pub fn homotopy_schedule(z: usize) -> Vec<f64> {
    match z {
        0 | 1 => vec![1.0],
        _ => (0..z).map(|i| i as f64 / (z - 1) as f64).collect(),
    }
}

/// Shape-preserving piecewise cubic Hermite interpolant.
#[derive(Debug, Clone, PartialEq)]
pub struct MonotoneCubic {
    x: Vec<f64>,
    y: Vec<f64>,
    m: Vec<f64>,
}

impl MonotoneCubic {
    /// Knots must be sorted with strictly increasing `x`.
    pub fn new(points: &[Point2]) -> Result<Self> {
        let n = points.len();
        if n < 2 {
            return Err(PlanError::DegenerateInput("monotone cubic needs two knots".into()));
        }
        if points.windows(2).any(|w| !(w[1].x > w[0].x)) {
            return Err(PlanError::DegenerateInput("knots not strictly increasing".into()));
        }
        let x: Vec<f64> = points.iter().map(|p| p.x).collect();
        let y: Vec<f64> = points.iter().map(|p| p.y).collect();
        let h: Vec<f64> = x.windows(2).map(|w| w[1] - w[0]).collect();
        let delta: Vec<f64> = (0..n - 1).map(|i| (y[i + 1] - y[i]) / h[i]).collect();
        let mut m = vec![0.0; n];
        for i in 1..n - 1 {
            let (d0, d1) = (delta[i - 1], delta[i]);
            if d0 * d1 > 0.0 {
                let w1 = 2.0 * h[i] + h[i - 1];
                let w2 = h[i] + 2.0 * h[i - 1];
                m[i] = (w1 + w2) / (w1 / d0 + w2 / d1);
            }
        }
        m[0] = end_slope(h.first().copied(), h.get(1).copied(), delta[0], delta.get(1).copied());
        m[n - 1] = end_slope(
            h.last().copied(),
            h.len().checked_sub(2).map(|i| h[i]),
            delta[n - 2],
            n.checked_sub(3).map(|i| delta[i]),
        );
        Ok(Self { x, y, m })
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.x[0], self.x[self.x.len() - 1])
    }

    pub fn contains(&self, s: f64) -> bool {
        let (a, b) = self.domain();
        s >= a && s <= b
    }

    pub fn knots(&self) -> Vec<Point2> {
        self.x.iter().zip(&self.y).map(|(&x, &y)| Point2::new(x, y)).collect()
    }

    /// `[f, f', f'']`, clamped to the end values outside the domain.
    pub fn eval3(&self, s: f64) -> [f64; 3] {
        let n = self.x.len();
        if s <= self.x[0] {
            return [self.y[0], 0.0, 0.0];
        }
        if s >= self.x[n - 1] {
            return [self.y[n - 1], 0.0, 0.0];
        }
        let i = self.x.partition_point(|&x| x <= s).clamp(1, n - 1) - 1;
        let h = self.x[i + 1] - self.x[i];
        let t = (s - self.x[i]) / h;
        let (y0, y1, m0, m1) = (self.y[i], self.y[i + 1], self.m[i] * h, self.m[i + 1] * h);
        let (t2, t3) = (t * t, t * t * t);
        let f = (2.0 * t3 - 3.0 * t2 + 1.0) * y0 + (t3 - 2.0 * t2 + t) * m0 + (-2.0 * t3 + 3.0 * t2) * y1 + (t3 - t2) * m1;
        let df = ((6.0 * t2 - 6.0 * t) * y0 + (3.0 * t2 - 4.0 * t + 1.0) * m0 + (6.0 * t - 6.0 * t2) * y1
            + (3.0 * t2 - 2.0 * t) * m1)
            / h;
        let ddf = ((12.0 * t - 6.0) * y0 + (6.0 * t - 4.0) * m0 + (6.0 - 12.0 * t) * y1 + (6.0 * t - 2.0) * m1) / (h * h);
        [f, df, ddf]
    }

    pub fn eval(&self, s: f64) -> f64 {
        self.eval3(s)[0]
    }
}

fn end_slope(h0: Option<f64>, h1: Option<f64>, d0: f64, d1: Option<f64>) -> f64 {
    let (Some(h0), Some(h1), Some(d1)) = (h0, h1, d1) else {
        return d0;
    };
    let m = ((2.0 * h0 + h1) * d0 - h0 * d1) / (h0 + h1);
    if m * d0 <= 0.0 {
        0.0
    } else if d0 * d1 <= 0.0 && m.abs() > 3.0 * d0.abs() {
        3.0 * d0
    } else {
        m
    }
}

/// The lane-interior face of a protrusion polygon as a polyline sorted by
/// `s`: the upper chain for right-aligned obstacles, the lower chain for
/// left-aligned ones.
pub fn complementary_contour(polygon: &[Point2], side: Side) -> Vec<Point2> {
    if polygon.len() < 3 {
        return Vec::new();
    }
    let mut ring = polygon.to_vec();
    if signed_area(&ring) < 0.0 {
        ring.reverse();
    }
    let (lower, upper) = monotone_chains(&ring);
    match side {
        Side::Right => upper,
        Side::Left => lower,
    }
}

/// Maximum (right) or minimum (left) of a piecewise-linear contour over
/// `[lo, hi]`, `None` if the window misses the contour.
fn window_extreme(contour: &[Point2], lo: f64, hi: f64, side: Side) -> Option<f64> {
    let (a, b) = (contour[0].x, contour[contour.len() - 1].x);
    let (lo, hi) = (lo.max(a), hi.min(b));
    if lo > hi {
        return None;
    }
    let pick = |u: f64, v: f64| match side {
        Side::Right => u.max(v),
        Side::Left => u.min(v),
    };
    let mut best = pick(polyline_value(contour, lo), polyline_value(contour, hi));
    for p in contour.iter().filter(|p| p.x > lo && p.x < hi) {
        best = pick(best, p.y);
    }
    Some(best)
}

fn polyline_value(pts: &[Point2], x: f64) -> f64 {
    let n = pts.len();
    if x <= pts[0].x {
        return pts[0].y;
    }
    if x >= pts[n - 1].x {
        return pts[n - 1].y;
    }
    let i = pts.partition_point(|p| p.x <= x).clamp(1, n - 1);
    let (p, q) = (pts[i - 1], pts[i]);
    if q.x - p.x <= 0.0 {
        return q.y.max(p.y);
    }
    p.y + (q.y - p.y) * (x - p.x) / (q.x - p.x)
}

/// Inflates a contour by `margin + w/2` toward the lane interior and
/// dilates it by `l_f` before and `l_b` after the obstacle (plus the
/// margin), returning sampled `(s, level)` points.
pub fn inflate_contour(contour: &[Point2], side: Side, ego: &EgoGeometry, margin: f64, spacing: f64) -> Vec<Point2> {
    if contour.is_empty() {
        return Vec::new();
    }
    let ahead = ego.front + margin;
    let behind = ego.back + margin;
    let lateral = match side {
        Side::Right => margin + 0.5 * ego.width,
        Side::Left => -(margin + 0.5 * ego.width),
    };
    let start = contour[0].x - ahead;
    let end = contour[contour.len() - 1].x + behind;
    let count = ((end - start) / spacing).ceil().max(1.0) as usize;
    let mut xs: Vec<f64> = (0..=count).map(|i| start + (end - start) * i as f64 / count as f64).collect();
    for p in contour {
        xs.push(p.x - ahead);
        xs.push(p.x + behind);
    }
    xs.sort_by(f64::total_cmp);
    xs.dedup_by(|a, b| (*a - *b).abs() < 1e-9);
    xs.into_iter()
        .filter_map(|s| window_extreme(contour, s - behind, s + ahead, side).map(|v| Point2::new(s, v + lateral)))
        .collect()
}

/// Upper (right side) or lower (left side) convex hull of a point set,
/// sorted by `s`.
fn outer_hull(points: &[Point2], side: Side) -> Vec<Point2> {
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)));
    let mut hull: Vec<Point2> = Vec::with_capacity(pts.len());
    for p in pts {
        // Drop points sharing an abscissa with a better one.
        if let Some(last) = hull.last() {
            if (p.x - last.x).abs() < 1e-9 {
                let better = match side {
                    Side::Right => p.y > last.y,
                    Side::Left => p.y < last.y,
                };
                if better {
                    hull.pop();
                } else {
                    continue;
                }
            }
        }
        while hull.len() >= 2 {
            let (a, b) = (hull[hull.len() - 2], hull[hull.len() - 1]);
            let turn = (b - a).cross(p - a);
            let concave = match side {
                Side::Right => turn >= 0.0,
                Side::Left => turn <= 0.0,
            };
            if concave {
                hull.pop();
            } else {
                break;
            }
        }
        hull.push(p);
    }
    hull
}

/// Merges inflated contours whose extents overlap or are separated by less
/// than `min_gap`, bridging them with their outer convex hull.
pub fn merge_contours(mut contours: Vec<Vec<Point2>>, side: Side, min_gap: f64) -> Vec<Vec<Point2>> {
    contours.retain(|c| !c.is_empty());
    contours.sort_by(|a, b| a[0].x.total_cmp(&b[0].x));
    let mut merged: Vec<Vec<Point2>> = Vec::with_capacity(contours.len());
    for c in contours {
        match merged.last_mut() {
            Some(last) if c[0].x - last[last.len() - 1].x < min_gap => {
                let mut union = std::mem::take(last);
                union.extend(c);
                *last = outer_hull(&union, side);
            }
            _ => merged.push(c),
        }
    }
    merged
}

/// Adds ramps back to the base boundary at both ends and fits the
/// envelope.
fn envelope_from_contour(contour: &[Point2], base: &BoundarySpline1D, ramp: f64) -> Result<MonotoneCubic> {
    let first = contour[0].x - ramp;
    let last = contour[contour.len() - 1].x + ramp;
    let mut knots = Vec::with_capacity(contour.len() + 2);
    knots.push(Point2::new(first, base.eval(first)));
    knots.extend_from_slice(contour);
    knots.push(Point2::new(last, base.eval(last)));
    knots.dedup_by(|a, b| (a.x - b.x).abs() < 1e-9);
    MonotoneCubic::new(&knots)
}

/// Augmented boundary envelopes per prediction step, for one side.
pub type Envelopes = Vec<Vec<MonotoneCubic>>;

/// Builds the per-step envelopes of the right and left boundaries.
pub fn augment_boundaries(
    protrusions: &[ProtrusionSet],
    right: &BoundarySpline1D,
    left: &BoundarySpline1D,
    steps: usize,
    params: &CorridorParams,
) -> Result<(Envelopes, Envelopes)> {
    let ego = &params.ego;
    let mut out_right = Vec::with_capacity(steps + 1);
    let mut out_left = Vec::with_capacity(steps + 1);
    for k in 0..=steps {
        for (side, base, out) in [(Side::Right, right, &mut out_right), (Side::Left, left, &mut out_left)] {
            let contours: Vec<Vec<Point2>> = protrusions
                .iter()
                .filter(|p| p.side == side)
                .filter_map(|p| {
                    let poly = p.polygons.get(k.min(p.steps()))?;
                    let contour = complementary_contour(poly, side);
                    (contour.len() >= 2)
                        .then(|| inflate_contour(&contour, side, ego, p.safety_margin, params.dilation_spacing))
                })
                .collect();
            let envelopes = merge_contours(contours, side, ego.width)
                .iter()
                .map(|c| envelope_from_contour(c, base, params.edge_ramp))
                .collect::<Result<Vec<_>>>()?;
            out.push(envelopes);
        }
    }
    Ok((out_right, out_left))
}

/// Blockade location: `s_h = L` when the corridor stays open.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Blockade {
    pub s_h: f64,
    /// Earliest step at which the corridor closes.
    pub k_h: Option<usize>,
    /// Step whose geometry attains `s_h`.
    pub k_at_s_h: Option<usize>,
}

impl Blockade {
    pub fn is_blocked(&self) -> bool {
        self.k_h.is_some()
    }
}

/// Piecewise speed limit: constant, linear ramp to zero, zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpeedProfile {
    pub road_speed: f64,
    pub v0: f64,
    pub s_decl: f64,
    pub s_stop: f64,
}

impl SpeedProfile {
    pub fn new(s_stop: f64, road_speed: f64, controls: &ControlBounds) -> Self {
        let decel = controls.u2_min.abs().max(1e-6);
        let braking = road_speed * road_speed / (2.0 * decel);
        let s_stop = s_stop.max(0.0);
        if s_stop >= braking {
            Self { road_speed, v0: road_speed, s_decl: s_stop - braking, s_stop }
        } else {
            Self { road_speed, v0: (2.0 * decel * s_stop).sqrt(), s_decl: 0.0, s_stop }
        }
    }

    /// `[v, dv/ds]` of the augmented limit.
    pub fn eval2(&self, s: f64) -> [f64; 2] {
        if s < self.s_decl {
            [self.v0, 0.0]
        } else if s <= self.s_stop && self.s_stop > self.s_decl {
            let slope = -self.v0 / (self.s_stop - self.s_decl);
            [self.v0 + slope * (s - self.s_decl), slope]
        } else {
            [0.0, 0.0]
        }
    }

    pub fn eval(&self, s: f64) -> f64 {
        self.eval2(s)[0]
    }

    /// Homotopy blend with the road limit: `[v, dv/ds]`.
    pub fn blend(&self, s: f64, zeta: f64) -> [f64; 2] {
        let [v, dv] = self.eval2(s);
        [(1.0 - zeta) * self.road_speed + zeta * v, zeta * dv]
    }
}

/// Corridor constraint values at one `(s, k, zeta)`, with derivatives
/// in `s`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstraintEvaluation {
    pub d_lo: [f64; 3],
    pub d_hi: [f64; 3],
    pub v_hi: [f64; 2],
    pub s_stop: f64,
    pub lateral_accel_limit: f64,
    pub controls: ControlBounds,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corridor {
    pub right: BoundarySpline1D,
    pub left: BoundarySpline1D,
    envelopes_right: Envelopes,
    envelopes_left: Envelopes,
    pub length: f64,
    pub schedule: Vec<f64>,
    pub blockade: Blockade,
    pub s_stop: f64,
    pub speed: SpeedProfile,
    pub params: CorridorParams,
}

impl Corridor {
    /// Assembles the corridor for a local road of length `length` and a
    /// horizon of `steps` prediction steps.
    pub fn build(
        right: BoundarySpline1D,
        left: BoundarySpline1D,
        length: f64,
        steps: usize,
        protrusions: &[ProtrusionSet],
        params: CorridorParams,
    ) -> Result<Self> {
        if !params.ego.is_valid() {
            return Err(PlanError::DegenerateInput("ego dimensions must be positive".into()));
        }
        if !(length > 0.0) {
            return Err(PlanError::DegenerateInput("corridor length must be positive".into()));
        }
        let (envelopes_right, envelopes_left) = augment_boundaries(protrusions, &right, &left, steps, &params)?;
        let mut corridor = Self {
            right,
            left,
            envelopes_right,
            envelopes_left,
            length,
            schedule: homotopy_schedule(params.homotopy_z),
            blockade: Blockade { s_h: length, k_h: None, k_at_s_h: None },
            s_stop: length,
            speed: SpeedProfile::new(length, params.road_speed, &params.controls),
            params,
        };
        corridor.blockade = detect_blockade(&corridor, params.omega_min);
        if corridor.blockade.is_blocked() {
            corridor.s_stop = anticipatory_stop(&corridor, &corridor.blockade);
        }
        corridor.speed = SpeedProfile::new(corridor.s_stop, params.road_speed, &params.controls);
        Ok(corridor)
    }

    pub fn steps(&self) -> usize {
        self.envelopes_right.len().saturating_sub(1)
    }

    pub fn envelopes(&self, side: Side, k: usize) -> &[MonotoneCubic] {
        let all = match side {
            Side::Right => &self.envelopes_right,
            Side::Left => &self.envelopes_left,
        };
        all.get(k.min(all.len().saturating_sub(1))).map_or(&[], Vec::as_slice)
    }

    pub fn base(&self, side: Side) -> &BoundarySpline1D {
        match side {
            Side::Right => &self.right,
            Side::Left => &self.left,
        }
    }

    /// Augmented boundary `[d, d', d'']` at `(s, k)`.
    pub fn augmented(&self, side: Side, s: f64, k: usize) -> [f64; 3] {
        let mut best = self.base(side).eval3(s);
        for env in self.envelopes(side, k).iter().filter(|e| e.contains(s)) {
            let cand = env.eval3(s);
            let tighter = match side {
                Side::Right => cand[0] > best[0],
                Side::Left => cand[0] < best[0],
            };
            if tighter {
                best = cand;
            }
        }
        best
    }

    /// Blended lower and upper lateral bounds `[d, d', d'']`.
    pub fn blend3(&self, s: f64, k: usize, zeta: f64) -> ([f64; 3], [f64; 3]) {
        let mix = |base: [f64; 3], aug: [f64; 3]| std::array::from_fn(|i| (1.0 - zeta) * base[i] + zeta * aug[i]);
        (
            mix(self.right.eval3(s), self.augmented(Side::Right, s, k)),
            mix(self.left.eval3(s), self.augmented(Side::Left, s, k)),
        )
    }

    pub fn blend(&self, s: f64, k: usize, zeta: f64) -> (f64, f64) {
        let (lo, hi) = self.blend3(s, k, zeta);
        (lo[0], hi[0])
    }

    pub fn tunnel_width(&self, s: f64, k: usize) -> f64 {
        self.augmented(Side::Left, s, k)[0] - self.augmented(Side::Right, s, k)[0]
    }

    fn tunnel_width2(&self, s: f64, k: usize) -> [f64; 2] {
        let l = self.augmented(Side::Left, s, k);
        let r = self.augmented(Side::Right, s, k);
        [l[0] - r[0], l[1] - r[1]]
    }

    pub fn blend_speed(&self, s: f64, zeta: f64) -> f64 {
        self.speed.blend(s, zeta)[0]
    }

    pub fn evaluate(&self, s: f64, k: usize, zeta: f64) -> ConstraintEvaluation {
        let (d_lo, d_hi) = self.blend3(s, k, zeta);
        ConstraintEvaluation {
            d_lo,
            d_hi,
            v_hi: self.speed.blend(s, zeta),
            s_stop: self.s_stop,
            lateral_accel_limit: self.params.lateral_accel_limit,
            controls: self.params.controls,
        }
    }

    /// `s`-intervals over which step `k` differs from the base road.
    pub fn envelope_extents(&self, k: usize) -> Vec<(f64, f64)> {
        let mut ext: Vec<(f64, f64)> = [Side::Right, Side::Left]
            .iter()
            .flat_map(|&side| self.envelopes(side, k).iter().map(MonotoneCubic::domain))
            .collect();
        ext.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut merged: Vec<(f64, f64)> = Vec::with_capacity(ext.len());
        for (a, b) in ext {
            match merged.last_mut() {
                Some(last) if a <= last.1 => last.1 = last.1.max(b),
                _ => merged.push((a, b)),
            }
        }
        merged
    }
}

/// Smallest `s` in `[lo, hi]` with `g(s) <= 0`, bracketed on a `step` grid
/// and refined by safeguarded Newton iterations. A dip narrower than `step`
/// is caught through the sign change of `g'` at its minimum.
fn first_root(g: impl Fn(f64) -> [f64; 2], lo: f64, hi: f64, step: f64) -> Option<f64> {
    if lo > hi {
        return None;
    }
    if g(lo)[0] <= 0.0 {
        return Some(lo);
    }
    let count = ((hi - lo) / step).ceil().max(1.0) as usize;
    let mut prev = lo;
    let mut prev_slope = g(lo)[1];
    for i in 1..=count {
        let s = if i == count { hi } else { lo + step * i as f64 };
        let [v, slope] = g(s);
        if v <= 0.0 {
            return Some(refine_root(&g, prev, s));
        }
        if prev_slope < 0.0 && slope > 0.0 {
            let m = interior_minimum(&g, prev, s);
            if g(m)[0] <= 0.0 {
                return Some(refine_root(&g, prev, m));
            }
        }
        prev = s;
        prev_slope = slope;
    }
    None
}

/// Bisects `g' = 0` given `g'(a) < 0 < g'(b)`.
fn interior_minimum(g: &impl Fn(f64) -> [f64; 2], mut a: f64, mut b: f64) -> f64 {
    for _ in 0..60 {
        if b - a < 1e-10 {
            break;
        }
        let m = 0.5 * (a + b);
        if g(m)[1] < 0.0 {
            a = m;
        } else {
            b = m;
        }
    }
    0.5 * (a + b)
}

/// Refines a sign change with `g(a) > 0 >= g(b)`; returns a point with
/// `g <= 0`.
fn refine_root(g: &impl Fn(f64) -> [f64; 2], mut a: f64, mut b: f64) -> f64 {
    let mut x = 0.5 * (a + b);
    for _ in 0..100 {
        if b - a < 1e-10 {
            break;
        }
        let [v, dv] = g(x);
        if v <= 0.0 {
            b = x;
        } else {
            a = x;
        }
        let newton = if dv != 0.0 { x - v / dv } else { f64::NAN };
        x = if newton > a && newton < b { newton } else { 0.5 * (a + b) };
    }
    b
}

/// Scans the full-homotopy tunnel width for the first point at which it
/// drops to `omega_min`.
pub fn detect_blockade(corridor: &Corridor, omega_min: f64) -> Blockade {
    let length = corridor.length;
    let step = corridor.params.scan_step;
    let base_width = |s: f64| {
        let (l, r) = (corridor.left.eval3(s), corridor.right.eval3(s));
        [l[0] - r[0] - omega_min, l[1] - r[1]]
    };
    let base_hit = first_root(base_width, 0.0, length, step);

    let mut result = Blockade { s_h: length, k_h: None, k_at_s_h: None };
    for k in 0..=corridor.steps() {
        let width = |s: f64| {
            let [w, dw] = corridor.tunnel_width2(s, k);
            [w - omega_min, dw]
        };
        let mut hit = base_hit;
        for (a, b) in corridor.envelope_extents(k) {
            let (a, b) = (a.max(0.0), b.min(length));
            if hit.is_some_and(|h| h <= a) {
                break;
            }
            if let Some(s) = first_root(&width, a, b, step) {
                hit = Some(hit.map_or(s, |h: f64| h.min(s)));
                break;
            }
        }
        if let Some(s) = hit {
            result.k_h.get_or_insert(k);
            if s < result.s_h || result.k_at_s_h.is_none() {
                result.s_h = s;
                result.k_at_s_h = Some(k);
            }
        }
    }
    result
}

/// Backtracks from the blockade along the boundary that crosses the
/// reference line nearest to `s_h`, returning the crossing.
pub fn anticipatory_stop(corridor: &Corridor, blockade: &Blockade) -> f64 {
    let Some(k) = blockade.k_at_s_h else {
        return corridor.length;
    };
    let s_h = blockade.s_h.min(corridor.length);
    let step = corridor.params.backtrack_step;
    let mut best: Option<f64> = None;
    for side in [Side::Right, Side::Left] {
        // Signed distance past the reference line toward the lane interior
        // of the opposite edge; positive means the boundary has crossed.
        let past = |s: f64| {
            let b = corridor.augmented(side, s, k);
            match side {
                Side::Right => [b[0], b[1]],
                Side::Left => [-b[0], -b[1]],
            }
        };
        if past(s_h)[0] <= 0.0 {
            continue;
        }
        let mut s = s_h;
        let crossing = loop {
            let next = (s - step).max(0.0);
            if past(next)[0] <= 0.0 {
                let flipped = |x: f64| {
                    let [v, dv] = past(x);
                    [-v, -dv]
                };
                // `flipped` is positive at `next` and non-positive at `s`,
                // so refine for the last point still on the correct side.
                break Some(refine_crossing(&flipped, next, s));
            }
            if next <= 0.0 {
                break None;
            }
            s = next;
        };
        let crossing = crossing.unwrap_or(0.0);
        best = Some(best.map_or(crossing, |b: f64| b.max(crossing)));
    }
    best.unwrap_or(s_h).min(s_h)
}

/// Like [`refine_root`] for `g(a) >= 0 > g(b)`, returning a point with
/// `g >= 0` (the last point before the crossing).
fn refine_crossing(g: &impl Fn(f64) -> [f64; 2], mut a: f64, mut b: f64) -> f64 {
    for _ in 0..100 {
        if b - a < 1e-10 {
            break;
        }
        let x = 0.5 * (a + b);
        if g(x)[0] >= 0.0 {
            a = x;
        } else {
            b = x;
        }
    }
    a
}
