//! Planar geometry kernel: convex hulls, boundary refinement and clipping.
//!
//! Points are plain `(x, y)` pairs. In the Frenet frame `x` holds the
//! arclength `s` and `y` the lateral offset `d`.

use std::cmp::Ordering;
use std::ops::{Add, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{PlanError, Result};

/// Side length of the square that replaces 1- and 2-point footprints.
pub const DEGENERATE_FOOTPRINT_SIDE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dot(self, other: Self) -> f64 {
        self.x * other.x + self.y * other.y
    }

    /// z-component of the 3D cross product.
    pub fn cross(self, other: Self) -> f64 {
        self.x * other.y - self.y * other.x
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn distance(self, other: Self) -> f64 {
        (self - other).norm()
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    pub fn lerp(self, other: Self, t: f64) -> Self {
        self + (other - self) * t
    }
}

impl Add for Point2 {
    type Output = Self;
    fn add(self, rhs: Self) -> Self {
        Self::new(self.x + rhs.x, self.y + rhs.y)
    }
}

impl Sub for Point2 {
    type Output = Self;
    fn sub(self, rhs: Self) -> Self {
        Self::new(self.x - rhs.x, self.y - rhs.y)
    }
}

impl Mul<f64> for Point2 {
    type Output = Self;
    fn mul(self, rhs: f64) -> Self {
        Self::new(self.x * rhs, self.y * rhs)
    }
}

impl Neg for Point2 {
    type Output = Self;
    fn neg(self) -> Self {
        Self::new(-self.x, -self.y)
    }
}

impl From<(f64, f64)> for Point2 {
    fn from((x, y): (f64, f64)) -> Self {
        Self::new(x, y)
    }
}

/// Orientation of `c` relative to the directed line `a -> b`.
fn orient(a: Point2, b: Point2, c: Point2) -> f64 {
    (b - a).cross(c - a)
}

/// Strictly convex, counter-clockwise polygon.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvexPolygon {
    vertices: Vec<Point2>,
}

impl ConvexPolygon {
    /// Builds the hull of `points`; see [`convex_hull`].
    pub fn from_points(points: &[Point2]) -> Result<Self> {
        convex_hull(points)
    }

    pub fn vertices(&self) -> &[Point2] {
        &self.vertices
    }

    pub fn into_vertices(self) -> Vec<Point2> {
        self.vertices
    }

    pub fn area(&self) -> f64 {
        signed_area(&self.vertices)
    }

    pub fn perimeter(&self) -> f64 {
        ring_edges(&self.vertices).map(|(a, b)| a.distance(b)).sum()
    }

    pub fn centroid(&self) -> Point2 {
        polygon_centroid(&self.vertices)
    }

    /// Inclusive point membership.
    pub fn contains(&self, p: Point2) -> bool {
        ring_edges(&self.vertices).all(|(a, b)| orient(a, b, p) >= -1e-12)
    }

    /// Separating-axis overlap test between two convex polygons.
    pub fn intersects(&self, other: &ConvexPolygon) -> bool {
        convex_rings_intersect(&self.vertices, &other.vertices)
    }
}

pub(crate) fn ring_edges(ring: &[Point2]) -> impl Iterator<Item = (Point2, Point2)> + '_ {
    let n = ring.len();
    (0..n).map(move |i| (ring[i], ring[(i + 1) % n]))
}

/// Shoelace area; positive for counter-clockwise rings.
pub fn signed_area(ring: &[Point2]) -> f64 {
    if ring.len() < 3 {
        return 0.0;
    }
    0.5 * ring_edges(ring).map(|(a, b)| a.cross(b)).sum::<f64>()
}

/// Area centroid of a simple polygon; falls back to the vertex mean for
/// zero-area rings.
pub fn polygon_centroid(ring: &[Point2]) -> Point2 {
    let area = signed_area(ring);
    if area.abs() < 1e-14 {
        let n = ring.len().max(1) as f64;
        let sum = ring.iter().fold(Point2::default(), |acc, &p| acc + p);
        return sum * (1.0 / n);
    }
    let (mut cx, mut cy) = (0.0, 0.0);
    for (a, b) in ring_edges(ring) {
        let w = a.cross(b);
        cx += (a.x + b.x) * w;
        cy += (a.y + b.y) * w;
    }
    Point2::new(cx / (6.0 * area), cy / (6.0 * area))
}

/// Convex rings in either orientation; touching counts as intersecting.
pub fn convex_rings_intersect(a: &[Point2], b: &[Point2]) -> bool {
    fn separated(a: &[Point2], b: &[Point2]) -> bool {
        ring_edges(a).any(|(p, q)| {
            let axis = Point2::new(-(q - p).y, (q - p).x);
            let (amin, amax) = project_extent(a, axis);
            let (bmin, bmax) = project_extent(b, axis);
            amax < bmin || bmax < amin
        })
    }
    fn project_extent(ring: &[Point2], axis: Point2) -> (f64, f64) {
        ring.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
            let v = p.dot(axis);
            (lo.min(v), hi.max(v))
        })
    }
    if a.is_empty() || b.is_empty() {
        return false;
    }
    !(separated(a, b) || separated(b, a))
}

/// Graham's scan. The anchor is the lowest-`y` (then lowest-`x`) point;
/// polar-angle ties are ordered by distance and collinear boundary points
/// are dropped so the result is strictly convex.
pub fn convex_hull(points: &[Point2]) -> Result<ConvexPolygon> {
    if let Some(p) = points.iter().find(|p| !p.is_finite()) {
        return Err(PlanError::DegenerateInput(format!("non-finite point {p:?}")));
    }
    let mut pts: Vec<Point2> = points.to_vec();
    pts.sort_by(|a, b| a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)));
    pts.dedup();
    if pts.len() < 3 {
        return Err(PlanError::DegenerateInput(format!(
            "convex hull needs 3 distinct points, got {}",
            pts.len()
        )));
    }

    let scale = pts
        .iter()
        .map(|p| p.x.abs().max(p.y.abs()))
        .fold(1.0_f64, f64::max);
    let eps = 1e-12 * scale * scale;

    let anchor_idx = pts
        .iter()
        .enumerate()
        .min_by(|(_, a), (_, b)| a.y.total_cmp(&b.y).then(a.x.total_cmp(&b.x)))
        .map(|(i, _)| i)
        .expect("non-empty");
    let anchor = pts.swap_remove(anchor_idx);

    pts.sort_by(|&a, &b| {
        let c = orient(anchor, a, b);
        if c > eps {
            Ordering::Less
        } else if c < -eps {
            Ordering::Greater
        } else {
            anchor.distance(a).total_cmp(&anchor.distance(b))
        }
    });

    let mut hull: Vec<Point2> = vec![anchor];
    for p in pts {
        while hull.len() >= 2 && orient(hull[hull.len() - 2], hull[hull.len() - 1], p) <= eps {
            hull.pop();
        }
        hull.push(p);
    }
    // Points collinear with the anchor on the closing edge.
    while hull.len() >= 3 && orient(hull[hull.len() - 2], hull[hull.len() - 1], anchor) <= eps {
        hull.pop();
    }

    if hull.len() < 3 {
        return Err(PlanError::DegenerateInput("all points collinear".into()));
    }
    Ok(ConvexPolygon { vertices: hull })
}

/// Replaces 1- and 2-point footprints by a small square around their mean.
pub fn inflate_degenerate(points: &[Point2]) -> Vec<Point2> {
    let mut distinct = points.to_vec();
    distinct.sort_by(|a, b| a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)));
    distinct.dedup();
    if distinct.len() >= 3 {
        return points.to_vec();
    }
    let c = polygon_centroid(&distinct);
    let h = 0.5 * DEGENERATE_FOOTPRINT_SIDE;
    let mut out = Vec::with_capacity(4 * distinct.len());
    for p in distinct.iter().chain(std::iter::once(&c)) {
        out.extend([
            Point2::new(p.x - h, p.y - h),
            Point2::new(p.x + h, p.y - h),
            Point2::new(p.x + h, p.y + h),
            Point2::new(p.x - h, p.y + h),
        ]);
    }
    out
}

/// Subdivides every edge so consecutive boundary points are at most
/// `max_spacing` apart. Original vertices are kept, in order.
pub fn refine_polygon(poly: &ConvexPolygon, max_spacing: f64) -> Vec<Point2> {
    refine_ring(poly.vertices(), max_spacing)
}

pub fn refine_ring(ring: &[Point2], max_spacing: f64) -> Vec<Point2> {
    assert!(max_spacing > 0.0, "max_spacing must be positive");
    let mut out = Vec::with_capacity(ring.len() * 2);
    for (a, b) in ring_edges(ring) {
        let pieces = (a.distance(b) / max_spacing).ceil().max(1.0) as usize;
        out.push(a);
        for j in 1..pieces {
            out.push(a.lerp(b, j as f64 / pieces as f64));
        }
    }
    out
}

/// Closed half-plane `{p : normal · p >= offset}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HalfPlane {
    pub normal: Point2,
    pub offset: f64,
}

impl HalfPlane {
    pub fn signed(&self, p: Point2) -> f64 {
        self.normal.dot(p) - self.offset
    }

    /// `{y >= level}` or `{y <= level}`.
    pub fn horizontal(level: f64, keep: KeepSide) -> Self {
        match keep {
            KeepSide::Above => Self { normal: Point2::new(0.0, 1.0), offset: level },
            KeepSide::Below => Self { normal: Point2::new(0.0, -1.0), offset: -level },
        }
    }
}

/// One Sutherland-Hodgman pass against a single half-plane.
pub fn clip_half_plane(ring: &[Point2], plane: HalfPlane) -> Vec<Point2> {
    let mut out = Vec::with_capacity(ring.len() + 2);
    for (cur, next) in ring_edges(ring) {
        let sc = plane.signed(cur);
        let sn = plane.signed(next);
        let cur_in = sc >= 0.0;
        let next_in = sn >= 0.0;
        if cur_in {
            out.push(cur);
        }
        if cur_in != next_in {
            let t = sc / (sc - sn);
            let mut p = cur.lerp(next, t);
            // Pin the crossing onto the line to keep the predicate exact.
            let r = plane.signed(p);
            let nn = plane.normal.dot(plane.normal);
            p = p - plane.normal * (r / nn);
            out.push(p);
        }
    }
    out.dedup_by(|a, b| a.distance(*b) < 1e-14);
    if out.len() >= 2 && out[0].distance(out[out.len() - 1]) < 1e-14 {
        out.pop();
    }
    if out.len() < 3 || signed_area(&out).abs() < 1e-14 {
        out.clear();
    }
    out
}

/// Which side of a boundary curve is kept by a clip.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum KeepSide {
    /// Keep `y >= boundary(x)` (right boundary: lane interior is to the left).
    Above,
    /// Keep `y <= boundary(x)`.
    Below,
}

impl KeepSide {
    pub fn holds(self, y: f64, bound: f64, tol: f64) -> bool {
        match self {
            KeepSide::Above => y >= bound - tol,
            KeepSide::Below => y <= bound + tol,
        }
    }
}

/// Piecewise-linear function through `pts` (sorted by `x`), constant
/// beyond the end points.
fn polyline_eval(pts: &[Point2], x: f64) -> f64 {
    let n = pts.len();
    if x <= pts[0].x {
        return pts[0].y;
    }
    if x >= pts[n - 1].x {
        return pts[n - 1].y;
    }
    let i = pts.partition_point(|p| p.x <= x).clamp(1, n - 1);
    let (a, b) = (pts[i - 1], pts[i]);
    if b.x - a.x <= 0.0 {
        return b.y;
    }
    a.y + (b.y - a.y) * (x - a.x) / (b.x - a.x)
}

/// Splits an `x`-monotone counter-clockwise ring into lower and upper
/// chains, both sorted by increasing `x`.
pub fn monotone_chains(ring: &[Point2]) -> (Vec<Point2>, Vec<Point2>) {
    let n = ring.len();
    let by = |better: fn(&Point2, &Point2) -> bool| {
        (0..n).fold(0, |best, i| if better(&ring[i], &ring[best]) { i } else { best })
    };
    let left_low = by(|a, b| a.x < b.x || (a.x == b.x && a.y < b.y));
    let right_low = by(|a, b| a.x > b.x || (a.x == b.x && a.y < b.y));
    let right_high = by(|a, b| a.x > b.x || (a.x == b.x && a.y > b.y));
    let left_high = by(|a, b| a.x < b.x || (a.x == b.x && a.y > b.y));

    let walk = |from: usize, to: usize| {
        let mut chain = vec![ring[from]];
        let mut i = from;
        while i != to {
            i = (i + 1) % n;
            chain.push(ring[i]);
        }
        chain
    };
    let lower = walk(left_low, right_low);
    let mut upper = walk(right_high, left_high);
    upper.reverse();
    (lower, upper)
}

/// Clips an `x`-monotone counter-clockwise polygon against the region
/// above (or below) a piecewise-linear boundary `y = b(x)`.
///
/// The boundary polyline is split into its segments; within each segment's
/// `x`-slab the clip is a single half-plane cut, so the result is exact.
/// Returns the kept pieces (usually zero or one; more when the boundary
/// pokes fully through the polygon).
pub fn clip_at_boundary(ring: &[Point2], boundary: &[Point2], keep: KeepSide) -> Vec<Vec<Point2>> {
    if ring.len() < 3 || boundary.is_empty() {
        return Vec::new();
    }
    let mut bnd = boundary.to_vec();
    bnd.sort_by(|a, b| a.x.total_cmp(&b.x));
    let (lower, upper) = monotone_chains(ring);
    let xmin = lower[0].x;
    let xmax = lower[lower.len() - 1].x;
    if xmax - xmin <= 0.0 {
        return Vec::new();
    }

    let mut xs: Vec<f64> = lower
        .iter()
        .chain(upper.iter())
        .map(|p| p.x)
        .chain(bnd.iter().map(|p| p.x).filter(|&x| x > xmin && x < xmax))
        .collect();
    xs.sort_by(f64::total_cmp);
    xs.dedup_by(|a, b| (*a - *b).abs() < 1e-12);

    let lo = |x: f64| polyline_eval(&lower, x);
    let hi = |x: f64| polyline_eval(&upper, x);
    let b = |x: f64| polyline_eval(&bnd, x);

    // Crossings of the boundary with either chain are breakpoints too.
    let mut all = Vec::with_capacity(xs.len() * 2);
    for w in xs.windows(2) {
        let (x0, x1) = (w[0], w[1]);
        all.push(x0);
        for chain in [&lo as &dyn Fn(f64) -> f64, &hi] {
            let f0 = b(x0) - chain(x0);
            let f1 = b(x1) - chain(x1);
            if f0 * f1 < 0.0 {
                let t = f0 / (f0 - f1);
                all.push(x0 + t * (x1 - x0));
            }
        }
    }
    all.push(*xs.last().expect("non-empty"));
    all.sort_by(f64::total_cmp);
    all.dedup_by(|a, b| (*a - *b).abs() < 1e-12);

    // Chain values at a crossing on a steep edge carry round-off amplified
    // by the slope, so the test is relative to the polygon's extent.
    let tol = 1e-10 * (1.0 + ring.iter().fold(0.0_f64, |m, p| m.max(p.y.abs())) + bnd.iter().fold(0.0_f64, |m, p| m.max(p.y.abs())));
    let mut pieces = Vec::new();
    let mut run: Vec<(f64, f64, f64)> = Vec::new(); // (x, bottom, top)
    let mut flush = |run: &mut Vec<(f64, f64, f64)>| {
        if run.len() >= 2 {
            let mut poly: Vec<Point2> = run.iter().map(|&(x, bot, _)| Point2::new(x, bot)).collect();
            poly.extend(run.iter().rev().map(|&(x, _, top)| Point2::new(x, top)));
            poly.dedup_by(|a, b| a.distance(*b) < 1e-13);
            if poly.len() >= 2 && poly[0].distance(poly[poly.len() - 1]) < 1e-13 {
                poly.pop();
            }
            if poly.len() >= 3 && signed_area(&poly).abs() > 1e-14 {
                pieces.push(poly);
            }
        }
        run.clear();
    };
    for &x in &all {
        let (l, h, bx) = (lo(x), hi(x), b(x));
        let (bot, top) = match keep {
            KeepSide::Above => (l.max(bx), h),
            KeepSide::Below => (l, h.min(bx)),
        };
        if bot <= top + tol {
            run.push((x, bot, top.max(bot)));
        } else {
            flush(&mut run);
        }
    }
    flush(&mut run);
    pieces
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pts(raw: &[(f64, f64)]) -> Vec<Point2> {
        raw.iter().map(|&p| p.into()).collect()
    }

    fn unit_square() -> ConvexPolygon {
        convex_hull(&pts(&[(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)])).unwrap()
    }

    #[test]
    fn hull_drops_interior_point() {
        let hull = convex_hull(&pts(&[(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0), (0.5, 0.5)])).unwrap();
        assert_eq!(hull.vertices(), pts(&[(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)]).as_slice());
    }

    #[test]
    fn hull_drops_collinear_midpoint() {
        let hull = convex_hull(&pts(&[(0.0, 0.0), (2.0, 0.0), (1.0, 1.0), (1.0, 0.0)])).unwrap();
        assert_eq!(hull.vertices(), pts(&[(0.0, 0.0), (2.0, 0.0), (1.0, 1.0)]).as_slice());
    }

    #[test]
    fn hull_rejects_degenerate_sets() {
        assert!(matches!(
            convex_hull(&pts(&[(0.0, 0.0), (1.0, 1.0), (2.0, 2.0), (3.0, 3.0)])),
            Err(PlanError::DegenerateInput(_))
        ));
        assert!(convex_hull(&pts(&[(0.0, 0.0), (0.0, 0.0), (1.0, 0.0)])).is_err());
        assert!(convex_hull(&pts(&[(0.0, 0.0), (f64::NAN, 0.0), (1.0, 1.0)])).is_err());
    }

    #[test]
    fn hull_closing_edge_collinear_points() {
        // (0,2) lies between (0,4) and the anchor on the closing edge.
        let hull = convex_hull(&pts(&[(0.0, 0.0), (4.0, 0.0), (0.0, 4.0), (0.0, 2.0), (2.0, 0.0)])).unwrap();
        assert_eq!(hull.vertices().len(), 3);
    }

    #[test]
    fn degenerate_footprint_becomes_square() {
        let single = inflate_degenerate(&pts(&[(3.0, 4.0)]));
        let hull = convex_hull(&single).unwrap();
        assert!((hull.area() - DEGENERATE_FOOTPRINT_SIDE.powi(2)).abs() < 1e-12);
        let pair = inflate_degenerate(&pts(&[(0.0, 0.0), (1.0, 0.0)]));
        assert!(convex_hull(&pair).is_ok());
    }

    #[test]
    fn refine_square_half_metre() {
        let refined = refine_polygon(&unit_square(), 0.5);
        assert_eq!(refined.len(), 8);
        assert_eq!(refined[0], Point2::new(0.0, 0.0));
        assert_eq!(refined[2], Point2::new(1.0, 0.0));
    }

    #[test]
    fn refine_square_coarse_keeps_vertices() {
        let refined = refine_polygon(&unit_square(), 2.0);
        assert_eq!(refined, unit_square().into_vertices());
    }

    #[test]
    fn refine_345_triangle() {
        let tri = convex_hull(&pts(&[(0.0, 0.0), (4.0, 0.0), (0.0, 3.0)])).unwrap();
        let refined = refine_ring(tri.vertices(), 1.0);
        assert_eq!(refined.len(), 12);
        for (a, b) in ring_edges(&refined) {
            assert!(a.distance(b) <= 1.0 + 1e-12);
        }
    }

    fn square_pm1() -> Vec<Point2> {
        pts(&[(0.0, -1.0), (2.0, -1.0), (2.0, 1.0), (0.0, 1.0)])
    }

    #[test]
    fn clip_constant_boundary_keeps_upper_half() {
        let boundary = pts(&[(-1.0, 0.0), (3.0, 0.0)]);
        let pieces = clip_at_boundary(&square_pm1(), &boundary, KeepSide::Above);
        assert_eq!(pieces.len(), 1);
        assert!((signed_area(&pieces[0]) - 2.0).abs() < 1e-12);
        assert!(pieces[0].iter().all(|p| p.y >= -1e-12));

        let sh = clip_half_plane(&square_pm1(), HalfPlane::horizontal(0.0, KeepSide::Above));
        assert!((signed_area(&sh) - 2.0).abs() < 1e-12);
        assert!(sh.iter().all(|p| p.y >= 0.0 && p.y <= 1.0));
    }

    #[test]
    fn clip_fully_outside_is_empty() {
        let boundary = pts(&[(-1.0, 5.0), (3.0, 5.0)]);
        assert!(clip_at_boundary(&square_pm1(), &boundary, KeepSide::Above).is_empty());
        assert!(clip_half_plane(&square_pm1(), HalfPlane::horizontal(5.0, KeepSide::Above)).is_empty());
    }

    #[test]
    fn clip_below_mirrors_above() {
        let boundary = pts(&[(-1.0, 0.25), (3.0, 0.25)]);
        let pieces = clip_at_boundary(&square_pm1(), &boundary, KeepSide::Below);
        assert!((signed_area(&pieces[0]) - 2.5).abs() < 1e-12);
    }

    #[test]
    fn clip_boundary_poking_through_splits() {
        // Tent boundary rising above the square in the middle.
        let boundary = pts(&[(0.0, 0.0), (1.0, 3.0), (2.0, 0.0)]);
        let pieces = clip_at_boundary(&square_pm1(), &boundary, KeepSide::Above);
        assert_eq!(pieces.len(), 2);
        for piece in &pieces {
            for p in piece {
                assert!(KeepSide::Above.holds(p.y, polyline_eval(&boundary, p.x), 1e-9));
            }
        }
    }

    #[test]
    fn sat_intersection() {
        let a = unit_square();
        let b = convex_hull(&pts(&[(0.5, 0.5), (2.0, 0.5), (2.0, 2.0)])).unwrap();
        let c = convex_hull(&pts(&[(1.5, 0.0), (3.0, 0.0), (3.0, 1.0)])).unwrap();
        assert!(a.intersects(&b));
        assert!(!a.intersects(&c));
    }
}
