//! Nearest-edge selection and time-indexed in-lane obstacle protrusions.
//!
//! Pipeline per obstacle: hull and refine the Cartesian footprint, move it
//! into the Frenet frame, predict a single anchor point with the motion
//! model and rebuild the footprint from polar offsets at every step, then
//! clip each step's footprint at the nearest lane edge.

use serde::{Deserialize, Serialize};

use crate::dynamics::{predict_anchor, AnchorPose, ObstacleMotionModel};
use crate::error::{PlanError, Result};
use crate::geometry::{
    clip_half_plane, convex_hull, inflate_degenerate, polygon_centroid, refine_polygon, HalfPlane, KeepSide, Point2,
};
use crate::splines::{local_project_point, local_projection, wrap_angle, BoundarySpline1D, LaneCurve, PathSpline2D, ReferenceLine};

/// Lane edge an obstacle is attached to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Right,
    Left,
}

impl Side {
    /// `-1` for right-aligned, `+1` for left-aligned.
    pub fn eta(self) -> i8 {
        match self {
            Side::Right => -1,
            Side::Left => 1,
        }
    }

    /// Side of the edge that lies inside the lane.
    pub fn in_lane(self) -> KeepSide {
        match self {
            Side::Right => KeepSide::Above,
            Side::Left => KeepSide::Below,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Obstacle {
    /// Unordered Cartesian footprint points.
    pub footprint: Vec<Point2>,
    /// Cartesian heading of the motion [rad].
    #[serde(default)]
    pub heading: f64,
    pub motion: ObstacleMotionModel,
    #[serde(default)]
    pub safety_margin: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectionConfig {
    /// Maximum spacing between refined footprint points [m].
    pub refine_spacing: f64,
    pub capture_radius: f64,
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        Self { refine_spacing: 0.25, capture_radius: crate::splines::DEFAULT_CAPTURE_RADIUS }
    }
}

/// In-lane protrusions of one obstacle over the prediction horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct ProtrusionSet {
    pub side: Side,
    /// `P_sd(k)` for `k = 0..=N`; empty when the obstacle is out of the lane.
    pub polygons: Vec<Vec<Point2>>,
    /// Predicted footprint `O_sd(k)` before clipping.
    pub footprints: Vec<Vec<Point2>>,
    pub anchors: Vec<AnchorPose>,
    /// `(r_i, theta_i)` of every refined footprint point about the anchor.
    pub polar: Vec<(f64, f64)>,
    pub safety_margin: f64,
}

impl ProtrusionSet {
    pub fn steps(&self) -> usize {
        self.polygons.len().saturating_sub(1)
    }

    pub fn eta(&self) -> i8 {
        self.side.eta()
    }
}

fn edge_curve<'a>(side: Side, right: &'a BoundarySpline1D, left: &'a BoundarySpline1D) -> &'a dyn LaneCurve {
    match side {
        Side::Right => right,
        Side::Left => left,
    }
}

/// Picks the edge to attach an obstacle to from its `k = 0` Frenet
/// footprint. Right wins ties.
pub fn nearest_edge(obstacle_sd: &[Point2], right: &BoundarySpline1D, left: &BoundarySpline1D) -> Result<Side> {
    if obstacle_sd.is_empty() {
        return Err(PlanError::DegenerateInput("empty obstacle footprint".into()));
    }
    let on_left = local_projection(&ReferenceLine, left, obstacle_sd)?;
    let on_right = local_projection(&ReferenceLine, right, obstacle_sd)?;
    let d_l = on_left.iter().map(|p| p.y).fold(f64::NEG_INFINITY, f64::max);
    let d_r = on_right.iter().map(|p| p.y).fold(f64::INFINITY, f64::min);
    Ok(nearest_edge_from_extents(d_r, d_l))
}

/// The edge predicate on the extreme lateral offsets relative to the
/// right (`d_r`) and left (`d_l`) edges.
pub fn nearest_edge_from_extents(d_r: f64, d_l: f64) -> Side {
    if (d_r <= 0.0 && d_l <= 0.0) || d_r <= -d_l {
        Side::Right
    } else {
        Side::Left
    }
}

/// Refined footprint hull in the Frenet frame.
pub fn footprint_to_frenet(obstacle: &Obstacle, path: &PathSpline2D, config: &ProjectionConfig) -> Result<Vec<Point2>> {
    if obstacle.footprint.is_empty() {
        return Err(PlanError::DegenerateInput("obstacle footprint is empty".into()));
    }
    let hull = convex_hull(&inflate_degenerate(&obstacle.footprint))?;
    let refined = refine_polygon(&hull, config.refine_spacing);
    refined
        .into_iter()
        .map(|p| {
            let proj = path.project_within(p, config.capture_radius)?;
            Ok(Point2::new(proj.s, proj.d))
        })
        .collect()
}

/// Full protrusion pipeline for one obstacle over `steps` prediction steps
/// of length `dt`.
pub fn project_obstacle(
    obstacle: &Obstacle,
    path: &PathSpline2D,
    right: &BoundarySpline1D,
    left: &BoundarySpline1D,
    dt: f64,
    steps: usize,
    config: &ProjectionConfig,
) -> Result<ProtrusionSet> {
    let o_sd0 = footprint_to_frenet(obstacle, path, config)?;

    let centroid = polygon_centroid(&o_sd0);
    let theta0 = wrap_angle(obstacle.heading - path.tangent_angle(centroid.x.clamp(0.0, path.length())));
    let anchor = AnchorPose { s: centroid.x, d: centroid.y, theta: theta0 };
    let polar: Vec<(f64, f64)> = o_sd0
        .iter()
        .map(|p| {
            let rel = *p - centroid;
            (rel.norm(), rel.y.atan2(rel.x) - theta0)
        })
        .collect();
    // Body-frame offsets, so each step is a single rotation.
    let body: Vec<Point2> = polar.iter().map(|&(r, th)| Point2::new(r * th.cos(), r * th.sin())).collect();
    let anchors = predict_anchor(&obstacle.motion, anchor, dt, steps);

    let footprints: Vec<Vec<Point2>> = anchors
        .iter()
        .enumerate()
        .map(|(k, a)| {
            if k == 0 {
                return o_sd0.clone();
            }
            let (sin, cos) = a.theta.sin_cos();
            body.iter().map(|b| Point2::new(a.s + b.x * cos - b.y * sin, a.d + b.x * sin + b.y * cos)).collect()
        })
        .collect();

    let side = nearest_edge(&o_sd0, right, left)?;
    let edge = edge_curve(side, right, left);
    let keep = HalfPlane::horizontal(0.0, side.in_lane());

    let mut polygons = Vec::with_capacity(footprints.len());
    for fp in &footprints {
        let on_edge = local_projection(&ReferenceLine, edge, fp)?;
        let clipped = clip_half_plane(&on_edge, keep);
        // Kept vertices are bitwise copies, so only crossings need the
        // inverse projection.
        let mut polygon = Vec::with_capacity(clipped.len());
        let mut cursor = 0;
        for q in clipped {
            match (0..on_edge.len()).map(|i| (cursor + i) % on_edge.len()).find(|&i| on_edge[i] == q) {
                Some(i) => {
                    cursor = i;
                    polygon.push(fp[i]);
                }
                None => polygon.push(local_project_point(edge, &ReferenceLine, q)?),
            }
        }
        polygons.push(polygon);
    }

    Ok(ProtrusionSet {
        side,
        polygons,
        footprints,
        anchors,
        polar,
        safety_margin: obstacle.safety_margin.max(0.0),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::signed_area;
    use crate::splines::fit_path;

    fn straight_road() -> (PathSpline2D, BoundarySpline1D, BoundarySpline1D) {
        let pts: Vec<Point2> = (0..=60).map(|i| Point2::new(i as f64, 0.0)).collect();
        (
            fit_path(&pts).unwrap(),
            BoundarySpline1D::constant(0.0, 60.0, -2.0),
            BoundarySpline1D::constant(0.0, 60.0, 2.0),
        )
    }

    fn box_at(cx: f64, cy: f64, len: f64, wid: f64) -> Vec<Point2> {
        vec![
            Point2::new(cx - len / 2.0, cy - wid / 2.0),
            Point2::new(cx + len / 2.0, cy - wid / 2.0),
            Point2::new(cx + len / 2.0, cy + wid / 2.0),
            Point2::new(cx - len / 2.0, cy + wid / 2.0),
        ]
    }

    #[test]
    fn edge_predicate_cases() {
        // Centered 1 m from the right edge, 3 m from the left edge.
        assert_eq!(nearest_edge_from_extents(1.0, -3.0), Side::Right);
        // Touching the left edge.
        assert_eq!(nearest_edge_from_extents(3.0, 0.0), Side::Left);
        // Symmetric mid-lane: inclusive comparison picks right.
        assert_eq!(nearest_edge_from_extents(1.5, -1.5), Side::Right);
        assert_eq!(nearest_edge_from_extents(-0.5, -0.5), Side::Right);
    }

    #[test]
    fn nearest_edge_from_footprints() {
        let (_, right, left) = straight_road();
        let near_right = box_at(10.0, -1.0, 0.2, 0.2);
        assert_eq!(nearest_edge(&near_right, &right, &left).unwrap(), Side::Right);
        let touching_left = box_at(10.0, 1.8, 0.4, 0.4);
        assert_eq!(nearest_edge(&touching_left, &right, &left).unwrap(), Side::Left);
        let centred = box_at(10.0, 0.0, 1.0, 1.0);
        assert_eq!(nearest_edge(&centred, &right, &left).unwrap(), Side::Right);
    }

    #[test]
    fn static_obstacle_straddling_right_edge() {
        let (path, right, left) = straight_road();
        let obstacle = Obstacle {
            footprint: box_at(20.0, -2.0, 2.0, 2.0),
            heading: 0.0,
            motion: ObstacleMotionModel::constant_velocity(0.0),
            safety_margin: 0.2,
        };
        let set = project_obstacle(&obstacle, &path, &right, &left, 0.14, 2, &ProjectionConfig::default()).unwrap();
        assert_eq!(set.side, Side::Right);
        assert_eq!(set.polygons.len(), 3);
        for poly in &set.polygons {
            assert!((signed_area(poly) - 2.0).abs() < 1e-9);
            assert!(poly.iter().all(|p| p.y >= -2.0 - 1e-9));
        }
        for (a, b) in set.polygons[0].iter().zip(&set.polygons[2]) {
            assert!(a.distance(*b) < 1e-9);
        }
    }

    #[test]
    fn obstacle_outside_lane_has_no_protrusion() {
        let (path, right, left) = straight_road();
        let obstacle = Obstacle {
            footprint: box_at(20.0, -4.0, 2.0, 1.0),
            heading: 0.0,
            motion: ObstacleMotionModel::constant_velocity(1.0),
            safety_margin: 0.0,
        };
        let set = project_obstacle(&obstacle, &path, &right, &left, 0.1, 10, &ProjectionConfig::default()).unwrap();
        assert!(set.polygons.iter().all(Vec::is_empty));
    }

    #[test]
    fn reconstruction_is_rigid() {
        let (path, right, left) = straight_road();
        let obstacle = Obstacle {
            footprint: box_at(15.0, -1.5, 4.0, 1.8),
            heading: 0.3,
            motion: ObstacleMotionModel::cca(3.0, 0.1, 0.5),
            safety_margin: 0.0,
        };
        let set = project_obstacle(&obstacle, &path, &right, &left, 0.1, 20, &ProjectionConfig::default()).unwrap();
        let base = &set.footprints[0];
        for fp in &set.footprints {
            for i in 0..base.len() {
                for j in (i + 1)..base.len() {
                    let d0 = base[i].distance(base[j]);
                    assert!((fp[i].distance(fp[j]) - d0).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn unprojectable_footprint_errors() {
        let (path, right, left) = straight_road();
        let obstacle = Obstacle {
            footprint: box_at(20.0, 200.0, 1.0, 1.0),
            heading: 0.0,
            motion: ObstacleMotionModel::constant_velocity(0.0),
            safety_margin: 0.0,
        };
        let err = project_obstacle(&obstacle, &path, &right, &left, 0.1, 2, &ProjectionConfig::default());
        assert!(matches!(err, Err(PlanError::NoProjection(_))));
    }
}
