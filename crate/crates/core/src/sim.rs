//! Scenario definition, closed-loop simulation and trace emission.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::corridor::{Corridor, CorridorParams, EgoGeometry};
use crate::dynamics::{step_cartesian, CartesianState, ControlBounds, EgoControl, EgoState, ObstacleMotionModel, ObstacleState};
use crate::error::{PlanError, Result};
use crate::geometry::{convex_hull, convex_rings_intersect, polygon_centroid, Point2};
use crate::mpc::{cartesian_to_state, Planner, PlannerConfig, PlanStatus, SafetyTolerances, ValidityThresholds, Variant};
use crate::ocp::{evaluate_constraints, ConstraintMargins, HorizonConfig, ObjectiveWeights, SqpOptions, NUM_FAMILIES};
use crate::projection::{project_obstacle, Obstacle, ProjectionConfig, Side};
use crate::splines::{boundary_from_points, fit_path, wrap_angle, BoundarySpline1D, FrenetPose, PathSpline2D};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoadSpec {
    /// Reference path points `[x, y]`.
    pub reference: Vec<[f64; 2]>,
    pub right: Vec<[f64; 2]>,
    pub left: Vec<[f64; 2]>,
    /// Road speed limit [m/s].
    pub speed_limit: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EgoSpec {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub speed: f64,
    #[serde(default)]
    pub kappa: f64,
    #[serde(default)]
    pub geometry: EgoGeometry,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObstacleSpec {
    pub footprint: Vec<[f64; 2]>,
    #[serde(default)]
    pub heading: f64,
    pub motion: ObstacleMotionModel,
    #[serde(default)]
    pub safety_margin: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LimitSpec {
    pub controls: ControlBounds,
    /// Lateral acceleration limit [m/s^2].
    pub lateral_accel: f64,
}

impl Default for LimitSpec {
    fn default() -> Self {
        Self { controls: ControlBounds::default(), lateral_accel: 4.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlannerSpec {
    pub variant: Option<Variant>,
    pub iteration_cap: usize,
    pub homotopy_z: usize,
    pub shift: usize,
    pub omega_min: f64,
    pub edge_ramp: f64,
}

impl Default for PlannerSpec {
    fn default() -> Self {
        let c = CorridorParams::default();
        Self { variant: None, iteration_cap: 30, homotopy_z: c.homotopy_z, shift: 1, omega_min: c.omega_min, edge_ramp: c.edge_ramp }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSpec {
    pub ticks: usize,
    /// Global arclength at which the run counts as completed. Defaults to
    /// 35 m before the end of the reference path.
    pub finish_s: Option<f64>,
    pub window_behind: f64,
    pub window_ahead: f64,
    /// Spacing of the re-extracted local path points [m].
    pub sample_spacing: f64,
    /// Speed below which a blocked ego counts as halted [m/s].
    pub halt_speed: f64,
    /// Obstacles whose bounding circle starts farther ahead than this [m]
    /// are unknown to the planner. `None` means perfect perception.
    pub sensing_range: Option<f64>,
}

impl Default for RunSpec {
    fn default() -> Self {
        Self { ticks: 600, finish_s: None, window_behind: 5.0, window_ahead: 60.0, sample_spacing: 1.0, halt_speed: 0.1, sensing_range: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub road: RoadSpec,
    pub ego: EgoSpec,
    #[serde(default)]
    pub obstacles: Vec<ObstacleSpec>,
    #[serde(default)]
    pub limits: LimitSpec,
    #[serde(default)]
    pub horizon: HorizonConfig,
    #[serde(default)]
    pub weights: ObjectiveWeights,
    #[serde(default)]
    pub margins: ConstraintMargins,
    #[serde(default)]
    pub validity: ValidityThresholds,
    #[serde(default)]
    pub planner: PlannerSpec,
    #[serde(default)]
    pub run: RunSpec,
}

fn points(raw: &[[f64; 2]]) -> Vec<Point2> {
    raw.iter().map(|p| Point2::new(p[0], p[1])).collect()
}

fn invalid(msg: impl Into<String>) -> PlanError {
    PlanError::Scenario(msg.into())
}

/// Reference path and global lane boundaries of a scenario.
#[derive(Debug, Clone)]
pub struct Road {
    pub path: PathSpline2D,
    pub right: BoundarySpline1D,
    pub left: BoundarySpline1D,
}

impl Scenario {
    pub fn from_toml(text: &str) -> Result<Self> {
        let scenario: Scenario = toml::from_str(text).map_err(|e| invalid(e.to_string()))?;
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    pub fn road(&self) -> Result<Road> {
        let scenario_err = |what: &str, e: PlanError| invalid(format!("{what}: {e}"));
        let path = fit_path(&points(&self.road.reference)).map_err(|e| scenario_err("reference path", e))?;
        let right = boundary_from_points(&path, &points(&self.road.right)).map_err(|e| scenario_err("right boundary", e))?;
        let left = boundary_from_points(&path, &points(&self.road.left)).map_err(|e| scenario_err("left boundary", e))?;
        Ok(Road { path, right, left })
    }

    pub fn corridor_params(&self) -> CorridorParams {
        CorridorParams {
            ego: self.ego.geometry,
            omega_min: self.planner.omega_min,
            edge_ramp: self.planner.edge_ramp,
            road_speed: self.road.speed_limit,
            controls: self.limits.controls,
            lateral_accel_limit: self.limits.lateral_accel,
            homotopy_z: self.planner.homotopy_z,
            ..CorridorParams::default()
        }
    }

    pub fn planner_config(&self) -> PlannerConfig {
        PlannerConfig {
            horizon: self.horizon,
            weights: self.weights,
            margins: self.margins,
            tolerances: SafetyTolerances::from_margins(&self.margins),
            validity: self.validity,
            sqp: SqpOptions { max_iterations: self.planner.iteration_cap, ..SqpOptions::default() },
            shift: self.planner.shift,
        }
    }

    pub fn initial_ego(&self) -> CartesianState {
        CartesianState { x: self.ego.x, y: self.ego.y, heading: self.ego.heading, kappa: self.ego.kappa, v: self.ego.speed }
    }

    pub fn finish_s(&self, road: &Road) -> f64 {
        self.run.finish_s.unwrap_or(road.path.length() - 35.0)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = |raw: &[[f64; 2]]| raw.iter().all(|p| p[0].is_finite() && p[1].is_finite());
        for (name, list) in [("reference", &self.road.reference), ("right", &self.road.right), ("left", &self.road.left)] {
            if list.len() < 3 {
                return Err(invalid(format!("road.{name} needs at least 3 points")));
            }
            if !finite(list) {
                return Err(invalid(format!("road.{name} has non-finite points")));
            }
        }
        if !(self.road.speed_limit > 0.0) {
            return Err(invalid("road.speed_limit must be positive"));
        }
        let ego = &self.ego;
        if ![ego.x, ego.y, ego.heading, ego.kappa, ego.speed].iter().all(|v| v.is_finite()) || ego.speed < 0.0 {
            return Err(invalid("ego pose must be finite with non-negative speed"));
        }
        if !ego.geometry.is_valid() {
            return Err(invalid("ego geometry must be positive"));
        }
        if !self.limits.controls.is_valid() || !(self.limits.lateral_accel > 0.0) {
            return Err(invalid("invalid control bounds or lateral acceleration limit"));
        }
        HorizonConfig::new(self.horizon.horizon, self.horizon.steps).map_err(|e| invalid(format!("horizon: {e}")))?;
        if !self.weights.is_valid() || !self.margins.is_valid() {
            return Err(invalid("weights and margins must be finite and non-negative"));
        }
        let p = &self.planner;
        if p.iteration_cap == 0 || p.homotopy_z == 0 || p.shift == 0 || p.shift >= self.horizon.steps {
            return Err(invalid("iteration_cap and homotopy_z must be positive, shift in [1, N)"));
        }
        if !(p.omega_min >= 0.0) || !(p.edge_ramp > 0.0) {
            return Err(invalid("omega_min must be non-negative and edge_ramp positive"));
        }
        let r = &self.run;
        if !(r.window_ahead > 0.0) || !(r.window_behind >= 0.0) || !(r.sample_spacing > 0.0) || !(r.halt_speed >= 0.0) || r.sensing_range.is_some_and(|d| !(d > 0.0)) {
            return Err(invalid("invalid run window"));
        }

        let road = self.road()?;
        let ego_proj = road
            .path
            .project_within(Point2::new(ego.x, ego.y), ProjectionConfig::default().capture_radius)
            .map_err(|e| invalid(format!("ego start: {e}")))?;
        let (lo, hi) = (road.right.eval(ego_proj.s), road.left.eval(ego_proj.s));
        if !(lo < ego_proj.d && ego_proj.d < hi) {
            return Err(invalid(format!("ego start d = {:.3} outside the lane [{lo:.3}, {hi:.3}]", ego_proj.d)));
        }
        let length = road.path.length();
        let mut s = 0.0;
        while s <= length {
            if !(road.right.eval(s) < road.left.eval(s)) {
                return Err(invalid(format!("right boundary not below left boundary at s = {s:.2}")));
            }
            s += 0.5;
        }
        let finish = self.finish_s(&road);
        if !(finish > ego_proj.s && finish <= length) {
            return Err(invalid(format!("finish_s = {finish:.2} must lie in ({:.2}, {length:.2}]", ego_proj.s)));
        }
        for (i, o) in self.obstacles.iter().enumerate() {
            if o.footprint.is_empty() || !finite(&o.footprint) || !o.heading.is_finite() {
                return Err(invalid(format!("obstacle {i}: footprint must be non-empty and finite")));
            }
            if !(o.safety_margin >= 0.0) || !(o.motion.speed >= 0.0) {
                return Err(invalid(format!("obstacle {i}: negative margin or speed")));
            }
            let c = polygon_centroid(&points(&o.footprint));
            road.path
                .project_within(c, ProjectionConfig::default().capture_radius)
                .map_err(|e| invalid(format!("obstacle {i} outside capture radius: {e}")))?;
        }
        Ok(())
    }
}

/// Run-time overrides, mostly from the command line.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RunOptions {
    pub ticks: Option<usize>,
    /// Recorded for provenance; the simulation itself draws no random
    /// numbers.
    pub seed: u64,
    pub iteration_cap: Option<usize>,
    pub homotopy_z: Option<usize>,
    pub record_snapshots: bool,
    pub record_plans: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Outcome {
    Completed,
    HaltedAtBlockade { s: f64, x: f64, y: f64, v: f64, s_stop: f64 },
    Failed { tick: usize, s: f64, x: f64, y: f64, reason: String },
}

impl Outcome {
    pub fn name(&self) -> &'static str {
        match self {
            Outcome::Completed => "completed",
            Outcome::HaltedAtBlockade { .. } => "halted_at_blockade",
            Outcome::Failed { .. } => "failed",
        }
    }

    pub fn is_failure(&self) -> bool {
        matches!(self, Outcome::Failed { .. })
    }
}

/// One simulated tick. `s`, `d` and `chi` refer to the global reference
/// path.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceRow {
    pub tick: usize,
    pub time: f64,
    pub u1: f64,
    pub u2: f64,
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub kappa: f64,
    pub v: f64,
    pub s: f64,
    pub d: f64,
    pub chi: f64,
    /// `None` on the failing tick.
    pub status: Option<PlanStatus>,
    pub zeta: f64,
    pub iterations: usize,
    pub blocked: bool,
    /// Anticipatory stop point on the global path.
    pub s_stop: f64,
    pub collision: bool,
    /// Largest residual per constraint family of the accepted plan.
    pub residuals: [f64; NUM_FAMILIES],
    /// Wall time of the tick; excluded from the trace file so that traces
    /// are reproducible.
    #[serde(skip)]
    pub solve_time: Duration,
}

/// Boundaries sampled along the local path at one tick, at `zeta = 0`
/// (base) and `zeta = 1` (augmented, current step).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConstraintSample {
    pub s: f64,
    pub right_base: f64,
    pub left_base: f64,
    pub right: f64,
    pub left: f64,
    pub right_xy: [f64; 2],
    pub left_xy: [f64; 2],
    pub v_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConstraintSnapshot {
    pub tick: usize,
    pub samples: Vec<ConstraintSample>,
}

/// Cartesian copy of an accepted plan.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlanPath {
    pub tick: usize,
    pub nodes: Vec<CartesianState>,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub scenario: String,
    pub variant: Variant,
    pub seed: u64,
    pub outcome: Outcome,
    pub trace: Vec<TraceRow>,
    pub snapshots: Vec<ConstraintSnapshot>,
    pub plans: Vec<PlanPath>,
    pub collision: bool,
    pub dt: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RunStats {
    pub ticks: usize,
    pub mean_ms: f64,
    pub max_ms: f64,
    pub mean_iterations: f64,
    pub min_speed: f64,
    pub fallback_ticks: usize,
}

impl RunResult {
    pub fn stats(&self) -> RunStats {
        let n = self.trace.len().max(1) as f64;
        let ms: Vec<f64> = self.trace.iter().map(|r| r.solve_time.as_secs_f64() * 1e3).collect();
        RunStats {
            ticks: self.trace.len(),
            mean_ms: ms.iter().sum::<f64>() / n,
            max_ms: ms.iter().copied().fold(0.0, f64::max),
            mean_iterations: self.trace.iter().map(|r| r.iterations as f64).sum::<f64>() / n,
            min_speed: self.trace.iter().map(|r| r.v).fold(f64::INFINITY, f64::min),
            fallback_ticks: self
                .trace
                .iter()
                .filter(|r| matches!(r.status, Some(PlanStatus::StopFallback | PlanStatus::SensitivityShifted | PlanStatus::Recovered | PlanStatus::HomotopyPartial)))
                .count(),
        }
    }
}

/// Obstacle with its body-frame footprint and current planar state.
#[derive(Debug, Clone)]
struct MovingObstacle {
    body: Vec<Point2>,
    state: ObstacleState,
    heading0: f64,
    motion: ObstacleMotionModel,
    margin: f64,
}

impl MovingObstacle {
    fn new(spec: &ObstacleSpec) -> Result<Self> {
        let hull = convex_hull(&crate::geometry::inflate_degenerate(&points(&spec.footprint)))?;
        let c = hull.centroid();
        let body = hull.vertices().iter().map(|p| *p - c).collect();
        Ok(Self {
            body,
            state: ObstacleState { x: c.x, y: c.y, heading: spec.heading, speed: spec.motion.speed },
            heading0: spec.heading,
            motion: spec.motion,
            margin: spec.safety_margin,
        })
    }

    fn footprint(&self) -> Vec<Point2> {
        let (sin, cos) = (self.state.heading - self.heading0).sin_cos();
        self.body
            .iter()
            .map(|p| Point2::new(self.state.x + cos * p.x - sin * p.y, self.state.y + sin * p.x + cos * p.y))
            .collect()
    }

    fn radius(&self) -> f64 {
        self.body.iter().map(|p| p.norm()).fold(0.0, f64::max)
    }

    fn as_obstacle(&self) -> Obstacle {
        Obstacle {
            footprint: self.footprint(),
            heading: self.state.heading,
            motion: ObstacleMotionModel { speed: self.state.speed, ..self.motion },
            safety_margin: self.margin,
        }
    }

    fn advance(&mut self, dt: f64) {
        self.state = self.motion.step(self.state, dt);
    }
}

/// Corners of the ego body rectangle.
pub fn ego_rectangle(state: &CartesianState, geometry: &EgoGeometry) -> [Point2; 4] {
    let (sin, cos) = state.heading.sin_cos();
    let at = |lon: f64, lat: f64| Point2::new(state.x + cos * lon - sin * lat, state.y + sin * lon + cos * lat);
    let half = 0.5 * geometry.width;
    [at(-geometry.back, -half), at(geometry.front, -half), at(geometry.front, half), at(-geometry.back, half)]
}

/// Local road window re-extracted around the ego.
pub struct LocalRoad {
    pub path: PathSpline2D,
    pub right: BoundarySpline1D,
    pub left: BoundarySpline1D,
    /// Global arclength of the local origin.
    pub s_offset: f64,
}

pub fn extract_local_road(road: &Road, s_ego: f64, run: &RunSpec) -> Result<LocalRoad> {
    let length = road.path.length();
    let start = (s_ego - run.window_behind).clamp(0.0, length);
    let end = (s_ego + run.window_ahead).clamp(0.0, length);
    let n = (((end - start) / run.sample_spacing).ceil() as usize).max(2);
    let samples: Vec<f64> = (0..=n).map(|i| start + (end - start) * i as f64 / n as f64).collect();
    let pts: Vec<Point2> = samples.iter().map(|&s| road.path.position(s)).collect();
    let path = fit_path(&pts)?;
    let edge = |b: &BoundarySpline1D| -> Result<BoundarySpline1D> {
        let cart: Vec<Point2> = samples
            .iter()
            .map(|&s| road.path.frenet_to_cartesian_extended(FrenetPose { s, d: b.eval(s), heading_diff: 0.0 }).0)
            .collect();
        boundary_from_points(&path, &cart)
    };
    Ok(LocalRoad { right: edge(&road.right)?, left: edge(&road.left)?, s_offset: start, path })
}

/// Inputs of one planning tick, rebuilt from the current world state.
pub struct TickInputs {
    pub tick: usize,
    /// Ego state relative to the global reference path.
    pub global: EgoState,
    pub local: LocalRoad,
    /// Ego state in the local frame.
    pub x0: EgoState,
    pub corridor: Corridor,
}

/// Closed-loop simulation advanced one tick at a time.
pub struct Simulation {
    scenario: Scenario,
    road: Road,
    params: CorridorParams,
    obstacles: Vec<MovingObstacle>,
    ego: CartesianState,
    planner: Planner,
    tick: usize,
    ticks: usize,
    finish: f64,
    options: RunOptions,
    result: RunResult,
    done: bool,
}

impl Simulation {
    pub fn new(scenario: &Scenario, variant: Variant, options: &RunOptions) -> Result<Self> {
        let mut scenario = scenario.clone();
        if let Some(cap) = options.iteration_cap {
            scenario.planner.iteration_cap = cap;
        }
        if let Some(z) = options.homotopy_z {
            scenario.planner.homotopy_z = z;
        }
        scenario.validate()?;
        let road = scenario.road()?;
        let config = scenario.planner_config();
        let obstacles = scenario.obstacles.iter().map(MovingObstacle::new).collect::<Result<Vec<_>>>()?;
        let result = RunResult {
            scenario: scenario.name.clone(),
            variant,
            seed: options.seed,
            outcome: Outcome::Completed,
            trace: Vec::new(),
            snapshots: Vec::new(),
            plans: Vec::new(),
            collision: false,
            dt: config.horizon.dt(),
        };
        Ok(Self {
            params: scenario.corridor_params(),
            finish: scenario.finish_s(&road),
            ticks: options.ticks.unwrap_or(scenario.run.ticks),
            ego: scenario.initial_ego(),
            planner: Planner::new(variant, config),
            obstacles,
            road,
            tick: 0,
            options: *options,
            result,
            done: false,
            scenario,
        })
    }

    pub fn ego(&self) -> CartesianState {
        self.ego
    }

    pub fn tick(&self) -> usize {
        self.tick
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn road(&self) -> &Road {
        &self.road
    }

    pub fn planner(&self) -> &Planner {
        &self.planner
    }

    /// Current obstacle footprints.
    pub fn obstacle_footprints(&self) -> Vec<Vec<Point2>> {
        self.obstacles.iter().map(MovingObstacle::footprint).collect()
    }

    /// Re-extracts the local road and builds the corridor around the ego.
    pub fn prepare(&self) -> Result<TickInputs> {
        let config = &self.planner.config;
        let (dt, steps) = (config.horizon.dt(), config.horizon.steps);
        let projection = ProjectionConfig::default();
        let back = self.scenario.ego.geometry.back;
        let global = cartesian_to_state(&self.ego, &self.road.path)?;
        let local = extract_local_road(&self.road, global.s, &self.scenario.run)?;
        let x0 = cartesian_to_state(&self.ego, &local.path)?;
        let ahead = local.path.length();
        let mut protrusions = Vec::new();
        for o in &self.obstacles {
            let c = Point2::new(o.state.x, o.state.y);
            let Ok(proj) = self.road.path.project_within(c, projection.capture_radius) else {
                continue;
            };
            let r = o.radius();
            let rel = proj.s - local.s_offset;
            let visible = self.scenario.run.sensing_range.map_or(ahead, |range| (x0.s + range).min(ahead));
            if rel + r < x0.s - back - 1.0 || rel - r > visible {
                continue;
            }
            protrusions.push(project_obstacle(&o.as_obstacle(), &local.path, &local.right, &local.left, dt, steps, &projection)?);
        }
        let corridor = Corridor::build(local.right.clone(), local.left.clone(), ahead, steps, &protrusions, self.params)?;
        Ok(TickInputs { tick: self.tick, global, local, x0, corridor })
    }

    fn collides(&self) -> bool {
        let body = ego_rectangle(&self.ego, &self.scenario.ego.geometry);
        self.obstacles.iter().any(|o| convex_rings_intersect(&body, &o.footprint()))
    }

    /// Plans and applies one tick. Returns `false` once the run has ended.
    pub fn step(&mut self) -> Result<bool> {
        if self.done {
            return Ok(false);
        }
        if self.tick >= self.ticks {
            return Ok(self.end(Outcome::Completed));
        }
        let global = cartesian_to_state(&self.ego, &self.road.path)?;
        if global.s >= self.finish {
            return Ok(self.end(Outcome::Completed));
        }
        let inputs = self.prepare()?;
        let corridor = &inputs.corridor;
        let blocked = corridor.blockade.is_blocked();
        let s_stop = corridor.s_stop + inputs.local.s_offset;
        if blocked && self.ego.v < self.scenario.run.halt_speed {
            let outcome = Outcome::HaltedAtBlockade { s: global.s, x: self.ego.x, y: self.ego.y, v: self.ego.v, s_stop };
            return Ok(self.end(outcome));
        }
        if self.options.record_snapshots {
            self.result.snapshots.push(snapshot(self.tick, &inputs.local, corridor));
        }

        let outcome = self.planner.tick(inputs.x0, &inputs.local.path, corridor);
        let ego = self.ego;
        let mut row = TraceRow {
            tick: self.tick,
            time: self.tick as f64 * self.result.dt,
            u1: 0.0,
            u2: 0.0,
            x: ego.x,
            y: ego.y,
            heading: ego.heading,
            kappa: ego.kappa,
            v: ego.v,
            s: global.s,
            d: global.d,
            chi: global.chi,
            status: None,
            zeta: 0.0,
            iterations: 0,
            blocked,
            s_stop,
            collision: self.collides(),
            residuals: [0.0; NUM_FAMILIES],
            solve_time: outcome.solve_time,
        };
        self.result.collision |= row.collision;

        match outcome.result {
            Ok(record) => {
                let u: EgoControl = record.first_control();
                row.u1 = u.u1;
                row.u2 = u.u2;
                row.status = Some(record.status);
                row.zeta = record.zeta;
                row.iterations = record.iterations;
                row.residuals =
                    max_residuals(&evaluate_constraints(&record.trajectory, corridor, 1.0, &ConstraintMargins::zero()));
                if self.options.record_plans {
                    self.result.plans.push(PlanPath { tick: self.tick, nodes: record.cartesian.clone() });
                }
                self.result.trace.push(row);
                self.ego = step_cartesian(self.ego, u, self.result.dt);
                for o in &mut self.obstacles {
                    o.advance(self.result.dt);
                }
                self.tick += 1;
                Ok(true)
            }
            Err(failure) => {
                row.residuals = max_residuals(&failure.residuals);
                self.result.trace.push(row);
                let outcome = Outcome::Failed { tick: self.tick, s: global.s, x: ego.x, y: ego.y, reason: failure.reason };
                Ok(self.end(outcome))
            }
        }
    }

    fn end(&mut self, outcome: Outcome) -> bool {
        if !outcome.is_failure() && self.collides() {
            self.result.collision = true;
        }
        self.result.outcome = outcome;
        self.done = true;
        false
    }

    pub fn into_result(self) -> RunResult {
        self.result
    }
}

/// Runs `scenario` with `variant` in closed loop.
pub fn run(scenario: &Scenario, variant: Variant, options: &RunOptions) -> Result<RunResult> {
    let mut sim = Simulation::new(scenario, variant, options)?;
    while sim.step()? {}
    Ok(sim.into_result())
}

fn max_residuals(rows: &[[f64; NUM_FAMILIES]]) -> [f64; NUM_FAMILIES] {
    let mut out = [f64::NEG_INFINITY; NUM_FAMILIES];
    for r in rows {
        for (o, v) in out.iter_mut().zip(r) {
            *o = o.max(*v);
        }
    }
    out.map(|v| if v.is_finite() { v } else { 0.0 })
}

const SNAPSHOT_SPACING: f64 = 0.25;

fn snapshot(tick: usize, local: &LocalRoad, corridor: &Corridor) -> ConstraintSnapshot {
    let n = (corridor.length / SNAPSHOT_SPACING).floor() as usize;
    let xy = |s: f64, d: f64| {
        let p = local.path.frenet_to_cartesian_extended(FrenetPose { s, d, heading_diff: 0.0 }).0;
        [p.x, p.y]
    };
    let samples = (0..=n)
        .map(|i| {
            let s = i as f64 * SNAPSHOT_SPACING;
            let (right, left) = (corridor.augmented(Side::Right, s, 0)[0], corridor.augmented(Side::Left, s, 0)[0]);
            ConstraintSample {
                s: s + local.s_offset,
                right_base: corridor.right.eval(s),
                left_base: corridor.left.eval(s),
                right,
                left,
                right_xy: xy(s, right),
                left_xy: xy(s, left),
                v_max: corridor.blend_speed(s, 1.0),
            }
        })
        .collect();
    ConstraintSnapshot { tick, samples }
}

/// Root-mean-square lateral offset between two traces, comparing `d` at
/// matching global arclength over their common range.
pub fn lateral_rms(a: &[TraceRow], b: &[TraceRow]) -> f64 {
    let lo = a.first().map_or(0.0, |r| r.s).max(b.first().map_or(0.0, |r| r.s));
    let hi = a.last().map_or(0.0, |r| r.s).min(b.last().map_or(0.0, |r| r.s));
    let interp = |t: &[TraceRow], s: f64| {
        let i = t.partition_point(|r| r.s < s).clamp(1, t.len() - 1);
        let (p, q) = (&t[i - 1], &t[i]);
        let w = if q.s > p.s { ((s - p.s) / (q.s - p.s)).clamp(0.0, 1.0) } else { 0.0 };
        p.d + w * (q.d - p.d)
    };
    let samples: Vec<f64> = a.iter().filter(|r| r.s >= lo && r.s <= hi).map(|r| r.s).collect();
    if samples.is_empty() || b.len() < 2 {
        return 0.0;
    }
    let sum: f64 = samples.iter().map(|&s| (interp(a, s) - interp(b, s)).powi(2)).sum();
    (sum / samples.len() as f64).sqrt()
}

/// Formats `v` with 9 significant digits.
pub fn fmt_sig(v: f64) -> String {
    if !v.is_finite() {
        return format!("{v}");
    }
    if v == 0.0 {
        return "0".into();
    }
    let sci = format!("{v:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-5..9).contains(&exp) {
        let decimals = (8 - exp).max(0) as usize;
        let mut s = format!("{v:.decimals$}");
        if s.contains('.') {
            s = s.trim_end_matches('0').trim_end_matches('.').to_string();
        }
        s
    } else {
        let m = if mantissa.contains('.') { mantissa.trim_end_matches('0').trim_end_matches('.') } else { mantissa };
        format!("{m}e{exp}")
    }
}

/// `v` rounded to 9 significant digits.
pub fn round_sig(v: f64) -> f64 {
    if v.is_finite() {
        fmt_sig(v).parse().unwrap_or(v)
    } else {
        v
    }
}

pub const RESIDUAL_COLUMNS: [&str; NUM_FAMILIES] = [
    "r_stop", "r_lat_lo", "r_lat_hi", "r_v_lo", "r_v_hi", "r_an_pos", "r_an_neg", "r_u1_lo", "r_u1_hi", "r_u2_lo", "r_u2_hi",
];

pub const TRACE_COLUMNS: [&str; 18] = [
    "tick", "time", "u1", "u2", "x", "y", "heading", "kappa", "v", "s", "d", "chi", "status", "zeta", "iterations", "blocked",
    "s_stop", "collision",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum EmitFormat {
    Csv,
    Json,
}

fn status_name(s: Option<PlanStatus>) -> &'static str {
    s.map_or("failed", PlanStatus::name)
}

pub fn trace_csv(trace: &[TraceRow]) -> String {
    let mut out = String::new();
    let header: Vec<&str> = TRACE_COLUMNS.iter().chain(RESIDUAL_COLUMNS.iter()).copied().collect();
    out.push_str(&header.join(","));
    out.push('\n');
    for r in trace {
        let mut cells = vec![r.tick.to_string()];
        cells.extend([r.time, r.u1, r.u2, r.x, r.y, r.heading, r.kappa, r.v, r.s, r.d, r.chi].map(fmt_sig));
        cells.push(status_name(r.status).into());
        cells.push(fmt_sig(r.zeta));
        cells.push(r.iterations.to_string());
        cells.push(u8::from(r.blocked).to_string());
        cells.push(fmt_sig(r.s_stop));
        cells.push(u8::from(r.collision).to_string());
        cells.extend(r.residuals.map(fmt_sig));
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

pub fn constraints_csv(snapshots: &[ConstraintSnapshot]) -> String {
    let mut out = String::from("tick,s,right_base,left_base,right,left,right_x,right_y,left_x,left_y,v_max\n");
    for snap in snapshots {
        for c in &snap.samples {
            let vals = [c.s, c.right_base, c.left_base, c.right, c.left, c.right_xy[0], c.right_xy[1], c.left_xy[0], c.left_xy[1], c.v_max];
            let _ = writeln!(out, "{},{}", snap.tick, vals.map(fmt_sig).join(","));
        }
    }
    out
}

pub fn timing_csv(trace: &[TraceRow]) -> String {
    let mut out = String::from("tick,solve_ms\n");
    for r in trace {
        let _ = writeln!(out, "{},{}", r.tick, fmt_sig(r.solve_time.as_secs_f64() * 1e3));
    }
    out
}

pub fn aggregate_csv(plans: &[PlanPath]) -> String {
    let mut out = String::from("tick,node,x,y,heading,kappa,v\n");
    for p in plans {
        for (k, n) in p.nodes.iter().enumerate() {
            let _ = writeln!(out, "{},{},{}", p.tick, k, [n.x, n.y, n.heading, n.kappa, n.v].map(fmt_sig).join(","));
        }
    }
    out
}

/// Rounds every float in a JSON value to 9 significant digits.
fn round_json(v: serde_json::Value) -> serde_json::Value {
    use serde_json::Value;
    match v {
        Value::Number(n) if n.is_f64() => {
            serde_json::Number::from_f64(round_sig(n.as_f64().expect("f64"))).map_or(Value::Null, Value::Number)
        }
        Value::Array(a) => Value::Array(a.into_iter().map(round_json).collect()),
        Value::Object(o) => Value::Object(o.into_iter().map(|(k, v)| (k, round_json(v))).collect()),
        other => other,
    }
}

fn to_json<T: Serialize>(value: &T) -> String {
    let v = serde_json::to_value(value).expect("serializable");
    serde_json::to_string_pretty(&round_json(v)).expect("serializable") + "\n"
}

#[derive(Serialize)]
struct Summary<'a> {
    scenario: &'a str,
    variant: &'a str,
    seed: u64,
    outcome: &'a Outcome,
    collision: bool,
    dt: f64,
    stats: RunStats,
}

pub fn summary_json(result: &RunResult) -> String {
    to_json(&Summary {
        scenario: &result.scenario,
        variant: result.variant.name(),
        seed: result.seed,
        outcome: &result.outcome,
        collision: result.collision,
        dt: result.dt,
        stats: result.stats(),
    })
}

pub const TABLE_HEADER: &str = "scenario,variant,outcome,ticks,mean_ms,max_ms,mean_iterations,min_speed";

pub fn table_row(result: &RunResult) -> String {
    let st = result.stats();
    format!(
        "{},{},{},{},{},{},{},{}",
        result.scenario,
        result.variant.name(),
        result.outcome.name(),
        st.ticks,
        fmt_sig(st.mean_ms),
        fmt_sig(st.max_ms),
        fmt_sig(st.mean_iterations),
        fmt_sig(st.min_speed)
    )
}

/// Merges the row of `result` into an existing solve-time table, replacing
/// any previous row of the same scenario and variant.
pub fn merge_table(existing: Option<&str>, result: &RunResult) -> String {
    let key = format!("{},{},", result.scenario, result.variant.name());
    let mut rows: Vec<String> = existing
        .into_iter()
        .flat_map(str::lines)
        .skip(1)
        .filter(|l| !l.is_empty() && !l.starts_with(&key))
        .map(String::from)
        .collect();
    rows.push(table_row(result));
    rows.sort();
    let mut out = String::from(TABLE_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r);
        out.push('\n');
    }
    out
}

/// Writes the run artifacts into `dir`; returns the written paths.
pub fn emit(result: &RunResult, dir: &Path, format: EmitFormat, aggregate: bool, table: bool) -> std::io::Result<Vec<std::path::PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let mut put = |name: &str, body: String| -> std::io::Result<()> {
        let p = dir.join(name);
        std::fs::write(&p, body)?;
        written.push(p);
        Ok(())
    };
    match format {
        EmitFormat::Csv => {
            put("trace.csv", trace_csv(&result.trace))?;
            put("constraints.csv", constraints_csv(&result.snapshots))?;
            put("timing.csv", timing_csv(&result.trace))?;
            if aggregate {
                put("aggregate.csv", aggregate_csv(&result.plans))?;
            }
        }
        EmitFormat::Json => {
            put("trace.json", to_json(&result.trace))?;
            put("constraints.json", to_json(&result.snapshots))?;
            let timing: Vec<(usize, f64)> = result.trace.iter().map(|r| (r.tick, r.solve_time.as_secs_f64() * 1e3)).collect();
            put("timing.json", to_json(&timing))?;
            if aggregate {
                put("aggregate.json", to_json(&result.plans))?;
            }
        }
    }
    put("summary.json", summary_json(result))?;
    if table {
        let path = dir.join("table.csv");
        let existing = std::fs::read_to_string(&path).ok();
        put("table.csv", merge_table(existing.as_deref(), result))?;
    }
    Ok(written)
}

/// Heading of the reference path at the start, handy for scenario files.
pub fn start_heading(road: &Road) -> f64 {
    wrap_angle(road.path.tangent_angle(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn straight(len: usize, half_width: f64) -> RoadSpec {
        RoadSpec {
            reference: (0..=len).step_by(2).map(|i| [i as f64, 0.0]).collect(),
            right: (0..=len).step_by(2).map(|i| [i as f64, -half_width]).collect(),
            left: (0..=len).step_by(2).map(|i| [i as f64, half_width]).collect(),
            speed_limit: 8.0,
        }
    }

    fn empty_road() -> Scenario {
        Scenario {
            name: "empty".into(),
            description: String::new(),
            road: straight(120, 2.0),
            ego: EgoSpec { x: 5.0, y: 0.0, heading: 0.0, speed: 5.0, kappa: 0.0, geometry: EgoGeometry::default() },
            obstacles: vec![],
            limits: LimitSpec::default(),
            horizon: HorizonConfig::default(),
            weights: ObjectiveWeights::default(),
            margins: ConstraintMargins::default(),
            validity: ValidityThresholds::default(),
            planner: PlannerSpec::default(),
            run: RunSpec::default(),
        }
    }

    #[test]
    fn sig_formatting() {
        assert_eq!(fmt_sig(0.0), "0");
        assert_eq!(fmt_sig(1.0), "1");
        assert_eq!(fmt_sig(-2.5), "-2.5");
        assert_eq!(fmt_sig(1.0 / 3.0), "0.333333333");
        assert_eq!(fmt_sig(123456.789123), "123456.789");
        assert_eq!(fmt_sig(1.23456789012e-7), "1.23456789e-7");
        assert_eq!(fmt_sig(9.9999999999), "10");
        assert_eq!(fmt_sig(2.0e12), "2e12");
    }

    #[test]
    fn toml_round_trip_and_unknown_fields() {
        let s = empty_road();
        let text = s.to_toml();
        assert_eq!(Scenario::from_toml(&text).unwrap(), s);
        let bad = format!("{text}\nbogus = 1\n");
        assert!(matches!(Scenario::from_toml(&bad), Err(PlanError::Scenario(_))));
    }

    #[test]
    fn validation_rejects_bad_scenarios() {
        let mut s = empty_road();
        s.road.reference.truncate(2);
        assert!(s.validate().is_err());
        let mut s = empty_road();
        s.ego.y = 3.0;
        assert!(s.validate().is_err());
        let mut s = empty_road();
        s.obstacles.push(ObstacleSpec {
            footprint: vec![[500.0, 500.0], [501.0, 500.0], [501.0, 501.0]],
            heading: 0.0,
            motion: ObstacleMotionModel::constant_velocity(0.0),
            safety_margin: 0.0,
        });
        assert!(s.validate().is_err());
        assert!(empty_road().validate().is_ok());
    }

    #[test]
    fn local_road_matches_global() {
        let s = empty_road();
        let road = s.road().unwrap();
        let local = extract_local_road(&road, 30.0, &s.run).unwrap();
        assert!((local.s_offset - 25.0).abs() < 1e-12);
        assert!((local.path.length() - 65.0).abs() < 1e-6);
        assert!((local.right.eval(10.0) + 2.0).abs() < 1e-6);
        assert!((local.left.eval(40.0) - 2.0).abs() < 1e-6);
    }

    #[test]
    fn ego_rectangle_corners() {
        let c = ego_rectangle(&CartesianState { x: 1.0, y: 2.0, heading: 0.0, kappa: 0.0, v: 0.0 }, &EgoGeometry::default());
        assert_eq!(c[0], Point2::new(0.0, 1.1));
        assert_eq!(c[2], Point2::new(4.6, 2.9));
    }

    #[test]
    fn empty_road_completes_near_centerline() {
        let s = empty_road();
        let res = run(&s, Variant::Mpc, &RunOptions::default()).unwrap();
        assert_eq!(res.outcome, Outcome::Completed);
        assert!(!res.collision);
        assert!(res.trace.iter().all(|r| r.d.abs() < 0.05), "max |d| too large");
        assert!(res.trace.windows(2).all(|w| w[1].s >= w[0].s && w[1].time > w[0].time));
        let last = res.trace.last().unwrap();
        assert!(last.v > 7.0);
    }

    #[test]
    fn csv_has_fixed_header_and_one_row_per_tick() {
        let s = empty_road();
        let res = run(&s, Variant::Re, &RunOptions { ticks: Some(5), record_snapshots: true, ..RunOptions::default() }).unwrap();
        let csv = trace_csv(&res.trace);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 6);
        assert!(lines[0].starts_with("tick,time,u1,u2,x,y,heading"));
        assert_eq!(lines[1].split(',').count(), TRACE_COLUMNS.len() + NUM_FAMILIES);
        assert_eq!(res.snapshots.len(), 5);
    }

    #[test]
    fn table_merge_replaces_rows() {
        let s = empty_road();
        let res = run(&s, Variant::Mpc, &RunOptions { ticks: Some(2), ..RunOptions::default() }).unwrap();
        let t1 = merge_table(None, &res);
        let t2 = merge_table(Some(&t1), &res);
        assert_eq!(t2.lines().count(), 2);
    }
}
