//! Receding-horizon controller variants with post-hoc safety verification
//! and fallback strategies.

use std::time::{Duration, Instant};

use nalgebra::SMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corridor::Corridor;
use crate::dynamics::{ego_derivative, ego_jacobian, rk4_step, CartesianState, ControlBounds, EgoControl, EgoState};
use crate::error::{PlanError, Result};
use crate::ocp::{
    dynamics_defects, evaluate_constraints, rollout, transcribe, transcribe_stop, ConstraintMargins, HorizonConfig,
    ObjectiveWeights, OcpSolution, SolveStatus, SqpOptions, Trajectory, WarmStart, NUM_FAMILIES, NX,
};
use crate::splines::{wrap_angle, FrenetPose, PathSpline2D};

/// Controller variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Plain MPC.
    Mpc,
    /// MPC with basic control clamping and re-propagation.
    Re,
    /// Homotopy-based MPC.
    Hb,
    /// MPC with sensitivity-shift fallback.
    Su,
    /// MPC with the concurrent stop-trajectory fallback.
    Ss,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::Mpc, Variant::Re, Variant::Hb, Variant::Su, Variant::Ss];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Mpc => "mpc",
            Variant::Re => "re",
            Variant::Hb => "hb",
            Variant::Su => "su",
            Variant::Ss => "ss",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Variant::Mpc => "MPC",
            Variant::Re => "MPC_RE",
            Variant::Hb => "MPC_HB",
            Variant::Su => "MPC_SU",
            Variant::Ss => "MPC_SS",
        }
    }

    fn recovers(self) -> bool {
        matches!(self, Variant::Re | Variant::Su | Variant::Ss)
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Violation tolerances used by [`is_safe`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SafetyTolerances {
    pub families: [f64; NUM_FAMILIES],
    /// Tolerance on the trapezoidal dynamics defects.
    pub dynamics: f64,
    /// Allowed decrease of `s` between nodes (round-off only).
    pub monotone: f64,
}

/// Floor for families that carry no margin, to absorb solver round-off.
pub const TOLERANCE_FLOOR: f64 = 1e-4;

impl SafetyTolerances {
    /// Half of each margin, floored at [`TOLERANCE_FLOOR`].
    pub fn from_margins(m: &ConstraintMargins) -> Self {
        Self {
            families: m.per_family().map(|e| (0.5 * e).max(TOLERANCE_FLOOR)),
            dynamics: 0.05,
            monotone: 1e-9,
        }
    }
}

impl Default for SafetyTolerances {
    fn default() -> Self {
        Self::from_margins(&ConstraintMargins::default())
    }
}

/// Thresholds of [`is_valid`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ValidityThresholds {
    pub position: f64,
    pub heading: f64,
    pub velocity: f64,
}

impl Default for ValidityThresholds {
    fn default() -> Self {
        Self { position: 0.2, heading: 0.1, velocity: 0.5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanStatus {
    Optimal,
    HomotopyPartial,
    SensitivityShifted,
    StopFallback,
    Recovered,
}

impl PlanStatus {
    pub fn name(self) -> &'static str {
        match self {
            PlanStatus::Optimal => "optimal",
            PlanStatus::HomotopyPartial => "homotopy_partial",
            PlanStatus::SensitivityShifted => "sensitivity_shifted",
            PlanStatus::StopFallback => "stop_fallback",
            PlanStatus::Recovered => "recovered",
        }
    }
}

pub type Sensitivity = SMatrix<f64, NX, NX>;

/// An accepted plan.
#[derive(Debug, Clone)]
pub struct PlanRecord {
    pub tick: usize,
    pub trajectory: Trajectory,
    pub cartesian: Vec<CartesianState>,
    /// Homotopy parameter of the accepted solution.
    pub zeta: f64,
    /// `S(k) = dx(k)/dx(0)` along the plan.
    pub sensitivity: Vec<Sensitivity>,
    pub status: PlanStatus,
    pub solver_status: SolveStatus,
    pub iterations: usize,
    pub solve_time: Duration,
    /// Set when the plan comes from a fresh OCP solution.
    pub solution: Option<OcpSolution>,
}

impl PlanRecord {
    pub fn first_control(&self) -> EgoControl {
        self.trajectory.controls[0]
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("{variant} failed at tick {tick} (s = {s:.3}): {reason}")]
pub struct TickFailure {
    pub variant: Variant,
    pub tick: usize,
    pub s: f64,
    pub reason: String,
    pub residuals: Vec<[f64; NUM_FAMILIES]>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlannerConfig {
    pub horizon: HorizonConfig,
    pub weights: ObjectiveWeights,
    pub margins: ConstraintMargins,
    pub tolerances: SafetyTolerances,
    pub validity: ValidityThresholds,
    pub sqp: SqpOptions,
    /// Nodes dropped by the sensitivity shift.
    pub shift: usize,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        let margins = ConstraintMargins::default();
        Self {
            horizon: HorizonConfig::default(),
            weights: ObjectiveWeights::default(),
            margins,
            tolerances: SafetyTolerances::from_margins(&margins),
            validity: ValidityThresholds::default(),
            sqp: SqpOptions::default(),
            shift: 1,
        }
    }
}

/// Breakdown of a safety check.
#[derive(Debug, Clone, PartialEq)]
pub struct SafetyReport {
    pub monotone: bool,
    /// Largest residual per family (true constraints, full homotopy).
    pub worst: [f64; NUM_FAMILIES],
    pub worst_defect: f64,
    pub safe: bool,
}

/// Evaluates the true constraints (`zeta = 1`, zero margins), path
/// monotonicity and dynamics consistency of a trajectory.
pub fn check_safety(
    traj: &Trajectory,
    corridor: &Corridor,
    path: &PathSpline2D,
    dt: f64,
    tol: &SafetyTolerances,
) -> SafetyReport {
    let finite = traj.is_finite() && !traj.is_empty();
    let monotone = traj.states.windows(2).all(|w| w[1].s >= w[0].s - tol.monotone);
    let mut worst = [f64::NEG_INFINITY; NUM_FAMILIES];
    for r in evaluate_constraints(traj, corridor, 1.0, &ConstraintMargins::zero()) {
        for (w, v) in worst.iter_mut().zip(r) {
            *w = w.max(v);
        }
    }
    let worst_defect = dynamics_defects(traj, path, dt)
        .iter()
        .flat_map(|d| d.iter().map(|v| v.abs()))
        .fold(0.0, f64::max);
    let within = worst.iter().zip(&tol.families).all(|(w, t)| *w <= *t);
    SafetyReport { monotone, worst, worst_defect, safe: finite && monotone && within && worst_defect <= tol.dynamics }
}

pub fn is_safe(traj: &Trajectory, corridor: &Corridor, path: &PathSpline2D, dt: f64, tol: &SafetyTolerances) -> bool {
    check_safety(traj, corridor, path, dt, tol).safe
}

/// Cartesian pose of a Frenet state.
pub fn state_to_cartesian(x: &EgoState, path: &PathSpline2D) -> CartesianState {
    let (p, heading) = path.frenet_to_cartesian_extended(FrenetPose { s: x.s, d: x.d, heading_diff: x.chi });
    CartesianState { x: p.x, y: p.y, heading, kappa: x.kappa, v: x.v }
}

/// Frenet state of a Cartesian pose.
pub fn cartesian_to_state(c: &CartesianState, path: &PathSpline2D) -> Result<EgoState> {
    let proj = path.project(crate::geometry::Point2::new(c.x, c.y)).map_err(|e| PlanError::FrameTransform(e.to_string()))?;
    let chi = wrap_angle(c.heading - path.tangent_angle(proj.s));
    Ok(EgoState::new(proj.s, proj.d, chi, c.kappa, c.v))
}

pub fn trajectory_to_cartesian(traj: &Trajectory, path: &PathSpline2D) -> Vec<CartesianState> {
    traj.states.iter().map(|x| state_to_cartesian(x, path)).collect()
}

/// `true` when `current` is close to the previous plan's prediction for
/// this instant.
pub fn is_valid(
    current: &EgoState,
    path: &PathSpline2D,
    previous: Option<&PlanRecord>,
    shift: usize,
    thresholds: &ValidityThresholds,
) -> bool {
    let Some(prev) = previous else {
        return false;
    };
    let Some(pred) = prev.cartesian.get(shift) else {
        return false;
    };
    let now = state_to_cartesian(current, path);
    let dist = (now.x - pred.x).hypot(now.y - pred.y);
    dist <= thresholds.position
        && wrap_angle(now.heading - pred.heading).abs() <= thresholds.heading
        && (now.v - pred.v).abs() <= thresholds.velocity
}

/// Clamps the controls into `bounds` and re-propagates the states from
/// `x0` with RK4, holding each control over its interval.
pub fn recover(traj: &Trajectory, bounds: &ControlBounds, x0: EgoState, path: &PathSpline2D, dt: f64) -> Trajectory {
    let controls: Vec<EgoControl> = traj.controls.iter().map(|u| bounds.clamp(*u)).collect();
    let mut states = Vec::with_capacity(controls.len());
    states.push(x0);
    let mut x = x0.to_array();
    for &u in &controls[..controls.len().saturating_sub(1)] {
        x = rk4_step(x, 0.0, dt, |_, xs| {
            let st = EgoState::from_array(*xs);
            ego_derivative(st, u, path.curvature_extended(st.s)).to_array()
        });
        states.push(EgoState::from_array(x));
    }
    Trajectory { states, controls }
}

fn state_jacobian(x: &EgoState, path: &PathSpline2D) -> Sensitivity {
    let (a, _) = ego_jacobian(*x, path.curvature_derivatives(x.s));
    Sensitivity::from_fn(|r, c| a[r][c])
}

/// `S(k) = dx(k)/dx(0)` from products of trapezoidal transition matrices
/// with the controls held fixed.
pub fn sensitivities(traj: &Trajectory, path: &PathSpline2D, dt: f64) -> Vec<Sensitivity> {
    let eye = Sensitivity::identity();
    let mut out = Vec::with_capacity(traj.len());
    out.push(eye);
    for w in traj.states.windows(2) {
        let a0 = state_jacobian(&w[0], path);
        let a1 = state_jacobian(&w[1], path);
        let lhs = eye - a1 * (0.5 * dt);
        let rhs = eye + a0 * (0.5 * dt);
        let step = lhs.lu().solve(&rhs).unwrap_or(eye);
        let last = *out.last().expect("non-empty");
        out.push(step * last);
    }
    out
}

/// Re-expresses a stored plan in the frame of `path`.
pub fn reproject(record: &PlanRecord, path: &PathSpline2D) -> Result<Trajectory> {
    let states = record.cartesian.iter().map(|c| cartesian_to_state(c, path)).collect::<Result<Vec<_>>>()?;
    Ok(Trajectory { states, controls: record.trajectory.controls.clone() })
}

/// First-order corrected previous plan, shifted by `shift` nodes, in the
/// current frame. The result has `N - shift` steps.
pub fn sensitivity_shift(
    previous: &PlanRecord,
    current: EgoState,
    path: &PathSpline2D,
    shift: usize,
) -> Result<Trajectory> {
    let moved = reproject(previous, path)?;
    if shift >= moved.len() {
        return Err(PlanError::Dimension { expected: shift + 1, got: moved.len() });
    }
    let base = StateOf::of(&moved.states[shift]);
    let dx0 = StateOf::of(&current) - base;
    let inv0 = previous.sensitivity[shift].try_inverse().ok_or_else(|| PlanError::FrameTransform("singular sensitivity".into()))?;
    let states = (shift..moved.len())
        .map(|k| {
            let corr = previous.sensitivity[k] * inv0 * dx0;
            let x = StateOf::of(&moved.states[k]) + corr;
            EgoState::from_array(x.into())
        })
        .collect();
    Ok(Trajectory { states, controls: moved.controls[shift..].to_vec() })
}

struct StateOf;

impl StateOf {
    fn of(x: &EgoState) -> nalgebra::SVector<f64, NX> {
        nalgebra::SVector::from(x.to_array())
    }
}

/// Extends a trajectory to `nodes` nodes by holding the last control.
pub fn pad_trajectory(traj: &Trajectory, nodes: usize, path: &PathSpline2D, dt: f64) -> Trajectory {
    let mut out = traj.clone();
    while out.len() < nodes {
        let u = *out.controls.last().expect("non-empty");
        let x = out.states.last().expect("non-empty").to_array();
        let next = rk4_step(x, 0.0, dt, |_, xs| {
            let st = EgoState::from_array(*xs);
            ego_derivative(st, u, path.curvature_extended(st.s)).to_array()
        });
        out.states.push(EgoState::from_array(next));
        out.controls.push(u);
    }
    out.states.truncate(nodes);
    out.controls.truncate(nodes);
    out
}

/// Initial guess for this tick: the previous plan shifted one node and
/// re-projected, or a constant-speed rollout.
pub fn initial_guess(previous: Option<&PlanRecord>, x0: EgoState, path: &PathSpline2D, config: &PlannerConfig) -> Trajectory {
    let horizon = &config.horizon;
    if let Some(prev) = previous {
        if let Ok(moved) = reproject(prev, path) {
            if moved.len() > 1 {
                let shifted = Trajectory { states: moved.states[1..].to_vec(), controls: moved.controls[1..].to_vec() };
                let mut guess = pad_trajectory(&shifted, horizon.nodes(), path, horizon.dt());
                guess.states[0] = x0;
                if guess.is_finite() {
                    return guess;
                }
            }
        }
    }
    rollout(x0, EgoControl::default(), path, horizon)
}

/// Stop trajectory published by the backup lane.
#[derive(Debug, Clone)]
pub struct BackupPlan {
    pub solution: OcpSolution,
    pub solve_time: Duration,
}

/// Solves the stopping problem from a snapshot.
pub fn solve_backup(
    x0: EgoState,
    path: &PathSpline2D,
    corridor: &Corridor,
    config: &PlannerConfig,
    previous: Option<&PlanRecord>,
) -> BackupPlan {
    let start = Instant::now();
    let problem = transcribe_stop(x0, path, corridor, config.weights, config.horizon);
    let guess = initial_guess(previous, x0, path, config);
    let solution = problem.solve(Some(WarmStart::primal(guess.to_stages())), &config.sqp);
    BackupPlan { solution, solve_time: start.elapsed() }
}

/// Inputs of one planning tick.
pub struct TickContext<'a> {
    pub tick: usize,
    pub x0: EgoState,
    pub path: &'a PathSpline2D,
    pub corridor: &'a Corridor,
    pub config: &'a PlannerConfig,
}

impl TickContext<'_> {
    fn dt(&self) -> f64 {
        self.config.horizon.dt()
    }

    fn safety(&self, traj: &Trajectory) -> SafetyReport {
        check_safety(traj, self.corridor, self.path, self.dt(), &self.config.tolerances)
    }

    fn record(&self, traj: Trajectory, zeta: f64, status: PlanStatus, stats: &SolveStats) -> PlanRecord {
        PlanRecord {
            tick: self.tick,
            cartesian: trajectory_to_cartesian(&traj, self.path),
            sensitivity: sensitivities(&traj, self.path, self.dt()),
            trajectory: traj,
            zeta,
            status,
            solver_status: stats.status,
            iterations: stats.iterations,
            solve_time: stats.start.elapsed(),
            solution: stats.last.clone(),
        }
    }

    fn solve(&self, zeta: f64, start: WarmStart<7, NX>) -> OcpSolution {
        let problem = transcribe(self.x0, self.path, self.corridor, self.config.weights, self.config.margins, zeta, self.config.horizon);
        problem.solve(Some(start), &self.config.sqp)
    }
}

struct SolveStats {
    start: Instant,
    iterations: usize,
    status: SolveStatus,
    last: Option<OcpSolution>,
}

/// Runs one tick of `variant`. `backup` yields the stop plan published
/// for this tick, if any.
pub fn plan_step(
    variant: Variant,
    ctx: &TickContext<'_>,
    previous: Option<&PlanRecord>,
    backup: &mut dyn FnMut() -> Option<BackupPlan>,
) -> std::result::Result<PlanRecord, TickFailure> {
    let mut stats = SolveStats { start: Instant::now(), iterations: 0, status: SolveStatus::IterationLimit, last: None };
    let guess = initial_guess(previous, ctx.x0, ctx.path, ctx.config);

    let schedule = match variant {
        Variant::Hb => ctx.corridor.schedule.clone(),
        _ => vec![1.0],
    };
    let mut start = WarmStart::primal(guess.to_stages());
    let mut partial: Vec<(f64, OcpSolution)> = Vec::new();
    let mut final_solution = None;
    for (i, &zeta) in schedule.iter().enumerate() {
        let sol = ctx.solve(zeta, start);
        stats.iterations += sol.iterations;
        stats.status = sol.status;
        start = sol.warm_start();
        if i + 1 == schedule.len() {
            final_solution = Some(sol);
        } else {
            partial.push((zeta, sol));
        }
    }
    let solution = final_solution.expect("schedule is non-empty");
    stats.last = Some(solution.clone());

    let report = ctx.safety(&solution.trajectory);
    if report.safe {
        return Ok(ctx.record(solution.trajectory.clone(), 1.0, PlanStatus::Optimal, &stats));
    }

    // Homotopy fallback: the most recent partial solution that is safe
    // with respect to the true constraints.
    for (zeta, sol) in partial.iter().rev() {
        if ctx.safety(&sol.trajectory).safe {
            stats.last = Some(sol.clone());
            return Ok(ctx.record(sol.trajectory.clone(), *zeta, PlanStatus::HomotopyPartial, &stats));
        }
    }

    if variant.recovers() {
        let repaired =
            recover(&solution.trajectory, &ctx.corridor.params.controls, ctx.x0, ctx.path, ctx.dt());
        if ctx.safety(&repaired).safe {
            return Ok(ctx.record(repaired, 1.0, PlanStatus::Recovered, &stats));
        }
    }

    match variant {
        Variant::Su => {
            if is_valid(&ctx.x0, ctx.path, previous, ctx.config.shift, &ctx.config.validity) {
                if let Some(prev) = previous {
                    if let Ok(shifted) = sensitivity_shift(prev, ctx.x0, ctx.path, ctx.config.shift) {
                        if ctx.safety(&shifted).safe {
                            return Ok(ctx.record(shifted, prev.zeta, PlanStatus::SensitivityShifted, &stats));
                        }
                    }
                }
            }
        }
        Variant::Ss => {
            if let Some(plan) = backup() {
                if ctx.safety(&plan.solution.trajectory).safe {
                    stats.iterations += plan.solution.iterations;
                    stats.last = Some(plan.solution.clone());
                    return Ok(ctx.record(plan.solution.trajectory.clone(), 1.0, PlanStatus::StopFallback, &stats));
                }
            }
        }
        _ => {}
    }

    Err(TickFailure {
        variant,
        tick: ctx.tick,
        s: ctx.x0.s,
        reason: format!(
            "no safe plan (solver {:?}, monotone {}, worst residual {:.3e}, defect {:.3e})",
            solution.status,
            report.monotone,
            report.worst.iter().zip(&ctx.config.tolerances.families).map(|(w, t)| w - t).fold(f64::NEG_INFINITY, f64::max),
            report.worst_defect
        ),
        residuals: evaluate_constraints(&solution.trajectory, ctx.corridor, 1.0, &ConstraintMargins::zero()),
    })
}

/// Timing and outcome of one closed-loop tick.
#[derive(Debug, Clone)]
pub struct TickOutcome {
    pub result: std::result::Result<PlanRecord, TickFailure>,
    pub backup: Option<BackupPlan>,
    pub solve_time: Duration,
}

/// Stateful planner driving one variant across ticks.
#[derive(Debug, Clone)]
pub struct Planner {
    pub variant: Variant,
    pub config: PlannerConfig,
    pub previous: Option<PlanRecord>,
    tick: usize,
}

impl Planner {
    pub fn new(variant: Variant, config: PlannerConfig) -> Self {
        Self { variant, config, previous: None, tick: 0 }
    }

    /// Plans from `x0`. For the stop-fallback variant the backup problem is
    /// solved concurrently on a snapshot of the same inputs.
    pub fn tick(&mut self, x0: EgoState, path: &PathSpline2D, corridor: &Corridor) -> TickOutcome {
        let ctx = TickContext { tick: self.tick, x0, path, corridor, config: &self.config };
        let previous = self.previous.as_ref();
        let variant = self.variant;
        let config = &self.config;
        let start = Instant::now();
        let (result, backup) = std::thread::scope(|scope| {
            let mut handle = (variant == Variant::Ss)
                .then(|| scope.spawn(move || solve_backup(x0, path, corridor, config, previous)));
            let mut fetched: Option<BackupPlan> = None;
            let mut fetch = || {
                if let Some(h) = handle.take() {
                    fetched = h.join().ok();
                }
                fetched.clone()
            };
            let result = plan_step(variant, &ctx, previous, &mut fetch);
            let backup = fetch();
            (result, backup)
        });
        let solve_time = start.elapsed();
        self.tick += 1;
        if let Ok(rec) = &result {
            self.previous = Some(rec.clone());
        }
        TickOutcome { result, backup, solve_time }
    }
}
