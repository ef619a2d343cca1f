//! Trapezoidal transcription of the trajectory OCP and its solution.

pub mod qp;
pub mod sqp;

use nalgebra::{SMatrix, SVector};
use serde::{Deserialize, Serialize};

use crate::corridor::Corridor;
use crate::dynamics::{ego_derivative, ego_jacobian, rk4_step, EgoControl, EgoState};
use crate::error::{PlanError, Result};
use crate::splines::PathSpline2D;

pub use qp::{EqBlock, QpOptions};
pub use sqp::{NlpEval, SolveStatus, SqpOptions, SqpResult, StagedNlp, WarmStart};

/// Variables per node: five states and two controls.
pub const NZ: usize = 7;
/// Equality rows per block.
pub const NX: usize = 5;

pub type StageVec = SVector<f64, NZ>;
pub type StateVec = SVector<f64, NX>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HorizonConfig {
    /// Horizon length `T` [s].
    pub horizon: f64,
    /// Number of steps `N`.
    pub steps: usize,
}

impl Default for HorizonConfig {
    fn default() -> Self {
        Self { horizon: 3.5, steps: 25 }
    }
}

impl HorizonConfig {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if steps < 2 || !(horizon > 0.0) {
            return Err(PlanError::DegenerateInput(format!("horizon {horizon} s with {steps} steps")));
        }
        Ok(Self { horizon, steps })
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn nodes(&self) -> usize {
        self.steps + 1
    }

    /// Dimension of the stacked decision vector.
    pub fn decision_dim(&self) -> usize {
        self.nodes() * NZ
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectiveWeights {
    pub alpha_s: f64,
    pub alpha_d: f64,
    pub alpha_chi: f64,
    pub alpha_u1: f64,
    pub alpha_u2: f64,
    /// Speed penalty, used only by the stopping problem.
    pub alpha_v: f64,
}

impl Default for ObjectiveWeights {
    fn default() -> Self {
        Self { alpha_s: 1.0, alpha_d: 0.5, alpha_chi: 1.0, alpha_u1: 5.0, alpha_u2: 0.5, alpha_v: 2.0 }
    }
}

impl ObjectiveWeights {
    pub fn is_valid(&self) -> bool {
        [self.alpha_s, self.alpha_d, self.alpha_chi, self.alpha_u1, self.alpha_u2, self.alpha_v]
            .iter()
            .all(|w| w.is_finite() && *w >= 0.0)
    }
}

/// Constraint tightening per family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConstraintMargins {
    pub stop: f64,
    pub lateral: f64,
    pub velocity: f64,
    pub lateral_accel: f64,
}

impl Default for ConstraintMargins {
    fn default() -> Self {
        Self { stop: 0.5, lateral: 0.1, velocity: 0.2, lateral_accel: 0.2 }
    }
}

impl ConstraintMargins {
    pub fn zero() -> Self {
        Self { stop: 0.0, lateral: 0.0, velocity: 0.0, lateral_accel: 0.0 }
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            stop: self.stop * factor,
            lateral: self.lateral * factor,
            velocity: self.velocity * factor,
            lateral_accel: self.lateral_accel * factor,
        }
    }

    pub fn is_valid(&self) -> bool {
        [self.stop, self.lateral, self.velocity, self.lateral_accel].iter().all(|m| m.is_finite() && *m >= 0.0)
    }

    /// Margin of every family, in [`ConstraintFamily::ALL`] order.
    pub fn per_family(&self) -> [f64; NUM_FAMILIES] {
        [
            self.stop,
            self.lateral,
            self.lateral,
            0.0,
            self.velocity,
            self.lateral_accel,
            self.lateral_accel,
            0.0,
            0.0,
            0.0,
            0.0,
        ]
    }
}

pub const NUM_FAMILIES: usize = 11;

/// Path constraint families, each evaluated at every node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintFamily {
    Stop,
    LateralLower,
    LateralUpper,
    SpeedLower,
    SpeedUpper,
    LateralAccelPos,
    LateralAccelNeg,
    SteerRateLower,
    SteerRateUpper,
    AccelLower,
    AccelUpper,
}

impl ConstraintFamily {
    pub const ALL: [ConstraintFamily; NUM_FAMILIES] = [
        Self::Stop,
        Self::LateralLower,
        Self::LateralUpper,
        Self::SpeedLower,
        Self::SpeedUpper,
        Self::LateralAccelPos,
        Self::LateralAccelNeg,
        Self::SteerRateLower,
        Self::SteerRateUpper,
        Self::AccelLower,
        Self::AccelUpper,
    ];

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&f| f == self).expect("listed")
    }
}

/// A planned trajectory: `N + 1` states and controls.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub states: Vec<EgoState>,
    pub controls: Vec<EgoControl>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn to_stages(&self) -> Vec<StageVec> {
        self.states.iter().zip(&self.controls).map(|(x, u)| stage_from(*x, *u)).collect()
    }

    pub fn from_stages(z: &[StageVec]) -> Self {
        Self {
            states: z.iter().map(|v| EgoState::new(v[0], v[1], v[2], v[3], v[4])).collect(),
            controls: z.iter().map(|v| EgoControl::new(v[5], v[6])).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.states.iter().all(EgoState::is_finite) && self.controls.iter().all(|u| u.u1.is_finite() && u.u2.is_finite())
    }
}

pub fn stage_from(x: EgoState, u: EgoControl) -> StageVec {
    StageVec::from([x.s, x.d, x.chi, x.kappa, x.v, u.u1, u.u2])
}

fn split(z: &StageVec) -> (EgoState, EgoControl) {
    (EgoState::new(z[0], z[1], z[2], z[3], z[4]), EgoControl::new(z[5], z[6]))
}

fn f_vec(z: &StageVec, kappa_r: f64) -> StateVec {
    let (x, u) = split(z);
    StateVec::from(ego_derivative(x, u, kappa_r).to_array())
}

fn f_jac(z: &StageVec, kappa_r: [f64; 3]) -> SMatrix<f64, NX, NZ> {
    let (x, _) = split(z);
    let (a, b) = ego_jacobian(x, kappa_r);
    SMatrix::from_fn(|r, c| if c < NX { a[r][c] } else { b[r][c - NX] })
}

/// Which variant of the problem is transcribed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OcpKind {
    /// Margin-tightened progress-maximizing problem.
    Safe,
    /// Full corridor, no progress reward, speed penalty, zero margins.
    Stop,
}

#[derive(Debug, Clone)]
pub struct OcpProblem<'a> {
    pub x0: EgoState,
    pub path: &'a PathSpline2D,
    pub corridor: &'a Corridor,
    pub weights: ObjectiveWeights,
    pub margins: ConstraintMargins,
    pub zeta: f64,
    pub horizon: HorizonConfig,
    pub kind: OcpKind,
    /// `x0` violates the base (`zeta = 0`) corridor constraints.
    pub infeasible_start: bool,
}

pub fn transcribe<'a>(
    x0: EgoState,
    path: &'a PathSpline2D,
    corridor: &'a Corridor,
    weights: ObjectiveWeights,
    margins: ConstraintMargins,
    zeta: f64,
    horizon: HorizonConfig,
) -> OcpProblem<'a> {
    let zeta = zeta.clamp(0.0, 1.0);
    let residuals = path_residuals(&x0, &EgoControl::default(), 0, corridor, 0.0, &margins);
    let infeasible_start = residuals[..ConstraintFamily::SteerRateLower.index()].iter().any(|&r| r > 0.0);
    OcpProblem { x0, path, corridor, weights, margins, zeta, horizon, kind: OcpKind::Safe, infeasible_start }
}

/// The stopping problem solved by the backup planner.
pub fn transcribe_stop<'a>(
    x0: EgoState,
    path: &'a PathSpline2D,
    corridor: &'a Corridor,
    weights: ObjectiveWeights,
    horizon: HorizonConfig,
) -> OcpProblem<'a> {
    let weights = ObjectiveWeights { alpha_s: 0.0, ..weights };
    let mut p = transcribe(x0, path, corridor, weights, ConstraintMargins::zero(), 1.0, horizon);
    p.kind = OcpKind::Stop;
    p
}

/// Signed path-constraint residuals at one node (non-positive when
/// satisfied), in [`ConstraintFamily::ALL`] order.
pub fn path_residuals(
    x: &EgoState,
    u: &EgoControl,
    k: usize,
    corridor: &Corridor,
    zeta: f64,
    margins: &ConstraintMargins,
) -> [f64; NUM_FAMILIES] {
    let ev = corridor.evaluate(x.s, k, zeta);
    let a_lim = ev.lateral_accel_limit - margins.lateral_accel;
    let an = x.kappa * x.v * x.v;
    let b = ev.controls;
    [
        x.s - (ev.s_stop - margins.stop),
        ev.d_lo[0] + margins.lateral - x.d,
        x.d - ev.d_hi[0] + margins.lateral,
        -x.v,
        x.v - ev.v_hi[0] + margins.velocity,
        an - a_lim,
        -an - a_lim,
        b.u1_min - u.u1,
        u.u1 - b.u1_max,
        b.u2_min - u.u2,
        u.u2 - b.u2_max,
    ]
}

/// Residuals of every family at every node.
pub fn evaluate_constraints(
    traj: &Trajectory,
    corridor: &Corridor,
    zeta: f64,
    margins: &ConstraintMargins,
) -> Vec<[f64; NUM_FAMILIES]> {
    traj.states
        .iter()
        .zip(&traj.controls)
        .enumerate()
        .map(|(k, (x, u))| path_residuals(x, u, k, corridor, zeta, margins))
        .collect()
}

/// Control part `B u` of the model right-hand side, which is affine in `u`.
fn control_term(z: &StageVec) -> StateVec {
    StateVec::from([0.0, 0.0, 0.0, z[5], z[6]])
}

/// Trapezoidal defect between consecutive stages with the control held
/// at `u(k)` over the interval:
/// `x(k+1) - x(k) - dt/2 (f(x(k), u(k)) + f(x(k+1), u(k)))`.
fn defect(prev: &StageVec, cur: &StageVec, f_prev: &StateVec, f_cur: &StateVec, dt: f64) -> StateVec {
    let f_held = f_cur - control_term(cur) + control_term(prev);
    cur.fixed_rows::<NX>(0) - prev.fixed_rows::<NX>(0) - (f_prev + f_held) * (0.5 * dt)
}

/// Trapezoidal defects of a trajectory, controls held over each interval.
pub fn dynamics_defects(traj: &Trajectory, path: &PathSpline2D, dt: f64) -> Vec<[f64; NX]> {
    let z = traj.to_stages();
    z.windows(2)
        .map(|w| {
            let f0 = f_vec(&w[0], path.curvature_extended(w[0][0]));
            let f1 = f_vec(&w[1], path.curvature_extended(w[1][0]));
            defect(&w[0], &w[1], &f0, &f1, dt).into()
        })
        .collect()
}

/// Constant-control rollout used as a cold start.
pub fn rollout(x0: EgoState, control: EgoControl, path: &PathSpline2D, horizon: &HorizonConfig) -> Trajectory {
    let dt = horizon.dt();
    let mut states = vec![x0];
    let mut x = x0.to_array();
    for _ in 0..horizon.steps {
        x = rk4_step(x, 0.0, dt, |_, xs| {
            let st = EgoState::from_array(*xs);
            ego_derivative(st, control, path.curvature_extended(st.s)).to_array()
        });
        x[4] = x[4].max(0.0);
        states.push(EgoState::from_array(x));
    }
    Trajectory { controls: vec![control; states.len()], states }
}

impl OcpProblem<'_> {
    fn speed_weight(&self) -> f64 {
        match self.kind {
            OcpKind::Safe => 0.0,
            OcpKind::Stop => self.weights.alpha_v,
        }
    }

    fn quadrature_weight(&self, k: usize) -> f64 {
        let dt = self.horizon.dt();
        if k == 0 || k == self.horizon.steps {
            0.5 * dt
        } else {
            dt
        }
    }

    /// Diagonal of the running-cost Hessian per unit quadrature weight.
    fn cost_diag(&self) -> [f64; NZ] {
        let w = &self.weights;
        [0.0, 2.0 * w.alpha_d, 2.0 * w.alpha_chi, 0.0, 2.0 * self.speed_weight(), 2.0 * w.alpha_u1, 2.0 * w.alpha_u2]
    }

    pub fn objective(&self, z: &[StageVec]) -> f64 {
        let diag = self.cost_diag();
        let running: f64 = z
            .iter()
            .enumerate()
            .map(|(k, v)| self.quadrature_weight(k) * (0..NZ).map(|i| 0.5 * diag[i] * v[i] * v[i]).sum::<f64>())
            .sum();
        running - self.weights.alpha_s * z[self.horizon.steps][0]
    }

    /// Residuals as imposed in the NLP. The initial state is fixed, so its
    /// state constraints cannot be acted upon and are not enforced.
    fn node_residuals(&self, k: usize, x: &EgoState, u: &EgoControl) -> [f64; NUM_FAMILIES] {
        let mut r = path_residuals(x, u, k, self.corridor, self.zeta, &self.margins);
        if k == 0 {
            for v in &mut r[..ConstraintFamily::SteerRateLower.index()] {
                *v = v.min(0.0);
            }
        }
        r
    }

    fn ineq_rows(&self, k: usize, z: &StageVec) -> (Vec<f64>, Vec<StageVec>) {
        let (x, u) = split(z);
        let ev = self.corridor.evaluate(x.s, k, self.zeta);
        let vals = self.node_residuals(k, &x, &u).to_vec();
        let row = |entries: &[(usize, f64)]| {
            let mut r = StageVec::zeros();
            for &(i, v) in entries {
                r[i] += v;
            }
            r
        };
        let (kap, v) = (x.kappa, x.v);
        let jac = vec![
            row(&[(0, 1.0)]),
            row(&[(0, ev.d_lo[1]), (1, -1.0)]),
            row(&[(0, -ev.d_hi[1]), (1, 1.0)]),
            row(&[(4, -1.0)]),
            row(&[(0, -ev.v_hi[1]), (4, 1.0)]),
            row(&[(3, v * v), (4, 2.0 * kap * v)]),
            row(&[(3, -v * v), (4, -2.0 * kap * v)]),
            row(&[(5, -1.0)]),
            row(&[(5, 1.0)]),
            row(&[(6, -1.0)]),
            row(&[(6, 1.0)]),
        ];
        (vals, jac)
    }

    /// Solves from `start` (a cold constant-speed rollout when `None`).
    pub fn solve(&self, start: Option<WarmStart<NZ, NX>>, opts: &SqpOptions) -> OcpSolution {
        let start = start.unwrap_or_else(|| WarmStart::primal(self.cold_start().to_stages()));
        let res = sqp::solve(self, start, opts);
        OcpSolution::from_result(res)
    }

    pub fn cold_start(&self) -> Trajectory {
        rollout(self.x0, EgoControl::default(), self.path, &self.horizon)
    }
}

impl StagedNlp<NZ, NX> for OcpProblem<'_> {
    fn num_stages(&self) -> usize {
        self.horizon.nodes()
    }

    fn evaluate(&self, z: &[StageVec]) -> NlpEval<NZ, NX> {
        let n = self.horizon.nodes();
        let dt = self.horizon.dt();
        let diag = self.cost_diag();
        let grad = (0..n)
            .map(|k| {
                let mut g = StageVec::from_fn(|i, _| self.quadrature_weight(k) * diag[i] * z[k][i]);
                if k == n - 1 {
                    g[0] -= self.weights.alpha_s;
                }
                g
            })
            .collect();

        let kr: Vec<[f64; 3]> = z.iter().map(|v| self.path.curvature_derivatives(v[0])).collect();
        let fs: Vec<StateVec> = z.iter().zip(&kr).map(|(v, k)| f_vec(v, k[0])).collect();
        let js: Vec<SMatrix<f64, NX, NZ>> = z.iter().zip(&kr).map(|(v, k)| f_jac(v, *k)).collect();
        let sel = SMatrix::<f64, NX, NZ>::from_fn(|r, c| if r == c { 1.0 } else { 0.0 });
        // d(B u)/dz: the held control enters the defect at both ends.
        let ctrl = SMatrix::<f64, NX, NZ>::from_fn(|r, c| if (r, c) == (3, 5) || (r, c) == (4, 6) { 1.0 } else { 0.0 });
        let state_part = |j: &SMatrix<f64, NX, NZ>| SMatrix::<f64, NX, NZ>::from_fn(|r, c| if c < NX { j[(r, c)] } else { 0.0 });
        let x0 = StateVec::from(self.x0.to_array());
        let eq = (0..n)
            .map(|b| {
                if b == 0 {
                    EqBlock { val: z[0].fixed_rows::<NX>(0) - x0, jac_prev: SMatrix::zeros(), jac_cur: sel }
                } else {
                    let val = defect(&z[b - 1], &z[b], &fs[b - 1], &fs[b], dt);
                    EqBlock { val, jac_prev: -sel - js[b - 1] * (0.5 * dt) - ctrl * (0.5 * dt), jac_cur: sel - state_part(&js[b]) * (0.5 * dt) }
                }
            })
            .collect();

        let (ineq_val, ineq_jac) = (0..n).map(|k| self.ineq_rows(k, &z[k])).unzip();
        NlpEval { objective: self.objective(z), grad, eq, ineq_val, ineq_jac }
    }

    fn merit_terms(&self, z: &[StageVec]) -> (f64, f64) {
        let n = self.horizon.nodes();
        let dt = self.horizon.dt();
        let x0 = StateVec::from(self.x0.to_array());
        let mut viol = (z[0].fixed_rows::<NX>(0) - x0).abs().sum();
        let fs: Vec<StateVec> = z.iter().map(|v| f_vec(v, self.path.curvature_extended(v[0]))).collect();
        for b in 1..n {
            viol += defect(&z[b - 1], &z[b], &fs[b - 1], &fs[b], dt).abs().sum();
        }
        for (k, v) in z.iter().enumerate() {
            let (x, u) = split(v);
            viol += self
                .node_residuals(k, &x, &u)
                .iter()
                .map(|r| r.max(0.0))
                .sum::<f64>();
        }
        (self.objective(z), viol)
    }

    fn lagrangian_hessian(&self, z: &[StageVec], eq_mult: &[StateVec], ineq_mult: &[Vec<f64>]) -> Vec<SMatrix<f64, NZ, NZ>> {
        let n = self.horizon.nodes();
        let dt = self.horizon.dt();
        let diag = self.cost_diag();
        (0..n)
            .map(|k| {
                let mut h = SMatrix::<f64, NZ, NZ>::zeros();
                for i in 0..NZ {
                    h[(i, i)] = self.quadrature_weight(k) * diag[i];
                }
                let mut sym = |a: usize, b: usize, v: f64| {
                    if a == b {
                        h[(a, a)] += v;
                    } else {
                        h[(a, b)] += v;
                        h[(b, a)] += v;
                    }
                };
                // Dynamics: stage k enters block k (k >= 1) and block k + 1.
                let mut mu = StateVec::zeros();
                if k >= 1 {
                    mu += eq_mult[k];
                }
                if k + 1 < n {
                    mu += eq_mult[k + 1];
                }
                let c = -0.5 * dt;
                let [_, dkr, ddkr] = self.path.curvature_derivatives(z[k][0]);
                let v = z[k][4];
                sym(2, 4, c * mu[1]);
                sym(4, 3, c * mu[2]);
                sym(4, 0, -c * mu[2] * dkr);
                sym(0, 0, -c * mu[2] * v * ddkr);

                let l = &ineq_mult[k];
                let ev = self.corridor.evaluate(z[k][0], k, self.zeta);
                sym(0, 0, l[1] * ev.d_lo[2] - l[2] * ev.d_hi[2]);
                let kap = z[k][3];
                let dl = l[5] - l[6];
                sym(3, 4, dl * 2.0 * v);
                sym(4, 4, dl * 2.0 * kap);
                h
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct OcpSolution {
    pub trajectory: Trajectory,
    pub objective: f64,
    pub max_violation: f64,
    pub status: SolveStatus,
    pub iterations: usize,
    pub eq_mult: Vec<StateVec>,
    pub ineq_mult: Vec<Vec<f64>>,
    pub merit_history: Vec<(f64, f64)>,
}

impl OcpSolution {
    fn from_result(res: SqpResult<NZ, NX>) -> Self {
        Self {
            trajectory: Trajectory::from_stages(&res.z),
            objective: res.objective,
            max_violation: res.max_violation,
            status: res.status,
            iterations: res.iterations,
            eq_mult: res.eq_mult,
            ineq_mult: res.ineq_mult,
            merit_history: res.merit_history,
        }
    }

    /// Warm start from this solution, multipliers included.
    pub fn warm_start(&self) -> WarmStart<NZ, NX> {
        WarmStart {
            z: self.trajectory.to_stages(),
            eq_mult: Some(self.eq_mult.clone()),
            ineq_mult: Some(self.ineq_mult.clone()),
        }
    }
}
