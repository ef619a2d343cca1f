//! Ego kinematics in the Frenet frame, obstacle motion models and the
//! classical RK4 integrator.

use serde::{Deserialize, Serialize};

/// Frenet state `(s, d, chi, kappa, v)`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EgoState {
    pub s: f64,
    pub d: f64,
    pub chi: f64,
    pub kappa: f64,
    pub v: f64,
}

impl EgoState {
    pub const DIM: usize = 5;

    pub fn new(s: f64, d: f64, chi: f64, kappa: f64, v: f64) -> Self {
        Self { s, d, chi, kappa, v }
    }

    pub fn to_array(self) -> [f64; 5] {
        [self.s, self.d, self.chi, self.kappa, self.v]
    }

    pub fn from_array(a: [f64; 5]) -> Self {
        Self::new(a[0], a[1], a[2], a[3], a[4])
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

/// Curvature rate `u1` [1/(m s)] and acceleration `u2` [m/s^2].
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EgoControl {
    pub u1: f64,
    pub u2: f64,
}

impl EgoControl {
    pub const DIM: usize = 2;

    pub fn new(u1: f64, u2: f64) -> Self {
        Self { u1, u2 }
    }

    pub fn lerp(self, other: Self, t: f64) -> Self {
        Self::new(self.u1 + (other.u1 - self.u1) * t, self.u2 + (other.u2 - self.u2) * t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlBounds {
    pub u1_min: f64,
    pub u1_max: f64,
    pub u2_min: f64,
    pub u2_max: f64,
}

impl Default for ControlBounds {
    fn default() -> Self {
        Self { u1_min: -0.3, u1_max: 0.3, u2_min: -3.0, u2_max: 2.0 }
    }
}

impl ControlBounds {
    pub fn is_valid(&self) -> bool {
        self.u1_min <= self.u1_max && self.u2_min <= self.u2_max
    }

    pub fn clamp(&self, u: EgoControl) -> EgoControl {
        EgoControl::new(u.u1.clamp(self.u1_min, self.u1_max), u.u2.clamp(self.u2_min, self.u2_max))
    }

    pub fn contains(&self, u: EgoControl) -> bool {
        (self.u1_min..=self.u1_max).contains(&u.u1) && (self.u2_min..=self.u2_max).contains(&u.u2)
    }
}

/// Right-hand side of the Frenet point-mass model.
pub fn ego_derivative(x: EgoState, u: EgoControl, kappa_r: f64) -> EgoState {
    EgoState {
        s: x.v,
        d: x.v * x.chi,
        chi: x.v * (x.kappa - kappa_r),
        kappa: u.u1,
        v: u.u2,
    }
}

/// Jacobians `(df/dx, df/du)` of [`ego_derivative`], where the reference
/// curvature is a function of `s` with `kappa_r = [k, dk/ds, d2k/ds2]`.
pub fn ego_jacobian(x: EgoState, kappa_r: [f64; 3]) -> ([[f64; 5]; 5], [[f64; 2]; 5]) {
    let mut a = [[0.0; 5]; 5];
    a[0][4] = 1.0;
    a[1][2] = x.v;
    a[1][4] = x.chi;
    a[2][0] = -x.v * kappa_r[1];
    a[2][3] = x.v;
    a[2][4] = x.kappa - kappa_r[0];
    let mut b = [[0.0; 2]; 5];
    b[3][0] = 1.0;
    b[4][1] = 1.0;
    (a, b)
}

/// One classical fourth-order Runge-Kutta step of `dx/dt = f(t, x)`.
pub fn rk4_step<const N: usize>(x: [f64; N], t: f64, dt: f64, f: impl Fn(f64, &[f64; N]) -> [f64; N]) -> [f64; N] {
    let axpy = |x: &[f64; N], k: &[f64; N], h: f64| -> [f64; N] { std::array::from_fn(|i| x[i] + h * k[i]) };
    let k1 = f(t, &x);
    let k2 = f(t + 0.5 * dt, &axpy(&x, &k1, 0.5 * dt));
    let k3 = f(t + 0.5 * dt, &axpy(&x, &k2, 0.5 * dt));
    let k4 = f(t + dt, &axpy(&x, &k3, dt));
    std::array::from_fn(|i| x[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotionKind {
    #[serde(alias = "cv")]
    ConstantVelocity,
    #[serde(alias = "cca")]
    ConstantCurvatureAcceleration,
}

/// Obstacle motion model. The heading lives in [`ObstacleState`]; the
/// model carries speed, path curvature and acceleration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObstacleMotionModel {
    pub kind: MotionKind,
    pub speed: f64,
    #[serde(default)]
    pub curvature: f64,
    #[serde(default)]
    pub acceleration: f64,
}

impl ObstacleMotionModel {
    pub fn constant_velocity(speed: f64) -> Self {
        Self { kind: MotionKind::ConstantVelocity, speed, curvature: 0.0, acceleration: 0.0 }
    }

    pub fn cca(speed: f64, curvature: f64, acceleration: f64) -> Self {
        Self { kind: MotionKind::ConstantCurvatureAcceleration, speed, curvature, acceleration }
    }

    pub fn is_static(&self) -> bool {
        self.speed == 0.0 && self.effective_acceleration() <= 0.0
    }

    fn effective_curvature(&self) -> f64 {
        match self.kind {
            MotionKind::ConstantVelocity => 0.0,
            MotionKind::ConstantCurvatureAcceleration => self.curvature,
        }
    }

    fn effective_acceleration(&self) -> f64 {
        match self.kind {
            MotionKind::ConstantVelocity => 0.0,
            MotionKind::ConstantCurvatureAcceleration => self.acceleration,
        }
    }

    /// Right-hand side on `(x, y, heading, speed)`.
    pub fn derivative(&self, state: &[f64; 4]) -> [f64; 4] {
        let [_, _, theta, v] = *state;
        let v = v.max(0.0);
        let a = self.effective_acceleration();
        let dv = if v <= 0.0 && a < 0.0 { 0.0 } else { a };
        [v * theta.cos(), v * theta.sin(), self.effective_curvature() * v, dv]
    }

    /// Advances a planar state by one RK4 step; speed never goes negative.
    pub fn step(&self, state: ObstacleState, dt: f64) -> ObstacleState {
        let next = rk4_step(state.to_array(), 0.0, dt, |_, x| self.derivative(x));
        let mut out = ObstacleState::from_array(next);
        out.speed = out.speed.max(0.0);
        out
    }
}

/// Planar pose and speed of an obstacle anchor.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ObstacleState {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub speed: f64,
}

impl ObstacleState {
    pub fn to_array(self) -> [f64; 4] {
        [self.x, self.y, self.heading, self.speed]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self { x: a[0], y: a[1], heading: a[2], speed: a[3] }
    }
}

/// Anchor pose in the `(s, d)` plane.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AnchorPose {
    pub s: f64,
    pub d: f64,
    pub theta: f64,
}

/// Anchor trajectory for `k = 0..=steps`, integrating the model in the
/// Frenet plane as if it were Euclidean.
pub fn predict_anchor(model: &ObstacleMotionModel, anchor: AnchorPose, dt: f64, steps: usize) -> Vec<AnchorPose> {
    assert!(dt > 0.0, "prediction step must be positive");
    let mut state = ObstacleState { x: anchor.s, y: anchor.d, heading: anchor.theta, speed: model.speed.max(0.0) };
    let mut out = Vec::with_capacity(steps + 1);
    out.push(anchor);
    for _ in 0..steps {
        state = model.step(state, dt);
        out.push(AnchorPose { s: state.x, d: state.y, theta: state.heading });
    }
    out
}

/// Cartesian ego state `(x, y, heading, kappa, v)` used by the simulator.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CartesianState {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub kappa: f64,
    pub v: f64,
}

impl CartesianState {
    pub fn to_array(self) -> [f64; 5] {
        [self.x, self.y, self.heading, self.kappa, self.v]
    }

    pub fn from_array(a: [f64; 5]) -> Self {
        Self { x: a[0], y: a[1], heading: a[2], kappa: a[3], v: a[4] }
    }
}

pub fn cartesian_derivative(x: &[f64; 5], u: EgoControl) -> [f64; 5] {
    let [_, _, psi, kappa, v] = *x;
    [v * psi.cos(), v * psi.sin(), v * kappa, u.u1, u.u2]
}

/// Advances the Cartesian ego model under a zero-order-hold control.
/// The vehicle does not reverse: speed is floored at zero.
pub fn step_cartesian(state: CartesianState, u: EgoControl, dt: f64) -> CartesianState {
    let mut u = u;
    // Braking below standstill would reverse; stop at zero instead.
    let stop_time = if u.u2 < 0.0 && state.v > 0.0 { state.v / -u.u2 } else { f64::INFINITY };
    if state.v <= 0.0 && u.u2 < 0.0 {
        u.u2 = 0.0;
    }
    if stop_time < dt {
        let mid = rk4_step(state.to_array(), 0.0, stop_time, |_, x| cartesian_derivative(x, u));
        let mut rest = mid;
        rest[4] = 0.0;
        let held = EgoControl::new(u.u1, 0.0);
        let out = rk4_step(rest, 0.0, dt - stop_time, |_, x| cartesian_derivative(x, held));
        return CartesianState::from_array(out);
    }
    let mut out = CartesianState::from_array(rk4_step(state.to_array(), 0.0, dt, |_, x| cartesian_derivative(x, u)));
    out.v = out.v.max(0.0);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn derivative_examples() {
        let f = ego_derivative(EgoState::new(0.0, 0.0, 0.0, 0.0, 5.0), EgoControl::default(), 0.0);
        assert_eq!(f.to_array(), [5.0, 0.0, 0.0, 0.0, 0.0]);
        let f = ego_derivative(EgoState::new(0.0, 0.0, 0.1, 0.0, 5.0), EgoControl::default(), 0.0);
        assert!(close(f.d, 0.5, 1e-15));
        let f = ego_derivative(EgoState::new(0.0, 0.0, 0.0, 0.2, 5.0), EgoControl::default(), 0.2);
        assert_eq!(f.chi, 0.0);
    }

    #[test]
    fn derivative_linear_in_controls() {
        let x = EgoState::new(1.0, 0.3, -0.1, 0.05, 4.0);
        let a = ego_derivative(x, EgoControl::new(0.1, 0.5), 0.02).to_array();
        let b = ego_derivative(x, EgoControl::new(0.3, -1.5), 0.02).to_array();
        for i in 0..3 {
            assert_eq!(a[i], b[i]);
        }
        assert!(close(b[3] - a[3], 0.2, 1e-15) && close(b[4] - a[4], -2.0, 1e-15));
    }

    #[test]
    fn cv_displacement_exact() {
        let model = ObstacleMotionModel::constant_velocity(4.0);
        let out = model.step(ObstacleState { x: 0.0, y: 0.0, heading: 0.0, speed: 4.0 }, 0.14);
        assert!(close(out.x, 0.56, 1e-15) && out.y == 0.0);
    }

    #[test]
    fn zero_state_is_fixed_point() {
        let x = rk4_step([0.0; 5], 0.0, 0.1, |_, x| ego_derivative(EgoState::from_array(*x), EgoControl::default(), 0.0).to_array());
        assert_eq!(x, [0.0; 5]);
    }

    #[test]
    fn anchor_prediction_cv_and_cca() {
        let cv = predict_anchor(
            &ObstacleMotionModel::constant_velocity(4.0),
            AnchorPose { s: 10.0, d: 0.0, theta: 0.0 },
            0.14,
            25,
        );
        assert_eq!(cv.len(), 26);
        assert!(close(cv[25].s, 24.0, 1e-12));

        let cca = predict_anchor(&ObstacleMotionModel::cca(2.0, 0.0, 1.0), AnchorPose::default(), 0.1, 30);
        for (k, p) in cca.iter().enumerate() {
            let t = k as f64 * 0.1;
            assert!(close(p.s, 2.0 * t + 0.5 * t * t, 1e-9));
        }
    }

    #[test]
    fn cca_deceleration_stops_without_reversing() {
        let model = ObstacleMotionModel::cca(1.0, 0.0, -2.0);
        let path = predict_anchor(&model, AnchorPose::default(), 0.1, 30);
        let last = path.last().unwrap();
        assert!(path.windows(2).all(|w| w[1].s >= w[0].s - 1e-12));
        assert!(last.s < 0.3);
    }

    #[test]
    fn cartesian_step_floors_speed() {
        let s = CartesianState { v: 0.2, ..Default::default() };
        let out = step_cartesian(s, EgoControl::new(0.0, -3.0), 0.14);
        assert_eq!(out.v, 0.0);
        assert!(out.x > 0.0 && out.x < 0.2 * 0.14);
    }
}
