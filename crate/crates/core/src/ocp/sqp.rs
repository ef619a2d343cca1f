//! Sequential quadratic programming for stage-structured NLPs.
//!
//! Each iteration builds a QP from the exact block-diagonal Lagrangian
//! Hessian (eigenvalues clamped to keep it positive definite), solves it
//! with elastic inequalities and globalizes with an Armijo backtracking
//! line search on the L1 exact-penalty merit function.

use nalgebra::{DMatrix, SMatrix, SVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use super::qp::{EqBlock, QpOptions, QpStage, StagedQp};

/// Values and first derivatives of a stage-structured NLP.
#[derive(Debug, Clone)]
pub struct NlpEval<const NZ: usize, const NE: usize> {
    pub objective: f64,
    pub grad: Vec<SVector<f64, NZ>>,
    pub eq: Vec<EqBlock<NZ, NE>>,
    /// Inequality values `g <= 0` per stage.
    pub ineq_val: Vec<Vec<f64>>,
    pub ineq_jac: Vec<Vec<SVector<f64, NZ>>>,
}

impl<const NZ: usize, const NE: usize> NlpEval<NZ, NE> {
    /// L1 constraint violation.
    pub fn violation(&self) -> f64 {
        self.eq.iter().map(|e| e.val.abs().sum()).sum::<f64>()
            + self.ineq_val.iter().flatten().map(|g| g.max(0.0)).sum::<f64>()
    }

    /// Max-norm constraint violation.
    pub fn max_violation(&self) -> f64 {
        self.eq
            .iter()
            .map(|e| e.val.amax())
            .chain(self.ineq_val.iter().flatten().map(|g| g.max(0.0)))
            .fold(0.0, f64::max)
    }
}

/// A problem whose variables split into stages `z_0..z_{n-1}`, with a
/// stage-separable objective, per-stage inequalities and equality block
/// `b` coupling stages `b - 1` and `b`.
pub trait StagedNlp<const NZ: usize, const NE: usize> {
    fn num_stages(&self) -> usize;

    fn evaluate(&self, z: &[SVector<f64, NZ>]) -> NlpEval<NZ, NE>;

    /// `(objective, L1 violation)` without derivatives.
    fn merit_terms(&self, z: &[SVector<f64, NZ>]) -> (f64, f64) {
        let e = self.evaluate(z);
        (e.objective, e.violation())
    }

    /// Per-stage Hessian of `f + y'c + lambda'g`.
    fn lagrangian_hessian(
        &self,
        z: &[SVector<f64, NZ>],
        eq_mult: &[SVector<f64, NE>],
        ineq_mult: &[Vec<f64>],
    ) -> Vec<SMatrix<f64, NZ, NZ>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SolveStatus {
    Converged,
    IterationLimit,
    Infeasible,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SqpOptions {
    pub max_iterations: usize,
    /// Feasibility tolerance (max norm).
    pub feasibility_tol: f64,
    /// Step-size tolerance relative to the iterate scale.
    pub step_tol: f64,
    pub initial_penalty: f64,
    pub max_penalty: f64,
    pub hessian_floor: f64,
    pub armijo: f64,
    pub min_step: f64,
    pub qp: QpOptions,
}

impl Default for SqpOptions {
    fn default() -> Self {
        Self {
            max_iterations: 30,
            feasibility_tol: 1e-6,
            step_tol: 1e-7,
            initial_penalty: 10.0,
            max_penalty: 1e6,
            hessian_floor: 1e-6,
            armijo: 1e-4,
            min_step: 1e-4,
            qp: QpOptions::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SqpResult<const NZ: usize, const NE: usize> {
    pub z: Vec<SVector<f64, NZ>>,
    pub eq_mult: Vec<SVector<f64, NE>>,
    pub ineq_mult: Vec<Vec<f64>>,
    pub objective: f64,
    pub max_violation: f64,
    pub status: SolveStatus,
    pub iterations: usize,
    /// `(before, after)` merit values of every accepted step, both taken
    /// with the penalty of that step.
    pub merit_history: Vec<(f64, f64)>,
}

/// Starting point with optional multipliers.
#[derive(Debug, Clone)]
pub struct WarmStart<const NZ: usize, const NE: usize> {
    pub z: Vec<SVector<f64, NZ>>,
    pub eq_mult: Option<Vec<SVector<f64, NE>>>,
    pub ineq_mult: Option<Vec<Vec<f64>>>,
}

impl<const NZ: usize, const NE: usize> WarmStart<NZ, NE> {
    pub fn primal(z: Vec<SVector<f64, NZ>>) -> Self {
        Self { z, eq_mult: None, ineq_mult: None }
    }
}

fn clamp_spd<const NZ: usize>(h: SMatrix<f64, NZ, NZ>, floor: f64) -> SMatrix<f64, NZ, NZ> {
    let sym = 0.5 * (h + h.transpose());
    let mut eig = SymmetricEigen::new(DMatrix::from_iterator(NZ, NZ, sym.iter().copied()));
    if eig.eigenvalues.iter().all(|&v| v >= floor) {
        return sym;
    }
    for v in eig.eigenvalues.iter_mut() {
        *v = v.max(floor);
    }
    SMatrix::from_iterator(eig.recompose().iter().copied())
}

struct Iterate<const NZ: usize> {
    z: Vec<SVector<f64, NZ>>,
    objective: f64,
    violation: f64,
}

/// True when `cand` should replace `best`: feasible beats infeasible,
/// among feasible points lower objective wins, otherwise lower violation.
fn better(cand: (f64, f64), best: (f64, f64), tol: f64) -> bool {
    let (cf, cv) = cand;
    let (bf, bv) = best;
    match (cv <= tol, bv <= tol) {
        (true, false) => true,
        (false, true) => false,
        (true, true) => cf < bf,
        (false, false) => cv < bv,
    }
}

pub fn solve<const NZ: usize, const NE: usize>(
    problem: &impl StagedNlp<NZ, NE>,
    start: WarmStart<NZ, NE>,
    opts: &SqpOptions,
) -> SqpResult<NZ, NE> {
    let n = problem.num_stages();
    let mut z = start.z;
    assert_eq!(z.len(), n, "initial guess has wrong stage count");
    let mut eval = problem.evaluate(&z);
    let mut eq_mult = start.eq_mult.filter(|y| y.len() == n).unwrap_or_else(|| vec![SVector::zeros(); n]);
    let mut ineq_mult = start
        .ineq_mult
        .filter(|l| l.len() == n && l.iter().zip(&eval.ineq_val).all(|(a, b)| a.len() == b.len()))
        .unwrap_or_else(|| eval.ineq_val.iter().map(|g| vec![0.0; g.len()]).collect());

    let mut penalty = opts.initial_penalty;
    let mut best = Iterate { z: z.clone(), objective: eval.objective, violation: eval.max_violation() };
    let mut merit_history = Vec::new();
    let mut status = SolveStatus::IterationLimit;
    let mut iterations = 0;
    let mut restored = false;

    while iterations < opts.max_iterations {
        iterations += 1;
        let hess: Vec<SMatrix<f64, NZ, NZ>> = problem
            .lagrangian_hessian(&z, &eq_mult, &ineq_mult)
            .into_iter()
            .map(|h| clamp_spd(h, opts.hessian_floor))
            .collect();
        let qp = build_qp(&eval, &hess, penalty, false);
        let sol = qp.solve(&opts.qp);

        let z_scale = 1.0 + z.iter().map(|v| v.amax()).fold(0.0, f64::max);
        let step_norm = sol.step.iter().map(|v| v.amax()).fold(0.0, f64::max);
        if step_norm <= opts.step_tol * z_scale && eval.max_violation() <= opts.feasibility_tol {
            eq_mult = sol.eq_mult;
            ineq_mult = sol.ineq_mult;
            status = SolveStatus::Converged;
            best = Iterate { z: z.clone(), objective: eval.objective, violation: eval.max_violation() };
            break;
        }

        let mult_norm = sol
            .eq_mult
            .iter()
            .map(|v| v.amax())
            .chain(sol.ineq_mult.iter().flatten().map(|l| l.abs()))
            .fold(0.0, f64::max);
        if sol.elastic_total() > opts.feasibility_tol && eval.max_violation() > opts.feasibility_tol {
            penalty = (penalty * 10.0).min(opts.max_penalty);
        }
        penalty = penalty.max((1.1 * mult_norm + 1e-3).min(opts.max_penalty));

        let accepted = line_search(problem, &z, &eval, &hess, &sol.step, penalty, opts, false);
        let (alpha, trial_merit, merit0) = match accepted {
            Some(a) => a,
            None => {
                // Restoration: a pure feasibility step.
                restored = true;
                let rqp = build_qp(&eval, &hess, 1.0, true);
                let rsol = rqp.solve(&opts.qp);
                match line_search(problem, &z, &eval, &hess, &rsol.step, 1.0, opts, true) {
                    Some((alpha, _, _)) => {
                        for (zi, di) in z.iter_mut().zip(&rsol.step) {
                            *zi += di * alpha;
                        }
                        eval = problem.evaluate(&z);
                        let cand = (eval.objective, eval.max_violation());
                        if better(cand, (best.objective, best.violation), opts.feasibility_tol) {
                            best = Iterate { z: z.clone(), objective: cand.0, violation: cand.1 };
                        }
                        continue;
                    }
                    None => break,
                }
            }
        };
        for (zi, di) in z.iter_mut().zip(&sol.step) {
            *zi += di * alpha;
        }
        merit_history.push((merit0, trial_merit));
        eval = problem.evaluate(&z);
        for (y, ys) in eq_mult.iter_mut().zip(&sol.eq_mult) {
            *y += (ys - *y) * alpha;
        }
        for (l, ls) in ineq_mult.iter_mut().zip(&sol.ineq_mult) {
            for (a, b) in l.iter_mut().zip(ls) {
                *a += (b - *a) * alpha;
            }
        }
        let cand = (eval.objective, eval.max_violation());
        if better(cand, (best.objective, best.violation), opts.feasibility_tol) {
            best = Iterate { z: z.clone(), objective: cand.0, violation: cand.1 };
        }
    }

    if status != SolveStatus::Converged && restored && best.violation > 1e3 * opts.feasibility_tol {
        status = SolveStatus::Infeasible;
    }
    SqpResult {
        z: best.z,
        eq_mult,
        ineq_mult,
        objective: best.objective,
        max_violation: best.violation,
        status,
        iterations,
        merit_history,
    }
}

fn build_qp<const NZ: usize, const NE: usize>(
    eval: &NlpEval<NZ, NE>,
    hess: &[SMatrix<f64, NZ, NZ>],
    penalty: f64,
    feasibility_only: bool,
) -> StagedQp<NZ, NE> {
    let stages = (0..hess.len())
        .map(|i| QpStage {
            hess: if feasibility_only { SMatrix::identity() * 1e-2 } else { hess[i] },
            grad: if feasibility_only { SVector::zeros() } else { eval.grad[i] },
            ineq_jac: eval.ineq_jac[i].clone(),
            ineq_val: eval.ineq_val[i].clone(),
        })
        .collect();
    StagedQp { stages, eq: eval.eq.clone(), penalty }
}

#[allow(clippy::too_many_arguments)]
fn line_search<const NZ: usize, const NE: usize>(
    problem: &impl StagedNlp<NZ, NE>,
    z: &[SVector<f64, NZ>],
    eval: &NlpEval<NZ, NE>,
    hess: &[SMatrix<f64, NZ, NZ>],
    step: &[SVector<f64, NZ>],
    penalty: f64,
    opts: &SqpOptions,
    feasibility_only: bool,
) -> Option<(f64, f64, f64)> {
    let weight = if feasibility_only { 0.0 } else { 1.0 };
    let viol0 = eval.violation();
    let merit0 = weight * eval.objective + penalty * viol0;

    // Predicted reduction of the linearized model.
    let mut lin_obj = 0.0;
    let mut quad = 0.0;
    for i in 0..step.len() {
        lin_obj += eval.grad[i].dot(&step[i]);
        quad += step[i].dot(&(hess[i] * step[i]));
    }
    let mut lin_viol = 0.0;
    for (b, e) in eval.eq.iter().enumerate() {
        let mut v = e.val + e.jac_cur * step[b];
        if b > 0 {
            v += e.jac_prev * step[b - 1];
        }
        lin_viol += v.abs().sum();
    }
    for i in 0..step.len() {
        for (g, a) in eval.ineq_val[i].iter().zip(&eval.ineq_jac[i]) {
            lin_viol += (g + a.dot(&step[i])).max(0.0);
        }
    }
    let pred = weight * (-lin_obj - 0.5 * quad) + penalty * (viol0 - lin_viol);
    let pred = pred.max(1e-12 * (1.0 + merit0.abs()));

    let mut alpha = 1.0;
    let mut trial = z.to_vec();
    while alpha >= opts.min_step {
        for i in 0..z.len() {
            trial[i] = z[i] + step[i] * alpha;
        }
        let (f, v) = problem.merit_terms(&trial);
        let merit = weight * f + penalty * v;
        if merit.is_finite() && merit <= merit0 - opts.armijo * alpha * pred {
            return Some((alpha, merit, merit0));
        }
        alpha *= 0.5;
    }
    None
}
