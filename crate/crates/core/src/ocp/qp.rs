//! Stage-structured convex QP with elastic inequalities.
//!
//! ```text
//! min  sum_i 1/2 d_i' H_i d_i + g_i' d_i + rho * sum t
//! s.t. c_b + L_b d_{b-1} + R_b d_b = 0        (block b touches stages b-1, b)
//!      b_ij + a_ij' d_i <= t_ij,  t >= 0
//! ```
//!
//! Solved by a Mehrotra predictor-corrector primal-dual method. The
//! elastic variables are eliminated per row, leaving a block-diagonal
//! primal matrix; the equality multipliers follow from a block-tridiagonal
//! Schur complement.

use nalgebra::{Cholesky, SMatrix, SVector};

#[derive(Debug, Clone)]
pub struct QpStage<const NZ: usize> {
    pub hess: SMatrix<f64, NZ, NZ>,
    pub grad: SVector<f64, NZ>,
    /// Inequality rows `a' d + b <= 0`.
    pub ineq_jac: Vec<SVector<f64, NZ>>,
    pub ineq_val: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct EqBlock<const NZ: usize, const NE: usize> {
    pub val: SVector<f64, NE>,
    /// Jacobian with respect to the previous stage; ignored for block 0.
    pub jac_prev: SMatrix<f64, NE, NZ>,
    pub jac_cur: SMatrix<f64, NE, NZ>,
}

#[derive(Debug, Clone)]
pub struct StagedQp<const NZ: usize, const NE: usize> {
    pub stages: Vec<QpStage<NZ>>,
    /// One block per stage.
    pub eq: Vec<EqBlock<NZ, NE>>,
    pub penalty: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QpOptions {
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for QpOptions {
    fn default() -> Self {
        Self { tolerance: 1e-9, max_iterations: 80 }
    }
}

#[derive(Debug, Clone)]
pub struct QpSolution<const NZ: usize, const NE: usize> {
    pub step: Vec<SVector<f64, NZ>>,
    pub eq_mult: Vec<SVector<f64, NE>>,
    pub ineq_mult: Vec<Vec<f64>>,
    /// Elastic violation `t` per inequality row.
    pub elastic: Vec<Vec<f64>>,
    pub iterations: usize,
    pub converged: bool,
}

impl<const NZ: usize, const NE: usize> QpSolution<NZ, NE> {
    pub fn elastic_total(&self) -> f64 {
        self.elastic.iter().flatten().sum()
    }
}

/// Per-row interior-point variables.
#[derive(Debug, Clone, Default)]
struct RowVars {
    lambda: Vec<f64>,
    w: Vec<f64>,
    t: Vec<f64>,
    nu: Vec<f64>,
}

struct Factor<const NZ: usize, const NE: usize> {
    phi: Vec<Cholesky<f64, nalgebra::Const<NZ>>>,
    /// `Phi_i^-1 R_i'`.
    x_cur: Vec<SMatrix<f64, NZ, NE>>,
    /// `Phi_i^-1 L_{i+1}'`.
    x_next: Vec<SMatrix<f64, NZ, NE>>,
    /// Factored block-tridiagonal pivots.
    pivots: Vec<Cholesky<f64, nalgebra::Const<NE>>>,
    /// Off-diagonal `S_{b, b+1}`.
    upper: Vec<SMatrix<f64, NE, NE>>,
}

fn chol_regularized<const K: usize>(mut m: SMatrix<f64, K, K>) -> Cholesky<f64, nalgebra::Const<K>> {
    m = 0.5 * (m + m.transpose());
    let scale = m.diagonal().amax().max(1.0);
    let mut reg = 0.0;
    loop {
        let mut trial = m;
        for i in 0..K {
            trial[(i, i)] += reg;
        }
        if let Some(c) = Cholesky::new(trial) {
            return c;
        }
        reg = if reg == 0.0 { 1e-12 * scale } else { reg * 100.0 };
    }
}

impl<const NZ: usize, const NE: usize> StagedQp<NZ, NE> {
    fn num_stages(&self) -> usize {
        self.stages.len()
    }

    /// `C' y` restricted to stage `i`.
    fn ct_y(&self, y: &[SVector<f64, NE>], i: usize) -> SVector<f64, NZ> {
        let mut out = self.eq[i].jac_cur.transpose() * y[i];
        if i + 1 < self.num_stages() {
            out += self.eq[i + 1].jac_prev.transpose() * y[i + 1];
        }
        out
    }

    /// `C d` for block `b` (without the constant).
    fn c_d(&self, d: &[SVector<f64, NZ>], b: usize) -> SVector<f64, NE> {
        let mut out = self.eq[b].jac_cur * d[b];
        if b > 0 {
            out += self.eq[b].jac_prev * d[b - 1];
        }
        out
    }

    fn factor(&self, inv_d: &[Vec<f64>]) -> Factor<NZ, NE> {
        let n = self.num_stages();
        let mut phi = Vec::with_capacity(n);
        let mut x_cur = Vec::with_capacity(n);
        let mut x_next = Vec::with_capacity(n);
        for (i, st) in self.stages.iter().enumerate() {
            let mut m = st.hess;
            for (a, &s) in st.ineq_jac.iter().zip(&inv_d[i]) {
                m += (a * a.transpose()) * s;
            }
            let c = chol_regularized(m);
            x_cur.push(c.solve(&self.eq[i].jac_cur.transpose()));
            x_next.push(if i + 1 < n { c.solve(&self.eq[i + 1].jac_prev.transpose()) } else { SMatrix::zeros() });
            phi.push(c);
        }
        let mut pivots: Vec<Cholesky<f64, nalgebra::Const<NE>>> = Vec::with_capacity(n);
        let mut upper = Vec::with_capacity(n);
        for b in 0..n {
            let mut s_bb = self.eq[b].jac_cur * x_cur[b];
            if b > 0 {
                s_bb += self.eq[b].jac_prev * x_next[b - 1];
                // Eliminate the coupling to block b - 1.
                let s_prev: SMatrix<f64, NE, NE> = upper[b - 1];
                let z = pivots[b - 1].solve(&s_prev);
                s_bb -= s_prev.transpose() * z;
            }
            upper.push(if b + 1 < n { self.eq[b].jac_cur * x_next[b] } else { SMatrix::zeros() });
            pivots.push(chol_regularized(s_bb));
        }
        Factor { phi, x_cur, x_next, pivots, upper }
    }

    /// Solves `Phi dd + C' dy = a`, `C dd = e`.
    fn solve_kkt(
        &self,
        f: &Factor<NZ, NE>,
        a: &[SVector<f64, NZ>],
        e: &[SVector<f64, NE>],
    ) -> (Vec<SVector<f64, NZ>>, Vec<SVector<f64, NE>>) {
        let n = self.num_stages();
        let phi_a: Vec<SVector<f64, NZ>> = (0..n).map(|i| f.phi[i].solve(&a[i])).collect();
        // Schur right-hand side: C Phi^-1 a - e.
        let mut rhs: Vec<SVector<f64, NE>> = (0..n).map(|b| self.c_d(&phi_a, b) - e[b]).collect();
        for b in 1..n {
            let corr = f.upper[b - 1].transpose() * f.pivots[b - 1].solve(&rhs[b - 1]);
            rhs[b] -= corr;
        }
        let mut dy = vec![SVector::<f64, NE>::zeros(); n];
        for b in (0..n).rev() {
            let mut r = rhs[b];
            if b + 1 < n {
                r -= f.upper[b] * dy[b + 1];
            }
            dy[b] = f.pivots[b].solve(&r);
        }
        let dd = (0..n)
            .map(|i| {
                let mut v = phi_a[i] - f.x_cur[i] * dy[i];
                if i + 1 < n {
                    v -= f.x_next[i] * dy[i + 1];
                }
                v
            })
            .collect();
        (dd, dy)
    }

    pub fn solve(&self, opts: &QpOptions) -> QpSolution<NZ, NE> {
        let n = self.num_stages();
        assert_eq!(self.eq.len(), n, "one equality block per stage");
        let rho = self.penalty;
        let mut d = vec![SVector::<f64, NZ>::zeros(); n];
        let mut y = vec![SVector::<f64, NE>::zeros(); n];
        let mut rows: Vec<RowVars> = self
            .stages
            .iter()
            .map(|st| {
                let t: Vec<f64> = st.ineq_val.iter().map(|&b| b.max(0.0) + 1.0).collect();
                let w: Vec<f64> = st.ineq_val.iter().zip(&t).map(|(&b, &t)| t - b).collect();
                let lambda = vec![(0.5 * rho).min(1.0); t.len()];
                let nu: Vec<f64> = lambda.iter().map(|&l| rho - l).collect();
                RowVars { lambda, w, t, nu }
            })
            .collect();
        let m_total: usize = rows.iter().map(|r| r.lambda.len()).sum();

        let scale = 1.0
            + self
                .stages
                .iter()
                .map(|s| s.grad.amax())
                .chain(self.eq.iter().map(|e| e.val.amax()))
                .fold(0.0, f64::max);

        let mut converged = false;
        let mut iterations = 0;
        for it in 0..opts.max_iterations {
            iterations = it + 1;
            // Residuals.
            let r_d: Vec<SVector<f64, NZ>> = (0..n)
                .map(|i| {
                    let st = &self.stages[i];
                    let mut r = st.hess * d[i] + st.grad + self.ct_y(&y, i);
                    for (a, &l) in st.ineq_jac.iter().zip(&rows[i].lambda) {
                        r += a * l;
                    }
                    r
                })
                .collect();
            let r_e: Vec<SVector<f64, NE>> = (0..n).map(|b| self.eq[b].val + self.c_d(&d, b)).collect();
            let r_i: Vec<Vec<f64>> = (0..n)
                .map(|i| {
                    let st = &self.stages[i];
                    let rv = &rows[i];
                    (0..st.ineq_val.len())
                        .map(|j| st.ineq_val[j] + st.ineq_jac[j].dot(&d[i]) - rv.t[j] + rv.w[j])
                        .collect()
                })
                .collect();
            let r_t: Vec<Vec<f64>> =
                rows.iter().map(|rv| rv.lambda.iter().zip(&rv.nu).map(|(l, v)| rho - l - v).collect()).collect();

            let mu = if m_total > 0 {
                rows.iter()
                    .map(|rv| {
                        rv.lambda.iter().zip(&rv.w).map(|(l, w)| l * w).sum::<f64>()
                            + rv.nu.iter().zip(&rv.t).map(|(v, t)| v * t).sum::<f64>()
                    })
                    .sum::<f64>()
                    / (2 * m_total) as f64
            } else {
                0.0
            };
            let res = r_d
                .iter()
                .map(|v| v.amax())
                .chain(r_e.iter().map(|v| v.amax()))
                .chain(r_i.iter().flatten().map(|v| v.abs()))
                .chain(r_t.iter().flatten().map(|v| v.abs()))
                .fold(0.0, f64::max);
            if res <= opts.tolerance * scale && mu <= opts.tolerance {
                converged = true;
                iterations = it;
                break;
            }

            let inv_d: Vec<Vec<f64>> = rows
                .iter()
                .map(|rv| (0..rv.lambda.len()).map(|j| 1.0 / (rv.t[j] / rv.nu[j] + rv.w[j] / rv.lambda[j])).collect())
                .collect();
            let factor = self.factor(&inv_d);

            let direction = |rc1: &dyn Fn(usize, usize) -> f64, rc2: &dyn Fn(usize, usize) -> f64| {
                let q: Vec<Vec<f64>> = (0..n)
                    .map(|i| {
                        let rv = &rows[i];
                        (0..rv.lambda.len())
                            .map(|j| r_i[i][j] + (rc2(i, j) + rv.t[j] * r_t[i][j]) / rv.nu[j] - rc1(i, j) / rv.lambda[j])
                            .collect()
                    })
                    .collect();
                let a: Vec<SVector<f64, NZ>> = (0..n)
                    .map(|i| {
                        let mut v = -r_d[i];
                        for (j, row) in self.stages[i].ineq_jac.iter().enumerate() {
                            v -= row * (q[i][j] * inv_d[i][j]);
                        }
                        v
                    })
                    .collect();
                let e: Vec<SVector<f64, NE>> = r_e.iter().map(|v| -v).collect();
                let (dd, dy) = self.solve_kkt(&factor, &a, &e);
                let mut drows = rows.clone();
                for i in 0..n {
                    let rv = &rows[i];
                    for j in 0..rv.lambda.len() {
                        let dl = (self.stages[i].ineq_jac[j].dot(&dd[i]) + q[i][j]) * inv_d[i][j];
                        let dnu = r_t[i][j] - dl;
                        let dw = (-rc1(i, j) - rv.w[j] * dl) / rv.lambda[j];
                        let dt = (-rc2(i, j) - rv.t[j] * dnu) / rv.nu[j];
                        drows[i].lambda[j] = dl;
                        drows[i].nu[j] = dnu;
                        drows[i].w[j] = dw;
                        drows[i].t[j] = dt;
                    }
                }
                (dd, dy, drows)
            };

            let max_step = |drows: &[RowVars], frac: f64| {
                let mut alpha: f64 = 1.0;
                for (rv, dv) in rows.iter().zip(drows) {
                    for (vals, dvals) in [(&rv.lambda, &dv.lambda), (&rv.w, &dv.w), (&rv.t, &dv.t), (&rv.nu, &dv.nu)] {
                        for (v, dv) in vals.iter().zip(dvals) {
                            if *dv < 0.0 {
                                alpha = alpha.min(-frac * v / dv);
                            }
                        }
                    }
                }
                alpha
            };

            // Predictor.
            let rc1_aff = |i: usize, j: usize| rows[i].lambda[j] * rows[i].w[j];
            let rc2_aff = |i: usize, j: usize| rows[i].nu[j] * rows[i].t[j];
            let (dd_a, dy_a, dr_a) = direction(&rc1_aff, &rc2_aff);
            if m_total == 0 {
                for i in 0..n {
                    d[i] += dd_a[i];
                    y[i] += dy_a[i];
                }
                continue;
            }
            let alpha_aff = max_step(&dr_a, 1.0);
            let mu_aff = rows
                .iter()
                .zip(&dr_a)
                .map(|(rv, dv)| {
                    (0..rv.lambda.len())
                        .map(|j| {
                            (rv.lambda[j] + alpha_aff * dv.lambda[j]) * (rv.w[j] + alpha_aff * dv.w[j])
                                + (rv.nu[j] + alpha_aff * dv.nu[j]) * (rv.t[j] + alpha_aff * dv.t[j])
                        })
                        .sum::<f64>()
                })
                .sum::<f64>()
                / (2 * m_total) as f64;
            let sigma = (mu_aff / mu).powi(3).clamp(0.0, 1.0);

            // Corrector.
            let rc1 = |i: usize, j: usize| rows[i].lambda[j] * rows[i].w[j] + dr_a[i].lambda[j] * dr_a[i].w[j] - sigma * mu;
            let rc2 = |i: usize, j: usize| rows[i].nu[j] * rows[i].t[j] + dr_a[i].nu[j] * dr_a[i].t[j] - sigma * mu;
            let (dd, dy, dr) = direction(&rc1, &rc2);
            let alpha = max_step(&dr, 0.995);

            for i in 0..n {
                d[i] += dd[i] * alpha;
                y[i] += dy[i] * alpha;
                let (rv, dv) = (&mut rows[i], &dr[i]);
                for j in 0..rv.lambda.len() {
                    rv.lambda[j] += alpha * dv.lambda[j];
                    rv.w[j] += alpha * dv.w[j];
                    rv.t[j] += alpha * dv.t[j];
                    rv.nu[j] += alpha * dv.nu[j];
                }
            }
        }

        QpSolution {
            step: d,
            eq_mult: y,
            ineq_mult: rows.iter().map(|r| r.lambda.clone()).collect(),
            elastic: rows.iter().map(|r| r.t.clone()).collect(),
            iterations,
            converged,
        }
    }
}
