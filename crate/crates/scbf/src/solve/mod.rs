//! Optimization layer: a conic subproblem solver for quadratic objectives
//! under box, affine and second-order-cone constraints, plus a
//! sequential-convex-programming outer loop for the nonconvex one-shot
//! problem.

mod ipm;

use nalgebra::{DMatrix, DVector};

use crate::barrier::SocConstraint;
use crate::{Error, Result};

use ipm::{solve_cone_qp, ConeLayout, IpmStatus};

/// Feasibility tolerance: a margin >= -FEAS_TOL counts as satisfied.
pub const FEAS_TOL: f64 = 1e-6;

/// Slack penalty weight in the relaxed SCP subproblems.
pub const SLACK_PENALTY: f64 = 1e4;

/// Convex quadratic program over `x`:
/// minimize `1/2 x' P x + q' x + constant` subject to
/// `lower <= x <= upper` (infinities allowed), `lin_a x <= lin_b`,
/// and `||A x + b|| <= c' x + e` for each cone constraint.
#[derive(Debug, Clone)]
pub struct ConicProblem {
    pub p: DMatrix<f64>,
    pub q: DVector<f64>,
    pub constant: f64,
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
    pub lin_a: DMatrix<f64>,
    pub lin_b: DVector<f64>,
    pub socs: Vec<SocConstraint>,
}

impl ConicProblem {
    /// Unconstrained quadratic over `n` variables.
    pub fn quadratic(p: DMatrix<f64>, q: DVector<f64>) -> Self {
        let n = q.len();
        Self {
            p,
            q,
            constant: 0.0,
            lower: DVector::from_element(n, f64::NEG_INFINITY),
            upper: DVector::from_element(n, f64::INFINITY),
            lin_a: DMatrix::zeros(0, n),
            lin_b: DVector::zeros(0),
            socs: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.q.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.dim();
        if self.p.nrows() != n || self.p.ncols() != n {
            return Err(Error::Dimension {
                context: "ConicProblem objective",
                expected: n,
                got: self.p.nrows(),
            });
        }
        if (&self.p - self.p.transpose()).amax() > 1e-9 * (1.0 + self.p.amax()) {
            return Err(Error::Invariant("objective matrix must be symmetric".into()));
        }
        let eig = self.p.clone().symmetric_eigenvalues();
        let min_eig = eig.min();
        if min_eig < -1e-8 * (1.0 + self.p.amax()) {
            return Err(Error::Invariant(format!(
                "objective matrix must be positive semidefinite (min eigenvalue {min_eig})"
            )));
        }
        if self.lower.len() != n || self.upper.len() != n {
            return Err(Error::Dimension {
                context: "ConicProblem bounds",
                expected: n,
                got: self.lower.len().min(self.upper.len()),
            });
        }
        for i in 0..n {
            if self.lower[i] > self.upper[i] {
                return Err(Error::Invariant(format!(
                    "bounds must satisfy lower <= upper, got [{}, {}] at index {i}",
                    self.lower[i], self.upper[i]
                )));
            }
        }
        if self.lin_a.ncols() != n || self.lin_a.nrows() != self.lin_b.len() {
            return Err(Error::Dimension {
                context: "ConicProblem linear constraints",
                expected: n,
                got: self.lin_a.ncols(),
            });
        }
        for soc in &self.socs {
            if soc.a.ncols() != n || soc.c.len() != n || soc.a.nrows() != soc.b.len() {
                return Err(Error::Dimension {
                    context: "ConicProblem cone constraint",
                    expected: n,
                    got: soc.a.ncols(),
                });
            }
        }
        Ok(())
    }

    /// Objective value at `x`.
    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * (x.transpose() * &self.p * x)[(0, 0)] + self.q.dot(x) + self.constant
    }

    /// Largest constraint violation at `x` (0 when feasible).
    pub fn max_violation(&self, x: &DVector<f64>) -> f64 {
        let mut v: f64 = 0.0;
        for i in 0..self.dim() {
            v = v.max(self.lower[i] - x[i]).max(x[i] - self.upper[i]);
        }
        for i in 0..self.lin_b.len() {
            v = v.max(self.lin_a.row(i).transpose().dot(x) - self.lin_b[i]);
        }
        for soc in &self.socs {
            v = v.max(-soc.margin(x));
        }
        v
    }
}

/// Solver termination status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    IterationLimit,
}

/// Result of a conic or SCP solve.
#[derive(Debug, Clone)]
pub struct SolveResult {
    pub status: SolveStatus,
    pub decision: DVector<f64>,
    pub objective_value: f64,
    pub iterations: usize,
    pub max_violation: f64,
}

/// Solve a convex conic problem with an interior-point method.
///
/// `warm_start` seeds the primal iterate only; the method is
/// deterministic, so identical inputs produce identical outputs.
pub fn solve_conic(problem: &ConicProblem, warm_start: Option<&DVector<f64>>) -> Result<SolveResult> {
    problem.validate()?;
    let n = problem.dim();

    // Assemble Gx + s = h over the cone R+^l x prod Q^d.
    let mut rows_g: Vec<DVector<f64>> = Vec::new();
    let mut h: Vec<f64> = Vec::new();
    let mut orthant = 0usize;
    for i in 0..n {
        if problem.lower[i].is_finite() {
            let mut r = DVector::zeros(n);
            r[i] = -1.0;
            rows_g.push(r);
            h.push(-problem.lower[i]);
            orthant += 1;
        }
        if problem.upper[i].is_finite() {
            let mut r = DVector::zeros(n);
            r[i] = 1.0;
            rows_g.push(r);
            h.push(problem.upper[i]);
            orthant += 1;
        }
    }
    for i in 0..problem.lin_b.len() {
        rows_g.push(problem.lin_a.row(i).transpose());
        h.push(problem.lin_b[i]);
        orthant += 1;
    }
    let mut soc_dims = Vec::new();
    for soc in &problem.socs {
        // s = (c'x + e; Ax + b) in the second-order cone.
        rows_g.push(-&soc.c);
        h.push(soc.e);
        for i in 0..soc.b.len() {
            rows_g.push(-soc.a.row(i).transpose());
            h.push(soc.b[i]);
        }
        soc_dims.push(soc.b.len() + 1);
    }
    let total = rows_g.len();
    let mut g = DMatrix::zeros(total, n);
    for (i, r) in rows_g.iter().enumerate() {
        g.row_mut(i).copy_from(&r.transpose());
    }
    let h = DVector::from_vec(h);
    let layout = ConeLayout {
        orthant,
        soc: soc_dims,
    };

    let x0 = warm_start.map(|w| {
        DVector::from_fn(n, |i, _| {
            w[i].clamp(
                if problem.lower[i].is_finite() {
                    problem.lower[i]
                } else {
                    f64::NEG_INFINITY
                },
                if problem.upper[i].is_finite() {
                    problem.upper[i]
                } else {
                    f64::INFINITY
                },
            )
        })
    });

    let mut outcome = solve_cone_qp(&problem.p, &problem.q, &g, &h, &layout, x0.as_ref())?;
    // A poor warm start can strand the interior-point iteration; retry
    // from the default initialization before reporting failure.
    if x0.is_some() && !matches!(outcome.status, IpmStatus::Converged) {
        outcome = solve_cone_qp(&problem.p, &problem.q, &g, &h, &layout, None)?;
    }
    let max_violation = problem.max_violation(&outcome.x);
    let status = match outcome.status {
        IpmStatus::Converged => {
            if max_violation <= FEAS_TOL {
                SolveStatus::Optimal
            } else {
                SolveStatus::IterationLimit
            }
        }
        IpmStatus::Infeasible => SolveStatus::Infeasible,
        IpmStatus::IterationLimit => {
            if max_violation > FEAS_TOL {
                SolveStatus::Infeasible
            } else {
                SolveStatus::IterationLimit
            }
        }
    };
    Ok(SolveResult {
        status,
        objective_value: problem.objective(&outcome.x),
        max_violation,
        decision: outcome.x,
        iterations: outcome.iterations,
    })
}

/// A nonconvex program handled by sequential convex programming.
///
/// The objective and the box/affine constraints are convex and kept
/// verbatim; the nonconvex constraints are exposed as true margins
/// (feasible iff >= 0) together with a convexifier producing, at a
/// reference point, second-order-cone inner approximations.
pub struct NonconvexProgram {
    pub p: DMatrix<f64>,
    pub q: DVector<f64>,
    pub constant: f64,
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
    pub lin_a: DMatrix<f64>,
    pub lin_b: DVector<f64>,
    /// True margins of the nonconvex constraints at a point.
    pub margins: Box<dyn Fn(&DVector<f64>) -> Vec<f64> + Send + Sync>,
    /// Inner convex approximation of the nonconvex constraints at a
    /// reference point, one cone per margin, in the same order.
    pub convexify: Box<dyn Fn(&DVector<f64>) -> Result<Vec<SocConstraint>> + Send + Sync>,
}

impl NonconvexProgram {
    pub fn dim(&self) -> usize {
        self.q.len()
    }

    pub fn objective(&self, u: &DVector<f64>) -> f64 {
        0.5 * (u.transpose() * &self.p * u)[(0, 0)] + self.q.dot(u) + self.constant
    }

    /// Largest violation over all constraint families at `u`.
    pub fn max_violation(&self, u: &DVector<f64>) -> f64 {
        let mut v: f64 = 0.0;
        for i in 0..self.dim() {
            v = v.max(self.lower[i] - u[i]).max(u[i] - self.upper[i]);
        }
        for i in 0..self.lin_b.len() {
            v = v.max(self.lin_a.row(i).transpose().dot(u) - self.lin_b[i]);
        }
        for m in (self.margins)(u) {
            v = v.max(-m);
        }
        v
    }

    /// Exact-penalty merit function used by the trust-region loop.
    fn merit(&self, u: &DVector<f64>, penalty: f64) -> f64 {
        let mut pen = 0.0;
        for m in (self.margins)(u) {
            pen += (-m).max(0.0);
        }
        self.objective(u) + penalty * pen
    }
}

/// Sequential convex programming with slack-relaxed subproblems and a
/// trust region.
///
/// Each outer iteration convexifies the nonconvex constraints at the
/// incumbent, attaches one nonnegative slack per cone with penalty
/// weight [`SLACK_PENALTY`], restricts the step to a trust-region box,
/// and solves the resulting conic problem. Infeasibility is declared
/// when the minimized slack stays above the feasibility tolerance for
/// 5 consecutive outer iterations.
pub fn solve_scp(
    program: &NonconvexProgram,
    init: &DVector<f64>,
    max_outer: usize,
    trust_radius: f64,
) -> Result<SolveResult> {
    let n = program.dim();
    if init.len() != n {
        return Err(Error::Dimension {
            context: "solve_scp init",
            expected: n,
            got: init.len(),
        });
    }
    let mut u = DVector::from_fn(n, |i, _| init[i].clamp(program.lower[i], program.upper[i]));
    let mut rho = trust_radius;
    // Exact-penalty weight: must dominate the active constraint duals
    // for the penalty minimum to be feasible, so it is raised whenever
    // the iteration settles on a violating point.
    let mut penalty = SLACK_PENALTY;
    const PENALTY_CAP: f64 = 1e9;
    let mut merit = program.merit(&u, penalty);
    let mut consecutive_slack = 0usize;
    let mut warm: Option<DVector<f64>> = None;
    let mut iterations = 0usize;
    let mut persistent_infeasible = false;
    // Convexification freezes nonlinear terms at the incumbent, so the
    // relaxed subproblem's fixed point can carry a small residual slack
    // (the linearization lag) even when the true problem is feasible.
    // Small slacks therefore tighten the cones instead of counting
    // toward infeasibility; only slack too large to be lag counts.
    let mut tighten = 0.0_f64;
    const LAG_SLACK: f64 = 1e-3;

    for outer in 0..max_outer {
        iterations = outer + 1;
        let socs = match (program.convexify)(&u) {
            Ok(s) => s,
            Err(e) => {
                if outer == 0 {
                    return Err(Error::Solver(format!(
                        "convexifier failed at the initial point: {e}"
                    )));
                }
                break;
            }
        };
        let k = socs.len();
        let total = n + k;

        // Decision vector [u; slacks].
        let mut p_ext = DMatrix::zeros(total, total);
        p_ext.view_mut((0, 0), (n, n)).copy_from(&program.p);
        let mut q_ext = DVector::from_element(total, penalty);
        q_ext.rows_mut(0, n).copy_from(&program.q);

        let mut lower = DVector::zeros(total);
        let mut upper = DVector::from_element(total, f64::INFINITY);
        for i in 0..n {
            lower[i] = program.lower[i].max(u[i] - rho);
            upper[i] = program.upper[i].min(u[i] + rho);
        }
        let mut lin_a = DMatrix::zeros(program.lin_b.len(), total);
        lin_a
            .view_mut((0, 0), (program.lin_b.len(), n))
            .copy_from(&program.lin_a);

        let mut ext_socs = Vec::with_capacity(k);
        for (j, soc) in socs.iter().enumerate() {
            let mut a = DMatrix::zeros(soc.b.len(), total);
            a.view_mut((0, 0), (soc.b.len(), n)).copy_from(&soc.a);
            let mut c = DVector::zeros(total);
            c.rows_mut(0, n).copy_from(&soc.c);
            c[n + j] = 1.0; // ||A u + b|| <= c'u + e + slack_j
            ext_socs.push(SocConstraint {
                a,
                b: soc.b.clone(),
                c,
                e: soc.e - tighten,
            });
        }

        let sub = ConicProblem {
            p: p_ext,
            q: q_ext,
            constant: program.constant,
            lower,
            upper,
            lin_a,
            lin_b: program.lin_b.clone(),
            socs: ext_socs,
        };
        let res = solve_conic(&sub, warm.as_ref())?;
        if res.status == SolveStatus::Infeasible {
            persistent_infeasible = true;
            break;
        }

        let u_new = res.decision.rows(0, n).into_owned();
        let max_slack = if k > 0 {
            res.decision.rows(n, k).max()
        } else {
            0.0
        };
        if max_slack > LAG_SLACK {
            consecutive_slack += 1;
            if consecutive_slack >= 5 {
                persistent_infeasible = true;
                u = u_new;
                break;
            }
        } else {
            consecutive_slack = 0;
        }

        let merit_new = program.merit(&u_new, penalty);
        let step = (&u_new - &u).norm();
        let viol_new = program.max_violation(&u_new);
        if std::env::var_os("SCBF_SCP_DEBUG").is_some() {
            eprintln!(
                "scp outer {outer}: ipm {:?} step {:.3e} rho {:.3e} merit {:.9e} -> {:.9e} slack {:.3e} viol {:.3e} tighten {:.3e} penalty {:.1e}",
                res.status, step, rho, merit, merit_new, max_slack, viol_new, tighten, penalty
            );
        }
        // A settled iteration that still buys slack means the penalty
        // weight is below the active duals; raise it so the penalty
        // minimum moves onto the feasible side.
        if max_slack > FEAS_TOL && step <= 1e-2 && penalty < PENALTY_CAP {
            penalty *= 10.0;
            merit = program.merit(&u, penalty);
        }
        // The exact-penalty optimum can sit a lag-sized hair on the
        // unsafe side of the true constraints; once the violation is
        // that small, tighten the cones so the iteration lands safe.
        if viol_new > FEAS_TOL && viol_new <= LAG_SLACK {
            tighten = tighten.max(1.5 * viol_new).min(1e-2);
        }
        if merit_new <= merit + 1e-9 {
            u = u_new;
            merit = merit_new;
            rho = (rho * 1.5).min(4.0);
            warm = Some(res.decision.clone());
            if step <= 1e-6 {
                let viol = program.max_violation(&u);
                if viol <= FEAS_TOL {
                    break;
                }
                if viol <= LAG_SLACK {
                    // The fixed point sits a lag-sized hair on the
                    // unsafe side of the true constraints; tighten the
                    // cones and keep iterating so it lands safe.
                    tighten = (tighten + 1.5 * viol).min(1e-2);
                } else if penalty < PENALTY_CAP {
                    penalty *= 10.0;
                    merit = program.merit(&u, penalty);
                } else {
                    // A fixed point of the relaxed subproblem that
                    // still violates by more than the linearization
                    // lag cannot be driven feasible.
                    persistent_infeasible = true;
                    break;
                }
            }
        } else {
            rho *= 0.5;
            if rho < 1e-5 {
                // The incumbent can be stuck violating because the
                // penalty once preferred it; with a raised penalty the
                // feasible side wins the merit comparison again.
                if program.max_violation(&u) > FEAS_TOL && penalty < PENALTY_CAP {
                    penalty *= 10.0;
                    merit = program.merit(&u, penalty);
                    rho = 1e-2;
                } else {
                    break;
                }
            }
        }
    }

    let max_violation = program.max_violation(&u);
    let status = if max_violation <= FEAS_TOL {
        SolveStatus::Optimal
    } else if persistent_infeasible {
        SolveStatus::Infeasible
    } else {
        SolveStatus::IterationLimit
    };
    Ok(SolveResult {
        status,
        objective_value: program.objective(&u),
        decision: u,
        iterations,
        max_violation,
    })
}
