//! Primal-dual interior-point method for quadratic objectives over the
//! product of a nonnegative orthant and second-order cones.
//!
//! The problem `min 1/2 x'Px + q'x  s.t.  Gx + s = h, s in K` is solved
//! with Nesterov-Todd scaling and a Mehrotra predictor-corrector step,
//! using dense linear algebra throughout (problem sizes stay well below
//! a few hundred variables).

use nalgebra::{DMatrix, DVector};

use crate::{Error, Result};

/// Cone structure: the first `orthant` rows are scalar inequalities,
/// followed by second-order-cone blocks of the listed dimensions.
#[derive(Debug, Clone)]
pub(crate) struct ConeLayout {
    pub orthant: usize,
    pub soc: Vec<usize>,
}

impl ConeLayout {
    pub fn total(&self) -> usize {
        self.orthant + self.soc.iter().sum::<usize>()
    }

    /// Barrier degree, used for the centrality measure.
    pub fn degree(&self) -> usize {
        self.orthant + self.soc.len()
    }

    /// The cone identity element `e`.
    pub fn identity(&self) -> DVector<f64> {
        let mut e = DVector::zeros(self.total());
        for i in 0..self.orthant {
            e[i] = 1.0;
        }
        let mut off = self.orthant;
        for &d in &self.soc {
            e[off] = 1.0;
            off += d;
        }
        e
    }

    /// Jordan product `u o v`.
    fn jordan(&self, u: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.total());
        for i in 0..self.orthant {
            out[i] = u[i] * v[i];
        }
        let mut off = self.orthant;
        for &d in &self.soc {
            let (u0, v0) = (u[off], v[off]);
            let mut dot = u0 * v0;
            for i in 1..d {
                dot += u[off + i] * v[off + i];
            }
            out[off] = dot;
            for i in 1..d {
                out[off + i] = u0 * v[off + i] + v0 * u[off + i];
            }
            off += d;
        }
        out
    }

    /// Jordan quotient `lambda^{-1} o d`.
    fn jordan_div(&self, lambda: &DVector<f64>, d: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.total());
        for i in 0..self.orthant {
            out[i] = d[i] / lambda[i];
        }
        let mut off = self.orthant;
        for &dim in &self.soc {
            let l0 = lambda[off];
            let mut l1_norm2 = 0.0;
            let mut l1_dot_d1 = 0.0;
            for i in 1..dim {
                l1_norm2 += lambda[off + i] * lambda[off + i];
                l1_dot_d1 += lambda[off + i] * d[off + i];
            }
            let det = l0 * l0 - l1_norm2;
            let v0 = (l0 * d[off] - l1_dot_d1) / det;
            out[off] = v0;
            for i in 1..dim {
                out[off + i] = (d[off + i] - v0 * lambda[off + i]) / l0;
            }
            off += dim;
        }
        out
    }

    /// Largest `alpha` with `p + alpha d` in the cone (`p` strictly
    /// interior), capped at `cap`.
    fn max_step(&self, p: &DVector<f64>, d: &DVector<f64>, cap: f64) -> f64 {
        let mut alpha = cap;
        for i in 0..self.orthant {
            if d[i] < 0.0 {
                alpha = alpha.min(-p[i] / d[i]);
            }
        }
        let mut off = self.orthant;
        for &dim in &self.soc {
            // residual(a) = (p0 + a d0)^2 - ||p1 + a d1||^2 >= 0
            let mut a_coef = d[off] * d[off];
            let mut b_coef = 2.0 * p[off] * d[off];
            let c_coef_p = p[off] * p[off];
            let mut p1n = 0.0;
            for i in 1..dim {
                a_coef -= d[off + i] * d[off + i];
                b_coef -= 2.0 * p[off + i] * d[off + i];
                p1n += p[off + i] * p[off + i];
            }
            let c_coef = c_coef_p - p1n;
            // smallest positive root of a x^2 + b x + c = 0
            let root = smallest_positive_root(a_coef, b_coef, c_coef);
            if let Some(r) = root {
                alpha = alpha.min(r);
            }
            if d[off] < 0.0 {
                alpha = alpha.min(-p[off] / d[off]);
            }
            off += dim;
        }
        alpha.max(0.0)
    }
}

fn smallest_positive_root(a: f64, b: f64, c: f64) -> Option<f64> {
    if a.abs() < 1e-300 {
        if b < 0.0 {
            return Some(-c / b);
        }
        return None;
    }
    let disc = b * b - 4.0 * a * c;
    if disc < 0.0 {
        return None;
    }
    let sq = disc.sqrt();
    // numerically stable pair
    let q = -0.5 * (b + b.signum() * sq);
    let (r1, r2) = (q / a, if q.abs() > 1e-300 { c / q } else { f64::INFINITY });
    let mut best = f64::INFINITY;
    for r in [r1, r2] {
        if r > 0.0 && r < best {
            best = r;
        }
    }
    if best.is_finite() {
        Some(best)
    } else {
        None
    }
}

/// Nesterov-Todd scaling point data: `W` maps the dual to the scaled
/// space, `lambda = W z = W^{-1} s`.
struct Scaling {
    /// Orthant block of `W` (diagonal).
    w_orth: DVector<f64>,
    /// Per second-order cone: `(eta, v)` with `W = eta (2 v v' - J)` and
    /// `v' J v = 1` (so `W` is the scaled symmetric square root of the
    /// quadratic representation of the NT point).
    socs: Vec<(f64, DVector<f64>)>,
    lambda: DVector<f64>,
}

impl Scaling {
    fn compute(layout: &ConeLayout, s: &DVector<f64>, z: &DVector<f64>) -> Scaling {
        let mut w_orth = DVector::zeros(layout.orthant);
        for i in 0..layout.orthant {
            w_orth[i] = (s[i] / z[i]).sqrt();
        }
        let mut socs = Vec::with_capacity(layout.soc.len());
        let mut off = layout.orthant;
        for &d in &layout.soc {
            let sb = s.rows(off, d);
            let zb = z.rows(off, d);
            let s_res = jdot(&sb.into_owned());
            let z_res = jdot(&zb.into_owned());
            let s_nrm = s_res.sqrt();
            let z_nrm = z_res.sqrt();
            let sbar = s.rows(off, d) / s_nrm;
            let zbar = z.rows(off, d) / z_nrm;
            let mut dot = sbar[0] * zbar[0];
            for i in 1..d {
                dot += sbar[i] * zbar[i];
            }
            let gamma = ((1.0 + dot) / 2.0).sqrt();
            // NT point wbar = (sbar + J zbar) / (2 gamma), then the unit
            // hyperbolic vector v = (wbar + e) / sqrt(2 (wbar0 + 1)).
            let mut wbar = DVector::zeros(d);
            wbar[0] = (sbar[0] + zbar[0]) / (2.0 * gamma);
            for i in 1..d {
                wbar[i] = (sbar[i] - zbar[i]) / (2.0 * gamma);
            }
            let denom = (2.0 * (wbar[0] + 1.0)).sqrt();
            let mut v = wbar;
            v[0] += 1.0;
            v /= denom;
            let eta = (s_nrm / z_nrm).sqrt();
            socs.push((eta, v));
            off += d;
        }
        let mut scaling = Scaling {
            w_orth,
            socs,
            lambda: DVector::zeros(layout.total()),
        };
        scaling.lambda = scaling.apply(layout, z);
        scaling
    }

    /// `W y`.
    fn apply(&self, layout: &ConeLayout, y: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(layout.total());
        for i in 0..layout.orthant {
            out[i] = self.w_orth[i] * y[i];
        }
        let mut off = layout.orthant;
        for (k, &d) in layout.soc.iter().enumerate() {
            let (eta, wbar) = &self.socs[k];
            let yb = y.rows(off, d).into_owned();
            let dot = wbar.dot(&yb);
            // (2 wbar wbar' - J) y = 2 dot wbar - J y
            for i in 0..d {
                let jy = if i == 0 { yb[0] } else { -yb[i] };
                out[off + i] = eta * (2.0 * dot * wbar[i] - jy);
            }
            off += d;
        }
        out
    }

    /// `W^{-1} y`.
    fn apply_inv(&self, layout: &ConeLayout, y: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(layout.total());
        for i in 0..layout.orthant {
            out[i] = y[i] / self.w_orth[i];
        }
        let mut off = layout.orthant;
        for (k, &d) in layout.soc.iter().enumerate() {
            let (eta, wbar) = &self.socs[k];
            let yb = y.rows(off, d).into_owned();
            // W^{-1} = (1/eta)(2 (J wbar)(J wbar)' - J)
            let mut jw_dot = wbar[0] * yb[0];
            for i in 1..d {
                jw_dot -= wbar[i] * yb[i];
            }
            for i in 0..d {
                let jwbar = if i == 0 { wbar[0] } else { -wbar[i] };
                let jy = if i == 0 { yb[0] } else { -yb[i] };
                out[off + i] = (2.0 * jw_dot * jwbar - jy) / eta;
            }
            off += d;
        }
        out
    }
}

/// `v' J v` for a second-order cone block.
fn jdot(v: &DVector<f64>) -> f64 {
    let mut r = v[0] * v[0];
    for i in 1..v.len() {
        r -= v[i] * v[i];
    }
    r
}

/// Raw interior-point outcome.
pub(crate) enum IpmStatus {
    Converged,
    Infeasible,
    IterationLimit,
}

pub(crate) struct IpmOutcome {
    pub x: DVector<f64>,
    pub status: IpmStatus,
    pub iterations: usize,
}

/// Solve `min 1/2 x'Px + q'x  s.t.  Gx + s = h, s in K`.
///
/// `x0` seeds the primal variable; `s` and `z` start at the cone
/// identity. Deterministic: no randomization anywhere.
pub(crate) fn solve_cone_qp(
    p: &DMatrix<f64>,
    q: &DVector<f64>,
    g: &DMatrix<f64>,
    h: &DVector<f64>,
    layout: &ConeLayout,
    x0: Option<&DVector<f64>>,
) -> Result<IpmOutcome> {
    let n = q.len();
    let rows = layout.total();
    debug_assert_eq!(g.nrows(), rows);
    debug_assert_eq!(h.len(), rows);

    if rows == 0 {
        // Unconstrained quadratic: solve the normal equations.
        let x = solve_spd(p, &(-q), 1e-12)?;
        return Ok(IpmOutcome {
            x,
            status: IpmStatus::Converged,
            iterations: 0,
        });
    }

    // Least-squares initialization: solve the identity-scaled KKT
    // system, then shift s and z into the cone interior.
    let e = layout.identity();
    let kkt0 = p + g.transpose() * g;
    let mut x = match x0 {
        Some(v) => v.clone(),
        None => solve_spd(&kkt0, &(-q + g.transpose() * h), 1e-10)?,
    };
    if !x.iter().all(|v| v.is_finite()) {
        x = DVector::zeros(n);
    }
    let resid = g * &x - h;
    let mut s = -&resid;
    let mut z = resid;
    let shift_into_cone = |v: &mut DVector<f64>| {
        let mut m = f64::INFINITY;
        for i in 0..layout.orthant {
            m = m.min(v[i]);
        }
        let mut off = layout.orthant;
        for &d in &layout.soc {
            let mut n1 = 0.0;
            for i in 1..d {
                n1 += v[off + i] * v[off + i];
            }
            m = m.min(v[off] - n1.sqrt());
            off += d;
        }
        if m < 1e-8 {
            *v += (1.0 - m) * &e;
        }
    };
    shift_into_cone(&mut s);
    shift_into_cone(&mut z);
    let degree = layout.degree() as f64;

    let q_scale = 1.0f64.max(q.norm());
    let h_scale = 1.0f64.max(h.norm());
    let tol = 1e-9;
    // Fallback acceptance once progress stalls: the regularized KKT
    // solves put a floor on the attainable dual residual for badly
    // scaled data, so a strict 1e-9 on every measure is not always
    // reachable even at the optimum.
    let tol_relaxed = 1e-6;

    let mut stalls = 0usize;
    let mut iterations = 0usize;
    let max_iter = 100usize;
    let mut converged = false;

    while iterations < max_iter {
        iterations += 1;
        let rx = p * &x + q + g.transpose() * &z;
        let rz = g * &x + &s - h;
        let gap = s.dot(&z);
        let mu = gap / degree;

        let pres = rz.norm() / h_scale;
        let dres = rx.norm() / q_scale;
        let obj = 0.5 * (&x.transpose() * p * &x)[(0, 0)] + q.dot(&x);
        let relgap = gap / 1.0f64.max(obj.abs());
        if std::env::var_os("SCBF_IPM_DEBUG").is_some() {
            eprintln!(
                "iter {iterations}: pres {pres:.3e} dres {dres:.3e} gap {gap:.3e} mu {mu:.3e} obj {obj:.6e}"
            );
        }
        if pres < tol && dres < tol && relgap < tol {
            converged = true;
            break;
        }

        let scaling = Scaling::compute(layout, &s, &z);
        let lambda = &scaling.lambda;

        // W^{-1} G, shared between predictor and corrector.
        let mut w_inv_g = DMatrix::zeros(rows, n);
        for j in 0..n {
            let col = scaling.apply_inv(layout, &g.column(j).into_owned());
            w_inv_g.set_column(j, &col);
        }
        let mut kkt = p + w_inv_g.transpose() * &w_inv_g;
        let chol = match factor_spd(&mut kkt) {
            Some(c) => c,
            None => break,
        };

        let w_inv_rz = scaling.apply_inv(layout, &rz);

        // Affine (predictor) direction: d = lambda o lambda.
        let d_aff = layout.jordan(lambda, lambda);
        let (_dx_a, ds_a, dz_a) =
            kkt_step(&chol, &w_inv_g, &scaling, layout, g, &rx, &rz, &w_inv_rz, lambda, &d_aff);

        let alpha_s = layout.max_step(&s, &ds_a, 1e10);
        let alpha_z = layout.max_step(&z, &dz_a, 1e10);
        let alpha_aff = alpha_s.min(alpha_z).min(1.0);
        let gap_aff = (&s + alpha_aff * &ds_a).dot(&(&z + alpha_aff * &dz_a));
        let sigma = ((gap_aff / gap).max(0.0).min(1.0)).powi(3);

        // Corrector: d = lambda o lambda + (W^{-1} ds_a) o (W dz_a)
        //            - sigma mu e.
        let corr = layout.jordan(
            &scaling.apply_inv(layout, &ds_a),
            &scaling.apply(layout, &dz_a),
        );
        let d_comb = &d_aff + corr - sigma * mu * &e;
        let (dx, ds, dz) =
            kkt_step(&chol, &w_inv_g, &scaling, layout, g, &rx, &rz, &w_inv_rz, lambda, &d_comb);

        let alpha_s = layout.max_step(&s, &ds, 1e10);
        let alpha_z = layout.max_step(&z, &dz, 1e10);
        let alpha = (0.99 * alpha_s.min(alpha_z)).min(1.0);
        if alpha < 1e-10 {
            stalls += 1;
            if stalls >= 3 {
                break;
            }
        } else {
            stalls = 0;
        }

        x += alpha * dx;
        s += alpha * ds;
        z += alpha * dz;
    }

    let status = if converged {
        IpmStatus::Converged
    } else {
        let rz = g * &x + &s - h;
        let rx = p * &x + q + g.transpose() * &z;
        let pres = rz.norm() / h_scale;
        let dres = rx.norm() / q_scale;
        let obj = 0.5 * (&x.transpose() * p * &x)[(0, 0)] + q.dot(&x);
        let relgap = s.dot(&z) / 1.0f64.max(obj.abs());
        if pres < tol_relaxed && dres < tol_relaxed && relgap < tol_relaxed {
            IpmStatus::Converged
        } else if pres > 1e-6 || z.amax() > 1e7 {
            // Classify the failure: a large dual with persistent primal
            // residual is the standard infeasibility signature.
            IpmStatus::Infeasible
        } else {
            IpmStatus::IterationLimit
        }
    };
    Ok(IpmOutcome {
        x,
        status,
        iterations,
    })
}

#[allow(clippy::too_many_arguments)]
fn kkt_step(
    chol: &nalgebra::Cholesky<f64, nalgebra::Dyn>,
    w_inv_g: &DMatrix<f64>,
    scaling: &Scaling,
    layout: &ConeLayout,
    g: &DMatrix<f64>,
    rx: &DVector<f64>,
    rz: &DVector<f64>,
    w_inv_rz: &DVector<f64>,
    lambda: &DVector<f64>,
    d: &DVector<f64>,
) -> (DVector<f64>, DVector<f64>, DVector<f64>) {
    let lam_inv_d = layout.jordan_div(lambda, d);
    // (P + G' W^{-2} G) dx = -rx - (W^{-1}G)' (W^{-1} rz - lambda^{-1} o d)
    let rhs = -rx - w_inv_g.transpose() * (w_inv_rz - &lam_inv_d);
    let dx = chol.solve(&rhs);
    let ds = -rz - g * &dx;
    // dz = W^{-1} (W^{-1}(G dx + rz) - lambda^{-1} o d)
    let inner = scaling.apply_inv(layout, &(g * &dx + rz)) - lam_inv_d;
    let dz = scaling.apply_inv(layout, &inner);
    (dx, ds, dz)
}

/// Cholesky with escalating diagonal regularization.
fn factor_spd(m: &mut DMatrix<f64>) -> Option<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    let n = m.nrows();
    let mut reg = 1e-12 * (1.0 + m.amax());
    for _ in 0..8 {
        let mut try_m = m.clone();
        for i in 0..n {
            try_m[(i, i)] += reg;
        }
        if let Some(c) = try_m.cholesky() {
            return Some(c);
        }
        reg *= 100.0;
    }
    None
}

/// Solve `M x = b` for symmetric positive semidefinite `M` with
/// regularization fallback.
pub(crate) fn solve_spd(m: &DMatrix<f64>, b: &DVector<f64>, base_reg: f64) -> Result<DVector<f64>> {
    let mut work = m.clone();
    let n = m.nrows();
    let mut reg = base_reg * (1.0 + m.amax());
    for _ in 0..10 {
        if let Some(c) = work.clone().cholesky() {
            return Ok(c.solve(b));
        }
        for i in 0..n {
            work[(i, i)] = m[(i, i)] + reg;
        }
        reg *= 100.0;
    }
    Err(Error::Solver(
        "quadratic objective matrix is not positive semidefinite".into(),
    ))
}
