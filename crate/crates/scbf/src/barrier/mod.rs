//! Barrier values, barrier-condition moments and the deterministic
//! reformulation of the chance constraint.
//!
//! The barrier is the hyperellipsoid `h(x, o) = ||Sx - o||_W^2 - 1` on the
//! selected position sub-state. With Gaussian driving noise on the
//! obstacle, the one-step barrier condition
//! `CBC = h(x+, o+) - (1 - gamma) h(x, o)` is a quadratic form of a
//! Gaussian; its exact first two moments are matched by a Gaussian
//! surrogate, which turns `P(CBC >= zeta) >= delta` into
//! `E[CBC] - c(delta) sqrt(Var[CBC]) >= zeta`.

mod special;

pub use special::{confidence_scale, erf, erfc, inverse_erf};

use nalgebra::{DMatrix, DVector};

use crate::models::{ObstacleSpec, RobotModel};
use crate::{Error, Result};

/// Barrier and chance-constraint parameters.
#[derive(Debug, Clone)]
pub struct BarrierConfig {
    /// Barrier decay rate, in (0, 1].
    pub gamma: f64,
    /// Collision-avoidance confidence level, in (0, 1).
    pub delta: f64,
    /// Chance-constraint threshold, >= 0.
    pub zeta: f64,
    /// Row-selection matrix extracting the position sub-state from x.
    pub selector: DMatrix<f64>,
}

impl BarrierConfig {
    /// Selector picking the first `n_o` components of an `n`-state.
    pub fn position_selector(n: usize, n_o: usize) -> DMatrix<f64> {
        DMatrix::from_fn(n_o, n, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    pub fn new(gamma: f64, delta: f64, zeta: f64, n: usize, n_o: usize) -> Self {
        Self {
            gamma,
            delta,
            zeta,
            selector: Self::position_selector(n, n_o),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Invariant(format!(
                "0 < gamma <= 1 required, got {}",
                self.gamma
            )));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::Invariant(format!(
                "0 < delta < 1 required, got {}",
                self.delta
            )));
        }
        if self.zeta < 0.0 {
            return Err(Error::Invariant(format!(
                "zeta >= 0 required, got {}",
                self.zeta
            )));
        }
        for i in 0..self.selector.nrows() {
            let row = self.selector.row(i);
            let ones = row.iter().filter(|&&v| v == 1.0).count();
            let zeros = row.iter().filter(|&&v| v == 0.0).count();
            if ones != 1 || ones + zeros != row.len() {
                return Err(Error::Invariant(
                    "selector rows must contain exactly one 1 and zeros elsewhere".into(),
                ));
            }
        }
        Ok(())
    }

    /// `c(delta)` for this configuration.
    pub fn confidence_scale(&self) -> Result<f64> {
        confidence_scale(self.delta)
    }
}

/// Barrier value `h(x, o) = (Sx - o)^T W (Sx - o) - 1`.
pub fn barrier_value(
    x: &DVector<f64>,
    o: &DVector<f64>,
    spec: &ObstacleSpec,
    cfg: &BarrierConfig,
) -> f64 {
    let e = &cfg.selector * x - o;
    (e.transpose() * &spec.shape * &e)[(0, 0)] - 1.0
}

/// Deterministic barrier condition
/// `h(step(x, u), xi(o)) - (1 - gamma) h(x, o)`.
pub fn cbc_deterministic(
    x: &DVector<f64>,
    u: &DVector<f64>,
    o: &DVector<f64>,
    model: &dyn RobotModel,
    spec: &ObstacleSpec,
    cfg: &BarrierConfig,
) -> f64 {
    let x_next = model.step(x, u);
    let o_next = spec.mean_motion(o);
    barrier_value(&x_next, &o_next, spec, cfg) - (1.0 - cfg.gamma) * barrier_value(x, o, spec, cfg)
}

/// Exact moments of the Gaussian quadratic form `z^T A z`,
/// `z ~ N(mu, Sigma)`:
/// mean `tr(A Sigma) + mu^T A mu`,
/// variance `2 tr(A Sigma A Sigma) + 4 mu^T A Sigma A mu`.
pub fn quadratic_form_moments(
    mu: &DVector<f64>,
    sigma: &DMatrix<f64>,
    a: &DMatrix<f64>,
) -> Result<(f64, f64)> {
    let p = mu.len();
    if sigma.nrows() != p || sigma.ncols() != p || a.nrows() != p || a.ncols() != p {
        return Err(Error::Dimension {
            context: "quadratic_form_moments",
            expected: p,
            got: sigma.nrows().max(a.nrows()),
        });
    }
    if (a - a.transpose()).amax() > 1e-10 * (1.0 + a.amax()) {
        return Err(Error::Invariant("quadratic form matrix must be symmetric".into()));
    }
    let a_sigma = a * sigma;
    let mean = a_sigma.trace() + (mu.transpose() * a * mu)[(0, 0)];
    let var = 2.0 * (&a_sigma * &a_sigma).trace()
        + 4.0 * (mu.transpose() * a * sigma * a * mu)[(0, 0)];
    Ok((mean, var))
}

/// First two moments of the barrier condition as quadratics in the
/// decision vector.
///
/// `mean_at(u) = u' Phi u + 2 m' u + s` and
/// `var_at(u) = u' H u + 2 n' u + d`. The variance additionally carries
/// its exact affine square-root factorization
/// `var_at(u) = ||F u + v||^2 + var_const`, used to encode the
/// chance constraint as a second-order cone.
#[derive(Debug, Clone)]
pub struct CbcMoments {
    pub phi: DMatrix<f64>,
    pub h_mat: DMatrix<f64>,
    pub m_vec: DVector<f64>,
    pub n_vec: DVector<f64>,
    pub s: f64,
    pub d: f64,
    /// `F` with `var_at(u) = ||F u + v||^2 + var_const`.
    pub var_factor: DMatrix<f64>,
    pub var_offset: DVector<f64>,
    /// `2 sigma^4 tr(W' W)`.
    pub var_const: f64,
}

impl CbcMoments {
    /// Build the moments of `||G u + p - target||_W^2 + noise terms
    /// - decay - 1`, where the next position is the affine map
    /// `G u + p` of the decision vector and `decay = (1 - gamma) h`
    /// is a fixed scalar.
    pub fn from_position_affine(
        g_eff: &DMatrix<f64>,
        p_affine: &DVector<f64>,
        target: &DVector<f64>,
        w: &DMatrix<f64>,
        sigma2: f64,
        decay: f64,
    ) -> Self {
        let diff = p_affine - target;
        let wg = w * g_eff;
        let wd = w * &diff;
        let phi = g_eff.transpose() * &wg;
        let m_vec = g_eff.transpose() * &wd;
        let s = (diff.transpose() * &wd)[(0, 0)] + sigma2 * w.trace() - decay - 1.0;

        let sigma = sigma2.sqrt();
        let var_factor = 2.0 * sigma * &wg;
        let var_offset = 2.0 * sigma * &wd;
        let var_const = 2.0 * sigma2 * sigma2 * (w.transpose() * w).trace();
        let h_mat = var_factor.transpose() * &var_factor;
        let n_vec = var_factor.transpose() * &var_offset;
        Self {
            phi,
            h_mat,
            m_vec,
            n_vec,
            s,
            d: var_offset.norm_squared() + var_const,
            var_factor,
            var_offset,
            var_const,
        }
    }

    /// Decision-vector dimension.
    pub fn dim(&self) -> usize {
        self.m_vec.len()
    }

    /// `E[CBC]` at input `u`.
    pub fn mean_at(&self, u: &DVector<f64>) -> f64 {
        (u.transpose() * &self.phi * u)[(0, 0)] + 2.0 * self.m_vec.dot(u) + self.s
    }

    /// `Var[CBC]` at input `u` (clamped at zero against roundoff).
    pub fn var_at(&self, u: &DVector<f64>) -> f64 {
        let v = (u.transpose() * &self.h_mat * u)[(0, 0)] + 2.0 * self.n_vec.dot(u) + self.d;
        v.max(0.0)
    }

    /// Gradient of `mean_at` at `u`.
    pub fn mean_gradient(&self, u: &DVector<f64>) -> DVector<f64> {
        2.0 * (&self.phi * u) + 2.0 * &self.m_vec
    }
}

/// Moments of the one-step barrier condition at `(x, o)`, as functions of
/// the input `u` through the selected position of `step(x, u)`.
pub fn cbc_moments(
    x: &DVector<f64>,
    o: &DVector<f64>,
    model: &dyn RobotModel,
    spec: &ObstacleSpec,
    cfg: &BarrierConfig,
) -> Result<CbcMoments> {
    spec.validate()?;
    let s_sel = &cfg.selector;
    let g_eff = s_sel * model.input_matrix(x);
    let p_affine = s_sel * model.drift(x);
    let target = spec.mean_motion(o);
    let decay = (1.0 - cfg.gamma) * barrier_value(x, o, spec, cfg);
    Ok(CbcMoments::from_position_affine(
        &g_eff,
        &p_affine,
        &target,
        &spec.shape,
        spec.noise_var,
        decay,
    ))
}

/// A second-order cone constraint `||A u + b|| <= c' u + e`.
#[derive(Debug, Clone)]
pub struct SocConstraint {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub c: DVector<f64>,
    pub e: f64,
}

impl SocConstraint {
    /// `(c' u + e) - ||A u + b||`; the constraint holds iff this is >= 0.
    pub fn margin(&self, u: &DVector<f64>) -> f64 {
        self.c.dot(u) + self.e - (&self.a * u + &self.b).norm()
    }

    pub fn satisfied(&self, u: &DVector<f64>, tol: f64) -> bool {
        self.margin(u) >= -tol
    }
}

/// Margin of the deterministic chance-constraint reformulation:
/// `mean_at(u) - c(delta) sqrt(var_at(u)) - zeta`. The chance constraint
/// holds (under the Gaussian surrogate) iff the margin is >= 0.
pub fn chance_margin(moments: &CbcMoments, u: &DVector<f64>, cfg: &BarrierConfig) -> f64 {
    let c = confidence_scale(cfg.delta).expect("validated delta");
    moments.mean_at(u) - c * moments.var_at(u).sqrt() - cfg.zeta
}

/// Convex inner approximation of the chance constraint at `u_ref`:
/// tangent under-estimator of the convex quadratic mean, exact cone
/// encoding of the standard deviation.
///
/// Any `u` satisfying the returned constraint has `chance_margin >= 0`.
/// Rejects `delta < 0.5` (the scaling would flip sign).
pub fn convexified_constraint(
    moments: &CbcMoments,
    u_ref: &DVector<f64>,
    cfg: &BarrierConfig,
) -> Result<SocConstraint> {
    let c = confidence_scale(cfg.delta)?;
    if c < 0.0 {
        return Err(Error::Invariant(format!(
            "convexified chance constraint requires delta >= 0.5, got {}",
            cfg.delta
        )));
    }
    let grad = moments.mean_gradient(u_ref);
    let rows = moments.var_factor.nrows();
    let dim = moments.dim();
    let mut a = DMatrix::zeros(rows + 1, dim);
    let mut b = DVector::zeros(rows + 1);
    a.view_mut((0, 0), (rows, dim))
        .copy_from(&(c * &moments.var_factor));
    b.rows_mut(0, rows).copy_from(&(c * &moments.var_offset));
    b[rows] = c * moments.var_const.sqrt();
    let e = moments.mean_at(u_ref) - grad.dot(u_ref) - cfg.zeta;
    Ok(SocConstraint { a, b, c: grad, e })
}

/// Closed-form upper bound on the chance margin used in the feasibility
/// analysis: `D - zeta + (1 - sqrt(2) c(delta)) sqrt(tr(W'W)) sigma^2`
/// with `D` the deterministic part of the mean.
///
/// For `delta` above `(1 + erf(0.5))/2` the sigma^2 coefficient is
/// negative, so raising the noise shrinks the bound.
pub fn feasibility_bound(
    x: &DVector<f64>,
    o: &DVector<f64>,
    u: &DVector<f64>,
    model: &dyn RobotModel,
    spec: &ObstacleSpec,
    cfg: &BarrierConfig,
) -> f64 {
    let c = confidence_scale(cfg.delta).expect("validated delta");
    let s_sel = &cfg.selector;
    let p_next = s_sel * model.step(x, u);
    let diff = p_next - spec.mean_motion(o);
    let w = &spec.shape;
    let d_det = (diff.transpose() * w * &diff)[(0, 0)]
        - (1.0 - cfg.gamma) * barrier_value(x, o, spec, cfg)
        - 1.0;
    let tr_wtw = (w.transpose() * w).trace();
    d_det - cfg.zeta + (1.0 - std::f64::consts::SQRT_2 * c) * tr_wtw.sqrt() * spec.noise_var
}
