//! Controllers: standard tracking MPC, deterministic MPC-CBF,
//! one-shot chance-constrained MPC-CBF (and its distance-constraint
//! special case), and the sequential pipeline of nominal MPC followed by
//! an iteratively convexified predictive safety filter.

mod condensed;

pub use condensed::{split_inputs, CondensedDynamics};

use std::ops::AddAssign;
use std::sync::Arc;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::barrier::{confidence_scale, convexified_constraint, BarrierConfig, CbcMoments, SocConstraint};
use crate::models::{predict_obstacle_means, rollout, ObstacleSpec, RobotModel};
use crate::solve::{solve_conic, solve_scp, ConicProblem, NonconvexProgram, SolveStatus, FEAS_TOL, SLACK_PENALTY};
use crate::{Error, Result};

/// Whether the reference curve is parameterized by wall-clock seconds
/// (`k * dt`) or directly by the step index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceArg {
    Seconds,
    StepIndex,
}

/// Circular reference trajectory
/// `r(t) = [A sin(rate t), A cos(rate t), altitude]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Reference {
    pub amplitude: f64,
    pub rate: f64,
    pub altitude: f64,
    pub arg: ReferenceArg,
    /// Sampling time, used both for the seconds parameterization and for
    /// the finite-difference reference velocity.
    pub dt: f64,
}

/// Reference signal fed to the tracking cost: either the circular curve
/// or a fixed state (useful for regulation and tests).
#[derive(Debug, Clone)]
pub enum ReferenceSignal {
    Circular(Reference),
    Fixed(DVector<f64>),
}

impl ReferenceSignal {
    /// Reference state at step `k`.
    pub fn state(&self, k: usize) -> DVector<f64> {
        match self {
            ReferenceSignal::Circular(r) => r.state(k),
            ReferenceSignal::Fixed(x) => x.clone(),
        }
    }

    /// Reference position (first three components for the circular
    /// curve, the full vector otherwise).
    pub fn position(&self, k: usize) -> DVector<f64> {
        match self {
            ReferenceSignal::Circular(r) => r.position(k),
            ReferenceSignal::Fixed(x) => x.clone(),
        }
    }
}

impl Reference {
    fn time(&self, k: usize) -> f64 {
        match self.arg {
            ReferenceArg::Seconds => k as f64 * self.dt,
            ReferenceArg::StepIndex => k as f64,
        }
    }

    /// Reference position at step `k`.
    pub fn position(&self, k: usize) -> DVector<f64> {
        let t = self.time(k);
        DVector::from_vec(vec![
            self.amplitude * (self.rate * t).sin(),
            self.amplitude * (self.rate * t).cos(),
            self.altitude,
        ])
    }

    /// Full reference state: position plus one-step finite-difference
    /// velocity.
    pub fn state(&self, k: usize) -> DVector<f64> {
        let p = self.position(k);
        let v = (self.position(k + 1) - &p) / self.dt;
        let mut x = DVector::zeros(6);
        x.rows_mut(0, 3).copy_from(&p);
        x.rows_mut(3, 3).copy_from(&v);
        x
    }
}

/// MPC weights, horizon, bounds and reference.
#[derive(Debug, Clone)]
pub struct MpcConfig {
    pub horizon: usize,
    /// Terminal state weight.
    pub p: DMatrix<f64>,
    /// Stage state weight.
    pub q: DMatrix<f64>,
    /// Input weight (positive definite).
    pub r: DMatrix<f64>,
    pub state_lower: DVector<f64>,
    pub state_upper: DVector<f64>,
    pub input_lower: DVector<f64>,
    pub input_upper: DVector<f64>,
    /// Terminal box; defaults to the state box.
    pub terminal_lower: DVector<f64>,
    pub terminal_upper: DVector<f64>,
    pub reference: ReferenceSignal,
}

impl MpcConfig {
    pub fn validate(&self, model: &dyn RobotModel) -> Result<()> {
        let n = model.state_dim();
        let m = model.input_dim();
        if self.horizon == 0 {
            return Err(Error::Invariant("horizon must be >= 1".into()));
        }
        for (name, w, dim) in [("P", &self.p, n), ("Q", &self.q, n), ("R", &self.r, m)] {
            if w.nrows() != dim || w.ncols() != dim {
                return Err(Error::Dimension {
                    context: "MpcConfig weight",
                    expected: dim,
                    got: w.nrows(),
                });
            }
            let min_eig = w.clone().symmetric_eigenvalues().min();
            if min_eig < -1e-10 * (1.0 + w.amax()) {
                return Err(Error::Invariant(format!("{name} must be positive semidefinite")));
            }
            if name == "R" && min_eig <= 0.0 {
                return Err(Error::Invariant("R must be positive definite".into()));
            }
        }
        for (lo, hi, dim) in [
            (&self.state_lower, &self.state_upper, n),
            (&self.input_lower, &self.input_upper, m),
            (&self.terminal_lower, &self.terminal_upper, n),
        ] {
            if lo.len() != dim || hi.len() != dim {
                return Err(Error::Dimension {
                    context: "MpcConfig bounds",
                    expected: dim,
                    got: lo.len().min(hi.len()),
                });
            }
            for i in 0..dim {
                if lo[i] > hi[i] {
                    return Err(Error::Invariant("bounds must satisfy lower <= upper".into()));
                }
            }
        }
        Ok(())
    }
}

/// Controller outcome at one time step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ControlStatus {
    Feasible,
    Infeasible,
}

/// The control decision returned by every controller.
#[derive(Debug, Clone)]
pub struct ControlDecision {
    pub applied_input: DVector<f64>,
    pub planned_inputs: Vec<DVector<f64>>,
    pub predicted_states: Vec<DVector<f64>>,
    pub status: ControlStatus,
    /// Chance margins, indexed `[step][obstacle]`, covering the
    /// input-affected horizon steps (the one-step-ahead position of a
    /// double integrator is fixed by the current state and carries no
    /// constraint of its own).
    pub margins: Vec<Vec<f64>>,
    pub solve_time: f64,
    pub inner_iterations: usize,
}

// --- condensed tracking objective and state constraints ---------------

struct HorizonMaps {
    gs: Vec<DMatrix<f64>>,
    ds: Vec<DVector<f64>>,
    m: usize,
    horizon: usize,
}

fn horizon_maps(model: &dyn RobotModel, x_k: &DVector<f64>, horizon: usize) -> HorizonMaps {
    let cd = CondensedDynamics::new(model);
    let (gs, ds) = cd.state_maps(x_k, horizon);
    HorizonMaps {
        gs,
        ds,
        m: cd.m,
        horizon,
    }
}

impl HorizonMaps {
    fn input_dim(&self) -> usize {
        self.m * self.horizon
    }

    /// Quadratic tracking objective over the stacked inputs:
    /// `sum_i ||x_i - r(k+i)||^2_{Q or P} + sum_i ||u_i||^2_R`
    /// as `(P_qp, q_qp, constant)` for `1/2 U' P_qp U + q_qp' U + c`.
    fn tracking_objective(
        &self,
        cfg: &MpcConfig,
        k: usize,
    ) -> (DMatrix<f64>, DVector<f64>, f64) {
        let nu = self.input_dim();
        let mut p_qp = DMatrix::zeros(nu, nu);
        let mut q_qp = DVector::zeros(nu);
        let mut constant = 0.0;
        for i in 1..=self.horizon {
            // every predicted state carries the stage weight; the
            // terminal one additionally carries the terminal weight
            let w = if i == self.horizon {
                &cfg.q + &cfg.p
            } else {
                cfg.q.clone()
            };
            let r_i = cfg.reference.state(k + i);
            let diff = &self.ds[i] - r_i;
            let wg = &w * &self.gs[i];
            p_qp += 2.0 * self.gs[i].transpose() * &wg;
            q_qp += 2.0 * self.gs[i].transpose() * (&w * &diff);
            constant += (diff.transpose() * &w * &diff)[(0, 0)];
        }
        for i in 0..self.horizon {
            p_qp
                .view_mut((i * self.m, i * self.m), (self.m, self.m))
                .add_assign(&(2.0 * &cfg.r));
        }
        (p_qp, q_qp, constant)
    }

    /// Stacked input box.
    fn input_box(&self, cfg: &MpcConfig) -> (DVector<f64>, DVector<f64>) {
        let nu = self.input_dim();
        let mut lo = DVector::zeros(nu);
        let mut hi = DVector::zeros(nu);
        for i in 0..self.horizon {
            lo.rows_mut(i * self.m, self.m).copy_from(&cfg.input_lower);
            hi.rows_mut(i * self.m, self.m).copy_from(&cfg.input_upper);
        }
        (lo, hi)
    }

    /// State box constraints as linear rows `a'U <= b`, dropping rows
    /// that hold for every input inside the box (interval screening).
    fn state_rows(&self, cfg: &MpcConfig) -> (DMatrix<f64>, DVector<f64>) {
        let (in_lo, in_hi) = self.input_box(cfg);
        let mut rows: Vec<(DVector<f64>, f64)> = Vec::new();
        let n = self.ds[0].len();
        for i in 1..=self.horizon {
            let (lo, hi) = if i == self.horizon {
                (&cfg.terminal_lower, &cfg.terminal_upper)
            } else {
                (&cfg.state_lower, &cfg.state_upper)
            };
            for row in 0..n {
                let a = self.gs[i].row(row).transpose();
                let d = self.ds[i][row];
                if hi[row].is_finite() {
                    push_if_active(&mut rows, a.clone(), hi[row] - d, &in_lo, &in_hi);
                }
                if lo[row].is_finite() {
                    push_if_active(&mut rows, -a, d - lo[row], &in_lo, &in_hi);
                }
            }
        }
        let nu = self.input_dim();
        let mut lin_a = DMatrix::zeros(rows.len(), nu);
        let mut lin_b = DVector::zeros(rows.len());
        for (idx, (a, b)) in rows.iter().enumerate() {
            lin_a.row_mut(idx).copy_from(&a.transpose());
            lin_b[idx] = *b;
        }
        (lin_a, lin_b)
    }
}

/// Keep the row `a'U <= b` only when some input inside the box could
/// violate it.
fn push_if_active(
    rows: &mut Vec<(DVector<f64>, f64)>,
    a: DVector<f64>,
    b: f64,
    in_lo: &DVector<f64>,
    in_hi: &DVector<f64>,
) {
    let mut max_val = 0.0;
    for j in 0..a.len() {
        max_val += if a[j] > 0.0 {
            a[j] * in_hi[j]
        } else {
            a[j] * in_lo[j]
        };
    }
    if max_val > b {
        rows.push((a, b));
    }
}

// --- chance constraints over the horizon ------------------------------

/// Per-obstacle horizon data for the chance constraints: predicted
/// noise-free obstacle means and shape/noise parameters.
struct ObstacleHorizon {
    /// `xi[i]` is the predicted mean at step `i` (`xi[0]` = current).
    xi: Vec<DVector<f64>>,
    shape: DMatrix<f64>,
    sigma2: f64,
    tr_w: f64,
    tr_wtw: f64,
    lambda_min: f64,
    lambda_max: f64,
    /// Steps whose constraint survives interval screening.
    active: Vec<bool>,
}

/// All data needed to evaluate and convexify the per-step per-obstacle
/// chance constraints as functions of the stacked input sequence.
struct ChanceData {
    g_pos: Vec<DMatrix<f64>>,
    d_pos: Vec<DVector<f64>>,
    /// Worst-case position deviation `max ||G_pos_i U||` over the input
    /// box, per step.
    dev: Vec<f64>,
    obstacles: Vec<ObstacleHorizon>,
    gamma: f64,
    zeta: f64,
    c_delta: f64,
    horizon: usize,
    /// First step whose constrained position depends on the inputs. For
    /// a double integrator the one-step-ahead position is fixed by the
    /// current state, so its constraint contains no decision variable;
    /// constraints are imposed from the first input-affected position
    /// onward and the inherited step is covered by the previous solve.
    first_step: usize,
}

impl ChanceData {
    fn build(
        maps: &HorizonMaps,
        obstacles: &[(ObstacleSpec, DVector<f64>)],
        barrier_cfg: &BarrierConfig,
    ) -> Result<ChanceData> {
        let horizon = maps.horizon;
        let sel = &barrier_cfg.selector;
        let g_pos: Vec<DMatrix<f64>> = maps.gs.iter().map(|g| sel * g).collect();
        let d_pos: Vec<DVector<f64>> = maps.ds.iter().map(|d| sel * d).collect();
        let c_delta = confidence_scale(barrier_cfg.delta)?;
        let first_step = (0..horizon)
            .find(|&i| g_pos[i + 1].iter().any(|&v| v != 0.0))
            .unwrap_or(horizon);
        Ok(ChanceData {
            g_pos,
            d_pos,
            dev: vec![0.0; horizon + 1],
            obstacles: obstacles
                .iter()
                .map(|(spec, o)| {
                    spec.validate()?;
                    let mut xi = vec![o.clone()];
                    xi.extend(predict_obstacle_means(spec, o, horizon)?);
                    let eig = spec.shape.clone().symmetric_eigenvalues();
                    Ok(ObstacleHorizon {
                        xi,
                        shape: spec.shape.clone(),
                        sigma2: spec.noise_var,
                        tr_w: spec.shape.trace(),
                        tr_wtw: (spec.shape.transpose() * &spec.shape).trace(),
                        lambda_min: eig.min(),
                        lambda_max: eig.max(),
                        active: vec![true; horizon],
                    })
                })
                .collect::<Result<Vec<_>>>()?,
            gamma: barrier_cfg.gamma,
            zeta: barrier_cfg.zeta,
            c_delta,
            horizon,
            first_step,
        })
    }

    /// Interval screening: mark constraints that hold for every input in
    /// the box so the convexifier can skip them. The true margins are
    /// still evaluated for every constraint at certification time.
    fn screen(&mut self, in_lo: &DVector<f64>, in_hi: &DVector<f64>) {
        for i in 0..=self.horizon {
            let mut dev2 = 0.0;
            for axis in 0..self.g_pos[i].nrows() {
                let mut row_max = 0.0;
                for j in 0..self.g_pos[i].ncols() {
                    let a = self.g_pos[i][(axis, j)];
                    row_max += a.abs() * in_hi[j].abs().max(in_lo[j].abs());
                }
                dev2 += row_max * row_max;
            }
            self.dev[i] = dev2.sqrt();
        }
        for obs in &mut self.obstacles {
            for i in self.first_step..self.horizon {
                let c_next = (&self.d_pos[i + 1] - &obs.xi[i + 1]).norm();
                let c_cur = (&self.d_pos[i] - &obs.xi[i]).norm();
                let lo_next = (c_next - self.dev[i + 1]).max(0.0);
                let hi_next = c_next + self.dev[i + 1];
                let hi_cur = c_cur + self.dev[i];
                let h_cur_ub = obs.lambda_max * hi_cur * hi_cur - 1.0;
                let mean_lb = obs.lambda_min * lo_next * lo_next + obs.sigma2 * obs.tr_w
                    - 1.0
                    - (1.0 - self.gamma) * h_cur_ub;
                let sigma = obs.sigma2.sqrt();
                let sd_ub = ((2.0 * sigma * obs.lambda_max * hi_next).powi(2)
                    + 2.0 * obs.sigma2 * obs.sigma2 * obs.tr_wtw)
                    .sqrt();
                obs.active[i] = mean_lb - self.c_delta * sd_ub - self.zeta <= 0.0;
            }
        }
    }

    fn barrier_at(&self, obs: &ObstacleHorizon, i: usize, u: &DVector<f64>) -> f64 {
        let p = &self.g_pos[i] * u + &self.d_pos[i];
        let e = p - &obs.xi[i];
        (e.transpose() * &obs.shape * &e)[(0, 0)] - 1.0
    }

    /// Number of constrained (input-affected) horizon steps.
    fn constrained_steps(&self) -> usize {
        self.horizon - self.first_step
    }

    /// Exact chance margins of every per-step per-obstacle constraint at
    /// the stacked input `u`, ordered step-major.
    fn margins(&self, u: &DVector<f64>) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.constrained_steps() * self.obstacles.len());
        for i in self.first_step..self.horizon {
            for obs in &self.obstacles {
                let h_cur = self.barrier_at(obs, i, u);
                let p_next = &self.g_pos[i + 1] * u + &self.d_pos[i + 1];
                let e = p_next - &obs.xi[i + 1];
                let we = &obs.shape * &e;
                let mean = e.dot(&we) + obs.sigma2 * obs.tr_w
                    - 1.0
                    - (1.0 - self.gamma) * h_cur;
                let var = 4.0 * obs.sigma2 * we.norm_squared()
                    + 2.0 * obs.sigma2 * obs.sigma2 * obs.tr_wtw;
                out.push(mean - self.c_delta * var.max(0.0).sqrt() - self.zeta);
            }
        }
        out
    }

    /// Convexified constraints at the reference input `u_ref`: the
    /// barrier decay term is frozen at the reference rollout, the mean
    /// is replaced by its tangent under-estimator and the standard
    /// deviation by its exact cone form. Screened-out constraints are
    /// omitted.
    fn convexify(&self, u_ref: &DVector<f64>, barrier_cfg: &BarrierConfig) -> Result<Vec<SocConstraint>> {
        let mut out = Vec::new();
        for i in self.first_step..self.horizon {
            for obs in &self.obstacles {
                if !obs.active[i] {
                    continue;
                }
                let h_cur = self.barrier_at(obs, i, u_ref);
                let moments = CbcMoments::from_position_affine(
                    &self.g_pos[i + 1],
                    &self.d_pos[i + 1],
                    &obs.xi[i + 1],
                    &obs.shape,
                    obs.sigma2,
                    (1.0 - self.gamma) * h_cur,
                );
                out.push(convexified_constraint(&moments, u_ref, barrier_cfg)?);
            }
        }
        Ok(out)
    }
}

// --- controllers ------------------------------------------------------

fn decision_from_inputs(
    model: &dyn RobotModel,
    x_k: &DVector<f64>,
    inputs: Vec<DVector<f64>>,
    status: ControlStatus,
    margins: Vec<Vec<f64>>,
    solve_time: f64,
    inner_iterations: usize,
) -> ControlDecision {
    let predicted_states = rollout(model, x_k, &inputs).expect("dimension-checked inputs");
    ControlDecision {
        applied_input: inputs[0].clone(),
        planned_inputs: inputs,
        predicted_states,
        status,
        margins,
        solve_time,
        inner_iterations,
    }
}

/// Standard tracking MPC without barrier constraints.
pub fn nominal_mpc(
    x_k: &DVector<f64>,
    k: usize,
    cfg: &MpcConfig,
    model: &dyn RobotModel,
) -> Result<ControlDecision> {
    nominal_mpc_warm(x_k, k, cfg, model, None)
}

/// [`nominal_mpc`] with an optional stacked-input warm start.
pub fn nominal_mpc_warm(
    x_k: &DVector<f64>,
    k: usize,
    cfg: &MpcConfig,
    model: &dyn RobotModel,
    warm: Option<&DVector<f64>>,
) -> Result<ControlDecision> {
    cfg.validate(model)?;
    let start = Instant::now();
    let maps = horizon_maps(model, x_k, cfg.horizon);
    let (p_qp, q_qp, constant) = maps.tracking_objective(cfg, k);
    let (lo, hi) = maps.input_box(cfg);
    let (lin_a, lin_b) = maps.state_rows(cfg);
    let problem = ConicProblem {
        p: p_qp,
        q: q_qp,
        constant,
        lower: lo,
        upper: hi,
        lin_a,
        lin_b,
        socs: Vec::new(),
    };
    let res = solve_conic(&problem, warm)?;
    let status = if res.status == SolveStatus::Optimal {
        ControlStatus::Feasible
    } else {
        ControlStatus::Infeasible
    };
    let inputs = split_inputs(&res.decision, maps.m);
    Ok(decision_from_inputs(
        model,
        x_k,
        inputs,
        status,
        Vec::new(),
        start.elapsed().as_secs_f64(),
        res.iterations,
    ))
}

/// Shared one-shot implementation: tracking objective, state/input boxes
/// and per-step per-obstacle chance constraints solved by SCP.
fn one_shot_mpc_cbf(
    x_k: &DVector<f64>,
    k: usize,
    obstacles: &[(ObstacleSpec, DVector<f64>)],
    cfg: &MpcConfig,
    barrier_cfg: &BarrierConfig,
    model: &dyn RobotModel,
    warm: Option<&DVector<f64>>,
) -> Result<ControlDecision> {
    cfg.validate(model)?;
    barrier_cfg.validate()?;
    let start = Instant::now();
    let maps = horizon_maps(model, x_k, cfg.horizon);
    let (p_qp, q_qp, constant) = maps.tracking_objective(cfg, k);
    let (lo, hi) = maps.input_box(cfg);
    let (lin_a, lin_b) = maps.state_rows(cfg);

    let mut chance = ChanceData::build(&maps, obstacles, barrier_cfg)?;
    chance.screen(&lo, &hi);
    let chance = Arc::new(chance);
    let chance_m = Arc::clone(&chance);
    let chance_c = Arc::clone(&chance);
    let bcfg = barrier_cfg.clone();

    let program = NonconvexProgram {
        p: p_qp,
        q: q_qp,
        constant,
        lower: lo,
        upper: hi,
        lin_a,
        lin_b,
        margins: Box::new(move |u| chance_m.margins(u)),
        convexify: Box::new(move |u_ref| chance_c.convexify(u_ref, &bcfg)),
    };
    let init = match warm {
        Some(w) => w.clone(),
        None => DVector::zeros(maps.input_dim()),
    };
    let res = solve_scp(&program, &init, 80, 1.0)?;
    let status = if res.status == SolveStatus::Optimal {
        ControlStatus::Feasible
    } else {
        ControlStatus::Infeasible
    };
    let margins_flat = chance.margins(&res.decision);
    let n_obs = obstacles.len();
    let margins = (0..chance.constrained_steps())
        .map(|i| margins_flat[i * n_obs..(i + 1) * n_obs].to_vec())
        .collect();
    let inputs = split_inputs(&res.decision, maps.m);
    Ok(decision_from_inputs(
        model,
        x_k,
        inputs,
        status,
        margins,
        start.elapsed().as_secs_f64(),
        res.iterations,
    ))
}

/// Deterministic MPC-CBF: barrier conditions on noise-free predicted
/// obstacle means. Identical to the chance-constrained controller with
/// the noise level forced to zero.
pub fn det_mpc_cbf(
    x_k: &DVector<f64>,
    k: usize,
    obstacles: &[(ObstacleSpec, DVector<f64>)],
    cfg: &MpcConfig,
    barrier_cfg: &BarrierConfig,
    model: &dyn RobotModel,
    warm: Option<&DVector<f64>>,
) -> Result<ControlDecision> {
    let noiseless: Vec<(ObstacleSpec, DVector<f64>)> = obstacles
        .iter()
        .map(|(spec, o)| {
            let mut s = spec.clone();
            s.noise_var = 0.0;
            (s, o.clone())
        })
        .collect();
    one_shot_mpc_cbf(x_k, k, &noiseless, cfg, barrier_cfg, model, warm)
}

/// One-shot chance-constrained MPC-CBF.
pub fn cc_mpc_cbf(
    x_k: &DVector<f64>,
    k: usize,
    obstacles: &[(ObstacleSpec, DVector<f64>)],
    cfg: &MpcConfig,
    barrier_cfg: &BarrierConfig,
    model: &dyn RobotModel,
    warm: Option<&DVector<f64>>,
) -> Result<ControlDecision> {
    one_shot_mpc_cbf(x_k, k, obstacles, cfg, barrier_cfg, model, warm)
}

/// Chance-constrained MPC with distance constraints: the barrier decay
/// rate is forced to one, which reduces the barrier condition to a pure
/// next-step distance requirement.
pub fn cc_mpc_dc(
    x_k: &DVector<f64>,
    k: usize,
    obstacles: &[(ObstacleSpec, DVector<f64>)],
    cfg: &MpcConfig,
    barrier_cfg: &BarrierConfig,
    model: &dyn RobotModel,
    warm: Option<&DVector<f64>>,
) -> Result<ControlDecision> {
    let mut dc_cfg = barrier_cfg.clone();
    dc_cfg.gamma = 1.0;
    one_shot_mpc_cbf(x_k, k, obstacles, cfg, &dc_cfg, model, warm)
}

/// Predictive safety filter: minimally perturb the nominal input
/// sequence, in the R-weighted norm, so the chance constraints hold.
///
/// Iterative convex scheme: states are frozen at the incumbent rollout,
/// the convexified constraints are solved as a slack-relaxed conic
/// problem, states are re-rolled, and the loop stops when the summed
/// state change drops below `eps` or after `j_max` iterations.
#[allow(clippy::too_many_arguments)]
pub fn safety_filter(
    nominal: &ControlDecision,
    x_k: &DVector<f64>,
    _k: usize,
    obstacles: &[(ObstacleSpec, DVector<f64>)],
    cfg: &MpcConfig,
    barrier_cfg: &BarrierConfig,
    model: &dyn RobotModel,
    eps: f64,
    j_max: usize,
) -> Result<ControlDecision> {
    cfg.validate(model)?;
    barrier_cfg.validate()?;
    let n_inputs = nominal.planned_inputs.len();
    if n_inputs != cfg.horizon {
        return Err(Error::Dimension {
            context: "safety_filter nominal inputs",
            expected: cfg.horizon,
            got: n_inputs,
        });
    }
    let start = Instant::now();
    let maps = horizon_maps(model, x_k, cfg.horizon);
    let m = maps.m;
    let nu = maps.input_dim();
    let mut u_nom = DVector::zeros(nu);
    for (i, u) in nominal.planned_inputs.iter().enumerate() {
        u_nom.rows_mut(i * m, m).copy_from(u);
    }
    let (lo, hi) = maps.input_box(cfg);

    let mut chance = ChanceData::build(&maps, obstacles, barrier_cfg)?;
    chance.screen(&lo, &hi);

    let finish = |u: &DVector<f64>, iterations: usize, feasible: bool| {
        let margins_flat = chance.margins(u);
        let n_obs = obstacles.len();
        let all_safe = margins_flat.iter().all(|&mg| mg >= -FEAS_TOL);
        let margins = (0..chance.constrained_steps())
            .map(|i| margins_flat[i * n_obs..(i + 1) * n_obs].to_vec())
            .collect();
        let status = if feasible && all_safe {
            ControlStatus::Feasible
        } else {
            ControlStatus::Infeasible
        };
        decision_from_inputs(
            model,
            x_k,
            split_inputs(u, m),
            status,
            margins,
            start.elapsed().as_secs_f64(),
            iterations,
        )
    };

    // Nominal already safe (or nothing to enforce): pass it through.
    if obstacles.is_empty() || chance.margins(&u_nom).iter().all(|&mg| mg >= -FEAS_TOL) {
        return Ok(finish(&u_nom, 1, true));
    }

    // Objective sum_i ||u_i - u_nom_i||^2_R over [U; slacks].
    let mut u = u_nom.clone();
    let mut prev_states = rollout(model, x_k, &split_inputs(&u, m))?;
    let mut consecutive_slack = 0usize;
    let mut iterations = 0usize;
    let mut feasible = true;
    let mut warm: Option<DVector<f64>> = None;
    // The frozen barrier decay makes each pass a fixed-point iteration
    // that can settle a hair on the unsafe side of the true constraints;
    // once progress stalls there, the convexified constraints are
    // tightened by the residual violation so the limit is strictly safe.
    let mut tighten = 0.0_f64;

    for _j in 0..j_max {
        iterations += 1;
        let socs = chance.convexify(&u, barrier_cfg)?;
        let k_slack = socs.len();
        let total = nu + k_slack;
        let mut p_ext = DMatrix::zeros(total, total);
        for i in 0..cfg.horizon {
            p_ext
                .view_mut((i * m, i * m), (m, m))
                .copy_from(&(2.0 * &cfg.r));
        }
        let mut q_ext = DVector::from_element(total, SLACK_PENALTY);
        let r_unom = {
            let mut v = DVector::zeros(nu);
            for i in 0..cfg.horizon {
                let block = &cfg.r * u_nom.rows(i * m, m);
                v.rows_mut(i * m, m).copy_from(&(-2.0 * block));
            }
            v
        };
        q_ext.rows_mut(0, nu).copy_from(&r_unom);
        let mut lower = DVector::zeros(total);
        let mut upper = DVector::from_element(total, f64::INFINITY);
        lower.rows_mut(0, nu).copy_from(&lo);
        upper.rows_mut(0, nu).copy_from(&hi);
        let mut ext_socs = Vec::with_capacity(k_slack);
        for (j, soc) in socs.iter().enumerate() {
            let mut a = DMatrix::zeros(soc.b.len(), total);
            a.view_mut((0, 0), (soc.b.len(), nu)).copy_from(&soc.a);
            let mut c = DVector::zeros(total);
            c.rows_mut(0, nu).copy_from(&soc.c);
            c[nu + j] = 1.0;
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
            constant: 0.0,
            lower,
            upper,
            lin_a: DMatrix::zeros(0, total),
            lin_b: DVector::zeros(0),
            socs: ext_socs,
        };
        let res = solve_conic(&sub, warm.as_ref())?;
        if std::env::var_os("SCBF_FILTER_DEBUG").is_some() {
            eprintln!(
                "filter iter {_j}: status {:?} ipm_iters {} obj {:.6e} maxviol {:.3e}",
                res.status, res.iterations, res.objective_value, res.max_violation
            );
        }
        if res.status == SolveStatus::Infeasible {
            feasible = false;
            break;
        }
        let u_next = res.decision.rows(0, nu).into_owned();
        let max_slack = if k_slack > 0 {
            res.decision.rows(nu, k_slack).max()
        } else {
            0.0
        };
        // Small residual slack is the linearization lag (handled by the
        // tightening below), not evidence of infeasibility.
        if max_slack > 1e-3 {
            consecutive_slack += 1;
            if consecutive_slack >= 5 {
                feasible = false;
                u = u_next;
                break;
            }
        } else {
            consecutive_slack = 0;
        }
        warm = Some(res.decision.clone());

        let inputs = split_inputs(&u_next, m);
        let states = rollout(model, x_k, &inputs)?;
        let change: f64 = states
            .iter()
            .zip(prev_states.iter())
            .map(|(a, b)| (a - b).norm())
            .sum();
        u = u_next;
        prev_states = states;
        // The frozen barrier decay lags the incumbent rollout by one
        // iteration, so the stop criterion is only trusted once the true
        // margins have actually settled on the safe side.
        let min_margin = chance
            .margins(&u)
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min);
        if change <= eps && min_margin >= -FEAS_TOL {
            break;
        }
        if (change <= 10.0 * eps || min_margin > -1e-3) && min_margin < -FEAS_TOL {
            tighten = (tighten + 1.5 * (-min_margin)).min(1e-2);
        }
    }

    Ok(finish(&u, iterations, feasible))
}

/// Sequential controller: nominal MPC followed by the predictive safety
/// filter. `warm` carries the shifted input sequence from the previous
/// step and seeds the nominal solve.
#[allow(clippy::too_many_arguments)]
pub fn sequential_step(
    x_k: &DVector<f64>,
    k: usize,
    obstacles: &[(ObstacleSpec, DVector<f64>)],
    cfg: &MpcConfig,
    barrier_cfg: &BarrierConfig,
    model: &dyn RobotModel,
    eps: f64,
    j_max: usize,
    warm: Option<&DVector<f64>>,
) -> Result<ControlDecision> {
    let nominal = nominal_mpc_warm(x_k, k, cfg, model, warm)?;
    if nominal.status == ControlStatus::Infeasible {
        return Ok(nominal);
    }
    let mut filtered = safety_filter(
        &nominal,
        x_k,
        k,
        obstacles,
        cfg,
        barrier_cfg,
        model,
        eps,
        j_max,
    )?;
    filtered.solve_time += nominal.solve_time;
    Ok(filtered)
}

/// Shifted warm start per the receding-horizon update: drop the first
/// input, repeat the last.
pub fn shift_warm_start(inputs: &[DVector<f64>]) -> DVector<f64> {
    let m = inputs[0].len();
    let n = inputs.len();
    let mut u = DVector::zeros(m * n);
    for i in 0..n {
        let src = if i + 1 < n { &inputs[i + 1] } else { &inputs[n - 1] };
        u.rows_mut(i * m, m).copy_from(src);
    }
    u
}

impl MpcConfig {
    /// Default tracking setup for the 3-D integrator scenario: heavy
    /// state weights, unit input weight, state box of 5, input box of 4
    /// and the circular reference.
    pub fn tracking_default(horizon: usize) -> MpcConfig {
        MpcConfig {
            horizon,
            p: DMatrix::identity(6, 6) * 1000.0,
            q: DMatrix::identity(6, 6) * 1000.0,
            r: DMatrix::identity(3, 3),
            state_lower: DVector::from_element(6, -5.0),
            state_upper: DVector::from_element(6, 5.0),
            input_lower: DVector::from_element(3, -4.0),
            input_upper: DVector::from_element(3, 4.0),
            terminal_lower: DVector::from_element(6, -5.0),
            terminal_upper: DVector::from_element(6, 5.0),
            reference: ReferenceSignal::Circular(Reference {
                amplitude: 2.0,
                rate: 0.4,
                altitude: 2.0,
                arg: ReferenceArg::Seconds,
                dt: 0.1,
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{CircularObstacleMotion, DoubleIntegrator};
    use approx::assert_abs_diff_eq;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn static_obstacle(pos: [f64; 3], radius: f64, sigma2: f64) -> (ObstacleSpec, DVector<f64>) {
        let motion = CircularObstacleMotion {
            center: [pos[0], pos[1], 0.0],
            orbit_radius: 0.0,
            angular_velocity: 0.0,
            phase: 0.0,
            altitude: pos[2],
        };
        let spec = ObstacleSpec::spherical(motion, radius, sigma2, 0.1);
        let o = spec.initial_state();
        (spec, o)
    }

    fn barrier_default() -> BarrierConfig {
        BarrierConfig::new(0.5, 0.97, 0.0, 6, 3)
    }

    #[test]
    fn nominal_zero_input_at_fixed_reference() {
        let model = DoubleIntegrator::new(0.1);
        let x_k = DVector::from_vec(vec![1.0, -2.0, 3.0, 0.0, 0.0, 0.0]);
        let mut cfg = MpcConfig::tracking_default(10);
        cfg.reference = ReferenceSignal::Fixed(x_k.clone());
        let d = nominal_mpc(&x_k, 0, &cfg, &model).unwrap();
        assert_eq!(d.status, ControlStatus::Feasible);
        for u in &d.planned_inputs {
            assert!(u.norm() <= 1e-6, "nonzero planned input {u}");
        }
    }

    /// Scalar one-step regulator with unit weights: the optimum of
    /// `2 (x + u)^2 + u^2` is `u = -2x/3`.
    #[test]
    fn nominal_scalar_closed_form() {
        struct Scalar;
        impl RobotModel for Scalar {
            fn state_dim(&self) -> usize {
                1
            }
            fn input_dim(&self) -> usize {
                1
            }
            fn dt(&self) -> f64 {
                1.0
            }
            fn drift(&self, x: &DVector<f64>) -> DVector<f64> {
                x.clone()
            }
            fn input_matrix(&self, _x: &DVector<f64>) -> DMatrix<f64> {
                DMatrix::identity(1, 1)
            }
        }
        let cfg = MpcConfig {
            horizon: 1,
            p: DMatrix::identity(1, 1),
            q: DMatrix::identity(1, 1),
            r: DMatrix::identity(1, 1),
            state_lower: DVector::from_element(1, f64::NEG_INFINITY),
            state_upper: DVector::from_element(1, f64::INFINITY),
            input_lower: DVector::from_element(1, f64::NEG_INFINITY),
            input_upper: DVector::from_element(1, f64::INFINITY),
            terminal_lower: DVector::from_element(1, f64::NEG_INFINITY),
            terminal_upper: DVector::from_element(1, f64::INFINITY),
            reference: ReferenceSignal::Fixed(DVector::zeros(1)),
        };
        for &x in &[1.5, -0.7, 4.0] {
            let d = nominal_mpc(&DVector::from_element(1, x), 0, &cfg, &Scalar).unwrap();
            assert!(
                (d.applied_input[0] + 2.0 * x / 3.0).abs() < 1e-6,
                "x = {x}: got {}",
                d.applied_input[0]
            );
        }
    }

    #[test]
    fn nominal_respects_input_bounds() {
        let model = DoubleIntegrator::new(0.1);
        let x_k = DVector::zeros(6);
        let mut cfg = MpcConfig::tracking_default(8);
        let mut far = DVector::zeros(6);
        far[0] = 100.0;
        cfg.reference = ReferenceSignal::Fixed(far);
        cfg.state_upper = DVector::from_element(6, f64::INFINITY);
        cfg.state_lower = DVector::from_element(6, f64::NEG_INFINITY);
        cfg.terminal_upper = cfg.state_upper.clone();
        cfg.terminal_lower = cfg.state_lower.clone();
        let d = nominal_mpc(&x_k, 0, &cfg, &model).unwrap();
        for u in &d.planned_inputs {
            for j in 0..3 {
                assert!(u[j] >= -4.0 - 1e-7 && u[j] <= 4.0 + 1e-7);
            }
        }
    }

    #[test]
    fn det_mpc_cbf_far_obstacle_matches_nominal() {
        let model = DoubleIntegrator::new(0.1);
        let x_k = DVector::from_vec(vec![0.0, 0.0, 2.0, 0.0, 0.0, 0.0]);
        let cfg = MpcConfig::tracking_default(10);
        let bcfg = barrier_default();
        let obstacles = vec![static_obstacle([100.0, 0.0, 2.0], 0.8, 0.0)];
        let nominal = nominal_mpc(&x_k, 0, &cfg, &model).unwrap();
        let det = det_mpc_cbf(&x_k, 0, &obstacles, &cfg, &bcfg, &model, None).unwrap();
        assert_eq!(det.status, ControlStatus::Feasible);
        assert!((det.applied_input - nominal.applied_input).norm() < 1e-6);
    }

    #[test]
    fn cc_equals_det_at_zero_noise() {
        let model = DoubleIntegrator::new(0.1);
        let x_k = DVector::from_vec(vec![0.0, 0.0, 2.0, 0.0, 0.0, 0.0]);
        let cfg = MpcConfig::tracking_default(10);
        let bcfg = barrier_default();
        let obstacles = vec![static_obstacle([0.0, 2.5, 2.0], 0.8, 0.0)];
        let det = det_mpc_cbf(&x_k, 0, &obstacles, &cfg, &bcfg, &model, None).unwrap();
        let cc = cc_mpc_cbf(&x_k, 0, &obstacles, &cfg, &bcfg, &model, None).unwrap();
        assert_eq!(det.applied_input, cc.applied_input);
        assert_eq!(det.status, cc.status);
    }

    #[test]
    fn cc_mpc_dc_is_gamma_one() {
        let model = DoubleIntegrator::new(0.1);
        let x_k = DVector::from_vec(vec![0.0, 0.5, 2.0, 0.0, 1.0, 0.0]);
        let cfg = MpcConfig::tracking_default(8);
        let bcfg = barrier_default();
        let obstacles = vec![static_obstacle([0.0, 3.0, 2.0], 0.8, 0.05)];
        let dc = cc_mpc_dc(&x_k, 0, &obstacles, &cfg, &bcfg, &model, None).unwrap();
        let mut g1 = bcfg.clone();
        g1.gamma = 1.0;
        let cc = cc_mpc_cbf(&x_k, 0, &obstacles, &cfg, &g1, &model, None).unwrap();
        assert_eq!(dc.applied_input, cc.applied_input);
        assert_eq!(dc.planned_inputs, cc.planned_inputs);
        assert_eq!(dc.margins, cc.margins);
    }

    #[test]
    fn feasible_decision_states_match_rollout() {
        let model = DoubleIntegrator::new(0.1);
        let x_k = DVector::from_vec(vec![0.0, 0.0, 2.0, 0.0, 0.0, 0.0]);
        let cfg = MpcConfig::tracking_default(10);
        let bcfg = barrier_default();
        let obstacles = vec![static_obstacle([0.0, 2.5, 2.0], 0.8, 0.01)];
        let d = cc_mpc_cbf(&x_k, 0, &obstacles, &cfg, &bcfg, &model, None).unwrap();
        assert_eq!(d.status, ControlStatus::Feasible);
        let states = rollout(&model, &x_k, &d.planned_inputs).unwrap();
        for (a, b) in d.predicted_states.iter().zip(states.iter()) {
            assert_eq!(a, b);
        }
        for row in &d.margins {
            for &mg in row {
                assert!(mg >= -1e-6, "infeasible margin {mg}");
            }
        }
    }

    #[test]
    fn filter_passthrough_without_obstacles() {
        let model = DoubleIntegrator::new(0.1);
        let x_k = DVector::from_vec(vec![0.0, 0.0, 2.0, 0.0, 0.0, 0.0]);
        let cfg = MpcConfig::tracking_default(10);
        let bcfg = barrier_default();
        let nominal = nominal_mpc(&x_k, 0, &cfg, &model).unwrap();
        let filtered =
            safety_filter(&nominal, &x_k, 0, &[], &cfg, &bcfg, &model, 1e-4, 20).unwrap();
        assert_eq!(filtered.planned_inputs, nominal.planned_inputs);
        assert_eq!(filtered.status, ControlStatus::Feasible);
        assert_eq!(filtered.inner_iterations, 1);
    }

    #[test]
    fn filter_passthrough_when_nominal_safe() {
        let model = DoubleIntegrator::new(0.1);
        let x_k = DVector::from_vec(vec![0.0, 0.0, 2.0, 0.0, 0.0, 0.0]);
        let cfg = MpcConfig::tracking_default(10);
        let bcfg = barrier_default();
        let obstacles = vec![static_obstacle([100.0, 0.0, 2.0], 0.8, 0.1)];
        let nominal = nominal_mpc(&x_k, 0, &cfg, &model).unwrap();
        let filtered =
            safety_filter(&nominal, &x_k, 0, &obstacles, &cfg, &bcfg, &model, 1e-4, 20).unwrap();
        assert_eq!(filtered.planned_inputs, nominal.planned_inputs);
        assert_eq!(filtered.inner_iterations, 1);
        // objective of the filter at its output is zero
        let cost: f64 = filtered
            .planned_inputs
            .iter()
            .zip(nominal.planned_inputs.iter())
            .map(|(a, b)| (a - b).norm_squared())
            .sum();
        assert_eq!(cost, 0.0);
    }

    #[test]
    fn filter_enforces_margins_on_unsafe_nominal() {
        let model = DoubleIntegrator::new(0.1);
        // reference target sits inside the obstacle, so the nominal plan
        // must be altered
        let x_k = DVector::from_vec(vec![0.0, 0.6, 2.0, 0.0, 0.0, 0.0]);
        let cfg = MpcConfig::tracking_default(15);
        let bcfg = barrier_default();
        let obstacles = vec![static_obstacle([0.0, 2.0, 2.0], 0.8, 0.01)];
        let nominal = nominal_mpc(&x_k, 0, &cfg, &model).unwrap();
        let filtered =
            safety_filter(&nominal, &x_k, 0, &obstacles, &cfg, &bcfg, &model, 1e-4, 20).unwrap();
        assert_eq!(filtered.status, ControlStatus::Feasible);
        assert!(filtered.inner_iterations <= 20);
        let diff: f64 = filtered
            .planned_inputs
            .iter()
            .zip(nominal.planned_inputs.iter())
            .map(|(a, b)| (a - b).norm())
            .sum();
        assert!(diff > 1e-3, "filter did not alter an unsafe nominal plan");
        for row in &filtered.margins {
            for &mg in row {
                assert!(mg >= -1e-6, "margin {mg} after filtering");
            }
        }
    }

    #[test]
    fn filter_local_optimality_spot_check() {
        let model = DoubleIntegrator::new(0.1);
        let x_k = DVector::from_vec(vec![0.0, 0.6, 2.0, 0.0, 0.0, 0.0]);
        let cfg = MpcConfig::tracking_default(10);
        let bcfg = barrier_default();
        let obstacles = vec![static_obstacle([0.0, 2.0, 2.0], 0.8, 0.01)];
        let nominal = nominal_mpc(&x_k, 0, &cfg, &model).unwrap();
        let filtered =
            safety_filter(&nominal, &x_k, 0, &obstacles, &cfg, &bcfg, &model, 1e-4, 20).unwrap();
        assert_eq!(filtered.status, ControlStatus::Feasible);

        let maps = horizon_maps(&model, &x_k, cfg.horizon);
        let (lo, hi) = maps.input_box(&cfg);
        let mut chance = ChanceData::build(&maps, &obstacles, &bcfg).unwrap();
        chance.screen(&lo, &hi);
        let stack = |inputs: &[DVector<f64>]| {
            let mut u = DVector::zeros(maps.input_dim());
            for (i, v) in inputs.iter().enumerate() {
                u.rows_mut(i * 3, 3).copy_from(v);
            }
            u
        };
        let u_star = stack(&filtered.planned_inputs);
        let u_nom = stack(&nominal.planned_inputs);
        let cost = |u: &DVector<f64>| (u - &u_nom).norm_squared();
        let base = cost(&u_star);
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut feasible_hits = 0;
        for _ in 0..1000 {
            let pert = DVector::from_fn(maps.input_dim(), |_, _| rng.gen_range(-0.3..0.3));
            let mut cand = &u_star + pert;
            for j in 0..cand.len() {
                cand[j] = cand[j].clamp(lo[j], hi[j]);
            }
            if chance.margins(&cand).iter().all(|&mg| mg >= 0.0) {
                feasible_hits += 1;
                assert!(
                    cost(&cand) >= base - 1e-9,
                    "random feasible perturbation beats the filter output"
                );
            }
        }
        assert!(feasible_hits > 10, "too few feasible perturbations");
    }

    #[test]
    fn sequential_matches_nominal_without_obstacles() {
        let model = DoubleIntegrator::new(0.1);
        let cfg = MpcConfig::tracking_default(10);
        let bcfg = barrier_default();
        let mut x_seq = DVector::from_vec(vec![0.0, 2.0, 2.0, 0.0, 0.0, 0.0]);
        let mut x_nom = x_seq.clone();
        let mut warm: Option<DVector<f64>> = None;
        for k in 0..30 {
            let seq =
                sequential_step(&x_seq, k, &[], &cfg, &bcfg, &model, 1e-4, 20, warm.as_ref())
                    .unwrap();
            let nom = nominal_mpc(&x_nom, k, &cfg, &model).unwrap();
            assert_abs_diff_eq!(seq.applied_input, nom.applied_input, epsilon = 1e-5);
            x_seq = model.step(&x_seq, &seq.applied_input);
            x_nom = model.step(&x_nom, &nom.applied_input);
            warm = Some(shift_warm_start(&seq.planned_inputs));
        }
        let err = (&x_seq - &x_nom).norm();
        assert!(err < 1e-4, "trajectories diverged by {err}");
    }
}
