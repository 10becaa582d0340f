//! Closed-loop simulation and Monte Carlo harness: seeded trajectory
//! runs, batch success/feasibility sweeps, and sampling-based validation
//! of the closed-form barrier-condition moments.

use std::sync::OnceLock;
use std::time::Instant;

use nalgebra::DVector;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::barrier::{barrier_value, BarrierConfig};
use crate::control::{
    cc_mpc_cbf, cc_mpc_dc, det_mpc_cbf, nominal_mpc_warm, sequential_step, shift_warm_start,
    CondensedDynamics, ControlDecision, ControlStatus, MpcConfig,
};
use crate::models::{
    obstacle_step, robot_step, CircularObstacleMotion, DoubleIntegrator, ObstacleSpec, RobotModel,
};
use crate::{Error, Result};

/// Which controller drives the closed loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ControllerKind {
    Nominal,
    DetMpcCbf,
    CcMpcCbf,
    CcMpcDc,
    Sequential,
}

impl ControllerKind {
    pub fn name(&self) -> &'static str {
        match self {
            ControllerKind::Nominal => "nominal",
            ControllerKind::DetMpcCbf => "det-mpc-cbf",
            ControllerKind::CcMpcCbf => "cc-mpc-cbf",
            ControllerKind::CcMpcDc => "cc-mpc-dc",
            ControllerKind::Sequential => "sequential",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "nominal" => Ok(ControllerKind::Nominal),
            "det-mpc-cbf" => Ok(ControllerKind::DetMpcCbf),
            "cc-mpc-cbf" => Ok(ControllerKind::CcMpcCbf),
            "cc-mpc-dc" => Ok(ControllerKind::CcMpcDc),
            "sequential" => Ok(ControllerKind::Sequential),
            other => Err(Error::Config {
                section: "run".into(),
                key: "controller".into(),
                message: format!(
                    "unknown controller '{other}' (expected nominal | det-mpc-cbf | \
                     cc-mpc-cbf | cc-mpc-dc | sequential)"
                ),
            }),
        }
    }
}

/// A complete closed-loop setup: plant, initial state, controller
/// configuration, obstacles and run parameters.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub model: DoubleIntegrator,
    pub x0: DVector<f64>,
    pub mpc: MpcConfig,
    pub barrier: BarrierConfig,
    pub obstacles: Vec<ObstacleSpec>,
    pub k_max: usize,
    pub seed: u64,
    pub trials: usize,
    pub controller: ControllerKind,
    pub filter_eps: f64,
    pub filter_j_max: usize,
}

impl Scenario {
    /// Default tracking scenario: double integrator at 0.1 s sampling,
    /// 200 steps, horizon 15, circular reference of radius 2 at altitude
    /// 2, and two spherical obstacles of radius 0.8 on large orbits
    /// that sweep across the reference circle, passing close to the
    /// reference point several times per run.
    pub fn tracking_default() -> Self {
        let dt = 0.1;
        let model = DoubleIntegrator::new(dt);
        let mpc = MpcConfig::tracking_default(15);
        let barrier = BarrierConfig::new(0.5, 0.97, 0.0, 6, 3);
        let obstacles = vec![
            ObstacleSpec::spherical(
                CircularObstacleMotion {
                    center: [4.065208, 2.663396, 0.0],
                    orbit_radius: 3.99,
                    angular_velocity: -0.562,
                    phase: -1.214,
                    altitude: 2.0,
                },
                0.8,
                0.1,
                dt,
            ),
            ObstacleSpec::spherical(
                CircularObstacleMotion {
                    center: [-1.342856, -5.878833, 0.0],
                    orbit_radius: 5.54,
                    angular_velocity: -0.619,
                    phase: -2.815,
                    altitude: 2.0,
                },
                0.8,
                0.1,
                dt,
            ),
        ];
        Self {
            model,
            x0: DVector::from_vec(vec![0.0, 0.0, 2.0, 0.0, 0.0, 0.0]),
            mpc,
            barrier,
            obstacles,
            k_max: 200,
            seed: 1,
            trials: 20,
            controller: ControllerKind::CcMpcCbf,
            filter_eps: 1e-4,
            filter_j_max: 20,
        }
    }

    /// Noise-dominated variant of [`Scenario::tracking_default`]: the
    /// same robot and reference, but the obstacles orbit far outside the
    /// arena. Whether they ever threaten the robot is then governed by
    /// the accumulated driving noise, which makes this the natural
    /// setting for feasibility studies at large noise levels — at low
    /// noise the chance constraints never activate.
    pub fn diffusion_default() -> Self {
        let mut s = Self::tracking_default();
        let dt = s.model.dt;
        s.obstacles = vec![
            ObstacleSpec::spherical(
                CircularObstacleMotion {
                    center: [45.0, 0.0, 0.0],
                    orbit_radius: 2.0,
                    angular_velocity: 0.4,
                    phase: std::f64::consts::PI,
                    altitude: 2.0,
                },
                0.8,
                1.0,
                dt,
            ),
            ObstacleSpec::spherical(
                CircularObstacleMotion {
                    center: [0.0, 45.0, 0.0],
                    orbit_radius: 2.0,
                    angular_velocity: 0.4,
                    phase: -std::f64::consts::FRAC_PI_2,
                    altitude: 2.0,
                },
                0.8,
                1.0,
                dt,
            ),
        ];
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.mpc.validate(&self.model)?;
        self.barrier.validate()?;
        for spec in &self.obstacles {
            spec.validate()?;
        }
        if self.k_max == 0 {
            return Err(Error::Invariant("k_max must be >= 1".into()));
        }
        if self.x0.len() != self.model.state_dim() {
            return Err(Error::Dimension {
                context: "Scenario initial state",
                expected: self.model.state_dim(),
                got: self.x0.len(),
            });
        }
        Ok(())
    }

    /// Set the driving-noise variance on every obstacle.
    pub fn set_sigma2(&mut self, sigma2: f64) {
        for spec in &mut self.obstacles {
            spec.noise_var = sigma2;
        }
    }
}

/// One executed step of a closed-loop run.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub k: usize,
    pub state: DVector<f64>,
    pub input: DVector<f64>,
    pub obstacle_states: Vec<DVector<f64>>,
    /// Barrier value per obstacle at the true sampled obstacle state.
    pub h: Vec<f64>,
    /// Smallest chance margin reported by the controller (infinite when
    /// the controller enforces no obstacle constraints).
    pub margin_min: f64,
    pub status: ControlStatus,
    pub solve_time: f64,
}

/// Full log of one closed-loop trial.
#[derive(Debug, Clone)]
pub struct TrajectoryLog {
    pub steps: Vec<StepRecord>,
    /// True iff some executed step had a barrier value below zero for
    /// some obstacle (evaluated at true sampled obstacle states).
    pub collided: bool,
    pub first_infeasible_k: Option<usize>,
    pub wall_time: f64,
}

impl TrajectoryLog {
    /// A successful trial: no collision and never infeasible.
    /// Collision-avoidance success: no sampled obstacle ever entered the
    /// unsafe set along the executed trajectory. Infeasible optimizer
    /// steps are tracked separately through [`Self::first_infeasible_k`]
    /// and the feasibility experiments; a trial that recovers from them
    /// without a collision still counts as successful avoidance.
    pub fn success(&self) -> bool {
        !self.collided
    }

    /// One row per executed step, 17-significant-digit floats.
    pub fn to_csv(&self) -> String {
        let n = self.steps.first().map_or(0, |s| s.state.len());
        let m = self.steps.first().map_or(0, |s| s.input.len());
        let n_obs = self.steps.first().map_or(0, |s| s.h.len());
        let mut out = String::from("k");
        for i in 0..n {
            out.push_str(&format!(",x{i}"));
        }
        for i in 0..m {
            out.push_str(&format!(",u{i}"));
        }
        for i in 0..n_obs {
            out.push_str(&format!(",h_obs{}", i + 1));
        }
        out.push_str(",margin_min,status,solve_ms\n");
        for s in &self.steps {
            out.push_str(&s.k.to_string());
            for v in s.state.iter().chain(s.input.iter()).chain(s.h.iter()) {
                out.push(',');
                out.push_str(&format_float(*v));
            }
            out.push(',');
            out.push_str(&format_float(s.margin_min));
            out.push_str(match s.status {
                ControlStatus::Feasible => ",Feasible,",
                ControlStatus::Infeasible => ",Infeasible,",
            });
            out.push_str(&format_float(s.solve_time * 1e3));
            out.push('\n');
        }
        out
    }
}

/// 17 significant digits, locale independent.
pub fn format_float(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        format!("{v}")
    }
}

/// Aggregated batch results, one row per (parameter, controller).
#[derive(Debug, Clone)]
pub struct TableRow {
    pub parameter: f64,
    pub controller: String,
    pub trials: usize,
    pub success_pct: f64,
    pub feasible_pct: f64,
    /// Mean first infeasible step over the trials that became
    /// infeasible; absent when every trial stayed feasible.
    pub mean_infeasible_k: Option<f64>,
    pub mean_wall_s: f64,
}

#[derive(Debug, Clone, Default)]
pub struct ExperimentTable {
    pub rows: Vec<TableRow>,
}

impl ExperimentTable {
    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("parameter,controller,trials,success_pct,feasible_pct,mean_infeasible_k,mean_wall_s\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                format_float(r.parameter),
                r.controller,
                r.trials,
                format_float(r.success_pct),
                format_float(r.feasible_pct),
                r.mean_infeasible_k.map(format_float).unwrap_or_default(),
                format_float(r.mean_wall_s),
            ));
        }
        out
    }

    pub fn row(&self, parameter: f64, controller: &str) -> Option<&TableRow> {
        self.rows
            .iter()
            .find(|r| r.controller == controller && (r.parameter - parameter).abs() < 1e-12)
    }
}

/// Worker pool shared by all batch runs; `SCBF_THREADS` caps its size.
fn pool() -> &'static rayon::ThreadPool {
    static POOL: OnceLock<rayon::ThreadPool> = OnceLock::new();
    POOL.get_or_init(|| {
        let mut builder = rayon::ThreadPoolBuilder::new();
        if let Some(n) = std::env::var("SCBF_THREADS")
            .ok()
            .and_then(|v| v.parse::<usize>().ok())
        {
            builder = builder.num_threads(n.max(1));
        }
        builder.build().expect("worker pool construction")
    })
}

fn min_margin(decision: &ControlDecision) -> f64 {
    decision
        .margins
        .iter()
        .flatten()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// Simulate one seeded closed-loop trial.
///
/// Obstacles move stochastically from the trial seed; the robot moves
/// deterministically under the applied inputs. The first infeasible
/// controller step records its index, after which the run continues
/// under the controller's best-effort (least-violating) input so the
/// collision outcome is still observed over the full run; internal
/// controller errors are recorded as infeasible steps with a zero input
/// rather than aborting the run.
pub fn run_closed_loop(scenario: &Scenario) -> Result<TrajectoryLog> {
    scenario.validate()?;
    let start = Instant::now();
    let model = &scenario.model;
    let m = model.input_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed);
    let mut x = scenario.x0.clone();
    let mut obstacle_states: Vec<DVector<f64>> = scenario
        .obstacles
        .iter()
        .map(|spec| spec.initial_state())
        .collect();
    let mut warm: Option<DVector<f64>> = None;
    let mut steps = Vec::with_capacity(scenario.k_max);
    let mut collided = false;
    let mut first_infeasible_k = None;

    for k in 0..scenario.k_max {
        let pairs: Vec<(ObstacleSpec, DVector<f64>)> = scenario
            .obstacles
            .iter()
            .cloned()
            .zip(obstacle_states.iter().cloned())
            .collect();
        let h: Vec<f64> = pairs
            .iter()
            .map(|(spec, o)| barrier_value(&x, o, spec, &scenario.barrier))
            .collect();
        if h.iter().any(|&v| v < 0.0) {
            collided = true;
        }

        let decision = match scenario.controller {
            ControllerKind::Nominal => nominal_mpc_warm(&x, k, &scenario.mpc, model, warm.as_ref()),
            ControllerKind::DetMpcCbf => det_mpc_cbf(
                &x,
                k,
                &pairs,
                &scenario.mpc,
                &scenario.barrier,
                model,
                warm.as_ref(),
            ),
            ControllerKind::CcMpcCbf => cc_mpc_cbf(
                &x,
                k,
                &pairs,
                &scenario.mpc,
                &scenario.barrier,
                model,
                warm.as_ref(),
            ),
            ControllerKind::CcMpcDc => cc_mpc_dc(
                &x,
                k,
                &pairs,
                &scenario.mpc,
                &scenario.barrier,
                model,
                warm.as_ref(),
            ),
            ControllerKind::Sequential => sequential_step(
                &x,
                k,
                &pairs,
                &scenario.mpc,
                &scenario.barrier,
                model,
                scenario.filter_eps,
                scenario.filter_j_max,
                warm.as_ref(),
            ),
        };
        let (input, status, margin, solve_time, next_warm) = match &decision {
            Ok(d) => (
                d.applied_input.clone(),
                d.status,
                min_margin(d),
                d.solve_time,
                Some(shift_warm_start(&d.planned_inputs)),
            ),
            Err(_) => (
                DVector::zeros(m),
                ControlStatus::Infeasible,
                f64::NEG_INFINITY,
                0.0,
                None,
            ),
        };
        if status == ControlStatus::Infeasible && first_infeasible_k.is_none() {
            first_infeasible_k = Some(k);
        }
        steps.push(StepRecord {
            k,
            state: x.clone(),
            input: input.clone(),
            obstacle_states: obstacle_states.clone(),
            h,
            margin_min: margin,
            status,
            solve_time,
        });
        x = robot_step(model, &x, &input)?;
        warm = next_warm;
        for (spec, o) in scenario.obstacles.iter().zip(obstacle_states.iter_mut()) {
            let sigma = spec.noise_var.sqrt();
            let noise = DVector::from_fn(spec.state_dim(), |_, _| {
                sigma * rng.sample::<f64, _>(StandardNormal)
            });
            *o = obstacle_step(spec, o, &noise)?;
        }
    }

    // Terminal state check against the last sampled obstacle states.
    for (spec, o) in scenario.obstacles.iter().zip(obstacle_states.iter()) {
        if barrier_value(&x, o, spec, &scenario.barrier) < 0.0 {
            collided = true;
        }
    }

    Ok(TrajectoryLog {
        steps,
        collided,
        first_infeasible_k,
        wall_time: start.elapsed().as_secs_f64(),
    })
}

/// Run `trials` seeded trials (seed = scenario seed + trial index) on
/// the worker pool; results are ordered by trial index regardless of
/// execution order.
pub fn run_batch(scenario: &Scenario, trials: usize) -> Result<Vec<TrajectoryLog>> {
    pool().install(|| {
        (0..trials)
            .into_par_iter()
            .map(|i| {
                let mut s = scenario.clone();
                s.seed = scenario.seed + i as u64;
                run_closed_loop(&s)
            })
            .collect()
    })
}

fn summarize(parameter: f64, controller: &ControllerKind, logs: &[TrajectoryLog]) -> TableRow {
    let trials = logs.len();
    let successes = logs.iter().filter(|l| l.success()).count();
    let feasible = logs.iter().filter(|l| l.first_infeasible_k.is_none()).count();
    let infeasible_ks: Vec<f64> = logs
        .iter()
        .filter_map(|l| l.first_infeasible_k.map(|k| k as f64))
        .collect();
    TableRow {
        parameter,
        controller: controller.name().to_string(),
        trials,
        success_pct: 100.0 * successes as f64 / trials as f64,
        feasible_pct: 100.0 * feasible as f64 / trials as f64,
        mean_infeasible_k: if infeasible_ks.is_empty() {
            None
        } else {
            Some(infeasible_ks.iter().sum::<f64>() / infeasible_ks.len() as f64)
        },
        mean_wall_s: logs.iter().map(|l| l.wall_time).sum::<f64>() / trials as f64,
    }
}

/// Collision-avoidance success rates over a noise sweep.
pub fn success_rate_experiment(
    base: &Scenario,
    sigma2_list: &[f64],
    controllers: &[ControllerKind],
    trials: usize,
) -> Result<ExperimentTable> {
    if trials == 0 {
        return Err(Error::Invariant("trials must be >= 1".into()));
    }
    let mut table = ExperimentTable::default();
    for &sigma2 in sigma2_list {
        for controller in controllers {
            let mut s = base.clone();
            s.set_sigma2(sigma2);
            s.controller = *controller;
            let logs = run_batch(&s, trials)?;
            table.rows.push(summarize(sigma2, controller, &logs));
        }
    }
    Ok(table)
}

/// Sweep axis for [`feasibility_experiment`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    Sigma2,
    Gamma,
    Horizon,
}

impl SweepAxis {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sigma2" => Ok(SweepAxis::Sigma2),
            "gamma" => Ok(SweepAxis::Gamma),
            "horizon" => Ok(SweepAxis::Horizon),
            other => Err(Error::Config {
                section: "sweep".into(),
                key: "axis".into(),
                message: format!("unknown axis '{other}' (expected sigma2 | gamma | horizon)"),
            }),
        }
    }
}

/// Feasibility rates of the one-shot chance-constrained controller over
/// one parameter axis; the sequential pipeline is included alongside on
/// the noise axis.
pub fn feasibility_experiment(
    base: &Scenario,
    axis: SweepAxis,
    values: &[f64],
    trials: usize,
) -> Result<ExperimentTable> {
    if trials == 0 {
        return Err(Error::Invariant("trials must be >= 1".into()));
    }
    let controllers: &[ControllerKind] = match axis {
        SweepAxis::Sigma2 => &[ControllerKind::CcMpcCbf, ControllerKind::Sequential],
        _ => &[ControllerKind::CcMpcCbf],
    };
    let mut table = ExperimentTable::default();
    for &value in values {
        for controller in controllers {
            let mut s = base.clone();
            match axis {
                SweepAxis::Sigma2 => s.set_sigma2(value),
                SweepAxis::Gamma => s.barrier.gamma = value,
                SweepAxis::Horizon => {
                    let horizon = value.round() as usize;
                    if horizon == 0 || (value - horizon as f64).abs() > 1e-9 {
                        return Err(Error::Invariant(format!(
                            "horizon sweep values must be positive integers, got {value}"
                        )));
                    }
                    s.mpc.horizon = horizon;
                }
            }
            s.controller = *controller;
            let logs = run_batch(&s, trials)?;
            table.rows.push(summarize(value, controller, &logs));
        }
    }
    Ok(table)
}

/// Exact one-step barrier decrease condition under a sampled obstacle
/// noise draw: `h(x+, xi(o) + w) - (1 - gamma) h(x, o)`.
fn sampled_cbc(
    x_next: &DVector<f64>,
    o: &DVector<f64>,
    noise: &DVector<f64>,
    spec: &ObstacleSpec,
    cfg: &BarrierConfig,
    h_now: f64,
) -> f64 {
    let o_next = spec.mean_motion(o) + noise;
    let h_next = {
        let e = &cfg.selector * x_next - &o_next;
        (e.transpose() * &spec.shape * &e)[(0, 0)] - 1.0
    };
    h_next - (1.0 - cfg.gamma) * h_now
}

/// Monte Carlo estimate of the probability that the exact barrier
/// decrease condition clears `zeta` under the Gaussian obstacle noise.
pub fn empirical_chance(
    x: &DVector<f64>,
    o: &DVector<f64>,
    u: &DVector<f64>,
    model: &dyn RobotModel,
    spec: &ObstacleSpec,
    barrier_cfg: &BarrierConfig,
    samples: usize,
    seed: u64,
) -> Result<f64> {
    let x_next = robot_step(model, x, u)?;
    let h_now = barrier_value(x, o, spec, barrier_cfg);
    let sigma = spec.noise_var.sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hits = 0usize;
    for _ in 0..samples {
        let noise = DVector::from_fn(spec.state_dim(), |_, _| {
            sigma * rng.sample::<f64, _>(StandardNormal)
        });
        if sampled_cbc(&x_next, o, &noise, spec, barrier_cfg, h_now) >= barrier_cfg.zeta {
            hits += 1;
        }
    }
    Ok(hits as f64 / samples as f64)
}

/// Closed-form vs sampled moments of the one-step barrier decrease
/// condition.
#[derive(Debug, Clone)]
pub struct MomentReport {
    pub closed_mean: f64,
    pub closed_var: f64,
    pub empirical_mean: f64,
    pub empirical_var: f64,
    pub se_mean: f64,
    pub se_var: f64,
    /// True iff both moments agree within three standard errors.
    pub pass: bool,
}

/// Compare the closed-form mean/variance of the barrier decrease
/// condition against a Monte Carlo estimate with standard errors.
pub fn validate_moments(
    x: &DVector<f64>,
    o: &DVector<f64>,
    u: &DVector<f64>,
    model: &dyn RobotModel,
    spec: &ObstacleSpec,
    barrier_cfg: &BarrierConfig,
    samples: usize,
    seed: u64,
) -> Result<MomentReport> {
    let cd = CondensedDynamics::new(model);
    let sel = &barrier_cfg.selector;
    let g_eff = sel * &cd.b;
    let p_affine = sel * (&cd.a * x + &cd.c);
    let h_now = barrier_value(x, o, spec, barrier_cfg);
    let moments = crate::barrier::CbcMoments::from_position_affine(
        &g_eff,
        &p_affine,
        &spec.mean_motion(o),
        &spec.shape,
        spec.noise_var,
        (1.0 - barrier_cfg.gamma) * h_now,
    );
    let closed_mean = moments.mean_at(u);
    let closed_var = moments.var_at(u);

    let x_next = robot_step(model, x, u)?;
    let sigma = spec.noise_var.sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sum = 0.0;
    let mut sum2 = 0.0;
    let mut sum4 = 0.0;
    let draws: Vec<f64> = (0..samples)
        .map(|_| {
            let noise = DVector::from_fn(spec.state_dim(), |_, _| {
                sigma * rng.sample::<f64, _>(StandardNormal)
            });
            sampled_cbc(&x_next, o, &noise, spec, barrier_cfg, h_now)
        })
        .collect();
    let n = samples as f64;
    for &v in &draws {
        sum += v;
    }
    let empirical_mean = sum / n;
    for &v in &draws {
        let d = v - empirical_mean;
        sum2 += d * d;
        sum4 += d * d * d * d;
    }
    let empirical_var = sum2 / (n - 1.0);
    let m4 = sum4 / n;
    let se_mean = (empirical_var / n).sqrt();
    // Standard error of the sample variance from the empirical fourth
    // central moment (no normality assumption).
    let se_var = ((m4 - empirical_var * empirical_var).max(0.0) / n).sqrt();
    let tol_mean = 3.0 * se_mean + 1e-12;
    let tol_var = 3.0 * se_var + 1e-12;
    let pass =
        (closed_mean - empirical_mean).abs() <= tol_mean && (closed_var - empirical_var).abs() <= tol_var;
    Ok(MomentReport {
        closed_mean,
        closed_var,
        empirical_mean,
        empirical_var,
        se_mean,
        se_var,
        pass,
    })
}
