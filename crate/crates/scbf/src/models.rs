//! Robot and obstacle dynamics.
//!
//! The robot follows discrete control-affine dynamics
//! `x_{k+1} = f(x_k) + g(x_k) u_k`; obstacles follow a mean motion map
//! `o_{k+1} = xi(o_k) + w_k` with `w_k ~ N(0, sigma^2 I)` injected by the
//! caller. All types are immutable after construction and all operations
//! are pure functions.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Discrete control-affine robot dynamics.
pub trait RobotModel: Send + Sync {
    /// State dimension `n`.
    fn state_dim(&self) -> usize;
    /// Input dimension `m`.
    fn input_dim(&self) -> usize;
    /// Sampling time in seconds.
    fn dt(&self) -> f64;
    /// Drift term `f(x)`.
    fn drift(&self, x: &DVector<f64>) -> DVector<f64>;
    /// Input matrix `g(x)`, `n x m`.
    fn input_matrix(&self, x: &DVector<f64>) -> DMatrix<f64>;

    /// One step of the dynamics, `f(x) + g(x) u`.
    fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        self.drift(x) + self.input_matrix(x) * u
    }
}

/// One step of the robot dynamics with dimension checking.
pub fn robot_step(
    model: &dyn RobotModel,
    x: &DVector<f64>,
    u: &DVector<f64>,
) -> Result<DVector<f64>> {
    if x.len() != model.state_dim() {
        return Err(Error::Dimension {
            context: "robot_step state",
            expected: model.state_dim(),
            got: x.len(),
        });
    }
    if u.len() != model.input_dim() {
        return Err(Error::Dimension {
            context: "robot_step input",
            expected: model.input_dim(),
            got: u.len(),
        });
    }
    Ok(model.step(x, u))
}

/// Roll the dynamics forward from `x0` under a given input sequence.
///
/// Returns `inputs.len() + 1` states; element 0 is `x0`.
pub fn rollout(
    model: &dyn RobotModel,
    x0: &DVector<f64>,
    inputs: &[DVector<f64>],
) -> Result<Vec<DVector<f64>>> {
    let mut states = Vec::with_capacity(inputs.len() + 1);
    states.push(x0.clone());
    for u in inputs {
        let next = robot_step(model, states.last().unwrap(), u)?;
        states.push(next);
    }
    Ok(states)
}

/// Double-integrator model in three spatial dimensions: state
/// `[p; v] in R^6`, input `u in R^3`.
///
/// The position block updates as `p + dt * v`. By default the velocity
/// block of `A` is zero, so the input acts as the commanded velocity for
/// the next step (`v_{k+1} = u_k`); with `velocity_persistence` the
/// velocity block is the identity and the input is an acceleration
/// increment (`v_{k+1} = v_k + u_k`).
#[derive(Debug, Clone, Copy)]
pub struct DoubleIntegrator {
    pub dt: f64,
    pub velocity_persistence: bool,
}

impl DoubleIntegrator {
    pub fn new(dt: f64) -> Self {
        Self {
            dt,
            velocity_persistence: false,
        }
    }

    /// The system matrix `A`.
    pub fn a_matrix(&self) -> DMatrix<f64> {
        let mut a = DMatrix::zeros(6, 6);
        for i in 0..3 {
            a[(i, i)] = 1.0;
            a[(i, i + 3)] = self.dt;
            if self.velocity_persistence {
                a[(i + 3, i + 3)] = 1.0;
            }
        }
        a
    }

    /// The input matrix `B`.
    pub fn b_matrix(&self) -> DMatrix<f64> {
        let mut b = DMatrix::zeros(6, 3);
        for i in 0..3 {
            b[(i + 3, i)] = 1.0;
        }
        b
    }
}

impl RobotModel for DoubleIntegrator {
    fn state_dim(&self) -> usize {
        6
    }
    fn input_dim(&self) -> usize {
        3
    }
    fn dt(&self) -> f64 {
        self.dt
    }
    fn drift(&self, x: &DVector<f64>) -> DVector<f64> {
        self.a_matrix() * x
    }
    fn input_matrix(&self, _x: &DVector<f64>) -> DMatrix<f64> {
        self.b_matrix()
    }
}

/// Noise-free obstacle motion: rotation at constant angular velocity about
/// a vertical axis through `center`, in the plane `z = altitude`.
///
/// The map acts on whatever state the obstacle currently occupies, so the
/// driving noise accumulates (the obstacle performs a random walk
/// superimposed on the rotation).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CircularObstacleMotion {
    /// Center of rotation (x, y); the z component is ignored by the map.
    pub center: [f64; 3],
    /// Radius of the noise-free orbit, used to place the initial state.
    pub orbit_radius: f64,
    /// Angular velocity in rad/s.
    pub angular_velocity: f64,
    /// Initial angle on the orbit in rad.
    pub phase: f64,
    /// Height of the orbit plane.
    pub altitude: f64,
}

impl CircularObstacleMotion {
    /// Initial obstacle position: on the orbit at `phase`.
    pub fn initial_state(&self) -> DVector<f64> {
        DVector::from_vec(vec![
            self.center[0] + self.orbit_radius * self.phase.cos(),
            self.center[1] + self.orbit_radius * self.phase.sin(),
            self.altitude,
        ])
    }

    /// Mean motion map: rotate `o` about the vertical axis through
    /// `center` by `angular_velocity * dt`; z is carried through.
    pub fn mean_motion(&self, o: &DVector<f64>, dt: f64) -> DVector<f64> {
        let theta = self.angular_velocity * dt;
        let (s, c) = theta.sin_cos();
        let dx = o[0] - self.center[0];
        let dy = o[1] - self.center[1];
        DVector::from_vec(vec![
            self.center[0] + c * dx - s * dy,
            self.center[1] + s * dx + c * dy,
            o[2],
        ])
    }
}

/// An obstacle: mean motion, collision radius, barrier shape matrix and
/// driving-noise level.
#[derive(Debug, Clone)]
pub struct ObstacleSpec {
    pub motion: CircularObstacleMotion,
    /// Collision radius `r`; the barrier vanishes at Euclidean distance `r`
    /// when `shape = (1/r^2) I`.
    pub radius: f64,
    /// Symmetric positive definite shape matrix `W`.
    pub shape: DMatrix<f64>,
    /// Driving-noise variance `sigma^2 >= 0` per axis per step.
    pub noise_var: f64,
    /// Sampling time of the mean motion map.
    pub dt: f64,
}

impl ObstacleSpec {
    /// Spherical obstacle of radius `r`: `W = (1/r^2) I`.
    pub fn spherical(motion: CircularObstacleMotion, radius: f64, noise_var: f64, dt: f64) -> Self {
        let shape = DMatrix::identity(3, 3) / (radius * radius);
        Self {
            motion,
            radius,
            shape,
            noise_var,
            dt,
        }
    }

    /// Obstacle state dimension `n_o`.
    pub fn state_dim(&self) -> usize {
        self.shape.nrows()
    }

    /// Initial obstacle state.
    pub fn initial_state(&self) -> DVector<f64> {
        self.motion.initial_state()
    }

    /// Noise-free mean motion `xi(o)`.
    pub fn mean_motion(&self, o: &DVector<f64>) -> DVector<f64> {
        self.motion.mean_motion(o, self.dt)
    }

    /// Check that `shape` is symmetric positive definite.
    pub fn validate(&self) -> Result<()> {
        let w = &self.shape;
        if w.nrows() != w.ncols() {
            return Err(Error::Invariant("shape matrix W must be square".into()));
        }
        if (w - w.transpose()).amax() > 1e-12 * (1.0 + w.amax()) {
            return Err(Error::Invariant("shape matrix W must be symmetric".into()));
        }
        if w.clone().cholesky().is_none() {
            return Err(Error::Invariant(
                "shape matrix W must be positive definite".into(),
            ));
        }
        if self.noise_var < 0.0 {
            return Err(Error::Invariant("noise variance must be >= 0".into()));
        }
        Ok(())
    }
}

/// One step of the obstacle dynamics, `xi(o) + noise`.
///
/// The caller owns the RNG; passing a zero vector yields the noise-free
/// mean motion.
pub fn obstacle_step(
    spec: &ObstacleSpec,
    o: &DVector<f64>,
    noise: &DVector<f64>,
) -> Result<DVector<f64>> {
    if o.len() != spec.state_dim() {
        return Err(Error::Dimension {
            context: "obstacle_step state",
            expected: spec.state_dim(),
            got: o.len(),
        });
    }
    if noise.len() != spec.state_dim() {
        return Err(Error::Dimension {
            context: "obstacle_step noise",
            expected: spec.state_dim(),
            got: noise.len(),
        });
    }
    Ok(spec.mean_motion(o) + noise)
}

/// Noise-free obstacle mean positions over a horizon.
///
/// Element `i` is `xi` applied `i + 1` times to `o`.
pub fn predict_obstacle_means(
    spec: &ObstacleSpec,
    o: &DVector<f64>,
    steps: usize,
) -> Result<Vec<DVector<f64>>> {
    if o.len() != spec.state_dim() {
        return Err(Error::Dimension {
            context: "predict_obstacle_means state",
            expected: spec.state_dim(),
            got: o.len(),
        });
    }
    let mut means = Vec::with_capacity(steps);
    let mut cur = o.clone();
    for _ in 0..steps {
        cur = spec.mean_motion(&cur);
        means.push(cur.clone());
    }
    Ok(means)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn di() -> DoubleIntegrator {
        DoubleIntegrator::new(0.1)
    }

    fn circular() -> CircularObstacleMotion {
        CircularObstacleMotion {
            center: [0.0, 0.0, 0.0],
            orbit_radius: 2.0,
            angular_velocity: 0.8,
            phase: 0.0,
            altitude: 2.0,
        }
    }

    #[test]
    fn step_zero_fixed_point() {
        let x = DVector::zeros(6);
        let u = DVector::zeros(3);
        let next = robot_step(&di(), &x, &u).unwrap();
        assert_eq!(next, DVector::zeros(6));
    }

    #[test]
    fn step_position_update() {
        let x = DVector::from_vec(vec![1.0, 0.0, 0.0, 2.0, 0.0, 0.0]);
        let u = DVector::zeros(3);
        let next = robot_step(&di(), &x, &u).unwrap();
        let expected = DVector::from_vec(vec![1.2, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert_abs_diff_eq!(next, expected, epsilon = 1e-15);
    }

    #[test]
    fn step_input_into_velocity_block() {
        let x = DVector::zeros(6);
        let u = DVector::from_vec(vec![4.0, 0.0, 0.0]);
        let next = robot_step(&di(), &x, &u).unwrap();
        let expected = DVector::from_vec(vec![0.0, 0.0, 0.0, 4.0, 0.0, 0.0]);
        assert_abs_diff_eq!(next, expected, epsilon = 1e-15);
    }

    #[test]
    fn step_rejects_bad_dims() {
        let x = DVector::zeros(5);
        let u = DVector::zeros(3);
        assert!(robot_step(&di(), &x, &u).is_err());
        let x = DVector::zeros(6);
        let u = DVector::zeros(2);
        assert!(robot_step(&di(), &x, &u).is_err());
    }

    #[test]
    fn step_matches_affine_decomposition() {
        let model = di();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let x = DVector::from_fn(6, |_, _| rng.gen_range(-3.0..3.0));
            let u = DVector::from_fn(3, |_, _| rng.gen_range(-4.0..4.0));
            let direct = model.step(&x, &u);
            let affine = model.drift(&x) + model.input_matrix(&x) * &u;
            assert_abs_diff_eq!(direct, affine, epsilon = 1e-14);
        }
    }

    #[test]
    fn linearity_of_double_integrator() {
        let model = di();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let x1 = DVector::from_fn(6, |_, _| rng.gen_range(-3.0..3.0));
            let x2 = DVector::from_fn(6, |_, _| rng.gen_range(-3.0..3.0));
            let u1 = DVector::from_fn(3, |_, _| rng.gen_range(-4.0..4.0));
            let u2 = DVector::from_fn(3, |_, _| rng.gen_range(-4.0..4.0));
            let lhs = model.step(&(&x1 + &x2), &(&u1 + &u2));
            let rhs = model.step(&x1, &u1) + model.step(&x2, &u2)
                - model.step(&DVector::zeros(6), &DVector::zeros(3));
            assert_abs_diff_eq!(lhs, rhs, epsilon = 1e-12);
        }
    }

    #[test]
    fn circular_motion_rotates_and_keeps_radius() {
        let spec = ObstacleSpec::spherical(circular(), 0.8, 0.0, 0.1);
        let o = spec.initial_state();
        let next = obstacle_step(&spec, &o, &DVector::zeros(3)).unwrap();
        // rotated by 0.08 rad about the center
        let expected = DVector::from_vec(vec![
            2.0 * 0.08f64.cos(),
            2.0 * 0.08f64.sin(),
            2.0,
        ]);
        assert_abs_diff_eq!(next, expected, epsilon = 1e-12);

        // constant distance from center over many noise-free steps
        let mut cur = o;
        for _ in 0..100 {
            cur = spec.mean_motion(&cur);
            let d = ((cur[0]).powi(2) + (cur[1]).powi(2)).sqrt();
            assert!((d - 2.0).abs() < 1e-9 * 2.0);
        }
    }

    #[test]
    fn mean_motion_is_deterministic() {
        let spec = ObstacleSpec::spherical(circular(), 0.8, 0.1, 0.1);
        let o = DVector::from_vec(vec![1.3, -0.4, 2.2]);
        let a = obstacle_step(&spec, &o, &DVector::zeros(3)).unwrap();
        let b = obstacle_step(&spec, &o, &DVector::zeros(3)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn noise_sample_mean_matches_model() {
        // Monte Carlo oracle on the noise model: the sample mean of
        // o' - xi(o) over 1e5 draws stays within 3 sigma / sqrt(1e5).
        let var: f64 = 0.1;
        let spec = ObstacleSpec::spherical(circular(), 0.8, var, 0.1);
        let o = spec.initial_state();
        let xi = spec.mean_motion(&o);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let normal = rand_distr::Normal::new(0.0, var.sqrt()).unwrap();
        let n = 100_000usize;
        let mut sum = DVector::zeros(3);
        for _ in 0..n {
            let noise = DVector::from_fn(3, |_, _| rng.sample(normal));
            let next = obstacle_step(&spec, &o, &noise).unwrap();
            sum += next - &xi;
        }
        let tol = 3.0 * var.sqrt() / (n as f64).sqrt();
        for i in 0..3 {
            assert!(
                (sum[i] / n as f64).abs() < tol,
                "component {i} biased: {}",
                sum[i] / n as f64
            );
        }
    }

    #[test]
    fn predict_means_matches_iterated_step() {
        let spec = ObstacleSpec::spherical(circular(), 0.8, 0.0, 0.1);
        let o = spec.initial_state();
        let means = predict_obstacle_means(&spec, &o, 5).unwrap();
        assert_eq!(means.len(), 5);
        let mut cur = o;
        for m in &means {
            cur = obstacle_step(&spec, &cur, &DVector::zeros(3)).unwrap();
            assert_eq!(&cur, m);
        }
    }

    #[test]
    fn rollout_contracts() {
        let model = di();
        let x0 = DVector::from_vec(vec![0.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        let inputs = vec![
            DVector::from_vec(vec![1.0, 0.0, 0.0]),
            DVector::zeros(3),
        ];
        let states = rollout(&model, &x0, &inputs).unwrap();
        assert_eq!(states.len(), 3);
        let expected1 = DVector::from_vec(vec![0.1, 0.0, 0.0, 1.0, 0.0, 0.0]);
        let expected2 = DVector::from_vec(vec![0.2, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert_abs_diff_eq!(states[1], expected1, epsilon = 1e-15);
        assert_abs_diff_eq!(states[2], expected2, epsilon = 1e-15);

        // empty input sequence
        let states = rollout(&model, &x0, &[]).unwrap();
        assert_eq!(states.len(), 1);
        assert_eq!(states[0], x0);
    }

    #[test]
    fn rollout_consistent_with_step_random_lengths() {
        let model = di();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let n = rng.gen_range(1..=60);
            let x0 = DVector::from_fn(6, |_, _| rng.gen_range(-2.0..2.0));
            let inputs: Vec<_> = (0..n)
                .map(|_| DVector::from_fn(3, |_, _| rng.gen_range(-4.0..4.0)))
                .collect();
            let states = rollout(&model, &x0, &inputs).unwrap();
            assert_eq!(states.len(), n + 1);
            for i in 0..n {
                let next = robot_step(&model, &states[i], &inputs[i]).unwrap();
                assert_eq!(next, states[i + 1]);
            }
        }
    }

    #[test]
    fn spec_validation_rejects_bad_shape() {
        let mut spec = ObstacleSpec::spherical(circular(), 0.8, 0.1, 0.1);
        assert!(spec.validate().is_ok());
        spec.shape[(0, 0)] = -1.0;
        assert!(spec.validate().is_err());
    }
}
