//! Condensed linear prediction: stacks the horizon dynamics into affine
//! maps from the input sequence to each predicted state.

use nalgebra::{DMatrix, DVector};

use crate::models::RobotModel;

/// Affine one-step form `x+ = A x + B u + c` extracted from a
/// [`RobotModel`] by probing along coordinate directions (exact for
/// linear dynamics, linearization about the origin otherwise).
#[derive(Debug, Clone)]
pub struct CondensedDynamics {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DVector<f64>,
    pub n: usize,
    pub m: usize,
}

impl CondensedDynamics {
    pub fn new(model: &dyn RobotModel) -> Self {
        let n = model.state_dim();
        let m = model.input_dim();
        let zero = DVector::zeros(n);
        let c = model.drift(&zero);
        let mut a = DMatrix::zeros(n, n);
        for j in 0..n {
            let mut e = DVector::zeros(n);
            e[j] = 1.0;
            a.set_column(j, &(model.drift(&e) - &c));
        }
        let b = model.input_matrix(&zero);
        Self { a, b, c, n, m }
    }

    /// Affine maps `x_i = G_i U + d_i` for `i = 0..=horizon`, with `U`
    /// the stacked input sequence of length `m * horizon` and
    /// `G_0 = 0`, `d_0 = x0`.
    pub fn state_maps(
        &self,
        x0: &DVector<f64>,
        horizon: usize,
    ) -> (Vec<DMatrix<f64>>, Vec<DVector<f64>>) {
        let nu = self.m * horizon;
        let mut gs = Vec::with_capacity(horizon + 1);
        let mut ds = Vec::with_capacity(horizon + 1);
        gs.push(DMatrix::zeros(self.n, nu));
        ds.push(x0.clone());
        for i in 0..horizon {
            let mut g_next = &self.a * &gs[i];
            g_next
                .view_mut((0, i * self.m), (self.n, self.m))
                .copy_from(&self.b);
            gs.push(g_next);
            ds.push(&self.a * &ds[i] + &self.c);
        }
        (gs, ds)
    }
}

/// Split a stacked input vector into per-step inputs.
pub fn split_inputs(u: &DVector<f64>, m: usize) -> Vec<DVector<f64>> {
    (0..u.len() / m)
        .map(|i| u.rows(i * m, m).into_owned())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{rollout, DoubleIntegrator};
    use approx::assert_abs_diff_eq;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn probing_recovers_system_matrices() {
        let model = DoubleIntegrator::new(0.1);
        let cd = CondensedDynamics::new(&model);
        assert_abs_diff_eq!(cd.a, model.a_matrix(), epsilon = 1e-14);
        assert_abs_diff_eq!(cd.b, model.b_matrix(), epsilon = 1e-14);
        assert!(cd.c.norm() < 1e-14);
    }

    #[test]
    fn state_maps_match_rollout() {
        let model = DoubleIntegrator::new(0.1);
        let cd = CondensedDynamics::new(&model);
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for _ in 0..10 {
            let horizon = rng.gen_range(1..=15);
            let x0 = DVector::from_fn(6, |_, _| rng.gen_range(-3.0..3.0));
            let u = DVector::from_fn(3 * horizon, |_, _| rng.gen_range(-4.0..4.0));
            let (gs, ds) = cd.state_maps(&x0, horizon);
            let inputs = split_inputs(&u, 3);
            let states = rollout(&model, &x0, &inputs).unwrap();
            for i in 0..=horizon {
                let predicted = &gs[i] * &u + &ds[i];
                assert_abs_diff_eq!(predicted, states[i], epsilon = 1e-11);
            }
        }
    }
}
