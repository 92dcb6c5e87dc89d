//! Initial-state estimation for a trained model by particle swarm search on
//! `rho_x ||x0||^2 + sum_{k=0}^{N0} loss(y_k, yhat_k(x0))`.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::loss::OutputLoss;
use crate::model::{RnnModel, Trace};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct PsoConfig {
    /// Swarm size; `None` means `2 n_x` (at least 2).
    pub population: Option<usize>,
    pub lower: f64,
    pub upper: f64,
    /// Last time index included in the objective.
    pub horizon: usize,
    pub iterations: usize,
    pub inertia: f64,
    pub cognitive: f64,
    pub social: f64,
    pub seed: u64,
}

impl Default for PsoConfig {
    fn default() -> Self {
        PsoConfig {
            population: None,
            lower: -3.0,
            upper: 3.0,
            horizon: 100,
            iterations: 50,
            inertia: 0.7,
            cognitive: 1.5,
            social: 1.5,
            seed: 0,
        }
    }
}

impl PsoConfig {
    pub fn population_for(&self, n_x: usize) -> usize {
        self.population.unwrap_or((2 * n_x).max(2))
    }

    pub fn validate(&self, n_x: usize) -> Result<()> {
        if self.population_for(n_x) < 2 {
            return Err(Error::Config("swarm population must be at least 2".into()));
        }
        if !(self.lower < self.upper) || !self.lower.is_finite() || !self.upper.is_finite() {
            return Err(Error::Config(format!(
                "invalid initial-state bounds [{}, {}]",
                self.lower, self.upper
            )));
        }
        Ok(())
    }
}

/// Result of the initial-state search.
#[derive(Debug, Clone, PartialEq)]
pub struct X0Estimate<T: Scalar> {
    pub x0: DVector<T>,
    pub objective: T,
}

/// Objective of a candidate initial state; `None` if the rollout diverges.
pub fn x0_objective<T: Scalar>(
    model: &RnnModel<T>,
    trace: &Trace<T>,
    loss: &OutputLoss<T>,
    rho_x: T,
    horizon: usize,
    x0: &[T],
) -> Option<T> {
    let n = (horizon + 1).min(trace.len());
    let inputs = trace.inputs.rows(0, n).into_owned();
    let traj = model.simulate(x0, &inputs).ok()?;
    let mut v = x0.iter().fold(T::zero(), |a, &x| a + x * x) * rho_x;
    for k in 0..n {
        let y: Vec<T> = trace.outputs.row(k).iter().copied().collect();
        let yhat: Vec<T> = traj.outputs.row(k).iter().copied().collect();
        v += loss.value(&y, &yhat).ok()?;
    }
    v.finite().then_some(v)
}

/// Global-best particle swarm with reflection at the bounds. The zero
/// vector is always one of the initial particles.
pub fn estimate_x0<T: Scalar>(
    model: &RnnModel<T>,
    trace: &Trace<T>,
    loss: &OutputLoss<T>,
    rho_x: T,
    cfg: &PsoConfig,
) -> Result<X0Estimate<T>> {
    let n_x = model.spec.n_x();
    if n_x == 0 {
        let objective = x0_objective(model, trace, loss, rho_x, cfg.horizon, &[])
            .ok_or_else(|| Error::Estimation("simulation diverges".into()))?;
        return Ok(X0Estimate {
            x0: DVector::zeros(0),
            objective,
        });
    }
    cfg.validate(n_x)?;
    let pop = cfg.population_for(n_x);
    let (lo, hi) = (cfg.lower, cfg.upper);
    let width = hi - lo;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut pos: Vec<Vec<f64>> = (0..pop)
        .map(|i| {
            (0..n_x)
                .map(|_| {
                    let r = lo + width * rng.random::<f64>();
                    if i == 0 { 0.0f64.clamp(lo, hi) } else { r }
                })
                .collect()
        })
        .collect();
    let mut vel: Vec<Vec<f64>> = (0..pop)
        .map(|_| (0..n_x).map(|_| 0.1 * width * (2.0 * rng.random::<f64>() - 1.0)).collect())
        .collect();

    let score = |p: &Vec<f64>| -> f64 {
        let x: Vec<T> = p.iter().map(|&v| T::lit(v)).collect();
        x0_objective(model, trace, loss, rho_x, cfg.horizon, &x).map_or(f64::INFINITY, |v| v.to_f64_lossy())
    };
    let mut cost: Vec<f64> = pos.par_iter().map(score).collect();
    let mut pbest = pos.clone();
    let mut pbest_cost = cost.clone();
    let argmin = |c: &[f64]| {
        c.iter()
            .enumerate()
            .fold((0, f64::INFINITY), |(bi, bv), (i, &v)| if v < bv { (i, v) } else { (bi, bv) })
    };
    let (gi, mut gcost) = argmin(&cost);
    let mut gbest = pos[gi].clone();

    for _ in 0..cfg.iterations {
        for i in 0..pop {
            for d in 0..n_x {
                let (r1, r2) = (rng.random::<f64>(), rng.random::<f64>());
                let v = cfg.inertia * vel[i][d]
                    + cfg.cognitive * r1 * (pbest[i][d] - pos[i][d])
                    + cfg.social * r2 * (gbest[d] - pos[i][d]);
                let mut x = pos[i][d] + v;
                let mut v = v;
                if x > hi {
                    x = hi - (x - hi);
                    v = -v;
                } else if x < lo {
                    x = lo + (lo - x);
                    v = -v;
                }
                pos[i][d] = x.clamp(lo, hi);
                vel[i][d] = v;
            }
        }
        cost = pos.par_iter().map(score).collect();
        for i in 0..pop {
            if cost[i] < pbest_cost[i] {
                pbest_cost[i] = cost[i];
                pbest[i] = pos[i].clone();
            }
            if cost[i] < gcost {
                gcost = cost[i];
                gbest = pos[i].clone();
            }
        }
    }

    if !gcost.is_finite() {
        return Err(Error::Estimation("every candidate initial state diverges".into()));
    }
    let x0 = DVector::from_iterator(n_x, gbest.iter().map(|&v| T::lit(v)));
    let objective = x0_objective(model, trace, loss, rho_x, cfg.horizon, x0.as_slice())
        .ok_or_else(|| Error::Estimation("best candidate diverges".into()))?;
    Ok(X0Estimate { x0, objective })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mlp::Activation;
    use crate::model::RnnSpec;
    use crate::testutil::{random_trace, random_vec, rng};
    use nalgebra::DMatrix;
    use rand::Rng;

    fn model(seed: u64) -> RnnModel<f64> {
        let spec = RnnSpec::layered(2, 1, 1, &[4], &[3], Activation::Tanh, Activation::Linear, false).unwrap();
        let mut r = rng(seed);
        let mut m = RnnModel::zeros(spec);
        let n = m.theta().len();
        m.set_theta(random_vec(&mut r, n, 0.8).as_slice()).unwrap();
        m
    }

    #[test]
    fn state_blind_output_returns_origin() {
        let mut m = model(1);
        let first_y = m.spec.fy().layers()[0];
        for r in 0..first_y.rows {
            for c in 0..first_y.cols {
                m.theta_y[first_y.weight_index(r, c)] = 0.0;
            }
        }
        let mut r = rng(2);
        let trace = random_trace(&mut r, 120, 1, 1, false);
        let est = estimate_x0(&m, &trace, &OutputLoss::mse(1.0), 0.1, &PsoConfig::default()).unwrap();
        assert!(est.x0.norm() < 1e-2);
    }

    #[test]
    fn self_generated_data_is_matched() {
        let m = model(3);
        let mut r = rng(4);
        let u = DMatrix::from_fn(150, 1, |_, _| r.random::<f64>());
        let x_true = [1.2, -0.7];
        let traj = m.simulate(&x_true, &u).unwrap();
        let trace = Trace::new(u, traj.outputs).unwrap();
        let loss = OutputLoss::mse(1.0);
        let cfg = PsoConfig { seed: 5, iterations: 400, population: Some(20), ..Default::default() };
        let est = estimate_x0(&m, &trace, &loss, 0.0, &cfg).unwrap();
        let at_true = x0_objective(&m, &trace, &loss, 0.0, cfg.horizon, &x_true).unwrap();
        assert!(est.objective <= at_true + 1e-6, "{} vs {at_true}", est.objective);
    }

    #[test]
    fn never_worse_than_origin_and_inside_bounds() {
        for seed in 0..5 {
            let m = model(10 + seed);
            let mut r = rng(20 + seed);
            let trace = random_trace(&mut r, 120, 1, 1, false);
            let loss = OutputLoss::mse(1.0);
            let cfg = PsoConfig { seed, lower: -1.0, upper: 2.0, ..Default::default() };
            let est = estimate_x0(&m, &trace, &loss, 0.1, &cfg).unwrap();
            let origin = x0_objective(&m, &trace, &loss, 0.1, cfg.horizon, &[0.0, 0.0]).unwrap();
            assert!(est.objective <= origin);
            assert!(est.x0.iter().all(|v| (-1.0..=2.0).contains(v)));
            let again = estimate_x0(&m, &trace, &loss, 0.1, &cfg).unwrap();
            assert_eq!(est, again);
        }
    }

    #[test]
    fn population_of_one_is_rejected() {
        let m = model(6);
        let mut r = rng(7);
        let trace = random_trace(&mut r, 20, 1, 1, false);
        let cfg = PsoConfig { population: Some(1), ..Default::default() };
        assert!(matches!(
            estimate_x0(&m, &trace, &OutputLoss::mse(1.0), 0.1, &cfg),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn all_divergent_rollouts_fail() {
        let spec = RnnSpec::layered(1, 1, 1, &[], &[], Activation::Tanh, Activation::Linear, false).unwrap();
        // x+ = 1e200 x + 1e200: every rollout overflows.
        let m = RnnModel::new(
            spec,
            DVector::from_vec(vec![1e200, 0.0, 1e200]),
            DVector::from_vec(vec![1.0, 0.0]),
            None,
        )
        .unwrap();
        let mut r = rng(8);
        let trace = random_trace(&mut r, 20, 1, 1, false);
        assert!(matches!(
            estimate_x0(&m, &trace, &OutputLoss::mse(1.0), 0.1, &PsoConfig::default()),
            Err(Error::Estimation(_))
        ));
    }
}
