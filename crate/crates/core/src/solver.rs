//! Smooth training loops: Gauss-Newton with backtracking line search,
//! Levenberg-Marquardt, and an AMSGrad baseline.

use std::time::Instant;

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::mlp::NetworkSpec;
use crate::model::{RnnModel, RnnSpec};
use crate::scalar::Scalar;
use crate::sensitivity::{Backend, Evaluation, TrainingProblem};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineSearchConfig<T> {
    /// Armijo sufficient-decrease constant.
    pub c1: T,
    /// Step reduction factor.
    pub sigma: T,
    /// Maximum number of trial step sizes per epoch.
    pub n_sigma: usize,
    /// Stop when an epoch improves the objective by at most this much.
    pub eps_v: T,
    pub max_epochs: usize,
}

impl<T: Scalar> Default for LineSearchConfig<T> {
    fn default() -> Self {
        LineSearchConfig {
            c1: T::lit(1e-4),
            sigma: T::lit(0.5),
            n_sigma: 20,
            eps_v: T::lit(1e-6),
            max_epochs: 100,
        }
    }
}

impl<T: Scalar> LineSearchConfig<T> {
    pub fn validate(&self) -> Result<()> {
        let open_unit = |v: T| v > T::zero() && v < T::one();
        if !open_unit(self.c1) {
            return Err(Error::Config(format!("c1 must lie in (0, 1), got {}", self.c1)));
        }
        if !open_unit(self.sigma) {
            return Err(Error::Config(format!("sigma must lie in (0, 1), got {}", self.sigma)));
        }
        if self.n_sigma == 0 {
            return Err(Error::Config("n_sigma must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LmConfig<T> {
    pub lambda0: T,
    /// Growth factor after a rejected step.
    pub c2: T,
    /// Shrink factor after an accepted step.
    pub c3: T,
    /// Maximum number of damped solves per epoch.
    pub n_lambda: usize,
    pub eps_v: T,
    pub max_epochs: usize,
}

impl<T: Scalar> Default for LmConfig<T> {
    fn default() -> Self {
        LmConfig {
            lambda0: T::lit(100.0),
            c2: T::lit(1.5),
            c3: T::lit(5.0),
            n_lambda: 20,
            eps_v: T::lit(1e-6),
            max_epochs: 100,
        }
    }
}

impl<T: Scalar> LmConfig<T> {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda0 > T::zero()) {
            return Err(Error::Config(format!("lambda0 must be positive, got {}", self.lambda0)));
        }
        if !(self.c2 > T::one() && self.c3 > T::one()) {
            return Err(Error::Config("c2 and c3 must exceed 1".into()));
        }
        if self.n_lambda == 0 {
            return Err(Error::Config("n_lambda must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AmsGradConfig<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    pub max_epochs: usize,
    /// Weight of an L1 penalty on `theta_x` and `theta_y`, added to the
    /// gradient as `tau * sign(theta)`.
    pub l1: T,
}

impl<T: Scalar> Default for AmsGradConfig<T> {
    fn default() -> Self {
        AmsGradConfig {
            lr: T::lit(0.01),
            beta1: T::lit(0.9),
            beta2: T::lit(0.999),
            eps: T::lit(1e-8),
            max_epochs: 1000,
            l1: T::zero(),
        }
    }
}

/// Smooth inner solver choice.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InnerSolver<T> {
    LineSearch(LineSearchConfig<T>),
    LevenbergMarquardt(LmConfig<T>),
}

impl<T: Scalar> InnerSolver<T> {
    pub fn max_epochs(&self) -> usize {
        match self {
            InnerSolver::LineSearch(c) => c.max_epochs,
            InnerSolver::LevenbergMarquardt(c) => c.max_epochs,
        }
    }

    pub fn with_max_epochs(mut self, e: usize) -> Self {
        match &mut self {
            InnerSolver::LineSearch(c) => c.max_epochs = e,
            InnerSolver::LevenbergMarquardt(c) => c.max_epochs = e,
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            InnerSolver::LineSearch(c) => c.validate(),
            InnerSolver::LevenbergMarquardt(c) => c.validate(),
        }
    }
}

/// One epoch of a training run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord<T> {
    pub epoch: usize,
    /// Objective after the epoch.
    pub value: T,
    /// Objective before the epoch.
    pub previous: T,
    /// Accepted step size (line search), damping after the epoch (LM) or
    /// learning rate (AMSGrad).
    pub step: T,
    /// `grad V' p` for the computed direction; zero for AMSGrad.
    pub directional: T,
    /// Number of linear solves (LM) or objective trials (line search).
    pub trials: usize,
    pub accepted: bool,
    pub elapsed: f64,
}

/// Current iterate of a training run together with its cached evaluation.
#[derive(Debug, Clone)]
pub struct FitState<T: Scalar> {
    pub z: DVector<T>,
    pub eval: Evaluation<T>,
    pub history: Vec<EpochRecord<T>>,
    /// Persistent Levenberg-Marquardt damping.
    pub lambda: Option<T>,
    started: Instant,
}

impl<T: Scalar> FitState<T> {
    pub fn new(problem: &TrainingProblem<'_, T>, z: DVector<T>) -> Result<Self> {
        let eval = problem.evaluate(&z)?;
        if !eval.total().finite() {
            return Err(Error::NonFinite {
                what: "initial objective",
                step: 0,
            });
        }
        Ok(FitState {
            z,
            eval,
            history: Vec::new(),
            lambda: None,
            started: Instant::now(),
        })
    }

    pub fn value(&self) -> T {
        self.eval.total()
    }

    fn elapsed(&self) -> f64 {
        self.started.elapsed().as_secs_f64()
    }

    fn epoch(&self) -> usize {
        self.history.len() + 1
    }

    /// Re-evaluates the objective after the problem's augmented term changed.
    pub fn refresh(&mut self, problem: &TrainingProblem<'_, T>) {
        problem.refresh(&self.z, &mut self.eval);
    }
}

/// Glorot-scaled Gaussian weights, zero biases.
///
/// Weights are drawn for `f_x`, then `f_y`, then the encoder, layer by layer
/// in row-major order, from `N(0, (sigma0 * sqrt(2 / (fan_in + fan_out)))^2)`.
pub fn init_model<T: Scalar>(spec: &RnnSpec<T>, sigma0: T, seed: u64) -> Result<RnnModel<T>> {
    if !(sigma0 >= T::zero() && sigma0 <= T::one()) {
        return Err(Error::Config(format!("sigma0 must lie in [0, 1], got {sigma0}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |net: &NetworkSpec<T>| -> DVector<T> {
        let mut theta = DVector::zeros(net.n_params());
        for layer in net.layers() {
            let std = sigma0.to_f64_lossy() * (2.0 / (layer.rows + layer.cols) as f64).sqrt();
            let dist = Normal::new(0.0, std).expect("finite std");
            for i in 0..layer.rows {
                for j in 0..layer.cols {
                    theta[layer.weight_index(i, j)] = T::lit(dist.sample(&mut rng));
                }
            }
        }
        theta
    };
    let theta_x = spec.fx().map_or_else(|| DVector::zeros(0), &mut draw);
    let theta_y = draw(spec.fy());
    let theta_x0 = spec.encoder().map(&mut draw);
    RnnModel::new(spec.clone(), theta_x, theta_y, theta_x0)
}

/// Decision vector for a freshly initialized model with zero initial states.
pub fn init_decision<T: Scalar>(problem: &TrainingProblem<'_, T>, sigma0: T, seed: u64) -> Result<DVector<T>> {
    let model = init_model(problem.spec, sigma0, seed)?;
    let zeros: Vec<DVector<T>> = (0..problem.layout().n_traces())
        .map(|_| DVector::zeros(problem.spec.n_x()))
        .collect();
    problem.pack(&model, &zeros)
}

/// Failures of a trial point that count as an infinite objective.
fn trial_failed(e: &Error) -> bool {
    matches!(
        e,
        Error::Divergence { .. } | Error::NonFinite { .. } | Error::Domain(_)
    )
}

fn try_evaluate<T: Scalar>(problem: &TrainingProblem<'_, T>, z: &DVector<T>) -> Result<Option<Evaluation<T>>> {
    match problem.evaluate(z) {
        Ok(e) if e.total().finite() => Ok(Some(e)),
        Ok(_) => Ok(None),
        Err(e) if trial_failed(&e) => Ok(None),
        Err(e) => Err(e),
    }
}

/// One epoch of Gauss-Newton with Armijo backtracking. Returns the
/// accepted step size (zero when no trial satisfied the condition).
pub fn step_line_search<T: Scalar>(
    problem: &TrainingProblem<'_, T>,
    state: &mut FitState<T>,
    cfg: &LineSearchConfig<T>,
    backend: Backend,
) -> Result<T> {
    let bundle = problem.propagate_sensitivities(&state.z, &state.eval)?;
    let lp = problem.linearized(&bundle)?;
    let prepared = lp.assemble(backend)?.prepare()?;
    let p = prepared.solve(T::zero())?;
    let dd = prepared.directional_derivative(&p);
    let v = state.value();

    let mut alpha = T::one();
    let mut accepted = None;
    let mut trials = 0;
    for _ in 0..cfg.n_sigma {
        trials += 1;
        let z = &state.z + &p * alpha;
        if let Some(e) = try_evaluate(problem, &z)? {
            if e.total() <= v + cfg.c1 * alpha * dd {
                accepted = Some((z, e));
                break;
            }
        }
        alpha *= cfg.sigma;
    }
    let step = match accepted {
        Some((z, e)) => {
            state.z = z;
            state.eval = e;
            alpha
        }
        None => T::zero(),
    };
    state.history.push(EpochRecord {
        epoch: state.epoch(),
        value: state.value(),
        previous: v,
        step,
        directional: dd,
        trials,
        accepted: step > T::zero(),
        elapsed: state.elapsed(),
    });
    Ok(step)
}

/// Gauss-Newton with line search until the improvement drops to `eps_v` or
/// the epoch budget is spent.
pub fn run_line_search<T: Scalar>(
    problem: &TrainingProblem<'_, T>,
    state: &mut FitState<T>,
    cfg: &LineSearchConfig<T>,
    backend: Backend,
) -> Result<()> {
    cfg.validate()?;
    for _ in 0..cfg.max_epochs {
        let before = state.value();
        step_line_search(problem, state, cfg, backend)?;
        if before - state.value() <= cfg.eps_v {
            break;
        }
    }
    Ok(())
}

/// One Levenberg-Marquardt epoch. Returns whether a step was accepted.
pub fn step_lm<T: Scalar>(
    problem: &TrainingProblem<'_, T>,
    state: &mut FitState<T>,
    cfg: &LmConfig<T>,
    backend: Backend,
) -> Result<bool> {
    let bundle = problem.propagate_sensitivities(&state.z, &state.eval)?;
    let lp = problem.linearized(&bundle)?;
    let prepared = match backend {
        Backend::Rls => None,
        _ => Some(lp.assemble(backend)?.prepare()?),
    };
    let v = state.value();
    let mut lambda = state.lambda.unwrap_or(cfg.lambda0);
    let mut accepted = None;
    let mut trials = 0;
    let mut dd = T::zero();
    for _ in 0..cfg.n_lambda {
        trials += 1;
        let (p, c) = match &prepared {
            Some(s) => (s.solve(lambda)?, None),
            None => {
                let s = lp.solve_rls(lambda)?.prepare()?;
                (s.solve(T::zero())?, Some(s.c))
            }
        };
        dd = match (&prepared, &c) {
            (Some(s), _) => s.directional_derivative(&p),
            (None, Some(c)) => c.dot(&p),
            _ => unreachable!(),
        };
        let z = &state.z + &p;
        match try_evaluate(problem, &z)? {
            Some(e) if e.total() <= v => {
                lambda /= cfg.c3;
                accepted = Some((z, e));
                break;
            }
            _ => lambda *= cfg.c2,
        }
    }
    state.lambda = Some(lambda);
    let ok = accepted.is_some();
    if let Some((z, e)) = accepted {
        state.z = z;
        state.eval = e;
    }
    state.history.push(EpochRecord {
        epoch: state.epoch(),
        value: state.value(),
        previous: v,
        step: lambda,
        directional: dd,
        trials,
        accepted: ok,
        elapsed: state.elapsed(),
    });
    Ok(ok)
}

/// Levenberg-Marquardt until no damped step improves the objective, the
/// improvement drops to `eps_v`, or the epoch budget is spent.
pub fn run_lm<T: Scalar>(
    problem: &TrainingProblem<'_, T>,
    state: &mut FitState<T>,
    cfg: &LmConfig<T>,
    backend: Backend,
) -> Result<()> {
    cfg.validate()?;
    for _ in 0..cfg.max_epochs {
        let before = state.value();
        if !step_lm(problem, state, cfg, backend)? || before - state.value() <= cfg.eps_v {
            break;
        }
    }
    Ok(())
}

/// Runs the configured smooth solver.
pub fn run_inner<T: Scalar>(
    problem: &TrainingProblem<'_, T>,
    state: &mut FitState<T>,
    solver: &InnerSolver<T>,
    backend: Backend,
) -> Result<()> {
    match solver {
        InnerSolver::LineSearch(c) => run_line_search(problem, state, c, backend),
        InnerSolver::LevenbergMarquardt(c) => run_lm(problem, state, c, backend),
    }
}

/// Full-batch AMSGrad on the exact gradient. The state ends at the iterate
/// with the lowest objective (including the L1 term when present).
pub fn run_amsgrad<T: Scalar>(
    problem: &TrainingProblem<'_, T>,
    state: &mut FitState<T>,
    cfg: &AmsGradConfig<T>,
) -> Result<()> {
    let n = state.z.len();
    let theta = problem.layout().theta_range();
    let l1 = |z: &DVector<T>| z.rows_range(theta.clone()).iter().fold(T::zero(), |a, v| a + v.abs()) * cfg.l1;
    let mut m = DVector::<T>::zeros(n);
    let mut v = DVector::<T>::zeros(n);
    let mut vhat = DVector::<T>::zeros(n);
    let mut best = (state.value() + l1(&state.z), state.z.clone(), state.eval.clone());

    for _ in 0..cfg.max_epochs {
        let before = state.value();
        let bundle = problem.propagate_sensitivities(&state.z, &state.eval)?;
        let mut g = problem.gradient(&bundle);
        if cfg.l1 > T::zero() {
            for j in theta.clone() {
                let s = state.z[j];
                if s != T::zero() {
                    g[j] += cfg.l1 * s.signum();
                }
            }
        }
        for j in 0..n {
            m[j] = cfg.beta1 * m[j] + (T::one() - cfg.beta1) * g[j];
            v[j] = cfg.beta2 * v[j] + (T::one() - cfg.beta2) * g[j] * g[j];
            vhat[j] = vhat[j].max(v[j]);
            state.z[j] -= cfg.lr * m[j] / (vhat[j].sqrt() + cfg.eps);
        }
        state.eval = problem.evaluate(&state.z)?;
        let total = state.value() + l1(&state.z);
        if total < best.0 {
            best = (total, state.z.clone(), state.eval.clone());
        }
        state.history.push(EpochRecord {
            epoch: state.epoch(),
            value: state.value(),
            previous: before,
            step: cfg.lr,
            directional: T::zero(),
            trials: 1,
            accepted: true,
            elapsed: state.elapsed(),
        });
    }
    state.z = best.1;
    state.eval = best.2;
    Ok(())
}

/// Sample standard deviation, used by the initialization test.
#[cfg(test)]
fn sample_std(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}
