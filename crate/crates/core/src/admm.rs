//! Non-smooth regularization by scaled ADMM around the smooth solvers.
//!
//! Only the parameters in the split set `S` are duplicated as `nu`:
//!
//! ```text
//! theta <- inner solver on V(z) + rho/2 ||theta_S - nu_S + w_S||^2
//! nu_S  <- prox_{g/rho}(theta_S + w_S)
//! w_S   <- w_S + theta_S - nu_S
//! ```

use std::time::Instant;

use nalgebra::DVector;

use crate::data::sparsity;
use crate::error::{Error, Result};
use crate::model::RnnSpec;
use crate::scalar::Scalar;
use crate::sensitivity::{AugmentedTerm, Backend, TrainingProblem};
use crate::solver::{run_inner, EpochRecord, FitState, InnerSolver};

/// Soft threshold of a scalar.
#[inline]
pub fn soft_threshold<T: Scalar>(v: T, alpha: T) -> T {
    if v > alpha {
        v - alpha
    } else if v < -alpha {
        v + alpha
    } else {
        T::zero()
    }
}

/// Component-wise prox of `alpha ||.||_1`.
pub fn prox_l1<T: Scalar>(v: &DVector<T>, alpha: T) -> DVector<T> {
    v.map(|x| soft_threshold(x, alpha))
}

/// Prox of `alpha ||.||_2` (block soft threshold).
pub fn prox_group<T: Scalar>(v: &DVector<T>, alpha: T) -> DVector<T> {
    let n = v.norm();
    if n > alpha {
        v * ((n - alpha) / n)
    } else {
        DVector::zeros(v.len())
    }
}

/// Prox of `(tau/rho) ||.||_0`: entries with `v_i^2 < 2 tau / rho` are zeroed.
pub fn prox_l0<T: Scalar>(v: &DVector<T>, tau: T, rho: T) -> DVector<T> {
    let threshold = T::lit(2.0) * tau / rho;
    v.map(|x| if x * x < threshold { T::zero() } else { x })
}

/// Nearest member of the sorted `levels`; midpoints go to the larger level.
///
/// Distances that differ only by rounding of decimal levels (e.g. 0.15
/// between 0.1 and 0.2) count as ties.
pub fn nearest_level<T: Scalar>(v: T, levels: &[T]) -> T {
    let hi = levels.partition_point(|&l| l < v);
    if hi == 0 {
        return levels[0];
    }
    if hi == levels.len() {
        return levels[hi - 1];
    }
    let (lo_l, hi_l) = (levels[hi - 1], levels[hi]);
    let (d_lo, d_hi) = (v - lo_l, hi_l - v);
    let scale = lo_l.abs().max(hi_l.abs()).max(v.abs());
    let tie = (d_lo - d_hi).abs() <= T::lit(8.0) * T::default_epsilon() * scale;
    if tie || d_hi < d_lo {
        hi_l
    } else {
        lo_l
    }
}

/// Snaps the entries listed in `indices` to the nearest level.
pub fn prox_quantize<T: Scalar>(v: &DVector<T>, levels: &[T], indices: &[usize]) -> DVector<T> {
    let mut out = v.clone();
    for &j in indices {
        out[j] = nearest_level(v[j], levels);
    }
    out
}

/// Non-smooth penalty on `theta = [theta_x; theta_y]`. Indices refer to
/// positions in `theta`.
#[derive(Debug, Clone, PartialEq)]
pub enum NonSmoothReg<T> {
    None,
    L1 { tau_x: T, tau_y: T },
    L0 { tau_x: T, tau_y: T },
    GroupLasso { tau_g: T, groups: Vec<Vec<usize>> },
    Quantize { levels: Vec<T>, indices: Vec<usize> },
}

impl<T: Scalar> NonSmoothReg<T> {
    pub fn validate(&self, n_theta: usize) -> Result<()> {
        let nonneg = |name: &str, v: T| {
            if v >= T::zero() {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be nonnegative, got {v}")))
            }
        };
        let in_range = |j: usize| {
            if j < n_theta {
                Ok(())
            } else {
                Err(Error::Config(format!("parameter index {j} out of range (n = {n_theta})")))
            }
        };
        match self {
            NonSmoothReg::None => Ok(()),
            NonSmoothReg::L1 { tau_x, tau_y } | NonSmoothReg::L0 { tau_x, tau_y } => {
                nonneg("tau_x", *tau_x)?;
                nonneg("tau_y", *tau_y)
            }
            NonSmoothReg::GroupLasso { tau_g, groups } => {
                nonneg("tau_g", *tau_g)?;
                let mut seen = vec![false; n_theta];
                for &j in groups.iter().flatten() {
                    in_range(j)?;
                    if std::mem::replace(&mut seen[j], true) {
                        return Err(Error::Config(format!("parameter {j} appears in two groups")));
                    }
                }
                Ok(())
            }
            NonSmoothReg::Quantize { levels, indices } => {
                if levels.is_empty() {
                    return Err(Error::Config("quantization needs at least one level".into()));
                }
                if levels.windows(2).any(|w| !(w[0] < w[1])) {
                    return Err(Error::Config("quantization levels must be strictly increasing".into()));
                }
                indices.iter().try_for_each(|&j| in_range(j))
            }
        }
    }

    /// Sorted indices of the split parameters.
    pub fn split_indices(&self, n_theta: usize) -> Vec<usize> {
        let mut s = match self {
            NonSmoothReg::None => Vec::new(),
            NonSmoothReg::L1 { .. } | NonSmoothReg::L0 { .. } => (0..n_theta).collect(),
            NonSmoothReg::GroupLasso { groups, .. } => groups.iter().flatten().copied().collect(),
            NonSmoothReg::Quantize { indices, .. } => indices.clone(),
        };
        s.sort_unstable();
        s.dedup();
        s
    }

    /// Value of the penalty at `theta`; infinite for off-level quantized entries.
    pub fn value(&self, theta: &DVector<T>, n_theta_x: usize) -> T {
        match self {
            NonSmoothReg::None => T::zero(),
            NonSmoothReg::L1 { tau_x, tau_y } => theta.iter().enumerate().fold(T::zero(), |a, (j, v)| {
                a + if j < n_theta_x { *tau_x } else { *tau_y } * v.abs()
            }),
            NonSmoothReg::L0 { tau_x, tau_y } => theta.iter().enumerate().fold(T::zero(), |a, (j, v)| {
                if *v == T::zero() {
                    a
                } else {
                    a + if j < n_theta_x { *tau_x } else { *tau_y }
                }
            }),
            NonSmoothReg::GroupLasso { tau_g, groups } => groups.iter().fold(T::zero(), |a, g| {
                a + *tau_g * g.iter().fold(T::zero(), |s, &j| s + theta[j] * theta[j]).sqrt()
            }),
            NonSmoothReg::Quantize { levels, indices } => {
                if indices.iter().all(|&j| levels.contains(&theta[j])) {
                    T::zero()
                } else {
                    T::max_value().unwrap_or(T::zero())
                }
            }
        }
    }

    /// `prox_{g/rho}` applied to the split entries of `v`; other entries are
    /// returned unchanged.
    pub fn prox(&self, v: &DVector<T>, rho: T, n_theta_x: usize) -> DVector<T> {
        match self {
            NonSmoothReg::None => v.clone(),
            NonSmoothReg::L1 { tau_x, tau_y } => DVector::from_iterator(
                v.len(),
                v.iter().enumerate().map(|(j, &x)| {
                    soft_threshold(x, if j < n_theta_x { *tau_x } else { *tau_y } / rho)
                }),
            ),
            NonSmoothReg::L0 { tau_x, tau_y } => {
                let mut out = prox_l0(v, *tau_x, rho);
                let y = prox_l0(v, *tau_y, rho);
                out.rows_range_mut(n_theta_x..).copy_from(&y.rows_range(n_theta_x..));
                out
            }
            NonSmoothReg::GroupLasso { tau_g, groups } => {
                let mut out = v.clone();
                for g in groups {
                    let block = DVector::from_iterator(g.len(), g.iter().map(|&j| v[j]));
                    let shrunk = prox_group(&block, *tau_g / rho);
                    for (&j, &x) in g.iter().zip(shrunk.iter()) {
                        out[j] = x;
                    }
                }
                out
            }
            NonSmoothReg::Quantize { levels, indices } => prox_quantize(v, levels, indices),
        }
    }

    /// Number of groups with at least one nonzero entry.
    pub fn active_groups(&self, theta: &DVector<T>) -> Option<usize> {
        match self {
            NonSmoothReg::GroupLasso { groups, .. } => {
                Some(groups.iter().filter(|g| g.iter().any(|&j| theta[j] != T::zero())).count())
            }
            _ => None,
        }
    }
}

/// Groups of `theta` indices, one per state: column `i` of the first layer
/// of `f_x` and of `f_y`, row `i` of the last layer of `f_x` and its bias.
/// Zeroing group `i` removes state `i` from the model.
pub fn build_state_groups<T: Scalar>(spec: &RnnSpec<T>) -> Result<Vec<Vec<usize>>> {
    let fx = spec
        .fx()
        .ok_or_else(|| Error::Config("state groups need a model with states".into()))?;
    let layers_x = fx.layers();
    if layers_x.len() < 2 {
        return Err(Error::Config("state groups need a hidden layer in the state network".into()));
    }
    let first_x = layers_x[0];
    let last_x = layers_x[layers_x.len() - 1];
    let first_y = spec.fy().layers()[0];
    let offset_y = spec.n_theta_x();
    Ok((0..spec.n_x())
        .map(|i| {
            let mut g: Vec<usize> = (0..first_x.rows).map(|r| first_x.weight_index(r, i)).collect();
            g.extend((0..first_y.rows).map(|r| offset_y + first_y.weight_index(r, i)));
            g.extend((0..last_x.cols).map(|c| last_x.weight_index(i, c)));
            g.push(last_x.bias_index(i));
            g
        })
        .collect())
}

#[derive(Debug, Clone)]
pub struct AdmmConfig<T> {
    pub rho: T,
    /// Number of ADMM iterations.
    pub iterations: usize,
    /// Smooth solver run at each iteration (its epoch budget is `E`).
    pub inner: InnerSolver<T>,
    pub backend: Backend,
    pub nonsmooth: NonSmoothReg<T>,
}

/// Split copies and scaled duals over the full `theta`; entries outside the
/// split set keep `nu = theta` and `w = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdmmState<T: Scalar> {
    pub nu: DVector<T>,
    pub w: DVector<T>,
    pub rho: T,
    pub t: usize,
    pub split: Vec<usize>,
    n_theta_x: usize,
}

impl<T: Scalar> AdmmState<T> {
    pub fn new(theta: &DVector<T>, rho: T, split: Vec<usize>, n_theta_x: usize) -> Self {
        AdmmState {
            nu: theta.clone(),
            w: DVector::zeros(theta.len()),
            rho,
            t: 0,
            split,
            n_theta_x,
        }
    }

    pub fn nu_x(&self) -> DVector<T> {
        self.nu.rows(0, self.n_theta_x).into_owned()
    }

    pub fn nu_y(&self) -> DVector<T> {
        self.nu.rows_range(self.n_theta_x..).into_owned()
    }

    pub fn w_x(&self) -> DVector<T> {
        self.w.rows(0, self.n_theta_x).into_owned()
    }

    pub fn w_y(&self) -> DVector<T> {
        self.w.rows_range(self.n_theta_x..).into_owned()
    }

    /// `theta` with the split entries replaced by `nu`.
    pub fn project(&self, theta: &DVector<T>) -> DVector<T> {
        let mut out = theta.clone();
        for &j in &self.split {
            out[j] = self.nu[j];
        }
        out
    }

    /// `||theta_S - nu_S||`.
    pub fn primal_residual(&self, theta: &DVector<T>) -> T {
        self.split
            .iter()
            .fold(T::zero(), |a, &j| {
                let d = theta[j] - self.nu[j];
                a + d * d
            })
            .sqrt()
    }

    fn augmented(&self, theta_start: usize) -> AugmentedTerm<T> {
        AugmentedTerm {
            rho: self.rho,
            indices: self.split.iter().map(|&j| theta_start + j).collect(),
            target: DVector::from_iterator(self.split.len(), self.split.iter().map(|&j| self.nu[j] - self.w[j])),
        }
    }
}

/// One ADMM iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdmmRecord<T> {
    pub iteration: usize,
    /// Smooth objective (with the augmented term) after the inner run.
    pub value: T,
    /// Training loss at the projected parameters; infinite if they diverge.
    pub projected_loss: T,
    pub primal_residual: T,
    /// Percentage of exact zeros in the projected `theta`.
    pub sparsity: f64,
    pub active_groups: Option<usize>,
    pub elapsed: f64,
}

#[derive(Debug, Clone)]
pub struct AdmmResult<T: Scalar> {
    /// Decision vector with the projected parameters after the last iteration.
    pub z: DVector<T>,
    /// Projected decision vector with the lowest score.
    pub best_z: DVector<T>,
    pub best_score: T,
    pub state: AdmmState<T>,
    pub history: Vec<AdmmRecord<T>>,
    pub inner_history: Vec<EpochRecord<T>>,
}

/// ADMM with the inner solver; best iterate chosen by training loss.
pub fn run_nails<T: Scalar>(
    problem: &mut TrainingProblem<'_, T>,
    z0: DVector<T>,
    cfg: &AdmmConfig<T>,
) -> Result<AdmmResult<T>> {
    run_nails_with(problem, z0, cfg, |p, z| Ok(p.evaluate(z)?.loss))
}

/// ADMM with a caller-supplied score (lower is better) for best-iterate
/// selection, e.g. a validation loss.
pub fn run_nails_with<T: Scalar>(
    problem: &mut TrainingProblem<'_, T>,
    z0: DVector<T>,
    cfg: &AdmmConfig<T>,
    mut score: impl FnMut(&TrainingProblem<'_, T>, &DVector<T>) -> Result<T>,
) -> Result<AdmmResult<T>> {
    let started = Instant::now();
    let layout = *problem.layout();
    let theta_range = layout.theta_range();
    let n_theta = theta_range.len();
    let n_theta_x = layout.theta_x_range().len();
    if !(cfg.rho > T::zero()) {
        return Err(Error::Config(format!("ADMM rho must be positive, got {}", cfg.rho)));
    }
    cfg.nonsmooth.validate(n_theta)?;
    cfg.inner.validate()?;

    let split = cfg.nonsmooth.split_indices(n_theta);
    let theta_of = |z: &DVector<T>| z.rows_range(theta_range.clone()).into_owned();
    let mut admm = AdmmState::new(&theta_of(&z0), cfg.rho, split, n_theta_x);
    problem.augmented = None;
    let mut fit = FitState::new(problem, z0)?;
    let mut history = Vec::with_capacity(cfg.iterations);
    let mut best: Option<(T, DVector<T>)> = None;
    let mut last_z = fit.z.clone();

    for t in 0..cfg.iterations {
        problem.augmented = (!admm.split.is_empty()).then(|| admm.augmented(theta_range.start));
        fit.refresh(problem);
        run_inner(problem, &mut fit, &cfg.inner, cfg.backend).map_err(|e| Error::Admm {
            iteration: t,
            source: Box::new(e),
        })?;

        let theta = theta_of(&fit.z);
        let v = &theta + &admm.w;
        let prox = cfg.nonsmooth.prox(&v, cfg.rho, n_theta_x);
        for &j in &admm.split {
            admm.nu[j] = prox[j];
            admm.w[j] += theta[j] - prox[j];
        }
        for j in 0..n_theta {
            if admm.split.binary_search(&j).is_err() {
                admm.nu[j] = theta[j];
            }
        }
        admm.t = t + 1;

        let projected = admm.project(&theta);
        let mut z = fit.z.clone();
        z.rows_range_mut(theta_range.clone()).copy_from(&projected);
        let s = match score(problem, &z) {
            Ok(v) if v.finite() => v,
            Ok(_) => T::max_value().unwrap_or(T::zero()),
            Err(e) if e.is_numeric() => T::max_value().unwrap_or(T::zero()),
            Err(e) => return Err(e),
        };
        if best.as_ref().is_none_or(|(b, _)| s < *b) {
            best = Some((s, z.clone()));
        }
        history.push(AdmmRecord {
            iteration: t + 1,
            value: fit.value(),
            projected_loss: s,
            primal_residual: admm.primal_residual(&theta),
            sparsity: sparsity(projected.as_slice()),
            active_groups: cfg.nonsmooth.active_groups(&projected),
            elapsed: started.elapsed().as_secs_f64(),
        });
        last_z = z;
    }
    problem.augmented = None;

    let (best_score, best_z) = best.unwrap_or_else(|| (fit.eval.loss, last_z.clone()));
    Ok(AdmmResult {
        z: last_z,
        best_z,
        best_score,
        state: admm,
        history,
        inner_history: fit.history,
    })
}
