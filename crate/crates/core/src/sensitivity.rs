//! Linearization of the rolled-out model and the Gauss-Newton least-squares
//! subproblem.
//!
//! The decision vector is `z = [init; theta_x; theta_y]`, where `init` holds
//! one initial state per trace, or the encoder parameters when the model has
//! an encoder. After linearizing the dynamics around a feasible trajectory,
//! each state perturbation is condensed to
//!
//! ```text
//! p_{x_k} = M_k^x p_init + M_k^theta p_theta_x
//! M_0^x = I (or d f_x0 / d theta_x0),  M_0^theta = 0
//! M_{k+1}^x     = J^x_k M_k^x
//! M_{k+1}^theta = J^x_k M_k^theta + J^theta_k
//! ```
//!
//! and every output term `(k, i)` becomes one weighted least-squares row. Rows
//! are stored as `row * p + offset`; the subproblem is
//! `min 1/2 ||A p - b||^2` with `b = -offset`.

use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::loss::{Block, Factor, OutputLoss, RegRows, SmoothRegularizer};
use crate::model::{state_input, Dataset, RnnModel, RnnSpec, Trajectory};
use crate::scalar::Scalar;

/// Position of each parameter block inside the decision vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamLayout {
    n_x: usize,
    n_traces: usize,
    encoder: Option<usize>,
    n_theta_x: usize,
    n_theta_y: usize,
}

impl ParamLayout {
    pub fn new<T: Scalar>(spec: &RnnSpec<T>, n_traces: usize) -> Self {
        ParamLayout {
            n_x: spec.n_x(),
            n_traces,
            encoder: spec.encoder().map(|e| e.n_params()),
            n_theta_x: spec.n_theta_x(),
            n_theta_y: spec.n_theta_y(),
        }
    }

    pub fn n_initial(&self) -> usize {
        self.encoder.unwrap_or(self.n_x * self.n_traces)
    }

    pub fn has_encoder(&self) -> bool {
        self.encoder.is_some()
    }

    pub fn n_traces(&self) -> usize {
        self.n_traces
    }

    /// Columns of the initial-state block used by trace `j`.
    pub fn initial_range(&self, trace: usize) -> Range<usize> {
        match self.encoder {
            Some(n) => 0..n,
            None => trace * self.n_x..(trace + 1) * self.n_x,
        }
    }

    /// Every column of the initial-state block.
    pub fn initial_block(&self) -> Range<usize> {
        0..self.n_initial()
    }

    pub fn theta_x_range(&self) -> Range<usize> {
        let s = self.n_initial();
        s..s + self.n_theta_x
    }

    pub fn theta_y_range(&self) -> Range<usize> {
        let s = self.n_initial() + self.n_theta_x;
        s..s + self.n_theta_y
    }

    /// `[theta_x; theta_y]`, contiguous.
    pub fn theta_range(&self) -> Range<usize> {
        let s = self.n_initial();
        s..s + self.n_theta_x + self.n_theta_y
    }

    pub fn n_params(&self) -> usize {
        self.n_initial() + self.n_theta_x + self.n_theta_y
    }

    /// Blocks subject to the smooth regularizer, in row order.
    fn reg_blocks(&self) -> Vec<(Block, Range<usize>)> {
        let mut blocks = Vec::new();
        if self.encoder.is_some() {
            blocks.push((Block::Initial, self.initial_block()));
        } else {
            for j in 0..self.n_traces {
                blocks.push((Block::Initial, self.initial_range(j)));
            }
        }
        blocks.push((Block::ThetaX, self.theta_x_range()));
        blocks.push((Block::ThetaY, self.theta_y_range()));
        blocks
    }
}

/// Quadratic coupling `rho/2 sum_j (z_j - target_j)^2` over selected
/// coordinates, as introduced by the ADMM splitting.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedTerm<T: Scalar> {
    pub rho: T,
    /// Indices into the decision vector.
    pub indices: Vec<usize>,
    pub target: DVector<T>,
}

impl<T: Scalar> AugmentedTerm<T> {
    pub fn value(&self, z: &DVector<T>) -> T {
        let s = self
            .indices
            .iter()
            .zip(self.target.iter())
            .fold(T::zero(), |acc, (&j, &t)| {
                let d = z[j] - t;
                acc + d * d
            });
        self.rho * s / T::lit(2.0)
    }
}

/// A single-entry row `coeff * p_index + offset`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SparseRow<T> {
    pub index: usize,
    pub coeff: T,
    pub offset: T,
}

/// Result of simulating all traces at a decision vector.
#[derive(Debug, Clone)]
pub struct Evaluation<T: Scalar> {
    /// Sum of output losses over all traces.
    pub loss: T,
    pub regularization: T,
    pub augmented: T,
    pub trajectories: Vec<Trajectory<T>>,
    pub initial_states: Vec<DVector<T>>,
}

impl<T: Scalar> Evaluation<T> {
    /// Smooth objective `V` (including the augmented term, when present).
    pub fn total(&self) -> T {
        self.loss + self.regularization + self.augmented
    }
}

/// The smooth training objective over a dataset.
#[derive(Debug, Clone)]
pub struct TrainingProblem<'a, T: Scalar> {
    pub spec: &'a RnnSpec<T>,
    pub data: &'a Dataset<T>,
    pub loss: OutputLoss<T>,
    pub reg: SmoothRegularizer<T>,
    pub augmented: Option<AugmentedTerm<T>>,
    /// Evaluate per-step Jacobians on the rayon pool.
    pub parallel: bool,
    layout: ParamLayout,
}

impl<'a, T: Scalar> TrainingProblem<'a, T> {
    pub fn new(
        spec: &'a RnnSpec<T>,
        data: &'a Dataset<T>,
        loss: OutputLoss<T>,
        reg: SmoothRegularizer<T>,
    ) -> Result<Self> {
        if data.n_u() != spec.n_u() {
            return Err(Error::Data(format!(
                "data has {} inputs, model expects {}",
                data.n_u(),
                spec.n_u()
            )));
        }
        if data.n_y() != spec.n_y() {
            return Err(Error::Data(format!(
                "data has {} outputs, model expects {}",
                data.n_y(),
                spec.n_y()
            )));
        }
        if let Some(enc) = spec.encoder() {
            for (j, t) in data.traces.iter().enumerate() {
                match &t.v0 {
                    Some(v) if v.len() == enc.input_dim() => {}
                    Some(v) => return Err(Error::shape("encoder input", enc.input_dim(), v.len())),
                    None => return Err(Error::Data(format!("trace {j} has no encoder input v0"))),
                }
            }
        }
        Ok(TrainingProblem {
            spec,
            data,
            loss,
            reg,
            augmented: None,
            parallel: true,
            layout: ParamLayout::new(spec, data.traces.len()),
        })
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn n_params(&self) -> usize {
        self.layout.n_params()
    }

    /// Decision vector from a model and per-trace initial states (ignored
    /// when the model has an encoder).
    pub fn pack(&self, model: &RnnModel<T>, initial_states: &[DVector<T>]) -> Result<DVector<T>> {
        let mut z = DVector::zeros(self.n_params());
        match &model.theta_x0 {
            Some(t) => z.rows_mut(0, t.len()).copy_from(t),
            None => {
                if initial_states.len() != self.layout.n_traces {
                    return Err(Error::shape(
                        "initial states",
                        self.layout.n_traces,
                        initial_states.len(),
                    ));
                }
                for (j, x0) in initial_states.iter().enumerate() {
                    let r = self.layout.initial_range(j);
                    if x0.len() != r.len() {
                        return Err(Error::shape("initial state", r.len(), x0.len()));
                    }
                    z.rows_mut(r.start, r.len()).copy_from(x0);
                }
            }
        }
        let r = self.layout.theta_x_range();
        z.rows_mut(r.start, r.len()).copy_from(&model.theta_x);
        let r = self.layout.theta_y_range();
        z.rows_mut(r.start, r.len()).copy_from(&model.theta_y);
        Ok(z)
    }

    pub fn model(&self, z: &DVector<T>) -> Result<RnnModel<T>> {
        if z.len() != self.n_params() {
            return Err(Error::shape("decision vector", self.n_params(), z.len()));
        }
        let theta_x0 = self
            .layout
            .has_encoder()
            .then(|| z.rows_range(self.layout.initial_block()).into_owned());
        RnnModel::new(
            self.spec.clone(),
            z.rows_range(self.layout.theta_x_range()).into_owned(),
            z.rows_range(self.layout.theta_y_range()).into_owned(),
            theta_x0,
        )
    }

    /// Initial state of every trace at `z`.
    pub fn initial_states(&self, z: &DVector<T>, model: &RnnModel<T>) -> Result<Vec<DVector<T>>> {
        (0..self.layout.n_traces)
            .map(|j| {
                if self.layout.has_encoder() {
                    let v0 = self.data.traces[j].v0.as_ref().expect("checked in new");
                    model.encode_x0(v0.as_slice())
                } else {
                    Ok(z.rows_range(self.layout.initial_range(j)).into_owned())
                }
            })
            .collect()
    }

    pub fn regularization(&self, z: &DVector<T>) -> T {
        self.layout
            .reg_blocks()
            .into_iter()
            .fold(T::zero(), |acc, (block, r)| {
                acc + self.reg.value(block, &z.rows_range(r).into_owned())
            })
    }

    /// Simulates every trace and evaluates the objective.
    pub fn evaluate(&self, z: &DVector<T>) -> Result<Evaluation<T>> {
        let model = self.model(z)?;
        let initial_states = self.initial_states(z, &model)?;
        let mut loss = T::zero();
        let mut trajectories = Vec::with_capacity(self.data.traces.len());
        for (trace, x0) in self.data.traces.iter().zip(&initial_states) {
            let traj = model.simulate(x0.as_slice(), &trace.inputs)?;
            for k in 0..trace.len() {
                let y: Vec<T> = trace.outputs.row(k).iter().copied().collect();
                let yhat: Vec<T> = traj.outputs.row(k).iter().copied().collect();
                loss += self.loss.value(&y, &yhat)?;
            }
            trajectories.push(traj);
        }
        Ok(Evaluation {
            loss,
            regularization: self.regularization(z),
            augmented: self.augmented.as_ref().map_or(T::zero(), |a| a.value(z)),
            trajectories,
            initial_states,
        })
    }

    /// Recomputes only the augmented term (the trajectory does not depend on it).
    pub fn refresh(&self, z: &DVector<T>, eval: &mut Evaluation<T>) {
        eval.augmented = self.augmented.as_ref().map_or(T::zero(), |a| a.value(z));
    }

    /// Per-step Jacobians and condensing matrices around the nominal
    /// trajectory stored in `eval` (which must come from `evaluate(z)`).
    pub fn propagate_sensitivities(&self, z: &DVector<T>, eval: &Evaluation<T>) -> Result<SensitivityBundle<T>> {
        let model = self.model(z)?;
        let n_x = self.spec.n_x();
        let n_tx = self.spec.n_theta_x();
        let mut traces = Vec::with_capacity(self.data.traces.len());

        for (j, (trace, traj)) in self.data.traces.iter().zip(&eval.trajectories).enumerate() {
            let n = trace.len();
            let step = |k: usize| self.step_jacobians(&model, trace, traj, k);
            let local: Vec<StepJacobians<T>> = if self.parallel {
                (0..n)
                    .into_par_iter()
                    .with_min_len(16)
                    .map(step)
                    .collect::<Result<_>>()?
            } else {
                (0..n).map(step).collect::<Result<_>>()?
            };

            let cols = self.layout.initial_range(j);
            let mut mx = match (self.spec.encoder(), &model.theta_x0) {
                (Some(enc), Some(theta)) => {
                    let v0 = trace.v0.as_ref().expect("checked in new");
                    enc.jacobian_params(theta.as_slice(), v0.as_slice())?
                }
                _ => DMatrix::identity(n_x, cols.len()),
            };
            let mut mtheta = DMatrix::zeros(n_x, n_tx);
            let mut steps = Vec::with_capacity(n);
            for (k, jac) in local.into_iter().enumerate() {
                let (next_mx, next_mtheta) = match (&jac.jx, &jac.jtheta) {
                    (Some(jx), Some(jt)) if k + 1 < n => {
                        let nmx = jx * &mx;
                        let nmt = jx * &mtheta + jt;
                        if nmx.iter().chain(nmt.iter()).any(|v| !v.finite()) {
                            return Err(Error::NonFinite {
                                what: "sensitivity",
                                step: k + 1,
                            });
                        }
                        (Some(nmx), Some(nmt))
                    }
                    _ => (None, None),
                };
                steps.push(StepSensitivity {
                    mx: std::mem::replace(&mut mx, next_mx.unwrap_or_else(|| DMatrix::zeros(0, 0))),
                    mtheta: std::mem::replace(
                        &mut mtheta,
                        next_mtheta.unwrap_or_else(|| DMatrix::zeros(0, 0)),
                    ),
                    gy_x: jac.gy_x,
                    gy_theta: jac.gy_theta,
                    d1: jac.d1,
                    d2: jac.d2,
                });
            }
            traces.push(TraceSensitivity {
                initial_cols: cols,
                steps,
            });
        }

        Ok(SensitivityBundle {
            z: z.clone(),
            layout: self.layout,
            traces,
        })
    }

    fn step_jacobians(
        &self,
        model: &RnnModel<T>,
        trace: &crate::model::Trace<T>,
        traj: &Trajectory<T>,
        k: usize,
    ) -> Result<StepJacobians<T>> {
        let n_x = self.spec.n_x();
        let x: Vec<T> = traj.states.row(k).iter().copied().collect();
        let u: Vec<T> = trace.inputs.row(k).iter().copied().collect();
        let xu = state_input(&x, &u);

        let (jx, jtheta) = match self.spec.fx() {
            Some(fx) if k + 1 < trace.len() => {
                let lin = fx.linearize(model.theta_x.as_slice(), &xu)?;
                (Some(lin.d_input.columns(0, n_x).into_owned()), Some(lin.d_params))
            }
            _ => (None, None),
        };

        let fy_in = if self.spec.feedthrough() { xu } else { x };
        let lin = self.spec.fy().linearize(model.theta_y.as_slice(), &fy_in)?;
        let y: Vec<T> = trace.outputs.row(k).iter().copied().collect();
        let le = self.loss.eval(&y, lin.output.as_slice())?;
        let any_bad = lin
            .d_input
            .iter()
            .chain(lin.d_params.iter())
            .chain(jtheta.iter().flat_map(|m| m.iter()))
            .any(|v| !v.finite());
        if any_bad {
            return Err(Error::NonFinite {
                what: "jacobian",
                step: k,
            });
        }
        Ok(StepJacobians {
            jx,
            jtheta,
            gy_x: lin.d_input.columns(0, n_x).into_owned(),
            gy_theta: lin.d_params,
            d1: le.d1,
            d2: le.d2,
        })
    }

    /// Least-squares rows of the smooth regularizer at `z`.
    pub fn reg_rows(&self, z: &DVector<T>) -> Result<Vec<RegRows<T>>> {
        let mut rows = Vec::new();
        for (block, r) in self.layout.reg_blocks() {
            let v = z.rows_range(r.clone()).into_owned();
            if let Some(rr) = self.reg.quadratic_rows(block, r.start, &v)? {
                rows.push(rr);
            }
        }
        Ok(rows)
    }

    /// Rows `sqrt(rho) p_j + sqrt(rho) (z_j - target_j)` of the augmented term.
    pub fn augmented_rows(&self, z: &DVector<T>) -> Vec<SparseRow<T>> {
        match &self.augmented {
            None => Vec::new(),
            Some(a) => {
                let s = a.rho.sqrt();
                a.indices
                    .iter()
                    .zip(a.target.iter())
                    .map(|(&j, &t)| SparseRow {
                        index: j,
                        coeff: s,
                        offset: s * (z[j] - t),
                    })
                    .collect()
            }
        }
    }

    /// Gauss-Newton subproblem at the nominal point of `bundle`.
    pub fn linearized<'b>(&self, bundle: &'b SensitivityBundle<T>) -> Result<LinearizedProblem<'b, T>> {
        Ok(LinearizedProblem {
            bundle,
            reg_rows: self.reg_rows(&bundle.z)?,
            aug_rows: self.augmented_rows(&bundle.z),
        })
    }

    /// Exact gradient of the objective at the nominal point of `bundle`.
    pub fn gradient(&self, bundle: &SensitivityBundle<T>) -> DVector<T> {
        let z = &bundle.z;
        let mut g = bundle.loss_gradient();
        for (block, r) in self.layout.reg_blocks() {
            let rg = self.reg.gradient(block, &z.rows_range(r.clone()).into_owned());
            let mut seg = g.rows_range_mut(r);
            seg += rg;
        }
        if let Some(a) = &self.augmented {
            for (&j, &t) in a.indices.iter().zip(a.target.iter()) {
                g[j] += a.rho * (z[j] - t);
            }
        }
        g
    }
}

struct StepJacobians<T: Scalar> {
    jx: Option<DMatrix<T>>,
    jtheta: Option<DMatrix<T>>,
    gy_x: DMatrix<T>,
    gy_theta: DMatrix<T>,
    d1: DVector<T>,
    d2: DVector<T>,
}

/// Linearization data for one time step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepSensitivity<T: Scalar> {
    /// `d x_k / d init`, `n_x x |initial_cols|`
    pub mx: DMatrix<T>,
    /// `d x_k / d theta_x`, `n_x x n_theta_x`
    pub mtheta: DMatrix<T>,
    /// `d f_y / d x` at step k, `n_y x n_x`
    pub gy_x: DMatrix<T>,
    /// `d f_y / d theta_y` at step k, `n_y x n_theta_y`
    pub gy_theta: DMatrix<T>,
    pub d1: DVector<T>,
    pub d2: DVector<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceSensitivity<T: Scalar> {
    pub initial_cols: Range<usize>,
    pub steps: Vec<StepSensitivity<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityBundle<T: Scalar> {
    /// Nominal decision vector.
    pub z: DVector<T>,
    pub layout: ParamLayout,
    pub traces: Vec<TraceSensitivity<T>>,
}

impl<T: Scalar> SensitivityBundle<T> {
    pub fn n_params(&self) -> usize {
        self.layout.n_params()
    }

    pub fn n_data_rows(&self) -> usize {
        self.traces
            .iter()
            .flat_map(|t| t.steps.iter())
            .map(|s| s.d1.len())
            .sum()
    }

    /// Unweighted derivative of output `i` at step `k` of trace `j` with
    /// respect to the decision vector, written into `out`.
    fn output_derivative(&self, trace: usize, k: usize, i: usize, out: &mut DVector<T>) {
        out.fill(T::zero());
        let ts = &self.traces[trace];
        let s = &ts.steps[k];
        let gx = s.gy_x.row(i);
        if !gx.is_empty() {
            let cx = gx * &s.mx;
            for (c, col) in ts.initial_cols.clone().enumerate() {
                out[col] = cx[c];
            }
            let rx = self.layout.theta_x_range();
            if !rx.is_empty() {
                let ct = gx * &s.mtheta;
                for (c, col) in rx.enumerate() {
                    out[col] = ct[c];
                }
            }
        }
        let ry = self.layout.theta_y_range();
        for (c, col) in ry.enumerate() {
            out[col] = s.gy_theta[(i, c)];
        }
    }

    /// Gradient of the summed output loss alone.
    pub fn loss_gradient(&self) -> DVector<T> {
        let mut g = DVector::zeros(self.n_params());
        let mut row = DVector::zeros(self.n_params());
        for (j, ts) in self.traces.iter().enumerate() {
            for (k, s) in ts.steps.iter().enumerate() {
                for i in 0..s.d1.len() {
                    self.output_derivative(j, k, i, &mut row);
                    g.axpy(s.d1[i], &row, T::one());
                }
            }
        }
        g
    }

    /// Visits every output row as `(coefficients, target)` with
    /// `target = -offset`, trace-major, then time, then output index.
    pub fn for_each_data_row(&self, mut f: impl FnMut(&DVector<T>, T) -> Result<()>) -> Result<()> {
        let mut row = DVector::zeros(self.n_params());
        for (j, ts) in self.traces.iter().enumerate() {
            for (k, s) in ts.steps.iter().enumerate() {
                for i in 0..s.d1.len() {
                    let d2 = s.d2[i];
                    if !(d2 > T::zero()) {
                        return Err(Error::Convexity {
                            step: k,
                            value: d2.to_f64_lossy(),
                        });
                    }
                    let w = d2.sqrt();
                    self.output_derivative(j, k, i, &mut row);
                    row *= w;
                    f(&row, -s.d1[i] / w)?;
                }
            }
        }
        Ok(())
    }
}

/// Which linear-algebra route solves the Gauss-Newton subproblem.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Backend {
    /// Materialize `A`, `b` and solve by QR.
    #[default]
    Stacked,
    /// Accumulate `H = A'A`, `c = -A'b` and solve by Cholesky.
    Normal,
    /// Recursive least squares over the data rows.
    Rls,
}

/// The assembled least-squares subproblem.
#[derive(Debug, Clone, PartialEq)]
pub enum LsSystem<T: Scalar> {
    Stacked { a: DMatrix<T>, b: DVector<T> },
    Normal { h: DMatrix<T>, c: DVector<T> },
    Rls(RlsSolution<T>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RlsSolution<T: Scalar> {
    /// `p_{N-1}`
    pub step: DVector<T>,
    /// `P_{N-1} = (A'A)^{-1}`
    pub covariance: DMatrix<T>,
    /// `-A'b`
    pub c: DVector<T>,
}

/// Regularizer, augmented and data rows of one Gauss-Newton subproblem.
#[derive(Debug, Clone)]
pub struct LinearizedProblem<'b, T: Scalar> {
    pub bundle: &'b SensitivityBundle<T>,
    pub reg_rows: Vec<RegRows<T>>,
    pub aug_rows: Vec<SparseRow<T>>,
}

impl<'b, T: Scalar> LinearizedProblem<'b, T> {
    pub fn n_params(&self) -> usize {
        self.bundle.n_params()
    }

    pub fn n_rows(&self) -> usize {
        self.bundle.n_data_rows()
            + self.reg_rows.iter().map(RegRows::len).sum::<usize>()
            + self.aug_rows.len()
    }

    /// Visits every row (data, then regularizer, then augmented).
    pub fn for_each_row(&self, mut f: impl FnMut(&DVector<T>, T) -> Result<()>) -> Result<()> {
        self.bundle.for_each_data_row(&mut f)?;
        let n = self.n_params();
        for rr in &self.reg_rows {
            for r in 0..rr.len() {
                let mut row = DVector::zeros(n);
                row.rows_mut(rr.start, rr.len()).copy_from(&rr.row(r));
                f(&row, -rr.offset[r])?;
            }
        }
        for sr in &self.aug_rows {
            let mut row = DVector::zeros(n);
            row[sr.index] = sr.coeff;
            f(&row, -sr.offset)?;
        }
        Ok(())
    }

    pub fn assemble_stacked(&self) -> Result<LsSystem<T>> {
        let (m, n) = (self.n_rows(), self.n_params());
        let mut a = DMatrix::zeros(m, n);
        let mut b = DVector::zeros(m);
        let mut r = 0;
        self.for_each_row(|row, target| {
            a.row_mut(r).copy_from(&row.transpose());
            b[r] = target;
            r += 1;
            Ok(())
        })?;
        Ok(LsSystem::Stacked { a, b })
    }

    /// Normal equations accumulated row by row without materializing `A`.
    pub fn assemble_normal(&self) -> Result<LsSystem<T>> {
        let n = self.n_params();
        let mut h = DMatrix::zeros(n, n);
        let mut c = DVector::zeros(n);
        self.for_each_row(|row, target| {
            h.ger(T::one(), row, row, T::one());
            c.axpy(-target, row, T::one());
            Ok(())
        })?;
        Ok(LsSystem::Normal { h, c })
    }

    /// Recursive least squares: the regularizer, augmented and damping rows
    /// (all diagonal) form the prior `P_{-1}`, `p_{-1}`; each data row is then
    /// absorbed with one rank-one update. Regressors are `phi = sqrt(l'') J'`
    /// and targets `eta = -l'/sqrt(l'')`, so that the result matches the
    /// stacked solution.
    pub fn solve_rls(&self, lambda: T) -> Result<LsSystem<T>> {
        let n = self.n_params();
        let mut precision = DVector::from_element(n, lambda);
        let mut weighted = DVector::<T>::zeros(n);
        let mut c = DVector::<T>::zeros(n);
        for rr in &self.reg_rows {
            let s = match rr.factor {
                Factor::ScaledIdentity(s) => s,
                Factor::Dense(_) => {
                    return Err(Error::Config(
                        "recursive least squares needs an L2 regularizer".into(),
                    ))
                }
            };
            for r in 0..rr.len() {
                let j = rr.start + r;
                let target = -rr.offset[r];
                precision[j] += s * s;
                weighted[j] += s * target;
                c[j] -= s * target;
            }
        }
        for sr in &self.aug_rows {
            let target = -sr.offset;
            precision[sr.index] += sr.coeff * sr.coeff;
            weighted[sr.index] += sr.coeff * target;
            c[sr.index] -= sr.coeff * target;
        }
        if let Some(j) = precision.iter().position(|&v| !(v > T::zero())) {
            return Err(Error::Config(format!(
                "recursive least squares needs a positive prior weight on every parameter (parameter {j} has none)"
            )));
        }

        let mut p_mat = DMatrix::from_diagonal(&precision.map(|v| T::one() / v));
        let mut p = weighted.component_div(&precision);
        let mut index = 0;
        let mut pphi = DVector::<T>::zeros(n);
        self.bundle.for_each_data_row(|phi, eta| {
            pphi.gemv(T::one(), &p_mat, phi, T::zero());
            let denom = T::one() + phi.dot(&pphi);
            if !(denom > T::zero()) || !denom.finite() {
                return Err(Error::Conditioning { index });
            }
            p_mat.ger(-T::one() / denom, &pphi, &pphi, T::one());
            let innovation = eta - p.dot(phi);
            // P_k phi = P_{k-1} phi / denom
            p.axpy(innovation / denom, &pphi, T::one());
            c.axpy(-eta, phi, T::one());
            index += 1;
            Ok(())
        })?;

        Ok(LsSystem::Rls(RlsSolution {
            step: p,
            covariance: p_mat,
            c,
        }))
    }

    pub fn assemble(&self, backend: Backend) -> Result<LsSystem<T>> {
        match backend {
            Backend::Stacked => self.assemble_stacked(),
            Backend::Normal => self.assemble_normal(),
            Backend::Rls => self.solve_rls(T::zero()),
        }
    }
}

/// A factorized subproblem that can be re-solved for several damping values.
#[derive(Debug, Clone)]
pub struct PreparedSystem<T: Scalar> {
    kind: Prepared<T>,
    /// `-A'b`; `c'p` is the directional derivative of the objective along `p`.
    pub c: DVector<T>,
}

#[derive(Debug, Clone)]
enum Prepared<T: Scalar> {
    Qr { r: DMatrix<T>, qtb: DVector<T> },
    Normal { h: DMatrix<T> },
    Rls { step: DVector<T> },
}

impl<T: Scalar> LsSystem<T> {
    pub fn prepare(self) -> Result<PreparedSystem<T>> {
        match self {
            LsSystem::Stacked { a, b } => {
                let (m, n) = a.shape();
                if m < n {
                    return Err(Error::Rank(format!("{m} rows for {n} unknowns")));
                }
                let c = -(a.tr_mul(&b));
                let qr = a.qr();
                let mut qtb = b;
                qr.q_tr_mul(&mut qtb);
                let r = qr.r();
                check_triangular(&r)?;
                Ok(PreparedSystem {
                    kind: Prepared::Qr {
                        r,
                        qtb: qtb.rows(0, n).into_owned(),
                    },
                    c,
                })
            }
            LsSystem::Normal { h, c } => Ok(PreparedSystem {
                kind: Prepared::Normal { h },
                c,
            }),
            LsSystem::Rls(sol) => Ok(PreparedSystem {
                kind: Prepared::Rls { step: sol.step },
                c: sol.c,
            }),
        }
    }
}

fn check_triangular<T: Scalar>(r: &DMatrix<T>) -> Result<()> {
    let diag = r.diagonal().map(|v| v.abs());
    let max = diag.max();
    let tol = max * T::default_epsilon() * T::from_usize(r.ncols().max(1)).expect("usize");
    if !(max > T::zero()) || diag.iter().any(|&d| !(d > tol)) {
        return Err(Error::Rank("triangular factor is singular".into()));
    }
    Ok(())
}

impl<T: Scalar> PreparedSystem<T> {
    /// Solves `min 1/2 ||A p - b||^2 + lambda/2 ||p||^2`.
    ///
    /// The RLS route only holds the undamped solution; use
    /// [`LinearizedProblem::solve_rls`] with `lambda` instead.
    pub fn solve(&self, lambda: T) -> Result<DVector<T>> {
        match &self.kind {
            Prepared::Qr { r, qtb } => {
                if lambda == T::zero() {
                    return r
                        .solve_upper_triangular(qtb)
                        .ok_or_else(|| Error::Rank("triangular solve failed".into()));
                }
                // Damping rows sqrt(lambda) I with zero targets, appended to R.
                let n = r.ncols();
                let mut m = DMatrix::zeros(2 * n, n);
                m.rows_mut(0, n).copy_from(r);
                m.rows_mut(n, n).fill_diagonal(lambda.sqrt());
                let mut rhs = DVector::zeros(2 * n);
                rhs.rows_mut(0, n).copy_from(qtb);
                let qr = m.qr();
                qr.q_tr_mul(&mut rhs);
                let r2 = qr.r();
                check_triangular(&r2)?;
                r2.solve_upper_triangular(&rhs.rows(0, n).into_owned())
                    .ok_or_else(|| Error::Rank("triangular solve failed".into()))
            }
            Prepared::Normal { h } => {
                let mut hl = h.clone();
                if lambda != T::zero() {
                    for i in 0..hl.nrows() {
                        hl[(i, i)] += lambda;
                    }
                }
                let chol = hl
                    .cholesky()
                    .ok_or_else(|| Error::Rank("normal matrix is not positive definite".into()))?;
                Ok(chol.solve(&(-&self.c)))
            }
            Prepared::Rls { step } => {
                if lambda != T::zero() {
                    return Err(Error::Config(
                        "damped solve requested from an undamped RLS solution".into(),
                    ));
                }
                Ok(step.clone())
            }
        }
    }

    pub fn directional_derivative(&self, p: &DVector<T>) -> T {
        self.c.dot(p)
    }
}
