//! Recurrent state-space models built from two feedforward networks:
//!
//! ```text
//! x_{k+1} = f_x(x_k, u_k; theta_x)
//! y_k     = f_y(x_k, u_k; theta_y)     (f_y(x_k; theta_y) when strictly causal)
//! ```
//!
//! with an optional encoder `x_0 = f_x0(v_0; theta_x0)`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::mlp::{Activation, NetworkSpec};
use crate::scalar::Scalar;

/// Structure of a recurrent model. `fx` is absent exactly when `n_x == 0`
/// (static feedforward map from `u_k` to `y_k`).
#[derive(Debug, Clone, PartialEq)]
pub struct RnnSpec<T> {
    n_x: usize,
    n_u: usize,
    n_y: usize,
    feedthrough: bool,
    fx: Option<NetworkSpec<T>>,
    fy: NetworkSpec<T>,
    encoder: Option<NetworkSpec<T>>,
}

impl<T: Scalar> RnnSpec<T> {
    pub fn new(
        n_x: usize,
        n_u: usize,
        fx: Option<NetworkSpec<T>>,
        fy: NetworkSpec<T>,
        feedthrough: bool,
        encoder: Option<NetworkSpec<T>>,
    ) -> Result<Self> {
        match (&fx, n_x) {
            (None, 0) => {}
            (Some(f), n) if n > 0 => {
                if f.input_dim() != n + n_u {
                    return Err(Error::Config(format!(
                        "state network input must be n_x + n_u = {}, got {}",
                        n + n_u,
                        f.input_dim()
                    )));
                }
                if f.output_dim() != n {
                    return Err(Error::Config(format!(
                        "state network output must be n_x = {n}, got {}",
                        f.output_dim()
                    )));
                }
                if f.output_activation() != Activation::Linear {
                    return Err(Error::Config("state network output must be linear".into()));
                }
            }
            _ => {
                return Err(Error::Config(
                    "a state network is required iff n_x > 0".into(),
                ))
            }
        }
        if n_x == 0 && !feedthrough {
            return Err(Error::Config(
                "a static model (n_x = 0) needs input feedthrough".into(),
            ));
        }
        let fy_in = if feedthrough { n_x + n_u } else { n_x };
        if fy.input_dim() != fy_in {
            return Err(Error::Config(format!(
                "output network input must be {fy_in}, got {}",
                fy.input_dim()
            )));
        }
        if let Some(enc) = &encoder {
            if n_x == 0 {
                return Err(Error::Config("an encoder needs n_x > 0".into()));
            }
            if enc.output_dim() != n_x {
                return Err(Error::Config(format!(
                    "encoder output must be n_x = {n_x}, got {}",
                    enc.output_dim()
                )));
            }
        }
        let n_y = fy.output_dim();
        Ok(RnnSpec {
            n_x,
            n_u,
            n_y,
            feedthrough,
            fx,
            fy,
            encoder,
        })
    }

    /// Builds the usual layered structure from hidden widths.
    ///
    /// `hidden_x`/`hidden_y` list hidden-layer widths of `f_x`/`f_y`. The
    /// output layer of `f_x` is always linear.
    #[allow(clippy::too_many_arguments)]
    pub fn layered(
        n_x: usize,
        n_u: usize,
        n_y: usize,
        hidden_x: &[usize],
        hidden_y: &[usize],
        activation: Activation<T>,
        output: Activation<T>,
        feedthrough: bool,
    ) -> Result<Self> {
        let fx = if n_x > 0 {
            let mut dims = hidden_x.to_vec();
            dims.push(n_x);
            Some(NetworkSpec::new(n_x + n_u, dims, activation, Activation::Linear)?)
        } else {
            None
        };
        let mut dims = hidden_y.to_vec();
        dims.push(n_y);
        let fy_in = if feedthrough { n_x + n_u } else { n_x };
        let fy = NetworkSpec::new(fy_in, dims, activation, output)?;
        RnnSpec::new(n_x, n_u, fx, fy, feedthrough, None)
    }

    /// Adds an initial-state encoder `R^{n_v} -> R^{n_x}` with a linear output.
    pub fn with_encoder(self, n_v: usize, hidden: &[usize], activation: Activation<T>) -> Result<Self> {
        let mut dims = hidden.to_vec();
        dims.push(self.n_x);
        let enc = NetworkSpec::new(n_v, dims, activation, Activation::Linear)?;
        RnnSpec::new(self.n_x, self.n_u, self.fx, self.fy, self.feedthrough, Some(enc))
    }

    pub fn n_x(&self) -> usize {
        self.n_x
    }
    pub fn n_u(&self) -> usize {
        self.n_u
    }
    pub fn n_y(&self) -> usize {
        self.n_y
    }
    pub fn feedthrough(&self) -> bool {
        self.feedthrough
    }
    pub fn fx(&self) -> Option<&NetworkSpec<T>> {
        self.fx.as_ref()
    }
    pub fn fy(&self) -> &NetworkSpec<T> {
        &self.fy
    }
    pub fn encoder(&self) -> Option<&NetworkSpec<T>> {
        self.encoder.as_ref()
    }
    pub fn n_theta_x(&self) -> usize {
        self.fx.as_ref().map_or(0, |f| f.n_params())
    }
    pub fn n_theta_y(&self) -> usize {
        self.fy.n_params()
    }
    pub fn n_theta_x0(&self) -> usize {
        self.encoder.as_ref().map_or(0, |f| f.n_params())
    }
}

/// A model structure with concrete parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct RnnModel<T: Scalar> {
    pub spec: RnnSpec<T>,
    pub theta_x: DVector<T>,
    pub theta_y: DVector<T>,
    pub theta_x0: Option<DVector<T>>,
}

impl<T: Scalar> RnnModel<T> {
    pub fn new(
        spec: RnnSpec<T>,
        theta_x: DVector<T>,
        theta_y: DVector<T>,
        theta_x0: Option<DVector<T>>,
    ) -> Result<Self> {
        if theta_x.len() != spec.n_theta_x() {
            return Err(Error::shape("theta_x", spec.n_theta_x(), theta_x.len()));
        }
        if theta_y.len() != spec.n_theta_y() {
            return Err(Error::shape("theta_y", spec.n_theta_y(), theta_y.len()));
        }
        match (&spec.encoder, &theta_x0) {
            (None, None) => {}
            (Some(e), Some(t)) if e.n_params() == t.len() => {}
            (Some(e), Some(t)) => return Err(Error::shape("theta_x0", e.n_params(), t.len())),
            _ => return Err(Error::Config("encoder parameters do not match the structure".into())),
        }
        Ok(RnnModel {
            spec,
            theta_x,
            theta_y,
            theta_x0,
        })
    }

    pub fn zeros(spec: RnnSpec<T>) -> Self {
        let theta_x = DVector::zeros(spec.n_theta_x());
        let theta_y = DVector::zeros(spec.n_theta_y());
        let theta_x0 = spec.encoder().map(|e| DVector::zeros(e.n_params()));
        RnnModel {
            spec,
            theta_x,
            theta_y,
            theta_x0,
        }
    }

    /// `[theta_x; theta_y]`
    pub fn theta(&self) -> DVector<T> {
        let mut v = DVector::zeros(self.theta_x.len() + self.theta_y.len());
        v.rows_mut(0, self.theta_x.len()).copy_from(&self.theta_x);
        v.rows_mut(self.theta_x.len(), self.theta_y.len()).copy_from(&self.theta_y);
        v
    }

    pub fn set_theta(&mut self, theta: &[T]) -> Result<()> {
        let nx = self.theta_x.len();
        if theta.len() != nx + self.theta_y.len() {
            return Err(Error::shape("theta", nx + self.theta_y.len(), theta.len()));
        }
        self.theta_x.copy_from_slice(&theta[..nx]);
        self.theta_y.copy_from_slice(&theta[nx..]);
        Ok(())
    }

    /// One state update `f_x(x, u)`.
    pub fn state_update(&self, x: &[T], u: &[T]) -> Result<DVector<T>> {
        let fx = self
            .spec
            .fx()
            .ok_or_else(|| Error::Config("static model has no state update".into()))?;
        let input = state_input(x, u);
        fx.forward(self.theta_x.as_slice(), &input)
    }

    /// One output evaluation `f_y(x, u)` (u ignored when strictly causal).
    pub fn output(&self, x: &[T], u: &[T]) -> Result<DVector<T>> {
        let input = if self.spec.feedthrough() {
            state_input(x, u)
        } else {
            x.to_vec()
        };
        self.spec.fy().forward(self.theta_y.as_slice(), &input)
    }

    /// Rolls the model forward over `inputs` (one row per step) from `x0`.
    pub fn simulate(&self, x0: &[T], inputs: &DMatrix<T>) -> Result<Trajectory<T>> {
        let (n_x, n_u, n_y) = (self.spec.n_x(), self.spec.n_u(), self.spec.n_y());
        if x0.len() != n_x {
            return Err(Error::shape("initial state", n_x, x0.len()));
        }
        if inputs.ncols() != n_u {
            return Err(Error::shape("input columns", n_u, inputs.ncols()));
        }
        let n = inputs.nrows();
        let mut states = DMatrix::zeros(n, n_x);
        let mut outputs = DMatrix::zeros(n, n_y);
        let mut x: Vec<T> = x0.to_vec();
        let mut u = vec![T::zero(); n_u];
        for k in 0..n {
            if x.iter().any(|v| !v.finite()) {
                return Err(Error::Divergence { step: k });
            }
            for (j, uj) in u.iter_mut().enumerate() {
                *uj = inputs[(k, j)];
            }
            for (j, &xj) in x.iter().enumerate() {
                states[(k, j)] = xj;
            }
            let y = self.output(&x, &u)?;
            if y.iter().any(|v| !v.finite()) {
                return Err(Error::Divergence { step: k });
            }
            outputs.row_mut(k).copy_from(&y.transpose());
            if n_x > 0 && k + 1 < n {
                x = self.state_update(&x, &u)?.as_slice().to_vec();
            }
        }
        Ok(Trajectory { states, outputs })
    }

    pub fn encode_x0(&self, v0: &[T]) -> Result<DVector<T>> {
        match (self.spec.encoder(), &self.theta_x0) {
            (Some(enc), Some(theta)) => enc.forward(theta.as_slice(), v0),
            _ => Err(Error::Config("model has no initial-state encoder".into())),
        }
    }
}

/// Concatenation `[x; u]` used as the network input.
pub(crate) fn state_input<T: Scalar>(x: &[T], u: &[T]) -> Vec<T> {
    let mut v = Vec::with_capacity(x.len() + u.len());
    v.extend_from_slice(x);
    v.extend_from_slice(u);
    v
}

/// Simulated trajectory; row `k` of `states` is `x_k`, row `k` of `outputs` is `y_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory<T: Scalar> {
    pub states: DMatrix<T>,
    pub outputs: DMatrix<T>,
}

impl<T: Scalar> Trajectory<T> {
    pub fn len(&self) -> usize {
        self.outputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn state(&self, k: usize) -> Vec<T> {
        self.states.row(k).iter().copied().collect()
    }
}

/// One input/output experiment. Row `k` of `inputs`/`outputs` holds `u_k`/`y_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace<T: Scalar> {
    pub inputs: DMatrix<T>,
    pub outputs: DMatrix<T>,
    pub v0: Option<DVector<T>>,
}

impl<T: Scalar> Trace<T> {
    pub fn new(inputs: DMatrix<T>, outputs: DMatrix<T>) -> Result<Self> {
        if inputs.nrows() != outputs.nrows() {
            return Err(Error::Data(format!(
                "trace has {} input rows but {} output rows",
                inputs.nrows(),
                outputs.nrows()
            )));
        }
        Ok(Trace {
            inputs,
            outputs,
            v0: None,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_u(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn n_y(&self) -> usize {
        self.outputs.ncols()
    }

    /// Rows `start..end` as a new trace (without `v0`).
    pub fn window(&self, start: usize, end: usize) -> Result<Self> {
        if start > end || end > self.len() {
            return Err(Error::Data(format!(
                "window {start}..{end} out of range for a trace of length {}",
                self.len()
            )));
        }
        Trace::new(
            self.inputs.rows(start, end - start).into_owned(),
            self.outputs.rows(start, end - start).into_owned(),
        )
    }

    /// Splits off `n_a` past outputs and `n_b` past inputs as the encoder
    /// input `v0`, ordered most-recent-first with outputs before inputs. The
    /// returned trace starts at sample `max(n_a, n_b)` of the original one.
    pub fn build_v0(&self, n_a: usize, n_b: usize) -> Result<Self> {
        let warmup = n_a.max(n_b);
        if self.len() <= warmup {
            return Err(Error::Data(format!(
                "encoder needs {warmup} warm-up samples plus data, trace has {}",
                self.len()
            )));
        }
        let (n_y, n_u) = (self.n_y(), self.n_u());
        let mut v0 = Vec::with_capacity(n_a * n_y + n_b * n_u);
        for lag in 1..=n_a {
            v0.extend(self.outputs.row(warmup - lag).iter().copied());
        }
        for lag in 1..=n_b {
            v0.extend(self.inputs.row(warmup - lag).iter().copied());
        }
        let mut shifted = self.window(warmup, self.len())?;
        shifted.v0 = Some(DVector::from_vec(v0));
        Ok(shifted)
    }
}

/// A collection of traces with consistent signal dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T: Scalar> {
    pub traces: Vec<Trace<T>>,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(traces: Vec<Trace<T>>) -> Result<Self> {
        let first = traces
            .first()
            .ok_or_else(|| Error::Data("dataset has no traces".into()))?;
        let (n_u, n_y) = (first.n_u(), first.n_y());
        for (j, t) in traces.iter().enumerate() {
            if t.n_u() != n_u || t.n_y() != n_y {
                return Err(Error::Data(format!(
                    "trace {j} has {}/{} input/output columns, expected {n_u}/{n_y}",
                    t.n_u(),
                    t.n_y()
                )));
            }
            if t.is_empty() {
                return Err(Error::Data(format!("trace {j} is empty")));
            }
        }
        Ok(Dataset { traces })
    }

    pub fn single(trace: Trace<T>) -> Result<Self> {
        Dataset::new(vec![trace])
    }

    pub fn n_u(&self) -> usize {
        self.traces[0].n_u()
    }

    pub fn n_y(&self) -> usize {
        self.traces[0].n_y()
    }

    pub fn total_samples(&self) -> usize {
        self.traces.iter().map(Trace::len).sum()
    }

    pub fn build_v0(&self, n_a: usize, n_b: usize) -> Result<Self> {
        Dataset::new(
            self.traces
                .iter()
                .map(|t| t.build_v0(n_a, n_b))
                .collect::<Result<_>>()?,
        )
    }
}
