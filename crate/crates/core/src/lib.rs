//! Recurrent neural network identification by sequential least squares.
//!
//! State-space models `x(k+1) = f_x(x(k), u(k))`, `y(k) = f_y(x(k), u(k))`
//! with feedforward networks for `f_x` and `f_y` are trained by repeated
//! linearization of the rolled-out dynamics. Each linearization yields a
//! regularized linear least-squares problem that is solved by QR, normal
//! equations or recursive least squares, and the step is globalized by a
//! backtracking line search or a Levenberg-Marquardt schedule. Non-smooth
//! regularizers (L1, group Lasso, L0, quantization) are handled by an ADMM
//! outer loop around the smooth solver.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod admm;
pub mod data;
pub mod error;
pub mod initstate;
pub mod loss;
pub mod mlp;
pub mod model;
pub mod model_io;
pub mod scalar;
pub mod sensitivity;
pub mod solver;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
pub use loss::{Block, BlockRegularizer, OutputLoss, Ridge, SmoothRegularizer};
pub use mlp::{Activation, Network, NetworkSpec};
pub use model::{Dataset, RnnModel, RnnSpec, Trace, Trajectory};
pub use scalar::Scalar;
pub use sensitivity::{Backend, ParamLayout, SensitivityBundle, TrainingProblem};

pub type RnnModel64 = RnnModel<f64>;
pub type RnnSpec64 = RnnSpec<f64>;
pub type Dataset64 = Dataset<f64>;
pub type Trace64 = Trace<f64>;
pub type RnnModel32 = RnnModel<f32>;
pub type RnnSpec32 = RnnSpec<f32>;
