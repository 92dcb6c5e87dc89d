//! Separable output losses and smooth regularizers with the derivatives the
//! Gauss-Newton model needs.

use std::fmt::Debug;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OutputLoss<T> {
    /// `scale * ||y - yhat||^2`
    QuadraticMse { scale: T },
    /// `-y log(eps + yhat) - (1 - y) log(1 + eps - yhat)` per component.
    ModifiedCrossEntropy { eps: T },
}

/// Loss value with its component-wise first and second derivatives in `yhat`.
#[derive(Debug, Clone, PartialEq)]
pub struct LossEval<T: Scalar> {
    pub value: T,
    pub d1: DVector<T>,
    pub d2: DVector<T>,
}

impl<T: Scalar> OutputLoss<T> {
    pub fn mse(scale: T) -> Self {
        OutputLoss::QuadraticMse { scale }
    }

    pub fn cross_entropy(eps: T) -> Self {
        OutputLoss::ModifiedCrossEntropy { eps }
    }

    fn check(&self, y: &[T], yhat: &[T]) -> Result<()> {
        if y.len() != yhat.len() {
            return Err(Error::shape("loss arguments", y.len(), yhat.len()));
        }
        if let OutputLoss::ModifiedCrossEntropy { .. } = self {
            // The eps inside the logarithms keeps the closed interval finite.
            if let Some(bad) = yhat.iter().find(|&&v| !(v >= T::zero() && v <= T::one())) {
                return Err(Error::Domain(format!(
                    "cross-entropy prediction {bad} outside [0, 1]"
                )));
            }
        }
        Ok(())
    }

    pub fn value(&self, y: &[T], yhat: &[T]) -> Result<T> {
        self.check(y, yhat)?;
        Ok(y
            .iter()
            .zip(yhat)
            .fold(T::zero(), |acc, (&yi, &pi)| acc + self.component(yi, pi).0))
    }

    /// Value, `d1 = dl/dyhat`, `d2 = d^2l/dyhat^2`.
    pub fn eval(&self, y: &[T], yhat: &[T]) -> Result<LossEval<T>> {
        self.check(y, yhat)?;
        let n = y.len();
        let mut value = T::zero();
        let mut d1 = DVector::zeros(n);
        let mut d2 = DVector::zeros(n);
        for i in 0..n {
            let (v, g, h) = self.component(y[i], yhat[i]);
            value += v;
            d1[i] = g;
            d2[i] = h;
        }
        Ok(LossEval { value, d1, d2 })
    }

    #[inline]
    fn component(&self, y: T, p: T) -> (T, T, T) {
        match *self {
            OutputLoss::QuadraticMse { scale } => {
                let r = p - y;
                let two = T::lit(2.0);
                (scale * r * r, two * scale * r, two * scale)
            }
            OutputLoss::ModifiedCrossEntropy { eps } => {
                let one = T::one();
                let a = eps + p;
                let b = one + eps - p;
                let value = -y * a.ln() - (one - y) * b.ln();
                let d1 = -y / a + (one - y) / b;
                let d2 = y / (a * a) + (one - y) / (b * b);
                (value, d1, d2)
            }
        }
    }
}

/// A smooth, twice-differentiable penalty on one parameter block.
pub trait BlockRegularizer<T: Scalar>: Debug + Send + Sync {
    fn value(&self, v: &DVector<T>) -> T;
    fn gradient(&self, v: &DVector<T>) -> DVector<T>;
    /// Upper-triangular `L` with `L' L` equal to the Hessian at `v`.
    fn hessian_factor(&self, v: &DVector<T>) -> DMatrix<T>;
}

/// `rho/2 ||v||^2` as a block regularizer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ridge<T> {
    pub rho: T,
}

impl<T: Scalar> BlockRegularizer<T> for Ridge<T> {
    fn value(&self, v: &DVector<T>) -> T {
        self.rho * v.norm_squared() / T::lit(2.0)
    }

    fn gradient(&self, v: &DVector<T>) -> DVector<T> {
        v * self.rho
    }

    fn hessian_factor(&self, v: &DVector<T>) -> DMatrix<T> {
        DMatrix::identity(v.len(), v.len()) * self.rho.sqrt()
    }
}

/// Smooth regularizer, separable across the initial-state block (`x0` per
/// trace, or the encoder parameters), `theta_x` and `theta_y`.
#[derive(Debug, Clone)]
pub enum SmoothRegularizer<T: Scalar> {
    /// `rho_x/2 ||x0||^2 + rho_theta/2 (||theta_x||^2 + ||theta_y||^2)`
    L2 { rho_x: T, rho_theta: T },
    General {
        initial: Arc<dyn BlockRegularizer<T>>,
        theta_x: Arc<dyn BlockRegularizer<T>>,
        theta_y: Arc<dyn BlockRegularizer<T>>,
    },
}

/// Which block of the decision vector a regularizer term acts on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Block {
    Initial,
    ThetaX,
    ThetaY,
}

/// Coefficient part of a set of least-squares rows `F p + offset`.
#[derive(Debug, Clone, PartialEq)]
pub enum Factor<T: Scalar> {
    /// `c * I`
    ScaledIdentity(T),
    Dense(DMatrix<T>),
}

/// Least-squares rows `factor * p_block + offset` on the columns starting at `start`.
#[derive(Debug, Clone, PartialEq)]
pub struct RegRows<T: Scalar> {
    pub start: usize,
    pub factor: Factor<T>,
    pub offset: DVector<T>,
}

impl<T: Scalar> RegRows<T> {
    pub fn len(&self) -> usize {
        self.offset.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offset.is_empty()
    }

    /// Dense coefficient row `r` within the block.
    pub fn row(&self, r: usize) -> DVector<T> {
        let n = self.len();
        match &self.factor {
            Factor::ScaledIdentity(c) => {
                let mut v = DVector::zeros(n);
                v[r] = *c;
                v
            }
            Factor::Dense(m) => m.row(r).transpose(),
        }
    }
}

impl<T: Scalar> SmoothRegularizer<T> {
    pub fn l2(rho_x: T, rho_theta: T) -> Self {
        SmoothRegularizer::L2 { rho_x, rho_theta }
    }

    pub fn none() -> Self {
        SmoothRegularizer::L2 {
            rho_x: T::zero(),
            rho_theta: T::zero(),
        }
    }

    /// Diagonal weight of the block when it is an L2 penalty.
    pub fn ridge_weight(&self, block: Block) -> Option<T> {
        match self {
            SmoothRegularizer::L2 { rho_x, rho_theta } => Some(match block {
                Block::Initial => *rho_x,
                _ => *rho_theta,
            }),
            SmoothRegularizer::General { .. } => None,
        }
    }

    pub fn value(&self, block: Block, v: &DVector<T>) -> T {
        match self {
            SmoothRegularizer::L2 { .. } => {
                let rho = self.ridge_weight(block).expect("l2");
                rho * v.norm_squared() / T::lit(2.0)
            }
            SmoothRegularizer::General { .. } => self.general(block).value(v),
        }
    }

    pub fn gradient(&self, block: Block, v: &DVector<T>) -> DVector<T> {
        match self {
            SmoothRegularizer::L2 { .. } => v * self.ridge_weight(block).expect("l2"),
            SmoothRegularizer::General { .. } => self.general(block).gradient(v),
        }
    }

    /// Rows whose squared norm equals (up to a constant) the second-order
    /// Taylor model of the block penalty around `v`:
    /// `L p + (L')^{-1} grad`, with `L' L = hessian`.
    ///
    /// An L2 block with zero weight contributes no rows.
    pub fn quadratic_rows(&self, block: Block, start: usize, v: &DVector<T>) -> Result<Option<RegRows<T>>> {
        if v.is_empty() {
            return Ok(None);
        }
        match self {
            SmoothRegularizer::L2 { .. } => {
                let rho = self.ridge_weight(block).expect("l2");
                if rho == T::zero() {
                    return Ok(None);
                }
                let s = rho.sqrt();
                Ok(Some(RegRows {
                    start,
                    factor: Factor::ScaledIdentity(s),
                    offset: v * s,
                }))
            }
            SmoothRegularizer::General { .. } => {
                let reg = self.general(block);
                let l = reg.hessian_factor(v);
                let g = reg.gradient(v);
                // offset = (L')^{-1} g  <=>  L' offset = g
                let offset = l
                    .transpose()
                    .solve_lower_triangular(&g)
                    .ok_or_else(|| Error::Rank("regularizer Hessian factor is singular".into()))?;
                Ok(Some(RegRows {
                    start,
                    factor: Factor::Dense(l),
                    offset,
                }))
            }
        }
    }

    fn general(&self, block: Block) -> &dyn BlockRegularizer<T> {
        match self {
            SmoothRegularizer::General {
                initial,
                theta_x,
                theta_y,
            } => match block {
                Block::Initial => initial.as_ref(),
                Block::ThetaX => theta_x.as_ref(),
                Block::ThetaY => theta_y.as_ref(),
            },
            SmoothRegularizer::L2 { .. } => unreachable!("general() on an L2 regularizer"),
        }
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use approx::assert_relative_eq;

    /// `sum v_i^4 / 4`, a non-quadratic smooth penalty for tests.
    #[derive(Debug)]
    pub(crate) struct Quartic;

    impl BlockRegularizer<f64> for Quartic {
        fn value(&self, v: &DVector<f64>) -> f64 {
            v.iter().map(|x| x.powi(4) / 4.0).sum()
        }
        fn gradient(&self, v: &DVector<f64>) -> DVector<f64> {
            v.map(|x| x.powi(3))
        }
        fn hessian_factor(&self, v: &DVector<f64>) -> DMatrix<f64> {
            DMatrix::from_diagonal(&v.map(|x| (3.0 * x * x).sqrt()))
        }
    }

    fn fd_check(loss: OutputLoss<f64>, y: f64, p: f64) {
        let h = 1e-5;
        let e = loss.eval(&[y], &[p]).unwrap();
        let f = |q: f64| loss.value(&[y], &[q]).unwrap();
        let d1 = (f(p + h) - f(p - h)) / (2.0 * h);
        let g = |q: f64| loss.eval(&[y], &[q]).unwrap().d1[0];
        let d2 = (g(p + h) - g(p - h)) / (2.0 * h);
        assert_relative_eq!(e.d1[0], d1, max_relative = 1e-6);
        assert_relative_eq!(e.d2[0], d2, max_relative = 1e-6);
    }

    #[test]
    fn mse_at_minimum() {
        let n = 8.0;
        let e = OutputLoss::mse(1.0 / n).eval(&[0.3, -2.0], &[0.3, -2.0]).unwrap();
        assert_eq!(e.value, 0.0);
        assert!(e.d1.iter().all(|&v| v == 0.0));
        assert!(e.d2.iter().all(|&v| v == 2.0 / n));
    }

    #[test]
    fn mse_hand_values() {
        let s = 0.37;
        let e = OutputLoss::mse(s).eval(&[1.0], &[3.0]).unwrap();
        assert_relative_eq!(e.value, 4.0 * s, max_relative = 1e-15);
        assert_relative_eq!(e.d1[0], 4.0 * s, max_relative = 1e-15);
        assert_relative_eq!(e.d2[0], 2.0 * s, max_relative = 1e-15);
        fd_check(OutputLoss::mse(s), 1.0, 3.0);
    }

    #[test]
    fn cross_entropy_values_and_derivatives() {
        let loss = OutputLoss::cross_entropy(1e-4);
        let v = loss.value(&[1.0], &[0.5]).unwrap();
        assert_relative_eq!(v, -(0.5001f64).ln(), max_relative = 1e-14);
        assert_relative_eq!(v, 0.692947, epsilon = 1e-6);
        for &(y, p) in &[(1.0, 0.5), (0.0, 0.5), (1.0, 0.05), (0.0, 0.93)] {
            fd_check(loss, y, p);
            assert!(loss.eval(&[y], &[p]).unwrap().d2[0] > 0.0);
        }
    }

    #[test]
    fn cross_entropy_domain() {
        let loss = OutputLoss::cross_entropy(1e-4);
        assert!(matches!(loss.eval(&[1.0], &[1.2]), Err(Error::Domain(_))));
        assert!(matches!(loss.eval(&[1.0], &[-0.1]), Err(Error::Domain(_))));
        assert!(loss.eval(&[1.0], &[1.0]).is_ok());
    }

    #[test]
    fn quadratic_model_is_exact_for_mse() {
        let loss = OutputLoss::mse(0.5);
        for &(y, p) in &[(1.0f64, 3.0f64), (-2.0, 0.7), (0.0, 0.0)] {
            let e = loss.eval(&[y], &[p]).unwrap();
            let step = -e.d1[0] / e.d2[0];
            assert!((p + step - y).abs() < 1e-9);
        }
    }

    #[test]
    fn l2_rows_reduce_to_scaled_identity() {
        let reg = SmoothRegularizer::l2(1.0, 0.0);
        let rows = reg
            .quadratic_rows(Block::Initial, 0, &DVector::from_vec(vec![2.0]))
            .unwrap()
            .unwrap();
        assert_eq!(rows.factor, Factor::ScaledIdentity(1.0));
        assert_eq!(rows.offset[0], 2.0);
        assert!(reg
            .quadratic_rows(Block::ThetaX, 1, &DVector::from_vec(vec![2.0]))
            .unwrap()
            .is_none());
        assert!(SmoothRegularizer::<f64>::none()
            .quadratic_rows(Block::Initial, 0, &DVector::from_vec(vec![1.0]))
            .unwrap()
            .is_none());
    }

    #[test]
    fn quartic_rows_by_hand() {
        let q: Arc<dyn BlockRegularizer<f64>> = Arc::new(Quartic);
        let reg = SmoothRegularizer::General {
            initial: q.clone(),
            theta_x: q.clone(),
            theta_y: q,
        };
        let rows = reg
            .quadratic_rows(Block::ThetaX, 3, &DVector::from_vec(vec![1.0]))
            .unwrap()
            .unwrap();
        match &rows.factor {
            Factor::Dense(l) => assert_relative_eq!(l[(0, 0)], 3f64.sqrt(), max_relative = 1e-15),
            other => panic!("unexpected factor {other:?}"),
        }
        assert_relative_eq!(rows.offset[0], 1.0 / 3f64.sqrt(), max_relative = 1e-15);
    }

    #[test]
    fn hessian_factor_reproduces_hessian() {
        let v = DVector::from_vec(vec![0.3, -1.2, 2.0]);
        let l = Quartic.hessian_factor(&v);
        let h = DMatrix::from_diagonal(&v.map(|x| 3.0 * x * x));
        assert!((l.transpose() * &l - h).amax() < 1e-10);
        let r = Ridge { rho: 0.7 };
        let l = r.hessian_factor(&v);
        assert!((l.transpose() * &l - DMatrix::identity(3, 3) * 0.7).amax() < 1e-10);
    }
}
