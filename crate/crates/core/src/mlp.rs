//! Feedforward networks with analytic derivatives.
//!
//! A network with `L` layers maps an input `a_0` through
//!
//! ```text
//! v_l = W_l a_{l-1} + b_l,   a_l = f_l(v_l),   l = 1..L
//! ```
//!
//! where `f_l` is the hidden activation for `l < L` and the output activation
//! for `l = L`. Parameters are stored flat: for each layer in forward order,
//! the weights `W_l` in row-major order followed by the biases `b_l`.
//!
//! Jacobians follow the standard convention: `jacobian_input` returns
//! `d output / d input` with shape `output_dim x input_dim` (the transpose of
//! the `nabla` notation sometimes used for gradients).

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation<T> {
    Linear,
    Tanh,
    /// Logistic function `1 / (1 + exp(-v))`.
    Sigmoid,
    /// `max(v, 0) + slope * min(v, 0)`, slope in (0, 1).
    LeakyRelu(T),
}

impl<T: Scalar> Activation<T> {
    #[inline]
    pub fn value(self, v: T) -> T {
        match self {
            Activation::Linear => v,
            Activation::Tanh => v.tanh(),
            Activation::Sigmoid => sigmoid(v),
            Activation::LeakyRelu(slope) => {
                if v >= T::zero() {
                    v
                } else {
                    slope * v
                }
            }
        }
    }

    #[inline]
    pub fn derivative(self, v: T) -> T {
        match self {
            Activation::Linear => T::one(),
            Activation::Tanh => {
                let t = v.tanh();
                T::one() - t * t
            }
            Activation::Sigmoid => {
                let s = sigmoid(v);
                s * (T::one() - s)
            }
            Activation::LeakyRelu(slope) => {
                if v >= T::zero() {
                    T::one()
                } else {
                    slope
                }
            }
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Activation::Linear => "linear",
            Activation::Tanh => "tanh",
            Activation::Sigmoid => "sigmoid",
            Activation::LeakyRelu(_) => "leaky_relu",
        }
    }

    fn validate(&self) -> Result<()> {
        if let Activation::LeakyRelu(slope) = *self {
            if !(slope > T::zero() && slope < T::one()) {
                return Err(Error::Config(format!(
                    "leaky-ReLU slope must lie in (0, 1), got {slope}"
                )));
            }
        }
        Ok(())
    }
}

#[inline]
fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// Shape of one dense layer inside the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerShape {
    pub rows: usize,
    pub cols: usize,
    /// Offset of `W[0, 0]`.
    pub weight_offset: usize,
    /// Offset of `b[0]`.
    pub bias_offset: usize,
}

impl LayerShape {
    #[inline]
    pub fn weight_index(&self, row: usize, col: usize) -> usize {
        self.weight_offset + row * self.cols + col
    }

    #[inline]
    pub fn bias_index(&self, row: usize) -> usize {
        self.bias_offset + row
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec<T> {
    input_dim: usize,
    layer_dims: Vec<usize>,
    hidden: Activation<T>,
    output: Activation<T>,
    layers: Vec<LayerShape>,
    n_params: usize,
}

impl<T: Scalar> NetworkSpec<T> {
    /// `layer_dims` lists the hidden widths followed by the output width.
    pub fn new(
        input_dim: usize,
        layer_dims: Vec<usize>,
        hidden: Activation<T>,
        output: Activation<T>,
    ) -> Result<Self> {
        if layer_dims.is_empty() {
            return Err(Error::Config("network needs at least one layer".into()));
        }
        if input_dim == 0 || layer_dims.contains(&0) {
            return Err(Error::Config(format!(
                "network dimensions must be >= 1 (input {input_dim}, layers {layer_dims:?})"
            )));
        }
        hidden.validate()?;
        output.validate()?;

        let mut layers = Vec::with_capacity(layer_dims.len());
        let mut offset = 0;
        let mut prev = input_dim;
        for &rows in &layer_dims {
            let weight_offset = offset;
            let bias_offset = weight_offset + rows * prev;
            layers.push(LayerShape {
                rows,
                cols: prev,
                weight_offset,
                bias_offset,
            });
            offset = bias_offset + rows;
            prev = rows;
        }

        Ok(NetworkSpec {
            input_dim,
            layer_dims,
            hidden,
            output,
            layers,
            n_params: offset,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().expect("nonempty")
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn hidden_activation(&self) -> Activation<T> {
        self.hidden
    }

    pub fn output_activation(&self) -> Activation<T> {
        self.output
    }

    pub fn layers(&self) -> &[LayerShape] {
        &self.layers
    }

    pub fn n_params(&self) -> usize {
        self.n_params
    }

    #[inline]
    fn activation(&self, layer: usize) -> Activation<T> {
        if layer + 1 == self.layers.len() {
            self.output
        } else {
            self.hidden
        }
    }

    fn check(&self, theta: &[T], input: &[T]) -> Result<()> {
        if theta.len() != self.n_params {
            return Err(Error::shape("network parameters", self.n_params, theta.len()));
        }
        if input.len() != self.input_dim {
            return Err(Error::shape("network input", self.input_dim, input.len()));
        }
        Ok(())
    }

    /// Evaluates the network for a flat parameter slice.
    pub fn forward(&self, theta: &[T], input: &[T]) -> Result<DVector<T>> {
        self.check(theta, input)?;
        let mut a: Vec<T> = input.to_vec();
        for (l, shape) in self.layers.iter().enumerate() {
            let act = self.activation(l);
            let next: Vec<T> = (0..shape.rows)
                .map(|i| act.value(affine_row(theta, shape, i, &a)))
                .collect();
            a = next;
        }
        Ok(DVector::from_vec(a))
    }

    /// Output value together with both Jacobians.
    ///
    /// Parameter columns are assembled directly from the backward sensitivity
    /// of each layer, so the column order matches the flat layout.
    pub fn linearize(&self, theta: &[T], input: &[T]) -> Result<Linearization<T>> {
        self.check(theta, input)?;
        let n_layers = self.layers.len();

        // Pre-activations and activations of every layer (activations[0] is the input).
        let mut pre: Vec<Vec<T>> = Vec::with_capacity(n_layers);
        let mut activations: Vec<Vec<T>> = Vec::with_capacity(n_layers + 1);
        activations.push(input.to_vec());
        for (l, shape) in self.layers.iter().enumerate() {
            let act = self.activation(l);
            let a_prev = &activations[l];
            let v: Vec<T> = (0..shape.rows)
                .map(|i| affine_row(theta, shape, i, a_prev))
                .collect();
            let a: Vec<T> = v.iter().map(|&vi| act.value(vi)).collect();
            pre.push(v);
            activations.push(a);
        }

        let out_dim = self.output_dim();
        let mut d_params = DMatrix::<T>::zeros(out_dim, self.n_params);

        // g = d output / d v_l, shape out_dim x rows_l
        let last = &self.layers[n_layers - 1];
        let mut g = DMatrix::<T>::zeros(out_dim, last.rows);
        for i in 0..last.rows {
            g[(i, i)] = self.output.derivative(pre[n_layers - 1][i]);
        }

        let mut d_input = DMatrix::<T>::zeros(out_dim, self.input_dim);
        for l in (0..n_layers).rev() {
            let shape = &self.layers[l];
            let a_prev = &activations[l];
            for i in 0..shape.rows {
                let gi = g.column(i);
                for (j, &aj) in a_prev.iter().enumerate() {
                    let mut col = d_params.column_mut(shape.weight_index(i, j));
                    col.axpy(aj, &gi, T::zero());
                }
                d_params.column_mut(shape.bias_index(i)).copy_from(&gi);
            }

            // Propagate through W_l: g W_l, then through the previous activation.
            let mut gw = DMatrix::<T>::zeros(out_dim, shape.cols);
            for i in 0..shape.rows {
                for j in 0..shape.cols {
                    let w = theta[shape.weight_index(i, j)];
                    if w != T::zero() {
                        for r in 0..out_dim {
                            gw[(r, j)] += g[(r, i)] * w;
                        }
                    }
                }
            }
            if l == 0 {
                d_input = gw;
            } else {
                for j in 0..shape.cols {
                    let dj = self.hidden.derivative(pre[l - 1][j]);
                    let mut c = gw.column_mut(j);
                    c *= dj;
                }
                g = gw;
            }
        }

        let output = DVector::from_vec(activations.pop().expect("output layer"));
        Ok(Linearization {
            output,
            d_input,
            d_params,
        })
    }

    pub fn jacobian_input(&self, theta: &[T], input: &[T]) -> Result<DMatrix<T>> {
        Ok(self.linearize(theta, input)?.d_input)
    }

    pub fn jacobian_params(&self, theta: &[T], input: &[T]) -> Result<DMatrix<T>> {
        Ok(self.linearize(theta, input)?.d_params)
    }

    /// Flattens per-layer weights and biases into the canonical layout.
    pub fn pack(&self, weights: &[DMatrix<T>], biases: &[DVector<T>]) -> Result<DVector<T>> {
        if weights.len() != self.layers.len() || biases.len() != self.layers.len() {
            return Err(Error::shape("layer count", self.layers.len(), weights.len()));
        }
        let mut theta = DVector::zeros(self.n_params);
        for ((shape, w), b) in self.layers.iter().zip(weights).zip(biases) {
            if w.nrows() != shape.rows || w.ncols() != shape.cols {
                return Err(Error::shape("layer weights", shape.rows * shape.cols, w.len()));
            }
            if b.len() != shape.rows {
                return Err(Error::shape("layer bias", shape.rows, b.len()));
            }
            for i in 0..shape.rows {
                for j in 0..shape.cols {
                    theta[shape.weight_index(i, j)] = w[(i, j)];
                }
                theta[shape.bias_index(i)] = b[i];
            }
        }
        Ok(theta)
    }

    pub fn unpack(&self, theta: &[T]) -> Result<(Vec<DMatrix<T>>, Vec<DVector<T>>)> {
        if theta.len() != self.n_params {
            return Err(Error::shape("network parameters", self.n_params, theta.len()));
        }
        let weights = self
            .layers
            .iter()
            .map(|s| DMatrix::from_row_slice(s.rows, s.cols, &theta[s.weight_offset..s.bias_offset]))
            .collect();
        let biases = self
            .layers
            .iter()
            .map(|s| DVector::from_column_slice(&theta[s.bias_offset..s.bias_offset + s.rows]))
            .collect();
        Ok((weights, biases))
    }
}

#[inline]
fn affine_row<T: Scalar>(theta: &[T], shape: &LayerShape, row: usize, input: &[T]) -> T {
    let w = &theta[shape.weight_index(row, 0)..shape.weight_index(row, 0) + shape.cols];
    let mut acc = theta[shape.bias_index(row)];
    for (&wij, &aj) in w.iter().zip(input) {
        acc += wij * aj;
    }
    acc
}

#[derive(Debug, Clone)]
pub struct Linearization<T: Scalar> {
    pub output: DVector<T>,
    /// `output_dim x input_dim`
    pub d_input: DMatrix<T>,
    /// `output_dim x n_params`
    pub d_params: DMatrix<T>,
}

/// A network specification together with its parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Network<T: Scalar> {
    pub spec: NetworkSpec<T>,
    pub theta: DVector<T>,
}

impl<T: Scalar> Network<T> {
    pub fn new(spec: NetworkSpec<T>, theta: DVector<T>) -> Result<Self> {
        if theta.len() != spec.n_params() {
            return Err(Error::shape("network parameters", spec.n_params(), theta.len()));
        }
        Ok(Network { spec, theta })
    }

    pub fn zeros(spec: NetworkSpec<T>) -> Self {
        let theta = DVector::zeros(spec.n_params());
        Network { spec, theta }
    }

    pub fn forward(&self, input: &[T]) -> Result<DVector<T>> {
        self.spec.forward(self.theta.as_slice(), input)
    }

    pub fn linearize(&self, input: &[T]) -> Result<Linearization<T>> {
        self.spec.linearize(self.theta.as_slice(), input)
    }

    pub fn jacobian_input(&self, input: &[T]) -> Result<DMatrix<T>> {
        self.spec.jacobian_input(self.theta.as_slice(), input)
    }

    pub fn jacobian_params(&self, input: &[T]) -> Result<DMatrix<T>> {
        self.spec.jacobian_params(self.theta.as_slice(), input)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn spec(input: usize, dims: &[usize], hidden: Activation<f64>, out: Activation<f64>) -> NetworkSpec<f64> {
        NetworkSpec::new(input, dims.to_vec(), hidden, out).unwrap()
    }

    fn pseudo_random(n: usize, seed: u64) -> Vec<f64> {
        // small LCG, enough for test inputs
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect()
    }

    fn fd_input(spec: &NetworkSpec<f64>, theta: &[f64], x: &[f64], h: f64) -> DMatrix<f64> {
        let m = spec.output_dim();
        let mut j = DMatrix::zeros(m, x.len());
        for c in 0..x.len() {
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[c] += h;
            xm[c] -= h;
            let d = (spec.forward(theta, &xp).unwrap() - spec.forward(theta, &xm).unwrap()) / (2.0 * h);
            j.set_column(c, &d);
        }
        j
    }

    fn fd_params(spec: &NetworkSpec<f64>, theta: &[f64], x: &[f64], h: f64) -> DMatrix<f64> {
        let m = spec.output_dim();
        let mut j = DMatrix::zeros(m, theta.len());
        for c in 0..theta.len() {
            let mut tp = theta.to_vec();
            let mut tm = theta.to_vec();
            tp[c] += h;
            tm[c] -= h;
            let d = (spec.forward(&tp, x).unwrap() - spec.forward(&tm, x).unwrap()) / (2.0 * h);
            j.set_column(c, &d);
        }
        j
    }

    fn max_rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        a.iter()
            .zip(b.iter())
            .filter(|(_, &y)| y.abs() > 1e-8)
            .map(|(&x, &y)| (x - y).abs() / y.abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn zero_network_outputs_zero() {
        let s = spec(3, &[4, 2], Activation::Tanh, Activation::Linear);
        let theta = vec![0.0; s.n_params()];
        let y = s.forward(&theta, &[0.3, -1.0, 2.0]).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
        let jac = s.jacobian_input(&theta, &[0.3, -1.0, 2.0]).unwrap();
        assert!(jac.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_linear_layer() {
        let s = spec(3, &[3], Activation::Tanh, Activation::Linear);
        let theta = s
            .pack(&[DMatrix::identity(3, 3)], &[DVector::zeros(3)])
            .unwrap();
        let x = [0.25, -4.0, 7.5];
        let y = s.forward(theta.as_slice(), &x).unwrap();
        assert_eq!(y.as_slice(), &x);
    }

    #[test]
    fn scalar_tanh_chain() {
        let s = spec(1, &[1, 1], Activation::Tanh, Activation::Linear);
        // w1, b1, w2, b2
        let y = s.forward(&[1.0, 0.0, 1.0, 0.0], &[0.5]).unwrap();
        assert_relative_eq!(y[0], 0.46211715726000974, epsilon = 1e-15);
    }

    #[test]
    fn linear_layer_jacobians() {
        let s = spec(2, &[3], Activation::Tanh, Activation::Linear);
        let w = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, -3.0, 0.5, 4.0, -1.0]);
        let theta = s.pack(std::slice::from_ref(&w), &[DVector::from_vec(vec![0.1, 0.2, 0.3])]).unwrap();
        let u = [0.7, -1.3];
        assert_eq!(s.jacobian_input(theta.as_slice(), &u).unwrap(), w);

        let jp = s.jacobian_params(theta.as_slice(), &u).unwrap();
        let layer = s.layers()[0];
        for i in 0..3 {
            for r in 0..3 {
                let expected = if r == i { 1.0 } else { 0.0 };
                assert_eq!(jp[(r, layer.bias_index(i))], expected);
            }
            for j in 0..2 {
                for r in 0..3 {
                    let expected = if r == i { u[j] } else { 0.0 };
                    assert_eq!(jp[(r, layer.weight_index(i, j))], expected);
                }
            }
        }
    }

    #[test]
    fn zero_input_kills_first_layer_weight_columns() {
        let s = spec(2, &[3, 2], Activation::Tanh, Activation::Linear);
        let mut theta = pseudo_random(s.n_params(), 4);
        let first = s.layers()[0];
        for i in 0..first.rows {
            theta[first.bias_index(i)] = 0.0;
        }
        let jp = s.jacobian_params(&theta, &[0.0, 0.0]).unwrap();
        for i in 0..first.rows {
            for j in 0..first.cols {
                assert!(jp.column(first.weight_index(i, j)).iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn random_jacobians_match_finite_differences() {
        let cases: [(usize, &[usize], Activation<f64>, Activation<f64>); 4] = [
            (3, &[4, 2], Activation::Tanh, Activation::Linear),
            (2, &[3, 1], Activation::Tanh, Activation::Sigmoid),
            (4, &[5, 3, 2], Activation::Sigmoid, Activation::Linear),
            (2, &[3, 3], Activation::LeakyRelu(0.1), Activation::Linear),
        ];
        for (seed, (input, dims, hidden, out)) in cases.into_iter().enumerate() {
            let s = spec(input, dims, hidden, out);
            let theta = pseudo_random(s.n_params(), seed as u64 + 10);
            let x = pseudo_random(input, seed as u64 + 100);
            let lin = s.linearize(&theta, &x).unwrap();
            assert_eq!(lin.output, s.forward(&theta, &x).unwrap());
            let ji = fd_input(&s, &theta, &x, 1e-5);
            let jp = fd_params(&s, &theta, &x, 1e-5);
            assert!(max_rel_err(&lin.d_input, &ji) < 1e-6, "input jacobian, case {seed}");
            assert!(max_rel_err(&lin.d_params, &jp) < 1e-6, "param jacobian, case {seed}");
        }
    }

    #[test]
    fn pack_unpack_round_trip() {
        let s = spec(3, &[4, 2], Activation::Tanh, Activation::Linear);
        let theta = DVector::from_vec(pseudo_random(s.n_params(), 9));
        let (w, b) = s.unpack(theta.as_slice()).unwrap();
        assert_eq!(w[0].shape(), (4, 3));
        assert_eq!(w[1].shape(), (2, 4));
        assert_eq!(s.pack(&w, &b).unwrap(), theta);
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(NetworkSpec::<f64>::new(2, vec![], Activation::Tanh, Activation::Linear).is_err());
        assert!(NetworkSpec::<f64>::new(2, vec![0, 1], Activation::Tanh, Activation::Linear).is_err());
        assert!(NetworkSpec::new(2, vec![1], Activation::LeakyRelu(1.5), Activation::Linear).is_err());
        let s = spec(2, &[2], Activation::Tanh, Activation::Linear);
        assert!(matches!(
            s.forward(&vec![0.0; s.n_params()], &[1.0]),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn param_count_formula() {
        // 4 -> 5 -> 3 and 3 -> 5 -> 1
        assert_eq!(spec(4, &[5, 3], Activation::Tanh, Activation::Linear).n_params(), 43);
        assert_eq!(spec(3, &[5, 1], Activation::Tanh, Activation::Sigmoid).n_params(), 26);
    }

    #[test]
    fn works_in_single_precision() {
        let s = NetworkSpec::<f32>::new(1, vec![1, 1], Activation::Tanh, Activation::Linear).unwrap();
        let y = s.forward(&[1.0, 0.0, 1.0, 0.0], &[0.5]).unwrap();
        assert!((y[0] - 0.462_117_16).abs() < 1e-6);
    }
}
