//! CSV traces, the synthetic binary-output benchmark, and fit metrics.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::model::Trace;
use crate::scalar::Scalar;

/// Reads a trace whose columns are `n_u` inputs followed by `n_y` outputs.
pub fn load_csv<T: Scalar>(path: impl AsRef<Path>, n_u: usize, n_y: usize, has_header: bool) -> Result<Trace<T>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path)
        .map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?;
    read_csv(file, n_u, n_y, has_header)
}

/// [`load_csv`] over any reader.
pub fn read_csv<T: Scalar>(reader: impl std::io::Read, n_u: usize, n_y: usize, has_header: bool) -> Result<Trace<T>> {
    let width = n_u + n_y;
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(has_header)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut values: Vec<T> = Vec::new();
    let mut rows = 0;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() == 1 && rec[0].is_empty() {
            continue;
        }
        if rec.len() != width {
            return Err(Error::Parse {
                line,
                message: format!("expected {width} columns, found {}", rec.len()),
            });
        }
        for cell in rec.iter() {
            let v: f64 = cell.parse().map_err(|_| Error::Parse {
                line,
                message: format!("not a number: {cell:?}"),
            })?;
            values.push(T::lit(v));
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(Error::Data("no data rows".into()));
    }
    let all = DMatrix::from_row_slice(rows, width, &values);
    Trace::new(
        all.columns(0, n_u).into_owned(),
        all.columns(n_u, n_y).into_owned(),
    )
}

/// Writes inputs then outputs with 17 significant digits.
pub fn save_csv<T: Scalar>(path: impl AsRef<Path>, trace: &Trace<T>, header: Option<&[String]>) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_csv(&mut file, trace, header)?;
    file.flush()?;
    Ok(())
}

pub fn write_csv<T: Scalar>(out: &mut impl Write, trace: &Trace<T>, header: Option<&[String]>) -> Result<()> {
    let mut w = csv::WriterBuilder::new().from_writer(out);
    let csv_err = |e: csv::Error| Error::Data(e.to_string());
    if let Some(h) = header {
        w.write_record(h).map_err(csv_err)?;
    }
    for k in 0..trace.len() {
        let row = trace
            .inputs
            .row(k)
            .iter()
            .chain(trace.outputs.row(k).iter())
            .map(|v| format!("{:.16e}", v.to_f64_lossy()))
            .collect::<Vec<_>>();
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// The three-state nonlinear system with a thresholded binary output.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticBinarySystem {
    pub a: Matrix3<f64>,
    pub b: Vector3<f64>,
    pub c: Vector3<f64>,
    pub offset: f64,
    /// Standard deviation of the process and output noise.
    pub noise_std: f64,
    /// Probability of drawing a new input value at each step.
    pub change_probability: f64,
    pub seed: u64,
}

impl Default for SyntheticBinarySystem {
    fn default() -> Self {
        SyntheticBinarySystem {
            a: Matrix3::new(0.8, 0.2, -0.1, 0.0, 0.9, 0.1, 0.1, -0.1, 0.7),
            b: Vector3::new(-1.0, 0.5, 1.0),
            c: Vector3::new(-2.0, 1.5, 0.5),
            offset: 4.0,
            noise_std: 0.0,
            change_probability: 0.9,
            seed: 0,
        }
    }
}

/// A generated experiment split into a training and a test part.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitData<T: Scalar> {
    pub train: Trace<T>,
    pub test: Trace<T>,
}

impl SyntheticBinarySystem {
    pub fn validate(&self) -> Result<()> {
        if !(self.noise_std >= 0.0) {
            return Err(Error::Config(format!("noise standard deviation must be nonnegative, got {}", self.noise_std)));
        }
        if !(0.0..=1.0).contains(&self.change_probability) {
            return Err(Error::Config("input change probability must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Piecewise-constant random input: `u(0) ~ U[0,1]`, then a fresh draw
    /// with the change probability, otherwise the previous value.
    pub fn inputs(&self, n: usize) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut u = Vec::with_capacity(n);
        let mut current = 0.0;
        for k in 0..n {
            let change = rng.random::<f64>() < self.change_probability;
            let fresh = rng.random::<f64>();
            if k == 0 || change {
                current = fresh;
            }
            u.push(current);
        }
        u
    }

    /// Simulates the system from `x(0) = 0` with the given inputs.
    pub fn simulate(&self, inputs: &[f64]) -> (Vec<Vector3<f64>>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x9E37_79B9_7F4A_7C15);
        let mut noise = || -> f64 {
            let z: f64 = StandardNormal.sample(&mut rng);
            self.noise_std * z
        };
        let mut x = Vector3::zeros();
        let mut states = Vec::with_capacity(inputs.len());
        let mut y = Vec::with_capacity(inputs.len());
        for &u in inputs {
            let xi = Vector3::new(noise(), noise(), noise());
            let zeta = noise();
            let cubic = x + x.map(|v| v * v * v / 3.0);
            y.push(if self.c.dot(&cubic) - self.offset + zeta >= 0.0 { 1.0 } else { 0.0 });
            states.push(x);
            let gain = x.map(|v| 0.9 + 0.1 * v.sin());
            x = self.a * x.component_mul(&gain) + self.b * (u * (1.0 - u * u * u)) + xi;
        }
        (states, y)
    }

    /// `n_total` samples with random inputs; the first half is training data.
    pub fn generate<T: Scalar>(&self, n_total: usize) -> Result<SplitData<T>> {
        self.validate()?;
        let u = self.inputs(n_total);
        self.generate_with_inputs(&u)
    }

    pub fn generate_with_inputs<T: Scalar>(&self, inputs: &[f64]) -> Result<SplitData<T>> {
        self.validate()?;
        let n = inputs.len();
        if n < 2 {
            return Err(Error::Config(format!("need at least 2 samples, got {n}")));
        }
        let (_, y) = self.simulate(inputs);
        let half = n / 2;
        let part = |r: std::ops::Range<usize>| {
            Trace::new(
                DMatrix::from_iterator(r.len(), 1, inputs[r.clone()].iter().map(|&v| T::lit(v))),
                DMatrix::from_iterator(r.len(), 1, y[r].iter().map(|&v| T::lit(v))),
            )
        };
        Ok(SplitData {
            train: part(0..half)?,
            test: part(half..n)?,
        })
    }
}

fn check_pair<T>(y: &[T], yhat: &[T]) -> Result<()> {
    if y.is_empty() {
        return Err(Error::Data("empty metric input".into()));
    }
    if y.len() != yhat.len() {
        return Err(Error::shape("metric inputs", y.len(), yhat.len()));
    }
    Ok(())
}

/// Best fit rate `100 (1 - ||y - yhat|| / ||y - mean(y)||)` over the
/// flattened data.
pub fn bfr<T: Scalar>(y: &[T], yhat: &[T]) -> Result<f64> {
    check_pair(y, yhat)?;
    let mean = y.iter().map(|v| v.to_f64_lossy()).sum::<f64>() / y.len() as f64;
    let (mut num, mut den) = (0.0, 0.0);
    for (a, b) in y.iter().zip(yhat) {
        let (a, b) = (a.to_f64_lossy(), b.to_f64_lossy());
        num += (a - b) * (a - b);
        den += (a - mean) * (a - mean);
    }
    if den == 0.0 {
        return Err(Error::Data("best fit rate undefined for constant data".into()));
    }
    Ok(100.0 * (1.0 - (num / den).sqrt()))
}

pub fn rmse<T: Scalar>(y: &[T], yhat: &[T]) -> Result<f64> {
    check_pair(y, yhat)?;
    let s: f64 = y
        .iter()
        .zip(yhat)
        .map(|(a, b)| (a.to_f64_lossy() - b.to_f64_lossy()).powi(2))
        .sum();
    Ok((s / y.len() as f64).sqrt())
}

/// Percentage of predictions with `1[yhat >= 0.5] == y`.
pub fn accuracy<T: Scalar>(y: &[T], yhat: &[T]) -> Result<f64> {
    check_pair(y, yhat)?;
    let hits = y
        .iter()
        .zip(yhat)
        .filter(|(a, b)| {
            let class = if b.to_f64_lossy() >= 0.5 { 1.0 } else { 0.0 };
            class == a.to_f64_lossy()
        })
        .count();
    Ok(100.0 * hits as f64 / y.len() as f64)
}

/// Percentage of exact zeros. An empty vector has sparsity 0.
pub fn sparsity<T: Scalar>(theta: &[T]) -> f64 {
    if theta.is_empty() {
        return 0.0;
    }
    100.0 * theta.iter().filter(|v| **v == T::zero()).count() as f64 / theta.len() as f64
}
