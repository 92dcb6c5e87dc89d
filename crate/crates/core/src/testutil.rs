//! Random instances shared by unit tests.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::loss::{OutputLoss, SmoothRegularizer};
use crate::mlp::Activation;
use crate::model::{Dataset, RnnSpec, Trace};
use crate::sensitivity::TrainingProblem;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> DVector<f64> {
    DVector::from_fn(n, |_, _| scale * (2.0 * rng.random::<f64>() - 1.0))
}

pub fn random_trace(rng: &mut ChaCha8Rng, n: usize, n_u: usize, n_y: usize, binary: bool) -> Trace<f64> {
    let u = DMatrix::from_fn(n, n_u, |_, _| 2.0 * rng.random::<f64>() - 1.0);
    let y = DMatrix::from_fn(n, n_y, |_, _| {
        if binary {
            f64::from(u8::from(rng.random::<bool>()))
        } else {
            rng.random::<f64>() - 0.5
        }
    });
    Trace::new(u, y).unwrap()
}

/// A small recurrent model with tanh hidden layers.
pub fn small_spec(n_x: usize, n_u: usize, n_y: usize, output: Activation<f64>, feedthrough: bool) -> RnnSpec<f64> {
    RnnSpec::layered(n_x, n_u, n_y, &[4], &[3], Activation::Tanh, output, feedthrough).unwrap()
}

/// Owns a spec and dataset so a problem can borrow them.
pub struct Instance {
    pub spec: RnnSpec<f64>,
    pub data: Dataset<f64>,
    pub z: DVector<f64>,
    pub loss: OutputLoss<f64>,
    pub reg: SmoothRegularizer<f64>,
}

impl Instance {
    pub fn problem(&self) -> TrainingProblem<'_, f64> {
        TrainingProblem::new(&self.spec, &self.data, self.loss, self.reg.clone()).unwrap()
    }
}

pub fn instance(seed: u64, spec: RnnSpec<f64>, n_traces: usize, n: usize, loss: OutputLoss<f64>, reg: SmoothRegularizer<f64>) -> Instance {
    let mut r = rng(seed);
    let binary = matches!(loss, OutputLoss::ModifiedCrossEntropy { .. });
    let mut traces: Vec<Trace<f64>> = (0..n_traces)
        .map(|_| random_trace(&mut r, n, spec.n_u(), spec.n_y(), binary))
        .collect();
    if let Some(enc) = spec.encoder() {
        for t in &mut traces {
            t.v0 = Some(random_vec(&mut r, enc.input_dim(), 1.0));
        }
    }
    let data = Dataset::new(traces).unwrap();
    let n_init = spec.encoder().map_or(spec.n_x() * n_traces, |e| e.n_params());
    let n_p = n_init + spec.n_theta_x() + spec.n_theta_y();
    let z = random_vec(&mut r, n_p, 0.5);
    Instance { spec, data, z, loss, reg }
}
