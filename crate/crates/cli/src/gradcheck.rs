//! Finite-difference checks of network Jacobians and the objective gradient
//! on a small random instance shaped like the configured model.

use nalgebra::{DMatrix, DVector};
use nails::{Dataset, Network, NetworkSpec, OutputLoss, SmoothRegularizer, Trace, TrainingProblem};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{DataSource, Experiment, LossSettings};
use crate::experiment::build_spec;
use crate::Failure;

pub const TOLERANCE: f64 = 1e-4;

pub struct Check {
    pub name: String,
    pub error: f64,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.error <= TOLERANCE
    }
}

fn uniform(r: &mut ChaCha8Rng, n: usize, scale: f64) -> DVector<f64> {
    DVector::from_fn(n, |_, _| scale * (2.0 * r.random::<f64>() - 1.0))
}

fn fd_jacobian(f: impl Fn(&DVector<f64>) -> Result<DVector<f64>, Failure>, x: &DVector<f64>) -> Result<DMatrix<f64>, Failure> {
    let m = f(x)?.len();
    let mut jac = DMatrix::zeros(m, x.len());
    for j in 0..x.len() {
        let h = 1e-3 * x[j].abs().max(1.0);
        let at = |s: f64| {
            let mut y = x.clone();
            y[j] += s * h;
            f(&y)
        };
        let col = (at(-2.0)? - at(2.0)? + (at(1.0)? - at(-1.0)?) * 8.0) / (12.0 * h);
        jac.set_column(j, &col);
    }
    Ok(jac)
}

fn relative_error(analytic: &DMatrix<f64>, numeric: &DMatrix<f64>) -> f64 {
    analytic.iter().zip(numeric.iter()).fold(0.0, |w, (&a, &n)| {
        let scale = a.abs().max(n.abs());
        if scale > 1e-8 {
            w.max((a - n).abs() / scale)
        } else {
            w
        }
    })
}

fn network_checks(name: &str, spec: &NetworkSpec<f64>, r: &mut ChaCha8Rng, corrupt: bool) -> Result<Vec<Check>, Failure> {
    let theta = uniform(r, spec.n_params(), 0.8);
    let input = uniform(r, spec.input_dim(), 1.0);
    let net = Network::new(spec.clone(), theta.clone())?;
    let by_input = fd_jacobian(|x| Ok(net.forward(x.as_slice())?), &input)?;
    let by_params = fd_jacobian(|t| Ok(spec.forward(t.as_slice(), input.as_slice())?), &theta)?;
    let mut d_params = net.jacobian_params(input.as_slice())?;
    if corrupt {
        d_params[(0, 0)] += 0.1;
    }
    Ok(vec![
        Check {
            name: format!("{name} input jacobian"),
            error: relative_error(&net.jacobian_input(input.as_slice())?, &by_input),
        },
        Check {
            name: format!("{name} parameter jacobian"),
            error: relative_error(&d_params, &by_params),
        },
    ])
}

/// Runs every check. `corrupt` perturbs one analytic Jacobian entry.
pub fn run(e: &Experiment, seed: u64, corrupt: bool) -> Result<Vec<Check>, Failure> {
    let (n_u, n_y) = match &e.data {
        DataSource::Synthetic { .. } => (1, 1),
        DataSource::Csv { n_u, n_y, .. } => (*n_u, *n_y),
    };
    let spec = build_spec(e, n_u, n_y)?;
    let mut r = ChaCha8Rng::seed_from_u64(seed);

    let mut checks = Vec::new();
    if let Some(fx) = spec.fx() {
        checks.extend(network_checks("state network", fx, &mut r, false)?);
    }
    checks.extend(network_checks("output network", spec.fy(), &mut r, corrupt)?);
    if let Some(enc) = spec.encoder() {
        checks.extend(network_checks("encoder", enc, &mut r, false)?);
    }

    let binary = matches!(e.loss, LossSettings::CrossEntropy { .. });
    let n = 12;
    let traces = (0..2)
        .map(|_| {
            let u = DMatrix::from_fn(n, n_u, |_, _| 2.0 * r.random::<f64>() - 1.0);
            let y = DMatrix::from_fn(n, n_y, |_, _| {
                if binary {
                    f64::from(u8::from(r.random::<bool>()))
                } else {
                    r.random::<f64>() - 0.5
                }
            });
            let mut t = Trace::new(u, y)?;
            if let Some(enc) = spec.encoder() {
                t.v0 = Some(uniform(&mut r, enc.input_dim(), 1.0));
            }
            Ok(t)
        })
        .collect::<Result<Vec<_>, Failure>>()?;
    let data = Dataset::new(traces)?;
    let loss = match e.loss {
        LossSettings::Mse { scale } => OutputLoss::mse(scale.unwrap_or(1.0 / (2 * n) as f64)),
        LossSettings::CrossEntropy { eps } => OutputLoss::cross_entropy(eps),
    };
    let problem = TrainingProblem::new(&spec, &data, loss, SmoothRegularizer::l2(e.rho_x, e.rho_theta))?;
    let z = uniform(&mut r, problem.n_params(), 0.5);
    let eval = problem.evaluate(&z)?;
    let grad = problem.gradient(&problem.propagate_sensitivities(&z, &eval)?);
    let numeric = fd_jacobian(|z| Ok(DVector::from_element(1, problem.evaluate(z)?.total())), &z)?;
    checks.push(Check {
        name: "objective gradient".to_string(),
        error: relative_error(&DMatrix::from_row_slice(1, grad.len(), grad.as_slice()), &numeric),
    });
    Ok(checks)
}

pub fn report(checks: &[Check]) -> String {
    let mut s = String::from("check,max_relative_error,tolerance,status\n");
    for c in checks {
        s.push_str(&format!(
            "{},{:.3e},{:.0e},{}\n",
            c.name,
            c.error,
            TOLERANCE,
            if c.passed() { "ok" } else { "FAILED" }
        ));
    }
    s
}
