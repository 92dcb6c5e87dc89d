//! Property checks across the model, training problem and solvers.

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use nails::admm::{prox_group, prox_quantize};
use nails::model_io::{read_model, write_model};
use nails::sensitivity::LsSystem;
use nails::{Activation, Dataset, OutputLoss, RnnModel, RnnSpec, SmoothRegularizer, Trace, TrainingProblem};

fn random_vec(r: &mut ChaCha8Rng, n: usize, scale: f64) -> DVector<f64> {
    DVector::from_fn(n, |_, _| scale * (2.0 * r.random::<f64>() - 1.0))
}

fn small_spec(n_x: usize, hidden: usize, feedthrough: bool) -> RnnSpec<f64> {
    RnnSpec::layered(n_x, 1, 1, &[hidden], &[hidden], Activation::Tanh, Activation::Linear, feedthrough).unwrap()
}

fn random_model(spec: &RnnSpec<f64>, r: &mut ChaCha8Rng) -> RnnModel<f64> {
    let tx = random_vec(r, spec.n_theta_x(), 0.6);
    let ty = random_vec(r, spec.n_theta_y(), 0.6);
    RnnModel::new(spec.clone(), tx, ty, None).unwrap()
}

fn random_trace(r: &mut ChaCha8Rng, n: usize) -> Trace<f64> {
    let u = DMatrix::from_fn(n, 1, |_, _| 2.0 * r.random::<f64>() - 1.0);
    let y = DMatrix::from_fn(n, 1, |_, _| r.random::<f64>() - 0.5);
    Trace::new(u, y).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn group_prox_shrinks_norm_along_the_same_direction(
        v in prop::collection::vec(-3.0f64..3.0, 1..8),
        alpha in 0.0f64..4.0,
    ) {
        let v = DVector::from_vec(v);
        let p = prox_group(&v, alpha);
        let expected = (v.norm() - alpha).max(0.0);
        prop_assert!((p.norm() - expected).abs() < 1e-12);
        if expected > 0.0 {
            prop_assert!((p.dot(&v) - p.norm() * v.norm()).abs() < 1e-9);
        }
    }

    #[test]
    fn quantize_touches_only_listed_entries(
        v in prop::collection::vec(-1.0f64..1.0, 2..10),
        pick in prop::collection::vec(any::<bool>(), 10),
    ) {
        let v = DVector::from_vec(v);
        let levels: Vec<f64> = (-5..=5).map(|k| f64::from(k) * 0.1).collect();
        let idx: Vec<usize> = (0..v.len()).filter(|&i| pick[i]).collect();
        let q = prox_quantize(&v, &levels, &idx);
        for i in 0..v.len() {
            if idx.contains(&i) {
                prop_assert!(levels.contains(&q[i]));
                let best = levels.iter().map(|l| (v[i] - l).abs()).fold(f64::INFINITY, f64::min);
                prop_assert!(((v[i] - q[i]).abs() - best).abs() < 1e-12);
            } else {
                prop_assert_eq!(q[i], v[i]);
            }
        }
    }

    #[test]
    fn saved_models_simulate_identically(seed in any::<u64>(), n_x in 1usize..4, feedthrough in any::<bool>()) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let model = random_model(&small_spec(n_x, 3, feedthrough), &mut r);
        let mut text = Vec::new();
        write_model(&mut text, &model, &[("note".into(), "x y".into())]).unwrap();
        let (back, meta) = read_model::<f64>(text.as_slice()).unwrap();
        prop_assert_eq!(&meta, &vec![("note".to_string(), "x y".to_string())]);
        let trace = random_trace(&mut r, 20);
        let x0 = vec![0.1; n_x];
        let a = model.simulate(&x0, &trace.inputs).unwrap();
        let b = back.simulate(&x0, &trace.inputs).unwrap();
        prop_assert_eq!(a.outputs, b.outputs);
    }

    #[test]
    fn single_precision_tracks_double(seed in any::<u64>()) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let spec = small_spec(2, 4, false);
        let model = random_model(&spec, &mut r);
        let trace = random_trace(&mut r, 30);
        let spec32 = RnnSpec::<f32>::layered(2, 1, 1, &[4], &[4], Activation::Tanh, Activation::Linear, false).unwrap();
        let model32 = RnnModel::new(
            spec32,
            model.theta_x.map(|v| v as f32),
            model.theta_y.map(|v| v as f32),
            None,
        )
        .unwrap();
        let y64 = model.simulate(&[0.0, 0.0], &trace.inputs).unwrap().outputs;
        let y32 = model32.simulate(&[0.0, 0.0], &trace.inputs.map(|v| v as f32)).unwrap().outputs;
        for (a, b) in y64.iter().zip(y32.iter()) {
            prop_assert!((a - f64::from(*b)).abs() < 1e-4);
        }
    }

    #[test]
    fn damped_steps_agree_across_backends_and_descend(seed in any::<u64>(), log_lambda in -6.0f64..2.0) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let spec = small_spec(2, 3, true);
        let data = Dataset::new(vec![random_trace(&mut r, 15), random_trace(&mut r, 10)]).unwrap();
        let p = TrainingProblem::new(&spec, &data, OutputLoss::mse(0.04), SmoothRegularizer::l2(0.1, 0.01)).unwrap();
        let z = random_vec(&mut r, p.n_params(), 0.5);
        let eval = p.evaluate(&z).unwrap();
        let bundle = p.propagate_sensitivities(&z, &eval).unwrap();
        let lin = p.linearized(&bundle).unwrap();
        let lambda = 10f64.powf(log_lambda);
        let stacked = lin.assemble_stacked().unwrap().prepare().unwrap();
        let normal = lin.assemble_normal().unwrap().prepare().unwrap();
        let a = stacked.solve(lambda).unwrap();
        let b = normal.solve(lambda).unwrap();
        prop_assert!((&a - &b).amax() <= 1e-7 * a.amax().max(1.0));
        let grad = p.gradient(&bundle);
        prop_assert!((&stacked.c - &grad).amax() <= 1e-9 * grad.amax().max(1.0));
        prop_assert!(stacked.directional_derivative(&a) < 0.0);

        let LsSystem::Rls(rls) = lin.solve_rls(0.0).unwrap() else { unreachable!() };
        let exact = stacked.solve(0.0).unwrap();
        prop_assert!((&rls.step - &exact).amax() <= 1e-6 * exact.amax().max(1.0));
    }
}
