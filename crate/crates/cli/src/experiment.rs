//! Training runs, evaluation and their CSV artifacts.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DMatrix;
use nails::admm::{build_state_groups, run_nails, AdmmConfig, AdmmRecord};
use nails::data::{accuracy, bfr, load_csv, rmse, save_csv, sparsity, SyntheticBinarySystem};
use nails::initstate::{estimate_x0, PsoConfig};
use nails::model_io::{load_model, save_model};
use nails::solver::{init_decision, run_amsgrad, run_inner, EpochRecord, FitState, InnerSolver};
use nails::{Dataset, OutputLoss, RnnModel, RnnSpec, SmoothRegularizer, Trace, TrainingProblem};
use rayon::prelude::*;

use crate::config::{DataSource, Experiment, LossSettings, NonSmoothKind, SolverKind};
use crate::Failure;

pub const HISTORY_SCHEMA: &str = "# nails-history v1";

/// Per-column affine map `(v - mean) / std` applied to inputs and outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Scaling {
    pub u: Vec<(f64, f64)>,
    pub y: Vec<(f64, f64)>,
}

impl Scaling {
    fn columns(m: &DMatrix<f64>) -> Vec<(f64, f64)> {
        (0..m.ncols())
            .map(|j| {
                let col = m.column(j);
                let n = col.len() as f64;
                let mean = col.sum() / n;
                let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                (mean, if var > 0.0 { var.sqrt() } else { 1.0 })
            })
            .collect()
    }

    /// Statistics of the stacked training traces. Outputs are left unscaled
    /// when `scale_outputs` is false (binary targets).
    pub fn fit(traces: &[Trace<f64>], scale_outputs: bool) -> Self {
        let stack = |f: &dyn Fn(&Trace<f64>) -> &DMatrix<f64>| {
            let cols = f(&traces[0]).ncols();
            let rows: usize = traces.iter().map(|t| f(t).nrows()).sum();
            let mut m = DMatrix::zeros(rows, cols);
            let mut r = 0;
            for t in traces {
                let block = f(t);
                m.rows_mut(r, block.nrows()).copy_from(block);
                r += block.nrows();
            }
            m
        };
        let u = Self::columns(&stack(&|t| &t.inputs));
        let y = if scale_outputs {
            Self::columns(&stack(&|t| &t.outputs))
        } else {
            vec![(0.0, 1.0); traces[0].n_y()]
        };
        Scaling { u, y }
    }

    fn apply(map: &[(f64, f64)], m: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| (m[(i, j)] - map[j].0) / map[j].1)
    }

    pub fn forward(&self, t: &Trace<f64>) -> Trace<f64> {
        Trace {
            inputs: Self::apply(&self.u, &t.inputs),
            outputs: Self::apply(&self.y, &t.outputs),
            v0: t.v0.clone(),
        }
    }

    pub fn outputs_back(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)] * self.y[j].1 + self.y[j].0)
    }

    fn encode(map: &[(f64, f64)]) -> String {
        map.iter().map(|(m, s)| format!("{m:.16e}:{s:.16e}")).collect::<Vec<_>>().join(",")
    }

    fn decode(s: &str) -> Option<Vec<(f64, f64)>> {
        s.split(',')
            .map(|p| {
                let (m, sd) = p.split_once(':')?;
                Some((m.parse().ok()?, sd.parse().ok()?))
            })
            .collect()
    }
}

/// Everything besides the network needed to evaluate a trained model.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSettings {
    pub loss: OutputLoss<f64>,
    pub rho_x: f64,
    pub pso: PsoConfig,
    pub window: Option<(usize, usize)>,
    pub scaling: Option<Scaling>,
}

impl EvalSettings {
    pub fn to_meta(&self) -> Vec<(String, String)> {
        let loss = match self.loss {
            OutputLoss::QuadraticMse { scale } => format!("mse {scale:.16e}"),
            OutputLoss::ModifiedCrossEntropy { eps } => format!("cross_entropy {eps:.16e}"),
        };
        let p = &self.pso;
        let mut meta = vec![
            ("loss".to_string(), loss),
            ("rho_x".to_string(), format!("{:.16e}", self.rho_x)),
            (
                "x0_search".to_string(),
                format!(
                    "{} {:.16e} {:.16e} {} {} {:.16e} {:.16e} {:.16e} {}",
                    p.population.map_or("auto".to_string(), |n| n.to_string()),
                    p.lower,
                    p.upper,
                    p.horizon,
                    p.iterations,
                    p.inertia,
                    p.cognitive,
                    p.social,
                    p.seed
                ),
            ),
        ];
        if let Some((a, b)) = self.window {
            meta.push(("window".to_string(), format!("{a} {b}")));
        }
        if let Some(s) = &self.scaling {
            meta.push(("input_scaling".to_string(), Scaling::encode(&s.u)));
            meta.push(("output_scaling".to_string(), Scaling::encode(&s.y)));
        }
        meta
    }

    pub fn from_meta(meta: &[(String, String)]) -> Result<Self, Failure> {
        let get = |k: &str| meta.iter().find(|(key, _)| key == k).map(|(_, v)| v.as_str());
        let bad = |k: &str| Failure::Data(format!("model file has a missing or malformed {k} entry"));
        let num = |s: Option<&str>, k: &str| -> Result<f64, Failure> { s.and_then(|s| s.parse().ok()).ok_or_else(|| bad(k)) };

        let mut loss_parts = get("loss").ok_or_else(|| bad("loss"))?.split_whitespace();
        let loss = match loss_parts.next() {
            Some("mse") => OutputLoss::mse(num(loss_parts.next(), "loss")?),
            Some("cross_entropy") => OutputLoss::cross_entropy(num(loss_parts.next(), "loss")?),
            _ => return Err(bad("loss")),
        };
        let rho_x = num(get("rho_x"), "rho_x")?;
        let x0: Vec<&str> = get("x0_search").ok_or_else(|| bad("x0_search"))?.split_whitespace().collect();
        if x0.len() != 9 {
            return Err(bad("x0_search"));
        }
        let int = |s: &str| s.parse::<usize>().map_err(|_| bad("x0_search"));
        let pso = PsoConfig {
            population: if x0[0] == "auto" { None } else { Some(int(x0[0])?) },
            lower: num(Some(x0[1]), "x0_search")?,
            upper: num(Some(x0[2]), "x0_search")?,
            horizon: int(x0[3])?,
            iterations: int(x0[4])?,
            inertia: num(Some(x0[5]), "x0_search")?,
            cognitive: num(Some(x0[6]), "x0_search")?,
            social: num(Some(x0[7]), "x0_search")?,
            seed: x0[8].parse().map_err(|_| bad("x0_search"))?,
        };
        let window = match get("window") {
            None => None,
            Some(w) => {
                let v: Vec<usize> = w.split_whitespace().map(|s| s.parse().map_err(|_| bad("window"))).collect::<Result<_, _>>()?;
                match v.as_slice() {
                    [a, b] => Some((*a, *b)),
                    _ => return Err(bad("window")),
                }
            }
        };
        let scaling = match (get("input_scaling"), get("output_scaling")) {
            (None, None) => None,
            (Some(u), Some(y)) => Some(Scaling {
                u: Scaling::decode(u).ok_or_else(|| bad("input_scaling"))?,
                y: Scaling::decode(y).ok_or_else(|| bad("output_scaling"))?,
            }),
            _ => return Err(bad("scaling")),
        };
        Ok(EvalSettings {
            loss,
            rho_x,
            pso,
            window,
            scaling,
        })
    }
}

/// Metrics of a model on one group of traces, in original units.
#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub split: String,
    pub samples: usize,
    pub bfr: Option<f64>,
    pub rmse: f64,
    pub accuracy: Option<f64>,
}

pub const METRICS_HEADER: &str = "split,samples,bfr,rmse,accuracy";

impl Metrics {
    pub fn row(&self) -> String {
        format!(
            "{},{},{},{:.10e},{}",
            self.split,
            self.samples,
            self.bfr.map_or(String::new(), |b| format!("{b:.10}")),
            self.rmse,
            self.accuracy.map_or(String::new(), |a| format!("{a:.2}"))
        )
    }
}

fn check_dims(spec: &RnnSpec<f64>, t: &Trace<f64>) -> Result<(), Failure> {
    if t.n_u() != spec.n_u() || t.n_y() != spec.n_y() {
        return Err(Failure::Data(format!(
            "data has {} inputs and {} outputs, the model expects {} and {}",
            t.n_u(),
            t.n_y(),
            spec.n_u(),
            spec.n_y()
        )));
    }
    Ok(())
}

/// Open-loop simulation of each trace (initial state from the encoder or
/// estimated) and metrics over all of them.
pub fn evaluate(model: &RnnModel<f64>, settings: &EvalSettings, split: &str, traces: &[Trace<f64>]) -> Result<Metrics, Failure> {
    let mut y_all = Vec::new();
    let mut yhat_all = Vec::new();
    for raw in traces {
        check_dims(&model.spec, raw)?;
        let scaled = match &settings.scaling {
            Some(s) => s.forward(raw),
            None => raw.clone(),
        };
        let (trace, target) = match settings.window {
            Some((a, b)) => {
                let t = scaled.build_v0(a, b)?;
                let target = raw.window(a.max(b), raw.len())?;
                (t, target)
            }
            None => (scaled, raw.clone()),
        };
        let x0 = match (&model.theta_x0, &trace.v0) {
            (Some(_), Some(v0)) => model.encode_x0(v0.as_slice())?,
            _ => estimate_x0(model, &trace, &settings.loss, settings.rho_x, &settings.pso)?.x0,
        };
        let sim = model.simulate(x0.as_slice(), &trace.inputs)?;
        let yhat = match &settings.scaling {
            Some(s) => s.outputs_back(&sim.outputs),
            None => sim.outputs,
        };
        y_all.extend(target.outputs.transpose().iter().copied());
        yhat_all.extend(yhat.transpose().iter().copied());
    }
    let binary = y_all.iter().all(|&v| v == 0.0 || v == 1.0);
    Ok(Metrics {
        split: split.to_string(),
        samples: y_all.len(),
        bfr: bfr(&y_all, &yhat_all).ok(),
        rmse: rmse(&y_all, &yhat_all)?,
        accuracy: if binary { Some(accuracy(&y_all, &yhat_all)?) } else { None },
    })
}

pub struct LoadedData {
    pub train: Vec<Trace<f64>>,
    pub test: Vec<Trace<f64>>,
}

pub fn load_data(source: &DataSource) -> Result<LoadedData, Failure> {
    match source {
        DataSource::Synthetic {
            n,
            sigma,
            seed,
            change_probability,
        } => {
            let sys = SyntheticBinarySystem {
                noise_std: *sigma,
                change_probability: *change_probability,
                seed: *seed,
                ..Default::default()
            };
            sys.validate()?;
            let d = sys.generate(*n)?;
            Ok(LoadedData {
                train: vec![d.train],
                test: vec![d.test],
            })
        }
        DataSource::Csv {
            train,
            test,
            has_header,
            n_u,
            n_y,
        } => {
            let load = |paths: &[String]| -> Result<Vec<Trace<f64>>, Failure> {
                paths
                    .iter()
                    .map(|p| load_csv(p, *n_u, *n_y, *has_header).map_err(|e| Failure::Data(format!("{p}: {e}"))))
                    .collect()
            };
            Ok(LoadedData {
                train: load(train)?,
                test: load(test)?,
            })
        }
    }
}

/// One row of `history.csv`.
enum HistoryRow {
    Epoch(EpochRecord<f64>),
    Admm(AdmmRecord<f64>),
}

pub struct RunOutcome {
    pub model: RnnModel<f64>,
    pub settings: EvalSettings,
    pub objective: f64,
    pub sparsity: f64,
    pub metrics: Vec<Metrics>,
    history: Vec<HistoryRow>,
}

pub fn build_spec(e: &Experiment, n_u: usize, n_y: usize) -> Result<RnnSpec<f64>, Failure> {
    let m = &e.model;
    let mut spec = RnnSpec::layered(m.n_x, n_u, n_y, &m.hidden_x, &m.hidden_y, m.activation, m.output, m.feedthrough)?;
    if let Some(enc) = &m.encoder {
        let n_v = enc.n_a * n_y + enc.n_b * n_u;
        spec = spec.with_encoder(n_v, &enc.hidden, m.activation)?;
    }
    Ok(spec)
}

pub fn train(e: &Experiment) -> Result<RunOutcome, Failure> {
    let data = load_data(&e.data)?;
    let first = data.train.first().ok_or_else(|| Failure::Data("no training data".into()))?;
    let (n_u, n_y) = (first.n_u(), first.n_y());
    if let LossSettings::CrossEntropy { .. } = e.loss {
        if data.train.iter().any(|t| t.outputs.iter().any(|&v| !(0.0..=1.0).contains(&v))) {
            return Err(Failure::Data("cross-entropy loss needs outputs in [0, 1]".into()));
        }
    }
    let scaling = e
        .standardize
        .then(|| Scaling::fit(&data.train, matches!(e.loss, LossSettings::Mse { .. })));
    let window = e.model.encoder.as_ref().map(|enc| (enc.n_a, enc.n_b));
    let prepared: Vec<Trace<f64>> = data
        .train
        .iter()
        .map(|t| {
            let t = scaling.as_ref().map_or_else(|| t.clone(), |s| s.forward(t));
            match window {
                Some((a, b)) => t.build_v0(a, b).map_err(Failure::from),
                None => Ok(t),
            }
        })
        .collect::<Result<_, _>>()?;
    let train_set = Dataset::new(prepared)?;
    let spec = build_spec(e, n_u, n_y)?;

    let loss = match e.loss {
        LossSettings::Mse { scale } => OutputLoss::mse(scale.unwrap_or(1.0 / train_set.total_samples() as f64)),
        LossSettings::CrossEntropy { eps } => OutputLoss::cross_entropy(eps),
    };
    let reg = SmoothRegularizer::l2(e.rho_x, e.rho_theta);
    let mut problem = TrainingProblem::new(&spec, &train_set, loss, reg)?;
    let z0 = init_decision(&problem, e.sigma0, e.seed)?;
    let n_theta = problem.layout().theta_range().len();

    let mut history = Vec::new();
    let z = match e.solver {
        SolverKind::AmsGrad => {
            let l1 = match e.nonsmooth {
                NonSmoothKind::None => 0.0,
                NonSmoothKind::L1 { tau_x, tau_y } if tau_x == tau_y => tau_x,
                _ => {
                    return Err(Failure::Config(
                        "amsgrad supports only no penalty or an l1 penalty with tau_x = tau_y".into(),
                    ))
                }
            };
            let mut state = FitState::new(&problem, z0)?;
            run_amsgrad(&problem, &mut state, &nails::solver::AmsGradConfig { l1, ..e.amsgrad })?;
            history.extend(state.history.into_iter().map(HistoryRow::Epoch));
            state.z
        }
        SolverKind::Nails | SolverKind::Nailm => {
            let inner = |epochs: usize| match e.solver {
                SolverKind::Nails => InnerSolver::LineSearch(e.line_search).with_max_epochs(epochs),
                _ => InnerSolver::LevenbergMarquardt(e.lm).with_max_epochs(epochs),
            };
            if e.nonsmooth.is_none() {
                let mut state = FitState::new(&problem, z0)?;
                run_inner(&problem, &mut state, &inner(e.line_search.max_epochs), e.backend)?;
                history.extend(state.history.into_iter().map(HistoryRow::Epoch));
                state.z
            } else {
                let nonsmooth = e.nonsmooth.to_reg(|| Ok(build_state_groups(&spec)?), n_theta)?;
                let cfg = AdmmConfig {
                    rho: e.admm_rho,
                    iterations: e.admm_iterations,
                    inner: inner(e.admm_epochs),
                    backend: e.backend,
                    nonsmooth,
                };
                let res = run_nails(&mut problem, z0, &cfg)?;
                history.extend(res.inner_history.into_iter().map(HistoryRow::Epoch));
                history.extend(res.history.into_iter().map(HistoryRow::Admm));
                res.best_z
            }
        }
    };

    let objective = problem.evaluate(&z)?.total();
    let model = problem.model(&z)?;
    let settings = EvalSettings {
        loss,
        rho_x: e.rho_x,
        pso: e.pso.clone(),
        window,
        scaling,
    };
    Ok(RunOutcome {
        sparsity: sparsity(model.theta().as_slice()),
        model,
        settings,
        objective,
        metrics: Vec::new(),
        history,
    })
}

fn fmt_f(v: f64) -> String {
    format!("{v:.16e}")
}

fn history_csv(rows: &[HistoryRow]) -> String {
    let mut s = format!(
        "{HISTORY_SCHEMA}\nkind,index,value,previous,step,directional,trials,accepted,projected_loss,primal_residual,sparsity,active_groups\n"
    );
    for r in rows {
        match r {
            HistoryRow::Epoch(e) => writeln!(
                s,
                "epoch,{},{},{},{},{},{},{},,,,",
                e.epoch,
                fmt_f(e.value),
                fmt_f(e.previous),
                fmt_f(e.step),
                fmt_f(e.directional),
                e.trials,
                u8::from(e.accepted)
            ),
            HistoryRow::Admm(a) => writeln!(
                s,
                "admm,{},{},,,,,,{},{},{:.6},{}",
                a.iteration,
                fmt_f(a.value),
                fmt_f(a.projected_loss),
                fmt_f(a.primal_residual),
                a.sparsity,
                a.active_groups.map_or(String::new(), |g| g.to_string())
            ),
        }
        .expect("writing to a string");
    }
    s
}

fn timing_csv(rows: &[HistoryRow]) -> String {
    let mut s = String::from("kind,index,elapsed_seconds\n");
    for r in rows {
        let (kind, index, t) = match r {
            HistoryRow::Epoch(e) => ("epoch", e.epoch, e.elapsed),
            HistoryRow::Admm(a) => ("admm", a.iteration, a.elapsed),
        };
        writeln!(s, "{kind},{index},{t:.6}").expect("writing to a string");
    }
    s
}

pub fn metrics_csv(metrics: &[Metrics]) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for m in metrics {
        s.push_str(&m.row());
        s.push('\n');
    }
    s
}

fn write(path: PathBuf, text: &str) -> Result<(), Failure> {
    std::fs::write(&path, text).map_err(|e| Failure::Data(format!("cannot write {}: {e}", path.display())))
}

/// Trains, saves the model, then evaluates the saved file on the training
/// and test traces so the logged metrics are exactly what `eval` reports.
pub fn run_to_dir(e: &Experiment, effective_config: &str, out: &Path) -> Result<RunOutcome, Failure> {
    std::fs::create_dir_all(out).map_err(|err| Failure::Data(format!("cannot create {}: {err}", out.display())))?;
    let started = Instant::now();
    let mut outcome = train(e)?;
    let train_seconds = started.elapsed().as_secs_f64();

    let model_path = out.join("model.txt");
    save_model(&model_path, &outcome.model, &outcome.settings.to_meta())
        .map_err(|err| Failure::Data(format!("cannot write {}: {err}", model_path.display())))?;
    let (model, meta) = load_model::<f64>(&model_path)?;
    let settings = EvalSettings::from_meta(&meta)?;

    let data = load_data(&e.data)?;
    let mut metrics = vec![evaluate(&model, &settings, "train", &data.train)?];
    if !data.test.is_empty() {
        metrics.push(evaluate(&model, &settings, "test", &data.test)?);
    }
    outcome.metrics = metrics;

    write(out.join("config.ini"), effective_config)?;
    write(out.join("history.csv"), &history_csv(&outcome.history))?;
    let mut timing = timing_csv(&outcome.history);
    writeln!(timing, "total,0,{train_seconds:.6}").expect("writing to a string");
    write(out.join("timing.csv"), &timing)?;
    write(out.join("metrics.csv"), &metrics_csv(&outcome.metrics))?;
    Ok(outcome)
}

/// Saves a trace as CSV with an `u1..,y1..` header.
pub fn save_trace(path: &Path, t: &Trace<f64>) -> Result<(), Failure> {
    let header: Vec<String> = (1..=t.n_u())
        .map(|i| format!("u{i}"))
        .chain((1..=t.n_y()).map(|i| format!("y{i}")))
        .collect();
    save_csv(path, t, Some(&header)).map_err(|err| Failure::Data(format!("cannot write {}: {err}", path.display())))
}

/// Runs a sweep in parallel, one output directory per value.
pub fn sweep(
    base: &crate::config::RawConfig,
    sweep: &crate::config::Sweep,
    out: &Path,
) -> Result<String, Failure> {
    let key = base.resolve(&sweep.key)?;
    let runs: Vec<(usize, f64, crate::config::RawConfig)> = sweep
        .values
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let mut c = base.clone();
            c.set(&key, &format!("{v:e}"))?;
            c.typed()?;
            Ok((i, v, c))
        })
        .collect::<Result<_, Failure>>()?;
    let results: Vec<Result<String, Failure>> = runs
        .par_iter()
        .map(|(i, v, c)| {
            let dir = out.join(format!("run_{i:03}"));
            let o = run_to_dir(&c.typed()?, &c.to_ini(), &dir)?;
            let cell = |split: &str| {
                o.metrics.iter().find(|m| m.split == split).map_or(",,".to_string(), |m| {
                    m.row().splitn(3, ',').nth(2).unwrap_or_default().to_string()
                })
            };
            Ok(format!(
                "{i},{v:e},{},{},{},{:.6}",
                cell("train"),
                cell("test"),
                fmt_f(o.objective),
                o.sparsity
            ))
        })
        .collect();
    let mut s = format!("run,{key},train_bfr,train_rmse,train_accuracy,test_bfr,test_rmse,test_accuracy,objective,sparsity\n");
    for r in results {
        s.push_str(&r?);
        s.push('\n');
    }
    write(out.join("sweep.csv"), &s)?;
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scaling_roundtrips_through_metadata() {
        let t = Trace::new(
            DMatrix::from_row_slice(3, 2, &[1.0, 5.0, 2.0, 5.0, 4.0, 5.0]),
            DMatrix::from_row_slice(3, 1, &[0.1, 0.2, 0.6]),
        )
        .unwrap();
        let s = Scaling::fit(std::slice::from_ref(&t), true);
        assert_eq!(s.u[1], (5.0, 1.0));
        let fwd = s.forward(&t);
        assert!(fwd.inputs.column(0).sum().abs() < 1e-12);
        let back = s.outputs_back(&fwd.outputs);
        assert!((back - &t.outputs).abs().max() < 1e-15);

        let settings = EvalSettings {
            loss: OutputLoss::mse(1e-3),
            rho_x: 0.1,
            pso: PsoConfig { population: Some(7), ..Default::default() },
            window: Some((2, 1)),
            scaling: Some(s),
        };
        assert_eq!(EvalSettings::from_meta(&settings.to_meta()).unwrap(), settings);
    }

    #[test]
    fn binary_outputs_are_not_scaled() {
        let t = Trace::new(DMatrix::from_row_slice(2, 1, &[1.0, 3.0]), DMatrix::from_row_slice(2, 1, &[0.0, 1.0])).unwrap();
        let s = Scaling::fit(&[t], false);
        assert_eq!(s.y, vec![(0.0, 1.0)]);
        assert_eq!(s.u, vec![(2.0, 1.0)]);
    }

    #[test]
    fn history_has_versioned_header() {
        let text = history_csv(&[]);
        assert!(text.starts_with(HISTORY_SCHEMA));
        assert_eq!(text.lines().count(), 2);
    }
}
