//! `nails`: train, evaluate and check recurrent state-space models.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod config;
mod experiment;
mod generate;
mod gradcheck;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use config::{RawConfig, Sweep};
use generate::BinaryRequest;

/// A failed command, classified by exit code.
#[derive(Debug)]
pub enum Failure {
    /// Bad configuration or arguments (exit 2).
    Config(String),
    /// Unreadable, unwritable or inconsistent data (exit 3).
    Data(String),
    /// The numerical procedure failed (exit 4).
    Numeric(String),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Data(_) => 3,
            Failure::Numeric(_) => 4,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            Failure::Config(m) | Failure::Data(m) | Failure::Numeric(m) => m,
        }
    }
}

impl From<nails::Error> for Failure {
    fn from(e: nails::Error) -> Self {
        let m = e.to_string();
        match e {
            nails::Error::Config(_) => Failure::Config(m),
            e if e.is_numeric() => Failure::Numeric(m),
            nails::Error::Admm { source, .. } => match Failure::from(*source) {
                Failure::Config(_) => Failure::Config(m),
                Failure::Data(_) => Failure::Data(m),
                Failure::Numeric(_) => Failure::Numeric(m),
            },
            _ => Failure::Data(m),
        }
    }
}

#[derive(Parser)]
#[command(name = "nails", version, about = "Recurrent neural state-space model training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SolverArg {
    Nails,
    Nailm,
    Amsgrad,
}

#[derive(Clone, Copy, ValueEnum)]
enum GeneratorKind {
    Binary,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write its artifacts.
    Train {
        /// INI configuration file; built-in defaults otherwise.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Seed for the initial weights.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum)]
        solver: Option<SolverArg>,
        /// Override a configuration entry, e.g. `--set nonsmooth.tau=0.1`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Repeat the run over a range: KEY=START:STOP:{lin|log}:COUNT.
        #[arg(long)]
        sweep: Option<String>,
        /// Standardize inputs (and non-binary outputs) with training statistics.
        #[arg(long)]
        standardize: bool,
        #[arg(long, default_value = "nails-out")]
        out: PathBuf,
    },
    /// Evaluate a saved model on CSV data.
    Eval {
        #[arg(long)]
        model: PathBuf,
        /// One CSV file per trace, inputs then outputs.
        #[arg(long, required = true, num_args = 1..)]
        data: Vec<PathBuf>,
        /// The CSV files have no header row.
        #[arg(long)]
        no_header: bool,
        /// Directory for metrics.csv; printed to stdout otherwise.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare analytic derivatives with finite differences.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, hide = true)]
        corrupt_jacobian: bool,
    },
    /// Generate a synthetic dataset.
    Generate {
        #[arg(value_enum, required_unless_present = "from")]
        kind: Option<GeneratorKind>,
        /// Regenerate from a provenance file written by an earlier run.
        #[arg(long, conflicts_with_all = ["n", "sigma", "seed", "change_probability"])]
        from: Option<PathBuf>,
        #[arg(long)]
        n: Option<usize>,
        /// Process and output noise standard deviation.
        #[arg(long, allow_negative_numbers = true)]
        sigma: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        change_probability: Option<f64>,
        #[arg(long, default_value = "data")]
        out: PathBuf,
    },
}

fn configure_threads() -> Result<(), Failure> {
    let Ok(raw) = std::env::var("NAILS_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::Config(format!("NAILS_THREADS must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::Config(format!("cannot configure {n} threads: {e}")))
}

fn train(
    config: Option<PathBuf>,
    seed: Option<u64>,
    solver: Option<SolverArg>,
    set: Vec<String>,
    sweep: Option<String>,
    standardize: bool,
    out: PathBuf,
) -> Result<(), Failure> {
    let mut raw = match &config {
        Some(p) => RawConfig::from_file(p)?,
        None => RawConfig::default(),
    };
    for entry in &set {
        let (k, v) = entry
            .split_once('=')
            .ok_or_else(|| Failure::Config(format!("expected KEY=VALUE, got {entry:?}")))?;
        raw.set(k.trim(), v)?;
    }
    if let Some(s) = seed {
        raw.set("init.seed", &s.to_string())?;
    }
    if let Some(s) = solver {
        let name = match s {
            SolverArg::Nails => "nails",
            SolverArg::Nailm => "nailm",
            SolverArg::Amsgrad => "amsgrad",
        };
        raw.set("solver.kind", name)?;
    }
    if standardize {
        raw.set("data.standardize", "true")?;
    }
    let experiment = raw.typed()?;

    if let Some(spec) = sweep {
        let sweep = Sweep::parse(&spec)?;
        let table = experiment::sweep(&raw, &sweep, &out)?;
        print!("{table}");
        return Ok(());
    }
    let outcome = experiment::run_to_dir(&experiment, &raw.to_ini(), &out)?;
    println!("objective {:.10e}, sparsity {:.2}%", outcome.objective, outcome.sparsity);
    print!("{}", experiment::metrics_csv(&outcome.metrics));
    println!("artifacts written to {}", out.display());
    Ok(())
}

fn eval(model: PathBuf, data: Vec<PathBuf>, no_header: bool, out: Option<PathBuf>) -> Result<(), Failure> {
    let (m, meta) = nails::model_io::load_model::<f64>(&model)
        .map_err(|e| Failure::Data(format!("cannot load model {}: {e}", model.display())))?;
    let settings = experiment::EvalSettings::from_meta(&meta)?;
    let traces = data
        .iter()
        .map(|p| {
            nails::data::load_csv(p, m.spec.n_u(), m.spec.n_y(), !no_header)
                .map_err(|e| Failure::Data(format!("{}: {e}", p.display())))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let metrics = experiment::evaluate(&m, &settings, "eval", &traces)?;
    let text = experiment::metrics_csv(&[metrics]);
    match out {
        Some(dir) => {
            std::fs::create_dir_all(&dir).map_err(|e| Failure::Data(format!("cannot create {}: {e}", dir.display())))?;
            let path = dir.join("metrics.csv");
            std::fs::write(&path, &text).map_err(|e| Failure::Data(format!("cannot write {}: {e}", path.display())))?;
            print!("{text}");
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn gradcheck(config: Option<PathBuf>, seed: u64, corrupt: bool) -> Result<(), Failure> {
    let raw = match &config {
        Some(p) => RawConfig::from_file(p)?,
        None => RawConfig::default(),
    };
    let checks = gradcheck::run(&raw.typed()?, seed, corrupt)?;
    print!("{}", gradcheck::report(&checks));
    if checks.iter().all(gradcheck::Check::passed) {
        Ok(())
    } else {
        Err(Failure::Numeric("derivative check failed".into()))
    }
}

fn generate(
    from: Option<PathBuf>,
    n: Option<usize>,
    sigma: Option<f64>,
    seed: Option<u64>,
    change_probability: Option<f64>,
    out: PathBuf,
) -> Result<(), Failure> {
    let req = match from {
        Some(p) => BinaryRequest::from_provenance(&p)?,
        None => BinaryRequest {
            n: n.unwrap_or(2000),
            sigma: sigma.unwrap_or(0.0),
            seed: seed.unwrap_or(0),
            change_probability: change_probability.unwrap_or(0.9),
        },
    };
    let data = req.write(&out)?;
    println!(
        "wrote {} training and {} test samples to {}",
        data.train.len(),
        data.test.len(),
        out.display()
    );
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    configure_threads()?;
    match cli.command {
        Command::Train {
            config,
            seed,
            solver,
            set,
            sweep,
            standardize,
            out,
        } => train(config, seed, solver, set, sweep, standardize, out),
        Command::Eval {
            model,
            data,
            no_header,
            out,
        } => eval(model, data, no_header, out),
        Command::Gradcheck {
            config,
            seed,
            corrupt_jacobian,
        } => gradcheck(config, seed, corrupt_jacobian),
        Command::Generate {
            kind: _,
            from,
            n,
            sigma,
            seed,
            change_probability,
            out,
        } => generate(from, n, sigma, seed, change_probability, out),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
