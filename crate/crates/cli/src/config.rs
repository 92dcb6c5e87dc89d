//! Experiment configuration: INI sections of `key = value` lines on top of
//! built-in defaults, with command-line overrides.

use std::collections::BTreeMap;
use std::path::Path;

use ini::Ini;
use nails::admm::NonSmoothReg;
use nails::initstate::PsoConfig;
use nails::model_io::parse_activation;
use nails::solver::{AmsGradConfig, LineSearchConfig, LmConfig};
use nails::{Activation, Backend};

use crate::Failure;

/// Every accepted key with its default value.
const DEFAULTS: &[(&str, &str)] = &[
    ("data.source", "synthetic"),
    ("data.train", ""),
    ("data.test", ""),
    ("data.has_header", "true"),
    ("data.n_u", "1"),
    ("data.n_y", "1"),
    ("data.n", "2000"),
    ("data.sigma", "0"),
    ("data.seed", "1"),
    ("data.change_probability", "0.9"),
    ("data.standardize", "false"),
    ("model.n_x", "3"),
    ("model.hidden_x", "5"),
    ("model.hidden_y", "5"),
    ("model.activation", "tanh"),
    ("model.output", "sigmoid"),
    ("model.feedthrough", "false"),
    ("model.n_a", "0"),
    ("model.n_b", "0"),
    ("model.encoder_hidden", ""),
    ("loss.kind", "cross_entropy"),
    ("loss.eps", "1e-4"),
    ("loss.scale", "auto"),
    ("regularization.rho_x", "0.1"),
    ("regularization.rho_theta", "0.01"),
    ("nonsmooth.kind", "none"),
    ("nonsmooth.tau", "0"),
    ("nonsmooth.tau_x", ""),
    ("nonsmooth.tau_y", ""),
    ("nonsmooth.tau_g", "0"),
    ("nonsmooth.rho", "1"),
    ("nonsmooth.iterations", "150"),
    ("nonsmooth.epochs", "1"),
    ("nonsmooth.levels", ""),
    ("nonsmooth.level_step", "0.1"),
    ("nonsmooth.level_min", "-0.5"),
    ("nonsmooth.level_max", "0.5"),
    ("solver.kind", "nails"),
    ("solver.backend", "stacked"),
    ("solver.epochs", "150"),
    ("solver.eps_v", "1e-6"),
    ("solver.c1", "1e-4"),
    ("solver.sigma", "0.5"),
    ("solver.n_sigma", "20"),
    ("solver.lambda0", "100"),
    ("solver.c2", "1.5"),
    ("solver.c3", "5"),
    ("solver.n_lambda", "20"),
    ("solver.lr", "0.01"),
    ("solver.beta1", "0.9"),
    ("solver.beta2", "0.999"),
    ("solver.adam_eps", "1e-8"),
    ("init.sigma0", "0.15"),
    ("init.seed", "0"),
    ("x0.population", "auto"),
    ("x0.lower", "-3"),
    ("x0.upper", "3"),
    ("x0.horizon", "100"),
    ("x0.iterations", "50"),
    ("x0.inertia", "0.7"),
    ("x0.cognitive", "1.5"),
    ("x0.social", "1.5"),
    ("x0.seed", "0"),
];

/// Raw configuration as `section.key -> value`.
#[derive(Debug, Clone, PartialEq)]
pub struct RawConfig {
    values: BTreeMap<String, String>,
}

impl Default for RawConfig {
    fn default() -> Self {
        RawConfig {
            values: DEFAULTS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }
}

/// Drops a `; comment` or `# comment` at the start or after whitespace.
fn strip_comment(v: &str) -> &str {
    let cut = v
        .char_indices()
        .find(|&(i, c)| (c == ';' || c == '#') && (i == 0 || v[..i].ends_with(char::is_whitespace)))
        .map_or(v.len(), |(i, _)| i);
    v[..cut].trim()
}

impl RawConfig {
    pub fn from_file(path: &Path) -> Result<Self, Failure> {
        let ini = Ini::load_from_file(path).map_err(|e| Failure::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = RawConfig::default();
        for (section, props) in &ini {
            for (k, v) in props.iter() {
                let key = match section {
                    Some(s) => format!("{s}.{k}"),
                    None => k.to_string(),
                };
                cfg.set(&key, strip_comment(v))
                    .map_err(|e| Failure::Config(format!("{}: {}", path.display(), e.message())))?;
            }
        }
        Ok(cfg)
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or("")
    }

    /// Resolves a full `section.key` or a bare key that is unique across sections.
    pub fn resolve(&self, key: &str) -> Result<String, Failure> {
        if self.values.contains_key(key) {
            return Ok(key.to_string());
        }
        let matches: Vec<&String> = self
            .values
            .keys()
            .filter(|k| k.rsplit_once('.').is_some_and(|(_, tail)| tail == key))
            .collect();
        match matches.as_slice() {
            [one] => Ok((*one).clone()),
            [] => Err(Failure::Config(format!("unknown configuration key {key:?}"))),
            _ => Err(Failure::Config(format!("ambiguous configuration key {key:?}, use section.key"))),
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), Failure> {
        let key = self.resolve(key)?;
        self.values.insert(key, value.trim().to_string());
        Ok(())
    }

    fn parse<V: std::str::FromStr>(&self, key: &str) -> Result<V, Failure> {
        let raw = self.get(key);
        raw.parse()
            .map_err(|_| Failure::Config(format!("invalid value {raw:?} for {key}")))
    }

    fn list<V: std::str::FromStr>(&self, key: &str) -> Result<Vec<V>, Failure> {
        let raw = self.get(key);
        raw.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map_err(|_| Failure::Config(format!("invalid list entry {s:?} for {key}"))))
            .collect()
    }

    fn paths(&self, key: &str) -> Vec<String> {
        self.get(key)
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(str::to_string)
            .collect()
    }

    fn activation(&self, key: &str) -> Result<Activation<f64>, Failure> {
        let raw = self.get(key);
        parse_activation(raw).ok_or_else(|| Failure::Config(format!("unknown activation {raw:?} for {key}")))
    }

    fn optional_f64(&self, key: &str, fallback: f64) -> Result<f64, Failure> {
        if self.get(key).is_empty() {
            Ok(fallback)
        } else {
            self.parse(key)
        }
    }

    /// Lines of the effective configuration in INI form, sorted by key.
    pub fn to_ini(&self) -> String {
        let mut out = String::new();
        let mut current = "";
        for (k, v) in &self.values {
            let (section, key) = k.split_once('.').unwrap_or(("", k));
            if section != current {
                out.push_str(&format!("{}[{section}]\n", if current.is_empty() { "" } else { "\n" }));
                current = section;
            }
            out.push_str(&format!("{key} = {v}\n"));
        }
        out
    }

    pub fn typed(&self) -> Result<Experiment, Failure> {
        let data = match self.get("data.source") {
            "synthetic" => DataSource::Synthetic {
                n: self.parse("data.n")?,
                sigma: self.parse("data.sigma")?,
                seed: self.parse("data.seed")?,
                change_probability: self.parse("data.change_probability")?,
            },
            "csv" => {
                let train = self.paths("data.train");
                if train.is_empty() {
                    return Err(Failure::Config("data.source = csv needs data.train".into()));
                }
                DataSource::Csv {
                    train,
                    test: self.paths("data.test"),
                    has_header: self.parse("data.has_header")?,
                    n_u: self.parse("data.n_u")?,
                    n_y: self.parse("data.n_y")?,
                }
            }
            other => return Err(Failure::Config(format!("unknown data source {other:?}"))),
        };

        let n_a: usize = self.parse("model.n_a")?;
        let n_b: usize = self.parse("model.n_b")?;
        let model = ModelSettings {
            n_x: self.parse("model.n_x")?,
            hidden_x: self.list("model.hidden_x")?,
            hidden_y: self.list("model.hidden_y")?,
            activation: self.activation("model.activation")?,
            output: self.activation("model.output")?,
            feedthrough: self.parse("model.feedthrough")?,
            encoder: (n_a + n_b > 0).then_some(EncoderSettings {
                n_a,
                n_b,
                hidden: self.list("model.encoder_hidden").unwrap_or_default(),
            }),
        };
        if model.encoder.is_some() {
            self.list::<usize>("model.encoder_hidden")?;
        }

        let loss = match self.get("loss.kind") {
            "mse" => LossSettings::Mse {
                scale: match self.get("loss.scale") {
                    "auto" => None,
                    _ => Some(self.parse("loss.scale")?),
                },
            },
            "cross_entropy" => LossSettings::CrossEntropy {
                eps: self.parse("loss.eps")?,
            },
            other => return Err(Failure::Config(format!("unknown loss {other:?}"))),
        };

        let tau: f64 = self.parse("nonsmooth.tau")?;
        let tau_x = self.optional_f64("nonsmooth.tau_x", tau)?;
        let tau_y = self.optional_f64("nonsmooth.tau_y", tau)?;
        let nonsmooth = match self.get("nonsmooth.kind") {
            "none" => NonSmoothKind::None,
            "l1" => NonSmoothKind::L1 { tau_x, tau_y },
            "l0" => NonSmoothKind::L0 { tau_x, tau_y },
            "group" => NonSmoothKind::Group {
                tau_g: self.parse("nonsmooth.tau_g")?,
            },
            "quantize" => {
                let mut levels: Vec<f64> = self.list("nonsmooth.levels")?;
                if levels.is_empty() {
                    let step: f64 = self.parse("nonsmooth.level_step")?;
                    let lo: f64 = self.parse("nonsmooth.level_min")?;
                    let hi: f64 = self.parse("nonsmooth.level_max")?;
                    if !(step > 0.0) || !(lo <= hi) {
                        return Err(Failure::Config("quantization needs level_step > 0 and level_min <= level_max".into()));
                    }
                    let (k0, k1) = ((lo / step).ceil() as i64, (hi / step).floor() as i64);
                    levels = (k0..=k1).map(|k| k as f64 * step).collect();
                }
                levels.sort_by(f64::total_cmp);
                NonSmoothKind::Quantize { levels }
            }
            other => return Err(Failure::Config(format!("unknown nonsmooth kind {other:?}"))),
        };

        let epochs: usize = self.parse("solver.epochs")?;
        let eps_v: f64 = self.parse("solver.eps_v")?;
        let line_search = LineSearchConfig {
            c1: self.parse("solver.c1")?,
            sigma: self.parse("solver.sigma")?,
            n_sigma: self.parse("solver.n_sigma")?,
            eps_v,
            max_epochs: epochs,
        };
        let lm = LmConfig {
            lambda0: self.parse("solver.lambda0")?,
            c2: self.parse("solver.c2")?,
            c3: self.parse("solver.c3")?,
            n_lambda: self.parse("solver.n_lambda")?,
            eps_v,
            max_epochs: epochs,
        };
        let amsgrad = AmsGradConfig {
            lr: self.parse("solver.lr")?,
            beta1: self.parse("solver.beta1")?,
            beta2: self.parse("solver.beta2")?,
            eps: self.parse("solver.adam_eps")?,
            max_epochs: epochs,
            l1: 0.0,
        };
        let solver = match self.get("solver.kind") {
            "nails" => SolverKind::Nails,
            "nailm" => SolverKind::Nailm,
            "amsgrad" => SolverKind::AmsGrad,
            other => return Err(Failure::Config(format!("unknown solver {other:?}"))),
        };
        let backend = match self.get("solver.backend") {
            "stacked" => Backend::Stacked,
            "normal" => Backend::Normal,
            "rls" => Backend::Rls,
            other => return Err(Failure::Config(format!("unknown backend {other:?}"))),
        };

        let pso = PsoConfig {
            population: match self.get("x0.population") {
                "auto" => None,
                _ => Some(self.parse("x0.population")?),
            },
            lower: self.parse("x0.lower")?,
            upper: self.parse("x0.upper")?,
            horizon: self.parse("x0.horizon")?,
            iterations: self.parse("x0.iterations")?,
            inertia: self.parse("x0.inertia")?,
            cognitive: self.parse("x0.cognitive")?,
            social: self.parse("x0.social")?,
            seed: self.parse("x0.seed")?,
        };
        if pso.population_for(model.n_x) < 2 || !(pso.lower < pso.upper) {
            return Err(Failure::Config("x0 search needs population >= 2 and lower < upper".into()));
        }

        Ok(Experiment {
            data,
            standardize: self.parse("data.standardize")?,
            model,
            loss,
            rho_x: self.parse("regularization.rho_x")?,
            rho_theta: self.parse("regularization.rho_theta")?,
            nonsmooth,
            admm_rho: self.parse("nonsmooth.rho")?,
            admm_iterations: self.parse("nonsmooth.iterations")?,
            admm_epochs: self.parse("nonsmooth.epochs")?,
            solver,
            backend,
            line_search,
            lm,
            amsgrad,
            sigma0: self.parse("init.sigma0")?,
            seed: self.parse("init.seed")?,
            pso,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synthetic {
        n: usize,
        sigma: f64,
        seed: u64,
        change_probability: f64,
    },
    Csv {
        train: Vec<String>,
        test: Vec<String>,
        has_header: bool,
        n_u: usize,
        n_y: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderSettings {
    pub n_a: usize,
    pub n_b: usize,
    pub hidden: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSettings {
    pub n_x: usize,
    pub hidden_x: Vec<usize>,
    pub hidden_y: Vec<usize>,
    pub activation: Activation<f64>,
    pub output: Activation<f64>,
    pub feedthrough: bool,
    pub encoder: Option<EncoderSettings>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossSettings {
    /// `None` scales by one over the number of training samples.
    Mse { scale: Option<f64> },
    CrossEntropy { eps: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub enum NonSmoothKind {
    None,
    L1 { tau_x: f64, tau_y: f64 },
    L0 { tau_x: f64, tau_y: f64 },
    Group { tau_g: f64 },
    Quantize { levels: Vec<f64> },
}

impl NonSmoothKind {
    pub fn is_none(&self) -> bool {
        matches!(self, NonSmoothKind::None)
    }

    /// The library penalty; state groups and quantized indices need the
    /// model structure.
    pub fn to_reg(&self, groups: impl FnOnce() -> Result<Vec<Vec<usize>>, Failure>, n_theta: usize) -> Result<NonSmoothReg<f64>, Failure> {
        Ok(match self {
            NonSmoothKind::None => NonSmoothReg::None,
            NonSmoothKind::L1 { tau_x, tau_y } => NonSmoothReg::L1 { tau_x: *tau_x, tau_y: *tau_y },
            NonSmoothKind::L0 { tau_x, tau_y } => NonSmoothReg::L0 { tau_x: *tau_x, tau_y: *tau_y },
            NonSmoothKind::Group { tau_g } => NonSmoothReg::GroupLasso { tau_g: *tau_g, groups: groups()? },
            NonSmoothKind::Quantize { levels } => NonSmoothReg::Quantize {
                levels: levels.clone(),
                indices: (0..n_theta).collect(),
            },
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolverKind {
    Nails,
    Nailm,
    AmsGrad,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Experiment {
    pub data: DataSource,
    pub standardize: bool,
    pub model: ModelSettings,
    pub loss: LossSettings,
    pub rho_x: f64,
    pub rho_theta: f64,
    pub nonsmooth: NonSmoothKind,
    pub admm_rho: f64,
    pub admm_iterations: usize,
    pub admm_epochs: usize,
    pub solver: SolverKind,
    pub backend: Backend,
    pub line_search: LineSearchConfig<f64>,
    pub lm: LmConfig<f64>,
    pub amsgrad: AmsGradConfig<f64>,
    pub sigma0: f64,
    pub seed: u64,
    pub pso: PsoConfig,
}

/// A parsed `KEY=START:STOP:{lin|log}:COUNT` sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct Sweep {
    pub key: String,
    pub values: Vec<f64>,
}

impl Sweep {
    pub fn parse(spec: &str) -> Result<Self, Failure> {
        let bad = || Failure::Config(format!("invalid sweep {spec:?}, expected KEY=START:STOP:lin|log:COUNT"));
        let (key, range) = spec.split_once('=').ok_or_else(bad)?;
        let parts: Vec<&str> = range.split(':').collect();
        let [start, stop, scale, count] = parts.as_slice() else {
            return Err(bad());
        };
        let start: f64 = start.parse().map_err(|_| bad())?;
        let stop: f64 = stop.parse().map_err(|_| bad())?;
        let count: usize = count.parse().map_err(|_| bad())?;
        if count == 0 || !start.is_finite() || !stop.is_finite() {
            return Err(bad());
        }
        let frac = |i: usize| if count == 1 { 0.0 } else { i as f64 / (count - 1) as f64 };
        let values = match *scale {
            "lin" => (0..count).map(|i| start + (stop - start) * frac(i)).collect(),
            "log" => {
                if !(start > 0.0 && stop > 0.0) {
                    return Err(Failure::Config(format!("log sweep needs positive bounds in {spec:?}")));
                }
                let (a, b) = (start.ln(), stop.ln());
                (0..count).map(|i| (a + (b - a) * frac(i)).exp()).collect()
            }
            _ => return Err(bad()),
        };
        Ok(Sweep {
            key: key.trim().to_string(),
            values,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inline_comments_are_ignored() {
        assert_eq!(strip_comment("3   ; short"), "3");
        assert_eq!(strip_comment("a.csv,b.csv # two files"), "a.csv,b.csv");
        assert_eq!(strip_comment("; only a comment"), "");
        assert_eq!(strip_comment("x;y"), "x;y");
    }

    #[test]
    fn defaults_parse() {
        let e = RawConfig::default().typed().unwrap();
        assert_eq!(e.model.n_x, 3);
        assert_eq!(e.model.hidden_x, vec![5]);
        assert_eq!(e.loss, LossSettings::CrossEntropy { eps: 1e-4 });
        assert_eq!(e.line_search.n_sigma, 20);
        assert_eq!(e.lm.n_lambda, 20);
        assert_eq!(e.pso, PsoConfig::default());
        assert!(e.nonsmooth.is_none());
    }

    #[test]
    fn bare_keys_resolve_when_unique() {
        let mut c = RawConfig::default();
        c.set("tau", "0.5").unwrap();
        assert_eq!(c.get("nonsmooth.tau"), "0.5");
        assert!(matches!(c.set("seed", "3"), Err(Failure::Config(_))));
        assert!(matches!(c.set("bogus", "3"), Err(Failure::Config(_))));
        c.set("init.seed", "3").unwrap();
        assert_eq!(c.typed().unwrap().seed, 3);
    }

    #[test]
    fn tau_defaults_to_both_blocks() {
        let mut c = RawConfig::default();
        c.set("nonsmooth.kind", "l1").unwrap();
        c.set("tau", "0.2").unwrap();
        c.set("tau_y", "0.4").unwrap();
        assert_eq!(c.typed().unwrap().nonsmooth, NonSmoothKind::L1 { tau_x: 0.2, tau_y: 0.4 });
    }

    #[test]
    fn quantization_levels_from_range() {
        let mut c = RawConfig::default();
        c.set("nonsmooth.kind", "quantize").unwrap();
        let NonSmoothKind::Quantize { levels } = c.typed().unwrap().nonsmooth else {
            panic!()
        };
        assert_eq!(levels.len(), 11);
        assert_eq!(levels[0], -0.5);
        assert_eq!(levels[10], 0.5);
        assert!(levels.contains(&0.0));
    }

    #[test]
    fn sweeps_enumerate() {
        let s = Sweep::parse("tau=1e-4:20:log:8").unwrap();
        assert_eq!(s.key, "tau");
        assert_eq!(s.values.len(), 8);
        assert!((s.values[0] - 1e-4).abs() < 1e-16);
        assert!((s.values[7] - 20.0).abs() < 1e-12);
        let ratio = s.values[1] / s.values[0];
        assert!(s.values.windows(2).all(|w| (w[1] / w[0] - ratio).abs() < 1e-9));
        assert_eq!(Sweep::parse("rho=0:1:lin:3").unwrap().values, vec![0.0, 0.5, 1.0]);
        assert_eq!(Sweep::parse("rho=2:9:lin:1").unwrap().values, vec![2.0]);
        for bad in ["tau", "tau=1:2:cubic:3", "tau=0:1:log:3", "tau=1:2:lin:0", "tau=a:2:lin:2"] {
            assert!(Sweep::parse(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn ini_file_overrides_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ini");
        std::fs::write(&path, "[model]\nn_x = 2\nhidden_x = 4, 3\n[solver]\nkind = nailm\n").unwrap();
        let e = RawConfig::from_file(&path).unwrap().typed().unwrap();
        assert_eq!(e.model.n_x, 2);
        assert_eq!(e.model.hidden_x, vec![4, 3]);
        assert_eq!(e.solver, SolverKind::Nailm);

        std::fs::write(&path, "[model]\ncolour = red\n").unwrap();
        assert!(matches!(RawConfig::from_file(&path), Err(Failure::Config(_))));
        let missing = dir.path().join("nope.ini");
        match RawConfig::from_file(&missing) {
            Err(Failure::Config(m)) => assert!(m.contains("nope.ini")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn effective_config_roundtrips() {
        let mut c = RawConfig::default();
        c.set("tau", "0.25").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("eff.ini");
        std::fs::write(&path, c.to_ini()).unwrap();
        assert_eq!(RawConfig::from_file(&path).unwrap(), c);
    }
}
