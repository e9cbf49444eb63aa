//! INI-style experiment configuration.
//!
//! ```text
//! experiment = ex3
//! filter = engsf
//! N = 200
//! seeds = 1..21
//!
//! [obs]
//! every = 50
//! ```
//!
//! Keys inside a `[section]` are addressed as `section.key`. Comments start
//! with `#` (anywhere on a line) or `;` (at line start). Unknown keys are
//! rejected.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use engsf_core::engsf::BandwidthRule;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid value for `{field}`: {message}")]
    Validation { field: String, message: String },
}

impl ConfigError {
    fn invalid(field: &str, message: impl Into<String>) -> Self {
        ConfigError::Validation {
            field: field.to_string(),
            message: message.into(),
        }
    }

    /// The offending field for validation errors.
    pub fn field(&self) -> Option<&str> {
        match self {
            ConfigError::Validation { field, .. } => Some(field),
            ConfigError::Parse { .. } => None,
        }
    }
}

macro_rules! named_enum {
    ($(#[$meta:meta])* $name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            pub fn name(self) -> &'static str {
                match self {
                    $($name::$variant => $text),+
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.name())
            }
        }

        impl FromStr for $name {
            type Err = String;

            fn from_str(s: &str) -> Result<Self, String> {
                match s {
                    $($text => Ok($name::$variant),)+
                    other => Err(format!(
                        "unknown value `{other}`, expected one of: {}",
                        [$($text),+].join(", ")
                    )),
                }
            }
        }
    };
}

named_enum!(
    /// Benchmark problem.
    Experiment {
        Ex1 => "ex1",
        Ex2 => "ex2",
        Ex3 => "ex3",
        Ex4 => "ex4",
        Custom => "custom",
    }
);

named_enum!(
    FilterKind {
        Engsf => "engsf",
        Enkf => "enkf",
        EnkfAppendix => "enkf_appendix",
        Ensrf => "ensrf",
        Sir => "sir",
    }
);

named_enum!(
    ModelKind {
        DoubleWell => "double-well",
        Lorenz63 => "lorenz63",
        Lorenz95 => "lorenz95",
    }
);

named_enum!(
    /// Run-length presets for the long benchmarks.
    Preset {
        Full => "full",
        Short => "short",
    }
);

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub dim: usize,
    pub dt: f64,
    /// Noise amplitude of the double-well SDE.
    pub kappa: f64,
    pub gamma: f64,
    pub rho: f64,
    pub beta: f64,
    pub forcing: f64,
    /// Per-unit-time noise variance of each component (Lorenz models).
    pub noise_var: Vec<f64>,
    pub x0: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObsConfig {
    /// Diagonal observation noise variance.
    pub var: f64,
    /// Model steps between observations.
    pub every: usize,
    /// Observed value for the static problem.
    pub datum: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InitConfig {
    pub mean: Vec<f64>,
    pub var: f64,
}

/// Two-mode prior of the static problem.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorConfig {
    pub modes: Vec<f64>,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub steps: usize,
    /// Truth-only steps before filtering starts.
    pub spinup: usize,
    /// Leading RMSE entries excluded from the time average.
    pub skip: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridConfig {
    pub points: usize,
    pub lower: f64,
    pub upper: f64,
    /// Time of the posterior snapshot for dynamic 1-D runs.
    pub time: f64,
    /// Particles in the SIR reference filter (0 disables it).
    pub reference_n: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    pub filter: FilterKind,
    pub n: usize,
    pub seeds: Vec<u64>,
    pub bandwidth: BandwidthRule,
    pub preset: Preset,
    pub output: PathBuf,
    pub model: ModelConfig,
    pub obs: ObsConfig,
    pub init: InitConfig,
    pub prior: PriorConfig,
    pub run: RunConfig,
    pub grid: GridConfig,
}

/// Every accepted key, in canonical order.
pub const KEYS: &[&str] = &[
    "experiment",
    "filter",
    "N",
    "seeds",
    "bandwidth",
    "preset",
    "output",
    "model.kind",
    "model.dim",
    "model.dt",
    "model.kappa",
    "model.gamma",
    "model.rho",
    "model.beta",
    "model.forcing",
    "model.noise_var",
    "model.x0",
    "obs.var",
    "obs.every",
    "obs.datum",
    "init.mean",
    "init.var",
    "prior.modes",
    "prior.std",
    "run.steps",
    "run.spinup",
    "run.skip",
    "grid.points",
    "grid.lower",
    "grid.upper",
    "grid.time",
    "grid.reference_n",
];

const L63_X0: [f64; 3] = [1.508870, -1.531271, 25.46091];

fn model_defaults(kind: ModelKind) -> ModelConfig {
    let mut m = ModelConfig {
        kind,
        dim: 1,
        dt: 0.01,
        kappa: 0.7,
        gamma: 10.0,
        rho: 28.0,
        beta: 8.0 / 3.0,
        forcing: 8.0,
        noise_var: vec![0.0],
        x0: vec![0.8],
    };
    match kind {
        ModelKind::DoubleWell => {}
        ModelKind::Lorenz63 => {
            m.dim = 3;
            m.noise_var = vec![2.0, 12.13, 12.31];
            m.x0 = L63_X0.to_vec();
        }
        ModelKind::Lorenz95 => {
            m.dim = 40;
            m.noise_var = vec![25.0];
            // filled with the standard perturbed state during validation
            m.x0 = Vec::new();
        }
    }
    m
}

/// All components at `forcing` except the twentieth, which is 0.1% larger.
pub fn lorenz95_x0(dim: usize, forcing: f64) -> Vec<f64> {
    let mut x = vec![forcing; dim];
    if dim >= 20 {
        x[19] = 1.001 * forcing;
    } else if let Some(last) = x.last_mut() {
        *last = 1.001 * forcing;
    }
    x
}

impl ExperimentConfig {
    /// Defaults for an experiment; `custom` takes the template of `kind`.
    pub fn defaults(experiment: Experiment, kind: Option<ModelKind>) -> Self {
        let kind = kind.unwrap_or(match experiment {
            Experiment::Ex1 | Experiment::Ex2 => ModelKind::DoubleWell,
            Experiment::Ex3 | Experiment::Custom => ModelKind::Lorenz63,
            Experiment::Ex4 => ModelKind::Lorenz95,
        });
        let mut cfg = ExperimentConfig {
            experiment,
            filter: FilterKind::Engsf,
            n: 100,
            seeds: vec![1],
            bandwidth: BandwidthRule::Modified,
            preset: Preset::Full,
            output: PathBuf::from("results"),
            model: model_defaults(kind),
            obs: ObsConfig {
                var: 0.1,
                every: 50,
                datum: 0.0,
            },
            init: InitConfig {
                mean: vec![0.8],
                var: 0.1,
            },
            prior: PriorConfig {
                modes: vec![-1.5, 1.5],
                std: 0.1,
            },
            run: RunConfig {
                steps: 1000,
                spinup: 0,
                skip: 0,
            },
            grid: GridConfig {
                points: 1000,
                lower: -2.5,
                upper: 2.5,
                time: 4.0,
                reference_n: 10_000,
            },
        };
        match kind {
            ModelKind::DoubleWell => {}
            ModelKind::Lorenz63 => {
                cfg.n = 200;
                cfg.obs.var = 6.25;
                cfg.obs.every = 50;
                cfg.init.mean = L63_X0.to_vec();
                cfg.init.var = 4.0;
                cfg.run.steps = 10_000;
            }
            ModelKind::Lorenz95 => {
                cfg.obs.var = 2.0;
                cfg.obs.every = 5;
                cfg.init.mean = vec![2.0];
                cfg.init.var = 2.0;
                cfg.run.spinup = 2000;
                cfg.run.steps = 5000;
            }
        }
        if experiment == Experiment::Ex1 {
            cfg.n = 200;
            cfg.obs.var = 0.01;
            cfg.obs.every = 1;
            cfg.run.steps = 0;
            cfg.grid = GridConfig {
                points: 10_000,
                lower: -4.0,
                upper: 4.0,
                time: 0.0,
                reference_n: 0,
            };
        }
        cfg
    }

    /// True for problems with a one-dimensional state.
    pub fn is_one_dimensional(&self) -> bool {
        self.experiment == Experiment::Ex1 || self.model.dim == 1
    }

    fn apply_preset(&mut self, preset: Preset) {
        self.preset = preset;
        let short = preset == Preset::Short;
        match (self.experiment, self.model.kind) {
            (Experiment::Ex1, _) => {}
            (_, ModelKind::Lorenz63) => self.run.steps = if short { 2000 } else { 10_000 },
            (_, ModelKind::Lorenz95) => {
                self.run.spinup = if short { 200 } else { 2000 };
                self.run.steps = if short { 500 } else { 5000 };
            }
            (_, ModelKind::DoubleWell) => {}
        }
    }

    /// Sets one key from its text value.
    ///
    /// Returns `Ok(false)` for unknown keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool, ConfigError> {
        let v = value.trim();
        match key {
            "experiment" => {
                let e = parse_enum::<Experiment>(key, v)?;
                if e != self.experiment {
                    return Err(ConfigError::invalid(
                        key,
                        "experiment cannot be changed after defaults are applied",
                    ));
                }
            }
            "filter" => self.filter = parse_enum(key, v)?,
            "N" => self.n = parse_num(key, v)?,
            "seed" | "seeds" => self.seeds = parse_seeds(key, v)?,
            "bandwidth" => self.bandwidth = parse_enum(key, v)?,
            "preset" => self.apply_preset(parse_enum(key, v)?),
            "output" => {
                if v.is_empty() {
                    return Err(ConfigError::invalid(key, "empty path"));
                }
                self.output = PathBuf::from(v);
            }
            "model.kind" => {
                let kind = parse_enum::<ModelKind>(key, v)?;
                if kind != self.model.kind {
                    return Err(ConfigError::invalid(
                        key,
                        "model kind cannot be changed after defaults are applied",
                    ));
                }
            }
            "model.dim" => self.model.dim = parse_num(key, v)?,
            "model.dt" => self.model.dt = parse_num(key, v)?,
            "model.kappa" => self.model.kappa = parse_num(key, v)?,
            "model.gamma" => self.model.gamma = parse_num(key, v)?,
            "model.rho" => self.model.rho = parse_num(key, v)?,
            "model.beta" => self.model.beta = parse_num(key, v)?,
            "model.forcing" => self.model.forcing = parse_num(key, v)?,
            "model.noise_var" => self.model.noise_var = parse_list(key, v)?,
            "model.x0" => self.model.x0 = parse_list(key, v)?,
            "obs.var" => self.obs.var = parse_num(key, v)?,
            "obs.every" => self.obs.every = parse_num(key, v)?,
            "obs.datum" => self.obs.datum = parse_num(key, v)?,
            "init.mean" => self.init.mean = parse_list(key, v)?,
            "init.var" => self.init.var = parse_num(key, v)?,
            "prior.modes" => self.prior.modes = parse_list(key, v)?,
            "prior.std" => self.prior.std = parse_num(key, v)?,
            "run.steps" => self.run.steps = parse_num(key, v)?,
            "run.spinup" => self.run.spinup = parse_num(key, v)?,
            "run.skip" => self.run.skip = parse_num(key, v)?,
            "grid.points" => self.grid.points = parse_num(key, v)?,
            "grid.lower" => self.grid.lower = parse_num(key, v)?,
            "grid.upper" => self.grid.upper = parse_num(key, v)?,
            "grid.time" => self.grid.time = parse_num(key, v)?,
            "grid.reference_n" => self.grid.reference_n = parse_num(key, v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Broadcasts single-value vectors to the model dimension and checks
    /// every field.
    pub fn validate(&mut self) -> Result<(), ConfigError> {
        if self.n == 0 {
            return Err(ConfigError::invalid("N", "must be at least 1"));
        }
        if self.seeds.is_empty() {
            return Err(ConfigError::invalid(
                "seeds",
                "at least one seed is required",
            ));
        }
        let mut seen = self.seeds.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.seeds.len() {
            return Err(ConfigError::invalid("seeds", "duplicate seed"));
        }
        if !matches!(self.filter, FilterKind::Engsf | FilterKind::Sir) && self.n < 2 {
            return Err(ConfigError::invalid(
                "N",
                "ensemble Kalman filters need at least 2 members",
            ));
        }
        positive("obs.var", self.obs.var)?;
        finite("obs.datum", self.obs.datum)?;
        if self.experiment == Experiment::Ex1 {
            if self.prior.modes.is_empty() {
                return Err(ConfigError::invalid(
                    "prior.modes",
                    "at least one mode is required",
                ));
            }
            for m in &self.prior.modes {
                finite("prior.modes", *m)?;
            }
            positive("prior.std", self.prior.std)?;
        } else {
            let m = &mut self.model;
            if m.dim == 0 {
                return Err(ConfigError::invalid("model.dim", "must be at least 1"));
            }
            match m.kind {
                ModelKind::DoubleWell if m.dim != 1 => {
                    return Err(ConfigError::invalid(
                        "model.dim",
                        "the double-well model is scalar",
                    ))
                }
                ModelKind::Lorenz63 if m.dim != 3 => {
                    return Err(ConfigError::invalid(
                        "model.dim",
                        "Lorenz63 has three components",
                    ))
                }
                ModelKind::Lorenz95 if m.dim < 4 => {
                    return Err(ConfigError::invalid(
                        "model.dim",
                        "Lorenz95 needs at least four components",
                    ))
                }
                _ => {}
            }
            positive("model.dt", m.dt)?;
            for (name, v) in [
                ("model.kappa", m.kappa),
                ("model.gamma", m.gamma),
                ("model.rho", m.rho),
                ("model.beta", m.beta),
                ("model.forcing", m.forcing),
            ] {
                finite(name, v)?;
            }
            if m.kappa < 0.0 {
                return Err(ConfigError::invalid("model.kappa", "must be nonnegative"));
            }
            let dim = m.dim;
            if m.kind == ModelKind::Lorenz95 && m.x0.is_empty() {
                m.x0 = lorenz95_x0(dim, m.forcing);
            }
            broadcast("model.noise_var", &mut m.noise_var, dim)?;
            broadcast("model.x0", &mut m.x0, dim)?;
            broadcast("init.mean", &mut self.init.mean, dim)?;
            if self.model.noise_var.iter().any(|&v| v < 0.0) {
                return Err(ConfigError::invalid(
                    "model.noise_var",
                    "variances must be nonnegative",
                ));
            }
            positive("init.var", self.init.var)?;
            if self.obs.every == 0 {
                return Err(ConfigError::invalid("obs.every", "must be at least 1"));
            }
            if self.run.steps == 0 {
                return Err(ConfigError::invalid("run.steps", "must be at least 1"));
            }
            if self.run.skip > self.run.steps {
                return Err(ConfigError::invalid("run.skip", "exceeds run.steps"));
            }
            finite("grid.time", self.grid.time)?;
        }
        finite("grid.lower", self.grid.lower)?;
        finite("grid.upper", self.grid.upper)?;
        if self.grid.upper <= self.grid.lower {
            return Err(ConfigError::invalid("grid.upper", "must exceed grid.lower"));
        }
        if self.grid.points < 2 {
            return Err(ConfigError::invalid(
                "grid.points",
                "need at least 2 points",
            ));
        }
        Ok(())
    }

    /// Canonical `key = value` pairs, re-parseable by `parse_config`.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let list = |v: &[f64]| {
            v.iter()
                .map(|x| format!("{x}"))
                .collect::<Vec<_>>()
                .join(",")
        };
        let seeds = self
            .seeds
            .iter()
            .map(|s| s.to_string())
            .collect::<Vec<_>>()
            .join(",");
        let mut out = vec![
            ("experiment", self.experiment.to_string()),
            ("filter", self.filter.to_string()),
            ("N", self.n.to_string()),
            ("seeds", seeds),
            ("bandwidth", self.bandwidth.to_string()),
            ("preset", self.preset.to_string()),
            ("output", self.output.display().to_string()),
        ];
        if self.experiment == Experiment::Ex1 {
            out.extend([
                ("obs.var", format!("{}", self.obs.var)),
                ("obs.datum", format!("{}", self.obs.datum)),
                ("prior.modes", list(&self.prior.modes)),
                ("prior.std", format!("{}", self.prior.std)),
            ]);
        } else {
            let m = &self.model;
            out.extend([
                ("model.kind", m.kind.to_string()),
                ("model.dim", m.dim.to_string()),
                ("model.dt", format!("{}", m.dt)),
            ]);
            match m.kind {
                ModelKind::DoubleWell => out.push(("model.kappa", format!("{}", m.kappa))),
                ModelKind::Lorenz63 => out.extend([
                    ("model.gamma", format!("{}", m.gamma)),
                    ("model.rho", format!("{}", m.rho)),
                    ("model.beta", format!("{}", m.beta)),
                    ("model.noise_var", list(&m.noise_var)),
                ]),
                ModelKind::Lorenz95 => out.extend([
                    ("model.forcing", format!("{}", m.forcing)),
                    ("model.noise_var", list(&m.noise_var)),
                ]),
            }
            out.extend([
                ("model.x0", list(&m.x0)),
                ("obs.var", format!("{}", self.obs.var)),
                ("obs.every", self.obs.every.to_string()),
                ("init.mean", list(&self.init.mean)),
                ("init.var", format!("{}", self.init.var)),
                ("run.steps", self.run.steps.to_string()),
                ("run.spinup", self.run.spinup.to_string()),
                ("run.skip", self.run.skip.to_string()),
                ("grid.time", format!("{}", self.grid.time)),
                ("grid.reference_n", self.grid.reference_n.to_string()),
            ]);
        }
        out.extend([
            ("grid.points", self.grid.points.to_string()),
            ("grid.lower", format!("{}", self.grid.lower)),
            ("grid.upper", format!("{}", self.grid.upper)),
        ]);
        out.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    /// Canonical config text.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.to_pairs() {
            s.push_str(&k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        }
        s
    }
}

fn parse_enum<T: FromStr<Err = String>>(key: &str, v: &str) -> Result<T, ConfigError> {
    v.parse().map_err(|e: String| ConfigError::invalid(key, e))
}

fn parse_num<T: FromStr>(key: &str, v: &str) -> Result<T, ConfigError>
where
    T::Err: fmt::Display,
{
    v.parse()
        .map_err(|e: T::Err| ConfigError::invalid(key, format!("`{v}`: {e}")))
}

fn parse_list(key: &str, v: &str) -> Result<Vec<f64>, ConfigError> {
    let out = v
        .split(',')
        .map(|p| parse_num::<f64>(key, p.trim()))
        .collect::<Result<Vec<_>, _>>()?;
    for x in &out {
        finite(key, *x)?;
    }
    Ok(out)
}

/// Comma-separated seeds; `a..b` expands to the half-open range.
fn parse_seeds(key: &str, v: &str) -> Result<Vec<u64>, ConfigError> {
    let mut out = Vec::new();
    for part in v.split(',').map(str::trim) {
        if let Some((a, b)) = part.split_once("..") {
            let a: u64 = parse_num(key, a.trim())?;
            let b: u64 = parse_num(key, b.trim())?;
            if b <= a {
                return Err(ConfigError::invalid(key, format!("empty range `{part}`")));
            }
            out.extend(a..b);
        } else {
            out.push(parse_num(key, part)?);
        }
    }
    Ok(out)
}

fn finite(key: &str, v: f64) -> Result<(), ConfigError> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(ConfigError::invalid(key, "must be finite"))
    }
}

fn positive(key: &str, v: f64) -> Result<(), ConfigError> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(ConfigError::invalid(key, "must be positive"))
    }
}

fn broadcast(key: &str, v: &mut Vec<f64>, dim: usize) -> Result<(), ConfigError> {
    if v.len() == 1 && dim > 1 {
        *v = vec![v[0]; dim];
    }
    if v.len() != dim {
        return Err(ConfigError::invalid(
            key,
            format!("expected 1 or {dim} values, got {}", v.len()),
        ));
    }
    Ok(())
}

struct Entry {
    line: usize,
    key: String,
    value: String,
}

fn tokenize(text: &str) -> Result<Vec<Entry>, ConfigError> {
    let mut section = String::new();
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let t = raw.split('#').next().unwrap_or_default().trim();
        if t.is_empty() || t.starts_with(';') {
            continue;
        }
        if let Some(rest) = t.strip_prefix('[') {
            let name = rest
                .strip_suffix(']')
                .ok_or_else(|| ConfigError::Parse {
                    line,
                    message: format!("unterminated section header `{t}`"),
                })?
                .trim();
            if !matches!(name, "model" | "obs" | "init" | "prior" | "run" | "grid") {
                return Err(ConfigError::Parse {
                    line,
                    message: format!("unknown section `[{name}]`"),
                });
            }
            section = name.to_string();
            continue;
        }
        let (k, v) = t.split_once('=').ok_or_else(|| ConfigError::Parse {
            line,
            message: format!("expected `key = value`, got `{t}`"),
        })?;
        let k = k.trim();
        if k.is_empty() {
            return Err(ConfigError::Parse {
                line,
                message: "empty key".into(),
            });
        }
        let key = if section.is_empty() {
            k.to_string()
        } else {
            format!("{section}.{k}")
        };
        if !KEYS.contains(&key.as_str()) && key != "seed" {
            return Err(ConfigError::Parse {
                line,
                message: format!("unknown key `{key}`"),
            });
        }
        if out.iter().any(|e: &Entry| e.key == key) {
            return Err(ConfigError::Parse {
                line,
                message: format!("duplicate key `{key}`"),
            });
        }
        out.push(Entry {
            line,
            key,
            value: v.trim().to_string(),
        });
    }
    Ok(out)
}

/// Parses, applies defaults and validates a configuration.
pub fn parse_config(text: &str) -> Result<ExperimentConfig, ConfigError> {
    let entries = tokenize(text)?;
    let find = |key: &str| entries.iter().find(|e| e.key == key);
    let experiment = match find("experiment") {
        Some(e) => parse_enum::<Experiment>("experiment", &e.value)?,
        None => return Err(ConfigError::invalid("experiment", "missing")),
    };
    let kind = match find("model.kind") {
        Some(e) => Some(parse_enum::<ModelKind>("model.kind", &e.value)?),
        None if experiment == Experiment::Custom => {
            return Err(ConfigError::invalid(
                "model.kind",
                "required for custom experiments",
            ))
        }
        None => None,
    };
    if let (Some(k), false) = (kind, experiment == Experiment::Custom) {
        let expected = ExperimentConfig::defaults(experiment, None).model.kind;
        if experiment != Experiment::Ex1 && k != expected {
            return Err(ConfigError::invalid(
                "model.kind",
                format!("{experiment} uses {expected}; use experiment = custom for other models"),
            ));
        }
    }
    let mut cfg = ExperimentConfig::defaults(experiment, kind);
    if let Some(e) = find("preset") {
        cfg.apply_preset(parse_enum("preset", &e.value)?);
    }
    for e in &entries {
        if matches!(e.key.as_str(), "experiment" | "model.kind" | "preset") {
            continue;
        }
        if e.key == "seed" && find("seeds").is_some() {
            return Err(ConfigError::Parse {
                line: e.line,
                message: "both `seed` and `seeds` given".into(),
            });
        }
        if !cfg.set(&e.key, &e.value)? {
            return Err(ConfigError::Parse {
                line: e.line,
                message: format!("unknown key `{}`", e.key),
            });
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_ex1_gets_grid_defaults() {
        let cfg = parse_config("experiment=ex1\nN=200\nseed=1\n").unwrap();
        assert_eq!(cfg.n, 200);
        assert_eq!(cfg.seeds, vec![1]);
        assert_eq!(cfg.grid.points, 10_000);
        assert_eq!((cfg.grid.lower, cfg.grid.upper), (-4.0, 4.0));
        assert_eq!(cfg.obs.var, 0.01);
        assert_eq!(cfg.obs.datum, 0.0);
        assert_eq!(cfg.filter, FilterKind::Engsf);
    }

    #[test]
    fn trailing_comments_are_ignored() {
        let cfg =
            parse_config("# header\nexperiment = ex2 # twin\n[obs] # section\nvar = 0.2#tight\n")
                .unwrap();
        assert_eq!(cfg.experiment, Experiment::Ex2);
        assert_eq!(cfg.obs.var, 0.2);
    }

    #[test]
    fn zero_particles_is_a_validation_error() {
        let err = parse_config("experiment = ex1\nN = 0\n").unwrap_err();
        assert_eq!(err.field(), Some("N"));
    }

    #[test]
    fn unknown_key_is_a_parse_error_with_line() {
        let err = parse_config("experiment = ex1\n\nfoo = 3\n").unwrap_err();
        assert!(matches!(err, ConfigError::Parse { line: 3, .. }), "{err}");
        let err = parse_config("experiment = ex3\n[model]\nfoo = 1\n").unwrap_err();
        assert!(matches!(err, ConfigError::Parse { line: 3, .. }));
    }

    #[test]
    fn ex3_and_ex4_defaults() {
        let c = parse_config("experiment = ex3").unwrap();
        assert_eq!(c.n, 200);
        assert_eq!(c.obs.every, 50);
        assert_eq!(c.obs.var, 6.25);
        assert_eq!(c.model.noise_var, vec![2.0, 12.13, 12.31]);
        assert_eq!(c.init.var, 4.0);
        assert_eq!(c.run.steps, 10_000);

        let c = parse_config("experiment = ex4").unwrap();
        assert_eq!(c.model.dim, 40);
        assert_eq!(c.model.forcing, 8.0);
        assert_eq!(c.obs.every, 5);
        assert_eq!(c.obs.var, 2.0);
        assert_eq!(c.model.noise_var, vec![25.0; 40]);
        assert_eq!(c.model.x0[19], 8.008);
        assert_eq!(c.model.x0[18], 8.0);
        assert_eq!((c.run.spinup, c.run.steps), (2000, 5000));
        let s = parse_config("experiment = ex4\npreset = short").unwrap();
        assert_eq!((s.run.spinup, s.run.steps), (200, 500));
    }

    #[test]
    fn explicit_keys_win_over_presets() {
        let c =
            parse_config("experiment = ex3\n[run]\nsteps = 300\n\n[grid]\npoints=50\n").unwrap();
        assert_eq!(c.run.steps, 300);
        let c = parse_config("[run]\nsteps = 300\n[model]\n[run]\nskip=3\n; c\n# d\n").unwrap_err();
        assert_eq!(c.field(), Some("experiment"));
        let c = parse_config("experiment = ex3\n[run]\nsteps = 300\n").unwrap();
        let d = parse_config("experiment = ex3\npreset = short\n[run]\nsteps = 300\n").unwrap();
        assert_eq!(c.run.steps, d.run.steps);
    }

    #[test]
    fn seeds_accept_lists_and_ranges() {
        let c = parse_config("experiment = ex2\nseeds = 1..4, 10").unwrap();
        assert_eq!(c.seeds, vec![1, 2, 3, 10]);
        assert!(parse_config("experiment = ex2\nseeds = 3..3").is_err());
        assert_eq!(
            parse_config("experiment = ex2\nseeds = 1,1")
                .unwrap_err()
                .field(),
            Some("seeds")
        );
    }

    #[test]
    fn bad_values_name_the_field() {
        for (text, field) in [
            ("experiment = ex2\nfilter = kalman", "filter"),
            ("experiment = ex2\nN = -3", "N"),
            ("experiment = ex2\n[obs]\nvar = 0", "obs.var"),
            ("experiment = ex2\n[model]\ndt = nan", "model.dt"),
            (
                "experiment = ex3\n[model]\nnoise_var = 1,2",
                "model.noise_var",
            ),
            ("experiment = ex3\n[model]\nkind = lorenz95", "model.kind"),
            ("experiment = custom", "model.kind"),
            ("experiment = ex2\nbandwidth = wide", "bandwidth"),
        ] {
            assert_eq!(
                parse_config(text).unwrap_err().field(),
                Some(field),
                "{text}"
            );
        }
    }

    #[test]
    fn malformed_lines_are_parse_errors() {
        assert!(matches!(
            parse_config("experiment = ex2\n[obs\n").unwrap_err(),
            ConfigError::Parse { line: 2, .. }
        ));
        assert!(matches!(
            parse_config("experiment = ex2\njust words\n").unwrap_err(),
            ConfigError::Parse { line: 2, .. }
        ));
        assert!(matches!(
            parse_config("experiment = ex2\n[weird]\n").unwrap_err(),
            ConfigError::Parse { line: 2, .. }
        ));
        assert!(matches!(
            parse_config("experiment = ex2\nN = 3\nN = 4\n").unwrap_err(),
            ConfigError::Parse { line: 3, .. }
        ));
    }

    #[test]
    fn custom_experiment_uses_the_model_template() {
        let c = parse_config("experiment = custom\n[model]\nkind = lorenz95\ndim = 8\n").unwrap();
        assert_eq!(c.model.dim, 8);
        assert_eq!(c.model.x0.len(), 8);
        assert_eq!(c.model.noise_var, vec![25.0; 8]);
        assert_eq!(c.init.mean, vec![2.0; 8]);
    }

    #[test]
    fn canonical_text_round_trips() {
        for text in [
            "experiment = ex1\nN = 500\nseeds = 3,4\n[obs]\ndatum = 0.4\n",
            "experiment = ex2\nfilter = sir\n",
            "experiment = ex3\npreset = short\nbandwidth = silverman\n",
            "experiment = ex4\nfilter = enkf_appendix\n",
        ] {
            let c = parse_config(text).unwrap();
            let again = parse_config(&c.to_text()).unwrap();
            assert_eq!(c, again);
        }
    }
}
