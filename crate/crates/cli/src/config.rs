//! Flat `key = value` run configuration.
//!
//! ```text
//! # comments start with '#'
//! seed = 7
//! tasks = stack-2, sort-3
//! epochs = 20
//! mask_mode = hard
//! ```
//!
//! Precedence, lowest first: built-in defaults, the config file, command-line
//! flags. The seed falls back to `OPAL_SEED` when neither file nor flags set it.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::Serialize;
use topoflow::blockworld::{DemoShape, TaskId};
use topoflow::flow::{IntegratorSpec, Method};
use topoflow::policy::ModelConfig;
use topoflow::trainer::TrainConfig;

pub const SEED_ENV: &str = "OPAL_SEED";

/// Every accepted key, in documentation order.
pub const KEYS: &[&str] = &[
    "seed",
    "out",
    "tasks",
    "n",
    "jitter",
    "n_episodes",
    "integrator",
    "n_steps",
    "lr",
    "batch_size",
    "epochs",
    "lambda1",
    "lambda2",
    "lambda3",
    "tau_alpha",
    "tau_beta",
    "eta_mask",
    "mask_project_every",
    "grad_clip",
    "eps_pd",
    "paper_scale",
    "d_model",
    "n_layers",
    "n_heads",
    "d_ff",
    "k",
    "m",
    "n_cameras",
    "mask_mode",
    "time_conditioning",
];

#[derive(Debug, Clone, PartialEq)]
pub enum ConfigError {
    UnknownKey(String),
    BadValue { key: String, value: String, msg: String },
    Syntax { path: PathBuf, line: usize, text: String },
    Read { path: PathBuf, msg: String },
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigError::UnknownKey(k) => write!(f, "unknown config key `{k}`; valid keys: {}", KEYS.join(", ")),
            ConfigError::BadValue { key, value, msg } => write!(f, "bad value `{value}` for `{key}`: {msg}"),
            ConfigError::Syntax { path, line, text } => {
                write!(f, "{}:{line}: expected `key = value`, got `{text}`", path.display())
            }
            ConfigError::Read { path, msg } => write!(f, "{}: {msg}", path.display()),
        }
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub seed: u64,
    /// Not part of provenance: the same run written elsewhere is the same run.
    #[serde(skip)]
    pub out: PathBuf,
    pub tasks: Vec<TaskId>,
    /// Demonstrations to generate.
    pub n: usize,
    pub jitter: f64,
    /// Evaluation episodes per task.
    pub n_episodes: usize,
    pub integrator: IntegratorSpec,
    pub paper_scale: bool,
    pub train: TrainConfig,
    pub model: ModelConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("topoflow-out"),
            tasks: vec![TaskId::Stack2, TaskId::Sort3],
            n: 2000,
            jitter: 0.01,
            n_episodes: 25,
            integrator: IntegratorSpec::rk4_4(),
            paper_scale: false,
            train: TrainConfig::default(),
            model: ModelConfig::default(),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: fmt::Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::BadValue { key: key.into(), value: value.into(), msg: e.to_string() })
}

impl RunConfig {
    /// Defaults with the seed taken from `OPAL_SEED` when set.
    pub fn from_env() -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        if let Ok(s) = std::env::var(SEED_ENV) {
            cfg.set("seed", s.trim())?;
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let bad = |msg: &str| ConfigError::BadValue { key: key.into(), value: value.into(), msg: msg.into() };
        let t = &mut self.train;
        let m = &mut self.model;
        match key {
            "seed" => self.seed = parse(key, value)?,
            "out" => self.out = PathBuf::from(value),
            "tasks" => {
                self.tasks = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| parse(key, s))
                    .collect::<Result<_, _>>()?;
                if self.tasks.is_empty() {
                    return Err(bad("at least one task is required"));
                }
            }
            "n" => self.n = parse(key, value)?,
            "jitter" => self.jitter = parse(key, value)?,
            "n_episodes" => self.n_episodes = parse(key, value)?,
            "integrator" => {
                let method: Method = parse(key, value)?;
                self.integrator = match method {
                    Method::Rk4 => IntegratorSpec::rk4_4(),
                    Method::Euler => IntegratorSpec::euler_10(),
                };
            }
            "n_steps" => {
                let n: usize = parse(key, value)?;
                self.integrator = IntegratorSpec::steps(self.integrator.method, n).map_err(|e| bad(&e.to_string()))?;
            }
            "lr" => t.lr = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "epochs" => t.epochs = parse(key, value)?,
            "lambda1" => t.lambda1 = parse(key, value)?,
            "lambda2" => t.lambda2 = parse(key, value)?,
            "lambda3" => t.lambda3 = parse(key, value)?,
            "tau_alpha" => t.tau_alpha = parse(key, value)?,
            "tau_beta" => t.tau_beta = parse(key, value)?,
            "eta_mask" => t.eta_mask = if value == "lr" { None } else { Some(parse(key, value)?) },
            "mask_project_every" => t.mask_project_every = parse(key, value)?,
            "grad_clip" => t.grad_clip = parse(key, value)?,
            "eps_pd" => t.eps_pd = parse(key, value)?,
            "paper_scale" => {
                self.paper_scale = parse(key, value)?;
                if self.paper_scale {
                    *t = t.clone().paper_scale();
                }
            }
            "d_model" => m.d_model = parse(key, value)?,
            "n_layers" => m.n_layers = parse(key, value)?,
            "n_heads" => m.n_heads = parse(key, value)?,
            "d_ff" => m.d_ff = parse(key, value)?,
            "k" => m.k = parse(key, value)?,
            "m" => m.m = parse(key, value)?,
            "n_cameras" => m.n_cameras = parse(key, value)?,
            "mask_mode" => m.mask_mode = parse(key, value)?,
            "time_conditioning" => m.time_conditioning = parse(key, value)?,
            _ => return Err(ConfigError::UnknownKey(key.into())),
        }
        m.h = m.k * m.m;
        t.seed = self.seed;
        Ok(())
    }

    /// Applies every `key = value` line of `text`.
    pub fn apply_text(&mut self, text: &str, path: &Path) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                path: path.to_path_buf(),
                line: i + 1,
                text: raw.trim().to_string(),
            })?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Read { path: path.to_path_buf(), msg: e.to_string() })?;
        self.apply_text(&text, path)
    }

    pub fn shape(&self) -> DemoShape {
        DemoShape { k: self.model.k, m: self.model.m, n_cameras: self.model.n_cameras }
    }

    /// The same settings as a config file, suitable for [`RunConfig::apply_text`].
    /// The output directory is left out.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let m = &self.model;
        let tasks: Vec<&str> = self.tasks.iter().map(|t| t.name()).collect();
        let pairs: Vec<(&str, String)> = vec![
            ("seed", self.seed.to_string()),
            ("tasks", tasks.join(", ")),
            ("n", self.n.to_string()),
            ("jitter", self.jitter.to_string()),
            ("n_episodes", self.n_episodes.to_string()),
            ("integrator", self.integrator.method.to_string()),
            ("n_steps", self.integrator.n_steps.to_string()),
            ("lr", t.lr.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("epochs", t.epochs.to_string()),
            ("lambda1", t.lambda1.to_string()),
            ("lambda2", t.lambda2.to_string()),
            ("lambda3", t.lambda3.to_string()),
            ("tau_alpha", t.tau_alpha.to_string()),
            ("tau_beta", t.tau_beta.to_string()),
            ("eta_mask", t.eta_mask.map_or("lr".into(), |e| e.to_string())),
            ("mask_project_every", t.mask_project_every.to_string()),
            ("grad_clip", t.grad_clip.to_string()),
            ("eps_pd", t.eps_pd.to_string()),
            ("d_model", m.d_model.to_string()),
            ("n_layers", m.n_layers.to_string()),
            ("n_heads", m.n_heads.to_string()),
            ("d_ff", m.d_ff.to_string()),
            ("k", m.k.to_string()),
            ("m", m.m.to_string()),
            ("n_cameras", m.n_cameras.to_string()),
            ("mask_mode", m.mask_mode.to_string()),
            ("time_conditioning", m.time_conditioning.to_string()),
        ];
        debug_assert_eq!(pairs.len() + 2, KEYS.len(), "out is omitted; paper_scale is folded into batch_size");
        pairs.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn later_values_win() {
        let mut c = RunConfig::default();
        c.apply_text("epochs = 3\nseed = 5 # trailing comment\n\nepochs = 4\n", Path::new("x")).unwrap();
        assert_eq!(c.train.epochs, 4);
        assert_eq!(c.seed, 5);
        assert_eq!(c.train.seed, 5);
    }

    #[test]
    fn unknown_key_lists_valid_ones() {
        let err = RunConfig::default().set("learning_rate", "1").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("learning_rate") && msg.contains("lr") && msg.contains("mask_project_every"));
    }

    #[test]
    fn syntax_errors_carry_the_line() {
        let err = RunConfig::default().apply_text("seed = 1\nnonsense\n", Path::new("c.cfg")).unwrap_err();
        assert_eq!(err.to_string(), "c.cfg:2: expected `key = value`, got `nonsense`");
    }

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::default();
        c.apply_text("tasks = sort-3\nintegrator = euler\nk = 2\nm = 10\nmask_mode = literal\n", Path::new("x")).unwrap();
        assert_eq!(c.model.h, 20);
        assert_eq!(c.integrator.evaluations(), 10);
        let mut back = RunConfig::default();
        back.apply_text(&c.to_text(), Path::new("x")).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn bad_values_are_named() {
        let err = RunConfig::default().set("mask_mode", "soft").unwrap_err();
        assert!(matches!(err, ConfigError::BadValue { ref key, .. } if key == "mask_mode"));
        assert!(RunConfig::default().set("tasks", "stack-2, fold-shirt").is_err());
    }
}
