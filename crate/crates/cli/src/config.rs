//! Experiment configuration: a flat-section TOML file with typed values.
//!
//! Only `problem` and `seed` are required; every other key falls back to a
//! per-problem default. Unknown keys, type mismatches and out-of-range values
//! are rejected with the offending key and its line.
//!
//! ```toml
//! problem = "spiral"      # toy1d | spiral | lorenz_da | external_csv
//! seed = 7
//! source = "gaussian"     # gaussian | prior_scrambled
//! output = "runs/spiral"
//!
//! [train]
//! max_iterations = 20000
//!
//! [sample]
//! y_hat = [-0.5, 0.0, 0.5, 1.0]
//! ```

use std::fmt;
use std::path::{Path, PathBuf};

use cfm_core::{
    Activation, CheckpointStrategy, MlpConfig, SinkhornConfig, SolverConfig, SourceKind,
    TrainConfig,
};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Problem {
    Toy1d,
    Spiral,
    LorenzDa,
    ExternalCsv,
}

impl fmt::Display for Problem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Problem::Toy1d => "toy1d",
            Problem::Spiral => "spiral",
            Problem::LorenzDa => "lorenz_da",
            Problem::ExternalCsv => "external_csv",
        })
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { key: String, line: usize },

    #[error("missing required key `{key}`")]
    MissingKey { key: String },

    #[error("line {line}: key `{key}` has the wrong type: {message}")]
    TypeMismatch {
        key: String,
        line: usize,
        message: String,
    },

    #[error("{}key `{key}`: {message}", line.map(|l| format!("line {l}: ")).unwrap_or_default())]
    Invalid {
        key: String,
        line: Option<usize>,
        message: String,
    },

    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
}

impl ConfigError {
    /// The key the error refers to, if any.
    pub fn key(&self) -> Option<&str> {
        match self {
            ConfigError::UnknownKey { key, .. }
            | ConfigError::MissingKey { key }
            | ConfigError::TypeMismatch { key, .. }
            | ConfigError::Invalid { key, .. } => Some(key),
            ConfigError::Read { .. } | ConfigError::Syntax { .. } => None,
        }
    }

    pub fn line(&self) -> Option<usize> {
        match self {
            ConfigError::UnknownKey { line, .. }
            | ConfigError::TypeMismatch { line, .. }
            | ConfigError::Syntax { line, .. } => Some(*line),
            ConfigError::Invalid { line, .. } => *line,
            ConfigError::Read { .. } | ConfigError::MissingKey { .. } => None,
        }
    }
}

/// Declares a resolved section and its all-optional raw counterpart.
macro_rules! section {
    ($(#[$meta:meta])* $name:ident, $raw:ident { $($(#[$fmeta:meta])* $field:ident : $ty:ty),* $(,)? }) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
        #[serde(deny_unknown_fields)]
        pub struct $name {
            $($(#[$fmeta])* pub $field: $ty,)*
        }

        #[derive(Debug, Default, Deserialize)]
        #[serde(deny_unknown_fields)]
        struct $raw {
            $($field: Option<$ty>,)*
        }

        impl $raw {
            fn overlay(self, base: &mut $name) {
                $(if let Some(v) = self.$field {
                    base.$field = v;
                })*
            }
        }
    };
}

section!(
    /// Problem data. Keys that do not apply to the chosen problem are ignored.
    DataSection, RawData {
        n_train: usize,
        n_test: usize,
        /// Spiral: joint draws from which band-filtered references are taken.
        reference_pool: usize,
        /// Toy and spiral: prior draws for the prior source at sampling time.
        prior_pool: usize,
        /// Spiral: total width of the reference acceptance band.
        band: f64,
        /// Toy: measurement noise standard deviation.
        noise_std: f64,
        /// Lorenz: particle count of the SIR reference filter.
        particles: usize,
        /// Lorenz: assimilation cycle that defines the inverse problem.
        cycles: usize,
        obs_noise_std: f64,
        process_noise_std: f64,
        /// External: CSV paths; empty means unset.
        train_csv: String,
        test_csv: String,
        reference_csv: String,
        prior_pool_csv: String,
    }
);

section!(
    MlpSection,
    RawMlp {
        hidden_width: usize,
        hidden_layers: usize,
        activation: Activation,
    }
);

section!(TrainSection, RawTrain {
    lr: f64,
    batch_size: usize,
    max_iterations: usize,
    ema_decay: f64,
    test_eval_stride: usize,
    /// Counted in evaluations.
    ma_window: usize,
    use_ema: bool,
    checkpoint_every: usize,
    keep_iterations: Vec<usize>,
    saturation_tol: f64,
    saturation_window: usize,
});

section!(
    SolverSection,
    RawSolver {
        rtol: f64,
        atol: f64,
        max_steps: usize,
        h_init: f64,
    }
);

section!(SampleSection, RawSample {
    /// Measurements to condition on; empty selects the problem's realized
    /// measurement (Lorenz) or is an error.
    y_hat: Vec<f64>,
    samples: usize,
    /// `final`, `ma_minimum`, `ma_saturation` or an iteration number.
    checkpoint: String,
});

section!(
    SinkhornSection,
    RawSinkhorn {
        epsilon: f64,
        max_iterations: usize,
        tol: f64,
    }
);

section!(
    EvaluateSection,
    RawEvaluate {
        kde_points: usize,
        /// Fraction of the peak a KDE local maximum must reach to count as a mode.
        mode_fraction: f64,
        baseline_repeats: usize,
        /// References larger than this are subsampled without replacement.
        max_reference: usize,
    }
);

section!(StudySection, RawStudy {
    checkpoints: Vec<usize>,
    y_hat: f64,
    samples: usize,
    sweep_points: usize,
    sweep_samples: usize,
});

/// Fully resolved experiment configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub problem: Problem,
    pub seed: u64,
    pub source: SourceKind,
    pub output: PathBuf,
    pub data: DataSection,
    pub mlp: MlpSection,
    pub train: TrainSection,
    pub solver: SolverSection,
    pub sample: SampleSection,
    pub sinkhorn: SinkhornSection,
    pub evaluate: EvaluateSection,
    pub study: StudySection,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    problem: Problem,
    seed: u64,
    source: Option<SourceKind>,
    output: Option<PathBuf>,
    data: Option<RawData>,
    mlp: Option<RawMlp>,
    train: Option<RawTrain>,
    solver: Option<RawSolver>,
    sample: Option<RawSample>,
    sinkhorn: Option<RawSinkhorn>,
    evaluate: Option<RawEvaluate>,
    study: Option<RawStudy>,
}

impl ExperimentConfig {
    /// Defaults for `problem`: spiral and Lorenz networks and optimizer settings
    /// follow the published MLP configurations; the toy uses a 32x3 Swish network
    /// trained on minibatches of all 5 pairs with per-iteration test evaluation.
    pub fn defaults(problem: Problem, seed: u64) -> Self {
        let data = DataSection {
            n_train: 800,
            n_test: 200,
            reference_pool: 100_000,
            prior_pool: 20_000,
            band: 0.1,
            noise_std: 0.25,
            particles: 100_000,
            cycles: 3,
            obs_noise_std: 0.5,
            process_noise_std: 0.01,
            train_csv: String::new(),
            test_csv: String::new(),
            reference_csv: String::new(),
            prior_pool_csv: String::new(),
        };
        let mut cfg = Self {
            problem,
            seed,
            source: SourceKind::Gaussian,
            output: PathBuf::from(format!("runs/{problem}")),
            data,
            mlp: MlpSection {
                hidden_width: 32,
                hidden_layers: 3,
                activation: Activation::Relu,
            },
            train: TrainSection {
                lr: 1e-3,
                batch_size: 1000,
                max_iterations: 100_000,
                ema_decay: 0.9999,
                test_eval_stride: 100,
                ma_window: 500,
                use_ema: true,
                checkpoint_every: 1000,
                keep_iterations: vec![],
                saturation_tol: 1e-3,
                saturation_window: 10,
            },
            solver: SolverSection {
                rtol: 1e-3,
                atol: 1e-6,
                max_steps: 10_000,
                h_init: 1e-2,
            },
            sample: SampleSection {
                y_hat: vec![-0.5, 0.0, 0.5, 1.0],
                samples: 10_000,
                checkpoint: "ma_saturation".into(),
            },
            sinkhorn: SinkhornSection {
                epsilon: 0.01,
                max_iterations: 5000,
                tol: 1e-9,
            },
            evaluate: EvaluateSection {
                kde_points: 200,
                mode_fraction: 0.1,
                baseline_repeats: 1,
                max_reference: 10_000,
            },
            study: StudySection {
                checkpoints: vec![1000, 3000, 15_000, 50_000],
                y_hat: 0.6,
                samples: 2000,
                sweep_points: 100,
                sweep_samples: 200,
            },
        };
        match problem {
            Problem::Toy1d => {
                cfg.data.n_train = 5;
                cfg.data.n_test = 1000;
                cfg.mlp.activation = Activation::Swish;
                cfg.train.batch_size = 5;
                cfg.train.max_iterations = 50_000;
                cfg.train.ema_decay = 0.999;
                cfg.train.test_eval_stride = 1;
                cfg.train.use_ema = false;
                cfg.train.keep_iterations = vec![1000, 3000, 15_000, 50_000];
                cfg.sample.y_hat = vec![0.6];
                cfg.sample.samples = 2000;
                cfg.sample.checkpoint = "ma_minimum".into();
            }
            Problem::Spiral | Problem::ExternalCsv => {}
            Problem::LorenzDa => {
                cfg.data.n_train = 1000;
                cfg.data.n_test = 500;
                cfg.mlp.hidden_width = 256;
                cfg.mlp.hidden_layers = 4;
                cfg.train.batch_size = 500;
                cfg.train.ema_decay = 0.9;
                cfg.sample.y_hat = vec![];
                cfg.sample.samples = 500;
            }
        }
        cfg
    }

    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| classify(text, &e))?;
        let mut cfg = Self::defaults(raw.problem, raw.seed);
        if let Some(s) = raw.source {
            cfg.source = s;
        }
        if let Some(o) = raw.output {
            cfg.output = o;
        }
        macro_rules! overlay {
            ($($field:ident),*) => {
                $(if let Some(r) = raw.$field {
                    r.overlay(&mut cfg.$field);
                })*
            };
        }
        overlay!(data, mlp, train, solver, sample, sinkhorn, evaluate, study);
        cfg.validate_with(Some(text))?;
        Ok(cfg)
    }

    /// The effective configuration as TOML with every key spelled out.
    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("configuration is representable as TOML")
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("configuration is representable as JSON")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.validate_with(None)
    }

    fn validate_with(&self, text: Option<&str>) -> Result<(), ConfigError> {
        let fail = |key: &str, message: String| {
            let (section, name) = key.split_once('.').unwrap_or(("", key));
            Err(ConfigError::Invalid {
                key: key.to_string(),
                line: text.and_then(|t| line_of_key(t, section, name)),
                message,
            })
        };
        macro_rules! require {
            ($cond:expr, $key:literal, $($msg:tt)*) => {
                if !$cond {
                    return fail($key, format!($($msg)*));
                }
            };
        }
        let d = &self.data;
        require!(d.n_train >= 1, "data.n_train", "must be at least 1");
        require!(d.n_test >= 1, "data.n_test", "must be at least 1");
        require!(
            d.band > 0.0,
            "data.band",
            "must be positive, got {}",
            d.band
        );
        require!(
            d.noise_std > 0.0 && d.noise_std.is_finite(),
            "data.noise_std",
            "must be positive"
        );
        require!(
            d.obs_noise_std > 0.0,
            "data.obs_noise_std",
            "must be positive"
        );
        require!(
            d.process_noise_std >= 0.0,
            "data.process_noise_std",
            "must be non-negative"
        );
        require!(d.cycles >= 1, "data.cycles", "must be at least 1");
        match self.problem {
            Problem::Spiral => {
                require!(
                    d.reference_pool >= 2,
                    "data.reference_pool",
                    "must be at least 2"
                );
                require!(d.prior_pool >= 1, "data.prior_pool", "must be at least 1");
            }
            Problem::LorenzDa => require!(
                d.particles >= d.n_train + d.n_test,
                "data.particles",
                "{} particles cannot supply {} training and test pairs",
                d.particles,
                d.n_train + d.n_test
            ),
            Problem::ExternalCsv => {
                if d.train_csv.is_empty() {
                    return Err(ConfigError::MissingKey {
                        key: "data.train_csv".into(),
                    });
                }
                if d.test_csv.is_empty() {
                    return Err(ConfigError::MissingKey {
                        key: "data.test_csv".into(),
                    });
                }
            }
            Problem::Toy1d => {}
        }
        let m = &self.mlp;
        require!(
            m.hidden_width >= 1,
            "mlp.hidden_width",
            "must be at least 1"
        );
        require!(
            m.hidden_layers >= 1,
            "mlp.hidden_layers",
            "must be at least 1"
        );
        let t = &self.train;
        require!(
            t.lr > 0.0 && t.lr.is_finite(),
            "train.lr",
            "must be positive, got {}",
            t.lr
        );
        require!(t.batch_size >= 1, "train.batch_size", "must be at least 1");
        require!(
            self.source == SourceKind::Gaussian || t.batch_size >= 2,
            "train.batch_size",
            "the scrambled prior source needs at least 2 rows per batch"
        );
        require!(
            t.max_iterations >= 1,
            "train.max_iterations",
            "must be at least 1"
        );
        require!(
            t.ema_decay > 0.0 && t.ema_decay < 1.0,
            "train.ema_decay",
            "must lie in (0, 1), got {}",
            t.ema_decay
        );
        require!(
            t.test_eval_stride >= 1,
            "train.test_eval_stride",
            "must be at least 1"
        );
        require!(t.ma_window >= 1, "train.ma_window", "must be at least 1");
        require!(
            t.saturation_tol > 0.0,
            "train.saturation_tol",
            "must be positive"
        );
        require!(
            t.saturation_window >= 1,
            "train.saturation_window",
            "must be at least 1"
        );
        let s = &self.solver;
        require!(s.rtol > 0.0, "solver.rtol", "must be positive");
        require!(s.atol > 0.0, "solver.atol", "must be positive");
        require!(s.max_steps >= 1, "solver.max_steps", "must be at least 1");
        require!(s.h_init > 0.0, "solver.h_init", "must be positive");
        let sa = &self.sample;
        require!(sa.samples >= 1, "sample.samples", "must be at least 1");
        require!(
            sa.y_hat.iter().all(|v| v.is_finite()),
            "sample.y_hat",
            "values must be finite"
        );
        require!(
            parse_checkpoint_ref(&sa.checkpoint).is_some(),
            "sample.checkpoint",
            "expected final, ma_minimum, ma_saturation or an iteration, got `{}`",
            sa.checkpoint
        );
        let sk = &self.sinkhorn;
        require!(sk.epsilon > 0.0, "sinkhorn.epsilon", "must be positive");
        require!(
            sk.max_iterations >= 1,
            "sinkhorn.max_iterations",
            "must be at least 1"
        );
        require!(sk.tol > 0.0, "sinkhorn.tol", "must be positive");
        let e = &self.evaluate;
        require!(
            e.kde_points >= 2,
            "evaluate.kde_points",
            "must be at least 2"
        );
        require!(
            e.mode_fraction > 0.0 && e.mode_fraction <= 1.0,
            "evaluate.mode_fraction",
            "must lie in (0, 1]"
        );
        require!(
            e.baseline_repeats >= 1,
            "evaluate.baseline_repeats",
            "must be at least 1"
        );
        require!(
            e.max_reference >= 2,
            "evaluate.max_reference",
            "must be at least 2"
        );
        let st = &self.study;
        require!(
            !st.checkpoints.is_empty(),
            "study.checkpoints",
            "must not be empty"
        );
        require!(
            st.checkpoints.iter().all(|&c| c >= 1),
            "study.checkpoints",
            "iterations must be at least 1"
        );
        require!(st.samples >= 2, "study.samples", "must be at least 2");
        require!(
            st.sweep_points >= 1,
            "study.sweep_points",
            "must be at least 1"
        );
        require!(
            st.sweep_samples >= 2,
            "study.sweep_samples",
            "must be at least 2"
        );
        Ok(())
    }

    /// Network architecture for data of the given dimensions.
    pub fn mlp_config(&self, state_dim: usize, cond_dim: usize) -> MlpConfig {
        MlpConfig {
            state_dim,
            cond_dim,
            hidden_width: self.mlp.hidden_width,
            hidden_layers: self.mlp.hidden_layers,
            activation: self.mlp.activation,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            lr: t.lr,
            batch_size: t.batch_size,
            max_iterations: t.max_iterations,
            ema_decay: t.ema_decay,
            test_eval_stride: t.test_eval_stride,
            ma_window: t.ma_window,
            seed: self.seed,
            use_ema: t.use_ema,
            checkpoint_every: t.checkpoint_every,
            keep_iterations: t.keep_iterations.clone(),
        }
    }

    pub fn saturation_strategy(&self) -> CheckpointStrategy {
        CheckpointStrategy::MaSaturation {
            tol: self.train.saturation_tol,
            window: self.train.saturation_window,
        }
    }

    pub fn solver_config(&self) -> SolverConfig {
        SolverConfig {
            rtol: self.solver.rtol,
            atol: self.solver.atol,
            max_steps: self.solver.max_steps,
            h_init: self.solver.h_init,
            ..SolverConfig::default()
        }
    }

    pub fn sinkhorn_config(&self) -> SinkhornConfig {
        SinkhornConfig {
            epsilon: self.sinkhorn.epsilon,
            max_iters: self.sinkhorn.max_iterations,
            convergence_tol: self.sinkhorn.tol,
        }
    }
}

/// Which checkpoint `sample` draws from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckpointRef {
    Final,
    MaMinimum,
    MaSaturation,
    Iteration(usize),
}

pub fn parse_checkpoint_ref(s: &str) -> Option<CheckpointRef> {
    match s {
        "final" => Some(CheckpointRef::Final),
        "ma_minimum" => Some(CheckpointRef::MaMinimum),
        "ma_saturation" => Some(CheckpointRef::MaSaturation),
        other => other.parse().ok().map(CheckpointRef::Iteration),
    }
}

pub fn parse_config(path: &Path) -> Result<ExperimentConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    ExperimentConfig::from_toml_str(&text)
}

/// Maps a deserializer error onto the key and line it concerns.
fn classify(text: &str, err: &toml::de::Error) -> ConfigError {
    let message = err.message().trim().to_string();
    let line = err
        .span()
        .map(|s| text[..s.start.min(text.len())].matches('\n').count() + 1)
        .unwrap_or(1);
    let backticked = |prefix: &str| {
        message
            .strip_prefix(prefix)
            .and_then(|rest| rest.split('`').next())
            .map(str::to_string)
    };
    let qualify = |key: String| match section_at(text, line) {
        Some(section) => format!("{section}.{key}"),
        None => key,
    };
    if let Some(key) = backticked("unknown field `") {
        return ConfigError::UnknownKey {
            key: qualify(key),
            line,
        };
    }
    if let Some(key) = backticked("missing field `") {
        return ConfigError::MissingKey { key: qualify(key) };
    }
    if message.starts_with("invalid type")
        || message.starts_with("invalid value")
        || message.starts_with("unknown variant")
    {
        if let Some(key) = key_on_line(text, line) {
            return ConfigError::TypeMismatch {
                key: qualify(key),
                line,
                message,
            };
        }
    }
    ConfigError::Syntax { line, message }
}

fn key_on_line(text: &str, line: usize) -> Option<String> {
    let l = text.lines().nth(line.checked_sub(1)?)?;
    let (key, _) = l.split_once('=')?;
    let key = key.trim();
    (!key.is_empty() && !key.starts_with('#')).then(|| key.to_string())
}

fn section_header(line: &str) -> Option<&str> {
    let l = line.trim();
    l.strip_prefix('[')?.split(']').next().map(str::trim)
}

/// Name of the `[section]` in force at 1-based `line`, if any.
fn section_at(text: &str, line: usize) -> Option<String> {
    text.lines()
        .take(line)
        .filter_map(section_header)
        .last()
        .map(str::to_string)
}

/// 1-based line on which `key` is assigned inside `section` ("" for top level).
fn line_of_key(text: &str, section: &str, key: &str) -> Option<usize> {
    let mut current = "";
    for (i, l) in text.lines().enumerate() {
        if let Some(s) = section_header(l) {
            current = s;
        } else if current == section && key_on_line(l, 1).as_deref() == Some(key) {
            return Some(i + 1);
        }
    }
    None
}
