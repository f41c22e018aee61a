//! Run configuration: a flat `key = value` text file, overridable from the
//! command line (overrides win). `print-config` renders every key with its
//! documentation and the fully resolved value, so a run's provenance is one
//! diffable page.

use std::path::Path;
use std::str::FromStr;

use crate::attack::{AttackAlgorithm, AttackConfig, AttackMode, TargetClass};
use crate::data::{DataFormat, SplitConfig};
use crate::error::{Error, Result};
use crate::model::ArchSpec;
use crate::semisup::TrainConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: String,
    /// Worker threads for the sweep; 0 uses the default pool size.
    pub parallelism: usize,

    pub dataset_path: String,
    pub dataset_format: String,
    pub eval_fraction: f64,
    /// Cap on evaluation samples attacked per cell; 0 attacks all.
    pub eval_limit: usize,

    pub target_arch: String,
    pub target_epochs: usize,
    pub target_batch_size: usize,
    pub target_learning_rate: f64,
    pub target_momentum: f64,
    pub target_weight_decay: f64,
    /// Cosine-annealing horizon for the target optimizer; 0 disables it.
    pub target_cosine_t_max: usize,

    pub substitute_arch: String,

    pub train_epochs: usize,
    pub train_iters_per_epoch: usize,
    pub train_batch_size: usize,
    pub train_temperature: f64,
    pub train_augmentations: usize,
    pub train_learning_rate: f64,
    pub train_beta_param: f64,
    pub train_unlabeled_weight: f64,
    pub train_ramp_fraction: f64,
    /// Parameter EMA decay; 0 disables the averaging.
    pub train_ema_decay: f64,

    /// `None` resolves per dataset: 8/255 for 3-channel inputs, 0.3 otherwise.
    pub attack_epsilon: Option<f64>,
    /// `None` resolves to epsilon / 4.
    pub attack_step_rate: Option<f64>,
    pub attack_iterations: usize,
    pub attack_max_decays: usize,
    /// `None` resolves to epsilon / 2.
    pub attack_init_noise: Option<f64>,
    pub attack_decay_factor: f64,
    pub attack_penalty_lambda: f64,
    pub attack_mode: String,

    pub sweep_budgets: Vec<usize>,
    pub sweep_algorithms: Vec<AttackAlgorithm>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: "runs".into(),
            parallelism: 0,
            dataset_path: String::new(),
            dataset_format: "synthetic:blobs:k=3,n=900,d=8,noise=0.1".into(),
            eval_fraction: 0.2,
            eval_limit: 0,
            target_arch: "mlp:32,32".into(),
            target_epochs: 20,
            target_batch_size: 32,
            target_learning_rate: 0.1,
            target_momentum: 0.9,
            target_weight_decay: 0.0,
            target_cosine_t_max: 0,
            substitute_arch: "mlp:32,32".into(),
            train_epochs: 30,
            train_iters_per_epoch: 32,
            train_batch_size: 16,
            train_temperature: 0.5,
            train_augmentations: 2,
            train_learning_rate: 0.004,
            train_beta_param: 0.75,
            train_unlabeled_weight: 75.0,
            train_ramp_fraction: 0.75,
            train_ema_decay: 0.0,
            attack_epsilon: None,
            attack_step_rate: None,
            attack_iterations: 20,
            attack_max_decays: 4,
            attack_init_noise: None,
            attack_decay_factor: 0.9,
            attack_penalty_lambda: 0.0,
            attack_mode: "untargeted".into(),
            sweep_budgets: vec![50, 100, 200, 400],
            sweep_algorithms: AttackAlgorithm::ALL.to_vec(),
        }
    }
}

/// Key name, documentation, shown by `print-config`.
pub const KEY_DOCS: &[(&str, &str)] = &[
    ("seed", "master seed; every random stream in a run derives from it"),
    ("out_dir", "output directory (overridable by the ADVKIT_OUT_DIR env var)"),
    ("parallelism", "sweep worker threads; 0 = default pool"),
    ("dataset.path", "path or prefix for idx/csv data; ignored for synthetic"),
    ("dataset.format", "idx | csv | synthetic:blobs[:k=..,n=..,d=..,noise=..]"),
    ("dataset.eval_fraction", "held-out evaluation fraction in [0,1)"),
    ("eval.limit", "evaluation samples attacked per cell; 0 = all"),
    ("target.arch", "target architecture tag (linear | mlp[:w,..] | cnn[:c,..])"),
    ("target.epochs", "target training epochs"),
    ("target.batch_size", "target training batch size"),
    ("target.learning_rate", "target momentum-SGD learning rate"),
    ("target.momentum", "target momentum factor"),
    ("target.weight_decay", "target L2 penalty; 0 = off"),
    ("target.cosine_t_max", "cosine-annealing horizon in steps; 0 = off"),
    ("substitute.arch", "substitute architecture tag"),
    ("train.epochs", "substitute training epochs"),
    ("train.iters_per_epoch", "optimizer steps per substitute epoch"),
    ("train.batch_size", "labeled (and unlabeled) samples per step"),
    ("train.temperature", "label-sharpening temperature T"),
    ("train.augmentations", "augmentations per unlabeled sample N"),
    ("train.learning_rate", "substitute Adam learning rate"),
    ("train.beta_param", "Beta(a,a) mixup shape parameter a"),
    ("train.unlabeled_weight", "unlabeled consistency-loss weight"),
    ("train.ramp_fraction", "fraction of iterations ramping the unlabeled weight"),
    ("train.ema_decay", "parameter EMA decay in (0,1); 0 = off"),
    ("attack.epsilon", "l-inf radius; `auto` = 8/255 for 3-channel data, 0.3 otherwise"),
    ("attack.step_rate", "attack step rate alpha; `auto` = epsilon/4"),
    ("attack.iterations", "attack iterations I"),
    ("attack.max_decays", "step-rate decay retries d_max (ipgd)"),
    ("attack.init_noise", "uniform init-noise half-width; `auto` = epsilon/2"),
    ("attack.decay_factor", "geometric decay base rho for ipgd retries"),
    ("attack.penalty_lambda", "optional soft perturbation penalty weight; 0 = hard constraint"),
    ("attack.mode", "untargeted | targeted (next-class target rule)"),
    ("sweep.budgets", "comma-separated query budgets"),
    ("sweep.algorithms", "comma-separated subset of fgsm,bim,pgd,ipgd"),
];

impl RunConfig {
    /// Parse a flat key-value file on top of the defaults.
    pub fn from_file(path: &Path) -> Result<Self> {
        let mut config = RunConfig::default();
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), &e))?;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::config(format!("line {}", lineno + 1), "expected `key = value`")
            })?;
            config.set(key.trim(), value.trim())?;
        }
        Ok(config)
    }

    /// Apply one `key=value` override; command-line overrides use this.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, value: &str) -> Result<T>
        where
            T::Err: std::fmt::Display,
        {
            value.parse::<T>().map_err(|e| Error::config(key, e.to_string()))
        }
        fn auto(key: &str, value: &str) -> Result<Option<f64>> {
            if value == "auto" {
                Ok(None)
            } else {
                Ok(Some(num::<f64>(key, value)?))
            }
        }
        match key {
            "seed" => self.seed = num(key, value)?,
            "out_dir" => self.out_dir = value.to_string(),
            "parallelism" => self.parallelism = num(key, value)?,
            "dataset.path" => self.dataset_path = value.to_string(),
            "dataset.format" => self.dataset_format = value.to_string(),
            "dataset.eval_fraction" => self.eval_fraction = num(key, value)?,
            "eval.limit" => self.eval_limit = num(key, value)?,
            "target.arch" => self.target_arch = value.to_string(),
            "target.epochs" => self.target_epochs = num(key, value)?,
            "target.batch_size" => self.target_batch_size = num(key, value)?,
            "target.learning_rate" => self.target_learning_rate = num(key, value)?,
            "target.momentum" => self.target_momentum = num(key, value)?,
            "target.weight_decay" => self.target_weight_decay = num(key, value)?,
            "target.cosine_t_max" => self.target_cosine_t_max = num(key, value)?,
            "substitute.arch" => self.substitute_arch = value.to_string(),
            "train.epochs" => self.train_epochs = num(key, value)?,
            "train.iters_per_epoch" => self.train_iters_per_epoch = num(key, value)?,
            "train.batch_size" => self.train_batch_size = num(key, value)?,
            "train.temperature" => self.train_temperature = num(key, value)?,
            "train.augmentations" => self.train_augmentations = num(key, value)?,
            "train.learning_rate" => self.train_learning_rate = num(key, value)?,
            "train.beta_param" => self.train_beta_param = num(key, value)?,
            "train.unlabeled_weight" => self.train_unlabeled_weight = num(key, value)?,
            "train.ramp_fraction" => self.train_ramp_fraction = num(key, value)?,
            "train.ema_decay" => self.train_ema_decay = num(key, value)?,
            "attack.epsilon" => self.attack_epsilon = auto(key, value)?,
            "attack.step_rate" => self.attack_step_rate = auto(key, value)?,
            "attack.iterations" => self.attack_iterations = num(key, value)?,
            "attack.max_decays" => self.attack_max_decays = num(key, value)?,
            "attack.init_noise" => self.attack_init_noise = auto(key, value)?,
            "attack.decay_factor" => self.attack_decay_factor = num(key, value)?,
            "attack.penalty_lambda" => self.attack_penalty_lambda = num(key, value)?,
            "attack.mode" => self.attack_mode = value.to_string(),
            "sweep.budgets" => {
                let parsed: std::result::Result<Vec<usize>, _> =
                    value.split(',').map(|v| v.trim().parse()).collect();
                self.sweep_budgets = parsed.map_err(|e| Error::config(key, e.to_string()))?;
            }
            "sweep.algorithms" => {
                self.sweep_algorithms = value
                    .split(',')
                    .map(|v| v.trim().parse())
                    .collect::<Result<Vec<AttackAlgorithm>>>()?;
            }
            other => return Err(Error::config(other, "unknown key")),
        }
        Ok(())
    }

    /// Fail-fast validation of everything checkable before loading data.
    pub fn validate(&self) -> Result<()> {
        let format: DataFormat = self.dataset_format.parse()?;
        if !matches!(format, DataFormat::Synthetic(_)) {
            if self.dataset_path.is_empty() {
                return Err(Error::config("dataset.path", "required for idx/csv datasets"));
            }
            let probe = match format {
                DataFormat::Idx => format!("{}-images-idx3-ubyte", self.dataset_path),
                _ => self.dataset_path.clone(),
            };
            if !Path::new(&probe).exists() {
                return Err(Error::config("dataset.path", format!("`{probe}` does not exist")));
            }
        }
        self.target_arch.parse::<ArchSpec>()?;
        self.substitute_arch.parse::<ArchSpec>()?;
        self.parse_mode()?;
        if self.sweep_budgets.is_empty() {
            return Err(Error::config("sweep.budgets", "must not be empty"));
        }
        if self.sweep_algorithms.is_empty() {
            return Err(Error::config("sweep.algorithms", "must not be empty"));
        }
        self.train_config().validate()?;
        if !(0.0..1.0).contains(&self.eval_fraction) {
            return Err(Error::config("dataset.eval_fraction", "must lie in [0, 1)"));
        }
        Ok(())
    }

    pub fn parse_mode(&self) -> Result<AttackMode> {
        match self.attack_mode.as_str() {
            "untargeted" => Ok(AttackMode::Untargeted),
            "targeted" => Ok(AttackMode::Targeted(TargetClass::Next)),
            other => Err(Error::config("attack.mode", format!("unknown mode `{other}`"))),
        }
    }

    pub fn split_config(&self) -> SplitConfig {
        SplitConfig { eval_fraction: self.eval_fraction, seed: self.seed }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.train_epochs,
            iters_per_epoch: self.train_iters_per_epoch,
            batch_size: self.train_batch_size,
            temperature: self.train_temperature,
            augmentations: self.train_augmentations,
            learning_rate: self.train_learning_rate,
            beta_param: self.train_beta_param,
            unlabeled_weight: self.train_unlabeled_weight,
            ramp_fraction: self.train_ramp_fraction,
            ema_decay: (self.train_ema_decay > 0.0).then_some(self.train_ema_decay),
            seed: self.seed,
        }
    }

    /// Resolve attack parameters for a dataset's input shape.
    pub fn attack_config(&self, input_shape: &[usize]) -> Result<AttackConfig> {
        let epsilon = self.attack_epsilon.unwrap_or({
            if input_shape.len() == 3 && input_shape[0] == 3 {
                8.0 / 255.0
            } else {
                0.3
            }
        });
        let config = AttackConfig {
            epsilon,
            step_rate: self.attack_step_rate.unwrap_or(epsilon / 4.0),
            max_iterations: self.attack_iterations,
            max_decays: self.attack_max_decays,
            init_noise_scale: self.attack_init_noise.unwrap_or(epsilon / 2.0),
            mode: self.parse_mode()?,
            decay_factor: self.attack_decay_factor,
            penalty_lambda: self.attack_penalty_lambda,
            seed: self.seed,
        };
        config.validate()?;
        Ok(config)
    }

    /// Current value of a key, formatted as it would be parsed.
    pub fn get(&self, key: &str) -> String {
        let opt = |v: &Option<f64>| v.map_or("auto".to_string(), |x| x.to_string());
        match key {
            "seed" => self.seed.to_string(),
            "out_dir" => self.out_dir.clone(),
            "parallelism" => self.parallelism.to_string(),
            "dataset.path" => self.dataset_path.clone(),
            "dataset.format" => self.dataset_format.clone(),
            "dataset.eval_fraction" => self.eval_fraction.to_string(),
            "eval.limit" => self.eval_limit.to_string(),
            "target.arch" => self.target_arch.clone(),
            "target.epochs" => self.target_epochs.to_string(),
            "target.batch_size" => self.target_batch_size.to_string(),
            "target.learning_rate" => self.target_learning_rate.to_string(),
            "target.momentum" => self.target_momentum.to_string(),
            "target.weight_decay" => self.target_weight_decay.to_string(),
            "target.cosine_t_max" => self.target_cosine_t_max.to_string(),
            "substitute.arch" => self.substitute_arch.clone(),
            "train.epochs" => self.train_epochs.to_string(),
            "train.iters_per_epoch" => self.train_iters_per_epoch.to_string(),
            "train.batch_size" => self.train_batch_size.to_string(),
            "train.temperature" => self.train_temperature.to_string(),
            "train.augmentations" => self.train_augmentations.to_string(),
            "train.learning_rate" => self.train_learning_rate.to_string(),
            "train.beta_param" => self.train_beta_param.to_string(),
            "train.unlabeled_weight" => self.train_unlabeled_weight.to_string(),
            "train.ramp_fraction" => self.train_ramp_fraction.to_string(),
            "train.ema_decay" => self.train_ema_decay.to_string(),
            "attack.epsilon" => opt(&self.attack_epsilon),
            "attack.step_rate" => opt(&self.attack_step_rate),
            "attack.iterations" => self.attack_iterations.to_string(),
            "attack.max_decays" => self.attack_max_decays.to_string(),
            "attack.init_noise" => opt(&self.attack_init_noise),
            "attack.decay_factor" => self.attack_decay_factor.to_string(),
            "attack.penalty_lambda" => self.attack_penalty_lambda.to_string(),
            "attack.mode" => self.attack_mode.clone(),
            "sweep.budgets" => {
                self.sweep_budgets.iter().map(|b| b.to_string()).collect::<Vec<_>>().join(",")
            }
            "sweep.algorithms" => {
                self.sweep_algorithms.iter().map(|a| a.name().to_string()).collect::<Vec<_>>().join(",")
            }
            _ => String::new(),
        }
    }

    /// Reference page: every key with its documentation and resolved value.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (key, doc) in KEY_DOCS {
            out.push_str(&format!("# {doc}\n{key} = {}\n", self.get(key)));
        }
        out
    }
}
