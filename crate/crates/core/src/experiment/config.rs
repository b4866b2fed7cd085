use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use crate::aggregate::{Method, ServerConfig, ServerOptimizer, StepSize, Weighting};
use crate::fisher::FisherMode;
use crate::models::{LossKind, Schedule, TrainConfig};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    SyntheticWidth,
    SyntheticSteps,
    OneShot,
    FewShot,
    CompressBench,
}

impl Task {
    pub const ALL: [Task; 5] = [Task::SyntheticWidth, Task::SyntheticSteps, Task::OneShot, Task::FewShot, Task::CompressBench];

    pub fn name(self) -> &'static str {
        match self {
            Task::SyntheticWidth => "synthetic-width",
            Task::SyntheticSteps => "synthetic-steps",
            Task::OneShot => "one-shot",
            Task::FewShot => "few-shot",
            Task::CompressBench => "compress-bench",
        }
    }

    pub fn is_synthetic(self) -> bool {
        matches!(self, Task::SyntheticWidth | Task::SyntheticSteps)
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Task::ALL
            .into_iter()
            .find(|t| t.name() == s.trim())
            .ok_or_else(|| Error::Config(format!("unknown task `{s}`")))
    }
}

/// Flat `section.key → value` map.
pub type ConfigMap = BTreeMap<String, String>;

/// Parses `key = value` lines grouped under `[section]` headers. `#` starts
/// a comment. Keys before any header belong to the `run` section.
pub fn parse_config_text(text: &str) -> Result<ConfigMap> {
    let mut map = ConfigMap::new();
    let mut section = String::from("run");
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('[') {
            let name = rest
                .strip_suffix(']')
                .ok_or_else(|| Error::Config(format!("line {}: unterminated section header", lineno + 1)))?;
            section = name.trim().to_string();
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value", lineno + 1)))?;
        let key = k.trim();
        let full = if key.contains('.') { key.to_string() } else { format!("{section}.{key}") };
        map.insert(full, v.trim().to_string());
    }
    Ok(map)
}

/// Everything a run needs. Defaults depend on the task.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub task: Task,
    pub seeds: Vec<u64>,
    pub methods: Vec<Method>,
    /// Widths, step counts or Dirichlet α, depending on the task.
    pub sweep: Vec<f64>,
    pub out: Option<PathBuf>,
    /// Record wall-clock times; off keeps the CSV byte-reproducible.
    pub timing: bool,
    pub rounds: usize,

    pub clients: usize,
    pub n_per_client: usize,
    pub p: usize,
    pub alpha: f64,
    pub data_seed: u64,
    pub train_examples: usize,
    pub val_examples: usize,
    pub test_examples: usize,
    pub image_side: usize,
    pub image_noise: f64,
    pub normalize: bool,
    pub idx_images: Option<PathBuf>,
    pub idx_labels: Option<PathBuf>,

    pub width: usize,
    pub kappa: f64,
    pub hidden: Vec<usize>,

    pub local: TrainConfig,
    pub loss: LossKind,

    pub server: ServerConfig,

    pub fisher_mode: FisherMode,
    pub kfac_damping: f64,

    pub compress: bool,
    pub kfac_sq: u32,
    pub sq_grid: Vec<u32>,
    pub sv_grid: Vec<f64>,
}

impl ExperimentConfig {
    pub fn defaults(task: Task) -> Self {
        let synthetic = task.is_synthetic();
        let (sweep, width, steps) = match task {
            Task::SyntheticWidth => (vec![32.0, 64.0, 128.0, 256.0, 512.0], 512, 2048),
            Task::SyntheticSteps => ((4..=12).map(|e| f64::from(1u32 << e)).collect(), 512, 2048),
            _ => (vec![0.1], 512, 2048),
        };
        let local = if synthetic {
            TrainConfig { eta: 0.1, momentum: 0.0, schedule: Schedule::Steps(steps), batch_size: usize::MAX }
        } else {
            TrainConfig { eta: 0.01, momentum: 0.9, schedule: Schedule::Epochs(30), batch_size: 64 }
        };
        let server = if synthetic {
            ServerConfig::gd(StepSize::Fixed(0.001), 1000)
        } else {
            ServerConfig::adam(2000, 100)
        };
        let methods = match task {
            Task::SyntheticWidth | Task::SyntheticSteps => vec![Method::FedAvg, Method::FedFisherFull],
            Task::CompressBench => vec![Method::FedFisherDiag, Method::FedFisherKfac],
            _ => vec![Method::FedAvg, Method::FedFisherDiag, Method::FedFisherKfac, Method::FisherMerge],
        };
        Self {
            task,
            seeds: (0..match task {
                Task::SyntheticWidth => 50,
                Task::SyntheticSteps => 10,
                _ => 5,
            })
                .collect(),
            methods,
            sweep,
            out: None,
            timing: false,
            rounds: if task == Task::FewShot { 5 } else { 1 },
            clients: if synthetic { 2 } else { 5 },
            n_per_client: 100,
            p: 2,
            alpha: 0.1,
            data_seed: 0,
            train_examples: 5000,
            val_examples: 500,
            test_examples: 1000,
            image_side: 14,
            image_noise: 0.25,
            normalize: false,
            idx_images: None,
            idx_labels: None,
            width,
            kappa: 0.5,
            hidden: vec![64],
            local,
            loss: if synthetic { LossKind::Squared } else { LossKind::SoftmaxCrossEntropy },
            server,
            fisher_mode: FisherMode::Expected,
            kfac_damping: 1e-4,
            compress: true,
            kfac_sq: 4,
            sq_grid: vec![1, 2, 4, 6],
            sv_grid: vec![0.0],
        }
    }

    /// Defaults for `task` overridden by `map`. Unknown keys are errors.
    pub fn from_map(task: Task, map: &ConfigMap) -> Result<Self> {
        let mut cfg = Self::defaults(task);
        if let Some(t) = map.get("run.task") {
            if t.parse::<Task>()? != task {
                return Err(Error::Config(format!("config is for task `{t}`, not `{task}`")));
            }
        }
        for (key, value) in map {
            cfg.set(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies one `section.key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |what: &str| Error::Config(format!("`{key}`: cannot parse `{value}` as {what}"));
        let v = value.trim();
        macro_rules! num {
            ($t:ty) => {
                v.parse::<$t>().map_err(|_| bad(stringify!($t)))?
            };
        }
        let flag = || -> Result<bool> {
            match v {
                "true" | "yes" | "1" => Ok(true),
                "false" | "no" | "0" => Ok(false),
                _ => Err(bad("a boolean")),
            }
        };
        match key {
            "run.task" => {}
            "run.seeds" => self.seeds = parse_seeds(v).map_err(|_| bad("a seed list"))?,
            "run.methods" => self.methods = list(v).map(str::parse).collect::<Result<_>>()?,
            "run.sweep" => self.sweep = list(v).map(|s| s.parse().map_err(|_| bad("numbers"))).collect::<Result<_>>()?,
            "run.out" => self.out = Some(PathBuf::from(v)),
            "run.timing" => self.timing = flag()?,
            "run.rounds" => self.rounds = num!(usize),
            "data.clients" => self.clients = num!(usize),
            "data.n_per_client" => self.n_per_client = num!(usize),
            "data.p" => self.p = num!(usize),
            "data.alpha" => self.alpha = num!(f64),
            "data.seed" => self.data_seed = num!(u64),
            "data.train_examples" => self.train_examples = num!(usize),
            "data.val_examples" => self.val_examples = num!(usize),
            "data.test_examples" => self.test_examples = num!(usize),
            "data.image_side" => self.image_side = num!(usize),
            "data.image_noise" => self.image_noise = num!(f64),
            "data.normalize" => self.normalize = flag()?,
            "data.idx_images" => self.idx_images = Some(PathBuf::from(v)),
            "data.idx_labels" => self.idx_labels = Some(PathBuf::from(v)),
            "model.width" => self.width = num!(usize),
            "model.kappa" => self.kappa = num!(f64),
            "model.hidden" => {
                self.hidden = if v.is_empty() {
                    Vec::new()
                } else {
                    list(v).map(|s| s.parse().map_err(|_| bad("layer widths"))).collect::<Result<_>>()?
                }
            }
            "local.eta" => self.local.eta = num!(f64),
            "local.momentum" => self.local.momentum = num!(f64),
            "local.steps" => self.local.schedule = Schedule::Steps(num!(usize)),
            "local.epochs" => self.local.schedule = Schedule::Epochs(num!(usize)),
            "local.batch_size" => {
                self.local.batch_size = if v == "full" { usize::MAX } else { num!(usize) };
            }
            "local.loss" => {
                self.loss = match v {
                    "squared" => LossKind::Squared,
                    "cross-entropy" | "softmax-cross-entropy" => LossKind::SoftmaxCrossEntropy,
                    _ => return Err(bad("a loss (squared | cross-entropy)")),
                }
            }
            "server.optimizer" => {
                self.server.optimizer = match v {
                    "gd" => ServerOptimizer::Gd { eta_s: StepSize::Auto },
                    "adam" => ServerOptimizer::adam_default(),
                    _ => return Err(bad("an optimizer (gd | adam)")),
                }
            }
            "server.eta_s" => {
                self.server.optimizer = match (self.server.optimizer, v) {
                    (ServerOptimizer::Gd { .. }, "auto") => ServerOptimizer::Gd { eta_s: StepSize::Auto },
                    (ServerOptimizer::Gd { .. }, _) => ServerOptimizer::Gd { eta_s: StepSize::Fixed(num!(f64)) },
                    (ServerOptimizer::Adam { beta1, beta2, eps, .. }, _) => {
                        ServerOptimizer::Adam { eta_s: num!(f64), beta1, beta2, eps }
                    }
                }
            }
            "server.beta1" | "server.beta2" | "server.eps" => {
                let x = num!(f64);
                let ServerOptimizer::Adam { eta_s, mut beta1, mut beta2, mut eps } = self.server.optimizer else {
                    return Err(Error::Config(format!("`{key}` only applies to the adam optimizer")));
                };
                match key {
                    "server.beta1" => beta1 = x,
                    "server.beta2" => beta2 = x,
                    _ => eps = x,
                }
                self.server.optimizer = ServerOptimizer::Adam { eta_s, beta1, beta2, eps };
            }
            "server.t_max" => self.server.t_max = num!(usize),
            "server.stop_tol" => self.server.stop_tol = num!(f64),
            "server.val_every" => self.server.val_every = num!(usize),
            "server.weighting" => {
                self.server.weighting = match v {
                    "equal" => Weighting::Equal,
                    "size" => Weighting::BySize,
                    _ => return Err(bad("a weighting (equal | size)")),
                }
            }
            "fisher.mode" => {
                self.fisher_mode = match v {
                    "expected" => FisherMode::Expected,
                    "sampled" => FisherMode::Sampled { seed: 0, draws: 1 },
                    _ => return Err(bad("a Fisher mode (expected | sampled)")),
                }
            }
            "fisher.draws" => {
                let draws = num!(usize);
                let seed = match self.fisher_mode {
                    FisherMode::Sampled { seed, .. } => seed,
                    FisherMode::Expected => 0,
                };
                self.fisher_mode = FisherMode::Sampled { seed, draws };
            }
            "fisher.kfac_damping" => self.kfac_damping = num!(f64),
            "compress.enabled" => self.compress = flag()?,
            "compress.kfac_sq" => self.kfac_sq = num!(u32),
            "compress.sq" => self.sq_grid = list(v).map(|s| s.parse().map_err(|_| bad("integers"))).collect::<Result<_>>()?,
            "compress.sv" => self.sv_grid = list(v).map(|s| s.parse().map_err(|_| bad("numbers"))).collect::<Result<_>>()?,
            _ => return Err(Error::Config(format!("unknown configuration key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.seeds.is_empty() {
            return fail("at least one seed is required".into());
        }
        if self.methods.is_empty() {
            return fail("at least one method is required".into());
        }
        if self.task != Task::CompressBench && self.sweep.is_empty() {
            return fail("sweep values must be non-empty".into());
        }
        if self.clients == 0 {
            return fail("data.clients must be positive".into());
        }
        self.local.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.server.validate()?;
        match self.task {
            Task::SyntheticWidth | Task::SyntheticSteps => {
                if self.sweep.iter().any(|&s| s < 0.0 || s.fract() != 0.0) {
                    return fail("synthetic sweeps take non-negative integers".into());
                }
                if self.task == Task::SyntheticWidth && self.sweep.contains(&0.0) {
                    return fail("width must be positive".into());
                }
                let widest = match self.task {
                    Task::SyntheticWidth => self.sweep.iter().cloned().fold(0.0, f64::max) as usize,
                    _ => self.width,
                };
                if self.methods.contains(&Method::FedFisherFull) && widest * self.p > 2000 {
                    return fail(format!(
                        "fedfisher-full needs width·p ≤ 2000 for a dense Fisher, got {}",
                        widest * self.p
                    ));
                }
                if self.methods.contains(&Method::FedFisherKfac) {
                    return fail("fedfisher-kfac needs an MLP task".into());
                }
                if matches!(self.server.optimizer, ServerOptimizer::Adam { .. }) && self.server.val_every > 0 {
                    return fail("synthetic tasks have no validation set; set server.val_every = 0".into());
                }
            }
            Task::OneShot | Task::FewShot | Task::CompressBench => {
                if self.sweep.iter().any(|&a| !(a > 0.0)) {
                    return fail("Dirichlet α values must be positive".into());
                }
                if self.methods.contains(&Method::FedFisherFull) {
                    return fail("fedfisher-full is only available for the synthetic tasks".into());
                }
                if self.idx_images.is_some() != self.idx_labels.is_some() {
                    return fail("data.idx_images and data.idx_labels go together".into());
                }
                if self.train_examples < self.clients {
                    return fail("fewer training examples than clients".into());
                }
            }
        }
        if self.task == Task::FewShot && self.rounds == 0 {
            return fail("run.rounds must be at least 1".into());
        }
        if self.task == Task::CompressBench {
            if self.methods.iter().any(|m| !matches!(m, Method::FedFisherDiag | Method::FedFisherKfac)) {
                return fail("compress-bench compares fedfisher-diag and fedfisher-kfac only".into());
            }
            if self.sq_grid.is_empty() || self.sv_grid.is_empty() {
                return fail("compress.sq and compress.sv must be non-empty".into());
            }
            if self.sq_grid.iter().any(|s| !(1..=16).contains(s)) {
                return fail("compress.sq values must lie in 1..=16".into());
            }
            if self.sv_grid.iter().any(|&s| s != 0.0 && s < 1.0) {
                return fail("compress.sv values are 0 (budget plan) or at least 1".into());
            }
        }
        if !(1..=16).contains(&self.kfac_sq) {
            return fail("compress.kfac_sq must lie in 1..=16".into());
        }
        Ok(())
    }
}

fn list(v: &str) -> impl Iterator<Item = &str> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty())
}

/// `"0,3,7"` or a half-open range `"0..10"`.
fn parse_seeds(v: &str) -> std::result::Result<Vec<u64>, std::num::ParseIntError> {
    if let Some((a, b)) = v.split_once("..") {
        let (a, b): (u64, u64) = (a.trim().parse()?, b.trim().parse()?);
        return Ok((a..b).collect());
    }
    list(v).map(str::parse).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sections_and_comments() {
        let map = parse_config_text("seeds = 0..3 # three\n[local]\neta = 0.5\n\n[server]\nt_max=7\n").unwrap();
        assert_eq!(map["run.seeds"], "0..3");
        assert_eq!(map["local.eta"], "0.5");
        let cfg = ExperimentConfig::from_map(Task::SyntheticWidth, &map).unwrap();
        assert_eq!(cfg.seeds, vec![0, 1, 2]);
        assert_eq!(cfg.local.eta, 0.5);
        assert_eq!(cfg.server.t_max, 7);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_config_errors() {
        let mut map = ConfigMap::new();
        map.insert("local.etaa".into(), "1".into());
        assert!(matches!(ExperimentConfig::from_map(Task::OneShot, &map), Err(Error::Config(_))));
        let mut map = ConfigMap::new();
        map.insert("run.methods".into(), "fedavg,bogus".into());
        assert!(matches!(ExperimentConfig::from_map(Task::OneShot, &map), Err(Error::Config(_))));
        assert!(parse_config_text("[local\n").is_err());
    }

    #[test]
    fn dense_fisher_size_is_checked() {
        let mut map = ConfigMap::new();
        map.insert("run.sweep".into(), "2048".into());
        assert!(ExperimentConfig::from_map(Task::SyntheticWidth, &map).is_err());
    }

    #[test]
    fn defaults_validate() {
        for t in Task::ALL {
            ExperimentConfig::defaults(t).validate().unwrap();
        }
    }

    #[test]
    fn server_keys() {
        let mut cfg = ExperimentConfig::defaults(Task::OneShot);
        cfg.set("server.eta_s", "0.05").unwrap();
        cfg.set("server.eps", "0.001").unwrap();
        assert_eq!(cfg.server.optimizer, ServerOptimizer::Adam { eta_s: 0.05, beta1: 0.9, beta2: 0.99, eps: 0.001 });
        cfg.set("server.optimizer", "gd").unwrap();
        assert!(cfg.set("server.beta1", "0.5").is_err());
        cfg.set("server.eta_s", "auto").unwrap();
        assert_eq!(cfg.server.optimizer, ServerOptimizer::Gd { eta_s: StepSize::Auto });
    }
}
