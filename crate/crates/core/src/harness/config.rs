use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{CsvSchema, ShiftConfig, StreamKind};
use crate::error::{Error, Result};
use crate::merging::{EncoderRule, EngineConfig, HeadRule};
use crate::nn::Activation;
use crate::training::HyperConfig;

/// Where the domains come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub num_domains: usize,
    pub classes: usize,
    pub input_dim: usize,
    pub shift: ShiftConfig,
    /// One CSV per domain. When non-empty, replaces the synthetic generator.
    pub csv_files: Vec<PathBuf>,
    pub csv_schema: CsvSchema,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            num_domains: 4,
            classes: 7,
            input_dim: 16,
            shift: ShiftConfig::default(),
            csv_files: Vec::new(),
            csv_schema: CsvSchema::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    pub learning_rates: Vec<f64>,
    pub seeds_per_lr: usize,
    pub epochs: usize,
    pub weight_decay: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub hidden_dims: Vec<usize>,
    pub activation: Activation,
}

impl Default for SweepConfig {
    fn default() -> Self {
        let h = HyperConfig::default();
        SweepConfig {
            learning_rates: vec![1e-2, 3e-3],
            seeds_per_lr: 1,
            epochs: h.epochs,
            weight_decay: h.weight_decay,
            momentum: h.momentum,
            batch_size: h.batch_size,
            hidden_dims: h.hidden_dims,
            activation: h.activation,
        }
    }
}

impl SweepConfig {
    /// Expands to one [`HyperConfig`] per (learning rate, seed); `base_seed`
    /// offsets the mini-batch order seeds.
    pub fn expand(&self, base_seed: u64) -> Vec<HyperConfig> {
        let mut out = Vec::new();
        for (i, &lr) in self.learning_rates.iter().enumerate() {
            for s in 0..self.seeds_per_lr {
                out.push(HyperConfig {
                    learning_rate: lr,
                    epochs: self.epochs,
                    weight_decay: self.weight_decay,
                    seed: base_seed.wrapping_add((i * self.seeds_per_lr + s) as u64),
                    activation: self.activation,
                    hidden_dims: self.hidden_dims.clone(),
                    momentum: self.momentum,
                    batch_size: self.batch_size,
                });
            }
        }
        out
    }
}

/// Optional shared pretraining of the encoder on an unshifted reference
/// domain before per-domain fine-tuning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub enabled: bool,
    pub samples: usize,
    pub epochs: usize,
    pub learning_rate: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig { enabled: true, samples: 4000, epochs: 10, learning_rate: 1e-2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StreamConfig {
    pub kind: StreamKind,
    pub batch_size: usize,
    pub num_batches: usize,
}

impl Default for StreamConfig {
    fn default() -> Self {
        StreamConfig { kind: StreamKind::Dirichlet(0.05), batch_size: 32, num_batches: 100 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaselineConfig {
    pub task_arithmetic_lambda: f64,
    pub ties_trim: f64,
    pub ties_lambda: f64,
    pub fisher_samples: usize,
    pub fisher_min_weight: f64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            task_arithmetic_lambda: 0.3,
            ties_trim: 0.2,
            ties_lambda: 0.3,
            fisher_samples: 500,
            fisher_min_weight: 1e-6,
        }
    }
}

/// A method evaluated on each target stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    /// Entropy-weighted encoder plus decoupled head.
    EntropyAdaptive,
    /// Entropy weights shared by encoder and head.
    EntropyOnly,
    /// Uniform encoder with the decoupled head.
    DecoupledHeadOnly,
    Mean,
    Ensemble,
    TaskArithmetic,
    Ties,
    Fisher,
    SingleExpert(usize),
}

impl Method {
    pub const ALL_MERGERS: [Method; 8] = [
        Method::EntropyAdaptive,
        Method::EntropyOnly,
        Method::DecoupledHeadOnly,
        Method::Mean,
        Method::Ensemble,
        Method::TaskArithmetic,
        Method::Ties,
        Method::Fisher,
    ];

    /// Encoder and head rules for the online engine; `None` for other methods.
    pub fn engine_rules(&self) -> Option<(EncoderRule, HeadRule)> {
        match self {
            Method::EntropyAdaptive => Some((EncoderRule::Entropy, HeadRule::EntropyGap)),
            Method::EntropyOnly => Some((EncoderRule::Entropy, HeadRule::Shared)),
            Method::DecoupledHeadOnly => Some((EncoderRule::Uniform, HeadRule::EntropyGap)),
            _ => None,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::EntropyAdaptive => f.write_str("entropy_adaptive"),
            Method::EntropyOnly => f.write_str("entropy_only"),
            Method::DecoupledHeadOnly => f.write_str("decoupled_head_only"),
            Method::Mean => f.write_str("mean"),
            Method::Ensemble => f.write_str("ensemble"),
            Method::TaskArithmetic => f.write_str("task_arithmetic"),
            Method::Ties => f.write_str("ties"),
            Method::Fisher => f.write_str("fisher"),
            Method::SingleExpert(k) => write!(f, "single_expert:{k}"),
        }
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "entropy_adaptive" => Method::EntropyAdaptive,
            "entropy_only" => Method::EntropyOnly,
            "decoupled_head_only" => Method::DecoupledHeadOnly,
            "mean" => Method::Mean,
            "ensemble" => Method::Ensemble,
            "task_arithmetic" => Method::TaskArithmetic,
            "ties" => Method::Ties,
            "fisher" => Method::Fisher,
            other => match other.strip_prefix("single_expert:") {
                Some(k) => Method::SingleExpert(
                    k.parse().map_err(|_| Error::Config(format!("bad expert index in {other:?}")))?,
                ),
                None => return Err(Error::Config(format!("unknown method {other:?}"))),
            },
        })
    }
}

impl Serialize for Method {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Method {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub sweep: SweepConfig,
    pub pretrain: PretrainConfig,
    pub engine: EngineConfig,
    pub stream: StreamConfig,
    pub baselines: BaselineConfig,
    pub methods: Vec<Method>,
    /// Each seed regenerates data, pools, streams and augmentation draws.
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            data: DataConfig::default(),
            sweep: SweepConfig::default(),
            pretrain: PretrainConfig::default(),
            engine: EngineConfig::default(),
            stream: StreamConfig::default(),
            baselines: BaselineConfig::default(),
            methods: vec![Method::EntropyAdaptive, Method::Mean],
            seeds: vec![0],
            output_dir: PathBuf::from("out"),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(Error::Config("at least one method is required".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.stream.batch_size == 0 || self.stream.num_batches == 0 {
            return Err(Error::Config("stream batch_size and num_batches must be at least 1".into()));
        }
        let domains = if self.data.csv_files.is_empty() { self.data.num_domains } else { self.data.csv_files.len() };
        if domains < 3 {
            return Err(Error::Config(format!("leave-one-out needs at least 3 domains, got {domains}")));
        }
        for m in &self.methods {
            if let Method::SingleExpert(k) = m {
                if *k + 1 >= domains {
                    return Err(Error::Config(format!("{m}: pools hold only {} experts", domains - 1)));
                }
            }
        }
        if self.sweep.learning_rates.is_empty() || self.sweep.seeds_per_lr == 0 {
            return Err(Error::Config("sweep needs at least one learning rate and seed".into()));
        }
        for h in self.sweep.expand(0) {
            h.validate()?;
        }
        if self.pretrain.enabled {
            if !self.data.csv_files.is_empty() {
                return Err(Error::Config("pretraining needs the synthetic generator".into()));
            }
            if self.pretrain.samples < 2 || self.pretrain.epochs == 0 || !(self.pretrain.learning_rate > 0.0) {
                return Err(Error::Config("pretrain samples, epochs and learning_rate must be positive".into()));
            }
        }
        self.engine.validate()?;
        let b = &self.baselines;
        if !(b.ties_trim > 0.0 && b.ties_trim <= 1.0) {
            return Err(Error::Config(format!("ties_trim {} not in (0, 1]", b.ties_trim)));
        }
        if b.fisher_samples == 0 || !(b.fisher_min_weight > 0.0) {
            return Err(Error::Config("fisher_samples and fisher_min_weight must be positive".into()));
        }
        Ok(())
    }
}
