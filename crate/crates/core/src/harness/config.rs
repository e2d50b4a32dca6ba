//! Simulation configuration, loaded from JSON. Unknown keys are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::aggregator::Strategy;
use crate::client::ClientConfig;
use crate::error::{FedError, Result};
use crate::models::ModelSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// Gaussian blobs; the last `holdout_per_class` points of each class
    /// form the evaluation pool.
    Blobs {
        num_classes: usize,
        dim: usize,
        per_class: usize,
        holdout_per_class: usize,
        #[serde(default = "default_spread")]
        spread: f64,
    },
    /// Header `f0,...,f{d-1},label`. Relative paths resolve against the
    /// config file's directory.
    Csv { train: PathBuf, eval: PathBuf },
}

fn default_spread() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PartitionSpec {
    Iid,
    /// Half the data dealt IID, the other half in label-sorted shards.
    Mixed,
    Dirichlet {
        beta: f64,
        #[serde(default = "default_min_size")]
        min_size: usize,
    },
    /// Label-quantity skew: each client holds `chunks` label-sorted shards.
    Lq { chunks: usize },
}

fn default_min_size() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    pub partition: PartitionSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WeightScheme {
    #[default]
    Uniform,
    /// `p_n = |D_n| / sum_j |D_j|`.
    DataProportional,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Evaluate every `every` rounds; the last round is always evaluated.
    #[serde(default = "default_every")]
    pub every: usize,
    /// Fraction of evaluated rounds averaged for the summary accuracy.
    #[serde(default = "default_tail")]
    pub tail_fraction: f64,
}

fn default_every() -> usize {
    1
}

fn default_tail() -> f64 {
    0.1
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            every: default_every(),
            tail_fraction: default_tail(),
        }
    }
}

fn default_seed() -> u64 {
    42
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub model: ModelSpec,
    pub data: DataConfig,
    /// Total clients `N`.
    pub clients: usize,
    /// Clients sampled per round `M`.
    pub sampled: usize,
    /// Rounds `T`.
    pub rounds: usize,
    pub client: ClientConfig,
    pub strategy: Strategy,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub weights: WeightScheme,
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.client.validate()?;
        if self.clients == 0 {
            return Err(FedError::Config("clients must be at least 1".into()));
        }
        if self.sampled == 0 || self.sampled > self.clients {
            return Err(FedError::Config(format!(
                "sampled must lie in 1..={}, got {}",
                self.clients, self.sampled
            )));
        }
        if self.rounds == 0 {
            return Err(FedError::Config("rounds must be at least 1".into()));
        }
        if self.eval.every == 0 {
            return Err(FedError::Config("eval.every must be at least 1".into()));
        }
        if !(self.eval.tail_fraction > 0.0 && self.eval.tail_fraction <= 1.0) {
            return Err(FedError::Config("eval.tail_fraction must lie in (0, 1]".into()));
        }
        match &self.data.source {
            DataSource::Blobs {
                num_classes, dim, per_class, holdout_per_class, spread,
            } => {
                if *num_classes != self.model.num_classes() || *dim != self.model.input_dim() {
                    return Err(FedError::Config("blob shape does not match the model".into()));
                }
                if holdout_per_class >= per_class {
                    return Err(FedError::Config("holdout_per_class must be below per_class".into()));
                }
                if !(*spread >= 0.0 && spread.is_finite()) {
                    return Err(FedError::Config("spread must be non-negative".into()));
                }
            }
            DataSource::Csv { .. } => {}
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: SimConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and validates a config file, resolving relative CSV paths.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| FedError::io(path, e))?;
        let mut cfg = Self::from_json(&text)?;
        if let DataSource::Csv { train, eval } = &mut cfg.data.source {
            let base = path.parent().unwrap_or(Path::new("."));
            for p in [train, eval] {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        Ok(cfg)
    }
}
