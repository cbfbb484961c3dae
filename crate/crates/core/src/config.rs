//! Versioned TOML experiment file shared by every CLI subcommand.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schedule::TokenSchedule;
use crate::synth::{gen_corpus, SynthConfig, SynthCorpus};
use crate::trainer::{Regime, TrainConfig};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_size: usize,
    pub eval_size: usize,
    /// Fraction of coarse samples.
    pub mix: f64,
    pub train_seed: u64,
    pub eval_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_size: 3000,
            eval_size: 400,
            mix: 0.5,
            train_seed: 11,
            eval_seed: 12,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    pub seeds: Vec<u64>,
    /// Fixed-regime rows of the accuracy matrix; the dynamic row comes from `[train]`.
    pub fixed_counts: Vec<usize>,
    pub ablation_counts: Vec<usize>,
    pub ablation_weights: Vec<Vec<u64>>,
    pub ablation_seed: u64,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self {
            seeds: vec![1, 2, 3],
            fixed_counts: vec![64, 144, 256],
            ablation_counts: vec![64, 144, 256],
            ablation_weights: vec![vec![5, 3, 2], vec![1, 1, 1], vec![2, 3, 5]],
            ablation_seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub grid: SynthConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub experiment: ExperimentSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            grid: SynthConfig::default(),
            data: DataConfig::default(),
            train: TrainConfig::default(),
            experiment: ExperimentSection::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::format("config", e.message()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::format("config", format!("unsupported version {}", self.version)));
        }
        self.grid.validate()?;
        self.train.validate()?;
        for &n in &self.experiment.fixed_counts {
            Regime::Fixed(n).schedule()?;
        }
        for w in &self.experiment.ablation_weights {
            TokenSchedule::from_ratios(&self.experiment.ablation_counts, w)?;
        }
        Ok(())
    }

    pub fn train_corpus(&self) -> Result<SynthCorpus> {
        gen_corpus(&self.grid, self.data.train_size, self.data.mix, self.data.train_seed)
    }

    pub fn eval_corpus(&self) -> Result<SynthCorpus> {
        gen_corpus(&self.grid, self.data.eval_size, self.data.mix, self.data.eval_seed)
    }

    /// Fixed rows followed by the dynamic row.
    pub fn regimes(&self) -> Result<Vec<Regime>> {
        let mut out: Vec<Regime> = self.experiment.fixed_counts.iter().map(|&n| Regime::Fixed(n)).collect();
        out.push(Regime::Dynamic(TokenSchedule::new(&self.train.counts, &self.train.probs)?));
        Ok(out)
    }
}
