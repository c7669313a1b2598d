//! Run configuration: a JSON file merged with command-line flags.

use std::path::{Path, PathBuf};

use cimlite::data::SynthConfig;
use cimlite::eval::TrainConfig;
use cimlite::lrp::{AggregateConfig, LrpConfig};
use cimlite::model::{matched_baseline, BaselineConfig, CimConfig, HeadConfig, ModelConfig};
use cimlite::ssl::{AugStrength, AugmentConfig, Objective, SslRunConfig};
use cimlite::{CimError, Result};
use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    #[default]
    Cim,
    #[value(name = "baseline")]
    #[serde(alias = "baseline")]
    EarlyFusion,
}

impl Arch {
    pub fn tag(self) -> &'static str {
        match self {
            Arch::Cim => "cim",
            Arch::EarlyFusion => "baseline",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ObjectiveFlag {
    Simclr,
    Vicreg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StrengthFlag {
    Weak,
    Default,
    Strong,
}

/// Flags shared by every command.
#[derive(Debug, Clone, Args)]
pub struct CommonFlags {
    /// JSON run configuration; flags override its fields.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, default_value = ".")]
    pub out_dir: PathBuf,
    /// MPXD dataset file.
    #[arg(long, global = true)]
    pub dataset: Option<PathBuf>,
    /// CIMW weights file (its `.model.json` sidecar must sit next to it).
    #[arg(long, global = true)]
    pub weights: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    pub objective: Option<ObjectiveFlag>,
    #[arg(long, global = true, value_enum)]
    pub aug_strength: Option<StrengthFlag>,
    #[arg(long, global = true, value_parser = ["8", "18", "49"])]
    pub markers: Option<String>,
    #[arg(long, global = true)]
    pub iterations: Option<usize>,
    #[arg(long, global = true)]
    pub batch_size: Option<usize>,
    /// Backbone to train.
    #[arg(long, global = true, value_enum)]
    pub arch: Option<Arch>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub arch: Arch,
    pub seed: u64,
    pub markers: Option<usize>,
    pub synth: Option<SynthConfig>,
    pub model: Option<CimConfig>,
    pub ssl: SslRunConfig,
    pub aug_strength: AugStrength,
    /// Explicit augmentation ranges; replaces the `aug_strength` preset.
    pub augment: Option<AugmentConfig>,
    pub train: TrainConfig,
    pub lrp: LrpConfig,
    pub aggregate: AggregateConfig,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => Ok(serde_json::from_slice(&std::fs::read(p)?)?),
        }
    }

    /// Apply flag overrides. A seed given either way propagates to every stage.
    pub fn merge(mut self, flags: &CommonFlags) -> Result<Self> {
        if let Some(s) = flags.seed {
            self.seed = s;
        }
        if let Some(m) = &flags.markers {
            self.markers = Some(m.parse().map_err(|_| CimError::Config(format!("bad marker count {m}")))?);
        }
        if let Some(a) = flags.arch {
            self.arch = a;
        }
        if let Some(o) = flags.objective {
            self.ssl.objective = match o {
                ObjectiveFlag::Simclr => Objective::Simclr,
                ObjectiveFlag::Vicreg => Objective::Vicreg,
            };
        }
        if let Some(s) = flags.aug_strength {
            self.aug_strength = match s {
                StrengthFlag::Weak => AugStrength::Weak,
                StrengthFlag::Default => AugStrength::Default,
                StrengthFlag::Strong => AugStrength::Strong,
            };
            self.augment = None;
        }
        if let Some(i) = flags.iterations {
            self.ssl.iterations = i;
        }
        if let Some(b) = flags.batch_size {
            self.ssl.batch_size = b;
            self.train.batch_size = b;
        }
        let synth = match self.synth.take() {
            Some(s) => {
                if let Some(m) = self.markers.filter(|&m| m != s.markers.len()) {
                    return Err(CimError::Config(format!(
                        "--markers {m} conflicts with the {}-marker synth config",
                        s.markers.len()
                    )));
                }
                s
            }
            None => SynthConfig::preset(self.markers.unwrap_or(8))?,
        };
        self.markers = Some(synth.markers.len());
        self.synth = Some(SynthConfig { seed: self.seed, ..synth });
        self.ssl.seed = self.seed;
        self.train.seed = self.seed;
        if let Some(m) = self.model.take() {
            self.model = Some(m.with_seed(self.seed));
        }
        Ok(self)
    }

    pub fn synth(&self) -> &SynthConfig {
        self.synth.as_ref().expect("merge fills the synth config")
    }

    pub fn augment(&self) -> AugmentConfig {
        self.augment.clone().unwrap_or_else(|| AugmentConfig::preset(self.aug_strength))
    }

    /// Backbone configuration for `markers` channels with the given heads.
    pub fn model_config(&self, markers: usize, head: HeadConfig) -> Result<ModelConfig> {
        let cim = match &self.model {
            Some(m) if m.markers != markers => {
                return Err(CimError::Config(format!(
                    "model config has {} markers, dataset has {markers}",
                    m.markers
                )))
            }
            Some(m) => m.clone(),
            None => CimConfig::shallow(markers).with_seed(self.seed),
        }
        .with_head(head);
        Ok(match self.arch {
            Arch::Cim => ModelConfig::Cim(cim),
            Arch::EarlyFusion => {
                let base: BaselineConfig = matched_baseline(&cim)?;
                ModelConfig::EarlyFusion(base)
            }
        })
    }
}
