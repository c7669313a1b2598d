use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};

/// Fusion head sizes. Either head may be absent.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadConfig {
    /// Output width of the two-layer projection head used for pretraining.
    pub projection_dim: Option<usize>,
    /// Number of classes of the two-layer classifier head.
    pub num_classes: Option<usize>,
    #[serde(default = "default_hidden")]
    pub classifier_hidden: usize,
}

fn default_hidden() -> usize {
    64
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            projection_dim: Some(64),
            num_classes: None,
            classifier_hidden: 64,
        }
    }
}

impl HeadConfig {
    pub fn none() -> Self {
        Self {
            projection_dim: None,
            num_classes: None,
            classifier_hidden: 64,
        }
    }
}

/// Configuration of the channel-independent backbone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CimConfig {
    /// Number of input markers `C`.
    pub markers: usize,
    /// Per-marker feature width `k`.
    pub width: usize,
    /// Number of channel-independent blocks `N`.
    pub depth: usize,
    /// Squeeze-and-excitation reduction `r` inside each marker group.
    pub se_reduction: usize,
    #[serde(flatten)]
    pub head: HeadConfig,
    #[serde(default = "default_input")]
    pub input_size: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_input() -> usize {
    24
}

impl CimConfig {
    /// The shallow preset: one block, four features per marker.
    pub fn shallow(markers: usize) -> Self {
        Self {
            markers,
            width: 4,
            depth: 1,
            se_reduction: 2,
            head: HeadConfig::default(),
            input_size: 24,
            seed: 0,
        }
    }

    pub fn with_head(mut self, head: HeadConfig) -> Self {
        self.head = head;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn se_hidden(&self) -> usize {
        self.width / self.se_reduction
    }

    /// Width of the pre-fusion representation, `C·k`.
    pub fn feature_dim(&self) -> usize {
        self.markers * self.width
    }

    pub fn validate(&self) -> Result<()> {
        if self.markers == 0 || self.width == 0 {
            return config_err("markers and width must be >= 1");
        }
        if !matches!(self.se_reduction, 1 | 2) || self.width % self.se_reduction != 0 {
            return config_err(format!(
                "se_reduction must be 1 or 2 and divide width {} (got {})",
                self.width, self.se_reduction
            ));
        }
        if self.input_size == 0 {
            return config_err("input_size must be >= 1");
        }
        validate_head(&self.head)
    }
}

/// Configuration of the early-fusion baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineConfig {
    pub markers: usize,
    /// Channel count of every convolution after the first, full-mixing one.
    pub width: usize,
    #[serde(flatten)]
    pub head: HeadConfig,
    #[serde(default = "default_input")]
    pub input_size: usize,
    #[serde(default)]
    pub seed: u64,
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.markers == 0 || self.width == 0 {
            return config_err("markers and width must be >= 1");
        }
        validate_head(&self.head)
    }
}

fn validate_head(h: &HeadConfig) -> Result<()> {
    if h.projection_dim == Some(0) || h.classifier_hidden == 0 {
        return config_err("head widths must be >= 1");
    }
    if matches!(h.num_classes, Some(k) if k < 2) {
        return config_err("classifier needs at least 2 classes");
    }
    Ok(())
}

/// Either backbone, tagged by `arch` in JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "arch", rename_all = "snake_case")]
pub enum ModelConfig {
    Cim(CimConfig),
    EarlyFusion(BaselineConfig),
}

impl ModelConfig {
    pub fn markers(&self) -> usize {
        match self {
            ModelConfig::Cim(c) => c.markers,
            ModelConfig::EarlyFusion(c) => c.markers,
        }
    }

    pub fn head(&self) -> &HeadConfig {
        match self {
            ModelConfig::Cim(c) => &c.head,
            ModelConfig::EarlyFusion(c) => &c.head,
        }
    }

    pub fn head_mut(&mut self) -> &mut HeadConfig {
        match self {
            ModelConfig::Cim(c) => &mut c.head,
            ModelConfig::EarlyFusion(c) => &mut c.head,
        }
    }

    pub fn seed(&self) -> u64 {
        match self {
            ModelConfig::Cim(c) => c.seed,
            ModelConfig::EarlyFusion(c) => c.seed,
        }
    }

    /// Width of the pooled embedding.
    pub fn embedding_dim(&self) -> usize {
        match self {
            ModelConfig::Cim(c) => c.feature_dim(),
            ModelConfig::EarlyFusion(c) => c.width,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ModelConfig::Cim(c) => c.validate(),
            ModelConfig::EarlyFusion(c) => c.validate(),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ModelConfig::Cim(_) => "cim",
            ModelConfig::EarlyFusion(_) => "early_fusion",
        }
    }
}
