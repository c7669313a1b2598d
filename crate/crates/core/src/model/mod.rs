//! Encoders: the channel-independent model (CIM) and an early-fusion baseline,
//! both followed by deferred-fusion heads.

mod baseline;
pub mod cim;
pub mod config;

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchStats, BnMode, Graph, Var};
use crate::error::{config_err, dim_err, CimError, Result};
use crate::params::{ParamRole, ParamStore, ParamVars};
use crate::tensor::Tensor;

pub use cim::FeatureBlockView;
pub use config::{BaselineConfig, CimConfig, HeadConfig, ModelConfig};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Batch-norm behaviour of a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Projection,
    Classifier,
}

impl HeadKind {
    pub fn prefix(self) -> &'static str {
        match self {
            HeadKind::Projection => "proj",
            HeadKind::Classifier => "cls",
        }
    }
}

/// Outputs of the backbone.
pub struct Features {
    /// Pre-fusion feature maps `[N, D, H, W]`.
    pub prefusion: Var,
    /// Globally pooled embedding `[N, D]`.
    pub pooled: Var,
    /// Batch statistics of every training-mode batch norm, keyed by layer prefix.
    pub bn_updates: Vec<(String, BatchStats)>,
}

#[derive(Debug, Clone, Copy)]
pub(crate) enum Init {
    Kaiming { fan_in: usize },
    Zeros,
    Ones,
}

#[derive(Debug, Clone)]
pub(crate) struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn kaiming(name: impl Into<String>, shape: &[usize]) -> Self {
        let fan_in = shape[1..].iter().product();
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            init: Init::Kaiming { fan_in },
        }
    }

    pub fn zeros(name: impl Into<String>, shape: &[usize]) -> Self {
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            init: Init::Zeros,
        }
    }

    pub fn ones(name: impl Into<String>, shape: &[usize]) -> Self {
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            init: Init::Ones,
        }
    }
}

pub(crate) fn bn_specs(prefix: &str, c: usize) -> Vec<ParamSpec> {
    vec![
        ParamSpec::ones(format!("{prefix}.gamma"), &[c]),
        ParamSpec::zeros(format!("{prefix}.beta"), &[c]),
        ParamSpec::zeros(format!("{prefix}.running_mean"), &[c]),
        ParamSpec::ones(format!("{prefix}.running_var"), &[c]),
    ]
}

fn head_specs(head: &HeadConfig, in_dim: usize) -> Vec<ParamSpec> {
    let mut specs = Vec::new();
    if let Some(d) = head.projection_dim {
        specs.push(ParamSpec::kaiming("proj.fc1.weight", &[d, in_dim]));
        specs.push(ParamSpec::zeros("proj.fc1.bias", &[d]));
        specs.push(ParamSpec::kaiming("proj.fc2.weight", &[d, d]));
        specs.push(ParamSpec::zeros("proj.fc2.bias", &[d]));
    }
    if let Some(k) = head.num_classes {
        let h = head.classifier_hidden;
        specs.push(ParamSpec::kaiming("cls.fc1.weight", &[h, in_dim]));
        specs.push(ParamSpec::zeros("cls.fc1.bias", &[h]));
        specs.push(ParamSpec::kaiming("cls.fc2.weight", &[k, h]));
        specs.push(ParamSpec::zeros("cls.fc2.bias", &[k]));
    }
    specs
}

fn param_specs(config: &ModelConfig) -> Vec<ParamSpec> {
    let mut specs = match config {
        ModelConfig::Cim(c) => cim::specs(c),
        ModelConfig::EarlyFusion(c) => baseline::specs(c),
    };
    specs.extend(head_specs(config.head(), config.embedding_dim()));
    specs
}

fn is_head(name: &str) -> bool {
    name.starts_with("proj.") || name.starts_with("cls.")
}

/// Learnable scalar counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParameterCount {
    pub backbone: usize,
    pub head: usize,
}

impl ParameterCount {
    pub fn total(&self) -> usize {
        self.backbone + self.head
    }
}

/// Exact learnable parameter count of a configuration (running statistics excluded).
pub fn parameter_count(config: &ModelConfig) -> Result<ParameterCount> {
    config.validate()?;
    let mut count = ParameterCount { backbone: 0, head: 0 };
    for s in param_specs(config) {
        if !ParamRole::of(&s.name).is_learnable() {
            continue;
        }
        let n: usize = s.shape.iter().product();
        if is_head(&s.name) {
            count.head += n;
        } else {
            count.backbone += n;
        }
    }
    Ok(count)
}

/// Early-fusion baseline whose width best matches the total parameter count of
/// `reference` (backbone plus heads), using the same heads.
pub fn matched_baseline(reference: &CimConfig) -> Result<BaselineConfig> {
    let target = parameter_count(&ModelConfig::Cim(reference.clone()))?.total() as f64;
    let mut best: Option<(f64, BaselineConfig)> = None;
    for width in 1..=128 {
        let cfg = BaselineConfig {
            markers: reference.markers,
            width,
            head: reference.head.clone(),
            input_size: reference.input_size,
            seed: reference.seed,
        };
        let total = parameter_count(&ModelConfig::EarlyFusion(cfg.clone()))?.total() as f64;
        let gap = (total / target).ln().abs();
        if best.as_ref().is_none_or(|(g, _)| gap < *g) {
            best = Some((gap, cfg));
        }
    }
    Ok(best.expect("non-empty width range").1)
}

/// Early-fusion baseline with a classifier head of `classes` outputs.
pub fn build_earlyfusion_baseline(markers: usize, classes: usize, width: usize, seed: u64) -> Result<Model> {
    Model::build(ModelConfig::EarlyFusion(BaselineConfig {
        markers,
        width,
        head: HeadConfig {
            projection_dim: None,
            num_classes: Some(classes),
            classifier_hidden: 64,
        },
        input_size: 24,
        seed,
    }))
}

pub fn build_cim(config: CimConfig) -> Result<Model> {
    Model::build(ModelConfig::Cim(config))
}

/// A configured encoder with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
}

impl Model {
    /// Deterministic initialization: Kaiming-uniform (fan-in) weights, zero
    /// biases, unit BN scale, zero BN shift, running stats (0, 1).
    pub fn build(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed());
        let mut params = ParamStore::new();
        for s in param_specs(&config) {
            let t = match s.init {
                Init::Zeros => Tensor::zeros(&s.shape),
                Init::Ones => Tensor::full(&s.shape, 1.0),
                Init::Kaiming { fan_in } => {
                    let bound = (6.0 / fan_in as f64).sqrt();
                    Tensor::from_fn(&s.shape, |_| rng.random_range(-bound..bound))
                }
            };
            params.insert(s.name, t);
        }
        Ok(Self { config, params })
    }

    /// Attach existing parameters, checking names and shapes against the configuration.
    pub fn from_parts(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let specs = param_specs(&config);
        if specs.len() != params.len() {
            return config_err(format!(
                "parameter file holds {} tensors, configuration expects {}",
                params.len(),
                specs.len()
            ));
        }
        for s in &specs {
            let t = params.get(&s.name)?;
            if t.shape() != s.shape.as_slice() {
                return dim_err(format!(
                    "{}: stored shape {:?}, expected {:?}",
                    s.name,
                    t.shape(),
                    s.shape
                ));
            }
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn parameter_count(&self) -> ParameterCount {
        parameter_count(&self.config).expect("validated at construction")
    }

    /// Same backbone with freshly initialized heads drawn from `seed`.
    pub fn with_head(&self, head: HeadConfig, seed: u64) -> Result<Model> {
        let mut config = config_with_seed(self.config.clone(), seed);
        *config.head_mut() = head;
        let mut fresh = Model::build(config)?;
        for (name, t) in self.params.iter() {
            if !is_head(name) {
                *fresh.params.get_mut(name)? = t.clone();
            }
        }
        Ok(fresh)
    }

    pub(crate) fn batchnorm(
        &self,
        g: &mut Graph,
        pv: &ParamVars,
        x: Var,
        prefix: &str,
        mode: Mode,
        updates: &mut Vec<(String, BatchStats)>,
    ) -> Result<Var> {
        let gamma = pv.get(&format!("{prefix}.gamma"))?;
        let beta = pv.get(&format!("{prefix}.beta"))?;
        let bn_mode = match mode {
            Mode::Train => BnMode::Train,
            Mode::Eval => BnMode::Eval {
                running_mean: self.params.get(&format!("{prefix}.running_mean"))?,
                running_var: self.params.get(&format!("{prefix}.running_var"))?,
            },
        };
        let (y, stats) = g.batchnorm(x, gamma, beta, bn_mode, BN_EPS)?;
        if let Some(s) = stats {
            updates.push((prefix.to_string(), s));
        }
        Ok(y)
    }

    /// Backbone forward pass on `x: [N, C, H, W]`.
    pub fn forward_features(&self, g: &mut Graph, pv: &ParamVars, x: Var, mode: Mode) -> Result<Features> {
        let (_, c, _, _) = g.value(x).dims4()?;
        if c != self.config.markers() {
            return dim_err(format!(
                "input has {c} channels, model expects {} markers",
                self.config.markers()
            ));
        }
        match &self.config {
            ModelConfig::Cim(cfg) => cim::forward(self, cfg, g, pv, x, mode),
            ModelConfig::EarlyFusion(cfg) => baseline::forward(self, cfg, g, pv, x, mode),
        }
    }

    /// Deferred-fusion head: `linear → ReLU → linear`.
    pub fn forward_head(&self, g: &mut Graph, pv: &ParamVars, pooled: Var, kind: HeadKind) -> Result<Var> {
        let present = match kind {
            HeadKind::Projection => self.config.head().projection_dim.is_some(),
            HeadKind::Classifier => self.config.head().num_classes.is_some(),
        };
        if !present {
            return config_err(format!("model has no {kind:?} head"));
        }
        let p = kind.prefix();
        let (_, d) = g.value(pooled).dims2()?;
        if d != self.config.embedding_dim() {
            return dim_err(format!(
                "pooled width {d}, head expects {}",
                self.config.embedding_dim()
            ));
        }
        let h = g.linear(pooled, pv.get(&format!("{p}.fc1.weight"))?, Some(pv.get(&format!("{p}.fc1.bias"))?))?;
        let h = g.relu(h)?;
        g.linear(h, pv.get(&format!("{p}.fc2.weight"))?, Some(pv.get(&format!("{p}.fc2.bias"))?))
    }

    /// Eval-mode pooled embeddings for a batch, computed in chunks.
    pub fn embed(&self, x: &Tensor) -> Result<Tensor> {
        self.eval_map(x, |_, g, _, feats| {
            Ok(g.value(feats.pooled).clone())
        })
    }

    /// Eval-mode classifier logits.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        self.eval_map(x, |model, g, pv, feats| {
            let y = model.forward_head(g, pv, feats.pooled, HeadKind::Classifier)?;
            Ok(g.value(y).clone())
        })
    }

    fn eval_map<F>(&self, x: &Tensor, f: F) -> Result<Tensor>
    where
        F: Fn(&Model, &mut Graph, &ParamVars, &Features) -> Result<Tensor>,
    {
        const CHUNK: usize = 256;
        let n = x.shape()[0];
        let mut parts = Vec::new();
        let mut start = 0;
        while start < n {
            let len = CHUNK.min(n - start);
            let mut g = Graph::new();
            let pv = self.params.register(&mut g)?;
            let xv = g.leaf(x.slice_batch(start, len)?)?;
            let feats = self.forward_features(&mut g, &pv, xv, Mode::Eval)?;
            parts.push(f(self, &mut g, &pv, &feats)?);
            start += len;
        }
        if parts.is_empty() {
            return Err(CimError::Empty("no samples to embed".into()));
        }
        Tensor::concat_batch(&parts.iter().collect::<Vec<_>>())
    }

    /// Write weights as CIMW plus the configuration as a JSON sidecar.
    pub fn save(&self, weights: &Path) -> Result<()> {
        self.params.save(weights)?;
        std::fs::write(config_path(weights), serde_json::to_vec_pretty(&self.config)?)?;
        Ok(())
    }

    pub fn load(weights: &Path) -> Result<Self> {
        let config: ModelConfig = serde_json::from_slice(&std::fs::read(config_path(weights))?)?;
        Self::from_parts(config, ParamStore::load(weights)?)
    }
}

fn config_with_seed(config: ModelConfig, seed: u64) -> ModelConfig {
    match config {
        ModelConfig::Cim(c) => ModelConfig::Cim(c.with_seed(seed)),
        ModelConfig::EarlyFusion(mut c) => {
            c.seed = seed;
            ModelConfig::EarlyFusion(c)
        }
    }
}

/// Sidecar path holding the model configuration for a weights file.
pub fn config_path(weights: &Path) -> PathBuf {
    weights.with_extension("model.json")
}
