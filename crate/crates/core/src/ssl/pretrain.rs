//! Self-supervised pretraining loop.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchStats, Graph, Var};
use crate::error::{config_err, dim_err, CimError, Result};
use crate::model::{HeadKind, Mode, Model, BN_MOMENTUM};
use crate::params::ParamVars;
use crate::ssl::augment::{augment_batch, stream_seed, AugmentConfig};
use crate::ssl::lars::{cosine_lr, LarsConfig, LarsState};
use crate::ssl::losses::VicregWeights;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    #[default]
    Simclr,
    Vicreg,
}

impl std::str::FromStr for Objective {
    type Err = CimError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "simclr" => Ok(Objective::Simclr),
            "vicreg" => Ok(Objective::Vicreg),
            other => config_err(format!("unknown objective {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SslRunConfig {
    pub objective: Objective,
    pub temperature: f64,
    /// Patches per batch; each contributes two views.
    pub batch_size: usize,
    pub iterations: usize,
    pub vicreg: VicregWeights,
    pub lars: LarsConfig,
    /// Write a checkpoint every this many iterations (0 disables).
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for SslRunConfig {
    fn default() -> Self {
        Self {
            objective: Objective::Simclr,
            temperature: 0.2,
            batch_size: 64,
            iterations: 500,
            vicreg: VicregWeights::default(),
            lars: LarsConfig::default(),
            checkpoint_every: 0,
            seed: 0,
        }
    }
}

impl SslRunConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return config_err(format!("temperature {} must be positive", self.temperature));
        }
        if self.batch_size < 4 {
            return config_err(format!("batch size {} below 4", self.batch_size));
        }
        self.lars.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainOutcome {
    /// Objective value at every iteration, before that iteration's update.
    pub history: Vec<f64>,
    pub checkpoints: Vec<PathBuf>,
}

/// Indices of the patches drawn at `iteration` (without replacement).
pub fn batch_indices(seed: u64, iteration: usize, available: usize, batch: usize) -> Result<Vec<usize>> {
    if batch > available {
        return config_err(format!("batch size {batch} exceeds {available} training patches"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, iteration as u64, u64::MAX));
    Ok(rand::seq::index::sample(&mut rng, available, batch).into_vec())
}

/// Rows of an `[N,...]` tensor in the given order.
pub fn gather(t: &Tensor, indices: &[usize]) -> Result<Tensor> {
    let n = t.shape()[0];
    let stride = t.len() / n.max(1);
    let mut data = Vec::with_capacity(indices.len() * stride);
    for &i in indices {
        if i >= n {
            return dim_err(format!("row {i} out of range for {n} rows"));
        }
        data.extend_from_slice(&t.data()[i * stride..(i + 1) * stride]);
    }
    let mut shape = t.shape().to_vec();
    shape[0] = indices.len();
    Tensor::new(&shape, data)
}

/// The two independently augmented views of the batch used at `iteration`.
pub fn batch_views(
    patches: &Tensor,
    cfg: &SslRunConfig,
    aug: &AugmentConfig,
    iteration: usize,
) -> Result<(Tensor, Tensor)> {
    let idx = batch_indices(cfg.seed, iteration, patches.shape()[0], cfg.batch_size)?;
    let batch = gather(patches, &idx)?;
    let base = stream_seed(cfg.seed, iteration as u64, 0xA06);
    Ok((augment_batch(&batch, aug, base, 0)?, augment_batch(&batch, aug, base, 1)?))
}

struct Forward {
    loss: Var,
    vars: ParamVars,
    bn_updates: Vec<(String, BatchStats)>,
}

fn objective_graph(model: &Model, g: &mut Graph, va: &Tensor, vb: &Tensor, cfg: &SslRunConfig) -> Result<Forward> {
    let vars = model.params().register(g)?;
    match cfg.objective {
        Objective::Simclr => {
            let x = g.leaf(Tensor::concat_batch(&[va, vb])?)?;
            let f = model.forward_features(g, &vars, x, Mode::Train)?;
            let z = model.forward_head(g, &vars, f.pooled, HeadKind::Projection)?;
            let loss = g.nt_xent(z, cfg.temperature)?;
            Ok(Forward {
                loss,
                vars,
                bn_updates: f.bn_updates,
            })
        }
        Objective::Vicreg => {
            // each branch normalises with its own batch statistics
            let mut bn_updates = Vec::new();
            let mut z = Vec::with_capacity(2);
            for v in [va, vb] {
                let x = g.leaf(v.clone())?;
                let f = model.forward_features(g, &vars, x, Mode::Train)?;
                z.push(model.forward_head(g, &vars, f.pooled, HeadKind::Projection)?);
                bn_updates.extend(f.bn_updates);
            }
            let loss = g.vicreg(z[0], z[1], &cfg.vicreg)?;
            Ok(Forward { loss, vars, bn_updates })
        }
    }
}

/// Objective value of `model` on a pair of views, without updating anything.
pub fn batch_loss(model: &Model, va: &Tensor, vb: &Tensor, cfg: &SslRunConfig) -> Result<f64> {
    let mut g = Graph::new();
    let f = objective_graph(model, &mut g, va, vb, cfg)?;
    Ok(g.value(f.loss).data()[0])
}

/// Train backbone and projection head on `patches` (`[N,C,H,W]`, training split).
///
/// Checkpoints are written as `ckpt_{iter:06}.cimw` under `checkpoint_dir`
/// when `cfg.checkpoint_every > 0`.
pub fn pretrain(
    model: &mut Model,
    patches: &Tensor,
    cfg: &SslRunConfig,
    aug: &AugmentConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    aug.validate()?;
    let (n, ..) = patches.dims4()?;
    if cfg.batch_size > n {
        return config_err(format!("batch size {} exceeds {n} training patches", cfg.batch_size));
    }
    if model.config().head().projection_dim.is_none() {
        return config_err("pretraining requires a projection head");
    }
    let mut opt = LarsState::new(cfg.lars.clone())?;
    let mut history = Vec::with_capacity(cfg.iterations);
    let mut checkpoints = Vec::new();
    for it in 0..cfg.iterations {
        let (va, vb) = batch_views(patches, cfg, aug, it)?;
        let mut g = Graph::new();
        let f = objective_graph(model, &mut g, &va, &vb, cfg).map_err(|e| diverged(it, e))?;
        let loss = g.value(f.loss).data()[0];
        let grads = g.backward(f.loss).map_err(|e| diverged(it, e))?;
        let grads = f.vars.collect(&g, &grads);
        let lr = cosine_lr(cfg.lars.lr, it, cfg.iterations);
        opt.step(model.params_mut(), &grads, lr).map_err(|e| diverged(it, e))?;
        model.params_mut().apply_bn_updates(&f.bn_updates, BN_MOMENTUM)?;
        history.push(loss);
        if let Some(dir) = checkpoint_dir {
            if cfg.checkpoint_every > 0 && (it + 1) % cfg.checkpoint_every == 0 {
                let path = dir.join(format!("ckpt_{:06}.cimw", it + 1));
                model.params().save(&path)?;
                checkpoints.push(path);
            }
        }
    }
    Ok(PretrainOutcome { history, checkpoints })
}

fn diverged(iteration: usize, e: CimError) -> CimError {
    match e {
        CimError::NonFinite(msg) => CimError::NonFinite(format!("diverged at iteration {iteration}: {msg}")),
        other => other,
    }
}

/// `iteration,loss` CSV, one row per iteration.
pub fn write_loss_history(path: &Path, history: &[f64]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "iteration,loss")?;
    for (i, l) in history.iter().enumerate() {
        writeln!(f, "{i},{l}")?;
    }
    f.flush()?;
    Ok(())
}
