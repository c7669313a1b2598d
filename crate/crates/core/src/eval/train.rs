//! Supervised fine-tuning and frozen-backbone linear evaluation.
//!
//! Both loops use weighted cross-entropy with weights from the training
//! split, Adam, shuffled mini-batches, and keep the parameters of the epoch
//! with the best validation balanced accuracy (epoch 0 is the starting point).

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::{AdamConfig, AdamState};
use super::loss::class_weights;
use super::metrics::{argmax_rows, balanced_accuracy, Confusion};
use super::report::{EvalReport, SplitSizes};
use crate::autodiff::Graph;
use crate::data::{DatasetBundle, Split};
use crate::error::{config_err, Result};
use crate::model::{HeadKind, Mode, Model, BN_MOMENTUM};
use crate::params::ParamStore;
use crate::seeding::stream_seed;
use crate::ssl::augment::{augment_batch, AugmentConfig};
use crate::ssl::pretrain::gather;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Augmentation of training batches; ignored by the linear probe.
    pub augment: Option<AugmentConfig>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 64,
            adam: AdamConfig::default(),
            augment: Some(AugmentConfig::default()),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return config_err("batch size must be positive");
        }
        if let Some(a) = &self.augment {
            a.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_balanced_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct SupervisedOutcome {
    pub model: Model,
    pub report: EvalReport,
    pub history: Vec<EpochLog>,
}

#[derive(Debug, Clone)]
pub struct LinearOutcome {
    /// `probe.weight [K,D]`, `probe.bias [K]`, `probe.mean [D]`, `probe.std [D]`.
    pub probe: ParamStore,
    pub report: EvalReport,
    pub history: Vec<EpochLog>,
}

fn split_sizes(bundle: &DatasetBundle) -> SplitSizes {
    SplitSizes {
        train: bundle.indices(Split::Train).len(),
        val: bundle.indices(Split::Val).len(),
        test: bundle.indices(Split::Test).len(),
    }
}

fn confusion_of(scores: &Tensor, labels: &[usize], k: usize) -> Result<Confusion> {
    Confusion::from_predictions(labels, &argmax_rows(scores)?, k)
}

/// Run `epochs` passes of `step` over shuffled training batches and keep the
/// state with the best validation score.
fn fit<S: Clone>(
    state: &mut S,
    cfg: &TrainConfig,
    n_train: usize,
    mut step: impl FnMut(&mut S, &[usize], u64) -> Result<f64>,
    validate: impl Fn(&S) -> Result<f64>,
) -> Result<(usize, f64, Vec<EpochLog>)> {
    let mut best = (0, validate(state)?);
    let mut best_state = state.clone();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..n_train).collect();
    for epoch in 1..=cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, epoch as u64, 0x7A1));
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let stream = stream_seed(cfg.seed, epoch as u64, b as u64);
            loss_sum += step(state, chunk, stream)?;
            batches += 1;
        }
        let val = validate(state)?;
        history.push(EpochLog {
            epoch,
            train_loss: loss_sum / batches.max(1) as f64,
            val_balanced_accuracy: val,
        });
        if val > best.1 {
            best = (epoch, val);
            best_state = state.clone();
        }
    }
    *state = best_state;
    Ok((best.0, best.1, history))
}

/// Train backbone and classifier head end to end.
pub fn train_supervised(model: &Model, bundle: &DatasetBundle, cfg: &TrainConfig) -> Result<SupervisedOutcome> {
    cfg.validate()?;
    bundle.validate()?;
    let k = bundle.num_classes();
    if model.config().head().num_classes != Some(k) {
        return config_err(format!("model needs a {k}-class classifier head"));
    }
    let (train_x, train_y) = bundle.subset(Split::Train)?;
    let (val_x, val_y) = bundle.subset(Split::Val)?;
    let (test_x, test_y) = bundle.subset(Split::Test)?;
    let weights = class_weights(&train_y, k)?;
    let mut adam = AdamState::new(cfg.adam.clone())?;
    let mut state = model.clone();

    let step = |m: &mut Model, idx: &[usize], stream: u64| -> Result<f64> {
        let mut x = gather(&train_x, idx)?;
        if let Some(aug) = &cfg.augment {
            x = augment_batch(&x, aug, stream, 0)?;
        }
        let labels: Vec<usize> = idx.iter().map(|&i| train_y[i]).collect();
        let mut g = Graph::new();
        let pv = m.params().register(&mut g)?;
        let xv = g.leaf(x)?;
        let f = m.forward_features(&mut g, &pv, xv, Mode::Train)?;
        let logits = m.forward_head(&mut g, &pv, f.pooled, HeadKind::Classifier)?;
        let loss = g.weighted_cross_entropy(logits, &labels, &weights)?;
        let value = g.value(loss).data()[0];
        let grads = g.backward(loss)?;
        let grads = pv.collect(&g, &grads);
        adam.step(m.params_mut(), &grads)?;
        m.params_mut().apply_bn_updates(&f.bn_updates, BN_MOMENTUM)?;
        Ok(value)
    };
    let validate = |m: &Model| balanced_accuracy(&confusion_of(&m.logits(&val_x)?, &val_y, k)?);
    let (best_epoch, best_val, history) = fit(&mut state, cfg, train_y.len(), step, validate)?;

    let confusion = confusion_of(&state.logits(&test_x)?, &test_y, k)?;
    let report = EvalReport::from_confusion(confusion, bundle.class_names(), split_sizes(bundle), best_epoch, best_val)?;
    Ok(SupervisedOutcome {
        model: state,
        report,
        history,
    })
}

/// Per-feature mean and standard deviation of the rows of `[N,D]`.
fn feature_stats(x: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
    let (n, d) = x.dims2()?;
    let mut mean = vec![0.0; d];
    for row in x.data().chunks(d) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v / n as f64;
        }
    }
    let mut var = vec![0.0; d];
    for row in x.data().chunks(d) {
        for j in 0..d {
            var[j] += (row[j] - mean[j]).powi(2) / n as f64;
        }
    }
    // constant features are centred but left unscaled
    let std = var.iter().map(|v| if v.sqrt() > 1e-12 { v.sqrt() } else { 1.0 }).collect();
    Ok((mean, std))
}

fn standardize(x: &Tensor, mean: &[f64], std: &[f64]) -> Result<Tensor> {
    let d = mean.len();
    Tensor::new(
        x.shape(),
        x.data().iter().enumerate().map(|(i, v)| (v - mean[i % d]) / std[i % d]).collect(),
    )
}

/// Probe scores for raw (unstandardised) embeddings.
pub fn probe_scores(probe: &ParamStore, embeddings: &Tensor) -> Result<Tensor> {
    let z = standardize(embeddings, probe.get("probe.mean")?.data(), probe.get("probe.std")?.data())?;
    crate::autodiff::linear(&z, probe.get("probe.weight")?, Some(probe.get("probe.bias")?))
}

/// Train a linear classifier on frozen eval-mode pooled embeddings.
///
/// Embeddings are standardised with training-split statistics; no
/// augmentation is applied (the backbone is frozen, so features are computed once).
pub fn linear_eval(model: &Model, bundle: &DatasetBundle, cfg: &TrainConfig) -> Result<LinearOutcome> {
    cfg.validate()?;
    bundle.validate()?;
    let emb = model.embed(&bundle.patches)?;
    linear_eval_embeddings(&emb, bundle, cfg)
}

/// Linear evaluation on precomputed `[N,D]` embeddings aligned with `bundle`.
pub fn linear_eval_embeddings(emb: &Tensor, bundle: &DatasetBundle, cfg: &TrainConfig) -> Result<LinearOutcome> {
    cfg.validate()?;
    let k = bundle.num_classes();
    let (n, d) = emb.dims2()?;
    if n != bundle.len() {
        return config_err(format!("{n} embeddings for {} patches", bundle.len()));
    }
    let rows = |split| -> Result<(Tensor, Vec<usize>)> {
        let idx = bundle.indices(split);
        Ok((gather(emb, &idx)?, idx.iter().map(|&i| bundle.labels[i]).collect()))
    };
    let (train_x, train_y) = rows(Split::Train)?;
    let (val_x, val_y) = rows(Split::Val)?;
    let (test_x, test_y) = rows(Split::Test)?;
    let (mean, std) = feature_stats(&train_x)?;
    let train_z = standardize(&train_x, &mean, &std)?;
    let weights = class_weights(&train_y, k)?;

    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, 0, 0x9B0));
    let bound = (6.0 / d as f64).sqrt();
    let mut probe = ParamStore::new();
    probe.insert("probe.weight", Tensor::from_fn(&[k, d], |_| rng.random_range(-bound..bound)));
    probe.insert("probe.bias", Tensor::zeros(&[k]));
    let mut adam = AdamState::new(cfg.adam.clone())?;

    let step = |p: &mut ParamStore, idx: &[usize], _: u64| -> Result<f64> {
        let labels: Vec<usize> = idx.iter().map(|&i| train_y[i]).collect();
        let mut g = Graph::new();
        let pv = p.register(&mut g)?;
        let x = g.leaf(gather(&train_z, idx)?)?;
        let logits = g.linear(x, pv.get("probe.weight")?, Some(pv.get("probe.bias")?))?;
        let loss = g.weighted_cross_entropy(logits, &labels, &weights)?;
        let value = g.value(loss).data()[0];
        let grads = g.backward(loss)?;
        adam.step(p, &pv.collect(&g, &grads))?;
        Ok(value)
    };
    let with_stats = |p: &ParamStore| {
        let mut full = p.clone();
        full.insert("probe.mean", Tensor::new(&[d], mean.clone()).expect("length d"));
        full.insert("probe.std", Tensor::new(&[d], std.clone()).expect("length d"));
        full
    };
    let validate = |p: &ParamStore| balanced_accuracy(&confusion_of(&probe_scores(&with_stats(p), &val_x)?, &val_y, k)?);
    let (best_epoch, best_val, history) = fit(&mut probe, cfg, train_y.len(), step, validate)?;
    let probe = with_stats(&probe);

    let confusion = confusion_of(&probe_scores(&probe, &test_x)?, &test_y, k)?;
    let report = EvalReport::from_confusion(confusion, bundle.class_names(), split_sizes(bundle), best_epoch, best_val)?;
    Ok(LinearOutcome { probe, report, history })
}
