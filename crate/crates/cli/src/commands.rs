use std::path::{Path, PathBuf};

use cimlite::data::{generate_synthetic, load_bundle, patch_position, save_bundle, write_maps, DatasetBundle, Split};
use cimlite::diagnostics::gradient_suite;
use cimlite::eval::report::{comparison_table, recall_comparison_csv};
use cimlite::eval::{linear_eval, train_supervised, EvalReport};
use cimlite::lrp::{explain_batch, phenotype_csv, phenotype_patches, FoldedCim};
use cimlite::model::{HeadConfig, Model};
use cimlite::ssl::pretrain::{pretrain, write_loss_history};
use cimlite::{CimError, Result, Tensor};
use serde::Serialize;

use crate::config::{CommonFlags, RunConfig};
use crate::manifest::Recorder;

const GRAD_TOLERANCE: f64 = 1e-4;

pub struct Ctx {
    pub flags: CommonFlags,
    pub cfg: RunConfig,
}

impl Ctx {
    pub fn new(flags: CommonFlags) -> Result<Self> {
        let cfg = RunConfig::load(flags.config.as_deref())?.merge(&flags)?;
        std::fs::create_dir_all(&flags.out_dir)?;
        Ok(Self { flags, cfg })
    }

    fn out(&self, name: &str) -> PathBuf {
        self.flags.out_dir.join(name)
    }

    fn dataset(&self, rec: &mut Recorder) -> Result<DatasetBundle> {
        let path = required(&self.flags.dataset, "--dataset")?;
        rec.input(path);
        load_bundle(path)
    }

    fn model(&self, rec: &mut Recorder) -> Result<Model> {
        let path = required(&self.flags.weights, "--weights")?;
        rec.input(path);
        Model::load(path)
    }

    fn finish(&self, rec: Recorder) -> Result<()> {
        let snapshot = serde_json::to_value(&self.cfg)?;
        let path = rec.finish(&self.flags.out_dir, snapshot, self.cfg.seed)?;
        println!("manifest {}", path.display());
        Ok(())
    }
}

fn required<'a>(p: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    let p = p
        .as_deref()
        .ok_or_else(|| CimError::Config(format!("{flag} is required")))?;
    if !p.exists() {
        return Err(CimError::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("{} not found", p.display()),
        )));
    }
    Ok(p)
}

fn write_report(rec: &mut Recorder, ctx: &Ctx, stem: &str, report: &EvalReport) -> Result<()> {
    report.write_json(&rec.artifact(ctx.out(&format!("{stem}_report.json"))))?;
    std::fs::write(rec.artifact(ctx.out(&format!("{stem}_confusion.csv"))), report.confusion_csv())?;
    std::fs::write(rec.artifact(ctx.out(&format!("{stem}_recall.csv"))), report.recall_csv())?;
    print!("{}", report.to_table());
    Ok(())
}

fn weights_stem(path: &Path) -> String {
    path.file_stem().map_or_else(|| "model".into(), |s| s.to_string_lossy().into_owned())
}

pub fn gen_data(ctx: &Ctx) -> Result<()> {
    let mut rec = Recorder::new("gen-data");
    let bundle = generate_synthetic(ctx.cfg.synth())?;
    let path = rec.artifact(ctx.out("dataset.mpxd"));
    save_bundle(&bundle, &path)?;
    rec.artifact(cimlite::data::sidecar_path(&path));
    println!("wrote {} patches × {} markers to {}", bundle.len(), bundle.panel.len(), path.display());
    ctx.finish(rec)
}

pub fn pretrain_cmd(ctx: &Ctx) -> Result<()> {
    let mut rec = Recorder::new("pretrain");
    let bundle = ctx.dataset(&mut rec)?;
    let head = HeadConfig {
        num_classes: None,
        ..HeadConfig::default()
    };
    let mut model = Model::build(ctx.cfg.model_config(bundle.panel.len(), head)?)?;
    let (train_x, _) = bundle.subset(Split::Train)?;
    let ckpt_dir = ctx.out("checkpoints");
    if ctx.cfg.ssl.checkpoint_every > 0 {
        std::fs::create_dir_all(&ckpt_dir)?;
    }
    let outcome = pretrain(&mut model, &train_x, &ctx.cfg.ssl, &ctx.cfg.augment(), Some(&ckpt_dir))?;
    rec.artifacts.extend(outcome.checkpoints);
    let tag = ctx.cfg.arch.tag();
    let weights = rec.artifact(ctx.out(&format!("{tag}_ssl.cimw")));
    model.save(&weights)?;
    rec.artifact(cimlite::model::config_path(&weights));
    write_loss_history(&rec.artifact(ctx.out(&format!("{tag}_ssl_loss.csv"))), &outcome.history)?;
    if let (Some(first), Some(last)) = (outcome.history.first(), outcome.history.last()) {
        println!("loss {first:.4} -> {last:.4} over {} iterations", outcome.history.len());
    }
    println!("weights {}", weights.display());
    ctx.finish(rec)
}

pub fn train_sup(ctx: &Ctx) -> Result<()> {
    let mut rec = Recorder::new("train-sup");
    let bundle = ctx.dataset(&mut rec)?;
    let head = HeadConfig {
        projection_dim: None,
        num_classes: Some(bundle.num_classes()),
        ..HeadConfig::default()
    };
    let model = Model::build(ctx.cfg.model_config(bundle.panel.len(), head)?)?;
    let outcome = train_supervised(&model, &bundle, &ctx.cfg.train)?;
    let tag = format!("{}_sup", ctx.cfg.arch.tag());
    let weights = rec.artifact(ctx.out(&format!("{tag}.cimw")));
    outcome.model.save(&weights)?;
    rec.artifact(cimlite::model::config_path(&weights));
    write_report(&mut rec, ctx, &tag, &outcome.report)?;
    ctx.finish(rec)
}

pub fn linear_eval_cmd(ctx: &Ctx) -> Result<()> {
    let mut rec = Recorder::new("linear-eval");
    let bundle = ctx.dataset(&mut rec)?;
    let model = ctx.model(&mut rec)?;
    let outcome = linear_eval(&model, &bundle, &ctx.cfg.train)?;
    let stem = format!("{}_linear", weights_stem(ctx.flags.weights.as_deref().expect("checked")));
    write_report(&mut rec, ctx, &stem, &outcome.report)?;
    ctx.finish(rec)
}

fn test_patches(bundle: &DatasetBundle) -> Result<(Tensor, Vec<usize>)> {
    let idx = bundle.indices(Split::Test);
    let (x, _) = bundle.subset(Split::Test)?;
    Ok((x, idx))
}

#[derive(Serialize)]
struct ExplainSummary {
    patches: usize,
    mean_conservation: f64,
    min_conservation: f64,
    max_conservation: f64,
}

pub fn explain_cmd(ctx: &Ctx) -> Result<()> {
    let mut rec = Recorder::new("explain");
    let bundle = ctx.dataset(&mut rec)?;
    let folded = FoldedCim::from_model(&ctx.model(&mut rec)?)?;
    let (x, idx) = test_patches(&bundle)?;
    let maps = explain_batch(&folded, &x, &ctx.cfg.lrp)?;
    let ratios: Vec<f64> = maps
        .iter()
        .filter(|m| m.target_value != 0.0)
        .map(|m| m.total() / m.target_value)
        .collect();
    let mut data = Vec::with_capacity(x.len());
    for m in &maps {
        data.extend_from_slice(m.values.data());
    }
    let stacked = Tensor::new(x.shape(), data)?;
    let labels: Vec<usize> = idx.iter().map(|&i| bundle.labels[i]).collect();
    let splits = vec![Split::Test; idx.len()];
    write_maps(&rec.artifact(ctx.out("relevance.rlvm")), &stacked, &labels, &splits)?;
    let summary = ExplainSummary {
        patches: maps.len(),
        mean_conservation: ratios.iter().sum::<f64>() / ratios.len().max(1) as f64,
        min_conservation: ratios.iter().copied().fold(f64::INFINITY, f64::min),
        max_conservation: ratios.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    };
    std::fs::write(rec.artifact(ctx.out("explain_summary.json")), serde_json::to_vec_pretty(&summary)?)?;
    println!("explained {} patches, mean conservation {:.3}", summary.patches, summary.mean_conservation);
    ctx.finish(rec)
}

#[derive(Serialize)]
struct PhenotypeSummary {
    patches: usize,
    agreement: f64,
    per_class_agreement: Vec<(String, Option<f64>)>,
    ties: usize,
}

pub fn phenotype_cmd(ctx: &Ctx) -> Result<()> {
    let mut rec = Recorder::new("phenotype");
    let bundle = ctx.dataset(&mut rec)?;
    let folded = FoldedCim::from_model(&ctx.model(&mut rec)?)?;
    let (x, idx) = test_patches(&bundle)?;
    let results = phenotype_patches(&folded, &x, &bundle.modules, &ctx.cfg.lrp, &ctx.cfg.aggregate)?;
    let size = bundle.patches.shape()[2];
    let positions: Vec<(usize, usize)> = idx.iter().map(|&i| patch_position(i, bundle.len(), size)).collect();
    let assignments: Vec<_> = results.iter().map(|r| r.assignment.clone()).collect();
    let csv = phenotype_csv(&assignments, &positions, &bundle.modules)?;
    std::fs::write(rec.artifact(ctx.out("phenotypes.csv")), csv)?;

    let k = bundle.modules.len();
    let mut hit = vec![0usize; k];
    let mut seen = vec![0usize; k];
    for (a, &i) in assignments.iter().zip(&idx) {
        let truth = bundle.labels[i];
        seen[truth] += 1;
        hit[truth] += usize::from(a.phenotype == truth);
    }
    let summary = PhenotypeSummary {
        patches: idx.len(),
        agreement: hit.iter().sum::<usize>() as f64 / idx.len().max(1) as f64,
        per_class_agreement: bundle
            .modules
            .iter()
            .enumerate()
            .map(|(c, m)| (m.name.clone(), (seen[c] > 0).then(|| hit[c] as f64 / seen[c] as f64)))
            .collect(),
        ties: assignments.iter().filter(|a| a.tie).count(),
    };
    std::fs::write(rec.artifact(ctx.out("phenotype_summary.json")), serde_json::to_vec_pretty(&summary)?)?;
    println!("assigned {} patches, agreement with labels {:.3}", summary.patches, summary.agreement);
    ctx.finish(rec)
}

pub fn report_cmd(ctx: &Ctx, inputs: &[String]) -> Result<()> {
    let mut rec = Recorder::new("report");
    if inputs.is_empty() {
        return Err(CimError::Config("report needs at least one NAME=REPORT.json".into()));
    }
    let mut named = Vec::new();
    for spec in inputs {
        let (name, path) = spec
            .split_once('=')
            .ok_or_else(|| CimError::Config(format!("expected NAME=PATH, got {spec:?}")))?;
        let path = PathBuf::from(path);
        let path = required(&Some(path), name)?.to_path_buf();
        rec.input(&path);
        named.push((name.to_string(), EvalReport::read_json(&path)?));
    }
    let refs: Vec<(&str, &EvalReport)> = named.iter().map(|(n, r)| (n.as_str(), r)).collect();
    let table = comparison_table(&refs);
    std::fs::write(rec.artifact(ctx.out("comparison.txt")), &table)?;
    std::fs::write(rec.artifact(ctx.out("recall_comparison.csv")), recall_comparison_csv(&refs)?)?;
    let json: serde_json::Map<String, serde_json::Value> = named
        .iter()
        .map(|(n, r)| Ok((n.clone(), serde_json::to_value(r)?)))
        .collect::<Result<_>>()?;
    std::fs::write(rec.artifact(ctx.out("comparison.json")), serde_json::to_vec_pretty(&json)?)?;
    print!("{table}");
    ctx.finish(rec)
}

pub fn grad_check_cmd(ctx: &Ctx) -> Result<()> {
    let mut rec = Recorder::new("grad-check");
    let rows = gradient_suite(ctx.cfg.seed)?;
    let mut csv = String::from("check,max_rel_error\n");
    for r in &rows {
        csv.push_str(&format!("{},{:e}\n", r.name, r.max_rel_error));
    }
    std::fs::write(rec.artifact(ctx.out("grad_check.csv")), csv)?;
    let worst = rows
        .iter()
        .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
        .ok_or_else(|| CimError::Empty("no gradient checks ran".into()))?;
    println!("max relative error {:e} ({})", worst.max_rel_error, worst.name);
    ctx.finish(rec)?;
    if worst.max_rel_error >= GRAD_TOLERANCE {
        return Err(CimError::NonFinite(format!(
            "gradient check {} failed: relative error {:e} >= {GRAD_TOLERANCE:e}",
            worst.name, worst.max_rel_error
        )));
    }
    Ok(())
}
