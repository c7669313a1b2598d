//! Acceptance suite: one test per criterion, each printing a single
//! `criterion N: PASS|FAIL ...` line with the measured values.
//!
//! Tests hold a shared lock so wall-clock bounds are measured without
//! competing work. The seed-paired SSL runs are computed once and shared by
//! the architecture, augmentation, conservation and phenotyping checks.

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::{Duration, Instant};

use cimlite::autodiff::Graph;
use cimlite::data::{generate_synthetic, load_bundle, save_bundle, BleedThrough, DatasetBundle, Split, SynthConfig};
use cimlite::diagnostics::gradient_suite;
use cimlite::eval::{linear_eval, wasserstein_1d, EvalReport, TrainConfig};
use cimlite::lrp::{
    explain, phenotype_patches, separability_report, AggregateConfig, FoldedCim, LrpConfig, PatchPhenotype,
};
use cimlite::model::{
    build_cim, matched_baseline, parameter_count, CimConfig, FeatureBlockView, HeadConfig, Mode, Model, ModelConfig,
    BN_EPS,
};
use cimlite::params::{ParamRole, ParamStore};
use cimlite::ssl::losses::{nt_xent, vicreg};
use cimlite::ssl::{pretrain, AugStrength, AugmentConfig, SslRunConfig, VicregWeights};
use cimlite::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: [u64; 3] = [0, 1, 2];
const SSL_ITERATIONS: usize = 500;
const SSL_BATCH: usize = 64;

static LOCK: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

fn verdict(n: usize, pass: bool, detail: String) {
    println!("criterion {n}: {} {detail}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "criterion {n} failed: {detail}");
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

// ---------------------------------------------------------------------------
// Shared seed-paired runs

struct SeedRun {
    cim_ba: f64,
    baseline_ba: f64,
    elapsed: Duration,
    data: DatasetBundle,
    cim: Model,
}

fn ssl_config(seed: u64) -> SslRunConfig {
    SslRunConfig {
        iterations: SSL_ITERATIONS,
        batch_size: SSL_BATCH,
        seed,
        ..Default::default()
    }
}

/// Pretrain `model` on the training split, then linear-probe it.
fn pretrain_and_probe(model: &mut Model, data: &DatasetBundle, aug: &AugmentConfig, seed: u64) -> EvalReport {
    let (train_x, _) = data.subset(Split::Train).unwrap();
    pretrain(model, &train_x, &ssl_config(seed), aug, None).unwrap();
    linear_eval(model, data, &TrainConfig { seed, ..Default::default() }).unwrap().report
}

fn paired_runs() -> &'static [SeedRun] {
    static RUNS: OnceLock<Vec<SeedRun>> = OnceLock::new();
    RUNS.get_or_init(|| {
        SEEDS
            .iter()
            .map(|&seed| {
                let started = Instant::now();
                let data = generate_synthetic(&SynthConfig { seed, ..SynthConfig::default() }).unwrap();
                let cim_cfg = CimConfig::shallow(8).with_seed(seed);
                let base_cfg = matched_baseline(&cim_cfg).unwrap();
                let aug = AugmentConfig::default();
                let mut cim = build_cim(cim_cfg).unwrap();
                let cim_ba = pretrain_and_probe(&mut cim, &data, &aug, seed).balanced_accuracy;
                let mut base = Model::build(ModelConfig::EarlyFusion(base_cfg)).unwrap();
                let baseline_ba = pretrain_and_probe(&mut base, &data, &aug, seed).balanced_accuracy;
                SeedRun {
                    cim_ba,
                    baseline_ba,
                    elapsed: started.elapsed(),
                    data,
                    cim,
                }
            })
            .collect()
    })
}

// ---------------------------------------------------------------------------
// 1

/// Random BN statistics and biases so eval mode exercises every affine term.
fn randomize(model: &mut Model, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (name, t) in model.params_mut().iter_mut() {
        match ParamRole::of(name) {
            ParamRole::Buffer if name.ends_with("running_var") => {
                t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(0.5..2.0))
            }
            ParamRole::Buffer | ParamRole::Bias | ParamRole::BnShift => {
                t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.3..0.3))
            }
            ParamRole::BnScale => t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(0.5..1.5)),
            ParamRole::Weight => {}
        }
    }
}

fn pooled(model: &Model, x: &Tensor) -> Tensor {
    let mut g = Graph::new();
    let pv = model.params().register(&mut g).unwrap();
    let xv = g.leaf(x.clone()).unwrap();
    let f = model.forward_features(&mut g, &pv, xv, Mode::Eval).unwrap();
    g.value(f.pooled).clone()
}

#[test]
fn criterion_01_channel_independence() {
    let _g = serial();
    let started = Instant::now();
    let mut violations = 0usize;
    let mut triples = 0usize;
    for (markers, seed) in [(8usize, 1u64), (49, 2)] {
        let cfg = CimConfig::shallow(markers).with_seed(seed);
        let view = FeatureBlockView::new(&cfg);
        let mut model = build_cim(cfg.clone()).unwrap();
        randomize(&mut model, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let plane = 24 * 24;
        for _ in 0..100 {
            let x = rand_tensor(&mut rng, &[1, markers, 24, 24], 0.0, 1.0);
            let marker = rng.random_range(0..markers);
            let scale = rng.random_range(0.01..2.0);
            let mut xp = x.clone();
            for v in &mut xp.data_mut()[marker * plane..(marker + 1) * plane] {
                *v += scale * rng.random_range(-1.0..1.0);
            }
            let (a, b) = (pooled(&model, &x), pooled(&model, &xp));
            let own = view.range(marker);
            for ch in 0..a.len() {
                if !own.contains(&ch) && a.data()[ch].to_bits() != b.data()[ch].to_bits() {
                    violations += 1;
                }
            }
            triples += 1;
        }
    }
    let secs = started.elapsed().as_secs_f64();
    verdict(
        1,
        violations == 0 && secs < 30.0,
        format!("{triples} triples over C=8 and C=49, {violations} differing features, {secs:.1} s (< 30 s)"),
    );
}

// ---------------------------------------------------------------------------
// 2

#[test]
fn criterion_02_gradient_checks() {
    let _g = serial();
    let started = Instant::now();
    let results = gradient_suite(7).unwrap();
    let secs = started.elapsed().as_secs_f64();
    let worst = results.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error)).unwrap();
    let has_full = results.iter().any(|r| r.name.starts_with("cim"));
    verdict(
        2,
        worst.max_rel_error < 1e-4 && has_full && secs < 120.0,
        format!(
            "{} checks, worst {} at {:.2e} (< 1e-4), {secs:.1} s (< 120 s)",
            results.len(),
            worst.name,
            worst.max_rel_error
        ),
    );
}

// ---------------------------------------------------------------------------
// 3

fn row(t: &Tensor, i: usize) -> &[f64] {
    let d = t.shape()[1];
    &t.data()[i * d..(i + 1) * d]
}

fn nt_xent_loops(z: &Tensor, t: f64) -> f64 {
    let n = z.shape()[0];
    let cos = |i: usize, j: usize| {
        let (a, c) = (row(z, i), row(z, j));
        let dot: f64 = a.iter().zip(c).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nc = c.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nc)
    };
    let mut total = 0.0;
    for i in 0..n {
        let mut denom = 0.0;
        for j in 0..n {
            if j != i {
                denom += (cos(i, j) / t).exp();
            }
        }
        total += denom.ln() - cos(i, (i + n / 2) % n) / t;
    }
    total / n as f64
}

fn vicreg_loops(a: &Tensor, b: &Tensor, w: &VicregWeights) -> f64 {
    let (n, d) = (a.shape()[0], a.shape()[1]);
    let mut inv = 0.0;
    for i in 0..n * d {
        inv += (a.data()[i] - b.data()[i]).powi(2);
    }
    inv /= (n * d) as f64;
    let branch = |z: &Tensor| {
        let mut var_term = 0.0;
        let mut cov_term = 0.0;
        for k in 0..d {
            for l in 0..d {
                let mk = (0..n).map(|i| z.data()[i * d + k]).sum::<f64>() / n as f64;
                let ml = (0..n).map(|i| z.data()[i * d + l]).sum::<f64>() / n as f64;
                let mut c = 0.0;
                for i in 0..n {
                    c += (z.data()[i * d + k] - mk) * (z.data()[i * d + l] - ml);
                }
                c /= (n - 1) as f64;
                if k == l {
                    var_term += (1.0 - (c + 1e-4).sqrt()).max(0.0);
                } else {
                    cov_term += c * c;
                }
            }
        }
        (var_term / d as f64, cov_term / d as f64)
    };
    let (va, ca) = branch(a);
    let (vb, cb) = branch(b);
    w.invariance * inv + w.variance * (va + vb) / 2.0 + w.covariance * (ca + cb)
}

#[test]
fn criterion_03_loss_oracles() {
    let _g = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let w = VicregWeights::default();
    let cases = 60;
    let mut worst_nt = 0.0f64;
    let mut worst_vic = 0.0f64;
    for case in 0..cases {
        let b = [2, 3, 4, 8][case % 4];
        let d = rng.random_range(2..10);
        let z = rand_tensor(&mut rng, &[2 * b, d], -1.5, 1.5);
        let t = rng.random_range(0.05..1.0);
        let (loss, _) = nt_xent(&z, t).unwrap();
        worst_nt = worst_nt.max((loss - nt_xent_loops(&z, t)).abs());

        let n = rng.random_range(2..12);
        let d = rng.random_range(1..8);
        let s = rng.random_range(0.05..3.0);
        let za = rand_tensor(&mut rng, &[n, d], -s, s);
        let zb = rand_tensor(&mut rng, &[n, d], -s, s);
        let (terms, _, _) = vicreg(&za, &zb, &w).unwrap();
        let oracle = vicreg_loops(&za, &zb, &w);
        worst_vic = worst_vic.max((terms.total - oracle).abs() / oracle.abs().max(1.0));
    }
    let same = Tensor::new(&[4, 3], [0.3, -1.2, 0.8].repeat(4)).unwrap();
    let (identical, _) = nt_xent(&same, 0.5).unwrap();
    let ln3_error = (identical - 3f64.ln()).abs();
    verdict(
        3,
        worst_nt < 1e-9 && worst_vic < 1e-9 && ln3_error < 1e-12,
        format!(
            "{cases} cases per loss, NT-Xent max error {worst_nt:.1e}, VICReg {worst_vic:.1e} (< 1e-9), identical B=2 gives ln 3 within {ln3_error:.1e}"
        ),
    );
}

// ---------------------------------------------------------------------------
// 4

#[test]
fn criterion_04_parameter_budget() {
    let _g = serial();
    let cfg = CimConfig {
        head: HeadConfig::none(),
        ..CimConfig::shallow(49)
    };
    assert_eq!((cfg.width, cfg.depth), (4, 1));
    let count = parameter_count(&ModelConfig::Cim(cfg)).unwrap();
    verdict(
        4,
        (4500..=6500).contains(&count.backbone),
        format!("C=49, k=4, N=1 backbone has {} learnable parameters (4500..=6500)", count.backbone),
    );
}

// ---------------------------------------------------------------------------
// 5

#[test]
fn criterion_05_cim_beats_early_fusion() {
    let _g = serial();
    let runs = paired_runs();
    let gaps: Vec<f64> = runs.iter().map(|r| 100.0 * (r.cim_ba - r.baseline_ba)).collect();
    let total: Duration = runs.iter().map(|r| r.elapsed).sum();
    let pairs: Vec<String> = runs
        .iter()
        .zip(SEEDS)
        .map(|(r, s)| format!("seed {s}: {:.1} vs {:.1}", 100.0 * r.cim_ba, 100.0 * r.baseline_ba))
        .collect();
    let pass = gaps.iter().all(|&g| g >= 5.0) && total.as_secs_f64() < 1200.0;
    verdict(
        5,
        pass,
        format!(
            "BA CIM vs baseline [{}], min gap {:.1} points (>= 5), {SSL_ITERATIONS} iterations at B={SSL_BATCH}, {:.0} s (< 1200 s)",
            pairs.join("; "),
            gaps.iter().cloned().fold(f64::INFINITY, f64::min),
            total.as_secs_f64()
        ),
    );
}

// ---------------------------------------------------------------------------
// 6

#[test]
fn criterion_06_augmentation_robustness() {
    let _g = serial();
    let runs = paired_runs();
    let mut spreads = Vec::new();
    let mut lines = Vec::new();
    for (run, seed) in runs.iter().zip(SEEDS) {
        let mut bas = vec![run.cim_ba];
        for strength in [AugStrength::Weak, AugStrength::Strong] {
            let mut cim = build_cim(CimConfig::shallow(8).with_seed(seed)).unwrap();
            let aug = AugmentConfig::preset(strength);
            bas.push(pretrain_and_probe(&mut cim, &run.data, &aug, seed).balanced_accuracy);
        }
        let hi = bas.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lo = bas.iter().cloned().fold(f64::INFINITY, f64::min);
        spreads.push(100.0 * (hi - lo));
        lines.push(format!(
            "seed {seed}: default {:.1} weak {:.1} strong {:.1}",
            100.0 * bas[0],
            100.0 * bas[1],
            100.0 * bas[2]
        ));
    }
    let worst = spreads.iter().cloned().fold(0.0, f64::max);
    verdict(
        6,
        worst < 3.0,
        format!("CIM BA [{}], largest spread {worst:.2} points (< 3)", lines.join("; ")),
    );
}

// ---------------------------------------------------------------------------
// 7

/// Positive weights, zero biases and identity batch norm: every unit is live
/// on a positive input and no relevance is absorbed by biases.
fn live_model(seed: u64) -> Model {
    let cfg = CimConfig {
        head: HeadConfig::none(),
        ..CimConfig::shallow(8).with_seed(seed)
    };
    let mut model = build_cim(cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (name, t) in model.params_mut().iter_mut() {
        match ParamRole::of(name) {
            ParamRole::Weight => t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(0.1..1.0)),
            ParamRole::Buffer if name.ends_with("running_var") => t.data_mut().fill(1.0 - BN_EPS),
            ParamRole::BnScale => t.data_mut().fill(1.0),
            _ => t.data_mut().fill(0.0),
        }
    }
    model
}

#[test]
fn criterion_07_lrp_conservation() {
    let _g = serial();
    let folded = FoldedCim::from_model(&live_model(5)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst_layer = 0.0f64;
    for _ in 0..20 {
        let patch = rand_tensor(&mut rng, &[8, 24, 24], 0.05, 1.0);
        let map = explain(&folded, &patch, &LrpConfig::epsilon_only()).unwrap();
        for (_, total) in &map.layer_sums {
            worst_layer = worst_layer.max((total / map.target_value - 1.0).abs());
        }
        worst_layer = worst_layer.max((map.total() / map.target_value - 1.0).abs());
    }

    let run = &paired_runs()[0];
    let trained = FoldedCim::from_model(&run.cim).unwrap();
    let (x, _) = run.data.subset(Split::Test).unwrap();
    let res = phenotype_patches(&trained, &x, &run.data.modules, &LrpConfig::default(), &AggregateConfig::default())
        .unwrap();
    let lo = res.iter().map(|r| r.conservation).fold(f64::INFINITY, f64::min);
    let hi = res.iter().map(|r| r.conservation).fold(f64::NEG_INFINITY, f64::max);
    verdict(
        7,
        worst_layer < 0.01 && lo >= 0.5 && hi <= 1.5,
        format!(
            "epsilon-only worst layer deviation {:.3}% (< 1%); default rules on {} held-out patches conserve {:.0}%..{:.0}% (50%..150%)",
            100.0 * worst_layer,
            res.len(),
            100.0 * lo,
            100.0 * hi
        ),
    );
}

// ---------------------------------------------------------------------------
// 8

fn agreement(res: &[PatchPhenotype], labels: &[usize], classes: usize) -> (f64, Vec<(usize, usize)>) {
    let mut per = vec![(0usize, 0usize); classes];
    for (r, &l) in res.iter().zip(labels) {
        per[l].1 += 1;
        per[l].0 += usize::from(r.assignment.phenotype == l);
    }
    let hits: usize = per.iter().map(|p| p.0).sum();
    (hits as f64 / labels.len() as f64, per)
}

#[test]
fn criterion_08_label_free_phenotyping() {
    let _g = serial();
    let run = &paired_runs()[0];
    let folded = FoldedCim::from_model(&run.cim).unwrap();
    let (x, y) = run.data.subset(Split::Test).unwrap();
    let res = phenotype_patches(&folded, &x, &run.data.modules, &LrpConfig::default(), &AggregateConfig::default())
        .unwrap();
    let (overall, per) = agreement(&res, &y, run.data.num_classes());
    let rare = ["Endothelial", "Mast"];
    let names = run.data.class_names();
    let rare_rates: Vec<(String, f64)> = names
        .iter()
        .enumerate()
        .filter(|(_, n)| rare.contains(&n.as_str()))
        .map(|(k, n)| (n.clone(), per[k].0 as f64 / per[k].1 as f64))
        .collect();
    assert_eq!(rare_rates.len(), 2);
    let pass = overall >= 0.85 && rare_rates.iter().all(|(_, r)| *r >= 0.70);
    verdict(
        8,
        pass,
        format!(
            "{} held-out patches, agreement {:.1}% (>= 85%), rare {} (>= 70%)",
            y.len(),
            100.0 * overall,
            rare_rates.iter().map(|(n, r)| format!("{n} {:.1}%", 100.0 * r)).collect::<Vec<_>>().join(", ")
        ),
    );
}

// ---------------------------------------------------------------------------
// 9

fn channel_means(x: &Tensor) -> Vec<Vec<f64>> {
    let [n, c, h, w] = *x.shape() else { panic!("expected 4-D patches") };
    let plane = h * w;
    (0..n)
        .map(|i| {
            (0..c)
                .map(|ch| x.data()[(i * c + ch) * plane..(i * c + ch + 1) * plane].iter().sum::<f64>() / plane as f64)
                .collect()
        })
        .collect()
}

fn sorted_difference(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

#[test]
fn criterion_09_bleed_through_separability() {
    let _g = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut oracle_error = 0.0f64;
    for _ in 0..200 {
        let n = rng.random_range(1..40);
        let a: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
        let b: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..8.0)).collect();
        oracle_error = oracle_error.max((wasserstein_1d(&a, &b).unwrap() - sorted_difference(&a, &b)).abs());
    }

    let mut wins = 0;
    let mut lines = Vec::new();
    for seed in SEEDS {
        let cfg = SynthConfig {
            seed,
            noise: 0.02,
            patches: 3000,
            bleed: Some(BleedThrough {
                marker: "CD20".into(),
                amplitude: 0.2,
            }),
            ..SynthConfig::default()
        };
        let data = generate_synthetic(&cfg).unwrap();
        let (train_x, _) = data.subset(Split::Train).unwrap();
        let mut model = build_cim(CimConfig::shallow(8).with_seed(seed)).unwrap();
        let ssl = SslRunConfig {
            iterations: 200,
            ..ssl_config(seed)
        };
        pretrain(&mut model, &train_x, &ssl, &AugmentConfig::default(), None).unwrap();
        let folded = FoldedCim::from_model(&model).unwrap();
        let (x, _) = data.subset(Split::Test).unwrap();
        let res =
            phenotype_patches(&folded, &x, &data.modules, &LrpConfig::default(), &AggregateConfig::default()).unwrap();
        let groups: Vec<usize> = res.iter().map(|r| r.assignment.phenotype).collect();
        let relevance: Vec<Vec<f64>> = res.iter().map(|r| r.channel_scores.clone()).collect();
        let a = data.panel.index_of("CD20").unwrap();
        let b = data.panel.index_of("CD3").unwrap();
        let t_group = data.class_names().iter().position(|n| n == "T").unwrap();
        let rep = separability_report(&groups, &channel_means(&x), &relevance, a, b, &[t_group]).unwrap();
        let r = &rep[0];
        wins += usize::from(r.relevance_wd > r.intensity_wd);
        lines.push(format!(
            "seed {seed}: relevance {:.3} vs intensity {:.3} over {} cells",
            r.relevance_wd, r.intensity_wd, r.cells
        ));
    }
    verdict(
        9,
        wins == SEEDS.len() && oracle_error < 1e-12,
        format!(
            "T group with diffuse CD20 [{}], {wins}/3 seeds; sorted-difference oracle error {oracle_error:.1e} (< 1e-12)",
            lines.join("; ")
        ),
    );
}

// ---------------------------------------------------------------------------
// 10

#[test]
fn criterion_10_throughput() {
    let _g = serial();
    let data = generate_synthetic(&SynthConfig {
        patches: 10_000,
        seed: 10,
        ..SynthConfig::default()
    })
    .unwrap();
    let model = build_cim(CimConfig::shallow(8).with_seed(10)).unwrap();
    let folded = FoldedCim::from_model(&model).unwrap();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let started = Instant::now();
    let res = pool
        .install(|| {
            phenotype_patches(
                &folded,
                &data.patches,
                &data.modules,
                &LrpConfig::default(),
                &AggregateConfig::default(),
            )
        })
        .unwrap();
    let secs = started.elapsed().as_secs_f64();
    verdict(
        10,
        res.len() == 10_000 && secs < 300.0,
        format!("explain + phenotype of {} patches on one thread in {secs:.1} s (< 300 s)", res.len()),
    );
}

// ---------------------------------------------------------------------------
// 11

fn small_pipeline(dir: &std::path::Path) -> (Vec<u8>, Vec<u8>, Vec<u8>) {
    let cfg = SynthConfig {
        patches: 800,
        seed: 4,
        ..SynthConfig::default()
    };
    let data_path = dir.join("data.mpxd");
    save_bundle(&generate_synthetic(&cfg).unwrap(), &data_path).unwrap();
    let data = load_bundle(&data_path).unwrap();
    let mut model = build_cim(CimConfig::shallow(8).with_seed(4)).unwrap();
    let (train_x, _) = data.subset(Split::Train).unwrap();
    let ssl = SslRunConfig {
        iterations: 5,
        batch_size: 16,
        seed: 4,
        ..Default::default()
    };
    pretrain(&mut model, &train_x, &ssl, &AugmentConfig::default(), None).unwrap();
    let weights = dir.join("cim.cimw");
    model.save(&weights).unwrap();
    let model = Model::load(&weights).unwrap();
    let report = linear_eval(&model, &data, &TrainConfig { seed: 4, ..Default::default() }).unwrap().report;
    let report_path = dir.join("report.json");
    report.write_json(&report_path).unwrap();
    (
        std::fs::read(&data_path).unwrap(),
        std::fs::read(&weights).unwrap(),
        std::fs::read(&report_path).unwrap(),
    )
}

#[test]
fn criterion_11_persistence_and_reruns() {
    let _g = serial();
    let dir = tempfile::tempdir().unwrap();
    let bundle = generate_synthetic(&SynthConfig {
        patches: 600,
        seed: 8,
        ..SynthConfig::default()
    })
    .unwrap();
    let path = dir.path().join("rt.mpxd");
    save_bundle(&bundle, &path).unwrap();
    let mpxd_exact = load_bundle(&path).unwrap() == bundle;

    let mut model = build_cim(CimConfig::shallow(49).with_seed(8)).unwrap();
    randomize(&mut model, 8);
    // the payload is float32: values come back as their f32 rounding, and a
    // second write reproduces the file byte for byte
    let bytes = model.params().to_cimw_bytes();
    let back = ParamStore::from_cimw_bytes(&bytes).unwrap();
    let cimw_exact = back.iter().zip(model.params().iter()).all(|((na, ta), (nb, tb))| {
        na == nb
            && ta.shape() == tb.shape()
            && ta.data().iter().zip(tb.data()).all(|(x, y)| x.to_bits() == (*y as f32 as f64).to_bits())
    }) && back.len() == model.params().len()
        && back.to_cimw_bytes() == bytes;

    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let rerun_identical = small_pipeline(a.path()) == small_pipeline(b.path());
    verdict(
        11,
        mpxd_exact && cimw_exact && rerun_identical,
        format!(
            "MPXD round trip exact: {mpxd_exact}; CIMW round trip exact: {cimw_exact}; fixed-seed rerun artifacts identical: {rerun_identical}"
        ),
    );
}
