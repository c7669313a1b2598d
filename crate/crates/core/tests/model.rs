use cimlite::autodiff::gradcheck::grad_check;
use cimlite::autodiff::Graph;
use cimlite::model::cim::{se_gate, se_gates};
use cimlite::model::{
    build_cim, build_earlyfusion_baseline, matched_baseline, parameter_count, BaselineConfig, CimConfig,
    FeatureBlockView, HeadConfig, HeadKind, Mode, Model, ModelConfig,
};
use cimlite::params::{ParamRole, ParamStore};
use cimlite::{CimError, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

fn small(markers: usize, width: usize, depth: usize, r: usize) -> CimConfig {
    CimConfig {
        markers,
        width,
        depth,
        se_reduction: r,
        head: HeadConfig::none(),
        input_size: 24,
        seed: 11,
    }
}

/// Random BN statistics and biases so eval-mode tests exercise every term.
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

fn pooled(model: &Model, x: &Tensor, mode: Mode) -> (Tensor, Tensor) {
    let mut g = Graph::new();
    let pv = model.params().register(&mut g).unwrap();
    let xv = g.leaf(x.clone()).unwrap();
    let f = model.forward_features(&mut g, &pv, xv, mode).unwrap();
    (g.value(f.prefusion).clone(), g.value(f.pooled).clone())
}

/// Closed-form learnable count of the channel-independent backbone.
fn cim_formula(c: usize, k: usize, n: usize, r: usize) -> usize {
    let d = c * k;
    let h = k / r;
    let stem = d + d + 2 * d;
    let block = (9 * d + d) + 2 * d + c * (k * h + h + h * k + k) + (d * k + d) + 2 * d;
    stem + n * block
}

fn enumerate_file(p: &ParamStore) -> (usize, usize) {
    let parsed = ParamStore::from_cimw_bytes(&p.to_cimw_bytes()).unwrap();
    let mut backbone = 0;
    let mut head = 0;
    for (name, t) in parsed.iter() {
        if !ParamRole::of(name).is_learnable() {
            continue;
        }
        if name.starts_with("proj.") || name.starts_with("cls.") {
            head += t.len();
        } else {
            backbone += t.len();
        }
    }
    (backbone, head)
}

#[test]
fn minimal_config_counts() {
    let m = build_cim(small(1, 1, 0, 1)).unwrap();
    assert_eq!(m.params().get("stem.weight").unwrap().len(), 1);
    assert_eq!(m.params().get("stem.bias").unwrap().len(), 1);
    let count = m.parameter_count();
    assert_eq!(count.backbone, 2 + 2);
    assert_eq!(count.head, 0);
}

#[test]
fn shallow_preset_budget() {
    let cfg = ModelConfig::Cim(small(49, 4, 1, 2));
    let count = parameter_count(&cfg).unwrap();
    assert_eq!(count.backbone, cim_formula(49, 4, 1, 2));
    assert!((4500..=6500).contains(&count.backbone), "{count:?}");
}

#[test]
fn parameter_count_matches_serialized_file() {
    let configs = vec![
        ModelConfig::Cim(small(1, 1, 0, 1)),
        ModelConfig::Cim(small(3, 2, 2, 2)),
        ModelConfig::Cim(CimConfig::shallow(8)),
        ModelConfig::Cim(CimConfig::shallow(49).with_head(HeadConfig {
            projection_dim: Some(64),
            num_classes: Some(6),
            classifier_hidden: 64,
        })),
        ModelConfig::EarlyFusion(BaselineConfig {
            markers: 8,
            width: 9,
            head: HeadConfig::default(),
            input_size: 24,
            seed: 0,
        }),
    ];
    for cfg in configs {
        let count = parameter_count(&cfg).unwrap();
        let m = Model::build(cfg.clone()).unwrap();
        assert_eq!(enumerate_file(m.params()), (count.backbone, count.head), "{cfg:?}");
        if let ModelConfig::Cim(c) = &cfg {
            assert_eq!(count.backbone, cim_formula(c.markers, c.width, c.depth, c.se_reduction));
        }
    }
}

#[test]
fn build_is_deterministic() {
    let a = build_cim(CimConfig::shallow(8).with_seed(5)).unwrap();
    let b = build_cim(CimConfig::shallow(8).with_seed(5)).unwrap();
    assert_eq!(a.params().to_cimw_bytes(), b.params().to_cimw_bytes());
    let c = build_cim(CimConfig::shallow(8).with_seed(6)).unwrap();
    assert_ne!(a.params().to_cimw_bytes(), c.params().to_cimw_bytes());
}

#[test]
fn invalid_config_rejected() {
    let mut cfg = small(4, 3, 1, 2);
    assert!(matches!(build_cim(cfg.clone()), Err(CimError::Config(_))));
    cfg.width = 4;
    cfg.markers = 0;
    assert!(build_cim(cfg).is_err());
}

#[test]
fn zero_input_gives_zero_embedding() {
    let m = build_cim(CimConfig::shallow(8)).unwrap();
    let (_, p) = pooled(&m, &Tensor::zeros(&[2, 8, 24, 24]), Mode::Eval);
    assert!(p.data().iter().all(|&v| v == 0.0));
}

#[test]
fn channel_count_mismatch_is_error() {
    let m = build_cim(CimConfig::shallow(8)).unwrap();
    let mut g = Graph::new();
    let pv = m.params().register(&mut g).unwrap();
    let x = g.leaf(Tensor::zeros(&[1, 7, 24, 24])).unwrap();
    assert!(matches!(m.forward_features(&mut g, &pv, x, Mode::Eval), Err(CimError::Dimension(_))));
}

#[test]
fn perturbing_one_marker_leaves_other_blocks_bit_identical() {
    let cfg = small(5, 4, 2, 2);
    let mut m = build_cim(cfg.clone()).unwrap();
    randomize(&mut m, 3);
    let view = FeatureBlockView::new(&cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = rand_tensor(&mut rng, &[2, 5, 8, 8], 0.0, 1.0);
    let (pre, pool) = pooled(&m, &x, Mode::Eval);
    let plane = 64;
    for marker in 0..5 {
        let mut xp = x.clone();
        for s in 0..2 {
            for i in 0..plane {
                xp.data_mut()[(s * 5 + marker) * plane + i] += rng.random_range(-0.5..0.5);
            }
        }
        let (pre2, pool2) = pooled(&m, &xp, Mode::Eval);
        let block = view.range(marker);
        for s in 0..2 {
            for ch in 0..20 {
                let same_block = block.contains(&ch);
                let a = &pre.data()[(s * 20 + ch) * plane..(s * 20 + ch + 1) * plane];
                let b = &pre2.data()[(s * 20 + ch) * plane..(s * 20 + ch + 1) * plane];
                if !same_block {
                    assert_eq!(a, b);
                    assert_eq!(pool.data()[s * 20 + ch].to_bits(), pool2.data()[s * 20 + ch].to_bits());
                }
            }
        }
        let changed = block.clone().any(|ch| pool.data()[ch] != pool2.data()[ch]);
        assert!(changed, "marker {marker} perturbation had no effect on its own block");
    }
}

/// Slice marker `c`'s parameters out of a CIM into a single-marker CIM.
fn marker_subnetwork(model: &Model, cfg: &CimConfig, c: usize) -> Model {
    let k = cfg.width;
    let h = cfg.se_hidden();
    let sub_cfg = CimConfig {
        markers: 1,
        head: HeadConfig::none(),
        ..cfg.clone()
    };
    let mut sub = build_cim(sub_cfg.clone()).unwrap();
    for (name, t) in sub.params_mut().iter_mut() {
        let full = model.params().get(name).unwrap();
        let rows = if name.contains(".se.fc1.") { h } else { k };
        let per_row = full.len() / full.shape()[0];
        let start = c * rows * per_row;
        t.data_mut().copy_from_slice(&full.data()[start..start + rows * per_row]);
    }
    sub
}

#[test]
fn marker_subnetworks_reproduce_blocks() {
    for mode in [Mode::Eval, Mode::Train] {
        let cfg = small(4, 4, 2, 2);
        let mut m = build_cim(cfg.clone()).unwrap();
        randomize(&mut m, 21);
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let x = rand_tensor(&mut rng, &[3, 4, 7, 7], 0.0, 1.0);
        let (_, pool) = pooled(&m, &x, mode);
        let view = FeatureBlockView::new(&cfg);
        for c in 0..4 {
            let sub = marker_subnetwork(&m, &cfg, c);
            let mut xc = Tensor::zeros(&[3, 1, 7, 7]);
            for s in 0..3 {
                xc.data_mut()[s * 49..(s + 1) * 49].copy_from_slice(&x.data()[(s * 4 + c) * 49..(s * 4 + c + 1) * 49]);
            }
            let (_, sub_pool) = pooled(&sub, &xc, mode);
            for s in 0..3 {
                for (j, ch) in view.range(c).enumerate() {
                    assert_eq!(sub_pool.data()[s * 4 + j], pool.data()[s * 16 + ch], "{mode:?} marker {c}");
                }
            }
        }
    }
}

#[test]
fn se_gate_examples() {
    let cfg = small(3, 4, 1, 2);
    let mut m = build_cim(cfg.clone()).unwrap();
    for name in ["blocks.0.se.fc1.weight", "blocks.0.se.fc2.weight"] {
        m.params_mut().get_mut(name).unwrap().data_mut().fill(0.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = rand_tensor(&mut rng, &[2, 12, 4, 4], 0.0, 1.0);
    let mut g = Graph::new();
    let pv = m.params().register(&mut g).unwrap();
    let xv = g.leaf(x.clone()).unwrap();
    let y = se_gate(&cfg, &mut g, &pv, xv, "blocks.0.se").unwrap();
    assert_eq!(g.value(y), &x.map(|v| 0.5 * v));
}

#[test]
fn se_gates_are_per_marker() {
    let cfg = small(3, 4, 1, 2);
    let mut m = build_cim(cfg.clone()).unwrap();
    randomize(&mut m, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = rand_tensor(&mut rng, &[1, 12, 4, 4], 0.0, 1.0);
    let gates = |x: &Tensor| {
        let mut g = Graph::new();
        let pv = m.params().register(&mut g).unwrap();
        let xv = g.leaf(x.clone()).unwrap();
        let s = se_gates(&cfg, &mut g, &pv, xv, "blocks.0.se").unwrap();
        g.value(s).clone()
    };
    let base = gates(&x);

    // naive per-marker loop
    let p = m.params();
    let (w1, b1) = (p.get("blocks.0.se.fc1.weight").unwrap(), p.get("blocks.0.se.fc1.bias").unwrap());
    let (w2, b2) = (p.get("blocks.0.se.fc2.weight").unwrap(), p.get("blocks.0.se.fc2.bias").unwrap());
    for c in 0..3 {
        let squeeze: Vec<f64> = (0..4)
            .map(|j| x.data()[(c * 4 + j) * 16..(c * 4 + j + 1) * 16].iter().sum::<f64>() / 16.0)
            .collect();
        let hidden: Vec<f64> = (0..2)
            .map(|i| {
                let row = c * 2 + i;
                let z: f64 = (0..4).map(|j| w1.data()[row * 4 + j] * squeeze[j]).sum::<f64>() + b1.data()[row];
                z.max(0.0)
            })
            .collect();
        for j in 0..4 {
            let row = c * 4 + j;
            let z: f64 = (0..2).map(|i| w2.data()[row * 2 + i] * hidden[i]).sum::<f64>() + b2.data()[row];
            let gate = 1.0 / (1.0 + (-z).exp());
            assert!((base.data()[row] - gate).abs() < 1e-12);
        }
    }

    let mut xp = x.clone();
    for v in &mut xp.data_mut()[4 * 16..8 * 16] {
        *v += 0.7;
    }
    let moved = gates(&xp);
    for ch in 0..12 {
        if !(4..8).contains(&ch) {
            assert_eq!(base.data()[ch], moved.data()[ch]);
        }
    }
}

#[test]
fn head_examples() {
    let cfg = small(2, 2, 1, 1).with_head(HeadConfig {
        projection_dim: Some(4),
        num_classes: Some(3),
        classifier_hidden: 5,
    });
    let mut m = build_cim(cfg).unwrap();
    let mut g = Graph::new();
    let pv = m.params().register(&mut g).unwrap();
    let zero = g.leaf(Tensor::zeros(&[2, 4])).unwrap();
    let logits = m.forward_head(&mut g, &pv, zero, HeadKind::Classifier).unwrap();
    assert!(g.value(logits).data().iter().all(|&v| v == 0.0));

    // identity projection weights → ReLU(pooled)
    for name in ["proj.fc1.weight", "proj.fc2.weight"] {
        let t = m.params_mut().get_mut(name).unwrap();
        t.data_mut().fill(0.0);
        for i in 0..4 {
            t.data_mut()[i * 4 + i] = 1.0;
        }
    }
    let mut g = Graph::new();
    let pv = m.params().register(&mut g).unwrap();
    let pooled_in = Tensor::new(&[1, 4], vec![0.5, -1.0, 2.0, -0.1]).unwrap();
    let pvv = g.leaf(pooled_in.clone()).unwrap();
    let z = m.forward_head(&mut g, &pv, pvv, HeadKind::Projection).unwrap();
    assert_eq!(g.value(z), &pooled_in.map(|v| v.max(0.0)));

    let no_head = build_cim(small(2, 2, 0, 1)).unwrap();
    let mut g = Graph::new();
    let pv = no_head.params().register(&mut g).unwrap();
    let p = g.leaf(Tensor::zeros(&[1, 4])).unwrap();
    assert!(matches!(no_head.forward_head(&mut g, &pv, p, HeadKind::Projection), Err(CimError::Config(_))));
}

#[test]
fn head_gradient_check() {
    let cfg = small(3, 2, 1, 1).with_head(HeadConfig {
        projection_dim: Some(5),
        num_classes: Some(3),
        classifier_hidden: 4,
    });
    let m = build_cim(cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let pooled_in = rand_tensor(&mut rng, &[3, 6], 0.1, 1.0);
    let coeffs = rand_tensor(&mut rng, &[3, 5], -1.0, 1.0);
    for kind in [HeadKind::Projection, HeadKind::Classifier] {
        let c = coeffs.clone();
        let err = grad_check(
            |g, x| {
                let pv = m.params().register(g)?;
                let y = m.forward_head(g, &pv, x, kind)?;
                let n = g.value(y).len();
                let cc = Tensor::new(g.value(y).shape(), c.data()[..n].to_vec())?;
                g.weighted_sum(y, cc)
            },
            &pooled_in,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{kind:?}: {err}");
    }
}

#[test]
fn full_model_with_nt_xent_gradient_check() {
    let cfg = CimConfig {
        markers: 3,
        width: 4,
        depth: 1,
        se_reduction: 2,
        head: HeadConfig {
            projection_dim: Some(6),
            num_classes: None,
            classifier_hidden: 64,
        },
        input_size: 6,
        seed: 3,
    };
    let mut m = build_cim(cfg).unwrap();
    randomize(&mut m, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = rand_tensor(&mut rng, &[4, 3, 6, 6], 0.0, 1.0);

    let loss = |model: &Model, g: &mut Graph, xv| {
        let pv = model.params().register(g)?;
        let f = model.forward_features(g, &pv, xv, Mode::Train)?;
        let z = model.forward_head(g, &pv, f.pooled, HeadKind::Projection)?;
        g.nt_xent(z, 0.2)
    };
    let err = grad_check(|g, xv| loss(&m, g, xv), &x, 1e-5).unwrap();
    assert!(err < 1e-4, "input: {err}");

    let names: Vec<String> = m
        .params()
        .iter()
        .filter(|(n, _)| ParamRole::of(n).is_learnable())
        .map(|(n, _)| n.to_string())
        .collect();
    for name in names {
        let point = m.params().get(&name).unwrap().clone();
        let err = grad_check(
            |g, pvar| {
                let xv = g.leaf(x.clone())?;
                let mut pv = m.params().register(g)?;
                pv.substitute(&name, pvar)?;
                let f = m.forward_features(g, &pv, xv, Mode::Train)?;
                let z = m.forward_head(g, &pv, f.pooled, HeadKind::Projection)?;
                g.nt_xent(z, 0.2)
            },
            &point,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{name}: {err}");
    }
}

#[test]
fn baseline_mixes_all_markers() {
    let m = build_earlyfusion_baseline(6, 4, 8, 13).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let x = rand_tensor(&mut rng, &[1, 6, 10, 10], 0.0, 1.0);
    let (_, base) = pooled(&m, &x, Mode::Eval);
    for c in 0..6 {
        let mut xp = x.clone();
        for v in &mut xp.data_mut()[c * 100..(c + 1) * 100] {
            *v += 0.3;
        }
        let (_, moved) = pooled(&m, &xp, Mode::Eval);
        let changed = base.data().iter().zip(moved.data()).filter(|(a, b)| a != b).count();
        assert_eq!(changed, 8, "channel {c} changed only {changed} features");
    }
    let again = build_earlyfusion_baseline(6, 4, 8, 13).unwrap();
    assert_eq!(again.params().to_cimw_bytes(), m.params().to_cimw_bytes());
}

#[test]
fn matched_baseline_within_budget() {
    for markers in [8, 18, 49] {
        let cim = CimConfig::shallow(markers);
        let reference = parameter_count(&ModelConfig::Cim(cim.clone())).unwrap().total() as f64;
        let base = matched_baseline(&cim).unwrap();
        let total = parameter_count(&ModelConfig::EarlyFusion(base.clone())).unwrap().total() as f64;
        let ratio = total / reference;
        assert!((0.5..=2.0).contains(&ratio), "markers {markers}: ratio {ratio}");
    }
}

#[test]
fn save_and_load_model() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.cimw");
    let m = build_cim(CimConfig::shallow(8).with_seed(1)).unwrap();
    m.save(&path).unwrap();
    let loaded = Model::load(&path).unwrap();
    assert_eq!(loaded.config(), m.config());
    assert_eq!(loaded.params().to_cimw_bytes(), m.params().to_cimw_bytes());
}
