use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use ssmxtrack::harness::train::{TrainConfig, Trainer};
use ssmxtrack::harness::synth::{generate, GenConfig};
use ssmxtrack::motion::BoundingBox;
use ssmxtrack::net::{decode, encode_target, loss_graph, CropTransform, NetConfig, TrackerNet, Variant};
use ssmxtrack::{Graph, Tensor};

fn small(variant: Variant) -> NetConfig {
    let base = NetConfig {
        c_feat: 4,
        n_heads: 2,
        state_dim: 3,
        t: 5,
        search_size: 32,
        template_size: 16,
        backbone_stride: 4,
        ..NetConfig::default()
    };
    NetConfig::for_variant(&base, variant)
}

fn inputs(cfg: &NetConfig, seed: u64) -> (Tensor<f64>, Tensor<f64>, Tensor<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (
        Tensor::uniform(&[1, cfg.search_size, cfg.search_size], 0.0, 1.0, &mut rng),
        Tensor::uniform(&[1, cfg.template_size, cfg.template_size], 0.0, 1.0, &mut rng),
        Tensor::randn(&[cfg.t, 2], 2.0, &mut rng),
    )
}

#[test]
fn each_variant_changes_exactly_one_setting() {
    let expected = [
        (Variant::V1, "scan_order"),
        (Variant::V2, "scan_order"),
        (Variant::V3, "corr"),
        (Variant::V4, "motion"),
        (Variant::V5, "motion"),
        (Variant::V6, "t"),
        (Variant::V7, "t"),
    ];
    let base = NetConfig::default().to_pairs();
    for (v, key) in expected {
        let pairs = NetConfig::for_variant(&NetConfig::default(), v).to_pairs();
        let changed: Vec<&str> = base
            .iter()
            .zip(&pairs)
            .filter(|(a, b)| a.1 != b.1 && a.0 != "variant")
            .map(|(a, _)| a.0.as_str())
            .collect();
        assert_eq!(changed, vec![key], "{v}");
    }
    assert_eq!(NetConfig::for_variant(&NetConfig::default(), Variant::V6).t, 120);
    assert_eq!(NetConfig::for_variant(&NetConfig::default(), Variant::V7).t, 30);
}

#[test]
fn every_variant_runs_forward() {
    for v in Variant::ALL {
        let cfg = small(v);
        let net = TrackerNet::<f64>::new(cfg.clone(), 1).unwrap();
        let (s, z, m) = inputs(&cfg, 2);
        let (score, reg) = net.forward(&s, &z, &m).unwrap();
        assert_eq!(score.shape(), &[1, 8, 8], "{v}");
        assert_eq!(reg.shape(), &[4, 8, 8], "{v}");
        assert!(score.is_finite() && reg.is_finite(), "{v}");
    }
}

#[test]
fn heads_are_chained_and_share_template_and_motion() {
    let cfg = small(Variant::Baseline);
    let net = TrackerNet::<f64>::new(cfg.clone(), 3).unwrap();
    let (s, z, m) = inputs(&cfg, 4);
    let (_, trace) = net.forward_traced(&s, &z, &m).unwrap();
    assert_eq!(trace.len(), 2);
    assert_eq!(trace[0].z, trace[1].z);
    assert_eq!(trace[0].m, m);
    assert_eq!(trace[1].m, m);
    let g = Graph::new();
    let b = net.bind(&g, false);
    let after0 = net
        .mamba_head(&b, 0, g.constant(trace[0].x.clone()), g.constant(trace[0].z.clone()), g.constant(m.clone()))
        .unwrap()
        .value();
    assert!(after0.max_abs_diff(&trace[1].x) < 1e-12);
    assert!(after0.max_abs_diff(&trace[0].x) > 1e-6);
}

#[test]
fn zero_projection_makes_heads_identity() {
    for v in [Variant::Baseline, Variant::V3] {
        let cfg = small(v);
        let mut net = TrackerNet::<f64>::new(cfg.clone(), 5).unwrap();
        for k in 0..cfg.n_heads {
            let w = net.params.get_mut(&format!("head{k}.out.w")).unwrap();
            *w = Tensor::zeros(w.shape());
        }
        let (s, z, m) = inputs(&cfg, 6);
        let (_, trace) = net.forward_traced(&s, &z, &m).unwrap();
        assert_eq!(trace[0].x, trace[1].x, "{v}");
    }
}

#[test]
fn loss_reaches_every_parameter() {
    let cfg = small(Variant::Baseline);
    let net = TrackerNet::<f64>::new(cfg.clone(), 7).unwrap();
    let (s, z, m) = inputs(&cfg, 8);
    let gt = BoundingBox::centered(13.0, 18.0, 6.0, 6.0).unwrap();
    let crop = CropTransform::centered(16.0, 16.0, cfg.search_size, 1.0);
    let target = net.encode(&gt, &crop).unwrap();
    let g = Graph::new();
    let b = net.bind(&g, true);
    let out = net
        .forward_graph(&b, g.constant(s), g.constant(z), g.constant(m), None)
        .unwrap();
    let grads = g.backward(loss_graph(&out, &target).unwrap()).unwrap();
    for (name, &v) in net.params.names().iter().zip(b.vars()) {
        let gr = grads.get(v);
        assert!(gr.is_finite(), "{name}");
        assert!(gr.data().iter().any(|&x| x != 0.0), "{name} receives no gradient");
    }
}

#[test]
fn decode_inverts_encode() {
    let stride = 8;
    for (scale, cx, cy) in [(1.0, 100.0, 60.0), (1.1, 87.3, 41.9), (0.9, 120.0, 70.5)] {
        let crop = CropTransform::centered(cx + 3.0, cy - 5.0, 64, scale);
        let gt = BoundingBox::centered(cx, cy, 9.0, 7.0).unwrap();
        let target = encode_target::<f64>(&gt, &crop, stride, 8).unwrap();
        let mut score = Tensor::zeros(&[1, 8, 8]);
        score.data_mut()[target.cell] = 1.0;
        let reg = Tensor::from_fn(&[4, 8, 8], |i| if i % 64 == target.cell { target.reg[i / 64] } else { 0.0 });
        let back = decode(&score, &reg, &crop, stride);
        for (a, b) in [(back.cx, gt.cx), (back.cy, gt.cy), (back.w, gt.w), (back.h, gt.h)] {
            assert!((a - b).abs() < 1e-9, "{back:?} vs {gt:?}");
        }
    }
}

#[test]
fn checkpoint_round_trip_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.ckpt");
    let cfg = small(Variant::V5);
    let net = TrackerNet::<f64>::new(cfg.clone(), 9).unwrap();
    net.save(&path).unwrap();
    let back = TrackerNet::<f64>::load(&path).unwrap();
    assert_eq!(back.config(), &cfg);
    let (s, z, m) = inputs(&cfg, 10);
    let (a, _) = net.forward(&s, &z, &m).unwrap();
    let (b, _) = back.forward(&s, &z, &m).unwrap();
    assert!(a.max_abs_diff(&b) < 1e-4);
}

#[test]
fn ablated_motion_trains_without_shape_errors() {
    let cfg = TrainConfig {
        net: small(Variant::V4),
        epochs: 1,
        steps_per_epoch: 2,
        batch_size: 2,
        ..TrainConfig::default()
    };
    let gen = GenConfig {
        height: 64,
        width: 96,
        frames: 6,
        ..GenConfig::default()
    };
    let data = vec![generate(&gen, 1).unwrap()];
    let mut t = Trainer::new(cfg).unwrap();
    for _ in 0..2 {
        assert!(t.train_step(&data).unwrap().is_finite());
    }
}
