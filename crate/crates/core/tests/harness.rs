use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use swin_unetr::datapipe::{gen_phantom, LabeledVolume, Volume};
use swin_unetr::decoder::{ModelConfig, SwinUnetr};
use swin_unetr::harness::*;
use swin_unetr::ssl::Fill;
use swin_unetr::swin3d::EncoderConfig;
use swin_unetr::{Error, ParamStore, Tensor};

fn tiny_cfg() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.encoder = EncoderConfig::with_width(6, 2);
    cfg.roi = [16; 3];
    cfg.batch = 2;
    cfg.steps = 20;
    cfg.warmup = 2;
    cfg.lr = 1e-3;
    cfg.seed = 5;
    cfg
}

fn phantoms(n: u64, classes: usize) -> Vec<LabeledVolume> {
    (0..n).map(|i| gen_phantom(40 + i, [20, 18, 16], 3, classes).unwrap()).collect()
}

fn images(v: &[LabeledVolume]) -> Vec<Volume> {
    v.iter().map(|p| p.image.clone()).collect()
}

fn store_with(values: &[(&str, Vec<f32>)]) -> ParamStore<f32> {
    let mut s = ParamStore::new();
    for (n, v) in values {
        s.add(n, Tensor::new(vec![v.len()], v.clone()).unwrap()).unwrap();
    }
    s
}

#[test]
fn lr_schedule_examples() {
    assert!((lr_schedule(250, 500, 1000, 4e-4) - 2e-4).abs() < 1e-18);
    assert_eq!(lr_schedule(0, 500, 1000, 4e-4), 0.0);
    assert_eq!(lr_schedule(500, 500, 1000, 4e-4), 4e-4);
    assert!(lr_schedule(1000, 500, 1000, 4e-4).abs() < 1e-18);
    assert!((lr_schedule(750, 500, 1000, 4e-4) - 2e-4).abs() < 1e-15);
    let v: Vec<f64> = (500..=1000).map(|s| lr_schedule(s, 500, 1000, 1.0)).collect();
    assert!(v.windows(2).all(|w| w[1] <= w[0]));
    assert_eq!(lr_schedule(3, 0, 0, 0.1), 0.1);
}

#[test]
fn adamw_zero_grads() {
    let init = vec![1.0f32, -2.0, 0.5];
    let mut s = store_with(&[("w", init.clone())]);
    let grads = vec![Some(Tensor::zeros(&[3]))];
    let mut st = OptimState::new(&s);
    let no_decay = AdamW { weight_decay: 0.0, ..AdamW::default() };
    adamw_step(&mut s, &grads, &mut st, &no_decay, 0.1).unwrap();
    assert_eq!(s.get(s.id("w").unwrap()).data(), &init[..]);

    let decay = AdamW { weight_decay: 0.5, ..AdamW::default() };
    adamw_step(&mut s, &grads, &mut st, &decay, 0.1).unwrap();
    let want: Vec<f32> = init.iter().map(|x| x * (1.0 - 0.1 * 0.5)).collect();
    assert_eq!(s.get(s.id("w").unwrap()).data(), &want[..]);
}

#[test]
fn adamw_matches_hand_recurrence() {
    let mut s = store_with(&[("p", vec![0.7])]);
    let mut st = OptimState::new(&s);
    let h = AdamW { beta1: 0.9, beta2: 0.99, eps: 1e-8, weight_decay: 0.01 };
    let (lr, g) = (0.05f64, 0.3f64);
    let (mut p, mut m, mut v) = (0.7f64, 0.0f64, 0.0f64);
    for t in 1..=3 {
        m = 0.9 * m + 0.1 * g;
        v = 0.99 * v + 0.01 * g * g;
        let mh = m / (1.0 - 0.9f64.powi(t));
        let vh = v / (1.0 - 0.99f64.powi(t));
        p = p * (1.0 - lr * 0.01) - lr * mh / (vh.sqrt() + 1e-8);
        adamw_step(&mut s, &[Some(Tensor::new(vec![1], vec![g as f32]).unwrap())], &mut st, &h, lr).unwrap();
    }
    assert_eq!(st.step, 3);
    let got = s.get(s.id("p").unwrap()).data()[0] as f64;
    assert!((got - p).abs() < 1e-6, "{got} vs {p}");
}

#[test]
fn adamw_rejects_non_finite_and_lr_zero_is_identity() {
    let mut s = store_with(&[("a", vec![1.0, 2.0]), ("blk.w", vec![3.0])]);
    let mut st = OptimState::new(&s);
    let bad = vec![Some(Tensor::zeros(&[2])), Some(Tensor::new(vec![1], vec![f32::NAN]).unwrap())];
    match adamw_step(&mut s, &bad, &mut st, &AdamW::default(), 0.1) {
        Err(Error::Numeric(msg)) => assert!(msg.contains("blk.w")),
        other => panic!("{other:?}"),
    }
    assert_eq!(st.step, 0);

    let before: Vec<Vec<u32>> = s.named().map(|(_, t)| t.data().iter().map(|x| x.to_bits()).collect()).collect();
    let g = vec![Some(Tensor::new(vec![2], vec![0.3, -7.0]).unwrap()), None];
    adamw_step(&mut s, &g, &mut st, &AdamW::default(), 0.0).unwrap();
    let after: Vec<Vec<u32>> = s.named().map(|(_, t)| t.data().iter().map(|x| x.to_bits()).collect()).collect();
    assert_eq!(before, after);
}

#[test]
fn config_text_round_trip_and_validation() {
    let mut c = tiny_cfg();
    c.cutout_fill = Fill::Noise;
    c.ct_range = Some((-1000.0, 1000.0));
    c.target_dice = Some(0.9);
    c.data = vec!["a.vol".into(), "b.vol".into()];
    c.init = Some("pre.swck".into());
    let text = c.to_text();
    assert_eq!(RunConfig::from_text(&text).unwrap(), c);
    assert_eq!(text.lines().count(), RunConfig::KEYS.len());

    let mut d = RunConfig::from_text("# comment\nsteps = 7\n\nlr=0.01\n").unwrap();
    assert_eq!((d.steps, d.lr, d.batch), (7, 0.01, 4));
    d.set("steps", "9").unwrap();
    assert_eq!(d.steps, 9);

    let field = |r: swin_unetr::Result<RunConfig>| match r {
        Err(Error::Config { field, .. }) => field,
        other => panic!("{other:?}"),
    };
    assert_eq!(field(RunConfig::from_text("bogus = 1")), "bogus");
    assert_eq!(field(RunConfig::from_text("steps = many")), "steps");
    assert_eq!(field(RunConfig::from_text("roi = 1,2")), "roi");
    assert!(RunConfig::from_text("steps").is_err());

    let mut bad = tiny_cfg();
    bad.warmup = 50;
    assert!(matches!(bad.validate(), Err(Error::Config { field, .. }) if field == "warmup"));
    let mut bad = tiny_cfg();
    bad.roi = [16, 15, 16];
    assert!(matches!(bad.validate(), Err(Error::Config { field, .. }) if field == "roi"));
    let mut bad = tiny_cfg();
    bad.data = vec!["/definitely/not/here.vol".into()];
    assert!(matches!(bad.check_paths(), Err(Error::Config { field, .. }) if field == "data"));
    tiny_cfg().validate().unwrap();
}

#[test]
fn encoder_compatibility_names_field() {
    let a = tiny_cfg();
    let mut b = tiny_cfg();
    b.n_classes = 5;
    b.lr = 0.5;
    a.check_encoder_compatible(&b).unwrap();
    b.encoder.window = 4;
    match a.check_encoder_compatible(&b) {
        Err(Error::Config { field, .. }) => assert_eq!(field, "window"),
        other => panic!("{other:?}"),
    }
}

fn sample_checkpoint() -> Checkpoint {
    let mut store = ParamStore::new();
    let cfg = tiny_cfg();
    SwinUnetr::new(cfg.model(), &mut store, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let mut optim = OptimState::new(&store);
    optim.step = 11;
    optim.m[0].data_mut()[0] = 0.25;
    Checkpoint::from_store(&cfg, 11, &store, Some(&optim))
}

#[test]
fn checkpoint_round_trip_and_corruption() {
    let ck = sample_checkpoint();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.swck");
    save_checkpoint(&path, &ck).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back, ck);
    for ((_, a), (_, b)) in back.params.iter().zip(&ck.params) {
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    let bytes = ck.encode().unwrap();
    assert_eq!(&bytes[..4], SWCK_MAGIC);
    let mut tampered = bytes.clone();
    let mid = bytes.len() / 2;
    tampered[mid] ^= 0x10;
    assert!(matches!(Checkpoint::decode(&tampered), Err(Error::Format { .. })));
    assert!(Checkpoint::decode(&bytes[..bytes.len() - 3]).is_err());
    let mut v2 = bytes.clone();
    v2[4..8].copy_from_slice(&(SWCK_VERSION + 1).to_le_bytes());
    assert!(matches!(Checkpoint::decode(&v2), Err(Error::Format { offset: 4, .. })));
    let mut magic = bytes;
    magic[0] = b'X';
    assert!(matches!(Checkpoint::decode(&magic), Err(Error::Format { offset: 0, .. })));
}

#[test]
fn checkpoint_heads_are_detachable() {
    let cfg = tiny_cfg();
    let vols = images(&phantoms(2, 2));
    let out = pretrain(&cfg, &vols, TrainOptions { stop_at: Some(1), ..Default::default() }).unwrap();
    let ck = out.checkpoint;
    assert!(ck.params.iter().any(|(n, _)| n.starts_with(HEADS_PREFIX)));
    let kept = ck.without_heads();
    assert!(!kept.is_empty());
    assert!(kept.iter().all(|(n, _)| n.starts_with("encoder.")));
}

#[test]
fn window_origins_cover_extent() {
    assert_eq!(window_origins(96, 96, 0.5), vec![0]);
    assert_eq!(window_origins(100, 96, 0.5), vec![0, 4]);
    assert_eq!(window_origins(200, 96, 0.5), vec![0, 48, 96, 104]);
    assert_eq!(window_origins(10, 16, 0.5), vec![-3]);
    for (e, r, o) in [(37, 16, 0.25), (64, 16, 0.0), (17, 16, 0.9)] {
        let w = window_origins(e, r, o);
        assert_eq!(w[0], 0);
        assert_eq!(*w.last().unwrap() as usize + r, e);
    }
}

#[test]
fn sliding_window_constant_stub() {
    let v = Tensor::from_fn(&[1, 21, 13, 9], |i| i as f32);
    let stub = |x: &Tensor<f32>| {
        let [_, h, w, d] = x.dims().try_into().unwrap();
        Ok(Tensor::from_fn(&[3, h, w, d], |i| [0.2, 0.5, 0.3][i / (h * w * d)]))
    };
    for overlap in [0.0, 0.25, 0.5, 0.8] {
        let out = sliding_window_infer(&v, [8, 8, 8], overlap, stub).unwrap();
        assert_eq!(out.probs.dims(), &[3, 21, 13, 9]);
        assert!(out.coverage.iter().all(|&c| c >= 1));
        let n = 21 * 13 * 9;
        for (i, &p) in out.probs.data().iter().enumerate() {
            assert!((p - [0.2, 0.5, 0.3][i / n]).abs() < 1e-6);
        }
    }
    let small = Tensor::from_fn(&[1, 5, 6, 7], |_| 1.0);
    let out = sliding_window_infer(&small, [8, 8, 8], 0.5, stub).unwrap();
    assert_eq!(out.probs.dims(), &[3, 5, 6, 7]);
    assert!(sliding_window_infer(&small, [8, 8, 8], 1.0, stub).is_err());
}

#[test]
fn sliding_window_matches_direct_forward() {
    let mut store = ParamStore::new();
    let model = SwinUnetr::new(
        ModelConfig::new(EncoderConfig::with_width(6, 2), 3),
        &mut store,
        &mut ChaCha8Rng::seed_from_u64(2),
    )
    .unwrap();
    let x = gen_phantom(1, [16; 3], 2, 3).unwrap().image.data;
    let direct = model.predict(&store, &x).unwrap();
    let tiled = infer_probs(&model, &store, &x, [16; 3], 0.5).unwrap();
    assert_eq!(direct.dims(), tiled.dims());
    let err = direct.data().iter().zip(tiled.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
    assert!(err < 1e-6, "{err}");
    assert_eq!(argmax_labels(&direct).len(), 16 * 16 * 16);
}

#[test]
fn pretrain_reduces_loss_and_is_deterministic() {
    let cfg = tiny_cfg();
    let vols = images(&phantoms(3, 2));
    let a = pretrain(&cfg, &vols, TrainOptions::default()).unwrap();
    let b = pretrain(&cfg, &vols, TrainOptions::default()).unwrap();
    let total = a.curve.column("total").unwrap();
    assert_eq!(total.len(), 20);
    assert!(total[19] < total[0], "{total:?}");
    let bits = |c: &Curve| c.rows.iter().flat_map(|r| r.values.iter().map(|v| v.to_bits())).collect::<Vec<_>>();
    assert_eq!(bits(&a.curve), bits(&b.curve));
    assert_eq!(a.checkpoint, b.checkpoint);
    assert_eq!(a.checkpoint.step, 20);
}

#[test]
fn pretrain_ablation_logs_only_inpainting() {
    let mut cfg = tiny_cfg();
    cfg.steps = 3;
    cfg.lambdas = swin_unetr::ssl::Lambdas(1.0, 0.0, 0.0);
    let out = pretrain(&cfg, &images(&phantoms(2, 2)), TrainOptions::default()).unwrap();
    for r in &out.curve.rows {
        assert!(r.values[0].is_finite());
        assert!(r.values[1].is_nan() && r.values[2].is_nan());
        assert_eq!(r.values[3], r.values[0]);
    }
}

#[test]
fn resume_reproduces_trajectory() {
    let mut cfg = tiny_cfg();
    cfg.steps = 12;
    cfg.warmup = 4;
    let vols = images(&phantoms(3, 2));
    let full = pretrain(&cfg, &vols, TrainOptions::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mid.swck");
    let half = pretrain(&cfg, &vols, TrainOptions { stop_at: Some(6), ..Default::default() }).unwrap();
    half.checkpoint.save(&path).unwrap();
    let ck = load_checkpoint(&path).unwrap();
    assert_eq!(ck.step, 6);
    let rest = pretrain(&cfg, &vols, TrainOptions { resume: Some(&ck), ..Default::default() }).unwrap();
    assert_eq!(rest.curve.rows.len(), 6);
    assert_eq!(rest.curve.rows[0].lr, lr_schedule(6, 4, 12, cfg.lr));
    for (a, b) in rest.curve.rows.iter().zip(&full.curve.rows[6..]) {
        assert_eq!(a.step, b.step);
        assert_eq!(a.lr.to_bits(), b.lr.to_bits());
        let bits = |r: &CurveRow| r.values.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a), bits(b));
    }
    assert_eq!(rest.checkpoint, full.checkpoint);
}

#[test]
fn curve_file_format() {
    let mut cfg = tiny_cfg();
    cfg.steps = 2;
    cfg.warmup = 1;
    let dir = tempfile::tempdir().unwrap();
    cfg.curve = Some(dir.path().join("curve.tsv"));
    cfg.checkpoint = Some(dir.path().join("out.swck"));
    pretrain(&cfg, &images(&phantoms(2, 2)), TrainOptions::default()).unwrap();
    let text = std::fs::read_to_string(cfg.curve.as_ref().unwrap()).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "step\tlr\tinpaint\tcontrastive\trotation\ttotal");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("1\t0e0\t"));
    assert_eq!(lines[2].split('\t').count(), 6);
    assert_eq!(load_checkpoint(cfg.checkpoint.as_ref().unwrap()).unwrap().step, 2);
}

#[test]
fn finetune_smoke_from_scratch_and_init() {
    let mut cfg = tiny_cfg();
    cfg.steps = 3;
    cfg.batch = 1;
    cfg.n_classes = 3;
    cfg.val_every = 2;
    let train = phantoms(2, 3);
    let val = phantoms(1, 3);
    let scratch = finetune(&cfg, &train, &val, None, TrainOptions::default()).unwrap();
    assert_eq!(scratch.curve.rows.len(), 3);
    let vd = scratch.curve.column("val_dice").unwrap();
    assert!(vd[0].is_nan() && vd[1].is_finite() && vd[2].is_finite());
    assert!(scratch.last_val_dice.is_some());

    let mut pcfg = tiny_cfg();
    pcfg.steps = 2;
    let pre = pretrain(&pcfg, &images(&train), TrainOptions::default()).unwrap();
    let tuned =
        finetune(&cfg, &train, &val, Some(&pre.checkpoint), TrainOptions { stop_at: Some(1), ..Default::default() })
            .unwrap();
    assert_eq!(tuned.checkpoint.step, 1);
    assert!(!tuned.checkpoint.params.iter().any(|(n, _)| n.starts_with(HEADS_PREFIX)));
    let (model, store) = load_model(&tuned.checkpoint).unwrap();
    assert_eq!(model.cfg.n_classes, 3);
    assert_eq!(store.len(), tuned.checkpoint.params.len());
}

#[test]
fn finetune_init_loads_encoder_only() {
    let mut cfg = tiny_cfg();
    cfg.steps = 1;
    cfg.batch = 1;
    cfg.lr = 0.0;
    cfg.warmup = 0;
    let train = phantoms(1, 2);
    let pre = pretrain(&cfg, &images(&train), TrainOptions::default()).unwrap();
    let mut fcfg = cfg.clone();
    fcfg.seed = 99;
    let tuned = finetune(&fcfg, &train, &[], Some(&pre.checkpoint), TrainOptions::default()).unwrap();
    let pre_map: std::collections::HashMap<_, _> = pre.checkpoint.params.iter().cloned().collect();
    for (name, t) in &tuned.checkpoint.params {
        if name.starts_with("encoder.") {
            let p = &pre_map[name];
            // lr = 0 still applies no decay, so encoder weights are the loaded ones.
            assert_eq!(p, t, "{name}");
        }
    }
}

#[test]
fn finetune_rejects_bad_labels_and_encoder_mismatch() {
    let mut cfg = tiny_cfg();
    cfg.n_classes = 2;
    cfg.steps = 1;
    cfg.warmup = 0;
    cfg.batch = 1;
    let three = phantoms(1, 3);
    match finetune(&cfg, &three, &[], None, TrainOptions::default()) {
        Err(Error::Config { field, .. }) => assert_eq!(field, "n_classes"),
        Err(e) => panic!("{e}"),
        Ok(_) => panic!("accepted labels beyond n_classes"),
    }
    let mut other = tiny_cfg();
    other.encoder.embed_dim = 12;
    other.encoder.heads = EncoderConfig::default_heads(12);
    other.steps = 1;
    other.warmup = 0;
    let pre = pretrain(&other, &images(&phantoms(1, 2)), TrainOptions::default()).unwrap();
    match finetune(&cfg, &phantoms(1, 2), &[], Some(&pre.checkpoint), TrainOptions::default()) {
        Err(Error::Config { field, .. }) => assert_eq!(field, "embed_dim"),
        Err(e) => panic!("{e}"),
        Ok(_) => panic!("accepted mismatched encoder"),
    }
}

#[test]
fn data_index_is_a_permutation_per_epoch() {
    for epoch in 0..3 {
        let mut seen: Vec<usize> = (0..7).map(|k| data_index(4, 7, epoch * 7 + k)).collect();
        seen.sort();
        assert_eq!(seen, (0..7).collect::<Vec<_>>());
    }
    assert_ne!(derive_seed(1, Purpose::Crop, 0), derive_seed(1, Purpose::Views, 0));
    assert_ne!(derive_seed(1, Purpose::Crop, 0), derive_seed(1, Purpose::Crop, 1));
}
