use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use swin_unetr::diffops::*;
use swin_unetr::ssl::*;
use swin_unetr::swin3d::EncoderConfig;
use swin_unetr::{Error, ParamStore, Tensor};

fn rand_tensor(dims: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(dims, |_| rng.gen_range(-1.0..1.0))
}

/// Contrastive loss evaluated literally, anchor by anchor.
fn contrastive_brute(e: &[Vec<f64>], partners: &[usize], t: f64) -> f64 {
    let norm = |v: &Vec<f64>| v.iter().map(|a| a * a).sum::<f64>().sqrt();
    let sim = |a: &Vec<f64>, b: &Vec<f64>| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (norm(a) * norm(b));
    let n = e.len();
    let mut total = 0.0;
    for i in 0..n {
        let num = (sim(&e[i], &e[partners[i]]) / t).exp();
        let den: f64 = (0..n).filter(|&k| k != i).map(|k| (sim(&e[i], &e[k]) / t).exp()).sum();
        total += -(num / den).ln();
    }
    total / n as f64
}

fn rows(t: &Tensor<f64>) -> Vec<Vec<f64>> {
    t.data().chunks(t.dims()[1]).map(|r| r.to_vec()).collect()
}

#[test]
fn rotate_identities() {
    let v = rand_tensor(&[2, 3, 5, 5], &mut ChaCha8Rng::seed_from_u64(1));
    assert_eq!(rotate_z90(&v, 0).unwrap(), v);
    let mut r = v.clone();
    for _ in 0..4 {
        r = rotate_z90(&r, 1).unwrap();
    }
    assert_eq!(r, v);
    assert_eq!(rotate_z90(&v, 5).unwrap(), rotate_z90(&v, 1).unwrap());
    assert_ne!(rotate_z90(&v, 1).unwrap(), v);
    let bad = Tensor::<f64>::zeros(&[1, 4, 4, 3]);
    assert!(matches!(rotate_z90(&bad, 1), Err(Error::Shape(_))));
}

#[test]
fn rotate_marked_voxel() {
    let n = 4;
    let at = |x: usize, y: usize| y * n + x;
    let mut v = Tensor::<f64>::zeros(&[1, 1, n, n]);
    v.data_mut()[at(0, 0)] = 1.0;
    let r = rotate_z90(&v, 1).unwrap();
    assert_eq!(r.data()[at(0, n - 1)], 1.0);
    assert_eq!(r.sum(), 1.0);
    // Every voxel follows (x, y) -> (y, n - 1 - x).
    let v = Tensor::from_fn(&[1, 1, n, n], |i| i as f64);
    let r = rotate_z90(&v, 1).unwrap();
    for y in 0..n {
        for x in 0..n {
            assert_eq!(r.data()[at(y, n - 1 - x)], v.data()[at(x, y)]);
        }
    }
}

proptest! {
    #[test]
    fn rotate_inverse_is_exact(k in 0usize..4, n in 1usize..7, h in 1usize..4, seed: u64) {
        let v = rand_tensor(&[1, h, n, n], &mut ChaCha8Rng::seed_from_u64(seed));
        let r = rotate_z90(&rotate_z90(&v, k).unwrap(), 4 - k).unwrap();
        prop_assert_eq!(r, v);
    }

    #[test]
    fn cutout_meets_coverage(h in 4usize..20, w in 4usize..20, d in 4usize..20, s in 0.05f64..0.9, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mask = cutout_mask([h, w, d], s, &mut rng).unwrap();
        let need = (s * (h * w * d) as f64).ceil() as usize;
        prop_assert!(mask.iter().filter(|&&m| m).count() >= need);
    }
}

#[test]
fn cutout_fills_exactly_the_mask() {
    let v = Tensor::from_fn(&[2, 10, 12, 8], |i| 1.0 + (i % 7) as f64);
    let (x, mask) = cutout(&v, 0.3, Fill::Constant(0.0), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let n = 10 * 12 * 8;
    for c in 0..2 {
        for j in 0..n {
            let i = c * n + j;
            if mask[j] {
                assert_eq!(x.data()[i], 0.0);
            } else {
                assert_eq!(x.data()[i], v.data()[i]);
            }
        }
    }
    let (again, mask2) = cutout(&v, 0.3, Fill::Constant(0.0), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    assert_eq!((again, mask2), (x, mask));
    let (noisy, m) = cutout(&v, 0.3, Fill::Noise, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    for j in 0..n {
        if m[j] {
            assert!((0.0..1.0).contains(&noisy.data()[j]));
        }
    }
    assert!(cutout(&v, 0.0, Fill::Noise, &mut ChaCha8Rng::seed_from_u64(3)).is_err());
    assert!(cutout(&v, 1.0, Fill::Noise, &mut ChaCha8Rng::seed_from_u64(3)).is_err());
}

#[test]
fn views_without_randomness_are_the_input() {
    let x = rand_tensor(&[1, 4, 6, 6], &mut ChaCha8Rng::seed_from_u64(4));
    let aug = Augment { rotate: false, cutout: None, fill: Fill::Constant(0.0) };
    let pairs = make_views(std::slice::from_ref(&x), &aug, 9).unwrap();
    assert_eq!(pairs.len(), 1);
    assert_eq!(pairs[0].first.x, x);
    assert_eq!(pairs[0].second.x, x);
    assert_eq!((pairs[0].first.rot, pairs[0].second.rot), (0, 0));
    assert!(make_views::<f64>(&[], &aug, 9).is_err());
}

#[test]
fn view_invariants() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let batch: Vec<_> = (0..3).map(|_| rand_tensor(&[1, 8, 8, 8], &mut rng)).collect();
    let aug = Augment { rotate: true, cutout: Some(0.3), fill: Fill::Constant(0.0) };
    let pairs = make_views(&batch, &aug, 11).unwrap();
    assert_eq!(pairs.len(), 3);
    let need = (0.3f64 * 512.0).ceil() as usize;
    let mut differ = 0;
    for (p, x) in pairs.iter().zip(&batch) {
        for v in [&p.first, &p.second] {
            assert_eq!(v.orig, rotate_z90(x, v.rot).unwrap());
            assert!(v.mask.iter().filter(|&&m| m).count() >= need);
            for (j, &m) in v.mask.iter().enumerate() {
                if !m {
                    assert_eq!(v.x.data()[j], v.orig.data()[j]);
                }
            }
        }
        differ += usize::from(p.first.mask != p.second.mask);
    }
    assert_eq!(differ, 3);
    let again = make_views(&batch, &aug, 11).unwrap();
    for (a, b) in pairs.iter().zip(&again) {
        assert_eq!(a.first.x, b.first.x);
        assert_eq!(a.second.mask, b.second.mask);
    }
}

fn tiny_model(seed: u64) -> (SslModel, ParamStore<f64>) {
    let mut store = ParamStore::new();
    let m = SslModel::new(EncoderConfig::with_width(6, 2), &mut store, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    (m, store)
}

#[test]
fn head_output_shapes() {
    let (m, store) = tiny_model(6);
    assert!(store.ids().any(|id| store.name(id).starts_with("heads.")));
    for ext in [[16, 16, 16], [32, 16, 32], [24, 24, 16]] {
        let mut tape = Tape::new();
        let pv = store.bind(&mut tape);
        let x = tape.constant(rand_tensor(&[1, ext[0], ext[1], ext[2]], &mut ChaCha8Rng::seed_from_u64(7)));
        let out = m.forward(&mut tape, &pv, x).unwrap();
        assert_eq!(tape.dims(out.recon), &[1, ext[0], ext[1], ext[2]]);
        assert_eq!(tape.dims(out.rot_logits), &[1, ROTATIONS]);
        assert_eq!(tape.dims(out.embed), &[1, EMBED_DIM]);
    }
}

#[test]
fn inpaint_loss_examples() {
    let o = rand_tensor(&[1, 3, 4, 5], &mut ChaCha8Rng::seed_from_u64(8));
    assert_eq!(inpaint_loss(&o, &o).unwrap(), 0.0);
    assert!((inpaint_loss(&o.map(|v| v + 1.0), &o).unwrap() - 1.0).abs() < 1e-12);
    let r = rand_tensor(&[1, 3, 4, 5], &mut ChaCha8Rng::seed_from_u64(9));
    let a = inpaint_loss(&r, &o).unwrap();
    let doubled = Tensor::from_fn(&[1, 3, 4, 5], |i| o.data()[i] + 2.0 * (r.data()[i] - o.data()[i]));
    assert!((inpaint_loss(&doubled, &o).unwrap() - 2.0 * a).abs() < 1e-12);
    assert!(inpaint_loss(&r, &Tensor::zeros(&[1, 3, 4, 4])).is_err());
}

#[test]
fn rotation_loss_examples() {
    let uniform = Tensor::<f64>::zeros(&[3, 4]);
    assert!((rotation_loss(&uniform, &[0, 2, 3]).unwrap() - 4f64.ln()).abs() < 1e-6);
    let mut sat = Tensor::<f64>::zeros(&[2, 4]);
    sat.data_mut()[1] = 50.0;
    sat.data_mut()[4 + 3] = 50.0;
    assert!(rotation_loss(&sat, &[1, 3]).unwrap() < 1e-12);
    let logits = rand_tensor(&[3, 4], &mut ChaCha8Rng::seed_from_u64(10));
    let a = rotation_loss(&logits, &[0, 1, 2]).unwrap();
    let perm = Tensor::from_fn(&[3, 4], |i| logits.data()[[2, 0, 1][i / 4] * 4 + i % 4]);
    let b = rotation_loss(&perm, &[2, 0, 1]).unwrap();
    assert!((a - b).abs() < 1e-12);
    assert!(rotation_loss(&logits, &[0, 4, 1]).is_err());
}

#[test]
fn contrastive_single_pair_is_zero() {
    let e = rand_tensor(&[2, 8], &mut ChaCha8Rng::seed_from_u64(11));
    assert_eq!(contrastive_loss(&e, &split_partners(1), 0.5).unwrap(), 0.0);
}

#[test]
fn contrastive_hand_example() {
    // Views laid out as [v1, v3, v2, v4] so pairs are (0,2) and (1,3).
    let e = Tensor::new(vec![4, 2], vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
    let want = -(2f64.exp() / (2f64.exp() + 2.0)).ln();
    assert!((want - 0.23954).abs() < 1e-5);
    let got = contrastive_loss(&e, &split_partners(2), 0.5).unwrap();
    assert!((got - want).abs() < 1e-12);
}

#[test]
fn contrastive_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for n in [1, 2, 4, 8] {
        for t in [0.1, 0.5, 1.0] {
            let e = rand_tensor(&[2 * n, 16], &mut rng);
            let p = split_partners(n);
            let got = contrastive_loss(&e, &p, t).unwrap();
            assert!((got - contrastive_brute(&rows(&e), &p, t)).abs() < 1e-6, "n={n} t={t}");
        }
    }
    // Arbitrary pairing, not just the split layout.
    let e = rand_tensor(&[6, 5], &mut rng);
    let p = [1, 0, 3, 2, 5, 4];
    let got = contrastive_loss(&e, &p, 0.3).unwrap();
    assert!((got - contrastive_brute(&rows(&e), &p, 0.3)).abs() < 1e-6);
}

proptest! {
    #[test]
    fn contrastive_reindexing_and_scale_invariance(n in 1usize..5, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e = rand_tensor(&[2 * n, 6], &mut rng);
        let p = split_partners(n);
        let base = contrastive_loss(&e, &p, 0.5).unwrap();

        let mut perm: Vec<usize> = (0..2 * n).collect();
        for i in (1..perm.len()).rev() {
            perm.swap(i, rng.gen_range(0..=i));
        }
        // Row r of the permuted matrix is original row perm[r].
        let mut inv = vec![0; 2 * n];
        for (r, &o) in perm.iter().enumerate() {
            inv[o] = r;
        }
        let pe = Tensor::from_fn(&[2 * n, 6], |i| e.data()[perm[i / 6] * 6 + i % 6]);
        let pp: Vec<usize> = (0..2 * n).map(|r| inv[p[perm[r]]]).collect();
        prop_assert!((contrastive_loss(&pe, &pp, 0.5).unwrap() - base).abs() < 1e-6);

        let scales: Vec<f64> = (0..2 * n).map(|_| rng.gen_range(0.1..10.0)).collect();
        let se = Tensor::from_fn(&[2 * n, 6], |i| e.data()[i] * scales[i / 6]);
        prop_assert!((contrastive_loss(&se, &p, 0.5).unwrap() - base).abs() < 1e-6);
    }
}

#[test]
fn contrastive_errors() {
    let mut e = rand_tensor(&[4, 3], &mut ChaCha8Rng::seed_from_u64(13));
    assert!(matches!(contrastive_loss(&e, &split_partners(2), 0.0), Err(Error::Config { .. })));
    assert!(contrastive_loss(&e, &[1, 0, 3, 3], 0.5).is_err());
    e.data_mut()[3..6].fill(0.0);
    assert!(matches!(contrastive_loss(&e, &split_partners(2), 0.5), Err(Error::Degenerate(_))));
    let one = rand_tensor(&[1, 3], &mut ChaCha8Rng::seed_from_u64(13));
    assert!(contrastive_loss(&one, &[0], 0.5).is_err());
}

#[test]
fn total_loss_weighting() {
    assert_eq!(total_loss(0.5, 1.5, 2.0, Lambdas::default()), 4.0);
    assert_eq!(total_loss(0.5, 1.5, 2.0, Lambdas(1.0, 0.0, 0.0)), 0.5);
    assert_eq!(total_loss(0.0, 0.0, 0.0, Lambdas::default()), 0.0);
    assert!(Lambdas(1.0, -1.0, 0.0).validate().is_err());
}

fn views(n: usize, seed: u64) -> Vec<ViewPair<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let batch: Vec<_> = (0..n).map(|_| Tensor::from_fn(&[1, 16, 16, 16], |_| rng.gen_range(0.0..1.0))).collect();
    make_views(&batch, &Augment { rotate: true, cutout: Some(0.3), fill: Fill::Constant(0.0) }, seed).unwrap()
}

#[test]
fn ablation_evaluates_only_inpainting() {
    let (m, store) = tiny_model(14);
    let pairs = views(2, 15);
    let mut tape = Tape::new();
    let pv = store.bind(&mut tape);
    let l = m.loss(&mut tape, &pv, &pairs, Lambdas(1.0, 0.0, 0.0), 0.5).unwrap();
    assert!(l.contrastive.is_none() && l.rotation.is_none());
    assert_eq!(tape.scalar(l.total), tape.scalar(l.inpaint.unwrap()));
    let all = m.loss(&mut tape, &pv, &pairs, Lambdas::default(), 0.5).unwrap();
    let sum = total_loss(
        tape.scalar(all.inpaint.unwrap()),
        tape.scalar(all.contrastive.unwrap()),
        tape.scalar(all.rotation.unwrap()),
        Lambdas::default(),
    );
    assert!((tape.scalar(all.total) - sum).abs() < 1e-12);
    assert!(m.loss(&mut tape, &pv, &pairs, Lambdas(0.0, 0.0, 0.0), 0.5).is_err());
}

#[test]
fn total_loss_gradient_matches_finite_differences() {
    let (m, store) = tiny_model(16);
    let pairs = views(2, 17);
    let err = grad_check_params(
        |tape, s| {
            let pv = s.bind(tape);
            Ok(m.loss(tape, &pv, &pairs, Lambdas::default(), 0.5)?.total)
        },
        &store,
        1e-5,
        Coords::Sample { per_tensor: 2, seed: 18 },
    )
    .unwrap();
    assert!(err < 1e-3, "rel err {err}");
}
