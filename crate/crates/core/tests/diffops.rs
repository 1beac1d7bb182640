use std::sync::Arc;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use swin_unetr::diffops::*;
use swin_unetr::{Error, Tensor};

fn rand_tensor(dims: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(dims, |_| rng.gen_range(-1.0..1.0))
}

fn t(dims: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(dims.to_vec(), data.to_vec()).unwrap()
}

/// Weighted sum with fixed random weights so no primitive cancels to a constant.
fn probe(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var, Error> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = tape.constant(rand_tensor(tape.dims(y), &mut rng));
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

#[test]
fn conv3d_examples() {
    let x = Tensor::<f64>::zeros(&[1, 4, 4, 4]);
    let w = rand_tensor(&[2, 1, 3, 3, 3], &mut ChaCha8Rng::seed_from_u64(1));
    let y = conv3d(&x, &w, Some(&Tensor::zeros(&[2])), 1, 1).unwrap();
    assert!(y.data().iter().all(|&v| v == 0.0));

    let x = rand_tensor(&[1, 3, 4, 5], &mut ChaCha8Rng::seed_from_u64(2));
    let id = t(&[1, 1, 1, 1, 1], &[1.0]);
    assert_eq!(conv3d(&x, &id, None, 1, 0).unwrap(), x);

    let ones = Tensor::full(&[1, 3, 3, 3], 1.0);
    let w = Tensor::full(&[1, 1, 3, 3, 3], 1.0);
    let y = conv3d(&ones, &w, Some(&Tensor::zeros(&[1])), 1, 0).unwrap();
    assert_eq!(y.dims(), &[1, 1, 1, 1]);
    assert_eq!(y.data(), &[27.0]);
}

#[test]
fn conv3d_output_extent_formula() {
    let x = Tensor::<f64>::zeros(&[2, 7, 6, 5]);
    let w = Tensor::zeros(&[3, 2, 3, 3, 3]);
    let y = conv3d(&x, &w, None, 2, 1).unwrap();
    assert_eq!(y.dims(), &[3, 4, 3, 3]);
}

#[test]
fn conv3d_channel_mismatch_is_shape_error() {
    let x = Tensor::<f64>::zeros(&[2, 4, 4, 4]);
    let w = Tensor::zeros(&[1, 3, 3, 3, 3]);
    assert!(matches!(conv3d(&x, &w, None, 1, 1), Err(Error::Shape(_))));
    assert!(matches!(conv3d_transpose(&x, &w, None, 2), Err(Error::Shape(_))));
}

#[test]
fn conv3d_against_naive_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_tensor(&[2, 5, 4, 6], &mut rng);
    let w = rand_tensor(&[3, 2, 3, 3, 3], &mut rng);
    let b = rand_tensor(&[3], &mut rng);
    for (stride, pad) in [(1, 1), (2, 1), (1, 0), (2, 0)] {
        let y = conv3d(&x, &w, Some(&b), stride, pad).unwrap();
        let [_, ho, wo, dd] = y.dims().try_into().unwrap();
        for co in 0..3 {
            for oh in 0..ho {
                for ow in 0..wo {
                    for od in 0..dd {
                        let mut acc = b.data()[co];
                        for ci in 0..2 {
                            for kh in 0..3 {
                                for kw in 0..3 {
                                    for kd in 0..3 {
                                        let ih = (oh * stride + kh) as isize - pad as isize;
                                        let iw = (ow * stride + kw) as isize - pad as isize;
                                        let id = (od * stride + kd) as isize - pad as isize;
                                        if ih < 0 || iw < 0 || id < 0 || ih >= 5 || iw >= 4 || id >= 6 {
                                            continue;
                                        }
                                        let xi = ((ci * 5 + ih as usize) * 4 + iw as usize) * 6 + id as usize;
                                        let wi = (((co * 2 + ci) * 3 + kh) * 3 + kw) * 3 + kd;
                                        acc += x.data()[xi] * w.data()[wi];
                                    }
                                }
                            }
                        }
                        let yi = ((co * ho + oh) * wo + ow) * dd + od;
                        assert!((y.data()[yi] - acc).abs() < 1e-12);
                    }
                }
            }
        }
    }
}

#[test]
fn conv3d_transpose_examples() {
    let x = t(&[1, 1, 1, 1], &[2.5]);
    let w = Tensor::full(&[1, 1, 2, 2, 2], 1.0);
    let y = conv3d_transpose(&x, &w, None, 2).unwrap();
    assert_eq!(y.dims(), &[1, 2, 2, 2]);
    assert!(y.data().iter().all(|&v| v == 2.5));

    let w = rand_tensor(&[3, 2, 2, 2, 2], &mut ChaCha8Rng::seed_from_u64(4));
    let y = conv3d_transpose(&Tensor::zeros(&[3, 2, 3, 2]), &w, None, 2).unwrap();
    assert_eq!(y.dims(), &[2, 4, 6, 4]);
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn conv3d_transpose_is_adjoint() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for (k, stride, ext) in [(2, 2, [4, 6, 4]), (3, 1, [4, 3, 5]), (3, 2, [5, 5, 7]), (1, 1, [2, 3, 4])] {
        let x = rand_tensor(&[2, ext[0], ext[1], ext[2]], &mut rng);
        let w = rand_tensor(&[3, 2, k, k, k], &mut rng);
        let cx = conv3d(&x, &w, None, stride, 0).unwrap();
        let y = rand_tensor(cx.dims(), &mut rng);
        let lhs = cx.dot(&y);
        let ty = conv3d_transpose(&y, &w, None, stride).unwrap();
        // The transpose covers the extents the forward conv actually read.
        let mut rhs = 0.0;
        let [_, th, tw, td]: [usize; 4] = ty.dims().try_into().unwrap();
        for c in 0..2 {
            for h in 0..th {
                for wi in 0..tw {
                    for d in 0..td {
                        let a = ty.data()[((c * th + h) * tw + wi) * td + d];
                        let b = x.data()[((c * ext[0] + h) * ext[1] + wi) * ext[2] + d];
                        rhs += a * b;
                    }
                }
            }
        }
        assert!((lhs - rhs).abs() <= 1e-5 * lhs.abs().max(1.0), "k={k} s={stride}: {lhs} vs {rhs}");
    }
}

#[test]
fn linear_examples() {
    let x = t(&[1, 2], &[1.0, 2.0]);
    let w = t(&[2, 2], &[1.0, 0.0, 0.0, 2.0]);
    let b = t(&[2], &[1.0, 1.0]);
    assert_eq!(linear(&x, &w, Some(&b)).unwrap().data(), &[2.0, 5.0]);

    let x = rand_tensor(&[3, 4, 3], &mut ChaCha8Rng::seed_from_u64(6));
    let eye = Tensor::from_fn(&[3, 3], |i| if i / 3 == i % 3 { 1.0 } else { 0.0 });
    assert_eq!(linear(&x, &eye, Some(&Tensor::zeros(&[3]))).unwrap(), x);

    let b = t(&[2], &[0.5, -1.5]);
    let y = linear(&Tensor::zeros(&[4, 3]), &Tensor::full(&[3, 2], 7.0), Some(&b)).unwrap();
    assert!(y.data().chunks(2).all(|r| r == [0.5, -1.5]));

    assert!(matches!(linear(&x, &Tensor::zeros(&[4, 2]), None), Err(Error::Shape(_))));
}

#[test]
fn layer_norm_examples() {
    let g = Tensor::full(&[2], 1.0);
    let b = Tensor::zeros(&[2]);
    let y = layer_norm(&t(&[1, 2], &[1.0, 3.0]), &g, &b, 1e-12).unwrap();
    assert!((y.data()[0] + 1.0).abs() < 1e-9 && (y.data()[1] - 1.0).abs() < 1e-9);

    let y = layer_norm(&Tensor::full(&[3, 4], 2.5), &Tensor::full(&[4], 1.0), &Tensor::zeros(&[4]), 1e-5).unwrap();
    assert!(y.data().iter().all(|&v| v == 0.0));

    let beta = t(&[3], &[0.1, 0.2, 0.3]);
    let x = rand_tensor(&[5, 3], &mut ChaCha8Rng::seed_from_u64(7));
    let y = layer_norm(&x, &Tensor::zeros(&[3]), &beta, 1e-5).unwrap();
    assert!(y.data().chunks(3).all(|r| r == beta.data()));
}

#[test]
fn instance_norm_examples() {
    let g = Tensor::full(&[1], 1.0);
    let b = Tensor::zeros(&[1]);
    let y = instance_norm(&t(&[1, 1, 1, 2], &[0.0, 2.0]), &g, &b, 1e-12).unwrap();
    assert!((y.data()[0] + 1.0).abs() < 1e-9 && (y.data()[1] - 1.0).abs() < 1e-9);
    let y = instance_norm(&Tensor::full(&[1, 2, 2, 2], 3.0), &g, &b, 1e-5).unwrap();
    assert!(y.data().iter().all(|&v| v == 0.0));
    let y = instance_norm(&Tensor::zeros(&[1, 2, 2, 2]), &g, &b, 1e-5).unwrap();
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn norm_statistics_on_random_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = rand_tensor(&[6, 16], &mut rng).map(|v| 3.0 * v + 2.0);
    let y = layer_norm(&x, &Tensor::full(&[16], 1.0), &Tensor::zeros(&[16]), 1e-5).unwrap();
    for row in y.data().chunks(16) {
        let m = row.iter().sum::<f64>() / 16.0;
        let v = row.iter().map(|a| (a - m).powi(2)).sum::<f64>() / 16.0;
        assert!(m.abs() < 1e-5 && (v - 1.0).abs() < 1e-3);
    }
    let x = rand_tensor(&[3, 4, 3, 5], &mut rng).map(|v| v * 5.0 - 1.0);
    let y = instance_norm(&x, &Tensor::full(&[3], 1.0), &Tensor::zeros(&[3]), 1e-5).unwrap();
    for ch in y.data().chunks(60) {
        let m = ch.iter().sum::<f64>() / 60.0;
        let v = ch.iter().map(|a| (a - m).powi(2)).sum::<f64>() / 60.0;
        assert!(m.abs() < 1e-5 && (v - 1.0).abs() < 1e-3);
    }
}

#[test]
fn softmax_examples() {
    let y = softmax(&Tensor::<f64>::full(&[5], 0.3), 0).unwrap();
    assert!(y.data().iter().all(|&v| (v - 0.2).abs() < 1e-15));
    let y = softmax(&t(&[2], &[0.0, 1000.0]), 0).unwrap();
    assert!(y.data()[0] < 1e-300 && (y.data()[1] - 1.0).abs() < 1e-15);
    let y = softmax(&t(&[2], &[0.0, 3f64.ln()]), 0).unwrap();
    assert!((y.data()[0] - 0.25).abs() < 1e-12 && (y.data()[1] - 0.75).abs() < 1e-12);
}

#[test]
fn softmax_along_inner_axis() {
    let x = rand_tensor(&[3, 4, 2], &mut ChaCha8Rng::seed_from_u64(9));
    let y = softmax(&x, 1).unwrap();
    for o in 0..3 {
        for i in 0..2 {
            let s: f64 = (0..4).map(|j| y.data()[(o * 4 + j) * 2 + i]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn small_elementwise_examples() {
    assert_eq!(gelu_scalar(0.0f64), 0.0);
    let p = global_avg_pool(&Tensor::<f64>::full(&[2, 3, 3, 3], 4.25));
    assert_eq!(p.data(), &[4.25, 4.25]);
    let n = l2_normalize(&t(&[2], &[3.0, 4.0])).unwrap();
    assert!((n.data()[0] - 0.6).abs() < 1e-15 && (n.data()[1] - 0.8).abs() < 1e-15);
    assert!(matches!(l2_normalize(&Tensor::<f64>::zeros(&[3])), Err(Error::Degenerate(_))));
}

#[test]
fn grad_check_examples() {
    let x = t(&[2], &[1.0, 2.0]);
    let mut tape = Tape::new();
    let v = tape.input(x.clone());
    let sq = tape.mul(v, v).unwrap();
    let s = tape.sum(sq);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(v).unwrap().data(), &[2.0, 4.0]);
    let err = grad_check(
        |tp, v| {
            let sq = tp.mul(v, v)?;
            Ok(tp.sum(sq))
        },
        &x,
        1e-4,
    )
    .unwrap();
    assert!(err < 1e-6);

    let err = grad_check(|tp, v| Ok(tp.sum(v)), &x, 1e-4).unwrap();
    assert!(err < 1e-10);

    let target = Arc::new(Tensor::zeros(&[3]));
    let err = grad_check(|tp, v| tp.l1_loss(v, target.clone()), &t(&[3], &[0.5, -0.25, 1.5]), 1e-4).unwrap();
    assert!(err < 1e-4);
}

#[test]
fn grad_check_rejects_non_finite_loss() {
    let r = grad_check(
        |tp, v| {
            let big = tp.scale(v, f64::INFINITY);
            Ok(tp.sum(big))
        },
        &t(&[1], &[1.0]),
        1e-4,
    );
    assert!(matches!(r, Err(Error::Numeric(_))));
}

fn check(xs: &[Tensor<f64>], f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var, Error>) -> f64 {
    grad_check_inputs(f, xs, 1e-5, Coords::All).unwrap()
}

#[test]
fn every_primitive_passes_grad_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let tol = 1e-4;
    let mut r = |d: &[usize]| rand_tensor(d, &mut rng);

    let e = check(&[r(&[2, 3]), r(&[2, 3])], |tp, v| {
        let a = tp.add(v[0], v[1])?;
        let m = tp.mul(a, v[0])?;
        let s = tp.scale(m, 0.7);
        probe(tp, s, 1)
    });
    assert!(e < tol, "add/mul/scale {e}");

    let e = check(&[r(&[3, 2, 4]), r(&[2, 4])], |tp, v| {
        let a = tp.add_bias(v[0], v[1])?;
        let m = tp.mean(a);
        let p = probe(tp, a, 2)?;
        tp.add(m, p)
    });
    assert!(e < tol, "add_bias/mean {e}");

    let e = check(&[r(&[2, 3, 2])], |tp, v| {
        let idx: Arc<[usize]> = Arc::from(vec![5, 0, PAD, 3, 3, 11, 7]);
        let g = tp.gather(v[0], idx, &[7])?;
        let rs = tp.reshape(v[0], &[3, 4])?;
        let c = tp.concat(&[rs, rs])?;
        let a = probe(tp, g, 3)?;
        let b = probe(tp, c, 4)?;
        tp.add(a, b)
    });
    assert!(e < tol, "gather/reshape/concat {e}");

    let e = check(&[r(&[2, 3, 4]), r(&[4, 3]), r(&[3])], |tp, v| {
        let y = tp.linear(v[0], v[1], Some(v[2]))?;
        probe(tp, y, 5)
    });
    assert!(e < tol, "linear {e}");

    let e = check(&[r(&[2, 3, 4]), r(&[2, 4, 2]), r(&[2, 2, 4])], |tp, v| {
        let a = tp.matmul(v[0], v[1], false)?;
        let b = tp.matmul(v[0], v[2], true)?;
        let pa = probe(tp, a, 6)?;
        let pb = probe(tp, b, 7)?;
        tp.add(pa, pb)
    });
    assert!(e < tol, "matmul {e}");

    let e = check(&[r(&[3, 5]), r(&[5]), r(&[5])], |tp, v| {
        let y = tp.layer_norm(v[0], v[1], v[2], 1e-5)?;
        probe(tp, y, 8)
    });
    assert!(e < tol, "layer_norm {e}");

    let e = check(&[r(&[2, 3, 2, 2]), r(&[2]), r(&[2])], |tp, v| {
        let y = tp.instance_norm(v[0], v[1], v[2], 1e-5)?;
        probe(tp, y, 9)
    });
    assert!(e < tol, "instance_norm {e}");

    let e = check(&[r(&[3, 4, 2])], |tp, v| {
        let a = tp.softmax(v[0], 1)?;
        let b = tp.softmax(v[0], 2)?;
        let pa = probe(tp, a, 10)?;
        let pb = probe(tp, b, 11)?;
        tp.add(pa, pb)
    });
    assert!(e < tol, "softmax {e}");

    let e = check(&[r(&[4, 3])], |tp, v| {
        let g = tp.gelu(v[0]);
        let l = tp.leaky_relu(v[0], 0.01);
        let pg = probe(tp, g, 12)?;
        let pl = probe(tp, l, 13)?;
        tp.add(pg, pl)
    });
    assert!(e < tol, "gelu/leaky_relu {e}");

    let e = check(&[r(&[2, 4, 3, 4]), r(&[3, 2, 3, 3, 3]), r(&[3])], |tp, v| {
        let y = tp.conv3d(v[0], v[1], Some(v[2]), 2, 1)?;
        probe(tp, y, 14)
    });
    assert!(e < tol, "conv3d {e}");

    let e = check(&[r(&[2, 3, 3, 3]), r(&[3, 2, 1, 1, 1])], |tp, v| {
        let y = tp.conv3d(v[0], v[1], None, 1, 0)?;
        probe(tp, y, 15)
    });
    assert!(e < tol, "conv3d 1x1x1 {e}");

    let e = check(&[r(&[3, 2, 1, 2]), r(&[3, 2, 2, 2, 2]), r(&[2])], |tp, v| {
        let y = tp.conv3d_transpose(v[0], v[1], Some(v[2]), 2)?;
        probe(tp, y, 16)
    });
    assert!(e < tol, "conv3d_transpose {e}");

    let e = check(&[r(&[2, 2, 3, 3]), r(&[3, 4])], |tp, v| {
        let p = tp.global_avg_pool(v[0]);
        let n = tp.l2_normalize(v[1])?;
        let pp = probe(tp, p, 17)?;
        let pn = probe(tp, n, 18)?;
        tp.add(pp, pn)
    });
    assert!(e < tol, "pool/l2_normalize {e}");

    let labels: Arc<[usize]> = Arc::from(vec![0, 2, 1, 1, 0, 2]);
    let e = check(&[r(&[2, 3, 3])], |tp, v| tp.cross_entropy(v[0], 1, labels.clone()));
    assert!(e < tol, "cross_entropy {e}");

    let dl: Arc<[usize]> = Arc::from(vec![0, 1, 1, 2, 0, 2, 2, 1]);
    let e = check(&[r(&[3, 2, 2, 2])], |tp, v| {
        let p = tp.softmax(v[0], 0)?;
        tp.soft_dice(p, dl.clone())
    });
    assert!(e < tol, "soft_dice {e}");
}

#[test]
fn forward_is_bitwise_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x: Tensor<f32> = rand_tensor(&[3, 6, 5, 4], &mut rng).cast();
    let w: Tensor<f32> = rand_tensor(&[4, 3, 3, 3, 3], &mut rng).cast();
    let a = conv3d(&x, &w, None, 1, 1).unwrap();
    let b = conv3d(&x, &w, None, 1, 1).unwrap();
    assert_eq!(a.data(), b.data());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn softmax_sums_to_one_and_is_shift_invariant(
        v in proptest::collection::vec(-30.0f64..30.0, 1..9),
        c in -50.0f64..50.0,
    ) {
        let x = Tensor::new(vec![v.len()], v.clone()).unwrap();
        let y = softmax(&x, 0).unwrap();
        prop_assert!((y.sum() - 1.0).abs() < 1e-6);
        prop_assert!(y.data().iter().all(|&p| p > 0.0 && p <= 1.0));
        let shifted = softmax(&x.map(|a| a + c), 0).unwrap();
        prop_assert!(y.max_abs_diff(&shifted) < 1e-12);
    }

    #[test]
    fn random_conv_shapes_pass_grad_check(
        cin in 1usize..3, cout in 1usize..3, h in 1usize..5, w in 1usize..5, d in 1usize..5,
        stride in 1usize..3, seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&[cin, h + 2, w + 2, d + 2], &mut rng);
        let k = rand_tensor(&[cout, cin, 3, 3, 3], &mut rng);
        let e = check(&[x, k], |tp, v| {
            let y = tp.conv3d(v[0], v[1], None, stride, 1)?;
            probe(tp, y, seed)
        });
        prop_assert!(e < 1e-4);
    }
}
