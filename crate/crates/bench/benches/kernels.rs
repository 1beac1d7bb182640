use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use swin_unetr::diffops::{conv3d, conv3d_transpose, Tape};
use swin_unetr::swin3d::{window_msa, AttnVars, Encoder, EncoderConfig, WindowOps, WindowPlan};
use swin_unetr::{Builder, ParamStore};
use swin_unetr_bench::random;

fn convolution(c: &mut Criterion) {
    let x = random(&[12, 32, 32, 32], 1);
    let w = random(&[12, 12, 3, 3, 3], 2);
    c.bench_function("conv3d 12->12 k3 32^3", |b| b.iter(|| conv3d(black_box(&x), &w, None, 1, 1).unwrap()));
    let up = random(&[24, 16, 16, 16], 3);
    let wt = random(&[24, 12, 2, 2, 2], 4);
    c.bench_function("conv3d_transpose 24->12 k2 16^3", |b| {
        b.iter(|| conv3d_transpose(black_box(&up), &wt, None, 2).unwrap())
    });
}

fn window_attention(c: &mut Criterion) {
    let f = 48;
    let plan = WindowPlan::new([16; 3], 4, [2; 3]).unwrap();
    let n_win = plan.n_windows();
    let ops = WindowOps::<f32>::new(plan, f, 3, false);
    let x = random(&[n_win, 64, f], 5);
    c.bench_function("shifted window attention 16^3 tokens F=48", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let mut p = |s| tape.constant(random(&[f, f], s));
            let vars = AttnVars { q: p(6), k: p(7), v: p(8), o: p(9), rel: None };
            let xv = tape.constant(x.clone());
            let out = window_msa(&mut tape, xv, &vars, &ops).unwrap();
            black_box(tape.value(out.out).len())
        })
    });
}

fn encoder_forward(c: &mut Criterion) {
    let mut store = ParamStore::<f32>::new();
    let enc = Encoder::new(
        EncoderConfig::with_width(12, 4),
        &mut Builder::new(&mut store, &mut ChaCha8Rng::seed_from_u64(10), "encoder"),
    )
    .unwrap();
    let x = random(&[1, 32, 32, 32], 11);
    c.bench_function("encoder features C=12 32^3", |b| b.iter(|| enc.features(&store, black_box(&x)).unwrap()));
}

criterion_group! {
    name = kernels;
    config = Criterion::default().sample_size(10);
    targets = convolution, window_attention, encoder_forward
}
criterion_main!(kernels);
