use std::collections::BTreeMap;

use brainenc_bench::{encoder, rng, uniform};
use brainenc_core::datamodel::Hemisphere;
use brainenc_core::encoder::ExtractorKind;
use brainenc_core::ndiff::{Mode, Tape};
use brainenc_core::objectives::{composite_loss, mnnpc_loss, pc_loss, HemisphereTarget, LossSpec};
use brainenc_core::trainer::{AdamW, AdamWConfig};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

fn matmul(c: &mut Criterion) {
    let mut g = c.benchmark_group("matmul");
    for n in [64, 256] {
        let mut r = rng(1);
        let (a, b) = (uniform(&mut r, &[n, n]), uniform(&mut r, &[n, n]));
        g.bench_with_input(BenchmarkId::from_parameter(n), &n, |bch, _| {
            bch.iter(|| {
                let mut t = Tape::<f32>::new();
                let (x, y) = (t.param(a.clone()), t.param(b.clone()));
                let z = t.matmul(x, y).unwrap();
                let s = t.sum_all(z);
                t.backward(s).unwrap();
                black_box(t.grad(x).is_some())
            })
        });
    }
    g.finish();
}

fn losses(c: &mut Criterion) {
    let mut r = rng(2);
    let (p, y) = (uniform(&mut r, &[8, 200]), uniform(&mut r, &[8, 200]));
    let nc = vec![0.5; 200];
    let mut g = c.benchmark_group("loss_fwd_bwd_8x200");
    g.bench_function("pc", |b| {
        b.iter(|| {
            let mut t = Tape::<f32>::new();
            let (pv, yv) = (t.param(p.clone()), t.constant(y.clone()));
            let l = pc_loss(&mut t, pv, yv).unwrap();
            t.backward(l).unwrap();
            black_box(t.value(l).data()[0])
        })
    });
    g.bench_function("mnnpc", |b| {
        b.iter(|| {
            let mut t = Tape::<f32>::new();
            let (pv, yv) = (t.param(p.clone()), t.constant(y.clone()));
            let l = mnnpc_loss(&mut t, pv, yv, Some(&nc)).unwrap();
            t.backward(l).unwrap();
            black_box(t.value(l).data()[0])
        })
    });
    g.finish();
}

fn train_step(c: &mut Criterion) {
    let mut g = c.benchmark_group("train_step_batch8");
    g.sample_size(20);
    for kind in [ExtractorKind::Mlp, ExtractorKind::Conv] {
        let mut r = rng(3);
        let images = uniform(&mut r, &[8, 3, 16, 16]);
        let (gl, gr) = (uniform(&mut r, &[8, 200]), uniform(&mut r, &[8, 200]));
        let subjects = [0, 1, 0, 1, 0, 1, 0, 1];
        let spec = LossSpec::default();
        let mut enc = encoder(kind, 4);
        let mut opt = AdamW::new(AdamWConfig::default());
        g.bench_function(format!("{kind:?}").to_lowercase(), |b| {
            b.iter(|| {
                let mut t = Tape::<f32>::new();
                let bound = enc.bind(&mut t);
                let x = t.constant(images.clone());
                let out = enc
                    .forward(&mut t, &bound, x, &subjects, Mode::Train)
                    .unwrap();
                let pl = enc.aggregate(&mut t, &out, Hemisphere::Lh).unwrap();
                let pr = enc.aggregate(&mut t, &out, Hemisphere::Rh).unwrap();
                let (l, rr) = (t.constant(gl.clone()), t.constant(gr.clone()));
                let loss = composite_loss(
                    &mut t,
                    pl,
                    HemisphereTarget::new(l),
                    pr,
                    HemisphereTarget::new(rr),
                    &spec,
                )
                .unwrap();
                t.backward(loss).unwrap();
                let grads: BTreeMap<_, _> = bound
                    .iter()
                    .filter_map(|(k, v)| t.grad(*v).map(|g| (k.clone(), g.clone())))
                    .collect();
                opt.step(&mut enc.params, &grads, 1e-4).unwrap();
                black_box(t.value(loss).data()[0])
            })
        });
    }
    g.finish();
}

criterion_group!(benches, matmul, losses, train_step);
criterion_main!(benches);
