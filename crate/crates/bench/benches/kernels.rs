use std::collections::HashMap;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use fecil_bench::{desk_backbone, desk_batch, filled};
use fecil_core::backbone::CompactNetwork;
use fecil_core::loss::one_hot;
use fecil_core::memory::{ExemplarMemory, MemoryBudget};
use fecil_core::mixaug::{mix_batch, AugMode};
use fecil_core::nn::Mode;
use fecil_core::optim::{OptimizerState, SgdConfig};
use fecil_core::Graph;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn conv(c: &mut Criterion) {
    let x = filled(&[32, 8, 16, 16], 1);
    let w = filled(&[8, 8, 3, 3], 2);
    c.bench_function("conv2d 32x8x16x16 fwd+bwd", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let xv = g.leaf(x.clone(), true).unwrap();
            let wv = g.leaf(w.clone(), true).unwrap();
            let y = g.conv2d(xv, wv, 1, 1).unwrap();
            let s = g.sum(y).unwrap();
            g.backward(s).unwrap();
        })
    });
}

fn gemm(c: &mut Criterion) {
    let x = filled(&[128, 256], 3);
    let w = filled(&[64, 256], 4);
    c.bench_function("dense 128x256 -> 64 fwd+bwd", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let xv = g.leaf(x.clone(), true).unwrap();
            let wv = g.leaf(w.clone(), true).unwrap();
            let y = g.dense(xv, wv, None).unwrap();
            let s = g.sum(y).unwrap();
            g.backward(s).unwrap();
        })
    });
}

fn train_step(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut net = CompactNetwork::new(desk_backbone(), (0..10).collect(), &mut rng).unwrap();
    let mut opt = OptimizerState::new(SgdConfig::default(), &net.params_mut());
    let (images, labels) = desk_batch(32);
    c.bench_function("compact train step, batch 32", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let x = g.constant(images.clone()).unwrap();
            let out = net.forward(&mut g, x, Mode::Train).unwrap();
            let loss = g.softmax_cross_entropy(out.logits, one_hot(&labels, 10).unwrap()).unwrap();
            g.backward(loss).unwrap();
            net.collect_grads(&mut g);
            opt.step(&mut net.params_mut(), 0.01).unwrap();
        })
    });
}

fn mixing(c: &mut Criterion) {
    let (images, labels) = desk_batch(32);
    let ds = fecil_core::data::synth_gaussians(4, 20, 16, 1, fecil_core::data::Split::Train).unwrap();
    let feats = filled(&[ds.len(), 8], 5);
    let mut memory = ExemplarMemory::new(MemoryBudget::Total(40), ds.image_shape());
    memory.update(&ds, &[0, 1, 2, 3], &feats).unwrap();
    let positions: HashMap<u32, usize> = (0..10).map(|c| (c, c as usize)).collect();
    let mut group = c.benchmark_group("mix_batch 32");
    for mode in [AugMode::Cutmix, AugMode::RCutmix, AugMode::RMixup] {
        group.bench_function(mode.as_str(), |b| {
            b.iter_batched(
                || ChaCha8Rng::seed_from_u64(9),
                |mut rng| mix_batch(mode, &images, &labels, 10, Some((&memory, &positions)), 0.2, &mut rng).unwrap(),
                BatchSize::SmallInput,
            )
        });
    }
    group.finish();
}

criterion_group!(benches, conv, gemm, train_step, mixing);
criterion_main!(benches);
