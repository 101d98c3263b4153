use candle_core::{DType, Device, Tensor, Var};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};

use nowcast_core::data::{synth_advection, FrameSource, SyntheticConfig};
use nowcast_core::dyffusion::{rollout_with_seeds, DyffusionState};
use nowcast_core::losses::{Lcb, LcbConfig};
use nowcast_core::metrics::{crps_ensemble, SpreadSkill};
use nowcast_core::networks::{UNet, UNetConfig};

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let v: Vec<f32> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

fn conv_train_step(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv2d_fwd_bwd");
    group.sample_size(10);
    for &(batch, channels, size) in &[(4usize, 16usize, 32usize), (4, 32, 64)] {
        let x = Var::from_tensor(&random(&[batch, channels, size, size], 1)).unwrap();
        let w = Var::from_tensor(&random(&[channels, channels, 3, 3], 2)).unwrap();
        let label = format!("b{batch}_c{channels}_{size}");
        group.bench_function(BenchmarkId::new("im2col_gemm", &label), |b| {
            b.iter(|| {
                let y = nowcast_core::conv::conv2d(x.as_tensor(), w.as_tensor(), 1, 1).unwrap();
                y.sqr().unwrap().mean_all().unwrap().backward().unwrap()
            })
        });
        group.bench_function(BenchmarkId::new("candle_builtin", &label), |b| {
            b.iter(|| {
                let y = x.as_tensor().conv2d(w.as_tensor(), 1, 1, 1, 1).unwrap();
                y.sqr().unwrap().mean_all().unwrap().backward().unwrap()
            })
        });
    }
    group.finish();
}

fn unit(shape: &[usize], seed: u64) -> Tensor {
    random(shape, seed).affine(0.5, 0.5).unwrap()
}

fn lcb_loss(c: &mut Criterion) {
    let lcb = Lcb::new(LcbConfig::default(), Default::default(), Default::default(), Default::default()).unwrap();
    let mut group = c.benchmark_group("lcb");
    group.sample_size(20);
    for &size in &[32usize, 64] {
        let pred = Var::from_tensor(&unit(&[8, 1, size, size], 3)).unwrap();
        let target = unit(&[8, 1, size, size], 4);
        group.bench_function(BenchmarkId::new("fwd_bwd", size), |b| {
            b.iter(|| lcb.loss(pred.as_tensor(), &target).unwrap().backward().unwrap())
        });
    }
    group.finish();
}

fn ensemble_metrics(c: &mut Criterion) {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
    let members = Array3::from_shape_fn((10, 128, 128), |_| rng.random::<f32>());
    let obs = Array2::from_shape_fn((128, 128), |_| rng.random::<f32>());
    let mut group = c.benchmark_group("ensemble_metrics");
    group.bench_function("crps_x10_128", |b| {
        b.iter(|| crps_ensemble(members.view(), obs.view(), false).unwrap())
    });
    group.bench_function("spread_skill_x10_128", |b| {
        b.iter(|| SpreadSkill::compute(members.view(), obs.view()).unwrap())
    });
    group.finish();
}

fn rollout(c: &mut Criterion) {
    let seq = &synth_advection(&SyntheticConfig {
        n_sequences: 1,
        height: 32,
        width: 32,
        horizon: 8,
        history: 0,
        ..Default::default()
    })
    .unwrap()[0];
    let x0 = {
        let f = seq.lead(0).to_owned();
        Tensor::from_vec(f.into_raw_vec_and_offset().0, (1, 1, 32, 32), &Device::Cpu).unwrap()
    };
    let cfg = |rate| UNetConfig {
        base_channels: 16,
        depth: 3,
        time_embedding_dim: 32,
        dropout_rate: rate,
        ..Default::default()
    };
    let interp = UNet::new(cfg(0.2), 1, DType::F32).unwrap();
    let fc = UNet::new(cfg(0.0), 2, DType::F32).unwrap();
    let state = DyffusionState::new(&interp, &fc, 8).unwrap();
    let mut group = c.benchmark_group("dyffusion_rollout");
    group.sample_size(10);
    group.bench_function("x5_h8_32", |b| b.iter(|| rollout_with_seeds(&x0, &state, &[1, 2, 3, 4, 5]).unwrap()));
    group.finish();
}

criterion_group!(benches, conv_train_step, lcb_loss, ensemble_metrics, rollout);
criterion_main!(benches);
