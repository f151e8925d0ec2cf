use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use kanrecon_core::diffusion::{make_schedule, sample_reconstruct, ClipSchedule, SamplerConfig, TcKanRecon};
use kanrecon_core::kspace::{fft2, make_mask, undersample, ImageGrid};
use kanrecon_core::mfukan::{ukan_forward, UKanConfig, UKanModel};
use kanrecon_core::phantom::{generate_phantom, PhantomSpec};
use kanrecon_core::rng::SplitMix64;
use kanrecon_core::tensor::{Mode, ParamStore, Tape, Tensor};

fn phantom(n: usize) -> ImageGrid {
    generate_phantom(&PhantomSpec::new(n, 1)).unwrap()
}

fn fft(c: &mut Criterion) {
    for n in [32, 128] {
        let img = phantom(n);
        c.bench_function(&format!("fft2 {n}x{n}"), |b| b.iter(|| fft2(black_box(&img)).unwrap()));
    }
}

fn conv(c: &mut Criterion) {
    let mut rng = SplitMix64::new(1);
    let x = Tensor::randn(vec![16, 32, 32], 1.0, &mut rng);
    let w = Tensor::randn(vec![32, 16, 3, 3], 0.1, &mut rng);
    c.bench_function("conv2d 16->32 at 32x32", |b| {
        b.iter(|| {
            let mut t = Tape::new();
            let (xv, wv) = (t.constant(x.clone()), t.constant(w.clone()));
            black_box(t.conv2d(xv, wv, None).unwrap());
        })
    });
}

fn ukan(c: &mut Criterion) {
    let cfg = UKanConfig::default();
    let mut store = ParamStore::new();
    let model = UKanModel::new(&mut store, "ukan", cfg, &mut SplitMix64::new(2)).unwrap();
    let x = Tensor::randn(vec![1, 32, 32], 1.0, &mut SplitMix64::new(3));
    c.bench_function("ukan forward 32x32", |b| {
        b.iter(|| ukan_forward(&model, &store, Mode::Eval, black_box(&x), 10, &[]).unwrap())
    });
}

fn sampler(c: &mut Criterion) {
    let model = TcKanRecon::new(UKanConfig { timesteps: 10, ..UKanConfig::default() }, 4).unwrap();
    let img = phantom(32);
    let mask = make_mask(32, 4, 0.08, 5).unwrap();
    let obs = undersample(&fft2(&img).unwrap(), &mask).unwrap();
    let sched = make_schedule(10, 1e-4, 0.02).unwrap();
    let sc = SamplerConfig {
        clip: ClipSchedule::dynamic(10),
        dc_every: 1,
        seed: 6,
    };
    let mut group = c.benchmark_group("sampler");
    group.sample_size(10);
    group.bench_function("10 steps 32x32", |b| {
        b.iter(|| sample_reconstruct(&model, &obs, &mask, &sched, &sc, None).unwrap())
    });
    group.finish();
}

criterion_group!(benches, fft, conv, ukan, sampler);
criterion_main!(benches);
