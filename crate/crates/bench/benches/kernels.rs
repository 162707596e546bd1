use criterion::{criterion_group, criterion_main, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sgda_core::bayesopt::{GpHyper, GpSurrogate};
use sgda_core::metrics::dtw;
use sgda_core::policy::Mlp;
use sgda_core::simenv::{rollout, EnvCondition, ExpertParams, ScenarioGeometry, ScriptedExpert};
use std::hint::black_box;

fn bench_dtw(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut seq = |n: usize| -> Vec<[f64; 3]> { (0..n).map(|_| [rng.random(), rng.random(), rng.random()]).collect() };
    let (a, b) = (seq(150), seq(180));
    c.bench_function("dtw 150x180x3", |bench| bench.iter(|| dtw(black_box(&a), black_box(&b)).unwrap()));
}

fn bench_gp(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut gp = GpSurrogate::new(6, GpHyper::default());
    for _ in 0..100 {
        let x: Vec<f64> = (0..6).map(|_| rng.random()).collect();
        gp.add(&x, rng.random()).unwrap();
    }
    let x: Vec<f64> = (0..6).map(|_| rng.random()).collect();
    c.bench_function("gp posterior n=100 d=6", |bench| bench.iter(|| gp.posterior(black_box(&x))));
}

fn bench_rollout(c: &mut Criterion) {
    let geom = ScenarioGeometry::default();
    let expert = ScriptedExpert::new(ExpertParams::default(), &geom);
    let e = EnvCondition::sample_uniform(&geom.ranges, &mut ChaCha8Rng::seed_from_u64(3));
    c.bench_function("expert rollout", |bench| bench.iter(|| rollout(&expert, black_box(&e), &geom, 5).unwrap()));
}

fn bench_mlp(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let net = Mlp::init(&[10, 32, 32, 1], &mut rng).unwrap();
    let inputs: Vec<Vec<f64>> = (0..64).map(|_| (0..10).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let targets: Vec<f64> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut grad = vec![0.0; net.params().len()];
    c.bench_function("mlp L1 gradient batch 64", |bench| {
        bench.iter(|| net.l1_loss_and_grad(black_box(&inputs), black_box(&targets), &mut grad))
    });
}

criterion_group!(benches, bench_dtw, bench_gp, bench_rollout, bench_mlp);
criterion_main!(benches);
