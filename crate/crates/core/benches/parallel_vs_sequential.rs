//! Hot paths on a one-thread rayon pool versus the default pool. Built with
//! `--no-default-features` the same workloads run on the sequential fallback.

use std::hint::black_box;

use bpo_core::boundary::sweep_interpolation;
use bpo_core::embed::Objective;
use bpo_core::model_sim::{default_family, ModelRegistry, DEFAULT_FAMILY_SEED};
use bpo_core::rng::KeyedRng;
use bpo_core::suffix_opt::{gcg_step, AttackConfig};
use bpo_core::verify::{run_benchmark, Method, PromptKind, VerifyConfig};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

type Workload<'a> = (&'static str, Box<dyn Fn() + Sync + 'a>);

fn workloads(family: &ModelRegistry) -> Vec<Workload<'_>> {
    let model = &family.models[0];
    let benign = family.tokenize("a photo of a corgi").unwrap();
    let prompt = benign.with_suffix(vec![0; 8]);
    let obj = Objective::Untargeted(model.encode(&benign).unwrap());
    let attack = AttackConfig::default();
    let a = model.encode(&benign).unwrap();
    let b = model.encode(&family.tokenize("a photo of a bagel").unwrap()).unwrap();
    let mut small = VerifyConfig { per_prompt_candidates: 2, ..VerifyConfig::default() };
    small.attack.max_iters = 40;
    let mut bench_family = family.clone();
    bench_family.benign_prompts.truncate(2);
    vec![
        (
            "gcg_step",
            Box::new(move || {
                let step = gcg_step(&model.encoder, &prompt, &obj, &attack, &mut KeyedRng::from_seed(1)).unwrap();
                black_box(step);
            }),
        ),
        (
            "sweep_21x200",
            Box::new(move || {
                black_box(sweep_interpolation(family, model, &a, &b, 0, 0.05, 200, 3).unwrap());
            }),
        ),
        (
            "benchmark_bpo_small",
            Box::new(move || {
                black_box(run_benchmark(&bench_family, Method::Bpo, PromptKind::PV, &small).unwrap());
            }),
        ),
    ]
}

#[cfg(feature = "parallel")]
fn bench(c: &mut Criterion) {
    let family = default_family(DEFAULT_FAMILY_SEED).unwrap();
    let single = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let threads = rayon::current_num_threads();
    let mut group = c.benchmark_group("parallel_vs_sequential");
    group.sample_size(10);
    for (name, work) in workloads(&family) {
        group.bench_function(BenchmarkId::new(name, "pool-1"), |b| b.iter(|| single.install(&*work)));
        group.bench_function(BenchmarkId::new(name, format!("pool-default-{threads}")), |b| b.iter(&work));
    }
    group.finish();
}

#[cfg(not(feature = "parallel"))]
fn bench(c: &mut Criterion) {
    let family = default_family(DEFAULT_FAMILY_SEED).unwrap();
    let mut group = c.benchmark_group("parallel_vs_sequential");
    group.sample_size(10);
    for (name, work) in workloads(&family) {
        group.bench_function(BenchmarkId::new(name, "sequential"), |b| b.iter(&work));
    }
    group.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
