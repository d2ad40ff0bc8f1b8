use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use icl_pac::diagnostics::kl_sequences;
use icl_pac::icl::{build_prompt, sample_task_example};
use icl_pac::seed::rng_from_seed;
use icl_pac::{fit_empirical, log_sum_exp, Alphabet, EmConfig, EmFamily, MarkovConcept, MixtureModel};
use rand::Rng;

fn iid2() -> MixtureModel {
    let abd = Alphabet::new(3, 2).unwrap();
    let phi = |r: [f64; 3]| MarkovConcept::iid(abd, r.to_vec()).unwrap();
    MixtureModel::uniform_prior(vec![phi([0.6, 0.2, 0.2]), phi([0.2, 0.6, 0.2])]).unwrap()
}

fn markov_pair() -> (MarkovConcept, MarkovConcept) {
    let abd = Alphabet::new(3, 2).unwrap();
    let p = MarkovConcept::new(
        abd,
        vec![0.5, 0.3, 0.2],
        vec![vec![0.7, 0.1, 0.2], vec![0.2, 0.6, 0.2], vec![0.3, 0.3, 0.4]],
        0.5,
    )
    .unwrap();
    let q = MarkovConcept::new(
        abd,
        vec![0.2, 0.5, 0.3],
        vec![vec![0.1, 0.8, 0.1], vec![0.4, 0.4, 0.2], vec![0.25, 0.25, 0.5]],
        0.0,
    )
    .unwrap();
    (p, q)
}

fn bench_log_sum_exp(c: &mut Criterion) {
    let mut group = c.benchmark_group("log_sum_exp");
    for n in [2usize, 64, 4096] {
        let mut rng = rng_from_seed(1);
        let xs: Vec<f64> = (0..n).map(|_| rng.gen_range(-50.0..0.0)).collect();
        group.bench_with_input(BenchmarkId::from_parameter(n), &xs, |b, xs| {
            b.iter(|| log_sum_exp(black_box(xs)))
        });
    }
    group.finish();
}

fn bench_posterior(c: &mut Criterion) {
    let m = iid2();
    let mut group = c.benchmark_group("posterior_over_prompt");
    for k in [50usize, 495] {
        let mut rng = rng_from_seed(2);
        let examples = (0..k)
            .map(|_| sample_task_example(m.concept(0), 40, &mut rng).unwrap())
            .collect();
        let prompt = build_prompt(m.alphabet(), examples, 0.0, &mut rng).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(k), &prompt.realized, |b, p| {
            b.iter(|| m.posterior_log(black_box(p)))
        });
    }
    group.finish();
}

fn bench_kl(c: &mut Criterion) {
    let (p, q) = markov_pair();
    let mut group = c.benchmark_group("kl_sequences");
    for t in [4usize, 40, 400] {
        group.bench_with_input(BenchmarkId::from_parameter(t), &t, |b, &t| {
            b.iter(|| kl_sequences(black_box(&p), black_box(&q), t).unwrap())
        });
    }
    group.finish();
}

fn bench_em(c: &mut Criterion) {
    let m = iid2();
    let mut rng = rng_from_seed(3);
    let docs: Vec<_> = (0..1000).map(|_| m.sample_pretraining_doc(40, &mut rng).0).collect();
    let config = EmConfig {
        family: EmFamily::Iid,
        ..EmConfig::default()
    };
    let mut group = c.benchmark_group("em");
    group.sample_size(10);
    group.bench_function("iid2_1000_docs", |b| {
        b.iter(|| fit_empirical(black_box(&docs), *m.alphabet(), &config, &mut rng_from_seed(4)).unwrap())
    });
    group.finish();
}

criterion_group!(benches, bench_log_sum_exp, bench_posterior, bench_kl, bench_em);
criterion_main!(benches);
