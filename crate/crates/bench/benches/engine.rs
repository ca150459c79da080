use std::hint::black_box;

use countgrpo::policy::sample_rollout;
use countgrpo::{
    bucketed_report, compute_advantages, evaluate_checkpoint, fgrpr_reward, generate_suite, grpo_objective,
    FormatGrammar, GrpoConfig, Memberships, PolicyDims, PolicyParams, Rollout, SuiteSpec,
};
use criterion::{criterion_group, criterion_main, Criterion};

fn features() -> Vec<f64> {
    vec![3.1, 0.4, -0.2, 0.1, 0.0, 0.3, -0.5, 0.2]
}

fn group(params: &PolicyParams, reference: &PolicyParams, cfg: &GrpoConfig) -> Vec<Rollout> {
    (0..cfg.group_size as u64)
        .map(|k| sample_rollout(params, reference, &features(), FormatGrammar::default(), k).unwrap())
        .collect()
}

fn rollouts(c: &mut Criterion) {
    let params = PolicyParams::init_uniform(PolicyDims::default(), 0.3, 1);
    let reference = params.snapshot();
    let cfg = GrpoConfig::default();
    c.bench_function("sample group of 8", |b| {
        b.iter(|| group(black_box(&params), &reference, &cfg))
    });
}

fn objective(c: &mut Criterion) {
    let params = PolicyParams::init_uniform(PolicyDims::default(), 0.3, 1);
    let reference = params.snapshot();
    let cfg = GrpoConfig::default();
    let ros = group(&params, &reference, &cfg);
    let rewards: Vec<f64> = ros
        .iter()
        .map(|r| fgrpr_reward(&r.tokens, 42, Memberships::default()).unwrap().total)
        .collect();
    let adv = compute_advantages(&rewards, &cfg).unwrap();
    c.bench_function("grpo objective and gradient", |b| {
        b.iter(|| grpo_objective(black_box(&params), &features(), &ros, &adv, &cfg).unwrap())
    });
}

fn metrics(c: &mut Criterion) {
    let truths: Vec<f64> = (0..600).map(|i| (i % 200 + 1) as f64).collect();
    let preds: Vec<f64> = truths
        .iter()
        .enumerate()
        .map(|(i, t)| t + (i % 7) as f64 - 3.0)
        .collect();
    c.bench_function("bucketed report n=600", |b| {
        b.iter(|| bucketed_report(black_box(&truths), black_box(&preds)).unwrap())
    });
}

fn evaluation(c: &mut Criterion) {
    let data = generate_suite(&SuiteSpec::default(), 0).unwrap();
    let params = PolicyParams::init_uniform(PolicyDims::default(), 0.3, 1);
    let tags = SuiteSpec::default().test_only_tags();
    c.bench_function("evaluate default test split", |b| {
        b.iter(|| evaluate_checkpoint(black_box(&params), &data.test, FormatGrammar::default(), &tags).unwrap())
    });
}

criterion_group!(benches, rollouts, objective, metrics, evaluation);
criterion_main!(benches);
