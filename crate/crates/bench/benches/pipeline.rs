use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use qifmeta::combine::{integrate, IntegrateOptions};
use qifmeta::model::{fit_source, BasisFamily, SolverControl};
use qifmeta::pipeline::fit_cohorts;
use qifmeta::runtime::wire::{decode, encode};
use qifmeta::runtime::Payload;
use qifmeta::simgen::{generate, SimDesign};

fn design(n: usize, working: BasisFamily) -> SimDesign {
    let mut d = SimDesign::from_toml(
        r#"
        cohort_sizes = [500, 500]
        block_sizes = [8, 10, 14, 18]
        link = "logit"
        correlation = "ar1"
        working = "ar1"
        theta = [[-4.44, 1.11, -2.22]]
        seed = 1
        "#,
    )
    .unwrap();
    d.cohort_sizes = vec![n, n];
    d.working = working;
    d
}

fn source_fit(c: &mut Criterion) {
    let mut group = c.benchmark_group("fit_source");
    for working in [BasisFamily::Independence, BasisFamily::Ar1, BasisFamily::Exchangeable] {
        for n in [500, 5000] {
            let data = generate(&design(n, working), 0).unwrap().remove(0).blocks.remove(3).1;
            group.bench_with_input(BenchmarkId::new(format!("{working:?}"), n), &data, |b, data| {
                b.iter(|| fit_source(data, None, &SolverControl::default()).unwrap())
            });
        }
    }
    group.finish();
}

fn combination(c: &mut Criterion) {
    let d = design(500, BasisFamily::Ar1);
    let cohorts = generate(&d, 0).unwrap();
    let summaries = fit_cohorts(&cohorts, &SolverControl::default()).unwrap();
    let by_block = qifmeta::Partition::by_block(4, 2);
    let homogeneous = d.partition().unwrap();
    c.bench_function("integrate/homogeneous", |b| {
        b.iter(|| integrate(&summaries, &homogeneous, &IntegrateOptions::default()).unwrap())
    });
    c.bench_function("integrate/by-block", |b| {
        b.iter(|| integrate(&summaries, &by_block, &IntegrateOptions::default()).unwrap())
    });
    let payload = Payload::Summary(summaries[0].clone());
    let bytes = encode(&payload);
    c.bench_function("wire/encode-summary", |b| b.iter(|| encode(&payload)));
    c.bench_function("wire/decode-summary", |b| b.iter(|| decode(&bytes).unwrap()));
}

fn end_to_end(c: &mut Criterion) {
    let d = design(500, BasisFamily::Ar1);
    let part = d.partition().unwrap();
    let mut group = c.benchmark_group("replication");
    group.sample_size(10);
    group.bench_function("generate+fit+integrate", |b| {
        b.iter(|| {
            let cohorts = generate(&d, 0).unwrap();
            let summaries = fit_cohorts(&cohorts, &SolverControl::default()).unwrap();
            integrate(&summaries, &part, &IntegrateOptions::default()).unwrap()
        })
    });
    group.finish();
}

criterion_group!(benches, source_fit, combination, end_to_end);
criterion_main!(benches);
