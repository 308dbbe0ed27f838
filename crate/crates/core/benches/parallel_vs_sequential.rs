//! Compares the dispatched execution path (rayon when the `parallel` feature
//! is on) against the forced-sequential path for the data-parallel inner
//! loops: subject generation, Monte-Carlo future sampling, and latent-grid
//! decoding. On a single-core host the two are expected to tie.
//!
//! Run the other compile-time path with
//! `cargo bench -p futseg-core --no-default-features`.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};

use futseg_core::datapipe::{build_cases, zscore_normalize, CaseMode};
use futseg_core::evaluation::scan_latent_grid;
use futseg_core::exec;
use futseg_core::model::{stack_inputs, GrowthModel, NetworkConfig};
use futseg_core::synthgrowth::{generate_dataset, generate_subject, sample_futures, GrowthParams};

fn bench_params() -> GrowthParams {
    GrowthParams {
        n_subjects: 8,
        timepoints_per_subject: 4,
        grid_size: 64,
        ..GrowthParams::default()
    }
}

fn with_sequential<T>(f: impl FnOnce() -> T) -> T {
    let prev = exec::force_sequential(true);
    let out = f();
    exec::force_sequential(prev);
    out
}

fn bench_generation(c: &mut Criterion) {
    let params = bench_params();
    let mut group = c.benchmark_group("generate_dataset_8_subjects");
    group.sample_size(10);
    group.bench_function(format!("dispatched_{}", exec::MODE), |b| {
        b.iter(|| black_box(generate_dataset(&params).unwrap()))
    });
    group.bench_function("forced_sequential", |b| {
        b.iter(|| with_sequential(|| black_box(generate_dataset(&params).unwrap())))
    });
    group.finish();
}

fn bench_future_sampling(c: &mut Criterion) {
    let params = bench_params();
    let series = generate_subject(&params, 7).unwrap();
    let mut group = c.benchmark_group("sample_futures_64_draws");
    group.sample_size(10);
    group.bench_function(format!("dispatched_{}", exec::MODE), |b| {
        b.iter(|| black_box(sample_futures(&series, 1, &params, 64, 99).unwrap()))
    });
    group.bench_function("forced_sequential", |b| {
        b.iter(|| with_sequential(|| black_box(sample_futures(&series, 1, &params, 64, 99).unwrap())))
    });
    group.finish();
}

fn bench_grid_decode(c: &mut Criterion) {
    let params = bench_params();
    let series = generate_subject(&params, 3).unwrap();
    let mut cases = build_cases(&series, CaseMode::AbToC);
    let case = &mut cases[0];
    case.input_volumes = case
        .input_volumes
        .iter()
        .map(zscore_normalize)
        .collect::<Result<Vec<_>, _>>()
        .unwrap();
    let inputs = stack_inputs(&case.input_volumes);
    let model = GrowthModel::new(NetworkConfig {
        base_channels: 8,
        depth: 3,
        n_input_timepoints: 2,
        latent_dim: 3,
        seed: 11,
        ..NetworkConfig::default()
    })
    .unwrap();

    let mut group = c.benchmark_group("latent_grid_scan_343");
    group.sample_size(10);
    group.bench_function(format!("dispatched_{}", exec::MODE), |b| {
        b.iter(|| black_box(scan_latent_grid(&model, &inputs).unwrap()))
    });
    group.bench_function("forced_sequential", |b| {
        b.iter(|| with_sequential(|| black_box(scan_latent_grid(&model, &inputs).unwrap())))
    });
    group.finish();
}

criterion_group!(benches, bench_generation, bench_future_sampling, bench_grid_decode);
criterion_main!(benches);
