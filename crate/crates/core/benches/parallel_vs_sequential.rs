//! Training-step and data-generation throughput of the data-parallel core.
//!
//! `cargo bench` measures the rayon build on its global pool and on a
//! single worker; `cargo bench --no-default-features` measures the plain-loop
//! fallback under the `default` id, so criterion reports the change against
//! the saved rayon baseline.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use onavos::image::RgbImage;
use onavos::loss::{LabelMap, LossConfig};
use onavos::maskops::BinaryMask;
use onavos::par;
use onavos::segnet::{ArchConfig, NetworkState};
use onavos::synth::{generate_sequence, Scenario, ScenarioKind};

/// `default` is the rayon global pool, or the plain loops without the
/// `parallel` feature; the parallel build adds a single-worker pool.
fn workers() -> Vec<(&'static str, usize)> {
    if par::is_parallel() {
        vec![("default", 0), ("rayon-1-worker", 1)]
    } else {
        vec![("default", 0)]
    }
}

fn loss_and_gradients(c: &mut Criterion) {
    let net = NetworkState::init(&ArchConfig::default(), 7).unwrap();
    let (h, w) = (96, 96);
    let image = RgbImage::new(h, w, (0..3 * h * w).map(|i| ((i * 7919) % 251) as f64 / 250.0).collect()).unwrap();
    let labels = LabelMap::from_mask(&BinaryMask::from_fn(h, w, |y, x| (20..60).contains(&y) && (30..70).contains(&x)));
    let cfg = LossConfig::default();
    let mut group = c.benchmark_group("loss_and_gradients_96x96");
    group.sample_size(20);
    for (name, jobs) in workers() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| par::with_jobs(jobs, || black_box(net.loss_and_gradients(&image, &labels, &cfg).unwrap())))
        });
    }
    group.finish();
}

fn generate_split(c: &mut Criterion) {
    let mut group = c.benchmark_group("generate_8_sequences");
    group.sample_size(10);
    for (name, jobs) in workers() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                par::with_jobs(jobs, || {
                    par::map_range(8, |i| {
                        let kind = ScenarioKind::ALL[i % 4];
                        generate_sequence(&Scenario { frames: 16, ..Scenario::new(kind, i as u64) }).unwrap()
                    })
                })
            })
        });
    }
    group.finish();
}

criterion_group!(benches, loss_and_gradients, generate_split);
criterion_main!(benches);
