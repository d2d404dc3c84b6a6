use std::collections::BTreeMap;
use std::hint::black_box;
use std::path::Path;

use criterion::{criterion_group, criterion_main, Criterion};
use fibersim_core::components::EnergyTable;
use fibersim_core::pipeline::{run_batch, run_batch_sequential, simulate};
use fibersim_core::spec::parse_spec;
use fibersim_core::tensor_io::{generate, GenSpec};

const RUNS: u64 = 16;
const SIZE: usize = 64;
const DENSITY: f64 = 0.05;

fn batch(c: &mut Criterion) {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/gamma.yaml");
    let spec = parse_spec(&std::fs::read_to_string(path).unwrap()).unwrap();
    let table = EnergyTable::builtin();
    let inputs: Vec<BTreeMap<String, _>> = (0..RUNS)
        .map(|s| {
            let a = generate(
                &GenSpec::new(vec![SIZE, SIZE], DENSITY, 2 * s),
                "A",
                &["K", "M"],
            )
            .unwrap();
            let b = generate(
                &GenSpec::new(vec![SIZE, SIZE], DENSITY, 2 * s + 1),
                "B",
                &["K", "N"],
            )
            .unwrap();
            BTreeMap::from([("A".to_string(), a), ("B".to_string(), b)])
        })
        .collect();
    let one = |i: &BTreeMap<String, _>| simulate(&spec, i, &table).unwrap().report.cycles;

    let mut g = c.benchmark_group("batch");
    g.sample_size(10);
    g.bench_function("parallel", |b| {
        b.iter(|| black_box(run_batch(&inputs, one)))
    });
    g.bench_function("sequential", |b| {
        b.iter(|| black_box(run_batch_sequential(&inputs, one)))
    });
    g.finish();
}

criterion_group!(benches, batch);
criterion_main!(benches);
