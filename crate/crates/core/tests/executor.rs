mod common;

use common::*;

#[test]
fn fixtures_match_dense_oracle() {
    for (name, spec) in small_fixtures() {
        for (n, d) in [(4, 0.5), (7, 0.3), (9, 1.0)] {
            for seed in 0..3 {
                let inputs = random_inputs(&spec, n, d, seed);
                if let Err(e) = check_against_oracle(&spec, &inputs) {
                    panic!("{name} n={n} d={d} seed={seed}: {e}");
                }
            }
        }
    }
}

#[test]
fn fixture_outputs_are_populated() {
    for (name, spec) in small_fixtures() {
        let inputs = random_inputs(&spec, 8, 0.5, 1);
        let run = run(&spec, &inputs);
        for e in &spec.expressions {
            assert!(
                run.tensors[e.name()].nnz() > 0,
                "{name}: {} is empty",
                e.name()
            );
        }
    }
}
