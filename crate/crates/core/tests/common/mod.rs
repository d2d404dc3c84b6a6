#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::PathBuf;

use fibersim_core::compiler::compile_cascade;
use fibersim_core::executor::{execute_cascade, CascadeRun};
use fibersim_core::fibertree::{DenseArray, Tensor};
use fibersim_core::spec::{parse_spec, ProblemSpec};
use fibersim_core::tensor_io::{dense_einsum_oracle, generate, GenSpec};

pub fn fixture_text(name: &str) -> String {
    let p = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("fixtures")
        .join(name);
    std::fs::read_to_string(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

/// Loads a fixture after applying literal text substitutions (used to
/// shrink partition sizes so that small tensors still get several tiles).
pub fn fixture(name: &str, subs: &[(&str, &str)]) -> ProblemSpec {
    let mut text = fixture_text(name);
    for (a, b) in subs {
        assert!(text.contains(a), "{name} has no `{a}`");
        text = text.replace(a, b);
    }
    parse_spec(&text).unwrap_or_else(|e| panic!("{name}: {e}"))
}

/// Fixtures with substitutions that keep every tile count above one for
/// extents up to 16.
pub fn small_fixtures() -> Vec<(&'static str, ProblemSpec)> {
    vec![
        ("outerspace", fixture("outerspace.yaml", &[])),
        (
            "gamma",
            fixture("gamma.yaml", &[("A.32", "A.3"), ("A.64", "A.2")]),
        ),
        (
            "extensor",
            fixture(
                "extensor.yaml",
                &[
                    ("K1: 64", "K1: 8"),
                    ("K0: 16", "K0: 4"),
                    ("M1: 64", "M1: 8"),
                    ("M0: 16", "M0: 2"),
                    ("N1: 64", "N1: 4"),
                    ("N0: 16", "N0: 2"),
                ],
            ),
        ),
        (
            "sigma",
            fixture(
                "sigma.yaml",
                &[
                    ("uniform_shape(128)", "uniform_shape(4)"),
                    ("T.16384", "T.5"),
                ],
            ),
        ),
        ("graphicionado_9a", fixture("graphicionado_9a.yaml", &[])),
        ("graphicionado_9b", fixture("graphicionado_9b.yaml", &[])),
        ("conv_direct", fixture("conv_direct.yaml", &[])),
        ("conv_toeplitz", fixture("conv_toeplitz.yaml", &[])),
    ]
}

/// Extent of a declared rank for generated inputs: all graph ranks share
/// one extent, convolution inputs cover every output position.
pub fn rank_extent(rank: &str, n: usize) -> usize {
    match rank {
        "W" => 8 + n.min(4) - 1,
        _ => n,
    }
}

pub fn random_inputs(
    spec: &ProblemSpec,
    n: usize,
    density: f64,
    seed: u64,
) -> BTreeMap<String, Tensor> {
    let conv = spec
        .declaration
        .values()
        .any(|r| r.iter().any(|x| x == "W"));
    let mut out = BTreeMap::new();
    for (i, t) in spec.external_inputs().iter().enumerate() {
        let ranks: Vec<&str> = spec.declaration[t].iter().map(String::as_str).collect();
        let shape: Vec<usize> = ranks
            .iter()
            .map(|r| {
                if conv && *r == "S" {
                    n.min(4)
                } else {
                    rank_extent(r, n)
                }
            })
            .collect();
        let d = if t == "P0" { 1.0 } else { density };
        let g = GenSpec::new(shape, d, seed.wrapping_mul(31).wrapping_add(i as u64));
        out.insert(t.clone(), generate(&g, t, &ranks).unwrap());
    }
    out
}

pub fn dense_of(spec: &ProblemSpec, t: &Tensor) -> DenseArray {
    let order: Vec<&str> = spec.declaration[&t.name]
        .iter()
        .map(String::as_str)
        .collect();
    t.to_dense_in(&order, spec.operators.zero()).unwrap()
}

pub fn run(spec: &ProblemSpec, inputs: &BTreeMap<String, Tensor>) -> CascadeRun {
    let c = compile_cascade(spec).unwrap();
    execute_cascade(spec, &c, inputs).unwrap()
}

/// Compares every tensor the cascade writes against the dense oracle.
/// Returns the first mismatching tensor name.
pub fn check_against_oracle(
    spec: &ProblemSpec,
    inputs: &BTreeMap<String, Tensor>,
) -> Result<(), String> {
    let dense: BTreeMap<String, DenseArray> = inputs
        .iter()
        .map(|(k, t)| (k.clone(), dense_of(spec, t)))
        .collect();
    let want = dense_einsum_oracle(spec, &dense).map_err(|e| e.to_string())?;
    let got = run(spec, inputs);
    for e in &spec.expressions {
        let name = e.name();
        let g = dense_of(spec, &got.tensors[name]);
        if g != want[name] {
            return Err(format!("{name}: got {:?}\nwant {:?}", g, want[name]));
        }
    }
    Ok(())
}

/// 4x4 matmul on one DRAM and an optional 4-byte-line cache for B. All
/// ranks are compressed with 32-bit coordinates, 32-bit pointers and 64-bit
/// values.
pub fn toy_matmul(loop_order: &str, cache_b: bool) -> ProblemSpec {
    let cache = if cache_b {
        "      Buf:\n        - {tensor: B}\n"
    } else {
        ""
    };
    let text = format!(
        "einsum:
  declaration:
    A: [K, M]
    B: [K, N]
    Z: [M, N]
  expressions:
    - Z[m, n] = A[k, m] * B[k, n]
mapping:
  loop-order:
    Z: {loop_order}
format:
  A:
    CSF:
      K: {{format: C, cbits: 32, pbits: 32}}
      M: {{format: C, cbits: 32, pbits: 64}}
  B:
    CSF:
      K: {{format: C, cbits: 32, pbits: 32}}
      N: {{format: C, cbits: 32, pbits: 64}}
  Z:
    CSF:
      M: {{format: C, cbits: 32, pbits: 32}}
      N: {{format: C, cbits: 32, pbits: 64}}
architecture:
  clock: 1000000000
  topologies:
    Toy:
      - name: System
        local:
          - {{name: MainMemory, class: DRAM, bandwidth: 64}}
          - {{name: Buf, class: Buffer, type: cache, width: 4, depth: 1024, bandwidth: 64}}
binding:
  Z:
    topology: Toy
    components:
      MainMemory:
        - {{tensor: A}}
        - {{tensor: B}}
        - {{tensor: Z}}
{cache}"
    );
    parse_spec(&text).unwrap_or_else(|e| panic!("toy spec: {e}"))
}

pub fn matrix(name: &str, ranks: [&str; 2], rows: &[[i32; 4]; 4]) -> Tensor {
    let rows: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| r.iter().map(|&v| v as f64).collect())
        .collect();
    let d = DenseArray::from_rows(&rows).unwrap();
    Tensor::from_dense(name, &d, &ranks, 0.0).unwrap()
}

/// A with one nonzero per row k (each B row is read exactly once).
pub fn toy_a_permutation() -> Tensor {
    matrix(
        "A",
        ["K", "M"],
        &[[0, 0, 1, 0], [2, 0, 0, 0], [0, 0, 0, 3], [0, 4, 0, 0]],
    )
}

pub fn toy_a_dense() -> Tensor {
    matrix(
        "A",
        ["K", "M"],
        &[[1, 2, 3, 4], [5, 6, 7, 8], [1, 1, 1, 1], [2, 2, 2, 2]],
    )
}

/// Rows with 2, 1, 2 and 3 nonzeros.
pub fn toy_b() -> Tensor {
    matrix(
        "B",
        ["K", "N"],
        &[[1, 1, 0, 0], [0, 0, 5, 0], [7, 0, 0, 2], [0, 3, 3, 3]],
    )
}
