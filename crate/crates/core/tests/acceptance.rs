//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero when any criterion fails.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::time::{Duration, Instant};

use common::*;
use fibersim_core::cli::{cmd_run, RunConfig, Source};
use fibersim_core::compiler::{compile_cascade, fusion_schedule, Transform};
use fibersim_core::components::{EnergyTable, ModelReport};
use fibersim_core::fibertree::{Coord, Rank, Tensor};
use fibersim_core::pipeline::{run_batch, simulate};
use fibersim_core::spec::{parse_spec, ComponentClass, ProblemSpec};
use fibersim_core::tensor_io::{generate, GenSpec};
use rand_core::{RngCore, SeedableRng};
use rand_xoshiro::SplitMix64;

// Runtime limits, seconds.
const LIMIT_ORACLE: u64 = 60;
const LIMIT_MAPPINGS: u64 = 60;
const LIMIT_ROUND_TRIPS: u64 = 30;
const LIMIT_TREND: u64 = 120;

const DENSITIES: [f64; 3] = [0.05, 0.3, 1.0];
const ORACLE_SEEDS: u64 = 18;
const MAPPINGS: usize = 120;
const ROUND_TRIPS: usize = 1000;
const CONV_INSTANCES: u64 = 24;
const TREND_SIZE: usize = 256;
const TREND_DENSITY: f64 = 0.02;
const GRAPH_VERTICES: usize = 1000;
const GRAPH_DENSITY: f64 = 0.005;
const UNREACHED: f64 = (1u64 << 20) as f64;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

struct Rng(SplitMix64);

impl Rng {
    fn new(seed: u64) -> Self {
        Rng(SplitMix64::seed_from_u64(seed))
    }
    fn below(&mut self, n: usize) -> usize {
        (self.0.next_u64() % n as u64) as usize
    }
    fn pick<'a, T>(&mut self, xs: &'a [T]) -> &'a T {
        &xs[self.below(xs.len())]
    }
    fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            xs.swap(i, self.below(i + 1));
        }
    }
}

fn within(t: Instant, limit: u64) -> Result<(), String> {
    let e = t.elapsed();
    if e > Duration::from_secs(limit) {
        Err(format!("took {:.1} s, limit {limit} s", e.as_secs_f64()))
    } else {
        Ok(())
    }
}

fn first_error(results: Vec<Result<(), String>>) -> Result<usize, String> {
    let n = results.len();
    match results.into_iter().find_map(Result::err) {
        Some(e) => Err(e),
        None => Ok(n),
    }
}

/// 1. Every fixture on seeded random inputs agrees with the dense oracle.
fn oracle_equivalence() -> Outcome {
    let t = Instant::now();
    let fixtures: Vec<(&str, ProblemSpec)> = small_fixtures()
        .into_iter()
        .filter(|(n, _)| !n.starts_with("conv"))
        .collect();
    let mut cases = Vec::new();
    for (fi, _) in fixtures.iter().enumerate() {
        for s in 0..ORACLE_SEEDS {
            for &d in &DENSITIES {
                let n = 4 + (s as usize * 7 + fi) % 13;
                cases.push((fi, n, d, 1000 * fi as u64 + s));
            }
        }
    }
    let results = run_batch(&cases, |&(fi, n, d, seed)| {
        let (name, spec) = &fixtures[fi];
        check_against_oracle(spec, &random_inputs(spec, n, d, seed))
            .map_err(|e| format!("{name} n={n} density={d} seed={seed}: {e}"))
    });
    let n = first_error(results)?;
    within(t, LIMIT_ORACLE)?;
    Ok(format!("{n} runs over {} fixtures", fixtures.len()))
}

/// One random legal mapping of `Z[m, n] = A[k, m] * B[k, n]`.
fn random_mapping(rng: &mut Rng) -> String {
    let order = |rng: &mut Rng, a: &str, b: &str| {
        if rng.below(2) == 0 {
            format!("[{a}, {b}]")
        } else {
            format!("[{b}, {a}]")
        }
    };
    let mut parts = Vec::new();
    let mut groups: Vec<Vec<String>> = Vec::new();
    for (r, leaders) in [("K", &["A", "B"][..]), ("M", &["A"][..]), ("N", &["B"][..])] {
        match rng.below(4) {
            0 => groups.push(vec![r.to_string()]),
            1 => {
                parts.push(format!("      {r}: [uniform_shape({})]", 1 + rng.below(5)));
                groups.push(vec![format!("{r}1"), format!("{r}0")]);
            }
            2 => {
                let inner = 1 + rng.below(3);
                let outer = inner * (2 + rng.below(3));
                parts.push(format!(
                    "      {r}: [uniform_shape({outer}), uniform_shape({inner})]"
                ));
                groups.push(vec![format!("{r}2"), format!("{r}1"), format!("{r}0")]);
            }
            _ => {
                let l = rng.pick(leaders);
                parts.push(format!(
                    "      {r}: [uniform_occupancy({l}.{})]",
                    1 + rng.below(5)
                ));
                groups.push(vec![format!("{r}1"), format!("{r}0")]);
            }
        }
    }
    // Random interleaving that keeps every upper rank above its lower ranks.
    let mut slots: Vec<usize> = groups
        .iter()
        .enumerate()
        .flat_map(|(g, v)| vec![g; v.len()])
        .collect();
    rng.shuffle(&mut slots);
    let mut next = vec![0; groups.len()];
    let loops: Vec<String> = slots
        .into_iter()
        .map(|g| {
            next[g] += 1;
            groups[g][next[g] - 1].clone()
        })
        .collect();
    let partitioning = if parts.is_empty() {
        String::new()
    } else {
        format!("  partitioning:\n    Z:\n{}\n", parts.join("\n"))
    };
    format!(
        "einsum:
  declaration:
    A: [K, M]
    B: [K, N]
    Z: [M, N]
  expressions:
    - Z[m, n] = A[k, m] * B[k, n]
mapping:
  rank-order:
    A: {}
    B: {}
    Z: {}
{partitioning}  loop-order:
    Z: [{}]
",
        order(rng, "K", "M"),
        order(rng, "K", "N"),
        order(rng, "M", "N"),
        loops.join(", ")
    )
}

/// 2. Randomized legal mappings of matrix multiply all match the oracle.
fn mapping_invariance() -> Outcome {
    let t = Instant::now();
    let mut rng = Rng::new(0x5eed);
    // Occupancy splits whose leader ranks would be reordered across the
    // upper rank are rejected by the compiler; draw again for those.
    let mut cases: Vec<(String, u64)> = Vec::new();
    let mut rejected = 0;
    while cases.len() < MAPPINGS {
        let text = random_mapping(&mut rng);
        let spec = parse_spec(&text).map_err(|e| format!("{e}\n{text}"))?;
        match compile_cascade(&spec) {
            Ok(_) => cases.push((text, cases.len() as u64)),
            Err(e)
                if e.to_string()
                    .contains("partition boundaries are not unique") =>
            {
                rejected += 1
            }
            Err(e) => return Err(format!("{e}\n{text}")),
        }
    }
    if rejected > MAPPINGS {
        return Err(format!(
            "{rejected} of {} drawn mappings rejected",
            MAPPINGS + rejected
        ));
    }
    let results = run_batch(&cases, |(text, seed)| {
        let spec = parse_spec(text).map_err(|e| format!("{e}\n{text}"))?;
        let mut r = Rng::new(*seed);
        let (k, m, n) = (1 + r.below(16), 1 + r.below(16), 1 + r.below(16));
        let d = *r.pick(&DENSITIES);
        let mut inputs = BTreeMap::new();
        for (name, ranks, shape) in [("A", ["K", "M"], vec![k, m]), ("B", ["K", "N"], vec![k, n])] {
            let g = GenSpec::new(shape, d, seed * 2 + inputs.len() as u64);
            inputs.insert(name.to_string(), generate(&g, name, &ranks).unwrap());
        }
        check_against_oracle(&spec, &inputs).map_err(|e| format!("{e}\n{text}"))
    });
    let n = first_error(results)?;
    within(t, LIMIT_MAPPINGS)?;
    Ok(format!(
        "{n} mappings ({rejected} drawn mappings rejected as ambiguous)"
    ))
}

fn round_trip(seed: u64) -> Result<(), String> {
    let mut rng = Rng::new(seed);
    let names = ["I", "J", "K"];
    let depth = 1 + rng.below(3);
    let names = &names[..depth];
    let shape: Vec<usize> = (0..depth).map(|_| 1 + rng.below(16)).collect();
    let d = *rng.pick(&DENSITIES);
    let t =
        generate(&GenSpec::new(shape.clone(), d, seed), "T", names).map_err(|e| e.to_string())?;
    let f = generate(&GenSpec::new(shape, d, !seed), "F", names).map_err(|e| e.to_string())?;
    let want = t.to_dense_in(names, 0.0).map_err(|e| e.to_string())?;
    let want_f = f.to_dense_in(names, 0.0).map_err(|e| e.to_string())?;
    let check = |what: &str, x: &Tensor, w: &_| -> Result<(), String> {
        if !x.is_well_ordered() {
            return Err(format!("seed {seed}: {what} is not well ordered"));
        }
        match x.to_dense_in(names, 0.0) {
            Ok(got) if &got == w => Ok(()),
            Ok(_) => Err(format!("seed {seed}: {what} changed the content")),
            Err(e) => Err(format!("seed {seed}: {what}: {e}")),
        }
    };

    let mut order = names.to_vec();
    rng.shuffle(&mut order);
    let s = t.swizzle(&order).map_err(|e| e.to_string())?;
    check("swizzle", &s, &want)?;

    let r = *rng.pick(&order);
    let size = 1 + rng.below(8);
    let p = s
        .partition_uniform_shape(r, size, "U1", "U0")
        .map_err(|e| e.to_string())?;
    check("shape partition", &p, &want)?;

    let r = *rng.pick(names);
    let size = 1 + rng.below(6);
    let (l, fs) = Tensor::partition_uniform_occupancy(&t, &[&f], r, size, "O1", "O0")
        .map_err(|e| e.to_string())?;
    check("occupancy partition (leader)", &l, &want)?;
    check("occupancy partition (follower)", &fs[0], &want_f)?;

    if depth >= 2 {
        let fl = t
            .flatten(names[0], names[1], "IJ")
            .map_err(|e| e.to_string())?;
        check("flatten", &fl, &want)?;
        let fl = p
            .flatten(p.rank_names()[0], p.rank_names()[1], "X")
            .map_err(|e| e.to_string())?;
        check("flatten after partition", &fl, &want)?;
    }
    Ok(())
}

/// 3. Swizzle, partition and flatten preserve content.
fn round_trips() -> Outcome {
    let t = Instant::now();
    let seeds: Vec<u64> = (0..ROUND_TRIPS as u64).collect();
    let n = first_error(run_batch(&seeds, |&s| round_trip(s)))?;
    within(t, LIMIT_ROUND_TRIPS)?;
    Ok(format!("{n} cases"))
}

/// Fusion conditions evaluated directly on the spec: same topology, same
/// leading run of time ranks, no shared compute, intersection or merger.
fn naive_blocks(spec: &ProblemSpec) -> Vec<Vec<String>> {
    let prefix = |e: &str| -> Vec<String> {
        let space: BTreeSet<&String> = spec
            .mapping
            .spacetime
            .get(e)
            .map(|s| s.space.iter().collect())
            .unwrap_or_default();
        spec.mapping.loop_order.get(e).map_or(vec![], |lo| {
            lo.iter()
                .take_while(|r| !space.contains(r))
                .cloned()
                .collect()
        })
    };
    let units = |e: &str| -> BTreeSet<String> {
        let Some(b) = spec.binding.einsums.get(e) else {
            return BTreeSet::new();
        };
        let topo = &spec.architecture.topologies[&b.topology];
        let storage: BTreeSet<&str> = topo
            .levels
            .iter()
            .flat_map(|l| &l.components)
            .filter(|c| {
                matches!(
                    c.class,
                    ComponentClass::Dram { .. } | ComponentClass::Buffer { .. }
                )
            })
            .map(|c| c.name.as_str())
            .collect();
        b.components
            .keys()
            .filter(|c| !storage.contains(c.as_str()))
            .cloned()
            .collect()
    };
    let topo = |e: &str| spec.binding.einsums.get(e).map(|b| b.topology.clone());
    let ok = |a: &str, b: &str| {
        topo(a) == topo(b) && prefix(a) == prefix(b) && units(a).is_disjoint(&units(b))
    };
    let mut blocks: Vec<Vec<String>> = Vec::new();
    for e in &spec.expressions {
        let e = e.name().to_string();
        match blocks.last_mut() {
            Some(b) if b.iter().all(|x| ok(x, &e)) => b.push(e),
            _ => blocks.push(vec![e]),
        }
    }
    blocks
}

/// 4. Gamma fuses into one block, OuterSPACE into two, and the scheduler
///    agrees with the direct check on every fixture.
fn fusion() -> Outcome {
    let mut shown = Vec::new();
    for (name, spec) in small_fixtures() {
        let c = compile_cascade(&spec).map_err(|e| format!("{name}: {e}"))?;
        let again = fusion_schedule(&spec, &c.dag);
        let got: Vec<Vec<String>> = again
            .blocks
            .iter()
            .map(|b| b.iter().map(|&i| c.dag.nodes[i].clone()).collect())
            .collect();
        let want = naive_blocks(&spec);
        if got != want {
            return Err(format!("{name}: scheduler {got:?}, direct check {want:?}"));
        }
        let expect: Option<Vec<Vec<&str>>> = match name {
            "gamma" => Some(vec![vec!["T", "Z"]]),
            "outerspace" => Some(vec![vec!["T"], vec!["Z"]]),
            _ => None,
        };
        if let Some(e) = expect {
            if got != e {
                return Err(format!("{name}: blocks {got:?}, expected {e:?}"));
            }
            shown.push(format!("{name} {}", got.len()));
        }
    }
    Ok(shown.join(", "))
}

/// 5. OuterSPACE swizzles T twice while running and never its inputs.
fn swizzle_inference() -> Outcome {
    let spec = fixture("outerspace.yaml", &[]);
    let c = compile_cascade(&spec).map_err(|e| e.to_string())?;
    let mut found = Vec::new();
    for nest in &c.nests {
        for s in nest.online_swizzles() {
            if let Transform::Swizzle { from, to } = &s.transform {
                found.push((s.tensor.clone(), from.join(","), to.join(",")));
            }
        }
    }
    let want = vec![
        ("T".to_string(), "K,M,N".to_string(), "M,K,N".to_string()),
        ("T".to_string(), "M,K,N".to_string(), "M,N,K".to_string()),
    ];
    if found != want {
        return Err(format!("online swizzles {found:?}"));
    }
    Ok("T: [K,M,N] -> [M,K,N] -> [M,N,K]; A, B: none".into())
}

fn toy_report(spec: &ProblemSpec, a: Tensor) -> Result<ModelReport, String> {
    let inputs = BTreeMap::from([("A".to_string(), a), ("B".to_string(), toy_b())]);
    simulate(spec, &inputs, &EnergyTable::builtin())
        .map(|s| s.report)
        .map_err(|e| e.to_string())
}

/// 6. Hand-computed DRAM bytes for a 4x4 matmul, and a cache that removes
///    every repeated read.
//
// All ranks C, 32-bit coordinates, 32-bit upper payloads, 64-bit values:
//   A (one nonzero per row): 4*(32+32) + 4*(32+64) bits = 80 bytes
//   B (8 nonzeros): 4*(32+32) + 8*(32+64) bits = 128 bytes
//   Z (rows of B permuted): 128 bytes
//   dense A reads the N rank of every B row 4 times: 32 + 4*96 bytes
fn micro_golden() -> Outcome {
    let r = toy_report(&toy_matmul("[K, M, N]", false), toy_a_permutation())?;
    let got = (
        r.dram["A"].read_bytes,
        r.dram["B"].read_bytes,
        r.dram["Z"].write_bytes,
        r.dram_bytes,
    );
    if got != (80, 128, 128, 336) {
        return Err(format!(
            "A, B, Z, total = {got:?}, expected (80, 128, 128, 336)"
        ));
    }
    let plain = toy_report(&toy_matmul("[K, M, N]", false), toy_a_dense())?;
    let cached = toy_report(&toy_matmul("[K, M, N]", true), toy_a_dense())?;
    let (p, c) = (plain.dram["B"].read_bytes, cached.dram["B"].read_bytes);
    if p != 32 + 4 * 96 || c != 128 {
        return Err(format!(
            "B reads uncached {p}, cached {c}; expected 416 and 128"
        ));
    }
    Ok(format!(
        "streaming 80/128/128 bytes; B reads {p} -> {c} with cache (repeated 0)"
    ))
}

fn traffic(r: &ModelReport, t: &str) -> u64 {
    r.dram.get(t).map_or(0, |x| x.total())
}

/// 7. Tiled inner product and row-wise dataflows move data differently, and
///    fusing the partial products keeps them off DRAM.
fn dataflow_trend() -> Outcome {
    let t = Instant::now();
    let n = TREND_SIZE;
    let a = generate(
        &GenSpec::new(vec![n, n], TREND_DENSITY, 256),
        "A",
        &["K", "M"],
    )
    .unwrap();
    let b = generate(
        &GenSpec::new(vec![n, n], TREND_DENSITY, 257),
        "B",
        &["K", "N"],
    )
    .unwrap();
    let inputs = BTreeMap::from([("A".to_string(), a), ("B".to_string(), b)]);
    let names = ["extensor.yaml", "gamma.yaml", "outerspace.yaml"];
    let reports = run_batch(&names, |f| {
        simulate(&fixture(f, &[]), &inputs, &EnergyTable::builtin())
            .map(|s| s.report)
            .map_err(|e| format!("{f}: {e}"))
    });
    let mut it = reports.into_iter();
    let (ext, gamma, outer) = (
        it.next().unwrap()?,
        it.next().unwrap()?,
        it.next().unwrap()?,
    );
    let profile = |r: &ModelReport| ["A", "B", "Z"].map(|x| traffic(r, x));
    let (pe, pg) = (profile(&ext), profile(&gamma));
    if pe == pg {
        return Err(format!("identical A/B/Z traffic {pe:?}"));
    }
    let (tg, to) = (traffic(&gamma, "T"), traffic(&outer, "T"));
    if tg >= to {
        return Err(format!(
            "Gamma T traffic {tg} not below OuterSPACE T traffic {to}"
        ));
    }
    within(t, LIMIT_TREND)?;
    Ok(format!(
        "A/B/Z bytes ExTensor {pe:?} vs Gamma {pg:?}; T bytes Gamma {tg} < OuterSPACE {to}"
    ))
}

/// 8. Direct and Toeplitz convolution produce the same output.
fn toeplitz() -> Outcome {
    let direct = fixture("conv_direct.yaml", &[]);
    let toep = fixture("conv_toeplitz.yaml", &[]);
    let seeds: Vec<u64> = (0..CONV_INSTANCES).collect();
    let results = run_batch(&seeds, |&s| {
        let n = 1 + (s as usize % 4);
        let d = DENSITIES[s as usize % 3];
        let inputs = random_inputs(&direct, n, d, s);
        let (a, b) = (run(&direct, &inputs), run(&toep, &inputs));
        let (oa, ob) = (
            dense_of(&direct, &a.tensors["O"]),
            dense_of(&toep, &b.tensors["O"]),
        );
        if oa != ob {
            return Err(format!("seed {s}: direct {oa:?}, Toeplitz {ob:?}"));
        }
        check_against_oracle(&direct, &inputs).map_err(|e| format!("seed {s}: {e}"))
    });
    let n = first_error(results)?;
    Ok(format!("{n} instances"))
}

/// 9. Two identical runs write byte-identical report JSON.
fn determinism() -> Outcome {
    let mut shown = Vec::new();
    for spec in ["outerspace.yaml", "gamma.yaml", "graphicionado_9b.yaml"] {
        let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR"))
            .join("fixtures")
            .join(spec);
        let graph = spec.starts_with("graph");
        let gen = |shape: Vec<usize>, d: f64, seed: u64| Source::Gen(GenSpec::new(shape, d, seed));
        let tensors: BTreeMap<String, Source> = if graph {
            BTreeMap::from([
                ("G".into(), gen(vec![64, 64], 0.05, 1)),
                ("A0".into(), gen(vec![64], 0.05, 2)),
                ("P0".into(), gen(vec![64], 1.0, 3)),
            ])
        } else {
            BTreeMap::from([
                ("A".into(), gen(vec![32, 32], 0.1, 1)),
                ("B".into(), gen(vec![32, 32], 0.1, 2)),
            ])
        };
        let mut bytes = Vec::new();
        for _ in 0..2 {
            let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
            let cfg = RunConfig {
                spec: path.clone(),
                tensors: tensors.clone(),
                out: Some(dir.path().to_path_buf()),
                ..Default::default()
            };
            cmd_run(&cfg).map_err(|e| format!("{spec}: {e}"))?;
            bytes.push(std::fs::read(dir.path().join("report.json")).map_err(|e| e.to_string())?);
        }
        if bytes[0] != bytes[1] {
            return Err(format!("{spec}: report JSON differs between runs"));
        }
        shown.push(format!("{spec} {} bytes", bytes[0].len()));
    }
    Ok(shown.join(", "))
}

/// 10. With a one-vertex frontier, the sparse property update cascade moves
///     fewer DRAM bytes than the dense one.
fn graph_direction() -> Outcome {
    let n = GRAPH_VERTICES;
    let g = generate(
        &GenSpec::new(vec![n, n], GRAPH_DENSITY, 1000),
        "G",
        &["D", "S"],
    )
    .unwrap();
    let src = 0;
    let a0 = Tensor::from_points(
        "A0",
        vec![Rank::new("S", n)],
        vec![(vec![Coord::Int(src)], 1.0)],
    );
    let p0 = Tensor::from_points(
        "P0",
        vec![Rank::new("V", n)],
        (0..n)
            .map(|v| (vec![Coord::Int(v)], if v == src { 1.0 } else { UNREACHED }))
            .collect(),
    );
    let inputs = BTreeMap::from([
        ("G".to_string(), g),
        ("A0".to_string(), a0),
        ("P0".to_string(), p0),
    ]);
    let mut totals = Vec::new();
    for f in ["graphicionado_9a.yaml", "graphicionado_9b.yaml"] {
        let s = simulate(&fixture(f, &[]), &inputs, &EnergyTable::builtin())
            .map_err(|e| format!("{f}: {e}"))?;
        totals.push((s.report.dram_bytes, traffic(&s.report, "P0")));
    }
    let ((a, pa), (b, pb)) = (totals[0], totals[1]);
    if b >= a {
        return Err(format!("sparse cascade {b} DRAM bytes, dense {a}"));
    }
    Ok(format!("total DRAM bytes {b} < {a} (P0 {pb} vs {pa})"))
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("oracle equivalence", oracle_equivalence),
        ("mapping invariance", mapping_invariance),
        ("transformation round trips", round_trips),
        ("fusion blocks", fusion),
        ("swizzle inference", swizzle_inference),
        ("traffic micro-golden", micro_golden),
        ("dataflow traffic trend", dataflow_trend),
        ("Toeplitz equivalence", toeplitz),
        ("report determinism", determinism),
        ("graph frontier direction", graph_direction),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let r = std::panic::catch_unwind(f).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = t.elapsed().as_secs_f64();
        match r {
            Ok(detail) => println!("PASS {:>2} {name} ({secs:.2} s): {detail}", i + 1),
            Err(e) => {
                failed += 1;
                println!("FAIL {:>2} {name} ({secs:.2} s): {e}", i + 1);
            }
        }
    }
    println!(
        "{} of {} criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
