use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../core/fixtures")
        .join(name)
}

fn fibersim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fibersim"))
        .args(args)
        .env_remove("FIBERSIM_SEED")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn run_into(dir: &Path, spec: &str, tensors: &[&str], extra: &[&str]) -> Output {
    let spec = fixture(spec);
    let mut args = vec![
        "run",
        spec.to_str().unwrap(),
        "--out",
        dir.to_str().unwrap(),
    ];
    for t in tensors {
        args.extend(["--tensor", t]);
    }
    args.extend(extra);
    fibersim(&args)
}

fn report(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("report.json")).unwrap()).unwrap()
}

const MATMUL: [&str; 2] = [
    "A=gen:shape=8x8,density=0.3,seed=1",
    "B=gen:shape=8x8,density=0.3,seed=2",
];

#[test]
fn validate_exit_codes() {
    let ok = fibersim(&["validate", fixture("outerspace.yaml").to_str().unwrap()]);
    assert_eq!(code(&ok), 0, "{}", stderr(&ok));

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.yaml");
    let text = std::fs::read_to_string(fixture("outerspace.yaml")).unwrap();
    std::fs::write(
        &bad,
        text.replace("Z: [M2, M1, M0, N, K]", "Z: [M2, M1, M0, N]"),
    )
    .unwrap();
    let o = fibersim(&["validate", bad.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("missing rank K"), "{}", stderr(&o));

    assert_eq!(code(&fibersim(&["validate", "/nonexistent/spec.yaml"])), 2);
    assert_eq!(code(&fibersim(&["frobnicate"])), 2);
}

#[test]
fn gamma_runs_as_one_block() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_into(dir.path(), "gamma.yaml", &MATMUL, &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let r = report(dir.path());
    assert_eq!(r["blocks"].as_array().unwrap().len(), 1);
    assert_eq!(r["blocks"][0]["einsums"], serde_json::json!(["T", "Z"]));
    assert!(dir.path().join("report.txt").exists());
}

#[test]
fn outerspace_reports_two_blocks_and_every_tensor() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_into(
        dir.path(),
        "outerspace.yaml",
        &MATMUL,
        &["--trace", "--dump-ir"],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let r = report(dir.path());
    assert_eq!(r["blocks"].as_array().unwrap().len(), 2);
    let tensors: Vec<&String> = r["dram"].as_object().unwrap().keys().collect();
    assert_eq!(tensors, ["A", "B", "T", "Z"]);

    let csv = std::fs::read_to_string(dir.path().join("trace.csv")).unwrap();
    assert!(csv.starts_with("einsum,tensor,config,rank,kind,access,space,time\n"));
    assert!(csv.lines().any(|l| l.starts_with("Z,T,")));

    let ir = std::fs::read_to_string(dir.path().join("ir.txt")).unwrap();
    assert_eq!(ir, include_str!("golden/outerspace.ir"));
}

#[test]
fn reports_are_byte_identical_across_runs() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [&a, &b] {
        assert_eq!(
            code(&run_into(d.path(), "outerspace.yaml", &MATMUL, &[])),
            0
        );
    }
    let ja = std::fs::read(a.path().join("report.json")).unwrap();
    assert_eq!(ja, std::fs::read(b.path().join("report.json")).unwrap());

    let pa = a.path().join("report.json");
    let o = fibersim(&["diff", pa.to_str().unwrap(), pa.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    let table = String::from_utf8(o.stdout).unwrap();
    assert!(
        table
            .lines()
            .skip(1)
            .all(|l| l.split_whitespace().last() == Some("0")),
        "{table}"
    );
}

#[test]
fn seed_comes_from_the_environment() {
    let spec = fixture("outerspace.yaml");
    let run = |seed: &str| {
        let dir = tempfile::tempdir().unwrap();
        let o = Command::new(env!("CARGO_BIN_EXE_fibersim"))
            .args([
                "run",
                spec.to_str().unwrap(),
                "--out",
                dir.path().to_str().unwrap(),
            ])
            .args([
                "--tensor",
                "A=gen:shape=8x8,density=0.3",
                "--tensor",
                "B=gen:shape=8x8,density=0.3",
            ])
            .env("FIBERSIM_SEED", seed)
            .output()
            .unwrap();
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        std::fs::read_to_string(dir.path().join("report.json")).unwrap()
    };
    assert_eq!(run("5"), run("5"));
    assert_ne!(run("5"), run("6"));
}

#[test]
fn graph_cascade_with_sparse_properties_moves_less_property_data() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let inputs = [
        "G=gen:shape=64x64,density=0.05,seed=1",
        "A0=gen:shape=64,density=0.016,seed=2",
        "P0=gen:shape=64,density=1,seed=3",
    ];
    assert_eq!(
        code(&run_into(a.path(), "graphicionado_9a.yaml", &inputs, &[])),
        0
    );
    assert_eq!(
        code(&run_into(b.path(), "graphicionado_9b.yaml", &inputs, &[])),
        0
    );
    let (pa, pb) = (a.path().join("report.json"), b.path().join("report.json"));
    let o = fibersim(&["diff", pa.to_str().unwrap(), pb.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    let table = String::from_utf8(o.stdout).unwrap();
    let delta = |key: &str| -> i64 {
        let line = table
            .lines()
            .find(|l| l.split_whitespace().next() == Some(key))
            .unwrap();
        line.split_whitespace().last().unwrap().parse().unwrap()
    };
    assert!(
        delta("dram.P0.read_bytes") + delta("dram.P0.write_bytes") < 0,
        "{table}"
    );
}

#[test]
fn run_errors() {
    let dir = tempfile::tempdir().unwrap();
    // missing input binding
    let o = run_into(dir.path(), "outerspace.yaml", &MATMUL[..1], &[]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("B"), "{}", stderr(&o));
    // malformed generator
    assert_eq!(
        code(&run_into(
            dir.path(),
            "outerspace.yaml",
            &["A=gen:shape=8x8", MATMUL[1]],
            &[]
        )),
        2
    );
    // unreadable matrix file
    assert_eq!(
        code(&run_into(
            dir.path(),
            "outerspace.yaml",
            &["A=/nonexistent.mtx", MATMUL[1]],
            &[]
        )),
        2
    );
    // the graph cascade leaves one Einsum unbound, which --strict rejects
    let g = [
        "G=gen:shape=16x16,density=0.1",
        "A0=gen:shape=16,density=0.1",
        "P0=gen:shape=16,density=1",
    ];
    assert_eq!(
        code(&run_into(dir.path(), "graphicionado_9b.yaml", &g, &[])),
        0
    );
    let o = run_into(dir.path(), "graphicionado_9b.yaml", &g, &["--strict"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).starts_with("error: model: "), "{}", stderr(&o));
}

#[test]
fn diff_rejects_other_json() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&run_into(dir.path(), "gamma.yaml", &MATMUL, &[])), 0);
    let other = dir.path().join("other.json");
    std::fs::write(&other, "{\"cycles\": 1}").unwrap();
    let r = dir.path().join("report.json");
    let o = fibersim(&["diff", r.to_str().unwrap(), other.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("diff:"));
}

#[test]
fn matrix_market_input() {
    let dir = tempfile::tempdir().unwrap();
    let mtx = dir.path().join("a.mtx");
    std::fs::write(
        &mtx,
        "%%MatrixMarket matrix coordinate integer general\n4 4 3\n1 1 2\n2 3 1\n4 4 5\n",
    )
    .unwrap();
    let a = format!("A={}", mtx.display());
    let o = run_into(
        dir.path(),
        "outerspace.yaml",
        &[&a, "B=gen:shape=4x4,density=0.5,seed=1"],
        &[],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(
        report(dir.path())["dram"]["A"]["read_bytes"]
            .as_u64()
            .unwrap()
            > 0
    );
}

#[test]
fn reports_match_the_published_schema() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../docs/report.schema.json");
    let schema: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    let validator = jsonschema::validator_for(&schema).unwrap();
    let graph = [
        "G=gen:shape=32x32,density=0.05,seed=1",
        "A0=gen:shape=32,density=0.05,seed=2",
        "P0=gen:shape=32,density=1,seed=3",
    ];
    let cases: [(&str, &[&str]); 4] = [
        ("gamma.yaml", &MATMUL),
        ("outerspace.yaml", &MATMUL),
        ("graphicionado_9a.yaml", &graph),
        ("graphicionado_9b.yaml", &graph),
    ];
    for (spec, inputs) in cases {
        let dir = tempfile::tempdir().unwrap();
        assert_eq!(code(&run_into(dir.path(), spec, inputs, &[])), 0, "{spec}");
        let r = report(dir.path());
        let errors: Vec<String> = validator
            .iter_errors(&r)
            .map(|e| format!("{} at {}", e, e.instance_path()))
            .collect();
        assert!(errors.is_empty(), "{spec}: {errors:#?}");
    }
}
