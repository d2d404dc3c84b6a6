//! Library side of the `fibersim` command: run configuration, the three
//! subcommands and report diffing. The binary only parses arguments.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::components::{EnergyTable, ModelReport};
use crate::fibertree::Tensor;
use crate::format::select_config;
use crate::pipeline::{simulate, SimError};
use crate::spec::validate::validate;
use crate::spec::{parse_spec, ProblemSpec};
use crate::tensor_io::{generate, load_matrix_market, GenSpec};

/// Generator seed when neither the source nor `FIBERSIM_SEED` gives one.
pub const DEFAULT_SEED: u64 = 0;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("io: {0}")]
    Io(String),
    #[error("usage: {0}")]
    Usage(String),
    #[error("spec: {0}")]
    Spec(String),
    #[error("validate: {0}")]
    Invalid(String),
    #[error("compile: {0}")]
    Compile(String),
    #[error("execute: {0}")]
    Exec(String),
    #[error("format: {0}")]
    Format(String),
    #[error("energy: {0}")]
    Energy(String),
    #[error("model: {} diagnostic(s) under --strict: {}", .0.len(), .0.join("; "))]
    Strict(Vec<String>),
    #[error("diff: {0}")]
    Schema(String),
}

impl CliError {
    /// 1 for validation or model diagnostics, 2 for I/O and usage.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Io(_) | CliError::Usage(_) => 2,
            _ => 1,
        }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Compile(e) => CliError::Compile(e.to_string()),
            SimError::Exec(e) => CliError::Exec(e.to_string()),
            SimError::Format(e) => CliError::Format(e.to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Source {
    File(PathBuf),
    Gen(GenSpec),
}

/// Parses `PATH` or `gen:shape=AxB,density=D[,seed=S]`.
pub fn parse_source(text: &str, default_seed: u64) -> Result<Source, CliError> {
    let Some(rest) = text.strip_prefix("gen:") else {
        return Ok(Source::File(PathBuf::from(text)));
    };
    let bad = |m: String| CliError::Usage(format!("generator `{text}`: {m}"));
    let (mut shape, mut density, mut seed) = (None, None, default_seed);
    for kv in rest.split(',').filter(|s| !s.is_empty()) {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| bad(format!("`{kv}` is not key=value")))?;
        match k.trim() {
            "shape" => {
                let dims: Result<Vec<usize>, _> = v.split('x').map(|d| d.trim().parse()).collect();
                shape = Some(dims.map_err(|_| bad(format!("bad shape `{v}`")))?);
            }
            "density" => {
                density = Some(
                    v.trim()
                        .parse::<f64>()
                        .map_err(|_| bad(format!("bad density `{v}`")))?,
                )
            }
            "seed" => {
                seed = v
                    .trim()
                    .parse()
                    .map_err(|_| bad(format!("bad seed `{v}`")))?
            }
            other => return Err(bad(format!("unknown key `{other}`"))),
        }
    }
    let shape = shape.ok_or_else(|| bad("missing shape".into()))?;
    let density = density.ok_or_else(|| bad("missing density".into()))?;
    Ok(Source::Gen(GenSpec::new(shape, density, seed)))
}

/// Parses `NAME=SOURCE`.
pub fn parse_binding(text: &str, default_seed: u64) -> Result<(String, Source), CliError> {
    let (name, src) = text
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("tensor binding `{text}` is not NAME=SOURCE")))?;
    Ok((
        name.trim().to_string(),
        parse_source(src.trim(), default_seed)?,
    ))
}

/// `FIBERSIM_SEED` if set and numeric, else [`DEFAULT_SEED`].
pub fn env_seed() -> Result<u64, CliError> {
    match std::env::var("FIBERSIM_SEED") {
        Ok(v) => v.trim().parse().map_err(|_| {
            CliError::Usage(format!("FIBERSIM_SEED `{v}` is not an unsigned integer"))
        }),
        Err(_) => Ok(DEFAULT_SEED),
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunConfig {
    pub spec: PathBuf,
    pub tensors: BTreeMap<String, Source>,
    pub energy: Option<PathBuf>,
    /// Directory receiving `report.json`, `report.txt` and the optional
    /// `trace.csv` and `ir.txt`. Nothing is written when unset.
    pub out: Option<PathBuf>,
    pub trace: bool,
    pub dump_ir: bool,
    pub strict: bool,
    pub verbosity: u8,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: ModelReport,
    pub json: String,
    pub table: String,
    pub trace_csv: Option<String>,
    pub ir: Option<String>,
}

fn read(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

pub fn load_spec(path: &Path) -> Result<ProblemSpec, CliError> {
    parse_spec(&read(path)?).map_err(|e| CliError::Spec(format!("{}: {e}", path.display())))
}

pub fn load_tensor(spec: &ProblemSpec, name: &str, src: &Source) -> Result<Tensor, CliError> {
    let ranks: Vec<&str> = spec
        .declaration
        .get(name)
        .ok_or_else(|| CliError::Usage(format!("tensor {name} is not declared")))?
        .iter()
        .map(String::as_str)
        .collect();
    match src {
        Source::Gen(g) => {
            generate(g, name, &ranks).map_err(|e| CliError::Usage(format!("{name}: {e}")))
        }
        Source::File(p) => {
            let [r, c] = ranks[..] else {
                return Err(CliError::Usage(format!(
                    "{name} has {} ranks; Matrix Market files hold matrices",
                    ranks.len()
                )));
            };
            load_matrix_market(p, name, [r, c])
                .map_err(|e| CliError::Io(format!("{}: {e}", p.display())))
        }
    }
}

/// Checks a spec file. Returns the exit status and the diagnostics.
pub fn cmd_validate(path: &Path) -> (i32, Vec<String>) {
    let spec = match load_spec(path) {
        Ok(s) => s,
        Err(e) => return (e.exit_code(), vec![e.to_string()]),
    };
    let v = validate(&spec).violations;
    (if v.is_empty() { 0 } else { 1 }, v)
}

/// Parse, validate, compile, execute and model, then write the artifacts.
pub fn cmd_run(cfg: &RunConfig) -> Result<RunOutput, CliError> {
    let spec = load_spec(&cfg.spec)?;
    let v = validate(&spec);
    if !v.is_empty() {
        return Err(CliError::Invalid(v.violations.join("; ")));
    }
    for t in cfg.tensors.keys() {
        if !spec.declaration.contains_key(t) {
            return Err(CliError::Usage(format!("tensor {t} is not declared")));
        }
    }
    let mut inputs = BTreeMap::new();
    for t in spec.external_inputs() {
        let src = cfg.tensors.get(&t).ok_or_else(|| {
            CliError::Usage(format!(
                "input tensor {t} has no source (use --tensor {t}=...)"
            ))
        })?;
        inputs.insert(t.clone(), load_tensor(&spec, &t, src)?);
    }
    let table = match &cfg.energy {
        Some(p) => EnergyTable::parse(&read(p)?)
            .map_err(|e| CliError::Energy(format!("{}: {e}", p.display())))?,
        None => EnergyTable::builtin(),
    };
    let sim = simulate(&spec, &inputs, &table)?;

    let trace_csv = cfg.trace.then(|| {
        let mut s = String::new();
        for (i, r) in sim.run.runs.iter().enumerate() {
            let configs: Vec<String> = r
                .trace
                .tensors
                .iter()
                .map(|t| select_config(&spec, &r.trace.einsum, &t.name).unwrap_or_default())
                .collect();
            let csv = r.trace.to_csv(&configs);
            s.push_str(if i == 0 {
                &csv
            } else {
                csv.split_once('\n').map_or("", |x| x.1)
            });
        }
        s
    });
    let out = RunOutput {
        json: sim.report.to_json(),
        table: sim.report.to_table(),
        ir: cfg.dump_ir.then(|| sim.compiled.dump()),
        trace_csv,
        report: sim.report,
    };
    if let Some(dir) = &cfg.out {
        std::fs::create_dir_all(dir)
            .map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
        write(&dir.join("report.json"), &out.json)?;
        write(&dir.join("report.txt"), &out.table)?;
        if let Some(t) = &out.trace_csv {
            write(&dir.join("trace.csv"), t)?;
        }
        if let Some(ir) = &out.ir {
            write(&dir.join("ir.txt"), ir)?;
        }
    }
    if cfg.strict && !out.report.diagnostics.is_empty() {
        return Err(CliError::Strict(out.report.diagnostics.clone()));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiffRow {
    pub key: String,
    pub a: f64,
    pub b: f64,
}

impl DiffRow {
    pub fn delta(&self) -> f64 {
        self.b - self.a
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ReportDiff {
    pub rows: Vec<DiffRow>,
    /// `(einsum, bottleneck in a, bottleneck in b)` where they differ.
    pub bottlenecks: Vec<(String, String, String)>,
}

impl ReportDiff {
    pub fn is_zero(&self) -> bool {
        self.bottlenecks.is_empty() && self.rows.iter().all(|r| r.delta() == 0.0)
    }

    pub fn to_table(&self) -> String {
        let cells: Vec<[String; 4]> =
            std::iter::once(["metric".into(), "a".into(), "b".into(), "delta".into()])
                .chain(
                    self.rows
                        .iter()
                        .map(|r| [r.key.clone(), num(r.a), num(r.b), num(r.delta())]),
                )
                .collect();
        let w: Vec<usize> = (0..4)
            .map(|i| cells.iter().map(|c| c[i].len()).max().unwrap_or(0))
            .collect();
        let mut s = String::new();
        for c in &cells {
            let _ = writeln!(
                s,
                "{:<a$}  {:>b$}  {:>c$}  {:>d$}",
                c[0],
                c[1],
                c[2],
                c[3],
                a = w[0],
                b = w[1],
                c = w[2],
                d = w[3]
            );
        }
        for (e, a, b) in &self.bottlenecks {
            let _ = writeln!(s, "bottleneck {e}: {a} -> {b}");
        }
        s
    }
}

fn num(x: f64) -> String {
    if x.fract() == 0.0 && x.abs() < 1e15 {
        format!("{x:.0}")
    } else {
        format!("{x:.4}")
    }
}

pub fn parse_report(json: &str) -> Result<ModelReport, CliError> {
    serde_json::from_str(json).map_err(|e| CliError::Schema(format!("not a report: {e}")))
}

/// Side-by-side totals, per-tensor DRAM traffic, per-Einsum cycles and
/// energy, and bottleneck changes.
pub fn diff_reports(a: &ModelReport, b: &ModelReport) -> ReportDiff {
    let mut rows: BTreeMap<String, (f64, f64)> = BTreeMap::new();
    let mut put = |k: String, side: usize, v: f64| {
        let e = rows.entry(k).or_default();
        if side == 0 {
            e.0 = v
        } else {
            e.1 = v
        }
    };
    for (side, r) in [a, b].into_iter().enumerate() {
        put("total.cycles".into(), side, r.cycles as f64);
        put("total.seconds".into(), side, r.seconds);
        put("total.dram_bytes".into(), side, r.dram_bytes as f64);
        put("total.energy_pj".into(), side, r.energy_pj);
        for (t, tr) in &r.dram {
            put(format!("dram.{t}.read_bytes"), side, tr.read_bytes as f64);
            put(format!("dram.{t}.write_bytes"), side, tr.write_bytes as f64);
        }
        for e in &r.einsums {
            put(format!("einsum.{}.cycles", e.einsum), side, e.cycles as f64);
            put(format!("einsum.{}.energy_pj", e.einsum), side, e.energy_pj);
        }
    }
    let mut bottlenecks = Vec::new();
    for e in &a.einsums {
        let other = b
            .einsums
            .iter()
            .find(|x| x.einsum == e.einsum)
            .and_then(|x| x.bottleneck.clone());
        if other != e.bottleneck {
            let show = |x: Option<String>| x.unwrap_or_else(|| "-".into());
            bottlenecks.push((e.einsum.clone(), show(e.bottleneck.clone()), show(other)));
        }
    }
    ReportDiff {
        rows: rows
            .into_iter()
            .map(|(key, (a, b))| DiffRow { key, a, b })
            .collect(),
        bottlenecks,
    }
}

pub fn cmd_diff(a: &Path, b: &Path) -> Result<ReportDiff, CliError> {
    let ra =
        parse_report(&read(a)?).map_err(|e| CliError::Schema(format!("{}: {e}", a.display())))?;
    let rb =
        parse_report(&read(b)?).map_err(|e| CliError::Schema(format!("{}: {e}", b.display())))?;
    Ok(diff_reports(&ra, &rb))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sources() {
        assert_eq!(
            parse_source("a.mtx", 0).unwrap(),
            Source::File("a.mtx".into())
        );
        assert_eq!(
            parse_source("gen:shape=8x8,density=0.25,seed=3", 9).unwrap(),
            Source::Gen(GenSpec::new(vec![8, 8], 0.25, 3))
        );
        assert_eq!(
            parse_source("gen:shape=4x2,density=1", 9).unwrap(),
            Source::Gen(GenSpec::new(vec![4, 2], 1.0, 9))
        );
        assert!(parse_source("gen:shape=4x2", 0).is_err());
        assert!(parse_source("gen:shape=4xq,density=1", 0).is_err());
        assert!(parse_source("gen:shape=4,density=1,color=red", 0).is_err());
        assert_eq!(parse_binding("A = x.mtx", 0).unwrap().0, "A");
        assert!(parse_binding("A", 0).is_err());
    }

    #[test]
    fn exit_codes() {
        assert_eq!(CliError::Io("x".into()).exit_code(), 2);
        assert_eq!(CliError::Usage("x".into()).exit_code(), 2);
        assert_eq!(CliError::Strict(vec![]).exit_code(), 1);
        assert!(CliError::Compile("x".into())
            .to_string()
            .starts_with("compile: "));
    }

    #[test]
    fn schema_mismatch() {
        assert!(parse_report("{\"cycles\": 3}").is_err());
        assert!(parse_report("[]").is_err());
    }
}
