//! Tensor sources: Matrix Market files, seeded random generation, and a
//! brute-force dense evaluator used as a reference.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand_core::{RngCore, SeedableRng};
use rand_xoshiro::SplitMix64;

use crate::fibertree::{Coord, DenseArray, Rank, Tensor};
use crate::semiring::{Overflow, Semiring, Value};
use crate::spec::{Expr, Index, ProblemSpec};

#[derive(Debug, thiserror::Error)]
pub enum IoError {
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {msg}")]
    Malformed { line: usize, msg: String },
    #[error("entry ({row}, {col}) outside a {rows}x{cols} matrix")]
    OutOfRange {
        row: usize,
        col: usize,
        rows: usize,
        cols: usize,
    },
    #[error("invalid generator spec: {0}")]
    Gen(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Field {
    Real,
    Integer,
    Pattern,
}

/// Parses a coordinate Matrix Market file into a tensor with ranks
/// `[rows, cols]`. Symmetric entries are mirrored, pattern entries take
/// value 1 and duplicates are summed.
pub fn parse_matrix_market(text: &str, name: &str, ranks: [&str; 2]) -> Result<Tensor, IoError> {
    let mut lines = text.lines().enumerate();
    let bad = |line: usize, msg: &str| IoError::Malformed {
        line: line + 1,
        msg: msg.into(),
    };
    let (hl, header) = lines.next().ok_or_else(|| bad(0, "empty file"))?;
    let h: Vec<String> = header.split_whitespace().map(str::to_lowercase).collect();
    if h.len() != 5 || h[0] != "%%matrixmarket" || h[1] != "matrix" {
        return Err(bad(
            hl,
            "expected `%%MatrixMarket matrix coordinate <field> <symmetry>`",
        ));
    }
    if h[2] != "coordinate" {
        return Err(bad(hl, "only the coordinate format is supported"));
    }
    let field = match h[3].as_str() {
        "real" | "double" => Field::Real,
        "integer" => Field::Integer,
        "pattern" => Field::Pattern,
        other => return Err(bad(hl, &format!("unsupported field `{other}`"))),
    };
    let symmetric = match h[4].as_str() {
        "general" => false,
        "symmetric" => true,
        other => return Err(bad(hl, &format!("unsupported symmetry `{other}`"))),
    };
    let mut size = None;
    let mut entries: BTreeMap<(usize, usize), Value> = BTreeMap::new();
    let mut expected = 0;
    let mut seen = 0;
    for (ln, line) in lines {
        let t = line.trim();
        if t.is_empty() || t.starts_with('%') {
            continue;
        }
        let parts: Vec<&str> = t.split_whitespace().collect();
        let Some((rows, cols)) = size else {
            if parts.len() != 3 {
                return Err(bad(ln, "expected `rows cols entries`"));
            }
            let n: Vec<usize> = parts
                .iter()
                .map(|p| {
                    p.parse()
                        .map_err(|_| bad(ln, "size line must hold integers"))
                })
                .collect::<Result<_, _>>()?;
            size = Some((n[0], n[1]));
            expected = n[2];
            continue;
        };
        let want = if field == Field::Pattern { 2 } else { 3 };
        if parts.len() != want {
            return Err(bad(ln, &format!("expected {want} fields")));
        }
        let r: usize = parts[0]
            .parse()
            .map_err(|_| bad(ln, "row index is not an integer"))?;
        let c: usize = parts[1]
            .parse()
            .map_err(|_| bad(ln, "column index is not an integer"))?;
        if r == 0 || c == 0 || r > rows || c > cols {
            return Err(IoError::OutOfRange {
                row: r,
                col: c,
                rows,
                cols,
            });
        }
        let v: Value = match field {
            Field::Pattern => 1.0,
            Field::Integer => parts[2]
                .parse::<i64>()
                .map_err(|_| bad(ln, "value is not an integer"))?
                as Value,
            Field::Real => parts[2]
                .parse()
                .map_err(|_| bad(ln, "value is not a number"))?,
        };
        *entries.entry((r - 1, c - 1)).or_insert(0.0) += v;
        if symmetric && r != c {
            *entries.entry((c - 1, r - 1)).or_insert(0.0) += v;
        }
        seen += 1;
    }
    let (rows, cols) = size.ok_or_else(|| bad(0, "missing size line"))?;
    if seen != expected {
        return Err(bad(
            0,
            &format!("header announces {expected} entries, found {seen}"),
        ));
    }
    let points = entries
        .into_iter()
        .filter(|(_, v)| *v != 0.0)
        .map(|((r, c), v)| (vec![Coord::Int(r), Coord::Int(c)], v))
        .collect();
    Ok(Tensor::from_points(
        name,
        vec![Rank::new(ranks[0], rows), Rank::new(ranks[1], cols)],
        points,
    ))
}

pub fn load_matrix_market(path: &Path, name: &str, ranks: [&str; 2]) -> Result<Tensor, IoError> {
    parse_matrix_market(&std::fs::read_to_string(path)?, name, ranks)
}

/// Writes a 2-tensor in coordinate Matrix Market form (integer field when
/// every value is integral).
pub fn to_matrix_market(t: &Tensor) -> String {
    let pts = t.points();
    let integral = pts.iter().all(|(_, v)| v.fract() == 0.0);
    let mut s = format!(
        "%%MatrixMarket matrix coordinate {} general\n",
        if integral { "integer" } else { "real" }
    );
    let dims: Vec<usize> = t.ranks.iter().map(|r| r.extent.size()).collect();
    let _ = writeln!(
        s,
        "{} {} {}",
        dims[0],
        dims.get(1).copied().unwrap_or(1),
        pts.len()
    );
    for (p, v) in pts {
        let r = p[0].components()[0] + 1;
        let c = p.get(1).map_or(1, |c| c.components()[0] + 1);
        let _ = writeln!(s, "{r} {c} {v}");
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub enum Values {
    /// Integers drawn uniformly from `lo..=hi` (zero excluded when in range).
    Int { lo: i64, hi: i64 },
    /// Floats in `[0, 1)`.
    Unit,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenSpec {
    pub shape: Vec<usize>,
    pub density: f64,
    pub seed: u64,
    pub values: Values,
}

impl GenSpec {
    pub fn new(shape: Vec<usize>, density: f64, seed: u64) -> Self {
        GenSpec {
            shape,
            density,
            seed,
            values: Values::Int { lo: 1, hi: 9 },
        }
    }

    /// Number of nonzeros the generator will produce.
    pub fn target(&self) -> usize {
        let n: usize = self.shape.iter().product();
        ((self.density * n as f64).round() as usize).min(n)
    }
}

/// Uniform integer in `0..n` by multiply-shift.
fn below(rng: &mut SplitMix64, n: u64) -> u64 {
    ((rng.next_u64() as u128 * n as u128) >> 64) as u64
}

/// Exactly `target()` distinct coordinates sampled without replacement
/// (Floyd's algorithm over row-major positions) from a SplitMix64 stream.
pub fn generate(spec: &GenSpec, name: &str, ranks: &[&str]) -> Result<Tensor, IoError> {
    if !(spec.density > 0.0 && spec.density <= 1.0) {
        return Err(IoError::Gen(format!(
            "density {} outside (0, 1]",
            spec.density
        )));
    }
    if spec.shape.len() != ranks.len() {
        return Err(IoError::Gen(format!(
            "{} extents for {} ranks",
            spec.shape.len(),
            ranks.len()
        )));
    }
    if let Values::Int { lo, hi } = spec.values {
        if lo > hi || (lo == 0 && hi == 0) {
            return Err(IoError::Gen(format!("empty value range {lo}..={hi}")));
        }
    }
    let n: u64 = spec.shape.iter().map(|&s| s as u64).product();
    let k = spec.target() as u64;
    let mut rng = SplitMix64::seed_from_u64(spec.seed);
    let mut chosen = std::collections::BTreeSet::new();
    for j in (n - k)..n {
        let t = below(&mut rng, j + 1);
        if !chosen.insert(t) {
            chosen.insert(j);
        }
    }
    let mut points = Vec::with_capacity(k as usize);
    for flat in chosen {
        let mut idx = vec![Coord::Int(0); spec.shape.len()];
        let mut f = flat as usize;
        for d in (0..spec.shape.len()).rev() {
            idx[d] = Coord::Int(f % spec.shape[d]);
            f /= spec.shape[d];
        }
        let v = match spec.values {
            Values::Int { lo, hi } => loop {
                let x = lo + below(&mut rng, (hi - lo + 1) as u64) as i64;
                if x != 0 {
                    break x as Value;
                }
            },
            Values::Unit => (rng.next_u64() >> 11) as Value * (1.0 / (1u64 << 53) as Value),
        };
        points.push((idx, v));
    }
    let ranks = ranks
        .iter()
        .zip(&spec.shape)
        .map(|(r, &s)| Rank::new(*r, s))
        .collect();
    Ok(Tensor::from_points(name, ranks, points))
}

/// Order-independent checksum of a tensor's points.
pub fn checksum(t: &Tensor) -> u64 {
    t.points().iter().fold(0u64, |acc, (p, v)| {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for c in p {
            for &x in c.components() {
                h = (h ^ x as u64).wrapping_mul(0x100_0000_01b3);
            }
        }
        h = (h ^ v.to_bits()).wrapping_mul(0x100_0000_01b3);
        acc.wrapping_add(h)
    })
}

#[derive(Debug, thiserror::Error)]
pub enum OracleError {
    #[error("rank {rank} of {tensor} has extent {extent}, above the oracle limit of {limit}")]
    Oversize {
        tensor: String,
        rank: String,
        extent: usize,
        limit: usize,
    },
    #[error("no extent known for index {0}")]
    UnknownExtent(String),
    #[error("tensor {0} has no value")]
    Missing(String),
    #[error(transparent)]
    Overflow(#[from] Overflow),
}

pub const ORACLE_LIMIT: usize = 32;

/// Evaluates the cascade by visiting every point of every Einsum's full
/// iteration space. Arrays are indexed in declared rank order. An Einsum
/// writing a tensor that already has a value updates the written points
/// only.
pub fn dense_einsum_oracle(
    spec: &ProblemSpec,
    inputs: &BTreeMap<String, DenseArray>,
) -> Result<BTreeMap<String, DenseArray>, OracleError> {
    let sr = spec.operators;
    let mut env = inputs.clone();
    for (name, a) in &env {
        let decl = spec.declaration.get(name).cloned().unwrap_or_default();
        for (i, &e) in a.shape.iter().enumerate() {
            if e > ORACLE_LIMIT {
                return Err(OracleError::Oversize {
                    tensor: name.clone(),
                    rank: decl.get(i).cloned().unwrap_or_default(),
                    extent: e,
                    limit: ORACLE_LIMIT,
                });
            }
        }
    }
    for e in &spec.expressions {
        let mut ext: BTreeMap<String, usize> = BTreeMap::new();
        for a in e.expr.accesses() {
            let arr = env
                .get(&a.tensor)
                .ok_or_else(|| OracleError::Missing(a.tensor.clone()))?;
            for (i, idx) in a.indices.iter().enumerate() {
                if let Some(v) = idx.as_var() {
                    ext.entry(v.to_string()).or_insert(arr.shape[i]);
                }
            }
        }
        let mut vars: Vec<String> = e.expr.vars().into_iter().collect();
        for i in &e.output.indices {
            vars.extend(i.vars().iter().cloned());
        }
        vars.sort();
        vars.dedup();
        for v in &vars {
            if !ext.contains_key(v) {
                let up = v.to_uppercase();
                let n = env
                    .iter()
                    .find_map(|(t, a)| {
                        spec.declaration
                            .get(t)?
                            .iter()
                            .position(|r| *r == up)
                            .map(|p| a.shape[p])
                    })
                    .or_else(|| spec.shapes.get(&up).copied())
                    .ok_or_else(|| OracleError::UnknownExtent(v.clone()))?;
                ext.insert(v.clone(), n);
            }
        }
        let existential = e.existential_vars();
        let outer: Vec<&String> = vars.iter().filter(|v| !existential.contains(v)).collect();
        let out_vars: Vec<&str> = e
            .output
            .indices
            .iter()
            .map(|i| i.as_var().unwrap())
            .collect();
        let out_shape: Vec<usize> = out_vars.iter().map(|v| ext[*v]).collect();
        let mut written: BTreeMap<Vec<usize>, Value> = BTreeMap::new();
        let mut point: BTreeMap<String, usize> = outer.iter().map(|v| ((*v).clone(), 0)).collect();
        let total: usize = outer.iter().map(|v| ext[*v]).product();
        for flat in 0..total {
            let mut f = flat;
            for v in outer.iter().rev() {
                let n = ext[*v];
                point.insert((*v).clone(), f % n);
                f /= n;
            }
            let val = eval(&e.expr, &env, &point, &ext, &existential, &sr)?;
            if let Some(x) = val.filter(|x| !sr.is_zero(*x)) {
                let key: Vec<usize> = out_vars.iter().map(|v| point[*v]).collect();
                match written.get_mut(&key) {
                    Some(acc) => *acc = sr.add(*acc, x)?,
                    None => {
                        written.insert(key, x);
                    }
                }
            }
        }
        let mut out = match env.get(e.name()) {
            Some(old) if old.shape == out_shape => old.clone(),
            _ => DenseArray::filled(out_shape, sr.zero()),
        };
        for (k, v) in written {
            out.set(&k, if sr.is_zero(v) { sr.zero() } else { v });
        }
        env.insert(e.name().to_string(), out);
    }
    Ok(env)
}

fn lookup(
    arr: &DenseArray,
    indices: &[Index],
    point: &BTreeMap<String, usize>,
    sr: &Semiring,
) -> Option<Value> {
    let mut idx = Vec::with_capacity(indices.len());
    for (i, x) in indices.iter().enumerate() {
        let c: usize = x.vars().iter().map(|v| point[v]).sum();
        if c >= arr.shape[i] {
            return None;
        }
        idx.push(c);
    }
    let v = arr.get(&idx);
    (!sr.is_zero(v)).then_some(v)
}

fn eval(
    e: &Expr,
    env: &BTreeMap<String, DenseArray>,
    point: &BTreeMap<String, usize>,
    ext: &BTreeMap<String, usize>,
    existential: &[String],
    sr: &Semiring,
) -> Result<Option<Value>, Overflow> {
    Ok(match e {
        Expr::Access(a) => {
            let arr = &env[&a.tensor];
            let ex: Vec<&String> = a
                .indices
                .iter()
                .flat_map(|i| i.vars())
                .filter(|v| existential.contains(v))
                .collect();
            if ex.is_empty() {
                lookup(arr, &a.indices, point, sr)
            } else {
                // any assignment of the existential variables will do
                let total: usize = ex.iter().map(|v| ext[*v]).product();
                let mut p = point.clone();
                let mut found = None;
                for flat in 0..total {
                    let mut f = flat;
                    for v in ex.iter().rev() {
                        p.insert((*v).clone(), f % ext[*v]);
                        f /= ext[*v];
                    }
                    if let Some(v) = lookup(arr, &a.indices, &p, sr) {
                        found = Some(v);
                        break;
                    }
                }
                found
            }
        }
        Expr::Mul(a, b) => match (
            eval(a, env, point, ext, existential, sr)?,
            eval(b, env, point, ext, existential, sr)?,
        ) {
            (Some(x), Some(y)) => Some(sr.mul(x, y)?),
            _ => None,
        },
        Expr::Add(a, b) => match (
            eval(a, env, point, ext, existential, sr)?,
            eval(b, env, point, ext, existential, sr)?,
        ) {
            (Some(x), Some(y)) => Some(sr.add(x, y)?),
            (x, None) => x,
            (None, y) => y,
        },
        Expr::Sub(a, b) => match (
            eval(a, env, point, ext, existential, sr)?,
            eval(b, env, point, ext, existential, sr)?,
        ) {
            (Some(x), Some(y)) => Some(sr.sub(x, y)?),
            (x, None) => x,
            (None, Some(y)) => Some(sr.sub(sr.zero(), y)?).filter(|v| !sr.is_zero(*v)),
        },
        Expr::Take(args, pick) => {
            let mut vals = Vec::with_capacity(args.len());
            for a in args {
                vals.push(eval(a, env, point, ext, existential, sr)?);
            }
            if vals.iter().all(Option::is_some) {
                vals[*pick]
            } else {
                None
            }
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mm_index_shift() {
        let t = parse_matrix_market(
            "%%MatrixMarket matrix coordinate integer general\n% c\n3 3 2\n1 1 2\n3 2 5\n",
            "A",
            ["R", "C"],
        )
        .unwrap();
        assert_eq!(
            t.points(),
            vec![
                (vec![Coord::Int(0), Coord::Int(0)], 2.0),
                (vec![Coord::Int(2), Coord::Int(1)], 5.0)
            ]
        );
    }

    #[test]
    fn mm_pattern_symmetric_duplicates() {
        let t = parse_matrix_market(
            "%%MatrixMarket matrix coordinate pattern symmetric\n3 3 3\n2 1\n3 3\n2 1\n",
            "A",
            ["R", "C"],
        )
        .unwrap();
        let d = t.to_dense(0.0).unwrap();
        assert_eq!(d.get(&[1, 0]), 2.0);
        assert_eq!(d.get(&[0, 1]), 2.0);
        assert_eq!(d.get(&[2, 2]), 1.0);
    }

    #[test]
    fn mm_errors() {
        assert!(matches!(
            parse_matrix_market(
                "%%MatrixMarket matrix array real general\n",
                "A",
                ["R", "C"]
            ),
            Err(IoError::Malformed { .. })
        ));
        assert!(matches!(
            parse_matrix_market(
                "%%MatrixMarket matrix coordinate real general\n2 2 1\n3 1 1.0\n",
                "A",
                ["R", "C"]
            ),
            Err(IoError::OutOfRange { .. })
        ));
    }

    #[test]
    fn generator_counts() {
        let full = generate(&GenSpec::new(vec![4, 5], 1.0, 3), "A", &["K", "M"]).unwrap();
        assert_eq!(full.nnz(), 20);
        let sparse = generate(&GenSpec::new(vec![16, 16], 0.3, 7), "A", &["K", "M"]).unwrap();
        assert_eq!(sparse.nnz(), 77);
        let tiny = generate(&GenSpec::new(vec![2], 0.1, 1), "A", &["K"]).unwrap();
        assert_eq!(tiny.nnz(), 0);
        assert!(generate(&GenSpec::new(vec![2], 1.5, 1), "A", &["K"]).is_err());
    }

    #[test]
    fn oracle_identity() {
        let spec = crate::spec::parse_spec(
            "einsum:\n  declaration:\n    A: [K, M]\n    B: [K, N]\n    Z: [M, N]\n  expressions:\n    - Z[m, n] = A[k, m] * B[k, n]\n",
        )
        .unwrap();
        let eye = DenseArray::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let inputs = BTreeMap::from([
            ("A".to_string(), eye.clone()),
            ("B".to_string(), eye.clone()),
        ]);
        let out = dense_einsum_oracle(&spec, &inputs).unwrap();
        assert_eq!(out["Z"], eye);
    }
}
