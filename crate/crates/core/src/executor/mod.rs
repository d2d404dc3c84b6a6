//! Interpreter for compiled loop nests.
//!
//! Runs each Einsum over fibertrees, producing the output tensor and a
//! trace of every coordinate, payload and header access together with
//! intersection, compute and merge statistics.

mod trace;
mod walk;

use std::collections::BTreeMap;

use crate::compiler::{CompiledCascade, LoopNest, Operand, Tag, Transform};
use crate::fibertree::{FiberError, Rank, Tensor};
use crate::semiring::Overflow;
use crate::spec::{ComponentClass, IntersectKind, ProblemSpec};

pub use trace::{
    merge_event, Datum, IntersectStats, MergeEvent, MergeGroup, Point, Record, Trace, TraceTensor,
};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ExecError {
    #[error("Einsum {einsum}: {source}")]
    Overflow {
        einsum: String,
        #[source]
        source: Overflow,
    },
    #[error("Einsum {einsum}: shape mismatch: {msg}")]
    Shape { einsum: String, msg: String },
    #[error("Einsum {einsum}: tensor {tensor} has no value")]
    Missing { einsum: String, tensor: String },
    #[error("Einsum {einsum}: {source}")]
    Fiber {
        einsum: String,
        #[source]
        source: FiberError,
    },
    #[error("Einsum {einsum}: {msg}")]
    Unsupported { einsum: String, msg: String },
}

/// Output of one Einsum.
#[derive(Debug, Clone)]
pub struct EinsumRun {
    pub output: Tensor,
    pub trace: Trace,
}

#[derive(Debug, Clone)]
pub struct CascadeRun {
    /// Final value of every tensor, keyed by name.
    pub tensors: BTreeMap<String, Tensor>,
    /// One run per Einsum, in listed order.
    pub runs: Vec<EinsumRun>,
}

/// Intersection unit bound to an Einsum: its name, algorithm and leader.
/// A unit without a fixed leader follows the first tensor bound to it.
pub fn intersect_unit(
    spec: &ProblemSpec,
    einsum: &str,
) -> Option<(String, IntersectKind, Option<String>)> {
    let b = spec.binding.einsums.get(einsum)?;
    let topo = spec.architecture.topologies.get(&b.topology)?;
    b.components
        .iter()
        .find_map(|(c, entries)| match topo.component(c) {
            Some((_, _, comp)) => match &comp.class {
                ComponentClass::Intersection { kind, leader } => {
                    let leader = leader
                        .clone()
                        .or_else(|| entries.iter().find_map(|e| e.tensor.clone()));
                    Some((c.clone(), *kind, leader))
                }
                _ => None,
            },
            None => None,
        })
}

/// Intersection algorithm bound to an Einsum, with its optional leader.
pub fn intersect_policy(
    spec: &ProblemSpec,
    einsum: &str,
) -> Option<(IntersectKind, Option<String>)> {
    intersect_unit(spec, einsum).map(|(_, k, l)| (k, l))
}

/// Brings a stored tensor into the operand's transformed shape.
pub fn prepare_operand(
    einsum: &str,
    t: &Tensor,
    op: &Operand,
) -> Result<(Tensor, Vec<MergeEvent>), ExecError> {
    let fe = |source| ExecError::Fiber {
        einsum: einsum.into(),
        source,
    };
    if t.ranks.len() != op.stored.len() {
        return Err(ExecError::Shape {
            einsum: einsum.into(),
            msg: format!(
                "{} has {} ranks, expected {}",
                t.name,
                t.ranks.len(),
                op.stored.len()
            ),
        });
    }
    let mut w = t.clone();
    for (r, n) in w.ranks.iter_mut().zip(&op.stored) {
        r.name = n.clone();
        r.bases = vec![n.clone()];
    }
    let mut events = Vec::new();
    for step in &op.prelude {
        w = match &step.transform {
            Transform::Swizzle { to, .. } => {
                if step.tag == Tag::Online {
                    events.push(merge_event(&w, to, true));
                }
                let to: Vec<&str> = to.iter().map(String::as_str).collect();
                w.swizzle(&to).map_err(fe)?
            }
            Transform::SplitShape {
                rank,
                size,
                upper,
                lower,
            } => w
                .partition_uniform_shape(rank, *size, upper, lower)
                .map_err(fe)?,
            Transform::SplitOccupancy {
                rank,
                size,
                upper,
                lower,
            } => {
                Tensor::partition_uniform_occupancy(&w, &[], rank, *size, upper, lower)
                    .map_err(fe)?
                    .0
            }
            Transform::Flatten { upper, lower, name } => {
                w.flatten(upper, lower, name).map_err(fe)?
            }
        };
    }
    let got: Vec<&str> = w.rank_names();
    let want: Vec<&str> = op.ranks.iter().map(|r| r.name.as_str()).collect();
    if got != want {
        return Err(ExecError::Unsupported {
            einsum: einsum.into(),
            msg: format!(
                "prelude of {} produced ranks {got:?}, expected {want:?}",
                t.name
            ),
        });
    }
    w.assign_layout();
    Ok((w, events))
}

/// Extent of every index variable of an Einsum.
fn var_extents(
    spec: &ProblemSpec,
    nest_einsum: &str,
    env: &BTreeMap<String, Tensor>,
) -> Result<BTreeMap<String, usize>, ExecError> {
    let e = spec.einsum(nest_einsum).expect("compiled Einsum exists");
    let mut ext: BTreeMap<String, usize> = BTreeMap::new();
    for a in e.expr.accesses() {
        let Some(t) = env.get(&a.tensor) else {
            continue;
        };
        let decl = &spec.declaration[&a.tensor];
        let bases = t.base_ranks();
        for (i, idx) in a.indices.iter().enumerate() {
            let Some(v) = idx.as_var() else { continue };
            let Some((_, n)) = bases.iter().find(|(b, _)| *b == decl[i]) else {
                continue;
            };
            match ext.get(v) {
                Some(m) if m != n => {
                    return Err(ExecError::Shape {
                        einsum: nest_einsum.into(),
                        msg: format!("index {v} has extent {m} and {n}"),
                    })
                }
                _ => {
                    ext.insert(v.to_string(), *n);
                }
            }
        }
    }
    let mut vars: Vec<String> = e.expr.vars().into_iter().collect();
    for i in &e.output.indices {
        vars.extend(i.vars().iter().cloned());
    }
    for v in vars {
        if ext.contains_key(&v) {
            continue;
        }
        let upper = v.to_uppercase();
        let from_env = env.values().find_map(|t| {
            t.base_ranks()
                .into_iter()
                .find(|(b, _)| *b == upper)
                .map(|(_, n)| n)
        });
        match from_env.or_else(|| spec.shapes.get(&upper).copied()) {
            Some(n) => {
                ext.insert(v, n);
            }
            None => {
                return Err(ExecError::Shape {
                    einsum: nest_einsum.into(),
                    msg: format!("no extent known for index {v}"),
                })
            }
        }
    }
    Ok(ext)
}

/// Runs one compiled Einsum against the current tensor values. Tensors in
/// `env` are stored in their rank-order under declared rank names.
pub fn execute(
    spec: &ProblemSpec,
    nest: &LoopNest,
    env: &BTreeMap<String, Tensor>,
) -> Result<EinsumRun, ExecError> {
    let name = nest.einsum.as_str();
    let mut prepared = Vec::with_capacity(nest.operands.len());
    let mut merges = Vec::new();
    for op in &nest.operands {
        let t = env.get(&op.tensor).ok_or_else(|| ExecError::Missing {
            einsum: name.into(),
            tensor: op.tensor.clone(),
        })?;
        let (w, ev) = prepare_operand(name, t, op)?;
        prepared.push(w);
        merges.extend(ev);
    }
    let extents = var_extents(spec, name, env)?;
    let policy = intersect_policy(spec, name);
    let e = spec.einsum(name).expect("compiled Einsum exists");
    let declared = &spec.declaration[name];
    let out_vars: Vec<&str> = e
        .output
        .indices
        .iter()
        .map(|i| i.as_var().expect("plain output index"))
        .collect();
    let out_ranks: Vec<String> = nest
        .output
        .production
        .iter()
        .map(|v| declared[out_vars.iter().position(|x| x == v).unwrap()].clone())
        .collect();
    let (points, mut trace) = walk::run(
        nest,
        &prepared,
        &extents,
        &out_ranks,
        spec.operators,
        policy,
    )?;
    trace.merges.splice(0..0, merges);
    for (tt, op) in trace.tensors.iter_mut().zip(&nest.operands) {
        let stored = &env[&op.tensor].ranks;
        for bs in &mut tt.bases {
            for b in bs.iter_mut() {
                if let Some(i) = op.stored.iter().position(|s| s == b) {
                    *b = stored[i].name.clone();
                }
            }
        }
    }
    let ranks: Vec<Rank> = out_ranks
        .iter()
        .zip(&nest.output.production)
        .map(|(r, v)| Rank::new(r.clone(), extents[v]))
        .collect();
    let mut out = Tensor::from_points(name, ranks, points);
    out.compact(spec.operators.zero());
    if nest.output.swizzle.is_some() {
        trace
            .merges
            .push(merge_event(&out, &nest.output.storage_ranks, false));
        let to: Vec<&str> = nest
            .output
            .storage_ranks
            .iter()
            .map(String::as_str)
            .collect();
        out = out.swizzle(&to).map_err(|source| ExecError::Fiber {
            einsum: name.into(),
            source,
        })?;
    }
    Ok(EinsumRun { output: out, trace })
}

/// Brings a tensor given under declared rank names into its rank-order.
pub fn to_rank_order(spec: &ProblemSpec, t: &Tensor) -> Result<Tensor, FiberError> {
    match spec.mapping.rank_order.get(&t.name) {
        Some(order) if order.len() == t.ranks.len() => {
            let o: Vec<&str> = order.iter().map(String::as_str).collect();
            t.swizzle(&o)
        }
        _ => Ok(t.clone()),
    }
}

/// Writing a tensor that already holds a value updates it in place: points
/// written replace old ones, all others are kept.
pub fn overlay(old: &Tensor, new: &Tensor) -> Tensor {
    let mut points = old.points();
    points.extend(new.points());
    Tensor::from_points(new.name.clone(), new.ranks.clone(), points)
}

/// Runs every Einsum of the cascade in listed order. Each Einsum sees the
/// value of a tensor most recently written before it.
pub fn execute_cascade(
    spec: &ProblemSpec,
    compiled: &CompiledCascade,
    inputs: &BTreeMap<String, Tensor>,
) -> Result<CascadeRun, ExecError> {
    let mut env = BTreeMap::new();
    for (n, t) in inputs {
        let t = to_rank_order(spec, t).map_err(|source| ExecError::Fiber {
            einsum: String::new(),
            source,
        })?;
        env.insert(n.clone(), t);
    }
    let mut runs = Vec::with_capacity(compiled.nests.len());
    for nest in &compiled.nests {
        let r = execute(spec, nest, &env)?;
        let value = match env.get(&nest.einsum) {
            Some(old) => overlay(old, &r.output),
            None => r.output.clone(),
        };
        env.insert(nest.einsum.clone(), value);
        runs.push(r);
    }
    Ok(CascadeRun { tensors: env, runs })
}
