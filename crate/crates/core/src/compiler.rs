//! Lowering of mapped Einsums to interpretable loop nests.
//!
//! Every operand is transformed (swizzled, partitioned, flattened) ahead of
//! the loop so that its rank order follows the loop order. Each operand rank
//! is then accessed in one of three ways at a loop level:
//!
//! * driven: its fiber takes part in the level's co-iteration;
//! * driven with a range filter: an occupancy follower, whose fiber is
//!   restricted to the coordinate range of the leader's current chunk;
//! * looked up: its coordinate is computed from already bound variables
//!   (affine subscripts, constituents of a flattened rank).

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};

use serde::Serialize;

use crate::spec::cascade::{build_cascade, CascadeDag};
use crate::spec::ranks::{self, IterRank, Rewrite, SplitKind};
use crate::spec::{ComponentClass, Expr, Index, ProblemSpec};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("Einsum {einsum}: {msg}")]
pub struct CompileError {
    pub einsum: String,
    pub msg: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Tag {
    Offline,
    Online,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum Transform {
    Swizzle {
        from: Vec<String>,
        to: Vec<String>,
    },
    SplitShape {
        rank: String,
        size: usize,
        upper: String,
        lower: String,
    },
    SplitOccupancy {
        rank: String,
        size: usize,
        upper: String,
        lower: String,
    },
    Flatten {
        upper: String,
        lower: String,
        name: String,
    },
}

impl fmt::Display for Transform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Transform::Swizzle { from, to } => {
                write!(f, "swizzle [{}] -> [{}]", from.join(","), to.join(","))
            }
            Transform::SplitShape {
                rank,
                size,
                upper,
                lower,
            } => {
                write!(f, "split_shape {rank} by {size} -> {upper},{lower}")
            }
            Transform::SplitOccupancy {
                rank,
                size,
                upper,
                lower,
            } => {
                write!(f, "split_occupancy {rank} by {size} -> {upper},{lower}")
            }
            Transform::Flatten { upper, lower, name } => {
                write!(f, "flatten {upper},{lower} -> {name}")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TransformStep {
    pub tensor: String,
    pub transform: Transform,
    pub tag: Tag,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum CoIter {
    /// No operand fiber: iterate the full extent.
    Dense,
    Sequential,
    Intersect,
    Union,
    LeaderFollow,
}

impl CoIter {
    fn name(self) -> &'static str {
        match self {
            CoIter::Dense => "dense",
            CoIter::Sequential => "sequential",
            CoIter::Intersect => "intersect",
            CoIter::Union => "union",
            CoIter::LeaderFollow => "leader-follow",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum UpperKind {
    Shape {
        size: usize,
    },
    /// `parent` is the enclosing upper level of the same split chain.
    Occupancy {
        leader: String,
        parent: Option<usize>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LoopLevel {
    pub rank: String,
    /// Index variables bound at this level (empty for upper ranks).
    pub vars: Vec<String>,
    pub upper: Option<UpperKind>,
    /// Variables of the original rank(s) this level was derived from.
    pub chain_vars: Vec<String>,
    pub space: bool,
    pub coiter: CoIter,
    /// Operands with a rank driven at this level.
    pub drivers: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum RankAccess {
    Drive { filter: Option<usize> },
    Lookup { vars: Vec<String>, kind: LookupKind },
    Exists,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum LookupKind {
    Var,
    Sum,
    Tuple,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct OperandRank {
    /// Rank name in the transformed tree.
    pub name: String,
    /// Name used to find the rank's format entry.
    pub format_rank: String,
    /// Loop level accessing this rank (`usize::MAX` for existential ranks).
    pub level: usize,
    pub access: RankAccess,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Operand {
    pub tensor: String,
    /// Rank names of the stored tensor, mapped to the loop's names.
    pub stored: Vec<String>,
    pub ranks: Vec<OperandRank>,
    pub prelude: Vec<TransformStep>,
    /// Read for coordinates only (non-selected `take` operand).
    pub coord_only: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum Node {
    Operand(usize),
    Mul(Box<Node>, Box<Node>),
    Add(Box<Node>, Box<Node>),
    Sub(Box<Node>, Box<Node>),
    Take(Vec<Node>, usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct OutputPlan {
    pub tensor: String,
    /// Variables in the order the loop nest produces them.
    pub production: Vec<String>,
    /// Variables in the declared storage order.
    pub storage: Vec<String>,
    /// Declared rank name for each storage variable.
    pub storage_ranks: Vec<String>,
    pub swizzle: Option<TransformStep>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LoopNest {
    pub einsum: String,
    pub statement: String,
    pub levels: Vec<LoopLevel>,
    pub operands: Vec<Operand>,
    pub body: Node,
    pub output: OutputPlan,
    pub reduction: Vec<String>,
    /// Number of leading temporal levels before the first spatial one.
    pub prefix_len: usize,
}

impl LoopNest {
    pub fn level_of(&self, rank: &str) -> Option<usize> {
        self.levels.iter().position(|l| l.rank == rank)
    }

    /// Level binding variable `v`.
    pub fn var_level(&self, v: &str) -> Option<usize> {
        self.levels
            .iter()
            .position(|l| l.vars.iter().any(|x| x == v))
    }

    pub fn prelude(&self) -> impl Iterator<Item = &TransformStep> {
        self.operands
            .iter()
            .flat_map(|o| o.prelude.iter())
            .chain(self.output.swizzle.iter())
    }

    /// Swizzles that have to be performed while the cascade runs.
    pub fn online_swizzles(&self) -> Vec<&TransformStep> {
        self.prelude()
            .filter(|s| s.tag == Tag::Online && matches!(s.transform, Transform::Swizzle { .. }))
            .collect()
    }

    /// Stable textual rendering used by `--dump-ir`.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "einsum {}: {}", self.einsum, self.statement);
        for o in &self.operands {
            let _ = writeln!(
                s,
                "  operand {} stored [{}] -> [{}]{}",
                o.tensor,
                o.stored.join(","),
                o.ranks
                    .iter()
                    .map(|r| r.name.as_str())
                    .collect::<Vec<_>>()
                    .join(","),
                if o.coord_only { " coords-only" } else { "" }
            );
            for p in &o.prelude {
                let _ = writeln!(s, "    {} {}", tag_name(p.tag), p.transform);
            }
        }
        for (i, l) in self.levels.iter().enumerate() {
            let mut line = format!(
                "  L{i} {} {} {}",
                l.rank,
                if l.space { "space" } else { "time" },
                l.coiter.name()
            );
            if !l.drivers.is_empty() {
                let d: Vec<&str> = l
                    .drivers
                    .iter()
                    .map(|&d| self.operands[d].tensor.as_str())
                    .collect();
                let _ = write!(line, " [{}]", d.join(","));
            }
            for o in &self.operands {
                for r in &o.ranks {
                    if r.level != i {
                        continue;
                    }
                    match &r.access {
                        RankAccess::Drive { filter: Some(f) } => {
                            let _ = write!(line, " {}.{}@range(L{f})", o.tensor, r.name);
                        }
                        RankAccess::Lookup { vars, .. } => {
                            let _ =
                                write!(line, " {}.{}@lookup({})", o.tensor, r.name, vars.join("+"));
                        }
                        _ => {}
                    }
                }
            }
            match &l.upper {
                Some(UpperKind::Shape { size }) => {
                    let _ = write!(line, " shape={size}");
                }
                Some(UpperKind::Occupancy { leader, .. }) => {
                    let _ = write!(line, " leader={leader}");
                }
                None => {}
            }
            s.push_str(&line);
            s.push('\n');
        }
        if !self.reduction.is_empty() {
            let _ = writeln!(s, "  reduce [{}]", self.reduction.join(","));
        }
        let _ = writeln!(
            s,
            "  output {} produce [{}] store [{}]",
            self.output.tensor,
            self.output.production.join(","),
            self.output.storage.join(",")
        );
        if let Some(sw) = &self.output.swizzle {
            let _ = writeln!(s, "    {} {}", tag_name(sw.tag), sw.transform);
        }
        s
    }
}

fn tag_name(t: Tag) -> &'static str {
    match t {
        Tag::Offline => "offline",
        Tag::Online => "online",
    }
}

/// Rewritten iteration space and the ordered rewrite steps of one Einsum.
pub fn apply_partitioning(
    spec: &ProblemSpec,
    einsum: &str,
) -> Result<(Vec<IterRank>, Vec<Rewrite>), CompileError> {
    let e = spec.einsum(einsum).ok_or_else(|| CompileError {
        einsum: einsum.into(),
        msg: "no such Einsum".into(),
    })?;
    let parts = spec
        .mapping
        .partitioning
        .get(einsum)
        .cloned()
        .unwrap_or_default();
    ranks::rewrite(&e.iteration_ranks(), &parts, &spec.shapes).map_err(|msg| CompileError {
        einsum: einsum.into(),
        msg,
    })
}

/// Coordinate of an affine subscript, or `None` when it falls outside
/// `extent`.
pub fn lower_index(index: &Index, env: &BTreeMap<String, usize>, extent: usize) -> Option<usize> {
    let c: usize = index
        .vars()
        .iter()
        .map(|v| env.get(v).copied().unwrap_or(0))
        .sum();
    (c < extent).then_some(c)
}

#[derive(Debug, Clone)]
struct Entry {
    /// Rank name in the (partially) transformed tensor.
    tname: String,
    /// Iteration-space rank this entry currently tracks.
    alias: String,
    /// Stored-order positions this entry derives from.
    origins: Vec<usize>,
    vars: Vec<String>,
    static_: bool,
    follower_of: Vec<String>,
    lookup: Option<LookupKind>,
    existential: bool,
}

struct Ctx<'a> {
    einsum: &'a str,
    loop_order: &'a [String],
    var_level: BTreeMap<String, usize>,
}

impl Ctx<'_> {
    fn err<T>(&self, msg: impl Into<String>) -> Result<T, CompileError> {
        Err(CompileError {
            einsum: self.einsum.into(),
            msg: msg.into(),
        })
    }

    fn level(&self, rank: &str) -> Option<usize> {
        self.loop_order.iter().position(|r| r == rank)
    }
}

/// Plans the prelude of one operand: which transforms bring its stored
/// order to one concordant with the loop order, and how each resulting rank
/// is accessed.
#[allow(clippy::too_many_arguments)]
fn plan_operand(
    ctx: &Ctx,
    tensor: &str,
    indices: &[Index],
    declared: &[String],
    stored_order: &[String],
    steps: &[Rewrite],
    existential: &[String],
    online: bool,
) -> Result<Operand, CompileError> {
    // stored ranks, renamed to the loop's variable names
    let mut entries: Vec<Entry> = Vec::new();
    let mut stored = Vec::new();
    for (i, r) in stored_order.iter().enumerate() {
        let pos = declared
            .iter()
            .position(|d| d == r)
            .expect("rank-order validated");
        let idx = &indices[pos];
        let (name, lookup) = match idx {
            Index::Var(v) => (v.to_uppercase(), None),
            Index::Sum(_) => (r.clone(), Some(LookupKind::Sum)),
        };
        if entries.iter().any(|e| e.tname == name) {
            return ctx.err(format!("{tensor} is indexed twice by the same variable"));
        }
        stored.push(name.clone());
        entries.push(Entry {
            alias: name.clone(),
            tname: name,
            origins: vec![i],
            vars: idx.vars().to_vec(),
            static_: true,
            follower_of: Vec::new(),
            lookup,
            existential: idx.vars().iter().any(|v| existential.contains(v)),
        });
    }
    let rename_fmt = |working: &str| -> String {
        for (e, decl) in stored.iter().zip(stored_order) {
            if working == e {
                return decl.clone();
            }
            if let Some(rest) = working.strip_prefix(e.as_str()) {
                if !rest.is_empty() && rest.chars().all(|c| c.is_ascii_digit()) {
                    return format!("{decl}{rest}");
                }
            }
        }
        working.to_string()
    };

    // pass 1: follow the rewrites without ordering to learn final entries
    let simulate = |entries: &mut Vec<Entry>,
                    emit: &mut Option<(&mut Vec<TransformStep>, &mut Vec<String>)>|
     -> Result<(), CompileError> {
        for step in steps {
            match step {
                Rewrite::Split {
                    rank,
                    kind,
                    size,
                    upper,
                    lower,
                } => {
                    let Some(at) = entries
                        .iter()
                        .position(|e| e.alias == *rank && e.lookup.is_none())
                    else {
                        continue;
                    };
                    let e = entries[at].clone();
                    let leader_here = match kind {
                        SplitKind::Shape => true,
                        SplitKind::Occupancy { leader } => leader == tensor,
                    };
                    if leader_here && e.static_ {
                        let t = match kind {
                            SplitKind::Shape => Transform::SplitShape {
                                rank: e.tname.clone(),
                                size: *size,
                                upper: upper.clone(),
                                lower: lower.clone(),
                            },
                            SplitKind::Occupancy { .. } => Transform::SplitOccupancy {
                                rank: e.tname.clone(),
                                size: *size,
                                upper: upper.clone(),
                                lower: lower.clone(),
                            },
                        };
                        if let Some((out, order)) = emit {
                            let p = order.iter().position(|n| *n == e.tname).unwrap();
                            order.splice(p..=p, [upper.clone(), lower.clone()]);
                            out.push(TransformStep {
                                tensor: tensor.into(),
                                transform: t,
                                tag: if online { Tag::Online } else { Tag::Offline },
                            });
                        }
                        let up = Entry {
                            tname: upper.clone(),
                            alias: upper.clone(),
                            vars: Vec::new(),
                            existential: false,
                            ..e.clone()
                        };
                        entries[at] = Entry {
                            tname: lower.clone(),
                            alias: lower.clone(),
                            ..e
                        };
                        entries.insert(at, up);
                    } else if let SplitKind::Occupancy { .. } = kind {
                        let ent = &mut entries[at];
                        ent.static_ = false;
                        ent.alias = lower.clone();
                        ent.follower_of.push(upper.clone());
                    } else {
                        return Err(CompileError {
                            einsum: ctx.einsum.into(),
                            msg: format!("cannot shape-split follower rank {rank} of {tensor}"),
                        });
                    }
                }
                Rewrite::Flatten { upper, lower, name } => {
                    let a = entries
                        .iter()
                        .position(|e| e.alias == *upper && e.lookup.is_none());
                    let b = entries
                        .iter()
                        .position(|e| e.alias == *lower && e.lookup.is_none());
                    match (a, b) {
                        (Some(a), Some(b)) => {
                            if !entries[a].static_ || !entries[b].static_ {
                                return Err(CompileError {
                                    einsum: ctx.einsum.into(),
                                    msg: format!(
                                        "cannot flatten occupancy-follower ranks of {tensor}"
                                    ),
                                });
                            }
                            if let Some((out, order)) = emit {
                                let ta = entries[a].tname.clone();
                                let tb = entries[b].tname.clone();
                                let pa = order.iter().position(|n| *n == ta).unwrap();
                                let pb = order.iter().position(|n| *n == tb).unwrap();
                                if pb != pa + 1 {
                                    let from = order.clone();
                                    order.remove(pb);
                                    let pa = order.iter().position(|n| *n == ta).unwrap();
                                    order.insert(pa + 1, tb.clone());
                                    out.push(TransformStep {
                                        tensor: tensor.into(),
                                        transform: Transform::Swizzle {
                                            from,
                                            to: order.clone(),
                                        },
                                        tag: if online { Tag::Online } else { Tag::Offline },
                                    });
                                }
                                let pa = order.iter().position(|n| *n == ta).unwrap();
                                order.remove(pa + 1);
                                order[pa] = name.clone();
                                out.push(TransformStep {
                                    tensor: tensor.into(),
                                    transform: Transform::Flatten {
                                        upper: ta,
                                        lower: tb,
                                        name: name.clone(),
                                    },
                                    tag: if online { Tag::Online } else { Tag::Offline },
                                });
                            }
                            let eb = entries[b].clone();
                            let ea = &mut entries[a];
                            ea.tname = name.clone();
                            ea.alias = name.clone();
                            ea.origins.extend(eb.origins);
                            ea.vars.extend(eb.vars);
                            entries.remove(b);
                        }
                        (Some(x), None) | (None, Some(x)) => {
                            if !entries[x].static_ {
                                return Err(CompileError {
                                    einsum: ctx.einsum.into(),
                                    msg: format!(
                                        "cannot flatten occupancy-follower rank of {tensor}"
                                    ),
                                });
                            }
                            entries[x].lookup = Some(LookupKind::Var);
                            entries[x].alias = String::new();
                        }
                        (None, None) => {}
                    }
                }
            }
        }
        Ok(())
    };

    let mut sim = entries.clone();
    simulate(&mut sim, &mut None)?;

    let entry_level = |e: &Entry| -> Result<usize, CompileError> {
        if e.existential {
            return Ok(usize::MAX);
        }
        if e.lookup.is_some() {
            return e
                .vars
                .iter()
                .map(|v| {
                    ctx.var_level.get(v).copied().ok_or_else(|| CompileError {
                        einsum: ctx.einsum.into(),
                        msg: format!(
                            "subscript variable {v} of {tensor} is not bound by any loop rank"
                        ),
                    })
                })
                .try_fold(0, |m, l| l.map(|l| m.max(l)));
        }
        ctx.level(&e.alias).ok_or_else(|| CompileError {
            einsum: ctx.einsum.into(),
            msg: format!("rank {} of {tensor} is not in the loop order", e.alias),
        })
    };
    let mut min_level = vec![usize::MAX; stored_order.len()];
    for e in &sim {
        let l = entry_level(e)?;
        for &o in &e.origins {
            min_level[o] = min_level[o].min(l);
        }
    }

    // pass 2: swizzle to the base order, then emit the rewrites
    let mut base: Vec<usize> = (0..stored_order.len()).collect();
    base.sort_by_key(|&i| min_level[i]);
    let mut prelude = Vec::new();
    let tag = if online { Tag::Online } else { Tag::Offline };
    let mut order: Vec<String> = stored.clone();
    let base_names: Vec<String> = base.iter().map(|&i| stored[i].clone()).collect();
    if base_names != order {
        prelude.push(TransformStep {
            tensor: tensor.into(),
            transform: Transform::Swizzle {
                from: order.clone(),
                to: base_names.clone(),
            },
            tag,
        });
        order = base_names;
    }
    let mut ents: Vec<Entry> = base.iter().map(|&i| entries[i].clone()).collect();
    simulate(&mut ents, &mut Some((&mut prelude, &mut order)))?;

    // final order: by access level, drives before lookups at one level
    let mut fin: Vec<(usize, u8, Entry)> = Vec::new();
    for e in ents {
        let l = entry_level(&e)?;
        let kind = if e.lookup.is_some() { 1 } else { 0 };
        fin.push((l, kind, e));
    }
    fin.sort_by_key(|(l, k, _)| (*l, *k));
    let mut by_level: BTreeMap<usize, usize> = BTreeMap::new();
    for (l, k, e) in &fin {
        if *k == 0 && *l != usize::MAX {
            let n = by_level.entry(*l).or_default();
            *n += 1;
            if *n > 1 {
                return ctx.err(format!(
                    "two ranks of {tensor} map to loop rank {} ({})",
                    ctx.loop_order[*l], e.tname
                ));
            }
        }
    }
    let final_names: Vec<String> = fin.iter().map(|(_, _, e)| e.tname.clone()).collect();
    // An occupancy split led here yields one set of boundaries per fiber of
    // the ranks above it; those ranks must stay above the upper rank.
    for s in steps {
        let Rewrite::Split {
            rank,
            kind: SplitKind::Occupancy { leader },
            upper,
            ..
        } = s
        else {
            continue;
        };
        let (Some(p), Some(q)) = (
            order.iter().position(|n| n == upper),
            final_names.iter().position(|n| n == upper),
        ) else {
            continue;
        };
        if leader != tensor {
            continue;
        }
        if let Some(moved) = order[..p].iter().find(|r| !final_names[..q].contains(r)) {
            return ctx.err(format!(
                "occupancy partition of {rank} led by {tensor}: rank {moved} is above {upper} in {tensor} \
                 but iterated below it, so the partition boundaries are not unique"
            ));
        }
    }
    if final_names != order {
        prelude.push(TransformStep {
            tensor: tensor.into(),
            transform: Transform::Swizzle {
                from: order.clone(),
                to: final_names.clone(),
            },
            tag,
        });
    }
    let ranks = fin
        .into_iter()
        .map(|(level, _, e)| {
            let access = if e.existential {
                RankAccess::Exists
            } else if let Some(kind) = e.lookup {
                RankAccess::Lookup {
                    vars: e.vars.clone(),
                    kind: if e.vars.len() > 1 && kind == LookupKind::Var {
                        LookupKind::Tuple
                    } else {
                        kind
                    },
                }
            } else {
                RankAccess::Drive {
                    filter: e.follower_of.last().and_then(|u| ctx.level(u)),
                }
            };
            OperandRank {
                format_rank: rename_fmt(&e.tname),
                name: e.tname,
                level,
                access,
            }
        })
        .collect();
    Ok(Operand {
        tensor: tensor.into(),
        stored,
        ranks,
        prelude: merge_swizzles(prelude),
        coord_only: false,
    })
}

/// Drops identity swizzles and fuses back-to-back ones.
fn merge_swizzles(steps: Vec<TransformStep>) -> Vec<TransformStep> {
    let mut out: Vec<TransformStep> = Vec::new();
    for s in steps {
        if let Transform::Swizzle { from, to } = &s.transform {
            if from == to {
                continue;
            }
            if let Some(TransformStep {
                transform: Transform::Swizzle { to: prev_to, .. },
                ..
            }) = out.last_mut()
            {
                *prev_to = to.clone();
                continue;
            }
        }
        out.push(s);
    }
    out
}

/// Compiles the Einsum at position `idx` of the cascade. `online` reports
/// whether a tensor is produced inside the cascade before this Einsum.
pub fn compile(
    spec: &ProblemSpec,
    idx: usize,
    online: &dyn Fn(&str) -> bool,
) -> Result<LoopNest, CompileError> {
    let e = &spec.expressions[idx];
    let name = e.name().to_string();
    let err = |msg: String| CompileError {
        einsum: name.clone(),
        msg,
    };
    let (iter_ranks, steps) = apply_partitioning(spec, &name)?;
    let loop_order = spec
        .mapping
        .loop_order
        .get(&name)
        .cloned()
        .ok_or_else(|| err("no loop order".into()))?;
    let st = spec
        .mapping
        .spacetime
        .get(&name)
        .cloned()
        .unwrap_or_default();

    let mut var_level = BTreeMap::new();
    let mut levels = Vec::new();
    for (li, r) in loop_order.iter().enumerate() {
        let ir = iter_ranks.iter().find(|x| x.name == *r).ok_or_else(|| {
            err(format!(
                "loop rank {r} is not in the partitioned iteration space"
            ))
        })?;
        let vars: Vec<String> = ir.bases.iter().map(|b| b.to_lowercase()).collect();
        for v in &vars {
            var_level.insert(v.clone(), li);
        }
        levels.push(LoopLevel {
            rank: r.clone(),
            vars,
            upper: None,
            chain_vars: Vec::new(),
            space: st.space.contains(r),
            coiter: CoIter::Dense,
            drivers: Vec::new(),
        });
    }
    // upper-rank kinds, linking nested occupancy splits
    let mut chain: BTreeMap<String, Vec<String>> = e
        .iteration_ranks()
        .into_iter()
        .map(|r| (r.clone(), vec![r.to_lowercase()]))
        .collect();
    for s in &steps {
        match s {
            Rewrite::Split {
                rank, upper, lower, ..
            } => {
                let v = chain.get(rank).cloned().unwrap_or_default();
                chain.insert(upper.clone(), v.clone());
                chain.insert(lower.clone(), v);
            }
            Rewrite::Flatten { upper, lower, name } => {
                let mut v = chain.get(upper).cloned().unwrap_or_default();
                v.extend(chain.get(lower).cloned().unwrap_or_default());
                chain.insert(name.clone(), v);
            }
        }
    }
    for l in levels.iter_mut() {
        l.chain_vars = chain
            .get(&l.rank)
            .cloned()
            .unwrap_or_else(|| l.vars.clone());
    }
    let mut chain_parent: BTreeMap<String, usize> = BTreeMap::new();
    for s in &steps {
        if let Rewrite::Split {
            rank,
            kind,
            size,
            upper,
            lower,
        } = s
        {
            let Some(ul) = levels.iter().position(|l| l.rank == *upper) else {
                continue;
            };
            levels[ul].upper = Some(match kind {
                SplitKind::Shape => UpperKind::Shape { size: *size },
                SplitKind::Occupancy { leader } => UpperKind::Occupancy {
                    leader: leader.clone(),
                    parent: chain_parent.get(rank).copied(),
                },
            });
            if matches!(kind, SplitKind::Occupancy { .. }) {
                chain_parent.insert(lower.clone(), ul);
            }
        }
    }
    let ctx = Ctx {
        einsum: &name,
        loop_order: &loop_order,
        var_level,
    };

    let existential = e.existential_vars();
    let mut operands = Vec::new();
    let mut coord_only = Vec::new();
    fn mark(e: &Expr, coords: bool, out: &mut Vec<bool>) {
        match e {
            Expr::Access(_) => out.push(coords),
            Expr::Mul(a, b) | Expr::Add(a, b) | Expr::Sub(a, b) => {
                mark(a, coords, out);
                mark(b, coords, out);
            }
            Expr::Take(args, pick) => {
                for (i, a) in args.iter().enumerate() {
                    mark(a, coords || i != *pick, out);
                }
            }
        }
    }
    mark(&e.expr, false, &mut coord_only);
    for (a, co) in e.expr.accesses().into_iter().zip(coord_only) {
        let declared = &spec.declaration[&a.tensor];
        let stored = spec
            .mapping
            .rank_order
            .get(&a.tensor)
            .cloned()
            .unwrap_or_else(|| declared.clone());
        let mut op = plan_operand(
            &ctx,
            &a.tensor,
            &a.indices,
            declared,
            &stored,
            &steps,
            &existential,
            online(&a.tensor),
        )?;
        op.coord_only = co;
        operands.push(op);
    }
    for s in &steps {
        if let Rewrite::Split {
            kind: SplitKind::Occupancy { leader },
            rank,
            ..
        } = s
        {
            if !operands.iter().any(|o| o.tensor == *leader) {
                return Err(err(format!(
                    "occupancy leader {leader} of rank {rank} is not an operand"
                )));
            }
        }
    }
    for (oi, o) in operands.iter().enumerate() {
        for r in &o.ranks {
            if matches!(r.access, RankAccess::Drive { .. }) {
                levels[r.level].drivers.push(oi);
            }
        }
    }

    let mut next = 0;
    let body = lower_expr(&e.expr, &mut next);
    for (li, l) in levels.iter_mut().enumerate() {
        l.coiter = select_coiterator(&body, &operands, li);
    }

    // output
    let out_vars: Vec<String> = e
        .output
        .indices
        .iter()
        .map(|i| i.as_var().expect("validated").to_string())
        .collect();
    let mut production = out_vars.clone();
    production.sort_by_key(|v| ctx.var_level.get(v).copied().unwrap_or(usize::MAX));
    let declared = &spec.declaration[e.name()];
    let storage_ranks = spec
        .mapping
        .rank_order
        .get(e.name())
        .cloned()
        .unwrap_or_else(|| declared.clone());
    let storage: Vec<String> = storage_ranks
        .iter()
        .map(|r| out_vars[declared.iter().position(|d| d == r).unwrap()].clone())
        .collect();
    let swizzle = (production != storage).then(|| TransformStep {
        tensor: name.clone(),
        transform: Transform::Swizzle {
            from: production.iter().map(|v| v.to_uppercase()).collect(),
            to: storage.iter().map(|v| v.to_uppercase()).collect(),
        },
        tag: Tag::Online,
    });
    let reduction: Vec<String> = levels
        .iter()
        .filter(|l| l.chain_vars.iter().any(|v| !out_vars.contains(v)))
        .map(|l| l.rank.clone())
        .collect();
    let prefix_len = levels.iter().position(|l| l.space).unwrap_or(levels.len());
    Ok(LoopNest {
        einsum: name.clone(),
        statement: e.to_string(),
        levels,
        operands,
        body,
        output: OutputPlan {
            tensor: name,
            production,
            storage,
            storage_ranks,
            swizzle,
        },
        reduction,
        prefix_len,
    })
}

fn lower_expr(e: &Expr, next: &mut usize) -> Node {
    match e {
        Expr::Access(_) => {
            *next += 1;
            Node::Operand(*next - 1)
        }
        Expr::Mul(a, b) => Node::Mul(Box::new(lower_expr(a, next)), Box::new(lower_expr(b, next))),
        Expr::Add(a, b) => Node::Add(Box::new(lower_expr(a, next)), Box::new(lower_expr(b, next))),
        Expr::Sub(a, b) => Node::Sub(Box::new(lower_expr(a, next)), Box::new(lower_expr(b, next))),
        Expr::Take(args, pick) => {
            Node::Take(args.iter().map(|a| lower_expr(a, next)).collect(), *pick)
        }
    }
}

/// Co-iteration kind at one loop level: multiplied or `take`n operands
/// intersect, added or subtracted ones union.
pub fn select_coiterator(body: &Node, operands: &[Operand], level: usize) -> CoIter {
    #[derive(PartialEq)]
    enum S {
        None,
        One,
        Int(bool),
        Uni,
    }
    let participates = |o: usize| operands[o].ranks.iter().any(|r| r.level == level);
    let filtered = |o: usize| {
        operands[o]
            .ranks
            .iter()
            .any(|r| r.level == level && !matches!(r.access, RankAccess::Drive { filter: None }))
    };
    fn walk(n: &Node, p: &dyn Fn(usize) -> bool, f: &dyn Fn(usize) -> bool) -> S {
        match n {
            Node::Operand(o) => {
                if p(*o) {
                    if f(*o) {
                        S::Int(true)
                    } else {
                        S::One
                    }
                } else {
                    S::None
                }
            }
            Node::Mul(a, b) => join(walk(a, p, f), walk(b, p, f), true),
            Node::Add(a, b) | Node::Sub(a, b) => join(walk(a, p, f), walk(b, p, f), false),
            Node::Take(args, _) => args
                .iter()
                .map(|a| walk(a, p, f))
                .reduce(|x, y| join(x, y, true))
                .unwrap_or(S::None),
        }
    }
    fn join(a: S, b: S, mul: bool) -> S {
        match (a, b) {
            (S::None, x) | (x, S::None) => x,
            (S::Int(lf), S::One) | (S::One, S::Int(lf)) if mul => S::Int(lf),
            (S::Int(x), S::Int(y)) if mul => S::Int(x || y),
            (S::One, S::One) if mul => S::Int(false),
            _ if mul => S::Int(false),
            _ => S::Uni,
        }
    }
    match walk(body, &participates, &filtered) {
        S::None => CoIter::Dense,
        S::One => CoIter::Sequential,
        S::Int(true) => CoIter::LeaderFollow,
        S::Int(false) => CoIter::Intersect,
        S::Uni => CoIter::Union,
    }
}

/// Ordered blocks of Einsum indices run with overlapped execution.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FusionSchedule {
    pub blocks: Vec<Vec<usize>>,
}

impl FusionSchedule {
    pub fn block_of(&self, e: usize) -> usize {
        self.blocks
            .iter()
            .position(|b| b.contains(&e))
            .expect("every Einsum is scheduled")
    }
}

/// Loop ranks before the first spatial rank.
pub fn temporal_prefix(spec: &ProblemSpec, einsum: &str) -> Vec<String> {
    let lo = &spec.mapping.loop_order[einsum];
    let st = &spec.mapping.spacetime[einsum];
    lo.iter()
        .take_while(|r| !st.space.contains(r))
        .cloned()
        .collect()
}

/// Non-storage components bound by an Einsum.
pub fn compute_components(spec: &ProblemSpec, einsum: &str) -> Vec<String> {
    let Some(b) = spec.binding.einsums.get(einsum) else {
        return Vec::new();
    };
    let Some(topo) = spec.architecture.topologies.get(&b.topology) else {
        return Vec::new();
    };
    b.components
        .keys()
        .filter(|c| {
            topo.component(c)
                .map(|(_, _, comp)| {
                    !matches!(
                        comp.class,
                        ComponentClass::Dram { .. } | ComponentClass::Buffer { .. }
                    )
                })
                .unwrap_or(false)
        })
        .cloned()
        .collect()
}

/// Whether two Einsums may share a fused block.
pub fn fusable(spec: &ProblemSpec, a: &str, b: &str) -> bool {
    let topo = |e: &str| spec.binding.einsums.get(e).map(|b| b.topology.clone());
    if topo(a) != topo(b) {
        return false;
    }
    if temporal_prefix(spec, a) != temporal_prefix(spec, b) {
        return false;
    }
    let ca = compute_components(spec, a);
    compute_components(spec, b).iter().all(|c| !ca.contains(c))
}

/// Greedy fusion in topological order: each Einsum joins the current block
/// when it is fusable with every member, otherwise it opens a new block.
pub fn fusion_schedule(spec: &ProblemSpec, dag: &CascadeDag) -> FusionSchedule {
    let mut blocks: Vec<Vec<usize>> = Vec::new();
    for &i in &dag.topo_order {
        let name = &dag.nodes[i];
        match blocks.last_mut() {
            Some(b) if b.iter().all(|&j| fusable(spec, &dag.nodes[j], name)) => b.push(i),
            _ => blocks.push(vec![i]),
        }
    }
    FusionSchedule { blocks }
}

/// The compiled cascade: dependency graph, one loop nest per Einsum (in
/// listed order), and the fusion schedule.
#[derive(Debug, Clone, Serialize)]
pub struct CompiledCascade {
    pub dag: CascadeDag,
    pub nests: Vec<LoopNest>,
    pub schedule: FusionSchedule,
}

impl CompiledCascade {
    pub fn dump(&self) -> String {
        let mut s = String::new();
        for (bi, b) in self.schedule.blocks.iter().enumerate() {
            let names: Vec<&str> = b.iter().map(|&i| self.nests[i].einsum.as_str()).collect();
            let _ = writeln!(s, "block {bi}: [{}]", names.join(", "));
        }
        for n in &self.nests {
            s.push_str(&n.dump());
        }
        s
    }
}

pub fn compile_cascade(spec: &ProblemSpec) -> Result<CompiledCascade, CompileError> {
    let dag = build_cascade(spec).map_err(|e| CompileError {
        einsum: String::new(),
        msg: e.to_string(),
    })?;
    let mut nests = Vec::new();
    for i in 0..spec.expressions.len() {
        let earlier: Vec<&str> = spec.expressions[..i].iter().map(|e| e.name()).collect();
        nests.push(compile(spec, i, &|t| earlier.contains(&t))?);
    }
    let schedule = fusion_schedule(spec, &dag);
    Ok(CompiledCascade {
        dag,
        nests,
        schedule,
    })
}
