//! The five declarative specifications (einsum, mapping, format,
//! architecture, binding) plus the optional `operators` section.
//!
//! See `docs/grammar.md` for the accepted concrete syntax.

pub mod cascade;
pub mod doc;
pub mod expr;
pub mod ranks;
pub mod validate;

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};

use crate::semiring::{Op, Semiring};
pub use doc::{DocError, Node, Pos};
pub use expr::{Access, Expr, Index, Statement};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SpecError {
    #[error("syntax error at {0}")]
    Syntax(#[from] DocError),
    #[error("{pos}: {msg}")]
    At { pos: Pos, msg: String },
}

fn err<T>(pos: Pos, msg: impl Into<String>) -> Result<T, SpecError> {
    Err(SpecError::At {
        pos,
        msg: msg.into(),
    })
}

/// One Einsum of the cascade, identified by its output tensor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EinsumDecl {
    pub output: Access,
    pub expr: Expr,
}

impl EinsumDecl {
    pub fn name(&self) -> &str {
        &self.output.tensor
    }

    pub fn inputs(&self) -> Vec<&str> {
        let mut v: Vec<&str> = Vec::new();
        for a in self.expr.accesses() {
            if !v.contains(&a.tensor.as_str()) {
                v.push(&a.tensor);
            }
        }
        v
    }

    /// Index variables that carry values into the result: everything except
    /// variables used only by the non-selected operands of `take`.
    pub fn iteration_vars(&self) -> Vec<String> {
        fn value_vars(e: &Expr, out: &mut Vec<String>) {
            match e {
                Expr::Access(a) => {
                    for i in &a.indices {
                        for v in i.vars() {
                            if !out.contains(v) {
                                out.push(v.clone());
                            }
                        }
                    }
                }
                Expr::Mul(a, b) | Expr::Add(a, b) | Expr::Sub(a, b) => {
                    value_vars(a, out);
                    value_vars(b, out);
                }
                Expr::Take(args, pick) => value_vars(&args[*pick], out),
            }
        }
        let mut vars: Vec<String> = Vec::new();
        for i in &self.output.indices {
            for v in i.vars() {
                if !vars.contains(v) {
                    vars.push(v.clone());
                }
            }
        }
        value_vars(&self.expr, &mut vars);
        vars
    }

    /// Ranks of the iteration space (upper-cased variables): output ranks
    /// first, in output order, then the rest alphabetically.
    pub fn iteration_ranks(&self) -> Vec<String> {
        let out: Vec<String> = self
            .output
            .indices
            .iter()
            .flat_map(|i| i.vars().iter().map(|v| v.to_uppercase()))
            .collect();
        let mut rest: Vec<String> = self
            .iteration_vars()
            .into_iter()
            .map(|v| v.to_uppercase())
            .filter(|r| !out.contains(r))
            .collect();
        rest.sort();
        let mut all = Vec::new();
        for r in out.into_iter().chain(rest) {
            if !all.contains(&r) {
                all.push(r);
            }
        }
        all
    }

    /// Variables bound only through `take`'s non-selected operands: they
    /// are not iterated, the operand only has to be non-empty below them.
    pub fn existential_vars(&self) -> Vec<String> {
        let it = self.iteration_vars();
        let mut out: Vec<String> = self
            .expr
            .vars()
            .into_iter()
            .filter(|v| !it.contains(v))
            .collect();
        out.sort();
        out
    }
}

impl fmt::Display for EinsumDecl {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} = {}", self.output, self.expr)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Size {
    Num(usize),
    Sym(String),
}

impl fmt::Display for Size {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Size::Num(n) => write!(f, "{n}"),
            Size::Sym(s) => f.write_str(s),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Directive {
    UniformShape(Size),
    UniformOccupancy { leader: String, size: Size },
    Flatten,
}

impl fmt::Display for Directive {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Directive::UniformShape(s) => write!(f, "uniform_shape({s})"),
            Directive::UniformOccupancy { leader, size } => {
                write!(f, "uniform_occupancy({leader}.{size})")
            }
            Directive::Flatten => f.write_str("flatten()"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionEntry {
    /// One rank, or the tuple of ranks a `flatten()` merges.
    pub ranks: Vec<String>,
    pub directives: Vec<Directive>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Spacetime {
    pub space: Vec<String>,
    pub time: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MappingDecl {
    pub rank_order: BTreeMap<String, Vec<String>>,
    pub partitioning: BTreeMap<String, Vec<PartitionEntry>>,
    pub loop_order: BTreeMap<String, Vec<String>>,
    pub spacetime: BTreeMap<String, Spacetime>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FormatKind {
    U,
    C,
    B,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Layout {
    #[default]
    StructOfArrays,
    ArrayOfStructs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankFormat {
    pub kind: FormatKind,
    pub layout: Layout,
    pub cbits: u32,
    pub pbits: u32,
    pub fhbits: u32,
}

impl RankFormat {
    pub fn new(kind: FormatKind, cbits: u32, pbits: u32) -> Self {
        RankFormat {
            kind,
            layout: Layout::StructOfArrays,
            cbits,
            pbits,
            fhbits: 0,
        }
    }
}

/// Per-rank formats of one named configuration, in listed order.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TensorFormat {
    pub ranks: Vec<(String, RankFormat)>,
}

impl TensorFormat {
    pub fn get(&self, rank: &str) -> Option<&RankFormat> {
        self.ranks.iter().find(|(r, _)| r == rank).map(|(_, f)| f)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FormatDecl {
    pub tensors: BTreeMap<String, BTreeMap<String, TensorFormat>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BufferKind {
    Buffet,
    Cache,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum IntersectKind {
    TwoFinger,
    LeaderFollower,
    SkipAhead,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MergeOrder {
    Fifo,
    Opt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ComputeKind {
    Mul,
    Add,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ComponentClass {
    /// `bandwidth` in GB/s.
    Dram {
        bandwidth: f64,
    },
    /// `width` is the line/row size in bytes, `bandwidth` bytes per cycle.
    Buffer {
        kind: BufferKind,
        width: usize,
        depth: usize,
        bandwidth: f64,
    },
    Intersection {
        kind: IntersectKind,
        leader: Option<String>,
    },
    Merger {
        inputs: usize,
        comparator_radix: usize,
        outputs: usize,
        order: MergeOrder,
        reduce: bool,
    },
    Compute {
        kind: ComputeKind,
    },
}

impl ComponentClass {
    pub fn class_name(&self) -> &'static str {
        match self {
            ComponentClass::Dram { .. } => "DRAM",
            ComponentClass::Buffer {
                kind: BufferKind::Cache,
                ..
            } => "Cache",
            ComponentClass::Buffer { .. } => "Buffet",
            ComponentClass::Intersection { .. } => "Intersection",
            ComponentClass::Merger { .. } => "Merger",
            ComponentClass::Compute { .. } => "Compute",
        }
    }

    pub fn is_storage(&self) -> bool {
        matches!(
            self,
            ComponentClass::Dram { .. } | ComponentClass::Buffer { .. }
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub name: String,
    pub class: ComponentClass,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Level {
    pub name: String,
    /// Spatial fanout of this level relative to its parent.
    pub num: usize,
    pub components: Vec<Component>,
}

/// A topology: levels from the root (outermost) inwards.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Topology {
    pub levels: Vec<Level>,
}

impl Topology {
    /// Components with their level depth and total instance count.
    pub fn components(&self) -> impl Iterator<Item = (usize, usize, &Component)> {
        let mut fan = 1;
        self.levels.iter().enumerate().flat_map(move |(d, l)| {
            fan *= l.num.max(1);
            let f = fan;
            l.components.iter().map(move |c| (d, f, c))
        })
    }

    pub fn component(&self, name: &str) -> Option<(usize, usize, &Component)> {
        self.components().find(|(_, _, c)| c.name == name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchDecl {
    /// Clock frequency in Hz.
    pub clock: f64,
    pub topologies: BTreeMap<String, Topology>,
}

impl Default for ArchDecl {
    fn default() -> Self {
        ArchDecl {
            clock: 1e9,
            topologies: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DatumType {
    Coord,
    Payload,
    Elem,
}

/// One binding entry; absent fields match everything.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct BindEntry {
    pub tensor: Option<String>,
    pub config: Option<String>,
    pub rank: Option<String>,
    pub kind: Option<DatumType>,
    pub evict_on: Option<String>,
    /// For compute units: `mul` or `add`.
    pub op: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct EinsumBinding {
    pub topology: String,
    pub components: BTreeMap<String, Vec<BindEntry>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct BindingDecl {
    pub einsums: BTreeMap<String, EinsumBinding>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ProblemSpec {
    pub declaration: BTreeMap<String, Vec<String>>,
    pub expressions: Vec<EinsumDecl>,
    /// Extents of ranks (and symbolic partition sizes) fixed in the spec.
    pub shapes: BTreeMap<String, usize>,
    pub operators: Semiring,
    pub mapping: MappingDecl,
    pub format: FormatDecl,
    pub architecture: ArchDecl,
    pub binding: BindingDecl,
}

impl ProblemSpec {
    pub fn einsum(&self, name: &str) -> Option<&EinsumDecl> {
        self.expressions.iter().find(|e| e.name() == name)
    }

    /// Tensors read before any Einsum listed earlier writes them.
    pub fn external_inputs(&self) -> Vec<String> {
        let mut written: Vec<&str> = Vec::new();
        let mut out: Vec<String> = Vec::new();
        for e in &self.expressions {
            for t in e.inputs() {
                if !written.contains(&t) && !out.iter().any(|o| o == t) {
                    out.push(t.to_string());
                }
            }
            written.push(e.name());
        }
        out
    }

    /// Tensors written by some Einsum.
    pub fn intermediates(&self) -> Vec<String> {
        self.expressions
            .iter()
            .map(|e| e.name().to_string())
            .collect()
    }
}

/// Parses a spec document and fills in defaults.
pub fn parse_spec(text: &str) -> Result<ProblemSpec, SpecError> {
    let doc = doc::parse(text)?;
    let mut spec = ProblemSpec::default();
    for (key, pos, _) in doc.entries() {
        if ![
            "einsum",
            "mapping",
            "format",
            "architecture",
            "binding",
            "operators",
        ]
        .contains(&key.as_str())
        {
            return err(*pos, format!("unknown section `{key}`"));
        }
    }
    let einsum = doc.get("einsum").ok_or_else(|| SpecError::At {
        pos: doc.pos(),
        msg: "missing `einsum` section".into(),
    })?;
    parse_einsum(einsum, &mut spec)?;
    if let Some(ops) = doc.get("operators") {
        spec.operators = parse_operators(ops)?;
    }
    if let Some(m) = doc.get("mapping") {
        spec.mapping = parse_mapping(m, &spec)?;
    }
    fill_mapping_defaults(&mut spec).map_err(|msg| SpecError::At {
        pos: doc.get("mapping").map_or(doc.pos(), Node::pos),
        msg,
    })?;
    if let Some(f) = doc.get("format") {
        spec.format = parse_format(f, &spec)?;
    }
    if let Some(a) = doc.get("architecture") {
        spec.architecture = parse_arch(a)?;
    }
    if let Some(b) = doc.get("binding") {
        spec.binding = parse_binding(b, &spec)?;
    }
    Ok(spec)
}

fn names(node: &Node) -> Result<Vec<String>, SpecError> {
    match node {
        Node::Seq(items, _) => items
            .iter()
            .map(|n| match n {
                Node::Scalar(s, _) => Ok(s.clone()),
                other => err(
                    other.pos(),
                    format!("expected a name, found {}", other.kind()),
                ),
            })
            .collect(),
        Node::Null(_) => Ok(Vec::new()),
        other => err(
            other.pos(),
            format!("expected a list, found {}", other.kind()),
        ),
    }
}

fn scalar(node: &Node) -> Result<&str, SpecError> {
    node.as_str().ok_or_else(|| SpecError::At {
        pos: node.pos(),
        msg: format!("expected a scalar, found {}", node.kind()),
    })
}

fn number<T: std::str::FromStr>(node: &Node) -> Result<T, SpecError> {
    let s = scalar(node)?;
    s.parse().map_err(|_| SpecError::At {
        pos: node.pos(),
        msg: format!("`{s}` is not a valid number"),
    })
}

fn as_map<'a>(node: &'a Node, what: &str) -> Result<&'a [(String, Pos, Node)], SpecError> {
    match node {
        Node::Map(e, _) => Ok(e),
        Node::Null(_) => Ok(&[]),
        other => err(
            other.pos(),
            format!("`{what}` must be a mapping, found {}", other.kind()),
        ),
    }
}

fn parse_einsum(node: &Node, spec: &mut ProblemSpec) -> Result<(), SpecError> {
    for (key, pos, _) in as_map(node, "einsum")? {
        if !["declaration", "expressions", "shapes"].contains(&key.as_str()) {
            return err(*pos, format!("unknown einsum key `{key}`"));
        }
    }
    let decl = node.get("declaration").ok_or_else(|| SpecError::At {
        pos: node.pos(),
        msg: "missing einsum.declaration".into(),
    })?;
    for (t, _, ranks) in as_map(decl, "declaration")? {
        spec.declaration.insert(t.clone(), names(ranks)?);
    }
    if let Some(shapes) = node.get("shapes") {
        for (r, _, v) in as_map(shapes, "shapes")? {
            spec.shapes.insert(r.clone(), number(v)?);
        }
    }
    let exprs = node.get("expressions").ok_or_else(|| SpecError::At {
        pos: node.pos(),
        msg: "missing einsum.expressions".into(),
    })?;
    for item in exprs.items() {
        let text = scalar(item)?;
        let pos = item.pos();
        let mut st = expr::parse_statement(text).map_err(|e| SpecError::At {
            pos: Pos {
                line: pos.line,
                col: pos.col + e.col - 1,
            },
            msg: e.msg,
        })?;
        // bare copy `P1 = P0`
        if st.output.indices.is_empty() {
            if let Expr::Access(src) = &mut st.expr {
                if src.indices.is_empty() {
                    let ranks = spec
                        .declaration
                        .get(&src.tensor)
                        .ok_or_else(|| SpecError::At {
                            pos,
                            msg: format!("undeclared tensor {}", src.tensor),
                        })?;
                    let idx: Vec<Index> =
                        ranks.iter().map(|r| Index::Var(r.to_lowercase())).collect();
                    src.indices = idx.clone();
                    st.output.indices = idx;
                }
            }
        }
        for a in std::iter::once(&st.output).chain(st.expr.accesses()) {
            let Some(ranks) = spec.declaration.get(&a.tensor) else {
                return err(pos, format!("undeclared tensor {}", a.tensor));
            };
            if ranks.len() != a.indices.len() {
                return err(
                    pos,
                    format!(
                        "{} is declared with {} ranks but indexed with {}",
                        a.tensor,
                        ranks.len(),
                        a.indices.len()
                    ),
                );
            }
        }
        if st.output.indices.iter().any(|i| i.as_var().is_none()) {
            return err(pos, "output subscripts must be plain index variables");
        }
        let e = EinsumDecl {
            output: st.output,
            expr: st.expr,
        };
        let out_vars: Vec<String> = e
            .output
            .indices
            .iter()
            .flat_map(|i| i.vars().to_vec())
            .collect();
        let rhs = e.expr.vars();
        if let Some(v) = out_vars.iter().find(|v| !rhs.contains(*v)) {
            return err(
                pos,
                format!("output index {v} does not appear on the right-hand side"),
            );
        }
        if spec.expressions.iter().any(|x| x.name() == e.name()) {
            return err(
                pos,
                format!("tensor {} is written by two Einsums", e.name()),
            );
        }
        spec.expressions.push(e);
    }
    Ok(())
}

fn parse_operators(node: &Node) -> Result<Semiring, SpecError> {
    let mut s = Semiring::default();
    for (k, pos, v) in as_map(node, "operators")? {
        let op = Op::parse(scalar(v)?).ok_or_else(|| SpecError::At {
            pos: v.pos(),
            msg: format!("unknown operator `{}`", scalar(v).unwrap_or("")),
        })?;
        match k.as_str() {
            "add" => s.add = op,
            "mul" => s.mul = op,
            _ => {
                return err(
                    *pos,
                    format!("unknown operator slot `{k}` (expected add or mul)"),
                )
            }
        }
    }
    Ok(s)
}

fn parse_directive(s: &str, pos: Pos) -> Result<Directive, SpecError> {
    let s = s.trim();
    let (head, arg) = match (s.find('('), s.strip_suffix(')')) {
        (Some(o), Some(body)) => (&s[..o], body[o + 1..].trim()),
        _ => return err(pos, format!("unknown directive `{s}`")),
    };
    let size = |a: &str| {
        if let Ok(n) = a.parse() {
            Size::Num(n)
        } else {
            Size::Sym(a.to_string())
        }
    };
    match head {
        "uniform_shape" if !arg.is_empty() => Ok(Directive::UniformShape(size(arg))),
        "uniform_occupancy" => {
            let Some((leader, n)) = arg.split_once('.') else {
                return err(
                    pos,
                    format!("uniform_occupancy expects Leader.size, found `{arg}`"),
                );
            };
            Ok(Directive::UniformOccupancy {
                leader: leader.trim().to_string(),
                size: size(n.trim()),
            })
        }
        "flatten" if arg.is_empty() => Ok(Directive::Flatten),
        _ => err(pos, format!("unknown directive `{s}`")),
    }
}

fn parse_mapping(node: &Node, spec: &ProblemSpec) -> Result<MappingDecl, SpecError> {
    let mut m = MappingDecl::default();
    let einsum_known = |name: &str, pos: Pos| -> Result<(), SpecError> {
        if spec.einsum(name).is_none() {
            return err(pos, format!("no Einsum writes tensor {name}"));
        }
        Ok(())
    };
    for (key, pos, body) in as_map(node, "mapping")? {
        match key.as_str() {
            "rank-order" => {
                for (t, tpos, order) in as_map(body, key)? {
                    if !spec.declaration.contains_key(t) {
                        return err(*tpos, format!("undeclared tensor {t}"));
                    }
                    m.rank_order.insert(t.clone(), names(order)?);
                }
            }
            "partitioning" => {
                for (e, epos, ranks) in as_map(body, key)? {
                    einsum_known(e, *epos)?;
                    let mut entries = Vec::new();
                    for (rk, rpos, dirs) in as_map(ranks, "partitioning")? {
                        let ranks: Vec<String> = match rk
                            .strip_prefix('(')
                            .and_then(|r| r.strip_suffix(')'))
                        {
                            Some(inner) => inner.split(',').map(|s| s.trim().to_string()).collect(),
                            None => vec![rk.clone()],
                        };
                        let directives = dirs
                            .items()
                            .iter()
                            .map(|d| parse_directive(scalar(d)?, d.pos()))
                            .collect::<Result<Vec<_>, _>>()?;
                        if directives.is_empty() {
                            return err(*rpos, format!("no directives for {rk}"));
                        }
                        entries.push(PartitionEntry { ranks, directives });
                    }
                    m.partitioning.insert(e.clone(), entries);
                }
            }
            "loop-order" => {
                for (e, epos, order) in as_map(body, key)? {
                    einsum_known(e, *epos)?;
                    m.loop_order.insert(e.clone(), names(order)?);
                }
            }
            "spacetime" => {
                for (e, epos, st) in as_map(body, key)? {
                    einsum_known(e, *epos)?;
                    for (k, kpos, _) in as_map(st, "spacetime")? {
                        if k != "space" && k != "time" {
                            return err(*kpos, format!("unknown spacetime key `{k}`"));
                        }
                    }
                    m.spacetime.insert(
                        e.clone(),
                        Spacetime {
                            space: st.get("space").map(names).transpose()?.unwrap_or_default(),
                            time: st.get("time").map(names).transpose()?.unwrap_or_default(),
                        },
                    );
                }
            }
            _ => return err(*pos, format!("unknown mapping key `{key}`")),
        }
    }
    Ok(m)
}

/// Rank order defaults to declaration order; loop order to the rewritten
/// iteration space (output ranks, then the rest alphabetically); spacetime
/// to all-time.
pub fn fill_mapping_defaults(spec: &mut ProblemSpec) -> Result<(), String> {
    for (t, ranks) in &spec.declaration {
        spec.mapping
            .rank_order
            .entry(t.clone())
            .or_insert_with(|| ranks.clone());
    }
    for e in &spec.expressions {
        let name = e.name().to_string();
        if !spec.mapping.loop_order.contains_key(&name) {
            let parts = spec
                .mapping
                .partitioning
                .get(&name)
                .cloned()
                .unwrap_or_default();
            let (ranks, _) = ranks::rewrite(&e.iteration_ranks(), &parts, &spec.shapes)
                .map_err(|m| format!("Einsum {name}: {m}"))?;
            spec.mapping
                .loop_order
                .insert(name.clone(), ranks.into_iter().map(|r| r.name).collect());
        }
        if !spec.mapping.spacetime.contains_key(&name) {
            let time = spec.mapping.loop_order[&name].clone();
            spec.mapping.spacetime.insert(
                name,
                Spacetime {
                    space: Vec::new(),
                    time,
                },
            );
        }
    }
    Ok(())
}

fn parse_format(node: &Node, spec: &ProblemSpec) -> Result<FormatDecl, SpecError> {
    let mut f = FormatDecl::default();
    for (t, tpos, configs) in as_map(node, "format")? {
        if !spec.declaration.contains_key(t) {
            return err(*tpos, format!("undeclared tensor {t}"));
        }
        let mut cfgs = BTreeMap::new();
        for (c, _, ranks) in as_map(configs, t)? {
            let mut tf = TensorFormat::default();
            for (r, rpos, attrs) in as_map(ranks, c)? {
                let mut rf = RankFormat::new(FormatKind::C, 0, 0);
                let mut saw_kind = false;
                for (k, kpos, v) in as_map(attrs, r)? {
                    match k.as_str() {
                        "format" => {
                            saw_kind = true;
                            rf.kind = match scalar(v)? {
                                "U" => FormatKind::U,
                                "C" => FormatKind::C,
                                "B" => FormatKind::B,
                                other => {
                                    return err(v.pos(), format!("unknown format type `{other}`"))
                                }
                            }
                        }
                        "layout" => {
                            rf.layout = match scalar(v)? {
                                "contiguous" | "soa" | "struct-of-arrays" => Layout::StructOfArrays,
                                "interleaved" | "aos" | "array-of-structs" => {
                                    Layout::ArrayOfStructs
                                }
                                other => return err(v.pos(), format!("unknown layout `{other}`")),
                            }
                        }
                        "cbits" => rf.cbits = number(v)?,
                        "pbits" => rf.pbits = number(v)?,
                        "fhbits" => rf.fhbits = number(v)?,
                        _ => return err(*kpos, format!("unknown format attribute `{k}`")),
                    }
                }
                if !saw_kind {
                    return err(*rpos, format!("rank {r} of {t}.{c} has no `format`"));
                }
                tf.ranks.push((r.clone(), rf));
            }
            cfgs.insert(c.clone(), tf);
        }
        f.tensors.insert(t.clone(), cfgs);
    }
    Ok(f)
}

fn parse_component(node: &Node) -> Result<Component, SpecError> {
    let pos = node.pos();
    let get = |k: &str| node.get(k);
    let req = |k: &str| -> Result<&Node, SpecError> {
        get(k).ok_or_else(|| SpecError::At {
            pos,
            msg: format!("component is missing `{k}`"),
        })
    };
    let name = scalar(req("name")?)?.to_string();
    let class_name = scalar(req("class")?)?;
    let positive = |k: &str| -> Result<usize, SpecError> {
        let n: usize = number(req(k)?)?;
        if n == 0 {
            return err(pos, format!("{name}.{k} must be positive"));
        }
        Ok(n)
    };
    let positive_f = |k: &str| -> Result<f64, SpecError> {
        let n: f64 = number(req(k)?)?;
        if n <= 0.0 {
            return err(pos, format!("{name}.{k} must be positive"));
        }
        Ok(n)
    };
    let class = match class_name {
        "DRAM" => ComponentClass::Dram {
            bandwidth: positive_f("bandwidth")?,
        },
        "Buffer" => ComponentClass::Buffer {
            kind: match scalar(req("type")?)? {
                "buffet" => BufferKind::Buffet,
                "cache" => BufferKind::Cache,
                other => return err(pos, format!("unknown buffer type `{other}`")),
            },
            width: positive("width")?,
            depth: positive("depth")?,
            bandwidth: positive_f("bandwidth")?,
        },
        "Intersection" => ComponentClass::Intersection {
            kind: match scalar(req("type")?)? {
                "two-finger" => IntersectKind::TwoFinger,
                "leader-follower" => IntersectKind::LeaderFollower,
                "skip-ahead" => IntersectKind::SkipAhead,
                other => return err(pos, format!("unknown intersection type `{other}`")),
            },
            leader: get("leader").map(scalar).transpose()?.map(str::to_string),
        },
        "Merger" => ComponentClass::Merger {
            inputs: positive("inputs")?,
            comparator_radix: {
                let r = positive("comparator_radix")?;
                if r < 2 {
                    return err(pos, format!("{name}.comparator_radix must be at least 2"));
                }
                r
            },
            outputs: positive("outputs")?,
            order: match get("order").map(scalar).transpose()?.unwrap_or("fifo") {
                "fifo" => MergeOrder::Fifo,
                "opt" => MergeOrder::Opt,
                other => return err(pos, format!("unknown merger order `{other}`")),
            },
            reduce: match get("reduce").map(scalar).transpose()?.unwrap_or("false") {
                "true" | "True" | "yes" => true,
                "false" | "False" | "no" => false,
                other => {
                    return err(
                        pos,
                        format!("reduce must be true or false, found `{other}`"),
                    )
                }
            },
        },
        "Compute" => ComponentClass::Compute {
            kind: match scalar(req("type")?)? {
                "mul" => ComputeKind::Mul,
                "add" => ComputeKind::Add,
                other => return err(pos, format!("unknown compute type `{other}`")),
            },
        },
        other => return err(pos, format!("unknown component class `{other}`")),
    };
    Ok(Component { name, class })
}

fn parse_arch(node: &Node) -> Result<ArchDecl, SpecError> {
    let mut a = ArchDecl::default();
    for (k, pos, v) in as_map(node, "architecture")? {
        match k.as_str() {
            "clock" => a.clock = number(v)?,
            "topologies" => {
                for (name, _, levels) in as_map(v, "topologies")? {
                    let mut topo = Topology::default();
                    for l in levels.items() {
                        let lname = l.get("name").map(scalar).transpose()?.unwrap_or("level");
                        let num = l.get("num").map(number).transpose()?.unwrap_or(1usize);
                        if num == 0 {
                            return err(l.pos(), format!("level {lname} has num 0"));
                        }
                        let components = l
                            .get("local")
                            .map(|c| c.items().iter().map(parse_component).collect())
                            .transpose()?
                            .unwrap_or_default();
                        topo.levels.push(Level {
                            name: lname.to_string(),
                            num,
                            components,
                        });
                    }
                    a.topologies.insert(name.clone(), topo);
                }
            }
            _ => return err(*pos, format!("unknown architecture key `{k}`")),
        }
    }
    if a.clock <= 0.0 {
        return err(node.pos(), "clock must be positive");
    }
    Ok(a)
}

fn parse_binding(node: &Node, spec: &ProblemSpec) -> Result<BindingDecl, SpecError> {
    let mut b = BindingDecl::default();
    for (e, epos, body) in as_map(node, "binding")? {
        if spec.einsum(e).is_none() {
            return err(*epos, format!("no Einsum writes tensor {e}"));
        }
        let topology = body
            .get("topology")
            .map(scalar)
            .transpose()?
            .ok_or_else(|| SpecError::At {
                pos: body.pos(),
                msg: format!("binding for {e} has no topology"),
            })?
            .to_string();
        let mut eb = EinsumBinding {
            topology,
            components: BTreeMap::new(),
        };
        if let Some(comps) = body.get("components") {
            for (c, _, entries) in as_map(comps, "components")? {
                let mut list = Vec::new();
                for item in entries.items() {
                    let mut be = BindEntry::default();
                    for (k, kpos, v) in as_map(item, c)? {
                        let s = scalar(v)?.to_string();
                        match k.as_str() {
                            "tensor" => be.tensor = Some(s),
                            "config" => be.config = Some(s),
                            "rank" => be.rank = Some(s),
                            "evict-on" => be.evict_on = Some(s),
                            "op" => be.op = Some(s),
                            "type" => {
                                be.kind = Some(match s.as_str() {
                                    "coord" => DatumType::Coord,
                                    "payload" => DatumType::Payload,
                                    "elem" => DatumType::Elem,
                                    _ => {
                                        return err(v.pos(), format!("unknown binding type `{s}`"))
                                    }
                                })
                            }
                            _ => return err(*kpos, format!("unknown binding key `{k}`")),
                        }
                    }
                    list.push(be);
                }
                eb.components.insert(c.clone(), list);
            }
        }
        b.einsums.insert(e.clone(), eb);
    }
    Ok(b)
}

fn list(v: &[String]) -> String {
    format!("[{}]", v.join(", "))
}

fn num(x: f64) -> String {
    if x.fract() == 0.0 && x.abs() < 1e15 {
        format!("{}", x as i64)
    } else {
        format!("{x}")
    }
}

impl fmt::Display for ProblemSpec {
    /// Prints the spec in the same grammar `parse_spec` reads, with all
    /// defaults spelled out.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut s = String::new();
        s.push_str("einsum:\n  declaration:\n");
        for (t, r) in &self.declaration {
            let _ = writeln!(s, "    {t}: {}", list(r));
        }
        if !self.shapes.is_empty() {
            s.push_str("  shapes:\n");
            for (r, n) in &self.shapes {
                let _ = writeln!(s, "    {r}: {n}");
            }
        }
        s.push_str("  expressions:\n");
        for e in &self.expressions {
            let _ = writeln!(s, "    - {e}");
        }
        if self.operators != Semiring::default() {
            let _ = writeln!(
                s,
                "operators:\n  add: {}\n  mul: {}",
                self.operators.add, self.operators.mul
            );
        }
        let m = &self.mapping;
        s.push_str("mapping:\n  rank-order:\n");
        for (t, r) in &m.rank_order {
            let _ = writeln!(s, "    {t}: {}", list(r));
        }
        if !m.partitioning.is_empty() {
            s.push_str("  partitioning:\n");
            for (e, entries) in &m.partitioning {
                let _ = writeln!(s, "    {e}:");
                for pe in entries {
                    let key = if pe.ranks.len() == 1 {
                        pe.ranks[0].clone()
                    } else {
                        format!("({})", pe.ranks.join(", "))
                    };
                    let d: Vec<String> = pe.directives.iter().map(|d| d.to_string()).collect();
                    let _ = writeln!(s, "      {key}: {}", list(&d));
                }
            }
        }
        s.push_str("  loop-order:\n");
        for (e, r) in &m.loop_order {
            let _ = writeln!(s, "    {e}: {}", list(r));
        }
        s.push_str("  spacetime:\n");
        for (e, st) in &m.spacetime {
            let _ = writeln!(
                s,
                "    {e}:\n      space: {}\n      time: {}",
                list(&st.space),
                list(&st.time)
            );
        }
        if !self.format.tensors.is_empty() {
            s.push_str("format:\n");
            for (t, cfgs) in &self.format.tensors {
                let _ = writeln!(s, "  {t}:");
                for (c, tf) in cfgs {
                    let _ = writeln!(s, "    {c}:");
                    for (r, rf) in &tf.ranks {
                        let layout = match rf.layout {
                            Layout::StructOfArrays => "soa",
                            Layout::ArrayOfStructs => "aos",
                        };
                        let _ = writeln!(
                            s,
                            "      {r}: {{format: {:?}, layout: {layout}, cbits: {}, pbits: {}, fhbits: {}}}",
                            rf.kind, rf.cbits, rf.pbits, rf.fhbits
                        );
                    }
                }
            }
        }
        let a = &self.architecture;
        if !a.topologies.is_empty() {
            let _ = writeln!(s, "architecture:\n  clock: {}\n  topologies:", num(a.clock));
            for (name, topo) in &a.topologies {
                let _ = writeln!(s, "    {name}:");
                for l in &topo.levels {
                    let _ = writeln!(s, "      - name: {}\n        num: {}", l.name, l.num);
                    if l.components.is_empty() {
                        continue;
                    }
                    s.push_str("        local:\n");
                    for c in &l.components {
                        let attrs = match &c.class {
                            ComponentClass::Dram { bandwidth } => {
                                format!("class: DRAM, bandwidth: {}", num(*bandwidth))
                            }
                            ComponentClass::Buffer {
                                kind,
                                width,
                                depth,
                                bandwidth,
                            } => format!(
                                "class: Buffer, type: {}, width: {width}, depth: {depth}, bandwidth: {}",
                                if *kind == BufferKind::Cache { "cache" } else { "buffet" },
                                num(*bandwidth)
                            ),
                            ComponentClass::Intersection { kind, leader } => {
                                let k = match kind {
                                    IntersectKind::TwoFinger => "two-finger",
                                    IntersectKind::LeaderFollower => "leader-follower",
                                    IntersectKind::SkipAhead => "skip-ahead",
                                };
                                match leader {
                                    Some(l) => format!("class: Intersection, type: {k}, leader: {l}"),
                                    None => format!("class: Intersection, type: {k}"),
                                }
                            }
                            ComponentClass::Merger {
                                inputs,
                                comparator_radix,
                                outputs,
                                order,
                                reduce,
                            } => format!(
                                "class: Merger, inputs: {inputs}, comparator_radix: {comparator_radix}, outputs: {outputs}, order: {}, reduce: {reduce}",
                                if *order == MergeOrder::Opt { "opt" } else { "fifo" }
                            ),
                            ComponentClass::Compute { kind } => format!(
                                "class: Compute, type: {}",
                                if *kind == ComputeKind::Mul { "mul" } else { "add" }
                            ),
                        };
                        let _ = writeln!(s, "          - {{name: {}, {attrs}}}", c.name);
                    }
                }
            }
        }
        if !self.binding.einsums.is_empty() {
            s.push_str("binding:\n");
            for (e, eb) in &self.binding.einsums {
                let _ = writeln!(s, "  {e}:\n    topology: {}", eb.topology);
                if eb.components.is_empty() {
                    continue;
                }
                s.push_str("    components:\n");
                for (c, entries) in &eb.components {
                    let _ = writeln!(s, "      {c}:");
                    for be in entries {
                        let mut parts = Vec::new();
                        let mut add = |k: &str, v: &Option<String>| {
                            if let Some(v) = v {
                                parts.push(format!("{k}: {v}"));
                            }
                        };
                        add("tensor", &be.tensor);
                        add("config", &be.config);
                        add("rank", &be.rank);
                        add(
                            "type",
                            &be.kind.map(|k| {
                                match k {
                                    DatumType::Coord => "coord",
                                    DatumType::Payload => "payload",
                                    DatumType::Elem => "elem",
                                }
                                .to_string()
                            }),
                        );
                        add("evict-on", &be.evict_on);
                        add("op", &be.op);
                        let _ = writeln!(s, "        - {{{}}}", parts.join(", "));
                    }
                }
            }
        }
        f.write_str(&s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_spec_gets_defaults() {
        let spec = parse_spec(
            "einsum:\n  declaration:\n    A: [M]\n    Z: [M]\n  expressions:\n    - Z[m] = A[m]\n",
        )
        .unwrap();
        assert_eq!(spec.mapping.loop_order["Z"], ["M"]);
        assert_eq!(spec.mapping.spacetime["Z"].time, ["M"]);
        assert!(spec.mapping.spacetime["Z"].space.is_empty());
        assert_eq!(spec.mapping.rank_order["A"], ["M"]);
    }

    #[test]
    fn default_loop_order_sorts_contractions() {
        let spec = parse_spec(
            "einsum:\n  declaration:\n    A: [K, M]\n    B: [K, N]\n    Z: [M, N]\n  expressions:\n    - Z[m,n] = A[k,m] * B[k,n]\n",
        )
        .unwrap();
        assert_eq!(spec.mapping.loop_order["Z"], ["M", "N", "K"]);
    }

    #[test]
    fn errors_point_at_source() {
        let e =
            parse_spec("einsum:\n  declaration:\n    A: [M]\n  expressions:\n    - Z[m] = A[m]\n")
                .unwrap_err();
        assert!(e.to_string().contains("5:"), "{e}");
        let e = parse_spec(
            "einsum:\n  declaration:\n    A: [M]\n    Z: [M]\n  expressions:\n    - Z[m] = A[m]\nmapping:\n  partitioning:\n    Z:\n      M: [uniform_tiles(4)]\n",
        )
        .unwrap_err();
        assert!(e.to_string().contains("unknown directive"), "{e}");
        assert!(parse_spec("bogus: 1\n").is_err());
    }

    #[test]
    fn bare_copy_expands() {
        let spec = parse_spec(
            "einsum:\n  declaration:\n    P0: [V]\n    P1: [V]\n  expressions:\n    - P1 = P0\n",
        )
        .unwrap();
        assert_eq!(spec.expressions[0].to_string(), "P1[v] = P0[v]");
    }

    #[test]
    fn existential_take_vars() {
        let spec = parse_spec(
            "einsum:\n  declaration:\n    A: [K, M]\n    B: [K, N]\n    T: [K, M]\n  expressions:\n    - T[k, m] = take(A[k, m], B[k, n], 0)\n",
        )
        .unwrap();
        let e = &spec.expressions[0];
        assert_eq!(e.existential_vars(), ["n"]);
        assert_eq!(e.iteration_ranks(), ["K", "M"]);
    }
}
