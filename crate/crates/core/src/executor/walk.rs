//! Recursive interpretation of a loop nest.

use std::collections::{BTreeMap, HashMap};

use crate::compiler::{CoIter, LookupKind, LoopNest, Node, RankAccess, UpperKind};
use crate::components::intersect;
use crate::fibertree::{Coord, Fiber, Payload, Tensor};
use crate::semiring::{Overflow, Semiring, Value};
use crate::spec::IntersectKind;

use super::trace::{Datum, IntersectStats, Point, Record, Trace, TraceTensor};
use super::ExecError;

/// Where an operand stands while the loop descends.
#[derive(Clone, Copy)]
enum Cur<'a> {
    /// Positioned on a fiber of rank `.1`.
    Fiber(&'a Fiber, usize),
    Value(Value),
    Absent,
}

/// A driver's fiber restricted to an element range.
#[derive(Clone, Copy)]
struct View<'a> {
    fiber: Option<&'a Fiber>,
    depth: usize,
    lo: usize,
    hi: usize,
}

impl<'a> View<'a> {
    const EMPTY: View<'static> = View {
        fiber: None,
        depth: 0,
        lo: 0,
        hi: 0,
    };

    fn coords(&self) -> &'a [Coord] {
        match self.fiber {
            Some(f) => &f.coords()[self.lo..self.hi],
            None => &[],
        }
    }
}

enum Set {
    All,
    List(Vec<Coord>),
}

fn intersect_lists(a: &[Coord], b: &[Coord]) -> Vec<Coord> {
    let (mut i, mut j, mut out) = (0, 0, Vec::new());
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                out.push(a[i].clone());
                i += 1;
                j += 1;
            }
        }
    }
    out
}

fn union_lists(a: &[Coord], b: &[Coord]) -> Vec<Coord> {
    let mut out: Vec<Coord> = a.iter().chain(b).cloned().collect();
    out.sort();
    out.dedup();
    out
}

struct Walker<'a> {
    nest: &'a LoopNest,
    trees: &'a [Tensor],
    sr: Semiring,
    policy: Option<(IntersectKind, Option<String>)>,
    env: Vec<usize>,
    extents: Vec<usize>,
    level_vars: Vec<Vec<usize>>,
    chain_vars: Vec<Vec<usize>>,
    lookup_vars: Vec<Vec<Vec<usize>>>,
    out_vars: Vec<usize>,
    out_tensor: u16,
    ranges: Vec<(Option<Coord>, Option<Coord>)>,
    epochs: Vec<u64>,
    prefix: Vec<Coord>,
    point_dirty: bool,
    space_pos: Vec<u32>,
    space_ids: HashMap<Vec<u32>, u32>,
    cur_space: Option<u32>,
    out: BTreeMap<Vec<Coord>, Value>,
    out_ids: HashMap<Vec<Coord>, u64>,
    out_counts: Vec<u64>,
    trace: Trace,
}

/// An output point and its value.
pub(super) type OutPoint = (Vec<Coord>, Value);

/// Interprets `nest` over the prepared operand trees. Returns the output
/// points (production order) and the access trace.
pub(super) fn run(
    nest: &LoopNest,
    trees: &[Tensor],
    extents: &BTreeMap<String, usize>,
    out_ranks: &[String],
    sr: Semiring,
    policy: Option<(IntersectKind, Option<String>)>,
) -> Result<(Vec<OutPoint>, Trace), ExecError> {
    let mut names: Vec<String> = extents.keys().cloned().collect();
    let mut id = |v: &str| match names.iter().position(|n| n == v) {
        Some(i) => i,
        None => {
            names.push(v.to_string());
            names.len() - 1
        }
    };
    let level_vars: Vec<Vec<usize>> = nest
        .levels
        .iter()
        .map(|l| l.vars.iter().map(|v| id(v)).collect())
        .collect();
    let chain_vars: Vec<Vec<usize>> = nest
        .levels
        .iter()
        .map(|l| l.chain_vars.iter().map(|v| id(v)).collect())
        .collect();
    let lookup_vars: Vec<Vec<Vec<usize>>> = nest
        .operands
        .iter()
        .map(|o| {
            o.ranks
                .iter()
                .map(|r| match &r.access {
                    RankAccess::Lookup { vars, .. } => vars.iter().map(|v| id(v)).collect(),
                    _ => Vec::new(),
                })
                .collect()
        })
        .collect();
    let out_vars: Vec<usize> = nest.output.production.iter().map(|v| id(v)).collect();
    let ext: Vec<usize> = names
        .iter()
        .map(|n| extents.get(n).copied().unwrap_or(0))
        .collect();

    let mut tensors: Vec<TraceTensor> = nest
        .operands
        .iter()
        .zip(trees)
        .map(|(o, t)| TraceTensor {
            name: o.tensor.clone(),
            ranks: o.ranks.iter().map(|r| r.format_rank.clone()).collect(),
            extents: t.ranks.iter().map(|r| r.extent.size() as u64).collect(),
            bases: t.ranks.iter().map(|r| r.bases.clone()).collect(),
            output: false,
        })
        .collect();
    tensors.push(TraceTensor {
        name: nest.output.tensor.clone(),
        ranks: out_ranks.to_vec(),
        extents: out_vars.iter().map(|&v| ext[v] as u64).collect(),
        bases: out_ranks.iter().map(|r| vec![r.clone()]).collect(),
        output: true,
    });
    let nl = nest.levels.len();
    let mut w = Walker {
        nest,
        trees,
        sr,
        policy,
        env: vec![0; names.len()],
        extents: ext,
        level_vars,
        chain_vars,
        lookup_vars,
        out_tensor: (tensors.len() - 1) as u16,
        out_counts: vec![0; out_vars.len()],
        out_vars,
        ranges: vec![(None, None); nl],
        epochs: vec![0; nl],
        prefix: Vec::new(),
        point_dirty: true,
        space_pos: vec![u32::MAX; nl],
        space_ids: HashMap::new(),
        cur_space: None,
        out: BTreeMap::new(),
        out_ids: HashMap::new(),
        trace: Trace {
            einsum: nest.einsum.clone(),
            levels: nest.levels.iter().map(|l| l.rank.clone()).collect(),
            level_vars: nest.levels.iter().map(|l| l.vars.clone()).collect(),
            prefix_len: nest.prefix_len,
            tensors,
            ..Trace::default()
        },
    };
    let mut cur = Vec::with_capacity(trees.len());
    for (o, t) in trees.iter().enumerate() {
        if t.ranks.is_empty() {
            cur.push(Cur::Absent);
            continue;
        }
        w.record(
            o as u16,
            0,
            Datum::Header,
            false,
            t.root.pos.ordinal,
            t.root.pos.offset,
            0,
        );
        cur.push(Cur::Fiber(&t.root, 0));
    }
    if alive(&nest.body, &cur) {
        w.level(0, &cur)?;
    }
    let points = std::mem::take(&mut w.out).into_iter().collect();
    Ok((points, w.trace))
}

fn alive(n: &Node, cur: &[Cur]) -> bool {
    match n {
        Node::Operand(o) => !matches!(cur[*o], Cur::Absent),
        Node::Mul(a, b) => alive(a, cur) && alive(b, cur),
        Node::Add(a, b) | Node::Sub(a, b) => alive(a, cur) || alive(b, cur),
        Node::Take(args, _) => args.iter().all(|a| alive(a, cur)),
    }
}

impl<'a> Walker<'a> {
    fn err(&self, msg: String) -> ExecError {
        ExecError::Unsupported {
            einsum: self.nest.einsum.clone(),
            msg,
        }
    }

    fn overflow(&self, source: Overflow) -> ExecError {
        ExecError::Overflow {
            einsum: self.nest.einsum.clone(),
            source,
        }
    }

    fn point(&mut self) -> u32 {
        if self.point_dirty {
            self.trace.points.push(Point {
                epochs: self.epochs.clone(),
                prefix: self.prefix.clone(),
            });
            self.point_dirty = false;
        }
        (self.trace.points.len() - 1) as u32
    }

    fn space(&mut self) -> u32 {
        if let Some(s) = self.cur_space {
            return s;
        }
        let key: Vec<u32> = self
            .nest
            .levels
            .iter()
            .zip(&self.space_pos)
            .filter(|(l, _)| l.space)
            .map(|(_, p)| *p)
            .collect();
        let s = if key.iter().all(|&p| p == u32::MAX) {
            u32::MAX
        } else {
            let next = self.trace.spaces.len() as u32;
            *self.space_ids.entry(key.clone()).or_insert_with(|| {
                self.trace.spaces.push(key);
                next
            })
        };
        self.cur_space = Some(s);
        s
    }

    #[allow(clippy::too_many_arguments)]
    fn record(
        &mut self,
        tensor: u16,
        rank: usize,
        datum: Datum,
        write: bool,
        fiber: u64,
        elem: u64,
        coord: u64,
    ) {
        let point = self.point();
        let space = self.space();
        self.trace.records.push(Record {
            tensor,
            rank: rank as u16,
            datum,
            write,
            space,
            point,
            fiber,
            elem,
            coord,
        });
    }

    fn elem_rec(&mut self, o: usize, d: usize, f: &Fiber, j: usize, datum: Datum) {
        let trees = self.trees;
        let coord = trees[o].ranks[d].extent.linear(&f.coords()[j]);
        self.record(
            o as u16,
            d,
            datum,
            false,
            f.pos.ordinal,
            f.pos.offset + j as u64,
            coord,
        );
    }

    fn count(&mut self, op: &str) {
        let s = self.space();
        *self.trace.compute.entry((op.to_string(), s)).or_default() += 1;
    }

    fn descend(&mut self, o: usize, d: usize, f: &'a Fiber, j: usize) -> Cur<'a> {
        match &f.payloads()[j] {
            Payload::Fiber(child) => {
                self.elem_rec(o, d, f, j, Datum::Payload);
                self.record(
                    o as u16,
                    d + 1,
                    Datum::Header,
                    false,
                    child.pos.ordinal,
                    child.pos.offset,
                    0,
                );
                Cur::Fiber(child, d + 1)
            }
            Payload::Leaf(v) => {
                if !self.nest.operands[o].coord_only {
                    self.elem_rec(o, d, f, j, Datum::Payload);
                }
                Cur::Value(*v)
            }
        }
    }

    fn filter(&self, f: &Fiber, level: usize) -> (usize, usize) {
        let (lo, hi) = &self.ranges[level];
        let c = f.coords();
        let s = lo.as_ref().map_or(0, |lo| c.partition_point(|x| x < lo));
        let e = hi
            .as_ref()
            .map_or(c.len(), |hi| c.partition_point(|x| x < hi));
        (s, e.max(s))
    }

    fn set_of(&self, n: &Node, cur: &[Cur], views: &[Option<View<'a>>]) -> Set {
        match n {
            Node::Operand(o) => match (views[*o], cur[*o]) {
                (Some(v), _) => Set::List(v.coords().to_vec()),
                (None, Cur::Absent) => Set::List(Vec::new()),
                _ => Set::All,
            },
            Node::Mul(a, b) => join(self.set_of(a, cur, views), self.set_of(b, cur, views), true),
            Node::Add(a, b) | Node::Sub(a, b) => join(
                self.set_of(a, cur, views),
                self.set_of(b, cur, views),
                false,
            ),
            Node::Take(args, _) => args
                .iter()
                .map(|a| self.set_of(a, cur, views))
                .reduce(|x, y| join(x, y, true))
                .unwrap_or(Set::All),
        }
    }

    /// Coordinates of a level no operand fiber drives.
    fn dense(&self, l: usize) -> Result<Vec<Coord>, ExecError> {
        let lv = &self.nest.levels[l];
        let chain = &self.chain_vars[l];
        let mut out: Vec<Coord> = match &lv.upper {
            Some(UpperKind::Occupancy { .. }) => {
                return Err(self.err(format!(
                    "occupancy-partitioned rank {} has no leader fiber to iterate",
                    lv.rank
                )))
            }
            Some(UpperKind::Shape { size }) => {
                let n = self.extents[chain[0]];
                (0..n)
                    .step_by(*size)
                    .map(|x| {
                        if chain.len() > 1 {
                            let mut t = vec![0; chain.len()];
                            t[0] = x;
                            Coord::Tuple(t)
                        } else {
                            Coord::Int(x)
                        }
                    })
                    .collect()
            }
            None => {
                let vars = &self.level_vars[l];
                if vars.len() == 1 {
                    (0..self.extents[vars[0]]).map(Coord::Int).collect()
                } else {
                    let mut acc: Vec<Vec<usize>> = vec![Vec::new()];
                    for &v in vars {
                        acc = acc
                            .into_iter()
                            .flat_map(|p| {
                                (0..self.extents[v]).map(move |x| {
                                    let mut q = p.clone();
                                    q.push(x);
                                    q
                                })
                            })
                            .collect();
                    }
                    acc.into_iter().map(Coord::Tuple).collect()
                }
            }
        };
        let clip = (0..l)
            .rev()
            .find(|&k| self.nest.levels[k].upper.is_some() && self.chain_vars[k] == *chain)
            .map(|k| &self.ranges[k]);
        if let Some((lo, hi)) = clip {
            out.retain(|c| {
                lo.as_ref().is_none_or(|lo| c >= lo) && hi.as_ref().is_none_or(|hi| c < hi)
            });
        }
        Ok(out)
    }

    fn bind(
        &mut self,
        l: usize,
        c: &Coord,
        pos: usize,
        views: &[Option<View<'a>>],
    ) -> Result<(), ExecError> {
        let nest = self.nest;
        let lv = &nest.levels[l];
        for (&v, &x) in self.level_vars[l].iter().zip(c.components()) {
            self.env[v] = x;
        }
        match &lv.upper {
            Some(UpperKind::Shape { size }) => {
                let hi = match c {
                    Coord::Int(x) => Coord::Int(x + size),
                    Coord::Tuple(t) => {
                        let mut h = vec![0; t.len()];
                        h[0] = t[0] + size;
                        Coord::Tuple(h)
                    }
                };
                self.ranges[l] = (Some(c.clone()), Some(hi));
            }
            Some(UpperKind::Occupancy { leader, parent }) => {
                let lview = lv
                    .drivers
                    .iter()
                    .find(|&&o| nest.operands[o].tensor == *leader)
                    .and_then(|&o| views[o])
                    .ok_or_else(|| {
                        self.err(format!("leader {leader} of rank {} is absent", lv.rank))
                    })?;
                let coords = lview.coords();
                let i = coords.partition_point(|x| x < c);
                let (plo, phi) = parent
                    .map(|p| self.ranges[p].clone())
                    .unwrap_or((None, None));
                let lo = if i == 0 { plo } else { Some(coords[i].clone()) };
                let hi = coords.get(i + 1).cloned().or(phi);
                self.ranges[l] = (lo, hi);
            }
            None => {}
        }
        self.epochs[l] += 1;
        self.point_dirty = true;
        if l < nest.prefix_len {
            self.prefix.truncate(l);
            self.prefix.push(c.clone());
        }
        if lv.space {
            self.space_pos[l] = pos as u32;
            self.cur_space = None;
        }
        Ok(())
    }

    fn lookups(&mut self, o: usize, l: usize, cur: &mut Cur<'a>) {
        let nest = self.nest;
        while let Cur::Fiber(f, d) = *cur {
            let r = &nest.operands[o].ranks[d];
            if r.level != l {
                return;
            }
            let RankAccess::Lookup { kind, .. } = &r.access else {
                return;
            };
            let vars = &self.lookup_vars[o][d];
            let key = match kind {
                LookupKind::Var => Coord::Int(self.env[vars[0]]),
                LookupKind::Sum => Coord::Int(vars.iter().map(|&v| self.env[v]).sum()),
                LookupKind::Tuple => Coord::Tuple(vars.iter().map(|&v| self.env[v]).collect()),
            };
            *cur = match f.position(&key) {
                Ok(j) => {
                    self.elem_rec(o, d, f, j, Datum::Coord);
                    self.descend(o, d, f, j)
                }
                Err(_) => Cur::Absent,
            };
        }
    }

    fn record_matching(&mut self, o: usize, v: View<'a>, cands: &[Coord]) {
        let Some(f) = v.fiber else { return };
        let mut k = 0;
        for j in v.lo..v.hi {
            let c = &f.coords()[j];
            while k < cands.len() && cands[k] < *c {
                k += 1;
            }
            if k < cands.len() && cands[k] == *c {
                self.elem_rec(o, v.depth, f, j, Datum::Coord);
            }
        }
    }

    fn record_prefix(&mut self, o: usize, v: View<'a>, n: usize) {
        let Some(f) = v.fiber else { return };
        for j in v.lo..(v.lo + n).min(v.hi) {
            self.elem_rec(o, v.depth, f, j, Datum::Coord);
        }
    }

    fn coordinate_reads(&mut self, l: usize, views: &[Option<View<'a>>], cands: &[Coord]) {
        let nest = self.nest;
        let lv = &nest.levels[l];
        let drivers: Vec<usize> = lv
            .drivers
            .iter()
            .copied()
            .filter(|&o| views[o].is_some_and(|v| v.fiber.is_some()))
            .collect();
        let intersecting =
            matches!(lv.coiter, CoIter::Intersect | CoIter::LeaderFollow) && drivers.len() >= 2;
        if !intersecting {
            for &o in &drivers {
                let v = views[o].unwrap();
                self.record_prefix(o, v, v.hi - v.lo);
            }
            return;
        }
        let kind = match (&self.policy, lv.coiter) {
            (Some((k, _)), _) => *k,
            (None, CoIter::LeaderFollow) => IntersectKind::LeaderFollower,
            (None, _) => IntersectKind::TwoFinger,
        };
        let view = |o: usize| views[o].unwrap();
        let mut st = IntersectStats::default();
        match kind {
            IntersectKind::TwoFinger => {
                let mut run: Vec<Coord> = view(drivers[0]).coords().to_vec();
                let mut visited = vec![0usize; views.len()];
                for (i, &o) in drivers[1..].iter().enumerate() {
                    let (t, _, va, vb) = intersect::two_finger(&run, view(o).coords());
                    st.tests += t;
                    if i == 0 {
                        visited[drivers[0]] = va;
                    }
                    visited[o] = vb;
                    run = intersect_lists(&run, view(o).coords());
                }
                for &o in &drivers {
                    self.record_prefix(o, view(o), visited[o]);
                }
            }
            IntersectKind::LeaderFollower => {
                let named = self.policy.as_ref().and_then(|(_, l)| l.as_ref());
                let leader = drivers
                    .iter()
                    .copied()
                    .find(|&o| Some(&nest.operands[o].tensor) == named)
                    .or_else(|| {
                        drivers.iter().copied().find(|&o| {
                            let d = view(o).depth;
                            matches!(
                                nest.operands[o].ranks[d].access,
                                RankAccess::Drive { filter: None }
                            )
                        })
                    })
                    .unwrap_or(drivers[0]);
                for &o in &drivers {
                    if o != leader {
                        st.tests +=
                            intersect::leader_follower(view(leader).coords(), view(o).coords()).0;
                    }
                }
                for &o in &drivers {
                    if o == leader {
                        let v = view(o);
                        self.record_prefix(o, v, v.hi - v.lo);
                    } else {
                        self.record_matching(o, view(o), cands);
                    }
                }
            }
            IntersectKind::SkipAhead => {
                let mut run: Vec<Coord> = view(drivers[0]).coords().to_vec();
                for &o in &drivers[1..] {
                    st.tests += intersect::skip_ahead(&run, view(o).coords()).0;
                    run = intersect_lists(&run, view(o).coords());
                }
                for &o in &drivers {
                    self.record_matching(o, view(o), cands);
                }
            }
        }
        st.matches = cands.len() as u64;
        let s = self.space();
        let e = self.trace.intersections.entry(s).or_default();
        e.tests += st.tests;
        e.matches += st.matches;
    }

    fn level(&mut self, l: usize, cur: &[Cur<'a>]) -> Result<(), ExecError> {
        let nest = self.nest;
        if l == nest.levels.len() {
            return self.leaf(cur);
        }
        let lv = &nest.levels[l];
        let mut views: Vec<Option<View<'a>>> = vec![None; cur.len()];
        for &o in &lv.drivers {
            views[o] = Some(match cur[o] {
                Cur::Fiber(f, d) if nest.operands[o].ranks[d].level == l => {
                    let (lo, hi) = match &nest.operands[o].ranks[d].access {
                        RankAccess::Drive { filter: Some(fl) } => self.filter(f, *fl),
                        _ => (0, f.len()),
                    };
                    View {
                        fiber: Some(f),
                        depth: d,
                        lo,
                        hi,
                    }
                }
                _ => View::EMPTY,
            });
        }
        let cands = match self.set_of(&nest.body, cur, &views) {
            Set::List(v) => v,
            Set::All => self.dense(l)?,
        };
        self.coordinate_reads(l, &views, &cands);
        for (pos, c) in cands.iter().enumerate() {
            self.bind(l, c, pos, &views)?;
            let mut next: Vec<Cur<'a>> = cur.to_vec();
            for &o in &lv.drivers {
                let Some(v) = views[o] else { continue };
                next[o] = match v.fiber {
                    Some(f) => match v.coords().binary_search(c) {
                        Ok(j) => self.descend(o, v.depth, f, v.lo + j),
                        Err(_) => Cur::Absent,
                    },
                    None => Cur::Absent,
                };
            }
            for (o, n) in next.iter_mut().enumerate() {
                self.lookups(o, l, n);
            }
            if !alive(&nest.body, &next) {
                continue;
            }
            self.level(l + 1, &next)?;
        }
        if lv.space {
            self.space_pos[l] = u32::MAX;
            self.cur_space = None;
        }
        Ok(())
    }

    fn leaf(&mut self, cur: &[Cur<'a>]) -> Result<(), ExecError> {
        let mut c = cur.to_vec();
        for (o, slot) in c.iter_mut().enumerate() {
            // remaining ranks are existential: any element will do
            while let Cur::Fiber(f, d) = *slot {
                if f.is_empty() {
                    *slot = Cur::Absent;
                    break;
                }
                self.elem_rec(o, d, f, 0, Datum::Coord);
                *slot = self.descend(o, d, f, 0);
            }
        }
        if let Some(v) = self.eval(&self.nest.body, &c)? {
            if !self.sr.is_zero(v) {
                self.emit(v)?;
            }
        }
        Ok(())
    }

    fn eval(&mut self, n: &Node, cur: &[Cur]) -> Result<Option<Value>, ExecError> {
        Ok(match n {
            Node::Operand(o) => match cur[*o] {
                Cur::Value(v) => Some(v),
                _ => None,
            },
            Node::Mul(a, b) => match (self.eval(a, cur)?, self.eval(b, cur)?) {
                (Some(x), Some(y)) => {
                    self.count("mul");
                    Some(self.sr.mul(x, y).map_err(|e| self.overflow(e))?)
                }
                _ => None,
            },
            Node::Add(a, b) => match (self.eval(a, cur)?, self.eval(b, cur)?) {
                (Some(x), Some(y)) => {
                    self.count("add");
                    Some(self.sr.add(x, y).map_err(|e| self.overflow(e))?)
                }
                (x, None) => x,
                (None, y) => y,
            },
            Node::Sub(a, b) => match (self.eval(a, cur)?, self.eval(b, cur)?) {
                (Some(x), Some(y)) => {
                    self.count("add");
                    Some(self.sr.sub(x, y).map_err(|e| self.overflow(e))?)
                }
                (x, None) => x,
                (None, Some(y)) => {
                    let z = self.sr.zero();
                    let v = self.sr.sub(z, y).map_err(|e| self.overflow(e))?;
                    (!self.sr.is_zero(v)).then_some(v)
                }
            },
            Node::Take(args, pick) => {
                let mut vals = Vec::with_capacity(args.len());
                for a in args {
                    vals.push(self.eval(a, cur)?);
                }
                if vals.iter().all(Option::is_some) {
                    vals[*pick]
                } else {
                    None
                }
            }
        })
    }

    fn emit(&mut self, v: Value) -> Result<(), ExecError> {
        let key: Vec<Coord> = self
            .out_vars
            .iter()
            .map(|&x| Coord::Int(self.env[x]))
            .collect();
        let t = self.out_tensor;
        let depth = key.len();
        if depth == 0 {
            return Err(self.err("rank-0 outputs are not supported".into()));
        }
        let lin = |c: &Coord| c.components()[0] as u64;
        if let Some(old) = self.out.get(&key).copied() {
            let id = self.out_ids[&key];
            let parent = if depth > 1 {
                self.out_ids[&key[..depth - 1]]
            } else {
                0
            };
            self.record(
                t,
                depth - 1,
                Datum::Payload,
                false,
                parent,
                id,
                lin(&key[depth - 1]),
            );
            self.count("add");
            let nv = self.sr.add(old, v).map_err(|e| self.overflow(e))?;
            self.record(
                t,
                depth - 1,
                Datum::Payload,
                true,
                parent,
                id,
                lin(&key[depth - 1]),
            );
            self.out.insert(key, nv);
        } else {
            let mut parent = 0;
            for d in 0..depth {
                let p = &key[..=d];
                let id = match self.out_ids.get(p) {
                    Some(&id) => id,
                    None => {
                        let id = self.out_counts[d];
                        self.out_counts[d] += 1;
                        self.out_ids.insert(p.to_vec(), id);
                        self.record(t, d, Datum::Coord, true, parent, id, lin(&key[d]));
                        if d + 1 < depth {
                            self.record(t, d, Datum::Payload, true, parent, id, lin(&key[d]));
                        }
                        id
                    }
                };
                if d + 1 == depth {
                    self.record(t, d, Datum::Payload, true, parent, id, lin(&key[d]));
                }
                parent = id;
            }
            self.out.insert(key, v);
        }
        Ok(())
    }
}

fn join(a: Set, b: Set, mul: bool) -> Set {
    match (a, b, mul) {
        (Set::All, x, true) | (x, Set::All, true) => x,
        (Set::All, _, false) | (_, Set::All, false) => Set::All,
        (Set::List(x), Set::List(y), true) => Set::List(intersect_lists(&x, &y)),
        (Set::List(x), Set::List(y), false) => Set::List(union_lists(&x, &y)),
    }
}
