//! Turns traces into per-component action counts, cycles and energy, and
//! composes Einsum times into block and cascade times.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};

use serde::{Deserialize, Serialize};

use super::energy::EnergyTable;
use super::merger::merge_cost;
use super::storage::{Buffet, Lru, Touch, Transfer};
use crate::compiler::FusionSchedule;
use crate::executor::{intersect_unit, Datum, Trace};
use crate::format::{
    access_cost, select_config, tensor_format, trace_formats, FormatError, Region,
};
use crate::spec::{
    BindEntry, BufferKind, Component, ComponentClass, ComputeKind, DatumType, ProblemSpec,
};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Traffic {
    pub read_bytes: u64,
    pub write_bytes: u64,
}

impl Traffic {
    pub fn total(&self) -> u64 {
        self.read_bytes + self.write_bytes
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentReport {
    pub name: String,
    pub class: String,
    pub instances: usize,
    pub actions: BTreeMap<String, u64>,
    pub cycles: u64,
    pub energy_pj: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EinsumReport {
    pub einsum: String,
    pub modeled: bool,
    pub components: Vec<ComponentReport>,
    pub bottleneck: Option<String>,
    pub cycles: u64,
    pub energy_pj: f64,
    /// DRAM traffic by tensor.
    pub dram: BTreeMap<String, Traffic>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockReport {
    pub einsums: Vec<String>,
    pub cycles: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelReport {
    pub einsums: Vec<EinsumReport>,
    pub blocks: Vec<BlockReport>,
    pub cycles: u64,
    pub clock_hz: f64,
    pub seconds: f64,
    pub dram: BTreeMap<String, Traffic>,
    pub dram_bytes: u64,
    pub energy_pj: f64,
    pub diagnostics: Vec<String>,
}

/// Rank of a component class when breaking bottleneck ties: data movement
/// first, compute last.
fn tie_rank(class: &ComponentClass) -> u8 {
    match class {
        ComponentClass::Dram { .. } => 0,
        ComponentClass::Buffer { .. } => 1,
        ComponentClass::Merger { .. } => 2,
        ComponentClass::Intersection { .. } => 3,
        ComponentClass::Compute { .. } => 4,
    }
}

fn instance(space: u32, fanout: usize) -> usize {
    if space == u32::MAX {
        0
    } else {
        space as usize % fanout.max(1)
    }
}

fn entry_matches(
    e: &BindEntry,
    tensor: &str,
    config: Option<&str>,
    rank: &str,
    bases: &[String],
    datum: Datum,
) -> bool {
    e.tensor.as_deref().is_none_or(|t| t == tensor)
        && e.config.as_deref().is_none_or(|c| Some(c) == config)
        && e.rank
            .as_deref()
            .is_none_or(|r| r == rank || bases.iter().any(|b| b == r))
        && match (e.kind, datum) {
            (None | Some(DatumType::Elem), _) | (_, Datum::Header) => true,
            (Some(DatumType::Coord), d) => d == Datum::Coord,
            (Some(DatumType::Payload), d) => d == Datum::Payload,
        }
}

/// Storage levels a datum passes through, innermost first, each with the
/// loop level whose changes end a buffet epoch.
type Chain = Vec<(usize, Option<usize>)>;

type LineKey = (u32, u16, u16, Region, u64);

enum Store {
    Dram,
    Cache { lru: Lru<LineKey>, line_bits: u64 },
    Buffet(Buffet<LineKey>),
}

#[derive(Debug, Clone, Copy)]
struct Req {
    chain: u32,
    pos: usize,
    tensor: u16,
    rank: u16,
    region: Region,
    offset: u64,
    bits: u64,
    write: bool,
    space: u32,
    epoch_point: Option<u32>,
}

#[derive(Default)]
struct Served {
    read_bits: u64,
    write_bits: u64,
}

struct Sim<'a> {
    trace: &'a Trace,
    comps: Vec<(usize, usize, &'a Component)>,
    chains: Vec<Chain>,
    stores: BTreeMap<(usize, usize), Store>,
    served: BTreeMap<(usize, usize), Served>,
    dram_bits: BTreeMap<String, (u64, u64)>,
}

fn store_for<'s>(
    stores: &'s mut BTreeMap<(usize, usize), Store>,
    comp: &Component,
    ci: usize,
    inst: usize,
) -> &'s mut Store {
    stores
        .entry((ci, inst))
        .or_insert_with(|| match &comp.class {
            ComponentClass::Buffer {
                kind: BufferKind::Cache,
                width,
                depth,
                ..
            } => Store::Cache {
                lru: Lru::new((*depth).max(1)),
                line_bits: (*width as u64).max(1) * 8,
            },
            ComponentClass::Buffer { width, depth, .. } => {
                Store::Buffet(Buffet::new((*width * *depth) as u64))
            }
            _ => Store::Dram,
        })
}

impl<'a> Sim<'a> {
    fn send(&mut self, first: Req) {
        let mut queue = VecDeque::from([first]);
        while let Some(r) = queue.pop_front() {
            let chain_len = self.chains[r.chain as usize].len();
            let (ci, evict) = self.chains[r.chain as usize][r.pos];
            let inst = instance(r.space, self.comps[ci].1);
            let s = self.served.entry((ci, inst)).or_default();
            if r.write {
                s.write_bits += r.bits;
            } else {
                s.read_bits += r.bits;
            }
            let up = |offset: u64, bits: u64, write: bool| Req {
                pos: r.pos + 1,
                offset,
                bits,
                write,
                ..r
            };
            let has_parent = r.pos + 1 < chain_len;
            let epoch = match (evict, r.epoch_point) {
                (Some(l), Some(p)) => Some(self.trace.points[p as usize].epochs[l]),
                (None, Some(_)) => Some(0),
                (_, None) => None,
            };
            let name = self.trace.tensors[r.tensor as usize].name.clone();
            match store_for(&mut self.stores, self.comps[ci].2, ci, inst) {
                Store::Dram => {
                    let e = self.dram_bits.entry(name).or_default();
                    if r.write {
                        e.1 += r.bits;
                    } else {
                        e.0 += r.bits;
                    }
                }
                Store::Cache { lru, line_bits } => {
                    let lb = *line_bits;
                    let first_line = r.offset / lb;
                    let last_line = (r.offset + r.bits - 1) / lb;
                    for line in first_line..=last_line {
                        let key = (r.chain, r.tensor, r.rank, r.region, line);
                        if let Touch::Miss { evicted } = lru.access(key, r.write) {
                            if has_parent && !r.write {
                                queue.push_back(up(line * lb, lb, false));
                            }
                            if let Some(((c, t, k, g, l), true)) = evicted {
                                if let Some(pos) = parent_pos(&self.chains, c, ci) {
                                    queue.push_back(Req {
                                        chain: c,
                                        pos,
                                        tensor: t,
                                        rank: k,
                                        region: g,
                                        ..up(l * lb, lb, true)
                                    });
                                }
                            }
                        }
                    }
                }
                Store::Buffet(b) => {
                    let key = (r.chain, r.tensor, r.rank, r.region, r.offset);
                    let part = r.tensor as usize;
                    for t in b.access(part, epoch, key, r.bits, r.write) {
                        let (k, bits, write) = match t {
                            Transfer::Fill(k, b) => (k, b, false),
                            Transfer::Drain(k, b) => (k, b, true),
                        };
                        let Some(pos) = parent_pos(&self.chains, k.0, ci) else {
                            continue;
                        };
                        queue.push_back(Req {
                            chain: k.0,
                            pos,
                            tensor: k.1,
                            rank: k.2,
                            region: k.3,
                            ..up(k.4, bits, write)
                        });
                    }
                }
            }
        }
    }

    /// Flushes caches and ends buffet epochs, innermost levels first.
    fn finish(&mut self) {
        let mut keys: Vec<(usize, usize)> = self.stores.keys().copied().collect();
        let order = |ci: usize| {
            let (depth, _, c) = self.comps[ci];
            let dram = matches!(c.class, ComponentClass::Dram { .. });
            (dram, std::cmp::Reverse(depth), std::cmp::Reverse(ci))
        };
        keys.sort_by_key(|&(ci, inst)| (order(ci), inst));
        for (ci, inst) in keys {
            let pending: Vec<(LineKey, u64)> = match self.stores.get_mut(&(ci, inst)) {
                Some(Store::Cache { lru, line_bits }) => {
                    let lb = *line_bits;
                    lru.flush()
                        .into_iter()
                        .map(|k| ((k.0, k.1, k.2, k.3, k.4 * lb), lb))
                        .collect()
                }
                Some(Store::Buffet(b)) => b
                    .finish()
                    .into_iter()
                    .filter_map(|t| match t {
                        Transfer::Drain(k, bits) => Some((k, bits)),
                        Transfer::Fill(..) => None,
                    })
                    .collect(),
                _ => Vec::new(),
            };
            for (k, bits) in pending {
                if let Some(pos) = parent_pos(&self.chains, k.0, ci) {
                    self.send(Req {
                        chain: k.0,
                        pos,
                        tensor: k.1,
                        rank: k.2,
                        region: k.3,
                        offset: k.4,
                        bits,
                        write: true,
                        space: if inst == 0 { u32::MAX } else { inst as u32 },
                        epoch_point: None,
                    });
                }
            }
        }
    }
}

/// Position of the level above component `ci` in chain `c`, if any.
fn parent_pos(chains: &[Chain], c: u32, ci: usize) -> Option<usize> {
    let chain = &chains[c as usize];
    let pos = chain.iter().position(|(x, _)| *x == ci)? + 1;
    (pos < chain.len()).then_some(pos)
}

/// Tensors written and later read inside the same fused block.
pub fn fused_intermediates(
    spec: &ProblemSpec,
    schedule: &FusionSchedule,
    einsum: usize,
) -> BTreeSet<String> {
    let block = &schedule.blocks[schedule.block_of(einsum)];
    let mut out = BTreeSet::new();
    for &w in block {
        let name = spec.expressions[w].name();
        if block
            .iter()
            .any(|&r| r > w && spec.expressions[r].inputs().contains(&name))
        {
            out.insert(name.to_string());
        }
    }
    out
}

/// Action counts and cycles of every component used by one Einsum.
pub fn model_einsum(
    spec: &ProblemSpec,
    trace: &Trace,
    fused: &BTreeSet<String>,
    table: &EnergyTable,
    diagnostics: &mut Vec<String>,
) -> Result<EinsumReport, FormatError> {
    let einsum = trace.einsum.as_str();
    let Some(binding) = spec.binding.einsums.get(einsum) else {
        diagnostics.push(format!("Einsum {einsum}: no binding, not modeled"));
        return Ok(EinsumReport {
            einsum: einsum.into(),
            modeled: false,
            components: Vec::new(),
            bottleneck: None,
            cycles: 0,
            energy_pj: 0.0,
            dram: BTreeMap::new(),
        });
    };
    let topo = &spec.architecture.topologies[&binding.topology];
    let comps: Vec<(usize, usize, &Component)> = topo.components().collect();
    let clock = spec.architecture.clock;
    let no_entries: Vec<BindEntry> = Vec::new();
    let entries = |name: &str| binding.components.get(name).unwrap_or(&no_entries);

    let configs: Vec<Option<String>> = trace
        .tensors
        .iter()
        .map(|t| select_config(spec, einsum, &t.name))
        .collect();
    let mut formats = Vec::with_capacity(trace.tensors.len());
    for (t, c) in trace.tensors.iter().zip(&configs) {
        let tf = tensor_format(spec, &t.name, c.as_deref())?;
        formats.push(trace_formats(t, &tf));
    }

    let dram_idx = comps
        .iter()
        .position(|(_, _, c)| matches!(c.class, ComponentClass::Dram { .. }));
    let mut sim = Sim {
        trace,
        comps: comps.clone(),
        chains: Vec::new(),
        stores: BTreeMap::new(),
        served: BTreeMap::new(),
        dram_bits: BTreeMap::new(),
    };
    let mut chain_of: HashMap<(u16, u16, Datum), Option<u32>> = HashMap::new();
    let mut unbound: BTreeMap<String, u64> = BTreeMap::new();
    for rec in &trace.records {
        let tt = &trace.tensors[rec.tensor as usize];
        let Some(fmt) = formats[rec.tensor as usize][rec.rank as usize] else {
            continue;
        };
        let acc = access_cost(rec, &fmt, tt.extents[rec.rank as usize]);
        if acc.bits == 0 {
            continue;
        }
        let chain = *chain_of
            .entry((rec.tensor, rec.rank, rec.datum))
            .or_insert_with(|| {
                let rank = &tt.ranks[rec.rank as usize];
                let bases = &tt.bases[rec.rank as usize];
                let config = configs[rec.tensor as usize].as_deref();
                let mut levels: Vec<(usize, usize, Option<usize>)> = Vec::new();
                for (ci, (depth, _, c)) in comps.iter().enumerate() {
                    if !c.class.is_storage() {
                        continue;
                    }
                    if let Some(e) = entries(&c.name)
                        .iter()
                        .find(|e| entry_matches(e, &tt.name, config, rank, bases, rec.datum))
                    {
                        let evict = e.evict_on.as_deref().and_then(|r| trace.evict_level(r));
                        levels.push((*depth, ci, evict));
                    }
                }
                let is_dram = |ci: usize| matches!(comps[ci].2.class, ComponentClass::Dram { .. });
                let has_buffer = levels.iter().any(|l| !is_dram(l.1));
                if fused.contains(&tt.name) && has_buffer {
                    levels.retain(|l| !is_dram(l.1));
                } else if has_buffer && !levels.iter().any(|l| is_dram(l.1)) {
                    if let Some(d) = dram_idx {
                        levels.push((0, d, None));
                    }
                }
                if levels.is_empty() {
                    return None;
                }
                // innermost first, main memory last
                levels.sort_by_key(|&(depth, ci, _)| {
                    (is_dram(ci), std::cmp::Reverse(depth), std::cmp::Reverse(ci))
                });
                sim.chains
                    .push(levels.into_iter().map(|(_, ci, e)| (ci, e)).collect());
                Some(sim.chains.len() as u32 - 1)
            });
        let Some(chain) = chain else {
            *unbound.entry(tt.name.clone()).or_default() += acc.bits as u64;
            continue;
        };
        sim.send(Req {
            chain,
            pos: 0,
            tensor: rec.tensor,
            rank: rec.rank,
            region: acc.region,
            offset: acc.offset,
            bits: acc.bits as u64,
            write: rec.write,
            space: rec.space,
            epoch_point: Some(rec.point),
        });
    }
    sim.finish();
    for (t, bits) in unbound {
        diagnostics.push(format!(
            "Einsum {einsum}: {} bytes of {t} have no storage binding",
            bits.div_ceil(8)
        ));
    }

    let mut dram: BTreeMap<String, Traffic> = BTreeMap::new();
    for (t, (r, w)) in &sim.dram_bits {
        dram.insert(
            t.clone(),
            Traffic {
                read_bytes: r.div_ceil(8),
                write_bytes: w.div_ceil(8),
            },
        );
    }

    let intersect = intersect_unit(spec, einsum).map(|(n, _, _)| n);
    let mut reports = Vec::new();
    let mut claimed_merges = vec![false; trace.merges.len()];
    let mut compute_used = BTreeSet::new();
    for (ci, (_, fanout, c)) in comps.iter().enumerate() {
        let bound = binding.components.contains_key(&c.name);
        let active = sim.served.keys().any(|(k, _)| *k == ci);
        if !bound && !active {
            continue;
        }
        let mut actions: BTreeMap<String, u64> = BTreeMap::new();
        let cycles = match &c.class {
            ComponentClass::Dram { bandwidth } => {
                let (r, w): (u64, u64) = dram
                    .values()
                    .fold((0, 0), |a, t| (a.0 + t.read_bytes, a.1 + t.write_bytes));
                actions.insert("read_bytes".into(), r);
                actions.insert("write_bytes".into(), w);
                let per_cycle = bandwidth * 1e9 / clock;
                ((r + w) as f64 / per_cycle).ceil() as u64
            }
            ComponentClass::Buffer {
                kind, bandwidth, ..
            } => {
                let mut per_inst: BTreeMap<usize, u64> = BTreeMap::new();
                let (mut reads, mut writes) = (0, 0);
                for ((k, inst), s) in &sim.served {
                    if *k == ci {
                        *per_inst.entry(*inst).or_default() +=
                            (s.read_bits + s.write_bits).div_ceil(8);
                        reads += s.read_bits.div_ceil(8);
                        writes += s.write_bits.div_ceil(8);
                    }
                }
                match kind {
                    BufferKind::Cache => {
                        let (mut h, mut m, mut wb) = (0, 0, 0);
                        for ((k, _), s) in &sim.stores {
                            if let (true, Store::Cache { lru, .. }) = (*k == ci, s) {
                                h += lru.counts.hits;
                                m += lru.counts.misses;
                                wb += lru.counts.writebacks;
                            }
                        }
                        actions.insert("hits".into(), h);
                        actions.insert("misses".into(), m);
                        actions.insert("writebacks".into(), wb);
                    }
                    BufferKind::Buffet => {
                        let (mut f, mut d) = (0, 0);
                        let mut overflow = false;
                        for ((k, _), s) in &sim.stores {
                            if let (true, Store::Buffet(b)) = (*k == ci, s) {
                                f += b.counts.fills;
                                d += b.counts.drains;
                                overflow |= b.overflowed();
                            }
                        }
                        if overflow {
                            diagnostics.push(format!(
                                "Einsum {einsum}: buffet {} overflows its capacity",
                                c.name
                            ));
                        }
                        actions.insert("fills".into(), f);
                        actions.insert("drains".into(), d);
                    }
                }
                actions.insert("reads".into(), reads);
                actions.insert("writes".into(), writes);
                let max = per_inst.values().copied().max().unwrap_or(0);
                (max as f64 / bandwidth).ceil() as u64
            }
            ComponentClass::Intersection { .. } => {
                let mut per_inst: BTreeMap<usize, u64> = BTreeMap::new();
                let (mut tests, mut matches) = (0, 0);
                if intersect.as_deref() == Some(c.name.as_str()) {
                    for (space, st) in &trace.intersections {
                        *per_inst.entry(instance(*space, *fanout)).or_default() += st.tests;
                        tests += st.tests;
                        matches += st.matches;
                    }
                }
                actions.insert("tests".into(), tests);
                actions.insert("matches".into(), matches);
                per_inst.values().copied().max().unwrap_or(0)
            }
            ComponentClass::Merger {
                comparator_radix,
                outputs,
                order,
                reduce,
                ..
            } => {
                let mut per_inst: BTreeMap<usize, u64> = BTreeMap::new();
                let (mut moves, mut passes) = (0, 0);
                let mut g = 0usize;
                for (i, ev) in trace.merges.iter().enumerate() {
                    if !entries(&c.name)
                        .iter()
                        .any(|e| e.tensor.as_deref().is_none_or(|t| t == ev.tensor))
                    {
                        continue;
                    }
                    claimed_merges[i] = true;
                    for grp in &ev.groups {
                        let cost =
                            merge_cost(grp, *comparator_radix, *order, *reduce, ev.consumption);
                        *per_inst.entry(g % (*fanout).max(1)).or_default() += cost.moves;
                        moves += cost.moves;
                        passes = passes.max(cost.passes);
                        g += 1;
                    }
                }
                actions.insert("moves".into(), moves);
                actions.insert("passes".into(), passes);
                let max = per_inst.values().copied().max().unwrap_or(0);
                max.div_ceil((*outputs).max(1) as u64)
            }
            ComponentClass::Compute { kind } => {
                let own = match kind {
                    ComputeKind::Mul => "mul",
                    ComputeKind::Add => "add",
                };
                let roles: BTreeSet<&str> = entries(&c.name)
                    .iter()
                    .map(|e| e.op.as_deref().unwrap_or(own))
                    .chain(entries(&c.name).is_empty().then_some(own))
                    .collect();
                let mut per_inst: BTreeMap<usize, u64> = BTreeMap::new();
                for role in &roles {
                    compute_used.insert(role.to_string());
                    let mut n = 0;
                    for ((op, space), k) in &trace.compute {
                        if op == role {
                            *per_inst.entry(instance(*space, *fanout)).or_default() += k;
                            n += k;
                        }
                    }
                    actions.insert(role.to_string(), n);
                }
                per_inst.values().copied().max().unwrap_or(0)
            }
        };
        let (energy_pj, missing) = table.energy(&c.name, c.class.class_name(), &actions);
        for a in missing {
            diagnostics.push(format!(
                "no energy entry for {}.{a} ({})",
                c.name,
                c.class.class_name()
            ));
        }
        reports.push(ComponentReport {
            name: c.name.clone(),
            class: c.class.class_name().into(),
            instances: *fanout,
            actions,
            cycles,
            energy_pj,
        });
    }
    for (ev, claimed) in trace.merges.iter().zip(&claimed_merges) {
        if !claimed {
            diagnostics.push(format!(
                "Einsum {einsum}: unmodeled swizzle of {} from {:?} to {:?}",
                ev.tensor, ev.from, ev.to
            ));
        }
    }
    for (op, _) in trace.compute.keys() {
        if !compute_used.contains(op) {
            let msg = format!("Einsum {einsum}: {op} operations have no bound compute unit");
            if !diagnostics.contains(&msg) {
                diagnostics.push(msg);
            }
        }
    }

    let mut bottleneck: Option<(usize, u64)> = None;
    for (i, r) in reports.iter().enumerate() {
        let class = &comps
            .iter()
            .find(|(_, _, c)| c.name == r.name)
            .expect("reported component exists")
            .2
            .class;
        bottleneck = match bottleneck {
            Some((j, best)) if best > r.cycles => Some((j, best)),
            Some((j, best)) if best == r.cycles => {
                let other = &comps
                    .iter()
                    .find(|(_, _, c)| c.name == reports[j].name)
                    .expect("exists")
                    .2
                    .class;
                if tie_rank(class) < tie_rank(other) {
                    Some((i, r.cycles))
                } else {
                    Some((j, best))
                }
            }
            _ => Some((i, r.cycles)),
        };
    }
    Ok(EinsumReport {
        einsum: einsum.into(),
        modeled: true,
        cycles: bottleneck.map_or(0, |b| b.1),
        bottleneck: bottleneck.map(|(i, _)| reports[i].name.clone()),
        energy_pj: reports.iter().map(|r| r.energy_pj).sum(),
        components: reports,
        dram,
    })
}

/// Models every Einsum, then composes: a fused block takes as long as its
/// slowest Einsum and blocks run one after another.
pub fn model_cascade(
    spec: &ProblemSpec,
    schedule: &FusionSchedule,
    traces: &[&Trace],
    table: &EnergyTable,
) -> Result<ModelReport, FormatError> {
    let mut diagnostics = Vec::new();
    let mut einsums = Vec::with_capacity(traces.len());
    for (i, t) in traces.iter().enumerate() {
        let fused = fused_intermediates(spec, schedule, i);
        einsums.push(model_einsum(spec, t, &fused, table, &mut diagnostics)?);
    }
    let blocks: Vec<BlockReport> = schedule
        .blocks
        .iter()
        .map(|b| BlockReport {
            einsums: b.iter().map(|&i| einsums[i].einsum.clone()).collect(),
            cycles: b.iter().map(|&i| einsums[i].cycles).max().unwrap_or(0),
        })
        .collect();
    let cycles = blocks.iter().map(|b| b.cycles).sum();
    let mut dram: BTreeMap<String, Traffic> = BTreeMap::new();
    for e in &einsums {
        for (t, tr) in &e.dram {
            let d = dram.entry(t.clone()).or_default();
            d.read_bytes += tr.read_bytes;
            d.write_bytes += tr.write_bytes;
        }
    }
    let mut seen = BTreeSet::new();
    diagnostics.retain(|d| seen.insert(d.clone()));
    let clock = spec.architecture.clock;
    Ok(ModelReport {
        dram_bytes: dram.values().map(Traffic::total).sum(),
        energy_pj: einsums.iter().map(|e| e.energy_pj).sum(),
        einsums,
        blocks,
        cycles,
        clock_hz: clock,
        seconds: cycles as f64 / clock,
        dram,
        diagnostics,
    })
}

impl ModelReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Aligned-column summary: one row per component of each Einsum.
    pub fn to_table(&self) -> String {
        let mut rows: Vec<[String; 6]> = vec![[
            "einsum".into(),
            "component".into(),
            "class".into(),
            "cycles".into(),
            "energy_pj".into(),
            "actions".into(),
        ]];
        for e in &self.einsums {
            if !e.modeled {
                rows.push([
                    e.einsum.clone(),
                    "-".into(),
                    "-".into(),
                    "0".into(),
                    "0".into(),
                    "not modeled".into(),
                ]);
                continue;
            }
            for c in &e.components {
                let mark = if e.bottleneck.as_deref() == Some(c.name.as_str()) {
                    "*"
                } else {
                    ""
                };
                let acts: Vec<String> = c.actions.iter().map(|(k, v)| format!("{k}={v}")).collect();
                rows.push([
                    e.einsum.clone(),
                    format!("{}{mark}", c.name),
                    c.class.clone(),
                    c.cycles.to_string(),
                    format!("{:.1}", c.energy_pj),
                    acts.join(" "),
                ]);
            }
        }
        let widths: Vec<usize> = (0..6)
            .map(|i| rows.iter().map(|r| r[i].len()).max().unwrap_or(0))
            .collect();
        let mut s = String::new();
        for r in &rows {
            let cells: Vec<String> = r
                .iter()
                .zip(&widths)
                .map(|(c, w)| format!("{c:<w$}"))
                .collect();
            s.push_str(cells.join("  ").trim_end());
            s.push('\n');
        }
        s.push('\n');
        for b in &self.blocks {
            s.push_str(&format!(
                "block [{}]: {} cycles\n",
                b.einsums.join(", "),
                b.cycles
            ));
        }
        s.push_str(&format!(
            "total: {} cycles, {:.6e} s, {} DRAM bytes, {:.1} pJ\n",
            self.cycles, self.seconds, self.dram_bytes, self.energy_pj
        ));
        for d in &self.diagnostics {
            s.push_str(&format!("warning: {d}\n"));
        }
        s
    }
}
