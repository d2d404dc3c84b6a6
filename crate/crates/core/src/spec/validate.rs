//! Cross-section consistency checks. Violations are collected, not thrown.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use super::ranks::{self, Rewrite};
use super::{BufferKind, ComponentClass, ProblemSpec};

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<String>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Names a rank of `tensor` may take after partitioning: the declared ranks
/// plus every name derived by splitting or flattening them.
pub fn derived_rank_names(spec: &ProblemSpec, tensor: &str) -> BTreeSet<String> {
    let mut out: BTreeSet<String> = spec
        .declaration
        .get(tensor)
        .map(|r| r.iter().cloned().collect())
        .unwrap_or_default();
    for _ in 0..4 {
        let before = out.len();
        for entries in spec.mapping.partitioning.values() {
            for e in entries {
                let base = e.ranks.concat();
                let covered = e.ranks.iter().all(|r| out.contains(r))
                    || (e.ranks.len() == 1 && out.contains(&base));
                if !covered {
                    continue;
                }
                let splits = e
                    .directives
                    .iter()
                    .filter(|d| !matches!(d, super::Directive::Flatten))
                    .count();
                out.insert(base.clone());
                for i in 0..=splits {
                    if splits > 0 {
                        out.insert(format!("{base}{i}"));
                    }
                }
            }
        }
        if out.len() == before {
            break;
        }
    }
    out
}

pub fn validate(spec: &ProblemSpec) -> ValidationReport {
    let mut v = Vec::new();
    let declared = |t: &str| spec.declaration.contains_key(t);

    for (t, order) in &spec.mapping.rank_order {
        let decl = &spec.declaration[t];
        let mut a = order.clone();
        let mut b = decl.clone();
        a.sort();
        b.sort();
        if a != b {
            v.push(format!(
                "rank-order of {t} {order:?} is not a permutation of its declaration {decl:?}"
            ));
        }
    }

    for e in &spec.expressions {
        let name = e.name();
        let parts = spec
            .mapping
            .partitioning
            .get(name)
            .cloned()
            .unwrap_or_default();
        for p in &parts {
            for d in &p.directives {
                if let super::Directive::UniformOccupancy { leader, .. } = d {
                    if !declared(leader) {
                        v.push(format!(
                            "partition leader {leader} of Einsum {name} is not a declared tensor"
                        ));
                    }
                }
            }
        }
        let rewritten = match ranks::rewrite(&e.iteration_ranks(), &parts, &spec.shapes) {
            Ok((r, steps)) => {
                for s in &steps {
                    if let Rewrite::Split { size, rank, .. } = s {
                        if *size == 0 {
                            v.push(format!("Einsum {name}: zero partition size for {rank}"));
                        }
                    }
                }
                r.into_iter().map(|r| r.name).collect::<Vec<_>>()
            }
            Err(m) => {
                v.push(format!("Einsum {name}: {m}"));
                continue;
            }
        };
        let loop_order = &spec.mapping.loop_order[name];
        let lo: BTreeSet<&String> = loop_order.iter().collect();
        let rw: BTreeSet<&String> = rewritten.iter().collect();
        if lo.len() != loop_order.len() {
            v.push(format!("loop-order of {name} repeats a rank"));
        }
        for r in rw.difference(&lo) {
            v.push(format!("loop-order of {name} is missing rank {r}"));
        }
        for r in lo.difference(&rw) {
            v.push(format!("loop-order of {name} names unknown rank {r}"));
        }
        let st = &spec.mapping.spacetime[name];
        let mut seen: BTreeMap<&String, usize> = BTreeMap::new();
        for r in st.space.iter().chain(&st.time) {
            *seen.entry(r).or_default() += 1;
        }
        for r in loop_order {
            match seen.get(r) {
                None => v.push(format!("rank {r} unscheduled in spacetime of {name}")),
                Some(n) if *n > 1 => {
                    v.push(format!("rank {r} appears twice in spacetime of {name}"))
                }
                _ => {}
            }
        }
        for r in seen.keys() {
            if !lo.contains(r) {
                v.push(format!(
                    "spacetime of {name} names rank {r} not in its loop-order"
                ));
            }
        }
        // spacetime must follow loop order
        let pos = |r: &String| loop_order.iter().position(|x| x == r);
        for list in [&st.space, &st.time] {
            let p: Vec<usize> = list.iter().filter_map(pos).collect();
            if p.windows(2).any(|w| w[0] > w[1]) {
                v.push(format!(
                    "spacetime of {name} lists {list:?} out of loop order"
                ));
            }
        }
    }

    for (t, cfgs) in &spec.format.tensors {
        let names = derived_rank_names(spec, t);
        for (c, tf) in cfgs {
            let mut seen = BTreeSet::new();
            for (r, _) in &tf.ranks {
                if !seen.insert(r) {
                    v.push(format!("format {t}.{c} lists rank {r} twice"));
                }
                if !names.contains(r) {
                    v.push(format!(
                        "format {t}.{c} names rank {r}, which {t} never has"
                    ));
                }
            }
            for r in &spec.declaration[t] {
                let covered = tf
                    .ranks
                    .iter()
                    .any(|(x, _)| x == r || (x.contains(r.as_str()) && names.contains(x)));
                if !covered {
                    v.push(format!("format {t}.{c} has no entry for rank {r}"));
                }
            }
        }
    }

    for (name, topo) in &spec.architecture.topologies {
        let mut seen = BTreeSet::new();
        for (_, _, c) in topo.components() {
            if !seen.insert(&c.name) {
                v.push(format!(
                    "component name {} repeats in topology {name}",
                    c.name
                ));
            }
            if let ComponentClass::Intersection {
                leader: Some(l), ..
            } = &c.class
            {
                if !declared(l) {
                    v.push(format!(
                        "intersection {} leader {l} is not a declared tensor",
                        c.name
                    ));
                }
            }
        }
    }

    for (e, eb) in &spec.binding.einsums {
        let Some(topo) = spec.architecture.topologies.get(&eb.topology) else {
            v.push(format!(
                "binding of {e} names unknown topology {}",
                eb.topology
            ));
            continue;
        };
        let loop_order = &spec.mapping.loop_order[e];
        let einsum = spec
            .einsum(e)
            .expect("binding keys are checked at parse time");
        let touched: Vec<&str> = std::iter::once(einsum.name())
            .chain(einsum.inputs())
            .collect();
        for (cname, entries) in &eb.components {
            let Some((_, _, comp)) = topo.component(cname) else {
                v.push(format!(
                    "binding of {e} names component {cname} missing from topology {}",
                    eb.topology
                ));
                continue;
            };
            for be in entries {
                if let Some(t) = &be.tensor {
                    if !declared(t) {
                        v.push(format!("binding {e}.{cname} names undeclared tensor {t}"));
                        continue;
                    }
                    if !touched.contains(&t.as_str()) {
                        v.push(format!("binding {e}.{cname} names tensor {t}, which Einsum {e} does not access"));
                    }
                    if let Some(c) = &be.config {
                        match spec.format.tensors.get(t).and_then(|m| m.get(c)) {
                            None => {
                                v.push(format!("binding {e}.{cname} names unknown format {t}.{c}"))
                            }
                            Some(tf) => {
                                if let Some(r) = &be.rank {
                                    if tf.get(r).is_none()
                                        && !derived_rank_names(spec, t).contains(r)
                                    {
                                        v.push(format!("binding {e}.{cname} names rank {r} absent from format {t}.{c}"));
                                    }
                                }
                            }
                        }
                    }
                }
                if comp.class.is_storage() {
                    if let ComponentClass::Buffer {
                        kind: BufferKind::Buffet,
                        ..
                    } = comp.class
                    {
                        if be.evict_on.is_none() {
                            v.push(format!("buffet {cname} binding in {e} has no evict-on"));
                        }
                    }
                    if let Some(r) = &be.evict_on {
                        let derived = |l: &String| {
                            l.strip_prefix(r.as_str()).is_some_and(|rest| {
                                !rest.is_empty() && rest.chars().all(|c| c.is_ascii_digit())
                            })
                        };
                        if r != "root" && !loop_order.contains(r) && !loop_order.iter().any(derived)
                        {
                            v.push(format!(
                                "buffet {cname} in {e} evicts on {r}, which is not a loop rank"
                            ));
                        }
                    }
                }
            }
        }
    }

    ValidationReport { violations: v }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spec::parse_spec;

    const BASE: &str = "einsum:\n  declaration:\n    A: [K, M]\n    B: [K, N]\n    Z: [M, N]\n  expressions:\n    - Z[m, n] = A[k, m] * B[k, n]\n";

    #[test]
    fn defaults_are_valid() {
        let s = parse_spec(BASE).unwrap();
        assert!(validate(&s).is_empty(), "{:?}", validate(&s));
    }

    #[test]
    fn unscheduled_rank() {
        let src = format!(
            "{BASE}mapping:\n  loop-order:\n    Z: [M, K, N]\n  spacetime:\n    Z:\n      space: []\n      time: [M, K]\n"
        );
        let r = validate(&parse_spec(&src).unwrap());
        assert!(
            r.violations
                .iter()
                .any(|m| m.contains("rank N unscheduled")),
            "{r:?}"
        );
    }

    #[test]
    fn buffet_needs_evict_on() {
        let src = format!(
            "{BASE}architecture:\n  clock: 1000000000\n  topologies:\n    T:\n      - name: chip\n        local:\n          - {{name: Buf, class: Buffer, type: buffet, width: 8, depth: 64, bandwidth: 8}}\nbinding:\n  Z:\n    topology: T\n    components:\n      Buf:\n        - {{tensor: A, type: coord}}\n"
        );
        let r = validate(&parse_spec(&src).unwrap());
        assert!(
            r.violations
                .iter()
                .any(|m| m.contains("Buf") && m.contains("evict-on")),
            "{r:?}"
        );
    }
}
