//! Per-action energy table: lines of `component.action = pJ`, where
//! `component` is a component name or a class name (`DRAM`, `Cache`,
//! `Buffet`, `Intersection`, `Merger`, `Compute`).

use std::collections::BTreeMap;

/// Built-in table. Order-of-magnitude placeholders, not validated against
/// any process technology.
pub const DEFAULT_TABLE: &str = "\
# pJ per action (placeholder magnitudes, not validated)
DRAM.read_bytes = 20
DRAM.write_bytes = 20
Cache.hits = 10
Cache.misses = 12
Cache.writebacks = 12
Cache.reads = 0
Cache.writes = 0
Buffet.reads = 4
Buffet.writes = 4
Buffet.fills = 4
Buffet.drains = 4
Intersection.tests = 0.5
Intersection.matches = 0
Merger.moves = 1
Merger.passes = 0
Compute.mul = 1
Compute.add = 0.5
";

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("energy table line {line}: {msg}")]
pub struct TableError {
    pub line: usize,
    pub msg: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EnergyTable {
    entries: BTreeMap<String, f64>,
}

impl EnergyTable {
    pub fn parse(text: &str) -> Result<Self, TableError> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: &str| TableError {
                line: i + 1,
                msg: msg.into(),
            };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err("expected `component.action = pJ`"))?;
            let k = k.trim();
            if !k.contains('.') {
                return Err(err("key must be `component.action`"));
            }
            let v: f64 = v.trim().parse().map_err(|_| err("value is not a number"))?;
            if !(v >= 0.0 && v.is_finite()) {
                return Err(err("energy must be finite and nonnegative"));
            }
            entries.insert(k.to_string(), v);
        }
        Ok(EnergyTable { entries })
    }

    pub fn builtin() -> Self {
        Self::parse(DEFAULT_TABLE).expect("built-in table parses")
    }

    /// Cost of one action, looked up by component name then class.
    pub fn lookup(&self, component: &str, class: &str, action: &str) -> Option<f64> {
        self.entries
            .get(&format!("{component}.{action}"))
            .or_else(|| self.entries.get(&format!("{class}.{action}")))
            .copied()
    }

    /// Energy of a component's actions in pJ, and the actions with a
    /// nonzero count that have no entry.
    pub fn energy(
        &self,
        component: &str,
        class: &str,
        actions: &BTreeMap<String, u64>,
    ) -> (f64, Vec<String>) {
        let mut pj = 0.0;
        let mut missing = Vec::new();
        for (a, &n) in actions {
            match self.lookup(component, class, a) {
                Some(e) => pj += n as f64 * e,
                None if n > 0 => missing.push(a.clone()),
                None => {}
            }
        }
        (pj, missing)
    }
}
