//! Storage models: an LRU cache over fixed-size lines and an explicitly
//! filled and drained buffet.

use std::collections::{BTreeMap, HashMap};
use std::hash::Hash;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CacheCounts {
    pub hits: u64,
    pub misses: u64,
    pub writebacks: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Touch<K> {
    Hit,
    /// The line was absent; `evicted` is the victim and whether it was dirty.
    Miss {
        evicted: Option<(K, bool)>,
    },
}

/// Least-recently-used set of `capacity` lines.
#[derive(Debug, Clone)]
pub struct Lru<K> {
    capacity: usize,
    tick: u64,
    lines: HashMap<K, (u64, bool)>,
    order: BTreeMap<u64, K>,
    pub counts: CacheCounts,
}

impl<K: Clone + Eq + Hash> Lru<K> {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity >= 1, "cache needs at least one line");
        Lru {
            capacity,
            tick: 0,
            lines: HashMap::new(),
            order: BTreeMap::new(),
            counts: CacheCounts::default(),
        }
    }

    pub fn access(&mut self, key: K, write: bool) -> Touch<K> {
        self.tick += 1;
        if let Some((stamp, dirty)) = self.lines.get_mut(&key) {
            self.order.remove(stamp);
            *stamp = self.tick;
            *dirty |= write;
            self.order.insert(self.tick, key);
            self.counts.hits += 1;
            return Touch::Hit;
        }
        self.counts.misses += 1;
        let mut evicted = None;
        if self.lines.len() == self.capacity {
            let (_, victim) = self.order.pop_first().expect("full cache has lines");
            let (_, dirty) = self
                .lines
                .remove(&victim)
                .expect("ordered line is resident");
            if dirty {
                self.counts.writebacks += 1;
            }
            evicted = Some((victim, dirty));
        }
        self.lines.insert(key.clone(), (self.tick, write));
        self.order.insert(self.tick, key);
        Touch::Miss { evicted }
    }

    /// Writes back every dirty line, oldest first, leaving the cache empty.
    pub fn flush(&mut self) -> Vec<K> {
        let mut out = Vec::new();
        while let Some((_, k)) = self.order.pop_first() {
            if let Some((_, true)) = self.lines.remove(&k) {
                self.counts.writebacks += 1;
                out.push(k);
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BuffetCounts {
    /// Bits brought in from the parent.
    pub fill_bits: u64,
    /// Bits released at epoch ends.
    pub drain_bits: u64,
    pub fills: u64,
    pub drains: u64,
    /// Largest occupancy reached, in bits.
    pub peak_bits: u64,
}

#[derive(Debug, Clone, Default)]
struct Partition<K> {
    epoch: Option<u64>,
    resident: BTreeMap<K, (u64, bool)>,
}

/// What a buffet asks of its parent.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Transfer<K> {
    Fill(K, u64),
    Drain(K, u64),
}

/// Data is filled on first touch within an epoch and drained when the
/// partition's epoch changes. Each bound tensor is a partition with its own
/// epochs; all share the capacity.
#[derive(Debug, Clone)]
pub struct Buffet<K> {
    capacity_bits: u64,
    occupancy: u64,
    parts: BTreeMap<usize, Partition<K>>,
    pub counts: BuffetCounts,
}

impl<K: Clone + Ord> Buffet<K> {
    pub fn new(capacity_bytes: u64) -> Self {
        Buffet {
            capacity_bits: capacity_bytes * 8,
            occupancy: 0,
            parts: BTreeMap::new(),
            counts: BuffetCounts::default(),
        }
    }

    pub fn overflowed(&self) -> bool {
        self.counts.peak_bits > self.capacity_bits
    }

    /// Touches `bits` of datum `key` in `part` during `epoch`. Returns the
    /// parent transfers caused: the drain of the previous epoch, if any,
    /// then the fill of this datum when it is read and not yet resident.
    /// Dirty data is written to the parent on drain.
    /// `epoch` of `None` joins the partition's current epoch.
    pub fn access(
        &mut self,
        part: usize,
        epoch: Option<u64>,
        key: K,
        bits: u64,
        write: bool,
    ) -> Vec<Transfer<K>> {
        let mut out = Vec::new();
        let p = self.parts.entry(part).or_insert_with(|| Partition {
            epoch,
            resident: BTreeMap::new(),
        });
        if epoch.is_some() && p.epoch != epoch {
            p.epoch = epoch;
            let old = std::mem::take(&mut p.resident);
            drain(&mut self.counts, &mut self.occupancy, old, &mut out);
        }
        let p = self.parts.get_mut(&part).expect("partition exists");
        match p.resident.get_mut(&key) {
            Some((_, dirty)) => *dirty |= write,
            None => {
                p.resident.insert(key.clone(), (bits, write));
                self.occupancy += bits;
                self.counts.peak_bits = self.counts.peak_bits.max(self.occupancy);
                if !write {
                    self.counts.fills += 1;
                    self.counts.fill_bits += bits;
                    out.push(Transfer::Fill(key, bits));
                }
            }
        }
        out
    }

    /// Ends every epoch.
    pub fn finish(&mut self) -> Vec<Transfer<K>> {
        let mut out = Vec::new();
        for p in self.parts.values_mut() {
            let old = std::mem::take(&mut p.resident);
            drain(&mut self.counts, &mut self.occupancy, old, &mut out);
        }
        out
    }
}

fn drain<K>(
    c: &mut BuffetCounts,
    occupancy: &mut u64,
    old: BTreeMap<K, (u64, bool)>,
    out: &mut Vec<Transfer<K>>,
) {
    for (k, (bits, dirty)) in old {
        c.drains += 1;
        c.drain_bits += bits;
        *occupancy -= bits;
        if dirty {
            out.push(Transfer::Drain(k, bits));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(seq: &str, lines: usize) -> CacheCounts {
        let mut c = Lru::new(lines);
        for ch in seq.chars() {
            c.access(ch, false);
        }
        c.counts
    }

    #[test]
    fn lru_thrash() {
        assert_eq!(run("ABCABC", 2).misses, 6);
    }

    #[test]
    fn lru_reuse() {
        let c = run("AAA", 2);
        assert_eq!((c.misses, c.hits), (1, 2));
    }

    #[test]
    fn lru_hand_simulated() {
        // A miss, A hit, B miss, A hit, C miss (evicts B), A hit
        let c = run("AABACA", 2);
        assert_eq!((c.misses, c.hits), (3, 3));
    }

    #[test]
    fn lru_writeback_on_evict_and_flush() {
        let mut c = Lru::new(1);
        c.access(1, true);
        assert_eq!(
            c.access(2, false),
            Touch::Miss {
                evicted: Some((1, true))
            }
        );
        c.access(2, true);
        assert_eq!(c.flush(), vec![2]);
        assert_eq!(c.counts.writebacks, 2);
    }

    #[test]
    fn buffet_single_epoch() {
        let mut b = Buffet::new(64);
        for k in [1, 2, 1, 3] {
            b.access(0, Some(0), k, 32, false);
        }
        b.finish();
        assert_eq!((b.counts.fills, b.counts.drains), (3, 3));
        assert!(!b.overflowed());
    }

    #[test]
    fn buffet_drains_on_epoch_change() {
        let mut b = Buffet::new(64);
        b.access(0, Some(0), 1, 32, true);
        let t = b.access(0, Some(1), 1, 32, false);
        assert_eq!(t, vec![Transfer::Drain(1, 32), Transfer::Fill(1, 32)]);
    }

    #[test]
    fn buffet_overflow() {
        let mut b = Buffet::new(8);
        for k in 0..3 {
            b.access(0, Some(0), k, 32, false);
        }
        assert!(b.overflowed());
    }
}
