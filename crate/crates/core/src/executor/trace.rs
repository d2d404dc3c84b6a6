//! Access trace of one Einsum run.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;

use crate::fibertree::{Coord, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum Datum {
    Coord,
    Payload,
    /// Per-fiber header (occupancy, pointers) read on entering a fiber.
    Header,
}

impl Datum {
    pub fn name(self) -> &'static str {
        match self {
            Datum::Coord => "coord",
            Datum::Payload => "payload",
            Datum::Header => "header",
        }
    }
}

/// One read or write of a fibertree datum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Record {
    /// Index into [`Trace::tensors`].
    pub tensor: u16,
    pub rank: u16,
    pub datum: Datum,
    pub write: bool,
    /// Interned spatial position, `u32::MAX` when no space rank is bound.
    pub space: u32,
    /// Index into [`Trace::points`].
    pub point: u32,
    /// Ordinal of the fiber holding the datum within its rank.
    pub fiber: u64,
    /// Global index of the element within its rank.
    pub elem: u64,
    /// Row-major coordinate within the rank's extent.
    pub coord: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TraceTensor {
    pub name: String,
    /// Rank names used for format lookup, outermost first.
    pub ranks: Vec<String>,
    pub extents: Vec<u64>,
    /// Declared ranks folded into each rank; empty for the upper rank of a
    /// partition.
    pub bases: Vec<Vec<String>>,
    pub output: bool,
}

/// Loop state at the time of an access.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Point {
    /// How many coordinates each loop level has bound so far.
    pub epochs: Vec<u64>,
    /// Bound coordinates of the leading temporal levels.
    pub prefix: Vec<Coord>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct IntersectStats {
    pub tests: u64,
    pub matches: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct MergeGroup {
    pub n: u64,
    /// Sorted runs in the incoming order.
    pub runs: u64,
    /// Elements that collapse when the innermost rank is reduced.
    pub dups: u64,
}

/// Reordering performed while the cascade runs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MergeEvent {
    pub tensor: String,
    pub from: Vec<String>,
    pub to: Vec<String>,
    /// Swizzle of an input ahead of its use, as opposed to the output's
    /// reorder into storage order.
    pub consumption: bool,
    pub groups: Vec<MergeGroup>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct Trace {
    pub einsum: String,
    /// Loop rank per level.
    pub levels: Vec<String>,
    /// Base variables bound by each level.
    pub level_vars: Vec<Vec<String>>,
    pub prefix_len: usize,
    pub tensors: Vec<TraceTensor>,
    pub records: Vec<Record>,
    pub points: Vec<Point>,
    /// Interned spatial positions (one entry per space level).
    pub spaces: Vec<Vec<u32>>,
    pub intersections: BTreeMap<u32, IntersectStats>,
    /// Effectual operation counts keyed by (`mul` or `add`, space id).
    pub compute: BTreeMap<(String, u32), u64>,
    pub merges: Vec<MergeEvent>,
}

impl Trace {
    pub fn tensor_index(&self, name: &str) -> Vec<u16> {
        self.tensors
            .iter()
            .enumerate()
            .filter(|(_, t)| t.name == name)
            .map(|(i, _)| i as u16)
            .collect()
    }

    /// Level whose binding counter drives an `evict-on` rank: a loop rank by
    /// name, or the level binding a base variable of that name.
    pub fn evict_level(&self, rank: &str) -> Option<usize> {
        if rank == "root" {
            return None;
        }
        self.levels.iter().position(|l| l == rank).or_else(|| {
            let v = rank.to_lowercase();
            self.level_vars.iter().position(|vs| vs.contains(&v))
        })
    }

    pub fn total_compute(&self, op: &str) -> u64 {
        self.compute
            .iter()
            .filter(|((o, _), _)| o == op)
            .map(|(_, n)| n)
            .sum()
    }

    /// One line per record: `einsum,tensor,config,rank,kind,access,space,time`.
    /// `configs[i]` names the format configuration of `tensors[i]`; space
    /// is empty when no space rank is bound and time is the loop point id.
    pub fn to_csv(&self, configs: &[String]) -> String {
        let mut s = String::from("einsum,tensor,config,rank,kind,access,space,time\n");
        for r in &self.records {
            let t = &self.tensors[r.tensor as usize];
            let space = if r.space == u32::MAX {
                String::new()
            } else {
                r.space.to_string()
            };
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                self.einsum,
                t.name,
                configs.get(r.tensor as usize).map_or("", String::as_str),
                t.ranks[r.rank as usize],
                r.datum.name(),
                if r.write { "write" } else { "read" },
                space,
                r.point,
            );
        }
        s
    }
}

/// Measures the reorder of `t` into `to`. Elements sharing the common
/// leading ranks of both orders form independent merge groups.
pub fn merge_event(t: &Tensor, to: &[String], consumption: bool) -> MergeEvent {
    let from: Vec<String> = t.ranks.iter().map(|r| r.name.clone()).collect();
    let p = from.iter().zip(to).take_while(|(a, b)| a == b).count();
    let perm: Vec<usize> = to
        .iter()
        .map(|n| {
            from.iter()
                .position(|f| f == n)
                .expect("swizzle target is a permutation")
        })
        .collect();
    let mut groups = Vec::new();
    let points = t.points();
    let mut i = 0;
    while i < points.len() {
        let mut j = i + 1;
        while j < points.len() && points[j].0[..p] == points[i].0[..p] {
            j += 1;
        }
        let keys: Vec<Vec<&Coord>> = points[i..j]
            .iter()
            .map(|(path, _)| perm[p..].iter().map(|&k| &path[k]).collect())
            .collect();
        let descents = keys.windows(2).filter(|w| w[0] > w[1]).count() as u64;
        let mut heads: Vec<&[&Coord]> = keys
            .iter()
            .map(|k| &k[..k.len().saturating_sub(1)])
            .collect();
        heads.sort();
        heads.dedup();
        let n = keys.len() as u64;
        groups.push(MergeGroup {
            n,
            runs: 1 + descents,
            dups: n - heads.len() as u64,
        });
        i = j;
    }
    MergeEvent {
        tensor: t.name.clone(),
        from,
        to: to.to_vec(),
        consumption,
        groups,
    }
}
