//! Fibertrees: tensors as trees of coordinate/payload fibers.
//!
//! Every rank of a [`Tensor`] records which original ranks its coordinates
//! encode. A plain rank encodes itself, a flattened rank encodes each of its
//! constituents (tuple coordinates), and the upper rank produced by
//! partitioning encodes nothing: its coordinate is only the first coordinate
//! of the fiber below it. Coordinates are kept absolute through every
//! transformation, so any transformed tree can be densified against the
//! original rank order.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::fmt;

use crate::semiring::Value;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum FiberError {
    #[error("unknown rank {0}")]
    UnknownRank(String),
    #[error("{0:?} is not a permutation of {1:?}")]
    NotPermutation(Vec<String>, Vec<String>),
    #[error("ranks {0} and {1} are not adjacent in rank order")]
    NotAdjacent(String, String),
    #[error("partition size must be at least 1")]
    ZeroSize,
    #[error("coordinate {coord} outside rank shape {shape}")]
    OutOfRange { coord: String, shape: usize },
    #[error("ragged dense input: expected {expected} values, found {found}")]
    Ragged { expected: usize, found: usize },
    #[error("follower {follower} cannot adopt ranges for rank {rank}: {reason}")]
    Follower {
        follower: String,
        rank: String,
        reason: String,
    },
}

/// A fiber coordinate. Flattened ranks carry tuple coordinates that compare
/// lexicographically.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize)]
#[serde(untagged)]
pub enum Coord {
    Int(usize),
    Tuple(Vec<usize>),
}

impl Coord {
    pub fn components(&self) -> &[usize] {
        match self {
            Coord::Int(c) => std::slice::from_ref(c),
            Coord::Tuple(t) => t,
        }
    }

    pub fn as_int(&self) -> Option<usize> {
        match self {
            Coord::Int(c) => Some(*c),
            Coord::Tuple(_) => None,
        }
    }

    fn join(upper: &Coord, lower: &Coord) -> Coord {
        let mut t = upper.components().to_vec();
        t.extend_from_slice(lower.components());
        Coord::Tuple(t)
    }
}

impl From<usize> for Coord {
    fn from(c: usize) -> Self {
        Coord::Int(c)
    }
}

impl fmt::Display for Coord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Coord::Int(c) => write!(f, "{c}"),
            Coord::Tuple(t) => {
                f.write_str("(")?;
                for (i, c) in t.iter().enumerate() {
                    if i > 0 {
                        f.write_str(",")?;
                    }
                    write!(f, "{c}")?;
                }
                f.write_str(")")
            }
        }
    }
}

/// Extent of a rank; flattened ranks keep one extent per constituent.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Extent(pub Vec<usize>);

impl Extent {
    pub fn scalar(n: usize) -> Self {
        Extent(vec![n])
    }

    pub fn size(&self) -> usize {
        self.0.iter().product()
    }

    /// Row-major position of a coordinate inside this extent.
    pub fn linear(&self, c: &Coord) -> u64 {
        let comps = c.components();
        if comps.len() != self.0.len() {
            return comps.first().copied().unwrap_or(0) as u64;
        }
        comps
            .iter()
            .zip(&self.0)
            .fold(0u64, |acc, (&c, &n)| acc * n as u64 + c as u64)
    }

    fn contains(&self, c: &Coord) -> bool {
        let comps = c.components();
        comps.len() == self.0.len() && comps.iter().zip(&self.0).all(|(c, n)| c < n)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rank {
    pub name: String,
    pub extent: Extent,
    /// Original ranks whose coordinates this rank carries, one per
    /// coordinate component (empty for a partition's upper rank). A
    /// flattened rank holds `""` for components taken from an upper rank.
    pub bases: Vec<String>,
}

impl Rank {
    pub fn new(name: impl Into<String>, extent: usize) -> Self {
        let name = name.into();
        Rank {
            bases: vec![name.clone()],
            name,
            extent: Extent::scalar(extent),
        }
    }

    pub fn is_upper(&self) -> bool {
        self.bases.iter().all(String::is_empty)
    }

    /// One base per coordinate component, `""` for upper components.
    fn component_bases(&self) -> Vec<String> {
        if self.bases.is_empty() {
            vec![String::new(); self.extent.0.len()]
        } else {
            self.bases.clone()
        }
    }
}

#[derive(Debug, Clone)]
pub enum Payload {
    Leaf(Value),
    Fiber(Fiber),
}

impl Payload {
    pub fn as_fiber(&self) -> Option<&Fiber> {
        match self {
            Payload::Fiber(f) => Some(f),
            Payload::Leaf(_) => None,
        }
    }

    pub fn as_value(&self) -> Option<Value> {
        match self {
            Payload::Leaf(v) => Some(*v),
            Payload::Fiber(_) => None,
        }
    }
}

impl PartialEq for Payload {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (Payload::Leaf(a), Payload::Leaf(b)) => a == b || (a.is_nan() && b.is_nan()),
            (Payload::Fiber(a), Payload::Fiber(b)) => a == b,
            _ => false,
        }
    }
}

/// Position of a fiber inside its rank's concrete storage: its index among
/// the rank's fibers and the index of its first element among the rank's
/// elements. Filled by [`Tensor::assign_layout`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FiberPos {
    pub ordinal: u64,
    pub offset: u64,
}

#[derive(Debug, Clone, Default)]
pub struct Fiber {
    coords: Vec<Coord>,
    payloads: Vec<Payload>,
    pub pos: FiberPos,
}

impl PartialEq for Fiber {
    fn eq(&self, other: &Self) -> bool {
        self.coords == other.coords && self.payloads == other.payloads
    }
}

impl Fiber {
    pub fn new() -> Self {
        Fiber::default()
    }

    /// Builds a fiber from elements already sorted by coordinate.
    pub fn from_sorted(elems: Vec<(Coord, Payload)>) -> Self {
        debug_assert!(elems.windows(2).all(|w| w[0].0 < w[1].0));
        let (coords, payloads) = elems.into_iter().unzip();
        Fiber {
            coords,
            payloads,
            pos: FiberPos::default(),
        }
    }

    pub fn from_values(elems: impl IntoIterator<Item = (usize, Value)>) -> Self {
        let mut v: Vec<(Coord, Payload)> = elems
            .into_iter()
            .map(|(c, x)| (Coord::Int(c), Payload::Leaf(x)))
            .collect();
        v.sort_by(|a, b| a.0.cmp(&b.0));
        v.dedup_by(|a, b| a.0 == b.0);
        Fiber::from_sorted(v)
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn coords(&self) -> &[Coord] {
        &self.coords
    }

    pub fn payloads(&self) -> &[Payload] {
        &self.payloads
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Coord, &Payload)> {
        self.coords.iter().zip(&self.payloads)
    }

    /// Position of `c` in this fiber, by binary search.
    pub fn position(&self, c: &Coord) -> Result<usize, usize> {
        self.coords.binary_search(c)
    }

    pub fn get_payload(&self, c: &Coord) -> Option<&Payload> {
        self.position(c).ok().map(|p| &self.payloads[p])
    }

    /// Returns the payload at `c`, inserting `default()` first if absent.
    pub fn populate(
        &mut self,
        c: Coord,
        extent: &Extent,
        default: impl FnOnce() -> Payload,
    ) -> Result<&mut Payload, FiberError> {
        if !extent.contains(&c) {
            return Err(FiberError::OutOfRange {
                coord: c.to_string(),
                shape: extent.size(),
            });
        }
        let p = match self.position(&c) {
            Ok(p) => p,
            Err(p) => {
                self.coords.insert(p, c);
                self.payloads.insert(p, default());
                p
            }
        };
        Ok(&mut self.payloads[p])
    }

    /// Number of leaf values below this fiber.
    pub fn leaf_count(&self) -> usize {
        self.payloads
            .iter()
            .map(|p| match p {
                Payload::Leaf(_) => 1,
                Payload::Fiber(f) => f.leaf_count(),
            })
            .sum()
    }

    /// Drops zero leaves and empty child fibers, bottom-up.
    pub fn compact(&mut self, zero: Value) {
        let mut coords = Vec::with_capacity(self.coords.len());
        let mut payloads = Vec::with_capacity(self.payloads.len());
        for (c, mut p) in self.coords.drain(..).zip(self.payloads.drain(..)) {
            let keep = match &mut p {
                Payload::Leaf(v) => *v != zero,
                Payload::Fiber(f) => {
                    f.compact(zero);
                    !f.is_empty()
                }
            };
            if keep {
                coords.push(c);
                payloads.push(p);
            }
        }
        self.coords = coords;
        self.payloads = payloads;
    }

    fn collect_points(&self, prefix: &mut Vec<Coord>, out: &mut Vec<(Vec<Coord>, Value)>) {
        for (c, p) in self.iter() {
            prefix.push(c.clone());
            match p {
                Payload::Leaf(v) => out.push((prefix.clone(), *v)),
                Payload::Fiber(f) => f.collect_points(prefix, out),
            }
            prefix.pop();
        }
    }

    /// Builds a tree of the given depth from points sorted lexicographically.
    fn from_points(points: &[(Vec<Coord>, Value)], depth: usize) -> Fiber {
        let mut elems = Vec::new();
        let mut i = 0;
        while i < points.len() {
            let c = &points[i].0[depth];
            let mut j = i + 1;
            while j < points.len() && &points[j].0[depth] == c {
                j += 1;
            }
            let payload = if depth + 1 == points[i].0.len() {
                Payload::Leaf(points[i].1)
            } else {
                Payload::Fiber(Fiber::from_points(&points[i..j], depth + 1))
            };
            elems.push((c.clone(), payload));
            i = j;
        }
        Fiber::from_sorted(elems)
    }

    fn is_sorted_strict(&self) -> bool {
        self.coords.windows(2).all(|w| w[0] < w[1])
            && self.payloads.iter().all(|p| match p {
                Payload::Fiber(f) => f.is_sorted_strict(),
                Payload::Leaf(_) => true,
            })
    }
}

/// Elements present in both fibers, ascending.
pub fn intersect<'a>(a: &'a Fiber, b: &'a Fiber) -> Vec<(Coord, (&'a Payload, &'a Payload))> {
    let (mut i, mut j) = (0, 0);
    let mut out = Vec::new();
    while i < a.len() && j < b.len() {
        match a.coords[i].cmp(&b.coords[j]) {
            Ordering::Less => i += 1,
            Ordering::Greater => j += 1,
            Ordering::Equal => {
                out.push((a.coords[i].clone(), (&a.payloads[i], &b.payloads[j])));
                i += 1;
                j += 1;
            }
        }
    }
    out
}

/// Elements present in either fiber, ascending. A side missing the
/// coordinate yields `None`, which stands for the additive identity.
#[allow(clippy::type_complexity)]
pub fn union<'a>(
    a: &'a Fiber,
    b: &'a Fiber,
) -> Vec<(Coord, (Option<&'a Payload>, Option<&'a Payload>))> {
    let (mut i, mut j) = (0, 0);
    let mut out = Vec::with_capacity(a.len().max(b.len()));
    loop {
        let next = match (a.coords.get(i), b.coords.get(j)) {
            (None, None) => break,
            (Some(_), None) => Ordering::Less,
            (None, Some(_)) => Ordering::Greater,
            (Some(x), Some(y)) => x.cmp(y),
        };
        match next {
            Ordering::Less => {
                out.push((a.coords[i].clone(), (Some(&a.payloads[i]), None)));
                i += 1;
            }
            Ordering::Greater => {
                out.push((b.coords[j].clone(), (None, Some(&b.payloads[j]))));
                j += 1;
            }
            Ordering::Equal => {
                out.push((
                    a.coords[i].clone(),
                    (Some(&a.payloads[i]), Some(&b.payloads[j])),
                ));
                i += 1;
                j += 1;
            }
        }
    }
    out
}

/// Row-major dense array used for construction and as a test oracle.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseArray {
    pub shape: Vec<usize>,
    pub data: Vec<Value>,
}

impl DenseArray {
    pub fn new(shape: Vec<usize>, data: Vec<Value>) -> Result<Self, FiberError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(FiberError::Ragged {
                expected,
                found: data.len(),
            });
        }
        Ok(DenseArray { shape, data })
    }

    pub fn filled(shape: Vec<usize>, v: Value) -> Self {
        let n = shape.iter().product();
        DenseArray {
            shape,
            data: vec![v; n],
        }
    }

    pub fn from_rows(rows: &[Vec<Value>]) -> Result<Self, FiberError> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(FiberError::Ragged {
                    expected: cols,
                    found: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(DenseArray {
            shape: vec![rows.len(), cols],
            data,
        })
    }

    pub fn offset(&self, idx: &[usize]) -> usize {
        idx.iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &n)| acc * n + i)
    }

    pub fn get(&self, idx: &[usize]) -> Value {
        self.data[self.offset(idx)]
    }

    pub fn set(&mut self, idx: &[usize], v: Value) {
        let o = self.offset(idx);
        self.data[o] = v;
    }

    /// Iterates all multi-indices in row-major order.
    pub fn indices(&self) -> impl Iterator<Item = Vec<usize>> + '_ {
        let n = self.data.len();
        (0..n).map(move |mut flat| {
            let mut idx = vec![0; self.shape.len()];
            for d in (0..self.shape.len()).rev() {
                idx[d] = flat % self.shape[d];
                flat /= self.shape[d];
            }
            idx
        })
    }

    /// Reorders axes so that new axis `i` is old axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> DenseArray {
        let shape: Vec<usize> = perm.iter().map(|&p| self.shape[p]).collect();
        let mut out = DenseArray::filled(shape, 0.0);
        for idx in self.indices() {
            let new: Vec<usize> = perm.iter().map(|&p| idx[p]).collect();
            out.set(&new, self.get(&idx));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub ranks: Vec<Rank>,
    pub root: Fiber,
}

impl Tensor {
    pub fn empty(name: impl Into<String>, ranks: Vec<Rank>) -> Self {
        Tensor {
            name: name.into(),
            ranks,
            root: Fiber::new(),
        }
    }

    /// Builds a fibertree from a dense array, omitting elements equal to
    /// `zero` and every fiber left empty by that omission.
    pub fn from_dense(
        name: impl Into<String>,
        data: &DenseArray,
        rank_names: &[&str],
        zero: Value,
    ) -> Result<Self, FiberError> {
        if rank_names.len() != data.shape.len() {
            return Err(FiberError::Ragged {
                expected: data.shape.len(),
                found: rank_names.len(),
            });
        }
        let ranks = rank_names
            .iter()
            .zip(&data.shape)
            .map(|(n, &s)| Rank::new(*n, s))
            .collect();
        let points = data
            .indices()
            .filter_map(|idx| {
                let v = data.get(&idx);
                (v != zero).then(|| (idx.into_iter().map(Coord::Int).collect(), v))
            })
            .collect();
        Ok(Tensor::from_points(name, ranks, points))
    }

    /// Builds a tensor from (coordinate path, value) points in any order.
    /// Later duplicates overwrite earlier ones.
    pub fn from_points(
        name: impl Into<String>,
        ranks: Vec<Rank>,
        mut points: Vec<(Vec<Coord>, Value)>,
    ) -> Self {
        points.sort_by(|a, b| a.0.cmp(&b.0));
        points.dedup_by(|later, earlier| {
            if later.0 == earlier.0 {
                earlier.1 = later.1;
                true
            } else {
                false
            }
        });
        let root = if ranks.is_empty() || points.is_empty() {
            Fiber::new()
        } else {
            Fiber::from_points(&points, 0)
        };
        Tensor {
            name: name.into(),
            ranks,
            root,
        }
    }

    pub fn rank_names(&self) -> Vec<&str> {
        self.ranks.iter().map(|r| r.name.as_str()).collect()
    }

    pub fn rank_index(&self, name: &str) -> Option<usize> {
        self.ranks.iter().position(|r| r.name == name)
    }

    /// All leaves as (coordinate path, value), in concordant order.
    pub fn points(&self) -> Vec<(Vec<Coord>, Value)> {
        let mut out = Vec::new();
        self.root.collect_points(&mut Vec::new(), &mut out);
        out
    }

    pub fn nnz(&self) -> usize {
        self.root.leaf_count()
    }

    pub fn is_well_ordered(&self) -> bool {
        self.root.is_sorted_strict()
    }

    /// Original ranks carried by this tree, in the order they first appear.
    pub fn base_ranks(&self) -> Vec<(String, usize)> {
        let mut out: Vec<(String, usize)> = Vec::new();
        for r in &self.ranks {
            for (i, b) in r.bases.iter().enumerate() {
                if !b.is_empty() && !out.iter().any(|(n, _)| n == b) {
                    out.push((b.clone(), r.extent.0[i]));
                }
            }
        }
        out
    }

    /// Densifies along the given original ranks, undoing partitioning and
    /// flattening. Absent points take `zero`.
    pub fn to_dense_in(&self, order: &[&str], zero: Value) -> Result<DenseArray, FiberError> {
        let bases = self.base_ranks();
        let mut shape = Vec::with_capacity(order.len());
        for o in order {
            let ext = bases
                .iter()
                .find(|(n, _)| n == o)
                .map(|(_, e)| *e)
                .ok_or_else(|| FiberError::UnknownRank(o.to_string()))?;
            shape.push(ext);
        }
        if bases.len() != order.len() {
            return Err(FiberError::NotPermutation(
                order.iter().map(|s| s.to_string()).collect(),
                bases.into_iter().map(|(n, _)| n).collect(),
            ));
        }
        // axis in `order` for every (rank, component) slot
        let slots: Vec<Vec<Option<usize>>> = self
            .ranks
            .iter()
            .map(|r| {
                r.bases
                    .iter()
                    .map(|b| order.iter().position(|o| o == b))
                    .collect()
            })
            .collect();
        let mut out = DenseArray::filled(shape, zero);
        let mut idx = vec![0; order.len()];
        for (path, v) in self.points() {
            for (c, axes) in path.iter().zip(&slots) {
                for (comp, axis) in c.components().iter().zip(axes) {
                    if let Some(a) = axis {
                        idx[*a] = *comp;
                    }
                }
            }
            out.set(&idx, v);
        }
        Ok(out)
    }

    pub fn to_dense(&self, zero: Value) -> Result<DenseArray, FiberError> {
        let bases = self.base_ranks();
        let order: Vec<&str> = bases.iter().map(|(n, _)| n.as_str()).collect();
        self.to_dense_in(&order, zero)
    }

    /// Reorders the ranks; content is preserved and every fiber re-sorted.
    pub fn swizzle(&self, new_order: &[&str]) -> Result<Tensor, FiberError> {
        let perm: Option<Vec<usize>> = new_order.iter().map(|n| self.rank_index(n)).collect();
        let perm = match perm {
            Some(p)
                if p.len() == self.ranks.len() && {
                    let mut s = p.clone();
                    s.sort_unstable();
                    s.dedup();
                    s.len() == p.len()
                } =>
            {
                p
            }
            _ => {
                return Err(FiberError::NotPermutation(
                    new_order.iter().map(|s| s.to_string()).collect(),
                    self.rank_names().iter().map(|s| s.to_string()).collect(),
                ))
            }
        };
        if perm.iter().enumerate().all(|(i, &p)| i == p) {
            return Ok(self.clone());
        }
        let ranks = perm.iter().map(|&p| self.ranks[p].clone()).collect();
        let points = self
            .points()
            .into_iter()
            .map(|(path, v)| (perm.iter().map(|&p| path[p].clone()).collect(), v))
            .collect();
        Ok(Tensor::from_points(self.name.clone(), ranks, points))
    }

    /// Splits `rank` into `upper`/`lower`: an element with coordinate `c`
    /// lands under upper coordinate `floor(c / size) * size`.
    pub fn partition_uniform_shape(
        &self,
        rank: &str,
        size: usize,
        upper: &str,
        lower: &str,
    ) -> Result<Tensor, FiberError> {
        if size == 0 {
            return Err(FiberError::ZeroSize);
        }
        let d = self
            .rank_index(rank)
            .ok_or_else(|| FiberError::UnknownRank(rank.into()))?;
        let split = |_: &[Coord], fiber: &Fiber| -> Vec<usize> {
            let mut starts = Vec::new();
            let mut last = None;
            for (i, c) in fiber.coords().iter().enumerate() {
                let tile = c.components()[0] / size;
                if last != Some(tile) {
                    starts.push(i);
                    last = Some(tile);
                }
            }
            starts
        };
        let label = |c: &Coord| match c {
            Coord::Int(x) => Coord::Int(x / size * size),
            Coord::Tuple(t) => {
                let mut t = t.clone();
                t[0] = t[0] / size * size;
                for x in t.iter_mut().skip(1) {
                    *x = 0;
                }
                Coord::Tuple(t)
            }
        };
        Ok(self.split_rank(d, upper, lower, &split, &label))
    }

    /// Occupancy partitioning of a leader and its followers: each leader
    /// fiber on `rank` is chopped into chunks of `size` elements (the last
    /// holds the remainder); followers adopt the resulting coordinate ranges.
    pub fn partition_uniform_occupancy(
        leader: &Tensor,
        followers: &[&Tensor],
        rank: &str,
        size: usize,
        upper: &str,
        lower: &str,
    ) -> Result<(Tensor, Vec<Tensor>), FiberError> {
        if size == 0 {
            return Err(FiberError::ZeroSize);
        }
        let d = leader
            .rank_index(rank)
            .ok_or_else(|| FiberError::UnknownRank(rank.into()))?;
        let bounds = leader.occupancy_bounds(d, size);
        let split =
            |_: &[Coord], fiber: &Fiber| -> Vec<usize> { (0..fiber.len()).step_by(size).collect() };
        let led = leader.split_rank(d, upper, lower, &split, &|c| c.clone());

        let mut outs = Vec::with_capacity(followers.len());
        for f in followers {
            let fd = f
                .rank_index(rank)
                .ok_or_else(|| FiberError::UnknownRank(rank.into()))?;
            let shared_prefix = f.ranks[..fd]
                .iter()
                .map(|r| &r.name)
                .eq(leader.ranks[..d].iter().map(|r| &r.name));
            let global = bounds.len() <= 1;
            if !shared_prefix && !global {
                return Err(FiberError::Follower {
                    follower: f.name.clone(),
                    rank: rank.into(),
                    reason: "leader ranges vary with ranks the follower does not share".into(),
                });
            }
            let fsplit = |parent: &[Coord], fiber: &Fiber| -> Vec<usize> {
                let b = if global {
                    bounds.values().next()
                } else {
                    bounds.get(parent)
                };
                match b {
                    Some(b) => follower_starts(fiber, b),
                    None => vec![0],
                }
            };
            let flabel_bounds = &bounds;
            // follower chunks are labelled with the leader's chunk start
            let mut out =
                f.split_rank_labelled(fd, upper, lower, &fsplit, &|parent, fiber, start| {
                    let b = if global {
                        flabel_bounds.values().next()
                    } else {
                        flabel_bounds.get(parent)
                    };
                    let c = &fiber.coords()[start];
                    match b {
                        Some(b) => {
                            let k = b.partition_point(|x| x <= c);
                            b[k.saturating_sub(1)].clone()
                        }
                        None => c.clone(),
                    }
                });
            out.name = f.name.clone();
            outs.push(out);
        }
        Ok((led, outs))
    }

    /// Leader chunk starts, per parent path of the fibers at depth `d`.
    pub fn occupancy_bounds(&self, d: usize, size: usize) -> HashMap<Vec<Coord>, Vec<Coord>> {
        let mut out = HashMap::new();
        fn walk(
            f: &Fiber,
            depth: usize,
            d: usize,
            size: usize,
            prefix: &mut Vec<Coord>,
            out: &mut HashMap<Vec<Coord>, Vec<Coord>>,
        ) {
            if depth == d {
                let starts = f.coords().iter().step_by(size).cloned().collect();
                out.insert(prefix.clone(), starts);
                return;
            }
            for (c, p) in f.iter() {
                if let Payload::Fiber(child) = p {
                    prefix.push(c.clone());
                    walk(child, depth + 1, d, size, prefix, out);
                    prefix.pop();
                }
            }
        }
        walk(&self.root, 0, d, size.max(1), &mut Vec::new(), &mut out);
        out
    }

    fn split_rank(
        &self,
        d: usize,
        upper: &str,
        lower: &str,
        split: &dyn Fn(&[Coord], &Fiber) -> Vec<usize>,
        label: &dyn Fn(&Coord) -> Coord,
    ) -> Tensor {
        self.split_rank_labelled(d, upper, lower, split, &|_, f, start| {
            label(&f.coords()[start])
        })
    }

    /// Generic partition: `split` picks chunk start positions in each fiber
    /// at depth `d`, `label` names the upper coordinate of each chunk.
    #[allow(clippy::type_complexity)]
    fn split_rank_labelled(
        &self,
        d: usize,
        upper: &str,
        lower: &str,
        split: &dyn Fn(&[Coord], &Fiber) -> Vec<usize>,
        label: &dyn Fn(&[Coord], &Fiber, usize) -> Coord,
    ) -> Tensor {
        fn rec(
            f: &Fiber,
            depth: usize,
            d: usize,
            prefix: &mut Vec<Coord>,
            split: &dyn Fn(&[Coord], &Fiber) -> Vec<usize>,
            label: &dyn Fn(&[Coord], &Fiber, usize) -> Coord,
        ) -> Fiber {
            if depth == d {
                let mut starts = split(prefix, f);
                if f.is_empty() {
                    return Fiber::new();
                }
                if starts.first() != Some(&0) {
                    starts.insert(0, 0);
                }
                let mut elems: Vec<(Coord, Payload)> = Vec::with_capacity(starts.len());
                for (k, &s) in starts.iter().enumerate() {
                    let e = starts.get(k + 1).copied().unwrap_or(f.len());
                    if s >= e {
                        continue;
                    }
                    let chunk = Fiber::from_sorted(
                        f.coords[s..e]
                            .iter()
                            .cloned()
                            .zip(f.payloads[s..e].iter().cloned())
                            .collect(),
                    );
                    let c = label(prefix, f, s);
                    match elems.last_mut() {
                        // two chunks mapped to one label merge (follower edge case)
                        Some((lc, Payload::Fiber(lf))) if *lc == c => {
                            let mut merged: Vec<(Coord, Payload)> =
                                lf.iter().map(|(c, p)| (c.clone(), p.clone())).collect();
                            merged.extend(chunk.iter().map(|(c, p)| (c.clone(), p.clone())));
                            *lf = Fiber::from_sorted(merged);
                        }
                        _ => elems.push((c, Payload::Fiber(chunk))),
                    }
                }
                return Fiber::from_sorted(elems);
            }
            let elems = f
                .iter()
                .map(|(c, p)| {
                    let p = match p {
                        Payload::Fiber(child) => {
                            prefix.push(c.clone());
                            let r = Payload::Fiber(rec(child, depth + 1, d, prefix, split, label));
                            prefix.pop();
                            r
                        }
                        leaf => leaf.clone(),
                    };
                    (c.clone(), p)
                })
                .collect();
            Fiber::from_sorted(elems)
        }
        let root = rec(&self.root, 0, d, &mut Vec::new(), split, label);
        let old = &self.ranks[d];
        let mut ranks = self.ranks.clone();
        ranks.splice(
            d..=d,
            [
                Rank {
                    name: upper.to_string(),
                    extent: old.extent.clone(),
                    bases: Vec::new(),
                },
                Rank {
                    name: lower.to_string(),
                    extent: old.extent.clone(),
                    bases: old.bases.clone(),
                },
            ],
        );
        Tensor {
            name: self.name.clone(),
            ranks,
            root,
        }
    }

    /// Merges two adjacent ranks into one whose coordinates are tuples.
    pub fn flatten(&self, upper: &str, lower: &str, name: &str) -> Result<Tensor, FiberError> {
        let d = self
            .rank_index(upper)
            .ok_or_else(|| FiberError::UnknownRank(upper.into()))?;
        let l = self
            .rank_index(lower)
            .ok_or_else(|| FiberError::UnknownRank(lower.into()))?;
        if l != d + 1 {
            return Err(FiberError::NotAdjacent(upper.into(), lower.into()));
        }
        let mut ranks = self.ranks.clone();
        let lo = ranks.remove(l);
        let hi = &mut ranks[d];
        hi.name = name.to_string();
        if hi.is_upper() && lo.is_upper() {
            hi.bases.clear();
        } else {
            hi.bases = hi.component_bases();
            hi.bases.extend(lo.component_bases());
        }
        hi.extent.0.extend(lo.extent.0);
        let points = self
            .points()
            .into_iter()
            .map(|(mut path, v)| {
                let lower = path.remove(l);
                path[d] = Coord::join(&path[d], &lower);
                (path, v)
            })
            .collect();
        Ok(Tensor::from_points(self.name.clone(), ranks, points))
    }

    /// Occupancy of every rank (elements summed over all its fibers) and
    /// the number of fibers per rank.
    pub fn rank_stats(&self) -> Vec<(usize, usize)> {
        let mut stats = vec![(0usize, 0usize); self.ranks.len()];
        fn walk(f: &Fiber, depth: usize, stats: &mut [(usize, usize)]) {
            stats[depth].0 += f.len();
            stats[depth].1 += 1;
            for p in f.payloads() {
                if let Payload::Fiber(c) = p {
                    walk(c, depth + 1, stats);
                }
            }
        }
        if !self.ranks.is_empty() {
            walk(&self.root, 0, &mut stats);
        }
        stats
    }

    /// Numbers fibers and elements per rank in concordant order.
    pub fn assign_layout(&mut self) {
        let mut counters = vec![(0u64, 0u64); self.ranks.len().max(1)];
        fn walk(f: &mut Fiber, depth: usize, counters: &mut [(u64, u64)]) {
            let (fibers, elems) = &mut counters[depth];
            f.pos = FiberPos {
                ordinal: *fibers,
                offset: *elems,
            };
            *fibers += 1;
            *elems += f.len() as u64;
            for p in f.payloads.iter_mut() {
                if let Payload::Fiber(c) = p {
                    walk(c, depth + 1, counters);
                }
            }
        }
        walk(&mut self.root, 0, &mut counters);
    }

    pub fn compact(&mut self, zero: Value) {
        self.root.compact(zero);
    }
}

fn follower_starts(fiber: &Fiber, bounds: &[Coord]) -> Vec<usize> {
    // range k is [bounds[k], bounds[k+1]); the first range is open below
    let mut starts = vec![0];
    for b in bounds.iter().skip(1) {
        let p = fiber.coords().partition_point(|c| c < b);
        if p > *starts.last().unwrap() && p < fiber.len() {
            starts.push(p);
        }
    }
    starts
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mk(rows: &[Vec<Value>], ranks: &[&str]) -> Tensor {
        Tensor::from_dense("A", &DenseArray::from_rows(rows).unwrap(), ranks, 0.0).unwrap()
    }

    fn coords(f: &Fiber) -> Vec<usize> {
        f.coords().iter().map(|c| c.as_int().unwrap()).collect()
    }

    fn child(f: &Fiber, c: usize) -> &Fiber {
        f.get_payload(&Coord::Int(c)).unwrap().as_fiber().unwrap()
    }

    #[test]
    fn from_dense_diagonal() {
        let t = mk(&[vec![1.0, 0.0], vec![0.0, 2.0]], &["M", "K"]);
        assert_eq!(coords(&t.root), vec![0, 1]);
        assert_eq!(coords(child(&t.root, 0)), vec![0]);
        assert_eq!(coords(child(&t.root, 1)), vec![1]);
        assert_eq!(
            child(&t.root, 1)
                .get_payload(&Coord::Int(1))
                .unwrap()
                .as_value(),
            Some(2.0)
        );
    }

    #[test]
    fn from_dense_all_zero_is_empty() {
        let t = Tensor::from_dense("Z", &DenseArray::filled(vec![3, 3], 0.0), &["M", "K"], 0.0)
            .unwrap();
        assert!(t.root.is_empty());
    }

    #[test]
    fn from_dense_single_row() {
        let t = mk(&[vec![0.0, 5.0]], &["M", "K"]);
        assert_eq!(coords(&t.root), vec![0]);
        assert_eq!(coords(child(&t.root, 0)), vec![1]);
    }

    #[test]
    fn ragged_rows_rejected() {
        assert!(DenseArray::from_rows(&[vec![1.0, 2.0], vec![3.0]]).is_err());
    }

    #[test]
    fn to_dense_of_empty_and_vector() {
        let t = Tensor::empty("E", vec![Rank::new("M", 2), Rank::new("K", 2)]);
        assert_eq!(t.to_dense(0.0).unwrap().data, vec![0.0; 4]);
        let v = Tensor {
            name: "v".into(),
            ranks: vec![Rank::new("I", 5)],
            root: Fiber::from_values([(3, 7.0)]),
        };
        assert_eq!(v.to_dense(0.0).unwrap().data, vec![0.0, 0.0, 0.0, 7.0, 0.0]);
    }

    #[test]
    fn get_payload_cases() {
        let f = Fiber::from_values([(1, 10.0), (3, 30.0)]);
        assert_eq!(
            f.get_payload(&Coord::Int(3)).unwrap().as_value(),
            Some(30.0)
        );
        assert!(f.get_payload(&Coord::Int(2)).is_none());
        assert!(Fiber::new().get_payload(&Coord::Int(0)).is_none());
    }

    #[test]
    fn intersect_and_union_examples() {
        let a = Fiber::from_values([(1, 1.0), (3, 1.0), (5, 1.0)]);
        let b = Fiber::from_values([(3, 1.0), (4, 1.0), (5, 1.0)]);
        let i: Vec<_> = intersect(&a, &b).into_iter().map(|(c, _)| c).collect();
        assert_eq!(i, vec![Coord::Int(3), Coord::Int(5)]);
        assert!(intersect(&a, &Fiber::new()).is_empty());
        let a = Fiber::from_values([(1, 1.0), (3, 1.0)]);
        let b = Fiber::from_values([(3, 1.0), (4, 1.0)]);
        let u: Vec<_> = union(&a, &b).into_iter().map(|(c, _)| c).collect();
        assert_eq!(u, vec![Coord::Int(1), Coord::Int(3), Coord::Int(4)]);
        let u: Vec<_> = union(&Fiber::new(), &b)
            .into_iter()
            .map(|(c, _)| c)
            .collect();
        assert_eq!(u, b.coords().to_vec());
    }

    #[test]
    fn populate_inserts_in_order() {
        let ext = Extent::scalar(10);
        let mut f = Fiber::new();
        *f.populate(Coord::Int(4), &ext, || Payload::Leaf(0.0))
            .unwrap() = Payload::Leaf(9.0);
        assert_eq!(f.len(), 1);
        let p = f
            .populate(Coord::Int(4), &ext, || Payload::Leaf(0.0))
            .unwrap();
        assert_eq!(p.as_value(), Some(9.0));
        assert_eq!(f.len(), 1);
        let mut g = Fiber::new();
        for c in [5, 2, 9] {
            g.populate(Coord::Int(c), &ext, || Payload::Leaf(1.0))
                .unwrap();
        }
        assert_eq!(coords(&g), vec![2, 5, 9]);
        assert!(g
            .populate(Coord::Int(10), &ext, || Payload::Leaf(1.0))
            .is_err());
    }

    #[test]
    fn swizzle_is_transpose() {
        let t = mk(&[vec![1.0, 2.0], vec![0.0, 3.0]], &["M", "K"]);
        let s = t.swizzle(&["K", "M"]).unwrap();
        let tr = mk(&[vec![1.0, 0.0], vec![2.0, 3.0]], &["K", "M"]);
        assert_eq!(s.root, tr.root);
        assert_eq!(t.swizzle(&["M", "K"]).unwrap(), t);
        assert!(t.swizzle(&["M", "M"]).is_err());
    }

    #[test]
    fn shape_partition_groups_by_tile() {
        let v = Tensor {
            name: "v".into(),
            ranks: vec![Rank::new("K", 8)],
            root: Fiber::from_values([(0, 1.0), (2, 1.0), (4, 1.0), (5, 1.0)]),
        };
        let p = v.partition_uniform_shape("K", 4, "K1", "K0").unwrap();
        assert_eq!(coords(&p.root), vec![0, 4]);
        assert_eq!(coords(child(&p.root, 0)), vec![0, 2]);
        assert_eq!(coords(child(&p.root, 4)), vec![4, 5]);
        let whole = v.partition_uniform_shape("K", 8, "K1", "K0").unwrap();
        assert_eq!(whole.root.len(), 1);
        assert_eq!(child(&whole.root, 0), &v.root);
    }

    #[test]
    fn occupancy_partition_leader_and_follower() {
        let leader = Tensor {
            name: "A".into(),
            ranks: vec![Rank::new("K", 10)],
            root: Fiber::from_values([1, 3, 4, 7, 8].map(|c| (c, 1.0))),
        };
        let follower = Tensor {
            name: "B".into(),
            ranks: vec![Rank::new("K", 10)],
            root: Fiber::from_values([2, 5, 9].map(|c| (c, 1.0))),
        };
        let (l, f) =
            Tensor::partition_uniform_occupancy(&leader, &[&follower], "K", 2, "K1", "K0").unwrap();
        assert_eq!(coords(&l.root), vec![1, 4, 8]);
        assert_eq!(coords(child(&l.root, 1)), vec![1, 3]);
        assert_eq!(coords(child(&l.root, 4)), vec![4, 7]);
        assert_eq!(coords(child(&l.root, 8)), vec![8]);
        assert_eq!(coords(&f[0].root), vec![1, 4, 8]);
        assert_eq!(coords(child(&f[0].root, 1)), vec![2]);
        assert_eq!(coords(child(&f[0].root, 4)), vec![5]);
        assert_eq!(coords(child(&f[0].root, 8)), vec![9]);
        let (whole, _) =
            Tensor::partition_uniform_occupancy(&leader, &[], "K", 9, "K1", "K0").unwrap();
        assert_eq!(whole.root.len(), 1);
        assert!(Tensor::partition_uniform_occupancy(&leader, &[], "K", 0, "K1", "K0").is_err());
    }

    #[test]
    fn flatten_makes_tuples() {
        let mut d = DenseArray::filled(vec![3, 3], 0.0);
        d.set(&[0, 0], 1.0);
        d.set(&[0, 2], 2.0);
        d.set(&[2, 1], 3.0);
        let t = Tensor::from_dense("A", &d, &["M", "K"], 0.0).unwrap();
        let f = t.flatten("M", "K", "MK").unwrap();
        assert_eq!(
            f.root.coords(),
            &[
                Coord::Tuple(vec![0, 0]),
                Coord::Tuple(vec![0, 2]),
                Coord::Tuple(vec![2, 1])
            ]
        );
        assert_eq!(f.to_dense_in(&["M", "K"], 0.0).unwrap(), d);
        assert!(t.flatten("K", "M", "KM").is_err());
    }

    #[test]
    fn layout_numbers_fibers_in_order() {
        let mut t = mk(&[vec![1.0, 2.0], vec![0.0, 3.0]], &["M", "K"]);
        t.assign_layout();
        let r1 = child(&t.root, 1);
        assert_eq!(
            r1.pos,
            FiberPos {
                ordinal: 1,
                offset: 2
            }
        );
    }
}
