//! Concrete-representation accounting: footprints of fibertrees and the
//! width and placement of each traced access.

use crate::executor::{Datum, Record, TraceTensor};
use crate::fibertree::{Fiber, Payload, Tensor};
use crate::spec::{FormatKind, Layout, ProblemSpec, RankFormat, TensorFormat};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum FormatError {
    #[error("tensor {tensor}: configuration {config} has no entry for rank {rank}")]
    MissingRank {
        tensor: String,
        config: String,
        rank: String,
    },
    #[error("tensor {tensor} has no format configuration {config}")]
    UnknownConfig { tensor: String, config: String },
}

/// Format used for ranks no configuration describes: compressed, 32-bit
/// coordinates, 32-bit pointers above the leaves and 64-bit values at them.
pub fn default_rank_format(leaf: bool) -> RankFormat {
    RankFormat::new(FormatKind::C, 32, if leaf { 64 } else { 32 })
}

/// Configuration name used for `tensor` in `einsum`: the first binding
/// entry naming one, else the tensor's first declared configuration.
pub fn select_config(spec: &ProblemSpec, einsum: &str, tensor: &str) -> Option<String> {
    let bound = spec.binding.einsums.get(einsum).and_then(|b| {
        b.components
            .values()
            .flatten()
            .find(|e| e.tensor.as_deref() == Some(tensor) && e.config.is_some())
            .and_then(|e| e.config.clone())
    });
    bound.or_else(|| spec.format.tensors.get(tensor)?.keys().next().cloned())
}

pub fn tensor_format(
    spec: &ProblemSpec,
    tensor: &str,
    config: Option<&str>,
) -> Result<TensorFormat, FormatError> {
    let Some(config) = config else {
        return Ok(TensorFormat::default());
    };
    spec.format
        .tensors
        .get(tensor)
        .and_then(|m| m.get(config))
        .cloned()
        .ok_or_else(|| FormatError::UnknownConfig {
            tensor: tensor.into(),
            config: config.into(),
        })
}

/// Format of one traced rank. An explicit entry wins. Otherwise the upper
/// rank of a partition (no bases) is virtual and costs nothing, a rank over
/// one declared rank inherits its entry, and a flattened rank adds up the
/// widths of its constituents.
pub fn resolve_rank(
    tf: &TensorFormat,
    rank: &str,
    bases: &[String],
    leaf: bool,
) -> Option<RankFormat> {
    if let Some(f) = tf.get(rank) {
        return Some(*f);
    }
    let bases: Vec<&String> = bases.iter().filter(|b| !b.is_empty()).collect();
    match bases[..] {
        [] => None,
        [b] => Some(
            tf.get(b)
                .copied()
                .unwrap_or_else(|| default_rank_format(leaf)),
        ),
        ref many => {
            let parts: Vec<RankFormat> = many
                .iter()
                .map(|b| {
                    tf.get(b)
                        .copied()
                        .unwrap_or_else(|| default_rank_format(leaf))
                })
                .collect();
            let last = *parts.last().expect("nonempty");
            Some(RankFormat {
                kind: last.kind,
                layout: last.layout,
                cbits: parts.iter().map(|p| p.cbits).sum(),
                pbits: last.pbits,
                fhbits: last.fhbits,
            })
        }
    }
}

/// Formats of every rank of a traced tensor (`None` for virtual ranks).
pub fn trace_formats(tt: &TraceTensor, tf: &TensorFormat) -> Vec<Option<RankFormat>> {
    let n = tt.ranks.len();
    tt.ranks
        .iter()
        .zip(&tt.bases)
        .enumerate()
        .map(|(i, (r, b))| resolve_rank(tf, r, b, i + 1 == n))
        .collect()
}

/// Bits of one fiber with `shape` slots and `occupancy` elements.
pub fn fiber_bits(f: &RankFormat, shape: u64, occupancy: u64) -> u64 {
    let (c, p) = (f.cbits as u64, f.pbits as u64);
    let body = match f.kind {
        FormatKind::U => (c + p) * shape,
        FormatKind::C => (c + p) * occupancy,
        FormatKind::B => c * shape + p * occupancy,
    };
    body + f.fhbits as u64
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Footprint {
    /// Bits per rank, outermost first.
    pub ranks: Vec<(String, u64)>,
    pub total_bits: u64,
}

impl Footprint {
    pub fn bytes(&self) -> u64 {
        self.total_bits.div_ceil(8)
    }
}

/// Storage size of `t` under `tf`, which must name every rank of `t`.
pub fn footprint(t: &Tensor, config: &str, tf: &TensorFormat) -> Result<Footprint, FormatError> {
    let mut per = vec![0u64; t.ranks.len()];
    let fmts: Vec<&RankFormat> = t
        .ranks
        .iter()
        .map(|r| {
            tf.get(&r.name).ok_or_else(|| FormatError::MissingRank {
                tensor: t.name.clone(),
                config: config.into(),
                rank: r.name.clone(),
            })
        })
        .collect::<Result<_, _>>()?;
    fn walk(f: &Fiber, d: usize, t: &Tensor, fmts: &[&RankFormat], per: &mut [u64]) {
        per[d] += fiber_bits(fmts[d], t.ranks[d].extent.size() as u64, f.len() as u64);
        for p in f.payloads() {
            if let Payload::Fiber(c) = p {
                walk(c, d + 1, t, fmts, per);
            }
        }
    }
    if !t.ranks.is_empty() && !t.root.is_empty() {
        walk(&t.root, 0, t, &fmts, &mut per);
    }
    Ok(Footprint {
        total_bits: per.iter().sum(),
        ranks: t.ranks.iter().map(|r| r.name.clone()).zip(per).collect(),
    })
}

/// Where a datum lives inside its rank's storage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Region {
    Headers,
    Coords,
    Payloads,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Access {
    pub bits: u32,
    pub region: Region,
    /// Bit offset within the region.
    pub offset: u64,
}

/// Width and placement of one traced access. Headers cost `fhbits`. In an
/// array-of-structs layout coordinate and payload of an element sit side by
/// side in one stream, and a rank with headers pays `fhbits` per element
/// step as its link pointer.
pub fn access_cost(rec: &Record, f: &RankFormat, extent: u64) -> Access {
    let (c, p, h) = (f.cbits as u64, f.pbits as u64, f.fhbits as u64);
    let slot = rec.fiber * extent + rec.coord;
    match (rec.datum, f.layout) {
        (Datum::Header, _) => Access {
            bits: f.fhbits,
            region: Region::Headers,
            offset: rec.fiber * h,
        },
        (d, Layout::ArrayOfStructs) => {
            let stride = c + p + h;
            let (bits, skip) = if d == Datum::Coord {
                (c + h, 0)
            } else {
                (p, c + h)
            };
            Access {
                bits: bits as u32,
                region: Region::Coords,
                offset: rec.elem * stride + skip,
            }
        }
        (Datum::Coord, _) => Access {
            bits: f.cbits,
            region: Region::Coords,
            offset: match f.kind {
                FormatKind::C => rec.elem * c,
                FormatKind::U | FormatKind::B => slot * c,
            },
        },
        (Datum::Payload, _) => Access {
            bits: f.pbits,
            region: Region::Payloads,
            offset: match f.kind {
                FormatKind::U => slot * p,
                FormatKind::C | FormatKind::B => rec.elem * p,
            },
        },
    }
}
