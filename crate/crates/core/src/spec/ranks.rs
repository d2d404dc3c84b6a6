//! Partitioning rewrites of an Einsum's iteration space.
//!
//! Splitting rank `R` n times names the results `R{n}` (outermost) down to
//! `R0`; flattening `(A, B)` names the merged rank `AB`. Rewrites apply in
//! the order they are listed.

use std::collections::BTreeMap;

use super::{Directive, PartitionEntry, Size};

/// A rank of the rewritten iteration space.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IterRank {
    pub name: String,
    /// Original ranks whose coordinates this rank binds; empty for the
    /// upper rank of a split.
    pub bases: Vec<String>,
}

impl IterRank {
    pub fn base(name: &str) -> Self {
        IterRank {
            name: name.to_string(),
            bases: vec![name.to_string()],
        }
    }

    pub fn is_upper(&self) -> bool {
        self.bases.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SplitKind {
    Shape,
    Occupancy { leader: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Rewrite {
    Split {
        rank: String,
        kind: SplitKind,
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

pub fn resolve_size(size: &Size, shapes: &BTreeMap<String, usize>) -> Result<usize, String> {
    match size {
        Size::Num(n) => Ok(*n),
        Size::Sym(s) => shapes
            .get(s)
            .copied()
            .ok_or_else(|| format!("partition size `{s}` has no value in einsum.shapes")),
    }
}

/// Applies the rewrites to `ranks` (kept in order; splits expand in place,
/// flattens collapse into the upper rank's slot).
pub fn rewrite(
    ranks: &[String],
    entries: &[PartitionEntry],
    shapes: &BTreeMap<String, usize>,
) -> Result<(Vec<IterRank>, Vec<Rewrite>), String> {
    let mut cur: Vec<IterRank> = ranks.iter().map(|r| IterRank::base(r)).collect();
    let mut steps = Vec::new();
    for entry in entries {
        let mut name = match entry.ranks.as_slice() {
            [one] => one.clone(),
            many => many.concat(),
        };
        let n_splits = entry
            .directives
            .iter()
            .filter(|d| !matches!(d, Directive::Flatten))
            .count();
        let mut split_no = 0;
        for d in &entry.directives {
            match d {
                Directive::Flatten => {
                    let [a, b] = entry.ranks.as_slice() else {
                        return Err(format!(
                            "flatten() needs exactly two ranks, found {:?}",
                            entry.ranks
                        ));
                    };
                    let ia = find(&cur, a)?;
                    let ib = find(&cur, b)?;
                    let lower = cur.remove(ib);
                    let ia = if ib < ia { ia - 1 } else { ia };
                    let up = &mut cur[ia];
                    up.name = name.clone();
                    up.bases.extend(lower.bases);
                    steps.push(Rewrite::Flatten {
                        upper: a.clone(),
                        lower: b.clone(),
                        name: name.clone(),
                    });
                }
                Directive::UniformShape(size) | Directive::UniformOccupancy { size, .. } => {
                    let at = find(&cur, &name)?;
                    let size = resolve_size(size, shapes)?;
                    if size == 0 {
                        return Err(format!("partition size for {name} must be positive"));
                    }
                    let base = match entry.ranks.as_slice() {
                        [one] => one.clone(),
                        many => many.concat(),
                    };
                    let upper = format!("{base}{}", n_splits - split_no);
                    let lower = format!("{base}{}", n_splits - split_no - 1);
                    let kind = match d {
                        Directive::UniformOccupancy { leader, .. } => SplitKind::Occupancy {
                            leader: leader.clone(),
                        },
                        _ => SplitKind::Shape,
                    };
                    let old = cur.remove(at);
                    cur.insert(
                        at,
                        IterRank {
                            name: lower.clone(),
                            bases: old.bases,
                        },
                    );
                    cur.insert(
                        at,
                        IterRank {
                            name: upper.clone(),
                            bases: Vec::new(),
                        },
                    );
                    steps.push(Rewrite::Split {
                        rank: name.clone(),
                        kind,
                        size,
                        upper,
                        lower: lower.clone(),
                    });
                    name = lower;
                    split_no += 1;
                }
            }
        }
    }
    Ok((cur, steps))
}

fn find(cur: &[IterRank], name: &str) -> Result<usize, String> {
    cur.iter().position(|r| r.name == name).ok_or_else(|| {
        format!(
            "partitioning refers to rank {name}, which does not exist at that point (have {:?})",
            cur.iter().map(|r| &r.name).collect::<Vec<_>>()
        )
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(ranks: &[&str], directives: Vec<Directive>) -> PartitionEntry {
        PartitionEntry {
            ranks: ranks.iter().map(|s| s.to_string()).collect(),
            directives,
        }
    }

    fn names(r: &[IterRank]) -> Vec<&str> {
        r.iter().map(|r| r.name.as_str()).collect()
    }

    #[test]
    fn double_split_names() {
        let occ = |n| Directive::UniformOccupancy {
            leader: "A".into(),
            size: Size::Num(n),
        };
        let (r, steps) = rewrite(
            &["K".into(), "M".into(), "N".into()],
            &[entry(&["M"], vec![occ(256), occ(16)])],
            &BTreeMap::new(),
        )
        .unwrap();
        assert_eq!(names(&r), ["K", "M2", "M1", "M0", "N"]);
        assert_eq!(steps.len(), 2);
        assert!(r[1].is_upper() && r[2].is_upper() && !r[3].is_upper());
    }

    #[test]
    fn split_flatten_split() {
        let (r, _) = rewrite(
            &["M".into(), "N".into(), "K".into()],
            &[
                entry(&["K"], vec![Directive::UniformShape(Size::Num(128))]),
                entry(&["M", "K0"], vec![Directive::Flatten]),
                entry(
                    &["MK0"],
                    vec![Directive::UniformOccupancy {
                        leader: "T".into(),
                        size: Size::Num(16384),
                    }],
                ),
            ],
            &BTreeMap::new(),
        )
        .unwrap();
        assert_eq!(names(&r), ["MK01", "MK00", "N", "K1"]);
        assert_eq!(r[1].bases, ["M", "K"]);
    }

    #[test]
    fn symbolic_sizes_and_missing_rank() {
        let shapes = BTreeMap::from([("K1".to_string(), 8usize)]);
        let e = entry(
            &["K"],
            vec![Directive::UniformShape(Size::Sym("K1".into()))],
        );
        assert!(rewrite(&["K".into()], std::slice::from_ref(&e), &shapes).is_ok());
        assert!(rewrite(&["K".into()], &[e], &BTreeMap::new()).is_err());
        let bad = entry(&["Q"], vec![Directive::UniformShape(Size::Num(2))]);
        assert!(rewrite(&["K".into()], &[bad], &BTreeMap::new()).is_err());
    }
}
