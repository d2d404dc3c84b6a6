//! Merge-network cost of rank swizzles.

use crate::executor::MergeGroup;
use crate::spec::MergeOrder;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MergeCost {
    pub passes: u64,
    pub moves: u64,
}

/// Passes of a `radix`-way merge tree over `runs` sorted runs (at least one).
pub fn passes(runs: u64, radix: usize) -> u64 {
    let r = runs.max(2);
    let radix = radix.max(2) as u64;
    let mut p = 0;
    let mut reach = 1u64;
    while reach < r {
        reach = reach.saturating_mul(radix);
        p += 1;
    }
    p
}

/// Every pass moves each element once. `opt` skips the final placement when
/// the merged stream feeds its consumer directly; otherwise reduction merges
/// duplicates during that final pass.
pub fn merge_cost(
    g: &MergeGroup,
    radix: usize,
    order: MergeOrder,
    reduce: bool,
    streamed: bool,
) -> MergeCost {
    if g.n == 0 {
        return MergeCost::default();
    }
    let passes = passes(g.runs, radix);
    let mut moves = g.n * passes;
    if order == MergeOrder::Opt && streamed {
        moves -= g.n;
    } else if reduce {
        moves -= g.dups.min(g.n);
    }
    MergeCost { passes, moves }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pass_counts() {
        assert_eq!(passes(64, 64), 1);
        assert_eq!(passes(1, 64), 1);
        assert_eq!(passes(128, 64), 2);
        assert_eq!(passes(65, 64), 2);
        assert_eq!(passes(4096, 64), 2);
    }

    #[test]
    fn moves() {
        let g = MergeGroup {
            n: 1000,
            runs: 128,
            dups: 100,
        };
        assert_eq!(
            merge_cost(&g, 64, MergeOrder::Fifo, false, false).moves,
            2000
        );
        assert_eq!(
            merge_cost(&g, 64, MergeOrder::Fifo, true, false).moves,
            1900
        );
        assert_eq!(merge_cost(&g, 64, MergeOrder::Opt, true, true).moves, 1000);
        assert_eq!(
            merge_cost(&g, 64, MergeOrder::Opt, false, false).moves,
            2000
        );
    }
}
