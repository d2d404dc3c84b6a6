//! Step counts of the three intersection algorithms over sorted coordinate
//! lists.

/// Two-finger merge walk. Returns (pointer advances, matches, elements of
/// `a` visited, elements of `b` visited).
pub fn two_finger<T: Ord>(a: &[T], b: &[T]) -> (u64, u64, usize, usize) {
    let (mut i, mut j, mut tests, mut matches) = (0, 0, 0u64, 0u64);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => {
                i += 1;
                tests += 1;
            }
            std::cmp::Ordering::Greater => {
                j += 1;
                tests += 1;
            }
            std::cmp::Ordering::Equal => {
                i += 1;
                j += 1;
                tests += 2;
                matches += 1;
            }
        }
    }
    let va = if i < a.len() { i + 1 } else { a.len() };
    let vb = if j < b.len() { j + 1 } else { b.len() };
    (tests, matches, va, vb)
}

/// Leader-follower: every leader coordinate is probed in the follower.
/// Returns (tests, matches).
pub fn leader_follower<T: Ord>(leader: &[T], follower: &[T]) -> (u64, u64) {
    let matches = leader
        .iter()
        .filter(|c| follower.binary_search(c).is_ok())
        .count();
    (leader.len() as u64, matches as u64)
}

/// Skip-ahead: the side behind jumps to the first coordinate not below the
/// other side's current one; each jump landing is one probe. Returns
/// (tests, matches) with tests = matches + probes.
pub fn skip_ahead<T: Ord>(a: &[T], b: &[T]) -> (u64, u64) {
    let (mut i, mut j, mut probes, mut matches) = (0, 0, 0u64, 0u64);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Equal => {
                matches += 1;
                i += 1;
                j += 1;
            }
            std::cmp::Ordering::Less => {
                i += a[i..].partition_point(|x| x < &b[j]);
                probes += 1;
            }
            std::cmp::Ordering::Greater => {
                j += b[j..].partition_point(|x| x < &a[i]);
                probes += 1;
            }
        }
    }
    (matches + probes, matches)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_finger_walk() {
        let (t, m, va, vb) = two_finger(&[1, 3, 5], &[3, 4, 5]);
        assert_eq!((t, m, va, vb), (6, 2, 3, 3));
        assert_eq!(two_finger::<u32>(&[1, 2], &[]).0, 0);
    }

    #[test]
    fn leader_counts_leader() {
        assert_eq!(leader_follower(&[1, 3, 5], &[3, 4, 5]), (3, 2));
    }

    #[test]
    fn skip_ahead_disjoint() {
        let a = [0, 2, 4, 6];
        let b = [1, 3, 5, 7];
        let (tests, matches) = skip_ahead(&a, &b);
        assert_eq!(matches, 0);
        assert!(tests <= 2 * (a.len().min(b.len()) as u64 + 1));
        assert_eq!(skip_ahead(&[1, 3, 5], &[3, 4, 5]).1, 2);
    }
}
