//! Brute-force reconstructability checks for small clusters.

/// Largest cluster the exhaustive checks accept.
pub const VERIFY_MAX_NODES: usize = 7;

/// What one node holds for a message: `(generation, fragment index)` pairs,
/// or `None` if the node is crashed.
pub type Holding = Option<Vec<(u32, u16)>>;

/// Checks that every way of failing up to `max_faults` nodes (crashed nodes
/// count as already failed) leaves, for some generation `g`, at least `k(g)`
/// distinct fragments of that generation on the survivors. Returns the first
/// failing set of additional failures.
pub fn tolerates_failures(
    holdings: &[Holding],
    max_faults: usize,
    data_shards: impl Fn(u32) -> Option<usize>,
) -> Result<(), Vec<usize>> {
    let live: Vec<usize> = (0..holdings.len())
        .filter(|&j| holdings[j].is_some())
        .collect();
    let crashed = holdings.len() - live.len();
    let budget = max_faults.saturating_sub(crashed);
    let mut generations: Vec<u32> = holdings
        .iter()
        .flatten()
        .flat_map(|h| h.iter().map(|&(g, _)| g))
        .collect();
    generations.sort_unstable();
    generations.dedup();
    let thresholds: Vec<(u32, usize)> = generations
        .into_iter()
        .filter_map(|g| Some((g, data_shards(g)?)))
        .collect();
    assert!(
        live.len() < 32,
        "exhaustive check limited to small clusters"
    );
    for mask in 0u32..(1 << live.len()) {
        if mask.count_ones() as usize > budget {
            continue;
        }
        let ok = thresholds.iter().any(|&(g, k)| {
            let mut seen = 0u128;
            for (bit, &j) in live.iter().enumerate() {
                if mask & (1 << bit) != 0 {
                    continue;
                }
                for &(hg, idx) in holdings[j].as_ref().unwrap() {
                    if hg == g {
                        assert!(idx < 128, "fragment index beyond exhaustive-check range");
                        seen |= 1 << idx;
                    }
                }
            }
            seen.count_ones() as usize >= k
        });
        if !ok {
            return Err(live
                .iter()
                .enumerate()
                .filter(|(bit, _)| mask & (1 << bit) != 0)
                .map(|(_, &j)| j)
                .collect());
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn node(indices: &[u16]) -> Holding {
        Some(indices.iter().map(|&i| (0, i)).collect())
    }

    #[test]
    fn one_fragment_each_survives_two_failures_at_n5() {
        let h: Vec<Holding> = (0..5).map(|j| node(&[j * 3])).collect();
        assert!(tolerates_failures(&h, 2, |_| Some(3)).is_ok());
    }

    #[test]
    fn crashed_nodes_use_the_budget() {
        let mut h: Vec<Holding> = (0..5).map(|j| node(&[j * 3])).collect();
        h[4] = None;
        assert!(tolerates_failures(&h, 2, |_| Some(3)).is_ok());
        h[3] = None;
        assert!(tolerates_failures(&h, 2, |_| Some(3)).is_ok());
        h[2] = node(&[]);
        assert_eq!(tolerates_failures(&h, 2, |_| Some(3)), Err(vec![]));
    }

    #[test]
    fn reports_the_failing_set() {
        let h = vec![
            node(&[0, 1, 2]),
            node(&[3]),
            node(&[6]),
            node(&[]),
            node(&[]),
        ];
        assert_eq!(tolerates_failures(&h, 2, |_| Some(3)), Err(vec![0]));
    }

    #[test]
    fn any_generation_may_serve() {
        // Two full copies of generation 1 plus stale coded fragments.
        let h = vec![
            Some(vec![(1, 0)]),
            Some(vec![(1, 0)]),
            Some(vec![(1, 0)]),
            Some(vec![(0, 3)]),
            Some(vec![]),
        ];
        let k = |g| Some(if g == 0 { 3 } else { 1 });
        assert!(tolerates_failures(&h, 2, k).is_ok());
    }
}
