//! Operating points of the replicated-log dissemination.

/// Wait for `quorum` acks, each holding `fragments_per_node` fragments.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tier {
    pub quorum: usize,
    pub fragments_per_node: usize,
}

/// `[(N, 1), (⌈3N/4⌉, 2), (F+1, F+1)]`, with a tier dropped when its quorum
/// does not fall below the previous one (at `N = 3` the middle tier
/// coincides with the first).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TierTable {
    tiers: Vec<Tier>,
}

/// Acks needed before followers may keep two fragments of an entry.
pub fn three_quarters(n_nodes: usize) -> usize {
    (3 * n_nodes).div_ceil(4)
}

impl TierTable {
    pub fn new(n_nodes: usize, max_faults: usize) -> Self {
        let candidates = [
            Tier {
                quorum: n_nodes,
                fragments_per_node: 1,
            },
            Tier {
                quorum: three_quarters(n_nodes),
                fragments_per_node: 2,
            },
            Tier {
                quorum: max_faults + 1,
                fragments_per_node: max_faults + 1,
            },
        ];
        let mut tiers: Vec<Tier> = Vec::with_capacity(3);
        for t in candidates {
            match tiers.last() {
                Some(prev) if t.quorum >= prev.quorum => {}
                _ => tiers.push(t),
            }
        }
        Self { tiers }
    }

    pub fn tiers(&self) -> &[Tier] {
        &self.tiers
    }

    /// The tier with the largest quorum not above `q`; the last tier when
    /// `q` is below every quorum.
    pub fn lookup(&self, q: usize) -> Tier {
        self.tiers
            .iter()
            .copied()
            .find(|t| t.quorum <= q)
            .unwrap_or(*self.tiers.last().unwrap())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tier(quorum: usize, fragments_per_node: usize) -> Tier {
        Tier {
            quorum,
            fragments_per_node,
        }
    }

    #[test]
    fn five_node_lookups() {
        let t = TierTable::new(5, 2);
        assert_eq!(t.tiers(), &[tier(5, 1), tier(4, 2), tier(3, 3)]);
        assert_eq!(t.lookup(5), tier(5, 1));
        assert_eq!(t.lookup(4), tier(4, 2));
        assert_eq!(t.lookup(3), tier(3, 3));
        assert_eq!(t.lookup(1), tier(3, 3));
    }

    #[test]
    fn three_nodes_drop_the_duplicate_quorum() {
        let t = TierTable::new(3, 1);
        assert_eq!(t.tiers(), &[tier(3, 1), tier(2, 2)]);
    }

    proptest! {
        #[test]
        fn tiers_are_ordered_and_safe(f in 1usize..60) {
            let n = 2 * f + 1;
            let t = TierTable::new(n, f);
            let tiers = t.tiers();
            prop_assert_eq!(*tiers.last().unwrap(), tier(f + 1, f + 1));
            for w in tiers.windows(2) {
                prop_assert!(w[0].quorum > w[1].quorum);
                prop_assert!(w[0].fragments_per_node < w[1].fragments_per_node);
            }
            // Any F failures among a tier's quorum leave F+1 fragments.
            for x in tiers {
                prop_assert!(x.fragments_per_node * (x.quorum - f) > f);
            }
        }
    }
}
