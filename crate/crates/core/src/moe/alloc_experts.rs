use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::corpus::PlId;
use crate::error::{Error, Result};

/// Per-language exclusive expert groups plus the shared experts of one
/// expert layer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpertAllocation {
    pub total_experts: usize,
    pub shared: Vec<usize>,
    pub per_pl: BTreeMap<PlId, Vec<usize>>,
}

impl ExpertAllocation {
    /// Validates and sorts an explicit allocation.
    pub fn new(
        total_experts: usize,
        shared: Vec<usize>,
        per_pl: BTreeMap<PlId, Vec<usize>>,
    ) -> Result<Self> {
        let mut a = Self {
            total_experts,
            shared,
            per_pl,
        };
        a.shared.sort_unstable();
        for g in a.per_pl.values_mut() {
            g.sort_unstable();
        }
        a.validate()?;
        Ok(a)
    }

    /// Contiguous groups in language-name order with the given sizes; the
    /// shared experts take the final `shared` indices.
    pub fn from_group_sizes(
        sizes: &BTreeMap<PlId, usize>,
        total_experts: usize,
        shared: usize,
    ) -> Result<Self> {
        let mut next = 0;
        let mut per_pl = BTreeMap::new();
        for (pl, &n) in sizes {
            per_pl.insert(pl.clone(), (next..next + n).collect());
            next += n;
        }
        if next + shared > total_experts {
            return Err(Error::config(alloc::format!(
                "{next} language experts + {shared} shared exceed {total_experts}"
            )));
        }
        Self::new(
            total_experts,
            (total_experts - shared..total_experts).collect(),
            per_pl,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for (pl, group) in &self.per_pl {
            if group.is_empty() {
                return Err(Error::config(alloc::format!("language `{pl}` has an empty expert group")));
            }
            for &e in group {
                self.check_index(e)?;
                if !seen.insert(e) {
                    return Err(Error::config(alloc::format!("expert {e} assigned twice")));
                }
            }
        }
        for &e in &self.shared {
            self.check_index(e)?;
            if !seen.insert(e) {
                return Err(Error::config(alloc::format!("expert {e} assigned twice")));
            }
        }
        Ok(())
    }

    fn check_index(&self, e: usize) -> Result<()> {
        if e >= self.total_experts {
            return Err(Error::config(alloc::format!(
                "expert index {e} out of range for {} experts",
                self.total_experts
            )));
        }
        Ok(())
    }

    pub fn pls(&self) -> impl Iterator<Item = &PlId> {
        self.per_pl.keys()
    }

    /// Experts a token of `pl` may be routed to under per-language gating
    /// with shared experts.
    pub fn routable(&self, pl: &PlId) -> usize {
        self.per_pl.get(pl).map_or(0, Vec::len) + self.shared.len()
    }
}

/// Splits the `total - shared` language-specific experts proportionally to
/// `data_sizes` by largest remainder, with a floor of `min_per_pl` per
/// language. Languages whose proportional quota falls below the floor are
/// pinned to it and the rest is re-divided among the others.
pub fn allocate_experts(
    data_sizes: &BTreeMap<PlId, u64>,
    total_experts: usize,
    shared: usize,
    min_per_pl: usize,
) -> Result<ExpertAllocation> {
    if data_sizes.is_empty() {
        return Err(Error::config("no languages to allocate experts to"));
    }
    let budget = total_experts
        .checked_sub(shared)
        .ok_or_else(|| Error::config("more shared experts than experts"))?;
    let n = data_sizes.len();
    if min_per_pl == 0 || budget < n * min_per_pl {
        return Err(Error::config(alloc::format!(
            "cannot give {n} languages {min_per_pl} experts each out of {budget}"
        )));
    }
    let mut sizes: BTreeMap<PlId, usize> = BTreeMap::new();
    let all_zero = data_sizes.values().all(|&s| s == 0);
    let mut open: Vec<(&PlId, u128)> = data_sizes
        .iter()
        .map(|(p, &s)| (p, if all_zero { 1 } else { s as u128 }))
        .collect();
    let mut left = budget;
    loop {
        let total: u128 = open.iter().map(|(_, s)| s).sum::<u128>().max(1);
        let quota = |s: u128| -> (u128, u128) {
            let num = left as u128 * s;
            (num / total, num % total)
        };
        let pinned: Vec<usize> = open
            .iter()
            .enumerate()
            .filter(|(_, (_, s))| quota(*s).0 < min_per_pl as u128)
            .map(|(i, _)| i)
            .collect();
        if pinned.is_empty() {
            let mut parts: Vec<(&PlId, usize, u128)> = open
                .iter()
                .map(|(p, s)| {
                    let (q, r) = quota(*s);
                    (*p, q as usize, r)
                })
                .collect();
            let mut rest = left - parts.iter().map(|p| p.1).sum::<usize>();
            let mut order: Vec<usize> = (0..parts.len()).collect();
            order.sort_by(|&a, &b| parts[b].2.cmp(&parts[a].2).then(parts[a].0.cmp(parts[b].0)));
            for i in order {
                if rest == 0 {
                    break;
                }
                parts[i].1 += 1;
                rest -= 1;
            }
            for (p, q, _) in parts {
                sizes.insert(p.clone(), q);
            }
            break;
        }
        for &i in pinned.iter().rev() {
            let (p, _) = open.remove(i);
            sizes.insert(p.clone(), min_per_pl);
            left -= min_per_pl;
        }
        if open.is_empty() {
            // every language sat below the floor; leftovers go in name order
            let keys: Vec<PlId> = sizes.keys().cloned().collect();
            for k in keys.iter().cycle().take(left) {
                *sizes.get_mut(k).expect("present") += 1;
            }
            break;
        }
    }
    ExpertAllocation::from_group_sizes(&sizes, total_experts, shared)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sizes(pairs: &[(&str, u64)]) -> BTreeMap<PlId, u64> {
        pairs.iter().map(|(p, s)| (PlId::new(*p), *s)).collect()
    }

    fn group_sizes(a: &ExpertAllocation) -> BTreeMap<&str, usize> {
        a.per_pl.iter().map(|(p, g)| (p.as_str(), g.len())).collect()
    }

    #[test]
    fn largest_remainder_with_floor() {
        let a = allocate_experts(&sizes(&[("a", 90), ("b", 10)]), 11, 1, 2).unwrap();
        assert_eq!(group_sizes(&a), [("a", 8), ("b", 2)].into_iter().collect());
        assert_eq!(a.shared, [10]);
        assert_eq!(a.per_pl[&PlId::new("a")], (0..8).collect::<Vec<_>>());
    }

    #[test]
    fn equal_sizes_split_evenly() {
        let a = allocate_experts(&sizes(&[("x", 7), ("y", 7)]), 5, 1, 1).unwrap();
        assert_eq!(group_sizes(&a), [("x", 2), ("y", 2)].into_iter().collect());
        assert_eq!(a.shared, [4]);
    }

    #[test]
    fn infeasible_floor_is_config_error() {
        let s = sizes(&[("a", 1), ("b", 1), ("c", 1)]);
        assert!(matches!(allocate_experts(&s, 6, 1, 2), Err(Error::Config(_))));
    }

    #[test]
    fn explicit_table_allocation() {
        let routable = [("ruby", 3), ("go", 5), ("javascript", 6), ("php", 7), ("java", 7), ("python", 9)];
        let groups: BTreeMap<PlId, usize> =
            routable.iter().map(|(p, r)| (PlId::new(*p), r - 1)).collect();
        let a = ExpertAllocation::from_group_sizes(&groups, 32, 1).unwrap();
        for (p, r) in routable {
            assert_eq!(a.routable(&PlId::new(p)), r);
        }
        assert_eq!(a.per_pl.values().map(Vec::len).sum::<usize>() + a.shared.len(), 32);
    }

    #[test]
    fn overlapping_groups_rejected() {
        let mut per_pl = BTreeMap::new();
        per_pl.insert(PlId::new("a"), alloc::vec![0, 1]);
        per_pl.insert(PlId::new("b"), alloc::vec![1]);
        assert!(ExpertAllocation::new(4, alloc::vec![3], per_pl).is_err());
    }

    proptest! {
        #[test]
        fn allocation_invariants(raw in proptest::collection::vec(0u64..10_000, 1..8), extra in 0usize..20, shared in 0usize..3, floor in 1usize..3) {
            let s: BTreeMap<PlId, u64> = raw.iter().enumerate().map(|(i, &v)| (PlId::new(alloc::format!("pl{i}")), v)).collect();
            let total = s.len() * floor + extra + shared;
            let a = allocate_experts(&s, total, shared, floor).unwrap();
            a.validate().unwrap();
            prop_assert!(a.per_pl.values().all(|g| g.len() >= floor));
            prop_assert_eq!(a.per_pl.values().map(Vec::len).sum::<usize>(), total - shared);
            prop_assert_eq!(a.shared.len(), shared);
            // a larger dataset never receives fewer experts
            for (p, &sp) in &s {
                for (q, &sq) in &s {
                    if sp > sq {
                        prop_assert!(a.per_pl[p].len() >= a.per_pl[q].len());
                    }
                }
            }
        }
    }
}
