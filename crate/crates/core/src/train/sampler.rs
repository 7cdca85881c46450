use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::corpus::PlId;
use crate::error::{Error, Result};

/// Training windows grouped by language.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TrainData {
    pub per_pl: BTreeMap<PlId, Vec<Vec<u32>>>,
}

impl TrainData {
    pub fn new(per_pl: BTreeMap<PlId, Vec<Vec<u32>>>) -> Result<Self> {
        let per_pl: BTreeMap<PlId, Vec<Vec<u32>>> = per_pl
            .into_iter()
            .map(|(p, docs)| (p, docs.into_iter().filter(|d| d.len() >= 2).collect::<Vec<_>>()))
            .filter(|(_, docs)| !docs.is_empty())
            .collect();
        if per_pl.is_empty() {
            return Err(Error::config("training split is empty"));
        }
        Ok(Self { per_pl })
    }

    pub fn pls(&self) -> impl Iterator<Item = &PlId> {
        self.per_pl.keys()
    }
}

/// Smooth weighted round-robin over languages, weighted by the number of
/// training windows. Over any cycle of `Σ w` picks, language `i` is chosen
/// exactly `w_i` times, spread as evenly as possible.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LanguageScheduler {
    pub pls: Vec<PlId>,
    pub weights: Vec<u64>,
    pub current: Vec<i64>,
}

impl LanguageScheduler {
    pub fn new(data: &TrainData) -> Self {
        let pls: Vec<PlId> = data.per_pl.keys().cloned().collect();
        let weights: Vec<u64> = data.per_pl.values().map(|d| d.len() as u64).collect();
        Self {
            current: alloc::vec![0; pls.len()],
            pls,
            weights,
        }
    }

    pub fn next_pl(&mut self) -> PlId {
        let total: i64 = self.weights.iter().sum::<u64>() as i64;
        for (c, &w) in self.current.iter_mut().zip(&self.weights) {
            *c += w as i64;
        }
        let mut best = 0;
        for i in 1..self.current.len() {
            if self.current[i] > self.current[best] {
                best = i;
            }
        }
        self.current[best] -= total;
        self.pls[best].clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn round_robin_respects_weights() {
        let mut per_pl = BTreeMap::new();
        per_pl.insert(PlId::new("a"), vec![vec![1, 2]; 5]);
        per_pl.insert(PlId::new("b"), vec![vec![1, 2]; 1]);
        per_pl.insert(PlId::new("c"), vec![vec![1, 2]; 2]);
        let data = TrainData::new(per_pl).unwrap();
        let mut s = LanguageScheduler::new(&data);
        let picks: Vec<PlId> = (0..16).map(|_| s.next_pl()).collect();
        let count = |p: &str| picks.iter().filter(|x| x.as_str() == p).count();
        assert_eq!((count("a"), count("b"), count("c")), (10, 2, 4));
        // after a full cycle the state returns to zero
        assert!(s.current.iter().all(|&c| c == 0));
        // no language waits longer than its share
        assert_ne!(picks[0], picks[1]);
    }

    #[test]
    fn empty_data_rejected() {
        let mut per_pl = BTreeMap::new();
        per_pl.insert(PlId::new("a"), vec![vec![1]]);
        assert!(TrainData::new(per_pl).is_err());
    }
}
