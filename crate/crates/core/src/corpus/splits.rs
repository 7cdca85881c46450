use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::doc::Split;
use super::PlId;
use crate::error::{Error, Result};

/// One source document before normalization.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawDoc {
    pub pl: PlId,
    pub code: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub docstring: Option<String>,
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(mut h: u64, bytes: &[u8]) -> u64 {
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// Stable 64-bit FNV-1a hash over language, code and docstring.
pub fn content_hash(doc: &RawDoc) -> u64 {
    let mut h = fnv1a(FNV_OFFSET, doc.pl.as_str().as_bytes());
    h = fnv1a(h, &[0]);
    h = fnv1a(h, doc.code.as_bytes());
    h = fnv1a(h, &[0]);
    if let Some(d) = &doc.docstring {
        h = fnv1a(h, &[1]);
        h = fnv1a(h, d.as_bytes());
    }
    h
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum SplitMode {
    Full,
    /// Downsample `target`'s train split to `reference`'s train count.
    LowResource { target: PlId, reference: PlId },
    /// Drop `excluded` from the train split.
    CrossDomain { excluded: PlId },
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SplitSet {
    pub train: Vec<RawDoc>,
    pub dev: Vec<RawDoc>,
    pub test: Vec<RawDoc>,
}

impl SplitSet {
    pub fn get(&self, split: Split) -> &[RawDoc] {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }

    pub fn count(&self, split: Split, pl: &PlId) -> usize {
        self.get(split).iter().filter(|d| &d.pl == pl).count()
    }
}

/// Per language: deduplicate, order by content hash, then take 2% dev,
/// 2% test (both rounded down) and the remainder as train. `seed` only
/// affects which documents survive low-resource downsampling.
pub fn derive_splits(docs: &[RawDoc], mode: &SplitMode, seed: u64) -> Result<SplitSet> {
    let mut by_pl: BTreeMap<&PlId, Vec<(u64, &RawDoc)>> = BTreeMap::new();
    let mut seen = BTreeSet::new();
    for d in docs {
        let h = content_hash(d);
        if seen.insert(h) {
            by_pl.entry(&d.pl).or_default().push((h, d));
        }
    }
    let mut out = SplitSet::default();
    for (pl, mut group) in by_pl {
        group.sort_by_key(|(h, _)| *h);
        let n = group.len();
        let held = n * 2 / 100;
        let mut train: Vec<(u64, &RawDoc)> = group[2 * held..].to_vec();
        out.dev.extend(group[..held].iter().map(|(_, d)| (*d).clone()));
        out.test.extend(group[held..2 * held].iter().map(|(_, d)| (*d).clone()));

        match mode {
            SplitMode::LowResource { target, reference } if target == pl => {
                let keep = docs_train_count(docs, reference)?;
                if keep > train.len() {
                    return Err(Error::corpus(alloc::format!(
                        "reference `{reference}` has {keep} train docs, more than target `{target}` ({})",
                        train.len()
                    )));
                }
                let mut order: Vec<(u64, usize)> = train
                    .iter()
                    .enumerate()
                    .map(|(i, (h, _))| (fnv1a(fnv1a(FNV_OFFSET, &seed.to_le_bytes()), &h.to_le_bytes()), i))
                    .collect();
                order.sort_unstable();
                let mut chosen: Vec<usize> = order[..keep].iter().map(|&(_, i)| i).collect();
                chosen.sort_unstable();
                train = chosen.into_iter().map(|i| train[i]).collect();
            }
            SplitMode::CrossDomain { excluded } if excluded == pl => train.clear(),
            _ => {}
        }
        out.train.extend(train.into_iter().map(|(_, d)| d.clone()));
    }
    Ok(out)
}

fn docs_train_count(docs: &[RawDoc], pl: &PlId) -> Result<usize> {
    let unique: BTreeSet<u64> = docs.iter().filter(|d| &d.pl == pl).map(content_hash).collect();
    if unique.is_empty() {
        return Err(Error::corpus(alloc::format!("reference `{pl}` has no documents")));
    }
    let n = unique.len();
    Ok(n - 2 * (n * 2 / 100))
}
