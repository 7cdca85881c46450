use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::lexer::{lex, LexemeKind};
use super::RawDoc;

/// Literal frequency counts. Merging is associative and commutative, so
/// per-document counts can be combined in any order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LiteralCounts {
    pub strings: BTreeMap<String, u64>,
    pub numbers: BTreeMap<String, u64>,
}

impl LiteralCounts {
    pub fn from_doc(doc: &RawDoc) -> Self {
        let mut c = LiteralCounts::default();
        for l in lex(&doc.code, doc.pl.comment_syntax()) {
            let map = match l.kind {
                LexemeKind::Str => &mut c.strings,
                LexemeKind::Number => &mut c.numbers,
                _ => continue,
            };
            *map.entry(String::from(l.value)).or_insert(0) += 1;
        }
        c
    }

    pub fn merge(&mut self, other: &LiteralCounts) {
        for (k, v) in &other.strings {
            *self.strings.entry(k.clone()).or_insert(0) += v;
        }
        for (k, v) in &other.numbers {
            *self.numbers.entry(k.clone()).or_insert(0) += v;
        }
    }
}

/// The most frequent string and numeric literals of a training split,
/// ordered by descending frequency (ties lexicographic).
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LiteralTable {
    pub strings: Vec<(String, u64)>,
    pub numbers: Vec<(String, u64)>,
}

fn top(map: &BTreeMap<String, u64>, cap: usize) -> Vec<(String, u64)> {
    let mut v: Vec<(String, u64)> = map.iter().map(|(k, &c)| (k.clone(), c)).collect();
    v.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    v.truncate(cap);
    v
}

impl LiteralTable {
    pub fn from_counts(counts: &LiteralCounts, string_cap: usize, number_cap: usize) -> Self {
        Self {
            strings: top(&counts.strings, string_cap),
            numbers: top(&counts.numbers, number_cap),
        }
    }

    /// Rebuilds a table from preserved literal values (counts unknown).
    pub fn from_values(strings: Vec<String>, numbers: Vec<String>) -> Self {
        Self {
            strings: strings.into_iter().map(|s| (s, 0)).collect(),
            numbers: numbers.into_iter().map(|s| (s, 0)).collect(),
        }
    }

    pub fn has_string(&self, v: &str) -> bool {
        self.strings.iter().any(|(s, _)| s == v)
    }

    pub fn has_number(&self, v: &str) -> bool {
        self.numbers.iter().any(|(s, _)| s == v)
    }

    /// Placeholder tokens for every preserved literal, strings first.
    pub fn tokens(&self) -> Vec<String> {
        self.strings
            .iter()
            .map(|(s, _)| alloc::format!("<STR_LIT:{s}>"))
            .chain(self.numbers.iter().map(|(s, _)| alloc::format!("<NUM_LIT:{s}>")))
            .collect()
    }
}

/// Counts literals over `train_docs` and keeps the `string_cap` most
/// frequent strings and `number_cap` most frequent numbers.
pub fn build_literal_table(train_docs: &[RawDoc], string_cap: usize, number_cap: usize) -> LiteralTable {
    let mut counts = LiteralCounts::default();
    for d in train_docs {
        counts.merge(&LiteralCounts::from_doc(d));
    }
    LiteralTable::from_counts(&counts, string_cap, number_cap)
}
