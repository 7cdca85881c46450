//! Byte-pair encoding over normalized token strings.
//!
//! Each non-special token string is split into characters; the final
//! character carries a trailing space as end-of-word marker, so merges
//! never cross token boundaries and decoding recovers the token strings.
//! Special tokens are atomic and never enter the merge statistics.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::literals::LiteralTable;
use super::{Languages, BOS, EOL, EOS, NUM_LIT, PAD, STR_LIT, UNK};
use crate::error::{Error, Result};

const END: char = ' ';

/// On-disk vocabulary layout. Ids are assigned in order: specials, base
/// symbols, then each merge result the first time it appears.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabFile {
    pub specials: Vec<String>,
    pub base_symbols: Vec<String>,
    pub merges: Vec<(String, String)>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BpeTrainReport {
    pub merges: usize,
    pub vocab_size: usize,
    pub warning: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Encoded {
    pub ids: Vec<u32>,
    pub unknown: usize,
}

#[derive(Clone, Debug)]
pub struct BpeVocab {
    file: VocabFile,
    texts: Vec<String>,
    special_ids: BTreeMap<String, u32>,
    symbol_ids: BTreeMap<String, u32>,
    ranks: BTreeMap<(u32, u32), (usize, u32)>,
}

impl PartialEq for BpeVocab {
    fn eq(&self, other: &Self) -> bool {
        self.file == other.file
    }
}

/// Standard special-token list: padding (id 0), unknown, framing,
/// placeholders, language identifiers and preserved literals.
pub fn default_specials(langs: &Languages, table: &LiteralTable) -> Vec<String> {
    let mut v: Vec<String> = [PAD, UNK, BOS, EOS, EOL, STR_LIT, NUM_LIT]
        .iter()
        .map(|s| String::from(*s))
        .collect();
    v.extend(langs.tokens());
    v.extend(table.tokens());
    v
}

fn split_word(word: &str) -> Vec<String> {
    let n = word.chars().count();
    word.chars()
        .enumerate()
        .map(|(i, c)| {
            let mut s = String::from(c);
            if i + 1 == n {
                s.push(END);
            }
            s
        })
        .collect()
}

impl BpeVocab {
    pub fn from_file(file: VocabFile) -> Result<Self> {
        let mut texts = Vec::new();
        let mut special_ids = BTreeMap::new();
        for s in &file.specials {
            if special_ids.insert(s.clone(), texts.len() as u32).is_some() {
                return Err(Error::corpus(alloc::format!("duplicate special `{s}`")));
            }
            texts.push(s.clone());
        }
        if file.specials.first().map(String::as_str) != Some(PAD) {
            return Err(Error::corpus("vocabulary must reserve id 0 for <pad>"));
        }
        let mut symbol_ids = BTreeMap::new();
        for s in &file.base_symbols {
            if s.is_empty() || symbol_ids.insert(s.clone(), texts.len() as u32).is_some() {
                return Err(Error::corpus(alloc::format!("bad base symbol `{s}`")));
            }
            texts.push(s.clone());
        }
        let mut ranks = BTreeMap::new();
        for (rank, (l, r)) in file.merges.iter().enumerate() {
            let (Some(&li), Some(&ri)) = (symbol_ids.get(l), symbol_ids.get(r)) else {
                return Err(Error::corpus(alloc::format!("merge ({l:?}, {r:?}) uses unknown symbols")));
            };
            let joined = alloc::format!("{l}{r}");
            let id = match symbol_ids.get(&joined) {
                Some(&id) => id,
                None => {
                    let id = texts.len() as u32;
                    symbol_ids.insert(joined.clone(), id);
                    texts.push(joined);
                    id
                }
            };
            ranks.entry((li, ri)).or_insert((rank, id));
        }
        Ok(Self {
            file,
            texts,
            special_ids,
            symbol_ids,
            ranks,
        })
    }

    pub fn file(&self) -> &VocabFile {
        &self.file
    }

    pub fn len(&self) -> usize {
        self.texts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.texts.is_empty()
    }

    pub fn special_id(&self, token: &str) -> Option<u32> {
        self.special_ids.get(token).copied()
    }

    pub fn is_special(&self, id: u32) -> bool {
        (id as usize) < self.file.specials.len()
    }

    pub fn unk_id(&self) -> u32 {
        self.special_id(UNK).expect("vocab has <unk>")
    }

    /// Printable text of one id: special tokens verbatim, subwords without
    /// the end-of-word marker.
    pub fn render(&self, id: u32) -> String {
        match self.texts.get(id as usize) {
            Some(t) if !self.is_special(id) => String::from(t.strip_suffix(END).unwrap_or(t)),
            Some(t) => t.clone(),
            None => String::from(UNK),
        }
    }

    /// Literal table implied by the `<STR_LIT:v>` / `<NUM_LIT:v>` specials.
    pub fn literal_table(&self) -> LiteralTable {
        let pick = |prefix: &str| -> Vec<String> {
            self.file
                .specials
                .iter()
                .filter_map(|s| s.strip_prefix(prefix).and_then(|r| r.strip_suffix('>')))
                .map(String::from)
                .collect()
        };
        LiteralTable::from_values(pick("<STR_LIT:"), pick("<NUM_LIT:"))
    }

    fn encode_word(&self, word: &str, out: &mut Vec<u32>) -> usize {
        let unk = self.unk_id();
        let mut unknown = 0;
        let mut syms: Vec<u32> = split_word(word)
            .iter()
            .map(|s| match self.symbol_ids.get(s) {
                Some(&id) if !s.starts_with(END) => id,
                _ => {
                    unknown += 1;
                    unk
                }
            })
            .collect();
        loop {
            let best = syms
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0], w[1])).map(|&(r, id)| (r, w[0], w[1], id)))
                .min();
            let Some((_, l, r, id)) = best else { break };
            let mut merged = Vec::with_capacity(syms.len());
            let mut i = 0;
            while i < syms.len() {
                if i + 1 < syms.len() && syms[i] == l && syms[i + 1] == r {
                    merged.push(id);
                    i += 2;
                } else {
                    merged.push(syms[i]);
                    i += 1;
                }
            }
            syms = merged;
        }
        out.extend(syms);
        unknown
    }

    /// Maps token strings to ids. Characters outside the base alphabet map
    /// to `<unk>` and are counted.
    pub fn encode(&self, tokens: &[String]) -> Encoded {
        let mut ids = Vec::with_capacity(tokens.len());
        let mut unknown = 0;
        for t in tokens {
            if let Some(id) = self.special_id(t) {
                ids.push(id);
            } else if t.is_empty() {
                continue;
            } else {
                unknown += self.encode_word(t, &mut ids);
            }
        }
        Encoded { ids, unknown }
    }

    /// Inverse of [`BpeVocab::encode`] at the token-string level.
    pub fn decode(&self, ids: &[u32]) -> Vec<String> {
        let mut out = Vec::new();
        let mut word = String::new();
        for &id in ids {
            if self.is_special(id) || id as usize >= self.texts.len() {
                if !word.is_empty() {
                    out.push(core::mem::take(&mut word));
                }
                out.push(self.render(id));
                continue;
            }
            let t = &self.texts[id as usize];
            match t.strip_suffix(END) {
                Some(stem) => {
                    word.push_str(stem);
                    out.push(core::mem::take(&mut word));
                }
                None => word.push_str(t),
            }
        }
        if !word.is_empty() {
            out.push(word);
        }
        out
    }
}

/// Greedy BPE training: repeatedly merges the most frequent adjacent pair
/// (ties broken lexicographically on the symbol strings) until the
/// vocabulary reaches `target_vocab_size` or no pair remains.
pub fn train_bpe(
    docs: &[Vec<String>],
    specials: Vec<String>,
    target_vocab_size: usize,
) -> Result<(BpeVocab, BpeTrainReport)> {
    let special_set: BTreeSet<&str> = specials.iter().map(String::as_str).collect();
    let mut word_counts: BTreeMap<&str, u64> = BTreeMap::new();
    for d in docs {
        for t in d {
            if !t.is_empty() && !special_set.contains(t.as_str()) {
                *word_counts.entry(t.as_str()).or_insert(0) += 1;
            }
        }
    }
    let mut base: BTreeSet<String> = BTreeSet::new();
    for w in word_counts.keys() {
        base.extend(split_word(w));
    }
    let mut symbols: Vec<String> = base.iter().cloned().collect();
    let mut sym_index: BTreeMap<String, u32> = symbols
        .iter()
        .enumerate()
        .map(|(i, s)| (s.clone(), i as u32))
        .collect();
    let mut words: Vec<(Vec<u32>, u64)> = word_counts
        .iter()
        .map(|(w, &c)| (split_word(w).iter().map(|s| sym_index[s]).collect(), c))
        .collect();

    let mut size = specials.len() + symbols.len();
    let mut merges: Vec<(String, String)> = Vec::new();
    let mut warning = None;
    if target_vocab_size <= size {
        warning = Some(alloc::format!(
            "target vocabulary {target_vocab_size} does not exceed specials + base symbols ({size}); no merges"
        ));
    }
    while size < target_vocab_size {
        let mut pairs: BTreeMap<(u32, u32), u64> = BTreeMap::new();
        for (w, c) in &words {
            for p in w.windows(2) {
                *pairs.entry((p[0], p[1])).or_insert(0) += c;
            }
        }
        let best = pairs.iter().min_by(|a, b| {
            b.1.cmp(a.1).then_with(|| {
                let ka = (&symbols[a.0 .0 as usize], &symbols[a.0 .1 as usize]);
                let kb = (&symbols[b.0 .0 as usize], &symbols[b.0 .1 as usize]);
                ka.cmp(&kb)
            })
        });
        let Some((&(l, r), _)) = best else {
            warning = Some(alloc::format!(
                "ran out of pairs at vocabulary size {size} (target {target_vocab_size})"
            ));
            break;
        };
        let joined = alloc::format!("{}{}", symbols[l as usize], symbols[r as usize]);
        merges.push((symbols[l as usize].clone(), symbols[r as usize].clone()));
        let id = match sym_index.get(&joined) {
            Some(&id) => id,
            None => {
                let id = symbols.len() as u32;
                sym_index.insert(joined.clone(), id);
                symbols.push(joined);
                size += 1;
                id
            }
        };
        for (w, _) in words.iter_mut() {
            let mut i = 0;
            let mut out = Vec::with_capacity(w.len());
            while i < w.len() {
                if i + 1 < w.len() && w[i] == l && w[i + 1] == r {
                    out.push(id);
                    i += 2;
                } else {
                    out.push(w[i]);
                    i += 1;
                }
            }
            *w = out;
        }
    }
    let vocab = BpeVocab::from_file(VocabFile {
        specials,
        base_symbols: base.into_iter().collect(),
        merges,
    })?;
    let report = BpeTrainReport {
        merges: vocab.file.merges.len(),
        vocab_size: vocab.len(),
        warning,
    };
    Ok((vocab, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;
    use alloc::vec;
    use proptest::prelude::*;

    fn specials() -> Vec<String> {
        default_specials(&Languages::default(), &LiteralTable::default())
    }

    fn words(s: &str) -> Vec<String> {
        s.split_whitespace().map(|w| w.to_string()).collect()
    }

    /// Pair counts computed directly over the corpus words.
    fn pair_count_oracle(corpus: &[&str]) -> BTreeMap<(String, String), u64> {
        let mut m = BTreeMap::new();
        for w in corpus {
            let syms = split_word(w);
            for p in syms.windows(2) {
                *m.entry((p[0].clone(), p[1].clone())).or_insert(0) += 1;
            }
        }
        m
    }

    #[test]
    fn first_merge_is_most_frequent_pair() {
        let oracle = pair_count_oracle(&["aaab", "aaab"]);
        let best = oracle.iter().max_by_key(|(_, &c)| c).unwrap();
        assert_eq!(best.0, &("a".to_string(), "a".to_string()));
        assert_eq!(*best.1, 4);
        let sp = specials();
        let base = 3; // "a", "b ", ... -> {"a", "b "}
        let _ = base;
        let (v, rep) = train_bpe(&[words("aaab aaab")], sp.clone(), sp.len() + 2 + 1).unwrap();
        assert_eq!(rep.merges, 1);
        assert_eq!(v.file().merges, vec![("a".to_string(), "a".to_string())]);
    }

    #[test]
    fn target_at_base_size_gives_character_vocab() {
        let sp = specials();
        let n = sp.len();
        let (v, rep) = train_bpe(&[words("abc cab")], sp, n + 4).unwrap();
        // base: a, b, c, "b ", "c " -> 5 symbols, so target n+4 is below base
        assert_eq!(rep.merges, 0);
        assert!(rep.warning.is_some());
        assert_eq!(v.len(), n + 5);
    }

    #[test]
    fn special_tokens_are_atomic() {
        let sp = specials();
        let doc = words("<python> <s> x <EOL> y <EOL> </s>");
        let (v, _) = train_bpe(&[doc.clone()], sp.clone(), sp.len() + 50).unwrap();
        let e = v.encode(&doc);
        let eol = v.special_id(EOL).unwrap();
        assert_eq!(e.ids.iter().filter(|&&i| i == eol).count(), 2);
        assert_eq!(v.decode(&e.ids), doc);
        assert!(v.file().merges.iter().all(|(l, r)| !l.contains('<') && !r.contains('<')));
    }

    #[test]
    fn unreachable_target_warns() {
        let sp = specials();
        let (v, rep) = train_bpe(&[words("ab")], sp.clone(), sp.len() + 100).unwrap();
        assert!(rep.warning.is_some());
        assert!(v.len() < sp.len() + 100);
    }

    #[test]
    fn unknown_symbols_counted() {
        let sp = specials();
        let (v, _) = train_bpe(&[words("ab")], sp.clone(), sp.len() + 3).unwrap();
        let e = v.encode(&words("az"));
        assert_eq!(e.unknown, 1);
        assert!(e.ids.contains(&v.unk_id()));
    }

    #[test]
    fn file_roundtrip_rebuilds_identical_ids() {
        let sp = specials();
        let docs = vec![words("foo bar foobar barfoo fo ob")];
        let (v, _) = train_bpe(&docs, sp.clone(), sp.len() + 20).unwrap();
        let v2 = BpeVocab::from_file(v.file().clone()).unwrap();
        assert_eq!(v.encode(&docs[0]), v2.encode(&docs[0]));
        assert_eq!(v.len(), v2.len());
    }

    #[test]
    fn pad_must_be_id_zero() {
        let f = VocabFile {
            specials: vec!["<unk>".to_string()],
            base_symbols: vec![],
            merges: vec![],
        };
        assert!(BpeVocab::from_file(f).is_err());
    }

    proptest! {
        #[test]
        fn decode_inverts_encode(ws in proptest::collection::vec("[a-e_(){}=+]{1,6}", 1..30), target in 0usize..40) {
            let sp = specials();
            let mut doc = vec!["<go>".to_string(), "<s>".to_string()];
            doc.extend(ws);
            doc.push("</s>".to_string());
            let (v, _) = train_bpe(&[doc.clone()], sp.clone(), sp.len() + target).unwrap();
            let e = v.encode(&doc);
            prop_assert_eq!(e.unknown, 0);
            prop_assert_eq!(v.decode(&e.ids), doc);
        }
    }
}
