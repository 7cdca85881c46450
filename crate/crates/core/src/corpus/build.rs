//! End-to-end corpus construction from raw documents.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::bpe::{default_specials, train_bpe, BpeTrainReport, BpeVocab};
use super::doc::{window, CorpusDoc, Split};
use super::literals::{build_literal_table, LiteralTable};
use super::normalize::{normalize, normalize_pair, NormalizeOptions, Normalized};
use super::splits::{derive_splits, RawDoc, SplitMode, SplitSet};
use super::Languages;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub languages: Languages,
    pub string_literals: usize,
    pub number_literals: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    /// Emit docstring→code and code→docstring orderings for documents with
    /// a docstring.
    pub bidirectional: bool,
    pub split: SplitMode,
    /// Literal values matching any of these patterns (`*` matches any run
    /// of characters) become the bare placeholder, as named entities.
    #[serde(default)]
    pub entities: Vec<String>,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            languages: Languages::default(),
            string_literals: 200,
            number_literals: 30,
            vocab_size: 50257,
            max_seq: 1024,
            bidirectional: false,
            split: SplitMode::Full,
            entities: Vec::new(),
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_seq < 2 {
            return Err(Error::config("corpus.max_seq must be at least 2"));
        }
        if self.languages.programming.is_empty() {
            return Err(Error::config("corpus.languages is empty"));
        }
        Ok(())
    }
}

/// Whole-string match where `*` stands for any (possibly empty) run.
pub fn glob_match(pattern: &str, value: &str) -> bool {
    let p: Vec<char> = pattern.chars().collect();
    let v: Vec<char> = value.chars().collect();
    // reachable[j]: pattern prefix matches value prefix of length j
    let mut reachable = alloc::vec![false; v.len() + 1];
    reachable[0] = true;
    for &c in &p {
        if c == '*' {
            for j in 1..=v.len() {
                reachable[j] |= reachable[j - 1];
            }
        } else {
            for j in (1..=v.len()).rev() {
                reachable[j] = reachable[j - 1] && v[j - 1] == c;
            }
            reachable[0] = false;
        }
    }
    reachable[v.len()]
}

/// Normalized documents tagged with their split.
pub type NormalizedSet = Vec<(Split, Normalized)>;

pub fn check_languages(docs: &[RawDoc], langs: &Languages) -> Result<()> {
    for d in docs {
        if !langs.programming.iter().any(|p| p == d.pl.as_str()) {
            return Err(Error::config(alloc::format!("unknown language `{}`", d.pl)));
        }
    }
    Ok(())
}

/// Normalizes every split. Documents whose code is blank are an error.
pub fn normalize_splits(splits: &SplitSet, table: &LiteralTable, config: &CorpusConfig) -> Result<NormalizedSet> {
    let nl = config
        .languages
        .natural
        .first()
        .map(|n| super::PlId::new(n.as_str()));
    let is_entity = |v: &str| config.entities.iter().any(|p| glob_match(p, v));
    let opts = NormalizeOptions {
        is_entity: (!config.entities.is_empty()).then_some(&is_entity as &dyn Fn(&str) -> bool),
    };
    let mut out = Vec::new();
    for split in [Split::Train, Split::Dev, Split::Test] {
        for d in splits.get(split) {
            match (&d.docstring, &nl) {
                (Some(text), Some(nl)) if config.bidirectional && !text.trim().is_empty() => {
                    for n in normalize_pair(&d.code, text, &d.pl, nl, table, &opts)? {
                        out.push((split, n));
                    }
                }
                _ => out.push((split, normalize(&d.code, &d.pl, table, &opts)?)),
            }
        }
    }
    Ok(out)
}

/// Trains the vocabulary on the training split only.
pub fn train_vocab(
    normalized: &NormalizedSet,
    table: &LiteralTable,
    config: &CorpusConfig,
) -> Result<(BpeVocab, BpeTrainReport)> {
    let train: Vec<Vec<String>> = normalized
        .iter()
        .filter(|(s, _)| *s == Split::Train)
        .map(|(_, n)| n.tokens.clone())
        .collect();
    train_bpe(&train, default_specials(&config.languages, table), config.vocab_size)
}

/// Encodes and windows documents. Returns the documents and the number of
/// tokens that fell back to `<unk>`.
pub fn encode_docs(vocab: &BpeVocab, normalized: &NormalizedSet, max_seq: usize) -> (Vec<CorpusDoc>, usize) {
    let mut docs = Vec::new();
    let mut unknown = 0;
    for (split, n) in normalized {
        let enc = vocab.encode(&n.tokens);
        unknown += enc.unknown;
        for ids in window(&enc.ids, max_seq) {
            docs.push(CorpusDoc {
                pl: n.pl.clone(),
                split: *split,
                tokens: ids,
            });
        }
    }
    (docs, unknown)
}

pub struct BuiltCorpus {
    pub vocab: BpeVocab,
    pub report: BpeTrainReport,
    pub docs: Vec<CorpusDoc>,
    pub unknown: usize,
}

/// Splits, builds the literal table from training code, normalizes,
/// trains BPE and encodes.
pub fn build_corpus(raw: &[RawDoc], config: &CorpusConfig, seed: u64) -> Result<BuiltCorpus> {
    config.validate()?;
    check_languages(raw, &config.languages)?;
    let splits = derive_splits(raw, &config.split, seed)?;
    let table = build_literal_table(&splits.train, config.string_literals, config.number_literals);
    let normalized = normalize_splits(&splits, &table, config)?;
    let (vocab, report) = train_vocab(&normalized, &table, config)?;
    let (docs, unknown) = encode_docs(&vocab, &normalized, config.max_seq);
    Ok(BuiltCorpus {
        vocab,
        report,
        docs,
        unknown,
    })
}
