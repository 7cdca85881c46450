//! Corpus construction: lexing, literal normalization, framing, BPE and
//! the train/dev/test derivations.

mod bpe;
mod build;
mod doc;
mod lexer;
mod literals;
mod normalize;
mod splits;

pub use build::{build_corpus, check_languages, encode_docs, glob_match, normalize_splits, train_vocab, BuiltCorpus, CorpusConfig, NormalizedSet};
pub use bpe::{default_specials, train_bpe, BpeTrainReport, BpeVocab, Encoded, VocabFile};
pub use doc::{window, CorpusDoc, Split};
pub use lexer::{lex, CommentSyntax, Lexeme, LexemeKind};
pub use literals::{build_literal_table, LiteralCounts, LiteralTable};
pub use normalize::{frame, normalize, normalize_pair, Normalized, NormalizeOptions};
pub use splits::{content_hash, derive_splits, RawDoc, SplitMode, SplitSet};

use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const BOS: &str = "<s>";
pub const EOS: &str = "</s>";
pub const EOL: &str = "<EOL>";
pub const STR_LIT: &str = "<STR_LIT>";
pub const NUM_LIT: &str = "<NUM_LIT>";

/// Id reserved for padding in every vocabulary.
pub const PAD_ID: u32 = 0;

/// Programming-language (or natural-language) identifier.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PlId(String);

impl PlId {
    /// Unchecked constructor; prefer [`Languages::id`] when a language list
    /// is available.
    pub fn new(name: impl Into<String>) -> Self {
        PlId(name.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// Identifier token, e.g. `<python>`.
    pub fn token(&self) -> String {
        alloc::format!("<{}>", self.0)
    }

    pub fn comment_syntax(&self) -> CommentSyntax {
        CommentSyntax::for_language(&self.0)
    }
}

impl fmt::Display for PlId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// The configured set of language identifiers.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Languages {
    pub programming: Vec<String>,
    pub natural: Vec<String>,
}

impl Default for Languages {
    fn default() -> Self {
        Self {
            programming: ["go", "java", "javascript", "php", "python", "ruby"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            natural: alloc::vec!["en".to_string()],
        }
    }
}

impl Languages {
    pub fn new(programming: Vec<String>) -> Self {
        Self {
            programming,
            natural: alloc::vec!["en".to_string()],
        }
    }

    pub fn id(&self, name: &str) -> Result<PlId> {
        if self.contains(name) {
            Ok(PlId::new(name))
        } else {
            Err(Error::config(alloc::format!("unknown language `{name}`")))
        }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.programming.iter().chain(&self.natural).any(|n| n == name)
    }

    /// All identifier tokens in configuration order.
    pub fn tokens(&self) -> Vec<String> {
        self.programming
            .iter()
            .chain(&self.natural)
            .map(|n| alloc::format!("<{n}>"))
            .collect()
    }
}
