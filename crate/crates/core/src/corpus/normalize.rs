//! Literal normalization and document framing.

use alloc::string::String;
use alloc::vec::Vec;

use super::lexer::{lex, LexemeKind};
use super::literals::LiteralTable;
use super::{PlId, BOS, EOL, EOS, NUM_LIT, STR_LIT};
use crate::error::{Error, Result};

/// Optional hooks for normalization.
#[derive(Default)]
pub struct NormalizeOptions<'a> {
    /// Literal values for which this returns true are treated as named
    /// entities and always replaced by the bare placeholder.
    pub is_entity: Option<&'a dyn Fn(&str) -> bool>,
}

/// Normalized token strings of one document, framed as
/// `[<pl>, <s>, ..., </s>]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Normalized {
    pub pl: PlId,
    pub tokens: Vec<String>,
}

/// `[<lead>, <s>, body..., </s>]`.
pub fn frame(lead: &PlId, body: &[String]) -> Vec<String> {
    let mut out = Vec::with_capacity(body.len() + 3);
    out.push(lead.token());
    out.push(String::from(BOS));
    out.extend(body.iter().cloned());
    out.push(String::from(EOS));
    out
}

/// Lexes and normalizes the body of a document without framing.
pub fn normalize_body(
    raw_code: &str,
    pl: &PlId,
    table: &LiteralTable,
    opts: &NormalizeOptions<'_>,
) -> Vec<String> {
    let python = pl.as_str() == "python";
    let mut out: Vec<String> = Vec::new();
    for l in lex(raw_code, pl.comment_syntax()) {
        match l.kind {
            LexemeKind::Newline => {
                // one <EOL> per non-empty python line
                if python && out.last().is_some_and(|t| t != EOL) {
                    out.push(String::from(EOL));
                }
            }
            LexemeKind::Str => {
                let entity = opts.is_entity.is_some_and(|f| f(l.value));
                if !entity && table.has_string(l.value) {
                    out.push(alloc::format!("<STR_LIT:{}>", l.value));
                } else {
                    out.push(String::from(STR_LIT));
                }
            }
            LexemeKind::Number => {
                let entity = opts.is_entity.is_some_and(|f| f(l.value));
                if !entity && table.has_number(l.value) {
                    out.push(alloc::format!("<NUM_LIT:{}>", l.value));
                } else {
                    out.push(String::from(NUM_LIT));
                }
            }
            LexemeKind::Ident | LexemeKind::Punct => out.push(String::from(l.text)),
        }
    }
    out
}

/// Applies the four construction rules: lexical tokenization, `<s>`/`</s>`
/// framing (preceded by the language identifier), `<EOL>` for python line
/// breaks, and literal placeholders.
pub fn normalize(
    raw_code: &str,
    pl: &PlId,
    table: &LiteralTable,
    opts: &NormalizeOptions<'_>,
) -> Result<Normalized> {
    if raw_code.trim().is_empty() {
        return Err(Error::corpus("empty document"));
    }
    let body = normalize_body(raw_code, pl, table, opts);
    Ok(Normalized {
        pl: pl.clone(),
        tokens: frame(pl, &body),
    })
}

/// Bidirectional (natural language, code) pair: returns the
/// docstring→code and code→docstring orderings.
pub fn normalize_pair(
    raw_code: &str,
    docstring: &str,
    pl: &PlId,
    nl: &PlId,
    table: &LiteralTable,
    opts: &NormalizeOptions<'_>,
) -> Result<[Normalized; 2]> {
    if raw_code.trim().is_empty() {
        return Err(Error::corpus("empty document"));
    }
    let code = normalize_body(raw_code, pl, table, opts);
    let text = normalize_body(docstring, nl, table, opts);
    let join = |first: &PlId, a: &[String], second: &PlId, b: &[String]| {
        let mut body = a.to_vec();
        body.push(second.token());
        body.extend(b.iter().cloned());
        Normalized {
            pl: pl.clone(),
            tokens: frame(first, &body),
        }
    };
    Ok([join(nl, &text, pl, &code), join(pl, &code, nl, &text)])
}
