//! Language-agnostic lexer: identifiers, numbers, quoted strings,
//! operators and punctuation, with per-language comment syntax.

use alloc::vec::Vec;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LexemeKind {
    Ident,
    Number,
    /// String literal; `value` holds the contents without quotes.
    Str,
    Punct,
    Newline,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Lexeme<'a> {
    pub kind: LexemeKind,
    pub text: &'a str,
    pub value: &'a str,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CommentSyntax {
    pub hash: bool,
    pub slashes: bool,
    pub block: bool,
    pub triple_quotes: bool,
    pub backticks: bool,
}

impl CommentSyntax {
    pub fn for_language(name: &str) -> Self {
        let none = CommentSyntax {
            hash: false,
            slashes: false,
            block: false,
            triple_quotes: false,
            backticks: false,
        };
        match name {
            "python" => CommentSyntax {
                hash: true,
                triple_quotes: true,
                ..none
            },
            "ruby" => CommentSyntax { hash: true, ..none },
            "php" => CommentSyntax {
                hash: true,
                slashes: true,
                block: true,
                ..none
            },
            "go" | "javascript" => CommentSyntax {
                slashes: true,
                block: true,
                backticks: true,
                ..none
            },
            "java" => CommentSyntax {
                slashes: true,
                block: true,
                ..none
            },
            // natural language and unknown code: no comments, plain quotes
            _ => none,
        }
    }
}

const OPERATORS: &[&str] = &[
    "<<=", ">>=", "===", "!==", "**=", "...", "<=>", "&&=", "||=", "??=", ">>>", "==", "!=", "<=",
    ">=", "&&", "||", "++", "--", "+=", "-=", "*=", "/=", "%=", "&=", "|=", "^=", "<<", ">>", "->",
    "=>", "::", ":=", "**", "//", "??", "?.", "..", "<-",
];

fn is_ident_start(c: char) -> bool {
    c.is_alphabetic() || c == '_' || c == '$' || c == '@'
}

fn is_ident_continue(c: char) -> bool {
    c.is_alphanumeric() || c == '_' || c == '$'
}

/// Splits `src` into lexemes. Comments and non-newline whitespace are
/// dropped; newlines are reported so callers can decide what to do with
/// them.
pub fn lex<'a>(src: &'a str, syntax: CommentSyntax) -> Vec<Lexeme<'a>> {
    let bytes = src.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    let n = src.len();
    let starts = |i: usize, pat: &str| src[i..].starts_with(pat);
    while i < n {
        let c = src[i..].chars().next().expect("in bounds");
        let clen = c.len_utf8();
        if c == '\n' {
            out.push(Lexeme {
                kind: LexemeKind::Newline,
                text: &src[i..i + 1],
                value: "",
            });
            i += 1;
            continue;
        }
        if c.is_whitespace() {
            i += clen;
            continue;
        }
        if (syntax.hash && c == '#') || (syntax.slashes && starts(i, "//")) {
            while i < n && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        if syntax.block && starts(i, "/*") {
            match src[i + 2..].find("*/") {
                Some(end) => i = i + 2 + end + 2,
                None => i = n,
            }
            continue;
        }
        if c == '"' || c == '\'' || (syntax.backticks && c == '`') {
            let (len, value_range) = scan_string(&src[i..], c, syntax.triple_quotes);
            out.push(Lexeme {
                kind: LexemeKind::Str,
                text: &src[i..i + len],
                value: &src[i + value_range.0..i + value_range.1],
            });
            i += len;
            continue;
        }
        let next_is_digit = src[i + clen..].chars().next().is_some_and(|d| d.is_ascii_digit());
        if c.is_ascii_digit() || (c == '.' && next_is_digit) {
            let len = scan_number(&src[i..]);
            out.push(Lexeme {
                kind: LexemeKind::Number,
                text: &src[i..i + len],
                value: &src[i..i + len],
            });
            i += len;
            continue;
        }
        if is_ident_start(c) {
            let mut j = i + clen;
            while let Some(d) = src[j..].chars().next() {
                if !is_ident_continue(d) {
                    break;
                }
                j += d.len_utf8();
            }
            out.push(Lexeme {
                kind: LexemeKind::Ident,
                text: &src[i..j],
                value: &src[i..j],
            });
            i = j;
            continue;
        }
        let len = OPERATORS
            .iter()
            .find(|op| starts(i, op))
            .map_or(clen, |op| op.len());
        out.push(Lexeme {
            kind: LexemeKind::Punct,
            text: &src[i..i + len],
            value: &src[i..i + len],
        });
        i += len;
    }
    out
}

/// Returns the byte length of the literal and the byte range of its
/// contents. Unterminated literals run to the end of the line.
fn scan_string(s: &str, quote: char, triple: bool) -> (usize, (usize, usize)) {
    let q = quote.len_utf8();
    if triple && quote != '`' {
        let delim: &str = if quote == '"' { "\"\"\"" } else { "'''" };
        if s.starts_with(delim) {
            return match s[3..].find(delim) {
                Some(end) => (3 + end + 3, (3, 3 + end)),
                None => (s.len(), (3, s.len())),
            };
        }
    }
    let mut chars = s.char_indices().skip(1);
    while let Some((j, c)) = chars.next() {
        if c == '\\' {
            chars.next();
        } else if c == quote {
            return (j + q, (q, j));
        } else if c == '\n' && quote != '`' {
            return (j, (q, j));
        }
    }
    (s.len(), (q, s.len()))
}

fn scan_number(s: &str) -> usize {
    let b = s.as_bytes();
    let hex = s.starts_with("0x") || s.starts_with("0X");
    let mut j = 0;
    while j < b.len() {
        let c = b[j];
        let exp_sign = !hex && (c == b'+' || c == b'-') && j > 0 && (b[j - 1] == b'e' || b[j - 1] == b'E');
        let fraction = c == b'.' && j + 1 < b.len() && b[j + 1].is_ascii_digit() && !s[..j].contains('.');
        if !(c.is_ascii_alphanumeric() || c == b'_' || exp_sign || fraction) {
            break;
        }
        j += 1;
    }
    j
}
