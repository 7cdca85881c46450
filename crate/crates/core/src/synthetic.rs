//! Probabilistic toy languages for desk-scale experiments.
//!
//! Every language draws from the same statement grammar, identifier pool,
//! operators and digits, but spells its keywords from a pool no other
//! language uses and has its own block syntax (braces, indentation or
//! `end` keywords). Documents are independent draws addressed by
//! `(seed, language, index)`.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::corpus::{PlId, RawDoc};
use crate::error::{Error, Result};
use crate::rng::{CounterRng, Purpose};

const ROLES: [&str; 10] = ["def", "let", "if", "else", "while", "ret", "print", "end", "true", "null"];

pub const IDENTIFIERS: [&str; 16] = [
    "a", "b", "n", "i", "j", "k", "x", "y", "total", "count", "value", "item", "acc", "tmp", "left", "right",
];
const FUNCTIONS: [&str; 8] = ["add", "step", "scale", "merge", "check", "apply", "reduce", "walk"];
const ARITH: [&str; 4] = ["+", "-", "*", "/"];
const CMP: [&str; 4] = ["<", ">", "==", "!="];
const STRINGS: [&str; 6] = ["ok", "done", "error", "utf-8", "value", "none"];

pub const DEFAULT_LANGUAGES: [&str; 6] = ["go", "java", "javascript", "php", "python", "ruby"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Style {
    Braces,
    Indent,
    EndKeyword,
}

fn prefix_and_style(pl: &str, index: usize) -> (String, Style) {
    match pl {
        "go" => ("g".into(), Style::Braces),
        "java" => ("j".into(), Style::Braces),
        "javascript" => ("js".into(), Style::Braces),
        "php" => ("p".into(), Style::Braces),
        "python" => ("py".into(), Style::Indent),
        "ruby" => ("rb".into(), Style::EndKeyword),
        other => {
            let style = [Style::Braces, Style::Indent, Style::EndKeyword][index % 3];
            (alloc::format!("{}{index}", other.chars().next().unwrap_or('q')), style)
        }
    }
}

/// The keyword spellings of one language, indexed like the grammar roles.
pub fn keywords(pl: &str, index: usize) -> Vec<String> {
    let (prefix, _) = prefix_and_style(pl, index);
    ROLES.iter().map(|r| alloc::format!("{prefix}{r}")).collect()
}

/// Generation parameters; serialized into the corpus header.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub languages: Vec<String>,
    pub docs_per_pl: usize,
    /// Size multipliers, e.g. `ruby = 0.1`.
    pub scale: BTreeMap<String, f64>,
    pub seed: u64,
    pub min_statements: usize,
    pub max_statements: usize,
    pub max_depth: usize,
    pub p_branch: f64,
    pub p_loop: f64,
    pub p_string: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            languages: DEFAULT_LANGUAGES.iter().map(|s| s.to_string()).collect(),
            docs_per_pl: 500,
            scale: BTreeMap::new(),
            seed: 0,
            min_statements: 2,
            max_statements: 4,
            max_depth: 2,
            p_branch: 0.2,
            p_loop: 0.15,
            p_string: 0.05,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.languages.is_empty() {
            return Err(Error::config("no synthetic languages"));
        }
        if self.min_statements == 0 || self.min_statements > self.max_statements {
            return Err(Error::config("statement range must satisfy 1 <= min <= max"));
        }
        for (pl, s) in &self.scale {
            if !self.languages.contains(pl) {
                return Err(Error::config(alloc::format!("scaled language `{pl}` is not generated")));
            }
            if !(*s > 0.0 && *s <= 1.0) {
                return Err(Error::config(alloc::format!("scale for `{pl}` must lie in (0, 1]")));
            }
        }
        for p in [self.p_branch, self.p_loop, self.p_string] {
            if !(0.0..=1.0).contains(&p) || self.p_branch + self.p_loop > 1.0 {
                return Err(Error::config("probabilities must lie in [0, 1]"));
            }
        }
        Ok(())
    }

    pub fn doc_count(&self, pl: &str) -> usize {
        let s = self.scale.get(pl).copied().unwrap_or(1.0);
        libm::round(self.docs_per_pl as f64 * s) as usize
    }
}

struct Writer<'a> {
    rng: CounterRng,
    kw: &'a [String],
    style: Style,
    spec: &'a SyntheticSpec,
    out: String,
    defined: Vec<&'static str>,
}

impl Writer<'_> {
    fn pick<T: Copy>(&mut self, xs: &[T]) -> T {
        xs[self.rng.below(xs.len())]
    }

    fn kw(&self, role: usize) -> &str {
        &self.kw[role]
    }

    fn line(&mut self, depth: usize, text: &str) {
        for _ in 0..depth {
            self.out.push_str("    ");
        }
        self.out.push_str(text);
        self.out.push('\n');
    }

    fn term(&self) -> &'static str {
        if self.style == Style::Braces {
            ";"
        } else {
            ""
        }
    }

    fn atom(&mut self) -> String {
        let r = self.rng.uniform_f64();
        if r < self.spec.p_string {
            alloc::format!("\"{}\"", self.pick(&STRINGS))
        } else if r < 0.45 || self.defined.is_empty() {
            let n = if self.rng.uniform() < 0.8 { self.rng.below(10) } else { 10 + self.rng.below(90) };
            n.to_string()
        } else {
            let d = self.defined.clone();
            self.pick(&d).to_string()
        }
    }

    fn expr(&mut self) -> String {
        let mut e = self.atom();
        if self.rng.uniform() < 0.5 {
            let op = self.pick(&ARITH);
            let rhs = self.atom();
            e = alloc::format!("{e} {op} {rhs}");
        }
        e
    }

    fn cond(&mut self) -> String {
        let lhs = if self.defined.is_empty() {
            self.atom()
        } else {
            let d = self.defined.clone();
            self.pick(&d).to_string()
        };
        let op = self.pick(&CMP);
        let rhs = self.expr();
        alloc::format!("{lhs} {op} {rhs}")
    }

    fn open(&mut self, depth: usize, head: String) {
        match self.style {
            Style::Braces => self.line(depth, &alloc::format!("{head} {{")),
            Style::Indent => self.line(depth, &alloc::format!("{head}:")),
            Style::EndKeyword => self.line(depth, &head),
        }
    }

    fn close(&mut self, depth: usize) {
        match self.style {
            Style::Braces => self.line(depth, "}"),
            Style::Indent => {}
            Style::EndKeyword => {
                let e = self.kw(7).to_string();
                self.line(depth, &e)
            }
        }
    }

    fn paren(&self, s: &str) -> String {
        if self.style == Style::Braces {
            alloc::format!("({s})")
        } else {
            s.into()
        }
    }

    fn block(&mut self, depth: usize) {
        let scope = self.defined.len();
        let n = self.spec.min_statements + self.rng.below(self.spec.max_statements - self.spec.min_statements + 1);
        for _ in 0..n {
            self.statement(depth);
        }
        if depth > 1 {
            self.defined.truncate(scope);
        }
    }

    fn statement(&mut self, depth: usize) {
        let r = self.rng.uniform_f64();
        let t = self.term();
        let nested = depth < self.spec.max_depth;
        if nested && r < self.spec.p_branch {
            let c = self.cond();
            let head = alloc::format!("{} {}", self.kw(2), self.paren(&c));
            self.open(depth, head);
            self.block(depth + 1);
            if self.rng.uniform() < 0.4 {
                let e = self.kw(3).to_string();
                match self.style {
                    Style::Braces => self.line(depth, &alloc::format!("}} {e} {{")),
                    Style::Indent => self.line(depth, &alloc::format!("{e}:")),
                    Style::EndKeyword => self.line(depth, &e),
                }
                self.block(depth + 1);
            }
            self.close(depth);
        } else if nested && r < self.spec.p_branch + self.spec.p_loop {
            let v = self.pick(&IDENTIFIERS[..8]);
            if !self.defined.contains(&v) {
                self.line(depth, &alloc::format!("{} {v} = 0{t}", self.kw(1)));
                self.defined.push(v);
            }
            let bound = self.expr();
            let head = alloc::format!("{} {}", self.kw(4), self.paren(&alloc::format!("{v} < {bound}")));
            self.open(depth, head);
            self.block(depth + 1);
            self.line(depth + 1, &alloc::format!("{v} = {v} + 1{t}"));
            self.close(depth);
        } else {
            match self.rng.below(4) {
                0 | 1 => {
                    let v = self.pick(&IDENTIFIERS);
                    let e = self.expr();
                    if self.defined.contains(&v) {
                        let op = self.pick(&ARITH[..2]);
                        self.line(depth, &alloc::format!("{v} = {v} {op} {e}{t}"));
                    } else {
                        self.line(depth, &alloc::format!("{} {v} = {e}{t}", self.kw(1)));
                        self.defined.push(v);
                    }
                }
                2 => {
                    let e = self.expr();
                    self.line(depth, &alloc::format!("{}({e}){t}", self.kw(6)));
                }
                _ => {
                    let v = self.pick(&IDENTIFIERS);
                    let f = self.pick(&FUNCTIONS);
                    let e = self.expr();
                    if self.defined.contains(&v) {
                        self.line(depth, &alloc::format!("{v} = {f}({e}){t}"));
                    } else {
                        self.line(depth, &alloc::format!("{} {v} = {f}({e}){t}", self.kw(1)));
                        self.defined.push(v);
                    }
                }
            }
        }
    }

    fn function(&mut self) {
        let name = self.pick(&FUNCTIONS);
        let arity = 1 + self.rng.below(2);
        let mut params = Vec::new();
        for _ in 0..arity {
            let p = self.pick(&IDENTIFIERS[..8]);
            if !params.contains(&p) {
                params.push(p);
            }
        }
        self.defined = params.clone();
        let head = alloc::format!("{} {name}({})", self.kw(0), params.join(", "));
        self.open(0, head);
        self.block(1);
        let r = if self.rng.uniform() < 0.15 {
            let role = if self.rng.uniform() < 0.5 { 8 } else { 9 };
            self.kw(role).to_string()
        } else {
            let d = self.defined.clone();
            self.pick(&d).to_string()
        };
        let t = self.term();
        self.line(1, &alloc::format!("{} {r}{t}", self.kw(5)));
        self.close(0);
    }
}

fn generate_doc(spec: &SyntheticSpec, pl: &str, pl_index: usize, doc: usize, salt: u64) -> RawDoc {
    let kw = keywords(pl, pl_index);
    let (_, style) = prefix_and_style(pl, pl_index);
    let counter = (salt << 48) ^ ((pl_index as u64) << 32) ^ doc as u64;
    let mut w = Writer {
        rng: CounterRng::for_purpose(spec.seed, Purpose::Synthetic, counter),
        kw: &kw,
        style,
        spec,
        out: String::new(),
        defined: Vec::new(),
    };
    w.function();
    RawDoc {
        pl: PlId::new(pl),
        code: w.out,
        docstring: None,
    }
}

/// All documents described by `spec`, language by language. `salt` selects an
/// independent draw (e.g. `1` for a held-out validation set).
pub fn generate(spec: &SyntheticSpec, salt: u64) -> Result<Vec<RawDoc>> {
    spec.validate()?;
    let mut out = Vec::new();
    for (i, pl) in spec.languages.iter().enumerate() {
        for d in 0..spec.doc_count(pl) {
            out.push(generate_doc(spec, pl, i, d, salt));
        }
    }
    Ok(out)
}
