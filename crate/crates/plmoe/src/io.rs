//! JSON-lines and JSON file formats.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use plmoe_core::corpus::{BpeVocab, CorpusDoc, PlId, RawDoc, Split, VocabFile};
use plmoe_core::moe::ExpertAllocation;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

pub fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut w = create(path)?;
    w.write_all(bytes).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path, e.line(), e))
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Runtime(e.to_string()))?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

/// One JSON object per non-blank line. Lines whose object carries a
/// `header` key are returned separately.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<(Option<serde_json::Value>, Vec<T>)> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut header = None;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(&line).map_err(|e| Error::parse(path, i + 1, e))?;
        if let Some(h) = value.get("header") {
            if i == 0 {
                header = Some(h.clone());
                continue;
            }
            return Err(Error::parse(path, i + 1, "header must be the first line"));
        }
        out.push(serde_json::from_value(value).map_err(|e| Error::parse(path, i + 1, e))?);
    }
    Ok((header, out))
}

pub fn write_jsonl<T: Serialize>(path: &Path, header: Option<&serde_json::Value>, items: &[T]) -> Result<()> {
    let mut w = create(path)?;
    let mut put = |v: String| writeln!(w, "{v}").map_err(|e| Error::io(path, e));
    if let Some(h) = header {
        put(serde_json::json!({ "header": h }).to_string())?;
    }
    for item in items {
        put(serde_json::to_string(item).map_err(|e| Error::Runtime(e.to_string()))?)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_raw_docs(path: &Path) -> Result<(Option<serde_json::Value>, Vec<RawDoc>)> {
    read_jsonl(path)
}

/// Reads raw documents from several files, concatenated in argument order.
pub fn read_raw_inputs(paths: &[std::path::PathBuf]) -> Result<Vec<RawDoc>> {
    let mut docs = Vec::new();
    for p in paths {
        docs.extend(read_raw_docs(p)?.1);
    }
    Ok(docs)
}

pub fn read_corpus(path: &Path) -> Result<Vec<CorpusDoc>> {
    Ok(read_jsonl(path)?.1)
}

pub fn write_corpus(path: &Path, docs: &[CorpusDoc]) -> Result<()> {
    write_jsonl(path, None, docs)
}

/// Token sequences grouped by language, optionally restricted to a split.
pub fn by_language(docs: &[CorpusDoc], split: Option<Split>) -> BTreeMap<PlId, Vec<Vec<u32>>> {
    let mut out: BTreeMap<PlId, Vec<Vec<u32>>> = BTreeMap::new();
    for d in docs.iter().filter(|d| split.is_none_or(|s| d.split == s)) {
        out.entry(d.pl.clone()).or_default().push(d.tokens.clone());
    }
    out
}

pub fn read_vocab(path: &Path) -> Result<BpeVocab> {
    let file: VocabFile = read_json(path)?;
    Ok(BpeVocab::from_file(file)?)
}

pub fn write_vocab(path: &Path, vocab: &BpeVocab) -> Result<()> {
    write_json(path, vocab.file())
}

pub fn read_allocation(path: &Path) -> Result<ExpertAllocation> {
    let a: ExpertAllocation = read_json(path)?;
    a.validate()?;
    Ok(a)
}

pub fn write_allocation(path: &Path, alloc: &ExpertAllocation) -> Result<()> {
    write_json(path, alloc)
}

/// FNV-1a over the serialized vocabulary; stored with checkpoints to detect
/// evaluation against a different vocabulary.
pub fn vocab_fingerprint(vocab: &BpeVocab) -> String {
    let bytes = serde_json::to_vec(vocab.file()).expect("vocab serializes");
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{h:016x}")
}
