//! CSV and JSON exports consumed by downstream reporting.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use plmoe_core::eval::{EvalResult, TTest};
use plmoe_core::moe::RoutingTrace;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::create;

fn csv_err(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    Error::parse(path, line, e)
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::parse(path, 0, format!("{other:?}")),
    })?;
    r.deserialize().map(|row| row.map_err(|e| csv_err(path, e))).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub split: String,
    pub pl: String,
    pub loss: f64,
    pub lr: f64,
}

/// Append-only metrics CSV, flushed after every write so a crashed run
/// keeps its history.
pub struct MetricsLog {
    path: PathBuf,
    writer: csv::Writer<BufWriter<File>>,
}

impl MetricsLog {
    /// Creates the log, or appends without a header when `append` is set
    /// and the file exists.
    pub fn open(path: &Path, append: bool) -> Result<Self> {
        let writer = if append && path.exists() {
            let f = std::fs::OpenOptions::new()
                .append(true)
                .open(path)
                .map_err(|e| Error::io(path, e))?;
            csv::WriterBuilder::new().has_headers(false).from_writer(BufWriter::new(f))
        } else {
            csv::Writer::from_writer(create(path)?)
        };
        Ok(Self {
            path: path.to_path_buf(),
            writer,
        })
    }

    pub fn write(&mut self, row: &MetricsRow) -> Result<()> {
        self.writer.serialize(row).map_err(|e| csv_err(&self.path, e))?;
        self.writer.flush().map_err(|e| Error::io(&self.path, e))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingRow {
    pub layer: usize,
    pub pl: String,
    pub expert: usize,
    pub count: u64,
    pub row_fraction: f64,
}

/// One row per (layer, language, expert), including zero cells, so every
/// (layer, language) row of fractions sums to one.
pub fn routing_rows(trace: &RoutingTrace) -> Vec<RoutingRow> {
    let mut rows = Vec::new();
    for layer in trace.layers() {
        for pl in trace.pls() {
            let Some(fractions) = trace.row_fractions(layer, &pl) else {
                continue;
            };
            for (expert, (count, f)) in trace.row(layer, &pl).into_iter().zip(fractions).enumerate() {
                rows.push(RoutingRow {
                    layer,
                    pl: pl.to_string(),
                    expert,
                    count,
                    row_fraction: f,
                });
            }
        }
    }
    rows
}

pub fn write_routing(path: &Path, trace: &RoutingTrace) -> Result<()> {
    write_rows(path, &routing_rows(trace))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub variant: String,
    pub pl: String,
    pub accuracy: f64,
    pub edit_similarity: f64,
    pub n_positions: u64,
}

impl ResultRow {
    pub fn new(variant: &str, r: &EvalResult) -> Self {
        Self {
            variant: variant.to_string(),
            pl: r.pl.clone(),
            accuracy: r.accuracy,
            edit_similarity: r.edit_similarity,
            n_positions: r.n_positions as u64,
        }
    }
}

/// Wide table: one row per variant, `<pl>_acc` and `<pl>_es` columns per
/// language in first-seen order, `Overall` last. Missing cells are empty.
pub fn write_comparison(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let mut variants: Vec<&str> = Vec::new();
    let mut pls: Vec<&str> = Vec::new();
    for r in rows {
        if !variants.contains(&r.variant.as_str()) {
            variants.push(&r.variant);
        }
        if r.pl != "Overall" && !pls.contains(&r.pl.as_str()) {
            pls.push(&r.pl);
        }
    }
    pls.push("Overall");
    let mut w = csv::Writer::from_writer(create(path)?);
    let mut header = vec!["model".to_string()];
    for pl in &pls {
        header.push(format!("{pl}_acc"));
        header.push(format!("{pl}_es"));
    }
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for v in variants {
        let mut rec = vec![v.to_string()];
        for pl in &pls {
            match rows.iter().find(|r| r.variant == v && r.pl == *pl) {
                Some(r) => {
                    rec.push(format!("{:.2}", r.accuracy));
                    rec.push(format!("{:.2}", r.edit_similarity));
                }
                None => rec.extend([String::new(), String::new()]),
            }
        }
        w.write_record(&rec).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignificanceRow {
    pub baseline: String,
    pub variant: String,
    pub pl: String,
    pub metric: String,
    pub n: usize,
    pub mean_diff: f64,
    pub t: Option<f64>,
    pub p: Option<f64>,
    pub degenerate: bool,
}

impl SignificanceRow {
    pub fn new(baseline: &str, variant: &str, pl: &str, metric: &str, t: &TTest) -> Self {
        Self {
            baseline: baseline.into(),
            variant: variant.into(),
            pl: pl.into(),
            metric: metric.into(),
            n: t.n,
            mean_diff: t.mean_diff,
            t: t.t,
            p: t.p,
            degenerate: t.degenerate,
        }
    }
}

pub fn write_significance(path: &Path, rows: &[SignificanceRow]) -> Result<()> {
    write_rows(path, rows)
}

/// Checks that routing fractions of every (layer, language) sum to one.
pub fn check_routing_rows(rows: &[RoutingRow]) -> std::result::Result<(), String> {
    let keys: BTreeSet<(usize, &str)> = rows.iter().map(|r| (r.layer, r.pl.as_str())).collect();
    for (layer, pl) in keys {
        let s: f64 = rows
            .iter()
            .filter(|r| r.layer == layer && r.pl == pl)
            .map(|r| r.row_fraction)
            .sum();
        if (s - 1.0).abs() > 1e-6 {
            return Err(format!("layer {layer} / {pl}: fractions sum to {s}"));
        }
    }
    Ok(())
}
