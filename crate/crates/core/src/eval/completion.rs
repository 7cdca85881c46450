use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::metrics::edit_similarity;
use crate::corpus::{PlId, PAD_ID};
use crate::error::{Error, Result};
use crate::model::{Batch, Binder, ForwardOptions, Model};
use crate::rng::{CounterRng, Purpose};
use crate::tensor::Graph;

/// Ids of the document-initial frame: a language identifier followed by
/// the begin-of-sequence token. Targets inside the frame are not scored.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Frame {
    pub bos: u32,
    pub lead: Vec<u32>,
}

impl Frame {
    /// First scored target position of `doc`.
    pub fn first_scored(&self, doc: &[u32]) -> usize {
        if doc.len() >= 2 && self.lead.contains(&doc[0]) && doc[1] == self.bos {
            2
        } else {
            1
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub pl: String,
    pub accuracy: f64,
    pub edit_similarity: f64,
    pub n_positions: usize,
    /// Mean positional correctness (as a percentage) per document.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub per_example_accuracy: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub per_example_es: Vec<f64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DocScore {
    pub correct: usize,
    pub positions: usize,
    pub es_sum: f64,
}

/// Scores next-token predictions of one document. `preds[i]` is the
/// prediction made at position `i` for target `doc[i + 1]`.
pub fn score_document(
    preds: &[u32],
    doc: &[u32],
    first: usize,
    render: &dyn Fn(u32) -> String,
) -> DocScore {
    let mut s = DocScore::default();
    for i in first.max(1)..doc.len() {
        let target = doc[i];
        if target == PAD_ID {
            continue;
        }
        let p = preds[i - 1];
        s.positions += 1;
        if p == target {
            s.correct += 1;
            s.es_sum += 100.0;
        } else {
            s.es_sum += edit_similarity(&render(p), &render(target));
        }
    }
    s
}

/// Greedy next-token predictions (argmax, lower id on ties) at every
/// position of each document.
pub fn predict_next(model: &Model, docs: &[Vec<u32>], pl: &PlId, chunk: usize) -> Result<Vec<Vec<u32>>> {
    let v = model.config().vocab_size;
    let mut out = Vec::with_capacity(docs.len());
    for group in docs.chunks(chunk.max(1)) {
        let batch = Batch::new(group, vec![pl.clone(); group.len()])?;
        let mut g = Graph::new();
        let mut binder = Binder::new(model.params(), false);
        let mut rng = CounterRng::for_purpose(0, Purpose::Dropout, 0);
        let fwd = model.forward(&mut g, &mut binder, &batch, ForwardOptions::eval(), &mut rng)?;
        let logits = g.data(fwd.logits);
        for (r, doc) in group.iter().enumerate() {
            let preds = (0..doc.len())
                .map(|i| {
                    let row = &logits[(r * batch.t + i) * v..(r * batch.t + i + 1) * v];
                    let mut best = 0;
                    for (j, &x) in row.iter().enumerate() {
                        if x > row[best] {
                            best = j;
                        }
                    }
                    best as u32
                })
                .collect();
            out.push(preds);
        }
    }
    Ok(out)
}

/// Accuracy and edit similarity of greedy next-token prediction over
/// `docs`, excluding padding targets and the document-initial frame.
pub fn token_accuracy(
    model: &Model,
    docs: &[Vec<u32>],
    pl: &PlId,
    frame: &Frame,
    render: &dyn Fn(u32) -> String,
    chunk: usize,
) -> Result<EvalResult> {
    let max = model.config().max_seq;
    let docs: Vec<Vec<u32>> = docs.iter().filter(|d| !d.is_empty()).map(|d| d[..d.len().min(max)].to_vec()).collect();
    let preds = predict_next(model, &docs, pl, chunk)?;
    let mut total = DocScore::default();
    let mut per_acc = Vec::new();
    let mut per_es = Vec::new();
    for (doc, p) in docs.iter().zip(&preds) {
        let s = score_document(p, doc, frame.first_scored(doc), render);
        if s.positions == 0 {
            continue;
        }
        total.correct += s.correct;
        total.positions += s.positions;
        total.es_sum += s.es_sum;
        per_acc.push(100.0 * s.correct as f64 / s.positions as f64);
        per_es.push(s.es_sum / s.positions as f64);
    }
    if total.positions == 0 {
        return Err(Error::Eval(alloc::format!("no evaluable positions for `{pl}`")));
    }
    Ok(EvalResult {
        pl: pl.as_str().into(),
        accuracy: 100.0 * total.correct as f64 / total.positions as f64,
        edit_similarity: total.es_sum / total.positions as f64,
        n_positions: total.positions,
        per_example_accuracy: per_acc,
        per_example_es: per_es,
    })
}

/// Unweighted mean over languages, labelled `Overall`.
pub fn overall(results: &[EvalResult]) -> Option<EvalResult> {
    if results.is_empty() {
        return None;
    }
    let n = results.len() as f64;
    Some(EvalResult {
        pl: "Overall".into(),
        accuracy: results.iter().map(|r| r.accuracy).sum::<f64>() / n,
        edit_similarity: results.iter().map(|r| r.edit_similarity).sum::<f64>() / n,
        n_positions: results.iter().map(|r| r.n_positions).sum(),
        per_example_accuracy: results.iter().flat_map(|r| r.per_example_accuracy.iter().copied()).collect(),
        per_example_es: results.iter().flat_map(|r| r.per_example_es.iter().copied()).collect(),
    })
}

/// One result per language with documents, followed by the overall row.
/// Languages without evaluable positions are returned in the second
/// list instead.
pub fn evaluate_completion(
    model: &Model,
    docs: &BTreeMap<PlId, Vec<Vec<u32>>>,
    frame: &Frame,
    render: &dyn Fn(u32) -> String,
    chunk: usize,
) -> Result<(Vec<EvalResult>, Vec<PlId>)> {
    let mut results = Vec::new();
    let mut skipped = Vec::new();
    for (pl, d) in docs {
        match token_accuracy(model, d, pl, frame, render, chunk) {
            Ok(r) => results.push(r),
            Err(Error::Eval(_)) => skipped.push(pl.clone()),
            Err(e) => return Err(e),
        }
    }
    if let Some(o) = overall(&results) {
        results.push(o);
    }
    Ok((results, skipped))
}
