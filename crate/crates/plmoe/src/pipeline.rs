//! Training, evaluation and analysis workflows over in-memory corpora,
//! with optional file outputs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use plmoe_core::corpus::{BpeVocab, Languages, PlId, BOS};
use plmoe_core::eval::{overall, paired_t_test, token_accuracy, EvalResult, Frame};
use plmoe_core::model::{Batch, Binder, ForwardOptions, Model, ModelConfig, Variant};
use plmoe_core::moe::{allocate_experts, ExpertAllocation, RoutingTrace};
use plmoe_core::rng::{CounterRng, Purpose};
use plmoe_core::tensor::Graph;
use plmoe_core::train::{evaluate_loss, TrainConfig, TrainData, Trainer};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::tables::{MetricsLog, MetricsRow, ResultRow, SignificanceRow};

pub type Docs = BTreeMap<PlId, Vec<Vec<u32>>>;

/// Runs `f` over `items` on up to `threads` scoped threads. Output order
/// follows input order.
pub fn par_map<T: Sync, R: Send>(items: &[T], threads: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let threads = threads.max(1).min(items.len().max(1));
    if threads == 1 {
        return items.iter().map(&f).collect();
    }
    let mut out: Vec<Option<R>> = (0..items.len()).map(|_| None).collect();
    let next = std::sync::atomic::AtomicUsize::new(0);
    let slots = std::sync::Mutex::new(&mut out);
    std::thread::scope(|s| {
        for _ in 0..threads {
            s.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                slots.lock().expect("worker panicked")[i] = Some(r);
            });
        }
    });
    out.into_iter().map(|r| r.expect("every item ran")).collect()
}

pub fn check_token_range(docs: &Docs, vocab_size: usize) -> Result<()> {
    for (pl, seqs) in docs {
        if let Some(&t) = seqs.iter().flatten().find(|&&t| t as usize >= vocab_size) {
            return Err(Error::config(format!(
                "token id {t} in `{pl}` exceeds the model vocabulary of {vocab_size}; corpus and checkpoint use different vocabularies"
            )));
        }
    }
    Ok(())
}

/// Training windows per language.
pub fn data_sizes(docs: &Docs) -> BTreeMap<PlId, u64> {
    docs.iter().map(|(p, d)| (p.clone(), d.len() as u64)).collect()
}

/// The allocation a variant trains with: the explicit one if given,
/// otherwise the size heuristic (without shared experts for the
/// no-shared variant). Dense and switch models take none.
pub fn resolve_allocation(
    model: &ModelConfig,
    explicit: Option<ExpertAllocation>,
    sizes: &BTreeMap<PlId, u64>,
    min_per_pl: usize,
) -> Result<Option<ExpertAllocation>> {
    match model.variant {
        Variant::Dense | Variant::SwitchMoe => Ok(None),
        _ if explicit.is_some() => Ok(explicit),
        Variant::PlMoe => Ok(Some(allocate_experts(sizes, model.experts_per_layer, model.shared_experts, min_per_pl)?)),
        Variant::PlMoeNoShared => Ok(Some(allocate_experts(sizes, model.experts_per_layer, 0, min_per_pl)?)),
    }
}

pub struct TrainOptions {
    /// Directory for metrics.csv and the best/last/final checkpoints.
    pub out: Option<PathBuf>,
    /// Stop (and write the final checkpoint) once this many steps are done.
    pub stop_after: Option<u64>,
    pub eval_micro_batch: usize,
    pub vocab_fingerprint: Option<String>,
    /// Append to an existing metrics log (resumed runs).
    pub append_log: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            out: None,
            stop_after: None,
            eval_micro_batch: 8,
            vocab_fingerprint: None,
            append_log: false,
        }
    }
}

pub struct TrainSummary {
    pub trainer: Trainer,
    /// Validation losses per language at each evaluation point.
    pub history: Vec<(u64, BTreeMap<PlId, f64>)>,
}

impl TrainSummary {
    pub fn last_validation(&self) -> Option<&BTreeMap<PlId, f64>> {
        self.history.last().map(|(_, l)| l)
    }
}

fn mean(losses: &BTreeMap<PlId, f64>) -> f64 {
    losses.values().sum::<f64>() / losses.len().max(1) as f64
}

/// The optimizer loop with periodic validation. Every evaluation point
/// refreshes `last/` (resumable); the best mean validation loss is kept in
/// `best/`; `final/` is written when the loop ends. A non-finite loss
/// aborts the run, leaving `last/` as the last good checkpoint.
pub fn run_training(mut trainer: Trainer, data: &TrainData, valid: &Docs, opts: &TrainOptions) -> Result<TrainSummary> {
    let mut log = match &opts.out {
        Some(dir) => Some(MetricsLog::open(&dir.join("metrics.csv"), opts.append_log)?),
        None => None,
    };
    let fp = opts.vocab_fingerprint.as_deref();
    let mut history = Vec::new();
    let mut best_mean = trainer
        .best
        .values()
        .map(|&(_, l)| l)
        .sum::<f64>()
        / trainer.best.len().max(1) as f64;
    if trainer.best.is_empty() {
        best_mean = f64::INFINITY;
    }
    let mut last_good: Option<u64> = None;
    let mut validate = |trainer: &mut Trainer, log: &mut Option<MetricsLog>, lr: f64| -> Result<()> {
        if valid.is_empty() {
            return Ok(());
        }
        let losses = evaluate_loss(&trainer.model, valid, opts.eval_micro_batch)?;
        if let Some(log) = log.as_mut() {
            for (pl, &loss) in &losses {
                log.write(&MetricsRow {
                    step: trainer.step,
                    split: "dev".into(),
                    pl: pl.to_string(),
                    loss,
                    lr,
                })?;
            }
        }
        trainer.record_validation(&losses);
        let m = mean(&losses);
        if let Some(dir) = &opts.out {
            if m < best_mean {
                checkpoint::save(&dir.join("best"), &trainer.model, fp, None)?;
            }
            let state = trainer.state();
            checkpoint::save(&dir.join("last"), &trainer.model, fp, Some((&state, &trainer.config, &trainer.adam)))?;
        }
        best_mean = best_mean.min(m);
        history.push((trainer.step, losses));
        Ok(())
    };
    if trainer.step == 0 {
        validate(&mut trainer, &mut log, 0.0)?;
        last_good = Some(0);
    }
    let interval = trainer.config.eval_interval;
    while !trainer.is_done() && opts.stop_after.is_none_or(|s| trainer.step < s) {
        let report = match trainer.train_step(data) {
            Ok(r) => r,
            Err(e @ (plmoe_core::Error::Diverged { .. } | plmoe_core::Error::NonFiniteGradient(_))) => {
                let hint = match (&opts.out, last_good) {
                    (Some(dir), Some(step)) => format!("last good checkpoint: {} (step {step})", dir.join("last").display()),
                    _ => "no checkpoint was written".to_string(),
                };
                return Err(Error::Runtime(format!("{e}; {hint}")));
            }
            Err(e) => return Err(e.into()),
        };
        if let Some(log) = log.as_mut() {
            log.write(&MetricsRow {
                step: report.step,
                split: "train".into(),
                pl: "all".into(),
                loss: report.loss as f64,
                lr: report.lr as f64,
            })?;
        }
        if report.step % interval == 0 || trainer.is_done() {
            validate(&mut trainer, &mut log, report.lr as f64)?;
            last_good = Some(report.step);
        }
    }
    if let Some(dir) = &opts.out {
        let state = trainer.state();
        checkpoint::save(&dir.join("final"), &trainer.model, fp, Some((&state, &trainer.config, &trainer.adam)))?;
    }
    Ok(TrainSummary { trainer, history })
}

/// Fresh model plus trainer for `config`, with the allocation resolved
/// from the training data.
pub fn new_trainer(
    model: &ModelConfig,
    train: &TrainConfig,
    explicit: Option<ExpertAllocation>,
    data: &TrainData,
    min_per_pl: usize,
    seed: u64,
) -> Result<Trainer> {
    let alloc = resolve_allocation(model, explicit, &data_sizes(&data.per_pl), min_per_pl)?;
    let m = Model::new(model.clone(), alloc, seed)?;
    check_token_range(&data.per_pl, model.vocab_size)?;
    Ok(Trainer::new(m, train.clone(), data)?)
}

/// Resumes from a checkpoint written with optimizer state. The stored
/// training configuration must equal `train`.
pub fn resume_trainer(dir: &Path, train: &TrainConfig) -> Result<Trainer> {
    let ck = checkpoint::load(dir)?;
    let (ts, adam) = ck
        .train
        .ok_or_else(|| Error::config(format!("{} holds no optimizer state", dir.display())))?;
    if &ts.config != train {
        return Err(Error::config("training configuration differs from the resumed checkpoint"));
    }
    Ok(Trainer::resume(ck.model, ts.config, ts.state, adam)?)
}

/// The evaluation frame: `<s>` preceded by any configured language token.
pub fn frame_for(vocab: &BpeVocab, langs: &Languages) -> Result<Frame> {
    let bos = vocab
        .special_id(BOS)
        .ok_or_else(|| Error::config("vocabulary has no <s> token"))?;
    let lead = langs.tokens().iter().filter_map(|t| vocab.special_id(t)).collect();
    Ok(Frame { bos, lead })
}

/// Per-language completion results (in language order) plus the overall
/// row, and the languages skipped for lack of evaluable positions.
pub fn evaluate(
    model: &Model,
    docs: &Docs,
    vocab: &BpeVocab,
    frame: &Frame,
    chunk: usize,
    threads: usize,
) -> Result<(Vec<EvalResult>, Vec<PlId>)> {
    if vocab.len() != model.config().vocab_size {
        return Err(Error::config(format!(
            "vocabulary has {} entries but the checkpoint expects {}",
            vocab.len(),
            model.config().vocab_size
        )));
    }
    check_token_range(docs, model.config().vocab_size)?;
    let items: Vec<(&PlId, &Vec<Vec<u32>>)> = docs.iter().collect();
    let render = |id: u32| vocab.render(id);
    let outcomes = par_map(&items, threads, |(pl, d)| token_accuracy(model, d, pl, frame, &render, chunk));
    let mut results = Vec::new();
    let mut skipped = Vec::new();
    for ((pl, _), r) in items.iter().zip(outcomes) {
        match r {
            Ok(r) => results.push(r),
            Err(plmoe_core::Error::Eval(_)) => {
                log::warn!("no evaluable positions for `{pl}`; omitted");
                skipped.push((*pl).clone());
            }
            Err(e) => return Err(e.into()),
        }
    }
    if let Some(o) = overall(&results) {
        results.push(o);
    }
    Ok((results, skipped))
}

/// Routing counts of an inference pass over `docs`.
pub fn route_stats(model: &Model, docs: &Docs, chunk: usize) -> Result<RoutingTrace> {
    let mut trace = RoutingTrace::new(model.config().experts_per_layer);
    let max = model.config().max_seq;
    for (pl, seqs) in docs {
        let seqs: Vec<Vec<u32>> = seqs.iter().filter(|s| !s.is_empty()).map(|s| s[..s.len().min(max)].to_vec()).collect();
        for group in seqs.chunks(chunk.max(1)) {
            let batch = Batch::new(group, vec![pl.clone(); group.len()])?;
            let mut g = Graph::new();
            let mut binder = Binder::new(model.params(), false);
            let mut rng = CounterRng::for_purpose(0, Purpose::Dropout, 0);
            let out = model.forward(&mut g, &mut binder, &batch, ForwardOptions::eval(), &mut rng)?;
            trace.merge(&out.trace);
        }
    }
    Ok(trace)
}

/// FNV-1a over language names and token ids.
pub fn data_hash(docs: &Docs) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |b: u8| {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    };
    for (pl, seqs) in docs {
        pl.as_str().bytes().for_each(&mut eat);
        eat(0xff);
        for s in seqs {
            for t in s {
                t.to_le_bytes().into_iter().for_each(&mut eat);
            }
            eat(0xfe);
        }
    }
    h
}

/// Ablation order: the full model first, then each removal.
pub const ABLATION: [Variant; 4] = [Variant::PlMoe, Variant::PlMoeNoShared, Variant::SwitchMoe, Variant::Dense];

#[derive(Clone, Debug)]
pub struct VariantRun {
    pub variant: Variant,
    pub seed: u64,
    pub data_hash: u64,
    pub validation: BTreeMap<PlId, f64>,
    pub results: Vec<EvalResult>,
}

pub struct AblationInputs<'a> {
    pub model: &'a ModelConfig,
    pub train: &'a TrainConfig,
    pub min_per_pl: usize,
    pub explicit: Option<ExpertAllocation>,
    pub data: &'a TrainData,
    pub valid: &'a Docs,
    pub test: &'a Docs,
    pub vocab: &'a BpeVocab,
    pub frame: &'a Frame,
    pub eval_micro_batch: usize,
    pub seed: u64,
}

/// Trains and evaluates the four variants on identical data and seeds.
/// Each variant writes its run into `<out>/<variant>/` when `out` is set.
pub fn ablation_run(inputs: &AblationInputs<'_>, out: Option<&Path>, threads: usize) -> Result<Vec<VariantRun>> {
    let hash = data_hash(&inputs.data.per_pl);
    let runs = par_map(&ABLATION, threads, |&variant| -> Result<VariantRun> {
        let model = ModelConfig {
            variant,
            ..inputs.model.clone()
        };
        let trainer = new_trainer(&model, inputs.train, inputs.explicit.clone(), inputs.data, inputs.min_per_pl, inputs.seed)?;
        let opts = TrainOptions {
            out: out.map(|d| d.join(variant.as_str())),
            eval_micro_batch: inputs.eval_micro_batch,
            vocab_fingerprint: Some(crate::io::vocab_fingerprint(inputs.vocab)),
            ..TrainOptions::default()
        };
        let summary = run_training(trainer, inputs.data, inputs.valid, &opts)?;
        let (results, _) = evaluate(&summary.trainer.model, inputs.test, inputs.vocab, inputs.frame, inputs.eval_micro_batch, 1)?;
        Ok(VariantRun {
            variant,
            seed: inputs.seed,
            data_hash: hash,
            validation: summary.last_validation().cloned().unwrap_or_default(),
            results,
        })
    });
    runs.into_iter().collect()
}

/// Paired t-tests of every run against the first, per language and
/// metric. Refuses runs that differ in seed or training data, since their
/// examples are not paired.
pub fn compare(runs: &[VariantRun]) -> Result<Vec<SignificanceRow>> {
    let Some(base) = runs.first() else {
        return Ok(Vec::new());
    };
    for r in runs {
        if r.seed != base.seed || r.data_hash != base.data_hash {
            return Err(Error::config(format!(
                "`{}` was trained with a different seed or data than `{}`; paired tests are invalid",
                r.variant.as_str(),
                base.variant.as_str()
            )));
        }
    }
    let mut rows = Vec::new();
    for r in &runs[1..] {
        for a in &base.results {
            let Some(b) = r.results.iter().find(|b| b.pl == a.pl) else {
                continue;
            };
            for (metric, xa, xb) in [
                ("accuracy", &a.per_example_accuracy, &b.per_example_accuracy),
                ("edit_similarity", &a.per_example_es, &b.per_example_es),
            ] {
                if let Ok(t) = paired_t_test(xa, xb) {
                    rows.push(SignificanceRow::new(base.variant.as_str(), r.variant.as_str(), &a.pl, metric, &t));
                }
            }
        }
    }
    Ok(rows)
}

pub fn result_rows(runs: &[VariantRun]) -> Vec<ResultRow> {
    runs.iter()
        .flat_map(|r| r.results.iter().map(move |e| ResultRow::new(r.variant.as_str(), e)))
        .collect()
}
