//! The `plmoe` command line.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use plmoe_core::corpus::{
    check_languages, derive_splits, encode_docs, normalize_splits, train_vocab, build_literal_table, CorpusDoc, PlId,
    Split,
};
use plmoe_core::moe::{allocate_experts, occupancy_report};
use plmoe_core::synthetic::{generate, DEFAULT_LANGUAGES};
use plmoe_core::train::{TrainData, Trainer};
use serde::Serialize;

use crate::checkpoint;
use crate::config::{keys_help, RunConfig};
use crate::error::{Error, Result};
use crate::io;
use crate::pipeline::{self, AblationInputs, Docs, TrainOptions};
use crate::tables;

#[derive(Parser, Debug)]
#[command(name = "plmoe", version, about = "Multi-language sparse-expert code language modeling")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Global {
    /// JSON configuration with flat dotted keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one key, e.g. `--set training.steps=200`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub sets: Vec<String>,
    /// Seed for every random stream; overrides `seed` and per-section seeds.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for evaluation and ablation.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Write the effective configuration to this file and exit.
    #[arg(long, value_name = "FILE", global = true)]
    pub dump_config: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic multi-language corpus of raw documents.
    GenSynthetic(GenSynthetic),
    /// Split, normalize, train the vocabulary and encode raw documents.
    BuildCorpus(BuildCorpus),
    /// Train a BPE vocabulary on the training split of raw documents.
    TrainTokenizer(TrainTokenizer),
    /// Encode raw documents with an existing vocabulary.
    Encode(Encode),
    /// Allocate language-specific and shared experts from data sizes.
    Allocate(Allocate),
    /// Pretrain a model on an encoded corpus.
    Pretrain(Pretrain),
    /// Continue training a checkpoint on a task corpus.
    Finetune(Finetune),
    /// Token-level completion accuracy and edit similarity.
    Evaluate(Evaluate),
    /// Train and evaluate the four model variants on identical data.
    Ablate(Ablate),
    /// Export routing decisions of a checkpoint over a corpus.
    RouteStats(RouteStats),
}

#[derive(Args, Debug)]
pub struct GenSynthetic {
    /// Number of languages (taken from go, java, javascript, php, python, ruby).
    #[arg(long)]
    pub pls: Option<usize>,
    #[arg(long)]
    pub docs_per_pl: Option<usize>,
    /// Downscale one language, e.g. `ruby=0.1`. Repeatable.
    #[arg(long, value_name = "PL=FRACTION")]
    pub low_resource: Vec<String>,
    /// Independent draw index (0 for training data, 1.. for held-out sets).
    #[arg(long, default_value_t = 0)]
    pub draw: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct BuildCorpus {
    /// Raw JSON-lines files.
    #[arg(long, required = true, num_args = 1..)]
    pub input: Vec<PathBuf>,
    /// Output directory for vocab.json, train/dev/test.jsonl and report.json.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainTokenizer {
    #[arg(long, required = true, num_args = 1..)]
    pub input: Vec<PathBuf>,
    /// Output vocabulary file.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct Encode {
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long, required = true, num_args = 1..)]
    pub input: Vec<PathBuf>,
    /// Output directory for train/dev/test.jsonl.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct Allocate {
    /// Encoded training corpus; sizes are windows per language.
    #[arg(long, conflicts_with = "sizes")]
    pub corpus: Option<PathBuf>,
    /// Explicit sizes, e.g. `java=90,ruby=10`.
    #[arg(long)]
    pub sizes: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct Pretrain {
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub dev: Option<PathBuf>,
    #[arg(long)]
    pub vocab: PathBuf,
    /// Explicit expert allocation (JSON); derived from data sizes otherwise.
    #[arg(long)]
    pub allocation: Option<PathBuf>,
    /// Resume from a checkpoint directory holding optimizer state.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Stop after this many completed steps.
    #[arg(long)]
    pub stop_after: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct Finetune {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub dev: Option<PathBuf>,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct Evaluate {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Encoded corpus; only its test split is scored.
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    /// Label for the `variant` column; defaults to the model variant.
    #[arg(long)]
    pub label: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct Ablate {
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub dev: Option<PathBuf>,
    #[arg(long)]
    pub test: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    pub allocation: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct RouteStats {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    /// Routing CSV.
    #[arg(long)]
    pub out: PathBuf,
    /// Optional occupancy JSON for per-language models.
    #[arg(long)]
    pub occupancy: Option<PathBuf>,
}

const SECTIONS: [(&str, &[&str]); 10] = [
    ("gen-synthetic", &["seed", "synthetic"]),
    ("build-corpus", &["seed", "corpus"]),
    ("train-tokenizer", &["seed", "corpus"]),
    ("encode", &["seed", "corpus"]),
    ("allocate", &["model", "allocation"]),
    ("pretrain", &["seed", "model", "training", "allocation", "evaluation"]),
    ("finetune", &["seed", "finetune", "evaluation"]),
    ("evaluate", &["corpus", "evaluation"]),
    ("ablate", &["seed", "corpus", "model", "training", "allocation", "evaluation"]),
    ("route-stats", &["evaluation"]),
];

/// The clap command with each subcommand's configuration keys appended to
/// its help.
pub fn command() -> clap::Command {
    let mut cmd = Cli::command();
    for (name, sections) in SECTIONS {
        cmd = cmd.mut_subcommand(name, |c| c.after_help(keys_help(sections)));
    }
    cmd
}

/// Parses arguments and runs; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match command().try_get_matches_from(args).and_then(|m| Cli::from_arg_matches(&m)) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            log::error!("{e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let g = cli.global;
    let mut cfg = RunConfig::load(g.config.as_deref(), &g.sets)?;
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    cfg.propagate_seed();
    if let Some(p) = &g.dump_config {
        return io::write_bytes(p, cfg.dump().as_bytes());
    }
    let threads = g
        .threads
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    match cli.command {
        Command::GenSynthetic(a) => gen_synthetic(&mut cfg, a),
        Command::BuildCorpus(a) => build_corpus(&cfg, a),
        Command::TrainTokenizer(a) => train_tokenizer(&cfg, a),
        Command::Encode(a) => encode(&cfg, a),
        Command::Allocate(a) => allocate(&cfg, a),
        Command::Pretrain(a) => pretrain(&mut cfg, a),
        Command::Finetune(a) => finetune(&cfg, a),
        Command::Evaluate(a) => evaluate(&cfg, a, threads),
        Command::Ablate(a) => ablate(&mut cfg, a, threads),
        Command::RouteStats(a) => route_stats(&cfg, a),
    }
}

fn parse_pairs(s: &str) -> Result<Vec<(String, String)>> {
    s.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| {
            p.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| Error::config(format!("`{p}` is not of the form name=value")))
        })
        .collect()
}

fn gen_synthetic(cfg: &mut RunConfig, a: GenSynthetic) -> Result<()> {
    let spec = &mut cfg.synthetic;
    if let Some(n) = a.pls {
        if n == 0 {
            return Err(Error::config("--pls must be positive"));
        }
        spec.languages = (0..n)
            .map(|i| DEFAULT_LANGUAGES.get(i).map_or_else(|| format!("pl{i}"), |s| s.to_string()))
            .collect();
    }
    if let Some(d) = a.docs_per_pl {
        spec.docs_per_pl = d;
    }
    for item in &a.low_resource {
        for (pl, f) in parse_pairs(item)? {
            let f: f64 = f.parse().map_err(|_| Error::config(format!("`{f}` is not a fraction")))?;
            spec.scale.insert(pl, f);
        }
    }
    let docs = generate(spec, a.draw)?;
    let header = serde_json::json!({ "generator": "synthetic", "draw": a.draw, "spec": spec });
    io::write_jsonl(&a.out, Some(&header), &docs)?;
    log::info!("wrote {} documents to {}", docs.len(), a.out.display());
    Ok(())
}

#[derive(Serialize)]
struct BuildReport {
    vocab_size: usize,
    merges: usize,
    warning: Option<String>,
    unknown_tokens: usize,
    documents: BTreeMap<String, BTreeMap<String, usize>>,
}

fn write_splits(dir: &Path, docs: &[CorpusDoc]) -> Result<BTreeMap<String, BTreeMap<String, usize>>> {
    let mut counts: BTreeMap<String, BTreeMap<String, usize>> = BTreeMap::new();
    for split in [Split::Train, Split::Dev, Split::Test] {
        let part: Vec<CorpusDoc> = docs.iter().filter(|d| d.split == split).cloned().collect();
        for d in &part {
            *counts
                .entry(split.as_str().to_string())
                .or_default()
                .entry(d.pl.to_string())
                .or_default() += 1;
        }
        io::write_corpus(&dir.join(format!("{}.jsonl", split.as_str())), &part)?;
    }
    Ok(counts)
}

fn build_corpus(cfg: &RunConfig, a: BuildCorpus) -> Result<()> {
    let raw = io::read_raw_inputs(&a.input)?;
    let c = plmoe_core::corpus::build_corpus(&raw, &cfg.corpus.to_core()?, cfg.seed)?;
    if let Some(w) = &c.report.warning {
        log::warn!("{w}");
    }
    io::write_vocab(&a.out.join("vocab.json"), &c.vocab)?;
    let documents = write_splits(&a.out, &c.docs)?;
    io::write_json(
        &a.out.join("report.json"),
        &BuildReport {
            vocab_size: c.vocab.len(),
            merges: c.report.merges,
            warning: c.report.warning.clone(),
            unknown_tokens: c.unknown,
            documents,
        },
    )
}

fn normalized_inputs(cfg: &RunConfig, input: &[PathBuf], table: Option<plmoe_core::corpus::LiteralTable>) -> Result<(plmoe_core::corpus::NormalizedSet, plmoe_core::corpus::LiteralTable)> {
    let cc = cfg.corpus.to_core()?;
    let raw = io::read_raw_inputs(input)?;
    check_languages(&raw, &cc.languages)?;
    let splits = derive_splits(&raw, &cc.split, cfg.seed)?;
    let table = table.unwrap_or_else(|| build_literal_table(&splits.train, cc.string_literals, cc.number_literals));
    Ok((normalize_splits(&splits, &table, &cc)?, table))
}

fn train_tokenizer(cfg: &RunConfig, a: TrainTokenizer) -> Result<()> {
    let (normalized, table) = normalized_inputs(cfg, &a.input, None)?;
    let (vocab, report) = train_vocab(&normalized, &table, &cfg.corpus.to_core()?)?;
    if let Some(w) = &report.warning {
        log::warn!("{w}");
    }
    io::write_vocab(&a.out, &vocab)
}

fn encode(cfg: &RunConfig, a: Encode) -> Result<()> {
    let vocab = io::read_vocab(&a.vocab)?;
    let (normalized, _) = normalized_inputs(cfg, &a.input, Some(vocab.literal_table()))?;
    let (docs, unknown) = encode_docs(&vocab, &normalized, cfg.corpus.max_seq);
    if unknown > 0 {
        log::warn!("{unknown} tokens were not covered by the vocabulary and map to <unk>");
    }
    write_splits(&a.out, &docs).map(|_| ())
}

fn allocate(cfg: &RunConfig, a: Allocate) -> Result<()> {
    let sizes: BTreeMap<PlId, u64> = match (&a.corpus, &a.sizes) {
        (Some(p), _) => pipeline::data_sizes(&io::by_language(&io::read_corpus(p)?, Some(Split::Train))),
        (None, Some(s)) => parse_pairs(s)?
            .into_iter()
            .map(|(k, v)| {
                v.parse()
                    .map(|n| (PlId::new(k), n))
                    .map_err(|_| Error::config(format!("`{v}` is not a size")))
            })
            .collect::<Result<_>>()?,
        (None, None) => return Err(Error::config("allocate needs --corpus or --sizes")),
    };
    let alloc = allocate_experts(
        &sizes,
        cfg.model.experts_per_layer,
        cfg.model.shared_experts,
        cfg.allocation.min_per_pl,
    )?;
    io::write_allocation(&a.out, &alloc)
}

fn load_split(path: &Path, split: Split) -> Result<Docs> {
    let docs = io::read_corpus(path)?;
    let has = docs.iter().any(|d| d.split == split);
    Ok(io::by_language(&docs, has.then_some(split)))
}

fn pretrain(cfg: &mut RunConfig, a: Pretrain) -> Result<()> {
    let vocab = io::read_vocab(&a.vocab)?;
    if cfg.model.vocab_size != vocab.len() {
        log::info!("model.vocab_size set to the vocabulary size {}", vocab.len());
        cfg.model.vocab_size = vocab.len();
    }
    let data = TrainData::new(load_split(&a.train, Split::Train)?)?;
    let valid = match &a.dev {
        Some(p) => load_split(p, Split::Dev)?,
        None => Docs::new(),
    };
    let trainer = match &a.resume {
        Some(dir) => pipeline::resume_trainer(dir, &cfg.training)?,
        None => {
            let explicit = a.allocation.as_deref().map(io::read_allocation).transpose()?;
            pipeline::new_trainer(&cfg.model, &cfg.training, explicit, &data, cfg.allocation.min_per_pl, cfg.seed)?
        }
    };
    let opts = TrainOptions {
        out: Some(a.out.clone()),
        stop_after: a.stop_after,
        eval_micro_batch: cfg.evaluation.micro_batch_size,
        vocab_fingerprint: Some(io::vocab_fingerprint(&vocab)),
        append_log: a.resume.is_some(),
    };
    let s = pipeline::run_training(trainer, &data, &valid, &opts)?;
    log::info!("stopped at step {}; checkpoints in {}", s.trainer.step, a.out.display());
    Ok(())
}

fn finetune(cfg: &RunConfig, a: Finetune) -> Result<()> {
    let ck = checkpoint::load(&a.checkpoint)?;
    let fingerprint = match &a.vocab {
        Some(p) => {
            let fp = io::vocab_fingerprint(&io::read_vocab(p)?);
            if ck.vocab_fingerprint.as_ref().is_some_and(|c| *c != fp) {
                return Err(Error::config("vocabulary differs from the one the checkpoint was trained with"));
            }
            Some(fp)
        }
        None => ck.vocab_fingerprint.clone(),
    };
    let data = TrainData::new(load_split(&a.train, Split::Train)?)?;
    pipeline::check_token_range(&data.per_pl, ck.model.config().vocab_size)?;
    let valid = match &a.dev {
        Some(p) => load_split(p, Split::Dev)?,
        None => Docs::new(),
    };
    let trainer = Trainer::new(ck.model, cfg.finetune.clone(), &data)?;
    let opts = TrainOptions {
        out: Some(a.out.clone()),
        eval_micro_batch: cfg.evaluation.micro_batch_size,
        vocab_fingerprint: fingerprint,
        ..TrainOptions::default()
    };
    pipeline::run_training(trainer, &data, &valid, &opts).map(|_| ())
}

fn checked_vocab(ck: &checkpoint::Checkpoint, path: &Path) -> Result<plmoe_core::corpus::BpeVocab> {
    let vocab = io::read_vocab(path)?;
    if ck
        .vocab_fingerprint
        .as_ref()
        .is_some_and(|fp| *fp != io::vocab_fingerprint(&vocab))
    {
        return Err(Error::config(format!(
            "{} is not the vocabulary the checkpoint was trained with",
            path.display()
        )));
    }
    Ok(vocab)
}

fn evaluate(cfg: &RunConfig, a: Evaluate, threads: usize) -> Result<()> {
    let ck = checkpoint::load(&a.checkpoint)?;
    let vocab = checked_vocab(&ck, &a.vocab)?;
    let docs = load_split(&a.corpus, Split::Test)?;
    let frame = pipeline::frame_for(&vocab, &cfg.corpus.to_core()?.languages)?;
    let (results, _) = pipeline::evaluate(&ck.model, &docs, &vocab, &frame, cfg.evaluation.micro_batch_size, threads)?;
    let label = a.label.unwrap_or_else(|| ck.model.config().variant.as_str().to_string());
    let rows: Vec<tables::ResultRow> = results.iter().map(|r| tables::ResultRow::new(&label, r)).collect();
    io::write_json(&a.out, &rows)
}

#[derive(Serialize)]
struct ValidationRow {
    variant: String,
    pl: String,
    loss: f64,
}

fn ablate(cfg: &mut RunConfig, a: Ablate, threads: usize) -> Result<()> {
    let vocab = io::read_vocab(&a.vocab)?;
    cfg.model.vocab_size = vocab.len();
    let data = TrainData::new(load_split(&a.train, Split::Train)?)?;
    let valid = match &a.dev {
        Some(p) => load_split(p, Split::Dev)?,
        None => Docs::new(),
    };
    let test = load_split(&a.test, Split::Test)?;
    let frame = pipeline::frame_for(&vocab, &cfg.corpus.to_core()?.languages)?;
    let inputs = AblationInputs {
        model: &cfg.model,
        train: &cfg.training,
        min_per_pl: cfg.allocation.min_per_pl,
        explicit: a.allocation.as_deref().map(io::read_allocation).transpose()?,
        data: &data,
        valid: &valid,
        test: &test,
        vocab: &vocab,
        frame: &frame,
        eval_micro_batch: cfg.evaluation.micro_batch_size,
        seed: cfg.seed,
    };
    let runs = pipeline::ablation_run(&inputs, Some(&a.out), threads)?;
    let rows = pipeline::result_rows(&runs);
    io::write_json(&a.out.join("results.json"), &rows)?;
    tables::write_comparison(&a.out.join("comparison.csv"), &rows)?;
    tables::write_significance(&a.out.join("significance.csv"), &pipeline::compare(&runs)?)?;
    let validation: Vec<ValidationRow> = runs
        .iter()
        .flat_map(|r| {
            r.validation.iter().map(|(pl, &loss)| ValidationRow {
                variant: r.variant.as_str().into(),
                pl: pl.to_string(),
                loss,
            })
        })
        .collect();
    let mut w = csv::Writer::from_writer(io::create(&a.out.join("validation.csv"))?);
    for v in &validation {
        w.serialize(v).map_err(|e| Error::Runtime(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(&a.out, e))
}

#[derive(Serialize)]
struct OccupancyFile {
    total_experts: usize,
    mean_fraction: f64,
    rows: Vec<OccupancyEntry>,
}

#[derive(Serialize)]
struct OccupancyEntry {
    pl: String,
    routable: usize,
    fraction: f64,
}

fn route_stats(cfg: &RunConfig, a: RouteStats) -> Result<()> {
    let ck = checkpoint::load(&a.checkpoint)?;
    let docs = io::by_language(&io::read_corpus(&a.corpus)?, None);
    pipeline::check_token_range(&docs, ck.model.config().vocab_size)?;
    let trace = pipeline::route_stats(&ck.model, &docs, cfg.evaluation.micro_batch_size)?;
    tables::write_routing(&a.out, &trace)?;
    if let Some(p) = &a.occupancy {
        let (Some(alloc), Some(strategy)) = (ck.model.allocation(), ck.model.strategy()) else {
            return Err(Error::config("occupancy needs a per-language model"));
        };
        let o = occupancy_report(&trace, alloc, strategy)?;
        io::write_json(
            p,
            &OccupancyFile {
                total_experts: o.total_experts,
                mean_fraction: o.mean_fraction,
                rows: o
                    .rows
                    .iter()
                    .map(|r| OccupancyEntry {
                        pl: r.pl.to_string(),
                        routable: r.routable,
                        fraction: r.fraction,
                    })
                    .collect(),
            },
        )?;
    }
    Ok(())
}
