//! Trained-model criteria on generated corpora: resume determinism and
//! the two directional comparisons.

use std::collections::BTreeMap;

use plmoe::checkpoint;
use plmoe::pipeline::{new_trainer, resume_trainer, Docs};
use plmoe_core::corpus::{build_corpus, encode_docs, normalize, CorpusConfig, NormalizeOptions, PlId, Split};
use plmoe_core::model::{ModelConfig, Variant};
use plmoe_core::synthetic::{generate, SyntheticSpec};
use plmoe_core::train::{evaluate_loss, TrainConfig, TrainData};

pub type Res<T> = Result<T, Box<dyn std::error::Error + Send + Sync>>;

#[derive(Clone, Debug)]
pub struct Protocol {
    pub docs_per_pl: usize,
    pub valid_docs_per_pl: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    pub steps: u64,
    pub warmup_steps: u64,
    pub peak_lr: f32,
    pub batch_size: usize,
}

impl Default for Protocol {
    fn default() -> Self {
        Self {
            docs_per_pl: 500,
            valid_docs_per_pl: 100,
            vocab_size: 256,
            max_seq: 64,
            steps: 2000,
            warmup_steps: 100,
            peak_lr: 1e-3,
            batch_size: 4,
        }
    }
}

pub struct Corpus {
    pub train: Docs,
    pub valid: Docs,
    pub vocab_size: usize,
}

fn group(docs: impl IntoIterator<Item = (PlId, Vec<u32>)>) -> Docs {
    let mut out = Docs::new();
    for (pl, t) in docs {
        out.entry(pl).or_default().push(t);
    }
    out
}

/// Training split of a generated corpus, plus a held-out validation set
/// from an independent generator draw encoded with the same vocabulary.
pub fn corpus(seed: u64, scale: &[(&str, f64)], p: &Protocol) -> Res<Corpus> {
    let spec = SyntheticSpec {
        docs_per_pl: p.docs_per_pl,
        scale: scale.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        seed,
        ..SyntheticSpec::default()
    };
    let config = CorpusConfig {
        vocab_size: p.vocab_size,
        max_seq: p.max_seq,
        ..CorpusConfig::default()
    };
    let built = build_corpus(&generate(&spec, 0)?, &config, seed)?;
    let train = group(built.docs.into_iter().filter(|d| d.split == Split::Train).map(|d| (d.pl, d.tokens)));
    let held = SyntheticSpec {
        docs_per_pl: p.valid_docs_per_pl,
        scale: BTreeMap::new(),
        ..spec
    };
    let table = built.vocab.literal_table();
    let normalized = generate(&held, 1)?
        .iter()
        .map(|d| Ok((Split::Dev, normalize(&d.code, &d.pl, &table, &NormalizeOptions::default())?)))
        .collect::<Res<Vec<_>>>()?;
    let (valid, _) = encode_docs(&built.vocab, &normalized, p.max_seq);
    Ok(Corpus {
        train,
        valid: group(valid.into_iter().map(|d| (d.pl, d.tokens))),
        vocab_size: built.vocab.len(),
    })
}

fn train_config(p: &Protocol, seed: u64, steps: u64) -> TrainConfig {
    TrainConfig {
        steps,
        warmup_steps: p.warmup_steps,
        peak_lr: p.peak_lr,
        batch_size: p.batch_size,
        micro_batch_size: p.batch_size,
        eval_interval: steps.max(1),
        seed,
        ..TrainConfig::default()
    }
}

/// Trains `variant` at the toy configuration (on `only` alone when given)
/// and returns the final validation loss per language.
pub fn train_and_validate(c: &Corpus, variant: Variant, only: Option<&str>, seed: u64, p: &Protocol) -> Res<BTreeMap<PlId, f64>> {
    let keep = |d: &Docs| -> Docs {
        d.iter()
            .filter(|(pl, _)| only.is_none_or(|o| pl.as_str() == o))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    };
    let data = TrainData::new(keep(&c.train))?;
    let model = ModelConfig::toy(c.vocab_size, variant);
    let mut t = new_trainer(&model, &train_config(p, seed, p.steps), None, &data, 1, seed)?;
    while !t.is_done() {
        t.train_step(&data)?;
    }
    Ok(evaluate_loss(&t.model, &keep(&c.valid), 16)?)
}

/// Parameters after `steps` uninterrupted steps, and after stopping at
/// `steps / 2`, writing a checkpoint, and resuming from it.
pub fn resume_determinism(c: &Corpus, steps: u64, p: &Protocol) -> Res<(Vec<u8>, Vec<u8>)> {
    let data = TrainData::new(c.train.clone())?;
    let model = ModelConfig::toy(c.vocab_size, Variant::PlMoe);
    let tc = train_config(p, 7, steps);
    let mut full = new_trainer(&model, &tc, None, &data, 1, 7)?;
    while !full.is_done() {
        full.train_step(&data)?;
    }
    let mut part = new_trainer(&model, &tc, None, &data, 1, 7)?;
    while part.step < steps / 2 {
        part.train_step(&data)?;
    }
    let dir = tempfile::tempdir()?;
    let state = part.state();
    checkpoint::save(dir.path(), &part.model, None, Some((&state, &part.config, &part.adam)))?;
    drop(part);
    let mut resumed = resume_trainer(dir.path(), &tc)?;
    while !resumed.is_done() {
        resumed.train_step(&data)?;
    }
    Ok((checkpoint::param_bytes(&full.model), checkpoint::param_bytes(&resumed.model)))
}

pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        (s[n / 2 - 1] + s[n / 2]) / 2.0
    }
}

pub fn mean_loss(losses: &BTreeMap<PlId, f64>) -> f64 {
    losses.values().sum::<f64>() / losses.len() as f64
}
