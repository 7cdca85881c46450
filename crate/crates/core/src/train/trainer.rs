use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::{adam_step, clip_grad_norm, lr_at, AdamState, LanguageScheduler, TrainConfig, TrainData};
use crate::corpus::{PlId, PAD_ID};
use crate::error::{Error, Result};
use crate::model::{lm_targets, Batch, Binder, ForwardOptions, Model};
use crate::rng::{CounterRng, Purpose};
use crate::tensor::Graph;

#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    /// Number of completed optimizer steps after this one.
    pub step: u64,
    pub lr: f32,
    /// Mean LM loss plus auxiliary loss over micro-batches.
    pub loss: f32,
    pub lm_loss: f32,
    pub grad_norm: f64,
    pub pls: Vec<PlId>,
}

/// Everything besides parameters and Adam moments needed to resume.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainerState {
    pub step: u64,
    pub seed: u64,
    pub scheduler: LanguageScheduler,
    pub adam_steps: Vec<u64>,
    pub best: BTreeMap<PlId, (u64, f64)>,
}

/// Optimizer loop over single-language micro-batches. Batch sampling and
/// dropout draw from streams addressed by `(seed, step)`, so a resumed
/// run replays the uninterrupted one exactly.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Model,
    pub config: TrainConfig,
    pub adam: AdamState,
    pub step: u64,
    pub scheduler: LanguageScheduler,
    pub best: BTreeMap<PlId, (u64, f64)>,
}

impl Trainer {
    pub fn new(model: Model, config: TrainConfig, data: &TrainData) -> Result<Self> {
        config.validate()?;
        for pl in data.pls() {
            model.candidates(pl)?;
        }
        Ok(Self {
            adam: AdamState::new(model.params().len()),
            scheduler: LanguageScheduler::new(data),
            model,
            config,
            step: 0,
            best: BTreeMap::new(),
        })
    }

    pub fn resume(model: Model, config: TrainConfig, state: TrainerState, mut adam: AdamState) -> Result<Self> {
        config.validate()?;
        if state.seed != config.seed {
            return Err(Error::config("resumed seed differs from the configuration"));
        }
        let n = model.params().len();
        if adam.m.len() != n || adam.v.len() != n || state.adam_steps.len() != n {
            return Err(Error::config("optimizer state does not match the model"));
        }
        adam.steps = state.adam_steps;
        Ok(Self {
            model,
            config,
            adam,
            step: state.step,
            scheduler: state.scheduler,
            best: state.best,
        })
    }

    pub fn state(&self) -> TrainerState {
        TrainerState {
            step: self.step,
            seed: self.config.seed,
            scheduler: self.scheduler.clone(),
            adam_steps: self.adam.steps.clone(),
            best: self.best.clone(),
        }
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.config.steps
    }

    fn micro_batch(&self, data: &TrainData, pl: &PlId, rng: &mut CounterRng) -> Result<Batch> {
        let docs = &data.per_pl[pl];
        let max = self.model.config().max_seq;
        let seqs: Vec<Vec<u32>> = (0..self.config.micro_batch_size)
            .map(|_| {
                let d = &docs[rng.below(docs.len())];
                d[..d.len().min(max)].to_vec()
            })
            .collect();
        Batch::new(&seqs, vec![pl.clone(); seqs.len()])
    }

    pub fn train_step(&mut self, data: &TrainData) -> Result<StepReport> {
        let c = &self.config;
        let m = c.micro_batches();
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.model.params().len()];
        let (mut loss_sum, mut lm_sum) = (0.0f64, 0.0f64);
        let mut pls = Vec::with_capacity(m);
        let opts = ForwardOptions {
            train: true,
            aux_alpha: c.aux_loss_alpha,
        };
        for micro in 0..m {
            let counter = self.step * m as u64 + micro as u64;
            let pl = self.scheduler.next_pl();
            let mut brng = CounterRng::for_purpose(c.seed, Purpose::Batch, counter);
            let batch = self.micro_batch(data, &pl, &mut brng)?;
            let mut drng = CounterRng::for_purpose(c.seed, Purpose::Dropout, counter);
            let mut g = Graph::new();
            let mut binder = Binder::new(self.model.params(), true);
            let out = self.model.forward(&mut g, &mut binder, &batch, opts, &mut drng)?;
            let (total, lm) = self.model.lm_loss(&mut g, &out, &batch)?;
            let (tv, lv) = (g.data(total)[0], g.data(lm)[0]);
            if !tv.is_finite() {
                return Err(Error::Diverged {
                    step: self.step,
                    loss: tv,
                });
            }
            loss_sum += tv as f64;
            lm_sum += lv as f64;
            g.backward(total)?;
            binder.accumulate(&mut g, &mut grads);
            pls.push(pl);
        }
        let inv = 1.0 / m as f32;
        for gr in grads.iter_mut().flatten() {
            gr.iter_mut().for_each(|x| *x *= inv);
        }
        let grad_norm = clip_grad_norm(&mut grads, c.grad_clip);
        let lr = lr_at(self.step, c);
        adam_step(self.model.params_mut(), &grads, &mut self.adam, lr, &self.config)?;
        self.step += 1;
        Ok(StepReport {
            step: self.step,
            lr,
            loss: (loss_sum / m as f64) as f32,
            lm_loss: (lm_sum / m as f64) as f32,
            grad_norm,
            pls,
        })
    }

    /// Records per-language validation losses, keeping the best per
    /// language. Returns the languages that improved.
    pub fn record_validation(&mut self, losses: &BTreeMap<PlId, f64>) -> Vec<PlId> {
        let mut improved = Vec::new();
        for (pl, &l) in losses {
            let better = self.best.get(pl).is_none_or(|&(_, b)| l < b);
            if better {
                self.best.insert(pl.clone(), (self.step, l));
                improved.push(pl.clone());
            }
        }
        improved
    }
}

/// Token-weighted mean next-token NLL per language, without dropout or
/// auxiliary loss. Languages without any target position are omitted.
pub fn evaluate_loss(
    model: &Model,
    docs: &BTreeMap<PlId, Vec<Vec<u32>>>,
    micro_batch_size: usize,
) -> Result<BTreeMap<PlId, f64>> {
    let max = model.config().max_seq;
    let mut out = BTreeMap::new();
    for (pl, seqs) in docs {
        let seqs: Vec<Vec<u32>> = seqs
            .iter()
            .filter(|s| s.len() >= 2)
            .map(|s| s[..s.len().min(max)].to_vec())
            .collect();
        let (mut nll, mut count) = (0.0f64, 0usize);
        for chunk in seqs.chunks(micro_batch_size.max(1)) {
            let batch = Batch::new(chunk, vec![pl.clone(); chunk.len()])?;
            let n = lm_targets(&batch).iter().filter(|&&t| t != PAD_ID as usize).count();
            let mut g = Graph::new();
            let mut binder = Binder::new(model.params(), false);
            let mut rng = CounterRng::for_purpose(0, Purpose::Dropout, 0);
            let fwd = model.forward(&mut g, &mut binder, &batch, ForwardOptions::eval(), &mut rng)?;
            let (_, lm) = model.lm_loss(&mut g, &fwd, &batch)?;
            nll += g.data(lm)[0] as f64 * n as f64;
            count += n;
        }
        if count > 0 {
            out.insert(pl.clone(), nll / count as f64);
        }
    }
    Ok(out)
}
