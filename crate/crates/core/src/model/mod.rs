//! Decoder-only transformer with dense, Switch and per-language expert
//! feed-forward slots.
//!
//! Blocks are pre-norm with learned absolute positions and an output
//! projection tied to the token embedding. Expert layers occupy the top
//! `l_moe` layers.

mod config;
mod forward;
mod params;

pub use config::{ModelConfig, Variant};
pub use forward::{lm_targets, Batch, ForwardOptions, ForwardOutput, LayerCompute};
pub use params::{param_specs, Binder, Init, ParamSpec, ParamStore};

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::moe::{ExpertAllocation, ExpertFfn, Strategy};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct FfnIds {
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) enum SlotIds {
    Dense(FfnIds),
    Experts { router: usize, experts: Vec<FfnIds> },
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct LayerIds {
    pub ln1: (usize, usize),
    pub ln2: (usize, usize),
    pub wq: (usize, usize),
    pub wk: (usize, usize),
    pub wv: (usize, usize),
    pub wo: (usize, usize),
    pub slot: SlotIds,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ModelConfig,
    alloc: Option<ExpertAllocation>,
    params: ParamStore,
    layers: Vec<LayerIds>,
    wte: usize,
    wpe: usize,
    ln_f: (usize, usize),
}

impl Model {
    /// Fresh model. Per-language variants require an allocation covering
    /// exactly `experts_per_layer` experts.
    pub fn new(config: ModelConfig, alloc: Option<ExpertAllocation>, seed: u64) -> Result<Self> {
        config.validate()?;
        let store = ParamStore::init(&param_specs(&config), seed);
        Self::from_store(config, alloc, store)
    }

    pub fn from_store(
        config: ModelConfig,
        alloc: Option<ExpertAllocation>,
        params: ParamStore,
    ) -> Result<Self> {
        config.validate()?;
        check_alloc(&config, alloc.as_ref())?;
        let specs = param_specs(&config);
        if specs.len() != params.len()
            || specs
                .iter()
                .zip(params.iter())
                .any(|(s, (n, t))| s.name != n || s.shape != t.shape())
        {
            return Err(Error::config("parameters do not match the model configuration"));
        }
        let id = |n: String| params.id(&n).expect("name from specs");
        let ffn = |p: &str| FfnIds {
            w1: id(alloc::format!("{p}.w1")),
            b1: id(alloc::format!("{p}.b1")),
            w2: id(alloc::format!("{p}.w2")),
            b2: id(alloc::format!("{p}.b2")),
        };
        let mut layers = Vec::with_capacity(config.l_total);
        for l in 0..config.l_total {
            let p = alloc::format!("h.{l}");
            let pair = |a: &str, b: &str| (id(alloc::format!("{p}.{a}")), id(alloc::format!("{p}.{b}")));
            let slot = if config.is_expert_layer(l) {
                SlotIds::Experts {
                    router: id(alloc::format!("{p}.router.w")),
                    experts: (0..config.experts_per_layer)
                        .map(|e| ffn(&alloc::format!("{p}.expert.{e}")))
                        .collect(),
                }
            } else {
                SlotIds::Dense(ffn(&alloc::format!("{p}.ffn")))
            };
            layers.push(LayerIds {
                ln1: pair("ln1.g", "ln1.b"),
                ln2: pair("ln2.g", "ln2.b"),
                wq: pair("attn.wq", "attn.bq"),
                wk: pair("attn.wk", "attn.bk"),
                wv: pair("attn.wv", "attn.bv"),
                wo: pair("attn.wo", "attn.bo"),
                slot,
            });
        }
        Ok(Self {
            wte: id("wte".into()),
            wpe: id("wpe".into()),
            ln_f: (id("ln_f.g".into()), id("ln_f.b".into())),
            config,
            alloc,
            params,
            layers,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn allocation(&self) -> Option<&ExpertAllocation> {
        self.alloc.as_ref()
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn into_params(self) -> ParamStore {
        self.params
    }

    pub fn strategy(&self) -> Option<Strategy> {
        self.config.variant.strategy()
    }

    /// Candidate experts of `pl` in expert layers, or `None` for the
    /// dense variant.
    pub fn candidates(&self, pl: &crate::corpus::PlId) -> Result<Option<Vec<usize>>> {
        match self.strategy() {
            None => Ok(None),
            Some(Strategy::Switch) => Ok(Some((0..self.config.experts_per_layer).collect())),
            Some(s) => {
                let a = self.alloc.as_ref().ok_or_else(|| Error::routing("missing allocation"))?;
                s.candidates(pl, a).map(Some)
            }
        }
    }

    /// Parameter ids belonging to expert `e` of `layer`.
    pub fn expert_param_ids(&self, layer: usize, e: usize) -> Option<[usize; 4]> {
        match &self.layers.get(layer)?.slot {
            SlotIds::Experts { experts, .. } => experts.get(e).map(|f| [f.w1, f.b1, f.w2, f.b2]),
            SlotIds::Dense(_) => None,
        }
    }

    pub fn router_param_id(&self, layer: usize) -> Option<usize> {
        match &self.layers.get(layer)?.slot {
            SlotIds::Experts { router, .. } => Some(*router),
            SlotIds::Dense(_) => None,
        }
    }

    pub fn expert(&self, layer: usize, e: usize) -> Option<ExpertFfn> {
        let [w1, b1, w2, b2] = self.expert_param_ids(layer, e)?;
        let p = &self.params;
        Some(ExpertFfn {
            w1: p.get(w1).clone(),
            b1: p.get(b1).clone(),
            w2: p.get(w2).clone(),
            b2: p.get(b2).clone(),
        })
    }

    pub fn router(&self, layer: usize) -> Option<&Tensor> {
        self.router_param_id(layer).map(|i| self.params.get(i))
    }

    pub fn expert_layers(&self) -> Vec<usize> {
        (0..self.config.l_total)
            .filter(|&l| self.config.is_expert_layer(l))
            .collect()
    }
}

fn check_alloc(config: &ModelConfig, alloc: Option<&ExpertAllocation>) -> Result<()> {
    match (config.variant, alloc) {
        (Variant::PlMoe | Variant::PlMoeNoShared, None) if config.l_moe > 0 => {
            Err(Error::config("per-language expert variants need an expert allocation"))
        }
        (v, Some(a)) if v.strategy().is_some() && config.l_moe > 0 => {
            a.validate()?;
            if a.total_experts != config.experts_per_layer {
                return Err(Error::config(alloc::format!(
                    "allocation covers {} experts, model has {}",
                    a.total_experts,
                    config.experts_per_layer
                )));
            }
            if v == Variant::PlMoe && a.shared.is_empty() {
                return Err(Error::config("pl_moe needs at least one shared expert"));
            }
            Ok(())
        }
        _ => Ok(()),
    }
}
