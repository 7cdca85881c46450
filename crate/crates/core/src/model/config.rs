use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moe::Strategy;

/// Feed-forward slot filling of the expert layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Dense,
    SwitchMoe,
    PlMoe,
    PlMoeNoShared,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::PlMoe,
        Variant::PlMoeNoShared,
        Variant::SwitchMoe,
        Variant::Dense,
    ];

    pub fn strategy(self) -> Option<Strategy> {
        match self {
            Variant::Dense => None,
            Variant::SwitchMoe => Some(Strategy::Switch),
            Variant::PlMoe => Some(Strategy::PlMoe),
            Variant::PlMoeNoShared => Some(Strategy::PlMoeNoShared),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Dense => "dense",
            Variant::SwitchMoe => "switch_moe",
            Variant::PlMoe => "pl_moe",
            Variant::PlMoeNoShared => "pl_moe_no_shared",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::config(alloc::format!("unknown variant `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub l_total: usize,
    pub l_moe: usize,
    pub hidden: usize,
    pub max_seq: usize,
    pub heads: usize,
    pub experts_per_layer: usize,
    pub shared_experts: usize,
    pub top_k: usize,
    pub vocab_size: usize,
    pub ffn_inner_multiplier: usize,
    pub variant: Variant,
    pub dropout: f32,
    pub layer_norm_eps: f32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            l_total: 12,
            l_moe: 4,
            hidden: 768,
            max_seq: 1024,
            heads: 12,
            experts_per_layer: 32,
            shared_experts: 1,
            top_k: 2,
            vocab_size: 50_257,
            ffn_inner_multiplier: 4,
            variant: Variant::PlMoe,
            dropout: 0.1,
            layer_norm_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    /// Two layers with one expert layer on top, eight experts per layer.
    pub fn toy(vocab_size: usize, variant: Variant) -> Self {
        Self {
            l_total: 2,
            l_moe: 1,
            hidden: 64,
            max_seq: 64,
            heads: 4,
            experts_per_layer: 8,
            shared_experts: 1,
            top_k: 2,
            vocab_size,
            variant,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::config(m));
        if self.l_total == 0 || self.hidden == 0 || self.heads == 0 || self.max_seq == 0 {
            return bad("layers, hidden size, heads and max_seq must be positive");
        }
        if self.l_moe > self.l_total {
            return bad("l_moe exceeds l_total");
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return bad("hidden size must be divisible by heads");
        }
        if self.top_k == 0 {
            return bad("top_k must be at least 1");
        }
        if self.experts_per_layer < self.shared_experts {
            return bad("more shared experts than experts");
        }
        if self.variant != Variant::Dense && self.l_moe > 0 && self.experts_per_layer == 0 {
            return bad("expert variant needs experts");
        }
        if self.vocab_size == 0 || self.ffn_inner_multiplier == 0 {
            return bad("vocab_size and ffn_inner_multiplier must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if !(self.layer_norm_eps > 0.0) {
            return bad("layer_norm_eps must be positive");
        }
        Ok(())
    }

    pub fn inner(&self) -> usize {
        self.hidden * self.ffn_inner_multiplier
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    /// Expert layers are the top `l_moe` layers.
    pub fn is_expert_layer(&self, layer: usize) -> bool {
        self.variant != Variant::Dense && layer >= self.l_total - self.l_moe
    }
}
