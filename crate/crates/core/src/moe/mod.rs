//! Expert allocation, gating strategies, routing traces and load
//! statistics.

mod alloc_experts;
mod aux;
mod route;
mod trace;

pub use alloc_experts::{allocate_experts, ExpertAllocation};
pub use aux::{aux_loss_value, load_balance_aux_loss};
pub use route::{
    candidate_gates, pl_moe_route, pl_moe_route_no_shared, select_experts, switch_route,
    ExpertFfn, RouteOutput,
};
pub use trace::{occupancy_report, Occupancy, OccupancyRow, RoutingTrace, TraceCell};

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::corpus::PlId;
use crate::error::{Error, Result};

/// How a token's candidate experts are chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Top-1 over all experts.
    Switch,
    /// Top-k over the language group plus the shared experts.
    PlMoe,
    /// Top-k over the language group only.
    PlMoeNoShared,
}

impl Strategy {
    /// Sorted candidate expert indices for a token of language `pl`.
    pub fn candidates(self, pl: &PlId, alloc: &ExpertAllocation) -> Result<Vec<usize>> {
        match self {
            Strategy::Switch => Ok((0..alloc.total_experts).collect()),
            Strategy::PlMoe | Strategy::PlMoeNoShared => {
                let group = alloc
                    .per_pl
                    .get(pl)
                    .ok_or_else(|| Error::routing(alloc::format!("language `{pl}` has no expert group")))?;
                let mut c = group.clone();
                if self == Strategy::PlMoe {
                    c.extend(&alloc.shared);
                }
                c.sort_unstable();
                if c.is_empty() {
                    return Err(Error::routing(alloc::format!("language `{pl}` has no candidate experts")));
                }
                Ok(c)
            }
        }
    }

    /// Number of experts executed per token.
    pub fn k(self, top_k: usize) -> usize {
        match self {
            Strategy::Switch => 1,
            _ => top_k,
        }
    }
}
