use alloc::vec;
use alloc::vec::Vec;

use super::{ExpertAllocation, Strategy};
use crate::corpus::PlId;
use crate::error::{Error, Result};
use crate::tensor::{kernels, top_k, Tensor};

/// Standalone two-layer feed-forward expert: `gelu(x·w1 + b1)·w2 + b2`.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpertFfn {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl ExpertFfn {
    pub fn hidden(&self) -> usize {
        self.w1.shape()[0]
    }

    pub fn forward(&self, x: &[f32]) -> Vec<f32> {
        let h = self.hidden();
        let inner = self.w1.shape()[1];
        let mut mid = vec![0.0; inner];
        kernels::matmul(x, self.w1.data(), 1, h, inner, &mut mid);
        for (m, b) in mid.iter_mut().zip(self.b1.data()) {
            *m = kernels::gelu(*m + b);
        }
        let mut out = vec![0.0; h];
        kernels::matmul(&mid, self.w2.data(), 1, inner, h, &mut out);
        for (o, b) in out.iter_mut().zip(self.b2.data()) {
            *o += b;
        }
        out
    }

    /// Multiply-adds of one forward call.
    pub fn macs(&self) -> u64 {
        2 * (self.w1.shape()[0] * self.w1.shape()[1]) as u64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RouteOutput {
    pub output: Vec<f32>,
    /// Gate values over all experts; zero outside the candidate set.
    pub gates: Vec<f32>,
    /// Executed experts, best first.
    pub selected: Vec<usize>,
}

/// Softmax of `logits` restricted to `candidates`; entries outside the
/// candidate set are zero.
pub fn candidate_gates(logits: &[f32], candidates: &[usize]) -> Vec<f32> {
    let mut gates = vec![0.0f32; logits.len()];
    let max = candidates
        .iter()
        .map(|&i| logits[i])
        .fold(f32::NEG_INFINITY, f32::max);
    let mut z = 0.0f64;
    for &i in candidates {
        let e = libm::exp((logits[i] - max) as f64);
        z += e;
        gates[i] = e as f32;
    }
    for &i in candidates {
        gates[i] = (gates[i] as f64 / z) as f32;
    }
    gates
}

/// The `k` highest gates among `candidates` (fewer if the set is
/// smaller); ties go to the lower expert index.
pub fn select_experts(gates: &[f32], candidates: &[usize], k: usize) -> Vec<usize> {
    let vals: Vec<f32> = candidates.iter().map(|&i| gates[i]).collect();
    top_k(&vals, k).into_iter().map(|j| candidates[j]).collect()
}

fn router_logits(x: &[f32], w_r: &Tensor) -> Result<Vec<f32>> {
    let s = w_r.shape();
    if s.len() != 2 || s[0] != x.len() {
        return Err(Error::Shape {
            op: "router",
            lhs: vec![x.len()],
            rhs: s.to_vec(),
        });
    }
    let mut logits = vec![0.0; s[1]];
    kernels::matmul(x, w_r.data(), 1, s[0], s[1], &mut logits);
    Ok(logits)
}

fn route(
    x: &[f32],
    candidates: &[usize],
    experts: &[ExpertFfn],
    w_r: &Tensor,
    k: usize,
) -> Result<RouteOutput> {
    let logits = router_logits(x, w_r)?;
    if experts.len() != logits.len() {
        return Err(Error::routing(alloc::format!(
            "{} experts but router has {} columns",
            experts.len(),
            logits.len()
        )));
    }
    let gates = candidate_gates(&logits, candidates);
    let selected = select_experts(&gates, candidates, k);
    let mut output = vec![0.0f32; x.len()];
    for &e in &selected {
        for (o, y) in output.iter_mut().zip(experts[e].forward(x)) {
            *o += gates[e] * y;
        }
    }
    Ok(RouteOutput {
        output,
        gates,
        selected,
    })
}

/// Top-1 gating over all experts; the chosen expert's output is scaled by
/// its gate value.
pub fn switch_route(x: &[f32], experts: &[ExpertFfn], w_r: &Tensor) -> Result<RouteOutput> {
    let all: Vec<usize> = (0..experts.len()).collect();
    route(x, &all, experts, w_r, 1)
}

/// Top-k gating over the language group of `pl` plus the shared experts.
/// Gates are normalized over the candidate set and not renormalized over
/// the selected experts.
pub fn pl_moe_route(
    x: &[f32],
    pl: &PlId,
    alloc: &ExpertAllocation,
    experts: &[ExpertFfn],
    w_r: &Tensor,
    k: usize,
) -> Result<RouteOutput> {
    let c = Strategy::PlMoe.candidates(pl, alloc)?;
    route(x, &c, experts, w_r, k)
}

/// As [`pl_moe_route`] with the language group as the only candidates.
pub fn pl_moe_route_no_shared(
    x: &[f32],
    pl: &PlId,
    alloc: &ExpertAllocation,
    experts: &[ExpertFfn],
    w_r: &Tensor,
    k: usize,
) -> Result<RouteOutput> {
    let c = Strategy::PlMoeNoShared.candidates(pl, alloc)?;
    route(x, &c, experts, w_r, k)
}
