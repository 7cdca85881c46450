use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::{ExpertAllocation, Strategy};
use crate::corpus::PlId;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TraceCell {
    pub count: u64,
    pub gate_mass: f64,
}

/// Token counts per `(layer, language, expert)`. Traces from separate
/// forward passes merge by addition.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RoutingTrace {
    pub total_experts: usize,
    cells: BTreeMap<(usize, PlId, usize), TraceCell>,
}

impl RoutingTrace {
    pub fn new(total_experts: usize) -> Self {
        Self {
            total_experts,
            cells: BTreeMap::new(),
        }
    }

    pub fn record(&mut self, layer: usize, pl: &PlId, expert: usize, gate: f32) {
        let c = self.cells.entry((layer, pl.clone(), expert)).or_default();
        c.count += 1;
        c.gate_mass += gate as f64;
    }

    pub fn merge(&mut self, other: &RoutingTrace) {
        self.total_experts = self.total_experts.max(other.total_experts);
        for (k, v) in &other.cells {
            let c = self.cells.entry(k.clone()).or_default();
            c.count += v.count;
            c.gate_mass += v.gate_mass;
        }
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn count(&self, layer: usize, pl: &PlId, expert: usize) -> u64 {
        self.cells
            .get(&(layer, pl.clone(), expert))
            .map_or(0, |c| c.count)
    }

    pub fn cells(&self) -> impl Iterator<Item = (&(usize, PlId, usize), &TraceCell)> {
        self.cells.iter()
    }

    pub fn layers(&self) -> Vec<usize> {
        let mut l: Vec<usize> = self.cells.keys().map(|k| k.0).collect();
        l.dedup();
        l
    }

    pub fn pls(&self) -> Vec<PlId> {
        let mut p: Vec<PlId> = self.cells.keys().map(|k| k.1.clone()).collect();
        p.sort();
        p.dedup();
        p
    }

    /// Counts for one `(layer, pl)` row over all experts.
    pub fn row(&self, layer: usize, pl: &PlId) -> Vec<u64> {
        let mut r = vec![0; self.total_experts];
        for e in 0..self.total_experts {
            r[e] = self.count(layer, pl, e);
        }
        r
    }

    /// Row-normalized counts; `None` for a language with no tokens.
    pub fn row_fractions(&self, layer: usize, pl: &PlId) -> Option<Vec<f64>> {
        let r = self.row(layer, pl);
        let s: u64 = r.iter().sum();
        (s > 0).then(|| r.iter().map(|&c| c as f64 / s as f64).collect())
    }

    /// Sum of counts outside `allowed` for `pl` over every layer.
    pub fn mass_outside(&self, pl: &PlId, allowed: &[usize]) -> u64 {
        self.cells
            .iter()
            .filter(|((_, p, e), _)| p == pl && !allowed.contains(e))
            .map(|(_, c)| c.count)
            .sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OccupancyRow {
    pub pl: PlId,
    pub routable: usize,
    pub fraction: f64,
    /// Row-normalized routing distribution per traced layer; absent for a
    /// language without tokens in the trace.
    pub distribution: BTreeMap<usize, Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Occupancy {
    pub total_experts: usize,
    pub rows: Vec<OccupancyRow>,
    pub mean_fraction: f64,
}

/// Routable expert counts and fractions per language, plus the traced
/// routing distribution.
pub fn occupancy_report(
    trace: &RoutingTrace,
    alloc: &ExpertAllocation,
    strategy: Strategy,
) -> Result<Occupancy> {
    if alloc.per_pl.is_empty() {
        return Err(Error::routing("allocation lists no languages"));
    }
    let total = alloc.total_experts;
    let mut rows = Vec::new();
    for pl in alloc.pls() {
        let routable = strategy.candidates(pl, alloc)?.len();
        let distribution = trace
            .layers()
            .into_iter()
            .filter_map(|l| trace.row_fractions(l, pl).map(|f| (l, f)))
            .collect();
        rows.push(OccupancyRow {
            pl: pl.clone(),
            routable,
            fraction: routable as f64 / total as f64,
            distribution,
        });
    }
    let mean_fraction = rows.iter().map(|r| r.fraction).sum::<f64>() / rows.len() as f64;
    Ok(Occupancy {
        total_experts: total,
        rows,
        mean_fraction,
    })
}
