//! Model properties that need no training: causality, routing and
//! gradient isolation, occupancy, feed-forward compute, metric values.

use std::collections::BTreeMap;

use plmoe_core::corpus::PlId;
use plmoe_core::eval::{edit_similarity, levenshtein};
use plmoe_core::model::{Batch, Binder, ForwardOptions, Model, ModelConfig, Variant};
use plmoe_core::moe::{allocate_experts, occupancy_report, ExpertAllocation, RoutingTrace, Strategy};
use plmoe_core::rng::{CounterRng, Purpose};
use plmoe_core::tensor::Graph;
use plmoe_core::Result;

pub const PLS: [&str; 6] = ["go", "java", "javascript", "php", "python", "ruby"];

fn pls() -> Vec<PlId> {
    PLS.iter().map(|p| PlId::new(*p)).collect()
}

fn random_alloc(rng: &mut CounterRng, e: usize, shared: usize) -> Result<ExpertAllocation> {
    let sizes: BTreeMap<PlId, u64> = pls().into_iter().map(|p| (p, 1 + rng.below(1000) as u64)).collect();
    allocate_experts(&sizes, e, shared, 1)
}

fn tokens(rng: &mut CounterRng, n: usize, v: usize) -> Vec<u32> {
    (0..n).map(|_| 1 + rng.below(v - 1) as u32).collect()
}

fn logits(m: &Model, batch: &Batch) -> Result<Vec<f32>> {
    let mut g = Graph::new();
    let mut b = Binder::new(m.params(), false);
    let mut rng = CounterRng::for_purpose(0, Purpose::Dropout, 0);
    let out = m.forward(&mut g, &mut b, batch, ForwardOptions::eval(), &mut rng)?;
    Ok(g.data(out.logits).to_vec())
}

/// Number of (config, variant) checks and the number whose prefix logits
/// moved.
pub fn causality(configs: usize) -> Result<(usize, usize)> {
    let mut checked = 0;
    let mut leaks = 0;
    for i in 0..configs {
        let mut r = CounterRng::for_purpose(23, Purpose::Test, i as u64);
        let heads = 1 + r.below(3);
        let v = 8 + r.below(40);
        let l_total = 1 + r.below(3);
        let mut c = ModelConfig::toy(v, Variant::Dense);
        c.hidden = heads * (2 + 2 * r.below(4));
        c.heads = heads;
        c.l_total = l_total;
        c.l_moe = 1 + r.below(l_total);
        c.max_seq = 16;
        c.experts_per_layer = 8 + r.below(9);
        let t = 2 + r.below(c.max_seq - 1);
        let rows = 1 + r.below(3);
        let seqs: Vec<Vec<u32>> = (0..rows).map(|_| tokens(&mut r, t, v)).collect();
        let langs: Vec<PlId> = (0..rows).map(|_| pls()[r.below(6)].clone()).collect();
        let row = r.below(rows);
        let j = 1 + r.below(t - 1);
        let mut alt = seqs.clone();
        alt[row][j] = 1 + (alt[row][j] % (v as u32 - 1));
        let alloc = random_alloc(&mut r, c.experts_per_layer, 1)?;
        for variant in [Variant::Dense, Variant::SwitchMoe, Variant::PlMoe] {
            let mut vc = c.clone();
            vc.variant = variant;
            let a = (variant == Variant::PlMoe).then(|| alloc.clone());
            let m = Model::new(vc, a, i as u64)?;
            let x = logits(&m, &Batch::new(&seqs, langs.clone())?)?;
            let y = logits(&m, &Batch::new(&alt, langs.clone())?)?;
            let start = row * t * v;
            checked += 1;
            // exact equality before position j, including every other row
            let same_prefix = x[start..start + j * v] == y[start..start + j * v];
            let same_rows = (0..rows)
                .filter(|&q| q != row)
                .all(|q| x[q * t * v..(q + 1) * t * v] == y[q * t * v..(q + 1) * t * v]);
            if !(same_prefix && same_rows) {
                leaks += 1;
            }
        }
    }
    Ok((checked, leaks))
}

pub struct Isolation {
    pub checks: usize,
    pub routed_outside: u64,
    pub grad_outside: usize,
    pub groups_without_grad: usize,
}

/// The toy configuration (6 languages, two layers with one expert layer,
/// h = 64, eight experts, one shared, top-2), one single-language batch
/// per language and seed.
pub fn isolation(seeds: u64) -> Result<Isolation> {
    let mut out = Isolation {
        checks: 0,
        routed_outside: 0,
        grad_outside: 0,
        groups_without_grad: 0,
    };
    for seed in 0..seeds {
        let mut r = CounterRng::for_purpose(seed, Purpose::Test, 99);
        let c = ModelConfig::toy(64, Variant::PlMoe);
        let alloc = random_alloc(&mut r, c.experts_per_layer, 1)?;
        let m = Model::new(c.clone(), Some(alloc.clone()), seed)?;
        let layers = m.expert_layers();
        for pl in pls() {
            let allowed = Strategy::PlMoe.candidates(&pl, &alloc)?;
            let seqs: Vec<Vec<u32>> = (0..2).map(|_| tokens(&mut r, 24, 64)).collect();
            let batch = Batch::new(&seqs, vec![pl.clone(); 2])?;
            let mut g = Graph::new();
            let mut b = Binder::new(m.params(), true);
            let mut drng = CounterRng::for_purpose(seed, Purpose::Dropout, 0);
            let opts = ForwardOptions {
                train: true,
                aux_alpha: 0.01,
            };
            let fwd = m.forward(&mut g, &mut b, &batch, opts, &mut drng)?;
            out.routed_outside += fwd.trace.mass_outside(&pl, &allowed);
            let (loss, _) = m.lm_loss(&mut g, &fwd, &batch)?;
            g.backward(loss)?;
            let mut grads = vec![None; m.params().len()];
            b.accumulate(&mut g, &mut grads);
            for &layer in &layers {
                let mut inside = false;
                for e in 0..c.experts_per_layer {
                    let ids = m.expert_param_ids(layer, e).expect("expert layer");
                    let nonzero = ids
                        .iter()
                        .any(|&id| grads[id].as_ref().is_some_and(|g: &Vec<f32>| g.iter().any(|&v| v != 0.0)));
                    if allowed.contains(&e) {
                        inside |= nonzero;
                    } else if nonzero {
                        out.grad_outside += 1;
                    }
                }
                if !inside {
                    out.groups_without_grad += 1;
                }
            }
            out.checks += 1;
        }
    }
    Ok(out)
}

/// Routable experts per language under the explicit group sizes of the
/// reported table (32 experts, one shared).
pub fn occupancy() -> Result<(Vec<usize>, f64)> {
    let groups: BTreeMap<PlId, usize> = [("ruby", 2), ("go", 4), ("javascript", 5), ("php", 6), ("java", 6), ("python", 8)]
        .iter()
        .map(|(p, n)| (PlId::new(*p), *n))
        .collect();
    let alloc = ExpertAllocation::from_group_sizes(&groups, 32, 1)?;
    let report = occupancy_report(&RoutingTrace::new(32), &alloc, Strategy::PlMoe)?;
    let mut counts: Vec<usize> = report.rows.iter().map(|r| r.routable).collect();
    counts.sort_unstable();
    Ok((counts, report.mean_fraction))
}

/// Per-token multiply-adds of the top (expert) layer for `variant` with
/// `e` experts.
fn top_layer_macs(variant: Variant, e: usize) -> Result<u64> {
    let mut c = ModelConfig::toy(50, variant);
    c.hidden = 16;
    c.heads = 2;
    c.experts_per_layer = e;
    let mut r = CounterRng::for_purpose(e as u64, Purpose::Test, 5);
    let alloc = match variant {
        Variant::PlMoe => Some(random_alloc(&mut r, e, 1)?),
        _ => None,
    };
    let m = Model::new(c, alloc, 1)?;
    let seqs: Vec<Vec<u32>> = (0..3).map(|_| tokens(&mut r, 9, 50)).collect();
    let langs: Vec<PlId> = (0..3).map(|i| pls()[i * 2].clone()).collect();
    let batch = Batch::new(&seqs, langs)?;
    let mut g = Graph::new();
    let mut b = Binder::new(m.params(), false);
    let mut drng = CounterRng::for_purpose(0, Purpose::Dropout, 0);
    let fwd = m.forward(&mut g, &mut b, &batch, ForwardOptions::eval(), &mut drng)?;
    let top = fwd.compute.last().expect("layers");
    Ok(top.ffn_macs / top.tokens)
}

/// `(e, dense, switch, pl_moe)` per-token multiply-adds.
pub fn compute(experts: &[usize]) -> Result<Vec<(usize, u64, u64, u64)>> {
    experts
        .iter()
        .map(|&e| {
            Ok((
                e,
                top_layer_macs(Variant::Dense, e)?,
                top_layer_macs(Variant::SwitchMoe, e)?,
                top_layer_macs(Variant::PlMoe, e)?,
            ))
        })
        .collect()
}

/// Edit distance straight from its recursive definition, memoized on
/// suffix positions.
fn levenshtein_oracle(a: &[char], b: &[char]) -> usize {
    fn go(a: &[char], b: &[char], i: usize, j: usize, memo: &mut Vec<Vec<Option<usize>>>) -> usize {
        if let Some(d) = memo[i][j] {
            return d;
        }
        let d = if i == a.len() {
            b.len() - j
        } else if j == b.len() {
            a.len() - i
        } else {
            let sub = go(a, b, i + 1, j + 1, memo) + usize::from(a[i] != b[j]);
            let del = go(a, b, i + 1, j, memo) + 1;
            let ins = go(a, b, i, j + 1, memo) + 1;
            sub.min(del).min(ins)
        };
        memo[i][j] = Some(d);
        d
    }
    let mut memo = vec![vec![None; b.len() + 1]; a.len() + 1];
    go(a, b, 0, 0, &mut memo)
}

fn strings_up_to(n: usize) -> Vec<String> {
    let mut all = vec![String::new()];
    let mut last = vec![String::new()];
    for _ in 0..n {
        last = last
            .iter()
            .flat_map(|s| ['a', 'b', 'c'].iter().map(move |c| format!("{s}{c}")))
            .collect();
        all.extend(last.iter().cloned());
    }
    all
}

/// Pairs compared and mismatches against the oracle.
pub fn levenshtein_exhaustive(max_len: usize) -> (usize, usize) {
    let all = strings_up_to(max_len);
    let chars: Vec<Vec<char>> = all.iter().map(|s| s.chars().collect()).collect();
    let mut bad = 0;
    for (a, ca) in all.iter().zip(&chars) {
        for (b, cb) in all.iter().zip(&chars) {
            if levenshtein(a, b) != levenshtein_oracle(ca, cb) {
                bad += 1;
            }
        }
    }
    (all.len() * all.len(), bad)
}

pub fn kitten_sitting() -> f64 {
    edit_similarity("kitten", "sitting")
}

/// Mean next-token loss of a freshly initialized toy model on random
/// tokens, and `ln v`.
pub fn fresh_loss(v: usize) -> Result<(f64, f64)> {
    let c = ModelConfig::toy(v, Variant::PlMoe);
    let mut r = CounterRng::for_purpose(v as u64, Purpose::Test, 3);
    let alloc = random_alloc(&mut r, c.experts_per_layer, 1)?;
    let m = Model::new(c, Some(alloc), 0)?;
    let seqs: Vec<Vec<u32>> = (0..8).map(|_| tokens(&mut r, 32, v)).collect();
    let batch = Batch::new(&seqs, vec![PlId::new("python"); 8])?;
    let mut g = Graph::new();
    let mut b = Binder::new(m.params(), false);
    let mut drng = CounterRng::for_purpose(0, Purpose::Dropout, 0);
    let fwd = m.forward(&mut g, &mut b, &batch, ForwardOptions::eval(), &mut drng)?;
    let (_, lm) = m.lm_loss(&mut g, &fwd, &batch)?;
    Ok((g.data(lm)[0] as f64, (v as f64).ln()))
}
