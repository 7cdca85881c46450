//! Acceptance criteria, one PASS/FAIL line each. Positional arguments
//! select criteria by substring; `PLMOE_THREADS` caps worker threads for
//! the training criteria.

mod gradcheck;
mod structural;
mod training;

use std::collections::BTreeMap;
use std::time::Instant;

use plmoe::pipeline::par_map;
use plmoe_core::corpus::PlId;
use plmoe_core::model::Variant;

use training::{median, Corpus, Protocol, Res};

/// Validation losses closer than this count as tied for the non-strict
/// orderings.
const TIE: f64 = 0.005;
const SEEDS: u64 = 5;
const LOW_RESOURCE: &str = "ruby";

struct Verdict {
    pass: bool,
    summary: String,
    details: Vec<String>,
}

impl Verdict {
    fn new(pass: bool, summary: impl Into<String>) -> Self {
        Self {
            pass,
            summary: summary.into(),
            details: Vec::new(),
        }
    }
}

fn threads() -> usize {
    std::env::var("PLMOE_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

fn autodiff() -> Res<Verdict> {
    let start = Instant::now();
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    let mut forward = 0.0f64;
    for i in 0..200 {
        let c = gradcheck::case(i);
        let o = gradcheck::check(&c, i as u64)?;
        let w = worst.entry(o.op).or_insert(0.0);
        *w = w.max(o.rel_err);
        forward = forward.max(o.forward_err);
    }
    let secs = start.elapsed().as_secs_f64();
    let max = worst.values().cloned().fold(0.0, f64::max);
    let covered = worst.len() == gradcheck::op_count();
    let pass = max < 1e-3 && forward < 1e-4 && covered && secs < 60.0;
    let mut v = Verdict::new(
        pass,
        format!("200 cases over {} ops, max relative gradient error {max:.2e}, max forward error {forward:.2e}, {secs:.1}s", worst.len()),
    );
    v.details = worst.iter().map(|(op, e)| format!("{op}: {e:.2e}")).collect();
    Ok(v)
}

fn causality() -> Res<Verdict> {
    let (checked, leaks) = structural::causality(50)?;
    Ok(Verdict::new(
        leaks == 0 && checked == 150,
        format!("{checked} model checks (50 configs x dense, switch_moe, pl_moe), {leaks} with any change before the perturbed position"),
    ))
}

fn isolation() -> Res<Verdict> {
    let start = Instant::now();
    let r = structural::isolation(20)?;
    let secs = start.elapsed().as_secs_f64();
    let pass = r.routed_outside == 0 && r.grad_outside == 0 && r.groups_without_grad == 0 && r.checks == 120 && secs < 60.0;
    Ok(Verdict::new(
        pass,
        format!(
            "20 seeds x 6 languages: routed mass outside group {}, out-of-group experts with gradient {}, groups without gradient {}, {secs:.1}s",
            r.routed_outside, r.grad_outside, r.groups_without_grad
        ),
    ))
}

fn occupancy() -> Res<Verdict> {
    let (counts, mean) = structural::occupancy()?;
    Ok(Verdict::new(
        counts == [3, 5, 6, 7, 7, 9] && (mean - 0.1927).abs() <= 1e-4,
        format!("routable counts {counts:?} of 32, mean occupancy {mean:.4}"),
    ))
}

fn compute() -> Res<Verdict> {
    let rows = structural::compute(&[8, 16, 32])?;
    let pass = rows.iter().all(|&(_, d, s, p)| s == d && p == 2 * d);
    let mut v = Verdict::new(pass, "per-token expert-layer multiply-adds: switch_moe = dense, pl_moe = 2 x dense");
    v.details = rows
        .iter()
        .map(|(e, d, s, p)| format!("E={e}: dense {d}, switch_moe {s}, pl_moe {p}"))
        .collect();
    Ok(v)
}

fn metrics() -> Res<Verdict> {
    let (pairs, bad) = structural::levenshtein_exhaustive(6);
    let es = structural::kitten_sitting();
    let losses: Vec<(usize, f64, f64)> = [64, 512]
        .iter()
        .map(|&v| structural::fresh_loss(v).map(|(l, ln)| (v, l, ln)))
        .collect::<Result<_, _>>()?;
    let loss_ok = losses.iter().all(|&(_, l, ln)| (l - ln).abs() / ln < 0.05);
    let mut v = Verdict::new(
        bad == 0 && (es - 57.14).abs() <= 0.01 && loss_ok,
        format!("levenshtein {pairs} pairs, {bad} mismatches; ES(kitten, sitting) = {es:.4}"),
    );
    v.details = losses
        .iter()
        .map(|(v, l, ln)| format!("V={v}: fresh loss {l:.4}, ln V {ln:.4}, off by {:.2}%", 100.0 * (l - ln).abs() / ln))
        .collect();
    Ok(v)
}

fn determinism() -> Res<Verdict> {
    let p = Protocol {
        docs_per_pl: 100,
        ..Protocol::default()
    };
    let c = training::corpus(11, &[], &p)?;
    let (a, b) = training::resume_determinism(&c, 200, &p)?;
    Ok(Verdict::new(
        a == b,
        format!("200 steps vs 100 + checkpoint + resume 100: {} parameter bytes, identical: {}", a.len(), a == b),
    ))
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Run {
    Mono,
    Multi(Variant),
}

impl Run {
    fn label(self) -> &'static str {
        match self {
            Run::Mono => "mono_dense",
            Run::Multi(v) => v.as_str(),
        }
    }
}

/// Final validation losses per seed and run over the corpora built with
/// `scale`.
fn directional(scale: &[(&str, f64)], runs: &[Run], threads: usize) -> Res<Vec<BTreeMap<&'static str, BTreeMap<PlId, f64>>>> {
    let p = Protocol::default();
    let seeds: Vec<u64> = (0..SEEDS).collect();
    let corpora: Vec<Corpus> = par_map(&seeds, threads, |&s| training::corpus(s, scale, &p).map_err(|e| e.to_string()))
        .into_iter()
        .collect::<Result<_, _>>()?;
    let jobs: Vec<(u64, Run)> = seeds.iter().flat_map(|&s| runs.iter().map(move |&r| (s, r))).collect();
    let results = par_map(&jobs, threads, |&(s, r)| {
        let c = &corpora[s as usize];
        let out = match r {
            Run::Mono => training::train_and_validate(c, Variant::Dense, Some(LOW_RESOURCE), s, &p),
            Run::Multi(v) => training::train_and_validate(c, v, None, s, &p),
        };
        out.map_err(|e| e.to_string())
    });
    let mut per_seed = vec![BTreeMap::new(); SEEDS as usize];
    for ((s, r), res) in jobs.iter().zip(results) {
        per_seed[*s as usize].insert(r.label(), res?);
    }
    Ok(per_seed)
}

fn low_resource(threads: usize) -> Res<Verdict> {
    let start = Instant::now();
    let runs = [Run::Mono, Run::Multi(Variant::Dense), Run::Multi(Variant::PlMoe)];
    let per_seed = directional(&[(LOW_RESOURCE, 0.1)], &runs, threads)?;
    let ruby = PlId::new(LOW_RESOURCE);
    let med = |label: &str| median(&per_seed.iter().map(|m| m[label][&ruby]).collect::<Vec<_>>());
    let (mono, dense, moe) = (med("mono_dense"), med("dense"), med("pl_moe"));
    let pass = moe <= dense + TIE && dense < mono;
    let secs = start.elapsed().as_secs_f64();
    let mut v = Verdict::new(
        pass,
        format!("median {LOW_RESOURCE} validation loss: pl_moe {moe:.4}, dense {dense:.4}, mono_dense {mono:.4} ({SEEDS} seeds, {secs:.0}s)"),
    );
    v.details = per_seed
        .iter()
        .enumerate()
        .map(|(s, m)| {
            let cols: Vec<String> = runs.iter().map(|r| format!("{} {:.4}", r.label(), m[r.label()][&ruby])).collect();
            format!("seed {s}: {}", cols.join(", "))
        })
        .collect();
    Ok(v)
}

fn ablation(threads: usize) -> Res<Verdict> {
    let start = Instant::now();
    let runs: Vec<Run> = plmoe::pipeline::ABLATION.iter().map(|&v| Run::Multi(v)).collect();
    let per_seed = directional(&[], &runs, threads)?;
    let med = |label: &str| median(&per_seed.iter().map(|m| training::mean_loss(&m[label])).collect::<Vec<_>>());
    let m: Vec<f64> = runs.iter().map(|r| med(r.label())).collect();
    let ordered = m.windows(2).all(|w| w[0] <= w[1] + TIE);
    let pass = ordered && m[0] < m[3];
    let secs = start.elapsed().as_secs_f64();
    let shown: Vec<String> = runs.iter().zip(&m).map(|(r, x)| format!("{} {x:.4}", r.label())).collect();
    let mut v = Verdict::new(pass, format!("median mean validation loss: {} ({SEEDS} seeds, {secs:.0}s)", shown.join(", ")));
    v.details = per_seed
        .iter()
        .enumerate()
        .map(|(s, per)| {
            let cols: Vec<String> = runs.iter().map(|r| format!("{} {:.4}", r.label(), training::mean_loss(&per[r.label()]))).collect();
            format!("seed {s}: {}", cols.join(", "))
        })
        .collect();
    Ok(v)
}

fn main() {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let threads = threads();
    type Check = Box<dyn Fn() -> Res<Verdict>>;
    let criteria: Vec<(&str, Check)> = vec![
        ("autodiff_gradcheck", Box::new(autodiff)),
        ("causality", Box::new(causality)),
        ("routing_gradient_isolation", Box::new(isolation)),
        ("occupancy_table", Box::new(occupancy)),
        ("compute_proportionality", Box::new(compute)),
        ("metric_oracles", Box::new(metrics)),
        ("determinism_resume", Box::new(determinism)),
        ("low_resource_direction", Box::new(move || low_resource(threads))),
        ("ablation_direction", Box::new(move || ablation(threads))),
    ];
    let mut failed = 0;
    let mut ran = 0;
    for (name, check) in &criteria {
        if !filters.is_empty() && !filters.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        ran += 1;
        let verdict = check().unwrap_or_else(|e| Verdict::new(false, format!("error: {e}")));
        println!("{} {name}: {}", if verdict.pass { "PASS" } else { "FAIL" }, verdict.summary);
        for d in &verdict.details {
            println!("    {d}");
        }
        if !verdict.pass {
            failed += 1;
        }
    }
    println!("acceptance: {} of {ran} criteria passed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
