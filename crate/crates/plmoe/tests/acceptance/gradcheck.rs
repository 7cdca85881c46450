//! Analytic gradients of every differentiable graph op against central
//! differences of independent f64 reference implementations.

use plmoe_core::moe::load_balance_aux_loss;
use plmoe_core::rng::{CounterRng, Purpose};
use plmoe_core::tensor::{Graph, Tensor, Var};
use plmoe_core::Result;

type Build = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;
type Reference = Box<dyn Fn(&[Vec<f64>]) -> Vec<f64>>;

pub struct Case {
    pub op: &'static str,
    inputs: Vec<(Vec<usize>, Vec<f32>)>,
    build: Build,
    reference: Reference,
}

pub const OPS: [&str; 22] = [
    "matmul",
    "add",
    "add_bias",
    "mul",
    "scale",
    "sum",
    "transpose",
    "reshape",
    "permute",
    "concat",
    "embedding_lookup",
    "gather_rows",
    "scatter_rows",
    "pick",
    "scale_rows",
    "gelu",
    "dropout",
    "softmax",
    "masked_softmax",
    "causal_softmax",
    "layer_norm",
    "cross_entropy",
];

// aux loss is checked in addition to the graph ops
const ALL: usize = OPS.len() + 1;

fn dim(rng: &mut CounterRng, lo: usize, hi: usize) -> usize {
    lo + rng.below(hi - lo + 1)
}

fn normal(rng: &mut CounterRng, shape: &[usize]) -> (Vec<usize>, Vec<f32>) {
    let n = shape.iter().product();
    (shape.to_vec(), (0..n).map(|_| rng.normal()).collect())
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn unravel(mut i: usize, shape: &[usize]) -> Vec<usize> {
    let mut idx = vec![0; shape.len()];
    for a in (0..shape.len()).rev() {
        idx[a] = i % shape[a];
        i /= shape[a];
    }
    idx
}

fn softmax_ref(x: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let st = strides(shape);
    let mut out = vec![0.0; x.len()];
    for i in 0..x.len() {
        let idx = unravel(i, shape);
        let base = i - idx[axis] * st[axis];
        let slice: Vec<f64> = (0..shape[axis]).map(|j| x[base + j * st[axis]]).collect();
        let max = slice.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = slice.iter().map(|v| (v - max).exp()).sum();
        out[i] = (x[i] - max).exp() / z;
    }
    out
}

fn gelu_ref(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

/// Case number `i`; the op cycles through all of them.
pub fn case(i: usize) -> Case {
    let mut rng = CounterRng::for_purpose(17, Purpose::Test, i as u64);
    let r = &mut rng;
    let k = i % ALL;
    if k == OPS.len() {
        return aux_case(r);
    }
    let op = OPS[k];
    let (inputs, build, reference): (Vec<(Vec<usize>, Vec<f32>)>, Build, Reference) = match op {
        "matmul" => {
            let (b, m, kk, n) = (dim(r, 1, 3), dim(r, 1, 4), dim(r, 1, 5), dim(r, 1, 4));
            let batched = r.below(2) == 1;
            let (sa, sb) = if batched { (vec![b, m, kk], vec![b, kk, n]) } else { (vec![m, kk], vec![kk, n]) };
            let bb = if batched { b } else { 1 };
            (
                vec![normal(r, &sa), normal(r, &sb)],
                Box::new(|g, v| g.matmul(v[0], v[1])),
                Box::new(move |x| {
                    let mut out = vec![0.0; bb * m * n];
                    for q in 0..bb {
                        for i in 0..m {
                            for j in 0..n {
                                out[q * m * n + i * n + j] =
                                    (0..kk).map(|l| x[0][q * m * kk + i * kk + l] * x[1][q * kk * n + l * n + j]).sum();
                            }
                        }
                    }
                    out
                }),
            )
        }
        "add" | "mul" => {
            let s = [dim(r, 1, 4), dim(r, 1, 5)];
            let is_add = op == "add";
            (
                vec![normal(r, &s), normal(r, &s)],
                Box::new(move |g, v| if is_add { g.add(v[0], v[1]) } else { g.mul(v[0], v[1]) }),
                Box::new(move |x| {
                    x[0].iter().zip(&x[1]).map(|(a, b)| if is_add { a + b } else { a * b }).collect()
                }),
            )
        }
        "add_bias" => {
            let h = dim(r, 1, 5);
            let s = [dim(r, 1, 3), dim(r, 1, 3), h];
            (
                vec![normal(r, &s), normal(r, &[h])],
                Box::new(|g, v| g.add_bias(v[0], v[1])),
                Box::new(move |x| x[0].iter().enumerate().map(|(i, a)| a + x[1][i % h]).collect()),
            )
        }
        "scale" => {
            let s = 4.0 * r.uniform() - 2.0;
            let shape = [dim(r, 1, 6), dim(r, 1, 3)];
            (
                vec![normal(r, &shape)],
                Box::new(move |g, v| g.scale(v[0], s)),
                Box::new(move |x| x[0].iter().map(|a| a * s as f64).collect()),
            )
        }
        "sum" => {
            let shape = [dim(r, 1, 4), dim(r, 1, 4), dim(r, 1, 3)];
            (
                vec![normal(r, &shape)],
                Box::new(|g, v| g.sum(v[0])),
                Box::new(|x| vec![x[0].iter().sum()]),
            )
        }
        "transpose" => {
            let s = [dim(r, 1, 3), dim(r, 1, 4), dim(r, 1, 5)];
            (
                vec![normal(r, &s)],
                Box::new(|g, v| g.transpose(v[0])),
                Box::new(move |x| {
                    let mut out = Vec::new();
                    for q in 0..s[0] {
                        for j in 0..s[2] {
                            for i in 0..s[1] {
                                out.push(x[0][q * s[1] * s[2] + i * s[2] + j]);
                            }
                        }
                    }
                    out
                }),
            )
        }
        "reshape" => {
            let s = [dim(r, 1, 3), dim(r, 1, 4), dim(r, 1, 3)];
            let to = [s[0] * s[1], s[2]];
            (
                vec![normal(r, &s)],
                Box::new(move |g, v| g.reshape(v[0], &to)),
                Box::new(|x| x[0].clone()),
            )
        }
        "permute" => {
            let rank = dim(r, 3, 4);
            let s: Vec<usize> = (0..rank).map(|_| dim(r, 1, 3)).collect();
            let mut axes: Vec<usize> = (0..rank).collect();
            for a in (1..rank).rev() {
                axes.swap(a, r.below(a + 1));
            }
            let out_shape: Vec<usize> = axes.iter().map(|&a| s[a]).collect();
            let src = strides(&s);
            let ax = axes.clone();
            (
                vec![normal(r, &s)],
                Box::new(move |g, v| g.permute(v[0], &axes)),
                Box::new(move |x| {
                    (0..x[0].len())
                        .map(|o| {
                            let idx = unravel(o, &out_shape);
                            let at: usize = idx.iter().zip(&ax).map(|(&i, &a)| i * src[a]).sum();
                            x[0][at]
                        })
                        .collect()
                }),
            )
        }
        "concat" => {
            let axis = r.below(3);
            let parts = dim(r, 2, 3);
            let base = [dim(r, 1, 3), dim(r, 1, 3), dim(r, 1, 3)];
            let shapes: Vec<Vec<usize>> = (0..parts)
                .map(|_| {
                    let mut s = base.to_vec();
                    s[axis] = dim(r, 1, 3);
                    s
                })
                .collect();
            let inputs = shapes.iter().map(|s| normal(r, s)).collect();
            let outer: usize = base[..axis].iter().product();
            let sh = shapes.clone();
            (
                inputs,
                Box::new(move |g, v| g.concat(v, axis)),
                Box::new(move |x| {
                    let mut out = Vec::new();
                    for o in 0..outer {
                        for (p, s) in sh.iter().enumerate() {
                            let chunk: usize = s[axis..].iter().product();
                            out.extend_from_slice(&x[p][o * chunk..(o + 1) * chunk]);
                        }
                    }
                    out
                }),
            )
        }
        "embedding_lookup" | "gather_rows" => {
            let (n, h) = (dim(r, 1, 5), dim(r, 1, 4));
            let rows: Vec<usize> = (0..dim(r, 1, 7)).map(|_| r.below(n)).collect();
            let rw = rows.clone();
            let embed = op == "embedding_lookup";
            (
                vec![normal(r, &[n, h])],
                Box::new(move |g, v| if embed { g.embedding_lookup(v[0], &rows) } else { g.gather_rows(v[0], &rows) }),
                Box::new(move |x| rw.iter().flat_map(|&q| x[0][q * h..(q + 1) * h].to_vec()).collect()),
            )
        }
        "scatter_rows" => {
            let total = dim(r, 2, 6);
            let h = dim(r, 1, 4);
            let mut all: Vec<usize> = (0..total).collect();
            for a in (1..total).rev() {
                all.swap(a, r.below(a + 1));
            }
            all.truncate(dim(r, 1, total));
            let rows = all.clone();
            (
                vec![normal(r, &[all.len(), h])],
                Box::new(move |g, v| g.scatter_rows(v[0], &rows, total)),
                Box::new(move |x| {
                    let mut out = vec![0.0; total * h];
                    for (i, &q) in all.iter().enumerate() {
                        out[q * h..(q + 1) * h].copy_from_slice(&x[0][i * h..(i + 1) * h]);
                    }
                    out
                }),
            )
        }
        "pick" => {
            let (n, m) = (dim(r, 1, 4), dim(r, 1, 5));
            let cells: Vec<(usize, usize)> = (0..dim(r, 1, 8)).map(|_| (r.below(n), r.below(m))).collect();
            let c2 = cells.clone();
            (
                vec![normal(r, &[n, m])],
                Box::new(move |g, v| g.pick(v[0], &cells)),
                Box::new(move |x| c2.iter().map(|&(a, b)| x[0][a * m + b]).collect()),
            )
        }
        "scale_rows" => {
            let (n, h) = (dim(r, 1, 5), dim(r, 1, 4));
            (
                vec![normal(r, &[n, h]), normal(r, &[n, 1])],
                Box::new(|g, v| g.scale_rows(v[0], v[1])),
                Box::new(move |x| x[0].iter().enumerate().map(|(i, a)| a * x[1][i / h]).collect()),
            )
        }
        "gelu" => {
            let shape = [dim(r, 1, 5), dim(r, 1, 5)];
            (
                vec![normal(r, &shape)],
                Box::new(|g, v| g.gelu(v[0])),
                Box::new(|x| x[0].iter().map(|&a| gelu_ref(a)).collect()),
            )
        }
        "dropout" => {
            let p = 0.1 + 0.4 * r.uniform();
            let counter = i as u64;
            let s = [dim(r, 1, 5), dim(r, 1, 5)];
            let n = s[0] * s[1];
            // the mask the op draws from the same stream
            let mut mrng = CounterRng::for_purpose(5, Purpose::Dropout, counter);
            let mask: Vec<f64> = (0..n)
                .map(|_| if mrng.uniform() < p { 0.0 } else { 1.0 / (1.0 - p as f64) })
                .collect();
            (
                vec![normal(r, &s)],
                Box::new(move |g, v| {
                    let mut d = CounterRng::for_purpose(5, Purpose::Dropout, counter);
                    g.dropout(v[0], p, true, &mut d)
                }),
                Box::new(move |x| x[0].iter().zip(&mask).map(|(a, m)| a * m).collect()),
            )
        }
        "softmax" => {
            let s = [dim(r, 1, 3), dim(r, 1, 4), dim(r, 1, 4)];
            let axis = r.below(3);
            (
                vec![normal(r, &s)],
                Box::new(move |g, v| g.softmax(v[0], axis)),
                Box::new(move |x| softmax_ref(&x[0], &s, axis)),
            )
        }
        "masked_softmax" => {
            let (rows, n) = (dim(r, 1, 3), dim(r, 2, 5));
            let keep = r.below(n);
            let mask: Vec<f32> = (0..n)
                .map(|j| match (j == keep, r.below(3)) {
                    (false, 0) => f32::NEG_INFINITY,
                    _ => r.normal(),
                })
                .collect();
            let m64: Vec<f64> = mask.iter().map(|&m| m as f64).collect();
            (
                vec![normal(r, &[rows, n])],
                Box::new(move |g, v| {
                    let m = g.add_mask(v[0], &mask)?;
                    g.softmax(m, 1)
                }),
                Box::new(move |x| {
                    let masked: Vec<f64> = x[0].iter().enumerate().map(|(i, a)| a + m64[i % n]).collect();
                    softmax_ref(&masked, &[rows, n], 1)
                }),
            )
        }
        "causal_softmax" => {
            let (b, t) = (dim(r, 1, 3), dim(r, 1, 5));
            (
                vec![normal(r, &[b, t, t])],
                Box::new(|g, v| {
                    let m = g.causal_mask(v[0])?;
                    g.softmax(m, 2)
                }),
                Box::new(move |x| {
                    let masked: Vec<f64> = x[0]
                        .iter()
                        .enumerate()
                        .map(|(i, &a)| if i % t > (i / t) % t { f64::NEG_INFINITY } else { a })
                        .collect();
                    softmax_ref(&masked, &[b, t, t], 2)
                }),
            )
        }
        "layer_norm" => {
            let (n, h) = (dim(r, 1, 4), dim(r, 2, 6));
            (
                vec![normal(r, &[n, h]), normal(r, &[h]), normal(r, &[h])],
                Box::new(|g, v| g.layer_norm(v[0], v[1], v[2], 1e-5)),
                Box::new(move |x| {
                    let mut out = Vec::new();
                    for row in x[0].chunks(h) {
                        let mean = row.iter().sum::<f64>() / h as f64;
                        let var = row.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / h as f64;
                        let sd = (var + 1e-5).sqrt();
                        for (j, a) in row.iter().enumerate() {
                            out.push((a - mean) / sd * x[1][j] + x[2][j]);
                        }
                    }
                    out
                }),
            )
        }
        "cross_entropy" => {
            let (rows, v) = (dim(r, 2, 6), dim(r, 2, 6));
            let ignore = r.below(v);
            let mut targets: Vec<usize> = (0..rows).map(|_| r.below(v)).collect();
            targets[0] = (ignore + 1) % v;
            let t2 = targets.clone();
            (
                vec![normal(r, &[rows, v])],
                Box::new(move |g, x| g.cross_entropy(x[0], &targets, Some(ignore))),
                Box::new(move |x| {
                    let (mut total, mut count) = (0.0, 0.0);
                    for (q, &t) in t2.iter().enumerate() {
                        if t == ignore {
                            continue;
                        }
                        let row = &x[0][q * v..(q + 1) * v];
                        let lse = row.iter().map(|a| a.exp()).sum::<f64>().ln();
                        total += lse - row[t];
                        count += 1.0;
                    }
                    vec![total / count]
                }),
            )
        }
        _ => unreachable!(),
    };
    Case {
        op,
        inputs,
        build,
        reference,
    }
}

fn aux_case(r: &mut CounterRng) -> Case {
    let (n, e) = (dim(r, 2, 6), dim(r, 3, 6));
    let mut candidates: Vec<usize> = (0..e).filter(|_| r.below(2) == 1).collect();
    if candidates.is_empty() {
        candidates.push(r.below(e));
    }
    let dispatch: Vec<usize> = (0..n).map(|_| candidates[r.below(candidates.len())]).collect();
    let alpha = 0.01 + r.uniform();
    let probs = (vec![n, e], (0..n * e).map(|_| r.uniform()).collect());
    let (c2, d2) = (candidates.clone(), dispatch.clone());
    Case {
        op: "aux_loss",
        inputs: vec![probs],
        build: Box::new(move |g, v| load_balance_aux_loss(g, v[0], &dispatch, &candidates, alpha)),
        reference: Box::new(move |x| {
            let mut acc = 0.0;
            for &c in &c2 {
                let f = d2.iter().filter(|&&d| d == c).count() as f64 / n as f64;
                let p = (0..n).map(|q| x[0][q * e + c]).sum::<f64>() / n as f64;
                acc += f * p;
            }
            vec![alpha as f64 * c2.len() as f64 * acc]
        }),
    }
}

pub struct Outcome {
    pub op: &'static str,
    pub rel_err: f64,
    pub forward_err: f64,
}

/// Relative error `|a - n| / |n|` (Euclidean, over all inputs) between the
/// analytic gradient of `Σ w·op(x)` and f64 central differences.
pub fn check(c: &Case, seed: u64) -> Result<Outcome> {
    let mut g = Graph::new();
    let vars: Vec<Var> = c
        .inputs
        .iter()
        .map(|(s, d)| Tensor::new(s.clone(), d.clone()).map(|t| g.param(t)))
        .collect::<Result<_>>()?;
    let y = (c.build)(&mut g, &vars)?;
    let ys = g.shape(y).to_vec();
    let yv = g.data(y).to_vec();
    let mut wr = CounterRng::for_purpose(seed, Purpose::Test, 1 << 40);
    let w: Vec<f32> = (0..yv.len()).map(|_| wr.normal()).collect();
    let wv = g.constant(Tensor::new(ys, w.clone())?);
    let prod = g.mul(y, wv)?;
    let loss = g.sum(prod)?;
    g.backward(loss)?;

    let x64: Vec<Vec<f64>> = c.inputs.iter().map(|(_, d)| d.iter().map(|&v| v as f64).collect()).collect();
    let want_y = (c.reference)(&x64);
    let forward_err = yv
        .iter()
        .zip(&want_y)
        .map(|(&a, b)| (a as f64 - b).abs() / (1.0 + b.abs()))
        .fold(0.0, f64::max);
    let objective = |x: &[Vec<f64>]| -> f64 { (c.reference)(x).iter().zip(&w).map(|(a, &b)| a * b as f64).sum() };
    let h = 1e-6;
    let (mut diff, mut norm) = (0.0f64, 0.0f64);
    for (k, &v) in vars.iter().enumerate() {
        let analytic = g.grad(v).expect("input gradient").to_vec();
        let mut x = x64.clone();
        for j in 0..x[k].len() {
            let orig = x[k][j];
            x[k][j] = orig + h;
            let up = objective(&x);
            x[k][j] = orig - h;
            let down = objective(&x);
            x[k][j] = orig;
            let num = (up - down) / (2.0 * h);
            diff += (analytic[j] as f64 - num).powi(2);
            norm += num * num;
        }
    }
    let rel_err = if norm > 0.0 { (diff / norm).sqrt() } else { diff.sqrt() };
    Ok(Outcome {
        op: c.op,
        rel_err,
        forward_err,
    })
}

pub fn op_count() -> usize {
    ALL
}
