use alloc::vec;
use alloc::vec::Vec;

use super::kernels;
use super::Tensor;
use crate::error::{Error, Result};
use crate::rng::CounterRng;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Add(Var, Var),
    AddBias {
        x: Var,
        bias: Var,
    },
    Mul(Var, Var),
    Scale(Var, f32),
    Sum(Var),
    Transpose {
        x: Var,
        batch: usize,
        rows: usize,
        cols: usize,
    },
    Reshape(Var),
    Permute {
        x: Var,
        axes: Vec<usize>,
    },
    Concat {
        inputs: Vec<Var>,
        outer: usize,
    },
    GatherRows {
        table: Var,
        rows: Vec<usize>,
    },
    ScatterRows {
        x: Var,
        rows: Vec<usize>,
    },
    Pick {
        x: Var,
        cells: Vec<(usize, usize)>,
    },
    ScaleRows {
        x: Var,
        s: Var,
    },
    Gelu(Var),
    Dropout {
        x: Var,
        mask: Vec<f32>,
    },
    Softmax {
        x: Var,
        outer: usize,
        n: usize,
        inner: usize,
    },
    AddMask {
        x: Var,
        mask: Vec<f32>,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f32>,
        rstd: Vec<f32>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        ignore: Option<usize>,
        probs: Vec<f32>,
        count: usize,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of executed operations. Nodes are appended as operations
/// run, so every node comes after the producers of its inputs and a single
/// reverse sweep replays gradients.
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f32>>>,
    backpropagated: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            backpropagated: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf. Its `requires_grad` flag decides whether backward
    /// populates a gradient for it.
    pub fn leaf(&mut self, mut t: Tensor) -> Var {
        let rg = t.is_requires_grad();
        t.clear_grad();
        self.push(t, Op::Leaf, rg)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.leaf(t.requires_grad(true))
    }

    /// Leaf without gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t.requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[f32] {
        self.nodes[v.0].value.data()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of a leaf after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.grads[v.0].as_deref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<f32>> {
        self.grads[v.0].take()
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Matrix product over the last two axes. Both operands must carry the
    /// same leading (batch) dimensions.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sa.len() != sb.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(shape_err("matmul", &sa, &sb));
        }
        let r = sa.len();
        let (m, k, k2, n) = (sa[r - 2], sa[r - 1], sb[r - 2], sb[r - 1]);
        if k != k2 {
            return Err(shape_err("matmul", &sa, &sb));
        }
        let batch: usize = sa[..r - 2].iter().product();
        let mut out = vec![0.0f32; batch * m * n];
        {
            let (ad, bd) = (self.data(a), self.data(b));
            for bi in 0..batch {
                kernels::matmul(
                    &ad[bi * m * k..(bi + 1) * m * k],
                    &bd[bi * k * n..(bi + 1) * k * n],
                    m,
                    k,
                    n,
                    &mut out[bi * m * n..(bi + 1) * m * n],
                );
            }
        }
        let mut shape = sa[..r - 2].to_vec();
        shape.extend([m, n]);
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
            },
            rg,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("add", self.shape(a), self.shape(b)));
        }
        let data: Vec<f32> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    /// `x[..., h] + bias[h]`, broadcasting over leading axes.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let h = self.value(x).last_dim();
        if self.shape(bias) != [h] {
            return Err(shape_err("add_bias", self.shape(x), self.shape(bias)));
        }
        let b = self.data(bias);
        let data: Vec<f32> = self
            .data(x)
            .chunks_exact(h)
            .flat_map(|row| row.iter().zip(b).map(|(x, y)| x + y))
            .collect();
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        let rg = self.rg(&[x, bias]);
        Ok(self.push(t, Op::AddBias { x, bias }, rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("mul", self.shape(a), self.shape(b)));
        }
        let data: Vec<f32> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x * y)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, s: f32) -> Result<Var> {
        let data: Vec<f32> = self.data(x).iter().map(|v| v * s).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Scale(x, s), rg))
    }

    /// Sum of all elements as a `[1]` tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.data(x).iter().map(|&v| v as f64).sum();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::scalar(s as f32), Op::Sum(x), rg))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(shape_err("transpose", &s, &[]));
        }
        let r = s.len();
        let (rows, cols) = (s[r - 2], s[r - 1]);
        let batch: usize = s[..r - 2].iter().product();
        let xd = self.data(x);
        let mut data = Vec::with_capacity(xd.len());
        for bi in 0..batch {
            data.extend(kernels::transpose(
                &xd[bi * rows * cols..(bi + 1) * rows * cols],
                rows,
                cols,
            ));
        }
        let mut shape = s[..r - 2].to_vec();
        shape.extend([cols, rows]);
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(shape, data)?,
            Op::Transpose {
                x,
                batch,
                rows,
                cols,
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self
            .value(x)
            .with_shape(shape.to_vec())
            .map_err(|_| shape_err("reshape", self.shape(x), shape))?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let mut seen = vec![false; s.len()];
        if axes.len() != s.len() || axes.iter().any(|&a| a >= s.len() || core::mem::replace(&mut seen[a], true)) {
            return Err(shape_err("permute", &s, axes));
        }
        let data = kernels::permute(self.data(x), &s, axes);
        let shape: Vec<usize> = axes.iter().map(|&a| s[a]).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(shape, data)?,
            Op::Permute {
                x,
                axes: axes.to_vec(),
            },
            rg,
        ))
    }

    /// Concatenates along `axis`; all other axes must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| shape_err("concat", &[], &[]))?;
        let s0 = self.shape(*first).to_vec();
        if axis >= s0.len() {
            return Err(shape_err("concat", &s0, &[axis]));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != s0.len()
                || s.iter()
                    .zip(&s0)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(shape_err("concat", &s0, s));
            }
            total += s[axis];
        }
        let outer: usize = s0[..axis].iter().product();
        let mut data = Vec::with_capacity(outer * total * s0[axis + 1..].iter().product::<usize>());
        for o in 0..outer {
            for &v in inputs {
                let chunk = self.value(v).numel() / outer;
                data.extend_from_slice(&self.data(v)[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = s0;
        shape[axis] = total;
        let rg = self.rg(inputs);
        Ok(self.push(
            Tensor::new(shape, data)?,
            Op::Concat {
                inputs: inputs.to_vec(),
                outer,
            },
            rg,
        ))
    }

    /// Gathers rows of a `[n, h]` table; the gradient is scatter-added
    /// back onto the table.
    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.gather_rows(table, ids)
    }

    /// Selects rows of a 2-D tensor (repeats allowed).
    pub fn gather_rows(&mut self, table: Var, rows: &[usize]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 {
            return Err(shape_err("gather_rows", &s, &[]));
        }
        let (n, h) = (s[0], s[1]);
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::IndexOutOfRange {
                what: "rows",
                index: bad,
                size: n,
            });
        }
        let td = self.data(table);
        let mut data = Vec::with_capacity(rows.len() * h);
        for &r in rows {
            data.extend_from_slice(&td[r * h..(r + 1) * h]);
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            Tensor::new(vec![rows.len(), h], data)?,
            Op::GatherRows {
                table,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    /// Places the rows of `x: [n, h]` at positions `rows` of a zero
    /// `[total, h]` tensor. Positions must be distinct.
    pub fn scatter_rows(&mut self, x: Var, rows: &[usize], total: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || s[0] != rows.len() {
            return Err(shape_err("scatter_rows", &s, &[rows.len()]));
        }
        let h = s[1];
        let mut data = vec![0.0; total * h];
        let mut used = vec![false; total];
        let xd = self.data(x);
        for (i, &r) in rows.iter().enumerate() {
            if r >= total || core::mem::replace(&mut used[r], true) {
                return Err(Error::IndexOutOfRange {
                    what: "scatter rows",
                    index: r,
                    size: total,
                });
            }
            data[r * h..(r + 1) * h].copy_from_slice(&xd[i * h..(i + 1) * h]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(vec![total, h], data)?,
            Op::ScatterRows {
                x,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    /// Collects single cells `(row, col)` of a 2-D tensor into `[n, 1]`.
    pub fn pick(&mut self, x: Var, cells: &[(usize, usize)]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(shape_err("pick", &s, &[]));
        }
        let xd = self.data(x);
        let mut data = Vec::with_capacity(cells.len());
        for &(r, c) in cells {
            if r >= s[0] || c >= s[1] {
                return Err(Error::IndexOutOfRange {
                    what: "pick",
                    index: r * s[1] + c,
                    size: s[0] * s[1],
                });
            }
            data.push(xd[r * s[1] + c]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(vec![cells.len(), 1], data)?,
            Op::Pick {
                x,
                cells: cells.to_vec(),
            },
            rg,
        ))
    }

    /// Multiplies each row of `x: [n, h]` by the matching entry of `s: [n, 1]`.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 || self.shape(s) != [sx[0], 1] {
            return Err(shape_err("scale_rows", &sx, self.shape(s)));
        }
        let h = sx[1];
        let sd = self.data(s);
        let data: Vec<f32> = self
            .data(x)
            .chunks_exact(h)
            .zip(sd)
            .flat_map(|(row, &g)| row.iter().map(move |v| v * g))
            .collect();
        let rg = self.rg(&[x, s]);
        Ok(self.push(Tensor::new(sx, data)?, Op::ScaleRows { x, s }, rg))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let data: Vec<f32> = self.data(x).iter().map(|&v| kernels::gelu(v)).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(self.shape(x).to_vec(), data)?, Op::Gelu(x), rg))
    }

    /// Inverted dropout. Identity when `train` is false or `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f32, train: bool, rng: &mut CounterRng) -> Result<Var> {
        if !train || p <= 0.0 {
            return Ok(x);
        }
        if p >= 1.0 {
            return Err(Error::config("dropout probability must be < 1"));
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f32> = (0..self.value(x).numel())
            .map(|_| if rng.uniform() < p { 0.0 } else { keep })
            .collect();
        let data: Vec<f32> = self.data(x).iter().zip(&mask).map(|(v, m)| v * m).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(self.shape(x).to_vec(), data)?,
            Op::Dropout { x, mask },
            rg,
        ))
    }

    /// Softmax along `axis` with max subtraction. Entries equal to `-inf`
    /// receive exactly zero probability.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(shape_err("softmax", &s, &[axis]));
        }
        let outer: usize = s[..axis].iter().product();
        let n = s[axis];
        let inner: usize = s[axis + 1..].iter().product();
        let xd = self.data(x);
        let mut out = vec![0.0f32; xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                let at = |j: usize| base + j * inner;
                let mut max = f32::NEG_INFINITY;
                for j in 0..n {
                    max = max.max(xd[at(j)]);
                }
                if max == f32::NEG_INFINITY {
                    return Err(Error::config("softmax over an all -inf slice"));
                }
                let mut z = 0.0f64;
                for j in 0..n {
                    let e = libm::exp((xd[at(j)] - max) as f64);
                    z += e;
                    out[at(j)] = e as f32;
                }
                for j in 0..n {
                    out[at(j)] = (out[at(j)] as f64 / z) as f32;
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(s, out)?,
            Op::Softmax {
                x,
                outer,
                n,
                inner,
            },
            rg,
        ))
    }

    /// Adds a constant mask over the trailing axes (broadcast over leading
    /// ones). `-inf` entries block gradient flow.
    pub fn add_mask(&mut self, x: Var, mask: &[f32]) -> Result<Var> {
        let numel = self.value(x).numel();
        if mask.is_empty() || !numel.is_multiple_of(mask.len()) {
            return Err(shape_err("add_mask", self.shape(x), &[mask.len()]));
        }
        let data: Vec<f32> = self
            .data(x)
            .chunks_exact(mask.len())
            .flat_map(|row| row.iter().zip(mask).map(|(v, m)| v + m))
            .collect();
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(self.shape(x).to_vec(), data)?,
            Op::AddMask {
                x,
                mask: mask.to_vec(),
            },
            rg,
        ))
    }

    /// Additive causal mask over the last two axes `[t, t]`.
    pub fn causal_mask(&mut self, scores: Var) -> Result<Var> {
        let s = self.shape(scores).to_vec();
        let r = s.len();
        if r < 2 || s[r - 1] != s[r - 2] {
            return Err(shape_err("causal_mask", &s, &[]));
        }
        let t = s[r - 1];
        let mask: Vec<f32> = (0..t * t)
            .map(|i| if i % t > i / t { f32::NEG_INFINITY } else { 0.0 })
            .collect();
        self.add_mask(scores, &mask)
    }

    /// Normalizes each trailing vector to zero mean and unit variance, then
    /// applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f32) -> Result<Var> {
        let h = self.value(x).last_dim();
        if self.shape(gain) != [h] || self.shape(bias) != [h] {
            return Err(shape_err("layer_norm", self.shape(x), self.shape(gain)));
        }
        if !(eps > 0.0) {
            return Err(Error::config("layer_norm eps must be positive"));
        }
        let (gd, bd) = (self.data(gain), self.data(bias));
        let xd = self.data(x);
        let rows = xd.len() / h;
        let mut xhat = Vec::with_capacity(xd.len());
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(xd.len());
        for row in xd.chunks_exact(h) {
            let mean = row.iter().map(|&v| v as f64).sum::<f64>() / h as f64;
            let var = row
                .iter()
                .map(|&v| {
                    let d = v as f64 - mean;
                    d * d
                })
                .sum::<f64>()
                / h as f64;
            let r = 1.0 / libm::sqrt(var + eps as f64);
            rstd.push(r as f32);
            for (j, &v) in row.iter().enumerate() {
                let xh = ((v as f64 - mean) * r) as f32;
                xhat.push(xh);
                out.push(xh * gd[j] + bd[j]);
            }
        }
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            Tensor::new(self.shape(x).to_vec(), out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Mean negative log-likelihood of `targets` under `softmax(logits)`
    /// over the last axis, skipping positions whose target equals `ignore`.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        ignore: Option<usize>,
    ) -> Result<Var> {
        let v = self.value(logits).last_dim();
        let rows = self.value(logits).numel() / v;
        if targets.len() != rows {
            return Err(shape_err("cross_entropy", self.shape(logits), &[targets.len()]));
        }
        let ld = self.data(logits);
        let mut probs = vec![0.0f32; ld.len()];
        let mut total = 0.0f64;
        let mut count = 0usize;
        for (r, &t) in targets.iter().enumerate() {
            if Some(t) == ignore {
                continue;
            }
            if t >= v {
                return Err(Error::IndexOutOfRange {
                    what: "target",
                    index: t,
                    size: v,
                });
            }
            let row = &ld[r * v..(r + 1) * v];
            let max = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
            let z: f64 = row.iter().map(|&x| libm::exp(x as f64 - max)).sum();
            let lse = max + libm::log(z);
            total += lse - row[t] as f64;
            count += 1;
            for (p, &x) in probs[r * v..(r + 1) * v].iter_mut().zip(row) {
                *p = libm::exp(x as f64 - lse) as f32;
            }
        }
        if count == 0 {
            return Err(Error::UndefinedLoss);
        }
        let loss = (total / count as f64) as f32;
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                ignore,
                probs,
                count,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar. Populates gradients for every leaf that
    /// requires one (zeros when the leaf does not reach `loss`). A graph can
    /// be backpropagated once.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backpropagated {
            return Err(Error::BackwardReplayed);
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(Error::DetachedGraph);
        }
        self.backpropagated = true;
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &g);
        }
        for (node, grad) in self.nodes.iter().zip(self.grads.iter_mut()) {
            if matches!(node.op, Op::Leaf) && node.requires_grad && grad.is_none() {
                *grad = Some(vec![0.0; node.value.numel()]);
            }
        }
        Ok(())
    }

    fn acc(&mut self, v: Var, contrib: Vec<f32>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(g) => g.iter_mut().zip(&contrib).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(contrib),
        }
    }

    fn acc_with(&mut self, v: Var, f: impl FnOnce(&Self) -> Vec<f32>) {
        if self.nodes[v.0].requires_grad {
            let c = f(self);
            self.acc(v, c);
        }
    }

    fn propagate(&mut self, i: usize, g: &[f32]) {
        // Temporarily move the op out so input values can be borrowed freely.
        let op = core::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            &Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
            } => {
                self.acc_with(a, |s| {
                    let bd = s.data(b);
                    let mut da = vec![0.0; batch * m * k];
                    for bi in 0..batch {
                        let bt = kernels::transpose(&bd[bi * k * n..(bi + 1) * k * n], k, n);
                        kernels::matmul(
                            &g[bi * m * n..(bi + 1) * m * n],
                            &bt,
                            m,
                            n,
                            k,
                            &mut da[bi * m * k..(bi + 1) * m * k],
                        );
                    }
                    da
                });
                self.acc_with(b, |s| {
                    let ad = s.data(a);
                    let mut db = vec![0.0; batch * k * n];
                    for bi in 0..batch {
                        let at = kernels::transpose(&ad[bi * m * k..(bi + 1) * m * k], m, k);
                        kernels::matmul(
                            &at,
                            &g[bi * m * n..(bi + 1) * m * n],
                            k,
                            m,
                            n,
                            &mut db[bi * k * n..(bi + 1) * k * n],
                        );
                    }
                    db
                });
            }
            &Op::Add(a, b) => {
                self.acc(a, g.to_vec());
                self.acc(b, g.to_vec());
            }
            &Op::AddBias { x, bias } => {
                self.acc(x, g.to_vec());
                self.acc_with(bias, |s| {
                    let h = s.value(bias).numel();
                    let mut db = vec![0.0f64; h];
                    for row in g.chunks_exact(h) {
                        db.iter_mut().zip(row).for_each(|(a, &b)| *a += b as f64);
                    }
                    db.into_iter().map(|v| v as f32).collect()
                });
            }
            &Op::Mul(a, b) => {
                self.acc_with(a, |s| g.iter().zip(s.data(b)).map(|(g, y)| g * y).collect());
                self.acc_with(b, |s| g.iter().zip(s.data(a)).map(|(g, x)| g * x).collect());
            }
            &Op::Scale(x, c) => self.acc(x, g.iter().map(|v| v * c).collect()),
            &Op::Sum(x) => {
                let n = self.value(x).numel();
                self.acc(x, vec![g[0]; n]);
            }
            &Op::Transpose {
                x,
                batch,
                rows,
                cols,
            } => {
                let mut dx = Vec::with_capacity(g.len());
                for bi in 0..batch {
                    dx.extend(kernels::transpose(
                        &g[bi * rows * cols..(bi + 1) * rows * cols],
                        cols,
                        rows,
                    ));
                }
                self.acc(x, dx);
            }
            &Op::Reshape(x) => self.acc(x, g.to_vec()),
            Op::Permute { x, axes } => {
                let out_shape = self.shape(Var(i)).to_vec();
                let mut inv = vec![0; axes.len()];
                for (j, &a) in axes.iter().enumerate() {
                    inv[a] = j;
                }
                let dx = kernels::permute(g, &out_shape, &inv);
                self.acc(*x, dx);
            }
            Op::Concat { inputs, outer } => {
                let outer = *outer;
                let chunks: Vec<usize> = inputs
                    .iter()
                    .map(|&v| self.value(v).numel() / outer)
                    .collect();
                let row: usize = chunks.iter().sum();
                for (j, &v) in inputs.iter().enumerate() {
                    let off: usize = chunks[..j].iter().sum();
                    let c = chunks[j];
                    let mut dx = Vec::with_capacity(c * outer);
                    for o in 0..outer {
                        dx.extend_from_slice(&g[o * row + off..o * row + off + c]);
                    }
                    self.acc(v, dx);
                }
            }
            Op::GatherRows { table, rows } => {
                let table = *table;
                self.acc_with(table, |s| {
                    let h = s.value(table).last_dim();
                    let mut dt = vec![0.0f32; s.value(table).numel()];
                    for (j, &r) in rows.iter().enumerate() {
                        dt[r * h..(r + 1) * h]
                            .iter_mut()
                            .zip(&g[j * h..(j + 1) * h])
                            .for_each(|(a, b)| *a += b);
                    }
                    dt
                });
            }
            Op::ScatterRows { x, rows } => {
                let h = self.value(*x).last_dim();
                let mut dx = Vec::with_capacity(rows.len() * h);
                for &r in rows {
                    dx.extend_from_slice(&g[r * h..(r + 1) * h]);
                }
                self.acc(*x, dx);
            }
            Op::Pick { x, cells } => {
                let x = *x;
                self.acc_with(x, |s| {
                    let cols = s.value(x).last_dim();
                    let mut dx = vec![0.0; s.value(x).numel()];
                    for (j, &(r, c)) in cells.iter().enumerate() {
                        dx[r * cols + c] += g[j];
                    }
                    dx
                });
            }
            &Op::ScaleRows { x, s: sv } => {
                let h = self.value(x).last_dim();
                self.acc_with(x, |s| {
                    g.chunks_exact(h)
                        .zip(s.data(sv))
                        .flat_map(|(row, &c)| row.iter().map(move |v| v * c))
                        .collect()
                });
                self.acc_with(sv, |s| {
                    g.chunks_exact(h)
                        .zip(s.data(x).chunks_exact(h))
                        .map(|(gr, xr)| {
                            gr.iter().zip(xr).map(|(a, b)| (a * b) as f64).sum::<f64>() as f32
                        })
                        .collect()
                });
            }
            &Op::Gelu(x) => {
                self.acc_with(x, |s| {
                    g.iter()
                        .zip(s.data(x))
                        .map(|(g, &v)| g * kernels::gelu_grad(v))
                        .collect()
                });
            }
            Op::Dropout { x, mask } => {
                self.acc(*x, g.iter().zip(mask).map(|(g, m)| g * m).collect());
            }
            &Op::Softmax {
                x,
                outer,
                n,
                inner,
            } => {
                self.acc_with(x, |s| {
                    let y = s.data(Var(i));
                    let mut dx = vec![0.0f32; y.len()];
                    for o in 0..outer {
                        for k in 0..inner {
                            let base = o * n * inner + k;
                            let dot: f64 = (0..n)
                                .map(|j| (g[base + j * inner] * y[base + j * inner]) as f64)
                                .sum();
                            for j in 0..n {
                                let at = base + j * inner;
                                dx[at] = y[at] * (g[at] - dot as f32);
                            }
                        }
                    }
                    dx
                });
            }
            Op::AddMask { x, mask } => {
                let dx: Vec<f32> = g
                    .chunks_exact(mask.len())
                    .flat_map(|row| {
                        row.iter()
                            .zip(mask)
                            .map(|(g, m)| if m.is_finite() { *g } else { 0.0 })
                    })
                    .collect();
                self.acc(*x, dx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let (x, gain, bias) = (*x, *gain, *bias);
                let h = self.value(gain).numel();
                self.acc_with(bias, |_| {
                    let mut db = vec![0.0f64; h];
                    for row in g.chunks_exact(h) {
                        db.iter_mut().zip(row).for_each(|(a, &b)| *a += b as f64);
                    }
                    db.into_iter().map(|v| v as f32).collect()
                });
                self.acc_with(gain, |_| {
                    let mut dg = vec![0.0f64; h];
                    for (row, xr) in g.chunks_exact(h).zip(xhat.chunks_exact(h)) {
                        for j in 0..h {
                            dg[j] += (row[j] * xr[j]) as f64;
                        }
                    }
                    dg.into_iter().map(|v| v as f32).collect()
                });
                self.acc_with(x, |s| {
                    let gd = s.data(gain);
                    let mut dx = Vec::with_capacity(g.len());
                    for ((row, xr), &r) in g.chunks_exact(h).zip(xhat.chunks_exact(h)).zip(rstd) {
                        let mut m1 = 0.0f64;
                        let mut m2 = 0.0f64;
                        for j in 0..h {
                            let dy = (row[j] * gd[j]) as f64;
                            m1 += dy;
                            m2 += dy * xr[j] as f64;
                        }
                        m1 /= h as f64;
                        m2 /= h as f64;
                        for j in 0..h {
                            let dy = (row[j] * gd[j]) as f64;
                            dx.push((r as f64 * (dy - m1 - xr[j] as f64 * m2)) as f32);
                        }
                    }
                    dx
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                ignore,
                probs,
                count,
            } => {
                let logits = *logits;
                let v = self.value(logits).last_dim();
                let scale = g[0] / *count as f32;
                let mut dx = vec![0.0f32; probs.len()];
                for (r, &t) in targets.iter().enumerate() {
                    if Some(t) == *ignore {
                        continue;
                    }
                    for j in 0..v {
                        dx[r * v + j] = probs[r * v + j] * scale;
                    }
                    dx[r * v + t] -= scale;
                }
                self.acc(logits, dx);
            }
        }
        self.nodes[i].op = op;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx_eq::close;

    mod approx_eq {
        pub fn close(a: f32, b: f32, tol: f32) -> bool {
            (a - b).abs() <= tol
        }
    }

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = g.constant(t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.data(c), &[5.0, 6.0, 7.0, 8.0]);

        let a = g.constant(t(&[1, 2], &[1.0, 2.0]));
        let b = g.constant(t(&[2, 1], &[3.0, 4.0]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.data(c), &[11.0]);

        let a = g.constant(t(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 4.0, 9.0]));
        let z = g.constant(Tensor::zeros(&[3, 4]));
        let c = g.matmul(a, z).unwrap();
        assert!(g.data(c).iter().all(|&v| v == 0.0));
        assert_eq!(g.shape(c), &[2, 4]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        match g.matmul(a, b) {
            Err(Error::Shape { op, lhs, rhs }) => {
                assert_eq!(op, "matmul");
                assert_eq!(lhs, [2, 3]);
                assert_eq!(rhs, [2, 3]);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let x = g.constant(t(&[4], &[0.0; 4]));
        let y = g.softmax(x, 0).unwrap();
        assert!(g.data(y).iter().all(|&v| v == 0.25));

        let x = g.constant(t(&[2], &[1.0, 2.0]));
        let y = g.softmax(x, 0).unwrap();
        assert!(close(g.data(y)[0], 0.26894, 1e-5));
        assert!(close(g.data(y)[1], 0.73106, 1e-5));

        let x = g.constant(t(&[2], &[1000.0, 0.0]));
        let y = g.softmax(x, 0).unwrap();
        assert!(close(g.data(y)[0], 1.0, 1e-7));
        assert!(g.data(y)[1] >= 0.0 && g.data(y)[1] < 1e-30);
    }

    #[test]
    fn softmax_over_inner_axis() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2, 2], &[0.0, 5.0, 0.0, -5.0]));
        let y = g.softmax(x, 0).unwrap();
        let d = g.data(y);
        assert!(close(d[0], 0.5, 1e-7) && close(d[2], 0.5, 1e-7));
        assert!(close(d[1] + d[3], 1.0, 1e-6));
    }

    #[test]
    fn layer_norm_examples() {
        let mut g = Graph::new();
        let ones = g.constant(Tensor::full(&[3], 1.0));
        let zeros = g.constant(Tensor::zeros(&[3]));
        let x = g.constant(t(&[3], &[2.0, 2.0, 2.0]));
        let y = g.layer_norm(x, ones, zeros, 1e-5).unwrap();
        assert!(g.data(y).iter().all(|&v| v == 0.0));

        let ones = g.constant(Tensor::full(&[2], 1.0));
        let zeros = g.constant(Tensor::zeros(&[2]));
        let x = g.constant(t(&[2], &[1.0, -1.0]));
        let y = g.layer_norm(x, ones, zeros, 1e-12).unwrap();
        assert!(close(g.data(y)[0], 1.0, 1e-6) && close(g.data(y)[1], -1.0, 1e-6));

        let gain = g.constant(Tensor::zeros(&[2]));
        let bias = g.constant(t(&[2], &[0.3, -0.7]));
        let x = g.constant(t(&[2, 2], &[4.0, 1.0, -3.0, 8.0]));
        let y = g.layer_norm(x, gain, bias, 1e-5).unwrap();
        assert_eq!(g.data(y), &[0.3, -0.7, 0.3, -0.7]);
    }

    #[test]
    fn cross_entropy_examples() {
        let mut g = Graph::new();
        let v = 7;
        let x = g.constant(Tensor::zeros(&[3, v]));
        let l = g.cross_entropy(x, &[0, 3, 6], None).unwrap();
        assert!(close(g.data(l)[0], libm::logf(v as f32), 1e-6));

        let x = g.constant(t(&[1, 3], &[1.0, 2.0, 3.0]));
        let l = g.cross_entropy(x, &[2], None).unwrap();
        assert!(close(g.data(l)[0], 0.40761, 1e-5));

        let x = g.constant(t(&[1, 3], &[0.0, 0.0, 1e4]));
        let l = g.cross_entropy(x, &[2], None).unwrap();
        assert!(g.data(l)[0].abs() < 1e-6);

        let x = g.constant(t(&[2, 3], &[0.0; 6]));
        assert_eq!(g.cross_entropy(x, &[0, 0], Some(0)), Err(Error::UndefinedLoss));
    }

    #[test]
    fn backward_examples() {
        let mut g = Graph::new();
        let x = g.param(t(&[1], &[3.0]));
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[6.0]);

        let mut g = Graph::new();
        let x = g.param(t(&[1], &[2.0]));
        let y = g.param(t(&[1], &[5.0]));
        let z = g.mul(x, y).unwrap();
        g.backward(z).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[5.0]);
        assert_eq!(g.grad(y).unwrap(), &[2.0]);
        assert_eq!(g.backward(z), Err(Error::BackwardReplayed));
    }

    #[test]
    fn backward_errors() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(&[2]));
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
        let c = g.constant(Tensor::scalar(1.0));
        let d = g.scale(c, 2.0).unwrap();
        assert_eq!(g.backward(d), Err(Error::DetachedGraph));
    }

    #[test]
    fn unused_leaf_gets_zero_grad() {
        let mut g = Graph::new();
        let x = g.param(t(&[1], &[1.0]));
        let unused = g.param(t(&[2], &[1.0, 1.0]));
        let y = g.scale(x, 3.0).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(unused).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn causal_mask_zero_weight() {
        let mut g = Graph::new();
        let s = g.param(Tensor::from_fn(&[3, 3], |i| i as f32 * 0.1));
        let m = g.causal_mask(s).unwrap();
        let w = g.softmax(m, 1).unwrap();
        let d = g.data(w).to_vec();
        assert_eq!(d[0], 1.0);
        assert_eq!(&d[1..3], &[0.0, 0.0]);
        assert_eq!(d[5], 0.0);
        let l = g.sum(w).unwrap();
        g.backward(l).unwrap();
    }

    #[test]
    fn dropout_eval_is_identity() {
        let mut g = Graph::new();
        let mut rng = CounterRng::new(1, 1);
        let x = g.param(Tensor::full(&[10], 2.0));
        let y = g.dropout(x, 0.5, false, &mut rng).unwrap();
        assert_eq!(x, y);
        let y = g.dropout(x, 0.5, true, &mut rng).unwrap();
        assert!(g.data(y).iter().all(|&v| v == 0.0 || v == 4.0));
    }

    #[test]
    fn scatter_rows_rejects_duplicates() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(&[2, 2]));
        assert!(g.scatter_rows(x, &[1, 1], 3).is_err());
        assert!(g.scatter_rows(x, &[0, 2], 3).is_ok());
    }

    #[test]
    fn embedding_out_of_range() {
        let mut g = Graph::new();
        let e = g.param(Tensor::zeros(&[4, 2]));
        assert!(matches!(
            g.embedding_lookup(e, &[1, 4]),
            Err(Error::IndexOutOfRange { index: 4, .. })
        ));
    }
}
