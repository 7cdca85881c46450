use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use super::{FfnIds, LayerIds, Model, SlotIds};
use crate::corpus::{PlId, PAD_ID};
use crate::error::{Error, Result};
use crate::moe::{load_balance_aux_loss, select_experts, RoutingTrace};
use crate::rng::CounterRng;
use crate::tensor::{Graph, Var};

use super::params::Binder;

/// Equal-length token rows (right-padded with the padding id) with one
/// language per row.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub b: usize,
    pub t: usize,
    pub tokens: Vec<u32>,
    pub pls: Vec<PlId>,
}

impl Batch {
    pub fn new(seqs: &[Vec<u32>], pls: Vec<PlId>) -> Result<Self> {
        if seqs.is_empty() || seqs.len() != pls.len() {
            return Err(Error::config("batch needs one language per non-empty sequence list"));
        }
        let t = seqs.iter().map(Vec::len).max().unwrap_or(0);
        if t == 0 {
            return Err(Error::config("batch has only empty sequences"));
        }
        let mut tokens = Vec::with_capacity(seqs.len() * t);
        for s in seqs {
            tokens.extend_from_slice(s);
            tokens.resize(tokens.len() + t - s.len(), PAD_ID);
        }
        Ok(Self {
            b: seqs.len(),
            t,
            tokens,
            pls,
        })
    }

    pub fn single(seq: Vec<u32>, pl: PlId) -> Result<Self> {
        Self::new(&[seq], vec![pl])
    }

    pub fn row(&self, i: usize) -> &[u32] {
        &self.tokens[i * self.t..(i + 1) * self.t]
    }
}

/// Next-token targets: position `i` predicts token `i + 1`; the final
/// position and padding map to the padding id (ignored by the loss).
pub fn lm_targets(batch: &Batch) -> Vec<usize> {
    let mut out = Vec::with_capacity(batch.tokens.len());
    for r in 0..batch.b {
        let row = batch.row(r);
        for i in 0..batch.t {
            out.push(if i + 1 < batch.t { row[i + 1] as usize } else { PAD_ID as usize });
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ForwardOptions {
    pub train: bool,
    /// Weight of the load-balance loss; `0` disables it.
    pub aux_alpha: f32,
}

impl ForwardOptions {
    pub fn eval() -> Self {
        Self {
            train: false,
            aux_alpha: 0.0,
        }
    }
}

/// Feed-forward work of one layer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LayerCompute {
    pub layer: usize,
    pub tokens: u64,
    pub ffn_macs: u64,
    pub expert_calls: u64,
    pub expert_layer: bool,
}

#[derive(Debug)]
pub struct ForwardOutput {
    /// `[b, t, V]`.
    pub logits: Var,
    pub trace: RoutingTrace,
    pub aux: Option<Var>,
    pub compute: Vec<LayerCompute>,
    /// Post-softmax attention weights `[b, heads, t, t]` per layer.
    pub attention: Vec<Var>,
}

struct Ctx<'a> {
    model: &'a Model,
    g: &'a mut Graph,
    binder: &'a mut Binder,
    rng: &'a mut CounterRng,
    train: bool,
}

impl Ctx<'_> {
    fn p(&mut self, id: usize) -> Var {
        self.binder.get(self.g, &self.model.params, id)
    }

    fn linear(&mut self, x: Var, (w, b): (usize, usize)) -> Result<Var> {
        let wv = self.p(w);
        let y = self.g.matmul(x, wv)?;
        let bv = self.p(b);
        self.g.add_bias(y, bv)
    }

    fn layer_norm(&mut self, x: Var, (gn, bn): (usize, usize)) -> Result<Var> {
        let (gv, bv) = (self.p(gn), self.p(bn));
        self.g.layer_norm(x, gv, bv, self.model.config.layer_norm_eps)
    }

    fn dropout(&mut self, x: Var) -> Result<Var> {
        self.g.dropout(x, self.model.config.dropout, self.train, self.rng)
    }

    fn ffn(&mut self, x: Var, ids: &FfnIds) -> Result<Var> {
        let a = self.linear(x, (ids.w1, ids.b1))?;
        let a = self.g.gelu(a)?;
        self.linear(a, (ids.w2, ids.b2))
    }

    fn attention(&mut self, x: Var, ids: &LayerIds, b: usize, t: usize) -> Result<(Var, Var)> {
        let c = &self.model.config;
        let (heads, d, h) = (c.heads, c.head_dim(), c.hidden);
        let split = |ctx: &mut Self, w| -> Result<Var> {
            let y = ctx.linear(x, w)?;
            let y = ctx.g.reshape(y, &[b, t, heads, d])?;
            ctx.g.permute(y, &[0, 2, 1, 3])
        };
        let q = split(self, ids.wq)?;
        let k = split(self, ids.wk)?;
        let v = split(self, ids.wv)?;
        let kt = self.g.transpose(k)?;
        let s = self.g.matmul(q, kt)?;
        let s = self.g.scale(s, 1.0 / libm::sqrtf(d as f32))?;
        let s = self.g.causal_mask(s)?;
        let probs = self.g.softmax(s, 3)?;
        let p = self.dropout(probs)?;
        let ctx = self.g.matmul(p, v)?;
        let ctx = self.g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = self.g.reshape(ctx, &[b * t, h])?;
        Ok((self.linear(ctx, ids.wo)?, probs))
    }

    #[allow(clippy::too_many_arguments)]
    fn experts(
        &mut self,
        x: Var,
        layer: usize,
        router: usize,
        experts: &[FfnIds],
        batch: &Batch,
        aux_alpha: f32,
        trace: &mut RoutingTrace,
        compute: &mut LayerCompute,
    ) -> Result<(Var, Option<Var>)> {
        let c = &self.model.config;
        let (n, e_total, h, m) = (batch.b * batch.t, c.experts_per_layer, c.hidden, c.inner());
        let strategy = self.model.strategy().expect("expert layer in an expert variant");
        let k = strategy.k(c.top_k);

        let mut cands: BTreeMap<&PlId, Vec<usize>> = BTreeMap::new();
        for pl in &batch.pls {
            if !cands.contains_key(pl) {
                let cs = self.model.candidates(pl)?.expect("expert variant");
                cands.insert(pl, cs);
            }
        }
        let mut mask = vec![f32::NEG_INFINITY; n * e_total];
        for r in 0..n {
            for &e in &cands[&batch.pls[r / batch.t]] {
                mask[r * e_total + e] = 0.0;
            }
        }
        let wr = self.p(router);
        let logits = self.g.matmul(x, wr)?;
        let logits = self.g.add_mask(logits, &mask)?;
        let probs = self.g.softmax(logits, 1)?;

        let mut rows: Vec<Vec<usize>> = vec![Vec::new(); e_total];
        let mut cells: Vec<Vec<(usize, usize)>> = vec![Vec::new(); e_total];
        let mut groups: BTreeMap<&PlId, (Vec<usize>, Vec<usize>)> = BTreeMap::new();
        {
            let pd = self.g.data(probs);
            for r in 0..n {
                let pl = &batch.pls[r / batch.t];
                let gates = &pd[r * e_total..(r + 1) * e_total];
                let sel = select_experts(gates, &cands[pl], k);
                for &e in &sel {
                    rows[e].push(r);
                    cells[e].push((r, e));
                }
                if batch.tokens[r] != PAD_ID {
                    for &e in &sel {
                        trace.record(layer, pl, e, gates[e]);
                    }
                    let grp = groups.entry(pl).or_default();
                    grp.0.push(r);
                    grp.1.push(sel[0]);
                }
            }
        }

        let mut acc: Option<Var> = None;
        for e in 0..e_total {
            if rows[e].is_empty() {
                continue;
            }
            compute.expert_calls += rows[e].len() as u64;
            compute.ffn_macs += (rows[e].len() * 2 * h * m) as u64;
            let xe = self.g.gather_rows(x, &rows[e])?;
            let ye = self.ffn(xe, &experts[e])?;
            let ge = self.g.pick(probs, &cells[e])?;
            let ye = self.g.scale_rows(ye, ge)?;
            let full = self.g.scatter_rows(ye, &rows[e], n)?;
            acc = Some(match acc {
                Some(a) => self.g.add(a, full)?,
                None => full,
            });
        }
        let out = acc.expect("every token selects at least one expert");

        let mut aux: Option<Var> = None;
        if aux_alpha > 0.0 {
            for (pl, (grows, dispatch)) in groups {
                let sub = self.g.gather_rows(probs, &grows)?;
                let l = load_balance_aux_loss(self.g, sub, &dispatch, &cands[pl], aux_alpha)?;
                aux = Some(match aux {
                    Some(a) => self.g.add(a, l)?,
                    None => l,
                });
            }
        }
        Ok((out, aux))
    }
}

impl Model {
    /// Runs the network on `batch`. Parameters are bound through `binder`;
    /// dropout draws from `rng` only when `opts.train` is set.
    pub fn forward(
        &self,
        g: &mut Graph,
        binder: &mut Binder,
        batch: &Batch,
        opts: ForwardOptions,
        rng: &mut CounterRng,
    ) -> Result<ForwardOutput> {
        let c = &self.config;
        let (b, t, h) = (batch.b, batch.t, c.hidden);
        if batch.pls.len() != b || batch.tokens.len() != b * t {
            return Err(Error::config("malformed batch"));
        }
        if t > c.max_seq {
            return Err(Error::IndexOutOfRange {
                what: "sequence length",
                index: t,
                size: c.max_seq,
            });
        }
        if let Some(&bad) = batch.tokens.iter().find(|&&id| id as usize >= c.vocab_size) {
            return Err(Error::IndexOutOfRange {
                what: "token id",
                index: bad as usize,
                size: c.vocab_size,
            });
        }
        let mut ctx = Ctx {
            model: self,
            g,
            binder,
            rng,
            train: opts.train,
        };
        let ids: Vec<usize> = batch.tokens.iter().map(|&i| i as usize).collect();
        let pos: Vec<usize> = (0..b).flat_map(|_| 0..t).collect();
        let wte = ctx.p(self.wte);
        let wpe = ctx.p(self.wpe);
        let te = ctx.g.embedding_lookup(wte, &ids)?;
        let pe = ctx.g.embedding_lookup(wpe, &pos)?;
        let x = ctx.g.add(te, pe)?;
        let mut x = ctx.dropout(x)?;

        let mut trace = RoutingTrace::new(c.experts_per_layer);
        let mut aux: Option<Var> = None;
        let mut compute = Vec::with_capacity(c.l_total);
        let mut attention = Vec::with_capacity(c.l_total);
        for (l, ids) in self.layers.iter().enumerate() {
            let a = ctx.layer_norm(x, ids.ln1)?;
            let (a, probs) = ctx.attention(a, ids, b, t)?;
            attention.push(probs);
            x = ctx.g.add(x, a)?;
            let f = ctx.layer_norm(x, ids.ln2)?;
            let mut lc = LayerCompute {
                layer: l,
                tokens: (b * t) as u64,
                ..LayerCompute::default()
            };
            let f = match &ids.slot {
                SlotIds::Dense(ffn) => {
                    lc.ffn_macs = (b * t * 2 * h * c.inner()) as u64;
                    ctx.ffn(f, ffn)?
                }
                SlotIds::Experts { router, experts } => {
                    lc.expert_layer = true;
                    let (y, la) = ctx.experts(f, l, *router, experts, batch, opts.aux_alpha, &mut trace, &mut lc)?;
                    if let Some(la) = la {
                        aux = Some(match aux {
                            Some(a) => ctx.g.add(a, la)?,
                            None => la,
                        });
                    }
                    y
                }
            };
            compute.push(lc);
            let f = ctx.dropout(f)?;
            x = ctx.g.add(x, f)?;
        }
        let x = ctx.layer_norm(x, self.ln_f)?;
        let wt = ctx.g.transpose(wte)?;
        let logits = ctx.g.matmul(x, wt)?;
        let logits = ctx.g.reshape(logits, &[b, t, c.vocab_size])?;
        Ok(ForwardOutput {
            logits,
            trace,
            aux,
            compute,
            attention,
        })
    }

    /// Mean next-token NLL over non-padding targets, plus the auxiliary
    /// loss when present. Returns `(total, lm)`.
    pub fn lm_loss(&self, g: &mut Graph, out: &ForwardOutput, batch: &Batch) -> Result<(Var, Var)> {
        let v = self.config.vocab_size;
        let flat = g.reshape(out.logits, &[batch.b * batch.t, v])?;
        let lm = g.cross_entropy(flat, &lm_targets(batch), Some(PAD_ID as usize))?;
        let total = match out.aux {
            Some(a) => g.add(lm, a)?,
            None => lm,
        };
        Ok((total, lm))
    }
}
