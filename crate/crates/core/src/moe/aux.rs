use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// `alpha · |C| · Σ_{i∈C} f_i · P_i` over one group of rows sharing the
/// candidate set `candidates`. `probs` is the `[n, E]` gate matrix (zero
/// outside the candidates), `dispatch[r]` the top-1 expert of row `r`,
/// `f_i` the dispatch fraction and `P_i` the mean gate probability.
pub fn load_balance_aux_loss(
    g: &mut Graph,
    probs: Var,
    dispatch: &[usize],
    candidates: &[usize],
    alpha: f32,
) -> Result<Var> {
    let s = g.shape(probs).to_vec();
    if s.len() != 2 || s[0] != dispatch.len() {
        return Err(Error::Shape {
            op: "aux_loss",
            lhs: s,
            rhs: vec![dispatch.len()],
        });
    }
    let (n, e) = (s[0], s[1]);
    let f = dispatch_fractions(dispatch, e);
    let mut w = vec![0.0f32; n * e];
    for r in 0..n {
        for &i in candidates {
            w[r * e + i] = f[i] as f32;
        }
    }
    let wv = g.constant(Tensor::new(vec![n, e], w)?);
    let prod = g.mul(probs, wv)?;
    let total = g.sum(prod)?;
    g.scale(total, alpha * candidates.len() as f32 / n as f32)
}

fn dispatch_fractions(dispatch: &[usize], e: usize) -> Vec<f64> {
    let mut f = vec![0.0f64; e];
    for &d in dispatch {
        f[d] += 1.0;
    }
    for v in &mut f {
        *v /= dispatch.len() as f64;
    }
    f
}

/// Plain evaluation of the auxiliary loss for one row group.
pub fn aux_loss_value(probs: &[f32], e: usize, dispatch: &[usize], candidates: &[usize], alpha: f64) -> f64 {
    let n = dispatch.len();
    let f = dispatch_fractions(dispatch, e);
    let mut acc = 0.0;
    for &i in candidates {
        let p = (0..n).map(|r| probs[r * e + i] as f64).sum::<f64>() / n as f64;
        acc += f[i] * p;
    }
    alpha * candidates.len() as f64 * acc
}
