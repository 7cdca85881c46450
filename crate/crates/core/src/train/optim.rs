use alloc::vec;
use alloc::vec::Vec;

use super::{Schedule, TrainConfig};
use crate::error::{Error, Result};
use crate::model::ParamStore;

/// Linear warmup from 0 to the peak, then cosine or linear decay to 0 at
/// `steps`.
pub fn lr_at(step: u64, c: &TrainConfig) -> f32 {
    let peak = c.peak_lr as f64;
    if step < c.warmup_steps {
        return (peak * step as f64 / c.warmup_steps as f64) as f32;
    }
    if c.steps <= c.warmup_steps {
        return c.peak_lr;
    }
    let progress = ((step - c.warmup_steps) as f64 / (c.steps - c.warmup_steps) as f64).min(1.0);
    let lr = match c.schedule {
        Schedule::CosineDecay => peak * 0.5 * (1.0 + libm::cos(core::f64::consts::PI * progress)),
        Schedule::LinearDecay => peak * (1.0 - progress),
    };
    lr.max(0.0) as f32
}

/// First and second moments per parameter plus a per-parameter step
/// count. Parameters that have never received a gradient have no moments.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Option<Vec<f32>>>,
    pub v: Vec<Option<Vec<f32>>>,
    pub steps: Vec<u64>,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![None; n],
            v: vec![None; n],
            steps: vec![0; n],
        }
    }
}

/// Rescales `grads` in place so their global L2 norm is at most `max`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Option<Vec<f32>>], max: f32) -> f64 {
    let sq: f64 = grads
        .iter()
        .flatten()
        .flat_map(|g| g.iter())
        .map(|&x| (x as f64) * (x as f64))
        .sum();
    let norm = libm::sqrt(sq);
    if norm > max as f64 {
        let s = (max as f64 / (norm + 1e-6)) as f32;
        for g in grads.iter_mut().flatten() {
            g.iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

/// One Adam update with bias correction and decoupled weight decay
/// (`p ← p − lr·wd·p`). Parameters whose gradient is `None` are left
/// untouched, including their moments and step count.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &[Option<Vec<f32>>],
    state: &mut AdamState,
    lr: f32,
    c: &TrainConfig,
) -> Result<()> {
    for (i, g) in grads.iter().enumerate() {
        if let Some(g) = g {
            if let Some(j) = g.iter().position(|x| !x.is_finite()) {
                return Err(Error::NonFiniteGradient(alloc::format!(
                    "{}[{j}] = {}",
                    params.name(i),
                    g[j]
                )));
            }
        }
    }
    let (b1, b2) = (c.beta1 as f64, c.beta2 as f64);
    for (i, g) in grads.iter().enumerate() {
        let Some(g) = g else { continue };
        state.steps[i] += 1;
        let t = state.steps[i] as i32;
        let bc1 = 1.0 - libm::pow(b1, t as f64);
        let bc2 = 1.0 - libm::pow(b2, t as f64);
        let m = state.m[i].get_or_insert_with(|| vec![0.0; g.len()]);
        let v = state.v[i].get_or_insert_with(|| vec![0.0; g.len()]);
        let p = params.get_mut(i).data_mut();
        let decay = 1.0 - lr as f64 * c.weight_decay as f64;
        for j in 0..g.len() {
            let gj = g[j] as f64;
            let mj = b1 * m[j] as f64 + (1.0 - b1) * gj;
            let vj = b2 * v[j] as f64 + (1.0 - b2) * gj * gj;
            m[j] = mj as f32;
            v[j] = vj as f32;
            let update = (mj / bc1) / (libm::sqrt(vj / bc2) + c.eps as f64);
            p[j] = (p[j] as f64 * decay - lr as f64 * update) as f32;
        }
    }
    Ok(())
}
