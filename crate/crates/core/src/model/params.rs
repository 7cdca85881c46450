use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::rng::{CounterRng, Purpose};
use crate::tensor::{Graph, Tensor, Var};

/// Initialization rule of one parameter.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f32),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

fn spec(name: String, shape: &[usize], init: Init) -> ParamSpec {
    ParamSpec {
        name,
        shape: shape.to_vec(),
        init,
    }
}

fn ffn_specs(out: &mut Vec<ParamSpec>, prefix: &str, h: usize, m: usize) {
    out.push(spec(alloc::format!("{prefix}.w1"), &[h, m], Init::Normal(0.02)));
    out.push(spec(alloc::format!("{prefix}.b1"), &[m], Init::Zeros));
    out.push(spec(alloc::format!("{prefix}.w2"), &[m, h], Init::Normal(0.02)));
    out.push(spec(alloc::format!("{prefix}.b2"), &[h], Init::Zeros));
}

/// Ordered parameter list of a configuration.
pub fn param_specs(c: &ModelConfig) -> Vec<ParamSpec> {
    let (h, m) = (c.hidden, c.inner());
    let mut v = vec![
        spec("wte".into(), &[c.vocab_size, h], Init::Normal(0.02)),
        spec("wpe".into(), &[c.max_seq, h], Init::Normal(0.02)),
    ];
    for l in 0..c.l_total {
        let p = alloc::format!("h.{l}");
        v.push(spec(alloc::format!("{p}.ln1.g"), &[h], Init::Ones));
        v.push(spec(alloc::format!("{p}.ln1.b"), &[h], Init::Zeros));
        for w in ["q", "k", "v", "o"] {
            v.push(spec(alloc::format!("{p}.attn.w{w}"), &[h, h], Init::Normal(0.02)));
            v.push(spec(alloc::format!("{p}.attn.b{w}"), &[h], Init::Zeros));
        }
        v.push(spec(alloc::format!("{p}.ln2.g"), &[h], Init::Ones));
        v.push(spec(alloc::format!("{p}.ln2.b"), &[h], Init::Zeros));
        if c.is_expert_layer(l) {
            let std = 0.02 / libm::sqrtf(h as f32);
            v.push(spec(alloc::format!("{p}.router.w"), &[h, c.experts_per_layer], Init::Normal(std)));
            for e in 0..c.experts_per_layer {
                ffn_specs(&mut v, &alloc::format!("{p}.expert.{e}"), h, m);
            }
        } else {
            ffn_specs(&mut v, &alloc::format!("{p}.ffn"), h, m);
        }
    }
    v.push(spec("ln_f.g".into(), &[h], Init::Ones));
    v.push(spec("ln_f.b".into(), &[h], Init::Zeros));
    v
}

fn name_stream(name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h >> 8
}

/// Named model parameters in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    /// Draws every parameter from its own stream keyed by name, so a
    /// parameter's initial value does not depend on which other
    /// parameters the configuration has.
    pub fn init(specs: &[ParamSpec], seed: u64) -> Self {
        let mut s = Self::empty();
        for p in specs {
            let t = match p.init {
                Init::Zeros => Tensor::zeros(&p.shape),
                Init::Ones => Tensor::full(&p.shape, 1.0),
                Init::Normal(std) => {
                    let mut rng = CounterRng::for_purpose(seed, Purpose::Init, name_stream(&p.name));
                    Tensor::from_fn(&p.shape, |_| rng.normal() * std)
                }
            };
            s.push(p.name.clone(), t);
        }
        s
    }

    fn empty() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    fn push(&mut self, name: String, t: Tensor) {
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(t);
    }

    /// Builds a store from loaded tensors, checking names and shapes
    /// against `specs`.
    pub fn from_tensors(specs: &[ParamSpec], tensors: Vec<(String, Tensor)>) -> Result<Self> {
        if specs.len() != tensors.len() {
            return Err(Error::config(alloc::format!(
                "expected {} parameters, found {}",
                specs.len(),
                tensors.len()
            )));
        }
        let mut s = Self::empty();
        for (sp, (name, t)) in specs.iter().zip(tensors) {
            if sp.name != name || sp.shape != t.shape() {
                return Err(Error::config(alloc::format!(
                    "parameter `{name}` {:?} does not match expected `{}` {:?}",
                    t.shape(),
                    sp.name,
                    sp.shape
                )));
            }
            s.push(name, t);
        }
        Ok(s)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn get(&self, id: usize) -> &Tensor {
        &self.tensors[id]
    }

    pub fn get_mut(&mut self, id: usize) -> &mut Tensor {
        &mut self.tensors[id]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|i| &self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }
}

/// Lazily records parameters as graph leaves on first use, so parameters
/// a forward pass never touches (e.g. unselected experts) stay off the
/// graph and receive no gradient.
#[derive(Debug)]
pub struct Binder {
    vars: Vec<Option<Var>>,
    trainable: bool,
}

impl Binder {
    pub fn new(store: &ParamStore, trainable: bool) -> Self {
        Self {
            vars: vec![None; store.len()],
            trainable,
        }
    }

    pub fn get(&mut self, g: &mut Graph, store: &ParamStore, id: usize) -> Var {
        if let Some(v) = self.vars[id] {
            return v;
        }
        let t = store.get(id).clone();
        let v = if self.trainable { g.param(t) } else { g.constant(t) };
        self.vars[id] = Some(v);
        v
    }

    pub fn var(&self, id: usize) -> Option<Var> {
        self.vars[id]
    }

    pub fn bound(&self) -> impl Iterator<Item = (usize, Var)> + '_ {
        self.vars
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (i, v)))
    }

    /// Adds this pass's gradients into `grads` (indexed like the store).
    /// Parameters that were never bound keep their previous entry.
    pub fn accumulate(&self, g: &mut Graph, grads: &mut [Option<Vec<f32>>]) {
        for (i, v) in self.bound() {
            if let Some(gr) = g.take_grad(v) {
                match &mut grads[i] {
                    Some(acc) => acc.iter_mut().zip(&gr).for_each(|(a, b)| *a += b),
                    slot => *slot = Some(gr),
                }
            }
        }
    }
}
