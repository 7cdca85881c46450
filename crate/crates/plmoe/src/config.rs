//! Run configuration: JSON files with flat dotted keys (`training.steps`),
//! overridable by `--set key=value`. Nested objects are accepted too and
//! flattened on load. Unknown keys are rejected.

use std::collections::BTreeMap;
use std::path::Path;

use plmoe_core::corpus::{CorpusConfig, Languages, PlId, SplitMode};
use plmoe_core::model::ModelConfig;
use plmoe_core::synthetic::SyntheticSpec;
use plmoe_core::train::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::io::read_to_string;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitKind {
    Full,
    LowResource,
    CrossDomain,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSection {
    pub languages: Vec<String>,
    pub natural_languages: Vec<String>,
    pub string_literals: usize,
    pub number_literals: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    pub bidirectional: bool,
    pub split_mode: SplitKind,
    /// low_resource: language whose train split is downsampled.
    pub split_target: String,
    /// low_resource: language whose train count is matched.
    pub split_reference: String,
    /// cross_domain: language removed from the train split.
    pub split_excluded: String,
    /// Named-entity literal patterns (`*` wildcard).
    pub entities: Vec<String>,
}

impl Default for CorpusSection {
    fn default() -> Self {
        let c = CorpusConfig::default();
        Self {
            languages: c.languages.programming,
            natural_languages: c.languages.natural,
            string_literals: c.string_literals,
            number_literals: c.number_literals,
            vocab_size: c.vocab_size,
            max_seq: c.max_seq,
            bidirectional: c.bidirectional,
            split_mode: SplitKind::Full,
            split_target: String::new(),
            split_reference: String::new(),
            split_excluded: String::new(),
            entities: c.entities,
        }
    }
}

impl CorpusSection {
    pub fn to_core(&self) -> Result<CorpusConfig> {
        let need = |k: &str, v: &str| {
            if v.is_empty() {
                Err(Error::config(format!("corpus.{k} is required for this split mode")))
            } else {
                Ok(PlId::new(v))
            }
        };
        let split = match self.split_mode {
            SplitKind::Full => SplitMode::Full,
            SplitKind::LowResource => SplitMode::LowResource {
                target: need("split_target", &self.split_target)?,
                reference: need("split_reference", &self.split_reference)?,
            },
            SplitKind::CrossDomain => SplitMode::CrossDomain {
                excluded: need("split_excluded", &self.split_excluded)?,
            },
        };
        let c = CorpusConfig {
            languages: Languages {
                programming: self.languages.clone(),
                natural: self.natural_languages.clone(),
            },
            string_literals: self.string_literals,
            number_literals: self.number_literals,
            vocab_size: self.vocab_size,
            max_seq: self.max_seq,
            bidirectional: self.bidirectional,
            split,
            entities: self.entities.clone(),
        };
        c.validate()?;
        Ok(c)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AllocationSection {
    /// Minimum experts per language-specific group for the size heuristic.
    pub min_per_pl: usize,
}

impl Default for AllocationSection {
    fn default() -> Self {
        Self { min_per_pl: 2 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationSection {
    /// Documents per forward pass.
    pub micro_batch_size: usize,
}

impl Default for EvaluationSection {
    fn default() -> Self {
        Self { micro_batch_size: 8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds splitting, initialization, batching, dropout and generation.
    pub seed: u64,
    pub corpus: CorpusSection,
    pub model: ModelConfig,
    pub training: TrainConfig,
    pub finetune: TrainConfig,
    pub allocation: AllocationSection,
    pub evaluation: EvaluationSection,
    pub synthetic: SyntheticSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            corpus: CorpusSection::default(),
            model: ModelConfig::default(),
            training: TrainConfig::default(),
            finetune: TrainConfig::finetune(),
            allocation: AllocationSection::default(),
            evaluation: EvaluationSection::default(),
            synthetic: SyntheticSpec::default(),
        }
    }
}

/// Leaves are non-objects and empty objects (maps), so map-valued keys
/// such as `synthetic.scale` stay single keys.
fn flatten_into(prefix: &str, v: &Value, out: &mut BTreeMap<String, Value>) {
    match v {
        Value::Object(m) if !m.is_empty() => {
            for (k, x) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten_into(&key, x, out);
            }
        }
        _ => {
            out.insert(prefix.to_string(), v.clone());
        }
    }
}

fn unflatten(flat: &BTreeMap<String, Value>) -> Value {
    let mut root = Map::new();
    for (key, v) in flat {
        let parts: Vec<&str> = key.split('.').collect();
        let mut node = &mut root;
        for p in &parts[..parts.len() - 1] {
            node = node
                .entry(p.to_string())
                .or_insert_with(|| Value::Object(Map::new()))
                .as_object_mut()
                .expect("intermediate keys are objects");
        }
        node.insert(parts[parts.len() - 1].to_string(), v.clone());
    }
    Value::Object(root)
}

impl RunConfig {
    /// Leaf keys as laid out by the defaults.
    fn leaves() -> BTreeMap<String, Value> {
        let mut out = BTreeMap::new();
        flatten_into("", &serde_json::to_value(Self::default()).expect("config serializes"), &mut out);
        out
    }

    pub fn to_flat(&self) -> BTreeMap<String, Value> {
        let mut out = BTreeMap::new();
        let v = serde_json::to_value(self).expect("config serializes");
        flatten_file("", &v, &Self::leaves(), &mut out).expect("config keys match the defaults");
        out
    }

    /// Applies `overrides` to the defaults. Every key must be known.
    pub fn from_overrides(overrides: &BTreeMap<String, Value>) -> Result<Self> {
        let mut flat = Self::leaves();
        for (k, v) in overrides {
            match flat.get_mut(k) {
                Some(slot) => *slot = v.clone(),
                None => return Err(Error::config(format!("unknown key `{k}`"))),
            }
        }
        serde_json::from_value(unflatten(&flat)).map_err(|e| Error::config(e.to_string()))
    }

    /// Reads an optional config file and applies `key=value` overrides.
    /// Values parse as JSON when possible and as plain strings otherwise.
    pub fn load(path: Option<&Path>, sets: &[String]) -> Result<Self> {
        let known = Self::leaves();
        let mut overrides = BTreeMap::new();
        if let Some(p) = path {
            let v: Value = serde_json::from_str(&read_to_string(p)?).map_err(|e| Error::parse(p, e.line(), e))?;
            if !v.is_object() {
                return Err(Error::parse(p, 1, "configuration must be a JSON object"));
            }
            flatten_file("", &v, &known, &mut overrides)?;
        }
        for s in sets {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| Error::config(format!("`--set {s}` is not of the form key=value")))?;
            let v = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
            overrides.insert(k.trim().to_string(), v);
        }
        Self::from_overrides(&overrides)
    }

    pub fn dump(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.to_flat()).expect("flat config serializes");
        s.push('\n');
        s
    }

    /// Copies the run seed into every component that owns a seed.
    pub fn propagate_seed(&mut self) {
        self.training.seed = self.seed;
        self.finetune.seed = self.seed;
        self.synthetic.seed = self.seed;
    }
}

fn flatten_file(
    prefix: &str,
    v: &Value,
    known: &BTreeMap<String, Value>,
    out: &mut BTreeMap<String, Value>,
) -> Result<()> {
    if !prefix.is_empty() && known.contains_key(prefix) {
        out.insert(prefix.to_string(), shortest_float(v));
        return Ok(());
    }
    match v {
        Value::Object(m) => {
            for (k, x) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten_file(&key, x, known, out)?;
            }
            Ok(())
        }
        _ => Err(Error::config(format!("unknown key `{prefix}`"))),
    }
}

/// f32 fields widen to f64 with noise digits (0.1 -> 0.10000000149011612);
/// print those in their shortest f32 form, which reads back identically.
fn shortest_float(v: &Value) -> Value {
    match v.as_f64() {
        Some(x) if v.is_f64() && (x as f32) as f64 == x => {
            let short: f64 = (x as f32).to_string().parse().expect("float display parses");
            serde_json::Number::from_f64(short).map_or_else(|| v.clone(), Value::Number)
        }
        _ => v.clone(),
    }
}

/// `key = default` lines for the given top-level sections.
pub fn keys_help(sections: &[&str]) -> String {
    let mut s = String::from("Configuration keys (--config file or --set key=value):\n");
    for (k, v) in RunConfig::default().to_flat() {
        let section = k.split('.').next().unwrap_or("");
        if sections.contains(&section) {
            s.push_str(&format!("  {k} = {v}\n"));
        }
    }
    s
}
