//! Checkpoint directories.
//!
//! ```text
//! model.json       configuration, expert allocation, vocabulary fingerprint
//! manifest.json    [{name, shape, offset}] with offsets in bytes into params.bin
//! params.bin       little-endian f32 parameters
//! trainstate.json  step, seed, language scheduler, best validation record (optional)
//! trainstate.bin   Adam moments, little-endian f32 (optional)
//! ```

use std::path::Path;

use plmoe_core::model::{param_specs, Model, ModelConfig, ParamStore};
use plmoe_core::moe::ExpertAllocation;
use plmoe_core::tensor::Tensor;
use plmoe_core::train::{AdamState, TrainConfig, TrainerState};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_json, write_bytes, write_json};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub config: ModelConfig,
    pub allocation: Option<ExpertAllocation>,
    #[serde(default)]
    pub vocab_fingerprint: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainStateFile {
    pub state: TrainerState,
    pub config: TrainConfig,
    /// Which parameters carry Adam moments in trainstate.bin.
    pub has_moments: Vec<bool>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub vocab_fingerprint: Option<String>,
    pub train: Option<(TrainStateFile, AdamState)>,
}

fn f32_bytes(out: &mut Vec<u8>, xs: &[f32]) {
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

fn read_f32s(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn save(
    dir: &Path,
    model: &Model,
    vocab_fingerprint: Option<&str>,
    train: Option<(&TrainerState, &TrainConfig, &AdamState)>,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_json(
        &dir.join("model.json"),
        &ModelFile {
            config: model.config().clone(),
            allocation: model.allocation().cloned(),
            vocab_fingerprint: vocab_fingerprint.map(str::to_string),
        },
    )?;
    let mut manifest = Vec::new();
    let mut bytes = Vec::with_capacity(model.params().numel() * 4);
    for (name, t) in model.params().iter() {
        manifest.push(ManifestEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset: bytes.len() as u64,
        });
        f32_bytes(&mut bytes, t.data());
    }
    write_json(&dir.join("manifest.json"), &manifest)?;
    write_bytes(&dir.join("params.bin"), &bytes)?;
    let (sj, sb) = (dir.join("trainstate.json"), dir.join("trainstate.bin"));
    match train {
        Some((state, config, adam)) => {
            let mut bytes = Vec::new();
            for (m, v) in adam.m.iter().zip(&adam.v) {
                if let (Some(m), Some(v)) = (m, v) {
                    f32_bytes(&mut bytes, m);
                    f32_bytes(&mut bytes, v);
                }
            }
            let has_moments = adam.m.iter().map(Option::is_some).collect();
            write_json(
                &sj,
                &TrainStateFile {
                    state: state.clone(),
                    config: config.clone(),
                    has_moments,
                },
            )?;
            write_bytes(&sb, &bytes)?;
        }
        None => {
            for p in [&sj, &sb] {
                if p.exists() {
                    std::fs::remove_file(p).map_err(|e| Error::io(p, e))?;
                }
            }
        }
    }
    Ok(())
}

pub fn load(dir: &Path) -> Result<Checkpoint> {
    if !dir.is_dir() {
        return Err(Error::Missing(dir.to_path_buf()));
    }
    let mf: ModelFile = read_json(&dir.join("model.json"))?;
    let specs = param_specs(&mf.config);
    let manifest: Vec<ManifestEntry> = read_json(&dir.join("manifest.json"))?;
    let bin = dir.join("params.bin");
    let bytes = read_bytes(&bin)?;
    let expected: usize = specs.iter().map(|s| s.shape.iter().product::<usize>() * 4).sum();
    if bytes.len() != expected {
        return Err(Error::parse(
            &bin,
            0,
            format!("expected {expected} bytes for the configured model, found {}", bytes.len()),
        ));
    }
    let mut tensors = Vec::with_capacity(manifest.len());
    for e in &manifest {
        let n: usize = e.shape.iter().product();
        let start = e.offset as usize;
        let slice = bytes
            .get(start..start + n * 4)
            .ok_or_else(|| Error::parse(&bin, 0, format!("`{}` lies outside params.bin", e.name)))?;
        tensors.push((e.name.clone(), Tensor::new(e.shape.clone(), read_f32s(slice))?));
    }
    let store = ParamStore::from_tensors(&specs, tensors)?;
    let model = Model::from_store(mf.config, mf.allocation, store)?;
    let sj = dir.join("trainstate.json");
    let train = if sj.exists() {
        let ts: TrainStateFile = read_json(&sj)?;
        let sb = dir.join("trainstate.bin");
        let raw = read_f32s(&read_bytes(&sb)?);
        if ts.has_moments.len() != model.params().len() {
            return Err(Error::parse(&sj, 0, "moment flags do not match the parameter count"));
        }
        let mut adam = AdamState::new(model.params().len());
        let mut at = 0;
        for (i, &has) in ts.has_moments.iter().enumerate() {
            if has {
                let n = model.params().get(i).numel();
                if raw.len() < at + 2 * n {
                    return Err(Error::parse(&sb, 0, "truncated optimizer state"));
                }
                adam.m[i] = Some(raw[at..at + n].to_vec());
                adam.v[i] = Some(raw[at + n..at + 2 * n].to_vec());
                at += 2 * n;
            }
        }
        if at != raw.len() {
            return Err(Error::parse(&sb, 0, "trailing bytes in optimizer state"));
        }
        Some((ts, adam))
    } else {
        None
    };
    Ok(Checkpoint {
        model,
        vocab_fingerprint: mf.vocab_fingerprint,
        train,
    })
}

/// Raw parameter bytes, for bit-exact comparisons.
pub fn param_bytes(model: &Model) -> Vec<u8> {
    let mut out = Vec::new();
    for (_, t) in model.params().iter() {
        f32_bytes(&mut out, t.data());
    }
    out
}
