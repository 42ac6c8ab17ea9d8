//! Checkpoint directory: `manifest.json`, `params.bin`, `moments.bin` and
//! `vocab.json`. Binary files hold little-endian f32 values, row-major, in
//! manifest parameter order; `moments.bin` holds every first moment, then
//! every second moment (empty for SGD).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{OptimizerKind, OptimizerState, TrainConfig, TrainState};
use crate::autodiff::Tensor;
use crate::data::Vocab;
use crate::error::{Error, Result};
use crate::model::{param_specs, ModelConfig, ModelParams, Param, ParamGroup};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamEntry {
    pub name: String,
    pub group: ParamGroup,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Full run configuration, echoed verbatim.
    pub config: serde_json::Value,
    pub params: Vec<ParamEntry>,
    pub vocab_sha256: String,
    pub params_sha256: String,
    pub moments_sha256: String,
    pub optimizer: OptimizerKind,
    pub optimizer_t: u64,
    pub epoch: usize,
    pub step: usize,
    pub best_dev_f1: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub state: TrainState,
    pub vocab: Vocab,
}

fn sha256(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn encode<'a>(tensors: impl Iterator<Item = &'a Tensor>) -> Vec<u8> {
    tensors
        .flat_map(|t| t.data().iter().flat_map(|v| v.to_le_bytes()))
        .collect()
}

fn decode(bytes: &[u8], shapes: &[Vec<usize>], what: &str) -> Result<Vec<Tensor>> {
    let expected: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum::<usize>() * 4;
    if bytes.len() != expected {
        return Err(Error::Integrity(format!(
            "{what} holds {} bytes, manifest shapes need {expected}",
            bytes.len()
        )));
    }
    let mut values = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
    shapes
        .iter()
        .map(|s| {
            let n = s.iter().product();
            Tensor::new(values.by_ref().take(n).collect(), s.clone())
        })
        .collect()
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Writes `state` to `dir`, creating it if needed. Output bytes depend only
/// on the arguments.
pub fn save_checkpoint(
    dir: impl AsRef<Path>,
    state: &TrainState,
    model: &ModelConfig,
    train: &TrainConfig,
    vocab: &Vocab,
    config: &serde_json::Value,
) -> Result<Manifest> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    state.params.check_layout(model)?;
    let params = encode(state.params.params.iter().map(|p| &p.value));
    let moments = encode(state.optimizer.first.iter().chain(&state.optimizer.second));
    let vocab_json = serde_json::to_vec_pretty(vocab)?;
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        model: model.clone(),
        train: train.clone(),
        config: config.clone(),
        params: state
            .params
            .params
            .iter()
            .map(|p| ParamEntry {
                name: p.name.clone(),
                group: p.group,
                shape: p.value.shape().to_vec(),
            })
            .collect(),
        vocab_sha256: vocab.content_hash(),
        params_sha256: sha256(&params),
        moments_sha256: sha256(&moments),
        optimizer: state.optimizer.kind,
        optimizer_t: state.optimizer.t,
        epoch: state.epoch,
        step: state.step,
        best_dev_f1: state.best_dev_f1,
    };
    write(&dir.join("params.bin"), &params)?;
    write(&dir.join("moments.bin"), &moments)?;
    write(&dir.join("vocab.json"), &vocab_json)?;
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    write(&dir.join("manifest.json"), text.as_bytes())?;
    Ok(manifest)
}

/// Reads and verifies a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<Checkpoint> {
    let dir = dir.as_ref();
    let manifest_path = dir.join("manifest.json");
    let manifest: Manifest = serde_json::from_slice(&read(&manifest_path)?)
        .map_err(|e| Error::Integrity(format!("{}: {e}", manifest_path.display())))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Integrity(format!(
            "unsupported checkpoint format {} (expected {FORMAT_VERSION})",
            manifest.format_version
        )));
    }
    manifest.model.validate()?;

    let expected = param_specs(&manifest.model);
    if expected.len() != manifest.params.len() {
        return Err(Error::Integrity(format!(
            "manifest lists {} parameters, the model config needs {}",
            manifest.params.len(),
            expected.len()
        )));
    }
    for (entry, (name, group, shape)) in manifest.params.iter().zip(&expected) {
        if &entry.name != name || &entry.group != group || &entry.shape != shape {
            return Err(Error::Integrity(format!(
                "manifest entry {} {:?} does not match expected {name} {shape:?}",
                entry.name, entry.shape
            )));
        }
    }

    let vocab: Vocab = serde_json::from_slice(&read(&dir.join("vocab.json"))?)
        .map_err(|e| Error::Integrity(format!("vocab.json: {e}")))?;
    if vocab.content_hash() != manifest.vocab_sha256 {
        return Err(Error::Integrity("vocab.json does not match the manifest hash".into()));
    }

    let params_bytes = read(&dir.join("params.bin"))?;
    if sha256(&params_bytes) != manifest.params_sha256 {
        return Err(Error::Integrity("params.bin does not match the manifest hash".into()));
    }
    let moments_bytes = read(&dir.join("moments.bin"))?;
    if sha256(&moments_bytes) != manifest.moments_sha256 {
        return Err(Error::Integrity("moments.bin does not match the manifest hash".into()));
    }

    let shapes: Vec<Vec<usize>> = manifest.params.iter().map(|p| p.shape.clone()).collect();
    let values = decode(&params_bytes, &shapes, "params.bin")?;
    let params = ModelParams {
        params: manifest
            .params
            .iter()
            .zip(values)
            .map(|(e, value)| Param {
                name: e.name.clone(),
                group: e.group,
                value,
            })
            .collect(),
    };
    let (first, second) = match manifest.optimizer {
        OptimizerKind::Sgd => {
            decode(&moments_bytes, &[], "moments.bin")?;
            (Vec::new(), Vec::new())
        }
        OptimizerKind::Adam => {
            let both: Vec<Vec<usize>> = shapes.iter().chain(&shapes).cloned().collect();
            let mut m = decode(&moments_bytes, &both, "moments.bin")?;
            let v = m.split_off(shapes.len());
            (m, v)
        }
    };
    let state = TrainState {
        params,
        optimizer: OptimizerState {
            kind: manifest.optimizer,
            t: manifest.optimizer_t,
            first,
            second,
        },
        epoch: manifest.epoch,
        step: manifest.step,
        best_dev_f1: manifest.best_dev_f1,
    };
    Ok(Checkpoint { manifest, state, vocab })
}
