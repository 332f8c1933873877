//! Checkpoints: `checkpoint.json` with the spec, tensor names and shapes,
//! plus one flat little-endian `f64` sidecar per tensor.

use std::fs;
use std::path::Path;

use emoguard_core::model::{Model, ModelParams, ModelSpec};
use emoguard_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MANIFEST: &str = "checkpoint.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub spec: ModelSpec,
    /// Speaker ids the speaker head was built for, in class order.
    pub speakers: Vec<u32>,
    pub train_utterances: Vec<u32>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
}

pub fn save_checkpoint(model: &Model, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(Error::io(dir))?;
    let params = model.params();
    let mut tensors = Vec::with_capacity(params.tensors.len());
    for (i, (name, t)) in params.names.iter().zip(&params.tensors).enumerate() {
        let file = format!("tensor_{i:03}.f64");
        let bytes: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
        let path = dir.join(&file);
        fs::write(&path, bytes).map_err(Error::io(&path))?;
        tensors.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            file,
        });
    }
    let manifest = CheckpointManifest {
        spec: model.spec().clone(),
        speakers: model.speakers().to_vec(),
        train_utterances: model.train_utterances.clone(),
        tensors,
    };
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).map_err(Error::json(&path))?;
    fs::write(&path, text).map_err(Error::io(&path))
}

pub fn load_checkpoint(dir: &Path) -> Result<Model> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(Error::io(&path))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text).map_err(Error::json(&path))?;
    let mut names = Vec::with_capacity(manifest.tensors.len());
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for e in &manifest.tensors {
        let p = dir.join(&e.file);
        let bytes = fs::read(&p).map_err(Error::io(&p))?;
        let n: usize = e.shape.iter().product();
        if bytes.len() != 8 * n {
            return Err(Error::Checkpoint(format!(
                "{} holds {} bytes, shape {:?} of {} needs {}",
                p.display(),
                bytes.len(),
                e.shape,
                e.name,
                8 * n
            )));
        }
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        let t = Tensor::new(e.shape.clone(), data).map_err(|err| Error::Checkpoint(format!("{}: {err}", e.name)))?;
        names.push(e.name.clone());
        tensors.push(t);
    }
    Model::from_params(
        manifest.spec,
        manifest.speakers,
        ModelParams { names, tensors },
        manifest.train_utterances,
    )
    .map_err(|e| Error::Checkpoint(e.to_string()))
}
