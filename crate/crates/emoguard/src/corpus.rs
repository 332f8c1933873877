//! On-disk corpus: `manifest.json` plus one flat little-endian `f32` file per
//! utterance and modality, row-major `[frames, dim]`.

use std::fs;
use std::path::Path;

use emoguard_core::data::{EmotionClass, Gender, GenConfig, UtteranceSample};
use emoguard_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    /// Generator settings, when the corpus is synthetic.
    pub generator: Option<GenConfig>,
    pub utterances: Vec<UtteranceEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceEntry {
    pub utterance_id: u32,
    pub speaker_id: u32,
    pub gender: Gender,
    pub activation: EmotionClass,
    pub valence: EmotionClass,
    pub activation_rating: f64,
    pub valence_rating: f64,
    pub acoustic_shape: [usize; 2],
    pub lexical_shape: [usize; 2],
}

fn feature_file(id: u32, modality: &str) -> String {
    format!("{id:06}.{modality}.f32")
}

fn shape2(t: &Tensor) -> Result<[usize; 2]> {
    match t.shape() {
        &[r, c] => Ok([r, c]),
        other => Err(Error::Corpus(format!("feature tensor has shape {other:?}, expected 2-D"))),
    }
}

fn write_f32(path: &Path, t: &Tensor) -> Result<()> {
    let bytes: Vec<u8> = t.data().iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
    fs::write(path, bytes).map_err(Error::io(path))
}

fn read_f32(path: &Path, shape: [usize; 2]) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(Error::io(path))?;
    let n = shape[0] * shape[1];
    if bytes.len() != 4 * n {
        return Err(Error::Corpus(format!(
            "{} holds {} bytes, manifest shape {shape:?} needs {}",
            path.display(),
            bytes.len(),
            4 * n
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
        .collect();
    Tensor::new(shape.to_vec(), data).map_err(|e| Error::Corpus(format!("{}: {e}", path.display())))
}

pub fn save_corpus(dir: &Path, corpus: &[UtteranceSample], generator: Option<&GenConfig>) -> Result<()> {
    fs::create_dir_all(dir).map_err(Error::io(dir))?;
    let mut utterances = Vec::with_capacity(corpus.len());
    for s in corpus {
        write_f32(&dir.join(feature_file(s.utterance_id, "acoustic")), &s.acoustic)?;
        write_f32(&dir.join(feature_file(s.utterance_id, "lexical")), &s.lexical)?;
        utterances.push(UtteranceEntry {
            utterance_id: s.utterance_id,
            speaker_id: s.speaker_id,
            gender: s.gender,
            activation: s.activation,
            valence: s.valence,
            activation_rating: s.activation_rating,
            valence_rating: s.valence_rating,
            acoustic_shape: shape2(&s.acoustic)?,
            lexical_shape: shape2(&s.lexical)?,
        });
    }
    let manifest = CorpusManifest {
        generator: generator.cloned(),
        utterances,
    };
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).map_err(Error::json(&path))?;
    fs::write(&path, text).map_err(Error::io(&path))
}

pub fn load_corpus(dir: &Path) -> Result<(Vec<UtteranceSample>, CorpusManifest)> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(Error::io(&path))?;
    let manifest: CorpusManifest = serde_json::from_str(&text).map_err(Error::json(&path))?;
    let mut corpus = Vec::with_capacity(manifest.utterances.len());
    for u in &manifest.utterances {
        corpus.push(UtteranceSample {
            utterance_id: u.utterance_id,
            speaker_id: u.speaker_id,
            gender: u.gender,
            activation: u.activation,
            valence: u.valence,
            activation_rating: u.activation_rating,
            valence_rating: u.valence_rating,
            acoustic: read_f32(&dir.join(feature_file(u.utterance_id, "acoustic")), u.acoustic_shape)?,
            lexical: read_f32(&dir.join(feature_file(u.utterance_id, "lexical")), u.lexical_shape)?,
        });
    }
    Ok((corpus, manifest))
}
