use std::fs;

use emoguard::checkpoint::{load_checkpoint, save_checkpoint, MANIFEST};
use emoguard::corpus::{load_corpus, save_corpus};
use emoguard::history::{history_jsonl, read_history};
use emoguard::Error;
use emoguard_core::data::{generate_corpus, GenConfig, Task};
use emoguard_core::model::{build_model, AdversaryTarget, Modality, ModelSpec};
use emoguard_core::train::{EpochRecord, StopReason, TrainHistory};

fn small() -> GenConfig {
    GenConfig {
        n_speakers: 4,
        utterances_per_speaker: 3,
        seq_len_range: [3, 4],
        seed: 12,
        ..GenConfig::default()
    }
}

fn read_dir_bytes(dir: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().into_string().unwrap(), fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}

#[test]
fn corpus_round_trip_keeps_labels_and_f32_values() {
    let corpus = generate_corpus(&small()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_corpus(dir.path(), &corpus, Some(&small())).unwrap();
    let (loaded, manifest) = load_corpus(dir.path()).unwrap();
    assert_eq!(manifest.generator, Some(small()));
    assert_eq!(loaded.len(), corpus.len());
    for (a, b) in corpus.iter().zip(&loaded) {
        assert_eq!((a.utterance_id, a.speaker_id, a.gender), (b.utterance_id, b.speaker_id, b.gender));
        assert_eq!((a.activation, a.valence), (b.activation, b.valence));
        assert_eq!(a.acoustic.shape(), b.acoustic.shape());
        for (x, y) in a.lexical.data().iter().zip(b.lexical.data()) {
            assert_eq!(*x as f32, *y as f32);
        }
    }
    let first = dir.path().join(format!("{:06}.acoustic.f32", corpus[0].utterance_id));
    assert_eq!(fs::metadata(&first).unwrap().len() as usize, 4 * corpus[0].acoustic.len());

    fs::write(&first, [0u8; 6]).unwrap();
    assert!(matches!(load_corpus(dir.path()), Err(Error::Corpus(_))));
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let spec = ModelSpec::private(
        Modality::Multimodal,
        Task::Valence,
        &[(AdversaryTarget::Gender, 0.5), (AdversaryTarget::Speaker, 0.3)],
    );
    let mut model = build_model(&spec, &[3, 9, 14], 77).unwrap();
    model.train_utterances = vec![1, 4, 9];
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    save_checkpoint(&model, a.path()).unwrap();
    let loaded = load_checkpoint(a.path()).unwrap();
    assert_eq!(loaded.fingerprint(), model.fingerprint());
    assert_eq!(loaded.params(), model.params());
    assert_eq!(loaded.speakers(), model.speakers());
    assert_eq!(loaded.train_utterances, model.train_utterances);
    save_checkpoint(&loaded, b.path()).unwrap();
    assert_eq!(read_dir_bytes(a.path()), read_dir_bytes(b.path()));

    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(a.path().join(MANIFEST)).unwrap()).unwrap();
    assert_eq!(manifest["tensors"].as_array().unwrap().len(), model.params().tensors.len());
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let spec = ModelSpec::gen(Modality::Lexical, Task::Activation);
    let model = build_model(&spec, &[], 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(&model, dir.path()).unwrap();

    let sidecar = dir.path().join("tensor_000.f64");
    let bytes = fs::read(&sidecar).unwrap();
    fs::write(&sidecar, &bytes[..bytes.len() - 8]).unwrap();
    assert!(matches!(load_checkpoint(dir.path()), Err(Error::Checkpoint(_))));
    fs::write(&sidecar, &bytes).unwrap();
    assert!(load_checkpoint(dir.path()).is_ok());

    let path = dir.path().join(MANIFEST);
    let mut manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    manifest["tensors"].as_array_mut().unwrap().pop();
    fs::write(&path, manifest.to_string()).unwrap();
    assert!(matches!(load_checkpoint(dir.path()), Err(Error::Checkpoint(_))));
}

#[test]
fn history_is_one_json_line_per_epoch() {
    let record = |epoch: usize, loss: f64| EpochRecord {
        epoch,
        train_loss: [("emotion".to_string(), loss + 0.1)].into(),
        val_loss: [("emotion".to_string(), loss)].into(),
        val_uar: [("emotion".to_string(), 0.5), ("gender".to_string(), 0.52)].into(),
    };
    let history = TrainHistory {
        epochs: vec![record(1, 1.0), record(2, 0.8), record(3, 0.9)],
        best_epoch: 2,
        stop_reason: StopReason::Patience,
    };
    let text = history_jsonl(&history).unwrap();
    assert_eq!(text.lines().count(), 3);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("history.jsonl");
    emoguard::history::write_history(&path, &history).unwrap();
    assert_eq!(read_history(&path).unwrap(), history.epochs);
}
