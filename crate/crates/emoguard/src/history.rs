use std::fs;
use std::io::Write;
use std::path::Path;

use emoguard_core::train::{EpochRecord, TrainHistory};

use crate::error::{Error, Result};

/// One JSON object per epoch, in epoch order.
pub fn history_jsonl(history: &TrainHistory) -> Result<String> {
    let mut out = String::new();
    for e in &history.epochs {
        out.push_str(&serde_json::to_string(e).map_err(Error::json("<history>"))?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_history(path: &Path, history: &TrainHistory) -> Result<()> {
    let mut f = fs::File::create(path).map_err(Error::io(path))?;
    f.write_all(history_jsonl(history)?.as_bytes()).map_err(Error::io(path))
}

pub fn read_history(path: &Path) -> Result<Vec<EpochRecord>> {
    let text = fs::read_to_string(path).map_err(Error::io(path))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::json(path)))
        .collect()
}
