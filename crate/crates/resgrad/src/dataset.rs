//! JSONL datasets: one `{"input": {...}, "gold": {...}}` record per line.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::context::Context;
use crate::reward::GoldSpec;

/// One task: the input fields handed to the pipeline and the scoring rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub input: Context,
    pub gold: GoldSpec,
}

/// Error raised when a dataset file cannot be loaded.
#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("cannot read dataset `{path}`: {source}")]
    Read {
        path: String,
        source: std::io::Error,
    },
    #[error("dataset `{path}` line {line} is not a valid example: {source}")]
    Parse {
        path: String,
        line: usize,
        source: serde_json::Error,
    },
}

/// Loads a JSONL dataset. Blank lines are allowed; malformed lines fail with
/// their line number rather than being skipped, because silently dropping
/// training examples would bias every downstream measurement.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<Example>, DatasetError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| DatasetError::Read {
        path: path.display().to_string(),
        source,
    })?;
    let mut examples = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let example = serde_json::from_str(line).map_err(|source| DatasetError::Parse {
            path: path.display().to_string(),
            line: idx + 1,
            source,
        })?;
        examples.push(example);
    }
    Ok(examples)
}

/// Serializes examples to the JSONL file form.
pub fn save_dataset(examples: &[Example], path: impl AsRef<Path>) -> Result<(), DatasetError> {
    let path = path.as_ref();
    let mut out = String::new();
    for example in examples {
        out.push_str(&serde_json::to_string(example).expect("example serialization cannot fail"));
        out.push('\n');
    }
    fs::write(path, out).map_err(|source| DatasetError::Read {
        path: path.display().to_string(),
        source,
    })
}
