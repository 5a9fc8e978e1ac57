//! Versioned persistence for [`PaperTree`] indexes.
//!
//! The on-disk format is a single self-describing JSON document:
//! `{version, doc_title, outline, leaves, section_index}` with
//! embeddings as plain number arrays. Serialization is deterministic,
//! and `load(save(t)) == t` exactly (JSON f64 round-trips losslessly).

use std::fs;
use std::path::Path;

use serde_json::Value;
use thiserror::Error;

use crate::tree::PaperTree;

pub const FORMAT_VERSION: u64 = 1;

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("cannot {action} {path}: {source}")]
    Io {
        action: &'static str,
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("unsupported index version {found} (expected {FORMAT_VERSION})")]
    Version { found: String },
    #[error("corrupt index: {0}")]
    Corrupt(String),
}

/// Write the index as pretty-printed JSON. Output bytes are identical
/// for identical trees.
pub fn save_index(tree: &PaperTree, location: &Path) -> Result<(), IndexError> {
    let bytes = index_bytes(tree);
    fs::write(location, bytes).map_err(|source| IndexError::Io {
        action: "write",
        path: location.display().to_string(),
        source,
    })
}

/// Serialized form of the index, exposed so callers can compare or hash
/// without touching the filesystem.
pub fn index_bytes(tree: &PaperTree) -> Vec<u8> {
    let mut value = serde_json::to_value(tree).expect("index serializes");
    let map = value.as_object_mut().expect("index is an object");
    map.insert("version".to_string(), Value::from(FORMAT_VERSION));
    let mut bytes = serde_json::to_vec_pretty(&value).expect("index serializes");
    bytes.push(b'\n');
    bytes
}

pub fn load_index(location: &Path) -> Result<PaperTree, IndexError> {
    let text = fs::read_to_string(location).map_err(|source| IndexError::Io {
        action: "read",
        path: location.display().to_string(),
        source,
    })?;
    let value: Value =
        serde_json::from_str(&text).map_err(|e| IndexError::Corrupt(format!("bad JSON: {e}")))?;
    match &value["version"] {
        Value::Number(n) if n.as_u64() == Some(FORMAT_VERSION) => {}
        Value::Null => return Err(IndexError::Corrupt("missing field `version`".into())),
        other => {
            return Err(IndexError::Version {
                found: other.to_string(),
            })
        }
    }
    let tree: PaperTree = serde_json::from_value(value)
        .map_err(|e| IndexError::Corrupt(format!("bad field: {e}")))?;
    tree.validate().map_err(IndexError::Corrupt)?;
    Ok(tree)
}
