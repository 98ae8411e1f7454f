//! JSONL store of feature descriptions, keyed by the checkpoint they were
//! produced from.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SaeError};
use crate::io::write_atomic;

use super::FeatureRecord;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoredDescription {
    pub feature: usize,
    pub description: String,
    pub raw: String,
    pub top_ids: Vec<u64>,
    /// SHA-256 of the checkpoint file.
    pub checkpoint: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DescriptionStore {
    checkpoint: String,
    entries: BTreeMap<usize, StoredDescription>,
}

impl DescriptionStore {
    pub fn new(checkpoint: impl Into<String>) -> Self {
        DescriptionStore {
            checkpoint: checkpoint.into(),
            entries: BTreeMap::new(),
        }
    }

    pub fn checkpoint(&self) -> &str {
        &self.checkpoint
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, feature: usize) -> Option<&StoredDescription> {
        self.entries.get(&feature)
    }

    pub fn iter(&self) -> impl Iterator<Item = &StoredDescription> {
        self.entries.values()
    }

    /// Add a described record, replacing any previous entry for the feature.
    pub fn insert(&mut self, record: &FeatureRecord) -> Result<()> {
        let (Some(description), Some(raw)) = (&record.description, &record.raw_describer_output)
        else {
            return Err(SaeError::Pipeline(format!(
                "feature {} has not been described",
                record.index
            )));
        };
        self.entries.insert(
            record.index,
            StoredDescription {
                feature: record.index,
                description: description.clone(),
                raw: raw.clone(),
                top_ids: record.top_examples.iter().map(|&(id, _)| id).collect(),
                checkpoint: self.checkpoint.clone(),
            },
        );
        Ok(())
    }

    /// Feature → description map for report prompts.
    pub fn descriptions(&self) -> HashMap<usize, String> {
        self.entries
            .iter()
            .map(|(&i, e)| (i, e.description.clone()))
            .collect()
    }

    /// Write one line per feature, ascending by index.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        for entry in self.entries.values() {
            serde_json::to_writer(&mut buf, entry)?;
            buf.write_all(b"\n")?;
        }
        write_atomic(path, &buf)
    }

    /// Load a store; every line must carry `checkpoint`. Descriptions made
    /// for a different checkpoint are rejected, since feature indices are
    /// not stable across training runs.
    pub fn load(path: &Path, checkpoint: &str) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut store = DescriptionStore::new(checkpoint);
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let entry: StoredDescription = serde_json::from_str(line).map_err(|e| {
                SaeError::Pipeline(format!("{}:{}: {e}", path.display(), lineno + 1))
            })?;
            if entry.checkpoint != checkpoint {
                return Err(SaeError::Pipeline(format!(
                    "{}:{}: description of feature {} belongs to checkpoint {}, expected {checkpoint}",
                    path.display(),
                    lineno + 1,
                    entry.feature,
                    entry.checkpoint
                )));
            }
            store.entries.insert(entry.feature, entry);
        }
        Ok(store)
    }
}
