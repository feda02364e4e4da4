//! JSONL dataset readers.
//!
//! Caption and SFT files share one schema, `{"image", "prompt", "response"}`;
//! DPO source files carry `{"image", "prompt", "original", "edited"}`.
//! Malformed lines are skipped with a line-numbered warning.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    Caption,
    Sft,
    Dpo,
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "caption" => Ok(DatasetKind::Caption),
            "sft" => Ok(DatasetKind::Sft),
            "dpo" => Ok(DatasetKind::Dpo),
            other => Err(Error::Config(format!("unknown dataset kind {other:?}"))),
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DatasetKind::Caption => "caption",
            DatasetKind::Sft => "sft",
            DatasetKind::Dpo => "dpo",
        })
    }
}

/// One caption or SFT example.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftRecord {
    pub image: String,
    pub prompt: String,
    pub response: String,
}

/// A model output and its minimally edited correction.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DpoRecord {
    pub image: String,
    pub prompt: String,
    pub original: String,
    pub edited: String,
}

/// Parsed records of one kind.
#[derive(Clone, Debug, PartialEq)]
pub enum Records {
    Sft(Vec<SftRecord>),
    Dpo(Vec<DpoRecord>),
}

impl Records {
    pub fn len(&self) -> usize {
        match self {
            Records::Sft(r) => r.len(),
            Records::Dpo(r) => r.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// The outcome of reading a file: records plus one warning per skipped line.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub records: Records,
    pub warnings: Vec<String>,
}

/// Parses JSONL text. Blank lines are ignored silently.
pub fn parse_jsonl<R: for<'de> Deserialize<'de>>(text: &str) -> (Vec<R>, Vec<String>) {
    let mut records = Vec::new();
    let mut warnings = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<R>(line) {
            Ok(r) => records.push(r),
            Err(e) => warnings.push(format!("line {}: {e}", i + 1)),
        }
    }
    (records, warnings)
}

pub fn read_jsonl_dataset(path: impl AsRef<Path>, kind: DatasetKind) -> Result<Dataset> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let (records, warnings) = match kind {
        DatasetKind::Caption | DatasetKind::Sft => {
            let (r, w) = parse_jsonl::<SftRecord>(&text);
            (Records::Sft(r), w)
        }
        DatasetKind::Dpo => {
            let (r, w) = parse_jsonl::<DpoRecord>(&text);
            (Records::Dpo(r), w)
        }
    };
    for w in &warnings {
        log::warn!("{}: {w}", path.display());
    }
    if records.is_empty() {
        return Err(Error::Dataset {
            path: path.to_path_buf(),
            detail: format!("no valid {kind} records ({} malformed lines)", warnings.len()),
        });
    }
    log::info!("{}: {} {kind} records, {} skipped", path.display(), records.len(), warnings.len());
    Ok(Dataset { records, warnings })
}

/// Resolves a record's image path relative to the dataset file.
pub fn resolve_image(dataset: &Path, image: &str) -> PathBuf {
    let p = Path::new(image);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        dataset.parent().unwrap_or(Path::new(".")).join(p)
    }
}
