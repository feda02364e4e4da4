//! Checkpoint persistence and dataset readers.

pub mod checkpoint;
pub mod dataset;

pub use checkpoint::{load, save, CheckpointError};
pub use dataset::{read_jsonl_dataset, Dataset, DatasetKind, DpoRecord, Records, SftRecord};
