//! The class-incremental curriculum: datasets, session splits, and
//! cumulative evaluation sets.

mod manifest;
mod splits;
mod synth;

pub use manifest::{
    load_dataset_manifest, parse_csv, DatasetManifest, Example, Partition, Payload, CSV_HEADER,
};
pub use splits::{build_session_splits, cumulative_test_set, ProtocolConfig, SessionData, SessionSpec};
pub use synth::{synthesize_dataset, CLASS_WORDS};
