//! Experiment orchestration: configuration, runs, tables and exports.

mod config;
mod export;
mod run;
mod table;

pub use config::{parse_pairs, DataSource, ExperimentConfig, OUT_DIR_ENV};
pub use export::{collect_embeddings, embeddings_tsv, export_embeddings, pca_2d, pca_tsv, EmbeddingRows};
pub use run::{
    check_gradients, prepare_data, read_checkpoint, run_ablation, run_experiment, run_experiment_file, write_checkpoint,
    AblationOutput, CheckpointConfig, ExperimentOutput, LoadedCheckpoint, CHECKPOINT_FILE, CONFIG_FILE,
    EMBEDDINGS_FILE, LOSS_LOG_FILE, MANIFEST_FILE, PCA_FILE, RESULTS_FILE, SESSIONS_FILE, TABLE_FILE,
};
pub use table::{emit_results_table, format_cell, TableFormat};
