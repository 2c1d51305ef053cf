//! End-to-end runs: data → splits → base training → incremental protocol →
//! metrics and artifacts under `out_dir/<config_hash>-<seed>/`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{DataSource, ExperimentConfig};
use super::export::{collect_embeddings, embeddings_tsv, pca_tsv};
use super::table::{emit_results_table, TableFormat};
use crate::checkpoint::{read_envelope, write_atomic, write_envelope, EnvelopeHeader};
use crate::data::load_inputs;
use crate::error::{Result, SvtError};
use crate::incremental::{run_incremental_protocol, write_classifier_state, ClassifierState, NcmHead};
use crate::metrics::RunResult;
use crate::model::{init_backbone, ModelConfig};
use crate::params::ParamStore;
use crate::protocol::{
    build_session_splits, cumulative_test_set, load_dataset_manifest, synthesize_dataset, DatasetManifest,
    SessionSpec,
};
use crate::text::PromptSet;
use crate::training::{
    finite_difference_check, loss_log_csv, train_base_session_logged, BatchObjective, GradCheckReport, LossReport,
    Objective, PairBatch, TrainConfig,
};

pub const CONFIG_FILE: &str = "config.txt";
pub const MANIFEST_FILE: &str = "manifest.csv";
pub const SESSIONS_FILE: &str = "sessions.json";
pub const LOSS_LOG_FILE: &str = "loss_log.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.svt";
pub const RESULTS_FILE: &str = "results.json";
pub const TABLE_FILE: &str = "table.md";
pub const EMBEDDINGS_FILE: &str = "embeddings.tsv";
pub const PCA_FILE: &str = "embeddings_pca.tsv";

const BACKBONE_KIND: &str = "backbone";
const VELOCITY_PREFIX: &str = "velocity/";

/// Model and training settings stored in a checkpoint header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

/// Backbone parameters plus optimizer velocity (under `velocity/`) and the
/// number of completed epochs.
pub fn write_checkpoint(
    path: &Path,
    params: &ParamStore,
    velocity: &ParamStore,
    config: &CheckpointConfig,
    epochs_done: usize,
) -> Result<()> {
    let header = EnvelopeHeader::new(
        BACKBONE_KIND,
        config.train.seed,
        serde_json::to_value(config).map_err(|e| SvtError::Format(e.to_string()))?,
        serde_json::json!({ "epoch": epochs_done }),
    );
    let velocity_names: Vec<String> = velocity.names().map(|n| format!("{VELOCITY_PREFIX}{n}")).collect();
    let mut tensors: Vec<(String, _)> = params.iter().map(|(n, m)| (n.clone(), m)).collect();
    tensors.extend(velocity_names.into_iter().zip(velocity.iter().map(|(_, m)| m)));
    write_envelope(path, header, &tensors)
}

pub struct LoadedCheckpoint {
    pub config: CheckpointConfig,
    pub params: ParamStore,
    pub velocity: ParamStore,
    pub epochs_done: usize,
}

pub fn read_checkpoint(path: &Path) -> Result<LoadedCheckpoint> {
    let (header, tensors) = read_envelope(path)?;
    if header.kind != BACKBONE_KIND {
        return Err(SvtError::Format(format!(
            "{}: expected a backbone checkpoint, found {:?}",
            path.display(),
            header.kind
        )));
    }
    let config: CheckpointConfig =
        serde_json::from_value(header.config).map_err(|e| SvtError::Format(e.to_string()))?;
    let epochs_done = header.meta.get("epoch").and_then(|v| v.as_u64()).unwrap_or(0) as usize;
    let mut params = ParamStore::new();
    let mut velocity = ParamStore::new();
    for (name, m) in tensors {
        match name.strip_prefix(VELOCITY_PREFIX) {
            Some(rest) => velocity.insert(rest, m),
            None => params.insert(name, m),
        }
    }
    Ok(LoadedCheckpoint {
        config,
        params,
        velocity,
        epochs_done,
    })
}

/// Loads or synthesizes the dataset and every example's input vector.
pub fn prepare_data(config: &ExperimentConfig) -> Result<(DatasetManifest, Vec<Vec<f64>>)> {
    let manifest = match &config.data {
        DataSource::Synthetic {
            classes,
            train_per_class,
            test_per_class,
            feature_dim,
            spread,
        } => synthesize_dataset(*classes, *train_per_class, *test_per_class, *feature_dim, *spread, config.seed)?,
        DataSource::Manifest(path) => load_dataset_manifest(path)?,
    };
    let inputs = load_inputs(&manifest, &config.model.vision.input)?;
    Ok((manifest, inputs))
}

/// Everything a run produced.
pub struct ExperimentOutput {
    pub dir: PathBuf,
    pub result: RunResult,
    pub log: Vec<LossReport>,
    pub spec: SessionSpec,
    pub states: Vec<ClassifierState>,
    pub backbone_checksum: String,
    pub params: ParamStore,
}

pub fn run_experiment_file(config_path: &Path) -> Result<ExperimentOutput> {
    run_experiment(&ExperimentConfig::from_file(config_path)?)
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutput> {
    let dir = config.run_dir();
    std::fs::create_dir_all(&dir).map_err(|e| SvtError::io(&dir, e))?;
    write_atomic(&dir.join(CONFIG_FILE), config.canonical().as_bytes())?;

    let (manifest, inputs) = prepare_data(config).map_err(|e| e.in_stage("data"))?;
    if matches!(config.data, DataSource::Synthetic { .. }) {
        let bytes = manifest.to_csv_bytes().map_err(|e| e.in_stage("data"))?;
        write_atomic(&dir.join(MANIFEST_FILE), &bytes).map_err(|e| e.in_stage("data"))?;
    }

    let spec = build_session_splits(&manifest, &config.protocol()).map_err(|e| e.in_stage("protocol"))?;
    spec.write_json(&manifest, &dir.join(SESSIONS_FILE))
        .map_err(|e| e.in_stage("protocol"))?;

    let initial = init_backbone(&config.model, config.seed).map_err(|e| e.in_stage("train"))?;
    let mut log = Vec::new();
    let trained = train_base_session_logged(
        spec.base(),
        &manifest,
        &inputs,
        &config.model,
        &config.train,
        initial,
        &mut log,
    );
    let loss_log_path = dir.join(LOSS_LOG_FILE);
    write_atomic(&loss_log_path, loss_log_csv(&log).as_bytes()).map_err(|e| e.in_stage("train"))?;
    let (params, velocity) = trained.map_err(|e| e.in_stage("train"))?;

    let checkpoint_path = dir.join(CHECKPOINT_FILE);
    let ckpt_config = CheckpointConfig {
        model: config.model,
        train: config.train.clone(),
    };
    write_checkpoint(
        &checkpoint_path,
        &params,
        &velocity,
        &ckpt_config,
        config.train.total_epochs(),
    )
    .map_err(|e| e.in_stage("checkpoint"))?;

    let head = NcmHead {
        scoring: config.scoring,
    };
    let run = run_incremental_protocol(&params, &config.model.vision, &spec, &manifest, &inputs, &head)
        .map_err(|e| e.in_stage("incremental"))?;
    for (i, state) in run.states.iter().enumerate() {
        write_classifier_state(&dir.join(format!("classifier_session{i}.svt")), state, config.seed)
            .map_err(|e| e.in_stage("incremental"))?;
    }

    let mut result = RunResult::new(config.config_hash(), config.seed, run.metrics.clone())
        .map_err(|e| e.in_stage("metrics"))?;
    result.loss_log_ref = Some(PathBuf::from(LOSS_LOG_FILE));
    result.checkpoint_ref = Some(PathBuf::from(CHECKPOINT_FILE));
    result
        .write_json(&dir.join(RESULTS_FILE))
        .map_err(|e| e.in_stage("metrics"))?;
    let label = format!(
        "{}-{}",
        if config.train.lambda > 0.0 { "SV" } else { "V" },
        config.encoder_label
    );
    let table = emit_results_table(std::slice::from_ref(&result), &[label], 0, TableFormat::Markdown)
        .map_err(|e| e.in_stage("metrics"))?;
    write_atomic(&dir.join(TABLE_FILE), table.as_bytes()).map_err(|e| e.in_stage("metrics"))?;

    let candidates = cumulative_test_set(&spec, spec.len() - 1).map_err(|e| e.in_stage("export"))?;
    let rows = collect_embeddings(
        &params,
        &config.model.vision,
        &manifest,
        &inputs,
        &candidates,
        &config.export_classes,
    )
    .map_err(|e| e.in_stage("export"))?;
    write_atomic(&dir.join(EMBEDDINGS_FILE), embeddings_tsv(&rows).as_bytes())
        .map_err(|e| e.in_stage("export"))?;
    write_atomic(&dir.join(PCA_FILE), pca_tsv(&rows).as_bytes()).map_err(|e| e.in_stage("export"))?;

    Ok(ExperimentOutput {
        dir,
        result,
        log,
        spec,
        states: run.states,
        backbone_checksum: run.backbone_checksum,
        params,
    })
}

pub struct AblationOutput {
    pub visual: ExperimentOutput,
    pub semantic: ExperimentOutput,
    pub labels: [String; 2],
    pub table: String,
    pub table_path: PathBuf,
}

/// Runs the configuration twice, with `λ = 0` (`V-<encoder>`) and with its
/// own `λ` (1 if it was 0; `SV-<encoder>`), and tabulates both rows with the
/// semantic run as the reference.
pub fn run_ablation(config: &ExperimentConfig) -> Result<AblationOutput> {
    let mut visual_cfg = config.clone();
    visual_cfg.train.lambda = 0.0;
    let mut semantic_cfg = config.clone();
    if semantic_cfg.train.lambda == 0.0 {
        semantic_cfg.train.lambda = 1.0;
    }
    let visual = run_experiment(&visual_cfg)?;
    let semantic = run_experiment(&semantic_cfg)?;
    let labels = [
        format!("V-{}", config.encoder_label),
        format!("SV-{}", config.encoder_label),
    ];
    let results = [visual.result.clone(), semantic.result.clone()];
    let table = emit_results_table(&results, &labels, 1, TableFormat::Markdown)?;
    let dir = config
        .out_dir
        .join(format!("ablation-{}-{}", semantic_cfg.config_hash(), config.seed));
    let table_path = dir.join(TABLE_FILE);
    write_atomic(&table_path, table.as_bytes())?;
    write_atomic(
        &dir.join("table.csv"),
        emit_results_table(&results, &labels, 1, TableFormat::Csv)?.as_bytes(),
    )?;
    Ok(AblationOutput {
        visual,
        semantic,
        labels,
        table,
        table_path,
    })
}

/// Finite-difference checks of `L_VCE`, `L_SCE` and `L_SVCE` at the
/// configured `λ`, on freshly initialized parameters and the first
/// `batch_size` base training examples.
pub fn check_gradients(
    config: &ExperimentConfig,
    probes: usize,
    step: f64,
    batch_size: usize,
) -> Result<Vec<(String, GradCheckReport)>> {
    let (manifest, inputs) = prepare_data(config)?;
    let spec = build_session_splits(&manifest, &config.protocol())?;
    let base = spec.base();
    let params = init_backbone(&config.model, config.seed)?;
    let prompts = PromptSet::build(
        base.class_ids.iter().map(|&c| (c, manifest.class_word(c))),
        &config.train.prompt_template,
        &config.model.text,
    )?;
    let prompt_ids: Vec<Vec<usize>> = prompts.entries.iter().map(|e| e.token_ids.clone()).collect();
    let chosen: Vec<usize> = base.train_examples.iter().copied().take(batch_size.max(1)).collect();
    let labels: Vec<usize> = chosen
        .iter()
        .map(|&i| {
            let c = manifest.example(i).class_id;
            base.class_ids.binary_search(&c).expect("base example of a base class")
        })
        .collect();
    let objectives = [
        ("L_VCE".to_string(), Objective::Visual),
        ("L_SCE".to_string(), Objective::Semantic),
        (
            format!("L_SVCE(lambda={})", config.train.lambda),
            Objective::Combined {
                lambda: config.train.lambda,
            },
        ),
    ];
    objectives
        .into_iter()
        .map(|(name, objective)| {
            let obj = BatchObjective {
                model: &config.model,
                batch: PairBatch {
                    inputs: chosen.iter().map(|&i| inputs[i].as_slice()).collect(),
                    labels: labels.clone(),
                    prompts: &prompt_ids,
                },
                objective,
            };
            Ok((name, finite_difference_check(&obj, &params, probes, step, config.seed)?))
        })
        .collect()
}
