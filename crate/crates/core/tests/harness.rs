use std::path::Path;

use svt_core::harness::{
    collect_embeddings, emit_results_table, export_embeddings, prepare_data, read_checkpoint, run_experiment,
    DataSource, ExperimentConfig, TableFormat, CHECKPOINT_FILE, EMBEDDINGS_FILE, LOSS_LOG_FILE, PCA_FILE,
    RESULTS_FILE, SESSIONS_FILE, TABLE_FILE,
};
use svt_core::metrics::{RunResult, SessionMetrics};
use svt_core::model::init_backbone;
use svt_core::protocol::{build_session_splits, cumulative_test_set, Partition};
use svt_core::SvtError;

fn run(hash: &str, accs: &[f64]) -> RunResult {
    let sessions = accs
        .iter()
        .enumerate()
        .map(|(i, &top1)| SessionMetrics {
            session_index: i,
            top1,
            n_test: 10,
            n_classes_seen: 2 + i,
        })
        .collect();
    RunResult::new(hash.into(), 0, sessions).unwrap()
}

fn quick_config(out: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        out_dir: out.to_path_buf(),
        ..ExperimentConfig::default()
    };
    cfg.train.main_epochs = 3;
    cfg
}

#[test]
fn csv_table_round_trips_to_two_decimals() {
    let results = [run("a", &[91.234, 80.005, 70.0]), run("b", &[95.0, 85.555, 75.125])];
    let labels = ["V-T".to_string(), "SV-T".to_string()];
    let csv = emit_results_table(&results, &labels, 1, TableFormat::Csv).unwrap();
    let mut reader = csv::Reader::from_reader(csv.as_bytes());
    let header: Vec<String> = reader.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(header, ["Method", "0", "1", "2", "Avg.", "Improvement"]);
    let rows: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 2);
    for (row, result) in rows.iter().zip(&results) {
        for (cell, acc) in row.iter().skip(1).zip(result.accuracies()) {
            assert!((cell.parse::<f64>().unwrap() - acc).abs() <= 0.005 + 1e-12);
        }
        assert!((row[4].parse::<f64>().unwrap() - result.avg).abs() <= 0.005 + 1e-12);
    }
    assert_eq!(&rows[1][5], "0.00");
    let gain: f64 = rows[0][5].parse().unwrap();
    assert!((gain - (results[1].avg - results[0].avg)).abs() <= 0.005 + 1e-12);
    assert!(rows[0][5].starts_with('+'));
}

#[test]
fn table_rejects_ragged_results() {
    let results = [run("a", &[1.0, 2.0]), run("b", &[1.0])];
    let labels = ["a".to_string(), "b".to_string()];
    let err = emit_results_table(&results, &labels, 0, TableFormat::Markdown).unwrap_err();
    assert!(matches!(err, SvtError::Layout(_)));
}

#[test]
fn unknown_config_keys_are_listed() {
    let err = ExperimentConfig::parse("seed = 3\ntrain.lamda = 1\nvision.dpeth = 2\n").unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, SvtError::Config(_)));
    assert!(msg.contains("train.lamda") && msg.contains("vision.dpeth"), "{msg}");
}

#[test]
fn config_file_resolves_relative_manifest_paths() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("exp.conf");
    std::fs::write(&path, "data.source = data/manifest.csv\ndata.feature_dim = 32\n").unwrap();
    let cfg = ExperimentConfig::from_file(&path).unwrap();
    assert_eq!(cfg.data, DataSource::Manifest(dir.path().join("data/manifest.csv")));
}

#[test]
fn runs_are_reproducible_and_write_every_artifact() {
    let a_dir = tempfile::tempdir().unwrap();
    let b_dir = tempfile::tempdir().unwrap();
    let a = run_experiment(&quick_config(a_dir.path())).unwrap();
    let b = run_experiment(&quick_config(b_dir.path())).unwrap();
    assert_eq!(a.dir.file_name(), b.dir.file_name());
    for file in [RESULTS_FILE, LOSS_LOG_FILE, CHECKPOINT_FILE, EMBEDDINGS_FILE, PCA_FILE, SESSIONS_FILE, TABLE_FILE] {
        let x = std::fs::read(a.dir.join(file)).unwrap();
        let y = std::fs::read(b.dir.join(file)).unwrap();
        assert_eq!(x, y, "{file} differs between identical runs");
    }
    assert_eq!(RunResult::read_json(&a.dir.join(RESULTS_FILE)).unwrap(), a.result);

    let json: serde_json::Value =
        serde_json::from_slice(&std::fs::read(a.dir.join(RESULTS_FILE)).unwrap()).unwrap();
    for key in ["config_hash", "seed", "sessions", "avg"] {
        assert!(json.get(key).is_some(), "results.json lacks {key}");
    }
    for key in ["i", "top1", "n_test", "n_classes"] {
        assert!(json["sessions"][0].get(key).is_some(), "session entry lacks {key}");
    }

    let ckpt = read_checkpoint(&a.dir.join(CHECKPOINT_FILE)).unwrap();
    assert_eq!(ckpt.config.model, quick_config(a_dir.path()).model);
    for (name, m) in a.params.iter() {
        let stored = ckpt.params.get(name).unwrap();
        assert!(m.data().iter().zip(stored.data()).all(|(x, y)| (*x as f32) as f64 == *y));
    }
}

#[test]
fn a_diverging_run_names_its_stage_and_keeps_the_partial_log() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = quick_config(dir.path());
    cfg.train.lr_b = 1e8;
    cfg.train.main_epochs = 20;
    let err = run_experiment(&cfg).err().expect("diverges");
    match err {
        SvtError::Stage { stage, .. } => assert_eq!(stage, "train"),
        other => panic!("unexpected {other}"),
    }
    let log = std::fs::read_to_string(cfg.run_dir().join(LOSS_LOG_FILE)).unwrap();
    assert!(log.starts_with("epoch,batch,l_vce,l_sce,l_total,lr\n"));
    assert!(log.lines().count() > 1);
}

#[test]
fn embedding_export_counts_is_deterministic_and_separates_classes() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::default();
    cfg.data = DataSource::Synthetic {
        classes: 100,
        train_per_class: 5,
        test_per_class: 20,
        feature_dim: 32,
        spread: 0.05,
    };
    let (manifest, inputs) = prepare_data(&cfg).unwrap();
    let params = init_backbone(&cfg.model, 1).unwrap();
    let test: Vec<usize> = (0..manifest.examples().len())
        .filter(|&i| manifest.example(i).partition == Partition::Test)
        .collect();
    let classes: Vec<String> = ["whale", "willow tree", "wolf", "woman", "worm"].map(String::from).to_vec();
    let p1 = dir.path().join("a.tsv");
    let p2 = dir.path().join("b.tsv");
    let n = export_embeddings(&params, &cfg.model.vision, &manifest, &inputs, &test, &classes, &p1).unwrap();
    export_embeddings(&params, &cfg.model.vision, &manifest, &inputs, &test, &classes, &p2).unwrap();
    assert_eq!(n, 100);
    let text = std::fs::read_to_string(&p1).unwrap();
    assert_eq!(text, std::fs::read_to_string(&p2).unwrap());
    assert_eq!(text.lines().count(), 101);
    assert!(text.starts_with("example_id\tclass_word\tv_1\t"));

    // Distances recomputed from the written file.
    let rows: Vec<(String, Vec<f64>)> = text
        .lines()
        .skip(1)
        .map(|l| {
            let mut cells = l.split('\t');
            cells.next();
            let word = cells.next().unwrap().to_string();
            (word, cells.map(|c| c.parse().unwrap()).collect())
        })
        .collect();
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let centroid = |w: &str| {
        let members: Vec<&Vec<f64>> = rows.iter().filter(|(c, _)| c == w).map(|(_, v)| v).collect();
        let mut m = vec![0.0; members[0].len()];
        for v in &members {
            for (a, b) in m.iter_mut().zip(v.iter()) {
                *a += b / members.len() as f64;
            }
        }
        m
    };
    let centroids: Vec<Vec<f64>> = classes.iter().map(|w| centroid(w)).collect();
    let intra = rows
        .iter()
        .map(|(w, v)| dist(v, &centroids[classes.iter().position(|c| c == w).unwrap()]))
        .sum::<f64>()
        / rows.len() as f64;
    let mut inter = Vec::new();
    for i in 0..centroids.len() {
        for j in i + 1..centroids.len() {
            inter.push(dist(&centroids[i], &centroids[j]));
        }
    }
    let inter = inter.iter().sum::<f64>() / inter.len() as f64;
    assert!(inter > intra, "inter {inter} vs intra {intra}");
}

#[test]
fn export_rejects_unknown_or_absent_classes() {
    let cfg = ExperimentConfig::default();
    let (manifest, inputs) = prepare_data(&cfg).unwrap();
    let params = init_backbone(&cfg.model, 0).unwrap();
    let spec = build_session_splits(&manifest, &cfg.protocol()).unwrap();
    let base_test = cumulative_test_set(&spec, 0).unwrap();
    let err = collect_embeddings(&params, &cfg.model.vision, &manifest, &inputs, &base_test, &["unicorn".into()])
        .unwrap_err();
    assert!(matches!(err, SvtError::Filter(ref w) if w == "unicorn"));
    let late = manifest.class_word(spec.sessions[4].class_ids[0]).to_string();
    let err = collect_embeddings(&params, &cfg.model.vision, &manifest, &inputs, &base_test, &[late]).unwrap_err();
    assert!(matches!(err, SvtError::Filter(_)));
}
