use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::manifest::{DatasetManifest, Partition};
use crate::checkpoint::write_atomic;
use crate::error::{Result, SvtError};

/// Curriculum shape: one base session followed by `session_count`
/// `ways`-way `shots`-shot incremental sessions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProtocolConfig {
    pub base_class_count: usize,
    pub session_count: usize,
    pub ways: usize,
    pub shots: usize,
    pub seed: u64,
}

impl ProtocolConfig {
    /// CUB200: 100 base classes, ten 10-way 5-shot sessions.
    pub fn cub200(seed: u64) -> Self {
        ProtocolConfig {
            base_class_count: 100,
            session_count: 10,
            ways: 10,
            shots: 5,
            seed,
        }
    }

    /// Mini-ImageNet and CIFAR100: 60 base classes, eight 5-way 5-shot sessions.
    pub fn mini_imagenet(seed: u64) -> Self {
        ProtocolConfig {
            base_class_count: 60,
            session_count: 8,
            ways: 5,
            shots: 5,
            seed,
        }
    }

    pub fn total_classes(&self) -> usize {
        self.base_class_count + self.session_count * self.ways
    }

    pub fn validate(&self, class_count: usize) -> Result<()> {
        if self.ways == 0 || self.shots == 0 || self.base_class_count == 0 {
            return Err(SvtError::Protocol(format!(
                "base_class_count, ways and shots must be at least 1 (got {}, {}, {})",
                self.base_class_count, self.ways, self.shots
            )));
        }
        if self.total_classes() > class_count {
            return Err(SvtError::Protocol(format!(
                "{} base + {} × {} incremental classes exceed the manifest's {class_count} classes",
                self.base_class_count, self.session_count, self.ways
            )));
        }
        Ok(())
    }
}

/// One session's classes and examples; examples are manifest indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionData {
    pub index: usize,
    /// Ascending class ids.
    pub class_ids: Vec<usize>,
    pub train_examples: Vec<usize>,
    pub test_examples: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionSpec {
    pub sessions: Vec<SessionData>,
}

impl SessionSpec {
    pub fn len(&self) -> usize {
        self.sessions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sessions.is_empty()
    }

    pub fn base(&self) -> &SessionData {
        &self.sessions[0]
    }

    /// Classes of sessions `0..=upto`, in session order.
    pub fn classes_upto(&self, upto: usize) -> Vec<usize> {
        self.sessions[..=upto.min(self.sessions.len().saturating_sub(1))]
            .iter()
            .flat_map(|s| s.class_ids.iter().copied())
            .collect()
    }

    /// Audit document: per session, class ids/words and example ids.
    pub fn to_json(&self, manifest: &DatasetManifest) -> serde_json::Value {
        let ids = |idx: &[usize]| -> Vec<&str> {
            idx.iter().map(|&i| manifest.example(i).id.as_str()).collect()
        };
        serde_json::json!({
            "sessions": self.sessions.iter().map(|s| serde_json::json!({
                "index": s.index,
                "class_ids": s.class_ids,
                "class_words": s.class_ids.iter().map(|&c| manifest.class_word(c)).collect::<Vec<_>>(),
                "train_example_ids": ids(&s.train_examples),
                "test_example_ids": ids(&s.test_examples),
            })).collect::<Vec<_>>(),
        })
    }

    pub fn write_json(&self, manifest: &DatasetManifest, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.to_json(manifest))
            .map_err(|e| SvtError::Format(e.to_string()))?;
        write_atomic(path, text.as_bytes())
    }
}

/// Assigns classes to sessions and samples the few-shot training sets.
///
/// Class ids are shuffled with the seeded generator: the first
/// `base_class_count` become base classes and the rest fill the incremental
/// sessions in shuffled order. Each incremental class keeps `shots` train
/// examples sampled without replacement; every session keeps the full test
/// partition of its classes.
pub fn build_session_splits(manifest: &DatasetManifest, config: &ProtocolConfig) -> Result<SessionSpec> {
    config.validate(manifest.class_count())?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..manifest.class_count()).collect();
    order.shuffle(&mut rng);

    let mut sessions = Vec::with_capacity(config.session_count + 1);
    let mut base_classes = order[..config.base_class_count].to_vec();
    base_classes.sort_unstable();
    sessions.push(SessionData {
        index: 0,
        train_examples: collect(manifest, &base_classes, Partition::Train),
        test_examples: collect(manifest, &base_classes, Partition::Test),
        class_ids: base_classes,
    });

    for s in 0..config.session_count {
        let start = config.base_class_count + s * config.ways;
        let mut classes = order[start..start + config.ways].to_vec();
        classes.sort_unstable();
        let mut train = Vec::with_capacity(config.ways * config.shots);
        for &c in &classes {
            let pool = manifest.indices_of(c, Partition::Train);
            if pool.len() < config.shots {
                return Err(SvtError::Protocol(format!(
                    "class {c} ({}) has {} train examples, fewer than {} shots",
                    manifest.class_word(c),
                    pool.len(),
                    config.shots
                )));
            }
            let mut picked: Vec<usize> = index::sample(&mut rng, pool.len(), config.shots)
                .into_iter()
                .map(|i| pool[i])
                .collect();
            picked.sort_unstable();
            train.extend(picked);
        }
        sessions.push(SessionData {
            index: s + 1,
            test_examples: collect(manifest, &classes, Partition::Test),
            train_examples: train,
            class_ids: classes,
        });
    }
    Ok(SessionSpec { sessions })
}

fn collect(manifest: &DatasetManifest, classes: &[usize], partition: Partition) -> Vec<usize> {
    manifest
        .examples()
        .iter()
        .enumerate()
        .filter(|(_, e)| e.partition == partition && classes.binary_search(&e.class_id).is_ok())
        .map(|(i, _)| i)
        .collect()
}

/// Test examples of every class seen in sessions `0..=upto`.
pub fn cumulative_test_set(spec: &SessionSpec, upto: usize) -> Result<Vec<usize>> {
    if upto >= spec.sessions.len() {
        return Err(SvtError::Index {
            index: upto,
            len: spec.sessions.len(),
        });
    }
    Ok(spec.sessions[..=upto]
        .iter()
        .flat_map(|s| s.test_examples.iter().copied())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::synth::synthesize_dataset;

    #[test]
    fn too_few_classes_is_protocol_error() {
        let m = synthesize_dataset(50, 2, 1, 2, 0.1, 0).unwrap();
        let err = build_session_splits(&m, &ProtocolConfig::mini_imagenet(0)).unwrap_err();
        assert!(matches!(err, SvtError::Protocol(_)));
    }

    #[test]
    fn too_few_shots_names_class() {
        let m = synthesize_dataset(4, 3, 1, 2, 0.1, 0).unwrap();
        let cfg = ProtocolConfig {
            base_class_count: 2,
            session_count: 1,
            ways: 2,
            shots: 5,
            seed: 1,
        };
        let err = build_session_splits(&m, &cfg).unwrap_err().to_string();
        assert!(err.contains("class") && err.contains("fewer than 5 shots"), "{err}");
    }

    #[test]
    fn upto_zero_is_base_test_set() {
        let m = synthesize_dataset(10, 6, 2, 2, 0.1, 0).unwrap();
        let cfg = ProtocolConfig {
            base_class_count: 4,
            session_count: 3,
            ways: 2,
            shots: 3,
            seed: 5,
        };
        let spec = build_session_splits(&m, &cfg).unwrap();
        assert_eq!(cumulative_test_set(&spec, 0).unwrap(), spec.base().test_examples);
        assert!(matches!(
            cumulative_test_set(&spec, 4),
            Err(SvtError::Index { index: 4, len: 4 })
        ));
    }
}
