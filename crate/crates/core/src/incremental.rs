//! Prototype classifier over the frozen backbone, grown session by session.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{read_envelope, write_envelope, EnvelopeHeader};
use crate::error::{Result, SvtError};
use crate::metrics::{top1_accuracy, SessionMetrics};
use crate::model::EmbeddingBatch;
use crate::params::ParamStore;
use crate::protocol::{cumulative_test_set, DatasetManifest, SessionSpec};
use crate::tensor::{dot, l2_norm, Matrix};
use crate::vision::{forward_visual, VisionConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Scoring {
    #[default]
    Cosine,
    Dot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prototype {
    pub class_id: usize,
    pub vector: Vec<f64>,
    /// Session that introduced the class.
    pub session: usize,
}

/// Append-only table of class prototypes.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierState {
    prototypes: Vec<Prototype>,
    scoring: Scoring,
}

impl ClassifierState {
    pub fn empty(scoring: Scoring) -> Self {
        ClassifierState {
            prototypes: Vec::new(),
            scoring,
        }
    }

    pub fn prototypes(&self) -> &[Prototype] {
        &self.prototypes
    }

    pub fn scoring(&self) -> Scoring {
        self.scoring
    }

    pub fn len(&self) -> usize {
        self.prototypes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prototypes.is_empty()
    }

    pub fn dim(&self) -> Option<usize> {
        self.prototypes.first().map(|p| p.vector.len())
    }

    /// Similarity of `query` to every prototype, in table order.
    pub fn scores(&self, query: &[f64]) -> Result<Vec<f64>> {
        if query.iter().any(|v| !v.is_finite()) {
            return Err(SvtError::Numeric("query embedding".into()));
        }
        if let Some(d) = self.dim() {
            if d != query.len() {
                return Err(SvtError::Shape(format!(
                    "{}-dim query against {d}-dim prototypes",
                    query.len()
                )));
            }
        }
        let qn = l2_norm(query);
        if self.scoring == Scoring::Cosine && qn == 0.0 {
            return Err(SvtError::Degenerate("zero-norm query under cosine scoring".into()));
        }
        self.prototypes
            .iter()
            .map(|p| match self.scoring {
                Scoring::Dot => Ok(dot(query, &p.vector)),
                Scoring::Cosine => {
                    let pn = l2_norm(&p.vector);
                    if pn == 0.0 {
                        return Err(SvtError::Degenerate(format!(
                            "zero-norm prototype for class {}",
                            p.class_id
                        )));
                    }
                    Ok(dot(query, &p.vector) / (qn * pn))
                }
            })
            .collect()
    }
}

/// Per-class arithmetic mean of the embeddings, in ascending class order.
/// Rows are summed in batch order.
pub fn compute_prototypes(batch: &EmbeddingBatch) -> Result<Vec<(usize, Vec<f64>)>> {
    if batch.is_empty() {
        return Err(SvtError::Empty("no embeddings to average".into()));
    }
    let d = batch.dim();
    let mut sums: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
    for (row, &label) in batch.labels.iter().enumerate() {
        let (sum, n) = sums.entry(label).or_insert_with(|| (vec![0.0; d], 0));
        for (s, v) in sum.iter_mut().zip(batch.embeddings.row(row)) {
            *s += v;
        }
        *n += 1;
    }
    Ok(sums
        .into_iter()
        .map(|(c, (sum, n))| (c, sum.into_iter().map(|s| s / n as f64).collect()))
        .collect())
}

/// A new state holding every old prototype unchanged followed by the new
/// ones.
pub fn extend_classifier(
    state: &ClassifierState,
    new_prototypes: Vec<(usize, Vec<f64>)>,
    session: usize,
) -> Result<ClassifierState> {
    let mut next = state.clone();
    for (class_id, vector) in new_prototypes {
        if next.prototypes.iter().any(|p| p.class_id == class_id) {
            return Err(SvtError::Conflict(class_id));
        }
        if let Some(d) = next.dim() {
            if vector.len() != d {
                return Err(SvtError::Shape(format!(
                    "class {class_id}: {}-dim prototype in a {d}-dim table",
                    vector.len()
                )));
            }
        }
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(SvtError::Numeric(format!("prototype of class {class_id}")));
        }
        next.prototypes.push(Prototype {
            class_id,
            vector,
            session,
        });
    }
    Ok(next)
}

/// Highest-scoring class; exact ties go to the lowest class id.
pub fn predict(embedding: &[f64], state: &ClassifierState) -> Result<usize> {
    let scores = state.scores(embedding)?;
    let mut best: Option<(f64, usize)> = None;
    for (s, p) in scores.into_iter().zip(&state.prototypes) {
        best = match best {
            Some((bs, bc)) if bs > s || (bs == s && bc < p.class_id) => Some((bs, bc)),
            _ => Some((s, p.class_id)),
        };
    }
    best.map(|(_, c)| c)
        .ok_or_else(|| SvtError::Empty("classifier has no prototypes".into()))
}

/// Interface an FSCIL inference head implements to be driven by
/// [`run_incremental_protocol`].
pub trait IncrementalHead {
    fn build(&self, base: &EmbeddingBatch) -> Result<ClassifierState>;
    fn extend(&self, state: &ClassifierState, shots: &EmbeddingBatch, session: usize) -> Result<ClassifierState>;
    fn predict(&self, state: &ClassifierState, query: &[f64]) -> Result<usize> {
        predict(query, state)
    }
}

/// Nearest class mean. Under cosine scoring embeddings are L2-normalized
/// before averaging.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct NcmHead {
    pub scoring: Scoring,
}

impl NcmHead {
    fn prototypes(&self, batch: &EmbeddingBatch) -> Result<Vec<(usize, Vec<f64>)>> {
        if self.scoring == Scoring::Dot {
            return compute_prototypes(batch);
        }
        let mut normalized = batch.embeddings.clone();
        for r in 0..normalized.rows() {
            let row = normalized.row_mut(r);
            let n = l2_norm(row);
            if n == 0.0 {
                return Err(SvtError::Degenerate(format!(
                    "zero-norm embedding for class {}",
                    batch.labels[r]
                )));
            }
            row.iter_mut().for_each(|v| *v /= n);
        }
        compute_prototypes(&EmbeddingBatch::new(normalized, batch.labels.clone())?)
    }
}

impl IncrementalHead for NcmHead {
    fn build(&self, base: &EmbeddingBatch) -> Result<ClassifierState> {
        extend_classifier(&ClassifierState::empty(self.scoring), self.prototypes(base)?, 0)
    }

    fn extend(&self, state: &ClassifierState, shots: &EmbeddingBatch, session: usize) -> Result<ClassifierState> {
        if shots.is_empty() {
            return Ok(state.clone());
        }
        extend_classifier(state, self.prototypes(shots)?, session)
    }
}

/// Embeds manifest examples with the frozen encoder.
pub fn embed_examples(
    indices: &[usize],
    manifest: &DatasetManifest,
    inputs: &[Vec<f64>],
    params: &ParamStore,
    vision: &VisionConfig,
) -> Result<EmbeddingBatch> {
    let batch: Vec<Vec<f64>> = indices.iter().map(|&i| inputs[i].clone()).collect();
    let embeddings = forward_visual(&batch, params, vision)?;
    let labels = indices.iter().map(|&i| manifest.example(i).class_id).collect();
    EmbeddingBatch::new(embeddings, labels)
}

pub struct IncrementalRun {
    pub metrics: Vec<SessionMetrics>,
    /// Classifier after each session.
    pub states: Vec<ClassifierState>,
    pub backbone_checksum: String,
}

/// Builds the classifier from the base training set, then for each later
/// session extends it with that session's few shots and scores the test
/// set of every class seen so far.
pub fn run_incremental_protocol(
    params: &ParamStore,
    vision: &VisionConfig,
    spec: &SessionSpec,
    manifest: &DatasetManifest,
    inputs: &[Vec<f64>],
    head: &dyn IncrementalHead,
) -> Result<IncrementalRun> {
    if spec.is_empty() {
        return Err(SvtError::Empty("session spec has no sessions".into()));
    }
    let before = params.checksum();

    // The backbone is frozen, so every test example is embedded once.
    let all_test = cumulative_test_set(spec, spec.len() - 1)?;
    let test_batch = embed_examples(&all_test, manifest, inputs, params, vision)?;
    let row_of: BTreeMap<usize, usize> = all_test.iter().enumerate().map(|(r, &i)| (i, r)).collect();

    let mut metrics = Vec::with_capacity(spec.len());
    let mut states: Vec<ClassifierState> = Vec::with_capacity(spec.len());
    for session in &spec.sessions {
        let shots = embed_examples(&session.train_examples, manifest, inputs, params, vision)?;
        let state = match states.last() {
            None => head.build(&shots)?,
            Some(prev) => head.extend(prev, &shots, session.index)?,
        };
        let test = cumulative_test_set(spec, session.index)?;
        let mut predictions = Vec::with_capacity(test.len());
        let mut labels = Vec::with_capacity(test.len());
        for i in &test {
            let r = row_of[i];
            predictions.push(head.predict(&state, test_batch.embeddings.row(r))?);
            labels.push(test_batch.labels[r]);
        }
        metrics.push(SessionMetrics {
            session_index: session.index,
            top1: top1_accuracy(&predictions, &labels)?,
            n_test: test.len(),
            n_classes_seen: state.len(),
        });
        states.push(state);
    }

    let after = params.checksum();
    if before != after {
        return Err(SvtError::FrozenBackbone { before, after });
    }
    Ok(IncrementalRun {
        metrics,
        states,
        backbone_checksum: after,
    })
}

const STATE_KIND: &str = "classifier";

/// Saves a classifier as one `n × d` prototype tensor; class ids, sessions
/// and the scoring rule go in the header.
pub fn write_classifier_state(path: &Path, state: &ClassifierState, seed: u64) -> Result<()> {
    let d = state.dim().unwrap_or(0);
    let rows: Vec<f64> = state.prototypes.iter().flat_map(|p| p.vector.iter().copied()).collect();
    let table = Matrix::from_vec(state.len(), d, rows)?;
    let meta = serde_json::json!({
        "scoring": state.scoring,
        "class_ids": state.prototypes.iter().map(|p| p.class_id).collect::<Vec<_>>(),
        "sessions": state.prototypes.iter().map(|p| p.session).collect::<Vec<_>>(),
    });
    let header = EnvelopeHeader::new(STATE_KIND, seed, serde_json::Value::Null, meta);
    write_envelope(path, header, &[("prototypes".to_string(), &table)])
}

pub fn read_classifier_state(path: &Path) -> Result<ClassifierState> {
    let (header, tensors) = read_envelope(path)?;
    if header.kind != STATE_KIND {
        return Err(SvtError::Format(format!("expected a classifier file, found {:?}", header.kind)));
    }
    #[derive(Deserialize)]
    struct Meta {
        scoring: Scoring,
        class_ids: Vec<usize>,
        sessions: Vec<usize>,
    }
    let meta: Meta = serde_json::from_value(header.meta).map_err(|e| SvtError::Format(e.to_string()))?;
    let table = tensors
        .into_iter()
        .find(|(n, _)| n == "prototypes")
        .map(|(_, m)| m)
        .ok_or_else(|| SvtError::Format("missing prototypes tensor".into()))?;
    if meta.class_ids.len() != table.rows() || meta.sessions.len() != table.rows() {
        return Err(SvtError::Format("prototype metadata does not match the table".into()));
    }
    let prototypes = (0..table.rows())
        .map(|r| Prototype {
            class_id: meta.class_ids[r],
            vector: table.row(r).to_vec(),
            session: meta.sessions[r],
        })
        .collect();
    Ok(ClassifierState {
        prototypes,
        scoring: meta.scoring,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state(vectors: &[(usize, Vec<f64>)], scoring: Scoring) -> ClassifierState {
        extend_classifier(&ClassifierState::empty(scoring), vectors.to_vec(), 0).unwrap()
    }

    #[test]
    fn orthogonal_prototypes_hand_cosine() {
        let s = state(&[(3, vec![1.0, 0.0]), (5, vec![0.0, 1.0])], Scoring::Cosine);
        // cos to e1 = 1/√1.01 ≈ 0.995, to e2 = 0.1/√1.01 ≈ 0.0995
        let scores = s.scores(&[1.0, 0.1]).unwrap();
        assert!((scores[0] - 1.0 / 1.01f64.sqrt()).abs() < 1e-12);
        assert!((scores[1] - 0.1 / 1.01f64.sqrt()).abs() < 1e-12);
        assert_eq!(predict(&[1.0, 0.1], &s).unwrap(), 3);
    }

    #[test]
    fn tie_goes_to_lower_class_id() {
        let s = state(&[(9, vec![1.0, 0.0]), (2, vec![0.0, 1.0])], Scoring::Cosine);
        assert_eq!(predict(&[1.0, 1.0], &s).unwrap(), 2);
    }

    #[test]
    fn zero_norm_is_degenerate() {
        let s = state(&[(0, vec![1.0, 0.0])], Scoring::Cosine);
        assert!(matches!(predict(&[0.0, 0.0], &s), Err(SvtError::Degenerate(_))));
        let z = state(&[(0, vec![0.0, 0.0])], Scoring::Cosine);
        assert!(matches!(predict(&[1.0, 0.0], &z), Err(SvtError::Degenerate(_))));
        let d = state(&[(0, vec![0.0, 0.0])], Scoring::Dot);
        assert_eq!(predict(&[1.0, 0.0], &d).unwrap(), 0);
    }

    #[test]
    fn extension_appends_and_rejects_duplicates() {
        let s = state(&[(0, vec![1.0, 0.0])], Scoring::Cosine);
        assert_eq!(extend_classifier(&s, vec![], 1).unwrap(), s);
        let t = extend_classifier(&s, vec![(4, vec![0.0, 1.0])], 1).unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!(s.len(), 1);
        assert_eq!(t.prototypes()[0], s.prototypes()[0]);
        assert!(matches!(
            extend_classifier(&t, vec![(4, vec![1.0, 1.0])], 2),
            Err(SvtError::Conflict(4))
        ));
    }

    #[test]
    fn singleton_and_identical_means() {
        let m = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![3.0, 4.0]]).unwrap();
        let protos = compute_prototypes(&EmbeddingBatch::new(m, vec![7, 1, 1]).unwrap()).unwrap();
        assert_eq!(protos, vec![(1, vec![3.0, 4.0]), (7, vec![1.0, 2.0])]);
    }

    #[test]
    fn state_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state.svt");
        let s = state(&[(2, vec![0.5, -1.0]), (0, vec![0.25, 2.0])], Scoring::Dot);
        write_classifier_state(&path, &s, 3).unwrap();
        assert_eq!(read_classifier_state(&path).unwrap(), s);
    }
}
