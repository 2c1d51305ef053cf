//! Backbone assembly: image encoder, text encoder with projection, and the
//! fully-connected base-class head, all in one [`ParamStore`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Result, SvtError};
use crate::params::{BoundParams, Initializer, ParamStore};
use crate::tensor::Matrix;
use crate::text::{init_text_params, TextConfig};
use crate::vision::{init_vision_params, VisionConfig};

pub const HEAD: &str = "head";
pub const SEMANTIC_HEAD: &str = "head_sem";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vision: VisionConfig,
    pub text: TextConfig,
    /// Rows of the classification head (number of base classes).
    pub num_classes: usize,
    /// Score `z^s` with its own head instead of sharing `w_c, b_c`.
    pub separate_heads: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.vision.validate()?;
        self.text.validate()?;
        if self.vision.d_v != self.text.d_v {
            return Err(SvtError::Config(format!(
                "text projection outputs {} dims but the visual space has {}",
                self.text.d_v, self.vision.d_v
            )));
        }
        if self.num_classes < 2 {
            return Err(SvtError::Config("the base head needs at least 2 classes".into()));
        }
        Ok(())
    }

    pub fn semantic_head(&self) -> &'static str {
        if self.separate_heads {
            SEMANTIC_HEAD
        } else {
            HEAD
        }
    }
}

/// Fresh parameters: vision tensors, then text tensors, then head(s), all
/// from one seeded stream.
pub fn init_backbone(config: &ModelConfig, seed: u64) -> Result<ParamStore> {
    config.validate()?;
    let mut init = Initializer::new(ChaCha8Rng::seed_from_u64(seed));
    let mut store = init_vision_params(&config.vision, &mut init)?;
    store.merge(init_text_params(&config.text, &mut init)?);
    let heads: &[&str] = if config.separate_heads {
        &[HEAD, SEMANTIC_HEAD]
    } else {
        &[HEAD]
    };
    for prefix in heads {
        store.insert(
            format!("{prefix}.weight"),
            init.weight(config.vision.d_v, config.num_classes).transpose(),
        );
        store.insert(format!("{prefix}.bias"), Matrix::zeros(1, config.num_classes));
    }
    Ok(store)
}

/// Fully-connected classifier: row `c` of `weights` is `w_c`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    pub weights: Matrix,
    pub biases: Matrix,
}

impl ClassifierHead {
    pub fn from_params(params: &ParamStore, prefix: &str) -> Result<Self> {
        let head = ClassifierHead {
            weights: params.get(&format!("{prefix}.weight"))?.clone(),
            biases: params.get(&format!("{prefix}.bias"))?.clone(),
        };
        if head.biases.shape() != (1, head.weights.rows()) {
            return Err(SvtError::Shape(format!(
                "{prefix}: {} weight rows but {} biases",
                head.weights.rows(),
                head.biases.cols()
            )));
        }
        Ok(head)
    }

    pub fn classes(&self) -> usize {
        self.weights.rows()
    }

    pub fn logits(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.weights.cols() {
            return Err(SvtError::Shape(format!(
                "{}-dim embedding for a head over {} dims",
                z.len(),
                self.weights.cols()
            )));
        }
        Ok((0..self.classes())
            .map(|c| crate::tensor::dot(self.weights.row(c), z) + self.biases.get(0, c))
            .collect())
    }
}

/// `Z · Wᵀ + b` for the head named `prefix`.
pub fn build_head_logits(tape: &mut Tape, bound: &BoundParams, prefix: &str, z: Var) -> Result<Var> {
    let w = bound.var(&format!("{prefix}.weight"))?;
    let b = bound.var(&format!("{prefix}.bias"))?;
    let wt = tape.transpose(w);
    let zw = tape.matmul(z, wt)?;
    tape.add_row(zw, b)
}

/// Feature vectors with aligned integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    pub embeddings: Matrix,
    pub labels: Vec<usize>,
}

impl EmbeddingBatch {
    pub fn new(embeddings: Matrix, labels: Vec<usize>) -> Result<Self> {
        if embeddings.rows() != labels.len() {
            return Err(SvtError::Shape(format!(
                "{} embeddings with {} labels",
                embeddings.rows(),
                labels.len()
            )));
        }
        Ok(EmbeddingBatch { embeddings, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols()
    }
}
