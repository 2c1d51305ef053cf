use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::schedule::{lr_at, sgd_momentum_step, TrainConfig};
use crate::autodiff::Tape;
use crate::data::Augment;
use crate::error::{Result, SvtError};
use crate::model::{build_head_logits, ModelConfig, HEAD};
use crate::params::ParamStore;
use crate::protocol::{DatasetManifest, SessionData};
use crate::text::{build_encode_text, build_project_semantic, PromptSet};
use crate::vision::build_visual;

/// Which objective a batch graph differentiates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Objective {
    Visual,
    Semantic,
    /// `L_VCE + λ·L_SCE`.
    Combined { lambda: f64 },
}

/// One batch of image–prompt pairs. `labels` index rows of the head and
/// `prompts[label]` holds that class's token ids.
pub struct PairBatch<'a> {
    pub inputs: Vec<&'a [f64]>,
    pub labels: Vec<usize>,
    pub prompts: &'a [Vec<usize>],
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchLoss {
    pub l_vce: f64,
    pub l_sce: f64,
    pub objective: f64,
}

/// Forward pass over a batch; with `want_grads` also the gradient of the
/// chosen objective with respect to every tensor in `params`.
pub fn batch_loss(
    params: &ParamStore,
    model: &ModelConfig,
    batch: &PairBatch<'_>,
    objective: Objective,
    want_grads: bool,
) -> Result<(BatchLoss, Option<ParamStore>)> {
    if batch.inputs.is_empty() || batch.inputs.len() != batch.labels.len() {
        return Err(SvtError::Shape(format!(
            "{} inputs with {} labels",
            batch.inputs.len(),
            batch.labels.len()
        )));
    }
    if let Some(&y) = batch.labels.iter().find(|&&y| y >= model.num_classes || y >= batch.prompts.len()) {
        return Err(SvtError::Label {
            label: y,
            classes: model.num_classes.min(batch.prompts.len()),
        });
    }
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);

    let mut visual = Vec::with_capacity(batch.inputs.len());
    for input in &batch.inputs {
        visual.push(build_visual(&mut tape, &bound, input, &model.vision)?);
    }
    let z_v = tape.concat_rows(&visual)?;

    let mut classes = batch.labels.clone();
    classes.sort_unstable();
    classes.dedup();
    let mut semantic = Vec::with_capacity(classes.len());
    for &c in &classes {
        let s_hat = build_encode_text(&mut tape, &bound, &batch.prompts[c], &model.text)?;
        semantic.push(build_project_semantic(&mut tape, &bound, s_hat)?);
    }
    let per_class = tape.concat_rows(&semantic)?;
    let rows = batch
        .labels
        .iter()
        .map(|y| classes.binary_search(y).expect("label collected above"))
        .collect();
    let z_s = tape.gather_rows(per_class, rows)?;

    let logits_v = build_head_logits(&mut tape, &bound, HEAD, z_v)?;
    let logits_s = build_head_logits(&mut tape, &bound, model.semantic_head(), z_s)?;
    let l_vce = tape.cross_entropy(logits_v, &batch.labels)?;
    let l_sce = tape.cross_entropy(logits_s, &batch.labels)?;
    let out = match objective {
        Objective::Visual => l_vce,
        Objective::Semantic => l_sce,
        Objective::Combined { lambda } => {
            let weighted = tape.scale(l_sce, lambda);
            tape.add(l_vce, weighted)?
        }
    };
    let loss = BatchLoss {
        l_vce: tape.value(l_vce).get(0, 0),
        l_sce: tape.value(l_sce).get(0, 0),
        objective: tape.value(out).get(0, 0),
    };
    let grads = if want_grads {
        let g = tape.backward(out)?;
        Some(bound.gradients(&g, params))
    } else {
        None
    };
    Ok((loss, grads))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub epoch: usize,
    pub batch_index: usize,
    pub l_vce: f64,
    pub l_sce: f64,
    pub l_total: f64,
    pub lr: f64,
}

pub struct TrainOutcome {
    pub params: ParamStore,
    pub velocity: ParamStore,
    pub log: Vec<LossReport>,
    pub epochs_run: usize,
}

impl TrainOutcome {
    /// Mean total loss of one epoch.
    pub fn epoch_mean(&self, epoch: usize) -> Option<f64> {
        let v: Vec<f64> = self
            .log
            .iter()
            .filter(|r| r.epoch == epoch)
            .map(|r| r.l_total)
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// Head row of each base class, in `base.class_ids` order.
pub fn base_label_map(base: &SessionData) -> impl Fn(usize) -> Option<usize> + '_ {
    move |class_id| base.class_ids.binary_search(&class_id).ok()
}

fn is_frozen_text(name: &str) -> bool {
    name.starts_with("text.") && !name.starts_with("text.proj.")
}

/// Optimizes the full backbone on the base session.
///
/// Each epoch shuffles the base training set with the seeded generator,
/// walks it in batches of `batch_size`, pairs every image with its class
/// prompt, and takes one SGD-with-momentum step per batch at `lr_at(epoch)`.
pub fn train_base_session(
    base: &SessionData,
    manifest: &DatasetManifest,
    inputs: &[Vec<f64>],
    model: &ModelConfig,
    config: &TrainConfig,
    initial: ParamStore,
) -> Result<TrainOutcome> {
    let mut log = Vec::new();
    let (params, velocity) = train_base_session_logged(base, manifest, inputs, model, config, initial, &mut log)?;
    Ok(TrainOutcome {
        params,
        velocity,
        log,
        epochs_run: config.total_epochs(),
    })
}

/// As [`train_base_session`], appending to `log` as batches complete so the
/// caller keeps the partial log when training fails. Returns the final
/// parameters and optimizer velocity.
pub fn train_base_session_logged(
    base: &SessionData,
    manifest: &DatasetManifest,
    inputs: &[Vec<f64>],
    model: &ModelConfig,
    config: &TrainConfig,
    initial: ParamStore,
    log: &mut Vec<LossReport>,
) -> Result<(ParamStore, ParamStore)> {
    config.validate()?;
    model.validate()?;
    if base.class_ids.len() != model.num_classes {
        return Err(SvtError::Config(format!(
            "base session has {} classes but the head has {} rows",
            base.class_ids.len(),
            model.num_classes
        )));
    }
    if base.train_examples.is_empty() {
        return Err(SvtError::Empty("base session has no training examples".into()));
    }
    let prompts = PromptSet::build(
        base.class_ids.iter().map(|&c| (c, manifest.class_word(c))),
        &config.prompt_template,
        &model.text,
    )?;
    let prompt_ids: Vec<Vec<usize>> = prompts.entries.iter().map(|e| e.token_ids.clone()).collect();
    let row_of = base_label_map(base);
    let augment = Augment {
        flip: config.augment_flip,
        crop_pad: config.augment_crop_pad,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let mut params = initial;
    let mut velocity = params.zeros_like();
    let mut order = base.train_examples.clone();

    for epoch in 0..config.total_epochs() {
        let lr = lr_at(epoch, config)?;
        order.shuffle(&mut rng);
        for (batch_index, chunk) in order.chunks(config.batch_size).enumerate() {
            let augmented: Vec<Vec<f64>> = chunk
                .iter()
                .map(|&i| augment.apply(&inputs[i], &model.vision.input, &mut rng))
                .collect();
            let labels = chunk
                .iter()
                .map(|&i| {
                    let c = manifest.example(i).class_id;
                    row_of(c).ok_or(SvtError::Label {
                        label: c,
                        classes: model.num_classes,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let batch = PairBatch {
                inputs: augmented.iter().map(Vec::as_slice).collect(),
                labels,
                prompts: &prompt_ids,
            };
            let (loss, grads) = match batch_loss(
                &params,
                model,
                &batch,
                Objective::Combined {
                    lambda: config.lambda,
                },
                true,
            ) {
                Ok(r) => r,
                Err(SvtError::Numeric(_)) => return Err(SvtError::Divergence { epoch, batch: batch_index }),
                Err(e) => return Err(e),
            };
            if !loss.objective.is_finite() {
                return Err(SvtError::Divergence {
                    epoch,
                    batch: batch_index,
                });
            }
            let mut grads = grads.expect("requested");
            if config.freeze_text_encoder {
                for (name, g) in grads.iter_mut() {
                    if is_frozen_text(name) {
                        g.data_mut().iter_mut().for_each(|v| *v = 0.0);
                    }
                }
            }
            sgd_momentum_step(&mut params, &grads, &mut velocity, lr, config.momentum)?;
            log.push(LossReport {
                epoch,
                batch_index,
                l_vce: loss.l_vce,
                l_sce: loss.l_sce,
                l_total: loss.objective,
                lr,
            });
        }
    }
    Ok((params, velocity))
}

/// Loss log as `epoch,batch,l_vce,l_sce,l_total,lr` CSV.
pub fn loss_log_csv(log: &[LossReport]) -> String {
    let mut out = String::from("epoch,batch,l_vce,l_sce,l_total,lr\n");
    for r in log {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.epoch, r.batch_index, r.l_vce, r.l_sce, r.l_total, r.lr
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frozen_set_keeps_projection_trainable() {
        assert!(is_frozen_text("text.token"));
        assert!(is_frozen_text("text.blocks.0.attn.q.weight"));
        assert!(!is_frozen_text("text.proj.fc.weight"));
        assert!(!is_frozen_text("vision.pos"));
        assert!(!is_frozen_text("head.weight"));
    }

    #[test]
    fn loss_log_header() {
        let csv = loss_log_csv(&[LossReport {
            epoch: 0,
            batch_index: 1,
            l_vce: 0.5,
            l_sce: 0.25,
            l_total: 0.75,
            lr: 0.01,
        }]);
        assert_eq!(csv, "epoch,batch,l_vce,l_sce,l_total,lr\n0,1,0.5,0.25,0.75,0.01\n");
    }
}
