use crate::error::{Result, SvtError};
use crate::model::{ClassifierHead, EmbeddingBatch};

/// `−log softmax(logits)[true_class]` via max-shifted log-sum-exp.
pub fn cross_entropy(logits: &[f64], true_class: usize) -> Result<f64> {
    if logits.len() < 2 {
        return Err(SvtError::Shape(format!(
            "cross-entropy needs at least 2 classes, got {}",
            logits.len()
        )));
    }
    if true_class >= logits.len() {
        return Err(SvtError::Label {
            label: true_class,
            classes: logits.len(),
        });
    }
    if !logits.iter().all(|v| v.is_finite()) {
        return Err(SvtError::Numeric("cross-entropy logits".into()));
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|v| (v - max).exp()).sum();
    // Clamp the rounding residue that can make lse - logit slightly negative.
    Ok((max + sum.ln() - logits[true_class]).max(0.0))
}

fn batch_ce(batch: &EmbeddingBatch, head: &ClassifierHead) -> Result<f64> {
    if batch.is_empty() {
        return Err(SvtError::Empty("loss over an empty batch".into()));
    }
    if batch.dim() != head.weights.cols() {
        return Err(SvtError::Shape(format!(
            "{}-dim embeddings for a {}-dim head",
            batch.dim(),
            head.weights.cols()
        )));
    }
    let mut total = 0.0;
    for (i, &y) in batch.labels.iter().enumerate() {
        if y >= head.classes() {
            return Err(SvtError::Label {
                label: y,
                classes: head.classes(),
            });
        }
        total += cross_entropy(&head.logits(batch.embeddings.row(i))?, y)?;
    }
    Ok(total / batch.len() as f64)
}

/// Mean cross-entropy of visual embeddings `z^v` under the head.
pub fn visual_ce_loss(batch: &EmbeddingBatch, head: &ClassifierHead) -> Result<f64> {
    batch_ce(batch, head)
}

/// Mean cross-entropy of projected semantic embeddings `z^s` under the head.
pub fn semantic_ce_loss(batch: &EmbeddingBatch, head: &ClassifierHead) -> Result<f64> {
    batch_ce(batch, head)
}

/// `l_vce + λ·l_sce`.
pub fn total_loss(l_vce: f64, l_sce: f64, lambda: f64) -> Result<f64> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(SvtError::Config(format!("λ must be finite and ≥ 0, got {lambda}")));
    }
    if !l_vce.is_finite() || !l_sce.is_finite() {
        return Err(SvtError::Numeric("loss components".into()));
    }
    Ok(l_vce + lambda * l_sce)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_ln_c() {
        assert!((cross_entropy(&[0.3; 4], 2).unwrap() - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn two_logit_closed_form() {
        let expected = (1.0 + (-2.0f64).exp()).ln();
        assert!((cross_entropy(&[2.0, 0.0], 0).unwrap() - expected).abs() < 1e-15);
        assert!((expected - 0.12693).abs() < 5e-6);
    }

    #[test]
    fn large_logits_do_not_overflow() {
        let l = cross_entropy(&[1000.0, 0.0], 0).unwrap();
        assert!(l >= 0.0 && l < 1e-300 + 1e-12);
        assert!(cross_entropy(&[f64::NAN, 0.0], 0).is_err());
        assert!(cross_entropy(&[1.0], 0).is_err());
    }

    #[test]
    fn total_loss_arithmetic() {
        assert_eq!(total_loss(0.7, 0.4, 0.0).unwrap(), 0.7);
        assert_eq!(total_loss(0.5, 0.25, 1.0).unwrap(), 0.75);
        assert!((total_loss(1.0, 0.3, 2.0).unwrap() - 1.6).abs() < 1e-15);
        assert!(matches!(total_loss(1.0, 1.0, -0.1), Err(SvtError::Config(_))));
    }
}
