//! Embedding export for external visualization, plus an exact PCA-2D view.

use std::fmt::Write as _;
use std::path::Path;

use crate::checkpoint::write_atomic;
use crate::error::{Result, SvtError};
use crate::params::ParamStore;
use crate::protocol::DatasetManifest;
use crate::tensor::Matrix;
use crate::vision::{forward_visual, VisionConfig};

/// Embedded examples ready to be written, sorted by example id.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRows {
    pub ids: Vec<String>,
    pub words: Vec<String>,
    pub vectors: Matrix,
}

/// Selects the examples among `candidates` whose class word is in
/// `class_filter` (all when it is empty) and embeds them.
pub fn collect_embeddings(
    params: &ParamStore,
    vision: &VisionConfig,
    manifest: &DatasetManifest,
    inputs: &[Vec<f64>],
    candidates: &[usize],
    class_filter: &[String],
) -> Result<EmbeddingRows> {
    let mut wanted = Vec::with_capacity(class_filter.len());
    for word in class_filter {
        let c = manifest
            .class_of_word(word)
            .ok_or_else(|| SvtError::Filter(word.clone()))?;
        if !candidates.iter().any(|&i| manifest.example(i).class_id == c) {
            return Err(SvtError::Filter(word.clone()));
        }
        wanted.push(c);
    }
    let mut selected: Vec<usize> = candidates
        .iter()
        .copied()
        .filter(|&i| wanted.is_empty() || wanted.contains(&manifest.example(i).class_id))
        .collect();
    selected.sort_by(|&a, &b| manifest.example(a).id.cmp(&manifest.example(b).id));
    selected.dedup();
    let batch: Vec<Vec<f64>> = selected.iter().map(|&i| inputs[i].clone()).collect();
    Ok(EmbeddingRows {
        ids: selected.iter().map(|&i| manifest.example(i).id.clone()).collect(),
        words: selected
            .iter()
            .map(|&i| manifest.class_word(manifest.example(i).class_id).to_string())
            .collect(),
        vectors: forward_visual(&batch, params, vision)?,
    })
}

/// `example_id<TAB>class_word<TAB>v_1…v_d` with a header line.
pub fn embeddings_tsv(rows: &EmbeddingRows) -> String {
    let mut out = String::from("example_id\tclass_word");
    for j in 1..=rows.vectors.cols() {
        let _ = write!(out, "\tv_{j}");
    }
    out.push('\n');
    for (r, (id, word)) in rows.ids.iter().zip(&rows.words).enumerate() {
        out.push_str(id);
        out.push('\t');
        out.push_str(word);
        for v in rows.vectors.row(r) {
            let _ = write!(out, "\t{v}");
        }
        out.push('\n');
    }
    out
}

/// Embeds and writes the filtered examples; returns the data row count.
#[allow(clippy::too_many_arguments)]
pub fn export_embeddings(
    params: &ParamStore,
    vision: &VisionConfig,
    manifest: &DatasetManifest,
    inputs: &[Vec<f64>],
    candidates: &[usize],
    class_filter: &[String],
    path: &Path,
) -> Result<usize> {
    let rows = collect_embeddings(params, vision, manifest, inputs, candidates, class_filter)?;
    write_atomic(path, embeddings_tsv(&rows).as_bytes())?;
    Ok(rows.ids.len())
}

/// Projection of the centered rows onto the top two principal axes,
/// computed by power iteration with deflation from a fixed start vector.
/// Each axis is signed so its largest-magnitude component is positive.
pub fn pca_2d(x: &Matrix) -> Matrix {
    let (n, d) = x.shape();
    let mut out = Matrix::zeros(n, 2);
    if n == 0 || d == 0 {
        return out;
    }
    let mean = x.mean_rows();
    let mut centered = x.clone();
    for r in 0..n {
        for (v, m) in centered.row_mut(r).iter_mut().zip(mean.data()) {
            *v -= m;
        }
    }
    let mut cov = centered.transpose().matmul(&centered).expect("square by construction");
    let mut axes: Vec<Vec<f64>> = Vec::new();
    for _ in 0..2.min(d) {
        let mut v: Vec<f64> = (0..d).map(|j| 1.0 + j as f64 / d as f64).collect();
        let mut lambda = 0.0;
        for _ in 0..1000 {
            let mut w = vec![0.0; d];
            for (i, wi) in w.iter_mut().enumerate() {
                *wi = crate::tensor::dot(cov.row(i), &v);
            }
            let norm = crate::tensor::l2_norm(&w);
            if norm == 0.0 {
                break;
            }
            w.iter_mut().for_each(|x| *x /= norm);
            let delta: f64 = w.iter().zip(&v).map(|(a, b)| (a - b).abs()).sum();
            v = w;
            lambda = norm;
            if delta < 1e-13 {
                break;
            }
        }
        let k = (0..d)
            .max_by(|&a, &b| v[a].abs().total_cmp(&v[b].abs()))
            .unwrap_or(0);
        if v[k] < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        for i in 0..d {
            for j in 0..d {
                let c = cov.get(i, j) - lambda * v[i] * v[j];
                cov.set(i, j, c);
            }
        }
        axes.push(v);
    }
    for r in 0..n {
        for (a, axis) in axes.iter().enumerate() {
            out.set(r, a, crate::tensor::dot(centered.row(r), axis));
        }
    }
    out
}

pub fn pca_tsv(rows: &EmbeddingRows) -> String {
    let p = pca_2d(&rows.vectors);
    let mut out = String::from("example_id\tclass_word\tpc1\tpc2\n");
    for (r, (id, word)) in rows.ids.iter().zip(&rows.words).enumerate() {
        let _ = writeln!(out, "{id}\t{word}\t{}\t{}", p.get(r, 0), p.get(r, 1));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pca_recovers_dominant_axis() {
        let x = Matrix::from_rows(&[
            vec![-2.0, 0.1, 0.0],
            vec![-1.0, -0.1, 0.0],
            vec![1.0, -0.1, 0.0],
            vec![2.0, 0.1, 0.0],
        ])
        .unwrap();
        let p = pca_2d(&x);
        for r in 0..4 {
            assert!((p.get(r, 0) - x.get(r, 0)).abs() < 1e-9);
            assert!((p.get(r, 1).abs() - 0.1).abs() < 1e-9);
        }
    }
}
