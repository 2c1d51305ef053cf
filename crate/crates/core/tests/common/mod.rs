//! Scalar-loop reference implementations and fixtures shared by the
//! integration tests. Nothing here goes through the tape.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use svt_core::model::{init_backbone, ModelConfig};
use svt_core::params::ParamStore;
use svt_core::tensor::Matrix;
use svt_core::text::{TextConfig, PAD_ID};
use svt_core::vision::{InputLayout, VisionConfig};

pub type Rows = Vec<Vec<f64>>;

pub fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

fn t(p: &ParamStore, name: &str) -> Matrix {
    p.get(name).unwrap_or_else(|_| panic!("missing {name}")).clone()
}

/// `x · W + b` with `W` stored `in × out`.
pub fn linear(x: &[Vec<f64>], p: &ParamStore, prefix: &str) -> Rows {
    let w = t(p, &format!("{prefix}.weight"));
    let b = t(p, &format!("{prefix}.bias"));
    x.iter()
        .map(|row| {
            (0..w.cols())
                .map(|o| {
                    let mut s = b.get(0, o);
                    for (i, xi) in row.iter().enumerate() {
                        s += xi * w.get(i, o);
                    }
                    s
                })
                .collect()
        })
        .collect()
}

pub fn layer_norm(x: &[Vec<f64>], p: &ParamStore, prefix: &str) -> Rows {
    let g = t(p, &format!("{prefix}.scale"));
    let b = t(p, &format!("{prefix}.offset"));
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            row.iter()
                .enumerate()
                .map(|(c, v)| (v - mean) / (var + 1e-5).sqrt() * g.get(0, c) + b.get(0, c))
                .collect()
        })
        .collect()
}

/// Multi-head attention where token `i` may look at token `j` iff
/// `allowed(i, j)`.
pub fn attention(x: &[Vec<f64>], p: &ParamStore, prefix: &str, heads: usize, allowed: &dyn Fn(usize, usize) -> bool) -> Rows {
    let q = linear(x, p, &format!("{prefix}.q"));
    let k = linear(x, p, &format!("{prefix}.k"));
    let v = linear(x, p, &format!("{prefix}.v"));
    let n = x.len();
    let d = q[0].len();
    let hd = d / heads;
    let mut mixed = vec![vec![0.0; d]; n];
    for h in 0..heads {
        let cols = h * hd..(h + 1) * hd;
        for i in 0..n {
            let mut scores = vec![f64::NEG_INFINITY; n];
            for j in 0..n {
                if allowed(i, j) {
                    let s: f64 = cols.clone().map(|c| q[i][c] * k[j][c]).sum();
                    scores[j] = s / (hd as f64).sqrt();
                }
            }
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
            for j in 0..n {
                let w = (scores[j] - m).exp() / z;
                for c in cols.clone() {
                    mixed[i][c] += w * v[j][c];
                }
            }
        }
    }
    linear(&mixed, p, &format!("{prefix}.out"))
}

pub fn block(x: &[Vec<f64>], p: &ParamStore, prefix: &str, heads: usize, allowed: &dyn Fn(usize, usize) -> bool) -> Rows {
    let a = attention(&layer_norm(x, p, &format!("{prefix}.norm1")), p, &format!("{prefix}.attn"), heads, allowed);
    let h: Rows = x.iter().zip(&a).map(|(r, s)| r.iter().zip(s).map(|(u, v)| u + v).collect()).collect();
    let f1 = linear(&layer_norm(&h, p, &format!("{prefix}.norm2")), p, &format!("{prefix}.mlp.fc1"));
    let act: Rows = f1.iter().map(|r| r.iter().map(|&v| gelu(v)).collect()).collect();
    let f2 = linear(&act, p, &format!("{prefix}.mlp.fc2"));
    h.iter().zip(&f2).map(|(r, s)| r.iter().zip(s).map(|(u, v)| u + v).collect()).collect()
}

/// Contiguous group of position `pos` along an axis cut into windows of
/// `window`, displaced by `shift`: positions before `shift` form their own
/// group and every later run of `window` positions forms the next.
pub fn window_group(pos: usize, window: usize, shift: usize) -> usize {
    (pos + window - shift) / window
}

pub fn mean_rows(x: &[Vec<f64>]) -> Vec<f64> {
    let mut m = vec![0.0; x[0].len()];
    for row in x {
        for (a, b) in m.iter_mut().zip(row) {
            *a += b;
        }
    }
    m.iter().map(|v| v / x.len() as f64).collect()
}

/// Image or feature input split into patch rows.
pub fn patches(input: &[f64], layout: &InputLayout) -> Rows {
    match *layout {
        InputLayout::Features { chunk, .. } => input.chunks(chunk).map(<[f64]>::to_vec).collect(),
        InputLayout::Image {
            image_size: n,
            channels: ch,
            patch_size: ps,
        } => {
            let mut out = Vec::new();
            for pr in 0..n / ps {
                for pc in 0..n / ps {
                    let mut patch = Vec::new();
                    for y in 0..ps {
                        for x in 0..ps {
                            for c in 0..ch {
                                patch.push(input[((pr * ps + y) * n + pc * ps + x) * ch + c]);
                            }
                        }
                    }
                    out.push(patch);
                }
            }
            out
        }
    }
}

pub fn encode_patches(patch_rows: &[Vec<f64>], p: &ParamStore, cfg: &VisionConfig) -> Rows {
    let pos = t(p, "vision.pos");
    let mut h: Rows = linear(patch_rows, p, "vision.patch")
        .into_iter()
        .enumerate()
        .map(|(i, r)| r.iter().enumerate().map(|(c, v)| v + pos.get(i, c)).collect())
        .collect();
    let (rows, cols) = cfg.input.grid();
    for l in 0..cfg.depth {
        let prefix = format!("vision.blocks.{l}");
        h = if cfg.global_attention {
            block(&h, p, &prefix, cfg.heads, &|_, _| true)
        } else {
            let (wr, wc) = (cfg.window_size.min(rows), cfg.window_size.min(cols));
            let odd = cfg.shifted_windows && l % 2 == 1;
            let sr = if odd && wr < rows { wr / 2 } else { 0 };
            let sc = if odd && wc < cols { wc / 2 } else { 0 };
            let same = |i: usize, j: usize| {
                let (ri, ci, rj, cj) = (i / cols, i % cols, j / cols, j % cols);
                window_group(ri, wr, sr) == window_group(rj, wr, sr) && window_group(ci, wc, sc) == window_group(cj, wc, sc)
            };
            block(&h, p, &prefix, cfg.heads, &same)
        };
    }
    h
}

pub fn pool_project(rows: &[Vec<f64>], p: &ParamStore) -> Vec<f64> {
    let pooled = vec![mean_rows(rows)];
    if p.contains("vision.head.fc.weight") {
        return linear(&pooled, p, "vision.head.fc").remove(0);
    }
    let h = linear(&pooled, p, "vision.head.fc1");
    let a: Rows = h.iter().map(|r| r.iter().map(|&v| gelu(v)).collect()).collect();
    linear(&a, p, "vision.head.fc2").remove(0)
}

pub fn visual(input: &[f64], p: &ParamStore, cfg: &VisionConfig) -> Vec<f64> {
    pool_project(&encode_patches(&patches(input, &cfg.input), p, cfg), p)
}

pub fn encode_text(ids: &[usize], p: &ParamStore, cfg: &TextConfig) -> Vec<f64> {
    let tok = t(p, "text.token");
    let pos = t(p, "text.pos");
    let mut h: Rows = ids
        .iter()
        .enumerate()
        .map(|(i, &id)| (0..cfg.token_dim).map(|c| tok.get(id, c) + pos.get(i, c)).collect())
        .collect();
    let real = |j: usize| ids[j] != PAD_ID;
    for l in 0..cfg.depth {
        h = block(&h, p, &format!("text.blocks.{l}"), cfg.heads, &|_, j| real(j));
    }
    let kept: Rows = h.into_iter().enumerate().filter(|(j, _)| real(*j)).map(|(_, r)| r).collect();
    let pooled = mean_rows(&kept);
    if cfg.token_dim != cfg.d_s {
        return linear(&[pooled], p, "text.pool").remove(0);
    }
    pooled
}

pub fn project(s: &[f64], p: &ParamStore) -> Vec<f64> {
    let x = vec![s.to_vec()];
    if p.contains("text.proj.fc.weight") {
        return linear(&x, p, "text.proj.fc").remove(0);
    }
    let h = linear(&x, p, "text.proj.fc1");
    let a: Rows = h.iter().map(|r| r.iter().map(|&v| gelu(v)).collect()).collect();
    linear(&a, p, "text.proj.fc2").remove(0)
}

pub fn cross_entropy(logits: &[f64], y: usize) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    lse - logits[y]
}

pub fn head_logits(z: &[f64], p: &ParamStore, prefix: &str) -> Vec<f64> {
    let w = t(p, &format!("{prefix}.weight"));
    let b = t(p, &format!("{prefix}.bias"));
    (0..w.rows())
        .map(|c| b.get(0, c) + (0..w.cols()).map(|j| w.get(c, j) * z[j]).sum::<f64>())
        .collect()
}

/// `(L_VCE, L_SCE)` of a batch, one item at a time.
pub fn batch_losses(
    p: &ParamStore,
    model: &ModelConfig,
    inputs: &[Vec<f64>],
    labels: &[usize],
    prompts: &[Vec<usize>],
) -> (f64, f64) {
    let sem_head = if model.separate_heads { "head_sem" } else { "head" };
    let mut vce = 0.0;
    let mut sce = 0.0;
    for (x, &y) in inputs.iter().zip(labels) {
        let zv = visual(x, p, &model.vision);
        let zs = project(&encode_text(&prompts[y], p, &model.text), p);
        vce += cross_entropy(&head_logits(&zv, p, "head"), y);
        sce += cross_entropy(&head_logits(&zs, p, sem_head), y);
    }
    (vce / labels.len() as f64, sce / labels.len() as f64)
}

/// Fresh parameters with every entry jittered, so norm scales, offsets and
/// biases are all non-trivial.
pub fn jittered_params(model: &ModelConfig, seed: u64, amount: f64) -> ParamStore {
    let mut p = init_backbone(model, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for (_, m) in p.iter_mut() {
        for v in m.data_mut() {
            *v += rng.random_range(-amount..amount);
        }
    }
    p
}

pub fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Random token ids with at least one real token and trailing padding.
pub fn random_prompt(rng: &mut ChaCha8Rng, cfg: &TextConfig) -> Vec<usize> {
    let real = rng.random_range(1..=cfg.max_len);
    let mut ids: Vec<usize> = (0..real).map(|_| rng.random_range(1..cfg.vocab_size)).collect();
    ids.resize(cfg.max_len, PAD_ID);
    ids
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// A random small model. Images are 8×8 with 2- or 4-pixel patches; windows
/// and shifts vary with the draw.
pub fn random_model(rng: &mut ChaCha8Rng) -> ModelConfig {
    let image = rng.random_bool(0.6);
    let input = if image {
        InputLayout::Image {
            image_size: 8,
            channels: rng.random_range(1..=3),
            patch_size: if rng.random_bool(0.5) { 2 } else { 4 },
        }
    } else {
        let chunk = [2usize, 3, 4][rng.random_range(0..3)];
        InputLayout::Features {
            dim: chunk * rng.random_range(2..=6),
            chunk,
        }
    };
    let heads = rng.random_range(1..=2);
    let d_v = rng.random_range(3..=6);
    let (rows, cols) = input.grid();
    let window_size = [1usize, 2, 4][rng.random_range(0..3)];
    let tiles = rows % window_size.min(rows) == 0 && cols % window_size.min(cols) == 0;
    let token_dim = 2 * rng.random_range(1..=3);
    ModelConfig {
        vision: VisionConfig {
            input,
            embed_dim: heads * rng.random_range(2..=4),
            depth: rng.random_range(0..=2),
            heads,
            window_size,
            shifted_windows: rng.random_bool(0.7),
            global_attention: !tiles || rng.random_bool(0.2),
            mlp_hidden: rng.random_range(2..=8),
            head_hidden: if rng.random_bool(0.5) { 0 } else { rng.random_range(2..=6) },
            d_v,
        },
        text: TextConfig {
            vocab_size: rng.random_range(4..=20),
            max_len: rng.random_range(2..=6),
            token_dim,
            depth: rng.random_range(0..=2),
            heads: if token_dim % 2 == 0 && rng.random_bool(0.5) { 2 } else { 1 },
            mlp_hidden: rng.random_range(2..=8),
            d_s: if rng.random_bool(0.5) { token_dim } else { rng.random_range(2..=5) },
            projection_hidden: if rng.random_bool(0.5) { 0 } else { rng.random_range(2..=6) },
            d_v,
        },
        num_classes: rng.random_range(2..=4),
        separate_heads: rng.random_bool(0.3),
    }
}

/// One method row of a results table: session cells, printed Avg., and the
/// printed improvement (absent on the reference row).
pub struct TableRow {
    pub method: &'static str,
    pub sessions: &'static [f64],
    pub avg: f64,
    pub improvement: Option<f64>,
}

macro_rules! row {
    ($m:expr, [$($s:expr),*], $avg:expr, $imp:expr) => {
        TableRow { method: $m, sessions: &[$($s),*], avg: $avg, improvement: Some($imp) }
    };
    ($m:expr, [$($s:expr),*], $avg:expr) => {
        TableRow { method: $m, sessions: &[$($s),*], avg: $avg, improvement: None }
    };
}

/// CUB200, 11 sessions.
pub fn table_cub200() -> Vec<TableRow> {
    vec![
        row!("CEC", [75.85, 71.94, 68.50, 63.50, 62.43, 58.27, 57.73, 55.81, 54.83, 53.52, 52.28], 61.33, 17.32),
        row!("MetaFSCIL", [75.90, 72.41, 68.78, 64.78, 62.96, 59.99, 58.30, 56.85, 54.78, 53.82, 52.64], 61.93, 16.72),
        row!("FeSSSS", [79.60, 73.46, 70.32, 66.38, 63.97, 59.63, 58.19, 57.56, 55.01, 54.31, 52.98], 62.85, 15.80),
        row!("ALICE", [77.40, 72.70, 70.60, 67.20, 65.90, 63.40, 62.90, 61.90, 60.50, 60.60, 60.10], 65.75, 12.90),
        row!("LIMIT", [75.89, 73.55, 71.99, 68.14, 67.42, 63.61, 62.40, 61.35, 59.91, 58.66, 57.41], 65.48, 13.17),
        row!("MCNet", [77.57, 73.96, 70.47, 65.81, 66.16, 63.81, 62.09, 61.82, 60.41, 60.09, 59.08], 65.57, 13.08),
        row!("NC-FSCIL", [80.45, 75.98, 72.30, 70.28, 68.17, 65.16, 64.43, 63.25, 60.66, 60.01, 59.44], 67.28, 11.37),
        row!("SoftNet", [78.07, 74.58, 71.37, 67.54, 65.37, 62.60, 61.07, 59.37, 57.53, 57.21, 56.75], 64.68, 13.97),
        row!("LIMIT+V-Swin-T", [82.59, 81.09, 79.46, 76.68, 76.94, 75.12, 74.59, 73.14, 73.40, 73.17, 73.34], 76.32, 2.33),
        row!("LIMIT+SV-Swin-T", [84.19, 82.63, 81.21, 78.97, 79.38, 77.64, 77.55, 75.71, 75.91, 75.77, 76.17], 78.65),
    ]
}

/// Mini-ImageNet, 9 sessions.
pub fn table_mini_imagenet() -> Vec<TableRow> {
    vec![
        row!("CEC", [72.00, 66.83, 62.97, 59.43, 56.7, 53.73, 51.19, 49.24, 47.63], 57.75, 27.32),
        row!("MetaFSCIL", [72.04, 67.94, 63.77, 60.29, 57.58, 55.16, 52.9, 50.79, 49.19], 58.85, 26.22),
        row!("FeSSSS", [81.50, 77.04, 72.92, 69.56, 67.27, 64.34, 62.07, 60.55, 58.87], 68.23, 16.84),
        row!("ALICE", [80.60, 70.60, 67.40, 64.50, 62.50, 60.00, 57.80, 56.80, 55.70], 63.99, 21.08),
        row!("LIMIT", [72.32, 68.47, 64.30, 60.78, 57.95, 55.07, 52.70, 50.72, 49.19], 59.06, 26.01),
        row!("MCNet", [72.33, 67.70, 63.50, 60.34, 57.59, 54.70, 52.13, 50.41, 49.08], 58.64, 26.43),
        row!("NC-FSCIL", [84.02, 76.80, 72.00, 67.83, 66.35, 64.04, 61.46, 59.54, 58.31], 67.82, 17.25),
        row!("SoftNet", [79.77, 75.08, 70.59, 66.93, 64.00, 61.00, 57.81, 55.81, 54.68], 65.07, 20.00),
        row!("LIMIT+V-Swin-T", [89.17, 87.39, 84.83, 83.41, 82.66, 81.20, 79.81, 79.36, 79.23], 83.01, 2.06),
        row!("LIMIT+SV-Swin-T", [90.55, 89.20, 86.80, 85.44, 84.78, 83.38, 81.91, 81.90, 81.65], 85.07),
    ]
}

/// CIFAR100, 9 sessions.
pub fn table_cifar100() -> Vec<TableRow> {
    vec![
        row!("CEC", [73.07, 68.88, 65.26, 61.19, 58.09, 55.57, 53.22, 51.34, 49.14], 59.53, 17.31),
        row!("MetaFSCIL", [74.50, 70.10, 66.84, 62.77, 59.48, 56.52, 54.36, 52.56, 49.97], 60.79, 16.05),
        row!("FeSSSS", [75.35, 70.81, 66.7, 62.73, 59.62, 56.45, 54.33, 52.10, 50.23], 60.92, 15.92),
        row!("ALICE", [79.00, 70.50, 67.10, 63.40, 61.20, 59.20, 58.10, 56.30, 54.10], 63.21, 13.63),
        row!("LIMIT", [73.81, 72.09, 67.87, 63.89, 60.70, 57.77, 55.67, 53.52, 51.23], 61.84, 15.00),
        row!("MCNet", [73.30, 69.34, 65.72, 61.70, 58.75, 56.44, 54.59, 53.01, 50.72], 60.40, 16.44),
        row!("SoftNet", [80.33, 76.23, 72.19, 67.83, 64.64, 61.39, 59.32, 57.37, 54.94], 66.03, 10.81),
        row!("NC-FSCIL", [82.52, 76.82, 73.34, 69.68, 66.19, 62.85, 60.96, 59.02, 56.11], 67.50, 9.34),
        row!("LIMIT+V-Swin-T", [82.07, 78.49, 75.90, 73.27, 72.36, 71.20, 70.60, 69.39, 67.69], 73.44, 3.40),
        row!("LIMIT+SV-Swin-T", [86.77, 82.82, 80.36, 77.20, 76.06, 74.00, 72.92, 71.68, 69.75], 76.84),
    ]
}

pub fn all_tables() -> Vec<(&'static str, Vec<TableRow>)> {
    vec![
        ("CUB200", table_cub200()),
        ("Mini-ImageNet", table_mini_imagenet()),
        ("CIFAR100", table_cifar100()),
    ]
}
