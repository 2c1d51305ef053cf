//! Pre-norm transformer blocks shared by the image and text encoders.
//!
//! Windowed attention follows the shifted-window scheme: tokens on a
//! `rows × cols` grid are cyclically rolled by the shift, partitioned into
//! non-overlapping windows, and tokens that were not contiguous before the
//! roll are masked from each other.

use std::sync::Arc;

use crate::autodiff::{Tape, Var};
use crate::error::{Result, SvtError};
use crate::params::{linear, BoundParams, Initializer, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockDims {
    pub dim: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
}

/// Which tokens may attend to which.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AttentionPattern {
    /// Every token attends every allowed key. `key_mask[j] == false`
    /// excludes key `j` (padding).
    Global { key_mask: Option<Vec<bool>> },
    /// Window attention over a token grid.
    Windowed {
        grid: (usize, usize),
        window: (usize, usize),
        shift: (usize, usize),
    },
}

pub fn init_block(init: &mut Initializer, store: &mut ParamStore, prefix: &str, dims: BlockDims) {
    let d = dims.dim;
    init.norm(store, &format!("{prefix}.norm1"), d);
    for proj in ["q", "k", "v", "out"] {
        init.linear(store, &format!("{prefix}.attn.{proj}"), d, d);
    }
    init.norm(store, &format!("{prefix}.norm2"), d);
    init.linear(store, &format!("{prefix}.mlp.fc1"), d, dims.mlp_hidden);
    init.linear(store, &format!("{prefix}.mlp.fc2"), dims.mlp_hidden, d);
}

/// `x + attn(norm1(x))`, then `h + mlp(norm2(h))`.
pub fn block(
    tape: &mut Tape,
    bound: &BoundParams,
    prefix: &str,
    x: Var,
    dims: BlockDims,
    pattern: &AttentionPattern,
) -> Result<Var> {
    let n1 = tape.layer_norm(
        x,
        bound.var(&format!("{prefix}.norm1.scale"))?,
        bound.var(&format!("{prefix}.norm1.offset"))?,
    )?;
    let a = attention(tape, bound, &format!("{prefix}.attn"), n1, dims, pattern)?;
    let h = tape.add(x, a)?;
    let n2 = tape.layer_norm(
        h,
        bound.var(&format!("{prefix}.norm2.scale"))?,
        bound.var(&format!("{prefix}.norm2.offset"))?,
    )?;
    let f1 = linear(tape, bound, &format!("{prefix}.mlp.fc1"), n2)?;
    let act = tape.gelu(f1);
    let f2 = linear(tape, bound, &format!("{prefix}.mlp.fc2"), act)?;
    tape.add(h, f2)
}

/// Multi-head self-attention over the rows of `x`.
pub fn attention(
    tape: &mut Tape,
    bound: &BoundParams,
    prefix: &str,
    x: Var,
    dims: BlockDims,
    pattern: &AttentionPattern,
) -> Result<Var> {
    if dims.heads == 0 || dims.dim % dims.heads != 0 {
        return Err(SvtError::Config(format!(
            "dimension {} is not divisible by {} heads",
            dims.dim, dims.heads
        )));
    }
    let n = tape.shape(x).0;
    let q = linear(tape, bound, &format!("{prefix}.q"), x)?;
    let k = linear(tape, bound, &format!("{prefix}.k"), x)?;
    let v = linear(tape, bound, &format!("{prefix}.v"), x)?;
    let mixed = match pattern {
        AttentionPattern::Global { key_mask } => {
            let mask = match key_mask {
                Some(keys) => {
                    if keys.len() != n {
                        return Err(SvtError::Shape(format!(
                            "key mask of {} entries for {n} tokens",
                            keys.len()
                        )));
                    }
                    Some(Arc::new((0..n).flat_map(|_| keys.iter().copied()).collect()))
                }
                None => None,
            };
            multi_head(tape, q, k, v, dims, mask)?
        }
        AttentionPattern::Windowed {
            grid,
            window,
            shift,
        } => {
            if grid.0 * grid.1 != n {
                return Err(SvtError::Shape(format!(
                    "{}×{} grid for {n} tokens",
                    grid.0, grid.1
                )));
            }
            let plan = WindowPlan::new(*grid, *window, *shift)?;
            let mut outs = Vec::with_capacity(plan.windows.len());
            for w in &plan.windows {
                let qw = tape.gather_rows(q, w.tokens.clone())?;
                let kw = tape.gather_rows(k, w.tokens.clone())?;
                let vw = tape.gather_rows(v, w.tokens.clone())?;
                outs.push(multi_head(tape, qw, kw, vw, dims, w.mask.clone())?);
            }
            let stacked = tape.concat_rows(&outs)?;
            tape.gather_rows(stacked, plan.inverse)?
        }
    };
    linear(tape, bound, &format!("{prefix}.out"), mixed)
}

fn multi_head(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    dims: BlockDims,
    mask: Option<Arc<Vec<bool>>>,
) -> Result<Var> {
    let head_dim = dims.dim / dims.heads;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut heads = Vec::with_capacity(dims.heads);
    for h in 0..dims.heads {
        let qh = tape.slice_cols(q, h * head_dim, head_dim)?;
        let kh = tape.slice_cols(k, h * head_dim, head_dim)?;
        let vh = tape.slice_cols(v, h * head_dim, head_dim)?;
        let kt = tape.transpose(kh);
        let raw = tape.matmul(qh, kt)?;
        let scores = tape.scale(raw, scale);
        let probs = tape.softmax_rows(scores, mask.clone())?;
        heads.push(tape.matmul(probs, vh)?);
    }
    if heads.len() == 1 {
        return Ok(heads[0]);
    }
    tape.concat_cols(&heads)
}

struct Window {
    /// Original token indices, in rolled-grid raster order.
    tokens: Vec<usize>,
    mask: Option<Arc<Vec<bool>>>,
}

struct WindowPlan {
    windows: Vec<Window>,
    /// Position of each original token within the concatenated windows.
    inverse: Vec<usize>,
}

fn region(pos: usize, len: usize, window: usize, shift: usize) -> u8 {
    if shift == 0 || pos < len - window {
        0
    } else if pos < len - shift {
        1
    } else {
        2
    }
}

impl WindowPlan {
    fn new(grid: (usize, usize), window: (usize, usize), shift: (usize, usize)) -> Result<Self> {
        let (rows, cols) = grid;
        let (wr, wc) = window;
        if wr == 0 || wc == 0 || rows % wr != 0 || cols % wc != 0 {
            return Err(SvtError::Config(format!(
                "{wr}×{wc} windows do not tile a {rows}×{cols} grid"
            )));
        }
        if shift.0 >= wr || shift.1 >= wc {
            return Err(SvtError::Config(format!(
                "shift {shift:?} must be smaller than window {window:?}"
            )));
        }
        let shifted = shift != (0, 0);
        let mut windows = Vec::new();
        let mut inverse = vec![0usize; rows * cols];
        let mut offset = 0;
        for wi in 0..rows / wr {
            for wj in 0..cols / wc {
                let mut tokens = Vec::with_capacity(wr * wc);
                let mut labels = Vec::with_capacity(wr * wc);
                for r in wi * wr..(wi + 1) * wr {
                    for c in wj * wc..(wj + 1) * wc {
                        let src = ((r + shift.0) % rows) * cols + (c + shift.1) % cols;
                        inverse[src] = offset + tokens.len();
                        tokens.push(src);
                        labels.push((region(r, rows, wr, shift.0), region(c, cols, wc, shift.1)));
                    }
                }
                let mask = shifted.then(|| {
                    Arc::new(
                        labels
                            .iter()
                            .flat_map(|a| labels.iter().map(move |b| a == b))
                            .collect(),
                    )
                });
                offset += tokens.len();
                windows.push(Window { tokens, mask });
            }
        }
        Ok(WindowPlan { windows, inverse })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unshifted_plan_partitions_grid() {
        let plan = WindowPlan::new((4, 4), (2, 2), (0, 0)).unwrap();
        assert_eq!(plan.windows.len(), 4);
        assert_eq!(plan.windows[0].tokens, vec![0, 1, 4, 5]);
        assert_eq!(plan.windows[3].tokens, vec![10, 11, 14, 15]);
        assert!(plan.windows.iter().all(|w| w.mask.is_none()));
    }

    #[test]
    fn shifted_plan_masks_wrapped_tokens() {
        // 1×4 grid, window 2, shift 1: rolled order is [1,2,3,0]; windows
        // {1,2} and {3,0}; tokens 3 and 0 were not adjacent.
        let plan = WindowPlan::new((1, 4), (1, 2), (0, 1)).unwrap();
        assert_eq!(plan.windows[0].tokens, vec![1, 2]);
        assert_eq!(plan.windows[1].tokens, vec![3, 0]);
        assert_eq!(plan.windows[0].mask.as_deref().unwrap(), &vec![true; 4]);
        assert_eq!(
            plan.windows[1].mask.as_deref().unwrap(),
            &vec![true, false, false, true]
        );
        let mut covered = plan.inverse.clone();
        covered.sort_unstable();
        assert_eq!(covered, vec![0, 1, 2, 3]);
    }

    #[test]
    fn non_tiling_window_rejected() {
        assert!(WindowPlan::new((4, 4), (3, 3), (0, 0)).is_err());
    }
}
