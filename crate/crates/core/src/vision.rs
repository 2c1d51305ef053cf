//! Image encoder: patch partition, windowed transformer blocks, average
//! pooling and an MLP head producing the visual embedding `z^v`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Result, SvtError};
use crate::params::{linear, BoundParams, Initializer, ParamStore};
use crate::tensor::Matrix;
use crate::transformer::{block, init_block, AttentionPattern, BlockDims};

/// How raw example inputs become patch sequences.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum InputLayout {
    /// Square `image_size × image_size × channels` images (HWC order).
    Image {
        image_size: usize,
        channels: usize,
        patch_size: usize,
    },
    /// Raw feature vectors cut into consecutive `chunk`-long pieces,
    /// laid out as a `1 × dim/chunk` grid.
    Features { dim: usize, chunk: usize },
}

impl InputLayout {
    pub fn grid(&self) -> (usize, usize) {
        match *self {
            InputLayout::Image {
                image_size,
                patch_size,
                ..
            } => (image_size / patch_size, image_size / patch_size),
            InputLayout::Features { dim, chunk } => (1, dim / chunk),
        }
    }

    pub fn patch_dim(&self) -> usize {
        match *self {
            InputLayout::Image {
                channels,
                patch_size,
                ..
            } => patch_size * patch_size * channels,
            InputLayout::Features { chunk, .. } => chunk,
        }
    }

    pub fn input_len(&self) -> usize {
        match *self {
            InputLayout::Image {
                image_size,
                channels,
                ..
            } => image_size * image_size * channels,
            InputLayout::Features { dim, .. } => dim,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VisionConfig {
    pub input: InputLayout,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    /// Window side in patches; clipped to each grid side.
    pub window_size: usize,
    /// Shift the windows by half a window on odd layers.
    pub shifted_windows: bool,
    /// Use one global attention over all patches instead of windows.
    pub global_attention: bool,
    pub mlp_hidden: usize,
    /// Hidden width of the pooling head; 0 makes the head a single linear map.
    pub head_hidden: usize,
    pub d_v: usize,
}

impl VisionConfig {
    /// Small image configuration (32×32 RGB, 8×8 patches, 4×4 grid).
    pub fn desk_image() -> Self {
        VisionConfig {
            input: InputLayout::Image {
                image_size: 32,
                channels: 3,
                patch_size: 8,
            },
            embed_dim: 32,
            depth: 2,
            heads: 4,
            window_size: 2,
            shifted_windows: true,
            global_attention: false,
            mlp_hidden: 64,
            head_hidden: 64,
            d_v: 32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.input {
            InputLayout::Image {
                image_size,
                channels,
                patch_size,
            } => {
                if patch_size == 0 || channels == 0 || image_size == 0 || image_size % patch_size != 0 {
                    return Err(SvtError::Config(format!(
                        "image_size {image_size} must be a positive multiple of patch_size {patch_size}"
                    )));
                }
            }
            InputLayout::Features { dim, chunk } => {
                if chunk == 0 || dim == 0 || dim % chunk != 0 {
                    return Err(SvtError::Config(format!(
                        "feature dim {dim} must be a positive multiple of chunk {chunk}"
                    )));
                }
            }
        }
        if self.embed_dim == 0 || self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(SvtError::Config(format!(
                "embed_dim {} must be a positive multiple of heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.d_v == 0 || self.mlp_hidden == 0 {
            return Err(SvtError::Config("d_v and mlp_hidden must be positive".into()));
        }
        if !self.global_attention {
            let (rows, cols) = self.input.grid();
            let (wr, wc) = self.window();
            if wr == 0 || rows % wr != 0 || cols % wc != 0 {
                return Err(SvtError::Config(format!(
                    "window_size {} does not tile the {rows}×{cols} patch grid",
                    self.window_size
                )));
            }
        }
        Ok(())
    }

    pub fn grid(&self) -> (usize, usize) {
        self.input.grid()
    }

    pub fn patch_count(&self) -> usize {
        let (r, c) = self.grid();
        r * c
    }

    /// Effective window per grid axis.
    pub fn window(&self) -> (usize, usize) {
        let (rows, cols) = self.grid();
        (self.window_size.min(rows), self.window_size.min(cols))
    }

    pub fn attention_pattern(&self, layer: usize) -> AttentionPattern {
        if self.global_attention {
            return AttentionPattern::Global { key_mask: None };
        }
        let grid = self.grid();
        let window = self.window();
        let shift = if self.shifted_windows && layer % 2 == 1 {
            (
                if window.0 < grid.0 { window.0 / 2 } else { 0 },
                if window.1 < grid.1 { window.1 / 2 } else { 0 },
            )
        } else {
            (0, 0)
        };
        AttentionPattern::Windowed {
            grid,
            window,
            shift,
        }
    }

    fn block_dims(&self) -> BlockDims {
        BlockDims {
            dim: self.embed_dim,
            heads: self.heads,
            mlp_hidden: self.mlp_hidden,
        }
    }
}

/// An `height × width × channels` image in row-major HWC order.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(SvtError::Shape(format!(
                "{} values for a {height}×{width}×{channels} image",
                data.len()
            )));
        }
        Ok(Image {
            height,
            width,
            channels,
            data,
        })
    }

    #[inline]
    fn at(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }
}

/// `M` flattened patches on a `rows × cols` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSequence {
    pub patches: Matrix,
    pub grid_shape: (usize, usize),
}

/// Non-overlapping row-major tiling. Each patch flattens its pixels row by
/// row with channels innermost.
pub fn patchify(image: &Image, patch_size: usize) -> Result<PatchSequence> {
    if patch_size == 0 || image.height % patch_size != 0 || image.width % patch_size != 0 {
        return Err(SvtError::Shape(format!(
            "{}×{} image is not divisible into {patch_size}-pixel patches",
            image.height, image.width
        )));
    }
    if !image.data.iter().all(|v| v.is_finite()) {
        return Err(SvtError::Numeric("input image".into()));
    }
    let rows = image.height / patch_size;
    let cols = image.width / patch_size;
    let dim = patch_size * patch_size * image.channels;
    let mut patches = Matrix::zeros(rows * cols, dim);
    for pr in 0..rows {
        for pc in 0..cols {
            let out = patches.row_mut(pr * cols + pc);
            let mut k = 0;
            for y in 0..patch_size {
                for x in 0..patch_size {
                    for c in 0..image.channels {
                        out[k] = image.at(pr * patch_size + y, pc * patch_size + x, c);
                        k += 1;
                    }
                }
            }
        }
    }
    Ok(PatchSequence {
        patches,
        grid_shape: (rows, cols),
    })
}

/// Inverse of [`patchify`].
pub fn unpatchify(seq: &PatchSequence, patch_size: usize, channels: usize) -> Result<Image> {
    let (rows, cols) = seq.grid_shape;
    if seq.patches.cols() != patch_size * patch_size * channels || seq.patches.rows() != rows * cols {
        return Err(SvtError::Shape("patch sequence does not match patch geometry".into()));
    }
    let (h, w) = (rows * patch_size, cols * patch_size);
    let mut data = vec![0.0; h * w * channels];
    for pr in 0..rows {
        for pc in 0..cols {
            let patch = seq.patches.row(pr * cols + pc);
            let mut k = 0;
            for y in 0..patch_size {
                for x in 0..patch_size {
                    for c in 0..channels {
                        data[((pr * patch_size + y) * w + pc * patch_size + x) * channels + c] = patch[k];
                        k += 1;
                    }
                }
            }
        }
    }
    Image::new(h, w, channels, data)
}

/// Turns one raw input (pixels or feature vector) into patches.
pub fn to_patches(input: &[f64], layout: &InputLayout) -> Result<PatchSequence> {
    if input.len() != layout.input_len() {
        return Err(SvtError::Shape(format!(
            "input of {} values, expected {}",
            input.len(),
            layout.input_len()
        )));
    }
    match *layout {
        InputLayout::Image {
            image_size,
            channels,
            patch_size,
        } => patchify(
            &Image::new(image_size, image_size, channels, input.to_vec())?,
            patch_size,
        ),
        InputLayout::Features { dim, chunk } => {
            if !input.iter().all(|v| v.is_finite()) {
                return Err(SvtError::Numeric("input features".into()));
            }
            Ok(PatchSequence {
                patches: Matrix::from_vec(dim / chunk, chunk, input.to_vec())?,
                grid_shape: (1, dim / chunk),
            })
        }
    }
}

pub fn init_vision_params(config: &VisionConfig, init: &mut Initializer) -> Result<ParamStore> {
    config.validate()?;
    let mut store = ParamStore::new();
    let e = config.embed_dim;
    init.linear(&mut store, "vision.patch", config.input.patch_dim(), e);
    store.insert(
        "vision.pos",
        init.uniform(config.patch_count(), e, 1.0 / (e as f64).sqrt()),
    );
    for l in 0..config.depth {
        init_block(init, &mut store, &format!("vision.blocks.{l}"), config.block_dims());
    }
    if config.head_hidden == 0 {
        init.linear(&mut store, "vision.head.fc", e, config.d_v);
    } else {
        init.linear(&mut store, "vision.head.fc1", e, config.head_hidden);
        init.linear(&mut store, "vision.head.fc2", config.head_hidden, config.d_v);
    }
    Ok(store)
}

/// Patch projection plus position embedding, then the transformer stack.
pub fn build_encode_patches(
    tape: &mut Tape,
    bound: &BoundParams,
    seq: &PatchSequence,
    config: &VisionConfig,
) -> Result<Var> {
    if seq.grid_shape != config.grid() || seq.patches.cols() != config.input.patch_dim() {
        return Err(SvtError::Shape(format!(
            "{:?} grid of {}-value patches, configured {:?} grid of {}",
            seq.grid_shape,
            seq.patches.cols(),
            config.grid(),
            config.input.patch_dim()
        )));
    }
    let x = tape.leaf(seq.patches.clone());
    let projected = linear(tape, bound, "vision.patch", x)?;
    let mut h = tape.add(projected, bound.var("vision.pos")?)?;
    for l in 0..config.depth {
        let prefix = format!("vision.blocks.{l}");
        h = block(tape, bound, &prefix, h, config.block_dims(), &config.attention_pattern(l))?;
        if !tape.value(h).is_finite() {
            return Err(SvtError::Numeric(prefix));
        }
    }
    Ok(h)
}

/// Mean over patch rows, then the head MLP.
pub fn build_pool_project(tape: &mut Tape, bound: &BoundParams, patches: Var) -> Result<Var> {
    if tape.shape(patches).0 == 0 {
        return Err(SvtError::Empty("no patch embeddings to pool".into()));
    }
    let pooled = tape.mean_rows(patches)?;
    if bound.var("vision.head.fc.weight").is_ok() {
        return linear(tape, bound, "vision.head.fc", pooled);
    }
    let h = linear(tape, bound, "vision.head.fc1", pooled)?;
    let a = tape.gelu(h);
    linear(tape, bound, "vision.head.fc2", a)
}

/// One input to its `1 × d_v` embedding.
pub fn build_visual(
    tape: &mut Tape,
    bound: &BoundParams,
    input: &[f64],
    config: &VisionConfig,
) -> Result<Var> {
    let seq = to_patches(input, &config.input)?;
    let encoded = build_encode_patches(tape, bound, &seq, config)?;
    build_pool_project(tape, bound, encoded)
}

pub fn encode_patches(seq: &PatchSequence, params: &ParamStore, config: &VisionConfig) -> Result<Matrix> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let out = build_encode_patches(&mut tape, &bound, seq, config)?;
    Ok(tape.value(out).clone())
}

pub fn pool_project(patch_embeddings: &Matrix, params: &ParamStore) -> Result<Matrix> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let x = tape.leaf(patch_embeddings.clone());
    let out = build_pool_project(&mut tape, &bound, x)?;
    Ok(tape.value(out).clone())
}

/// Embeds each input independently; row `i` of the result is `z^v` of
/// `batch[i]`.
pub fn forward_visual(batch: &[Vec<f64>], params: &ParamStore, config: &VisionConfig) -> Result<Matrix> {
    let vision = params.subset("vision.");
    let mut rows = Vec::with_capacity(batch.len());
    for input in batch {
        let mut tape = Tape::new();
        let bound = vision.bind(&mut tape);
        let z = build_visual(&mut tape, &bound, input, config)?;
        rows.push(tape.value(z).data().to_vec());
    }
    if rows.is_empty() {
        return Ok(Matrix::zeros(0, config.d_v));
    }
    Matrix::from_rows(&rows)
}
