//! Class-word prompts, a hashed tokenizer, a small transformer text encoder
//! producing `ŝ`, and the projection `f` into the visual embedding space.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Result, SvtError};
use crate::params::{linear, BoundParams, Initializer, ParamStore};
use crate::tensor::Matrix;
use crate::transformer::{block, init_block, AttentionPattern, BlockDims};

pub const PLACEHOLDER: &str = "{label}";
pub const DEFAULT_TEMPLATE: &str = "A photo of a {label}";
pub const PAD_ID: usize = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextConfig {
    /// Includes the pad id 0.
    pub vocab_size: usize,
    pub max_len: usize,
    pub token_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    /// Semantic feature width. When it differs from `token_dim` a linear
    /// pooling head maps the pooled tokens to `d_s`.
    pub d_s: usize,
    /// Hidden width of `f`; 0 makes `f` a single linear map.
    pub projection_hidden: usize,
    pub d_v: usize,
}

impl TextConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(SvtError::Config("vocab_size must be at least 2".into()));
        }
        if self.max_len == 0 || self.d_s == 0 || self.d_v == 0 || self.mlp_hidden == 0 {
            return Err(SvtError::Config(
                "max_len, d_s, d_v and text mlp_hidden must be positive".into(),
            ));
        }
        if self.token_dim == 0 || self.heads == 0 || self.token_dim % self.heads != 0 {
            return Err(SvtError::Config(format!(
                "token_dim {} must be a positive multiple of heads {}",
                self.token_dim, self.heads
            )));
        }
        Ok(())
    }

    fn block_dims(&self) -> BlockDims {
        BlockDims {
            dim: self.token_dim,
            heads: self.heads,
            mlp_hidden: self.mlp_hidden,
        }
    }
}

/// Substitutes the class word for the single `{label}` placeholder.
pub fn render_prompt(class_word: &str, template: &str) -> Result<String> {
    if class_word.trim().is_empty() {
        return Err(SvtError::Template("empty class word".into()));
    }
    let count = template.matches(PLACEHOLDER).count();
    if count != 1 {
        return Err(SvtError::Template(format!(
            "template {template:?} has {count} {PLACEHOLDER} placeholders, expected exactly one"
        )));
    }
    Ok(template.replacen(PLACEHOLDER, class_word, 1))
}

/// 64-bit FNV-1a.
fn stable_hash(token: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in token.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Lowercases, splits on whitespace and hashes each token into
/// `1..vocab_size`; the result is truncated or padded with [`PAD_ID`] to
/// `max_len`.
pub fn tokenize(sentence: &str, config: &TextConfig) -> Vec<usize> {
    let buckets = (config.vocab_size.max(2) - 1) as u64;
    let mut ids: Vec<usize> = sentence
        .to_lowercase()
        .split_whitespace()
        .take(config.max_len)
        .map(|t| 1 + (stable_hash(t) % buckets) as usize)
        .collect();
    ids.resize(config.max_len, PAD_ID);
    ids
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptEntry {
    pub class_id: usize,
    pub class_word: String,
    pub sentence: String,
    pub token_ids: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptSet {
    pub entries: Vec<PromptEntry>,
}

impl PromptSet {
    pub fn build<'a>(
        classes: impl IntoIterator<Item = (usize, &'a str)>,
        template: &str,
        config: &TextConfig,
    ) -> Result<Self> {
        let entries = classes
            .into_iter()
            .map(|(class_id, word)| {
                let sentence = render_prompt(word, template)?;
                Ok(PromptEntry {
                    class_id,
                    class_word: word.to_string(),
                    token_ids: tokenize(&sentence, config),
                    sentence,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(PromptSet { entries })
    }

    pub fn get(&self, class_id: usize) -> Option<&PromptEntry> {
        self.entries.iter().find(|e| e.class_id == class_id)
    }
}

pub fn init_text_params(config: &TextConfig, init: &mut Initializer) -> Result<ParamStore> {
    config.validate()?;
    let mut store = ParamStore::new();
    let d = config.token_dim;
    let bound = 1.0 / (d as f64).sqrt();
    store.insert("text.token", init.uniform(config.vocab_size, d, bound));
    store.insert("text.pos", init.uniform(config.max_len, d, bound));
    for l in 0..config.depth {
        init_block(init, &mut store, &format!("text.blocks.{l}"), config.block_dims());
    }
    if d != config.d_s {
        init.linear(&mut store, "text.pool", d, config.d_s);
    }
    if config.projection_hidden == 0 {
        init.linear(&mut store, "text.proj.fc", config.d_s, config.d_v);
    } else {
        init.linear(&mut store, "text.proj.fc1", config.d_s, config.projection_hidden);
        init.linear(&mut store, "text.proj.fc2", config.projection_hidden, config.d_v);
    }
    Ok(store)
}

/// Token + position embeddings, transformer blocks with padding masked out
/// of attention, then the mean over non-pad positions.
pub fn build_encode_text(
    tape: &mut Tape,
    bound: &BoundParams,
    token_ids: &[usize],
    config: &TextConfig,
) -> Result<Var> {
    if token_ids.len() != config.max_len {
        return Err(SvtError::Shape(format!(
            "{} token ids, expected max_len {}",
            token_ids.len(),
            config.max_len
        )));
    }
    if let Some(&id) = token_ids.iter().find(|&&id| id >= config.vocab_size) {
        return Err(SvtError::Vocab {
            id,
            vocab_size: config.vocab_size,
        });
    }
    let keep: Vec<usize> = (0..token_ids.len())
        .filter(|&i| token_ids[i] != PAD_ID)
        .collect();
    if keep.is_empty() {
        return Err(SvtError::Empty("token sequence is all padding".into()));
    }
    let tokens = tape.gather_rows(bound.var("text.token")?, token_ids.to_vec())?;
    let mut h = tape.add(tokens, bound.var("text.pos")?)?;
    let pattern = AttentionPattern::Global {
        key_mask: Some(token_ids.iter().map(|&id| id != PAD_ID).collect()),
    };
    for l in 0..config.depth {
        let prefix = format!("text.blocks.{l}");
        h = block(tape, bound, &prefix, h, config.block_dims(), &pattern)?;
        if !tape.value(h).is_finite() {
            return Err(SvtError::Numeric(prefix));
        }
    }
    let real = tape.gather_rows(h, keep)?;
    let pooled = tape.mean_rows(real)?;
    if config.token_dim != config.d_s {
        return linear(tape, bound, "text.pool", pooled);
    }
    Ok(pooled)
}

/// `z^s = f(ŝ)`.
pub fn build_project_semantic(tape: &mut Tape, bound: &BoundParams, s_hat: Var) -> Result<Var> {
    if bound.var("text.proj.fc.weight").is_ok() {
        return linear(tape, bound, "text.proj.fc", s_hat);
    }
    let h = linear(tape, bound, "text.proj.fc1", s_hat)?;
    let a = tape.gelu(h);
    linear(tape, bound, "text.proj.fc2", a)
}

pub fn encode_text(token_ids: &[usize], params: &ParamStore, config: &TextConfig) -> Result<Matrix> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let out = build_encode_text(&mut tape, &bound, token_ids, config)?;
    Ok(tape.value(out).clone())
}

pub fn project_semantic(s_hat: &Matrix, params: &ParamStore, config: &TextConfig) -> Result<Matrix> {
    if s_hat.shape() != (1, config.d_s) {
        return Err(SvtError::Shape(format!(
            "semantic feature of shape {:?}, expected 1×{}",
            s_hat.shape(),
            config.d_s
        )));
    }
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let x = tape.leaf(s_hat.clone());
    let out = build_project_semantic(&mut tape, &bound, x)?;
    Ok(tape.value(out).clone())
}
