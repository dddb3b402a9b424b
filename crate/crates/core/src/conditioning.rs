//! Image-embedding conditioning: multi-head cross-attention from brain-signal
//! activations onto embedding tokens, plus the addition and concatenation
//! baselines that replace it at the same network positions.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::error::{bail, Error, Result};
use crate::nn::{Tape, Var};
use crate::tensor::Tensor;

/// Visual embedding tokens (`S × dim`) for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionEmbedding {
    tokens: Tensor,
    image_id: String,
}

impl ConditionEmbedding {
    pub fn new(image_id: impl Into<String>, tokens: Tensor) -> Result<Self> {
        if tokens.ndim() != 2 {
            bail!(Shape, "condition tokens must be S×dim, got {:?}", tokens.shape());
        }
        if !tokens.is_finite() {
            bail!(Numeric, "condition tokens contain non-finite values");
        }
        Ok(Self { tokens, image_id: image_id.into() })
    }

    /// A single-token embedding.
    pub fn from_vector(image_id: impl Into<String>, vector: Vec<f64>) -> Result<Self> {
        let dim = vector.len();
        Self::new(image_id, Tensor::new(&[1, dim], vector)?)
    }

    pub fn tokens(&self) -> &Tensor {
        &self.tokens
    }

    pub fn image_id(&self) -> &str {
        &self.image_id
    }

    pub fn token_count(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.tokens.shape()[1]
    }

    pub fn expect_dim(&self, dim: usize) -> Result<()> {
        if self.dim() != dim {
            bail!(Shape, "condition `{}` has token width {}, the cross-attention dimension is {dim}", self.image_id, self.dim());
        }
        Ok(())
    }
}

/// How the image embedding is merged into brain-signal activations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(rename_all = "snake_case"))]
pub enum FusionMode {
    #[default]
    CrossAttention,
    Addition,
    Concatenation,
}

impl FusionMode {
    pub const ALL: [FusionMode; 3] = [FusionMode::Addition, FusionMode::Concatenation, FusionMode::CrossAttention];

    pub fn as_str(self) -> &'static str {
        match self {
            FusionMode::CrossAttention => "cross_attention",
            FusionMode::Addition => "addition",
            FusionMode::Concatenation => "concatenation",
        }
    }

    /// Row label used in comparison tables.
    pub fn label(self) -> &'static str {
        match self {
            FusionMode::CrossAttention => "Cross-Attention",
            FusionMode::Addition => "Addition",
            FusionMode::Concatenation => "Concatenation",
        }
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cross_attention" => Ok(FusionMode::CrossAttention),
            "addition" => Ok(FusionMode::Addition),
            "concatenation" => Ok(FusionMode::Concatenation),
            other => bail!(Config, "unknown fusion mode `{other}` (expected cross_attention, addition or concatenation)"),
        }
    }
}

/// Projection weights of one cross-attention block.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossAttentionWeights {
    /// `d_model × d_attn`
    pub w_q: Tensor,
    /// `cond_dim × d_attn`
    pub w_k: Tensor,
    /// `cond_dim × d_attn`
    pub w_v: Tensor,
    /// `d_attn × d_model`
    pub w_out: Tensor,
    /// `d_model`
    pub b_out: Tensor,
    pub heads: usize,
}

impl CrossAttentionWeights {
    pub fn d_model(&self) -> usize {
        self.w_q.shape()[0]
    }

    pub fn d_attn(&self) -> usize {
        self.w_q.shape()[1]
    }

    pub fn cond_dim(&self) -> usize {
        self.w_k.shape()[0]
    }

    /// Per-head key width `d_k = d_attn / heads`.
    pub fn d_k(&self) -> usize {
        self.d_attn() / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let two = |t: &Tensor| t.ndim() == 2;
        if !(two(&self.w_q) && two(&self.w_k) && two(&self.w_v) && two(&self.w_out)) {
            bail!(Shape, "attention projections must be matrices");
        }
        let (dm, da, dc) = (self.d_model(), self.d_attn(), self.cond_dim());
        if self.w_k.shape() != [dc, da] || self.w_v.shape() != [dc, da] || self.w_out.shape() != [da, dm] || self.b_out.len() != dm {
            bail!(
                Shape,
                "inconsistent attention projections: W_Q {:?}, W_K {:?}, W_V {:?}, W_out {:?}",
                self.w_q.shape(),
                self.w_k.shape(),
                self.w_v.shape(),
                self.w_out.shape()
            );
        }
        if self.heads == 0 || da % self.heads != 0 {
            bail!(Config, "attention width {da} not divisible by {} heads", self.heads);
        }
        for t in [&self.w_q, &self.w_k, &self.w_v, &self.w_out, &self.b_out] {
            if !t.is_finite() {
                bail!(Numeric, "attention weights contain non-finite values");
            }
        }
        Ok(())
    }
}

/// Attention projection nodes on a tape.
#[derive(Debug, Clone, Copy)]
pub struct AttentionVars {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_out: Var,
    pub b_out: Option<Var>,
}

/// Output of a cross-attention block on a tape.
#[derive(Debug, Clone, Copy)]
pub struct AttentionOutput {
    /// Concatenated head outputs before the output projection, `L × d_attn`.
    pub pre_projection: Var,
    /// `H_brain + W_out(attention)`, `L × d_model`.
    pub output: Var,
}

/// Multi-head cross-attention: queries from `h[L×d_model]`, keys and values
/// from `cond[S×cond_dim]`, residual around the output projection.
pub fn cross_attention_on_tape(tape: &mut Tape, h: Var, cond: Var, w: AttentionVars, heads: usize) -> Result<AttentionOutput> {
    let d_attn = tape.value(w.w_q).shape()[1];
    if heads == 0 || d_attn % heads != 0 {
        bail!(Config, "attention width {d_attn} not divisible by {heads} heads");
    }
    let q = tape.matmul(h, w.w_q)?;
    let k = tape.matmul(cond, w.w_k)?;
    let v = tape.matmul(cond, w.w_v)?;
    let d_k = d_attn / heads;
    let scale = 1.0 / libm::sqrt(d_k as f64);
    let mut head_outputs = Vec::with_capacity(heads);
    for head in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                tape.slice_cols(q, head * d_k, d_k)?,
                tape.slice_cols(k, head * d_k, d_k)?,
                tape.slice_cols(v, head * d_k, d_k)?,
            )
        };
        let logits = tape.matmul_bt(qh, kh)?;
        let logits = tape.scale(logits, scale);
        let weights = tape.softmax_rows(logits)?;
        head_outputs.push(tape.matmul(weights, vh)?);
    }
    let pre_projection = if heads == 1 { head_outputs[0] } else { tape.concat_cols(&head_outputs)? };
    let projected = tape.affine(pre_projection, w.w_out, w.b_out)?;
    let output = tape.add(h, projected)?;
    Ok(AttentionOutput { pre_projection, output })
}

/// `h + broadcast(mean_tokens(cond)·W + b)`.
pub fn fuse_addition_on_tape(tape: &mut Tape, h: Var, cond: Var, proj_w: Var, proj_b: Option<Var>) -> Result<Var> {
    let pooled = tape.mean_rows(cond)?;
    let pooled = tape.broadcast_rows(pooled, 1)?;
    let mapped = tape.affine(pooled, proj_w, proj_b)?;
    // [1×d_model] back to a vector for the row broadcast
    let mapped = tape.mean_rows(mapped)?;
    tape.add_row_vector(h, mapped)
}

/// `[h, broadcast(mean_tokens(cond))]·W + b`.
pub fn fuse_concatenation_on_tape(tape: &mut Tape, h: Var, cond: Var, proj_w: Var, proj_b: Option<Var>) -> Result<Var> {
    let rows = tape.value(h).shape()[0];
    let pooled = tape.mean_rows(cond)?;
    let tiled = tape.broadcast_rows(pooled, rows)?;
    let joined = tape.concat_cols(&[h, tiled])?;
    tape.affine(joined, proj_w, proj_b)
}

/// Result of [`cross_attention_detailed`].
#[derive(Debug, Clone, PartialEq)]
pub struct CrossAttentionResult {
    pub pre_projection: Tensor,
    pub output: Tensor,
}

/// Cross-attention on plain tensors, returning the pre-projection head outputs as well.
pub fn cross_attention_detailed(h_brain: &Tensor, cond: &ConditionEmbedding, w: &CrossAttentionWeights) -> Result<CrossAttentionResult> {
    w.validate()?;
    cond.expect_dim(w.cond_dim())?;
    if h_brain.ndim() != 2 || h_brain.shape()[1] != w.d_model() {
        bail!(Shape, "activations {:?} do not match model width {}", h_brain.shape(), w.d_model());
    }
    let mut tape = Tape::new();
    let h = tape.leaf(h_brain.clone());
    let c = tape.leaf(cond.tokens().clone());
    let vars = AttentionVars {
        w_q: tape.leaf(w.w_q.clone()),
        w_k: tape.leaf(w.w_k.clone()),
        w_v: tape.leaf(w.w_v.clone()),
        w_out: tape.leaf(w.w_out.clone()),
        b_out: Some(tape.leaf(w.b_out.clone())),
    };
    let out = cross_attention_on_tape(&mut tape, h, c, vars, w.heads)?;
    Ok(CrossAttentionResult { pre_projection: tape.value(out.pre_projection).clone(), output: tape.value(out.output).clone() })
}

/// Cross-attention of `h_brain[L×d_model]` onto `cond`, with residual.
pub fn cross_attention(h_brain: &Tensor, cond: &ConditionEmbedding, w: &CrossAttentionWeights) -> Result<Tensor> {
    Ok(cross_attention_detailed(h_brain, cond, w)?.output)
}

/// Addition fusion with a bias-free projection `proj[cond_dim×d_model]`.
pub fn fuse_addition(h_brain: &Tensor, cond: &ConditionEmbedding, proj: &Tensor) -> Result<Tensor> {
    if proj.ndim() != 2 || proj.shape()[0] != cond.dim() || h_brain.ndim() != 2 || h_brain.shape()[1] != proj.shape()[1] {
        bail!(Shape, "addition: activations {:?}, condition width {}, projection {:?}", h_brain.shape(), cond.dim(), proj.shape());
    }
    let mut tape = Tape::new();
    let h = tape.leaf(h_brain.clone());
    let c = tape.leaf(cond.tokens().clone());
    let w = tape.leaf(proj.clone());
    let out = fuse_addition_on_tape(&mut tape, h, c, w, None)?;
    Ok(tape.value(out).clone())
}

/// Concatenation fusion with a bias-free projection `proj[(d_model+cond_dim)×d_model]`.
pub fn fuse_concatenation(h_brain: &Tensor, cond: &ConditionEmbedding, proj: &Tensor) -> Result<Tensor> {
    if h_brain.ndim() != 2 || proj.ndim() != 2 {
        bail!(Shape, "concatenation: activations and projection must be matrices");
    }
    let d_model = h_brain.shape()[1];
    if proj.shape() != [d_model + cond.dim(), d_model] {
        bail!(
            Shape,
            "concatenation: projection {:?} does not map width {} + {} back to {d_model}",
            proj.shape(),
            d_model,
            cond.dim()
        );
    }
    let mut tape = Tape::new();
    let h = tape.leaf(h_brain.clone());
    let c = tape.leaf(cond.tokens().clone());
    let w = tape.leaf(proj.clone());
    let out = fuse_concatenation_on_tape(&mut tape, h, c, w, None)?;
    Ok(tape.value(out).clone())
}
