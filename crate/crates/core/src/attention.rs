//! Single-head scaled dot-product attention blocks.
//!
//! An [`AttentionLayer`] owns the query/key/value projections plus the two
//! residual sublayers that follow propagation:
//!
//! ```text
//! delta = softmax(Q K^T / sqrt(d) + key_mask) V
//! h_ln  = LayerNorm(h + delta)
//! out   = LayerNorm(h_ln + FeedForward(h_ln))
//! ```
//!
//! Self-attention draws Q, K and V from the same stream. In the cross
//! direction the stream being updated supplies K and V, and the other
//! modality supplies the queries.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::Result;
use crate::layers::{check_mask, FeedForward, LayerNorm};
use crate::params::{xavier_uniform, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Additive logit for padded key positions.
pub const MASKED_LOGIT: f64 = -1e9;

#[derive(Clone, Debug)]
pub struct AttentionLayer {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub norm_attn: LayerNorm,
    pub norm_ff: LayerNorm,
    pub ff: FeedForward,
    pub dim: usize,
}

impl AttentionLayer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        dim: usize,
        ff_inner: usize,
    ) -> Result<Self> {
        Ok(Self {
            w_q: store.add(format!("{name}.w_q"), xavier_uniform(rng, dim, dim))?,
            w_k: store.add(format!("{name}.w_k"), xavier_uniform(rng, dim, dim))?,
            w_v: store.add(format!("{name}.w_v"), xavier_uniform(rng, dim, dim))?,
            norm_attn: LayerNorm::new(store, &format!("{name}.norm_attn"), dim)?,
            norm_ff: LayerNorm::new(store, &format!("{name}.norm_ff"), dim)?,
            ff: FeedForward::new(store, rng, &format!("{name}.ff"), dim, ff_inner)?,
            dim,
        })
    }

    fn project(&self, g: &mut Graph, store: &ParamStore, x: Var, w: ParamId) -> Result<Var> {
        let w = g.param(store, w);
        let wt = g.transpose(w)?;
        g.matmul(x, wt)
    }

    /// `softmax(Q K^T / sqrt(d)) V` with `Q` projected from `query_src` and
    /// `K`, `V` from `kv_src`. Keys where `mask` is false get
    /// [`MASKED_LOGIT`] before the softmax.
    pub fn propagate(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        query_src: Var,
        kv_src: Var,
        mask: &[bool],
    ) -> Result<Var> {
        let (keys, _) = g.value(kv_src).dims2()?;
        check_mask(mask, keys)?;
        let q = self.project(g, store, query_src, self.w_q)?;
        let k = self.project(g, store, kv_src, self.w_k)?;
        let v = self.project(g, store, kv_src, self.w_v)?;
        let kt = g.transpose(k)?;
        let logits = g.matmul(q, kt)?;
        let logits = g.scale(logits, 1.0 / (self.dim as f64).sqrt());
        let logits = if mask.iter().all(|&m| m) {
            logits
        } else {
            let bias = mask
                .iter()
                .map(|&m| if m { 0.0 } else { MASKED_LOGIT })
                .collect();
            let bias = g.input(Tensor::vector(bias));
            g.add_bias(logits, bias)?
        };
        let weights = g.softmax(logits, 1)?;
        g.matmul(weights, v)
    }

    /// `LayerNorm(h + delta)`.
    pub fn residual_norm(&self, g: &mut Graph, store: &ParamStore, h: Var, delta: Var) -> Result<Var> {
        let sum = g.add(h, delta)?;
        self.norm_attn.forward(g, store, sum)
    }

    /// `LayerNorm(h_ln + FeedForward(h_ln))`.
    pub fn finish(&self, g: &mut Graph, store: &ParamStore, h_ln: Var) -> Result<Var> {
        let ff = self.ff.forward(g, store, h_ln)?;
        let sum = g.add(h_ln, ff)?;
        self.norm_ff.forward(g, store, sum)
    }

    /// One full self-attention block over a single stream.
    pub fn self_block(&self, g: &mut Graph, store: &ParamStore, h: Var, mask: &[bool]) -> Result<Var> {
        let delta = self.propagate(g, store, h, h, mask)?;
        let h_ln = self.residual_norm(g, store, h, delta)?;
        self.finish(g, store, h_ln)
    }
}

/// One stacked cross-attention layer: a block per updated modality.
#[derive(Clone, Debug)]
pub struct CrossAttentionLayer {
    /// Updates the audio stream; queries come from text, keys/values from audio.
    pub audio: AttentionLayer,
    /// Updates the text stream; queries come from audio, keys/values from text.
    pub text: AttentionLayer,
}

/// Information propagated in each direction by one cross layer.
#[derive(Clone, Copy, Debug)]
pub struct CrossDeltas {
    /// `softmax(Q_a K_t^T / sqrt(d)) V_t`, added to the text stream.
    pub audio_to_text: Var,
    /// `softmax(Q_t K_a^T / sqrt(d)) V_a`, added to the audio stream.
    pub text_to_audio: Var,
}

impl CrossAttentionLayer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        dim: usize,
        ff_inner: usize,
    ) -> Result<Self> {
        Ok(Self {
            audio: AttentionLayer::new(store, rng, &format!("{name}.audio"), dim, ff_inner)?,
            text: AttentionLayer::new(store, rng, &format!("{name}.text"), dim, ff_inner)?,
        })
    }

    pub fn propagate(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        h_audio: Var,
        h_text: Var,
        mask: &[bool],
    ) -> Result<CrossDeltas> {
        Ok(CrossDeltas {
            audio_to_text: self.text.propagate(g, store, h_audio, h_text, mask)?,
            text_to_audio: self.audio.propagate(g, store, h_text, h_audio, mask)?,
        })
    }

    /// Propagation, residual-norm update and feed-forward-norm for both streams.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        h_audio: Var,
        h_text: Var,
        mask: &[bool],
    ) -> Result<(Var, Var)> {
        let d = self.propagate(g, store, h_audio, h_text, mask)?;
        let ln_a = self.audio.residual_norm(g, store, h_audio, d.text_to_audio)?;
        let ln_t = self.text.residual_norm(g, store, h_text, d.audio_to_text)?;
        let out_a = self.audio.finish(g, store, ln_a)?;
        let out_t = self.text.finish(g, store, ln_t)?;
        Ok((out_a, out_t))
    }
}
