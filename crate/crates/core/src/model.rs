//! The fusion network.
//!
//! ```text
//!  x_a ──BiLSTM── H_a ─┬─ cross-attention ×N ──> H^c_a, H^c_t
//!  x_t ──BiLSTM── H_t ─┼─ self-attention ×N ───> H^s_a, H^s_t
//!                      │
//!  x_a ─LSTM─LSTM─┐    │
//!                 ├─ concat ─ BiLSTM ─ FeedForward ─> H_mid
//!  x_t ─LSTM─LSTM─┘
//!  x_a ─ Linear ─ LayerNorm ─> H^r_a
//!  x_t ─ Linear ─ LayerNorm ─> H^r_t
//!
//!  [H^c_a | H^c_t | H^s_a | H^s_t | H_mid | H^r_a | H^r_t] ─ Linear ─ ReLU ─ Linear ─> logits
//! ```
//!
//! The sequence axis is the list of utterances in one dialogue. Streams can
//! be dropped from the aggregation through [`ModelConfig::streams`]; modules
//! that feed only dropped streams are not instantiated.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionLayer, CrossAttentionLayer, CrossDeltas};
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::layers::{check_mask, BiLstm, FeedForward, LayerNorm, Linear, StackedLstm};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const PAPER_AUDIO_LLD_DIM: usize = 6552;
pub const PAPER_AUDIO_BOTTLENECK_DIM: usize = 6144;
pub const PAPER_TEXT_DIM: usize = 4096;

/// The seven aggregated representations, in concatenation order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stream {
    CrossAudio,
    CrossText,
    SelfAudio,
    SelfText,
    Mid,
    ResidualAudio,
    ResidualText,
}

impl Stream {
    pub const ALL: [Stream; 7] = [
        Stream::CrossAudio,
        Stream::CrossText,
        Stream::SelfAudio,
        Stream::SelfText,
        Stream::Mid,
        Stream::ResidualAudio,
        Stream::ResidualText,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stream::CrossAudio => "cross_audio",
            Stream::CrossText => "cross_text",
            Stream::SelfAudio => "self_audio",
            Stream::SelfText => "self_text",
            Stream::Mid => "mid",
            Stream::ResidualAudio => "residual_audio",
            Stream::ResidualText => "residual_text",
        }
    }
}

impl fmt::Display for Stream {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_audio_in: usize,
    pub d_text_in: usize,
    /// Attention key width and width of every aggregated stream.
    pub d_model: usize,
    pub n_sca_layers: usize,
    /// Inner width of feed-forward sublayers; `None` means `d_model`.
    pub ff_inner: Option<usize>,
    pub n_classes: usize,
    /// Leading audio columns holding handcrafted descriptors; the rest are
    /// bottleneck embeddings.
    pub audio_lld_dim: usize,
    /// Reuse the encoder BiLSTM outputs as the per-modality inputs of the
    /// mid-level fusion instead of separate stacked LSTMs.
    pub share_encoders: bool,
    /// Streams kept in the aggregation; order is irrelevant.
    pub streams: Vec<Stream>,
    /// Half-open audio column range forced to zero before the forward pass.
    pub zeroed_audio_columns: Option<[usize; 2]>,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_audio_in: PAPER_AUDIO_LLD_DIM + PAPER_AUDIO_BOTTLENECK_DIM,
            d_text_in: PAPER_TEXT_DIM,
            d_model: 128,
            n_sca_layers: 2,
            ff_inner: None,
            n_classes: 7,
            audio_lld_dim: PAPER_AUDIO_LLD_DIM,
            share_encoders: false,
            streams: Stream::ALL.to_vec(),
            zeroed_audio_columns: None,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_audio_in", self.d_audio_in),
            ("d_text_in", self.d_text_in),
            ("d_model", self.d_model),
            ("n_sca_layers", self.n_sca_layers),
            ("ff_inner", self.ff_inner()),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.d_model.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "d_model must be even to split across LSTM directions, got {}",
                self.d_model
            )));
        }
        if self.n_classes < 2 {
            return Err(Error::Config(format!(
                "n_classes must be at least 2, got {}",
                self.n_classes
            )));
        }
        if self.audio_lld_dim > self.d_audio_in {
            return Err(Error::Config(format!(
                "audio_lld_dim {} exceeds d_audio_in {}",
                self.audio_lld_dim, self.d_audio_in
            )));
        }
        if self.active_streams().is_empty() {
            return Err(Error::Config("at least one stream must be kept".into()));
        }
        if let Some([lo, hi]) = self.zeroed_audio_columns {
            if lo > hi || hi > self.d_audio_in {
                return Err(Error::Config(format!(
                    "zeroed audio columns [{lo}, {hi}) fall outside 0..{}",
                    self.d_audio_in
                )));
            }
        }
        Ok(())
    }

    pub fn ff_inner(&self) -> usize {
        self.ff_inner.unwrap_or(self.d_model)
    }

    /// Kept streams in canonical concatenation order.
    pub fn active_streams(&self) -> Vec<Stream> {
        Stream::ALL
            .into_iter()
            .filter(|s| self.streams.contains(s))
            .collect()
    }

    pub fn aggregation_width(&self) -> usize {
        self.active_streams().len() * self.d_model
    }

    fn has(&self, s: Stream) -> bool {
        self.streams.contains(&s)
    }

    fn needs_cross(&self) -> bool {
        self.has(Stream::CrossAudio) || self.has(Stream::CrossText)
    }

    fn needs_audio_encoder(&self) -> bool {
        self.needs_cross() || self.has(Stream::SelfAudio) || (self.has(Stream::Mid) && self.share_encoders)
    }

    fn needs_text_encoder(&self) -> bool {
        self.needs_cross() || self.has(Stream::SelfText) || (self.has(Stream::Mid) && self.share_encoders)
    }
}

/// Mid-level fusion: per-modality recurrences, featurewise concatenation, a
/// combining BiLSTM and a feed-forward sublayer.
#[derive(Clone, Debug)]
pub struct MidFusion {
    /// `None` when the encoder outputs are reused.
    pub audio: Option<StackedLstm>,
    pub text: Option<StackedLstm>,
    pub combine: BiLstm,
    pub ff: FeedForward,
}

/// `LayerNorm(Linear(x))` straight from raw features.
#[derive(Clone, Debug)]
pub struct ResidualBranch {
    pub linear: Linear,
    pub norm: LayerNorm,
}

impl ResidualBranch {
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.linear.forward(g, store, x)?;
        self.norm.forward(g, store, h)
    }
}

#[derive(Clone, Debug)]
pub struct ClassifierHead {
    pub hidden: Linear,
    pub output: Linear,
}

/// Outputs of the stacked attention unit.
#[derive(Clone, Copy, Debug)]
pub struct ScaOutput {
    pub cross_audio: Option<Var>,
    pub cross_text: Option<Var>,
    pub self_audio: Option<Var>,
    pub self_text: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub logits: Var,
    pub aggregation: Var,
    pub streams: Vec<(Stream, Var)>,
}

#[derive(Clone, Debug, Default)]
pub struct ForwardOptions {
    /// Replaces one stream with zeros right before concatenation.
    pub zero_stream: Option<Stream>,
}

#[derive(Clone, Debug)]
pub struct CmRobertaModel {
    config: ModelConfig,
    params: ParamStore,
    pub audio_encoder: Option<BiLstm>,
    pub text_encoder: Option<BiLstm>,
    pub cross_layers: Vec<CrossAttentionLayer>,
    pub self_audio: Vec<AttentionLayer>,
    pub self_text: Vec<AttentionLayer>,
    pub mid: Option<MidFusion>,
    pub residual_audio: Option<ResidualBranch>,
    pub residual_text: Option<ResidualBranch>,
    pub head: ClassifierHead,
}

impl CmRobertaModel {
    /// Builds and initialises every parameter from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let d = config.d_model;
        let ff = config.ff_inner();
        let half = d / 2;
        let s = &mut store;
        let r = &mut rng;

        let audio_encoder = config
            .needs_audio_encoder()
            .then(|| BiLstm::new(s, r, "encoder.audio", config.d_audio_in, half))
            .transpose()?;
        let text_encoder = config
            .needs_text_encoder()
            .then(|| BiLstm::new(s, r, "encoder.text", config.d_text_in, half))
            .transpose()?;

        let mut cross_layers = Vec::new();
        if config.needs_cross() {
            for i in 0..config.n_sca_layers {
                cross_layers.push(CrossAttentionLayer::new(s, r, &format!("sca.cross.{i}"), d, ff)?);
            }
        }
        let mut self_audio = Vec::new();
        if config.has(Stream::SelfAudio) {
            for i in 0..config.n_sca_layers {
                self_audio.push(AttentionLayer::new(s, r, &format!("sca.self_audio.{i}"), d, ff)?);
            }
        }
        let mut self_text = Vec::new();
        if config.has(Stream::SelfText) {
            for i in 0..config.n_sca_layers {
                self_text.push(AttentionLayer::new(s, r, &format!("sca.self_text.{i}"), d, ff)?);
            }
        }

        let mid = if config.has(Stream::Mid) {
            let (audio, text) = if config.share_encoders {
                (None, None)
            } else {
                (
                    Some(StackedLstm::new(s, r, "mid.audio", config.d_audio_in, d, 2)?),
                    Some(StackedLstm::new(s, r, "mid.text", config.d_text_in, d, 2)?),
                )
            };
            Some(MidFusion {
                audio,
                text,
                combine: BiLstm::new(s, r, "mid.combine", 2 * d, half)?,
                ff: FeedForward::new(s, r, "mid.ff", d, ff)?,
            })
        } else {
            None
        };

        let residual = |s: &mut ParamStore, r: &mut ChaCha8Rng, name: &str, d_in: usize| -> Result<ResidualBranch> {
            Ok(ResidualBranch {
                linear: Linear::new(s, r, &format!("{name}.linear"), d_in, d)?,
                norm: LayerNorm::new(s, &format!("{name}.norm"), d)?,
            })
        };
        let residual_audio = config
            .has(Stream::ResidualAudio)
            .then(|| residual(s, r, "residual.audio", config.d_audio_in))
            .transpose()?;
        let residual_text = config
            .has(Stream::ResidualText)
            .then(|| residual(s, r, "residual.text", config.d_text_in))
            .transpose()?;

        let head = ClassifierHead {
            hidden: Linear::new(s, r, "head.hidden", config.aggregation_width(), d)?,
            output: Linear::new(s, r, "head.output", d, config.n_classes)?,
        };

        Ok(Self {
            config,
            params: store,
            audio_encoder,
            text_encoder,
            cross_layers,
            self_audio,
            self_text,
            mid,
            residual_audio,
            residual_text,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Checks the raw inputs and brings them into the graph.
    pub fn inputs(&self, g: &mut Graph, audio: &Tensor, text: &Tensor, mask: &[bool]) -> Result<(Var, Var)> {
        let (ta, da) = audio.dims2()?;
        let (tt, dt) = text.dims2()?;
        if ta != tt {
            return Err(Error::Contract(format!(
                "audio has {ta} utterances but text has {tt}"
            )));
        }
        if da != self.config.d_audio_in {
            return Err(Error::shape("audio input", audio.shape(), &[ta, self.config.d_audio_in]));
        }
        if dt != self.config.d_text_in {
            return Err(Error::shape("text input", text.shape(), &[tt, self.config.d_text_in]));
        }
        check_mask(mask, ta)?;
        let audio = match self.config.zeroed_audio_columns {
            Some([lo, hi]) if lo < hi => {
                let mut a = audio.clone();
                for row in a.data_mut().chunks_mut(da) {
                    row[lo..hi].fill(0.0);
                }
                g.input(a)
            }
            _ => g.input(audio.clone()),
        };
        Ok((audio, g.input(text.clone())))
    }

    /// Per-modality BiLSTM encodings `(H_a, H_t)`, each `[T x d_model]`.
    pub fn encode(&self, g: &mut Graph, audio: Var, text: Var, mask: &[bool]) -> Result<(Var, Var)> {
        let p = &self.params;
        let (Some(ea), Some(et)) = (&self.audio_encoder, &self.text_encoder) else {
            return Err(Error::Contract("this configuration has no modality encoders".into()));
        };
        let ha = ea.run(g, p, audio, mask).map_err(|e| in_stream("audio encoder", e))?;
        let ht = et.run(g, p, text, mask).map_err(|e| in_stream("text encoder", e))?;
        Ok((ha, ht))
    }

    /// Propagated information of one cross layer, `(audio->text, text->audio)`.
    pub fn cross_attention_propagate(
        &self,
        g: &mut Graph,
        layer: usize,
        h_audio: Var,
        h_text: Var,
        mask: &[bool],
    ) -> Result<CrossDeltas> {
        self.cross_layers[layer].propagate(g, &self.params, h_audio, h_text, mask)
    }

    /// Cross branch and both self branches, started from the same encodings.
    pub fn sca_forward(
        &self,
        g: &mut Graph,
        h_audio: Var,
        h_text: Var,
        mask: &[bool],
    ) -> Result<ScaOutput> {
        let p = &self.params;
        let mut out = ScaOutput {
            cross_audio: None,
            cross_text: None,
            self_audio: None,
            self_text: None,
        };
        if !self.cross_layers.is_empty() {
            let (mut a, mut t) = (h_audio, h_text);
            for layer in &self.cross_layers {
                (a, t) = layer.forward(g, p, a, t, mask)?;
            }
            out.cross_audio = Some(a);
            out.cross_text = Some(t);
        }
        if !self.self_audio.is_empty() {
            let h = self
                .self_audio
                .iter()
                .try_fold(h_audio, |h, l| l.self_block(g, p, h, mask))?;
            out.self_audio = Some(h);
        }
        if !self.self_text.is_empty() {
            let h = self
                .self_text
                .iter()
                .try_fold(h_text, |h, l| l.self_block(g, p, h, mask))?;
            out.self_text = Some(h);
        }
        Ok(out)
    }

    /// `FeedForward(BiLSTM([LSTM²(x_a) | LSTM²(x_t)]))`.
    ///
    /// With shared encoders, `encoded` supplies the per-modality inputs.
    pub fn mid_level_fusion(
        &self,
        g: &mut Graph,
        audio: Var,
        text: Var,
        encoded: Option<(Var, Var)>,
        mask: &[bool],
    ) -> Result<Var> {
        let p = &self.params;
        let mid = self
            .mid
            .as_ref()
            .ok_or_else(|| Error::Contract("mid-level fusion stream is disabled".into()))?;
        let (ma, mt) = match (&mid.audio, &mid.text, encoded) {
            (Some(la), Some(lt), _) => (la.run(g, p, audio, mask)?, lt.run(g, p, text, mask)?),
            (None, None, Some(enc)) => enc,
            _ => return Err(Error::Contract("shared mid-level fusion needs encoder outputs".into())),
        };
        let joint = g.concat(&[ma, mt], 1)?;
        let combined = mid.combine.run(g, p, joint, mask)?;
        mid.ff.forward(g, p, combined)
    }

    pub fn residual_branch(&self, g: &mut Graph, stream: Stream, x: Var) -> Result<Var> {
        let branch = match stream {
            Stream::ResidualAudio => self.residual_audio.as_ref(),
            Stream::ResidualText => self.residual_text.as_ref(),
            _ => None,
        }
        .ok_or_else(|| Error::Contract(format!("{stream} is not an active residual stream")))?;
        branch.forward(g, &self.params, x)
    }

    pub fn forward(&self, g: &mut Graph, audio: &Tensor, text: &Tensor, mask: &[bool]) -> Result<ForwardOutput> {
        self.forward_with(g, audio, text, mask, &ForwardOptions::default())
    }

    pub fn forward_with(
        &self,
        g: &mut Graph,
        audio: &Tensor,
        text: &Tensor,
        mask: &[bool],
        opts: &ForwardOptions,
    ) -> Result<ForwardOutput> {
        let (xa, xt) = self.inputs(g, audio, text, mask)?;
        let encoded = if self.audio_encoder.is_some() || self.text_encoder.is_some() {
            let ha = self
                .audio_encoder
                .as_ref()
                .map(|e| e.run(g, &self.params, xa, mask))
                .transpose()
                .map_err(|e| in_stream("audio encoder", e))?;
            let ht = self
                .text_encoder
                .as_ref()
                .map(|e| e.run(g, &self.params, xt, mask))
                .transpose()
                .map_err(|e| in_stream("text encoder", e))?;
            Some((ha, ht))
        } else {
            None
        };

        let mut streams = Vec::new();
        if let Some((ha, ht)) = encoded {
            let needs_both = !self.cross_layers.is_empty();
            let sca = match (ha, ht) {
                (Some(a), Some(t)) => self.sca_forward(g, a, t, mask)?,
                (Some(a), None) if !needs_both => self.sca_forward_single(g, Some(a), None, mask)?,
                (None, Some(t)) if !needs_both => self.sca_forward_single(g, None, Some(t), mask)?,
                _ => return Err(Error::Contract("cross attention needs both encoders".into())),
            };
            streams.extend(
                [
                    (Stream::CrossAudio, sca.cross_audio),
                    (Stream::CrossText, sca.cross_text),
                    (Stream::SelfAudio, sca.self_audio),
                    (Stream::SelfText, sca.self_text),
                ]
                .into_iter()
                .filter_map(|(s, v)| v.map(|v| (s, v))),
            );
        }
        if self.mid.is_some() {
            let shared = match encoded {
                Some((Some(a), Some(t))) => Some((a, t)),
                _ => None,
            };
            let h = self
                .mid_level_fusion(g, xa, xt, shared, mask)
                .map_err(|e| in_stream("mid", e))?;
            streams.push((Stream::Mid, h));
        }
        if self.residual_audio.is_some() {
            let h = self
                .residual_branch(g, Stream::ResidualAudio, xa)
                .map_err(|e| in_stream("residual_audio", e))?;
            streams.push((Stream::ResidualAudio, h));
        }
        if self.residual_text.is_some() {
            let h = self
                .residual_branch(g, Stream::ResidualText, xt)
                .map_err(|e| in_stream("residual_text", e))?;
            streams.push((Stream::ResidualText, h));
        }
        streams.retain(|(s, _)| self.config.has(*s));
        streams.sort_by_key(|(s, _)| *s);

        let parts: Vec<Var> = streams
            .iter()
            .map(|&(s, v)| {
                if opts.zero_stream == Some(s) {
                    let shape = g.shape(v).to_vec();
                    g.input(Tensor::zeros(&shape))
                } else {
                    v
                }
            })
            .collect();
        let aggregation = g.concat(&parts, 1)?;
        let hidden = self.head.hidden.forward(g, &self.params, aggregation)?;
        let hidden = g.relu(hidden);
        let logits = self.head.output.forward(g, &self.params, hidden)?;
        Ok(ForwardOutput {
            logits,
            aggregation,
            streams,
        })
    }

    fn sca_forward_single(
        &self,
        g: &mut Graph,
        h_audio: Option<Var>,
        h_text: Option<Var>,
        mask: &[bool],
    ) -> Result<ScaOutput> {
        let p = &self.params;
        let run = |g: &mut Graph, layers: &[AttentionLayer], h: Option<Var>| -> Result<Option<Var>> {
            match h {
                Some(h) if !layers.is_empty() => {
                    Ok(Some(layers.iter().try_fold(h, |h, l| l.self_block(g, p, h, mask))?))
                }
                _ => Ok(None),
            }
        };
        Ok(ScaOutput {
            cross_audio: None,
            cross_text: None,
            self_audio: run(g, &self.self_audio, h_audio)?,
            self_text: run(g, &self.self_text, h_text)?,
        })
    }

    /// Class probabilities `[T x C]` for one dialogue.
    pub fn predict_proba(&self, audio: &Tensor, text: &Tensor, mask: &[bool]) -> Result<Tensor> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, audio, text, mask)?;
        let probs = g.softmax(out.logits, 1)?;
        Ok(g.value(probs).clone())
    }

    /// Arg-max class per utterance.
    pub fn predict(&self, audio: &Tensor, text: &Tensor, mask: &[bool]) -> Result<Vec<usize>> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, audio, text, mask)?;
        Ok(argmax_rows(g.value(out.logits)))
    }
}

pub fn argmax_rows(t: &Tensor) -> Vec<usize> {
    let cols = *t.shape().last().unwrap_or(&1);
    t.data()
        .chunks(cols)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}

fn in_stream(stream: &str, e: Error) -> Error {
    match e {
        Error::Contract(msg) => Error::Contract(format!("{stream}: {msg}")),
        Error::InvalidShape(msg) => Error::InvalidShape(format!("{stream}: {msg}")),
        other => other,
    }
}
