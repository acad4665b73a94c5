//! Second-pass parser: fusion of text and audio embeddings, a pooling
//! transformer, and an autoregressive decoder with a pointer-generator head.

mod layers;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Graph, ParamStore, Tensor, TensorError, Var};
use crate::tokenizer::{BOS, EOS};

pub use layers::positional_encoding;
use layers::{Attention, DecoderLayer, EncoderLayer, LayerNorm, Linear};

/// Default label smoothing of the training loss.
pub const LABEL_SMOOTHING: f64 = 0.1;
/// Probabilities are clamped to this before the log in the loss.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("hypothesis has {hyp} tokens but text embedding has {text} rows")]
    LengthMismatch { hyp: usize, text: usize },
    #[error("embedding has {got} columns, expected {expected}")]
    SourceDim { got: usize, expected: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("target sequence must start with BOS and end with EOS")]
    BadTarget,
    #[error("invalid model config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Modality {
    /// Text and audio embeddings fused; copy head present.
    Fusion,
    /// Text embeddings only; copy head present.
    TextOnly,
    /// Audio embeddings only; no fusion and no copy head.
    AudioOnly,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Fusion, Modality::TextOnly, Modality::AudioOnly];

    pub fn name(self) -> &'static str {
        match self {
            Modality::Fusion => "fusion",
            Modality::TextOnly => "text-only",
            Modality::AudioOnly => "audio-only",
        }
    }

    pub fn uses_text(self) -> bool {
        self != Modality::AudioOnly
    }

    pub fn uses_audio(self) -> bool {
        self != Modality::TextOnly
    }

    pub fn has_copy(self) -> bool {
        self != Modality::AudioOnly
    }
}

impl std::str::FromStr for Modality {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Modality::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown modality `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub modality: Modality,
    /// Width of the frozen encoder outputs.
    pub dim: usize,
    pub fusion_heads: usize,
    pub pooling_layers: usize,
    pub pooling_heads: usize,
    /// Width of the pooling transformer and decoder. A projection from
    /// `dim` is inserted when the two differ.
    pub pooling_dim: usize,
    pub ff_dim: usize,
    pub decoder_layers: usize,
    pub decoder_heads: usize,
    pub copy_heads: usize,
    /// Output units; 0 in a config file means "size of the vocabulary".
    #[serde(default)]
    pub vocab_size: usize,
    pub max_decode_len: usize,
}

impl ModelConfig {
    /// Tiny dimensions for gradient checks and fast tests.
    pub fn toy(modality: Modality, vocab_size: usize) -> Self {
        Self {
            modality,
            dim: 16,
            fusion_heads: 2,
            pooling_layers: 1,
            pooling_heads: 2,
            pooling_dim: 16,
            ff_dim: 32,
            decoder_layers: 1,
            decoder_heads: 2,
            copy_heads: 1,
            vocab_size,
            max_decode_len: 32,
        }
    }

    /// Dimensions that train in minutes on one core.
    pub fn desk(modality: Modality, vocab_size: usize) -> Self {
        Self {
            modality,
            dim: 64,
            fusion_heads: 4,
            pooling_layers: 1,
            pooling_heads: 4,
            pooling_dim: 64,
            ff_dim: 128,
            decoder_layers: 1,
            decoder_heads: 4,
            copy_heads: 1,
            vocab_size,
            max_decode_len: 64,
        }
    }

    /// The published layer sizes: 256-wide frozen embeddings, pooling width
    /// 224 / 240 / 256 by modality.
    pub fn paper_scale(modality: Modality, vocab_size: usize) -> Self {
        let pooling_dim = match modality {
            Modality::Fusion => 224,
            Modality::TextOnly => 240,
            Modality::AudioOnly => 256,
        };
        Self {
            modality,
            dim: 256,
            fusion_heads: 8,
            pooling_layers: 2,
            pooling_heads: 8,
            pooling_dim,
            ff_dim: 4 * pooling_dim,
            decoder_layers: 1,
            decoder_heads: 2,
            copy_heads: 1,
            vocab_size,
            max_decode_len: 96,
        }
    }

    pub fn preset(name: &str, modality: Modality, vocab_size: usize) -> Option<Self> {
        match name {
            "toy" => Some(Self::toy(modality, vocab_size)),
            "desk" => Some(Self::desk(modality, vocab_size)),
            "paper-scale" => Some(Self::paper_scale(modality, vocab_size)),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let check = |ok: bool, msg: &str| if ok { Ok(()) } else { Err(ModelError::Config(msg.to_string())) };
        check(self.dim > 0 && self.pooling_dim > 0, "dims must be positive")?;
        check(self.vocab_size > EOS, "vocabulary must contain the special tokens")?;
        check(self.decoder_layers > 0, "need at least one decoder layer")?;
        check(self.max_decode_len > 0, "max_decode_len must be positive")?;
        Ok(())
    }
}

/// One decoding step's distributions.
///
/// For [`Modality::AudioOnly`] there is no copy head: `copy`, `weights` and
/// `context` are empty, `p_copy` is 0 and `out == gen`.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderStepOutput {
    pub gen: Vec<f64>,
    pub copy: Vec<f64>,
    /// Copy attention over encoder positions, averaged over copy heads.
    pub weights: Vec<f64>,
    pub context: Vec<f64>,
    pub p_copy: f64,
    pub out: Vec<f64>,
}

/// Inputs for one utterance: frozen embeddings plus hypothesis token ids.
/// `text` must have one row per hypothesis id.
#[derive(Debug, Clone, Copy)]
pub struct Sources<'a> {
    pub text: &'a Tensor,
    pub audio: &'a Tensor,
    pub hyp: &'a [usize],
}

#[derive(Debug, Clone)]
struct Fusion {
    attn: Attention,
    proj: Linear,
}

#[derive(Debug, Clone)]
struct CopyHead {
    attn: Attention,
    gate: Linear,
}

/// Graph handles for the pointer-generator head over a block of decoder rows.
pub struct HeadVars {
    pub gen: Var,
    pub copy: Option<Var>,
    pub weights: Option<Var>,
    pub context: Option<Var>,
    pub gate: Option<Var>,
    pub out: Var,
}

#[derive(Debug, Clone)]
pub struct DeliberationModel {
    config: ModelConfig,
    store: ParamStore,
    fusion: Option<Fusion>,
    input_proj: Option<Linear>,
    pooling: Vec<EncoderLayer>,
    pool_norm: Option<LayerNorm>,
    embed: crate::tensor::ParamId,
    decoder: Vec<DecoderLayer>,
    dec_norm: LayerNorm,
    generator: Linear,
    copy: Option<CopyHead>,
}

impl DeliberationModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = &config;
        let fusion = if c.modality == Modality::Fusion {
            Some(Fusion {
                attn: Attention::new(&mut store, &mut rng, "fusion.attn", c.dim, c.fusion_heads)?,
                proj: Linear::new(&mut store, &mut rng, "fusion.proj", 2 * c.dim, c.dim, true),
            })
        } else {
            None
        };
        let input_proj = (c.dim != c.pooling_dim)
            .then(|| Linear::new(&mut store, &mut rng, "input_proj", c.dim, c.pooling_dim, true));
        let pooling = (0..c.pooling_layers)
            .map(|i| {
                EncoderLayer::new(
                    &mut store,
                    &mut rng,
                    &format!("pool.{i}"),
                    c.pooling_dim,
                    c.pooling_heads,
                    c.ff_dim,
                )
            })
            .collect::<Result<Vec<_>, _>>()?;
        let pool_norm = (c.pooling_layers > 0).then(|| LayerNorm::new(&mut store, "pool.norm", c.pooling_dim));
        let embed = store.add_normal("decoder.embed", c.vocab_size, c.pooling_dim, 1.0 / (c.pooling_dim as f64).sqrt(), &mut rng);
        let decoder = (0..c.decoder_layers)
            .map(|i| {
                DecoderLayer::new(
                    &mut store,
                    &mut rng,
                    &format!("decoder.{i}"),
                    c.pooling_dim,
                    c.decoder_heads,
                    c.ff_dim,
                )
            })
            .collect::<Result<Vec<_>, _>>()?;
        let dec_norm = LayerNorm::new(&mut store, "decoder.norm", c.pooling_dim);
        let generator = Linear::new(&mut store, &mut rng, "generator", c.pooling_dim, c.vocab_size, true);
        let copy = if c.modality.has_copy() {
            Some(CopyHead {
                attn: Attention::new(&mut store, &mut rng, "copy.attn", c.pooling_dim, c.copy_heads)?,
                gate: Linear::new(&mut store, &mut rng, "copy.gate", 2 * c.pooling_dim, 1, true),
            })
        } else {
            None
        };
        Ok(Self {
            config,
            store,
            fusion,
            input_proj,
            pooling,
            pool_norm,
            embed,
            decoder,
            dec_norm,
            generator,
            copy,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// `emb_text ⊕ mha(emb_text, emb_aud, emb_aud)` projected back to `dim`.
    pub fn fuse(&self, g: &mut Graph, text: Var, audio: Var) -> Result<Var, ModelError> {
        let fusion = self
            .fusion
            .as_ref()
            .ok_or_else(|| ModelError::Config(format!("{} model has no fusion module", self.config.modality.name())))?;
        let attn = fusion.attn.forward(g, text, audio, None)?.out;
        let stack = g.concat_cols(&[text, attn])?;
        Ok(fusion.proj.forward(g, stack)?)
    }

    /// Adds position encodings and runs the pooling layers. Input width is
    /// `pooling_dim`.
    pub fn pool(&self, g: &mut Graph, x: Var) -> Result<Var, ModelError> {
        let (len, dim) = g.dims(x);
        let mut x = g.add_const(x, &positional_encoding(len, dim))?;
        for layer in &self.pooling {
            x = layer.forward(g, x)?;
        }
        if let Some(norm) = &self.pool_norm {
            x = norm.forward(g, x)?;
        }
        Ok(x)
    }

    fn check_source(&self, t: &Tensor) -> Result<(), ModelError> {
        if t.cols() != self.config.dim {
            return Err(ModelError::SourceDim {
                got: t.cols(),
                expected: self.config.dim,
            });
        }
        Ok(())
    }

    /// Encoder outputs `e` for one utterance.
    pub fn encode(&self, g: &mut Graph, src: Sources) -> Result<Var, ModelError> {
        let m = self.config.modality;
        if m.uses_text() {
            self.check_source(src.text)?;
            if src.text.rows() != src.hyp.len() {
                return Err(ModelError::LengthMismatch {
                    hyp: src.hyp.len(),
                    text: src.text.rows(),
                });
            }
        }
        if m.uses_audio() {
            self.check_source(src.audio)?;
        }
        let x = match m {
            Modality::Fusion => {
                let t = g.input(src.text.clone());
                let a = g.input(src.audio.clone());
                self.fuse(g, t, a)?
            }
            Modality::TextOnly => g.input(src.text.clone()),
            Modality::AudioOnly => g.input(src.audio.clone()),
        };
        let x = match &self.input_proj {
            Some(p) => p.forward(g, x)?,
            None => x,
        };
        self.pool(g, x)
    }

    /// Decoder states for rows `start..` of the input prefix `ids`.
    pub fn decoder_states(&self, g: &mut Graph, memory: Var, ids: &[usize], start: usize) -> Result<Var, ModelError> {
        let table = g.param(self.embed);
        let x = g.gather(table, ids)?;
        let mut x = g.add_const(x, &positional_encoding(ids.len(), self.config.pooling_dim))?;
        let last = self.decoder.len() - 1;
        for (i, layer) in self.decoder.iter().enumerate() {
            x = layer.forward(g, x, memory, if i == last { start } else { 0 })?;
        }
        Ok(self.dec_norm.forward(g, x)?)
    }

    /// Pointer-generator head over decoder rows `d`. `force_p_copy`
    /// replaces the learned mixing probability with a constant.
    pub fn head(
        &self,
        g: &mut Graph,
        d: Var,
        memory: Var,
        hyp: &[usize],
        force_p_copy: Option<f64>,
    ) -> Result<HeadVars, ModelError> {
        let logits = self.generator.forward(g, d)?;
        let gen = g.softmax_rows(logits);
        let Some(copy) = &self.copy else {
            return Ok(HeadVars {
                gen,
                copy: None,
                weights: None,
                context: None,
                gate: None,
                out: gen,
            });
        };
        let (mem_rows, _) = g.dims(memory);
        if mem_rows != hyp.len() {
            return Err(ModelError::LengthMismatch {
                hyp: hyp.len(),
                text: mem_rows,
            });
        }
        let att = copy.attn.forward(g, d, memory, None)?;
        let weights = if att.weights.len() == 1 {
            att.weights[0]
        } else {
            let mut acc = att.weights[0];
            for &w in &att.weights[1..] {
                acc = g.add(acc, w)?;
            }
            g.scale(acc, 1.0 / att.weights.len() as f64)
        };
        let copy_dist = g.scatter(weights, hyp, self.config.vocab_size)?;
        let gate = match force_p_copy {
            Some(p) => {
                let (rows, _) = g.dims(d);
                g.input(Tensor::full(&[rows, 1], p))
            }
            None => {
                let joined = g.concat_cols(&[d, att.out])?;
                let z = copy.gate.forward(g, joined)?;
                g.sigmoid(z)
            }
        };
        let out = g.mix(gen, copy_dist, gate)?;
        Ok(HeadVars {
            gen,
            copy: Some(copy_dist),
            weights: Some(weights),
            context: Some(att.out),
            gate: Some(gate),
            out,
        })
    }

    /// Summed label-smoothed loss over every step of `target`, which must be
    /// `BOS … EOS`. Returns the loss and the number of predicted steps.
    pub fn loss_sum(
        &self,
        g: &mut Graph,
        src: Sources,
        target: &[usize],
        label_smoothing: f64,
    ) -> Result<(Var, usize), ModelError> {
        if target.len() < 2 || target[0] != BOS || target[target.len() - 1] != EOS {
            return Err(ModelError::BadTarget);
        }
        let memory = self.encode(g, src)?;
        let inputs = &target[..target.len() - 1];
        let d = self.decoder_states(g, memory, inputs, 0)?;
        let head = self.head(g, d, memory, src.hyp, None)?;
        let loss = g.smoothed_nll(head.out, &target[1..], label_smoothing, PROB_FLOOR)?;
        Ok((loss, inputs.len()))
    }

    /// Runs the head on a single decoder state `d_t` (`1 × pooling_dim`)
    /// against encoder outputs `e`.
    pub fn decode_step(&self, d_t: &Tensor, e: &Tensor, hyp: &[usize]) -> Result<DecoderStepOutput, ModelError> {
        self.decode_step_forced(d_t, e, hyp, None)
    }

    pub fn decode_step_forced(
        &self,
        d_t: &Tensor,
        e: &Tensor,
        hyp: &[usize],
        force_p_copy: Option<f64>,
    ) -> Result<DecoderStepOutput, ModelError> {
        let mut g = Graph::new(&self.store);
        let d = g.input(d_t.clone());
        let memory = g.input(e.clone());
        let head = self.head(&mut g, d, memory, hyp, force_p_copy)?;
        Ok(step_output(&g, &head))
    }

    /// Greedy decoding from BOS until EOS or `max_decode_len` tokens.
    /// Returns the emitted ids without BOS/EOS.
    pub fn greedy_decode(&self, src: Sources) -> Result<Vec<usize>, ModelError> {
        Ok(self.greedy_decode_trace(src)?.0)
    }

    /// Greedy decoding that also returns each step's distributions.
    pub fn greedy_decode_trace(&self, src: Sources) -> Result<(Vec<usize>, Vec<DecoderStepOutput>), ModelError> {
        let e = {
            let mut g = Graph::new(&self.store);
            let v = self.encode(&mut g, src)?;
            g.value(v).clone()
        };
        let mut prefix = vec![BOS];
        let mut steps = Vec::new();
        for _ in 0..=self.config.max_decode_len {
            let mut g = Graph::new(&self.store);
            let memory = g.input(e.clone());
            let d = self.decoder_states(&mut g, memory, &prefix, prefix.len() - 1)?;
            let head = self.head(&mut g, d, memory, src.hyp, None)?;
            let step = step_output(&g, &head);
            let next = argmax(&step.out);
            steps.push(step);
            if next == EOS {
                break;
            }
            prefix.push(next);
            if prefix.len() > self.config.max_decode_len {
                break;
            }
        }
        Ok((prefix[1..].to_vec(), steps))
    }
}

fn step_output(g: &Graph, head: &HeadVars) -> DecoderStepOutput {
    let row = |v: Option<Var>| v.map(|v| g.value(v).row_slice(0).to_vec()).unwrap_or_default();
    DecoderStepOutput {
        gen: row(Some(head.gen)),
        copy: row(head.copy),
        weights: row(head.weights),
        context: row(head.context),
        p_copy: head.gate.map(|v| g.value(v).data()[0]).unwrap_or(0.0),
        out: row(Some(head.out)),
    }
}

/// Index of the largest value; the first one on ties.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Exact number of trainable scalars for `config`.
pub fn param_count(config: &ModelConfig) -> Result<usize, ModelError> {
    Ok(DeliberationModel::new(config.clone(), 0)?.params().trainable_scalars())
}
