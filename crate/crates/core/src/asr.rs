//! Stand-in for the frozen first-pass recognizer.
//!
//! The text encoder plays the predictor role (hypothesis tokens to `T × D`
//! hidden states) and the audio encoder the acoustic encoder role (feature
//! frames to `A × D` with total stride 4). Both are seeded, never trained,
//! and every parameter they own is frozen. [`AsrErrorModel`] produces
//! first-pass hypotheses from references at a controllable error rate.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Graph, ParamId, ParamStore, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum AsrError {
    #[error("token id {id} out of range for vocabulary of {vocab}")]
    IdOutOfRange { id: usize, vocab: usize },
    #[error("audio has no frames")]
    EmptyAudio,
    #[error("audio has {got} feature channels, expected {expected}")]
    FeatureDim { got: usize, expected: usize },
    #[error("reference is empty")]
    EmptyReference,
    #[error("error rates must be in [0,1] and sum to at most 1 (got {0:?})")]
    BadRates([f64; 3]),
    #[error("confusion file line {line}: {msg}")]
    ConfusionFormat { line: usize, msg: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Quality tier of the stand-in recognizer. Tier 1 has the deeper
/// convolution stack and is paired with the cleaner error channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AsrTier {
    #[serde(rename = "tier1")]
    Tier1,
    #[serde(rename = "tier2")]
    Tier2,
}

impl AsrTier {
    pub fn name(self) -> &'static str {
        match self {
            AsrTier::Tier1 => "tier1",
            AsrTier::Tier2 => "tier2",
        }
    }

    /// `(kernel, stride)` of each convolution.
    fn conv_stack(self) -> &'static [(usize, usize)] {
        match self {
            AsrTier::Tier1 => &[(5, 2), (3, 2), (3, 1)],
            AsrTier::Tier2 => &[(3, 2), (3, 2)],
        }
    }
}

impl std::str::FromStr for AsrTier {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "tier1" => Ok(AsrTier::Tier1),
            "tier2" => Ok(AsrTier::Tier2),
            other => Err(format!("unknown tier `{other}`")),
        }
    }
}

/// Predictor analog: embedding table plus one unidirectional tanh
/// recurrence. The recurrent state is returned directly; there is no output
/// projection.
#[derive(Debug, Clone)]
pub struct FrozenTextEncoder {
    store: ParamStore,
    embed: ParamId,
    w_in: ParamId,
    w_rec: ParamId,
    bias: ParamId,
    dim: usize,
    vocab: usize,
    seed: u64,
}

impl FrozenTextEncoder {
    pub fn new(vocab: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let embed = store.add_normal("asr.text.embed", vocab, dim, 1.0, &mut rng);
        let w_in = store.add_normal("asr.text.w_in", dim, dim, 1.5 / (dim as f64).sqrt(), &mut rng);
        let w_rec = store.add_normal("asr.text.w_rec", dim, dim, 0.5 / (dim as f64).sqrt(), &mut rng);
        let bias = store.add_normal("asr.text.bias", 1, dim, 0.1, &mut rng);
        store.freeze_all();
        Self {
            store,
            embed,
            w_in,
            w_rec,
            bias,
            dim,
            vocab,
            seed,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    /// Records the encoder on `g`, which must borrow [`params`](Self::params).
    pub fn forward(&self, g: &mut Graph, ids: &[usize]) -> Result<Var, AsrError> {
        if let Some(&id) = ids.iter().find(|&&id| id >= self.vocab) {
            return Err(AsrError::IdOutOfRange {
                id,
                vocab: self.vocab,
            });
        }
        let table = g.param(self.embed);
        let w_in = g.param(self.w_in);
        let w_rec = g.param(self.w_rec);
        let bias = g.param(self.bias);
        if ids.is_empty() {
            return Ok(g.input(Tensor::zeros(&[0, self.dim])));
        }
        let x = g.gather(table, ids)?;
        let xw = g.matmul(x, w_in)?;
        let xw = g.add_row(xw, bias)?;
        let mut states = Vec::with_capacity(ids.len());
        let mut prev: Option<Var> = None;
        for t in 0..ids.len() {
            let mut pre = g.slice_rows(xw, t, t + 1)?;
            if let Some(h) = prev {
                let rec = g.matmul(h, w_rec)?;
                pre = g.add(pre, rec)?;
            }
            let h = g.tanh(pre);
            states.push(h);
            prev = Some(h);
        }
        Ok(g.concat_rows(&states)?)
    }

    /// `T × D` text embedding for hypothesis token ids.
    pub fn text_embed(&self, ids: &[usize]) -> Result<Tensor, AsrError> {
        let mut g = Graph::new(&self.store);
        let out = self.forward(&mut g, ids)?;
        Ok(g.value(out).clone())
    }
}

/// Acoustic encoder analog: strided 1-D convolutions with tanh, total
/// stride 4, so `A = ceil(frames / 4)`.
#[derive(Debug, Clone)]
pub struct FrozenAudioEncoder {
    store: ParamStore,
    layers: Vec<ConvLayer>,
    feature_dim: usize,
    dim: usize,
    tier: AsrTier,
    seed: u64,
}

#[derive(Debug, Clone)]
struct ConvLayer {
    weight: ParamId,
    bias: ParamId,
    kernel: usize,
    stride: usize,
}

impl FrozenAudioEncoder {
    pub fn new(tier: AsrTier, feature_dim: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut layers = Vec::new();
        let mut in_dim = feature_dim;
        for (i, &(kernel, stride)) in tier.conv_stack().iter().enumerate() {
            let fan_in = kernel * in_dim;
            let std = 1.2 / (fan_in as f64).sqrt();
            let weight = store.add_normal(&format!("asr.audio.conv{i}.weight"), fan_in, dim, std, &mut rng);
            let bias = store.add_normal(&format!("asr.audio.conv{i}.bias"), 1, dim, 0.1, &mut rng);
            layers.push(ConvLayer {
                weight,
                bias,
                kernel,
                stride,
            });
            in_dim = dim;
        }
        store.freeze_all();
        Self {
            store,
            layers,
            feature_dim,
            dim,
            tier,
            seed,
        }
    }

    pub fn tier(&self) -> AsrTier {
        self.tier
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn forward(&self, g: &mut Graph, frames: Var) -> Result<Var, AsrError> {
        let (n, f) = g.dims(frames);
        if n == 0 {
            return Err(AsrError::EmptyAudio);
        }
        if f != self.feature_dim {
            return Err(AsrError::FeatureDim {
                got: f,
                expected: self.feature_dim,
            });
        }
        let mut x = frames;
        for layer in &self.layers {
            let cols = g.im2col(x, layer.kernel, layer.stride, (layer.kernel - 1) / 2);
            let w = g.param(layer.weight);
            let b = g.param(layer.bias);
            let y = g.matmul(cols, w)?;
            let y = g.add_row(y, b)?;
            x = g.tanh(y);
        }
        Ok(x)
    }

    /// `A × D` audio embedding for `frames × F` features.
    pub fn audio_embed(&self, frames: &Tensor) -> Result<Tensor, AsrError> {
        let mut g = Graph::new(&self.store);
        let x = g.input(frames.clone());
        let out = self.forward(&mut g, x)?;
        Ok(g.value(out).clone())
    }
}

/// Both frozen encoders of one recognizer tier.
#[derive(Debug, Clone)]
pub struct AsrStub {
    pub text: FrozenTextEncoder,
    pub audio: FrozenAudioEncoder,
}

impl AsrStub {
    pub fn new(tier: AsrTier, vocab: usize, feature_dim: usize, dim: usize, seed: u64) -> Self {
        Self {
            text: FrozenTextEncoder::new(vocab, dim, seed),
            audio: FrozenAudioEncoder::new(tier, feature_dim, dim, seed ^ 0xA0D1_0000),
        }
    }

    /// Every stub parameter value, for checking that nothing moved.
    pub fn param_bytes(&self) -> Vec<u8> {
        let mut out = self.text.params().value_bytes();
        out.extend(self.audio.params().value_bytes());
        out
    }
}

/// Substitution / deletion / insertion channel over words.
#[derive(Debug, Clone, PartialEq)]
pub struct AsrErrorModel {
    pub substitution: f64,
    pub deletion: f64,
    pub insertion: f64,
    /// Plausible misrecognitions per word. Words without a pool are
    /// substituted by a random character edit.
    pub confusions: BTreeMap<String, Vec<String>>,
    /// Words drawn for insertions.
    pub fillers: Vec<String>,
}

const LETTERS: &[u8] = b"abcdefghijklmnopqrstuvwxyz";

impl AsrErrorModel {
    pub fn new(
        substitution: f64,
        deletion: f64,
        insertion: f64,
        confusions: BTreeMap<String, Vec<String>>,
        fillers: Vec<String>,
    ) -> Result<Self, AsrError> {
        let rates = [substitution, deletion, insertion];
        if rates.iter().any(|r| !(0.0..=1.0).contains(r)) || rates.iter().sum::<f64>() > 1.0 + 1e-12 {
            return Err(AsrError::BadRates(rates));
        }
        Ok(Self {
            substitution,
            deletion,
            insertion,
            confusions,
            fillers,
        })
    }

    /// Splits a target word error rate 60/20/20 over substitutions,
    /// deletions and insertions.
    pub fn for_target_wer(
        wer: f64,
        confusions: BTreeMap<String, Vec<String>>,
        fillers: Vec<String>,
    ) -> Result<Self, AsrError> {
        Self::new(0.6 * wer, 0.2 * wer, 0.2 * wer, confusions, fillers)
    }

    pub fn clean() -> Self {
        Self {
            substitution: 0.0,
            deletion: 0.0,
            insertion: 0.0,
            confusions: BTreeMap::new(),
            fillers: Vec::new(),
        }
    }

    fn substitute(&self, word: &str, rng: &mut ChaCha8Rng) -> String {
        if let Some(pool) = self.confusions.get(word).filter(|p| !p.is_empty()) {
            return pool[rng.gen_range(0..pool.len())].clone();
        }
        perturb_word(word, rng)
    }

    /// Draws a hypothesis for `reference`. Deterministic given `seed`; all
    /// rates zero returns the reference unchanged.
    pub fn corrupt(&self, reference: &[String], seed: u64) -> Vec<String> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(reference.len() + 2);
        for word in reference {
            if self.insertion > 0.0 && !self.fillers.is_empty() && rng.gen::<f64>() < self.insertion {
                out.push(self.fillers[rng.gen_range(0..self.fillers.len())].clone());
            }
            let r: f64 = rng.gen();
            if r < self.substitution {
                out.push(self.substitute(word, &mut rng));
            } else if r < self.substitution + self.deletion {
                continue;
            } else {
                out.push(word.clone());
            }
        }
        out
    }

    /// Reads `word<TAB>alt1,alt2,...` lines.
    pub fn parse_confusions(text: &str) -> Result<BTreeMap<String, Vec<String>>, AsrError> {
        let mut map = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (word, alts) = line.split_once('\t').ok_or(AsrError::ConfusionFormat {
                line: i + 1,
                msg: "missing tab".into(),
            })?;
            if word.is_empty() {
                return Err(AsrError::ConfusionFormat {
                    line: i + 1,
                    msg: "empty word".into(),
                });
            }
            let alts: Vec<String> = alts
                .split(',')
                .filter(|a| !a.is_empty())
                .map(str::to_string)
                .collect();
            map.insert(word.to_string(), alts);
        }
        Ok(map)
    }

    pub fn format_confusions(confusions: &BTreeMap<String, Vec<String>>) -> String {
        confusions
            .iter()
            .map(|(w, alts)| format!("{w}\t{}\n", alts.join(",")))
            .collect()
    }

    pub fn load_confusions(path: &Path) -> Result<BTreeMap<String, Vec<String>>, AsrError> {
        Self::parse_confusions(&fs::read_to_string(path)?)
    }
}

/// One random character edit (replace, delete or swap) that changes the word.
pub fn perturb_word(word: &str, rng: &mut ChaCha8Rng) -> String {
    let chars: Vec<char> = word.chars().collect();
    for _ in 0..16 {
        let mut c = chars.clone();
        match rng.gen_range(0..3) {
            0 if !c.is_empty() => {
                let i = rng.gen_range(0..c.len());
                c[i] = LETTERS[rng.gen_range(0..LETTERS.len())] as char;
            }
            1 if c.len() > 2 => {
                c.remove(rng.gen_range(0..c.len()));
            }
            2 if c.len() > 1 => {
                let i = rng.gen_range(0..c.len() - 1);
                c.swap(i, i + 1);
            }
            _ => c.push(LETTERS[rng.gen_range(0..LETTERS.len())] as char),
        }
        if c != chars {
            return c.into_iter().collect();
        }
    }
    format!("{word}{}", LETTERS[rng.gen_range(0..LETTERS.len())] as char)
}

/// Word-level Levenshtein distance with unit costs.
pub fn edit_distance<T: PartialEq>(hyp: &[T], reference: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=hyp.len()).collect();
    let mut cur = vec![0; hyp.len() + 1];
    for (i, r) in reference.iter().enumerate() {
        cur[0] = i + 1;
        for (j, h) in hyp.iter().enumerate() {
            let sub = prev[j] + usize::from(r != h);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[hyp.len()]
}

/// Word error rate: edit distance over reference length. Can exceed 1.
pub fn wer<T: PartialEq>(hyp: &[T], reference: &[T]) -> Result<f64, AsrError> {
    if reference.is_empty() {
        return Err(AsrError::EmptyReference);
    }
    Ok(edit_distance(hyp, reference) as f64 / reference.len() as f64)
}
