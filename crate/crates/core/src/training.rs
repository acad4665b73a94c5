//! Training pairs, feature masking, the optimizer and the training loop.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::asr::{AsrError, AsrStub};
use crate::corpus::{CorpusError, UtteranceRecord};
use crate::datagen::derive_seed;
use crate::model::{DeliberationModel, ModelError, Sources};
use crate::parse::exact_match;
use crate::tensor::{Gradients, Graph, ParamStore, Tensor};
use crate::tokenizer::{TokenizerError, Vocabulary, UNK};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss at epoch {epoch}, step {step} (last finite loss {last_finite:?})")]
    NonFiniteLoss { epoch: usize, step: usize, last_finite: Option<f64> },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("empty training set")]
    EmptyDataset,
    #[error("record {id}: {source}")]
    Record { id: String, source: Box<TrainError> },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Asr(#[from] AsrError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

/// Which text a training pair feeds to the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// First-pass hypotheses only.
    Hyp,
    /// References only.
    Ref,
    /// Every reference plus the hypothesis of each errorful record.
    Union,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Hyp, Strategy::Ref, Strategy::Union];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Hyp => "hyp",
            Strategy::Ref => "ref",
            Strategy::Union => "union",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Strategy::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| format!("unknown strategy `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrainingPair {
    pub record: usize,
    pub use_hypothesis: bool,
}

pub fn build_pairs(records: &[UtteranceRecord], strategy: Strategy) -> Vec<TrainingPair> {
    let mut pairs = Vec::new();
    for (i, r) in records.iter().enumerate() {
        match strategy {
            Strategy::Hyp => pairs.push(TrainingPair {
                record: i,
                use_hypothesis: true,
            }),
            Strategy::Ref => pairs.push(TrainingPair {
                record: i,
                use_hypothesis: false,
            }),
            Strategy::Union => {
                pairs.push(TrainingPair {
                    record: i,
                    use_hypothesis: false,
                });
                if r.has_asr_error {
                    pairs.push(TrainingPair {
                        record: i,
                        use_hypothesis: true,
                    });
                }
            }
        }
    }
    pairs
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpecAugmentPolicy {
    pub time_masks: usize,
    pub max_time_width: usize,
    pub feature_masks: usize,
    pub max_feature_width: usize,
}

impl SpecAugmentPolicy {
    pub fn none() -> Self {
        Self {
            time_masks: 0,
            max_time_width: 0,
            feature_masks: 0,
            max_feature_width: 0,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.time_masks == 0 || self.max_time_width == 0
    }
}

impl Default for SpecAugmentPolicy {
    fn default() -> Self {
        Self {
            time_masks: 1,
            max_time_width: 10,
            feature_masks: 1,
            max_feature_width: 4,
        }
    }
}

/// Zeroes `(start, width)` frame bands and channel bands.
pub fn mask_bands(features: &Tensor, time: &[(usize, usize)], channels: &[(usize, usize)]) -> Tensor {
    let mut out = features.clone();
    let (rows, cols) = (features.rows(), features.cols());
    let data = out.data_mut();
    for &(start, width) in time {
        for r in start..(start + width).min(rows) {
            data[r * cols..(r + 1) * cols].iter_mut().for_each(|x| *x = 0.0);
        }
    }
    for &(start, width) in channels {
        for r in 0..rows {
            for c in start..(start + width).min(cols) {
                data[r * cols + c] = 0.0;
            }
        }
    }
    out
}

/// Masks each band with a width drawn uniformly from `0..=max` (capped at
/// the axis length) and a uniform start.
pub fn spec_augment(features: &Tensor, policy: &SpecAugmentPolicy, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |n: usize, count: usize, max: usize| -> Vec<(usize, usize)> {
        (0..count)
            .map(|_| {
                let w = rng.gen_range(0..=max.min(n));
                (rng.gen_range(0..=n - w), w)
            })
            .collect()
    };
    let time = draw(features.rows(), policy.time_masks, policy.max_time_width);
    let channels = draw(features.cols(), policy.feature_masks, policy.max_feature_width);
    mask_bands(features, &time, &channels)
}

/// Step-size schedule over the planned number of optimizer steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Decays linearly from the base rate to zero at the last planned step.
    Linear,
}

impl LrSchedule {
    /// Rate for the 0-based `step` out of `total` planned steps.
    pub fn rate(self, base: f64, step: usize, total: usize) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Linear => base * (1.0 - step as f64 / total.max(1) as f64),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub strategy: Strategy,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default)]
    pub lr_schedule: LrSchedule,
    pub label_smoothing: f64,
    pub spec_augment: SpecAugmentPolicy,
    /// Stop after this many epochs without a validation improvement.
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Union,
            epochs: 30,
            batch_size: 32,
            learning_rate: 3e-4,
            lr_schedule: LrSchedule::Constant,
            label_smoothing: 0.1,
            spec_augment: SpecAugmentPolicy::default(),
            patience: 5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad("label_smoothing must be in [0, 1)");
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch_size and epochs must be positive");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        Ok(())
    }
}

/// Token ids of an input text. An empty text becomes a single UNK so the
/// encoder always has at least one position.
pub fn input_ids(vocab: &Vocabulary, text: &str) -> Vec<usize> {
    let ids = vocab.encode(text);
    if ids.is_empty() {
        vec![UNK]
    } else {
        ids
    }
}

/// Model inputs for one record with embeddings precomputed.
#[derive(Debug, Clone)]
pub struct Example {
    pub id: String,
    pub hyp_ids: Vec<usize>,
    pub text_emb: Tensor,
    pub features: Tensor,
    pub audio_emb: Tensor,
    pub target: Vec<usize>,
}

impl Example {
    pub fn sources(&self) -> Sources<'_> {
        Sources {
            text: &self.text_emb,
            audio: &self.audio_emb,
            hyp: &self.hyp_ids,
        }
    }
}

/// Encodes a record's input text and audio through the vocabulary and
/// frozen stub. The target is left empty.
pub fn prepare_input(
    vocab: &Vocabulary,
    stub: &AsrStub,
    record: &UtteranceRecord,
    use_hypothesis: bool,
) -> Result<Example, TrainError> {
    let wrap = |e: TrainError| TrainError::Record {
        id: record.id.clone(),
        source: Box::new(e),
    };
    let text = if use_hypothesis { &record.hyp_text } else { &record.ref_text };
    let hyp_ids = input_ids(vocab, text);
    let text_emb = stub.text.text_embed(&hyp_ids).map_err(|e| wrap(e.into()))?;
    let features = record.audio_tensor().map_err(|e| wrap(e.into()))?;
    let audio_emb = stub.audio.audio_embed(&features).map_err(|e| wrap(e.into()))?;
    Ok(Example {
        id: record.id.clone(),
        hyp_ids,
        text_emb,
        features,
        audio_emb,
        target: Vec::new(),
    })
}

/// [`prepare_input`] plus the encoded target annotation.
pub fn prepare(
    vocab: &Vocabulary,
    stub: &AsrStub,
    record: &UtteranceRecord,
    use_hypothesis: bool,
) -> Result<Example, TrainError> {
    let mut ex = prepare_input(vocab, stub, record, use_hypothesis)?;
    ex.target = vocab
        .encode_annotation(&record.annotation)
        .map_err(|e| TrainError::Record {
            id: record.id.clone(),
            source: Box::new(e.into()),
        })?;
    Ok(ex)
}

/// Greedy prediction for one prepared example, as an annotation string.
pub fn predict(model: &DeliberationModel, vocab: &Vocabulary, ex: &Example) -> Result<String, ModelError> {
    let ids = model.greedy_decode(ex.sources())?;
    Ok(vocab.decode(&ids))
}

/// Fraction of examples whose prediction exactly matches the annotation.
pub fn exact_match_rate(
    model: &DeliberationModel,
    vocab: &Vocabulary,
    examples: &[Example],
    annotations: &[&str],
) -> Result<f64, ModelError> {
    if examples.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0;
    for (ex, gold) in examples.iter().zip(annotations) {
        if exact_match(&predict(model, vocab, ex)?, gold) {
            hits += 1;
        }
    }
    Ok(hits as f64 / examples.len() as f64)
}

/// Mean per-step loss over `batch`.
pub fn forward_teacher_forced(
    model: &DeliberationModel,
    batch: &[Example],
    label_smoothing: f64,
) -> Result<f64, ModelError> {
    if batch.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    let mut total = 0.0;
    let mut steps = 0;
    for ex in batch {
        let mut g = Graph::new(model.params());
        let (loss, n) = model.loss_sum(&mut g, ex.sources(), &ex.target, label_smoothing)?;
        total += g.scalar(loss);
        steps += n;
    }
    Ok(total / steps as f64)
}

/// Adaptive moment estimation without weight decay. State exists only for
/// trainable parameters and is keyed by parameter name.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn state_names(&self) -> impl Iterator<Item = &str> {
        self.moments.keys().map(String::as_str)
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update. Parameters without a gradient are left alone.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (id, g) in grads.params() {
            if store.is_frozen(id) {
                continue;
            }
            let n = g.len();
            let (m, v) = self
                .moments
                .entry(store.name(id).to_string())
                .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            let p = store.get_mut(id).data_mut();
            for i in 0..n {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                p[i] -= self.lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + self.eps);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_em: f64,
    pub wall_secs: f64,
}

impl EpochMetrics {
    /// Deterministic log line (no wall time).
    pub fn log_line(&self) -> String {
        format!(
            "epoch={} train_loss={:.6} valid_em={:.4}",
            self.epoch, self.train_loss, self.valid_em
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: DeliberationModel,
    pub best_epoch: usize,
    pub best_valid_em: f64,
    pub epochs: Vec<EpochMetrics>,
    /// Mean loss of every optimizer step, in order.
    pub step_losses: Vec<f64>,
    pub optimizer: Adam,
}

/// Trains `model` on `train`, selecting the epoch with the best validation
/// exact match. Validation inputs are first-pass hypotheses. The returned
/// model holds the best parameters rounded to `f32`, exactly what a saved
/// checkpoint reloads to.
pub fn train(
    mut model: DeliberationModel,
    vocab: &Vocabulary,
    stub: &AsrStub,
    train: &[UtteranceRecord],
    valid: &[UtteranceRecord],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    if train.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let pairs = build_pairs(train, config.strategy);
    let examples: Vec<Example> = pairs
        .iter()
        .map(|p| prepare(vocab, stub, &train[p.record], p.use_hypothesis))
        .collect::<Result<_, _>>()?;
    let valid_examples: Vec<Example> = valid
        .iter()
        .map(|r| prepare_input(vocab, stub, r, true))
        .collect::<Result<_, _>>()?;
    let valid_gold: Vec<&str> = valid.iter().map(|r| r.annotation.as_str()).collect();
    let augment = model.config().modality.uses_audio() && !config.spec_augment.is_identity();

    let mut adam = Adam::new(config.learning_rate);
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut epochs = Vec::new();
    let mut step_losses = Vec::new();
    let mut last_finite = None;
    let mut since_best = 0;
    let planned_steps = config.epochs * examples.len().div_ceil(config.batch_size);
    for epoch in 1..=config.epochs {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..examples.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(epoch as u64));
        for i in (1..order.len()).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }
        let mut epoch_loss = 0.0;
        let mut epoch_steps = 0;
        for chunk in order.chunks(config.batch_size) {
            let mut grads = Gradients::default();
            let mut batch_loss = 0.0;
            let mut batch_steps = 0;
            for &i in chunk {
                let ex = &examples[i];
                let masked;
                let audio_emb = if augment {
                    let seed = derive_seed(derive_seed(config.seed, epoch as u64), i as u64);
                    masked = stub
                        .audio
                        .audio_embed(&spec_augment(&ex.features, &config.spec_augment, seed))?;
                    &masked
                } else {
                    &ex.audio_emb
                };
                let src = Sources {
                    text: &ex.text_emb,
                    audio: audio_emb,
                    hyp: &ex.hyp_ids,
                };
                let mut g = Graph::new(model.params());
                let (loss, n) = model.loss_sum(&mut g, src, &ex.target, config.label_smoothing)?;
                let value = g.scalar(loss);
                if !value.is_finite() {
                    return Err(TrainError::NonFiniteLoss {
                        epoch,
                        step: step_losses.len(),
                        last_finite,
                    });
                }
                grads.accumulate(&g.backward(loss).map_err(ModelError::from)?);
                batch_loss += value;
                batch_steps += n;
            }
            grads.scale(1.0 / batch_steps as f64);
            adam.lr = config
                .lr_schedule
                .rate(config.learning_rate, step_losses.len(), planned_steps);
            adam.step(model.params_mut(), &grads);
            let mean = batch_loss / batch_steps as f64;
            last_finite = Some(mean);
            step_losses.push(mean);
            epoch_loss += batch_loss;
            epoch_steps += batch_steps;
        }
        let valid_em = exact_match_rate(&model, vocab, &valid_examples, &valid_gold)?;
        let metrics = EpochMetrics {
            epoch,
            train_loss: epoch_loss / epoch_steps as f64,
            valid_em,
            wall_secs: started.elapsed().as_secs_f64(),
        };
        on_epoch(&metrics);
        epochs.push(metrics);
        if best.as_ref().is_none_or(|(em, _, _)| valid_em > *em) {
            best = Some((valid_em, epoch, model.params().clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
        }
    }
    let (best_valid_em, best_epoch, params) = best.expect("at least one epoch");
    model.params_mut().load_values_from(&params).map_err(ModelError::from)?;
    model.params_mut().round_to_f32();
    Ok(TrainOutcome {
        model,
        best_epoch,
        best_valid_em,
        epochs,
        step_losses,
        optimizer: adam,
    })
}
