//! Exact-match evaluation split by first-pass error buckets.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::asr::AsrStub;
use crate::corpus::UtteranceRecord;
use crate::model::{DeliberationModel, ModelError};
use crate::parse::exact_match;
use crate::tokenizer::Vocabulary;
use crate::training::{predict, prepare_input, TrainError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("checkpoint was trained with vocabulary {checkpoint}, but the dataset vocabulary is {dataset}")]
    VocabMismatch { checkpoint: String, dataset: String },
    #[error("{predictions} predictions for {records} records")]
    CountMismatch { predictions: usize, records: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Bucket {
    pub n: usize,
    pub correct: usize,
}

impl Bucket {
    pub fn em(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            self.correct as f64 / self.n as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub overall: Bucket,
    pub no_error: Bucket,
    pub error: Bucket,
}

impl EvalReport {
    pub fn em_overall(&self) -> f64 {
        self.overall.em()
    }
}

/// Scores predictions against each record's annotation. Records are
/// bucketed by their first-pass error flag.
pub fn score(records: &[UtteranceRecord], predictions: &[String]) -> Result<EvalReport, EvalError> {
    if records.len() != predictions.len() {
        return Err(EvalError::CountMismatch {
            predictions: predictions.len(),
            records: records.len(),
        });
    }
    let mut report = EvalReport {
        overall: Bucket::default(),
        no_error: Bucket::default(),
        error: Bucket::default(),
    };
    for (r, p) in records.iter().zip(predictions) {
        let hit = exact_match(p, &r.annotation) as usize;
        let bucket = if r.has_asr_error {
            &mut report.error
        } else {
            &mut report.no_error
        };
        bucket.n += 1;
        bucket.correct += hit;
        report.overall.n += 1;
        report.overall.correct += hit;
    }
    Ok(report)
}

/// Refuses to pair a checkpoint with a different vocabulary.
pub fn check_vocab(checkpoint_digest: &str, vocab: &Vocabulary) -> Result<(), EvalError> {
    let dataset = vocab.digest();
    if checkpoint_digest != dataset {
        return Err(EvalError::VocabMismatch {
            checkpoint: checkpoint_digest.to_string(),
            dataset,
        });
    }
    Ok(())
}

/// Greedy-decodes every record from its first-pass hypothesis.
pub fn predict_all(
    model: &DeliberationModel,
    vocab: &Vocabulary,
    stub: &AsrStub,
    records: &[UtteranceRecord],
) -> Result<Vec<String>, EvalError> {
    records
        .iter()
        .map(|r| {
            let ex = prepare_input(vocab, stub, r, true)?;
            Ok(predict(model, vocab, &ex)?)
        })
        .collect()
}

pub fn evaluate(
    model: &DeliberationModel,
    vocab: &Vocabulary,
    stub: &AsrStub,
    records: &[UtteranceRecord],
) -> Result<(EvalReport, Vec<String>), EvalError> {
    let predictions = predict_all(model, vocab, stub, records)?;
    Ok((score(records, &predictions)?, predictions))
}
