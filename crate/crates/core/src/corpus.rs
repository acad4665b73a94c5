//! Utterance records and their JSON-lines storage.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::parse::normalize;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}:{line}: {msg}")]
    Format { path: String, line: usize, msg: String },
    #[error("audio rows have unequal widths in record {0}")]
    RaggedAudio(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One example: audio features, reference transcript, first-pass
/// hypothesis and target annotation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceRecord {
    pub id: String,
    /// `frames × F` feature matrix.
    pub audio: Vec<Vec<f32>>,
    pub ref_text: String,
    pub hyp_text: String,
    pub annotation: String,
    pub has_asr_error: bool,
}

impl UtteranceRecord {
    pub fn ref_words(&self) -> Vec<String> {
        words(&self.ref_text)
    }

    pub fn hyp_words(&self) -> Vec<String> {
        words(&self.hyp_text)
    }

    pub fn audio_tensor(&self) -> Result<Tensor, CorpusError> {
        let cols = self.audio.first().map_or(0, Vec::len);
        if self.audio.iter().any(|r| r.len() != cols) {
            return Err(CorpusError::RaggedAudio(self.id.clone()));
        }
        let data = self.audio.iter().flatten().map(|&x| x as f64).collect();
        Ok(Tensor::new(vec![self.audio.len(), cols], data).expect("shape checked"))
    }

    /// Sets the hypothesis and recomputes the error flag.
    pub fn set_hypothesis(&mut self, hyp: &[String]) {
        self.hyp_text = hyp.join(" ");
        self.has_asr_error = texts_differ(&self.ref_text, &self.hyp_text);
    }
}

pub fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

/// Inequality after casing and punctuation normalization.
pub fn texts_differ(a: &str, b: &str) -> bool {
    normalize(a) != normalize(b)
}

pub fn audio_from_tensor(t: &Tensor) -> Vec<Vec<f32>> {
    t.to_rows()
        .into_iter()
        .map(|r| r.into_iter().map(|x| x as f32).collect())
        .collect()
}

pub fn write_jsonl(path: &Path, records: &[UtteranceRecord]) -> Result<(), CorpusError> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r).expect("record serializes");
        out.push(b'\n');
    }
    fs::File::create(path)?.write_all(&out)?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<UtteranceRecord>, CorpusError> {
    let file = fs::File::open(path)?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r = serde_json::from_str(&line).map_err(|e| CorpusError::Format {
            path: path.display().to_string(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        records.push(r);
    }
    Ok(records)
}
