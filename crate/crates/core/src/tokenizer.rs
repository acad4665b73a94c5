//! Deterministic subword vocabulary.
//!
//! Text pieces are learned with byte-pair style merges over whitespace words
//! (ties broken lexicographically), then ontology tokens are appended. The
//! id space is `[specials | text pieces | ontology tokens]`, and that full
//! range is the decoder output space.
//!
//! Word boundaries are carried by a single-space piece, so `decode` can
//! rebuild multi-word text exactly.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::ops::Range;
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::parse;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const SPECIALS: [&str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];

const SPACE: &str = " ";

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("target of {target} text pieces is smaller than the {chars} distinct characters")]
    TargetTooSmall { target: usize, chars: usize },
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("ontology token `{0}` is not in the vocabulary")]
    UnknownOntologyToken(String),
    #[error("malformed vocabulary file: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    text: Range<usize>,
    ontology: Range<usize>,
    pieces: HashMap<String, usize>,
    onto_index: HashMap<String, usize>,
    max_piece_chars: usize,
}

fn is_ontology_line(s: &str) -> bool {
    s == parse::CLOSE || parse::OntologySymbol::from_token(s).is_ok()
}

impl Vocabulary {
    fn from_parts(text_pieces: Vec<String>, ontology: Vec<String>) -> Self {
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        let text = tokens.len()..tokens.len() + text_pieces.len();
        tokens.extend(text_pieces);
        let onto_start = tokens.len();
        tokens.extend(ontology);
        let ontology = onto_start..tokens.len();
        let pieces: HashMap<String, usize> =
            text.clone().map(|i| (tokens[i].clone(), i)).collect();
        let onto_index = ontology.clone().map(|i| (tokens[i].clone(), i)).collect();
        let max_piece_chars = text
            .clone()
            .map(|i| tokens[i].chars().count())
            .max()
            .unwrap_or(0);
        Self {
            tokens,
            text,
            ontology,
            pieces,
            onto_index,
            max_piece_chars,
        }
    }

    /// Total number of ids, which is also the decoder output size.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn text_range(&self) -> Range<usize> {
        self.text.clone()
    }

    pub fn ontology_range(&self) -> Range<usize> {
        self.ontology.clone()
    }

    pub fn text_pieces(&self) -> &[String] {
        &self.tokens[self.text.clone()]
    }

    pub fn ontology_tokens(&self) -> &[String] {
        &self.tokens[self.ontology.clone()]
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn piece_id(&self, piece: &str) -> Option<usize> {
        self.pieces.get(piece).copied()
    }

    pub fn ontology_id(&self, token: &str) -> Option<usize> {
        self.onto_index.get(token).copied()
    }

    pub fn is_text_id(&self, id: usize) -> bool {
        self.text.contains(&id)
    }

    pub fn is_ontology_id(&self, id: usize) -> bool {
        self.ontology.contains(&id)
    }

    fn space_id(&self) -> usize {
        self.piece_id(SPACE).unwrap_or(UNK)
    }

    fn encode_word(&self, word: &str, out: &mut Vec<usize>) {
        let chars: Vec<char> = word.chars().collect();
        let mut i = 0;
        let mut buf = String::new();
        while i < chars.len() {
            let longest = self.max_piece_chars.min(chars.len() - i);
            let mut matched = None;
            for len in (1..=longest).rev() {
                buf.clear();
                buf.extend(&chars[i..i + len]);
                if let Some(&id) = self.pieces.get(buf.as_str()) {
                    matched = Some((id, len));
                    break;
                }
            }
            match matched {
                Some((id, len)) => {
                    out.push(id);
                    i += len;
                }
                None => {
                    out.push(UNK);
                    i += 1;
                }
            }
        }
    }

    /// Greedy longest-match encoding of each whitespace word, with the space
    /// piece between words.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        let mut out = Vec::new();
        for (i, word) in text.split_whitespace().enumerate() {
            if i > 0 {
                out.push(self.space_id());
            }
            self.encode_word(word, &mut out);
        }
        out
    }

    /// Encodes a decoder target: `BOS`, ontology ids and text pieces, `EOS`.
    pub fn encode_annotation(&self, annotation: &str) -> Result<Vec<usize>, TokenizerError> {
        let mut out = vec![BOS];
        let mut prev_text = false;
        for token in parse::lex(annotation) {
            if token == parse::CLOSE || token.starts_with('[') {
                let id = self
                    .ontology_id(&token)
                    .ok_or(TokenizerError::UnknownOntologyToken(token))?;
                out.push(id);
                prev_text = false;
            } else {
                if prev_text {
                    out.push(self.space_id());
                }
                self.encode_word(&token, &mut out);
                prev_text = true;
            }
        }
        out.push(EOS);
        Ok(out)
    }

    /// Inverse of [`encode`](Self::encode) and
    /// [`encode_annotation`](Self::encode_annotation). Specials other than
    /// UNK are dropped; UNK renders as `<unk>`.
    pub fn decode(&self, ids: &[usize]) -> String {
        let mut words: Vec<String> = Vec::new();
        let mut current = String::new();
        for &id in ids {
            match id {
                PAD | BOS | EOS => {}
                UNK => current.push_str(SPECIALS[UNK]),
                id if self.is_ontology_id(id) => {
                    if !current.is_empty() {
                        words.push(std::mem::take(&mut current));
                    }
                    words.push(self.tokens[id].clone());
                }
                id if self.is_text_id(id) => {
                    let piece = &self.tokens[id];
                    if piece == SPACE {
                        if !current.is_empty() {
                            words.push(std::mem::take(&mut current));
                        }
                    } else {
                        current.push_str(piece);
                    }
                }
                _ => current.push_str(SPECIALS[UNK]),
            }
        }
        if !current.is_empty() {
            words.push(current);
        }
        words.join(" ")
    }

    /// One token per line; the line number is the id.
    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn from_file_string(s: &str) -> Result<Self, TokenizerError> {
        let lines: Vec<&str> = s.split('\n').collect();
        let lines = match lines.split_last() {
            Some((last, rest)) if last.is_empty() => rest,
            _ => &lines[..],
        };
        if lines.len() < SPECIALS.len() || lines[..SPECIALS.len()] != SPECIALS {
            return Err(TokenizerError::Malformed(
                "first lines must be the special tokens".into(),
            ));
        }
        let body = &lines[SPECIALS.len()..];
        let onto_len = body
            .iter()
            .rev()
            .take_while(|l| is_ontology_line(l))
            .count();
        let split = body.len() - onto_len;
        Ok(Self::from_parts(
            body[..split].iter().map(|s| s.to_string()).collect(),
            body[split..].iter().map(|s| s.to_string()).collect(),
        ))
    }

    pub fn save(&self, path: &Path) -> Result<(), TokenizerError> {
        fs::write(path, self.to_file_string())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TokenizerError> {
        Self::from_file_string(&fs::read_to_string(path)?)
    }

    /// SHA-256 of the file form, hex encoded.
    pub fn digest(&self) -> String {
        let hash = Sha256::digest(self.to_file_string().as_bytes());
        hash.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Builds the vocabulary. Pieces are every distinct character (plus the
/// space piece when any line has several words) followed by merged pieces in
/// merge order, until `target_text_pieces` is reached or nothing is left to
/// merge.
pub fn build_vocab<S: AsRef<str>>(
    corpus: &[S],
    target_text_pieces: usize,
    ontology_tokens: &[String],
) -> Result<Vocabulary, TokenizerError> {
    if corpus.is_empty() {
        return Err(TokenizerError::EmptyCorpus);
    }
    let mut word_freq: BTreeMap<&str, usize> = BTreeMap::new();
    let mut multiword = false;
    for line in corpus {
        let mut n = 0;
        for w in line.as_ref().split_whitespace() {
            *word_freq.entry(w).or_default() += 1;
            n += 1;
        }
        multiword |= n > 1;
    }
    let mut chars: Vec<String> = word_freq
        .keys()
        .flat_map(|w| w.chars())
        .map(String::from)
        .collect();
    if multiword {
        chars.push(SPACE.to_string());
    }
    chars.sort();
    chars.dedup();
    if target_text_pieces < chars.len() {
        return Err(TokenizerError::TargetTooSmall {
            target: target_text_pieces,
            chars: chars.len(),
        });
    }

    // Symbols are interned so pair counting works on integers.
    let mut symbols: Vec<String> = Vec::new();
    let mut symbol_ids: HashMap<String, u32> = HashMap::new();
    let mut intern = |s: &str, symbols: &mut Vec<String>| -> u32 {
        if let Some(&id) = symbol_ids.get(s) {
            return id;
        }
        let id = symbols.len() as u32;
        symbols.push(s.to_string());
        symbol_ids.insert(s.to_string(), id);
        id
    };
    let mut words: Vec<(Vec<u32>, usize)> = word_freq
        .iter()
        .map(|(w, &f)| {
            let ids = w
                .chars()
                .map(|c| intern(&c.to_string(), &mut symbols))
                .collect();
            (ids, f)
        })
        .collect();

    let mut pieces = chars;
    let mut known: std::collections::HashSet<String> = pieces.iter().cloned().collect();
    while pieces.len() < target_text_pieces {
        let mut counts: HashMap<(u32, u32), usize> = HashMap::new();
        for (syms, f) in &words {
            for pair in syms.windows(2) {
                *counts.entry((pair[0], pair[1])).or_default() += f;
            }
        }
        let best = counts.iter().max_by(|(a, ca), (b, cb)| {
            ca.cmp(cb).then_with(|| {
                // Smaller strings win ties, so compare reversed.
                let ka = (&symbols[a.0 as usize], &symbols[a.1 as usize]);
                let kb = (&symbols[b.0 as usize], &symbols[b.1 as usize]);
                kb.cmp(&ka)
            })
        });
        let Some((&(left, right), _)) = best else {
            break;
        };
        let merged = format!("{}{}", symbols[left as usize], symbols[right as usize]);
        let merged_id = intern(&merged, &mut symbols);
        for (syms, _) in &mut words {
            if syms.len() < 2 {
                continue;
            }
            let mut out = Vec::with_capacity(syms.len());
            let mut i = 0;
            while i < syms.len() {
                if i + 1 < syms.len() && syms[i] == left && syms[i + 1] == right {
                    out.push(merged_id);
                    i += 2;
                } else {
                    out.push(syms[i]);
                    i += 1;
                }
            }
            *syms = out;
        }
        if known.insert(merged.clone()) {
            pieces.push(merged);
        }
    }
    Ok(Vocabulary::from_parts(pieces, ontology_tokens.to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn onto() -> Vec<String> {
        ["[IN:PLAY_MUSIC", "[SL:PLAYLIST", "[SL:TYPE", "[IN:X", "]"]
            .iter()
            .map(|s| s.to_string())
            .collect()
    }

    #[test]
    fn single_merge() {
        let v = build_vocab(&["aa"], 2, &[]).unwrap();
        assert_eq!(v.text_pieces(), &["a".to_string(), "aa".to_string()]);
    }

    #[test]
    fn target_too_small() {
        assert!(matches!(
            build_vocab(&["abc"], 2, &[]),
            Err(TokenizerError::TargetTooSmall { target: 2, chars: 3 })
        ));
    }

    #[test]
    fn ties_break_lexicographically() {
        // "ab" and "cd" both occur once; "ab" sorts first.
        let v = build_vocab(&["ab cd"], 6, &[]).unwrap();
        assert_eq!(v.text_pieces()[5], "ab");
    }

    #[test]
    fn id_layout() {
        let v = build_vocab(&["play jacques station"], 20, &onto()).unwrap();
        assert_eq!(v.text_range().start, 4);
        assert_eq!(v.text_range().end, v.ontology_range().start);
        assert_eq!(v.ontology_range().end, v.len());
        assert_eq!(v.len(), 4 + v.text_pieces().len() + 5);
    }

    #[test]
    fn encode_round_trip_and_unk() {
        let corpus = ["play jacques station", "play the eagles"];
        let v = build_vocab(&corpus, 30, &onto()).unwrap();
        assert!(v.encode("").is_empty());
        for line in corpus {
            assert_eq!(v.decode(&v.encode(line)), line);
        }
        assert!(v.encode("play zebra").contains(&UNK));
    }

    #[test]
    fn annotation_encoding() {
        let v = build_vocab(&["play jacques station"], 30, &onto()).unwrap();
        let ids = v.encode_annotation("[IN:X ]").unwrap();
        assert_eq!(
            ids,
            vec![BOS, v.ontology_id("[IN:X").unwrap(), v.ontology_id("]").unwrap(), EOS]
        );
        let music = "[IN:PLAY_MUSIC [SL:PLAYLIST Jacques ] [SL:TYPE station ] ]";
        let normalized = parse::normalize(music);
        let ids = v.encode_annotation(&normalized).unwrap();
        assert_eq!(v.decode(&ids), normalized);
        assert!(matches!(
            v.encode_annotation("[IN:NOPE ]"),
            Err(TokenizerError::UnknownOntologyToken(_))
        ));
    }

    #[test]
    fn file_round_trip() {
        let v = build_vocab(&["play jacques station"], 25, &onto()).unwrap();
        let back = Vocabulary::from_file_string(&v.to_file_string()).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.digest(), v.digest());
    }
}
