//! Bracketed semantic parses in the TOPv2 annotation style.
//!
//! An annotation such as `[IN:PLAY_MUSIC [SL:PLAYLIST jacques ] [SL:TYPE station ] ]`
//! is a tree of intents and slots. Intents hold slots, slots hold text and
//! (for compositional parses) nested intents. This module parses, validates,
//! serializes and scores such annotations with exact match.

use std::fmt;

use thiserror::Error;

/// Characters removed from text words by [`normalize`].
pub const PUNCTUATION: &[char] = &['.', ',', '!', '?', ';', ':', '\'', '"'];

/// The closing token shared by intents and slots.
pub const CLOSE: &str = "]";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ParseError {
    #[error("unbalanced brackets: {0}")]
    UnbalancedBrackets(String),
    #[error("root of a parse must be an intent, found `{0}`")]
    RootNotIntent(String),
    #[error("illegal nesting: {child} directly under {parent}")]
    IllegalNesting { parent: String, child: String },
    #[error("malformed ontology token `{0}`")]
    MalformedOntologyToken(String),
    #[error("empty input")]
    EmptyInput,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SymbolKind {
    Intent,
    Slot,
}

impl SymbolKind {
    fn prefix(self) -> &'static str {
        match self {
            SymbolKind::Intent => "[IN:",
            SymbolKind::Slot => "[SL:",
        }
    }
}

/// An intent or slot label, e.g. `IN:PLAY_MUSIC`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct OntologySymbol {
    kind: SymbolKind,
    label: String,
}

impl OntologySymbol {
    pub fn new(kind: SymbolKind, label: impl Into<String>) -> Result<Self, ParseError> {
        let label = label.into();
        let valid = !label.is_empty()
            && label
                .chars()
                .all(|c| c.is_ascii_uppercase() || c.is_ascii_digit() || c == '_');
        if !valid {
            return Err(ParseError::MalformedOntologyToken(format!(
                "{}{}",
                kind.prefix(),
                label
            )));
        }
        Ok(Self { kind, label })
    }

    pub fn intent(label: impl Into<String>) -> Result<Self, ParseError> {
        Self::new(SymbolKind::Intent, label)
    }

    pub fn slot(label: impl Into<String>) -> Result<Self, ParseError> {
        Self::new(SymbolKind::Slot, label)
    }

    pub fn kind(&self) -> SymbolKind {
        self.kind
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    /// Surface form of the opening token, `[IN:<label>` or `[SL:<label>`.
    pub fn open_token(&self) -> String {
        format!("{}{}", self.kind.prefix(), self.label)
    }

    /// Parses an opening token. Anything starting with `[` that is not a
    /// well-formed intent or slot opener is malformed.
    pub fn from_token(token: &str) -> Result<Self, ParseError> {
        if let Some(label) = token.strip_prefix("[IN:") {
            Self::intent(label)
        } else if let Some(label) = token.strip_prefix("[SL:") {
            Self::slot(label)
        } else {
            Err(ParseError::MalformedOntologyToken(token.to_string()))
        }
    }
}

impl fmt::Display for OntologySymbol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.open_token())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Child {
    Node(ParseNode),
    Text(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseNode {
    symbol: OntologySymbol,
    children: Vec<Child>,
}

impl ParseNode {
    /// Builds a node, enforcing intent/slot alternation for node children.
    pub fn new(symbol: OntologySymbol, children: Vec<Child>) -> Result<Self, ParseError> {
        for child in &children {
            match child {
                Child::Node(n) if n.symbol.kind == symbol.kind => {
                    return Err(ParseError::IllegalNesting {
                        parent: symbol.open_token(),
                        child: n.symbol.open_token(),
                    })
                }
                Child::Text(w) if w.is_empty() || w.chars().any(char::is_whitespace) => {
                    return Err(ParseError::MalformedOntologyToken(w.clone()))
                }
                _ => {}
            }
        }
        Ok(Self { symbol, children })
    }

    pub fn symbol(&self) -> &OntologySymbol {
        &self.symbol
    }

    pub fn children(&self) -> &[Child] {
        &self.children
    }

    /// Number of node levels, counting this one. A flat parse has depth 2.
    pub fn depth(&self) -> usize {
        1 + self
            .children
            .iter()
            .filter_map(|c| match c {
                Child::Node(n) => Some(n.depth()),
                Child::Text(_) => None,
            })
            .max()
            .unwrap_or(0)
    }

    /// True when an intent appears below the root.
    pub fn is_compositional(&self) -> bool {
        fn has_nested_intent(node: &ParseNode, below_root: bool) -> bool {
            if below_root && node.symbol.kind == SymbolKind::Intent {
                return true;
            }
            node.children.iter().any(|c| match c {
                Child::Node(n) => has_nested_intent(n, true),
                Child::Text(_) => false,
            })
        }
        has_nested_intent(self, false)
    }

    /// Linearized token sequence: opener, children, `]`.
    pub fn tokens(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.push_tokens(&mut out);
        out
    }

    fn push_tokens(&self, out: &mut Vec<String>) {
        out.push(self.symbol.open_token());
        for child in &self.children {
            match child {
                Child::Node(n) => n.push_tokens(out),
                Child::Text(w) => out.push(w.clone()),
            }
        }
        out.push(CLOSE.to_string());
    }

    /// Every text word in the tree, in order.
    pub fn text_words(&self) -> Vec<&str> {
        let mut out = Vec::new();
        fn walk<'a>(node: &'a ParseNode, out: &mut Vec<&'a str>) {
            for child in &node.children {
                match child {
                    Child::Node(n) => walk(n, out),
                    Child::Text(w) => out.push(w),
                }
            }
        }
        walk(self, &mut out);
        out
    }
}

impl fmt::Display for ParseNode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&serialize(self))
    }
}

/// Splits an annotation into tokens. Brackets need not be surrounded by
/// whitespace: `]` is always its own token and `[` always starts a new one.
pub fn lex(s: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    let flush = |current: &mut String, tokens: &mut Vec<String>| {
        if !current.is_empty() {
            tokens.push(std::mem::take(current));
        }
    };
    for c in s.chars() {
        match c {
            ']' => {
                flush(&mut current, &mut tokens);
                tokens.push(CLOSE.to_string());
            }
            '[' => {
                flush(&mut current, &mut tokens);
                current.push(c);
            }
            c if c.is_whitespace() => flush(&mut current, &mut tokens),
            c => current.push(c),
        }
    }
    flush(&mut current, &mut tokens);
    tokens
}

fn is_ontology_token(token: &str) -> bool {
    token == CLOSE || token.starts_with('[')
}

pub fn parse_annotation(s: &str) -> Result<ParseNode, ParseError> {
    let tokens = lex(s);
    let first = tokens.first().ok_or(ParseError::EmptyInput)?;
    if first == CLOSE {
        return Err(ParseError::UnbalancedBrackets(
            "closing bracket before any opener".into(),
        ));
    }
    if !first.starts_with('[') {
        return Err(ParseError::RootNotIntent(first.clone()));
    }
    let root_symbol = OntologySymbol::from_token(first)?;
    if root_symbol.kind != SymbolKind::Intent {
        return Err(ParseError::RootNotIntent(first.clone()));
    }

    // Stack of partially built nodes.
    let mut stack: Vec<(OntologySymbol, Vec<Child>)> = vec![(root_symbol, Vec::new())];
    let mut root: Option<ParseNode> = None;
    for token in &tokens[1..] {
        if root.is_some() {
            return Err(ParseError::UnbalancedBrackets(format!(
                "`{token}` after the root was closed"
            )));
        }
        if token == CLOSE {
            let (symbol, children) = stack.pop().expect("stack nonempty while root open");
            let node = ParseNode { symbol, children };
            match stack.last_mut() {
                Some((_, siblings)) => siblings.push(Child::Node(node)),
                None => root = Some(node),
            }
        } else if token.starts_with('[') {
            let symbol = OntologySymbol::from_token(token)?;
            let (parent, _) = stack.last().expect("stack nonempty while root open");
            if parent.kind == symbol.kind {
                return Err(ParseError::IllegalNesting {
                    parent: parent.open_token(),
                    child: symbol.open_token(),
                });
            }
            stack.push((symbol, Vec::new()));
        } else {
            let (_, children) = stack.last_mut().expect("stack nonempty while root open");
            children.push(Child::Text(token.clone()));
        }
    }
    root.ok_or_else(|| {
        ParseError::UnbalancedBrackets(format!("{} unclosed opener(s)", stack.len()))
    })
}

/// Canonical single-space form; always emits a space before `]`.
pub fn serialize(tree: &ParseNode) -> String {
    tree.tokens().join(" ")
}

/// Lowercases text words, strips [`PUNCTUATION`] from them and collapses
/// whitespace. Ontology tokens are left as they are.
pub fn normalize(s: &str) -> String {
    let mut out: Vec<String> = Vec::new();
    for token in lex(s) {
        if is_ontology_token(&token) {
            out.push(token);
            continue;
        }
        let word: String = token
            .chars()
            .filter(|c| !PUNCTUATION.contains(c))
            .flat_map(char::to_lowercase)
            .collect();
        if !word.is_empty() {
            out.push(word);
        }
    }
    out.join(" ")
}

/// Exact match after normalization. Malformed strings are legal inputs.
pub fn exact_match(hyp: &str, reference: &str) -> bool {
    normalize(hyp) == normalize(reference)
}

/// Fraction of `(hypothesis, reference)` pairs that match exactly.
pub fn em_score<H: AsRef<str>, R: AsRef<str>>(pairs: &[(H, R)]) -> Result<f64, ParseError> {
    if pairs.is_empty() {
        return Err(ParseError::EmptyInput);
    }
    let hits = pairs
        .iter()
        .filter(|(h, r)| exact_match(h.as_ref(), r.as_ref()))
        .count();
    Ok(hits as f64 / pairs.len() as f64)
}
