//! Shared domain types and pure sequence-editing helpers.
//!
//! Every value here is immutable once constructed; constructors validate the
//! invariants so downstream code can rely on them.

use std::collections::BTreeSet;
use std::fmt;
use std::sync::OnceLock;

use chrono::{DateTime, Utc};
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An ordered, non-empty list of non-empty tokens.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct TokenSequence(Vec<String>);

impl TokenSequence {
    pub fn new<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let tokens: Vec<String> = tokens.into_iter().map(Into::into).collect();
        if tokens.is_empty() {
            return Err(Error::InvalidInput("token sequence is empty".into()));
        }
        if let Some(i) = tokens.iter().position(|t| t.is_empty()) {
            return Err(Error::InvalidInput(format!("empty token at position {i}")));
        }
        Ok(Self(tokens))
    }

    /// Tokenizes free text with [`tokenize`].
    pub fn from_text(text: &str) -> Result<Self> {
        Self::new(tokenize(text))
    }

    pub fn tokens(&self) -> &[String] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    /// Always false; kept for API symmetry with slices.
    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, i: usize) -> Option<&str> {
        self.0.get(i).map(String::as_str)
    }

    /// Copy of the tokens in `span`.
    pub fn slice(&self, span: Span) -> Result<TokenSequence> {
        if span.end() > self.len() || span.start() >= span.end() {
            return Err(Error::InvalidInput(format!(
                "span {span} does not fit a sequence of length {}",
                self.len()
            )));
        }
        Ok(Self(self.0[span.start()..span.end()].to_vec()))
    }

    /// Returns a copy with `token` at position `i`, bypassing step checks.
    pub fn with_token(&self, i: usize, token: &str) -> Result<TokenSequence> {
        if i >= self.len() {
            return Err(Error::PositionOutOfRange {
                position: i,
                len: self.len(),
            });
        }
        if token.is_empty() {
            return Err(Error::InvalidInput("empty replacement token".into()));
        }
        let mut tokens = self.0.clone();
        tokens[i] = token.to_string();
        Ok(Self(tokens))
    }

    /// Space-joined rendering.
    pub fn text(&self) -> String {
        self.0.join(" ")
    }
}

impl TryFrom<Vec<String>> for TokenSequence {
    type Error = Error;

    fn try_from(tokens: Vec<String>) -> Result<Self> {
        Self::new(tokens)
    }
}

impl From<TokenSequence> for Vec<String> {
    fn from(seq: TokenSequence) -> Self {
        seq.0
    }
}

impl fmt::Display for TokenSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.text())
    }
}

/// Half-open token range `[start, end)`, serialized as `[start, end]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Span(pub usize, pub usize);

impl Span {
    pub fn start(&self) -> usize {
        self.0
    }

    pub fn end(&self) -> usize {
        self.1
    }

    pub fn len(&self) -> usize {
        self.1.saturating_sub(self.0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, i: usize) -> bool {
        self.0 <= i && i < self.1
    }
}

impl fmt::Display for Span {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {})", self.0, self.1)
    }
}

/// One bit per token; set bits mark editable (rationale) positions.
///
/// Serialized as a list of `0`/`1` integers.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<u8>", into = "Vec<u8>")]
pub struct RationaleMask(Vec<bool>);

impl RationaleMask {
    pub fn zeros(len: usize) -> Self {
        Self(vec![false; len])
    }

    pub fn ones(len: usize) -> Self {
        Self(vec![true; len])
    }

    pub fn from_bits(bits: Vec<bool>) -> Self {
        Self(bits)
    }

    /// Mask of length `len` with exactly `positions` set.
    pub fn from_positions<I>(len: usize, positions: I) -> Result<Self>
    where
        I: IntoIterator<Item = usize>,
    {
        let mut bits = vec![false; len];
        for p in positions {
            if p >= len {
                return Err(Error::PositionOutOfRange { position: p, len });
            }
            bits[p] = true;
        }
        Ok(Self(bits))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, i: usize) -> bool {
        self.0.get(i).copied().unwrap_or(false)
    }

    pub fn bits(&self) -> &[bool] {
        &self.0
    }

    /// Indices of set bits in ascending order.
    pub fn positions(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().enumerate().filter(|(_, b)| **b).map(|(i, _)| i)
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|b| **b).count()
    }

    /// Keeps only the bits inside `span`; length is unchanged.
    pub fn restrict(&self, span: Span) -> Self {
        Self(
            self.0
                .iter()
                .enumerate()
                .map(|(i, b)| *b && span.contains(i))
                .collect(),
        )
    }

    /// The bits inside `span`, re-indexed from zero.
    pub fn window(&self, span: Span) -> Self {
        Self(self.0[span.start().min(self.len())..span.end().min(self.len())].to_vec())
    }
}

impl TryFrom<Vec<u8>> for RationaleMask {
    type Error = Error;

    fn try_from(bits: Vec<u8>) -> Result<Self> {
        bits.into_iter()
            .map(|b| match b {
                0 => Ok(false),
                1 => Ok(true),
                other => Err(Error::InvalidInput(format!("mask bit must be 0 or 1, got {other}"))),
            })
            .collect::<Result<Vec<_>>>()
            .map(Self)
    }
}

impl From<RationaleMask> for Vec<u8> {
    fn from(mask: RationaleMask) -> Self {
        mask.0.into_iter().map(u8::from).collect()
    }
}

/// A tokenized document with its sentence partition and rationale mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub id: String,
    pub document: TokenSequence,
    pub sentence_spans: Vec<Span>,
    pub gold_label: Option<String>,
    pub mask: RationaleMask,
}

impl Instance {
    pub fn new(
        id: impl Into<String>,
        document: TokenSequence,
        sentence_spans: Vec<Span>,
        gold_label: Option<String>,
        mask: RationaleMask,
    ) -> Result<Self> {
        let instance = Self {
            id: id.into(),
            document,
            sentence_spans,
            gold_label,
            mask,
        };
        instance.validate()?;
        Ok(instance)
    }

    /// Builds an instance whose sentence spans come from [`sentence_spans`].
    pub fn with_default_sentences(
        id: impl Into<String>,
        document: TokenSequence,
        gold_label: Option<String>,
        mask: RationaleMask,
    ) -> Result<Self> {
        let spans = sentence_spans(document.tokens());
        Self::new(id, document, spans, gold_label, mask)
    }

    pub fn validate(&self) -> Result<()> {
        let len = self.document.len();
        if self.mask.len() != len {
            return Err(Error::LengthMismatch(self.mask.len(), len));
        }
        let mut cursor = 0;
        for span in &self.sentence_spans {
            if span.start() != cursor || span.is_empty() {
                return Err(Error::InvalidInput(format!(
                    "sentence spans of {} do not partition the document at {span}",
                    self.id
                )));
            }
            cursor = span.end();
        }
        if cursor != len {
            return Err(Error::InvalidInput(format!(
                "sentence spans of {} cover {cursor} of {len} tokens",
                self.id
            )));
        }
        Ok(())
    }

    pub fn sentence(&self, index: usize) -> Result<Span> {
        self.sentence_spans.get(index).copied().ok_or_else(|| {
            Error::InvalidInput(format!(
                "sentence {index} out of range ({} sentences)",
                self.sentence_spans.len()
            ))
        })
    }

    pub fn with_mask(&self, mask: RationaleMask) -> Result<Self> {
        Self::new(
            self.id.clone(),
            self.document.clone(),
            self.sentence_spans.clone(),
            self.gold_label.clone(),
            mask,
        )
    }
}

/// One single-token edit, realising a 1-counterfactual.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplacementStep {
    pub position: usize,
    pub old_token: String,
    pub new_token: String,
    /// First-order loss estimate (HotFlip) or fill score (MLM).
    pub estimated_score: f64,
    /// Loss toward the alternative label after applying the edit.
    pub actual_loss: f64,
}

impl ReplacementStep {
    pub fn new(position: usize, old_token: impl Into<String>, new_token: impl Into<String>) -> Self {
        Self {
            position,
            old_token: old_token.into(),
            new_token: new_token.into(),
            estimated_score: 0.0,
            actual_loss: 0.0,
        }
    }

    /// The edit that undoes this one.
    pub fn inverse(&self) -> Self {
        Self {
            position: self.position,
            old_token: self.new_token.clone(),
            new_token: self.old_token.clone(),
            estimated_score: 0.0,
            actual_loss: 0.0,
        }
    }
}

/// Replaces `seq[step.position]`, checking the incumbent token.
pub fn apply_replacement(seq: &TokenSequence, step: &ReplacementStep) -> Result<TokenSequence> {
    if step.old_token == step.new_token {
        return Err(Error::InvalidInput(format!(
            "identity edit at position {}",
            step.position
        )));
    }
    let found = seq.get(step.position).ok_or(Error::PositionOutOfRange {
        position: step.position,
        len: seq.len(),
    })?;
    if found != step.old_token {
        return Err(Error::TokenMismatch {
            position: step.position,
            expected: step.old_token.clone(),
            found: found.to_string(),
        });
    }
    seq.with_token(step.position, &step.new_token)
}

/// Indices where `a` and `b` differ.
pub fn diff_positions(a: &TokenSequence, b: &TokenSequence) -> Result<BTreeSet<usize>> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch(a.len(), b.len()));
    }
    Ok(a.tokens()
        .iter()
        .zip(b.tokens())
        .enumerate()
        .filter(|(_, (x, y))| x != y)
        .map(|(i, _)| i)
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Hotflip,
    Mlm,
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hotflip" => Ok(Self::Hotflip),
            "mlm" => Ok(Self::Mlm),
            other => Err(Error::InvalidInput(format!("unknown method {other:?}"))),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Hotflip => "hotflip",
            Self::Mlm => "mlm",
        })
    }
}

/// Which sequence the flip is judged on.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PredictionScope {
    #[default]
    Sentence,
    Document,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationConfig {
    pub method: Method,
    pub max_steps: usize,
    pub top_p_positions: usize,
    pub beam_width: usize,
    pub fill_top_k: usize,
    pub scope: PredictionScope,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            method: Method::Hotflip,
            max_steps: 5,
            top_p_positions: 3,
            beam_width: 3,
            fill_top_k: 10,
            scope: PredictionScope::Sentence,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, value) in [
            ("max_steps", self.max_steps),
            ("top_p_positions", self.top_p_positions),
            ("beam_width", self.beam_width),
            ("fill_top_k", self.fill_top_k),
        ] {
            if value == 0 {
                return Err(Error::InvalidInput(format!("{name} must be at least 1")));
            }
        }
        Ok(())
    }
}

/// Ordered single-token edits from an instance sentence to its final
/// counterfactual.
///
/// Step positions are document indices. `original_tokens` holds the tokens of
/// `sentence_span` as they were before editing, so the trail can be replayed
/// without the dataset or the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualTrail {
    pub trail_id: String,
    pub instance_id: String,
    pub sentence_index: usize,
    pub method: Method,
    pub original_prediction: String,
    pub steps: Vec<ReplacementStep>,
    pub final_prediction: String,
    pub flipped: bool,
    pub config_snapshot: GenerationConfig,
    pub model_id: String,
    #[serde(default)]
    pub session_id: Option<String>,
    pub sentence_span: Span,
    pub original_tokens: Vec<String>,
    #[serde(default)]
    pub seed: Option<u64>,
}

impl CounterfactualTrail {
    pub fn original_sentence(&self) -> Result<TokenSequence> {
        TokenSequence::new(self.original_tokens.clone())
    }

    /// Sentence-level sequences after each step, starting with the original.
    pub fn replay(&self) -> Result<Vec<TokenSequence>> {
        let mut current = self.original_sentence()?;
        let mut out = vec![current.clone()];
        for step in &self.steps {
            if !self.sentence_span.contains(step.position) {
                return Err(Error::InvalidInput(format!(
                    "step position {} outside sentence {}",
                    step.position, self.sentence_span
                )));
            }
            let mut local = step.clone();
            local.position -= self.sentence_span.start();
            current = apply_replacement(&current, &local)?;
            out.push(current.clone());
        }
        Ok(out)
    }

    pub fn counterfactual_sentence(&self) -> Result<TokenSequence> {
        Ok(self.replay()?.pop().expect("replay yields at least the original"))
    }

    /// Checks the structural invariants that do not need a model.
    pub fn check_invariants(&self, mask: Option<&RationaleMask>) -> Result<()> {
        let n = self.steps.len();
        if n == 0 || n > self.config_snapshot.max_steps {
            return Err(Error::InvalidInput(format!(
                "trail {} has {n} steps (cap {})",
                self.trail_id, self.config_snapshot.max_steps
            )));
        }
        if self.flipped != (self.final_prediction != self.original_prediction) {
            return Err(Error::InvalidInput(format!(
                "trail {} flipped flag disagrees with predictions",
                self.trail_id
            )));
        }
        let positions: BTreeSet<usize> = self.steps.iter().map(|s| s.position).collect();
        if positions.len() != n {
            return Err(Error::InvalidInput(format!(
                "trail {} revisits a position",
                self.trail_id
            )));
        }
        if let Some(mask) = mask {
            if let Some(p) = positions.iter().find(|p| !mask.get(**p)) {
                return Err(Error::InvalidInput(format!(
                    "trail {} edits unmasked position {p}",
                    self.trail_id
                )));
            }
        }
        let original = self.original_sentence()?;
        let last = self.counterfactual_sentence()?;
        if diff_positions(&original, &last)?.len() != n {
            return Err(Error::InvalidInput(format!(
                "trail {} replay does not differ at {n} positions",
                self.trail_id
            )));
        }
        Ok(())
    }
}

/// One annotator's 1–5 judgement of a trail.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rating {
    pub rating_id: String,
    pub trail_id: String,
    pub annotator_id: String,
    pub plausibility: u8,
    pub meaningfulness: u8,
    pub faithfulness: u8,
    pub timestamp: DateTime<Utc>,
}

impl Rating {
    pub fn new(
        trail_id: impl Into<String>,
        annotator_id: impl Into<String>,
        plausibility: u8,
        meaningfulness: u8,
        faithfulness: u8,
    ) -> Result<Self> {
        let rating = Self {
            rating_id: uuid::Uuid::new_v4().to_string(),
            trail_id: trail_id.into(),
            annotator_id: annotator_id.into(),
            plausibility,
            meaningfulness,
            faithfulness,
            timestamp: Utc::now(),
        };
        rating.validate()?;
        Ok(rating)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("plausibility", self.plausibility),
            ("meaningfulness", self.meaningfulness),
            ("faithfulness", self.faithfulness),
        ] {
            if !(1..=5).contains(&v) {
                return Err(Error::InvalidInput(format!("{name} must be in 1..=5, got {v}")));
            }
        }
        Ok(())
    }
}

fn token_pattern() -> &'static Regex {
    static PATTERN: OnceLock<Regex> = OnceLock::new();
    PATTERN.get_or_init(|| Regex::new(r"\w+(?:'\w+)*|[^\w\s]").expect("static pattern"))
}

/// Lowercased whitespace + punctuation tokenization. Each punctuation
/// character is its own token; in-word apostrophes are kept.
pub fn tokenize(text: &str) -> Vec<String> {
    token_pattern()
        .find_iter(text)
        .map(|m| m.as_str().to_lowercase())
        .collect()
}

/// Partitions tokens into sentences ending at `.`, `!` or `?`.
pub fn sentence_spans(tokens: &[String]) -> Vec<Span> {
    let mut spans = Vec::new();
    let mut start = 0;
    for (i, t) in tokens.iter().enumerate() {
        if matches!(t.as_str(), "." | "!" | "?") {
            spans.push(Span(start, i + 1));
            start = i + 1;
        }
    }
    if start < tokens.len() {
        spans.push(Span(start, tokens.len()));
    }
    spans
}
