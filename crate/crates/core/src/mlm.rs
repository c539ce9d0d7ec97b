//! Masked-infill edit proposal.
//!
//! Every editable position gets the same attribution score. For each one the
//! sequence is masked there, wrapped in a label-bearing prompt and handed to
//! the fill model; its top token becomes that position's candidate. The
//! candidate with the lowest actual loss toward the alternative label wins.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hotflip::{CandidateEdit, PositionScore};
use crate::models::{ranked_fills, AssessedModel, FillModel, UNKNOWN_TOKEN};
use crate::text::{apply_replacement, tokenize, RationaleMask, ReplacementStep, TokenSequence};

pub const MASKED_SEQUENCE: &str = "<masked sequence>";
pub const ALTERNATIVE_LABEL: &str = "<alternative label>";
pub const DEFAULT_TEMPLATE: &str =
    "\"<masked sequence>\" the sentiment of this review is \"<alternative label>\"";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "TemplateRecord", into = "TemplateRecord")]
pub struct PromptTemplate {
    pattern: String,
    label_names: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
struct TemplateRecord {
    pattern: String,
    #[serde(default)]
    label_names: BTreeMap<String, String>,
}

impl TryFrom<TemplateRecord> for PromptTemplate {
    type Error = Error;

    fn try_from(r: TemplateRecord) -> Result<Self> {
        Ok(Self::new(r.pattern)?.with_label_names(r.label_names))
    }
}

impl From<PromptTemplate> for TemplateRecord {
    fn from(t: PromptTemplate) -> Self {
        Self {
            pattern: t.pattern,
            label_names: t.label_names,
        }
    }
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self::new(DEFAULT_TEMPLATE).expect("default template is valid")
    }
}

impl PromptTemplate {
    /// Both placeholders must appear exactly once.
    pub fn new(pattern: impl Into<String>) -> Result<Self> {
        let pattern = pattern.into();
        for placeholder in [MASKED_SEQUENCE, ALTERNATIVE_LABEL] {
            let n = pattern.matches(placeholder).count();
            if n != 1 {
                return Err(Error::InvalidInput(format!(
                    "template must contain {placeholder} exactly once, found {n}"
                )));
            }
        }
        Ok(Self {
            pattern,
            label_names: BTreeMap::new(),
        })
    }

    /// Display names per label id. With an empty map the label id is used
    /// verbatim; otherwise every label used must have an entry.
    pub fn with_label_names(mut self, names: BTreeMap<String, String>) -> Self {
        self.label_names = names;
        self
    }

    pub fn pattern(&self) -> &str {
        &self.pattern
    }

    pub fn label_name<'a>(&'a self, label: &'a str) -> Result<&'a str> {
        if self.label_names.is_empty() {
            return Ok(label);
        }
        self.label_names
            .get(label)
            .map(String::as_str)
            .ok_or_else(|| Error::UnknownLabel(format!("no display name for label {label:?}")))
    }
}

/// A template instance: its tokens, where the mask sits, and the text.
#[derive(Debug, Clone, PartialEq)]
pub struct Prompt {
    pub tokens: TokenSequence,
    pub mask_index: usize,
    pub text: String,
}

/// Masks position `i` of `seq` and substitutes it and the display name of
/// `alt_label` into the template.
pub fn build_prompt(
    seq: &TokenSequence,
    i: usize,
    alt_label: &str,
    template: &PromptTemplate,
    mask_token: &str,
) -> Result<Prompt> {
    let masked = seq.with_token(i, mask_token)?;
    let name = template.label_name(alt_label)?;

    // Split the pattern around the two placeholders, in whichever order.
    let pattern = template.pattern();
    let seq_at = pattern.find(MASKED_SEQUENCE).expect("validated");
    let label_at = pattern.find(ALTERNATIVE_LABEL).expect("validated");
    let mut pieces: Vec<(usize, &str, Option<bool>)> = vec![
        (seq_at, MASKED_SEQUENCE, Some(true)),
        (label_at, ALTERNATIVE_LABEL, Some(false)),
    ];
    pieces.sort_by_key(|p| p.0);

    let mut tokens: Vec<String> = Vec::new();
    let mut text = String::new();
    let mut mask_index = 0;
    let mut cursor = 0;
    for (at, placeholder, is_seq) in pieces {
        let literal = &pattern[cursor..at];
        tokens.extend(tokenize(literal));
        text.push_str(literal);
        if is_seq == Some(true) {
            mask_index = tokens.len() + i;
            tokens.extend(masked.tokens().iter().cloned());
            text.push_str(&masked.text());
        } else {
            tokens.extend(tokenize(name));
            text.push_str(name);
        }
        cursor = at + placeholder.len();
    }
    let tail = &pattern[cursor..];
    tokens.extend(tokenize(tail));
    text.push_str(tail);

    Ok(Prompt {
        tokens: TokenSequence::new(tokens)?,
        mask_index,
        text,
    })
}

/// Every set bit scores 1.0, in document order.
pub fn position_scores_uniform(mask: &RationaleMask) -> Result<Vec<PositionScore>> {
    let scores: Vec<PositionScore> = mask
        .positions()
        .map(|position| PositionScore {
            position,
            score: 1.0,
        })
        .collect();
    if scores.is_empty() {
        return Err(Error::NoEditablePositions("mask has no set bits".into()));
    }
    Ok(scores)
}

/// Fill-model settings shared by every position of a step.
pub struct FillRequest<'a> {
    pub filler: &'a dyn FillModel,
    pub template: &'a PromptTemplate,
    pub alt_label: &'a str,
    pub fill_top_k: usize,
}

/// One candidate per editable position: the filler's best token that is not
/// the incumbent and was not placed there before. Positions whose top-k list
/// holds no admissible token are skipped.
pub fn fill_candidates(
    seq: &TokenSequence,
    mask: &RationaleMask,
    request: &FillRequest<'_>,
    used: &BTreeMap<usize, BTreeSet<String>>,
) -> Result<Vec<CandidateEdit>> {
    let mask_token = request.filler.mask_token();
    let mut out = Vec::new();
    for score in position_scores_uniform(mask)? {
        let i = score.position;
        let incumbent = seq.get(i).ok_or(Error::PositionOutOfRange {
            position: i,
            len: seq.len(),
        })?;
        let prompt = build_prompt(seq, i, request.alt_label, request.template, mask_token)?;
        let ranked = ranked_fills(request.filler, &prompt.tokens, prompt.mask_index, request.fill_top_k)?;
        if ranked.is_empty() {
            return Err(Error::EmptyCandidates("fill model returned an empty distribution".into()));
        }
        let previously = used.get(&i);
        let chosen = ranked.into_iter().find(|(t, _)| {
            t != incumbent
                && t != UNKNOWN_TOKEN
                && t != mask_token
                && !previously.is_some_and(|p| p.contains(t))
        });
        if let Some((token, fill_score)) = chosen {
            let mut step = ReplacementStep::new(i, incumbent, token);
            step.estimated_score = fill_score;
            out.push(CandidateEdit {
                step,
                estimated_loss_delta: None,
            });
        }
    }
    Ok(out)
}

/// The candidate whose application gives the lowest actual loss toward
/// `alt`; ties go to the lower position.
pub fn select_step_mlm(
    seq: &TokenSequence,
    candidates: &[CandidateEdit],
    alt: usize,
    model: &dyn AssessedModel,
) -> Result<ReplacementStep> {
    let mut best: Option<ReplacementStep> = None;
    for candidate in candidates {
        let mut step = candidate.step.clone();
        step.actual_loss = model.loss(&apply_replacement(seq, &step)?, alt)?;
        let better = match &best {
            None => true,
            Some(b) => {
                step.actual_loss < b.actual_loss
                    || (step.actual_loss == b.actual_loss && step.position < b.position)
            }
        };
        if better {
            best = Some(step);
        }
    }
    best.ok_or_else(|| Error::EmptyCandidates("no fill candidates".into()))
}
