//! Rationale masks: which tokens a counterfactual may touch.
//!
//! Masks come from dataset evidence spans, from a gradient×embedding
//! saliency baseline, or from an annotator's custom selection.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{dot, AssessedModel};
use crate::text::{Instance, RationaleMask, Span, TokenSequence};

pub const DEFAULT_SALIENCY_RATIO: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum RationaleSource {
    File { spans: Vec<Span> },
    Saliency { ratio: f64 },
    Custom { positions: BTreeSet<usize> },
}

impl RationaleSource {
    pub fn build(&self, model: Option<&dyn AssessedModel>, doc: &TokenSequence) -> Result<RationaleMask> {
        match self {
            Self::File { spans } => mask_from_spans(doc, spans),
            Self::Saliency { ratio } => {
                let model = model.ok_or_else(|| Error::Unsupported("saliency needs a model".into()))?;
                saliency_mask(model, doc, *ratio)
            }
            Self::Custom { positions } => {
                merge_custom(&RationaleMask::zeros(doc.len()), positions)
            }
        }
    }
}

/// Bit `i` is set iff some span covers `i`.
pub fn mask_from_spans(doc: &TokenSequence, spans: &[Span]) -> Result<RationaleMask> {
    let mut bits = vec![false; doc.len()];
    for span in spans {
        if span.start() > span.end() || span.end() > doc.len() {
            return Err(Error::InvalidInput(format!(
                "rationale span {span} outside document of length {}",
                doc.len()
            )));
        }
        bits[span.start()..span.end()].iter_mut().for_each(|b| *b = true);
    }
    Ok(RationaleMask::from_bits(bits))
}

/// Sets the `⌈ratio·l⌉` positions with the largest
/// `|grad_i · e_i|` for the loss toward the predicted label. Ties go to the
/// lower index.
pub fn saliency_mask(model: &dyn AssessedModel, doc: &TokenSequence, ratio: f64) -> Result<RationaleMask> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::InvalidInput(format!("saliency ratio {ratio} outside (0, 1]")));
    }
    model.require_gradients()?;
    let predicted = model.predict(doc)?.label;
    let grads = model.grad_embedding(doc, predicted)?;
    let mut scored = doc
        .tokens()
        .iter()
        .zip(&grads)
        .enumerate()
        .map(|(i, (t, g))| Ok((i, dot(g, &model.embed(t)?).abs())))
        .collect::<Result<Vec<_>>>()?;
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let keep = ((ratio * doc.len() as f64).ceil() as usize).clamp(1, doc.len());
    RationaleMask::from_positions(doc.len(), scored.into_iter().take(keep).map(|(i, _)| i))
}

/// The custom selection replaces `base` entirely.
pub fn merge_custom(base: &RationaleMask, selected: &BTreeSet<usize>) -> Result<RationaleMask> {
    if selected.is_empty() {
        return Err(Error::NoEditablePositions("custom mask selects nothing".into()));
    }
    RationaleMask::from_positions(base.len(), selected.iter().copied())
}

/// Sentences containing at least one rationale token, in document order.
pub fn rationale_sentences(instance: &Instance) -> Vec<usize> {
    instance
        .sentence_spans
        .iter()
        .enumerate()
        .filter(|(_, span)| (span.start()..span.end()).any(|i| instance.mask.get(i)))
        .map(|(i, _)| i)
        .collect()
}
