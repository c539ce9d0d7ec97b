//! Gradient-based edit proposal.
//!
//! Positions are attributed by `∂l/∂e_i · e_i`, where `l` is the loss toward
//! the alternative label. At each chosen position the replacement minimises
//! the first-order estimate `∂l/∂e_i · (e_v − e_i)`; candidates are then
//! re-ranked by their actual loss.

use std::collections::{BTreeSet, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{dot, AssessedModel, UNKNOWN_TOKEN};
use crate::text::{apply_replacement, GenerationConfig, RationaleMask, ReplacementStep, TokenSequence};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PositionScore {
    pub position: usize,
    pub score: f64,
}

/// A proposed single-token edit.
///
/// `estimated_loss_delta` is the first-order estimate of the loss change;
/// generators without a closed-form estimate leave it empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateEdit {
    pub step: ReplacementStep,
    pub estimated_loss_delta: Option<f64>,
}

/// A partial trail explored by the beam.
#[derive(Debug, Clone, PartialEq)]
pub struct Beam {
    pub seq: TokenSequence,
    pub actual_loss: f64,
    pub edits: Vec<ReplacementStep>,
}

impl Beam {
    pub fn root(model: &dyn AssessedModel, seq: TokenSequence, alt: usize) -> Result<Self> {
        let actual_loss = model.loss(&seq, alt)?;
        Ok(Self {
            seq,
            actual_loss,
            edits: Vec::new(),
        })
    }

    fn used_positions(&self) -> BTreeSet<usize> {
        self.edits.iter().map(|e| e.position).collect()
    }

    fn tokens_placed_at(&self, position: usize) -> BTreeSet<String> {
        self.edits
            .iter()
            .filter(|e| e.position == position)
            .map(|e| e.new_token.clone())
            .collect()
    }
}

/// Vocabulary embeddings fetched once and reused for every position.
pub struct HotFlip<'a> {
    model: &'a dyn AssessedModel,
    vocabulary: &'a [String],
    embeddings: Vec<Vec<f64>>,
}

impl<'a> HotFlip<'a> {
    pub fn new(model: &'a dyn AssessedModel) -> Result<Self> {
        model.require_gradients()?;
        let embeddings = model.vocab_embeddings()?;
        if embeddings.len() != model.vocabulary().len() {
            return Err(Error::LengthMismatch(embeddings.len(), model.vocabulary().len()));
        }
        Ok(Self {
            model,
            vocabulary: model.vocabulary(),
            embeddings,
        })
    }

    fn scores_with_grad(
        &self,
        seq: &TokenSequence,
        mask: &RationaleMask,
        grads: &[Vec<f64>],
    ) -> Result<Vec<PositionScore>> {
        if mask.len() != seq.len() {
            return Err(Error::LengthMismatch(mask.len(), seq.len()));
        }
        let mut scores = mask
            .positions()
            .map(|i| {
                let e = self.model.embed(&seq.tokens()[i])?;
                Ok(PositionScore {
                    position: i,
                    score: dot(&grads[i], &e),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if scores.is_empty() {
            return Err(Error::NoEditablePositions("mask has no set bits".into()));
        }
        scores.sort_by(|a, b| {
            b.score
                .abs()
                .total_cmp(&a.score.abs())
                .then(a.position.cmp(&b.position))
        });
        Ok(scores)
    }

    /// See [`position_scores`].
    pub fn position_scores(&self, seq: &TokenSequence, mask: &RationaleMask, alt: usize) -> Result<Vec<PositionScore>> {
        let grads = self.model.grad_embedding(seq, alt)?;
        self.scores_with_grad(seq, mask, &grads)
    }

    fn best_with_grad(
        &self,
        seq: &TokenSequence,
        position: usize,
        grad: &[f64],
        forbid: &BTreeSet<String>,
    ) -> Result<CandidateEdit> {
        let incumbent = seq.get(position).ok_or(Error::PositionOutOfRange {
            position,
            len: seq.len(),
        })?;
        let incumbent_score = dot(grad, &self.model.embed(incumbent)?);
        let mut best: Option<(f64, usize)> = None;
        for (idx, token) in self.vocabulary.iter().enumerate() {
            if token == incumbent || token == UNKNOWN_TOKEN || forbid.contains(token) {
                continue;
            }
            let delta = dot(grad, &self.embeddings[idx]) - incumbent_score;
            let better = match best {
                None => true,
                Some((d, b)) => delta < d || (delta == d && token < &self.vocabulary[b]),
            };
            if better {
                best = Some((delta, idx));
            }
        }
        let (delta, idx) = best.ok_or_else(|| {
            Error::EmptyCandidates(format!("no replacement token left for position {position}"))
        })?;
        let mut step = ReplacementStep::new(position, incumbent, self.vocabulary[idx].clone());
        step.estimated_score = delta;
        Ok(CandidateEdit {
            step,
            estimated_loss_delta: Some(delta),
        })
    }

    /// See [`best_token`].
    pub fn best_token(
        &self,
        seq: &TokenSequence,
        position: usize,
        alt: usize,
        forbid: &BTreeSet<String>,
    ) -> Result<CandidateEdit> {
        let grads = self.model.grad_embedding(seq, alt)?;
        let grad = grads.get(position).ok_or(Error::PositionOutOfRange {
            position,
            len: seq.len(),
        })?;
        self.best_with_grad(seq, position, grad, forbid)
    }

    /// See [`beam_step`].
    pub fn beam_step(
        &self,
        beams: &[Beam],
        mask: &RationaleMask,
        config: &GenerationConfig,
        alt: usize,
    ) -> Result<Vec<Beam>> {
        if beams.is_empty() {
            return Err(Error::InvalidInput("beam_step needs at least one beam".into()));
        }
        let mut expanded: Vec<Beam> = Vec::new();
        for beam in beams {
            let used = beam.used_positions();
            let open = RationaleMask::from_bits(
                mask.bits()
                    .iter()
                    .enumerate()
                    .map(|(i, b)| *b && !used.contains(&i))
                    .collect(),
            );
            if open.count() == 0 {
                continue;
            }
            let grads = self.model.grad_embedding(&beam.seq, alt)?;
            let scores = self.scores_with_grad(&beam.seq, &open, &grads)?;
            for position in top_p_positions(&scores, config.top_p_positions) {
                let forbid = beam.tokens_placed_at(position);
                let candidate = match self.best_with_grad(&beam.seq, position, &grads[position], &forbid) {
                    Ok(c) => c,
                    Err(Error::EmptyCandidates(_)) => continue,
                    Err(e) => return Err(e),
                };
                let mut step = candidate.step;
                let seq = apply_replacement(&beam.seq, &step)?;
                step.actual_loss = self.model.loss(&seq, alt)?;
                let mut edits = beam.edits.clone();
                let actual_loss = step.actual_loss;
                edits.push(step);
                expanded.push(Beam {
                    seq,
                    actual_loss,
                    edits,
                });
            }
        }
        if expanded.is_empty() {
            return Err(Error::EmptyCandidates("no expandable beam".into()));
        }
        expanded.sort_by(|a, b| {
            a.actual_loss.total_cmp(&b.actual_loss).then_with(|| {
                let (ea, eb) = (a.edits.last().unwrap(), b.edits.last().unwrap());
                ea.position
                    .cmp(&eb.position)
                    .then_with(|| ea.new_token.cmp(&eb.new_token))
            })
        });
        let mut seen = HashSet::new();
        expanded.retain(|b| seen.insert(b.seq.clone()));
        expanded.truncate(config.beam_width);
        Ok(expanded)
    }
}

/// One entry per set mask bit, score `∂l/∂e_i · e_i` toward `alt`, sorted by
/// descending absolute score with ties to the lower index.
pub fn position_scores(
    seq: &TokenSequence,
    mask: &RationaleMask,
    alt: usize,
    model: &dyn AssessedModel,
) -> Result<Vec<PositionScore>> {
    HotFlip::new(model)?.position_scores(seq, mask, alt)
}

/// The first `min(p, r)` positions of an already sorted score list.
pub fn top_p_positions(scores: &[PositionScore], p: usize) -> Vec<usize> {
    scores.iter().take(p).map(|s| s.position).collect()
}

/// Token minimising the first-order loss estimate at `position`, excluding the
/// incumbent, the unknown token and `forbid`. Ties go to the
/// lexicographically smaller token.
pub fn best_token(
    seq: &TokenSequence,
    position: usize,
    alt: usize,
    model: &dyn AssessedModel,
    forbid: &BTreeSet<String>,
) -> Result<CandidateEdit> {
    HotFlip::new(model)?.best_token(seq, position, alt, forbid)
}

/// Expands every beam by top-p positions × best token, scores each candidate
/// by its actual loss toward `alt` and keeps the `beam_width` lowest distinct
/// sequences.
pub fn beam_step(
    beams: &[Beam],
    mask: &RationaleMask,
    config: &GenerationConfig,
    alt: usize,
    model: &dyn AssessedModel,
) -> Result<Vec<Beam>> {
    HotFlip::new(model)?.beam_step(beams, mask, config, alt)
}
