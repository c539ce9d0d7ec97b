//! Contracts for the assessed classifier and the fill model.
//!
//! Label ids are indices into [`AssessedModel::labels`]. Adapters that cannot
//! serve concurrent inference report it through [`Capabilities::concurrent`];
//! [`shared`] wraps them so every call is queued behind a lock.

mod filler;
mod gradcheck;
mod linear;

use std::collections::BTreeMap;
use std::sync::Arc;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::TokenSequence;

pub use filler::BigramFiller;
pub use gradcheck::{central_difference_gradient, gradcheck, GRADCHECK_EPSILON, GRADCHECK_STEP};
pub use linear::{LinearBagModel, LinearBagWeights};

/// Reserved token mapped to the unknown embedding; never proposed as an edit.
pub const UNKNOWN_TOKEN: &str = "[unk]";
/// Default mask token of fill models.
pub const MASK_TOKEN: &str = "[mask]";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Capabilities {
    /// Supports `grad_embedding` and `loss_at_embeddings`.
    pub differentiable: bool,
    /// Safe to call from several threads at once.
    pub concurrent: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub label: usize,
    pub class_scores: Vec<f64>,
}

impl Prediction {
    /// Argmax with ties broken toward the lowest label index.
    pub fn from_scores(class_scores: Vec<f64>) -> Result<Self> {
        let label = argmax(&class_scores)
            .ok_or_else(|| Error::InvalidInput("model returned no class scores".into()))?;
        Ok(Self {
            label,
            class_scores,
        })
    }
}

pub(crate) fn argmax(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, v) in values.iter().enumerate() {
        match best {
            Some(b) if values[b] >= *v => {}
            _ => best = Some(i),
        }
    }
    best
}

/// The classifier under assessment.
pub trait AssessedModel: Send + Sync {
    fn labels(&self) -> &[String];

    /// Replacement candidates. Excludes [`UNKNOWN_TOKEN`].
    fn vocabulary(&self) -> &[String];

    fn embedding_dim(&self) -> usize;

    fn capabilities(&self) -> Capabilities;

    /// Higher score means more likely.
    fn class_scores(&self, seq: &TokenSequence) -> Result<Vec<f64>>;

    /// Loss toward `target`; lower means the model favours `target` more.
    fn loss(&self, seq: &TokenSequence, target: usize) -> Result<f64>;

    /// Embedding lookup; unknown tokens get the unknown embedding.
    fn embed(&self, token: &str) -> Result<Vec<f64>>;

    /// Embeddings of every vocabulary token, in vocabulary order.
    fn vocab_embeddings(&self) -> Result<Vec<Vec<f64>>> {
        self.vocabulary().iter().map(|t| self.embed(t)).collect()
    }

    /// Gradient of `loss(seq, target)` w.r.t. each position's embedding.
    fn grad_embedding(&self, _seq: &TokenSequence, _target: usize) -> Result<Vec<Vec<f64>>> {
        Err(Error::Unsupported("gradients".into()))
    }

    /// Loss evaluated directly on a sequence of embeddings.
    fn loss_at_embeddings(&self, _embeddings: &[Vec<f64>], _target: usize) -> Result<f64> {
        Err(Error::Unsupported("embedding-level loss".into()))
    }

    fn predict(&self, seq: &TokenSequence) -> Result<Prediction> {
        Prediction::from_scores(self.class_scores(seq)?)
    }

    fn label_index(&self, label: &str) -> Result<usize> {
        self.labels()
            .iter()
            .position(|l| l == label)
            .ok_or_else(|| Error::UnknownLabel(label.to_string()))
    }

    fn label_name(&self, index: usize) -> Result<&str> {
        self.labels()
            .get(index)
            .map(String::as_str)
            .ok_or_else(|| Error::UnknownLabel(index.to_string()))
    }

    fn check_target(&self, target: usize) -> Result<()> {
        if target < self.labels().len() {
            Ok(())
        } else {
            Err(Error::UnknownLabel(target.to_string()))
        }
    }

    fn require_gradients(&self) -> Result<()> {
        if self.capabilities().differentiable {
            Ok(())
        } else {
            Err(Error::Unsupported("model is not differentiable".into()))
        }
    }
}

/// Blank-filling model used by the masked-infill generator.
pub trait FillModel: Send + Sync {
    fn vocabulary(&self) -> &[String];

    fn mask_token(&self) -> &str;

    fn concurrent(&self) -> bool {
        true
    }

    /// Scores for every vocabulary token at `mask_position`; higher is more
    /// plausible.
    fn fill_scores(
        &self,
        seq_with_mask: &TokenSequence,
        mask_position: usize,
    ) -> Result<BTreeMap<String, f64>>;
}

/// Fill scores sorted by descending score, ties in token order, capped at `k`.
pub fn ranked_fills(
    filler: &dyn FillModel,
    seq_with_mask: &TokenSequence,
    mask_position: usize,
    k: usize,
) -> Result<Vec<(String, f64)>> {
    let mut ranked: Vec<(String, f64)> = filler
        .fill_scores(seq_with_mask, mask_position)?
        .into_iter()
        .collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.truncate(k);
    Ok(ranked)
}

/// Queues every call behind one lock.
pub struct Serialized<M: ?Sized> {
    lock: Mutex<()>,
    inner: Arc<M>,
}

impl<M: ?Sized> Serialized<M> {
    pub fn new(inner: Arc<M>) -> Self {
        Self {
            lock: Mutex::new(()),
            inner,
        }
    }
}

impl<M: AssessedModel + ?Sized> AssessedModel for Serialized<M> {
    fn labels(&self) -> &[String] {
        self.inner.labels()
    }

    fn vocabulary(&self) -> &[String] {
        self.inner.vocabulary()
    }

    fn embedding_dim(&self) -> usize {
        self.inner.embedding_dim()
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities {
            concurrent: true,
            ..self.inner.capabilities()
        }
    }

    fn class_scores(&self, seq: &TokenSequence) -> Result<Vec<f64>> {
        let _guard = self.lock.lock();
        self.inner.class_scores(seq)
    }

    fn loss(&self, seq: &TokenSequence, target: usize) -> Result<f64> {
        let _guard = self.lock.lock();
        self.inner.loss(seq, target)
    }

    fn embed(&self, token: &str) -> Result<Vec<f64>> {
        let _guard = self.lock.lock();
        self.inner.embed(token)
    }

    fn vocab_embeddings(&self) -> Result<Vec<Vec<f64>>> {
        let _guard = self.lock.lock();
        self.inner.vocab_embeddings()
    }

    fn grad_embedding(&self, seq: &TokenSequence, target: usize) -> Result<Vec<Vec<f64>>> {
        let _guard = self.lock.lock();
        self.inner.grad_embedding(seq, target)
    }

    fn loss_at_embeddings(&self, embeddings: &[Vec<f64>], target: usize) -> Result<f64> {
        let _guard = self.lock.lock();
        self.inner.loss_at_embeddings(embeddings, target)
    }
}

impl<M: FillModel + ?Sized> FillModel for Serialized<M> {
    fn vocabulary(&self) -> &[String] {
        self.inner.vocabulary()
    }

    fn mask_token(&self) -> &str {
        self.inner.mask_token()
    }

    fn fill_scores(&self, seq: &TokenSequence, pos: usize) -> Result<BTreeMap<String, f64>> {
        let _guard = self.lock.lock();
        self.inner.fill_scores(seq, pos)
    }
}

/// Wraps `model` in [`Serialized`] unless it declares concurrent inference.
pub fn shared(model: Arc<dyn AssessedModel>) -> Arc<dyn AssessedModel> {
    if model.capabilities().concurrent {
        model
    } else {
        Arc::new(Serialized::new(model))
    }
}

pub fn shared_filler(filler: Arc<dyn FillModel>) -> Arc<dyn FillModel> {
    if filler.concurrent() {
        filler
    } else {
        Arc::new(Serialized::new(filler))
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
