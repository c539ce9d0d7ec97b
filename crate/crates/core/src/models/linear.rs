use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{argmax, dot, AssessedModel, Capabilities, UNKNOWN_TOKEN};
use crate::error::{Error, Result};
use crate::text::TokenSequence;

/// On-disk weight format of [`LinearBagModel`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearBagWeights {
    pub labels: Vec<String>,
    pub vocabulary: Vec<String>,
    /// One row per vocabulary token.
    pub embeddings: Vec<Vec<f64>>,
    pub unk_embedding: Vec<f64>,
    /// One row per label.
    pub class_weights: Vec<Vec<f64>>,
}

/// Mean-pooled bag of embeddings followed by a linear layer.
///
/// `logit(k) = w_k · mean(e_t)`. The loss toward a target is the margin
/// `max_{k≠target} logit(k) − logit(target)`; with two labels it is exactly
/// linear in each token embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "LinearBagWeights", into = "LinearBagWeights")]
pub struct LinearBagModel {
    weights: LinearBagWeights,
    index: HashMap<String, usize>,
}

impl TryFrom<LinearBagWeights> for LinearBagModel {
    type Error = Error;

    fn try_from(weights: LinearBagWeights) -> Result<Self> {
        Self::new(weights)
    }
}

impl From<LinearBagModel> for LinearBagWeights {
    fn from(model: LinearBagModel) -> Self {
        model.weights
    }
}

impl LinearBagModel {
    pub fn new(weights: LinearBagWeights) -> Result<Self> {
        let d = weights.unk_embedding.len();
        if weights.labels.len() < 2 {
            return Err(Error::InvalidInput("need at least two labels".into()));
        }
        if weights.vocabulary.is_empty() {
            return Err(Error::InvalidInput("empty vocabulary".into()));
        }
        if d == 0 {
            return Err(Error::InvalidInput("embedding dimension must be positive".into()));
        }
        if weights.embeddings.len() != weights.vocabulary.len() {
            return Err(Error::LengthMismatch(
                weights.embeddings.len(),
                weights.vocabulary.len(),
            ));
        }
        if weights.class_weights.len() != weights.labels.len() {
            return Err(Error::LengthMismatch(
                weights.class_weights.len(),
                weights.labels.len(),
            ));
        }
        if let Some(row) = weights
            .embeddings
            .iter()
            .chain(&weights.class_weights)
            .find(|r| r.len() != d)
        {
            return Err(Error::LengthMismatch(row.len(), d));
        }
        let mut index = HashMap::with_capacity(weights.vocabulary.len());
        for (i, t) in weights.vocabulary.iter().enumerate() {
            if t.is_empty() || t == UNKNOWN_TOKEN {
                return Err(Error::InvalidInput(format!("reserved or empty vocabulary entry {t:?}")));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::InvalidInput(format!("duplicate vocabulary entry {t:?}")));
            }
        }
        Ok(Self { weights, index })
    }

    /// All weights zero: every label scores 0.
    pub fn zeros(labels: Vec<String>, vocabulary: Vec<String>, dim: usize) -> Result<Self> {
        let n = vocabulary.len();
        let k = labels.len();
        Self::new(LinearBagWeights {
            labels,
            vocabulary,
            embeddings: vec![vec![0.0; dim]; n],
            unk_embedding: vec![0.0; dim],
            class_weights: vec![vec![0.0; dim]; k],
        })
    }

    /// Uniform(-1, 1) embeddings and class weights.
    pub fn random<R: Rng>(
        labels: Vec<String>,
        vocabulary: Vec<String>,
        dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let row = |rng: &mut R| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
        let embeddings = vocabulary.iter().map(|_| row(rng)).collect();
        let unk_embedding = row(rng);
        let class_weights = labels.iter().map(|_| row(rng)).collect();
        Self::new(LinearBagWeights {
            labels,
            vocabulary,
            embeddings,
            unk_embedding,
            class_weights,
        })
    }

    /// Fits class weights with the multiclass perceptron over random
    /// embeddings. Stops after the first epoch without mistakes or after
    /// `max_epochs`; returns the model and its final training accuracy.
    pub fn fit(
        labels: Vec<String>,
        docs: &[(TokenSequence, usize)],
        dim: usize,
        seed: u64,
        max_epochs: usize,
    ) -> Result<(Self, f64)> {
        if docs.is_empty() {
            return Err(Error::InvalidInput("no training documents".into()));
        }
        let mut vocabulary: Vec<String> = docs
            .iter()
            .flat_map(|(s, _)| s.tokens().iter().cloned())
            .filter(|t| t != UNKNOWN_TOKEN)
            .collect();
        vocabulary.sort();
        vocabulary.dedup();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut model = Self::random(labels, vocabulary, dim, &mut rng)?;
        for row in &mut model.weights.class_weights {
            row.iter_mut().for_each(|w| *w = 0.0);
        }
        for (_, y) in docs {
            model.check_target(*y)?;
        }
        let features: Vec<Vec<f64>> = docs.iter().map(|(s, _)| model.pooled(s)).collect();
        for _ in 0..max_epochs {
            let mut mistakes = 0;
            for (x, (_, y)) in features.iter().zip(docs) {
                let logits = model.logits_from_pooled(x);
                let pred = argmax(&logits).expect("at least two labels");
                // Strict margin so ties never count as correct.
                let wrong = pred != *y
                    || logits
                        .iter()
                        .enumerate()
                        .any(|(k, l)| k != *y && *l >= logits[*y]);
                if wrong {
                    mistakes += 1;
                    let rival = (0..logits.len())
                        .filter(|k| k != y)
                        .max_by(|a, b| logits[*a].total_cmp(&logits[*b]).then(b.cmp(a)))
                        .expect("at least two labels");
                    for (j, v) in x.iter().enumerate() {
                        model.weights.class_weights[*y][j] += v;
                        model.weights.class_weights[rival][j] -= v;
                    }
                }
            }
            if mistakes == 0 {
                break;
            }
        }
        let correct = docs
            .iter()
            .filter(|(s, y)| model.predict(s).map(|p| p.label == *y).unwrap_or(false))
            .count();
        let acc = correct as f64 / docs.len() as f64;
        Ok((model, acc))
    }

    pub fn weights(&self) -> &LinearBagWeights {
        &self.weights
    }

    fn embedding_row(&self, token: &str) -> &[f64] {
        match self.index.get(token) {
            Some(i) => &self.weights.embeddings[*i],
            None => &self.weights.unk_embedding,
        }
    }

    fn pooled(&self, seq: &TokenSequence) -> Vec<f64> {
        let rows: Vec<&[f64]> = seq.tokens().iter().map(|t| self.embedding_row(t)).collect();
        mean_rows(&rows, self.embedding_dim())
    }

    fn logits_from_pooled(&self, pooled: &[f64]) -> Vec<f64> {
        self.weights
            .class_weights
            .iter()
            .map(|w| dot(w, pooled))
            .collect()
    }

    /// Index of the highest-scoring label other than `target`.
    fn rival(logits: &[f64], target: usize) -> usize {
        let mut best: Option<usize> = None;
        for k in (0..logits.len()).filter(|k| *k != target) {
            match best {
                Some(b) if logits[b] >= logits[k] => {}
                _ => best = Some(k),
            }
        }
        best.expect("at least two labels")
    }

    fn margin(logits: &[f64], target: usize) -> f64 {
        logits[Self::rival(logits, target)] - logits[target]
    }
}

fn mean_rows(rows: &[&[f64]], dim: usize) -> Vec<f64> {
    let mut acc = vec![0.0; dim];
    for row in rows {
        for (a, v) in acc.iter_mut().zip(row.iter()) {
            *a += v;
        }
    }
    let n = rows.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    acc
}

impl AssessedModel for LinearBagModel {
    fn labels(&self) -> &[String] {
        &self.weights.labels
    }

    fn vocabulary(&self) -> &[String] {
        &self.weights.vocabulary
    }

    fn embedding_dim(&self) -> usize {
        self.weights.unk_embedding.len()
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities {
            differentiable: true,
            concurrent: true,
        }
    }

    fn class_scores(&self, seq: &TokenSequence) -> Result<Vec<f64>> {
        Ok(self.logits_from_pooled(&self.pooled(seq)))
    }

    fn loss(&self, seq: &TokenSequence, target: usize) -> Result<f64> {
        self.check_target(target)?;
        Ok(Self::margin(&self.class_scores(seq)?, target))
    }

    fn embed(&self, token: &str) -> Result<Vec<f64>> {
        Ok(self.embedding_row(token).to_vec())
    }

    fn vocab_embeddings(&self) -> Result<Vec<Vec<f64>>> {
        Ok(self.weights.embeddings.clone())
    }

    fn grad_embedding(&self, seq: &TokenSequence, target: usize) -> Result<Vec<Vec<f64>>> {
        self.check_target(target)?;
        let logits = self.class_scores(seq)?;
        let rival = Self::rival(&logits, target);
        let l = seq.len() as f64;
        let g: Vec<f64> = self.weights.class_weights[rival]
            .iter()
            .zip(&self.weights.class_weights[target])
            .map(|(a, b)| (a - b) / l)
            .collect();
        Ok(vec![g; seq.len()])
    }

    fn loss_at_embeddings(&self, embeddings: &[Vec<f64>], target: usize) -> Result<f64> {
        self.check_target(target)?;
        if embeddings.is_empty() {
            return Err(Error::InvalidInput("no embeddings".into()));
        }
        if let Some(row) = embeddings.iter().find(|r| r.len() != self.embedding_dim()) {
            return Err(Error::LengthMismatch(row.len(), self.embedding_dim()));
        }
        let rows: Vec<&[f64]> = embeddings.iter().map(Vec::as_slice).collect();
        let pooled = mean_rows(&rows, self.embedding_dim());
        Ok(Self::margin(&self.logits_from_pooled(&pooled), target))
    }
}
