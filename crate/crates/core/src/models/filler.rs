use std::collections::{BTreeMap, HashMap};

use super::{FillModel, MASK_TOKEN};
use crate::error::{Error, Result};
use crate::text::TokenSequence;

/// Reference fill model built from corpus counts.
///
/// With a left neighbour `p` that was seen as a left context in the corpus,
/// `score(w) = λ·(c(p,w)+1)/(c(p,·)+|V|) + (1−λ)·c(w)/N`. Otherwise the score
/// backs off to the unigram relative frequency `c(w)/N`. The right context
/// and any prompt suffix are ignored.
#[derive(Debug, Clone)]
pub struct BigramFiller {
    vocabulary: Vec<String>,
    unigram: BTreeMap<String, u64>,
    left_totals: HashMap<String, u64>,
    bigram: HashMap<(String, String), u64>,
    total: u64,
    lambda: f64,
    mask_token: String,
}

impl BigramFiller {
    pub const DEFAULT_LAMBDA: f64 = 0.8;

    pub fn from_corpus<'a, I>(corpus: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a TokenSequence>,
    {
        Self::with_lambda(corpus, Self::DEFAULT_LAMBDA)
    }

    pub fn with_lambda<'a, I>(corpus: I, lambda: f64) -> Result<Self>
    where
        I: IntoIterator<Item = &'a TokenSequence>,
    {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::InvalidInput(format!("interpolation weight {lambda} outside [0, 1]")));
        }
        let mut unigram: BTreeMap<String, u64> = BTreeMap::new();
        let mut left_totals: HashMap<String, u64> = HashMap::new();
        let mut bigram: HashMap<(String, String), u64> = HashMap::new();
        let mut total = 0;
        for seq in corpus {
            let toks = seq.tokens();
            for t in toks.iter().filter(|t| *t != MASK_TOKEN) {
                *unigram.entry(t.clone()).or_default() += 1;
                total += 1;
            }
            for pair in toks.windows(2) {
                if pair.iter().any(|t| t == MASK_TOKEN) {
                    continue;
                }
                *left_totals.entry(pair[0].clone()).or_default() += 1;
                *bigram.entry((pair[0].clone(), pair[1].clone())).or_default() += 1;
            }
        }
        if total == 0 {
            return Err(Error::InvalidInput("empty fill corpus".into()));
        }
        Ok(Self {
            vocabulary: unigram.keys().cloned().collect(),
            unigram,
            left_totals,
            bigram,
            total,
            lambda,
            mask_token: MASK_TOKEN.to_string(),
        })
    }

    pub fn unigram_count(&self, token: &str) -> u64 {
        self.unigram.get(token).copied().unwrap_or(0)
    }

    pub fn bigram_count(&self, left: &str, right: &str) -> u64 {
        self.bigram
            .get(&(left.to_string(), right.to_string()))
            .copied()
            .unwrap_or(0)
    }
}

impl FillModel for BigramFiller {
    fn vocabulary(&self) -> &[String] {
        &self.vocabulary
    }

    fn mask_token(&self) -> &str {
        &self.mask_token
    }

    fn fill_scores(&self, seq: &TokenSequence, mask_position: usize) -> Result<BTreeMap<String, f64>> {
        match seq.get(mask_position) {
            Some(t) if t == self.mask_token => {}
            _ => {
                return Err(Error::InvalidInput(format!(
                    "no mask token at position {mask_position}"
                )))
            }
        }
        let n = self.total as f64;
        let v = self.vocabulary.len() as f64;
        let context = mask_position
            .checked_sub(1)
            .and_then(|p| seq.get(p))
            .and_then(|p| self.left_totals.get(p).map(|c| (p, *c as f64)));
        Ok(self
            .unigram
            .iter()
            .map(|(w, c)| {
                let uni = *c as f64 / n;
                let score = match context {
                    Some((prev, left_total)) => {
                        let pair = self.bigram_count(prev, w) as f64;
                        self.lambda * (pair + 1.0) / (left_total + v) + (1.0 - self.lambda) * uni
                    }
                    None => uni,
                };
                (w.clone(), score)
            })
            .collect())
    }
}
