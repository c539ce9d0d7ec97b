//! The replace-until-flip loop that turns an instance sentence into a
//! [`CounterfactualTrail`].

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::hotflip::{Beam, HotFlip};
use crate::mlm::{fill_candidates, select_step_mlm, FillRequest, PromptTemplate};
use crate::models::{argmax, AssessedModel, FillModel};
use crate::rationale::rationale_sentences;
use crate::text::{
    apply_replacement, CounterfactualTrail, GenerationConfig, Instance, Method, PredictionScope,
    RationaleMask, ReplacementStep, Span, TokenSequence,
};

/// The highest-scoring label other than the predicted one; ties go to the
/// lower index.
pub fn alternative_label(model: &dyn AssessedModel, seq: &TokenSequence) -> Result<usize> {
    let prediction = model.predict(seq)?;
    alternative_from_scores(&prediction.class_scores, prediction.label)
}

pub fn alternative_from_scores(scores: &[f64], predicted: usize) -> Result<usize> {
    if scores.len() < 2 {
        return Err(Error::InvalidInput("need at least two labels".into()));
    }
    let others: Vec<f64> = scores
        .iter()
        .enumerate()
        .map(|(i, s)| if i == predicted { f64::NEG_INFINITY } else { *s })
        .collect();
    // With -inf for the prediction, argmax lands on it only if every rival is
    // -inf too; pick the first rival then.
    match argmax(&others) {
        Some(i) if i != predicted => Ok(i),
        _ => Ok(usize::from(predicted == 0)),
    }
}

/// Caller-supplied identity recorded on each trail.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrailMeta {
    pub model_id: String,
    pub session_id: Option<String>,
    pub seed: Option<u64>,
}

/// Model, optional filler and prompt template for one generation run.
pub struct TrailEngine<'a> {
    pub model: &'a dyn AssessedModel,
    pub filler: Option<&'a dyn FillModel>,
    pub template: &'a PromptTemplate,
}

struct Workspace {
    span: Span,
    offset: usize,
    original: TokenSequence,
    editable: RationaleMask,
}

impl<'a> TrailEngine<'a> {
    pub fn new(model: &'a dyn AssessedModel, filler: Option<&'a dyn FillModel>, template: &'a PromptTemplate) -> Self {
        Self {
            model,
            filler,
            template,
        }
    }

    fn workspace(instance: &Instance, sentence_index: usize, scope: PredictionScope) -> Result<Workspace> {
        instance.validate()?;
        let span = instance.sentence(sentence_index)?;
        let (offset, original, editable) = match scope {
            PredictionScope::Sentence => (
                span.start(),
                instance.document.slice(span)?,
                instance.mask.window(span),
            ),
            PredictionScope::Document => (0, instance.document.clone(), instance.mask.restrict(span)),
        };
        if editable.count() == 0 {
            return Err(Error::NoEditablePositions(format!(
                "sentence {sentence_index} of {} has no rationale tokens",
                instance.id
            )));
        }
        Ok(Workspace {
            span,
            offset,
            original,
            editable,
        })
    }

    /// Applies single-token edits inside the chosen sentence until the
    /// prediction differs from the original or `max_steps` edits are made.
    /// Positions are never revisited, so the loop also ends once no editable
    /// position or candidate token is left.
    pub fn generate_trail(
        &self,
        instance: &Instance,
        sentence_index: usize,
        config: &GenerationConfig,
        meta: &TrailMeta,
    ) -> Result<CounterfactualTrail> {
        config.validate()?;
        let ws = Self::workspace(instance, sentence_index, config.scope)?;
        let hotflip = match config.method {
            Method::Hotflip => Some(HotFlip::new(self.model)?),
            Method::Mlm => {
                if self.filler.is_none() {
                    return Err(Error::Unsupported("masked-infill generation needs a fill model".into()));
                }
                None
            }
        };

        let original_prediction = self.model.predict(&ws.original)?;
        let alt = alternative_from_scores(&original_prediction.class_scores, original_prediction.label)?;
        let alt_name = self.model.label_name(alt)?.to_string();

        let mut current = ws.original.clone();
        let mut steps: Vec<ReplacementStep> = Vec::new();
        let mut final_label = original_prediction.label;
        while steps.len() < config.max_steps {
            let used: BTreeSet<usize> = steps.iter().map(|s| s.position).collect();
            let open = RationaleMask::from_bits(
                ws.editable
                    .bits()
                    .iter()
                    .enumerate()
                    .map(|(i, b)| *b && !used.contains(&i))
                    .collect(),
            );
            if open.count() == 0 {
                break;
            }
            let proposal = match &hotflip {
                Some(hf) => self.hotflip_step(hf, &current, &open, &steps, config, alt),
                None => self.mlm_step(&current, &open, &steps, config, alt, &alt_name),
            };
            let step = match proposal {
                Ok(step) => step,
                Err(Error::EmptyCandidates(_)) => break,
                Err(e) => return Err(e),
            };
            current = apply_replacement(&current, &step)?;
            steps.push(step);
            final_label = self.model.predict(&current)?.label;
            if final_label != original_prediction.label {
                break;
            }
        }
        if steps.is_empty() {
            return Err(Error::EmptyCandidates(format!(
                "no admissible edit in sentence {sentence_index} of {}",
                instance.id
            )));
        }

        for step in &mut steps {
            step.position += ws.offset;
        }
        let original_tokens = instance.document.slice(ws.span)?.tokens().to_vec();
        let mut trail = CounterfactualTrail {
            trail_id: String::new(),
            instance_id: instance.id.clone(),
            sentence_index,
            method: config.method,
            original_prediction: self.model.label_name(original_prediction.label)?.to_string(),
            steps,
            final_prediction: self.model.label_name(final_label)?.to_string(),
            flipped: final_label != original_prediction.label,
            config_snapshot: config.clone(),
            model_id: meta.model_id.clone(),
            session_id: meta.session_id.clone(),
            sentence_span: ws.span,
            original_tokens,
            seed: meta.seed,
        };
        trail.trail_id = trail_id_for(&trail, &instance.mask);
        Ok(trail)
    }

    fn hotflip_step(
        &self,
        hf: &HotFlip<'_>,
        current: &TokenSequence,
        open: &RationaleMask,
        steps: &[ReplacementStep],
        config: &GenerationConfig,
        alt: usize,
    ) -> Result<ReplacementStep> {
        // Fresh beam per committed edit; history only feeds the forbid sets.
        let root = Beam {
            seq: current.clone(),
            actual_loss: self.model.loss(current, alt)?,
            edits: steps.to_vec(),
        };
        let ranked = hf.beam_step(&[root], open, config, alt)?;
        Ok(ranked[0].edits.last().expect("expanded beam has an edit").clone())
    }

    fn mlm_step(
        &self,
        current: &TokenSequence,
        open: &RationaleMask,
        steps: &[ReplacementStep],
        config: &GenerationConfig,
        alt: usize,
        alt_name: &str,
    ) -> Result<ReplacementStep> {
        let filler = self.filler.expect("checked before the loop");
        let mut used: BTreeMap<usize, BTreeSet<String>> = BTreeMap::new();
        for s in steps {
            used.entry(s.position).or_default().insert(s.new_token.clone());
        }
        let request = FillRequest {
            filler,
            template: self.template,
            alt_label: alt_name,
            fill_top_k: config.fill_top_k,
        };
        let candidates = fill_candidates(current, open, &request, &used)?;
        select_step_mlm(current, &candidates, alt, self.model)
    }
}

/// Deterministic id over everything that determines the trail's content.
fn trail_id_for(trail: &CounterfactualTrail, mask: &RationaleMask) -> String {
    let mut h = Sha256::new();
    let key = serde_json::json!({
        "model": trail.model_id,
        "session": trail.session_id,
        "instance": trail.instance_id,
        "sentence": trail.sentence_index,
        "config": trail.config_snapshot,
        "mask": mask,
        "seed": trail.seed,
    });
    h.update(key.to_string().as_bytes());
    let digest = hex::encode(h.finalize());
    format!("t-{}", &digest[..16])
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BatchSummary {
    pub n: usize,
    pub flipped: usize,
    pub flip_rate: Option<f64>,
    pub mean_steps: Option<f64>,
}

impl BatchSummary {
    pub fn of(trails: &[CounterfactualTrail]) -> Self {
        let n = trails.len();
        let flipped = trails.iter().filter(|t| t.flipped).count();
        let steps: usize = trails.iter().map(|t| t.steps.len()).sum();
        Self {
            n,
            flipped,
            flip_rate: (n > 0).then(|| flipped as f64 / n as f64),
            mean_steps: (n > 0).then(|| steps as f64 / n as f64),
        }
    }
}

impl std::fmt::Display for BatchSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match (self.flip_rate, self.mean_steps) {
            (Some(rate), Some(steps)) => write!(
                f,
                "n={} flipped={} flip_rate={rate:.4} mean_steps={steps:.4}",
                self.n, self.flipped
            ),
            _ => write!(f, "n={} flipped=0 flip_rate=NA mean_steps=NA", self.n),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct BatchResult {
    pub trails: Vec<CounterfactualTrail>,
    /// `(instance id, message)` for instances that produced no trail.
    pub errors: Vec<(String, String)>,
}

impl BatchResult {
    pub fn summary(&self) -> BatchSummary {
        BatchSummary::of(&self.trails)
    }
}

/// Seeded `(instance, sentence)` plan: instances in shuffled order, each
/// with one randomly chosen rationale sentence. Instances without rationale
/// sentences are listed with `None`.
pub fn plan_batch(instances: &[Instance], seed: u64) -> Vec<(usize, Option<usize>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..instances.len()).collect();
    order.shuffle(&mut rng);
    order
        .into_iter()
        .map(|i| {
            let sentences = rationale_sentences(&instances[i]);
            let pick = (!sentences.is_empty()).then(|| sentences[rng.random_range(0..sentences.len())]);
            (i, pick)
        })
        .collect()
}

/// Up to `limit` trails following [`plan_batch`]. Per-instance failures are
/// collected, not fatal. Trails are generated in parallel but returned in
/// plan order.
pub fn generate_batch(
    engine: &TrailEngine<'_>,
    instances: &[Instance],
    config: &GenerationConfig,
    model_id: &str,
    limit: usize,
    seed: u64,
) -> BatchResult {
    let mut result = BatchResult::default();
    let plan = plan_batch(instances, seed);
    let mut cursor = 0;
    while result.trails.len() < limit && cursor < plan.len() {
        let want = limit - result.trails.len();
        let chunk = &plan[cursor..(cursor + want).min(plan.len())];
        cursor += chunk.len();
        let outcomes: Vec<(String, Result<CounterfactualTrail>)> = chunk
            .par_iter()
            .map(|(i, sentence)| {
                let instance = &instances[*i];
                let outcome = match sentence {
                    Some(s) => engine.generate_trail(
                        instance,
                        *s,
                        config,
                        &TrailMeta {
                            model_id: model_id.to_string(),
                            session_id: None,
                            seed: Some(seed),
                        },
                    ),
                    None => Err(Error::NoEditablePositions("no rationale sentence".into())),
                };
                (instance.id.clone(), outcome)
            })
            .collect();
        for (id, outcome) in outcomes {
            match outcome {
                Ok(trail) => result.trails.push(trail),
                Err(e) => result.errors.push((id, e.to_string())),
            }
        }
    }
    result
}
