//! Rating-based model risk.
//!
//! An annotator's risk is the mean of `5 − f` over the faithfulness ratings
//! `f` they gave; the model-level estimate weights each annotator's risk by
//! how many counterfactuals they rated.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::{CounterfactualTrail, Rating};

pub const MAX_SCORE: u8 = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatorRisk {
    pub annotator_id: String,
    pub risk: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskReport {
    pub model_id: Option<String>,
    pub instance_id: Option<String>,
    pub per_annotator: Vec<AnnotatorRisk>,
    /// `None` when no rating is in scope.
    pub aggregate: Option<f64>,
    pub total_count: usize,
}

impl RiskReport {
    pub fn is_empty(&self) -> bool {
        self.total_count == 0
    }
}

pub fn annotator_risk(ratings: &[&Rating]) -> Result<AnnotatorRisk> {
    let first = ratings.first().ok_or(Error::EmptyRatings)?;
    if let Some(other) = ratings.iter().find(|r| r.annotator_id != first.annotator_id) {
        return Err(Error::MixedAnnotators(
            first.annotator_id.clone(),
            other.annotator_id.clone(),
        ));
    }
    for r in ratings {
        r.validate()?;
    }
    let shortfall: u64 = ratings
        .iter()
        .map(|r| u64::from(MAX_SCORE - r.faithfulness))
        .sum();
    Ok(AnnotatorRisk {
        annotator_id: first.annotator_id.clone(),
        risk: shortfall as f64 / ratings.len() as f64,
        count: ratings.len(),
    })
}

/// Count-weighted mean of annotator risks.
pub fn aggregate_risk(per_annotator: &[AnnotatorRisk]) -> Result<f64> {
    let total: usize = per_annotator.iter().map(|a| a.count).sum();
    if per_annotator.is_empty() || total == 0 {
        return Err(Error::EmptyRatings);
    }
    let weighted: f64 = per_annotator.iter().map(|a| a.risk * a.count as f64).sum();
    Ok(weighted / total as f64)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RiskScope {
    pub model_id: Option<String>,
    pub instance_id: Option<String>,
    /// Drop ratings whose plausibility is below this value. Off by default.
    #[serde(default)]
    pub min_plausibility: Option<u8>,
}

/// Report over `ratings` whose trails match `scope`. Ratings whose trail is
/// not in `trails` count only when the scope has no model or instance filter.
pub fn risk_report(
    trails: &HashMap<String, CounterfactualTrail>,
    ratings: &[Rating],
    scope: &RiskScope,
) -> Result<RiskReport> {
    let mut by_annotator: BTreeMap<&str, Vec<&Rating>> = BTreeMap::new();
    for rating in ratings {
        let trail = trails.get(&rating.trail_id);
        let in_scope = match (trail, &scope.model_id, &scope.instance_id) {
            (_, None, None) => true,
            (None, _, _) => false,
            (Some(t), model, instance) => {
                model.as_ref().is_none_or(|m| &t.model_id == m)
                    && instance.as_ref().is_none_or(|i| &t.instance_id == i)
            }
        };
        let plausible = scope.min_plausibility.is_none_or(|min| rating.plausibility >= min);
        if in_scope && plausible {
            by_annotator.entry(&rating.annotator_id).or_default().push(rating);
        }
    }
    let per_annotator = by_annotator
        .values()
        .map(|rs| annotator_risk(rs))
        .collect::<Result<Vec<_>>>()?;
    let total_count = per_annotator.iter().map(|a| a.count).sum();
    let aggregate = if per_annotator.is_empty() {
        None
    } else {
        Some(aggregate_risk(&per_annotator)?)
    };
    Ok(RiskReport {
        model_id: scope.model_id.clone(),
        instance_id: scope.instance_id.clone(),
        per_annotator,
        aggregate,
        total_count,
    })
}
