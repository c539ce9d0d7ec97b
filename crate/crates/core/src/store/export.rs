//! Rated counterfactuals as a training dataset.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::text::{CounterfactualTrail, Rating};

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Edit {
    pub position: usize,
    pub old_token: String,
    pub new_token: String,
}

/// One `(trail, rating)` pair.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ExportRecord {
    pub trail_id: String,
    pub original: String,
    pub counterfactual: String,
    pub edits: Vec<Edit>,
    pub orig_pred: String,
    pub final_pred: String,
    pub plausibility: u8,
    pub meaningfulness: u8,
    pub faithfulness: u8,
    pub annotator_id: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExportFilter {
    #[serde(default)]
    pub min_plausibility: Option<u8>,
    #[serde(default)]
    pub min_meaningfulness: Option<u8>,
    #[serde(default)]
    pub flipped_only: bool,
}

impl ExportFilter {
    fn admits(&self, trail: &CounterfactualTrail, rating: &Rating) -> bool {
        self.min_plausibility.is_none_or(|m| rating.plausibility >= m)
            && self.min_meaningfulness.is_none_or(|m| rating.meaningfulness >= m)
            && (!self.flipped_only || trail.flipped)
    }
}

pub fn export_record(trail: &CounterfactualTrail, rating: &Rating) -> Result<ExportRecord> {
    Ok(ExportRecord {
        trail_id: trail.trail_id.clone(),
        original: trail.original_sentence()?.text(),
        counterfactual: trail.counterfactual_sentence()?.text(),
        edits: trail
            .steps
            .iter()
            .map(|s| Edit {
                position: s.position,
                old_token: s.old_token.clone(),
                new_token: s.new_token.clone(),
            })
            .collect(),
        orig_pred: trail.original_prediction.clone(),
        final_pred: trail.final_prediction.clone(),
        plausibility: rating.plausibility,
        meaningfulness: rating.meaningfulness,
        faithfulness: rating.faithfulness,
        annotator_id: rating.annotator_id.clone(),
    })
}

/// Records in rating order. Ratings whose trail is unknown are skipped.
pub fn export_records(
    trails: &HashMap<String, CounterfactualTrail>,
    ratings: &[Rating],
    filter: &ExportFilter,
) -> Result<Vec<ExportRecord>> {
    ratings
        .iter()
        .filter_map(|r| trails.get(&r.trail_id).map(|t| (t, r)))
        .filter(|(t, r)| filter.admits(t, r))
        .map(|(t, r)| export_record(t, r))
        .collect()
}
