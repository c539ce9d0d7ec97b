//! Dataset files: one JSON object per line with `id`, `text` (or `tokens`),
//! `label` and optional `rationale_spans` / `sentence_spans`.
//!
//! Converting ERASER Movies: join each document's sentences into `text` with
//! the tokenizer below, map every evidence annotation to a `[start, end)`
//! token range in `rationale_spans`, and carry the classification as `label`.

use std::collections::{BTreeSet, HashSet};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::models::AssessedModel;
use crate::rationale::{mask_from_spans, saliency_mask, DEFAULT_SALIENCY_RATIO};
use crate::text::{sentence_spans, Instance, RationaleMask, Span, TokenSequence};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetFormat {
    /// One record per line.
    #[default]
    Jsonl,
    /// A single JSON array of records.
    Json,
}

impl DatasetFormat {
    pub fn from_path(path: &std::path::Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("json") => Self::Json,
            _ => Self::Jsonl,
        }
    }
}

/// The raw record shape, for writers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tokens: Option<Vec<String>>,
    pub label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rationale_spans: Option<Vec<Span>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub dataset_id: String,
    pub content_hash: String,
    pub labels: Vec<String>,
    pub instances: Vec<Instance>,
    /// Instances whose record carried no `rationale_spans`.
    #[serde(default)]
    pub missing_rationales: BTreeSet<String>,
    pub created_at: DateTime<Utc>,
}

impl Dataset {
    pub fn instance(&self, id: &str) -> Result<&Instance> {
        self.instances.iter().find(|i| i.id == id).ok_or_else(|| Error::NotFound {
            kind: "instance",
            id: id.to_string(),
        })
    }

    pub fn has_rationale(&self, id: &str) -> bool {
        !self.missing_rationales.contains(id)
    }

    pub fn corpus(&self) -> impl Iterator<Item = &TokenSequence> {
        self.instances.iter().map(|i| &i.document)
    }

    /// The instance with its dataset rationale, or with a saliency mask from
    /// `model` when its record carried none.
    pub fn rationalized(&self, instance: &Instance, model: &dyn AssessedModel) -> Result<(Instance, MaskOrigin)> {
        if self.has_rationale(&instance.id) {
            return Ok((instance.clone(), MaskOrigin::File));
        }
        let mask = saliency_mask(model, &instance.document, DEFAULT_SALIENCY_RATIO)?;
        Ok((instance.with_mask(mask)?, MaskOrigin::Saliency))
    }
}

/// Where an instance's working mask came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskOrigin {
    File,
    Saliency,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedDataset {
    pub labels: Vec<String>,
    pub instances: Vec<Instance>,
    pub missing_rationales: BTreeSet<String>,
    pub content_hash: String,
}

impl ParsedDataset {
    pub fn into_dataset(self, dataset_id: impl Into<String>) -> Dataset {
        Dataset {
            dataset_id: dataset_id.into(),
            content_hash: self.content_hash,
            labels: self.labels,
            instances: self.instances,
            missing_rationales: self.missing_rationales,
            created_at: Utc::now(),
        }
    }
}

pub fn content_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

fn scalar_string(v: &Value) -> Option<String> {
    match v {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        _ => None,
    }
}

fn parse_spans(v: &Value, line: usize, field: &str) -> Result<Vec<Span>> {
    serde_json::from_value::<Vec<Span>>(v.clone())
        .map_err(|e| parse_err(line, format!("{field}: {e}")))
}

fn parse_record(v: &Value, line: usize) -> Result<(Instance, bool)> {
    let obj = v
        .as_object()
        .ok_or_else(|| parse_err(line, "record is not an object"))?;
    let id = obj
        .get("id")
        .and_then(scalar_string)
        .ok_or_else(|| parse_err(line, "missing or non-scalar \"id\""))?;
    let document = match (obj.get("tokens"), obj.get("text")) {
        (Some(tokens), _) => {
            let tokens: Vec<String> = serde_json::from_value(tokens.clone())
                .map_err(|e| parse_err(line, format!("tokens: {e}")))?;
            TokenSequence::new(tokens)
        }
        (None, Some(Value::String(text))) => TokenSequence::from_text(text),
        _ => return Err(parse_err(line, "missing \"text\" or \"tokens\"")),
    }
    .map_err(|e| parse_err(line, e.to_string()))?;
    let gold_label = match obj.get("label") {
        None => return Err(parse_err(line, "missing \"label\"")),
        Some(Value::Null) => None,
        Some(v) => Some(scalar_string(v).ok_or_else(|| parse_err(line, "label must be a string or number"))?),
    };
    let sentences = match obj.get("sentence_spans") {
        Some(v) => parse_spans(v, line, "sentence_spans")?,
        None => sentence_spans(document.tokens()),
    };
    let (mask, provided) = match obj.get("rationale_spans") {
        Some(Value::Null) | None => (RationaleMask::zeros(document.len()), false),
        Some(v) => {
            let spans = parse_spans(v, line, "rationale_spans")?;
            let mask = mask_from_spans(&document, &spans).map_err(|e| parse_err(line, e.to_string()))?;
            (mask, true)
        }
    };
    let instance = Instance::new(id, document, sentences, gold_label, mask)
        .map_err(|e| parse_err(line, e.to_string()))?;
    Ok((instance, provided))
}

/// Parses a dataset file body. Sentence spans are computed when absent.
pub fn parse_dataset(bytes: &[u8], format: DatasetFormat) -> Result<ParsedDataset> {
    let text = std::str::from_utf8(bytes).map_err(|e| parse_err(0, format!("not UTF-8: {e}")))?;
    let values: Vec<(usize, Value)> = match format {
        DatasetFormat::Jsonl => text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                serde_json::from_str(l)
                    .map(|v| (i + 1, v))
                    .map_err(|e| parse_err(i + 1, e.to_string()))
            })
            .collect::<Result<_>>()?,
        DatasetFormat::Json => match serde_json::from_str::<Value>(text).map_err(|e| parse_err(e.line(), e.to_string()))? {
            Value::Array(items) => items.into_iter().enumerate().map(|(i, v)| (i + 1, v)).collect(),
            _ => return Err(parse_err(1, "expected a JSON array of records")),
        },
    };
    if values.is_empty() {
        return Err(Error::InvalidInput("empty dataset".into()));
    }
    let mut seen = HashSet::new();
    let mut instances = Vec::with_capacity(values.len());
    let mut missing = BTreeSet::new();
    let mut labels = BTreeSet::new();
    for (line, v) in &values {
        let (instance, provided) = parse_record(v, *line)?;
        if !seen.insert(instance.id.clone()) {
            return Err(parse_err(*line, format!("duplicate id {:?}", instance.id)));
        }
        if !provided {
            missing.insert(instance.id.clone());
        }
        if let Some(l) = &instance.gold_label {
            labels.insert(l.clone());
        }
        instances.push(instance);
    }
    Ok(ParsedDataset {
        labels: labels.into_iter().collect(),
        instances,
        missing_rationales: missing,
        content_hash: content_hash(bytes),
    })
}
