//! Model descriptors and the adapters built from them.
//!
//! Descriptors are JSON objects with a `kind`:
//!
//! * `"ref:linear"` with inline `weights` or a `path` to a weight file. The
//!   stored descriptor always carries the weights inline.
//! * `"ref:filler"` with a `dataset_id` and optional `lambda`; a bigram
//!   filler over that dataset's corpus.
//! * `"ext:<url>"`, a remote adapter probed at registration.

use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use cfassay_core::models::{shared, shared_filler, AssessedModel, BigramFiller, FillModel, LinearBagModel, LinearBagWeights};
use cfassay_core::store::Store;
use cfassay_core::Error;

use crate::error::ApiError;
use crate::ext;

pub const REF_LINEAR: &str = "ref:linear";
pub const REF_FILLER: &str = "ref:filler";
pub const EXT_PREFIX: &str = "ext:";

/// Request body of `POST /models`.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelUpload {
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<LinearBagWeights>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
}

/// What a registered id can be used for.
#[derive(Clone, Default)]
pub struct Adapters {
    pub model: Option<Arc<dyn AssessedModel>>,
    pub filler: Option<Arc<dyn FillModel>>,
}

impl Adapters {
    pub fn summary(&self) -> Value {
        serde_json::json!({
            "classifier": self.model.as_ref().map(|m| serde_json::json!({
                "labels": m.labels(),
                "vocabulary_size": m.vocabulary().len(),
                "capabilities": m.capabilities(),
            })),
            "filler": self.filler.is_some(),
        })
    }
}

fn unknown_kind(kind: &str) -> ApiError {
    ApiError::new(
        axum::http::StatusCode::BAD_REQUEST,
        "unknown_adapter_kind",
        format!("unknown adapter kind {kind:?}; expected {REF_LINEAR}, {REF_FILLER} or {EXT_PREFIX}<url>"),
    )
}

/// Builds the adapters for `upload` and the descriptor to persist.
pub fn build(upload: &ModelUpload, store: &Store, timeout: Duration) -> Result<(Adapters, Value), ApiError> {
    let kind = upload.kind.as_str();
    let stray = |field: &str, present: bool| {
        if present {
            Err(ApiError::bad_request(format!("{field} is not a parameter of {kind}")))
        } else {
            Ok(())
        }
    };
    if kind == REF_LINEAR {
        stray("dataset_id", upload.dataset_id.is_some())?;
        stray("lambda", upload.lambda.is_some())?;
        let weights = match (&upload.weights, &upload.path) {
            (Some(w), None) => w.clone(),
            (None, Some(path)) => {
                let bytes = std::fs::read(path).map_err(|e| ApiError::bad_request(format!("{}: {e}", path.display())))?;
                serde_json::from_slice(&bytes).map_err(|e| ApiError::bad_request(format!("{}: {e}", path.display())))?
            }
            _ => return Err(ApiError::bad_request("ref:linear needs exactly one of weights or path")),
        };
        let model = LinearBagModel::new(weights.clone())?;
        let descriptor = serde_json::json!({ "kind": REF_LINEAR, "weights": weights });
        return Ok((
            Adapters {
                model: Some(Arc::new(model)),
                filler: None,
            },
            descriptor,
        ));
    }
    if kind == REF_FILLER {
        stray("weights", upload.weights.is_some())?;
        stray("path", upload.path.is_some())?;
        let dataset_id = upload
            .dataset_id
            .as_deref()
            .ok_or_else(|| ApiError::bad_request("ref:filler needs a dataset_id"))?;
        let dataset = store.dataset(dataset_id)?;
        let lambda = upload.lambda.unwrap_or(BigramFiller::DEFAULT_LAMBDA);
        let filler = BigramFiller::with_lambda(dataset.corpus(), lambda)?;
        let mut descriptor = serde_json::json!({ "kind": REF_FILLER, "dataset_id": dataset_id });
        if let Some(l) = upload.lambda {
            descriptor["lambda"] = serde_json::json!(l);
        }
        return Ok((
            Adapters {
                model: None,
                filler: Some(Arc::new(filler)),
            },
            descriptor,
        ));
    }
    if let Some(url) = kind.strip_prefix(EXT_PREFIX) {
        for (field, present) in [
            ("weights", upload.weights.is_some()),
            ("path", upload.path.is_some()),
            ("dataset_id", upload.dataset_id.is_some()),
            ("lambda", upload.lambda.is_some()),
        ] {
            stray(field, present)?;
        }
        let (model, filler) = ext::connect(url, timeout).map_err(|e| match e {
            Error::Remote(m) => ApiError::new(axum::http::StatusCode::BAD_GATEWAY, "health_probe_failed", m),
            other => other.into(),
        })?;
        if model.is_none() && filler.is_none() {
            return Err(ApiError::capability(format!("{url} offers neither a classifier nor a fill model")));
        }
        let adapters = Adapters {
            model: model.map(|m| shared(Arc::new(m))),
            filler: filler.map(|f| shared_filler(Arc::new(f))),
        };
        return Ok((adapters, serde_json::json!({ "kind": kind })));
    }
    Err(unknown_kind(kind))
}

/// Rebuilds adapters from a persisted descriptor.
pub fn rebuild(descriptor: &Value, store: &Store, timeout: Duration) -> Result<Adapters, ApiError> {
    let upload: ModelUpload =
        serde_json::from_value(descriptor.clone()).map_err(|e| ApiError::internal(format!("stored descriptor: {e}")))?;
    build(&upload, store, timeout).map(|(a, _)| a)
}
