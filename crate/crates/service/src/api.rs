//! The annotation HTTP API.

use std::collections::{BTreeSet, HashMap};
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode, Uri};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use parking_lot::RwLock;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use cfassay_core::engine::{TrailEngine, TrailMeta};
use cfassay_core::mlm::PromptTemplate;
use cfassay_core::models::{AssessedModel, FillModel};
use cfassay_core::rationale::{merge_custom, rationale_sentences};
use cfassay_core::risk::RiskScope;
use cfassay_core::store::{to_jsonl, DatasetFormat, ExportFilter, MaskOrigin, NewSession, Session, Store};
use cfassay_core::text::{CounterfactualTrail, GenerationConfig, Instance, Method, Rating, Span};

use crate::error::ApiError;
use crate::ext::DEFAULT_REMOTE_TIMEOUT;
use crate::registry::{self, Adapters, ModelUpload};

pub const DEFAULT_GENERATION_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    /// `None` keeps everything in memory.
    pub data_dir: Option<PathBuf>,
    pub generation: GenerationConfig,
    pub template: PromptTemplate,
    pub generation_timeout: Duration,
    pub remote_timeout: Duration,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            data_dir: None,
            generation: GenerationConfig::default(),
            template: PromptTemplate::default(),
            generation_timeout: DEFAULT_GENERATION_TIMEOUT,
            remote_timeout: DEFAULT_REMOTE_TIMEOUT,
        }
    }
}

pub struct AppState {
    store: Store,
    adapters: RwLock<HashMap<String, Adapters>>,
    config: ServiceConfig,
}

impl AppState {
    /// Opens the store and rebuilds every registered adapter. Adapters that
    /// fail to rebuild stay registered but unavailable.
    pub fn open(config: ServiceConfig) -> cfassay_core::Result<Self> {
        let store = match &config.data_dir {
            Some(dir) => Store::open(dir)?,
            None => Store::in_memory(),
        };
        let mut adapters = HashMap::new();
        for record in store.models() {
            match registry::rebuild(&record.descriptor, &store, config.remote_timeout) {
                Ok(a) => {
                    adapters.insert(record.model_id, a);
                }
                Err(e) => log::warn!("model {} is unavailable: {e}", record.model_id),
            }
        }
        Ok(Self {
            store,
            adapters: RwLock::new(adapters),
            config,
        })
    }

    pub fn store(&self) -> &Store {
        &self.store
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    fn adapters(&self, id: &str) -> Result<Adapters, ApiError> {
        if let Some(a) = self.adapters.read().get(id) {
            return Ok(a.clone());
        }
        self.store.model(id)?;
        Err(ApiError::new(
            StatusCode::SERVICE_UNAVAILABLE,
            "model_unavailable",
            format!("model {id} is registered but its adapter could not be loaded"),
        ))
    }

    fn classifier(&self, id: &str) -> Result<Arc<dyn AssessedModel>, ApiError> {
        self.adapters(id)?
            .model
            .ok_or_else(|| ApiError::capability(format!("model {id} is not a classifier")))
    }

    /// The session's fill model: its `filler_id`, else the classifier's own.
    fn filler_for(&self, session: &Session) -> Result<Option<Arc<dyn FillModel>>, ApiError> {
        match &session.filler_id {
            Some(id) => Ok(Some(self.adapters(id)?.filler.ok_or_else(|| {
                ApiError::capability(format!("model {id} is not a fill model"))
            })?)),
            None => Ok(self.adapters(&session.model_id)?.filler),
        }
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/document", get(get_document))
        .route("/sessions/{id}/counterfactuals", post(generate))
        .route("/sessions/{id}/ratings", post(rate))
        .route("/risk", get(risk))
        .route("/models", post(upload_model).get(list_models))
        .route("/datasets", post(upload_dataset))
        .route("/export", get(export))
        .fallback(not_found)
        .with_state(state)
}

type ApiResult<T> = Result<T, ApiError>;

fn body<T: DeserializeOwned>(bytes: &Bytes) -> ApiResult<T> {
    Json::<T>::from_bytes(bytes)
        .map(|Json(v)| v)
        .map_err(|e| ApiError::bad_request(e.body_text()))
}

fn query<T: DeserializeOwned>(uri: &Uri) -> ApiResult<T> {
    Query::<T>::try_from_uri(uri)
        .map(|Query(v)| v)
        .map_err(|e| ApiError::bad_request(e.body_text()))
}

/// Runs blocking work (model calls, synced writes) off the async workers.
async fn blocking<T, F>(f: F) -> ApiResult<T>
where
    F: FnOnce() -> ApiResult<T> + Send + 'static,
    T: Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::internal(format!("worker failed: {e}")))?
}

async fn not_found(uri: Uri) -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "not_found", format!("no route for {}", uri.path()))
}

async fn health() -> Json<serde_json::Value> {
    Json(serde_json::json!({ "status": "ok" }))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CreateSession {
    annotator_id: String,
    model_id: String,
    dataset_id: String,
    #[serde(default)]
    seed: Option<u64>,
    #[serde(default)]
    filler_id: Option<String>,
}

async fn create_session(State(state): State<Arc<AppState>>, bytes: Bytes) -> ApiResult<(StatusCode, Json<Session>)> {
    let req: CreateSession = body(&bytes)?;
    state.classifier(&req.model_id)?;
    if let Some(f) = &req.filler_id {
        if state.adapters(f)?.filler.is_none() {
            return Err(ApiError::capability(format!("model {f} is not a fill model")));
        }
    }
    let session = blocking(move || {
        Ok(state.store.create_session(NewSession {
            annotator_id: req.annotator_id,
            model_id: req.model_id,
            dataset_id: req.dataset_id,
            seed: req.seed,
            filler_id: req.filler_id,
        })?)
    })
    .await?;
    Ok((StatusCode::CREATED, Json(session)))
}

async fn get_session(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<Session>> {
    Ok(Json(state.store.session(&id)?))
}

/// The session's instance with the mask generation will use.
fn working_instance(state: &AppState, session: &Session) -> ApiResult<(Instance, MaskOrigin, Arc<dyn AssessedModel>)> {
    let dataset = state.store.dataset(&session.dataset_id)?;
    let instance = dataset.instance(&session.instance_id)?;
    let model = state.classifier(&session.model_id)?;
    let (instance, origin) = dataset.rationalized(instance, model.as_ref())?;
    Ok((instance, origin, model))
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct DocumentQuery {
    #[serde(default)]
    expand: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenView {
    pub token: String,
    pub rationale: bool,
    pub sentence_index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocumentView {
    pub session_id: String,
    pub instance_id: String,
    pub tokens: Vec<String>,
    pub mask: Vec<u8>,
    pub token_view: Vec<TokenView>,
    pub sentence_spans: Vec<Span>,
    pub rationale_sentences: Vec<usize>,
    /// Sentences to display: the rationale sentences, or all when expanded.
    pub visible_sentences: Vec<usize>,
    pub expanded: bool,
    pub mask_origin: MaskOrigin,
    pub gold_label: Option<String>,
}

async fn get_document(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    uri: Uri,
) -> ApiResult<Json<DocumentView>> {
    let q: DocumentQuery = query(&uri)?;
    let view = blocking(move || {
        let session = state.store.session(&id)?;
        let (instance, origin, _) = working_instance(&state, &session)?;
        let rationale = rationale_sentences(&instance);
        let token_view = instance
            .sentence_spans
            .iter()
            .enumerate()
            .flat_map(|(s, span)| (span.start()..span.end()).map(move |i| (s, i)))
            .map(|(s, i)| TokenView {
                token: instance.document.tokens()[i].clone(),
                rationale: instance.mask.get(i),
                sentence_index: s,
            })
            .collect();
        let visible = if q.expand {
            (0..instance.sentence_spans.len()).collect()
        } else {
            rationale.clone()
        };
        Ok(DocumentView {
            session_id: session.session_id,
            instance_id: instance.id.clone(),
            tokens: instance.document.tokens().to_vec(),
            mask: instance.mask.bits().iter().map(|b| u8::from(*b)).collect(),
            token_view,
            sentence_spans: instance.sentence_spans.clone(),
            rationale_sentences: rationale,
            visible_sentences: visible,
            expanded: q.expand,
            mask_origin: origin,
            gold_label: instance.gold_label.clone(),
        })
    })
    .await?;
    Ok(Json(view))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct GenerateRequest {
    sentence_index: usize,
    method: Method,
    /// Document positions replacing the rationale for this request.
    #[serde(default)]
    custom_mask: Option<BTreeSet<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateResponse {
    pub trail: CounterfactualTrail,
    /// `false` when an identical trail was already stored.
    pub created: bool,
    /// Document position edited at each step, for highlighting.
    pub highlights: Vec<usize>,
    /// The sentence before any edit and after each step.
    pub sequences: Vec<Vec<String>>,
}

fn run_generation(state: &AppState, session: &Session, req: &GenerateRequest) -> ApiResult<CounterfactualTrail> {
    let (mut instance, _, model) = working_instance(state, session)?;
    let span = instance.sentence(req.sentence_index)?;
    if let Some(custom) = &req.custom_mask {
        if let Some(p) = custom.iter().find(|p| !span.contains(**p)) {
            return Err(ApiError::bad_request(format!(
                "custom mask position {p} is outside sentence {} {span}",
                req.sentence_index
            )));
        }
        instance = instance.with_mask(merge_custom(&instance.mask, custom)?)?;
    }
    let filler = match req.method {
        Method::Mlm => Some(state.filler_for(session)?.ok_or_else(|| {
            ApiError::capability("masked-infill generation needs a fill model; create the session with a filler_id")
        })?),
        Method::Hotflip => {
            model
                .require_gradients()
                .map_err(|_| ApiError::capability(format!("model {} has no gradients", session.model_id)))?;
            None
        }
    };
    let config = GenerationConfig {
        method: req.method,
        ..state.config.generation.clone()
    };
    let engine = TrailEngine::new(model.as_ref(), filler.as_deref(), &state.config.template);
    let meta = TrailMeta {
        model_id: session.model_id.clone(),
        session_id: Some(session.session_id.clone()),
        seed: Some(session.seed),
    };
    Ok(engine.generate_trail(&instance, req.sentence_index, &config, &meta)?)
}

async fn generate(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    bytes: Bytes,
) -> ApiResult<(StatusCode, Json<GenerateResponse>)> {
    let req: GenerateRequest = body(&bytes)?;
    let session = state.store.session(&id)?;
    let timeout = state.config.generation_timeout;
    let worker = {
        let state = state.clone();
        let session = session.clone();
        tokio::task::spawn_blocking(move || run_generation(&state, &session, &req))
    };
    let trail = match tokio::time::timeout(timeout, worker).await {
        Err(_) => {
            return Err(ApiError::new(
                StatusCode::GATEWAY_TIMEOUT,
                "timeout",
                format!("generation exceeded {} ms", timeout.as_millis()),
            ))
        }
        Ok(joined) => joined.map_err(|e| ApiError::internal(format!("worker failed: {e}")))??,
    };
    let (created, trail) = blocking(move || {
        let created = state.store.save_trail(&trail)?;
        Ok((created, trail))
    })
    .await?;
    let sequences = trail
        .replay()?
        .into_iter()
        .map(|s| s.tokens().to_vec())
        .collect();
    let response = GenerateResponse {
        highlights: trail.steps.iter().map(|s| s.position).collect(),
        sequences,
        created,
        trail,
    };
    let status = if created { StatusCode::CREATED } else { StatusCode::OK };
    Ok((status, Json(response)))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RateRequest {
    trail_id: String,
    plausibility: u8,
    meaningfulness: u8,
    faithfulness: u8,
}

async fn rate(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    bytes: Bytes,
) -> ApiResult<(StatusCode, Json<serde_json::Value>)> {
    let req: RateRequest = body(&bytes)?;
    let rating = blocking(move || {
        let session = state.store.session(&id)?;
        let trail = state.store.trail(&req.trail_id)?;
        if trail.session_id.as_deref() != Some(session.session_id.as_str()) {
            return Err(ApiError::new(
                StatusCode::CONFLICT,
                "foreign_trail",
                format!("trail {} does not belong to session {id}", req.trail_id),
            ));
        }
        let rating = Rating::new(
            req.trail_id,
            session.annotator_id,
            req.plausibility,
            req.meaningfulness,
            req.faithfulness,
        )?;
        state.store.save_rating(&rating)?;
        Ok(rating)
    })
    .await?;
    Ok((
        StatusCode::CREATED,
        Json(serde_json::json!({ "rating_id": rating.rating_id, "rating": rating })),
    ))
}

async fn risk(State(state): State<Arc<AppState>>, uri: Uri) -> ApiResult<Response> {
    #[derive(Deserialize)]
    #[serde(deny_unknown_fields)]
    struct RiskQuery {
        model_id: Option<String>,
        instance_id: Option<String>,
        min_plausibility: Option<u8>,
    }
    let q: RiskQuery = query(&uri)?;
    let scope = RiskScope {
        model_id: q.model_id,
        instance_id: q.instance_id,
        min_plausibility: q.min_plausibility,
    };
    Ok(Json(state.store.risk_report(&scope)?).into_response())
}

async fn upload_model(State(state): State<Arc<AppState>>, bytes: Bytes) -> ApiResult<(StatusCode, Json<serde_json::Value>)> {
    let upload: ModelUpload = body(&bytes)?;
    let out = blocking(move || {
        let (adapters, descriptor) = registry::build(&upload, &state.store, state.config.remote_timeout)?;
        let record = state.store.register_model(upload.model_id.clone(), descriptor)?;
        let summary = adapters.summary();
        state.adapters.write().insert(record.model_id.clone(), adapters);
        Ok(serde_json::json!({
            "model_id": record.model_id,
            "kind": upload.kind,
            "adapters": summary,
        }))
    })
    .await?;
    Ok((StatusCode::CREATED, Json(out)))
}

async fn list_models(State(state): State<Arc<AppState>>) -> Json<serde_json::Value> {
    let loaded = state.adapters.read();
    let models: Vec<_> = state
        .store
        .models()
        .into_iter()
        .map(|m| {
            serde_json::json!({
                "model_id": m.model_id,
                "kind": m.descriptor.get("kind"),
                "available": loaded.contains_key(&m.model_id),
                "created_at": m.created_at,
            })
        })
        .collect();
    Json(serde_json::json!({ "models": models }))
}

async fn upload_dataset(
    State(state): State<Arc<AppState>>,
    uri: Uri,
    bytes: Bytes,
) -> ApiResult<(StatusCode, Json<serde_json::Value>)> {
    #[derive(Deserialize)]
    #[serde(deny_unknown_fields)]
    struct DatasetQuery {
        #[serde(default)]
        format: DatasetFormat,
    }
    let q: DatasetQuery = query(&uri)?;
    let report = blocking(move || Ok(state.store.ingest_bytes(&bytes, q.format)?)).await?;
    Ok((StatusCode::CREATED, Json(serde_json::to_value(report).map_err(|e| ApiError::internal(e.to_string()))?)))
}

async fn export(State(state): State<Arc<AppState>>, uri: Uri) -> ApiResult<Response> {
    let filter: ExportFilter = query(&uri)?;
    let records = state.store.export_counterfactuals(&filter)?;
    let text = to_jsonl(&records)?;
    Ok(([(header::CONTENT_TYPE, "application/x-ndjson")], text).into_response())
}
