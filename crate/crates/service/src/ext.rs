//! The external adapter protocol.
//!
//! A remote adapter is any HTTP server answering these JSON endpoints:
//!
//! | route           | request                                   | response                  |
//! |-----------------|-------------------------------------------|---------------------------|
//! | `GET /health`   |                                           | `{"status":"ok"}`         |
//! | `GET /info`     |                                           | [`AdapterInfo`]           |
//! | `POST /predict` | `{"tokens"}`                              | `{"class_scores"}`        |
//! | `POST /loss`    | `{"tokens"` or `"embeddings", "target"}`  | `{"loss"}`                |
//! | `POST /grad`    | `{"tokens","target"}`                     | `{"grad"}`                |
//! | `POST /embed`   | `{"tokens"}`                              | `{"embeddings"}`          |
//! | `POST /fill`    | `{"tokens","mask_position"}`              | `{"scores"}`              |
//!
//! Errors come back as `{"code","message"}` with a 4xx/5xx status.
//! [`ExtModel`] and [`ExtFiller`] are the clients; [`adapter_router`] serves
//! any local model over the same protocol.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use axum::extract::State;
use axum::http::StatusCode;
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use cfassay_core::models::{AssessedModel, Capabilities, FillModel};
use cfassay_core::text::TokenSequence;
use cfassay_core::{Error, Result};

use crate::error::ApiError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierInfo {
    pub labels: Vec<String>,
    pub vocabulary: Vec<String>,
    pub embedding_dim: usize,
    pub capabilities: Capabilities,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FillInfo {
    pub vocabulary: Vec<String>,
    pub mask_token: String,
    #[serde(default = "yes")]
    pub concurrent: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AdapterInfo {
    #[serde(default)]
    pub classifier: Option<ClassifierInfo>,
    #[serde(default)]
    pub fill: Option<FillInfo>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TokensRequest {
    pub tokens: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct LossRequest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tokens: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embeddings: Option<Vec<Vec<f64>>>,
    pub target: usize,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct GradRequest {
    pub tokens: Vec<String>,
    pub target: usize,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct FillRequestBody {
    pub tokens: Vec<String>,
    pub mask_position: usize,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PredictResponse {
    pub class_scores: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct LossResponse {
    pub loss: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct GradResponse {
    pub grad: Vec<Vec<f64>>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EmbedResponse {
    pub embeddings: Vec<Vec<f64>>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct FillResponse {
    pub scores: BTreeMap<String, f64>,
}

pub const DEFAULT_REMOTE_TIMEOUT: Duration = Duration::from_secs(30);

/// Blocking JSON client for one adapter base URL.
#[derive(Clone)]
struct Client {
    base: String,
    agent: ureq::Agent,
}

impl Client {
    fn new(base: &str, timeout: Duration) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            base: base.trim_end_matches('/').to_string(),
            agent,
        }
    }

    fn decode<T: DeserializeOwned>(&self, route: &str, resp: std::result::Result<ureq::http::Response<ureq::Body>, ureq::Error>) -> Result<T> {
        let mut resp = resp.map_err(|e| Error::Remote(format!("{}{route}: {e}", self.base)))?;
        let status = resp.status();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| Error::Remote(format!("{}{route}: {e}", self.base)))?;
        if !status.is_success() {
            return Err(Error::Remote(format!("{}{route} returned {status}: {text}", self.base)));
        }
        serde_json::from_str(&text).map_err(|e| Error::Remote(format!("{}{route}: bad response: {e}", self.base)))
    }

    fn get<T: DeserializeOwned>(&self, route: &str) -> Result<T> {
        let resp = self.agent.get(format!("{}{route}", self.base)).call();
        self.decode(route, resp)
    }

    fn post<B: Serialize, T: DeserializeOwned>(&self, route: &str, body: &B) -> Result<T> {
        let resp = self.agent.post(format!("{}{route}", self.base)).send_json(body);
        self.decode(route, resp)
    }
}

/// Probes `/health` and fetches `/info`.
pub fn probe(base: &str, timeout: Duration) -> Result<AdapterInfo> {
    let client = Client::new(base, timeout);
    let health: serde_json::Value = client.get("/health")?;
    if health.get("status").and_then(|s| s.as_str()) != Some("ok") {
        return Err(Error::Remote(format!("{base}/health answered {health}")));
    }
    client.get("/info")
}

/// Connects to a remote adapter and returns whichever halves it offers.
pub fn connect(base: &str, timeout: Duration) -> Result<(Option<ExtModel>, Option<ExtFiller>)> {
    let info = probe(base, timeout)?;
    let client = Client::new(base, timeout);
    let model = info.classifier.map(|info| ExtModel {
        client: client.clone(),
        info,
    });
    let filler = info.fill.map(|info| ExtFiller { client, info });
    Ok((model, filler))
}

pub struct ExtModel {
    client: Client,
    info: ClassifierInfo,
}

impl ExtModel {
    pub fn base_url(&self) -> &str {
        &self.client.base
    }

    fn tokens(seq: &TokenSequence) -> Vec<String> {
        seq.tokens().to_vec()
    }
}

impl AssessedModel for ExtModel {
    fn labels(&self) -> &[String] {
        &self.info.labels
    }

    fn vocabulary(&self) -> &[String] {
        &self.info.vocabulary
    }

    fn embedding_dim(&self) -> usize {
        self.info.embedding_dim
    }

    fn capabilities(&self) -> Capabilities {
        self.info.capabilities
    }

    fn class_scores(&self, seq: &TokenSequence) -> Result<Vec<f64>> {
        let r: PredictResponse = self.client.post("/predict", &TokensRequest { tokens: Self::tokens(seq) })?;
        if r.class_scores.len() != self.info.labels.len() {
            return Err(Error::Remote(format!(
                "expected {} class scores, got {}",
                self.info.labels.len(),
                r.class_scores.len()
            )));
        }
        Ok(r.class_scores)
    }

    fn loss(&self, seq: &TokenSequence, target: usize) -> Result<f64> {
        self.check_target(target)?;
        let body = LossRequest {
            tokens: Some(Self::tokens(seq)),
            embeddings: None,
            target,
        };
        Ok(self.client.post::<_, LossResponse>("/loss", &body)?.loss)
    }

    fn embed(&self, token: &str) -> Result<Vec<f64>> {
        let r: EmbedResponse = self.client.post("/embed", &TokensRequest { tokens: vec![token.to_string()] })?;
        r.embeddings
            .into_iter()
            .next()
            .ok_or_else(|| Error::Remote("empty embedding response".into()))
    }

    fn vocab_embeddings(&self) -> Result<Vec<Vec<f64>>> {
        let r: EmbedResponse = self.client.post("/embed", &TokensRequest { tokens: self.info.vocabulary.clone() })?;
        if r.embeddings.len() != self.info.vocabulary.len() {
            return Err(Error::Remote("embedding count does not match the vocabulary".into()));
        }
        Ok(r.embeddings)
    }

    fn grad_embedding(&self, seq: &TokenSequence, target: usize) -> Result<Vec<Vec<f64>>> {
        self.require_gradients()?;
        self.check_target(target)?;
        let body = GradRequest {
            tokens: Self::tokens(seq),
            target,
        };
        let r: GradResponse = self.client.post("/grad", &body)?;
        if r.grad.len() != seq.len() {
            return Err(Error::Remote("gradient length does not match the sequence".into()));
        }
        Ok(r.grad)
    }

    fn loss_at_embeddings(&self, embeddings: &[Vec<f64>], target: usize) -> Result<f64> {
        self.require_gradients()?;
        let body = LossRequest {
            tokens: None,
            embeddings: Some(embeddings.to_vec()),
            target,
        };
        Ok(self.client.post::<_, LossResponse>("/loss", &body)?.loss)
    }
}

pub struct ExtFiller {
    client: Client,
    info: FillInfo,
}

impl FillModel for ExtFiller {
    fn vocabulary(&self) -> &[String] {
        &self.info.vocabulary
    }

    fn mask_token(&self) -> &str {
        &self.info.mask_token
    }

    fn concurrent(&self) -> bool {
        self.info.concurrent
    }

    fn fill_scores(&self, seq: &TokenSequence, mask_position: usize) -> Result<BTreeMap<String, f64>> {
        let body = FillRequestBody {
            tokens: seq.tokens().to_vec(),
            mask_position,
        };
        Ok(self.client.post::<_, FillResponse>("/fill", &body)?.scores)
    }
}

#[derive(Clone)]
struct Served {
    model: Option<Arc<dyn AssessedModel>>,
    filler: Option<Arc<dyn FillModel>>,
}

impl Served {
    fn model(&self) -> std::result::Result<&dyn AssessedModel, ApiError> {
        self.model
            .as_deref()
            .ok_or_else(|| ApiError::capability("this adapter serves no classifier"))
    }
}

type Reply<T> = std::result::Result<Json<T>, ApiError>;

fn seq_of(tokens: Vec<String>) -> std::result::Result<TokenSequence, ApiError> {
    Ok(TokenSequence::new(tokens)?)
}

async fn health() -> Json<serde_json::Value> {
    Json(serde_json::json!({ "status": "ok" }))
}

async fn info(State(s): State<Served>) -> Json<AdapterInfo> {
    Json(AdapterInfo {
        classifier: s.model.as_ref().map(|m| ClassifierInfo {
            labels: m.labels().to_vec(),
            vocabulary: m.vocabulary().to_vec(),
            embedding_dim: m.embedding_dim(),
            capabilities: m.capabilities(),
        }),
        fill: s.filler.as_ref().map(|f| FillInfo {
            vocabulary: f.vocabulary().to_vec(),
            mask_token: f.mask_token().to_string(),
            concurrent: f.concurrent(),
        }),
    })
}

async fn predict(State(s): State<Served>, Json(r): Json<TokensRequest>) -> Reply<PredictResponse> {
    let class_scores = s.model()?.class_scores(&seq_of(r.tokens)?)?;
    Ok(Json(PredictResponse { class_scores }))
}

async fn loss(State(s): State<Served>, Json(r): Json<LossRequest>) -> Reply<LossResponse> {
    let model = s.model()?;
    let loss = match (r.tokens, r.embeddings) {
        (Some(tokens), None) => model.loss(&seq_of(tokens)?, r.target)?,
        (None, Some(embeddings)) => model.loss_at_embeddings(&embeddings, r.target)?,
        _ => return Err(ApiError::bad_request("give exactly one of tokens or embeddings")),
    };
    Ok(Json(LossResponse { loss }))
}

async fn grad(State(s): State<Served>, Json(r): Json<GradRequest>) -> Reply<GradResponse> {
    let grad = s.model()?.grad_embedding(&seq_of(r.tokens)?, r.target)?;
    Ok(Json(GradResponse { grad }))
}

async fn embed(State(s): State<Served>, Json(r): Json<TokensRequest>) -> Reply<EmbedResponse> {
    let model = s.model()?;
    let embeddings = r.tokens.iter().map(|t| model.embed(t)).collect::<Result<_>>()?;
    Ok(Json(EmbedResponse { embeddings }))
}

async fn fill(State(s): State<Served>, Json(r): Json<FillRequestBody>) -> Reply<FillResponse> {
    let filler = s
        .filler
        .as_deref()
        .ok_or_else(|| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "capability_missing", "this adapter serves no fill model"))?;
    let scores = filler.fill_scores(&seq_of(r.tokens)?, r.mask_position)?;
    Ok(Json(FillResponse { scores }))
}

/// Serves local models over the adapter protocol.
pub fn adapter_router(model: Option<Arc<dyn AssessedModel>>, filler: Option<Arc<dyn FillModel>>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/info", get(info))
        .route("/predict", post(predict))
        .route("/loss", post(loss))
        .route("/grad", post(grad))
        .route("/embed", post(embed))
        .route("/fill", post(fill))
        .with_state(Served { model, filler })
}
