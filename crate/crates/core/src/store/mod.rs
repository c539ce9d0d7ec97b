//! Append-only persistence for datasets, model registrations, sessions,
//! trails and ratings.
//!
//! A store directory holds one JSONL log per record kind. Every write is
//! appended and synced before the in-memory index changes, and the index is
//! rebuilt from the logs when the store is opened.

pub mod dataset;
pub mod export;
pub mod jsonl;

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::{DateTime, Utc};
use parking_lot::RwLock;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::risk::{risk_report, RiskReport, RiskScope};
use crate::text::{CounterfactualTrail, Rating};

pub use dataset::{content_hash, parse_dataset, Dataset, DatasetFormat, DatasetRecord, MaskOrigin, ParsedDataset};
pub use export::{export_records, Edit, ExportFilter, ExportRecord};
pub use jsonl::{append_record, parse_jsonl, read_jsonl, to_jsonl, write_jsonl};

pub const DATASETS_FILE: &str = "datasets.jsonl";
pub const MODELS_FILE: &str = "models.jsonl";
pub const SESSIONS_FILE: &str = "sessions.jsonl";
pub const TRAILS_FILE: &str = "trails.jsonl";
pub const RATINGS_FILE: &str = "ratings.jsonl";

/// An annotator working on one instance with one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub session_id: String,
    pub annotator_id: String,
    pub model_id: String,
    pub dataset_id: String,
    pub instance_id: String,
    pub seed: u64,
    #[serde(default)]
    pub filler_id: Option<String>,
    pub created_at: DateTime<Utc>,
    /// Filled from the trail index on read; stored empty.
    #[serde(default)]
    pub trail_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRecord {
    pub model_id: String,
    pub descriptor: Value,
    pub created_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestReport {
    pub dataset_id: String,
    pub content_hash: String,
    pub instances: usize,
    /// Set when identical content was already ingested under another id.
    pub duplicate_of: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NewSession {
    pub annotator_id: String,
    pub model_id: String,
    pub dataset_id: String,
    pub seed: Option<u64>,
    pub filler_id: Option<String>,
}

#[derive(Default)]
struct State {
    datasets: HashMap<String, Arc<Dataset>>,
    dataset_by_hash: HashMap<String, String>,
    models: BTreeMap<String, ModelRecord>,
    sessions: HashMap<String, Session>,
    trails: HashMap<String, CounterfactualTrail>,
    trail_order: Vec<String>,
    ratings: Vec<Rating>,
}

impl State {
    fn insert_dataset(&mut self, d: Dataset) {
        self.dataset_by_hash
            .entry(d.content_hash.clone())
            .or_insert_with(|| d.dataset_id.clone());
        self.datasets.insert(d.dataset_id.clone(), Arc::new(d));
    }

    fn insert_trail(&mut self, t: CounterfactualTrail) {
        self.trail_order.push(t.trail_id.clone());
        self.trails.insert(t.trail_id.clone(), t);
    }

    fn check_trail_refs(&self, trail: &CounterfactualTrail) -> Result<()> {
        let known_instance = match trail.session_id.as_ref().and_then(|s| self.sessions.get(s)) {
            Some(session) => self.datasets[&session.dataset_id].instance(&trail.instance_id).is_ok(),
            None => self.datasets.values().any(|d| d.instance(&trail.instance_id).is_ok()),
        };
        if !known_instance {
            return Err(Error::DanglingReference(format!(
                "trail {} names unknown instance {}",
                trail.trail_id, trail.instance_id
            )));
        }
        if let Some(sid) = &trail.session_id {
            let session = self.sessions.get(sid).ok_or_else(|| {
                Error::DanglingReference(format!("trail {} names unknown session {sid}", trail.trail_id))
            })?;
            if session.model_id != trail.model_id {
                return Err(Error::DanglingReference(format!(
                    "trail {} was produced by {} but session {sid} uses {}",
                    trail.trail_id, trail.model_id, session.model_id
                )));
            }
            if session.instance_id != trail.instance_id {
                return Err(Error::DanglingReference(format!(
                    "trail {} is for instance {} but session {sid} is on {}",
                    trail.trail_id, trail.instance_id, session.instance_id
                )));
            }
        }
        Ok(())
    }
}

pub struct Store {
    dir: Option<PathBuf>,
    state: RwLock<State>,
}

impl std::fmt::Debug for Store {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Store").field("dir", &self.dir).finish_non_exhaustive()
    }
}

fn load<T: serde::de::DeserializeOwned>(dir: &Path, name: &str) -> Result<Vec<T>> {
    let path = dir.join(name);
    if path.exists() {
        read_jsonl(&path)
    } else {
        Ok(Vec::new())
    }
}

impl Store {
    /// A store that keeps everything in memory.
    pub fn in_memory() -> Self {
        Self {
            dir: None,
            state: RwLock::new(State::default()),
        }
    }

    /// Opens (creating if needed) a store directory and rebuilds its index.
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir)?;
        let mut state = State::default();
        for d in load::<Dataset>(&dir, DATASETS_FILE)? {
            state.insert_dataset(d);
        }
        for m in load::<ModelRecord>(&dir, MODELS_FILE)? {
            state.models.insert(m.model_id.clone(), m);
        }
        for s in load::<Session>(&dir, SESSIONS_FILE)? {
            state.sessions.insert(s.session_id.clone(), s);
        }
        for t in load::<CounterfactualTrail>(&dir, TRAILS_FILE)? {
            if !state.trails.contains_key(&t.trail_id) {
                state.insert_trail(t);
            }
        }
        state.ratings = load(&dir, RATINGS_FILE)?;
        Ok(Self {
            dir: Some(dir),
            state: RwLock::new(state),
        })
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    fn append<T: Serialize>(&self, file: &str, record: &T) -> Result<()> {
        match &self.dir {
            Some(dir) => append_record(&dir.join(file), record),
            None => Ok(()),
        }
    }

    pub fn ingest_dataset(&self, path: &Path, format: Option<DatasetFormat>) -> Result<IngestReport> {
        let bytes = std::fs::read(path)?;
        self.ingest_bytes(&bytes, format.unwrap_or_else(|| DatasetFormat::from_path(path)))
    }

    /// Parses and stores a dataset under a fresh id. Re-ingesting identical
    /// bytes is allowed but logged, and the report names the earlier id.
    pub fn ingest_bytes(&self, bytes: &[u8], format: DatasetFormat) -> Result<IngestReport> {
        let parsed = parse_dataset(bytes, format)?;
        let mut state = self.state.write();
        let duplicate_of = state.dataset_by_hash.get(&parsed.content_hash).cloned();
        if let Some(existing) = &duplicate_of {
            log::warn!("dataset content {} already ingested as {existing}", parsed.content_hash);
        }
        let dataset = parsed.into_dataset(format!("d-{}", uuid::Uuid::new_v4().simple()));
        self.append(DATASETS_FILE, &dataset)?;
        let report = IngestReport {
            dataset_id: dataset.dataset_id.clone(),
            content_hash: dataset.content_hash.clone(),
            instances: dataset.instances.len(),
            duplicate_of,
        };
        state.insert_dataset(dataset);
        Ok(report)
    }

    pub fn dataset(&self, id: &str) -> Result<Arc<Dataset>> {
        self.state.read().datasets.get(id).cloned().ok_or_else(|| Error::NotFound {
            kind: "dataset",
            id: id.to_string(),
        })
    }

    pub fn datasets(&self) -> Vec<Arc<Dataset>> {
        let mut out: Vec<_> = self.state.read().datasets.values().cloned().collect();
        out.sort_by(|a, b| a.dataset_id.cmp(&b.dataset_id));
        out
    }

    /// Records a model descriptor. Re-registering an id with the same
    /// descriptor returns the existing record.
    pub fn register_model(&self, model_id: Option<String>, descriptor: Value) -> Result<ModelRecord> {
        let mut state = self.state.write();
        let model_id = model_id.unwrap_or_else(|| format!("m-{}", uuid::Uuid::new_v4().simple()));
        if let Some(existing) = state.models.get(&model_id) {
            if existing.descriptor == descriptor {
                return Ok(existing.clone());
            }
            return Err(Error::InvalidInput(format!(
                "model {model_id} is already registered with a different descriptor"
            )));
        }
        let record = ModelRecord {
            model_id: model_id.clone(),
            descriptor,
            created_at: Utc::now(),
        };
        self.append(MODELS_FILE, &record)?;
        state.models.insert(model_id, record.clone());
        Ok(record)
    }

    pub fn model(&self, id: &str) -> Result<ModelRecord> {
        self.state.read().models.get(id).cloned().ok_or_else(|| Error::NotFound {
            kind: "model",
            id: id.to_string(),
        })
    }

    pub fn models(&self) -> Vec<ModelRecord> {
        self.state.read().models.values().cloned().collect()
    }

    /// Opens a session on an instance drawn from the dataset with the seed.
    pub fn create_session(&self, req: NewSession) -> Result<Session> {
        if req.annotator_id.trim().is_empty() {
            return Err(Error::InvalidInput("annotator_id must not be empty".into()));
        }
        let mut state = self.state.write();
        let dataset = state.datasets.get(&req.dataset_id).cloned().ok_or_else(|| Error::NotFound {
            kind: "dataset",
            id: req.dataset_id.clone(),
        })?;
        for id in std::iter::once(&req.model_id).chain(req.filler_id.as_ref()) {
            if !state.models.contains_key(id) {
                return Err(Error::NotFound {
                    kind: "model",
                    id: id.clone(),
                });
            }
        }
        let seed = req.seed.unwrap_or_else(rand::random);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let instance = &dataset.instances[rng.random_range(0..dataset.instances.len())];
        let session = Session {
            session_id: format!("s-{}", uuid::Uuid::new_v4().simple()),
            annotator_id: req.annotator_id,
            model_id: req.model_id,
            dataset_id: req.dataset_id,
            instance_id: instance.id.clone(),
            seed,
            filler_id: req.filler_id,
            created_at: Utc::now(),
            trail_ids: Vec::new(),
        };
        self.append(SESSIONS_FILE, &session)?;
        state.sessions.insert(session.session_id.clone(), session.clone());
        Ok(session)
    }

    pub fn session(&self, id: &str) -> Result<Session> {
        let state = self.state.read();
        let mut session = state.sessions.get(id).cloned().ok_or_else(|| Error::NotFound {
            kind: "session",
            id: id.to_string(),
        })?;
        session.trail_ids = state
            .trail_order
            .iter()
            .filter(|t| state.trails[*t].session_id.as_deref() == Some(id))
            .cloned()
            .collect();
        Ok(session)
    }

    /// Stores a trail. Saving an identical trail again returns `false`
    /// without writing; a different trail under an existing id is an error.
    pub fn save_trail(&self, trail: &CounterfactualTrail) -> Result<bool> {
        let mut state = self.state.write();
        if let Some(existing) = state.trails.get(&trail.trail_id) {
            if existing == trail {
                return Ok(false);
            }
            return Err(Error::InvalidInput(format!(
                "trail {} already exists with different content",
                trail.trail_id
            )));
        }
        state.check_trail_refs(trail)?;
        self.append(TRAILS_FILE, trail)?;
        state.insert_trail(trail.clone());
        Ok(true)
    }

    pub fn trail(&self, id: &str) -> Result<CounterfactualTrail> {
        self.state.read().trails.get(id).cloned().ok_or_else(|| Error::NotFound {
            kind: "trail",
            id: id.to_string(),
        })
    }

    /// All trails in insertion order.
    pub fn trails(&self) -> Vec<CounterfactualTrail> {
        let state = self.state.read();
        state.trail_order.iter().map(|id| state.trails[id].clone()).collect()
    }

    pub fn save_rating(&self, rating: &Rating) -> Result<()> {
        rating.validate()?;
        let mut state = self.state.write();
        if !state.trails.contains_key(&rating.trail_id) {
            return Err(Error::DanglingReference(format!(
                "rating {} names unknown trail {}",
                rating.rating_id, rating.trail_id
            )));
        }
        self.append(RATINGS_FILE, rating)?;
        state.ratings.push(rating.clone());
        Ok(())
    }

    pub fn ratings(&self) -> Vec<Rating> {
        self.state.read().ratings.clone()
    }

    pub fn risk_report(&self, scope: &RiskScope) -> Result<RiskReport> {
        let state = self.state.read();
        risk_report(&state.trails, &state.ratings, scope)
    }

    pub fn export_counterfactuals(&self, filter: &ExportFilter) -> Result<Vec<ExportRecord>> {
        let state = self.state.read();
        export_records(&state.trails, &state.ratings, filter)
    }
}
