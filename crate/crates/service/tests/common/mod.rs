//! Fixtures and independent oracles shared by the service test targets.
#![allow(dead_code)]

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cfassay_core::models::{LinearBagModel, LinearBagWeights};
use cfassay_core::text::{Instance, RationaleMask, Span, TokenSequence};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn labels(k: usize) -> Vec<String> {
    match k {
        2 => vec!["negative".into(), "positive".into()],
        _ => (0..k).map(|i| format!("class{i}")).collect(),
    }
}

pub fn vocab(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("w{i:03}")).collect()
}

pub fn random_linear(k: usize, vocab_size: usize, dim: usize, seed: u64) -> LinearBagModel {
    LinearBagModel::random(labels(k), vocab(vocab_size), dim, &mut rng(seed)).unwrap()
}

/// One-sentence document of random vocabulary tokens with a random non-empty
/// mask.
pub fn random_instance(r: &mut ChaCha8Rng, id: &str, vocab: &[String], max_len: usize) -> Instance {
    let len = r.random_range(2..=max_len);
    let tokens: Vec<String> = (0..len).map(|_| vocab.choose(r).unwrap().clone()).collect();
    let doc = TokenSequence::new(tokens).unwrap();
    let mut bits: Vec<bool> = (0..len).map(|_| r.random_bool(0.4)).collect();
    if !bits.iter().any(|b| *b) {
        let i = r.random_range(0..len);
        bits[i] = true;
    }
    Instance::new(id, doc, vec![Span(0, len)], None, RationaleMask::from_bits(bits)).unwrap()
}

/// Multi-sentence document: sentences of random tokens closed by ".".
pub fn random_document(r: &mut ChaCha8Rng, id: &str, vocab: &[String], sentences: usize, max_sentence: usize) -> Instance {
    let mut tokens = Vec::new();
    for _ in 0..sentences {
        let n = r.random_range(2..=max_sentence);
        tokens.extend((0..n).map(|_| vocab.choose(r).unwrap().clone()));
        tokens.push(".".to_string());
    }
    let doc = TokenSequence::new(tokens).unwrap();
    let bits = doc.tokens().iter().map(|t| t != "." && r.random_bool(0.35)).collect();
    Instance::with_default_sentences(id, doc, None, RationaleMask::from_bits(bits)).unwrap()
}

fn embedding<'a>(w: &'a LinearBagWeights, token: &str) -> &'a [f64] {
    match w.vocabulary.iter().position(|v| v == token) {
        Some(i) => &w.embeddings[i],
        None => &w.unk_embedding,
    }
}

/// Logits recomputed from the raw weights: class weights times the mean
/// token embedding.
pub fn oracle_logits(w: &LinearBagWeights, tokens: &[String]) -> Vec<f64> {
    let dim = w.unk_embedding.len();
    let mut mean = vec![0.0; dim];
    for t in tokens {
        for (m, e) in mean.iter_mut().zip(embedding(w, t)) {
            *m += e;
        }
    }
    let n = tokens.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    w.class_weights
        .iter()
        .map(|row| row.iter().zip(&mean).map(|(a, b)| a * b).sum())
        .collect()
}

/// Margin loss toward `target`: best rival logit minus target logit.
pub fn oracle_loss(w: &LinearBagWeights, tokens: &[String], target: usize) -> f64 {
    let logits = oracle_logits(w, tokens);
    let rival = logits
        .iter()
        .enumerate()
        .filter(|(k, _)| *k != target)
        .map(|(_, l)| *l)
        .fold(f64::NEG_INFINITY, f64::max);
    rival - logits[target]
}

/// First index of the maximum logit.
pub fn oracle_label(w: &LinearBagWeights, tokens: &[String]) -> usize {
    let logits = oracle_logits(w, tokens);
    let mut best = 0;
    for (i, l) in logits.iter().enumerate() {
        if *l > logits[best] {
            best = i;
        }
    }
    best
}

/// Highest-scoring label other than the predicted one.
pub fn oracle_alternative(w: &LinearBagWeights, tokens: &[String]) -> usize {
    let logits = oracle_logits(w, tokens);
    let pred = oracle_label(w, tokens);
    let mut best: Option<usize> = None;
    for (i, l) in logits.iter().enumerate() {
        if i != pred && best.is_none_or(|b| *l > logits[b]) {
            best = Some(i);
        }
    }
    best.unwrap()
}

#[derive(Debug, Clone, PartialEq)]
pub struct BruteEdit {
    pub position: usize,
    pub token: String,
    pub loss: f64,
}

/// Every single-token replacement inside `mask`, with its exact loss toward
/// `target`, in (position, token) order.
pub fn all_single_edits(w: &LinearBagWeights, tokens: &[String], mask: &[bool], target: usize) -> Vec<BruteEdit> {
    let mut out = Vec::new();
    for (i, editable) in mask.iter().enumerate() {
        if !editable {
            continue;
        }
        for v in &w.vocabulary {
            if *v == tokens[i] {
                continue;
            }
            let mut edited = tokens.to_vec();
            edited[i] = v.clone();
            out.push(BruteEdit {
                position: i,
                token: v.clone(),
                loss: oracle_loss(w, &edited, target),
            });
        }
    }
    out
}

/// Small labeled sentiment corpus with rationale spans.
pub const TOY_DATASET: &str = r#"{"id":"r1","text":"I love this movie. The acting was great and the story was moving.","label":"positive","rationale_spans":[[1,2],[8,9]]}
{"id":"r2","text":"I hate this movie. The acting was awful and the story was boring.","label":"negative","rationale_spans":[[1,2],[8,9],[13,14]]}
{"id":"r3","text":"A wonderful film. The cast is brilliant.","label":"positive","rationale_spans":[[1,2],[7,8]]}
{"id":"r4","text":"A terrible film. The cast is dull.","label":"negative","rationale_spans":[[1,2],[7,8]]}
{"id":"r5","text":"The plot was great. I love the ending.","label":"positive","rationale_spans":[[3,4],[6,7]]}
{"id":"r6","text":"The plot was awful. I hate the ending.","label":"negative","rationale_spans":[[3,4],[6,7]]}
"#;

/// The reference model fitted on [`TOY_DATASET`].
pub fn toy_model() -> LinearBagModel {
    use cfassay_core::store::{parse_dataset, DatasetFormat};
    let parsed = parse_dataset(TOY_DATASET.as_bytes(), DatasetFormat::Jsonl).unwrap();
    let docs: Vec<(TokenSequence, usize)> = parsed
        .instances
        .iter()
        .map(|i| {
            let label = i.gold_label.as_ref().unwrap();
            (i.document.clone(), parsed.labels.iter().position(|l| l == label).unwrap())
        })
        .collect();
    let (model, accuracy) = LinearBagModel::fit(parsed.labels.clone(), &docs, 16, 7, 100).unwrap();
    assert_eq!(accuracy, 1.0);
    model
}

/// Minimal JSON client; never treats an HTTP status as a transport error.
pub struct Http {
    pub base: String,
    agent: ureq::Agent,
}

impl Http {
    pub fn new(base: impl Into<String>) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(std::time::Duration::from_secs(30)))
            .build()
            .into();
        Self { base: base.into(), agent }
    }

    fn finish(resp: ureq::http::Response<ureq::Body>) -> (u16, String) {
        let status = resp.status().as_u16();
        let text = resp.into_body().read_to_string().unwrap();
        (status, text)
    }

    fn json(text: &str) -> serde_json::Value {
        serde_json::from_str(text).unwrap_or_else(|e| panic!("not JSON ({e}): {text}"))
    }

    pub fn get_text(&self, path: &str) -> (u16, String) {
        Self::finish(self.agent.get(format!("{}{path}", self.base)).call().unwrap())
    }

    pub fn get(&self, path: &str) -> (u16, serde_json::Value) {
        let (s, t) = self.get_text(path);
        (s, Self::json(&t))
    }

    pub fn post_raw(&self, path: &str, body: &[u8]) -> (u16, serde_json::Value) {
        let (s, t) = Self::finish(self.agent.post(format!("{}{path}", self.base)).send(body).unwrap());
        (s, Self::json(&t))
    }

    pub fn post(&self, path: &str, body: &serde_json::Value) -> (u16, serde_json::Value) {
        self.post_raw(path, serde_json::to_string(body).unwrap().as_bytes())
    }
}
