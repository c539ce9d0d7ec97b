//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails.

mod common;

use std::collections::{BTreeMap, HashMap};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::seq::IndexedRandom;
use rand::Rng;
use serde_json::json;

use cfassay_core::engine::{TrailEngine, TrailMeta};
use cfassay_core::mlm::{build_prompt, fill_candidates, select_step_mlm, FillRequest, PromptTemplate};
use cfassay_core::models::{gradcheck, AssessedModel, BigramFiller, LinearBagModel, LinearBagWeights, MASK_TOKEN};
use cfassay_core::risk::{aggregate_risk, annotator_risk, risk_report, AnnotatorRisk, RiskScope};
use cfassay_core::store::{parse_jsonl, to_jsonl, Edit, ExportFilter, ExportRecord, Store};
use cfassay_core::text::{
    CounterfactualTrail, GenerationConfig, Instance, Method, PredictionScope, Rating, ReplacementStep, Span,
    TokenSequence,
};
use cfassay_service::ext::{self, adapter_router};
use cfassay_service::{router, AppState, BackgroundServer, ServiceConfig};
use common::*;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        let holds: bool = $cond;
        if !holds {
            return Err(format!($($msg)+));
        }
    };
}

const TIE: f64 = 1e-9;

fn apply(tokens: &[String], position: usize, token: &str) -> Vec<String> {
    let mut out = tokens.to_vec();
    out[position] = token.to_string();
    out
}

fn hotflip_fixture() -> (LinearBagModel, Vec<String>) {
    (random_linear(2, 200, 8, 1000), vocab(200))
}

fn exhaustive(instance: &Instance, max_steps: usize) -> GenerationConfig {
    GenerationConfig {
        method: Method::Hotflip,
        max_steps,
        top_p_positions: instance.mask.count(),
        ..GenerationConfig::default()
    }
}

fn hotflip_exactness() -> Outcome {
    let started = Instant::now();
    let (model, vocab) = hotflip_fixture();
    let w = model.weights();
    let template = PromptTemplate::default();
    let engine = TrailEngine::new(&model, None, &template);
    let mut r = rng(2024);
    let mut identical = 0;
    for case in 0..50 {
        let instance = random_instance(&mut r, &format!("h{case}"), &vocab, 30);
        let trail = engine
            .generate_trail(&instance, 0, &exhaustive(&instance, 1), &TrailMeta::default())
            .map_err(|e| format!("case {case}: {e}"))?;
        let step = &trail.steps[0];
        let tokens = instance.document.tokens();
        let alt = oracle_alternative(w, tokens);
        let edits = all_single_edits(w, tokens, instance.mask.bits(), alt);
        let best = edits
            .iter()
            .min_by(|a, b| a.loss.total_cmp(&b.loss))
            .ok_or_else(|| format!("case {case}: no candidate edits"))?;
        let chosen = oracle_loss(w, &apply(tokens, step.position, &step.new_token), alt);
        ensure!(instance.mask.get(step.position), "case {case}: edit outside the mask");
        ensure!(
            (chosen - best.loss).abs() <= TIE,
            "case {case}: chose ({}, {}) with loss {chosen}, brute force ({}, {}) has {}",
            step.position,
            step.new_token,
            best.position,
            best.token,
            best.loss
        );
        if step.position == best.position && step.new_token == best.token {
            identical += 1;
        }
    }
    let elapsed = started.elapsed();
    ensure!(elapsed < Duration::from_secs(30), "took {elapsed:?}");
    Ok(format!("50/50 at the brute-force minimum ({identical} identical, rest exact-loss ties), {elapsed:.2?}"))
}

fn flip_completeness() -> Outcome {
    let (model, vocab) = hotflip_fixture();
    let w = model.weights();
    let template = PromptTemplate::default();
    let engine = TrailEngine::new(&model, None, &template);
    let mut r = rng(77);
    let mut cases = 0;
    let mut tried = 0;
    while cases < 50 {
        tried += 1;
        ensure!(tried <= 5000, "only {cases} flippable instances in {tried} draws");
        let instance = random_instance(&mut r, &format!("f{tried}"), &vocab, 30);
        let tokens = instance.document.tokens();
        let orig = oracle_label(w, tokens);
        let alt = oracle_alternative(w, tokens);
        let flippable = all_single_edits(w, tokens, instance.mask.bits(), alt)
            .iter()
            .any(|e| oracle_label(w, &apply(tokens, e.position, &e.token)) != orig);
        if !flippable {
            continue;
        }
        cases += 1;
        let trail = engine
            .generate_trail(&instance, 0, &exhaustive(&instance, 5), &TrailMeta::default())
            .map_err(|e| format!("draw {tried}: {e}"))?;
        ensure!(
            trail.flipped && trail.steps.len() == 1,
            "draw {tried}: flipped={} after {} steps",
            trail.flipped,
            trail.steps.len()
        );
    }
    Ok(format!("50/50 one-step flips ({tried} draws)"))
}

fn gradient_check() -> Outcome {
    let binary = random_linear(2, 50, 8, 31);
    let ternary = random_linear(3, 50, 8, 32);
    let served = BackgroundServer::local(adapter_router(Some(Arc::new(random_linear(2, 50, 8, 33))), None))
        .map_err(|e| e.to_string())?;
    let (remote, _) = ext::connect(&served.url(), Duration::from_secs(10)).map_err(|e| e.to_string())?;
    let remote = remote.ok_or("adapter offers no classifier")?;
    let adapters: [(&str, &dyn AssessedModel, usize); 3] =
        [("linear/2", &binary, 30), ("linear/3", &ternary, 30), ("ext", &remote, 12)];
    let mut worst = Vec::new();
    for (name, model, max_len) in adapters {
        let mut r = rng(5);
        let mut vocab = model.vocabulary().to_vec();
        vocab.push("never-seen".into());
        let mut max = 0.0f64;
        for case in 0..20 {
            let len = r.random_range(1..=max_len);
            let seq = TokenSequence::new((0..len).map(|_| vocab.choose(&mut r).unwrap().clone())).unwrap();
            let target = r.random_range(0..model.labels().len());
            let err = gradcheck(model, &seq, target).map_err(|e| format!("{name} case {case}: {e}"))?;
            ensure!(err < 1e-5, "{name} case {case}: relative error {err:e}");
            max = max.max(err);
        }
        worst.push(format!("{name} max {max:.1e}"));
    }
    Ok(format!("20 sequences each: {}", worst.join(", ")))
}

fn replay_final(trail: &CounterfactualTrail, instance: &Instance) -> Vec<String> {
    let sentence = trail.counterfactual_sentence().unwrap();
    match trail.config_snapshot.scope {
        PredictionScope::Sentence => sentence.tokens().to_vec(),
        PredictionScope::Document => {
            let mut doc = instance.document.tokens().to_vec();
            doc.splice(trail.sentence_span.0..trail.sentence_span.1, sentence.tokens().iter().cloned());
            doc
        }
    }
}

fn judged_original(trail: &CounterfactualTrail, instance: &Instance) -> Vec<String> {
    match trail.config_snapshot.scope {
        PredictionScope::Sentence => trail.original_tokens.clone(),
        PredictionScope::Document => instance.document.tokens().to_vec(),
    }
}

fn check_trail(trail: &CounterfactualTrail, instance: &Instance, w: &LinearBagWeights) -> Result<(), String> {
    let n = trail.steps.len();
    ensure!((1..=5).contains(&n) && n <= trail.config_snapshot.max_steps, "{n} steps");
    let mut positions: Vec<usize> = trail.steps.iter().map(|s| s.position).collect();
    positions.sort_unstable();
    positions.dedup();
    ensure!(positions.len() == n, "revisited position");
    for p in &positions {
        ensure!(instance.mask.get(*p), "edit at unmasked position {p}");
        ensure!(trail.sentence_span.contains(*p), "edit at {p} outside sentence {}", trail.sentence_span);
    }
    let before = oracle_label(w, &judged_original(trail, instance));
    let after = oracle_label(w, &replay_final(trail, instance));
    ensure!(trail.original_prediction == w.labels[before], "original prediction mismatch");
    ensure!(trail.final_prediction == w.labels[after], "final prediction mismatch");
    ensure!(trail.flipped == (before != after), "flipped flag disagrees with the model");
    let a = trail.replay().map_err(|e| e.to_string())?;
    let b = trail.replay().map_err(|e| e.to_string())?;
    ensure!(a == b && a.len() == n + 1, "replay not deterministic");
    for (k, step) in trail.steps.iter().enumerate() {
        let changed: Vec<usize> = (0..a[k].len()).filter(|i| a[k].get(*i) != a[k + 1].get(*i)).collect();
        ensure!(
            changed == vec![step.position - trail.sentence_span.0],
            "step {k} changes {changed:?} instead of one token"
        );
    }
    trail.check_invariants(Some(&instance.mask)).map_err(|e| e.to_string())
}

fn trail_invariants() -> Outcome {
    let vocab = vocab(60);
    let models = [random_linear(2, 60, 6, 41), random_linear(3, 60, 6, 42)];
    let mut r = rng(4242);
    let corpus: Vec<Instance> = (0..160)
        .map(|i| {
            let sentences = r.random_range(1..=3);
            random_document(&mut r, &format!("d{i}"), &vocab, sentences, 10)
        })
        .collect();
    let filler = BigramFiller::from_corpus(corpus.iter().map(|i| &i.document)).unwrap();
    let template = PromptTemplate::new("\"<masked sequence>\" is labeled \"<alternative label>\"").unwrap();
    let mut per_method: BTreeMap<&str, usize> = BTreeMap::new();
    let mut skipped = 0;
    for (i, instance) in corpus.iter().enumerate() {
        let model = &models[i % 2];
        let engine = TrailEngine::new(model, Some(&filler), &template);
        for sentence in cfassay_core::rationale::rationale_sentences(instance) {
            for method in [Method::Hotflip, Method::Mlm] {
                let config = GenerationConfig {
                    method,
                    max_steps: r.random_range(1..=5),
                    top_p_positions: r.random_range(1..=4),
                    beam_width: r.random_range(1..=3),
                    fill_top_k: r.random_range(3..=10),
                    scope: if r.random_bool(0.25) { PredictionScope::Document } else { PredictionScope::Sentence },
                };
                let meta = TrailMeta { model_id: format!("m{}", i % 2), session_id: None, seed: Some(i as u64) };
                let trail = match engine.generate_trail(instance, sentence, &config, &meta) {
                    Ok(t) => t,
                    Err(_) => {
                        skipped += 1;
                        continue;
                    }
                };
                check_trail(&trail, instance, model.weights()).map_err(|e| format!("{} s{sentence} {method}: {e}", instance.id))?;
                let again = engine.generate_trail(instance, sentence, &config, &meta).map_err(|e| e.to_string())?;
                ensure!(again == trail, "{} s{sentence} {method}: regeneration differs", instance.id);
                *per_method.entry(if method == Method::Hotflip { "hotflip" } else { "mlm" }).or_default() += 1;
            }
        }
    }
    let total: usize = per_method.values().sum();
    ensure!(total >= 500, "only {total} trails generated");
    ensure!(per_method.len() == 2 && per_method.values().all(|n| *n >= 100), "method coverage {per_method:?}");
    Ok(format!("{total} trails {per_method:?}, {skipped} requests without admissible edits"))
}

fn mlm_selection() -> Outcome {
    let prompt = build_prompt(
        &TokenSequence::from_text("this movie is great").unwrap(),
        3,
        "negative",
        &PromptTemplate::default(),
        MASK_TOKEN,
    )
    .map_err(|e| e.to_string())?;
    let expected = "\"this movie is [mask]\" the sentiment of this review is \"negative\"";
    ensure!(prompt.text == expected, "prompt {:?}", prompt.text);

    let vocab = vocab(60);
    let mut r = rng(99);
    let corpus: Vec<Instance> = (0..80).map(|i| random_document(&mut r, &format!("c{i}"), &vocab, 2, 10)).collect();
    let filler = BigramFiller::from_corpus(corpus.iter().map(|i| &i.document)).unwrap();
    let template = PromptTemplate::default();
    let models = [random_linear(2, 60, 6, 51), random_linear(3, 60, 6, 52)];
    let mut cases = 0;
    let mut draws = 0;
    while cases < 50 {
        draws += 1;
        ensure!(draws < 1000, "only {cases} usable draws");
        let model = &models[draws % 2];
        let w = model.weights();
        let instance = random_instance(&mut r, "m", &vocab, 20);
        let seq = &instance.document;
        let alt = oracle_alternative(w, seq.tokens());
        let request = FillRequest {
            filler: &filler,
            template: &template,
            alt_label: &w.labels[alt],
            fill_top_k: r.random_range(1..=10),
        };
        let candidates = fill_candidates(seq, &instance.mask, &request, &BTreeMap::new()).map_err(|e| e.to_string())?;
        if candidates.is_empty() {
            continue;
        }
        cases += 1;
        let mut best: Option<(usize, String, f64)> = None;
        for c in &candidates {
            let loss = oracle_loss(w, &apply(seq.tokens(), c.step.position, &c.step.new_token), alt);
            let better = match &best {
                None => true,
                Some((p, _, l)) => loss < *l - TIE || ((loss - *l).abs() <= TIE && c.step.position < *p),
            };
            if better {
                best = Some((c.step.position, c.step.new_token.clone(), loss));
            }
        }
        let (position, token, loss) = best.unwrap();
        let chosen = select_step_mlm(seq, &candidates, alt, model).map_err(|e| e.to_string())?;
        ensure!(
            chosen.position == position && chosen.new_token == token,
            "draw {draws}: selected ({}, {}) but the minimum is ({position}, {token})",
            chosen.position,
            chosen.new_token
        );
        ensure!((chosen.actual_loss - loss).abs() <= TIE, "draw {draws}: recorded loss {} vs {loss}", chosen.actual_loss);
    }
    Ok("50/50 enumeration minimum; prompt byte-identical".into())
}

fn rating(trail: &str, annotator: &str, p: u8, m: u8, f: u8) -> Rating {
    Rating::new(trail, annotator, p, m, f).unwrap()
}

fn risk_formula() -> Outcome {
    let risk_of = |fs: &[u8]| {
        let rs: Vec<Rating> = fs.iter().map(|f| rating("t", "a", 3, 3, *f)).collect();
        annotator_risk(&rs.iter().collect::<Vec<_>>()).unwrap().risk
    };
    ensure!(risk_of(&[3, 5]) == 1.0, "[3,5] -> {}", risk_of(&[3, 5]));
    ensure!(risk_of(&[5, 5, 5]) == 0.0, "[5,5,5] -> {}", risk_of(&[5, 5, 5]));
    ensure!(risk_of(&[1, 1]) == 4.0, "[1,1] -> {}", risk_of(&[1, 1]));
    let a = AnnotatorRisk { annotator_id: "a".into(), risk: 2.0, count: 3 };
    let b = AnnotatorRisk { annotator_id: "b".into(), risk: 0.0, count: 1 };
    ensure!(aggregate_risk(&[a, b]).unwrap() == 1.5, "weighted example");

    let mut r = rng(314);
    let mut worst = 0.0f64;
    for fixture in 0..100 {
        let annotators = r.random_range(1..=6);
        let n = r.random_range(1..=60);
        let ratings: Vec<Rating> = (0..n)
            .map(|_| {
                let who = format!("ann{}", r.random_range(0..annotators));
                rating("t", &who, r.random_range(1..=5), r.random_range(1..=5), r.random_range(1..=5))
            })
            .collect();
        let report = risk_report(&HashMap::new(), &ratings, &RiskScope::default()).map_err(|e| e.to_string())?;
        let pooled = ratings.iter().map(|x| f64::from(5 - x.faithfulness)).sum::<f64>() / n as f64;
        let diff = (report.aggregate.unwrap() - pooled).abs();
        ensure!(diff <= 1e-9, "fixture {fixture}: aggregate {:?} vs pooled {pooled}", report.aggregate);
        ensure!(report.total_count == n, "fixture {fixture}: count");
        for ar in &report.per_annotator {
            let mine: Vec<&Rating> = ratings.iter().filter(|x| x.annotator_id == ar.annotator_id).collect();
            let expect = mine.iter().map(|x| f64::from(5 - x.faithfulness)).sum::<f64>() / mine.len() as f64;
            ensure!((ar.risk - expect).abs() <= 1e-9 && ar.count == mine.len(), "fixture {fixture}: {}", ar.annotator_id);
        }
        worst = worst.max(diff);
    }
    Ok(format!("examples exact; 100 fixtures, max |aggregate - pooled| = {worst:.1e}"))
}

fn random_trail(r: &mut rand_chacha::ChaCha8Rng, id: usize) -> CounterfactualTrail {
    let words = vocab(40);
    let start = r.random_range(0..20);
    let len = r.random_range(2..12);
    let original: Vec<String> = (0..len).map(|_| words.choose(r).unwrap().clone()).collect();
    let mut current = original.clone();
    let mut positions: Vec<usize> = (0..len).collect();
    let n = r.random_range(1..=len.min(5));
    let mut steps = Vec::new();
    for _ in 0..n {
        let k = r.random_range(0..positions.len());
        let local = positions.swap_remove(k);
        let new = loop {
            let t = words.choose(r).unwrap().clone();
            if t != current[local] {
                break t;
            }
        };
        let mut step = ReplacementStep::new(start + local, current[local].clone(), new.clone());
        step.estimated_score = r.random_range(-5.0..5.0);
        step.actual_loss = r.random::<f64>() * 1e3 - 500.0;
        current[local] = new;
        steps.push(step);
    }
    let flipped = r.random_bool(0.5);
    CounterfactualTrail {
        trail_id: format!("t-{id:04}"),
        instance_id: format!("i{}", r.random_range(0..5)),
        sentence_index: r.random_range(0..4),
        method: if r.random_bool(0.5) { Method::Hotflip } else { Method::Mlm },
        original_prediction: "positive".into(),
        final_prediction: if flipped { "negative" } else { "positive" }.into(),
        flipped,
        steps,
        config_snapshot: GenerationConfig { max_steps: 5, ..GenerationConfig::default() },
        model_id: "m".into(),
        session_id: r.random_bool(0.5).then(|| format!("s{id}")),
        sentence_span: Span(start, start + len),
        original_tokens: original,
        seed: r.random_bool(0.5).then(|| r.random()),
    }
}

fn persistence() -> Outcome {
    let mut r = rng(2718);
    for fixture in 0..100 {
        let trails: Vec<CounterfactualTrail> = (0..r.random_range(1..6)).map(|i| random_trail(&mut r, fixture * 10 + i)).collect();
        let ratings: Vec<Rating> = trails
            .iter()
            .map(|t| rating(&t.trail_id, &format!("a{}", r.random_range(0..3)), r.random_range(1..=5), r.random_range(1..=5), r.random_range(1..=5)))
            .collect();
        let exports: Vec<ExportRecord> = trails
            .iter()
            .zip(&ratings)
            .map(|(t, x)| cfassay_core::store::export::export_record(t, x).unwrap())
            .collect();
        let back: Vec<CounterfactualTrail> = parse_jsonl(&to_jsonl(&trails).unwrap()).map_err(|e| e.to_string())?;
        ensure!(back == trails, "fixture {fixture}: trail round trip");
        let back: Vec<Rating> = parse_jsonl(&to_jsonl(&ratings).unwrap()).map_err(|e| e.to_string())?;
        ensure!(back == ratings, "fixture {fixture}: rating round trip");
        let back: Vec<ExportRecord> = parse_jsonl(&to_jsonl(&exports).unwrap()).map_err(|e| e.to_string())?;
        ensure!(back == exports, "fixture {fixture}: export round trip");
        for (t, e) in trails.iter().zip(&exports) {
            let edits: Vec<Edit> = t
                .steps
                .iter()
                .map(|s| Edit { position: s.position, old_token: s.old_token.clone(), new_token: s.new_token.clone() })
                .collect();
            ensure!(e.edits == edits && e.original == t.original_tokens.join(" "), "fixture {fixture}: export content");
        }
    }

    // Through the on-disk store, with filters.
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let data = "{\"id\":\"a\",\"text\":\"i love this movie .\",\"label\":\"positive\"}\n";
    let mut trail = random_trail(&mut r, 1);
    trail.instance_id = "a".into();
    trail.session_id = None;
    let mut other = random_trail(&mut r, 2);
    other.instance_id = "a".into();
    other.session_id = None;
    other.flipped = !trail.flipped;
    other.final_prediction = if other.flipped { "negative" } else { "positive" }.into();
    let ratings = vec![rating(&trail.trail_id, "x", 3, 4, 2), rating(&other.trail_id, "y", 5, 2, 5)];
    {
        let store = Store::open(dir.path()).map_err(|e| e.to_string())?;
        ensure!(store.export_counterfactuals(&ExportFilter::default()).unwrap().is_empty(), "export without ratings");
        store.ingest_bytes(data.as_bytes(), Default::default()).map_err(|e| e.to_string())?;
        store.save_trail(&trail).map_err(|e| e.to_string())?;
        store.save_trail(&other).map_err(|e| e.to_string())?;
        for x in &ratings {
            store.save_rating(x).map_err(|e| e.to_string())?;
        }
    }
    let store = Store::open(dir.path()).map_err(|e| e.to_string())?;
    ensure!(store.trail(&trail.trail_id).unwrap() == trail && store.trail(&other.trail_id).unwrap() == other, "trail reload");
    ensure!(store.ratings() == ratings, "rating reload");
    let count = |f: ExportFilter| store.export_counterfactuals(&f).unwrap().len();
    ensure!(count(ExportFilter::default()) == 2, "unfiltered export");
    ensure!(count(ExportFilter { min_plausibility: Some(4), ..Default::default() }) == 1, "min_plausibility=4 on {{3,5}}");
    ensure!(count(ExportFilter { min_meaningfulness: Some(3), ..Default::default() }) == 1, "min_meaningfulness");
    ensure!(count(ExportFilter { flipped_only: true, ..Default::default() }) == 1, "flipped_only");
    let all = store.export_counterfactuals(&ExportFilter::default()).unwrap();
    let reimported: Vec<ExportRecord> = parse_jsonl(&to_jsonl(&all).unwrap()).unwrap();
    ensure!(reimported == all, "export re-import");
    ensure!(store.export_counterfactuals(&ExportFilter::default()).unwrap() == all, "export determinism");
    Ok("100 fixtures round-trip; store reload and export filters hold".into())
}

fn api_contract() -> Outcome {
    let state = Arc::new(AppState::open(ServiceConfig::default()).map_err(|e| e.to_string())?);
    let server = BackgroundServer::local(router(state)).map_err(|e| e.to_string())?;
    let http = Http::new(server.url());
    let weights = serde_json::to_value(toy_model()).unwrap();
    let started = Instant::now();

    let (status, ds) = http.post_raw("/datasets", TOY_DATASET.as_bytes());
    ensure!(status == 201, "dataset upload {status}: {ds}");
    let (status, m) = http.post("/models", &json!({ "kind": "ref:linear", "model_id": "toy", "weights": weights }));
    ensure!(status == 201, "model upload {status}: {m}");
    let (status, s) = http.post(
        "/sessions",
        &json!({ "annotator_id": "ann", "model_id": "toy", "dataset_id": ds["dataset_id"], "seed": 3 }),
    );
    ensure!(status == 201, "session {status}: {s}");
    let sid = s["session_id"].as_str().unwrap().to_string();
    let (status, doc) = http.get(&format!("/sessions/{sid}/document"));
    ensure!(status == 200 && doc["mask"].is_array(), "document {status}: {doc}");
    let sentence = doc["rationale_sentences"][0].clone();
    ensure!(sentence.is_u64(), "no rationale sentence: {doc}");
    let request = json!({ "sentence_index": sentence, "method": "hotflip" });
    let (status, g) = http.post(&format!("/sessions/{sid}/counterfactuals"), &request);
    ensure!(status == 201, "generate {status}: {g}");
    let (status, r1) = http.post(
        &format!("/sessions/{sid}/ratings"),
        &json!({ "trail_id": g["trail"]["trail_id"], "plausibility": 5, "meaningfulness": 4, "faithfulness": 2 }),
    );
    ensure!(status == 201, "rate {status}: {r1}");
    let (status, report) = http.get("/risk?model_id=toy");
    ensure!(status == 200 && report["aggregate"] == 3.0 && report["total_count"] == 1, "risk {status}: {report}");
    let elapsed = started.elapsed();
    ensure!(elapsed < Duration::from_secs(5), "end-to-end took {elapsed:?}");

    let (status, again) = http.post(&format!("/sessions/{sid}/counterfactuals"), &request);
    ensure!(status == 200 && again["created"] == false, "repeat generate {status}: {again}");
    ensure!(again["trail"] == g["trail"], "repeat generate returned a different trail");
    let (status, bad) = http.post(&format!("/sessions/{sid}/ratings"), &json!({ "trail_id": "x", "plausibility": 9 }));
    ensure!(status == 400 && bad["code"].is_string() && bad["message"].is_string(), "malformed rating {status}: {bad}");
    Ok(format!("session -> document -> generate -> rate -> risk in {elapsed:.2?}; generation idempotent"))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 8] = [
        ("hotflip exactness oracle", hotflip_exactness),
        ("flip completeness", flip_completeness),
        ("gradient check", gradient_check),
        ("trail invariants", trail_invariants),
        ("mlm selection oracle", mlm_selection),
        ("risk formula", risk_formula),
        ("persistence round-trips", persistence),
        ("api contract", api_contract),
    ];
    std::panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (name, run) in criteria {
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(reason) => {
                failed += 1;
                println!("FAIL  {name}: {reason}");
            }
        }
    }
    println!("{} of {} acceptance criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
