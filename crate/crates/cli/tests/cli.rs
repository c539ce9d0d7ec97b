use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};
use std::path::Path;
use std::process::{Child, Command, Output, Stdio};
use std::time::{Duration, Instant};

use cfassay_core::engine::{TrailEngine, TrailMeta};
use cfassay_core::mlm::PromptTemplate;
use cfassay_core::models::LinearBagModel;
use cfassay_core::store::{read_jsonl, DatasetFormat, NewSession, Store};
use cfassay_core::text::{CounterfactualTrail, GenerationConfig, Rating};

const DATASET: &str = r#"{"id":"r1","text":"I love this movie. The acting was great and the story was moving.","label":"positive","rationale_spans":[[1,2],[8,9]]}
{"id":"r2","text":"I hate this movie. The acting was awful and the story was boring.","label":"negative","rationale_spans":[[1,2],[8,9],[13,14]]}
{"id":"r3","text":"A wonderful film. The cast is brilliant.","label":"positive","rationale_spans":[[1,2],[7,8]]}
{"id":"r4","text":"A terrible film. The cast is dull.","label":"negative","rationale_spans":[[1,2],[7,8]]}
{"id":"r5","text":"The plot was great. I love the ending.","label":"positive"}
{"id":"r6","text":"The plot was awful. I hate the ending.","label":"negative","rationale_spans":[[3,4],[6,7]]}
"#;

fn cfassay(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cfassay"))
        .args(args)
        .env_remove("CFASSAY_DATA_DIR")
        .env_remove("CFASSAY_PORT")
        .output()
        .unwrap()
}

fn stdout(out: &Output) -> String {
    assert!(out.status.success(), "failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Writes the dataset and a fitted model into `dir`.
fn fixture(dir: &Path) -> (std::path::PathBuf, std::path::PathBuf) {
    let data = dir.join("data.jsonl");
    std::fs::write(&data, DATASET).unwrap();
    let model = dir.join("model.json");
    stdout(&cfassay(&["fit", "--dataset", p(&data), "--dim", "16", "--seed", "7", "--epochs", "100", "--out", p(&model)]));
    (data, model)
}

#[test]
fn generate_is_deterministic_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let (data, model) = fixture(dir.path());
    let run = |name: &str, method: &str, seed: &str| {
        let out = dir.path().join(name);
        let summary = stdout(&cfassay(&[
            "generate", "--dataset", p(&data), "--model", p(&model), "--method", method, "--seed", seed, "--out", p(&out),
        ]));
        (std::fs::read(&out).unwrap(), summary)
    };
    for method in ["hotflip", "mlm"] {
        let (a, summary) = run("a.jsonl", method, "3");
        let (b, _) = run("b.jsonl", method, "3");
        assert_eq!(a, b, "{method}");
        assert!(summary.starts_with("n=6 "), "{summary}");
        let trails: Vec<CounterfactualTrail> = read_jsonl(&dir.path().join("a.jsonl")).unwrap();
        assert_eq!(trails.len(), 6);
        for t in &trails {
            t.check_invariants(None).unwrap();
            assert_eq!(t.model_id, p(&model));
        }
        let flipped = trails.iter().filter(|t| t.flipped).count();
        assert!(summary.contains(&format!("flipped={flipped} ")), "{summary}");
    }
}

#[test]
fn limit_zero_writes_an_empty_file() {
    let dir = tempfile::tempdir().unwrap();
    let (data, model) = fixture(dir.path());
    let out = dir.path().join("none.jsonl");
    let summary = stdout(&cfassay(&["generate", "--dataset", p(&data), "--model", p(&model), "--limit", "0", "--out", p(&out)]));
    assert_eq!(summary.trim(), "n=0 flipped=0 flip_rate=NA mean_steps=NA");
    assert_eq!(std::fs::read(&out).unwrap(), b"");
}

fn rating(trail: &str, annotator: &str, f: u8) -> String {
    serde_json::to_string(&Rating::new(trail, annotator, 4, 4, f).unwrap()).unwrap()
}

#[test]
fn risk_reports_match_hand_computation() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.jsonl");
    std::fs::write(&empty, "").unwrap();
    assert_eq!(stdout(&cfassay(&["risk", "--ratings", p(&empty)])).trim(), "no ratings");

    // alice: (0 + 2) / 2 = 1, bob: 4 / 1 = 4, aggregate (2 * 1 + 4) / 3 = 2.
    let ratings = dir.path().join("ratings.jsonl");
    let lines = [rating("t-1", "alice", 5), rating("t-2", "alice", 3), rating("t-1", "bob", 1)];
    std::fs::write(&ratings, lines.join("\n") + "\n").unwrap();
    let text = stdout(&cfassay(&["risk", "--ratings", p(&ratings)]));
    assert_eq!(
        text.lines().collect::<Vec<_>>(),
        ["annotator=alice risk=1.0000 count=2", "annotator=bob risk=4.0000 count=1", "aggregate=2.0000 total_count=3"]
    );
    let json: serde_json::Value = serde_json::from_str(&stdout(&cfassay(&["risk", "--ratings", p(&ratings), "--json"]))).unwrap();
    assert_eq!(json["aggregate"], 2.0);
    assert_eq!(json["total_count"], 3);
}

#[test]
fn failures_exit_non_zero() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.jsonl");
    for args in [
        vec!["risk", "--ratings", p(&missing)],
        vec!["generate", "--dataset", p(&missing), "--model", p(&missing), "--out", "x"],
        vec!["export", "--data-dir", p(&missing)],
        vec!["generate", "--dataset", p(&missing), "--model", "m", "--method", "beam", "--out", "x"],
    ] {
        let out = cfassay(&args);
        assert!(!out.status.success(), "{args:?}");
        assert!(!out.stderr.is_empty());
    }
    let bad = dir.path().join("bad.jsonl");
    std::fs::write(&bad, rating("t", "a", 3).replace("\"faithfulness\":3", "\"faithfulness\":9")).unwrap();
    assert!(!cfassay(&["risk", "--ratings", p(&bad)]).status.success());
}

#[test]
fn export_applies_filters() {
    let dir = tempfile::tempdir().unwrap();
    let (data, model_path) = fixture(dir.path());
    let model: LinearBagModel = serde_json::from_slice(&std::fs::read(&model_path).unwrap()).unwrap();
    let store_dir = dir.path().join("store");
    let store = Store::open(&store_dir).unwrap();
    let ds = store.ingest_dataset(&data, Some(DatasetFormat::Jsonl)).unwrap();
    store.register_model(Some("toy".into()), serde_json::json!({"kind": "ref:linear"})).unwrap();
    let template = PromptTemplate::default();
    let engine = TrailEngine::new(&model, None, &template);
    let mut expected = Vec::new();
    for seed in 0..4u64 {
        let session = store
            .create_session(NewSession {
                annotator_id: format!("a{seed}"),
                model_id: "toy".into(),
                dataset_id: ds.dataset_id.clone(),
                seed: Some(seed),
                filler_id: None,
            })
            .unwrap();
        let dataset = store.dataset(&ds.dataset_id).unwrap();
        let (instance, _) = dataset.rationalized(dataset.instance(&session.instance_id).unwrap(), &model).unwrap();
        let meta = TrailMeta {
            model_id: "toy".into(),
            session_id: Some(session.session_id.clone()),
            seed: Some(seed),
        };
        let trail = engine.generate_trail(&instance, 0, &GenerationConfig::default(), &meta).unwrap();
        store.save_trail(&trail).unwrap();
        let plausibility = seed as u8 + 1;
        store
            .save_rating(&Rating::new(&trail.trail_id, &session.annotator_id, plausibility, 3, 3).unwrap())
            .unwrap();
        expected.push((trail.trail_id.clone(), plausibility, trail.flipped));
    }
    drop(store);

    let records = |extra: &[&str]| -> Vec<serde_json::Value> {
        let mut args = vec!["export", "--data-dir", p(&store_dir)];
        args.extend_from_slice(extra);
        stdout(&cfassay(&args)).lines().map(|l| serde_json::from_str(l).unwrap()).collect()
    };
    let ids = |rs: Vec<serde_json::Value>| rs.iter().map(|r| r["trail_id"].as_str().unwrap().to_string()).collect::<Vec<_>>();
    let want = |f: &dyn Fn(&(String, u8, bool)) -> bool| {
        expected.iter().filter(|e| f(e)).map(|e| e.0.clone()).collect::<Vec<_>>()
    };
    assert_eq!(ids(records(&[])), want(&|_| true));
    assert_eq!(ids(records(&["--min-plausibility", "3"])), want(&|e| e.1 >= 3));
    assert_eq!(ids(records(&["--flipped-only"])), want(&|e| e.2));
    assert!(ids(records(&["--min-meaningfulness", "4"])).is_empty());

    let out = dir.path().join("export.jsonl");
    stdout(&cfassay(&["export", "--data-dir", p(&store_dir), "--out", p(&out)]));
    let rows: Vec<serde_json::Value> = read_jsonl(&out).unwrap();
    assert_eq!(rows.len(), 4);
    for r in rows {
        assert!(r["original"].is_string() && r["counterfactual"].is_string() && r["edits"].is_array());
    }
}

struct Killed(Child);

impl Drop for Killed {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

fn health(port: u16) -> Option<String> {
    let mut s = TcpStream::connect(("127.0.0.1", port)).ok()?;
    s.set_read_timeout(Some(Duration::from_secs(5))).ok()?;
    s.write_all(b"GET /health HTTP/1.1\r\nHost: localhost\r\nConnection: close\r\n\r\n").ok()?;
    let mut text = String::new();
    s.read_to_string(&mut text).ok()?;
    Some(text)
}

#[test]
fn serve_answers_health_probes() {
    let dir = tempfile::tempdir().unwrap();
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let child = Command::new(env!("CARGO_BIN_EXE_cfassay"))
        .args(["serve", "--data-dir", p(dir.path())])
        .env("CFASSAY_PORT", port.to_string())
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let _guard = Killed(child);
    let started = Instant::now();
    let reply = loop {
        if let Some(r) = health(port) {
            break r;
        }
        assert!(started.elapsed() < Duration::from_secs(20), "server did not come up on {port}");
        std::thread::sleep(Duration::from_millis(50));
    };
    assert!(reply.starts_with("HTTP/1.1 200"), "{reply}");
    assert!(reply.contains("ok"), "{reply}");
}
