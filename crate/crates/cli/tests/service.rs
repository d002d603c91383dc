use std::net::SocketAddr;
use std::sync::Arc;

use serde_json::{json, Value};
use triage_cli::server::{router, AppState};
use triage_core::synth::{generate, SynthSpec};
use triage_core::{Cascade, LabeledCase, MemoryBank, RunConfig, RunMode};

struct Service {
    addr: SocketAddr,
    agent: ureq::Agent,
    state: Arc<AppState>,
}

impl Service {
    fn start(bank: MemoryBank, cases: Vec<LabeledCase>) -> Self {
        let cfg = RunConfig { mode: RunMode::Online, ..RunConfig::default() };
        let state = AppState::new(Cascade::new(cfg).unwrap(), bank, cases);
        let app = router(state.clone());
        let (tx, rx) = std::sync::mpsc::channel();
        std::thread::spawn(move || {
            let rt = tokio::runtime::Runtime::new().unwrap();
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
                tx.send(listener.local_addr().unwrap()).unwrap();
                axum::serve(listener, app).await.unwrap();
            });
        });
        let agent = ureq::Agent::config_builder().http_status_as_error(false).build().into();
        Service { addr: rx.recv().unwrap(), agent, state }
    }

    fn get(&self, path: &str) -> (u16, Value) {
        let mut r = self.agent.get(format!("http://{}{path}", self.addr)).call().unwrap();
        (r.status().as_u16(), r.body_mut().read_json().unwrap())
    }

    fn post(&self, path: &str, body: Value) -> (u16, Value) {
        let mut r = self.agent.post(format!("http://{}{path}", self.addr)).send_json(body).unwrap();
        (r.status().as_u16(), r.body_mut().read_json().unwrap())
    }
}

fn population(n: usize) -> Vec<LabeledCase> {
    let mut spec = SynthSpec::acceptance(5);
    spec.n_cases = n;
    generate(&spec).unwrap()
}

fn seeded(n_bank: usize, n_queue: usize) -> (MemoryBank, Vec<LabeledCase>) {
    let cases = population(n_bank + n_queue);
    let bank = MemoryBank::in_memory(5);
    for c in &cases[..n_bank] {
        bank.append(triage_core::Trajectory::seeded(c).unwrap()).unwrap();
    }
    (bank, cases[n_bank..].to_vec())
}

#[test]
fn bank_stats_after_seeding_twenty() {
    let (bank, queue) = seeded(20, 3);
    let s = Service::start(bank, queue);
    let (code, stats) = s.get("/bank/stats");
    assert_eq!(code, 200);
    assert_eq!(stats["count"], 20);
    assert_eq!(stats["embedding_dim"], 16);
    let hist: u64 =
        stats["outcome_histogram"].as_object().unwrap().values().map(|v| v.as_u64().unwrap()).sum();
    assert_eq!(hist, 20);
}

#[test]
fn second_confirmation_conflicts() {
    let (bank, queue) = seeded(30, 2);
    let s = Service::start(bank, queue);
    let (code, next) = s.get("/queue/next");
    assert_eq!(code, 200);
    let id = next["case"]["state"]["case_id"].as_str().unwrap().to_string();
    assert_eq!(next["pending"], 2);

    // Presenting again returns the same case until it is confirmed.
    let (_, again) = s.get("/queue/next");
    assert_eq!(again["case"]["state"]["case_id"], id.as_str());

    let (code, t) = s.post(&format!("/cases/{id}/pathology"), json!({"label": "benign_confirmed"}));
    assert_eq!(code, 200);
    assert_eq!(t["case_id"], id.as_str());
    assert_eq!(t["recorded_at"], 31);
    let (code, err) = s.post(&format!("/cases/{id}/pathology"), json!({"label": "malignant"}));
    assert_eq!(code, 409, "{err}");
    assert_eq!(s.get("/bank/stats").1["count"], 31);

    let (code, view) = s.get(&format!("/cases/{id}"));
    assert_eq!(code, 200);
    assert_eq!(view["state"]["phase"], "finalized");
    assert_eq!(view["trajectory"]["outcome"]["label"], "benign_confirmed");
}

#[test]
fn unknown_cases_and_bad_labels() {
    let (bank, queue) = seeded(10, 1);
    let s = Service::start(bank, queue);
    assert_eq!(s.get("/cases/nope").0, 404);
    assert_eq!(s.post("/cases/nope/pathology", json!({"label": "malignant"})).0, 404);
    let (_, next) = s.get("/queue/next");
    let id = next["case"]["state"]["case_id"].as_str().unwrap().to_string();
    assert_eq!(s.post(&format!("/cases/{id}/pathology"), json!({"label": "cancer"})).0, 422);
    assert_eq!(s.post(&format!("/cases/{id}/pathology"), json!({"outcome": "malignant"})).0, 422);
    assert_eq!(s.get("/bank/stats").1["count"], 10);
}

#[test]
fn confirmed_case_is_retrieved_for_an_identical_successor() {
    let (bank, mut queue) = seeded(40, 1);
    let mut twin = queue[0].clone();
    twin.observation.case_id = "twin".into();
    queue.push(twin);
    let s = Service::start(bank, queue);

    let (_, first) = s.get("/queue/next");
    let id = first["case"]["state"]["case_id"].as_str().unwrap().to_string();
    let before = s.get("/bank/stats").1["count"].as_u64().unwrap();
    assert_eq!(s.post(&format!("/cases/{id}/pathology"), json!({"label": "malignant"})).0, 200);
    assert_eq!(s.get("/bank/stats").1["count"].as_u64().unwrap(), before + 1);

    let (_, second) = s.get("/queue/next");
    assert_eq!(second["case"]["state"]["case_id"], "twin");
    let top = &second["case"]["previews"]["screening"][0];
    assert_eq!(top["case_id"], id.as_str());
    assert_eq!(top["outcome"], "malignant");
    let used = &second["case"]["state"]["screening"]["neighbors"];
    assert!(used.as_array().unwrap().iter().any(|n| n["case_id"] == id.as_str()));
}

#[test]
fn queue_drains_and_metrics_track_confirmations() {
    let (bank, queue) = seeded(40, 3);
    let truth: Vec<_> = queue.iter().map(|c| c.outcome.unwrap().label).collect();
    let s = Service::start(bank, queue);
    for label in truth {
        let (_, next) = s.get("/queue/next");
        let id = next["case"]["state"]["case_id"].as_str().unwrap().to_string();
        let escalated = next["case"]["state"]["screening"]["decision"]["action"] == "escalate";
        assert_eq!(next["case"]["previews"]["diagnostic"].is_null(), !escalated);
        let label = serde_json::to_value(label).unwrap();
        assert_eq!(s.post(&format!("/cases/{id}/pathology"), json!({ "label": label })).0, 200);
    }
    let (code, done) = s.get("/queue/next");
    assert_eq!(code, 200);
    assert!(done["case"].is_null());
    assert_eq!(done["pending"], 0);
    let (_, m) = s.get("/metrics");
    assert_eq!(m["n_cases"], 3);
    let (_, cfg) = s.get("/config");
    assert_eq!(cfg["mode"], "online");
    assert_eq!(s.state.bank().snapshot().len(), 43);
}

#[test]
fn bank_file_holds_only_confirmed_appends() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bank.jsonl");
    let cases = population(30);
    let bank = MemoryBank::create(&path, 5, None).unwrap();
    for c in &cases[..25] {
        bank.append(triage_core::Trajectory::seeded(c).unwrap()).unwrap();
    }
    let s = Service::start(bank, cases[25..].to_vec());
    for _ in 0..3 {
        s.get("/queue/next");
    }
    s.get("/metrics");
    let lines = || std::fs::read_to_string(&path).unwrap().lines().count();
    assert_eq!(lines(), 26);
    let (_, next) = s.get("/queue/next");
    let id = next["case"]["state"]["case_id"].as_str().unwrap().to_string();
    s.post(&format!("/cases/{id}/pathology"), json!({"label": "normal_confirmed"}));
    assert_eq!(lines(), 27);
    let reopened = MemoryBank::open(&path).unwrap().snapshot();
    assert_eq!(reopened.get(&id).unwrap().outcome.label, triage_core::OutcomeLabel::NormalConfirmed);
}

/// Minimal structural check: types, required keys, enums, `$ref` and
/// nullable `oneOf`. Enough to catch drift between the schema and the server.
fn conforms(doc: &Value, schema: &Value, v: &Value, at: &str) -> Result<(), String> {
    if let Some(r) = schema["$ref"].as_str() {
        let name = r.rsplit('/').next().unwrap();
        return conforms(doc, &doc["components"]["schemas"][name], v, at);
    }
    if let Some(alts) = schema["oneOf"].as_array() {
        return if alts.iter().any(|s| conforms(doc, s, v, at).is_ok()) {
            Ok(())
        } else {
            Err(format!("{at}: matches no alternative"))
        };
    }
    if let Some(allowed) = schema["enum"].as_array() {
        if !allowed.contains(v) {
            return Err(format!("{at}: {v} not in enum"));
        }
    }
    let type_ok = match schema["type"].as_str() {
        Some("object") => v.is_object(),
        Some("array") => v.is_array(),
        Some("string") => v.is_string(),
        Some("number") => v.is_number(),
        Some("integer") => v.is_i64() || v.is_u64(),
        Some("boolean") => v.is_boolean(),
        Some("null") => v.is_null(),
        _ => true,
    };
    if !type_ok {
        return Err(format!("{at}: expected {}, got {v}", schema["type"]));
    }
    if let Some(obj) = v.as_object() {
        for key in schema["required"].as_array().into_iter().flatten() {
            if !obj.contains_key(key.as_str().unwrap()) {
                return Err(format!("{at}: missing `{key}`"));
            }
        }
        for (k, field) in obj {
            let sub = &schema["properties"][k];
            if !sub.is_null() {
                conforms(doc, sub, field, &format!("{at}.{k}"))?;
            } else if schema["additionalProperties"].is_object() {
                conforms(doc, &schema["additionalProperties"], field, &format!("{at}.{k}"))?;
            } else if schema["additionalProperties"] == Value::Bool(false) {
                return Err(format!("{at}: unexpected `{k}`"));
            }
        }
    }
    if let Some(items) = v.as_array() {
        for (i, item) in items.iter().enumerate() {
            conforms(doc, &schema["items"], item, &format!("{at}[{i}]"))?;
        }
    }
    Ok(())
}

#[test]
fn responses_match_published_schema() {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../docs/openapi.json");
    let doc: Value = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    let (bank, queue) = seeded(60, 3);
    let s = Service::start(bank, queue);
    let check = |route: &str, method: &str, code: u16, body: &Value| {
        let schema = &doc["paths"][route][method]["responses"][code.to_string()]["content"]
            ["application/json"]["schema"];
        assert!(!schema.is_null(), "{method} {route} {code} is undocumented");
        conforms(&doc, schema, body, route).unwrap();
    };

    let (code, next) = s.get("/queue/next");
    check("/queue/next", "get", code, &next);
    let id = next["case"]["state"]["case_id"].as_str().unwrap().to_string();
    let (code, view) = s.get(&format!("/cases/{id}"));
    check("/cases/{id}", "get", code, &view);
    let (code, t) = s.post(&format!("/cases/{id}/pathology"), json!({"label": "benign_confirmed"}));
    check("/cases/{id}/pathology", "post", code, &t);
    for (code, body) in [
        s.post(&format!("/cases/{id}/pathology"), json!({"label": "malignant"})),
        s.post("/cases/nope/pathology", json!({"label": "malignant"})),
        s.post(&format!("/cases/{id}/pathology"), json!({"label": "maybe"})),
    ] {
        check("/cases/{id}/pathology", "post", code, &body);
    }
    for route in ["/bank/stats", "/metrics", "/config"] {
        let (code, body) = s.get(route);
        check(route, "get", code, &body);
    }
    let (code, body) = s.get("/cases/nope");
    check("/cases/{id}", "get", code, &body);
}
