// SPDX-License-Identifier: Apache-2.0

use std::io::{BufRead, BufReader};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use serde_json::Value;

use flowforge::api::{self, ApiConfig};
use flowforge_core::control::FlowDefinition;
use flowforge_core::engine::{Engine, EngineConfig};
use flowforge_core::model::Attributes;
use flowforge_core::processors::builtin_registry;

const TOKEN: &str = "t0ken";

struct Server {
    engine: Arc<Engine>,
    base: String,
    stop: Option<tokio::sync::oneshot::Sender<()>>,
    handle: Option<thread::JoinHandle<()>>,
    _dir: tempfile::TempDir,
    ui: tempfile::TempDir,
}

impl Server {
    fn start(flow: &str) -> Server {
        let dir = tempfile::tempdir().unwrap();
        let ui = tempfile::tempdir().unwrap();
        std::fs::write(ui.path().join("index.html"), "<html>console</html>").unwrap();
        let flow = FlowDefinition::from_yaml(&flow.replace("$OUT", dir.path().join("out").to_str().unwrap())).unwrap();
        let engine =
            Arc::new(Engine::open(EngineConfig::new(dir.path().join("state")), Arc::new(builtin_registry()), flow).unwrap());
        let (port_tx, port_rx) = std::sync::mpsc::channel();
        let (stop_tx, stop_rx) = tokio::sync::oneshot::channel::<()>();
        let config = ApiConfig {
            token: Some(TOKEN.into()),
            ui_dir: ui.path().to_path_buf(),
        };
        let e = engine.clone();
        let handle = thread::spawn(move || {
            let rt = tokio::runtime::Runtime::new().unwrap();
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
                port_tx.send(listener.local_addr().unwrap().port()).unwrap();
                api::serve(listener, e, config, async {
                    let _ = stop_rx.await;
                })
                .await
                .unwrap();
            });
        });
        let port = port_rx.recv().unwrap();
        Server {
            engine,
            base: format!("http://127.0.0.1:{port}"),
            stop: Some(stop_tx),
            handle: Some(handle),
            _dir: dir,
            ui,
        }
    }

    fn req(&self, method: &str, path: &str) -> ureq::Request {
        ureq::request(method, &format!("{}{path}", self.base)).set("Authorization", &format!("Bearer {TOKEN}"))
    }

    fn get(&self, path: &str) -> Value {
        self.req("GET", &format!("/api/v1{path}")).call().unwrap().into_json().unwrap()
    }

    fn post(&self, path: &str, body: &str) -> Result<Value, (u16, Value)> {
        match self.req("POST", &format!("/api/v1{path}")).send_string(body) {
            Ok(r) => Ok(r.into_json().unwrap()),
            Err(ureq::Error::Status(code, r)) => Err((code, r.into_json().unwrap())),
            Err(e) => panic!("{e}"),
        }
    }

    fn status_of(&self, method: &str, path: &str) -> u16 {
        match self.req(method, &format!("/api/v1{path}")).call() {
            Ok(r) => r.status(),
            Err(ureq::Error::Status(code, _)) => code,
            Err(e) => panic!("{e}"),
        }
    }

    fn push(&self, bodies: &[&str]) {
        let mut s = self.engine.session("src").unwrap();
        for b in bodies {
            let ff = s.create_with_content(Attributes::new(), b.as_bytes()).unwrap();
            s.transfer(&ff, "success").unwrap();
        }
        s.commit().unwrap();
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        if let Some(s) = self.stop.take() {
            let _ = s.send(());
        }
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

const FLOW: &str = "
processors:
  - {id: src, type: GenerateNews, state: STOPPED}
  - {id: store, type: PutFileStore, properties: {directory: '$OUT'}, schedule: event_driven}
  - {id: pub, type: PublishTopic, properties: {topic: news, partitions: 2}, schedule: event_driven}
connections:
  - {id: to_store, source: {processor: src, relationship: success}, destination: store, object_threshold: 2}
  - {id: to_pub, source: {processor: src, relationship: success}, destination: pub}
auto_terminate:
  store: [success, failure]
  pub: [failure]
";

#[test]
fn token_is_required() {
    let s = Server::start(FLOW);
    let url = format!("{}/api/v1/status", s.base);
    match ureq::get(&url).call() {
        Err(ureq::Error::Status(401, r)) => {
            let body: Value = r.into_json().unwrap();
            assert_eq!(body["error"], "unauthorized");
        }
        other => panic!("expected 401, got {other:?}"),
    }
    match ureq::get(&url).set("Authorization", "Bearer wrong").call() {
        Err(ureq::Error::Status(401, _)) => {}
        other => panic!("expected 401, got {other:?}"),
    }
    assert_eq!(ureq::get(&format!("{url}?token={TOKEN}")).call().unwrap().status(), 200);
    assert_eq!(s.status_of("GET", "/status"), 200);
}

#[test]
fn status_reports_thresholds_and_full_queues() {
    let s = Server::start(FLOW);
    s.engine.stop_component("store").unwrap();
    s.push(&["a", "bb", "ccc"]);
    let st = s.get("/status");
    let conns = st["connections"].as_array().unwrap();
    let store = conns.iter().find(|c| c["id"] == "to_store").unwrap();
    assert_eq!(store["queued_count"], 3);
    assert_eq!(store["queued_bytes"], 6);
    assert_eq!(store["object_threshold"], 2);
    assert_eq!(store["full"], true);
    let other = conns.iter().find(|c| c["id"] == "to_pub").unwrap();
    assert_eq!(other["object_threshold"], 10_000);
    assert_eq!(other["size_threshold"], 1u64 << 30);
    let stopped = st["processors"].as_array().unwrap().iter().find(|p| p["id"] == "store").unwrap();
    assert_eq!(stopped["state"], "STOPPED");

    let detail = s.get("/connections/to_store");
    assert_eq!(detail["status"]["full"], true);
    assert_eq!(detail["queued"].as_array().unwrap().len(), 3);
    assert_eq!(s.status_of("GET", "/connections/nope"), 404);
}

#[test]
fn start_and_stop() {
    let s = Server::start(FLOW);
    assert_eq!(s.post("/processors/store/stop", "").unwrap()["state"], "STOPPED");
    assert!(!s.engine.graph().processor("store").unwrap().is_running());
    s.push(&["x"]);
    s.engine.run_until_idle(100).unwrap();
    assert_eq!(s.engine.graph().connection("to_store").unwrap().queued_count(), 1);
    assert_eq!(s.post("/processors/store/start", "").unwrap()["state"], "RUNNING");
    s.engine.run_until_idle(100).unwrap();
    assert_eq!(s.engine.graph().connection("to_store").unwrap().queued_count(), 0);
    let (code, body) = s.post("/processors/ghost/start", "").unwrap_err();
    assert_eq!(code, 404);
    assert_eq!(body["error"], "unknown_component");
}

#[test]
fn properties_change_while_stopped() {
    let s = Server::start(FLOW);
    let put = |body: &str| match s
        .req("PUT", "/api/v1/processors/pub/properties")
        .set("Content-Type", "application/json")
        .send_string(body) {
        Ok(r) => r.status(),
        Err(ureq::Error::Status(c, _)) => c,
        Err(e) => panic!("{e}"),
    };
    assert_eq!(put(r#"{"topic": "other"}"#), 409);
    s.post("/processors/pub/stop", "").unwrap();
    assert_eq!(put(r#"{"topic": "other"}"#), 200);
    s.post("/processors/pub/start", "").unwrap();
    s.push(&["hello"]);
    s.engine.run_until_idle(100).unwrap();
    let page = s.get("/topics/other/partitions/0/records?from=0&max=10");
    let page1 = s.get("/topics/other/partitions/1/records?from=0&max=10");
    let total = page["records"].as_array().unwrap().len() + page1["records"].as_array().unwrap().len();
    assert_eq!(total, 1);
}

#[test]
fn flow_get_and_load() {
    let s = Server::start(FLOW);
    let flow = s.get("/flow");
    assert_eq!(flow["processors"].as_array().unwrap().len(), 3);
    let (code, body) = s
        .post(
            "/flow",
            "processors:\n  - {id: a, type: NoSuchType}\nconnections: []\n",
        )
        .unwrap_err();
    assert_eq!(code, 400);
    assert_eq!(body["error"], "invalid_flow");
    assert!(body["message"].as_str().unwrap().contains("NoSuchType"));
    let (code, _) = s.post("/flow", "processors: [").unwrap_err();
    assert_eq!(code, 400);

    // the same flow in JSON form, with the store's threshold raised
    let mut def = flow.clone();
    def["connections"][0]["object_threshold"] = 50.into();
    s.post("/flow", &def.to_string()).unwrap();
    assert_eq!(s.get("/flow")["connections"][0]["object_threshold"], 50);
}

#[test]
fn provenance_content_and_replay() {
    let s = Server::start(FLOW);
    s.push(&["abc"]);
    s.engine.run_until_idle(100).unwrap();
    let sends = s.get("/provenance?type=SEND&component=store");
    let events = sends["events"].as_array().unwrap();
    assert_eq!(events.len(), 1);
    let ev = &events[0];
    let id = ev["event_id"].as_u64().unwrap();
    let uuid = ev["flowfile_uuid"].as_str().unwrap().to_string();

    let bytes = {
        let mut out = Vec::new();
        let r = s.req("GET", &format!("/api/v1/provenance/{id}/content")).call().unwrap();
        assert_eq!(r.header("content-type"), Some("application/octet-stream"));
        std::io::Read::read_to_end(&mut r.into_reader(), &mut out).unwrap();
        out
    };
    assert_eq!(bytes, b"abc");

    let replayed = s.post(&format!("/provenance/{id}/replay"), "").unwrap();
    assert_eq!(replayed["connection"], "to_store");
    let new_uuid = replayed["flowfile_uuid"].as_str().unwrap();
    assert_ne!(new_uuid, uuid);
    s.engine.run_until_idle(100).unwrap();
    let lineage = s.get(&format!("/lineage/{new_uuid}"));
    let nodes = lineage["nodes"].as_array().unwrap();
    let replay = nodes.iter().find(|n| n["event_type"] == "REPLAY").unwrap();
    assert_eq!(replay["parent_uuids"][0], uuid.as_str());
    assert!(nodes.iter().any(|n| n["event_type"] == "CREATE" && n["flowfile_uuid"] == uuid.as_str()));
    assert!(nodes.iter().any(|n| n["event_type"] == "SEND" && n["flowfile_uuid"] == new_uuid));
    assert!(!lineage["edges"].as_array().unwrap().is_empty());

    assert_eq!(s.status_of("POST", "/provenance/999999/replay"), 404);
    assert_eq!(s.status_of("GET", "/provenance/999999/content"), 404);
    assert_eq!(s.status_of("GET", "/provenance/abc/content"), 400);
    assert_eq!(s.status_of("GET", "/provenance?type=BOGUS"), 400);
    assert_eq!(s.status_of("GET", "/lineage/not-a-uuid"), 404);
}

#[test]
fn topic_records() {
    let s = Server::start(FLOW);
    s.push(&["one", "two", "three"]);
    s.engine.run_until_idle(100).unwrap();
    let topics = s.get("/topics");
    let news = topics["topics"].as_array().unwrap().iter().find(|t| t["config"]["name"] == "news").unwrap();
    assert_eq!(news["partitions"].as_array().unwrap().len(), 2);
    let mut values = Vec::new();
    for p in 0..2 {
        let page = s.get(&format!("/topics/news/partitions/{p}/records?from=0&max=100"));
        assert_eq!(page["head"], 0);
        for r in page["records"].as_array().unwrap() {
            let raw = B64.decode(r["value"].as_str().unwrap()).unwrap();
            assert_eq!(r["value_text"].as_str().unwrap().as_bytes(), raw.as_slice());
            values.push(r["value_text"].as_str().unwrap().to_string());
        }
    }
    values.sort();
    assert_eq!(values, ["one", "three", "two"]);
    assert_eq!(s.status_of("GET", "/topics/none/partitions/0/records"), 404);
    assert_eq!(s.status_of("GET", "/topics/news/partitions/7/records"), 404);
}

#[test]
fn event_stream_pushes_status_then_queue_full() {
    let s = Server::start(FLOW);
    s.engine.stop_component("store").unwrap();
    let r = ureq::AgentBuilder::new()
        .timeout_read(Duration::from_secs(10))
        .build()
        .get(&format!("{}/api/v1/events", s.base))
        .set("Authorization", &format!("Bearer {TOKEN}"))
        .call()
        .unwrap();
    assert_eq!(r.header("content-type"), Some("text/event-stream"));
    let mut lines = BufReader::new(r.into_reader()).lines();
    let mut next_event = || {
        let mut name = String::new();
        loop {
            let line = lines.next().unwrap().unwrap();
            if let Some(n) = line.strip_prefix("event: ") {
                name = n.to_string();
            } else if let Some(d) = line.strip_prefix("data: ") {
                return (name.clone(), serde_json::from_str::<Value>(d).unwrap());
            }
        }
    };
    let (name, first) = next_event();
    assert_eq!(name, "status");
    assert!(first["connections"].is_array());
    s.push(&["1", "2"]);
    let (name, ev) = next_event();
    assert_eq!(name, "queue_full");
    assert_eq!(ev["connection"], "to_store");
    assert_eq!(ev["full"], true);
}

#[test]
fn console_files_under_ui() {
    let s = Server::start(FLOW);
    let body = ureq::get(&format!("{}/ui/", s.base)).call().unwrap().into_string().unwrap();
    assert_eq!(body, "<html>console</html>");
    std::fs::write(s.ui.path().join("app.js"), "x()").unwrap();
    let js = ureq::get(&format!("{}/ui/app.js", s.base)).call().unwrap();
    assert_eq!(js.into_string().unwrap(), "x()");
}
