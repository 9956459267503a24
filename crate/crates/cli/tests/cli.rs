// SPDX-License-Identifier: Apache-2.0

use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};
use std::time::{Duration, Instant};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_flowforge"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).env_remove("FLOWFORGE_TOKEN").output().unwrap()
}

fn text(o: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr))
}

fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

#[test]
fn shipped_flows_validate() {
    let mut n = 0;
    for entry in std::fs::read_dir(repo_root().join("flows")).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "yaml") {
            let out = run(&["validate", path.to_str().unwrap()]);
            assert_eq!(out.status.code(), Some(0), "{}: {}", path.display(), text(&out));
            n += 1;
        }
    }
    assert!(n >= 3);
}

#[test]
fn validate_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let write = |name: &str, body: &str| {
        let p = dir.path().join(name);
        std::fs::write(&p, body).unwrap();
        p.to_str().unwrap().to_string()
    };
    let bogus = write(
        "bogus.yaml",
        "processors:\n  - {id: g, type: GenerateNews}\n  - {id: s, type: PutFileStore, properties: {directory: x}}\n\
         connections:\n  - {id: c, source: {processor: g, relationship: bogus}, destination: s}\n",
    );
    let out = run(&["validate", &bogus]);
    assert_eq!(out.status.code(), Some(1));
    let msg = text(&out);
    assert!(msg.contains("error") && msg.contains("bogus") && msg.contains('g'), "{msg}");

    let unknown = write("unknown.yaml", "processors:\n  - {id: a, type: Teleport}\n");
    assert_eq!(run(&["validate", &unknown]).status.code(), Some(1));

    let garbled = write("garbled.yaml", "processors: [\n");
    assert_eq!(run(&["validate", &garbled]).status.code(), Some(1));

    let missing = dir.path().join("missing.yaml");
    assert_eq!(run(&["validate", missing.to_str().unwrap()]).status.code(), Some(2));

    // a retry loop is only a warning
    let retry = write(
        "retry.yaml",
        "processors:\n  - {id: g, type: GenerateNews}\n  - {id: p, type: PublishTopic, properties: {topic: t}}\n\
         connections:\n  - {id: in, source: {processor: g, relationship: success}, destination: p}\n  \
         - {id: retry, source: {processor: p, relationship: failure}, destination: p}\n",
    );
    let out = run(&["validate", &retry]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out));
    assert!(text(&out).contains("warning"));
}

#[test]
fn run_rejects_invalid_flow() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.yaml");
    std::fs::write(&p, "processors:\n  - {id: a, type: Teleport}\n").unwrap();
    let state = dir.path().join("state");
    let out = run(&["run", p.to_str().unwrap(), "--state-dir", state.to_str().unwrap(), "--port", "0"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn client_commands_without_server_fail_with_runtime_code() {
    // bind then drop to find a port nothing listens on
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port().to_string();
    for args in [
        vec!["status"],
        vec!["lineage", "x"],
        vec!["replay", "1"],
        vec!["topics", "tail", "news"],
    ] {
        let mut a = args.clone();
        a.extend(["--port", &port]);
        let out = run(&a);
        assert_eq!(out.status.code(), Some(2), "{args:?}: {}", text(&out));
    }
}

struct Running {
    child: Child,
    port: u16,
    token: &'static str,
}

impl Running {
    fn start(flow: &Path, state: &Path, token: &'static str) -> Running {
        let mut child = bin()
            .args(["run", flow.to_str().unwrap(), "--state-dir", state.to_str().unwrap()])
            .args(["--port", "0", "--workers", "2", "--token", token])
            .stderr(Stdio::piped())
            .stdout(Stdio::null())
            .spawn()
            .unwrap();
        let stderr = child.stderr.take().unwrap();
        let mut lines = BufReader::new(stderr).lines();
        let port = loop {
            let line = lines.next().expect("server exited").unwrap();
            if let Some(addr) = line.strip_prefix("listening on http://") {
                break addr.rsplit(':').next().unwrap().parse().unwrap();
            }
        };
        std::thread::spawn(move || for _ in lines {});
        Running { child, port, token }
    }

    fn cli(&self, args: &[&str]) -> Output {
        let port = self.port.to_string();
        bin().args(args).args(["--port", &port, "--token", self.token]).output().unwrap()
    }

    fn stop(mut self) -> Option<i32> {
        // SIGTERM through the shell's kill, so the server shuts down cleanly
        Command::new("kill").arg(self.child.id().to_string()).status().unwrap();
        let deadline = Instant::now() + Duration::from_secs(20);
        loop {
            if let Some(s) = self.child.try_wait().unwrap() {
                return s.code();
            }
            assert!(Instant::now() < deadline, "server did not stop");
            std::thread::sleep(Duration::from_millis(50));
        }
    }
}

impl Drop for Running {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

fn wait_until(what: &str, mut f: impl FnMut() -> bool) {
    let deadline = Instant::now() + Duration::from_secs(30);
    while !f() {
        assert!(Instant::now() < deadline, "timed out waiting for {what}");
        std::thread::sleep(Duration::from_millis(100));
    }
}

#[cfg(unix)]
#[test]
fn run_status_tail_lineage_replay() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("out");
    let flow = dir.path().join("flow.yaml");
    std::fs::write(
        &flow,
        format!(
            "processors:
  - {{id: gen, type: GenerateNews, properties: {{rate_per_sec: 50, max_articles: 5, seed: 3}}}}
  - {{id: pub, type: PublishTopic, properties: {{topic: news, partitions: 1}}, schedule: event_driven}}
  - {{id: store, type: PutFileStore, properties: {{directory: '{}'}}, schedule: event_driven}}
connections:
  - {{id: to_pub, source: {{processor: gen, relationship: success}}, destination: pub}}
  - {{id: to_store, source: {{processor: gen, relationship: success}}, destination: store}}
auto_terminate:
  pub: [failure]
  store: [success, failure]
",
            out_dir.display()
        ),
    )
    .unwrap();
    let state = dir.path().join("state");
    let server = Running::start(&flow, &state, "s3cret");

    let files = || std::fs::read_dir(&out_dir).map_or(0, |d| d.count());
    wait_until("five stored files", || files() == 5);

    let status = server.cli(&["status"]);
    assert_eq!(status.status.code(), Some(0), "{}", text(&status));
    let s = String::from_utf8_lossy(&status.stdout).to_string();
    assert!(s.contains("GenerateNews") && s.contains("0 / 10000"), "{s}");

    let json = server.cli(&["status", "--json"]);
    let v: serde_json::Value = serde_json::from_slice(&json.stdout).unwrap();
    assert_eq!(v["totals"]["created"], 10);

    let records = || {
        let tail = server.cli(&["topics", "tail", "news"]);
        assert_eq!(tail.status.code(), Some(0), "{}", text(&tail));
        String::from_utf8_lossy(&tail.stdout).lines().filter(|l| l.starts_with("0/")).count()
    };
    wait_until("five topic records", || records() == 5);

    let uuid = std::fs::read_dir(&out_dir).unwrap().next().unwrap().unwrap().file_name();
    let uuid = uuid.to_str().unwrap();
    let lineage = server.cli(&["lineage", uuid]);
    let l = String::from_utf8_lossy(&lineage.stdout).to_string();
    assert_eq!(lineage.status.code(), Some(0), "{}", text(&lineage));
    assert!(l.contains("SEND") && l.contains("file://"), "{l}");

    let lj = server.cli(&["lineage", uuid, "--json"]);
    let v: serde_json::Value = serde_json::from_slice(&lj.stdout).unwrap();
    let send = v["nodes"]
        .as_array()
        .unwrap()
        .iter()
        .find(|n| n["event_type"] == "SEND" && n["flowfile_uuid"] == uuid)
        .unwrap()
        .clone();
    let event = send["event_id"].as_u64().unwrap().to_string();
    let replay = server.cli(&["replay", &event]);
    assert_eq!(replay.status.code(), Some(0), "{}", text(&replay));
    assert!(String::from_utf8_lossy(&replay.stdout).contains("to_store"));
    wait_until("the replayed file", || files() == 6);

    assert_eq!(server.cli(&["replay", "999999"]).status.code(), Some(2));
    assert_eq!(server.cli(&["lineage", "no-such-uuid"]).status.code(), Some(2));
    let wrong_token = bin()
        .args(["status", "--port", &server.port.to_string(), "--token", "nope"])
        .output()
        .unwrap();
    assert_eq!(wrong_token.status.code(), Some(2));

    assert_eq!(server.stop(), Some(0));

    // state survives a restart: the topic still holds the five records.
    // The generator keeps no state of its own, so it stays stopped here.
    let body = std::fs::read_to_string(&flow).unwrap();
    std::fs::write(&flow, body.replace("seed: 3}}", "seed: 3}, state: STOPPED}")).unwrap();
    let server = Running::start(&flow, &state, "s3cret");
    let tail = server.cli(&["topics", "tail", "news", "-n", "100"]);
    let t = String::from_utf8_lossy(&tail.stdout).to_string();
    assert_eq!(t.lines().filter(|l| l.starts_with("0/")).count(), 5, "{t}");
    assert_eq!(server.stop(), Some(0));
}
