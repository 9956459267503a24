// SPDX-License-Identifier: Apache-2.0

mod common;

use std::collections::BTreeSet;
use std::io::Write;
use std::net::TcpStream;
use std::time::{Duration, Instant};

use common::{flow, Harness, T0};
use flowforge_core::clock::Clock;
use flowforge_core::control::{validate_flow, FlowDefinition};
use flowforge_core::distribution::TopicConfig;
use flowforge_core::engine::{Engine, EngineConfig, EngineError};
use flowforge_core::fault::CrashPoint;
use flowforge_core::model::ProvenanceEventType as Ev;
use flowforge_core::processors::builtin_registry;
use flowforge_core::repo::ProvenanceQuery;

fn kinds(h: &Harness, uuid: &str) -> Vec<Ev> {
    h.engine
        .query(&ProvenanceQuery::by_uuid(uuid))
        .unwrap()
        .into_iter()
        .map(|e| e.event_type)
        .collect()
}

// ---- MergeContent

fn merge(props: &[(&str, &str)]) -> Harness {
    Harness::new("MergeContent", props, &["merged", "original", "failure"])
}

#[test]
fn merge_three_with_newlines() {
    // equal timestamps fall back to uuid order; push one at a time for a fixed order
    let h = merge(&[("min_entries", "3"), ("max_entries", "3"), ("demarcator", "\\n")]);
    let mut parents = Vec::new();
    for c in ["a", "b", "c"] {
        parents.push(h.push(c, &[]).uuid);
        h.clock.advance(1);
        h.run();
    }
    let merged = h.out("merged");
    assert_eq!(merged.len(), 1);
    assert_eq!(h.text(&merged[0]), "a\nb\nc");
    assert_eq!(merged[0].attribute("merge.count"), Some("3"));
    assert_eq!(h.out("original").len(), 3);
    let join = h.engine.query(&ProvenanceQuery::by_uuid(&merged[0].uuid)).unwrap().remove(0);
    assert_eq!(join.event_type, Ev::Join);
    assert_eq!(join.parent_uuids.iter().collect::<BTreeSet<_>>(), parents.iter().collect());
}

#[test]
fn merge_flushes_at_size() {
    let h = merge(&[("max_bin_bytes", "4"), ("max_entries", "100")]);
    for c in ["aa", "bb", "cc"] {
        h.push(c, &[]);
        h.clock.advance(1);
        h.run();
    }
    assert_eq!(h.texts("merged"), vec!["aabb"]);
    assert_eq!(h.out("original").len(), 2);
    // "cc" waits in the open bin, which is not a queue
    let c = h.engine.conservation();
    assert_eq!(c.created - c.dropped - c.queued, 1);
    h.engine.shutdown().unwrap();
    assert_eq!(h.queued("in"), 1);
}

#[test]
fn merge_flushes_on_age() {
    let h = merge(&[("min_entries", "1"), ("max_entries", "10"), ("max_bin_age_ms", "500")]);
    h.push("x", &[]);
    h.clock.advance(1);
    h.push("y", &[]);
    h.run();
    assert!(h.out("merged").is_empty());
    h.clock.advance(499);
    h.run();
    assert!(h.out("merged").is_empty());
    h.clock.advance(1);
    h.run();
    assert_eq!(h.texts("merged"), vec!["xy"]);
}

#[test]
fn merge_age_waits_for_min_entries() {
    let h = merge(&[("min_entries", "2"), ("max_entries", "10"), ("max_bin_age_ms", "100")]);
    h.push("x", &[]);
    h.run();
    h.clock.advance(1_000);
    h.run();
    assert!(h.out("merged").is_empty());
    h.push("y", &[]);
    h.run();
    assert_eq!(h.texts("merged"), vec!["xy"]);
}

#[test]
fn merge_oversized_input_fails() {
    let h = merge(&[("max_bin_bytes", "3")]);
    h.push("toolong", &[]);
    h.run();
    assert_eq!(h.texts("failure"), vec!["toolong"]);
}

#[test]
fn merge_keeps_common_attributes() {
    let h = merge(&[("min_entries", "2"), ("max_entries", "2")]);
    h.push("1", &[("lang", "en"), ("k", "a")]);
    h.clock.advance(1);
    h.push("2", &[("lang", "en"), ("k", "b")]);
    h.run();
    let m = &h.out("merged")[0];
    assert_eq!(m.attribute("lang"), Some("en"));
    assert_eq!(m.attribute("k"), None);
}

// ---- DetectDuplicate

#[test]
fn dedup_routes_repeats() {
    let h = Harness::new(
        "DetectDuplicate",
        &[("key_expression", "${k}")],
        &["duplicate", "non-duplicate", "failure"],
    );
    for k in ["a", "b", "a"] {
        h.push(k, &[("k", k)]);
        h.clock.advance(1);
        h.run();
    }
    assert_eq!(h.texts("non-duplicate"), vec!["a", "b"]);
    assert_eq!(h.texts("duplicate"), vec!["a"]);
}

#[test]
fn dedup_age_off() {
    let h = Harness::new(
        "DetectDuplicate",
        &[("key_expression", "${k}"), ("age_off_ms", "1000")],
        &["duplicate", "non-duplicate", "failure"],
    );
    h.push("a", &[("k", "a")]);
    h.run();
    h.clock.advance(1001);
    h.push("a", &[("k", "a")]);
    h.run();
    assert_eq!(h.out("non-duplicate").len(), 2);
    assert!(h.out("duplicate").is_empty());
}

#[test]
fn dedup_capacity_one_evicts() {
    let h = Harness::new(
        "DetectDuplicate",
        &[("key_expression", "${k}"), ("cache_capacity", "1")],
        &["duplicate", "non-duplicate", "failure"],
    );
    for k in ["a", "b", "a"] {
        h.push(k, &[("k", k)]);
        h.clock.advance(1);
        h.run();
    }
    assert_eq!(h.out("non-duplicate").len(), 3);
}

#[test]
fn dedup_eval_error_goes_to_failure() {
    let h = Harness::new(
        "DetectDuplicate",
        &[("key_expression", "${k:toNumber():plus(1)}")],
        &["duplicate", "non-duplicate", "failure"],
    );
    h.push("x", &[("k", "not-a-number")]);
    h.run();
    assert_eq!(h.out("failure").len(), 1);
}

// ---- FilterArticles / RouteOnAttribute

#[test]
fn filter_examples() {
    let h = Harness::new(
        "FilterArticles",
        &[("predicate_expression", "${lang:equals('en')}")],
        &["matched", "unmatched", "failure"],
    );
    h.push("en", &[("lang", "en")]);
    h.push("fr", &[("lang", "fr")]);
    h.push("none", &[]);
    h.run();
    assert_eq!(h.texts("matched"), vec!["en"]);
    assert_eq!(h.out("unmatched").len(), 2);
}

#[test]
fn route_first_match_wins() {
    let h = Harness::new(
        "RouteOnAttribute",
        &[
            ("english", "${lang:equals('en')}"),
            ("french", "${lang:equals('fr')}"),
            ("latin", "${lang:startsWith('f')}"),
        ],
        &["english", "french", "latin", "unmatched", "failure"],
    );
    let fr = h.push("fr", &[("lang", "fr")]);
    h.push("de", &[("lang", "de")]);
    h.run();
    assert_eq!(h.texts("french"), vec!["fr"]);
    assert!(h.out("latin").is_empty());
    assert_eq!(h.texts("unmatched"), vec!["de"]);
    let route = h
        .engine
        .query(&ProvenanceQuery::by_uuid(&fr.uuid))
        .unwrap()
        .into_iter()
        .rfind(|e| e.event_type == Ev::Route)
        .unwrap();
    assert!(route.details.contains("french"));
}

#[test]
fn route_needs_a_connection_for_each_route() {
    let reg = builtin_registry();
    let mut f = flow("RouteOnAttribute", &[("english", "${lang:equals('en')}")], &["unmatched", "failure"], "event_driven");
    let diags = validate_flow(&f, &reg);
    assert!(diags.iter().any(|d| d.message.contains("english")), "{diags:?}");
    f.auto_terminate.insert("p".into(), vec!["english".into()]);
    assert!(!flowforge_core::control::flow::has_errors(&validate_flow(&f, &reg)));
}

// ---- EnrichLookup

fn enrich(table: &std::path::Path, on_miss: &str) -> Harness {
    Harness::new(
        "EnrichLookup",
        &[
            ("table_path", table.to_str().unwrap()),
            ("key_expression", "${source.name}"),
            ("target_attribute", "source.full"),
            ("on_miss", on_miss),
        ],
        &["matched", "unmatched", "failure"],
    )
}

#[test]
fn enrich_hit_and_miss() {
    let dir = tempfile::tempdir().unwrap();
    let table = dir.path().join("t.tsv");
    std::fs::write(&table, "# sources\nnyt\tNew York Times\n").unwrap();
    let h = enrich(&table, "unmatched");
    h.push("1", &[("source.name", "nyt")]);
    h.push("2", &[("source.name", "bbc")]);
    h.run();
    assert_eq!(h.out("matched")[0].attribute("source.full"), Some("New York Times"));
    let miss = &h.out("unmatched")[0];
    assert_eq!(miss.attribute("source.full"), None);
}

#[test]
fn enrich_reloads_changed_table() {
    let dir = tempfile::tempdir().unwrap();
    let table = dir.path().join("t.tsv");
    std::fs::write(&table, "nyt\tNew York Times\n").unwrap();
    let h = enrich(&table, "unmatched");
    h.push("1", &[("source.name", "bbc")]);
    h.run();
    assert_eq!(h.out("unmatched").len(), 1);
    std::fs::write(&table, "nyt\tNew York Times\nbbc\tBritish Broadcasting Corporation\n").unwrap();
    h.push("2", &[("source.name", "bbc")]);
    h.run();
    assert_eq!(h.out("matched")[0].attribute("source.full"), Some("British Broadcasting Corporation"));
}

#[test]
fn enrich_pass_on_miss() {
    let dir = tempfile::tempdir().unwrap();
    let table = dir.path().join("t.tsv");
    std::fs::write(&table, "nyt\tNew York Times\n").unwrap();
    let h = enrich(&table, "pass");
    h.push("1", &[("source.name", "bbc")]);
    h.run();
    assert_eq!(h.out("matched").len(), 1);
}

#[test]
fn enrich_missing_table_fails_start() {
    let dir = tempfile::tempdir().unwrap();
    let f = flow(
        "EnrichLookup",
        &[
            ("table_path", dir.path().join("absent").to_str().unwrap()),
            ("key_expression", "${k}"),
            ("target_attribute", "v"),
        ],
        &["matched", "unmatched", "failure"],
        "event_driven",
    );
    let cfg = EngineConfig::new(dir.path().join("state"));
    assert!(matches!(
        Engine::open(cfg, std::sync::Arc::new(builtin_registry()), f),
        Err(EngineError::StartFailed { .. })
    ));
}

// ---- ControlRate

#[test]
fn rate_five_per_second() {
    let h = Harness::timer("ControlRate", &[("max_per_sec", "5")], &["success"], false);
    let items: Vec<String> = (0..20).map(|i| i.to_string()).collect();
    let refs: Vec<(&str, &[(&str, &str)])> = items.iter().map(|s| (s.as_str(), &[][..])).collect();
    h.push_many(&refs);
    for _ in 0..100 {
        h.run();
        h.clock.advance(10);
    }
    // t0 .. t0+990 is inside the first second
    assert_eq!(h.out("success").len(), 5);
    h.clock.set(T0 + 1_000);
    h.run();
    assert_eq!(h.out("success").len(), 10);
}

#[test]
fn rate_under_limit_and_burst() {
    let h = Harness::new("ControlRate", &[("max_per_sec", "5")], &["success"]);
    h.push_many(&[("a", &[]), ("b", &[]), ("c", &[])]);
    h.run();
    assert_eq!(h.out("success").len(), 3);
    h.clock.advance(1_000);
    let items: Vec<(&str, &[(&str, &str)])> = vec![("x", &[]); 8];
    h.push_many(&items);
    h.run();
    assert_eq!(h.out("success").len(), 8);
}

// ---- PublishTopic

#[test]
fn publish_first_offset_and_drop() {
    let mut f = flow("PublishTopic", &[("topic", "news")], &["failure"], "event_driven");
    f.topics.push(TopicConfig::new("news").with_partitions(1));
    let h = Harness::with_flow(f);
    let ff = h.push("x", &[]);
    h.run();
    let recs = h.engine.topics().fetch("news", 0, 0, 10).unwrap();
    assert_eq!(recs.len(), 1);
    assert_eq!(recs[0].offset, 0);
    assert_eq!(recs[0].value, b"x");
    let k = kinds(&h, &ff.uuid);
    let send = k.iter().position(|e| *e == Ev::Send).unwrap();
    assert_eq!(k[send + 1..], [Ev::Drop]);
    let ev = h.engine.query(&ProvenanceQuery::by_uuid(&ff.uuid)).unwrap();
    assert_eq!(ev[send].transit_uri.as_deref(), Some("topic://news/0/0"));
}

#[test]
fn publish_unavailable_routes_to_failure() {
    let h = Harness::new("PublishTopic", &[("topic", "news")], &["failure"]);
    h.engine.topics().set_available(false);
    let ff = h.push("x", &[]);
    h.run();
    let failed = h.out("failure");
    assert_eq!(failed.len(), 1);
    assert_eq!(failed[0].uuid, ff.uuid);
    assert!(failed[0].penalty_until.is_some());
}

#[test]
fn publish_crash_before_commit_duplicates() {
    let dir = tempfile::tempdir().unwrap();
    let f = flow("PublishTopic", &[("topic", "news"), ("partitions", "1")], &["failure"], "event_driven");
    let cfg = || EngineConfig::new(dir.path());
    let reg = std::sync::Arc::new(builtin_registry());
    {
        let e = Engine::open(cfg(), reg.clone(), f.clone()).unwrap();
        let mut s = e.session("src").unwrap();
        let ff = s.create_with_content(Default::default(), b"article").unwrap();
        s.transfer(&ff, "success").unwrap();
        s.commit().unwrap();
        e.faults().arm(CrashPoint::CommitBeforeJournal);
        assert!(e.run_until_idle(10).is_err());
    }
    let e = Engine::open(cfg(), reg, f).unwrap();
    e.run_until_idle(10).unwrap();
    let recs = e.topics().fetch("news", 0, 0, 10).unwrap();
    assert_eq!(recs.len(), 2);
    assert!(recs.iter().all(|r| r.value == b"article"));
    assert_eq!(e.graph().connection("in").unwrap().queued_count(), 0);
}

// ---- PutFileStore

#[test]
fn put_file_names_by_uuid() {
    let out = tempfile::tempdir().unwrap();
    let h = Harness::new("PutFileStore", &[("directory", out.path().to_str().unwrap())], &["success", "failure"]);
    let ff = h.push("hello", &[]);
    h.run();
    let path = out.path().join(&ff.uuid);
    assert_eq!(std::fs::read(&path).unwrap(), b"hello");
    let send = h
        .engine
        .query(&ProvenanceQuery::by_uuid(&ff.uuid))
        .unwrap()
        .into_iter()
        .find(|e| e.event_type == Ev::Send)
        .unwrap();
    assert!(send.transit_uri.unwrap().starts_with("file:///"));
}

#[test]
fn put_file_never_overwrites() {
    let out = tempfile::tempdir().unwrap();
    let h = Harness::new(
        "PutFileStore",
        &[("directory", out.path().to_str().unwrap()), ("filename_expression", "same.txt")],
        &["success", "failure"],
    );
    h.push("first", &[]);
    h.run();
    h.push("second", &[]);
    h.run();
    assert_eq!(std::fs::read(out.path().join("same.txt")).unwrap(), b"first");
    assert_eq!(h.texts("failure"), vec!["second"]);
    assert_eq!(std::fs::read_dir(out.path()).unwrap().count(), 1);
}

#[test]
fn put_file_rejects_path_names() {
    let out = tempfile::tempdir().unwrap();
    let h = Harness::new(
        "PutFileStore",
        &[("directory", out.path().to_str().unwrap()), ("filename_expression", "${name}")],
        &["success", "failure"],
    );
    h.push("x", &[("name", "../escape")]);
    h.run();
    assert_eq!(h.out("failure").len(), 1);
}

// ---- ListenLines

fn wait_for(h: &Harness, rel: &str, n: usize) -> usize {
    let deadline = Instant::now() + Duration::from_secs(5);
    loop {
        h.run();
        let got = h.out(rel).len();
        if got >= n || Instant::now() > deadline {
            return got;
        }
        std::thread::sleep(Duration::from_millis(5));
        // idle polling is paced by the engine clock
        h.clock.advance(10);
    }
}

fn free_port() -> u16 {
    std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port()
}

#[test]
fn listen_frames_lines() {
    let port = free_port();
    let h = Harness::timer("ListenLines", &[("port", &port.to_string())], &["success"], true);
    let mut c = TcpStream::connect(("127.0.0.1", port)).unwrap();
    c.write_all(b"a\nb\npartial").unwrap();
    drop(c);
    assert_eq!(wait_for(&h, "success", 2), 2);
    std::thread::sleep(Duration::from_millis(50));
    h.clock.advance(10);
    h.run();
    let mut texts = h.texts("success");
    texts.sort();
    assert_eq!(texts, vec!["a", "b"]);
    let ff = &h.out("success")[0];
    assert_eq!(ff.attribute("source.name"), Some(format!("socket:{port}").as_str()));
    assert_eq!(kinds(&h, &ff.uuid)[0], Ev::Receive);
}

#[test]
fn listen_thousand_lines_in_order() {
    let port = free_port();
    let h = Harness::timer("ListenLines", &[("port", &port.to_string())], &["success"], true);
    let mut c = TcpStream::connect(("127.0.0.1", port)).unwrap();
    let body: String = (0..1000).map(|i| format!("line-{i:04}\n")).collect();
    c.write_all(body.as_bytes()).unwrap();
    drop(c);
    assert_eq!(wait_for(&h, "success", 1000), 1000);
    // RECEIVE events carry ascending ids in arrival order
    let mut q = ProvenanceQuery::all();
    q.event_types = Some([Ev::Receive].into());
    q.limit = 5_000;
    let got: Vec<String> = h
        .engine
        .query(&q)
        .unwrap()
        .iter()
        .map(|e| String::from_utf8(h.engine.download_content(e.event_id).unwrap()).unwrap())
        .collect();
    let want: Vec<String> = (0..1000).map(|i| format!("line-{i:04}")).collect();
    assert_eq!(got, want);
}

#[test]
fn listen_bind_failure_fails_start() {
    let taken = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let port = taken.local_addr().unwrap().port().to_string();
    let dir = tempfile::tempdir().unwrap();
    let mut f = flow("ListenLines", &[("port", &port)], &["success"], "timer");
    f.connections.retain(|c| c.id != "in");
    f.auto_terminate.insert("src".into(), vec!["success".into()]);
    let cfg = EngineConfig::new(dir.path());
    assert!(matches!(
        Engine::open(cfg, std::sync::Arc::new(builtin_registry()), f),
        Err(EngineError::StartFailed { .. })
    ));
}

// ---- GenerateNews

#[test]
fn generate_ten_per_second() {
    let h = Harness::timer("GenerateNews", &[("rate_per_sec", "10"), ("seed", "7")], &["success"], true);
    while h.clock.now_ms() < T0 + 1_000 {
        h.run();
        h.clock.advance(7);
    }
    assert_eq!(h.out("success").len(), 10);
    let ff = &h.out("success")[0];
    assert_eq!(ff.attribute("source.name"), Some("twitter-sim"));
    let v: serde_json::Value = serde_json::from_str(&h.text(ff)).unwrap();
    for k in ["id", "source", "title", "body", "lang", "published_at"] {
        assert!(v.get(k).is_some(), "missing {k}");
    }
}

#[test]
fn generate_limits_rejected_at_validation() {
    let reg = builtin_registry();
    let kw: Vec<String> = (0..401).map(|i| format!("k{i}")).collect();
    let f = flow("GenerateNews", &[("keywords", &kw.join(","))], &["success"], "timer");
    assert!(flowforge_core::control::flow::has_errors(&validate_flow(&f, &reg)));
    let f = flow("GenerateNews", &[("keywords", &kw[..400].join(","))], &["success"], "timer");
    assert!(!flowforge_core::control::flow::has_errors(&validate_flow(&f, &reg)));
}

#[test]
fn unused_flow_helpers_parse() {
    // the harness flow is itself a valid definition
    let f = flow("ControlRate", &[("max_per_sec", "1")], &["success"], "event_driven");
    let yaml = f.to_yaml();
    assert_eq!(FlowDefinition::from_yaml(&yaml).unwrap(), f);
}

#[test]
fn random_inputs_never_leave_a_session_unaccounted() {
    use rand::{Rng, SeedableRng};
    let dir = tempfile::tempdir().unwrap();
    let table = dir.path().join("t.tsv");
    std::fs::write(&table, "a\tA\nb\tB\n").unwrap();
    let cases: Vec<(&str, Vec<(&str, &str)>, Vec<&str>)> = vec![
        ("DetectDuplicate", vec![("key_expression", "${k:toUpper()}"), ("cache_capacity", "3")], vec!["duplicate", "non-duplicate", "failure"]),
        ("FilterArticles", vec![("predicate_expression", "${k:toNumber():gt(3)}")], vec!["matched", "unmatched", "failure"]),
        ("RouteOnAttribute", vec![("r1", "${k:startsWith('a')}"), ("r2", "${k:length():ge(2)}")], vec!["r1", "r2", "unmatched", "failure"]),
        ("EnrichLookup", vec![("table_path", table.to_str().unwrap()), ("key_expression", "${k}"), ("target_attribute", "v")], vec!["matched", "unmatched", "failure"]),
        ("MergeContent", vec![("max_entries", "4"), ("max_bin_bytes", "10"), ("max_bin_age_ms", "50")], vec!["merged", "original", "failure"]),
        ("ControlRate", vec![("max_per_sec", "3")], vec!["success"]),
    ];
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
    for (ty, props, rels) in cases {
        let h = Harness::new(ty, &props, &rels);
        for _ in 0..200 {
            let k: String = (0..rng.gen_range(0..4)).map(|_| rng.gen_range(b'0'..=b'c') as char).collect();
            let body: String = (0..rng.gen_range(0..8)).map(|_| 'x').collect();
            if rng.gen_bool(0.2) {
                h.push(&body, &[]);
            } else {
                h.push(&body, &[("k", &k)]);
            }
            h.clock.advance(rng.gen_range(0..40));
            h.run();
        }
        let now = h.clock.now_ms();
        let errors = h.engine.graph().processor("p").unwrap().counters(now).errors;
        assert_eq!(errors, 0, "{ty}");
        h.engine.shutdown().unwrap();
        let c = h.engine.conservation();
        assert_eq!(c.created, c.dropped + c.queued, "{ty}");
    }
}
