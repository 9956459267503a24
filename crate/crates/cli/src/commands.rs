// SPDX-License-Identifier: Apache-2.0

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use serde_json::Value;

use flowforge_core::control::flow::has_errors;
use flowforge_core::control::{validate_flow, FlowDefinition};
use flowforge_core::distribution::wire;
use flowforge_core::engine::{Engine, EngineConfig};
use flowforge_core::processors::builtin_registry;

use crate::api::{self, ApiConfig};
use crate::client::Client;

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "flowforge", version, about = "Dataflow engine with provenance and a partitioned topic log")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug)]
pub struct Global {
    /// Directory holding the repositories and topic log.
    #[arg(long, global = true, default_value = "flowforge-state")]
    pub state_dir: PathBuf,
    /// HTTP API port (served by `run`, contacted by the client commands).
    #[arg(long, global = true, default_value_t = 8080)]
    pub port: u16,
    /// Host the client commands connect to.
    #[arg(long, global = true, default_value = "127.0.0.1")]
    pub host: String,
    /// Bearer token for the API. Without one the API is unauthenticated.
    #[arg(long, global = true, env = "FLOWFORGE_TOKEN", hide_env_values = true)]
    pub token: Option<String>,
    /// Worker threads; defaults to the number of CPUs.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Load a flow and run it, serving the HTTP API until interrupted.
    Run {
        flow: PathBuf,
        /// Address the API binds to.
        #[arg(long, default_value = "127.0.0.1")]
        bind: String,
        /// Static console files served under /ui.
        #[arg(long, default_value = "ui")]
        ui_dir: PathBuf,
        /// Also serve the line protocol for topic consumers on this port.
        #[arg(long)]
        topic_port: Option<u16>,
    },
    /// Check a flow file and print its diagnostics.
    Validate { flow: PathBuf },
    /// Print processor and connection status of a running instance.
    Status {
        #[arg(long)]
        json: bool,
    },
    /// Print the lineage of a flowfile.
    Lineage {
        uuid: String,
        #[arg(long)]
        json: bool,
    },
    /// Replay a provenance event.
    Replay { event_id: u64 },
    /// Topic commands.
    Topics {
        #[command(subcommand)]
        command: TopicsCommand,
    },
}

#[derive(Subcommand, Debug)]
pub enum TopicsCommand {
    /// Print the newest records of a topic.
    Tail {
        topic: String,
        /// Only this partition.
        #[arg(long)]
        partition: Option<u32>,
        /// Records per partition to show before following.
        #[arg(short = 'n', long, default_value_t = 10)]
        lines: u64,
        /// Keep polling for new records.
        #[arg(short, long)]
        follow: bool,
    },
}

pub fn main() -> i32 {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let g = &cli.global;
    let client = || Client::new(&g.host, g.port, g.token.clone());
    let result = match &cli.command {
        Command::Run { flow, bind, ui_dir, topic_port } => return run(g, flow, bind, ui_dir, *topic_port),
        Command::Validate { flow } => return validate(flow),
        Command::Status { json } => status(&client(), *json),
        Command::Lineage { uuid, json } => lineage(&client(), uuid, *json),
        Command::Replay { event_id } => replay(&client(), *event_id),
        Command::Topics {
            command: TopicsCommand::Tail { topic, partition, lines, follow },
        } => tail(&client(), topic, *partition, *lines, *follow),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_RUNTIME
        }
    }
}

type CmdResult = Result<(), Box<dyn std::error::Error>>;

/// Reads and parses a flow file; prints why on failure.
fn read_flow(path: &Path) -> Result<FlowDefinition, i32> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        eprintln!("error: cannot read {}: {e}", path.display());
        EXIT_RUNTIME
    })?;
    FlowDefinition::from_yaml(&text).map_err(|e| {
        eprintln!("error: {}: {e}", path.display());
        EXIT_INVALID
    })
}

fn validate(path: &Path) -> i32 {
    let flow = match read_flow(path) {
        Ok(f) => f,
        Err(code) => return code,
    };
    let diags = validate_flow(&flow, &builtin_registry());
    for d in &diags {
        println!("{d}");
    }
    if has_errors(&diags) {
        EXIT_INVALID
    } else {
        println!(
            "{}: ok ({} processors, {} connections)",
            path.display(),
            flow.processors.len(),
            flow.connections.len()
        );
        EXIT_OK
    }
}

fn run(g: &Global, path: &Path, bind: &str, ui_dir: &Path, topic_port: Option<u16>) -> i32 {
    let flow = match read_flow(path) {
        Ok(f) => f,
        Err(code) => return code,
    };
    let registry = Arc::new(builtin_registry());
    let diags = validate_flow(&flow, &registry);
    for d in &diags {
        eprintln!("{d}");
    }
    if has_errors(&diags) {
        return EXIT_INVALID;
    }
    let engine = match Engine::open(EngineConfig::new(&g.state_dir), registry, flow) {
        Ok(e) => Arc::new(e),
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_RUNTIME;
        }
    };
    for (conn, n) in engine.orphaned() {
        log::warn!("{n} recovered flowfiles belong to connection '{conn}', which is not in this flow");
    }
    if let Some(port) = topic_port {
        match std::net::TcpListener::bind((bind, port)) {
            Ok(l) => {
                eprintln!("topic protocol on {}", l.local_addr().map(|a| a.to_string()).unwrap_or_default());
                wire::serve(engine.topics().clone(), l);
            }
            Err(e) => {
                eprintln!("error: cannot bind topic port {port}: {e}");
                return EXIT_RUNTIME;
            }
        }
    }
    let workers = g
        .workers
        .unwrap_or_else(|| thread::available_parallelism().map_or(2, |n| n.get()));
    engine.run(workers);
    if g.token.is_none() {
        log::warn!("no --token given; the HTTP API accepts unauthenticated requests");
    }

    let rt = match tokio::runtime::Runtime::new() {
        Ok(rt) => rt,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_RUNTIME;
        }
    };
    let config = ApiConfig {
        token: g.token.clone(),
        ui_dir: ui_dir.to_path_buf(),
    };
    let served = rt.block_on(async {
        let listener = tokio::net::TcpListener::bind((bind, g.port)).await?;
        eprintln!("listening on http://{}", listener.local_addr()?);
        api::serve(listener, engine.clone(), config, shutdown_signal()).await
    });
    let stopped = engine.shutdown();
    match (served, stopped) {
        (Ok(()), Ok(())) => EXIT_OK,
        (Err(e), _) => {
            eprintln!("error: {e}");
            EXIT_RUNTIME
        }
        (_, Err(e)) => {
            eprintln!("error during shutdown: {e}");
            EXIT_RUNTIME
        }
    }
}

async fn shutdown_signal() {
    #[cfg(unix)]
    {
        let mut term = tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate())
            .expect("install SIGTERM handler");
        tokio::select! {
            _ = tokio::signal::ctrl_c() => {}
            _ = term.recv() => {}
        }
    }
    #[cfg(not(unix))]
    let _ = tokio::signal::ctrl_c().await;
    eprintln!("shutting down");
}

fn u(v: &Value) -> u64 {
    v.as_u64().unwrap_or(0)
}

fn s(v: &Value) -> &str {
    v.as_str().unwrap_or("")
}

fn status(client: &Client, json: bool) -> CmdResult {
    let st = client.get("/status")?;
    if json {
        println!("{}", serde_json::to_string_pretty(&st)?);
        return Ok(());
    }
    println!(
        "{:<20} {:<18} {:<8} {:>8} {:>8} {:>12} {:>12} {:>6}",
        "PROCESSOR", "TYPE", "STATE", "IN", "OUT", "READ", "WRITTEN", "ERRORS"
    );
    for p in st["processors"].as_array().into_iter().flatten() {
        println!(
            "{:<20} {:<18} {:<8} {:>8} {:>8} {:>12} {:>12} {:>6}",
            s(&p["id"]),
            s(&p["type_name"]),
            s(&p["state"]),
            u(&p["flowfiles_in"]),
            u(&p["flowfiles_out"]),
            u(&p["bytes_read"]),
            u(&p["bytes_written"]),
            u(&p["errors"]),
        );
    }
    println!();
    println!("{:<20} {:<30} {:>18} {:>14}", "CONNECTION", "ROUTE", "QUEUED", "BYTES");
    for c in st["connections"].as_array().into_iter().flatten() {
        let route = format!("{}/{} -> {}", s(&c["source"]), s(&c["relationship"]), s(&c["destination"]));
        let queued = format!("{} / {}", u(&c["queued_count"]), u(&c["object_threshold"]));
        let full = if c["full"].as_bool() == Some(true) { "  FULL" } else { "" };
        println!("{:<20} {:<30} {:>18} {:>14}{full}", s(&c["id"]), route, queued, u(&c["queued_bytes"]));
    }
    let t = &st["totals"];
    println!();
    println!("created {}  dropped {}  queued {}", u(&t["created"]), u(&t["dropped"]), u(&t["queued"]));
    Ok(())
}

fn lineage(client: &Client, uuid: &str, json: bool) -> CmdResult {
    let l = client.get(&format!("/lineage/{uuid}"))?;
    if json {
        println!("{}", serde_json::to_string_pretty(&l)?);
        return Ok(());
    }
    let nodes = l["nodes"].as_array().cloned().unwrap_or_default();
    let edges = l["edges"].as_array().cloned().unwrap_or_default();
    println!("lineage of {uuid}: {} events, {} edges", nodes.len(), edges.len());
    for n in &nodes {
        let mut line = format!(
            "{:>8}  {:<18} {:<16} {}",
            u(&n["event_id"]),
            s(&n["event_type"]),
            s(&n["component_id"]),
            s(&n["flowfile_uuid"])
        );
        let list = |k: &str| {
            n[k].as_array()
                .map(|a| a.iter().map(|v| s(v).to_string()).collect::<Vec<_>>())
                .unwrap_or_default()
        };
        let (parents, children) = (list("parent_uuids"), list("child_uuids"));
        if !parents.is_empty() {
            line.push_str(&format!("  parents: {}", parents.join(",")));
        }
        if !children.is_empty() {
            line.push_str(&format!("  children: {}", children.join(",")));
        }
        if let Some(t) = n["transit_uri"].as_str() {
            line.push_str(&format!("  -> {t}"));
        }
        println!("{line}");
    }
    for e in &edges {
        println!("{:>8} -> {:<8} {}", u(&e["from"]), u(&e["to"]), s(&e["uuid"]));
    }
    Ok(())
}

fn replay(client: &Client, event_id: u64) -> CmdResult {
    let r = client.post(&format!("/provenance/{event_id}/replay"), "")?;
    println!(
        "replayed event {event_id} as {} into '{}' (event {})",
        s(&r["flowfile_uuid"]),
        s(&r["connection"]),
        u(&r["event_id"])
    );
    Ok(())
}

fn print_records(page: &Value) -> u64 {
    let mut next = u(&page["head"]);
    for r in page["records"].as_array().into_iter().flatten() {
        let key = r["key"].as_str().unwrap_or("-");
        let value = match r["value_text"].as_str() {
            Some(t) => t.to_string(),
            None => format!("base64:{}", s(&r["value"])),
        };
        println!("{}/{}\t{key}\t{value}", u(&page["partition"]), u(&r["offset"]));
        next = u(&r["offset"]) + 1;
    }
    next
}

fn tail(client: &Client, topic: &str, partition: Option<u32>, lines: u64, follow: bool) -> CmdResult {
    let topics = client.get("/topics")?;
    let info = topics["topics"]
        .as_array()
        .into_iter()
        .flatten()
        .find(|t| t["config"]["name"] == topic)
        .ok_or_else(|| format!("no topic '{topic}'"))?;
    let mut cursors: Vec<(u64, u64)> = info["partitions"]
        .as_array()
        .into_iter()
        .flatten()
        .filter(|p| partition.is_none_or(|want| u(&p["partition"]) == u64::from(want)))
        .map(|p| (u(&p["partition"]), u(&p["tail"]).saturating_sub(lines).max(u(&p["head"]))))
        .collect();
    if cursors.is_empty() {
        return Err(format!("topic '{topic}' has no partition {}", partition.unwrap_or(0)).into());
    }
    loop {
        for (p, from) in cursors.iter_mut() {
            loop {
                let page = client.get(&format!("/topics/{topic}/partitions/{p}/records?from={from}&max=1000"))?;
                let count = page["records"].as_array().map_or(0, |r| r.len());
                if count > 0 {
                    *from = print_records(&page);
                }
                if count < 1000 {
                    break;
                }
            }
        }
        if !follow {
            return Ok(());
        }
        thread::sleep(Duration::from_millis(500));
    }
}
