// SPDX-License-Identifier: Apache-2.0

//! Dataflow runtime: connections, sessions and the scheduler.

pub mod connection;
pub mod processor;
pub mod session;
pub mod stats;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::mpsc;
use std::sync::{Arc, Mutex, RwLock};
use std::thread;
use std::time::Duration;

use indexmap::IndexMap;
use serde::Serialize;
use thiserror::Error;

use crate::clock::{Clock, SystemClock, Timestamp};
use crate::control::flow::{has_errors, validate_flow, Diagnostic, FlowDefinition, ProcessorDef, RunState, Schedule};
use crate::distribution::{TopicError, TopicLog};
use crate::fault::FaultInjector;
use crate::model::{ContentClaim, FlowFile, ProvenanceEvent, ProvenanceEventType, FILENAME_ATTR};
use crate::repo::{
    ContentConfig, ContentRepository, FlowFileRecord, FlowFileRepoConfig, FlowFileRepository, Lineage,
    ProvenanceConfig, ProvenanceQuery, ProvenanceRepository, RepoError,
};

use connection::{Connection, ConnectionConfig, FullTransition};
use processor::{with_defaults, BuildFn, ProcessContext, ProcessError, Processor, ProcessorSpec, Properties, Registry};
use session::ProcessSession;
use stats::{Counters, StatusWindow};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("flow is invalid:\n{}", .0.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("\n"))]
    InvalidFlow(Vec<Diagnostic>),
    #[error("unknown component '{0}'")]
    UnknownComponent(String),
    #[error("processor '{id}' failed to start: {reason}")]
    StartFailed { id: String, reason: String },
    #[error("processor '{0}' must be stopped first")]
    NotStopped(String),
    #[error("connection '{id}' still holds {count} flowfiles")]
    ConnectionNotEmpty { id: String, count: u64 },
    #[error("unknown provenance event {0}")]
    UnknownEvent(u64),
    #[error("content of event {0} is no longer available")]
    ContentPurged(u64),
    #[error("connection '{0}' no longer exists")]
    ConnectionGone(String),
    #[error("event {0} has no queue to replay into")]
    NotReplayable(u64),
    #[error("engine halted after an injected crash")]
    Crashed,
    #[error(transparent)]
    Repo(#[from] RepoError),
    #[error(transparent)]
    Topic(#[from] TopicError),
    #[error("{0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, EngineError>;

/// Pushed to subscribers as it happens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum EngineEvent {
    QueueFull { connection: String, full: bool },
}

#[derive(Default)]
struct Notifier {
    subscribers: Mutex<Vec<mpsc::Sender<EngineEvent>>>,
}

impl Notifier {
    fn emit(&self, ev: EngineEvent) {
        self.subscribers
            .lock()
            .unwrap()
            .retain(|s| s.send(ev.clone()).is_ok());
    }
}

pub(crate) struct NodeState {
    running: bool,
    scheduled: bool,
    active: usize,
    last_trigger: Option<Timestamp>,
    pub(crate) yielded_until: Timestamp,
    pub(crate) idle_until: Timestamp,
}

struct NodeConfig {
    properties: Properties,
    relationships: BTreeSet<String>,
    processor: Arc<dyn Processor>,
}

/// A processor instance in the graph with its scheduling state.
pub struct ProcessorNode {
    pub id: String,
    pub type_name: String,
    pub schedule: Schedule,
    pub concurrency: usize,
    pub penalty_ms: i64,
    spec: ProcessorSpec,
    build: BuildFn,
    config: RwLock<NodeConfig>,
    pub(crate) state: Mutex<NodeState>,
    stats: Mutex<StatusWindow>,
}

impl ProcessorNode {
    fn new(def: &ProcessorDef, registry: &Registry) -> Result<Self> {
        let ty = registry
            .get(&def.type_name)
            .ok_or_else(|| EngineError::Config(format!("unknown processor type '{}'", def.type_name)))?;
        let props = with_defaults(&ty.spec, &def.properties);
        let processor = (ty.build)(&props).map_err(|e| EngineError::Config(format!("{}: {e}", def.id)))?;
        Ok(ProcessorNode {
            id: def.id.clone(),
            type_name: def.type_name.clone(),
            schedule: def.schedule,
            concurrency: def.concurrency.max(1),
            penalty_ms: def.penalty_ms,
            spec: ty.spec.clone(),
            build: ty.build,
            config: RwLock::new(NodeConfig {
                relationships: ty.spec.relationships(&def.properties),
                properties: def.properties.clone(),
                processor,
            }),
            state: Mutex::new(NodeState {
                running: false,
                scheduled: false,
                active: 0,
                last_trigger: None,
                yielded_until: Timestamp::MIN,
                idle_until: Timestamp::MIN,
            }),
            stats: Mutex::new(StatusWindow::default()),
        })
    }

    pub fn has_relationship(&self, rel: &str) -> bool {
        self.config.read().unwrap().relationships.contains(rel)
    }

    pub fn relationships(&self) -> BTreeSet<String> {
        self.config.read().unwrap().relationships.clone()
    }

    pub fn properties(&self) -> Properties {
        self.config.read().unwrap().properties.clone()
    }

    fn processor(&self) -> Arc<dyn Processor> {
        self.config.read().unwrap().processor.clone()
    }

    pub fn is_running(&self) -> bool {
        self.state.lock().unwrap().running
    }

    pub fn active_sessions(&self) -> usize {
        self.state.lock().unwrap().active
    }

    pub(crate) fn record_stats(&self, now: Timestamp, c: Counters) {
        self.stats.lock().unwrap().record(now, c);
    }

    pub fn counters(&self, now: Timestamp) -> Counters {
        self.stats.lock().unwrap().totals(now)
    }
}

/// Processors and connections of the loaded flow.
pub struct Graph {
    processors: IndexMap<String, Arc<ProcessorNode>>,
    connections: IndexMap<String, Arc<Connection>>,
    outgoing: HashMap<(String, String), Vec<Arc<Connection>>>,
    outgoing_all: HashMap<String, Vec<Arc<Connection>>>,
    incoming: HashMap<String, Vec<Arc<Connection>>>,
    auto_terminate: HashMap<String, BTreeSet<String>>,
}

impl Graph {
    fn build(def: &FlowDefinition, registry: &Registry) -> Result<Graph> {
        let mut processors = IndexMap::new();
        for p in &def.processors {
            processors.insert(p.id.clone(), Arc::new(ProcessorNode::new(p, registry)?));
        }
        let mut g = Graph {
            processors,
            connections: IndexMap::new(),
            outgoing: HashMap::new(),
            outgoing_all: HashMap::new(),
            incoming: HashMap::new(),
            auto_terminate: def
                .auto_terminate
                .iter()
                .map(|(k, v)| (k.clone(), v.iter().cloned().collect()))
                .collect(),
        };
        for c in &def.connections {
            let mut cfg = ConnectionConfig::new(&c.id, &c.source.processor, &c.source.relationship, &c.destination);
            cfg.object_threshold = c.object_threshold();
            cfg.size_threshold = c.size_threshold();
            cfg.prioritizer = c.prioritizer.unwrap_or_default();
            let conn = Arc::new(Connection::new(cfg));
            g.outgoing
                .entry((c.source.processor.clone(), c.source.relationship.clone()))
                .or_default()
                .push(conn.clone());
            g.outgoing_all
                .entry(c.source.processor.clone())
                .or_default()
                .push(conn.clone());
            g.incoming.entry(c.destination.clone()).or_default().push(conn.clone());
            g.connections.insert(c.id.clone(), conn);
        }
        Ok(g)
    }

    pub fn processor(&self, id: &str) -> Option<&Arc<ProcessorNode>> {
        self.processors.get(id)
    }

    pub fn processors(&self) -> impl Iterator<Item = &Arc<ProcessorNode>> {
        self.processors.values()
    }

    pub fn connection(&self, id: &str) -> Option<&Arc<Connection>> {
        self.connections.get(id)
    }

    pub fn connections(&self) -> impl Iterator<Item = &Arc<Connection>> {
        self.connections.values()
    }

    pub fn outgoing(&self, processor: &str, rel: &str) -> &[Arc<Connection>] {
        self.outgoing
            .get(&(processor.to_string(), rel.to_string()))
            .map_or(&[], Vec::as_slice)
    }

    pub fn outgoing_all(&self, processor: &str) -> &[Arc<Connection>] {
        self.outgoing_all.get(processor).map_or(&[], Vec::as_slice)
    }

    pub fn incoming(&self, processor: &str) -> &[Arc<Connection>] {
        self.incoming.get(processor).map_or(&[], Vec::as_slice)
    }

    pub fn is_auto_terminated(&self, processor: &str, rel: &str) -> bool {
        self.auto_terminate.get(processor).is_some_and(|s| s.contains(rel))
    }
}

pub(crate) struct EngineShared {
    pub(crate) clock: Arc<dyn Clock>,
    pub(crate) faults: Arc<FaultInjector>,
    pub(crate) flowfiles: FlowFileRepository,
    pub(crate) content: ContentRepository,
    pub(crate) provenance: ProvenanceRepository,
    pub(crate) topics: Arc<TopicLog>,
    graph: RwLock<Arc<Graph>>,
    flow: RwLock<FlowDefinition>,
    orphans: Mutex<BTreeMap<String, Vec<FlowFile>>>,
    pub(crate) created: AtomicU64,
    pub(crate) dropped: AtomicU64,
    pub(crate) provenance_failures: AtomicU64,
    intake_halted: AtomicBool,
    pub(crate) crashed: AtomicBool,
    notifier: Notifier,
    cursor: AtomicUsize,
    housekeeping: Mutex<Timestamp>,
}

const HOUSEKEEPING_INTERVAL_MS: i64 = 1_000;

impl EngineShared {
    pub(crate) fn graph(&self) -> Arc<Graph> {
        self.graph.read().unwrap().clone()
    }

    pub(crate) fn note_transition(&self, conn: &Connection, t: FullTransition) {
        if let Some(full) = t {
            self.notifier.emit(EngineEvent::QueueFull {
                connection: conn.id().to_string(),
                full,
            });
        }
    }

    pub(crate) fn halt_intake(&self) {
        if !self.intake_halted.swap(true, Ordering::SeqCst) {
            log::error!("storage full; source processors will not be scheduled");
        }
    }

    fn context(self: &Arc<Self>, node: &Arc<ProcessorNode>) -> ProcessContext {
        ProcessContext {
            shared: self.clone(),
            node: node.clone(),
        }
    }

    fn eligible(&self, graph: &Graph, node: &ProcessorNode, st: &NodeState, now: Timestamp) -> bool {
        if !st.running || !st.scheduled || now < st.yielded_until || st.active >= node.concurrency {
            return false;
        }
        let inputs = graph.incoming(&node.id);
        match node.schedule {
            Schedule::Timer { period_ms } => {
                if st.last_trigger.is_some_and(|t| now - t < period_ms as i64) {
                    return false;
                }
            }
            Schedule::EventDriven => {
                if inputs.is_empty() {
                    return false;
                }
            }
        }
        if graph.outgoing_all(&node.id).iter().any(|c| c.is_full()) {
            return false;
        }
        if inputs.is_empty() {
            return !self.intake_halted.load(Ordering::SeqCst) && now >= st.idle_until;
        }
        inputs.iter().any(|c| c.has_ready(now)) || (node.spec.trigger_when_empty && now >= st.idle_until)
    }

    fn try_reserve(&self, graph: &Graph, node: &ProcessorNode, now: Timestamp) -> bool {
        let mut st = node.state.lock().unwrap();
        if !self.eligible(graph, node, &st, now) {
            return false;
        }
        st.active += 1;
        st.last_trigger = Some(now);
        true
    }

    fn trigger(self: &Arc<Self>, node: &Arc<ProcessorNode>) {
        let ctx = self.context(node);
        let processor = node.processor();
        let mut session = ProcessSession::new(self.clone(), node.clone());
        let outcome = catch_unwind(AssertUnwindSafe(|| {
            processor.on_trigger(&ctx, &mut session)?;
            session.commit().map(|_| ()).map_err(ProcessError::from)
        }));
        let failure = match outcome {
            Ok(Ok(())) => None,
            Ok(Err(e)) => Some(e.to_string()),
            Err(panic) => Some(
                panic
                    .downcast_ref::<&str>()
                    .map(|s| s.to_string())
                    .or_else(|| panic.downcast_ref::<String>().cloned())
                    .unwrap_or_else(|| "panic".into()),
            ),
        };
        if let Some(reason) = failure {
            if !self.crashed.load(Ordering::SeqCst) {
                session.rollback();
                let now = self.clock.now_ms();
                log::warn!("processor {} failed: {reason}; penalized for {} ms", node.id, node.penalty_ms);
                node.record_stats(
                    now,
                    Counters {
                        errors: 1,
                        ..Default::default()
                    },
                );
                let mut st = node.state.lock().unwrap();
                st.yielded_until = st.yielded_until.max(now + node.penalty_ms);
            }
        }
        drop(session);
        let unschedule = {
            let mut st = node.state.lock().unwrap();
            st.active -= 1;
            let done = !st.running && st.scheduled && st.active == 0;
            if done {
                st.scheduled = false;
            }
            done
        };
        if unschedule {
            processor.on_stopped(&ctx);
        }
    }

    /// Picks the next eligible processor after the round-robin cursor.
    fn pick(&self, graph: &Graph, now: Timestamp) -> Option<Arc<ProcessorNode>> {
        let n = graph.processors.len();
        if n == 0 {
            return None;
        }
        let start = self.cursor.fetch_add(1, Ordering::Relaxed);
        (0..n)
            .map(|i| &graph.processors[(start + i) % n])
            .find(|node| self.try_reserve(graph, node, now))
            .cloned()
    }

    fn housekeeping(&self, now: Timestamp) {
        let Ok(mut last) = self.housekeeping.try_lock() else { return };
        if now - *last < HOUSEKEEPING_INTERVAL_MS {
            return;
        }
        *last = now;
        if let Err(e) = self.flowfiles.maybe_checkpoint(now) {
            log::error!("flowfile checkpoint failed: {e}");
        }
        if let Err(e) = self.content.purge_expired(now) {
            log::warn!("archive purge failed: {e}");
        }
    }

    fn start(self: &Arc<Self>, node: &Arc<ProcessorNode>) -> Result<()> {
        {
            let st = node.state.lock().unwrap();
            if st.running {
                return Ok(());
            }
            if st.scheduled {
                // still winding down from a stop; resume without rescheduling
                drop(st);
                node.state.lock().unwrap().running = true;
                return Ok(());
            }
        }
        let ctx = self.context(node);
        node.processor()
            .on_scheduled(&ctx)
            .map_err(|e| EngineError::StartFailed {
                id: node.id.clone(),
                reason: e.to_string(),
            })?;
        let mut st = node.state.lock().unwrap();
        st.running = true;
        st.scheduled = true;
        st.yielded_until = Timestamp::MIN;
        st.idle_until = Timestamp::MIN;
        Ok(())
    }

    fn stop(self: &Arc<Self>, node: &Arc<ProcessorNode>) {
        let unschedule = {
            let mut st = node.state.lock().unwrap();
            st.running = false;
            let done = st.scheduled && st.active == 0;
            if done {
                st.scheduled = false;
            }
            done
        };
        if unschedule {
            node.processor().on_stopped(&self.context(node));
        }
    }

    fn wait_idle(&self, node: &ProcessorNode) {
        while node.active_sessions() > 0 {
            thread::sleep(Duration::from_millis(1));
        }
    }
}

/// Repository and clock settings for an engine instance.
#[derive(Clone)]
pub struct EngineConfig {
    pub state_dir: PathBuf,
    pub clock: Arc<dyn Clock>,
    pub faults: Arc<FaultInjector>,
    pub flowfile: FlowFileRepoConfig,
    pub content: ContentConfig,
    pub provenance: ProvenanceConfig,
    pub topic_sync: bool,
}

impl EngineConfig {
    pub fn new(state_dir: impl Into<PathBuf>) -> Self {
        EngineConfig {
            state_dir: state_dir.into(),
            clock: Arc::new(SystemClock),
            faults: Arc::new(FaultInjector::new()),
            flowfile: FlowFileRepoConfig::default(),
            content: ContentConfig::default(),
            provenance: ProvenanceConfig::default(),
            topic_sync: false,
        }
    }

    pub fn with_clock(mut self, clock: Arc<dyn Clock>) -> Self {
        self.clock = clock;
        self
    }

    pub fn with_faults(mut self, faults: Arc<FaultInjector>) -> Self {
        self.faults = faults;
        self
    }
}

/// Flowfile totals used for conservation checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Conservation {
    pub created: u64,
    pub dropped: u64,
    pub queued: u64,
}

/// Result of a replay.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ReplayOutcome {
    pub event_id: u64,
    pub flowfile_uuid: String,
    pub connection: String,
}

struct WorkerPool {
    stop: Arc<AtomicBool>,
    handles: Vec<thread::JoinHandle<()>>,
}

pub struct Engine {
    shared: Arc<EngineShared>,
    registry: Arc<Registry>,
    pool: Mutex<Option<WorkerPool>>,
}

const IDLE_SLEEP: Duration = Duration::from_millis(2);

impl Engine {
    /// Opens the repositories under the state directory, recovers queued
    /// flowfiles and loads `flow`. Processors marked RUNNING are started;
    /// nothing runs until [`Engine::step`] or [`Engine::run`].
    pub fn open(config: EngineConfig, registry: Arc<Registry>, flow: FlowDefinition) -> Result<Engine> {
        let diags = validate_flow(&flow, &registry);
        if has_errors(&diags) {
            return Err(EngineError::InvalidFlow(diags));
        }
        let dir = &config.state_dir;
        std::fs::create_dir_all(dir).map_err(RepoError::from)?;
        let flowfiles = FlowFileRepository::open(&dir.join("flowfile-repo"), config.flowfile.clone(), config.faults.clone())?;
        let content = ContentRepository::open(dir, config.content.clone(), config.clock.clone())?;
        let provenance = ProvenanceRepository::open(&dir.join("provenance"), config.provenance.clone())?;
        let topics = Arc::new(TopicLog::open(&dir.join("topics"), config.clock.clone(), config.topic_sync)?);
        for t in &flow.topics {
            topics.ensure_topic(t.clone())?;
        }
        let graph = Graph::build(&flow, &registry)?;

        let mut orphans = BTreeMap::new();
        for (queue, ffs) in flowfiles.recovered_queues() {
            for ff in &ffs {
                if let Some(c) = &ff.claim {
                    content.restore_ref(c)?;
                }
            }
            match graph.connection(&queue) {
                Some(conn) => ffs.into_iter().for_each(|ff| {
                    conn.enqueue(ff);
                }),
                None => {
                    log::warn!("{} recovered flowfiles belong to unknown connection '{queue}'", ffs.len());
                    orphans.insert(queue, ffs);
                }
            }
        }
        content.sweep_sections()?;

        let shared = Arc::new(EngineShared {
            clock: config.clock.clone(),
            faults: config.faults.clone(),
            flowfiles,
            content,
            provenance,
            topics,
            graph: RwLock::new(Arc::new(graph)),
            flow: RwLock::new(flow.clone()),
            orphans: Mutex::new(orphans),
            created: AtomicU64::new(0),
            dropped: AtomicU64::new(0),
            provenance_failures: AtomicU64::new(0),
            intake_halted: AtomicBool::new(false),
            crashed: AtomicBool::new(false),
            notifier: Notifier::default(),
            cursor: AtomicUsize::new(0),
            housekeeping: Mutex::new(config.clock.now_ms()),
        });
        let engine = Engine {
            shared,
            registry,
            pool: Mutex::new(None),
        };
        engine.start_marked(&flow)?;
        Ok(engine)
    }

    fn start_marked(&self, flow: &FlowDefinition) -> Result<()> {
        let graph = self.shared.graph();
        for p in &flow.processors {
            if p.state == RunState::Running {
                self.shared.start(graph.processor(&p.id).unwrap())?;
            }
        }
        Ok(())
    }

    pub fn clock(&self) -> &Arc<dyn Clock> {
        &self.shared.clock
    }

    pub fn graph(&self) -> Arc<Graph> {
        self.shared.graph()
    }

    pub fn flow(&self) -> FlowDefinition {
        self.shared.flow.read().unwrap().clone()
    }

    pub fn registry(&self) -> &Arc<Registry> {
        &self.registry
    }

    pub fn topics(&self) -> &Arc<TopicLog> {
        &self.shared.topics
    }

    pub fn content(&self) -> &ContentRepository {
        &self.shared.content
    }

    pub fn flowfiles(&self) -> &FlowFileRepository {
        &self.shared.flowfiles
    }

    pub fn provenance(&self) -> &ProvenanceRepository {
        &self.shared.provenance
    }

    pub fn faults(&self) -> &Arc<FaultInjector> {
        &self.shared.faults
    }

    pub fn is_crashed(&self) -> bool {
        self.shared.crashed.load(Ordering::SeqCst)
    }

    pub fn intake_halted(&self) -> bool {
        self.shared.intake_halted.load(Ordering::SeqCst)
    }

    /// Clears the storage-full halt once space is available again.
    pub fn resume_intake(&self) {
        self.shared.intake_halted.store(false, Ordering::SeqCst);
    }

    pub fn orphaned(&self) -> BTreeMap<String, usize> {
        self.shared
            .orphans
            .lock()
            .unwrap()
            .iter()
            .map(|(k, v)| (k.clone(), v.len()))
            .collect()
    }

    pub fn subscribe(&self) -> mpsc::Receiver<EngineEvent> {
        let (tx, rx) = mpsc::channel();
        self.shared.notifier.subscribers.lock().unwrap().push(tx);
        rx
    }

    fn node(&self, id: &str) -> Result<Arc<ProcessorNode>> {
        self.shared
            .graph()
            .processor(id)
            .cloned()
            .ok_or_else(|| EngineError::UnknownComponent(id.to_string()))
    }

    /// A fresh session owned by `processor`, for driving processors by hand.
    pub fn session(&self, processor: &str) -> Result<ProcessSession> {
        Ok(ProcessSession::new(self.shared.clone(), self.node(processor)?))
    }

    /// Whether the scheduler would trigger `id` now.
    pub fn scheduler_eligible(&self, id: &str) -> Result<bool> {
        let node = self.node(id)?;
        let graph = self.shared.graph();
        let st = node.state.lock().unwrap();
        Ok(self.shared.eligible(&graph, &node, &st, self.shared.clock.now_ms()))
    }

    pub fn start_component(&self, id: &str) -> Result<()> {
        let node = self.node(id)?;
        self.shared.start(&node)
    }

    /// Stops scheduling `id`; an in-flight trigger finishes first.
    pub fn stop_component(&self, id: &str) -> Result<()> {
        let node = self.node(id)?;
        self.shared.stop(&node);
        Ok(())
    }

    /// Replaces a stopped processor's properties.
    pub fn update_properties(&self, id: &str, properties: Properties) -> Result<()> {
        let node = self.node(id)?;
        {
            let st = node.state.lock().unwrap();
            if st.running || st.scheduled {
                return Err(EngineError::NotStopped(id.to_string()));
            }
        }
        let problems = node.spec.check(&properties);
        if !problems.is_empty() {
            return Err(EngineError::Config(format!("{id}: {}", problems.join("; "))));
        }
        let processor = (node.build)(&with_defaults(&node.spec, &properties))
            .map_err(|e| EngineError::Config(format!("{id}: {e}")))?;
        let relationships = node.spec.relationships(&properties);
        let graph = self.shared.graph();
        for r in &relationships {
            if graph.outgoing(id, r).is_empty() && !graph.is_auto_terminated(id, r) {
                return Err(EngineError::Config(format!(
                    "{id}: relationship '{r}' is neither connected nor auto-terminated"
                )));
            }
        }
        *node.config.write().unwrap() = NodeConfig {
            properties: properties.clone(),
            relationships,
            processor,
        };
        let mut flow = self.shared.flow.write().unwrap();
        if let Some(p) = flow.processors.iter_mut().find(|p| p.id == id) {
            p.properties = properties;
        }
        Ok(())
    }

    /// Swaps in a new flow. Connections kept by id carry their queues over;
    /// a removed connection must be empty.
    pub fn load_flow(&self, flow: FlowDefinition) -> Result<()> {
        let diags = validate_flow(&flow, &self.registry);
        if has_errors(&diags) {
            return Err(EngineError::InvalidFlow(diags));
        }
        let old = self.shared.graph();
        let keep: BTreeSet<&str> = flow.connections.iter().map(|c| c.id.as_str()).collect();
        for c in old.connections() {
            let count = c.queued_count();
            if !keep.contains(c.id()) && count > 0 {
                return Err(EngineError::ConnectionNotEmpty {
                    id: c.id().to_string(),
                    count,
                });
            }
        }
        let graph = Graph::build(&flow, &self.registry)?;
        for t in &flow.topics {
            self.shared.topics.ensure_topic(t.clone())?;
        }
        for node in old.processors() {
            self.shared.stop(node);
        }
        for node in old.processors() {
            self.shared.wait_idle(node);
        }
        for c in old.connections() {
            if let Some(target) = graph.connection(c.id()) {
                while let (Some(ff), _) = c.poll(Timestamp::MAX) {
                    target.enqueue(ff);
                }
            }
        }
        {
            let mut orphans = self.shared.orphans.lock().unwrap();
            let ids: Vec<String> = orphans.keys().cloned().collect();
            for id in ids {
                if let Some(target) = graph.connection(&id) {
                    for ff in orphans.remove(&id).unwrap() {
                        target.enqueue(ff);
                    }
                }
            }
        }
        *self.shared.graph.write().unwrap() = Arc::new(graph);
        *self.shared.flow.write().unwrap() = flow.clone();
        self.start_marked(&flow)
    }

    /// One scheduler pass: each eligible processor is triggered at most once.
    /// Returns how many were triggered.
    pub fn step(&self) -> Result<usize> {
        if self.is_crashed() {
            return Err(EngineError::Crashed);
        }
        let graph = self.shared.graph();
        let now = self.shared.clock.now_ms();
        let mut triggered = 0;
        for node in graph.processors() {
            if self.shared.try_reserve(&graph, node, now) {
                self.shared.trigger(node);
                triggered += 1;
                if self.is_crashed() {
                    return Err(EngineError::Crashed);
                }
            }
        }
        self.shared.housekeeping(now);
        Ok(triggered)
    }

    /// Runs passes until one triggers nothing, at most `max_passes`.
    pub fn run_until_idle(&self, max_passes: usize) -> Result<usize> {
        let mut total = 0;
        for _ in 0..max_passes {
            let n = self.step()?;
            if n == 0 {
                break;
            }
            total += n;
        }
        Ok(total)
    }

    /// Starts `workers` threads that trigger eligible processors round-robin.
    pub fn run(&self, workers: usize) {
        let mut pool = self.pool.lock().unwrap();
        if pool.is_some() {
            return;
        }
        let stop = Arc::new(AtomicBool::new(false));
        let handles = (0..workers.max(1))
            .map(|i| {
                let shared = self.shared.clone();
                let stop = stop.clone();
                thread::Builder::new()
                    .name(format!("flow-worker-{i}"))
                    .spawn(move || {
                        while !stop.load(Ordering::SeqCst) && !shared.crashed.load(Ordering::SeqCst) {
                            let now = shared.clock.now_ms();
                            let graph = shared.graph();
                            match shared.pick(&graph, now) {
                                Some(node) => shared.trigger(&node),
                                None => thread::sleep(IDLE_SLEEP),
                            }
                            shared.housekeeping(now);
                        }
                    })
                    .expect("spawn worker")
            })
            .collect();
        *pool = Some(WorkerPool { stop, handles });
    }

    pub fn is_running(&self) -> bool {
        self.pool.lock().unwrap().is_some()
    }

    /// Stops the worker pool, lets in-flight triggers finish, releases
    /// processor-held sessions and checkpoints the flowfile repository.
    /// Processor run states are kept.
    pub fn shutdown(&self) -> Result<()> {
        if let Some(pool) = self.pool.lock().unwrap().take() {
            pool.stop.store(true, Ordering::SeqCst);
            for h in pool.handles {
                let _ = h.join();
            }
        }
        if self.is_crashed() {
            return Err(EngineError::Crashed);
        }
        let graph = self.shared.graph();
        for node in graph.processors() {
            let was_scheduled = {
                let mut st = node.state.lock().unwrap();
                std::mem::replace(&mut st.scheduled, false)
            };
            if was_scheduled {
                node.processor().on_stopped(&self.shared.context(node));
            }
            node.state.lock().unwrap().running = false;
        }
        self.shared.flowfiles.checkpoint(self.shared.clock.now_ms())?;
        Ok(())
    }

    pub fn conservation(&self) -> Conservation {
        let graph = self.shared.graph();
        Conservation {
            created: self.shared.created.load(Ordering::SeqCst),
            dropped: self.shared.dropped.load(Ordering::SeqCst),
            queued: graph.connections().map(|c| c.queued_count()).sum(),
        }
    }

    pub fn provenance_failures(&self) -> u64 {
        self.shared.provenance_failures.load(Ordering::Relaxed)
    }

    pub fn query(&self, q: &ProvenanceQuery) -> Result<Vec<ProvenanceEvent>> {
        Ok(self.shared.provenance.query(q)?)
    }

    pub fn lineage(&self, uuid: &str) -> Result<Lineage> {
        Ok(self.shared.provenance.lineage(uuid)?)
    }

    fn event(&self, event_id: u64) -> Result<ProvenanceEvent> {
        self.shared
            .provenance
            .get(event_id)
            .ok_or(EngineError::UnknownEvent(event_id))
    }

    fn event_content(&self, event_id: u64, claim: &ContentClaim) -> Result<Vec<u8>> {
        match self.shared.content.read(claim, None) {
            Ok(b) => Ok(b),
            Err(RepoError::ClaimNotFound) => Err(EngineError::ContentPurged(event_id)),
            Err(e) => Err(e.into()),
        }
    }

    /// The content a flowfile had at the time of the event.
    pub fn download_content(&self, event_id: u64) -> Result<Vec<u8>> {
        let e = self.event(event_id)?;
        match &e.claim {
            None => Ok(Vec::new()),
            Some(c) => self.event_content(event_id, c),
        }
    }

    /// Re-injects the event's flowfile state as a new flowfile at the
    /// connection it occupied, recording a REPLAY event.
    pub fn replay(&self, event_id: u64) -> Result<ReplayOutcome> {
        let e = self.event(event_id)?;
        if let Some(c) = &e.claim {
            self.event_content(event_id, c)?;
        }
        let queue = e.queue_id.clone().ok_or(EngineError::NotReplayable(event_id))?;
        let graph = self.shared.graph();
        let conn = graph
            .connection(&queue)
            .cloned()
            .ok_or_else(|| EngineError::ConnectionGone(queue.clone()))?;
        let now = self.shared.clock.now_ms();
        let mut attrs = e.attributes_snapshot.clone();
        if attrs.get(FILENAME_ATTR) == Some(&e.flowfile_uuid) {
            attrs.remove(FILENAME_ATTR);
        }
        let ff = FlowFile::new(attrs, e.claim.clone(), now);
        self.shared
            .flowfiles
            .commit(&[FlowFileRecord::update(ff.clone(), conn.id())])?;
        if let Some(c) = &ff.claim {
            self.shared.content.adjust_ref(c, 1)?;
        }
        let transition = conn.enqueue(ff.clone());
        self.shared.note_transition(&conn, transition);
        let mut ev = ProvenanceEvent::new(ProvenanceEventType::Replay, &ff, "replay", now)
            .with_details(format!("replay of event {event_id}"));
        ev.parent_uuids = vec![e.flowfile_uuid.clone()];
        ev.queue_id = Some(conn.id().to_string());
        let id = self.shared.provenance.record(ev)?;
        self.shared.created.fetch_add(1, Ordering::Relaxed);
        Ok(ReplayOutcome {
            event_id: id,
            flowfile_uuid: ff.uuid,
            connection: conn.id().to_string(),
        })
    }
}

impl Drop for Engine {
    fn drop(&mut self) {
        if let Some(pool) = self.pool.lock().unwrap().take() {
            pool.stop.store(true, Ordering::SeqCst);
            for h in pool.handles {
                let _ = h.join();
            }
        }
    }
}
