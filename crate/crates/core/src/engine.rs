//! Task-based runtime: builds the dependency graph dynamically from
//! declared data directions (versioned tokens, so anti- and output
//! dependencies disappear through renaming), schedules with data locality,
//! and supports failure policies, group exceptions, bounded streams, and
//! elastic worker pools.
//!
//! `EngineCore` is single-threaded and driven by whoever owns the event
//! loop; blocking calls (`wait`, `barrier`) live in the world layer, which
//! pumps the simulator until the condition resolves.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::Arc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::datastore::ObjectStore;
use crate::kernel::{run_kernel, KernelCtx};
use crate::sim::{Cluster, JobId, SiteKind, VTime};
use crate::value::TokenValue;

pub type TaskId = usize;
pub type TokenId = usize;
pub type ChannelId = usize;

pub const DEFAULT_STREAM_CAPACITY: usize = 64;
pub const DEFAULT_TASK_DURATION_MS: u64 = 1000;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Inline,
    Binary,
    Multicore { cores: u32 },
    Multinode { nodes: u32, procs_per_node: u32 },
}

impl TaskKind {
    /// Cores needed on a single node; `None` for whole-node multinode tasks.
    fn cores_on_one_node(&self) -> Option<u32> {
        match self {
            TaskKind::Inline | TaskKind::Binary => Some(1),
            TaskKind::Multicore { cores } => Some(*cores),
            TaskKind::Multinode { .. } => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    In,
    Out,
    Inout,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub direction: Direction,
    #[serde(default)]
    pub type_tag: String,
    /// Marks stream-handle parameters (bound to channel names, not tokens).
    #[serde(default)]
    pub stream: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailurePolicy {
    Retry(u32),
    Ignore,
    CancelSuccessors,
    FailWorkflow,
}

impl Default for FailurePolicy {
    fn default() -> Self {
        FailurePolicy::CancelSuccessors
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct Constraints {
    #[serde(default)]
    pub site_kind: Option<SiteKind>,
    #[serde(default)]
    pub mem_gb: Option<u32>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct KernelSpec {
    pub name: String,
    #[serde(default)]
    pub params: Value,
}

/// Periodic publications into a stream channel while the task runs; the
/// task's execution is split into one segment per element, and each segment
/// boundary is a cancellation checkpoint.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PublishSpec {
    pub channel: String,
    pub values: Vec<Value>,
    #[serde(default = "default_interval")]
    pub interval_ms: u64,
}

fn default_interval() -> u64 {
    DEFAULT_TASK_DURATION_MS
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub kind: TaskKind,
    pub params: Vec<ParamSpec>,
    #[serde(default)]
    pub constraints: Constraints,
    #[serde(default)]
    pub failure_policy: FailurePolicy,
    #[serde(default)]
    pub group: Option<String>,
    pub kernel: KernelSpec,
    /// Base synthetic duration; jittered per (seed, task, attempt).
    #[serde(default = "default_duration")]
    pub duration_ms: u64,
    /// Fault injection: the first `n` attempts fail.
    #[serde(default)]
    pub inject_failures: u32,
    /// Declares a task with no out params as meaningful anyway.
    #[serde(default)]
    pub side_effect: bool,
    #[serde(default)]
    pub publish: Option<PublishSpec>,
}

fn default_duration() -> u64 {
    DEFAULT_TASK_DURATION_MS
}

impl TaskSpec {
    pub fn new(name: &str, kernel: &str, kernel_params: Value) -> Self {
        TaskSpec {
            name: name.to_string(),
            kind: TaskKind::Inline,
            params: Vec::new(),
            constraints: Constraints::default(),
            failure_policy: FailurePolicy::default(),
            group: None,
            kernel: KernelSpec { name: kernel.to_string(), params: kernel_params },
            duration_ms: DEFAULT_TASK_DURATION_MS,
            inject_failures: 0,
            side_effect: false,
            publish: None,
        }
    }

    pub fn param(mut self, name: &str, direction: Direction) -> Self {
        self.params.push(ParamSpec { name: name.into(), direction, type_tag: String::new(), stream: false });
        self
    }
}

/// An argument for one task parameter.
#[derive(Clone, Debug)]
pub enum Arg {
    /// Literal input value.
    Value(TokenValue),
    /// Logical token name; the direction decides read vs. new version.
    Name(String),
    /// Explicit token reference (in-params only).
    Token(TokenId),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TaskState {
    Pending,
    Ready,
    Submitted,
    Running,
    Done,
    Failed,
    Cancelled,
}

impl TaskState {
    pub fn is_terminal(&self) -> bool {
        matches!(self, TaskState::Done | TaskState::Failed | TaskState::Cancelled)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TokenState {
    Unbound,
    Ready,
    Failed,
    Cancelled,
}

#[derive(Clone, Debug)]
pub struct Token {
    pub id: TokenId,
    pub logical: String,
    pub version: u32,
    pub producer: Option<TaskId>,
    pub state: TokenState,
    pub value: Option<TokenValue>,
    pub locality: BTreeSet<String>,
    pub error: Option<String>,
}

struct Assignment {
    /// Worker indices holding this task's cores.
    workers: Vec<usize>,
    cores_each: u32,
}

pub struct TaskNode {
    pub id: TaskId,
    pub spec: TaskSpec,
    pub state: TaskState,
    pub attempts: u32,
    pub reads: Vec<TokenId>,
    pub writes: Vec<TokenId>,
    pub error: Option<String>,
    assignment: Option<Assignment>,
    /// Outputs computed at attempt start, bound at completion.
    outputs: Option<Result<Vec<TokenValue>, String>>,
    exec_site: Option<String>,
    segments_left: u32,
    publish_idx: usize,
    cancel_requested: bool,
    blocked_on_channel: Option<ChannelId>,
    timer_tag: Option<u64>,
}

#[derive(Clone, Debug)]
pub struct Worker {
    pub node: String,
    pub site: String,
    pub site_kind: SiteKind,
    pub total_cores: u32,
    pub free_cores: u32,
}

impl Worker {
    fn qualified(&self) -> String {
        format!("{}/{}", self.site, self.node)
    }
}

struct Channel {
    name: String,
    capacity: usize,
    closed: bool,
    buffer: Vec<Value>,
    cursors: BTreeMap<String, usize>,
    /// Tasks whose next segment is deferred until the channel has room.
    blocked: Vec<TaskId>,
    max_in_flight_seen: usize,
}

impl Channel {
    fn in_flight(&self) -> usize {
        let min_cursor = self.cursors.values().copied().min().unwrap_or(0);
        self.buffer.len() - min_cursor
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ElasticityPolicy {
    pub high_watermark: usize,
    pub low_watermark: usize,
    pub hold_ms: u64,
    pub min_nodes: usize,
    pub max_nodes: usize,
    #[serde(default = "default_poll")]
    pub poll_ms: u64,
}

fn default_poll() -> u64 {
    1000
}

struct ElasticityRuntime {
    policy: ElasticityPolicy,
    job: JobId,
    site: String,
    site_kind: SiteKind,
    cores_per_node: u32,
    above_since: Option<VTime>,
    calm_since: Option<VTime>,
    timer_tag: Option<u64>,
}

enum TimerKind {
    Segment(TaskId),
    Elasticity,
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("arity mismatch: task '{task}' declares {declared} params, got {given} args")]
    ArityMismatch { task: String, declared: usize, given: usize },
    #[error("type mismatch: {0}")]
    TypeMismatch(String),
    #[error("engine is shutting down")]
    EngineShuttingDown,
    #[error("unknown group '{0}'")]
    UnknownGroup(String),
    #[error("unknown channel '{0}'")]
    UnknownChannel(String),
    #[error("channel '{0}' is closed")]
    ChannelClosed(String),
    #[error("token failed: {0}")]
    TokenFailed(String),
    #[error("token cancelled")]
    TokenCancelled,
    #[error("unknown token {0}")]
    UnknownToken(TokenId),
    #[error("engine stalled: no pending events while waiting")]
    Stalled,
}

/// The per-invocation task graph and scheduler state.
pub struct EngineCore {
    pub invocation: String,
    seed: u64,
    store: Arc<ObjectStore>,
    tasks: Vec<TaskNode>,
    tokens: Vec<Token>,
    current: HashMap<String, TokenId>,
    versions: HashMap<String, u32>,
    workers: Vec<Worker>,
    channels: Vec<Channel>,
    channel_ids: HashMap<String, ChannelId>,
    groups: HashMap<String, Vec<TaskId>>,
    timers: HashMap<u64, TimerKind>,
    pub job: Option<JobId>,
    elasticity: Option<ElasticityRuntime>,
    shutting_down: bool,
    pub workflow_error: Option<String>,
    lit_counter: u64,
}

impl EngineCore {
    pub fn new(invocation: &str, seed: u64, store: Arc<ObjectStore>) -> Self {
        EngineCore {
            invocation: invocation.to_string(),
            seed,
            store,
            tasks: Vec::new(),
            tokens: Vec::new(),
            current: HashMap::new(),
            versions: HashMap::new(),
            workers: Vec::new(),
            channels: Vec::new(),
            channel_ids: HashMap::new(),
            groups: HashMap::new(),
            timers: HashMap::new(),
            job: None,
            elasticity: None,
            shutting_down: false,
            workflow_error: None,
            lit_counter: 0,
        }
    }

    pub fn add_worker(&mut self, node: &str, site: &str, site_kind: SiteKind, cores: u32) {
        self.workers.push(Worker {
            node: node.to_string(),
            site: site.to_string(),
            site_kind,
            total_cores: cores,
            free_cores: cores,
        });
    }

    pub fn remove_idle_worker(&mut self, node: &str, site: &str) -> bool {
        if let Some(i) = self
            .workers
            .iter()
            .position(|w| w.node == node && w.site == site && w.free_cores == w.total_cores)
        {
            self.workers.remove(i);
            true
        } else {
            false
        }
    }

    pub fn workers(&self) -> &[Worker] {
        &self.workers
    }

    // ------------------------------------------------------------------
    // Tokens

    fn new_token(&mut self, logical: &str, version: u32, producer: Option<TaskId>) -> TokenId {
        let id = self.tokens.len();
        self.tokens.push(Token {
            id,
            logical: logical.to_string(),
            version,
            producer,
            state: TokenState::Unbound,
            value: None,
            locality: BTreeSet::new(),
            error: None,
        });
        id
    }

    /// Binds a workflow input: version 0 of the logical name, READY.
    pub fn bind_input(&mut self, name: &str, value: TokenValue) -> TokenId {
        let id = match self.current.get(name) {
            Some(&id) if self.tokens[id].version == 0 && self.tokens[id].producer.is_none() => id,
            _ => {
                let id = self.new_token(name, 0, None);
                self.current.insert(name.to_string(), id);
                self.versions.insert(name.to_string(), 0);
                id
            }
        };
        self.tokens[id].state = TokenState::Ready;
        self.tokens[id].locality = self.value_locality(&value);
        self.tokens[id].value = Some(value);
        self.promote_ready();
        id
    }

    fn current_or_input(&mut self, name: &str) -> TokenId {
        if let Some(&id) = self.current.get(name) {
            return id;
        }
        // Reading a never-written name declares a workflow input awaiting
        // a bind_input call.
        let id = self.new_token(name, 0, None);
        self.current.insert(name.to_string(), id);
        self.versions.insert(name.to_string(), 0);
        id
    }

    pub fn token(&self, id: TokenId) -> Result<&Token, EngineError> {
        self.tokens.get(id).ok_or(EngineError::UnknownToken(id))
    }

    pub fn current_token(&self, name: &str) -> Option<&Token> {
        self.current.get(name).map(|&id| &self.tokens[id])
    }

    /// Non-blocking wait check: `Some` when the token is resolved.
    pub fn try_wait(&self, id: TokenId) -> Result<Option<TokenValue>, EngineError> {
        let t = self.token(id)?;
        match t.state {
            TokenState::Ready => Ok(Some(t.value.clone().expect("ready token has a value"))),
            TokenState::Failed => Err(EngineError::TokenFailed(
                t.error.clone().unwrap_or_else(|| "task failed".into()),
            )),
            TokenState::Cancelled => Err(EngineError::TokenCancelled),
            TokenState::Unbound => Ok(None),
        }
    }

    fn value_locality(&self, v: &TokenValue) -> BTreeSet<String> {
        match v {
            TokenValue::File { site, .. } => BTreeSet::from([site.clone()]),
            TokenValue::Object { oid } => self.store.locations(oid).unwrap_or_default(),
            _ => BTreeSet::new(),
        }
    }

    // ------------------------------------------------------------------
    // Submission

    pub fn submit(&mut self, spec: TaskSpec, args: Vec<Arg>) -> Result<Vec<TokenId>, EngineError> {
        if self.shutting_down {
            return Err(EngineError::EngineShuttingDown);
        }
        if args.len() != spec.params.len() {
            return Err(EngineError::ArityMismatch {
                task: spec.name.clone(),
                declared: spec.params.len(),
                given: args.len(),
            });
        }
        if spec.params.is_empty() && !spec.side_effect {
            return Err(EngineError::TypeMismatch(format!(
                "task '{}' has no params and no side-effect flag",
                spec.name
            )));
        }
        if let FailurePolicy::Retry(k) = spec.failure_policy {
            if k < 1 {
                return Err(EngineError::TypeMismatch("RETRY requires k >= 1".into()));
            }
        }
        if let TaskKind::Multinode { nodes, .. } = spec.kind {
            if nodes < 1 {
                return Err(EngineError::TypeMismatch("multinode requires nodes >= 1".into()));
            }
        }

        let tid = self.tasks.len();
        let mut reads = Vec::new();
        let mut writes: Vec<(String, Option<TokenId>)> = Vec::new();
        for (p, a) in spec.params.iter().zip(&args) {
            match (p.direction, a) {
                (Direction::In, Arg::Value(v)) => {
                    self.lit_counter += 1;
                    let name = format!("_lit{}", self.lit_counter);
                    let id = self.new_token(&name, 0, None);
                    self.tokens[id].state = TokenState::Ready;
                    self.tokens[id].locality = self.value_locality(v);
                    self.tokens[id].value = Some(v.clone());
                    reads.push(id);
                }
                (Direction::In, Arg::Name(n)) => reads.push(self.current_or_input(n)),
                (Direction::In, Arg::Token(id)) => {
                    if *id >= self.tokens.len() {
                        return Err(EngineError::UnknownToken(*id));
                    }
                    reads.push(*id);
                }
                (Direction::Inout, Arg::Name(n)) => {
                    reads.push(self.current_or_input(n));
                    writes.push((n.clone(), None));
                }
                (Direction::Out, Arg::Name(n)) => writes.push((n.clone(), None)),
                (d, a) => {
                    return Err(EngineError::TypeMismatch(format!(
                        "param '{}' ({d:?}) cannot bind {a:?}",
                        p.name
                    )));
                }
            }
        }
        // New versions are created after all reads resolved, so an inout
        // param reads the version preceding the one it writes.
        let mut write_ids = Vec::new();
        for (name, slot) in &mut writes {
            let v = self.versions.get(name.as_str()).map(|&v| v + 1).unwrap_or(0);
            let id = self.new_token(name, v, Some(tid));
            self.versions.insert(name.clone(), v);
            self.current.insert(name.clone(), id);
            *slot = Some(id);
            write_ids.push(id);
        }

        if let Some(g) = &spec.group {
            self.groups.entry(g.clone()).or_default().push(tid);
        }
        let ready = reads.iter().all(|&r| self.tokens[r].state == TokenState::Ready);
        self.tasks.push(TaskNode {
            id: tid,
            spec,
            state: if ready { TaskState::Ready } else { TaskState::Pending },
            attempts: 0,
            reads,
            writes: write_ids.clone(),
            error: None,
            assignment: None,
            outputs: None,
            exec_site: None,
            segments_left: 0,
            publish_idx: 0,
            cancel_requested: false,
            blocked_on_channel: None,
            timer_tag: None,
        });
        // A task submitted onto an already-cancelled or failed lineage is
        // resolved immediately.
        if self.tasks[tid]
            .reads
            .iter()
            .any(|&r| matches!(self.tokens[r].state, TokenState::Cancelled | TokenState::Failed))
        {
            self.cancel_task_now(tid);
        }
        Ok(write_ids)
    }

    /// Producer→consumer edges implied by token reads.
    pub fn edges(&self) -> BTreeSet<(TaskId, TaskId)> {
        let mut e = BTreeSet::new();
        for t in &self.tasks {
            for &r in &t.reads {
                if let Some(p) = self.tokens[r].producer {
                    e.insert((p, t.id));
                }
            }
        }
        e
    }

    pub fn task(&self, id: TaskId) -> &TaskNode {
        &self.tasks[id]
    }

    pub fn task_count(&self) -> usize {
        self.tasks.len()
    }

    pub fn tasks(&self) -> &[TaskNode] {
        &self.tasks
    }

    pub fn all_terminal(&self) -> bool {
        self.tasks.iter().all(|t| t.state.is_terminal())
    }

    pub fn ready_queue_len(&self) -> usize {
        self.tasks.iter().filter(|t| t.state == TaskState::Ready).count()
    }

    pub fn shutting_down(&self) -> bool {
        self.shutting_down
    }

    // ------------------------------------------------------------------
    // Scheduling

    fn score(&self, task: &TaskNode, site: &str) -> f64 {
        let mut local = 0u64;
        let mut total = 0u64;
        for &r in &task.reads {
            let tok = &self.tokens[r];
            let Some(v) = &tok.value else { continue };
            let size = match v {
                TokenValue::Object { oid } => self.store.size_bytes(oid),
                other => other.size_bytes(),
            };
            total += size;
            let is_local = match v {
                // Inline values travel with the graph; local everywhere.
                TokenValue::Inline { .. } | TokenValue::Null => true,
                _ => tok.locality.contains(site),
            };
            if is_local {
                local += size;
            }
        }
        if total == 0 {
            0.0
        } else {
            local as f64 / total as f64
        }
    }

    fn worker_eligible(&self, w: &Worker, task: &TaskNode) -> bool {
        if let Some(k) = task.spec.constraints.site_kind {
            if w.site_kind != k {
                return false;
            }
        }
        true
    }

    fn find_placement(&self, tid: TaskId) -> Option<Assignment> {
        let task = &self.tasks[tid];
        match task.spec.kind.cores_on_one_node() {
            Some(cores) => {
                let mut best: Option<(f64, String, usize)> = None;
                for (i, w) in self.workers.iter().enumerate() {
                    if w.free_cores < cores || !self.worker_eligible(w, task) {
                        continue;
                    }
                    let s = self.score(task, &w.site);
                    let key = (s, w.qualified(), i);
                    match &best {
                        Some((bs, bn, _)) if s < *bs || (s == *bs && key.1 >= *bn) => {}
                        _ => best = Some(key),
                    }
                }
                best.map(|(_, _, i)| Assignment { workers: vec![i], cores_each: cores })
            }
            None => {
                let TaskKind::Multinode { nodes, .. } = task.spec.kind else { unreachable!() };
                let need = nodes as usize;
                // Group fully-free eligible workers per site.
                let mut per_site: BTreeMap<String, Vec<usize>> = BTreeMap::new();
                for (i, w) in self.workers.iter().enumerate() {
                    if w.free_cores == w.total_cores && self.worker_eligible(w, task) {
                        per_site.entry(w.site.clone()).or_default().push(i);
                    }
                }
                let mut best: Option<(f64, String, Vec<usize>)> = None;
                for (site, mut idxs) in per_site {
                    if idxs.len() < need {
                        continue;
                    }
                    idxs.sort_by(|&a, &b| self.workers[a].node.cmp(&self.workers[b].node));
                    let s = self.score(task, &site);
                    match &best {
                        Some((bs, bn, _)) if s < *bs || (s == *bs && site >= *bn) => {}
                        _ => best = Some((s, site, idxs[..need].to_vec())),
                    }
                }
                best.map(|(_, _, workers)| Assignment { workers, cores_each: u32::MAX })
            }
        }
    }

    /// List scheduling over the READY set in FIFO submission order.
    pub fn schedule_ready(&mut self, cluster: &mut Cluster) {
        loop {
            let ready: Vec<TaskId> = self
                .tasks
                .iter()
                .filter(|t| t.state == TaskState::Ready)
                .map(|t| t.id)
                .collect();
            let mut progressed = false;
            for tid in ready {
                if self.tasks[tid].state != TaskState::Ready {
                    continue;
                }
                if let Some(a) = self.find_placement(tid) {
                    self.start_task(tid, a, cluster);
                    progressed = true;
                }
            }
            if !progressed {
                return;
            }
        }
    }

    fn start_task(&mut self, tid: TaskId, assignment: Assignment, cluster: &mut Cluster) {
        debug_assert!(
            self.tasks[tid].reads.iter().all(|&r| self.tokens[r].state == TokenState::Ready),
            "task started with unresolved read token"
        );
        for &wi in &assignment.workers {
            let w = &mut self.workers[wi];
            if assignment.cores_each == u32::MAX {
                w.free_cores = 0;
            } else {
                w.free_cores -= assignment.cores_each;
            }
        }
        let site = self.workers[assignment.workers[0]].site.clone();
        let node = self.workers[assignment.workers[0]].qualified();
        let t = &mut self.tasks[tid];
        t.state = TaskState::Submitted;
        t.attempts += 1;
        t.assignment = Some(assignment);
        t.exec_site = Some(site.clone());
        let attempt = t.attempts;
        let name = t.spec.name.clone();
        cluster.record(
            "task_state",
            serde_json::json!({"invocation": self.invocation, "task": tid, "name": name, "state": "SUBMITTED", "node": node}),
        );

        // Outputs are a pure function of the inputs, computed up front and
        // bound when the final segment completes.
        let inputs: Vec<TokenValue> = self.tasks[tid]
            .reads
            .iter()
            .map(|&r| self.tokens[r].value.clone().expect("ready token"))
            .collect();
        let ctx = KernelCtx { store: &self.store, site: &site };
        let out = run_kernel(&self.tasks[tid].spec.kernel.name, &self.tasks[tid].spec.kernel.params, &inputs, &ctx);

        let t = &mut self.tasks[tid];
        t.outputs = Some(out);
        t.state = TaskState::Running;
        t.publish_idx = 0;
        cluster.record(
            "task_state",
            serde_json::json!({"invocation": self.invocation, "task": tid, "name": t.spec.name, "state": "RUNNING"}),
        );

        let (segments, interval) = match &t.spec.publish {
            Some(p) if !p.values.is_empty() => (p.values.len() as u32, p.interval_ms),
            _ => {
                // Jitter varies the schedule across seeds without touching
                // any computed value.
                let mut rng = ChaCha8Rng::seed_from_u64(
                    self.seed
                        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                        .wrapping_add((tid as u64) << 8)
                        .wrapping_add(attempt as u64),
                );
                let base = t.spec.duration_ms;
                let jitter = if base >= 4 { rng.random_range(0..=base / 4) } else { 0 };
                (1, base + jitter)
            }
        };
        t.segments_left = segments;
        let tag = cluster.next_timer_tag();
        t.timer_tag = Some(tag);
        self.timers.insert(tag, TimerKind::Segment(tid));
        cluster.schedule_timer(interval, tag);
    }

    fn release_resources(&mut self, tid: TaskId) {
        if let Some(a) = self.tasks[tid].assignment.take() {
            for wi in a.workers {
                if let Some(w) = self.workers.get_mut(wi) {
                    if a.cores_each == u32::MAX {
                        w.free_cores = w.total_cores;
                    } else {
                        w.free_cores = (w.free_cores + a.cores_each).min(w.total_cores);
                    }
                }
            }
        }
    }

    // ------------------------------------------------------------------
    // Timers and completion

    /// Routes a fired cluster timer; returns false if the tag isn't ours.
    pub fn handle_timer(&mut self, tag: u64, cluster: &mut Cluster) -> bool {
        match self.timers.remove(&tag) {
            Some(TimerKind::Segment(tid)) => {
                if self.tasks[tid].timer_tag == Some(tag) {
                    self.tasks[tid].timer_tag = None;
                    self.on_segment_boundary(tid, cluster);
                }
                true
            }
            Some(TimerKind::Elasticity) => {
                self.on_elasticity_tick(cluster);
                true
            }
            None => false,
        }
    }

    fn on_segment_boundary(&mut self, tid: TaskId, cluster: &mut Cluster) {
        if self.tasks[tid].state != TaskState::Running {
            return;
        }
        // Segment boundaries are the cooperative cancellation checkpoints.
        if self.tasks[tid].cancel_requested {
            self.finish_cancelled(tid, cluster);
            self.schedule_ready(cluster);
            return;
        }
        if let Some(p) = self.tasks[tid].spec.publish.clone() {
            let idx = self.tasks[tid].publish_idx;
            if idx < p.values.len() {
                let chid = match self.channel_ids.get(&p.channel) {
                    Some(&c) => c,
                    None => {
                        self.fail_attempt(tid, format!("unknown channel '{}'", p.channel), cluster);
                        return;
                    }
                };
                let ch = &mut self.channels[chid];
                if ch.closed {
                    self.fail_attempt(tid, format!("channel '{}' closed", p.channel), cluster);
                    return;
                }
                if ch.in_flight() >= ch.capacity {
                    // Backpressure: park until a poll frees room.
                    ch.blocked.push(tid);
                    self.tasks[tid].blocked_on_channel = Some(chid);
                    return;
                }
                ch.buffer.push(p.values[idx].clone());
                let occupied = ch.in_flight();
                ch.max_in_flight_seen = ch.max_in_flight_seen.max(occupied);
                self.tasks[tid].publish_idx += 1;
            }
        }
        self.tasks[tid].segments_left -= 1;
        if self.tasks[tid].segments_left == 0 {
            self.complete_attempt(tid, cluster);
        } else {
            let interval = self.tasks[tid].spec.publish.as_ref().map(|p| p.interval_ms).unwrap_or(0);
            let tag = cluster.next_timer_tag();
            self.tasks[tid].timer_tag = Some(tag);
            self.timers.insert(tag, TimerKind::Segment(tid));
            cluster.schedule_timer(interval, tag);
        }
        self.schedule_ready(cluster);
    }

    fn complete_attempt(&mut self, tid: TaskId, cluster: &mut Cluster) {
        let injected = self.tasks[tid].attempts <= self.tasks[tid].spec.inject_failures;
        let outcome = if injected {
            Err(format!("injected fault (attempt {})", self.tasks[tid].attempts))
        } else {
            self.tasks[tid].outputs.take().expect("outputs computed at start")
        };
        match outcome {
            Ok(values) => {
                if values.len() != self.tasks[tid].writes.len() {
                    self.fail_attempt(
                        tid,
                        format!(
                            "kernel produced {} values for {} out params",
                            values.len(),
                            self.tasks[tid].writes.len()
                        ),
                        cluster,
                    );
                    return;
                }
                self.release_resources(tid);
                let site = self.tasks[tid].exec_site.clone().unwrap_or_default();
                self.tasks[tid].state = TaskState::Done;
                cluster.record(
                    "task_state",
                    serde_json::json!({"invocation": self.invocation, "task": tid, "name": self.tasks[tid].spec.name, "state": "DONE"}),
                );
                let writes = self.tasks[tid].writes.clone();
                for (w, v) in writes.into_iter().zip(values) {
                    let mut loc = self.value_locality(&v);
                    loc.insert(site.clone());
                    let tok = &mut self.tokens[w];
                    tok.state = TokenState::Ready;
                    tok.locality = loc;
                    tok.value = Some(v);
                }
                self.promote_ready();
                self.schedule_ready(cluster);
            }
            Err(e) => self.fail_attempt(tid, e, cluster),
        }
    }

    fn fail_attempt(&mut self, tid: TaskId, error: String, cluster: &mut Cluster) {
        self.release_resources(tid);
        cluster.record(
            "task_attempt_failed",
            serde_json::json!({"invocation": self.invocation, "task": tid, "attempt": self.tasks[tid].attempts, "error": error}),
        );
        let policy = self.tasks[tid].spec.failure_policy.clone();
        match policy {
            FailurePolicy::Retry(k) if self.tasks[tid].attempts < k => {
                self.tasks[tid].state = TaskState::Ready;
                self.tasks[tid].outputs = None;
                self.schedule_ready(cluster);
            }
            FailurePolicy::Retry(_) | FailurePolicy::CancelSuccessors => {
                self.tasks[tid].state = TaskState::Failed;
                self.tasks[tid].error = Some(error.clone());
                cluster.record(
                    "task_state",
                    serde_json::json!({"invocation": self.invocation, "task": tid, "name": self.tasks[tid].spec.name, "state": "FAILED"}),
                );
                let writes = self.tasks[tid].writes.clone();
                for w in writes {
                    self.resolve_token_cancelled(w);
                }
                self.schedule_ready(cluster);
            }
            FailurePolicy::Ignore => {
                // Consumers receive the typed null marker and must handle it.
                self.tasks[tid].state = TaskState::Done;
                self.tasks[tid].error = Some(error);
                cluster.record(
                    "task_state",
                    serde_json::json!({"invocation": self.invocation, "task": tid, "name": self.tasks[tid].spec.name, "state": "DONE", "ignored_failure": true}),
                );
                let writes = self.tasks[tid].writes.clone();
                for w in writes {
                    let tok = &mut self.tokens[w];
                    tok.state = TokenState::Ready;
                    tok.value = Some(TokenValue::Null);
                }
                self.promote_ready();
                self.schedule_ready(cluster);
            }
            FailurePolicy::FailWorkflow => {
                self.tasks[tid].state = TaskState::Failed;
                self.tasks[tid].error = Some(error.clone());
                cluster.record(
                    "task_state",
                    serde_json::json!({"invocation": self.invocation, "task": tid, "name": self.tasks[tid].spec.name, "state": "FAILED"}),
                );
                let writes = self.tasks[tid].writes.clone();
                for w in writes {
                    let tok = &mut self.tokens[w];
                    if tok.state == TokenState::Unbound {
                        tok.state = TokenState::Failed;
                        tok.error = Some(error.clone());
                    }
                }
                self.workflow_error = Some(error);
                self.shutting_down = true;
                self.cancel_all_nonterminal();
            }
        }
    }

    fn finish_cancelled(&mut self, tid: TaskId, cluster: &mut Cluster) {
        self.release_resources(tid);
        self.tasks[tid].state = TaskState::Cancelled;
        cluster.record(
            "task_state",
            serde_json::json!({"invocation": self.invocation, "task": tid, "name": self.tasks[tid].spec.name, "state": "CANCELLED"}),
        );
        let writes = self.tasks[tid].writes.clone();
        for w in writes {
            self.resolve_token_cancelled(w);
        }
    }

    fn promote_ready(&mut self) {
        for i in 0..self.tasks.len() {
            if self.tasks[i].state == TaskState::Pending
                && self.tasks[i].reads.iter().all(|&r| self.tokens[r].state == TokenState::Ready)
            {
                self.tasks[i].state = TaskState::Ready;
            }
        }
    }

    /// Cancels a token and transitively every task reading it.
    fn resolve_token_cancelled(&mut self, tok: TokenId) {
        if matches!(self.tokens[tok].state, TokenState::Cancelled | TokenState::Failed) {
            return;
        }
        if self.tokens[tok].state == TokenState::Ready {
            return; // already produced; consumers keep the value
        }
        self.tokens[tok].state = TokenState::Cancelled;
        let readers: Vec<TaskId> = self
            .tasks
            .iter()
            .filter(|t| !t.state.is_terminal() && t.reads.contains(&tok))
            .map(|t| t.id)
            .collect();
        for r in readers {
            self.cancel_task_now(r);
        }
    }

    fn cancel_task_now(&mut self, tid: TaskId) {
        match self.tasks[tid].state {
            TaskState::Pending | TaskState::Ready => {
                self.tasks[tid].state = TaskState::Cancelled;
                let writes = self.tasks[tid].writes.clone();
                for w in writes {
                    self.resolve_token_cancelled(w);
                }
            }
            TaskState::Submitted | TaskState::Running => {
                // Cooperative: honored at the next segment checkpoint.
                self.tasks[tid].cancel_requested = true;
            }
            _ => {}
        }
    }

    fn cancel_all_nonterminal(&mut self) {
        for i in 0..self.tasks.len() {
            self.cancel_task_now(i);
        }
    }

    /// Cancels the whole graph and refuses further submissions.
    pub fn cancel_all(&mut self) {
        self.shutting_down = true;
        self.cancel_all_nonterminal();
    }

    // ------------------------------------------------------------------
    // Group exceptions

    pub fn throw_group_exception(&mut self, group: &str) -> Result<(), EngineError> {
        let members = self.groups.get(group).cloned().ok_or_else(|| EngineError::UnknownGroup(group.to_string()))?;
        for tid in members {
            self.cancel_task_now(tid);
        }
        Ok(())
    }

    /// Declares a group so an exception on it is valid even while empty.
    pub fn declare_group(&mut self, group: &str) {
        self.groups.entry(group.to_string()).or_default();
    }

    pub fn group_members(&self, group: &str) -> Option<&[TaskId]> {
        self.groups.get(group).map(|v| v.as_slice())
    }

    // ------------------------------------------------------------------
    // Streams

    pub fn open_stream(&mut self, name: &str, capacity: usize) -> ChannelId {
        if let Some(&id) = self.channel_ids.get(name) {
            return id;
        }
        let id = self.channels.len();
        self.channels.push(Channel {
            name: name.to_string(),
            capacity: capacity.max(1),
            closed: false,
            buffer: Vec::new(),
            cursors: BTreeMap::new(),
            blocked: Vec::new(),
            max_in_flight_seen: 0,
        });
        self.channel_ids.insert(name.to_string(), id);
        id
    }

    pub fn channel_id(&self, name: &str) -> Result<ChannelId, EngineError> {
        self.channel_ids.get(name).copied().ok_or_else(|| EngineError::UnknownChannel(name.to_string()))
    }

    /// Publishes from the main program; `Ok(false)` means the channel is
    /// full and the caller should pump events and retry (backpressure).
    pub fn try_publish(&mut self, ch: ChannelId, elem: Value) -> Result<bool, EngineError> {
        let c = self.channels.get_mut(ch).ok_or_else(|| EngineError::UnknownChannel(format!("#{ch}")))?;
        if c.closed {
            return Err(EngineError::ChannelClosed(c.name.clone()));
        }
        if c.in_flight() >= c.capacity {
            return Ok(false);
        }
        c.buffer.push(elem);
        let occupied = c.in_flight();
        c.max_in_flight_seen = c.max_in_flight_seen.max(occupied);
        Ok(true)
    }

    /// Returns up to `max` elements past the consumer's cursor, advances
    /// the cursor, and unparks publishers blocked on backpressure.
    pub fn poll(
        &mut self,
        ch: ChannelId,
        consumer: &str,
        max: usize,
        cluster: &mut Cluster,
    ) -> Result<Vec<Value>, EngineError> {
        let c = self.channels.get_mut(ch).ok_or_else(|| EngineError::UnknownChannel(format!("#{ch}")))?;
        let cursor = c.cursors.entry(consumer.to_string()).or_insert(0);
        let start = *cursor;
        let end = (start + max).min(c.buffer.len());
        let out = c.buffer[start..end].to_vec();
        *cursor = end;
        let blocked = std::mem::take(&mut c.blocked);
        for tid in blocked {
            if self.tasks[tid].blocked_on_channel == Some(ch) {
                self.tasks[tid].blocked_on_channel = None;
                let tag = cluster.next_timer_tag();
                self.tasks[tid].timer_tag = Some(tag);
                self.timers.insert(tag, TimerKind::Segment(tid));
                cluster.schedule_timer(0, tag);
            }
        }
        Ok(out)
    }

    pub fn close_stream(&mut self, ch: ChannelId) -> Result<(), EngineError> {
        let c = self.channels.get_mut(ch).ok_or_else(|| EngineError::UnknownChannel(format!("#{ch}")))?;
        c.closed = true;
        Ok(())
    }

    pub fn stream_closed(&self, ch: ChannelId) -> bool {
        self.channels.get(ch).map(|c| c.closed).unwrap_or(true)
    }

    pub fn stream_len(&self, ch: ChannelId) -> usize {
        self.channels.get(ch).map(|c| c.buffer.len()).unwrap_or(0)
    }

    /// Peak buffer occupancy observed, for backpressure verification.
    pub fn stream_max_in_flight(&self, ch: ChannelId) -> usize {
        self.channels.get(ch).map(|c| c.max_in_flight_seen).unwrap_or(0)
    }

    pub fn stream_name(&self, ch: ChannelId) -> Option<&str> {
        self.channels.get(ch).map(|c| c.name.as_str())
    }

    // ------------------------------------------------------------------
    // Elasticity

    pub fn enable_elasticity(
        &mut self,
        policy: ElasticityPolicy,
        job: JobId,
        site: &str,
        site_kind: SiteKind,
        cores_per_node: u32,
        cluster: &mut Cluster,
    ) {
        let tag = cluster.next_timer_tag();
        self.timers.insert(tag, TimerKind::Elasticity);
        cluster.schedule_timer(policy.poll_ms, tag);
        self.elasticity = Some(ElasticityRuntime {
            policy,
            job,
            site: site.to_string(),
            site_kind,
            cores_per_node,
            above_since: None,
            calm_since: None,
            timer_tag: Some(tag),
        });
    }

    fn on_elasticity_tick(&mut self, cluster: &mut Cluster) {
        let ready = self.ready_queue_len();
        let now = cluster.now;
        let Some(rt) = &mut self.elasticity else { return };
        rt.timer_tag = None;
        let policy = rt.policy.clone();
        let job = rt.job;
        let site = rt.site.clone();
        let kind = rt.site_kind;
        let cores = rt.cores_per_node;

        // Growth: sustained backlog above the high watermark.
        let mut grow = false;
        if ready > policy.high_watermark && self.workers.len() < policy.max_nodes {
            match rt.above_since {
                None => rt.above_since = Some(now),
                Some(since) if now - since >= policy.hold_ms => {
                    grow = true;
                    rt.above_since = Some(now);
                }
                _ => {}
            }
        } else {
            rt.above_since = None;
        }

        // Shrink: sustained calm below the low watermark with idle workers.
        let idle_worker = self
            .workers
            .iter()
            .filter(|w| w.free_cores == w.total_cores && w.site == site)
            .map(|w| w.node.clone())
            .max();
        let mut shrink: Option<String> = None;
        if ready < policy.low_watermark && idle_worker.is_some() && self.workers.len() > policy.min_nodes {
            match rt.calm_since {
                None => rt.calm_since = Some(now),
                Some(since) if now - since >= policy.hold_ms => {
                    shrink = idle_worker;
                    rt.calm_since = Some(now);
                }
                _ => {}
            }
        } else {
            rt.calm_since = None;
        }

        if grow {
            if let Ok(Some(node)) = cluster.grow_allocation(job) {
                self.add_worker(&node, &site, kind, cores);
                self.schedule_ready(cluster);
            }
        }
        if let Some(node) = shrink {
            if self.remove_idle_worker(&node, &site) {
                let _ = cluster.shrink_allocation(job, &node);
            }
        }

        // Keep polling until the graph drains and the engine shuts down.
        if !(self.shutting_down && self.all_terminal()) {
            let tag = cluster.next_timer_tag();
            self.timers.insert(tag, TimerKind::Elasticity);
            cluster.schedule_timer(policy.poll_ms, tag);
            if let Some(rt) = &mut self.elasticity {
                rt.timer_tag = Some(tag);
            }
        }
    }

    pub fn stop_elasticity(&mut self, cluster: &mut Cluster) {
        if let Some(rt) = self.elasticity.take() {
            if let Some(tag) = rt.timer_tag {
                cluster.cancel_timer(tag);
                self.timers.remove(&tag);
            }
        }
    }
}


#[cfg(test)]
mod tests {
    use super::testutil::*;
    use super::*;
    use serde_json::json;

    fn one_worker() -> EngineCore {
        engine_with_workers(1, &[("n000", "hpcA", SiteKind::Hpc, 8)])
    }

    fn emit(name: &str, out: &str, v: i64) -> (TaskSpec, Vec<Arg>) {
        let spec = TaskSpec::new(name, "emit", json!({"value": v})).param("o", Direction::Out);
        (spec, vec![Arg::Name(out.into())])
    }

    fn sum(name: &str, ins: &[&str], out: &str) -> (TaskSpec, Vec<Arg>) {
        let mut spec = TaskSpec::new(name, "sum", json!({}));
        let mut args = Vec::new();
        for (i, n) in ins.iter().enumerate() {
            spec = spec.param(&format!("i{i}"), Direction::In);
            args.push(Arg::Name(n.to_string()));
        }
        spec = spec.param("o", Direction::Out);
        args.push(Arg::Name(out.to_string()));
        (spec, args)
    }

    #[test]
    fn diamond_edges_from_data_directions() {
        let mut e = one_worker();
        let (s, a) = emit("t1", "a", 1);
        e.submit(s, a).unwrap();
        let (s, a) = sum("t2", &["a"], "b");
        e.submit(s, a).unwrap();
        let (s, a) = sum("t3", &["a"], "c");
        e.submit(s, a).unwrap();
        let (s, a) = sum("t4", &["b", "c"], "d");
        e.submit(s, a).unwrap();
        let expect: BTreeSet<(usize, usize)> = [(0, 1), (0, 2), (1, 3), (2, 3)].into_iter().collect();
        assert_eq!(e.edges(), expect);
    }

    #[test]
    fn inout_chain_is_strictly_serialized_by_versions() {
        let mut e = one_worker();
        e.bind_input("x", TokenValue::inline(0));
        for i in 0..3 {
            let spec = TaskSpec::new(&format!("t{i}"), "sum", json!({})).param("x", Direction::Inout);
            e.submit(spec, vec![Arg::Name("x".into())]).unwrap();
        }
        let expect: BTreeSet<(usize, usize)> = [(0, 1), (1, 2)].into_iter().collect();
        assert_eq!(e.edges(), expect);
        // Versions x1, x2, x3 created on top of the input x0.
        assert_eq!(e.current_token("x").unwrap().version, 3);
    }

    #[test]
    fn values_match_sequential_oracle() {
        let mut e = one_worker();
        let mut c = bare_cluster();
        let (s, a) = emit("t1", "a", 3);
        e.submit(s, a).unwrap();
        let (s, a) = emit("t2", "b", 4);
        e.submit(s, a).unwrap();
        let (s, a) = sum("t3", &["a", "b"], "c");
        e.submit(s, a).unwrap();
        drain(&mut e, &mut c);
        let tok = e.current_token("c").unwrap();
        assert_eq!(tok.state, TokenState::Ready);
        assert_eq!(tok.value, Some(TokenValue::inline(7)));
    }

    #[test]
    fn retry_counts_attempts_then_succeeds() {
        let mut e = one_worker();
        let mut c = bare_cluster();
        let mut spec = TaskSpec::new("flaky", "emit", json!({"value": 1})).param("o", Direction::Out);
        spec.failure_policy = FailurePolicy::Retry(3);
        spec.inject_failures = 2;
        e.submit(spec, vec![Arg::Name("r".into())]).unwrap();
        drain(&mut e, &mut c);
        assert_eq!(e.task(0).state, TaskState::Done);
        assert_eq!(e.task(0).attempts, 3);
        assert_eq!(e.current_token("r").unwrap().value, Some(TokenValue::inline(1)));
    }

    #[test]
    fn cancel_successors_matches_reachability_oracle() {
        let mut e = one_worker();
        let mut c = bare_cluster();
        let (s, a) = emit("t1", "a", 1);
        e.submit(s, a).unwrap();
        let mut s2 = TaskSpec::new("t2", "fail", json!({"message": "boom"})).param("a", Direction::In).param("b", Direction::Out);
        s2.failure_policy = FailurePolicy::CancelSuccessors;
        e.submit(s2, vec![Arg::Name("a".into()), Arg::Name("b".into())]).unwrap();
        let (s, a) = sum("t3", &["a"], "c");
        e.submit(s, a).unwrap();
        let (s, a) = sum("t4", &["b", "c"], "d");
        e.submit(s, a).unwrap();
        drain(&mut e, &mut c);

        assert_eq!(e.task(0).state, TaskState::Done);
        assert_eq!(e.task(1).state, TaskState::Failed);
        assert_eq!(e.task(2).state, TaskState::Done, "t3 reads only 'a' and must be unaffected");
        assert_eq!(e.task(3).state, TaskState::Cancelled);

        // Reachability oracle over token-read edges from the failed task.
        let edges = e.edges();
        let mut reach = BTreeSet::from([1usize]);
        loop {
            let next: Vec<usize> =
                edges.iter().filter(|(p, c)| reach.contains(p) && !reach.contains(c)).map(|(_, c)| *c).collect();
            if next.is_empty() {
                break;
            }
            reach.extend(next);
        }
        for t in e.tasks() {
            let expect_cancel = reach.contains(&t.id) && t.id != 1;
            assert_eq!(t.state == TaskState::Cancelled, expect_cancel, "task {}", t.id);
        }
    }

    #[test]
    fn ignore_policy_yields_null_marker() {
        let mut e = one_worker();
        let mut c = bare_cluster();
        let mut s1 = TaskSpec::new("member", "fail", json!({})).param("m", Direction::Out);
        s1.failure_policy = FailurePolicy::Ignore;
        e.submit(s1, vec![Arg::Name("m".into())]).unwrap();
        let (s, a) = sum("agg", &["m"], "total");
        e.submit(s, a).unwrap();
        drain(&mut e, &mut c);
        assert_eq!(e.task(0).state, TaskState::Done);
        assert_eq!(e.task(1).state, TaskState::Done);
        assert_eq!(e.current_token("m").unwrap().value, Some(TokenValue::Null));
        assert_eq!(e.current_token("total").unwrap().value, Some(TokenValue::inline(0)));
    }

    #[test]
    fn fail_workflow_cancels_everything() {
        let mut e = one_worker();
        let mut c = bare_cluster();
        let mut s1 = TaskSpec::new("t1", "fail", json!({"message": "fatal"})).param("a", Direction::Out);
        s1.failure_policy = FailurePolicy::FailWorkflow;
        e.submit(s1, vec![Arg::Name("a".into())]).unwrap();
        let (s, a) = emit("t2", "b", 9);
        e.submit(s, a).unwrap();
        drain(&mut e, &mut c);
        assert!(e.workflow_error.is_some());
        assert!(matches!(e.try_wait(e.task(0).writes[0]), Err(EngineError::TokenFailed(_))));
        assert!(e.submit(TaskSpec::new("t3", "noop", json!({})), vec![]).is_err());
    }

    #[test]
    fn group_exception_cancels_pending_members() {
        let mut e = one_worker();
        let mut c = bare_cluster();
        e.bind_input("gate", TokenValue::inline(0));
        // Hold members PENDING behind an unbound token.
        let mut out_tokens = Vec::new();
        for i in 0..5 {
            let mut spec = TaskSpec::new(&format!("m{i}"), "emit", json!({"value": i}))
                .param("g", Direction::In)
                .param("o", Direction::Out);
            spec.group = Some("ens".into());
            let outs = e.submit(spec, vec![Arg::Name("never".into()), Arg::Name(format!("o{i}"))]).unwrap();
            out_tokens.push(outs[0]);
        }
        e.throw_group_exception("ens").unwrap();
        assert!(e.throw_group_exception("nope").is_err());
        for t in 0..5 {
            assert_eq!(e.task(t).state, TaskState::Cancelled);
            assert!(matches!(e.try_wait(out_tokens[t]), Err(EngineError::TokenCancelled)));
        }
        // Replacement tasks on still-READY tokens proceed normally.
        let (s, a) = emit("fix", "z", 42);
        e.submit(s, a).unwrap();
        drain(&mut e, &mut c);
        assert_eq!(e.current_token("z").unwrap().value, Some(TokenValue::inline(42)));
    }

    #[test]
    fn streams_order_two_consumers_and_capacity() {
        let mut e = one_worker();
        let mut c = bare_cluster();
        let ch = e.open_stream("s", 4);
        for i in 1..=3 {
            assert!(e.try_publish(ch, json!(i)).unwrap());
        }
        assert_eq!(e.poll(ch, "a", 2, &mut c).unwrap(), vec![json!(1), json!(2)]);
        assert_eq!(e.poll(ch, "a", 10, &mut c).unwrap(), vec![json!(3)]);
        // Second consumer sees the full sequence independently.
        assert_eq!(e.poll(ch, "b", 10, &mut c).unwrap(), vec![json!(1), json!(2), json!(3)]);
        // "a" has consumed everything, but "b"'s cursor governs in-flight.
        e.close_stream(ch).unwrap();
        assert!(matches!(e.try_publish(ch, json!(9)), Err(EngineError::ChannelClosed(_))));
    }

    #[test]
    fn producer_task_backpressure_bounds_in_flight() {
        let mut e = one_worker();
        let mut c = bare_cluster();
        let ch = e.open_stream("s", 4);
        // Register the consumer cursor before production starts.
        e.poll(ch, "main", 0, &mut c).unwrap();
        let values: Vec<Value> = (0..100).map(|i| json!(i)).collect();
        let mut spec = TaskSpec::new("prod", "noop", json!({}));
        spec.side_effect = true;
        spec.publish = Some(PublishSpec { channel: "s".into(), values: values.clone(), interval_ms: 10 });
        e.submit(spec, vec![]).unwrap();
        e.schedule_ready(&mut c);

        let mut seen = Vec::new();
        loop {
            if e.all_terminal() && e.stream_len(ch) == seen.len() + (e.stream_len(ch) - seen.len()) {
                let mut rest = e.poll(ch, "main", 100, &mut c).unwrap();
                seen.append(&mut rest);
                if e.all_terminal() && seen.len() == 100 {
                    break;
                }
            }
            match c.step() {
                Some((_, fired)) => {
                    for f in fired {
                        if let crate::sim::Fired::Timer(tag) = f {
                            e.handle_timer(tag, &mut c);
                        }
                    }
                }
                None => {
                    // Producer blocked on backpressure: consume slowly.
                    let mut got = e.poll(ch, "main", 2, &mut c).unwrap();
                    seen.append(&mut got);
                    if e.all_terminal() && e.stream_len(ch) == 100 && seen.len() == 100 {
                        break;
                    }
                    assert!(!(e.all_terminal() && seen.len() < 100 && e.stream_len(ch) == seen.len()), "stalled");
                }
            }
        }
        assert_eq!(seen, values, "order preserved");
        assert!(e.stream_max_in_flight(ch) <= 4, "max in-flight {}", e.stream_max_in_flight(ch));
        assert_eq!(e.task(0).state, TaskState::Done);
    }

    #[test]
    fn locality_dominates_placement() {
        let mut e = engine_with_workers(
            1,
            &[("n000", "cloudA", SiteKind::Cloud, 4), ("n000", "hpcA", SiteKind::Hpc, 8)],
        );
        let mut c = bare_cluster();
        e.bind_input(
            "big",
            TokenValue::File { site: "hpcA".into(), path: "/d/x".into(), checksum: "c".into(), bytes: 1_000_000_000 },
        );
        let spec = TaskSpec::new("t", "concat", json!({})).param("i", Direction::In).param("o", Direction::Out);
        e.submit(spec, vec![Arg::Name("big".into()), Arg::Name("out".into())]).unwrap();
        e.schedule_ready(&mut c);
        assert_eq!(e.task(0).exec_site.as_deref(), Some("hpcA"));
    }

    #[test]
    fn zero_input_tasks_place_in_fifo_order() {
        // One single-core worker: completion order must equal submission order.
        let mut e = engine_with_workers(1, &[("n000", "hpcA", SiteKind::Hpc, 1)]);
        let mut c = bare_cluster();
        for i in 0..4 {
            let (s, a) = emit(&format!("t{i}"), &format!("o{i}"), i);
            e.submit(s, a).unwrap();
        }
        drain(&mut e, &mut c);
        let mut starts: Vec<(u64, usize)> = c
            .trace
            .iter()
            .filter(|ev| ev.kind == "task_state" && ev.detail["state"] == "RUNNING")
            .map(|ev| (ev.t_ms, ev.detail["task"].as_u64().unwrap() as usize))
            .collect();
        starts.sort();
        let order: Vec<usize> = starts.iter().map(|&(_, t)| t).collect();
        assert_eq!(order, vec![0, 1, 2, 3]);
    }

    #[test]
    fn multinode_waits_for_whole_nodes() {
        let mut e = engine_with_workers(
            1,
            &[("n000", "hpcA", SiteKind::Hpc, 4), ("n001", "hpcA", SiteKind::Hpc, 4)],
        );
        let mut c = bare_cluster();
        // Occupy one core so only one node is fully free.
        let (s, a) = emit("small", "x", 1);
        e.submit(s, a).unwrap();
        let mut mn = TaskSpec::new("mpi", "emit", json!({"value": 2})).param("o", Direction::Out);
        mn.kind = TaskKind::Multinode { nodes: 2, procs_per_node: 4 };
        e.submit(mn, vec![Arg::Name("y".into())]).unwrap();
        e.schedule_ready(&mut c);
        assert_eq!(e.task(0).state, TaskState::Running);
        assert_eq!(e.task(1).state, TaskState::Ready, "multinode must wait for 2 whole nodes");
        drain(&mut e, &mut c);
        assert_eq!(e.task(1).state, TaskState::Done);
    }

    #[test]
    fn serial_equivalence_small_random_programs() {
        // Random programs of <= 8 tasks over <= 4 logical names; compare
        // against a sequential in-submission-order interpreter.
        use rand::Rng;
        use rand::SeedableRng;
        for seed in 0..20u64 {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let names = ["a", "b", "c", "d"];
            let n_tasks = rng.random_range(1..=8);
            let mut program: Vec<(TaskSpec, Vec<Arg>)> = Vec::new();
            for i in 0..n_tasks {
                let kernel = ["emit", "sum", "mix", "concat"][rng.random_range(0..4)];
                let mut spec = TaskSpec::new(&format!("t{i}"), kernel, json!({"value": rng.random_range(0..100)}));
                let mut args = Vec::new();
                if kernel != "emit" {
                    for _ in 0..rng.random_range(1..=2) {
                        let n = names[rng.random_range(0..names.len())];
                        spec = spec.param(&format!("i{}", args.len()), Direction::In);
                        args.push(Arg::Name(n.to_string()));
                    }
                }
                let out = names[rng.random_range(0..names.len())];
                spec = spec.param("o", Direction::Out);
                args.push(Arg::Name(out.to_string()));
                program.push((spec, args));
            }

            // Sequential oracle.
            let store = ObjectStore::in_memory();
            let ctx = KernelCtx { store: &store, site: "oracle" };
            let mut env: HashMap<String, TokenValue> = names.iter().map(|n| (n.to_string(), TokenValue::inline(0))).collect();
            for (spec, args) in &program {
                let mut inputs = Vec::new();
                for (p, a) in spec.params.iter().zip(args) {
                    if p.direction == Direction::In {
                        let Arg::Name(n) = a else { unreachable!() };
                        inputs.push(env[n.as_str()].clone());
                    }
                }
                let out = run_kernel(&spec.kernel.name, &spec.kernel.params, &inputs, &ctx).unwrap();
                let Arg::Name(out_name) = args.last().unwrap() else { unreachable!() };
                env.insert(out_name.clone(), out[0].clone());
            }

            // Engine execution on two workers.
            let mut e = engine_with_workers(
                seed,
                &[("n000", "hpcA", SiteKind::Hpc, 2), ("n001", "hpcA", SiteKind::Hpc, 2)],
            );
            let mut c = bare_cluster();
            for n in names {
                e.bind_input(n, TokenValue::inline(0));
            }
            for (spec, args) in program {
                e.submit(spec, args).unwrap();
            }
            drain(&mut e, &mut c);
            for n in names {
                let got = e.current_token(n).unwrap().value.clone().unwrap();
                assert_eq!(got, env[n], "seed {seed} name {n}");
            }
        }
    }

    #[test]
    fn arity_and_shutdown_errors() {
        let mut e = one_worker();
        let spec = TaskSpec::new("t", "emit", json!({})).param("o", Direction::Out);
        assert!(matches!(e.submit(spec.clone(), vec![]), Err(EngineError::ArityMismatch { .. })));
        // Out param bound to a literal value is a type mismatch.
        assert!(matches!(
            e.submit(spec, vec![Arg::Value(TokenValue::inline(1))]),
            Err(EngineError::TypeMismatch(_))
        ));
    }
}
