//! Deterministic discrete-event simulation of a federation of HPC and cloud
//! sites: whole-node FIFO batch queues, walltimes, elastic capacity, and a
//! fair-share transfer fabric. Virtual time is integer milliseconds.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, HashMap};
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::value::digest_bytes;

/// Virtual time in milliseconds.
pub type VTime = u64;

pub const MS_PER_S: u64 = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct JobId(pub u64);

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TransferId(pub u64);

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SiteKind {
    Hpc,
    Cloud,
}

impl From<crate::topology::SiteKind> for SiteKind {
    fn from(k: crate::topology::SiteKind) -> Self {
        match k {
            crate::topology::SiteKind::Hpc => SiteKind::Hpc,
            crate::topology::SiteKind::Cloud => SiteKind::Cloud,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SiteConfig {
    pub name: String,
    pub kind: SiteKind,
    pub nodes: u32,
    pub cores_per_node: u32,
    pub mem_gb: u32,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LinkConfig {
    pub a: String,
    pub b: String,
    pub latency_ms: u64,
    pub bandwidth_bps: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FederationConfig {
    pub sites: Vec<SiteConfig>,
    #[serde(default)]
    pub links: Vec<LinkConfig>,
    #[serde(default)]
    pub seed: u64,
}

impl FederationConfig {
    /// One HPC site and one cloud site with the documented default links.
    pub fn default_two_site() -> Self {
        FederationConfig {
            sites: vec![
                SiteConfig { name: "hpcA".into(), kind: SiteKind::Hpc, nodes: 4, cores_per_node: 8, mem_gb: 64 },
                SiteConfig { name: "cloudA".into(), kind: SiteKind::Cloud, nodes: 4, cores_per_node: 4, mem_gb: 16 },
            ],
            links: Vec::new(),
            seed: 0,
        }
    }
}

// Default link parameters: 1 ms / 1 GB/s intra-site, 50 ms / 100 MB/s inter-site.
const INTRA_LATENCY_MS: u64 = 1;
const INTRA_BW_BPS: u64 = 1_000_000_000;
const INTER_LATENCY_MS: u64 = 50;
const INTER_BW_BPS: u64 = 100_000_000;

#[derive(Clone, Debug)]
pub struct NodeSlot {
    pub id: String,
    pub cores: u32,
    pub mem_gb: u32,
    pub allocated_to: Option<JobId>,
}

#[derive(Clone, Debug)]
pub struct Site {
    pub name: String,
    pub kind: SiteKind,
    pub nodes: Vec<NodeSlot>,
    pub node_profile: (u32, u32), // (cores, mem_gb) for nodes added later
    pub queue: Vec<JobId>,
    pub store_root: PathBuf,
    pub authorized_keys: BTreeSet<String>,
    next_node_id: u32,
    /// (time, node count) step trace for accounting.
    pub capacity_trace: Vec<(VTime, u32)>,
}

impl Site {
    pub fn free_node_count(&self) -> u32 {
        self.nodes.iter().filter(|n| n.allocated_to.is_none()).count() as u32
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum JobState {
    Queued,
    Running,
    Completed,
    Failed,
    Timeout,
    Cancelled,
}

impl JobState {
    pub fn is_terminal(&self) -> bool {
        !matches!(self, JobState::Queued | JobState::Running)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct JobResources {
    pub nodes: u32,
    pub cores_per_node: u32,
    pub mem_gb: u32,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub enum JobPayload {
    /// Completes on its own after the given virtual duration.
    Synthetic { duration_ms: u64 },
    /// Runs until `end_job` is called (a task-engine program).
    Program { program_ref: String },
}

#[derive(Clone, Debug)]
pub struct Job {
    pub id: JobId,
    pub site: String,
    pub invocation_tag: String,
    pub resources: JobResources,
    pub walltime_s: u64,
    pub payload: JobPayload,
    pub state: JobState,
    pub submit_at: VTime,
    pub start_at: Option<VTime>,
    pub end_at: Option<VTime>,
    pub allocated_nodes: Vec<String>,
    /// Node-milliseconds consumed so far.
    pub node_ms: u64,
    alloc_since: Option<VTime>,
}

impl Job {
    fn settle_accounting(&mut self, now: VTime) {
        if let Some(since) = self.alloc_since {
            self.node_ms += self.allocated_nodes.len() as u64 * (now - since);
            self.alloc_since = Some(now);
        }
    }
}

/// Minimal credential view the gateway needs for auth checks.
#[derive(Clone, Debug)]
pub struct SubmitAuth {
    pub user: String,
    /// Public key to check against the site's authorized set; `None` for
    /// password credentials, which the simulated gateway accepts directly.
    pub public_key: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EndpointInfo {
    pub name: String,
    pub site: String,
    pub protocol: String,
    pub root: PathBuf,
    #[serde(default)]
    pub unreachable: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TransferState {
    Pending,
    Active,
    Done,
    Failed,
}

#[derive(Clone, Debug)]
pub struct Transfer {
    pub id: TransferId,
    pub src: String,
    pub dst: String,
    pub bytes: u64,
    pub state: TransferState,
    pub started_at: VTime,
    pub finished_at: Option<VTime>,
    link: (String, String),
    remaining: f64,
}

#[derive(Debug)]
struct LinkState {
    active: Vec<TransferId>,
    last_settled: VTime,
    epoch: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
enum Event {
    JobPayloadDone(JobId),
    JobWalltime(JobId),
    ActivateTransfer(TransferId),
    LinkUpdate { link: (String, String), epoch: u64 },
    Timer(u64),
}

/// Notifications surfaced to the caller of `step`/`advance`.
#[derive(Clone, Debug, PartialEq)]
pub enum Fired {
    JobStarted(JobId),
    JobCompleted(JobId),
    JobTimedOut(JobId),
    TransferDone(TransferId),
    TransferFailed(TransferId),
    Timer(u64),
}

#[derive(Clone, Debug, Serialize)]
pub struct TraceEvent {
    pub t_ms: VTime,
    pub seq: u64,
    pub kind: String,
    pub detail: serde_json::Value,
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("unknown site '{0}'")]
    UnknownSite(String),
    #[error("authentication failure: {0}")]
    AuthFailure(String),
    #[error("queue rejected: {0}")]
    QueueRejected(String),
    #[error("no idle nodes on site '{0}'")]
    NoIdleNodes(String),
    #[error("unknown job {0:?}")]
    UnknownJob(JobId),
    #[error("endpoint unreachable: {0}")]
    EndpointUnreachable(String),
    #[error("unknown endpoint '{0}'")]
    UnknownEndpoint(String),
}

/// The federation simulator. Single-threaded over one event heap.
pub struct Cluster {
    pub now: VTime,
    seed: u64,
    heap: BinaryHeap<Reverse<(VTime, u64, Event)>>,
    seq: u64,
    sites: BTreeMap<String, Site>,
    jobs: BTreeMap<JobId, Job>,
    next_job: u64,
    endpoints: BTreeMap<String, EndpointInfo>,
    links: HashMap<(String, String), LinkState>,
    link_overrides: HashMap<(String, String), (u64, u64)>,
    transfers: BTreeMap<TransferId, Transfer>,
    next_transfer: u64,
    next_timer_seq: u64,
    cancelled_timers: BTreeSet<u64>,
    pending_fired: Vec<Fired>,
    pub trace: Vec<TraceEvent>,
}

impl Cluster {
    pub fn new(config: &FederationConfig, root: impl Into<PathBuf>) -> Self {
        let root: PathBuf = root.into();
        let mut sites = BTreeMap::new();
        for sc in &config.sites {
            let nodes = (0..sc.nodes)
                .map(|i| NodeSlot {
                    id: format!("n{i:03}"),
                    cores: sc.cores_per_node,
                    mem_gb: sc.mem_gb,
                    allocated_to: None,
                })
                .collect();
            sites.insert(
                sc.name.clone(),
                Site {
                    name: sc.name.clone(),
                    kind: sc.kind,
                    nodes,
                    node_profile: (sc.cores_per_node, sc.mem_gb),
                    queue: Vec::new(),
                    store_root: root.join("sites").join(&sc.name),
                    authorized_keys: BTreeSet::new(),
                    next_node_id: sc.nodes,
                    capacity_trace: vec![(0, sc.nodes)],
                },
            );
        }
        let mut link_overrides = HashMap::new();
        for l in &config.links {
            let key = Self::link_key(&l.a, &l.b);
            link_overrides.insert(key, (l.latency_ms, l.bandwidth_bps));
        }
        Cluster {
            now: 0,
            seed: config.seed,
            heap: BinaryHeap::new(),
            seq: 0,
            sites,
            jobs: BTreeMap::new(),
            next_job: 1,
            endpoints: BTreeMap::new(),
            links: HashMap::new(),
            link_overrides,
            transfers: BTreeMap::new(),
            next_transfer: 1,
            next_timer_seq: 1,
            cancelled_timers: BTreeSet::new(),
            pending_fired: Vec::new(),
            trace: Vec::new(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn link_key(a: &str, b: &str) -> (String, String) {
        if a <= b {
            (a.to_string(), b.to_string())
        } else {
            (b.to_string(), a.to_string())
        }
    }

    pub(crate) fn record(&mut self, kind: &str, detail: serde_json::Value) {
        self.trace.push(TraceEvent { t_ms: self.now, seq: self.trace.len() as u64, kind: kind.to_string(), detail });
    }

    /// Hash of the full event trace; equal seeds and submissions give equal hashes.
    pub fn trace_hash(&self) -> String {
        let mut buf = Vec::new();
        for ev in &self.trace {
            buf.extend_from_slice(&serde_json::to_vec(ev).unwrap());
            buf.push(b'\n');
        }
        digest_bytes(&buf)
    }

    pub fn write_trace(&self, path: &std::path::Path) -> std::io::Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let mut out = String::new();
        for ev in &self.trace {
            out.push_str(&serde_json::to_string(ev).unwrap());
            out.push('\n');
        }
        std::fs::write(path, out)
    }

    fn schedule(&mut self, at: VTime, ev: Event) {
        self.seq += 1;
        self.heap.push(Reverse((at.max(self.now), self.seq, ev)));
    }

    // ------------------------------------------------------------------
    // Sites and nodes

    pub fn site(&self, name: &str) -> Result<&Site, SimError> {
        self.sites.get(name).ok_or_else(|| SimError::UnknownSite(name.to_string()))
    }

    pub fn site_names(&self) -> Vec<String> {
        self.sites.keys().cloned().collect()
    }

    pub fn sites_of_kind(&self, kind: SiteKind) -> Vec<&Site> {
        self.sites.values().filter(|s| s.kind == kind).collect()
    }

    /// Queued plus running jobs, the binding policy's load metric.
    pub fn site_load(&self, name: &str) -> usize {
        self.jobs.values().filter(|j| j.site == name && !j.state.is_terminal()).count()
    }

    pub fn authorize_key(&mut self, site: &str, public_key: &str) -> Result<(), SimError> {
        let s = self.sites.get_mut(site).ok_or_else(|| SimError::UnknownSite(site.to_string()))?;
        s.authorized_keys.insert(public_key.to_string());
        Ok(())
    }

    pub fn add_nodes(&mut self, site: &str, n: u32) -> Result<(), SimError> {
        let now = self.now;
        let s = self.sites.get_mut(site).ok_or_else(|| SimError::UnknownSite(site.to_string()))?;
        for _ in 0..n {
            let id = format!("n{:03}", s.next_node_id);
            s.next_node_id += 1;
            s.nodes.push(NodeSlot { id, cores: s.node_profile.0, mem_gb: s.node_profile.1, allocated_to: None });
        }
        let count = s.nodes.len() as u32;
        s.capacity_trace.push((now, count));
        self.record("add_nodes", serde_json::json!({"site": site, "n": n, "total": count}));
        self.try_start_jobs(site);
        Ok(())
    }

    pub fn remove_nodes(&mut self, site: &str, n: u32) -> Result<(), SimError> {
        let now = self.now;
        let s = self.sites.get_mut(site).ok_or_else(|| SimError::UnknownSite(site.to_string()))?;
        let idle: Vec<usize> = s
            .nodes
            .iter()
            .enumerate()
            .filter(|(_, nd)| nd.allocated_to.is_none())
            .map(|(i, _)| i)
            .collect();
        if (idle.len() as u32) < n {
            return Err(SimError::NoIdleNodes(site.to_string()));
        }
        // Remove the highest-indexed idle nodes.
        for &i in idle.iter().rev().take(n as usize) {
            s.nodes.remove(i);
        }
        let count = s.nodes.len() as u32;
        s.capacity_trace.push((now, count));
        self.record("remove_nodes", serde_json::json!({"site": site, "n": n, "total": count}));
        Ok(())
    }

    // ------------------------------------------------------------------
    // Jobs

    pub fn submit_job(
        &mut self,
        site: &str,
        invocation_tag: &str,
        resources: JobResources,
        walltime_s: u64,
        payload: JobPayload,
        auth: &SubmitAuth,
    ) -> Result<JobId, SimError> {
        let s = self.sites.get(site).ok_or_else(|| SimError::UnknownSite(site.to_string()))?;
        if let Some(key) = &auth.public_key {
            if !s.authorized_keys.contains(key) {
                self.record("auth_failure", serde_json::json!({"site": site, "user": auth.user}));
                return Err(SimError::AuthFailure(format!("key for user '{}' not authorized on '{site}'", auth.user)));
            }
        }
        let s = self.sites.get(site).unwrap();
        let (cap_cores, cap_mem) = s.node_profile;
        if resources.nodes as usize > s.nodes.len()
            || resources.cores_per_node > cap_cores.max(s.nodes.iter().map(|n| n.cores).max().unwrap_or(0))
            || resources.mem_gb > cap_mem.max(s.nodes.iter().map(|n| n.mem_gb).max().unwrap_or(0))
        {
            return Err(SimError::QueueRejected(format!(
                "request {}x{} cores {} GB exceeds capacity of site '{site}'",
                resources.nodes, resources.cores_per_node, resources.mem_gb
            )));
        }
        let id = JobId(self.next_job);
        self.next_job += 1;
        let job = Job {
            id,
            site: site.to_string(),
            invocation_tag: invocation_tag.to_string(),
            resources,
            walltime_s,
            payload,
            state: JobState::Queued,
            submit_at: self.now,
            start_at: None,
            end_at: None,
            allocated_nodes: Vec::new(),
            node_ms: 0,
            alloc_since: None,
        };
        self.jobs.insert(id, job);
        self.sites.get_mut(site).unwrap().queue.push(id);
        self.record("job_submit", serde_json::json!({"job": id.0, "site": site, "tag": invocation_tag}));
        self.try_start_jobs(site);
        Ok(id)
    }

    /// Strict FIFO with no backfill: only the head of the queue may start.
    fn try_start_jobs(&mut self, site: &str) {
        loop {
            let head = match self.sites.get(site).and_then(|s| s.queue.first().copied()) {
                Some(h) => h,
                None => return,
            };
            let need = self.jobs[&head].resources.nodes as usize;
            let s = self.sites.get_mut(site).unwrap();
            let free: Vec<usize> = s
                .nodes
                .iter()
                .enumerate()
                .filter(|(_, n)| n.allocated_to.is_none())
                .map(|(i, _)| i)
                .take(need)
                .collect();
            if free.len() < need {
                return;
            }
            s.queue.remove(0);
            let mut names = Vec::new();
            for i in free {
                s.nodes[i].allocated_to = Some(head);
                names.push(s.nodes[i].id.clone());
            }
            let now = self.now;
            let job = self.jobs.get_mut(&head).unwrap();
            job.state = JobState::Running;
            job.start_at = Some(now);
            job.allocated_nodes = names;
            job.alloc_since = Some(now);
            let walltime_at = now + job.walltime_s * MS_PER_S;
            let payload_done = match &job.payload {
                JobPayload::Synthetic { duration_ms } => Some(now + duration_ms),
                JobPayload::Program { .. } => None,
            };
            self.record("job_start", serde_json::json!({"job": head.0, "site": site}));
            self.schedule(walltime_at, Event::JobWalltime(head));
            if let Some(at) = payload_done {
                self.schedule(at, Event::JobPayloadDone(head));
            }
            self.pending_fired.push(Fired::JobStarted(head));
        }
    }

    fn finish_job(&mut self, id: JobId, state: JobState) {
        let now = self.now;
        let j = match self.jobs.get_mut(&id) {
            Some(j) => j,
            None => return,
        };
        if j.state.is_terminal() {
            return;
        }
        let was_queued = j.state == JobState::Queued;
        j.settle_accounting(now);
        j.alloc_since = None;
        j.state = state;
        j.end_at = Some(now);
        let site = j.site.clone();
        if was_queued {
            if let Some(s) = self.sites.get_mut(&site) {
                s.queue.retain(|&q| q != id);
            }
        } else {
            if let Some(s) = self.sites.get_mut(&site) {
                for n in &mut s.nodes {
                    if n.allocated_to == Some(id) {
                        n.allocated_to = None;
                    }
                }
            }
        }
        self.record("job_end", serde_json::json!({"job": id.0, "state": format!("{state:?}")}));
        self.try_start_jobs(&site);
    }

    /// Ends a program job at the current virtual time.
    pub fn end_job(&mut self, id: JobId, success: bool) {
        self.finish_job(id, if success { JobState::Completed } else { JobState::Failed });
    }

    pub fn cancel_job(&mut self, id: JobId) {
        self.finish_job(id, JobState::Cancelled);
    }

    pub fn job(&self, id: JobId) -> Result<&Job, SimError> {
        self.jobs.get(&id).ok_or(SimError::UnknownJob(id))
    }

    pub fn jobs_tagged(&self, tag: &str) -> Vec<&Job> {
        self.jobs.values().filter(|j| j.invocation_tag == tag).collect()
    }

    /// Grows a running job's allocation by one free node; returns the node id.
    pub fn grow_allocation(&mut self, id: JobId) -> Result<Option<String>, SimError> {
        let now = self.now;
        let site = self.jobs.get(&id).ok_or(SimError::UnknownJob(id))?.site.clone();
        let s = self.sites.get_mut(&site).unwrap();
        let slot = s.nodes.iter_mut().find(|n| n.allocated_to.is_none());
        let name = match slot {
            Some(n) => {
                n.allocated_to = Some(id);
                n.id.clone()
            }
            None => return Ok(None),
        };
        let j = self.jobs.get_mut(&id).unwrap();
        j.settle_accounting(now);
        j.allocated_nodes.push(name.clone());
        self.record("grow_allocation", serde_json::json!({"job": id.0, "node": name}));
        Ok(Some(name))
    }

    /// Releases one named node from a running job's allocation.
    pub fn shrink_allocation(&mut self, id: JobId, node: &str) -> Result<(), SimError> {
        let now = self.now;
        let site = self.jobs.get(&id).ok_or(SimError::UnknownJob(id))?.site.clone();
        let j = self.jobs.get_mut(&id).unwrap();
        j.settle_accounting(now);
        j.allocated_nodes.retain(|n| n != node);
        if let Some(s) = self.sites.get_mut(&site) {
            if let Some(n) = s.nodes.iter_mut().find(|n| n.id == node && n.allocated_to == Some(id)) {
                n.allocated_to = None;
            }
        }
        self.record("shrink_allocation", serde_json::json!({"job": id.0, "node": node}));
        self.try_start_jobs(&site);
        Ok(())
    }

    /// Total node-seconds consumed by jobs carrying the invocation tag.
    pub fn node_seconds_tagged(&self, tag: &str) -> u64 {
        let mut total_ms = 0;
        for j in self.jobs.values().filter(|j| j.invocation_tag == tag) {
            total_ms += j.node_ms;
            if let Some(since) = j.alloc_since {
                total_ms += j.allocated_nodes.len() as u64 * (self.now - since);
            }
        }
        total_ms / MS_PER_S
    }

    // ------------------------------------------------------------------
    // Transfer fabric

    pub fn register_endpoint(&mut self, info: EndpointInfo) {
        self.endpoints.insert(info.name.clone(), info);
    }

    pub fn endpoint(&self, name: &str) -> Result<&EndpointInfo, SimError> {
        self.endpoints.get(name).ok_or_else(|| SimError::UnknownEndpoint(name.to_string()))
    }

    pub fn endpoints(&self) -> impl Iterator<Item = &EndpointInfo> {
        self.endpoints.values()
    }

    pub fn set_endpoint_reachable(&mut self, name: &str, reachable: bool) -> Result<(), SimError> {
        let e = self.endpoints.get_mut(name).ok_or_else(|| SimError::UnknownEndpoint(name.to_string()))?;
        e.unreachable = !reachable;
        Ok(())
    }

    fn link_params(&self, site_a: &str, site_b: &str) -> (u64, u64) {
        let key = Self::link_key(site_a, site_b);
        if let Some(&p) = self.link_overrides.get(&key) {
            p
        } else if site_a == site_b {
            (INTRA_LATENCY_MS, INTRA_BW_BPS)
        } else {
            (INTER_LATENCY_MS, INTER_BW_BPS)
        }
    }

    /// Starts a transfer between two registered endpoints; completion arrives
    /// as `Fired::TransferDone` at latency + bytes/bandwidth (fair-shared).
    pub fn start_transfer(&mut self, src: &str, dst: &str, bytes: u64) -> Result<TransferId, SimError> {
        let s = self.endpoint(src)?.clone();
        let d = self.endpoint(dst)?.clone();
        if s.unreachable {
            return Err(SimError::EndpointUnreachable(src.to_string()));
        }
        if d.unreachable {
            return Err(SimError::EndpointUnreachable(dst.to_string()));
        }
        let id = TransferId(self.next_transfer);
        self.next_transfer += 1;
        let link = Self::link_key(&s.site, &d.site);
        let (latency, _) = self.link_params(&s.site, &d.site);
        self.transfers.insert(
            id,
            Transfer {
                id,
                src: src.to_string(),
                dst: dst.to_string(),
                bytes,
                state: TransferState::Pending,
                started_at: self.now,
                finished_at: None,
                link,
                remaining: bytes as f64,
            },
        );
        self.record("transfer_start", serde_json::json!({"transfer": id.0, "src": src, "dst": dst, "bytes": bytes}));
        self.schedule(self.now + latency, Event::ActivateTransfer(id));
        Ok(id)
    }

    pub fn transfer(&self, id: TransferId) -> Option<&Transfer> {
        self.transfers.get(&id)
    }

    /// Applies fair-share progress on a link since its last settlement.
    fn settle_link(&mut self, key: &(String, String)) {
        let now = self.now;
        let bw = {
            let (a, b) = (key.0.clone(), key.1.clone());
            self.link_params(&a, &b).1
        };
        let link = match self.links.get_mut(key) {
            Some(l) => l,
            None => return,
        };
        let n = link.active.len();
        if n > 0 && now > link.last_settled {
            let dt_s = (now - link.last_settled) as f64 / 1000.0;
            let rate = bw as f64 / n as f64;
            let ids = link.active.clone();
            for tid in ids {
                if let Some(t) = self.transfers.get_mut(&tid) {
                    t.remaining = (t.remaining - rate * dt_s).max(0.0);
                }
            }
        }
        if let Some(l) = self.links.get_mut(key) {
            l.last_settled = now;
        }
    }

    /// Reschedules the link's next completion event.
    fn reschedule_link(&mut self, key: &(String, String)) {
        let bw = self.link_params(&key.0, &key.1).1;
        let link = match self.links.get_mut(key) {
            Some(l) => l,
            None => return,
        };
        link.epoch += 1;
        let epoch = link.epoch;
        let n = link.active.len();
        if n == 0 {
            return;
        }
        let rate = bw as f64 / n as f64;
        let min_remaining = link
            .active
            .iter()
            .filter_map(|tid| self.transfers.get(tid).map(|t| t.remaining))
            .fold(f64::INFINITY, f64::min);
        let dt_ms = ((min_remaining / rate) * 1000.0).ceil() as u64;
        let key = key.clone();
        self.schedule(self.now + dt_ms, Event::LinkUpdate { link: key, epoch });
    }

    // ------------------------------------------------------------------
    // Timers

    pub fn schedule_timer(&mut self, delay_ms: u64, tag: u64) {
        self.schedule(self.now + delay_ms, Event::Timer(tag));
    }

    pub fn next_timer_tag(&mut self) -> u64 {
        let t = self.next_timer_seq;
        self.next_timer_seq += 1;
        t
    }

    pub fn cancel_timer(&mut self, tag: u64) {
        self.cancelled_timers.insert(tag);
    }

    // ------------------------------------------------------------------
    // Event loop

    pub fn peek_next_time(&self) -> Option<VTime> {
        self.heap.peek().map(|Reverse((t, _, _))| *t)
    }

    /// Processes the next event; returns its time and the notifications it
    /// produced, or `None` when the heap is empty.
    pub fn step(&mut self) -> Option<(VTime, Vec<Fired>)> {
        // Notifications produced synchronously (e.g. a submit starting a job)
        // are delivered before the next event is processed.
        if !self.pending_fired.is_empty() {
            return Some((self.now, std::mem::take(&mut self.pending_fired)));
        }
        loop {
            let Reverse((t, _seq, ev)) = self.heap.pop()?;
            self.now = self.now.max(t);
            match ev {
                Event::Timer(tag) => {
                    if self.cancelled_timers.remove(&tag) {
                        continue;
                    }
                    self.record("timer", serde_json::json!({"tag": tag}));
                    self.pending_fired.push(Fired::Timer(tag));
                }
                Event::JobPayloadDone(id) => {
                    if self.jobs.get(&id).map(|j| j.state == JobState::Running).unwrap_or(false) {
                        self.finish_job(id, JobState::Completed);
                        self.pending_fired.push(Fired::JobCompleted(id));
                    } else {
                        continue;
                    }
                }
                Event::JobWalltime(id) => {
                    if self.jobs.get(&id).map(|j| j.state == JobState::Running).unwrap_or(false) {
                        self.finish_job(id, JobState::Timeout);
                        self.pending_fired.push(Fired::JobTimedOut(id));
                    } else {
                        continue;
                    }
                }
                Event::ActivateTransfer(id) => {
                    let key = match self.transfers.get(&id) {
                        Some(t) if t.state == TransferState::Pending => t.link.clone(),
                        _ => continue,
                    };
                    self.settle_link(&key);
                    let link = self.links.entry(key.clone()).or_insert(LinkState {
                        active: Vec::new(),
                        last_settled: self.now,
                        epoch: 0,
                    });
                    link.active.push(id);
                    self.transfers.get_mut(&id).unwrap().state = TransferState::Active;
                    self.reschedule_link(&key);
                    // Zero-byte transfers complete immediately after latency.
                    continue;
                }
                Event::LinkUpdate { link: key, epoch } => {
                    let valid = self.links.get(&key).map(|l| l.epoch == epoch).unwrap_or(false);
                    if !valid {
                        continue;
                    }
                    self.settle_link(&key);
                    let done: Vec<TransferId> = self
                        .links
                        .get(&key)
                        .map(|l| {
                            l.active
                                .iter()
                                .filter(|tid| self.transfers.get(tid).map(|t| t.remaining <= 0.5).unwrap_or(false))
                                .copied()
                                .collect()
                        })
                        .unwrap_or_default();
                    if done.is_empty() {
                        self.reschedule_link(&key);
                        continue;
                    }
                    for tid in &done {
                        if let Some(l) = self.links.get_mut(&key) {
                            l.active.retain(|x| x != tid);
                        }
                        let t = self.transfers.get_mut(tid).unwrap();
                        t.state = TransferState::Done;
                        t.finished_at = Some(self.now);
                        self.record("transfer_done", serde_json::json!({"transfer": tid.0}));
                        self.pending_fired.push(Fired::TransferDone(*tid));
                    }
                    self.reschedule_link(&key);
                }
            }
            let fired = std::mem::take(&mut self.pending_fired);
            return Some((self.now, fired));
        }
    }

    /// Fires all events with timestamp <= now + dt, then sets now = now + dt.
    pub fn advance(&mut self, dt_ms: u64) -> Vec<Fired> {
        let target = self.now + dt_ms;
        let mut fired = std::mem::take(&mut self.pending_fired);
        while self.peek_next_time().map(|t| t <= target).unwrap_or(false) {
            if let Some((_, mut f)) = self.step() {
                fired.append(&mut f);
            }
        }
        self.now = target;
        fired
    }

    /// Resource-conservation check used by fuzz tests.
    pub fn check_conservation(&self) -> Result<(), String> {
        for s in self.sites.values() {
            let mut seen = BTreeSet::new();
            for n in &s.nodes {
                if !seen.insert(n.id.clone()) {
                    return Err(format!("duplicate node id {} on {}", n.id, s.name));
                }
                if let Some(j) = n.allocated_to {
                    match self.jobs.get(&j) {
                        Some(job) if job.state == JobState::Running => {}
                        _ => return Err(format!("node {} allocated to non-running job", n.id)),
                    }
                }
            }
        }
        for j in self.jobs.values() {
            if let (Some(start), Some(end)) = (j.start_at, j.end_at) {
                if j.state == JobState::Completed && end - start > j.walltime_s * MS_PER_S {
                    return Err(format!("job {:?} exceeded walltime", j.id));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_site() -> Cluster {
        Cluster::new(&FederationConfig::default_two_site(), std::env::temp_dir().join("simtest"))
    }

    fn auth() -> SubmitAuth {
        SubmitAuth { user: "u".into(), public_key: None }
    }

    fn res(nodes: u32) -> JobResources {
        JobResources { nodes, cores_per_node: 1, mem_gb: 1 }
    }

    #[test]
    fn strict_fifo_no_backfill() {
        let mut c = two_site();
        // hpcA has 4 nodes. J0 takes all 4 for 100 s; J1 wants 2, J2 wants 1.
        let j0 = c.submit_job("hpcA", "i", res(4), 1000, JobPayload::Synthetic { duration_ms: 100_000 }, &auth()).unwrap();
        let j1 = c.submit_job("hpcA", "i", res(2), 1000, JobPayload::Synthetic { duration_ms: 10_000 }, &auth()).unwrap();
        let j2 = c.submit_job("hpcA", "i", res(1), 1000, JobPayload::Synthetic { duration_ms: 10_000 }, &auth()).unwrap();
        assert_eq!(c.job(j0).unwrap().state, JobState::Running);
        assert_eq!(c.job(j1).unwrap().state, JobState::Queued);
        // Even though one node would fit J2, FIFO forbids starting it first.
        c.advance(50_000);
        assert_eq!(c.job(j2).unwrap().state, JobState::Queued);
        c.advance(100_000);
        let s1 = c.job(j1).unwrap().start_at.unwrap();
        let s2 = c.job(j2).unwrap().start_at.unwrap();
        assert!(s1 <= s2, "J2 must never start before J1");
    }

    #[test]
    fn oversized_request_rejected() {
        let mut c = two_site();
        let err = c.submit_job("hpcA", "i", res(5), 10, JobPayload::Synthetic { duration_ms: 1 }, &auth());
        assert!(matches!(err, Err(SimError::QueueRejected(_))));
    }

    #[test]
    fn unauthorized_key_fails_with_audit_entry() {
        let mut c = two_site();
        let bad = SubmitAuth { user: "u".into(), public_key: Some("pk1".into()) };
        let err = c.submit_job("hpcA", "i", res(1), 10, JobPayload::Synthetic { duration_ms: 1 }, &bad);
        assert!(matches!(err, Err(SimError::AuthFailure(_))));
        assert!(c.trace.iter().any(|e| e.kind == "auth_failure"));
        c.authorize_key("hpcA", "pk1").unwrap();
        assert!(c.submit_job("hpcA", "i", res(1), 10, JobPayload::Synthetic { duration_ms: 1 }, &bad).is_ok());
    }

    #[test]
    fn advance_zero_is_identity_and_walltime_enforced() {
        let mut c = two_site();
        let before = c.trace.len();
        c.advance(0);
        assert_eq!(c.trace.len(), before);

        let j = c.submit_job("hpcA", "i", res(1), 50, JobPayload::Synthetic { duration_ms: 100_000 }, &auth()).unwrap();
        c.advance(200_000);
        let job = c.job(j).unwrap();
        assert_eq!(job.state, JobState::Timeout);
        assert_eq!(job.end_at.unwrap(), 50_000);
    }

    #[test]
    fn deterministic_trace_under_same_submissions() {
        let run = || {
            let mut c = two_site();
            c.submit_job("hpcA", "i", res(2), 100, JobPayload::Synthetic { duration_ms: 30_000 }, &auth()).unwrap();
            c.submit_job("hpcA", "i", res(4), 100, JobPayload::Synthetic { duration_ms: 10_000 }, &auth()).unwrap();
            c.submit_job("cloudA", "i", res(1), 100, JobPayload::Synthetic { duration_ms: 5_000 }, &auth()).unwrap();
            c.advance(120_000);
            c.trace_hash()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn add_nodes_starts_queued_jobs_and_remove_requires_idle() {
        let mut c = two_site();
        let _ = c.submit_job("hpcA", "i", res(4), 100, JobPayload::Synthetic { duration_ms: 60_000 }, &auth()).unwrap();
        let j1 = c.submit_job("hpcA", "i", res(1), 100, JobPayload::Synthetic { duration_ms: 1_000 }, &auth()).unwrap();
        let j2 = c.submit_job("hpcA", "i", res(1), 100, JobPayload::Synthetic { duration_ms: 1_000 }, &auth()).unwrap();
        assert!(matches!(c.remove_nodes("hpcA", 1), Err(SimError::NoIdleNodes(_))));
        c.add_nodes("hpcA", 2).unwrap();
        assert_eq!(c.job(j1).unwrap().state, JobState::Running);
        assert_eq!(c.job(j2).unwrap().state, JobState::Running);
    }

    #[test]
    fn capacity_trace_integrates_to_node_seconds() {
        let mut c = two_site();
        c.advance(10_000);
        c.add_nodes("hpcA", 2).unwrap();
        c.advance(10_000);
        c.remove_nodes("hpcA", 1).unwrap();
        c.advance(10_000);
        // Step-function integral of capacity over [0, 30 s]:
        // 4 nodes * 10 s + 6 nodes * 10 s + 5 nodes * 10 s = 150 node-seconds.
        let trace = &c.site("hpcA").unwrap().capacity_trace;
        let mut integral_ms: u64 = 0;
        for w in trace.windows(2) {
            integral_ms += w[0].1 as u64 * (w[1].0 - w[0].0);
        }
        integral_ms += trace.last().unwrap().1 as u64 * (c.now - trace.last().unwrap().0);
        assert_eq!(integral_ms / MS_PER_S, 150);
    }

    #[test]
    fn transfer_timing_matches_closed_form() {
        // Inter-site defaults are 50 ms / 100 MB/s; override latency to 1 s.
        let mut cfg = FederationConfig::default_two_site();
        cfg.links.push(LinkConfig { a: "hpcA".into(), b: "cloudA".into(), latency_ms: 1000, bandwidth_bps: 100_000_000 });
        let mut c = Cluster::new(&cfg, std::env::temp_dir());
        c.register_endpoint(EndpointInfo { name: "a".into(), site: "hpcA".into(), protocol: "local".into(), root: std::env::temp_dir(), unreachable: false });
        c.register_endpoint(EndpointInfo { name: "b".into(), site: "cloudA".into(), protocol: "ftp".into(), root: std::env::temp_dir(), unreachable: false });

        // 1 GB at 100 MB/s + 1 s latency -> 11 s.
        let t = c.start_transfer("a", "b", 1_000_000_000).unwrap();
        c.advance(60_000);
        assert_eq!(c.transfer(t).unwrap().finished_at, Some(11_000));

        // Zero bytes -> completes at +latency.
        let t0 = c.start_transfer("a", "b", 0).unwrap();
        let t0_start = c.now;
        c.advance(5_000);
        assert_eq!(c.transfer(t0).unwrap().finished_at, Some(t0_start + 1_000));

        // Two concurrent 1 GB transfers fair-share the link -> both at +21 s.
        let base = c.now;
        let x = c.start_transfer("a", "b", 1_000_000_000).unwrap();
        let y = c.start_transfer("a", "b", 1_000_000_000).unwrap();
        c.advance(60_000);
        assert_eq!(c.transfer(x).unwrap().finished_at, Some(base + 21_000));
        assert_eq!(c.transfer(y).unwrap().finished_at, Some(base + 21_000));
    }

    #[test]
    fn unreachable_endpoint_rejected() {
        let mut c = two_site();
        c.register_endpoint(EndpointInfo { name: "a".into(), site: "hpcA".into(), protocol: "local".into(), root: std::env::temp_dir(), unreachable: false });
        c.register_endpoint(EndpointInfo { name: "b".into(), site: "hpcA".into(), protocol: "local".into(), root: std::env::temp_dir(), unreachable: false });
        c.set_endpoint_reachable("b", false).unwrap();
        assert!(matches!(c.start_transfer("a", "b", 10), Err(SimError::EndpointUnreachable(_))));
    }

    #[test]
    fn node_seconds_accounting() {
        let mut c = two_site();
        let j = c.submit_job("hpcA", "inv1", res(2), 100, JobPayload::Synthetic { duration_ms: 30_000 }, &auth()).unwrap();
        c.advance(60_000);
        assert_eq!(c.job(j).unwrap().node_ms / MS_PER_S, 60);
        assert_eq!(c.node_seconds_tagged("inv1"), 60);
    }

    #[test]
    fn timers_fire_and_cancel() {
        let mut c = two_site();
        let t1 = c.next_timer_tag();
        let t2 = c.next_timer_tag();
        c.schedule_timer(1_000, t1);
        c.schedule_timer(2_000, t2);
        c.cancel_timer(t2);
        let fired = c.advance(5_000);
        assert_eq!(fired, vec![Fired::Timer(t1)]);
    }
}
