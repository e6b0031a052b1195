//! Data logistics: executes pipeline specs (acquire, move, store, periodic
//! sync) between protocol-tagged storage endpoints simulated as directory
//! trees. Transfers ride the cluster fabric for timing; file content moves
//! with checksum verification, atomic temp+rename visibility, and
//! checksum-based idempotence (identical destination → SKIPPED).
//!
//! The service is a non-blocking state machine: callers start pipelines or
//! syncs, feed fired cluster events back in via `handle_fired`, and observe
//! job/pipeline states.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

use crate::catalog::{CatalogKind, CatalogStore, DataRecord};
use crate::sim::{Cluster, Fired, SimError, TransferId, VTime, MS_PER_S};
use crate::topology::{PipelineOp, PipelineStep};
use crate::value::digest_bytes;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TransferJobState {
    Pending,
    Active,
    Done,
    Failed,
    Skipped,
}

#[derive(Clone, Debug, Serialize)]
pub struct TransferJob {
    pub id: usize,
    pub invocation: String,
    pub src_endpoint: String,
    pub src_path: String,
    pub dst_endpoint: String,
    pub dst_path: String,
    pub bytes: u64,
    pub checksum: String,
    pub state: TransferJobState,
    pub started_ms: VTime,
    pub finished_ms: Option<VTime>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PipelineState {
    Running,
    Done,
    Failed,
}

struct PipelineRun {
    invocation: String,
    steps: Vec<PipelineStep>,
    cursor: usize,
    pending: Vec<usize>,
    state: PipelineState,
    jobs: Vec<usize>,
    error: Option<String>,
}

struct SyncState {
    invocation: String,
    step: PipelineStep,
    period_ms: u64,
    cancelled: bool,
    rounds: u64,
    jobs: Vec<usize>,
}

#[derive(Debug, Error)]
pub enum LogisticsError {
    #[error("bad pipeline: {0}")]
    BadPipeline(String),
    #[error("checksum mismatch on '{0}'")]
    ChecksumMismatch(String),
    #[error("unknown pipeline run {0}")]
    UnknownRun(u64),
    #[error("unknown sync handle {0}")]
    UnknownSync(u64),
    #[error("missing file for slot '{slot}': {path}")]
    MissingFile { slot: String, path: String },
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("storage failure: {0}")]
    Storage(#[from] std::io::Error),
    #[error("catalog failure: {0}")]
    Catalog(#[from] crate::catalog::CatalogError),
}

pub struct Logistics {
    jobs: Vec<TransferJob>,
    /// Fabric transfer → (job index, pipeline run it belongs to, if any).
    watches: HashMap<TransferId, usize>,
    runs: BTreeMap<u64, PipelineRun>,
    next_run: u64,
    syncs: BTreeMap<u64, SyncState>,
    next_sync: u64,
    /// Cluster timer tag → sync handle.
    sync_timers: HashMap<u64, u64>,
    /// Job index → pipeline run id (to advance the step machine).
    job_run: HashMap<usize, u64>,
}

impl Default for Logistics {
    fn default() -> Self {
        Self::new()
    }
}

impl Logistics {
    pub fn new() -> Self {
        Logistics {
            jobs: Vec::new(),
            watches: HashMap::new(),
            runs: BTreeMap::new(),
            next_run: 1,
            syncs: BTreeMap::new(),
            next_sync: 1,
            sync_timers: HashMap::new(),
            job_run: HashMap::new(),
        }
    }

    pub fn jobs(&self) -> &[TransferJob] {
        &self.jobs
    }

    pub fn jobs_for(&self, invocation: &str) -> Vec<&TransferJob> {
        self.jobs.iter().filter(|j| j.invocation == invocation).collect()
    }

    pub fn job(&self, id: usize) -> Option<&TransferJob> {
        self.jobs.get(id)
    }

    /// Any in-flight transfer or running pipeline?
    pub fn busy(&self) -> bool {
        !self.watches.is_empty() || self.runs.values().any(|r| r.state == PipelineState::Running)
    }

    /// JSON-lines transfer log for one invocation.
    pub fn write_log(&self, invocation: &str, path: &Path) -> std::io::Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let mut out = String::new();
        for j in self.jobs_for(invocation) {
            out.push_str(&serde_json::to_string(j).expect("encodes"));
            out.push('\n');
        }
        std::fs::write(path, out)
    }

    // ------------------------------------------------------------------
    // Single file transfers

    /// Starts (or skips) one file transfer between endpoint-relative paths.
    /// Returns the job index; a SKIPPED job is already terminal.
    pub fn start_file_transfer(
        &mut self,
        cluster: &mut Cluster,
        invocation: &str,
        src_endpoint: &str,
        src_rel: &str,
        dst_endpoint: &str,
        dst_rel: &str,
    ) -> Result<usize, LogisticsError> {
        let src_root = cluster.endpoint(src_endpoint)?.root.clone();
        let dst_root = cluster.endpoint(dst_endpoint)?.root.clone();
        let src_file = src_root.join(src_rel);
        let data = std::fs::read(&src_file)?;
        let checksum = digest_bytes(&data);
        let bytes = data.len() as u64;
        let dst_file = dst_root.join(dst_rel);

        let id = self.jobs.len();
        let mut job = TransferJob {
            id,
            invocation: invocation.to_string(),
            src_endpoint: src_endpoint.to_string(),
            src_path: src_rel.to_string(),
            dst_endpoint: dst_endpoint.to_string(),
            dst_path: dst_rel.to_string(),
            bytes,
            checksum: checksum.clone(),
            state: TransferJobState::Pending,
            started_ms: cluster.now,
            finished_ms: None,
            error: None,
        };

        if dst_file.exists() {
            if let Ok(existing) = std::fs::read(&dst_file) {
                if digest_bytes(&existing) == checksum {
                    job.state = TransferJobState::Skipped;
                    job.finished_ms = Some(cluster.now);
                    self.jobs.push(job);
                    return Ok(id);
                }
            }
        }

        let tid = cluster.start_transfer(src_endpoint, dst_endpoint, bytes)?;
        job.state = TransferJobState::Active;
        self.jobs.push(job);
        self.watches.insert(tid, id);
        Ok(id)
    }

    /// Routes a fired cluster event; returns true when it was ours.
    pub fn handle_fired(&mut self, fired: &Fired, cluster: &mut Cluster) -> bool {
        match fired {
            Fired::TransferDone(tid) => {
                let Some(job_idx) = self.watches.remove(tid) else { return false };
                self.complete_job(job_idx, cluster);
                true
            }
            Fired::TransferFailed(tid) => {
                let Some(job_idx) = self.watches.remove(tid) else { return false };
                self.fail_job(job_idx, "fabric transfer failed".into(), cluster);
                true
            }
            Fired::Timer(tag) => {
                let Some(handle) = self.sync_timers.remove(tag) else { return false };
                self.run_sync_round(handle, cluster);
                true
            }
            _ => false,
        }
    }

    fn complete_job(&mut self, job_idx: usize, cluster: &mut Cluster) {
        let (src, dst, expected) = {
            let j = &self.jobs[job_idx];
            let src = cluster.endpoint(&j.src_endpoint).map(|e| e.root.join(&j.src_path));
            let dst = cluster.endpoint(&j.dst_endpoint).map(|e| e.root.join(&j.dst_path));
            match (src, dst) {
                (Ok(s), Ok(d)) => (s, d, j.checksum.clone()),
                _ => {
                    self.fail_job(job_idx, "endpoint vanished mid-transfer".into(), cluster);
                    return;
                }
            }
        };
        // Verify against the checksum recorded at start; a source mutated
        // mid-transfer (fault injection) fails here with no partial file
        // ever visible at the destination.
        let outcome = (|| -> Result<(), String> {
            let data = std::fs::read(&src).map_err(|e| e.to_string())?;
            if digest_bytes(&data) != expected {
                return Err(format!("checksum mismatch on '{}'", src.display()));
            }
            if let Some(parent) = dst.parent() {
                std::fs::create_dir_all(parent).map_err(|e| e.to_string())?;
            }
            let tmp = dst.with_extension(format!("tmp-{job_idx}"));
            std::fs::write(&tmp, &data).map_err(|e| e.to_string())?;
            std::fs::rename(&tmp, &dst).map_err(|e| e.to_string())?;
            Ok(())
        })();
        match outcome {
            Ok(()) => {
                let j = &mut self.jobs[job_idx];
                j.state = TransferJobState::Done;
                j.finished_ms = Some(cluster.now);
                cluster.record(
                    "logistics_done",
                    serde_json::json!({"job": job_idx, "dst": self.jobs[job_idx].dst_path}),
                );
                self.advance_run_for(job_idx, cluster);
            }
            Err(e) => self.fail_job(job_idx, e, cluster),
        }
    }

    fn fail_job(&mut self, job_idx: usize, error: String, cluster: &mut Cluster) {
        let j = &mut self.jobs[job_idx];
        j.state = TransferJobState::Failed;
        j.finished_ms = Some(cluster.now);
        j.error = Some(error.clone());
        cluster.record("logistics_failed", serde_json::json!({"job": job_idx, "error": error}));
        if let Some(&run_id) = self.job_run.get(&job_idx) {
            if let Some(run) = self.runs.get_mut(&run_id) {
                run.state = PipelineState::Failed;
                run.error = Some(error);
                run.pending.clear();
            }
        }
    }

    // ------------------------------------------------------------------
    // Pipelines

    /// Starts a pipeline; steps run sequentially, transfers within a step
    /// concurrently. `context` substitutes `${slot}` placeholders in paths.
    pub fn start_pipeline(
        &mut self,
        cluster: &mut Cluster,
        invocation: &str,
        steps: &[PipelineStep],
        context: &BTreeMap<String, String>,
    ) -> Result<u64, LogisticsError> {
        let steps: Vec<PipelineStep> = steps.iter().map(|s| substitute_step(s, context)).collect();
        for (i, s) in steps.iter().enumerate() {
            match s.op {
                PipelineOp::PeriodicSync => {
                    if s.period_s.unwrap_or(0) == 0 {
                        return Err(LogisticsError::BadPipeline(format!("step {i}: periodic_sync needs period_s > 0")));
                    }
                    if steps[i..].iter().any(|t| t.op != PipelineOp::PeriodicSync) {
                        return Err(LogisticsError::BadPipeline(format!("step {i}: periodic_sync must be final")));
                    }
                }
                _ => {
                    cluster.endpoint(&s.source.endpoint)?;
                    cluster.endpoint(&s.destination.endpoint)?;
                }
            }
        }
        let id = self.next_run;
        self.next_run += 1;
        self.runs.insert(
            id,
            PipelineRun {
                invocation: invocation.to_string(),
                steps,
                cursor: 0,
                pending: Vec::new(),
                state: PipelineState::Running,
                jobs: Vec::new(),
                error: None,
            },
        );
        self.kick_run(id, cluster);
        Ok(id)
    }

    pub fn run_state(&self, id: u64) -> Result<(PipelineState, Option<String>), LogisticsError> {
        let r = self.runs.get(&id).ok_or(LogisticsError::UnknownRun(id))?;
        Ok((r.state, r.error.clone()))
    }

    pub fn run_jobs(&self, id: u64) -> Vec<&TransferJob> {
        self.runs.get(&id).map(|r| r.jobs.iter().map(|&j| &self.jobs[j]).collect()).unwrap_or_default()
    }

    /// Sync handles spawned by a pipeline's trailing periodic_sync steps.
    pub fn run_syncs(&self, id: u64) -> Vec<u64> {
        let Some(run) = self.runs.get(&id) else { return Vec::new() };
        self.syncs
            .iter()
            .filter(|(_, s)| s.invocation == run.invocation)
            .map(|(&h, _)| h)
            .collect()
    }

    fn kick_run(&mut self, run_id: u64, cluster: &mut Cluster) {
        loop {
            let (cursor, invocation, step) = {
                let run = self.runs.get(&run_id).expect("run exists");
                if run.state != PipelineState::Running || !run.pending.is_empty() {
                    return;
                }
                if run.cursor >= run.steps.len() {
                    self.runs.get_mut(&run_id).unwrap().state = PipelineState::Done;
                    return;
                }
                (run.cursor, run.invocation.clone(), run.steps[run.cursor].clone())
            };
            self.runs.get_mut(&run_id).unwrap().cursor = cursor + 1;
            match step.op {
                PipelineOp::PeriodicSync => {
                    // Hand off to the periodic scheduler; the pipeline step
                    // itself completes immediately.
                    let _ = self.schedule_periodic_sync(cluster, &invocation, &step);
                }
                _ => {
                    let started = self.start_step_transfers(run_id, &invocation, &step, cluster);
                    if let Err(e) = started {
                        let run = self.runs.get_mut(&run_id).unwrap();
                        run.state = PipelineState::Failed;
                        run.error = Some(e.to_string());
                        return;
                    }
                    let run = self.runs.get(&run_id).unwrap();
                    if !run.pending.is_empty() {
                        return; // wait for this step's transfers
                    }
                }
            }
        }
    }

    fn start_step_transfers(
        &mut self,
        run_id: u64,
        invocation: &str,
        step: &PipelineStep,
        cluster: &mut Cluster,
    ) -> Result<(), LogisticsError> {
        let files = list_matching(cluster, &step.source.endpoint, &step.source.path, step.filter.as_deref())?;
        for rel in files {
            let name = Path::new(&rel).file_name().and_then(|s| s.to_str()).unwrap_or(&rel).to_string();
            let dst_rel = join_rel(&step.destination.path, &name);
            let job = self.start_file_transfer(
                cluster,
                invocation,
                &step.source.endpoint,
                &rel,
                &step.destination.endpoint,
                &dst_rel,
            )?;
            self.job_run.insert(job, run_id);
            let run = self.runs.get_mut(&run_id).unwrap();
            run.jobs.push(job);
            if self.jobs[job].state == TransferJobState::Active {
                run.pending.push(job);
            }
        }
        Ok(())
    }

    fn advance_run_for(&mut self, job_idx: usize, cluster: &mut Cluster) {
        let Some(&run_id) = self.job_run.get(&job_idx) else { return };
        if let Some(run) = self.runs.get_mut(&run_id) {
            run.pending.retain(|&j| j != job_idx);
            if run.pending.is_empty() && run.state == PipelineState::Running {
                self.kick_run(run_id, cluster);
            }
        }
    }

    // ------------------------------------------------------------------
    // Periodic sync

    /// Registers a periodic sync firing at every virtual-clock multiple of
    /// the period. New or changed files (by checksum) are transferred each
    /// round; unchanged files produce SKIPPED jobs.
    pub fn schedule_periodic_sync(
        &mut self,
        cluster: &mut Cluster,
        invocation: &str,
        step: &PipelineStep,
    ) -> Result<u64, LogisticsError> {
        let period_s = step.period_s.filter(|&p| p > 0).ok_or_else(|| {
            LogisticsError::BadPipeline("periodic_sync needs period_s > 0".into())
        })?;
        cluster.endpoint(&step.source.endpoint)?;
        cluster.endpoint(&step.destination.endpoint)?;
        let handle = self.next_sync;
        self.next_sync += 1;
        let period_ms = period_s * MS_PER_S;
        self.syncs.insert(
            handle,
            SyncState {
                invocation: invocation.to_string(),
                step: step.clone(),
                period_ms,
                cancelled: false,
                rounds: 0,
                jobs: Vec::new(),
            },
        );
        self.arm_sync_timer(handle, cluster);
        Ok(handle)
    }

    fn arm_sync_timer(&mut self, handle: u64, cluster: &mut Cluster) {
        let period = self.syncs[&handle].period_ms;
        let next_round = (cluster.now / period + 1) * period;
        let tag = cluster.next_timer_tag();
        self.sync_timers.insert(tag, handle);
        cluster.schedule_timer(next_round - cluster.now, tag);
    }

    fn run_sync_round(&mut self, handle: u64, cluster: &mut Cluster) {
        let (invocation, step, cancelled) = {
            let Some(s) = self.syncs.get(&handle) else { return };
            (s.invocation.clone(), s.step.clone(), s.cancelled)
        };
        if cancelled {
            return;
        }
        if let Some(s) = self.syncs.get_mut(&handle) {
            s.rounds += 1;
        }
        if let Ok(files) = list_matching(cluster, &step.source.endpoint, &step.source.path, step.filter.as_deref()) {
            for rel in files {
                let name = Path::new(&rel).file_name().and_then(|x| x.to_str()).unwrap_or(&rel).to_string();
                let dst_rel = join_rel(&step.destination.path, &name);
                // Per-transfer failures are retried implicitly next round.
                if let Ok(job) = self.start_file_transfer(
                    cluster,
                    &invocation,
                    &step.source.endpoint,
                    &rel,
                    &step.destination.endpoint,
                    &dst_rel,
                ) {
                    if let Some(s) = self.syncs.get_mut(&handle) {
                        s.jobs.push(job);
                    }
                }
            }
        }
        self.arm_sync_timer(handle, cluster);
    }

    pub fn cancel_sync(&mut self, handle: u64) -> Result<(), LogisticsError> {
        let s = self.syncs.get_mut(&handle).ok_or(LogisticsError::UnknownSync(handle))?;
        s.cancelled = true;
        Ok(())
    }

    pub fn sync_rounds(&self, handle: u64) -> u64 {
        self.syncs.get(&handle).map(|s| s.rounds).unwrap_or(0)
    }

    pub fn sync_jobs(&self, handle: u64) -> Vec<&TransferJob> {
        self.syncs.get(&handle).map(|s| s.jobs.iter().map(|&j| &self.jobs[j]).collect()).unwrap_or_default()
    }

    /// Cancels every sync registered for an invocation.
    pub fn cancel_invocation_syncs(&mut self, invocation: &str) {
        for s in self.syncs.values_mut() {
            if s.invocation == invocation {
                s.cancelled = true;
            }
        }
    }
}

/// Stage-out: registers each (slot → file) output in the given catalog.
/// Missing files are recorded as per-slot errors while the other outputs
/// are still registered (partial stage-out is a documented policy).
pub struct StageOutSpec {
    pub slot: String,
    pub endpoint: String,
    pub path: String,
    pub kind: CatalogKind,
    pub name: String,
    pub format: String,
}

pub fn stage_out(
    cluster: &Cluster,
    catalog: &CatalogStore,
    outputs: &[StageOutSpec],
) -> (Vec<String>, Vec<LogisticsError>) {
    let mut refs = Vec::new();
    let mut errors = Vec::new();
    for out in outputs {
        let ep = match cluster.endpoint(&out.endpoint) {
            Ok(e) => e.clone(),
            Err(e) => {
                errors.push(LogisticsError::Sim(e));
                continue;
            }
        };
        let file = ep.root.join(&out.path);
        let data = match std::fs::read(&file) {
            Ok(d) => d,
            Err(_) => {
                errors.push(LogisticsError::MissingFile { slot: out.slot.clone(), path: file.display().to_string() });
                continue;
            }
        };
        let record = DataRecord {
            format: out.format.clone(),
            endpoint: out.endpoint.clone(),
            path: out.path.clone(),
            protocol: ep.protocol.clone(),
            size_bytes: data.len() as u64,
            checksum: digest_bytes(&data),
        };
        match catalog.put_entry(out.kind, &out.name, serde_json::to_value(&record).expect("encodes")) {
            Ok((version, _digest)) => refs.push(format!("{}@{}", out.name, version)),
            Err(e) => errors.push(LogisticsError::Catalog(e)),
        }
    }
    (refs, errors)
}

fn substitute(path: &str, context: &BTreeMap<String, String>) -> String {
    let mut out = path.to_string();
    for (k, v) in context {
        out = out.replace(&format!("${{{k}}}"), v);
    }
    out
}

fn substitute_step(step: &PipelineStep, context: &BTreeMap<String, String>) -> PipelineStep {
    let mut s = step.clone();
    s.source.path = substitute(&s.source.path, context);
    s.destination.path = substitute(&s.destination.path, context);
    s
}

fn join_rel(dir: &str, name: &str) -> String {
    let d = dir.trim_end_matches('/');
    if d.is_empty() {
        name.to_string()
    } else {
        format!("{d}/{name}")
    }
}

/// Simple filename filter: `*` matches any run of characters.
fn matches_filter(name: &str, filter: Option<&str>) -> bool {
    let Some(f) = filter else { return true };
    let parts: Vec<&str> = f.split('*').collect();
    let mut rest = name;
    for (i, p) in parts.iter().enumerate() {
        if i == 0 {
            if !rest.starts_with(p) {
                return false;
            }
            rest = &rest[p.len()..];
        } else if i == parts.len() - 1 {
            return p.is_empty() || rest.ends_with(p);
        } else if let Some(pos) = rest.find(p) {
            rest = &rest[pos + p.len()..];
        } else {
            return false;
        }
    }
    rest.is_empty() || parts.len() > 1
}

/// Lists files (endpoint-relative) under a path; a file path yields itself,
/// a directory yields its sorted regular files matching the filter.
fn list_matching(
    cluster: &Cluster,
    endpoint: &str,
    rel: &str,
    filter: Option<&str>,
) -> Result<Vec<String>, LogisticsError> {
    let root = cluster.endpoint(endpoint)?.root.clone();
    let target: PathBuf = root.join(rel.trim_end_matches('/'));
    let mut out = Vec::new();
    if target.is_file() {
        out.push(rel.trim_end_matches('/').to_string());
        return Ok(out);
    }
    if target.is_dir() {
        let mut names: Vec<String> = std::fs::read_dir(&target)?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().is_file())
            .filter_map(|e| e.file_name().into_string().ok())
            .filter(|n| matches_filter(n, filter))
            .collect();
        names.sort();
        let base = rel.trim_end_matches('/');
        for n in names {
            out.push(if base.is_empty() { n } else { format!("{base}/{n}") });
        }
        return Ok(out);
    }
    Err(LogisticsError::Storage(std::io::Error::new(
        std::io::ErrorKind::NotFound,
        format!("no such path '{rel}' under endpoint '{endpoint}'"),
    )))
}
