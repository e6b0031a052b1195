//! The platform front door: workflow endpoints, invocation lifecycle, and
//! the per-invocation driver that walks stage-in, deployment, program
//! execution, and stage-out.

use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use serde::Serialize;
use thiserror::Error;

use crate::advisor::Advisor;
use crate::catalog::{CatalogError, CatalogKind, CatalogStore, SoftwareRecord};
use crate::datastore::ObjectStore;
use crate::engine::EngineError;
use crate::logistics::{stage_out, StageOutSpec};
use crate::orchestrator::{DeploymentRun, Orchestrator, OrchestratorError};
use crate::program::{parse_program, run_program};
use crate::sim::{JobId, JobState, VTime};
use crate::topology::{SlotType, WorkflowDescriptor};
use crate::value::{digest_bytes, TokenValue};
use crate::vault::{Vault, VaultError};
use crate::world::WorldHandle;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum InvocationState {
    Pending,
    StagingIn,
    Deploying,
    Running,
    StagingOut,
    Succeeded,
    Failed,
    Cancelled,
}

impl InvocationState {
    pub fn is_terminal(&self) -> bool {
        matches!(self, InvocationState::Succeeded | InvocationState::Failed | InvocationState::Cancelled)
    }

    /// The single forward successor in the happy path.
    fn next(&self) -> Option<InvocationState> {
        use InvocationState::*;
        match self {
            Pending => Some(StagingIn),
            StagingIn => Some(Deploying),
            Deploying => Some(Running),
            Running => Some(StagingOut),
            StagingOut => Some(Succeeded),
            _ => None,
        }
    }
}

impl std::fmt::Display for InvocationState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            InvocationState::Pending => "PENDING",
            InvocationState::StagingIn => "STAGING_IN",
            InvocationState::Deploying => "DEPLOYING",
            InvocationState::Running => "RUNNING",
            InvocationState::StagingOut => "STAGING_OUT",
            InvocationState::Succeeded => "SUCCEEDED",
            InvocationState::Failed => "FAILED",
            InvocationState::Cancelled => "CANCELLED",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct HistoryEntry {
    pub state: InvocationState,
    pub at: VTime,
    pub detail: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct EndpointRecord {
    pub endpoint_id: String,
    /// Version-pinned "name@version".
    pub workflow_ref: String,
    pub created_by: String,
    pub created_at: VTime,
}

#[derive(Debug, Error)]
pub enum PlatformError {
    #[error("unknown endpoint '{0}'")]
    UnknownEndpoint(String),
    #[error("unknown invocation '{0}'")]
    UnknownInvocation(String),
    #[error("schema mismatch on slot '{slot}': {reason}")]
    SchemaMismatch { slot: String, reason: String },
    #[error("missing credential for site '{0}'")]
    MissingCredential(String),
    #[error("invocation not finished: state is {0}")]
    NotFinished(InvocationState),
    #[error("state conflict: {0}")]
    StateConflict(String),
    #[error(transparent)]
    Auth(#[from] VaultError),
    #[error(transparent)]
    Catalog(#[from] CatalogError),
    #[error(transparent)]
    Orchestrator(#[from] OrchestratorError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Sim(#[from] crate::sim::SimError),
    #[error("bad descriptor: {0}")]
    BadDescriptor(String),
    #[error("storage failure: {0}")]
    Storage(#[from] std::io::Error),
}

struct InvocationData {
    id: String,
    endpoint_id: String,
    workflow_ref: String,
    inputs: BTreeMap<String, serde_json::Value>,
    state: InvocationState,
    history: Vec<HistoryEntry>,
    error: Option<String>,
    cancel_requested: bool,
    /// Output slot -> inline value representation.
    outputs: BTreeMap<String, serde_json::Value>,
    /// Output slot -> catalog reference registered during stage-out.
    result_refs: BTreeMap<String, String>,
    run: Option<DeploymentRun>,
}

/// Consistent snapshot of one invocation for status reads.
#[derive(Clone, Debug, Serialize)]
pub struct InvocationStatus {
    pub invocation_id: String,
    pub endpoint_id: String,
    pub workflow_ref: String,
    pub state: InvocationState,
    pub history: Vec<HistoryEntry>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, Serialize)]
pub struct InvocationResults {
    pub invocation_id: String,
    pub outputs: BTreeMap<String, serde_json::Value>,
    pub result_refs: BTreeMap<String, String>,
}

struct PlatformState {
    endpoints: BTreeMap<String, EndpointRecord>,
    next_endpoint: u64,
    invocations: BTreeMap<String, Arc<Mutex<InvocationData>>>,
    next_invocation: u64,
}

pub struct Platform {
    world: WorldHandle,
    pub vault: Arc<Vault>,
    pub catalogs: Arc<CatalogStore>,
    pub store: Arc<ObjectStore>,
    pub advisor: Arc<Advisor>,
    pub orchestrator: Orchestrator,
    state: Mutex<PlatformState>,
    drivers: Mutex<HashMap<String, JoinHandle<()>>>,
    root: PathBuf,
    /// While set, drivers pause (in real time) right after entering
    /// RUNNING, leaving virtual time frozen. Lets tests and operators
    /// exercise cancellation deterministically mid-run.
    pub hold_in_running: std::sync::atomic::AtomicBool,
}

impl Platform {
    pub fn new(
        world: WorldHandle,
        vault: Arc<Vault>,
        catalogs: Arc<CatalogStore>,
        store: Arc<ObjectStore>,
        advisor: Arc<Advisor>,
        root: impl Into<PathBuf>,
    ) -> Arc<Self> {
        let root = root.into();
        let orchestrator = Orchestrator::new(world.clone(), Arc::clone(&vault), Arc::clone(&catalogs), &root);
        Arc::new(Platform {
            world,
            vault,
            catalogs,
            store,
            advisor,
            orchestrator,
            state: Mutex::new(PlatformState {
                endpoints: BTreeMap::new(),
                next_endpoint: 0,
                invocations: BTreeMap::new(),
                next_invocation: 0,
            }),
            drivers: Mutex::new(HashMap::new()),
            root,
            hold_in_running: std::sync::atomic::AtomicBool::new(false),
        })
    }

    pub fn world(&self) -> &WorldHandle {
        &self.world
    }

    // ------------------------------------------------------------------
    // Developer interface

    /// Registers a workflow as an invocable endpoint. The reference is
    /// pinned to the concrete version it resolves to at registration time.
    pub fn register_endpoint(&self, workflow_ref: &str, developer: &str) -> Result<String, PlatformError> {
        let entry = self.catalogs.get_entry(CatalogKind::Workflow, workflow_ref)?;
        let pinned = format!("{}@{}", entry.name, entry.version);
        let now = self.world.with(|w| w.now());
        let mut st = self.state.lock().unwrap();
        st.next_endpoint += 1;
        let id = format!("ep-{:04}", st.next_endpoint);
        st.endpoints.insert(
            id.clone(),
            EndpointRecord { endpoint_id: id.clone(), workflow_ref: pinned, created_by: developer.to_string(), created_at: now },
        );
        Ok(id)
    }

    pub fn endpoints(&self) -> Vec<EndpointRecord> {
        self.state.lock().unwrap().endpoints.values().cloned().collect()
    }

    pub fn endpoint(&self, id: &str) -> Result<EndpointRecord, PlatformError> {
        self.state
            .lock()
            .unwrap()
            .endpoints
            .get(id)
            .cloned()
            .ok_or_else(|| PlatformError::UnknownEndpoint(id.to_string()))
    }

    fn descriptor_for(&self, workflow_ref: &str) -> Result<WorkflowDescriptor, PlatformError> {
        let entry = self.catalogs.get_entry(CatalogKind::Workflow, workflow_ref)?;
        serde_json::from_value(entry.payload).map_err(|e| PlatformError::BadDescriptor(e.to_string()))
    }

    // ------------------------------------------------------------------
    // Execution API

    /// Creates an invocation in PENDING and drives it on a dedicated
    /// thread. Fails fast — before any side effect — on schema mismatches
    /// and on tokens that cannot cover every bound site.
    pub fn invoke(
        self: &Arc<Self>,
        endpoint_id: &str,
        inputs: BTreeMap<String, serde_json::Value>,
        token_id: &str,
    ) -> Result<String, PlatformError> {
        let ep = self.endpoint(endpoint_id)?;
        let desc = self.descriptor_for(&ep.workflow_ref)?;
        check_inputs(&desc, &inputs)?;

        let bindings = self.orchestrator.resolve_bindings(&desc)?;
        let mut sites: Vec<String> = bindings.values().cloned().collect();
        sites.sort();
        sites.dedup();
        self.vault.check_token(token_id, &sites).map_err(|e| match e {
            VaultError::OutOfScope(site) | VaultError::MissingCredential(site) => {
                PlatformError::MissingCredential(site)
            }
            other => PlatformError::Auth(other),
        })?;

        let now = self.world.with(|w| w.now());
        let id = {
            let mut st = self.state.lock().unwrap();
            st.next_invocation += 1;
            let id = format!("inv-{:04}", st.next_invocation);
            let data = InvocationData {
                id: id.clone(),
                endpoint_id: endpoint_id.to_string(),
                workflow_ref: ep.workflow_ref.clone(),
                inputs: inputs.clone(),
                state: InvocationState::Pending,
                history: vec![HistoryEntry { state: InvocationState::Pending, at: now, detail: "created".into() }],
                error: None,
                cancel_requested: false,
                outputs: BTreeMap::new(),
                result_refs: BTreeMap::new(),
                run: None,
            };
            st.invocations.insert(id.clone(), Arc::new(Mutex::new(data)));
            id
        };

        let me = Arc::clone(self);
        let token = token_id.to_string();
        let inv = id.clone();
        let handle = std::thread::spawn(move || me.drive(&inv, desc, token));
        self.drivers.lock().unwrap().insert(id.clone(), handle);
        Ok(id)
    }

    fn data(&self, id: &str) -> Result<Arc<Mutex<InvocationData>>, PlatformError> {
        self.state
            .lock()
            .unwrap()
            .invocations
            .get(id)
            .cloned()
            .ok_or_else(|| PlatformError::UnknownInvocation(id.to_string()))
    }

    pub fn get_status(&self, id: &str) -> Result<InvocationStatus, PlatformError> {
        let data = self.data(id)?;
        let d = data.lock().unwrap();
        Ok(InvocationStatus {
            invocation_id: d.id.clone(),
            endpoint_id: d.endpoint_id.clone(),
            workflow_ref: d.workflow_ref.clone(),
            state: d.state,
            history: d.history.clone(),
            error: d.error.clone(),
        })
    }

    /// Requests cancellation. A no-op success on terminal invocations;
    /// otherwise the request propagates to the task engine, cluster jobs,
    /// and periodic syncs immediately, and the driver winds down.
    pub fn cancel(&self, id: &str) -> Result<(), PlatformError> {
        let data = self.data(id)?;
        {
            let mut d = data.lock().unwrap();
            if d.state.is_terminal() {
                return Ok(());
            }
            d.cancel_requested = true;
        }
        self.world.with(|w| {
            if w.engines.contains_key(id) {
                w.with_engine(id, |e, _| e.cancel_all());
            }
            let jobs: Vec<JobId> = w
                .cluster
                .jobs_tagged(id)
                .iter()
                .filter(|j| !j.state.is_terminal())
                .map(|j| j.id)
                .collect();
            for j in jobs {
                w.cluster.cancel_job(j);
            }
            w.logistics.cancel_invocation_syncs(id);
        });
        Ok(())
    }

    /// Results are available only once the invocation SUCCEEDED.
    pub fn fetch_results(&self, id: &str) -> Result<InvocationResults, PlatformError> {
        let data = self.data(id)?;
        let d = data.lock().unwrap();
        if d.state != InvocationState::Succeeded {
            return Err(PlatformError::NotFinished(d.state));
        }
        Ok(InvocationResults {
            invocation_id: d.id.clone(),
            outputs: d.outputs.clone(),
            result_refs: d.result_refs.clone(),
        })
    }

    /// Blocks until the invocation's driver thread finishes (test helper
    /// and server shutdown path).
    pub fn join(&self, id: &str) {
        let handle = self.drivers.lock().unwrap().remove(id);
        if let Some(h) = handle {
            let _ = h.join();
        }
    }

    pub fn invocation_ids(&self) -> Vec<String> {
        self.state.lock().unwrap().invocations.keys().cloned().collect()
    }

    // ------------------------------------------------------------------
    // Driver

    fn transition(&self, id: &str, next: InvocationState, detail: &str) -> bool {
        let Ok(data) = self.data(id) else { return false };
        let mut d = data.lock().unwrap();
        if d.state.is_terminal() {
            return false;
        }
        let allowed = d.state.next() == Some(next)
            || next == InvocationState::Failed
            || next == InvocationState::Cancelled;
        if !allowed {
            return false;
        }
        let now = self.world.with(|w| w.now());
        d.state = next;
        d.history.push(HistoryEntry { state: next, at: now, detail: detail.to_string() });
        if next == InvocationState::Failed {
            d.error = Some(detail.to_string());
        }
        true
    }

    fn cancelled_mid_flight(&self, id: &str) -> bool {
        self.data(id).map(|d| d.lock().unwrap().cancel_requested).unwrap_or(false)
    }

    fn wind_down(&self, id: &str) {
        self.world.with(|w| {
            if w.engines.contains_key(id) {
                w.with_engine(id, |e, _| e.cancel_all());
            }
            let jobs: Vec<JobId> = w
                .cluster
                .jobs_tagged(id)
                .iter()
                .filter(|j| !j.state.is_terminal())
                .map(|j| j.id)
                .collect();
            for j in jobs {
                w.cluster.cancel_job(j);
            }
            w.logistics.cancel_invocation_syncs(id);
        });
    }

    fn finish_err(&self, id: &str, err: impl std::fmt::Display) {
        self.wind_down(id);
        if self.cancelled_mid_flight(id) {
            self.transition(id, InvocationState::Cancelled, "cancelled");
        } else {
            self.transition(id, InvocationState::Failed, &err.to_string());
        }
    }

    fn drive(self: Arc<Self>, id: &str, desc: WorkflowDescriptor, token: String) {
        if let Err(e) = self.drive_inner(id, &desc, &token) {
            self.finish_err(id, e);
        }
        self.write_invocation_logs(id);
    }

    fn drive_inner(&self, id: &str, desc: &WorkflowDescriptor, token: &str) -> Result<(), PlatformError> {
        let inputs = {
            let data = self.data(id)?;
            let d = data.lock().unwrap();
            d.inputs.clone()
        };
        // Pipeline context: the invocation id plus stringified input slots,
        // so descriptor paths can be invocation-scoped via ${...}.
        let mut context: BTreeMap<String, String> = BTreeMap::new();
        context.insert("invocation".into(), id.to_string());
        for (k, v) in &inputs {
            context.insert(k.clone(), scalar_string(v));
        }

        let check_cancel = |phase: &str| -> Result<(), PlatformError> {
            if self.cancelled_mid_flight(id) {
                Err(PlatformError::StateConflict(format!("cancelled during {phase}")))
            } else {
                Ok(())
            }
        };

        // Stage in.
        self.transition(id, InvocationState::StagingIn, "stage-in pipelines");
        let mut run = self.orchestrator.new_run(id, desc)?;
        self.orchestrator.run_pipelines(desc, &mut run, &context)?;
        check_cancel("STAGING_IN")?;

        // Deploy.
        self.transition(id, InvocationState::Deploying, "lifecycle plan");
        self.orchestrator.execute_plan(desc, &mut run, token, &context)?;
        check_cancel("DEPLOYING")?;

        // Run.
        self.transition(id, InvocationState::Running, "main jobs");
        let jobs = self.orchestrator.submit_main_jobs(desc, &mut run, token)?;
        let seed = seed_from(id);
        self.world.with(|w| w.add_engine(id, seed));
        for (_, job) in &jobs {
            let state = self.world.wait_job_started(*job)?;
            if state != JobState::Running {
                return Err(PlatformError::StateConflict(format!("main job ended {state:?} before start")));
            }
            self.world.with(|w| {
                let (site, nodes, cores, kind) = {
                    let j = w.cluster.job(*job).expect("job exists");
                    let kind = w.cluster.site(&j.site).expect("site exists").kind;
                    (j.site.clone(), j.allocated_nodes.clone(), j.resources.cores_per_node, kind)
                };
                w.with_engine(id, |e, _| {
                    for n in &nodes {
                        e.add_worker(n, &site, kind, cores);
                    }
                });
            });
        }

        while self.hold_in_running.load(std::sync::atomic::Ordering::Relaxed) && !self.cancelled_mid_flight(id) {
            std::thread::sleep(std::time::Duration::from_millis(1));
        }
        check_cancel("RUNNING")?;

        let engine = self.world.engine_handle(id);
        let mut outputs: BTreeMap<String, TokenValue> = BTreeMap::new();
        for node in desc.programs() {
            let art = node.artifacts.first().expect("validated task_program has an artifact");
            let entry = self.catalogs.get_ref(CatalogKind::Software, art)?;
            let rec: SoftwareRecord =
                serde_json::from_value(entry.payload).map_err(|e| PlatformError::BadDescriptor(e.to_string()))?;
            if let Some(p) = &rec.program {
                let program = parse_program(p).map_err(|e| PlatformError::BadDescriptor(e.to_string()))?;
                let out = run_program(&engine, &program, &inputs)?;
                outputs.extend(out);
            }
        }
        for (_, job) in &jobs {
            let done = self.world.with(|w| w.cluster.job(*job).map(|j| j.state.is_terminal()).unwrap_or(true));
            if !done {
                self.world.with(|w| w.cluster.end_job(*job, true));
            }
        }
        check_cancel("RUNNING")?;

        // Stage out.
        self.transition(id, InvocationState::StagingOut, "publishing results");
        let refs = self.stage_out_results(id, desc, &run, &outputs)?;
        self.orchestrator.teardown(&mut run);
        self.world.with(|w| w.logistics.cancel_invocation_syncs(id));

        {
            let data = self.data(id)?;
            let mut d = data.lock().unwrap();
            d.outputs = outputs
                .iter()
                .map(|(k, v)| (k.clone(), serde_json::to_value(v).expect("token value encodes")))
                .collect();
            d.result_refs = refs;
            d.run = Some(run);
        }
        check_cancel("STAGING_OUT")?;
        self.transition(id, InvocationState::Succeeded, "complete");
        Ok(())
    }

    /// Writes result manifests into the site store and registers catalog
    /// records for ref-typed output slots.
    fn stage_out_results(
        &self,
        id: &str,
        desc: &WorkflowDescriptor,
        run: &DeploymentRun,
        outputs: &BTreeMap<String, TokenValue>,
    ) -> Result<BTreeMap<String, String>, PlatformError> {
        let site = desc
            .programs()
            .first()
            .and_then(|n| run.bindings.get(&n.name).cloned())
            .or_else(|| self.world.with(|w| w.cluster.site_names().first().cloned()));
        let Some(site) = site else { return Ok(BTreeMap::new()) };
        let store_root = self.world.with(|w| w.cluster.site(&site).map(|s| s.store_root.clone()))?;
        let endpoint = format!("{site}-store");

        let mut specs = Vec::new();
        for (slot, ty) in &desc.outputs {
            let kind = match ty {
                SlotType::ModelRef => CatalogKind::Model,
                SlotType::DatasetRef => CatalogKind::Dataset,
                _ => continue,
            };
            let Some(value) = outputs.get(slot) else { continue };
            let rel = format!("results/{id}/{slot}.json");
            let path = store_root.join(&rel);
            std::fs::create_dir_all(path.parent().expect("has parent"))?;
            std::fs::write(&path, serde_json::to_vec_pretty(value).expect("encodes"))?;
            specs.push(StageOutSpec {
                slot: slot.clone(),
                endpoint: endpoint.clone(),
                path: rel,
                kind,
                name: format!("{id}-{slot}"),
                format: "json".into(),
            });
        }
        let (refs, errors) = self.world.with(|w| {
            let specs = &specs;
            let catalogs = &self.catalogs;
            stage_out(&w.cluster, catalogs, specs)
        });
        if let Some(e) = errors.into_iter().next() {
            return Err(PlatformError::Orchestrator(OrchestratorError::Logistics(e)));
        }
        Ok(specs.iter().map(|s| s.slot.clone()).zip(refs).collect())
    }

    fn write_invocation_logs(&self, id: &str) {
        let dir = self.root.join("logs").join(id);
        let _ = self.world.with(|w| w.logistics.write_log(id, &dir.join("transfers.jsonl")));
        if let Ok(data) = self.data(id) {
            let d = data.lock().unwrap();
            if let Some(run) = &d.run {
                let _ = run.write_event_log(&dir.join("orchestration.jsonl"));
            }
        }
    }
}

fn seed_from(id: &str) -> u64 {
    let hex = digest_bytes(id.as_bytes());
    u64::from_str_radix(&hex[..16], 16).unwrap_or(1)
}

fn scalar_string(v: &serde_json::Value) -> String {
    match v {
        serde_json::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn check_inputs(
    desc: &WorkflowDescriptor,
    inputs: &BTreeMap<String, serde_json::Value>,
) -> Result<(), PlatformError> {
    for (slot, ty) in &desc.inputs {
        let Some(v) = inputs.get(slot) else {
            return Err(PlatformError::SchemaMismatch { slot: slot.clone(), reason: "missing required input".into() });
        };
        let ok = match ty {
            SlotType::String | SlotType::DatasetRef | SlotType::ModelRef => v.is_string(),
            SlotType::Integer => v.is_i64() || v.is_u64(),
            SlotType::Real => v.is_number(),
        };
        if !ok {
            return Err(PlatformError::SchemaMismatch {
                slot: slot.clone(),
                reason: format!("expected {ty:?}, got {v}"),
            });
        }
    }
    for slot in inputs.keys() {
        if !desc.inputs.contains_key(slot) {
            return Err(PlatformError::SchemaMismatch { slot: slot.clone(), reason: "undeclared input".into() });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::{BuildFlavor, ResourceRequest};
    use crate::engine::{Direction, TaskSpec};
    use crate::program::{ArgSpec, ProgramTask, TaskProgram};
    use crate::sim::FederationConfig;
    use crate::vault::CredentialKind;
    use crate::world::World;
    use serde_json::json;

    const WORKFLOW_YAML: &str = r#"
name: rom
version: 1.0.0
inputs:
  a: integer
  b: integer
outputs:
  model: model-ref
nodes:
  main:
    kind: task_program
    artifacts: [romprog@1]
    lifecycle: {deploy: stage, start: run}
    placement: {site_kind: hpc}
  ingest:
    kind: data_pipeline
    steps:
      - op: acquire
        source: {endpoint: external, path: in/}
        destination: {endpoint: hpcA-store, path: "staged/${invocation}/"}
pipelines: [ingest]
"#;

    fn demo_program() -> TaskProgram {
        TaskProgram {
            channels: vec![],
            inputs: vec!["a".into(), "b".into()],
            tasks: vec![ProgramTask {
                spec: TaskSpec::new("combine", "sum", json!({}))
                    .param("a", Direction::In)
                    .param("b", Direction::In)
                    .param("model", Direction::Out),
                args: vec![
                    ArgSpec::Name("a".into()),
                    ArgSpec::Name("b".into()),
                    ArgSpec::Name("model".into()),
                ],
            }],
            outputs: BTreeMap::from([("model".to_string(), "model".to_string())]),
        }
    }

    struct Fixture {
        platform: Arc<Platform>,
        token: String,
        _dir: tempfile::TempDir,
    }

    fn software(program: &TaskProgram) -> serde_json::Value {
        serde_json::to_value(SoftwareRecord {
            image_name: "rom-image".into(),
            build_flavor: BuildFlavor::Generic,
            image_bytes: 10_000_000,
            executable: "rom".into(),
            arg_template: vec![],
            task_kind_hint: "inline".into(),
            resource_defaults: ResourceRequest { nodes: 1, cores_per_node: 4, mem_gb: 8, walltime_s: 7200 },
            program: Some(serde_json::to_value(program).unwrap()),
        })
        .unwrap()
    }

    fn fixture_with(program: &TaskProgram) -> Fixture {
        let dir = tempfile::tempdir().unwrap();
        let store = Arc::new(ObjectStore::in_memory());
        let world = WorldHandle::new(World::new(&FederationConfig::default_two_site(), dir.path(), store.clone()));
        let vault = Arc::new(Vault::in_memory(["hpcA".into(), "cloudA".into()]));
        let catalogs = Arc::new(CatalogStore::in_memory());
        let advisor = Arc::new(Advisor::in_memory());

        catalogs.put_entry(CatalogKind::Software, "romprog", software(program)).unwrap();
        let desc = crate::topology::parse_descriptor(WORKFLOW_YAML).unwrap();
        catalogs
            .put_entry(CatalogKind::Workflow, "rom", serde_json::to_value(&desc).unwrap())
            .unwrap();

        for site in ["hpcA", "cloudA"] {
            vault.store_credential("ada", site, CredentialKind::Password, b"pw".to_vec()).unwrap();
        }
        let token = vault
            .mint_token("ada", ["hpcA".to_string(), "cloudA".to_string()], 3600)
            .unwrap()
            .token_id;

        let platform = Platform::new(world, vault, catalogs, store, advisor, dir.path());
        // Seed the external endpoint feeding the stage-in pipeline.
        let root = dir.path().join("external");
        std::fs::create_dir_all(root.join("in")).unwrap();
        std::fs::write(root.join("in/input.dat"), b"payload").unwrap();
        platform.world().with(|w| {
            w.cluster.register_endpoint(crate::sim::EndpointInfo {
                name: "external".into(),
                site: "cloudA".into(),
                protocol: "ftp".into(),
                root,
                unreachable: false,
            })
        });
        Fixture { platform, token, _dir: dir }
    }

    fn fixture() -> Fixture {
        fixture_with(&demo_program())
    }

    #[test]
    fn endpoints_are_identities_over_pinned_workflows() {
        let fx = fixture();
        let e1 = fx.platform.register_endpoint("rom@1", "dev").unwrap();
        let e2 = fx.platform.register_endpoint("rom", "dev").unwrap();
        assert_ne!(e1, e2, "same workflow registers as distinct endpoints");
        assert_eq!(fx.platform.endpoint(&e2).unwrap().workflow_ref, "rom@1", "latest is pinned");
        assert!(fx.platform.endpoints().iter().any(|e| e.endpoint_id == e1));
        match fx.platform.register_endpoint("nope@1", "dev") {
            Err(PlatformError::Catalog(CatalogError::NotFound(_))) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn successful_invocation_walks_every_stage_once() {
        let fx = fixture();
        let ep = fx.platform.register_endpoint("rom@1", "dev").unwrap();
        let inputs = BTreeMap::from([("a".to_string(), json!(4)), ("b".to_string(), json!(5))]);
        let id = fx.platform.invoke(&ep, inputs, &fx.token).unwrap();
        fx.platform.join(&id);

        let status = fx.platform.get_status(&id).unwrap();
        assert_eq!(status.state, InvocationState::Succeeded, "error: {:?}", status.error);
        let seen: Vec<InvocationState> = status.history.iter().map(|h| h.state).collect();
        assert_eq!(
            seen,
            vec![
                InvocationState::Pending,
                InvocationState::StagingIn,
                InvocationState::Deploying,
                InvocationState::Running,
                InvocationState::StagingOut,
                InvocationState::Succeeded,
            ]
        );
        assert!(status.history.windows(2).all(|w| w[0].at <= w[1].at), "history is time-ordered");

        let results = fx.platform.fetch_results(&id).unwrap();
        assert_eq!(results.outputs["model"], json!({"kind": "inline", "value": 9}));
        let model_ref = &results.result_refs["model"];
        let entry = fx.platform.catalogs.get_entry(CatalogKind::Model, model_ref).unwrap();
        assert_eq!(entry.kind, CatalogKind::Model);

        // Stage-in pipeline delivered into the invocation-scoped directory.
        let delivered = fx
            .platform
            .world()
            .with(|w| w.cluster.site("hpcA").unwrap().store_root.join(format!("staged/{id}/input.dat")));
        assert!(delivered.exists());
    }

    #[test]
    fn schema_and_scope_failures_are_side_effect_free() {
        let fx = fixture();
        let ep = fx.platform.register_endpoint("rom@1", "dev").unwrap();

        let err = fx
            .platform
            .invoke(&ep, BTreeMap::from([("a".to_string(), json!(1))]), &fx.token)
            .unwrap_err();
        match err {
            PlatformError::SchemaMismatch { slot, .. } => assert_eq!(slot, "b"),
            other => panic!("unexpected {other:?}"),
        }

        let narrow = fx
            .platform
            .vault
            .mint_token("ada", ["cloudA".to_string()], 3600)
            .unwrap()
            .token_id;
        let inputs = BTreeMap::from([("a".to_string(), json!(1)), ("b".to_string(), json!(2))]);
        let err = fx.platform.invoke(&ep, inputs, &narrow).unwrap_err();
        match err {
            PlatformError::MissingCredential(site) => assert_eq!(site, "hpcA"),
            other => panic!("unexpected {other:?}"),
        }
        assert!(fx.platform.invocation_ids().is_empty(), "no invocation record created");
        let (jobs, transfers) = fx
            .platform
            .world()
            .with(|w| (w.cluster.jobs_tagged("inv-0001").len(), w.logistics.jobs().len()));
        assert_eq!((jobs, transfers), (0, 0), "fail-fast leaves no side effects");
    }

    #[test]
    fn cancel_mid_run_reaches_cancelled_and_kills_jobs() {
        let fx = fixture();
        fx.platform.hold_in_running.store(true, std::sync::atomic::Ordering::Relaxed);
        let ep = fx.platform.register_endpoint("rom@1", "dev").unwrap();
        let inputs = BTreeMap::from([("a".to_string(), json!(1)), ("b".to_string(), json!(2))]);
        let id = fx.platform.invoke(&ep, inputs, &fx.token).unwrap();

        // Wait for RUNNING (the driver then idles on the hold, with
        // virtual time frozen and the main job running), then cancel.
        let deadline = std::time::Instant::now() + std::time::Duration::from_secs(5);
        loop {
            let st = fx.platform.get_status(&id).unwrap();
            if st.state == InvocationState::Running {
                break;
            }
            assert!(!st.state.is_terminal(), "terminal before cancel: {:?} ({:?})", st.state, st.error);
            assert!(std::time::Instant::now() < deadline, "never reached RUNNING");
            std::thread::sleep(std::time::Duration::from_millis(2));
        }
        fx.platform.cancel(&id).unwrap();
        fx.platform.join(&id);

        let status = fx.platform.get_status(&id).unwrap();
        assert_eq!(status.state, InvocationState::Cancelled);
        let jobs = fx.platform.world().with(|w| {
            w.cluster.jobs_tagged(&id).iter().map(|j| j.state).collect::<Vec<_>>()
        });
        assert!(!jobs.is_empty());
        assert!(jobs.iter().all(|s| *s == JobState::Cancelled), "{jobs:?}");

        // Cancel on a terminal invocation is a no-op success.
        fx.platform.cancel(&id).unwrap();
        assert_eq!(fx.platform.get_status(&id).unwrap().state, InvocationState::Cancelled);

        // Results are unavailable for non-succeeded invocations.
        match fx.platform.fetch_results(&id) {
            Err(PlatformError::NotFinished(InvocationState::Cancelled)) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn concurrent_invocations_stay_isolated() {
        let fx = fixture();
        let ep = fx.platform.register_endpoint("rom@1", "dev").unwrap();
        let i1 = fx
            .platform
            .invoke(&ep, BTreeMap::from([("a".to_string(), json!(1)), ("b".to_string(), json!(2))]), &fx.token)
            .unwrap();
        let i2 = fx
            .platform
            .invoke(&ep, BTreeMap::from([("a".to_string(), json!(10)), ("b".to_string(), json!(20))]), &fx.token)
            .unwrap();
        fx.platform.join(&i1);
        fx.platform.join(&i2);

        for (id, total) in [(&i1, 3), (&i2, 30)] {
            let st = fx.platform.get_status(id).unwrap();
            assert_eq!(st.state, InvocationState::Succeeded, "{id}: {:?}", st.error);
            let r = fx.platform.fetch_results(id).unwrap();
            assert_eq!(r.outputs["model"], json!({"kind": "inline", "value": total}), "{id}");
        }
        let r1 = fx.platform.fetch_results(&i1).unwrap();
        let r2 = fx.platform.fetch_results(&i2).unwrap();
        assert_ne!(r1.result_refs["model"], r2.result_refs["model"], "refs are invocation-scoped");
    }
}
