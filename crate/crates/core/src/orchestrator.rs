//! Deployment orchestration: binds workflow nodes to federation sites,
//! stages software images, walks lifecycle plans wave by wave, and submits
//! main jobs for task-program nodes.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::Serialize;
use thiserror::Error;

use crate::catalog::{BuildFlavor, CatalogError, CatalogKind, CatalogStore, SoftwareRecord};
use crate::engine::EngineError;
use crate::logistics::{LogisticsError, PipelineState, TransferJobState};
use crate::sim::{Cluster, JobId, JobPayload, JobResources, SimError, SiteKind, SubmitAuth, VTime};
use crate::topology::{
    derive_lifecycle_plan, ArtifactRef, NodeKind, NodeTemplate, PlanError, Stage, WorkflowDescriptor,
};
use crate::vault::{CredentialKind, Vault, VaultError};
use crate::world::WorldHandle;

pub const REGISTRY_ENDPOINT: &str = "registry";

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error("no eligible site for node '{0}'")]
    NoEligibleSite(String),
    #[error("lifecycle action failed on {node}/{stage}: {reason}")]
    LifecycleActionFailed { node: String, stage: Stage, reason: String },
    #[error("authentication failure: {0}")]
    AuthFailure(String),
    #[error("queue rejected: {0}")]
    QueueRejected(String),
    #[error(transparent)]
    Vault(#[from] VaultError),
    #[error(transparent)]
    Catalog(#[from] CatalogError),
    #[error(transparent)]
    Logistics(#[from] LogisticsError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error("storage failure: {0}")]
    Storage(#[from] std::io::Error),
    #[error("malformed record: {0}")]
    BadRecord(String),
}

/// Per-node deployment progress.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum NodeDeployState {
    NotDeployed,
    ImageStaged,
    Deployed,
    Configured,
    Started,
    Stopped,
    Deleted,
    Failed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RunOutcome {
    Running,
    Succeeded,
    Failed,
}

#[derive(Clone, Debug, Serialize)]
pub struct OrchEvent {
    pub at: VTime,
    pub node: String,
    pub stage: String,
    pub detail: String,
}

/// One deployment of a workflow descriptor for one invocation.
#[derive(Debug, Serialize)]
pub struct DeploymentRun {
    pub invocation: String,
    /// node name -> site name.
    pub bindings: BTreeMap<String, String>,
    pub states: BTreeMap<String, NodeDeployState>,
    /// Nodes in the order they first progressed past NOT_DEPLOYED.
    pub progress_order: Vec<String>,
    /// Nodes in the order they reached STARTED.
    pub started_order: Vec<String>,
    /// Teardown actions performed after a failure, in execution order.
    pub rollback: Vec<(String, Stage)>,
    pub pipeline_runs: Vec<u64>,
    pub main_jobs: Vec<(String, JobId)>,
    pub outcome: RunOutcome,
    pub events: Vec<OrchEvent>,
}

impl DeploymentRun {
    pub fn state(&self, node: &str) -> NodeDeployState {
        self.states.get(node).copied().unwrap_or(NodeDeployState::NotDeployed)
    }

    fn set_state(&mut self, node: &str, state: NodeDeployState) {
        if self.state(node) == NodeDeployState::NotDeployed && state != NodeDeployState::NotDeployed {
            self.progress_order.push(node.to_string());
        }
        if state == NodeDeployState::Started {
            self.started_order.push(node.to_string());
        }
        self.states.insert(node.to_string(), state);
    }

    fn push_event(&mut self, at: VTime, node: &str, stage: &str, detail: impl Into<String>) {
        self.events.push(OrchEvent { at, node: node.to_string(), stage: stage.to_string(), detail: detail.into() });
    }

    /// JSON-lines orchestration event log.
    pub fn write_event_log(&self, path: &Path) -> std::io::Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let mut out = String::new();
        for e in &self.events {
            out.push_str(&serde_json::to_string(e).expect("encodes"));
            out.push('\n');
        }
        std::fs::write(path, out)
    }
}

/// Result of staging one software image onto a site.
#[derive(Clone, Debug, Serialize)]
pub struct StagedImage {
    pub digest: String,
    pub site: String,
    /// Path relative to the site store root.
    pub path: String,
    /// Site architecture tag; present for hpc-arch builds only.
    pub arch: Option<String>,
    /// False when the image was already present or registered directly.
    pub transferred: bool,
}

pub struct Orchestrator {
    world: WorldHandle,
    vault: Arc<Vault>,
    catalogs: Arc<CatalogStore>,
    registry_root: PathBuf,
    /// Virtual duration charged per lifecycle wave.
    pub action_ms: u64,
    /// Test hook: the named (node, stage) action fails when reached.
    pub fail_at: Option<(String, Stage)>,
}

impl Orchestrator {
    /// Registers the image registry endpoint and one `<site>-store`
    /// endpoint per site on construction.
    pub fn new(world: WorldHandle, vault: Arc<Vault>, catalogs: Arc<CatalogStore>, root: impl Into<PathBuf>) -> Self {
        let registry_root = root.into().join("registry");
        world.with(|w| {
            let site = w
                .cluster
                .sites_of_kind(SiteKind::Cloud)
                .first()
                .map(|s| s.name.clone())
                .or_else(|| w.cluster.site_names().first().cloned())
                .unwrap_or_default();
            w.cluster.register_endpoint(crate::sim::EndpointInfo {
                name: REGISTRY_ENDPOINT.into(),
                site,
                protocol: "local".into(),
                root: registry_root.clone(),
                unreachable: false,
            });
            for name in w.cluster.site_names() {
                let store = format!("{name}-store");
                if w.cluster.endpoint(&store).is_err() {
                    let root = w.cluster.site(&name).expect("site exists").store_root.clone();
                    w.cluster.register_endpoint(crate::sim::EndpointInfo {
                        name: store,
                        site: name,
                        protocol: "local".into(),
                        root,
                        unreachable: false,
                    });
                }
            }
        });
        Orchestrator { world, vault, catalogs, registry_root, action_ms: 200, fail_at: None }
    }

    pub fn world(&self) -> &WorldHandle {
        &self.world
    }

    // ------------------------------------------------------------------
    // Binding

    /// Binds every node to a site: explicit `site_name` wins, `hosted_on`
    /// nodes inherit their host's site, and everything else goes to the
    /// least-loaded site of the requested kind (ties break by site name).
    pub fn resolve_bindings(&self, desc: &WorkflowDescriptor) -> Result<BTreeMap<String, String>, OrchestratorError> {
        self.world.with(|w| resolve_bindings(desc, &w.cluster))
    }

    pub fn new_run(&self, invocation: &str, desc: &WorkflowDescriptor) -> Result<DeploymentRun, OrchestratorError> {
        let bindings = self.resolve_bindings(desc)?;
        let states = desc.nodes.iter().map(|n| (n.name.clone(), NodeDeployState::NotDeployed)).collect();
        Ok(DeploymentRun {
            invocation: invocation.to_string(),
            bindings,
            states,
            progress_order: Vec::new(),
            started_order: Vec::new(),
            rollback: Vec::new(),
            pipeline_runs: Vec::new(),
            main_jobs: Vec::new(),
            outcome: RunOutcome::Running,
            events: Vec::new(),
        })
    }

    // ------------------------------------------------------------------
    // Image staging

    fn store_endpoint(&self, site: &str) -> String {
        format!("{site}-store")
    }

    fn ensure_store_endpoint(&self, site: &str) -> Result<String, OrchestratorError> {
        let name = self.store_endpoint(site);
        self.world.with(|w| {
            if w.cluster.endpoint(&name).is_err() {
                let root = w.cluster.site(site)?.store_root.clone();
                w.cluster.register_endpoint(crate::sim::EndpointInfo {
                    name: name.clone(),
                    site: site.to_string(),
                    protocol: "local".into(),
                    root,
                    unreachable: false,
                });
            }
            Ok::<_, SimError>(())
        })?;
        Ok(name)
    }

    fn software_record(&self, artifact: &ArtifactRef) -> Result<(String, SoftwareRecord), OrchestratorError> {
        let entry = self.catalogs.get_ref(CatalogKind::Software, artifact)?;
        let rec: SoftwareRecord =
            serde_json::from_value(entry.payload.clone()).map_err(|e| OrchestratorError::BadRecord(e.to_string()))?;
        Ok((entry.digest, rec))
    }

    /// Stages a software image onto a site, keyed by its catalog digest.
    ///
    /// HPC sites receive the image as a file artifact under
    /// `images/<digest>` via a tracked transfer; cloud sites register the
    /// image directly with no transfer. Re-staging an already present digest
    /// performs no transfer.
    pub fn stage_image(
        &self,
        invocation: &str,
        token_id: &str,
        artifact: &ArtifactRef,
        site: &str,
    ) -> Result<StagedImage, OrchestratorError> {
        self.vault.resolve(token_id, site, "orchestrator")?;
        let (digest, rec) = self.software_record(artifact)?;
        let rel = format!("images/{digest}");

        // Export a content-addressed image manifest into the registry; the
        // bytes are deterministic so repeat stagings hash identically.
        let export = self.registry_root.join(&rel);
        if !export.exists() {
            std::fs::create_dir_all(export.parent().expect("has parent"))?;
            let manifest = serde_json::json!({
                "digest": digest,
                "image_name": rec.image_name,
                "image_bytes": rec.image_bytes,
            });
            std::fs::write(&export, serde_json::to_vec(&manifest).expect("encodes"))?;
        }

        let kind = self.world.with(|w| w.cluster.site(site).map(|s| s.kind))?;
        let arch = match rec.build_flavor {
            BuildFlavor::HpcArch => Some(site.to_string()),
            BuildFlavor::Generic => None,
        };
        let transferred = match kind {
            SiteKind::Hpc => {
                let dst_ep = self.ensure_store_endpoint(site)?;
                let inv = invocation.to_string();
                let job = self.world.with(|w| {
                    let crate::world::World { cluster, logistics, .. } = w;
                    logistics.start_file_transfer(cluster, &inv, REGISTRY_ENDPOINT, &rel, &dst_ep, &rel)
                })?;
                let state = self.world.pump_until(|w| match w.logistics.job(job).map(|j| j.state) {
                    Some(TransferJobState::Pending) | Some(TransferJobState::Active) => None,
                    other => Some(other),
                })?;
                match state {
                    Some(TransferJobState::Done) => true,
                    Some(TransferJobState::Skipped) => false,
                    other => {
                        return Err(OrchestratorError::BadRecord(format!("image transfer ended in {other:?}")));
                    }
                }
            }
            SiteKind::Cloud => {
                // Direct registration: the cloud provider pulls from the
                // registry itself, so no transfer job is tracked.
                let dst = self.world.with(|w| w.cluster.site(site).map(|s| s.store_root.join(&rel)))?;
                if !dst.exists() {
                    std::fs::create_dir_all(dst.parent().expect("has parent"))?;
                    std::fs::copy(&export, &dst)?;
                }
                false
            }
        };
        if let Some(a) = &arch {
            let dst = self.world.with(|w| w.cluster.site(site).map(|s| s.store_root.join(format!("{rel}.arch"))))?;
            std::fs::create_dir_all(dst.parent().expect("has parent"))?;
            std::fs::write(dst, a)?;
        }
        Ok(StagedImage { digest, site: site.to_string(), path: rel, arch, transferred })
    }

    // ------------------------------------------------------------------
    // Plan execution

    /// Walks the forward stages (deploy/configure/start) of the lifecycle
    /// plan wave by wave; actions in a wave share one virtual time slice.
    /// On any action failure the run rolls back: every started node is
    /// stopped and deleted in reverse start order, then remaining deployed
    /// nodes are deleted in reverse deployment order.
    pub fn execute_plan(
        &self,
        desc: &WorkflowDescriptor,
        run: &mut DeploymentRun,
        token_id: &str,
        context: &BTreeMap<String, String>,
    ) -> Result<(), OrchestratorError> {
        let plan = derive_lifecycle_plan(desc)?;
        for wave in &plan.waves {
            let mut acted = false;
            for a in wave {
                if matches!(a.stage, Stage::Stop | Stage::Delete) {
                    continue;
                }
                acted = true;
                let injected = self.fail_at.as_ref().is_some_and(|(n, s)| *n == a.node && *s == a.stage);
                let result = if injected {
                    Err(OrchestratorError::BadRecord("injected fault".into()))
                } else {
                    self.perform(desc, run, token_id, context, &a.node, a.stage)
                };
                if let Err(e) = result {
                    let now = self.world.with(|w| w.now());
                    run.set_state(&a.node, NodeDeployState::Failed);
                    run.push_event(now, &a.node, a.stage.name(), format!("failed: {e}"));
                    self.rollback(run);
                    run.outcome = RunOutcome::Failed;
                    return Err(OrchestratorError::LifecycleActionFailed {
                        node: a.node.clone(),
                        stage: a.stage,
                        reason: e.to_string(),
                    });
                }
            }
            if acted {
                self.world.sleep_ms(self.action_ms)?;
            }
        }
        run.outcome = RunOutcome::Succeeded;
        Ok(())
    }

    fn perform(
        &self,
        desc: &WorkflowDescriptor,
        run: &mut DeploymentRun,
        token_id: &str,
        context: &BTreeMap<String, String>,
        node: &str,
        stage: Stage,
    ) -> Result<(), OrchestratorError> {
        let tpl = desc
            .node(node)
            .ok_or_else(|| OrchestratorError::BadRecord(format!("unknown node '{node}'")))?;
        let site = run
            .bindings
            .get(node)
            .cloned()
            .ok_or_else(|| OrchestratorError::NoEligibleSite(node.to_string()))?;
        let now = self.world.with(|w| w.now());
        match stage {
            Stage::Deploy => {
                if let Some(art) = tpl.artifacts.first() {
                    let staged = self.stage_image(&run.invocation, token_id, art, &site)?;
                    run.set_state(node, NodeDeployState::ImageStaged);
                    run.push_event(now, node, "deploy", format!("image_staged {} on {site}", staged.digest));
                }
                run.set_state(node, NodeDeployState::Deployed);
                run.push_event(now, node, "deploy", format!("deployed on {site}"));
            }
            Stage::Configure => {
                run.set_state(node, NodeDeployState::Configured);
                run.push_event(now, node, "configure", "configured");
            }
            Stage::Start => {
                if tpl.kind == NodeKind::DataPipeline {
                    let handle = self.run_pipeline(&run.invocation, tpl, context)?;
                    run.pipeline_runs.push(handle);
                }
                run.set_state(node, NodeDeployState::Started);
                run.push_event(now, node, "start", "started");
            }
            Stage::Stop | Stage::Delete => unreachable!("teardown stages are not forward actions"),
        }
        Ok(())
    }

    fn rollback(&self, run: &mut DeploymentRun) {
        let now = self.world.with(|w| w.now());
        let mut torn_down: Vec<String> = Vec::new();
        for node in run.started_order.clone().into_iter().rev() {
            if run.state(&node) != NodeDeployState::Started {
                continue;
            }
            run.set_state(&node, NodeDeployState::Stopped);
            run.rollback.push((node.clone(), Stage::Stop));
            run.push_event(now, &node, "stop", "rollback");
            run.set_state(&node, NodeDeployState::Deleted);
            run.rollback.push((node.clone(), Stage::Delete));
            run.push_event(now, &node, "delete", "rollback");
            torn_down.push(node);
        }
        for node in run.progress_order.clone().into_iter().rev() {
            if torn_down.contains(&node) {
                continue;
            }
            if matches!(
                run.state(&node),
                NodeDeployState::ImageStaged | NodeDeployState::Deployed | NodeDeployState::Configured
            ) {
                run.set_state(&node, NodeDeployState::Deleted);
                run.rollback.push((node.clone(), Stage::Delete));
                run.push_event(now, &node, "delete", "rollback");
            }
        }
    }

    /// Orderly teardown after a successful run: stop started nodes in
    /// reverse start order, then delete everything deployed.
    pub fn teardown(&self, run: &mut DeploymentRun) {
        let now = self.world.with(|w| w.now());
        for node in run.started_order.clone().into_iter().rev() {
            if run.state(&node) == NodeDeployState::Started {
                run.set_state(&node, NodeDeployState::Stopped);
                run.push_event(now, &node, "stop", "teardown");
            }
        }
        for node in run.progress_order.clone().into_iter().rev() {
            if matches!(
                run.state(&node),
                NodeDeployState::ImageStaged
                    | NodeDeployState::Deployed
                    | NodeDeployState::Configured
                    | NodeDeployState::Stopped
            ) {
                run.set_state(&node, NodeDeployState::Deleted);
                run.push_event(now, &node, "delete", "teardown");
            }
        }
    }

    // ------------------------------------------------------------------
    // Pipelines

    /// Starts one data pipeline and blocks until it settles; trailing
    /// periodic syncs keep running after the pipeline itself reports done.
    fn run_pipeline(
        &self,
        invocation: &str,
        node: &NodeTemplate,
        context: &BTreeMap<String, String>,
    ) -> Result<u64, OrchestratorError> {
        let inv = invocation.to_string();
        let steps = node.steps.clone();
        let handle = self.world.with(move |w| {
            let crate::world::World { cluster, logistics, .. } = w;
            logistics.start_pipeline(cluster, &inv, &steps, context)
        })?;
        let (state, error) = self.world.pump_until(|w| match w.logistics.run_state(handle) {
            Ok((PipelineState::Running, _)) => None,
            Ok(done) => Some(done),
            Err(_) => Some((PipelineState::Failed, Some(format!("unknown pipeline run {handle}")))),
        })?;
        if state == PipelineState::Failed {
            return Err(OrchestratorError::BadRecord(format!(
                "pipeline '{}' failed: {}",
                node.name,
                error.unwrap_or_default()
            )));
        }
        Ok(handle)
    }

    /// Runs every pipeline listed in the descriptor (the stage-in path).
    pub fn run_pipelines(
        &self,
        desc: &WorkflowDescriptor,
        run: &mut DeploymentRun,
        context: &BTreeMap<String, String>,
    ) -> Result<(), OrchestratorError> {
        for node in desc.pipeline_nodes() {
            let handle = self.run_pipeline(&run.invocation, node, context)?;
            run.pipeline_runs.push(handle);
        }
        Ok(())
    }

    // ------------------------------------------------------------------
    // Main jobs

    /// Submits the main batch job for one software record. Credentials are
    /// resolved from the vault at submission time; keypair credentials
    /// present their public part to the site gateway, passwords are checked
    /// by the gateway directly. No job exists if authentication fails.
    pub fn submit_main_job(
        &self,
        token_id: &str,
        site: &str,
        invocation_tag: &str,
        record: &SoftwareRecord,
        program_ref: &str,
        resources: Option<JobResources>,
    ) -> Result<JobId, OrchestratorError> {
        let cred = self.vault.resolve(token_id, site, "orchestrator")?;
        let auth = SubmitAuth {
            user: cred.user.clone(),
            public_key: match cred.kind {
                CredentialKind::Keypair => cred.public_part.clone(),
                CredentialKind::Password => None,
            },
        };
        let d = &record.resource_defaults;
        let resources = resources.unwrap_or(JobResources {
            nodes: d.nodes,
            cores_per_node: d.cores_per_node,
            mem_gb: d.mem_gb,
        });
        let payload = JobPayload::Program { program_ref: program_ref.to_string() };
        self.world
            .with(|w| w.cluster.submit_job(site, invocation_tag, resources, d.walltime_s, payload, &auth))
            .map_err(|e| match e {
                SimError::AuthFailure(m) => OrchestratorError::AuthFailure(m),
                SimError::QueueRejected(m) => OrchestratorError::QueueRejected(m),
                other => OrchestratorError::Sim(other),
            })
    }

    /// Submits main jobs for every task-program node in the descriptor.
    pub fn submit_main_jobs(
        &self,
        desc: &WorkflowDescriptor,
        run: &mut DeploymentRun,
        token_id: &str,
    ) -> Result<Vec<(String, JobId)>, OrchestratorError> {
        let mut out = Vec::new();
        for node in desc.programs() {
            let art = node
                .artifacts
                .first()
                .ok_or_else(|| OrchestratorError::BadRecord(format!("program '{}' has no artifact", node.name)))?;
            let entry = self.catalogs.get_ref(CatalogKind::Software, art)?;
            let rec: SoftwareRecord = serde_json::from_value(entry.payload.clone())
                .map_err(|e| OrchestratorError::BadRecord(e.to_string()))?;
            let site = run
                .bindings
                .get(&node.name)
                .cloned()
                .ok_or_else(|| OrchestratorError::NoEligibleSite(node.name.clone()))?;
            let program_ref = format!("{}@{}", entry.name, entry.version);
            let job = self.submit_main_job(token_id, &site, &run.invocation, &rec, &program_ref, None)?;
            let now = self.world.with(|w| w.now());
            run.push_event(now, &node.name, "main_job", format!("submitted {job:?} on {site}"));
            run.main_jobs.push((node.name.clone(), job));
            out.push((node.name.clone(), job));
        }
        Ok(out)
    }
}

/// Free-function binding policy, usable with a borrowed cluster.
pub fn resolve_bindings(
    desc: &WorkflowDescriptor,
    cluster: &Cluster,
) -> Result<BTreeMap<String, String>, OrchestratorError> {
    let hosts: BTreeMap<&str, &str> = desc
        .relations
        .iter()
        .filter(|r| r.kind == crate::topology::RelationKind::HostedOn)
        .map(|r| (r.source.as_str(), r.target.as_str()))
        .collect();
    let mut bindings: BTreeMap<String, String> = BTreeMap::new();
    // Hosted nodes inherit their host's site, which may itself be hosted;
    // iterate to a fixed point, then place the rest independently.
    loop {
        let mut progress = false;
        for n in &desc.nodes {
            if bindings.contains_key(&n.name) {
                continue;
            }
            match hosts.get(n.name.as_str()) {
                Some(host) => {
                    if let Some(site) = bindings.get(*host).cloned() {
                        bindings.insert(n.name.clone(), site);
                        progress = true;
                    }
                }
                None => {
                    bindings.insert(n.name.clone(), pick_site(n, cluster)?);
                    progress = true;
                }
            }
        }
        if !progress {
            break;
        }
    }
    for n in &desc.nodes {
        if !bindings.contains_key(&n.name) {
            bindings.insert(n.name.clone(), pick_site(n, cluster)?);
        }
    }
    Ok(bindings)
}

fn pick_site(node: &NodeTemplate, cluster: &Cluster) -> Result<String, OrchestratorError> {
    if let Some(name) = &node.placement.site_name {
        return match cluster.site(name) {
            Ok(s) => Ok(s.name.clone()),
            Err(_) => Err(OrchestratorError::NoEligibleSite(node.name.clone())),
        };
    }
    cluster
        .sites_of_kind(node.placement.site_kind.into())
        .into_iter()
        .map(|s| (cluster.site_load(&s.name), s.name.clone()))
        .min()
        .map(|(_, name)| name)
        .ok_or_else(|| OrchestratorError::NoEligibleSite(node.name.clone()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::{CatalogStore, ResourceRequest};
    use crate::datastore::ObjectStore;
    use crate::sim::{FederationConfig, JobState, SiteConfig};
    use crate::topology::parse_descriptor;
    use crate::world::World;

    const DESCRIPTOR: &str = r#"
name: rom-demo
version: 1.0.0
inputs:
  dataset: dataset-ref
outputs:
  model: model-ref
nodes:
  sim_program:
    kind: task_program
    artifacts: [simulator@1]
    lifecycle: {deploy: stage, start: run}
    placement: {site_kind: hpc}
  da_program:
    kind: task_program
    artifacts: [analytics@1]
    lifecycle: {deploy: stage, start: run}
    placement: {site_kind: cloud}
  gateway:
    kind: service
    lifecycle: {deploy: install, configure: setup, start: serve, stop: halt, delete: remove}
    placement: {site_kind: cloud}
  ingest:
    kind: data_pipeline
    steps:
      - op: acquire
        source: {endpoint: external, path: in/}
        destination: {endpoint: hpcA-store, path: data/}
relations:
  - {source: sim_program, kind: feeds_data, target: da_program}
  - {source: sim_program, kind: connects_to, target: gateway}
pipelines: [ingest]
"#;

    struct Fixture {
        orch: Orchestrator,
        vault: Arc<Vault>,
        catalogs: Arc<CatalogStore>,
        token: String,
        _dir: tempfile::TempDir,
    }

    fn config() -> FederationConfig {
        FederationConfig {
            sites: vec![
                SiteConfig { name: "hpcA".into(), kind: crate::sim::SiteKind::Hpc, nodes: 4, cores_per_node: 8, mem_gb: 64 },
                SiteConfig { name: "hpcB".into(), kind: crate::sim::SiteKind::Hpc, nodes: 2, cores_per_node: 8, mem_gb: 64 },
                SiteConfig { name: "cloudA".into(), kind: crate::sim::SiteKind::Cloud, nodes: 4, cores_per_node: 4, mem_gb: 16 },
            ],
            links: Vec::new(),
            seed: 7,
        }
    }

    fn software(flavor: BuildFlavor) -> serde_json::Value {
        serde_json::to_value(SoftwareRecord {
            image_name: "demo-image".into(),
            build_flavor: flavor,
            image_bytes: 50_000_000,
            executable: "demo".into(),
            arg_template: vec!["--in".into(), "{dataset}".into()],
            task_kind_hint: "multicore".into(),
            resource_defaults: ResourceRequest { nodes: 1, cores_per_node: 4, mem_gb: 8, walltime_s: 7200 },
            program: Some(serde_json::json!({"tasks": []})),
        })
        .unwrap()
    }

    fn fixture() -> Fixture {
        let dir = tempfile::tempdir().unwrap();
        let store = Arc::new(ObjectStore::in_memory());
        let world = WorldHandle::new(World::new(&config(), dir.path(), store));
        let vault = Arc::new(Vault::in_memory(["hpcA".into(), "hpcB".into(), "cloudA".into()]));
        let catalogs = Arc::new(CatalogStore::in_memory());
        catalogs.put_entry(CatalogKind::Software, "simulator", software(BuildFlavor::HpcArch)).unwrap();
        catalogs.put_entry(CatalogKind::Software, "analytics", software(BuildFlavor::Generic)).unwrap();
        for site in ["hpcA", "hpcB", "cloudA"] {
            vault.store_credential("ada", site, CredentialKind::Password, b"pw".to_vec()).unwrap();
        }
        let token = vault
            .mint_token("ada", ["hpcA".to_string(), "hpcB".to_string(), "cloudA".to_string()], 3600)
            .unwrap()
            .token_id;
        let orch = Orchestrator::new(world, Arc::clone(&vault), Arc::clone(&catalogs), dir.path());
        Fixture { orch, vault, catalogs, token, _dir: dir }
    }

    fn seed_external(fx: &Fixture) {
        let root = fx._dir.path().join("external");
        std::fs::create_dir_all(root.join("in")).unwrap();
        std::fs::write(root.join("in/alpha.dat"), b"alpha contents").unwrap();
        fx.orch.world().with(|w| {
            w.cluster.register_endpoint(crate::sim::EndpointInfo {
                name: "external".into(),
                site: "cloudA".into(),
                protocol: "ftp".into(),
                root,
                unreachable: false,
            })
        });
    }

    fn desc() -> WorkflowDescriptor {
        parse_descriptor(DESCRIPTOR).unwrap()
    }

    #[test]
    fn bindings_prefer_least_loaded_site() {
        let fx = fixture();
        let d = desc();
        // Idle federation: lexicographic tie-break picks hpcA.
        let b = fx.orch.resolve_bindings(&d).unwrap();
        assert_eq!(b["sim_program"], "hpcA");
        assert_eq!(b["da_program"], "cloudA");
        assert_eq!(b["gateway"], "cloudA");
        assert_eq!(b["ingest"], "hpcA");

        // Load hpcA with a job; the program moves to hpcB.
        fx.orch.world().with(|w| {
            w.cluster
                .submit_job(
                    "hpcA",
                    "bg",
                    JobResources { nodes: 1, cores_per_node: 1, mem_gb: 1 },
                    3600,
                    JobPayload::Synthetic { duration_ms: 60_000 },
                    &SubmitAuth { user: "ada".into(), public_key: None },
                )
                .unwrap();
        });
        let b = fx.orch.resolve_bindings(&d).unwrap();
        assert_eq!(b["sim_program"], "hpcB");
    }

    #[test]
    fn hosted_node_inherits_host_binding_and_missing_kind_is_rejected() {
        let fx = fixture();
        let text = r#"
name: hosted
version: 1.0.0
nodes:
  app:
    kind: task_program
    artifacts: [simulator@1]
    lifecycle: {deploy: d, start: s}
  svc:
    kind: service
    lifecycle: {deploy: d, start: s}
    placement: {site_kind: cloud}
relations:
  - {source: app, kind: hosted_on, target: svc}
"#;
        let d = parse_descriptor(text).unwrap();
        let b = fx.orch.resolve_bindings(&d).unwrap();
        assert_eq!(b["svc"], "cloudA");
        assert_eq!(b["app"], "cloudA", "hosted node follows its host");

        // A federation without cloud sites cannot place the service.
        let dir = tempfile::tempdir().unwrap();
        let hpc_only = FederationConfig {
            sites: vec![SiteConfig {
                name: "hpcA".into(),
                kind: crate::sim::SiteKind::Hpc,
                nodes: 2,
                cores_per_node: 8,
                mem_gb: 64,
            }],
            links: Vec::new(),
            seed: 0,
        };
        let cluster = Cluster::new(&hpc_only, dir.path());
        match resolve_bindings(&d, &cluster) {
            Err(OrchestratorError::NoEligibleSite(node)) => assert_eq!(node, "svc"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn image_staging_is_idempotent_and_flavor_aware() {
        let fx = fixture();
        let art = ArtifactRef::parse("simulator@1").unwrap();

        let first = fx.orch.stage_image("inv-1", &fx.token, &art, "hpcA").unwrap();
        assert!(first.transferred);
        assert_eq!(first.arch.as_deref(), Some("hpcA"));
        let staged_path = fx.orch.world().with(|w| w.cluster.site("hpcA").unwrap().store_root.join(&first.path));
        assert!(staged_path.exists());

        // Same digest again: no transfer moves.
        let again = fx.orch.stage_image("inv-1", &fx.token, &art, "hpcA").unwrap();
        assert!(!again.transferred);
        assert_eq!(again.digest, first.digest);

        // Cloud staging registers directly: no transfer jobs at all.
        let jobs_before = fx.orch.world().with(|w| w.logistics.jobs().len());
        let generic = ArtifactRef::parse("analytics@1").unwrap();
        let cloud = fx.orch.stage_image("inv-1", &fx.token, &generic, "cloudA").unwrap();
        assert!(!cloud.transferred);
        assert_eq!(cloud.arch, None);
        let jobs_after = fx.orch.world().with(|w| w.logistics.jobs().len());
        assert_eq!(jobs_before, jobs_after);
        let cloud_path = fx.orch.world().with(|w| w.cluster.site("cloudA").unwrap().store_root.join(&cloud.path));
        assert!(cloud_path.exists());
    }

    #[test]
    fn plan_execution_deploys_starts_and_submits_main_jobs() {
        let fx = fixture();
        seed_external(&fx);
        let d = desc();
        let mut run = fx.orch.new_run("inv-7", &d).unwrap();
        fx.orch.run_pipelines(&d, &mut run, &BTreeMap::new()).unwrap();
        fx.orch.execute_plan(&d, &mut run, &fx.token, &BTreeMap::new()).unwrap();
        assert_eq!(run.outcome, RunOutcome::Succeeded);
        assert_eq!(run.state("sim_program"), NodeDeployState::Started);
        assert_eq!(run.state("da_program"), NodeDeployState::Started);
        assert_eq!(run.state("gateway"), NodeDeployState::Started);

        // The acquire pipeline delivered the external file.
        let delivered = fx
            .orch
            .world()
            .with(|w| w.cluster.site("hpcA").unwrap().store_root.join("data/alpha.dat"));
        assert!(delivered.exists());

        let jobs = fx.orch.submit_main_jobs(&d, &mut run, &fx.token).unwrap();
        assert_eq!(jobs.len(), 2);
        for (_, job) in &jobs {
            fx.orch.world().wait_job_started(*job).unwrap();
            fx.orch.world().with(|w| w.cluster.end_job(*job, true));
            assert_eq!(fx.orch.world().wait_job(*job).unwrap(), JobState::Completed);
        }

        fx.orch.teardown(&mut run);
        for node in ["sim_program", "da_program", "gateway"] {
            assert_eq!(run.state(node), NodeDeployState::Deleted, "{node}");
        }

        // Event log round-trips as JSON lines.
        let log = fx._dir.path().join("logs/orchestration.jsonl");
        run.write_event_log(&log).unwrap();
        let text = std::fs::read_to_string(&log).unwrap();
        assert!(text.lines().count() >= run.events.len());
        for line in text.lines() {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            assert!(v.get("node").is_some() && v.get("stage").is_some());
        }
    }

    #[test]
    fn failed_action_rolls_back_in_reverse_start_order() {
        let fx = fixture();
        seed_external(&fx);
        let d = desc();
        let mut orch = fx.orch;
        orch.fail_at = Some(("sim_program".into(), Stage::Start));
        let mut run = orch.new_run("inv-9", &d).unwrap();
        let err = orch.execute_plan(&d, &mut run, &fx.token, &BTreeMap::new()).unwrap_err();
        match err {
            OrchestratorError::LifecycleActionFailed { node, stage, .. } => {
                assert_eq!(node, "sim_program");
                assert_eq!(stage, Stage::Start);
            }
            other => panic!("unexpected {other}"),
        }
        assert_eq!(run.outcome, RunOutcome::Failed);
        assert_eq!(run.state("sim_program"), NodeDeployState::Failed);

        // Independent replay: nodes started before the failure are stopped
        // and deleted newest-first, then remaining deployed nodes are
        // deleted newest-first.
        let mut expected: Vec<(String, Stage)> = Vec::new();
        for node in run.started_order.iter().rev() {
            expected.push((node.clone(), Stage::Stop));
            expected.push((node.clone(), Stage::Delete));
        }
        for node in run.progress_order.iter().rev() {
            if run.started_order.contains(node) || node == "sim_program" {
                continue;
            }
            expected.push((node.clone(), Stage::Delete));
        }
        assert!(!expected.is_empty());
        assert_eq!(run.rollback, expected);
        for (node, _) in &expected {
            assert_eq!(run.state(node), NodeDeployState::Deleted, "{node}");
        }
    }

    #[test]
    fn revoked_token_submits_nothing_and_keypair_auth_is_enforced() {
        let fx = fixture();
        let d = desc();
        let mut run = fx.orch.new_run("inv-11", &d).unwrap();

        fx.vault.revoke(&fx.token).unwrap();
        let err = fx.orch.submit_main_jobs(&d, &mut run, &fx.token).unwrap_err();
        assert!(matches!(err, OrchestratorError::Vault(VaultError::Revoked)));
        let jobs = fx.orch.world().with(|w| w.cluster.jobs_tagged("inv-11").len());
        assert_eq!(jobs, 0, "auth failure must not create jobs");

        // A keypair whose public part is not authorized on the site is
        // rejected by the gateway; authorizing it makes submission succeed.
        let (_, public) = fx.vault.generate_keypair("bob", "hpcA").unwrap();
        let token = fx.vault.mint_token("bob", ["hpcA".to_string()], 3600).unwrap().token_id;
        let entry = fx.catalogs.get_entry(CatalogKind::Software, "simulator@1").unwrap();
        let rec: SoftwareRecord = serde_json::from_value(entry.payload).unwrap();
        let err = fx.orch.submit_main_job(&token, "hpcA", "inv-11", &rec, "simulator@1", None).unwrap_err();
        assert!(matches!(err, OrchestratorError::AuthFailure(_)), "{err}");
        fx.orch.world().with(|w| w.cluster.authorize_key("hpcA", &public)).unwrap();
        let job = fx.orch.submit_main_job(&token, "hpcA", "inv-11", &rec, "simulator@1", None).unwrap();
        assert_eq!(fx.orch.world().wait_job_started(job).unwrap(), JobState::Running);
    }
}
