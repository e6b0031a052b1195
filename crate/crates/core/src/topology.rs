//! Workflow descriptor model: a TOSCA-inspired deployment topology combined
//! with task-program references and declarative data-pipeline specs, plus
//! derivation of the deployment lifecycle plan.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    TaskProgram,
    SoftwareComponent,
    DataPipeline,
    ComputeTarget,
    Service,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelationKind {
    HostedOn,
    DependsOn,
    ConnectsTo,
    FeedsData,
}

/// The five lifecycle stages, in execution order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Deploy,
    Configure,
    Start,
    Stop,
    Delete,
}

impl Stage {
    pub const ALL: [Stage; 5] = [Stage::Deploy, Stage::Configure, Stage::Start, Stage::Stop, Stage::Delete];

    pub fn name(&self) -> &'static str {
        match self {
            Stage::Deploy => "deploy",
            Stage::Configure => "configure",
            Stage::Start => "start",
            Stage::Stop => "stop",
            Stage::Delete => "delete",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SiteKind {
    Hpc,
    Cloud,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    pub site_kind: SiteKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub site_name: Option<String>,
}

impl Default for Placement {
    fn default() -> Self {
        Placement { site_kind: SiteKind::Hpc, site_name: None }
    }
}

/// Reference to a versioned catalog artifact, `name@version` or `name@digest`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ArtifactRef {
    pub name: String,
    pub selector: RefSelector,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum RefSelector {
    Version(u32),
    Digest(String),
    Latest,
}

impl ArtifactRef {
    /// Parses `name`, `name@3` or `name@<hex digest>` forms.
    pub fn parse(s: &str) -> Result<ArtifactRef, String> {
        let s = s.trim();
        if s.is_empty() {
            return Err("empty artifact reference".into());
        }
        match s.split_once('@') {
            None => Ok(ArtifactRef { name: s.to_string(), selector: RefSelector::Latest }),
            Some((name, sel)) => {
                if name.is_empty() || sel.is_empty() {
                    return Err(format!("malformed artifact reference '{s}'"));
                }
                let selector = if let Ok(v) = sel.parse::<u32>() {
                    RefSelector::Version(v)
                } else if sel.len() >= 8 && sel.chars().all(|c| c.is_ascii_hexdigit()) {
                    RefSelector::Digest(sel.to_lowercase())
                } else {
                    return Err(format!("selector '{sel}' is neither a version nor a hex digest"));
                };
                Ok(ArtifactRef { name: name.to_string(), selector })
            }
        }
    }
}

impl fmt::Display for ArtifactRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.selector {
            RefSelector::Version(v) => write!(f, "{}@{}", self.name, v),
            RefSelector::Digest(d) => write!(f, "{}@{}", self.name, d),
            RefSelector::Latest => write!(f, "{}", self.name),
        }
    }
}

impl Serialize for ArtifactRef {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for ArtifactRef {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        ArtifactRef::parse(&s).map_err(serde::de::Error::custom)
    }
}

/// Declared types for workflow input/output slots.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SlotType {
    String,
    Integer,
    Real,
    DatasetRef,
    ModelRef,
}

/// One step of a declarative data-logistics pipeline, embedded in
/// `data_pipeline` nodes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineStep {
    pub op: PipelineOp,
    pub source: EndpointPath,
    pub destination: EndpointPath,
    /// Seconds between rounds; `periodic_sync` only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub period_s: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub filter: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PipelineOp {
    Acquire,
    Move,
    Store,
    PeriodicSync,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EndpointPath {
    pub endpoint: String,
    pub path: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeTemplate {
    pub name: String,
    pub kind: NodeKind,
    #[serde(default)]
    pub properties: BTreeMap<String, serde_json::Value>,
    #[serde(default)]
    pub artifacts: Vec<ArtifactRef>,
    /// stage -> action name
    #[serde(default)]
    pub lifecycle: BTreeMap<Stage, String>,
    #[serde(default)]
    pub placement: Placement,
    /// Pipeline steps; populated for `data_pipeline` nodes.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub steps: Vec<PipelineStep>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelationshipTemplate {
    pub source: String,
    pub kind: RelationKind,
    pub target: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorkflowDescriptor {
    pub name: String,
    pub version: String,
    #[serde(default)]
    pub inputs: BTreeMap<String, SlotType>,
    #[serde(default)]
    pub outputs: BTreeMap<String, SlotType>,
    /// Sorted by node name.
    pub nodes: Vec<NodeTemplate>,
    #[serde(default)]
    pub relations: Vec<RelationshipTemplate>,
    /// Names of data_pipeline nodes to run for each invocation.
    #[serde(default)]
    pub pipelines: Vec<String>,
}

impl WorkflowDescriptor {
    pub fn node(&self, name: &str) -> Option<&NodeTemplate> {
        self.nodes.iter().find(|n| n.name == name)
    }

    /// Node names of kind `task_program`, in name order.
    pub fn programs(&self) -> Vec<&NodeTemplate> {
        self.nodes.iter().filter(|n| n.kind == NodeKind::TaskProgram).collect()
    }

    pub fn pipeline_nodes(&self) -> Vec<&NodeTemplate> {
        self.pipelines.iter().filter_map(|p| self.node(p)).collect()
    }
}

#[derive(Debug, Error)]
pub enum DescriptorError {
    #[error("syntax error: {0}")]
    Syntax(String),
    #[error("schema error: {0}")]
    Schema(String),
    #[error("duplicate name: {0}")]
    DuplicateName(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum IssueCode {
    UnknownEndpoint,
    SelfLoop,
    Cycle,
    NoProgram,
    UnknownPipeline,
    NotAPipeline,
    BadHostTarget,
    LifecycleOnComputeTarget,
    ProgramArtifactCount,
    BadPeriod,
    PeriodicSyncNotLast,
    BadArtifactRef,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationIssue {
    pub code: IssueCode,
    /// Node name or `relations[i]` style path.
    pub path: String,
    pub message: String,
}

impl ValidationIssue {
    fn new(code: IssueCode, path: impl Into<String>, message: impl Into<String>) -> Self {
        ValidationIssue { code, path: path.into(), message: message.into() }
    }
}

// ---------------------------------------------------------------------------
// Parsing

/// Raw YAML shape of a descriptor document.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDescriptor {
    name: String,
    version: String,
    #[serde(default)]
    inputs: BTreeMap<String, SlotType>,
    #[serde(default)]
    outputs: BTreeMap<String, SlotType>,
    nodes: BTreeMap<String, RawNode>,
    #[serde(default)]
    relations: Vec<RelationshipTemplate>,
    #[serde(default)]
    pipelines: Vec<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawNode {
    kind: NodeKind,
    #[serde(default)]
    properties: BTreeMap<String, serde_json::Value>,
    #[serde(default)]
    artifacts: Vec<String>,
    #[serde(default)]
    lifecycle: BTreeMap<Stage, String>,
    #[serde(default)]
    placement: Option<Placement>,
    #[serde(default)]
    steps: Vec<PipelineStep>,
}

/// Parses a descriptor document (YAML; JSON is a YAML subset and also accepted).
pub fn parse_descriptor(text: &str) -> Result<WorkflowDescriptor, DescriptorError> {
    // serde_yaml reports duplicate map keys as a parse error.
    let raw: RawDescriptor = serde_yaml::from_str(text).map_err(|e| {
        let msg = e.to_string();
        if msg.contains("duplicate") {
            DescriptorError::DuplicateName(msg)
        } else if msg.contains("unknown field") || msg.contains("unknown variant") || msg.contains("missing field") {
            DescriptorError::Schema(msg)
        } else {
            DescriptorError::Syntax(msg)
        }
    })?;

    let mut nodes = Vec::with_capacity(raw.nodes.len());
    for (name, rn) in raw.nodes {
        let mut artifacts = Vec::with_capacity(rn.artifacts.len());
        for a in &rn.artifacts {
            let r = ArtifactRef::parse(a).map_err(DescriptorError::Schema)?;
            if matches!(r.selector, RefSelector::Latest) {
                return Err(DescriptorError::Schema(format!(
                    "node '{name}': artifact '{a}' must use name@version or name@digest"
                )));
            }
            artifacts.push(r);
        }
        nodes.push(NodeTemplate {
            name,
            kind: rn.kind,
            properties: rn.properties,
            artifacts,
            lifecycle: rn.lifecycle,
            placement: rn.placement.unwrap_or_default(),
            steps: rn.steps,
        });
    }
    // BTreeMap iteration already yields name order.
    Ok(WorkflowDescriptor {
        name: raw.name,
        version: raw.version,
        inputs: raw.inputs,
        outputs: raw.outputs,
        nodes,
        relations: raw.relations,
        pipelines: raw.pipelines,
    })
}

/// Serializes back to the external YAML schema.
pub fn serialize_descriptor(desc: &WorkflowDescriptor) -> String {
    #[derive(Serialize)]
    struct OutNode<'a> {
        kind: NodeKind,
        #[serde(skip_serializing_if = "BTreeMap::is_empty")]
        properties: &'a BTreeMap<String, serde_json::Value>,
        #[serde(skip_serializing_if = "Vec::is_empty")]
        artifacts: Vec<String>,
        #[serde(skip_serializing_if = "BTreeMap::is_empty")]
        lifecycle: &'a BTreeMap<Stage, String>,
        placement: &'a Placement,
        #[serde(skip_serializing_if = "Vec::is_empty")]
        steps: &'a Vec<PipelineStep>,
    }
    #[derive(Serialize)]
    struct OutDoc<'a> {
        name: &'a str,
        version: &'a str,
        #[serde(skip_serializing_if = "BTreeMap::is_empty")]
        inputs: &'a BTreeMap<String, SlotType>,
        #[serde(skip_serializing_if = "BTreeMap::is_empty")]
        outputs: &'a BTreeMap<String, SlotType>,
        nodes: BTreeMap<&'a str, OutNode<'a>>,
        #[serde(skip_serializing_if = "Vec::is_empty")]
        relations: &'a Vec<RelationshipTemplate>,
        #[serde(skip_serializing_if = "Vec::is_empty")]
        pipelines: &'a Vec<String>,
    }
    let doc = OutDoc {
        name: &desc.name,
        version: &desc.version,
        inputs: &desc.inputs,
        outputs: &desc.outputs,
        nodes: desc
            .nodes
            .iter()
            .map(|n| {
                (
                    n.name.as_str(),
                    OutNode {
                        kind: n.kind,
                        properties: &n.properties,
                        artifacts: n.artifacts.iter().map(|a| a.to_string()).collect(),
                        lifecycle: &n.lifecycle,
                        placement: &n.placement,
                        steps: &n.steps,
                    },
                )
            })
            .collect(),
        relations: &desc.relations,
        pipelines: &desc.pipelines,
    };
    serde_yaml::to_string(&doc).expect("descriptor serializes")
}

// ---------------------------------------------------------------------------
// Validation

/// Edges of the ordering graph: `depends_on` and `hosted_on` only.
fn ordering_edges(desc: &WorkflowDescriptor) -> Vec<(&str, &str)> {
    desc.relations
        .iter()
        .filter(|r| matches!(r.kind, RelationKind::DependsOn | RelationKind::HostedOn))
        .map(|r| (r.source.as_str(), r.target.as_str()))
        .collect()
}

pub fn validate(desc: &WorkflowDescriptor) -> Vec<ValidationIssue> {
    let mut issues = Vec::new();
    let names: BTreeSet<&str> = desc.nodes.iter().map(|n| n.name.as_str()).collect();

    for (i, r) in desc.relations.iter().enumerate() {
        let path = format!("relations[{i}]");
        for end in [&r.source, &r.target] {
            if !names.contains(end.as_str()) {
                issues.push(ValidationIssue::new(
                    IssueCode::UnknownEndpoint,
                    path.clone(),
                    format!("relation endpoint '{end}' names no node"),
                ));
            }
        }
        if r.source == r.target {
            issues.push(ValidationIssue::new(IssueCode::SelfLoop, path.clone(), format!("self-loop on '{}'", r.source)));
        }
        if r.kind == RelationKind::HostedOn {
            if let Some(t) = desc.node(&r.target) {
                if !matches!(t.kind, NodeKind::ComputeTarget | NodeKind::Service) {
                    issues.push(ValidationIssue::new(
                        IssueCode::BadHostTarget,
                        path,
                        format!("hosted_on target '{}' is not a compute_target or service", r.target),
                    ));
                }
            }
        }
    }

    for n in &desc.nodes {
        match n.kind {
            NodeKind::TaskProgram => {
                if n.artifacts.len() != 1 {
                    issues.push(ValidationIssue::new(
                        IssueCode::ProgramArtifactCount,
                        n.name.clone(),
                        format!("task_program node carries {} artifact refs, expected exactly 1", n.artifacts.len()),
                    ));
                }
            }
            NodeKind::ComputeTarget => {
                if !n.lifecycle.is_empty() {
                    issues.push(ValidationIssue::new(
                        IssueCode::LifecycleOnComputeTarget,
                        n.name.clone(),
                        "compute_target nodes carry no lifecycle actions",
                    ));
                }
            }
            NodeKind::DataPipeline => {
                let last = n.steps.len().saturating_sub(1);
                for (i, s) in n.steps.iter().enumerate() {
                    if s.op == PipelineOp::PeriodicSync {
                        match s.period_s {
                            Some(p) if p > 0 => {}
                            _ => issues.push(ValidationIssue::new(
                                IssueCode::BadPeriod,
                                format!("{}.steps[{i}]", n.name),
                                "periodic_sync requires period_s > 0",
                            )),
                        }
                        // Trailing periodic_sync steps only.
                        if n.steps[i..].iter().any(|t| t.op != PipelineOp::PeriodicSync) && i != last {
                            issues.push(ValidationIssue::new(
                                IssueCode::PeriodicSyncNotLast,
                                format!("{}.steps[{i}]", n.name),
                                "periodic_sync steps must come last",
                            ));
                        }
                    }
                }
            }
            _ => {}
        }
    }

    if !desc.nodes.iter().any(|n| n.kind == NodeKind::TaskProgram) {
        issues.push(ValidationIssue::new(IssueCode::NoProgram, desc.name.clone(), "descriptor has no task_program node"));
    }

    for p in &desc.pipelines {
        match desc.node(p) {
            None => issues.push(ValidationIssue::new(IssueCode::UnknownPipeline, p.clone(), format!("pipeline '{p}' names no node"))),
            Some(n) if n.kind != NodeKind::DataPipeline => {
                issues.push(ValidationIssue::new(IssueCode::NotAPipeline, p.clone(), format!("node '{p}' is not a data_pipeline")))
            }
            _ => {}
        }
    }

    // Cycle detection over depends_on + hosted_on (iterative DFS, colors).
    if let Some(cycle) = find_cycle(&names, &ordering_edges(desc)) {
        issues.push(ValidationIssue::new(
            IssueCode::Cycle,
            cycle.join(","),
            format!("ordering cycle through {{{}}}", cycle.join(", ")),
        ));
    }

    issues
}

fn find_cycle<'a>(names: &BTreeSet<&'a str>, edges: &[(&'a str, &'a str)]) -> Option<Vec<String>> {
    let mut adj: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for (s, t) in edges {
        if names.contains(s) && names.contains(t) && s != t {
            adj.entry(s).or_default().push(t);
        }
    }
    // 0 = white, 1 = on stack, 2 = done
    let mut color: HashMap<&str, u8> = HashMap::new();
    let mut stack: Vec<&str> = Vec::new();

    fn dfs<'a>(
        u: &'a str,
        adj: &BTreeMap<&'a str, Vec<&'a str>>,
        color: &mut HashMap<&'a str, u8>,
        stack: &mut Vec<&'a str>,
    ) -> Option<Vec<String>> {
        color.insert(u, 1);
        stack.push(u);
        for &v in adj.get(u).map(|v| v.as_slice()).unwrap_or(&[]) {
            match color.get(v).copied().unwrap_or(0) {
                0 => {
                    if let Some(c) = dfs(v, adj, color, stack) {
                        return Some(c);
                    }
                }
                1 => {
                    let pos = stack.iter().position(|&x| x == v).unwrap();
                    let mut cyc: Vec<String> = stack[pos..].iter().map(|s| s.to_string()).collect();
                    cyc.sort();
                    return Some(cyc);
                }
                _ => {}
            }
        }
        stack.pop();
        color.insert(u, 2);
        None
    }

    for &n in names {
        if color.get(n).copied().unwrap_or(0) == 0 {
            if let Some(c) = dfs(n, &adj, &mut color, &mut stack) {
                return Some(c);
            }
        }
    }
    None
}

// ---------------------------------------------------------------------------
// Lifecycle plan

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PlanAction {
    pub node: String,
    pub stage: Stage,
    pub action: String,
}

/// Ordered waves of lifecycle actions; actions within a wave carry no mutual
/// ordering constraint and may run concurrently.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LifecyclePlan {
    pub waves: Vec<Vec<PlanAction>>,
}

impl LifecyclePlan {
    pub fn flat(&self) -> Vec<&PlanAction> {
        self.waves.iter().flatten().collect()
    }

    pub fn index_of(&self, node: &str, stage: Stage) -> Option<usize> {
        self.flat().iter().position(|a| a.node == node && a.stage == stage)
    }
}

#[derive(Debug, Error)]
pub enum PlanError {
    #[error("cyclic topology: cannot order lifecycle actions")]
    CyclicTopology,
}

/// Derives the deployment lifecycle plan.
///
/// Ordering constraints:
///  - per node, declared stages follow deploy < configure < start < stop < delete;
///  - `hosted_on(a, b)`: b's start precedes a's deploy;
///  - `depends_on(a, b)`: a's stage-s action precedes b's stage-s action.
///
/// Waves are longest-path levels of the constraint DAG; within a wave actions
/// are sorted by (node, stage), so the flattened plan is deterministic.
pub fn derive_lifecycle_plan(desc: &WorkflowDescriptor) -> Result<LifecyclePlan, PlanError> {
    let mut items: Vec<PlanAction> = Vec::new();
    for n in &desc.nodes {
        for s in Stage::ALL {
            if let Some(action) = n.lifecycle.get(&s) {
                items.push(PlanAction { node: n.name.clone(), stage: s, action: action.clone() });
            }
        }
    }
    let idx = |node: &str, stage: Stage| items.iter().position(|a| a.node == node && a.stage == stage);

    let mut preds: Vec<Vec<usize>> = vec![Vec::new(); items.len()];
    // Per-node stage chain.
    for n in &desc.nodes {
        let declared: Vec<usize> = Stage::ALL.iter().filter_map(|&s| idx(&n.name, s)).collect();
        for w in declared.windows(2) {
            preds[w[1]].push(w[0]);
        }
    }
    for r in &desc.relations {
        match r.kind {
            RelationKind::HostedOn => {
                if let (Some(host_start), Some(dep)) = (idx(&r.target, Stage::Start), idx(&r.source, Stage::Deploy)) {
                    preds[dep].push(host_start);
                }
            }
            RelationKind::DependsOn => {
                for s in Stage::ALL {
                    if let (Some(a), Some(b)) = (idx(&r.source, s), idx(&r.target, s)) {
                        preds[b].push(a);
                    }
                }
            }
            _ => {}
        }
    }

    // Longest-path level assignment over the DAG.
    let mut level: Vec<Option<usize>> = vec![None; items.len()];
    fn assign(
        i: usize,
        preds: &[Vec<usize>],
        level: &mut Vec<Option<usize>>,
        visiting: &mut Vec<bool>,
    ) -> Result<usize, PlanError> {
        if let Some(l) = level[i] {
            return Ok(l);
        }
        if visiting[i] {
            return Err(PlanError::CyclicTopology);
        }
        visiting[i] = true;
        let mut l = 0;
        for &p in &preds[i] {
            l = l.max(assign(p, preds, level, visiting)? + 1);
        }
        visiting[i] = false;
        level[i] = Some(l);
        Ok(l)
    }
    let mut visiting = vec![false; items.len()];
    for i in 0..items.len() {
        assign(i, &preds, &mut level, &mut visiting)?;
    }

    let max_level = level.iter().flatten().copied().max().map(|m| m + 1).unwrap_or(0);
    let mut waves: Vec<Vec<PlanAction>> = vec![Vec::new(); max_level];
    for (i, item) in items.into_iter().enumerate() {
        waves[level[i].unwrap()].push(item);
    }
    for w in &mut waves {
        w.sort();
    }
    Ok(LifecyclePlan { waves })
}
