//! Versioned, content-addressed registries: workflow registry, software
//! catalog, data catalog and model repository behind one store.

use std::collections::HashMap;
use std::fmt;
use std::path::PathBuf;
use std::sync::RwLock;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::topology::{self, ArtifactRef, RefSelector};
use crate::value::{digest_json, DIGEST_ALGORITHM};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CatalogKind {
    Workflow,
    Software,
    Dataset,
    Model,
}

impl CatalogKind {
    pub const ALL: [CatalogKind; 4] = [CatalogKind::Workflow, CatalogKind::Software, CatalogKind::Dataset, CatalogKind::Model];

    pub fn dir_name(&self) -> &'static str {
        match self {
            CatalogKind::Workflow => "workflow",
            CatalogKind::Software => "software",
            CatalogKind::Dataset => "dataset",
            CatalogKind::Model => "model",
        }
    }

    pub fn parse(s: &str) -> Option<CatalogKind> {
        Self::ALL.into_iter().find(|k| k.dir_name() == s)
    }
}

impl fmt::Display for CatalogKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.dir_name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BuildFlavor {
    Generic,
    HpcArch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResourceRequest {
    pub nodes: u32,
    pub cores_per_node: u32,
    pub mem_gb: u32,
    pub walltime_s: u64,
}

impl Default for ResourceRequest {
    fn default() -> Self {
        ResourceRequest { nodes: 1, cores_per_node: 1, mem_gb: 1, walltime_s: 3600 }
    }
}

/// Deployment recipe plus invocation descriptor for one software component.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SoftwareRecord {
    pub image_name: String,
    pub build_flavor: BuildFlavor,
    pub image_bytes: u64,
    pub executable: String,
    /// Argument template; `{name}` placeholders are filled from inputs.
    #[serde(default)]
    pub arg_template: Vec<String>,
    /// One of the task-engine task kinds.
    pub task_kind_hint: String,
    #[serde(default)]
    pub resource_defaults: ResourceRequest,
    /// Embedded task program payload for task_program artifacts.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub program: Option<serde_json::Value>,
}

pub const TASK_KINDS: [&str; 4] = ["inline", "binary", "multicore", "multinode"];

/// Metadata for a dataset or model: format, location, protocol.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataRecord {
    pub format: String,
    pub endpoint: String,
    pub path: String,
    pub protocol: String,
    pub size_bytes: u64,
    pub checksum: String,
}

pub const PROTOCOL_TAGS: [&str; 3] = ["local", "ftp", "webdav"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CatalogEntry {
    pub kind: CatalogKind,
    pub name: String,
    pub version: u32,
    pub digest: String,
    pub digest_algorithm: String,
    pub payload: serde_json::Value,
    pub created_at: u64,
}

#[derive(Debug, Error)]
pub enum CatalogError {
    #[error("invalid payload for {kind} '{name}': {reason}")]
    InvalidPayload { kind: CatalogKind, name: String, reason: String },
    #[error("storage failure: {0}")]
    StorageFailure(#[from] std::io::Error),
    #[error("encoding failure: {0}")]
    Encoding(#[from] serde_json::Error),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("ambiguous digest prefix: {0}")]
    AmbiguousDigest(String),
    #[error("malformed reference: {0}")]
    BadRef(String),
}

/// Content-addressed catalog with integer versions per name, optionally
/// file-backed under `catalog/<kind>/<name>/`.
pub struct CatalogStore {
    root: Option<PathBuf>,
    inner: RwLock<HashMap<(CatalogKind, String), Vec<CatalogEntry>>>,
}

impl CatalogStore {
    pub fn in_memory() -> Self {
        CatalogStore { root: None, inner: RwLock::new(HashMap::new()) }
    }

    /// Opens (or creates) a file-backed store rooted at `<root>/catalog`.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, CatalogError> {
        let root: PathBuf = root.into();
        let base = root.join("catalog");
        std::fs::create_dir_all(&base)?;
        let mut map: HashMap<(CatalogKind, String), Vec<CatalogEntry>> = HashMap::new();
        for kind in CatalogKind::ALL {
            let kdir = base.join(kind.dir_name());
            if !kdir.exists() {
                continue;
            }
            for name_dir in std::fs::read_dir(&kdir)? {
                let name_dir = name_dir?.path();
                if !name_dir.is_dir() {
                    continue;
                }
                let mut entries = Vec::new();
                for f in std::fs::read_dir(&name_dir)? {
                    let p = f?.path();
                    if p.file_name().map(|n| n == "index.json").unwrap_or(false) {
                        continue;
                    }
                    if p.extension().map(|e| e == "json").unwrap_or(false) {
                        let entry: CatalogEntry = serde_json::from_slice(&std::fs::read(&p)?)
                            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
                        entries.push(entry);
                    }
                }
                entries.sort_by_key(|e| e.version);
                if let Some(first) = entries.first() {
                    map.insert((first.kind, first.name.clone()), entries);
                }
            }
        }
        Ok(CatalogStore { root: Some(root), inner: RwLock::new(map) })
    }

    fn validate_payload(kind: CatalogKind, name: &str, payload: &serde_json::Value) -> Result<(), CatalogError> {
        let bad = |reason: String| CatalogError::InvalidPayload { kind, name: name.to_string(), reason };
        match kind {
            CatalogKind::Workflow => {
                let desc: topology::WorkflowDescriptor =
                    serde_json::from_value(payload.clone()).map_err(|e| bad(e.to_string()))?;
                let issues = topology::validate(&desc);
                if !issues.is_empty() {
                    return Err(bad(serde_json::to_string(&issues).unwrap_or_default()));
                }
            }
            CatalogKind::Software => {
                let rec: SoftwareRecord = serde_json::from_value(payload.clone()).map_err(|e| bad(e.to_string()))?;
                if !TASK_KINDS.contains(&rec.task_kind_hint.as_str()) {
                    return Err(bad(format!("unknown task kind hint '{}'", rec.task_kind_hint)));
                }
                for arg in &rec.arg_template {
                    if arg.contains("{}") {
                        return Err(bad(format!("unnamed placeholder in argument template '{arg}'")));
                    }
                }
            }
            CatalogKind::Dataset | CatalogKind::Model => {
                let rec: DataRecord = serde_json::from_value(payload.clone()).map_err(|e| bad(e.to_string()))?;
                if !PROTOCOL_TAGS.contains(&rec.protocol.as_str()) {
                    return Err(bad(format!("unknown protocol tag '{}'", rec.protocol)));
                }
                if rec.checksum.is_empty() {
                    return Err(bad("checksum must be non-empty for published records".into()));
                }
            }
        }
        Ok(())
    }

    /// Publishes a new immutable version; returns (version, digest).
    pub fn put_entry(&self, kind: CatalogKind, name: &str, payload: serde_json::Value) -> Result<(u32, String), CatalogError> {
        Self::validate_payload(kind, name, &payload)?;
        let digest = digest_json(&payload);
        let mut inner = self.inner.write().unwrap();
        let entries = inner.entry((kind, name.to_string())).or_default();
        let version = entries.last().map(|e| e.version + 1).unwrap_or(1);
        let entry = CatalogEntry {
            kind,
            name: name.to_string(),
            version,
            digest: digest.clone(),
            digest_algorithm: DIGEST_ALGORITHM.to_string(),
            payload,
            created_at: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
        };
        if let Some(root) = &self.root {
            let dir = root.join("catalog").join(kind.dir_name()).join(name);
            std::fs::create_dir_all(&dir)?;
            std::fs::write(dir.join(format!("{version}.json")), serde_json::to_vec_pretty(&entry)?)?;
            let index: Vec<_> = entries
                .iter()
                .chain(std::iter::once(&entry))
                .map(|e| serde_json::json!({"version": e.version, "digest": e.digest, "created_at": e.created_at}))
                .collect();
            std::fs::write(dir.join("index.json"), serde_json::to_vec_pretty(&index)?)?;
        }
        entries.push(entry);
        Ok((version, digest))
    }

    /// Resolves `name`, `name@version` or `name@digest-prefix`.
    pub fn get_entry(&self, kind: CatalogKind, reference: &str) -> Result<CatalogEntry, CatalogError> {
        let r = ArtifactRef::parse(reference).map_err(CatalogError::BadRef)?;
        self.get_ref(kind, &r)
    }

    pub fn get_ref(&self, kind: CatalogKind, r: &ArtifactRef) -> Result<CatalogEntry, CatalogError> {
        let inner = self.inner.read().unwrap();
        let entries = inner
            .get(&(kind, r.name.clone()))
            .ok_or_else(|| CatalogError::NotFound(format!("{kind} '{}'", r.name)))?;
        match &r.selector {
            RefSelector::Latest => Ok(entries.last().expect("non-empty version list").clone()),
            RefSelector::Version(v) => entries
                .iter()
                .find(|e| e.version == *v)
                .cloned()
                .ok_or_else(|| CatalogError::NotFound(format!("{kind} '{}@{v}'", r.name))),
            RefSelector::Digest(d) => {
                let matches: Vec<&CatalogEntry> = entries.iter().filter(|e| e.digest.starts_with(d.as_str())).collect();
                // Identical payloads across versions share a digest; latest wins.
                let distinct: std::collections::BTreeSet<&str> = matches.iter().map(|e| e.digest.as_str()).collect();
                match distinct.len() {
                    0 => Err(CatalogError::NotFound(format!("{kind} '{}@{d}'", r.name))),
                    1 => Ok((*matches.last().unwrap()).clone()),
                    _ => Err(CatalogError::AmbiguousDigest(d.clone())),
                }
            }
        }
    }

    /// All versions of a name, ascending; empty when the name is unknown.
    pub fn list_versions(&self, kind: CatalogKind, name: &str) -> Vec<(u32, String, u64)> {
        let inner = self.inner.read().unwrap();
        inner
            .get(&(kind, name.to_string()))
            .map(|es| es.iter().map(|e| (e.version, e.digest.clone(), e.created_at)).collect())
            .unwrap_or_default()
    }

    pub fn list_names(&self, kind: CatalogKind) -> Vec<String> {
        let inner = self.inner.read().unwrap();
        let mut names: Vec<String> = inner.keys().filter(|(k, _)| *k == kind).map(|(_, n)| n.clone()).collect();
        names.sort();
        names
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::value::digest_json;

    fn software_payload() -> serde_json::Value {
        serde_json::to_value(SoftwareRecord {
            image_name: "rom-image".into(),
            build_flavor: BuildFlavor::HpcArch,
            image_bytes: 1 << 20,
            executable: "rom".into(),
            arg_template: vec!["--dofs={dofs}".into()],
            task_kind_hint: "multicore".into(),
            resource_defaults: ResourceRequest::default(),
            program: None,
        })
        .unwrap()
    }

    #[test]
    fn first_version_is_one_and_content_addressing_holds() {
        let store = CatalogStore::in_memory();
        let payload = software_payload();
        let (v1, d1) = store.put_entry(CatalogKind::Software, "rom", payload.clone()).unwrap();
        assert_eq!(v1, 1);
        let (v2, d2) = store.put_entry(CatalogKind::Software, "rom", payload.clone()).unwrap();
        assert_eq!((v2, &d2), (2, &d1));
        // Digest recomputation oracle.
        assert_eq!(d1, digest_json(&payload));
    }

    #[test]
    fn invalid_workflow_payload_rejected_with_issues() {
        let store = CatalogStore::in_memory();
        // No task_program node -> validation issue embedded in the error.
        let desc = crate::topology::parse_descriptor("name: x\nversion: 1.0.0\nnodes:\n  a: {kind: service}\n").unwrap();
        let err = store
            .put_entry(CatalogKind::Workflow, "x", serde_json::to_value(&desc).unwrap())
            .unwrap_err();
        match err {
            CatalogError::InvalidPayload { reason, .. } => assert!(reason.contains("NoProgram"), "{reason}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn get_resolution_rules() {
        let store = CatalogStore::in_memory();
        let p = software_payload();
        store.put_entry(CatalogKind::Software, "rom", p.clone()).unwrap();
        let mut p2 = p.clone();
        p2["image_bytes"] = serde_json::json!(2 << 20);
        store.put_entry(CatalogKind::Software, "rom", p2).unwrap();

        assert_eq!(store.get_entry(CatalogKind::Software, "rom").unwrap().version, 2);
        assert_eq!(store.get_entry(CatalogKind::Software, "rom@1").unwrap().version, 1);
        assert!(matches!(store.get_entry(CatalogKind::Software, "rom@deadbeef"), Err(CatalogError::NotFound(_))));
        assert!(matches!(store.get_entry(CatalogKind::Software, "nope"), Err(CatalogError::NotFound(_))));
    }

    #[test]
    fn list_versions_ascending_and_digests_stable() {
        let store = CatalogStore::in_memory();
        assert!(store.list_versions(CatalogKind::Dataset, "unknown").is_empty());
        let p = software_payload();
        for _ in 0..3 {
            store.put_entry(CatalogKind::Software, "s", p.clone()).unwrap();
        }
        let versions = store.list_versions(CatalogKind::Software, "s");
        assert_eq!(versions.iter().map(|v| v.0).collect::<Vec<_>>(), vec![1, 2, 3]);
        let expect = digest_json(&p);
        assert!(versions.iter().all(|(_, d, _)| *d == expect));
    }

    #[test]
    fn immutability_under_later_puts() {
        let store = CatalogStore::in_memory();
        let p1 = software_payload();
        store.put_entry(CatalogKind::Software, "s", p1.clone()).unwrap();
        let before = serde_json::to_vec(&store.get_entry(CatalogKind::Software, "s@1").unwrap().payload).unwrap();
        let mut p2 = p1.clone();
        p2["executable"] = serde_json::json!("other");
        store.put_entry(CatalogKind::Software, "s", p2).unwrap();
        let after = serde_json::to_vec(&store.get_entry(CatalogKind::Software, "s@1").unwrap().payload).unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn file_backed_store_survives_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let p = software_payload();
        {
            let store = CatalogStore::open(dir.path()).unwrap();
            store.put_entry(CatalogKind::Software, "rom", p.clone()).unwrap();
            store.put_entry(CatalogKind::Software, "rom", p.clone()).unwrap();
        }
        let store = CatalogStore::open(dir.path()).unwrap();
        let e = store.get_entry(CatalogKind::Software, "rom").unwrap();
        assert_eq!(e.version, 2);
        assert_eq!(e.payload, p);
        assert!(dir.path().join("catalog/software/rom/index.json").exists());
    }

    #[test]
    fn bad_protocol_and_empty_checksum_rejected() {
        let store = CatalogStore::in_memory();
        let mk = |protocol: &str, checksum: &str| {
            serde_json::to_value(DataRecord {
                format: "csv".into(),
                endpoint: "ext".into(),
                path: "a.csv".into(),
                protocol: protocol.into(),
                size_bytes: 10,
                checksum: checksum.into(),
            })
            .unwrap()
        };
        assert!(store.put_entry(CatalogKind::Dataset, "d", mk("gopher", "abc")).is_err());
        assert!(store.put_entry(CatalogKind::Dataset, "d", mk("ftp", "")).is_err());
        assert!(store.put_entry(CatalogKind::Dataset, "d", mk("ftp", "abc")).is_ok());
    }
}
