//! Persistence abstraction for workflow objects: schema-checked records that
//! can be volatile or persistent, replicated per site, with locality
//! information consumed by the task scheduler. Objects are immutable once
//! persisted; an update creates a new object id.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::PathBuf;
use std::sync::RwLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldType {
    String,
    Integer,
    Real,
    Bool,
    /// Partitionable list of values.
    Collection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    pub name: String,
    pub fields: BTreeMap<String, FieldType>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PersistentObject {
    pub oid: String,
    pub schema: String,
    pub payload: serde_json::Value,
    pub replicas: BTreeSet<String>,
    pub persisted: bool,
}

#[derive(Debug, Error)]
pub enum DatastoreError {
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("unknown oid '{0}'")]
    UnknownOid(String),
    #[error("unknown schema '{0}'")]
    UnknownSchema(String),
    #[error("storage failure: {0}")]
    Storage(#[from] std::io::Error),
}

pub struct ObjectStore {
    root: Option<PathBuf>,
    objects: RwLock<HashMap<String, PersistentObject>>,
    schemas: RwLock<BTreeMap<String, Schema>>,
    counter: RwLock<u64>,
}

impl ObjectStore {
    pub fn in_memory() -> Self {
        ObjectStore {
            root: None,
            objects: RwLock::new(HashMap::new()),
            schemas: RwLock::new(BTreeMap::new()),
            counter: RwLock::new(0),
        }
    }

    /// File-backed store: replicas under `<root>/sites/<site>/objects/<oid>`,
    /// schema registry at `<root>/datastore/schemas.json`.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, DatastoreError> {
        let root: PathBuf = root.into();
        std::fs::create_dir_all(root.join("datastore"))?;
        let schema_path = root.join("datastore/schemas.json");
        let schemas: BTreeMap<String, Schema> = if schema_path.exists() {
            serde_json::from_slice(&std::fs::read(&schema_path)?)
                .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?
        } else {
            BTreeMap::new()
        };
        let mut objects = HashMap::new();
        let mut max_counter = 0u64;
        let sites_dir = root.join("sites");
        if sites_dir.exists() {
            for site in std::fs::read_dir(&sites_dir)? {
                let obj_dir = site?.path().join("objects");
                if !obj_dir.exists() {
                    continue;
                }
                for f in std::fs::read_dir(&obj_dir)? {
                    let p = f?.path();
                    let obj: PersistentObject = serde_json::from_slice(&std::fs::read(&p)?)
                        .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
                    if let Some(n) = obj.oid.strip_prefix("obj-").and_then(|s| s.parse::<u64>().ok()) {
                        max_counter = max_counter.max(n);
                    }
                    objects.entry(obj.oid.clone()).or_insert(obj);
                }
            }
        }
        Ok(ObjectStore {
            root: Some(root),
            objects: RwLock::new(objects),
            schemas: RwLock::new(schemas),
            counter: RwLock::new(max_counter),
        })
    }

    pub fn register_schema(&self, schema: Schema) -> Result<(), DatastoreError> {
        let mut schemas = self.schemas.write().unwrap();
        schemas.insert(schema.name.clone(), schema);
        if let Some(root) = &self.root {
            std::fs::create_dir_all(root.join("datastore"))?;
            std::fs::write(root.join("datastore/schemas.json"), serde_json::to_vec_pretty(&*schemas).expect("encodes"))?;
        }
        Ok(())
    }

    fn check_schema(schema: &Schema, value: &serde_json::Value) -> Result<(), DatastoreError> {
        let obj = value
            .as_object()
            .ok_or_else(|| DatastoreError::SchemaMismatch("value is not an object".into()))?;
        for (name, ty) in &schema.fields {
            let v = obj
                .get(name)
                .ok_or_else(|| DatastoreError::SchemaMismatch(format!("missing field '{name}'")))?;
            let ok = match ty {
                FieldType::String => v.is_string(),
                FieldType::Integer => v.is_i64() || v.is_u64(),
                FieldType::Real => v.is_number(),
                FieldType::Bool => v.is_boolean(),
                FieldType::Collection => v.is_array(),
            };
            if !ok {
                return Err(DatastoreError::SchemaMismatch(format!("field '{name}' is not a {ty:?}")));
            }
        }
        for key in obj.keys() {
            if !schema.fields.contains_key(key) {
                return Err(DatastoreError::SchemaMismatch(format!("unexpected field '{key}'")));
            }
        }
        Ok(())
    }

    fn write_replica(&self, site: &str, obj: &PersistentObject) -> Result<(), DatastoreError> {
        if let Some(root) = &self.root {
            let dir = root.join("sites").join(site).join("objects");
            std::fs::create_dir_all(&dir)?;
            std::fs::write(dir.join(&obj.oid), serde_json::to_vec(obj).expect("encodes"))?;
        }
        Ok(())
    }

    /// Persists a schema-checked value at `site`; returns the new oid.
    pub fn make_persistent(&self, value: serde_json::Value, schema: &str, site: &str) -> Result<String, DatastoreError> {
        {
            let schemas = self.schemas.read().unwrap();
            let s = schemas.get(schema).ok_or_else(|| DatastoreError::UnknownSchema(schema.to_string()))?;
            Self::check_schema(s, &value)?;
        }
        let oid = {
            let mut c = self.counter.write().unwrap();
            *c += 1;
            format!("obj-{:06}", *c)
        };
        let obj = PersistentObject {
            oid: oid.clone(),
            schema: schema.to_string(),
            payload: value,
            replicas: BTreeSet::from([site.to_string()]),
            persisted: true,
        };
        self.write_replica(site, &obj)?;
        self.objects.write().unwrap().insert(oid.clone(), obj);
        Ok(oid)
    }

    pub fn get(&self, oid: &str) -> Result<serde_json::Value, DatastoreError> {
        self.objects
            .read()
            .unwrap()
            .get(oid)
            .map(|o| o.payload.clone())
            .ok_or_else(|| DatastoreError::UnknownOid(oid.to_string()))
    }

    pub fn object(&self, oid: &str) -> Result<PersistentObject, DatastoreError> {
        self.objects
            .read()
            .unwrap()
            .get(oid)
            .cloned()
            .ok_or_else(|| DatastoreError::UnknownOid(oid.to_string()))
    }

    /// Sites holding a byte-identical replica.
    pub fn locations(&self, oid: &str) -> Result<BTreeSet<String>, DatastoreError> {
        self.objects
            .read()
            .unwrap()
            .get(oid)
            .map(|o| o.replicas.clone())
            .ok_or_else(|| DatastoreError::UnknownOid(oid.to_string()))
    }

    pub fn replicate(&self, oid: &str, site: &str) -> Result<(), DatastoreError> {
        let mut objects = self.objects.write().unwrap();
        let obj = objects.get_mut(oid).ok_or_else(|| DatastoreError::UnknownOid(oid.to_string()))?;
        obj.replicas.insert(site.to_string());
        let snapshot = obj.clone();
        drop(objects);
        self.write_replica(site, &snapshot)
    }

    /// Idempotent delete.
    pub fn delete(&self, oid: &str) -> Result<(), DatastoreError> {
        let removed = self.objects.write().unwrap().remove(oid);
        if let (Some(root), Some(obj)) = (&self.root, removed) {
            for site in &obj.replicas {
                let _ = std::fs::remove_file(root.join("sites").join(site).join("objects").join(oid));
            }
        }
        Ok(())
    }

    /// Approximate in-memory size of the payload, for locality scoring.
    pub fn size_bytes(&self, oid: &str) -> u64 {
        self.objects
            .read()
            .unwrap()
            .get(oid)
            .map(|o| serde_json::to_vec(&o.payload).map(|v| v.len() as u64).unwrap_or(0))
            .unwrap_or(0)
    }

    /// Splits a collection field into `k` contiguous partitions.
    pub fn partitions(&self, oid: &str, field: &str, k: usize) -> Result<Vec<Vec<serde_json::Value>>, DatastoreError> {
        let payload = self.get(oid)?;
        let arr = payload
            .get(field)
            .and_then(|v| v.as_array())
            .ok_or_else(|| DatastoreError::SchemaMismatch(format!("field '{field}' is not a collection")))?;
        let k = k.max(1);
        let chunk = arr.len().div_ceil(k);
        Ok(arr.chunks(chunk.max(1)).map(|c| c.to_vec()).collect())
    }
}
