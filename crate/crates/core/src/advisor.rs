//! Profiling store and configuration inference: append-only execution
//! profiles plus a k-nearest-neighbor predictor over min-max-normalized
//! (config, dataset-meta) features. Deliberately simple so predictions are
//! exactly reproducible: with k = 1, querying a training point returns its
//! recorded duration.

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;
use std::sync::RwLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProfileRecord {
    pub workflow: String,
    pub task: String,
    pub config: BTreeMap<String, f64>,
    pub meta: BTreeMap<String, f64>,
    pub duration_s: f64,
    pub node_seconds: f64,
}

#[derive(Debug, Error)]
pub enum AdvisorError {
    #[error("no history for workflow '{workflow}' task '{task}'")]
    NoHistory { workflow: String, task: String },
    #[error("no candidates given")]
    NoCandidates,
    #[error("invalid record: {0}")]
    InvalidRecord(String),
    #[error("storage failure: {0}")]
    Storage(#[from] std::io::Error),
}

pub struct Advisor {
    path: Option<PathBuf>,
    records: RwLock<Vec<ProfileRecord>>,
}

impl Advisor {
    pub fn in_memory() -> Self {
        Advisor { path: None, records: RwLock::new(Vec::new()) }
    }

    /// File-backed store at `<root>/profiles.jsonl` (one record per line).
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, AdvisorError> {
        let root: PathBuf = root.into();
        std::fs::create_dir_all(&root)?;
        let path = root.join("profiles.jsonl");
        let mut records = Vec::new();
        if path.exists() {
            for line in std::fs::read_to_string(&path)?.lines() {
                if line.trim().is_empty() {
                    continue;
                }
                let r: ProfileRecord = serde_json::from_str(line)
                    .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
                records.push(r);
            }
        }
        Ok(Advisor { path: Some(path), records: RwLock::new(records) })
    }

    pub fn record_profile(&self, record: ProfileRecord) -> Result<(), AdvisorError> {
        if record.duration_s <= 0.0 {
            return Err(AdvisorError::InvalidRecord("duration must be > 0".into()));
        }
        if let Some(path) = &self.path {
            use std::io::Write;
            let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
            writeln!(f, "{}", serde_json::to_string(&record).expect("encodes"))?;
        }
        self.records.write().unwrap().push(record);
        Ok(())
    }

    pub fn records_for(&self, workflow: &str, task: &str) -> Vec<ProfileRecord> {
        self.records
            .read()
            .unwrap()
            .iter()
            .filter(|r| r.workflow == workflow && r.task == task)
            .cloned()
            .collect()
    }

    pub fn records_for_workflow(&self, workflow: &str) -> Vec<ProfileRecord> {
        self.records.read().unwrap().iter().filter(|r| r.workflow == workflow).cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.records.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Mean duration of the k nearest stored records (k = min(3, available)).
    pub fn predict_duration(
        &self,
        workflow: &str,
        task: &str,
        config: &BTreeMap<String, f64>,
        meta: &BTreeMap<String, f64>,
    ) -> Result<f64, AdvisorError> {
        self.predict_duration_k(workflow, task, config, meta, 3)
    }

    pub fn predict_duration_k(
        &self,
        workflow: &str,
        task: &str,
        config: &BTreeMap<String, f64>,
        meta: &BTreeMap<String, f64>,
        k: usize,
    ) -> Result<f64, AdvisorError> {
        let history = self.records_for(workflow, task);
        if history.is_empty() {
            return Err(AdvisorError::NoHistory { workflow: workflow.to_string(), task: task.to_string() });
        }

        // Feature space: union of config and meta keys across the stored
        // history; min-max bounds computed from the history alone.
        let mut keys: BTreeSet<String> = BTreeSet::new();
        for r in &history {
            keys.extend(r.config.keys().cloned());
            keys.extend(r.meta.keys().cloned());
        }
        let feature = |cfg: &BTreeMap<String, f64>, m: &BTreeMap<String, f64>, key: &str| -> f64 {
            cfg.get(key).or_else(|| m.get(key)).copied().unwrap_or(0.0)
        };
        let mut bounds: BTreeMap<&str, (f64, f64)> = BTreeMap::new();
        for key in &keys {
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for r in &history {
                let v = feature(&r.config, &r.meta, key);
                lo = lo.min(v);
                hi = hi.max(v);
            }
            bounds.insert(key, (lo, hi));
        }
        let normalize = |key: &str, v: f64| -> f64 {
            let (lo, hi) = bounds[key];
            if hi > lo {
                (v - lo) / (hi - lo)
            } else {
                0.0
            }
        };

        let mut scored: Vec<(f64, usize)> = history
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let d2: f64 = keys
                    .iter()
                    .map(|key| {
                        let a = normalize(key, feature(&r.config, &r.meta, key));
                        let b = normalize(key, feature(config, meta, key));
                        (a - b) * (a - b)
                    })
                    .sum();
                (d2.sqrt(), i)
            })
            .collect();
        // Stable tie-break on insertion order.
        scored.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        let k = k.min(scored.len()).max(1);
        let mean = scored.iter().take(k).map(|&(_, i)| history[i].duration_s).sum::<f64>() / k as f64;
        Ok(mean)
    }

    /// Argmin of predicted duration over the candidate configs; ties go to
    /// the lexicographically smallest config.
    pub fn recommend_config(
        &self,
        workflow: &str,
        task: &str,
        meta: &BTreeMap<String, f64>,
        candidates: &[BTreeMap<String, f64>],
    ) -> Result<BTreeMap<String, f64>, AdvisorError> {
        if candidates.is_empty() {
            return Err(AdvisorError::NoCandidates);
        }
        let mut best: Option<(f64, &BTreeMap<String, f64>)> = None;
        for c in candidates {
            let d = self.predict_duration(workflow, task, c, meta)?;
            match &best {
                Some((bd, bc)) if d > *bd || (d == *bd && !config_lt(c, bc)) => {}
                _ => best = Some((d, c)),
            }
        }
        Ok(best.expect("candidates non-empty").1.clone())
    }
}

/// Lexicographic order over (key, value) pairs.
fn config_lt(a: &BTreeMap<String, f64>, b: &BTreeMap<String, f64>) -> bool {
    let av: Vec<(&String, &f64)> = a.iter().collect();
    let bv: Vec<(&String, &f64)> = b.iter().collect();
    for (x, y) in av.iter().zip(&bv) {
        match x.0.cmp(y.0) {
            std::cmp::Ordering::Less => return true,
            std::cmp::Ordering::Greater => return false,
            std::cmp::Ordering::Equal => {}
        }
        match x.1.partial_cmp(y.1).unwrap_or(std::cmp::Ordering::Equal) {
            std::cmp::Ordering::Less => return true,
            std::cmp::Ordering::Greater => return false,
            std::cmp::Ordering::Equal => {}
        }
    }
    av.len() < bv.len()
}
