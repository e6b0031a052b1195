//! Python bindings for the platform core: descriptor parsing and validation,
//! the randomized SVD and snapshot model, the profiling advisor, the secrets
//! vault, and the bundled end-to-end exemplar runs.

use std::collections::BTreeMap;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use serde_json::Value;

use hpcwaas_core::exemplars::{EsmParams, RomParams, UcParams};
use hpcwaas_core::topology;
use hpcwaas_core::vault::CredentialKind;

/// serde_json -> Python via the stdlib `json` module; the bindings favour
/// plain dicts/lists over wrapper types.
fn to_py(py: Python<'_>, v: &Value) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(v).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

fn to_py_of<T: serde::Serialize>(py: Python<'_>, v: &T) -> PyResult<Py<PyAny>> {
    let value = serde_json::to_value(v).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    to_py(py, &value)
}

// ---------------------------------------------------------------------------
// Descriptors

/// Parses a workflow descriptor (YAML or JSON text) into a plain dict.
#[pyfunction]
fn parse_descriptor(py: Python<'_>, text: &str) -> PyResult<Py<PyAny>> {
    let desc = topology::parse_descriptor(text).map_err(|e| PyValueError::new_err(e.to_string()))?;
    to_py_of(py, &desc)
}

/// Parses and validates a descriptor; returns the list of issues (empty
/// means the descriptor is deployable).
#[pyfunction]
fn validate_descriptor(py: Python<'_>, text: &str) -> PyResult<Py<PyAny>> {
    let desc = topology::parse_descriptor(text).map_err(|e| PyValueError::new_err(e.to_string()))?;
    to_py_of(py, &topology::validate(&desc))
}

// ---------------------------------------------------------------------------
// Numerics

/// Bytes needed to hold a dense snapshot matrix of `dofs` x `steps` doubles.
#[pyfunction]
fn estimate_snapshot_memory(dofs: u64, steps: u64) -> u64 {
    hpcwaas_core::rsvd::estimate_snapshot_memory(dofs, steps)
}

/// The analytic parametrised field sampled by the ROM exemplar.
#[pyfunction]
#[pyo3(signature = (dofs, mu, modes=3))]
fn fom_field(dofs: usize, mu: f64, modes: usize) -> Vec<f64> {
    hpcwaas_core::kernel::fom_field(dofs, mu, modes)
}

/// Randomized truncated SVD of a row-major matrix; returns `(u, s, v)` with
/// `u` and `v` as row-major nested lists.
#[pyfunction]
#[pyo3(signature = (rows, rank, oversample=4, seed=0))]
fn rsvd(rows: Vec<Vec<f64>>, rank: usize, oversample: usize, seed: u64) -> PyResult<(Vec<Vec<f64>>, Vec<f64>, Vec<Vec<f64>>)> {
    let m = rows.len();
    let n = rows.first().map(Vec::len).unwrap_or(0);
    if rows.iter().any(|r| r.len() != n) {
        return Err(PyValueError::new_err("ragged matrix"));
    }
    let a = nalgebra::DMatrix::from_fn(m, n, |i, j| rows[i][j]);
    let f = hpcwaas_core::rsvd::rsvd(&a, rank, oversample, seed).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let dense = |m: &nalgebra::DMatrix<f64>| -> Vec<Vec<f64>> {
        (0..m.nrows()).map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect()).collect()
    };
    Ok((dense(&f.u), f.s.iter().copied().collect(), dense(&f.v)))
}

// ---------------------------------------------------------------------------
// Advisor

/// In-memory profiling advisor: k-NN duration prediction and configuration
/// recommendation over recorded runs.
#[pyclass]
struct Advisor {
    inner: hpcwaas_core::advisor::Advisor,
}

#[pymethods]
impl Advisor {
    #[new]
    fn new() -> Self {
        Advisor { inner: hpcwaas_core::advisor::Advisor::in_memory() }
    }

    #[pyo3(signature = (workflow, task, config, duration_s, node_seconds, meta=None))]
    fn record_profile(
        &self,
        workflow: &str,
        task: &str,
        config: BTreeMap<String, f64>,
        duration_s: f64,
        node_seconds: f64,
        meta: Option<BTreeMap<String, f64>>,
    ) -> PyResult<()> {
        self.inner
            .record_profile(hpcwaas_core::advisor::ProfileRecord {
                workflow: workflow.into(),
                task: task.into(),
                config,
                meta: meta.unwrap_or_default(),
                duration_s,
                node_seconds,
            })
            .map_err(|e| PyValueError::new_err(e.to_string()))
    }

    #[pyo3(signature = (workflow, task, config, meta=None, k=3))]
    fn predict_duration(
        &self,
        workflow: &str,
        task: &str,
        config: BTreeMap<String, f64>,
        meta: Option<BTreeMap<String, f64>>,
        k: usize,
    ) -> PyResult<f64> {
        self.inner
            .predict_duration_k(workflow, task, &config, &meta.unwrap_or_default(), k)
            .map_err(|e| PyValueError::new_err(e.to_string()))
    }

    #[pyo3(signature = (workflow, task, candidates, meta=None))]
    fn recommend_config(
        &self,
        workflow: &str,
        task: &str,
        candidates: Vec<BTreeMap<String, f64>>,
        meta: Option<BTreeMap<String, f64>>,
    ) -> PyResult<BTreeMap<String, f64>> {
        self.inner
            .recommend_config(workflow, task, &meta.unwrap_or_default(), &candidates)
            .map_err(|e| PyValueError::new_err(e.to_string()))
    }
}

// ---------------------------------------------------------------------------
// Vault

/// In-memory secrets vault scoped to a fixed set of sites. Secret material
/// goes in; only identifiers, public parts, and tokens ever come out.
#[pyclass]
struct Vault {
    inner: hpcwaas_core::vault::Vault,
}

#[pymethods]
impl Vault {
    #[new]
    fn new(sites: Vec<String>) -> Self {
        Vault { inner: hpcwaas_core::vault::Vault::in_memory(sites) }
    }

    #[pyo3(signature = (user, site, material, kind="password"))]
    fn store_credential(&self, user: &str, site: &str, material: &str, kind: &str) -> PyResult<String> {
        let kind = match kind {
            "password" => CredentialKind::Password,
            "keypair" => CredentialKind::Keypair,
            other => return Err(PyValueError::new_err(format!("unknown credential kind '{other}'"))),
        };
        self.inner
            .store_credential(user, site, kind, material.as_bytes().to_vec())
            .map_err(|e| PyValueError::new_err(e.to_string()))
    }

    /// Generates a managed keypair; returns `(credential_id, public_key)`.
    fn generate_keypair(&self, user: &str, site: &str) -> PyResult<(String, String)> {
        self.inner.generate_keypair(user, site).map_err(|e| PyValueError::new_err(e.to_string()))
    }

    #[pyo3(signature = (user, scope, ttl_s=3600))]
    fn mint_token(&self, py: Python<'_>, user: &str, scope: Vec<String>, ttl_s: u64) -> PyResult<Py<PyAny>> {
        let token = self.inner.mint_token(user, scope, ttl_s).map_err(|e| PyValueError::new_err(e.to_string()))?;
        to_py_of(py, &token)
    }

    fn revoke_token(&self, token_id: &str) -> PyResult<()> {
        self.inner.revoke(token_id).map_err(|e| PyValueError::new_err(e.to_string()))
    }
}

// ---------------------------------------------------------------------------
// Exemplars

/// Runs the reduced-order-model pipeline on a fresh simulated federation.
#[pyfunction]
#[pyo3(signature = (dofs=40, steps=6, rank=5, tolerance=1e-6, modes=5, seed=1, inject_failures=0))]
#[allow(clippy::too_many_arguments)]
fn run_rom_pipeline(
    py: Python<'_>,
    dofs: usize,
    steps: usize,
    rank: usize,
    tolerance: f64,
    modes: usize,
    seed: u64,
    inject_failures: u32,
) -> PyResult<Py<PyAny>> {
    let params = RomParams { dofs, steps, rank, tolerance, modes, seed, inject_failures };
    let report =
        hpcwaas_core::exemplars::run_rom_pipeline(&params).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    to_py_of(py, &report)
}

/// Runs the ensemble with online pruning plus its no-pruning baseline.
#[pyfunction]
#[pyo3(signature = (members=8, divergent=None, threshold=1.0, window=3, steps=20, interval_ms=1000))]
fn run_ensemble_pruning(
    py: Python<'_>,
    members: usize,
    divergent: Option<Vec<usize>>,
    threshold: Option<f64>,
    window: usize,
    steps: usize,
    interval_ms: u64,
) -> PyResult<Py<PyAny>> {
    let params = EsmParams {
        members,
        divergent: divergent.unwrap_or_else(|| vec![1, 4, 6]),
        threshold,
        window,
        steps,
        interval_ms,
    };
    let report =
        hpcwaas_core::exemplars::run_ensemble_pruning(&params).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    to_py_of(py, &report)
}

/// Runs the urgent deadline-driven ensemble.
#[pyfunction]
#[pyo3(signature = (members=24, member_s=600, deadline_s=7200, min_nodes=2, max_nodes=4, seed=0))]
fn run_urgent_ensemble(
    py: Python<'_>,
    members: usize,
    member_s: u64,
    deadline_s: u64,
    min_nodes: u32,
    max_nodes: u32,
    seed: u64,
) -> PyResult<Py<PyAny>> {
    let params = UcParams { members, member_s, deadline_s, min_nodes, max_nodes, seed };
    let report =
        hpcwaas_core::exemplars::run_urgent_ensemble(&params).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    to_py_of(py, &report)
}

#[pymodule]
fn hpcwaas_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(parse_descriptor, m)?)?;
    m.add_function(wrap_pyfunction!(validate_descriptor, m)?)?;
    m.add_function(wrap_pyfunction!(estimate_snapshot_memory, m)?)?;
    m.add_function(wrap_pyfunction!(fom_field, m)?)?;
    m.add_function(wrap_pyfunction!(rsvd, m)?)?;
    m.add_function(wrap_pyfunction!(run_rom_pipeline, m)?)?;
    m.add_function(wrap_pyfunction!(run_ensemble_pruning, m)?)?;
    m.add_function(wrap_pyfunction!(run_urgent_ensemble, m)?)?;
    m.add_class::<Advisor>()?;
    m.add_class::<Vault>()?;
    Ok(())
}
