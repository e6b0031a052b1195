//! Built-in computational kernels. Task payloads are not arbitrary user
//! code; every task names one of these kernels. A kernel is a pure function
//! of its input token values and its parameters, which is what makes
//! execution order irrelevant to the final token values.

use nalgebra::{DMatrix, DVector};
use serde_json::{json, Value};

use crate::datastore::{FieldType, ObjectStore, Schema};
use crate::value::{digest_json, TokenValue};

pub struct KernelCtx<'a> {
    pub store: &'a ObjectStore,
    pub site: &'a str,
}

/// Schema of dense matrices exchanged through the datastore
/// (column-major `data`).
pub const MATRIX_SCHEMA: &str = "dense_matrix";
/// Schema of truncated SVD factors (`u`, `v` column-major).
pub const SVD_SCHEMA: &str = "svd_result";

pub fn ensure_schemas(store: &ObjectStore) {
    let mut m = std::collections::BTreeMap::new();
    m.insert("rows".to_string(), FieldType::Integer);
    m.insert("cols".to_string(), FieldType::Integer);
    m.insert("data".to_string(), FieldType::Collection);
    let _ = store.register_schema(Schema { name: MATRIX_SCHEMA.into(), fields: m });

    let mut s = std::collections::BTreeMap::new();
    s.insert("rows".to_string(), FieldType::Integer);
    s.insert("cols".to_string(), FieldType::Integer);
    s.insert("rank".to_string(), FieldType::Integer);
    s.insert("u".to_string(), FieldType::Collection);
    s.insert("s".to_string(), FieldType::Collection);
    s.insert("v".to_string(), FieldType::Collection);
    let _ = store.register_schema(Schema { name: SVD_SCHEMA.into(), fields: s });
}

/// Runs the named kernel. Returns one value per out/inout parameter of the
/// calling task, or an error string that becomes a task failure.
pub fn run_kernel(
    name: &str,
    params: &Value,
    inputs: &[TokenValue],
    ctx: &KernelCtx,
) -> Result<Vec<TokenValue>, String> {
    match name {
        "noop" | "sleep" => Ok(Vec::new()),
        "fail" => Err(params.get("message").and_then(Value::as_str).unwrap_or("kernel failure").to_string()),
        "emit" => {
            let v = params.get("value").cloned().unwrap_or(Value::Null);
            Ok(vec![TokenValue::Inline { value: v }])
        }
        "sum" => Ok(vec![numeric_fold(inputs, 0.0, |a, b| a + b)?]),
        "product" => Ok(vec![numeric_fold(inputs, 1.0, |a, b| a * b)?]),
        "concat" => {
            let mut out = String::new();
            for v in inputs {
                out.push_str(&render(v));
            }
            Ok(vec![TokenValue::inline(out)])
        }
        // Deterministic combinator over arbitrary inputs, handy for
        // randomized equivalence checks: output is a digest of the inputs
        // and parameters.
        "mix" => {
            let blob = json!({"params": params, "inputs": inputs});
            Ok(vec![TokenValue::inline(digest_json(&blob)[..16].to_string())])
        }
        "last" => {
            let values = params.get("values").and_then(Value::as_array).ok_or("last: missing 'values'")?;
            Ok(vec![TokenValue::Inline { value: values.last().cloned().unwrap_or(Value::Null) }])
        }
        "fom_snapshot" => fom_snapshot(params, ctx),
        "assemble_matrix" => assemble_matrix(inputs, ctx),
        "rsvd" => rsvd_kernel(params, inputs, ctx),
        other => Err(format!("unknown kernel '{other}'")),
    }
}

fn render(v: &TokenValue) -> String {
    match v {
        TokenValue::Null => "null".into(),
        TokenValue::Inline { value } => match value {
            Value::String(s) => s.clone(),
            other => other.to_string(),
        },
        TokenValue::Object { oid } => oid.clone(),
        TokenValue::File { path, .. } => path.clone(),
    }
}

fn numeric_fold(inputs: &[TokenValue], init: f64, f: impl Fn(f64, f64) -> f64) -> Result<TokenValue, String> {
    let mut acc = init;
    let mut all_int = true;
    for v in inputs {
        let x = match v {
            // The IGNORE policy's null marker contributes the fold identity.
            TokenValue::Null => continue,
            TokenValue::Inline { value } => {
                // Non-numeric values contribute the fold identity, like Null.
                let Some(x) = value.as_f64() else { continue };
                if !value.is_i64() && !value.is_u64() {
                    all_int = false;
                }
                x
            }
            other => return Err(format!("non-inline numeric input {other:?}")),
        };
        acc = f(acc, x);
    }
    if all_int && acc.fract() == 0.0 && acc.abs() < 2f64.powi(53) {
        Ok(TokenValue::inline(acc as i64))
    } else {
        Ok(TokenValue::inline(acc))
    }
}

/// One solution snapshot of a synthetic parametric PDE: a superposition of
/// `modes` sine modes with parameter-dependent coefficients. Exactly
/// rank-`modes` across parameter values, so a truncated SVD at that rank
/// reconstructs the snapshot matrix to machine precision.
fn fom_snapshot(params: &Value, ctx: &KernelCtx) -> Result<Vec<TokenValue>, String> {
    let dofs = params.get("dofs").and_then(Value::as_u64).ok_or("fom_snapshot: missing 'dofs'")? as usize;
    let mu = params.get("mu").and_then(Value::as_f64).ok_or("fom_snapshot: missing 'mu'")?;
    let modes = params.get("modes").and_then(Value::as_u64).unwrap_or(3) as usize;
    if dofs < 2 {
        return Err("fom_snapshot: dofs must be >= 2".into());
    }
    let data = fom_field(dofs, mu, modes);
    let oid = store_matrix(ctx, dofs, 1, &data)?;
    Ok(vec![TokenValue::Object { oid }])
}

/// The analytic solution field sampled by `fom_snapshot`, exposed so that
/// callers can evaluate held-out parameter values against the same model.
pub fn fom_field(dofs: usize, mu: f64, modes: usize) -> Vec<f64> {
    let mut data = Vec::with_capacity(dofs);
    for i in 0..dofs {
        let x = i as f64 / (dofs - 1) as f64;
        let mut u = 0.0;
        for j in 0..modes {
            let coeff = mu.powi(j as i32 + 1) / (j as f64 + 1.0);
            u += coeff * ((j as f64 + 1.0) * std::f64::consts::PI * x).sin();
        }
        data.push(u);
    }
    data
}

/// Concatenates column vectors (each a dense_matrix object with cols = 1)
/// into one snapshot matrix.
fn assemble_matrix(inputs: &[TokenValue], ctx: &KernelCtx) -> Result<Vec<TokenValue>, String> {
    let mut rows = 0usize;
    let mut data: Vec<f64> = Vec::new();
    let mut cols = 0usize;
    for v in inputs {
        if v.is_null() {
            continue; // dropped member (IGNORE policy)
        }
        let TokenValue::Object { oid } = v else {
            return Err(format!("assemble_matrix: expected object input, got {v:?}"));
        };
        let (r, c, col) = load_matrix(ctx, oid)?;
        if c != 1 {
            return Err(format!("assemble_matrix: input {oid} is not a column vector"));
        }
        if cols == 0 {
            rows = r;
        } else if r != rows {
            return Err(format!("assemble_matrix: row mismatch ({r} vs {rows})"));
        }
        data.extend_from_slice(&col);
        cols += 1;
    }
    if cols == 0 {
        return Err("assemble_matrix: no columns".into());
    }
    let oid = store_matrix(ctx, rows, cols, &data)?;
    Ok(vec![TokenValue::Object { oid }])
}

fn rsvd_kernel(params: &Value, inputs: &[TokenValue], ctx: &KernelCtx) -> Result<Vec<TokenValue>, String> {
    let rank = params.get("rank").and_then(Value::as_u64).ok_or("rsvd: missing 'rank'")? as usize;
    let oversample = params.get("oversample").and_then(Value::as_u64).unwrap_or(4) as usize;
    let seed = params.get("seed").and_then(Value::as_u64).unwrap_or(0);
    let TokenValue::Object { oid } = inputs.first().ok_or("rsvd: missing matrix input")? else {
        return Err("rsvd: matrix input must be an object ref".into());
    };
    let (rows, cols, data) = load_matrix(ctx, oid)?;
    let a = DMatrix::from_column_slice(rows, cols, &data);
    let r = crate::rsvd::rsvd(&a, rank, oversample, seed).map_err(|e| e.to_string())?;
    let payload = json!({
        "rows": rows,
        "cols": cols,
        "rank": rank,
        "u": r.u.as_slice().to_vec(),
        "s": r.s.as_slice().to_vec(),
        "v": r.v.as_slice().to_vec(),
    });
    ensure_schemas(ctx.store);
    let oid = ctx.store.make_persistent(payload, SVD_SCHEMA, ctx.site).map_err(|e| e.to_string())?;
    Ok(vec![TokenValue::Object { oid }])
}

fn store_matrix(ctx: &KernelCtx, rows: usize, cols: usize, data: &[f64]) -> Result<String, String> {
    ensure_schemas(ctx.store);
    let payload = json!({"rows": rows, "cols": cols, "data": data});
    ctx.store.make_persistent(payload, MATRIX_SCHEMA, ctx.site).map_err(|e| e.to_string())
}

pub fn load_matrix(ctx: &KernelCtx, oid: &str) -> Result<(usize, usize, Vec<f64>), String> {
    let payload = ctx.store.get(oid).map_err(|e| e.to_string())?;
    let rows = payload.get("rows").and_then(Value::as_u64).ok_or("matrix: missing rows")? as usize;
    let cols = payload.get("cols").and_then(Value::as_u64).ok_or("matrix: missing cols")? as usize;
    let data: Vec<f64> = payload
        .get("data")
        .and_then(Value::as_array)
        .ok_or("matrix: missing data")?
        .iter()
        .map(|v| v.as_f64().ok_or("matrix: non-numeric entry".to_string()))
        .collect::<Result<_, _>>()?;
    if data.len() != rows * cols {
        return Err(format!("matrix: data length {} != {rows}x{cols}", data.len()));
    }
    Ok((rows, cols, data))
}

/// Loads a stored SVD result back into nalgebra form.
pub fn load_svd(ctx: &KernelCtx, oid: &str) -> Result<(DMatrix<f64>, DVector<f64>, DMatrix<f64>), String> {
    let payload = ctx.store.get(oid).map_err(|e| e.to_string())?;
    let rows = payload.get("rows").and_then(Value::as_u64).ok_or("svd: missing rows")? as usize;
    let cols = payload.get("cols").and_then(Value::as_u64).ok_or("svd: missing cols")? as usize;
    let rank = payload.get("rank").and_then(Value::as_u64).ok_or("svd: missing rank")? as usize;
    let grab = |key: &str| -> Result<Vec<f64>, String> {
        payload
            .get(key)
            .and_then(Value::as_array)
            .ok_or(format!("svd: missing {key}"))?
            .iter()
            .map(|v| v.as_f64().ok_or("svd: non-numeric entry".to_string()))
            .collect()
    };
    let u = DMatrix::from_column_slice(rows, rank, &grab("u")?);
    let s = DVector::from_vec(grab("s")?);
    let v = DMatrix::from_column_slice(cols, rank, &grab("v")?);
    Ok((u, s, v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    fn ctx(store: &ObjectStore) -> KernelCtx<'_> {
        KernelCtx { store, site: "hpcA" }
    }

    #[test]
    fn arithmetic_kernels() {
        let store = ObjectStore::in_memory();
        let c = ctx(&store);
        let ints = [TokenValue::inline(2), TokenValue::inline(3), TokenValue::Null];
        assert_eq!(run_kernel("sum", &json!({}), &ints, &c).unwrap(), vec![TokenValue::inline(5)]);
        assert_eq!(run_kernel("product", &json!({}), &ints, &c).unwrap(), vec![TokenValue::inline(6)]);
        let mixed = [TokenValue::inline(2), TokenValue::inline(0.5)];
        assert_eq!(run_kernel("sum", &json!({}), &mixed, &c).unwrap(), vec![TokenValue::inline(2.5)]);
    }

    #[test]
    fn mix_is_deterministic_and_input_sensitive() {
        let store = ObjectStore::in_memory();
        let c = ctx(&store);
        let a = run_kernel("mix", &json!({"k": 1}), &[TokenValue::inline(1)], &c).unwrap();
        let b = run_kernel("mix", &json!({"k": 1}), &[TokenValue::inline(1)], &c).unwrap();
        let d = run_kernel("mix", &json!({"k": 1}), &[TokenValue::inline(2)], &c).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, d);
    }

    #[test]
    fn snapshot_assemble_rsvd_pipeline_is_low_rank() {
        let store = Arc::new(ObjectStore::in_memory());
        let c = KernelCtx { store: &store, site: "hpcA" };
        let mut cols = Vec::new();
        for i in 0..6 {
            let mu = 0.5 + 0.1 * i as f64;
            let out = run_kernel("fom_snapshot", &json!({"dofs": 50, "mu": mu, "modes": 3}), &[], &c).unwrap();
            cols.push(out[0].clone());
        }
        let m = run_kernel("assemble_matrix", &json!({}), &cols, &c).unwrap();
        let svd = run_kernel("rsvd", &json!({"rank": 3, "oversample": 3, "seed": 1}), &m, &c).unwrap();
        let TokenValue::Object { oid: m_oid } = &m[0] else { panic!() };
        let TokenValue::Object { oid: s_oid } = &svd[0] else { panic!() };
        let (rows, colsn, data) = load_matrix(&c, m_oid).unwrap();
        let a = DMatrix::from_column_slice(rows, colsn, &data);
        let (u, s, v) = load_svd(&c, s_oid).unwrap();
        let err = (&a - &u * DMatrix::from_diagonal(&s) * v.transpose()).norm();
        // Snapshots are exactly rank 3, so rank-3 factors reconstruct them.
        assert!(err < 1e-9 * a.norm().max(1.0), "err = {err}");
    }

    #[test]
    fn unknown_kernel_and_failures() {
        let store = ObjectStore::in_memory();
        let c = ctx(&store);
        assert!(run_kernel("nope", &json!({}), &[], &c).is_err());
        let e = run_kernel("fail", &json!({"message": "boom"}), &[], &c).unwrap_err();
        assert_eq!(e, "boom");
    }
}
