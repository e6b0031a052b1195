//! Embedded declarative task programs.
//!
//! A software record may carry a JSON program: stream channel declarations,
//! a list of task submissions with argument bindings, and a mapping from
//! workflow output slots to logical token names. The interpreter replays the
//! program against one invocation's engine.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::engine::{Arg, EngineError, TaskSpec, TokenId};
use crate::value::TokenValue;
use crate::world::EngineHandle;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ChannelDecl {
    pub name: String,
    #[serde(default = "default_capacity")]
    pub capacity: usize,
}

fn default_capacity() -> usize {
    64
}

/// One argument binding: a logical token name, an inline JSON literal, or a
/// fully spelled-out token value (file/object references).
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArgSpec {
    Name(String),
    Value(serde_json::Value),
    Literal(TokenValue),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProgramTask {
    pub spec: TaskSpec,
    #[serde(default)]
    pub args: Vec<ArgSpec>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TaskProgram {
    #[serde(default)]
    pub channels: Vec<ChannelDecl>,
    /// Logical names bound from invocation inputs before any submission.
    #[serde(default)]
    pub inputs: Vec<String>,
    #[serde(default)]
    pub tasks: Vec<ProgramTask>,
    /// Output slot -> logical token name read after the run.
    #[serde(default)]
    pub outputs: BTreeMap<String, String>,
}

pub fn parse_program(v: &serde_json::Value) -> Result<TaskProgram, serde_json::Error> {
    serde_json::from_value(v.clone())
}

/// Replays a program on an engine: declares channels, binds inputs, submits
/// every task in order, waits for the declared outputs, and drains the rest.
pub fn run_program(
    engine: &EngineHandle,
    program: &TaskProgram,
    inputs: &BTreeMap<String, serde_json::Value>,
) -> Result<BTreeMap<String, TokenValue>, EngineError> {
    for ch in &program.channels {
        engine.open_stream(&ch.name, ch.capacity);
    }
    for name in &program.inputs {
        let value = inputs.get(name).cloned().unwrap_or(serde_json::Value::Null);
        engine.bind_input(name, TokenValue::inline(value));
    }

    let mut latest: BTreeMap<String, TokenId> = BTreeMap::new();
    for task in &program.tasks {
        let args: Vec<Arg> = task
            .args
            .iter()
            .map(|a| match a {
                ArgSpec::Name(n) => Arg::Name(n.clone()),
                ArgSpec::Value(v) => Arg::Value(TokenValue::inline(v.clone())),
                ArgSpec::Literal(v) => Arg::Value(v.clone()),
            })
            .collect();
        let outs = engine.submit(task.spec.clone(), args)?;
        let out_names = task.spec.params.iter().zip(&task.args).filter_map(|(p, a)| {
            match (p.direction, a) {
                (crate::engine::Direction::In, _) => None,
                (_, ArgSpec::Name(n)) => Some(n.clone()),
                _ => None,
            }
        });
        for (name, token) in out_names.zip(&outs) {
            latest.insert(name, *token);
        }
    }

    let mut results = BTreeMap::new();
    for (slot, logical) in &program.outputs {
        let token = latest
            .get(logical)
            .copied()
            .or_else(|| engine.current_token_id(logical))
            .ok_or_else(|| EngineError::TypeMismatch(format!("no token named '{logical}'")))?;
        results.insert(slot.clone(), engine.wait(token)?);
    }
    engine.barrier()?;
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datastore::ObjectStore;
    use crate::engine::Direction;
    use crate::sim::{FederationConfig, SiteKind};
    use crate::world::{World, WorldHandle};
    use serde_json::json;
    use std::sync::Arc;

    fn engine() -> EngineHandle {
        let store = Arc::new(ObjectStore::in_memory());
        let dir = std::env::temp_dir().join("program-tests");
        let world = WorldHandle::new(World::new(&FederationConfig::default_two_site(), dir, store));
        world.with(|w| {
            w.add_engine("inv", 11);
            w.with_engine("inv", |e, _| {
                e.add_worker("n0", "hpcA", SiteKind::Hpc, 8);
            });
        });
        world.engine_handle("inv")
    }

    fn sum_program() -> TaskProgram {
        TaskProgram {
            channels: vec![],
            inputs: vec!["a".into(), "b".into()],
            tasks: vec![
                ProgramTask {
                    spec: TaskSpec::new("add", "sum", json!({}))
                        .param("a", Direction::In)
                        .param("b", Direction::In)
                        .param("total", Direction::Out),
                    args: vec![
                        ArgSpec::Name("a".into()),
                        ArgSpec::Name("b".into()),
                        ArgSpec::Name("total".into()),
                    ],
                },
                ProgramTask {
                    spec: TaskSpec::new("scale", "product", json!({}))
                        .param("total", Direction::In)
                        .param("factor", Direction::In)
                        .param("scaled", Direction::Out),
                    args: vec![
                        ArgSpec::Name("total".into()),
                        ArgSpec::Value(json!(10)),
                        ArgSpec::Name("scaled".into()),
                    ],
                },
            ],
            outputs: BTreeMap::from([("result".to_string(), "scaled".to_string())]),
        }
    }

    #[test]
    fn program_round_trips_through_json() {
        let p = sum_program();
        let v = serde_json::to_value(&p).unwrap();
        let back = parse_program(&v).unwrap();
        assert_eq!(back.tasks.len(), p.tasks.len());
        assert_eq!(back.outputs, p.outputs);
        assert_eq!(back.inputs, p.inputs);
    }

    #[test]
    fn interpreter_runs_a_two_task_chain() {
        let e = engine();
        let out = run_program(
            &e,
            &sum_program(),
            &BTreeMap::from([("a".to_string(), json!(4)), ("b".to_string(), json!(5))]),
        )
        .unwrap();
        assert_eq!(out["result"], TokenValue::inline(90));
    }

    #[test]
    fn missing_output_logical_is_an_error() {
        let e = engine();
        let mut p = sum_program();
        p.outputs.insert("oops".into(), "nonexistent".into());
        let err = run_program(
            &e,
            &p,
            &BTreeMap::from([("a".to_string(), json!(1)), ("b".to_string(), json!(1))]),
        )
        .unwrap_err();
        assert!(matches!(err, EngineError::TypeMismatch(_)), "{err}");
    }
}
