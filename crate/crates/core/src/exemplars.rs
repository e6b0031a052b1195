//! Three end-to-end workflow fixtures: a reduced-order-model (ROM)
//! construction pipeline with iterative training refinement, an ensemble run
//! with streaming-metric pruning, and an urgent ensemble under a hard
//! deadline with elastic capacity. Each returns a serializable report with a
//! human-readable rendering.

use std::collections::BTreeMap;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use serde_json::json;
use thiserror::Error;

use crate::advisor::{Advisor, AdvisorError, ProfileRecord};
use crate::datastore::ObjectStore;
use crate::engine::{Arg, Direction, EngineError, FailurePolicy, PublishSpec, TaskKind, TaskSpec};
use crate::kernel::{self, KernelCtx};
use crate::sim::{
    FederationConfig, JobId, JobPayload, JobResources, JobState, SimError, SiteConfig, SiteKind, SubmitAuth,
};
use crate::world::{World, WorldHandle};

#[derive(Debug, Error)]
pub enum ExemplarError {
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Advisor(#[from] AdvisorError),
    #[error("kernel result error: {0}")]
    Kernel(String),
}

fn auth() -> SubmitAuth {
    SubmitAuth { user: "exemplar".into(), public_key: None }
}

// ---------------------------------------------------------------------------
// ROM construction pipeline

#[derive(Clone, Debug)]
pub struct RomParams {
    /// Degrees of freedom per snapshot (rows of the snapshot matrix).
    pub dofs: usize,
    /// Initial number of training parameter points (columns in round 1).
    pub steps: usize,
    /// Target reduced-basis rank.
    pub rank: usize,
    /// Relative projection-error tolerance at held-out parameters.
    pub tolerance: f64,
    /// Number of sine modes in the synthetic solution field.
    pub modes: usize,
    pub seed: u64,
    /// Fail the first n attempts of the first snapshot task (RETRY(2) set).
    pub inject_failures: u32,
}

impl Default for RomParams {
    fn default() -> Self {
        RomParams { dofs: 40, steps: 6, rank: 5, tolerance: 1e-6, modes: 5, seed: 1, inject_failures: 0 }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct RomRound {
    pub round: usize,
    /// Training parameter values whose snapshots feed this round's basis.
    pub training_mus: Vec<f64>,
    /// Snapshot tasks newly submitted in this round.
    pub new_snapshots: usize,
    /// Rank actually used (bounded by the number of snapshot columns).
    pub rank_used: usize,
    /// Datastore ids of the assembled matrix and its factorization.
    pub matrix_oid: String,
    pub svd_oid: String,
    /// Max relative projection error over the held-out parameters.
    pub error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct RomReport {
    pub rounds: Vec<RomRound>,
    pub held_out_mus: Vec<f64>,
    pub converged: bool,
    pub succeeded: bool,
    pub node_seconds: u64,
}

impl RomReport {
    pub fn text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "ROM pipeline: {} ({})\n",
            if self.succeeded { "SUCCEEDED" } else { "FAILED" },
            if self.converged { "converged" } else { "tolerance not reached" }
        ));
        for r in &self.rounds {
            out.push_str(&format!(
                "  round {}: {} training points (+{} new), rank {}, held-out error {:.3e}\n",
                r.round,
                r.training_mus.len(),
                r.new_snapshots,
                r.rank_used,
                r.error
            ));
        }
        out.push_str(&format!("  node-seconds: {}\n", self.node_seconds));
        out
    }
}

/// Held-out evaluation points: offset from the training grid on purpose.
fn held_out_mus() -> Vec<f64> {
    (0..5).map(|i| 0.65 + 0.175 * i as f64).collect()
}

fn training_grid(n: usize) -> Vec<f64> {
    if n <= 1 {
        return vec![1.0];
    }
    (0..n).map(|i| 0.6 + 0.8 * i as f64 / (n - 1) as f64).collect()
}

/// Midpoints between consecutive training values: the refinement points.
fn refine_mus(mus: &[f64]) -> Vec<f64> {
    mus.windows(2).map(|w| (w[0] + w[1]) / 2.0).collect()
}

/// Max relative projection error of held-out fields onto span(U).
fn projection_error(u: &DMatrix<f64>, dofs: usize, modes: usize, eval_mus: &[f64]) -> f64 {
    let mut worst = 0.0f64;
    for &mu in eval_mus {
        let f = DVector::from_vec(kernel::fom_field(dofs, mu, modes));
        let residual = &f - u * (u.transpose() * &f);
        let denom = f.norm().max(1e-300);
        worst = worst.max(residual.norm() / denom);
    }
    worst
}

/// Runs the ROM pipeline on an existing world: snapshot tasks per training
/// point, matrix assembly through the datastore, a multicore truncated-SVD
/// task, then projection-error evaluation at held-out points; refines the
/// training set and repeats while the error exceeds the tolerance (max 3
/// rounds). The caller keeps the store, so results can be inspected after.
pub fn run_rom_pipeline_in(world: &WorldHandle, params: &RomParams) -> Result<RomReport, ExemplarError> {
    const TAG: &str = "rom";
    let job = world.with(|w| {
        w.cluster.submit_job(
            "hpcA",
            TAG,
            JobResources { nodes: 2, cores_per_node: 8, mem_gb: 8 },
            1_000_000,
            JobPayload::Program { program_ref: "rom-pipeline".into() },
            &auth(),
        )
    })?;
    world.wait_job_started(job)?;
    world.with(|w| {
        w.add_engine(TAG, params.seed);
        let nodes = w.cluster.job(job).expect("job exists").allocated_nodes.clone();
        let e = w.engines.get_mut(TAG).expect("engine just added");
        for n in &nodes {
            e.add_worker(n, "hpcA", SiteKind::Hpc, 8);
        }
        e.job = Some(job);
    });
    let engine = world.engine_handle(TAG);
    let store = world.with(|w| Arc::clone(&w.store));

    let eval_mus = held_out_mus();
    let mut training = training_grid(params.steps.max(1));
    let mut snapshot_tokens = Vec::new();
    let mut pending: Vec<f64> = training.clone();
    let mut rounds = Vec::new();
    let mut converged = false;

    let run = (|| -> Result<(), ExemplarError> {
        for round in 1..=3usize {
            let new_snapshots = pending.len();
            for (i, &mu) in pending.iter().enumerate() {
                let mut spec = TaskSpec::new(
                    &format!("fom-r{round}-{i}"),
                    "fom_snapshot",
                    json!({"dofs": params.dofs, "mu": mu, "modes": params.modes}),
                )
                .param("snapshot", Direction::Out);
                spec.duration_ms = 500;
                if round == 1 && i == 0 && params.inject_failures > 0 {
                    spec.inject_failures = params.inject_failures;
                    spec.failure_policy = FailurePolicy::Retry(2);
                }
                let toks = engine.submit(spec, vec![Arg::Name(format!("snap-r{round}-{i}"))])?;
                snapshot_tokens.push(toks[0]);
            }
            pending.clear();

            let mut args: Vec<Arg> = snapshot_tokens.iter().map(|&t| Arg::Token(t)).collect();
            args.push(Arg::Name(format!("matrix-r{round}")));
            let mut assemble = TaskSpec::new(&format!("assemble-r{round}"), "assemble_matrix", json!({}));
            for i in 0..snapshot_tokens.len() {
                assemble = assemble.param(&format!("col{i}"), Direction::In);
            }
            let assemble = assemble.param("matrix", Direction::Out);
            let m_tok = engine.submit(assemble, args)?[0];

            let cols = snapshot_tokens.len();
            let rank_used = params.rank.min(cols);
            let oversample = 4.min(params.dofs.min(cols) - rank_used);
            let mut svd_spec = TaskSpec::new(
                &format!("rsvd-r{round}"),
                "rsvd",
                json!({"rank": rank_used, "oversample": oversample, "seed": params.seed}),
            )
            .param("matrix", Direction::In)
            .param("factors", Direction::Out);
            svd_spec.kind = TaskKind::Multicore { cores: 4 };
            svd_spec.duration_ms = 2000;
            let s_tok =
                engine.submit(svd_spec, vec![Arg::Token(m_tok), Arg::Name(format!("svd-r{round}"))])?[0];

            let matrix_oid = match engine.wait(m_tok)? {
                crate::value::TokenValue::Object { oid } => oid,
                other => return Err(ExemplarError::Kernel(format!("expected matrix object, got {other:?}"))),
            };
            let svd_oid = match engine.wait(s_tok)? {
                crate::value::TokenValue::Object { oid } => oid,
                other => return Err(ExemplarError::Kernel(format!("expected svd object, got {other:?}"))),
            };
            let ctx = KernelCtx { store: &store, site: "hpcA" };
            let (u, _, _) = kernel::load_svd(&ctx, &svd_oid).map_err(ExemplarError::Kernel)?;
            let error = projection_error(&u, params.dofs, params.modes, &eval_mus);

            rounds.push(RomRound {
                round,
                training_mus: training.clone(),
                new_snapshots,
                rank_used,
                matrix_oid,
                svd_oid,
                error,
            });
            if error <= params.tolerance {
                converged = true;
                break;
            }
            pending = refine_mus(&training);
            training.extend(&pending);
            training.sort_by(|a, b| a.partial_cmp(b).unwrap());
        }
        engine.barrier()?;
        Ok(())
    })();
    let succeeded = run.is_ok();
    world.with(|w| w.cluster.end_job(job, succeeded));
    let node_seconds = world.with(|w| w.cluster.node_seconds_tagged(TAG));
    run?;
    Ok(RomReport { rounds, held_out_mus: eval_mus, converged, succeeded, node_seconds })
}

pub fn run_rom_pipeline(params: &RomParams) -> Result<RomReport, ExemplarError> {
    let store = Arc::new(ObjectStore::in_memory());
    let world =
        WorldHandle::new(World::new(&FederationConfig::default_two_site(), std::env::temp_dir(), store));
    run_rom_pipeline_in(&world, params)
}

// ---------------------------------------------------------------------------
// Ensemble pruning

#[derive(Clone, Debug)]
pub struct EsmParams {
    pub members: usize,
    /// Member indices whose synthetic metric trajectory ramps up (diverges).
    pub divergent: Vec<usize>,
    /// Windowed-mean threshold; `None` disables pruning entirely.
    pub threshold: Option<f64>,
    pub window: usize,
    /// Metric samples each member publishes (one per virtual interval).
    pub steps: usize,
    pub interval_ms: u64,
}

impl Default for EsmParams {
    fn default() -> Self {
        EsmParams {
            members: 8,
            divergent: vec![1, 4, 6],
            threshold: Some(1.0),
            window: 3,
            steps: 20,
            interval_ms: 1000,
        }
    }
}

/// The synthetic per-step divergence metric: bounded oscillation for healthy
/// members, a linear ramp for divergent ones. Shared with offline checks.
pub fn member_metric(divergent: bool, step: usize) -> f64 {
    if divergent {
        0.2 + 0.15 * step as f64
    } else {
        0.2 + 0.05 * (step as f64).sin()
    }
}

pub fn member_trajectory(divergent: bool, steps: usize) -> Vec<f64> {
    (0..steps).map(|t| member_metric(divergent, t)).collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct EsmReport {
    pub members: usize,
    pub threshold: Option<f64>,
    pub window: usize,
    pub survivors: Vec<usize>,
    pub pruned: Vec<usize>,
    pub node_seconds: u64,
    pub baseline_node_seconds: u64,
    pub node_seconds_saved: u64,
}

impl EsmReport {
    pub fn text(&self) -> String {
        format!(
            "Ensemble pruning: {} members, threshold {}, window {}\n  pruned: {:?}\n  survivors: {:?}\n  node-seconds: {} (baseline {}, saved {})\n",
            self.members,
            self.threshold.map(|t| t.to_string()).unwrap_or_else(|| "off".into()),
            self.window,
            self.pruned,
            self.survivors,
            self.node_seconds,
            self.baseline_node_seconds,
            self.node_seconds_saved
        )
    }
}

struct PrunePass {
    survivors: Vec<usize>,
    pruned: Vec<usize>,
    node_seconds: u64,
}

/// One ensemble pass: each member is a task group on its own single-node
/// job, streaming its metric; the controller polls every interval and throws
/// a group exception at any member whose windowed mean exceeds the
/// threshold, releasing that member's nodes immediately.
fn run_prune_pass(params: &EsmParams, threshold: Option<f64>, tag: &str) -> Result<PrunePass, ExemplarError> {
    let config = FederationConfig {
        sites: vec![SiteConfig {
            name: "hpcA".into(),
            kind: SiteKind::Hpc,
            nodes: params.members as u32,
            cores_per_node: 4,
            mem_gb: 16,
        }],
        links: Vec::new(),
        seed: 0,
    };
    let store = Arc::new(ObjectStore::in_memory());
    let world = WorldHandle::new(World::new(&config, std::env::temp_dir(), store));

    struct Member {
        job: JobId,
        engine: String,
        channel: usize,
        done: crate::engine::TokenId,
        history: Vec<f64>,
        resolved: bool,
        pruned: bool,
    }
    let mut members = Vec::new();
    for i in 0..params.members {
        let job = world.with(|w| {
            w.cluster.submit_job(
                "hpcA",
                tag,
                JobResources { nodes: 1, cores_per_node: 1, mem_gb: 1 },
                1_000_000,
                JobPayload::Program { program_ref: format!("esm-member-{i}") },
                &auth(),
            )
        })?;
        world.wait_job_started(job)?;
        let engine = format!("{tag}-m{i}");
        world.with(|w| {
            w.add_engine(&engine, i as u64);
            let nodes = w.cluster.job(job).expect("job exists").allocated_nodes.clone();
            let e = w.engines.get_mut(&engine).expect("engine just added");
            for n in &nodes {
                e.add_worker(n, "hpcA", SiteKind::Hpc, 1);
            }
        });
        let h = world.engine_handle(&engine);
        let channel = h.open_stream("metrics", params.steps + 1);
        h.declare_group("member");
        let divergent = params.divergent.contains(&i);
        let values = member_trajectory(divergent, params.steps).into_iter().map(|v| json!(v)).collect();
        let mut spec = TaskSpec::new("member", "emit", json!({"value": i})).param("done", Direction::Out);
        spec.group = Some("member".into());
        spec.publish =
            Some(PublishSpec { channel: "metrics".into(), values, interval_ms: params.interval_ms });
        let done = h.submit(spec, vec![Arg::Name("done".into())])?[0];
        members.push(Member { job, engine, channel, done, history: Vec::new(), resolved: false, pruned: false });
    }

    // Controller loop: one poll sweep per publication interval.
    let mut sweeps = 0usize;
    while members.iter().any(|m| !m.resolved) {
        world.sleep_ms(params.interval_ms)?;
        sweeps += 1;
        if sweeps > params.steps * 4 + 16 {
            return Err(ExemplarError::Engine(EngineError::Stalled));
        }
        for (i, m) in members.iter_mut().enumerate() {
            if m.resolved {
                continue;
            }
            let h = world.engine_handle(&m.engine);
            for v in h.poll(m.channel, "controller", params.steps)? {
                if let Some(x) = v.as_f64() {
                    m.history.push(x);
                }
            }
            if let Some(th) = threshold {
                let w = params.window.min(m.history.len()).max(1);
                if !m.history.is_empty() {
                    let mean: f64 = m.history[m.history.len() - w..].iter().sum::<f64>() / w as f64;
                    if mean > th {
                        h.throw_group_exception("member")?;
                        world.with(|wld| wld.cluster.cancel_job(m.job));
                        m.resolved = true;
                        m.pruned = true;
                        let _ = i;
                        continue;
                    }
                }
            }
            let done = m.done;
            let terminal = world.with(|wld| {
                wld.with_engine(&m.engine, |e, c| {
                    e.schedule_ready(c);
                    match e.try_wait(done) {
                        Ok(Some(_)) => Some(true),
                        Ok(None) => None,
                        Err(_) => Some(false),
                    }
                })
                .flatten()
            });
            match terminal {
                Some(true) => {
                    world.with(|wld| wld.cluster.end_job(m.job, true));
                    m.resolved = true;
                }
                Some(false) => {
                    world.with(|wld| wld.cluster.cancel_job(m.job));
                    m.resolved = true;
                    m.pruned = true;
                }
                None => {}
            }
        }
    }

    let node_seconds = world.with(|w| w.cluster.node_seconds_tagged(tag));
    let pruned: Vec<usize> =
        members.iter().enumerate().filter(|(_, m)| m.pruned).map(|(i, _)| i).collect();
    let survivors: Vec<usize> =
        members.iter().enumerate().filter(|(_, m)| !m.pruned).map(|(i, _)| i).collect();
    Ok(PrunePass { survivors, pruned, node_seconds })
}

/// Runs the pruning pass and an identical no-pruning baseline in a fresh
/// world, reporting the node-second difference between the two traces.
pub fn run_ensemble_pruning(params: &EsmParams) -> Result<EsmReport, ExemplarError> {
    let pass = run_prune_pass(params, params.threshold, "esm")?;
    let baseline = run_prune_pass(params, None, "esm-base")?;
    Ok(EsmReport {
        members: params.members,
        threshold: params.threshold,
        window: params.window,
        survivors: pass.survivors,
        pruned: pass.pruned,
        node_seconds: pass.node_seconds,
        baseline_node_seconds: baseline.node_seconds,
        node_seconds_saved: baseline.node_seconds.saturating_sub(pass.node_seconds),
    })
}

// ---------------------------------------------------------------------------
// Urgent ensemble under deadline

#[derive(Clone, Debug)]
pub struct UcParams {
    pub members: usize,
    /// Runtime of one member in virtual seconds.
    pub member_s: u64,
    /// Hard deadline in virtual seconds.
    pub deadline_s: u64,
    /// Baseline and burst node counts of the urgent site.
    pub min_nodes: u32,
    pub max_nodes: u32,
    pub seed: u64,
}

impl Default for UcParams {
    fn default() -> Self {
        UcParams { members: 24, member_s: 600, deadline_s: 7200, min_nodes: 2, max_nodes: 4, seed: 0 }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct UcReport {
    pub members: usize,
    pub completed: usize,
    /// Members never submitted: predicted completion past the deadline.
    pub aborted: Vec<usize>,
    pub completed_fraction: f64,
    pub deadline_s: u64,
    /// Virtual time when the ensemble reached its terminal state.
    pub terminal_s: u64,
    pub deadline_infeasible: bool,
    pub predicted_member_s: f64,
    pub node_seconds: u64,
    pub max_nodes: u32,
}

impl UcReport {
    pub fn text(&self) -> String {
        let mut out = format!(
            "Urgent ensemble: {}/{} members completed ({:.0}%), terminal at {} s of {} s deadline\n",
            self.completed,
            self.members,
            self.completed_fraction * 100.0,
            self.terminal_s,
            self.deadline_s
        );
        if self.deadline_infeasible {
            out.push_str("  DEADLINE INFEASIBLE: one member cannot finish before the deadline\n");
        }
        if !self.aborted.is_empty() {
            out.push_str(&format!("  aborted before submission: {:?}\n", self.aborted));
        }
        out.push_str(&format!("  node-seconds: {} (burst capacity {} nodes)\n", self.node_seconds, self.max_nodes));
        out
    }
}

/// Urgent-computing fixture: the site bursts to its maximum node count, the
/// members run FIFO one node each, and any member whose predicted completion
/// (advisor history) would land at or past the deadline is aborted before
/// submission. A deadline shorter than a single member's runtime is reported
/// as infeasible without running anything.
pub fn run_urgent_ensemble(params: &UcParams) -> Result<UcReport, ExemplarError> {
    const TAG: &str = "uc";
    if params.member_s > params.deadline_s {
        return Ok(UcReport {
            members: params.members,
            completed: 0,
            aborted: (0..params.members).collect(),
            completed_fraction: 0.0,
            deadline_s: params.deadline_s,
            terminal_s: 0,
            deadline_infeasible: true,
            predicted_member_s: params.member_s as f64,
            node_seconds: 0,
            max_nodes: params.max_nodes,
        });
    }

    // Seed the advisor with the member profile so predictions are exact.
    let advisor = Advisor::in_memory();
    let config_1node: BTreeMap<String, f64> = [("nodes".to_string(), 1.0)].into();
    advisor.record_profile(ProfileRecord {
        workflow: "uc".into(),
        task: "member".into(),
        config: config_1node.clone(),
        meta: BTreeMap::new(),
        duration_s: params.member_s as f64,
        node_seconds: params.member_s as f64,
    })?;
    let predicted = advisor
        .predict_duration_k("uc", "member", &config_1node, &BTreeMap::new(), 1)
        .unwrap_or(params.member_s as f64);

    let config = FederationConfig {
        sites: vec![SiteConfig {
            name: "hpcA".into(),
            kind: SiteKind::Hpc,
            nodes: params.min_nodes,
            cores_per_node: 8,
            mem_gb: 32,
        }],
        links: Vec::new(),
        seed: params.seed,
    };
    let store = Arc::new(ObjectStore::in_memory());
    let world = WorldHandle::new(World::new(&config, std::env::temp_dir(), store));
    let burst = params.max_nodes.saturating_sub(params.min_nodes);
    if burst > 0 {
        world.with(|w| w.cluster.add_nodes("hpcA", burst))?;
    }

    let mut aborted = Vec::new();
    let mut jobs = Vec::new();
    for i in 0..params.members {
        // FIFO packing of equal-length single-node members: member i starts
        // after floor(i / capacity) whole waves.
        let start_s = (i as u64 / params.max_nodes as u64) * params.member_s;
        if start_s as f64 + predicted >= params.deadline_s as f64 {
            aborted.push(i);
            continue;
        }
        let job = world.with(|w| {
            w.cluster.submit_job(
                "hpcA",
                TAG,
                JobResources { nodes: 1, cores_per_node: 1, mem_gb: 1 },
                params.member_s + 60,
                JobPayload::Synthetic { duration_ms: params.member_s * 1000 },
                &auth(),
            )
        })?;
        jobs.push(job);
    }

    let mut completed = 0usize;
    for job in &jobs {
        if world.wait_job(*job)? == JobState::Completed {
            completed += 1;
        }
    }
    let terminal_s = world.with(|w| w.now()) / 1000;
    let node_seconds = world.with(|w| w.cluster.node_seconds_tagged(TAG));
    if burst > 0 {
        world.with(|w| w.cluster.remove_nodes("hpcA", burst))?;
    }

    Ok(UcReport {
        members: params.members,
        completed,
        aborted,
        completed_fraction: completed as f64 / params.members.max(1) as f64,
        deadline_s: params.deadline_s,
        terminal_s,
        deadline_infeasible: false,
        predicted_member_s: predicted,
        node_seconds,
        max_nodes: params.max_nodes,
    })
}
