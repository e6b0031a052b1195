//! The shared synchronous core: one `World` owns the cluster simulator,
//! the data-logistics service, and every live task engine. Any thread may
//! pump events while holding the lock; blocking operations (token waits,
//! barriers, sleeps) are loops that pump until their condition resolves,
//! so virtual time advances no matter which thread gets there first.

use std::collections::{BTreeSet, HashMap};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use crate::datastore::ObjectStore;
use crate::engine::{Arg, EngineCore, EngineError, TaskSpec, TokenId};
use crate::logistics::Logistics;
use crate::sim::{Cluster, FederationConfig, Fired, JobId, JobState, VTime};
use crate::value::TokenValue;

pub struct World {
    pub cluster: Cluster,
    pub store: Arc<ObjectStore>,
    pub logistics: Logistics,
    pub engines: HashMap<String, EngineCore>,
    /// Wakeup timer tags registered by sleeping threads.
    wake_tags: BTreeSet<u64>,
    fired_wakeups: BTreeSet<u64>,
}

impl World {
    pub fn new(config: &FederationConfig, root: impl Into<std::path::PathBuf>, store: Arc<ObjectStore>) -> Self {
        World {
            cluster: Cluster::new(config, root),
            store,
            logistics: Logistics::new(),
            engines: HashMap::new(),
            wake_tags: BTreeSet::new(),
            fired_wakeups: BTreeSet::new(),
        }
    }

    pub fn now(&self) -> VTime {
        self.cluster.now
    }

    pub fn add_engine(&mut self, invocation: &str, seed: u64) {
        let e = EngineCore::new(invocation, seed, Arc::clone(&self.store));
        self.engines.insert(invocation.to_string(), e);
    }

    pub fn engine(&self, invocation: &str) -> Option<&EngineCore> {
        self.engines.get(invocation)
    }

    /// Split-borrow access to one engine together with the cluster.
    pub fn with_engine<R>(
        &mut self,
        invocation: &str,
        f: impl FnOnce(&mut EngineCore, &mut Cluster) -> R,
    ) -> Option<R> {
        let World { cluster, engines, .. } = self;
        engines.get_mut(invocation).map(|e| f(e, cluster))
    }

    /// Processes one event batch; false when the heap is empty.
    pub fn pump_one(&mut self) -> bool {
        let Some((_, fired)) = self.cluster.step() else { return false };
        for f in fired {
            self.route(f);
        }
        true
    }

    /// Advances virtual time by `dt_ms`, routing everything that fires.
    pub fn advance(&mut self, dt_ms: u64) {
        let fired = self.cluster.advance(dt_ms);
        for f in fired {
            self.route(f);
        }
    }

    fn route(&mut self, f: Fired) {
        if let Fired::Timer(tag) = f {
            if self.wake_tags.remove(&tag) {
                self.fired_wakeups.insert(tag);
                return;
            }
        }
        {
            let World { cluster, logistics, .. } = self;
            if logistics.handle_fired(&f, cluster) {
                return;
            }
        }
        if let Fired::Timer(tag) = f {
            let World { cluster, engines, .. } = self;
            for e in engines.values_mut() {
                if e.handle_timer(tag, cluster) {
                    return;
                }
            }
        }
        // Job lifecycle notifications: drivers poll job state directly.
    }

    pub fn schedule_wakeup(&mut self, delay_ms: u64) -> u64 {
        let tag = self.cluster.next_timer_tag();
        self.wake_tags.insert(tag);
        self.cluster.schedule_timer(delay_ms, tag);
        tag
    }

    pub fn take_wakeup(&mut self, tag: u64) -> bool {
        self.fired_wakeups.remove(&tag)
    }
}

/// Cloneable, thread-safe handle to the world.
#[derive(Clone)]
pub struct WorldHandle(Arc<Mutex<World>>);

impl WorldHandle {
    pub fn new(world: World) -> Self {
        WorldHandle(Arc::new(Mutex::new(world)))
    }

    pub fn with<R>(&self, f: impl FnOnce(&mut World) -> R) -> R {
        f(&mut self.0.lock().unwrap())
    }

    /// Pumps events until `cond` yields. When the heap is empty the lock is
    /// released briefly so other program threads can schedule more work; a
    /// long quiet period with an unresolved condition is a stall.
    pub fn pump_until<R>(&self, mut cond: impl FnMut(&mut World) -> Option<R>) -> Result<R, EngineError> {
        let mut idle = 0u32;
        loop {
            {
                let mut w = self.0.lock().unwrap();
                if let Some(r) = cond(&mut w) {
                    return Ok(r);
                }
                if w.pump_one() {
                    idle = 0;
                    continue;
                }
            }
            idle += 1;
            if idle > 5000 {
                return Err(EngineError::Stalled);
            }
            std::thread::sleep(Duration::from_millis(1));
        }
    }

    /// Blocks until the given virtual delay has elapsed.
    pub fn sleep_ms(&self, delay_ms: u64) -> Result<(), EngineError> {
        let tag = self.with(|w| w.schedule_wakeup(delay_ms));
        self.pump_until(|w| if w.take_wakeup(tag) { Some(()) } else { None })
    }

    /// Blocks until the job is terminal; returns its final state.
    pub fn wait_job(&self, job: JobId) -> Result<JobState, EngineError> {
        self.pump_until(|w| match w.cluster.job(job) {
            Ok(j) if j.state.is_terminal() => Some(j.state),
            _ => None,
        })
    }

    /// Blocks until the job leaves the queue.
    pub fn wait_job_started(&self, job: JobId) -> Result<JobState, EngineError> {
        self.pump_until(|w| match w.cluster.job(job) {
            Ok(j) if j.state != JobState::Queued => Some(j.state),
            _ => None,
        })
    }

    pub fn engine_handle(&self, invocation: &str) -> EngineHandle {
        EngineHandle { world: self.clone(), invocation: invocation.to_string() }
    }
}

/// Programming-model surface for one invocation's task program.
#[derive(Clone)]
pub struct EngineHandle {
    world: WorldHandle,
    invocation: String,
}

impl EngineHandle {
    pub fn invocation(&self) -> &str {
        &self.invocation
    }

    pub fn world(&self) -> &WorldHandle {
        &self.world
    }

    fn with_core<R>(&self, f: impl FnOnce(&mut EngineCore, &mut Cluster) -> R) -> R {
        self.world
            .with(|w| w.with_engine(&self.invocation, f))
            .expect("engine exists for invocation")
    }

    pub fn bind_input(&self, name: &str, value: TokenValue) -> TokenId {
        self.with_core(|e, _| e.bind_input(name, value))
    }

    /// Asynchronous task submission; returns the out/inout tokens.
    pub fn submit(&self, spec: TaskSpec, args: Vec<Arg>) -> Result<Vec<TokenId>, EngineError> {
        self.with_core(|e, c| {
            let toks = e.submit(spec, args)?;
            e.schedule_ready(c);
            Ok(toks)
        })
    }

    /// Blocks until the token resolves; READY yields its value.
    pub fn wait(&self, token: TokenId) -> Result<TokenValue, EngineError> {
        let inv = self.invocation.clone();
        self.world.pump_until(move |w| {
            w.with_engine(&inv, |e, c| {
                e.schedule_ready(c);
                match e.try_wait(token) {
                    Ok(Some(v)) => Some(Ok(v)),
                    Ok(None) => None,
                    Err(e) => Some(Err(e)),
                }
            })
            .unwrap_or(Some(Err(EngineError::UnknownToken(token))))
        })?
    }

    /// Blocks until every submitted task is terminal.
    pub fn barrier(&self) -> Result<(), EngineError> {
        let inv = self.invocation.clone();
        self.world.pump_until(move |w| {
            w.with_engine(&inv, |e, c| {
                e.schedule_ready(c);
                if e.all_terminal() {
                    Some(())
                } else {
                    None
                }
            })
            .flatten()
        })
    }

    pub fn open_stream(&self, name: &str, capacity: usize) -> usize {
        self.with_core(|e, _| e.open_stream(name, capacity))
    }

    /// Latest-version token id for a logical name, if any version exists.
    pub fn current_token_id(&self, name: &str) -> Option<TokenId> {
        self.with_core(|e, _| e.current_token(name).map(|t| t.id))
    }

    /// Publishes with backpressure: pumps events while the channel is full.
    pub fn publish(&self, ch: usize, elem: serde_json::Value) -> Result<(), EngineError> {
        let inv = self.invocation.clone();
        self.world.pump_until(move |w| {
            w.with_engine(&inv, |e, _| match e.try_publish(ch, elem.clone()) {
                Ok(true) => Some(Ok(())),
                Ok(false) => None,
                Err(err) => Some(Err(err)),
            })
            .flatten()
        })?
    }

    pub fn poll(&self, ch: usize, consumer: &str, max: usize) -> Result<Vec<serde_json::Value>, EngineError> {
        self.with_core(|e, c| e.poll(ch, consumer, max, c))
    }

    pub fn close_stream(&self, ch: usize) -> Result<(), EngineError> {
        self.with_core(|e, _| e.close_stream(ch))
    }

    pub fn throw_group_exception(&self, group: &str) -> Result<(), EngineError> {
        self.with_core(|e, _| e.throw_group_exception(group))
    }

    pub fn declare_group(&self, group: &str) {
        self.with_core(|e, _| e.declare_group(group))
    }

    pub fn cancel_all(&self) {
        self.with_core(|e, _| e.cancel_all())
    }
}
