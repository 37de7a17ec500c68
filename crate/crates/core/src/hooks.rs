//! Lifecycle hooks.
//!
//! Nine named events fire at fixed points of the federation loop, five on
//! the server and four on each client. Callbacks registered against an event
//! run in ascending priority (ties in registration order) and receive the
//! mutable context objects of that point in the loop.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use crate::aggregation::ClientSpeedStats;
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::metrics::{MetricsStore, Scope};
use crate::partition::ClientData;
use crate::trainer::{evaluate, Task};
use crate::types::ParameterVector;

pub const METRIC_TEST_LOSS: &str = "test_loss";
pub const METRIC_TEST_ACC: &str = "test_acc";
pub const METRIC_HOOK_ERRORS: &str = "hook_error_count";
pub const META_ROUND_ETA: &str = "round_eta";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum HookEvent {
    OnServerStart,
    BeforeClientSelection,
    BeforeAggregation,
    AfterAggregation,
    OnExperimentEnd,
    OnClientStart,
    BeforeLocalTrain,
    AfterLocalTrain,
    BeforeModelUpload,
}

impl HookEvent {
    pub const ALL: [HookEvent; 9] = [
        HookEvent::OnServerStart,
        HookEvent::BeforeClientSelection,
        HookEvent::BeforeAggregation,
        HookEvent::AfterAggregation,
        HookEvent::OnExperimentEnd,
        HookEvent::OnClientStart,
        HookEvent::BeforeLocalTrain,
        HookEvent::AfterLocalTrain,
        HookEvent::BeforeModelUpload,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            HookEvent::OnServerStart => "on_server_start",
            HookEvent::BeforeClientSelection => "before_client_selection",
            HookEvent::BeforeAggregation => "before_aggregation",
            HookEvent::AfterAggregation => "after_aggregation",
            HookEvent::OnExperimentEnd => "on_experiment_end",
            HookEvent::OnClientStart => "on_client_start",
            HookEvent::BeforeLocalTrain => "before_local_train",
            HookEvent::AfterLocalTrain => "after_local_train",
            HookEvent::BeforeModelUpload => "before_model_upload",
        }
    }

    pub fn is_client_side(self) -> bool {
        matches!(
            self,
            HookEvent::OnClientStart | HookEvent::BeforeLocalTrain | HookEvent::AfterLocalTrain | HookEvent::BeforeModelUpload
        )
    }
}

impl fmt::Display for HookEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for HookEvent {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        HookEvent::ALL
            .into_iter()
            .find(|e| e.as_str() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown hook event `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum MetaValue {
    Number(f64),
    Text(String),
}

impl MetaValue {
    pub fn as_number(&self) -> Option<f64> {
        match self {
            MetaValue::Number(v) => Some(*v),
            MetaValue::Text(_) => None,
        }
    }
}

/// Server state visible to callbacks.
///
/// Client-side callbacks receive a view built from the last model
/// broadcast: round, global model and metadata. Metrics they write for
/// their own client are shipped back with the update.
#[derive(Debug, Clone)]
pub struct ServerContext {
    pub round: u32,
    global: ParameterVector,
    pub metrics: MetricsStore,
    metadata: BTreeMap<String, MetaValue>,
    /// Every client id of the federation.
    pub clients: Vec<u32>,
    pub speeds: ClientSpeedStats,
    /// Participants of the round being prepared or run.
    pub selected: Vec<u32>,
    now: f64,
}

impl ServerContext {
    pub fn new(global: ParameterVector, clients: Vec<u32>, speeds: ClientSpeedStats) -> Self {
        Self {
            round: 0,
            global,
            metrics: MetricsStore::new(),
            metadata: BTreeMap::new(),
            clients,
            speeds,
            selected: Vec::new(),
            now: 0.0,
        }
    }

    pub fn global(&self) -> &ParameterVector {
        &self.global
    }

    pub(crate) fn set_global(&mut self, global: ParameterVector) {
        self.global = global;
    }

    /// Seconds on the run's clock (simulated, or Unix time in deployment).
    pub fn now(&self) -> f64 {
        self.now
    }

    pub(crate) fn set_now(&mut self, now: f64) {
        self.now = now;
    }

    pub fn get_metadata(&self, key: &str) -> Option<&MetaValue> {
        self.metadata.get(key)
    }

    pub fn set_metadata(&mut self, key: &str, value: MetaValue) {
        self.metadata.insert(key.to_string(), value);
    }

    pub fn remove_metadata(&mut self, key: &str) -> Option<MetaValue> {
        self.metadata.remove(key)
    }

    pub fn metadata(&self) -> &BTreeMap<String, MetaValue> {
        &self.metadata
    }

    pub(crate) fn replace_metadata(&mut self, metadata: BTreeMap<String, MetaValue>) {
        self.metadata = metadata;
    }
}

/// Client state visible to callbacks.
#[derive(Debug, Clone)]
pub struct ClientContext {
    pub id: u32,
    /// Current local model.
    pub model: ParameterVector,
    pub data: Arc<ClientData>,
    pub task: Task,
    pub spin_up_time: f64,
    pub shutdown_threshold: f64,
    terminated: bool,
    now: f64,
}

impl ClientContext {
    pub fn new(id: u32, model: ParameterVector, data: Arc<ClientData>, task: Task, spin_up_time: f64, shutdown_threshold: f64) -> Self {
        Self { id, model, data, task, spin_up_time, shutdown_threshold, terminated: false, now: 0.0 }
    }

    /// Asks for this client's instance to shut down once its update is in.
    pub fn terminate_self(&mut self) {
        self.terminated = true;
    }

    pub fn is_terminated(&self) -> bool {
        self.terminated
    }

    /// Called when the instance is brought back for a new participation.
    pub(crate) fn respawn(&mut self) {
        self.terminated = false;
    }

    pub fn now(&self) -> f64 {
        self.now
    }

    pub(crate) fn set_now(&mut self, now: f64) {
        self.now = now;
    }
}

pub type HookResult = std::result::Result<(), Box<dyn std::error::Error + Send + Sync>>;

/// A callback. Server-side events pass `None` for the client context.
pub type HookFn = Arc<dyn Fn(&mut ServerContext, Option<&mut ClientContext>) -> HookResult + Send + Sync>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RegistrationHandle {
    pub event: HookEvent,
    pub seq: u64,
}

#[derive(Clone)]
struct Registration {
    priority: i32,
    seq: u64,
    name: String,
    callback: HookFn,
}

#[derive(Clone, Default)]
pub struct HookRegistry {
    by_event: BTreeMap<HookEvent, Vec<Registration>>,
    next_seq: u64,
    strict: bool,
}

impl fmt::Debug for HookRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut m = f.debug_map();
        for (event, regs) in &self.by_event {
            m.entry(&event.as_str(), &regs.iter().map(|r| (r.priority, r.name.as_str())).collect::<Vec<_>>());
        }
        m.finish()
    }
}

impl HookRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// A registry holding the built-ins enabled by `cfg.hooks`.
    pub fn from_config(cfg: &ExperimentConfig) -> Self {
        let mut reg = Self::new();
        reg.set_strict(cfg.hooks.strict);
        if cfg.hooks.eval_local {
            reg.register(HookEvent::AfterLocalTrain, "eval_local", 0, Arc::new(builtin_eval_local));
        }
        if cfg.hooks.cost_shutdown {
            reg.register(HookEvent::BeforeClientSelection, "set_round_eta", 0, Arc::new(|s, _| builtin_set_round_eta(s)));
            reg.register(HookEvent::AfterLocalTrain, "check_idletime_and_shutdown", 0, Arc::new(builtin_check_idle_and_shutdown));
        }
        reg
    }

    pub fn set_strict(&mut self, strict: bool) {
        self.strict = strict;
    }

    pub fn register(&mut self, event: HookEvent, name: &str, priority: i32, callback: HookFn) -> RegistrationHandle {
        let seq = self.next_seq;
        self.next_seq += 1;
        let list = self.by_event.entry(event).or_default();
        let at = list.partition_point(|r| (r.priority, r.seq) < (priority, seq));
        list.insert(at, Registration { priority, seq, name: name.to_string(), callback });
        RegistrationHandle { event, seq }
    }

    /// Registration by event name; unknown names are rejected.
    pub fn register_named(&mut self, event: &str, name: &str, priority: i32, callback: HookFn) -> Result<RegistrationHandle> {
        Ok(self.register(event.parse()?, name, priority, callback))
    }

    /// Callback names for `event` in execution order.
    pub fn callbacks(&self, event: HookEvent) -> Vec<&str> {
        self.by_event.get(&event).map(|l| l.iter().map(|r| r.name.as_str()).collect()).unwrap_or_default()
    }

    /// Runs every callback of `event`; returns how many failed.
    ///
    /// A failure is logged and counted under the server-scope
    /// `hook_error_count` metric of the current round, and the remaining
    /// callbacks still run. In strict mode the first failure is returned.
    pub fn emit(&self, event: HookEvent, server: &mut ServerContext, mut client: Option<&mut ClientContext>) -> Result<usize> {
        if event.is_client_side() && client.is_none() {
            return Err(Error::InvalidInput(format!("`{event}` needs a client context")));
        }
        let Some(list) = self.by_event.get(&event) else { return Ok(0) };
        let mut failures = 0;
        for reg in list {
            if let Err(e) = (reg.callback)(server, client.as_deref_mut()) {
                if self.strict {
                    return Err(Error::Hook { event: format!("{event}/{}", reg.name), message: e.to_string() });
                }
                log::warn!("hook {}/{} failed: {e}", event, reg.name);
                server.metrics.increment(Scope::Server, server.round, METRIC_HOOK_ERRORS, 1.0);
                failures += 1;
            }
        }
        Ok(failures)
    }
}

/// Evaluates the local model on the client's test split and records
/// `test_loss` / `test_acc` under the client and round.
pub fn builtin_eval_local(server: &mut ServerContext, client: Option<&mut ClientContext>) -> HookResult {
    let client = client.ok_or("eval_local runs on the client side")?;
    if client.data.test.is_empty() {
        return Ok(());
    }
    let eval = evaluate(&client.task, &client.model, &client.data.test)?;
    let scope = Scope::Client(client.id);
    server.metrics.set(scope, server.round, METRIC_TEST_LOSS, eval.loss);
    server.metrics.set(scope, server.round, METRIC_TEST_ACC, eval.accuracy);
    Ok(())
}

/// Shares when the slowest selected client is expected to finish.
pub fn builtin_set_round_eta(server: &mut ServerContext) -> HookResult {
    match server.speeds.estimate_round_eta(&server.selected, server.now()) {
        Some(eta) => server.set_metadata(META_ROUND_ETA, MetaValue::Number(eta)),
        None => {
            server.remove_metadata(META_ROUND_ETA);
        }
    }
    Ok(())
}

/// Idle time until the round ends, net of the time to spin back up.
pub fn idle_time(eta: f64, now: f64, spin_up_time: f64) -> f64 {
    (eta - now - spin_up_time).max(0.0)
}

/// Shuts the client down when it would idle longer than its threshold.
pub fn builtin_check_idle_and_shutdown(server: &mut ServerContext, client: Option<&mut ClientContext>) -> HookResult {
    let client = client.ok_or("shutdown check runs on the client side")?;
    let Some(eta) = server.get_metadata(META_ROUND_ETA).and_then(MetaValue::as_number) else {
        return Ok(());
    };
    if idle_time(eta, client.now(), client.spin_up_time) > client.shutdown_threshold {
        client.terminate_self();
    }
    Ok(())
}
