//! The server agent: owner of the global model and the round lifecycle.
//!
//! Simulation and deployment drive the same agent; only the clock and the
//! transport around it differ.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde_json::{Map, Value};

use crate::aggregation::{async_apply, fedavg, select_clients_attempt, ClientSpeedStats};
use crate::comm::codec::Message;
use crate::comm::tcp::Reply;
use crate::comm::update_from_message;
use crate::config::{Aggregator, ExperimentConfig};
use crate::error::{Error, Result};
use crate::hooks::{HookEvent, HookRegistry, MetaValue, ServerContext, METRIC_HOOK_ERRORS};
use crate::metrics::{MetricRecord, MetricsSink, Scope, Timestamp};
use crate::orchestrator::cost::SimClock;
use crate::partition::{Dataset, FederatedData};
use crate::privacy::secagg_aggregate;
use crate::seed::{domain, sub_seed};
use crate::trainer::{evaluate, Task};
use crate::types::{LocalUpdate, ParameterVector, Payload};

/// Reserved MODEL metadata keys set by the server.
pub const META_SELECTED: &str = "selected";
pub const META_ROUND_START: &str = "round_start";

pub const METRIC_ACCURACY: &str = "accuracy";
pub const METRIC_LOSS: &str = "loss";
pub const METRIC_ROUND_DURATION: &str = "round_duration";
pub const METRIC_STRAGGLERS: &str = "straggler_dropped";
pub const METRIC_COST: &str = "cost_total";
pub const METRIC_TERMINATED: &str = "terminated";
pub const METRIC_STALENESS: &str = "staleness";

/// Where the agent's notion of "now" comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClockKind {
    Simulated,
    Wall,
}

#[derive(Debug, Clone, PartialEq)]
enum Phase {
    Registering,
    Running,
    Finished,
    Failed { code: u16, message: String },
}

#[derive(Debug, Clone)]
struct OpenRound {
    attempt: u32,
    selected: Vec<u32>,
    start: f64,
    deadline: f64,
    fetched: BTreeSet<u32>,
    received: BTreeMap<u32, LocalUpdate>,
}

pub struct ServerAgent {
    cfg: Arc<ExperimentConfig>,
    task: Task,
    pooled: Dataset,
    hooks: Arc<HookRegistry>,
    ctx: ServerContext,
    phase: Phase,
    open: Option<OpenRound>,
    names: BTreeMap<String, u32>,
    /// Model version each client last received (asynchronous mode).
    dispatched: BTreeMap<u32, u32>,
    done_sent: BTreeSet<u32>,
    history: Vec<ParameterVector>,
    clock: ClockKind,
    sim: SimClock,
    costs: Option<Vec<f64>>,
    records: Vec<MetricRecord>,
    sink: Option<Box<dyn MetricsSink>>,
    error: Option<Error>,
}

impl ServerAgent {
    pub fn new(cfg: ExperimentConfig, hooks: HookRegistry, clock: ClockKind) -> Result<Self> {
        cfg.check()?;
        let task = Task::from_config(&cfg);
        let pooled = FederatedData::from_config(&cfg)?.pooled;
        let global = task.init_params(sub_seed(cfg.seed, domain::INIT));
        let ctx = ServerContext::new(global.clone(), (0..cfg.clients).collect(), ClientSpeedStats::new(cfg.timing.speed_ema_beta));
        let sim = SimClock::new(cfg.clients);
        Ok(Self {
            cfg: Arc::new(cfg),
            task,
            pooled,
            hooks: Arc::new(hooks),
            ctx,
            phase: Phase::Registering,
            open: None,
            names: BTreeMap::new(),
            dispatched: BTreeMap::new(),
            done_sent: BTreeSet::new(),
            history: vec![global],
            clock,
            sim,
            costs: None,
            records: Vec::new(),
            sink: None,
            error: None,
        })
    }

    pub fn set_sink(&mut self, sink: Box<dyn MetricsSink>) {
        self.sink = Some(sink);
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn context(&self) -> &ServerContext {
        &self.ctx
    }

    pub fn global(&self) -> &ParameterVector {
        self.ctx.global()
    }

    /// Global model after every round (or asynchronous application),
    /// starting with the initial model.
    pub fn history(&self) -> &[ParameterVector] {
        &self.history
    }

    /// Every metric record written so far.
    pub fn records(&self) -> &[MetricRecord] {
        &self.records
    }

    pub fn sim_clock(&self) -> &SimClock {
        &self.sim
    }

    /// Per-client cost settled at the end of a simulated run with cost
    /// accounting enabled.
    pub fn costs(&self) -> Option<&[f64]> {
        self.costs.as_deref()
    }

    pub fn round(&self) -> u32 {
        self.ctx.round
    }

    pub fn attempt(&self) -> Option<u32> {
        self.open.as_ref().map(|o| o.attempt)
    }

    /// Participants of the open round.
    pub fn selected(&self) -> &[u32] {
        self.open.as_ref().map(|o| o.selected.as_slice()).unwrap_or(&[])
    }

    pub fn round_deadline(&self) -> Option<f64> {
        self.open.as_ref().map(|o| o.deadline)
    }

    pub fn is_finished(&self) -> bool {
        self.phase == Phase::Finished
    }

    pub fn is_running(&self) -> bool {
        self.phase == Phase::Running
    }

    pub fn failure(&self) -> Option<(u16, &str)> {
        match &self.phase {
            Phase::Failed { code, message } => Some((*code, message)),
            _ => None,
        }
    }

    /// Whether every client has been told the run is over.
    pub fn all_done_delivered(&self) -> bool {
        self.done_sent.len() as u32 >= self.cfg.clients
    }

    pub fn registered(&self) -> usize {
        self.names.len()
    }

    fn is_async(&self) -> bool {
        self.cfg.aggregator == Aggregator::Async
    }

    /// Assigns a client id. A name that is a free id below the client count
    /// gets that id; other names get the lowest free id. Registering a known
    /// name again returns its id.
    pub fn register(&mut self, name: &str) -> Result<u32> {
        if let Some(id) = self.names.get(name) {
            return Ok(*id);
        }
        let taken: BTreeSet<u32> = self.names.values().copied().collect();
        let wanted = name.parse::<u32>().ok().filter(|id| *id < self.cfg.clients && !taken.contains(id));
        let id = wanted
            .or_else(|| (0..self.cfg.clients).find(|id| !taken.contains(id)))
            .ok_or_else(|| Error::Protocol(format!("all {} client slots are taken", self.cfg.clients)))?;
        self.names.insert(name.to_string(), id);
        Ok(id)
    }

    /// Runs `on_server_start` and opens the first round.
    pub fn start(&mut self, now: f64) -> Result<()> {
        if self.phase != Phase::Registering {
            return Err(Error::Internal("server agent already started".into()));
        }
        self.phase = Phase::Running;
        self.set_now(now);
        self.hooks.emit(HookEvent::OnServerStart, &mut self.ctx, None)?;
        let budget = if self.is_async() { self.cfg.async_budget } else { self.cfg.rounds };
        if budget == 0 {
            return self.finish(now);
        }
        if !self.is_async() {
            self.open_round(now, 0)?;
        }
        self.flush(now)
    }

    fn set_now(&mut self, now: f64) {
        self.sim.advance_to(now);
        self.ctx.set_now(now);
    }

    fn open_round(&mut self, now: f64, attempt: u32) -> Result<()> {
        self.set_now(now);
        let t = self.ctx.round;
        let selected = select_clients_attempt(self.cfg.clients, self.cfg.client_fraction, t, self.cfg.seed, attempt);
        self.ctx.selected = selected.clone();
        self.hooks.emit(HookEvent::BeforeClientSelection, &mut self.ctx, None)?;
        if self.clock == ClockKind::Simulated {
            for id in &selected {
                self.sim.participate(*id, now);
            }
        }
        log::info!("round {t} attempt {attempt}: selected {selected:?}");
        self.open = Some(OpenRound {
            attempt,
            selected,
            start: now,
            deadline: now + self.cfg.timing.round_timeout_sec,
            fetched: BTreeSet::new(),
            received: BTreeMap::new(),
        });
        Ok(())
    }

    fn metadata_json(&self) -> Map<String, Value> {
        let mut map = Map::new();
        for (k, v) in self.ctx.metadata() {
            let value = match v {
                MetaValue::Number(x) => serde_json::Number::from_f64(*x).map(Value::Number),
                MetaValue::Text(s) => Some(Value::String(s.clone())),
            };
            if let Some(value) = value {
                map.insert(k.clone(), value);
            }
        }
        map
    }

    fn model_message(&self) -> Message {
        let mut metadata = self.metadata_json();
        if let Some(open) = &self.open {
            metadata.insert(META_SELECTED.into(), Value::from(open.selected.clone()));
        }
        let start = self.open.as_ref().map_or(self.ctx.now(), |o| o.start);
        if let Some(start) = serde_json::Number::from_f64(start) {
            metadata.insert(META_ROUND_START.into(), Value::Number(start));
        }
        Message::Model { round: self.ctx.round, params: self.ctx.global().as_slice().to_vec(), metadata }
    }

    fn done_message(&mut self, client_id: u32) -> Reply {
        self.done_sent.insert(client_id);
        Reply::Send(Message::Done { final_round: self.ctx.round })
    }

    /// What a client asking for work gets now: the open round's model, DONE
    /// or nothing yet.
    pub fn model_for(&mut self, client_id: u32) -> Reply {
        match self.phase {
            Phase::Registering => return Reply::Wait,
            Phase::Finished => return self.done_message(client_id),
            Phase::Failed { code, ref message } => return Reply::Close(Message::Error { code, text: message.clone() }),
            Phase::Running => {}
        }
        if self.is_async() {
            self.dispatched.insert(client_id, self.ctx.round);
            return Reply::Send(self.model_message());
        }
        let Some(open) = self.open.as_mut() else { return Reply::Wait };
        if !open.selected.contains(&client_id) || open.received.contains_key(&client_id) {
            return Reply::Wait;
        }
        open.fetched.insert(client_id);
        Reply::Send(self.model_message())
    }

    /// Accepts an update that arrived at `arrival`. Late or duplicate
    /// updates are dropped; the round closes once the quorum is in.
    pub fn receive_update(&mut self, update: LocalUpdate, arrival: f64) -> Result<()> {
        if update.client_id >= self.cfg.clients {
            return Err(Error::Protocol(format!("unknown client id {}", update.client_id)));
        }
        if update.model_dim() != self.task.param_dim() {
            return Err(Error::DimensionMismatch { expected: self.task.param_dim(), actual: update.model_dim() });
        }
        if update.payload.is_masked() != self.cfg.secagg.enabled {
            return Err(Error::Protocol(format!(
                "client {} sent a {} payload",
                update.client_id,
                if update.payload.is_masked() { "masked" } else { "plain" }
            )));
        }
        if update.metrics.get(METRIC_TERMINATED).is_some_and(|v| *v != 0.0) && self.clock == ClockKind::Simulated {
            self.sim.terminate(update.round, update.client_id, arrival);
        }
        if self.phase != Phase::Running {
            log::debug!("dropping update from client {} after the run ended", update.client_id);
            return Ok(());
        }
        if self.is_async() {
            return self.receive_async(update, arrival);
        }
        if update.round > self.ctx.round {
            return Err(Error::Protocol(format!(
                "client {} sent an update for round {} during round {}",
                update.client_id, update.round, self.ctx.round
            )));
        }
        let Some(open) = self.open.as_mut() else { return Ok(()) };
        let id = update.client_id;
        if update.round < self.ctx.round || !open.fetched.contains(&id) {
            log::info!("dropping late update from client {id} for round {}", update.round);
            return Ok(());
        }
        if open.received.contains_key(&id) {
            return Ok(());
        }
        open.received.insert(id, update);
        let quorum = self.cfg.quorum_count(open.selected.len());
        if open.received.len() >= quorum {
            self.close_round(arrival)?;
        }
        Ok(())
    }

    /// Aborts an open round whose deadline has passed: one retry with a
    /// fresh selection, then the run fails.
    pub fn poll_timeout(&mut self, now: f64) -> Result<()> {
        if self.phase != Phase::Running || self.is_async() {
            return Ok(());
        }
        let Some(open) = self.open.as_ref() else { return Ok(()) };
        if now < open.deadline {
            return Ok(());
        }
        let received = open.received.len();
        let required = self.cfg.quorum_count(open.selected.len());
        if open.attempt >= 1 {
            return Err(Error::QuorumNotMet { round: self.ctx.round as u64, received, required });
        }
        log::warn!("round {} timed out with {received} of {required} updates; retrying", self.ctx.round);
        self.open_round(open.deadline, 1)
    }

    fn close_round(&mut self, now: f64) -> Result<()> {
        let open = self.open.take().expect("an open round");
        self.set_now(now);
        let t = self.ctx.round;
        let updates: Vec<LocalUpdate> = open.received.into_values().collect();
        self.hooks.emit(HookEvent::BeforeAggregation, &mut self.ctx, None)?;
        let global = if self.cfg.secagg.enabled {
            secagg_aggregate(&updates, &open.selected, self.cfg.secagg.fixed_point_scale)?
        } else {
            fedavg(&updates)?
        };
        self.ctx.set_global(global.clone());
        self.history.push(global);
        self.hooks.emit(HookEvent::AfterAggregation, &mut self.ctx, None)?;
        for u in &updates {
            self.absorb_update_metrics(u, t);
        }
        self.record_global_metrics(t)?;
        self.ctx.metrics.set(Scope::Server, t, METRIC_ROUND_DURATION, now - open.start);
        self.ctx.metrics.set(Scope::Server, t, METRIC_STRAGGLERS, (open.selected.len() - updates.len()) as f64);
        self.ctx.round = t + 1;
        self.flush(now)?;
        if self.ctx.round >= self.cfg.rounds {
            self.finish(now)
        } else {
            self.open_round(now, 0)?;
            self.flush(now)
        }
    }

    fn receive_async(&mut self, update: LocalUpdate, arrival: f64) -> Result<()> {
        let id = update.client_id;
        if self.dispatched.get(&id) != Some(&update.round) {
            log::info!("dropping unexpected update from client {id} for version {}", update.round);
            return Ok(());
        }
        self.dispatched.remove(&id);
        self.set_now(arrival);
        let t = self.ctx.round;
        let Payload::Plain(local) = &update.payload else {
            return Err(Error::Protocol("asynchronous updates must be plain".into()));
        };
        self.hooks.emit(HookEvent::BeforeAggregation, &mut self.ctx, None)?;
        let global = async_apply(self.ctx.global(), local, t, update.round, self.cfg.async_alpha, self.cfg.staleness_exponent)?;
        self.ctx.set_global(global.clone());
        self.history.push(global);
        self.hooks.emit(HookEvent::AfterAggregation, &mut self.ctx, None)?;
        self.absorb_update_metrics(&update, t);
        self.record_global_metrics(t)?;
        self.ctx.metrics.set(Scope::Server, t, METRIC_STALENESS, (t - update.round) as f64);
        self.ctx.round = t + 1;
        self.flush(arrival)?;
        if self.ctx.round >= self.cfg.async_budget {
            self.finish(arrival)?;
        }
        Ok(())
    }

    fn absorb_update_metrics(&mut self, u: &LocalUpdate, round: u32) {
        if u.wall_time_sec > 0.0 {
            // Positive by the check above, so the observation cannot fail.
            let _ = self.ctx.speeds.observe_duration(u.client_id, u.wall_time_sec);
        }
        let scope = Scope::Client(u.client_id);
        if u.train_loss.is_finite() {
            self.ctx.metrics.set(scope, u.round, "train_loss", u.train_loss);
        }
        for (name, v) in &u.metrics {
            if name == METRIC_HOOK_ERRORS {
                self.ctx.metrics.increment(Scope::Server, round, METRIC_HOOK_ERRORS, *v);
            } else {
                self.ctx.metrics.set(scope, u.round, name, *v);
            }
        }
    }

    fn record_global_metrics(&mut self, round: u32) -> Result<()> {
        let eval = evaluate(&self.task, self.ctx.global(), &self.pooled)?;
        self.ctx.metrics.set(Scope::Server, round, METRIC_ACCURACY, eval.accuracy);
        self.ctx.metrics.set(Scope::Server, round, METRIC_LOSS, eval.loss);
        Ok(())
    }

    fn finish(&mut self, now: f64) -> Result<()> {
        self.set_now(now);
        self.open = None;
        self.hooks.emit(HookEvent::OnExperimentEnd, &mut self.ctx, None)?;
        if self.clock == ClockKind::Simulated && self.cfg.cost.enabled {
            let costs = self.sim.settle(now, &self.cfg.cost);
            let t = self.ctx.round;
            for (id, c) in costs.iter().enumerate() {
                self.ctx.metrics.set(Scope::Client(id as u32), t, METRIC_COST, *c);
            }
            self.ctx.metrics.set(Scope::Server, t, METRIC_COST, costs.iter().sum());
            self.costs = Some(costs);
        }
        self.phase = Phase::Finished;
        log::info!("experiment finished after {} rounds", self.ctx.round);
        self.flush(now)
    }

    /// Marks the run as failed; later requests are answered with `err`.
    pub fn fail(&mut self, err: Error) {
        self.open = None;
        self.phase = Phase::Failed { code: err.wire_code(), message: err.to_string() };
        self.error = Some(err);
    }

    /// The error that failed the run, once.
    pub fn take_error(&mut self) -> Option<Error> {
        self.error.take()
    }

    /// The agent's current time.
    pub fn now(&self) -> f64 {
        self.ctx.now()
    }

    fn timestamp(&self, now: f64) -> Timestamp {
        match self.clock {
            ClockKind::Simulated => Timestamp::Sim(now),
            ClockKind::Wall => Timestamp::wall_now(),
        }
    }

    fn flush(&mut self, now: f64) -> Result<()> {
        let pending = self.ctx.metrics.take_pending();
        if pending.is_empty() {
            return Ok(());
        }
        let ts = self.timestamp(now);
        let batch: Vec<MetricRecord> = pending.iter().map(|e| MetricRecord::from_entry(e, ts.clone())).collect();
        if let Some(sink) = self.sink.as_mut() {
            sink.write(&batch)?;
        }
        self.records.extend(batch);
        Ok(())
    }

    /// Serves one request arriving over the network at wall time `now`.
    pub fn handle_request(&mut self, msg: Message, now: f64) -> Reply {
        let result = match msg {
            Message::Register { client_name, .. } => self.handle_register(&client_name, now),
            Message::GetModel { client_id } => Ok(self.model_for(client_id)),
            msg @ Message::Update { .. } => self.handle_update(msg, now),
            other => Err(Error::Protocol(format!("unexpected {}", other.name()))),
        };
        result.unwrap_or_else(|e| {
            let reply = Reply::Close(Message::Error { code: e.wire_code(), text: e.to_string() });
            if !matches!(e, Error::Protocol(_) | Error::Decode(_) | Error::DimensionMismatch { .. }) {
                log::error!("run failed: {e}");
                self.fail(e);
            } else {
                log::warn!("rejecting request: {e}");
            }
            reply
        })
    }

    fn handle_register(&mut self, name: &str, now: f64) -> Result<Reply> {
        let id = self.register(name)?;
        log::info!("client `{name}` registered as {id}");
        if self.phase == Phase::Registering && self.names.len() as u32 == self.cfg.clients {
            self.start(now)?;
        }
        Ok(Reply::Send(Message::RegisterAck { client_id: id, digest: self.cfg.digest().0 }))
    }

    fn handle_update(&mut self, msg: Message, now: f64) -> Result<Reply> {
        if let Phase::Failed { code, message } = &self.phase {
            return Ok(Reply::Close(Message::Error { code: *code, text: message.clone() }));
        }
        let update = update_from_message(msg)?;
        self.receive_update(update, now)?;
        Ok(Reply::Send(Message::Ack))
    }
}
