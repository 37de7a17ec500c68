//! Serial and parallel simulation over in-process channels.

use std::collections::BTreeMap;
use std::sync::Arc;

use rayon::prelude::*;

use crate::comm::tcp::Reply;
use crate::comm::{inproc_channel_pair, update_from_message, InprocEndpoint, Message};
use crate::config::{Aggregator, ConfigDigest, ExperimentConfig, Mode};
use crate::error::{Error, Result};
use crate::hooks::HookRegistry;
use crate::metrics::{MetricRecord, MetricsSink, MetricsStore};
use crate::orchestrator::client::ClientAgent;
use crate::orchestrator::cost::Termination;
use crate::orchestrator::server::{ClockKind, ServerAgent};
use crate::partition::FederatedData;
use crate::types::{LocalUpdate, ParameterVector};

/// How a simulation executes client work.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SimOptions {
    /// Worker threads for client training; `None` runs serially unless the
    /// config asks for parallel simulation, which then uses every core.
    pub threads: Option<usize>,
}

/// A locally trained model as it left `local_train`.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalModelRecord {
    pub round: u32,
    pub client_id: u32,
    pub params: ParameterVector,
}

#[derive(Debug, Clone)]
pub struct SimulationOutcome {
    pub final_model: ParameterVector,
    /// Initial model followed by the global model after each round.
    pub history: Vec<ParameterVector>,
    pub records: Vec<MetricRecord>,
    pub metrics: MetricsStore,
    pub local_models: Vec<LocalModelRecord>,
    pub terminations: Vec<Termination>,
    pub costs: Option<Vec<f64>>,
    pub end_time: f64,
    pub digest: ConfigDigest,
}

struct Slot {
    agent: ClientAgent,
    link: InprocEndpoint,
}

impl Slot {
    fn step(&mut self) -> Result<()> {
        let msg = self.link.recv()?;
        if let Some(reply) = self.agent.handle(msg)? {
            self.link.send(reply)?;
        }
        Ok(())
    }
}

/// Runs the experiment in-process with the built-in hooks of `cfg`.
pub fn run_simulation(cfg: &ExperimentConfig) -> Result<SimulationOutcome> {
    run_simulation_with(cfg, HookRegistry::from_config(cfg), SimOptions::default(), None)
}

pub fn run_simulation_with(
    cfg: &ExperimentConfig,
    hooks: HookRegistry,
    opts: SimOptions,
    sink: Option<Box<dyn MetricsSink>>,
) -> Result<SimulationOutcome> {
    let threads = match (opts.threads, cfg.mode) {
        (Some(p), _) => Some(p.max(1)),
        (None, Mode::SimulateParallel) => Some(rayon::current_num_threads()),
        (None, _) => None,
    };
    let pool = match threads {
        Some(p) if p > 1 => Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(p)
                .build()
                .map_err(|e| Error::Internal(format!("thread pool: {e}")))?,
        ),
        _ => None,
    };

    let mut server = ServerAgent::new(cfg.clone(), hooks.clone(), ClockKind::Simulated)?;
    if let Some(sink) = sink {
        server.set_sink(sink);
    }
    let shared_cfg = Arc::new(cfg.clone());
    let shared_hooks = Arc::new(hooks);
    let data = FederatedData::from_config(cfg)?;
    let mut links = Vec::new();
    let mut slots = Vec::new();
    for id in 0..cfg.clients {
        server.register(&id.to_string())?;
        let (server_end, client_end) = inproc_channel_pair(cfg.comm.serialize_inproc);
        let agent = ClientAgent::new(
            Arc::clone(&shared_cfg),
            Arc::clone(&shared_hooks),
            id,
            Arc::new(data.client(id)),
            ClockKind::Simulated,
        )?;
        links.push(server_end);
        slots.push(Slot { agent, link: client_end });
    }

    let mut sim = Simulation { server, links, slots, pool, local_models: Vec::new() };
    sim.server.start(0.0)?;
    for slot in &mut sim.slots {
        slot.agent.start(0.0)?;
    }
    match cfg.aggregator {
        Aggregator::Fedavg => sim.run_sync()?,
        Aggregator::Async => sim.run_async()?,
    }
    sim.broadcast_done()?;

    let end_time = sim.server.now();
    let server = sim.server;
    Ok(SimulationOutcome {
        final_model: server.global().clone(),
        history: server.history().to_vec(),
        records: server.records().to_vec(),
        metrics: server.context().metrics.clone(),
        local_models: sim.local_models,
        terminations: server.sim_clock().terminations().to_vec(),
        costs: server.costs().map(<[f64]>::to_vec),
        end_time,
        digest: cfg.digest(),
    })
}

struct Simulation {
    server: ServerAgent,
    links: Vec<InprocEndpoint>,
    slots: Vec<Slot>,
    pool: Option<rayon::ThreadPool>,
    local_models: Vec<LocalModelRecord>,
}

impl Simulation {
    fn send_model(&mut self, id: u32) -> Result<()> {
        match self.server.model_for(id) {
            Reply::Send(msg) => self.links[id as usize].send(msg),
            other => Err(Error::Internal(format!("client {id} got no model: {other:?}"))),
        }
    }

    /// Lets every listed client handle its pending message, in parallel
    /// when a pool is configured.
    fn step_clients(&mut self, ids: &[u32]) -> Result<()> {
        let mut active: Vec<&mut Slot> = self.slots.iter_mut().filter(|s| ids.contains(&s.agent.id())).collect();
        match &self.pool {
            Some(pool) => pool.install(|| active.par_iter_mut().try_for_each(|s| s.step())),
            None => active.iter_mut().try_for_each(|s| s.step()),
        }
    }

    fn collect_update(&mut self, id: u32) -> Result<LocalUpdate> {
        let update = update_from_message(self.links[id as usize].recv()?)?;
        if let Some((round, params)) = self.slots[id as usize].agent.last_local_model() {
            self.local_models.push(LocalModelRecord { round: *round, client_id: id, params: params.clone() });
        }
        Ok(update)
    }

    fn run_sync(&mut self) -> Result<()> {
        while self.server.is_running() {
            let round = self.server.round();
            let attempt = self.server.attempt();
            let start = self.server.now();
            let deadline = self.server.round_deadline().expect("a running sync server has an open round");
            let selected = self.server.selected().to_vec();
            for id in &selected {
                self.send_model(*id)?;
            }
            self.step_clients(&selected)?;
            let mut arrivals = Vec::with_capacity(selected.len());
            for id in &selected {
                let update = self.collect_update(*id)?;
                arrivals.push((start + update.wall_time_sec, update));
            }
            arrivals.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.client_id.cmp(&b.1.client_id)));
            let same_round = |s: &ServerAgent| s.is_running() && s.round() == round && s.attempt() == attempt;
            for (arrival, update) in arrivals {
                if same_round(&self.server) && arrival > deadline {
                    self.server.poll_timeout(deadline)?;
                }
                self.server.receive_update(update, arrival)?;
            }
            if same_round(&self.server) {
                self.server.poll_timeout(deadline)?;
            }
        }
        Ok(())
    }

    fn dispatch(&mut self, id: u32, now: f64, queue: &mut BTreeMap<(u64, u32), LocalUpdate>) -> Result<()> {
        self.send_model(id)?;
        self.step_clients(&[id])?;
        let update = self.collect_update(id)?;
        let arrival = now + update.wall_time_sec;
        // Non-negative floats order like their bit patterns.
        queue.insert((arrival.to_bits(), id), update);
        Ok(())
    }

    fn run_async(&mut self) -> Result<()> {
        let mut queue = BTreeMap::new();
        if self.server.is_running() {
            for id in 0..self.slots.len() as u32 {
                self.dispatch(id, 0.0, &mut queue)?;
            }
        }
        while self.server.is_running() {
            let ((bits, id), update) = queue.pop_first().expect("every client has an update in flight");
            let arrival = f64::from_bits(bits);
            self.server.receive_update(update, arrival)?;
            if self.server.is_running() {
                self.dispatch(id, arrival, &mut queue)?;
            }
        }
        Ok(())
    }

    fn broadcast_done(&mut self) -> Result<()> {
        let ids: Vec<u32> = (0..self.slots.len() as u32).collect();
        for id in &ids {
            match self.server.model_for(*id) {
                Reply::Send(msg @ Message::Done { .. }) => self.links[*id as usize].send(msg)?,
                other => return Err(Error::Internal(format!("expected DONE for client {id}, got {other:?}"))),
            }
        }
        self.step_clients(&ids)?;
        debug_assert!(self.slots.iter().all(|s| s.agent.finished().is_some()));
        Ok(())
    }
}
