//! Networked deployment: one server process and one process per client.

use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{channel, RecvTimeoutError};
use std::sync::Arc;
use std::time::{Duration, Instant};

use crate::comm::tcp::{ClientProxy, Fetched, RetryPolicy, ServerEndpoint, LONG_POLL_INTERVAL};
use crate::config::{ConfigDigest, ExperimentConfig};
use crate::error::{Error, Result};
use crate::hooks::HookRegistry;
use crate::metrics::{MetricRecord, MetricsSink, MetricsStore};
use crate::orchestrator::client::ClientAgent;
use crate::orchestrator::server::{ClockKind, ServerAgent};
use crate::orchestrator::wall_now;
use crate::partition::FederatedData;
use crate::types::ParameterVector;

/// How long a finished server keeps answering so every client sees DONE.
const LINGER: Duration = Duration::from_secs(10);
/// How long a failed server keeps answering so clients see the error.
const FAIL_LINGER: Duration = Duration::from_secs(2);

fn require_token(cfg: &ExperimentConfig) -> Result<()> {
    if cfg.comm.auth_token.is_empty() {
        return Err(Error::Config("comm.auth_token must be set for networked runs".into()));
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct ServerOutcome {
    pub final_model: ParameterVector,
    pub history: Vec<ParameterVector>,
    pub records: Vec<MetricRecord>,
    pub metrics: MetricsStore,
    pub digest: ConfigDigest,
}

/// A bound server, ready to run.
pub struct Server {
    endpoint: ServerEndpoint,
    agent: ServerAgent,
}

impl Server {
    /// Binds `comm.host:comm.port` (port 0 picks a free port).
    pub fn bind(cfg: &ExperimentConfig, hooks: HookRegistry) -> Result<Self> {
        require_token(cfg)?;
        let endpoint = ServerEndpoint::bind((cfg.comm.host.as_str(), cfg.comm.port), &cfg.comm.auth_token)?;
        let agent = ServerAgent::new(cfg.clone(), hooks, ClockKind::Wall)?;
        Ok(Self { endpoint, agent })
    }

    pub fn local_addr(&self) -> Result<SocketAddr> {
        self.endpoint.local_addr()
    }

    pub fn set_sink(&mut self, sink: Box<dyn MetricsSink>) {
        self.agent.set_sink(sink);
    }

    /// Serves clients until the experiment ends and every client was told.
    pub fn run(self) -> Result<ServerOutcome> {
        let Server { endpoint, mut agent } = self;
        log::info!("server listening on {}", endpoint.local_addr()?);
        let stop = Arc::new(AtomicBool::new(false));
        let (tx, rx) = channel();
        let acceptor = endpoint.spawn(tx, Arc::clone(&stop))?;
        let mut ended: Option<Instant> = None;
        loop {
            match rx.recv_timeout(LONG_POLL_INTERVAL) {
                Ok(req) => {
                    let reply = agent.handle_request(req.msg, wall_now());
                    let _ = req.reply.send(reply);
                }
                Err(RecvTimeoutError::Timeout) => {}
                Err(RecvTimeoutError::Disconnected) => break,
            }
            if agent.is_running() {
                if let Err(e) = agent.poll_timeout(wall_now()) {
                    log::error!("run failed: {e}");
                    agent.fail(e);
                }
            }
            let failed = agent.failure().is_some();
            if agent.is_finished() || failed {
                let since = *ended.get_or_insert_with(Instant::now);
                let linger = if failed { FAIL_LINGER } else { LINGER };
                if (agent.is_finished() && agent.all_done_delivered()) || since.elapsed() > linger {
                    break;
                }
            }
        }
        stop.store(true, Ordering::SeqCst);
        let _ = acceptor.join();
        if let Some(e) = agent.take_error() {
            return Err(e);
        }
        if !agent.is_finished() {
            return Err(Error::Internal("server stopped before the experiment ended".into()));
        }
        Ok(ServerOutcome {
            final_model: agent.global().clone(),
            history: agent.history().to_vec(),
            records: agent.records().to_vec(),
            metrics: agent.context().metrics.clone(),
            digest: agent.config().digest(),
        })
    }
}

/// Binds and runs a server for `cfg`.
pub fn run_server(cfg: &ExperimentConfig, sink: Option<Box<dyn MetricsSink>>) -> Result<ServerOutcome> {
    let mut server = Server::bind(cfg, HookRegistry::from_config(cfg))?;
    if let Some(sink) = sink {
        server.set_sink(sink);
    }
    server.run()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientOutcome {
    pub client_id: u32,
    pub final_round: u32,
    pub rounds_trained: u32,
}

/// Runs one client against the server named in `cfg.comm`.
pub fn run_client(cfg: &ExperimentConfig, name: &str) -> Result<ClientOutcome> {
    let addr = format!("{}:{}", cfg.comm.host, cfg.comm.port);
    run_client_at(cfg, &addr, name, HookRegistry::from_config(cfg), RetryPolicy::default())
}

pub fn run_client_at(
    cfg: &ExperimentConfig,
    addr: &str,
    name: &str,
    hooks: HookRegistry,
    retry: RetryPolicy,
) -> Result<ClientOutcome> {
    require_token(cfg)?;
    cfg.check()?;
    let mut proxy = ClientProxy::new(addr, &cfg.comm.auth_token, name).with_retry(retry);
    let (client_id, digest) = proxy.register()?;
    let local = cfg.digest();
    if digest != local.0 {
        return Err(Error::ConfigMismatch { server: ConfigDigest(digest).to_string(), local: local.to_string() });
    }
    log::info!("registered as client {client_id}");
    let data = FederatedData::from_config(cfg)?.client(client_id);
    let mut agent = ClientAgent::new(Arc::new(cfg.clone()), Arc::new(hooks), client_id, Arc::new(data), ClockKind::Wall)?;
    agent.start(wall_now())?;
    let mut rounds_trained = 0;
    loop {
        match proxy.fetch_model()? {
            Fetched::Model { round, params, metadata } => {
                let update = agent.train_round(round, params, metadata)?;
                proxy.submit_update(&update)?;
                rounds_trained += 1;
            }
            Fetched::Done { final_round } => {
                log::info!("client {client_id} done after round {final_round}");
                return Ok(ClientOutcome { client_id, final_round, rounds_trained });
            }
        }
    }
}
