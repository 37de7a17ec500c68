//! The client agent: local training, client-side hooks and the privacy
//! pipeline for one client.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Instant;

use serde_json::{Map, Value};

use crate::aggregation::ClientSpeedStats;
use crate::comm::codec::Message;
use crate::comm::update_to_message;
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::hooks::{ClientContext, HookEvent, HookRegistry, MetaValue, ServerContext, METRIC_HOOK_ERRORS};
use crate::metrics::{MetricsStore, Scope};
use crate::orchestrator::server::{ClockKind, META_ROUND_START, META_SELECTED, METRIC_TERMINATED};
use crate::orchestrator::wall_now;
use crate::partition::ClientData;
use crate::privacy::PrivacyPipeline;
use crate::trainer::{local_train, Task, TrainSettings};
use crate::types::{LocalUpdate, ParameterVector};

pub struct ClientAgent {
    cfg: Arc<ExperimentConfig>,
    hooks: Arc<HookRegistry>,
    privacy: PrivacyPipeline,
    settings: TrainSettings,
    ctx: ClientContext,
    /// Server state as last broadcast, seen by client-side callbacks.
    view: ServerContext,
    clock: ClockKind,
    started: bool,
    finished: Option<u32>,
    hook_errors: f64,
    last_local: Option<(u32, ParameterVector)>,
}

impl ClientAgent {
    pub fn new(
        cfg: Arc<ExperimentConfig>,
        hooks: Arc<HookRegistry>,
        client_id: u32,
        data: Arc<ClientData>,
        clock: ClockKind,
    ) -> Result<Self> {
        let task = Task::from_config(&cfg);
        let privacy = PrivacyPipeline::from_config(&cfg)?;
        let settings = TrainSettings::from_config(&cfg);
        let zeros = ParameterVector::zeros(task.param_dim());
        let ctx = ClientContext::new(
            client_id,
            zeros.clone(),
            data,
            task,
            cfg.cost.spin_up_time_sec,
            cfg.cost.shutdown_threshold_sec,
        );
        let view = ServerContext::new(zeros, (0..cfg.clients).collect(), ClientSpeedStats::new(cfg.timing.speed_ema_beta));
        Ok(Self {
            cfg,
            hooks,
            privacy,
            settings,
            ctx,
            view,
            clock,
            started: false,
            finished: None,
            hook_errors: 0.0,
            last_local: None,
        })
    }

    pub fn id(&self) -> u32 {
        self.ctx.id
    }

    pub fn context(&self) -> &ClientContext {
        &self.ctx
    }

    /// Round and parameters of the most recent locally trained model, before
    /// any privacy transform.
    pub fn last_local_model(&self) -> Option<&(u32, ParameterVector)> {
        self.last_local.as_ref()
    }

    /// Final round announced by DONE.
    pub fn finished(&self) -> Option<u32> {
        self.finished
    }

    pub fn start(&mut self, now: f64) -> Result<()> {
        if self.started {
            return Ok(());
        }
        self.started = true;
        self.ctx.set_now(now);
        self.view.set_now(now);
        self.hook_errors += self.hooks.emit(HookEvent::OnClientStart, &mut self.view, Some(&mut self.ctx))? as f64;
        Ok(())
    }

    /// Reacts to a server message; a MODEL yields the UPDATE to send back.
    pub fn handle(&mut self, msg: Message) -> Result<Option<Message>> {
        match msg {
            Message::Model { round, params, metadata } => {
                let update = self.train_round(round, params, metadata)?;
                Ok(Some(update_to_message(&update)))
            }
            Message::Done { final_round } => {
                self.finished = Some(final_round);
                Ok(None)
            }
            Message::Error { code, text } => Err(Error::Remote { code, message: text }),
            other => Err(Error::Protocol(format!("client received unexpected {}", other.name()))),
        }
    }

    /// One participation: hooks, local training, privacy, upload hooks.
    pub fn train_round(&mut self, round: u32, params: Vec<f64>, metadata: Map<String, Value>) -> Result<LocalUpdate> {
        let started = Instant::now();
        let global = ParameterVector::new(params).map_err(|e| Error::Protocol(format!("model for round {round}: {e}")))?;
        let (participants, round_start, hook_meta) = split_metadata(metadata)?;
        let round_start = match self.clock {
            ClockKind::Simulated => round_start.unwrap_or(0.0),
            ClockKind::Wall => wall_now(),
        };
        let id = self.ctx.id;
        self.view.round = round;
        self.view.set_global(global.clone());
        self.view.replace_metadata(hook_meta);
        self.view.selected = participants.clone();
        self.view.metrics = MetricsStore::new();
        self.view.set_now(round_start);
        if self.ctx.is_terminated() {
            self.ctx.respawn();
        }
        self.ctx.model = global.clone();
        self.ctx.set_now(round_start);

        let mut failures = self.hooks.emit(HookEvent::BeforeLocalTrain, &mut self.view, Some(&mut self.ctx))?;
        let train_from = self.ctx.model.clone();
        let trained = local_train(&self.ctx.task, &train_from, &self.ctx.data.train, &self.settings, id, round, self.cfg.seed)?;
        let sample_count = trained.sample_count;
        let duration = match self.clock {
            ClockKind::Simulated => self.cfg.cost.round_duration(id, sample_count),
            ClockKind::Wall => started.elapsed().as_secs_f64(),
        };
        self.ctx.model = trained.plain().expect("local training yields a plain model").clone();
        let now = match self.clock {
            ClockKind::Simulated => round_start + duration,
            ClockKind::Wall => wall_now(),
        };
        self.ctx.set_now(now);
        self.view.set_now(now);

        failures += self.hooks.emit(HookEvent::AfterLocalTrain, &mut self.view, Some(&mut self.ctx))?;
        self.last_local = Some((round, self.ctx.model.clone()));
        let payload = self.privacy.protect(id, round, &global, &self.ctx.model, sample_count, &participants)?;
        failures += self.hooks.emit(HookEvent::BeforeModelUpload, &mut self.view, Some(&mut self.ctx))?;

        let mut metrics: BTreeMap<String, f64> =
            self.view.metrics.round_values(Scope::Client(id), round).cloned().unwrap_or_default();
        let errors = self.hook_errors + failures as f64;
        self.hook_errors = 0.0;
        if errors > 0.0 {
            metrics.insert(METRIC_HOOK_ERRORS.into(), errors);
        }
        if self.ctx.is_terminated() {
            log::info!("client {id} shuts down after round {round}");
            metrics.insert(METRIC_TERMINATED.into(), 1.0);
        }
        Ok(LocalUpdate {
            client_id: id,
            round,
            sample_count,
            payload,
            train_loss: trained.train_loss,
            wall_time_sec: duration,
            metrics,
        })
    }
}

type SplitMetadata = (Vec<u32>, Option<f64>, BTreeMap<String, MetaValue>);

/// Separates the server's reserved keys from hook metadata.
fn split_metadata(metadata: Map<String, Value>) -> Result<SplitMetadata> {
    let mut participants = Vec::new();
    let mut round_start = None;
    let mut hook_meta = BTreeMap::new();
    for (k, v) in metadata {
        match (k.as_str(), v) {
            (META_SELECTED, Value::Array(ids)) => {
                for id in ids {
                    let id = id
                        .as_u64()
                        .and_then(|x| u32::try_from(x).ok())
                        .ok_or_else(|| Error::Protocol("bad participant id in MODEL metadata".into()))?;
                    participants.push(id);
                }
            }
            (META_ROUND_START, Value::Number(n)) => round_start = n.as_f64(),
            (_, Value::Number(n)) => {
                if let Some(x) = n.as_f64() {
                    hook_meta.insert(k, MetaValue::Number(x));
                }
            }
            (_, Value::String(s)) => {
                hook_meta.insert(k, MetaValue::Text(s));
            }
            _ => {}
        }
    }
    Ok((participants, round_start, hook_meta))
}
