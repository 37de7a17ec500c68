//! The experiment configuration schema.
//!
//! One JSON document describes an experiment completely and is shared
//! verbatim by every run mode. The schema is strict: unknown keys are
//! rejected, every range is checked at load time, and defaults are resolved
//! before anything runs. A canonical rendering of the validated config
//! (keys sorted, no whitespace) is hashed with SHA-256; servers and clients
//! compare that digest during registration.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    #[default]
    SimulateSerial,
    SimulateParallel,
    Server,
    Client,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Aggregator {
    #[default]
    Fedavg,
    Async,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    #[default]
    Iid,
    Dirichlet,
    Shards,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    #[default]
    Logreg,
    Mlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DpConfig {
    pub enabled: bool,
    pub clip: f64,
    pub epsilon: f64,
    pub delta: f64,
}

impl Default for DpConfig {
    fn default() -> Self {
        Self { enabled: false, clip: 1.0, epsilon: 1.0, delta: 1e-5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SecAggConfig {
    pub enabled: bool,
    pub fixed_point_scale: u64,
}

impl Default for SecAggConfig {
    fn default() -> Self {
        Self { enabled: false, fixed_point_scale: 1 << 20 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PartitionConfig {
    pub scheme: Scheme,
    pub dirichlet_alpha: f64,
    pub shards_per_client: u32,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        Self { scheme: Scheme::Iid, dirichlet_alpha: 0.5, shards_per_client: 2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskConfig {
    pub kind: TaskKind,
    pub n_per_class: u32,
    pub n_classes: u32,
    pub feature_dim: u32,
    pub class_sep: f64,
    /// Hidden width; ignored by `logreg`.
    pub hidden_units: u32,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            kind: TaskKind::Logreg,
            n_per_class: 200,
            n_classes: 2,
            feature_dim: 10,
            class_sep: 4.0,
            hidden_units: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CommConfig {
    pub host: String,
    pub port: u16,
    pub auth_token: String,
    /// Route in-process messages through the wire codec.
    pub serialize_inproc: bool,
}

impl Default for CommConfig {
    fn default() -> Self {
        Self {
            host: "127.0.0.1".into(),
            port: 7070,
            auth_token: String::new(),
            serialize_inproc: false,
        }
    }
}

/// Minimum number of updates that closes a synchronous round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Quorum {
    #[default]
    All,
    Count(u32),
}

impl Serialize for Quorum {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Quorum::All => s.serialize_str("all"),
            Quorum::Count(n) => s.serialize_u32(*n),
        }
    }
}

impl<'de> Deserialize<'de> for Quorum {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        match Value::deserialize(d)? {
            Value::String(s) if s == "all" => Ok(Quorum::All),
            Value::Number(n) => n
                .as_u64()
                .and_then(|n| u32::try_from(n).ok())
                .map(Quorum::Count)
                .ok_or_else(|| D::Error::custom("quorum must be a non-negative integer or \"all\"")),
            _ => Err(D::Error::custom("quorum must be a non-negative integer or \"all\"")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TimingConfig {
    pub round_timeout_sec: f64,
    pub quorum: Quorum,
    /// Smoothing factor of the per-client duration estimate.
    pub speed_ema_beta: f64,
}

impl Default for TimingConfig {
    fn default() -> Self {
        Self { round_timeout_sec: 600.0, quorum: Quorum::All, speed_ema_beta: 0.5 }
    }
}

/// A value given once for every client or as one entry per client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PerClient {
    Uniform(f64),
    Each(Vec<f64>),
}

impl PerClient {
    pub fn get(&self, client_id: u32) -> f64 {
        match self {
            PerClient::Uniform(v) => *v,
            PerClient::Each(v) => v[client_id as usize],
        }
    }

    fn values(&self) -> &[f64] {
        match self {
            PerClient::Uniform(v) => std::slice::from_ref(v),
            PerClient::Each(v) => v,
        }
    }
}

/// Simulated timing and pricing of client instances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostConfig {
    /// Emit per-client `cost_total` records and allow cost-aware shutdown.
    pub enabled: bool,
    pub price_per_sec: PerClient,
    pub base_round_sec: PerClient,
    pub per_sample_sec: f64,
    pub spin_up_time_sec: f64,
    pub shutdown_threshold_sec: f64,
}

impl Default for CostConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            price_per_sec: PerClient::Uniform(1.0),
            base_round_sec: PerClient::Uniform(1.0),
            per_sample_sec: 0.0,
            spin_up_time_sec: 0.0,
            shutdown_threshold_sec: 0.0,
        }
    }
}

impl CostConfig {
    /// Declared duration of one local round for a client holding `samples`.
    pub fn round_duration(&self, client_id: u32, samples: u64) -> f64 {
        self.base_round_sec.get(client_id) + self.per_sample_sec * samples as f64
    }
}

/// Built-in hooks and the callback error policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HooksConfig {
    pub eval_local: bool,
    pub cost_shutdown: bool,
    /// Abort the experiment on the first callback failure.
    pub strict: bool,
}

impl Default for HooksConfig {
    fn default() -> Self {
        Self { eval_local: true, cost_shutdown: false, strict: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub seed: u64,
    pub rounds: u32,
    pub clients: u32,
    pub client_fraction: f64,
    pub local_epochs: u32,
    pub batch_size: u32,
    pub learning_rate: f64,
    pub prox_mu: f64,
    pub aggregator: Aggregator,
    pub async_alpha: f64,
    pub staleness_exponent: f64,
    pub async_budget: u32,
    pub dp: DpConfig,
    pub secagg: SecAggConfig,
    pub partition: PartitionConfig,
    pub task: TaskConfig,
    pub comm: CommConfig,
    pub timing: TimingConfig,
    pub cost: CostConfig,
    pub hooks: HooksConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            mode: Mode::SimulateSerial,
            seed: 0,
            rounds: 10,
            clients: 4,
            client_fraction: 1.0,
            local_epochs: 1,
            batch_size: 32,
            learning_rate: 0.1,
            prox_mu: 0.0,
            aggregator: Aggregator::Fedavg,
            async_alpha: 0.5,
            staleness_exponent: 0.5,
            async_budget: 10,
            dp: DpConfig::default(),
            secagg: SecAggConfig::default(),
            partition: PartitionConfig::default(),
            task: TaskConfig::default(),
            comm: CommConfig::default(),
            timing: TimingConfig::default(),
            cost: CostConfig::default(),
            hooks: HooksConfig::default(),
        }
    }
}

/// SHA-256 of the canonical config rendering.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct ConfigDigest(pub [u8; 32]);

impl fmt::Display for ConfigDigest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in self.0 {
            write!(f, "{b:02x}")?;
        }
        Ok(())
    }
}

impl fmt::Debug for ConfigDigest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ConfigDigest({self})")
    }
}

/// Compact JSON with object keys in code-point order.
///
/// `serde_json` keeps object keys in a sorted map and prints floats in
/// shortest round-trip form, so plain serialization is already canonical.
pub fn canonical_json(value: &Value) -> String {
    serde_json::to_string(value).expect("a JSON value always serializes")
}

/// Parses and validates a raw config document.
pub fn validate_config(raw: Value) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig =
        serde_json::from_value(raw).map_err(|e| Error::config(e.to_string()))?;
    cfg.check()?;
    Ok(cfg)
}

fn out_of_range(field: &str, value: impl fmt::Display) -> Error {
    Error::config(format!("{field} out of range: {value}"))
}

fn ensure(ok: bool, field: &str, value: impl fmt::Display) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(out_of_range(field, value))
    }
}

fn positive(field: &str, v: f64) -> Result<()> {
    ensure(v.is_finite() && v > 0.0, field, v)
}

fn non_negative(field: &str, v: f64) -> Result<()> {
    ensure(v.is_finite() && v >= 0.0, field, v)
}

impl ExperimentConfig {
    pub fn from_json_str(text: &str) -> Result<Self> {
        let raw: Value = serde_json::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        validate_config(raw)
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json_str(&text)
    }

    /// Range checks for every field.
    pub fn check(&self) -> Result<()> {
        ensure(self.clients >= 1, "clients", self.clients)?;
        ensure(
            self.client_fraction.is_finite() && self.client_fraction > 0.0 && self.client_fraction <= 1.0,
            "client_fraction",
            self.client_fraction,
        )?;
        ensure(self.batch_size >= 1, "batch_size", self.batch_size)?;
        positive("learning_rate", self.learning_rate)?;
        non_negative("prox_mu", self.prox_mu)?;
        ensure(
            self.async_alpha.is_finite() && self.async_alpha > 0.0 && self.async_alpha <= 1.0,
            "async_alpha",
            self.async_alpha,
        )?;
        non_negative("staleness_exponent", self.staleness_exponent)?;
        ensure(self.async_budget >= 1, "async_budget", self.async_budget)?;

        positive("dp.clip", self.dp.clip)?;
        positive("dp.epsilon", self.dp.epsilon)?;
        ensure(self.dp.delta > 0.0 && self.dp.delta < 1.0, "dp.delta", self.dp.delta)?;

        ensure(self.secagg.fixed_point_scale >= 1, "secagg.fixed_point_scale", self.secagg.fixed_point_scale)?;
        if self.secagg.enabled {
            if self.aggregator == Aggregator::Async {
                return Err(Error::config("secagg requires the fedavg aggregator"));
            }
            // Coordinates are assumed to stay below 2^20 in magnitude, so the
            // wrapped sum of n_k * w_k * s must fit in 63 bits.
            let bound = self.secagg.fixed_point_scale as f64 * self.total_samples() as f64 * (1u64 << 20) as f64;
            ensure(bound < 2f64.powi(63), "secagg.fixed_point_scale", self.secagg.fixed_point_scale)?;
        }

        positive("partition.dirichlet_alpha", self.partition.dirichlet_alpha)?;
        ensure(self.partition.shards_per_client >= 1, "partition.shards_per_client", self.partition.shards_per_client)?;

        ensure(self.task.n_per_class >= 1, "task.n_per_class", self.task.n_per_class)?;
        ensure(self.task.n_classes >= 1, "task.n_classes", self.task.n_classes)?;
        ensure(self.task.feature_dim >= 1, "task.feature_dim", self.task.feature_dim)?;
        positive("task.class_sep", self.task.class_sep)?;
        ensure(self.task.hidden_units >= 1, "task.hidden_units", self.task.hidden_units)?;

        let n = self.total_samples();
        ensure(self.clients as u64 <= n, "clients", self.clients)?;
        if self.partition.scheme == Scheme::Shards {
            let shards = self.clients as u64 * self.partition.shards_per_client as u64;
            ensure(shards <= n, "partition.shards_per_client", self.partition.shards_per_client)?;
        }

        positive("timing.round_timeout_sec", self.timing.round_timeout_sec)?;
        ensure(
            self.timing.speed_ema_beta > 0.0 && self.timing.speed_ema_beta <= 1.0,
            "timing.speed_ema_beta",
            self.timing.speed_ema_beta,
        )?;
        if let Quorum::Count(q) = self.timing.quorum {
            ensure(q >= 1 && q as usize <= self.selected_count(), "timing.quorum", q)?;
        }

        for (field, pc) in [("cost.price_per_sec", &self.cost.price_per_sec), ("cost.base_round_sec", &self.cost.base_round_sec)] {
            if let PerClient::Each(v) = pc {
                ensure(v.len() == self.clients as usize, field, format!("{} entries for {} clients", v.len(), self.clients))?;
            }
        }
        for &v in self.cost.price_per_sec.values() {
            non_negative("cost.price_per_sec", v)?;
        }
        for &v in self.cost.base_round_sec.values() {
            positive("cost.base_round_sec", v)?;
        }
        non_negative("cost.per_sample_sec", self.cost.per_sample_sec)?;
        non_negative("cost.spin_up_time_sec", self.cost.spin_up_time_sec)?;
        non_negative("cost.shutdown_threshold_sec", self.cost.shutdown_threshold_sec)?;
        if self.hooks.cost_shutdown && !self.cost.enabled {
            return Err(Error::config("hooks.cost_shutdown requires cost.enabled"));
        }
        Ok(())
    }

    /// Canonical rendering of the experiment definition.
    ///
    /// `mode` and `comm` are excluded: they describe where a process runs
    /// and how it connects, not what it computes, and legitimately differ
    /// between the server and its clients.
    pub fn canonical_string(&self) -> String {
        let mut value = serde_json::to_value(self).expect("config always serializes");
        if let Value::Object(map) = &mut value {
            map.remove("mode");
            map.remove("comm");
        }
        canonical_json(&value)
    }

    pub fn digest(&self) -> ConfigDigest {
        ConfigDigest(Sha256::digest(self.canonical_string().as_bytes()).into())
    }

    pub fn total_samples(&self) -> u64 {
        self.task.n_per_class as u64 * self.task.n_classes as u64
    }

    /// Clients selected per synchronous round: `max(1, ceil(f * M))`.
    pub fn selected_count(&self) -> usize {
        crate::aggregation::selection_size(self.clients, self.client_fraction)
    }

    /// Updates required to close a round of `selected` clients.
    pub fn quorum_count(&self, selected: usize) -> usize {
        match self.timing.quorum {
            Quorum::All => selected,
            Quorum::Count(q) => (q as usize).min(selected),
        }
    }
}
