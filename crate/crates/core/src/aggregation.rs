//! Server-side aggregation, client selection and speed estimation.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::seed::{domain, stream_seed, sub_seed, SplitMix64};
use crate::types::{LocalUpdate, ParameterVector};

/// Sample-weighted mean of plain updates.
///
/// Updates are summed in ascending `client_id` order whatever order they
/// arrive in, so the result is bit-identical for any permutation. The sum
/// starts from the first weighted term, which makes a single update come
/// back unchanged.
pub fn fedavg(updates: &[LocalUpdate]) -> Result<ParameterVector> {
    let first = updates.first().ok_or_else(|| Error::InvalidInput("fedavg needs at least one update".into()))?;
    let mut ordered: Vec<&LocalUpdate> = updates.iter().collect();
    ordered.sort_by_key(|u| u.client_id);
    let dim = first.model_dim();
    let mut total: u64 = 0;
    for u in &ordered {
        if u.round != first.round {
            return Err(Error::InvalidInput(format!("mixed rounds {} and {}", first.round, u.round)));
        }
        if u.model_dim() != dim {
            return Err(Error::DimensionMismatch { expected: dim, actual: u.model_dim() });
        }
        total += u.sample_count;
    }
    let mut acc: Option<Vec<f64>> = None;
    for u in ordered {
        let w = u
            .plain()
            .ok_or_else(|| Error::InvalidInput("fedavg received a masked payload".into()))?;
        let weight = u.sample_count as f64 / total as f64;
        match acc.as_mut() {
            None => acc = Some(w.as_slice().iter().map(|v| weight * v).collect()),
            Some(a) => {
                for (ai, wi) in a.iter_mut().zip(w.as_slice()) {
                    *ai += weight * wi;
                }
            }
        }
    }
    Ok(ParameterVector::from_vec_unchecked(acc.expect("non-empty")))
}

/// Mixing weight `alpha * (1 + t - tau)^(-a)` of an update trained on
/// version `tau` and applied at server version `t`.
pub fn staleness_weight(server_round: u32, update_round: u32, alpha: f64, exponent: f64) -> Result<f64> {
    if server_round < update_round {
        return Err(Error::InvalidInput(format!(
            "update from the future: trained on {update_round}, server at {server_round}"
        )));
    }
    let staleness = (server_round - update_round) as f64;
    Ok(alpha * (1.0 + staleness).powf(-exponent))
}

/// `(1 - alpha*s) * global + alpha*s * update`, with `s` the polynomial
/// staleness discount.
pub fn async_apply(
    global: &ParameterVector,
    update: &ParameterVector,
    server_round: u32,
    update_round: u32,
    alpha: f64,
    exponent: f64,
) -> Result<ParameterVector> {
    if global.dim() != update.dim() {
        return Err(Error::DimensionMismatch { expected: global.dim(), actual: update.dim() });
    }
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::InvalidInput(format!("alpha {alpha} outside (0, 1]")));
    }
    let mix = staleness_weight(server_round, update_round, alpha, exponent)?;
    let keep = 1.0 - mix;
    Ok(ParameterVector::from_vec_unchecked(
        global
            .as_slice()
            .iter()
            .zip(update.as_slice())
            .map(|(g, u)| keep * g + mix * u)
            .collect(),
    ))
}

/// `max(1, ceil(f * M))`, treating products within rounding noise of an
/// integer as that integer.
pub fn selection_size(m: u32, fraction: f64) -> usize {
    let x = fraction * m as f64;
    let c = if (x - x.round()).abs() < 1e-9 { x.round() } else { x.ceil() };
    (c.max(0.0) as usize).clamp(1, m.max(1) as usize)
}

/// Participants of `round`: `max(1, ceil(f*M))` ids from a seeded
/// Fisher–Yates shuffle of `[0, M)`, sorted ascending.
pub fn select_clients(m: u32, fraction: f64, round: u32, seed: u64) -> Vec<u32> {
    select_clients_attempt(m, fraction, round, seed, 0)
}

/// Selection for a retried round; `attempt` 0 is the first try.
pub fn select_clients_attempt(m: u32, fraction: f64, round: u32, seed: u64, attempt: u32) -> Vec<u32> {
    let mut ids: Vec<u32> = (0..m).collect();
    let base = stream_seed(seed, m as u64, round as u64);
    SplitMix64::new(sub_seed(base, domain::SELECT + attempt as u64)).shuffle(&mut ids);
    ids.truncate(selection_size(m, fraction));
    ids.sort_unstable();
    ids
}

/// Running estimate of how long each client takes per round.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientSpeedStats {
    beta: f64,
    entries: BTreeMap<u32, SpeedEntry>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpeedEntry {
    pub expected_duration_sec: f64,
    pub observations: u64,
}

impl Default for ClientSpeedStats {
    fn default() -> Self {
        Self::new(0.5)
    }
}

impl ClientSpeedStats {
    pub fn new(beta: f64) -> Self {
        Self { beta, entries: BTreeMap::new() }
    }

    pub fn expected_duration(&self, client_id: u32) -> Option<f64> {
        self.entries.get(&client_id).map(|e| e.expected_duration_sec)
    }

    pub fn entry(&self, client_id: u32) -> Option<&SpeedEntry> {
        self.entries.get(&client_id)
    }

    /// First sample sets the estimate; later ones blend in with weight beta.
    pub fn observe_duration(&mut self, client_id: u32, observed_sec: f64) -> Result<()> {
        if !(observed_sec > 0.0 && observed_sec.is_finite()) {
            return Err(Error::InvalidInput(format!("duration must be positive, got {observed_sec}")));
        }
        let beta = self.beta;
        self.entries
            .entry(client_id)
            .and_modify(|e| {
                e.expected_duration_sec = beta * observed_sec + (1.0 - beta) * e.expected_duration_sec;
                e.observations += 1;
            })
            .or_insert(SpeedEntry { expected_duration_sec: observed_sec, observations: 1 });
        Ok(())
    }

    /// `now` plus the slowest expected duration among `selected`; `None`
    /// while any of them has never been observed.
    pub fn estimate_round_eta(&self, selected: &[u32], now: f64) -> Option<f64> {
        let mut slowest: Option<f64> = None;
        for id in selected {
            let d = self.expected_duration(*id)?;
            slowest = Some(slowest.map_or(d, |s: f64| s.max(d)));
        }
        slowest.map(|s| now + s)
    }
}
