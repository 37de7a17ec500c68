//! Transport layer: wire codec, in-process channels and TCP endpoints.

pub mod codec;
pub mod inproc;
pub mod tcp;

use std::collections::BTreeMap;

use serde_json::{Map, Number, Value};

pub use codec::{decode_message, encode_message, DecodeError, Message, WirePayload};
pub use inproc::{inproc_channel_pair, InprocEndpoint};

use crate::error::{Error, Result};
use crate::types::{LocalUpdate, ParameterVector, Payload, ResidueVector};

/// Keys of the UPDATE metrics document that carry update fields.
pub const KEY_TRAIN_LOSS: &str = "train_loss";
pub const KEY_WALL_TIME: &str = "wall_time_sec";

fn number(v: f64) -> Option<Value> {
    Number::from_f64(v).map(Value::Number)
}

/// Wire form of a local update; `train_loss` and `wall_time_sec` travel in
/// the metrics document. Non-finite metric values are left out.
pub fn update_to_message(u: &LocalUpdate) -> Message {
    let mut metrics = Map::new();
    for (name, v) in &u.metrics {
        if let Some(n) = number(*v) {
            metrics.insert(name.clone(), n);
        }
    }
    if let Some(n) = number(u.train_loss) {
        metrics.insert(KEY_TRAIN_LOSS.into(), n);
    }
    if let Some(n) = number(u.wall_time_sec) {
        metrics.insert(KEY_WALL_TIME.into(), n);
    }
    let payload = match &u.payload {
        Payload::Plain(p) => WirePayload::Plain(p.as_slice().to_vec()),
        Payload::Masked(r) => WirePayload::Masked(r.0.clone()),
    };
    Message::Update { client_id: u.client_id, round: u.round, sample_count: u.sample_count, payload, metrics }
}

/// Validates an UPDATE and turns it back into a local update.
pub fn update_from_message(msg: Message) -> Result<LocalUpdate> {
    let Message::Update { client_id, round, sample_count, payload, metrics } = msg else {
        return Err(Error::Protocol(format!("expected UPDATE, got {}", msg.name())));
    };
    let payload = match payload {
        WirePayload::Plain(v) => Payload::Plain(
            ParameterVector::new(v).map_err(|e| Error::Protocol(format!("update from client {client_id}: {e}")))?,
        ),
        WirePayload::Masked(v) if v.is_empty() => {
            return Err(Error::Protocol(format!("update from client {client_id}: empty masked payload")))
        }
        WirePayload::Masked(v) => Payload::Masked(ResidueVector(v)),
    };
    let mut values = BTreeMap::new();
    for (name, v) in metrics {
        let x = v
            .as_f64()
            .ok_or_else(|| Error::Protocol(format!("metric `{name}` from client {client_id} is not a number")))?;
        values.insert(name, x);
    }
    let train_loss = values.remove(KEY_TRAIN_LOSS).unwrap_or(f64::NAN);
    let wall_time_sec = values.remove(KEY_WALL_TIME).unwrap_or(0.0);
    Ok(LocalUpdate { client_id, round, sample_count, payload, train_loss, wall_time_sec, metrics: values })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn update_round_trip() {
        let mut metrics = BTreeMap::new();
        metrics.insert("test_acc".to_string(), 0.75);
        let u = LocalUpdate {
            client_id: 2,
            round: 5,
            sample_count: 40,
            payload: Payload::Plain(ParameterVector::new(vec![0.5, -1.0]).unwrap()),
            train_loss: 0.3,
            wall_time_sec: 1.5,
            metrics,
        };
        let back = update_from_message(decode_message(&encode_message(&update_to_message(&u))).unwrap()).unwrap();
        assert_eq!(back, u);
    }

    #[test]
    fn rejects_bad_updates() {
        let plain = |v: Vec<f64>| Message::Update {
            client_id: 0,
            round: 0,
            sample_count: 1,
            payload: WirePayload::Plain(v),
            metrics: Map::new(),
        };
        assert!(update_from_message(plain(vec![f64::NAN])).is_err());
        assert!(update_from_message(plain(vec![])).is_err());
        assert!(update_from_message(Message::Ack).is_err());
        let mut metrics = Map::new();
        metrics.insert("x".into(), Value::String("y".into()));
        let msg = Message::Update { client_id: 0, round: 0, sample_count: 1, payload: WirePayload::Plain(vec![1.0]), metrics };
        assert!(update_from_message(msg).is_err());
    }
}
