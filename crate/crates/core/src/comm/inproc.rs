//! In-process channel with the same message vocabulary as the wire path.

use std::sync::mpsc::{channel, Receiver, Sender};

use crate::comm::codec::{decode_message, encode_message, Message};
use crate::error::{Error, Result};

enum Packet {
    Message(Message),
    Frame(Vec<u8>),
}

/// One side of an in-process link.
///
/// With `serialize` set every message is encoded on send and decoded on
/// receive, exactly as it would be on a socket.
pub struct InprocEndpoint {
    tx: Sender<Packet>,
    rx: Receiver<Packet>,
    serialize: bool,
}

impl InprocEndpoint {
    pub fn send(&self, msg: Message) -> Result<()> {
        let packet = if self.serialize { Packet::Frame(encode_message(&msg)) } else { Packet::Message(msg) };
        self.tx.send(packet).map_err(|_| Error::Protocol("in-process peer hung up".into()))
    }

    /// Blocks until the peer sends a message.
    pub fn recv(&self) -> Result<Message> {
        let packet = self.rx.recv().map_err(|_| Error::Protocol("in-process peer hung up".into()))?;
        Self::open(packet)
    }

    /// A message already waiting, if any.
    pub fn try_recv(&self) -> Result<Option<Message>> {
        match self.rx.try_recv() {
            Ok(p) => Self::open(p).map(Some),
            Err(std::sync::mpsc::TryRecvError::Empty) => Ok(None),
            Err(std::sync::mpsc::TryRecvError::Disconnected) => Err(Error::Protocol("in-process peer hung up".into())),
        }
    }

    fn open(packet: Packet) -> Result<Message> {
        match packet {
            Packet::Message(m) => Ok(m),
            Packet::Frame(bytes) => Ok(decode_message(&bytes)?),
        }
    }
}

/// Returns the (server side, client side) ends of a fresh link.
pub fn inproc_channel_pair(serialize: bool) -> (InprocEndpoint, InprocEndpoint) {
    let (to_client, from_server) = channel();
    let (to_server, from_client) = channel();
    (
        InprocEndpoint { tx: to_client, rx: from_client, serialize },
        InprocEndpoint { tx: to_server, rx: from_server, serialize },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::Map;

    #[test]
    fn both_modes_deliver_the_same_message() {
        let msg = Message::Model { round: 4, params: vec![0.1, -2.0], metadata: Map::new() };
        for serialize in [false, true] {
            let (server, client) = inproc_channel_pair(serialize);
            server.send(msg.clone()).unwrap();
            assert_eq!(client.recv().unwrap(), msg);
            client.send(Message::Ack).unwrap();
            assert_eq!(server.try_recv().unwrap(), Some(Message::Ack));
            assert_eq!(server.try_recv().unwrap(), None);
        }
    }

    #[test]
    fn dropped_peer_is_an_error() {
        let (server, client) = inproc_channel_pair(false);
        drop(client);
        assert!(server.send(Message::Ack).is_err());
        assert!(server.recv().is_err());
    }
}
