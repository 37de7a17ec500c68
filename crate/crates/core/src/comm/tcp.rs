//! TCP server endpoint and client proxy.
//!
//! The endpoint only moves messages: it checks the auth token, then hands
//! every decoded request to the server agent through a command queue and
//! writes back whatever the agent answers.

use std::io::BufReader;
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{channel, Sender};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use serde_json::{Map, Value};

use crate::comm::codec::{read_frame, write_frame, FrameError, Message, ERR_AUTH, ERR_INTERNAL, ERR_PROTOCOL};
use crate::comm::update_to_message;
use crate::error::{Error, Result};
use crate::types::LocalUpdate;

/// Server-side re-check interval of a pending GET_MODEL.
pub const LONG_POLL_INTERVAL: Duration = Duration::from_millis(250);

/// The agent's answer to one request.
#[derive(Debug, Clone, PartialEq)]
pub enum Reply {
    Send(Message),
    /// Nothing to hand out yet; ask again after the poll interval.
    Wait,
    /// Send the message, then close the connection.
    Close(Message),
}

/// A request forwarded from a connection to the agent.
pub struct Request {
    pub msg: Message,
    pub reply: Sender<Reply>,
}

pub struct ServerEndpoint {
    listener: TcpListener,
    auth_token: String,
}

fn error_msg(code: u16, text: impl Into<String>) -> Message {
    Message::Error { code, text: text.into() }
}

impl ServerEndpoint {
    pub fn bind(addr: impl ToSocketAddrs, auth_token: &str) -> Result<Self> {
        let listener = TcpListener::bind(addr)?;
        Ok(Self { listener, auth_token: auth_token.to_string() })
    }

    pub fn local_addr(&self) -> Result<SocketAddr> {
        Ok(self.listener.local_addr()?)
    }

    /// Accepts connections until `stop` is raised, one thread per connection.
    pub fn spawn(self, queue: Sender<Request>, stop: Arc<AtomicBool>) -> Result<JoinHandle<()>> {
        self.listener.set_nonblocking(true)?;
        let token = Arc::new(self.auth_token);
        let listener = self.listener;
        Ok(thread::spawn(move || {
            while !stop.load(Ordering::SeqCst) {
                match listener.accept() {
                    Ok((stream, peer)) => {
                        let queue = queue.clone();
                        let token = Arc::clone(&token);
                        let stop = Arc::clone(&stop);
                        thread::spawn(move || {
                            if let Err(e) = serve_connection(stream, &token, &queue, &stop) {
                                log::debug!("connection {peer} ended: {e}");
                            }
                        });
                    }
                    Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => thread::sleep(Duration::from_millis(10)),
                    Err(e) => {
                        log::warn!("accept failed: {e}");
                        thread::sleep(Duration::from_millis(10));
                    }
                }
            }
        }))
    }
}

fn ask(queue: &Sender<Request>, msg: Message) -> Reply {
    let (tx, rx) = channel();
    if queue.send(Request { msg, reply: tx }).is_err() {
        return Reply::Close(error_msg(ERR_INTERNAL, "server is shutting down"));
    }
    rx.recv().unwrap_or_else(|_| Reply::Close(error_msg(ERR_INTERNAL, "server is shutting down")))
}

fn serve_connection(stream: TcpStream, token: &str, queue: &Sender<Request>, stop: &AtomicBool) -> Result<()> {
    stream.set_nonblocking(false)?;
    stream.set_nodelay(true)?;
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut writer = stream;
    let mut client_id: Option<u32> = None;
    loop {
        let msg = match read_frame(&mut reader) {
            Ok(m) => m,
            Err(FrameError::Io(e)) => return Err(e.into()),
            Err(FrameError::Decode(e)) => {
                write_frame(&mut writer, &error_msg(ERR_PROTOCOL, e.to_string()))?;
                return Err(e.into());
            }
        };
        let reply = match (&msg, client_id) {
            (Message::Register { auth_token, .. }, _) if auth_token != token => {
                Reply::Close(error_msg(ERR_AUTH, "authentication failed"))
            }
            (Message::Register { .. }, _) => ask(queue, msg),
            (_, None) => Reply::Close(error_msg(ERR_AUTH, "register before sending other messages")),
            (Message::GetModel { client_id: c }, Some(id)) | (Message::Update { client_id: c, .. }, Some(id))
                if *c != id =>
            {
                Reply::Close(error_msg(ERR_PROTOCOL, format!("connection is registered as client {id}, not {c}")))
            }
            (Message::GetModel { .. }, Some(_)) => loop {
                match ask(queue, msg.clone()) {
                    Reply::Wait if !stop.load(Ordering::SeqCst) => thread::sleep(LONG_POLL_INTERVAL),
                    Reply::Wait => break Reply::Close(error_msg(ERR_INTERNAL, "server is shutting down")),
                    other => break other,
                }
            },
            (Message::Update { .. }, Some(_)) => ask(queue, msg),
            (other, Some(_)) => Reply::Close(error_msg(ERR_PROTOCOL, format!("unexpected {} from a client", other.name()))),
        };
        match reply {
            Reply::Send(m) => {
                if let Message::RegisterAck { client_id: id, .. } = m {
                    client_id = Some(id);
                }
                write_frame(&mut writer, &m)?;
            }
            Reply::Close(m) => {
                write_frame(&mut writer, &m)?;
                return Ok(());
            }
            Reply::Wait => unreachable!("waits are resolved above"),
        }
    }
}

/// Exponential backoff for transient connection failures.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base: Duration,
    pub factor: u32,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { max_attempts: 5, base: Duration::from_millis(200), factor: 2 }
    }
}

impl RetryPolicy {
    /// Pause before attempt `attempt` (0-based; the first attempt has none).
    pub fn delay(&self, attempt: u32) -> Duration {
        if attempt == 0 {
            Duration::ZERO
        } else {
            self.base * self.factor.pow(attempt - 1)
        }
    }
}

/// Result of a model fetch.
#[derive(Debug, Clone, PartialEq)]
pub enum Fetched {
    Model { round: u32, params: Vec<f64>, metadata: Map<String, Value> },
    Done { final_round: u32 },
}

enum Failure {
    Transient(String),
    Fatal(Error),
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Transient(e.to_string())
    }
}

/// Client-side network access to the server.
///
/// One persistent connection, re-established and re-registered after
/// transient failures.
pub struct ClientProxy {
    addr: String,
    auth_token: String,
    name: String,
    retry: RetryPolicy,
    conn: Option<(BufReader<TcpStream>, TcpStream)>,
    client_id: Option<u32>,
    finished: Option<u32>,
}

impl ClientProxy {
    pub fn new(addr: impl Into<String>, auth_token: &str, name: &str) -> Self {
        Self {
            addr: addr.into(),
            auth_token: auth_token.to_string(),
            name: name.to_string(),
            retry: RetryPolicy::default(),
            conn: None,
            client_id: None,
            finished: None,
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn client_id(&self) -> Option<u32> {
        self.client_id
    }

    /// Registers and returns the assigned id and the server's config digest.
    pub fn register(&mut self) -> Result<(u32, [u8; 32])> {
        let msg = Message::Register { auth_token: self.auth_token.clone(), client_name: self.name.clone() };
        match self.exchange(msg)? {
            Message::RegisterAck { client_id, digest } => {
                self.client_id = Some(client_id);
                Ok((client_id, digest))
            }
            other => Err(Error::Protocol(format!("expected REGISTER_ACK, got {}", other.name()))),
        }
    }

    /// Blocks until the server hands out a model or declares the run over.
    /// After DONE no further requests are made.
    pub fn fetch_model(&mut self) -> Result<Fetched> {
        if let Some(final_round) = self.finished {
            return Ok(Fetched::Done { final_round });
        }
        let id = self.registered()?;
        match self.exchange(Message::GetModel { client_id: id })? {
            Message::Model { round, params, metadata } => Ok(Fetched::Model { round, params, metadata }),
            Message::Done { final_round } => {
                self.finished = Some(final_round);
                self.conn = None;
                Ok(Fetched::Done { final_round })
            }
            other => Err(Error::Protocol(format!("expected MODEL or DONE, got {}", other.name()))),
        }
    }

    pub fn submit_update(&mut self, update: &LocalUpdate) -> Result<()> {
        self.registered()?;
        match self.exchange(update_to_message(update))? {
            Message::Ack => Ok(()),
            other => Err(Error::Protocol(format!("expected ACK, got {}", other.name()))),
        }
    }

    fn registered(&self) -> Result<u32> {
        self.client_id.ok_or_else(|| Error::Protocol("client is not registered".into()))
    }

    fn exchange(&mut self, msg: Message) -> Result<Message> {
        let mut last = String::new();
        for attempt in 0..self.retry.max_attempts {
            thread::sleep(self.retry.delay(attempt));
            match self.try_exchange(&msg) {
                Ok(reply) => return Ok(reply),
                Err(Failure::Fatal(e)) => {
                    self.conn = None;
                    return Err(e);
                }
                Err(Failure::Transient(e)) => {
                    log::debug!("attempt {} to reach {} failed: {e}", attempt + 1, self.addr);
                    self.conn = None;
                    last = e;
                }
            }
        }
        Err(Error::RetryExhausted { attempts: self.retry.max_attempts, last })
    }

    fn try_exchange(&mut self, msg: &Message) -> std::result::Result<Message, Failure> {
        if self.conn.is_none() {
            let stream = TcpStream::connect(&self.addr)?;
            stream.set_nodelay(true)?;
            self.conn = Some((BufReader::new(stream.try_clone()?), stream));
            let is_register = matches!(msg, Message::Register { .. });
            if let (Some(id), false) = (self.client_id, is_register) {
                let hello = Message::Register { auth_token: self.auth_token.clone(), client_name: self.name.clone() };
                match self.round_trip(&hello)? {
                    Message::RegisterAck { client_id, .. } if client_id == id => {}
                    Message::RegisterAck { client_id, .. } => {
                        return Err(Failure::Fatal(Error::Protocol(format!(
                            "re-registration assigned id {client_id}, expected {id}"
                        ))))
                    }
                    other => {
                        return Err(Failure::Fatal(Error::Protocol(format!("expected REGISTER_ACK, got {}", other.name()))))
                    }
                }
            }
        }
        self.round_trip(msg)
    }

    fn round_trip(&mut self, msg: &Message) -> std::result::Result<Message, Failure> {
        let (reader, writer) = self.conn.as_mut().expect("connected above");
        write_frame(writer, msg)?;
        let reply = match read_frame(reader) {
            Ok(m) => m,
            Err(FrameError::Io(e)) => return Err(e.into()),
            Err(FrameError::Decode(e)) => return Err(Failure::Fatal(e.into())),
        };
        match reply {
            Message::Error { code: ERR_AUTH, text } => Err(Failure::Fatal(Error::Auth(text))),
            Message::Error { code, text } => Err(Failure::Fatal(Error::Remote { code, message: text })),
            other => Ok(other),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backoff_schedule() {
        let p = RetryPolicy::default();
        let ms: Vec<u128> = (0..5).map(|a| p.delay(a).as_millis()).collect();
        assert_eq!(ms, vec![0, 200, 400, 800, 1600]);
    }

    #[test]
    fn unreachable_server_exhausts_retries() {
        let addr = {
            let l = TcpListener::bind("127.0.0.1:0").unwrap();
            l.local_addr().unwrap()
        };
        let fast = RetryPolicy { max_attempts: 3, base: Duration::from_millis(1), factor: 2 };
        let mut proxy = ClientProxy::new(addr.to_string(), "t", "0").with_retry(fast);
        match proxy.register() {
            Err(Error::RetryExhausted { attempts: 3, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }
}
