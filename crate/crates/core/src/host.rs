//! Client and server endpoints: the application side of a connection.

use crate::protocol::{EntryKind, NicId, ProtocolError, RpcEntry, ThreadingModel, MAX_PAYLOAD};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HostError {
    #[error("payload of {0} bytes exceeds {MAX_PAYLOAD}")]
    PayloadTooLarge(usize),
    #[error("TX ring full")]
    WouldBlock,
    #[error("handler error: {0}")]
    HandlerError(String),
    #[error("no route to {0:?}")]
    UnknownDestination(NicId),
    #[error("no connection ids or rings left")]
    ResourceExhausted,
    #[error("handler for function {0} already registered")]
    DuplicateHandler(u16),
    #[error("completion for unknown rpc {rpc} on connection {conn}")]
    UnexpectedCompletion { conn: u16, rpc: u32 },
    #[error("endpoint is {0:?}, call needs the other threading model")]
    ThreadingMismatch(ThreadingModel),
    #[error("sync endpoint already has an RPC outstanding")]
    SyncBusy,
    #[error("no connection with id {0}")]
    UnknownConnection(u16),
    #[error("simulated time budget exhausted waiting for rpc {0}")]
    Timeout(u32),
    #[error("invalid connection setup: {0}")]
    InvalidConfig(String),
}

impl From<ProtocolError> for HostError {
    fn from(e: ProtocolError) -> Self {
        match e {
            ProtocolError::PayloadTooLarge(n) => HostError::PayloadTooLarge(n),
            other => HostError::HandlerError(other.to_string()),
        }
    }
}

/// A finished RPC as seen by the client.
#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub conn: u16,
    pub rpc_id: u32,
    pub issue_ts: f64,
    pub complete_ts: f64,
    pub result: Result<Vec<u8>, String>,
}

impl Completion {
    pub fn latency_ns(&self) -> f64 {
        self.complete_ts - self.issue_ts
    }
}

#[derive(Debug, Clone)]
pub struct ClientEndpoint {
    pub conn: u16,
    pub model: ThreadingModel,
    limit: usize,
    pending: BTreeMap<u32, f64>,
    blocked_on: Option<u32>,
    last_completed: Option<u32>,
    fifo_violations: u64,
    completed: u64,
}

impl ClientEndpoint {
    /// `ring_depth` bounds async outstanding; sync endpoints allow one.
    pub fn new(conn: u16, model: ThreadingModel, ring_depth: usize) -> Self {
        ClientEndpoint {
            conn,
            model,
            limit: match model {
                ThreadingModel::Sync => 1,
                ThreadingModel::Async => ring_depth,
            },
            pending: BTreeMap::new(),
            blocked_on: None,
            last_completed: None,
            fifo_violations: 0,
            completed: 0,
        }
    }

    pub fn outstanding(&self) -> usize {
        self.pending.len()
    }

    pub fn can_issue(&self) -> bool {
        self.pending.len() < self.limit
    }

    pub fn blocked_on(&self) -> Option<u32> {
        self.blocked_on
    }

    /// Builds the request entry and records it as pending.
    pub fn begin(&mut self, rpc_id: u32, function_id: u16, payload: &[u8], now: f64) -> Result<RpcEntry, HostError> {
        if !self.can_issue() {
            return Err(match self.model {
                ThreadingModel::Sync => HostError::SyncBusy,
                ThreadingModel::Async => HostError::WouldBlock,
            });
        }
        let entry = RpcEntry::request(self.conn, rpc_id, function_id, payload)?;
        let prev = self.pending.insert(rpc_id, now);
        assert!(prev.is_none(), "rpc id {rpc_id} reused while outstanding");
        if self.model == ThreadingModel::Sync {
            self.blocked_on = Some(rpc_id);
        }
        Ok(entry)
    }

    /// Matches a response by (connection, rpc id).
    pub fn complete(&mut self, entry: &RpcEntry, now: f64) -> Result<Completion, HostError> {
        let h = entry.header;
        let issue_ts = match (h.connection_id == self.conn, self.pending.remove(&h.rpc_id)) {
            (true, Some(ts)) => ts,
            _ => {
                return Err(HostError::UnexpectedCompletion {
                    conn: h.connection_id,
                    rpc: h.rpc_id,
                })
            }
        };
        if let Some(prev) = self.last_completed {
            if h.rpc_id != prev.wrapping_add(1) {
                self.fifo_violations += 1;
            }
        }
        self.last_completed = Some(h.rpc_id);
        self.completed += 1;
        if self.blocked_on == Some(h.rpc_id) {
            self.blocked_on = None;
        }
        let result = match h.kind {
            EntryKind::Response => Ok(entry.payload().to_vec()),
            _ => Err(String::from_utf8_lossy(entry.payload()).into_owned()),
        };
        Ok(Completion {
            conn: self.conn,
            rpc_id: h.rpc_id,
            issue_ts,
            complete_ts: now,
            result,
        })
    }

    /// Completions that did not follow their predecessor's rpc id.
    pub fn fifo_violations(&self) -> u64 {
        self.fifo_violations
    }

    pub fn completed(&self) -> u64 {
        self.completed
    }
}

pub type Handler = Box<dyn FnMut(&[u8]) -> Result<Vec<u8>, String> + Send>;

pub const ECHO_FN: u16 = 0;

pub const ECHO_PAYLOAD_LEN: usize = 32;

/// Echo request body: connection id, sequence number, and a CRC32 of the
/// first 28 bytes in the last four.
pub fn echo_payload(conn: u16, seq: u64) -> [u8; ECHO_PAYLOAD_LEN] {
    let mut p = [0u8; ECHO_PAYLOAD_LEN];
    p[..2].copy_from_slice(&conn.to_le_bytes());
    p[2..10].copy_from_slice(&seq.to_le_bytes());
    let crc = crc32fast::hash(&p[..28]);
    p[28..].copy_from_slice(&crc.to_le_bytes());
    p
}

/// Inverse of [`echo_payload`]; `None` when the length or checksum is off.
pub fn check_echo_payload(p: &[u8]) -> Option<(u16, u64)> {
    if p.len() != ECHO_PAYLOAD_LEN || crc32fast::hash(&p[..28]).to_le_bytes() != p[28..] {
        return None;
    }
    Some((
        u16::from_le_bytes([p[0], p[1]]),
        u64::from_le_bytes(p[2..10].try_into().expect("8 bytes")),
    ))
}

/// Function-id dispatch for one server connection.
#[derive(Default)]
pub struct ServerEndpoint {
    handlers: BTreeMap<u16, Handler>,
    served: u64,
    errors: u64,
}

impl std::fmt::Debug for ServerEndpoint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ServerEndpoint")
            .field("functions", &self.handlers.keys().collect::<Vec<_>>())
            .field("served", &self.served)
            .finish()
    }
}

impl ServerEndpoint {
    pub fn new() -> Self {
        Self::default()
    }

    /// A server with the echo handler on function 0.
    pub fn echo() -> Self {
        let mut s = Self::new();
        s.register_handler(ECHO_FN, Box::new(|p: &[u8]| Ok(p.to_vec())))
            .expect("fresh table");
        s
    }

    pub fn register_handler(&mut self, function_id: u16, handler: Handler) -> Result<(), HostError> {
        if self.handlers.contains_key(&function_id) {
            return Err(HostError::DuplicateHandler(function_id));
        }
        self.handlers.insert(function_id, handler);
        Ok(())
    }

    /// Exactly one reply per request; failures become error-kind entries.
    pub fn handle(&mut self, request: &RpcEntry) -> RpcEntry {
        self.served += 1;
        let fn_id = request.header.function_id;
        let outcome = match self.handlers.get_mut(&fn_id) {
            None => Err(format!("unknown function {fn_id}")),
            Some(h) => h(request.payload()),
        };
        let reply = match outcome {
            Ok(body) if body.len() <= MAX_PAYLOAD => request.reply(EntryKind::Response, &body),
            Ok(body) => request.reply(
                EntryKind::Error,
                format!("reply of {} bytes too large", body.len()).as_bytes(),
            ),
            Err(msg) => {
                let mut m = msg.into_bytes();
                m.truncate(MAX_PAYLOAD);
                request.reply(EntryKind::Error, &m)
            }
        };
        let reply = reply.expect("reply payload fits");
        if reply.header.kind == EntryKind::Error {
            self.errors += 1;
        }
        reply
    }

    pub fn served(&self) -> u64 {
        self.served
    }

    pub fn errors(&self) -> u64 {
        self.errors
    }
}
