//! RPC entry wire layout and the connection flow table.
//!
//! Every bus transaction moves exactly one 64-byte entry. The layout is
//! little-endian and fixed:
//!
//! | offset | size | field           |
//! |--------|------|-----------------|
//! | 0      | 1    | `valid_flag`    |
//! | 1      | 1    | `kind`          |
//! | 2      | 2    | `connection_id` |
//! | 4      | 4    | `rpc_id`        |
//! | 8      | 2    | `function_id`   |
//! | 10     | 1    | `payload_len`   |
//! | 11     | 5    | reserved (zero) |
//! | 16     | 48   | payload         |
//!
//! The valid flag sits in byte 0 so a polling reader inspects a single
//! leading byte before touching the rest of the line.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use thiserror::Error;

pub const ENTRY_SIZE: usize = 64;
pub const HEADER_SIZE: usize = 16;
pub const MAX_PAYLOAD: usize = ENTRY_SIZE - HEADER_SIZE;

const _: () = assert!(ENTRY_SIZE == 64 && MAX_PAYLOAD == 48);

pub(crate) const OFF_VALID: usize = 0;
pub(crate) const OFF_KIND: usize = 1;
pub(crate) const OFF_CONN: usize = 2;
pub(crate) const OFF_RPC: usize = 4;
pub(crate) const OFF_FN: usize = 8;
pub(crate) const OFF_LEN: usize = 10;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ProtocolError {
    #[error("payload of {0} bytes exceeds the {MAX_PAYLOAD}-byte entry capacity")]
    PayloadTooLarge(usize),
    #[error("malformed entry: {0}")]
    MalformedEntry(String),
    #[error("connection {0} is already registered")]
    DuplicateConnection(u16),
    #[error("ring pair {0:?} is already bound to another connection")]
    RingPairInUse(RingPairHandle),
    #[error("connection {0} not found")]
    NotFound(u16),
}

/// Direction of an entry. `Error` is a response carrying a handler failure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum EntryKind {
    Request = 0,
    Response = 1,
    Error = 2,
}

impl EntryKind {
    pub fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(EntryKind::Request),
            1 => Some(EntryKind::Response),
            2 => Some(EntryKind::Error),
            _ => None,
        }
    }

    pub fn is_response(self) -> bool {
        !matches!(self, EntryKind::Request)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct EntryHeader {
    pub valid: bool,
    pub kind: EntryKind,
    pub connection_id: u16,
    pub rpc_id: u32,
    pub function_id: u16,
}

/// One decoded cache-line slot.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct RpcEntry {
    pub header: EntryHeader,
    len: u8,
    payload: [u8; MAX_PAYLOAD],
}

impl std::fmt::Debug for RpcEntry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RpcEntry")
            .field("header", &self.header)
            .field("payload", &self.payload())
            .finish()
    }
}

impl RpcEntry {
    pub fn new(header: EntryHeader, payload: &[u8]) -> Result<Self, ProtocolError> {
        if payload.len() > MAX_PAYLOAD {
            return Err(ProtocolError::PayloadTooLarge(payload.len()));
        }
        let mut buf = [0u8; MAX_PAYLOAD];
        buf[..payload.len()].copy_from_slice(payload);
        Ok(RpcEntry {
            header,
            len: payload.len() as u8,
            payload: buf,
        })
    }

    pub fn request(conn: u16, rpc_id: u32, function_id: u16, payload: &[u8]) -> Result<Self, ProtocolError> {
        Self::new(
            EntryHeader {
                valid: true,
                kind: EntryKind::Request,
                connection_id: conn,
                rpc_id,
                function_id,
            },
            payload,
        )
    }

    /// Response to `self` with the same connection and rpc ids.
    pub fn reply(&self, kind: EntryKind, payload: &[u8]) -> Result<Self, ProtocolError> {
        Self::new(EntryHeader { kind, ..self.header }, payload)
    }

    pub fn payload(&self) -> &[u8] {
        &self.payload[..self.len as usize]
    }

    pub fn payload_len(&self) -> usize {
        self.len as usize
    }

    pub fn with_valid(mut self, valid: bool) -> Self {
        self.header.valid = valid;
        self
    }

    pub fn encode(&self) -> [u8; ENTRY_SIZE] {
        encode_entry(&self.header, self.payload()).expect("payload length is bounded at construction")
    }

    /// CRC32 over the 63 non-flag bytes, used by dumps and stress checks.
    pub fn crc(&self) -> u32 {
        crc32fast::hash(&self.encode()[1..])
    }
}

pub fn encode_entry(header: &EntryHeader, payload: &[u8]) -> Result<[u8; ENTRY_SIZE], ProtocolError> {
    if payload.len() > MAX_PAYLOAD {
        return Err(ProtocolError::PayloadTooLarge(payload.len()));
    }
    let mut out = [0u8; ENTRY_SIZE];
    out[OFF_VALID] = header.valid as u8;
    out[OFF_KIND] = header.kind as u8;
    out[OFF_CONN..OFF_CONN + 2].copy_from_slice(&header.connection_id.to_le_bytes());
    out[OFF_RPC..OFF_RPC + 4].copy_from_slice(&header.rpc_id.to_le_bytes());
    out[OFF_FN..OFF_FN + 2].copy_from_slice(&header.function_id.to_le_bytes());
    out[OFF_LEN] = payload.len() as u8;
    out[HEADER_SIZE..HEADER_SIZE + payload.len()].copy_from_slice(payload);
    Ok(out)
}

pub fn decode_entry(block: &[u8]) -> Result<RpcEntry, ProtocolError> {
    if block.len() != ENTRY_SIZE {
        return Err(ProtocolError::MalformedEntry(format!(
            "expected {ENTRY_SIZE} bytes, got {}",
            block.len()
        )));
    }
    let valid = match block[OFF_VALID] {
        0 => false,
        1 => true,
        b => return Err(ProtocolError::MalformedEntry(format!("valid flag {b:#04x}"))),
    };
    let kind = EntryKind::from_byte(block[OFF_KIND])
        .ok_or_else(|| ProtocolError::MalformedEntry(format!("kind byte {:#04x}", block[OFF_KIND])))?;
    let len = block[OFF_LEN] as usize;
    if len > MAX_PAYLOAD {
        return Err(ProtocolError::MalformedEntry(format!("payload_len {len}")));
    }
    let header = EntryHeader {
        valid,
        kind,
        connection_id: u16::from_le_bytes([block[OFF_CONN], block[OFF_CONN + 1]]),
        rpc_id: u32::from_le_bytes(block[OFF_RPC..OFF_RPC + 4].try_into().unwrap()),
        function_id: u16::from_le_bytes([block[OFF_FN], block[OFF_FN + 1]]),
    };
    RpcEntry::new(header, &block[HEADER_SIZE..HEADER_SIZE + len])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NicId(pub u16);

/// Opaque index of a provisioned TX/RX ring pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RingPairHandle(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThreadingModel {
    Sync,
    Async,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConnectionRecord {
    pub connection_id: u16,
    pub local_nic: NicId,
    pub remote_nic: NicId,
    pub ring_pair: RingPairHandle,
    pub threading_model: ThreadingModel,
    pub next_rpc_id: u32,
}

impl ConnectionRecord {
    /// Hands out the next rpc id; wraps at 2^32.
    pub fn allocate_rpc_id(&mut self) -> u32 {
        let id = self.next_rpc_id;
        self.next_rpc_id = self.next_rpc_id.wrapping_add(1);
        id
    }
}

/// Connection id to record, iterated in registration order.
#[derive(Debug, Default, Clone)]
pub struct FlowTable {
    records: IndexMap<u16, ConnectionRecord>,
    ring_pairs: HashSet<RingPairHandle>,
}

impl FlowTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, record: ConnectionRecord) -> Result<u16, ProtocolError> {
        let id = record.connection_id;
        if self.records.contains_key(&id) {
            return Err(ProtocolError::DuplicateConnection(id));
        }
        if self.ring_pairs.contains(&record.ring_pair) {
            return Err(ProtocolError::RingPairInUse(record.ring_pair));
        }
        self.ring_pairs.insert(record.ring_pair);
        self.records.insert(id, record);
        Ok(id)
    }

    pub fn lookup(&self, id: u16) -> Result<&ConnectionRecord, ProtocolError> {
        self.records.get(&id).ok_or(ProtocolError::NotFound(id))
    }

    pub fn lookup_mut(&mut self, id: u16) -> Result<&mut ConnectionRecord, ProtocolError> {
        self.records.get_mut(&id).ok_or(ProtocolError::NotFound(id))
    }

    pub fn remove(&mut self, id: u16) -> Result<ConnectionRecord, ProtocolError> {
        let rec = self.records.shift_remove(&id).ok_or(ProtocolError::NotFound(id))?;
        self.ring_pairs.remove(&rec.ring_pair);
        Ok(rec)
    }

    pub fn iter(&self) -> impl Iterator<Item = &ConnectionRecord> {
        self.records.values()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hdr(kind: EntryKind, conn: u16, rpc: u32, func: u16) -> EntryHeader {
        EntryHeader {
            valid: true,
            kind,
            connection_id: conn,
            rpc_id: rpc,
            function_id: func,
        }
    }

    #[test]
    fn ping_entry_sets_leading_valid_byte() {
        let block = encode_entry(&hdr(EntryKind::Request, 1, 7, 0), b"ping").unwrap();
        assert_eq!(block.len(), 64);
        assert_eq!(block[0], 1);
        assert_eq!(block[10], 4);
        assert_eq!(&block[16..20], b"ping");
        let back = decode_entry(&block).unwrap();
        assert_eq!(back.header, hdr(EntryKind::Request, 1, 7, 0));
        assert_eq!(back.payload(), b"ping");
    }

    #[test]
    fn empty_payload() {
        let block = encode_entry(&hdr(EntryKind::Response, 9, 1, 3), &[]).unwrap();
        assert_eq!(block[10], 0);
        assert_eq!(decode_entry(&block).unwrap().payload_len(), 0);
    }

    #[test]
    fn zero_block_is_free_slot() {
        let e = decode_entry(&[0u8; 64]).unwrap();
        assert!(!e.header.valid);
        assert_eq!(e.payload_len(), 0);
    }

    #[test]
    fn payload_bounds() {
        assert_eq!(
            encode_entry(&hdr(EntryKind::Request, 0, 0, 0), &[0u8; 49]),
            Err(ProtocolError::PayloadTooLarge(49))
        );
        assert!(encode_entry(&hdr(EntryKind::Request, 0, 0, 0), &[0u8; 48]).is_ok());
        let mut block = [0u8; 64];
        block[10] = 49;
        assert!(matches!(decode_entry(&block), Err(ProtocolError::MalformedEntry(_))));
    }

    #[test]
    fn unknown_kind_and_bad_length_rejected() {
        let mut block = [0u8; 64];
        block[1] = 7;
        assert!(matches!(decode_entry(&block), Err(ProtocolError::MalformedEntry(_))));
        assert!(matches!(
            decode_entry(&[0u8; 63]),
            Err(ProtocolError::MalformedEntry(_))
        ));
    }

    fn record(id: u16, ring: usize) -> ConnectionRecord {
        ConnectionRecord {
            connection_id: id,
            local_nic: NicId(0),
            remote_nic: NicId(1),
            ring_pair: RingPairHandle(ring),
            threading_model: ThreadingModel::Async,
            next_rpc_id: 0,
        }
    }

    #[test]
    fn flow_register_lookup() {
        let mut t = FlowTable::new();
        assert_eq!(t.lookup(999), Err(ProtocolError::NotFound(999)));
        t.register(record(3, 0)).unwrap();
        assert_eq!(t.lookup(3).unwrap(), &record(3, 0));
        assert_eq!(t.register(record(3, 1)), Err(ProtocolError::DuplicateConnection(3)));
        assert_eq!(
            t.register(record(4, 0)),
            Err(ProtocolError::RingPairInUse(RingPairHandle(0)))
        );
    }

    #[test]
    fn hundred_connections_distinct_ring_pairs() {
        let mut t = FlowTable::new();
        for i in 0..100 {
            t.register(record(i, i as usize)).unwrap();
        }
        let rings: HashSet<_> = t.iter().map(|r| r.ring_pair).collect();
        assert_eq!(rings.len(), 100);
        let order: Vec<u16> = t.iter().map(|r| r.connection_id).collect();
        assert_eq!(order, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn rpc_id_wraps() {
        let mut r = record(1, 1);
        r.next_rpc_id = u32::MAX;
        assert_eq!(r.allocate_rpc_id(), u32::MAX);
        assert_eq!(r.allocate_rpc_id(), 0);
    }
}
