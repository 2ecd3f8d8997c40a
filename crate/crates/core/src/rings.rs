//! Per-connection TX/RX rings and the host completion queue.
//!
//! Each ring has exactly one host-side actor and one NIC-side actor. A slot
//! is stored as eight atomic words; word 0 carries the valid flag in its low
//! byte and is written last with release ordering, so a reader that observes
//! the flag with acquire ordering observes the whole line.
//!
//! The same types back the deterministic simulator (both sides driven from
//! one thread through [`TxRing`]/[`RxRing`]) and the threaded backend (sides
//! separated with `split`, each handle owned by one thread).

use crate::protocol::{decode_entry, RpcEntry, ENTRY_SIZE};
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use std::fmt::Write as _;
use std::sync::atomic::{AtomicU32, AtomicU64, AtomicUsize, Ordering};
use std::sync::Arc;
use thiserror::Error;

pub const DEFAULT_RING_DEPTH: usize = 64;
pub const DEFAULT_CQ_CAPACITY: usize = 4096;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RingError {
    #[error("all TX slots are outstanding")]
    WouldBlock,
    #[error("no free RX slot")]
    Backpressure,
    #[error("completion queue is full")]
    CompletionQueueFull,
    #[error("ring depth {0} is not a power of two >= 2")]
    InvalidDepth(usize),
    #[error("invalid ring state: {0}")]
    InvalidState(String),
}

const WORDS: usize = ENTRY_SIZE / 8;

struct AtomicSlot {
    words: [AtomicU64; WORDS],
}

impl AtomicSlot {
    fn new() -> Self {
        AtomicSlot {
            words: std::array::from_fn(|_| AtomicU64::new(0)),
        }
    }

    fn from_bytes(bytes: &[u8; ENTRY_SIZE]) -> Self {
        let s = Self::new();
        for (i, w) in s.words.iter().enumerate() {
            w.store(word_at(bytes, i), Ordering::Relaxed);
        }
        s
    }

    /// Writes the 63 non-flag bytes, then releases word 0 with the flag set.
    fn publish(&self, bytes: &[u8; ENTRY_SIZE]) {
        for i in 1..WORDS {
            self.words[i].store(word_at(bytes, i), Ordering::Relaxed);
        }
        self.words[0].store(word_at(bytes, 0) | 1, Ordering::Release);
    }

    fn is_valid(&self) -> bool {
        self.words[0].load(Ordering::Acquire) & 0xff == 1
    }

    fn load_valid(&self) -> Option<[u8; ENTRY_SIZE]> {
        let w0 = self.words[0].load(Ordering::Acquire);
        if w0 & 0xff != 1 {
            return None;
        }
        let mut out = [0u8; ENTRY_SIZE];
        out[..8].copy_from_slice(&w0.to_le_bytes());
        for i in 1..WORDS {
            out[i * 8..i * 8 + 8].copy_from_slice(&self.words[i].load(Ordering::Relaxed).to_le_bytes());
        }
        Some(out)
    }

    fn clear(&self) {
        self.words[0].store(0, Ordering::Release);
    }

    fn raw(&self) -> [u8; ENTRY_SIZE] {
        let mut out = [0u8; ENTRY_SIZE];
        for i in 0..WORDS {
            out[i * 8..i * 8 + 8].copy_from_slice(&self.words[i].load(Ordering::Acquire).to_le_bytes());
        }
        out
    }
}

fn word_at(bytes: &[u8; ENTRY_SIZE], i: usize) -> u64 {
    u64::from_le_bytes(bytes[i * 8..i * 8 + 8].try_into().unwrap())
}

/// Single-producer single-consumer ring of slot indices.
struct IndexRing {
    buf: Box<[AtomicU32]>,
    mask: usize,
    head: AtomicUsize,
    tail: AtomicUsize,
}

impl IndexRing {
    fn new(cap: usize) -> Self {
        IndexRing {
            buf: (0..cap).map(|_| AtomicU32::new(0)).collect(),
            mask: cap - 1,
            head: AtomicUsize::new(0),
            tail: AtomicUsize::new(0),
        }
    }

    fn push(&self, v: u32) -> bool {
        let head = self.head.load(Ordering::Relaxed);
        let tail = self.tail.load(Ordering::Acquire);
        if head.wrapping_sub(tail) > self.mask {
            return false;
        }
        self.buf[head & self.mask].store(v, Ordering::Relaxed);
        self.head.store(head.wrapping_add(1), Ordering::Release);
        true
    }

    fn pop(&self) -> Option<u32> {
        let tail = self.tail.load(Ordering::Relaxed);
        let head = self.head.load(Ordering::Acquire);
        if tail == head {
            return None;
        }
        let v = self.buf[tail & self.mask].load(Ordering::Relaxed);
        self.tail.store(tail.wrapping_add(1), Ordering::Release);
        Some(v)
    }

    fn len(&self) -> usize {
        let tail = self.tail.load(Ordering::Acquire);
        self.head.load(Ordering::Acquire).wrapping_sub(tail)
    }

    fn contents(&self) -> Vec<u32> {
        let tail = self.tail.load(Ordering::Acquire);
        let head = self.head.load(Ordering::Acquire);
        (tail..head)
            .map(|i| self.buf[i & self.mask].load(Ordering::Relaxed))
            .collect()
    }
}

fn check_depth(n: usize) -> Result<(), RingError> {
    if n < 2 || !n.is_power_of_two() || n > u32::MAX as usize {
        return Err(RingError::InvalidDepth(n));
    }
    Ok(())
}

struct SlotArray {
    slots: Box<[AtomicSlot]>,
    bookkeeping: IndexRing,
}

impl SlotArray {
    fn new(n: usize) -> Self {
        SlotArray {
            slots: (0..n).map(|_| AtomicSlot::new()).collect(),
            bookkeeping: IndexRing::new(n),
        }
    }

    fn depth(&self) -> usize {
        self.slots.len()
    }

    fn dump(&self) -> String {
        let mut out = String::from("idx,valid,conn,rpc,fn,len,crc\n");
        for (i, s) in self.slots.iter().enumerate() {
            let raw = s.raw();
            let crc = crc32fast::hash(&raw[1..]);
            let mut cleared = raw;
            cleared[0] = 0;
            match decode_entry(&cleared) {
                Ok(e) => {
                    let h = e.header;
                    let _ = writeln!(
                        out,
                        "{i},{},{},{},{},{},{crc:08x}",
                        raw[0],
                        h.connection_id,
                        h.rpc_id,
                        h.function_id,
                        e.payload_len()
                    );
                }
                Err(_) => {
                    let _ = writeln!(out, "{i},{},?,?,?,?,{crc:08x}", raw[0]);
                }
            }
        }
        out
    }
}

/// Serializable snapshot of one ring: slot bytes, queued bookkeeping
/// indices, and both sides' cursors.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RingState {
    pub slots: Vec<Vec<u8>>,
    pub bookkeeping: Vec<u32>,
    pub never_used: usize,
    pub cursor: usize,
    /// Per-slot flag held by the host side (owned TX slots / polled RX slots).
    pub host_marks: Vec<bool>,
    /// Per-slot flag held by the NIC side (fetched, not yet released TX slots).
    pub nic_marks: Vec<bool>,
    pub pending_release: Vec<usize>,
}

fn restore_slots(state: &RingState) -> Result<SlotArray, RingError> {
    let n = state.slots.len();
    check_depth(n)?;
    if state.host_marks.len() != n || state.nic_marks.len() != n || state.never_used > n {
        return Err(RingError::InvalidState("length mismatch".into()));
    }
    let slots = state
        .slots
        .iter()
        .map(|b| {
            let arr: [u8; ENTRY_SIZE] = b
                .as_slice()
                .try_into()
                .map_err(|_| RingError::InvalidState("slot is not 64 bytes".into()))?;
            Ok(AtomicSlot::from_bytes(&arr))
        })
        .collect::<Result<Box<[_]>, RingError>>()?;
    let bookkeeping = IndexRing::new(n);
    for &i in &state.bookkeeping {
        if i as usize >= n || !bookkeeping.push(i) {
            return Err(RingError::InvalidState("bad bookkeeping index".into()));
        }
    }
    Ok(SlotArray { slots, bookkeeping })
}

fn snapshot_slots(a: &SlotArray) -> (Vec<Vec<u8>>, Vec<u32>) {
    (
        a.slots.iter().map(|s| s.raw().to_vec()).collect(),
        a.bookkeeping.contents(),
    )
}

// ---------------------------------------------------------------- TX

/// Host side of a TX ring: acquires free slots and publishes requests.
pub struct TxHost {
    shared: Arc<SlotArray>,
    never_used: usize,
    owned: Vec<bool>,
}

/// NIC side of a TX ring: fetches dirty entries and releases them through
/// the completion ring.
pub struct TxNic {
    shared: Arc<SlotArray>,
    fetch_cursor: usize,
    fetched: Vec<bool>,
}

impl TxHost {
    pub fn depth(&self) -> usize {
        self.shared.depth()
    }

    /// Step 1: take a free slot, first from never-used slots, then from the
    /// completion ring.
    pub fn acquire(&mut self) -> Result<usize, RingError> {
        let slot = if self.never_used < self.depth() {
            self.never_used += 1;
            self.never_used - 1
        } else {
            self.shared.bookkeeping.pop().ok_or(RingError::WouldBlock)? as usize
        };
        debug_assert!(!self.owned[slot], "slot {slot} handed out twice");
        self.owned[slot] = true;
        Ok(slot)
    }

    /// Step 2: write the entry and flip its valid flag. The caller's
    /// `valid` bit is ignored.
    pub fn publish(&mut self, slot: usize, entry: &RpcEntry) {
        assert!(
            !cfg!(debug_assertions) || self.owned[slot],
            "contract violation: publish to slot {slot} which was not acquired"
        );
        self.owned[slot] = false;
        self.shared.slots[slot].publish(&entry.with_valid(true).encode());
    }

    pub fn owned_count(&self) -> usize {
        self.owned.iter().filter(|&&o| o).count()
    }
}

impl TxNic {
    pub fn depth(&self) -> usize {
        self.shared.depth()
    }

    /// Number of consecutive dirty, unfetched entries at the fetch cursor.
    pub fn dirty_pending(&self) -> usize {
        let n = self.depth();
        (0..n)
            .map(|k| (self.fetch_cursor + k) % n)
            .take_while(|&s| !self.fetched[s] && self.shared.slots[s].is_valid())
            .count()
    }

    /// Step 3: up to `max_batch` consecutive dirty entries, in publish order.
    pub fn fetch(&mut self, max_batch: usize) -> Vec<(usize, RpcEntry)> {
        assert!(max_batch >= 1, "batch must be at least 1");
        let n = self.depth();
        let mut out = Vec::new();
        while out.len() < max_batch {
            let s = self.fetch_cursor;
            if self.fetched[s] {
                break;
            }
            let Some(bytes) = self.shared.slots[s].load_valid() else {
                break;
            };
            let entry = decode_entry(&bytes).expect("published entries are well formed");
            self.fetched[s] = true;
            self.fetch_cursor = (s + 1) % n;
            out.push((s, entry));
        }
        out
    }

    /// Step 4: clear flags and return slots to the host.
    pub fn release(&mut self, slots: &[usize]) {
        for &s in slots {
            assert!(
                !cfg!(debug_assertions) || self.fetched[s],
                "contract violation: release of slot {s} which is not fetched"
            );
            self.fetched[s] = false;
            self.shared.slots[s].clear();
            let pushed = self.shared.bookkeeping.push(s as u32);
            debug_assert!(pushed, "completion ring overflow");
        }
    }

    pub fn fetched_count(&self) -> usize {
        self.fetched.iter().filter(|&&f| f).count()
    }
}

/// Both sides of a TX ring held together, for single-threaded use.
pub struct TxRing {
    pub host: TxHost,
    pub nic: TxNic,
}

impl TxRing {
    pub fn new(depth: usize) -> Result<Self, RingError> {
        check_depth(depth)?;
        let shared = Arc::new(SlotArray::new(depth));
        Ok(TxRing {
            host: TxHost {
                shared: shared.clone(),
                never_used: 0,
                owned: vec![false; depth],
            },
            nic: TxNic {
                shared,
                fetch_cursor: 0,
                fetched: vec![false; depth],
            },
        })
    }

    pub fn split(self) -> (TxHost, TxNic) {
        (self.host, self.nic)
    }

    pub fn depth(&self) -> usize {
        self.host.depth()
    }

    pub fn acquire(&mut self) -> Result<usize, RingError> {
        self.host.acquire()
    }

    pub fn publish(&mut self, slot: usize, entry: &RpcEntry) {
        self.host.publish(slot, entry)
    }

    pub fn fetch(&mut self, max_batch: usize) -> Vec<(usize, RpcEntry)> {
        self.nic.fetch(max_batch)
    }

    pub fn release(&mut self, slots: &[usize]) {
        self.nic.release(slots)
    }

    /// Slots that are owned, published or fetched (not yet returned).
    pub fn outstanding(&self) -> usize {
        self.host.never_used - self.host.shared.bookkeeping.len()
    }

    pub fn dump(&self) -> String {
        self.host.shared.dump()
    }

    pub fn snapshot(&self) -> RingState {
        let (slots, bookkeeping) = snapshot_slots(&self.host.shared);
        RingState {
            slots,
            bookkeeping,
            never_used: self.host.never_used,
            cursor: self.nic.fetch_cursor,
            host_marks: self.host.owned.clone(),
            nic_marks: self.nic.fetched.clone(),
            pending_release: Vec::new(),
        }
    }

    pub fn restore(state: &RingState) -> Result<Self, RingError> {
        let shared = Arc::new(restore_slots(state)?);
        if state.cursor >= shared.depth() {
            return Err(RingError::InvalidState("cursor out of range".into()));
        }
        Ok(TxRing {
            host: TxHost {
                shared: shared.clone(),
                never_used: state.never_used,
                owned: state.host_marks.clone(),
            },
            nic: TxNic {
                shared,
                fetch_cursor: state.cursor,
                fetched: state.nic_marks.clone(),
            },
        })
    }
}

// ---------------------------------------------------------------- RX

/// NIC side of an RX ring: writes received entries into free slots.
pub struct RxNic {
    shared: Arc<SlotArray>,
    never_used: usize,
}

/// Host side of an RX ring: polls entries in arrival order and returns
/// consumed slots to the NIC.
pub struct RxHost {
    shared: Arc<SlotArray>,
    poll_cursor: usize,
    polled: Vec<bool>,
    pending_release: VecDeque<usize>,
}

impl RxNic {
    pub fn depth(&self) -> usize {
        self.shared.depth()
    }

    /// True when a slot is available for the next delivery.
    pub fn has_free_slot(&self) -> bool {
        self.never_used < self.depth() || self.shared.bookkeeping.len() > 0
    }

    /// Step 5: write one entry into the next free slot. The host may have
    /// returned slots through bookkeeping (step 6) since the last call.
    pub fn deliver(&mut self, entry: &RpcEntry) -> Result<usize, RingError> {
        let slot = if self.never_used < self.depth() {
            self.never_used += 1;
            self.never_used - 1
        } else {
            self.shared.bookkeeping.pop().ok_or(RingError::Backpressure)? as usize
        };
        self.shared.slots[slot].publish(&entry.with_valid(true).encode());
        Ok(slot)
    }
}

impl RxHost {
    pub fn depth(&self) -> usize {
        self.shared.depth()
    }

    pub fn poll(&mut self) -> Option<(usize, RpcEntry)> {
        let s = self.poll_cursor;
        if self.polled[s] {
            return None;
        }
        let bytes = self.shared.slots[s].load_valid()?;
        let entry = decode_entry(&bytes).expect("delivered entries are well formed");
        self.polled[s] = true;
        self.pending_release.push_back(s);
        self.poll_cursor = (s + 1) % self.depth();
        Some((s, entry))
    }

    /// Returns a consumed slot. Slots must be released in poll order.
    pub fn release(&mut self, slot: usize) {
        assert!(
            !cfg!(debug_assertions) || self.pending_release.front() == Some(&slot),
            "contract violation: RX slot {slot} released out of poll order"
        );
        self.pending_release.pop_front();
        self.polled[slot] = false;
        self.shared.slots[slot].clear();
        let pushed = self.shared.bookkeeping.push(slot as u32);
        debug_assert!(pushed, "RX bookkeeping overflow");
    }

    pub fn unreleased(&self) -> usize {
        self.pending_release.len()
    }
}

pub struct RxRing {
    pub nic: RxNic,
    pub host: RxHost,
}

impl RxRing {
    pub fn new(depth: usize) -> Result<Self, RingError> {
        check_depth(depth)?;
        let shared = Arc::new(SlotArray::new(depth));
        Ok(RxRing {
            nic: RxNic {
                shared: shared.clone(),
                never_used: 0,
            },
            host: RxHost {
                shared,
                poll_cursor: 0,
                polled: vec![false; depth],
                pending_release: VecDeque::new(),
            },
        })
    }

    pub fn split(self) -> (RxNic, RxHost) {
        (self.nic, self.host)
    }

    pub fn depth(&self) -> usize {
        self.nic.depth()
    }

    pub fn deliver(&mut self, entry: &RpcEntry) -> Result<usize, RingError> {
        self.nic.deliver(entry)
    }

    pub fn poll(&mut self) -> Option<(usize, RpcEntry)> {
        self.host.poll()
    }

    pub fn release(&mut self, slot: usize) {
        self.host.release(slot)
    }

    pub fn dump(&self) -> String {
        self.nic.shared.dump()
    }

    pub fn snapshot(&self) -> RingState {
        let (slots, bookkeeping) = snapshot_slots(&self.nic.shared);
        RingState {
            slots,
            bookkeeping,
            never_used: self.nic.never_used,
            cursor: self.host.poll_cursor,
            host_marks: self.host.polled.clone(),
            nic_marks: vec![false; self.depth()],
            pending_release: self.host.pending_release.iter().copied().collect(),
        }
    }

    pub fn restore(state: &RingState) -> Result<Self, RingError> {
        let shared = Arc::new(restore_slots(state)?);
        if state.cursor >= shared.depth() {
            return Err(RingError::InvalidState("cursor out of range".into()));
        }
        Ok(RxRing {
            nic: RxNic {
                shared: shared.clone(),
                never_used: state.never_used,
            },
            host: RxHost {
                shared,
                poll_cursor: state.cursor,
                polled: state.host_marks.clone(),
                pending_release: state.pending_release.iter().copied().collect(),
            },
        })
    }
}

// ---------------------------------------------------------------- CQ

/// Host-side FIFO of finished async responses (step 7).
#[derive(Debug, Clone)]
pub struct CompletionQueue<T> {
    items: VecDeque<T>,
    capacity: usize,
}

impl<T> Default for CompletionQueue<T> {
    fn default() -> Self {
        Self::with_capacity(DEFAULT_CQ_CAPACITY)
    }
}

impl<T> CompletionQueue<T> {
    pub fn with_capacity(capacity: usize) -> Self {
        CompletionQueue {
            items: VecDeque::new(),
            capacity,
        }
    }

    pub fn push(&mut self, item: T) -> Result<(), RingError> {
        if self.items.len() >= self.capacity {
            return Err(RingError::CompletionQueueFull);
        }
        self.items.push_back(item);
        Ok(())
    }

    pub fn drain(&mut self) -> Vec<T> {
        self.items.drain(..).collect()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}
