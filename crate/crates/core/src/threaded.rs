//! Real-threads echo: client, two NICs and a server on their own OS
//! threads, sharing the same ring types as the simulator.
//!
//! Each NIC thread owns the NIC halves of its host's rings; the wire is a
//! pair of channels. Every thread spins with `yield_now`, so the run also
//! completes on a single CPU.

use crate::host::{check_echo_payload, echo_payload, ServerEndpoint};
use crate::protocol::{EntryKind, RpcEntry};
use crate::rings::{RingError, RxHost, RxNic, RxRing, TxHost, TxNic, TxRing};
use std::collections::VecDeque;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{channel, Receiver, Sender, TryRecvError};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StressConfig {
    pub rpcs: u64,
    pub ring_depth: usize,
    pub batch: usize,
    pub conn: u16,
}

impl Default for StressConfig {
    fn default() -> Self {
        StressConfig {
            rpcs: 1_000_000,
            ring_depth: 64,
            batch: 16,
            conn: 1,
        }
    }
}

/// Counts from the client's point of view. Wall time is informational.
#[derive(Debug, Clone, PartialEq)]
pub struct StressReport {
    pub issued: u64,
    pub received: u64,
    pub lost: u64,
    pub duplicated: u64,
    pub corrupted: u64,
    pub fifo_violations: u64,
    pub server_served: u64,
    pub elapsed: Duration,
}

impl StressReport {
    pub fn ok(&self) -> bool {
        self.issued == self.received
            && self.lost == 0
            && self.duplicated == 0
            && self.corrupted == 0
            && self.fifo_violations == 0
            && self.server_served == self.issued
    }
}

/// NIC loop: TX ring -> wire, wire -> RX ring, until `stop`.
fn nic_loop(
    mut tx: TxNic,
    mut rx: RxNic,
    out: Sender<RpcEntry>,
    inp: Receiver<RpcEntry>,
    batch: usize,
    stop: Arc<AtomicBool>,
) {
    let mut backlog: VecDeque<RpcEntry> = VecDeque::new();
    let mut wire_open = true;
    while !stop.load(Ordering::Acquire) {
        let mut progressed = false;
        let got = tx.fetch(batch);
        if !got.is_empty() {
            progressed = true;
            let slots: Vec<usize> = got.iter().map(|&(s, _)| s).collect();
            for (_, e) in got {
                if out.send(e).is_err() {
                    return;
                }
            }
            tx.release(&slots);
        }
        while wire_open && backlog.len() < batch {
            match inp.try_recv() {
                Ok(e) => backlog.push_back(e),
                Err(TryRecvError::Empty) => break,
                Err(TryRecvError::Disconnected) => wire_open = false,
            }
        }
        while let Some(e) = backlog.front() {
            match rx.deliver(e) {
                Ok(_) => {
                    backlog.pop_front();
                    progressed = true;
                }
                Err(RingError::Backpressure) => break,
                Err(e) => panic!("deliver: {e}"),
            }
        }
        if !progressed {
            thread::yield_now();
        }
    }
}

fn server_loop(mut rx: RxHost, mut tx: TxHost, total: u64) -> u64 {
    let mut server = ServerEndpoint::echo();
    while server.served() < total {
        let Some((slot, req)) = rx.poll() else {
            thread::yield_now();
            continue;
        };
        let reply = server.handle(&req);
        rx.release(slot);
        let s = loop {
            match tx.acquire() {
                Ok(s) => break s,
                Err(_) => thread::yield_now(),
            }
        };
        tx.publish(s, &reply);
    }
    server.served()
}

struct ClientTally {
    issued: u64,
    received: u64,
    duplicated: u64,
    corrupted: u64,
    fifo_violations: u64,
    seen: Vec<u64>,
}

fn client_loop(mut tx: TxHost, mut rx: RxHost, cfg: StressConfig) -> ClientTally {
    let mut t = ClientTally {
        issued: 0,
        received: 0,
        duplicated: 0,
        corrupted: 0,
        fifo_violations: 0,
        seen: vec![0; (cfg.rpcs as usize).div_ceil(64)],
    };
    let mut next_expected: u32 = 0;
    let mut outstanding = 0usize;
    // A run is bounded by its count, not by time; the deadline only turns a
    // hang into a report.
    let deadline = Instant::now() + Duration::from_secs(600);
    while t.received < cfg.rpcs && Instant::now() < deadline {
        let mut progressed = false;
        while t.issued < cfg.rpcs && outstanding < cfg.ring_depth {
            let Ok(slot) = tx.acquire() else { break };
            let rpc = t.issued as u32;
            let e = RpcEntry::request(cfg.conn, rpc, 0, &echo_payload(cfg.conn, t.issued)).expect("32-byte payload");
            tx.publish(slot, &e);
            t.issued += 1;
            outstanding += 1;
            progressed = true;
        }
        while let Some((slot, e)) = rx.poll() {
            progressed = true;
            outstanding -= 1;
            t.received += 1;
            let h = e.header;
            if h.rpc_id != next_expected {
                t.fifo_violations += 1;
            }
            next_expected = h.rpc_id.wrapping_add(1);
            let seq = match (h.kind, h.connection_id, check_echo_payload(e.payload())) {
                (EntryKind::Response, c, Some((pc, seq)))
                    if c == cfg.conn && pc == cfg.conn && seq as u32 == h.rpc_id =>
                {
                    Some(seq)
                }
                _ => None,
            };
            match seq {
                Some(seq) if seq < cfg.rpcs => {
                    let (w, b) = ((seq / 64) as usize, seq % 64);
                    if t.seen[w] & (1 << b) != 0 {
                        t.duplicated += 1;
                    }
                    t.seen[w] |= 1 << b;
                }
                _ => t.corrupted += 1,
            }
            rx.release(slot);
        }
        if !progressed {
            thread::yield_now();
        }
    }
    t
}

/// Runs `cfg.rpcs` echo RPCs through four threads and tallies the result.
pub fn echo_stress(cfg: StressConfig) -> StressReport {
    let (c_tx_host, c_tx_nic) = TxRing::new(cfg.ring_depth).expect("depth").split();
    let (c_rx_nic, c_rx_host) = RxRing::new(cfg.ring_depth).expect("depth").split();
    let (s_tx_host, s_tx_nic) = TxRing::new(cfg.ring_depth).expect("depth").split();
    let (s_rx_nic, s_rx_host) = RxRing::new(cfg.ring_depth).expect("depth").split();
    let (to_server, from_client) = channel();
    let (to_client, from_server) = channel();
    let stop = Arc::new(AtomicBool::new(false));
    let start = Instant::now();

    let nic0 = {
        let stop = stop.clone();
        thread::spawn(move || nic_loop(c_tx_nic, c_rx_nic, to_server, from_server, cfg.batch, stop))
    };
    let nic1 = {
        let stop = stop.clone();
        thread::spawn(move || nic_loop(s_tx_nic, s_rx_nic, to_client, from_client, cfg.batch, stop))
    };
    let server = thread::spawn(move || server_loop(s_rx_host, s_tx_host, cfg.rpcs));
    let tally = client_loop(c_tx_host, c_rx_host, cfg);
    stop.store(true, Ordering::Release);
    nic0.join().expect("nic0 thread");
    nic1.join().expect("nic1 thread");
    let elapsed = start.elapsed();
    // A short run leaves the server waiting; it only exits once it has
    // served everything, so do not join it in that case.
    let server_served = if tally.received == cfg.rpcs {
        server.join().expect("server thread")
    } else {
        0
    };
    let unique: u64 = tally.seen.iter().map(|w| u64::from(w.count_ones())).sum();
    StressReport {
        issued: tally.issued,
        received: tally.received,
        lost: tally.issued - unique.min(tally.issued),
        duplicated: tally.duplicated,
        corrupted: tally.corrupted,
        fifo_violations: tally.fifo_violations,
        server_served,
        elapsed,
    }
}
