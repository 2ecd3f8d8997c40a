//! Exhaustive exploration of every interleaving of host and NIC ring
//! operations for one connection, on small rings.
//!
//! An echo request travels host TX ring -> NIC -> wire -> NIC -> host RX
//! ring. Each step below is one ring API call, so the explored graph covers
//! every order in which the two sides can make those calls. The states are
//! the real ring snapshots plus the checker's own bookkeeping.

use crate::protocol::RpcEntry;
use crate::rings::{RingError, RingState, RxRing, TxRing};
use std::collections::HashSet;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct State {
    tx: RingState,
    rx: RingState,
    /// Requests published so far; the next rpc id.
    issued: u32,
    /// Slot acquired by the host and not yet published.
    acquired: Option<usize>,
    /// Next rpc id the NIC must fetch.
    next_fetch: u32,
    /// Fetched TX slots, oldest first, awaiting release.
    fetched: Vec<usize>,
    /// Fetched rpc ids in flight towards the RX ring.
    wire: Vec<u32>,
    delivered: u32,
    /// Next rpc id the host must poll.
    received: u32,
    /// Polled RX slots, oldest first, awaiting release.
    polled: Vec<usize>,
}

/// Order in which the NIC may return fetched TX slots.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReleaseOrder {
    /// Oldest first, the NIC's contract.
    Fifo,
    /// Any single fetched slot; breaks publish-order fetching.
    Any,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ModelCheckReport {
    pub depth: usize,
    pub rpcs: u32,
    pub states: usize,
    pub transitions: usize,
    pub terminal_states: usize,
    pub violations: Vec<String>,
}

impl ModelCheckReport {
    pub fn ok(&self) -> bool {
        self.violations.is_empty() && self.terminal_states > 0
    }
}

fn entry(rpc: u32) -> RpcEntry {
    RpcEntry::request(1, rpc, 0, &rpc.to_le_bytes()).expect("4-byte payload")
}

fn rings(s: &State) -> (TxRing, RxRing) {
    (
        TxRing::restore(&s.tx).expect("explored states restore"),
        RxRing::restore(&s.rx).expect("explored states restore"),
    )
}

fn with_rings(mut s: State, tx: &TxRing, rx: &RxRing) -> State {
    s.tx = tx.snapshot();
    s.rx = rx.snapshot();
    s
}

/// Successor states of `s`, or a violation message.
fn successors(s: &State, depth: usize, rpcs: u32, order: ReleaseOrder) -> Result<Vec<State>, String> {
    let mut out = Vec::new();

    // Host: acquire a TX slot.
    if s.acquired.is_none() && s.issued < rpcs {
        let (mut tx, rx) = rings(s);
        let before = tx.outstanding();
        match tx.acquire() {
            Ok(slot) => {
                if before >= depth {
                    return Err(format!("acquire succeeded with {before} slots outstanding"));
                }
                out.push(with_rings(
                    State {
                        acquired: Some(slot),
                        ..s.clone()
                    },
                    &tx,
                    &rx,
                ));
            }
            Err(RingError::WouldBlock) if before == depth => {}
            Err(e) => return Err(format!("acquire failed with {before} of {depth} outstanding: {e}")),
        }
    }

    // Host: publish the acquired slot.
    if let Some(slot) = s.acquired {
        let (mut tx, rx) = rings(s);
        tx.publish(slot, &entry(s.issued));
        out.push(with_rings(
            State {
                acquired: None,
                issued: s.issued + 1,
                ..s.clone()
            },
            &tx,
            &rx,
        ));
    }

    // NIC: fetch a batch of every size.
    for b in 1..=depth {
        let (mut tx, rx) = rings(s);
        let got = tx.fetch(b);
        if got.is_empty() {
            break;
        }
        let mut n = s.clone();
        for (slot, e) in &got {
            if e.header.rpc_id != n.next_fetch {
                return Err(format!(
                    "fetched rpc {} while {} was due",
                    e.header.rpc_id, n.next_fetch
                ));
            }
            n.next_fetch += 1;
            n.fetched.push(*slot);
            n.wire.push(e.header.rpc_id);
        }
        out.push(with_rings(n, &tx, &rx));
        if got.len() < b {
            break;
        }
    }

    // NIC: release every prefix of the fetched slots, or any one of them.
    let choices: Vec<Vec<usize>> = match order {
        ReleaseOrder::Fifo => (1..=s.fetched.len()).map(|k| (0..k).collect()).collect(),
        ReleaseOrder::Any => (0..s.fetched.len()).map(|i| vec![i]).collect(),
    };
    for pick in choices {
        let (mut tx, rx) = rings(s);
        let slots: Vec<usize> = pick.iter().map(|&i| s.fetched[i]).collect();
        tx.release(&slots);
        let fetched = s
            .fetched
            .iter()
            .enumerate()
            .filter(|(i, _)| !pick.contains(i))
            .map(|(_, &v)| v)
            .collect();
        out.push(with_rings(State { fetched, ..s.clone() }, &tx, &rx));
    }

    // NIC: deliver the oldest wire entry.
    if let Some(&rpc) = s.wire.first() {
        let (tx, mut rx) = rings(s);
        let free = rx.nic.has_free_slot();
        match rx.deliver(&entry(rpc)) {
            Ok(_) if free => out.push(with_rings(
                State {
                    wire: s.wire[1..].to_vec(),
                    delivered: s.delivered + 1,
                    ..s.clone()
                },
                &tx,
                &rx,
            )),
            Err(RingError::Backpressure) if !free => {}
            r => return Err(format!("deliver returned {r:?} while has_free_slot was {free}")),
        }
    }

    // Host: poll the RX ring.
    {
        let (tx, mut rx) = rings(s);
        match rx.poll() {
            Some((slot, e)) => {
                if e.header.rpc_id != s.received {
                    return Err(format!("polled rpc {} while {} was due", e.header.rpc_id, s.received));
                }
                let mut polled = s.polled.clone();
                polled.push(slot);
                out.push(with_rings(
                    State {
                        received: s.received + 1,
                        polled,
                        ..s.clone()
                    },
                    &tx,
                    &rx,
                ));
            }
            None if s.delivered > s.received => {
                return Err(format!(
                    "poll empty with {} delivered unpolled",
                    s.delivered - s.received
                ))
            }
            None => {}
        }
    }

    // Host: release the oldest polled RX slot.
    if let Some(&slot) = s.polled.first() {
        let (tx, mut rx) = rings(s);
        rx.release(slot);
        out.push(with_rings(
            State {
                polled: s.polled[1..].to_vec(),
                ..s.clone()
            },
            &tx,
            &rx,
        ));
    }
    Ok(out)
}

fn check_state(s: &State, depth: usize) -> Result<(), String> {
    let (tx, _) = rings(s);
    if tx.outstanding() > depth {
        return Err(format!(
            "{} TX slots outstanding on a ring of {depth}",
            tx.outstanding()
        ));
    }
    let unfetched = tx.nic.dirty_pending() as u32;
    if s.issued != s.next_fetch + unfetched {
        return Err(format!(
            "conservation: issued {} != fetched {} + unfetched {unfetched}",
            s.issued, s.next_fetch
        ));
    }
    if s.next_fetch != s.delivered + s.wire.len() as u32 {
        return Err("conservation: wire entries lost".into());
    }
    if s.delivered - s.received > depth as u32 {
        return Err("RX ring holds more entries than slots".into());
    }
    Ok(())
}

/// Explores all reachable states for `rpcs` echo requests through rings of
/// `depth` slots. Terminal states must have every request received and
/// every slot returned.
pub fn check_rings(depth: usize, rpcs: u32) -> ModelCheckReport {
    check_rings_with(depth, rpcs, ReleaseOrder::Fifo)
}

pub fn check_rings_with(depth: usize, rpcs: u32, order: ReleaseOrder) -> ModelCheckReport {
    let mut report = ModelCheckReport {
        depth,
        rpcs,
        ..Default::default()
    };
    let init = State {
        tx: TxRing::new(depth).expect("valid depth").snapshot(),
        rx: RxRing::new(depth).expect("valid depth").snapshot(),
        issued: 0,
        acquired: None,
        next_fetch: 0,
        fetched: Vec::new(),
        wire: Vec::new(),
        delivered: 0,
        received: 0,
        polled: Vec::new(),
    };
    let mut seen = HashSet::new();
    let mut stack = vec![init.clone()];
    seen.insert(init);
    while let Some(s) = stack.pop() {
        if let Err(v) = check_state(&s, depth) {
            report.violations.push(v);
            continue;
        }
        let next = match successors(&s, depth, rpcs, order) {
            Ok(n) => n,
            Err(v) => {
                report.violations.push(v);
                continue;
            }
        };
        report.transitions += next.len();
        if next.is_empty() {
            report.terminal_states += 1;
            let (tx, rx) = rings(&s);
            if s.received != rpcs || tx.outstanding() != 0 || rx.host.unreleased() != 0 {
                report.violations.push(format!(
                    "deadlock: received {} of {rpcs}, {} TX outstanding",
                    s.received,
                    tx.outstanding()
                ));
            }
        }
        for n in next {
            if seen.insert(n.clone()) {
                stack.push(n);
            }
        }
        if report.violations.len() > 16 {
            break;
        }
    }
    report.states = seen.len();
    report
}

#[cfg(test)]
mod tests {
    #[test]
    fn tiny_ring_single_rpc() {
        let r = super::check_rings(2, 1);
        assert!(r.ok(), "{:?}", r.violations);
        assert_eq!(r.terminal_states, 1);
    }

    #[test]
    fn out_of_order_release_is_caught() {
        let r = super::check_rings_with(2, 4, super::ReleaseOrder::Any);
        assert!(!r.ok());
    }
}
