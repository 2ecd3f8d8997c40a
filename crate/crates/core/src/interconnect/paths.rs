//! Timing and transaction emission for each host-to-NIC path and the RX DMA
//! path. The simulator strings these together; they hold no global state.

use super::cost::CostParams;
use super::trace::{Issuer, RpcTag, Transaction, TxnKind};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoherentSubmode {
    /// NIC polls its local coherent cache; host publishes invalidate lines.
    InvalDriven,
    /// NIC reads the host LLC directly on every poll.
    DirectPoll,
}

impl std::fmt::Display for CoherentSubmode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CoherentSubmode::InvalDriven => "inval_driven",
            CoherentSubmode::DirectPoll => "direct_poll",
        })
    }
}

/// Serialization point of one host core for MMIO stores.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CoreClock {
    pub free_at: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MmioTiming {
    pub start: f64,
    /// Core is free again.
    pub store_done: f64,
    /// Entry lands in the device buffer.
    pub nic_visible: f64,
}

/// One uncombined 64B store per entry; the core issues at most one every
/// `t_mmio`.
pub fn tx_mmio_submit(
    p: &CostParams<f64>,
    core: &mut CoreClock,
    now: f64,
    tags: &[RpcTag],
    issuer: Issuer,
) -> (Vec<Transaction>, Vec<MmioTiming>) {
    assert!(!tags.is_empty(), "mmio submit needs at least one entry");
    let mut txns = Vec::with_capacity(tags.len());
    let mut times = Vec::with_capacity(tags.len());
    for &tag in tags {
        let start = now.max(core.free_at);
        let store_done = start + p.t_mmio;
        core.free_at = store_done;
        txns.push(Transaction::new(start, issuer, TxnKind::MmioStore64, 1).tagged(tag));
        times.push(MmioTiming {
            start,
            store_done,
            nic_visible: store_done + p.t_pcie_write,
        });
    }
    (txns, times)
}

/// Host-side doorbell accumulation. With no timeout a batch waits until
/// `batch` entries are pending.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DoorbellBatcher {
    pending: usize,
}

impl DoorbellBatcher {
    pub fn pending(&self) -> usize {
        self.pending
    }

    /// Adds one published entry; returns the doorbell count when full.
    pub fn push(&mut self, batch: usize) -> Option<usize> {
        assert!(batch >= 1);
        self.pending += 1;
        self.ready(batch)
    }

    /// Rings for a full batch after the batch size shrank.
    pub fn ready(&mut self, batch: usize) -> Option<usize> {
        if self.pending >= batch {
            let n = batch.min(self.pending);
            self.pending -= n;
            Some(n)
        } else {
            None
        }
    }

    /// Opportunistic flush of whatever is pending.
    pub fn flush(&mut self) -> Option<usize> {
        (self.pending > 0).then(|| std::mem::take(&mut self.pending))
    }
}

/// The doorbell write itself; returns its arrival time at the NIC.
pub fn tx_doorbell_submit(p: &CostParams<f64>, now: f64, count: usize, issuer: Issuer) -> (Transaction, f64) {
    (
        Transaction::new(now, issuer, TxnKind::DoorbellMmio, count as u32),
        now + p.t_pcie_write,
    )
}

/// NIC channel occupancy of a doorbell-triggered DMA read of `count` entries.
pub fn doorbell_fetch_occupancy(p: &CostParams<f64>, count: usize) -> f64 {
    p.t_doorbell + count as f64 * p.t_entry
}

/// NIC channel occupancy of a coherent read of `lines` cache lines.
pub fn coherent_fetch_occupancy(p: &CostParams<f64>, lines: usize) -> f64 {
    p.t_poll + lines as f64 * p.t_cl
}

/// Host-side effect of a coherent-mode publish: in the invalidation-driven
/// submode the NIC learns of the line after `t_inval`.
pub fn tx_coherent_submit(
    p: &CostParams<f64>,
    now: f64,
    submode: CoherentSubmode,
    issuer: Issuer,
) -> Option<(Transaction, f64)> {
    match submode {
        CoherentSubmode::InvalDriven => {
            Some((Transaction::new(now, issuer, TxnKind::Invalidation, 1), now + p.t_inval))
        }
        CoherentSubmode::DirectPoll => None,
    }
}

/// The single NIC-initiated write that delivers a received entry.
pub fn rx_dma_deliver(p: &CostParams<f64>, now: f64, issuer: Issuer, tag: RpcTag) -> (Transaction, f64) {
    (
        Transaction::new(now, issuer, TxnKind::DmaWrite64, 1).tagged(tag),
        now + p.t_dma_write,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::EntryKind;

    fn tag(rpc: u32) -> RpcTag {
        RpcTag::of(0, rpc, EntryKind::Request)
    }

    #[test]
    fn mmio_serializes_at_store_time() {
        let p = CostParams::default();
        let mut core = CoreClock::default();
        let (txns, t) = tx_mmio_submit(&p, &mut core, 0.0, &[tag(0)], Issuer::Core(0));
        assert_eq!(txns.len(), 1);
        assert_eq!(txns[0].kind, TxnKind::MmioStore64);
        assert!((t[0].store_done - 1e3 / 4.2).abs() < 1e-9);
        assert!((t[0].nic_visible - t[0].store_done - p.t_pcie_write).abs() < 1e-9);

        // back-to-back stores cap the core at 1/t_mmio
        let tags: Vec<_> = (0..1000).map(tag).collect();
        let mut core = CoreClock::default();
        let (_, t) = tx_mmio_submit(&p, &mut core, 0.0, &tags, Issuer::Core(0));
        let rate = 1000.0 / t.last().unwrap().store_done * 1e3;
        assert!((rate - 4.2).abs() < 1e-6);
    }

    #[test]
    fn doorbell_waits_for_full_batch() {
        let mut b = DoorbellBatcher::default();
        assert_eq!(b.push(4), None);
        assert_eq!(b.push(4), None);
        assert_eq!(b.pending(), 2);
        assert_eq!(b.push(4), None);
        assert_eq!(b.push(4), Some(4));
        assert_eq!(b.pending(), 0);
        b.push(4);
        assert_eq!(b.ready(1), Some(1));
        b.push(8);
        assert_eq!(b.flush(), Some(1));
        assert_eq!(b.flush(), None);
    }

    #[test]
    fn invalidation_only_in_inval_driven() {
        let p = CostParams::default();
        let (t, at) = tx_coherent_submit(&p, 5.0, CoherentSubmode::InvalDriven, Issuer::Core(1)).unwrap();
        assert_eq!(t.kind, TxnKind::Invalidation);
        assert_eq!(at, 5.0 + p.t_inval);
        assert!(tx_coherent_submit(&p, 5.0, CoherentSubmode::DirectPoll, Issuer::Core(1)).is_none());
    }

    #[test]
    fn rx_is_one_dma_write() {
        let p = CostParams::default();
        let (t, vis) = rx_dma_deliver(&p, 10.0, Issuer::Nic(1), tag(3));
        assert_eq!((t.kind, t.count, t.tag), (TxnKind::DmaWrite64, 1, Some(tag(3))));
        assert_eq!(vis, 10.0 + p.t_dma_write);
    }
}
