//! Closed-form steady-state throughput of each host-to-NIC path.

use super::cost::CostParams;
use crate::scalar::Scalar;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TxMode {
    Mmio,
    Doorbell,
    Coherent,
}

impl fmt::Display for TxMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TxMode::Mmio => "mmio",
            TxMode::Doorbell => "doorbell",
            TxMode::Coherent => "coherent",
        })
    }
}

impl FromStr for TxMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "mmio" => Ok(TxMode::Mmio),
            "doorbell" => Ok(TxMode::Doorbell),
            "coherent" | "upi" => Ok(TxMode::Coherent),
            _ => Err(format!("unknown tx mode `{s}`")),
        }
    }
}

/// Channel occupancy of one batch of `batch` entries, in ns.
pub fn batch_occupancy_ns<T: Scalar>(p: &CostParams<T>, mode: TxMode, batch: usize) -> T {
    let b = T::of_usize(batch.max(1));
    match mode {
        TxMode::Mmio => p.t_mmio * b,
        TxMode::Doorbell => p.t_doorbell + b * p.t_entry,
        TxMode::Coherent => p.t_poll + b * p.t_cl,
    }
}

/// Saturated single-channel throughput in Mrps.
pub fn throughput_mrps<T: Scalar>(p: &CostParams<T>, mode: TxMode, batch: usize) -> T {
    let b = match mode {
        TxMode::Mmio => 1,
        _ => batch.max(1),
    };
    T::of_usize(b) * T::lit(1e3) / batch_occupancy_ns(p, mode, b)
}

/// Bandwidth ratio of the interconnect to a stream of 64B requests.
pub fn bandwidth_headroom<T: Scalar>(link_gbps: T, mrps: T, bytes: T) -> T {
    link_gbps / (mrps * T::lit(1e6) * bytes / T::lit(1e9))
}
