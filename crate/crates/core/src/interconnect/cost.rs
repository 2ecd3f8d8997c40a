use crate::scalar::Scalar;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ParamsError {
    #[error("cost parameter `{0}` must be positive, got {1}")]
    NonPositive(&'static str, f64),
    #[error("cost parameter `{0}` must be finite and non-negative, got {1}")]
    Negative(&'static str, f64),
    #[error("write combining is fixed off for MMIO stores")]
    WriteCombining,
    #[error("cost params {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("cost params: {0}")]
    Json(#[from] serde_json::Error),
}

/// Per-transaction costs of the host/NIC channel, in virtual nanoseconds.
///
/// Occupancy terms (`t_mmio`, `t_doorbell`, `t_entry`, `t_poll`, `t_cl`)
/// serialize their channel and set throughput. Flight terms
/// (`t_pcie_write`, `t_dma_read`, `t_inval`, `t_dma_write`, `t_memcpy`,
/// `t_wire`) only delay the request.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
#[serde(bound = "T: Scalar")]
pub struct CostParams<T> {
    /// Core occupancy of one 64B MMIO store.
    pub t_mmio: T,
    /// Posted-write flight time from a core to the device (MMIO stores and doorbells).
    pub t_pcie_write: T,
    /// NIC channel occupancy per doorbell batch.
    pub t_doorbell: T,
    /// NIC channel occupancy per DMA-read entry.
    pub t_entry: T,
    /// Completion latency of a DMA read after the channel finishes.
    pub t_dma_read: T,
    /// NIC channel overhead per coherent poll or fetch.
    pub t_poll: T,
    /// NIC channel occupancy per coherent cache line.
    pub t_cl: T,
    /// Host publish to NIC-side invalidation arrival.
    pub t_inval: T,
    /// NIC to host 64B DMA write, issue to host visibility.
    pub t_dma_write: T,
    /// Host copy of one response into the completion queue.
    pub t_memcpy: T,
    /// One-way wire and top-of-rack delay.
    pub t_wire: T,
    /// 64B NIC-initiated read transactions per second the shared endpoint sustains.
    pub bus_cap_rps: T,
    /// Always false; stores go out uncombined.
    pub mmio_write_combining: bool,
}

impl<T: Scalar> CostParams<T> {
    pub fn validate(&self) -> Result<(), ParamsError> {
        let positive = [
            ("t_mmio", self.t_mmio),
            ("t_pcie_write", self.t_pcie_write),
            ("t_doorbell", self.t_doorbell),
            ("t_entry", self.t_entry),
            ("t_dma_read", self.t_dma_read),
            ("t_poll", self.t_poll),
            ("t_cl", self.t_cl),
            ("t_inval", self.t_inval),
            ("t_dma_write", self.t_dma_write),
            ("t_memcpy", self.t_memcpy),
            ("bus_cap_rps", self.bus_cap_rps),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > T::zero()) {
                return Err(ParamsError::NonPositive(name, v.as_f64()));
            }
        }
        if !(self.t_wire.is_finite() && self.t_wire >= T::zero()) {
            return Err(ParamsError::Negative("t_wire", self.t_wire.as_f64()));
        }
        if self.mmio_write_combining {
            return Err(ParamsError::WriteCombining);
        }
        Ok(())
    }

    /// Bus occupancy of one 64B transaction.
    pub fn bus_unit_ns(&self) -> T {
        T::lit(1e9) / self.bus_cap_rps
    }

    pub fn cast<U: Scalar>(&self) -> CostParams<U> {
        let c = |v: T| U::lit(v.as_f64());
        CostParams {
            t_mmio: c(self.t_mmio),
            t_pcie_write: c(self.t_pcie_write),
            t_doorbell: c(self.t_doorbell),
            t_entry: c(self.t_entry),
            t_dma_read: c(self.t_dma_read),
            t_poll: c(self.t_poll),
            t_cl: c(self.t_cl),
            t_inval: c(self.t_inval),
            t_dma_write: c(self.t_dma_write),
            t_memcpy: c(self.t_memcpy),
            t_wire: c(self.t_wire),
            bus_cap_rps: c(self.bus_cap_rps),
            mmio_write_combining: self.mmio_write_combining,
        }
    }

    pub fn from_json(text: &str) -> Result<Self, ParamsError> {
        let p: Self = serde_json::from_str(text)?;
        p.validate()?;
        Ok(p)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("cost params serialize") + "\n"
    }

    pub fn load(path: &Path) -> Result<Self, ParamsError> {
        let text = std::fs::read_to_string(path).map_err(|source| ParamsError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }
}

pub const DEFAULT_PARAMS_JSON: &str = include_str!("../../../../params/broadwell_a10.json");

impl Default for CostParams<f64> {
    fn default() -> Self {
        CostParams::from_json(DEFAULT_PARAMS_JSON).expect("shipped params are valid")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_defaults_are_valid() {
        let p = CostParams::<f64>::default();
        assert_eq!(p.t_wire, 300.0);
        assert_eq!(p.bus_cap_rps, 80e6);
        assert!(!p.mmio_write_combining);
        assert!((p.bus_unit_ns() - 12.5).abs() < 1e-12);
    }

    #[test]
    fn zero_mmio_rejected() {
        let p = CostParams {
            t_mmio: 0.0,
            ..CostParams::<f64>::default()
        };
        assert!(matches!(p.validate(), Err(ParamsError::NonPositive("t_mmio", _))));
    }

    #[test]
    fn zero_wire_allowed_negative_rejected() {
        let mut p = CostParams {
            t_wire: 0.0,
            ..CostParams::<f64>::default()
        };
        p.validate().unwrap();
        p.t_wire = -1.0;
        assert!(p.validate().is_err());
    }

    #[test]
    fn unknown_keys_rejected() {
        let mut v: serde_json::Value = serde_json::from_str(DEFAULT_PARAMS_JSON).unwrap();
        v["t_bogus"] = 1.0.into();
        assert!(CostParams::<f64>::from_json(&v.to_string()).is_err());
    }

    #[test]
    fn write_combining_rejected() {
        let mut v: serde_json::Value = serde_json::from_str(DEFAULT_PARAMS_JSON).unwrap();
        v["mmio_write_combining"] = true.into();
        assert!(matches!(
            CostParams::<f64>::from_json(&v.to_string()),
            Err(ParamsError::WriteCombining)
        ));
    }

    #[test]
    fn json_round_trip_and_cast() {
        let p = CostParams::<f64>::default();
        assert_eq!(CostParams::<f64>::from_json(&p.to_json()).unwrap(), p);
        let q: CostParams<f32> = p.cast();
        assert!((q.t_cl as f64 - p.t_cl).abs() < 1e-3);
    }
}
