//! Simulator and reference implementation of an RPC stack that offloads
//! transport to a NIC attached over a cache-coherent interconnect.

pub mod acceptance;
pub mod host;
pub mod interconnect;
pub mod model_check;
pub mod nic;
pub mod protocol;
pub mod reference;
pub mod rings;
pub mod scalar;
pub mod sim;
pub mod threaded;

pub use interconnect::{CostParams, TxMode};
pub use nic::{NicConfig, NicError};
pub use protocol::{EntryKind, NicId, RpcEntry, ThreadingModel};
pub use scalar::Scalar;

pub type Params = CostParams<f64>;
