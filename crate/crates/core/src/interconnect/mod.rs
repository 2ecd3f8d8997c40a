//! Transaction-level model of the host/NIC channel.

pub mod arbiter;
pub mod calibrate;
pub mod cost;
pub mod model;
pub mod paths;
pub mod trace;

pub use arbiter::{arbiter_grant, BusArbiter, Grant};
pub use calibrate::{calibrate, parse_datapoints, Calibration, CalibrationError, Datapoint, Residual, Role};
pub use cost::{CostParams, ParamsError};
pub use model::{batch_occupancy_ns, throughput_mrps, TxMode};
pub use paths::{CoherentSubmode, CoreClock, DoorbellBatcher};
pub use trace::{Issuer, RpcTag, Trace, Transaction, TxnKind};
