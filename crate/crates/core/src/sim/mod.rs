//! Discrete-event simulation of two NICs, their hosts and the wire between them.

pub mod event;
pub mod experiments;
pub mod loadgen;
pub mod metrics;
pub mod scenario;
pub mod world;

pub use event::EventQueue;
pub use loadgen::{Arrival, Arrivals, LoadGen};
pub use metrics::{percentile, RunMetrics, Sample};
pub use scenario::{load_scenario, run, RunReport, Scenario, ScenarioError};
pub use world::{ConnHandle, Conservation, Role, World, WorldStats};
