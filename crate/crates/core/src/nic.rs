//! Emulated NIC: configuration, pipeline state machines, the RX load
//! balancer, the loop-back transport and the rate-driven controllers.
//!
//! The event-driven sequencing of these pieces lives in [`crate::sim`];
//! everything here is plain state plus the rules that govern it.

use crate::interconnect::{CoherentSubmode, TxMode};
use crate::protocol::{FlowTable, NicId, ThreadingModel};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::fmt::{self, Write as _};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NicError {
    #[error("`{0}` is a hard field and cannot change while running")]
    HardFieldViolation(String),
    #[error("invalid value for `{field}`: {msg}")]
    InvalidValue { field: String, msg: String },
    #[error("unknown config field `{0}`")]
    UnknownField(String),
    #[error("no route to {0:?}")]
    UnknownDestination(NicId),
    #[error("drain did not complete within {budget_us} us ({outstanding} RPCs outstanding)")]
    DrainTimeout { budget_us: f64, outstanding: usize },
}

fn invalid(field: &str, msg: impl Into<String>) -> NicError {
    NicError::InvalidValue {
        field: field.into(),
        msg: msg.into(),
    }
}

/// Caching policy for the coherent path. `Adaptive` switches on measured
/// rate; the others pin one submode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoherentPolicy {
    #[default]
    Adaptive,
    InvalDriven,
    DirectPoll,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptiveBatching {
    pub enabled: bool,
    #[serde(rename = "low_B")]
    pub low_batch: usize,
    #[serde(rename = "high_B")]
    pub high_batch: usize,
    /// Rate above which the high batch size is used.
    pub switch_rps: f64,
}

impl Default for AdaptiveBatching {
    fn default() -> Self {
        AdaptiveBatching {
            enabled: false,
            low_batch: 1,
            high_batch: 4,
            switch_rps: 8.05e6,
        }
    }
}

pub const DEFAULT_POLL_THRESHOLD_RPS: f64 = 1e6;
pub const DEFAULT_RATE_WINDOW_US: f64 = 100.0;
/// Relative width of the dead band below each controller threshold.
pub const HYSTERESIS: f64 = 0.10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NicConfig {
    pub tx_mode: TxMode,
    pub threading_model: ThreadingModel,
    #[serde(rename = "batch_B")]
    pub batch: usize,
    #[serde(default = "default_threshold")]
    pub poll_threshold_rps: f64,
    #[serde(default)]
    pub adaptive_batching: AdaptiveBatching,
    #[serde(default = "default_window")]
    pub rate_window_us: f64,
    #[serde(default)]
    pub coherent_policy: CoherentPolicy,
    /// Flush a partial doorbell batch when no doorbell is in flight.
    #[serde(default)]
    pub opportunistic_batching: bool,
}

fn default_threshold() -> f64 {
    DEFAULT_POLL_THRESHOLD_RPS
}

fn default_window() -> f64 {
    DEFAULT_RATE_WINDOW_US
}

impl NicConfig {
    pub fn new(tx_mode: TxMode, threading_model: ThreadingModel, batch: usize) -> Self {
        NicConfig {
            tx_mode,
            threading_model,
            batch,
            poll_threshold_rps: DEFAULT_POLL_THRESHOLD_RPS,
            adaptive_batching: AdaptiveBatching::default(),
            rate_window_us: DEFAULT_RATE_WINDOW_US,
            coherent_policy: CoherentPolicy::Adaptive,
            opportunistic_batching: false,
        }
    }

    pub fn with_policy(mut self, policy: CoherentPolicy) -> Self {
        self.coherent_policy = policy;
        self
    }

    pub fn with_adaptive_batching(mut self, low: usize, high: usize) -> Self {
        self.adaptive_batching.enabled = true;
        self.adaptive_batching.low_batch = low;
        self.adaptive_batching.high_batch = high;
        self
    }

    pub fn validate(&self, ring_depth: usize) -> Result<(), NicError> {
        let check_b = |field: &str, b: usize| {
            if b == 0 {
                Err(invalid(field, "must be >= 1"))
            } else if b > ring_depth {
                Err(invalid(field, format!("{b} exceeds ring depth {ring_depth}")))
            } else {
                Ok(())
            }
        };
        check_b("batch_B", self.batch)?;
        if !(self.poll_threshold_rps.is_finite() && self.poll_threshold_rps > 0.0) {
            return Err(invalid("poll_threshold_rps", "must be positive"));
        }
        if !(self.rate_window_us.is_finite() && self.rate_window_us > 0.0) {
            return Err(invalid("rate_window_us", "must be positive"));
        }
        let ab = &self.adaptive_batching;
        if ab.enabled {
            check_b("adaptive_batching.low_B", ab.low_batch)?;
            check_b("adaptive_batching.high_B", ab.high_batch)?;
            if ab.low_batch >= ab.high_batch {
                return Err(invalid("adaptive_batching", "low_B must be below high_B"));
            }
            if !(ab.switch_rps.is_finite() && ab.switch_rps > 0.0) {
                return Err(invalid("adaptive_batching.switch_rps", "must be positive"));
            }
        }
        Ok(())
    }

    /// Returns a copy with one soft field changed. Hard fields are refused.
    pub fn with_soft_field(&self, field: &str, value: &serde_json::Value) -> Result<Self, NicError> {
        let mut next = *self;
        let num = || value.as_f64().ok_or_else(|| invalid(field, "expected a number"));
        match field {
            "tx_mode" | "threading_model" => return Err(NicError::HardFieldViolation(field.into())),
            "batch_B" => {
                let b = value
                    .as_u64()
                    .ok_or_else(|| invalid(field, "expected a positive integer"))?;
                next.batch = b as usize;
            }
            "poll_threshold_rps" => next.poll_threshold_rps = num()?,
            "rate_window_us" => next.rate_window_us = num()?,
            "adaptive_batching" => {
                next.adaptive_batching =
                    serde_json::from_value(value.clone()).map_err(|e| invalid(field, e.to_string()))?
            }
            "coherent_policy" => {
                next.coherent_policy =
                    serde_json::from_value(value.clone()).map_err(|e| invalid(field, e.to_string()))?
            }
            "opportunistic_batching" => {
                next.opportunistic_batching = value.as_bool().ok_or_else(|| invalid(field, "expected a bool"))?
            }
            other => return Err(NicError::UnknownField(other.into())),
        }
        Ok(next)
    }

    /// True if `other` differs from `self` only in soft fields.
    pub fn same_hard_fields(&self, other: &NicConfig) -> bool {
        self.tx_mode == other.tx_mode && self.threading_model == other.threading_model
    }
}

// ---------------------------------------------------------------- FSMs

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TxFsm {
    IdlePoll,
    Fetch,
    Forward,
    Bookkeep,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RxFsm {
    AwaitWire,
    DeliverDma,
    Bookkeep,
}

pub trait FsmState: Copy + Eq + fmt::Debug {
    fn legal(from: Self, to: Self) -> bool;
}

impl FsmState for TxFsm {
    fn legal(from: Self, to: Self) -> bool {
        use TxFsm::*;
        matches!(
            (from, to),
            (IdlePoll, Fetch)
                | (Fetch, Forward)
                | (Fetch, IdlePoll)
                | (Forward, Bookkeep)
                | (Forward, IdlePoll)
                | (Bookkeep, IdlePoll)
        )
    }
}

impl FsmState for RxFsm {
    fn legal(from: Self, to: Self) -> bool {
        use RxFsm::*;
        matches!(
            (from, to),
            (AwaitWire, DeliverDma) | (DeliverDma, Bookkeep) | (Bookkeep, AwaitWire) | (Bookkeep, DeliverDma)
        )
    }
}

/// Current state plus a count of illegal transitions seen.
#[derive(Debug, Clone)]
pub struct Fsm<S> {
    state: S,
    illegal: u64,
    transitions: u64,
}

impl<S: FsmState> Fsm<S> {
    pub fn new(initial: S) -> Self {
        Fsm {
            state: initial,
            illegal: 0,
            transitions: 0,
        }
    }

    pub fn state(&self) -> S {
        self.state
    }

    pub fn go(&mut self, to: S) {
        if !S::legal(self.state, to) {
            self.illegal += 1;
            debug_assert!(false, "illegal FSM transition {:?} -> {:?}", self.state, to);
        }
        self.transitions += 1;
        self.state = to;
    }

    pub fn illegal_transitions(&self) -> u64 {
        self.illegal
    }

    pub fn transitions(&self) -> u64 {
        self.transitions
    }
}

// ---------------------------------------------------------------- balancer

/// Round-robin choice among the NIC's connections.
#[derive(Debug, Clone, Default)]
pub struct RxBalancer {
    cursor: usize,
}

impl RxBalancer {
    /// Next eligible index in `0..n` after the previous pick.
    pub fn next(&mut self, n: usize, eligible: impl Fn(usize) -> bool) -> Option<usize> {
        if n == 0 {
            return None;
        }
        let pick = (0..n).map(|k| (self.cursor + k) % n).find(|&i| eligible(i))?;
        self.cursor = (pick + 1) % n;
        Some(pick)
    }
}

// ---------------------------------------------------------------- wire

/// Loss-free, order-preserving loop-back link with a fixed one-way delay.
#[derive(Debug, Clone)]
pub struct LoopbackWire {
    attached: BTreeSet<NicId>,
    delay_ns: f64,
    sent: u64,
}

impl LoopbackWire {
    pub fn new(delay_ns: f64) -> Self {
        LoopbackWire {
            attached: BTreeSet::new(),
            delay_ns,
            sent: 0,
        }
    }

    pub fn attach(&mut self, nic: NicId) {
        self.attached.insert(nic);
    }

    pub fn is_attached(&self, nic: NicId) -> bool {
        self.attached.contains(&nic)
    }

    /// Arrival time of an entry sent at `now`.
    pub fn send(&mut self, now: f64, dst: NicId) -> Result<f64, NicError> {
        if !self.attached.contains(&dst) {
            return Err(NicError::UnknownDestination(dst));
        }
        self.sent += 1;
        Ok(now + self.delay_ns)
    }

    pub fn sent(&self) -> u64 {
        self.sent
    }
}

// ---------------------------------------------------------------- controllers

#[derive(Debug, Clone, PartialEq)]
pub struct ControllerEvent {
    pub ts_ns: f64,
    pub controller: &'static str,
    pub old: String,
    pub new: String,
}

/// Rate-driven soft controllers: the coherent caching policy and the
/// adaptive batch size. Each switches up above its threshold and back
/// down only below `(1 - HYSTERESIS)` of it.
#[derive(Debug, Clone)]
pub struct Controllers {
    submode: CoherentSubmode,
    effective_batch: usize,
    measured_rps: f64,
    log: Vec<ControllerEvent>,
}

impl Controllers {
    pub fn new(cfg: &NicConfig) -> Self {
        let submode = match cfg.coherent_policy {
            CoherentPolicy::DirectPoll => CoherentSubmode::DirectPoll,
            _ => CoherentSubmode::InvalDriven,
        };
        let effective_batch = if cfg.adaptive_batching.enabled {
            cfg.adaptive_batching.low_batch
        } else {
            cfg.batch
        };
        Controllers {
            submode,
            effective_batch,
            measured_rps: 0.0,
            log: Vec::new(),
        }
    }

    pub fn submode(&self) -> CoherentSubmode {
        self.submode
    }

    pub fn effective_batch(&self) -> usize {
        self.effective_batch
    }

    pub fn measured_rps(&self) -> f64 {
        self.measured_rps
    }

    pub fn log(&self) -> &[ControllerEvent] {
        &self.log
    }

    /// One controller evaluation with the rate measured over the last
    /// window. Returns true if anything changed.
    pub fn step(&mut self, cfg: &NicConfig, now: f64, measured_rps: f64) -> bool {
        self.measured_rps = measured_rps.max(0.0);
        let rate = self.measured_rps;
        let mut changed = false;

        let submode = match cfg.coherent_policy {
            CoherentPolicy::InvalDriven => CoherentSubmode::InvalDriven,
            CoherentPolicy::DirectPoll => CoherentSubmode::DirectPoll,
            CoherentPolicy::Adaptive => {
                let thr = cfg.poll_threshold_rps;
                match self.submode {
                    CoherentSubmode::InvalDriven if rate > thr => CoherentSubmode::DirectPoll,
                    CoherentSubmode::DirectPoll if rate < thr * (1.0 - HYSTERESIS) => CoherentSubmode::InvalDriven,
                    s => s,
                }
            }
        };
        if submode != self.submode {
            self.log.push(ControllerEvent {
                ts_ns: now,
                controller: "coherent_submode",
                old: self.submode.to_string(),
                new: submode.to_string(),
            });
            self.submode = submode;
            changed = true;
        }

        let ab = &cfg.adaptive_batching;
        let batch = if ab.enabled {
            let high = if self.effective_batch <= ab.low_batch {
                rate > ab.switch_rps
            } else {
                rate >= ab.switch_rps * (1.0 - HYSTERESIS)
            };
            if high {
                ab.high_batch
            } else {
                ab.low_batch
            }
        } else {
            cfg.batch
        };
        if batch != self.effective_batch {
            self.log.push(ControllerEvent {
                ts_ns: now,
                controller: "batch",
                old: self.effective_batch.to_string(),
                new: batch.to_string(),
            });
            self.effective_batch = batch;
            changed = true;
        }
        changed
    }

    pub fn log_csv(&self) -> String {
        controller_log_csv(&self.log)
    }
}

pub fn controller_log_csv(events: &[ControllerEvent]) -> String {
    let mut out = String::from("ts_ns,controller,old,new\n");
    for e in events {
        let _ = writeln!(out, "{:.3},{},{},{}", e.ts_ns, e.controller, e.old, e.new);
    }
    out
}

// ---------------------------------------------------------------- nic

/// NIC-wide state. Per-connection pipeline state is kept with each
/// connection's rings in the simulator.
#[derive(Debug, Clone)]
pub struct Nic {
    pub id: NicId,
    config: NicConfig,
    staged: Option<NicConfig>,
    pub flow: FlowTable,
    pub controllers: Controllers,
    pub rx_balancer: RxBalancer,
    pub rx_fsm: Fsm<RxFsm>,
    /// Entries fetched from TX rings in the current rate window.
    pub window_fetched: u64,
}

impl Nic {
    pub fn new(id: NicId, config: NicConfig) -> Self {
        Nic {
            id,
            controllers: Controllers::new(&config),
            config,
            staged: None,
            flow: FlowTable::new(),
            rx_balancer: RxBalancer::default(),
            rx_fsm: Fsm::new(RxFsm::AwaitWire),
            window_fetched: 0,
        }
    }

    pub fn config(&self) -> &NicConfig {
        &self.config
    }

    /// Validates and stages a soft change; it takes effect at the next
    /// pipeline step.
    pub fn soft_reconfigure(
        &mut self,
        field: &str,
        value: &serde_json::Value,
        ring_depth: usize,
    ) -> Result<(), NicError> {
        let base = self.staged.unwrap_or(self.config);
        let next = base.with_soft_field(field, value)?;
        next.validate(ring_depth)?;
        self.staged = Some(next);
        Ok(())
    }

    /// Applies a staged soft change. Returns true if one was pending.
    pub fn apply_staged(&mut self, now: f64) -> bool {
        let Some(next) = self.staged.take() else {
            return false;
        };
        debug_assert!(self.config.same_hard_fields(&next));
        self.config = next;
        // re-evaluate at the last measured rate so pinned policies and
        // plain batch changes apply immediately
        let rate = self.controllers.measured_rps();
        self.controllers.step(&self.config, now, rate);
        true
    }

    pub fn effective_batch(&self) -> usize {
        self.controllers.effective_batch()
    }

    pub fn submode(&self) -> CoherentSubmode {
        self.controllers.submode()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn coherent() -> NicConfig {
        NicConfig::new(TxMode::Coherent, ThreadingModel::Async, 1)
    }

    #[test]
    fn config_json_uses_field_names() {
        let cfg: NicConfig = serde_json::from_value(json!({
            "tx_mode": "doorbell", "threading_model": "sync", "batch_B": 4,
            "poll_threshold_rps": 2e6, "rate_window_us": 50.0,
            "adaptive_batching": {"enabled": false, "low_B": 1, "high_B": 4, "switch_rps": 8e6}
        }))
        .unwrap();
        assert_eq!(cfg.tx_mode, TxMode::Doorbell);
        assert_eq!(cfg.batch, 4);
        assert!(serde_json::from_value::<NicConfig>(json!({
            "tx_mode": "mmio", "threading_model": "sync", "batch_B": 1, "bogus": 1
        }))
        .is_err());
    }

    #[test]
    fn batch_bounds() {
        assert!(NicConfig::new(TxMode::Doorbell, ThreadingModel::Async, 0)
            .validate(64)
            .is_err());
        assert!(NicConfig::new(TxMode::Doorbell, ThreadingModel::Async, 65)
            .validate(64)
            .is_err());
        NicConfig::new(TxMode::Doorbell, ThreadingModel::Async, 64)
            .validate(64)
            .unwrap();
    }

    #[test]
    fn soft_and_hard_fields() {
        let mut nic = Nic::new(NicId(0), coherent());
        assert_eq!(
            nic.soft_reconfigure("tx_mode", &json!("mmio"), 64),
            Err(NicError::HardFieldViolation("tx_mode".into()))
        );
        assert!(matches!(
            nic.soft_reconfigure("batch_B", &json!(0), 64),
            Err(NicError::InvalidValue { .. })
        ));
        nic.soft_reconfigure("batch_B", &json!(4), 64).unwrap();
        assert_eq!(nic.effective_batch(), 1);
        assert!(nic.apply_staged(0.0));
        assert_eq!(nic.effective_batch(), 4);
        assert!(!nic.apply_staged(1.0));
    }

    #[test]
    fn submode_follows_threshold() {
        let cfg = coherent();
        let mut c = Controllers::new(&cfg);
        c.step(&cfg, 0.0, 0.5e6);
        assert_eq!(c.submode(), CoherentSubmode::InvalDriven);
        c.step(&cfg, 1.0, 2e6);
        assert_eq!(c.submode(), CoherentSubmode::DirectPoll);
        // inside the dead band: stays
        c.step(&cfg, 2.0, 0.95e6);
        assert_eq!(c.submode(), CoherentSubmode::DirectPoll);
        c.step(&cfg, 3.0, 0.85e6);
        assert_eq!(c.submode(), CoherentSubmode::InvalDriven);
        assert_eq!(c.log().len(), 2);
        assert!(c
            .log_csv()
            .starts_with("ts_ns,controller,old,new\n1.000,coherent_submode,inval_driven,direct_poll"));
    }

    #[test]
    fn pinned_policy_ignores_rate() {
        let cfg = coherent().with_policy(CoherentPolicy::DirectPoll);
        let mut c = Controllers::new(&cfg);
        assert_eq!(c.submode(), CoherentSubmode::DirectPoll);
        c.step(&cfg, 0.0, 0.0);
        assert_eq!(c.submode(), CoherentSubmode::DirectPoll);
    }

    #[test]
    fn adaptive_batch_hysteresis() {
        let cfg = coherent().with_adaptive_batching(1, 4);
        let mut c = Controllers::new(&cfg);
        assert_eq!(c.effective_batch(), 1);
        c.step(&cfg, 0.0, 9e6);
        assert_eq!(c.effective_batch(), 4);
        c.step(&cfg, 1.0, 7.5e6);
        assert_eq!(c.effective_batch(), 4);
        c.step(&cfg, 2.0, 7.0e6);
        assert_eq!(c.effective_batch(), 1);
    }

    #[test]
    fn fsm_edges() {
        let mut f = Fsm::new(TxFsm::IdlePoll);
        for s in [
            TxFsm::Fetch,
            TxFsm::Forward,
            TxFsm::Bookkeep,
            TxFsm::IdlePoll,
            TxFsm::Fetch,
            TxFsm::IdlePoll,
        ] {
            f.go(s);
        }
        assert_eq!(f.illegal_transitions(), 0);
        assert!(!TxFsm::legal(TxFsm::IdlePoll, TxFsm::Bookkeep));
        assert!(!RxFsm::legal(RxFsm::AwaitWire, RxFsm::Bookkeep));
    }

    #[test]
    fn balancer_alternates() {
        let mut b = RxBalancer::default();
        let picks: Vec<_> = (0..6).filter_map(|_| b.next(2, |_| true)).collect();
        assert_eq!(picks, vec![0, 1, 0, 1, 0, 1]);
        assert_eq!(b.next(2, |i| i == 1), Some(1));
        assert_eq!(b.next(2, |_| false), None);
    }

    #[test]
    fn wire_delay_and_routes() {
        let mut w = LoopbackWire::new(300.0);
        w.attach(NicId(1));
        assert_eq!(w.send(0.0, NicId(1)), Ok(300.0));
        assert_eq!(w.send(0.0, NicId(7)), Err(NicError::UnknownDestination(NicId(7))));
        let mut z = LoopbackWire::new(0.0);
        z.attach(NicId(0));
        assert_eq!(z.send(5.0, NicId(0)), Ok(5.0));
    }
}
