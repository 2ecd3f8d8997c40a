//! The event-driven system: hosts, NICs, rings, bus and wire wired together.

use super::event::EventQueue;
use super::loadgen::{Arrivals, LoadGen};
use super::metrics::Sample;
use crate::host::{echo_payload, ClientEndpoint, Completion, Handler, HostError, ServerEndpoint, ECHO_FN};
use crate::interconnect::paths::{
    coherent_fetch_occupancy, doorbell_fetch_occupancy, rx_dma_deliver, tx_coherent_submit, tx_doorbell_submit,
    tx_mmio_submit,
};
use crate::interconnect::{
    BusArbiter, CoherentSubmode, CoreClock, CostParams, DoorbellBatcher, Issuer, RpcTag, Trace, Transaction, TxMode,
    TxnKind,
};
use crate::nic::{ControllerEvent, Fsm, Nic, NicConfig, NicError, RxFsm, TxFsm};
use crate::protocol::{ConnectionRecord, NicId, RingPairHandle, RpcEntry, ThreadingModel, MAX_PAYLOAD};
use crate::rings::{CompletionQueue, RxRing, TxRing};
use std::collections::{BTreeMap, VecDeque};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Role {
    Client,
    Server,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ConnHandle(pub usize);

#[derive(Debug, Clone, Copy, PartialEq)]
enum FetchKind {
    Coherent,
    Doorbell,
}

#[derive(Debug, Clone, Copy)]
struct BusReq {
    side: usize,
    kind: FetchKind,
    take: usize,
    lines: usize,
    start: f64,
    occupancy: f64,
}

#[derive(Debug, Clone)]
enum Event {
    Arrival { conn: usize },
    Invalidation { side: usize },
    MmioArrive { side: usize },
    DoorbellArrive { side: usize, count: usize },
    BusWake,
    FetchDone(BusReq),
    DmaData { side: usize, count: usize },
    WireArrive { side: usize, entry: RpcEntry },
    RxVisible { side: usize },
    CqDeliver { conn: usize, entry: RpcEntry },
    Kick { conn: usize },
    ControllerTick { nic: usize },
}

/// One end of a connection: its ring pair, host core and NIC channel.
struct Side {
    nic: usize,
    conn: usize,
    role: Role,
    tx: TxRing,
    rx: RxRing,
    core: CoreClock,
    batcher: DoorbellBatcher,
    /// Doorbells that reached the NIC and wait for the channel.
    doorbells: VecDeque<usize>,
    /// Doorbells rung whose entries are not yet fetched.
    doorbells_inflight: usize,
    flush_batches: bool,
    busy: bool,
    tx_fsm: Fsm<TxFsm>,
    notified: usize,
    wire_in: VecDeque<RpcEntry>,
    visible: usize,
    rx_paused: bool,
    backlog: VecDeque<RpcEntry>,
}

struct Driver {
    load: LoadGen,
    arrivals: Arrivals,
    backlog: u64,
    active: bool,
}

struct Conn {
    id: u16,
    client_side: usize,
    server_side: usize,
    client: ClientEndpoint,
    server: ServerEndpoint,
    cq: CompletionQueue<Completion>,
    driver: Option<Driver>,
    issued: u64,
}

struct NicSlot {
    nic: Nic,
    sides: Vec<usize>,
    started: bool,
    last_tick: f64,
    /// Published but unfetched TX entries at the last tick.
    last_pending: usize,
    /// Completion time of the NIC's first fetch.
    active_since: Option<f64>,
}

/// Counters that hold regardless of trace recording.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WorldStats {
    pub events: u64,
    pub coherent_hits: u64,
    pub coherent_misses: u64,
    pub rx_stalls: u64,
    pub issue_blocked: u64,
}

/// End-of-run bookkeeping checks.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Conservation {
    pub issued: u64,
    pub completed: u64,
    pub outstanding: u64,
    pub fifo_violations: u64,
    pub errors: Vec<String>,
    pub illegal_transitions: u64,
}

impl Conservation {
    /// Every issued RPC completed once or is still in flight, in order.
    pub fn ok(&self) -> bool {
        self.issued == self.completed + self.outstanding
            && self.fifo_violations == 0
            && self.errors.is_empty()
            && self.illegal_transitions == 0
    }
}

pub use crate::host::ECHO_PAYLOAD_LEN;

pub const DEFAULT_DRAIN_BUDGET_NS: f64 = 10e6;

pub struct World {
    params: CostParams<f64>,
    q: EventQueue<Event>,
    nics: Vec<NicSlot>,
    nic_index: BTreeMap<NicId, usize>,
    sides: Vec<Side>,
    conns: Vec<Conn>,
    arbiter: BusArbiter<BusReq>,
    bus_wake: bool,
    wire: crate::nic::LoopbackWire,
    trace: Trace,
    samples: Vec<Sample>,
    errors: Vec<String>,
    stats: WorldStats,
}

impl World {
    pub fn new(params: CostParams<f64>, nics: &[(NicId, NicConfig)]) -> Result<Self, NicError> {
        let mut slots = Vec::new();
        let mut index = BTreeMap::new();
        let mut wire = crate::nic::LoopbackWire::new(params.t_wire);
        for &(id, cfg) in nics {
            cfg.validate(usize::MAX)?;
            if index.insert(id, slots.len()).is_some() {
                return Err(NicError::InvalidValue {
                    field: "nics".into(),
                    msg: format!("duplicate NIC id {}", id.0),
                });
            }
            wire.attach(id);
            slots.push(NicSlot {
                nic: Nic::new(id, cfg),
                sides: Vec::new(),
                started: false,
                last_tick: 0.0,
                last_pending: 0,
                active_since: None,
            });
        }
        Ok(World {
            arbiter: BusArbiter::new(slots.len().max(1), params.bus_cap_rps),
            params,
            q: EventQueue::new(),
            nics: slots,
            nic_index: index,
            sides: Vec::new(),
            conns: Vec::new(),
            bus_wake: false,
            wire,
            trace: Trace::new(false),
            samples: Vec::new(),
            errors: Vec::new(),
            stats: WorldStats::default(),
        })
    }

    pub fn enable_trace(&mut self) {
        self.trace = Trace::new(true);
    }

    pub fn params(&self) -> &CostParams<f64> {
        &self.params
    }

    pub fn now(&self) -> f64 {
        self.q.now()
    }

    pub fn trace(&self) -> &Trace {
        &self.trace
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn stats(&self) -> WorldStats {
        WorldStats {
            events: self.q.dispatched(),
            ..self.stats.clone()
        }
    }

    pub fn nic(&self, id: NicId) -> Option<&Nic> {
        self.nic_index.get(&id).map(|&i| &self.nics[i].nic)
    }

    pub fn controller_log(&self) -> Vec<(NicId, ControllerEvent)> {
        let mut out: Vec<_> = self
            .nics
            .iter()
            .flat_map(|s| s.nic.controllers.log().iter().map(move |e| (s.nic.id, e.clone())))
            .collect();
        out.sort_by(|a, b| a.1.ts_ns.total_cmp(&b.1.ts_ns).then(a.0.cmp(&b.0)));
        out
    }

    pub fn connections(&self) -> usize {
        self.conns.len()
    }

    pub fn connection_id(&self, c: ConnHandle) -> u16 {
        self.conns[c.0].id
    }

    pub fn ring_pairs(&self, c: ConnHandle) -> (RingPairHandle, RingPairHandle) {
        let conn = &self.conns[c.0];
        (RingPairHandle(conn.client_side), RingPairHandle(conn.server_side))
    }

    fn nic_idx(&self, id: NicId) -> Result<usize, HostError> {
        self.nic_index
            .get(&id)
            .copied()
            .ok_or(HostError::UnknownDestination(id))
    }

    /// Provisions a ring pair on each NIC and installs both flow records.
    /// The connection takes the client NIC's threading model.
    pub fn connect(&mut self, client: NicId, server: NicId, ring_depth: usize) -> Result<ConnHandle, HostError> {
        let cn = self.nic_idx(client)?;
        let sn = self.nic_idx(server)?;
        if !self.wire.is_attached(client) || !self.wire.is_attached(server) {
            return Err(HostError::UnknownDestination(server));
        }
        if cn == sn {
            return Err(HostError::InvalidConfig(
                "client and server must be on different NICs".into(),
            ));
        }
        if self.conns.len() > u16::MAX as usize {
            return Err(HostError::ResourceExhausted);
        }
        for n in [cn, sn] {
            self.nics[n]
                .nic
                .config()
                .validate(ring_depth)
                .map_err(|e| HostError::InvalidConfig(e.to_string()))?;
        }
        let ring = || -> Result<(TxRing, RxRing), HostError> {
            Ok((
                TxRing::new(ring_depth).map_err(|_| HostError::ResourceExhausted)?,
                RxRing::new(ring_depth).map_err(|_| HostError::ResourceExhausted)?,
            ))
        };
        let (ctx, crx) = ring()?;
        let (stx, srx) = ring()?;
        let id = self.conns.len() as u16;
        let conn = self.conns.len();
        let model = self.nics[cn].nic.config().threading_model;
        let cs = self.sides.len();
        let ss = cs + 1;
        for (n, side, local, remote) in [(cn, cs, client, server), (sn, ss, server, client)] {
            self.nics[n]
                .nic
                .flow
                .register(ConnectionRecord {
                    connection_id: id,
                    local_nic: local,
                    remote_nic: remote,
                    ring_pair: RingPairHandle(side),
                    threading_model: model,
                    next_rpc_id: 0,
                })
                .map_err(|e| HostError::InvalidConfig(e.to_string()))?;
        }
        for (n, role, tx, rx) in [(cn, Role::Client, ctx, crx), (sn, Role::Server, stx, srx)] {
            self.sides.push(Side {
                nic: n,
                conn,
                role,
                tx,
                rx,
                core: CoreClock::default(),
                batcher: DoorbellBatcher::default(),
                doorbells: VecDeque::new(),
                doorbells_inflight: 0,
                flush_batches: false,
                busy: false,
                tx_fsm: Fsm::new(TxFsm::IdlePoll),
                notified: 0,
                wire_in: VecDeque::new(),
                visible: 0,
                rx_paused: false,
                backlog: VecDeque::new(),
            });
            let s = self.sides.len() - 1;
            self.nics[n].sides.push(s);
        }
        self.conns.push(Conn {
            id,
            client_side: cs,
            server_side: ss,
            client: ClientEndpoint::new(id, model, ring_depth),
            server: ServerEndpoint::echo(),
            cq: CompletionQueue::default(),
            driver: None,
            issued: 0,
        });
        for s in [cs, ss] {
            if self.nics[self.sides[s].nic].started {
                self.kick(s);
            }
        }
        Ok(ConnHandle(conn))
    }

    pub fn register_handler(&mut self, c: ConnHandle, function_id: u16, handler: Handler) -> Result<(), HostError> {
        self.conns[c.0].server.register_handler(function_id, handler)
    }

    /// Attaches a load generator to a connection, starting now.
    pub fn set_load(&mut self, c: ConnHandle, load: LoadGen, seed: u64, horizon_ns: f64) {
        let now = self.now();
        let open = load.offered_mrps().is_some() || matches!(load, LoadGen::Ramp { .. });
        self.conns[c.0].driver = Some(Driver {
            load,
            arrivals: Arrivals::new(load, horizon_ns, seed),
            backlog: 0,
            active: true,
        });
        if open {
            self.q.push(now, Event::Arrival { conn: c.0 });
        } else {
            self.q.push(now, Event::Kick { conn: c.0 });
        }
    }

    pub fn set_rx_paused(&mut self, c: ConnHandle, role: Role, paused: bool) {
        let s = match role {
            Role::Client => self.conns[c.0].client_side,
            Role::Server => self.conns[c.0].server_side,
        };
        self.sides[s].rx_paused = paused;
        if !paused {
            self.consume_rx(s);
        }
    }

    fn start(&mut self) {
        for n in 0..self.nics.len() {
            if self.nics[n].started {
                continue;
            }
            self.nics[n].started = true;
            self.nics[n].last_tick = self.now();
            let window = self.nics[n].nic.config().rate_window_us * 1e3;
            self.q.push(self.now() + window, Event::ControllerTick { nic: n });
            for s in self.nics[n].sides.clone() {
                self.kick(s);
            }
        }
    }

    pub fn run_until(&mut self, t_end: f64) {
        self.start();
        while let Some(t) = self.q.peek_time() {
            if t > t_end {
                break;
            }
            self.step();
        }
        self.q.advance_to(t_end);
    }

    pub fn run_for(&mut self, dt: f64) {
        let end = self.now() + dt;
        self.run_until(end);
    }

    /// Runs until `done` holds or `deadline` passes; returns whether it held.
    fn run_while_not(&mut self, deadline: f64, done: impl Fn(&World) -> bool) -> bool {
        self.start();
        loop {
            if done(self) {
                return true;
            }
            match self.q.peek_time() {
                Some(t) if t <= deadline => self.step(),
                _ => {
                    self.q.advance_to(deadline);
                    return done(self);
                }
            }
        }
    }

    fn step(&mut self) {
        let Some((_, ev)) = self.q.pop() else { return };
        match ev {
            Event::Arrival { conn } => self.on_arrival(conn),
            Event::Invalidation { side } => self.on_invalidation(side),
            Event::MmioArrive { side } => self.on_mmio_arrive(side),
            Event::DoorbellArrive { side, count } => {
                self.sides[side].doorbells.push_back(count);
                self.start_doorbell(side);
            }
            Event::BusWake => {
                self.bus_wake = false;
                self.pump_bus();
            }
            Event::FetchDone(req) => match req.kind {
                FetchKind::Coherent => self.on_coherent_done(req),
                FetchKind::Doorbell => self.on_doorbell_done(req),
            },
            Event::DmaData { side, count } => self.on_dma_data(side, count),
            Event::WireArrive { side, entry } => {
                self.sides[side].wire_in.push_back(entry);
                self.rx_service(self.sides[side].nic);
            }
            Event::RxVisible { side } => {
                self.sides[side].visible += 1;
                self.consume_rx(side);
            }
            Event::CqDeliver { conn, entry } => self.complete(conn, entry),
            Event::Kick { conn } => self.drive(conn),
            Event::ControllerTick { nic } => self.on_tick(nic),
        }
    }

    // ------------------------------------------------------------ host side

    fn on_arrival(&mut self, conn: usize) {
        let now = self.now();
        let Some(d) = self.conns[conn].driver.as_mut() else {
            return;
        };
        // Arrivals keep accruing while a drain holds the caller; `drive`
        // issues the backlog once it is released.
        d.backlog += 1;
        if let Some(next) = d.arrivals.next_after(now) {
            self.q.push(next, Event::Arrival { conn });
        }
        self.drive(conn);
    }

    fn drive(&mut self, conn: usize) {
        loop {
            let c = &self.conns[conn];
            let Some(d) = &c.driver else { return };
            if !d.active {
                return;
            }
            let want = match d.load {
                LoadGen::ClosedLoop { window } => c.client.outstanding() < window,
                _ => d.backlog > 0,
            };
            if !want {
                return;
            }
            let payload = echo_payload(c.id, c.issued);
            match self.issue(conn, ECHO_FN, &payload) {
                Ok(_) => {
                    let d = self.conns[conn].driver.as_mut().expect("driver");
                    if !matches!(d.load, LoadGen::ClosedLoop { .. }) {
                        d.backlog -= 1;
                    }
                }
                Err(_) => {
                    self.stats.issue_blocked += 1;
                    return;
                }
            }
        }
    }

    fn issue(&mut self, conn: usize, function_id: u16, payload: &[u8]) -> Result<u32, HostError> {
        if payload.len() > MAX_PAYLOAD {
            return Err(HostError::PayloadTooLarge(payload.len()));
        }
        let c = &self.conns[conn];
        if !c.client.can_issue() {
            return Err(match c.client.model {
                ThreadingModel::Sync => HostError::SyncBusy,
                ThreadingModel::Async => HostError::WouldBlock,
            });
        }
        let s = c.client_side;
        let id = c.id;
        let slot = self.sides[s].tx.acquire().map_err(|_| HostError::WouldBlock)?;
        let nic = self.sides[s].nic;
        let rpc = self.nics[nic]
            .nic
            .flow
            .lookup_mut(id)
            .expect("registered")
            .allocate_rpc_id();
        let now = self.now();
        let entry = self.conns[conn].client.begin(rpc, function_id, payload, now)?;
        self.conns[conn].issued += 1;
        self.publish(s, slot, entry);
        Ok(rpc)
    }

    /// Non-blocking call; fails with `WouldBlock` when the TX ring is full.
    pub fn try_call(&mut self, c: ConnHandle, function_id: u16, payload: &[u8]) -> Result<u32, HostError> {
        self.start();
        self.issue(c.0, function_id, payload)
    }

    /// Asynchronous call; virtually blocks the caller while the ring is full.
    pub fn call_async(&mut self, c: ConnHandle, function_id: u16, payload: &[u8]) -> Result<u32, HostError> {
        if self.conns[c.0].client.model != ThreadingModel::Async {
            return Err(HostError::ThreadingMismatch(ThreadingModel::Sync));
        }
        let deadline = self.now() + DEFAULT_DRAIN_BUDGET_NS;
        loop {
            match self.try_call(c, function_id, payload) {
                Err(HostError::WouldBlock) => {
                    let s = self.conns[c.0].client_side;
                    let freed = self.run_while_not(deadline, |w| {
                        w.conns[c.0].client.can_issue() && w.sides[s].tx.outstanding() < w.sides[s].tx.depth()
                    });
                    if !freed {
                        return Err(HostError::WouldBlock);
                    }
                }
                other => return other,
            }
        }
    }

    /// Drains the connection's completion queue.
    pub fn poll_completions(&mut self, c: ConnHandle) -> Vec<Completion> {
        self.conns[c.0].cq.drain()
    }

    /// Blocking call: issues, then advances virtual time to the response.
    pub fn call_sync(&mut self, c: ConnHandle, function_id: u16, payload: &[u8]) -> Result<Vec<u8>, HostError> {
        if self.conns[c.0].client.model != ThreadingModel::Sync {
            return Err(HostError::ThreadingMismatch(ThreadingModel::Async));
        }
        let rpc = self.try_call(c, function_id, payload)?;
        let deadline = self.now() + 1e9;
        if !self.run_while_not(deadline, |w| w.conns[c.0].client.blocked_on().is_none()) {
            return Err(HostError::Timeout(rpc));
        }
        let mut found = None;
        let mut rest = Vec::new();
        for comp in self.conns[c.0].cq.drain() {
            if comp.rpc_id == rpc && found.is_none() {
                found = Some(comp);
            } else {
                rest.push(comp);
            }
        }
        for comp in rest {
            let _ = self.conns[c.0].cq.push(comp);
        }
        let comp = found.ok_or(HostError::Timeout(rpc))?;
        comp.result.map_err(HostError::HandlerError)
    }

    /// Sync round-trip time of one echo, in ns.
    pub fn measure_sync_rtt(&mut self, c: ConnHandle) -> Result<f64, HostError> {
        let t0 = self.now();
        self.call_sync(c, ECHO_FN, b"ping")?;
        Ok(self.now() - t0)
    }

    fn tag_of(entry: &RpcEntry) -> RpcTag {
        RpcTag::of(entry.header.connection_id, entry.header.rpc_id, entry.header.kind)
    }

    fn publish(&mut self, s: usize, slot: usize, entry: RpcEntry) {
        let now = self.now();
        let tag = Self::tag_of(&entry);
        let core = Issuer::Core(s as u32);
        self.sides[s].tx.publish(slot, &entry);
        self.trace
            .record(Transaction::new(now, core, TxnKind::HostPublish, 1).tagged(tag));
        let n = self.sides[s].nic;
        let cfg = *self.nics[n].nic.config();
        match cfg.tx_mode {
            TxMode::Mmio => {
                let (txns, times) = tx_mmio_submit(&self.params, &mut self.sides[s].core, now, &[tag], core);
                self.trace.extend(txns);
                self.q.push(times[0].nic_visible, Event::MmioArrive { side: s });
            }
            TxMode::Doorbell => {
                let b = self.nics[n].nic.effective_batch();
                let side = &mut self.sides[s];
                let ring = match side.batcher.push(b) {
                    Some(k) => Some(k),
                    None if side.flush_batches || (cfg.opportunistic_batching && side.doorbells_inflight == 0) => {
                        side.batcher.flush()
                    }
                    None => None,
                };
                if let Some(k) = ring {
                    self.ring_doorbell(s, k);
                }
            }
            TxMode::Coherent => {
                let sub = self.nics[n].nic.submode();
                if let Some((t, at)) = tx_coherent_submit(&self.params, now, sub, core) {
                    self.trace.record(t.tagged(tag));
                    self.q.push(at, Event::Invalidation { side: s });
                }
            }
        }
    }

    fn server_reply(&mut self, s: usize, reply: RpcEntry) {
        if self.sides[s].backlog.is_empty() {
            if let Ok(slot) = self.sides[s].tx.acquire() {
                self.publish(s, slot, reply);
                return;
            }
        }
        self.sides[s].backlog.push_back(reply);
    }

    fn on_tx_released(&mut self, s: usize) {
        match self.sides[s].role {
            Role::Client => self.drive(self.sides[s].conn),
            Role::Server => {
                while !self.sides[s].backlog.is_empty() {
                    let Ok(slot) = self.sides[s].tx.acquire() else { break };
                    let e = self.sides[s].backlog.pop_front().expect("non-empty");
                    self.publish(s, slot, e);
                }
            }
        }
    }

    fn consume_rx(&mut self, s: usize) {
        if self.sides[s].rx_paused {
            return;
        }
        let mut consumed = false;
        while self.sides[s].visible > 0 {
            let (slot, entry) = self.sides[s].rx.poll().expect("visible entry present");
            self.sides[s].rx.release(slot);
            self.sides[s].visible -= 1;
            consumed = true;
            let conn = self.sides[s].conn;
            match self.sides[s].role {
                Role::Server => {
                    let reply = self.conns[conn].server.handle(&entry);
                    self.server_reply(s, reply);
                }
                Role::Client => match self.conns[conn].client.model {
                    ThreadingModel::Async => {
                        let now = self.now();
                        let tag = Self::tag_of(&entry);
                        self.trace.record(
                            Transaction::new(now, Issuer::Core(s as u32), TxnKind::HostMemcpy64, 1).tagged(tag),
                        );
                        self.q
                            .push(now + self.params.t_memcpy, Event::CqDeliver { conn, entry });
                    }
                    ThreadingModel::Sync => self.complete(conn, entry),
                },
            }
        }
        if consumed {
            self.rx_service(self.sides[s].nic);
        }
    }

    fn complete(&mut self, conn: usize, entry: RpcEntry) {
        let now = self.now();
        match self.conns[conn].client.complete(&entry, now) {
            Err(e) => {
                debug_assert!(false, "{e}");
                self.errors.push(e.to_string());
            }
            Ok(comp) => {
                if self.conns[conn].driver.is_some() {
                    self.samples.push(Sample {
                        conn: comp.conn,
                        rpc_id: comp.rpc_id,
                        issue_ts: comp.issue_ts,
                        complete_ts: comp.complete_ts,
                    });
                    self.drive(conn);
                } else if self.conns[conn].cq.push(comp).is_err() {
                    self.errors.push(format!(
                        "completion queue overflow on connection {}",
                        self.conns[conn].id
                    ));
                }
            }
        }
    }

    // ------------------------------------------------------------ NIC TX

    fn nic_issuer(&self, n: usize) -> Issuer {
        Issuer::Nic(self.nics[n].nic.id.0)
    }

    fn apply_staged(&mut self, n: usize) {
        let before = (self.nics[n].nic.submode(), self.nics[n].nic.effective_batch());
        let now = self.now();
        if self.nics[n].nic.apply_staged(now) {
            self.on_controller_change(n, before);
        }
    }

    fn kick(&mut self, s: usize) {
        if self.nics[self.sides[s].nic].nic.config().tx_mode == TxMode::Coherent {
            self.start_coherent(s);
        }
    }

    fn ring_doorbell(&mut self, s: usize, count: usize) {
        let (txn, arrival) = tx_doorbell_submit(&self.params, self.now(), count, Issuer::Core(s as u32));
        self.trace.record(txn);
        self.sides[s].doorbells_inflight += 1;
        self.q.push(arrival, Event::DoorbellArrive { side: s, count });
    }

    fn request_bus(&mut self, req: BusReq) {
        let port = self.sides[req.side].nic;
        self.arbiter.request(port, req.lines as u32, req);
        self.pump_bus();
    }

    fn pump_bus(&mut self) {
        let now = self.now();
        if let Some(g) = self.arbiter.try_grant(now) {
            let r = g.tag;
            let done = (r.start + r.occupancy).max(g.end);
            self.q.push(done, Event::FetchDone(r));
        }
        if self.arbiter.is_backlogged() && !self.bus_wake {
            self.bus_wake = true;
            self.q.push(self.arbiter.busy_until(), Event::BusWake);
        }
    }

    fn forward(&mut self, s: usize, entry: RpcEntry) {
        let conn = &self.conns[self.sides[s].conn];
        let peer = if self.sides[s].role == Role::Client {
            conn.server_side
        } else {
            conn.client_side
        };
        let n = self.sides[s].nic;
        let dst = self.nics[self.sides[peer].nic].nic.id;
        let now = self.now();
        match self.wire.send(now, dst) {
            Ok(at) => {
                let tag = Self::tag_of(&entry);
                self.trace
                    .record(Transaction::new(now, self.nic_issuer(n), TxnKind::WireHop, 1).tagged(tag));
                self.q.push(at, Event::WireArrive { side: peer, entry });
            }
            Err(e) => self.errors.push(e.to_string()),
        }
    }

    /// Forward the fetched entries and release their slots.
    fn finish_fetch(&mut self, s: usize, fetched: Vec<(usize, RpcEntry)>) {
        let n = self.sides[s].nic;
        let now = self.now();
        self.nics[n].active_since.get_or_insert(now);
        self.nics[n].nic.window_fetched += fetched.len() as u64;
        let slots: Vec<usize> = fetched.iter().map(|&(slot, _)| slot).collect();
        for (_, e) in fetched {
            self.forward(s, e);
        }
        self.sides[s].tx.release(&slots);
        self.on_tx_released(s);
    }

    fn fsm_cycle(&mut self, s: usize, fetched_any: bool) {
        let sync = self.conns[self.sides[s].conn].client.model == ThreadingModel::Sync;
        let f = &mut self.sides[s].tx_fsm;
        if fetched_any {
            f.go(TxFsm::Forward);
            if !sync {
                f.go(TxFsm::Bookkeep);
            }
        }
        f.go(TxFsm::IdlePoll);
    }

    fn on_mmio_arrive(&mut self, s: usize) {
        self.apply_staged(self.sides[s].nic);
        let got = self.sides[s].tx.fetch(1);
        debug_assert_eq!(got.len(), 1, "mmio entry must be in the device buffer");
        self.sides[s].tx_fsm.go(TxFsm::Fetch);
        self.fsm_cycle(s, !got.is_empty());
        self.finish_fetch(s, got);
    }

    fn start_doorbell(&mut self, s: usize) {
        if self.sides[s].busy {
            return;
        }
        self.apply_staged(self.sides[s].nic);
        let Some(count) = self.sides[s].doorbells.pop_front() else {
            return;
        };
        self.sides[s].busy = true;
        self.sides[s].tx_fsm.go(TxFsm::Fetch);
        let req = BusReq {
            side: s,
            kind: FetchKind::Doorbell,
            take: count,
            lines: count,
            start: self.now(),
            occupancy: doorbell_fetch_occupancy(&self.params, count),
        };
        self.request_bus(req);
    }

    fn on_doorbell_done(&mut self, req: BusReq) {
        let s = req.side;
        let n = self.sides[s].nic;
        self.sides[s].busy = false;
        self.trace.record(Transaction::new(
            req.start,
            self.nic_issuer(n),
            TxnKind::DmaReadBatch,
            req.take as u32,
        ));
        self.fsm_cycle(s, true);
        self.q.push(
            self.now() + self.params.t_dma_read,
            Event::DmaData {
                side: s,
                count: req.take,
            },
        );
        self.start_doorbell(s);
    }

    fn on_dma_data(&mut self, s: usize, count: usize) {
        let got = self.sides[s].tx.fetch(count);
        debug_assert_eq!(got.len(), count, "doorbell covered unpublished entries");
        self.sides[s].doorbells_inflight -= 1;
        self.finish_fetch(s, got);
        let n = self.sides[s].nic;
        let side = &mut self.sides[s];
        if (side.flush_batches || self.nics[n].nic.config().opportunistic_batching) && side.doorbells_inflight == 0 {
            if let Some(k) = side.batcher.flush() {
                self.ring_doorbell(s, k);
            }
        }
    }

    fn on_invalidation(&mut self, s: usize) {
        let n = self.sides[s].nic;
        let nic = &self.nics[n].nic;
        if nic.config().tx_mode != TxMode::Coherent || nic.submode() != CoherentSubmode::InvalDriven {
            return;
        }
        self.sides[s].notified += 1;
        self.start_coherent(s);
    }

    fn start_coherent(&mut self, s: usize) {
        if self.sides[s].busy {
            return;
        }
        let n = self.sides[s].nic;
        self.apply_staged(n);
        let nic = &self.nics[n].nic;
        if self.sides[s].busy || nic.config().tx_mode != TxMode::Coherent {
            return;
        }
        let b = nic.effective_batch();
        let dirty = self.sides[s].tx.nic.dirty_pending();
        let (take, lines) = match nic.submode() {
            CoherentSubmode::DirectPoll => (dirty.min(b), b),
            CoherentSubmode::InvalDriven => {
                let k = self.sides[s].notified.min(dirty).min(b);
                if k == 0 {
                    return;
                }
                (k, k)
            }
        };
        self.sides[s].busy = true;
        self.sides[s].tx_fsm.go(TxFsm::Fetch);
        let req = BusReq {
            side: s,
            kind: FetchKind::Coherent,
            take,
            lines,
            start: self.now(),
            occupancy: coherent_fetch_occupancy(&self.params, lines),
        };
        self.request_bus(req);
    }

    fn on_coherent_done(&mut self, req: BusReq) {
        let s = req.side;
        let n = self.sides[s].nic;
        self.sides[s].busy = false;
        let got = if req.take > 0 {
            self.sides[s].tx.fetch(req.take)
        } else {
            Vec::new()
        };
        debug_assert_eq!(got.len(), req.take);
        let issuer = self.nic_issuer(n);
        if got.is_empty() {
            self.stats.coherent_misses += 1;
            self.trace.record(Transaction::new(
                req.start,
                issuer,
                TxnKind::CoherentPollMiss,
                req.lines as u32,
            ));
        } else {
            self.stats.coherent_hits += 1;
            self.trace.record(Transaction::new(
                req.start,
                issuer,
                TxnKind::CoherentPollHit,
                got.len() as u32,
            ));
        }
        let side = &mut self.sides[s];
        side.notified = side.notified.saturating_sub(got.len());
        self.fsm_cycle(s, !got.is_empty());
        self.finish_fetch(s, got);
        let nic = &self.nics[n].nic;
        if nic.config().tx_mode != TxMode::Coherent {
            return;
        }
        if nic.submode() == CoherentSubmode::InvalDriven {
            let dirty = self.sides[s].tx.nic.dirty_pending();
            let side = &mut self.sides[s];
            side.notified = side.notified.min(dirty);
        }
        self.start_coherent(s);
    }

    // ------------------------------------------------------------ NIC RX

    fn rx_service(&mut self, n: usize) {
        let stalled = loop {
            let slot = &mut self.nics[n];
            let sides = &self.sides;
            let ids = &slot.sides;
            let pick = slot.nic.rx_balancer.next(ids.len(), |i| {
                let sd = &sides[ids[i]];
                !sd.wire_in.is_empty() && sd.rx.nic.has_free_slot()
            });
            let Some(i) = pick else {
                break ids.iter().any(|&s| !sides[s].wire_in.is_empty());
            };
            let s = ids[i];
            if slot.nic.rx_fsm.state() != RxFsm::DeliverDma {
                slot.nic.rx_fsm.go(RxFsm::DeliverDma);
            }
            let entry = self.sides[s].wire_in.pop_front().expect("eligible");
            self.sides[s].rx.deliver(&entry).expect("free slot checked");
            let tag = Self::tag_of(&entry);
            let (txn, visible) = rx_dma_deliver(&self.params, self.now(), self.nic_issuer(n), tag);
            self.trace.record(txn);
            self.q.push(visible, Event::RxVisible { side: s });
            self.nics[n].nic.rx_fsm.go(RxFsm::Bookkeep);
        };
        let fsm = &mut self.nics[n].nic.rx_fsm;
        if stalled {
            self.stats.rx_stalls += 1;
            if fsm.state() != RxFsm::DeliverDma {
                fsm.go(RxFsm::DeliverDma);
            }
        } else if fsm.state() == RxFsm::Bookkeep {
            fsm.go(RxFsm::AwaitWire);
        }
    }

    // ------------------------------------------------------------ control

    fn on_tick(&mut self, n: usize) {
        self.apply_staged(n);
        let now = self.now();
        // Arrivals over the window: what the NIC fetched plus the growth of
        // what is still waiting in its TX rings.
        let pending: usize = self.nics[n]
            .sides
            .iter()
            .map(|&s| self.sides[s].tx.nic.dirty_pending())
            .sum();
        let slot = &mut self.nics[n];
        // A NIC that saw no traffic at the start of its first window is not
        // charged for the idle prefix.
        let from = slot.last_tick.max(slot.active_since.unwrap_or(now));
        let elapsed = (now - from).max(1e-9);
        let arrived = slot.nic.window_fetched as f64 + pending as f64 - slot.last_pending as f64;
        let rate = arrived.max(0.0) / (elapsed * 1e-9);
        slot.nic.window_fetched = 0;
        slot.last_pending = pending;
        slot.last_tick = now;
        let before = (slot.nic.submode(), slot.nic.effective_batch());
        let cfg = *slot.nic.config();
        if slot.nic.controllers.step(&cfg, now, rate) {
            self.on_controller_change(n, before);
        }
        self.q
            .push(now + cfg.rate_window_us * 1e3, Event::ControllerTick { nic: n });
    }

    fn on_controller_change(&mut self, n: usize, before: (CoherentSubmode, usize)) {
        let sub = self.nics[n].nic.submode();
        let b = self.nics[n].nic.effective_batch();
        let mode = self.nics[n].nic.config().tx_mode;
        for s in self.nics[n].sides.clone() {
            match mode {
                TxMode::Coherent => {
                    if sub != before.0 {
                        self.sides[s].notified = match sub {
                            CoherentSubmode::DirectPoll => 0,
                            CoherentSubmode::InvalDriven => self.sides[s].tx.nic.dirty_pending(),
                        };
                    }
                    self.start_coherent(s);
                }
                TxMode::Doorbell if b != before.1 => {
                    while let Some(k) = self.sides[s].batcher.ready(b) {
                        self.ring_doorbell(s, k);
                    }
                }
                _ => {}
            }
        }
    }

    /// Stages a soft change on a NIC; it applies at the NIC's next step.
    pub fn soft_reconfigure(&mut self, nic: NicId, field: &str, value: &serde_json::Value) -> Result<(), NicError> {
        let n = *self.nic_index.get(&nic).ok_or(NicError::UnknownDestination(nic))?;
        let depth = self.nics[n]
            .sides
            .iter()
            .map(|&s| self.sides[s].tx.depth())
            .min()
            .unwrap_or(usize::MAX);
        self.nics[n].nic.soft_reconfigure(field, value, depth)
    }

    fn conns_on(&self, n: usize) -> Vec<usize> {
        let mut v: Vec<usize> = self.nics[n].sides.iter().map(|&s| self.sides[s].conn).collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    /// Drains every connection on the NIC, then rebuilds it with `cfg`.
    pub fn hard_reconfigure(&mut self, nic: NicId, cfg: NicConfig, budget_ns: f64) -> Result<(), NicError> {
        let n = *self.nic_index.get(&nic).ok_or(NicError::UnknownDestination(nic))?;
        let depth = self.nics[n]
            .sides
            .iter()
            .map(|&s| self.sides[s].tx.depth())
            .min()
            .unwrap_or(usize::MAX);
        cfg.validate(depth)?;
        let conns = self.conns_on(n);
        let mut was_active = Vec::new();
        for &c in &conns {
            if let Some(d) = self.conns[c].driver.as_mut() {
                was_active.push((c, d.active));
                d.active = false;
            }
            for s in [self.conns[c].client_side, self.conns[c].server_side] {
                self.sides[s].flush_batches = true;
                if self.sides[s].doorbells_inflight == 0 {
                    if let Some(k) = self.sides[s].batcher.flush() {
                        self.ring_doorbell(s, k);
                    }
                }
            }
        }
        let deadline = self.now() + budget_ns;
        let watch = conns.clone();
        let drained = self.run_while_not(deadline, |w| {
            watch.iter().all(|&c| {
                let conn = &w.conns[c];
                conn.client.outstanding() == 0 && w.sides[conn.server_side].backlog.is_empty()
            })
        });
        for &c in &conns {
            for s in [self.conns[c].client_side, self.conns[c].server_side] {
                self.sides[s].flush_batches = false;
            }
        }
        let restore = |w: &mut World| {
            for &(c, active) in &was_active {
                if let Some(d) = w.conns[c].driver.as_mut() {
                    d.active = active;
                }
            }
            for &(c, _) in &was_active {
                w.drive(c);
            }
        };
        if !drained {
            let outstanding = conns.iter().map(|&c| self.conns[c].client.outstanding()).sum();
            restore(self);
            return Err(NicError::DrainTimeout {
                budget_us: budget_ns / 1e3,
                outstanding,
            });
        }
        let old = std::mem::replace(&mut self.nics[n].nic, Nic::new(nic, cfg));
        self.nics[n].nic.flow = old.flow;
        for s in self.nics[n].sides.clone() {
            let side = &mut self.sides[s];
            side.notified = 0;
            side.doorbells.clear();
        }
        for s in self.nics[n].sides.clone() {
            self.kick(s);
        }
        restore(self);
        Ok(())
    }

    pub fn outstanding(&self, c: ConnHandle) -> usize {
        self.conns[c.0].client.outstanding()
    }

    pub fn conservation(&self) -> Conservation {
        let mut out = Conservation {
            errors: self.errors.clone(),
            ..Default::default()
        };
        for c in &self.conns {
            out.issued += c.issued;
            out.completed += c.client.completed();
            out.outstanding += c.client.outstanding() as u64;
            out.fifo_violations += c.client.fifo_violations();
        }
        out.illegal_transitions = self.sides.iter().map(|s| s.tx_fsm.illegal_transitions()).sum::<u64>()
            + self
                .nics
                .iter()
                .map(|n| n.nic.rx_fsm.illegal_transitions())
                .sum::<u64>();
        out
    }

    /// RX ring deliveries per connection at the server side.
    pub fn served_per_connection(&self) -> Vec<u64> {
        self.conns.iter().map(|c| c.server.served()).collect()
    }

    pub fn dump_tx_ring(&self, c: ConnHandle, role: Role) -> String {
        let conn = &self.conns[c.0];
        let s = if role == Role::Client {
            conn.client_side
        } else {
            conn.server_side
        };
        self.sides[s].tx.dump()
    }
}
