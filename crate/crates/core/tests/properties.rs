use nmrpc::interconnect::{calibrate, throughput_mrps, BusArbiter, Datapoint, Role};
use nmrpc::nic::{CoherentPolicy, Controllers, RxBalancer, HYSTERESIS};
use nmrpc::protocol::{decode_entry, encode_entry, EntryHeader, ProtocolError, MAX_PAYLOAD};
use nmrpc::rings::{RingError, RxRing, TxRing};
use nmrpc::sim::{percentile, run, Arrival, EventQueue, LoadGen, Scenario};
use nmrpc::{CostParams, EntryKind, NicConfig, Params, ThreadingModel, TxMode};
use proptest::prelude::*;
use std::collections::VecDeque;

fn kind() -> impl Strategy<Value = EntryKind> {
    prop_oneof![
        Just(EntryKind::Request),
        Just(EntryKind::Response),
        Just(EntryKind::Error)
    ]
}

fn header() -> impl Strategy<Value = EntryHeader> {
    (any::<bool>(), kind(), any::<u16>(), any::<u32>(), any::<u16>()).prop_map(|(valid, kind, c, r, f)| EntryHeader {
        valid,
        kind,
        connection_id: c,
        rpc_id: r,
        function_id: f,
    })
}

#[derive(Debug, Clone)]
enum TxOp {
    Submit,
    Fetch(usize),
    Release(usize),
}

#[derive(Debug, Clone)]
enum RxOp {
    Deliver,
    Poll,
    Release,
}

proptest! {
    #[test]
    fn entry_round_trips(h in header(), payload in prop::collection::vec(any::<u8>(), 0..=MAX_PAYLOAD)) {
        let bytes = encode_entry(&h, &payload).unwrap();
        prop_assert_eq!(bytes.len(), 64);
        prop_assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), h.rpc_id);
        prop_assert_eq!(bytes[10] as usize, payload.len());
        let e = decode_entry(&bytes).unwrap();
        prop_assert_eq!(e.header, h);
        prop_assert_eq!(e.payload(), &payload[..]);
        prop_assert_eq!(e.encode(), bytes);
    }

    #[test]
    fn oversized_payload_is_rejected(h in header(), extra in 1usize..64) {
        let payload = vec![0xAB; MAX_PAYLOAD + extra];
        prop_assert_eq!(encode_entry(&h, &payload), Err(ProtocolError::PayloadTooLarge(MAX_PAYLOAD + extra)));
    }

    #[test]
    fn corrupt_flag_or_kind_is_malformed(h in header(), flag in 2u8.., k in 3u8..) {
        let good = encode_entry(&h, b"x").unwrap();
        let mut bad = good;
        bad[0] = flag;
        prop_assert!(matches!(decode_entry(&bad), Err(ProtocolError::MalformedEntry(_))));
        let mut bad = good;
        bad[1] = k;
        prop_assert!(matches!(decode_entry(&bad), Err(ProtocolError::MalformedEntry(_))));
    }

    /// The TX ring against a queue model: published ids come out of fetch in
    /// order, and acquire blocks exactly when every slot is outstanding.
    #[test]
    fn tx_ring_matches_queue_model(
        depth_log in 1u32..5,
        ops in prop::collection::vec(prop_oneof![
            3 => Just(TxOp::Submit),
            2 => (1usize..8).prop_map(TxOp::Fetch),
            2 => (1usize..8).prop_map(TxOp::Release),
        ], 1..200),
    ) {
        let depth = 1usize << depth_log;
        let mut ring = TxRing::new(depth).unwrap();
        let mut published: VecDeque<u32> = VecDeque::new();
        let mut fetched: VecDeque<usize> = VecDeque::new();
        let mut next = 0u32;
        for op in ops {
            match op {
                TxOp::Submit => {
                    let outstanding = published.len() + fetched.len();
                    match ring.acquire() {
                        Ok(slot) => {
                            prop_assert!(outstanding < depth);
                            let e = nmrpc::RpcEntry::request(3, next, 0, &next.to_le_bytes()).unwrap();
                            ring.publish(slot, &e);
                            published.push_back(next);
                            next += 1;
                        }
                        Err(RingError::WouldBlock) => prop_assert_eq!(outstanding, depth),
                        Err(e) => prop_assert!(false, "unexpected {e}"),
                    }
                }
                TxOp::Fetch(k) => {
                    let got = ring.fetch(k);
                    prop_assert_eq!(got.len(), k.min(published.len()));
                    for (slot, e) in got {
                        prop_assert_eq!(Some(e.header.rpc_id), published.pop_front());
                        prop_assert!(e.header.valid);
                        fetched.push_back(slot);
                    }
                }
                TxOp::Release(k) => {
                    let n = k.min(fetched.len());
                    let slots: Vec<usize> = fetched.drain(..n).collect();
                    ring.release(&slots);
                }
            }
            prop_assert_eq!(ring.outstanding(), published.len() + fetched.len());
            prop_assert_eq!(ring.nic.dirty_pending(), published.len());
        }
    }

    /// The RX ring against a queue model: backpressure exactly when every
    /// slot holds an unreleased entry, and polls return delivery order.
    #[test]
    fn rx_ring_matches_queue_model(
        depth_log in 1u32..5,
        ops in prop::collection::vec(prop_oneof![
            3 => Just(RxOp::Deliver),
            2 => Just(RxOp::Poll),
            2 => Just(RxOp::Release),
        ], 1..200),
    ) {
        let depth = 1usize << depth_log;
        let mut ring = RxRing::new(depth).unwrap();
        let mut delivered: VecDeque<u32> = VecDeque::new();
        let mut polled: VecDeque<usize> = VecDeque::new();
        let mut next = 0u32;
        for op in ops {
            match op {
                RxOp::Deliver => {
                    let occupied = delivered.len() + polled.len();
                    prop_assert_eq!(ring.nic.has_free_slot(), occupied < depth);
                    let e = nmrpc::RpcEntry::request(3, next, 0, &[]).unwrap();
                    match ring.deliver(&e) {
                        Ok(_) => {
                            prop_assert!(occupied < depth);
                            delivered.push_back(next);
                            next += 1;
                        }
                        Err(RingError::Backpressure) => prop_assert_eq!(occupied, depth),
                        Err(e) => prop_assert!(false, "unexpected {e}"),
                    }
                }
                RxOp::Poll => match ring.poll() {
                    Some((slot, e)) => {
                        prop_assert_eq!(Some(e.header.rpc_id), delivered.pop_front());
                        polled.push_back(slot);
                    }
                    None => prop_assert!(delivered.is_empty()),
                },
                RxOp::Release => {
                    if let Some(slot) = polled.pop_front() {
                        ring.release(slot);
                    }
                }
            }
            prop_assert_eq!(ring.host.unreleased(), polled.len());
        }
    }

    /// With every port backlogged, round-robin keeps grant counts within one
    /// of each other and never leaves a gap on the endpoint.
    #[test]
    fn arbiter_is_fair_and_work_conserving(ports in 1usize..9, depth in 1u64..40, cap in 1e6f64..1e9) {
        let mut arb = BusArbiter::new(ports, cap);
        for p in 0..ports {
            for _ in 0..depth {
                arb.request(p, 1, ());
            }
        }
        let mut now = 0.0;
        let mut granted = 0u64;
        while let Some(g) = arb.try_grant(now) {
            prop_assert!((g.start - now).abs() < 1e-9);
            prop_assert!((g.end - g.start - 1e9 / cap).abs() < 1e-6);
            now = g.end;
            granted += 1;
            let c = arb.grant_counts();
            let (lo, hi) = (c.iter().min().unwrap(), c.iter().max().unwrap());
            prop_assert!(hi - lo <= 1, "grant counts {c:?}");
        }
        prop_assert_eq!(granted, ports as u64 * depth);
        let expected = granted as f64 * 1e9 / cap;
        prop_assert!((now - expected).abs() <= 1e-9 * expected.max(1.0));
    }

    #[test]
    fn arbiter_never_grants_while_busy(lines in prop::collection::vec(1u32..8, 1..20), probe in 0.0f64..1.0) {
        let mut arb = BusArbiter::new(2, 1e8);
        for (i, &l) in lines.iter().enumerate() {
            arb.request(i % 2, l, i);
        }
        let g = arb.try_grant(0.0).unwrap();
        let t = g.end * probe;
        if t < g.end {
            prop_assert!(arb.try_grant(t).is_none());
        }
        prop_assert_eq!(arb.line_counts().iter().sum::<u64>(), u64::from(lines[0]));
    }

    /// Nearest-rank percentile against a direct count.
    #[test]
    fn percentile_matches_rank_definition(mut xs in prop::collection::vec(-1e6f64..1e6, 1..300), q in 0.001f64..=1.0) {
        xs.sort_by(f64::total_cmp);
        let v = percentile(&xs, q);
        let at_or_below = xs.iter().filter(|&&x| x <= v).count();
        let below = xs.iter().filter(|&&x| x < v).count();
        let need = (q * xs.len() as f64).ceil() as usize;
        prop_assert!(at_or_below >= need.max(1));
        prop_assert!(below < need.max(1));
    }

    /// Events pop in time order, ties in insertion order.
    #[test]
    fn event_queue_is_a_stable_time_sort(times in prop::collection::vec(0u32..50, 0..200)) {
        let mut q = EventQueue::new();
        for (i, &t) in times.iter().enumerate() {
            q.push(t as f64, i);
        }
        let mut oracle: Vec<(u32, usize)> = times.iter().copied().zip(0..).collect();
        oracle.sort_by_key(|&(t, _)| t);
        let mut popped = Vec::new();
        while let Some((t, i)) = q.pop() {
            prop_assert_eq!(q.now(), t);
            popped.push((t as u32, i));
        }
        prop_assert_eq!(popped, oracle);
        prop_assert_eq!(q.dispatched(), times.len() as u64);
    }

    /// Calibration recovers occupancy parameters from throughputs generated
    /// by `B * 1000 / (a + b * B)`.
    #[test]
    fn calibration_recovers_synthetic_parameters(
        mmio in 50.0f64..500.0,
        db in (20.0f64..400.0, 10.0f64..200.0),
        coh in (10.0f64..200.0, 10.0f64..200.0),
        batches in prop::collection::btree_set(1usize..64, 2..6),
    ) {
        let rate = |a: f64, b: f64, n: usize| n as f64 * 1e3 / (a + b * n as f64);
        let mut points = vec![Datapoint { mode: TxMode::Mmio, batch: 1, mrps: 1e3 / mmio, role: Role::Fit }];
        for &n in &batches {
            points.push(Datapoint { mode: TxMode::Doorbell, batch: n, mrps: rate(db.0, db.1, n), role: Role::Fit });
            points.push(Datapoint { mode: TxMode::Coherent, batch: n, mrps: rate(coh.0, coh.1, n), role: Role::Fit });
        }
        let cal = calibrate(&points, &Params::default()).unwrap();
        let close = |got: f64, want: f64| (got - want).abs() <= 1e-6 * want;
        prop_assert!(close(cal.params.t_mmio, mmio));
        prop_assert!(close(cal.params.t_doorbell, db.0), "{} vs {}", cal.params.t_doorbell, db.0);
        prop_assert!(close(cal.params.t_entry, db.1));
        prop_assert!(close(cal.params.t_poll, coh.0));
        prop_assert!(close(cal.params.t_cl, coh.1));
        prop_assert!(cal.max_abs_rel_err(Role::Fit) < 1e-9);
    }

    /// The closed form gives the same answer in single and double precision.
    #[test]
    fn closed_form_is_precision_independent(b in 1usize..64, mode in prop_oneof![Just(TxMode::Mmio), Just(TxMode::Doorbell), Just(TxMode::Coherent)]) {
        let p64 = Params::default();
        let p32: CostParams<f32> = p64.cast();
        let a = throughput_mrps(&p64, mode, b);
        let c = f64::from(throughput_mrps(&p32, mode, b));
        prop_assert!((a - c).abs() <= 1e-5 * a);
        let closed = match mode {
            TxMode::Mmio => 1e3 / p64.t_mmio,
            TxMode::Doorbell => b as f64 * 1e3 / (p64.t_doorbell + b as f64 * p64.t_entry),
            TxMode::Coherent => b as f64 * 1e3 / (p64.t_poll + b as f64 * p64.t_cl),
        };
        prop_assert!((a - closed).abs() <= 1e-12 * closed);
    }

    /// Both soft controllers follow the hysteresis rule step for step.
    #[test]
    fn controllers_follow_hysteresis_rule(rates in prop::collection::vec(0.0f64..15e6, 1..120)) {
        let cfg = NicConfig::new(TxMode::Coherent, ThreadingModel::Async, 1)
            .with_policy(CoherentPolicy::Adaptive)
            .with_adaptive_batching(1, 4);
        let mut c = Controllers::new(&cfg);
        let (thr, sw) = (cfg.poll_threshold_rps, cfg.adaptive_batching.switch_rps);
        let mut direct = false;
        let mut high = false;
        for (i, &r) in rates.iter().enumerate() {
            let before = c.log().len();
            c.step(&cfg, i as f64 * 1e5, r);
            direct = if direct { r >= thr * (1.0 - HYSTERESIS) } else { r > thr };
            high = if high { r >= sw * (1.0 - HYSTERESIS) } else { r > sw };
            prop_assert_eq!(c.submode() == nmrpc::interconnect::CoherentSubmode::DirectPoll, direct);
            prop_assert_eq!(c.effective_batch(), if high { 4 } else { 1 });
            // At most one switch per controller per window.
            prop_assert!(c.log().len() - before <= 2);
        }
    }

    /// A rate that stays inside the dead band never toggles a controller.
    #[test]
    fn dead_band_rates_never_switch(start_high in any::<bool>(), jitter in prop::collection::vec(0.0f64..1.0, 1..100)) {
        let cfg = NicConfig::new(TxMode::Coherent, ThreadingModel::Async, 1).with_adaptive_batching(1, 4);
        let sw = cfg.adaptive_batching.switch_rps;
        let mut c = Controllers::new(&cfg);
        if start_high {
            c.step(&cfg, 0.0, sw * 2.0);
        }
        let settled = c.effective_batch();
        let switches = c.log().iter().filter(|e| e.controller == "batch").count();
        for (i, &j) in jitter.iter().enumerate() {
            // Strictly inside (sw * (1 - HYSTERESIS), sw].
            let r = sw * (1.0 - HYSTERESIS * (1.0 - j).max(1e-6) * 0.999);
            c.step(&cfg, (i + 1) as f64 * 1e5, r.min(sw));
            prop_assert_eq!(c.effective_batch(), settled);
        }
        prop_assert_eq!(c.log().iter().filter(|e| e.controller == "batch").count(), switches);
    }

    #[test]
    fn balancer_is_round_robin_over_eligible(
        n in 1usize..10,
        masks in prop::collection::vec(prop::collection::vec(any::<bool>(), 10), 1..100),
    ) {
        let mut bal = RxBalancer::default();
        let mut all = RxBalancer::default();
        let mut counts = vec![0u64; n];
        for mask in &masks {
            let pick = bal.next(n, |i| mask[i]);
            match pick {
                Some(i) => prop_assert!(i < n && mask[i]),
                None => prop_assert!(mask[..n].iter().all(|&m| !m)),
            }
            counts[all.next(n, |_| true).unwrap()] += 1;
            let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
            prop_assert!(hi - lo <= 1);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, ..ProptestConfig::default() })]

    /// Small random simulations conserve RPCs and keep per-connection order.
    #[test]
    fn simulation_conserves_and_orders(
        mode in prop_oneof![Just(TxMode::Mmio), Just(TxMode::Doorbell), Just(TxMode::Coherent)],
        batch in 1usize..6,
        depth_log in 2u32..7,
        conns in 1usize..4,
        load in 0.5f64..15.0,
        poisson in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let batch = if mode == TxMode::Mmio { 1 } else { batch.min(1 << depth_log) };
        let cfg = NicConfig::new(mode, ThreadingModel::Async, batch);
        let arrival = if poisson { Arrival::Poisson } else { Arrival::Deterministic };
        let mut s = Scenario::pair(cfg, conns, 1 << depth_log, LoadGen::OpenLoop { rate_mrps: load / conns as f64, arrival });
        s.duration_us = 200.0;
        s.warmup_us = 20.0;
        s.seed = seed;
        let r = run(&s, Params::default()).unwrap();
        prop_assert!(r.conservation.ok(), "{:?}", r.conservation);
        prop_assert!(r.conservation.completed > 0);
        prop_assert_eq!(r.served_per_connection.len(), conns);
    }
}
