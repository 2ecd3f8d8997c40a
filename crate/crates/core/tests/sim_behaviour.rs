use nmrpc::host::{HostError, ECHO_FN};
use nmrpc::sim::scenario::build_world;
use nmrpc::sim::{run, Arrival, LoadGen, Role, RunMetrics, Scenario, ScenarioError, World};
use nmrpc::{NicConfig, NicError, NicId, Params, ThreadingModel, TxMode};
use serde_json::json;

const US: f64 = 1e3;

fn open(rate: f64, arrival: Arrival) -> LoadGen {
    LoadGen::OpenLoop {
        rate_mrps: rate,
        arrival,
    }
}

fn world(mode: TxMode, model: ThreadingModel, batch: usize) -> World {
    let cfg = NicConfig::new(mode, model, batch);
    World::new(Params::default(), &[(NicId(0), cfg), (NicId(1), cfg)]).unwrap()
}

#[test]
fn every_mode_conserves_rpcs_and_order() {
    for (mode, batch) in [
        (TxMode::Mmio, 1),
        (TxMode::Doorbell, 1),
        (TxMode::Doorbell, 4),
        (TxMode::Coherent, 1),
        (TxMode::Coherent, 4),
    ] {
        let mut s = Scenario::pair(
            NicConfig::new(mode, ThreadingModel::Async, batch),
            3,
            64,
            open(2.0, Arrival::Poisson),
        );
        s.seed = 11;
        let r = run(&s, Params::default()).unwrap();
        assert!(r.conservation.ok(), "{mode} B={batch}: {:?}", r.conservation);
        assert_eq!(r.conservation.fifo_violations, 0);
        assert!(r.conservation.completed > 1000, "{mode} B={batch}");
    }
}

#[test]
fn saturated_connections_share_the_nic_evenly() {
    let s = Scenario::pair(
        NicConfig::new(TxMode::Coherent, ThreadingModel::Async, 4),
        4,
        64,
        LoadGen::closed(32),
    );
    let r = run(&s, Params::default()).unwrap();
    assert!(r.conservation.ok());
    let served = &r.served_per_connection;
    let (lo, hi) = (*served.iter().min().unwrap(), *served.iter().max().unwrap());
    assert!(lo > 0);
    assert!((hi - lo) as f64 / hi as f64 <= 0.05, "served {served:?}");
}

#[test]
fn same_seed_gives_identical_runs() {
    let mut s = Scenario::single_core(TxMode::Coherent, 1, ThreadingModel::Async, open(6.0, Arrival::Poisson));
    s.seed = 5;
    let a = run(&s, Params::default()).unwrap();
    let b = run(&s, Params::default()).unwrap();
    assert_eq!(a.metrics, b.metrics);
    assert_eq!(a.controller_csv(), b.controller_csv());
    assert_eq!(a.stats, b.stats);
    s.seed = 6;
    let c = run(&s, Params::default()).unwrap();
    assert_ne!(a.metrics, c.metrics);
}

#[test]
fn warmup_length_does_not_move_the_median() {
    let median = |warmup| {
        let mut s = Scenario::single_core(TxMode::Coherent, 1, ThreadingModel::Async, LoadGen::open(4.0));
        s.duration_us = 4000.0;
        s.warmup_us = warmup;
        run(&s, Params::default()).unwrap().metrics.median_us
    };
    let (a, b) = (median(200.0), median(400.0));
    assert!((a - b).abs() / a < 0.02, "{a} vs {b}");
}

#[test]
fn soft_batch_change_applies_while_running() {
    let s = Scenario::single_core(TxMode::Doorbell, 1, ThreadingModel::Async, LoadGen::open(3.0));
    let mut w = build_world(&s, Params::default()).unwrap();
    w.run_until(500.0 * US);
    assert_eq!(w.nic(NicId(0)).unwrap().effective_batch(), 1);
    w.soft_reconfigure(NicId(0), "batch_B", &json!(4)).unwrap();
    w.soft_reconfigure(NicId(1), "batch_B", &json!(4)).unwrap();
    w.run_until(1500.0 * US);
    assert_eq!(w.nic(NicId(0)).unwrap().effective_batch(), 4);
    assert_eq!(w.nic(NicId(0)).unwrap().config().batch, 4);
    let c = w.conservation();
    assert!(c.ok(), "{c:?}");
    assert!(c.completed > 2500);
}

#[test]
fn soft_reconfigure_refuses_hard_and_bad_fields() {
    let mut w = world(TxMode::Coherent, ThreadingModel::Async, 1);
    assert_eq!(
        w.soft_reconfigure(NicId(0), "tx_mode", &json!("mmio")),
        Err(NicError::HardFieldViolation("tx_mode".into()))
    );
    assert!(matches!(
        w.soft_reconfigure(NicId(0), "batch_B", &json!(0)),
        Err(NicError::InvalidValue { .. })
    ));
    assert!(matches!(
        w.soft_reconfigure(NicId(0), "colour", &json!(1)),
        Err(NicError::UnknownField(_))
    ));
    assert_eq!(
        w.soft_reconfigure(NicId(7), "batch_B", &json!(2)),
        Err(NicError::UnknownDestination(NicId(7)))
    );
}

#[test]
fn hard_reconfigure_switches_interface_under_load() {
    let load = LoadGen::open(2.0);
    let mut s = Scenario::single_core(TxMode::Doorbell, 1, ThreadingModel::Async, load);
    s.duration_us = 4000.0;
    let mut w = build_world(&s, Params::default()).unwrap();
    w.run_until(1000.0 * US);
    let coherent = NicConfig::new(TxMode::Coherent, ThreadingModel::Async, 1);
    w.hard_reconfigure(NicId(0), coherent, 10e6).unwrap();
    w.hard_reconfigure(NicId(1), coherent, 10e6).unwrap();
    let switched = w.now();
    assert_eq!(w.nic(NicId(0)).unwrap().config().tx_mode, TxMode::Coherent);
    w.run_until(switched + 2000.0 * US);
    let c = w.conservation();
    assert!(c.ok(), "{c:?}");

    let after = RunMetrics::reduce(w.samples(), switched + 200.0 * US, w.now(), None);
    assert!(after.measured > 3000, "{after:?}");
    let mut reference = Scenario::single_core(TxMode::Coherent, 1, ThreadingModel::Async, load);
    reference.duration_us = 2000.0;
    let want = run(&reference, Params::default()).unwrap().metrics.median_us;
    assert!(
        (after.median_us - want).abs() / want < 0.05,
        "{} vs {want}",
        after.median_us
    );
}

#[test]
fn idle_hard_reconfigure_is_immediate() {
    let mut w = world(TxMode::Doorbell, ThreadingModel::Async, 1);
    w.connect(NicId(0), NicId(1), 16).unwrap();
    let t = w.now();
    w.hard_reconfigure(NicId(0), NicConfig::new(TxMode::Mmio, ThreadingModel::Async, 1), 1e3)
        .unwrap();
    assert_eq!(w.now(), t);
    assert_eq!(w.nic(NicId(0)).unwrap().config().tx_mode, TxMode::Mmio);
}

#[test]
fn stuck_drain_times_out_and_recovers() {
    let mut w = world(TxMode::Coherent, ThreadingModel::Async, 1);
    let c = w.connect(NicId(0), NicId(1), 16).unwrap();
    w.set_rx_paused(c, Role::Server, true);
    for _ in 0..4 {
        w.try_call(c, ECHO_FN, b"hi").unwrap();
    }
    let err = w
        .hard_reconfigure(
            NicId(0),
            NicConfig::new(TxMode::Mmio, ThreadingModel::Async, 1),
            50.0 * US,
        )
        .unwrap_err();
    assert!(matches!(err, NicError::DrainTimeout { outstanding: 4, .. }), "{err:?}");
    assert_eq!(w.nic(NicId(0)).unwrap().config().tx_mode, TxMode::Coherent);
    w.set_rx_paused(c, Role::Server, false);
    w.run_for(100.0 * US);
    assert_eq!(w.outstanding(c), 0);
    assert_eq!(w.poll_completions(c).len(), 4);
    assert!(w.conservation().ok());
}

#[test]
fn try_call_reports_a_full_ring() {
    let mut w = world(TxMode::Coherent, ThreadingModel::Async, 1);
    let c = w.connect(NicId(0), NicId(1), 4).unwrap();
    for _ in 0..4 {
        w.try_call(c, ECHO_FN, b"x").unwrap();
    }
    assert_eq!(w.try_call(c, ECHO_FN, b"x"), Err(HostError::WouldBlock));
    w.run_for(100.0 * US);
    assert!(w.try_call(c, ECHO_FN, b"x").is_ok());
}

#[test]
fn call_errors_are_typed() {
    let mut w = world(TxMode::Coherent, ThreadingModel::Async, 1);
    let c = w.connect(NicId(0), NicId(1), 8).unwrap();
    assert_eq!(w.try_call(c, ECHO_FN, &[0; 49]), Err(HostError::PayloadTooLarge(49)));
    assert_eq!(
        w.connect(NicId(0), NicId(9), 8),
        Err(HostError::UnknownDestination(NicId(9)))
    );
    assert!(matches!(
        w.call_sync(c, ECHO_FN, b"x"),
        Err(HostError::ThreadingMismatch(_))
    ));
}

#[test]
fn sync_calls_echo_and_surface_handler_errors() {
    let mut w = world(TxMode::Coherent, ThreadingModel::Sync, 1);
    let c = w.connect(NicId(0), NicId(1), 8).unwrap();
    w.register_handler(c, 5, Box::new(|_: &[u8]| Err("boom".to_string())))
        .unwrap();
    assert_eq!(w.call_sync(c, ECHO_FN, b"ping").unwrap(), b"ping");
    assert_eq!(w.call_sync(c, 5, b"x"), Err(HostError::HandlerError("boom".into())));
    let rtt = w.measure_sync_rtt(c).unwrap();
    assert!(rtt > 1000.0 && rtt < 5000.0, "{rtt}");
    assert!(w.conservation().ok());
}

#[test]
fn sync_doorbell_batching_is_rejected() {
    let s = Scenario::single_core(TxMode::Doorbell, 4, ThreadingModel::Sync, LoadGen::closed(1));
    match run(&s, Params::default()) {
        Err(ScenarioError::ConfigInvalid(fields)) => assert!(fields.iter().any(|f| f.field.contains("batch_B"))),
        other => panic!("expected a config error, got {other:?}"),
    }
}
