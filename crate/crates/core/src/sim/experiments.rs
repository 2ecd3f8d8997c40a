//! Experiment drivers built on single scenario runs.

use super::event::EventQueue;
use super::loadgen::{Arrival, LoadGen};
use super::metrics::RunMetrics;
use super::scenario::{run, Scenario, ScenarioError, DEFAULT_DURATION_US, DEFAULT_WARMUP_US};
use crate::interconnect::{BusArbiter, CostParams, TxMode};
use crate::nic::{CoherentPolicy, NicConfig};
use crate::protocol::ThreadingModel;
use crate::rings::DEFAULT_RING_DEPTH;
use std::fmt::Write as _;

/// Open-loop load for the latency columns.
pub const LATENCY_LOAD_MRPS: f64 = 4.0;
/// Ring depth and window of the saturation runs; deep enough that the
/// largest doorbell batch keeps the pipeline full.
pub const SATURATION_DEPTH: usize = 256;

pub const BAR_CONFIGS: [(TxMode, usize); 8] = [
    (TxMode::Mmio, 1),
    (TxMode::Doorbell, 1),
    (TxMode::Doorbell, 3),
    (TxMode::Doorbell, 7),
    (TxMode::Doorbell, 11),
    (TxMode::Doorbell, 32),
    (TxMode::Coherent, 1),
    (TxMode::Coherent, 4),
];

#[derive(Debug, Clone, PartialEq)]
pub struct BarRow {
    pub mode: TxMode,
    pub batch: usize,
    pub mrps: f64,
    pub median_us: f64,
    pub p99_us: f64,
}

pub fn saturation_scenario(mode: TxMode, batch: usize) -> Scenario {
    Scenario::pair(
        NicConfig::new(mode, ThreadingModel::Async, batch),
        1,
        SATURATION_DEPTH,
        LoadGen::closed(SATURATION_DEPTH),
    )
}

pub fn latency_scenario(mode: TxMode, batch: usize, load_mrps: f64) -> Scenario {
    Scenario::single_core(mode, batch, ThreadingModel::Async, LoadGen::open(load_mrps))
}

/// Cost parameters plus the run settings every experiment scenario inherits.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bench {
    pub params: CostParams<f64>,
    pub seed: u64,
    pub duration_us: f64,
    pub warmup_us: f64,
}

impl Bench {
    pub fn new(params: CostParams<f64>) -> Self {
        Bench {
            params,
            seed: 1,
            duration_us: DEFAULT_DURATION_US,
            warmup_us: DEFAULT_WARMUP_US,
        }
    }

    pub fn for_sweep(params: CostParams<f64>) -> Self {
        Bench {
            warmup_us: SWEEP_WARMUP_US,
            duration_us: SWEEP_DURATION_US,
            ..Bench::new(params)
        }
    }

    /// Takes seed and timing from a loaded scenario.
    pub fn from_scenario(params: CostParams<f64>, s: &Scenario) -> Self {
        Bench {
            params,
            seed: s.seed,
            duration_us: s.duration_us,
            warmup_us: s.warmup_us,
        }
    }

    pub fn apply(&self, s: &Scenario) -> Scenario {
        Scenario {
            seed: self.seed,
            duration_us: self.duration_us,
            warmup_us: self.warmup_us,
            ..s.clone()
        }
    }
}

impl Default for Bench {
    fn default() -> Self {
        Bench::new(CostParams::default())
    }
}

fn checked(s: &Scenario, b: &Bench) -> Result<RunMetrics, ScenarioError> {
    let r = run(&b.apply(s), b.params)?;
    if !r.conservation.ok() {
        return Err(ScenarioError::Conservation(r.conservation));
    }
    Ok(r.metrics)
}

pub fn saturated_mrps(mode: TxMode, batch: usize, b: &Bench) -> Result<f64, ScenarioError> {
    Ok(checked(&saturation_scenario(mode, batch), b)?.achieved_mrps)
}

/// One row per configuration: saturated throughput and latency at 4 Mrps.
pub fn bars(b: &Bench, configs: &[(TxMode, usize)]) -> Result<Vec<BarRow>, ScenarioError> {
    configs
        .iter()
        .map(|&(mode, batch)| {
            let mrps = saturated_mrps(mode, batch, b)?;
            let lat = checked(&latency_scenario(mode, batch, LATENCY_LOAD_MRPS), b)?;
            Ok(BarRow {
                mode,
                batch,
                mrps,
                median_us: lat.median_us,
                p99_us: lat.p99_us,
            })
        })
        .collect()
}

pub fn bars_csv(rows: &[BarRow]) -> String {
    let mut out = String::from("mode,B,mrps,median_us,p99_us\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{:.3},{:.3},{:.3}",
            r.mode, r.batch, r.mrps, r.median_us, r.p99_us
        );
    }
    out
}

/// A latency-throughput curve and the highest load it sustained.
#[derive(Debug, Clone, PartialEq)]
pub struct Curve {
    pub name: String,
    pub points: Vec<RunMetrics>,
    pub saturation_mrps: Option<f64>,
}

/// One open-loop run per load; the base scenario's loadgen is replaced.
pub fn sweep_load(base: &Scenario, b: &Bench, loads: &[f64]) -> Result<Vec<RunMetrics>, ScenarioError> {
    loads
        .iter()
        .map(|&l| {
            let arrival = match base.loadgen {
                LoadGen::OpenLoop { arrival, .. } => arrival,
                _ => Default::default(),
            };
            checked(&base.with_loadgen(LoadGen::OpenLoop { rate_mrps: l, arrival }), b)
        })
        .collect()
}

/// Saturation point of a curve: the best achieved rate once saturated.
pub fn saturation_of(points: &[RunMetrics]) -> Option<f64> {
    points
        .iter()
        .filter(|m| m.saturated)
        .map(|m| m.achieved_mrps)
        .fold(None, |best, a| Some(best.map_or(a, |b: f64| b.max(a))))
}

/// Curve selector: `coherent:B4`, `doorbell:B1`, `mmio`, `adaptive`, or
/// `adaptive:B1-B4`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CurveSpec {
    Fixed(TxMode, usize),
    Adaptive { low: usize, high: usize },
}

impl std::str::FromStr for CurveSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let parse_b = |t: &str| {
            t.trim_start_matches(['B', 'b'])
                .parse::<usize>()
                .map_err(|_| format!("bad batch `{t}` in `{s}`"))
        };
        match s.split_once(':') {
            None if s == "adaptive" => Ok(CurveSpec::Adaptive { low: 1, high: 4 }),
            None => Ok(CurveSpec::Fixed(s.parse()?, 1)),
            Some(("adaptive", range)) => {
                let (lo, hi) = range
                    .split_once('-')
                    .ok_or_else(|| format!("expected adaptive:B1-B4, got `{s}`"))?;
                Ok(CurveSpec::Adaptive {
                    low: parse_b(lo)?,
                    high: parse_b(hi)?,
                })
            }
            Some((mode, b)) => Ok(CurveSpec::Fixed(mode.parse()?, parse_b(b)?)),
        }
    }
}

impl std::fmt::Display for CurveSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CurveSpec::Fixed(m, b) => write!(f, "{m}:B{b}"),
            CurveSpec::Adaptive { low, high } => write!(f, "adaptive:B{low}-B{high}"),
        }
    }
}

impl CurveSpec {
    pub fn config(&self) -> NicConfig {
        match *self {
            CurveSpec::Fixed(mode, b) => NicConfig::new(mode, ThreadingModel::Async, b),
            CurveSpec::Adaptive { low, high } => {
                NicConfig::new(TxMode::Coherent, ThreadingModel::Async, low).with_adaptive_batching(low, high)
            }
        }
    }

    pub fn scenario(&self, arrival: Arrival) -> Scenario {
        Scenario::pair(
            self.config(),
            1,
            DEFAULT_RING_DEPTH,
            LoadGen::OpenLoop {
                rate_mrps: 1.0,
                arrival,
            },
        )
    }
}

/// Loads of the default single-core sweep, in Mrps.
pub fn default_sweep_loads() -> Vec<f64> {
    let mut v = vec![0.5, 1.5, 2.0];
    v.extend((3..=14).map(f64::from));
    v
}

/// Sweep run settings. The adaptive controllers need about one rate window
/// to switch and the backlog built before the switch drains slowly near
/// saturation, hence the long warmup.
pub const SWEEP_WARMUP_US: f64 = 1000.0;
pub const SWEEP_DURATION_US: f64 = 10_000.0;

/// Sweeps default to Poisson arrivals: with fixed intervals the two NICs'
/// equal-period poll loops lock to a phase set by history, and the curve
/// then depends on when a controller last switched.
pub const SWEEP_ARRIVAL: Arrival = Arrival::Poisson;

pub fn sweep_curves(
    b: &Bench,
    specs: &[CurveSpec],
    loads: &[f64],
    arrival: Arrival,
) -> Result<Vec<Curve>, ScenarioError> {
    specs
        .iter()
        .map(|spec| {
            let points = sweep_load(&spec.scenario(arrival), b, loads)?;
            Ok(Curve {
                name: spec.to_string(),
                saturation_mrps: saturation_of(&points),
                points,
            })
        })
        .collect()
}

pub fn curves_csv(curves: &[Curve]) -> String {
    let mut out = format!("curve,{}\n", super::metrics::METRICS_CSV_HEADER);
    for c in curves {
        for m in &c.points {
            let _ = writeln!(out, "{},{}", c.name, super::metrics::metrics_csv_row(m));
        }
    }
    out
}

/// Closed-loop window per thread in the scaling runs.
pub const SCALE_WINDOW: usize = 64;

pub fn scale_scenario(threads: usize) -> Scenario {
    Scenario::pair(
        NicConfig::new(TxMode::Coherent, ThreadingModel::Async, 4),
        threads,
        DEFAULT_RING_DEPTH,
        LoadGen::closed(SCALE_WINDOW),
    )
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalePoint {
    pub threads: usize,
    pub mrps: f64,
}

/// End-to-end throughput with one client connection per thread, all
/// clients on one NIC and all servers on the other.
pub fn scale_cores(b: &Bench, threads: &[usize]) -> Result<Vec<ScalePoint>, ScenarioError> {
    threads
        .iter()
        .map(|&t| {
            Ok(ScalePoint {
                threads: t,
                mrps: checked(&scale_scenario(t), b)?.achieved_mrps,
            })
        })
        .collect()
}

pub fn scale_csv(points: &[ScalePoint]) -> String {
    let mut out = String::from("threads,mrps\n");
    for p in points {
        let _ = writeln!(out, "{},{:.3}", p.threads, p.mrps);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RawPoint {
    pub threads: usize,
    pub offered_mrps: f64,
    pub achieved_mrps: f64,
}

/// Bare 64B reads through the arbiter: each thread keeps one read in
/// flight and needs `t_cl` of its own per read.
pub fn raw_bus_benchmark(b: &Bench, threads: &[usize], duration_ns: f64) -> Vec<RawPoint> {
    threads
        .iter()
        .map(|&t| {
            let warm = duration_ns / 10.0;
            let done = raw_bus_run(&b.params, t, warm, duration_ns);
            RawPoint {
                threads: t,
                offered_mrps: t as f64 * 1e3 / b.params.t_cl,
                achieved_mrps: done as f64 / (duration_ns - warm) * 1e3,
            }
        })
        .collect()
}

fn raw_bus_run(params: &CostParams<f64>, threads: usize, from: f64, to: f64) -> u64 {
    enum Ev {
        Wake,
        Done(usize),
    }
    let mut q: EventQueue<Ev> = EventQueue::new();
    let mut arb: BusArbiter<(usize, f64)> = BusArbiter::new(threads.max(1), params.bus_cap_rps);
    let mut wake = false;
    let mut count = 0u64;
    let pump = |q: &mut EventQueue<Ev>, arb: &mut BusArbiter<(usize, f64)>, wake: &mut bool| {
        let now = q.now();
        if let Some(g) = arb.try_grant(now) {
            let (th, start) = g.tag;
            q.push((start + params.t_cl).max(g.end), Ev::Done(th));
        }
        if arb.is_backlogged() && !*wake {
            *wake = true;
            q.push(arb.busy_until(), Ev::Wake);
        }
    };
    for th in 0..threads {
        arb.request(th, 1, (th, 0.0));
    }
    pump(&mut q, &mut arb, &mut wake);
    while let Some((t, ev)) = q.pop() {
        if t > to {
            break;
        }
        match ev {
            Ev::Wake => wake = false,
            Ev::Done(th) => {
                if t >= from {
                    count += 1;
                }
                arb.request(th, 1, (th, t));
            }
        }
        pump(&mut q, &mut arb, &mut wake);
    }
    count
}

pub fn rawbus_csv(points: &[RawPoint]) -> String {
    let mut out = String::from("threads,offered_mrps,achieved_mrps\n");
    for p in points {
        let _ = writeln!(out, "{},{:.3},{:.3}", p.threads, p.offered_mrps, p.achieved_mrps);
    }
    out
}

/// Idle-system round trip of blocking calls, coherent B=1.
pub fn sync_rtt_scenario() -> Scenario {
    Scenario::single_core(TxMode::Coherent, 1, ThreadingModel::Sync, LoadGen::closed(1))
}

/// Median sync round trip in microseconds.
pub fn sync_rtt_us(b: &Bench) -> Result<f64, ScenarioError> {
    Ok(checked(&sync_rtt_scenario(), b)?.median_us)
}

/// Async single-core saturation, coherent B=4.
pub fn async_saturation_mrps(b: &Bench) -> Result<f64, ScenarioError> {
    let s = Scenario::pair(
        NicConfig::new(TxMode::Coherent, ThreadingModel::Async, 4).with_policy(CoherentPolicy::Adaptive),
        1,
        DEFAULT_RING_DEPTH,
        LoadGen::closed(DEFAULT_RING_DEPTH),
    );
    Ok(checked(&s, b)?.achieved_mrps)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompareRow {
    pub system: String,
    pub rtt_us: f64,
    pub mrps: Option<f64>,
    pub source: String,
}

/// The simulated row followed by the shipped reference rows.
pub fn compare(b: &Bench) -> Result<Vec<CompareRow>, ScenarioError> {
    let mut rows = vec![CompareRow {
        system: "nmrpc".into(),
        rtt_us: sync_rtt_us(b)?,
        mrps: Some(async_saturation_mrps(b)?),
        source: "simulated".into(),
    }];
    rows.extend(crate::reference::related_work());
    Ok(rows)
}

pub fn compare_csv(rows: &[CompareRow]) -> String {
    let mut out = String::from("system,rtt_us,mrps,source\n");
    for r in rows {
        // Published values print as shipped; simulated ones are rounded.
        let fmt = |v: f64| match r.source.as_str() {
            "simulated" => format!("{v:.3}"),
            _ => v.to_string(),
        };
        let mrps = r.mrps.map(fmt).unwrap_or_default();
        let _ = writeln!(out, "{},{},{},{}", r.system, fmt(r.rtt_us), mrps, r.source);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn curve_spec_parsing() {
        assert_eq!("coherent:B4".parse(), Ok(CurveSpec::Fixed(TxMode::Coherent, 4)));
        assert_eq!("mmio".parse(), Ok(CurveSpec::Fixed(TxMode::Mmio, 1)));
        assert_eq!("adaptive".parse(), Ok(CurveSpec::Adaptive { low: 1, high: 4 }));
        assert_eq!("adaptive:B2-B8".parse(), Ok(CurveSpec::Adaptive { low: 2, high: 8 }));
        assert!("warp:B1".parse::<CurveSpec>().is_err());
        assert_eq!(CurveSpec::Fixed(TxMode::Doorbell, 3).to_string(), "doorbell:B3");
    }

    #[test]
    fn empty_sweep_is_empty() {
        let p = Bench::default();
        assert!(
            sweep_load(&CurveSpec::Fixed(TxMode::Coherent, 1).scenario(SWEEP_ARRIVAL), &p, &[])
                .unwrap()
                .is_empty()
        );
    }

    #[test]
    fn raw_single_thread_runs_unimpeded() {
        let p = Bench::default();
        let r = raw_bus_benchmark(&p, &[1], 200_000.0);
        assert!((r[0].achieved_mrps - r[0].offered_mrps).abs() / r[0].offered_mrps < 0.01);
    }
}
