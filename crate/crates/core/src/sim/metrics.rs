use serde::Serialize;
use std::fmt::Write as _;

/// Issue and completion time of one RPC, in virtual ns.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Sample {
    pub conn: u16,
    pub rpc_id: u32,
    pub issue_ts: f64,
    pub complete_ts: f64,
}

/// Relative shortfall below offered load that counts as saturation.
pub const SATURATION_EPS: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunMetrics {
    pub offered_mrps: f64,
    pub achieved_mrps: f64,
    pub median_us: f64,
    pub p99_us: f64,
    pub mean_us: f64,
    pub saturated: bool,
    /// RPCs whose latency entered the percentiles.
    pub measured: usize,
}

/// Nearest-rank percentile of sorted data; `q` in (0, 1].
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let rank = (q * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

impl RunMetrics {
    /// Reduces samples over the measurement window `[from, to)`.
    ///
    /// Throughput counts completions inside the window; latency uses RPCs
    /// both issued and completed inside it. `offered` is `None` for
    /// closed-loop runs, whose offered load is whatever they achieve.
    pub fn reduce(samples: &[Sample], from: f64, to: f64, offered: Option<f64>) -> Self {
        let secs = (to - from) * 1e-9;
        let done = samples
            .iter()
            .filter(|s| s.complete_ts >= from && s.complete_ts < to)
            .count();
        let raw = done as f64 / secs / 1e6;
        let mut lat: Vec<f64> = samples
            .iter()
            .filter(|s| s.issue_ts >= from && s.complete_ts < to)
            .map(|s| (s.complete_ts - s.issue_ts) / 1e3)
            .collect();
        lat.sort_by(f64::total_cmp);
        let mean = if lat.is_empty() {
            f64::NAN
        } else {
            lat.iter().sum::<f64>() / lat.len() as f64
        };
        let (offered_mrps, achieved_mrps, saturated) = match offered {
            Some(o) => {
                let a = raw.min(o);
                (o, a, a < o * (1.0 - SATURATION_EPS))
            }
            None => (raw, raw, false),
        };
        RunMetrics {
            offered_mrps,
            achieved_mrps,
            median_us: percentile(&lat, 0.5),
            p99_us: percentile(&lat, 0.99),
            mean_us: mean,
            saturated,
            measured: lat.len(),
        }
    }
}

pub const METRICS_CSV_HEADER: &str = "load_mrps,achieved_mrps,median_us,p99_us,saturated";

pub fn metrics_csv_row(m: &RunMetrics) -> String {
    format!(
        "{:.3},{:.3},{:.3},{:.3},{}",
        m.offered_mrps, m.achieved_mrps, m.median_us, m.p99_us, m.saturated
    )
}

pub fn metrics_csv<'a>(rows: impl IntoIterator<Item = &'a RunMetrics>) -> String {
    let mut out = String::from(METRICS_CSV_HEADER);
    out.push('\n');
    for m in rows {
        let _ = writeln!(out, "{}", metrics_csv_row(m));
    }
    out
}
