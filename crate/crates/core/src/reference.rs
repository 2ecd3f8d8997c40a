//! Published numbers for other RPC stacks, shipped as data.

use crate::sim::experiments::CompareRow;

pub const RELATED_WORK_CSV: &str = include_str!("../data/related_work.csv");

pub fn related_work() -> Vec<CompareRow> {
    RELATED_WORK_CSV
        .lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').map(str::trim).collect();
            CompareRow {
                system: f[0].to_string(),
                rtt_us: f[1].parse().expect("rtt column"),
                mrps: f
                    .get(2)
                    .filter(|s| !s.is_empty())
                    .map(|s| s.parse().expect("mrps column")),
                source: "published".into(),
            }
        })
        .collect()
}
