//! Round-robin arbitration of NIC-initiated reads over the shared endpoint.

use std::collections::VecDeque;

#[derive(Debug, Clone, PartialEq)]
pub struct Grant<Tag> {
    pub port: usize,
    pub tag: Tag,
    pub lines: u32,
    pub start: f64,
    pub end: f64,
}

/// Work-conserving round-robin server. Each grant occupies the endpoint for
/// `lines / bus_cap_rps`, so the aggregate rate never exceeds the cap.
#[derive(Debug, Clone)]
pub struct BusArbiter<Tag> {
    queues: Vec<VecDeque<(u32, Tag)>>,
    cursor: usize,
    busy_until: f64,
    unit_ns: f64,
    grants: Vec<u64>,
    lines: Vec<u64>,
}

impl<Tag> BusArbiter<Tag> {
    pub fn new(ports: usize, bus_cap_rps: f64) -> Self {
        assert!(ports >= 1 && bus_cap_rps > 0.0);
        BusArbiter {
            queues: (0..ports).map(|_| VecDeque::new()).collect(),
            cursor: 0,
            busy_until: 0.0,
            unit_ns: 1e9 / bus_cap_rps,
            grants: vec![0; ports],
            lines: vec![0; ports],
        }
    }

    pub fn ports(&self) -> usize {
        self.queues.len()
    }

    pub fn request(&mut self, port: usize, lines: u32, tag: Tag) {
        debug_assert!(lines >= 1);
        self.queues[port].push_back((lines, tag));
    }

    pub fn busy_until(&self) -> f64 {
        self.busy_until
    }

    pub fn is_backlogged(&self) -> bool {
        self.queues.iter().any(|q| !q.is_empty())
    }

    /// Grants the next request if the endpoint is idle at `now`.
    pub fn try_grant(&mut self, now: f64) -> Option<Grant<Tag>> {
        if now < self.busy_until {
            return None;
        }
        let n = self.queues.len();
        let port = (0..n)
            .map(|k| (self.cursor + k) % n)
            .find(|&p| !self.queues[p].is_empty())?;
        let (lines, tag) = self.queues[port].pop_front().expect("non-empty");
        self.cursor = (port + 1) % n;
        let start = now;
        let end = start + lines as f64 * self.unit_ns;
        self.busy_until = end;
        self.grants[port] += 1;
        self.lines[port] += lines as u64;
        Some(Grant {
            port,
            tag,
            lines,
            start,
            end,
        })
    }

    pub fn grant_counts(&self) -> &[u64] {
        &self.grants
    }

    pub fn line_counts(&self) -> &[u64] {
        &self.lines
    }
}

/// Grant order for `backlog[i]` single-line requests per port, starting at
/// time zero and running until `horizon_ns`.
pub fn arbiter_grant(backlog: &[u64], bus_cap_rps: f64, horizon_ns: f64) -> Vec<usize> {
    let mut arb = BusArbiter::new(backlog.len(), bus_cap_rps);
    for (port, &n) in backlog.iter().enumerate() {
        for _ in 0..n {
            arb.request(port, 1, ());
        }
    }
    let mut order = Vec::new();
    let mut now = 0.0;
    while let Some(g) = arb.try_grant(now) {
        if g.start >= horizon_ns {
            break;
        }
        order.push(g.port);
        now = g.end;
    }
    order
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alternates_when_both_backlogged() {
        // 1 ms at 80 M/s is 80 000 grants
        let order = arbiter_grant(&[1_000_000, 1_000_000], 80e6, 1e6);
        assert_eq!(order.len(), 80_000);
        let a = order.iter().filter(|&&p| p == 0).count() as i64;
        let b = order.len() as i64 - a;
        assert!((a - b).abs() <= 1);
        assert!(order.windows(2).all(|w| w[0] != w[1]));
    }

    #[test]
    fn idle_port_leaves_full_budget_to_other() {
        let order = arbiter_grant(&[0, 1_000_000], 80e6, 1e6);
        assert_eq!(order.len(), 80_000);
        assert!(order.iter().all(|&p| p == 1));
    }

    #[test]
    fn grant_waits_for_idle_endpoint() {
        let mut arb = BusArbiter::new(2, 80e6);
        arb.request(0, 4, 'a');
        arb.request(1, 4, 'b');
        let g = arb.try_grant(0.0).unwrap();
        assert_eq!((g.port, g.end), (0, 50.0));
        assert!(arb.try_grant(10.0).is_none());
        let g = arb.try_grant(50.0).unwrap();
        assert_eq!((g.port, g.tag), (1, 'b'));
    }
}
