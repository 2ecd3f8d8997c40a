use crate::protocol::EntryKind;
use std::collections::BTreeMap;
use std::fmt::{self, Write as _};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TxnKind {
    MmioStore64,
    DoorbellMmio,
    DmaReadBatch,
    DmaWrite64,
    CoherentPollHit,
    CoherentPollMiss,
    Invalidation,
    HostMemcpy64,
    WireHop,
    /// Host flips a TX valid flag; not a bus transaction.
    HostPublish,
    /// Bare 64B read from the raw bus benchmark.
    RawRead64,
}

impl fmt::Display for TxnKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Issuer {
    Nic(u16),
    Core(u32),
}

impl fmt::Display for Issuer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Issuer::Nic(n) => write!(f, "nic{n}"),
            Issuer::Core(c) => write!(f, "core{c}"),
        }
    }
}

/// Identifies the RPC leg a critical-path transaction belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RpcTag {
    pub conn: u16,
    pub rpc: u32,
    pub response: bool,
}

impl RpcTag {
    pub fn of(conn: u16, rpc: u32, kind: EntryKind) -> Self {
        RpcTag {
            conn,
            rpc,
            response: kind.is_response(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transaction {
    pub ts_ns: f64,
    pub issuer: Issuer,
    pub kind: TxnKind,
    pub count: u32,
    /// Set on critical-path transactions; bookkeeping and polls carry none.
    pub tag: Option<RpcTag>,
}

impl Transaction {
    pub fn new(ts_ns: f64, issuer: Issuer, kind: TxnKind, count: u32) -> Self {
        debug_assert!(count >= 1);
        Transaction {
            ts_ns,
            issuer,
            kind,
            count,
            tag: None,
        }
    }

    pub fn tagged(mut self, tag: RpcTag) -> Self {
        self.tag = Some(tag);
        self
    }
}

/// Append-only transaction log; recording is off unless enabled. Per-kind
/// totals are kept either way.
#[derive(Debug, Default, Clone)]
pub struct Trace {
    enabled: bool,
    items: Vec<Transaction>,
    totals: BTreeMap<TxnKind, u64>,
}

impl Trace {
    pub fn new(enabled: bool) -> Self {
        Trace {
            enabled,
            items: Vec::new(),
            totals: BTreeMap::new(),
        }
    }

    pub fn enabled(&self) -> bool {
        self.enabled
    }

    pub fn record(&mut self, t: Transaction) {
        *self.totals.entry(t.kind).or_default() += t.count as u64;
        if self.enabled {
            self.items.push(t);
        }
    }

    pub fn extend(&mut self, ts: impl IntoIterator<Item = Transaction>) {
        for t in ts {
            self.record(t);
        }
    }

    /// Summed `count` of every recorded transaction of `kind`.
    pub fn total(&self, kind: TxnKind) -> u64 {
        self.totals.get(&kind).copied().unwrap_or(0)
    }

    pub fn items(&self) -> &[Transaction] {
        &self.items
    }

    pub fn count(&self, kind: TxnKind) -> u64 {
        self.items
            .iter()
            .filter(|t| t.kind == kind)
            .map(|t| t.count as u64)
            .sum()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("ts_ns,issuer,kind,count\n");
        for t in &self.items {
            let _ = writeln!(out, "{:.3},{},{},{}", t.ts_ns, t.issuer, t.kind, t.count);
        }
        out
    }
}
