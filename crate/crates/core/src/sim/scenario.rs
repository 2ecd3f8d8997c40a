use super::loadgen::LoadGen;
use super::metrics::RunMetrics;
use super::world::{Conservation, World, WorldStats};
use crate::interconnect::{CostParams, ParamsError, TxMode};
use crate::nic::{controller_log_csv, ControllerEvent, NicConfig};
use crate::protocol::{NicId, ThreadingModel};
use crate::rings::DEFAULT_RING_DEPTH;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::fmt;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldError {
    pub field: String,
    pub msg: String,
}

impl fmt::Display for FieldError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.msg)
    }
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("invalid scenario:\n  {}", .0.iter().map(|e| e.to_string()).collect::<Vec<_>>().join("\n  "))]
    ConfigInvalid(Vec<FieldError>),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("scenario json: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Params(#[from] ParamsError),
    #[error("bad override `{0}`: {1}")]
    Override(String, String),
    #[error("run broke conservation or ordering: {0:?}")]
    Conservation(Conservation),
}

fn invalid(field: impl Into<String>, msg: impl Into<String>) -> ScenarioError {
    ScenarioError::ConfigInvalid(vec![FieldError {
        field: field.into(),
        msg: msg.into(),
    }])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NicSpec {
    pub id: u16,
    pub config: NicConfig,
}

fn one() -> usize {
    1
}

fn default_depth() -> usize {
    DEFAULT_RING_DEPTH
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConnSpec {
    pub client_nic: u16,
    pub server_nic: u16,
    #[serde(default = "one")]
    pub count: usize,
    #[serde(default = "default_depth")]
    pub ring_depth: usize,
}

pub const DEFAULT_DURATION_US: f64 = 2000.0;
pub const DEFAULT_WARMUP_US: f64 = 200.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub nics: Vec<NicSpec>,
    pub connections: Vec<ConnSpec>,
    pub loadgen: LoadGen,
    /// Relative paths resolve against the scenario file's directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cost_params_path: Option<String>,
    /// Individual cost parameters applied over the loaded file.
    #[serde(default, skip_serializing_if = "serde_json::Map::is_empty")]
    pub cost_params: serde_json::Map<String, Value>,
    pub duration_us: f64,
    pub warmup_us: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub trace: bool,
}

impl Scenario {
    /// Two NICs with the same config and `conns` client connections from
    /// NIC 0 to NIC 1.
    pub fn pair(config: NicConfig, conns: usize, ring_depth: usize, loadgen: LoadGen) -> Self {
        Scenario {
            nics: vec![NicSpec { id: 0, config }, NicSpec { id: 1, config }],
            connections: vec![ConnSpec {
                client_nic: 0,
                server_nic: 1,
                count: conns,
                ring_depth,
            }],
            loadgen,
            cost_params_path: None,
            cost_params: serde_json::Map::new(),
            duration_us: DEFAULT_DURATION_US,
            warmup_us: DEFAULT_WARMUP_US,
            seed: 1,
            trace: false,
        }
    }

    pub fn single_core(mode: TxMode, batch: usize, model: ThreadingModel, loadgen: LoadGen) -> Self {
        Self::pair(NicConfig::new(mode, model, batch), 1, DEFAULT_RING_DEPTH, loadgen)
    }

    pub fn with_loadgen(&self, loadgen: LoadGen) -> Self {
        Scenario {
            loadgen,
            ..self.clone()
        }
    }

    pub fn from_value(v: Value) -> Result<Self, ScenarioError> {
        let s: Scenario = serde_json::from_value(v)?;
        s.validate()?;
        Ok(s)
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("scenario serializes")
    }

    /// Applies `key=value` overrides to this scenario.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self, ScenarioError> {
        let mut v = self.to_value();
        for o in overrides {
            apply_override(&mut v, o)?;
        }
        Self::from_value(v)
    }

    pub fn connection_count(&self) -> usize {
        self.connections.iter().map(|c| c.count).sum()
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let mut errs = Vec::new();
        let mut push = |field: String, msg: String| errs.push(FieldError { field, msg });
        if self.nics.is_empty() {
            push("nics".into(), "at least one NIC is required".into());
        }
        for (i, n) in self.nics.iter().enumerate() {
            if self.nics[..i].iter().any(|m| m.id == n.id) {
                push(format!("nics[{i}].id"), format!("duplicate id {}", n.id));
            }
        }
        let nic = |id: u16| self.nics.iter().find(|n| n.id == id).map(|n| n.config);
        if self.connections.is_empty() {
            push("connections".into(), "at least one connection is required".into());
        }
        for (i, c) in self.connections.iter().enumerate() {
            let f = |k: &str| format!("connections[{i}].{k}");
            if c.count == 0 {
                push(f("count"), "must be >= 1".into());
            }
            if c.ring_depth < 2 || !c.ring_depth.is_power_of_two() {
                push(
                    f("ring_depth"),
                    format!("must be a power of two >= 2, got {}", c.ring_depth),
                );
            }
            if c.client_nic == c.server_nic {
                push(f("server_nic"), "must differ from client_nic".into());
            }
            for (k, id) in [("client_nic", c.client_nic), ("server_nic", c.server_nic)] {
                match nic(id) {
                    None => push(f(k), format!("no NIC with id {id}")),
                    Some(cfg) => {
                        if let Err(e) = cfg.validate(c.ring_depth) {
                            push(format!("nics[id={id}].config"), e.to_string());
                        }
                    }
                }
            }
            if let Err(e) = self.loadgen.validate(c.ring_depth) {
                push("loadgen".into(), e);
            }
            if let Some(cfg) = nic(c.client_nic) {
                check_doorbell_liveness(&cfg, &self.loadgen, &mut push);
            }
            if let Some(cfg) = nic(c.server_nic) {
                if cfg.tx_mode == TxMode::Doorbell && !cfg.opportunistic_batching {
                    let client = nic(c.client_nic);
                    if client.is_some_and(|cc| cc.threading_model == ThreadingModel::Sync) && max_batch(&cfg) > 1 {
                        push(
                            format!("nics[id={}].config.batch_B", c.server_nic),
                            "doorbell batching above 1 never fills for a sync client".into(),
                        );
                    }
                }
            }
        }
        if !(self.duration_us.is_finite() && self.duration_us > 0.0) {
            push("duration_us".into(), "must be positive".into());
        }
        if !(self.warmup_us.is_finite() && self.warmup_us >= 0.0) {
            push("warmup_us".into(), "must be non-negative".into());
        } else if self.duration_us < 10.0 * self.warmup_us {
            push(
                "duration_us".into(),
                format!(
                    "must be at least 10x warmup_us ({} < {})",
                    self.duration_us,
                    10.0 * self.warmup_us
                ),
            );
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(ScenarioError::ConfigInvalid(errs))
        }
    }

    /// The cost parameters this scenario runs with. `explicit` replaces
    /// `cost_params_path`; `base_dir` anchors relative paths.
    pub fn resolve_params(
        &self,
        explicit: Option<&Path>,
        base_dir: Option<&Path>,
    ) -> Result<CostParams<f64>, ScenarioError> {
        let path: Option<PathBuf> = match (explicit, &self.cost_params_path) {
            (Some(p), _) => Some(p.to_path_buf()),
            (None, Some(p)) => {
                let p = PathBuf::from(p);
                Some(match base_dir {
                    Some(d) if p.is_relative() => d.join(p),
                    _ => p,
                })
            }
            (None, None) => None,
        };
        let text = match &path {
            Some(p) => std::fs::read_to_string(p).map_err(|source| ScenarioError::Io {
                path: p.display().to_string(),
                source,
            })?,
            None => crate::interconnect::cost::DEFAULT_PARAMS_JSON.to_string(),
        };
        let mut v: Value = serde_json::from_str(&text)?;
        for (k, val) in &self.cost_params {
            v[k] = val.clone();
        }
        Ok(CostParams::from_json(&v.to_string())?)
    }
}

fn max_batch(cfg: &NicConfig) -> usize {
    if cfg.adaptive_batching.enabled {
        cfg.adaptive_batching.high_batch.max(cfg.batch)
    } else {
        cfg.batch
    }
}

fn check_doorbell_liveness(cfg: &NicConfig, load: &LoadGen, push: &mut impl FnMut(String, String)) {
    if cfg.tx_mode != TxMode::Doorbell || cfg.opportunistic_batching {
        return;
    }
    let b = max_batch(cfg);
    if cfg.threading_model == ThreadingModel::Sync && b > 1 {
        push(
            "nics.config.batch_B".into(),
            "sync calls with doorbell batching above 1 never fill a batch; enable opportunistic_batching".into(),
        );
    }
    if let LoadGen::ClosedLoop { window } = *load {
        if window < b {
            push(
                "loadgen.window".into(),
                format!("window {window} cannot fill a doorbell batch of {b}"),
            );
        }
    }
}

/// Loads a scenario file and applies overrides; returns it with the file's
/// directory for resolving relative paths.
pub fn load_scenario(path: &Path, overrides: &[String]) -> Result<(Scenario, PathBuf), ScenarioError> {
    let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut v: Value = serde_json::from_str(&text)?;
    for o in overrides {
        apply_override(&mut v, o)?;
    }
    let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((Scenario::from_value(v)?, dir))
}

/// Sets `a.b.0.c=value` in a JSON tree. The value is parsed as JSON and
/// falls back to a string.
pub fn apply_override(root: &mut Value, spec: &str) -> Result<(), ScenarioError> {
    let bad = |m: &str| ScenarioError::Override(spec.to_string(), m.to_string());
    let (key, raw) = spec.split_once('=').ok_or_else(|| bad("expected key=value"))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(bad("empty key"));
    }
    let value: Value = serde_json::from_str(raw.trim()).unwrap_or_else(|_| Value::String(raw.trim().to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    let mut cur = root;
    for (i, part) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        cur = match cur {
            Value::Array(items) => {
                let idx: usize = part.parse().map_err(|_| bad("array segment must be an index"))?;
                let len = items.len();
                items
                    .get_mut(idx)
                    .ok_or_else(|| bad(&format!("index {idx} out of range ({len} items)")))?
            }
            Value::Object(map) => {
                if last {
                    map.insert(part.to_string(), value);
                    return Ok(());
                }
                map.entry(part.to_string())
                    .or_insert_with(|| Value::Object(Default::default()))
            }
            Value::Null => {
                *cur = Value::Object(Default::default());
                let Value::Object(map) = cur else { unreachable!() };
                if last {
                    map.insert(part.to_string(), value);
                    return Ok(());
                }
                map.entry(part.to_string())
                    .or_insert_with(|| Value::Object(Default::default()))
            }
            _ => return Err(bad(&format!("`{part}` is not inside an object or array"))),
        };
        if last {
            *cur = value;
            return Ok(());
        }
    }
    Ok(())
}

/// Result of one scenario run.
#[derive(Debug, Clone)]
pub struct RunReport {
    pub metrics: RunMetrics,
    pub conservation: Conservation,
    pub stats: WorldStats,
    pub controller_log: Vec<(NicId, ControllerEvent)>,
    pub trace_csv: Option<String>,
    pub served_per_connection: Vec<u64>,
}

impl RunReport {
    pub fn controller_csv(&self) -> String {
        let events: Vec<ControllerEvent> = self.controller_log.iter().map(|(_, e)| e.clone()).collect();
        controller_log_csv(&events)
    }

    pub fn switches(&self, controller: &str) -> usize {
        self.controller_log
            .iter()
            .filter(|(_, e)| e.controller == controller)
            .count()
    }
}

/// Builds the world for a validated scenario, with load generators attached.
pub fn build_world(s: &Scenario, params: CostParams<f64>) -> Result<World, ScenarioError> {
    s.validate()?;
    let nics: Vec<(NicId, NicConfig)> = s.nics.iter().map(|n| (NicId(n.id), n.config)).collect();
    let mut w = World::new(params, &nics).map_err(|e| invalid("nics", e.to_string()))?;
    if s.trace {
        w.enable_trace();
    }
    let horizon = s.duration_us * 1e3;
    let mut k = 0u64;
    for (i, c) in s.connections.iter().enumerate() {
        for _ in 0..c.count {
            let h = w
                .connect(NicId(c.client_nic), NicId(c.server_nic), c.ring_depth)
                .map_err(|e| invalid(format!("connections[{i}]"), e.to_string()))?;
            let seed = s.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(k);
            w.set_load(h, s.loadgen, seed, horizon);
            k += 1;
        }
    }
    Ok(w)
}

pub fn run(s: &Scenario, params: CostParams<f64>) -> Result<RunReport, ScenarioError> {
    let mut w = build_world(s, params)?;
    let end = s.duration_us * 1e3;
    w.run_until(end);
    let offered = s.loadgen.offered_mrps().map(|r| r * s.connection_count() as f64);
    let metrics = RunMetrics::reduce(w.samples(), s.warmup_us * 1e3, end, offered);
    Ok(RunReport {
        metrics,
        conservation: w.conservation(),
        stats: w.stats(),
        controller_log: w.controller_log(),
        trace_csv: s.trace.then(|| w.trace().to_csv()),
        served_per_connection: w.served_per_connection(),
    })
}
