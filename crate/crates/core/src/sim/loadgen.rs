use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arrival {
    #[default]
    Deterministic,
    Poisson,
}

/// Load offered by each client connection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum LoadGen {
    /// Keeps `window` RPCs outstanding.
    ClosedLoop { window: usize },
    /// Fixed-rate arrivals; callers block while the TX ring is full.
    OpenLoop {
        rate_mrps: f64,
        #[serde(default)]
        arrival: Arrival,
    },
    /// Deterministic arrivals whose rate moves linearly from `start_mrps`
    /// to `end_mrps` over the run.
    Ramp { start_mrps: f64, end_mrps: f64 },
}

impl LoadGen {
    pub fn open(rate_mrps: f64) -> Self {
        LoadGen::OpenLoop {
            rate_mrps,
            arrival: Arrival::Deterministic,
        }
    }

    pub fn closed(window: usize) -> Self {
        LoadGen::ClosedLoop { window }
    }

    /// Per-connection offered rate, for open-loop generators.
    pub fn offered_mrps(&self) -> Option<f64> {
        match *self {
            LoadGen::OpenLoop { rate_mrps, .. } => Some(rate_mrps),
            LoadGen::Ramp { .. } | LoadGen::ClosedLoop { .. } => None,
        }
    }

    pub fn validate(&self, ring_depth: usize) -> Result<(), String> {
        let pos = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(format!("loadgen.{name} must be positive, got {v}"))
            }
        };
        match *self {
            LoadGen::ClosedLoop { window } if window == 0 || window > ring_depth => {
                Err(format!("loadgen.window must be in 1..={ring_depth}, got {window}"))
            }
            LoadGen::ClosedLoop { .. } => Ok(()),
            LoadGen::OpenLoop { rate_mrps, .. } => pos("rate_mrps", rate_mrps),
            LoadGen::Ramp { start_mrps, end_mrps } => {
                pos("start_mrps", start_mrps)?;
                pos("end_mrps", end_mrps)
            }
        }
    }
}

/// Arrival-time generator for one open-loop connection.
#[derive(Debug, Clone)]
pub struct Arrivals {
    gen: LoadGen,
    horizon_ns: f64,
    rng: ChaCha8Rng,
}

impl Arrivals {
    pub fn new(gen: LoadGen, horizon_ns: f64, seed: u64) -> Self {
        Arrivals {
            gen,
            horizon_ns,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Time of the arrival following one at `t`, or `None` for closed loop.
    pub fn next_after(&mut self, t: f64) -> Option<f64> {
        match self.gen {
            LoadGen::ClosedLoop { .. } => None,
            LoadGen::OpenLoop { rate_mrps, arrival } => {
                let mean = 1e3 / rate_mrps;
                Some(match arrival {
                    Arrival::Deterministic => t + mean,
                    Arrival::Poisson => {
                        let u: f64 = self.rng.gen();
                        t - mean * (1.0 - u).ln()
                    }
                })
            }
            LoadGen::Ramp { start_mrps, end_mrps } => {
                let frac = (t / self.horizon_ns).clamp(0.0, 1.0);
                let rate = start_mrps + (end_mrps - start_mrps) * frac;
                Some(t + 1e3 / rate)
            }
        }
    }
}
