use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use nmrpc::interconnect::calibrate::DEFAULT_DATAPOINTS;
use nmrpc::interconnect::{calibrate, parse_datapoints, Role};
use nmrpc::sim::experiments::{self as ex, Bench, CurveSpec};
use nmrpc::sim::{load_scenario, Arrival, LoadGen, Scenario};
use nmrpc::{Params, ThreadingModel, TxMode};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser, Debug)]
#[command(
    name = "nmrpc",
    version,
    about = "Simulate NIC-offloaded RPC over PCIe and coherent host interfaces"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Debug)]
struct Global {
    /// Scenario JSON supplying run length, seed and cost parameter overrides.
    #[arg(long, global = true)]
    scenario: Option<PathBuf>,
    /// Cost parameter JSON; takes precedence over the scenario's file.
    #[arg(long, global = true)]
    params: Option<PathBuf>,
    /// Output file; stdout when absent.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Dotted-path scenario override, e.g. `cost_params.t_wire=0`. Repeatable.
    #[arg(long = "override", value_name = "K=V", global = true)]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Per-interface single-core throughput and latency at 4 Mrps.
    Bars,
    /// Latency against offered load.
    Sweep {
        /// Curves such as `coherent:B1,coherent:B4,doorbell:B1,mmio,adaptive`.
        #[arg(long, value_delimiter = ',')]
        modes: Option<Vec<CurveSpec>>,
        /// Adds the adaptive-batching curve.
        #[arg(long)]
        adaptive: bool,
        /// Offered loads in Mrps.
        #[arg(long, value_delimiter = ',')]
        loads: Option<Vec<f64>>,
        /// `poisson` or `deterministic`.
        #[arg(long, default_value = "poisson", value_parser = parse_arrival)]
        arrival: Arrival,
    },
    /// Throughput against client thread count.
    Scale {
        #[arg(long, default_value = "1..8", value_parser = parse_counts)]
        threads: Counts,
    },
    /// Bare bus read throughput against thread count.
    Rawbus {
        #[arg(long, default_value = "1..8", value_parser = parse_counts)]
        threads: Counts,
    },
    /// Fits occupancy parameters and writes the parameter JSON to --out.
    Calibrate {
        /// `mode,B,mrps,role` rows; the shipped measurements when absent.
        #[arg(long)]
        datapoints: Option<PathBuf>,
        /// Residual report destination; stderr when absent.
        #[arg(long)]
        residuals: Option<PathBuf>,
    },
    /// Round trip and throughput next to published systems.
    Compare {
        /// One-way wire plus switch delay in microseconds.
        #[arg(long)]
        tor: Option<f64>,
    },
    /// Runs the acceptance checks; exit status 2 when any fails.
    ///
    /// Exit status 1 means a usage, configuration or I/O error.
    Validate,
}

fn parse_arrival(s: &str) -> std::result::Result<Arrival, String> {
    match s {
        "poisson" => Ok(Arrival::Poisson),
        "deterministic" => Ok(Arrival::Deterministic),
        _ => Err(format!("unknown arrival process `{s}`")),
    }
}

#[derive(Debug, Clone)]
struct Counts(Vec<usize>);

fn parse_counts(s: &str) -> std::result::Result<Counts, String> {
    let bad = |t: &str| format!("bad count `{t}`");
    let mut out = Vec::new();
    for part in s.split(',') {
        if let Some((a, b)) = part.split_once("..") {
            let a: usize = a.parse().map_err(|_| bad(a))?;
            let b: usize = b.trim_start_matches('=').parse().map_err(|_| bad(b))?;
            out.extend(a..=b);
        } else {
            out.push(part.parse().map_err(|_| bad(part))?);
        }
    }
    if out.is_empty() || out.contains(&0) {
        return Err("counts must be positive".into());
    }
    Ok(Counts(out))
}

/// Run settings come from `--scenario` when given, else from `fallback`.
fn bench_with(g: &Global, fallback: fn(Params) -> Bench) -> Result<Bench> {
    let (scenario, dir) = match &g.scenario {
        Some(path) => {
            let (s, dir) = load_scenario(path, &g.overrides).with_context(|| format!("scenario {}", path.display()))?;
            (s, Some(dir))
        }
        None => {
            let s = Scenario::single_core(TxMode::Coherent, 1, ThreadingModel::Async, LoadGen::open(4.0))
                .with_overrides(&g.overrides)?;
            (s, None)
        }
    };
    let params = scenario.resolve_params(g.params.as_deref(), dir.as_deref())?;
    let mut b = match g.scenario {
        Some(_) => Bench::from_scenario(params, &scenario),
        None => fallback(params),
    };
    if let Some(seed) = g.seed {
        b.seed = seed;
    }
    Ok(b)
}

fn bench(g: &Global) -> Result<Bench> {
    bench_with(g, Bench::new)
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    let g = &cli.global;
    let out = g.out.as_deref();
    match cli.cmd {
        Cmd::Bars => {
            let b = bench(g)?;
            emit(out, &ex::bars_csv(&ex::bars(&b, &ex::BAR_CONFIGS)?))?;
        }
        Cmd::Sweep {
            modes,
            adaptive,
            loads,
            arrival,
        } => {
            let b = bench_with(g, Bench::for_sweep)?;
            let mut specs = modes.unwrap_or_else(|| {
                vec![
                    CurveSpec::Fixed(TxMode::Coherent, 1),
                    CurveSpec::Fixed(TxMode::Coherent, 4),
                ]
            });
            if adaptive && !specs.iter().any(|s| matches!(s, CurveSpec::Adaptive { .. })) {
                specs.push(CurveSpec::Adaptive { low: 1, high: 4 });
            }
            let loads = loads.unwrap_or_else(ex::default_sweep_loads);
            if loads.iter().any(|l| !(l.is_finite() && *l > 0.0)) {
                bail!("loads must be positive");
            }
            let curves = ex::sweep_curves(&b, &specs, &loads, arrival)?;
            for c in &curves {
                match c.saturation_mrps {
                    Some(s) => eprintln!("{}: saturates at {s:.2} Mrps", c.name),
                    None => eprintln!("{}: not saturated in sweep", c.name),
                }
            }
            emit(out, &ex::curves_csv(&curves))?;
        }
        Cmd::Scale { threads } => {
            let b = bench(g)?;
            emit(out, &ex::scale_csv(&ex::scale_cores(&b, &threads.0)?))?;
        }
        Cmd::Rawbus { threads } => {
            let b = bench(g)?;
            let duration_ns = b.duration_us * 1e3;
            emit(
                out,
                &ex::rawbus_csv(&ex::raw_bus_benchmark(&b, &threads.0, duration_ns)),
            )?;
        }
        Cmd::Calibrate { datapoints, residuals } => {
            let b = bench(g)?;
            let text = match &datapoints {
                Some(p) => std::fs::read_to_string(p).with_context(|| format!("datapoints {}", p.display()))?,
                None => DEFAULT_DATAPOINTS.to_string(),
            };
            let points = parse_datapoints::<f64>(&text)?;
            let cal = calibrate(&points, &b.params)?;
            eprintln!(
                "max |rel err|: fit {:.4}, holdout {:.4}",
                cal.max_abs_rel_err(Role::Fit),
                cal.max_abs_rel_err(Role::Holdout)
            );
            match &residuals {
                Some(p) => std::fs::write(p, cal.residual_csv()).with_context(|| format!("writing {}", p.display()))?,
                None => eprint!("{}", cal.residual_csv()),
            }
            emit(out, &cal.params.to_json())?;
        }
        Cmd::Compare { tor } => {
            let mut b = bench(g)?;
            if let Some(us) = tor {
                if !(us >= 0.0 && us.is_finite()) {
                    bail!("--tor must be a non-negative number of microseconds");
                }
                b.params.t_wire = us * 1e3;
            }
            emit(out, &ex::compare_csv(&ex::compare(&b)?))?;
        }
        Cmd::Validate => {
            let b = bench(g)?;
            let results = nmrpc::acceptance::run_all(&b);
            let report = nmrpc::acceptance::report(&results);
            emit(out, &report)?;
            if out.is_some() {
                eprint!("{report}");
            }
            if results.iter().any(|r| !r.pass) {
                return Ok(ExitCode::from(2));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
