//! Least-squares fit of the occupancy parameters to measured throughputs.
//!
//! Each batched path has per-batch occupancy `a + b*B`, so `B / throughput`
//! is linear in `B` and the fit is ordinary least squares on that line.

use super::cost::CostParams;
use super::model::{throughput_mrps, TxMode};
use crate::scalar::Scalar;
use std::fmt::Write as _;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum CalibrationError {
    #[error("underdetermined fit for {mode}: need {needed} distinct batch sizes, got {got}")]
    UnderdeterminedFit { mode: String, needed: usize, got: usize },
    #[error("fit for {0} produced a non-positive parameter ({1} = {2})")]
    Degenerate(String, &'static str, f64),
    #[error("datapoints line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Fit,
    Holdout,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Datapoint<T> {
    pub mode: TxMode,
    pub batch: usize,
    pub mrps: T,
    pub role: Role,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Residual<T> {
    pub point: Datapoint<T>,
    pub predicted: T,
    /// (predicted - observed) / observed
    pub rel_err: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Calibration<T> {
    pub params: CostParams<T>,
    pub residuals: Vec<Residual<T>>,
}

impl<T: Scalar> Calibration<T> {
    pub fn max_abs_rel_err(&self, role: Role) -> T {
        self.residuals
            .iter()
            .filter(|r| r.point.role == role)
            .fold(T::zero(), |m, r| m.max(r.rel_err.abs()))
    }

    pub fn residual_csv(&self) -> String {
        let mut out = String::from("mode,B,role,observed_mrps,predicted_mrps,rel_err\n");
        for r in &self.residuals {
            let role = match r.point.role {
                Role::Fit => "fit",
                Role::Holdout => "holdout",
            };
            let _ = writeln!(
                out,
                "{},{},{},{:.4},{:.4},{:.4}",
                r.point.mode,
                r.point.batch,
                role,
                r.point.mrps.as_f64(),
                r.predicted.as_f64(),
                r.rel_err.as_f64()
            );
        }
        out
    }
}

/// OLS fit of `y = intercept + slope * x`.
pub fn fit_line<T: Scalar>(xs: &[T], ys: &[T]) -> Option<(T, T)> {
    let n = T::of_usize(xs.len());
    if xs.len() < 2 || xs.len() != ys.len() {
        return None;
    }
    let mx = xs.iter().fold(T::zero(), |a, &x| a + x) / n;
    let my = ys.iter().fold(T::zero(), |a, &y| a + y) / n;
    let sxx = xs.iter().fold(T::zero(), |a, &x| a + (x - mx) * (x - mx));
    if sxx <= T::zero() {
        return None;
    }
    let sxy = xs.iter().zip(ys).fold(T::zero(), |a, (&x, &y)| a + (x - mx) * (y - my));
    let slope = sxy / sxx;
    Some((my - slope * mx, slope))
}

fn distinct_batches<T>(pts: &[&Datapoint<T>]) -> usize {
    let mut b: Vec<usize> = pts.iter().map(|p| p.batch).collect();
    b.sort_unstable();
    b.dedup();
    b.len()
}

fn fit_pair<T: Scalar>(mode: TxMode, pts: &[&Datapoint<T>]) -> Result<(T, T), CalibrationError> {
    let got = distinct_batches(pts);
    if got < 2 {
        return Err(CalibrationError::UnderdeterminedFit {
            mode: mode.to_string(),
            needed: 2,
            got,
        });
    }
    let xs: Vec<T> = pts.iter().map(|p| T::of_usize(p.batch)).collect();
    let ys: Vec<T> = pts
        .iter()
        .map(|p| T::of_usize(p.batch) * T::lit(1e3) / p.mrps)
        .collect();
    let (a, b) = fit_line(&xs, &ys).expect("two distinct abscissae");
    for (name, v) in [("intercept", a), ("slope", b)] {
        if !(v.is_finite() && v > T::zero()) {
            return Err(CalibrationError::Degenerate(mode.to_string(), name, v.as_f64()));
        }
    }
    Ok((a, b))
}

/// Fits every mode that has `Fit` datapoints; untouched parameters come
/// from `base`. Residuals cover all points, fitted and held out.
pub fn calibrate<T: Scalar>(points: &[Datapoint<T>], base: &CostParams<T>) -> Result<Calibration<T>, CalibrationError> {
    let fit: Vec<&Datapoint<T>> = points.iter().filter(|p| p.role == Role::Fit).collect();
    if fit.is_empty() {
        return Err(CalibrationError::UnderdeterminedFit {
            mode: "any".into(),
            needed: 1,
            got: 0,
        });
    }
    let of = |m: TxMode| fit.iter().copied().filter(|p| p.mode == m).collect::<Vec<_>>();
    let mut params = *base;

    let mmio = of(TxMode::Mmio);
    if !mmio.is_empty() {
        let n = T::of_usize(mmio.len());
        params.t_mmio = mmio.iter().fold(T::zero(), |a, p| a + T::lit(1e3) / p.mrps) / n;
    }
    let db = of(TxMode::Doorbell);
    if !db.is_empty() {
        (params.t_doorbell, params.t_entry) = fit_pair(TxMode::Doorbell, &db)?;
    }
    let coh = of(TxMode::Coherent);
    if !coh.is_empty() {
        (params.t_poll, params.t_cl) = fit_pair(TxMode::Coherent, &coh)?;
    }

    let residuals = points
        .iter()
        .map(|&point| {
            let predicted = throughput_mrps(&params, point.mode, point.batch);
            Residual {
                point,
                predicted,
                rel_err: (predicted - point.mrps) / point.mrps,
            }
        })
        .collect();
    Ok(Calibration { params, residuals })
}

/// Parses `mode,B,mrps,role` rows; a header line and `#` comments are skipped.
pub fn parse_datapoints<T: Scalar>(text: &str) -> Result<Vec<Datapoint<T>>, CalibrationError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with("mode") {
            continue;
        }
        let err = |msg: String| CalibrationError::Parse { line: i + 1, msg };
        let cols: Vec<&str> = line.split(',').map(str::trim).collect();
        if cols.len() != 4 {
            return Err(err(format!("expected 4 columns, got {}", cols.len())));
        }
        let mode: TxMode = cols[0].parse().map_err(err)?;
        let batch: usize = cols[1].parse().map_err(|e| err(format!("B: {e}")))?;
        let mrps: f64 = cols[2].parse().map_err(|e| err(format!("mrps: {e}")))?;
        if batch == 0 || !(mrps.is_finite() && mrps > 0.0) {
            return Err(err("B and mrps must be positive".into()));
        }
        let role = match cols[3] {
            "fit" => Role::Fit,
            "holdout" => Role::Holdout,
            other => return Err(err(format!("unknown role `{other}`"))),
        };
        out.push(Datapoint {
            mode,
            batch,
            mrps: T::lit(mrps),
            role,
        });
    }
    Ok(out)
}

pub const DEFAULT_DATAPOINTS: &str = include_str!("../../../../params/throughput_datapoints.csv");
