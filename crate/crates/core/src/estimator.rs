//! Fixed-point iteration `h <- NLE(LE(h; y))` starting from zero.

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::measurement::{nmse_linear, to_db, MeasurementEnsemble};
use crate::nle::{nle_forward, ModelParameters, NleConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopMode {
    /// `||h_k - h_{k-1}|| < eps`.
    Absolute,
    /// `||h_k - h_{k-1}|| < eps * ||h_{k-1}||`.
    Relative,
}

impl std::str::FromStr for StopMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "absolute" => Ok(StopMode::Absolute),
            "relative" => Ok(StopMode::Relative),
            _ => Err(Error::config("estimator.stop_mode", format!("unknown mode `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EstimatorConfig {
    pub tolerance: f64,
    pub max_iterations: usize,
    pub stop_mode: StopMode,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        EstimatorConfig {
            tolerance: 1e-3,
            max_iterations: 15,
            stop_mode: StopMode::Absolute,
        }
    }
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tolerance > 0.0) {
            return Err(Error::config("estimator.tolerance", "must be positive"));
        }
        if self.max_iterations == 0 {
            return Err(Error::config("estimator.max_iterations", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct IterationTrace {
    /// `||h_k - h_{k-1}||` for `k = 1..=iterations_used`.
    pub residuals: Vec<f64>,
    /// NMSE of `h_k` against the ground truth, when one was supplied.
    pub nmse_db: Vec<f64>,
    pub iterations_used: usize,
    pub converged: bool,
}

fn check_dims(h: &[f64], y: &[f64], ens: &MeasurementEnsemble) -> Result<()> {
    let (rows, cols) = ens.real_matrix.shape();
    if h.len() != cols || y.len() != rows {
        return Err(Error::input(format!(
            "estimate length {} / measurement length {} do not match operator {rows}x{cols}",
            h.len(),
            y.len()
        )));
    }
    Ok(())
}

/// `h + Z (y - M h)`.
pub fn linear_estimate(h: &[f64], y: &[f64], ens: &MeasurementEnsemble) -> Result<Vec<f64>> {
    check_dims(h, y, ens)?;
    let hv = DVector::from_column_slice(h);
    let residual = DVector::from_column_slice(y) - &ens.real_matrix * &hv;
    let out = hv + &ens.le_matrix * residual;
    Ok(out.as_slice().to_vec())
}

/// One composite step `NLE(LE(h; y))`.
pub fn iterate(
    h: &[f64],
    y: &[f64],
    ens: &MeasurementEnsemble,
    params: &ModelParameters,
    cfg: &NleConfig,
) -> Result<Vec<f64>> {
    nle_forward(params, &linear_estimate(h, y, ens)?, cfg)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn diff_norm(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Runs the iteration from `init` until the stopping rule fires or the cap is
/// hit. The rule is checked from the first iterate on, so a zero model stops
/// after one step.
#[allow(clippy::too_many_arguments)]
pub fn estimate_from(
    init: &[f64],
    y: &[f64],
    ens: &MeasurementEnsemble,
    params: &ModelParameters,
    nle_cfg: &NleConfig,
    cfg: &EstimatorConfig,
    truth: Option<&[f64]>,
    stop_early: bool,
) -> Result<(Vec<f64>, IterationTrace)> {
    check_dims(init, y, ens)?;
    let mut h = init.to_vec();
    let mut trace = IterationTrace::default();
    for _ in 0..cfg.max_iterations {
        let next = iterate(&h, y, ens, params, nle_cfg)?;
        let r = diff_norm(&next, &h);
        if !r.is_finite() {
            return Err(Error::Numerical("fixed-point iterate is not finite".into()));
        }
        let threshold = match cfg.stop_mode {
            StopMode::Absolute => cfg.tolerance,
            StopMode::Relative => cfg.tolerance * norm(&h),
        };
        trace.residuals.push(r);
        if let Some(t) = truth {
            trace.nmse_db.push(to_db(nmse_linear(t, &next)?));
        }
        trace.iterations_used += 1;
        h = next;
        if r < threshold || (r == 0.0 && threshold == 0.0) {
            trace.converged = true;
            if stop_early {
                break;
            }
        }
    }
    Ok((h, trace))
}

/// Algorithm entry point: zero initialisation with early stopping.
pub fn estimate(
    y: &[f64],
    ens: &MeasurementEnsemble,
    params: &ModelParameters,
    nle_cfg: &NleConfig,
    cfg: &EstimatorConfig,
    truth: Option<&[f64]>,
) -> Result<(Vec<f64>, IterationTrace)> {
    let zero = vec![0.0; ens.real_matrix.ncols()];
    estimate_from(&zero, y, ens, params, nle_cfg, cfg, truth, true)
}

/// `r_k = res_{k+1} / res_k` for consecutive residuals that are nonzero.
pub fn residual_ratios(trace: &IterationTrace) -> Vec<f64> {
    trace
        .residuals
        .windows(2)
        .filter(|w| w[0] > 0.0)
        .map(|w| w[1] / w[0])
        .collect()
}

/// Linear-estimator multiply-accumulate count: the two products `M h` and
/// `Z r`, each `(2 N T) x (2 N Nbar)`, i.e. `8 N^2 Nbar T`.
pub fn le_op_count(num_subarrays: usize, elements_per_subarray: usize, pilot_slots: usize) -> u64 {
    let (n, nbar, t) = (num_subarrays as u64, elements_per_subarray as u64, pilot_slots as u64);
    2 * (2 * n * t) * (2 * n * nbar)
}
