//! Classical estimators: least squares, OMP, FISTA and OAMP with a
//! divergence-corrected soft threshold.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::estimator::linear_estimate;
use crate::measurement::MeasurementEnsemble;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaselineConfig {
    pub omp_sparsity: usize,
    pub fista_lambda: f64,
    pub fista_iters: usize,
    pub oamp_iters: usize,
    pub oamp_threshold_scale: f64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            omp_sparsity: 16,
            fista_lambda: 0.05,
            fista_iters: 200,
            oamp_iters: 20,
            oamp_threshold_scale: 1.0,
        }
    }
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.omp_sparsity == 0 {
            return Err(Error::config("baselines.omp_sparsity", "must be positive"));
        }
        if !(self.fista_lambda > 0.0) {
            return Err(Error::config("baselines.fista_lambda", "must be positive"));
        }
        if self.fista_iters == 0 {
            return Err(Error::config("baselines.fista_iters", "must be positive"));
        }
        if self.oamp_iters == 0 {
            return Err(Error::config("baselines.oamp_iters", "must be positive"));
        }
        if !(self.oamp_threshold_scale >= 0.0) {
            return Err(Error::config("baselines.oamp_threshold_scale", "must be non-negative"));
        }
        Ok(())
    }
}

/// Minimum-norm least squares `M^+ y`.
pub fn ls_estimate(y: &[f64], ens: &MeasurementEnsemble) -> Result<Vec<f64>> {
    if y.len() != ens.real_matrix.nrows() {
        return Err(Error::input("measurement length mismatch"));
    }
    Ok((&ens.pseudo_inverse * DVector::from_column_slice(y)).as_slice().to_vec())
}

#[derive(Debug, Clone, PartialEq)]
pub struct OmpResult {
    pub estimate: DVector<Complex64>,
    /// Selected columns in selection order.
    pub support: Vec<usize>,
    pub residual_norm: f64,
}

fn complex_lstsq(a: &DMatrix<Complex64>, b: &DVector<Complex64>) -> DVector<Complex64> {
    let svd = a.clone().svd(true, true);
    svd.solve(b, 1e-12).expect("U and V^T requested")
}

/// Greedy atom selection over the columns of `Mbar`, re-fitting least
/// squares on the active set after every pick.
pub fn omp_estimate(ybar: &DVector<Complex64>, mbar: &DMatrix<Complex64>, sparsity: usize) -> Result<OmpResult> {
    if ybar.len() != mbar.nrows() {
        return Err(Error::input("measurement length mismatch"));
    }
    if sparsity > mbar.nrows() {
        return Err(Error::input(format!(
            "sparsity {sparsity} exceeds measurement count {}",
            mbar.nrows()
        )));
    }
    let norms: Vec<f64> = mbar.column_iter().map(|c| c.norm()).collect();
    let mut support: Vec<usize> = Vec::new();
    let mut residual = ybar.clone();
    let mut coeffs = DVector::<Complex64>::zeros(0);
    while support.len() < sparsity && residual.norm() >= 1e-10 {
        let corr = mbar.ad_mul(&residual);
        let best = (0..mbar.ncols())
            .filter(|j| norms[*j] > 0.0 && !support.contains(j))
            .max_by(|&a, &b| {
                let ca = corr[a].norm() / norms[a];
                let cb = corr[b].norm() / norms[b];
                ca.partial_cmp(&cb).unwrap().then(b.cmp(&a))
            });
        let Some(j) = best else { break };
        support.push(j);
        let sub = mbar.select_columns(support.iter());
        coeffs = complex_lstsq(&sub, ybar);
        residual = ybar - &sub * &coeffs;
    }
    let mut estimate = DVector::<Complex64>::zeros(mbar.ncols());
    for (k, &j) in support.iter().enumerate() {
        estimate[j] = coeffs[k];
    }
    Ok(OmpResult {
        residual_norm: residual.norm(),
        estimate,
        support,
    })
}

fn soft(v: f64, t: f64) -> f64 {
    v.signum() * (v.abs() - t).max(0.0)
}

/// `0.5 ||y - M h||^2 + lambda ||h||_1`.
pub fn lasso_objective(h: &[f64], y: &[f64], ens: &MeasurementEnsemble, lambda: f64) -> f64 {
    let r = DVector::from_column_slice(y) - &ens.real_matrix * DVector::from_column_slice(h);
    0.5 * r.norm_squared() + lambda * h.iter().map(|v| v.abs()).sum::<f64>()
}

/// Accelerated proximal gradient with step `1 / sigma_max(M)^2`, started
/// from zero.
pub fn fista_estimate(y: &[f64], ens: &MeasurementEnsemble, lambda: f64, iters: usize) -> Result<Vec<f64>> {
    if y.len() != ens.real_matrix.nrows() {
        return Err(Error::input("measurement length mismatch"));
    }
    if !(lambda >= 0.0) {
        return Err(Error::input("lambda must be non-negative"));
    }
    let n = ens.real_matrix.ncols();
    let step = 1.0 / ens.spectral_norm_sq;
    let yv = DVector::from_column_slice(y);
    let mt_y = ens.real_matrix.tr_mul(&yv);
    let mut x = DVector::<f64>::zeros(n);
    let mut z = x.clone();
    let mut theta = 1.0f64;
    for _ in 0..iters {
        let grad = ens.real_matrix.tr_mul(&(&ens.real_matrix * &z)) - &mt_y;
        let mut next = &z - grad * step;
        next.iter_mut().for_each(|v| *v = soft(*v, lambda * step));
        // Gradient-based adaptive restart: drop the momentum once it points
        // uphill.
        if (&z - &next).dot(&(&next - &x)) > 0.0 {
            theta = 1.0;
            z = next.clone();
            x = next;
            continue;
        }
        let theta_next = (1.0 + (1.0 + 4.0 * theta * theta).sqrt()) / 2.0;
        z = &next + (&next - &x) * ((theta - 1.0) / theta_next);
        x = next;
        theta = theta_next;
    }
    Ok(x.as_slice().to_vec())
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n == 0 {
        0.0
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Robust noise level `MAD / 0.6745`.
pub fn mad_sigma(v: &[f64]) -> f64 {
    let m = median(v.to_vec());
    median(v.iter().map(|x| (x - m).abs()).collect()) / 0.6745
}

/// OAMP with the same linear step as the fixed-point network and a soft
/// threshold at `alpha * sigma_hat`. The iterate is the divergence-corrected
/// output `(soft(r) - div * r) / (1 - div)`; the returned estimate is the
/// plain soft threshold of the last linear output.
pub fn oamp_estimate(y: &[f64], ens: &MeasurementEnsemble, cfg: &BaselineConfig) -> Result<Vec<f64>> {
    let n = ens.real_matrix.ncols();
    let mut h = vec![0.0; n];
    let mut out = h.clone();
    for _ in 0..cfg.oamp_iters {
        let r = linear_estimate(&h, y, ens)?;
        let tau = cfg.oamp_threshold_scale * mad_sigma(&r);
        let eta: Vec<f64> = r.iter().map(|&v| soft(v, tau)).collect();
        let div = r.iter().filter(|v| v.abs() > tau).count() as f64 / n as f64;
        h = if div < 1.0 - 1e-3 {
            let c = 1.0 / (1.0 - div);
            eta.iter().zip(&r).map(|(e, v)| c * (e - div * v)).collect()
        } else {
            eta.clone()
        };
        out = eta;
    }
    Ok(out)
}
