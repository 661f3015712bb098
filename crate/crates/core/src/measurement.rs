//! Pilot measurement operator, combiner sampling and reception simulation.

use std::f64::consts::PI;
use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::channel::realify;
use crate::error::{Error, Result};
use crate::geometry::ArraySpec;

/// Power floor used when converting an exact recovery to decibels.
pub const NMSE_FLOOR_DB: f64 = -300.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeasurementSpec {
    pub pilot_slots: usize,
    pub combiner_seed: u64,
    pub snr_db: f64,
}

impl Default for MeasurementSpec {
    fn default() -> Self {
        MeasurementSpec {
            pilot_slots: 8,
            combiner_seed: 7,
            snr_db: 10.0,
        }
    }
}

impl MeasurementSpec {
    pub fn validate(&self) -> Result<()> {
        if self.pilot_slots == 0 {
            return Err(Error::config("measurement.T", "need at least one pilot slot"));
        }
        Ok(())
    }
}

/// Problem dimensions shared by every operator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub num_subarrays: usize,
    pub elements_per_subarray: usize,
    pub pilot_slots: usize,
}

impl Dims {
    pub fn new(spec: &ArraySpec, mspec: &MeasurementSpec) -> Self {
        Dims {
            num_subarrays: spec.num_subarrays,
            elements_per_subarray: spec.elements_per_subarray,
            pilot_slots: mspec.pilot_slots,
        }
    }

    pub fn num_elements(&self) -> usize {
        self.num_subarrays * self.elements_per_subarray
    }

    /// Complex measurements `N * T`.
    pub fn num_measurements(&self) -> usize {
        self.num_subarrays * self.pilot_slots
    }

    /// Length of the realified channel, `2 N Nbar`.
    pub fn real_channel_len(&self) -> usize {
        2 * self.num_elements()
    }

    pub fn real_measurement_len(&self) -> usize {
        2 * self.num_measurements()
    }
}

#[derive(Debug, Clone)]
pub struct MeasurementEnsemble {
    pub dims: Dims,
    pub dft_transform: DMatrix<Complex64>,
    pub combiners: Vec<DMatrix<Complex64>>,
    pub complex_matrix: DMatrix<Complex64>,
    pub real_matrix: DMatrix<f64>,
    pub pseudo_inverse: DMatrix<f64>,
    pub le_matrix: DMatrix<f64>,
    pub step_size: f64,
    pub rank: usize,
    /// Largest squared singular value of the real operator.
    pub spectral_norm_sq: f64,
}

/// Block-diagonal unitary DFT, one `Nbar x Nbar` block per subarray.
pub fn build_dft_transform(spec: &ArraySpec) -> DMatrix<Complex64> {
    let nbar = spec.elements_per_subarray;
    let m = spec.num_elements();
    let scale = 1.0 / (nbar as f64).sqrt();
    let mut e = DMatrix::<Complex64>::zeros(m, m);
    for n in 0..spec.num_subarrays {
        let off = n * nbar;
        for a in 0..nbar {
            for b in 0..nbar {
                let angle = -2.0 * PI * ((a * b) % nbar) as f64 / nbar as f64;
                e[(off + a, off + b)] = Complex64::from_polar(scale, angle);
            }
        }
    }
    e
}

/// One-bit analog combiners `W_t = blkdiag(w_1t, ..., w_Nt)`.
pub fn sample_combiners<R: Rng + ?Sized>(
    spec: &ArraySpec,
    mspec: &MeasurementSpec,
    rng: &mut R,
) -> Vec<DMatrix<Complex64>> {
    let nbar = spec.elements_per_subarray;
    let amp = 1.0 / (nbar as f64).sqrt();
    (0..mspec.pilot_slots)
        .map(|_| {
            let mut w = DMatrix::<Complex64>::zeros(spec.num_elements(), spec.num_subarrays);
            for n in 0..spec.num_subarrays {
                for j in 0..nbar {
                    let sign = if rng.random::<bool>() { amp } else { -amp };
                    w[(n * nbar + j, n)] = Complex64::new(sign, 0.0);
                }
            }
            w
        })
        .collect()
}

/// Real block form `[[Re, -Im], [Im, Re]]` of a complex matrix.
pub fn realify_matrix(a: &DMatrix<Complex64>) -> DMatrix<f64> {
    let (r, c) = a.shape();
    DMatrix::from_fn(2 * r, 2 * c, |i, j| {
        let v = a[(i % r, j % c)];
        match (i < r, j < c) {
            (true, true) | (false, false) => v.re,
            (true, false) => -v.im,
            (false, true) => v.im,
        }
    })
}

/// Stack `W_t^H E` over all slots and realify.
pub fn assemble_measurement(
    dft: &DMatrix<Complex64>,
    combiners: &[DMatrix<Complex64>],
) -> Result<(DMatrix<Complex64>, DMatrix<f64>)> {
    if combiners.is_empty() {
        return Err(Error::input("no combiners"));
    }
    let m = dft.ncols();
    if dft.nrows() != m {
        return Err(Error::input("angular transform must be square"));
    }
    let n = combiners[0].ncols();
    for w in combiners {
        if w.nrows() != m || w.ncols() != n {
            return Err(Error::input(format!(
                "combiner is {}x{}, expected {m}x{n}",
                w.nrows(),
                w.ncols()
            )));
        }
    }
    let mut stacked = DMatrix::<Complex64>::zeros(n * combiners.len(), m);
    for (t, w) in combiners.iter().enumerate() {
        let block = w.adjoint() * dft;
        stacked.view_mut((t * n, 0), (n, m)).copy_from(&block);
    }
    let real = realify_matrix(&stacked);
    Ok((stacked, real))
}

/// Pseudo-inverse and the OAMP step size `rho = 2 N Nbar / tr(M^+ M)`.
///
/// Returns `(Z, rho, M^+, rank, sigma_max^2)`.
pub fn compute_le_matrix(m: &DMatrix<f64>) -> Result<(DMatrix<f64>, f64, DMatrix<f64>, usize, f64)> {
    let svd = m.clone().svd(true, true);
    let sigma_max = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    if !(sigma_max > 0.0) {
        return Err(Error::Numerical("measurement matrix is zero".into()));
    }
    let tol = m.nrows().max(m.ncols()) as f64 * sigma_max * 1e-12;
    let u = svd.u.as_ref().expect("requested U");
    let vt = svd.v_t.as_ref().expect("requested V^T");
    let mut pinv = DMatrix::<f64>::zeros(m.ncols(), m.nrows());
    let mut rank = 0;
    for (k, &s) in svd.singular_values.iter().enumerate() {
        if s > tol {
            rank += 1;
            // pinv += v_k u_k^T / s
            let v = vt.row(k).transpose();
            let uk = u.column(k);
            pinv.ger(1.0 / s, &v, &uk, 1.0);
        }
    }
    // trace(M^+ M) is the numerical rank, computed directly to keep the
    // stated identity exact to rounding.
    let trace: f64 = (0..m.ncols())
        .map(|i| pinv.row(i).dot(&m.column(i).transpose()))
        .sum();
    let step = m.ncols() as f64 / trace;
    let z = &pinv * step;
    Ok((z, step, pinv, rank, sigma_max * sigma_max))
}

impl MeasurementEnsemble {
    pub fn build(spec: &ArraySpec, mspec: &MeasurementSpec) -> Result<Self> {
        use rand::SeedableRng;
        spec.validate()?;
        mspec.validate()?;
        let dft = build_dft_transform(spec);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(mspec.combiner_seed);
        let combiners = sample_combiners(spec, mspec, &mut rng);
        Self::from_parts(Dims::new(spec, mspec), dft, combiners)
    }

    pub fn from_parts(dims: Dims, dft: DMatrix<Complex64>, combiners: Vec<DMatrix<Complex64>>) -> Result<Self> {
        let (complex_matrix, real_matrix) = assemble_measurement(&dft, &combiners)?;
        let (le_matrix, step_size, pseudo_inverse, rank, spectral_norm_sq) = compute_le_matrix(&real_matrix)?;
        Ok(MeasurementEnsemble {
            dims,
            dft_transform: dft,
            combiners,
            complex_matrix,
            real_matrix,
            pseudo_inverse,
            le_matrix,
            step_size,
            rank,
            spectral_norm_sq,
        })
    }

    /// Noise variance per complex element giving `snr_db` for this channel.
    pub fn noise_variance(&self, h_angular: &DVector<Complex64>, snr_db: f64) -> f64 {
        h_angular.norm_squared() * 10f64.powf(-snr_db / 10.0) / self.dims.num_elements() as f64
    }

    /// Noisy pilots `(ybar, y)`. Noise enters before combining, per element
    /// and slot, with variance `sigma2`.
    pub fn simulate_reception<R: Rng + ?Sized>(
        &self,
        h_angular: &DVector<Complex64>,
        sigma2: f64,
        rng: &mut R,
    ) -> Result<(DVector<Complex64>, DVector<f64>)> {
        if h_angular.len() != self.dims.num_elements() {
            return Err(Error::input(format!(
                "channel length {} != {}",
                h_angular.len(),
                self.dims.num_elements()
            )));
        }
        let mut ybar = &self.complex_matrix * h_angular;
        if sigma2 > 0.0 {
            let std = (sigma2 / 2.0).sqrt();
            let n = self.dims.num_subarrays;
            for (t, w) in self.combiners.iter().enumerate() {
                let noise = DVector::<Complex64>::from_fn(self.dims.num_elements(), |_, _| {
                    let re: f64 = StandardNormal.sample(rng);
                    let im: f64 = StandardNormal.sample(rng);
                    Complex64::new(std * re, std * im)
                });
                let combined = w.adjoint() * noise;
                for i in 0..n {
                    ybar[t * n + i] += combined[i];
                }
            }
        }
        let y = realify(&ybar);
        Ok((ybar, y))
    }

    /// Writes magic, version, `(N, Nbar, T)`, then `M`, `Z` row-major and `rho`,
    /// all little-endian.
    pub fn write_to<W: Write>(&self, out: &mut W) -> Result<()> {
        out.write_all(ENSEMBLE_MAGIC)?;
        out.write_all(&ENSEMBLE_VERSION.to_le_bytes())?;
        for d in [self.dims.num_subarrays, self.dims.elements_per_subarray, self.dims.pilot_slots] {
            out.write_all(&(d as u32).to_le_bytes())?;
        }
        write_row_major(out, &self.real_matrix)?;
        write_row_major(out, &self.le_matrix)?;
        out.write_all(&self.step_size.to_le_bytes())?;
        Ok(())
    }
}

const ENSEMBLE_MAGIC: &[u8; 4] = b"FPAM";
const ENSEMBLE_VERSION: u32 = 1;

/// Contents of a measurement-ensemble file.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredEnsemble {
    pub dims: Dims,
    pub real_matrix: DMatrix<f64>,
    pub le_matrix: DMatrix<f64>,
    pub step_size: f64,
}

impl StoredEnsemble {
    pub fn read_from<R: Read>(input: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(input, &mut magic)?;
        if &magic != ENSEMBLE_MAGIC {
            return Err(Error::format("bad ensemble magic"));
        }
        let version = read_u32(input)?;
        if version != ENSEMBLE_VERSION {
            return Err(Error::format(format!("unsupported ensemble version {version}")));
        }
        let dims = Dims {
            num_subarrays: read_u32(input)? as usize,
            elements_per_subarray: read_u32(input)? as usize,
            pilot_slots: read_u32(input)? as usize,
        };
        let (rows, cols) = (dims.real_measurement_len(), dims.real_channel_len());
        let real_matrix = read_row_major(input, rows, cols)?;
        let le_matrix = read_row_major(input, cols, rows)?;
        let step_size = read_f64(input)?;
        Ok(StoredEnsemble {
            dims,
            real_matrix,
            le_matrix,
            step_size,
        })
    }
}

pub(crate) fn read_exact<R: Read>(input: &mut R, buf: &mut [u8]) -> Result<()> {
    input.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::format("file truncated"),
        _ => Error::Io(e),
    })
}

pub(crate) fn read_u32<R: Read>(input: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(input, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_u64<R: Read>(input: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(input, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub(crate) fn read_f64<R: Read>(input: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    read_exact(input, &mut b)?;
    Ok(f64::from_le_bytes(b))
}

pub(crate) fn read_f64s<R: Read>(input: &mut R, n: usize) -> Result<Vec<f64>> {
    let mut bytes = vec![0u8; n * 8];
    read_exact(input, &mut bytes)?;
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

pub(crate) fn write_f64s<W: Write>(out: &mut W, values: &[f64]) -> std::io::Result<()> {
    let mut bytes = Vec::with_capacity(values.len() * 8);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&bytes)
}

fn write_row_major<W: Write>(out: &mut W, m: &DMatrix<f64>) -> Result<()> {
    let rows: Vec<f64> = m.transpose().iter().copied().collect();
    write_f64s(out, &rows)?;
    Ok(())
}

fn read_row_major<R: Read>(input: &mut R, rows: usize, cols: usize) -> Result<DMatrix<f64>> {
    let values = read_f64s(input, rows * cols)?;
    Ok(DMatrix::from_row_slice(rows, cols, &values))
}

/// Per-sample normalised squared error `||h - h_est||^2 / ||h||^2`.
pub fn nmse_linear(h_true: &[f64], h_est: &[f64]) -> Result<f64> {
    if h_true.len() != h_est.len() {
        return Err(Error::input(format!("length mismatch {} vs {}", h_true.len(), h_est.len())));
    }
    let power: f64 = h_true.iter().map(|v| v * v).sum();
    if !(power > 0.0) {
        return Err(Error::input("true channel is zero"));
    }
    let err: f64 = h_true.iter().zip(h_est).map(|(a, b)| (a - b).powi(2)).sum();
    Ok(err / power)
}

pub fn to_db(linear: f64) -> f64 {
    if linear > 0.0 {
        (10.0 * linear.log10()).max(NMSE_FLOOR_DB)
    } else {
        NMSE_FLOOR_DB
    }
}

/// Batch NMSE in dB: per-sample ratios are averaged in linear scale first.
pub fn nmse_db(pairs: &[(&[f64], &[f64])]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::input("empty batch"));
    }
    let mut total = 0.0;
    for (t, e) in pairs {
        total += nmse_linear(t, e)?;
    }
    Ok(to_db(total / pairs.len() as f64))
}
