//! Dataset generation, checkpoints and the gradient-truncated training loop.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::channel::{sample_paths, ChannelRealization, ScenarioConfig};
use crate::error::{Error, Result};
use crate::estimator::{estimate, iterate, linear_estimate, EstimatorConfig};
use crate::geometry::ArraySpec;
use crate::measurement::{read_exact, read_f64, read_f64s, read_u32, read_u64, write_f64s, Dims, MeasurementEnsemble};
use crate::nle::{
    estimate_lipschitz, nle_tape, normalize_parameters, perturbation_probes, sharpen_probes, AttentionMode, ModelParameters,
    NleConfig, LIPSCHITZ_TARGET, PROBE_PAIRS, PROBE_POWER_STEPS, PROBE_SCALE,
};
use crate::par::{self, Execution};
use crate::tensor::{Tape, Tensor};

/// SNR grid used for validation/test records and the sweep.
pub const SWEEP_SNRS_DB: [f64; 5] = [0.0, 5.0, 10.0, 15.0, 20.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn code(self) -> u32 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        }
    }

    fn from_code(c: u32) -> Option<Self> {
        Split::ALL.into_iter().find(|s| s.code() == c)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SnrMode {
    /// One record per channel, SNR drawn uniformly from `[min, max]`.
    Uniform { min_db: f64, max_db: f64 },
    /// One record per channel and grid point.
    Grid(Vec<f64>),
}

impl SnrMode {
    fn records_per_sample(&self) -> usize {
        match self {
            SnrMode::Uniform { .. } => 1,
            SnrMode::Grid(g) => g.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub scenario: ScenarioConfig,
    pub train_count: usize,
    pub val_count: usize,
    pub test_count: usize,
    pub base_seed: u64,
    pub snr_min_db: f64,
    pub snr_max_db: f64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            scenario: ScenarioConfig::default(),
            train_count: 2000,
            val_count: 200,
            test_count: 200,
            base_seed: 1,
            snr_min_db: 0.0,
            snr_max_db: 20.0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        self.scenario.validate()?;
        for (field, n) in [
            ("data.train_count", self.train_count),
            ("data.val_count", self.val_count),
            ("data.test_count", self.test_count),
        ] {
            if n == 0 {
                return Err(Error::config(field, "must be at least 1"));
            }
        }
        if !(self.snr_min_db.is_finite() && self.snr_max_db.is_finite() && self.snr_min_db <= self.snr_max_db) {
            return Err(Error::config("data.snr_max_db", "need finite snr_min_db <= snr_max_db"));
        }
        Ok(())
    }

    pub fn count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train_count,
            Split::Val => self.val_count,
            Split::Test => self.test_count,
        }
    }

    pub fn snr_mode(&self, split: Split) -> SnrMode {
        match split {
            Split::Train => SnrMode::Uniform {
                min_db: self.snr_min_db,
                max_db: self.snr_max_db,
            },
            _ => SnrMode::Grid(SWEEP_SNRS_DB.to_vec()),
        }
    }
}

/// Independent stream for sample `index` of `split`.
pub fn sample_rng(base_seed: u64, split: Split, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(base_seed);
    rng.set_stream(((split.code() as u64 + 1) << 40) | index as u64);
    rng
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    /// Realified angular-domain channel.
    pub h: Vec<f64>,
    pub y: Vec<f64>,
    pub snr_db: f64,
    /// Channel index within the split.
    pub sample: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub dims: Dims,
    pub split: Split,
    pub snr_mode: SnrMode,
    pub samples: usize,
    pub records: Vec<Record>,
}

impl Dataset {
    /// Records at one SNR, in sample order.
    pub fn at_snr(&self, snr_db: f64) -> Vec<&Record> {
        self.records.iter().filter(|r| (r.snr_db - snr_db).abs() < 1e-9).collect()
    }
}

pub fn generate_split(
    spec: &ArraySpec,
    dspec: &DatasetSpec,
    ens: &MeasurementEnsemble,
    split: Split,
    exec: Execution,
) -> Result<Dataset> {
    dspec.validate()?;
    let mode = dspec.snr_mode(split);
    let per_sample = par::map_range(exec, dspec.count(split), |i| -> Result<Vec<Record>> {
        let mut rng = sample_rng(dspec.base_seed, split, i);
        let paths = sample_paths(&mut rng, &dspec.scenario)?;
        let ch = ChannelRealization::from_paths(spec, paths, &ens.dft_transform)?;
        let snrs = match &mode {
            SnrMode::Uniform { min_db, max_db } => {
                vec![if max_db > min_db { rng.random_range(*min_db..=*max_db) } else { *min_db }]
            }
            SnrMode::Grid(g) => g.clone(),
        };
        snrs.into_iter()
            .map(|snr| {
                let sigma2 = ens.noise_variance(&ch.h_angular, snr);
                let (_, y) = ens.simulate_reception(&ch.h_angular, sigma2, &mut rng)?;
                Ok(Record {
                    h: ch.h_real.as_slice().to_vec(),
                    y: y.as_slice().to_vec(),
                    snr_db: snr,
                    sample: i,
                })
            })
            .collect()
    });
    let mut records = Vec::new();
    for r in per_sample {
        records.extend(r?);
    }
    Ok(Dataset {
        dims: ens.dims,
        split,
        snr_mode: mode,
        samples: dspec.count(split),
        records,
    })
}

const DATASET_MAGIC: &[u8; 4] = b"FPAD";
const DATASET_VERSION: u32 = 1;

impl Dataset {
    /// Header: magic, version, `N, Nbar, T`, split, SNR mode and its
    /// parameters, channel count, record count. Then fixed-size records
    /// `h (2M), y (2NT), snr, sample index`, all little-endian.
    pub fn write_to<W: Write>(&self, out: &mut W) -> Result<()> {
        out.write_all(DATASET_MAGIC)?;
        out.write_all(&DATASET_VERSION.to_le_bytes())?;
        for d in [self.dims.num_subarrays, self.dims.elements_per_subarray, self.dims.pilot_slots] {
            out.write_all(&(d as u32).to_le_bytes())?;
        }
        out.write_all(&self.split.code().to_le_bytes())?;
        match &self.snr_mode {
            SnrMode::Uniform { min_db, max_db } => {
                out.write_all(&0u32.to_le_bytes())?;
                write_f64s(out, &[*min_db, *max_db])?;
            }
            SnrMode::Grid(g) => {
                out.write_all(&1u32.to_le_bytes())?;
                out.write_all(&(g.len() as u32).to_le_bytes())?;
                write_f64s(out, g)?;
            }
        }
        out.write_all(&(self.samples as u64).to_le_bytes())?;
        out.write_all(&(self.records.len() as u64).to_le_bytes())?;
        for r in &self.records {
            write_f64s(out, &r.h)?;
            write_f64s(out, &r.y)?;
            out.write_all(&r.snr_db.to_le_bytes())?;
            out.write_all(&(r.sample as u64).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(input: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(input, &mut magic)?;
        if &magic != DATASET_MAGIC {
            return Err(Error::format("not a dataset file (bad magic)"));
        }
        let version = read_u32(input)?;
        if version != DATASET_VERSION {
            return Err(Error::format(format!("unsupported dataset version {version}")));
        }
        let dims = Dims {
            num_subarrays: read_u32(input)? as usize,
            elements_per_subarray: read_u32(input)? as usize,
            pilot_slots: read_u32(input)? as usize,
        };
        let split = Split::from_code(read_u32(input)?).ok_or_else(|| Error::format("unknown split code"))?;
        let snr_mode = match read_u32(input)? {
            0 => {
                let v = read_f64s(input, 2)?;
                SnrMode::Uniform { min_db: v[0], max_db: v[1] }
            }
            1 => {
                let n = read_u32(input)? as usize;
                if n > 1 << 16 {
                    return Err(Error::format("implausible SNR grid length"));
                }
                SnrMode::Grid(read_f64s(input, n)?)
            }
            c => return Err(Error::format(format!("unknown SNR mode {c}"))),
        };
        let samples = read_u64(input)? as usize;
        let count = read_u64(input)? as usize;
        if count != samples * snr_mode.records_per_sample() {
            return Err(Error::format("record count does not match header"));
        }
        let (hl, yl) = (dims.real_channel_len(), dims.real_measurement_len());
        let mut records = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            let h = read_f64s(input, hl)?;
            let y = read_f64s(input, yl)?;
            let snr_db = read_f64(input)?;
            let sample = read_u64(input)? as usize;
            records.push(Record { h, y, snr_db, sample });
        }
        let mut rest = [0u8; 1];
        if input.read(&mut rest)? != 0 {
            return Err(Error::format("trailing bytes after last record"));
        }
        Ok(Dataset {
            dims,
            split,
            snr_mode,
            samples,
            records,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}

/// File name used for a split inside a dataset directory.
pub fn split_file(dir: &Path, split: Split) -> std::path::PathBuf {
    dir.join(format!("{}.fpad", split.as_str()))
}

pub fn generate_dataset(
    spec: &ArraySpec,
    dspec: &DatasetSpec,
    ens: &MeasurementEnsemble,
    dir: &Path,
    exec: Execution,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for split in Split::ALL {
        generate_split(spec, dspec, ens, split, exec)?.save(&split_file(dir, split))?;
    }
    Ok(())
}

/// `||est - h||^2 / ||h||^2`, or `None` for an all-zero channel.
pub fn sample_loss(est: &[f64], h: &[f64]) -> Option<f64> {
    let p: f64 = h.iter().map(|v| v * v).sum();
    if p > 0.0 {
        Some(est.iter().zip(h).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / p)
    } else {
        None
    }
}

/// Batch mean of [`sample_loss`]; zero channels are skipped with a warning.
pub fn loss(pairs: &[(&[f64], &[f64])]) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    for (est, h) in pairs {
        if est.len() != h.len() {
            return Err(Error::input("loss: length mismatch"));
        }
        match sample_loss(est, h) {
            Some(l) => {
                total += l;
                n += 1;
            }
            None => log::warn!("skipping sample with zero channel"),
        }
    }
    if n == 0 {
        return Err(Error::input("loss: no usable samples"));
    }
    Ok(total / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub k_train_min: usize,
    pub k_train_max: usize,
    /// Normalize every this many epochs; 0 disables.
    pub normalization_cadence: usize,
    pub rng_seed: u64,
    /// Backpropagate through all `K` iterations instead of the last one.
    pub unrolled: bool,
    pub val_snr_db: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            epochs: 30,
            learning_rate: 5e-3,
            beta1: 0.9,
            beta2: 0.999,
            k_train_min: 1,
            k_train_max: 4,
            normalization_cadence: 1,
            rng_seed: 11,
            unrolled: false,
            val_snr_db: 10.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be at least 1"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::config("train.learning_rate", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) {
            return Err(Error::config("train.beta1", "must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("train.beta2", "must lie in [0, 1)"));
        }
        if self.k_train_min == 0 {
            return Err(Error::config("train.k_train_min", "must be at least 1"));
        }
        if self.k_train_max < self.k_train_min {
            return Err(Error::config("train.k_train_max", "must be >= train.k_train_min"));
        }
        Ok(())
    }
}

/// Adaptive moment estimation over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &ModelParameters, lr: f64, beta1: f64, beta2: f64) -> Self {
        let mut m = Vec::new();
        params.visit(&mut |_, t| m.push(vec![0.0; t.len()]));
        Adam {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            step: 0,
            v: m.clone(),
            m,
        }
    }

    /// `grads` in visit order.
    pub fn update(&mut self, params: &mut ModelParameters, grads: &[Vec<f64>]) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        let mut i = 0;
        params.visit_mut(&mut |_, t| {
            let (m, v, g) = (&mut self.m[i], &mut self.v[i], &grads[i]);
            for (j, p) in t.data_mut().iter_mut().enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                *p -= self.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
            }
            i += 1;
        });
    }
}

/// Loss and parameter gradients of one sample.
///
/// The first `k - 1` iterations (or none, when unrolled) run without
/// gradients; the remaining ones are recorded on a single tape.
pub fn sample_gradient(
    params: &ModelParameters,
    cfg: &NleConfig,
    ens: &MeasurementEnsemble,
    le_operator: &Arc<DMatrix<f64>>,
    record: &Record,
    k: usize,
    unrolled: bool,
) -> Result<Option<(f64, Vec<Vec<f64>>)>> {
    let power: f64 = record.h.iter().map(|v| v * v).sum();
    if !(power > 0.0) {
        log::warn!("skipping sample {} with zero channel", record.sample);
        return Ok(None);
    }
    let free = if unrolled { 0 } else { k - 1 };
    let mut h = vec![0.0; record.h.len()];
    for _ in 0..free {
        h = iterate(&h, &record.y, ens, params, cfg)?;
    }
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, true);
    let out = if unrolled {
        let offset = (&ens.le_matrix * nalgebra::DVector::from_column_slice(&record.y)).as_slice().to_vec();
        let mut x = tape.constant(Tensor::from_vec(h));
        for _ in 0..k {
            let r = tape.affine(x, le_operator.clone(), &offset)?;
            x = nle_tape(&mut tape, &bound, r, cfg)?;
        }
        x
    } else {
        let r = tape.constant(Tensor::from_vec(linear_estimate(&h, &record.y, ens)?));
        nle_tape(&mut tape, &bound, r, cfg)?
    };
    let target = tape.constant(Tensor::from_vec(record.h.clone()));
    let diff = tape.sub(out, target)?;
    let sq = tape.sum_squares(diff);
    let l = tape.scale(sq, 1.0 / power);
    let value = tape.value(l).data()[0];
    if !value.is_finite() {
        return Err(Error::Numerical(format!("non-finite loss on sample {}", record.sample)));
    }
    let grads = tape.backward(l)?;
    Ok(Some((value, params.gradients_from(&bound, &grads))))
}

/// `I - Z M`, the linear part of the LE.
pub fn le_operator(ens: &MeasurementEnsemble) -> DMatrix<f64> {
    let n = ens.real_matrix.ncols();
    DMatrix::identity(n, n) - &ens.le_matrix * &ens.real_matrix
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lipschitz_estimate: f64,
    pub normalized: bool,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Best-validation parameters (the initialization when `epochs == 0`).
    pub params: ModelParameters,
    pub log: Vec<EpochLog>,
    pub best_epoch: Option<usize>,
    pub best_val_loss: f64,
    /// Wall-clock seconds per epoch; kept out of the log so it stays
    /// reproducible.
    pub epoch_seconds: Vec<f64>,
    /// Number of tapes that were differentiated, per batch.
    pub tapes_per_batch: Vec<usize>,
}

/// Mean loss of the full estimator on the validation records at `snr_db`
/// (every record when none match).
pub fn validation_loss(
    params: &ModelParameters,
    cfg: &NleConfig,
    ecfg: &EstimatorConfig,
    ens: &MeasurementEnsemble,
    val: &Dataset,
    snr_db: f64,
    exec: Execution,
) -> Result<f64> {
    let mut recs = val.at_snr(snr_db);
    if recs.is_empty() {
        recs = val.records.iter().collect();
    }
    let ests = par::map(exec, &recs, |r| estimate(&r.y, ens, params, cfg, ecfg, None).map(|(h, _)| h));
    let mut pairs_owned = Vec::with_capacity(recs.len());
    for e in ests {
        pairs_owned.push(e?);
    }
    let pairs: Vec<(&[f64], &[f64])> = pairs_owned.iter().zip(&recs).map(|(e, r)| (&e[..], &r.h[..])).collect();
    loss(&pairs)
}

/// Probe centres: the first linear estimates `Z y` of up to `count`
/// training records.
fn probe_centers(ens: &MeasurementEnsemble, train: &Dataset, count: usize) -> Result<Vec<Vec<f64>>> {
    let zero = vec![0.0; ens.real_matrix.ncols()];
    train
        .records
        .iter()
        .take(count.max(1))
        .map(|r| linear_estimate(&zero, &r.y, ens))
        .collect()
}

#[allow(clippy::too_many_arguments)]
pub fn train(
    train_set: &Dataset,
    val_set: &Dataset,
    ens: &MeasurementEnsemble,
    tcfg: &TrainConfig,
    cfg: &NleConfig,
    ecfg: &EstimatorConfig,
    exec: Execution,
) -> Result<TrainOutcome> {
    tcfg.validate()?;
    cfg.validate()?;
    ecfg.validate()?;
    if train_set.records.is_empty() || val_set.records.is_empty() {
        return Err(Error::input("training and validation sets must be non-empty"));
    }
    if cfg.vector_len() != ens.real_matrix.ncols() {
        return Err(Error::input(format!(
            "estimator map {}x{}x2 does not match channel length {}",
            cfg.map_height,
            cfg.map_width,
            ens.real_matrix.ncols()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.rng_seed);
    let mut params = ModelParameters::init(cfg, &mut rng);
    let mut outcome = TrainOutcome {
        params: params.clone(),
        log: Vec::new(),
        best_epoch: None,
        best_val_loss: f64::INFINITY,
        epoch_seconds: Vec::new(),
        tapes_per_batch: Vec::new(),
    };
    let mut adam = Adam::new(&params, tcfg.learning_rate, tcfg.beta1, tcfg.beta2);
    let operator = Arc::new(le_operator(ens));
    let centers = probe_centers(ens, train_set, 64)?;
    let mut order: Vec<usize> = (0..train_set.records.len()).collect();

    for epoch in 1..=tcfg.epochs {
        let start = std::time::Instant::now();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut loss_n = 0usize;
        for batch in order.chunks(tcfg.batch_size) {
            let k = rng.random_range(tcfg.k_train_min..=tcfg.k_train_max);
            let results = par::map(exec, batch, |&i| {
                sample_gradient(&params, cfg, ens, &operator, &train_set.records[i], k, tcfg.unrolled)
            });
            let mut total: Option<Vec<Vec<f64>>> = None;
            let mut used = 0usize;
            for r in results {
                let Some((l, g)) = r? else { continue };
                loss_sum += l;
                loss_n += 1;
                used += 1;
                match &mut total {
                    None => total = Some(g),
                    Some(t) => {
                        for (a, b) in t.iter_mut().zip(&g) {
                            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
                        }
                    }
                }
            }
            outcome.tapes_per_batch.push(used);
            if let Some(mut g) = total {
                let inv = 1.0 / used as f64;
                g.iter_mut().for_each(|t| t.iter_mut().for_each(|v| *v *= inv));
                adam.update(&mut params, &g);
            }
            if !params.is_finite() {
                return Err(Error::Numerical(format!("parameters diverged in epoch {epoch}")));
            }
        }
        let train_loss = if loss_n > 0 { loss_sum / loss_n as f64 } else { f64::NAN };
        if !train_loss.is_finite() {
            return Err(Error::Numerical(format!("training loss is not finite in epoch {epoch}")));
        }

        let probes = perturbation_probes(&centers, PROBE_PAIRS, PROBE_SCALE, &mut rng);
        let probes = sharpen_probes(&params, cfg, &probes, PROBE_POWER_STEPS, exec)?;
        let mut lipschitz = estimate_lipschitz(&params, cfg, &probes, exec)?;
        let mut normalized = false;
        if tcfg.normalization_cadence > 0 && epoch % tcfg.normalization_cadence == 0 && lipschitz > LIPSCHITZ_TARGET {
            let n = normalize_parameters(&params, cfg, lipschitz, LIPSCHITZ_TARGET, &probes, exec)?;
            log::info!(
                "epoch {epoch}: normalized {lipschitz:.4} -> {:.4} in {} rounds",
                n.lipschitz_after,
                n.rounds
            );
            params = n.params;
            lipschitz = n.lipschitz_after;
            normalized = true;
        }
        let val_loss = validation_loss(&params, cfg, ecfg, ens, val_set, tcfg.val_snr_db, exec)?;
        if !val_loss.is_finite() {
            return Err(Error::Numerical(format!("validation loss is not finite in epoch {epoch}")));
        }
        log::info!("epoch {epoch}: train {train_loss:.5} val {val_loss:.5} L {lipschitz:.4}");
        if val_loss < outcome.best_val_loss {
            outcome.best_val_loss = val_loss;
            outcome.best_epoch = Some(epoch);
            outcome.params = params.clone();
        }
        outcome.log.push(EpochLog {
            epoch,
            train_loss,
            val_loss,
            lipschitz_estimate: lipschitz,
            normalized,
        });
        outcome.epoch_seconds.push(start.elapsed().as_secs_f64());
    }
    Ok(outcome)
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"FPAC";
const CHECKPOINT_VERSION: u32 = 1;

/// Layout: magic, version, the eight estimator settings as u32, tensor
/// count, then per tensor name length, name, rank, dims and values.
pub fn write_checkpoint<W: Write>(params: &ModelParameters, cfg: &NleConfig, out: &mut W) -> Result<()> {
    out.write_all(CHECKPOINT_MAGIC)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    for v in [
        cfg.feature_channels,
        cfg.num_darbs,
        cfg.reduction_ratio,
        cfg.spatial_kernel,
        cfg.conv_kernel,
        cfg.map_height,
        cfg.map_width,
    ] {
        out.write_all(&(v as u32).to_le_bytes())?;
    }
    out.write_all(&cfg.attention.code().to_le_bytes())?;
    let tensors = params.named_tensors();
    out.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in &tensors {
        out.write_all(&(name.len() as u32).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for d in t.shape() {
            out.write_all(&(*d as u32).to_le_bytes())?;
        }
        write_f64s(out, t.data())?;
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(input: &mut R) -> Result<(ModelParameters, NleConfig)> {
    let mut magic = [0u8; 4];
    read_exact(input, &mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::format("not a checkpoint file (bad magic)"));
    }
    let version = read_u32(input)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(format!("unsupported checkpoint version {version}")));
    }
    let mut f = [0usize; 7];
    for v in f.iter_mut() {
        *v = read_u32(input)? as usize;
    }
    let attention =
        AttentionMode::from_code(read_u32(input)?).ok_or_else(|| Error::format("unknown attention mode"))?;
    let cfg = NleConfig {
        feature_channels: f[0],
        num_darbs: f[1],
        reduction_ratio: f[2],
        spatial_kernel: f[3],
        conv_kernel: f[4],
        map_height: f[5],
        map_width: f[6],
        attention,
    };
    cfg.validate().map_err(|e| Error::format(format!("checkpoint settings invalid: {e}")))?;
    let count = read_u32(input)? as usize;
    let mut tensors = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let len = read_u32(input)? as usize;
        if len > 256 {
            return Err(Error::format("implausible tensor name length"));
        }
        let mut name = vec![0u8; len];
        read_exact(input, &mut name)?;
        let name = String::from_utf8(name).map_err(|_| Error::format("tensor name is not UTF-8"))?;
        let rank = read_u32(input)? as usize;
        if !(1..=4).contains(&rank) {
            return Err(Error::format(format!("tensor `{name}` has rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(input)? as usize);
        }
        let n: usize = shape.iter().product();
        if n > 1 << 24 {
            return Err(Error::format(format!("tensor `{name}` is implausibly large")));
        }
        let data = read_f64s(input, n)?;
        tensors.push((name, Tensor::new(shape, data)?));
    }
    let mut rest = [0u8; 1];
    if input.read(&mut rest)? != 0 {
        return Err(Error::format("trailing bytes after last tensor"));
    }
    Ok((ModelParameters::from_named(&cfg, tensors)?, cfg))
}

pub fn save_checkpoint(params: &ModelParameters, cfg: &NleConfig, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(params, cfg, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelParameters, NleConfig)> {
    read_checkpoint(&mut BufReader::new(File::open(path)?))
}
