//! Flat `section.key = value` run configuration.
//!
//! Lines starting with `#` are comments. Later assignments win, so command
//! line overrides are simply applied after the file. Element and subarray
//! spacings default to `lambda / 2` and `2 lambda` of the configured carrier
//! unless set explicitly; the estimator map defaults to the most square
//! factorisation of `M`.

use std::path::PathBuf;

use sha2::{Digest, Sha256};

use crate::baselines::BaselineConfig;
use crate::error::{Error, Result};
use crate::estimator::{EstimatorConfig, StopMode};
use crate::geometry::ArraySpec;
use crate::measurement::MeasurementSpec;
use crate::nle::{map_shape_for, AttentionMode, NleConfig};
use crate::training::{DatasetSpec, TrainConfig};

/// Recorded in every CSV so results can be compared across runs.
pub const SNR_CONVENTION: &str = "sigma2=|hbar|^2*10^(-snr/10)/M per element before combining";

#[derive(Debug, Clone, PartialEq)]
pub struct Paths {
    pub dataset: PathBuf,
    pub checkpoint: PathBuf,
    pub output: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            dataset: PathBuf::from("data"),
            checkpoint: PathBuf::from("model.fpac"),
            output: PathBuf::from("results"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub array: ArraySpec,
    pub measurement: MeasurementSpec,
    pub nle: NleConfig,
    pub estimator: EstimatorConfig,
    pub train: TrainConfig,
    pub baselines: BaselineConfig,
    /// Dataset sizes, seeds and the path-draw scenario.
    pub data: DatasetSpec,
    pub paths: Paths,
    pub parallel: bool,
}

#[derive(Debug, Default)]
struct Explicit {
    d_a: bool,
    d_sub: bool,
    h: bool,
    w: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut c = RunConfig {
            array: ArraySpec::desk(),
            measurement: MeasurementSpec::default(),
            nle: NleConfig::default(),
            estimator: EstimatorConfig::default(),
            train: TrainConfig::default(),
            baselines: BaselineConfig::default(),
            data: DatasetSpec::default(),
            paths: Paths::default(),
            parallel: true,
        };
        c.resolve(&Explicit::default());
        c
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(key, format!("cannot parse `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::config(key, format!("expected a boolean, got `{value}`"))),
    }
}

/// Splits `key=value`, trimming both sides.
pub fn split_assignment(s: &str) -> Result<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::config(s.trim(), "expected `key = value`"))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

impl RunConfig {
    /// Applies `text` (file contents) and then `overrides` on top of the
    /// defaults, and validates the result.
    pub fn from_sources(text: Option<&str>, overrides: &[(String, String)]) -> Result<Self> {
        let mut assignments = Vec::new();
        if let Some(text) = text {
            for line in text.lines() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                assignments.push(split_assignment(line)?);
            }
        }
        assignments.extend(overrides.iter().cloned());
        let mut c = RunConfig::default();
        let mut explicit = Explicit::default();
        for (k, v) in &assignments {
            c.set(k, v, &mut explicit)?;
        }
        c.resolve(&explicit);
        c.validate()?;
        Ok(c)
    }

    fn resolve(&mut self, explicit: &Explicit) {
        let lambda = self.array.wavelength();
        if !explicit.d_a {
            self.array.element_spacing = lambda / 2.0;
        }
        if !explicit.d_sub {
            self.array.subarray_spacing = 2.0 * lambda;
        }
        let (h, w) = map_shape_for(self.array.num_elements());
        if !explicit.h {
            self.nle.map_height = h;
        }
        if !explicit.w {
            self.nle.map_width = w;
        }
    }

    fn set(&mut self, key: &str, v: &str, ex: &mut Explicit) -> Result<()> {
        let s = &mut self.data.scenario;
        match key {
            "array.N" => self.array.num_subarrays = parse(key, v)?,
            "array.Nbar" => self.array.elements_per_subarray = parse(key, v)?,
            "array.d_a" => {
                self.array.element_spacing = parse(key, v)?;
                ex.d_a = true;
            }
            "array.d_sub" => {
                self.array.subarray_spacing = parse(key, v)?;
                ex.d_sub = true;
            }
            "array.f_c" => self.array.carrier_frequency = parse(key, v)?,
            "scenario.L" => s.num_paths = parse(key, v)?,
            "scenario.r_min" => s.r_min = parse(key, v)?,
            "scenario.r_max" => s.r_max = parse(key, v)?,
            "scenario.theta_min" => s.theta_min = parse(key, v)?,
            "scenario.theta_max" => s.theta_max = parse(key, v)?,
            "scenario.los_gain" => s.los_gain = parse(key, v)?,
            "scenario.nlos_gain_min" => s.nlos_gain_min = parse(key, v)?,
            "scenario.nlos_gain_max" => s.nlos_gain_max = parse(key, v)?,
            "measurement.T" => self.measurement.pilot_slots = parse(key, v)?,
            "measurement.combiner_seed" => self.measurement.combiner_seed = parse(key, v)?,
            "measurement.snr_db" => self.measurement.snr_db = parse(key, v)?,
            "nle.C" => self.nle.feature_channels = parse(key, v)?,
            "nle.num_darbs" => self.nle.num_darbs = parse(key, v)?,
            "nle.r" => self.nle.reduction_ratio = parse(key, v)?,
            "nle.ks" => self.nle.spatial_kernel = parse(key, v)?,
            "nle.k" => self.nle.conv_kernel = parse(key, v)?,
            "nle.H" => {
                self.nle.map_height = parse(key, v)?;
                ex.h = true;
            }
            "nle.W" => {
                self.nle.map_width = parse(key, v)?;
                ex.w = true;
            }
            "nle.attention" => self.nle.attention = v.parse::<AttentionMode>()?,
            "estimator.epsilon" => self.estimator.tolerance = parse(key, v)?,
            "estimator.K_max" => self.estimator.max_iterations = parse(key, v)?,
            "estimator.stop_mode" => self.estimator.stop_mode = v.parse::<StopMode>()?,
            "train.batch_size" => self.train.batch_size = parse(key, v)?,
            "train.epochs" => self.train.epochs = parse(key, v)?,
            "train.learning_rate" => self.train.learning_rate = parse(key, v)?,
            "train.beta1" => self.train.beta1 = parse(key, v)?,
            "train.beta2" => self.train.beta2 = parse(key, v)?,
            "train.k_train_min" => self.train.k_train_min = parse(key, v)?,
            "train.k_train_max" => self.train.k_train_max = parse(key, v)?,
            "train.normalization_cadence" => self.train.normalization_cadence = parse(key, v)?,
            "train.seed" => self.train.rng_seed = parse(key, v)?,
            "train.unrolled" => self.train.unrolled = parse_bool(key, v)?,
            "train.val_snr_db" => self.train.val_snr_db = parse(key, v)?,
            "baselines.omp_sparsity" => self.baselines.omp_sparsity = parse(key, v)?,
            "baselines.fista_lambda" => self.baselines.fista_lambda = parse(key, v)?,
            "baselines.fista_iters" => self.baselines.fista_iters = parse(key, v)?,
            "baselines.oamp_iters" => self.baselines.oamp_iters = parse(key, v)?,
            "baselines.oamp_alpha" => self.baselines.oamp_threshold_scale = parse(key, v)?,
            "data.train_count" => self.data.train_count = parse(key, v)?,
            "data.val_count" => self.data.val_count = parse(key, v)?,
            "data.test_count" => self.data.test_count = parse(key, v)?,
            "data.seed" => self.data.base_seed = parse(key, v)?,
            "data.snr_min_db" => self.data.snr_min_db = parse(key, v)?,
            "data.snr_max_db" => self.data.snr_max_db = parse(key, v)?,
            "paths.dataset" => self.paths.dataset = PathBuf::from(v),
            "paths.checkpoint" => self.paths.checkpoint = PathBuf::from(v),
            "paths.output" => self.paths.output = PathBuf::from(v),
            "run.parallel" => self.parallel = parse_bool(key, v)?,
            _ => return Err(Error::config(key, "unknown key")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.array.validate()?;
        self.measurement.validate()?;
        self.nle.validate()?;
        self.estimator.validate()?;
        self.train.validate()?;
        self.baselines.validate()?;
        self.data.validate()?;
        if self.nle.vector_len() != 2 * self.array.num_elements() {
            return Err(Error::config(
                "nle.H",
                format!(
                    "map {}x{} does not hold M = {} angular coefficients",
                    self.nle.map_height,
                    self.nle.map_width,
                    self.array.num_elements()
                ),
            ));
        }
        Ok(())
    }

    /// Every setting in canonical `key=value` form, sorted by key.
    pub fn entries(&self) -> Vec<(String, String)> {
        let a = &self.array;
        let s = &self.data.scenario;
        let n = &self.nle;
        let t = &self.train;
        let b = &self.baselines;
        let d = &self.data;
        let mut e: Vec<(&str, String)> = vec![
            ("array.N", a.num_subarrays.to_string()),
            ("array.Nbar", a.elements_per_subarray.to_string()),
            ("array.d_a", format!("{:e}", a.element_spacing)),
            ("array.d_sub", format!("{:e}", a.subarray_spacing)),
            ("array.f_c", format!("{:e}", a.carrier_frequency)),
            ("scenario.L", s.num_paths.to_string()),
            ("scenario.r_min", s.r_min.to_string()),
            ("scenario.r_max", s.r_max.to_string()),
            ("scenario.theta_min", s.theta_min.to_string()),
            ("scenario.theta_max", s.theta_max.to_string()),
            ("scenario.los_gain", s.los_gain.to_string()),
            ("scenario.nlos_gain_min", s.nlos_gain_min.to_string()),
            ("scenario.nlos_gain_max", s.nlos_gain_max.to_string()),
            ("measurement.T", self.measurement.pilot_slots.to_string()),
            ("measurement.combiner_seed", self.measurement.combiner_seed.to_string()),
            ("measurement.snr_db", self.measurement.snr_db.to_string()),
            ("nle.C", n.feature_channels.to_string()),
            ("nle.num_darbs", n.num_darbs.to_string()),
            ("nle.r", n.reduction_ratio.to_string()),
            ("nle.ks", n.spatial_kernel.to_string()),
            ("nle.k", n.conv_kernel.to_string()),
            ("nle.H", n.map_height.to_string()),
            ("nle.W", n.map_width.to_string()),
            ("nle.attention", n.attention.as_str().to_string()),
            ("estimator.epsilon", self.estimator.tolerance.to_string()),
            ("estimator.K_max", self.estimator.max_iterations.to_string()),
            (
                "estimator.stop_mode",
                match self.estimator.stop_mode {
                    StopMode::Absolute => "absolute",
                    StopMode::Relative => "relative",
                }
                .to_string(),
            ),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.epochs", t.epochs.to_string()),
            ("train.learning_rate", t.learning_rate.to_string()),
            ("train.beta1", t.beta1.to_string()),
            ("train.beta2", t.beta2.to_string()),
            ("train.k_train_min", t.k_train_min.to_string()),
            ("train.k_train_max", t.k_train_max.to_string()),
            ("train.normalization_cadence", t.normalization_cadence.to_string()),
            ("train.seed", t.rng_seed.to_string()),
            ("train.unrolled", t.unrolled.to_string()),
            ("train.val_snr_db", t.val_snr_db.to_string()),
            ("baselines.omp_sparsity", b.omp_sparsity.to_string()),
            ("baselines.fista_lambda", b.fista_lambda.to_string()),
            ("baselines.fista_iters", b.fista_iters.to_string()),
            ("baselines.oamp_iters", b.oamp_iters.to_string()),
            ("baselines.oamp_alpha", b.oamp_threshold_scale.to_string()),
            ("data.train_count", d.train_count.to_string()),
            ("data.val_count", d.val_count.to_string()),
            ("data.test_count", d.test_count.to_string()),
            ("data.seed", d.base_seed.to_string()),
            ("data.snr_min_db", d.snr_min_db.to_string()),
            ("data.snr_max_db", d.snr_max_db.to_string()),
        ];
        e.sort_by(|x, y| x.0.cmp(y.0));
        e.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    /// SHA-256 over the canonical rendering of every numerical setting.
    /// Paths and the execution mode are excluded because they do not affect
    /// results.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.entries() {
            h.update(k.as_bytes());
            h.update(b"=");
            h.update(v.as_bytes());
            h.update(b"\n");
        }
        hex::encode(h.finalize())
    }

    pub fn render(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }
}
