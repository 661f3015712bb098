//! Command-line front end and the evaluation drivers behind it.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use nalgebra::DVector;

use crate::baselines::{fista_estimate, ls_estimate, oamp_estimate, omp_estimate, BaselineConfig};
use crate::channel::{complexify, realify};
use crate::config::{split_assignment, RunConfig, SNR_CONVENTION};
use crate::error::{Error, Result};
use crate::estimator::{estimate, estimate_from, le_op_count, EstimatorConfig};
use crate::measurement::{nmse_linear, to_db, MeasurementEnsemble};
use crate::nle::{nle_flops, AttentionMode, ModelParameters, NleConfig};
use crate::par::{self, Execution};
use crate::training::{
    generate_dataset, load_checkpoint, save_checkpoint, split_file, train, Dataset, Record, Split, TrainOutcome,
    SWEEP_SNRS_DB,
};

/// SNR of the iteration-count study.
pub const CONVERGENCE_SNR_DB: f64 = 15.0;
/// SNR of the ablation table.
pub const ABLATION_SNR_DB: f64 = 5.0;
pub const TUNED_SIDECAR: &str = "baselines_tuned.txt";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Ls,
    Omp,
    Fista,
    Oamp,
    FpAnet,
}

impl Method {
    pub const BASELINES: [Method; 4] = [Method::Ls, Method::Omp, Method::Fista, Method::Oamp];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Ls => "ls",
            Method::Omp => "omp",
            Method::Fista => "fista",
            Method::Oamp => "oamp",
            Method::FpAnet => "fpanet",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ls" => Ok(Method::Ls),
            "omp" => Ok(Method::Omp),
            "fista" => Ok(Method::Fista),
            "oamp" => Ok(Method::Oamp),
            "fpanet" | "fp-anet" => Ok(Method::FpAnet),
            _ => Err(Error::config("methods", format!("unknown method `{s}`"))),
        }
    }
}

/// Estimate for one record plus the iteration (or atom) count used.
pub fn run_method(
    method: Method,
    record: &Record,
    ens: &MeasurementEnsemble,
    bcfg: &BaselineConfig,
    model: Option<(&ModelParameters, &NleConfig)>,
    ecfg: &EstimatorConfig,
) -> Result<(Vec<f64>, usize)> {
    match method {
        Method::Ls => Ok((ls_estimate(&record.y, ens)?, 1)),
        Method::Omp => {
            let ybar = complexify(&DVector::from_column_slice(&record.y))?;
            let k = bcfg.omp_sparsity.min(ybar.len());
            let res = omp_estimate(&ybar, &ens.complex_matrix, k)?;
            Ok((realify(&res.estimate).as_slice().to_vec(), res.support.len()))
        }
        Method::Fista => Ok((
            fista_estimate(&record.y, ens, bcfg.fista_lambda, bcfg.fista_iters)?,
            bcfg.fista_iters,
        )),
        Method::Oamp => Ok((oamp_estimate(&record.y, ens, bcfg)?, bcfg.oamp_iters)),
        Method::FpAnet => {
            let (params, cfg) = model.ok_or_else(|| Error::input("fpanet needs a trained checkpoint"))?;
            let (h, trace) = estimate(&record.y, ens, params, cfg, ecfg, None)?;
            Ok((h, trace.iterations_used))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub snr_db: f64,
    pub method: Method,
    pub nmse_db: f64,
    pub samples: usize,
    pub iterations_mean: f64,
}

/// Mean NMSE (linear average, reported in dB) of `method` over `records`.
pub fn evaluate_records(
    method: Method,
    records: &[&Record],
    ens: &MeasurementEnsemble,
    bcfg: &BaselineConfig,
    model: Option<(&ModelParameters, &NleConfig)>,
    ecfg: &EstimatorConfig,
    exec: Execution,
) -> Result<(f64, f64)> {
    if records.is_empty() {
        return Err(Error::input("no records to evaluate"));
    }
    let out = par::map(exec, records, |r| -> Result<(f64, usize)> {
        let (h, it) = run_method(method, r, ens, bcfg, model, ecfg)?;
        Ok((nmse_linear(&r.h, &h)?, it))
    });
    let mut total = 0.0;
    let mut iters = 0usize;
    for o in out {
        let (n, it) = o?;
        total += n;
        iters += it;
    }
    let n = records.len() as f64;
    Ok((to_db(total / n), iters as f64 / n))
}

#[allow(clippy::too_many_arguments)]
pub fn sweep_snr(
    methods: &[Method],
    test: &Dataset,
    ens: &MeasurementEnsemble,
    bcfg: &BaselineConfig,
    model: Option<(&ModelParameters, &NleConfig)>,
    ecfg: &EstimatorConfig,
    snrs: &[f64],
    exec: Execution,
) -> Result<Vec<SweepRow>> {
    if methods.contains(&Method::FpAnet) && model.is_none() {
        return Err(Error::input("fpanet needs a trained checkpoint"));
    }
    let mut rows = Vec::new();
    for &snr in snrs {
        let recs = test.at_snr(snr);
        if recs.is_empty() {
            return Err(Error::input(format!("test split has no records at {snr} dB")));
        }
        for &m in methods {
            let (nmse_db, iterations_mean) = evaluate_records(m, &recs, ens, bcfg, model, ecfg, exec)?;
            rows.push(SweepRow {
                snr_db: snr,
                method: m,
                nmse_db,
                samples: recs.len(),
                iterations_mean,
            });
        }
    }
    Ok(rows)
}

/// Per-sample traces run to `K_max` with the stopping rule disabled.
pub fn convergence_traces(
    records: &[&Record],
    ens: &MeasurementEnsemble,
    params: &ModelParameters,
    cfg: &NleConfig,
    ecfg: &EstimatorConfig,
    exec: Execution,
) -> Result<Vec<crate::estimator::IterationTrace>> {
    let zero = vec![0.0; ens.real_matrix.ncols()];
    par::map(exec, records, |r| {
        estimate_from(&zero, &r.y, ens, params, cfg, ecfg, Some(&r.h), false).map(|(_, t)| t)
    })
    .into_iter()
    .collect()
}

/// `(k, NMSE dB)` for `k = 0..=K_max`; per-iteration NMSE is averaged in
/// linear scale across samples.
pub fn convergence_curve(traces: &[crate::estimator::IterationTrace], k_max: usize) -> Vec<(usize, f64)> {
    let mut out = vec![(0, 0.0)];
    for k in 0..k_max {
        let vals: Vec<f64> = traces
            .iter()
            .filter_map(|t| t.nmse_db.get(k))
            .map(|db| 10f64.powf(db / 10.0))
            .collect();
        if vals.is_empty() {
            break;
        }
        out.push((k + 1, to_db(vals.iter().sum::<f64>() / vals.len() as f64)));
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: AttentionMode,
    pub nmse_db: f64,
    pub params: usize,
    pub nle_flops: u64,
    pub le_ops: u64,
    pub best_epoch: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TunedBaselines {
    pub fista_lambda: f64,
    pub oamp_alpha: f64,
}

pub fn lambda_grid() -> Vec<f64> {
    (0..7).map(|i| 10f64.powf(-3.0 + 0.5 * i as f64)).collect()
}

pub const ALPHA_GRID: [f64; 4] = [0.5, 1.0, 1.5, 2.0];

/// Grid search of the FISTA weight and OAMP threshold scale on `records`.
pub fn tune_baselines(
    records: &[&Record],
    ens: &MeasurementEnsemble,
    bcfg: &BaselineConfig,
    exec: Execution,
) -> Result<TunedBaselines> {
    let ecfg = EstimatorConfig::default();
    let mut best_l = (f64::INFINITY, bcfg.fista_lambda);
    for lambda in lambda_grid() {
        let c = BaselineConfig { fista_lambda: lambda, ..*bcfg };
        let (db, _) = evaluate_records(Method::Fista, records, ens, &c, None, &ecfg, exec)?;
        if db < best_l.0 {
            best_l = (db, lambda);
        }
    }
    let mut best_a = (f64::INFINITY, bcfg.oamp_threshold_scale);
    for alpha in ALPHA_GRID {
        let c = BaselineConfig { oamp_threshold_scale: alpha, ..*bcfg };
        let (db, _) = evaluate_records(Method::Oamp, records, ens, &c, None, &ecfg, exec)?;
        if db < best_a.0 {
            best_a = (db, alpha);
        }
    }
    Ok(TunedBaselines {
        fista_lambda: best_l.1,
        oamp_alpha: best_a.1,
    })
}

pub fn write_sidecar(t: &TunedBaselines, path: &Path) -> Result<()> {
    fs::write(
        path,
        format!("baselines.fista_lambda={}\nbaselines.oamp_alpha={}\n", t.fista_lambda, t.oamp_alpha),
    )?;
    Ok(())
}

pub fn read_sidecar(path: &Path) -> Result<TunedBaselines> {
    let text = fs::read_to_string(path)?;
    let mut lambda = None;
    let mut alpha = None;
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = split_assignment(line)?;
        let parsed: f64 = v
            .parse()
            .map_err(|_| Error::format(format!("{}: bad value `{v}`", path.display())))?;
        match k.as_str() {
            "baselines.fista_lambda" => lambda = Some(parsed),
            "baselines.oamp_alpha" => alpha = Some(parsed),
            _ => return Err(Error::format(format!("{}: unknown key `{k}`", path.display()))),
        }
    }
    match (lambda, alpha) {
        (Some(fista_lambda), Some(oamp_alpha)) => Ok(TunedBaselines { fista_lambda, oamp_alpha }),
        _ => Err(Error::format(format!("{}: missing keys", path.display()))),
    }
}

/// CSV with a leading metadata comment.
pub fn write_csv(path: &Path, cfg: &RunConfig, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut buf = format!(
        "# config_hash={}; data_seed={}; train_seed={}; combiner_seed={}; snr_convention={}\n",
        cfg.hash(),
        cfg.data.base_seed,
        cfg.train.rng_seed,
        cfg.measurement.combiner_seed,
        SNR_CONVENTION
    )
    .into_bytes();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        w.write_record(header)?;
        for r in rows {
            w.write_record(r)?;
        }
        w.flush()?;
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn sweep_rows(rows: &[SweepRow]) -> Vec<Vec<String>> {
    rows.iter()
        .map(|r| {
            vec![
                r.snr_db.to_string(),
                r.method.as_str().to_string(),
                format!("{:.6}", r.nmse_db),
                r.samples.to_string(),
                format!("{:.6}", r.iterations_mean),
            ]
        })
        .collect()
}

pub const SWEEP_HEADER: [&str; 5] = ["snr_db", "method", "nmse_db", "samples", "iterations_mean"];

#[derive(Parser, Debug)]
#[command(name = "fpanet", about = "Hybrid-field THz channel estimation with fixed-point attention networks")]
pub struct Cli {
    /// key=value configuration file.
    #[arg(long, short, global = true)]
    pub config: Option<PathBuf>,
    /// Override a setting, e.g. `--set train.epochs=5`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate train/val/test splits into paths.dataset.
    GenData,
    /// Train the estimator and save the best-validation checkpoint.
    Train,
    /// Per-iteration traces on the test split at measurement.snr_db.
    Eval,
    /// NMSE versus SNR for the chosen methods.
    SweepSnr {
        #[arg(long, value_delimiter = ',', default_value = "ls,omp,fista,oamp,fpanet")]
        methods: Vec<String>,
    },
    /// NMSE versus iteration count at 15 dB.
    Convergence,
    /// Train and compare the four attention variants.
    Ablate {
        /// Reuse variant checkpoints from the output directory when present.
        #[arg(long)]
        reuse: bool,
    },
    /// Classical baselines over the SNR grid.
    Baselines {
        /// Run the validation grid search first unless a sidecar exists.
        #[arg(long)]
        tune: bool,
    },
    /// Grid search of baseline hyperparameters on the validation split.
    TuneBaselines {
        /// Search again even when a sidecar is present.
        #[arg(long)]
        force: bool,
    },
}

struct Context {
    cfg: RunConfig,
    exec: Execution,
}

impl Context {
    fn ensemble(&self) -> Result<MeasurementEnsemble> {
        MeasurementEnsemble::build(&self.cfg.array, &self.cfg.measurement)
    }

    fn load_split(&self, split: Split, ens: &MeasurementEnsemble) -> Result<Dataset> {
        let path = split_file(&self.cfg.paths.dataset, split);
        if !path.exists() {
            return Err(Error::input(format!("dataset file {} not found; run gen-data", path.display())));
        }
        let d = Dataset::load(&path)?;
        if d.dims != ens.dims {
            return Err(Error::input(format!("{} was generated for different dimensions", path.display())));
        }
        Ok(d)
    }

    fn load_model(&self) -> Result<(ModelParameters, NleConfig)> {
        let path = &self.cfg.paths.checkpoint;
        if !path.exists() {
            return Err(Error::input(format!("checkpoint {} not found; run train", path.display())));
        }
        load_checkpoint(path)
    }

    fn out(&self, name: &str) -> PathBuf {
        self.cfg.paths.output.join(name)
    }

    fn sidecar(&self) -> PathBuf {
        self.out(TUNED_SIDECAR)
    }

    /// Baseline settings, with tuned values from the sidecar when present.
    fn baselines(&self) -> Result<BaselineConfig> {
        let mut b = self.cfg.baselines;
        if self.sidecar().exists() {
            let t = read_sidecar(&self.sidecar())?;
            b.fista_lambda = t.fista_lambda;
            b.oamp_threshold_scale = t.oamp_alpha;
        }
        Ok(b)
    }
}

fn write_train_log(path: &Path, cfg: &RunConfig, out: &TrainOutcome) -> Result<()> {
    let rows: Vec<Vec<String>> = out
        .log
        .iter()
        .map(|e| {
            vec![
                e.epoch.to_string(),
                format!("{:.9}", e.train_loss),
                format!("{:.9}", e.val_loss),
                format!("{:.9}", e.lipschitz_estimate),
                (e.normalized as u8).to_string(),
            ]
        })
        .collect();
    write_csv(path, cfg, &["epoch", "train_loss", "val_loss", "lipschitz_estimate", "normalized"], &rows)
}

/// Ensure the variant's checkpoint exists and evaluate it.
fn ablate(ctx: &Context, reuse: bool) -> Result<()> {
    let cfg = &ctx.cfg;
    let ens = ctx.ensemble()?;
    let tr = ctx.load_split(Split::Train, &ens)?;
    let va = ctx.load_split(Split::Val, &ens)?;
    let te = ctx.load_split(Split::Test, &ens)?;
    let recs = te.at_snr(ABLATION_SNR_DB);
    let mut rows = Vec::new();
    let mut timing = Vec::new();
    for mode in AttentionMode::ALL {
        let ncfg = NleConfig { attention: mode, ..cfg.nle };
        let ckpt = ctx.out(&format!("ablation_{}.fpac", mode.as_str()));
        let (params, seconds, best_epoch) = if reuse && ckpt.exists() {
            let (p, c) = load_checkpoint(&ckpt)?;
            if c != ncfg {
                return Err(Error::input(format!("{} does not match the configured estimator", ckpt.display())));
            }
            (p, None, None)
        } else {
            log::info!("training variant {}", mode.as_str());
            let o = train(&tr, &va, &ens, &cfg.train, &ncfg, &cfg.estimator, ctx.exec)?;
            fs::create_dir_all(&cfg.paths.output)?;
            save_checkpoint(&o.params, &ncfg, &ckpt)?;
            write_train_log(&ctx.out(&format!("ablation_{}_log.csv", mode.as_str())), cfg, &o)?;
            let mean = o.epoch_seconds.iter().sum::<f64>() / o.epoch_seconds.len().max(1) as f64;
            (o.params, Some(mean), o.best_epoch)
        };
        let (nmse_db, _) = evaluate_records(
            Method::FpAnet,
            &recs,
            &ens,
            &cfg.baselines,
            Some((&params, &ncfg)),
            &cfg.estimator,
            ctx.exec,
        )?;
        let row = AblationRow {
            variant: mode,
            nmse_db,
            params: params.param_count(),
            nle_flops: nle_flops(&ncfg),
            le_ops: le_op_count(ens.dims.num_subarrays, ens.dims.elements_per_subarray, ens.dims.pilot_slots),
            best_epoch,
        };
        println!(
            "{:<8} nmse@{ABLATION_SNR_DB}dB {:>9.4} dB  params {:>6}  nle_flops {}",
            mode.as_str(),
            row.nmse_db,
            row.params,
            row.nle_flops
        );
        rows.push(row);
        timing.push(vec![
            mode.as_str().to_string(),
            seconds.map(|s| format!("{s:.3}")).unwrap_or_default(),
        ]);
    }
    let table: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.variant.as_str().to_string(),
                format!("{:.6}", r.nmse_db),
                r.params.to_string(),
                r.nle_flops.to_string(),
                r.le_ops.to_string(),
            ]
        })
        .collect();
    write_csv(
        &ctx.out("ablation.csv"),
        cfg,
        &["variant", "nmse_db", "params", "nle_flops", "le_ops"],
        &table,
    )?;
    write_csv(&ctx.out("ablation_timing.csv"), cfg, &["variant", "epoch_seconds_mean"], &timing)
}

fn tune(ctx: &Context, force: bool) -> Result<TunedBaselines> {
    let side = ctx.sidecar();
    if side.exists() && !force {
        println!("using tuned values from {}", side.display());
        return read_sidecar(&side);
    }
    let ens = ctx.ensemble()?;
    let va = ctx.load_split(Split::Val, &ens)?;
    let mut recs = va.at_snr(ctx.cfg.train.val_snr_db);
    if recs.is_empty() {
        recs = va.records.iter().collect();
    }
    let t = tune_baselines(&recs, &ens, &ctx.cfg.baselines, ctx.exec)?;
    fs::create_dir_all(&ctx.cfg.paths.output)?;
    write_sidecar(&t, &side)?;
    println!("fista_lambda={} oamp_alpha={} -> {}", t.fista_lambda, t.oamp_alpha, side.display());
    Ok(t)
}

fn dispatch(ctx: &Context, command: &Command) -> Result<()> {
    let cfg = &ctx.cfg;
    match command {
        Command::GenData => {
            let ens = ctx.ensemble()?;
            generate_dataset(&cfg.array, &cfg.data, &ens, &cfg.paths.dataset, ctx.exec)?;
            let mut f = fs::File::create(cfg.paths.dataset.join("ensemble.fpam"))?;
            ens.write_to(&mut f)?;
            fs::write(cfg.paths.dataset.join("config.txt"), cfg.render())?;
            println!("wrote dataset to {}", cfg.paths.dataset.display());
        }
        Command::Train => {
            let ens = ctx.ensemble()?;
            let tr = ctx.load_split(Split::Train, &ens)?;
            let va = ctx.load_split(Split::Val, &ens)?;
            let out = train(&tr, &va, &ens, &cfg.train, &cfg.nle, &cfg.estimator, ctx.exec)?;
            if let Some(dir) = cfg.paths.checkpoint.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            save_checkpoint(&out.params, &cfg.nle, &cfg.paths.checkpoint)?;
            write_train_log(&ctx.out("train_log.csv"), cfg, &out)?;
            println!(
                "best epoch {:?}, validation loss {:.6}; checkpoint {}",
                out.best_epoch,
                out.best_val_loss,
                cfg.paths.checkpoint.display()
            );
        }
        Command::Eval => {
            let ens = ctx.ensemble()?;
            let (params, ncfg) = ctx.load_model()?;
            let te = ctx.load_split(Split::Test, &ens)?;
            let recs = te.at_snr(cfg.measurement.snr_db);
            if recs.is_empty() {
                return Err(Error::input(format!("test split has no records at {} dB", cfg.measurement.snr_db)));
            }
            let traces = par::map(ctx.exec, &recs, |r| {
                estimate(&r.y, &ens, &params, &ncfg, &cfg.estimator, Some(&r.h)).map(|(_, t)| t)
            });
            let mut rows = Vec::new();
            let mut final_lin = 0.0;
            for (r, t) in recs.iter().zip(traces) {
                let t = t?;
                for k in 0..t.iterations_used {
                    rows.push(vec![
                        r.sample.to_string(),
                        (k + 1).to_string(),
                        format!("{:.9e}", t.residuals[k]),
                        format!("{:.6}", t.nmse_db[k]),
                    ]);
                }
                final_lin += 10f64.powf(t.nmse_db.last().copied().unwrap_or(0.0) / 10.0);
            }
            write_csv(&ctx.out("eval_traces.csv"), cfg, &["sample_id", "k", "residual", "nmse_db"], &rows)?;
            println!("nmse at {} dB: {:.4} dB", cfg.measurement.snr_db, to_db(final_lin / recs.len() as f64));
        }
        Command::SweepSnr { methods } => {
            let methods: Vec<Method> = methods.iter().map(|m| m.parse()).collect::<Result<_>>()?;
            let ens = ctx.ensemble()?;
            let model = if methods.contains(&Method::FpAnet) { Some(ctx.load_model()?) } else { None };
            let te = ctx.load_split(Split::Test, &ens)?;
            let bcfg = ctx.baselines()?;
            let rows = sweep_snr(
                &methods,
                &te,
                &ens,
                &bcfg,
                model.as_ref().map(|(p, c)| (p, c)),
                &cfg.estimator,
                &SWEEP_SNRS_DB,
                ctx.exec,
            )?;
            for r in &rows {
                println!("{:>5} dB  {:<7} {:>9.4} dB", r.snr_db, r.method.as_str(), r.nmse_db);
            }
            write_csv(&ctx.out("sweep_snr.csv"), cfg, &SWEEP_HEADER, &sweep_rows(&rows))?;
        }
        Command::Convergence => {
            let ens = ctx.ensemble()?;
            let (params, ncfg) = ctx.load_model()?;
            let te = ctx.load_split(Split::Test, &ens)?;
            let recs = te.at_snr(CONVERGENCE_SNR_DB);
            if recs.is_empty() {
                return Err(Error::input("test split has no records at 15 dB"));
            }
            let traces = convergence_traces(&recs, &ens, &params, &ncfg, &cfg.estimator, ctx.exec)?;
            let curve = convergence_curve(&traces, cfg.estimator.max_iterations);
            let rows: Vec<Vec<String>> = curve.iter().map(|(k, v)| vec![k.to_string(), format!("{v:.6}")]).collect();
            write_csv(&ctx.out("convergence.csv"), cfg, &["k", "nmse_db"], &rows)?;
            for (k, v) in curve {
                println!("k={k:<3} {v:>9.4} dB");
            }
        }
        Command::Ablate { reuse } => ablate(ctx, *reuse)?,
        Command::Baselines { tune: do_tune } => {
            if *do_tune {
                tune(ctx, false)?;
            }
            let ens = ctx.ensemble()?;
            let te = ctx.load_split(Split::Test, &ens)?;
            let bcfg = ctx.baselines()?;
            let rows = sweep_snr(
                &Method::BASELINES,
                &te,
                &ens,
                &bcfg,
                None,
                &cfg.estimator,
                &SWEEP_SNRS_DB,
                ctx.exec,
            )?;
            write_csv(&ctx.out("baselines.csv"), cfg, &SWEEP_HEADER, &sweep_rows(&rows))?;
            for r in &rows {
                println!("{:>5} dB  {:<7} {:>9.4} dB", r.snr_db, r.method.as_str(), r.nmse_db);
            }
        }
        Command::TuneBaselines { force } => {
            tune(ctx, *force)?;
        }
    }
    Ok(())
}

/// Parses configuration sources and runs the command.
pub fn execute(cli: &Cli) -> Result<()> {
    let text = match &cli.config {
        Some(p) => Some(
            fs::read_to_string(p).map_err(|e| Error::config("config", format!("{}: {e}", p.display())))?,
        ),
        None => None,
    };
    let overrides = cli
        .overrides
        .iter()
        .map(|s| split_assignment(s))
        .collect::<Result<Vec<_>>>()?;
    let cfg = RunConfig::from_sources(text.as_deref(), &overrides)?;
    let exec = if cfg.parallel { Execution::Parallel } else { Execution::Sequential };
    dispatch(&Context { cfg, exec }, &cli.command)
}

/// Entry point shared by the binary and tests; returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
