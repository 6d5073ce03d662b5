//! Experiment orchestration: configuration, training loop, evaluation, CSV
//! logging, multi-seed runs and one-parameter sweeps.
//!
//! Every run writes into its output directory:
//!
//! - `config.toml`: the exact configuration used (its SHA-256 is the config hash)
//! - `metrics.csv`: one row per evaluation per seed
//! - `checkpoint_seed<N>.txt`: final parameters per seed
//! - `summary.csv`: final metrics, mean and sample std over seeds
//!
//! A non-finite loss aborts the run and leaves `diagnostic_seed<N>.toml`.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::adversarial::AdvConfig;
use crate::baselines::{ema_update, method_loss, LossContext, MethodId, MethodSpec};
use crate::checkpoint::{self, CheckpointError};
use crate::constraints::{ConnectivityConfig, ConstraintError, ConstraintKind, SeedPolicy};
use crate::data::{self, DataError, Dataset, ShapeParams, SplitManifest};
use crate::grid::{Adjacency, DiscreteMask, Image, RngState};
use crate::losses::{LossBreakdown, LossError, LossWeights, MonteCarloConfig, StepLoss};
use crate::metrics::{image_metrics, mean_std, MetricError, MetricReport};
use crate::net::{AdamConfig, ArchConfig, LrSchedule, NetError, NetworkParams, OptimizerState};

pub const CSV_HEADER: &str =
    "step,method,seed,lambda,gamma,epsilon,m,l,k,dsc,hd,n_conn,loss_sup,loss_lds,loss_cons,lr,wall_s";

mod tag {
    pub const INIT: u64 = 0x696e_6974;
    pub const STEP: u64 = 0x7374_6570;
    pub const BATCH: u64 = 0x6261_7463;
    pub const LOSS: u64 = 0x6c6f_7373;
    pub const EVAL: u64 = 0x6576_616c;
}

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("non-finite loss at step {step} (seed {seed}); diagnostic: {diagnostic}")]
    NonFinite { seed: u64, step: u64, diagnostic: String },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Constraint(#[from] ConstraintError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Flat training configuration. Unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub method: MethodId,
    pub lambda: f64,
    pub gamma: f64,
    pub epsilon: f64,
    /// Probe scale for power iteration; unset selects the automatic scale.
    pub xi: Option<f64>,
    pub power_iters: usize,
    /// Monte-Carlo samples per unlabeled image.
    pub m: usize,
    /// Seed-selection window.
    pub l: usize,
    /// Violation window.
    pub k: usize,
    pub adjacency: Adjacency,
    pub constraint: ConstraintKind,
    pub seed_policy: SeedPolicy,
    pub reward_baseline: f64,
    pub ema_alpha: f64,
    pub noise_sigma: f64,

    pub hidden: Vec<usize>,
    pub kernel: usize,
    pub lr: f64,
    pub lr_floor: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub rectified_adam: bool,
    pub labeled_batch: usize,
    pub unlabeled_batch: usize,

    /// Dataset directory; when unset a synthetic set is generated.
    pub data: Option<PathBuf>,
    pub gen_n: usize,
    pub gen_height: usize,
    pub gen_width: usize,
    pub gen_seed: u64,
    pub standardize: bool,
    pub labeled_ratio: f64,
    pub val_fraction: f64,
    pub split_seed: u64,

    pub seeds: Vec<u64>,
    pub out_dir: Option<PathBuf>,
    pub eval_every: u64,
    pub n_conn_draws: usize,
    /// When false `wall_s` is written as 0 so CSVs compare bitwise.
    pub log_wall_clock: bool,

    pub shapes: ShapeParams,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            method: MethodId::Cavat,
            lambda: 1e-3,
            gamma: 1.0,
            epsilon: 0.5,
            xi: None,
            power_iters: 1,
            m: 10,
            l: 5,
            k: 3,
            adjacency: Adjacency::Four,
            constraint: ConstraintKind::Connectivity,
            seed_policy: SeedPolicy::PerSample,
            reward_baseline: 0.0,
            ema_alpha: 0.99,
            noise_sigma: 0.1,
            hidden: vec![8, 16],
            kernel: 3,
            lr: 1e-5,
            lr_floor: 0.0,
            warmup_steps: 0,
            total_steps: 3000,
            rectified_adam: true,
            labeled_batch: 4,
            unlabeled_batch: 16,
            data: None,
            gen_n: 500,
            gen_height: 32,
            gen_width: 32,
            gen_seed: 0,
            standardize: true,
            labeled_ratio: 0.05,
            val_fraction: 0.2,
            split_seed: 0,
            seeds: vec![0, 1, 2],
            out_dir: None,
            eval_every: 100,
            n_conn_draws: 5,
            log_wall_clock: true,
            shapes: ShapeParams::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml(&text).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical serialization, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        for (name, v) in [("lambda", self.lambda), ("gamma", self.gamma), ("epsilon", self.epsilon)] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        if !(self.lr.is_finite() && self.lr > 0.0) || !(self.lr_floor.is_finite() && self.lr_floor >= 0.0) {
            return bad(format!("bad learning rate {} / floor {}", self.lr, self.lr_floor));
        }
        if self.total_steps == 0 || self.eval_every == 0 {
            return bad("total_steps and eval_every must be positive".into());
        }
        if self.labeled_batch == 0 {
            return bad("labeled_batch must be positive".into());
        }
        if self.seeds.is_empty() {
            return bad("no seeds".into());
        }
        if self.n_conn_draws == 0 {
            return bad("n_conn_draws must be positive".into());
        }
        if let Some(path) = &self.data {
            if !path.is_dir() {
                return bad(format!("dataset directory {} does not exist", path.display()));
            }
        }
        self.arch().validate()?;
        self.adv().validate()?;
        self.weights().validate()?;
        self.connectivity().validate()?;
        MethodSpec {
            id: self.method,
            ema_alpha: self.ema_alpha,
            noise_sigma: self.noise_sigma,
        }
        .validate()?;
        if self.m == 0 {
            return bad("m must be positive".into());
        }
        Ok(())
    }

    pub fn arch(&self) -> ArchConfig {
        ArchConfig {
            hidden: self.hidden.clone(),
            classes: 2,
            kernel: self.kernel,
        }
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda: self.lambda,
            gamma: self.gamma,
        }
    }

    pub fn adv(&self) -> AdvConfig {
        AdvConfig {
            epsilon: self.epsilon,
            xi: self.xi,
            power_iters: self.power_iters,
        }
    }

    pub fn mc(&self) -> MonteCarloConfig {
        MonteCarloConfig {
            samples: self.m,
            reward_baseline: self.reward_baseline,
            seed_policy: self.seed_policy,
        }
    }

    pub fn connectivity(&self) -> ConnectivityConfig {
        ConnectivityConfig {
            seed_window: self.l,
            violation_window: self.k,
            adjacency: self.adjacency,
        }
    }

    pub fn method_spec(&self) -> MethodSpec {
        MethodSpec {
            id: self.method,
            ema_alpha: self.ema_alpha,
            noise_sigma: self.noise_sigma,
        }
    }

    /// Loads or generates the dataset, standardizes it and applies the split.
    pub fn load_dataset(&self) -> Result<Dataset, HarnessError> {
        let mut ds = match &self.data {
            Some(dir) => data::read_dataset(dir)?,
            None => data::gen_shapes(self.gen_n, self.gen_height, self.gen_width, &self.shapes, self.gen_seed)?,
        };
        if ds.classes != 2 {
            return Err(HarnessError::Config(format!("expected a 2-class dataset, got {}", ds.classes)));
        }
        if self.standardize {
            ds = ds.standardized();
        }
        data::split_dataset(&mut ds, self.labeled_ratio, self.val_fraction, self.split_seed)?;
        Ok(ds)
    }
}

/// One CSV row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub step: u64,
    pub method: MethodId,
    pub seed: u64,
    pub lambda: f64,
    pub gamma: f64,
    pub epsilon: f64,
    pub m: usize,
    pub l: usize,
    pub k: usize,
    pub dsc: f64,
    pub hd: f64,
    pub n_conn: f64,
    /// Training loss components averaged over the steps since the last row.
    pub loss_sup: f64,
    pub loss_lds: f64,
    pub loss_cons: f64,
    pub lr: f64,
    pub wall_s: f64,
}

#[derive(Clone, Debug)]
pub struct RunRecord {
    pub config_hash: String,
    pub seed: u64,
    pub rows: Vec<CsvRow>,
    pub final_report: MetricReport,
    pub wall_s: f64,
    pub checkpoint: Option<PathBuf>,
    pub params: NetworkParams,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    fn of(values: &[f64]) -> Self {
        let (mean, std) = mean_std(values);
        MeanStd { mean, std }
    }
}

/// Final validation metrics over seeds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Summary {
    pub method: MethodId,
    pub dsc: MeanStd,
    pub hd: MeanStd,
    pub n_conn: MeanStd,
}

#[derive(Clone, Debug)]
pub struct ExperimentRecord {
    pub config: TrainConfig,
    pub runs: Vec<RunRecord>,
    pub summary: Summary,
}

impl ExperimentRecord {
    pub fn rows(&self) -> impl Iterator<Item = &CsvRow> {
        self.runs.iter().flat_map(|r| &r.rows)
    }

    pub fn csv(&self) -> Result<String, HarnessError> {
        csv_string(self.rows())
    }
}

pub fn csv_string<'a>(rows: impl IntoIterator<Item = &'a CsvRow>) -> Result<String, HarnessError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut any = false;
    for row in rows {
        w.serialize(row)?;
        any = true;
    }
    if !any {
        w.write_record(CSV_HEADER.split(','))?;
    }
    let bytes = w.into_inner().map_err(|e| HarnessError::Config(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn read_csv(path: &Path) -> Result<Vec<CsvRow>, HarnessError> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header.join(",") != CSV_HEADER {
        return Err(HarnessError::Config(format!("{}: unexpected header", path.display())));
    }
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}

fn write_file(path: &Path, contents: &str) -> Result<(), HarnessError> {
    fs::write(path, contents).map_err(io_err(path))
}

/// Predictions on `indices`, scored against the foreground class.
pub fn evaluate(
    net: &NetworkParams,
    ds: &Dataset,
    indices: &[usize],
    adjacency: Adjacency,
    n_conn_draws: usize,
    rng: &RngState,
) -> Result<MetricReport, HarnessError> {
    let mut per_image = Vec::with_capacity(indices.len());
    for (j, &i) in indices.iter().enumerate() {
        let sample = &ds.samples[i];
        let pred = net.predict(&sample.image)?.argmax().binary(1);
        let mut draw_rng = rng.derive(j as u64);
        per_image.push(image_metrics(&pred, &sample.mask.binary(1), adjacency, n_conn_draws, &mut draw_rng)?);
    }
    Ok(MetricReport::aggregate(&per_image))
}

fn draw(pool: &[usize], n: usize, rng: &mut RngState) -> Vec<usize> {
    if pool.is_empty() {
        return Vec::new();
    }
    (0..n).map(|_| pool[rng.below(pool.len())]).collect()
}

#[derive(Serialize)]
struct Diagnostic {
    seed: u64,
    step: u64,
    error: Option<String>,
    loss_sup: f64,
    loss_lds: f64,
    loss_cons: f64,
    loss_total: f64,
    grad_norm: f64,
    tensor_grad_norms: Vec<(String, f64)>,
    tensor_param_norms: Vec<(String, f64)>,
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

impl Diagnostic {
    fn new(seed: u64, step: u64, params: &NetworkParams, out: Option<&StepLoss>, error: Option<String>) -> Self {
        let b = out.map(|o| o.breakdown).unwrap_or(LossBreakdown {
            sup: f64::NAN,
            lds: f64::NAN,
            cons: f64::NAN,
            total: f64::NAN,
        });
        Diagnostic {
            seed,
            step,
            error,
            loss_sup: b.sup,
            loss_lds: b.lds,
            loss_cons: b.cons,
            loss_total: b.total,
            grad_norm: out.map_or(f64::NAN, |o| o.grad.norm()),
            tensor_grad_norms: out
                .map(|o| {
                    params
                        .tensors()
                        .iter()
                        .zip(o.grad.tensors())
                        .map(|(t, g)| (t.name.clone(), l2(g)))
                        .collect()
                })
                .unwrap_or_default(),
            tensor_param_norms: params.tensors().iter().map(|t| (t.name.clone(), l2(&t.data))).collect(),
        }
    }
}

/// Writes the diagnostic and builds the abort error.
fn abort(cfg: &TrainConfig, diag: Diagnostic) -> Result<HarnessError, HarnessError> {
    let text = toml::to_string(&diag).expect("diagnostic serializes");
    let diagnostic = match &cfg.out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
            let path = dir.join(format!("diagnostic_seed{}.toml", diag.seed));
            write_file(&path, &text)?;
            path.display().to_string()
        }
        None => text,
    };
    Ok(HarnessError::NonFinite {
        seed: diag.seed,
        step: diag.step,
        diagnostic,
    })
}

/// Trains one seed on an already split dataset.
pub fn run_seed(cfg: &TrainConfig, ds: &Dataset, seed: u64) -> Result<RunRecord, HarnessError> {
    let split = ds
        .split
        .as_ref()
        .ok_or_else(|| HarnessError::Config("dataset has no split".into()))?;
    let SplitManifest {
        labeled,
        unlabeled,
        validation,
    } = split;
    if labeled.is_empty() || validation.is_empty() {
        return Err(HarnessError::Config("split needs labeled and validation images".into()));
    }
    let started = Instant::now();
    let root = RngState::new(seed);
    let mut student = NetworkParams::init(&cfg.arch(), &mut root.derive(tag::INIT))?;
    let spec = cfg.method_spec();
    let mut teacher = spec.id.uses_teacher().then(|| student.clone());
    let schedule = LrSchedule {
        peak: cfg.lr,
        floor: cfg.lr_floor,
        warmup_steps: cfg.warmup_steps,
        total_steps: cfg.total_steps,
    };
    let adam = AdamConfig {
        rectified: cfg.rectified_adam,
        ..AdamConfig::default()
    };
    let mut opt = OptimizerState::new(&student, adam, schedule);
    let constraint = cfg.constraint.build(&cfg.connectivity())?;
    let ctx = LossContext {
        weights: cfg.weights(),
        constraint: constraint.as_ref(),
        mc: cfg.mc(),
        adv: cfg.adv(),
    };
    let config_hash = cfg.hash();

    let mut rows = Vec::new();
    let mut acc = LossBreakdown::default();
    let mut acc_steps = 0u64;
    let mut last_report = None;
    for step in 1..=cfg.total_steps {
        let step_rng = root.derive(tag::STEP).derive(step);
        let mut batch_rng = step_rng.derive(tag::BATCH);
        let lab = draw(labeled, cfg.labeled_batch, &mut batch_rng);
        let unl = draw(unlabeled, cfg.unlabeled_batch, &mut batch_rng);
        let lab_batch: Vec<(&Image, &DiscreteMask)> =
            lab.iter().map(|&i| (&ds.samples[i].image, &ds.samples[i].mask)).collect();
        let unl_batch: Vec<&Image> = unl.iter().map(|&i| &ds.samples[i].image).collect();

        let result = method_loss(
            &spec,
            &ctx,
            &lab_batch,
            &unl_batch,
            &student,
            teacher.as_ref(),
            &step_rng.derive(tag::LOSS),
        );
        let out = match result {
            Ok(out) if out.breakdown.total.is_finite() && out.grad.is_finite() => out,
            Ok(out) => {
                let diag = Diagnostic::new(seed, step, &student, Some(&out), None);
                return Err(abort(cfg, diag)?);
            }
            Err(LossError::Net(e @ NetError::NumericalFailure { .. })) => {
                let diag = Diagnostic::new(seed, step, &student, None, Some(e.to_string()));
                return Err(abort(cfg, diag)?);
            }
            Err(e) => return Err(e.into()),
        };
        let b = out.breakdown;
        acc.sup += b.sup;
        acc.lds += b.lds;
        acc.cons += b.cons;
        acc_steps += 1;

        let lr = opt.apply(&mut student, &out.grad)?;
        if let Some(t) = teacher.as_mut() {
            ema_update(t, &student, spec.ema_alpha)?;
        }

        if step % cfg.eval_every == 0 || step == cfg.total_steps {
            let eval_rng = root.derive(tag::EVAL).derive(step);
            let report = evaluate(&student, ds, validation, cfg.adjacency, cfg.n_conn_draws, &eval_rng)?;
            let n = acc_steps as f64;
            rows.push(CsvRow {
                step,
                method: spec.id,
                seed,
                lambda: cfg.lambda,
                gamma: cfg.gamma,
                epsilon: cfg.epsilon,
                m: cfg.m,
                l: cfg.l,
                k: cfg.k,
                dsc: report.dsc,
                hd: report.hd,
                n_conn: report.n_conn,
                loss_sup: acc.sup / n,
                loss_lds: acc.lds / n,
                loss_cons: acc.cons / n,
                lr,
                wall_s: if cfg.log_wall_clock {
                    started.elapsed().as_secs_f64()
                } else {
                    0.0
                },
            });
            info!(
                "{} seed {seed} step {step}: dsc {:.4} hd {:.3} n_conn {:.4} sup {:.4}",
                spec.id,
                report.dsc,
                report.hd,
                report.n_conn,
                acc.sup / n
            );
            acc = LossBreakdown::default();
            acc_steps = 0;
            last_report = Some(report);
        }
    }
    let checkpoint = match &cfg.out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
            let path = dir.join(format!("checkpoint_seed{seed}.txt"));
            checkpoint::save(&student, &path)?;
            Some(path)
        }
        None => None,
    };
    Ok(RunRecord {
        config_hash,
        seed,
        rows,
        final_report: last_report.expect("the last step always evaluates"),
        wall_s: started.elapsed().as_secs_f64(),
        checkpoint,
        params: student,
    })
}

pub fn summarize(method: MethodId, runs: &[RunRecord]) -> Summary {
    let pick = |f: fn(&MetricReport) -> f64| -> Vec<f64> { runs.iter().map(|r| f(&r.final_report)).collect() };
    Summary {
        method,
        dsc: MeanStd::of(&pick(|r| r.dsc)),
        hd: MeanStd::of(&pick(|r| r.hd)),
        n_conn: MeanStd::of(&pick(|r| r.n_conn)),
    }
}

fn summary_csv(summary: &Summary, runs: &[RunRecord]) -> String {
    let mut out = String::from("seed,dsc,hd,n_conn\n");
    for r in runs {
        let f = &r.final_report;
        out.push_str(&format!("{},{},{},{}\n", r.seed, f.dsc, f.hd, f.n_conn));
    }
    out.push_str(&format!(
        "mean,{},{},{}\nstd,{},{},{}\n",
        summary.dsc.mean, summary.hd.mean, summary.n_conn.mean, summary.dsc.std, summary.hd.std, summary.n_conn.std
    ));
    out
}

/// Runs every seed of `cfg` on a prepared dataset.
pub fn run_experiment_with_data(cfg: &TrainConfig, ds: &Dataset) -> Result<ExperimentRecord, HarnessError> {
    cfg.validate()?;
    if let Some(dir) = &cfg.out_dir {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        write_file(&dir.join("config.toml"), &cfg.to_toml())?;
    }
    let mut runs = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        runs.push(run_seed(cfg, ds, seed)?);
    }
    let summary = summarize(cfg.method, &runs);
    let record = ExperimentRecord {
        config: cfg.clone(),
        runs,
        summary,
    };
    if let Some(dir) = &cfg.out_dir {
        write_file(&dir.join("metrics.csv"), &record.csv()?)?;
        write_file(&dir.join("summary.csv"), &summary_csv(&record.summary, &record.runs))?;
    }
    Ok(record)
}

pub fn run_experiment(cfg: &TrainConfig) -> Result<ExperimentRecord, HarnessError> {
    cfg.validate()?;
    let ds = cfg.load_dataset()?;
    run_experiment_with_data(cfg, &ds)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepParam {
    Gamma,
    Lambda,
    Epsilon,
    M,
    L,
    K,
}

impl std::str::FromStr for SweepParam {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "gamma" | "γ" => SweepParam::Gamma,
            "lambda" | "λ" => SweepParam::Lambda,
            "epsilon" | "ε" => SweepParam::Epsilon,
            "m" => SweepParam::M,
            "l" => SweepParam::L,
            "k" => SweepParam::K,
            _ => return Err(HarnessError::Config(format!("unknown sweep parameter {s:?}"))),
        })
    }
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::Gamma => "gamma",
            SweepParam::Lambda => "lambda",
            SweepParam::Epsilon => "epsilon",
            SweepParam::M => "m",
            SweepParam::L => "l",
            SweepParam::K => "k",
        }
    }

    pub fn apply(self, cfg: &mut TrainConfig, value: f64) -> Result<(), HarnessError> {
        let count = || {
            if value >= 0.0 && value.fract() == 0.0 {
                Ok(value as usize)
            } else {
                Err(HarnessError::Config(format!("{} needs a non-negative integer, got {value}", self.name())))
            }
        };
        match self {
            SweepParam::Gamma => cfg.gamma = value,
            SweepParam::Lambda => cfg.lambda = value,
            SweepParam::Epsilon => cfg.epsilon = value,
            SweepParam::M => cfg.m = count()?,
            SweepParam::L => cfg.l = count()?,
            SweepParam::K => cfg.k = count()?,
        }
        Ok(())
    }
}

/// Final-metric table of a sweep, one row per value and seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub param: String,
    pub value: f64,
    pub seed: u64,
    pub dsc: f64,
    pub hd: f64,
    pub n_conn: f64,
}

pub struct SweepRecord {
    pub experiments: Vec<ExperimentRecord>,
    pub table: Vec<SweepRow>,
}

/// One experiment per value on a shared dataset and seed list. With an
/// output directory each value gets a `<param>=<value>` subdirectory and the
/// combined table goes to `sweep.csv`.
pub fn sweep_with_data(
    cfg: &TrainConfig,
    param: SweepParam,
    values: &[f64],
    ds: &Dataset,
) -> Result<SweepRecord, HarnessError> {
    if values.is_empty() {
        return Err(HarnessError::Config("sweep needs at least one value".into()));
    }
    let mut experiments = Vec::with_capacity(values.len());
    let mut table = Vec::new();
    for &value in values {
        let mut run_cfg = cfg.clone();
        param.apply(&mut run_cfg, value)?;
        run_cfg.out_dir = cfg.out_dir.as_ref().map(|d| d.join(format!("{}={value}", param.name())));
        let record = run_experiment_with_data(&run_cfg, ds)?;
        for run in &record.runs {
            table.push(SweepRow {
                param: param.name().to_string(),
                value,
                seed: run.seed,
                dsc: run.final_report.dsc,
                hd: run.final_report.hd,
                n_conn: run.final_report.n_conn,
            });
        }
        experiments.push(record);
    }
    if let Some(dir) = &cfg.out_dir {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in &table {
            w.serialize(row)?;
        }
        let bytes = w.into_inner().map_err(|e| HarnessError::Config(e.to_string()))?;
        write_file(&dir.join("sweep.csv"), &String::from_utf8(bytes).expect("utf-8"))?;
    }
    Ok(SweepRecord { experiments, table })
}

pub fn sweep(cfg: &TrainConfig, param: SweepParam, values: &[f64]) -> Result<SweepRecord, HarnessError> {
    cfg.validate()?;
    let ds = cfg.load_dataset()?;
    sweep_with_data(cfg, param, values, &ds)
}

/// Scores a checkpoint on a dataset's validation split, or on every image
/// when the dataset has no split.
pub fn evaluate_checkpoint(
    checkpoint_path: &Path,
    data_dir: &Path,
    adjacency: Adjacency,
    n_conn_draws: usize,
    seed: u64,
) -> Result<MetricReport, HarnessError> {
    let net = checkpoint::load(checkpoint_path)?;
    let ds = data::read_dataset(data_dir)?.standardized();
    let indices: Vec<usize> = match &ds.split {
        Some(s) if !s.validation.is_empty() => s.validation.clone(),
        _ => {
            warn!("no validation split in {}; scoring every image", data_dir.display());
            (0..ds.len()).collect()
        }
    };
    evaluate(&net, &ds, &indices, adjacency, n_conn_draws, &RngState::new(seed).derive(tag::EVAL))
}
