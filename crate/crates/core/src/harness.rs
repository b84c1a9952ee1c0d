//! Experiment configuration, multi-seed and grid execution, reports,
//! checkpoints, the gradient-check suite and plot-data export.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{grad_check, AutodiffError, Tape, Tensor, Var};
use crate::centroids::{batch_centroids, pseudo_labels_argmax, CentroidBank, CentroidError};
use crate::data::{
    corrupt_target_labels, generate_blob_shift_domains, generate_two_moons_domains, make_ssda_split, Affine,
    DataError, SsdaSplit,
};
use crate::losses::{
    fixmatch_consistency, inter_domain_contrastive_loss, instance_contrastive_loss, l1_consistency, l2_consistency,
    supervised_loss, LossError,
};
use crate::model::{BoundModel, Linear, Model, ModelConfig, ModelError};
use crate::trainer::{train, TrainConfig, TrainError, TrainHistory};

pub const ENGINE_VERSION: &str = concat!("clda ", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("run failed: {0}")]
    Run(String),
}

impl HarnessError {
    /// Process exit status for this failure class.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 1,
            HarnessError::Io { .. } | HarnessError::Run(_) => 2,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_file(path: &Path, contents: &str) -> Result<(), HarnessError> {
    fs::write(path, contents).map_err(io_err(path))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    #[default]
    Moons,
    Blobs,
}

/// Generator parameters. `theta` applies to moons; the remaining shape and
/// shift fields apply to blobs. An empty `matrix` means a planar rotation by
/// `rotation_deg`; an empty `translation` means zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    pub n_per_domain: usize,
    pub noise_std: f64,
    pub theta: f64,
    pub num_classes: usize,
    pub dim: usize,
    pub rotation_deg: f64,
    pub translation: Vec<f64>,
    pub matrix: Vec<f64>,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            kind: DatasetKind::Moons,
            n_per_domain: 1000,
            noise_std: 0.1,
            theta: std::f64::consts::FRAC_PI_4,
            num_classes: 4,
            dim: 2,
            rotation_deg: 30.0,
            translation: Vec::new(),
            matrix: Vec::new(),
        }
    }
}

/// Labeled-target corruption: an absolute count, or a percentage of the
/// labeled pool written as `"12%"`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Corruption {
    Count(usize),
    Percent(String),
}

impl Default for Corruption {
    fn default() -> Self {
        Corruption::Count(0)
    }
}

impl Corruption {
    pub fn resolve(&self, labeled: usize) -> Result<usize, String> {
        match self {
            Corruption::Count(n) => Ok(*n),
            Corruption::Percent(s) => {
                let pct: f64 = s
                    .trim()
                    .strip_suffix('%')
                    .and_then(|p| p.trim().parse().ok())
                    .filter(|p: &f64| (0.0..=100.0).contains(p))
                    .ok_or_else(|| format!("corruption {s:?} is neither a count nor a percentage like \"25%\""))?;
                Ok((pct / 100.0 * labeled as f64).round() as usize)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSpec {
    pub shots: usize,
    pub val_fraction: f64,
    pub test_fraction: f64,
    pub corruption: Corruption,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            shots: 3,
            val_fraction: 0.1,
            test_fraction: 0.2,
            corruption: Corruption::default(),
        }
    }
}

/// One experiment: the dataset, split and training run are all seeded from
/// each entry of `seeds`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    pub out_dir: String,
    pub workers: usize,
    pub dataset: DatasetSpec,
    pub split: SplitSpec,
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0],
            out_dir: "runs".into(),
            workers: 1,
            dataset: DatasetSpec::default(),
            split: SplitSpec::default(),
            train: TrainConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Parses a TOML config (dotted keys such as `train.alpha = 4` are
    /// accepted), then resolves and validates it.
    pub fn from_toml_str(text: &str) -> Result<Self, HarnessError> {
        let raw: ExperimentConfig = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        let cfg = raw.resolve();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            HarnessError::Config(m) => HarnessError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Materializes derived defaults so the echo is complete.
    pub fn resolve(mut self) -> Self {
        let d = &mut self.dataset;
        match d.kind {
            DatasetKind::Moons => {
                d.num_classes = 2;
                d.dim = 2;
            }
            DatasetKind::Blobs => {
                if d.translation.is_empty() {
                    d.translation = vec![0.0; d.dim];
                }
                if d.matrix.is_empty() {
                    d.matrix = Affine::planar_rotation(d.dim, d.rotation_deg, vec![0.0; d.dim]).matrix;
                }
            }
        }
        self
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let cfg_err = |m: String| HarnessError::Config(m);
        if self.seeds.is_empty() {
            return Err(cfg_err("seeds must be non-empty".into()));
        }
        if self.seeds.iter().collect::<HashSet<_>>().len() != self.seeds.len() {
            return Err(cfg_err("seeds must be distinct".into()));
        }
        if self.workers == 0 {
            return Err(cfg_err("workers must be at least 1".into()));
        }
        self.train.validate().map_err(|e| cfg_err(e.to_string()))?;
        for &seed in &self.seeds {
            self.build_split(seed)
                .map_err(|e| cfg_err(format!("seed {seed}: {e}")))?;
        }
        Ok(())
    }

    /// Dataset, split and label corruption for one seed, plus the number of
    /// corrupted labels.
    pub fn build_split(&self, seed: u64) -> Result<(SsdaSplit, usize), DataError> {
        let d = &self.dataset;
        let pair = match d.kind {
            DatasetKind::Moons => generate_two_moons_domains(d.n_per_domain, d.theta, d.noise_std, seed)?,
            DatasetKind::Blobs => {
                let affine = Affine {
                    matrix: d.matrix.clone(),
                    translation: d.translation.clone(),
                };
                generate_blob_shift_domains(d.num_classes, d.n_per_domain, d.dim, &affine, d.noise_std, seed)?
            }
        };
        let s = &self.split;
        let split = make_ssda_split(&pair, s.shots, s.val_fraction, s.test_fraction, seed)?;
        let count = s
            .corruption
            .resolve(split.target_labeled.len())
            .map_err(DataError::InvalidParameter)?;
        Ok((corrupt_target_labels(&split, count, seed)?, count))
    }

    fn for_seed(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            ..self.train.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeedStatus {
    Ok,
    Diverged,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub status: SeedStatus,
    pub error: Option<String>,
    pub mislabeled: usize,
    pub best_step: Option<usize>,
    pub best_val_accuracy: Option<f64>,
    /// Test accuracy of the best-validation checkpoint (the reported number).
    pub best_test_accuracy: Option<f64>,
    pub final_test_accuracy: Option<f64>,
    pub trace_file: Option<String>,
    pub checkpoint_file: Option<String>,
}

/// Mean and sample standard deviation over successful seeds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub n: usize,
    pub mean: Option<f64>,
    pub std: Option<f64>,
}

impl Stat {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self {
                n,
                mean: None,
                std: None,
            };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Self {
            n,
            mean: Some(mean),
            std: Some(std),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub best_val: Stat,
    pub best_test: Stat,
    pub final_test: Stat,
}

impl Summary {
    pub fn of(seeds: &[SeedResult]) -> Self {
        let pick = |f: fn(&SeedResult) -> Option<f64>| -> Stat {
            Stat::of(
                &seeds
                    .iter()
                    .filter(|s| s.status == SeedStatus::Ok)
                    .filter_map(f)
                    .collect::<Vec<_>>(),
            )
        };
        Self {
            best_val: pick(|s| s.best_val_accuracy),
            best_test: pick(|s| s.best_test_accuracy),
            final_test: pick(|s| s.final_test_accuracy),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AxisValue {
    pub axis: String,
    pub value: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub engine_version: String,
    pub config: ExperimentConfig,
    /// Grid coordinates of this run; empty outside `ablate`.
    pub axes: Vec<AxisValue>,
    pub seeds: Vec<SeedResult>,
    pub summary: Summary,
    pub wall_clock_seconds: f64,
}

impl RunReport {
    pub fn all_ok(&self) -> bool {
        self.seeds.iter().all(|s| s.status == SeedStatus::Ok)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))
    }
}

pub const REPORT_FILE: &str = "report.json";

fn run_seed(config: &ExperimentConfig, seed: u64, out: &Path) -> Result<SeedResult, HarnessError> {
    let (split, mislabeled) = config
        .build_split(seed)
        .map_err(|e| HarnessError::Config(format!("seed {seed}: {e}")))?;
    let trace_name = format!("trace_seed{seed}.csv");
    let checkpoint_name = format!("checkpoint_seed{seed}.txt");
    let mut result = SeedResult {
        seed,
        status: SeedStatus::Ok,
        error: None,
        mislabeled,
        best_step: None,
        best_val_accuracy: None,
        best_test_accuracy: None,
        final_test_accuracy: None,
        trace_file: None,
        checkpoint_file: None,
    };
    let write_trace = |h: &TrainHistory| write_file(&out.join(&trace_name), &h.loss_trace_csv());
    match train(&config.for_seed(seed), &split) {
        Ok(outcome) => {
            write_trace(&outcome.history)?;
            write_file(&out.join(&checkpoint_name), &checkpoint_to_string(&outcome.model, &outcome.bank))?;
            let best = outcome.history.best.expect("at least one evaluation");
            result.best_step = Some(best.step);
            result.best_val_accuracy = Some(best.val_accuracy);
            result.best_test_accuracy = Some(best.test_accuracy);
            result.final_test_accuracy = outcome.history.final_eval().map(|e| e.test_accuracy);
            result.trace_file = Some(trace_name);
            result.checkpoint_file = Some(checkpoint_name);
        }
        Err(TrainError::Diverged { step, reason, history }) => {
            write_trace(&history)?;
            result.status = SeedStatus::Diverged;
            result.error = Some(format!("diverged at step {step}: {reason}"));
            result.trace_file = Some(trace_name);
        }
        Err(e) => {
            result.status = SeedStatus::Failed;
            result.error = Some(e.to_string());
        }
    }
    Ok(result)
}

/// Seeds run in parallel on the current rayon pool.
fn run_experiment_inner(config: &ExperimentConfig, axes: Vec<AxisValue>) -> Result<RunReport, HarnessError> {
    let start = Instant::now();
    let out = PathBuf::from(&config.out_dir);
    fs::create_dir_all(&out).map_err(io_err(&out))?;
    let seeds: Vec<SeedResult> = config
        .seeds
        .par_iter()
        .map(|&seed| run_seed(config, seed, &out))
        .collect::<Result<_, _>>()?;
    let report = RunReport {
        engine_version: ENGINE_VERSION.into(),
        config: config.clone(),
        axes,
        summary: Summary::of(&seeds),
        seeds,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
    };
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    write_file(&out.join(REPORT_FILE), &(json + "\n"))?;
    Ok(report)
}

fn pool(workers: usize) -> Result<rayon::ThreadPool, HarnessError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| HarnessError::Run(format!("thread pool: {e}")))
}

/// Trains every seed, writes `report.json`, loss traces and checkpoints into
/// `config.out_dir`. A failing seed is recorded without stopping the others.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunReport, HarnessError> {
    config.validate()?;
    pool(config.workers)?.install(|| run_experiment_inner(config, Vec::new()))
}

/// Short axis names accepted by [`run_ablation_grid`], with their config paths.
pub const AXIS_ALIASES: [(&str, &str); 9] = [
    ("variant", "train.variant"),
    ("alpha", "train.alpha"),
    ("beta", "train.beta"),
    ("mu", "train.mu"),
    ("rho", "train.rho"),
    ("tau", "train.tau"),
    ("aug_level", "train.aug_level"),
    ("shots", "split.shots"),
    ("corruption", "split.corruption"),
];

fn axis_path(name: &str) -> Result<&str, HarnessError> {
    if let Some((_, path)) = AXIS_ALIASES.iter().find(|(a, _)| *a == name) {
        return Ok(path);
    }
    if name.contains('.') {
        return Ok(name);
    }
    let names: Vec<&str> = AXIS_ALIASES.iter().map(|(a, _)| *a).collect();
    Err(HarnessError::Config(format!(
        "unknown axis {name:?} (expected one of {} or a dotted config key)",
        names.join(", ")
    )))
}

/// Parses a raw axis value as a TOML value, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Returns a copy of `config` with the field at `key` replaced by `raw`.
pub fn apply_override(config: &ExperimentConfig, key: &str, raw: &str) -> Result<ExperimentConfig, HarnessError> {
    let path = axis_path(key)?;
    let mut root = toml::Value::try_from(config).map_err(|e| HarnessError::Config(e.to_string()))?;
    let mut node = &mut root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let table = node
            .as_table_mut()
            .ok_or_else(|| HarnessError::Config(format!("{path}: {} is not a section", parts[..i].join("."))))?;
        if !table.contains_key(*part) {
            return Err(HarnessError::Config(format!("unknown axis {key:?}: no config key {path}")));
        }
        node = table.get_mut(*part).expect("checked");
    }
    *node = parse_value(raw);
    let cfg: ExperimentConfig = root
        .try_into()
        .map_err(|e| HarnessError::Config(format!("{key}={raw}: {e}")))?;
    Ok(cfg.resolve())
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridAxis {
    pub name: String,
    pub values: Vec<String>,
}

impl GridAxis {
    /// Parses `name=v1,v2,...`.
    pub fn parse(spec: &str) -> Result<Self, HarnessError> {
        let (name, values) = spec
            .split_once('=')
            .ok_or_else(|| HarnessError::Config(format!("axis {spec:?} should look like name=v1,v2")))?;
        let values: Vec<String> = values.split(',').map(|v| v.trim().to_string()).collect();
        if name.trim().is_empty() || values.iter().any(|v| v.is_empty()) {
            return Err(HarnessError::Config(format!("axis {spec:?} has an empty name or value")));
        }
        axis_path(name.trim())?;
        Ok(Self {
            name: name.trim().to_string(),
            values,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridCell {
    pub axes: Vec<AxisValue>,
    pub report_path: PathBuf,
    pub report: RunReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridResult {
    pub axis_names: Vec<String>,
    pub cells: Vec<GridCell>,
    pub csv_path: PathBuf,
}

pub const GRID_FILE: &str = "grid.csv";

/// Runs the Cartesian product of `axes` over `base`, each cell a full
/// experiment in `out_dir/cell_NNN`, and writes `out_dir/grid.csv`.
pub fn run_ablation_grid(base: &ExperimentConfig, axes: &[GridAxis]) -> Result<GridResult, HarnessError> {
    if axes.is_empty() {
        return Err(HarnessError::Config("ablate needs at least one --axis".into()));
    }
    let mut combos: Vec<Vec<AxisValue>> = vec![Vec::new()];
    for axis in axes {
        combos = combos
            .into_iter()
            .flat_map(|prefix| {
                axis.values.iter().map(move |v| {
                    let mut c = prefix.clone();
                    c.push(AxisValue {
                        axis: axis.name.clone(),
                        value: v.clone(),
                    });
                    c
                })
            })
            .collect();
    }
    let root = PathBuf::from(&base.out_dir);
    // Resolve and validate every cell before running any of them.
    let mut configs = Vec::with_capacity(combos.len());
    for (i, combo) in combos.iter().enumerate() {
        let mut cfg = base.clone();
        for av in combo {
            cfg = apply_override(&cfg, &av.axis, &av.value)?;
        }
        cfg.out_dir = root.join(format!("cell_{i:03}")).to_string_lossy().into_owned();
        cfg.validate()
            .map_err(|e| HarnessError::Config(format!("cell {}: {e}", describe(combo))))?;
        configs.push(cfg);
    }

    let reports: Vec<RunReport> = pool(base.workers)?.install(|| {
        configs
            .par_iter()
            .zip(combos.par_iter())
            .map(|(cfg, combo)| run_experiment_inner(cfg, combo.clone()))
            .collect::<Result<_, _>>()
    })?;

    let axis_names: Vec<String> = axes.iter().map(|a| a.name.clone()).collect();
    let cells: Vec<GridCell> = reports
        .into_iter()
        .zip(configs)
        .zip(combos)
        .map(|((report, cfg), axes)| GridCell {
            axes,
            report_path: Path::new(&cfg.out_dir).join(REPORT_FILE),
            report,
        })
        .collect();
    let csv_path = root.join(GRID_FILE);
    fs::create_dir_all(&root).map_err(io_err(&root))?;
    write_file(&csv_path, &grid_csv(&axis_names, &cells))?;
    Ok(GridResult {
        axis_names,
        cells,
        csv_path,
    })
}

fn describe(combo: &[AxisValue]) -> String {
    combo
        .iter()
        .map(|a| format!("{}={}", a.axis, a.value))
        .collect::<Vec<_>>()
        .join(" ")
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Axis values, then seed counts and mean/std of validation and test accuracy.
pub fn grid_csv(axis_names: &[String], cells: &[GridCell]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = axis_names.to_vec();
    header.extend(
        ["seeds", "seeds_ok", "val_mean", "val_std", "test_mean", "test_std", "report"].map(String::from),
    );
    w.write_record(&header).expect("in-memory write");
    for cell in cells {
        let s = &cell.report.summary;
        let mut rec: Vec<String> = cell.axes.iter().map(|a| a.value.clone()).collect();
        rec.push(cell.report.seeds.len().to_string());
        rec.push(s.best_test.n.to_string());
        rec.push(opt(s.best_val.mean));
        rec.push(opt(s.best_val.std));
        rec.push(opt(s.best_test.mean));
        rec.push(opt(s.best_test.std));
        rec.push(cell.report_path.to_string_lossy().into_owned());
        w.write_record(&rec).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
}

/// Long-format rows `axis,value,seed,metric,score`, one per (axis, seed,
/// metric). Reports without grid axes use axis `none`.
pub fn emit_plot_data(reports: &[RunReport]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["axis", "value", "seed", "metric", "score"]).expect("in-memory write");
    let none = [AxisValue {
        axis: "none".into(),
        value: String::new(),
    }];
    for report in reports {
        let axes: &[AxisValue] = if report.axes.is_empty() { &none } else { &report.axes };
        for axis in axes {
            for s in &report.seeds {
                let metrics = [
                    ("best_val_accuracy", s.best_val_accuracy),
                    ("best_test_accuracy", s.best_test_accuracy),
                    ("final_test_accuracy", s.final_test_accuracy),
                ];
                for (metric, score) in metrics {
                    if let Some(score) = score.filter(|_| s.status == SeedStatus::Ok) {
                        w.write_record([
                            axis.axis.clone(),
                            axis.value.clone(),
                            s.seed.to_string(),
                            metric.to_string(),
                            score.to_string(),
                        ])
                        .expect("in-memory write");
                    }
                }
            }
        }
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
}

/// Text checkpoint: a header line, then per tensor a line
/// `tensor <name> <dims...>` followed by its values on one line, then the
/// bank's `rho` and `initialized` flags.
pub fn checkpoint_to_string(model: &Model, bank: &CentroidBank) -> String {
    let mut out = String::from("clda-checkpoint 1\n");
    let mut tensor = |name: &str, t: &Tensor| {
        let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
        let vals: Vec<String> = t.data().iter().map(|v| format!("{v:e}")).collect();
        writeln!(out, "tensor {name} {}", dims.join(" ")).unwrap();
        writeln!(out, "{}", vals.join(" ")).unwrap();
    };
    for (name, p) in model.parameter_names().iter().zip(model.parameters()) {
        tensor(name, p);
    }
    tensor("bank.centroids", bank.centroids());
    let flags: Vec<&str> = bank.initialized().iter().map(|&b| if b { "1" } else { "0" }).collect();
    writeln!(out, "bank.rho {:e}", bank.rho()).unwrap();
    writeln!(out, "bank.initialized {}", flags.join(" ")).unwrap();
    out
}

pub fn checkpoint_from_str(text: &str) -> Result<(Model, CentroidBank), HarnessError> {
    let bad = |m: String| HarnessError::Config(format!("checkpoint: {m}"));
    let mut lines = text.lines();
    if lines.next() != Some("clda-checkpoint 1") {
        return Err(bad("missing header".into()));
    }
    let mut tensors: Vec<(String, Tensor)> = Vec::new();
    let mut rho = None;
    let mut initialized = None;
    while let Some(line) = lines.next() {
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("tensor") => {
                let name = parts.next().ok_or_else(|| bad("tensor without a name".into()))?.to_string();
                let shape: Vec<usize> = parts
                    .map(|p| p.parse().map_err(|_| bad(format!("bad dim in {name}"))))
                    .collect::<Result<_, _>>()?;
                let data: Vec<f64> = lines
                    .next()
                    .ok_or_else(|| bad(format!("{name} has no values")))?
                    .split_whitespace()
                    .map(|v| v.parse().map_err(|_| bad(format!("bad value in {name}"))))
                    .collect::<Result<_, _>>()?;
                let t = Tensor::from_vec(shape, data).map_err(|e| bad(format!("{name}: {e}")))?;
                tensors.push((name, t));
            }
            Some("bank.rho") => {
                rho = parts.next().and_then(|v| v.parse::<f64>().ok());
            }
            Some("bank.initialized") => {
                initialized = Some(parts.map(|v| v == "1").collect::<Vec<bool>>());
            }
            Some(other) => return Err(bad(format!("unexpected line starting {other:?}"))),
            None => {}
        }
    }
    let centroids = match tensors.pop() {
        Some((name, t)) if name == "bank.centroids" => t,
        _ => return Err(bad("bank.centroids must be the last tensor".into())),
    };
    if tensors.len() < 4 || tensors.len() % 2 != 0 {
        return Err(bad(format!("expected weight/bias pairs, found {} tensors", tensors.len())));
    }
    let mut layers: Vec<Linear> = tensors
        .chunks(2)
        .map(|c| Linear {
            weight: c[0].1.clone(),
            bias: c[1].1.clone(),
        })
        .collect();
    let classifier = layers.pop().expect("non-empty");
    let model = Model {
        extractor: layers,
        classifier,
    };
    let names: Vec<&String> = tensors.iter().map(|(n, _)| n).collect();
    if model.parameter_names().iter().collect::<Vec<_>>() != names {
        return Err(bad("parameter names out of order".into()));
    }
    let bank = CentroidBank::from_parts(
        centroids,
        initialized.ok_or_else(|| bad("missing bank.initialized".into()))?,
        rho.ok_or_else(|| bad("missing bank.rho".into()))?,
    )
    .map_err(|e| bad(e.to_string()))?;
    Ok((model, bank))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckedLoss {
    Supervised,
    InterDomain,
    Instance,
    L1,
    L2,
    FixMatch,
}

impl CheckedLoss {
    pub const ALL: [CheckedLoss; 6] = [
        CheckedLoss::Supervised,
        CheckedLoss::InterDomain,
        CheckedLoss::Instance,
        CheckedLoss::L1,
        CheckedLoss::L2,
        CheckedLoss::FixMatch,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CheckedLoss::Supervised => "L_sup",
            CheckedLoss::InterDomain => "L_clu",
            CheckedLoss::Instance => "L_ins",
            CheckedLoss::L1 => "L1",
            CheckedLoss::L2 => "L2",
            CheckedLoss::FixMatch => "FixMatch",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckEntry {
    pub loss: String,
    pub worst_rel_error: f64,
    pub configs: usize,
    pub checked: usize,
    pub excluded: usize,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckSummary {
    pub tolerance: f64,
    pub eps: f64,
    pub entries: Vec<GradcheckEntry>,
}

impl GradcheckSummary {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed)
    }
}

pub const GRADCHECK_CLASSES: [usize; 3] = [2, 3, 5];
pub const GRADCHECK_UNLABELED: [usize; 3] = [2, 4, 8];

/// Inputs for one randomized gradient-check configuration.
struct Fixture {
    params: Vec<Tensor>,
    labeled: Tensor,
    labels: Vec<usize>,
    orig: Tensor,
    /// Original-branch logits at the unperturbed parameters. The detached
    /// branch is a constant, so finite differences must hold it fixed too.
    orig_logits: Tensor,
    strong: Tensor,
    pseudo: Vec<usize>,
    bank: CentroidBank,
    threshold: f64,
    tau: f64,
}

fn normal_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::matrix(rows, cols, data).expect("positive dims")
}

/// Threshold placed in the widest interior gap between sorted confidences,
/// so a finite-difference step cannot flip the mask. Falls back to passing
/// every row when no gap is wider than 1e-3.
fn threshold_between(confidences: &[f64]) -> f64 {
    let mut c = confidences.to_vec();
    c.sort_by(f64::total_cmp);
    let mut best = (c[0] / 2.0, 1e-3);
    for w in c.windows(2) {
        if w[1] - w[0] > best.1 {
            best = ((w[0] + w[1]) / 2.0, w[1] - w[0]);
        }
    }
    best.0.clamp(1e-6, 1.0 - 1e-6)
}

fn fixture(k: usize, b_u: usize, seed: u64) -> Fixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let input = 3;
    let model = Model::init(&ModelConfig {
        input_dim: input,
        hidden_dims: vec![6],
        num_classes: k,
        init_scale: 1.0,
        seed: rng.random(),
    })
    .expect("valid config");
    let mut params: Vec<Tensor> = model.parameters().into_iter().cloned().collect();
    // Non-zero biases keep relu inputs away from exact ties.
    for p in params.iter_mut().skip(1).step_by(2) {
        p.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
    }
    let orig = normal_matrix(b_u, input, &mut rng);
    let noise = normal_matrix(b_u, input, &mut rng);
    let strong = Tensor::matrix(
        b_u,
        input,
        orig.data().iter().zip(noise.data()).map(|(o, n)| o + 0.3 * n).collect(),
    )
    .expect("same shape");
    let mut bank = CentroidBank::new(k, k, 0.5);
    bank.ema_update(&normal_matrix(k, k, &mut rng), &vec![true; k])
        .expect("matching shape");
    let probe = Model {
        extractor: vec![Linear {
            weight: params[0].clone(),
            bias: params[1].clone(),
        }],
        classifier: Linear {
            weight: params[2].clone(),
            bias: params[3].clone(),
        },
    };
    let orig_logits = probe.logits(&orig).expect("valid input");
    let confidences = pseudo_labels_argmax(&orig_logits).confidence;
    Fixture {
        params,
        labeled: normal_matrix(2 * k, input, &mut rng),
        labels: (0..2 * k).map(|i| i % k).collect(),
        pseudo: (0..b_u).map(|i| i % k).collect(),
        orig,
        orig_logits,
        strong,
        bank,
        threshold: threshold_between(&confidences),
        tau: [0.5, 1.0, 5.0][rng.random_range(0..3)],
    }
}

fn lift_model(e: ModelError) -> AutodiffError {
    match e {
        ModelError::Autodiff(a) => a,
        other => unreachable!("fixture model is valid: {other}"),
    }
}

fn lift_loss(e: LossError) -> AutodiffError {
    match e {
        LossError::Autodiff(a) => a,
        other => unreachable!("fixture inputs are valid: {other}"),
    }
}

fn lift_centroid(e: CentroidError) -> AutodiffError {
    match e {
        CentroidError::Autodiff(a) => a,
        other => unreachable!("fixture labels are valid: {other}"),
    }
}

fn fixture_loss<'t>(
    which: CheckedLoss,
    fx: &Fixture,
    tape: &'t Tape,
    vars: &[Var<'t>],
) -> Result<Var<'t>, AutodiffError> {
    let net = BoundModel::from_params(vars).map_err(lift_model)?;
    let fwd = |x: &Tensor| net.forward(&tape.constant(x.clone())).map_err(lift_model);
    let detached = tape.constant(fx.orig_logits.clone());
    match which {
        CheckedLoss::Supervised => supervised_loss(&fwd(&fx.labeled)?, &fx.labels).map_err(lift_loss),
        CheckedLoss::InterDomain => {
            let k = fx.bank.num_classes();
            let target = batch_centroids(&fwd(&fx.orig)?, &fx.pseudo, k).map_err(lift_centroid)?;
            Ok(inter_domain_contrastive_loss(&target, &fx.bank, fx.tau).map_err(lift_loss)?.loss)
        }
        CheckedLoss::Instance => instance_contrastive_loss(&fwd(&fx.strong)?, &detached, fx.tau).map_err(lift_loss),
        CheckedLoss::L1 => l1_consistency(&fwd(&fx.strong)?, &detached).map_err(lift_loss),
        CheckedLoss::L2 => l2_consistency(&fwd(&fx.strong)?, &detached).map_err(lift_loss),
        CheckedLoss::FixMatch => fixmatch_consistency(&fwd(&fx.strong)?, &detached, fx.threshold).map_err(lift_loss),
    }
}

/// Finite-difference check of every loss through a small relu network over
/// `K ∈ {2,3,5}` × `B_u ∈ {2,4,8}`. With `broken` set, each loss gains a
/// detached term whose gradient is deliberately missing.
pub fn gradcheck_suite(seed: u64, broken: bool) -> Result<GradcheckSummary, AutodiffError> {
    const EPS: f64 = 1e-5;
    const TOL: f64 = 1e-4;
    let mut entries = Vec::new();
    for (li, which) in CheckedLoss::ALL.into_iter().enumerate() {
        let mut entry = GradcheckEntry {
            loss: which.name().to_string(),
            worst_rel_error: 0.0,
            configs: 0,
            checked: 0,
            excluded: 0,
            passed: true,
        };
        for (ki, &k) in GRADCHECK_CLASSES.iter().enumerate() {
            for (bi, &b_u) in GRADCHECK_UNLABELED.iter().enumerate() {
                let fx = fixture(k, b_u, seed ^ ((li * 100 + ki * 10 + bi) as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
                let report = grad_check(
                    |tape, vars| {
                        let loss = fixture_loss(which, &fx, tape, vars)?;
                        if broken {
                            let hidden = vars[0].square().sum().scale(0.5).stop_gradient();
                            return loss.add(&hidden);
                        }
                        Ok(loss)
                    },
                    &fx.params,
                    EPS,
                )?;
                entry.configs += 1;
                entry.checked += report.checked;
                entry.excluded += report.excluded;
                entry.worst_rel_error = entry.worst_rel_error.max(report.max_rel_error);
            }
        }
        entry.passed = entry.worst_rel_error < TOL;
        entries.push(entry);
    }
    Ok(GradcheckSummary {
        tolerance: TOL,
        eps: EPS,
        entries,
    })
}
