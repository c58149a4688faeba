//! Experiment orchestration: online passes, test evaluation, aggregation and reports.

use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{self, CsvOptions, DataError, Dataset, LabelColumn};
use crate::learner::{build_learner, Algorithm, LearnerConfig, LearnerError};
use crate::model::{predict_label, ModelError, ModelSpec};
use crate::scalar::Real;
use crate::snapshot::{SnapshotError, SnapshotWriter};

pub const SCHEMA_VERSION: u32 = 1;
/// Default number of curve points and snapshots per run.
pub const DEFAULT_POINTS: usize = 200;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error("dataset {path}")]
    Data { path: PathBuf, source: DataError },
    #[error(transparent)]
    DataOp(#[from] DataError),
    #[error(transparent)]
    Learner(#[from] LearnerError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Snapshot(#[from] SnapshotError),
    #[error("{path}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("cannot aggregate reports from different configurations ({0} vs {1})")]
    MixedReports(String, String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdxPart {
    pub images: PathBuf,
    pub labels: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "format", rename_all = "lowercase")]
pub enum DataSource {
    Libsvm {
        path: PathBuf,
        #[serde(default)]
        features: Option<usize>,
    },
    Csv {
        path: PathBuf,
        #[serde(default)]
        label_column: LabelColumn,
        #[serde(default)]
        has_header: bool,
        #[serde(default)]
        min_max: bool,
    },
    /// Consecutive IDX image/label pairs, concatenated in order.
    Idx { parts: Vec<IdxPart> },
}

fn yes() -> bool {
    true
}
fn default_fraction() -> f64 {
    0.8
}
fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub name: String,
    #[serde(flatten)]
    pub source: DataSource,
    #[serde(default = "yes")]
    pub shuffle: bool,
    #[serde(default = "default_fraction")]
    pub train_fraction: f64,
    /// Keep only the first `n` examples (before shuffling).
    #[serde(default)]
    pub max_examples: Option<usize>,
    /// Downsample every class to the size of the smallest.
    #[serde(default)]
    pub balance: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ModelConfig {
    Logistic,
    Mlp { hidden: usize },
}

impl ModelConfig {
    pub fn build(&self, inputs: usize, classes: usize) -> Result<ModelSpec, HarnessError> {
        let outputs = if classes == 2 { 1 } else { classes };
        match *self {
            ModelConfig::Logistic if outputs == 1 => Ok(ModelSpec::Logistic { inputs }),
            ModelConfig::Logistic => Err(HarnessError::Config("logistic model needs a binary dataset".into())),
            ModelConfig::Mlp { hidden } => Ok(ModelSpec::Mlp { inputs, hidden, outputs }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub name: Option<String>,
    pub dataset: DatasetSpec,
    pub model: ModelConfig,
    pub learner: LearnerConfig,
    /// Fraction of training labels to flip.
    #[serde(default)]
    pub noise: f64,
    #[serde(default = "one")]
    pub runs: usize,
    #[serde(default)]
    pub base_seed: u64,
    #[serde(default, skip_serializing)]
    pub output_dir: Option<PathBuf>,
    #[serde(default = "yes")]
    pub snapshots: bool,
    /// Snapshot cadence in rounds; `None` means `⌈N/200⌉`.
    #[serde(default)]
    pub snapshot_every: Option<usize>,
    /// Curve cadence in rounds; `None` means `⌈N/200⌉`.
    #[serde(default)]
    pub curve_every: Option<usize>,
    #[serde(default)]
    pub precision: Precision,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        Self::from_json(&fs::read_to_string(path).map_err(io_err(path))?)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.runs == 0 {
            return Err(HarnessError::Config("runs must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return Err(HarnessError::Config("noise must lie in [0, 1]".into()));
        }
        let f = self.dataset.train_fraction;
        if !(f > 0.0 && f < 1.0) {
            return Err(HarnessError::Config("train_fraction must lie in (0, 1)".into()));
        }
        if matches!(self.snapshot_every, Some(0)) || matches!(self.curve_every, Some(0)) {
            return Err(HarnessError::Config("cadences must be positive".into()));
        }
        self.learner.validate()?;
        Ok(())
    }

    /// Identifier shared by all runs of this configuration.
    pub fn family(&self) -> String {
        format!("{}/{}/noise={}", self.dataset.name, self.learner.label(), self.noise)
    }
}

/// Directory holding relative dataset paths: `$BFLO_DATA_DIR`, else `data`.
pub fn data_dir() -> PathBuf {
    std::env::var_os("BFLO_DATA_DIR").map_or_else(|| PathBuf::from("data"), PathBuf::from)
}

fn resolve(path: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        data_dir().join(path)
    }
}

fn open(path: &Path) -> Result<BufReader<fs::File>, HarnessError> {
    let p = resolve(path);
    Ok(BufReader::new(fs::File::open(&p).map_err(io_err(&p))?))
}

fn tag<T>(path: &Path, r: Result<T, DataError>) -> Result<T, HarnessError> {
    r.map_err(|source| HarnessError::Data {
        path: resolve(path),
        source,
    })
}

/// Loads, truncates and (optionally) balances a dataset.
pub fn load_dataset(spec: &DatasetSpec, seed: u64) -> Result<Dataset<f64>, HarnessError> {
    let mut data = match &spec.source {
        DataSource::Libsvm { path, features } => tag(path, data::parse_libsvm(open(path)?, &spec.name, *features))?,
        DataSource::Csv {
            path,
            label_column,
            has_header,
            min_max,
        } => {
            let opts = CsvOptions {
                label_column: label_column.clone(),
                has_header: *has_header,
                min_max: *min_max,
            };
            tag(path, data::parse_csv(open(path)?, &spec.name, &opts))?
        }
        DataSource::Idx { parts } => {
            let mut acc: Option<Dataset<f64>> = None;
            for part in parts {
                let d = tag(&part.images, data::parse_idx(open(&part.images)?, open(&part.labels)?, &spec.name))?;
                acc = Some(match acc {
                    None => d,
                    Some(a) => a.concat(d)?,
                });
            }
            acc.ok_or_else(|| HarnessError::Config("idx source needs at least one part".into()))?
        }
    };
    if let Some(n) = spec.max_examples {
        data = data.truncate(n);
    }
    if spec.balance {
        data = data::balance_classes(&data, seed);
    }
    if data.is_empty() {
        return Err(HarnessError::DataOp(DataError::Empty));
    }
    Ok(data)
}

/// SplitMix64 finalizer, used to derive independent sub-seeds.
fn mix(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub round: usize,
    pub cum_mistakes: f64,
    pub entropy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub run_index: usize,
    pub seed: u64,
    pub family: String,
    pub rounds: usize,
    pub mistakes: usize,
    /// Percent of online predictions that disagreed with the true label.
    pub online_error: f64,
    /// Percent test error of the frozen model.
    pub final_error: f64,
    pub test_examples: usize,
    pub wall_time_seconds: f64,
    #[serde(skip)]
    pub mistake_stream: Vec<bool>,
    #[serde(skip)]
    pub curve: Vec<CurvePoint>,
    #[serde(skip)]
    pub snapshots: Option<Vec<u8>>,
}

fn cadence(explicit: Option<usize>, n: usize) -> usize {
    explicit.unwrap_or_else(|| n.div_ceil(DEFAULT_POINTS).max(1))
}

/// One predict-then-update pass over the training split followed by frozen evaluation.
pub fn run_online_on<T: Real>(
    data: &Dataset<T>,
    config: &ExperimentConfig,
    run_index: usize,
) -> Result<RunReport, HarnessError> {
    let start = Instant::now();
    let seed = config.base_seed.wrapping_add(run_index as u64);
    let spec = config.model.build(data.features, data.classes)?;
    let (train, test) = data::split_shuffle(data, config.dataset.train_fraction, mix(seed, 1), config.dataset.shuffle)?;
    let train = if config.noise > 0.0 {
        data::flip_labels(&train, config.noise, mix(seed, 2))?
    } else {
        train
    };
    let mut learner = build_learner::<T>(&config.learner, spec, mix(seed, 3))?;
    let n = train.len();
    let curve_every = cadence(config.curve_every, n);
    let snap_every = cadence(config.snapshot_every, n);
    let mut snaps = match (config.snapshots, learner.belief()) {
        (true, Some(b)) => {
            let mut w = SnapshotWriter::new(BufWriter::new(Vec::new()), b.variant(), b.dim())?;
            w.write(0, b)?;
            Some(w)
        }
        _ => None,
    };
    let mut mistakes = 0;
    let mut stream = Vec::with_capacity(n);
    let mut curve = Vec::with_capacity(n / curve_every + 2);
    for (k, ex) in train.examples.iter().enumerate() {
        let out = learner.step(ex)?;
        stream.push(!out.correct);
        mistakes += usize::from(!out.correct);
        let round = k + 1;
        if round % curve_every == 0 || round == n {
            curve.push(CurvePoint {
                round,
                cum_mistakes: mistakes as f64,
                entropy: learner.entropy().map(|e| e.as_f64()),
            });
        }
        if let Some(w) = snaps.as_mut() {
            if round % snap_every == 0 || round == n {
                w.write(round as u64, learner.belief().expect("belief learner"))?;
            }
        }
    }
    let frozen = learner.freeze();
    let mut test_mistakes = 0;
    for ex in &test.examples {
        let z = spec.forward(frozen.as_slice(), &ex.features)?;
        test_mistakes += usize::from(predict_label(&z) != ex.truth());
    }
    let snapshots = match snaps {
        Some(w) => Some(
            w.finish()?
                .into_inner()
                .map_err(|e| HarnessError::Io {
                    path: "snapshots.bin".into(),
                    source: e.into_error(),
                })?,
        ),
        None => None,
    };
    let pct = |a: usize, b: usize| if b == 0 { 0.0 } else { 100.0 * a as f64 / b as f64 };
    Ok(RunReport {
        run_index,
        seed,
        family: config.family(),
        rounds: n,
        mistakes,
        online_error: pct(mistakes, n),
        final_error: pct(test_mistakes, test.len()),
        test_examples: test.len(),
        wall_time_seconds: start.elapsed().as_secs_f64(),
        mistake_stream: stream,
        curve,
        snapshots,
    })
}

/// Loads the configured dataset and performs run `run_index`.
pub fn run_online(config: &ExperimentConfig, run_index: usize) -> Result<RunReport, HarnessError> {
    config.validate()?;
    let data = load_dataset(&config.dataset, config.base_seed)?;
    run_with_precision(&data, config, &[run_index]).map(|mut v| v.remove(0))
}

fn thread_count(jobs: usize) -> usize {
    let cap = std::env::var("BFLO_THREADS")
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(rayon::current_num_threads);
    cap.min(jobs).max(1)
}

fn run_many<T: Real>(data: &Dataset<T>, config: &ExperimentConfig, runs: &[usize]) -> Result<Vec<RunReport>, HarnessError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(thread_count(runs.len()))
        .build()
        .map_err(|e| HarnessError::Config(e.to_string()))?;
    pool.install(|| runs.par_iter().map(|&k| run_online_on(data, config, k)).collect())
}

fn run_with_precision(data: &Dataset<f64>, config: &ExperimentConfig, runs: &[usize]) -> Result<Vec<RunReport>, HarnessError> {
    match config.precision {
        Precision::F64 => run_many(data, config, runs),
        Precision::F32 => run_many(&data.cast::<f32>(), config, runs),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    /// Sample standard deviation over `√runs`; absent for a single run.
    pub std_err: Option<f64>,
}

impl Stat {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std_err = (values.len() >= 2).then(|| {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
            (var / n).sqrt()
        });
        Self { mean, std_err }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub runs: usize,
    pub online_error: Stat,
    pub final_error: Stat,
}

/// Mean and standard error across runs of one configuration.
pub fn aggregate(reports: &[RunReport]) -> Result<Aggregate, HarnessError> {
    let first = reports
        .first()
        .ok_or_else(|| HarnessError::Config("no reports to aggregate".into()))?;
    if let Some(r) = reports.iter().find(|r| r.family != first.family) {
        return Err(HarnessError::MixedReports(first.family.clone(), r.family.clone()));
    }
    // Sorting by run index makes the floating-point sums independent of input order.
    let mut sorted: Vec<&RunReport> = reports.iter().collect();
    sorted.sort_by_key(|r| r.run_index);
    let online: Vec<f64> = sorted.iter().map(|r| r.online_error).collect();
    let fin: Vec<f64> = sorted.iter().map(|r| r.final_error).collect();
    Ok(Aggregate {
        runs: reports.len(),
        online_error: Stat::of(&online),
        final_error: Stat::of(&fin),
    })
}

/// Ranks with 1 for the smallest value; ties share the average rank.
pub fn rank(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub schema_version: u32,
    pub name: String,
    pub dataset: String,
    pub learner: String,
    pub noise: f64,
    pub base_seed: u64,
    pub config: ExperimentConfig,
    pub aggregate: Aggregate,
    pub per_run: Vec<RunReport>,
    pub wall_time_seconds: f64,
}

impl Summary {
    /// JSON with every `wall_time_seconds` field removed.
    pub fn without_wall_time(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("summary serializes");
        strip_wall_time(&mut v);
        v
    }
}

pub fn strip_wall_time(v: &mut serde_json::Value) {
    match v {
        serde_json::Value::Object(m) => {
            m.remove("wall_time_seconds");
            m.values_mut().for_each(strip_wall_time);
        }
        serde_json::Value::Array(a) => a.iter_mut().for_each(strip_wall_time),
        _ => {}
    }
}

/// Runs every configured run (in parallel) on an already loaded dataset.
pub fn run_experiment_on(data: &Dataset<f64>, config: &ExperimentConfig) -> Result<Summary, HarnessError> {
    config.validate()?;
    if config.noise > 0.0 && !data.is_binary() {
        return Err(HarnessError::Config("label noise needs a binary dataset".into()));
    }
    if config.learner.algorithm == Algorithm::Arow && !matches!(config.model, ModelConfig::Logistic) {
        return Err(HarnessError::Config("arow needs the logistic model".into()));
    }
    let start = Instant::now();
    let runs: Vec<usize> = (0..config.runs).collect();
    let reports = run_with_precision(data, config, &runs)?;
    let aggregate = aggregate(&reports)?;
    Ok(Summary {
        schema_version: SCHEMA_VERSION,
        name: config.name.clone().unwrap_or_else(|| config.family()),
        dataset: config.dataset.name.clone(),
        learner: config.learner.label(),
        noise: config.noise,
        base_seed: config.base_seed,
        config: config.clone(),
        aggregate,
        per_run: reports,
        wall_time_seconds: start.elapsed().as_secs_f64(),
    })
}

/// Loads the dataset, runs the experiment and writes its outputs to `out`.
pub fn run_experiment(config: &ExperimentConfig, out: &Path) -> Result<Summary, HarnessError> {
    config.validate()?;
    let data = load_dataset(&config.dataset, config.base_seed)?;
    let summary = run_experiment_on(&data, config)?;
    write_outputs(&summary, out)?;
    Ok(summary)
}

fn write_curve(path: &Path, points: &[CurvePoint]) -> Result<(), HarnessError> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    let csv_err = |e: csv::Error| HarnessError::Io {
        path: path.to_path_buf(),
        source: e.into(),
    };
    w.write_record(["round", "cum_mistakes", "entropy"]).map_err(csv_err)?;
    for p in points {
        let e = p.entropy.map(|e| e.to_string()).unwrap_or_default();
        w.write_record([p.round.to_string(), p.cum_mistakes.to_string(), e])
            .map_err(csv_err)?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

/// Average curve across runs (runs share the same cadence and length).
fn mean_curve(reports: &[RunReport]) -> Vec<CurvePoint> {
    let Some(first) = reports.first() else { return Vec::new() };
    let n = reports.len() as f64;
    (0..first.curve.len())
        .map(|i| {
            let cum = reports.iter().map(|r| r.curve[i].cum_mistakes).sum::<f64>() / n;
            let ent: Option<Vec<f64>> = reports.iter().map(|r| r.curve[i].entropy).collect();
            CurvePoint {
                round: first.curve[i].round,
                cum_mistakes: cum,
                entropy: ent.map(|e| e.iter().sum::<f64>() / n),
            }
        })
        .collect()
}

/// Writes `summary.json`, the mean `curve.csv`, and `run_k/` files.
pub fn write_outputs(summary: &Summary, out: &Path) -> Result<(), HarnessError> {
    fs::create_dir_all(out).map_err(io_err(out))?;
    for r in &summary.per_run {
        let dir = out.join(format!("run_{}", r.run_index));
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        write_curve(&dir.join("curve.csv"), &r.curve)?;
        if let Some(bytes) = &r.snapshots {
            let p = dir.join("snapshots.bin");
            fs::write(&p, bytes).map_err(io_err(&p))?;
        }
    }
    write_curve(&out.join("curve.csv"), &mean_curve(&summary.per_run))?;
    let p = out.join("summary.json");
    let mut f = BufWriter::new(fs::File::create(&p).map_err(io_err(&p))?);
    serde_json::to_writer_pretty(&mut f, summary)?;
    writeln!(f).map_err(io_err(&p))?;
    f.flush().map_err(io_err(&p))?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteDataset {
    pub dataset: DatasetSpec,
    pub model: ModelConfig,
}

fn zero_noise() -> Vec<f64> {
    vec![0.0]
}

/// A grid of datasets × noise levels × learners.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteConfig {
    pub name: String,
    pub datasets: Vec<SuiteDataset>,
    pub learners: Vec<LearnerConfig>,
    #[serde(default = "zero_noise")]
    pub noise_levels: Vec<f64>,
    #[serde(default = "one")]
    pub runs: usize,
    #[serde(default)]
    pub base_seed: u64,
    #[serde(default)]
    pub snapshots: bool,
    #[serde(default)]
    pub precision: Precision,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteRow {
    pub dataset: String,
    pub noise: f64,
    pub learner: String,
    pub online_error: Stat,
    pub final_error: Stat,
    pub online_rank: f64,
    pub final_rank: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanRank {
    pub learner: String,
    pub noise: f64,
    pub online_rank: f64,
    pub final_rank: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteSummary {
    pub schema_version: u32,
    pub name: String,
    pub rows: Vec<SuiteRow>,
    pub mean_ranks: Vec<MeanRank>,
    pub wall_time_seconds: f64,
}

impl SuiteConfig {
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let cfg: Self = serde_json::from_str(&fs::read_to_string(path).map_err(io_err(path))?)?;
        if cfg.datasets.is_empty() || cfg.learners.is_empty() {
            return Err(HarnessError::Config("suite needs datasets and learners".into()));
        }
        Ok(cfg)
    }

    pub fn experiments(&self) -> Vec<ExperimentConfig> {
        let mut out = Vec::new();
        for d in &self.datasets {
            for &noise in &self.noise_levels {
                for l in &self.learners {
                    out.push(ExperimentConfig {
                        name: None,
                        dataset: d.dataset.clone(),
                        model: d.model,
                        learner: l.clone(),
                        noise,
                        runs: self.runs,
                        base_seed: self.base_seed,
                        output_dir: None,
                        snapshots: self.snapshots,
                        snapshot_every: None,
                        curve_every: None,
                        precision: self.precision,
                    });
                }
            }
        }
        out
    }
}

/// Runs a full suite, writing each experiment to `out/<dataset>/noise_<p>/<learner>/`
/// and the ranked table to `out/suite_summary.json` and `out/table.csv`.
pub fn run_suite(suite: &SuiteConfig, out: &Path) -> Result<SuiteSummary, HarnessError> {
    let start = Instant::now();
    let experiments = suite.experiments();
    for e in &experiments {
        e.validate()?;
    }
    let mut loaded = Vec::new();
    for d in &suite.datasets {
        loaded.push((d.dataset.name.clone(), load_dataset(&d.dataset, suite.base_seed)?));
    }
    let mut rows = Vec::new();
    for e in &experiments {
        let data = &loaded.iter().find(|(n, _)| n == &e.dataset.name).expect("loaded").1;
        if e.learner.algorithm == Algorithm::Arow && !matches!(e.model, ModelConfig::Logistic) {
            continue;
        }
        if e.learner.algorithm == Algorithm::Dropout && matches!(e.model, ModelConfig::Logistic) {
            continue;
        }
        if e.noise > 0.0 && !data.is_binary() {
            continue;
        }
        let summary = run_experiment_on(data, e)?;
        let dir = out
            .join(&e.dataset.name)
            .join(format!("noise_{}", e.noise))
            .join(e.learner.label());
        write_outputs(&summary, &dir)?;
        rows.push(SuiteRow {
            dataset: e.dataset.name.clone(),
            noise: e.noise,
            learner: e.learner.label(),
            online_error: summary.aggregate.online_error.clone(),
            final_error: summary.aggregate.final_error.clone(),
            online_rank: 0.0,
            final_rank: 0.0,
        });
    }
    let mut groups: Vec<(String, f64)> = Vec::new();
    for r in &rows {
        if !groups.iter().any(|(d, n)| d == &r.dataset && *n == r.noise) {
            groups.push((r.dataset.clone(), r.noise));
        }
    }
    for (d, n) in &groups {
        let idx: Vec<usize> = (0..rows.len()).filter(|&i| &rows[i].dataset == d && rows[i].noise == *n).collect();
        let on = rank(&idx.iter().map(|&i| rows[i].online_error.mean).collect::<Vec<_>>());
        let fi = rank(&idx.iter().map(|&i| rows[i].final_error.mean).collect::<Vec<_>>());
        for (k, &i) in idx.iter().enumerate() {
            rows[i].online_rank = on[k];
            rows[i].final_rank = fi[k];
        }
    }
    let mut mean_ranks: Vec<MeanRank> = Vec::new();
    for &noise in &suite.noise_levels {
        for l in &suite.learners {
            let label = l.label();
            let mine: Vec<&SuiteRow> = rows.iter().filter(|r| r.learner == label && r.noise == noise).collect();
            if mine.is_empty() || mean_ranks.iter().any(|m| m.learner == label && m.noise == noise) {
                continue;
            }
            let k = mine.len() as f64;
            mean_ranks.push(MeanRank {
                learner: label,
                noise,
                online_rank: mine.iter().map(|r| r.online_rank).sum::<f64>() / k,
                final_rank: mine.iter().map(|r| r.final_rank).sum::<f64>() / k,
            });
        }
    }
    let summary = SuiteSummary {
        schema_version: SCHEMA_VERSION,
        name: suite.name.clone(),
        rows,
        mean_ranks,
        wall_time_seconds: start.elapsed().as_secs_f64(),
    };
    fs::create_dir_all(out).map_err(io_err(out))?;
    let p = out.join("suite_summary.json");
    fs::write(&p, serde_json::to_string_pretty(&summary)? + "\n").map_err(io_err(&p))?;
    let p = out.join("table.csv");
    let mut w = csv::Writer::from_path(&p).map_err(|e| HarnessError::Io {
        path: p.clone(),
        source: e.into(),
    })?;
    let fmt_se = |s: &Stat| s.std_err.map(|v| v.to_string()).unwrap_or_default();
    let csv_err = |e: csv::Error| HarnessError::Config(e.to_string());
    w.write_record([
        "dataset", "noise", "learner", "online_mean", "online_se", "final_mean", "final_se", "online_rank", "final_rank",
    ])
    .map_err(csv_err)?;
    for r in &summary.rows {
        w.write_record([
            r.dataset.clone(),
            r.noise.to_string(),
            r.learner.clone(),
            r.online_error.mean.to_string(),
            fmt_se(&r.online_error),
            r.final_error.mean.to_string(),
            fmt_se(&r.final_error),
            r.online_rank.to_string(),
            r.final_rank.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(io_err(&p))?;
    Ok(summary)
}
