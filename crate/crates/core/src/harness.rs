//! Experiment orchestration: train either learner on a generated dataset,
//! evaluate the learned parameters on the held-out test split, and write
//! report rows and training traces as CSV.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datagen::{load_split, AccessLog, Manifest, Split, Trajectory};
use crate::error::{Error, Result};
use crate::graph::NoiseParams;
use crate::learner::{csv_error, train, Aborted, TrainConfig, TrainTrace, TrajectoryExample};
use crate::leo::{train_leo, LeoConfig};
use crate::metrics::mean_rmse;
use crate::smoother::{InitPolicy, Smoother, SmootherConfig};

pub use crate::metrics::rmse;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Ours,
    Leo,
    Both,
}

impl Method {
    pub fn expand(self) -> Vec<Method> {
        match self {
            Method::Both => vec![Method::Ours, Method::Leo],
            m => vec![m],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::Ours => "ours",
            Method::Leo => "leo",
            Method::Both => "both",
        }
    }

    fn train_split(self) -> Split {
        match self {
            Method::Leo => Split::TrainLeo,
            _ => Split::Train,
        }
    }
}

/// Algorithm settings, read from a TOML file. Every section is optional.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Settings {
    pub method: Method,
    /// Training trajectories per method; all of the split when absent.
    pub n_train: Option<usize>,
    /// Starting parameters. When absent, the dataset's generating
    /// parameters multiplied by `initial_scale`.
    pub initial_theta: Option<NoiseParams>,
    pub initial_scale: f64,
    pub smoother: SmootherConfig,
    pub train: TrainConfig,
    pub leo: LeoConfig,
    /// In sweeps, take LEO's worker and sample counts from
    /// [`LEO_SWEEP_SCHEDULE`] instead of the `leo` table.
    pub leo_sweep_schedule: bool,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            method: Method::Both,
            n_train: None,
            initial_theta: None,
            initial_scale: 10.0,
            smoother: SmootherConfig::default(),
            train: TrainConfig::default(),
            leo: LeoConfig::default(),
            leo_sweep_schedule: true,
        }
    }
}

impl Settings {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn parse(text: &str) -> Result<Self> {
        let settings: Settings = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        settings.validate()?;
        Ok(settings)
    }

    pub fn validate(&self) -> Result<()> {
        self.smoother.validate()?;
        self.train.validate()?;
        self.leo.validate()?;
        if let Some(theta) = &self.initial_theta {
            theta.validate()?;
        }
        if !(self.initial_scale > 0.0 && self.initial_scale.is_finite()) {
            return Err(Error::Config("initial_scale must be positive".into()));
        }
        if self.n_train == Some(0) {
            return Err(Error::Config("n_train must be at least 1".into()));
        }
        Ok(())
    }

    pub fn initial(&self, manifest: &Manifest) -> NoiseParams {
        self.initial_theta
            .unwrap_or_else(|| manifest.theta_star.scaled(self.initial_scale))
    }
}

#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    pub data_dir: PathBuf,
    pub out_dir: Option<PathBuf>,
    pub settings: Settings,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub n_train: usize,
    pub len_train: usize,
    pub time_per_iter_s: f64,
    pub train_rmse_trans_m: f64,
    pub train_rmse_rot_rad: f64,
    pub test_rmse_trans_m: f64,
    pub test_rmse_rot_rad: f64,
}

#[derive(Clone, Debug)]
pub struct MethodResult {
    pub method: Method,
    pub theta: NoiseParams,
    pub trace: TrainTrace,
    pub row: ReportRow,
}

#[derive(Debug, Default)]
pub struct Report {
    pub results: Vec<MethodResult>,
    /// Files read while training, in order.
    pub training_reads: Vec<PathBuf>,
    /// Files read while evaluating.
    pub evaluation_reads: Vec<PathBuf>,
}

impl Report {
    pub fn rows(&self) -> Vec<ReportRow> {
        self.results.iter().map(|r| r.row.clone()).collect()
    }
}

pub fn write_report<W: std::io::Write>(rows: &[ReportRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row).map_err(csv_error)?;
    }
    if rows.is_empty() {
        w.write_record([
            "method",
            "n_train",
            "len_train",
            "time_per_iter_s",
            "train_rmse_trans_m",
            "train_rmse_rot_rad",
            "test_rmse_trans_m",
            "test_rmse_rot_rad",
        ])
        .map_err(csv_error)?;
    }
    w.flush().map_err(|e| Error::io("<report>", e))
}

pub fn write_report_file(rows: &[ReportRow], path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_report(rows, std::io::BufWriter::new(file))
}

pub fn read_report(path: &Path) -> Result<Vec<ReportRow>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_error)?;
    r.deserialize().map(|row| row.map_err(csv_error)).collect()
}

pub fn examples(trajectories: &[Trajectory], smoother: &SmootherConfig) -> Result<Vec<TrajectoryExample>> {
    trajectories.iter().map(|t| t.to_example(*smoother)).collect()
}

/// Mean over trajectories of the smoother's translation/rotation RMSE at
/// `theta`.
pub fn evaluate(theta: &NoiseParams, trajectories: &[Trajectory], smoother: &SmootherConfig) -> Result<(f64, f64)> {
    let mut errors = Vec::with_capacity(trajectories.len());
    for (j, t) in trajectories.iter().enumerate() {
        let run = Smoother::run_chain(&t.gps, &t.odom, theta, smoother, &InitPolicy::DeadReckoning)
            .map_err(|e| e.in_trajectory(j))?;
        errors.push(rmse(&run.estimate, &t.gt)?);
    }
    Ok(mean_rmse(&errors))
}

fn train_method(
    method: Method,
    data: &[TrajectoryExample],
    initial: &NoiseParams,
    settings: &Settings,
) -> std::result::Result<(NoiseParams, TrainTrace), Aborted> {
    match method {
        Method::Ours => train(data, initial, &settings.train),
        Method::Leo => train_leo(data, initial, &settings.leo),
        Method::Both => unreachable!("expanded before training"),
    }
}

fn write_outputs(out_dir: &Path, method: Method, theta: &NoiseParams, trace: &TrainTrace) -> Result<()> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    trace.write_csv_file(&out_dir.join(format!("trace_{}.csv", method.name())))?;
    theta.write_file(&out_dir.join(format!("theta_{}.json", method.name())))
}

/// Trains every requested method, then evaluates each learned `θ` on the
/// test split. Test files are opened only after all training finished.
/// With an output directory, traces and learned parameters are written as
/// soon as each method finishes (partial traces on failure) and the report
/// CSV at the end.
pub fn run_experiment(config: &ExperimentConfig) -> Result<Report> {
    let settings = &config.settings;
    settings.validate()?;
    let manifest = Manifest::read(&config.data_dir)?;
    let initial = settings.initial(&manifest);
    let train_log = AccessLog::default();
    let mut trained = Vec::new();
    for method in settings.method.expand() {
        let split = method.train_split();
        let trajectories = load_split(&config.data_dir, split, settings.n_train, Some(&train_log))?;
        let data = examples(&trajectories, &settings.smoother)?;
        log::info!("training {} on {} trajectories", method.name(), data.len());
        match train_method(method, &data, &initial, settings) {
            Ok((theta, trace)) => {
                if let Some(dir) = &config.out_dir {
                    write_outputs(dir, method, &theta, &trace)?;
                }
                trained.push((method, theta, trace, trajectories));
            }
            Err(aborted) => {
                if let Some(dir) = &config.out_dir {
                    write_outputs(dir, method, &aborted.theta, &aborted.trace)?;
                }
                return Err(aborted.source);
            }
        }
    }

    let eval_log = AccessLog::default();
    let test = load_split(&config.data_dir, Split::Test, None, Some(&eval_log))?;
    let mut report = Report {
        training_reads: train_log.paths(),
        ..Report::default()
    };
    for (method, theta, trace, trajectories) in trained {
        let (train_t, train_r) = evaluate(&theta, &trajectories, &settings.smoother)?;
        let (test_t, test_r) = evaluate(&theta, &test, &settings.smoother)?;
        log::info!("{}: test RMSE {test_t:.4} m / {test_r:.4} rad", method.name());
        report.results.push(MethodResult {
            method,
            theta,
            row: ReportRow {
                method: method.name().into(),
                n_train: trajectories.len(),
                len_train: trajectories.first().map_or(0, |t| t.len()),
                time_per_iter_s: trace.mean_wall_time(),
                train_rmse_trans_m: train_t,
                train_rmse_rot_rad: train_r,
                test_rmse_trans_m: test_t,
                test_rmse_rot_rad: test_r,
            },
            trace,
        });
    }
    report.evaluation_reads = eval_log.paths();
    if let Some(dir) = &config.out_dir {
        write_report_file(&report.rows(), &dir.join("report.csv"))?;
    }
    Ok(report)
}

/// `(training-set size, workers, samples per trajectory)` for LEO sweeps.
/// Sampling memory grows with both counts, so larger sets use fewer.
pub const LEO_SWEEP_SCHEDULE: [(usize, usize, usize); 5] = [(1, 4, 10), (5, 4, 10), (10, 3, 8), (20, 2, 4), (30, 2, 4)];

/// Schedule entry for the largest listed size not above `n_train`.
pub fn leo_sweep_counts(n_train: usize) -> (usize, usize) {
    LEO_SWEEP_SCHEDULE
        .iter()
        .rev()
        .find(|(size, _, _)| *size <= n_train)
        .or(LEO_SWEEP_SCHEDULE.first())
        .map(|&(_, threads, samples)| (threads, samples))
        .expect("schedule is nonempty")
}

/// One experiment per training-set size; rows ordered by size, then
/// method.
pub fn run_sweep(base: &ExperimentConfig, sizes: &[usize]) -> Result<Vec<ReportRow>> {
    if sizes.is_empty() || sizes.contains(&0) {
        return Err(Error::Config("sweep sizes must be a nonempty list of positive counts".into()));
    }
    let mut rows = Vec::new();
    for &n in sizes {
        let mut config = base.clone();
        config.settings.n_train = Some(n);
        if config.settings.leo_sweep_schedule {
            let (threads, samples) = leo_sweep_counts(n);
            config.settings.leo.n_threads = threads;
            config.settings.leo.n_samples = samples;
        }
        config.out_dir = base.out_dir.as_ref().map(|d| d.join(format!("n{n:02}")));
        rows.extend(run_experiment(&config)?.rows());
    }
    if let Some(dir) = &base.out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_report_file(&rows, &dir.join("sweep.csv"))?;
    }
    Ok(rows)
}
