//! Outer loop: tracking loss of the smoother's estimate, finite-difference
//! sensitivities through the (non-differentiable) incremental solver,
//! gradient assembly and projected gradient descent on the variances.

use std::path::Path;
use std::time::Instant;

use nalgebra::{DMatrix, DVector, Vector2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{FactorGraph, NoiseParams};
use crate::liegroup::{Manifold, Pose2};
use crate::metrics::{mean_rmse, rmse};
use crate::smoother::{InitPolicy, IncrementalRun, Smoother, SmootherConfig};

/// An inner optimization problem whose solution depends on the noise
/// parameters. Solving must be deterministic given `theta` and `init`.
pub trait InnerProblem: Sync {
    type Point: Manifold + Send + Sync;
    /// Whatever the solver needs to repeat a run from the same starting
    /// point.
    type Init: Send + Sync;

    fn ground_truth(&self) -> &[Self::Point];

    /// Solves from `init`, or from the solver's own initialization policy
    /// when `None`, returning the estimate and the initialization used.
    fn solve(
        &self,
        theta: &NoiseParams,
        init: Option<&Self::Init>,
    ) -> Result<(Vec<Self::Point>, Self::Init)>;

    /// Translation and rotation RMSE of an estimate against ground truth.
    fn rmse(&self, estimate: &[Self::Point]) -> Result<(f64, f64)>;
}

/// One SE(2) trajectory: its measurement graph and ground truth.
#[derive(Clone, Debug)]
pub struct TrajectoryExample {
    pub graph: FactorGraph,
    pub gt: Vec<Pose2>,
    pub smoother: SmootherConfig,
}

impl TrajectoryExample {
    pub fn new(graph: FactorGraph, gt: Vec<Pose2>, smoother: SmootherConfig) -> Result<Self> {
        if gt.len() != graph.num_poses() {
            return Err(Error::LengthMismatch {
                left: gt.len(),
                right: graph.num_poses(),
            });
        }
        Ok(Self { graph, gt, smoother })
    }

    pub fn from_measurements(
        gps: &[Vector2<f64>],
        odom: &[Pose2],
        gt: Vec<Pose2>,
        smoother: SmootherConfig,
    ) -> Result<Self> {
        let initial = crate::smoother::dead_reckoning(gps, odom)?;
        Self::new(FactorGraph::chain(initial, gps, odom)?, gt, smoother)
    }

    pub fn run(&self, theta: &NoiseParams, init: &InitPolicy) -> Result<IncrementalRun> {
        Smoother::run_graph(&self.graph, theta, &self.smoother, init)
    }
}

impl InnerProblem for TrajectoryExample {
    type Point = Pose2;
    type Init = Vec<Pose2>;

    fn ground_truth(&self) -> &[Pose2] {
        &self.gt
    }

    fn solve(&self, theta: &NoiseParams, init: Option<&Vec<Pose2>>) -> Result<(Vec<Pose2>, Vec<Pose2>)> {
        let policy = match init {
            Some(values) => InitPolicy::Fixed(values.clone()),
            None => InitPolicy::DeadReckoning,
        };
        let run = self.run(theta, &policy)?;
        Ok((run.estimate, run.initial))
    }

    fn rmse(&self, estimate: &[Pose2]) -> Result<(f64, f64)> {
        rmse(estimate, &self.gt)
    }
}

/// Finite-difference step `τ_k = max(floor, relative · θ_k)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FdStep {
    pub floor: f64,
    pub relative: f64,
}

impl Default for FdStep {
    fn default() -> Self {
        Self {
            floor: 1e-6,
            relative: 1e-4,
        }
    }
}

impl FdStep {
    pub fn tau(&self, value: f64) -> f64 {
        self.floor.max(self.relative * value)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub alpha: f64,
    pub lambda: f64,
    pub iterations: usize,
    pub fd_step: FdStep,
    pub parallel_fd: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            lambda: 1e-4,
            iterations: 100,
            fd_step: FdStep::default(),
            parallel_fd: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be positive, got {}", self.alpha)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be nonnegative, got {}", self.lambda)));
        }
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be at least 1".into()));
        }
        if !(self.fd_step.floor > 0.0 && self.fd_step.relative >= 0.0) {
            return Err(Error::Config("fd_step floor must be positive and relative nonnegative".into()));
        }
        Ok(())
    }
}

/// `vec(estimate ⊖ gt)`, stacked per state.
pub fn tracking_residual<X: Manifold>(estimate: &[X], gt: &[X]) -> Result<DVector<f64>> {
    if estimate.len() != gt.len() {
        return Err(Error::LengthMismatch {
            left: estimate.len(),
            right: gt.len(),
        });
    }
    let parts: Vec<DVector<f64>> = estimate.iter().zip(gt).map(|(e, g)| e.ominus(g)).collect();
    let dim = parts.iter().map(|p| p.len()).sum();
    let mut out = DVector::zeros(dim);
    let mut offset = 0;
    for p in parts {
        out.rows_mut(offset, p.len()).copy_from(&p);
        offset += p.len();
    }
    Ok(out)
}

/// `(1/2|D|) Σ_j ‖vec(x̂_j ⊖ gt_j)‖² + λ‖θ‖²`.
pub fn tracking_loss<P: InnerProblem>(theta: &NoiseParams, dataset: &[P], lambda: f64) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::Config("dataset is empty".into()));
    }
    let mut sum = 0.0;
    for (j, problem) in dataset.iter().enumerate() {
        let term = (|| {
            let (estimate, _) = problem.solve(theta, None)?;
            Ok(tracking_residual(&estimate, problem.ground_truth())?.norm_squared())
        })()
        .map_err(|e: Error| e.in_trajectory(j))?;
        sum += term;
    }
    Ok(sum / (2.0 * dataset.len() as f64) + lambda * theta.norm_squared())
}

/// Sensitivity of the estimate to each variance: column `k` is
/// `vec(x̂(θ + τ_k e_k) ⊖ x̂(θ)) / τ_k`, every perturbed run starting from
/// the base run's initialization.
pub fn fd_sensitivity<P: InnerProblem>(
    problem: &P,
    theta: &NoiseParams,
    base: &[P::Point],
    init: &P::Init,
    step: &FdStep,
    parallel: bool,
) -> Result<DMatrix<f64>> {
    let values = theta.to_array();
    let column = |k: usize| -> Result<DVector<f64>> {
        let tau = step.tau(values[k]);
        let perturbed = theta.perturbed(k, tau);
        let (estimate, _) = problem
            .solve(&perturbed, Some(init))
            .map_err(|e| Error::Perturbed {
                param: k,
                source: Box::new(e),
            })?;
        Ok(tracking_residual(&estimate, base)? / (perturbed.to_array()[k] - values[k]))
    };
    let columns: Vec<DVector<f64>> = if parallel {
        (0..NoiseParams::DIM).into_par_iter().map(column).collect::<Result<_>>()?
    } else {
        (0..NoiseParams::DIM).map(column).collect::<Result<_>>()?
    };
    Ok(DMatrix::from_columns(&columns))
}

#[derive(Clone, Debug)]
pub struct GradientEval<X> {
    pub loss: f64,
    pub gradient: DVector<f64>,
    /// Unperturbed estimate per trajectory.
    pub estimates: Vec<Vec<X>>,
}

/// `(1/|D|) Σ_j S_jᵀ Jᵀ vec(x̂_j ⊖ gt_j) + 2λθ`, along with the loss at
/// `theta`. See [`pull_back`] for `J`.
/// Per-trajectory terms are reduced in dataset order, so serial and
/// parallel evaluation give identical results.
pub fn loss_gradient<P: InnerProblem>(
    theta: &NoiseParams,
    dataset: &[P],
    config: &TrainConfig,
) -> Result<GradientEval<P::Point>> {
    if dataset.is_empty() {
        return Err(Error::Config("dataset is empty".into()));
    }
    let per_trajectory = |(j, problem): (usize, &P)| {
        (|| {
            let (estimate, init) = problem.solve(theta, None)?;
            let residual = tracking_residual(&estimate, problem.ground_truth())?;
            let s = fd_sensitivity(problem, theta, &estimate, &init, &config.fd_step, config.parallel_fd)?;
            let pulled = pull_back(&estimate, problem.ground_truth(), &residual);
            Ok((s.transpose() * pulled, residual.norm_squared(), estimate))
        })()
        .map_err(|e: Error| e.in_trajectory(j))
    };
    let terms: Vec<(DVector<f64>, f64, Vec<P::Point>)> = if config.parallel_fd {
        dataset.par_iter().enumerate().map(per_trajectory).collect::<Result<_>>()?
    } else {
        dataset.iter().enumerate().map(per_trajectory).collect::<Result<_>>()?
    };

    let n = dataset.len() as f64;
    let mut gradient = DVector::zeros(NoiseParams::DIM);
    let mut tracking = 0.0;
    let mut estimates = Vec::with_capacity(terms.len());
    for (g, sq, estimate) in terms {
        gradient += g;
        tracking += sq;
        estimates.push(estimate);
    }
    let theta_vec = theta.to_vector();
    gradient = gradient / n + theta_vec * (2.0 * config.lambda);
    Ok(GradientEval {
        loss: tracking / (2.0 * n) + config.lambda * theta.norm_squared(),
        gradient,
        estimates,
    })
}

/// `Σ_i J_iᵀ e_i` with `J_i` the derivative of `x̂_i ⊖ gt_i` under a left
/// perturbation of `x̂_i`. The sensitivities are taken in that same
/// perturbation, so `Sᵀ` of this is the exact gradient of the tracking term.
/// On vector spaces `J_i = I` and it returns `e` unchanged.
fn pull_back<X: Manifold>(estimate: &[X], gt: &[X], residual: &DVector<f64>) -> DVector<f64> {
    let mut out = DVector::zeros(residual.len());
    let mut offset = 0;
    for (e, g) in estimate.iter().zip(gt) {
        let d = e.dof();
        let j = e.ominus_jacobian(g);
        out.rows_mut(offset, d)
            .copy_from(&(j.transpose() * residual.rows(offset, d)));
        offset += d;
    }
    out
}

/// `θ − α·gradient`, projected onto the variance floor.
pub fn gd_step(theta: &NoiseParams, gradient: &DVector<f64>, alpha: f64) -> NoiseParams {
    let stepped = theta.to_vector() - gradient * alpha;
    NoiseParams::from_slice(stepped.as_slice())
        .expect("gradient has one entry per parameter")
        .projected()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TraceRecord {
    pub iter: usize,
    /// Parameters at which this iteration's loss and gradient were taken.
    pub theta: NoiseParams,
    pub loss: f64,
    pub grad_norm: f64,
    pub wall_time_s: f64,
    pub rmse_trans_m: f64,
    pub rmse_rot_rad: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainTrace {
    pub records: Vec<TraceRecord>,
}

#[derive(Serialize)]
struct CsvRow {
    iter: usize,
    theta_gps0: f64,
    theta_gps1: f64,
    theta_odom0: f64,
    theta_odom1: f64,
    theta_odom2: f64,
    loss: f64,
    grad_norm: f64,
    wall_time_s: f64,
    rmse_trans_m: f64,
    rmse_rot_rad: f64,
}

impl TrainTrace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn mean_wall_time(&self) -> f64 {
        if self.records.is_empty() {
            return 0.0;
        }
        self.records.iter().map(|r| r.wall_time_s).sum::<f64>() / self.records.len() as f64
    }

    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.records {
            let t = r.theta.to_array();
            w.serialize(CsvRow {
                iter: r.iter,
                theta_gps0: t[0],
                theta_gps1: t[1],
                theta_odom0: t[2],
                theta_odom1: t[3],
                theta_odom2: t[4],
                loss: r.loss,
                grad_norm: r.grad_norm,
                wall_time_s: r.wall_time_s,
                rmse_trans_m: r.rmse_trans_m,
                rmse_rot_rad: r.rmse_rot_rad,
            })
            .map_err(csv_error)?;
        }
        w.flush().map_err(|e| Error::io("<trace>", e))
    }

    pub fn write_csv_file(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(file))
    }
}

pub(crate) fn csv_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io("<csv>", io),
        other => Error::Config(format!("csv serialization failed: {other:?}")),
    }
}

/// Training stopped early; carries everything completed so far.
#[derive(Debug, thiserror::Error)]
#[error("training stopped after {} completed iterations: {source}", .trace.len())]
pub struct Aborted {
    pub theta: NoiseParams,
    pub trace: TrainTrace,
    #[source]
    pub source: Error,
}

/// Runs `iterations` rounds of gradient evaluation and a descent step from
/// `initial`. The trace's wall time covers the gradient evaluation and the
/// step, not the bookkeeping.
pub fn train<P: InnerProblem>(
    dataset: &[P],
    initial: &NoiseParams,
    config: &TrainConfig,
) -> std::result::Result<(NoiseParams, TrainTrace), Aborted> {
    let abort = |theta, trace, source| Aborted { theta, trace, source };
    if let Err(e) = config.validate().and_then(|_| initial.validate()) {
        return Err(abort(*initial, TrainTrace::default(), e));
    }
    if dataset.is_empty() {
        return Err(abort(*initial, TrainTrace::default(), Error::Config("dataset is empty".into())));
    }
    let mut theta = *initial;
    let mut trace = TrainTrace::default();
    for iter in 0..config.iterations {
        let started = Instant::now();
        let eval = match loss_gradient(&theta, dataset, config) {
            Ok(eval) => eval,
            Err(e) => return Err(abort(theta, trace, e)),
        };
        let next = gd_step(&theta, &eval.gradient, config.alpha);
        let wall_time_s = started.elapsed().as_secs_f64();
        let errors: Result<Vec<(f64, f64)>> = dataset
            .iter()
            .zip(&eval.estimates)
            .map(|(p, e)| p.rmse(e))
            .collect();
        let (rmse_trans_m, rmse_rot_rad) = match errors {
            Ok(errors) => mean_rmse(&errors),
            Err(e) => return Err(abort(theta, trace, e)),
        };
        log::debug!("iter {iter}: loss {:.6e}, theta {theta}", eval.loss);
        trace.records.push(TraceRecord {
            iter,
            theta,
            loss: eval.loss,
            grad_norm: eval.gradient.norm(),
            wall_time_s,
            rmse_trans_m,
            rmse_rot_rad,
        });
        theta = next;
    }
    Ok((theta, trace))
}
