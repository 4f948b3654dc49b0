//! Energy-based baseline. The loss is the energy of the ground truth plus
//! the log-partition of the posterior; its θ-gradient is estimated by
//! contrasting `∂E/∂θ` at the ground truth with its mean over trajectories
//! sampled from the smoother's Gaussian posterior.

use std::f64::consts::PI;
use std::time::Instant;

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{total_objective, Factor, NoiseParams};
use crate::learner::{gd_step, Aborted, TraceRecord, TrainTrace, TrajectoryExample};
use crate::liegroup::Pose2;
use crate::metrics::{mean_rmse, rmse};
use crate::smoother::InitPolicy;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LeoConfig {
    pub n_samples: usize,
    pub n_threads: usize,
    pub alpha: f64,
    pub iterations: usize,
    pub seed: u64,
}

impl Default for LeoConfig {
    fn default() -> Self {
        Self {
            n_samples: 10,
            n_threads: 4,
            alpha: 0.1,
            iterations: 100,
            seed: 0,
        }
    }
}

impl LeoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(Error::Config("n_samples must be at least 1".into()));
        }
        if self.n_threads == 0 {
            return Err(Error::Config("n_threads must be at least 1".into()));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be positive, got {}", self.alpha)));
        }
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be at least 1".into()));
        }
        Ok(())
    }
}

pub fn energy(theta: &NoiseParams, states: &[Pose2], factors: &[Factor]) -> Result<f64> {
    total_objective(factors, states, theta)
}

/// `∂E/∂v = −Σ r² / (2v²)` per variance entry, summed over the residual
/// rows weighted by that entry. Fixed-variance rows contribute nothing.
pub fn grad_energy_theta(theta: &NoiseParams, states: &[Pose2], factors: &[Factor]) -> Result<DVector<f64>> {
    let values = theta.to_array();
    let mut grad = DVector::zeros(NoiseParams::DIM);
    for f in factors {
        let r = f.residual(states)?;
        for (row, k) in f.parameter_indices().into_iter().enumerate() {
            if let Some(k) = k {
                grad[k] -= r[row] * r[row] / (2.0 * values[k] * values[k]);
            }
        }
    }
    Ok(grad)
}

/// `∂E/∂θ(gt) − mean_s ∂E/∂θ(sample_s)`.
pub fn contrastive_gradient(
    theta: &NoiseParams,
    factors: &[Factor],
    gt: &[Pose2],
    samples: &[Vec<Pose2>],
) -> Result<DVector<f64>> {
    if samples.is_empty() {
        return Err(Error::Config("contrastive gradient needs at least one sample".into()));
    }
    let mut mean = DVector::zeros(NoiseParams::DIM);
    for s in samples {
        mean += grad_energy_theta(theta, s, factors)?;
    }
    mean /= samples.len() as f64;
    Ok(grad_energy_theta(theta, gt, factors)? - mean)
}

#[derive(Clone, Debug)]
pub struct LeoEval {
    /// `E(gt) + log Z`, with the partition function under the Laplace
    /// approximation at the smoother's estimate.
    pub loss: f64,
    pub gradient: DVector<f64>,
    pub estimates: Vec<Vec<Pose2>>,
}

/// Sampling stream for trajectory `j` at outer iteration `iteration`.
fn sample_rng(seed: u64, iteration: usize, j: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((iteration as u64) << 32) | j as u64);
    rng
}

/// Mean contrastive gradient over the dataset. Must run inside the worker
/// pool that should execute it; terms are reduced in dataset order.
pub fn leo_gradient(
    theta: &NoiseParams,
    dataset: &[TrajectoryExample],
    config: &LeoConfig,
    iteration: usize,
) -> Result<LeoEval> {
    if dataset.is_empty() {
        return Err(Error::Config("dataset is empty".into()));
    }
    let terms: Vec<(DVector<f64>, f64, Vec<Pose2>)> = dataset
        .par_iter()
        .enumerate()
        .map(|(j, example)| {
            (|| {
                let run = example.run(theta, &InitPolicy::DeadReckoning)?;
                let mut rng = sample_rng(config.seed, iteration, j);
                let samples = run.smoother.sample_posterior_with(config.n_samples, &mut rng)?;
                let factors = example.graph.factors();
                let g = contrastive_gradient(theta, factors, &example.gt, &samples)?;
                let dim = 3.0 * example.gt.len() as f64;
                let log_partition = -energy(theta, &run.estimate, factors)? + 0.5 * dim * (2.0 * PI).ln()
                    - run.smoother.half_log_det_information()?;
                let loss = energy(theta, &example.gt, factors)? + log_partition;
                Ok((g, loss, run.estimate))
            })()
            .map_err(|e: Error| e.in_trajectory(j))
        })
        .collect::<Result<_>>()?;

    let n = dataset.len() as f64;
    let mut gradient = DVector::zeros(NoiseParams::DIM);
    let mut loss = 0.0;
    let mut estimates = Vec::with_capacity(terms.len());
    for (g, l, e) in terms {
        gradient += g;
        loss += l;
        estimates.push(e);
    }
    Ok(LeoEval {
        loss: loss / n,
        gradient: gradient / n,
        estimates,
    })
}

pub fn thread_pool(n_threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(n_threads)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {n_threads} worker threads: {e}")))
}

/// Gradient descent on the contrastive gradient, sharing the descent step
/// and trace format with the finite-difference learner.
pub fn train_leo(
    dataset: &[TrajectoryExample],
    initial: &NoiseParams,
    config: &LeoConfig,
) -> std::result::Result<(NoiseParams, TrainTrace), Aborted> {
    let abort = |theta, trace, source| Aborted { theta, trace, source };
    let pool = match config
        .validate()
        .and_then(|_| initial.validate())
        .and_then(|_| thread_pool(config.n_threads))
    {
        Ok(pool) => pool,
        Err(e) => return Err(abort(*initial, TrainTrace::default(), e)),
    };
    let mut theta = *initial;
    let mut trace = TrainTrace::default();
    for iter in 0..config.iterations {
        let started = Instant::now();
        let eval = match pool.install(|| leo_gradient(&theta, dataset, config, iter)) {
            Ok(eval) => eval,
            Err(e) => return Err(abort(theta, trace, e)),
        };
        let next = gd_step(&theta, &eval.gradient, config.alpha);
        let wall_time_s = started.elapsed().as_secs_f64();
        let errors: Result<Vec<(f64, f64)>> = dataset
            .iter()
            .zip(&eval.estimates)
            .map(|(ex, e)| rmse(e, &ex.gt))
            .collect();
        let (rmse_trans_m, rmse_rot_rad) = match errors {
            Ok(errors) => mean_rmse(&errors),
            Err(e) => return Err(abort(theta, trace, e)),
        };
        log::debug!("leo iter {iter}: loss {:.6e}, theta {theta}", eval.loss);
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
