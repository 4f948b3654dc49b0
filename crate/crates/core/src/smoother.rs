//! Incremental Gauss-Newton smoother over SE(2) pose chains, a batch
//! reference solver, and posterior sampling from the square-root
//! information factor.
//!
//! Variables are eliminated in their natural (temporal) order, one 3×3
//! block at a time. For each variable the partially eliminated system that
//! enters its elimination step (the "frontier") is cached, so an update only
//! re-eliminates the suffix starting at the smallest affected variable.
//! Variables are relinearized only when their pending correction exceeds
//! the relinearization threshold, and back-substitution stops propagating
//! into unaffected rows once the change falls below a wildfire threshold.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use nalgebra::{DMatrix, DVector, Matrix3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{total_objective, Factor, FactorGraph, NoiseParams};
use crate::liegroup::{Pose2, TangentVec};

/// Relative pivot floor: a diagonal entry of `R` whose square falls below
/// this fraction of the largest diagonal of the block being eliminated is
/// treated as a zero pivot.
const PIVOT_FLOOR: f64 = 1e-13;

/// Relinearization passes stop once every pending correction is this small.
const CONVERGED_DELTA: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SmootherConfig {
    /// Variables whose pending correction exceeds this (∞-norm, tangent
    /// units) are relinearized.
    pub relin_threshold: f64,
    /// Upper bound on relinearize/eliminate/solve passes per time step.
    pub max_passes: usize,
}

impl Default for SmootherConfig {
    fn default() -> Self {
        Self {
            relin_threshold: 0.1,
            max_passes: 4,
        }
    }
}

impl SmootherConfig {
    pub fn exact() -> Self {
        Self {
            relin_threshold: 0.0,
            max_passes: 20,
        }
    }

    /// Back-substitution skips rows whose separator changed by less than
    /// this.
    pub fn wildfire_threshold(&self) -> f64 {
        0.01 * self.relin_threshold
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.relin_threshold >= 0.0 && self.relin_threshold.is_finite()) {
            return Err(Error::Config(format!(
                "relin_threshold must be a nonnegative number, got {}",
                self.relin_threshold
            )));
        }
        if self.max_passes == 0 {
            return Err(Error::Config("max_passes must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct SolveReport {
    pub iterations: usize,
    pub final_objective: f64,
    pub converged: bool,
    pub relinearized_count: usize,
    pub wall_time: f64,
}

impl SolveReport {
    fn accumulate(&mut self, other: &SolveReport) {
        self.iterations += other.iterations;
        self.relinearized_count += other.relinearized_count;
        self.wall_time += other.wall_time;
        self.final_objective = other.final_objective;
        self.converged = other.converged;
    }
}

/// A factor linearized at the current linearization points, whitened:
/// `‖Σ_k blocks[k] δ_{keys[k]} − rhs‖²`.
#[derive(Clone, Debug)]
struct LinearFactor {
    keys: Vec<usize>,
    blocks: Vec<DMatrix<f64>>,
    rhs: DVector<f64>,
}

impl LinearFactor {
    fn new(factor: &Factor, states: &[Pose2], theta: &NoiseParams) -> Result<Self> {
        let lin = factor.linearize_whitened(states, theta)?;
        if lin.residual.iter().any(|v| !v.is_finite())
            || lin.blocks.iter().any(|(_, b)| b.iter().any(|v| !v.is_finite()))
        {
            return Err(Error::NonFinite {
                context: format!("linearization of {factor:?}"),
            });
        }
        let (keys, blocks) = lin.blocks.into_iter().unzip();
        Ok(Self {
            keys,
            blocks,
            rhs: -lin.residual,
        })
    }

    fn min_key(&self) -> usize {
        *self.keys.iter().min().expect("factor has keys")
    }
}

/// Block-symmetric remainder over variables not yet eliminated.
#[derive(Clone, Debug, Default)]
struct Frontier {
    hessian: BTreeMap<(usize, usize), Matrix3<f64>>,
    gradient: BTreeMap<usize, Vector3<f64>>,
}

fn to_mat3(m: &DMatrix<f64>) -> Matrix3<f64> {
    Matrix3::from_iterator(m.iter().copied())
}

impl Frontier {
    fn add(&mut self, factor: &LinearFactor) {
        for (a, &ka) in factor.keys.iter().enumerate() {
            let ja = &factor.blocks[a];
            let g = Vector3::from_iterator((ja.transpose() * &factor.rhs).iter().copied());
            *self.gradient.entry(ka).or_default() += g;
            for (b, &kb) in factor.keys.iter().enumerate() {
                if ka <= kb {
                    let h = to_mat3(&(ja.transpose() * &factor.blocks[b]));
                    *self.hessian.entry((ka, kb)).or_default() += h;
                }
            }
        }
    }

    fn add_to(&mut self, i: usize, j: usize, m: Matrix3<f64>) {
        if i <= j {
            *self.hessian.entry((i, j)).or_default() += m;
        } else {
            *self.hessian.entry((j, i)).or_default() += m.transpose();
        }
    }
}

/// One block row of the upper-triangular factor: `diag δ_i + Σ off_j δ_j = rhs`.
#[derive(Clone, Debug)]
struct RowBlock {
    diag: Matrix3<f64>,
    off: Vec<(usize, Matrix3<f64>)>,
    rhs: Vector3<f64>,
}

impl Default for RowBlock {
    fn default() -> Self {
        Self {
            diag: Matrix3::identity(),
            off: Vec::new(),
            rhs: Vector3::zeros(),
        }
    }
}

#[derive(Clone, Debug, Default)]
struct Elimination {
    rows: Vec<RowBlock>,
    /// `frontiers[i]` is the remainder entering the elimination of `i`.
    frontiers: Vec<Frontier>,
}

impl Elimination {
    /// Re-eliminates variables `start..n` using the cached frontier at
    /// `start`.
    fn eliminate_from(
        &mut self,
        start: usize,
        factors: &[LinearFactor],
        by_min_key: &[Vec<usize>],
    ) -> Result<()> {
        let n = by_min_key.len();
        self.rows.resize_with(n, RowBlock::default);
        self.frontiers.resize_with(n, Frontier::default);
        let mut frontier = if start == 0 {
            Frontier::default()
        } else {
            self.frontiers[start].clone()
        };
        for i in start..n {
            self.frontiers[i] = frontier.clone();
            for &f in &by_min_key[i] {
                frontier.add(&factors[f]);
            }
            let a_ii = frontier.hessian.remove(&(i, i)).unwrap_or_else(Matrix3::zeros);
            let b_i = frontier.gradient.remove(&i).unwrap_or_else(Vector3::zeros);
            let coupled: Vec<(usize, Matrix3<f64>)> = frontier
                .hessian
                .range((i, i + 1)..(i + 1, 0))
                .map(|(&(_, j), m)| (j, *m))
                .collect();
            for (j, _) in &coupled {
                frontier.hessian.remove(&(i, *j));
            }

            let chol = a_ii.cholesky().ok_or(Error::Rank { variable: i })?;
            let lower = chol.l();
            let scale = (0..3).map(|k| a_ii[(k, k)]).fold(0.0, f64::max);
            if (0..3).any(|k| lower[(k, k)].powi(2) <= PIVOT_FLOOR * scale) {
                return Err(Error::Rank { variable: i });
            }
            let solve_lower = |m: &Matrix3<f64>| {
                lower
                    .solve_lower_triangular(m)
                    .expect("nonzero pivots checked above")
            };
            let off: Vec<(usize, Matrix3<f64>)> =
                coupled.iter().map(|(j, a)| (*j, solve_lower(a))).collect();
            let rhs = lower
                .solve_lower_triangular(&b_i)
                .expect("nonzero pivots checked above");

            for (a, (ja, ra)) in off.iter().enumerate() {
                *frontier.gradient.entry(*ja).or_default() -= ra.transpose() * rhs;
                for (jb, rb) in off.iter().skip(a) {
                    frontier.add_to(*ja, *jb, -(ra.transpose() * rb));
                }
            }
            self.rows[i] = RowBlock {
                diag: lower.transpose(),
                off,
                rhs,
            };
        }
        Ok(())
    }

    /// Solves `R x = rhs` for a full right-hand side.
    fn back_substitute(&self, rhs: impl Fn(usize) -> Vector3<f64>) -> Vec<Vector3<f64>> {
        let n = self.rows.len();
        let mut x = vec![Vector3::zeros(); n];
        for i in (0..n).rev() {
            let row = &self.rows[i];
            let mut r = rhs(i);
            for (j, rij) in &row.off {
                r -= rij * x[*j];
            }
            x[i] = row
                .diag
                .solve_upper_triangular(&r)
                .expect("factor has nonzero pivots");
        }
        x
    }
}

/// Upper-triangular square-root information factor in block form.
#[derive(Clone, Debug)]
pub struct SqrtInformation {
    /// Elimination order of the variables; block row `k` belongs to
    /// variable `ordering[k]`.
    pub ordering: Vec<usize>,
    rows: Vec<RowBlock>,
}

impl SqrtInformation {
    pub fn dim(&self) -> usize {
        3 * self.rows.len()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.dim();
        let mut r = DMatrix::zeros(n, n);
        for (i, row) in self.rows.iter().enumerate() {
            r.view_mut((3 * i, 3 * i), (3, 3)).copy_from(&row.diag);
            for (j, m) in &row.off {
                r.view_mut((3 * i, 3 * j), (3, 3)).copy_from(m);
            }
        }
        r
    }

    /// Non-zero entries as `(row, col, value)`.
    pub fn triplets(&self) -> Vec<(usize, usize, f64)> {
        let mut out = Vec::new();
        let mut push_block = |bi: usize, bj: usize, m: &Matrix3<f64>| {
            for r in 0..3 {
                for c in 0..3 {
                    if m[(r, c)] != 0.0 {
                        out.push((3 * bi + r, 3 * bj + c, m[(r, c)]));
                    }
                }
            }
        };
        for (i, row) in self.rows.iter().enumerate() {
            push_block(i, i, &row.diag);
            for (j, m) in &row.off {
                push_block(i, *j, m);
            }
        }
        out
    }

    pub fn write_triplets(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        for (r, c, v) in self.triplets() {
            writeln!(w, "{r} {c} {v:e}").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// How the incremental runner initializes each new pose.
#[derive(Clone, Debug)]
pub enum InitPolicy {
    /// The current estimate of the odometry predecessor composed with the
    /// odometry measurement; pose 0 (and any pose without a predecessor)
    /// takes the graph's initial value.
    DeadReckoning,
    /// Externally supplied initial values, one per pose.
    Fixed(Vec<Pose2>),
}

/// Result of running the smoother over a whole graph.
#[derive(Clone, Debug)]
pub struct IncrementalRun {
    pub smoother: Smoother,
    pub estimate: Vec<Pose2>,
    /// Initial value used for each pose as it was added.
    pub initial: Vec<Pose2>,
    pub report: SolveReport,
}

/// Incremental smoother state. Cloning yields an independent solver.
#[derive(Clone, Debug)]
pub struct Smoother {
    config: SmootherConfig,
    theta: NoiseParams,
    lin_points: Vec<Pose2>,
    delta: Vec<Vector3<f64>>,
    factors: Vec<Factor>,
    linear: Vec<LinearFactor>,
    by_min_key: Vec<Vec<usize>>,
    by_key: Vec<Vec<usize>>,
    elim: Elimination,
}

impl Smoother {
    pub fn new(theta: NoiseParams, config: SmootherConfig) -> Self {
        Self {
            config,
            theta,
            lin_points: Vec::new(),
            delta: Vec::new(),
            factors: Vec::new(),
            linear: Vec::new(),
            by_min_key: Vec::new(),
            by_key: Vec::new(),
            elim: Elimination::default(),
        }
    }

    pub fn config(&self) -> &SmootherConfig {
        &self.config
    }

    pub fn theta(&self) -> &NoiseParams {
        &self.theta
    }

    pub fn len(&self) -> usize {
        self.lin_points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lin_points.is_empty()
    }

    pub fn factors(&self) -> &[Factor] {
        &self.factors
    }

    pub fn linearization_points(&self) -> &[Pose2] {
        &self.lin_points
    }

    pub fn delta(&self) -> Vec<TangentVec> {
        self.delta.iter().map(TangentVec::from_vector).collect()
    }

    /// Variables whose pending correction exceeds the relinearization
    /// threshold; they are relinearized at the start of the next update.
    pub fn dirty(&self) -> Vec<usize> {
        (0..self.len()).filter(|&v| self.needs_relin(v)).collect()
    }

    fn needs_relin(&self, v: usize) -> bool {
        self.delta[v].amax() > self.config.relin_threshold
    }

    /// Adds one pose together with the factors that arrive with it, then
    /// updates the estimate.
    pub fn add_timestep(&mut self, new_factors: Vec<Factor>, new_pose_init: Pose2) -> Result<SolveReport> {
        let started = Instant::now();
        if !new_pose_init.is_finite() {
            return Err(Error::NonFinite {
                context: "initial value of new pose".into(),
            });
        }
        let id = self.len();
        for f in &new_factors {
            for k in f.keys() {
                if k > id {
                    return Err(Error::UnknownVariable { id: k });
                }
            }
        }
        self.lin_points.push(new_pose_init);
        self.delta.push(Vector3::zeros());
        self.by_min_key.push(Vec::new());
        self.by_key.push(Vec::new());

        let mut affected = BTreeSet::from([id]);
        for f in new_factors {
            let lin = LinearFactor::new(&f, &self.lin_points, &self.theta)?;
            let idx = self.factors.len();
            for &k in &lin.keys {
                self.by_key[k].push(idx);
                affected.insert(k);
            }
            self.by_min_key[lin.min_key()].push(idx);
            self.factors.push(f);
            self.linear.push(lin);
        }

        let mut report = self.update(affected)?;
        report.wall_time = started.elapsed().as_secs_f64();
        Ok(report)
    }

    fn update(&mut self, mut affected: BTreeSet<usize>) -> Result<SolveReport> {
        let mut relinearized = 0;
        let mut passes = 0;
        let mut converged = false;
        loop {
            let relin: Vec<usize> = self.dirty();
            relinearized += relin.len();
            let mut stale = BTreeSet::new();
            for &v in &relin {
                let tau = TangentVec::from_vector(&self.delta[v]);
                self.lin_points[v] = tau.exp().compose(&self.lin_points[v]);
                self.delta[v] = Vector3::zeros();
                stale.extend(self.by_key[v].iter().copied());
            }
            for f in stale {
                self.linear[f] = LinearFactor::new(&self.factors[f], &self.lin_points, &self.theta)?;
                affected.extend(self.linear[f].keys.iter().copied());
            }
            let Some(&start) = affected.first() else {
                converged = true;
                break;
            };
            passes += 1;
            self.elim
                .eliminate_from(start, &self.linear, &self.by_min_key)?;
            self.partial_back_substitute(start);
            affected.clear();

            let pending = self
                .delta
                .iter()
                .map(|d| d.amax())
                .filter(|&m| m > self.config.relin_threshold)
                .fold(None, |acc: Option<f64>, m| Some(acc.map_or(m, |a| a.max(m))));
            match pending {
                None => {
                    converged = true;
                    break;
                }
                Some(m) if m <= CONVERGED_DELTA => {
                    converged = true;
                    break;
                }
                Some(_) if passes >= self.config.max_passes => break,
                Some(_) => {}
            }
        }
        Ok(SolveReport {
            iterations: passes,
            final_objective: self.objective()?,
            converged,
            relinearized_count: relinearized,
            wall_time: 0.0,
        })
    }

    /// Back-substitution that always recomputes rows `start..` and only
    /// descends into older rows whose separator moved by more than the
    /// wildfire threshold.
    fn partial_back_substitute(&mut self, start: usize) {
        let wildfire = self.config.wildfire_threshold();
        let n = self.len();
        let mut change = vec![0.0f64; n];
        for i in (0..n).rev() {
            let row = &self.elim.rows[i];
            let recompute = i >= start || row.off.iter().any(|(j, _)| change[*j] > wildfire);
            if !recompute {
                continue;
            }
            let mut r = row.rhs;
            for (j, rij) in &row.off {
                r -= rij * self.delta[*j];
            }
            let updated = row
                .diag
                .solve_upper_triangular(&r)
                .expect("factor has nonzero pivots");
            change[i] = (updated - self.delta[i]).amax();
            self.delta[i] = updated;
        }
    }

    /// `delta ⊕ linearization point` for every variable, in id order.
    pub fn map_estimate(&self) -> Result<Vec<Pose2>> {
        if self.is_empty() {
            return Err(Error::EmptyState);
        }
        Ok(self.estimate_unchecked())
    }

    fn estimate_unchecked(&self) -> Vec<Pose2> {
        self.lin_points
            .iter()
            .zip(&self.delta)
            .map(|(x, d)| TangentVec::from_vector(d).exp().compose(x))
            .collect()
    }

    pub fn objective(&self) -> Result<f64> {
        total_objective(&self.factors, &self.estimate_unchecked(), &self.theta)
    }

    /// The factor `R` with `RᵀR = JᵀΣ⁻¹J` at the current linearization
    /// points.
    pub fn sqrt_information(&self) -> Result<SqrtInformation> {
        if self.is_empty() {
            return Err(Error::EmptyState);
        }
        Ok(SqrtInformation {
            ordering: (0..self.len()).collect(),
            rows: self.elim.rows.clone(),
        })
    }

    /// Maps a standard-normal vector `w` (length `3n`) to the trajectory
    /// `(δ + ξ) ⊕ x_lin` with `R ξ = w`.
    pub fn sample_with_noise(&self, w: &DVector<f64>) -> Result<Vec<Pose2>> {
        if self.is_empty() {
            return Err(Error::EmptyState);
        }
        if w.len() != 3 * self.len() {
            return Err(Error::LengthMismatch {
                left: w.len(),
                right: 3 * self.len(),
            });
        }
        let xi = self
            .elim
            .back_substitute(|i| Vector3::new(w[3 * i], w[3 * i + 1], w[3 * i + 2]));
        Ok(self
            .lin_points
            .iter()
            .zip(self.delta.iter().zip(&xi))
            .map(|(x, (d, e))| TangentVec::from_vector(&(d + e)).exp().compose(x))
            .collect())
    }

    /// Draws `n` trajectories from the Gaussian posterior implied by the
    /// current linearization.
    pub fn sample_posterior(&self, n: usize, seed: u64) -> Result<Vec<Vec<Pose2>>> {
        self.sample_posterior_with(n, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn sample_posterior_with<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<Vec<Pose2>>> {
        let dim = 3 * self.len();
        (0..n)
            .map(|_| {
                let w = DVector::from_fn(dim, |_, _| StandardNormal.sample(rng));
                self.sample_with_noise(&w)
            })
            .collect()
    }

    /// `½ log det` of the posterior information, `Σ log diag(R)`.
    pub fn half_log_det_information(&self) -> Result<f64> {
        if self.is_empty() {
            return Err(Error::EmptyState);
        }
        Ok(self
            .elim
            .rows
            .iter()
            .map(|row| (0..3).map(|k| row.diag[(k, k)].ln()).sum::<f64>())
            .sum())
    }

    /// Runs the smoother over a GPS/odometry chain, adding one pose per
    /// time step. `odom[i]` links poses `i` and `i + 1`.
    pub fn run_chain(
        gps: &[Vector2<f64>],
        odom: &[Pose2],
        theta: &NoiseParams,
        config: &SmootherConfig,
        init: &InitPolicy,
    ) -> Result<IncrementalRun> {
        let graph = FactorGraph::chain(dead_reckoning(gps, odom)?, gps, odom)?;
        Self::run_graph(&graph, theta, config, init)
    }

    /// Runs the smoother over any connected graph. Pose `t` is added at
    /// step `t` together with every factor whose largest key is `t`.
    /// Dead-reckoning initializes a pose from the current estimate of an
    /// odometry predecessor, falling back to the graph's initial value.
    pub fn run_graph(
        graph: &FactorGraph,
        theta: &NoiseParams,
        config: &SmootherConfig,
        init: &InitPolicy,
    ) -> Result<IncrementalRun> {
        config.validate()?;
        let n = graph.num_poses();
        if let InitPolicy::Fixed(values) = init {
            if values.len() != n {
                return Err(Error::LengthMismatch {
                    left: values.len(),
                    right: n,
                });
            }
        }
        let mut arriving = vec![Vec::new(); n];
        for f in graph.factors() {
            let newest = f.keys().into_iter().max().expect("factor has keys");
            arriving[newest].push(f.clone());
        }
        let mut smoother = Smoother::new(*theta, *config);
        let mut initial = Vec::with_capacity(n);
        let mut report = SolveReport::default();
        for (t, factors) in arriving.into_iter().enumerate() {
            let guess = match init {
                InitPolicy::Fixed(values) => values[t],
                InitPolicy::DeadReckoning => factors
                    .iter()
                    .find_map(|f| match f {
                        Factor::Odom { prev, next, z } if *next == t && *prev < t => {
                            Some(smoother.current(*prev).compose(z))
                        }
                        _ => None,
                    })
                    .unwrap_or(graph.initial()[t]),
            };
            initial.push(guess);
            let step = smoother.add_timestep(factors, guess)?;
            report.accumulate(&step);
        }
        let estimate = smoother.map_estimate()?;
        Ok(IncrementalRun {
            smoother,
            estimate,
            initial,
            report,
        })
    }

    fn current(&self, v: usize) -> Pose2 {
        TangentVec::from_vector(&self.delta[v])
            .exp()
            .compose(&self.lin_points[v])
    }
}

/// Open-loop trajectory: pose 0 at the first GPS fix with zero heading,
/// then odometry composed forward.
pub fn dead_reckoning(gps: &[Vector2<f64>], odom: &[Pose2]) -> Result<Vec<Pose2>> {
    if gps.is_empty() || odom.len() + 1 != gps.len() {
        return Err(Error::LengthMismatch {
            left: odom.len() + 1,
            right: gps.len(),
        });
    }
    let mut poses = Vec::with_capacity(gps.len());
    poses.push(Pose2::new(gps[0][0], gps[0][1], 0.0));
    for z in odom {
        let next = poses.last().expect("nonempty").compose(z);
        poses.push(next);
    }
    Ok(poses)
}

/// Reference Gauss-Newton solver with step-halving line search.
pub fn solve_batch(
    graph: &FactorGraph,
    theta: &NoiseParams,
    init: &[Pose2],
) -> Result<(Vec<Pose2>, SolveReport)> {
    const MAX_ITERATIONS: usize = 100;
    const MAX_HALVINGS: usize = 20;
    const MIN_STEP: f64 = 1e-10;
    // Below this step size the objective no longer resolves progress, so a
    // step that raises it by at most a few ulps is still taken.
    const ROUNDING_STEP: f64 = 1e-6;
    const ROUNDING_SLACK: f64 = 1e-14;

    let started = Instant::now();
    let n = graph.num_poses();
    if init.len() != n {
        return Err(Error::LengthMismatch {
            left: init.len(),
            right: n,
        });
    }
    let factors = graph.factors();
    let mut by_min_key = vec![Vec::new(); n];
    let mut x = init.to_vec();
    let initial_objective = total_objective(factors, &x, theta)?;
    let mut objective = initial_objective;
    let mut iterations = 0;
    let mut converged = false;
    for _ in 0..MAX_ITERATIONS {
        let linear = factors
            .iter()
            .map(|f| LinearFactor::new(f, &x, theta))
            .collect::<Result<Vec<_>>>()?;
        by_min_key.iter_mut().for_each(Vec::clear);
        for (idx, lf) in linear.iter().enumerate() {
            by_min_key[lf.min_key()].push(idx);
        }
        let mut elim = Elimination::default();
        elim.eliminate_from(0, &linear, &by_min_key)?;
        let step = elim.back_substitute(|i| elim.rows[i].rhs);
        let step_norm = step.iter().map(|s| s.amax()).fold(0.0, f64::max);
        if !step_norm.is_finite() {
            return Err(Error::NonFinite {
                context: "Gauss-Newton step".into(),
            });
        }
        if step_norm < MIN_STEP {
            converged = true;
            break;
        }
        let slack = if step_norm < ROUNDING_STEP {
            ROUNDING_SLACK * objective.abs()
        } else {
            0.0
        };
        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..=MAX_HALVINGS {
            let candidate: Vec<Pose2> = x
                .iter()
                .zip(&step)
                .map(|(p, s)| TangentVec::from_vector(&(s * scale)).exp().compose(p))
                .collect();
            let value = total_objective(factors, &candidate, theta)?;
            if value <= objective + slack {
                accepted = Some((candidate, value));
                break;
            }
            scale *= 0.5;
        }
        let Some((candidate, value)) = accepted else {
            return Err(Error::NonConvergence {
                iterations,
                last_iterate: x,
            });
        };
        x = candidate;
        objective = value;
        iterations += 1;
    }
    if objective > initial_objective {
        // only reachable through rounding slack at an already optimal start
        x = init.to_vec();
        objective = initial_objective;
    }
    let report = SolveReport {
        iterations,
        final_objective: objective,
        converged,
        relinearized_count: 0,
        wall_time: started.elapsed().as_secs_f64(),
    };
    Ok((x, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::liegroup::ominus;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};

    pub(crate) fn random_chain(seed: u64, len: usize, theta: &NoiseParams) -> (Vec<Vector2<f64>>, Vec<Pose2>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut gt = vec![Pose2::identity()];
        for _ in 1..len {
            let step = Pose2::new(1.0, 0.0, rng.random_range(-0.3..0.3));
            gt.push(gt.last().unwrap().compose(&step));
        }
        let normal = |rng: &mut ChaCha8Rng, var: f64| -> f64 {
            let z: f64 = StandardNormal.sample(rng);
            z * var.sqrt()
        };
        let gps = gt
            .iter()
            .map(|p| {
                Vector2::new(
                    p.x() + normal(&mut rng, theta.gps[0]),
                    p.y() + normal(&mut rng, theta.gps[1]),
                )
            })
            .collect();
        let odom = gt
            .windows(2)
            .map(|w| {
                let eta = TangentVec::new(
                    normal(&mut rng, theta.odom[0]),
                    normal(&mut rng, theta.odom[1]),
                    normal(&mut rng, theta.odom[2]),
                );
                eta.exp().compose(&w[0].between(&w[1]))
            })
            .collect();
        (gps, odom)
    }

    fn theta_default() -> NoiseParams {
        NoiseParams::new([0.25, 0.25], [0.01, 0.01, 0.0025]).unwrap()
    }

    fn max_tangent_gap(a: &[Pose2], b: &[Pose2]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(p, q)| ominus(p, q).as_vector().amax())
            .fold(0.0, f64::max)
    }

    fn weighted_mean_graph(theta1: f64, theta2: f64) -> (FactorGraph, NoiseParams) {
        // two GPS classes are not available, so the second fix is a pose
        // prior weighted by the odometry variances
        let graph = FactorGraph::new(
            vec![Pose2::new(0.3, 0.4, 0.0)],
            vec![
                Factor::gps(0, 0.0, 0.0),
                Factor::PosePrior {
                    pose: 0,
                    z: Pose2::new(1.0, 0.0, 0.0),
                },
            ],
        )
        .unwrap();
        let theta = NoiseParams::new([theta1; 2], [theta2; 3]).unwrap();
        (graph, theta)
    }

    #[test]
    fn first_pose_gps_at_origin() {
        let mut s = Smoother::new(theta_default(), SmootherConfig::default());
        let report = s
            .add_timestep(
                vec![Factor::anchor(0, 0.0), Factor::gps(0, 0.0, 0.0)],
                Pose2::identity(),
            )
            .unwrap();
        assert_eq!(s.map_estimate().unwrap(), vec![Pose2::identity()]);
        assert_eq!(report.final_objective, 0.0);
    }

    #[test]
    fn unanchored_first_pose_is_rank_deficient() {
        let mut s = Smoother::new(theta_default(), SmootherConfig::default());
        let err = s
            .add_timestep(vec![Factor::gps(0, 0.0, 0.0)], Pose2::identity())
            .unwrap_err();
        assert!(matches!(err, Error::Rank { variable: 0 }));
    }

    #[test]
    fn unknown_variable_rejected() {
        let mut s = Smoother::new(theta_default(), SmootherConfig::default());
        let err = s
            .add_timestep(vec![Factor::odom(0, 2, Pose2::identity())], Pose2::identity())
            .unwrap_err();
        assert!(matches!(err, Error::UnknownVariable { id: 2 }));
    }

    #[test]
    fn perfect_chain_needs_no_relinearization() {
        let gt = [
            Pose2::identity(),
            Pose2::new(1.0, 0.0, 0.2),
            Pose2::new(1.0, 0.0, 0.2).compose(&Pose2::new(1.0, 0.0, -0.1)),
        ];
        let gps: Vec<_> = gt.iter().map(|p| p.translation()).collect();
        let odom: Vec<_> = gt.windows(2).map(|w| w[0].between(&w[1])).collect();
        let run = Smoother::run_chain(
            &gps,
            &odom,
            &theta_default(),
            &SmootherConfig::default(),
            &InitPolicy::DeadReckoning,
        )
        .unwrap();
        assert_eq!(run.report.relinearized_count, 0);
        for d in run.smoother.delta() {
            assert_abs_diff_eq!(d.as_vector().amax(), 0.0, epsilon = 1e-12);
        }
        assert!(max_tangent_gap(&run.estimate, &gt) < 1e-12);
    }

    #[test]
    fn incremental_matches_batch_when_relinearizing_everything() {
        let theta = theta_default();
        for seed in 0..5 {
            let (gps, odom) = random_chain(seed, 50, &theta);
            let run = Smoother::run_chain(&gps, &odom, &theta, &SmootherConfig::exact(), &InitPolicy::DeadReckoning)
                .unwrap();
            let graph = FactorGraph::chain(run.initial.clone(), &gps, &odom).unwrap();
            let (batch, report) = solve_batch(&graph, &theta, graph.initial()).unwrap();
            assert!(report.converged);
            let gap = max_tangent_gap(&run.estimate, &batch);
            assert!(gap < 1e-6, "seed {seed}: gap {gap}");
        }
    }

    #[test]
    fn default_threshold_close_to_batch_objective() {
        let theta = theta_default();
        let (gps, odom) = random_chain(3, 50, &theta);
        let run = Smoother::run_chain(&gps, &odom, &theta, &SmootherConfig::default(), &InitPolicy::DeadReckoning)
            .unwrap();
        let graph = FactorGraph::chain(run.initial.clone(), &gps, &odom).unwrap();
        let (_, batch) = solve_batch(&graph, &theta, graph.initial()).unwrap();
        let rel = (run.report.final_objective - batch.final_objective) / batch.final_objective;
        assert!(rel.abs() < 0.01, "relative objective gap {rel}");
        for v in 0..run.smoother.len() {
            if !run.smoother.dirty().contains(&v) {
                assert!(run.smoother.delta()[v].as_vector().amax() <= 0.1);
            }
        }
    }

    #[test]
    fn batch_weighted_mean() {
        let (graph, theta) = weighted_mean_graph(1.0, 1.0);
        let (x, report) = solve_batch(&graph, &theta, graph.initial()).unwrap();
        assert!(report.converged);
        assert_abs_diff_eq!(x[0].x(), 0.5, epsilon = 1e-9);
        assert_abs_diff_eq!(x[0].y(), 0.0, epsilon = 1e-9);

        let (graph, theta) = weighted_mean_graph(1.0, 3.0);
        let (x, _) = solve_batch(&graph, &theta, graph.initial()).unwrap();
        // (0/1 + 1/3) / (1/1 + 1/3)
        assert_abs_diff_eq!(x[0].x(), 0.25, epsilon = 1e-9);
    }

    #[test]
    fn batch_two_gps_fixes_average() {
        let graph = FactorGraph::new(
            vec![Pose2::new(3.0, -2.0, 0.4)],
            vec![
                Factor::anchor(0, 0.0),
                Factor::gps(0, 0.0, 0.0),
                Factor::gps(0, 1.0, 0.0),
            ],
        )
        .unwrap();
        let (x, _) = solve_batch(&graph, &NoiseParams::uniform(2.0), graph.initial()).unwrap();
        assert_abs_diff_eq!(x[0].x(), 0.5, epsilon = 1e-9);
        assert_abs_diff_eq!(x[0].y(), 0.0, epsilon = 1e-9);
        assert_abs_diff_eq!(x[0].theta(), 0.0, epsilon = 1e-9);
    }

    #[test]
    fn batch_zero_noise_at_truth_takes_no_steps() {
        let zero_noise = NoiseParams::uniform(crate::graph::EPS_VAR);
        let (gps, odom) = random_chain(9, 20, &NoiseParams::from_array([0.0; 5]));
        let mut gt = vec![Pose2::identity()];
        for o in &odom {
            gt.push(gt.last().unwrap().compose(o));
        }
        let graph = FactorGraph::chain(gt.clone(), &gps, &odom).unwrap();
        let (x, report) = solve_batch(&graph, &zero_noise, &gt).unwrap();
        assert_eq!(report.iterations, 0);
        assert!(max_tangent_gap(&x, &gt) < 1e-12);
    }

    #[test]
    fn batch_never_increases_objective() {
        let theta = theta_default();
        for seed in 20..25 {
            let (gps, odom) = random_chain(seed, 30, &theta);
            let init: Vec<Pose2> = (0..30).map(|i| Pose2::new(i as f64 * 0.5, 1.0, 0.5)).collect();
            let graph = FactorGraph::chain(init.clone(), &gps, &odom).unwrap();
            let start = graph.total_objective(&init, &theta).unwrap();
            let (_, report) = solve_batch(&graph, &theta, &init).unwrap();
            assert!(report.final_objective <= start);
        }
    }

    #[test]
    fn batch_argmin_invariant_to_uniform_scaling() {
        let theta = theta_default();
        let (gps, odom) = random_chain(4, 40, &theta);
        let init: Vec<Pose2> = (0..40).map(|i| Pose2::new(i as f64, 0.0, 0.0)).collect();
        let graph = FactorGraph::chain(init.clone(), &gps, &odom).unwrap();
        let (a, ra) = solve_batch(&graph, &theta, &init).unwrap();
        let (b, rb) = solve_batch(&graph, &theta.scaled(7.5), &init).unwrap();
        assert!(max_tangent_gap(&a, &b) < 1e-9);
        assert_abs_diff_eq!(ra.final_objective / 7.5, rb.final_objective, epsilon = 1e-9);
    }

    fn dense_information(smoother: &Smoother) -> DMatrix<f64> {
        let n = 3 * smoother.len();
        let rows: usize = smoother.factors().iter().map(|f| f.dim()).sum();
        let mut j = DMatrix::zeros(rows, n);
        let mut r0 = 0;
        for f in smoother.factors() {
            let lin = f
                .linearize_whitened(smoother.linearization_points(), smoother.theta())
                .unwrap();
            for (k, b) in &lin.blocks {
                j.view_mut((r0, 3 * k), (b.nrows(), 3)).copy_from(b);
            }
            r0 += f.dim();
        }
        j.transpose() * j
    }

    #[test]
    fn sqrt_information_single_pose() {
        let mut s = Smoother::new(NoiseParams::uniform(1.0), SmootherConfig::default());
        s.add_timestep(vec![Factor::anchor(0, 0.0), Factor::gps(0, 0.0, 0.0)], Pose2::identity())
            .unwrap();
        let r = s.sqrt_information().unwrap().to_dense();
        let info = r.transpose() * &r;
        assert_abs_diff_eq!(info[(0, 0)], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(info[(1, 1)], 1.0, epsilon = 1e-12);

        let mut s2 = Smoother::new(NoiseParams::uniform(2.0), SmootherConfig::default());
        s2.add_timestep(vec![Factor::gps(0, 0.0, 0.0), Factor::PosePrior { pose: 0, z: Pose2::identity() }], Pose2::identity())
            .unwrap();
        let mut s1 = Smoother::new(NoiseParams::uniform(1.0), SmootherConfig::default());
        s1.add_timestep(vec![Factor::gps(0, 0.0, 0.0), Factor::PosePrior { pose: 0, z: Pose2::identity() }], Pose2::identity())
            .unwrap();
        let i1 = s1.sqrt_information().unwrap().to_dense();
        let i2 = s2.sqrt_information().unwrap().to_dense();
        assert_abs_diff_eq!(i2.transpose() * &i2, (i1.transpose() * &i1) * 0.5, epsilon = 1e-12);
    }

    #[test]
    fn sqrt_information_matches_dense_chain() {
        let theta = theta_default();
        let (gps, odom) = random_chain(5, 10, &theta);
        let run = Smoother::run_chain(&gps, &odom, &theta, &SmootherConfig::default(), &InitPolicy::DeadReckoning)
            .unwrap();
        let r = run.smoother.sqrt_information().unwrap();
        let dense = r.to_dense();
        let oracle = dense_information(&run.smoother);
        let rel = (dense.transpose() * &dense - &oracle).norm() / oracle.norm();
        assert!(rel < 1e-8, "relative error {rel}");
        for i in 0..dense.nrows() {
            assert!(dense[(i, i)] > 0.0);
            for j in 0..i {
                assert_eq!(dense[(i, j)], 0.0);
            }
        }
        let triplets = r.triplets();
        assert!(triplets.iter().all(|(r, c, _)| r <= c));
    }

    #[test]
    fn sampling_with_zero_noise_returns_map() {
        let theta = theta_default();
        let (gps, odom) = random_chain(6, 8, &theta);
        let run = Smoother::run_chain(&gps, &odom, &theta, &SmootherConfig::default(), &InitPolicy::DeadReckoning)
            .unwrap();
        let sample = run.smoother.sample_with_noise(&DVector::zeros(24)).unwrap();
        assert!(max_tangent_gap(&sample, &run.estimate) < 1e-14);

        let a = run.smoother.sample_posterior(3, 42).unwrap();
        let b = run.smoother.sample_posterior(3, 42).unwrap();
        assert_eq!(a, b);
        let c = run.smoother.sample_posterior(3, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn single_pose_sample_covariance() {
        let mut s = Smoother::new(NoiseParams::new([0.5, 2.0], [1.0; 3]).unwrap(), SmootherConfig::default());
        s.add_timestep(vec![Factor::anchor(0, 0.0), Factor::gps(0, 1.0, -1.0)], Pose2::identity())
            .unwrap();
        let info = dense_information(&s);
        let cov = info.try_inverse().unwrap();
        let samples = s.sample_posterior(10_000, 1).unwrap();
        let lin = s.linearization_points()[0];
        let mean = TangentVec::from_vector(&s.delta[0]).as_vector();
        let mut sample_cov = nalgebra::Matrix2::zeros();
        for traj in &samples {
            let xi = traj[0].compose(&lin.inverse()).log().as_vector() - mean;
            let t = Vector2::new(xi[0], xi[1]);
            sample_cov += t * t.transpose();
        }
        sample_cov /= samples.len() as f64;
        let oracle = cov.view((0, 0), (2, 2)).into_owned();
        let rel = (DMatrix::from_iterator(2, 2, sample_cov.iter().copied()) - &oracle).norm() / oracle.norm();
        assert!(rel < 0.05, "relative Frobenius error {rel}");
    }

    #[test]
    fn clones_are_independent() {
        let theta = theta_default();
        let (gps, odom) = random_chain(8, 6, &theta);
        let run = Smoother::run_chain(&gps, &odom, &theta, &SmootherConfig::default(), &InitPolicy::DeadReckoning)
            .unwrap();
        let mut a = run.smoother.clone();
        let before = run.smoother.map_estimate().unwrap();
        a.add_timestep(vec![Factor::gps(6, 0.0, 0.0), Factor::odom(5, 6, Pose2::identity())], Pose2::identity())
            .unwrap();
        assert_eq!(run.smoother.map_estimate().unwrap(), before);
        let handle = std::thread::spawn(move || a.map_estimate().unwrap().len());
        assert_eq!(handle.join().unwrap(), 7);
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(16))]
        #[test]
        fn prop_state_invariants_after_every_update(seed in 0u64..1000, beta in 0.0f64..0.3) {
            let theta = NoiseParams::new([0.5, 0.5], [0.02, 0.02, 0.005]).unwrap();
            let (gps, odom) = random_chain(seed, 15, &theta);
            let graph = FactorGraph::chain(dead_reckoning(&gps, &odom).unwrap(), &gps, &odom).unwrap();
            let config = SmootherConfig { relin_threshold: beta, ..SmootherConfig::default() };
            let mut smoother = Smoother::new(theta, config);
            let mut arriving = vec![Vec::new(); graph.num_poses()];
            for f in graph.factors() {
                arriving[f.keys().into_iter().max().unwrap()].push(f.clone());
            }
            for (t, factors) in arriving.into_iter().enumerate() {
                let guess = if t == 0 { graph.initial()[0] } else { smoother.current(t - 1).compose(&odom[t - 1]) };
                smoother.add_timestep(factors, guess).unwrap();
                let dirty = smoother.dirty();
                for (v, d) in smoother.delta().iter().enumerate() {
                    if !dirty.contains(&v) {
                        proptest::prop_assert!(d.as_vector().amax() <= beta);
                    }
                }
                let r = smoother.sqrt_information().unwrap().to_dense();
                proptest::prop_assert!((0..r.nrows()).all(|k| r[(k, k)] > 0.0));
                let estimate = smoother.map_estimate().unwrap();
                for (v, x) in estimate.iter().enumerate() {
                    let composed = smoother.delta()[v].exp().compose(&smoother.linearization_points()[v]);
                    proptest::prop_assert!(max_tangent_gap(&[*x], &[composed]) <= 1e-12);
                }
            }
        }
    }
}
