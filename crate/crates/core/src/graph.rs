//! Factor-graph problem definition: pose variables, GPS/odometry factors and
//! the learnable noise parameters that weight them.
//!
//! Noise parameters are per-channel variances. A factor's residual `r` is
//! weighted as `rᵀ diag(1/θ) r`; perturbing a parameter is plain addition on
//! the variance entry.

use std::collections::VecDeque;
use std::fmt;
use std::path::Path;

use nalgebra::{DMatrix, DVector, Matrix3, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::liegroup::{wrap_angle, Pose2};

/// Lower bound enforced on every variance entry.
pub const EPS_VAR: f64 = 1e-8;

/// Learnable per-channel variances, shared by every factor of a class.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseParams {
    /// GPS position variances (m², m²).
    pub gps: [f64; 2],
    /// Odometry tangent variances (m², m², rad²).
    pub odom: [f64; 3],
}

impl NoiseParams {
    pub const DIM: usize = 5;
    pub const LABELS: [&'static str; 5] = ["gps0", "gps1", "odom0", "odom1", "odom2"];

    pub fn new(gps: [f64; 2], odom: [f64; 3]) -> Result<Self> {
        let theta = Self { gps, odom };
        theta.validate()?;
        Ok(theta)
    }

    pub fn uniform(value: f64) -> Self {
        Self {
            gps: [value; 2],
            odom: [value; 3],
        }
    }

    /// Flattened as `[gps0, gps1, odom0, odom1, odom2]`.
    pub fn to_array(&self) -> [f64; 5] {
        [self.gps[0], self.gps[1], self.odom[0], self.odom[1], self.odom[2]]
    }

    pub fn from_array(v: [f64; 5]) -> Self {
        Self {
            gps: [v[0], v[1]],
            odom: [v[2], v[3], v[4]],
        }
    }

    pub fn to_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.to_array())
    }

    pub fn from_slice(v: &[f64]) -> Result<Self> {
        let arr: [f64; 5] = v.try_into().map_err(|_| Error::LengthMismatch {
            left: v.len(),
            right: Self::DIM,
        })?;
        Ok(Self::from_array(arr))
    }

    pub fn validate(&self) -> Result<()> {
        for (label, v) in Self::LABELS.iter().zip(self.to_array()) {
            if !v.is_finite() || v < EPS_VAR {
                return Err(Error::Config(format!(
                    "noise parameter {label} = {v} must be finite and >= {EPS_VAR}"
                )));
            }
        }
        Ok(())
    }

    /// Entry-wise `max(θ, EPS_VAR)`.
    pub fn projected(&self) -> Self {
        Self::from_array(self.to_array().map(|v| v.max(EPS_VAR)))
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self::from_array(self.to_array().map(|v| v * factor))
    }

    /// Copy with parameter `k` shifted by `tau`, projected back to the floor.
    pub fn perturbed(&self, k: usize, tau: f64) -> Self {
        let mut v = self.to_array();
        v[k] += tau;
        Self::from_array(v).projected()
    }

    pub fn norm_squared(&self) -> f64 {
        self.to_array().iter().map(|v| v * v).sum()
    }

    pub fn channel(&self, class: NoiseClass) -> &[f64] {
        match class {
            NoiseClass::Gps => &self.gps,
            NoiseClass::Odom => &self.odom,
        }
    }

    /// Offset of a class's first entry in the flattened vector.
    pub fn offset(class: NoiseClass) -> usize {
        match class {
            NoiseClass::Gps => 0,
            NoiseClass::Odom => 2,
        }
    }

    pub fn write_file(&self, path: &Path) -> Result<()> {
        let labeled = LabeledTheta::from(*self);
        let text = serde_json::to_string_pretty(&labeled).expect("theta serializes");
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn read_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let labeled: LabeledTheta = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })?;
        let theta = NoiseParams::from(labeled);
        theta.validate()?;
        Ok(theta)
    }
}

impl fmt::Display for NoiseParams {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let v = self.to_array();
        write!(
            f,
            "gps=({:.6e}, {:.6e}) odom=({:.6e}, {:.6e}, {:.6e})",
            v[0], v[1], v[2], v[3], v[4]
        )
    }
}

/// On-disk form of [`NoiseParams`]: one labeled entry per channel.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LabeledTheta {
    gps0: f64,
    gps1: f64,
    odom0: f64,
    odom1: f64,
    odom2: f64,
}

impl From<NoiseParams> for LabeledTheta {
    fn from(t: NoiseParams) -> Self {
        let [gps0, gps1, odom0, odom1, odom2] = t.to_array();
        Self {
            gps0,
            gps1,
            odom0,
            odom1,
            odom2,
        }
    }
}

impl From<LabeledTheta> for NoiseParams {
    fn from(l: LabeledTheta) -> Self {
        NoiseParams::from_array([l.gps0, l.gps1, l.odom0, l.odom1, l.odom2])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NoiseClass {
    Gps,
    Odom,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Factor {
    /// Position measurement of a single pose.
    Gps { pose: usize, z: Vector2<f64> },
    /// Relative motion `prev⁻¹ ∘ next`.
    Odom { prev: usize, next: usize, z: Pose2 },
    /// Full-pose prior weighted with the odometry variances.
    PosePrior { pose: usize, z: Pose2 },
    /// Heading prior. Without a fixed variance it shares the odometry
    /// heading variance, so scaling every learnable variance together
    /// leaves the minimizer unchanged.
    HeadingPrior {
        pose: usize,
        heading: f64,
        variance: Option<f64>,
    },
}

/// Jacobian blocks (one per connected pose, with respect to a left
/// perturbation of that pose) and the residual at the linearization point.
#[derive(Clone, Debug)]
pub struct Linearization {
    pub blocks: Vec<(usize, DMatrix<f64>)>,
    pub residual: DVector<f64>,
}

impl Factor {
    pub fn gps(pose: usize, x: f64, y: f64) -> Self {
        Factor::Gps {
            pose,
            z: Vector2::new(x, y),
        }
    }

    pub fn odom(prev: usize, next: usize, z: Pose2) -> Self {
        Factor::Odom { prev, next, z }
    }

    /// Heading prior sharing the odometry heading variance. Position-only
    /// GPS leaves the first heading unobservable until the robot moves, so
    /// every chain carries one on pose 0.
    pub fn anchor(pose: usize, heading: f64) -> Self {
        Factor::HeadingPrior {
            pose,
            heading,
            variance: None,
        }
    }

    pub fn keys(&self) -> Vec<usize> {
        match *self {
            Factor::Gps { pose, .. }
            | Factor::PosePrior { pose, .. }
            | Factor::HeadingPrior { pose, .. } => vec![pose],
            Factor::Odom { prev, next, .. } => vec![prev, next],
        }
    }

    pub fn class(&self) -> Option<NoiseClass> {
        match self {
            Factor::Gps { .. } => Some(NoiseClass::Gps),
            Factor::Odom { .. }
            | Factor::PosePrior { .. }
            | Factor::HeadingPrior { variance: None, .. } => Some(NoiseClass::Odom),
            Factor::HeadingPrior { variance: Some(_), .. } => None,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Factor::Gps { .. } => 2,
            Factor::Odom { .. } | Factor::PosePrior { .. } => 3,
            Factor::HeadingPrior { .. } => 1,
        }
    }

    /// Index into the flattened parameters for each residual row, `None`
    /// for rows with a fixed variance.
    pub fn parameter_indices(&self) -> Vec<Option<usize>> {
        match self {
            Factor::Gps { .. } => vec![Some(0), Some(1)],
            Factor::Odom { .. } | Factor::PosePrior { .. } => vec![Some(2), Some(3), Some(4)],
            Factor::HeadingPrior { variance: None, .. } => vec![Some(4)],
            Factor::HeadingPrior { variance: Some(_), .. } => vec![None],
        }
    }

    pub fn variances(&self, theta: &NoiseParams) -> Vec<f64> {
        let values = theta.to_array();
        let fixed = match self {
            Factor::HeadingPrior { variance, .. } => *variance,
            _ => None,
        };
        self.parameter_indices()
            .into_iter()
            .map(|k| k.map_or_else(|| fixed.expect("fixed variance"), |k| values[k]))
            .collect()
    }

    fn lookup(states: &[Pose2], id: usize) -> Result<&Pose2> {
        states.get(id).ok_or(Error::UnknownVariable { id })
    }

    /// Unwhitened `g(x) − z`.
    pub fn residual(&self, states: &[Pose2]) -> Result<DVector<f64>> {
        let r = match self {
            Factor::Gps { pose, z } => {
                let p = Self::lookup(states, *pose)?;
                DVector::from_column_slice(&[p.x() - z[0], p.y() - z[1]])
            }
            Factor::Odom { prev, next, z } => {
                let xp = Self::lookup(states, *prev)?;
                let xn = Self::lookup(states, *next)?;
                let t = z.inverse().compose(&xp.between(xn)).log();
                DVector::from_column_slice(&[t.rho_x, t.rho_y, t.phi])
            }
            Factor::PosePrior { pose, z } => {
                let t = z.inverse().compose(Self::lookup(states, *pose)?).log();
                DVector::from_column_slice(&[t.rho_x, t.rho_y, t.phi])
            }
            Factor::HeadingPrior { pose, heading, .. } => {
                let p = Self::lookup(states, *pose)?;
                DVector::from_element(1, wrap_angle(p.theta() - heading))
            }
        };
        Ok(r)
    }

    /// Residual divided channel-wise by the standard deviations.
    pub fn whitened_residual(&self, states: &[Pose2], theta: &NoiseParams) -> Result<DVector<f64>> {
        let mut r = self.residual(states)?;
        for (ri, v) in r.iter_mut().zip(self.variances(theta)) {
            *ri /= v.sqrt();
        }
        Ok(r)
    }

    /// Analytic Jacobians of the unwhitened residual.
    pub fn linearize(&self, states: &[Pose2]) -> Result<Linearization> {
        let residual = self.residual(states)?;
        let blocks = match self {
            Factor::Gps { pose, .. } => {
                let p = Self::lookup(states, *pose)?;
                // d/dτ of the translation of Exp(τ) ∘ p at τ = 0
                let j = DMatrix::from_row_slice(2, 3, &[1.0, 0.0, -p.y(), 0.0, 1.0, p.x()]);
                vec![(*pose, j)]
            }
            Factor::Odom { prev, next, .. } => {
                let xn = Self::lookup(states, *next)?;
                let jn = log_jacobian(&residual, xn);
                vec![(*prev, -&jn), (*next, jn)]
            }
            Factor::PosePrior { pose, .. } => {
                let p = Self::lookup(states, *pose)?;
                vec![(*pose, log_jacobian(&residual, p))]
            }
            Factor::HeadingPrior { pose, .. } => {
                vec![(*pose, DMatrix::from_row_slice(1, 3, &[0.0, 0.0, 1.0]))]
            }
        };
        Ok(Linearization { blocks, residual })
    }

    /// [`linearize`](Self::linearize) with rows scaled by `1/σ`.
    pub fn linearize_whitened(&self, states: &[Pose2], theta: &NoiseParams) -> Result<Linearization> {
        let mut lin = self.linearize(states)?;
        for (row, v) in self.variances(theta).into_iter().enumerate() {
            let w = 1.0 / v.sqrt();
            lin.residual[row] *= w;
            for (_, block) in lin.blocks.iter_mut() {
                block.row_mut(row).scale_mut(w);
            }
        }
        Ok(lin)
    }
}

/// `d Log(E ∘ Exp(Ad(x⁻¹) τ)) / dτ = Jr⁻¹(Log E) · Ad(x⁻¹)`.
fn log_jacobian(residual: &DVector<f64>, x: &Pose2) -> DMatrix<f64> {
    let tau = crate::liegroup::TangentVec::new(residual[0], residual[1], residual[2]);
    let j: Matrix3<f64> = tau.right_jacobian_inv() * x.inverse().adjoint();
    DMatrix::from_iterator(3, 3, j.iter().copied())
}

/// Pose variables with initial values plus the factors over them.
#[derive(Clone, Debug)]
pub struct FactorGraph {
    initial: Vec<Pose2>,
    factors: Vec<Factor>,
}

impl FactorGraph {
    /// Builds a graph, rejecting unknown variable ids, self-loops and
    /// disconnected variables.
    pub fn new(initial: Vec<Pose2>, factors: Vec<Factor>) -> Result<Self> {
        let n = initial.len();
        if n == 0 {
            return Err(Error::InvalidGraph("graph has no variables".into()));
        }
        if let Some(p) = initial.iter().position(|p| !p.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("initial value of variable {p}"),
            });
        }
        let mut adjacency = vec![Vec::new(); n];
        for f in &factors {
            let keys = f.keys();
            for &k in &keys {
                if k >= n {
                    return Err(Error::UnknownVariable { id: k });
                }
            }
            if let Factor::Odom { prev, next, .. } = f {
                if prev == next {
                    return Err(Error::InvalidGraph(format!(
                        "odometry factor connects variable {prev} to itself"
                    )));
                }
                adjacency[*prev].push(*next);
                adjacency[*next].push(*prev);
            }
        }
        let mut seen = vec![false; n];
        let mut queue = VecDeque::from([0usize]);
        seen[0] = true;
        while let Some(v) = queue.pop_front() {
            for &w in &adjacency[v] {
                if !seen[w] {
                    seen[w] = true;
                    queue.push_back(w);
                }
            }
        }
        if let Some(v) = seen.iter().position(|s| !s) {
            return Err(Error::InvalidGraph(format!(
                "variable {v} is not connected to variable 0"
            )));
        }
        Ok(Self { initial, factors })
    }

    /// Standard chain: anchor on pose 0, one GPS factor per pose and one
    /// odometry factor per consecutive pair. `odom[i]` links poses `i` and
    /// `i + 1`.
    pub fn chain(initial: Vec<Pose2>, gps: &[Vector2<f64>], odom: &[Pose2]) -> Result<Self> {
        if gps.len() != initial.len() {
            return Err(Error::LengthMismatch {
                left: gps.len(),
                right: initial.len(),
            });
        }
        if odom.len() + 1 != initial.len() {
            return Err(Error::LengthMismatch {
                left: odom.len() + 1,
                right: initial.len(),
            });
        }
        let mut factors = Vec::with_capacity(2 * gps.len());
        factors.push(Factor::anchor(0, 0.0));
        for (i, z) in gps.iter().enumerate() {
            if i > 0 {
                factors.push(Factor::odom(i - 1, i, odom[i - 1]));
            }
            factors.push(Factor::Gps { pose: i, z: *z });
        }
        Self::new(initial, factors)
    }

    /// Checks the chain topology: exactly one GPS factor per pose, one
    /// odometry factor per consecutive pair, optionally one heading anchor
    /// on pose 0, and nothing else.
    pub fn validate_chain(&self) -> Result<()> {
        let n = self.initial.len();
        let mut gps = vec![0usize; n];
        let mut odom = vec![0usize; n.saturating_sub(1)];
        let mut anchors = 0;
        for f in &self.factors {
            match *f {
                Factor::Gps { pose, .. } => gps[pose] += 1,
                Factor::Odom { prev, next, .. } if next == prev + 1 => odom[prev] += 1,
                Factor::HeadingPrior { pose: 0, .. } => anchors += 1,
                ref other => {
                    return Err(Error::InvalidGraph(format!(
                        "factor {other:?} does not belong to a GPS/odometry chain"
                    )))
                }
            }
        }
        if let Some(i) = gps.iter().position(|&c| c != 1) {
            return Err(Error::InvalidGraph(format!(
                "pose {i} has {} GPS factors, expected 1",
                gps[i]
            )));
        }
        if let Some(i) = odom.iter().position(|&c| c != 1) {
            return Err(Error::InvalidGraph(format!(
                "poses {i}->{} have {} odometry factors, expected 1",
                i + 1,
                odom[i]
            )));
        }
        if anchors > 1 {
            return Err(Error::InvalidGraph("more than one heading anchor".into()));
        }
        Ok(())
    }

    pub fn num_poses(&self) -> usize {
        self.initial.len()
    }

    pub fn initial(&self) -> &[Pose2] {
        &self.initial
    }

    pub fn factors(&self) -> &[Factor] {
        &self.factors
    }

    /// `½ Σ ‖whitened residual‖²`.
    pub fn total_objective(&self, states: &[Pose2], theta: &NoiseParams) -> Result<f64> {
        total_objective(&self.factors, states, theta)
    }
}

pub fn total_objective(factors: &[Factor], states: &[Pose2], theta: &NoiseParams) -> Result<f64> {
    let mut sum = 0.0;
    for f in factors {
        sum += f.whitened_residual(states, theta)?.norm_squared();
    }
    Ok(0.5 * sum)
}
