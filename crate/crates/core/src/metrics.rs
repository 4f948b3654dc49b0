use crate::error::{Error, Result};
use crate::liegroup::{wrap_angle, Pose2};

/// Root-mean-square translation (m) and wrapped heading (rad) error.
pub fn rmse(estimated: &[Pose2], gt: &[Pose2]) -> Result<(f64, f64)> {
    if estimated.len() != gt.len() {
        return Err(Error::LengthMismatch {
            left: estimated.len(),
            right: gt.len(),
        });
    }
    if gt.is_empty() {
        return Err(Error::EmptyState);
    }
    let n = gt.len() as f64;
    let (mut trans, mut rot) = (0.0, 0.0);
    for (e, g) in estimated.iter().zip(gt) {
        trans += (e.translation() - g.translation()).norm_squared();
        rot += wrap_angle(e.theta() - g.theta()).powi(2);
    }
    Ok(((trans / n).sqrt(), (rot / n).sqrt()))
}

/// Mean of per-trajectory RMSE pairs.
pub fn mean_rmse(pairs: &[(f64, f64)]) -> (f64, f64) {
    if pairs.is_empty() {
        return (0.0, 0.0);
    }
    let n = pairs.len() as f64;
    let (t, r) = pairs
        .iter()
        .fold((0.0, 0.0), |(t, r), (a, b)| (t + a, r + b));
    (t / n, r / n)
}
