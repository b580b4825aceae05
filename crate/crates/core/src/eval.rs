//! Trajectory metrics and segmentation scoring.
//!
//! Absolute trajectory error (ATE) aligns the estimate to ground truth by the
//! first matched pose only — no least-squares fit — so accumulated drift stays
//! visible. Relative pose error (RPE) compares pose increments over a fixed
//! time delta. Both associate timestamps by nearest neighbour within
//! [`ASSOC_WINDOW`] seconds.

use crate::img::Image;
use crate::se3::Pose;
use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use std::fs;
use std::path::{Path, PathBuf};
use thiserror::Error;

/// Maximum timestamp difference for associating two trajectory entries (s).
pub const ASSOC_WINDOW: f64 = 0.02;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },
    #[error("timestamps not strictly increasing at entry {index}")]
    NotMonotonic { index: usize },
    #[error("no timestamp associations between the trajectories")]
    NoAssociation,
    #[error("fewer than {needed} associated pairs for this metric")]
    TooShort { needed: usize },
}

/// Timestamped camera or object poses, `T_world_body` per entry.
#[derive(Debug, Clone)]
pub struct Trajectory {
    entries: Vec<(f64, Pose)>,
}

impl Trajectory {
    pub fn new(entries: Vec<(f64, Pose)>) -> Result<Self, EvalError> {
        for i in 1..entries.len() {
            if entries[i].0 <= entries[i - 1].0 {
                return Err(EvalError::NotMonotonic { index: i });
            }
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[(f64, Pose)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Reads `timestamp tx ty tz qx qy qz qw` lines; `#` starts a comment.
    pub fn load(path: &Path) -> Result<Self, EvalError> {
        let text = fs::read_to_string(path)
            .map_err(|source| EvalError::Io { path: path.to_path_buf(), source })?;
        let mut entries = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let vals: Result<Vec<f64>, _> = line.split_whitespace().map(str::parse).collect();
            let vals = vals.map_err(|_| EvalError::Parse {
                path: path.to_path_buf(),
                line: idx + 1,
                msg: "non-numeric field".into(),
            })?;
            if vals.len() != 8 {
                return Err(EvalError::Parse {
                    path: path.to_path_buf(),
                    line: idx + 1,
                    msg: format!("expected 8 fields, got {}", vals.len()),
                });
            }
            let quat = Quaternion::new(vals[7], vals[4], vals[5], vals[6]); // w, x, y, z
            if quat.norm() < 1e-12 {
                return Err(EvalError::Parse {
                    path: path.to_path_buf(),
                    line: idx + 1,
                    msg: "zero quaternion".into(),
                });
            }
            let rot = UnitQuaternion::new_normalize(quat).to_rotation_matrix().into_inner();
            entries.push((
                vals[0],
                Pose { rotation: rot, translation: Vector3::new(vals[1], vals[2], vals[3]) },
            ));
        }
        Self::new(entries)
    }

    /// Writes the TUM trajectory format used by `load`.
    pub fn save(&self, path: &Path) -> Result<(), EvalError> {
        let mut text = String::from("# timestamp tx ty tz qx qy qz qw\n");
        for (ts, pose) in &self.entries {
            let q = UnitQuaternion::from_matrix(&pose.rotation);
            let t = pose.translation;
            text.push_str(&format!(
                "{:.6} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9}\n",
                ts, t.x, t.y, t.z, q.i, q.j, q.k, q.w
            ));
        }
        fs::write(path, text).map_err(|source| EvalError::Io { path: path.to_path_buf(), source })
    }
}

/// Indices of nearest-neighbour timestamp matches within `ASSOC_WINDOW`.
fn associate(gt: &Trajectory, est: &Trajectory) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for (ei, (ts, _)) in est.entries.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (gi, (gts, _)) in gt.entries.iter().enumerate() {
            let d = (gts - ts).abs();
            if d <= ASSOC_WINDOW && best.map_or(true, |(_, bd)| d < bd) {
                best = Some((gi, d));
            }
        }
        if let Some((gi, _)) = best {
            pairs.push((gi, ei));
        }
    }
    pairs
}

/// Absolute trajectory error RMSE in centimeters. The estimate is aligned by
/// left-multiplying `gt_0 * est_0^-1` (first matched pair), then translational
/// differences are accumulated over all matches.
pub fn ate_rmse(gt: &Trajectory, est: &Trajectory) -> Result<f64, EvalError> {
    let pairs = associate(gt, est);
    let (g0, e0) = *pairs.first().ok_or(EvalError::NoAssociation)?;
    let align = gt.entries[g0].1.compose(&est.entries[e0].1.inverse());
    let mut sum = 0.0;
    for &(gi, ei) in &pairs {
        let aligned = align.compose(&est.entries[ei].1);
        sum += (aligned.translation - gt.entries[gi].1.translation).norm_squared();
    }
    Ok((sum / pairs.len() as f64).sqrt() * 100.0)
}

/// Relative pose error RMSE in cm/s over pose increments `delta` seconds
/// apart. For each matched time `t` with a second match near `t + delta`, the
/// error is the translation of `(gt_t^-1 gt_t+d)^-1 (est_t^-1 est_t+d)`.
pub fn rpe_rmse(gt: &Trajectory, est: &Trajectory, delta: f64) -> Result<f64, EvalError> {
    assert!(delta > 0.0, "rpe delta must be positive");
    let pairs = associate(gt, est);
    if pairs.is_empty() {
        return Err(EvalError::NoAssociation);
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for &(gi, ei) in &pairs {
        let target = est.entries[ei].0 + delta;
        let mut best: Option<(usize, usize, f64)> = None;
        for &(gj, ej) in &pairs {
            let d = (est.entries[ej].0 - target).abs();
            if d <= ASSOC_WINDOW && best.map_or(true, |(_, _, bd)| d < bd) {
                best = Some((gj, ej, d));
            }
        }
        if let Some((gj, ej, _)) = best {
            let gt_inc = gt.entries[gi].1.inverse().compose(&gt.entries[gj].1);
            let est_inc = est.entries[ei].1.inverse().compose(&est.entries[ej].1);
            let err = gt_inc.inverse().compose(&est_inc);
            sum += err.translation.norm_squared();
            n += 1;
        }
    }
    if n == 0 {
        return Err(EvalError::TooShort { needed: 2 });
    }
    Ok((sum / n as f64).sqrt() * 100.0 / delta)
}

/// IoU of the predicted dynamic region `{gamma < 0.5}` against a ground-truth
/// dynamic mask, counted over valid-depth pixels only. Returns 1.0 when both
/// regions are empty.
pub fn seg_iou(gamma: &Image<f32>, gt_dynamic: &Image<bool>, depth: &Image<f32>) -> f64 {
    assert_eq!(gamma.width(), gt_dynamic.width());
    assert_eq!(gamma.height(), gt_dynamic.height());
    let mut intersection = 0usize;
    let mut union = 0usize;
    for y in 0..gamma.height() {
        for x in 0..gamma.width() {
            if depth.get(x, y) <= 0.0 {
                continue;
            }
            let pred = gamma.get(x, y) < 0.5;
            let truth = gt_dynamic.get(x, y);
            if pred || truth {
                union += 1;
            }
            if pred && truth {
                intersection += 1;
            }
        }
    }
    if union == 0 {
        1.0
    } else {
        intersection as f64 / union as f64
    }
}
