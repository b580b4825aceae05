//! Joint two-body motion estimation and segmentation for one frame pair.
//!
//! The solver alternates, coarse to fine, between three blocks of one shared
//! objective: the camera motion fitted to pixels weighted by their static
//! score, the object motion fitted to the complement, and a per-cluster
//! quadratic subproblem updating the scores under spatial smoothness and a
//! temporal prior warped from the previous frame's segmentation.

use crate::alignment::{
    estimate_motion, estimate_motion_weighted, residuals_with_labels, robust_sample_cost, AlignError, RobustConfig,
};
use crate::clustering::{cluster_frame, ClusterError, ClusterSet, INVALID_LABEL};
use crate::frame::{FramePyramid, RgbdFrame};
use crate::img::Image;
use crate::se3::{twist_distance, Pose, Twist};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SolveError {
    #[error(transparent)]
    Align(#[from] AlignError),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error("frame pyramids have different depths")]
    PyramidMismatch,
    #[error("previous segmentation is {got_w}x{got_h}, frames are {want_w}x{want_h}")]
    SegSizeMismatch { got_w: usize, got_h: usize, want_w: usize, want_h: usize },
}

/// Motion priors for one frame pair, both expressed as inter-frame twists in
/// the previous camera frame, plus the thresholds that interpret them.
#[derive(Debug, Clone)]
pub struct PriorPair {
    pub xi_s_prior: Twist,
    pub xi_d_prior: Twist,
    /// Prior-separation gate: below this the pair is treated as all-static.
    pub d_hat: f64,
    /// Prior-noise threshold for switching the prior energy term on.
    pub n_hat: f64,
    /// Weight of the smoothness and temporal terms in the score subproblem.
    pub lambda_r: f64,
    /// False when the camera prior is a synthesized fallback (e.g. constant
    /// velocity): the twist still initializes the solve, but the prior energy
    /// term stays off and the gate cannot fire.
    pub regularize_s: bool,
    /// Same for the object prior.
    pub regularize_d: bool,
}

impl PriorPair {
    pub fn new(xi_s_prior: Twist, xi_d_prior: Twist) -> Self {
        PriorPair {
            xi_s_prior,
            xi_d_prior,
            d_hat: 0.01,
            n_hat: 0.01,
            lambda_r: 2.0,
            regularize_s: true,
            regularize_d: true,
        }
    }
}

/// Per-pixel static score image; 1 = static, 0 = dynamic. Pixels without
/// valid depth carry 1 so they never feed the dynamic body.
#[derive(Debug, Clone)]
pub struct Segmentation {
    pub gamma_image: Image<f32>,
}

impl Segmentation {
    pub fn all_static(width: usize, height: usize) -> Self {
        Segmentation { gamma_image: Image::new_fill(width, height, 1.0) }
    }

    /// Builds a segmentation from a boolean dynamic mask (true = dynamic).
    pub fn from_mask(mask: &Image<bool>) -> Self {
        let data = mask.data().iter().map(|&d| if d { 0.0 } else { 1.0 }).collect();
        Segmentation { gamma_image: Image::from_vec(mask.width(), mask.height(), data) }
    }
}

/// Output of [`solve_joint`] for one frame pair.
#[derive(Debug, Clone)]
pub struct JointResult {
    /// Camera increment: maps current-camera coordinates into the previous
    /// camera frame.
    pub xi_s: Twist,
    /// Object increment in the same chart.
    pub xi_d: Twist,
    /// Per-cluster static scores.
    pub gamma: Vec<f64>,
    /// Scores spread to pixels; invalid depth carries 1.
    pub segmentation: Segmentation,
    /// True when the prior gate (or single-body configuration) bypassed
    /// segmentation entirely.
    pub gated_static: bool,
    /// True when the dynamic body kept its prior for lack of support.
    pub low_support: bool,
    /// Value of the objective that was actually minimized, at the solution,
    /// evaluated at full resolution.
    pub final_cost: f64,
}

#[derive(Debug, Clone)]
pub struct SolverConfig {
    pub robust: RobustConfig,
    /// Alternation rounds per pyramid level.
    pub outer_iters: usize,
    /// Gauss–Newton iterations per motion estimate.
    pub gn_iters: usize,
    /// Coordinate-descent sweeps in the score subproblem.
    pub gamma_sweeps: usize,
    /// Cluster count for the over-segmentation.
    pub clusters: usize,
    pub cluster_iters: usize,
    pub cluster_seed: u64,
    /// 3-D gap bounding cluster adjacency, meters.
    pub adjacency_delta: f64,
    /// Minimum fraction of labeled pixels scoring dynamic for the object
    /// motion to be estimated from data.
    pub support_min: f64,
    /// Skip segmentation and fit one rigid body to everything.
    pub single_body: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            robust: RobustConfig::default(),
            outer_iters: 3,
            gn_iters: 6,
            gamma_sweeps: 10,
            clusters: 24,
            cluster_iters: 10,
            cluster_seed: 1,
            adjacency_delta: 0.10,
            support_min: 0.01,
            single_body: false,
        }
    }
}

/// True when the two priors are so close that segmenting is pointless: the
/// whole image is treated as one static body. Strict inequality, so a
/// separation of exactly `d_hat` keeps segmentation on.
pub fn motion_gate(priors: &PriorPair) -> bool {
    twist_distance(&priors.xi_s_prior, &priors.xi_d_prior) < priors.d_hat
}

/// Prior energy switch: 1 when the estimate has wandered more than `n_hat`
/// from its prior (pull it back), 0 otherwise (prior adds nothing).
pub fn adaptive_lambda(xi: &Twist, prior: &Twist, n_hat: f64) -> f64 {
    if twist_distance(xi, prior) > n_hat {
        1.0
    } else {
        0.0
    }
}

/// Per-cluster mean of the previous segmentation sampled where each pixel
/// lands under the object motion; the shared implementation takes a scale
/// mapping level pixel coordinates to full-resolution ones.
/// Samples a segmentation at sub-pixel coordinates, tolerating the ~1-ulp
/// drift an identity warp picks up at the image border. `None` when truly
/// out of bounds.
fn sample_segmentation(seg: &Image<f32>, u: f64, v: f64) -> Option<f64> {
    const EDGE_EPS: f64 = 1e-9;
    let max_u = (seg.width() - 1) as f64;
    let max_v = (seg.height() - 1) as f64;
    if u < -EDGE_EPS || u > max_u + EDGE_EPS || v < -EDGE_EPS || v > max_v + EDGE_EPS {
        return None;
    }
    Some(seg.bilinear(u.clamp(0.0, max_u), v.clamp(0.0, max_v)))
}

fn temporal_prior_scaled(
    prev_seg: &Segmentation,
    frame: &RgbdFrame,
    labels: &Image<u32>,
    k: usize,
    alive: &[bool],
    xi_d: &Twist,
    scale: f64,
) -> Vec<f64> {
    let t = Pose::exp(xi_d);
    let seg = &prev_seg.gamma_image;
    let mut sums = vec![0.0f64; k];
    let mut counts = vec![0usize; k];
    for y in 0..frame.height() {
        for x in 0..frame.width() {
            let label = labels.get(x, y);
            if label == INVALID_LABEL {
                continue;
            }
            let value = crate::alignment::warp((x, y), &t, frame)
                .and_then(|(u, v)| sample_segmentation(seg, u * scale, v * scale))
                // Newly revealed or unobservable pixels say nothing about
                // either body: count them as neutral.
                .unwrap_or(0.5);
            sums[label as usize] += value;
            counts[label as usize] += 1;
        }
    }
    (0..k)
        .map(|i| {
            if !alive[i] {
                1.0
            } else if counts[i] == 0 {
                0.5
            } else {
                sums[i] / counts[i] as f64
            }
        })
        .collect()
}

/// Warps every cluster of the current frame into the previous frame's
/// segmentation and averages the sampled scores; out-of-view pixels count as
/// the neutral 0.5 and dead clusters are pinned static.
pub fn temporal_prior(prev_seg: &Segmentation, frame: &RgbdFrame, clusters: &ClusterSet, xi_d: &Twist) -> Vec<f64> {
    temporal_prior_scaled(prev_seg, frame, &clusters.labels, clusters.k, &clusters.alive, xi_d, 1.0)
}

/// Objective of the score subproblem: per-cluster data terms plus smoothness
/// over adjacent clusters plus attachment to the temporal prior.
pub fn gamma_objective(
    a: &[f64],
    b: &[f64],
    adjacency: &[bool],
    gamma_tilde: &[f64],
    lambda_r: f64,
    gamma: &[f64],
) -> f64 {
    let k = a.len();
    let mut cost = 0.0;
    for i in 0..k {
        cost += gamma[i] * a[i] + (1.0 - gamma[i]) * b[i];
        cost += lambda_r * (gamma[i] - gamma_tilde[i]) * (gamma[i] - gamma_tilde[i]);
        for j in (i + 1)..k {
            if adjacency[i * k + j] {
                cost += lambda_r * (gamma[i] - gamma[j]) * (gamma[i] - gamma[j]);
            }
        }
    }
    cost
}

/// Minimizes [`gamma_objective`] over the unit box by projected coordinate
/// descent, visiting clusters in index order for a fixed number of sweeps.
/// With `lambda_r = 0` the objective is separable and linear, so each score
/// snaps to whichever body fits better (ties go static).
pub fn gamma_subproblem(
    a: &[f64],
    b: &[f64],
    adjacency: &[bool],
    gamma_tilde: &[f64],
    lambda_r: f64,
    sweeps: usize,
) -> Vec<f64> {
    let k = a.len();
    if lambda_r == 0.0 {
        return (0..k).map(|i| if a[i] <= b[i] { 1.0 } else { 0.0 }).collect();
    }
    let degrees: Vec<f64> = (0..k)
        .map(|i| (0..k).filter(|&j| adjacency[i * k + j]).count() as f64)
        .collect();
    let mut gamma = gamma_tilde.to_vec();
    for _ in 0..sweeps {
        for i in 0..k {
            let neighbor_sum: f64 = (0..k).filter(|&j| adjacency[i * k + j]).map(|j| gamma[j]).sum();
            let numer = 2.0 * lambda_r * neighbor_sum + 2.0 * lambda_r * gamma_tilde[i] - (a[i] - b[i]);
            let denom = 2.0 * lambda_r * (degrees[i] + 1.0);
            gamma[i] = (numer / denom).clamp(0.0, 1.0);
        }
    }
    gamma
}

/// Spreads per-cluster scores to pixels; invalid-depth pixels carry 1.
pub fn pixelwise_segmentation(clusters: &ClusterSet, gamma: &[f64]) -> Segmentation {
    let labels = &clusters.labels;
    let data = labels
        .data()
        .iter()
        .map(|&l| if l == INVALID_LABEL { 1.0 } else { gamma[l as usize] as f32 })
        .collect();
    Segmentation { gamma_image: Image::from_vec(labels.width(), labels.height(), data) }
}

/// Nearest-neighbor label downsampling: level pixel (x, y) takes the
/// full-resolution label at (x << level, y << level), matching the pyramid's
/// intrinsics convention.
fn downsample_labels(full: &Image<u32>, level: usize, width: usize, height: usize) -> Image<u32> {
    let mut out = Image::new_fill(width, height, INVALID_LABEL);
    for y in 0..height {
        for x in 0..width {
            out.set(x, y, full.get(x << level, y << level));
        }
    }
    out
}

/// Per-cluster robust residual sums under one motion hypothesis (no score
/// weighting: these are the raw per-body fits the score step arbitrates).
fn cluster_cost_sums(
    source: &RgbdFrame,
    target: &RgbdFrame,
    xi: &Twist,
    labels: &Image<u32>,
    k: usize,
    robust: &RobustConfig,
) -> Vec<f64> {
    let mut sums = vec![0.0f64; k];
    for s in residuals_with_labels(source, target, &Pose::exp(xi), robust, labels) {
        sums[s.cluster as usize] += robust_sample_cost(&s, robust);
    }
    sums
}

/// Single-body path: fit one motion to every pixel, coarse to fine, with the
/// camera prior as both initialization and (adaptively) regularization.
fn solve_single_body(
    prev: &FramePyramid,
    curr: &FramePyramid,
    priors: &PriorPair,
    cfg: &SolverConfig,
) -> Result<JointResult, SolveError> {
    let mut xi = priors.xi_s_prior;
    let mut lambda_s = 0.0;
    for level in (0..curr.levels.len()).rev() {
        let src = &curr.levels[level];
        let weights = Image::new_fill(src.width(), src.height(), 1.0f64);
        lambda_s = if priors.regularize_s {
            adaptive_lambda(&xi, &priors.xi_s_prior, priors.n_hat)
        } else {
            0.0
        };
        xi = estimate_motion_weighted(
            src,
            &prev.levels[level],
            &weights,
            &xi,
            &priors.xi_s_prior,
            lambda_s,
            &cfg.robust,
            cfg.gn_iters,
        )?;
    }

    let full = curr.full();
    let mut final_cost = 0.0;
    let t = Pose::exp(&xi);
    for s in crate::alignment::residuals(full, prev.full(), &t, &cfg.robust) {
        final_cost += robust_sample_cost(&s, &cfg.robust);
    }
    if lambda_s > 0.0 {
        let d = twist_distance(&xi, &priors.xi_s_prior);
        final_cost += lambda_s * d * d;
    }

    Ok(JointResult {
        xi_s: xi,
        xi_d: xi,
        gamma: vec![1.0; cfg.clusters],
        segmentation: Segmentation::all_static(full.width(), full.height()),
        gated_static: true,
        low_support: false,
        final_cost,
    })
}

/// Estimates camera motion, object motion, and the static/dynamic
/// segmentation of the current frame against the previous one.
///
/// When the two priors agree within `d_hat` (or single-body mode is forced),
/// segmentation is skipped and one motion explains everything. Otherwise the
/// three blocks are alternated per pyramid level, coarsest first; clusters
/// are computed once at full resolution and their labels downsampled.
pub fn solve_joint(
    prev: &FramePyramid,
    curr: &FramePyramid,
    priors: &PriorPair,
    prev_seg: &Segmentation,
    cfg: &SolverConfig,
) -> Result<JointResult, SolveError> {
    if prev.levels.len() != curr.levels.len() || prev.levels.is_empty() {
        return Err(SolveError::PyramidMismatch);
    }
    let full = curr.full();
    let seg = &prev_seg.gamma_image;
    if seg.width() != full.width() || seg.height() != full.height() {
        return Err(SolveError::SegSizeMismatch {
            got_w: seg.width(),
            got_h: seg.height(),
            want_w: full.width(),
            want_h: full.height(),
        });
    }

    let gate = priors.regularize_s && priors.regularize_d && motion_gate(priors);
    if cfg.single_body || gate {
        return solve_single_body(prev, curr, priors, cfg);
    }

    let clusters = cluster_frame(full, cfg.clusters, cfg.cluster_iters, cfg.cluster_seed, cfg.adjacency_delta)?;
    let k = clusters.k;
    let n_levels = curr.levels.len();
    let level_labels: Vec<Image<u32>> = (0..n_levels)
        .map(|l| {
            let f = &curr.levels[l];
            downsample_labels(&clusters.labels, l, f.width(), f.height())
        })
        .collect();

    let coarsest = n_levels - 1;
    let mut gamma = temporal_prior_scaled(
        prev_seg,
        &curr.levels[coarsest],
        &level_labels[coarsest],
        k,
        &clusters.alive,
        &priors.xi_d_prior,
        (1usize << coarsest) as f64,
    );
    let mut xi_s = priors.xi_s_prior;
    let mut xi_d = priors.xi_d_prior;
    let mut lambda_s = 0.0;
    let mut lambda_d = 0.0;
    let mut low_support = false;

    for level in (0..n_levels).rev() {
        let src = &curr.levels[level];
        let tgt = &prev.levels[level];
        let labels = &level_labels[level];
        let scale = (1usize << level) as f64;

        for _ in 0..cfg.outer_iters {
            lambda_s = if priors.regularize_s {
                adaptive_lambda(&xi_s, &priors.xi_s_prior, priors.n_hat)
            } else {
                0.0
            };
            lambda_d = if priors.regularize_d {
                adaptive_lambda(&xi_d, &priors.xi_d_prior, priors.n_hat)
            } else {
                0.0
            };

            xi_s = estimate_motion(src, tgt, &gamma, labels, &xi_s, &priors.xi_s_prior, lambda_s, &cfg.robust, cfg.gn_iters)?;

            let mut labeled = 0usize;
            let mut dynamic = 0usize;
            for &l in labels.data() {
                if l != INVALID_LABEL {
                    labeled += 1;
                    if gamma[l as usize] < 0.5 {
                        dynamic += 1;
                    }
                }
            }
            low_support = labeled == 0 || (dynamic as f64) < cfg.support_min * labeled as f64;
            if low_support {
                // Too few pixels vote dynamic to constrain a pose; the prior
                // is the only information left.
                xi_d = priors.xi_d_prior;
            } else {
                let inv_gamma: Vec<f64> = gamma.iter().map(|g| 1.0 - g).collect();
                xi_d = estimate_motion(src, tgt, &inv_gamma, labels, &xi_d, &priors.xi_d_prior, lambda_d, &cfg.robust, cfg.gn_iters)?;
            }

            let a = cluster_cost_sums(src, tgt, &xi_s, labels, k, &cfg.robust);
            let b = cluster_cost_sums(src, tgt, &xi_d, labels, k, &cfg.robust);
            let gamma_tilde = temporal_prior_scaled(prev_seg, src, labels, k, &clusters.alive, &xi_d, scale);
            gamma = gamma_subproblem(&a, &b, &clusters.adjacency, &gamma_tilde, priors.lambda_r, cfg.gamma_sweeps);
        }
    }

    // Full objective at the solution, full resolution.
    let a = cluster_cost_sums(full, prev.full(), &xi_s, &clusters.labels, k, &cfg.robust);
    let b = cluster_cost_sums(full, prev.full(), &xi_d, &clusters.labels, k, &cfg.robust);
    let gamma_tilde = temporal_prior(prev_seg, full, &clusters, &xi_d);
    let mut final_cost = gamma_objective(&a, &b, &clusters.adjacency, &gamma_tilde, priors.lambda_r, &gamma);
    if lambda_s > 0.0 {
        let d = twist_distance(&xi_s, &priors.xi_s_prior);
        final_cost += lambda_s * d * d;
    }
    if lambda_d > 0.0 {
        let d = twist_distance(&xi_d, &priors.xi_d_prior);
        final_cost += lambda_d * d * d;
    }

    let segmentation = pixelwise_segmentation(&clusters, &gamma);
    Ok(JointResult { xi_s, xi_d, gamma, segmentation, gated_static: false, low_support, final_cost })
}
