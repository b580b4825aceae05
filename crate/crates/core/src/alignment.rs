//! Dense direct RGB-D alignment: warping, robust photometric/depth residuals,
//! and single-rigid-body motion estimation by iteratively reweighted
//! Gauss–Newton with Levenberg damping.
//!
//! Chart convention used across the crate: the pose passed to these routines
//! maps points from the *source* camera frame (whose pixels are iterated — in
//! the pipeline, the newer frame of a pair) into the *target* camera frame
//! (sampled at the warped, sub-pixel location). Pose increments are applied
//! by left multiplication, `T <- exp(delta) * T`.

use crate::clustering::INVALID_LABEL;
use crate::frame::{Intrinsics, RgbdFrame};
use crate::img::Image;
use crate::se3::{Pose, Se3Error, Twist};
use nalgebra::{Matrix6, Vector2, Vector3, Vector6};
use thiserror::Error;

/// Gauss–Newton stops when the accepted increment norm drops below this.
pub const GN_STEP_EPS: f64 = 1e-7;
const LM_MU_INIT: f64 = 1e-4;
const LM_MAX_TRIES: usize = 12;
/// Transformed points closer than this to the target image plane are dropped.
const MIN_TARGET_Z: f64 = 1e-6;
/// Floor for MAD-derived Cauchy scales.
const MAD_FLOOR: f64 = 1e-3;
const MAD_SIGMA: f64 = 1.4826;

#[derive(Debug, Error)]
pub enum AlignError {
    #[error("source and target frames have different intrinsics")]
    IntrinsicsMismatch,
    #[error("normal equations stayed singular after damping retries (degenerate geometry)")]
    DegenerateGeometry,
    #[error("non-finite values in normal equations")]
    NonFinite,
    #[error(transparent)]
    Se3(#[from] Se3Error),
}

/// How the Cauchy inflection scales are chosen per solve.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RobustMode {
    /// Use the configured `c_intensity` / `c_depth` directly.
    Fixed,
    /// Rescale from the median absolute residual at the initial estimate.
    /// Adapts to noise level, but inflates the scales when outliers are the
    /// majority, which is why `Fixed` is the default.
    MadAdaptive,
}

#[derive(Debug, Clone)]
pub struct RobustConfig {
    /// Cauchy inflection for intensity residuals, in intensity units.
    pub c_intensity: f64,
    /// Cauchy inflection for depth residuals, in meters.
    pub c_depth: f64,
    /// Converts intensity residuals to metric scale so the two residual kinds
    /// are commensurable (meters per intensity unit).
    pub alpha_intensity: f64,
    /// Quadratic depth-noise coefficient: w_D(z) = 1 / (1 + k z^2).
    pub depth_weight_k: f64,
    pub mode: RobustMode,
}

impl Default for RobustConfig {
    /// The scales are chosen so that a grossly misaligned pixel contributes a
    /// saturated penalty of order 0.05 rather than order 1e-4: the per-cluster
    /// sums of these penalties drive the segmentation scores against the
    /// smoothness weight `lambda_r`, so a visibly wrong cluster of a few
    /// hundred pixels must outvote it by a wide margin.
    fn default() -> Self {
        RobustConfig {
            c_intensity: 0.15,
            c_depth: 0.15,
            alpha_intensity: 2.0,
            depth_weight_k: 0.5,
            mode: RobustMode::Fixed,
        }
    }
}

impl RobustConfig {
    /// Inflection points in the metric residual domain: intensity residuals
    /// are multiplied by `alpha_intensity` before the penalty, so their
    /// inflection moves with it.
    fn scales(&self) -> (f64, f64) {
        (self.alpha_intensity * self.c_intensity, self.c_depth)
    }
}

/// Robust penalty `(c^2/2) ln(1 + (r/c)^2)`: quadratic near zero, logarithmic
/// in the tails, inflection at `r = c`.
pub fn cauchy(r: f64, c: f64) -> f64 {
    let x = r / c;
    0.5 * c * c * (x * x).ln_1p()
}

/// IRLS weight: derivative of the Cauchy penalty divided by the residual.
fn cauchy_weight(r: f64, c: f64) -> f64 {
    let x = r / c;
    1.0 / (1.0 + x * x)
}

/// One accepted pixel of a residual evaluation.
#[derive(Debug, Clone, Copy)]
pub struct ResidualSample {
    /// Source-frame pixel the residual was evaluated at.
    pub pixel: (usize, usize),
    /// Intensity difference target(warped) − source(pixel).
    pub r_intensity: f64,
    /// Depth difference target(warped) − transformed-point z, meters.
    pub r_depth: f64,
    pub w_intensity: f64,
    pub w_depth: f64,
    /// Cluster index of the source pixel (0 when no labeling is supplied).
    pub cluster: u32,
}

/// Everything needed to build residuals and their pose Jacobians at a pixel.
struct SampleEval {
    x: usize,
    y: usize,
    /// Transformed point in target camera coordinates.
    point: Vector3<f64>,
    r_i: f64,
    r_d: f64,
    w_d: f64,
    /// Derivatives of the bilinear patches at the warped location.
    grad_i: Vector2<f64>,
    grad_d: Vector2<f64>,
}

/// Warps an integer source pixel into the target image plane. `None` when the
/// pixel has no depth or lands behind the camera; the returned coordinates
/// may still be out of bounds — callers decide.
pub fn warp(pixel: (usize, usize), t: &Pose, source: &RgbdFrame) -> Option<(f64, f64)> {
    let z = source.depth.get(pixel.0, pixel.1) as f64;
    if z <= 0.0 {
        return None;
    }
    let q = source
        .intrinsics
        .back_project(pixel.0 as f64, pixel.1 as f64, z)
        .ok()?;
    let p = t.transform_point(&q);
    if p.z <= MIN_TARGET_Z {
        return None;
    }
    source.intrinsics.project(&p).ok()
}

/// Evaluates the residual pair at one source pixel, or `None` if the sample
/// is rejected (no source depth, behind camera, out of bounds, or any of the
/// four target depth corners invalid).
fn eval_pixel(
    source: &RgbdFrame,
    target: &RgbdFrame,
    t: &Pose,
    x: usize,
    y: usize,
    depth_weight_k: f64,
) -> Option<SampleEval> {
    let z = source.depth.get(x, y) as f64;
    if z <= 0.0 {
        return None;
    }
    let q = source.intrinsics.back_project(x as f64, y as f64, z).ok()?;
    let p = t.transform_point(&q);
    if p.z <= MIN_TARGET_Z {
        return None;
    }
    let (u, v) = target.intrinsics.project(&p).ok()?;
    if !target.intensity.in_bounds(u, v) {
        return None;
    }

    let (x0, y0, fu, fv) = target.intensity.cell(u, v);
    let i00 = target.intensity.get(x0, y0) as f64;
    let i10 = target.intensity.get(x0 + 1, y0) as f64;
    let i01 = target.intensity.get(x0, y0 + 1) as f64;
    let i11 = target.intensity.get(x0 + 1, y0 + 1) as f64;
    let d00 = target.depth.get(x0, y0) as f64;
    let d10 = target.depth.get(x0 + 1, y0) as f64;
    let d01 = target.depth.get(x0, y0 + 1) as f64;
    let d11 = target.depth.get(x0 + 1, y0 + 1) as f64;
    if d00 <= 0.0 || d10 <= 0.0 || d01 <= 0.0 || d11 <= 0.0 {
        return None;
    }

    let blend = |v00: f64, v10: f64, v01: f64, v11: f64| {
        (1.0 - fu) * (1.0 - fv) * v00 + fu * (1.0 - fv) * v10 + (1.0 - fu) * fv * v01 + fu * fv * v11
    };
    let i_t = blend(i00, i10, i01, i11);
    let d_t = blend(d00, d10, d01, d11);

    Some(SampleEval {
        x,
        y,
        point: p,
        r_i: i_t - source.intensity.get(x, y) as f64,
        r_d: d_t - p.z,
        w_d: 1.0 / (1.0 + depth_weight_k * z * z),
        grad_i: Vector2::new(
            (1.0 - fv) * (i10 - i00) + fv * (i11 - i01),
            (1.0 - fu) * (i01 - i00) + fu * (i11 - i10),
        ),
        grad_d: Vector2::new(
            (1.0 - fv) * (d10 - d00) + fv * (d11 - d01),
            (1.0 - fu) * (d01 - d00) + fu * (d11 - d10),
        ),
    })
}

/// Row-major sweep over all accepted samples; the fixed order keeps every
/// accumulated quantity bit-reproducible.
fn for_each_sample(
    source: &RgbdFrame,
    target: &RgbdFrame,
    t: &Pose,
    depth_weight_k: f64,
    mut f: impl FnMut(SampleEval),
) {
    for y in 0..source.height() {
        for x in 0..source.width() {
            if let Some(s) = eval_pixel(source, target, t, x, y, depth_weight_k) {
                f(s);
            }
        }
    }
}

/// Rows of the derivative of pixel coordinates and point depth with respect
/// to a left-multiplied twist increment, at transformed point `p`:
/// `(du/ddelta, dv/ddelta, dz/ddelta)`.
fn jacobian_rows(p: &Vector3<f64>, k: &Intrinsics) -> (Vector6<f64>, Vector6<f64>, Vector6<f64>) {
    let (x, y, z) = (p.x, p.y, p.z);
    let iz = 1.0 / z;
    // d(Tq)/ddelta = [I | -skew(p)], stacked here as three explicit rows.
    let row_x = Vector6::new(1.0, 0.0, 0.0, 0.0, z, -y);
    let row_y = Vector6::new(0.0, 1.0, 0.0, -z, 0.0, x);
    let row_z = Vector6::new(0.0, 0.0, 1.0, y, -x, 0.0);
    let j_u = (k.fx * iz) * row_x - (k.fx * x * iz * iz) * row_z;
    let j_v = (k.fy * iz) * row_y - (k.fy * y * iz * iz) * row_z;
    (j_u, j_v, row_z)
}

/// Unscaled residual Jacobians (d r_I / d delta, d r_D / d delta) for one
/// sample. Image derivatives come from the same bilinear patch the residual
/// was sampled from, so they are the exact derivatives of the sampled
/// function within its cell.
fn sample_jacobians(s: &SampleEval, k: &Intrinsics) -> (Vector6<f64>, Vector6<f64>) {
    let (j_u, j_v, row_z) = jacobian_rows(&s.point, k);
    let j_ri = s.grad_i.x * j_u + s.grad_i.y * j_v;
    let j_rd = s.grad_d.x * j_u + s.grad_d.y * j_v - row_z;
    (j_ri, j_rd)
}

/// Residual pair and its analytic Jacobians with respect to a left-multiplied
/// twist increment, at one source pixel: `(r_I, r_D, dr_I/ddelta,
/// dr_D/ddelta)`. `None` when the sample is rejected. This is the exact
/// quantity the normal equations are assembled from, exposed so it can be
/// cross-checked against numeric differentiation.
pub fn residual_with_jacobian(
    source: &RgbdFrame,
    target: &RgbdFrame,
    t: &Pose,
    pixel: (usize, usize),
    cfg: &RobustConfig,
) -> Option<(f64, f64, Vector6<f64>, Vector6<f64>)> {
    let s = eval_pixel(source, target, t, pixel.0, pixel.1, cfg.depth_weight_k)?;
    let (j_ri, j_rd) = sample_jacobians(&s, &source.intrinsics);
    Some((s.r_i, s.r_d, j_ri, j_rd))
}

/// Collects residual samples over every accepted pixel; cluster indices are 0.
pub fn residuals(source: &RgbdFrame, target: &RgbdFrame, t: &Pose, cfg: &RobustConfig) -> Vec<ResidualSample> {
    let mut out = Vec::new();
    for_each_sample(source, target, t, cfg.depth_weight_k, |s| {
        out.push(ResidualSample {
            pixel: (s.x, s.y),
            r_intensity: s.r_i,
            r_depth: s.r_d,
            w_intensity: 1.0,
            w_depth: s.w_d,
            cluster: 0,
        });
    });
    out
}

/// Like [`residuals`] but tags each sample with the source pixel's cluster
/// label; pixels labeled invalid are skipped.
pub fn residuals_with_labels(
    source: &RgbdFrame,
    target: &RgbdFrame,
    t: &Pose,
    cfg: &RobustConfig,
    labels: &Image<u32>,
) -> Vec<ResidualSample> {
    let mut out = Vec::new();
    for_each_sample(source, target, t, cfg.depth_weight_k, |s| {
        let label = labels.get(s.x, s.y);
        if label == INVALID_LABEL {
            return;
        }
        out.push(ResidualSample {
            pixel: (s.x, s.y),
            r_intensity: s.r_i,
            r_depth: s.r_d,
            w_intensity: 1.0,
            w_depth: s.w_d,
            cluster: label,
        });
    });
    out
}

/// Robust cost of a single sample under the configured fixed scales.
pub fn robust_sample_cost(s: &ResidualSample, cfg: &RobustConfig) -> f64 {
    let (c_ie, c_de) = cfg.scales();
    cauchy(cfg.alpha_intensity * s.w_intensity * s.r_intensity, c_ie) + cauchy(s.w_depth * s.r_depth, c_de)
}

/// Total robust cost with per-cluster membership weights: each sample
/// contributes `gamma[cluster] * (penalty_I + penalty_D)`. Linear in gamma.
pub fn weighted_cost(samples: &[ResidualSample], gamma: &[f64], cfg: &RobustConfig) -> f64 {
    samples
        .iter()
        .map(|s| gamma[s.cluster as usize] * robust_sample_cost(s, cfg))
        .sum()
}

/// Data-term cost at pose `t` with a per-pixel weight image and explicit
/// Cauchy scales (metric domain).
fn data_cost(
    source: &RgbdFrame,
    target: &RgbdFrame,
    t: &Pose,
    weights: &Image<f64>,
    cfg: &RobustConfig,
    c_ie: f64,
    c_de: f64,
) -> f64 {
    let mut cost = 0.0;
    for_each_sample(source, target, t, cfg.depth_weight_k, |s| {
        let wt = weights.get(s.x, s.y);
        if wt <= 0.0 {
            return;
        }
        cost += wt * (cauchy(cfg.alpha_intensity * s.r_i, c_ie) + cauchy(s.w_d * s.r_d, c_de));
    });
    cost
}

/// Median absolute scaled residual at the initial estimate, per residual
/// kind, floored so a perfectly clean frame cannot collapse the scales.
fn mad_scales(
    source: &RgbdFrame,
    target: &RgbdFrame,
    t: &Pose,
    weights: &Image<f64>,
    cfg: &RobustConfig,
) -> (f64, f64) {
    let mut abs_i = Vec::new();
    let mut abs_d = Vec::new();
    for_each_sample(source, target, t, cfg.depth_weight_k, |s| {
        if weights.get(s.x, s.y) > 0.0 {
            abs_i.push((cfg.alpha_intensity * s.r_i).abs());
            abs_d.push((s.w_d * s.r_d).abs());
        }
    });
    if abs_i.is_empty() {
        return cfg.scales();
    }
    let median = |v: &mut Vec<f64>| {
        v.sort_by(f64::total_cmp);
        v[v.len() / 2]
    };
    (
        (MAD_SIGMA * median(&mut abs_i)).max(MAD_FLOOR),
        (MAD_SIGMA * median(&mut abs_d)).max(MAD_FLOOR),
    )
}

/// Motion estimation with per-cluster membership weights: pixels weigh in by
/// `gamma[label]`; invalidly labeled pixels are skipped.
#[allow(clippy::too_many_arguments)]
pub fn estimate_motion(
    source: &RgbdFrame,
    target: &RgbdFrame,
    gamma: &[f64],
    labels: &Image<u32>,
    init: &Twist,
    prior: &Twist,
    lambda: f64,
    cfg: &RobustConfig,
    iters: usize,
) -> Result<Twist, AlignError> {
    let mut weights = Image::new_fill(source.width(), source.height(), 0.0f64);
    for y in 0..source.height() {
        for x in 0..source.width() {
            let label = labels.get(x, y);
            if label != INVALID_LABEL {
                weights.set(x, y, gamma[label as usize]);
            }
        }
    }
    estimate_motion_weighted(source, target, &weights, init, prior, lambda, cfg, iters)
}

/// Core IRLS Gauss–Newton solve with a per-pixel weight image (also used for
/// frame-to-model refinement, where the weights come from a rendered model).
///
/// Minimizes the robust data term plus `lambda * |xi - prior|^2`. Starts from
/// the cheaper of `init` and `prior` (when the prior term is active), so the
/// result never costs more than either. Levenberg damping rejects any step
/// that increases the objective.
#[allow(clippy::too_many_arguments)]
pub fn estimate_motion_weighted(
    source: &RgbdFrame,
    target: &RgbdFrame,
    weights: &Image<f64>,
    init: &Twist,
    prior: &Twist,
    lambda: f64,
    cfg: &RobustConfig,
    iters: usize,
) -> Result<Twist, AlignError> {
    if source.intrinsics != target.intrinsics {
        return Err(AlignError::IntrinsicsMismatch);
    }

    let t_init = Pose::exp(init);
    let (c_ie, c_de) = match cfg.mode {
        RobustMode::Fixed => cfg.scales(),
        RobustMode::MadAdaptive => mad_scales(source, target, &t_init, weights, cfg),
    };
    let objective = |t: &Pose| -> Result<f64, AlignError> {
        let mut cost = data_cost(source, target, t, weights, cfg, c_ie, c_de);
        if lambda > 0.0 {
            let xi = t.log()?;
            cost += lambda * (xi.as_vector() - prior.as_vector()).norm_squared();
        }
        Ok(cost)
    };

    let mut t_cur = t_init;
    let mut cost_cur = objective(&t_cur)?;
    if lambda > 0.0 {
        let t_prior = Pose::exp(prior);
        let cost_prior = objective(&t_prior)?;
        if cost_prior < cost_cur {
            t_cur = t_prior;
            cost_cur = cost_prior;
        }
    }

    let mut mu = LM_MU_INIT;
    for _ in 0..iters {
        let mut h = Matrix6::<f64>::zeros();
        let mut g = Vector6::<f64>::zeros();
        let mut samples = 0usize;
        for_each_sample(source, target, &t_cur, cfg.depth_weight_k, |s| {
            let wt = weights.get(s.x, s.y);
            if wt <= 0.0 {
                return;
            }
            samples += 1;
            let (j_ri, j_rd) = sample_jacobians(&s, &source.intrinsics);

            let s_i = cfg.alpha_intensity * s.r_i;
            let j_si = cfg.alpha_intensity * j_ri;
            let w_i = wt * cauchy_weight(s_i, c_ie);
            h += w_i * (j_si * j_si.transpose());
            g += (w_i * s_i) * j_si;

            let s_d = s.w_d * s.r_d;
            let j_sd = s.w_d * j_rd;
            let w_dd = wt * cauchy_weight(s_d, c_de);
            h += w_dd * (j_sd * j_sd.transpose());
            g += (w_dd * s_d) * j_sd;
        });
        if lambda > 0.0 {
            let xi = t_cur.log()?;
            h += Matrix6::identity() * (2.0 * lambda);
            g += 2.0 * lambda * (xi.as_vector() - prior.as_vector());
        }
        if samples == 0 && lambda == 0.0 {
            break;
        }
        if !h.iter().all(|v| v.is_finite()) || !g.iter().all(|v| v.is_finite()) {
            return Err(AlignError::NonFinite);
        }

        let mut accepted = false;
        let mut converged = false;
        let mut solved_once = false;
        for _ in 0..LM_MAX_TRIES {
            let damped = h + Matrix6::identity() * mu;
            let Some(chol) = damped.cholesky() else {
                mu *= 10.0;
                continue;
            };
            solved_once = true;
            let delta = chol.solve(&(-g));
            if !delta.iter().all(|v| v.is_finite()) {
                mu *= 10.0;
                continue;
            }
            let t_new = Pose::exp(&Twist::from_vector(&delta)).compose(&t_cur);
            let cost_new = objective(&t_new)?;
            if cost_new <= cost_cur {
                t_cur = t_new;
                cost_cur = cost_new;
                mu = (mu * 0.1).max(1e-12);
                converged = delta.norm() < GN_STEP_EPS;
                accepted = true;
                break;
            }
            mu *= 10.0;
        }
        if !solved_once {
            return Err(AlignError::DegenerateGeometry);
        }
        if !accepted || converged {
            break;
        }
    }
    Ok(t_cur.log()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frame::build_pyramid;
    use crate::synth::{generate, MotionSpec, SceneConfig};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn flat_frame(width: usize, height: usize, intensity: f32, depth: f32) -> RgbdFrame {
        let k = Intrinsics::new(50.0, 50.0, width as f64 / 2.0 - 0.5, height as f64 / 2.0 - 0.5, width, height)
            .unwrap();
        RgbdFrame::new(
            Image::new_fill(width, height, intensity),
            Image::new_fill(width, height, depth),
            0.0,
            k,
        )
        .unwrap()
    }

    /// Clean two-frame scene with a known camera increment; returns
    /// (previous, current, true twist mapping current camera coords into the
    /// previous camera frame).
    fn clean_pair(speed: f64) -> (RgbdFrame, RgbdFrame, Twist) {
        let mut cfg = SceneConfig::default_scene();
        cfg.frames = 2;
        cfg.noise_depth = 0.0;
        cfg.noise_intensity = 0.0;
        cfg.object_motion = MotionSpec::Static;
        cfg.camera_motion = MotionSpec::Line { dir: Vector3::new(1.0, 0.0, 0.0), speed };
        let seq = generate(&cfg).unwrap();
        let xi = seq.true_camera_increments[0];
        let mut frames = seq.frames.into_iter();
        let prev = frames.next().unwrap();
        let curr = frames.next().unwrap();
        (prev, curr, xi)
    }

    #[test]
    fn warp_at_identity_is_the_identity() {
        let f = flat_frame(16, 12, 0.5, 1.3);
        for (x, y) in [(0usize, 0usize), (7, 5), (15, 11)] {
            let (u, v) = warp((x, y), &Pose::identity(), &f).unwrap();
            assert_abs_diff_eq!(u, x as f64, epsilon = 1e-9);
            assert_abs_diff_eq!(v, y as f64, epsilon = 1e-9);
        }
    }

    #[test]
    fn lateral_translation_shifts_by_fx_t_over_z() {
        let f = flat_frame(16, 12, 0.5, 2.0);
        let t = Pose::exp(&Twist::new(Vector3::new(0.04, 0.0, 0.0), Vector3::zeros()));
        let (u, v) = warp((5, 4), &t, &f).unwrap();
        assert_abs_diff_eq!(u, 5.0 + 50.0 * 0.04 / 2.0, epsilon = 1e-9);
        assert_abs_diff_eq!(v, 4.0, epsilon = 1e-9);
    }

    #[test]
    fn on_axis_point_is_a_fixed_point_of_forward_motion() {
        // Principal point at pixel (8, 6): the optical axis hits it, so
        // moving straight forward leaves it in place.
        let k = Intrinsics::new(50.0, 50.0, 8.0, 6.0, 16, 12).unwrap();
        let f = RgbdFrame::new(Image::new_fill(16, 12, 0.5f32), Image::new_fill(16, 12, 1.0f32), 0.0, k).unwrap();
        let t = Pose::exp(&Twist::new(Vector3::new(0.0, 0.0, -0.5), Vector3::zeros()));
        let (u, v) = warp((8, 6), &t, &f).unwrap();
        assert_abs_diff_eq!(u, 8.0, epsilon = 1e-12);
        assert_abs_diff_eq!(v, 6.0, epsilon = 1e-12);
    }

    #[test]
    fn warp_rejects_missing_depth_and_behind_camera_points() {
        let mut f = flat_frame(16, 12, 0.5, 1.0);
        f.depth.set(3, 3, 0.0);
        assert!(warp((3, 3), &Pose::identity(), &f).is_none());
        let behind = Pose::exp(&Twist::new(Vector3::new(0.0, 0.0, -2.0), Vector3::zeros()));
        assert!(warp((5, 5), &behind, &f).is_none());
    }

    #[test]
    fn residuals_vanish_on_identical_frames() {
        let f = flat_frame(20, 16, 0.37, 1.7);
        let cfg = RobustConfig::default();
        let samples = residuals(&f, &f, &Pose::identity(), &cfg);
        assert_eq!(samples.len(), 20 * 16);
        for s in &samples {
            assert_eq!(s.r_intensity, 0.0);
            assert_eq!(s.r_depth, 0.0);
        }
    }

    #[test]
    fn constant_depth_offset_appears_directly_in_depth_residuals() {
        let a = flat_frame(20, 16, 0.4, 1.0);
        let b = flat_frame(20, 16, 0.4, 1.05);
        let cfg = RobustConfig::default();
        let samples = residuals(&a, &b, &Pose::identity(), &cfg);
        assert_eq!(samples.len(), 20 * 16);
        for s in &samples {
            assert_eq!(s.r_intensity, 0.0);
            assert_abs_diff_eq!(s.r_depth, 0.05, epsilon = 1e-6);
            assert_abs_diff_eq!(s.w_depth, 1.0 / 1.5, epsilon = 1e-12);
        }
    }

    #[test]
    fn residuals_at_the_true_motion_are_interpolation_noise_only() {
        let (prev, curr, xi) = clean_pair(0.3);
        let cfg = RobustConfig::default();
        let samples = residuals(&curr, &prev, &Pose::exp(&xi), &cfg);
        assert!(samples.len() > (curr.width() * curr.height() * 8) / 10);

        let mut abs_i: Vec<f64> = samples.iter().map(|s| s.r_intensity.abs()).collect();
        let mut abs_d: Vec<f64> = samples.iter().map(|s| s.r_depth.abs()).collect();
        abs_i.sort_by(f64::total_cmp);
        abs_d.sort_by(f64::total_cmp);
        // Texture edges break bilinear reconstruction locally, so the bulk
        // statistic is the honest one; depth is piecewise planar and exact
        // away from silhouettes.
        assert!(abs_i[abs_i.len() / 2] <= 1e-3, "median |r_I| = {}", abs_i[abs_i.len() / 2]);
        assert!(abs_d[abs_d.len() / 2] <= 1e-9, "median |r_D| = {}", abs_d[abs_d.len() / 2]);
    }

    #[test]
    fn cauchy_matches_closed_forms() {
        assert_eq!(cauchy(0.0, 0.02), 0.0);
        for c in [0.02, 0.1, 1.0] {
            assert_abs_diff_eq!(cauchy(c, c), c * c / 2.0 * std::f64::consts::LN_2, epsilon = 1e-15);
        }
    }

    proptest! {
        #[test]
        fn cauchy_is_bounded_by_the_quadratic(r in -10.0..10.0f64, c in 1e-3..10.0f64) {
            let v = cauchy(r, c);
            prop_assert!(v >= 0.0);
            prop_assert!(v <= r * r / 2.0 + 1e-15);
        }

        #[test]
        fn cauchy_derivative_matches_finite_differences(r in -5.0..5.0f64, c in 1e-2..2.0f64) {
            let h = 1e-6 * r.abs().max(1.0);
            let fd = (cauchy(r + h, c) - cauchy(r - h, c)) / (2.0 * h);
            let analytic = r / (1.0 + (r / c) * (r / c));
            prop_assert!((fd - analytic).abs() <= 1e-6 * analytic.abs().max(1.0));
        }

        #[test]
        fn weighted_cost_is_linear_in_gamma(
            res in proptest::collection::vec((-0.5..0.5f64, -0.2..0.2f64, 0u32..4), 1..40),
            g1 in proptest::collection::vec(0.0..1.0f64, 4),
            g2 in proptest::collection::vec(0.0..1.0f64, 4),
            a in 0.0..1.0f64,
        ) {
            let cfg = RobustConfig::default();
            let samples: Vec<ResidualSample> = res
                .iter()
                .map(|&(ri, rd, cl)| ResidualSample {
                    pixel: (0, 0),
                    r_intensity: ri,
                    r_depth: rd,
                    w_intensity: 1.0,
                    w_depth: 0.8,
                    cluster: cl,
                })
                .collect();
            let mix: Vec<f64> = g1.iter().zip(&g2).map(|(x, y)| a * x + (1.0 - a) * y).collect();
            let lhs = weighted_cost(&samples, &mix, &cfg);
            let rhs = a * weighted_cost(&samples, &g1, &cfg) + (1.0 - a) * weighted_cost(&samples, &g2, &cfg);
            prop_assert!((lhs - rhs).abs() <= 1e-10);
        }
    }

    #[test]
    fn weighted_cost_eq_naive_reevaluation() {
        let cfg = RobustConfig::default();
        let samples = vec![
            ResidualSample { pixel: (1, 2), r_intensity: 0.21, r_depth: -0.013, w_intensity: 1.0, w_depth: 0.7, cluster: 0 },
            ResidualSample { pixel: (3, 2), r_intensity: -0.05, r_depth: 0.002, w_intensity: 1.0, w_depth: 0.9, cluster: 1 },
            ResidualSample { pixel: (9, 9), r_intensity: 0.0, r_depth: 0.02, w_intensity: 1.0, w_depth: 1.0, cluster: 1 },
        ];
        let gamma = [0.25, 0.75];
        let mut naive = 0.0;
        for s in &samples {
            let si = cfg.alpha_intensity * s.w_intensity * s.r_intensity;
            let sd = s.w_depth * s.r_depth;
            naive += gamma[s.cluster as usize]
                * (cauchy(si, cfg.alpha_intensity * cfg.c_intensity) + cauchy(sd, cfg.c_depth));
        }
        assert_abs_diff_eq!(weighted_cost(&samples, &gamma, &cfg), naive, epsilon = 1e-12);

        // gamma of zero silences everything.
        assert_eq!(weighted_cost(&samples, &[0.0, 0.0], &cfg), 0.0);

        // A single on-inflection depth sample reduces to the closed form.
        let one = [ResidualSample { pixel: (0, 0), r_intensity: 0.0, r_depth: cfg.c_depth, w_intensity: 1.0, w_depth: 1.0, cluster: 0 }];
        assert_abs_diff_eq!(
            weighted_cost(&one, &[1.0], &cfg),
            cfg.c_depth * cfg.c_depth / 2.0 * std::f64::consts::LN_2,
            epsilon = 1e-15
        );
    }

    #[test]
    fn identical_frames_yield_zero_motion() {
        let (_, curr, _) = clean_pair(0.3);
        let cfg = RobustConfig::default();
        let labels = Image::new_fill(curr.width(), curr.height(), 0u32);
        let xi = estimate_motion(
            &curr,
            &curr,
            &[1.0],
            &labels,
            &Twist::zero(),
            &Twist::zero(),
            0.0,
            &cfg,
            6,
        )
        .unwrap();
        assert!(xi.norm() <= 1e-9, "|xi| = {}", xi.norm());
    }

    #[test]
    fn zero_weights_with_prior_return_the_prior_exactly() {
        let f = flat_frame(16, 12, 0.5, 1.5);
        let cfg = RobustConfig::default();
        let prior = Twist::new(Vector3::new(0.01, -0.02, 0.005), Vector3::new(0.002, 0.0, -0.001));
        let labels = Image::new_fill(16, 12, 0u32);
        let xi = estimate_motion(&f, &f, &[0.0], &labels, &Twist::zero(), &prior, 1.0, &cfg, 6).unwrap();
        assert_eq!(xi.as_vector(), prior.as_vector());
    }

    #[test]
    fn recovers_a_known_camera_motion_coarse_to_fine() {
        // 0.9 m/s at 30 fps = 0.03 m between frames.
        let (prev, curr, xi_true) = clean_pair(0.9);
        assert_abs_diff_eq!(xi_true.norm(), 0.03, epsilon = 1e-12);
        let cfg = RobustConfig::default();

        let pyr_prev = build_pyramid(&prev, 2).unwrap();
        let pyr_curr = build_pyramid(&curr, 2).unwrap();
        let mut xi = Twist::zero();
        for level in (0..2).rev() {
            let src = &pyr_curr.levels[level];
            let labels = Image::new_fill(src.width(), src.height(), 0u32);
            xi = estimate_motion(
                src,
                &pyr_prev.levels[level],
                &[1.0],
                &labels,
                &xi,
                &Twist::zero(),
                0.0,
                &cfg,
                10,
            )
            .unwrap();
        }
        let err = (xi.as_vector() - xi_true.as_vector()).norm();
        assert!(err <= 2e-3, "recovery error {err}");
    }

    #[test]
    fn solution_objective_never_exceeds_init_or_prior() {
        let (prev, curr, xi_true) = clean_pair(0.3);
        let cfg = RobustConfig::default();
        let weights = Image::new_fill(curr.width(), curr.height(), 1.0f64);
        let mut init = xi_true;
        init.v.x += 0.01;
        init.w.y -= 0.004;
        let prior = Twist::new(Vector3::new(-0.005, 0.002, 0.0), Vector3::new(0.0, 0.0, 0.003));

        let xi = estimate_motion_weighted(&curr, &prev, &weights, &init, &prior, 1.0, &cfg, 8).unwrap();

        let (c_ie, c_de) = (cfg.alpha_intensity * cfg.c_intensity, cfg.c_depth);
        let obj = |t: &Twist| {
            data_cost(&curr, &prev, &Pose::exp(t), &weights, &cfg, c_ie, c_de)
                + (t.as_vector() - prior.as_vector()).norm_squared()
        };
        let at_solution = obj(&xi);
        assert!(at_solution <= obj(&init) + 1e-9);
        assert!(at_solution <= obj(&prior) + 1e-9);
    }

    #[test]
    fn mad_mode_floors_the_scales_and_still_solves() {
        let f = flat_frame(24, 20, 0.5, 2.0);
        let mut cfg = RobustConfig::default();
        cfg.mode = RobustMode::MadAdaptive;
        // Identical frames: every residual is zero, so the MAD estimate hits
        // the floor rather than collapsing to zero scale.
        let weights = Image::new_fill(24, 20, 1.0f64);
        let (ci, cd) = mad_scales(&f, &f, &Pose::identity(), &weights, &cfg);
        assert_eq!(ci, MAD_FLOOR);
        assert_eq!(cd, MAD_FLOOR);
        let xi = estimate_motion_weighted(&f, &f, &weights, &Twist::zero(), &Twist::zero(), 0.0, &cfg, 4).unwrap();
        assert!(xi.norm() <= 1e-9);
    }

    #[test]
    fn mismatched_intrinsics_are_rejected() {
        let a = flat_frame(16, 12, 0.5, 1.0);
        let b = flat_frame(20, 16, 0.5, 1.0);
        let w = Image::new_fill(16, 12, 1.0f64);
        let r = estimate_motion_weighted(&a, &b, &w, &Twist::zero(), &Twist::zero(), 0.0, &RobustConfig::default(), 4);
        assert!(matches!(r, Err(AlignError::IntrinsicsMismatch)));
    }

    #[test]
    fn residual_jacobians_match_central_finite_differences() {
        let (prev, curr, xi_true) = clean_pair(0.3);
        // Slightly off the optimum so residual gradients are generic.
        let mut xi = xi_true;
        xi.v.y += 0.004;
        xi.w.z += 0.002;
        let t0 = Pose::exp(&xi);
        let k = curr.intrinsics;
        let kd = RobustConfig::default().depth_weight_k;

        let eps = 1e-6;
        let mut checked = 0usize;
        // Identifies the bilinear-interpolation cell a sample was read from.
        let cell_of = |s: &SampleEval| {
            let (u, v) = prev.intrinsics.project(&s.point).unwrap();
            let (x0, y0, _, _) = prev.intensity.cell(u, v);
            (x0, y0)
        };
        'pixels: for y in (1..curr.height()).step_by(7) {
            for x in (1..curr.width()).step_by(7) {
                let Some(s) = eval_pixel(&curr, &prev, &t0, x, y, kd) else { continue };
                let (j_ri, j_rd) = sample_jacobians(&s, &k);
                for axis in 0..6 {
                    let mut step = Vector6::zeros();
                    step[axis] = eps;
                    let tp = Pose::exp(&Twist::from_vector(&step)).compose(&t0);
                    let tm = Pose::exp(&Twist::from_vector(&(-step))).compose(&t0);
                    let (Some(sp), Some(sm)) = (
                        eval_pixel(&curr, &prev, &tp, x, y, kd),
                        eval_pixel(&curr, &prev, &tm, x, y, kd),
                    ) else {
                        continue;
                    };
                    // A probe that crosses into a different bilinear cell
                    // samples a different polynomial; skip those pixels.
                    if cell_of(&sp) != cell_of(&s) || cell_of(&sm) != cell_of(&s) {
                        continue;
                    }
                    let fd_i = (sp.r_i - sm.r_i) / (2.0 * eps);
                    let fd_d = (sp.r_d - sm.r_d) / (2.0 * eps);
                    let tol_i = 1e-4 * j_ri[axis].abs().max(1.0);
                    let tol_d = 1e-4 * j_rd[axis].abs().max(1.0);
                    assert!(
                        (fd_i - j_ri[axis]).abs() <= tol_i,
                        "pixel ({x},{y}) axis {axis}: dI fd {fd_i} vs {j}",
                        j = j_ri[axis]
                    );
                    assert!(
                        (fd_d - j_rd[axis]).abs() <= tol_d,
                        "pixel ({x},{y}) axis {axis}: dD fd {fd_d} vs {j}",
                        j = j_rd[axis]
                    );
                    checked += 1;
                }
                if checked > 5000 {
                    break 'pixels;
                }
            }
        }
        assert!(checked >= 1000, "only {checked} comparisons ran");
    }
}
