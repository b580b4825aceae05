//! Dual point-based mapping: weighted frame splitting, confidence-weighted
//! fusion, model rendering, and frame-to-model pose refinement.
//!
//! Each body (static background, dynamic object) keeps its own [`PointModel`]
//! in its own reference frame. Frames are split by the segmentation scores into
//! two weighted copies; pixels whose weight clears `W_MIN` are back-projected
//! and either blended into a nearby model point or inserted as a new one.
//! Association uses a uniform voxel hash with cell size equal to the
//! association radius, so a 27-cell probe is exhaustive.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use thiserror::Error;

use crate::alignment::{estimate_motion_weighted, RobustConfig};
use crate::frame::{Intrinsics, RgbdFrame};
use crate::img::Image;
use crate::se3::{Pose, Twist};
use crate::solver::Segmentation;

/// Minimum per-pixel weight for a pixel to enter the model. Scores are
/// probabilities, so 0.5 is the natural decision boundary; ambiguous pixels
/// pollute neither model.
pub const W_MIN: f64 = 0.5;
/// Default association radius in meters; doubles as the voxel hash cell size.
pub const R_ASSOC: f64 = 0.02;
/// Points with confidence below this are dropped once stale.
const CULL_CONFIDENCE: f64 = 0.5;
/// Frames a low-confidence point may go unseen before culling.
const CULL_AGE: usize = 50;
/// Fraction of image pixels that must yield valid residual samples for
/// frame-to-model refinement to run; below this the initial guess is kept.
const MIN_OVERLAP: f64 = 0.2;

#[derive(Debug, Error)]
pub enum MapError {
    #[error("cannot render an empty model")]
    EmptyModel,
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },
}

/// One fused point. Position and intensity are confidence-weighted running
/// averages of every observation blended into it.
#[derive(Debug, Clone)]
pub struct ModelPoint {
    pub position: Vector3<f64>,
    /// Grayscale in `[0, 1]`.
    pub intensity: f64,
    /// Accumulated observation weight; always > 0 for a retained point.
    pub confidence: f64,
    /// Frame index of the last observation blended in.
    pub last_seen: usize,
}

/// Point cloud in a body's reference frame plus the camera poses it was
/// fused from.
#[derive(Debug, Clone, Default)]
pub struct PointModel {
    pub points: Vec<ModelPoint>,
    /// Camera-to-model pose of every fused frame, in fusion order.
    pub pose_history: Vec<Pose>,
}

impl PointModel {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }
}

/// A frame plus per-pixel fusion weights in `[0, 1]` (zero on invalid depth).
#[derive(Debug, Clone)]
pub struct WeightedFrame {
    pub base: RgbdFrame,
    pub weight: Image<f64>,
}

/// Splits a frame into its static and dynamic weighted copies: the static
/// frame carries the scores, the dynamic one their complement, and both are
/// zeroed wherever depth is invalid so the weights partition exactly the
/// valid pixels.
pub fn split_weighted(frame: &RgbdFrame, seg: &Segmentation) -> (WeightedFrame, WeightedFrame) {
    let (w, h) = (frame.width(), frame.height());
    assert_eq!(
        (seg.gamma_image.width(), seg.gamma_image.height()),
        (w, h),
        "segmentation size must match the frame"
    );
    let mut w_static = Image::new_fill(w, h, 0.0f64);
    let mut w_dynamic = Image::new_fill(w, h, 0.0f64);
    for y in 0..h {
        for x in 0..w {
            if frame.depth.get(x, y) > 0.0 {
                let g = f64::from(seg.gamma_image.get(x, y)).clamp(0.0, 1.0);
                w_static.set(x, y, g);
                w_dynamic.set(x, y, 1.0 - g);
            }
        }
    }
    (
        WeightedFrame { base: frame.clone(), weight: w_static },
        WeightedFrame { base: frame.clone(), weight: w_dynamic },
    )
}

fn voxel_key(p: &Vector3<f64>, cell: f64) -> (i64, i64, i64) {
    ((p.x / cell).floor() as i64, (p.y / cell).floor() as i64, (p.z / cell).floor() as i64)
}

/// Indexes `points` by voxel; returns the nearest point within the radius of
/// a query, if any. Cell size equals the radius, so scanning the 3x3x3
/// neighborhood around the query's cell covers every candidate.
struct VoxelGrid {
    cells: HashMap<(i64, i64, i64), Vec<usize>>,
    radius: f64,
}

impl VoxelGrid {
    fn build(points: &[ModelPoint], radius: f64) -> Self {
        let mut cells: HashMap<(i64, i64, i64), Vec<usize>> = HashMap::new();
        for (i, pt) in points.iter().enumerate() {
            cells.entry(voxel_key(&pt.position, radius)).or_default().push(i);
        }
        Self { cells, radius }
    }

    fn nearest_within(&self, points: &[ModelPoint], q: &Vector3<f64>) -> Option<usize> {
        let (cx, cy, cz) = voxel_key(q, self.radius);
        let mut best: Option<(usize, f64)> = None;
        for dz in -1..=1 {
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let Some(bucket) = self.cells.get(&(cx + dx, cy + dy, cz + dz)) else {
                        continue;
                    };
                    for &i in bucket {
                        let d2 = (points[i].position - q).norm_squared();
                        if d2 <= self.radius * self.radius
                            && best.is_none_or(|(_, bd2)| d2 < bd2)
                        {
                            best = Some((i, d2));
                        }
                    }
                }
            }
        }
        best.map(|(i, _)| i)
    }
}

/// Fuses one weighted frame into the model. `pose` maps camera coordinates to
/// the model frame. Every pixel whose weight exceeds [`W_MIN`] back-projects
/// to a model-frame point; if an existing point lies within `r_assoc` it is
/// blended (confidence-weighted average of position and intensity, weight
/// added to confidence), otherwise a new point is inserted. Association only
/// considers points that existed when the call started, so a frame fused into
/// an empty model contributes exactly one point per qualifying pixel.
///
/// Low-confidence points unseen for [`CULL_AGE`] frames are dropped at the
/// end, bounding memory without touching recent or well-observed geometry.
pub fn fuse(model: &mut PointModel, wf: &WeightedFrame, pose: &Pose, frame_idx: usize, r_assoc: f64) {
    assert!(r_assoc > 0.0, "association radius must be positive");
    let grid = VoxelGrid::build(&model.points, r_assoc);
    let existing = model.points.len();
    let frame = &wf.base;
    for y in 0..frame.height() {
        for x in 0..frame.width() {
            let weight = wf.weight.get(x, y);
            let z = f64::from(frame.depth.get(x, y));
            if weight <= W_MIN || z <= 0.0 {
                continue;
            }
            let Ok(p_cam) = frame.intrinsics.back_project(x as f64, y as f64, z) else {
                continue;
            };
            let p = pose.transform_point(&p_cam);
            let intensity = f64::from(frame.intensity.get(x, y));
            match grid.nearest_within(&model.points[..existing], &p) {
                Some(i) => {
                    let pt = &mut model.points[i];
                    let total = pt.confidence + weight;
                    pt.position = (pt.position * pt.confidence + p * weight) / total;
                    pt.intensity = (pt.intensity * pt.confidence + intensity * weight) / total;
                    pt.confidence = total;
                    pt.last_seen = frame_idx;
                }
                None => model.points.push(ModelPoint {
                    position: p,
                    intensity,
                    confidence: weight,
                    last_seen: frame_idx,
                }),
            }
        }
    }
    model
        .points
        .retain(|pt| pt.confidence >= CULL_CONFIDENCE || frame_idx.saturating_sub(pt.last_seen) < CULL_AGE);
    model.pose_history.push(*pose);
}

/// Renders the model into a virtual camera at `pose` (camera-to-model, same
/// convention as [`fuse`]) with 1-pixel z-buffered splats. Pixels no point
/// lands on keep invalid depth.
pub fn render_model(model: &PointModel, pose: &Pose, k: &Intrinsics) -> Result<RgbdFrame, MapError> {
    if model.is_empty() {
        return Err(MapError::EmptyModel);
    }
    let to_camera = pose.inverse();
    let mut depth = Image::new_fill(k.width, k.height, 0.0f32);
    let mut intensity = Image::new_fill(k.width, k.height, 0.0f32);
    for pt in &model.points {
        let q = to_camera.transform_point(&pt.position);
        let Ok((u, v)) = k.project(&q) else { continue };
        let (x, y) = (u.round(), v.round());
        if x < 0.0 || y < 0.0 || x >= k.width as f64 || y >= k.height as f64 {
            continue;
        }
        let (x, y) = (x as usize, y as usize);
        let old = depth.get(x, y);
        if old <= 0.0 || (q.z as f32) < old {
            depth.set(x, y, q.z as f32);
            intensity.set(x, y, pt.intensity as f32);
        }
    }
    Ok(RgbdFrame::new(intensity, depth, 0.0, *k).expect("render buffers match intrinsics"))
}

/// Refines a frame-to-frame motion estimate against the model.
///
/// The model is rendered at `render_pose` (the previous camera pose in the
/// model frame) to stand in for the previous frame, then the weighted live
/// frame is aligned to it starting from `init` with no prior pull. The data
/// term alone decides, so this never fights the per-pair estimate — it only
/// re-anchors it to accumulated geometry. If fewer than 20% of image pixels
/// produce valid residual samples under `init` (sparse model, bad prediction,
/// near-total occlusion), the refinement is skipped and `init` returned
/// unchanged.
pub fn refine_frame_to_model(
    model: &PointModel,
    render_pose: &Pose,
    wf: &WeightedFrame,
    init: &Twist,
    cfg: &RobustConfig,
    iters: usize,
) -> Twist {
    let Ok(rendered) = render_model(model, render_pose, &wf.base.intrinsics) else {
        return *init;
    };
    let t_init = Pose::exp(init);
    let mut samples = 0usize;
    for y in 0..wf.base.height() {
        for x in 0..wf.base.width() {
            if wf.weight.get(x, y) <= 0.0 || wf.base.depth.get(x, y) <= 0.0 {
                continue;
            }
            let Some((u, v)) = crate::alignment::warp((x, y), &t_init, &wf.base) else {
                continue;
            };
            if rendered.depth.in_bounds(u, v) {
                let (x0, y0, _, _) = rendered.depth.cell(u, v);
                let corners_valid = [(0, 0), (1, 0), (0, 1), (1, 1)]
                    .iter()
                    .all(|&(dx, dy)| rendered.depth.get(x0 + dx, y0 + dy) > 0.0);
                if corners_valid {
                    samples += 1;
                }
            }
        }
    }
    let total = wf.base.width() * wf.base.height();
    if (samples as f64) < MIN_OVERLAP * total as f64 {
        return *init;
    }
    estimate_motion_weighted(&wf.base, &rendered, &wf.weight, init, &Twist::zero(), 0.0, cfg, iters)
        .unwrap_or(*init)
}

/// Writes the model as ASCII PLY with per-vertex `x y z intensity confidence`,
/// in insertion order. Numbers are written with full round-trip precision.
pub fn export_ply(model: &PointModel, path: &Path) -> Result<(), MapError> {
    let mut out = String::new();
    out.push_str("ply\nformat ascii 1.0\n");
    let _ = writeln!(out, "element vertex {}", model.points.len());
    out.push_str(
        "property float x\nproperty float y\nproperty float z\n\
         property float intensity\nproperty float confidence\nend_header\n",
    );
    for pt in &model.points {
        let _ = writeln!(
            out,
            "{} {} {} {} {}",
            pt.position.x, pt.position.y, pt.position.z, pt.intensity, pt.confidence
        );
    }
    std::fs::write(path, out).map_err(|source| MapError::Io { path: path.to_path_buf(), source })
}

/// Reads a PLY written by [`export_ply`]. `last_seen` is not stored in the
/// file and resets to zero.
pub fn read_ply(path: &Path) -> Result<PointModel, MapError> {
    let text = std::fs::read_to_string(path)
        .map_err(|source| MapError::Io { path: path.to_path_buf(), source })?;
    let err = |line: usize, msg: &str| MapError::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.to_string(),
    };

    let mut lines = text.lines().enumerate();
    let mut vertex_count: Option<usize> = None;
    let mut header_done = false;
    for (idx, line) in lines.by_ref() {
        let line = line.trim();
        match idx {
            0 if line != "ply" => return Err(err(1, "missing ply magic")),
            1 if line != "format ascii 1.0" => return Err(err(2, "only ascii 1.0 is supported")),
            _ => {}
        }
        if let Some(count) = line.strip_prefix("element vertex ") {
            vertex_count =
                Some(count.trim().parse().map_err(|_| err(idx + 1, "bad vertex count"))?);
        }
        if line == "end_header" {
            header_done = true;
            break;
        }
    }
    if !header_done {
        return Err(err(text.lines().count(), "missing end_header"));
    }
    let expected = vertex_count.ok_or_else(|| err(1, "missing element vertex declaration"))?;

    let mut model = PointModel::new();
    for (idx, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<f64> = line
            .split_whitespace()
            .map(str::parse)
            .collect::<Result<_, _>>()
            .map_err(|_| err(idx + 1, "non-numeric vertex field"))?;
        if fields.len() != 5 {
            return Err(err(idx + 1, "expected 5 fields per vertex"));
        }
        model.points.push(ModelPoint {
            position: Vector3::new(fields[0], fields[1], fields[2]),
            intensity: fields[3],
            confidence: fields[4],
            last_seen: 0,
        });
    }
    if model.points.len() != expected {
        return Err(err(
            text.lines().count(),
            &format!("header declares {expected} vertices, found {}", model.points.len()),
        ));
    }
    Ok(model)
}
