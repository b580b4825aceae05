//! Sequence processing, dataset synthesis, sweeps, and evaluation.
//!
//! Everything here is deterministic: two runs over the same input with the
//! same configuration write bit-identical trajectory files. Errors carry the
//! frame index and pipeline stage they occurred in.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use duet_core::eval::{ate_rmse, rpe_rmse, seg_iou, Trajectory};
use duet_core::mapping::{
    export_ply, fuse, refine_frame_to_model, split_weighted, PointModel,
};
use duet_core::solver::{solve_joint, PriorPair, Segmentation};
use duet_core::synth::{export_tum, generate, SceneConfig};
use duet_core::tum;
use duet_core::{build_pyramid, Intrinsics, Pose, Twist};

use crate::config::{PipelineConfig, PriorSource, SweepAxis, SweepConfig};

/// Focal length assumed when a dataset ships no `calibration.txt`, scaled
/// from the common 640-wide RGB-D default.
const FALLBACK_FX_AT_640: f64 = 525.0;

/// In-memory results of one sequence run, alongside the files on disk.
#[derive(Debug)]
pub struct RunSummary {
    pub camera: Trajectory,
    pub object: Trajectory,
    pub pairs: usize,
    pub gated_pairs: usize,
    pub low_support_pairs: usize,
    pub static_points: usize,
    pub dynamic_points: usize,
}

fn stage<T>(r: std::result::Result<T, impl Into<anyhow::Error>>, frame: usize, name: &str) -> Result<T> {
    r.map_err(|e| e.into()).with_context(|| format!("frame {frame}, stage {name}"))
}

/// Loads calibration, or synthesizes a centered default from the first
/// frame's image size when the file is absent.
fn load_or_default_intrinsics(input: &Path) -> Result<Intrinsics> {
    let calib = input.join("calibration.txt");
    if calib.exists() {
        return Ok(tum::load_calibration(&calib)?);
    }
    let assoc_path = input.join("associations.txt");
    let text = fs::read_to_string(&assoc_path)
        .with_context(|| format!("{}", assoc_path.display()))?;
    let first_rgb = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .filter_map(|l| l.split_whitespace().nth(1))
        .next()
        .ok_or_else(|| anyhow!("{}: no entries", assoc_path.display()))?;
    let probe = tum::load_intensity_png(&input.join(first_rgb))?;
    let (w, h) = (probe.width(), probe.height());
    let f = FALLBACK_FX_AT_640 * w as f64 / 640.0;
    Ok(Intrinsics::new(f, f, (w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0, w, h)?)
}

/// Per-pair prior twists, or `None` for the constant-velocity fallback.
fn resolve_priors(
    source: &PriorSource,
    input: &Path,
    default_name: &str,
    pairs: usize,
) -> Result<Option<Vec<Twist>>> {
    let path = match source {
        PriorSource::None => return Ok(None),
        PriorSource::Auto => input.join(default_name),
        PriorSource::File(p) => p.clone(),
    };
    let priors = tum::load_priors(&path)?;
    if priors.len() < pairs {
        bail!(
            "{}: {} prior twists for {} frame pairs",
            path.display(),
            priors.len(),
            pairs
        );
    }
    Ok(Some(priors))
}

fn gamma_png_name(frame: usize) -> String {
    format!("frame_{frame:06}.png")
}

/// Processes a sequence directory end to end and writes all artifacts into
/// `output`: `est_camera.txt`, `est_object.txt`, per-frame score images under
/// `gamma/`, both fused models as PLY, and a replayable `run_manifest.txt`.
pub fn run_sequence(input: &Path, output: &Path, cfg: &PipelineConfig) -> Result<RunSummary> {
    let gamma_dir = output.join("gamma");
    fs::create_dir_all(&gamma_dir).with_context(|| format!("{}", gamma_dir.display()))?;

    let intrinsics = load_or_default_intrinsics(input).context("stage calibration")?;
    let mut frames = tum::load_tum_sequence(&input.join("associations.txt"), &intrinsics, cfg.depth_scale)
        .context("stage load")?;
    if cfg.max_frames > 0 {
        frames.truncate(cfg.max_frames);
    }
    if frames.is_empty() {
        bail!("stage load: sequence has no frames");
    }
    let pairs = frames.len() - 1;

    let cam_priors = resolve_priors(&cfg.priors_camera, input, "priors_camera.txt", pairs)
        .context("stage priors")?;
    let obj_priors = resolve_priors(&cfg.priors_object, input, "priors_object.txt", pairs)
        .context("stage priors")?;

    // World frame = first camera frame.
    let mut t_wc = vec![Pose::identity()];
    let mut t_wo = vec![Pose::identity()];
    let mut prev_seg = Segmentation::all_static(frames[0].width(), frames[0].height());
    let mut prev_xi_s = Twist::zero();
    let mut prev_xi_d = Twist::zero();
    let mut static_model = PointModel::new();
    let mut dynamic_model = PointModel::new();
    let mut gated_pairs = 0usize;
    let mut low_support_pairs = 0usize;

    // Frame 0 is all static by convention; its score image says so, and it
    // seeds the static model.
    stage(
        tum::save_gamma_png(&gamma_dir.join(gamma_png_name(0)), &prev_seg.gamma_image),
        0,
        "write",
    )?;
    {
        let (wf_s, _) = split_weighted(&frames[0], &prev_seg);
        fuse(&mut static_model, &wf_s, &t_wc[0], 0, cfg.fusion_radius);
    }

    let mut prev_pyr = stage(build_pyramid(&frames[0], cfg.pyramid_levels), 0, "pyramid")?;
    let solver_cfg = cfg.solver.clone();

    for t in 0..pairs {
        let frame = t + 1;
        let curr_pyr = stage(build_pyramid(&frames[frame], cfg.pyramid_levels), frame, "pyramid")?;

        let priors = PriorPair {
            xi_s_prior: cam_priors.as_ref().map_or(prev_xi_s, |p| p[t]),
            xi_d_prior: obj_priors.as_ref().map_or(prev_xi_d, |p| p[t]),
            d_hat: cfg.d_hat,
            n_hat: cfg.n_hat,
            lambda_r: cfg.lambda_r,
            regularize_s: cam_priors.is_some() && cfg.regularize_camera,
            regularize_d: obj_priors.is_some() && cfg.regularize_object,
        };

        let result = stage(
            solve_joint(&prev_pyr, &curr_pyr, &priors, &prev_seg, &solver_cfg),
            frame,
            "solve",
        )?;
        if result.gated_static {
            gated_pairs += 1;
        }
        if result.low_support {
            low_support_pairs += 1;
        }

        let (wf_s, wf_d) = split_weighted(&frames[frame], &result.segmentation);
        let mut xi_s = result.xi_s;
        let mut xi_d = result.xi_d;
        if cfg.frame_to_model {
            xi_s = refine_frame_to_model(
                &static_model,
                &t_wc[t],
                &wf_s,
                &xi_s,
                &solver_cfg.robust,
                cfg.map_refine_iters,
            );
            if result.gated_static {
                // A gated pair has one rigid motion; keeping the twists equal
                // keeps the object pose frozen exactly.
                xi_d = xi_s;
            } else {
                let t_oc = t_wo[t].inverse().compose(&t_wc[t]);
                xi_d = refine_frame_to_model(
                    &dynamic_model,
                    &t_oc,
                    &wf_d,
                    &xi_d,
                    &solver_cfg.robust,
                    cfg.map_refine_iters,
                );
            }
        }

        // T(xi_s) maps current camera coordinates into the previous camera
        // frame, so it composes directly onto the previous world pose. The
        // object pose follows from T(xi_d) = T_co(prev) * T_co(curr)^-1.
        let t_wc_next = t_wc[t].compose(&Pose::exp(&xi_s));
        let t_wo_next = t_wc_next
            .compose(&Pose::exp(&xi_d).inverse())
            .compose(&t_wc[t].inverse())
            .compose(&t_wo[t]);
        t_wc.push(t_wc_next);
        t_wo.push(t_wo_next);

        fuse(&mut static_model, &wf_s, &t_wc[frame], frame, cfg.fusion_radius);
        let t_oc_next = t_wo[frame].inverse().compose(&t_wc[frame]);
        fuse(&mut dynamic_model, &wf_d, &t_oc_next, frame, cfg.fusion_radius);

        stage(
            tum::save_gamma_png(&gamma_dir.join(gamma_png_name(frame)), &result.segmentation.gamma_image),
            frame,
            "write",
        )?;

        prev_seg = result.segmentation;
        prev_xi_s = xi_s;
        prev_xi_d = xi_d;
        prev_pyr = curr_pyr;
    }

    let camera = Trajectory::new(
        frames.iter().zip(&t_wc).map(|(f, p)| (f.timestamp, *p)).collect(),
    )
    .context("stage output")?;
    let object = Trajectory::new(
        frames.iter().zip(&t_wo).map(|(f, p)| (f.timestamp, *p)).collect(),
    )
    .context("stage output")?;
    camera.save(&output.join("est_camera.txt")).context("stage output")?;
    object.save(&output.join("est_object.txt")).context("stage output")?;
    export_ply(&static_model, &output.join("static_model.ply")).context("stage output")?;
    export_ply(&dynamic_model, &output.join("dynamic_model.ply")).context("stage output")?;

    let manifest = format!(
        "# duet run manifest\n# version = {}\n# input = {}\n{}",
        env!("CARGO_PKG_VERSION"),
        input.display(),
        cfg.echo(),
    );
    fs::write(output.join("run_manifest.txt"), manifest).context("stage output")?;

    Ok(RunSummary {
        camera,
        object,
        pairs,
        gated_pairs,
        low_support_pairs,
        static_points: static_model.len(),
        dynamic_points: dynamic_model.len(),
    })
}

/// Generates a synthetic dataset. The scene is validated (and rendered)
/// before anything is written, so an unreachable configuration leaves no
/// partial output behind.
pub fn synth_dataset(scene: &SceneConfig, depth_scale: f64, output: &Path) -> Result<()> {
    let seq = generate(scene).context("stage generate")?;
    fs::create_dir_all(output).with_context(|| format!("{}", output.display()))?;
    export_tum(&seq, scene, output, depth_scale).context("stage export")?;
    Ok(())
}

/// Evaluation of one run directory against its dataset's ground truth.
pub struct EvalReport {
    pub camera_ate_cm: f64,
    pub camera_rpe_cm_s: f64,
    pub object_ate_cm: Option<f64>,
    pub object_rpe_cm_s: Option<f64>,
    /// Time separation used for both RPE metrics: one second when the
    /// estimate spans that long, otherwise one frame step.
    pub rpe_delta_s: f64,
    /// Mean IoU over the frames where the ground-truth object moves, when
    /// ground truth and score images allow computing it.
    pub mean_iou: Option<f64>,
    pub iou_frames: usize,
}

impl EvalReport {
    /// Key-value form, one metric per line.
    pub fn results_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "camera_ate_cm = {}", self.camera_ate_cm);
        let _ = writeln!(out, "camera_rpe_cm_s = {}", self.camera_rpe_cm_s);
        if let Some(v) = self.object_ate_cm {
            let _ = writeln!(out, "object_ate_cm = {v}");
        }
        if let Some(v) = self.object_rpe_cm_s {
            let _ = writeln!(out, "object_rpe_cm_s = {v}");
        }
        let _ = writeln!(out, "rpe_delta_s = {}", self.rpe_delta_s);
        if let Some(v) = self.mean_iou {
            let _ = writeln!(out, "mean_iou = {v}");
        }
        let _ = writeln!(out, "iou_frames = {}", self.iou_frames);
        out
    }

    pub fn report_text(&self) -> String {
        let mut out = format!(
            "camera: ATE {:.4} cm, RPE {:.4} cm/s (delta {:.3} s)\n",
            self.camera_ate_cm, self.camera_rpe_cm_s, self.rpe_delta_s
        );
        if let (Some(a), Some(r)) = (self.object_ate_cm, self.object_rpe_cm_s) {
            let _ = writeln!(out, "object: ATE {a:.4} cm, RPE {r:.4} cm/s");
        }
        match self.mean_iou {
            Some(iou) => {
                let _ = writeln!(
                    out,
                    "segmentation: mean IoU {:.4} over {} moving frames",
                    iou, self.iou_frames
                );
            }
            None => out.push_str("segmentation: no moving frames to score\n"),
        }
        out
    }
}

/// One second when the trajectory spans that long, otherwise its frame step,
/// so relative-error metrics stay defined on short clips.
fn rpe_delta(traj: &Trajectory) -> f64 {
    let entries = traj.entries();
    if entries.len() < 2 {
        return 1.0;
    }
    let span = entries[entries.len() - 1].0 - entries[0].0;
    if span >= 1.0 {
        1.0
    } else {
        span / (entries.len() - 1) as f64
    }
}

/// Frames whose ground-truth object pose changed in the preceding pair.
fn moving_frames(cam_gt: &Trajectory, obj_gt: &Trajectory) -> Vec<usize> {
    let _ = cam_gt;
    let entries = obj_gt.entries();
    let mut out = Vec::new();
    for t in 1..entries.len() {
        let step = entries[t - 1].1.inverse().compose(&entries[t].1);
        let moved = step.log().map(|xi| xi.norm() > 1e-9).unwrap_or(true);
        if moved {
            out.push(t);
        }
    }
    out
}

/// Compares a run directory against the dataset it was produced from and
/// writes `report.txt` (prose) and `results.txt` (key = value) into the run
/// directory.
pub fn evaluate(truth_dir: &Path, run_dir: &Path) -> Result<EvalReport> {
    let cam_gt = Trajectory::load(&truth_dir.join("groundtruth_camera.txt"))
        .context("stage evaluate")?;
    let cam_est = Trajectory::load(&run_dir.join("est_camera.txt")).context("stage evaluate")?;
    let rpe_delta_s = rpe_delta(&cam_est);
    let camera_ate_cm = ate_rmse(&cam_gt, &cam_est).context("stage evaluate")?;
    let camera_rpe_cm_s = rpe_rmse(&cam_gt, &cam_est, rpe_delta_s).context("stage evaluate")?;

    let obj_gt_path = truth_dir.join("groundtruth_object.txt");
    let obj_est_path = run_dir.join("est_object.txt");
    let (mut object_ate_cm, mut object_rpe_cm_s) = (None, None);
    let mut obj_gt = None;
    if obj_gt_path.exists() && obj_est_path.exists() {
        let gt = Trajectory::load(&obj_gt_path).context("stage evaluate")?;
        let est = Trajectory::load(&obj_est_path).context("stage evaluate")?;
        object_ate_cm = Some(ate_rmse(&gt, &est).context("stage evaluate")?);
        object_rpe_cm_s = Some(rpe_rmse(&gt, &est, rpe_delta_s).context("stage evaluate")?);
        obj_gt = Some(gt);
    }

    // Segmentation is scored only where the object actually moves: a still
    // object belongs to the static body, and its ground-truth silhouette says
    // nothing about motion segmentation quality.
    let mut iou_sum = 0.0;
    let mut iou_frames = 0usize;
    if let Some(obj_gt) = &obj_gt {
        for f in moving_frames(&cam_gt, obj_gt) {
            if f >= cam_est.len() {
                break;
            }
            let name = gamma_png_name(f);
            let gamma_path = run_dir.join("gamma").join(&name);
            let mask_path = truth_dir.join("mask").join(&name);
            let depth_path = truth_dir.join("depth").join(&name);
            if !mask_path.exists() {
                continue;
            }
            let gamma = tum::load_gamma_png(&gamma_path).context("stage evaluate")?;
            let mask = tum::load_mask_png(&mask_path).context("stage evaluate")?;
            // Validity pattern only; the scale cancels.
            let depth = tum::load_depth_png(&depth_path, 5000.0).context("stage evaluate")?;
            iou_sum += seg_iou(&gamma, &mask, &depth);
            iou_frames += 1;
        }
    }
    let mean_iou = (iou_frames > 0).then(|| iou_sum / iou_frames as f64);

    let report = EvalReport {
        camera_ate_cm,
        camera_rpe_cm_s,
        object_ate_cm,
        object_rpe_cm_s,
        rpe_delta_s,
        mean_iou,
        iou_frames,
    };
    fs::write(run_dir.join("report.txt"), report.report_text()).context("stage evaluate")?;
    fs::write(run_dir.join("results.txt"), report.results_text()).context("stage evaluate")?;
    Ok(report)
}

/// One generate → run → evaluate cycle per axis value. Failures are recorded
/// in the table and the sweep continues. Returns the table path.
pub fn sweep(cfg: &SweepConfig, output: &Path) -> Result<PathBuf> {
    fs::create_dir_all(output).with_context(|| format!("{}", output.display()))?;
    let mut table = String::from("value\tcamera_ate_cm\tcamera_rpe_cm_s\tmean_iou\tstatus\n");

    for (i, &value) in cfg.values.iter().enumerate() {
        let mut scene = cfg.scene.clone();
        match cfg.axis {
            SweepAxis::DynamicRatio => scene.target_dynamic_ratio = value,
            SweepAxis::Drift => scene.camera_drift.trans = value,
        }
        let point = output.join(format!("point_{i:02}"));
        let dataset = point.join("dataset");
        let run_dir = point.join("run");

        let outcome = synth_dataset(&scene, cfg.depth_scale, &dataset)
            .and_then(|()| run_sequence(&dataset, &run_dir, &cfg.pipeline))
            .and_then(|_| evaluate(&dataset, &run_dir));
        match outcome {
            Ok(report) => {
                let iou = report
                    .mean_iou
                    .map_or_else(|| "-".to_string(), |v| v.to_string());
                let _ = writeln!(
                    table,
                    "{value}\t{}\t{}\t{iou}\tok",
                    report.camera_ate_cm, report.camera_rpe_cm_s
                );
            }
            Err(e) => {
                let msg = format!("{e:#}").replace(['\t', '\n'], " ");
                let _ = writeln!(table, "{value}\t-\t-\t-\tfailed: {msg}");
            }
        }
    }

    let path = output.join("results.tsv");
    fs::write(&path, table).with_context(|| format!("{}", path.display()))?;
    Ok(path)
}
