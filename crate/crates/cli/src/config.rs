//! Flat `key = value` configuration files.
//!
//! One key per line, `#` starts a comment, later assignments win. Unknown
//! keys are hard errors with the offending line number — a silently ignored
//! typo is worse than a refused run.

use std::path::{Path, PathBuf};

use duet_core::alignment::RobustMode;
use duet_core::solver::SolverConfig;
use duet_core::synth::{MotionSpec, RatioMode, SceneConfig};
use duet_core::Intrinsics;
use nalgebra::Vector3;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {msg}")]
    Value { path: PathBuf, line: usize, msg: String },
    #[error("{path}:{line}: unknown key {key:?}")]
    UnknownKey { path: PathBuf, line: usize, key: String },
    #[error("{path}: {msg}")]
    Invalid { path: PathBuf, msg: String },
}

/// `(line number, key, value)` triples with comments and blanks removed.
fn parse_lines(path: &Path, text: &str) -> Result<Vec<(usize, String, String)>, ConfigError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(ConfigError::Value {
                path: path.to_path_buf(),
                line: i + 1,
                msg: format!("expected `key = value`, got {line:?}"),
            });
        };
        out.push((i + 1, key.trim().to_string(), value.trim().to_string()));
    }
    Ok(out)
}

/// Typed value parsing with the file position baked into every error.
struct At<'a> {
    path: &'a Path,
    line: usize,
}

impl At<'_> {
    fn err(&self, msg: String) -> ConfigError {
        ConfigError::Value { path: self.path.to_path_buf(), line: self.line, msg }
    }

    fn f64(&self, v: &str) -> Result<f64, ConfigError> {
        v.parse().map_err(|_| self.err(format!("expected a number, got {v:?}")))
    }

    fn usize(&self, v: &str) -> Result<usize, ConfigError> {
        v.parse().map_err(|_| self.err(format!("expected a non-negative integer, got {v:?}")))
    }

    fn u64(&self, v: &str) -> Result<u64, ConfigError> {
        v.parse().map_err(|_| self.err(format!("expected a non-negative integer, got {v:?}")))
    }

    fn bool(&self, v: &str) -> Result<bool, ConfigError> {
        match v {
            "true" => Ok(true),
            "false" => Ok(false),
            _ => Err(self.err(format!("expected true or false, got {v:?}"))),
        }
    }

    fn vec3(&self, v: &str) -> Result<Vector3<f64>, ConfigError> {
        let parts: Vec<&str> =
            v.split(|c: char| c == ',' || c.is_whitespace()).filter(|s| !s.is_empty()).collect();
        if parts.len() != 3 {
            return Err(self.err(format!("expected three numbers, got {v:?}")));
        }
        Ok(Vector3::new(self.f64(parts[0])?, self.f64(parts[1])?, self.f64(parts[2])?))
    }

    fn f64_list(&self, v: &str) -> Result<Vec<f64>, ConfigError> {
        let parts: Vec<&str> =
            v.split(|c: char| c == ',' || c.is_whitespace()).filter(|s| !s.is_empty()).collect();
        if parts.is_empty() {
            return Err(self.err("expected at least one number".into()));
        }
        parts.iter().map(|p| self.f64(p)).collect()
    }
}

/// Where per-pair motion priors come from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PriorSource {
    /// `priors_camera.txt` / `priors_object.txt` next to the association file.
    Auto,
    /// No prior: constant-velocity initialization, prior energy off, gate off.
    None,
    /// Explicit twist file.
    File(PathBuf),
}

impl PriorSource {
    fn parse(v: &str) -> Self {
        match v {
            "auto" => PriorSource::Auto,
            "none" => PriorSource::None,
            other => PriorSource::File(PathBuf::from(other)),
        }
    }

    fn echo(&self) -> String {
        match self {
            PriorSource::Auto => "auto".into(),
            PriorSource::None => "none".into(),
            PriorSource::File(p) => p.display().to_string(),
        }
    }
}

/// Every tunable of the per-sequence pipeline. The manifest written by a run
/// is an echo of this structure and parses back into it.
#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub pyramid_levels: usize,
    pub solver: SolverConfig,
    /// Smoothness/temporal weight of the score subproblem.
    pub lambda_r: f64,
    /// Prior-separation gate threshold.
    pub d_hat: f64,
    /// Prior-noise band for the adaptive prior energy switch.
    pub n_hat: f64,
    /// Depth PNG quantization (units per meter).
    pub depth_scale: f64,
    pub priors_camera: PriorSource,
    pub priors_object: PriorSource,
    /// Keep the camera prior's energy term. When off, loaded prior values
    /// still serve as initialization, but the solver is not pulled toward
    /// them and they cannot trigger the static gate.
    pub regularize_camera: bool,
    /// Same switch for the object prior.
    pub regularize_object: bool,
    /// Refine each pair's motions against the fused models.
    pub frame_to_model: bool,
    pub map_refine_iters: usize,
    /// Point association radius for fusion, meters.
    pub fusion_radius: f64,
    /// Process at most this many frames; 0 means the whole sequence.
    pub max_frames: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            pyramid_levels: 3,
            solver: SolverConfig::default(),
            lambda_r: 2.0,
            d_hat: 0.01,
            n_hat: 0.01,
            depth_scale: 5000.0,
            priors_camera: PriorSource::Auto,
            priors_object: PriorSource::Auto,
            regularize_camera: true,
            regularize_object: true,
            frame_to_model: true,
            map_refine_iters: 6,
            fusion_radius: duet_core::mapping::R_ASSOC,
            max_frames: 0,
        }
    }
}

impl PipelineConfig {
    /// Applies one key. `Ok(false)` means the key is not a pipeline key (the
    /// sweep parser then offers it to the scene config).
    fn apply(&mut self, at: &At, key: &str, value: &str) -> Result<bool, ConfigError> {
        match key {
            "pyramid_levels" => self.pyramid_levels = at.usize(value)?,
            "clusters" => self.solver.clusters = at.usize(value)?,
            "cluster_iters" => self.solver.cluster_iters = at.usize(value)?,
            "seed" => self.solver.cluster_seed = at.u64(value)?,
            "adjacency_delta" => self.solver.adjacency_delta = at.f64(value)?,
            "outer_iters" => self.solver.outer_iters = at.usize(value)?,
            "gn_iters" => self.solver.gn_iters = at.usize(value)?,
            "gamma_sweeps" => self.solver.gamma_sweeps = at.usize(value)?,
            "support_min" => self.solver.support_min = at.f64(value)?,
            "single_body" => self.solver.single_body = at.bool(value)?,
            "alpha_intensity" => self.solver.robust.alpha_intensity = at.f64(value)?,
            "cauchy_mode" => {
                self.solver.robust.mode = match value {
                    "fixed" => RobustMode::Fixed,
                    "mad" => RobustMode::MadAdaptive,
                    _ => return Err(at.err(format!("expected fixed or mad, got {value:?}"))),
                }
            }
            "cauchy_intensity" => self.solver.robust.c_intensity = at.f64(value)?,
            "cauchy_depth" => self.solver.robust.c_depth = at.f64(value)?,
            "depth_weight_k" => self.solver.robust.depth_weight_k = at.f64(value)?,
            "lambda_r" => self.lambda_r = at.f64(value)?,
            "d_hat" => self.d_hat = at.f64(value)?,
            "n_hat" => self.n_hat = at.f64(value)?,
            "depth_scale" => self.depth_scale = at.f64(value)?,
            "priors_camera" => self.priors_camera = PriorSource::parse(value),
            "priors_object" => self.priors_object = PriorSource::parse(value),
            "regularize_camera" => self.regularize_camera = at.bool(value)?,
            "regularize_object" => self.regularize_object = at.bool(value)?,
            "frame_to_model" => self.frame_to_model = at.bool(value)?,
            "map_refine_iters" => self.map_refine_iters = at.usize(value)?,
            "fusion_radius" => self.fusion_radius = at.f64(value)?,
            "max_frames" => self.max_frames = at.usize(value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn from_str_named(text: &str, path: &Path) -> Result<Self, ConfigError> {
        let mut cfg = PipelineConfig::default();
        for (line, key, value) in parse_lines(path, text)? {
            let at = At { path, line };
            if !cfg.apply(&at, &key, &value)? {
                return Err(ConfigError::UnknownKey { path: path.to_path_buf(), line, key });
            }
        }
        cfg.validate(path)?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        Self::from_str_named(&text, path)
    }

    fn validate(&self, path: &Path) -> Result<(), ConfigError> {
        let bad = |msg: &str| ConfigError::Invalid { path: path.to_path_buf(), msg: msg.into() };
        if self.pyramid_levels == 0 {
            return Err(bad("pyramid_levels must be at least 1"));
        }
        if self.solver.clusters == 0 {
            return Err(bad("clusters must be at least 1"));
        }
        if !(self.fusion_radius > 0.0) {
            return Err(bad("fusion_radius must be positive"));
        }
        if !(self.depth_scale > 0.0) {
            return Err(bad("depth_scale must be positive"));
        }
        for (name, v) in [("d_hat", self.d_hat), ("n_hat", self.n_hat), ("lambda_r", self.lambda_r)]
        {
            if !(v >= 0.0) {
                return Err(bad(&format!("{name} must be non-negative")));
            }
        }
        Ok(())
    }

    /// Serializes every field back to config syntax; parsing the result
    /// reproduces `self`.
    pub fn echo(&self) -> String {
        let mode = match self.solver.robust.mode {
            RobustMode::Fixed => "fixed",
            RobustMode::MadAdaptive => "mad",
        };
        format!(
            "pyramid_levels = {}\n\
             clusters = {}\n\
             cluster_iters = {}\n\
             seed = {}\n\
             adjacency_delta = {}\n\
             outer_iters = {}\n\
             gn_iters = {}\n\
             gamma_sweeps = {}\n\
             support_min = {}\n\
             single_body = {}\n\
             alpha_intensity = {}\n\
             cauchy_mode = {mode}\n\
             cauchy_intensity = {}\n\
             cauchy_depth = {}\n\
             depth_weight_k = {}\n\
             lambda_r = {}\n\
             d_hat = {}\n\
             n_hat = {}\n\
             depth_scale = {}\n\
             priors_camera = {}\n\
             priors_object = {}\n\
             regularize_camera = {}\n\
             regularize_object = {}\n\
             frame_to_model = {}\n\
             map_refine_iters = {}\n\
             fusion_radius = {}\n\
             max_frames = {}\n",
            self.pyramid_levels,
            self.solver.clusters,
            self.solver.cluster_iters,
            self.solver.cluster_seed,
            self.solver.adjacency_delta,
            self.solver.outer_iters,
            self.solver.gn_iters,
            self.solver.gamma_sweeps,
            self.solver.support_min,
            self.solver.single_body,
            self.solver.robust.alpha_intensity,
            self.solver.robust.c_intensity,
            self.solver.robust.c_depth,
            self.solver.robust.depth_weight_k,
            self.lambda_r,
            self.d_hat,
            self.n_hat,
            self.depth_scale,
            self.priors_camera.echo(),
            self.priors_object.echo(),
            self.regularize_camera,
            self.regularize_object,
            self.frame_to_model,
            self.map_refine_iters,
            self.fusion_radius,
            self.max_frames,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum MotionKind {
    Static,
    Line,
    Zigzag,
}

/// Decomposed motion parameters, so a file can change the speed without
/// restating the direction and vice versa.
#[derive(Debug, Clone)]
struct MotionKeys {
    kind: MotionKind,
    dir: Vector3<f64>,
    speed: f64,
    perp: Vector3<f64>,
    perp_speed: f64,
    period: usize,
}

impl MotionKeys {
    fn from_spec(spec: &MotionSpec) -> Self {
        let mut keys = MotionKeys {
            kind: MotionKind::Static,
            dir: Vector3::new(1.0, 0.0, 0.0),
            speed: 0.0,
            perp: Vector3::new(0.0, 1.0, 0.0),
            perp_speed: 0.1,
            period: 15,
        };
        match *spec {
            MotionSpec::Static => {}
            MotionSpec::Line { dir, speed } => {
                keys.kind = MotionKind::Line;
                keys.dir = dir;
                keys.speed = speed;
            }
            MotionSpec::Zigzag { dir, speed, perp, perp_speed, period } => {
                keys.kind = MotionKind::Zigzag;
                keys.dir = dir;
                keys.speed = speed;
                keys.perp = perp;
                keys.perp_speed = perp_speed;
                keys.period = period;
            }
        }
        keys
    }

    fn build(&self) -> MotionSpec {
        match self.kind {
            MotionKind::Static => MotionSpec::Static,
            MotionKind::Line => MotionSpec::Line { dir: self.dir, speed: self.speed },
            MotionKind::Zigzag => MotionSpec::Zigzag {
                dir: self.dir,
                speed: self.speed,
                perp: self.perp,
                perp_speed: self.perp_speed,
                period: self.period,
            },
        }
    }

    /// `prefix` is `camera` or `object`.
    fn apply(&mut self, at: &At, suffix: &str, value: &str) -> Result<bool, ConfigError> {
        match suffix {
            "motion" => {
                self.kind = match value {
                    "static" => MotionKind::Static,
                    "line" => MotionKind::Line,
                    "zigzag" => MotionKind::Zigzag,
                    _ => {
                        return Err(at.err(format!("expected static, line or zigzag, got {value:?}")))
                    }
                }
            }
            "dir" => self.dir = at.vec3(value)?,
            "speed" => self.speed = at.f64(value)?,
            "perp" => self.perp = at.vec3(value)?,
            "perp_speed" => self.perp_speed = at.f64(value)?,
            "period" => self.period = at.usize(value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// Scene description file: everything `SceneConfig` exposes plus the depth
/// quantization used when exporting.
#[derive(Debug, Clone)]
pub struct SceneFile {
    pub scene: SceneConfig,
    pub depth_scale: f64,
}

/// Builder that keeps intrinsics-related keys separate until the end, so the
/// principal point can default to the image center of whatever size the file
/// picked.
#[derive(Debug, Clone)]
struct SceneBuilder {
    scene: SceneConfig,
    camera: MotionKeys,
    object: MotionKeys,
    width: usize,
    height: usize,
    fx: f64,
    fy: Option<f64>,
    cx: Option<f64>,
    cy: Option<f64>,
    depth_scale: f64,
}

impl SceneBuilder {
    fn new() -> Self {
        let scene = SceneConfig::default_scene();
        SceneBuilder {
            camera: MotionKeys::from_spec(&scene.camera_motion),
            object: MotionKeys::from_spec(&scene.object_motion),
            width: scene.intrinsics.width,
            height: scene.intrinsics.height,
            fx: scene.intrinsics.fx,
            fy: None,
            cx: None,
            cy: None,
            depth_scale: 5000.0,
            scene,
        }
    }

    fn apply(&mut self, at: &At, key: &str, value: &str) -> Result<bool, ConfigError> {
        if let Some(suffix) = key.strip_prefix("camera_") {
            if self.camera.apply(at, suffix, value)? {
                return Ok(true);
            }
        }
        if let Some(suffix) = key.strip_prefix("object_") {
            if self.object.apply(at, suffix, value)? {
                return Ok(true);
            }
        }
        match key {
            "width" => self.width = at.usize(value)?,
            "height" => self.height = at.usize(value)?,
            "fx" => self.fx = at.f64(value)?,
            "fy" => self.fy = Some(at.f64(value)?),
            "cx" => self.cx = Some(at.f64(value)?),
            "cy" => self.cy = Some(at.f64(value)?),
            "z_bg" => self.scene.z_bg = at.f64(value)?,
            "box_x" => self.scene.box_size.x = at.f64(value)?,
            "box_y" => self.scene.box_size.y = at.f64(value)?,
            "box_z" => self.scene.box_size.z = at.f64(value)?,
            "frames" => self.scene.frames = at.usize(value)?,
            "fps" => self.scene.fps = at.f64(value)?,
            "dynamic_ratio" => self.scene.target_dynamic_ratio = at.f64(value)?,
            "ratio_mode" => {
                self.scene.ratio_mode = match value {
                    "distance" => RatioMode::Distance,
                    "size" => RatioMode::Size,
                    _ => return Err(at.err(format!("expected distance or size, got {value:?}"))),
                }
            }
            "object_start" => self.scene.object_start = at.usize(value)?,
            "object_stop" => self.scene.object_stop = at.usize(value)?,
            "noise_depth" => self.scene.noise_depth = at.f64(value)?,
            "noise_intensity" => self.scene.noise_intensity = at.f64(value)?,
            "depth_shadow_px" => self.scene.depth_shadow_px = at.usize(value)?,
            "texture_seed" => self.scene.texture_seed = at.u64(value)?,
            "seed" => self.scene.seed = at.u64(value)?,
            "camera_drift_trans" => self.scene.camera_drift.trans = at.f64(value)?,
            "camera_drift_rot" => self.scene.camera_drift.rot = at.f64(value)?,
            "object_drift_trans" => self.scene.object_drift.trans = at.f64(value)?,
            "object_drift_rot" => self.scene.object_drift.rot = at.f64(value)?,
            "depth_scale" => self.depth_scale = at.f64(value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn build(mut self, path: &Path) -> Result<SceneFile, ConfigError> {
        let fy = self.fy.unwrap_or(self.fx);
        let cx = self.cx.unwrap_or((self.width as f64 - 1.0) / 2.0);
        let cy = self.cy.unwrap_or((self.height as f64 - 1.0) / 2.0);
        self.scene.intrinsics = Intrinsics::new(self.fx, fy, cx, cy, self.width, self.height)
            .map_err(|e| ConfigError::Invalid { path: path.to_path_buf(), msg: e.to_string() })?;
        self.scene.camera_motion = self.camera.build();
        self.scene.object_motion = self.object.build();
        if !(self.depth_scale > 0.0) {
            return Err(ConfigError::Invalid {
                path: path.to_path_buf(),
                msg: "depth_scale must be positive".into(),
            });
        }
        Ok(SceneFile { scene: self.scene, depth_scale: self.depth_scale })
    }
}

impl SceneFile {
    pub fn from_str_named(text: &str, path: &Path) -> Result<Self, ConfigError> {
        let mut b = SceneBuilder::new();
        for (line, key, value) in parse_lines(path, text)? {
            let at = At { path, line };
            if !b.apply(&at, &key, &value)? {
                return Err(ConfigError::UnknownKey { path: path.to_path_buf(), line, key });
            }
        }
        b.build(path)
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        Self::from_str_named(&text, path)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    DynamicRatio,
    Drift,
}

/// Sweep description: a base scene, a pipeline setup, and the axis to vary.
/// Scene and pipeline keys share the file; `seed` and `depth_scale` apply to
/// both sides.
#[derive(Debug, Clone)]
pub struct SweepConfig {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
    pub scene: SceneConfig,
    pub pipeline: PipelineConfig,
    pub depth_scale: f64,
}

impl SweepConfig {
    pub fn from_str_named(text: &str, path: &Path) -> Result<Self, ConfigError> {
        let mut axis = None;
        let mut values: Vec<f64> = Vec::new();
        let mut pipeline = PipelineConfig::default();
        let mut builder = SceneBuilder::new();

        for (line, key, value) in parse_lines(path, text)? {
            let at = At { path, line };
            let claimed = match key.as_str() {
                "sweep_axis" => {
                    axis = Some(match value.as_str() {
                        "dynamic_ratio" => SweepAxis::DynamicRatio,
                        "drift" => SweepAxis::Drift,
                        _ => {
                            return Err(at
                                .err(format!("expected dynamic_ratio or drift, got {value:?}")))
                        }
                    });
                    true
                }
                "sweep_values" => {
                    values = at.f64_list(&value)?;
                    true
                }
                // Shared keys configure both halves.
                "seed" | "depth_scale" => {
                    pipeline.apply(&at, &key, &value)? && builder.apply(&at, &key, &value)?
                }
                _ => pipeline.apply(&at, &key, &value)? || builder.apply(&at, &key, &value)?,
            };
            if !claimed {
                return Err(ConfigError::UnknownKey { path: path.to_path_buf(), line, key });
            }
        }

        let axis = axis.ok_or_else(|| ConfigError::Invalid {
            path: path.to_path_buf(),
            msg: "sweep_axis is required".into(),
        })?;
        if values.is_empty() {
            return Err(ConfigError::Invalid {
                path: path.to_path_buf(),
                msg: "sweep_values is required".into(),
            });
        }
        pipeline.validate(path)?;
        let scene_file = builder.build(path)?;
        Ok(SweepConfig {
            axis,
            values,
            scene: scene_file.scene,
            pipeline,
            depth_scale: scene_file.depth_scale,
        })
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        Self::from_str_named(&text, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p() -> PathBuf {
        PathBuf::from("test.cfg")
    }

    #[test]
    fn empty_file_yields_defaults() {
        let cfg = PipelineConfig::from_str_named("", &p()).unwrap();
        assert_eq!(cfg.pyramid_levels, 3);
        assert_eq!(cfg.solver.clusters, 24);
        assert_eq!(cfg.lambda_r, 2.0);
        assert_eq!(cfg.d_hat, 0.01);
        assert_eq!(cfg.n_hat, 0.01);
        assert_eq!(cfg.priors_camera, PriorSource::Auto);
        assert!(cfg.frame_to_model);
    }

    #[test]
    fn comments_blanks_and_repeats_are_handled() {
        let text = "# header\n\nclusters = 12  # trailing comment\nclusters = 16\n";
        let cfg = PipelineConfig::from_str_named(text, &p()).unwrap();
        assert_eq!(cfg.solver.clusters, 16, "later assignment wins");
    }

    #[test]
    fn unknown_keys_are_hard_errors_with_position() {
        let err = PipelineConfig::from_str_named("clusterz = 12\n", &p()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("test.cfg:1"), "{msg}");
        assert!(msg.contains("clusterz"), "{msg}");

        let err = PipelineConfig::from_str_named("\n\ngn_iters = 4\nnope = 1\n", &p()).unwrap_err();
        assert!(err.to_string().contains(":4"), "{err}");
    }

    #[test]
    fn malformed_lines_and_values_report_their_line() {
        let err = PipelineConfig::from_str_named("just words\n", &p()).unwrap_err();
        assert!(err.to_string().contains("key = value"), "{err}");

        let err = PipelineConfig::from_str_named("gn_iters = many\n", &p()).unwrap_err();
        assert!(err.to_string().contains("test.cfg:1"), "{err}");

        let err = PipelineConfig::from_str_named("single_body = yes\n", &p()).unwrap_err();
        assert!(err.to_string().contains("true or false"), "{err}");

        let err = PipelineConfig::from_str_named("cauchy_mode = huber\n", &p()).unwrap_err();
        assert!(err.to_string().contains("fixed or mad"), "{err}");
    }

    #[test]
    fn prior_sources_parse_all_three_forms() {
        let text = "priors_camera = none\npriors_object = /tmp/obj.txt\n";
        let cfg = PipelineConfig::from_str_named(text, &p()).unwrap();
        assert_eq!(cfg.priors_camera, PriorSource::None);
        assert_eq!(cfg.priors_object, PriorSource::File(PathBuf::from("/tmp/obj.txt")));
    }

    #[test]
    fn validation_rejects_out_of_range_values() {
        for bad in ["pyramid_levels = 0", "fusion_radius = 0", "lambda_r = -1", "clusters = 0"] {
            assert!(
                matches!(
                    PipelineConfig::from_str_named(bad, &p()),
                    Err(ConfigError::Invalid { .. })
                ),
                "{bad} should be rejected"
            );
        }
    }

    #[test]
    fn echo_round_trips_through_the_parser() {
        let text = "clusters = 18\nseed = 9\ncauchy_mode = mad\npriors_object = none\nfusion_radius = 0.03\n";
        let cfg = PipelineConfig::from_str_named(text, &p()).unwrap();
        let back = PipelineConfig::from_str_named(&cfg.echo(), &p()).unwrap();
        assert_eq!(back.solver.clusters, 18);
        assert_eq!(back.solver.cluster_seed, 9);
        assert_eq!(back.solver.robust.mode, RobustMode::MadAdaptive);
        assert_eq!(back.priors_object, PriorSource::None);
        assert_eq!(back.fusion_radius, 0.03);
        assert_eq!(back.echo(), cfg.echo());
    }

    #[test]
    fn scene_files_override_defaults_and_rebuild_intrinsics() {
        let text = "width = 160\nheight = 120\nfx = 135\nframes = 6\ndynamic_ratio = 0.25\n\
                    camera_motion = zigzag\ncamera_perp_speed = 0.2\ncamera_period = 4\n\
                    object_motion = static\nseed = 3\n";
        let sf = SceneFile::from_str_named(text, &p()).unwrap();
        assert_eq!(sf.scene.intrinsics.width, 160);
        assert_eq!(sf.scene.intrinsics.cx, 79.5, "principal point follows the size");
        assert_eq!(sf.scene.frames, 6);
        assert_eq!(sf.scene.seed, 3);
        assert!(matches!(
            sf.scene.camera_motion,
            MotionSpec::Zigzag { perp_speed, period: 4, .. } if perp_speed == 0.2
        ));
        assert!(matches!(sf.scene.object_motion, MotionSpec::Static));
    }

    #[test]
    fn scene_vectors_accept_commas_and_spaces() {
        let sf = SceneFile::from_str_named("camera_dir = 0, 0, 1\n", &p()).unwrap();
        assert!(matches!(
            sf.scene.camera_motion,
            MotionSpec::Line { dir, .. } if dir == Vector3::new(0.0, 0.0, 1.0)
        ));
        let sf = SceneFile::from_str_named("object_dir = 0 1 0\n", &p()).unwrap();
        assert!(matches!(
            sf.scene.object_motion,
            MotionSpec::Line { dir, .. } if dir == Vector3::new(0.0, 1.0, 0.0)
        ));
        assert!(SceneFile::from_str_named("camera_dir = 1 2\n", &p()).is_err());
    }

    #[test]
    fn sweep_files_route_keys_to_both_halves() {
        let text = "sweep_axis = dynamic_ratio\nsweep_values = 0.2, 0.4, 0.6\n\
                    frames = 8\nclusters = 12\nseed = 5\ndepth_scale = 2000\n";
        let sw = SweepConfig::from_str_named(text, &p()).unwrap();
        assert_eq!(sw.axis, SweepAxis::DynamicRatio);
        assert_eq!(sw.values, vec![0.2, 0.4, 0.6]);
        assert_eq!(sw.scene.frames, 8);
        assert_eq!(sw.pipeline.solver.clusters, 12);
        assert_eq!(sw.scene.seed, 5, "shared seed reaches the scene");
        assert_eq!(sw.pipeline.solver.cluster_seed, 5, "shared seed reaches the solver");
        assert_eq!(sw.depth_scale, 2000.0);
        assert_eq!(sw.pipeline.depth_scale, 2000.0);

        assert!(SweepConfig::from_str_named("sweep_values = 1\n", &p()).is_err());
        assert!(SweepConfig::from_str_named("sweep_axis = drift\n", &p()).is_err());
        let err =
            SweepConfig::from_str_named("sweep_axis = drift\nsweep_values = 0.1\nwat = 1\n", &p())
                .unwrap_err();
        assert!(err.to_string().contains("wat"), "{err}");
    }
}
